#pragma once

#include <filesystem>
#include <string>
#include <utility>
#include <vector>

#include "gpnn/autodiff.hpp"

namespace gpnn {

/// Named, ordered collection of trainable leaves.
class ParamSet {
 public:
  using Entry = std::pair<std::string, Var>;

  Var& add(std::string name, Tensor init);
  bool contains(const std::string& name) const;
  const Var& at(const std::string& name) const;
  Var& at(const std::string& name);

  const std::vector<Entry>& entries() const { return entries_; }
  std::vector<Entry>& entries() { return entries_; }
  std::size_t size() const { return entries_.size(); }
  Index num_scalars() const;

  void zero_grad();
  std::vector<Tensor> snapshot() const;
  void restore(const std::vector<Tensor>& values);

 private:
  std::vector<Entry> entries_;
};

/// JSON document mapping name -> {shape, data}. Values round-trip bit-exactly.
void save_checkpoint(const ParamSet& params, const std::filesystem::path& path);
/// Overwrites the values of `params`; names and shapes must match exactly.
void load_checkpoint(ParamSet& params, const std::filesystem::path& path);

struct AdamOptions {
  double lr = 0.01;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 0.0;
};

struct AdamState {
  long step = 0;
  std::vector<Eigen::VectorXd> m;
  std::vector<Eigen::VectorXd> v;
};

/// One bias-corrected Adam update over every parameter, followed by the
/// decoupled shrink `p -= lr * weight_decay * p`.
void adam_step(ParamSet& params, AdamState& state, const AdamOptions& opt);

}  // namespace gpnn
