#include "gpnn/optim.hpp"

#include <cmath>
#include <fstream>

#include <json.hpp>

#include "gpnn/error.hpp"

namespace gpnn {

Var& ParamSet::add(std::string name, Tensor init) {
  if (contains(name)) throw ValidationError("duplicate parameter name " + name);
  entries_.emplace_back(std::move(name), parameter(std::move(init)));
  return entries_.back().second;
}

bool ParamSet::contains(const std::string& name) const {
  for (const auto& [n, v] : entries_)
    if (n == name) return true;
  return false;
}

const Var& ParamSet::at(const std::string& name) const {
  for (const auto& [n, v] : entries_)
    if (n == name) return v;
  throw ValidationError("unknown parameter " + name);
}

Var& ParamSet::at(const std::string& name) {
  return const_cast<Var&>(std::as_const(*this).at(name));
}

Index ParamSet::num_scalars() const {
  Index n = 0;
  for (const auto& [name, v] : entries_) n += v.value().size();
  return n;
}

void ParamSet::zero_grad() {
  for (auto& [name, v] : entries_) v.zero_grad();
}

std::vector<Tensor> ParamSet::snapshot() const {
  std::vector<Tensor> out;
  out.reserve(entries_.size());
  for (const auto& [name, v] : entries_) out.push_back(v.value());
  return out;
}

void ParamSet::restore(const std::vector<Tensor>& values) {
  if (values.size() != entries_.size()) throw ValidationError("snapshot size mismatch");
  for (std::size_t i = 0; i < values.size(); ++i) {
    if (values[i].shape != entries_[i].second.shape()) throw ShapeError("snapshot shape mismatch for " + entries_[i].first);
    entries_[i].second.mutable_value() = values[i];
  }
}

void save_checkpoint(const ParamSet& params, const std::filesystem::path& path) {
  nlohmann::ordered_json doc = nlohmann::ordered_json::object();
  for (const auto& [name, v] : params.entries()) {
    const auto& d = v.value().data;
    doc[name] = {{"shape", v.shape()}, {"data", std::vector<double>(d.data(), d.data() + d.size())}};
  }
  std::ofstream out(path);
  if (!out) throw IntegrityError("cannot write checkpoint " + path.string());
  out << doc.dump(1) << '\n';
}

void load_checkpoint(ParamSet& params, const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw IntegrityError("cannot open checkpoint " + path.string());
  nlohmann::json doc;
  try {
    doc = nlohmann::json::parse(in);
  } catch (const nlohmann::json::parse_error& e) {
    throw ParseError(path.string(), 0, e.what());
  }
  if (doc.size() != params.size()) throw IntegrityError("checkpoint parameter count mismatch");
  for (auto& [name, v] : params.entries()) {
    if (!doc.contains(name)) throw IntegrityError("checkpoint lacks parameter " + name);
    const auto& e = doc.at(name);
    const auto shape = e.at("shape").get<Shape>();
    const auto data = e.at("data").get<std::vector<double>>();
    if (shape != v.shape()) throw ShapeError("checkpoint shape mismatch for " + name + ": " + to_string(shape) + " vs " + to_string(v.shape()));
    v.mutable_value() = Tensor(shape, Eigen::Map<const Eigen::VectorXd>(data.data(), static_cast<Index>(data.size())));
  }
}

void adam_step(ParamSet& params, AdamState& state, const AdamOptions& opt) {
  const auto& entries = params.entries();
  if (state.m.empty()) {
    for (const auto& [name, v] : entries) {
      state.m.push_back(Eigen::VectorXd::Zero(v.value().size()));
      state.v.push_back(Eigen::VectorXd::Zero(v.value().size()));
    }
  }
  if (state.m.size() != entries.size()) throw ShapeError("adam state does not match parameters");
  ++state.step;
  const double bc1 = 1.0 - std::pow(opt.beta1, static_cast<double>(state.step));
  const double bc2 = 1.0 - std::pow(opt.beta2, static_cast<double>(state.step));
  for (std::size_t i = 0; i < entries.size(); ++i) {
    Var p = entries[i].second;
    const Eigen::VectorXd& g = p.grad().data;
    auto& m = state.m[i];
    auto& v = state.v[i];
    if (m.size() != g.size()) throw ShapeError("adam state does not match parameter " + entries[i].first);
    m = opt.beta1 * m + (1.0 - opt.beta1) * g;
    v = opt.beta2 * v + (1.0 - opt.beta2) * g.cwiseProduct(g);
    Eigen::VectorXd& x = p.mutable_value().data;
    const Eigen::ArrayXd update = (m.array() / bc1) / ((v.array() / bc2).sqrt() + opt.eps);
    x.array() -= opt.lr * (update + opt.weight_decay * x.array());
  }
}

}  // namespace gpnn
