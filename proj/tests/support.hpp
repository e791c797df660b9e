#pragma once

#include <filesystem>
#include <fstream>
#include <random>
#include <string>
#include <vector>

#include "gpnn/graph.hpp"

namespace gpnn::testing {

class TempDir {
 public:
  TempDir() {
    static int counter = 0;
    path_ = std::filesystem::temp_directory_path() /
            ("gpnn_test_" + std::to_string(::getpid()) + "_" + std::to_string(counter++));
    std::filesystem::remove_all(path_);
    std::filesystem::create_directories(path_);
  }
  ~TempDir() { std::filesystem::remove_all(path_); }
  TempDir(const TempDir&) = delete;
  TempDir& operator=(const TempDir&) = delete;

  const std::filesystem::path& path() const { return path_; }
  std::filesystem::path operator/(const std::string& name) const { return path_ / name; }

 private:
  std::filesystem::path path_;
};

inline void write_file(const std::filesystem::path& p, const std::string& text) { std::ofstream(p) << text; }

inline std::string read_file(const std::filesystem::path& p) {
  std::ifstream in(p);
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

inline Graph make_graph(Index n, std::vector<Edge> edges, std::vector<int> labels, Index f = 2,
                        std::uint64_t seed = 1, int classes = -1) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> normal;
  RowMatrix x(n, f);
  for (Index i = 0; i < x.size(); ++i) x.data()[i] = normal(rng);
  return Graph(std::move(x), std::move(edges), std::move(labels), classes);
}

inline Graph path_graph(Index n, std::vector<int> labels = {}) {
  std::vector<Edge> e;
  for (Index i = 0; i + 1 < n; ++i) e.push_back({i, i + 1});
  if (labels.empty()) labels.assign(static_cast<std::size_t>(n), 0);
  return make_graph(n, std::move(e), std::move(labels));
}

inline Graph star_graph(Index leaves) {
  std::vector<Edge> e;
  for (Index i = 1; i <= leaves; ++i) e.push_back({0, i});
  return make_graph(leaves + 1, std::move(e), std::vector<int>(static_cast<std::size_t>(leaves + 1), 0));
}

/// Erdos-Renyi graph with labels drawn from `classes` values.
inline Graph random_graph(std::mt19937_64& rng, Index n, double p, int classes = 3, Index f = 3) {
  std::bernoulli_distribution coin(p);
  std::uniform_int_distribution<int> lab(0, classes - 1);
  std::vector<Edge> e;
  for (Index u = 0; u < n; ++u)
    for (Index v = u + 1; v < n; ++v)
      if (coin(rng)) e.push_back({u, v});
  std::vector<int> labels(static_cast<std::size_t>(n));
  for (auto& l : labels) l = lab(rng);
  return make_graph(n, std::move(e), std::move(labels), f, rng(), classes);
}

/// Dense adjacency for oracle computations.
inline Eigen::MatrixXd dense_adjacency(const Graph& g) {
  Eigen::MatrixXd a = Eigen::MatrixXd::Zero(g.num_nodes(), g.num_nodes());
  for (const auto& e : g.edges()) a(e.u, e.v) = a(e.v, e.u) = 1.0;
  return a;
}

}  // namespace gpnn::testing
