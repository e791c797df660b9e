#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include <Eigen/Core>
#include <Eigen/SparseCore>

namespace gpnn {

using Index = Eigen::Index;
using Scalar = double;
using RowMatrix = Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using SparseMatrix = Eigen::SparseMatrix<Scalar, Eigen::RowMajor>;

/// Undirected edge, stored with `u < v`.
struct Edge {
  Index u = 0;
  Index v = 0;

  friend bool operator==(const Edge&, const Edge&) = default;
  friend auto operator<=>(const Edge&, const Edge&) = default;
};

/// Immutable attributed graph: node features, undirected edge set (no
/// self-loops, no duplicates) and integer class labels.
class Graph {
 public:
  Graph() = default;

  /// Builds a graph over dense node ids [0, N). Edges are canonicalised
  /// (u < v), deduplicated and sorted; self-loops are dropped and counted.
  /// `num_classes < 0` infers C as max label + 1.
  Graph(RowMatrix features, std::vector<Edge> edges, std::vector<int> labels,
        int num_classes = -1, std::vector<std::int64_t> original_ids = {});

  Index num_nodes() const { return features_.rows(); }
  Index num_features() const { return features_.cols(); }
  Index num_edges() const { return static_cast<Index>(edges_.size()); }
  int num_classes() const { return num_classes_; }
  Index self_loops_dropped() const { return self_loops_dropped_; }

  const RowMatrix& features() const { return features_; }
  const std::vector<Edge>& edges() const { return edges_; }
  const std::vector<int>& labels() const { return labels_; }
  int label(Index v) const { return labels_[static_cast<std::size_t>(v)]; }

  /// Neighbours of `v` in ascending id order, excluding `v` itself.
  std::span<const Index> neighbors(Index v) const;
  Index degree(Index v) const { return offsets_[v + 1] - offsets_[v]; }

  /// File-level id of each dense node id.
  const std::vector<std::int64_t>& original_ids() const { return original_ids_; }

  /// Copy with a different label vector (same structure and features).
  Graph with_labels(std::vector<int> labels) const;

  friend bool operator==(const Graph& a, const Graph& b);

 private:
  RowMatrix features_;
  std::vector<Edge> edges_;
  std::vector<int> labels_;
  int num_classes_ = 0;
  Index self_loops_dropped_ = 0;
  std::vector<std::int64_t> original_ids_;
  std::vector<Index> offsets_;
  std::vector<Index> adjacency_;
};

/// One train/val/test partition of the node set.
struct SplitSet {
  std::vector<Index> train;
  std::vector<Index> val;
  std::vector<Index> test;
  int split_id = 0;

  friend bool operator==(const SplitSet&, const SplitSet&) = default;
};

inline constexpr int kNumSplits = 10;

/// D̂^{-1/2} (A + I) D̂^{-1/2} in compressed row form.
class NormalizedAdjacency {
 public:
  struct Entry {
    Index u;
    Index v;
    Scalar weight;
  };

  explicit NormalizedAdjacency(SparseMatrix m) : matrix_(std::move(m)) {}

  const SparseMatrix& matrix() const { return matrix_; }
  std::vector<Entry> entries() const;
  Scalar weight(Index u, Index v) const { return matrix_.coeff(u, v); }

 private:
  SparseMatrix matrix_;
};

// -----------------------------------------------------------------------------
// Ingestion
// -----------------------------------------------------------------------------

/// Reads the edge list and the `<id>\t<f,f,...>\t<label>` features file.
/// Node ids are remapped densely in features-file order. A `# classes: C`
/// comment fixes the class count; otherwise it is max label + 1.
Graph load_dataset(const std::filesystem::path& edges_path,
                   const std::filesystem::path& features_path);

/// Writes `g` back using its original ids; `load_dataset` of the output
/// reproduces `g` exactly.
void save_dataset(const Graph& g, const std::filesystem::path& edges_path,
                  const std::filesystem::path& features_path);

/// Sidecar `<original_id> <dense_id>` mapping.
void write_id_map(const Graph& g, const std::filesystem::path& path);

std::vector<SplitSet> load_splits(const std::filesystem::path& path, const Graph& g);
void save_splits(std::span<const SplitSet> splits, const std::filesystem::path& path);

/// Checks disjointness, index range and non-emptiness. Throws on failure.
void validate_split(const SplitSet& s, Index num_nodes);

/// Ten seeded random (unstratified) splits with the given fractions.
std::vector<SplitSet> generate_splits(const Graph& g, std::array<double, 3> fractions,
                                      std::uint64_t seed);

// -----------------------------------------------------------------------------
// Analytics
// -----------------------------------------------------------------------------

/// Mean over nodes of the fraction of (non-self) neighbours sharing the
/// node's label. Isolated nodes contribute 0; their count is written to
/// `isolated` when given.
double homophily_ratio(const Graph& g, Index* isolated = nullptr);

NormalizedAdjacency normalize_adjacency(const Graph& g);

}  // namespace gpnn
