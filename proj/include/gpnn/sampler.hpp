#pragma once

#include <cstdint>
#include <iosfwd>
#include <optional>

#include "gpnn/graph.hpp"

namespace gpnn {

using IndexMatrix = Eigen::Matrix<Index, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MaskMatrix = Eigen::Array<bool, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

/// Per-node multi-hop sequences, padded to a common length.
///
/// Row v starts with v and continues with the BFS layers 1..k around v in
/// increasing distance. Padded slots hold id 0 with `mask == false`.
struct NodeSequenceBatch {
  IndexMatrix indices;
  MaskMatrix mask;
  std::vector<Index> lengths;
  int depth_k = 0;
  int max_len = 1;

  Index num_nodes() const { return indices.rows(); }
  Index width() const { return indices.cols(); }
};

/// Multi-hop sequence sampling. Members of one BFS layer are emitted in
/// ascending id order, or in a per-node seeded shuffle when
/// `shuffle_seed` is set. Rows stop at `max_len`, possibly mid-layer.
NodeSequenceBatch sample_sequences(const Graph& g, int depth_k, int max_len,
                                   std::optional<std::uint64_t> shuffle_seed = std::nullopt);

/// Shortest-path distance from v to u if it is at most k.
std::optional<int> hop_of(const Graph& g, Index v, Index u, int k);

/// `<v>: <id,id,...> | <mask bits>` per line.
void write_sequences(std::ostream& out, const NodeSequenceBatch& batch);

}  // namespace gpnn
