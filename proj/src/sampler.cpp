#include "gpnn/sampler.hpp"

#include <algorithm>
#include <ostream>
#include <random>

#include "gpnn/error.hpp"

namespace gpnn {

NodeSequenceBatch sample_sequences(const Graph& g, int depth_k, int max_len,
                                   std::optional<std::uint64_t> shuffle_seed) {
  if (depth_k < 0) throw ValidationError("sampling depth k must be >= 0");
  if (max_len < 1) throw ValidationError("max sequence length L must be >= 1");
  const Index n = g.num_nodes();

  NodeSequenceBatch batch;
  batch.depth_k = depth_k;
  batch.max_len = max_len;
  batch.indices = IndexMatrix::Zero(n, max_len);
  batch.mask = MaskMatrix::Constant(n, max_len, false);
  batch.lengths.assign(static_cast<std::size_t>(n), 0);

  // Visit stamps avoid clearing an N-sized array for every source node.
  std::vector<Index> stamp(static_cast<std::size_t>(n), -1);
  std::vector<Index> frontier, next;
  for (Index v = 0; v < n; ++v) {
    std::mt19937_64 rng(shuffle_seed.value_or(0) ^ (static_cast<std::uint64_t>(v) * 0x9E3779B97F4A7C15ull));
    Index len = 0;
    auto emit = [&](Index u) {
      batch.indices(v, len) = u;
      batch.mask(v, len) = true;
      ++len;
    };
    emit(v);
    stamp[v] = v;
    frontier.assign(1, v);
    for (int hop = 1; hop <= depth_k && len < max_len && !frontier.empty(); ++hop) {
      next.clear();
      for (Index w : frontier) {
        for (Index u : g.neighbors(w)) {
          if (stamp[u] == v) continue;
          stamp[u] = v;
          next.push_back(u);
        }
      }
      if (shuffle_seed) {
        std::sort(next.begin(), next.end());
        std::shuffle(next.begin(), next.end(), rng);
      } else {
        std::sort(next.begin(), next.end());
      }
      for (Index u : next) {
        if (len == max_len) break;
        emit(u);
      }
      frontier.swap(next);
    }
    batch.lengths[v] = len;
  }
  return batch;
}

std::optional<int> hop_of(const Graph& g, Index v, Index u, int k) {
  if (v < 0 || v >= g.num_nodes() || u < 0 || u >= g.num_nodes()) {
    throw IntegrityError("hop_of: node id out of range");
  }
  if (v == u) return 0;
  std::vector<char> seen(static_cast<std::size_t>(g.num_nodes()), 0);
  std::vector<Index> frontier{v}, next;
  seen[v] = 1;
  for (int hop = 1; hop <= k && !frontier.empty(); ++hop) {
    next.clear();
    for (Index w : frontier) {
      for (Index x : g.neighbors(w)) {
        if (seen[x]) continue;
        if (x == u) return hop;
        seen[x] = 1;
        next.push_back(x);
      }
    }
    frontier.swap(next);
  }
  return std::nullopt;
}

void write_sequences(std::ostream& out, const NodeSequenceBatch& batch) {
  for (Index v = 0; v < batch.num_nodes(); ++v) {
    out << v << ": ";
    for (Index j = 0; j < batch.width(); ++j) {
      if (j) out << ',';
      out << batch.indices(v, j);
    }
    out << " | ";
    for (Index j = 0; j < batch.width(); ++j) out << (batch.mask(v, j) ? '1' : '0');
    out << '\n';
  }
}

}  // namespace gpnn
