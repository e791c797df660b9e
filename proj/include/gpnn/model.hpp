#pragma once

#include <memory>

#include "gpnn/autodiff.hpp"
#include "gpnn/config.hpp"
#include "gpnn/graph.hpp"
#include "gpnn/optim.hpp"
#include "gpnn/sampler.hpp"

namespace gpnn {

/// Everything a forward pass reads from the graph. Built once per run;
/// must outlive every loss computed from it.
struct ModelInputs {
  const Graph* graph = nullptr;
  NormalizedAdjacency adjacency{SparseMatrix()};
  NodeSequenceBatch batch;
  Var features;

  static std::shared_ptr<const ModelInputs> build(const Graph& g, const ModelConfig& cfg);
};

/// Result of the pointer decoder for every node.
struct PointerOutput {
  /// Chosen positions of the input sequence, -1 when the row ran out of
  /// candidates.
  IndexMatrix selected_indices;
  /// Softmax mass of each chosen position, 0 for -1 slots.
  RowMatrix selected_probs;
  /// (N, m, d) embeddings of the ranked selection.
  Var ranked_embeddings;
  /// true where selected_indices >= 0.
  MaskMatrix valid;
};

/// Recurrent cell used by the pointer encoder and decoder.
struct CellWeights {
  CellType type = CellType::tanh_cell;
  Var weight;  // (h + d) x h, or (h + d) x 4h for lstm
  Var bias;    // lstm only, 4h
};

struct CellState {
  Var hidden;
  Var cell;  // lstm only
};

CellState cell_step(const CellWeights& w, const CellState& prev, const Var& input);

struct AttentionWeights {
  Var w1;  // h x h
  Var w2;  // h x h
  Var v;   // h x 1
};

struct EncoderOutput {
  Var states;  // (N, L, h)
  CellState last;
};

/// X̂ = relu(Â X W) with the symmetric normalised adjacency.
Var gcn_embed(const Var& x, const NormalizedAdjacency& adj, const Var& weight);

/// Runs the encoder over (N, L, d) sequence embeddings. Masked positions
/// are fed as zeros; `last` holds the state at each row's final unmasked
/// position.
EncoderOutput run_encoder(const Var& seq, const MaskMatrix& mask, std::span<const Index> lengths,
                          const CellWeights& cell);

/// Selects `m` positions per row with the attention pointer. Already
/// chosen positions are removed from later steps.
PointerOutput decoder_select(const EncoderOutput& enc, const Var& seq, const MaskMatrix& mask, int m,
                             const CellWeights& cell, const AttentionWeights& attn, const Var& start_token,
                             SelectionMode mode);

/// pool(relu(conv1d(ranked))) over valid positions -> (N, d').
Var nonlocal_aggregate(const Var& ranked, const MaskMatrix& valid, const Var& filters, const Var& bias,
                       PoolMode pool);

/// Glorot-initialised parameters for `cfg.model`.
ParamSet init_params(const ModelConfig& cfg, Index in_features, int num_classes);

/// GPNN logits (N, C); stacks `cfg.effective_layers()` layers. When
/// `pointer` is given it receives the first layer's selection.
Var gpnn_forward(const ModelInputs& in, const ParamSet& params, const ModelConfig& cfg, bool training,
                 Rng& rng, PointerOutput* pointer = nullptr);

/// Same as `gpnn_forward`; exposed under the name used for depth sweeps.
Var stack_gpnn_layers(const ModelInputs& in, const ParamSet& params, const ModelConfig& cfg, bool training,
                      Rng& rng);

/// Two-layer perceptron on node features only.
Var baseline_mlp_forward(const Var& x, const ParamSet& params, const ModelConfig& cfg, bool training, Rng& rng);

/// `layers` stacked graph convolutions with relu in between.
Var baseline_gcn_forward(const Var& x, const NormalizedAdjacency& adj, const ParamSet& params,
                         const ModelConfig& cfg, bool training, Rng& rng, int layers);

/// Dispatches on `cfg.model`.
Var model_forward(const ModelInputs& in, const ParamSet& params, const ModelConfig& cfg, bool training, Rng& rng);

/// Runs the first layer's pointer with `m` decoding steps in evaluation mode.
PointerOutput rank_sequences(const ModelInputs& in, const ParamSet& params, const ModelConfig& cfg, int m);

/// Row-wise argmax of (N, C) logits.
std::vector<int> predict(const Var& logits);

}  // namespace gpnn
