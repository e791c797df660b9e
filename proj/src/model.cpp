#include "gpnn/model.hpp"

#include <cmath>

#include "gpnn/error.hpp"

namespace gpnn {

namespace {

Tensor glorot(Shape shape, Index fan_in, Index fan_out, Rng& rng) {
  const double a = std::sqrt(6.0 / static_cast<double>(fan_in + fan_out));
  std::uniform_real_distribution<double> u(-a, a);
  Tensor t(std::move(shape));
  for (Index i = 0; i < t.size(); ++i) t.data[i] = u(rng);
  return t;
}

std::string layer_prefix(int l) { return "l" + std::to_string(l) + "."; }

Var zeros(Shape s) { return constant(Tensor(std::move(s))); }

struct LayerOutput {
  Var combined;  // (N, d0 + d + d')
  PointerOutput pointer;
};

LayerOutput gpnn_layer(const ModelInputs& in, const ParamSet& p, const std::string& pre, const Var& h,
                       const ModelConfig& cfg, bool training, Rng& rng, int m) {
  const auto& batch = in.batch;
  const Index n = batch.num_nodes();
  const Index len = batch.width();
  const bool lstm = cfg.cell_type == CellType::lstm_cell;

  Var hd = dropout(h, cfg.dropout, training, rng);
  Var xhat = gcn_embed(hd, in.adjacency, p.at(pre + "gcn_weight"));
  const Index d = xhat.shape()[1];
  std::span<const Index> flat(batch.indices.data(), static_cast<std::size_t>(batch.indices.size()));
  Var seq = mask_positions(reshape(gather_rows(xhat, flat), {n, len, d}), batch.mask);

  CellWeights enc{cfg.cell_type, p.at(pre + "encoder_weight"), lstm ? p.at(pre + "encoder_bias") : Var{}};
  CellWeights dec{cfg.cell_type, p.at(pre + "decoder_weight"), lstm ? p.at(pre + "decoder_bias") : Var{}};
  AttentionWeights attn{p.at(pre + "attn_W1"), p.at(pre + "attn_W2"), p.at(pre + "attn_v")};

  EncoderOutput eo = run_encoder(seq, batch.mask, batch.lengths, enc);
  PointerOutput po = decoder_select(eo, seq, batch.mask, m, dec, attn, p.at(pre + "start_token"), cfg.selection_mode);
  Var z = nonlocal_aggregate(po.ranked_embeddings, po.valid, p.at(pre + "conv_filters"), p.at(pre + "conv_bias"),
                             cfg.pool);
  Var ego = matmul(hd, p.at(pre + "ego_weight"));
  return {concat_last_axis({ego, xhat, z}), std::move(po)};
}

}  // namespace

std::shared_ptr<const ModelInputs> ModelInputs::build(const Graph& g, const ModelConfig& cfg) {
  auto in = std::make_shared<ModelInputs>();
  in->graph = &g;
  in->adjacency = normalize_adjacency(g);
  std::optional<std::uint64_t> shuffle;
  if (cfg.shuffle_layers) shuffle = cfg.seed;
  in->batch = sample_sequences(g, cfg.depth_k, cfg.max_len_L, shuffle);
  in->features = constant(Tensor::from_matrix(g.features()));
  return in;
}

CellState cell_step(const CellWeights& w, const CellState& prev, const Var& input) {
  Var z = matmul(concat_last_axis({prev.hidden, input}), w.weight);
  if (w.type == CellType::tanh_cell) return {tanh(z), Var{}};
  z = add(z, w.bias);
  const Index h = prev.hidden.shape()[1];
  Var i = sigmoid(slice_last_axis(z, 0, h));
  Var f = sigmoid(slice_last_axis(z, h, h));
  Var g = tanh(slice_last_axis(z, 2 * h, h));
  Var o = sigmoid(slice_last_axis(z, 3 * h, h));
  Var c = add(mul(f, prev.cell), mul(i, g));
  return {mul(o, tanh(c)), c};
}

Var gcn_embed(const Var& x, const NormalizedAdjacency& adj, const Var& weight) {
  return relu(spmm(adj.matrix(), matmul(x, weight)));
}

EncoderOutput run_encoder(const Var& seq, const MaskMatrix& mask, std::span<const Index> lengths,
                          const CellWeights& cell) {
  if (seq.value().rank() != 3) throw ShapeError("run_encoder: expected (N, L, d), got " + to_string(seq.shape()));
  const Index n = seq.shape()[0], len = seq.shape()[1];
  const Index h = cell.type == CellType::lstm_cell ? cell.weight.shape()[1] / 4 : cell.weight.shape()[1];
  if (static_cast<Index>(lengths.size()) != n) throw ShapeError("run_encoder: lengths do not match batch");
  Var input = mask_positions(seq, mask);

  CellState st{zeros({n, h}), cell.type == CellType::lstm_cell ? zeros({n, h}) : Var{}};
  std::vector<Var> hs, cs;
  for (Index t = 0; t < len; ++t) {
    st = cell_step(cell, st, slice_position(input, t));
    hs.push_back(st.hidden);
    if (st.cell) cs.push_back(st.cell);
  }
  std::vector<Index> last(lengths.begin(), lengths.end());
  for (Index& x : last) {
    if (x < 1 || x > len) throw ValidationError("run_encoder: each row needs at least one unmasked position");
    --x;
  }
  EncoderOutput out;
  out.states = stack_positions(hs);
  out.last.hidden = pick_positions(out.states, last);
  if (!cs.empty()) out.last.cell = pick_positions(stack_positions(cs), last);
  return out;
}

PointerOutput decoder_select(const EncoderOutput& enc, const Var& seq, const MaskMatrix& mask, int m,
                             const CellWeights& cell, const AttentionWeights& attn, const Var& start_token,
                             SelectionMode mode) {
  if (m <= 0) throw ValidationError("decoder_select: m must be >= 1, got " + std::to_string(m));
  const Index n = seq.shape()[0], len = seq.shape()[1], d = seq.shape()[2];

  const Var keys = matmul(enc.states, attn.w1);
  CellState st = enc.last;
  Var prev_in = add(zeros({n, d}), start_token);
  MaskMatrix avail = mask;

  PointerOutput out;
  out.selected_indices = IndexMatrix::Constant(n, m, -1);
  out.selected_probs = RowMatrix::Zero(n, m);
  out.valid = MaskMatrix::Constant(n, m, false);
  std::vector<Var> ranked;
  for (int i = 0; i < m; ++i) {
    st = cell_step(cell, st, prev_in);
    Var scores = reshape(matmul(tanh(add_positions(keys, matmul(st.hidden, attn.w2))), attn.v), {n, len});

    const auto sm = scores.value().matrix();
    MaskMatrix eff = avail;
    std::vector<Index> choice(static_cast<std::size_t>(n), -1);
    for (Index b = 0; b < n; ++b) {
      Index best = -1;
      for (Index j = 0; j < len; ++j) {
        if (avail(b, j) && (best < 0 || sm(b, j) > sm(b, best))) best = j;
      }
      choice[b] = best;
      // Exhausted rows still need a well-formed softmax; its output is unused.
      if (best < 0) eff(b, 0) = true;
    }
    trace_branch(choice);

    Var p = masked_softmax(scores, eff);
    Var chosen = pick_positions(seq, choice);
    Var o;
    if (mode == SelectionMode::hard_scaled) {
      o = scale_rows(chosen, pick_positions(p, choice));
      prev_in = chosen;
    } else {
      Tensor keep({n});
      for (Index b = 0; b < n; ++b) keep.data[b] = choice[b] >= 0 ? 1.0 : 0.0;
      o = scale_rows(weighted_sum_positions(p, seq), constant(std::move(keep)));
      prev_in = o;
    }
    const auto pm = p.value().matrix();
    for (Index b = 0; b < n; ++b) {
      if (choice[b] < 0) continue;
      out.selected_indices(b, i) = choice[b];
      out.selected_probs(b, i) = pm(b, choice[b]);
      out.valid(b, i) = true;
      avail(b, choice[b]) = false;
    }
    ranked.push_back(o);
  }
  out.ranked_embeddings = stack_positions(ranked);
  return out;
}

Var nonlocal_aggregate(const Var& ranked, const MaskMatrix& valid, const Var& filters, const Var& bias,
                       PoolMode pool) {
  Var c = relu(conv1d(ranked, filters, bias));
  return pool == PoolMode::max ? max_pool_positions(c, valid) : mean_pool_positions(c, valid);
}

ParamSet init_params(const ModelConfig& cfg, Index in_features, int num_classes) {
  validate(cfg);
  std::seed_seq sseq{static_cast<std::uint32_t>(cfg.seed), static_cast<std::uint32_t>(cfg.seed >> 32), 0x1217u};
  Rng rng(sseq);
  const Index h = cfg.hidden;
  const Index c = num_classes;
  ParamSet p;
  switch (cfg.model) {
    case ModelKind::mlp:
      p.add("mlp.w1", glorot({in_features, h}, in_features, h, rng));
      p.add("mlp.b1", Tensor({h}));
      p.add("mlp.w2", glorot({h, c}, h, c, rng));
      p.add("mlp.b2", Tensor({c}));
      break;
    case ModelKind::gcn: {
      const int layers = cfg.effective_layers();
      for (int l = 0; l < layers; ++l) {
        const Index fin = l == 0 ? in_features : h;
        const Index fout = l + 1 == layers ? c : h;
        p.add("gcn.w" + std::to_string(l), glorot({fin, fout}, fin, fout, rng));
        p.add("gcn.b" + std::to_string(l), Tensor({fout}));
      }
      break;
    }
    case ModelKind::gpnn: {
      const int layers = cfg.effective_layers();
      const bool lstm = cfg.cell_type == CellType::lstm_cell;
      const Index gates = lstm ? 4 * h : h;
      const Index w = cfg.conv_width;
      for (int l = 0; l < layers; ++l) {
        const std::string pre = layer_prefix(l);
        const Index fin = l == 0 ? in_features : h;
        p.add(pre + "gcn_weight", glorot({fin, h}, fin, h, rng));
        p.add(pre + "encoder_weight", glorot({2 * h, gates}, 2 * h, gates, rng));
        if (lstm) p.add(pre + "encoder_bias", Tensor({gates}));
        p.add(pre + "decoder_weight", glorot({2 * h, gates}, 2 * h, gates, rng));
        if (lstm) p.add(pre + "decoder_bias", Tensor({gates}));
        p.add(pre + "attn_W1", glorot({h, h}, h, h, rng));
        p.add(pre + "attn_W2", glorot({h, h}, h, h, rng));
        p.add(pre + "attn_v", glorot({h, 1}, h, 1, rng));
        p.add(pre + "start_token", glorot({h}, h, h, rng));
        p.add(pre + "conv_filters", glorot({w, h, h}, w * h, w * h, rng));
        p.add(pre + "conv_bias", Tensor({h}));
        p.add(pre + "ego_weight", glorot({fin, h}, fin, h, rng));
        if (l + 1 < layers) p.add(pre + "proj_weight", glorot({3 * h, h}, 3 * h, h, rng));
      }
      p.add("ffn_weight", glorot({3 * h, c}, 3 * h, c, rng));
      p.add("ffn_bias", Tensor({c}));
      break;
    }
  }
  return p;
}

Var gpnn_forward(const ModelInputs& in, const ParamSet& params, const ModelConfig& cfg, bool training, Rng& rng,
                 PointerOutput* pointer) {
  const int layers = cfg.effective_layers();
  Var h = in.features;
  Var combined;
  for (int l = 0; l < layers; ++l) {
    const std::string pre = layer_prefix(l);
    LayerOutput lo = gpnn_layer(in, params, pre, h, cfg, training, rng, cfg.num_selected_m);
    if (l == 0 && pointer) *pointer = std::move(lo.pointer);
    combined = lo.combined;
    if (l + 1 < layers) h = matmul(dropout(combined, cfg.dropout, training, rng), params.at(pre + "proj_weight"));
  }
  return add(matmul(dropout(combined, cfg.dropout, training, rng), params.at("ffn_weight")), params.at("ffn_bias"));
}

Var stack_gpnn_layers(const ModelInputs& in, const ParamSet& params, const ModelConfig& cfg, bool training,
                      Rng& rng) {
  if (cfg.effective_layers() < 1) throw ValidationError("stack_gpnn_layers: layers must be >= 1");
  return gpnn_forward(in, params, cfg, training, rng);
}

Var baseline_mlp_forward(const Var& x, const ParamSet& params, const ModelConfig& cfg, bool training, Rng& rng) {
  Var h = relu(add(matmul(dropout(x, cfg.dropout, training, rng), params.at("mlp.w1")), params.at("mlp.b1")));
  return add(matmul(dropout(h, cfg.dropout, training, rng), params.at("mlp.w2")), params.at("mlp.b2"));
}

Var baseline_gcn_forward(const Var& x, const NormalizedAdjacency& adj, const ParamSet& params,
                         const ModelConfig& cfg, bool training, Rng& rng, int layers) {
  if (layers < 1) throw ValidationError("baseline_gcn_forward: layers must be >= 1");
  Var h = x;
  for (int l = 0; l < layers; ++l) {
    const std::string id = std::to_string(l);
    h = add(spmm(adj.matrix(), matmul(dropout(h, cfg.dropout, training, rng), params.at("gcn.w" + id))),
            params.at("gcn.b" + id));
    if (l + 1 < layers) h = relu(h);
  }
  return h;
}

Var model_forward(const ModelInputs& in, const ParamSet& params, const ModelConfig& cfg, bool training, Rng& rng) {
  switch (cfg.model) {
    case ModelKind::mlp: return baseline_mlp_forward(in.features, params, cfg, training, rng);
    case ModelKind::gcn:
      return baseline_gcn_forward(in.features, in.adjacency, params, cfg, training, rng, cfg.effective_layers());
    case ModelKind::gpnn: return gpnn_forward(in, params, cfg, training, rng);
  }
  throw ConfigError("unknown model kind");
}

PointerOutput rank_sequences(const ModelInputs& in, const ParamSet& params, const ModelConfig& cfg, int m) {
  if (cfg.model != ModelKind::gpnn) throw ConfigError("pointer ranking needs a gpnn model");
  NoGradGuard no_grad;
  Rng rng(0);
  return gpnn_layer(in, params, layer_prefix(0), in.features, cfg, false, rng, m).pointer;
}

std::vector<int> predict(const Var& logits) {
  const auto lm = logits.value().matrix();
  std::vector<int> out(static_cast<std::size_t>(lm.rows()));
  for (Index r = 0; r < lm.rows(); ++r) {
    Index arg = 0;
    lm.row(r).maxCoeff(&arg);
    out[static_cast<std::size_t>(r)] = static_cast<int>(arg);
  }
  return out;
}

}  // namespace gpnn
