#include "gpnn/harness.hpp"

#include <algorithm>
#include <atomic>
#include <chrono>
#include <cmath>
#include <fstream>
#include <mutex>
#include <numeric>
#include <set>
#include <thread>

#include "gpnn/error.hpp"

namespace gpnn {

bool EarlyStopper::update(int epoch, double val_loss, double val_acc) {
  bool improved = false;
  moved_ = false;
  if (val_loss < min_loss_seen_) {
    min_loss_seen_ = val_loss;
    improved = true;
  }
  if (val_acc > max_acc_seen_) {
    max_acc_seen_ = val_acc;
    improved = true;
  }
  if (val_loss < best_loss_ || (val_loss == best_loss_ && val_acc > best_acc_at_ckpt_)) {
    best_loss_ = val_loss;
    best_acc_at_ckpt_ = val_acc;
    best_epoch_ = epoch;
    moved_ = true;
    improved = true;
  }
  if (improved) {
    since_ = 0;
    last_improvement_ = epoch;
  } else {
    ++since_;
  }
  return since_ >= patience_;
}

std::uint64_t split_seed(std::uint64_t seed, int split_id) {
  // splitmix64 finaliser over (seed, split)
  std::uint64_t z = seed + 0x9E3779B97F4A7C15ull * static_cast<std::uint64_t>(split_id + 1);
  z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ull;
  z = (z ^ (z >> 27)) * 0x94D049BB133111EBull;
  return z ^ (z >> 31);
}

double accuracy(const Var& logits, std::span<const int> labels, std::span<const Index> rows) {
  if (rows.empty()) return 0.0;
  const auto pred = predict(logits);
  Index hits = 0;
  for (Index r : rows) hits += pred[static_cast<std::size_t>(r)] == labels[static_cast<std::size_t>(r)];
  return static_cast<double>(hits) / static_cast<double>(rows.size());
}

RunResult train_one_split(const Graph& g, const SplitSet& split, const ModelConfig& cfg, const TrainOptions& opts) {
  const auto in = ModelInputs::build(g, cfg);
  return train_one_split(*in, split, cfg, opts);
}

RunResult train_one_split(const ModelInputs& in, const SplitSet& split, const ModelConfig& cfg,
                          const TrainOptions& opts, ParamSet* trained) {
  validate(cfg);
  const Graph& g = *in.graph;
  validate_split(split, g.num_nodes());
  const auto start = std::chrono::steady_clock::now();

  RunResult result;
  result.split_id = split.split_id;
  result.config = cfg;

  ModelConfig run_cfg = cfg;
  run_cfg.seed = split_seed(cfg.seed, split.split_id);
  ParamSet params = init_params(run_cfg, g.num_features(), g.num_classes());
  Rng rng(run_cfg.seed ^ 0xD1B54A32D192ED03ull);
  AdamState state;
  const AdamOptions adam{cfg.learning_rate, 0.9, 0.999, 1e-8, cfg.weight_decay};
  EarlyStopper stopper(cfg.patience);
  std::vector<Tensor> best = params.snapshot();
  const auto& labels = g.labels();

  std::ofstream log;
  if (opts.run_log) {
    log.open(*opts.run_log, std::ios::app);
    if (!log) throw IntegrityError("cannot open run log " + opts.run_log->string());
  }

  try {
    for (int epoch = 1; epoch <= cfg.max_epochs; ++epoch) {
      params.zero_grad();
      Var loss = cross_entropy(model_forward(in, params, run_cfg, true, rng), labels, split.train);
      backward(loss);
      adam_step(params, state, adam);

      EpochRecord rec{epoch, loss.item(), 0, 0};
      {
        NoGradGuard no_grad;
        Var logits = model_forward(in, params, run_cfg, false, rng);
        rec.val_loss = cross_entropy(logits, labels, split.val).item();
        rec.val_acc = accuracy(logits, labels, split.val);
      }
      result.train_curve.push_back(rec);
      result.last_epoch = epoch;
      if (log) {
        log << nlohmann::json{{"split", split.split_id}, {"epoch", epoch}, {"loss", rec.loss},
                              {"val_loss", rec.val_loss}, {"val_acc", rec.val_acc}}
                   .dump()
            << '\n';
      }
      if (!std::isfinite(rec.loss) || !std::isfinite(rec.val_loss)) {
        throw NumericError("non-finite loss at epoch " + std::to_string(epoch));
      }
      const bool stop = stopper.update(epoch, rec.val_loss, rec.val_acc);
      if (stopper.checkpoint_moved()) best = params.snapshot();
      if (stop) break;
    }
  } catch (const NumericError& e) {
    result.aborted = true;
    result.diagnostic = std::string("diverged: ") + e.what();
  }

  result.best_epoch = stopper.best_epoch();
  result.best_val_loss = stopper.best_loss();
  result.best_val_acc = std::max(0.0, stopper.best_acc());
  if (!result.aborted) {
    params.restore(best);
    NoGradGuard no_grad;
    result.test_accuracy = accuracy(model_forward(in, params, run_cfg, false, rng), labels, split.test);
    if (trained) *trained = std::move(params);
  }
  result.wall_time_s = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  return result;
}

void summarize(AggregateReport& report) {
  std::vector<double> acc, val;
  report.complete = true;
  for (const auto& r : report.per_split) {
    if (r.aborted) {
      report.complete = false;
      continue;
    }
    acc.push_back(r.test_accuracy);
    val.push_back(r.best_val_acc);
  }
  if (acc.empty()) {
    report.mean_accuracy = report.stdev_accuracy = report.mean_val_accuracy = 0;
    report.complete = false;
    return;
  }
  const double n = static_cast<double>(acc.size());
  report.mean_accuracy = std::accumulate(acc.begin(), acc.end(), 0.0) / n;
  report.mean_val_accuracy = std::accumulate(val.begin(), val.end(), 0.0) / n;
  double ss = 0;
  for (double a : acc) ss += (a - report.mean_accuracy) * (a - report.mean_accuracy);
  report.stdev_accuracy = acc.size() > 1 ? std::sqrt(ss / (n - 1.0)) : 0.0;
}

namespace {

template <typename F>
void parallel_for(std::size_t count, int workers, F&& body) {
  const std::size_t threads = std::min<std::size_t>(std::max(workers, 1), count);
  if (threads <= 1) {
    for (std::size_t i = 0; i < count; ++i) body(i);
    return;
  }
  std::atomic<std::size_t> next{0};
  std::exception_ptr error;
  std::mutex error_mutex;
  std::vector<std::thread> pool;
  for (std::size_t t = 0; t < threads; ++t) {
    pool.emplace_back([&] {
      for (std::size_t i = next++; i < count; i = next++) {
        try {
          body(i);
        } catch (...) {
          std::lock_guard lock(error_mutex);
          if (!error) error = std::current_exception();
        }
      }
    });
  }
  for (auto& th : pool) th.join();
  if (error) std::rethrow_exception(error);
}

}  // namespace

AggregateReport run_protocol(const Graph& g, std::span<const SplitSet> splits, const ModelConfig& cfg,
                             const TrainOptions& opts, std::string dataset) {
  if (splits.size() != kNumSplits) {
    throw ValidationError("run_protocol needs exactly " + std::to_string(kNumSplits) + " splits, got " +
                          std::to_string(splits.size()));
  }
  const auto in = ModelInputs::build(g, cfg);
  AggregateReport report;
  report.dataset = std::move(dataset);
  report.model = to_string(cfg.model);
  report.per_split.resize(splits.size());
  parallel_for(splits.size(), opts.workers, [&](std::size_t i) {
    TrainOptions local = opts;
    if (opts.workers > 1) local.run_log.reset();
    report.per_split[i] = train_one_split(*in, splits[i], cfg, local);
  });
  summarize(report);
  return report;
}

std::vector<ModelConfig> GridSpec::expand() const {
  std::vector<ModelConfig> out;
  const std::vector<int> ms = base.model == ModelKind::gpnn ? num_selected_m : std::vector<int>{base.num_selected_m};
  for (int h : hidden)
    for (double lr : learning_rate)
      for (double dr : dropout)
        for (double wd : weight_decay)
          for (int m : ms) {
            ModelConfig c = base;
            c.hidden = h;
            c.learning_rate = lr;
            c.dropout = dr;
            c.weight_decay = wd;
            c.num_selected_m = m;
            out.push_back(c);
          }
  if (max_configs > 0 && static_cast<std::size_t>(max_configs) < out.size()) {
    std::vector<std::size_t> idx(out.size());
    std::iota(idx.begin(), idx.end(), std::size_t{0});
    Rng rng(sample_seed);
    std::shuffle(idx.begin(), idx.end(), rng);
    idx.resize(static_cast<std::size_t>(max_configs));
    std::sort(idx.begin(), idx.end());
    std::vector<ModelConfig> picked;
    for (std::size_t i : idx) picked.push_back(out[i]);
    out = std::move(picked);
  }
  return out;
}

GridResult grid_search(const Graph& g, std::span<const SplitSet> splits, const GridSpec& grid,
                       const TrainOptions& opts, std::string dataset) {
  const auto configs = grid.expand();
  if (configs.empty()) throw ConfigError("grid search over an empty grid");
  GridResult result;
  std::optional<std::size_t> best;
  for (std::size_t i = 0; i < configs.size(); ++i) {
    AggregateReport rep = run_protocol(g, splits, configs[i], opts, dataset);
    result.cells.push_back({configs[i], rep.mean_val_accuracy, rep.complete});
    if (rep.complete && (!best || rep.mean_val_accuracy > result.cells[*best].mean_val_accuracy)) {
      best = i;
      result.report = std::move(rep);
    }
  }
  if (!best) {
    result.best = configs.front();
    result.report.dataset = dataset;
    result.report.model = to_string(configs.front().model);
    result.report.complete = false;
  } else {
    result.best = configs[*best];
  }
  return result;
}

RankedHomophily ranked_homophily_analysis(const Graph& g, const ModelInputs& in, const ParamSet& params,
                                          const ModelConfig& cfg, int n_select, std::uint64_t seed) {
  if (n_select < 1) throw ValidationError("n_select must be >= 1");
  const PointerOutput ptr = rank_sequences(in, params, cfg, n_select + 1);
  const auto& batch = in.batch;
  Rng rng(seed);
  RankedHomophily out;
  double gpnn_sum = 0, random_sum = 0;
  Index gpnn_n = 0, random_n = 0;
  for (Index v = 0; v < g.num_nodes(); ++v) {
    Index taken = 0, same = 0;
    for (Index i = 0; i < ptr.selected_indices.cols() && taken < n_select; ++i) {
      const Index pos = ptr.selected_indices(v, i);
      if (pos < 0) break;
      const Index u = batch.indices(v, pos);
      if (u == v) continue;
      ++taken;
      same += g.label(u) == g.label(v);
    }
    if (taken == 0) {
      ++out.skipped_gpnn;
    } else {
      gpnn_sum += static_cast<double>(same) / static_cast<double>(taken);
      ++gpnn_n;
    }

    const auto nb = g.neighbors(v);
    if (nb.empty()) {
      ++out.skipped_random;
      continue;
    }
    std::vector<Index> pick;
    if (static_cast<int>(nb.size()) < n_select) {
      std::uniform_int_distribution<std::size_t> u(0, nb.size() - 1);
      for (int i = 0; i < n_select; ++i) pick.push_back(nb[u(rng)]);
    } else {
      std::sample(nb.begin(), nb.end(), std::back_inserter(pick), n_select, rng);
    }
    const auto agree = std::count_if(pick.begin(), pick.end(), [&](Index u) { return g.label(u) == g.label(v); });
    random_sum += static_cast<double>(agree) / static_cast<double>(pick.size());
    ++random_n;
  }
  out.gpnn_ratio = gpnn_n ? gpnn_sum / static_cast<double>(gpnn_n) : 0.0;
  out.random_1hop_ratio = random_n ? random_sum / static_cast<double>(random_n) : 0.0;
  out.nodes_used = gpnn_n;
  return out;
}

std::vector<SweepRow> oversmoothing_sweep(const Graph& g, std::span<const SplitSet> splits,
                                          const ModelConfig& gpnn_cfg, const ModelConfig& gcn_cfg,
                                          std::span<const int> layer_counts, const TrainOptions& opts) {
  if (layer_counts.empty()) throw ValidationError("oversmoothing_sweep: no layer counts");
  for (int l : layer_counts)
    if (l < 1) throw ValidationError("oversmoothing_sweep: layer counts must be >= 1");
  const auto ref_it = std::find(layer_counts.begin(), layer_counts.end(), 2);
  const int reference = ref_it != layer_counts.end() ? 2 : layer_counts.front();

  std::vector<SweepRow> rows;
  for (const ModelConfig* base : {&gcn_cfg, &gpnn_cfg}) {
    std::vector<SweepRow> model_rows;
    double ref_acc = std::numeric_limits<double>::quiet_NaN();
    for (int l : layer_counts) {
      ModelConfig c = *base;
      c.layers = l;
      SweepRow row{to_string(c.model), l, std::numeric_limits<double>::quiet_NaN(), 0.0, false};
      try {
        const AggregateReport rep = run_protocol(g, splits, c, opts);
        row.complete = rep.complete;
        if (rep.complete) row.mean_acc = rep.mean_accuracy;
      } catch (const NumericError&) {
        row.complete = false;
      }
      if (l == reference) ref_acc = row.mean_acc;
      model_rows.push_back(row);
    }
    for (auto& row : model_rows) {
      row.rel_decay = row.layers == reference ? 0.0 : (ref_acc - row.mean_acc) / ref_acc;
      rows.push_back(row);
    }
  }
  return rows;
}

Dataset load_dataset_dir(const std::filesystem::path& dir, std::uint64_t seed) {
  Dataset ds;
  ds.name = dir.filename().string();
  if (ds.name.empty()) ds.name = dir.parent_path().filename().string();
  ds.graph = load_dataset(dir / "edges.txt", dir / "features.txt");
  if (std::filesystem::exists(dir / "splits.json")) {
    ds.splits = load_splits(dir / "splits.json", ds.graph);
  } else {
    ds.splits = generate_splits(ds.graph, {0.48, 0.32, 0.20}, seed);
    ds.generated_splits = true;
  }
  return ds;
}

nlohmann::ordered_json to_json(const RunResult& r, bool with_timing) {
  nlohmann::ordered_json curve = nlohmann::ordered_json::array();
  for (const auto& e : r.train_curve) curve.push_back({e.epoch, e.loss, e.val_loss, e.val_acc});
  nlohmann::ordered_json j = {{"split_id", r.split_id},
          {"best_epoch", r.best_epoch},
          {"last_epoch", r.last_epoch},
          {"best_val_loss", r.best_val_loss},
          {"best_val_acc", r.best_val_acc},
          {"test_accuracy", r.test_accuracy},
          {"aborted", r.aborted},
          {"diagnostic", r.diagnostic},
          {"config", to_json(r.config)},
          {"train_curve", std::move(curve)}};
  if (with_timing) j["wall_time_s"] = r.wall_time_s;
  return j;
}

nlohmann::ordered_json to_json(const AggregateReport& r, bool with_timing) {
  nlohmann::ordered_json runs = nlohmann::ordered_json::array();
  for (const auto& s : r.per_split) runs.push_back(to_json(s, with_timing));
  return {{"dataset", r.dataset},
          {"model", r.model},
          {"mean_accuracy", r.mean_accuracy},
          {"stdev_accuracy", r.stdev_accuracy},
          {"mean_val_accuracy", r.mean_val_accuracy},
          {"complete", r.complete},
          {"per_split", std::move(runs)}};
}

void write_report(const AggregateReport& r, const std::filesystem::path& json_path,
                  const std::filesystem::path& csv_path) {
  {
    std::ofstream out(json_path);
    if (!out) throw IntegrityError("cannot write " + json_path.string());
    out << to_json(r).dump(1) << '\n';
  }
  std::ofstream csv(csv_path);
  if (!csv) throw IntegrityError("cannot write " + csv_path.string());
  std::size_t n = 0;
  for (const auto& s : r.per_split) n += !s.aborted;
  csv << "dataset,model,mean,stdev,n_splits\n";
  csv << r.dataset << ',' << r.model << ',' << nlohmann::json(r.mean_accuracy).dump() << ','
      << nlohmann::json(r.stdev_accuracy).dump() << ',' << n << '\n';
}

void write_sweep_csv(std::span<const SweepRow> rows, const std::filesystem::path& path) {
  std::ofstream out(path);
  if (!out) throw IntegrityError("cannot write " + path.string());
  out << "model,layers,mean_acc,rel_decay\n";
  for (const auto& r : rows) {
    out << r.model << ',' << r.layers << ',';
    if (r.complete) {
      out << nlohmann::json(r.mean_acc).dump() << ',' << nlohmann::json(r.rel_decay).dump();
    } else {
      out << ",";
    }
    out << '\n';
  }
}

void write_predictions(const Graph& g, std::span<const int> labels, const std::filesystem::path& path) {
  std::ofstream out(path);
  if (!out) throw IntegrityError("cannot write " + path.string());
  for (std::size_t v = 0; v < labels.size(); ++v) out << g.original_ids()[v] << '\t' << labels[v] << '\n';
}

}  // namespace gpnn
