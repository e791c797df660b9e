#pragma once

#include <filesystem>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include "gpnn/config.hpp"
#include "gpnn/graph.hpp"
#include "gpnn/model.hpp"

namespace gpnn {

struct EpochRecord {
  int epoch = 0;
  double loss = 0;
  double val_loss = 0;
  double val_acc = 0;
};

struct RunResult {
  int split_id = 0;
  int best_epoch = 0;
  int last_epoch = 0;
  std::vector<EpochRecord> train_curve;
  double best_val_loss = 0;
  double best_val_acc = 0;
  double test_accuracy = 0;
  ModelConfig config;
  double wall_time_s = 0;
  bool aborted = false;
  std::string diagnostic;
};

/// Patience counter over validation loss and accuracy.
///
/// The counter resets whenever the loss reaches a new minimum, the
/// accuracy a new maximum, or the checkpoint moves. The checkpoint is the
/// epoch with the lowest loss; ties go to the higher accuracy, then to the
/// earlier epoch.
class EarlyStopper {
 public:
  explicit EarlyStopper(int patience) : patience_(patience) {}

  /// Feeds one epoch; returns true once `patience` epochs passed without
  /// improvement.
  bool update(int epoch, double val_loss, double val_acc);
  /// Whether the last `update` moved the checkpoint.
  bool checkpoint_moved() const { return moved_; }
  int best_epoch() const { return best_epoch_; }
  double best_loss() const { return best_loss_; }
  double best_acc() const { return best_acc_at_ckpt_; }
  int last_improvement() const { return last_improvement_; }

 private:
  int patience_;
  int best_epoch_ = 0;
  int last_improvement_ = 0;
  int since_ = 0;
  bool moved_ = false;
  double best_loss_ = std::numeric_limits<double>::infinity();
  double best_acc_at_ckpt_ = -1;
  double min_loss_seen_ = std::numeric_limits<double>::infinity();
  double max_acc_seen_ = -1;
};

struct TrainOptions {
  /// One JSON line per epoch is appended here when set.
  std::optional<std::filesystem::path> run_log;
  /// Worker threads for independent runs (splits, grid cells).
  int workers = 1;
};

/// Per-split seed derived from the run seed.
std::uint64_t split_seed(std::uint64_t seed, int split_id);

double accuracy(const Var& logits, std::span<const int> labels, std::span<const Index> rows);

RunResult train_one_split(const Graph& g, const SplitSet& split, const ModelConfig& cfg,
                          const TrainOptions& opts = {});
/// Same, reusing prebuilt inputs (they must have been built for `cfg`).
RunResult train_one_split(const ModelInputs& in, const SplitSet& split, const ModelConfig& cfg,
                          const TrainOptions& opts, ParamSet* trained = nullptr);

struct AggregateReport {
  std::string dataset;
  std::string model;
  double mean_accuracy = 0;
  double stdev_accuracy = 0;
  double mean_val_accuracy = 0;
  std::vector<RunResult> per_split;
  bool complete = true;
};

/// Mean and sample standard deviation of test accuracy over completed runs.
void summarize(AggregateReport& report);

AggregateReport run_protocol(const Graph& g, std::span<const SplitSet> splits, const ModelConfig& cfg,
                             const TrainOptions& opts = {}, std::string dataset = "");

struct GridSpec {
  ModelConfig base;
  std::vector<int> hidden{16, 32, 64};
  std::vector<double> learning_rate{0.01, 0.005};
  std::vector<double> dropout{0.0, 0.5, 0.99};
  std::vector<double> weight_decay{1e-3, 5e-4, 5e-5, 5e-6};
  std::vector<int> num_selected_m{1, 2, 4, 8};
  /// 0 evaluates every cell; otherwise a seeded random subset of this size.
  int max_configs = 0;
  std::uint64_t sample_seed = 0;

  std::vector<ModelConfig> expand() const;
};

struct GridCell {
  ModelConfig config;
  double mean_val_accuracy = 0;
  bool complete = true;
};

struct GridResult {
  ModelConfig best;
  AggregateReport report;
  std::vector<GridCell> cells;
};

/// Selects the configuration with the highest mean validation accuracy.
GridResult grid_search(const Graph& g, std::span<const SplitSet> splits, const GridSpec& grid,
                       const TrainOptions& opts = {}, std::string dataset = "");

struct RankedHomophily {
  double gpnn_ratio = 0;
  double random_1hop_ratio = 0;
  Index nodes_used = 0;
  Index skipped_gpnn = 0;
  Index skipped_random = 0;
};

/// Label agreement of the top `n_select` pointer-ranked nodes versus
/// `n_select` random 1-hop neighbours (with replacement when the degree is
/// smaller), averaged over nodes.
RankedHomophily ranked_homophily_analysis(const Graph& g, const ModelInputs& in, const ParamSet& params,
                                          const ModelConfig& cfg, int n_select = 5, std::uint64_t seed = 0);

struct SweepRow {
  std::string model;
  int layers = 0;
  double mean_acc = 0;
  double rel_decay = 0;
  bool complete = true;
};

/// Trains the GCN baseline and stacked GPNN at each depth. Decay is
/// relative to the 2-layer row (or the first listed depth when 2 is absent).
std::vector<SweepRow> oversmoothing_sweep(const Graph& g, std::span<const SplitSet> splits,
                                          const ModelConfig& gpnn_cfg, const ModelConfig& gcn_cfg,
                                          std::span<const int> layer_counts, const TrainOptions& opts = {});

/// A dataset directory holds `edges.txt`, `features.txt` and optionally
/// `splits.json`. Without a splits file, ten 48/32/20 splits are generated
/// from `seed`.
struct Dataset {
  std::string name;
  Graph graph;
  std::vector<SplitSet> splits;
  bool generated_splits = false;
};

Dataset load_dataset_dir(const std::filesystem::path& dir, std::uint64_t seed = 0);

// -----------------------------------------------------------------------------
// Persistence
// -----------------------------------------------------------------------------

/// Timing is left out unless requested so that artifacts are reproducible.
nlohmann::ordered_json to_json(const RunResult& r, bool with_timing = false);
nlohmann::ordered_json to_json(const AggregateReport& r, bool with_timing = false);
void write_report(const AggregateReport& r, const std::filesystem::path& json_path,
                  const std::filesystem::path& csv_path);
void write_sweep_csv(std::span<const SweepRow> rows, const std::filesystem::path& path);
void write_predictions(const Graph& g, std::span<const int> labels, const std::filesystem::path& path);

}  // namespace gpnn
