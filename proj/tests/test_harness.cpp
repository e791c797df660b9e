#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <numeric>

#include "gpnn/error.hpp"
#include "gpnn/harness.hpp"
#include "support.hpp"

using namespace gpnn;
using namespace gpnn::testing;

namespace {

// Twelve nodes whose class is the sign of feature 0, wired heterophilically.
Graph separable_graph() {
  RowMatrix x(12, 2);
  std::vector<int> y(12);
  std::mt19937_64 rng(5);
  std::uniform_real_distribution<double> u(0.5, 1.5), noise(-1.0, 1.0);
  for (Index v = 0; v < 12; ++v) {
    y[static_cast<std::size_t>(v)] = static_cast<int>(v % 2);
    x(v, 0) = (v % 2 ? 1.0 : -1.0) * u(rng);
    x(v, 1) = noise(rng);
  }
  std::vector<Edge> e;
  for (Index v = 0; v + 1 < 12; ++v) e.push_back({v, v + 1});
  e.push_back({0, 11});
  e.push_back({2, 7});
  return Graph(std::move(x), std::move(e), std::move(y));
}

SplitSet fixed_split() { return {{0, 1, 2, 3, 4, 5}, {6, 7, 8}, {9, 10, 11}, 0}; }

ModelConfig quick_cfg(ModelKind kind = ModelKind::gpnn) {
  ModelConfig c;
  c.model = kind;
  c.hidden = 8;
  c.num_selected_m = 2;
  c.max_len_L = 6;
  c.dropout = 0.0;
  c.max_epochs = 60;
  c.patience = 20;
  c.seed = 11;
  return c;
}

}  // namespace

TEST_CASE("early stopping patience arithmetic") {
  EarlyStopper stop(100);
  std::vector<double> losses{1.0, 0.9};
  losses.insert(losses.end(), 100, 0.9);
  int stopped_at = -1;
  for (std::size_t i = 0; i < losses.size(); ++i) {
    if (stop.update(static_cast<int>(i) + 1, losses[i], 0.5)) {
      stopped_at = static_cast<int>(i) + 1;
      break;
    }
  }
  CHECK(stopped_at == 102);
  CHECK(stop.best_epoch() == 2);
}

TEST_CASE("early stopping resets on accuracy and moves the checkpoint on ties") {
  EarlyStopper stop(3);
  CHECK_FALSE(stop.update(1, 1.0, 0.1));
  CHECK_FALSE(stop.update(2, 1.1, 0.2));  // accuracy improved
  CHECK(stop.best_epoch() == 1);
  CHECK_FALSE(stop.update(3, 1.0, 0.3));  // tie on loss with higher accuracy
  CHECK(stop.checkpoint_moved());
  CHECK(stop.best_epoch() == 3);
  CHECK_FALSE(stop.update(4, 1.2, 0.3));
  CHECK_FALSE(stop.update(5, 1.2, 0.3));
  CHECK(stop.update(6, 1.2, 0.3));
  CHECK(stop.best_epoch() <= stop.last_improvement());
}

TEST_CASE("checkpoint never lands after the last improvement") {
  std::mt19937_64 rng(8);
  std::normal_distribution<double> n;
  for (int trial = 0; trial < 50; ++trial) {
    EarlyStopper stop(1 + trial % 7);
    for (int e = 1; e <= 200; ++e) {
      if (stop.update(e, 1.0 + 0.3 * n(rng) - 0.002 * e, std::round(5 + n(rng)) / 10.0)) break;
    }
    CHECK(stop.best_epoch() <= stop.last_improvement());
  }
}

TEST_CASE("separable toy graph is learned to full test accuracy") {
  const Graph g = separable_graph();
  ModelConfig cfg = quick_cfg();
  cfg.hidden = 16;
  cfg.dropout = 0.5;
  cfg.max_epochs = 200;
  cfg.patience = 200;
  const RunResult r = train_one_split(g, fixed_split(), cfg);
  CHECK_FALSE(r.aborted);
  CHECK(r.test_accuracy == 1.0);
  CHECK(r.last_epoch <= 200);
  CHECK(r.best_epoch >= 1);
  CHECK(static_cast<int>(r.train_curve.size()) == r.last_epoch);
}

TEST_CASE("training is bit-reproducible") {
  const Graph g = separable_graph();
  for (ModelKind kind : {ModelKind::gpnn, ModelKind::mlp, ModelKind::gcn}) {
    ModelConfig cfg = quick_cfg(kind);
    cfg.dropout = 0.5;
    const RunResult a = train_one_split(g, fixed_split(), cfg);
    const RunResult b = train_one_split(g, fixed_split(), cfg);
    CHECK(to_json(a) == to_json(b));
  }
}

TEST_CASE("test labels do not influence training") {
  const Graph g = separable_graph();
  std::vector<int> y = g.labels();
  for (Index v : fixed_split().test) y[static_cast<std::size_t>(v)] = 1 - y[static_cast<std::size_t>(v)];
  const Graph flipped = g.with_labels(y);
  const ModelConfig cfg = quick_cfg();
  const RunResult a = train_one_split(g, fixed_split(), cfg);
  const RunResult b = train_one_split(flipped, fixed_split(), cfg);
  REQUIRE(a.train_curve.size() == b.train_curve.size());
  for (std::size_t i = 0; i < a.train_curve.size(); ++i) {
    CHECK(a.train_curve[i].loss == b.train_curve[i].loss);
    CHECK(a.train_curve[i].val_loss == b.train_curve[i].val_loss);
  }
  CHECK(a.best_epoch == b.best_epoch);
  CHECK(a.test_accuracy + b.test_accuracy == doctest::Approx(1.0));
}

TEST_CASE("run log has one JSON line per epoch") {
  TempDir dir;
  const Graph g = separable_graph();
  TrainOptions opts;
  opts.run_log = dir / "run.jsonl";
  const RunResult r = train_one_split(g, fixed_split(), quick_cfg(), opts);
  std::ifstream in(dir / "run.jsonl");
  std::string line;
  int n = 0;
  while (std::getline(in, line)) {
    const auto j = nlohmann::json::parse(line);
    CHECK(j.at("epoch").get<int>() == ++n);
    CHECK(j.contains("val_loss"));
  }
  CHECK(n == r.last_epoch);
}

TEST_CASE("protocol over identical splits has zero spread") {
  const Graph g = separable_graph();
  const std::vector<SplitSet> splits(kNumSplits, fixed_split());
  ModelConfig cfg = quick_cfg(ModelKind::mlp);
  cfg.max_epochs = 30;
  TrainOptions opts;
  opts.workers = 3;
  // Every copy carries split_id 0, so every run also gets the same seed.
  const AggregateReport r = run_protocol(g, splits, cfg, opts, "toy");
  REQUIRE(r.per_split.size() == kNumSplits);
  for (const auto& s : r.per_split) CHECK(s.split_id == 0);
  CHECK(r.stdev_accuracy == 0.0);
  CHECK_THROWS_AS(run_protocol(g, std::vector<SplitSet>(3, fixed_split()), cfg), ValidationError);
}

TEST_CASE("report statistics are recomputable from per-split records") {
  const Graph g = separable_graph();
  const auto splits = generate_splits(g, {0.5, 0.25, 0.25}, 4);
  ModelConfig cfg = quick_cfg(ModelKind::gcn);
  cfg.max_epochs = 20;
  TrainOptions opts;
  opts.workers = 4;
  const AggregateReport r = run_protocol(g, splits, cfg, opts, "toy");
  std::vector<double> acc;
  for (const auto& s : r.per_split) acc.push_back(s.test_accuracy);
  const double mean = std::accumulate(acc.begin(), acc.end(), 0.0) / 10.0;
  double ss = 0;
  for (double a : acc) ss += (a - mean) * (a - mean);
  CHECK(r.mean_accuracy == mean);
  CHECK(r.stdev_accuracy == std::sqrt(ss / 9.0));

  AggregateReport copy = r;
  copy.mean_accuracy = copy.stdev_accuracy = -1;
  summarize(copy);
  CHECK(copy.mean_accuracy == r.mean_accuracy);
  CHECK(copy.stdev_accuracy == r.stdev_accuracy);

  TempDir dir;
  write_report(r, dir / "r.json", dir / "r.csv");
  const std::string csv = read_file(dir / "r.csv");
  CHECK(csv.rfind("dataset,model,mean,stdev,n_splits\n", 0) == 0);
  CHECK(csv.find("toy,gcn,") != std::string::npos);
  const auto j = nlohmann::json::parse(read_file(dir / "r.json"));
  CHECK(j.at("per_split").size() == 10);

  const AggregateReport again = run_protocol(g, splits, cfg, opts, "toy");
  CHECK(to_json(again) == to_json(r));
}

TEST_CASE("singleton grid equals the protocol") {
  const Graph g = separable_graph();
  const auto splits = generate_splits(g, {0.5, 0.25, 0.25}, 2);
  ModelConfig cfg = quick_cfg(ModelKind::mlp);
  cfg.max_epochs = 15;
  GridSpec grid;
  grid.base = cfg;
  grid.hidden = {cfg.hidden};
  grid.learning_rate = {cfg.learning_rate};
  grid.dropout = {cfg.dropout};
  grid.weight_decay = {cfg.weight_decay};
  grid.num_selected_m = {cfg.num_selected_m};
  const GridResult res = grid_search(g, splits, grid, {}, "toy");
  REQUIRE(res.cells.size() == 1);
  const AggregateReport direct = run_protocol(g, splits, cfg, {}, "toy");
  CHECK(to_json(res.report) == to_json(direct));
  CHECK(to_json(res.best) == to_json(cfg));
}

TEST_CASE("grid search skips a diverging configuration") {
  const Graph g = separable_graph();
  const auto splits = generate_splits(g, {0.5, 0.25, 0.25}, 2);
  GridSpec grid;
  grid.base = quick_cfg(ModelKind::mlp);
  grid.base.max_epochs = 15;
  grid.hidden = {8};
  grid.learning_rate = {0.01, 1e300};
  grid.dropout = {0.0};
  grid.weight_decay = {5e-4};
  const GridResult res = grid_search(g, splits, grid, {}, "toy");
  REQUIRE(res.cells.size() == 2);
  int healthy = 0;
  for (const auto& c : res.cells) healthy += c.complete;
  CHECK(healthy == 1);
  CHECK(res.best.learning_rate == 0.01);
  CHECK(res.report.complete);
}

TEST_CASE("grid expansion and capped sampling") {
  GridSpec grid;
  CHECK(grid.expand().size() == 288);
  grid.base.model = ModelKind::gcn;
  CHECK(grid.expand().size() == 72);
  grid.base.model = ModelKind::gpnn;
  grid.max_configs = 12;
  grid.sample_seed = 3;
  const auto a = grid.expand();
  CHECK(a.size() == 12);
  const auto b = grid.expand();
  for (std::size_t i = 0; i < a.size(); ++i) CHECK(to_json(a[i]) == to_json(b[i]));
}

TEST_CASE("ranked homophily on a perfectly homophilic graph") {
  // Two cliques with uniform labels inside each.
  std::vector<Edge> e;
  for (Index a = 0; a < 6; ++a)
    for (Index b = a + 1; b < 6; ++b) {
      e.push_back({a, b});
      e.push_back({a + 6, b + 6});
    }
  std::vector<int> y(12, 0);
  std::fill(y.begin() + 6, y.end(), 1);
  const Graph g = make_graph(12, e, y, 3, 7);
  ModelConfig cfg = quick_cfg();
  const auto in = ModelInputs::build(g, cfg);
  const ParamSet p = init_params(cfg, g.num_features(), g.num_classes());
  const RankedHomophily h = ranked_homophily_analysis(g, *in, p, cfg, 5, 1);
  CHECK(h.gpnn_ratio == 1.0);
  CHECK(h.random_1hop_ratio == 1.0);
  CHECK(h.nodes_used == 12);
}

TEST_CASE("ranked homophily is reproducible and bounded") {
  const Graph g = separable_graph();
  ModelConfig cfg = quick_cfg();
  const auto in = ModelInputs::build(g, cfg);
  const ParamSet p = init_params(cfg, g.num_features(), g.num_classes());
  const RankedHomophily a = ranked_homophily_analysis(g, *in, p, cfg, 5, 9);
  const RankedHomophily b = ranked_homophily_analysis(g, *in, p, cfg, 5, 9);
  CHECK(a.gpnn_ratio == b.gpnn_ratio);
  CHECK(a.random_1hop_ratio == b.random_1hop_ratio);
  CHECK(a.gpnn_ratio >= 0.0);
  CHECK(a.gpnn_ratio <= 1.0);
}

TEST_CASE("over-smoothing sweep with a single depth has zero decay") {
  const Graph g = separable_graph();
  const auto splits = generate_splits(g, {0.5, 0.25, 0.25}, 2);
  ModelConfig gp = quick_cfg();
  gp.max_epochs = 5;
  ModelConfig gc = quick_cfg(ModelKind::gcn);
  gc.max_epochs = 5;
  const std::vector<int> depths{2};
  const auto rows = oversmoothing_sweep(g, splits, gp, gc, depths);
  REQUIRE(rows.size() == 2);
  for (const auto& r : rows) CHECK(r.rel_decay == 0.0);

  TempDir dir;
  write_sweep_csv(rows, dir / "s.csv");
  CHECK(read_file(dir / "s.csv").rfind("model,layers,mean_acc,rel_decay\n", 0) == 0);
}

TEST_CASE("dataset directory loading") {
  TempDir dir;
  const Graph g = separable_graph();
  save_dataset(g, dir / "edges.txt", dir / "features.txt");
  Dataset d = load_dataset_dir(dir.path(), 3);
  CHECK(d.generated_splits);
  CHECK(d.splits.size() == kNumSplits);
  CHECK(d.graph == g);
  save_splits(d.splits, dir / "splits.json");
  const Dataset again = load_dataset_dir(dir.path(), 99);
  CHECK_FALSE(again.generated_splits);
  CHECK(again.splits[4].train == d.splits[4].train);
}
