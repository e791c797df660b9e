#include "gpnn/cli.hpp"

#include <cstdlib>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <map>
#include <sstream>

#include <openssl/evp.h>

#include <CLI11.hpp>

#include "gpnn/error.hpp"
#include "gpnn/harness.hpp"
#include "gpnn/sampler.hpp"

namespace gpnn {

namespace fs = std::filesystem;

std::string file_sha256(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IntegrityError("cannot read " + path);
  std::unique_ptr<EVP_MD_CTX, decltype(&EVP_MD_CTX_free)> ctx(EVP_MD_CTX_new(), EVP_MD_CTX_free);
  EVP_DigestInit_ex(ctx.get(), EVP_sha256(), nullptr);
  std::vector<char> buf(1 << 16);
  while (in) {
    in.read(buf.data(), static_cast<std::streamsize>(buf.size()));
    EVP_DigestUpdate(ctx.get(), buf.data(), static_cast<std::size_t>(in.gcount()));
  }
  unsigned char md[EVP_MAX_MD_SIZE];
  unsigned int len = 0;
  EVP_DigestFinal_ex(ctx.get(), md, &len);
  std::ostringstream hex;
  for (unsigned int i = 0; i < len; ++i) hex << std::hex << std::setw(2) << std::setfill('0') << static_cast<int>(md[i]);
  return hex.str();
}

namespace {

struct Common {
  std::string dataset;
  std::string dataset_dir;
  std::string config_path;
  std::vector<std::string> overrides;
  std::string output_dir = "gpnn_out";
  std::optional<std::uint64_t> seed;
  int workers = 1;
};

struct Options {
  int k = -1;
  int L = -1;
  int split = 0;
  int max_configs = 0;
  std::uint64_t grid_seed = 0;
  int n_select = 5;
  std::string checkpoint;
  std::vector<int> layers{2, 4, 8};
  std::string convert_edges;
  std::string convert_features;
  std::string convert_splits;
  int sparse_features = 0;
};

class Session {
 public:
  Session(std::string sub, const Common& c, std::vector<std::string> argv, std::ostream& out)
      : sub_(std::move(sub)), common_(c), argv_(std::move(argv)), out_(out) {}

  // Config and paths are resolved before anything touches the output dir.
  void resolve() {
    if (!common_.config_path.empty()) cfg_ = load_config(common_.config_path);
    for (const auto& o : common_.overrides) apply_override(cfg_, o);
    if (common_.seed) cfg_.seed = *common_.seed;
    validate(cfg_);
    if (sub_ != "convert") {
      if (!common_.dataset_dir.empty()) {
        data_dir_ = common_.dataset_dir;
      } else if (!common_.dataset.empty()) {
        const char* root = std::getenv("GPNN_DATA_ROOT");
        if (!root) throw ConfigError("--dataset needs GPNN_DATA_ROOT to be set");
        data_dir_ = fs::path(root) / common_.dataset;
      } else {
        throw ConfigError("one of --dataset-dir or --dataset is required");
      }
    }
  }

  Dataset& data() {
    if (!ds_) ds_ = load_dataset_dir(data_dir_, cfg_.seed);
    return *ds_;
  }

  fs::path artifact(const std::string& name) {
    fs::create_directories(common_.output_dir);
    fs::path p = fs::path(common_.output_dir) / name;
    artifacts_.push_back(p);
    return p;
  }

  void finish(const nlohmann::ordered_json& extra = {}) {
    nlohmann::ordered_json manifest;
    manifest["subcommand"] = sub_;
    manifest["command"] = argv_;
    manifest["dataset_dir"] = data_dir_.string();
    manifest["seed"] = cfg_.seed;
    manifest["config"] = to_json(cfg_);
    if (!extra.is_null()) manifest["options"] = extra;
    nlohmann::ordered_json sums = nlohmann::ordered_json::object();
    for (const auto& p : artifacts_) sums[p.filename().string()] = file_sha256(p.string());
    manifest["artifacts"] = sums;
    const fs::path mp = fs::path(common_.output_dir) / "manifest.json";
    fs::create_directories(common_.output_dir);
    std::ofstream(mp) << manifest.dump(1) << '\n';
    for (const auto& p : artifacts_) out_ << "wrote " << p.string() << '\n';
    out_ << "wrote " << mp.string() << '\n';
  }

  const ModelConfig& cfg() const { return cfg_; }
  ModelConfig& cfg() { return cfg_; }
  TrainOptions train_options() const {
    TrainOptions t;
    t.workers = common_.workers;
    return t;
  }
  const fs::path& data_dir() const { return data_dir_; }

 private:
  std::string sub_;
  Common common_;
  std::vector<std::string> argv_;
  std::ostream& out_;
  ModelConfig cfg_;
  fs::path data_dir_;
  std::optional<Dataset> ds_;
  std::vector<fs::path> artifacts_;
};

void warn_grid(const ModelConfig& cfg, std::ostream& err) {
  for (const auto& w : grid_warnings(cfg)) err << "warning: " << w << '\n';
}

std::string pct(double x) {
  std::ostringstream os;
  os << std::fixed << std::setprecision(2) << 100.0 * x;
  return os.str();
}

void cmd_stats(Session& s, std::ostream& out, bool homophily_only) {
  const Graph& g = s.data().graph;
  Index isolated = 0;
  const double h = homophily_ratio(g, &isolated);
  nlohmann::ordered_json j;
  if (!homophily_only) {
    j = {{"nodes", g.num_nodes()}, {"edges", g.num_edges()}, {"features", g.num_features()},
         {"classes", g.num_classes()}, {"self_loops_dropped", g.self_loops_dropped()}};
    out << "N=" << g.num_nodes() << " |E|=" << g.num_edges() << " F=" << g.num_features()
        << " C=" << g.num_classes() << " H=" << std::fixed << std::setprecision(4) << h << '\n';
  } else {
    out << "H=" << std::fixed << std::setprecision(4) << h << '\n';
  }
  j["homophily"] = h;
  j["isolated_nodes"] = isolated;
  std::ofstream(s.artifact(homophily_only ? "homophily.json" : "stats.json")) << j.dump(1) << '\n';
  s.finish();
}

void cmd_sample(Session& s, const Options& o, std::ostream& out) {
  ModelConfig& cfg = s.cfg();
  if (o.k >= 0) cfg.depth_k = o.k;
  if (o.L >= 0) cfg.max_len_L = o.L;
  validate(cfg);
  std::optional<std::uint64_t> shuffle;
  if (cfg.shuffle_layers) shuffle = cfg.seed;
  const auto batch = sample_sequences(s.data().graph, cfg.depth_k, cfg.max_len_L, shuffle);
  write_sequences(out, batch);
  std::ofstream f(s.artifact("sequences.txt"));
  write_sequences(f, batch);
  f.close();
  s.finish({{"k", cfg.depth_k}, {"L", cfg.max_len_L}});
}

void check_run(const RunResult& r) {
  if (r.aborted) throw NumericError("split " + std::to_string(r.split_id) + ": " + r.diagnostic);
}

void cmd_train(Session& s, const Options& o, std::ostream& out, std::ostream& err) {
  warn_grid(s.cfg(), err);
  Dataset& ds = s.data();
  if (o.split < 0 || o.split >= static_cast<int>(ds.splits.size())) throw ConfigError("--split out of range");
  const auto in = ModelInputs::build(ds.graph, s.cfg());
  TrainOptions opts = s.train_options();
  const fs::path log = s.artifact("run_split" + std::to_string(o.split) + ".jsonl");
  fs::remove(log);
  opts.run_log = log;
  ParamSet params;
  const RunResult r = train_one_split(*in, ds.splits[static_cast<std::size_t>(o.split)], s.cfg(), opts, &params);
  check_run(r);
  out << "split " << r.split_id << ": best_epoch=" << r.best_epoch << " test_acc=" << pct(r.test_accuracy)
      << " (" << std::setprecision(3) << r.wall_time_s << " s)\n";
  std::ofstream(s.artifact("result.json")) << to_json(r).dump(1) << '\n';
  save_checkpoint(params, s.artifact("checkpoint.json"));
  Rng rng(0);
  NoGradGuard no_grad;
  ModelConfig run_cfg = s.cfg();
  run_cfg.seed = split_seed(s.cfg().seed, r.split_id);
  write_predictions(ds.graph, predict(model_forward(*in, params, run_cfg, false, rng)), s.artifact("predictions.tsv"));
  save_config(s.cfg(), s.artifact("config.json"));
  s.finish({{"split", o.split}});
}

void report_line(std::ostream& out, const AggregateReport& r) {
  out << r.dataset << ' ' << r.model << ": " << pct(r.mean_accuracy) << " +- " << pct(r.stdev_accuracy)
      << (r.complete ? "" : " (incomplete)") << '\n';
}

void cmd_protocol(Session& s, std::ostream& out, std::ostream& err) {
  warn_grid(s.cfg(), err);
  Dataset& ds = s.data();
  const AggregateReport r = run_protocol(ds.graph, ds.splits, s.cfg(), s.train_options(), ds.name);
  report_line(out, r);
  write_report(r, s.artifact("report.json"), s.artifact("report.csv"));
  s.finish();
  if (!r.complete) throw NumericError("one or more splits diverged");
}

void cmd_grid(Session& s, const Options& o, std::ostream& out) {
  Dataset& ds = s.data();
  GridSpec grid;
  grid.base = s.cfg();
  grid.max_configs = o.max_configs;
  grid.sample_seed = o.grid_seed;
  const GridResult g = grid_search(ds.graph, ds.splits, grid, s.train_options(), ds.name);
  nlohmann::ordered_json cells = nlohmann::ordered_json::array();
  for (const auto& c : g.cells) {
    cells.push_back({{"config", to_json(c.config)}, {"mean_val_accuracy", c.mean_val_accuracy}, {"complete", c.complete}});
  }
  std::ofstream(s.artifact("grid.json")) << cells.dump(1) << '\n';
  save_config(g.best, s.artifact("best_config.json"));
  write_report(g.report, s.artifact("report.json"), s.artifact("report.csv"));
  out << "best of " << g.cells.size() << " configs: " << to_json(g.best).dump() << '\n';
  report_line(out, g.report);
  s.finish({{"max_configs", o.max_configs}, {"grid_seed", o.grid_seed}});
}

void cmd_rank(Session& s, const Options& o, std::ostream& out) {
  ModelConfig& cfg = s.cfg();
  if (cfg.model != ModelKind::gpnn) throw ConfigError("rank-analysis needs model=gpnn");
  Dataset& ds = s.data();
  const auto in = ModelInputs::build(ds.graph, cfg);
  ParamSet params;
  ModelConfig run_cfg = cfg;
  if (!o.checkpoint.empty()) {
    params = init_params(cfg, ds.graph.num_features(), ds.graph.num_classes());
    load_checkpoint(params, o.checkpoint);
  } else {
    const RunResult r = train_one_split(*in, ds.splits[static_cast<std::size_t>(o.split)], cfg, s.train_options(), &params);
    check_run(r);
    run_cfg.seed = split_seed(cfg.seed, r.split_id);
  }
  const RankedHomophily h = ranked_homophily_analysis(ds.graph, *in, params, run_cfg, o.n_select, cfg.seed);
  out << "pointer top-" << o.n_select << " homophily=" << std::fixed << std::setprecision(4) << h.gpnn_ratio
      << " random 1-hop=" << h.random_1hop_ratio << " (nodes=" << h.nodes_used << ", skipped " << h.skipped_gpnn
      << "/" << h.skipped_random << ")\n";
  nlohmann::ordered_json j = {{"n_select", o.n_select},       {"gpnn_ratio", h.gpnn_ratio},
                              {"random_1hop_ratio", h.random_1hop_ratio}, {"nodes_used", h.nodes_used},
                              {"skipped_gpnn", h.skipped_gpnn}, {"skipped_random", h.skipped_random}};
  std::ofstream(s.artifact("rank_analysis.json")) << j.dump(1) << '\n';
  s.finish({{"split", o.split}, {"n_select", o.n_select}, {"checkpoint", o.checkpoint}});
}

void cmd_oversmooth(Session& s, const Options& o, std::ostream& out) {
  Dataset& ds = s.data();
  ModelConfig gpnn_cfg = s.cfg();
  gpnn_cfg.model = ModelKind::gpnn;
  ModelConfig gcn_cfg = s.cfg();
  gcn_cfg.model = ModelKind::gcn;
  const auto rows = oversmoothing_sweep(ds.graph, ds.splits, gpnn_cfg, gcn_cfg, o.layers, s.train_options());
  for (const auto& r : rows) {
    out << r.model << " layers=" << r.layers << " acc=" << pct(r.mean_acc) << " decay=" << pct(r.rel_decay) << "%\n";
  }
  write_sweep_csv(rows, s.artifact("sweep.csv"));
  s.finish({{"layers", o.layers}});
}

// Raw third-party files may start with a header row and, for some
// datasets, list active feature indices instead of a dense vector.
fs::path normalise_raw(const fs::path& src, const fs::path& dst, bool features, int sparse_dim) {
  std::ifstream in(src);
  if (!in) throw IntegrityError("cannot open " + src.string());
  std::ofstream out(dst);
  std::string line;
  bool first = true;
  while (std::getline(in, line)) {
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (first && !line.empty() && !std::isdigit(static_cast<unsigned char>(line.front()))) {
      out << '#' << line << '\n';
      first = false;
      continue;
    }
    first = false;
    if (features && sparse_dim > 0 && !line.empty() && line.front() != '#') {
      std::istringstream ls(line);
      std::string id, feats, label;
      std::getline(ls, id, '\t');
      std::getline(ls, feats, '\t');
      std::getline(ls, label, '\t');
      std::vector<int> dense(static_cast<std::size_t>(sparse_dim), 0);
      std::istringstream fs_(feats);
      std::string tok;
      while (std::getline(fs_, tok, ',')) {
        if (tok.empty()) continue;
        const int k = std::stoi(tok);
        if (k < 0 || k >= sparse_dim) throw ValidationError("feature index " + tok + " outside --sparse-features");
        dense[static_cast<std::size_t>(k)] = 1;
      }
      out << id << '\t';
      for (int i = 0; i < sparse_dim; ++i) out << (i ? "," : "") << dense[static_cast<std::size_t>(i)];
      out << '\t' << label << '\n';
    } else {
      out << line << '\n';
    }
  }
  return dst;
}

void cmd_convert(Session& s, const Options& o, std::ostream& out) {
  if (o.convert_edges.empty() || o.convert_features.empty()) throw ConfigError("convert needs --edges and --features");
  const fs::path tmp = fs::temp_directory_path() / ("gpnn_convert_" + std::to_string(::getpid()));
  fs::create_directories(tmp);
  const auto e = normalise_raw(o.convert_edges, tmp / "edges.txt", false, 0);
  const auto f = normalise_raw(o.convert_features, tmp / "features.txt", true, o.sparse_features);
  const Graph g = load_dataset(e, f);
  fs::remove_all(tmp);
  save_dataset(g, s.artifact("edges.txt"), s.artifact("features.txt"));
  write_id_map(g, s.artifact("id_map.txt"));
  if (!o.convert_splits.empty()) {
    save_splits(load_splits(o.convert_splits, g), s.artifact("splits.json"));
  }
  out << "N=" << g.num_nodes() << " |E|=" << g.num_edges() << " F=" << g.num_features() << " C=" << g.num_classes()
      << '\n';
  s.finish({{"edges", o.convert_edges}, {"features", o.convert_features}, {"splits", o.convert_splits},
            {"sparse_features", o.sparse_features}});
}

int exit_code_for(const Error& e) {
  const std::string c = e.category();
  if (c == "config") return kExitConfig;
  if (c == "numeric") return kExitNumeric;
  return kExitData;
}

}  // namespace

int run_cli(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
  CLI::App app{"Graph pointer networks for heterophilic node classification"};
  app.require_subcommand(1);
  app.fallthrough();
  Common common;
  Options opt;
  app.add_option("--dataset", common.dataset, "dataset name under $GPNN_DATA_ROOT");
  app.add_option("--dataset-dir", common.dataset_dir, "directory with edges.txt, features.txt, splits.json");
  app.add_option("--config", common.config_path, "flat JSON config (or a run manifest)");
  app.add_option("--set", common.overrides, "key=value config override")->allow_extra_args(false);
  app.add_option("--output-dir,-o", common.output_dir, "artifact directory");
  app.add_option("--seed", common.seed, "run seed (overrides config)");
  app.add_option("--workers", common.workers, "parallel runs")->check(CLI::PositiveNumber);

  app.add_subcommand("stats", "dataset statistics");
  app.add_subcommand("homophily", "homophily ratio");
  auto* sample = app.add_subcommand("sample", "dump multi-hop node sequences");
  sample->add_option("--k", opt.k, "sampling depth");
  sample->add_option("--L", opt.L, "maximum sequence length");
  auto* train = app.add_subcommand("train", "train on one split");
  train->add_option("--split", opt.split, "split id");
  app.add_subcommand("protocol", "ten-split evaluation");
  auto* grid = app.add_subcommand("grid", "grid search over the documented ranges");
  grid->add_option("--max-configs", opt.max_configs, "random subset size (0 = full grid)");
  grid->add_option("--grid-seed", opt.grid_seed, "seed for the random subset");
  auto* rank = app.add_subcommand("rank-analysis", "homophily of pointer-ranked nodes");
  rank->add_option("--split", opt.split, "split id");
  rank->add_option("--n-select", opt.n_select, "ranked nodes kept per sequence");
  rank->add_option("--checkpoint", opt.checkpoint, "use trained parameters instead of training");
  auto* over = app.add_subcommand("oversmooth", "accuracy versus depth");
  over->add_option("--layers", opt.layers, "layer counts to compare")->delimiter(',');
  auto* convert = app.add_subcommand("convert", "normalise third-party dataset files");
  convert->add_option("--edges", opt.convert_edges, "raw edge list")->required();
  convert->add_option("--features", opt.convert_features, "raw features file")->required();
  convert->add_option("--splits", opt.convert_splits, "splits.json indexed in features-file order");
  convert->add_option("--sparse-features", opt.sparse_features, "features are index lists over this many columns");

  try {
    std::vector<std::string> rev(args.rbegin(), args.rend());
    app.parse(rev);
  } catch (const CLI::CallForHelp&) {
    out << app.help();
    return kExitOk;
  } catch (const CLI::ParseError& e) {
    err << "error[config]: " << e.what() << '\n';
    return kExitConfig;
  }

  const std::string sub = app.get_subcommands().front()->get_name();
  try {
    Session s(sub, common, args, out);
    s.resolve();
    if (sub == "stats" || sub == "homophily") {
      cmd_stats(s, out, sub == "homophily");
    } else if (sub == "sample") {
      cmd_sample(s, opt, out);
    } else if (sub == "train") {
      cmd_train(s, opt, out, err);
    } else if (sub == "protocol") {
      cmd_protocol(s, out, err);
    } else if (sub == "grid") {
      cmd_grid(s, opt, out);
    } else if (sub == "rank-analysis") {
      cmd_rank(s, opt, out);
    } else if (sub == "oversmooth") {
      cmd_oversmooth(s, opt, out);
    } else if (sub == "convert") {
      cmd_convert(s, opt, out);
    }
  } catch (const Error& e) {
    err << "error[" << e.category() << "]: " << e.what() << '\n';
    return exit_code_for(e);
  } catch (const std::exception& e) {
    err << "error[internal]: " << e.what() << '\n';
    return kExitFailure;
  }
  return kExitOk;
}

}  // namespace gpnn
