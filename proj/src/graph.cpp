#include "gpnn/graph.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <fstream>
#include <iostream>
#include <numeric>
#include <random>
#include <sstream>
#include <unordered_map>

#include <json.hpp>

#include "gpnn/error.hpp"

namespace gpnn {

namespace {

std::string_view trim(std::string_view s) {
  const auto ws = " \t\r\n";
  const auto b = s.find_first_not_of(ws);
  if (b == std::string_view::npos) return {};
  const auto e = s.find_last_not_of(ws);
  return s.substr(b, e - b + 1);
}

bool skip_line(std::string_view s) { return s.empty() || s.front() == '#'; }

template <typename T>
bool parse_number(std::string_view s, T& out) {
  s = trim(s);
  if (s.empty()) return false;
  const char* first = s.data();
  if (*first == '+') ++first;
  auto [ptr, ec] = std::from_chars(first, s.data() + s.size(), out);
  return ec == std::errc() && ptr == s.data() + s.size();
}

std::vector<std::string_view> split_on(std::string_view s, char sep) {
  std::vector<std::string_view> parts;
  std::size_t start = 0;
  while (true) {
    const auto pos = s.find(sep, start);
    parts.push_back(s.substr(start, pos - start));
    if (pos == std::string_view::npos) break;
    start = pos + 1;
  }
  return parts;
}

std::vector<std::string_view> split_ws(std::string_view s) {
  std::vector<std::string_view> parts;
  std::size_t i = 0;
  while (i < s.size()) {
    while (i < s.size() && std::isspace(static_cast<unsigned char>(s[i]))) ++i;
    const std::size_t b = i;
    while (i < s.size() && !std::isspace(static_cast<unsigned char>(s[i]))) ++i;
    if (i > b) parts.push_back(s.substr(b, i - b));
  }
  return parts;
}

std::string format_double(double x) {
  char buf[64];
  auto [ptr, ec] = std::to_chars(buf, buf + sizeof(buf), x);
  return std::string(buf, ptr);
}

std::ifstream open_in(const std::filesystem::path& p) {
  std::ifstream in(p);
  if (!in) throw IntegrityError("cannot open " + p.string());
  return in;
}

std::ofstream open_out(const std::filesystem::path& p) {
  std::ofstream out(p);
  if (!out) throw IntegrityError("cannot write " + p.string());
  return out;
}

}  // namespace

// -----------------------------------------------------------------------------
// Graph
// -----------------------------------------------------------------------------

Graph::Graph(RowMatrix features, std::vector<Edge> edges, std::vector<int> labels,
             int num_classes, std::vector<std::int64_t> original_ids)
    : features_(std::move(features)),
      labels_(std::move(labels)),
      original_ids_(std::move(original_ids)) {
  const Index n = features_.rows();
  if (n <= 0) throw ValidationError("graph must have at least one node");
  if (static_cast<Index>(labels_.size()) != n) {
    throw ValidationError("labels length " + std::to_string(labels_.size()) +
                          " != node count " + std::to_string(n));
  }
  if (original_ids_.empty()) {
    original_ids_.resize(static_cast<std::size_t>(n));
    std::iota(original_ids_.begin(), original_ids_.end(), std::int64_t{0});
  } else if (static_cast<Index>(original_ids_.size()) != n) {
    throw ValidationError("original id table has wrong length");
  }

  int max_label = -1;
  for (int y : labels_) {
    if (y < 0) throw ValidationError("negative label " + std::to_string(y));
    max_label = std::max(max_label, y);
  }
  num_classes_ = num_classes < 0 ? max_label + 1 : num_classes;
  if (max_label >= num_classes_) throw ValidationError("label exceeds class count");

  edges_.reserve(edges.size());
  for (Edge e : edges) {
    if (e.u < 0 || e.u >= n || e.v < 0 || e.v >= n) {
      throw IntegrityError("edge (" + std::to_string(e.u) + "," + std::to_string(e.v) +
                           ") has an endpoint outside [0, " + std::to_string(n) + ")");
    }
    if (e.u == e.v) {
      ++self_loops_dropped_;
      continue;
    }
    if (e.u > e.v) std::swap(e.u, e.v);
    edges_.push_back(e);
  }
  std::sort(edges_.begin(), edges_.end());
  edges_.erase(std::unique(edges_.begin(), edges_.end()), edges_.end());

  offsets_.assign(static_cast<std::size_t>(n) + 1, 0);
  for (const Edge& e : edges_) {
    ++offsets_[e.u + 1];
    ++offsets_[e.v + 1];
  }
  std::partial_sum(offsets_.begin(), offsets_.end(), offsets_.begin());
  adjacency_.resize(static_cast<std::size_t>(offsets_.back()));
  std::vector<Index> cursor(offsets_.begin(), offsets_.end() - 1);
  for (const Edge& e : edges_) {
    adjacency_[cursor[e.u]++] = e.v;
    adjacency_[cursor[e.v]++] = e.u;
  }
  for (Index v = 0; v < n; ++v) {
    std::sort(adjacency_.begin() + offsets_[v], adjacency_.begin() + offsets_[v + 1]);
  }
}

std::span<const Index> Graph::neighbors(Index v) const {
  return {adjacency_.data() + offsets_[v], static_cast<std::size_t>(degree(v))};
}

Graph Graph::with_labels(std::vector<int> labels) const {
  return Graph(features_, edges_, std::move(labels), num_classes_, original_ids_);
}

bool operator==(const Graph& a, const Graph& b) {
  return a.features_.rows() == b.features_.rows() && a.features_.cols() == b.features_.cols() &&
         a.features_ == b.features_ && a.edges_ == b.edges_ && a.labels_ == b.labels_ &&
         a.num_classes_ == b.num_classes_ && a.original_ids_ == b.original_ids_;
}

std::vector<NormalizedAdjacency::Entry> NormalizedAdjacency::entries() const {
  std::vector<Entry> out;
  out.reserve(static_cast<std::size_t>(matrix_.nonZeros()));
  for (Index r = 0; r < matrix_.outerSize(); ++r) {
    for (SparseMatrix::InnerIterator it(matrix_, r); it; ++it) {
      out.push_back({it.row(), it.col(), it.value()});
    }
  }
  return out;
}

// -----------------------------------------------------------------------------
// Files
// -----------------------------------------------------------------------------

Graph load_dataset(const std::filesystem::path& edges_path,
                   const std::filesystem::path& features_path) {
  const std::string fname = features_path.string();
  std::ifstream fin = open_in(features_path);
  std::unordered_map<std::int64_t, Index> dense;
  std::vector<std::int64_t> ids;
  std::vector<std::vector<double>> rows;
  std::vector<int> labels;
  std::string line;
  std::size_t lineno = 0;
  Index width = -1;
  int num_classes = -1;
  constexpr std::string_view kClassesTag = "# classes:";
  while (std::getline(fin, line)) {
    ++lineno;
    const auto text = trim(line);
    if (text.starts_with(kClassesTag)) {
      if (!parse_number(trim(text.substr(kClassesTag.size())), num_classes) || num_classes < 1) {
        throw ParseError(fname, lineno, "bad class count");
      }
      continue;
    }
    if (skip_line(text)) continue;
    const auto cols = split_on(text, '\t');
    if (cols.size() != 3) throw ParseError(fname, lineno, "expected 3 tab-separated fields");
    std::int64_t id = 0;
    if (!parse_number(cols[0], id) || id < 0) throw ParseError(fname, lineno, "bad node id");
    int label = 0;
    if (!parse_number(cols[2], label) || label < 0) throw ParseError(fname, lineno, "bad label");
    std::vector<double> feats;
    for (auto tok : split_on(trim(cols[1]), ',')) {
      double x = 0;
      if (!parse_number(tok, x)) throw ParseError(fname, lineno, "bad feature value");
      feats.push_back(x);
    }
    if (width < 0) width = static_cast<Index>(feats.size());
    if (static_cast<Index>(feats.size()) != width) {
      throw ParseError(fname, lineno,
                       "expected " + std::to_string(width) + " features, got " +
                           std::to_string(feats.size()));
    }
    if (!dense.emplace(id, static_cast<Index>(ids.size())).second) {
      throw DuplicateIdError(fname + ":" + std::to_string(lineno) + ": duplicate node id " +
                             std::to_string(id));
    }
    ids.push_back(id);
    rows.push_back(std::move(feats));
    labels.push_back(label);
  }
  if (ids.empty()) throw ParseError(fname, lineno, "no nodes");

  RowMatrix x(static_cast<Index>(rows.size()), width);
  for (std::size_t i = 0; i < rows.size(); ++i) {
    x.row(static_cast<Index>(i)) = Eigen::Map<const Eigen::RowVectorXd>(rows[i].data(), width);
  }

  const std::string ename = edges_path.string();
  std::ifstream ein = open_in(edges_path);
  std::vector<Edge> edges;
  lineno = 0;
  while (std::getline(ein, line)) {
    ++lineno;
    const auto text = trim(line);
    if (skip_line(text)) continue;
    const auto toks = split_ws(text);
    std::int64_t a = 0, b = 0;
    if (toks.size() != 2 || !parse_number(toks[0], a) || !parse_number(toks[1], b) || a < 0 ||
        b < 0) {
      throw ParseError(ename, lineno, "expected two non-negative integers");
    }
    const auto ia = dense.find(a);
    const auto ib = dense.find(b);
    if (ia == dense.end() || ib == dense.end()) {
      throw IntegrityError(ename + ":" + std::to_string(lineno) + ": edge endpoint " +
                           std::to_string(ia == dense.end() ? a : b) +
                           " not present in features file");
    }
    edges.push_back({ia->second, ib->second});
  }
  return Graph(std::move(x), std::move(edges), std::move(labels), num_classes, std::move(ids));
}

void save_dataset(const Graph& g, const std::filesystem::path& edges_path,
                  const std::filesystem::path& features_path) {
  const auto& ids = g.original_ids();
  {
    auto out = open_out(edges_path);
    for (const Edge& e : g.edges()) out << ids[e.u] << ' ' << ids[e.v] << '\n';
  }
  auto out = open_out(features_path);
  out << "# classes: " << g.num_classes() << '\n';
  for (Index v = 0; v < g.num_nodes(); ++v) {
    out << ids[v] << '\t';
    for (Index j = 0; j < g.num_features(); ++j) {
      if (j) out << ',';
      out << format_double(g.features()(v, j));
    }
    out << '\t' << g.label(v) << '\n';
  }
}

void write_id_map(const Graph& g, const std::filesystem::path& path) {
  auto out = open_out(path);
  const auto& ids = g.original_ids();
  for (std::size_t i = 0; i < ids.size(); ++i) out << ids[i] << ' ' << i << '\n';
}

void validate_split(const SplitSet& s, Index num_nodes) {
  const std::string tag = "split " + std::to_string(s.split_id);
  if (s.train.empty() || s.val.empty() || s.test.empty()) {
    throw ValidationError(tag + ": train, val and test must all be non-empty");
  }
  std::vector<char> seen(static_cast<std::size_t>(num_nodes), 0);
  for (const auto* part : {&s.train, &s.val, &s.test}) {
    for (Index v : *part) {
      if (v < 0 || v >= num_nodes) {
        throw IntegrityError(tag + ": index " + std::to_string(v) + " outside [0, " +
                             std::to_string(num_nodes) + ")");
      }
      if (seen[v]++) throw ValidationError(tag + ": node " + std::to_string(v) + " listed twice");
    }
  }
}

std::vector<SplitSet> load_splits(const std::filesystem::path& path, const Graph& g) {
  std::ifstream in = open_in(path);
  nlohmann::json doc;
  try {
    doc = nlohmann::json::parse(in);
  } catch (const nlohmann::json::parse_error& e) {
    throw ParseError(path.string(), 0, e.what());
  }
  if (!doc.is_array()) throw ParseError(path.string(), 0, "top level must be an array");
  if (doc.size() != kNumSplits) {
    throw ValidationError(path.string() + ": expected " + std::to_string(kNumSplits) +
                          " splits, found " + std::to_string(doc.size()));
  }
  std::vector<SplitSet> out;
  for (std::size_t i = 0; i < doc.size(); ++i) {
    const auto& obj = doc[i];
    SplitSet s;
    s.split_id = obj.value("split_id", static_cast<int>(i));
    try {
      s.train = obj.at("train").get<std::vector<Index>>();
      s.val = obj.at("val").get<std::vector<Index>>();
      s.test = obj.at("test").get<std::vector<Index>>();
    } catch (const nlohmann::json::exception& e) {
      throw ParseError(path.string(), 0, "split " + std::to_string(i) + ": " + e.what());
    }
    validate_split(s, g.num_nodes());
    out.push_back(std::move(s));
  }
  std::stable_sort(out.begin(), out.end(),
                   [](const SplitSet& a, const SplitSet& b) { return a.split_id < b.split_id; });
  return out;
}

void save_splits(std::span<const SplitSet> splits, const std::filesystem::path& path) {
  nlohmann::json doc = nlohmann::json::array();
  for (const auto& s : splits) {
    doc.push_back({{"split_id", s.split_id}, {"train", s.train}, {"val", s.val}, {"test", s.test}});
  }
  auto out = open_out(path);
  out << doc.dump() << '\n';
}

std::vector<SplitSet> generate_splits(const Graph& g, std::array<double, 3> fractions,
                                      std::uint64_t seed) {
  const Index n = g.num_nodes();
  double total = 0;
  for (double f : fractions) {
    if (!(f > 0)) throw ValidationError("split fractions must be positive");
    total += f;
  }
  if (std::abs(total - 1.0) > 1e-9) throw ValidationError("split fractions must sum to 1");
  if (static_cast<double>(n) * *std::min_element(fractions.begin(), fractions.end()) < 1.0) {
    throw ValidationError("graph too small: some split part would be empty");
  }
  const auto n_train = static_cast<Index>(std::llround(static_cast<double>(n) * fractions[0]));
  const auto n_val = static_cast<Index>(std::llround(static_cast<double>(n) * fractions[1]));
  if (n_train + n_val >= n) throw ValidationError("split fractions leave no test nodes");

  std::vector<SplitSet> out;
  for (int i = 0; i < kNumSplits; ++i) {
    std::seed_seq sseq{static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32),
                       static_cast<std::uint32_t>(i)};
    std::mt19937_64 rng(sseq);
    std::vector<Index> perm(static_cast<std::size_t>(n));
    std::iota(perm.begin(), perm.end(), Index{0});
    std::shuffle(perm.begin(), perm.end(), rng);
    SplitSet s;
    s.split_id = i;
    s.train.assign(perm.begin(), perm.begin() + n_train);
    s.val.assign(perm.begin() + n_train, perm.begin() + n_train + n_val);
    s.test.assign(perm.begin() + n_train + n_val, perm.end());
    for (auto* part : {&s.train, &s.val, &s.test}) std::sort(part->begin(), part->end());
    out.push_back(std::move(s));
  }
  return out;
}

// -----------------------------------------------------------------------------
// Analytics
// -----------------------------------------------------------------------------

double homophily_ratio(const Graph& g, Index* isolated) {
  Index lonely = 0;
  double sum = 0;
  for (Index v = 0; v < g.num_nodes(); ++v) {
    const auto nb = g.neighbors(v);
    if (nb.empty()) {
      ++lonely;
      continue;
    }
    const auto same = std::count_if(nb.begin(), nb.end(),
                                    [&](Index u) { return g.label(u) == g.label(v); });
    sum += static_cast<double>(same) / static_cast<double>(nb.size());
  }
  if (lonely > 0) {
    std::cerr << "warning: homophily_ratio: " << lonely
              << " isolated node(s) counted as 0\n";
  }
  if (isolated) *isolated = lonely;
  return sum / static_cast<double>(g.num_nodes());
}

NormalizedAdjacency normalize_adjacency(const Graph& g) {
  const Index n = g.num_nodes();
  Eigen::VectorXd inv_sqrt(n);
  for (Index v = 0; v < n; ++v) inv_sqrt[v] = 1.0 / std::sqrt(static_cast<double>(g.degree(v) + 1));

  std::vector<Eigen::Triplet<Scalar>> trips;
  trips.reserve(static_cast<std::size_t>(n + 2 * g.num_edges()));
  for (Index v = 0; v < n; ++v) trips.emplace_back(v, v, inv_sqrt[v] * inv_sqrt[v]);
  for (const Edge& e : g.edges()) {
    const Scalar w = inv_sqrt[e.u] * inv_sqrt[e.v];
    trips.emplace_back(e.u, e.v, w);
    trips.emplace_back(e.v, e.u, w);
  }
  SparseMatrix m(n, n);
  m.setFromTriplets(trips.begin(), trips.end());
  m.makeCompressed();
  return NormalizedAdjacency(std::move(m));
}

}  // namespace gpnn
