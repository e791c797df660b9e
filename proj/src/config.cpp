#include "gpnn/config.hpp"

#include <algorithm>
#include <fstream>

#include "gpnn/error.hpp"

namespace gpnn {

std::string to_string(ModelKind k) {
  switch (k) {
    case ModelKind::gpnn: return "gpnn";
    case ModelKind::mlp: return "mlp";
    case ModelKind::gcn: return "gcn";
  }
  return "?";
}

std::string to_string(SelectionMode m) { return m == SelectionMode::soft ? "soft" : "hard_scaled"; }
std::string to_string(CellType c) { return c == CellType::lstm_cell ? "lstm_cell" : "tanh_cell"; }
std::string to_string(PoolMode p) { return p == PoolMode::mean ? "mean" : "max"; }

namespace {

template <typename E>
E parse_enum(const std::string& key, const std::string& s, std::initializer_list<std::pair<const char*, E>> table) {
  for (const auto& [name, value] : table)
    if (s == name) return value;
  throw ConfigError("invalid value '" + s + "' for " + key);
}

// Accepts JSON numbers/bools/strings as well as the raw text of --set overrides.
template <typename T>
T as(const std::string& key, const nlohmann::json& v) {
  try {
    if (v.is_string()) {
      const std::string s = v.get<std::string>();
      if constexpr (std::is_same_v<T, bool>) {
        if (s == "true" || s == "1") return true;
        if (s == "false" || s == "0") return false;
        throw ConfigError("invalid boolean '" + s + "' for " + key);
      } else {
        return nlohmann::json::parse(s).get<T>();
      }
    }
    if constexpr (std::is_integral_v<T> && !std::is_same_v<T, bool>) {
      if (!v.is_number_integer() && !v.is_number_unsigned()) throw ConfigError("expected an integer for " + key);
    }
    return v.get<T>();
  } catch (const nlohmann::json::exception&) {
    throw ConfigError("invalid value " + v.dump() + " for " + key);
  }
}

std::string as_text(const nlohmann::json& v) { return v.is_string() ? v.get<std::string>() : v.dump(); }

void set_field(ModelConfig& c, const std::string& key, const nlohmann::json& v) {
  if (key == "model") {
    c.model = parse_enum<ModelKind>(key, as_text(v), {{"gpnn", ModelKind::gpnn}, {"mlp", ModelKind::mlp}, {"gcn", ModelKind::gcn}});
  } else if (key == "hidden") {
    c.hidden = as<int>(key, v);
  } else if (key == "learning_rate") {
    c.learning_rate = as<double>(key, v);
  } else if (key == "dropout") {
    c.dropout = as<double>(key, v);
  } else if (key == "weight_decay") {
    c.weight_decay = as<double>(key, v);
  } else if (key == "num_selected_m") {
    c.num_selected_m = as<int>(key, v);
  } else if (key == "depth_k") {
    c.depth_k = as<int>(key, v);
  } else if (key == "max_len_L") {
    c.max_len_L = as<int>(key, v);
  } else if (key == "selection_mode") {
    c.selection_mode = parse_enum<SelectionMode>(key, as_text(v), {{"hard_scaled", SelectionMode::hard_scaled}, {"soft", SelectionMode::soft}});
  } else if (key == "cell_type") {
    c.cell_type = parse_enum<CellType>(key, as_text(v), {{"tanh_cell", CellType::tanh_cell}, {"lstm_cell", CellType::lstm_cell}});
  } else if (key == "pool") {
    c.pool = parse_enum<PoolMode>(key, as_text(v), {{"max", PoolMode::max}, {"mean", PoolMode::mean}});
  } else if (key == "conv_width") {
    c.conv_width = as<int>(key, v);
  } else if (key == "layers") {
    c.layers = as<int>(key, v);
  } else if (key == "max_epochs") {
    c.max_epochs = as<int>(key, v);
  } else if (key == "patience") {
    c.patience = as<int>(key, v);
  } else if (key == "shuffle_layers") {
    c.shuffle_layers = as<bool>(key, v);
  } else if (key == "seed") {
    c.seed = as<std::uint64_t>(key, v);
  } else {
    throw ConfigError("unknown config key '" + key + "'");
  }
}

}  // namespace

nlohmann::ordered_json to_json(const ModelConfig& c) {
  return {{"model", to_string(c.model)},
          {"hidden", c.hidden},
          {"learning_rate", c.learning_rate},
          {"dropout", c.dropout},
          {"weight_decay", c.weight_decay},
          {"num_selected_m", c.num_selected_m},
          {"depth_k", c.depth_k},
          {"max_len_L", c.max_len_L},
          {"selection_mode", to_string(c.selection_mode)},
          {"cell_type", to_string(c.cell_type)},
          {"pool", to_string(c.pool)},
          {"conv_width", c.conv_width},
          {"layers", c.layers},
          {"max_epochs", c.max_epochs},
          {"patience", c.patience},
          {"shuffle_layers", c.shuffle_layers},
          {"seed", c.seed}};
}

ModelConfig config_from_json(const nlohmann::json& j, ModelConfig base) {
  if (!j.is_object()) throw ConfigError("config must be a flat key/value object");
  for (const auto& [key, value] : j.items()) {
    if (value.is_object() || value.is_array()) throw ConfigError("config key '" + key + "' must be a scalar");
    set_field(base, key, value);
  }
  validate(base);
  return base;
}

void apply_override(ModelConfig& cfg, const std::string& assignment) {
  const auto eq = assignment.find('=');
  if (eq == std::string::npos || eq == 0) throw ConfigError("override '" + assignment + "' is not key=value");
  set_field(cfg, assignment.substr(0, eq), nlohmann::json(assignment.substr(eq + 1)));
  validate(cfg);
}

void validate(const ModelConfig& c) {
  auto require = [](bool ok, const std::string& what) {
    if (!ok) throw ConfigError(what);
  };
  require(c.hidden >= 1, "hidden must be >= 1");
  require(c.learning_rate > 0, "learning_rate must be > 0");
  require(c.dropout >= 0 && c.dropout < 1, "dropout must be in [0, 1)");
  require(c.weight_decay >= 0, "weight_decay must be >= 0");
  require(c.num_selected_m >= 1, "num_selected_m must be >= 1");
  require(c.depth_k >= 0, "depth_k must be >= 0");
  require(c.max_len_L >= 1, "max_len_L must be >= 1");
  require(c.conv_width >= 1, "conv_width must be >= 1");
  require(c.layers >= 0, "layers must be >= 0");
  require(c.max_epochs >= 1, "max_epochs must be >= 1");
  require(c.patience >= 1, "patience must be >= 1");
}

std::vector<std::string> grid_warnings(const ModelConfig& c) {
  std::vector<std::string> out;
  auto check = [&](const char* key, double v, std::initializer_list<double> grid) {
    if (std::none_of(grid.begin(), grid.end(), [&](double g) { return std::abs(g - v) <= 1e-12 * std::max(1.0, std::abs(g)); })) {
      out.push_back(std::string(key) + "=" + nlohmann::json(v).dump() + " is outside the documented search grid");
    }
  };
  check("hidden", c.hidden, {16, 32, 64});
  check("learning_rate", c.learning_rate, {0.01, 0.005});
  check("dropout", c.dropout, {0.0, 0.5, 0.99});
  check("weight_decay", c.weight_decay, {1e-3, 5e-4, 5e-5, 5e-6});
  check("num_selected_m", c.num_selected_m, {1, 2, 4, 8});
  return out;
}

ModelConfig load_config(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open config " + path.string());
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(in);
  } catch (const nlohmann::json::parse_error& e) {
    throw ConfigError(path.string() + ": " + e.what());
  }
  // A run manifest embeds the resolved config under "config".
  if (j.is_object() && j.contains("config") && j.at("config").is_object()) return config_from_json(j.at("config"));
  return config_from_json(j);
}

void save_config(const ModelConfig& cfg, const std::filesystem::path& path) {
  std::ofstream out(path);
  if (!out) throw ConfigError("cannot write config " + path.string());
  out << to_json(cfg).dump(1) << '\n';
}

}  // namespace gpnn
