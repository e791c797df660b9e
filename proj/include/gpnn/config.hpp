#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include <json.hpp>

namespace gpnn {

enum class ModelKind { gpnn, mlp, gcn };
enum class SelectionMode { hard_scaled, soft };
enum class CellType { tanh_cell, lstm_cell };
enum class PoolMode { max, mean };

/// Every knob of a training run. Serialised as a flat key/value object
/// whose keys are the field names below.
struct ModelConfig {
  ModelKind model = ModelKind::gpnn;
  int hidden = 64;
  double learning_rate = 0.01;
  double dropout = 0.5;
  double weight_decay = 5e-4;
  int num_selected_m = 4;
  int depth_k = 2;
  int max_len_L = 16;
  SelectionMode selection_mode = SelectionMode::hard_scaled;
  CellType cell_type = CellType::tanh_cell;
  PoolMode pool = PoolMode::max;
  int conv_width = 3;
  /// 0 selects the architecture default: 1 GPNN layer, 2 MLP/GCN layers.
  int layers = 0;
  int max_epochs = 2000;
  int patience = 100;
  bool shuffle_layers = false;
  std::uint64_t seed = 0;

  int effective_layers() const {
    if (layers > 0) return layers;
    return model == ModelKind::gpnn ? 1 : 2;
  }

  friend bool operator==(const ModelConfig&, const ModelConfig&) = default;
};

nlohmann::ordered_json to_json(const ModelConfig& cfg);
/// Unknown keys or ill-typed values throw ConfigError.
ModelConfig config_from_json(const nlohmann::json& j, ModelConfig base = {});
/// Applies one `key=value` override.
void apply_override(ModelConfig& cfg, const std::string& assignment);
/// Range checks; throws ConfigError.
void validate(const ModelConfig& cfg);
/// Values outside the documented search grid, one message each.
std::vector<std::string> grid_warnings(const ModelConfig& cfg);

ModelConfig load_config(const std::filesystem::path& path);
void save_config(const ModelConfig& cfg, const std::filesystem::path& path);

std::string to_string(ModelKind k);
std::string to_string(SelectionMode m);
std::string to_string(CellType c);
std::string to_string(PoolMode p);

}  // namespace gpnn
