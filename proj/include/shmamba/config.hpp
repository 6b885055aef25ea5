#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>

#include "json.hpp"
#include "shmamba/data.hpp"
#include "shmamba/error.hpp"
#include "shmamba/model.hpp"

namespace shmamba {

using json = nlohmann::json;

struct TrainConfig {
  std::size_t epochs = 30;
  std::size_t batch_size = 32;
  double lr = 1e-4;
  /// Stop after this many optimizer steps; 0 means no limit.
  std::size_t max_steps = 0;
  std::size_t log_every = 1;
  /// Full-split evaluation cadence in steps; 0 evaluates only at the end.
  std::size_t eval_every = 0;
  /// Global gradient-norm ceiling; 0 disables clipping.
  double clip_norm = 1.0;
  std::optional<std::uint64_t> seed;

  void validate() const {
    if (batch_size < 1) throw ConfigError("train config: batch_size must be >= 1");
    if (!(lr > 0.0)) throw ConfigError("train config: lr must be positive");
    if (log_every < 1) throw ConfigError("train config: log_every must be >= 1");
    if (!(clip_norm >= 0.0)) throw ConfigError("train config: clip_norm must be >= 0");
  }
};

inline void to_json(json& j, const TrainConfig& c) {
  j = json{{"epochs", c.epochs},         {"batch_size", c.batch_size}, {"lr", c.lr},
           {"max_steps", c.max_steps},   {"log_every", c.log_every},   {"eval_every", c.eval_every},
           {"clip_norm", c.clip_norm}};
  if (c.seed) j["seed"] = *c.seed;
}

inline void merge_json(const json& j, TrainConfig& c) {
  c.epochs = j.value("epochs", c.epochs);
  c.batch_size = j.value("batch_size", c.batch_size);
  c.lr = j.value("lr", c.lr);
  c.max_steps = j.value("max_steps", c.max_steps);
  c.log_every = j.value("log_every", c.log_every);
  c.eval_every = j.value("eval_every", c.eval_every);
  c.clip_norm = j.value("clip_norm", c.clip_norm);
  if (j.contains("seed")) c.seed = j.at("seed").get<std::uint64_t>();
}

/// Everything a run needs: model shape, training schedule, and the synthetic
/// data recipe used by gen-data.
struct RunConfig {
  model::ModelConfig model;
  TrainConfig train;
  data::SyntheticSpec data;

  /// Batch 32, 30 epochs, lr 1e-4, hidden 256, 4 blocks.
  static RunConfig full() { return RunConfig{}; }

  /// Hidden 64, batch 8, T 8, capped at 500 steps.
  static RunConfig desk() {
    RunConfig c;
    c.model = model::ModelConfig::desk();
    c.train.batch_size = 8;
    c.train.epochs = 63;
    c.train.max_steps = 500;
    c.train.log_every = 1;
    c.data.T = 8;
    return c;
  }

  static RunConfig preset(const std::string& name) {
    if (name == "full") return full();
    if (name == "desk") return desk();
    throw ConfigError("unknown preset '" + name + "' (expected full or desk)");
  }

  void validate() const {
    model.validate();
    train.validate();
    data.validate();
  }
};

inline void to_json(json& j, const RunConfig& c) { j = json{{"model", c.model}, {"train", c.train}, {"data", c.data}}; }

/// Starts from the preset named by "preset" (default "desk") and overlays
/// any "model", "train" and "data" keys present.
inline RunConfig run_config_from_json(const json& j) {
  if (!j.is_object()) throw ConfigError("config must be a JSON object");
  for (const auto& [key, value] : j.items()) {
    if (key != "preset" && key != "model" && key != "train" && key != "data") {
      throw ConfigError("unknown config section '" + key + "'");
    }
  }
  try {
    RunConfig c = RunConfig::preset(j.value("preset", std::string("desk")));
    if (j.contains("model")) model::merge_json(j.at("model"), c.model);
    if (j.contains("train")) merge_json(j.at("train"), c.train);
    if (j.contains("data")) {
      json d = c.data;
      d.update(j.at("data"));
      c.data = d.get<data::SyntheticSpec>();
    }
    return c;
  } catch (const json::exception& e) {
    throw ConfigError(std::string("config: ") + e.what());
  }
}

inline RunConfig load_run_config(const std::filesystem::path& path) {
  try {
    return run_config_from_json(data::read_json_file(path));
  } catch (const IoError& e) {
    throw ConfigError(e.what());
  }
}

}  // namespace shmamba
