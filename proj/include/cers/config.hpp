#pragma once

// Run configuration: model topology, training schedule, data split, and
// augmentation ranges. Serialized as a single flat JSON object; unknown keys
// are rejected so typos fail loudly.

#include <cstdint>
#include <fstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "cers/tensor.hpp"

namespace cers {

struct ModelConfig {
  Dim input_size = 224;
  Dim in_channels = 1;
  Dim num_classes = 4;
  std::vector<Dim> stage_dims{64, 128, 192, 256};
  std::vector<Dim> stage_depths{1, 1, 2, 1};
  std::vector<Dim> stage_heads{1, 2, 4, 8};
  Dim window = 4;
  Dim kv_stride = 2;
  Dim expansion = 4;
  std::vector<Dim> residual_dims{64, 128, 192, 256};
  std::vector<Dim> spatial_dims{32, 64, 96, 128, 256};
  double dropout = 0.3;
};

struct TrainConfig {
  double lr = 1e-3;
  double lr_decay = 0.85;
  Dim lr_decay_every = 20;
  Dim batch_size = 16;
  Dim epochs = 30;
  std::string class_weighting = "none";  // "none" | "inverse_frequency"
  double test_fraction = 0.30;
  double val_fraction = 0.20;
  std::uint32_t seed = 0;
  Dim synthetic_per_class = 500;
  // Overrides the alphabetical class order derived from directory names.
  std::vector<std::string> class_order;
};

struct AugmentConfig {
  bool enabled = true;
  double rotation_deg = 3.0;
  double shear_deg = 30.0;
  double scale_min = 1.0;
  double scale_max = 1.5;
  Dim translate_px = 5;
  bool reflect = true;
  bool oversample = false;
};

struct RunConfig {
  ModelConfig model;
  TrainConfig train;
  AugmentConfig augment;

  // Full-size preset (224x224 inputs).
  static RunConfig defaults() { return RunConfig{}; }

  // Small preset for quick runs and the bundled synthetic dataset.
  static RunConfig miniature() {
    RunConfig c;
    c.model.input_size = 64;
    c.model.stage_dims = {32, 64, 96, 128};
    c.model.stage_depths = {1, 1, 1, 1};
    c.model.stage_heads = {1, 2, 4, 8};
    c.model.expansion = 2;
    c.model.residual_dims = {32, 64, 96, 128};
    c.model.spatial_dims = {8, 16, 32, 64, 128};
    return c;
  }

  void set_key(const std::string& key, const nlohmann::json& v);
  void validate() const;

  static RunConfig from_json(const nlohmann::json& j, RunConfig base = miniature()) {
    if (!j.is_object()) fail("config: expected a JSON object");
    for (const auto& [key, value] : j.items()) base.set_key(key, value);
    return base;
  }

  static RunConfig from_file(const std::string& path, RunConfig base = miniature()) {
    std::ifstream f(path);
    if (!f) throw IoError("config: cannot open " + path);
    nlohmann::json j;
    try {
      f >> j;
    } catch (const nlohmann::json::exception& e) {
      fail("config: invalid JSON in " + path + ": " + e.what());
    }
    return from_json(j, std::move(base));
  }

  // "--set key=value" override; value is parsed as JSON, falling back to a
  // plain string so `--set class_weighting=none` works unquoted.
  void apply_override(const std::string& kv) {
    auto eq = kv.find('=');
    if (eq == std::string::npos || eq == 0)
      fail("config: override must look like key=value, got '" + kv + "'");
    const std::string key = kv.substr(0, eq), raw = kv.substr(eq + 1);
    nlohmann::json v = nlohmann::json::parse(raw, nullptr, false);
    if (v.is_discarded()) v = raw;
    set_key(key, v);
  }

  nlohmann::json to_json() const;
};

namespace detail {

inline Dim json_int(const nlohmann::json& v, const std::string& key) {
  if (!v.is_number_integer())
    fail("config: key '" + key + "' expects an integer, got " + v.dump());
  return v.get<Dim>();
}

inline double json_num(const nlohmann::json& v, const std::string& key) {
  if (!v.is_number())
    fail("config: key '" + key + "' expects a number, got " + v.dump());
  return v.get<double>();
}

inline bool json_bool(const nlohmann::json& v, const std::string& key) {
  if (!v.is_boolean())
    fail("config: key '" + key + "' expects a boolean, got " + v.dump());
  return v.get<bool>();
}

inline std::vector<Dim> json_ints(const nlohmann::json& v, const std::string& key,
                                  size_t want) {
  if (!v.is_array() || v.size() != want)
    fail("config: key '" + key + "' expects an array of " + std::to_string(want) +
         " integers, got " + v.dump());
  std::vector<Dim> out;
  for (const auto& e : v) out.push_back(json_int(e, key));
  return out;
}

}  // namespace detail

inline void RunConfig::set_key(const std::string& key, const nlohmann::json& v) {
  using detail::json_bool;
  using detail::json_int;
  using detail::json_ints;
  using detail::json_num;
  if (key == "input_size") model.input_size = json_int(v, key);
  else if (key == "in_channels") model.in_channels = json_int(v, key);
  else if (key == "num_classes") model.num_classes = json_int(v, key);
  else if (key == "stage_dims") model.stage_dims = json_ints(v, key, 4);
  else if (key == "stage_depths") model.stage_depths = json_ints(v, key, 4);
  else if (key == "stage_heads") model.stage_heads = json_ints(v, key, 4);
  else if (key == "window") model.window = json_int(v, key);
  else if (key == "kv_stride") model.kv_stride = json_int(v, key);
  else if (key == "expansion") model.expansion = json_int(v, key);
  else if (key == "residual_dims") model.residual_dims = json_ints(v, key, 4);
  else if (key == "spatial_dims") model.spatial_dims = json_ints(v, key, 5);
  else if (key == "dropout") model.dropout = json_num(v, key);
  else if (key == "lr") train.lr = json_num(v, key);
  else if (key == "lr_decay") train.lr_decay = json_num(v, key);
  else if (key == "lr_decay_every") train.lr_decay_every = json_int(v, key);
  else if (key == "batch_size") train.batch_size = json_int(v, key);
  else if (key == "epochs") train.epochs = json_int(v, key);
  else if (key == "class_weighting") {
    if (!v.is_string()) fail("config: key 'class_weighting' expects a string");
    train.class_weighting = v.get<std::string>();
  } else if (key == "test_fraction") train.test_fraction = json_num(v, key);
  else if (key == "val_fraction") train.val_fraction = json_num(v, key);
  else if (key == "seed") train.seed = static_cast<std::uint32_t>(json_int(v, key));
  else if (key == "synthetic_per_class") train.synthetic_per_class = json_int(v, key);
  else if (key == "class_order") {
    if (!v.is_array()) fail("config: key 'class_order' expects an array of strings");
    train.class_order.clear();
    for (const auto& e : v) {
      if (!e.is_string()) fail("config: key 'class_order' expects an array of strings");
      train.class_order.push_back(e.get<std::string>());
    }
  }
  else if (key == "augment") augment.enabled = json_bool(v, key);
  else if (key == "rotation_deg") augment.rotation_deg = json_num(v, key);
  else if (key == "shear_deg") augment.shear_deg = json_num(v, key);
  else if (key == "scale_min") augment.scale_min = json_num(v, key);
  else if (key == "scale_max") augment.scale_max = json_num(v, key);
  else if (key == "translate_px") augment.translate_px = json_int(v, key);
  else if (key == "reflect") augment.reflect = json_bool(v, key);
  else if (key == "oversample") augment.oversample = json_bool(v, key);
  else fail("config: unknown key '" + key + "'");
}

inline void RunConfig::validate() const {
  const ModelConfig& m = model;
  if (m.input_size <= 0 || m.input_size % 32 != 0)
    fail("config: input_size must be a positive multiple of 32, got " +
         std::to_string(m.input_size));
  if (m.in_channels < 1) fail("config: in_channels must be >= 1");
  if (m.num_classes < 2) fail("config: num_classes must be >= 2");
  auto positive4 = [](const std::vector<Dim>& v, const char* key) {
    if (v.size() != 4) fail(std::string("config: ") + key + " must have 4 entries");
    for (Dim d : v)
      if (d < 1) fail(std::string("config: ") + key + " entries must be positive");
  };
  positive4(m.stage_dims, "stage_dims");
  positive4(m.stage_depths, "stage_depths");
  positive4(m.stage_heads, "stage_heads");
  for (int i = 0; i < 4; ++i)
    if (m.stage_dims[i] % m.stage_heads[i] != 0)
      fail("config: stage_dims[" + std::to_string(i) + "] must be divisible by stage_heads[" +
           std::to_string(i) + "]");
  if (m.window < 1) fail("config: window must be >= 1");
  if (m.kv_stride < 1) fail("config: kv_stride must be >= 1");
  if (m.expansion < 1) fail("config: expansion must be >= 1");
  for (int i = 0; i < 4; ++i) {
    const Dim grid = m.input_size / (4 << i);
    if (grid < 1) fail("config: input_size too small for stage " + std::to_string(i + 1));
    const Dim we = std::min(m.window, grid);
    if (grid % we != 0)
      fail("config: stage " + std::to_string(i + 1) + " grid " + std::to_string(grid) +
           " is not divisible by the attention window " + std::to_string(we));
    const Dim folded = (grid + 2 - 3) / m.kv_stride + 1;
    const Dim mh = std::max<Dim>(1, we / m.kv_stride);
    if ((grid / we) * mh != folded)
      fail("config: stage " + std::to_string(i + 1) +
           " k/v folding does not tile; adjust window or kv_stride");
  }
  if (m.residual_dims.size() != 4) fail("config: residual_dims must have 4 entries");
  for (int i = 0; i < 4; ++i) {
    if (m.residual_dims[i] < 1) fail("config: residual_dims entries must be positive");
    if (i > 0 && m.residual_dims[i] < m.residual_dims[i - 1])
      fail("config: residual_dims must be non-decreasing");
  }
  if (m.residual_dims[3] != m.stage_dims[3])
    fail("config: residual_dims must end at the fusion width stage_dims[3] = " +
         std::to_string(m.stage_dims[3]));
  if (m.spatial_dims.size() != 5) fail("config: spatial_dims must have 5 entries");
  for (Dim d : m.spatial_dims)
    if (d < 1) fail("config: spatial_dims entries must be positive");
  if (m.dropout < 0.0 || m.dropout >= 1.0)
    fail("config: dropout must be in [0, 1)");

  if (train.lr <= 0) fail("config: lr must be positive");
  if (train.lr_decay <= 0 || train.lr_decay > 1) fail("config: lr_decay must be in (0, 1]");
  if (train.lr_decay_every < 1) fail("config: lr_decay_every must be >= 1");
  if (train.batch_size < 2) fail("config: batch_size must be >= 2 (batch norm needs it)");
  if (train.epochs < 0) fail("config: epochs must be >= 0");
  if (train.class_weighting != "none" && train.class_weighting != "inverse_frequency")
    fail("config: class_weighting must be 'none' or 'inverse_frequency'");
  if (train.test_fraction <= 0 || train.test_fraction >= 1)
    fail("config: test_fraction must be in (0, 1)");
  if (train.val_fraction < 0 || train.val_fraction >= 1)
    fail("config: val_fraction must be in [0, 1)");
  if (train.synthetic_per_class < 10)
    fail("config: synthetic_per_class must be at least 10");

  if (augment.rotation_deg < 0) fail("config: rotation_deg must be >= 0");
  if (augment.shear_deg < 0 || augment.shear_deg >= 90)
    fail("config: shear_deg must be in [0, 90)");
  if (augment.scale_min <= 0 || augment.scale_max < augment.scale_min)
    fail("config: scale range must satisfy 0 < scale_min <= scale_max");
  if (augment.translate_px < 0) fail("config: translate_px must be >= 0");
}

inline nlohmann::json RunConfig::to_json() const {
  nlohmann::json j;
  j["input_size"] = model.input_size;
  j["in_channels"] = model.in_channels;
  j["num_classes"] = model.num_classes;
  j["stage_dims"] = model.stage_dims;
  j["stage_depths"] = model.stage_depths;
  j["stage_heads"] = model.stage_heads;
  j["window"] = model.window;
  j["kv_stride"] = model.kv_stride;
  j["expansion"] = model.expansion;
  j["residual_dims"] = model.residual_dims;
  j["spatial_dims"] = model.spatial_dims;
  j["dropout"] = model.dropout;
  j["lr"] = train.lr;
  j["lr_decay"] = train.lr_decay;
  j["lr_decay_every"] = train.lr_decay_every;
  j["batch_size"] = train.batch_size;
  j["epochs"] = train.epochs;
  j["class_weighting"] = train.class_weighting;
  j["test_fraction"] = train.test_fraction;
  j["val_fraction"] = train.val_fraction;
  j["seed"] = train.seed;
  j["synthetic_per_class"] = train.synthetic_per_class;
  j["class_order"] = train.class_order;
  j["augment"] = augment.enabled;
  j["rotation_deg"] = augment.rotation_deg;
  j["shear_deg"] = augment.shear_deg;
  j["scale_min"] = augment.scale_min;
  j["scale_max"] = augment.scale_max;
  j["translate_px"] = augment.translate_px;
  j["reflect"] = augment.reflect;
  j["oversample"] = augment.oversample;
  return j;
}

}  // namespace cers
