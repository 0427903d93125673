#pragma once

#include <nlohmann/json.hpp>
#include <set>
#include <string>

#include "eqlm/adam.hpp"
#include "eqlm/data.hpp"
#include "eqlm/errors.hpp"
#include "eqlm/losses.hpp"
#include "eqlm/warp.hpp"

namespace eqlm {

using json = nlohmann::json;

struct TrainConfig {
  int landmarks = 7;
  LossConfig loss;
  AdamSettings adam;           // learning_rate is the initial rate
  int patience = 5;            // epochs without validation improvement
  double lr_decay = 0.1;
  int max_decays = 2;
  int max_epochs = 30;
  int batch_size = 32;
  int steps_per_epoch = 0;     // 0: one pass over the training split
  double val_fraction = 0.1;
  int max_val_samples = 0;     // 0: whole validation split
  std::uint64_t seed = 0;
  double init_std = 0.01;
  WarpSamplerConfig g1 = WarpSamplerConfig::mnist_g1();
  WarpSamplerConfig g2 = WarpSamplerConfig::mnist_g2();
  PreprocessSpec preprocess = PreprocessSpec::mnist();

  void validate() const {
    loss.validate();
    g1.validate();
    g2.validate();
    if (landmarks < 1) throw ConfigError("landmarks must be >= 1");
    if (!(lr_decay > 0 && lr_decay < 1)) throw ConfigError("lr_decay must be in (0, 1)");
    if (patience < 1) throw ConfigError("patience must be >= 1");
    if (max_decays < 0 || max_epochs < 0 || steps_per_epoch < 0 || max_val_samples < 0)
      throw ConfigError("epoch, step and decay counts must be >= 0");
    if (batch_size < 1) throw ConfigError("batch_size must be >= 1");
    if (!(val_fraction >= 0 && val_fraction < 1)) throw ConfigError("val_fraction must be in [0, 1)");
    if (!(adam.learning_rate >= 0)) throw ConfigError("learning rate must be >= 0");
    if (!(init_std > 0)) throw ConfigError("init_std must be > 0");
  }
};

namespace detail {

// Copies known keys of `j` into `out` fields; unknown keys are an error.
class FieldReader {
 public:
  FieldReader(const json& j, std::string where) : j_(j), where_(std::move(where)) {
    if (!j.is_object()) throw ConfigError(where_ + ": expected an object");
  }
  template <typename T>
  FieldReader& get(const char* key, T& out) {
    seen_.insert(key);
    if (auto it = j_.find(key); it != j_.end()) {
      try {
        out = it->template get<T>();
      } catch (const json::exception& e) {
        throw ConfigError(where_ + "." + key + ": " + e.what());
      }
    }
    return *this;
  }
  void finish() const {
    for (auto it = j_.begin(); it != j_.end(); ++it)
      if (!seen_.count(it.key())) throw ConfigError(where_ + ": unknown key '" + it.key() + "'");
  }

 private:
  const json& j_;
  std::string where_;
  std::set<std::string> seen_;
};

}  // namespace detail

inline json to_json(const LossConfig& c) { return {{"gamma", c.gamma}, {"lambda", c.lambda}, {"pool", c.pool}}; }

inline json to_json(const WarpSamplerConfig& c) {
  return {{"grid", c.grid},
          {"sigma_w", c.sigma_w},
          {"sigma_W", c.sigma_W},
          {"rotation_deg", c.rotation_deg},
          {"translation", c.translation},
          {"scale", c.scale},
          {"extra_prob", c.extra_prob}};
}

inline std::string to_string(ChannelPolicy p) {
  switch (p) {
    case ChannelPolicy::gray: return "gray";
    case ChannelPolicy::rgb: return "rgb";
    default: return "keep";
  }
}

inline ChannelPolicy channel_policy_from_string(const std::string& s) {
  if (s == "keep") return ChannelPolicy::keep;
  if (s == "gray") return ChannelPolicy::gray;
  if (s == "rgb") return ChannelPolicy::rgb;
  throw ConfigError("unknown channel policy '" + s + "' (keep, gray, rgb)");
}

inline json to_json(const PreprocessSpec& p) {
  return {{"resize", {p.resize_h, p.resize_w}}, {"pad", p.pad},   {"pad_value", p.pad_value},
          {"crop", {p.crop_h, p.crop_w}},       {"channels", to_string(p.channels)}};
}

inline json to_json(const TrainConfig& c) {
  return {{"landmarks", c.landmarks},
          {"loss", to_json(c.loss)},
          {"learning_rate", c.adam.learning_rate},
          {"adam_beta1", c.adam.beta1},
          {"adam_beta2", c.adam.beta2},
          {"adam_eps", c.adam.eps},
          {"patience", c.patience},
          {"lr_decay", c.lr_decay},
          {"max_decays", c.max_decays},
          {"max_epochs", c.max_epochs},
          {"batch_size", c.batch_size},
          {"steps_per_epoch", c.steps_per_epoch},
          {"val_fraction", c.val_fraction},
          {"max_val_samples", c.max_val_samples},
          {"seed", c.seed},
          {"init_std", c.init_std},
          {"g1", to_json(c.g1)},
          {"g2", to_json(c.g2)},
          {"preprocess", to_json(c.preprocess)}};
}

inline void from_json_into(const json& j, LossConfig& c, const std::string& where = "loss") {
  detail::FieldReader(j, where).get("gamma", c.gamma).get("lambda", c.lambda).get("pool", c.pool).finish();
}

inline void from_json_into(const json& j, WarpSamplerConfig& c, const std::string& where) {
  detail::FieldReader(j, where)
      .get("grid", c.grid)
      .get("sigma_w", c.sigma_w)
      .get("sigma_W", c.sigma_W)
      .get("rotation_deg", c.rotation_deg)
      .get("translation", c.translation)
      .get("scale", c.scale)
      .get("extra_prob", c.extra_prob)
      .finish();
}

inline void from_json_into(const json& j, PreprocessSpec& p, const std::string& where = "preprocess") {
  std::array<int, 2> resize{p.resize_h, p.resize_w}, crop{p.crop_h, p.crop_w};
  std::string channels = to_string(p.channels);
  detail::FieldReader(j, where)
      .get("resize", resize)
      .get("pad", p.pad)
      .get("pad_value", p.pad_value)
      .get("crop", crop)
      .get("channels", channels)
      .finish();
  p.resize_h = resize[0];
  p.resize_w = resize[1];
  p.crop_h = crop[0];
  p.crop_w = crop[1];
  p.channels = channel_policy_from_string(channels);
}

// Named presets usable wherever a sampler or preprocess object is expected.
inline WarpSamplerConfig sampler_preset(const std::string& name) {
  if (name == "mnist_g1") return WarpSamplerConfig::mnist_g1();
  if (name == "mnist_g2") return WarpSamplerConfig::mnist_g2();
  if (name == "faces_g1") return WarpSamplerConfig::faces_g1();
  if (name == "faces_g2") return WarpSamplerConfig::faces_g2();
  if (name == "zero") return WarpSamplerConfig::zero();
  throw ConfigError("unknown sampler preset '" + name + "'");
}

inline PreprocessSpec preprocess_preset(const std::string& name) {
  if (name == "mnist") return PreprocessSpec::mnist();
  if (name == "faces") return PreprocessSpec::faces();
  if (name == "shoes") return PreprocessSpec::shoes();
  throw ConfigError("unknown preprocess preset '" + name + "'");
}

// Missing keys keep their current values, so callers start from defaults.
inline void from_json_into(const json& j, TrainConfig& c, const std::string& where = "config") {
  json loss = to_json(c.loss), g1 = to_json(c.g1), g2 = to_json(c.g2), pre = to_json(c.preprocess);
  detail::FieldReader(j, where)
      .get("landmarks", c.landmarks)
      .get("loss", loss)
      .get("learning_rate", c.adam.learning_rate)
      .get("adam_beta1", c.adam.beta1)
      .get("adam_beta2", c.adam.beta2)
      .get("adam_eps", c.adam.eps)
      .get("patience", c.patience)
      .get("lr_decay", c.lr_decay)
      .get("max_decays", c.max_decays)
      .get("max_epochs", c.max_epochs)
      .get("batch_size", c.batch_size)
      .get("steps_per_epoch", c.steps_per_epoch)
      .get("val_fraction", c.val_fraction)
      .get("max_val_samples", c.max_val_samples)
      .get("seed", c.seed)
      .get("init_std", c.init_std)
      .get("g1", g1)
      .get("g2", g2)
      .get("preprocess", pre)
      .finish();
  from_json_into(loss, c.loss, where + ".loss");
  if (g1.is_string()) c.g1 = sampler_preset(g1.get<std::string>()); else from_json_into(g1, c.g1, where + ".g1");
  if (g2.is_string()) c.g2 = sampler_preset(g2.get<std::string>()); else from_json_into(g2, c.g2, where + ".g2");
  if (pre.is_string()) c.preprocess = preprocess_preset(pre.get<std::string>());
  else from_json_into(pre, c.preprocess, where + ".preprocess");
}

inline TrainConfig train_config_from_json(const json& j) {
  TrainConfig c;
  from_json_into(j, c);
  c.validate();
  return c;
}

}  // namespace eqlm
