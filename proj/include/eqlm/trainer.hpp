#pragma once

#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <limits>
#include <optional>
#include <ostream>
#include <string>
#include <vector>

#include "eqlm/adam.hpp"
#include "eqlm/checkpoint.hpp"
#include "eqlm/config.hpp"
#include "eqlm/data.hpp"
#include "eqlm/detector.hpp"
#include "eqlm/losses.hpp"

namespace eqlm {

inline json to_json(const ObjectiveTerms& t) {
  return {{"align", t.align}, {"div_x", t.div_x}, {"div_xp", t.div_xp}, {"weight_decay", t.weight_decay},
          {"total", t.total}};
}

// Thrown when training meets a non-finite value; carries the last checkpoint
// whose validation objective was finite.
class TrainingAborted : public NumericError {
 public:
  TrainingAborted(const std::string& what, Checkpoint last_good)
      : NumericError(what), last_good_(std::move(last_good)) {}
  const Checkpoint& last_good() const { return last_good_; }

 private:
  Checkpoint last_good_;
};

struct TrainOptions {
  std::optional<fs::path> checkpoint_path;  // best weights, rewritten on improvement
  std::optional<fs::path> log_path;         // one JSON record per line
  std::ostream* echo = nullptr;             // receives the same records
  std::function<void(int epoch, const Detector<float>&)> on_epoch;  // after each epoch's validation
};

struct TrainResult {
  Checkpoint checkpoint;         // best validation weights
  Detector<float> detector;      // same weights, ready to use
  std::vector<json> log;
};

// Train / validation split: a seeded permutation, the last val_fraction held out.
struct Split {
  std::vector<int> train, val;
};

inline Split split_dataset(int n, const TrainConfig& cfg) {
  std::vector<int> order = epoch_order(n, derive_seed(cfg.seed, 0x5b1170), 0);
  int n_val = static_cast<int>(std::lround(cfg.val_fraction * n));
  if (cfg.val_fraction > 0 && n_val == 0 && n > 1) n_val = 1;
  if (n_val >= n) n_val = n - 1;
  Split s;
  s.train.assign(order.begin(), order.end() - n_val);
  s.val.assign(order.end() - n_val, order.end());
  if (s.val.empty()) s.val = s.train;  // nothing to hold out: validate on the training images
  if (cfg.max_val_samples > 0 && static_cast<int>(s.val.size()) > cfg.max_val_samples)
    s.val.resize(cfg.max_val_samples);
  return s;
}

// Objective over fixed triplet batches, eval-mode detector.
class Validator {
 public:
  Validator(const std::vector<Sample>& samples, const std::vector<int>& indices, const TrainConfig& cfg)
      : cfg_(cfg) {
    for (const auto& b : split_batches(indices, cfg.batch_size))
      batches_.push_back(make_batch(samples, b, cfg.g1, cfg.g2, cfg.preprocess, derive_seed(cfg.seed, 0x7a11d), 0));
  }

  ObjectiveTerms operator()(const Detector<float>& det) const {
    ObjectiveTerms sum;
    int count = 0;
    const double wn = det.network().weight_norm2();
    for (const auto& b : batches_) {
      const auto mx = det.probability_maps(b.x), mxp = det.probability_maps(b.xp);
      const auto r = objective(mx, mxp, std::span<const TpsWarp>(b.g), wn, cfg_.loss);
      const int n = b.x.batch();
      sum.align += r.terms.align * n;
      sum.div_x += r.terms.div_x * n;
      sum.div_xp += r.terms.div_xp * n;
      count += n;
    }
    sum.align /= count;
    sum.div_x /= count;
    sum.div_xp /= count;
    sum.weight_decay = cfg_.loss.lambda * wn;
    sum.total = sum.weight_decay + sum.align + sum.div_x + sum.div_xp;
    return sum;
  }

 private:
  TrainConfig cfg_;
  std::vector<TripletBatch> batches_;
};

// One Adam step on a triplet batch; returns the objective before the update.
inline ObjectiveTerms train_step(Detector<float>& det, const TripletBatch& b, const LossConfig& loss,
                                 AdamState<float>& adam) {
  const int n = b.x.batch();
  auto tape = det.forward_train(concat_batch(b.x, b.xp));
  const auto mx = tape.output.slice(0, n), mxp = tape.output.slice(n, n);
  auto res = objective(mx, mxp, std::span<const TpsWarp>(b.g), det.network(), loss);
  auto grads = det.network().backward(tape, concat_batch(res.grad_x, res.grad_xp), false);
  add_weight_decay_gradient(det.network(), grads, loss.lambda);
  adam_step(det.network().params(), grads.params, adam);
  return res.terms;
}

// Train-mode objective of a batch without changing weights or statistics.
inline ObjectiveTerms batch_objective(const Detector<float>& det, const TripletBatch& b, const LossConfig& loss) {
  Detector<float> copy = det;
  const int n = b.x.batch();
  auto tape = copy.forward_train(concat_batch(b.x, b.xp));
  return objective(tape.output.slice(0, n), tape.output.slice(n, n), std::span<const TpsWarp>(b.g),
                   det.network(), loss)
      .terms;
}

inline Checkpoint make_checkpoint(const Detector<float>& det, const TrainConfig& cfg, const json& extra) {
  Checkpoint ck;
  ck.manifest = extra;
  ck.manifest["train_config"] = to_json(cfg);
  ck.manifest["preprocess"] = to_json(cfg.preprocess);
  put_detector(ck, det);
  return ck;
}

namespace detail {

class MetricLog {
 public:
  explicit MetricLog(const TrainOptions& opt) : echo_(opt.echo) {
    if (opt.log_path) {
      if (opt.log_path->has_parent_path()) fs::create_directories(opt.log_path->parent_path());
      file_.open(*opt.log_path, std::ios::trunc);
      if (!file_) throw FormatError("cannot write " + opt.log_path->string());
    }
  }
  void write(const json& record) {
    records.push_back(record);
    const std::string line = record.dump();
    if (file_.is_open()) file_ << line << '\n' << std::flush;
    if (echo_) *echo_ << line << '\n' << std::flush;
  }
  std::vector<json> records;

 private:
  std::ofstream file_;
  std::ostream* echo_;
};

inline TrainResult run_training(Detector<float> det, const std::vector<Sample>& samples, const TrainConfig& cfg,
                                const TrainOptions& opt, json manifest) {
  cfg.validate();
  if (samples.empty()) throw ConfigError("training set is empty");
  const Split split = split_dataset(static_cast<int>(samples.size()), cfg);
  const Validator validate(samples, split.val, cfg);
  MetricLog log(opt);
  AdamState<float> adam(det.network().params(), cfg.adam);

  double lr = cfg.adam.learning_rate;
  ObjectiveTerms val = validate(det);
  double best = val.total;
  int best_epoch = 0, decays = 0, since = 0;
  std::vector<double> history{val.total};
  auto snapshot = [&](int epoch) {
    json m = manifest;
    m["epoch"] = epoch;
    m["history"] = history;
    return make_checkpoint(det, cfg, m);
  };
  Checkpoint best_ck = snapshot(0);
  Detector<float> best_det = det;
  if (opt.checkpoint_path) save_checkpoint(best_ck, *opt.checkpoint_path);
  log.write({{"epoch", 0},
             {"lr", lr},
             {"train_samples", split.train.size()},
             {"val_samples", split.val.size()},
             {"val", to_json(val)}});

  for (int epoch = 1; epoch <= cfg.max_epochs; ++epoch) {
    std::vector<int> order;
    for (int i : epoch_order(static_cast<int>(split.train.size()), cfg.seed, epoch)) order.push_back(split.train[i]);
    auto batches = split_batches(order, cfg.batch_size);
    if (cfg.steps_per_epoch > 0 && static_cast<int>(batches.size()) > cfg.steps_per_epoch)
      batches.resize(cfg.steps_per_epoch);
    ObjectiveTerms train;
    int seen = 0, step = 0;
    try {
      for (const auto& idx : batches) {
        const auto b = make_batch(samples, idx, cfg.g1, cfg.g2, cfg.preprocess, cfg.seed, epoch);
        const ObjectiveTerms t = train_step(det, b, cfg.loss, adam);
        const int n = static_cast<int>(idx.size());
        train.align += t.align * n;
        train.div_x += t.div_x * n;
        train.div_xp += t.div_xp * n;
        train.weight_decay += t.weight_decay * n;
        seen += n;
        ++step;
      }
      val = validate(det);
      check_finite_term(val.total, "validation total");
    } catch (const NumericError& e) {
      throw TrainingAborted("epoch " + std::to_string(epoch) + " step " + std::to_string(step) + ": " + e.what() +
                                "; keeping checkpoint from epoch " + std::to_string(best_epoch),
                            best_ck);
    }
    train.align /= seen;
    train.div_x /= seen;
    train.div_xp /= seen;
    train.weight_decay /= seen;
    train.total = train.weight_decay + train.align + train.div_x + train.div_xp;
    history.push_back(val.total);

    std::string event = "none";
    if (val.total < best) {
      best = val.total;
      best_epoch = epoch;
      since = 0;
      event = "improved";
      best_ck = snapshot(epoch);
      best_det = det;
      if (opt.checkpoint_path) save_checkpoint(best_ck, *opt.checkpoint_path);
    } else if (++since >= cfg.patience) {
      since = 0;
      if (decays < cfg.max_decays) {
        ++decays;
        event = "lr_decay";
      } else {
        event = "stop";
      }
    }
    if (opt.on_epoch) opt.on_epoch(epoch, det);
    log.write({{"epoch", epoch},
               {"lr", lr},
               {"steps", step},
               {"train", to_json(train)},
               {"val", to_json(val)},
               {"best_val", best},
               {"best_epoch", best_epoch},
               {"event", event}});
    if (event == "stop") break;
    if (event == "lr_decay") {
      lr *= cfg.lr_decay;
      adam.settings.learning_rate = lr;
    }
  }
  best_ck.manifest["history"] = history;
  best_ck.manifest["epochs_run"] = static_cast<int>(history.size()) - 1;
  if (opt.checkpoint_path) save_checkpoint(best_ck, *opt.checkpoint_path);
  return {std::move(best_ck), std::move(best_det), std::move(log.records)};
}

inline std::string hex64(std::uint64_t v) {
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(v));
  return buf;
}

}  // namespace detail

struct EquivarianceReport {
  double mean_error = 0;         // mean over pairs and landmarks of |u_r - g(v_r)|
  double mean_pairwise = 0;      // mean distance between distinct landmarks of x
  int pairs = 0;
};

// Detections on x and x' of fresh triplets (seeded per image and repeat),
// compared after mapping x' landmarks through g.
inline EquivarianceReport measure_equivariance(const Detector<float>& det, const std::vector<Sample>& samples,
                                               const std::vector<int>& indices, const TrainConfig& cfg,
                                               std::uint64_t seed, int warps_per_image) {
  EquivarianceReport rep;
  double err = 0, spread = 0;
  for (int rep_i = 0; rep_i < warps_per_image; ++rep_i)
    for (const auto& b : split_batches(indices, cfg.batch_size)) {
      const auto batch = make_batch(samples, b, cfg.g1, cfg.g2, cfg.preprocess, seed, rep_i);
      const auto u = det.detect(batch.x).landmarks, v = det.detect(batch.xp).landmarks;
      for (std::size_t n = 0; n < u.size(); ++n) {
        const std::size_t k = u[n].size();
        double e = 0, d = 0;
        for (std::size_t r = 0; r < k; ++r) {
          e += norm(u[n][r] - batch.g[n](v[n][r]));
          for (std::size_t q = r + 1; q < k; ++q) d += norm(u[n][r] - u[n][q]);
        }
        err += e / k;
        spread += k > 1 ? d / (k * (k - 1) / 2.0) : 0.0;
        ++rep.pairs;
      }
    }
  rep.mean_error = err / rep.pairs;
  rep.mean_pairwise = spread / rep.pairs;
  return rep;
}

inline Detector<float> init_detector(const TrainConfig& cfg, int in_channels) {
  Detector<float> det(cfg.landmarks, in_channels);
  det.init(derive_seed(cfg.seed, 0x1a17), cfg.init_std);
  return det;
}

inline int input_channels(const std::vector<Sample>& samples, const PreprocessSpec& spec) {
  if (samples.empty()) throw ConfigError("dataset is empty");
  return spec.out_channels(samples.front().image.channels());
}

inline TrainResult train(const std::vector<Sample>& samples, const TrainConfig& cfg, const TrainOptions& opt = {}) {
  cfg.validate();
  const int c = input_channels(samples, cfg.preprocess);
  return detail::run_training(init_detector(cfg, c), samples, cfg, opt,
                              {{"created_by", "train"}, {"lineage", json::array()}});
}

// Continues training from a checkpoint on new data.
inline TrainResult finetune(const Checkpoint& from, const std::vector<Sample>& samples, const TrainConfig& cfg,
                            const TrainOptions& opt = {}) {
  cfg.validate();
  Detector<float> det = get_detector(from);
  if (det.landmarks() != cfg.landmarks)
    throw ConfigError("finetune: checkpoint has " + std::to_string(det.landmarks()) + " landmarks, config has " +
                      std::to_string(cfg.landmarks));
  const int c = input_channels(samples, cfg.preprocess);
  if (det.in_channels() != c)
    throw ConfigError("finetune: checkpoint expects " + std::to_string(det.in_channels()) +
                      " input channels, data provides " + std::to_string(c));
  json lineage = from.manifest.value("lineage", json::array());
  lineage.push_back({{"created_by", from.manifest.value("created_by", "unknown")},
                     {"epoch", from.manifest.value("epoch", 0)},
                     {"parameter_digest", detail::hex64(parameter_digest(det))}});
  return detail::run_training(std::move(det), samples, cfg, opt, {{"created_by", "finetune"}, {"lineage", lineage}});
}

}  // namespace eqlm
