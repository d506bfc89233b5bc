#pragma once

// Training loops for empirical risk minimisation, PGD adversarial
// augmentation and TRADES, with optional smoothing-style augmentation and
// model selection on the source validation split.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <map>
#include <numeric>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "cshift/attack.hpp"
#include "cshift/certify.hpp"
#include "cshift/datagen.hpp"
#include "cshift/diffnet.hpp"
#include "cshift/parallel.hpp"

namespace cshift {

enum class Method { ERM, PGDAug, TRADES };

inline std::string to_string(Method m) {
  switch (m) {
    case Method::ERM: return "erm";
    case Method::PGDAug: return "pgd";
    case Method::TRADES: return "trades";
  }
  return "?";
}

inline Method parse_method(const std::string& s) {
  if (s == "erm" || s == "baseline") return Method::ERM;
  if (s == "pgd" || s == "pgdaug") return Method::PGDAug;
  if (s == "trades") return Method::TRADES;
  throw std::invalid_argument("unknown training method '" + s + "' (expected erm, pgd or trades)");
}

/// Gaussian augmentation: pixel noise ("noise") or deformation parameters.
struct Augmentation {
  CertMode mode;
  double sigma = 0.0;

  [[nodiscard]] std::string name() const { return mode.pixel ? "noise" : mode.name(); }
};

inline CertMode parse_augment_mode(const std::string& s) {
  if (s == "noise" || s == "pixel") return CertMode::pixels();
  return CertMode::deformation(parse_deform_kind(s));
}

struct TrainConfig {
  Method method = Method::ERM;
  double lambda = 0.5;  // clean-loss weight for PGD augmentation
  double beta = 3.0;    // TRADES consistency weight
  AttackConfig attack = AttackConfig::training(2.0 / 255.0);
  std::size_t epochs = 30;
  std::size_t batch_size = 32;
  double learning_rate = 0.05;
  std::uint64_t seed = 1;
  std::string architecture = "cnn";
  std::optional<Augmentation> augmentation;

  void validate() const {
    if (!(lambda >= 0.0 && lambda <= 1.0)) throw std::invalid_argument("lambda must lie in [0, 1]");
    if (!(beta >= 0.0) || !std::isfinite(beta)) throw std::invalid_argument("beta must be >= 0");
    if (epochs < 1) throw std::invalid_argument("epochs must be >= 1");
    if (batch_size < 1) throw std::invalid_argument("batch size must be >= 1");
    if (!(learning_rate > 0.0)) throw std::invalid_argument("learning rate must be > 0");
    if (augmentation && !(augmentation->sigma >= 0.0)) throw std::invalid_argument("augmentation sigma must be >= 0");
    if (method != Method::ERM) attack.validate();
  }
};

struct EpochRecord {
  std::size_t epoch = 0;
  double train_loss = 0.0;  // clean cross-entropy over the training split after the epoch
  double val_accuracy = 0.0;
};

/// Entry 0 describes the initial network; entries 1..E the checkpoints.
struct TrainLog {
  std::vector<EpochRecord> epochs;
};

struct TrainResult {
  Network network;                  // after the last epoch
  std::vector<Network> checkpoints;  // checkpoints[e - 1] is the state after epoch e
  TrainLog log;
};

struct Objective {
  double loss = 0.0;
  Gradients grad;
};

namespace detail {

// dKL(softmax(ref) || softmax(z)) / dref.
inline std::vector<double> kl_reference_gradient(std::span<const double> ref, std::span<const double> z) {
  const auto logp = log_softmax(ref);
  const auto logq = log_softmax(z);
  double kl = 0.0;
  for (std::size_t i = 0; i < ref.size(); ++i) kl += std::exp(logp[i]) * (logp[i] - logq[i]);
  std::vector<double> g(ref.size());
  for (std::size_t i = 0; i < ref.size(); ++i) g[i] = std::exp(logp[i]) * ((logp[i] - logq[i]) - kl);
  return g;
}

inline ImageTensor augment(const ImageTensor& x, const Augmentation& aug, Rng& rng) {
  if (aug.sigma == 0.0) return x;
  SmoothingConfig sc;
  sc.sigma = aug.sigma;
  return detail::perturb(x, aug.mode, sc, rng);
}

}  // namespace detail

/// Loss and parameter gradient of one training example under cfg.method.
///   ERM:    CE(f(x), y)
///   PGDAug: lambda CE(f(x), y) + (1 - lambda) CE(f(x_adv), y)
///   TRADES: CE(f(x), y) + beta KL(f(x) || f(x + delta*)), delta* maximising the KL term
inline Objective sample_objective(const Network& net, const ImageTensor& x, std::size_t y, const TrainConfig& cfg,
                                  Rng& rng) {
  Objective out;
  out.grad = net.zero_gradients();
  const Trace clean = forward_trace(net, x);
  const auto ce = LossSpec::cross_entropy(y);
  std::vector<double> dclean = loss_gradient(clean.logits, ce);
  out.loss = loss(clean.logits, ce);

  if (cfg.method == Method::PGDAug && cfg.lambda < 1.0) {
    const double lam = cfg.lambda;
    const ImageTensor adv = pgd_loss(net, x, ce, cfg.attack, rng).adversarial;
    const Trace at = forward_trace(net, adv);
    out.loss = lam * out.loss + (1.0 - lam) * loss(at.logits, ce);
    auto dadv = loss_gradient(at.logits, ce);
    for (double& v : dadv) v *= (1.0 - lam);
    for (double& v : dclean) v *= lam;
    backward(net, at, dadv, &out.grad, nullptr);
  } else if (cfg.method == Method::TRADES && cfg.beta > 0.0) {
    const auto kl = LossSpec::kl_divergence(clean.logits);
    const ImageTensor adv = pgd_loss(net, x, kl, cfg.attack, rng).adversarial;
    const Trace at = forward_trace(net, adv);
    out.loss += cfg.beta * loss(at.logits, kl);
    auto dadv = loss_gradient(at.logits, kl);
    for (double& v : dadv) v *= cfg.beta;
    const auto dref = detail::kl_reference_gradient(clean.logits, at.logits);
    for (std::size_t i = 0; i < dclean.size(); ++i) dclean[i] += cfg.beta * dref[i];
    backward(net, at, dadv, &out.grad, nullptr);
  }
  backward(net, clean, dclean, &out.grad, nullptr);
  return out;
}

/// Mean objective over a batch. Sample i draws its attack / augmentation
/// randomness from (seed, epoch, ids[i]); per-sample gradients are summed in
/// batch order.
inline Objective batch_objective(const Network& net, std::span<const LabeledSample> batch,
                                 std::span<const std::size_t> ids, const TrainConfig& cfg, std::size_t epoch,
                                 std::size_t threads = 1) {
  if (batch.empty()) throw std::invalid_argument("empty batch");
  std::vector<Objective> parts(batch.size());
  parallel_for(batch.size(), threads, [&](std::size_t i) {
    const std::uint64_t id = ids.empty() ? i : ids[i];
    ImageTensor x = batch[i].image;
    if (cfg.augmentation) {
      Rng arng = substream(cfg.seed, {tag::augment, epoch, id});
      x = detail::augment(x, *cfg.augmentation, arng);
    }
    Rng rng = substream(cfg.seed, {tag::attack, epoch, id});
    parts[i] = sample_objective(net, x, batch[i].label, cfg, rng);
  });
  Objective total;
  total.grad = net.zero_gradients();
  for (const auto& p : parts) {
    total.loss += p.loss;
    accumulate(total.grad, p.grad);
  }
  const double n = static_cast<double>(batch.size());
  total.loss /= n;
  for (auto& l : total.grad) {
    for (double& v : l.weight) v /= n;
    for (double& v : l.bias) v /= n;
  }
  return total;
}

inline double mean_cross_entropy(const Network& net, std::span<const LabeledSample> data, std::size_t threads = 1) {
  std::vector<double> l(data.size());
  parallel_for(data.size(), threads, [&](std::size_t i) {
    l[i] = loss(forward(net, data[i].image), LossSpec::cross_entropy(data[i].label));
  });
  double s = 0.0;
  for (double v : l) s += v;
  return data.empty() ? 0.0 : s / static_cast<double>(data.size());
}

/// Trains on the source training split only. The target domain is never read.
inline TrainResult train(const DGBenchmark& bench, const TrainConfig& cfg, std::size_t threads = 1) {
  cfg.validate();
  const auto train_set = bench.source_train();
  const auto val_set = bench.source_val();
  if (train_set.empty()) throw std::invalid_argument("benchmark has no source training samples");
  if (val_set.empty()) throw std::invalid_argument("benchmark has no source validation samples");

  TrainResult res;
  Network net = Network::from_descriptor(architecture(cfg.architecture, bench.image_shape(), bench.class_count()));
  net.initialize(cfg.seed);
  res.log.epochs.push_back({0, mean_cross_entropy(net, train_set, threads), clean_accuracy(net, val_set, threads)});

  std::vector<std::size_t> order(train_set.size());
  std::vector<LabeledSample> batch;
  std::vector<std::size_t> ids;
  for (std::size_t epoch = 1; epoch <= cfg.epochs; ++epoch) {
    std::iota(order.begin(), order.end(), std::size_t{0});
    Rng shuffle_rng = substream(cfg.seed, {tag::shuffle, epoch});
    std::shuffle(order.begin(), order.end(), shuffle_rng);
    for (std::size_t start = 0; start < order.size(); start += cfg.batch_size) {
      const std::size_t end = std::min(order.size(), start + cfg.batch_size);
      batch.clear();
      ids.clear();
      for (std::size_t k = start; k < end; ++k) {
        batch.push_back(train_set[order[k]]);
        ids.push_back(order[k]);
      }
      const Objective obj = batch_objective(net, batch, ids, cfg, epoch, threads);
      net = sgd_step(net, obj.grad, cfg.learning_rate);
    }
    res.log.epochs.push_back({epoch, mean_cross_entropy(net, train_set, threads), clean_accuracy(net, val_set, threads)});
    res.checkpoints.push_back(net);
  }
  res.network = std::move(net);
  return res;
}

/// Index (0-based into checkpoints) of the best source-validation accuracy;
/// ties go to the earliest epoch. Only log entries with epoch >= 1 compete.
inline std::size_t select_checkpoint(const TrainLog& log) {
  std::optional<std::size_t> best;
  double best_acc = -1.0;
  for (const auto& rec : log.epochs) {
    if (rec.epoch == 0) continue;
    if (rec.val_accuracy > best_acc) {
      best_acc = rec.val_accuracy;
      best = rec.epoch - 1;
    }
  }
  if (!best) throw std::invalid_argument("empty training log");
  return *best;
}

inline Network select_model(const TrainLog& log, std::span<const Network> checkpoints) {
  if (checkpoints.empty()) throw std::invalid_argument("no checkpoints to select from");
  const std::size_t idx = select_checkpoint(log);
  if (idx >= checkpoints.size()) throw std::invalid_argument("training log refers to a missing checkpoint");
  return checkpoints[idx];
}

// ---------------------------------------------------------------------------
// Deformation invariance (augmentation ablation)

/// Accuracy on inputs deformed with parameters of magnitude eps. Sample i gets
/// a fixed direction from (seed, invariance, i): random signs per deformation
/// parameter, or a standard normal image for pixel noise. The same direction
/// is reused for every eps.
inline double deformed_accuracy(const Network& net, std::span<const LabeledSample> data, const CertMode& mode,
                                double eps, std::uint64_t seed = 0, std::size_t threads = 1) {
  if (data.empty()) throw std::invalid_argument("accuracy of an empty dataset");
  std::vector<unsigned char> ok(data.size(), 0);
  parallel_for(data.size(), threads, [&](std::size_t i) {
    Rng rng = substream(seed, {tag::invariance, i});
    ImageTensor x = data[i].image;
    if (mode.pixel) {
      std::normal_distribution<double> g(0.0, 1.0);
      for (double& v : x.data) v += eps * g(rng);
    } else {
      DeformationSpec spec{mode.kind, std::vector<double>(mode.dimension()), mode.dct_order};
      std::bernoulli_distribution coin(0.5);
      for (double& p : spec.params) p = coin(rng) ? eps : -eps;
      x = apply_deformation(x, spec);
    }
    ok[i] = predict(net, x) == data[i].label;
  });
  std::size_t n = 0;
  for (auto v : ok) n += v;
  return static_cast<double>(n) / static_cast<double>(data.size());
}

struct InvarianceRow {
  std::string deformation;
  double eps = 0.0;
  double source_without = 0.0;
  double target_without = 0.0;
  double source_with = 0.0;
  double target_with = 0.0;
};

/// Source (validation) and target accuracy under each deformation and
/// magnitude, for the unaugmented model and the model augmented with the
/// matching deformation.
inline std::vector<InvarianceRow> invariance_table(const DGBenchmark& bench, const std::vector<std::string>& kinds,
                                                   const std::map<std::string, std::vector<double>>& eps_grid,
                                                   const Network& without,
                                                   const std::map<std::string, Network>& with_models,
                                                   std::uint64_t seed = 0, std::size_t threads = 1) {
  const auto src = bench.source_val();
  const auto tgt = bench.target_samples();
  std::vector<InvarianceRow> rows;
  for (const auto& kind : kinds) {
    const auto model = with_models.find(kind);
    if (model == with_models.end()) throw std::invalid_argument("no augmented model for '" + kind + "'");
    const auto grid = eps_grid.find(kind);
    if (grid == eps_grid.end()) throw std::invalid_argument("no eps grid for '" + kind + "'");
    const CertMode mode = parse_augment_mode(kind);
    for (double eps : grid->second) {
      rows.push_back({kind, eps, deformed_accuracy(without, src, mode, eps, seed, threads),
                      deformed_accuracy(without, tgt, mode, eps, seed, threads),
                      deformed_accuracy(model->second, src, mode, eps, seed, threads),
                      deformed_accuracy(model->second, tgt, mode, eps, seed, threads)});
    }
  }
  return rows;
}

}  // namespace cshift
