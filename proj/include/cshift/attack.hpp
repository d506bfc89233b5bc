#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <random>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "cshift/datagen.hpp"
#include "cshift/diffnet.hpp"
#include "cshift/parallel.hpp"
#include "cshift/rng.hpp"

namespace cshift {

enum class Norm { L2, Linf };

inline Norm parse_norm(const std::string& s) {
  if (s == "linf" || s == "inf" || s == "Linf") return Norm::Linf;
  if (s == "l2" || s == "2" || s == "L2") return Norm::L2;
  throw std::invalid_argument("unknown norm '" + s + "' (expected linf or l2)");
}

inline std::string to_string(Norm n) { return n == Norm::Linf ? "linf" : "l2"; }

struct AttackConfig {
  Norm norm = Norm::Linf;
  double eps = 2.0 / 255.0;
  std::size_t steps = 20;
  double step_size = 2.5 * (2.0 / 255.0) / 20.0;
  std::size_t restarts = 2;
  bool random_start = true;

  void validate() const {
    if (!std::isfinite(eps) || eps < 0.0) throw std::invalid_argument("attack eps must be finite and >= 0");
    if (eps > 0.0 && steps > 0 && !(step_size > 0.0)) throw std::invalid_argument("attack step size must be > 0 when steps > 0");
    if (restarts < 1) throw std::invalid_argument("attack needs at least one restart");
  }

  /// Multi-restart evaluation attack: 20 steps, 2 restarts, step 2.5 eps / K.
  static AttackConfig evaluation(double eps, Norm norm = Norm::Linf) {
    return {norm, eps, 20, 2.5 * eps / 20.0, 2, true};
  }
  /// Single-restart training attack with 5 steps.
  static AttackConfig training(double eps, Norm norm = Norm::Linf) { return {norm, eps, 5, 2.5 * eps / 5.0, 1, true}; }
};

namespace detail {

inline double l2_norm(std::span<const double> v) {
  double s = 0.0;
  for (double x : v) s += x * x;
  return std::sqrt(s);
}

}  // namespace detail

/// Projects `adv` onto {z : ||z - x||_p <= eps} intersected with [0, 1]^d.
/// For l2 the offset is scaled radially onto the ball and then clipped to the
/// box; clipping only shrinks offset coordinates so feasibility is kept.
inline void project(const ImageTensor& x, ImageTensor& adv, Norm norm, double eps) {
  if (norm == Norm::Linf) {
    for (std::size_t i = 0; i < adv.data.size(); ++i) {
      const double lo = std::max(0.0, x.data[i] - eps), hi = std::min(1.0, x.data[i] + eps);
      adv.data[i] = std::clamp(adv.data[i], lo, hi);
    }
    return;
  }
  std::vector<double> delta(adv.data.size());
  for (std::size_t i = 0; i < delta.size(); ++i) delta[i] = adv.data[i] - x.data[i];
  const double n = detail::l2_norm(delta);
  const double s = n > eps ? eps / n : 1.0;
  for (std::size_t i = 0; i < delta.size(); ++i) adv.data[i] = std::clamp(x.data[i] + delta[i] * s, 0.0, 1.0);
}

inline double perturbation_norm(const ImageTensor& a, const ImageTensor& b, Norm norm) {
  double acc = 0.0;
  for (std::size_t i = 0; i < a.data.size(); ++i) {
    const double d = std::abs(a.data[i] - b.data[i]);
    acc = norm == Norm::Linf ? std::max(acc, d) : acc + d * d;
  }
  return norm == Norm::Linf ? acc : std::sqrt(acc);
}

struct AttackResult {
  ImageTensor adversarial;
  double loss = 0.0;
  double clean_loss = 0.0;
};

/// Projected gradient ascent on an arbitrary loss. Returns the highest-loss
/// point seen across all restarts and iterates; the clean input is always a
/// candidate, so the returned loss is never below the clean loss.
inline AttackResult pgd_loss(const Network& net, const ImageTensor& x, const LossSpec& spec, const AttackConfig& cfg,
                             Rng& rng) {
  cfg.validate();
  AttackResult best;
  best.adversarial = x;
  best.clean_loss = loss(forward(net, x), spec);
  best.loss = best.clean_loss;
  if (cfg.eps == 0.0 || (cfg.steps == 0 && !cfg.random_start)) return best;

  for (std::size_t r = 0; r < cfg.restarts; ++r) {
    ImageTensor adv = x;
    if (cfg.random_start) {
      if (cfg.norm == Norm::Linf) {
        std::uniform_real_distribution<double> u(-cfg.eps, cfg.eps);
        for (double& v : adv.data) v += u(rng);
      } else {
        std::normal_distribution<double> g(0.0, 1.0);
        std::uniform_real_distribution<double> u(0.0, 1.0);
        std::vector<double> dir(adv.data.size());
        for (double& v : dir) v = g(rng);
        const double n = detail::l2_norm(dir);
        const double radius = cfg.eps * u(rng);
        for (std::size_t i = 0; i < dir.size(); ++i) adv.data[i] += n > 0.0 ? dir[i] / n * radius : 0.0;
      }
      project(x, adv, cfg.norm, cfg.eps);
    }
    for (std::size_t k = 0; k <= cfg.steps; ++k) {
      const auto step = loss_and_grad_input(net, adv, spec);
      if (step.loss > best.loss) {
        best.loss = step.loss;
        best.adversarial = adv;
      }
      if (k == cfg.steps) break;
      if (cfg.norm == Norm::Linf) {
        for (std::size_t i = 0; i < adv.data.size(); ++i) {
          const double g = step.grad.data[i];
          adv.data[i] += cfg.step_size * static_cast<double>((g > 0.0) - (g < 0.0));
        }
      } else {
        const double n = detail::l2_norm(step.grad.data);
        if (n == 0.0) break;
        for (std::size_t i = 0; i < adv.data.size(); ++i) adv.data[i] += cfg.step_size * step.grad.data[i] / n;
      }
      project(x, adv, cfg.norm, cfg.eps);
    }
  }
  return best;
}

/// Untargeted cross-entropy PGD.
inline ImageTensor pgd(const Network& net, const ImageTensor& x, std::size_t label, const AttackConfig& cfg, Rng& rng) {
  if (label >= net.classes()) {
    throw std::invalid_argument("label " + std::to_string(label) + " out of range for " + std::to_string(net.classes()) + " classes");
  }
  return pgd_loss(net, x, LossSpec::cross_entropy(label), cfg, rng).adversarial;
}

inline double clean_accuracy(const Network& net, std::span<const LabeledSample> data, std::size_t threads = 1) {
  if (data.empty()) throw std::invalid_argument("accuracy of an empty dataset");
  std::vector<unsigned char> ok(data.size(), 0);
  parallel_for(data.size(), threads, [&](std::size_t i) { ok[i] = predict(net, data[i].image) == data[i].label; });
  std::size_t n = 0;
  for (auto v : ok) n += v;
  return static_cast<double>(n) / static_cast<double>(data.size());
}

/// Fraction of samples classified correctly both clean and after PGD (the
/// clean input is part of the attack's candidate set). Sample i uses the
/// random stream (seed, attack, i) regardless of the worker count.
inline double robust_accuracy(const Network& net, std::span<const LabeledSample> data, const AttackConfig& cfg,
                              std::uint64_t seed = 0, std::size_t threads = 1) {
  if (data.empty()) throw std::invalid_argument("robust accuracy of an empty dataset");
  cfg.validate();
  std::vector<unsigned char> ok(data.size(), 0);
  parallel_for(data.size(), threads, [&](std::size_t i) {
    if (predict(net, data[i].image) != data[i].label) return;
    Rng rng = substream(seed, {tag::attack, i});
    const ImageTensor adv = pgd(net, data[i].image, data[i].label, cfg, rng);
    ok[i] = predict(net, adv) == data[i].label;
  });
  std::size_t n = 0;
  for (auto v : ok) n += v;
  return static_cast<double>(n) / static_cast<double>(data.size());
}

}  // namespace cshift
