#pragma once

// Randomized smoothing certification over pixel noise and over the
// parameters of a deformation.
//
// Both use the same two-phase Monte Carlo procedure: n0 draws pick the
// candidate class, n fresh draws count its votes, and a one-sided
// Clopper-Pearson bound turns the count into pA_lower. With
// pB = 1 - pA_lower the Gaussian radius sigma/2 (Phi^-1(pA) - Phi^-1(pB))
// reduces to sigma * Phi^-1(pA_lower), and the uniform radius
// sigma (pA - pB) to sigma (2 pA_lower - 1).

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <numbers>
#include <random>
#include <stdexcept>
#include <string>
#include <vector>

#include "cshift/deform.hpp"
#include "cshift/diffnet.hpp"
#include "cshift/parallel.hpp"
#include "cshift/rng.hpp"

namespace cshift {

// ---------------------------------------------------------------------------
// Normal quantile

inline double normal_cdf(double x) { return 0.5 * std::erfc(-x / std::numbers::sqrt2); }

namespace detail {

// Acklam's rational approximation for the lower region p <= 0.5
// (relative error ~1e-9), polished by Halley steps below.
inline double acklam_lower(double p) {
  static constexpr double a[] = {-3.969683028665376e+01, 2.209460984245205e+02, -2.759285104469687e+02,
                                 1.383577518672690e+02, -3.066479806614716e+01, 2.506628277459239e+00};
  static constexpr double b[] = {-5.447609879822406e+01, 1.615858368580409e+02, -1.556989798598866e+02,
                                 6.680131188771972e+01, -1.328068155288572e+01};
  static constexpr double c[] = {-7.784894002430293e-03, -3.223964580411365e-01, -2.400758277161838e+00,
                                 -2.549732539343734e+00, 4.374664141464968e+00, 2.938163982698783e+00};
  static constexpr double d[] = {7.784695709041462e-03, 3.224671290700398e-01, 2.445134137142996e+00,
                                 3.754408661907416e+00};
  constexpr double p_low = 0.02425;
  if (p < p_low) {
    const double q = std::sqrt(-2.0 * std::log(p));
    return (((((c[0] * q + c[1]) * q + c[2]) * q + c[3]) * q + c[4]) * q + c[5]) /
           ((((d[0] * q + d[1]) * q + d[2]) * q + d[3]) * q + 1.0);
  }
  const double q = p - 0.5;
  const double r = q * q;
  return (((((a[0] * r + a[1]) * r + a[2]) * r + a[3]) * r + a[4]) * r + a[5]) * q /
         (((((b[0] * r + b[1]) * r + b[2]) * r + b[3]) * r + b[4]) * r + 1.0);
}

}  // namespace detail

/// Standard normal quantile Phi^-1(p) for p in (0, 1).
inline double inv_norm_cdf(double p) {
  if (!(p > 0.0 && p < 1.0)) throw std::domain_error("inv_norm_cdf needs p in (0, 1), got " + std::to_string(p));
  if (p == 0.5) return 0.0;
  // Work in the lower tail where erfc keeps full relative precision.
  const bool upper = p > 0.5;
  const double q = upper ? 1.0 - p : p;
  double x = detail::acklam_lower(q);
  for (int it = 0; it < 3; ++it) {
    const double e = normal_cdf(x) - q;
    const double u = e * std::sqrt(2.0 * std::numbers::pi) * std::exp(0.5 * x * x);
    x -= u / (1.0 + 0.5 * x * u);
  }
  return upper ? -x : x;
}

// ---------------------------------------------------------------------------
// Clopper-Pearson lower bound

namespace detail {

// log P[Bin(n, p) >= k] for 0 < p < 1, summed outward from the dominant term.
inline double log_binom_upper_tail(std::uint64_t k, std::uint64_t n, double p) {
  if (k == 0) return 0.0;
  const double lp = std::log(p), lq = std::log1p(-p);
  const double dn = static_cast<double>(n);
  auto log_term = [&](std::uint64_t j) {
    const double dj = static_cast<double>(j);
    return std::lgamma(dn + 1.0) - std::lgamma(dj + 1.0) - std::lgamma(dn - dj + 1.0) + dj * lp + (dn - dj) * lq;
  };
  const auto mode = static_cast<std::uint64_t>(std::floor((dn + 1.0) * p));
  const std::uint64_t j0 = std::max(k, std::min(n, mode));
  const double t0 = log_term(j0);
  constexpr double cutoff = -50.0;  // terms below e^-50 of the peak are dropped
  double sum = 1.0;
  double lt = t0;
  for (std::uint64_t j = j0; j < n; ++j) {
    lt += std::log(static_cast<double>(n - j)) - std::log(static_cast<double>(j + 1)) + lp - lq;
    if (lt - t0 < cutoff) break;
    sum += std::exp(lt - t0);
  }
  lt = t0;
  for (std::uint64_t j = j0; j > k; --j) {
    lt += std::log(static_cast<double>(j)) - std::log(static_cast<double>(n - j + 1)) - lp + lq;
    if (lt - t0 < cutoff) break;
    sum += std::exp(lt - t0);
  }
  return t0 + std::log(sum);
}

}  // namespace detail

/// One-sided (1 - alpha) Clopper-Pearson lower bound on a binomial
/// proportion: the largest p with P[Bin(n, p) >= k] <= alpha, by bisection.
inline double binom_lower_bound(std::uint64_t k, std::uint64_t n, double alpha) {
  if (n == 0 || k > n) throw std::invalid_argument("binom_lower_bound needs 0 <= k <= n and n > 0");
  if (!(alpha > 0.0 && alpha < 1.0)) throw std::invalid_argument("alpha must lie in (0, 1)");
  if (k == 0) return 0.0;
  const double log_alpha = std::log(alpha);
  double lo = 0.0, hi = 1.0;
  while (hi - lo > 1e-13) {
    const double mid = 0.5 * (lo + hi);
    if (mid <= lo || mid >= hi) break;
    if (detail::log_binom_upper_tail(k, n, mid) <= log_alpha)
      lo = mid;
    else
      hi = mid;
  }
  return lo;
}

// ---------------------------------------------------------------------------
// Smoothing

enum class Distribution { Gaussian, Uniform };

inline std::string to_string(Distribution d) { return d == Distribution::Gaussian ? "gaussian" : "uniform"; }

inline Distribution parse_distribution(const std::string& s) {
  if (s == "gaussian" || s == "normal") return Distribution::Gaussian;
  if (s == "uniform") return Distribution::Uniform;
  throw std::invalid_argument("unknown smoothing distribution '" + s + "'");
}

/// What the smoothing noise perturbs: pixels, or the parameters of one
/// deformation family.
struct CertMode {
  bool pixel = true;
  DeformKind kind = DeformKind::Rotation;
  std::size_t dct_order = kDefaultDctOrder;

  static CertMode pixels() { return {}; }
  static CertMode deformation(DeformKind k, std::size_t dct_order = kDefaultDctOrder) { return {false, k, dct_order}; }

  [[nodiscard]] std::string name() const { return pixel ? "pixel" : to_string(kind); }
  [[nodiscard]] std::size_t dimension() const { return pixel ? 0 : parameter_count(kind, dct_order); }
};

inline CertMode parse_cert_mode(const std::string& s) {
  if (s == "pixel") return CertMode::pixels();
  return CertMode::deformation(parse_deform_kind(s));
}

inline const std::vector<std::string>& cert_mode_names() {
  static const std::vector<std::string> names{"pixel", "rotation", "translation", "scaling", "affine", "dct"};
  return names;
}

struct SmoothingConfig {
  Distribution distribution = Distribution::Gaussian;
  double sigma = 0.25;
  std::size_t n0 = 100;
  std::size_t n = 10000;
  double alpha = 0.001;
  std::vector<double> base_phi;  // deformation centre; empty means zero

  void validate() const {
    if (!(sigma > 0.0) || !std::isfinite(sigma)) throw std::invalid_argument("sigma must be > 0");
    if (n0 < 10) throw std::invalid_argument("n0 must be >= 10");
    if (n < n0) throw std::invalid_argument("n must be >= n0");
    if (!(alpha > 0.0 && alpha < 1.0)) throw std::invalid_argument("alpha must lie in (0, 1)");
  }
};

struct CertOutcome {
  bool certified = false;
  std::size_t predicted = 0;  // meaningful only when certified
  double pa_lower = 0.0;
  double radius = 0.0;

  static CertOutcome abstain(double pa_lower = 0.0) { return {false, 0, pa_lower, 0.0}; }
};

inline double gaussian_radius(double sigma, double pa, double pb) {
  return sigma / 2.0 * (inv_norm_cdf(pa) - inv_norm_cdf(pb));
}
inline double gaussian_radius(double sigma, double pa_lower) { return sigma * inv_norm_cdf(pa_lower); }

inline double uniform_radius(double sigma, double pa, double pb) { return sigma * (pa - pb); }
inline double uniform_radius(double sigma, double pa_lower) { return sigma * (2.0 * pa_lower - 1.0); }

/// Applies the abstention rule: certify only when pA_lower > 1/2.
inline CertOutcome make_outcome(std::size_t cls, double pa_lower, double sigma, Distribution dist) {
  if (!(pa_lower > 0.5)) return CertOutcome::abstain(pa_lower);
  const double r = dist == Distribution::Gaussian ? gaussian_radius(sigma, pa_lower) : uniform_radius(sigma, pa_lower);
  return {true, cls, pa_lower, r};
}

namespace detail {

inline void check_mode(const CertMode& mode, const SmoothingConfig& cfg) {
  cfg.validate();
  if (mode.pixel) {
    if (cfg.distribution != Distribution::Gaussian) throw std::invalid_argument("pixel smoothing is Gaussian-only");
    return;
  }
  const std::size_t d = mode.dimension();
  if (cfg.distribution == Distribution::Uniform && d != 1) {
    throw std::invalid_argument("uniform smoothing is only supported for one-parameter deformations, " + mode.name() +
                                " has " + std::to_string(d));
  }
  if (!cfg.base_phi.empty() && cfg.base_phi.size() != d) {
    throw std::invalid_argument("base phi has " + std::to_string(cfg.base_phi.size()) + " entries, " + mode.name() +
                                " needs " + std::to_string(d));
  }
}

/// Draws one perturbed copy of x under the smoothing measure.
inline ImageTensor perturb(const ImageTensor& x, const CertMode& mode, const SmoothingConfig& cfg, Rng& rng) {
  if (mode.pixel) {
    std::normal_distribution<double> g(0.0, cfg.sigma);
    ImageTensor out = x;
    for (double& v : out.data) v += g(rng);  // not clamped
    return out;
  }
  DeformationSpec spec{mode.kind, std::vector<double>(mode.dimension(), 0.0), mode.dct_order};
  if (!cfg.base_phi.empty()) spec.params = cfg.base_phi;
  if (cfg.distribution == Distribution::Gaussian) {
    std::normal_distribution<double> g(0.0, cfg.sigma);
    for (double& p : spec.params) p += g(rng);
  } else {
    std::uniform_real_distribution<double> u(-cfg.sigma, cfg.sigma);
    for (double& p : spec.params) p += u(rng);
  }
  return apply_deformation(x, spec);
}

}  // namespace detail

/// Hard-vote counts over `n` smoothing draws. Draw i always uses the stream
/// (seed, phase, i), so counts do not depend on the worker count.
inline std::vector<std::size_t> smoothing_votes(const Network& net, const ImageTensor& x, const CertMode& mode,
                                                const SmoothingConfig& cfg, std::size_t n, std::uint64_t seed,
                                                std::uint64_t phase, std::size_t threads = 1) {
  std::vector<std::uint32_t> cls(n, 0);
  parallel_for(n, threads, [&](std::size_t i) {
    Rng rng = substream(seed, {phase, i});
    cls[i] = static_cast<std::uint32_t>(predict(net, detail::perturb(x, mode, cfg, rng)));
  });
  std::vector<std::size_t> counts(net.classes(), 0);
  for (auto c : cls) ++counts[c];
  return counts;
}

struct SmoothedPrediction {
  std::size_t predicted = 0;
  std::vector<std::size_t> votes;
};

/// Majority vote of the base classifier over n draws; ties go to the lower class.
inline SmoothedPrediction smoothed_predict(const Network& net, const ImageTensor& x, const CertMode& mode,
                                           const SmoothingConfig& cfg, std::size_t n, std::uint64_t seed = 0,
                                           std::size_t threads = 1) {
  if (n == 0) throw std::invalid_argument("smoothed_predict needs n > 0");
  if (!(cfg.sigma > 0.0)) throw std::invalid_argument("sigma must be > 0");
  SmoothedPrediction out;
  out.votes = smoothing_votes(net, x, mode, cfg, n, seed, tag::estimate, threads);
  out.predicted = argmax(std::vector<double>(out.votes.begin(), out.votes.end()));
  return out;
}

/// Two-phase certification for any smoothing mode.
inline CertOutcome certify(const Network& net, const ImageTensor& x, const CertMode& mode, const SmoothingConfig& cfg,
                           std::uint64_t seed = 0, std::size_t threads = 1) {
  detail::check_mode(mode, cfg);
  const auto select = smoothing_votes(net, x, mode, cfg, cfg.n0, seed, tag::select, threads);
  const std::size_t cls = static_cast<std::size_t>(std::max_element(select.begin(), select.end()) - select.begin());
  const auto counts = smoothing_votes(net, x, mode, cfg, cfg.n, seed, tag::estimate, threads);
  const double pa_lower = binom_lower_bound(counts[cls], cfg.n, cfg.alpha);
  return make_outcome(cls, pa_lower, cfg.sigma, cfg.distribution);
}

inline CertOutcome certify_pixel(const Network& net, const ImageTensor& x, const SmoothingConfig& cfg,
                                 std::uint64_t seed = 0, std::size_t threads = 1) {
  return certify(net, x, CertMode::pixels(), cfg, seed, threads);
}

inline CertOutcome certify_deform(const Network& net, const ImageTensor& x, DeformKind kind, const SmoothingConfig& cfg,
                                  std::uint64_t seed = 0, std::size_t threads = 1) {
  return certify(net, x, CertMode::deformation(kind), cfg, seed, threads);
}

}  // namespace cshift
