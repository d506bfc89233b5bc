#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <map>
#include <set>
#include <span>
#include <sstream>
#include <stdexcept>
#include <string>
#include <tuple>
#include <vector>

#include <Eigen/Dense>

#include "cshift/certify.hpp"
#include "cshift/datagen.hpp"
#include "cshift/diffnet.hpp"
#include "cshift/parallel.hpp"

namespace cshift {

struct LabeledOutcome {
  CertOutcome outcome;
  std::size_t label = 0;

  [[nodiscard]] bool certified_correct() const { return outcome.certified && outcome.predicted == label; }
};

struct CertCurve {
  std::vector<double> radii;     // ascending
  std::vector<double> accuracy;  // certified accuracy at each radius
  double sigma = 0.0;            // 0 for envelopes
  std::string kind;
  std::string split;
};

/// Certified accuracy: fraction of all samples that are certified, correct,
/// and have radius >= R. Abstentions count as failures everywhere.
inline CertCurve certified_curve(std::span<const LabeledOutcome> outcomes, std::span<const double> grid) {
  if (outcomes.empty()) throw std::invalid_argument("certified curve of no outcomes");
  if (!std::is_sorted(grid.begin(), grid.end())) throw std::invalid_argument("radius grid must be ascending");
  std::vector<double> radii;
  for (const auto& o : outcomes)
    if (o.certified_correct()) radii.push_back(o.outcome.radius);
  std::sort(radii.begin(), radii.end());
  CertCurve c;
  c.radii.assign(grid.begin(), grid.end());
  c.accuracy.reserve(grid.size());
  const double total = static_cast<double>(outcomes.size());
  for (double r : grid) {
    const auto first = std::lower_bound(radii.begin(), radii.end(), r);
    c.accuracy.push_back(static_cast<double>(radii.end() - first) / total);
  }
  return c;
}

/// Mean certified radius over samples that are certified with the correct
/// class; 0 when none qualify.
inline double acr(std::span<const LabeledOutcome> outcomes) {
  if (outcomes.empty()) throw std::invalid_argument("ACR of no outcomes");
  double sum = 0.0;
  std::size_t n = 0;
  for (const auto& o : outcomes)
    if (o.certified_correct()) {
      sum += o.outcome.radius;
      ++n;
    }
  return n ? sum / static_cast<double>(n) : 0.0;
}

inline bool non_increasing(const CertCurve& c) {
  for (std::size_t i = 1; i < c.accuracy.size(); ++i)
    if (c.accuracy[i] > c.accuracy[i - 1]) return false;
  return true;
}

/// `points` radii from 0 to 2 * max certified radius (0..1 when nothing certifies).
inline std::vector<double> default_grid(double max_radius, std::size_t points = 200) {
  if (points < 2) throw std::invalid_argument("grid needs at least two points");
  const double top = max_radius > 0.0 ? 2.0 * max_radius : 1.0;
  std::vector<double> g(points);
  for (std::size_t i = 0; i < points; ++i) g[i] = top * static_cast<double>(i) / static_cast<double>(points - 1);
  return g;
}

inline double max_radius(std::span<const LabeledOutcome> outcomes) {
  double m = 0.0;
  for (const auto& o : outcomes)
    if (o.outcome.certified) m = std::max(m, o.outcome.radius);
  return m;
}

/// Pointwise maximum of curves that share a grid.
inline CertCurve envelope(std::span<const CertCurve> curves) {
  if (curves.empty()) throw std::invalid_argument("envelope of no curves");
  CertCurve out = curves.front();
  out.sigma = 0.0;
  for (const auto& c : curves.subspan(1)) {
    if (c.radii != out.radii) throw std::invalid_argument("envelope curves must share the radius grid");
    for (std::size_t i = 0; i < out.accuracy.size(); ++i) out.accuracy[i] = std::max(out.accuracy[i], c.accuracy[i]);
  }
  return out;
}

// ---------------------------------------------------------------------------
// Frechet distance between Gaussian feature fits

struct DomainStats {
  Eigen::VectorXd mean;
  Eigen::MatrixXd cov;
  std::size_t count = 0;
  bool rank_deficient = false;  // fewer than dim + 1 samples
};

inline DomainStats stats_from_features(const std::vector<std::vector<double>>& feats) {
  if (feats.size() < 2) throw std::invalid_argument("feature statistics need at least two samples (covariance uses n - 1)");
  const auto dim = static_cast<Eigen::Index>(feats.front().size());
  const auto n = static_cast<Eigen::Index>(feats.size());
  Eigen::MatrixXd x(n, dim);
  for (Eigen::Index i = 0; i < n; ++i) {
    if (static_cast<Eigen::Index>(feats[static_cast<std::size_t>(i)].size()) != dim) throw std::invalid_argument("ragged feature vectors");
    for (Eigen::Index j = 0; j < dim; ++j) x(i, j) = feats[static_cast<std::size_t>(i)][static_cast<std::size_t>(j)];
  }
  DomainStats s;
  s.count = feats.size();
  s.mean = x.colwise().mean().transpose();
  const Eigen::MatrixXd centered = x.rowwise() - s.mean.transpose();
  s.cov = (centered.transpose() * centered) / static_cast<double>(n - 1);
  s.cov = 0.5 * (s.cov + s.cov.transpose());
  s.rank_deficient = feats.size() < static_cast<std::size_t>(dim) + 1;
  return s;
}

/// Penultimate-layer statistics of a network over a dataset.
inline DomainStats extract_features(const Network& net, std::span<const LabeledSample> data, std::size_t threads = 1) {
  std::vector<std::vector<double>> feats(data.size());
  parallel_for(data.size(), threads, [&](std::size_t i) { feats[i] = penultimate(net, data[i].image); });
  return stats_from_features(feats);
}

namespace detail {

inline Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> psd_eigen(const Eigen::MatrixXd& m, const char* what) {
  if (m.rows() != m.cols()) throw std::invalid_argument(std::string(what) + " is not square");
  if (m.size() > 0 && (m - m.transpose()).cwiseAbs().maxCoeff() > 1e-10) {
    throw std::invalid_argument(std::string(what) + " is not symmetric");
  }
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(0.5 * (m + m.transpose()));
  if (es.info() != Eigen::Success) throw std::runtime_error(std::string("eigendecomposition failed for ") + what);
  const double scale = std::max(1.0, es.eigenvalues().cwiseAbs().maxCoeff());
  if (es.eigenvalues().minCoeff() < -1e-10 * scale) throw std::invalid_argument(std::string(what) + " is not positive semidefinite");
  return es;
}

}  // namespace detail

/// ||mu_a - mu_b||^2 + Tr(S_a + S_b - 2 (S_a S_b)^{1/2}). The trace of the
/// square root is taken from the eigenvalues of the symmetric product
/// S_a^{1/2} S_b S_a^{1/2}, which shares its spectrum with S_a S_b.
inline double fid(const DomainStats& a, const DomainStats& b) {
  if (a.mean.size() != b.mean.size() || a.cov.rows() != b.cov.rows() || a.cov.rows() != a.mean.size() ||
      b.cov.cols() != b.mean.size()) {
    throw std::invalid_argument("feature dimensions differ: " + std::to_string(a.mean.size()) + " vs " +
                                std::to_string(b.mean.size()));
  }
  const auto ea = detail::psd_eigen(a.cov, "covariance A");
  detail::psd_eigen(b.cov, "covariance B");
  const Eigen::VectorXd root = ea.eigenvalues().cwiseMax(0.0).cwiseSqrt();
  const Eigen::MatrixXd sqrt_a = ea.eigenvectors() * root.asDiagonal() * ea.eigenvectors().transpose();
  const Eigen::MatrixXd m = sqrt_a * b.cov * sqrt_a;
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> em(0.5 * (m + m.transpose()), Eigen::EigenvaluesOnly);
  const double tr_sqrt = em.eigenvalues().cwiseMax(0.0).cwiseSqrt().sum();
  const double d = (a.mean - b.mean).squaredNorm() + a.cov.trace() + b.cov.trace() - 2.0 * tr_sqrt;
  return std::max(0.0, d);
}

// ---------------------------------------------------------------------------
// Clean / robust accuracy table

struct RunMetrics {
  std::string method;
  std::uint64_t seed = 0;
  std::string split;
  double clean = 0.0;
  double robust = 0.0;
};

struct TableRow {
  std::string method;
  std::string split;
  std::string metric;  // "clean" or "robust"
  double mean = 0.0;
  double std = 0.0;  // population standard deviation over seeds
};

/// Mean and standard deviation over seeds for every (method, split, metric).
/// Every (method, split, seed) combination must be present.
inline std::vector<TableRow> accuracy_table(std::span<const RunMetrics> runs, const std::vector<std::string>& methods,
                                            const std::vector<std::string>& splits,
                                            const std::vector<std::uint64_t>& seeds) {
  std::map<std::tuple<std::string, std::string, std::uint64_t>, const RunMetrics*> index;
  for (const auto& r : runs) index[{r.method, r.split, r.seed}] = &r;
  std::vector<std::string> missing;
  for (const auto& m : methods)
    for (const auto& s : splits)
      for (auto seed : seeds)
        if (!index.count({m, s, seed})) missing.push_back(m + "/" + s + "/seed " + std::to_string(seed));
  if (!missing.empty()) {
    std::string msg = "missing runs:";
    for (const auto& m : missing) msg += " " + m;
    throw std::invalid_argument(msg);
  }
  std::vector<TableRow> rows;
  for (const auto& m : methods) {
    for (const auto& s : splits) {
      for (const char* metric : {"clean", "robust"}) {
        std::vector<double> v;
        for (auto seed : seeds) {
          const RunMetrics* r = index.at({m, s, seed});
          v.push_back(std::string(metric) == "clean" ? r->clean : r->robust);
        }
        double mean = 0.0;
        for (double x : v) mean += x;
        mean /= static_cast<double>(v.size());
        double var = 0.0;
        for (double x : v) var += (x - mean) * (x - mean);
        var /= static_cast<double>(v.size());
        rows.push_back({m, s, metric, mean, std::sqrt(var)});
      }
    }
  }
  return rows;
}

}  // namespace cshift
