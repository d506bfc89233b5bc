#include <catch_amalgamated.hpp>

#include <random>

#include "cshift/metrics.hpp"

using namespace cshift;
using Catch::Approx;

namespace {

LabeledOutcome cert(std::size_t pred, std::size_t label, double r) { return {{true, pred, 0.9, r}, label}; }
LabeledOutcome abst(std::size_t label) { return {CertOutcome::abstain(0.4), label}; }

DomainStats gaussian(const Eigen::VectorXd& mean, const Eigen::MatrixXd& cov) {
  DomainStats s;
  s.mean = mean;
  s.cov = cov;
  s.count = 100;
  return s;
}

Eigen::MatrixXd random_spd(int d, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> g(0.0, 1.0);
  Eigen::MatrixXd a(d, d);
  for (int i = 0; i < d; ++i)
    for (int j = 0; j < d; ++j) a(i, j) = g(rng);
  Eigen::MatrixXd m = a * a.transpose() / d + 0.1 * Eigen::MatrixXd::Identity(d, d);
  return 0.5 * (m + m.transpose());
}

}  // namespace

TEST_CASE("certified accuracy curve on a fixture") {
  const std::vector<LabeledOutcome> outs{cert(0, 0, 0.5), cert(1, 1, 1.0), cert(2, 1, 2.0), abst(0)};
  const std::vector<double> grid{0.0, 0.5, 0.75, 1.0, 1.5};
  const auto c = certified_curve(outs, grid);
  CHECK(c.accuracy == std::vector<double>{0.5, 0.5, 0.25, 0.25, 0.0});
  CHECK(acr(outs) == Approx(0.75));
  CHECK(acr(std::vector<LabeledOutcome>{abst(0)}) == 0.0);
  CHECK_THROWS(certified_curve(std::vector<LabeledOutcome>{}, grid));
  CHECK_THROWS(certified_curve(outs, std::vector<double>{1.0, 0.5}));
}

TEST_CASE("curves are non-increasing and the envelope dominates") {
  std::mt19937_64 rng(8);
  std::uniform_real_distribution<double> u(0.0, 2.0);
  std::vector<CertCurve> curves;
  const auto grid = default_grid(2.0);
  CHECK(grid.size() == 200);
  CHECK(grid.front() == 0.0);
  CHECK(grid.back() == 4.0);
  for (int k = 0; k < 5; ++k) {
    std::vector<LabeledOutcome> outs;
    for (int i = 0; i < 50; ++i) {
      const std::size_t label = static_cast<std::size_t>(i % 3);
      const int kind = static_cast<int>(u(rng) * 1.5);
      outs.push_back(kind == 0 ? abst(label) : cert(kind == 1 ? label : (label + 1) % 3, label, u(rng)));
    }
    curves.push_back(certified_curve(outs, grid));
    CHECK(non_increasing(curves.back()));
  }
  const auto env = envelope(curves);
  CHECK(non_increasing(env));
  for (const auto& c : curves)
    for (std::size_t i = 0; i < grid.size(); ++i) CHECK(env.accuracy[i] >= c.accuracy[i]);
  auto shifted = curves[0];
  shifted.radii[3] += 1e-3;
  curves.push_back(shifted);
  CHECK_THROWS(envelope(curves));
}

TEST_CASE("ACR is the area under the curve when every certificate is correct") {
  std::mt19937_64 rng(2);
  std::uniform_real_distribution<double> u(0.01, 1.5);
  std::vector<LabeledOutcome> outs;
  for (int i = 0; i < 40; ++i) outs.push_back(cert(1, 1, u(rng)));
  const std::size_t points = 20001;
  const auto grid = default_grid(max_radius(outs), points);
  const auto c = certified_curve(outs, grid);
  double area = 0.0;
  for (std::size_t i = 0; i + 1 < points; ++i) area += c.accuracy[i + 1] * (grid[i + 1] - grid[i]);
  const double step = grid[1] - grid[0];
  CHECK(std::abs(area - acr(outs)) <= step + 1e-12);
}

TEST_CASE("Frechet distance properties") {
  for (std::uint64_t seed = 1; seed <= 5; ++seed) {
    const int d = 6;
    Eigen::VectorXd mu = Eigen::VectorXd::LinSpaced(d, -1.0, 1.0) * static_cast<double>(seed);
    const auto a = gaussian(mu, random_spd(d, seed));
    const auto b = gaussian(-mu, random_spd(d, seed + 50));
    CHECK(fid(a, a) < 1e-8);
    CHECK(std::abs(fid(a, b) - fid(b, a)) < 1e-8);
    CHECK(fid(a, b) >= 0.0);
    // Same covariance, shifted mean: only the mean term survives.
    const auto shifted = gaussian(mu + Eigen::VectorXd::Constant(d, 0.5), a.cov);
    CHECK(std::abs(fid(a, shifted) - 0.25 * d) < 1e-8);
  }
}

TEST_CASE("Frechet distance in closed form for 2x2 covariances") {
  Eigen::MatrixXd sa(2, 2), sb(2, 2);
  sa << 2.0, 0.3, 0.3, 1.0;
  sb << 1.5, -0.4, -0.4, 0.8;
  Eigen::VectorXd ma(2), mb(2);
  ma << 0.1, 0.2;
  mb << -0.3, 0.5;
  // For 2x2 M with non-negative eigenvalues, Tr sqrt(M) = sqrt(tr M + 2 sqrt(det M)).
  const Eigen::MatrixXd m = sa * sb;
  const double tr_sqrt = std::sqrt(m.trace() + 2.0 * std::sqrt(m.determinant()));
  const double want = (ma - mb).squaredNorm() + sa.trace() + sb.trace() - 2.0 * tr_sqrt;
  CHECK(fid(gaussian(ma, sa), gaussian(mb, sb)) == Approx(want).margin(1e-12));

  // One dimension: (mu_a - mu_b)^2 + (s_a - s_b)^2.
  Eigen::MatrixXd va(1, 1), vb(1, 1);
  va << 4.0;
  vb << 0.25;
  Eigen::VectorXd m1(1), m2(1);
  m1 << 1.0;
  m2 << -1.0;
  CHECK(fid(gaussian(m1, va), gaussian(m2, vb)) == Approx(4.0 + 1.5 * 1.5).margin(1e-12));
}

TEST_CASE("Frechet distance input checks") {
  Eigen::MatrixXd asym(2, 2), neg(2, 2);
  asym << 1.0, 0.5, 0.0, 1.0;
  neg << 1.0, 0.0, 0.0, -1.0;
  const Eigen::VectorXd z = Eigen::VectorXd::Zero(2);
  CHECK_THROWS_WITH(fid(gaussian(z, asym), gaussian(z, Eigen::MatrixXd::Identity(2, 2))), Catch::Matchers::ContainsSubstring("symmetric"));
  CHECK_THROWS_WITH(fid(gaussian(z, neg), gaussian(z, Eigen::MatrixXd::Identity(2, 2))), Catch::Matchers::ContainsSubstring("semidefinite"));
  CHECK_THROWS(fid(gaussian(z, Eigen::MatrixXd::Identity(2, 2)), gaussian(Eigen::VectorXd::Zero(3), Eigen::MatrixXd::Identity(3, 3))));
}

TEST_CASE("feature statistics use the unbiased covariance") {
  const std::vector<std::vector<double>> feats{{1.0, 2.0}, {3.0, 2.0}, {2.0, 5.0}};
  const auto s = stats_from_features(feats);
  CHECK(s.mean(0) == Approx(2.0));
  CHECK(s.mean(1) == Approx(3.0));
  CHECK(s.cov(0, 0) == Approx(1.0));
  CHECK(s.cov(1, 1) == Approx(3.0));
  CHECK(s.cov(0, 1) == Approx(0.0).margin(1e-15));
  CHECK_FALSE(s.rank_deficient);
  CHECK(stats_from_features({{1.0, 2.0, 3.0}, {0.0, 1.0, 0.0}}).rank_deficient);
  CHECK_THROWS(stats_from_features({{1.0}}));
}

TEST_CASE("accuracy table averages over seeds") {
  std::vector<RunMetrics> runs;
  for (std::uint64_t seed : {1u, 2u})
    for (const char* split : {"source", "target"}) {
      runs.push_back({"erm", seed, split, seed == 1 ? 0.8 : 0.6, 0.0});
      runs.push_back({"pgd", seed, split, 0.7, seed == 1 ? 0.5 : 0.3});
    }
  const auto rows = accuracy_table(runs, {"erm", "pgd"}, {"source", "target"}, {1, 2});
  REQUIRE(rows.size() == 8);
  CHECK(rows[0].method == "erm");
  CHECK(rows[0].metric == "clean");
  CHECK(rows[0].mean == Approx(0.7));
  CHECK(rows[0].std == Approx(0.1));
  CHECK(rows[7].metric == "robust");
  CHECK(rows[7].mean == Approx(0.4));
  CHECK_THROWS_WITH(accuracy_table(runs, {"erm", "trades"}, {"source"}, {1, 2}), Catch::Matchers::ContainsSubstring("trades/source/seed 1"));
}
