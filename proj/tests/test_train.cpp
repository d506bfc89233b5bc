#include <catch_amalgamated.hpp>

#include <limits>

#include "cshift/train.hpp"

using namespace cshift;
using Catch::Approx;

namespace {

DGBenchmark tiny_bench() {
  BenchmarkParams p;
  p.per_domain = 40;
  p.image_size = 16;
  return generate_benchmark(p);
}

TrainConfig tiny_config(Method m) {
  TrainConfig c;
  c.method = m;
  c.epochs = 3;
  c.batch_size = 16;
  c.learning_rate = 0.1;
  c.attack = AttackConfig::training(8.0 / 255.0);
  return c;
}

Network trained_like(const DGBenchmark& bench, std::uint64_t seed) {
  Network net = Network::from_descriptor(architecture("cnn", bench.image_shape(), bench.class_count()));
  net.initialize(seed);
  return net;
}

void check_same(const Objective& a, const Objective& b) {
  CHECK(a.loss == b.loss);
  for (std::size_t l = 0; l < a.grad.size(); ++l) {
    CHECK(a.grad[l].weight == b.grad[l].weight);
    CHECK(a.grad[l].bias == b.grad[l].bias);
  }
}

}  // namespace

TEST_CASE("objective identities at the extreme weights") {
  const auto bench = tiny_bench();
  const auto batch = bench.source_train();
  const std::span<const LabeledSample> first(batch.data(), 8);
  const Network net = trained_like(bench, 3);

  const auto erm = batch_objective(net, first, {}, tiny_config(Method::ERM), 1);
  auto pgd = tiny_config(Method::PGDAug);
  pgd.lambda = 1.0;
  check_same(batch_objective(net, first, {}, pgd, 1), erm);
  auto trades = tiny_config(Method::TRADES);
  trades.beta = 0.0;
  check_same(batch_objective(net, first, {}, trades, 1), erm);

  trades.beta = 3.0;
  CHECK(batch_objective(net, first, {}, trades, 1).loss >= erm.loss);
  pgd.lambda = 0.5;
  CHECK(batch_objective(net, first, {}, pgd, 1).loss >= erm.loss);
}

TEST_CASE("KL reference gradient matches finite differences") {
  const std::vector<double> ref{0.2, -1.0, 0.7}, z{1.1, 0.3, -0.4};
  const auto g = detail::kl_reference_gradient(ref, z);
  const double h = 1e-6;
  for (std::size_t i = 0; i < 3; ++i) {
    auto up = ref, dn = ref;
    up[i] += h;
    dn[i] -= h;
    const double fd = (loss(z, LossSpec::kl_divergence(up)) - loss(z, LossSpec::kl_divergence(dn))) / (2 * h);
    CHECK(g[i] == Approx(fd).margin(1e-8));
  }
}

TEST_CASE("batch objective does not depend on the worker count") {
  const auto bench = tiny_bench();
  const auto batch = bench.source_train();
  const std::span<const LabeledSample> first(batch.data(), 12);
  const Network net = trained_like(bench, 4);
  std::vector<std::size_t> ids(12);
  std::iota(ids.begin(), ids.end(), 100);
  for (auto m : {Method::PGDAug, Method::TRADES}) {
    auto cfg = tiny_config(m);
    cfg.augmentation = Augmentation{CertMode::deformation(DeformKind::Rotation), 0.2};
    check_same(batch_objective(net, first, ids, cfg, 2, 1), batch_objective(net, first, ids, cfg, 2, 4));
  }
}

TEST_CASE("training is deterministic and never reads the target domain") {
  const auto bench = tiny_bench();
  auto poisoned = bench;
  for (auto& s : poisoned.domains[poisoned.target_index].samples)
    for (double& v : s.image.data) v = std::numeric_limits<double>::quiet_NaN();

  for (auto m : {Method::ERM, Method::TRADES}) {
    const auto cfg = tiny_config(m);
    const auto a = train(bench, cfg);
    const auto b = train(bench, cfg);
    const auto c = train(poisoned, cfg);
    CHECK(a.network == b.network);
    CHECK(a.network == c.network);
    REQUIRE(a.log.epochs.size() == 4);
    REQUIRE(a.checkpoints.size() == 3);
    CHECK(a.checkpoints.back() == a.network);
    for (std::size_t e = 0; e < 4; ++e) CHECK(a.log.epochs[e].val_accuracy == c.log.epochs[e].val_accuracy);
  }
}

TEST_CASE("ERM lowers the training loss") {
  const auto bench = tiny_bench();
  auto cfg = tiny_config(Method::ERM);
  cfg.epochs = 6;
  cfg.learning_rate = 0.05;
  const auto res = train(bench, cfg);
  CHECK(res.log.epochs.back().train_loss <= res.log.epochs.front().train_loss);
}

TEST_CASE("model selection on source validation accuracy") {
  const auto bench = tiny_bench();
  std::vector<Network> ck;
  for (std::uint64_t s = 1; s <= 3; ++s) ck.push_back(trained_like(bench, s));

  TrainLog one{{{0, 1.0, 0.1}, {1, 0.9, 0.5}}};
  CHECK(select_model(one, std::span(ck.data(), 1)) == ck[0]);

  TrainLog three{{{0, 1.0, 0.95}, {1, 0.9, 0.7}, {2, 0.8, 0.9}, {3, 0.7, 0.8}}};
  CHECK(select_checkpoint(three) == 1);
  CHECK(select_model(three, ck) == ck[1]);

  TrainLog tie{{{1, 0.9, 0.9}, {2, 0.8, 0.9}}};
  CHECK(select_checkpoint(tie) == 0);

  CHECK_THROWS(select_checkpoint(TrainLog{}));
  CHECK_THROWS(select_model(three, std::span<const Network>{}));
}

TEST_CASE("configuration validation") {
  auto c = tiny_config(Method::PGDAug);
  c.lambda = 1.5;
  CHECK_THROWS(c.validate());
  c = tiny_config(Method::TRADES);
  c.beta = -1.0;
  CHECK_THROWS(c.validate());
  c = tiny_config(Method::ERM);
  c.epochs = 0;
  CHECK_THROWS(c.validate());
  CHECK(parse_method("baseline") == Method::ERM);
  CHECK(to_string(parse_method("trades")) == "trades");
  CHECK_THROWS(parse_method("irm"));
  CHECK(parse_augment_mode("noise").pixel);
  CHECK(parse_augment_mode("dct").kind == DeformKind::DCT);
}

TEST_CASE("invariance table") {
  const auto bench = tiny_bench();
  const Network without = trained_like(bench, 1);
  const std::map<std::string, Network> with{{"rotation", trained_like(bench, 2)}, {"noise", trained_like(bench, 3)}};
  const std::map<std::string, std::vector<double>> grid{{"rotation", {0.0, 0.3}}, {"noise", {0.0, 0.5}}};
  const auto rows = invariance_table(bench, {"rotation", "noise"}, grid, without, with, 7);
  REQUIRE(rows.size() == 4);
  const auto src = bench.source_val(), tgt = bench.target_samples();
  for (const auto& r : rows) {
    if (r.eps != 0.0) continue;
    CHECK(r.source_without == clean_accuracy(without, src));
    CHECK(r.target_without == clean_accuracy(without, tgt));
    CHECK(r.target_with == clean_accuracy(with.at(r.deformation), tgt));
  }
  CHECK_THROWS_WITH(invariance_table(bench, {"scaling"}, grid, without, with), Catch::Matchers::ContainsSubstring("scaling"));
}
