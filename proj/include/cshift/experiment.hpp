#pragma once

// End-to-end experiment: data, the three training methods over several seeds,
// PGD evaluation on source and target, augmented models for certification and
// the invariance ablation, certified-accuracy curves, Frechet distances and a
// summary of the directional findings.

#include <chrono>
#include <cstdio>
#include <filesystem>
#include <functional>
#include <iostream>
#include <map>
#include <string>
#include <vector>

#include "json.hpp"

#include "cshift/attack.hpp"
#include "cshift/certify.hpp"
#include "cshift/checkpoint.hpp"
#include "cshift/datagen.hpp"
#include "cshift/metrics.hpp"
#include "cshift/rational.hpp"
#include "cshift/report.hpp"
#include "cshift/train.hpp"

namespace cshift {

/// Smoothing scales certified for one mode.
struct CertSetting {
  std::string mode;  // pixel or a deformation kind
  Distribution distribution = Distribution::Gaussian;
  std::vector<double> sigmas;
};

struct ExperimentConfig {
  std::uint64_t master_seed = 1;
  std::size_t seeds = 4;
  BenchmarkParams benchmark;
  std::string architecture = "cnn";

  std::size_t epochs = 30;
  std::size_t batch_size = 32;
  double learning_rate = 0.05;
  double lambda = 0.5;
  double beta = 3.0;
  Norm norm = Norm::Linf;
  Rational train_eps{2, 255};
  std::size_t train_steps = 5;

  Rational attack_eps{2, 255};
  std::size_t attack_steps = 20;
  std::size_t attack_restarts = 2;

  std::size_t n0 = 100;
  std::size_t n = 10000;
  double alpha = 0.001;
  std::size_t cert_samples = 100;  // per split
  std::vector<CertSetting> certify;

  std::map<std::string, double> augment_sigma;  // per augmentation name (noise or a kind)
  std::vector<std::string> invariance_kinds;
  std::map<std::string, std::vector<double>> invariance_eps;

  std::vector<std::string> fid_targets;

  /// Training seeds: master_seed, master_seed + 1, ...
  [[nodiscard]] std::vector<std::uint64_t> seed_list() const {
    std::vector<std::uint64_t> s(seeds);
    for (std::size_t i = 0; i < seeds; ++i) s[i] = master_seed + i;
    return s;
  }

  [[nodiscard]] TrainConfig train_config(Method m, std::uint64_t seed) const {
    TrainConfig c;
    c.method = m;
    c.lambda = lambda;
    c.beta = beta;
    c.attack = AttackConfig::training(train_eps.value(), norm);
    c.attack.steps = train_steps;
    c.attack.step_size = train_steps ? 2.5 * train_eps.value() / static_cast<double>(train_steps) : 0.0;
    c.epochs = epochs;
    c.batch_size = batch_size;
    c.learning_rate = learning_rate;
    c.seed = seed;
    c.architecture = architecture;
    return c;
  }

  [[nodiscard]] AttackConfig attack_config() const {
    AttackConfig a = AttackConfig::evaluation(attack_eps.value(), norm);
    a.steps = attack_steps;
    a.restarts = attack_restarts;
    a.step_size = attack_steps ? 2.5 * attack_eps.value() / static_cast<double>(attack_steps) : 0.0;
    return a;
  }

  [[nodiscard]] SmoothingConfig smoothing(const CertSetting& s, double sigma) const {
    SmoothingConfig c;
    c.distribution = s.distribution;
    c.sigma = sigma;
    c.n0 = n0;
    c.n = n;
    c.alpha = alpha;
    return c;
  }

  /// Augmentation names that need a fixed sigma from augment_sigma: the
  /// invariance kinds.
  [[nodiscard]] std::vector<std::string> augmentations() const { return invariance_kinds; }

  /// Augmented models the run trains, as (augmentation name, sigma). Each
  /// certified sigma gets its own model trained at that sigma.
  [[nodiscard]] std::vector<std::pair<std::string, double>> augmented_models() const {
    std::vector<std::pair<std::string, double>> out;
    auto add = [&](const std::string& name, double sigma) {
      const auto key = std::make_pair(name, sigma);
      if (std::find(out.begin(), out.end(), key) == out.end()) out.push_back(key);
    };
    for (const auto& k : invariance_kinds) add(k, augment_sigma.at(k));
    for (const auto& c : certify)
      for (double s : c.sigmas) add(augment_name(c.mode), s);
    return out;
  }

  static std::string augment_name(const std::string& cert_mode) { return cert_mode == "pixel" ? "noise" : cert_mode; }

  void validate() const {
    if (seeds < 1) throw std::invalid_argument("config: seeds must be >= 1");
    train_config(Method::TRADES, master_seed).validate();
    attack_config().validate();
    if (certify.empty()) throw std::invalid_argument("config: certify needs at least one mode");
    for (const auto& c : certify) {
      if (c.sigmas.empty()) throw std::invalid_argument("config: sigma grid for '" + c.mode + "' is empty");
      parse_cert_mode(c.mode);
      for (double s : c.sigmas) smoothing(c, s).validate();
    }
    if (cert_samples < 1) throw std::invalid_argument("config: certify.samples must be >= 1");
    for (const auto& c : certify) parse_augment_mode(augment_name(c.mode));
    for (const auto& a : augmentations()) {
      parse_augment_mode(a);
      if (!augment_sigma.count(a)) throw std::invalid_argument("config: augment_sigma has no entry for '" + a + "'");
    }
    for (const auto& k : invariance_kinds)
      if (!invariance_eps.count(k) || invariance_eps.at(k).empty()) throw std::invalid_argument("config: invariance eps grid missing for '" + k + "'");
    for (const auto& t : fid_targets)
      if (std::find(domain_names().begin(), domain_names().end(), t) == domain_names().end())
        throw std::invalid_argument("config: unknown fid target '" + t + "'");
  }
};

namespace detail {

template <typename T>
T field_or(const nlohmann::json& j, const char* key, T fallback) {
  if (!j.contains(key)) return fallback;
  try {
    return j.at(key).get<T>();
  } catch (const nlohmann::json::exception&) {
    throw std::invalid_argument(std::string("config: field '") + key + "' has the wrong type");
  }
}

inline Rational rational_field(const nlohmann::json& j, const char* key, Rational fallback) {
  if (!j.contains(key)) return fallback;
  const auto& v = j.at(key);
  if (v.is_string()) return parse_rational(v.get<std::string>());
  if (v.is_number_integer()) return {v.get<std::int64_t>(), 1};
  if (v.is_number()) return parse_rational(std::to_string(v.get<double>()));
  throw std::invalid_argument(std::string("config: field '") + key + "' must be a number or a fraction string");
}

}  // namespace detail

inline ExperimentConfig parse_experiment_config(const nlohmann::json& j) {
  using detail::field_or;
  if (field_or<int>(j, "version", 0) != 1) throw std::invalid_argument("config: unsupported or missing version (expected 1)");
  ExperimentConfig c;
  c.master_seed = field_or<std::uint64_t>(j, "master_seed", c.master_seed);
  c.seeds = field_or<std::size_t>(j, "seeds", c.seeds);
  c.architecture = field_or<std::string>(j, "architecture", c.architecture);

  const auto b = field_or<nlohmann::json>(j, "benchmark", nlohmann::json::object());
  c.benchmark.seed = field_or<std::uint64_t>(b, "seed", c.benchmark.seed);
  c.benchmark.per_domain = field_or<std::size_t>(b, "per_domain", c.benchmark.per_domain);
  c.benchmark.image_size = field_or<std::size_t>(b, "image_size", c.benchmark.image_size);
  c.benchmark.classes = field_or<std::size_t>(b, "classes", c.benchmark.classes);
  c.benchmark.target = field_or<std::string>(b, "target", c.benchmark.target);
  c.benchmark.val_fraction = field_or<double>(b, "val_fraction", c.benchmark.val_fraction);
  c.benchmark.cue_amplitude = detail::rational_field(b, "cue_amplitude", {0, 1}).value();

  const auto t = field_or<nlohmann::json>(j, "train", nlohmann::json::object());
  c.epochs = field_or<std::size_t>(t, "epochs", c.epochs);
  c.batch_size = field_or<std::size_t>(t, "batch_size", c.batch_size);
  c.learning_rate = field_or<double>(t, "learning_rate", c.learning_rate);
  c.lambda = field_or<double>(t, "lambda", c.lambda);
  c.beta = field_or<double>(t, "beta", c.beta);
  c.train_eps = detail::rational_field(t, "eps", c.train_eps);
  c.train_steps = field_or<std::size_t>(t, "steps", c.train_steps);
  c.norm = parse_norm(field_or<std::string>(t, "norm", "linf"));

  const auto a = field_or<nlohmann::json>(j, "attack", nlohmann::json::object());
  c.attack_eps = detail::rational_field(a, "eps", c.train_eps);
  c.attack_steps = field_or<std::size_t>(a, "steps", c.attack_steps);
  c.attack_restarts = field_or<std::size_t>(a, "restarts", c.attack_restarts);

  const auto cc = field_or<nlohmann::json>(j, "certify", nlohmann::json::object());
  c.n0 = field_or<std::size_t>(cc, "n0", c.n0);
  c.n = field_or<std::size_t>(cc, "n", c.n);
  c.alpha = field_or<double>(cc, "alpha", c.alpha);
  c.cert_samples = field_or<std::size_t>(cc, "samples", c.cert_samples);
  const auto modes = field_or<nlohmann::json>(cc, "modes", nlohmann::json::array());
  for (const auto& m : modes) {
    CertSetting s;
    s.mode = field_or<std::string>(m, "mode", "");
    s.distribution = parse_distribution(field_or<std::string>(m, "distribution", "gaussian"));
    s.sigmas = field_or<std::vector<double>>(m, "sigmas", {});
    c.certify.push_back(s);
  }

  const auto inv = field_or<nlohmann::json>(j, "invariance", nlohmann::json::object());
  c.invariance_kinds = field_or<std::vector<std::string>>(inv, "kinds", {});
  c.invariance_eps = field_or<std::map<std::string, std::vector<double>>>(inv, "eps", {});
  c.augment_sigma = field_or<std::map<std::string, double>>(j, "augment_sigma", {});

  const auto f = field_or<nlohmann::json>(j, "fid", nlohmann::json::object());
  c.fid_targets = field_or<std::vector<std::string>>(f, "targets", {c.benchmark.target});
  c.validate();
  return c;
}

inline ExperimentConfig load_experiment_config(const std::filesystem::path& path) {
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(detail::read_file(path));
  } catch (const nlohmann::json::exception& e) {
    throw std::invalid_argument(path.string() + " is not valid JSON: " + e.what());
  }
  return parse_experiment_config(j);
}

// ---------------------------------------------------------------------------

struct ExperimentResult {
  std::vector<TableRow> table;
  std::vector<RunMetrics> runs;
  std::vector<InvarianceRow> invariance;
  std::vector<FidRow> fid;
  nlohmann::json summary;
};

/// Raised when a stage fails; the message starts with the stage name.
struct StageError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

namespace detail {

inline std::string sigma_tag(double s) { return fmt(s, 6); }

/// Evenly spaced, deterministic subset of at most `count` samples.
inline std::vector<std::pair<std::size_t, LabeledSample>> pick_samples(const std::vector<LabeledSample>& data,
                                                                       std::size_t count) {
  std::vector<std::pair<std::size_t, LabeledSample>> out;
  const std::size_t m = std::min(count, data.size());
  for (std::size_t k = 0; k < m; ++k) {
    const std::size_t i = k * data.size() / m;
    out.emplace_back(i, data[i]);
  }
  return out;
}

struct Stage {
  std::string name;
  std::ostream* log;
  std::chrono::steady_clock::time_point start = std::chrono::steady_clock::now();

  template <typename Fn>
  auto run(Fn&& fn) {
    if (log) *log << "[" << name << "] start\n" << std::flush;
    try {
      if constexpr (std::is_void_v<decltype(fn())>) {
        fn();
        finish();
      } else {
        auto r = fn();
        finish();
        return r;
      }
    } catch (const StageError&) {
      throw;
    } catch (const std::exception& e) {
      throw StageError("stage '" + name + "' failed: " + e.what());
    }
  }

  void finish() const {
    if (log) {
      const double s = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
      *log << "[" << name << "] done in " << fmt(s, 4) << " s\n" << std::flush;
    }
  }
};

/// Trains a model, writes its log and selected checkpoint, returns the selection.
inline Network train_and_select(const DGBenchmark& bench, const TrainConfig& cfg, const std::filesystem::path& dir,
                                const std::string& name) {
  const auto res = train(bench, cfg);
  const std::size_t idx = select_checkpoint(res.log);
  write_text(dir / "logs" / (name + ".csv"), train_log_csv(res.log));
  save_checkpoint(dir / "models" / (name + ".ckpt"), res.checkpoints[idx],
                  {{"name", name}, {"method", to_string(cfg.method)}, {"seed", cfg.seed}, {"epoch", idx + 1},
                   {"val_accuracy", res.log.epochs[idx + 1].val_accuracy}});
  return res.checkpoints[idx];
}

struct CertRun {
  CertSetting setting;
  double sigma;
  std::string split;
  std::vector<CertRecord> records;
};

inline std::vector<CertRecord> certify_split(const Network& net, const std::vector<LabeledSample>& data,
                                             std::size_t samples, const CertMode& mode, const SmoothingConfig& sc,
                                             std::uint64_t seed, std::size_t threads) {
  std::vector<CertRecord> rows;
  for (const auto& [idx, s] : pick_samples(data, samples)) {
    // Monte Carlo draws parallelize inside certify; per-draw streams keep
    // results independent of the worker count.
    rows.push_back({idx, s.label, certify(net, s.image, mode, sc, stream_key(seed, {idx}), threads)});
  }
  return rows;
}

inline double mean_of(const std::vector<TableRow>& rows, const std::string& method, const std::string& split,
                      const std::string& metric) {
  for (const auto& r : rows)
    if (r.method == method && r.split == split && r.metric == metric) return r.mean;
  throw std::runtime_error("table has no row " + method + "/" + split + "/" + metric);
}

}  // namespace detail

/// Runs every stage and writes artifacts under `out`. Progress and timing go
/// to `log` (may be null); the CSV/SVG/JSON artifacts themselves carry no
/// timing so that reruns are byte-identical.
inline ExperimentResult run_experiment(const ExperimentConfig& cfg, const std::filesystem::path& out,
                                       std::size_t threads = 1, std::ostream* log = nullptr) {
  namespace fs = std::filesystem;
  cfg.validate();
  fs::create_directories(out);
  ExperimentResult result;
  const auto seeds = cfg.seed_list();
  const std::vector<Method> methods{Method::ERM, Method::PGDAug, Method::TRADES};
  const std::vector<std::string> method_names{"erm", "pgd", "trades"};

  // Data -------------------------------------------------------------------
  const DGBenchmark bench = detail::Stage{"gen-data", log}.run([&] {
    auto b = generate_benchmark(cfg.benchmark);
    save_benchmark(b, out / "data");
    return b;
  });
  const auto src_val = bench.source_val();
  const auto target = bench.target_samples();

  // Training: 3 methods x seeds, run as independent jobs ----------------------
  struct Job {
    Method method;
    std::uint64_t seed;
    std::string name;
  };
  std::vector<Job> jobs;
  for (std::size_t m = 0; m < methods.size(); ++m)
    for (auto s : seeds) jobs.push_back({methods[m], s, method_names[m] + "_s" + std::to_string(s)});
  std::vector<Network> models(jobs.size());
  detail::Stage{"train", log}.run([&] {
    parallel_for(jobs.size(), threads, [&](std::size_t i) {
      models[i] = detail::train_and_select(bench, cfg.train_config(jobs[i].method, jobs[i].seed), out, jobs[i].name);
    });
  });

  // Empirical robustness ------------------------------------------------------
  detail::Stage{"eval-attack", log}.run([&] {
    const AttackConfig atk = cfg.attack_config();
    for (std::size_t i = 0; i < jobs.size(); ++i) {
      const std::string method = to_string(jobs[i].method);
      const std::uint64_t aseed = stream_key(cfg.master_seed, {tag::attack, i});
      result.runs.push_back({method, jobs[i].seed, "source", clean_accuracy(models[i], src_val, threads),
                             robust_accuracy(models[i], src_val, atk, aseed, threads)});
      result.runs.push_back({method, jobs[i].seed, "target", clean_accuracy(models[i], target, threads),
                             robust_accuracy(models[i], target, atk, aseed, threads)});
    }
    std::ostringstream runs_csv;
    runs_csv << "method,seed,split,clean,robust\n";
    for (const auto& r : result.runs)
      runs_csv << r.method << ',' << r.seed << ',' << r.split << ',' << fmt(r.clean) << ',' << fmt(r.robust) << '\n';
    write_text(out / "attack_runs.csv", runs_csv.str());
    result.table = accuracy_table(result.runs, method_names, {"source", "target"}, seeds);
    write_text(out / "accuracy_table.csv", table_csv(result.table));
    std::vector<PlotSeries> series;
    for (const auto& m : method_names) {
      PlotSeries ps{m, {}, {}, false};
      for (const char* split : {"source", "target"}) {
        ps.x.push_back(detail::mean_of(result.table, m, split, "clean"));
        ps.y.push_back(detail::mean_of(result.table, m, split, "robust"));
      }
      series.push_back(ps);
    }
    write_text(out / "accuracy_table.svg",
               svg_plot("clean vs robust accuracy (source, target)", "clean accuracy", "robust accuracy", series, true));
  });

  // Augmented models for certification and the invariance ablation ----------
  const auto aug_specs = cfg.augmented_models();
  std::vector<Network> aug_models(aug_specs.size());
  auto aug_label = [](const std::string& name, double sigma) { return "augment_" + name + "_sigma" + detail::sigma_tag(sigma); };
  detail::Stage{"train-augmented", log}.run([&] {
    parallel_for(aug_specs.size(), threads, [&](std::size_t i) {
      const auto& [name, sigma] = aug_specs[i];
      TrainConfig tc = cfg.train_config(Method::ERM, cfg.master_seed);
      tc.augmentation = Augmentation{parse_augment_mode(name), sigma};
      aug_models[i] = detail::train_and_select(bench, tc, out, aug_label(name, sigma));
    });
  });
  auto aug_model = [&](const std::string& name, double sigma) -> const Network& {
    for (std::size_t i = 0; i < aug_specs.size(); ++i)
      if (aug_specs[i] == std::make_pair(name, sigma)) return aug_models[i];
    throw std::logic_error("no augmented model " + aug_label(name, sigma));
  };
  std::map<std::string, Network> aug_by_name;
  for (const auto& k : cfg.invariance_kinds) aug_by_name[k] = aug_model(k, cfg.augment_sigma.at(k));
  const Network& baseline = models[0];  // erm, first seed

  detail::Stage{"invariance", log}.run([&] {
    result.invariance = invariance_table(bench, cfg.invariance_kinds, cfg.invariance_eps, baseline, aug_by_name,
                                         stream_key(cfg.master_seed, {tag::invariance}), threads);
    write_text(out / "invariance.csv", invariance_csv(result.invariance));
    std::vector<PlotSeries> series;
    for (const auto& k : cfg.invariance_kinds) {
      PlotSeries w{k + " target, augmented", {}, {}, false}, wo{k + " target, plain", {}, {}, true};
      for (const auto& r : result.invariance)
        if (r.deformation == k) {
          w.x.push_back(r.eps);
          w.y.push_back(r.target_with);
          wo.x.push_back(r.eps);
          wo.y.push_back(r.target_without);
        }
      series.push_back(w);
      series.push_back(wo);
    }
    write_text(out / "invariance.svg", svg_plot("accuracy under deformation", "magnitude", "accuracy", series));
  });

  // Certification -----------------------------------------------------------
  std::vector<detail::CertRun> cert_runs;
  detail::Stage{"certify", log}.run([&] {
    for (std::size_t mi = 0; mi < cfg.certify.size(); ++mi) {
      const auto& setting = cfg.certify[mi];
      const CertMode mode = parse_cert_mode(setting.mode);
      for (double sigma : setting.sigmas) {
        const Network& net = aug_model(ExperimentConfig::augment_name(setting.mode), sigma);
        const auto sc = cfg.smoothing(setting, sigma);
        for (const char* split : {"source", "target"}) {
          const auto& data = std::string(split) == "source" ? src_val : target;
          const std::uint64_t seed = stream_key(cfg.master_seed, {tag::estimate, mi, std::string(split) == "source" ? 0u : 1u});
          auto rows = detail::certify_split(net, data, cfg.cert_samples, mode, sc, seed, threads);
          write_text(out / "certify" / (setting.mode + "_sigma" + detail::sigma_tag(sigma) + "_" + split + ".csv"), cert_csv(rows));
          cert_runs.push_back({setting, sigma, split, std::move(rows)});
        }
      }
    }
  });

  std::map<std::pair<std::string, std::string>, double> best_acr;  // (mode, split) -> max over sigma
  std::map<std::pair<std::string, std::string>, double> best_top;  // certified accuracy at radius 0
  detail::Stage{"curves", log}.run([&] {
    std::string curves = curve_csv_header();
    std::ostringstream acr_csv;
    acr_csv << "kind,sigma,split,acr,cert_acc_at_0\n";
    for (const auto& setting : cfg.certify) {
      double top = 0.0;
      for (const auto& r : cert_runs)
        if (r.setting.mode == setting.mode) top = std::max(top, max_radius(labeled(r.records)));
      const auto grid = default_grid(top);
      std::vector<PlotSeries> series;
      for (const char* split : {"source", "target"}) {
        std::vector<CertCurve> per_sigma;
        for (const auto& r : cert_runs) {
          if (r.setting.mode != setting.mode || r.split != split) continue;
          const auto outs = labeled(r.records);
          CertCurve c = certified_curve(outs, grid);
          c.sigma = r.sigma;
          c.kind = setting.mode;
          c.split = split;
          curves += curve_csv_rows(c);
          const double a = acr(outs);
          acr_csv << setting.mode << ',' << fmt(r.sigma) << ',' << split << ',' << fmt(a) << ',' << fmt(c.accuracy.front()) << '\n';
          auto key = std::make_pair(setting.mode, std::string(split));
          best_acr[key] = std::max(best_acr[key], a);
          best_top[key] = std::max(best_top[key], c.accuracy.front());
          series.push_back({std::string(split) + " sigma=" + fmt(r.sigma, 3), c.radii, c.accuracy, std::string(split) == "target"});
          per_sigma.push_back(std::move(c));
        }
        const CertCurve env = envelope(per_sigma);
        curves += curve_csv_rows(env, true);
        acr_csv << setting.mode << ",envelope," << split << ',' << fmt(best_acr[{setting.mode, split}]) << ','
                << fmt(best_top[{setting.mode, split}]) << '\n';
      }
      write_text(out / "curves" / (setting.mode + ".svg"),
                 svg_plot(setting.mode + " smoothing: certified accuracy", "radius", "certified accuracy", series));
    }
    write_text(out / "curves.csv", curves);
    write_text(out / "acr.csv", acr_csv.str());
  });

  // Frechet distances against the change in pixel ACR -----------------------
  detail::Stage{"fid", log}.run([&] {
    const CertSetting* pixel = nullptr;
    for (const auto& s : cfg.certify)
      if (s.mode == "pixel") pixel = &s;
    for (const auto& tname : cfg.fid_targets) {
      DGBenchmark b = bench;
      Network ref = baseline, robust_ref = models[seeds.size()];  // erm and pgd, first seed
      std::vector<Network> noise_models;  // one per pixel sigma
      if (tname != bench.target().name) {
        BenchmarkParams p = cfg.benchmark;
        p.target = tname;
        b = generate_benchmark(p);
        ref = detail::train_and_select(b, cfg.train_config(Method::ERM, cfg.master_seed), out, "fid_" + tname + "_erm");
        robust_ref = detail::train_and_select(b, cfg.train_config(Method::PGDAug, cfg.master_seed), out, "fid_" + tname + "_pgd");
        if (pixel) {
          noise_models.resize(pixel->sigmas.size());
          parallel_for(pixel->sigmas.size(), threads, [&](std::size_t i) {
            TrainConfig tc = cfg.train_config(Method::ERM, cfg.master_seed);
            tc.augmentation = Augmentation{CertMode::pixels(), pixel->sigmas[i]};
            noise_models[i] = detail::train_and_select(b, tc, out, "fid_" + tname + "_noise_sigma" + detail::sigma_tag(pixel->sigmas[i]));
          });
        }
      }
      const auto sv = b.source_val();
      const auto tg = b.target_samples();
      FidRow row;
      row.target_domain = tname;
      row.fid = fid(extract_features(ref, sv, threads), extract_features(ref, tg, threads));
      row.rfid = fid(extract_features(robust_ref, sv, threads), extract_features(robust_ref, tg, threads));
      if (pixel && tname == bench.target().name) {
        // Already certified in the certify stage.
        row.delta_acr = best_acr[{"pixel", "source"}] - best_acr[{"pixel", "target"}];
      } else if (pixel && !noise_models.empty()) {
        double src_acr = 0.0, tgt_acr = 0.0;
        for (std::size_t i = 0; i < pixel->sigmas.size(); ++i) {
          const auto sc = cfg.smoothing(*pixel, pixel->sigmas[i]);
          const std::uint64_t seed = stream_key(cfg.master_seed, {tag::estimate, 7});
          src_acr = std::max(src_acr, acr(labeled(detail::certify_split(noise_models[i], sv, cfg.cert_samples, CertMode::pixels(), sc, seed, threads))));
          tgt_acr = std::max(tgt_acr, acr(labeled(detail::certify_split(noise_models[i], tg, cfg.cert_samples, CertMode::pixels(), sc, seed + 1, threads))));
        }
        row.delta_acr = src_acr - tgt_acr;
      }
      result.fid.push_back(row);
    }
    write_text(out / "fid.csv", fid_csv(result.fid));
    PlotSeries f{"FID", {}, {}, false}, rf{"R-FID", {}, {}, false};
    for (const auto& r : result.fid) {
      f.x.push_back(r.fid);
      f.y.push_back(r.delta_acr);
      rf.x.push_back(r.rfid);
      rf.y.push_back(r.delta_acr);
    }
    const std::vector<PlotSeries> fs_series{f}, rfs_series{rf};
    write_text(out / "fid.svg", svg_plot("FID vs change in ACR", "FID", "source ACR - target ACR", fs_series, true));
    write_text(out / "rfid.svg", svg_plot("R-FID vs change in ACR", "R-FID", "source ACR - target ACR", rfs_series, true));
  });

  // Summary -----------------------------------------------------------------
  detail::Stage{"summary", log}.run([&] {
    using nlohmann::json;
    auto m = [&](const std::string& method, const std::string& split, const std::string& metric) {
      return detail::mean_of(result.table, method, split, metric);
    };
    const double base_rob = m("erm", "target", "robust"), base_clean = m("erm", "target", "clean");
    json s;
    s["config"] = {{"master_seed", cfg.master_seed}, {"seeds", cfg.seeds}, {"train_eps", cfg.train_eps.str()},
                   {"attack_eps", cfg.attack_eps.str()}, {"target", bench.target().name}};
    json acc = json::object();
    for (const auto& r : result.table) acc[r.method][r.split][r.metric] = {{"mean", r.mean}, {"std", r.std}};
    s["accuracy"] = acc;

    const bool robust_gain = m("pgd", "target", "robust") >= base_rob + 0.10 && m("trades", "target", "robust") >= base_rob + 0.10;
    const bool no_clean_gain = m("pgd", "target", "clean") <= base_clean && m("trades", "target", "clean") <= base_clean;
    s["q1_robust_models_do_not_generalize_better"] = {
        {"holds", no_clean_gain},
        {"baseline_target_clean", base_clean},
        {"pgd_target_clean", m("pgd", "target", "clean")},
        {"trades_target_clean", m("trades", "target", "clean")}};
    s["q2_source_robustness_carries_to_target"] = {
        {"holds", robust_gain},
        {"baseline_target_robust", base_rob},
        {"pgd_target_robust", m("pgd", "target", "robust")},
        {"trades_target_robust", m("trades", "target", "robust")},
        {"required_margin", 0.10}};
    s["q3_tradeoff_generalizes"] = {
        {"holds", base_rob < 0.05 && no_clean_gain},
        {"baseline_target_robust_below_5pct", base_rob < 0.05},
        {"robust_methods_lose_target_clean_accuracy", no_clean_gain}};

    json q4 = json::object();
    bool pixel_nonzero = false, deform_nonzero = false, acr_half = true, acr_25 = true;
    for (const auto& setting : cfg.certify) {
      const double sa = best_acr[{setting.mode, "source"}], ta = best_acr[{setting.mode, "target"}];
      const double top = best_top[{setting.mode, "target"}];
      q4["modes"][setting.mode] = {{"source_acr", sa}, {"target_acr", ta}, {"target_cert_acc_at_0", top}};
      if (setting.mode == "pixel") {
        pixel_nonzero = top > 0.0;
        acr_half = ta >= 0.5 * sa;
        acr_25 = ta >= 0.75 * sa;
      } else if (top > 0.0) {
        deform_nonzero = true;
      }
    }
    q4["target_curve_nonzero_pixel"] = pixel_nonzero;
    q4["target_curve_nonzero_deformation"] = deform_nonzero;
    q4["pixel_target_acr_at_least_half_source"] = acr_half;
    q4["pixel_target_acr_within_25pct_of_source"] = acr_25;
    q4["holds"] = pixel_nonzero && deform_nonzero && acr_half;
    s["q4_certified_robustness_generalizes"] = q4;

    json t4 = json::object();
    bool t4_all = true;
    for (const auto& k : cfg.invariance_kinds) {
      const InvarianceRow* last = nullptr;
      for (const auto& r : result.invariance)
        if (r.deformation == k && (!last || r.eps >= last->eps)) last = &r;
      const bool up = last && last->target_with > last->target_without;
      t4[k] = {{"eps", last ? last->eps : 0.0}, {"target_without", last ? last->target_without : 0.0},
               {"target_with", last ? last->target_with : 0.0}, {"source_without", last ? last->source_without : 0.0},
               {"source_with", last ? last->source_with : 0.0}, {"augmentation_helps_target", up}};
      t4_all = t4_all && up;
    }
    t4["holds"] = t4_all;
    s["invariance_generalizes"] = t4;

    json fidj = json::array();
    for (const auto& r : result.fid) fidj.push_back({{"target", r.target_domain}, {"fid", r.fid}, {"rfid", r.rfid}, {"delta_acr", r.delta_acr}});
    s["fid"] = fidj;
    result.summary = s;
    write_text(out / "summary.json", s.dump(2) + "\n");
  });
  return result;
}

}  // namespace cshift
