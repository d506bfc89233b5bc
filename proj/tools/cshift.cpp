// cshift: command-line driver. Every subcommand works inside one run
// directory (--out) so that later stages find the artifacts of earlier ones:
//
//   data/               gen-data
//   models/<name>.ckpt  train          logs/<name>.csv
//   eval/<name>.csv     eval-attack
//   certify/*.csv       certify        (+ a .json sidecar per file)
//   curves.csv acr.csv  curves
//   fid.csv             fid
//
// `experiment` runs the whole pipeline from a JSON config.

#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <optional>
#include <string>

#include "CLI11.hpp"
#include "json.hpp"

#include "cshift/experiment.hpp"

namespace fs = std::filesystem;
using namespace cshift;

namespace {

struct MissingArtifact : std::runtime_error {
  using std::runtime_error::runtime_error;
};

void require(const fs::path& p, const std::string& what) {
  if (!fs::exists(p)) throw MissingArtifact("missing " + what + ": " + p.string());
}

DGBenchmark load_data(const fs::path& out, bool skip_target) {
  require(out / "data" / "manifest.json", "dataset (run gen-data first)");
  return load_benchmark(out / "data", skip_target);
}

Network load_model(const fs::path& out, const std::string& name) {
  const fs::path p = out / "models" / (name + ".ckpt");
  require(p, "checkpoint '" + name + "' (run train first)");
  return load_checkpoint(p).network;
}

std::vector<LabeledSample> split_samples(const DGBenchmark& b, const std::string& split) {
  if (split == "source") return b.source_val();
  if (split == "target") return b.target_samples();
  throw std::invalid_argument("split must be 'source' or 'target', got '" + split + "'");
}

std::string model_name(const std::string& method, std::uint64_t seed, const std::string& augment) {
  std::string name = method + "_s" + std::to_string(seed);
  if (!augment.empty()) name += "_" + augment.substr(0, augment.find(':'));
  return name;
}

/// "noise:0.25" or "rotation:0.3"
Augmentation parse_augmentation(const std::string& text) {
  const auto colon = text.find(':');
  if (colon == std::string::npos) throw std::invalid_argument("--augment expects kind:sigma, got '" + text + "'");
  Augmentation a{parse_augment_mode(text.substr(0, colon)), 0.0};
  try {
    a.sigma = std::stod(text.substr(colon + 1));
  } catch (const std::exception&) {
    throw std::invalid_argument("--augment sigma is not a number in '" + text + "'");
  }
  return a;
}

std::string cert_stem(const std::string& model, const std::string& mode, double sigma, const std::string& split) {
  return model + "_" + mode + "_sigma" + fmt(sigma, 6) + "_" + split;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Robustness under distribution shift on a synthetic multi-domain benchmark"};
  app.require_subcommand(1);
  app.fallthrough();  // --threads may follow the subcommand
  std::size_t threads = default_threads();
  app.add_option("--threads", threads, "worker threads (overrides CSHIFT_THREADS)")->check(CLI::PositiveNumber);
  std::string out = "run";

  // gen-data ----------------------------------------------------------------
  BenchmarkParams bp;
  std::string cue = "0";
  auto* gen = app.add_subcommand("gen-data", "generate the four-domain benchmark");
  gen->add_option("--out", out, "run directory")->capture_default_str();
  gen->add_option("--seed", bp.seed)->capture_default_str();
  gen->add_option("--per-domain", bp.per_domain)->capture_default_str();
  gen->add_option("--image-size", bp.image_size)->capture_default_str();
  gen->add_option("--target", bp.target, "held-out domain")->capture_default_str();
  gen->add_option("--val-fraction", bp.val_fraction)->capture_default_str();
  gen->add_option("--cue", cue, "class-cue amplitude, e.g. 8/255")->capture_default_str();

  // train -------------------------------------------------------------------
  std::string method = "erm", eps = "2/255", norm = "linf", augment, name;
  TrainConfig tc;
  auto* tr = app.add_subcommand("train", "train one model on the source domains");
  tr->add_option("--out", out)->capture_default_str();
  tr->add_option("--method", method, "erm | pgd | trades")->capture_default_str();
  tr->add_option("--seed", tc.seed)->capture_default_str();
  tr->add_option("--epochs", tc.epochs)->capture_default_str();
  tr->add_option("--batch-size", tc.batch_size)->capture_default_str();
  tr->add_option("--lr", tc.learning_rate)->capture_default_str();
  tr->add_option("--lambda", tc.lambda, "clean-loss weight for pgd")->capture_default_str();
  tr->add_option("--beta", tc.beta, "TRADES weight")->capture_default_str();
  tr->add_option("--eps", eps, "training budget, fractions allowed")->capture_default_str();
  tr->add_option("--norm", norm)->capture_default_str();
  tr->add_option("--arch", tc.architecture)->capture_default_str();
  tr->add_option("--augment", augment, "kind:sigma, e.g. noise:0.25 or rotation:0.3");
  tr->add_option("--name", name, "model name (default <method>_s<seed>)");

  // eval-attack -------------------------------------------------------------
  std::string model = "erm_s1";
  std::size_t steps = 20, restarts = 2;
  std::uint64_t seed = 1;
  auto* ev = app.add_subcommand("eval-attack", "clean and PGD accuracy on source validation and target");
  ev->add_option("--out", out)->capture_default_str();
  ev->add_option("--model", model)->capture_default_str();
  ev->add_option("--eps", eps)->capture_default_str();
  ev->add_option("--norm", norm)->capture_default_str();
  ev->add_option("--steps", steps)->capture_default_str();
  ev->add_option("--restarts", restarts)->capture_default_str();
  ev->add_option("--seed", seed)->capture_default_str();

  // certify -----------------------------------------------------------------
  std::string mode = "pixel", dist = "gaussian", split = "target";
  SmoothingConfig sc;
  std::size_t samples = 100;
  auto* ce = app.add_subcommand("certify", "randomized-smoothing certification of one model");
  ce->add_option("--out", out)->capture_default_str();
  ce->add_option("--model", model)->capture_default_str();
  ce->add_option("--mode", mode, "pixel | rotation | translation | scaling | affine | dct")->capture_default_str();
  ce->add_option("--distribution", dist)->capture_default_str();
  ce->add_option("--sigma", sc.sigma)->capture_default_str();
  ce->add_option("--n0", sc.n0)->capture_default_str();
  ce->add_option("--n", sc.n)->capture_default_str();
  ce->add_option("--alpha", sc.alpha)->capture_default_str();
  ce->add_option("--samples", samples, "evenly spaced samples from the split")->capture_default_str();
  ce->add_option("--split", split, "source | target")->capture_default_str();
  ce->add_option("--seed", seed)->capture_default_str();

  // curves ------------------------------------------------------------------
  auto* cu = app.add_subcommand("curves", "certified-accuracy curves, envelopes and ACR from certify outputs");
  cu->add_option("--out", out)->capture_default_str();

  // fid ---------------------------------------------------------------------
  std::string robust_model = "pgd_s1";
  auto* fi = app.add_subcommand("fid", "Frechet distance between source and target features");
  fi->add_option("--out", out)->capture_default_str();
  fi->add_option("--model", model, "reference network for FID")->capture_default_str();
  fi->add_option("--robust-model", robust_model, "reference network for R-FID")->capture_default_str();

  // experiment / report -----------------------------------------------------
  std::string config;
  auto* ex = app.add_subcommand("experiment", "run the full pipeline from a JSON config");
  ex->add_option("--config", config)->required()->check(CLI::ExistingFile);
  ex->add_option("--out", out)->capture_default_str();
  auto* rp = app.add_subcommand("report", "print the findings recorded in summary.json");
  rp->add_option("--out", out)->capture_default_str();

  CLI11_PARSE(app, argc, argv);
  const fs::path dir = out;

  try {
    if (gen->parsed()) {
      bp.cue_amplitude = parse_rational(cue).value();
      save_benchmark(generate_benchmark(bp), dir / "data");
      std::cout << "wrote " << (dir / "data").string() << "\n";
    } else if (tr->parsed()) {
      // The target domain is never loaded for training or model selection.
      const DGBenchmark bench = load_data(dir, true);
      tc.method = parse_method(method);
      const Rational r = parse_rational(eps);
      tc.attack = AttackConfig::training(r.value(), parse_norm(norm));
      if (!augment.empty()) tc.augmentation = parse_augmentation(augment);
      tc.validate();
      if (name.empty()) name = model_name(to_string(tc.method), tc.seed, augment);
      const auto res = train(bench, tc);
      const std::size_t idx = select_checkpoint(res.log);
      write_text(dir / "logs" / (name + ".csv"), train_log_csv(res.log));
      save_checkpoint(dir / "models" / (name + ".ckpt"), res.checkpoints[idx],
                      {{"name", name}, {"method", to_string(tc.method)}, {"seed", tc.seed}, {"epoch", idx + 1},
                       {"eps", r.str()}, {"augment", augment}, {"val_accuracy", res.log.epochs[idx + 1].val_accuracy}});
      std::cout << name << ": selected epoch " << idx + 1 << " (source val accuracy "
                << fmt(res.log.epochs[idx + 1].val_accuracy, 4) << ")\n";
    } else if (ev->parsed()) {
      const Network net = load_model(dir, model);
      const DGBenchmark bench = load_data(dir, false);
      const Rational r = parse_rational(eps);
      AttackConfig a = AttackConfig::evaluation(r.value(), parse_norm(norm));
      a.steps = steps;
      a.restarts = restarts;
      a.step_size = steps ? 2.5 * a.eps / static_cast<double>(steps) : 0.0;
      a.validate();
      std::ostringstream csv;
      csv << "model,eps,norm,split,clean,robust\n";
      for (const char* s : {"source", "target"}) {
        const auto data = split_samples(bench, s);
        const double clean = clean_accuracy(net, data, threads);
        const double robust = robust_accuracy(net, data, a, stream_key(seed, {tag::attack}), threads);
        csv << model << ',' << r.str() << ',' << norm << ',' << s << ',' << fmt(clean) << ',' << fmt(robust) << '\n';
        std::cout << s << ": clean " << fmt(clean, 4) << ", robust " << fmt(robust, 4) << "\n";
      }
      write_text(dir / "eval" / (model + ".csv"), csv.str());
    } else if (ce->parsed()) {
      const Network net = load_model(dir, model);
      const DGBenchmark bench = load_data(dir, false);
      const CertMode cm = parse_cert_mode(mode);
      sc.distribution = parse_distribution(dist);
      sc.validate();
      const auto data = split_samples(bench, split);
      std::vector<CertRecord> rows;
      const std::size_t m = std::min(samples, data.size());
      for (std::size_t k = 0; k < m; ++k) {
        const std::size_t i = k * data.size() / m;
        rows.push_back({i, data[i].label, certify(net, data[i].image, cm, sc, stream_key(seed, {i}), threads)});
      }
      const std::string stem = cert_stem(model, mode, sc.sigma, split);
      write_text(dir / "certify" / (stem + ".csv"), cert_csv(rows));
      const nlohmann::json meta{{"model", model}, {"mode", mode}, {"distribution", dist}, {"sigma", sc.sigma},
                                {"n0", sc.n0},     {"n", sc.n},       {"alpha", sc.alpha},      {"split", split},
                                {"samples", m},    {"seed", seed}};
      write_text(dir / "certify" / (stem + ".json"), meta.dump(2) + "\n");
      std::cout << "acr " << fmt(acr(labeled(rows)), 6) << " over " << m << " samples\n";
    } else if (cu->parsed()) {
      require(dir / "certify", "certification outputs (run certify first)");
      struct Run {
        nlohmann::json meta;
        std::vector<LabeledOutcome> outs;
      };
      std::vector<Run> runs;
      std::vector<fs::path> metas;
      for (const auto& e : fs::directory_iterator(dir / "certify"))
        if (e.path().extension() == ".json") metas.push_back(e.path());
      std::sort(metas.begin(), metas.end());
      if (metas.empty()) throw MissingArtifact("missing certification outputs in " + (dir / "certify").string());
      for (const auto& p : metas) {
        auto csv = p;
        csv.replace_extension(".csv");
        require(csv, "certification table");
        runs.push_back({nlohmann::json::parse(detail::read_file(p)), labeled(parse_cert_csv(detail::read_file(csv)))});
      }
      std::map<std::string, double> top;  // per mode
      for (const auto& r : runs) {
        const std::string k = r.meta["model"].get<std::string>() + "/" + r.meta["mode"].get<std::string>();
        top[k] = std::max(top[k], max_radius(r.outs));
      }
      std::string curves = curve_csv_header();
      std::ostringstream acr_csv;
      acr_csv << "model,kind,sigma,split,acr\n";
      std::map<std::string, std::vector<CertCurve>> groups;
      std::map<std::string, std::vector<PlotSeries>> plots;
      for (const auto& r : runs) {
        const std::string mdl = r.meta["model"], md = r.meta["mode"], sp = r.meta["split"];
        const double sigma = r.meta["sigma"];
        const auto grid = default_grid(top[mdl + "/" + md]);
        CertCurve c = certified_curve(r.outs, grid);
        c.sigma = sigma;
        c.kind = md;
        c.split = sp;
        curves += curve_csv_rows(c);
        acr_csv << mdl << ',' << md << ',' << fmt(sigma) << ',' << sp << ',' << fmt(acr(r.outs)) << '\n';
        plots[mdl + "_" + md].push_back({sp + " sigma=" + fmt(sigma, 3), c.radii, c.accuracy, sp == "target"});
        groups[mdl + "/" + md + "/" + sp].push_back(std::move(c));
      }
      for (const auto& [key, cs] : groups) curves += curve_csv_rows(envelope(cs), true);
      write_text(dir / "curves.csv", curves);
      write_text(dir / "acr.csv", acr_csv.str());
      for (const auto& [key, series] : plots)
        write_text(dir / "curves" / (key + ".svg"), svg_plot(key + ": certified accuracy", "radius", "certified accuracy", series));
      std::cout << "wrote curves for " << runs.size() << " certification runs\n";
    } else if (fi->parsed()) {
      const Network ref = load_model(dir, model);
      const Network robust = load_model(dir, robust_model);
      const DGBenchmark bench = load_data(dir, false);
      const auto sv = bench.source_val(), tg = bench.target_samples();
      FidRow row;
      row.target_domain = bench.target().name;
      row.fid = fid(extract_features(ref, sv, threads), extract_features(ref, tg, threads));
      row.rfid = fid(extract_features(robust, sv, threads), extract_features(robust, tg, threads));
      // Change in pixel ACR, best sigma per split, when curves have been computed.
      row.delta_acr = std::numeric_limits<double>::quiet_NaN();
      if (fs::exists(dir / "acr.csv")) {
        std::istringstream in(detail::read_file(dir / "acr.csv"));
        std::string line;
        std::getline(in, line);
        std::map<std::string, double> best;
        while (std::getline(in, line)) {
          std::vector<std::string> f;
          std::stringstream ls(line);
          for (std::string c; std::getline(ls, c, ',');) f.push_back(c);
          if (f.size() == 5 && f[1] == "pixel") best[f[3]] = std::max(best[f[3]], std::stod(f[4]));
        }
        if (best.count("source") && best.count("target")) row.delta_acr = best["source"] - best["target"];
      }
      const std::vector<FidRow> rows{row};
      write_text(dir / "fid.csv", fid_csv(rows));
      std::cout << row.target_domain << ": FID " << fmt(row.fid, 6) << ", R-FID " << fmt(row.rfid, 6) << "\n";
    } else if (ex->parsed()) {
      const ExperimentConfig cfg = load_experiment_config(config);
      run_experiment(cfg, dir, threads, &std::cerr);
      std::cout << "wrote " << (dir / "summary.json").string() << "\n";
    } else if (rp->parsed()) {
      require(dir / "summary.json", "summary (run experiment first)");
      const auto s = nlohmann::json::parse(detail::read_file(dir / "summary.json"));
      for (const char* key : {"q1_robust_models_do_not_generalize_better", "q2_source_robustness_carries_to_target",
                              "q3_tradeoff_generalizes", "q4_certified_robustness_generalizes", "invariance_generalizes"}) {
        if (!s.contains(key)) continue;
        std::cout << (s[key]["holds"].get<bool>() ? "holds   " : "fails   ") << key << "\n";
        for (const auto& [k, v] : s[key].items())
          if (k != "holds" && !v.is_object()) std::cout << "    " << k << " = " << v.dump() << "\n";
      }
    }
  } catch (const std::exception& e) {
    std::cerr << "cshift: " << e.what() << "\n";
    return 1;
  }
  return 0;
}
