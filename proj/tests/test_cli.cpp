#include <catch_amalgamated.hpp>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>

#include "cshift/checkpoint.hpp"
#include "cshift/experiment.hpp"

namespace fs = std::filesystem;

namespace {

struct Run {
  int status;
  std::string output;
};

Run cli(const std::string& args) {
  const fs::path log = fs::temp_directory_path() / "cshift_cli_output.txt";
  const std::string cmd = std::string(CSHIFT_CLI) + " " + args + " > " + log.string() + " 2>&1";
  const int rc = std::system(cmd.c_str());
  return {rc, cshift::detail::read_file(log)};
}

fs::path fresh(const std::string& name) {
  const fs::path p = fs::temp_directory_path() / name;
  fs::remove_all(p);
  return p;
}

std::string tree_digest(const fs::path& root) {
  std::vector<fs::path> files;
  for (const auto& e : fs::recursive_directory_iterator(root))
    if (e.is_regular_file()) files.push_back(e.path());
  std::sort(files.begin(), files.end());
  std::string all;
  for (const auto& f : files) all += fs::relative(f, root).string() + "\n" + cshift::detail::read_file(f);
  return all;
}

const std::string kData = " --per-domain 40 --image-size 16";

}  // namespace

TEST_CASE("gen-data is deterministic") {
  const auto a = fresh("cshift_cli_a"), b = fresh("cshift_cli_b");
  REQUIRE(cli("gen-data --seed 1" + kData + " --out " + a.string()).status == 0);
  REQUIRE(cli("gen-data --seed 1" + kData + " --out " + b.string()).status == 0);
  CHECK(tree_digest(a) == tree_digest(b));
  const auto c = fresh("cshift_cli_c");
  REQUIRE(cli("gen-data --seed 2" + kData + " --out " + c.string()).status == 0);
  CHECK(tree_digest(a) != tree_digest(c));
}

TEST_CASE("missing prerequisites name the artifact") {
  const auto dir = fresh("cshift_cli_missing");
  auto r = cli("certify --model erm_s1 --out " + dir.string());
  CHECK(r.status != 0);
  CHECK_THAT(r.output, Catch::Matchers::ContainsSubstring("checkpoint 'erm_s1'"));

  r = cli("train --out " + dir.string());
  CHECK(r.status != 0);
  CHECK_THAT(r.output, Catch::Matchers::ContainsSubstring("manifest.json"));

  REQUIRE(cli("gen-data" + kData + " --out " + dir.string()).status == 0);
  r = cli("eval-attack --model pgd_s3 --out " + dir.string());
  CHECK(r.status != 0);
  CHECK_THAT(r.output, Catch::Matchers::ContainsSubstring("pgd_s3"));
  r = cli("curves --out " + dir.string());
  CHECK(r.status != 0);
  CHECK_THAT(r.output, Catch::Matchers::ContainsSubstring("certif"));
}

TEST_CASE("budgets on the command line are exact fractions") {
  const auto dir = fresh("cshift_cli_eps");
  REQUIRE(cli("gen-data" + kData + " --out " + dir.string()).status == 0);
  REQUIRE(cli("train --method pgd --epochs 1 --eps 4/510 --out " + dir.string()).status == 0);
  const auto ck = cshift::load_checkpoint(dir / "models" / "pgd_s1.ckpt");
  CHECK(ck.header["eps"] == "2/255");
  const auto r = cli("train --method pgd --epochs 1 --eps 2/0 --out " + dir.string());
  CHECK(r.status != 0);
  CHECK_THAT(r.output, Catch::Matchers::ContainsSubstring("zero denominator"));
}

TEST_CASE("training output does not change when target files are poisoned") {
  const auto clean = fresh("cshift_cli_clean"), poisoned = fresh("cshift_cli_poisoned");
  for (const auto& d : {clean, poisoned}) REQUIRE(cli("gen-data" + kData + " --target sketch --out " + d.string()).status == 0);
  // Overwrite every target-domain file with a sentinel that cannot be parsed.
  for (const char* f : {"sketch.f64", "sketch.csv"}) std::ofstream(poisoned / "data" / f, std::ios::trunc) << "POISON";
  for (const auto& d : {clean, poisoned})
    REQUIRE(cli("train --method trades --epochs 2 --eps 8/255 --out " + d.string()).status == 0);
  CHECK(cshift::detail::read_file(clean / "models" / "trades_s1.ckpt") ==
        cshift::detail::read_file(poisoned / "models" / "trades_s1.ckpt"));
  CHECK(cshift::detail::read_file(clean / "logs" / "trades_s1.csv") == cshift::detail::read_file(poisoned / "logs" / "trades_s1.csv"));
  // Anything that evaluates on the target does read the files and fails loudly.
  CHECK(cli("eval-attack --model trades_s1 --out " + poisoned.string()).status != 0);
}

TEST_CASE("single-stage commands chain into curves and fid") {
  const auto dir = fresh("cshift_cli_chain");
  const std::string o = " --out " + dir.string();
  REQUIRE(cli("gen-data --per-domain 40 --image-size 16" + o).status == 0);
  REQUIRE(cli("train --epochs 2" + o).status == 0);
  REQUIRE(cli("train --method pgd --epochs 2" + o).status == 0);
  REQUIRE(cli("train --epochs 2 --augment noise:0.25" + o).status == 0);
  REQUIRE(cli("eval-attack --model erm_s1 --steps 3 --restarts 1" + o).status == 0);
  for (const char* split : {"source", "target"})
    REQUIRE(cli(std::string("certify --model erm_s1_noise --sigma 0.25 --n0 10 --n 50 --samples 5 --split ") + split + o).status == 0);
  REQUIRE(cli("curves" + o).status == 0);
  REQUIRE(cli("fid --model erm_s1 --robust-model pgd_s1" + o).status == 0);
  const std::string acr = cshift::detail::read_file(dir / "acr.csv");
  CHECK(acr.rfind("model,kind,sigma,split,acr\n", 0) == 0);
  CHECK(acr.find("erm_s1_noise,pixel,0.25,target,") != std::string::npos);
  const std::string fidcsv = cshift::detail::read_file(dir / "fid.csv");
  CHECK(fidcsv.find("\nsketch,") != std::string::npos);
  CHECK(fidcsv.find("nan") == std::string::npos);
  CHECK(fs::exists(dir / "certify" / "erm_s1_noise_pixel_sigma0.25_target.json"));
  CHECK(cli("report" + o).status != 0);
}

TEST_CASE("experiment config parsing") {
  const nlohmann::json good = {{"version", 1},
                               {"seeds", 2},
                               {"train", {{"eps", "8/255"}}},
                               {"certify", {{"modes", {{{"mode", "pixel"}, {"sigmas", {0.25}}}}}}},
                               {"invariance", {{"kinds", {"noise"}}, {"eps", {{"noise", {0.0, 0.1}}}}}},
                               {"augment_sigma", {{"noise", 0.3}}}};
  const auto cfg = cshift::parse_experiment_config(good);
  CHECK(cfg.train_eps == cshift::Rational{8, 255});
  CHECK(cfg.attack_eps == cshift::Rational{8, 255});
  CHECK(cfg.seed_list() == std::vector<std::uint64_t>{1, 2});
  CHECK(cfg.augmentations() == std::vector<std::string>{"noise"});
  // The invariance model and the certification model differ in sigma.
  using Spec = std::pair<std::string, double>;
  CHECK(cfg.augmented_models() == std::vector<Spec>{{"noise", 0.3}, {"noise", 0.25}});

  auto bad = good;
  bad["version"] = 2;
  CHECK_THROWS_WITH(cshift::parse_experiment_config(bad), Catch::Matchers::ContainsSubstring("version"));
  bad = good;
  bad["augment_sigma"] = nlohmann::json::object();
  CHECK_THROWS_WITH(cshift::parse_experiment_config(bad), Catch::Matchers::ContainsSubstring("'noise'"));
  bad = good;
  bad["certify"]["modes"][0]["sigmas"] = nlohmann::json::array();
  CHECK_THROWS_WITH(cshift::parse_experiment_config(bad), Catch::Matchers::ContainsSubstring("sigma grid"));
  bad = good;
  bad["train"]["epochs"] = "many";
  CHECK_THROWS_WITH(cshift::parse_experiment_config(bad), Catch::Matchers::ContainsSubstring("'epochs'"));
}

TEST_CASE("a failing stage is named and earlier artifacts survive") {
  const auto dir = fresh("cshift_cli_stage");
  fs::create_directories(dir);
  const fs::path cfg = dir / "bad.json";
  // A directory squatting on the accuracy-table path makes eval-attack fail
  // after data and models have been written.
  std::ofstream(cfg) << R"({"version": 1, "seeds": 1,
    "benchmark": {"per_domain": 40, "image_size": 16},
    "train": {"epochs": 1, "eps": "8/255", "steps": 1},
    "attack": {"steps": 1, "restarts": 1},
    "certify": {"n0": 10, "n": 20, "samples": 2, "modes": [{"mode": "pixel", "sigmas": [0.25]}]},
    "augment_sigma": {"noise": 0.25}})";
  fs::create_directories(dir / "run" / "accuracy_table.csv");
  const auto r = cli("experiment --config " + cfg.string() + " --out " + (dir / "run").string());
  CHECK(r.status != 0);
  CHECK_THAT(r.output, Catch::Matchers::ContainsSubstring("stage 'eval-attack'"));
  CHECK(fs::exists(dir / "run" / "data" / "manifest.json"));
  CHECK(fs::exists(dir / "run" / "models" / "erm_s1.ckpt"));
  CHECK(fs::exists(dir / "run" / "attack_runs.csv"));
}

TEST_CASE("shipped configs are valid") {
  for (const char* name : {"tiny.json", "ci.json", "default.json"}) {
    CAPTURE(name);
    CHECK_NOTHROW(cshift::load_experiment_config(fs::path(CSHIFT_SOURCE_DIR) / "configs" / name));
  }
}
