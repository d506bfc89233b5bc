#pragma once

// Procedural multi-domain shape benchmark.
//
// Every domain renders the same kind of latent content (a shape class with a
// jittered pose) under its own style, so a domain differs from another only in
// appearance. One domain is held out as the target; the remaining sources get
// a class-stratified train/validation split.

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <numbers>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "json.hpp"

#include "cshift/checkpoint.hpp"
#include "cshift/rng.hpp"
#include "cshift/tensor.hpp"

namespace cshift {

struct LabeledSample {
  ImageTensor image;
  std::size_t label = 0;
  std::size_t domain = 0;
  friend bool operator==(const LabeledSample&, const LabeledSample&) = default;
};

struct DomainData {
  std::string name;
  std::vector<LabeledSample> samples;
  friend bool operator==(const DomainData&, const DomainData&) = default;
};

/// Per-domain index lists; the target's entries are always empty.
struct SourceSplit {
  std::vector<std::vector<std::size_t>> train;
  std::vector<std::vector<std::size_t>> val;
  friend bool operator==(const SourceSplit&, const SourceSplit&) = default;
};

struct BenchmarkParams {
  std::uint64_t seed = 1;
  std::size_t per_domain = 500;
  std::size_t image_size = 32;
  std::size_t classes = 4;
  std::string target = "sketch";
  double val_fraction = 0.2;
  // Amplitude of a faint class-tied pixel pattern added to every domain. It is
  // predictive but can be erased by a small perturbation, mimicking the
  // fragile features of natural images; 0 disables it.
  double cue_amplitude = 0.0;
  friend bool operator==(const BenchmarkParams&, const BenchmarkParams&) = default;
};

struct DGBenchmark {
  BenchmarkParams params;
  std::vector<std::string> class_names;
  std::vector<DomainData> domains;  // fixed style order, includes the target
  std::size_t target_index = 0;
  SourceSplit split;

  [[nodiscard]] Shape image_shape() const { return {3, params.image_size, params.image_size}; }
  [[nodiscard]] std::size_t class_count() const { return params.classes; }
  [[nodiscard]] const DomainData& target() const { return domains.at(target_index); }
  [[nodiscard]] std::vector<std::size_t> source_ids() const {
    std::vector<std::size_t> ids;
    for (std::size_t d = 0; d < domains.size(); ++d)
      if (d != target_index) ids.push_back(d);
    return ids;
  }
  [[nodiscard]] std::size_t domain_index(const std::string& name) const {
    for (std::size_t d = 0; d < domains.size(); ++d)
      if (domains[d].name == name) return d;
    throw std::invalid_argument("unknown domain '" + name + "'");
  }

  /// Copies of the source training / validation samples, in domain then index order.
  [[nodiscard]] std::vector<LabeledSample> source_train() const { return gather(split.train); }
  [[nodiscard]] std::vector<LabeledSample> source_val() const { return gather(split.val); }
  [[nodiscard]] std::vector<LabeledSample> target_samples() const { return target().samples; }

  friend bool operator==(const DGBenchmark&, const DGBenchmark&) = default;

 private:
  [[nodiscard]] std::vector<LabeledSample> gather(const std::vector<std::vector<std::size_t>>& idx) const {
    std::vector<LabeledSample> out;
    for (std::size_t d = 0; d < domains.size(); ++d) {
      if (d == target_index || d >= idx.size()) continue;
      for (std::size_t i : idx[d]) out.push_back(domains[d].samples[i]);
    }
    return out;
  }
};

inline const std::vector<std::string>& domain_names() {
  static const std::vector<std::string> names{"photo", "sketch", "inverted", "textured"};
  return names;
}

inline const std::vector<std::string>& shape_names() {
  static const std::vector<std::string> names{"disk", "square", "triangle", "cross"};
  return names;
}

namespace detail {

// Shape membership in local coordinates scaled so the shape spans ~[-1, 1].
inline bool inside_shape(std::size_t cls, double u, double v) {
  switch (cls) {
    case 0: return u * u + v * v <= 1.0;
    case 1: return std::max(std::abs(u), std::abs(v)) <= 0.82;
    case 2: {
      // Upward equilateral triangle with circumradius 1.15 (image y grows down).
      constexpr double r = 1.15;
      const double top = -r, bottom = r / 2.0;
      if (v < top || v > bottom) return false;
      const double half_width = (v - top) / (bottom - top) * r * std::numbers::sqrt3 / 2.0;
      return std::abs(u) <= half_width;
    }
    case 3: return (std::abs(u) <= 0.33 && std::abs(v) <= 1.0) || (std::abs(v) <= 0.33 && std::abs(u) <= 1.0);
    default: throw std::invalid_argument("no shape registered for class " + std::to_string(cls));
  }
}

struct Pose {
  double cx, cy, radius, angle;
};

// Fraction of a pixel covered by the shape scaled by `grow`, 4x4 supersampled.
inline double coverage(std::size_t cls, const Pose& pose, double grow, std::size_t i, std::size_t j) {
  constexpr int ss = 4;
  const double c = std::cos(pose.angle), s = std::sin(pose.angle);
  int hits = 0;
  for (int a = 0; a < ss; ++a) {
    for (int b = 0; b < ss; ++b) {
      const double px = static_cast<double>(j) + (b + 0.5) / ss - 0.5 - pose.cx;
      const double py = static_cast<double>(i) + (a + 0.5) / ss - 0.5 - pose.cy;
      const double u = (c * px + s * py) / (pose.radius * grow);
      const double v = (-s * px + c * py) / (pose.radius * grow);
      hits += inside_shape(cls, u, v) ? 1 : 0;
    }
  }
  return static_cast<double>(hits) / (ss * ss);
}

/// +-1 Walsh pattern per class over the 4x4 tile. The four patterns are
/// mutually orthogonal and orthogonal to the (i + j) checker of the textured
/// style, so the cue never aliases a domain's own texture.
inline double cue_sign(std::size_t cls, std::size_t i, std::size_t j) {
  const std::size_t i0 = i % 2, j0 = j % 2, i1 = (i / 2) % 2, j1 = (j / 2) % 2;
  std::size_t bit = 0;
  switch (cls % 4) {
    case 0: bit = i0; break;
    case 1: bit = j0; break;
    case 2: bit = i1 ^ j1; break;
    default: bit = i1 ^ j0; break;
  }
  return bit ? 1.0 : -1.0;
}

inline void add_cue(ImageTensor& img, std::size_t cls, double amplitude) {
  if (amplitude == 0.0) return;
  for (std::size_t ch = 0; ch < img.shape.channels; ++ch)
    for (std::size_t i = 0; i < img.shape.height; ++i)
      for (std::size_t j = 0; j < img.shape.width; ++j) {
        double& v = img.at(ch, i, j);
        v = std::clamp(v + amplitude * cue_sign(cls, i, j), 0.0, 1.0);
      }
}

inline ImageTensor render(std::size_t style, std::size_t cls, std::size_t size, Rng& rng) {
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  auto uni = [&](double lo, double hi) { return lo + (hi - lo) * unit(rng); };
  const double mid = (static_cast<double>(size) - 1.0) / 2.0;
  const double sz = static_cast<double>(size);
  Pose pose{mid + uni(-0.06, 0.06) * sz, mid + uni(-0.06, 0.06) * sz, uni(0.27, 0.33) * sz, uni(-0.25, 0.25)};

  const Shape shape{3, size, size};
  ImageTensor img(shape, 0.0);
  if (style == 1) {  // sketch: dark outline on white paper
    const double paper = uni(0.94, 1.0);
    const double ink = uni(0.75, 0.95);
    for (std::size_t i = 0; i < size; ++i)
      for (std::size_t j = 0; j < size; ++j) {
        const double band = std::max(0.0, coverage(cls, pose, 1.12, i, j) - coverage(cls, pose, 0.84, i, j));
        const double val = paper * (1.0 - ink * band);
        for (std::size_t ch = 0; ch < 3; ++ch) img.at(ch, i, j) = val;
      }
    return img;
  }

  // photo-like rendering shared by photo, inverted and textured
  std::array<double, 3> bg{}, fg{}, slope{};
  for (std::size_t ch = 0; ch < 3; ++ch) {
    bg[ch] = uni(0.05, 0.25);
    fg[ch] = uni(0.55, 0.85);
    slope[ch] = uni(0.0, 0.15);
  }
  const double dir = uni(0.0, 2.0 * std::numbers::pi);
  const double dx = std::cos(dir), dy = std::sin(dir);
  for (std::size_t i = 0; i < size; ++i)
    for (std::size_t j = 0; j < size; ++j) {
      const double cov = coverage(cls, pose, 1.0, i, j);
      const double t = ((static_cast<double>(j) - mid) * dx + (static_cast<double>(i) - mid) * dy) / sz;
      for (std::size_t ch = 0; ch < 3; ++ch) {
        const double back = std::clamp(bg[ch] + slope[ch] * t, 0.0, 1.0);
        img.at(ch, i, j) = cov * fg[ch] + (1.0 - cov) * back;
      }
    }
  if (style == 2) {  // inverted
    for (double& v : img.data) v = 1.0 - v;
  } else if (style == 3) {  // textured: per-pixel high-frequency grain
    for (std::size_t i = 0; i < size; ++i)
      for (std::size_t j = 0; j < size; ++j) {
        const double grain = uni(0.0, 0.22) + (((i + j) % 2 == 0) ? 0.04 : 0.0);
        for (std::size_t ch = 0; ch < 3; ++ch) img.at(ch, i, j) = std::clamp(img.at(ch, i, j) + grain, 0.0, 1.0);
      }
  }
  return img;
}

}  // namespace detail

/// Class-stratified split of every source domain. Per class, round(f * n_c)
/// samples go to validation; the target domain is never touched.
inline SourceSplit split_train_val(const DGBenchmark& bench, double val_fraction) {
  if (!(val_fraction > 0.0 && val_fraction < 0.5)) {
    throw std::invalid_argument("val_fraction must lie in (0, 0.5), got " + std::to_string(val_fraction));
  }
  SourceSplit split;
  split.train.resize(bench.domains.size());
  split.val.resize(bench.domains.size());
  for (std::size_t d = 0; d < bench.domains.size(); ++d) {
    if (d == bench.target_index) continue;
    const auto& samples = bench.domains[d].samples;
    for (std::size_t c = 0; c < bench.class_count(); ++c) {
      std::vector<std::size_t> members;
      for (std::size_t i = 0; i < samples.size(); ++i)
        if (samples[i].label == c) members.push_back(i);
      Rng rng = substream(bench.params.seed, {tag::split, d, c});
      std::shuffle(members.begin(), members.end(), rng);
      const auto n_val = static_cast<std::size_t>(std::lround(val_fraction * static_cast<double>(members.size())));
      split.val[d].insert(split.val[d].end(), members.begin(), members.begin() + static_cast<std::ptrdiff_t>(n_val));
      split.train[d].insert(split.train[d].end(), members.begin() + static_cast<std::ptrdiff_t>(n_val), members.end());
    }
    std::sort(split.train[d].begin(), split.train[d].end());
    std::sort(split.val[d].begin(), split.val[d].end());
  }
  return split;
}

inline DGBenchmark generate_benchmark(const BenchmarkParams& params) {
  if (params.classes == 0 || params.classes > shape_names().size()) {
    throw std::invalid_argument("class count " + std::to_string(params.classes) + " exceeds the " +
                                std::to_string(shape_names().size()) + " registered shapes");
  }
  if (params.per_domain < 10 * params.classes) {
    throw std::invalid_argument("per_domain must be at least 10 * classes = " + std::to_string(10 * params.classes) +
                                ", got " + std::to_string(params.per_domain));
  }
  if (params.image_size < 16) throw std::invalid_argument("image_size must be at least 16");
  if (!(params.cue_amplitude >= 0.0 && params.cue_amplitude <= 0.25)) throw std::invalid_argument("cue_amplitude must lie in [0, 0.25]");

  DGBenchmark bench;
  bench.params = params;
  bench.class_names.assign(shape_names().begin(), shape_names().begin() + static_cast<std::ptrdiff_t>(params.classes));
  bench.target_index = static_cast<std::size_t>(-1);
  for (std::size_t d = 0; d < domain_names().size(); ++d) {
    DomainData dom;
    dom.name = domain_names()[d];
    if (dom.name == params.target) bench.target_index = d;
    Rng rng = substream(params.seed, {tag::domain, d});
    dom.samples.reserve(params.per_domain);
    for (std::size_t s = 0; s < params.per_domain; ++s) {
      const std::size_t cls = s % params.classes;
      ImageTensor img = detail::render(d, cls, params.image_size, rng);
      detail::add_cue(img, cls, params.cue_amplitude);
      dom.samples.push_back({std::move(img), cls, d});
    }
    bench.domains.push_back(std::move(dom));
  }
  if (bench.target_index == static_cast<std::size_t>(-1)) {
    throw std::invalid_argument("target domain '" + params.target + "' is not one of photo, sketch, inverted, textured");
  }
  bench.split = split_train_val(bench, params.val_fraction);
  return bench;
}

inline DGBenchmark generate_benchmark(std::uint64_t seed, std::size_t per_domain, std::size_t image_size,
                                      std::size_t classes) {
  BenchmarkParams p;
  p.seed = seed;
  p.per_domain = per_domain;
  p.image_size = image_size;
  p.classes = classes;
  return generate_benchmark(p);
}

/// Mean intensity over all pixels and channels of a domain.
inline double mean_intensity(const DomainData& dom) {
  double s = 0.0;
  std::size_t n = 0;
  for (const auto& smp : dom.samples) {
    for (double v : smp.image.data) s += v;
    n += smp.image.data.size();
  }
  return n ? s / static_cast<double>(n) : 0.0;
}

// ---------------------------------------------------------------------------
// On-disk format: manifest.json + <domain>.f64 (raw f64le tensors, sample-major)
// + <domain>.csv (index,label,domain).

inline void save_benchmark(const DGBenchmark& bench, const std::filesystem::path& dir) {
  namespace fs = std::filesystem;
  fs::create_directories(dir);
  nlohmann::json m;
  m["format"] = "cshift-benchmark";
  m["version"] = 1;
  m["seed"] = bench.params.seed;
  m["per_domain"] = bench.params.per_domain;
  m["image_size"] = bench.params.image_size;
  m["channels"] = 3;
  m["classes"] = bench.params.classes;
  m["class_names"] = bench.class_names;
  m["shapes"] = bench.class_names;
  m["dtype"] = "f64le";
  m["target"] = bench.domains[bench.target_index].name;
  m["val_fraction"] = bench.params.val_fraction;
  m["cue_amplitude"] = bench.params.cue_amplitude;
  nlohmann::json names = nlohmann::json::array(), counts = nlohmann::json::object(), val = nlohmann::json::object();
  for (std::size_t d = 0; d < bench.domains.size(); ++d) {
    const auto& dom = bench.domains[d];
    names.push_back(dom.name);
    counts[dom.name] = dom.samples.size();
    if (d != bench.target_index) val[dom.name] = bench.split.val[d];

    std::ofstream blob(dir / (dom.name + ".f64"), std::ios::binary | std::ios::trunc);
    std::ofstream csv(dir / (dom.name + ".csv"), std::ios::trunc);
    if (!blob || !csv) throw std::runtime_error("cannot write domain files under " + dir.string());
    csv << "index,label,domain\n";
    for (std::size_t i = 0; i < dom.samples.size(); ++i) {
      detail::write_f64le(blob, dom.samples[i].image.data);
      csv << i << ',' << dom.samples[i].label << ',' << dom.samples[i].domain << '\n';
    }
  }
  m["domain_names"] = names;
  m["sample_counts"] = counts;
  m["val_indices"] = val;
  std::ofstream out(dir / "manifest.json", std::ios::trunc);
  out << m.dump(2) << '\n';
  if (!out) throw std::runtime_error("cannot write " + (dir / "manifest.json").string());
}

namespace detail {

template <typename T>
T manifest_field(const nlohmann::json& m, const char* key) {
  if (!m.contains(key)) throw std::runtime_error("manifest field '" + std::string(key) + "' missing");
  try {
    return m.at(key).get<T>();
  } catch (const nlohmann::json::exception&) {
    throw std::runtime_error("manifest field '" + std::string(key) + "' has the wrong type");
  }
}

}  // namespace detail

/// Loads a benchmark. When `skip_target` is set the target domain's blob is
/// never opened and its samples are left empty.
inline DGBenchmark load_benchmark(const std::filesystem::path& dir, bool skip_target = false) {
  nlohmann::json m;
  try {
    m = nlohmann::json::parse(detail::read_file(dir / "manifest.json"));
  } catch (const nlohmann::json::exception& e) {
    throw std::runtime_error("manifest.json is not valid JSON: " + std::string(e.what()));
  }
  if (detail::manifest_field<std::string>(m, "format") != "cshift-benchmark") throw std::runtime_error("manifest field 'format' is not cshift-benchmark");
  if (detail::manifest_field<std::string>(m, "dtype") != "f64le") throw std::runtime_error("manifest field 'dtype' must be f64le");
  DGBenchmark bench;
  bench.params.seed = detail::manifest_field<std::uint64_t>(m, "seed");
  bench.params.per_domain = detail::manifest_field<std::size_t>(m, "per_domain");
  bench.params.image_size = detail::manifest_field<std::size_t>(m, "image_size");
  bench.params.classes = detail::manifest_field<std::size_t>(m, "classes");
  bench.params.target = detail::manifest_field<std::string>(m, "target");
  bench.params.val_fraction = detail::manifest_field<double>(m, "val_fraction");
  bench.params.cue_amplitude = detail::manifest_field<double>(m, "cue_amplitude");
  bench.class_names = detail::manifest_field<std::vector<std::string>>(m, "class_names");
  if (detail::manifest_field<std::size_t>(m, "channels") != 3) throw std::runtime_error("manifest field 'channels' must be 3");
  if (bench.class_names.size() != bench.params.classes) throw std::runtime_error("manifest field 'class_names' disagrees with 'classes'");
  const auto names = detail::manifest_field<std::vector<std::string>>(m, "domain_names");
  const auto counts = detail::manifest_field<nlohmann::json>(m, "sample_counts");
  const auto val = detail::manifest_field<nlohmann::json>(m, "val_indices");
  const Shape shape = bench.image_shape();
  const std::size_t per_image = shape.size();

  bench.target_index = static_cast<std::size_t>(-1);
  bench.split.train.resize(names.size());
  bench.split.val.resize(names.size());
  for (std::size_t d = 0; d < names.size(); ++d) {
    DomainData dom;
    dom.name = names[d];
    const bool is_target = dom.name == bench.params.target;
    if (is_target) bench.target_index = d;
    if (!counts.contains(dom.name)) throw std::runtime_error("manifest field 'sample_counts." + dom.name + "' missing");
    const auto count = counts.at(dom.name).get<std::size_t>();
    if (!(is_target && skip_target)) {
      const std::string blob = detail::read_file(dir / (dom.name + ".f64"));
      if (blob.size() != count * per_image * 8) {
        throw std::runtime_error(dom.name + ".f64 has " + std::to_string(blob.size()) + " bytes but manifest field 'sample_counts." +
                                 dom.name + "' implies " + std::to_string(count * per_image * 8));
      }
      std::ifstream csv(dir / (dom.name + ".csv"));
      if (!csv) throw std::runtime_error("cannot open " + dom.name + ".csv");
      std::string line;
      std::getline(csv, line);
      const auto* bytes = reinterpret_cast<const unsigned char*>(blob.data());
      for (std::size_t i = 0; i < count; ++i) {
        if (!std::getline(csv, line)) throw std::runtime_error(dom.name + ".csv has fewer rows than manifest field 'sample_counts." + dom.name + "'");
        std::size_t idx = 0, label = 0, domain = 0;
        char c1 = 0, c2 = 0;
        std::istringstream row(line);
        if (!(row >> idx >> c1 >> label >> c2 >> domain) || idx != i || label >= bench.params.classes || domain != d) {
          throw std::runtime_error(dom.name + ".csv row " + std::to_string(i) + " is malformed");
        }
        dom.samples.push_back({ImageTensor(shape, detail::decode_f64le(bytes + i * per_image * 8, per_image)), label, d});
      }
    }
    if (!is_target) {
      if (!val.contains(dom.name)) throw std::runtime_error("manifest field 'val_indices." + dom.name + "' missing");
      auto v = val.at(dom.name).get<std::vector<std::size_t>>();
      std::vector<bool> is_val(count, false);
      for (std::size_t i : v) {
        if (i >= count) throw std::runtime_error("manifest field 'val_indices." + dom.name + "' has out-of-range index");
        is_val[i] = true;
      }
      for (std::size_t i = 0; i < count; ++i)
        if (!is_val[i]) bench.split.train[d].push_back(i);
      bench.split.val[d] = std::move(v);
    }
    bench.domains.push_back(std::move(dom));
  }
  if (bench.target_index == static_cast<std::size_t>(-1)) throw std::runtime_error("manifest field 'target' names no domain");
  return bench;
}

}  // namespace cshift
