#pragma once

// Parametric deformation fields and bilinear backward warping.
//
// Coordinates are (x, y) = (column, row) with the canvas centre
// c = ((W-1)/2, (H-1)/2). A flow field (u, v) holds per-pixel displacements
// along x and y; warping reads the source image at p + (u(p), v(p)).

#include <cmath>
#include <cstddef>
#include <numbers>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

#include "cshift/tensor.hpp"

namespace cshift {

enum class DeformKind { Rotation, Translation, Scaling, Affine, DCT };

inline std::string to_string(DeformKind k) {
  switch (k) {
    case DeformKind::Rotation: return "rotation";
    case DeformKind::Translation: return "translation";
    case DeformKind::Scaling: return "scaling";
    case DeformKind::Affine: return "affine";
    case DeformKind::DCT: return "dct";
  }
  return "?";
}

inline DeformKind parse_deform_kind(std::string_view name) {
  if (name == "rotation") return DeformKind::Rotation;
  if (name == "translation") return DeformKind::Translation;
  if (name == "scaling") return DeformKind::Scaling;
  if (name == "affine") return DeformKind::Affine;
  if (name == "dct") return DeformKind::DCT;
  throw std::invalid_argument("unknown deformation '" + std::string(name) + "'");
}

inline constexpr std::size_t kDefaultDctOrder = 2;

/// Number of parameters phi for a deformation kind. DCT uses K*K
/// coefficients per displacement component.
inline std::size_t parameter_count(DeformKind kind, std::size_t dct_order = kDefaultDctOrder) {
  switch (kind) {
    case DeformKind::Rotation: return 1;
    case DeformKind::Translation: return 2;
    case DeformKind::Scaling: return 1;
    case DeformKind::Affine: return 6;
    case DeformKind::DCT: return 2 * dct_order * dct_order;
  }
  return 0;
}

/// Rotation: [theta] in radians. Translation: [tx, ty] in pixels.
/// Scaling: [s], nu = s * (p - c) so s = 0 is the identity.
/// Affine: [a11, a12, a21, a22, bx, by], nu = A (p - c) + b.
/// DCT(K): K*K coefficients for u followed by K*K for v, row-major in (k, l).
struct DeformationSpec {
  DeformKind kind = DeformKind::Rotation;
  std::vector<double> params;
  std::size_t dct_order = kDefaultDctOrder;

  void validate() const {
    const std::size_t expected = parameter_count(kind, dct_order);
    if (params.size() != expected) {
      throw std::invalid_argument(to_string(kind) + " deformation takes " + std::to_string(expected) + " parameters, got " +
                                  std::to_string(params.size()));
    }
    for (double p : params)
      if (!std::isfinite(p)) throw std::invalid_argument("non-finite " + to_string(kind) + " parameter");
  }
};

/// Per-pixel displacement field, row-major H x W.
struct FlowField {
  std::size_t height = 0;
  std::size_t width = 0;
  std::vector<double> u;  // along x (columns)
  std::vector<double> v;  // along y (rows)

  FlowField() = default;
  FlowField(std::size_t h, std::size_t w) : height(h), width(w), u(h * w, 0.0), v(h * w, 0.0) {}
};

inline FlowField flow_field(const DeformationSpec& spec, std::size_t height, std::size_t width) {
  spec.validate();
  FlowField f(height, width);
  const double cx = (static_cast<double>(width) - 1.0) / 2.0;
  const double cy = (static_cast<double>(height) - 1.0) / 2.0;
  const auto& phi = spec.params;
  auto each = [&](auto&& fn) {
    for (std::size_t i = 0; i < height; ++i)
      for (std::size_t j = 0; j < width; ++j) fn(i, j, static_cast<double>(j) - cx, static_cast<double>(i) - cy);
  };
  switch (spec.kind) {
    case DeformKind::Rotation: {
      const double c = std::cos(phi[0]), s = std::sin(phi[0]);
      each([&](std::size_t i, std::size_t j, double dx, double dy) {
        f.u[i * width + j] = (c * dx - s * dy) - dx;
        f.v[i * width + j] = (s * dx + c * dy) - dy;
      });
      break;
    }
    case DeformKind::Translation:
      each([&](std::size_t i, std::size_t j, double, double) {
        f.u[i * width + j] = phi[0];
        f.v[i * width + j] = phi[1];
      });
      break;
    case DeformKind::Scaling:
      each([&](std::size_t i, std::size_t j, double dx, double dy) {
        f.u[i * width + j] = phi[0] * dx;
        f.v[i * width + j] = phi[0] * dy;
      });
      break;
    case DeformKind::Affine:
      each([&](std::size_t i, std::size_t j, double dx, double dy) {
        f.u[i * width + j] = phi[0] * dx + phi[1] * dy + phi[4];
        f.v[i * width + j] = phi[2] * dx + phi[3] * dy + phi[5];
      });
      break;
    case DeformKind::DCT: {
      const std::size_t K = spec.dct_order;
      // Separable cosine tables: row basis over i, column basis over j.
      std::vector<double> row_basis(K * height), col_basis(K * width);
      for (std::size_t k = 0; k < K; ++k) {
        for (std::size_t i = 0; i < height; ++i)
          row_basis[k * height + i] =
              k == 0 ? 1.0 : std::cos(std::numbers::pi * static_cast<double>(k) * (2.0 * static_cast<double>(i) + 1.0) / (2.0 * static_cast<double>(height)));
        for (std::size_t j = 0; j < width; ++j)
          col_basis[k * width + j] =
              k == 0 ? 1.0 : std::cos(std::numbers::pi * static_cast<double>(k) * (2.0 * static_cast<double>(j) + 1.0) / (2.0 * static_cast<double>(width)));
      }
      const std::size_t half = K * K;
      for (std::size_t i = 0; i < height; ++i) {
        for (std::size_t j = 0; j < width; ++j) {
          double su = 0.0, sv = 0.0;
          for (std::size_t k = 0; k < K; ++k)
            for (std::size_t l = 0; l < K; ++l) {
              const double b = row_basis[k * height + i] * col_basis[l * width + j];
              su += phi[k * K + l] * b;
              sv += phi[half + k * K + l] * b;
            }
          f.u[i * width + j] = su;
          f.v[i * width + j] = sv;
        }
      }
      break;
    }
  }
  return f;
}

/// Bilinear backward warp with zero padding outside the canvas. When
/// `clamp` is set the result is clipped to [0, 1].
inline ImageTensor warp(const ImageTensor& x, const FlowField& flow, bool clamp = true) {
  const auto [c, h, w] = x.shape;
  if (flow.height != h || flow.width != w || flow.u.size() != h * w || flow.v.size() != h * w) {
    throw std::invalid_argument("flow field " + std::to_string(flow.height) + "x" + std::to_string(flow.width) +
                                " does not match image " + to_string(x.shape));
  }
  ImageTensor out(x.shape, 0.0);
  const auto hi = static_cast<long>(h), wi = static_cast<long>(w);
  for (std::size_t i = 0; i < h; ++i) {
    for (std::size_t j = 0; j < w; ++j) {
      const std::size_t q = i * w + j;
      const double sx = static_cast<double>(j) + flow.u[q];
      const double sy = static_cast<double>(i) + flow.v[q];
      const double fx = std::floor(sx), fy = std::floor(sy);
      const long x0 = static_cast<long>(fx), y0 = static_cast<long>(fy);
      const double ax = sx - fx, ay = sy - fy;
      const double w00 = (1.0 - ax) * (1.0 - ay), w01 = ax * (1.0 - ay);
      const double w10 = (1.0 - ax) * ay, w11 = ax * ay;
      const bool in00 = y0 >= 0 && y0 < hi && x0 >= 0 && x0 < wi;
      const bool in01 = y0 >= 0 && y0 < hi && x0 + 1 >= 0 && x0 + 1 < wi;
      const bool in10 = y0 + 1 >= 0 && y0 + 1 < hi && x0 >= 0 && x0 < wi;
      const bool in11 = y0 + 1 >= 0 && y0 + 1 < hi && x0 + 1 >= 0 && x0 + 1 < wi;
      for (std::size_t ch = 0; ch < c; ++ch) {
        const double* plane = x.data.data() + ch * h * w;
        double acc = 0.0;
        if (in00) acc += w00 * plane[y0 * wi + x0];
        if (in01 && w01 != 0.0) acc += w01 * plane[y0 * wi + x0 + 1];
        if (in10 && w10 != 0.0) acc += w10 * plane[(y0 + 1) * wi + x0];
        if (in11 && w11 != 0.0) acc += w11 * plane[(y0 + 1) * wi + x0 + 1];
        out.data[ch * h * w + q] = clamp ? std::clamp(acc, 0.0, 1.0) : acc;
      }
    }
  }
  return out;
}

inline ImageTensor apply_deformation(const ImageTensor& x, const DeformationSpec& spec, bool clamp = true) {
  return warp(x, flow_field(spec, x.shape.height, x.shape.width), clamp);
}

/// Parses "kind:phi1,phi2,..." (e.g. "rotation:0.3", "translation:3,-1").
/// For DCT the order K is inferred from the coefficient count 2K^2.
inline DeformationSpec parse_deformation(std::string_view text) {
  const auto colon = text.find(':');
  DeformationSpec spec;
  spec.kind = parse_deform_kind(text.substr(0, colon));
  if (colon != std::string_view::npos) {
    std::string_view rest = text.substr(colon + 1);
    while (!rest.empty()) {
      const auto comma = rest.find(',');
      const std::string item(rest.substr(0, comma));
      std::size_t used = 0;
      double v = 0.0;
      try {
        v = std::stod(item, &used);
      } catch (const std::exception&) {
        used = 0;
      }
      if (used != item.size() || item.empty()) throw std::invalid_argument("bad deformation parameter '" + item + "'");
      spec.params.push_back(v);
      if (comma == std::string_view::npos) break;
      rest = rest.substr(comma + 1);
    }
  }
  if (spec.kind == DeformKind::DCT) {
    const auto k = static_cast<std::size_t>(std::lround(std::sqrt(static_cast<double>(spec.params.size()) / 2.0)));
    if (k == 0 || 2 * k * k != spec.params.size()) {
      throw std::invalid_argument("dct deformation needs 2K^2 coefficients, got " + std::to_string(spec.params.size()));
    }
    spec.dct_order = k;
  }
  spec.validate();
  return spec;
}

}  // namespace cshift
