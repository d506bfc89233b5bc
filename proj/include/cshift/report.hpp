#pragma once

// CSV and SVG emission. Numbers are printed with a fixed format so that
// identical inputs always produce identical bytes.

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <span>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "cshift/certify.hpp"
#include "cshift/metrics.hpp"
#include "cshift/train.hpp"

namespace cshift {

inline std::string fmt(double v, int digits = 10) {
  if (std::isnan(v)) return "nan";
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.*g", digits, v);
  return buf;
}

inline void write_text(const std::filesystem::path& path, const std::string& text) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  out << text;
  if (!out) throw std::runtime_error("failed writing " + path.string());
}

// ---------------------------------------------------------------------------
// CSV schemas

struct CertRecord {
  std::size_t sample_id = 0;
  std::size_t label = 0;
  CertOutcome outcome;
};

inline std::string cert_csv(std::span<const CertRecord> rows) {
  std::ostringstream os;
  os << "sample_id,label,verdict,predicted,pA_lower,radius\n";
  for (const auto& r : rows) {
    os << r.sample_id << ',' << r.label << ',' << (r.outcome.certified ? "certified" : "abstain") << ','
       << (r.outcome.certified ? std::to_string(r.outcome.predicted) : std::string("-1")) << ','
       << fmt(r.outcome.pa_lower, 12) << ',' << fmt(r.outcome.radius, 12) << '\n';
  }
  return os.str();
}

inline std::vector<CertRecord> parse_cert_csv(const std::string& text) {
  std::istringstream in(text);
  std::string line;
  if (!std::getline(in, line) || line.rfind("sample_id,label,verdict", 0) != 0) {
    throw std::runtime_error("certification CSV lacks the expected header");
  }
  std::vector<CertRecord> rows;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    std::vector<std::string> f;
    std::stringstream ss(line);
    std::string cell;
    while (std::getline(ss, cell, ',')) f.push_back(cell);
    if (f.size() != 6) throw std::runtime_error("malformed certification row: " + line);
    CertRecord r;
    r.sample_id = std::stoul(f[0]);
    r.label = std::stoul(f[1]);
    r.outcome.certified = f[2] == "certified";
    r.outcome.predicted = r.outcome.certified ? std::stoul(f[3]) : 0;
    r.outcome.pa_lower = std::stod(f[4]);
    r.outcome.radius = std::stod(f[5]);
    rows.push_back(r);
  }
  return rows;
}

inline std::vector<LabeledOutcome> labeled(std::span<const CertRecord> rows) {
  std::vector<LabeledOutcome> out;
  out.reserve(rows.size());
  for (const auto& r : rows) out.push_back({r.outcome, r.label});
  return out;
}

inline std::string curve_csv_header() { return "kind,sigma,split,radius,cert_acc\n"; }

/// Rows for one curve; envelopes carry the sigma tag "envelope".
inline std::string curve_csv_rows(const CertCurve& c, bool is_envelope = false) {
  std::ostringstream os;
  for (std::size_t i = 0; i < c.radii.size(); ++i) {
    os << c.kind << ',' << (is_envelope ? std::string("envelope") : fmt(c.sigma)) << ',' << c.split << ','
       << fmt(c.radii[i]) << ',' << fmt(c.accuracy[i]) << '\n';
  }
  return os.str();
}

inline std::string table_csv(std::span<const TableRow> rows) {
  std::ostringstream os;
  os << "method,split,metric,mean,std\n";
  for (const auto& r : rows) os << r.method << ',' << r.split << ',' << r.metric << ',' << fmt(r.mean) << ',' << fmt(r.std) << '\n';
  return os.str();
}

inline std::string train_log_csv(const TrainLog& log) {
  std::ostringstream os;
  os << "epoch,train_loss,val_acc\n";
  for (const auto& e : log.epochs) os << e.epoch << ',' << fmt(e.train_loss) << ',' << fmt(e.val_accuracy) << '\n';
  return os.str();
}

inline std::string invariance_csv(std::span<const InvarianceRow> rows) {
  std::ostringstream os;
  os << "deformation,eps,source_without,target_without,source_with,target_with\n";
  for (const auto& r : rows) {
    os << r.deformation << ',' << fmt(r.eps) << ',' << fmt(r.source_without) << ',' << fmt(r.target_without) << ','
       << fmt(r.source_with) << ',' << fmt(r.target_with) << '\n';
  }
  return os.str();
}

struct FidRow {
  std::string target_domain;
  double fid = 0.0;
  double rfid = 0.0;
  double delta_acr = 0.0;
};

inline std::string fid_csv(std::span<const FidRow> rows) {
  std::ostringstream os;
  os << "target_domain,fid,rfid,delta_acr\n";
  for (const auto& r : rows) os << r.target_domain << ',' << fmt(r.fid) << ',' << fmt(r.rfid) << ',' << fmt(r.delta_acr) << '\n';
  return os.str();
}

// ---------------------------------------------------------------------------
// SVG

struct PlotSeries {
  std::string name;
  std::vector<double> x;
  std::vector<double> y;
  bool dashed = false;
};

/// Line plot with linear axes. Scatter mode draws markers instead of lines.
inline std::string svg_plot(const std::string& title, const std::string& xlabel, const std::string& ylabel,
                            std::span<const PlotSeries> series, bool scatter = false) {
  static const char* palette[] = {"#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b", "#e377c2", "#17becf"};
  constexpr double W = 640, H = 420, L = 70, R = 170, T = 40, B = 55;
  double x0 = 0, x1 = 1, y0 = 0, y1 = 1;
  bool first = true;
  for (const auto& s : series)
    for (std::size_t i = 0; i < s.x.size(); ++i) {
      if (first) {
        x0 = x1 = s.x[i];
        y0 = y1 = s.y[i];
        first = false;
      }
      x0 = std::min(x0, s.x[i]);
      x1 = std::max(x1, s.x[i]);
      y0 = std::min(y0, s.y[i]);
      y1 = std::max(y1, s.y[i]);
    }
  y0 = std::min(y0, 0.0);
  if (x1 <= x0) x1 = x0 + 1.0;
  if (y1 <= y0) y1 = y0 + 1.0;
  auto px = [&](double v) { return L + (v - x0) / (x1 - x0) * (W - L - R); };
  auto py = [&](double v) { return H - B - (v - y0) / (y1 - y0) * (H - T - B); };

  std::ostringstream os;
  os << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << W << "\" height=\"" << H << "\" font-family=\"sans-serif\" font-size=\"12\">\n";
  os << "<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n";
  os << "<text x=\"" << W / 2 << "\" y=\"22\" text-anchor=\"middle\" font-size=\"14\">" << title << "</text>\n";
  os << "<line x1=\"" << L << "\" y1=\"" << H - B << "\" x2=\"" << W - R << "\" y2=\"" << H - B << "\" stroke=\"black\"/>\n";
  os << "<line x1=\"" << L << "\" y1=\"" << T << "\" x2=\"" << L << "\" y2=\"" << H - B << "\" stroke=\"black\"/>\n";
  for (int t = 0; t <= 4; ++t) {
    const double xv = x0 + (x1 - x0) * t / 4.0, yv = y0 + (y1 - y0) * t / 4.0;
    os << "<text x=\"" << fmt(px(xv), 6) << "\" y=\"" << H - B + 16 << "\" text-anchor=\"middle\">" << fmt(xv, 3) << "</text>\n";
    os << "<text x=\"" << L - 6 << "\" y=\"" << fmt(py(yv) + 4, 6) << "\" text-anchor=\"end\">" << fmt(yv, 3) << "</text>\n";
  }
  os << "<text x=\"" << (L + W - R) / 2 << "\" y=\"" << H - 12 << "\" text-anchor=\"middle\">" << xlabel << "</text>\n";
  os << "<text x=\"16\" y=\"" << (T + H - B) / 2 << "\" text-anchor=\"middle\" transform=\"rotate(-90 16 " << (T + H - B) / 2
     << ")\">" << ylabel << "</text>\n";
  for (std::size_t k = 0; k < series.size(); ++k) {
    const auto& s = series[k];
    const char* color = palette[k % 8];
    if (scatter) {
      for (std::size_t i = 0; i < s.x.size(); ++i)
        os << "<circle cx=\"" << fmt(px(s.x[i]), 6) << "\" cy=\"" << fmt(py(s.y[i]), 6) << "\" r=\"4\" fill=\"" << color << "\"/>\n";
    } else {
      os << "<polyline fill=\"none\" stroke=\"" << color << "\" stroke-width=\"2\"" << (s.dashed ? " stroke-dasharray=\"6 4\"" : "")
         << " points=\"";
      for (std::size_t i = 0; i < s.x.size(); ++i) os << fmt(px(s.x[i]), 6) << ',' << fmt(py(s.y[i]), 6) << ' ';
      os << "\"/>\n";
    }
    const double ly = T + 14 + 18.0 * static_cast<double>(k);
    os << "<line x1=\"" << W - R + 12 << "\" y1=\"" << ly << "\" x2=\"" << W - R + 36 << "\" y2=\"" << ly << "\" stroke=\"" << color
       << "\" stroke-width=\"2\"" << (s.dashed ? " stroke-dasharray=\"6 4\"" : "") << "/>\n";
    os << "<text x=\"" << W - R + 42 << "\" y=\"" << ly + 4 << "\">" << s.name << "</text>\n";
  }
  os << "</svg>\n";
  return os.str();
}

}  // namespace cshift
