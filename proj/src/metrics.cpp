#include "xdiff/metrics.hpp"

#include <cmath>
#include <cstdio>
#include <limits>

#include "xdiff/io.hpp"

namespace xdiff {
namespace {

std::vector<double> gaussian_window(int w, double sigma) {
  std::vector<double> g(w);
  const double c = 0.5 * (w - 1);
  double s = 0.0;
  for (int i = 0; i < w; ++i) {
    g[i] = std::exp(-0.5 * (i - c) * (i - c) / (sigma * sigma));
    s += g[i];
  }
  for (double& v : g) v /= s;
  return g;
}

// Separable valid-mode filter.
Image filter_valid(const Image& x, const std::vector<double>& g) {
  const int w = static_cast<int>(g.size());
  const int R = x.rows() - w + 1, C = x.cols() - w + 1;
  Image tmp(x.rows(), C);
  for (int r = 0; r < x.rows(); ++r) {
    for (int c = 0; c < C; ++c) {
      double s = 0.0;
      for (int k = 0; k < w; ++k) s += g[k] * x(r, c + k);
      tmp(r, c) = s;
    }
  }
  Image out(R, C);
  for (int r = 0; r < R; ++r) {
    for (int c = 0; c < C; ++c) {
      double s = 0.0;
      for (int k = 0; k < w; ++k) s += g[k] * tmp(r + k, c);
      out(r, c) = s;
    }
  }
  return out;
}

double mean_of(const std::vector<double>& v) {
  double s = 0.0;
  for (double x : v) s += x;
  return v.empty() ? 0.0 : s / static_cast<double>(v.size());
}

double std_of(const std::vector<double>& v) {
  if (v.size() < 2) return 0.0;
  const double m = mean_of(v);
  double s = 0.0;
  for (double x : v) s += (x - m) * (x - m);
  return std::sqrt(s / static_cast<double>(v.size() - 1));
}

std::string num(double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.10g", v);
  return buf;
}

}  // namespace

double mse(const Image& a, const Image& b) {
  require_same_shape(a, b, "mse");
  if (a.empty()) throw InvalidArgument("mse of empty images");
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    const double d = a.vec()[i] - b.vec()[i];
    s += d * d;
  }
  return s / static_cast<double>(a.size());
}

double psnr(const Image& a, const Image& reference, double peak) {
  if (!(peak > 0.0)) throw InvalidArgument("psnr peak must be positive");
  const double m = mse(a, reference);
  if (m == 0.0) return std::numeric_limits<double>::infinity();
  return 10.0 * std::log10(peak * peak / m);
}

double psnr(const Image& a, const Image& reference) { return psnr(a, reference, reference.max()); }

double ssim(const Image& a, const Image& b, double dynamic_range, const SsimOptions& opt) {
  require_same_shape(a, b, "ssim");
  if (a.rows() < opt.window || a.cols() < opt.window) {
    throw InvalidArgument("ssim needs images of at least the window size");
  }
  if (!(dynamic_range > 0.0)) throw InvalidArgument("ssim dynamic range must be positive");
  const auto g = gaussian_window(opt.window, opt.sigma);
  Image aa(a.rows(), a.cols()), bb(a.rows(), a.cols()), ab(a.rows(), a.cols());
  for (std::size_t i = 0; i < a.size(); ++i) {
    aa.vec()[i] = a.vec()[i] * a.vec()[i];
    bb.vec()[i] = b.vec()[i] * b.vec()[i];
    ab.vec()[i] = a.vec()[i] * b.vec()[i];
  }
  const Image ma = filter_valid(a, g), mb = filter_valid(b, g);
  const Image saa = filter_valid(aa, g), sbb = filter_valid(bb, g), sab = filter_valid(ab, g);
  const double c1 = std::pow(opt.k1 * dynamic_range, 2);
  const double c2 = std::pow(opt.k2 * dynamic_range, 2);
  double total = 0.0;
  for (std::size_t i = 0; i < ma.size(); ++i) {
    const double mx = ma.vec()[i], my = mb.vec()[i];
    const double vx = saa.vec()[i] - mx * mx;
    const double vy = sbb.vec()[i] - my * my;
    const double cxy = sab.vec()[i] - mx * my;
    total += ((2 * mx * my + c1) * (2 * cxy + c2)) / ((mx * mx + my * my + c1) * (vx + vy + c2));
  }
  return total / static_cast<double>(ma.size());
}

double tbr(double suv_mean_lesion, double suv_mean_liver) {
  if (!(suv_mean_liver > 0.0)) throw DomainError("tbr: liver mean must be positive");
  return suv_mean_lesion / suv_mean_liver;
}

double cr(double suv_max_lesion, double suv_mean_liver) {
  if (!(suv_mean_liver > 0.0)) throw DomainError("cr: liver mean must be positive");
  return suv_max_lesion / suv_mean_liver;
}

SuvDelta delta_suv(const Image& recon, const Image& reference, const Mask& lesion_mask,
                   const MetaInfo& meta) {
  require_same_shape(recon, reference, "delta_suv");
  const SuvStats r = compute_suv(recon, lesion_mask, meta);
  const SuvStats f = compute_suv(reference, lesion_mask, meta);
  return {std::abs(r.suv_max - f.suv_max), std::abs(r.suv_mean - f.suv_mean)};
}

BlandAltman bland_altman(const Image& recon, const Image& reference) {
  require_same_shape(recon, reference, "bland_altman");
  std::vector<double> d(recon.size());
  for (std::size_t i = 0; i < d.size(); ++i) d[i] = recon.vec()[i] - reference.vec()[i];
  const double m = mean_of(d);
  const double s = std_of(d);
  return {m, m - 1.96 * s, m + 1.96 * s};
}

MetricReport evaluate(const std::string& id, const Image& recon, const Image& reference,
                      const Phantom& phantom, const MetaInfo& meta, const ReportOptions& opt) {
  MetricReport r;
  r.id = id;
  const double peak = opt.peak > 0.0 ? opt.peak : reference.max();
  r.mse = mse(recon, reference);
  r.psnr = psnr(recon, reference, peak);
  r.ssim = ssim(recon, reference, peak);
  r.bland_altman = bland_altman(recon, reference);
  r.has_lesion = phantom.lesion_mask.any();
  if (r.has_lesion) {
    const SuvDelta d = delta_suv(recon, reference, phantom.lesion_mask, meta);
    r.delta_suv_max = d.delta_max;
    r.delta_suv_mean = d.delta_mean;
    const SuvStats les = compute_suv(recon, phantom.lesion_mask, meta);
    const SuvStats liv = compute_suv(recon, phantom.liver_mask, meta);
    if (liv.suv_mean > 0.0) {
      r.tbr = tbr(les.suv_mean, liv.suv_mean);
      r.cr = cr(les.suv_max, liv.suv_mean);
    } else {
      r.tbr = r.cr = std::numeric_limits<double>::quiet_NaN();
    }
  }
  return r;
}

std::string report_csv_header() {
  return "id,psnr,ssim,mse,delta_suv_max,delta_suv_mean,tbr,cr,ba_mean_diff,ba_loa_low,ba_loa_high";
}

std::string report_csv_row(const MetricReport& r) {
  return r.id + ',' + num(r.psnr) + ',' + num(r.ssim) + ',' + num(r.mse) + ',' +
         num(r.delta_suv_max) + ',' + num(r.delta_suv_mean) + ',' + num(r.tbr) + ',' + num(r.cr) +
         ',' + num(r.bland_altman.mean_diff) + ',' + num(r.bland_altman.loa_low) + ',' +
         num(r.bland_altman.loa_high);
}

nlohmann::json report_summary(const std::vector<MetricReport>& reports) {
  auto field = [&](auto get, bool lesion_only) {
    std::vector<double> v;
    for (const auto& r : reports) {
      if (lesion_only && !r.has_lesion) continue;
      const double x = get(r);
      if (std::isfinite(x)) v.push_back(x);
    }
    return nlohmann::json{{"mean", mean_of(v)}, {"std", std_of(v)}, {"n", v.size()}};
  };
  return {{"cases", reports.size()},
          {"psnr", field([](const MetricReport& r) { return r.psnr; }, false)},
          {"ssim", field([](const MetricReport& r) { return r.ssim; }, false)},
          {"mse", field([](const MetricReport& r) { return r.mse; }, false)},
          {"delta_suv_max", field([](const MetricReport& r) { return r.delta_suv_max; }, true)},
          {"delta_suv_mean", field([](const MetricReport& r) { return r.delta_suv_mean; }, true)},
          {"tbr", field([](const MetricReport& r) { return r.tbr; }, true)},
          {"cr", field([](const MetricReport& r) { return r.cr; }, true)},
          {"ba_mean_diff", field([](const MetricReport& r) { return r.bland_altman.mean_diff; }, false)}};
}

void write_reports(const std::filesystem::path& csv, const std::filesystem::path& json,
                   const std::vector<MetricReport>& reports, const nlohmann::json& extra) {
  std::string text = report_csv_header() + "\n";
  for (const auto& r : reports) text += report_csv_row(r) + "\n";
  io::write_text(csv, text);
  nlohmann::json j = report_summary(reports);
  if (extra.is_object()) {
    for (auto it = extra.begin(); it != extra.end(); ++it) j[it.key()] = it.value();
  }
  io::write_json(json, j);
}

}  // namespace xdiff
