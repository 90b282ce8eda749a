#include "xdiff/projection.hpp"

#include <cmath>
#include <numbers>
#include <random>

#include <fftw3.h>

#include "xdiff/io.hpp"

namespace xdiff {
namespace {

constexpr double kRayStep = 0.5;

struct RayTable {
  int samples = 0;
  double first = 0.0;
};

RayTable ray_table(const Geometry& g) {
  const double reach = std::sqrt(2.0) * (0.5 * g.image_size + 1.0);
  RayTable r;
  r.samples = 2 * static_cast<int>(std::ceil(reach / kRayStep)) + 1;
  r.first = -0.5 * (r.samples - 1) * kRayStep;
  return r;
}

// Calls f(pixel_index, weight) for the bilinear stencil at (x, y) in centred coordinates.
template <class F>
inline void bilinear(int n, double x, double y, F&& f) {
  const double c = 0.5 * (n - 1);
  const double px = x + c;
  const double py = y + c;
  const double fx = std::floor(px);
  const double fy = std::floor(py);
  const int x0 = static_cast<int>(fx);
  const int y0 = static_cast<int>(fy);
  if (x0 < -1 || y0 < -1 || x0 >= n || y0 >= n) return;
  const double wx = px - fx;
  const double wy = py - fy;
  const double w[4] = {(1 - wx) * (1 - wy), wx * (1 - wy), (1 - wx) * wy, wx * wy};
  const int xs[4] = {x0, x0 + 1, x0, x0 + 1};
  const int ys[4] = {y0, y0, y0 + 1, y0 + 1};
  for (int k = 0; k < 4; ++k) {
    if (xs[k] >= 0 && xs[k] < n && ys[k] >= 0 && ys[k] < n) {
      f(static_cast<std::size_t>(ys[k]) * n + xs[k], w[k]);
    }
  }
}

template <class F>
void for_each_ray_sample(const Geometry& g, F&& f) {
  const RayTable rt = ray_table(g);
  const int n = g.image_size;
  for (int a = 0; a < g.num_angles; ++a) {
    const double th = g.angle(a);
    const double ct = std::cos(th);
    const double st = std::sin(th);
    for (int b = 0; b < g.num_bins; ++b) {
      const double s = g.bin_position(b);
      const std::size_t cell = static_cast<std::size_t>(a) * g.num_bins + b;
      for (int k = 0; k < rt.samples; ++k) {
        const double u = rt.first + k * kRayStep;
        const double x = s * ct - u * st;
        const double y = s * st + u * ct;
        bilinear(n, x, y, [&](std::size_t pix, double w) { f(cell, pix, w * kRayStep); });
      }
    }
  }
}

int fft_size(int nb) {
  int p = 1;
  while (p < 2 * nb) p <<= 1;
  return p;
}

}  // namespace

void Geometry::validate() const {
  if (image_size < 1 || num_angles < 1 || num_bins < 1 || !(bin_spacing > 0.0)) {
    throw InvalidArgument("geometry fields must be positive");
  }
  if (num_bins * bin_spacing < image_size * std::sqrt(2.0)) {
    throw InvalidArgument("num_bins " + std::to_string(num_bins) +
                          " does not cover the image diagonal");
  }
}

double Geometry::angle(int a) const { return std::numbers::pi * a / num_angles; }

double Geometry::bin_position(int b) const { return (b - 0.5 * (num_bins - 1)) * bin_spacing; }

Geometry Geometry::covering(int image_size, int num_angles, double bin_spacing) {
  Geometry g{image_size, num_angles,
             static_cast<int>(std::ceil(image_size * std::sqrt(2.0) / bin_spacing)), bin_spacing};
  g.validate();
  return g;
}

nlohmann::json Geometry::to_json() const {
  return {{"image_size", image_size},
          {"num_angles", num_angles},
          {"num_bins", num_bins},
          {"bin_spacing", bin_spacing}};
}

Geometry Geometry::from_json(const nlohmann::json& j) {
  Geometry g;
  try {
    g.image_size = j.at("image_size").get<int>();
    g.num_angles = j.at("num_angles").get<int>();
    g.num_bins = j.at("num_bins").get<int>();
    g.bin_spacing = j.value("bin_spacing", 1.0);
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("geometry json: ") + e.what());
  }
  g.validate();
  return g;
}

Sinogram::Sinogram(Geometry g, Image d, std::string t)
    : geometry(g), data(std::move(d)), transform(std::move(t)) {
  if (data.rows() != geometry.num_angles || data.cols() != geometry.num_bins) {
    throw ShapeError("sinogram data does not match geometry");
  }
}

Sinogram Sinogram::zeros(const Geometry& g) {
  return Sinogram(g, Image(g.num_angles, g.num_bins));
}

Sinogram radon(const Image& image, const Geometry& g) {
  g.validate();
  if (image.rows() != g.image_size || image.cols() != g.image_size) {
    throw ShapeError("radon: image is " + std::to_string(image.rows()) + "x" +
                     std::to_string(image.cols()) + ", geometry expects " +
                     std::to_string(g.image_size));
  }
  Sinogram out = Sinogram::zeros(g);
  const double* src = image.vec().data();
  double* dst = out.data.vec().data();
  for_each_ray_sample(g, [&](std::size_t cell, std::size_t pix, double w) { dst[cell] += w * src[pix]; });
  return out;
}

Image backproject(const Sinogram& s) {
  const Geometry& g = s.geometry;
  g.validate();
  Image out(g.image_size, g.image_size);
  const double* src = s.data.vec().data();
  double* dst = out.vec().data();
  for_each_ray_sample(g, [&](std::size_t cell, std::size_t pix, double w) { dst[pix] += w * src[cell]; });
  return out;
}

Image ramp_filter(const Sinogram& s, bool hann) {
  const Geometry& g = s.geometry;
  g.validate();
  const int nb = g.num_bins;
  const int P = fft_size(nb);
  const int H = P / 2 + 1;
  const double ds = g.bin_spacing;

  double* buf = fftw_alloc_real(P);
  fftw_complex* spec = fftw_alloc_complex(H);
  fftw_plan fwd = fftw_plan_dft_r2c_1d(P, buf, spec, FFTW_ESTIMATE);
  fftw_plan inv = fftw_plan_dft_c2r_1d(P, spec, buf, FFTW_ESTIMATE);

  // Spatial Ram-Lak kernel on the circular grid, transformed once.
  for (int i = 0; i < P; ++i) {
    const int n = i <= P / 2 ? i : i - P;
    double h = 0.0;
    if (n == 0) {
      h = 1.0 / (4.0 * ds * ds);
    } else if (n % 2 != 0) {
      h = -1.0 / (std::numbers::pi * std::numbers::pi * n * n * ds * ds);
    }
    buf[i] = h;
  }
  fftw_execute(fwd);
  std::vector<double> kernel(H);
  for (int k = 0; k < H; ++k) {
    double w = spec[k][0];
    if (hann) w *= 0.5 * (1.0 + std::cos(2.0 * std::numbers::pi * k / P));
    kernel[k] = w;
  }

  Image out(g.num_angles, nb);
  for (int a = 0; a < g.num_angles; ++a) {
    for (int i = 0; i < P; ++i) buf[i] = i < nb ? s.data(a, i) : 0.0;
    fftw_execute(fwd);
    for (int k = 0; k < H; ++k) {
      spec[k][0] *= kernel[k];
      spec[k][1] *= kernel[k];
    }
    fftw_execute(inv);
    // c2r is unnormalised; ds approximates the convolution integral.
    for (int b = 0; b < nb; ++b) out(a, b) = buf[b] * ds / P;
  }

  fftw_destroy_plan(fwd);
  fftw_destroy_plan(inv);
  fftw_free(buf);
  fftw_free(spec);
  return out;
}

Image fbp(const Sinogram& s, const FbpOptions& opt) {
  const Geometry& g = s.geometry;
  const Image q = ramp_filter(s, opt.hann);
  const int n = g.image_size;
  const int nb = g.num_bins;
  const double c = 0.5 * (n - 1);
  const double centre_bin = 0.5 * (nb - 1);
  Image out(n, n);
  for (int a = 0; a < g.num_angles; ++a) {
    const double th = g.angle(a);
    const double ct = std::cos(th) / g.bin_spacing;
    const double st = std::sin(th) / g.bin_spacing;
    const double* row = &q.vec()[static_cast<std::size_t>(a) * nb];
    for (int r = 0; r < n; ++r) {
      const double y = r - c;
      for (int col = 0; col < n; ++col) {
        const double pos = (col - c) * ct + y * st + centre_bin;
        const double fp = std::floor(pos);
        const int b0 = static_cast<int>(fp);
        const double w = pos - fp;
        double v = 0.0;
        if (b0 >= 0 && b0 < nb) v += (1.0 - w) * row[b0];
        if (b0 + 1 >= 0 && b0 + 1 < nb) v += w * row[b0 + 1];
        out(r, col) += v;
      }
    }
  }
  const double scale = std::numbers::pi / g.num_angles;
  for (double& v : out.vec()) {
    v *= scale;
    if (opt.clamp_negative && v < 0.0) v = 0.0;
  }
  return out;
}

Sinogram thin_counts(const Sinogram& s, double drf) {
  if (!(drf >= 1.0)) throw InvalidArgument("drf must be >= 1");
  return s;
}

Sinogram thin_counts(const Sinogram& s, double drf, Rng& rng) {
  if (!(drf >= 1.0)) throw InvalidArgument("drf must be >= 1");
  Sinogram out = s;
  for (double& v : out.data.vec()) {
    if (v < 0.0) throw InvalidArgument("thin_counts: negative Poisson mean");
    if (v == 0.0) continue;
    std::poisson_distribution<long long> pd(v / drf);
    v = static_cast<double>(pd(rng)) * drf;
  }
  return out;
}

Sinogram poisson_realize(const Sinogram& s, Rng& rng) { return thin_counts(s, 1.0, rng); }

Mask perturbation_support(const Geometry& g, const std::vector<SinoBump>& bumps,
                          double rel_threshold) {
  Sinogram d = Sinogram::zeros(g);
  for (const auto& b : bumps) {
    if (b.angle < 0 || b.angle >= g.num_angles || b.bin < 0 || b.bin >= g.num_bins) {
      throw InvalidArgument("bump outside sinogram");
    }
    d.data(b.angle, b.bin) += b.amplitude;
  }
  // fbp is linear, so fbp(s + d) - fbp(s) = fbp(d).
  const Image change = fbp(d);
  double peak = 0.0;
  for (double v : change.vec()) peak = std::max(peak, std::abs(v));
  Mask m(g.image_size, g.image_size);
  if (peak == 0.0) return m;
  for (std::size_t i = 0; i < change.size(); ++i) {
    m.data[i] = std::abs(change.vec()[i]) > rel_threshold * peak ? 1 : 0;
  }
  return m;
}

double perturbation_footprint(const Sinogram& s, const std::vector<SinoBump>& bumps,
                              double rel_threshold) {
  const Mask m = perturbation_support(s.geometry, bumps, rel_threshold);
  return static_cast<double>(m.count()) / static_cast<double>(m.data.size());
}

Sinogram log1p_transform(const Sinogram& s) {
  if (s.transform != "none") throw InvalidArgument("sinogram already transformed");
  Sinogram out = s;
  for (double& v : out.data.vec()) v = std::log1p(std::max(v, 0.0));
  out.transform = "log1p";
  return out;
}

Sinogram expm1_transform(const Sinogram& s) {
  if (s.transform != "log1p") throw InvalidArgument("sinogram is not log1p-transformed");
  Sinogram out = s;
  for (double& v : out.data.vec()) v = std::expm1(v);
  out.transform = "none";
  return out;
}

void save_sinogram(const std::filesystem::path& stem, const Sinogram& s) {
  io::write_f32(io::with_suffix(stem, ".raw"), s.data.span());
  nlohmann::json j = s.geometry.to_json();
  j["transform"] = s.transform;
  j["dtype"] = "float32";
  io::write_json(io::with_suffix(stem, ".json"), j);
}

Sinogram load_sinogram(const std::filesystem::path& stem) {
  const auto j = io::read_json(io::with_suffix(stem, ".json"));
  const Geometry g = Geometry::from_json(j);
  Vec v = io::read_f32(io::with_suffix(stem, ".raw"),
                       static_cast<std::size_t>(g.num_angles) * g.num_bins);
  return Sinogram(g, Image(g.num_angles, g.num_bins, std::move(v)),
                  j.value("transform", std::string("none")));
}

}  // namespace xdiff
