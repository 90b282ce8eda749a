#include "xdiff/adapter.hpp"

#include <cmath>

#include "xdiff/io.hpp"
#include "xdiff/rng.hpp"

namespace xdiff {
namespace {

Conv3x3 make_conv(int in, int out, int stride, double gain, Rng& rng) {
  Conv3x3 c;
  c.in = in;
  c.out = out;
  c.stride = stride;
  c.weights.resize(static_cast<std::size_t>(in) * out * 9);
  const double sd = gain * std::sqrt(2.0 / (9.0 * in));
  for (double& w : c.weights) w = sd * standard_normal(rng);
  return c;
}

void relu_inplace(FeatureMap& x) {
  for (double& v : x.data) v = v > 0.0 ? v : 0.0;
}

}  // namespace

FeatureMap to_feature_map(const Image& img) {
  FeatureMap f(1, img.rows(), img.cols());
  f.data = img.vec();
  return f;
}

FeatureMap pixel_unshuffle(const FeatureMap& x, int factor) {
  if (factor < 1 || x.rows % factor != 0 || x.cols % factor != 0) {
    throw ShapeError("pixel_unshuffle: size " + std::to_string(x.rows) + "x" +
                     std::to_string(x.cols) + " not divisible by " + std::to_string(factor));
  }
  const int f = factor;
  FeatureMap out(x.channels * f * f, x.rows / f, x.cols / f);
  for (int c = 0; c < x.channels; ++c)
    for (int r = 0; r < x.rows; ++r)
      for (int q = 0; q < x.cols; ++q) {
        out.at(c * f * f + (r % f) * f + (q % f), r / f, q / f) = x.at(c, r, q);
      }
  return out;
}

FeatureMap pixel_unshuffle(const Image& img, int factor) {
  return pixel_unshuffle(to_feature_map(img), factor);
}

FeatureMap pixel_shuffle(const FeatureMap& x, int factor) {
  const int f = factor;
  if (f < 1 || x.channels % (f * f) != 0) throw ShapeError("pixel_shuffle: channels not divisible");
  FeatureMap out(x.channels / (f * f), x.rows * f, x.cols * f);
  for (int c = 0; c < out.channels; ++c)
    for (int r = 0; r < out.rows; ++r)
      for (int q = 0; q < out.cols; ++q) {
        out.at(c, r, q) = x.at(c * f * f + (r % f) * f + (q % f), r / f, q / f);
      }
  return out;
}

FeatureMap Conv3x3::apply(const FeatureMap& x) const {
  if (x.channels != in) throw ShapeError("conv3x3: channel mismatch");
  const int R = (x.rows + stride - 1) / stride;
  const int C = (x.cols + stride - 1) / stride;
  FeatureMap y(out, R, C);
  for (int o = 0; o < out; ++o) {
    for (int i = 0; i < in; ++i) {
      const double* w = &weights[(static_cast<std::size_t>(o) * in + i) * 9];
      for (int r = 0; r < R; ++r) {
        for (int q = 0; q < C; ++q) {
          double s = 0.0;
          for (int dy = -1; dy <= 1; ++dy) {
            const int rr = r * stride + dy;
            if (rr < 0 || rr >= x.rows) continue;
            for (int dx = -1; dx <= 1; ++dx) {
              const int qq = q * stride + dx;
              if (qq < 0 || qq >= x.cols) continue;
              s += w[(dy + 1) * 3 + dx + 1] * x.at(i, rr, qq);
            }
          }
          y.at(o, r, q) += s;
        }
      }
    }
  }
  return y;
}

CdsmEncoder::CdsmEncoder(std::uint64_t seed, int channels, bool linear_mode)
    : channels_(channels), linear_(linear_mode) {
  if (channels < 1) throw InvalidArgument("encoder needs at least one channel");
  Rng rng = make_rng(seed, "cdsm");
  stem_ = make_conv(16, channels, 1, 1.0, rng);
  for (int s = 0; s < 4; ++s) {
    ConvStage& st = stages_[s];
    st.downsample = s > 0;
    if (st.downsample) st.down = make_conv(channels, channels, 2, 1.0, rng);
    for (auto& b : st.blocks) {
      b.a = make_conv(channels, channels, 1, 1.0, rng);
      b.b = make_conv(channels, channels, 1, 0.3, rng);
    }
  }
}

FeatureMap CdsmEncoder::run_stage(const ConvStage& s, FeatureMap x) const {
  if (s.downsample) x = s.down.apply(x);
  for (const auto& b : s.blocks) {
    FeatureMap h = b.a.apply(x);
    if (!linear_) relu_inplace(h);
    const FeatureMap d = b.b.apply(h);
    for (std::size_t i = 0; i < x.data.size(); ++i) x.data[i] += d.data[i];
  }
  return x;
}

FeaturePyramid CdsmEncoder::features(const Image& image) const {
  if (image.rows() % 32 != 0 || image.cols() % 32 != 0 || image.empty()) {
    throw ShapeError("cdsm_features: side must be divisible by 32");
  }
  FeatureMap x = stem_.apply(pixel_unshuffle(image, 4));
  if (!linear_) relu_inplace(x);
  FeaturePyramid p;
  for (int s = 0; s < 4; ++s) {
    x = run_stage(stages_[s], std::move(x));
    p.levels[s] = x;
  }
  return p;
}

FeaturePyramid fuse(const FeaturePyramid& a, const FeaturePyramid& b) {
  FeaturePyramid out;
  for (int l = 0; l < 4; ++l) {
    if (!a.levels[l].same_shape(b.levels[l])) {
      throw ShapeError("fuse: level " + std::to_string(l + 1) + " shape mismatch");
    }
    out.levels[l] = a.levels[l];
    for (std::size_t i = 0; i < out.levels[l].data.size(); ++i) {
      out.levels[l].data[i] += b.levels[l].data[i];
    }
  }
  return out;
}

Vec pool_pyramid(const FeaturePyramid& p) {
  Vec out;
  for (const auto& lv : p.levels) {
    const std::size_t hw = static_cast<std::size_t>(lv.rows) * lv.cols;
    for (int c = 0; c < lv.channels; ++c) {
      double s = 0.0;
      for (std::size_t i = 0; i < hw; ++i) s += lv.data[c * hw + i];
      out.push_back(hw ? s / static_cast<double>(hw) : 0.0);
    }
  }
  return out;
}

void dump_pyramid(const std::filesystem::path& dir, const FeaturePyramid& p) {
  nlohmann::json manifest = nlohmann::json::array();
  for (int l = 0; l < 4; ++l) {
    const auto& lv = p.levels[l];
    const std::string name = "level" + std::to_string(l + 1) + ".raw";
    io::write_f32(dir / name, lv.data);
    manifest.push_back({{"level", l + 1}, {"file", name}, {"channels", lv.channels},
                        {"rows", lv.rows}, {"cols", lv.cols}, {"dtype", "float32"}});
  }
  io::write_json(dir / "pyramid.json", {{"levels", manifest}});
}

}  // namespace xdiff
