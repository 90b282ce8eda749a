#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <vector>

#include "xdiff/image.hpp"

namespace xdiff {

// Channel-major feature tensor (C, H, W).
struct FeatureMap {
  int channels = 0;
  int rows = 0;
  int cols = 0;
  Vec data;

  FeatureMap() = default;
  FeatureMap(int c, int r, int q, double fill = 0.0)
      : channels(c), rows(r), cols(q), data(static_cast<std::size_t>(c) * r * q, fill) {}

  double& at(int c, int r, int q) {
    return data[(static_cast<std::size_t>(c) * rows + r) * cols + q];
  }
  double at(int c, int r, int q) const {
    return data[(static_cast<std::size_t>(c) * rows + r) * cols + q];
  }
  bool same_shape(const FeatureMap& o) const {
    return channels == o.channels && rows == o.rows && cols == o.cols;
  }
  friend bool operator==(const FeatureMap&, const FeatureMap&) = default;
};

// Levels at 1/4, 1/8, 1/16 and 1/32 of the input side.
struct FeaturePyramid {
  std::array<FeatureMap, 4> levels;
  friend bool operator==(const FeaturePyramid&, const FeaturePyramid&) = default;
};

FeatureMap to_feature_map(const Image& img);
// (C, H, W) -> (C f^2, H/f, W/f); output channel c*f*f + dy*f + dx.
FeatureMap pixel_unshuffle(const FeatureMap& x, int factor);
FeatureMap pixel_unshuffle(const Image& img, int factor);
FeatureMap pixel_shuffle(const FeatureMap& x, int factor);

// Bias-free 3x3 convolution, zero padding 1.
struct Conv3x3 {
  int in = 0;
  int out = 0;
  int stride = 1;
  Vec weights;  // [out][in][3][3]

  FeatureMap apply(const FeatureMap& x) const;
};

struct ResidualBlock {
  Conv3x3 a;
  Conv3x3 b;
};

struct ConvStage {
  bool downsample = false;
  Conv3x3 down;
  std::array<ResidualBlock, 3> blocks;
};

// Frozen seeded encoder from an image produced by the reconstruction operator.
class CdsmEncoder {
 public:
  explicit CdsmEncoder(std::uint64_t seed, int channels = 16, bool linear_mode = false);

  FeaturePyramid features(const Image& image) const;
  int channels() const { return channels_; }
  bool linear_mode() const { return linear_; }

 private:
  FeatureMap run_stage(const ConvStage& s, FeatureMap x) const;

  int channels_;
  bool linear_;
  Conv3x3 stem_;
  std::array<ConvStage, 4> stages_;
};

// Elementwise sum per level.
FeaturePyramid fuse(const FeaturePyramid& encoder_features, const FeaturePyramid& pyramid);

// Global average per channel per level, concatenated level 1 first.
Vec pool_pyramid(const FeaturePyramid& p);

void dump_pyramid(const std::filesystem::path& dir, const FeaturePyramid& p);

}  // namespace xdiff
