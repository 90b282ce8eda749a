#pragma once

#include <filesystem>
#include <string>
#include <vector>

#include "json.hpp"
#include "xdiff/image.hpp"
#include "xdiff/rng.hpp"

namespace xdiff {

struct Geometry {
  int image_size = 128;
  int num_angles = 180;
  int num_bins = 182;
  double bin_spacing = 1.0;

  // Throws InvalidArgument unless the detector covers the image diagonal.
  void validate() const;
  double angle(int a) const;
  double bin_position(int b) const;

  static Geometry covering(int image_size, int num_angles, double bin_spacing = 1.0);

  nlohmann::json to_json() const;
  static Geometry from_json(const nlohmann::json& j);
  friend bool operator==(const Geometry&, const Geometry&) = default;
};

struct Sinogram {
  Geometry geometry;
  Image data;  // num_angles x num_bins
  std::string transform = "none";  // "none" or "log1p"

  Sinogram() = default;
  Sinogram(Geometry g, Image d, std::string transform = "none");
  static Sinogram zeros(const Geometry& g);
};

// Line integrals with bilinear interpolation and ray samples every 0.5 px.
Sinogram radon(const Image& image, const Geometry& g);

// Transpose of radon (same ray sampling, scattered). Unfiltered.
Image backproject(const Sinogram& s);

struct FbpOptions {
  bool hann = false;
  bool clamp_negative = false;
};

// Ram-Lak filtered back-projection with linear interpolation across bins.
Image fbp(const Sinogram& s, const FbpOptions& opt = {});
// Ramp-filtered sinogram rows (the first half of fbp).
Image ramp_filter(const Sinogram& s, bool hann = false);

// Expectation mode: returns the input unchanged.
Sinogram thin_counts(const Sinogram& s, double drf);
// Poisson(data / drf) * drf per bin.
Sinogram thin_counts(const Sinogram& s, double drf, Rng& rng);
Sinogram poisson_realize(const Sinogram& s, Rng& rng);

struct SinoBump {
  int angle = 0;
  int bin = 0;
  double amplitude = 1.0;
};

// Pixels whose |fbp change| exceeds rel_threshold times the peak change.
Mask perturbation_support(const Geometry& g, const std::vector<SinoBump>& bumps,
                          double rel_threshold = 1e-6);
double perturbation_footprint(const Sinogram& s, const std::vector<SinoBump>& bumps,
                              double rel_threshold = 1e-6);

Sinogram log1p_transform(const Sinogram& s);
Sinogram expm1_transform(const Sinogram& s);

void save_sinogram(const std::filesystem::path& stem, const Sinogram& s);
Sinogram load_sinogram(const std::filesystem::path& stem);

}  // namespace xdiff
