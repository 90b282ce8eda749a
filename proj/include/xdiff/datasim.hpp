#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "json.hpp"
#include "xdiff/image.hpp"
#include "xdiff/projection.hpp"
#include "xdiff/rng.hpp"

namespace xdiff {

struct Range {
  double lo = 0.0;
  double hi = 0.0;
  double draw(Rng& rng) const;
};

struct IntRange {
  int lo = 0;
  int hi = 0;
  int draw(Rng& rng) const;
};

enum class EllipseRole { body, liver, extra, lesion };

// Centre and semi-axes in pixels relative to the image centre. Angle in radians.
struct EllipseSpec {
  double cx = 0.0;
  double cy = 0.0;
  double ax = 1.0;
  double ay = 1.0;
  double angle = 0.0;
  double activity = 0.0;
  EllipseRole role = EllipseRole::extra;
};

// Sizes are fractions of half the image side unless noted. Activities are in SUV units.
struct PhantomSpec {
  int image_size = 128;
  Range body_ax{0.62, 0.78};
  Range body_ay{0.48, 0.62};
  Range body_activity{0.8, 1.2};
  Range liver_scale{0.32, 0.42};
  Range liver_activity{1.0, 1.6};
  IntRange extra_count{1, 3};
  Range extra_axis{0.06, 0.16};
  Range extra_activity{-0.5, 1.5};
  IntRange lesion_count{1, 3};
  Range lesion_radius_px{2.5, 5.0};
  Range lesion_activity{2.5, 7.0};
  double edge_px = 1.5;

  void validate() const;
};

struct Phantom {
  Image image;
  Mask lesion_mask;
  Mask liver_mask;
  Mask body_mask;
  std::vector<EllipseSpec> ellipses;
};

Phantom generate_phantom(std::uint64_t seed, const PhantomSpec& spec);

struct MetaInfo {
  double weight_kg = 70.0;
  double height_m = 1.7;
  double injected_dose_mbq = 250.0;
  double drf = 1.0;
  double suv_max = 1.0;
  double suv_mean = 0.5;

  void validate() const;
  nlohmann::json to_json() const;
  static MetaInfo from_json(const nlohmann::json& j);
  friend bool operator==(const MetaInfo&, const MetaInfo&) = default;
};

struct SuvStats {
  double suv_max = 0.0;
  double suv_mean = 0.0;
};

// SUV = activity * weight / dose, reduced over the mask.
SuvStats compute_suv(const Image& activity, const Mask& mask, const MetaInfo& meta);
Image to_suv(const Image& activity, const MetaInfo& meta);
Mask full_mask(int rows, int cols);

std::string render_prompt(const MetaInfo& meta);
MetaInfo parse_prompt(const std::string& text);
// Rounds every field to template precision, so that parse(render(m)) == m.
MetaInfo quantize(const MetaInfo& meta);

struct Acquisition {
  Sinogram expected;  // noise-free counts
  Sinogram full;
  Sinogram low;
  double counts_scale = 0.0;  // counts per unit of radon(image)
};

Acquisition simulate_acquisition(const Phantom& p, const Geometry& g, double total_counts,
                                 double drf, std::uint64_t seed);
// Expectation mode: full and low equal the expected counts.
Acquisition simulate_acquisition_expected(const Phantom& p, const Geometry& g,
                                          double total_counts, double drf);

struct CaseConfig {
  Geometry geometry = Geometry::covering(128, 180);
  PhantomSpec phantom;
  double kappa = 40.0;  // full-dose counts per unit activity mass
  double drf = 10.0;
};

// One synthetic slice. Activity in the phantom image; meta carries full-dose SUV statistics.
struct Case {
  std::string id;
  std::uint64_t seed = 0;
  Phantom phantom;
  MetaInfo meta;
  Acquisition acq;
};

// Without acquisition only the phantom and meta are filled.
Case generate_case(std::uint64_t seed, const CaseConfig& cfg, const std::string& id,
                   bool with_acquisition = true);
// Patient record only; SUV fields left at zero.
MetaInfo draw_patient(Rng& rng, double drf);

struct ManifestRow {
  std::string id;
  std::string path;
  double drf = 1.0;
  std::uint64_t seed = 0;
};

void save_case(const std::filesystem::path& dir, const Case& c);
Case load_case(const std::filesystem::path& dir, const std::string& id);
void write_manifest(const std::filesystem::path& path, const std::vector<ManifestRow>& rows);
std::vector<ManifestRow> read_manifest(const std::filesystem::path& path);

}  // namespace xdiff
