#pragma once

#include <filesystem>
#include <string>
#include <vector>

#include "json.hpp"
#include "xdiff/datasim.hpp"
#include "xdiff/image.hpp"

namespace xdiff {

double mse(const Image& a, const Image& b);
// +infinity when the images are identical.
double psnr(const Image& a, const Image& reference, double peak);
// Peak taken as the reference maximum.
double psnr(const Image& a, const Image& reference);

struct SsimOptions {
  int window = 11;
  double sigma = 1.5;
  double k1 = 0.01;
  double k2 = 0.03;
};

// Mean local SSIM over all full windows.
double ssim(const Image& a, const Image& b, double dynamic_range, const SsimOptions& opt = {});

double tbr(double suv_mean_lesion, double suv_mean_liver);
double cr(double suv_max_lesion, double suv_mean_liver);

struct SuvDelta {
  double delta_max = 0.0;
  double delta_mean = 0.0;
};

SuvDelta delta_suv(const Image& recon, const Image& reference, const Mask& lesion_mask,
                   const MetaInfo& meta);

struct BlandAltman {
  double mean_diff = 0.0;
  double loa_low = 0.0;
  double loa_high = 0.0;
};

// Differences recon - reference; limits at mean +- 1.96 sample std.
BlandAltman bland_altman(const Image& recon, const Image& reference);

struct MetricReport {
  std::string id;
  double psnr = 0.0;
  double ssim = 0.0;
  double mse = 0.0;
  double delta_suv_max = 0.0;
  double delta_suv_mean = 0.0;
  double tbr = 0.0;
  double cr = 0.0;
  BlandAltman bland_altman;
  bool has_lesion = false;
};

struct ReportOptions {
  double peak = 0.0;  // <= 0 uses the reference maximum
};

// Images in activity units; lesion and liver statistics in SUV via meta.
MetricReport evaluate(const std::string& id, const Image& recon, const Image& reference,
                      const Phantom& phantom, const MetaInfo& meta, const ReportOptions& opt = {});

std::string report_csv_header();
std::string report_csv_row(const MetricReport& r);
// Means and standard deviations across cases.
nlohmann::json report_summary(const std::vector<MetricReport>& reports);
void write_reports(const std::filesystem::path& csv, const std::filesystem::path& json,
                   const std::vector<MetricReport>& reports, const nlohmann::json& extra = {});

}  // namespace xdiff
