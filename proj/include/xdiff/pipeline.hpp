#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "xdiff/adapter.hpp"
#include "xdiff/cascade.hpp"
#include "xdiff/datasim.hpp"
#include "xdiff/guidance.hpp"
#include "xdiff/metrics.hpp"
#include "xdiff/mi_align.hpp"
#include "xdiff/sampler.hpp"

namespace xdiff {

namespace fs = std::filesystem;

struct DenoiserSettings {
  int buckets = 20;
  double lambda = 1e-3;
  int draws = 60;
  int pixels = 2000;
  int patch = 3;
  int spatial_patch = 5;
  bool film = false;

  nlohmann::json to_json() const;
  static DenoiserSettings from_json(const nlohmann::json& j, const DenoiserSettings& defaults);
};

struct RunConfig {
  fs::path train_dir = "data/train";
  fs::path eval_dir = "data/eval";
  fs::path model_dir = "models";
  fs::path output_dir = "out";

  int image_size = 128;
  int num_angles = 180;
  double drf = 10.0;
  double kappa = 40.0;

  int T = 100;
  int M = -1;  // < 0 resolves to T
  int N = -1;  // < 0 resolves to round(0.05 T)

  std::uint64_t master_seed = 1;
  std::uint64_t fit_seed = 1;
  std::uint64_t cdsm_seed = 7;

  GuidanceWeights guidance;
  double data_consistency = 0.0;  // weight of the sinogram residual gradient in SD1

  std::string ordering = "sd1-sd2";
  bool use_srm = true;
  std::string r_input = "restored";
  bool baseline_hann = false;
  bool clamp_output = true;

  DenoiserSettings srm{20, 1e-3, 40, 4000, 3, 3, false};
  DenoiserSettings sd1{20, 1e-3, 60, 2000, 3, 5, false};
  DenoiserSettings sd2{20, 1e-3, 60, 2000, 3, 0, true};

  DualEncoderConfig encoder{32, 4, 2, 1, 8, 64, 0.07, true, true, 1};
  AlignTrainOptions align;
  int align_pairs = 3000;
  int align_image_size = 64;
  std::string align_source = "phantom";

  int max_fit_cases = 0;  // 0 uses every case in train_dir
  int max_eval_cases = 0;
  std::vector<int> sweep_N;  // empty resolves to {0, T/20, T/10, T/4, T/2}

  int resolved_M() const { return M < 0 ? T : M; }
  int resolved_N() const;
  std::vector<int> resolved_sweep() const;
  Geometry geometry() const { return Geometry::covering(image_size, num_angles); }
  NoiseSchedule schedule() const { return NoiseSchedule::desk_schedule(T); }
  CaseConfig case_config() const;

  void validate() const;
  nlohmann::json to_json() const;
  static RunConfig from_json(const nlohmann::json& j);
  static RunConfig load(const fs::path& path);
};

// Applies "a.b.c=value" with value parsed as JSON (bare strings allowed).
void apply_override(nlohmann::json& j, const std::string& assignment);

// Writes count cases and manifest.csv under dir.
std::vector<ManifestRow> generate_dataset(const fs::path& dir, int count, std::uint64_t seed,
                                          const CaseConfig& cfg);
std::vector<Case> load_dataset(const fs::path& dir, int max_cases = 0);

struct ModelBundle {
  NoiseSchedule schedule = NoiseSchedule::desk_schedule(100);
  Geometry geometry;
  LinearDenoiser srm, sd1, sd2;
  DualEncoder encoder;
  std::uint64_t cdsm_seed = 7;
  double suv_scale = 1.0;
  double sino_shift = 0.0;
  double sino_scale = 1.0;

  void save(const fs::path& dir) const;
  static ModelBundle load(const fs::path& dir);
  static std::vector<std::string> files();
};

struct FitReport {
  std::vector<double> srm_loss, sd1_loss, sd2_loss;  // per bucket, relative to the zero predictor
  double align_final_loss = 0.0;
};

ModelBundle fit_all(const std::vector<Case>& train, const RunConfig& cfg, FitReport* report = nullptr);

struct AuditEntry {
  std::string stage;
  std::string input_hash;
  std::string output_hash;
};

// Everything up to and including the first cascade stage.
struct FrontResult {
  Vec mi_feature;
  Vec guide;  // R(y0) in the diffusion domain
  FeaturePyramid pyramid;
  Vec first_stage;  // SD1 output, or SD2 output for the reversed ordering
  std::vector<AuditEntry> audit;
};

struct ReconResult {
  std::string id;
  Image recon;     // activity units
  Image baseline;  // FBP of the low-dose sinogram, activity units
  Image first_stage;
  MetricReport report;
  MetricReport baseline_report;
  std::vector<AuditEntry> audit;
};

class Pipeline {
 public:
  Pipeline(RunConfig cfg, ModelBundle models);

  const RunConfig& config() const { return cfg_; }
  const ModelBundle& models() const { return models_; }

  FrontResult front(const Case& c) const;
  ReconResult back(const Case& c, const FrontResult& f, int N) const;
  ReconResult reconstruct(const Case& c) const { return back(c, front(c), cfg_.resolved_N()); }

  Image baseline(const Case& c) const;
  // Diffusion-domain vector to activity image and back.
  Image to_activity(const Vec& x, const MetaInfo& m) const;
  Vec to_domain(const Image& activity, const MetaInfo& m) const;
  Vec restore_sinogram(const Case& c, Rng& rng) const;
  Vec guide_image(const Case& c, const Vec* restored) const;

 private:
  ConditioningBundle cond_sd1(const FrontResult& f) const;
  ConditioningBundle cond_sd2(const FrontResult& f) const;

  RunConfig cfg_;
  ModelBundle models_;
  CdsmEncoder cdsm_;
  NoiseSchedule s_;
};

Rng stage_rng(std::uint64_t master, const std::string& case_id, const std::string& stage);

struct BatchResult {
  std::vector<ReconResult> cases;
  nlohmann::json summary;
};

// Reconstructs every case, writes images, metrics and the run record under cfg.output_dir.
BatchResult run_reconstruct(const Pipeline& p, const std::vector<Case>& cases);
std::vector<SweepRow> run_sweep(const Pipeline& p, const std::vector<Case>& cases, const std::vector<int>& Ns);

struct OrderingRow {
  std::string id;
  double psnr_sd1_sd2 = 0.0, ssim_sd1_sd2 = 0.0;
  double psnr_sd2_sd1 = 0.0, ssim_sd2_sd1 = 0.0;
};
std::vector<OrderingRow> run_ordering_compare(const RunConfig& cfg, const ModelBundle& models,
                                              const std::vector<Case>& cases);

// JSON run record: resolved config, model hashes, audit, summary. No timestamps.
nlohmann::json run_record(const RunConfig& cfg, const fs::path& model_dir,
                          const std::vector<ReconResult>& results);

}  // namespace xdiff
