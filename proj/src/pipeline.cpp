#include "xdiff/pipeline.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <iomanip>
#include <sstream>

#include "xdiff/io.hpp"
#include "xdiff/projection.hpp"

namespace xdiff {

namespace {

template <class T>
void read_field(const nlohmann::json& j, const char* key, T& out) {
  if (j.contains(key)) out = j.at(key).get<T>();
}

std::string hash_values(std::span<const double> v) {
  std::string bytes(v.size() * sizeof(float), '\0');
  for (std::size_t i = 0; i < v.size(); ++i) {
    const float f = static_cast<float>(v[i]);
    std::memcpy(bytes.data() + i * sizeof(float), &f, sizeof(float));
  }
  return io::git_blob_hash(bytes);
}

Vec image_vec(const Image& img) { return img.vec(); }

FeaturePyramid scaled(const FeaturePyramid& p, double k) {
  FeaturePyramid out = p;
  for (auto& lvl : out.levels) {
    for (double& v : lvl.data) v *= k;
  }
  return out;
}

Vec scaled(const Vec& v, double k) {
  Vec out = v;
  for (double& x : out) x *= k;
  return out;
}

DenoiserLayout patch_layout(const DenoiserSettings& d, int rows, int cols, int global_dim, bool spatial) {
  DenoiserLayout l;
  l.mode = DenoiserLayout::Mode::patch;
  l.rows = rows;
  l.cols = cols;
  l.patch = d.patch;
  l.spatial_patch = spatial ? d.spatial_patch : 0;
  l.global_dim = global_dim;
  l.film = d.film && global_dim > 0;
  l.standardize = true;
  return l;
}

FitOptions fit_options(const DenoiserSettings& d, std::uint64_t seed) {
  FitOptions o;
  o.buckets = d.buckets;
  o.lambda = d.lambda;
  o.draws_per_bucket = d.draws;
  o.pixels_per_draw = d.pixels;
  o.seed = seed;
  return o;
}

std::vector<double> relative_loss(const LinearDenoiser& m) {
  std::vector<double> out;
  for (int b = 0; b < m.buckets(); ++b) {
    out.push_back(m.bucket_baseline(b) > 0 ? m.bucket_loss(b) / m.bucket_baseline(b) : 0.0);
  }
  return out;
}

}  // namespace

nlohmann::json DenoiserSettings::to_json() const {
  return {{"buckets", buckets}, {"lambda", lambda}, {"draws", draws}, {"pixels", pixels},
          {"patch", patch}, {"spatial_patch", spatial_patch}, {"film", film}};
}

DenoiserSettings DenoiserSettings::from_json(const nlohmann::json& j, const DenoiserSettings& defaults) {
  DenoiserSettings d = defaults;
  read_field(j, "buckets", d.buckets);
  read_field(j, "lambda", d.lambda);
  read_field(j, "draws", d.draws);
  read_field(j, "pixels", d.pixels);
  read_field(j, "patch", d.patch);
  read_field(j, "spatial_patch", d.spatial_patch);
  read_field(j, "film", d.film);
  return d;
}

int RunConfig::resolved_N() const {
  return N < 0 ? static_cast<int>(std::lround(0.05 * T)) : N;
}

std::vector<int> RunConfig::resolved_sweep() const {
  if (!sweep_N.empty()) return sweep_N;
  return {0, T / 20, T / 10, T / 4, T / 2};
}

CaseConfig RunConfig::case_config() const {
  CaseConfig c;
  c.geometry = geometry();
  c.phantom.image_size = image_size;
  c.kappa = kappa;
  c.drf = drf;
  return c;
}

void RunConfig::validate() const {
  if (image_size < 32 || image_size % 32 != 0) throw ConfigError("image_size must be a positive multiple of 32");
  if (num_angles < 1) throw ConfigError("num_angles must be positive");
  if (!(drf >= 1.0)) throw ConfigError("drf must be >= 1");
  if (!(kappa > 0.0)) throw ConfigError("kappa must be positive");
  if (T < 1) throw ConfigError("T must be positive");
  if (resolved_M() > T) throw ConfigError("M must not exceed T");
  if (resolved_N() > T) throw ConfigError("N must not exceed T");
  if (M == 0) throw ConfigError("M must be positive");
  for (int n : resolved_sweep()) {
    if (n < 0 || n > T) throw ConfigError("sweep N values must lie in [0, T]");
  }
  if (ordering != "sd1-sd2" && ordering != "sd2-sd1") throw ConfigError("ordering must be sd1-sd2 or sd2-sd1");
  if (r_input != "restored" && r_input != "raw") throw ConfigError("r_input must be restored or raw");
  if (!(data_consistency >= 0.0)) throw ConfigError("data_consistency must be >= 0");
  guidance.validate();
  encoder.validate();
  for (const auto* d : {&srm, &sd1, &sd2}) {
    if (d->buckets < 1 || d->buckets > T) throw ConfigError("denoiser buckets must lie in [1, T]");
    if (d->patch < 1 || d->patch % 2 == 0 || d->spatial_patch < 0 ||
        (d->spatial_patch > 0 && d->spatial_patch % 2 == 0)) {
      throw ConfigError("denoiser patch sides must be odd");
    }
    if (d->draws < 1 || d->pixels < 0 || !(d->lambda >= 0.0)) throw ConfigError("invalid denoiser fit budget");
  }
  if (align_pairs < 2 || align_image_size % encoder.image_size != 0) {
    throw ConfigError("align_image_size must be a multiple of encoder.image_size");
  }
  align_source_from_string(align_source);
}

nlohmann::json RunConfig::to_json() const {
  nlohmann::json a{{"epochs", align.epochs}, {"batch", align.batch}, {"lr", align.lr},
                   {"lora", align.lora}, {"min_tau", align.min_tau}, {"seed", align.seed}};
  return {{"train_dir", train_dir.string()},
          {"eval_dir", eval_dir.string()},
          {"model_dir", model_dir.string()},
          {"output_dir", output_dir.string()},
          {"image_size", image_size},
          {"num_angles", num_angles},
          {"drf", drf},
          {"kappa", kappa},
          {"T", T},
          {"M", resolved_M()},
          {"N", resolved_N()},
          {"seeds", {{"master", master_seed}, {"fit", fit_seed}, {"cdsm", cdsm_seed}}},
          {"guidance", guidance.to_json()},
          {"data_consistency", data_consistency},
          {"ordering", ordering},
          {"use_srm", use_srm},
          {"r_input", r_input},
          {"baseline_hann", baseline_hann},
          {"clamp_output", clamp_output},
          {"srm", srm.to_json()},
          {"sd1", sd1.to_json()},
          {"sd2", sd2.to_json()},
          {"encoder", encoder.to_json()},
          {"align", a},
          {"align_pairs", align_pairs},
          {"align_image_size", align_image_size},
          {"align_source", align_source},
          {"max_fit_cases", max_fit_cases},
          {"max_eval_cases", max_eval_cases},
          {"sweep_N", resolved_sweep()}};
}

RunConfig RunConfig::from_json(const nlohmann::json& j) {
  RunConfig c;
  try {
    if (!j.is_object()) throw ConfigError("run config must be a JSON object");
    std::string s;
    if (j.contains("train_dir")) c.train_dir = j.at("train_dir").get<std::string>();
    if (j.contains("eval_dir")) c.eval_dir = j.at("eval_dir").get<std::string>();
    if (j.contains("model_dir")) c.model_dir = j.at("model_dir").get<std::string>();
    if (j.contains("output_dir")) c.output_dir = j.at("output_dir").get<std::string>();
    read_field(j, "image_size", c.image_size);
    read_field(j, "num_angles", c.num_angles);
    read_field(j, "drf", c.drf);
    read_field(j, "kappa", c.kappa);
    read_field(j, "T", c.T);
    read_field(j, "M", c.M);
    read_field(j, "N", c.N);
    if (j.contains("seeds")) {
      const auto& sd = j.at("seeds");
      read_field(sd, "master", c.master_seed);
      read_field(sd, "fit", c.fit_seed);
      read_field(sd, "cdsm", c.cdsm_seed);
    }
    if (j.contains("guidance")) c.guidance = GuidanceWeights::from_json(j.at("guidance"));
    read_field(j, "data_consistency", c.data_consistency);
    read_field(j, "ordering", c.ordering);
    read_field(j, "use_srm", c.use_srm);
    read_field(j, "r_input", c.r_input);
    read_field(j, "baseline_hann", c.baseline_hann);
    read_field(j, "clamp_output", c.clamp_output);
    if (j.contains("srm")) c.srm = DenoiserSettings::from_json(j.at("srm"), c.srm);
    if (j.contains("sd1")) c.sd1 = DenoiserSettings::from_json(j.at("sd1"), c.sd1);
    if (j.contains("sd2")) c.sd2 = DenoiserSettings::from_json(j.at("sd2"), c.sd2);
    if (j.contains("encoder")) {
      nlohmann::json e = c.encoder.to_json();
      e.update(j.at("encoder"));
      c.encoder = DualEncoderConfig::from_json(e);
    }
    if (j.contains("align")) {
      const auto& a = j.at("align");
      read_field(a, "epochs", c.align.epochs);
      read_field(a, "batch", c.align.batch);
      read_field(a, "lr", c.align.lr);
      read_field(a, "lora", c.align.lora);
      read_field(a, "min_tau", c.align.min_tau);
      read_field(a, "seed", c.align.seed);
    }
    read_field(j, "align_pairs", c.align_pairs);
    read_field(j, "align_image_size", c.align_image_size);
    read_field(j, "align_source", c.align_source);
    read_field(j, "max_fit_cases", c.max_fit_cases);
    read_field(j, "max_eval_cases", c.max_eval_cases);
    read_field(j, "sweep_N", c.sweep_N);
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("run config: ") + e.what());
  }
  c.validate();
  return c;
}

RunConfig RunConfig::load(const fs::path& path) {
  nlohmann::json j;
  try {
    j = io::read_json(path);
  } catch (const IoError&) {
    throw;
  } catch (const std::exception& e) {
    throw ConfigError("cannot parse config " + path.string() + ": " + e.what());
  }
  return from_json(j);
}

void apply_override(nlohmann::json& j, const std::string& assignment) {
  const auto eq = assignment.find('=');
  if (eq == std::string::npos || eq == 0) throw ConfigError("override '" + assignment + "' is not key=value");
  const std::string key = assignment.substr(0, eq), raw = assignment.substr(eq + 1);
  nlohmann::json value;
  try {
    value = nlohmann::json::parse(raw);
  } catch (const nlohmann::json::exception&) {
    value = raw;
  }
  nlohmann::json* node = &j;
  std::size_t start = 0;
  while (true) {
    const auto dot = key.find('.', start);
    const std::string part = key.substr(start, dot - start);
    if (part.empty()) throw ConfigError("empty key segment in override '" + assignment + "'");
    if (dot == std::string::npos) {
      (*node)[part] = value;
      break;
    }
    node = &(*node)[part];
    if (!node->is_object()) *node = nlohmann::json::object();
    start = dot + 1;
  }
}

std::vector<ManifestRow> generate_dataset(const fs::path& dir, int count, std::uint64_t seed,
                                          const CaseConfig& cfg) {
  if (count < 1) throw InvalidArgument("dataset count must be positive");
  std::vector<ManifestRow> rows;
  for (int i = 0; i < count; ++i) {
    std::ostringstream id;
    id << "case" << std::setw(4) << std::setfill('0') << i;
    const std::uint64_t cs = substream_seed(seed, id.str());
    save_case(dir, generate_case(cs, cfg, id.str()));
    rows.push_back({id.str(), id.str(), cfg.drf, cs});
  }
  write_manifest(dir / "manifest.csv", rows);
  return rows;
}

std::vector<Case> load_dataset(const fs::path& dir, int max_cases) {
  const auto rows = read_manifest(dir / "manifest.csv");
  std::vector<Case> out;
  for (const auto& r : rows) {
    if (max_cases > 0 && static_cast<int>(out.size()) >= max_cases) break;
    out.push_back(load_case(dir, r.id));
  }
  if (out.empty()) throw InvalidArgument("dataset " + dir.string() + " has no cases");
  return out;
}

std::vector<std::string> ModelBundle::files() {
  return {"bundle.json", "srm.raw", "srm.json", "sd1.raw", "sd1.json", "sd2.raw", "sd2.json",
          "encoder.raw", "encoder.json"};
}

void ModelBundle::save(const fs::path& dir) const {
  srm.save(dir / "srm");
  sd1.save(dir / "sd1");
  sd2.save(dir / "sd2");
  encoder.save(dir / "encoder");
  io::write_json(dir / "bundle.json", {{"schedule", schedule.to_json()},
                                       {"geometry", geometry.to_json()},
                                       {"cdsm_seed", cdsm_seed},
                                       {"suv_scale", suv_scale},
                                       {"sino_shift", sino_shift},
                                       {"sino_scale", sino_scale}});
}

ModelBundle ModelBundle::load(const fs::path& dir) {
  ModelBundle b;
  const auto j = io::read_json(dir / "bundle.json");
  try {
    b.schedule = NoiseSchedule::from_json(j.at("schedule"));
    b.geometry = Geometry::from_json(j.at("geometry"));
    b.cdsm_seed = j.at("cdsm_seed").get<std::uint64_t>();
    b.suv_scale = j.at("suv_scale").get<double>();
    b.sino_shift = j.at("sino_shift").get<double>();
    b.sino_scale = j.at("sino_scale").get<double>();
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError("bundle.json: " + std::string(e.what()));
  }
  b.srm = LinearDenoiser::load(dir / "srm");
  b.sd1 = LinearDenoiser::load(dir / "sd1");
  b.sd2 = LinearDenoiser::load(dir / "sd2");
  b.encoder = DualEncoder::load(dir / "encoder");
  return b;
}

Rng stage_rng(std::uint64_t master, const std::string& case_id, const std::string& stage) {
  return make_rng(substream_seed(master, case_id), stage);
}

Pipeline::Pipeline(RunConfig cfg, ModelBundle models)
    : cfg_(std::move(cfg)), models_(std::move(models)), cdsm_(models_.cdsm_seed), s_(models_.schedule) {
  if (s_.T() != cfg_.T) throw ConfigError("model schedule T differs from the run config");
  if (!(models_.geometry == cfg_.geometry())) throw ConfigError("model geometry differs from the run config");
}

Image Pipeline::to_activity(const Vec& x, const MetaInfo& m) const {
  const int n = cfg_.image_size;
  Image out(n, n, x);
  const double k = models_.suv_scale * m.injected_dose_mbq / m.weight_kg;
  for (double& v : out.vec()) v *= k;
  return out;
}

Vec Pipeline::to_domain(const Image& activity, const MetaInfo& m) const {
  Vec out = activity.vec();
  const double k = m.weight_kg / (m.injected_dose_mbq * models_.suv_scale);
  for (double& v : out) v *= k;
  return out;
}

namespace {

Vec normalized_log(const Sinogram& s, double shift, double scale) {
  Vec out(s.data.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = (std::log1p(std::max(0.0, s.data.vec()[i])) - shift) / scale;
  return out;
}

}  // namespace

Vec Pipeline::restore_sinogram(const Case& c, Rng& rng) const {
  const Vec guide = normalized_log(c.acq.low, models_.sino_shift, models_.sino_scale);
  ConditioningBundle cond;
  cond.spatial = guide;
  const int M = cfg_.resolved_M();
  const Vec start = q_sample(s_, guide, M, normal_vector(guide.size(), rng));
  return sample(s_, models_.srm, start, M, rng, cond);
}

Vec Pipeline::guide_image(const Case& c, const Vec* restored) const {
  Sinogram counts = c.acq.low;
  if (restored) {
    for (std::size_t i = 0; i < restored->size(); ++i) {
      const double u = std::min(50.0, (*restored)[i] * models_.sino_scale + models_.sino_shift);
      counts.data.vec()[i] = std::max(0.0, std::expm1(u));
    }
  }
  Image act = fbp(counts);
  const double k = 1.0 / c.acq.counts_scale;
  for (double& v : act.vec()) v *= k;
  return to_domain(act, c.meta);
}

Image Pipeline::baseline(const Case& c) const {
  FbpOptions opt;
  opt.hann = cfg_.baseline_hann;
  Image act = fbp(c.acq.low, opt);
  const double k = 1.0 / c.acq.counts_scale;
  for (double& v : act.vec()) v *= k;
  return act;
}

ConditioningBundle Pipeline::cond_sd1(const FrontResult& f) const {
  ConditioningBundle b;
  b.spatial = scaled(f.guide, cfg_.guidance.lq);
  b.pyramid = scaled(f.pyramid, cfg_.guidance.y);
  return b;
}

ConditioningBundle Pipeline::cond_sd2(const FrontResult& f) const {
  ConditioningBundle b;
  b.mi_feature = scaled(f.mi_feature, cfg_.guidance.m);
  return b;
}

FrontResult Pipeline::front(const Case& c) const {
  if (c.acq.low.geometry != models_.geometry) throw ShapeError("case " + c.id + " geometry differs from models");
  FrontResult f;
  const std::string prompt = render_prompt(c.meta);
  const Eigen::VectorXd mi = models_.encoder.encode_prompt(prompt);
  f.mi_feature.assign(mi.data(), mi.data() + mi.size());
  f.audit.push_back({"mi_encoder", io::git_blob_hash(prompt), hash_values(f.mi_feature)});

  std::optional<Vec> restored;
  if (cfg_.use_srm) {
    Rng rng = stage_rng(cfg_.master_seed, c.id, "srm");
    restored = restore_sinogram(c, rng);
    f.audit.push_back({"srm", hash_values(c.acq.low.data.vec()), hash_values(*restored)});
  }
  const bool use_restored = restored && cfg_.r_input == "restored";
  f.guide = guide_image(c, use_restored ? &*restored : nullptr);
  f.audit.push_back({"reconstruction_operator",
                     use_restored ? hash_values(*restored) : hash_values(c.acq.low.data.vec()),
                     hash_values(f.guide)});

  const int n = cfg_.image_size;
  f.pyramid = cdsm_.features(Image(n, n, f.guide));
  f.audit.push_back({"cdsm", hash_values(f.guide), hash_values(pool_pyramid(f.pyramid))});

  const bool forward_order = cfg_.ordering == "sd1-sd2";
  Rng rng = stage_rng(cfg_.master_seed, c.id, forward_order ? "sd1" : "sd2");
  const Vec start = normal_vector(static_cast<std::size_t>(n) * n, rng);
  if (forward_order) {
    const ConditioningBundle cond = cond_sd1(f);
    if (cfg_.data_consistency > 0.0) {
      const double k = c.acq.counts_scale * models_.suv_scale * c.meta.injected_dose_mbq / c.meta.weight_kg;
      Sinogram y = c.acq.low;
      double mean = 0.0;
      for (double& v : y.data.vec()) {
        mean += v;
        v /= k;
      }
      mean /= static_cast<double>(y.data.size());
      const double sigma2 = std::max(1e-12, mean * cfg_.drf / (k * k));
      SinogramCondition dc(y, sigma2, s_, models_.sd1, cond);
      f.first_stage = guided_sample(s_, models_.sd1, start, s_.T(), {{&dc, cfg_.data_consistency}}, rng, cond);
    } else {
      f.first_stage = sample(s_, models_.sd1, start, s_.T(), rng, cond);
    }
    f.audit.push_back({"sd1", hash_values(f.guide), hash_values(f.first_stage)});
  } else {
    f.first_stage = sample(s_, models_.sd2, start, s_.T(), rng, cond_sd2(f));
    f.audit.push_back({"sd2", hash_values(f.mi_feature), hash_values(f.first_stage)});
  }
  return f;
}

ReconResult Pipeline::back(const Case& c, const FrontResult& f, int N) const {
  if (N < 0 || N > s_.T()) throw ConfigError("N = " + std::to_string(N) + " outside [0, T]");
  ReconResult r;
  r.id = c.id;
  r.audit = f.audit;
  const bool forward_order = cfg_.ordering == "sd1-sd2";
  Rng rs = stage_rng(cfg_.master_seed, c.id, "resample");
  const Vec xN = resample(s_, f.first_stage, N, rs);
  r.audit.push_back({"resample", hash_values(f.first_stage), hash_values(xN)});
  Vec x0 = xN;
  if (N > 0) {
    Rng rng = stage_rng(cfg_.master_seed, c.id, forward_order ? "sd2" : "sd1");
    x0 = forward_order ? sample(s_, models_.sd2, xN, N, rng, cond_sd2(f))
                       : sample(s_, models_.sd1, xN, N, rng, cond_sd1(f));
    r.audit.push_back({forward_order ? "sd2" : "sd1", hash_values(xN), hash_values(x0)});
  }
  r.first_stage = to_activity(f.first_stage, c.meta);
  r.recon = to_activity(x0, c.meta);
  if (cfg_.clamp_output) {
    for (double& v : r.recon.vec()) v = std::max(0.0, v);
    for (double& v : r.first_stage.vec()) v = std::max(0.0, v);
  }
  r.baseline = baseline(c);
  r.report = evaluate(c.id, r.recon, c.phantom.image, c.phantom, c.meta);
  r.baseline_report = evaluate(c.id, r.baseline, c.phantom.image, c.phantom, c.meta);
  return r;
}

ModelBundle fit_all(const std::vector<Case>& train, const RunConfig& cfg, FitReport* report) {
  if (train.empty()) throw InvalidArgument("fit_all: empty dataset");
  cfg.validate();
  ModelBundle b;
  b.schedule = cfg.schedule();
  b.geometry = cfg.geometry();
  b.cdsm_seed = cfg.cdsm_seed;
  const Geometry& g = b.geometry;
  for (const auto& c : train) {
    if (c.acq.full.geometry != g || c.phantom.image.rows() != cfg.image_size) {
      throw ShapeError("training case " + c.id + " does not match the configured geometry");
    }
  }

  double ls = 0.0, lq = 0.0, n = 0.0, suv_sq = 0.0, npx = 0.0;
  for (const auto& c : train) {
    for (double v : c.acq.full.data.vec()) {
      const double l = std::log1p(std::max(0.0, v));
      ls += l;
      lq += l * l;
      n += 1.0;
    }
    const double k = c.meta.weight_kg / c.meta.injected_dose_mbq;
    for (double v : c.phantom.image.vec()) {
      suv_sq += (v * k) * (v * k);
      npx += 1.0;
    }
  }
  b.sino_shift = ls / n;
  b.sino_scale = std::sqrt(std::max(1e-12, lq / n - b.sino_shift * b.sino_shift));
  b.suv_scale = std::sqrt(suv_sq / npx);

  std::vector<TrainingExample> srm_data;
  for (const auto& c : train) {
    TrainingExample ex;
    ex.x0 = normalized_log(c.acq.full, b.sino_shift, b.sino_scale);
    ex.cond.spatial = normalized_log(c.acq.low, b.sino_shift, b.sino_scale);
    srm_data.push_back(std::move(ex));
  }
  b.srm = fit_linear_denoiser(srm_data, b.schedule, patch_layout(cfg.srm, g.num_angles, g.num_bins, 0, true),
                              fit_options(cfg.srm, substream_seed(cfg.fit_seed, "srm")));
  srm_data.clear();

  // Encoder before SD2, the MI features feed its regressors.
  CaseConfig acfg;
  acfg.phantom.image_size = cfg.align_image_size;
  acfg.geometry = Geometry::covering(cfg.align_image_size, std::max(1, cfg.num_angles * cfg.align_image_size / cfg.image_size));
  acfg.kappa = cfg.kappa;
  acfg.drf = cfg.drf;
  const auto pairs = make_align_pairs(cfg.align_pairs, substream_seed(cfg.fit_seed, "align"), acfg,
                                      align_source_from_string(cfg.align_source));
  AlignTrainResult ar = train_dual_encoder(pairs, cfg.encoder, cfg.align);
  b.encoder = std::move(ar.encoder);

  RunConfig fcfg = cfg;
  fcfg.master_seed = substream_seed(cfg.fit_seed, "fit-chains");
  const Pipeline partial(fcfg, b);
  CdsmEncoder cdsm(b.cdsm_seed);
  std::vector<TrainingExample> sd1_data, sd2_data;
  for (const auto& c : train) {
    std::optional<Vec> restored;
    if (cfg.use_srm) {
      Rng rng = stage_rng(fcfg.master_seed, c.id, "srm");
      restored = partial.restore_sinogram(c, rng);
    }
    const bool use_restored = restored && cfg.r_input == "restored";
    const Vec guide = partial.guide_image(c, use_restored ? &*restored : nullptr);
    const Vec x0 = partial.to_domain(c.phantom.image, c.meta);
    TrainingExample e1;
    e1.x0 = x0;
    e1.cond.spatial = guide;
    e1.cond.pyramid = cdsm.features(Image(cfg.image_size, cfg.image_size, guide));
    sd1_data.push_back(std::move(e1));
    TrainingExample e2;
    e2.x0 = x0;
    const Eigen::VectorXd mi = b.encoder.encode_prompt(render_prompt(c.meta));
    e2.cond.mi_feature = Vec(mi.data(), mi.data() + mi.size());
    sd2_data.push_back(std::move(e2));
  }
  const int pooled = static_cast<int>(pool_pyramid(*sd1_data.front().cond.pyramid).size());
  b.sd1 = fit_linear_denoiser(sd1_data, b.schedule,
                              patch_layout(cfg.sd1, cfg.image_size, cfg.image_size, pooled, true),
                              fit_options(cfg.sd1, substream_seed(cfg.fit_seed, "sd1")));
  b.sd2 = fit_linear_denoiser(sd2_data, b.schedule,
                              patch_layout(cfg.sd2, cfg.image_size, cfg.image_size, cfg.encoder.dim, false),
                              fit_options(cfg.sd2, substream_seed(cfg.fit_seed, "sd2")));
  if (report) {
    report->srm_loss = relative_loss(b.srm);
    report->sd1_loss = relative_loss(b.sd1);
    report->sd2_loss = relative_loss(b.sd2);
    report->align_final_loss = ar.epoch_loss.empty() ? 0.0 : ar.epoch_loss.back();
  }
  return b;
}

nlohmann::json run_record(const RunConfig& cfg, const fs::path& model_dir,
                          const std::vector<ReconResult>& results) {
  nlohmann::json hashes = nlohmann::json::object();
  for (const auto& f : ModelBundle::files()) {
    const fs::path p = model_dir / f;
    hashes[f] = fs::exists(p) ? io::git_blob_hash_file(p) : "";
  }
  nlohmann::json cases = nlohmann::json::array();
  std::vector<MetricReport> ours, base;
  for (const auto& r : results) {
    nlohmann::json audit = nlohmann::json::array();
    for (const auto& a : r.audit) audit.push_back({{"stage", a.stage}, {"input", a.input_hash}, {"output", a.output_hash}});
    cases.push_back({{"id", r.id},
                     {"audit", audit},
                     {"recon_hash", hash_values(r.recon.vec())},
                     {"psnr", r.report.psnr},
                     {"ssim", r.report.ssim},
                     {"baseline_psnr", r.baseline_report.psnr},
                     {"baseline_ssim", r.baseline_report.ssim}});
    ours.push_back(r.report);
    base.push_back(r.baseline_report);
  }
  nlohmann::json j{{"config", cfg.to_json()}, {"model_hashes", hashes}, {"cases", cases}};
  if (!results.empty()) {
    j["summary"] = report_summary(ours);
    j["baseline_summary"] = report_summary(base);
  }
  return j;
}

BatchResult run_reconstruct(const Pipeline& p, const std::vector<Case>& cases) {
  BatchResult res;
  const auto& cfg = p.config();
  const fs::path out = cfg.output_dir;
  std::vector<MetricReport> ours, base;
  for (const auto& c : cases) {
    ReconResult r = p.reconstruct(c);
    io::save_image(out / "recon" / c.id, round_to_float(r.recon));
    io::save_image(out / "baseline" / c.id, round_to_float(r.baseline));
    io::write_pgm(out / "preview" / (c.id + ".pgm"), r.recon);
    ours.push_back(r.report);
    base.push_back(r.baseline_report);
    res.cases.push_back(std::move(r));
  }
  write_reports(out / "metrics.csv", out / "metrics.json", ours);
  write_reports(out / "baseline_metrics.csv", out / "baseline_metrics.json", base);
  const auto so = report_summary(ours), sb = report_summary(base);
  res.summary = {{"cases", cases.size()},
                 {"psnr", so.at("psnr").at("mean")},
                 {"ssim", so.at("ssim").at("mean")},
                 {"baseline_psnr", sb.at("psnr").at("mean")},
                 {"baseline_ssim", sb.at("ssim").at("mean")}};
  res.summary["psnr_gain"] = res.summary["psnr"].get<double>() - res.summary["baseline_psnr"].get<double>();
  res.summary["ssim_gain"] = res.summary["ssim"].get<double>() - res.summary["baseline_ssim"].get<double>();
  io::write_json(out / "run_record.json", run_record(cfg, cfg.model_dir, res.cases));
  return res;
}

std::vector<SweepRow> run_sweep(const Pipeline& p, const std::vector<Case>& cases, const std::vector<int>& Ns) {
  std::vector<FrontResult> fronts;
  for (const auto& c : cases) fronts.push_back(p.front(c));
  return empirical_quality_sweep(Ns, static_cast<int>(cases.size()), [&](int N, int i) {
    const ReconResult r = p.back(cases[i], fronts[i], N);
    return QualityScores{r.report.psnr, r.report.ssim, r.report.mse};
  });
}

std::vector<OrderingRow> run_ordering_compare(const RunConfig& cfg, const ModelBundle& models,
                                              const std::vector<Case>& cases) {
  RunConfig a = cfg, b = cfg;
  a.ordering = "sd1-sd2";
  b.ordering = "sd2-sd1";
  const Pipeline pa(a, models), pb(b, models);
  std::vector<OrderingRow> rows;
  for (const auto& c : cases) {
    const ReconResult ra = pa.reconstruct(c), rb = pb.reconstruct(c);
    rows.push_back({c.id, ra.report.psnr, ra.report.ssim, rb.report.psnr, rb.report.ssim});
  }
  return rows;
}

}  // namespace xdiff
