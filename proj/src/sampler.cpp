#include "xdiff/sampler.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>

#include "xdiff/io.hpp"

namespace xdiff {

Vec normal_vector(std::size_t n, Rng& rng) {
  Vec z(n);
  for (double& v : z) v = standard_normal(rng);
  return z;
}

Vec reverse_mean(const NoiseSchedule& s, std::span<const double> x_t, std::span<const double> eps,
                 int t) {
  if (t < 1 || t > s.T()) throw InvalidArgument("reverse step " + std::to_string(t) + " out of range");
  if (eps.size() != x_t.size()) throw ShapeError("noise prediction length differs from x_t");
  const double c = s.beta(t) / std::sqrt(1.0 - s.alpha_bar(t));
  const double inv = 1.0 / std::sqrt(s.alpha(t));
  Vec mu(x_t.size());
  for (std::size_t i = 0; i < mu.size(); ++i) mu[i] = (x_t[i] - c * eps[i]) * inv;
  return mu;
}

Vec reverse_step(const NoiseSchedule& s, const ScoreModel& model, std::span<const double> x_t,
                 int t, Rng& rng, const ConditioningBundle& cond) {
  if (t < 1 || t > s.T()) throw InvalidArgument("reverse step " + std::to_string(t) + " out of range");
  const Vec eps = model.predict_noise(x_t, t, cond);
  Vec x = reverse_mean(s, x_t, eps, t);
  if (t > 1) {
    const double sigma = std::sqrt(s.sigma2(t));
    for (double& v : x) v += sigma * standard_normal(rng);
  }
  return x;
}

Vec sample(const NoiseSchedule& s, const ScoreModel& model, std::span<const double> start,
           int t_start, Rng& rng, const ConditioningBundle& cond) {
  if (t_start < 0 || t_start > s.T()) throw InvalidArgument("t_start out of range");
  Vec x(start.begin(), start.end());
  for (int t = t_start; t >= 1; --t) x = reverse_step(s, model, x, t, rng, cond);
  return x;
}

Vec sample_from_noise(const NoiseSchedule& s, const ScoreModel& model, std::size_t dim, Rng& rng,
                      const ConditioningBundle& cond) {
  const Vec start = normal_vector(dim, rng);
  return sample(s, model, start, s.T(), rng, cond);
}

AnalyticGaussianScore::AnalyticGaussianScore(const NoiseSchedule& s,
                                             std::vector<GaussianComponent> comps)
    : s_(s), comps_(std::move(comps)) {
  if (comps_.empty()) throw InvalidArgument("mixture needs at least one component");
  double wsum = 0.0;
  const std::size_t d = comps_.front().mean.size();
  for (const auto& c : comps_) {
    if (c.mean.size() != d || c.var.size() != d) throw ShapeError("mixture component dimensions differ");
    if (!(c.weight > 0.0)) throw InvalidArgument("mixture weights must be positive");
    for (double v : c.var) {
      if (!(v > 0.0)) throw InvalidArgument("mixture variances must be positive");
    }
    wsum += c.weight;
  }
  if (std::abs(wsum - 1.0) > 1e-12) throw InvalidArgument("mixture weights must sum to 1");
}

std::vector<double> AnalyticGaussianScore::responsibilities(std::span<const double> x, int t,
                                                            double* log_norm) const {
  if (x.size() != dim()) throw ShapeError("analytic score: input length mismatch");
  const double ab = s_.alpha_bar(t);
  const double ra = std::sqrt(ab);
  std::vector<double> lw(comps_.size());
  for (std::size_t k = 0; k < comps_.size(); ++k) {
    const auto& c = comps_[k];
    double l = std::log(c.weight);
    for (std::size_t i = 0; i < x.size(); ++i) {
      const double v = ab * c.var[i] + (1.0 - ab);
      const double d = x[i] - ra * c.mean[i];
      l += -0.5 * (d * d / v + std::log(2.0 * std::numbers::pi * v));
    }
    lw[k] = l;
  }
  const double m = *std::max_element(lw.begin(), lw.end());
  double z = 0.0;
  for (double& l : lw) {
    l = std::exp(l - m);
    z += l;
  }
  for (double& l : lw) l /= z;
  if (log_norm) *log_norm = m + std::log(z);
  return lw;
}

double AnalyticGaussianScore::log_marginal(std::span<const double> x_t, int t) const {
  double ln = 0.0;
  responsibilities(x_t, t, &ln);
  return ln;
}

Vec AnalyticGaussianScore::score(std::span<const double> x, int t) const {
  const auto r = responsibilities(x, t);
  const double ab = s_.alpha_bar(t);
  const double ra = std::sqrt(ab);
  Vec out(x.size(), 0.0);
  for (std::size_t k = 0; k < comps_.size(); ++k) {
    const auto& c = comps_[k];
    for (std::size_t i = 0; i < x.size(); ++i) {
      out[i] -= r[k] * (x[i] - ra * c.mean[i]) / (ab * c.var[i] + (1.0 - ab));
    }
  }
  return out;
}

Eigen::MatrixXd AnalyticGaussianScore::score_jacobian(std::span<const double> x, int t) const {
  const auto r = responsibilities(x, t);
  const double ab = s_.alpha_bar(t);
  const double ra = std::sqrt(ab);
  const Eigen::Index d = static_cast<Eigen::Index>(x.size());
  Eigen::MatrixXd H = Eigen::MatrixXd::Zero(d, d);
  Eigen::VectorXd total = Eigen::VectorXd::Zero(d);
  for (std::size_t k = 0; k < comps_.size(); ++k) {
    const auto& c = comps_[k];
    Eigen::VectorXd sk(d);
    for (Eigen::Index i = 0; i < d; ++i) {
      const double v = ab * c.var[i] + (1.0 - ab);
      sk[i] = -(x[i] - ra * c.mean[i]) / v;
      H(i, i) -= r[k] / v;
    }
    H += r[k] * sk * sk.transpose();
    total += r[k] * sk;
  }
  H -= total * total.transpose();
  return H;
}

Vec AnalyticGaussianScore::predict_noise(std::span<const double> x_t, int t,
                                         const ConditioningBundle&) const {
  Vec sc = score(x_t, t);
  const double k = -std::sqrt(1.0 - s_.alpha_bar(t));
  for (double& v : sc) v *= k;
  return sc;
}

Vec AnalyticGaussianScore::tweedie_mean(std::span<const double> x_t, int t) const {
  const Vec sc = score(x_t, t);
  const double ab = s_.alpha_bar(t);
  Vec out(x_t.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = (x_t[i] + (1.0 - ab) * sc[i]) / std::sqrt(ab);
  return out;
}

Eigen::MatrixXd AnalyticGaussianScore::tweedie_cov(std::span<const double> x_t, int t) const {
  const double ab = s_.alpha_bar(t);
  Eigen::MatrixXd H = score_jacobian(x_t, t);
  const Eigen::Index d = H.rows();
  return (1.0 - ab) / ab * (Eigen::MatrixXd::Identity(d, d) + (1.0 - ab) * H);
}

Vec analytic_noise_prediction(const AnalyticGaussianScore& m, std::span<const double> x_t, int t) {
  return m.predict_noise(x_t, t, {});
}

int DenoiserLayout::feature_dim() const {
  if (mode == Mode::dense) {
    return data_dim() + (spatial_patch > 0 ? data_dim() : 0) + global_dim + 1;
  }
  return patch * patch + spatial_patch * spatial_patch + global_dim * (film ? 2 : 1) + 1;
}

nlohmann::json DenoiserLayout::to_json() const {
  return {{"mode", mode == Mode::dense ? "dense" : "patch"},
          {"rows", rows},
          {"cols", cols},
          {"patch", patch},
          {"spatial_patch", spatial_patch},
          {"global_dim", global_dim},
          {"film", film},
          {"standardize", standardize}};
}

DenoiserLayout DenoiserLayout::from_json(const nlohmann::json& j) {
  DenoiserLayout l;
  l.mode = j.at("mode").get<std::string>() == "dense" ? Mode::dense : Mode::patch;
  l.rows = j.at("rows");
  l.cols = j.at("cols");
  l.patch = j.at("patch");
  l.spatial_patch = j.at("spatial_patch");
  l.global_dim = j.at("global_dim");
  l.film = j.at("film");
  l.standardize = j.at("standardize");
  return l;
}

Vec global_regressors(const ConditioningBundle& cond) {
  Vec g;
  if (cond.pyramid) {
    const Vec p = pool_pyramid(*cond.pyramid);
    g.insert(g.end(), p.begin(), p.end());
  }
  if (cond.mi_feature) g.insert(g.end(), cond.mi_feature->begin(), cond.mi_feature->end());
  if (cond.extra_regressors) {
    g.insert(g.end(), cond.extra_regressors->begin(), cond.extra_regressors->end());
  }
  return g;
}

LinearDenoiser::LinearDenoiser(DenoiserLayout layout, const NoiseSchedule& s, int buckets,
                               double lambda)
    : layout_(layout), s_(s), lambda_(lambda) {
  if (buckets < 1 || buckets > s.T()) throw InvalidArgument("bucket count must be in [1, T]");
  if (lambda < 0.0) throw InvalidArgument("ridge lambda must be non-negative");
  if (layout.rows < 1 || layout.cols < 1) throw InvalidArgument("layout needs a positive shape");
  if (layout.mode == DenoiserLayout::Mode::patch &&
      (layout.patch < 1 || layout.patch % 2 == 0 || layout.spatial_patch < 0 ||
       (layout.spatial_patch > 0 && layout.spatial_patch % 2 == 0))) {
    throw InvalidArgument("patch sides must be odd");
  }
  const int out = layout.mode == DenoiserLayout::Mode::dense ? layout.data_dim() : 1;
  weights_.assign(buckets, Eigen::MatrixXd::Zero(out, layout.feature_dim()));
  loss_.assign(buckets, 1.0);
  baseline_.assign(buckets, 1.0);
  gmean_.assign(layout.global_dim, 0.0);
  gscale_.assign(layout.global_dim, 1.0);
}

int LinearDenoiser::bucket_of(int t) const {
  if (t < 1 || t > s_.T()) throw InvalidArgument("step out of range for denoiser");
  const int B = buckets();
  return std::min(B - 1, static_cast<int>((static_cast<long long>(t - 1) * B) / s_.T()));
}

double LinearDenoiser::bucket_sample_loss(int b) const {
  return loss_[b] * (layout_.mode == DenoiserLayout::Mode::dense ? layout_.data_dim() : 1);
}

double LinearDenoiser::bucket_sample_baseline(int b) const {
  return baseline_[b] * (layout_.mode == DenoiserLayout::Mode::dense ? layout_.data_dim() : 1);
}

void LinearDenoiser::set_standardization(Vec mean, Vec scale) {
  if (static_cast<int>(mean.size()) != layout_.global_dim ||
      static_cast<int>(scale.size()) != layout_.global_dim) {
    throw ShapeError("standardization length differs from global_dim");
  }
  gmean_ = std::move(mean);
  gscale_ = std::move(scale);
}

Eigen::MatrixXd LinearDenoiser::features(std::span<const double> x, const ConditioningBundle& cond,
                                         const std::vector<int>* pixels) const {
  const int d = layout_.data_dim();
  if (static_cast<int>(x.size()) != d) throw ShapeError("denoiser input length mismatch");
  Vec g = global_regressors(cond);
  if (static_cast<int>(g.size()) != layout_.global_dim) {
    throw ShapeError("global regressors have length " + std::to_string(g.size()) + ", expected " +
                     std::to_string(layout_.global_dim));
  }
  if (layout_.standardize) {
    for (std::size_t i = 0; i < g.size(); ++i) g[i] = (g[i] - gmean_[i]) / gscale_[i];
  }
  const bool need_spatial = layout_.spatial_patch > 0;
  if (need_spatial && (!cond.spatial || static_cast<int>(cond.spatial->size()) != d)) {
    throw ShapeError("denoiser expects a spatial guide of the data shape");
  }
  const int p = layout_.feature_dim();

  if (layout_.mode == DenoiserLayout::Mode::dense) {
    Eigen::MatrixXd phi(1, p);
    int k = 0;
    for (int i = 0; i < d; ++i) phi(0, k++) = x[i];
    if (need_spatial) {
      for (int i = 0; i < d; ++i) phi(0, k++) = (*cond.spatial)[i];
    }
    for (double v : g) phi(0, k++) = v;
    phi(0, k) = 1.0;
    return phi;
  }

  const int R = layout_.rows, C = layout_.cols;
  const int n = pixels ? static_cast<int>(pixels->size()) : d;
  Eigen::MatrixXd phi(n, p);
  const int h = layout_.patch / 2;
  const int hs = layout_.spatial_patch / 2;
  const int gd = layout_.global_dim;
  for (int row = 0; row < n; ++row) {
    const int pix = pixels ? (*pixels)[row] : row;
    const int r = pix / C, c = pix % C;
    int k = 0;
    for (int dy = -h; dy <= h; ++dy) {
      const int rr = std::clamp(r + dy, 0, R - 1);
      for (int dx = -h; dx <= h; ++dx) phi(row, k++) = x[rr * C + std::clamp(c + dx, 0, C - 1)];
    }
    if (need_spatial) {
      const auto& sp = *cond.spatial;
      for (int dy = -hs; dy <= hs; ++dy) {
        const int rr = std::clamp(r + dy, 0, R - 1);
        for (int dx = -hs; dx <= hs; ++dx) phi(row, k++) = sp[rr * C + std::clamp(c + dx, 0, C - 1)];
      }
    }
    for (int i = 0; i < gd; ++i) phi(row, k++) = g[i];
    if (layout_.film) {
      const double xc = x[pix];
      for (int i = 0; i < gd; ++i) phi(row, k++) = xc * g[i];
    }
    phi(row, k) = 1.0;
  }
  return phi;
}

Vec LinearDenoiser::predict_noise(std::span<const double> x_t, int t,
                                  const ConditioningBundle& cond) const {
  const Eigen::MatrixXd& W = weights_[bucket_of(t)];
  const Eigen::MatrixXd phi = features(x_t, cond);
  Vec out(x_t.size());
  if (layout_.mode == DenoiserLayout::Mode::dense) {
    Eigen::Map<Eigen::VectorXd>(out.data(), static_cast<Eigen::Index>(out.size())) =
        W * phi.row(0).transpose();
  } else {
    Eigen::Map<Eigen::VectorXd>(out.data(), static_cast<Eigen::Index>(out.size())) =
        phi * W.row(0).transpose();
  }
  return out;
}

void LinearDenoiser::fit_bucket(int b, const std::vector<TrainingTriple>& triples,
                                const std::vector<std::vector<int>>* pixels, bool keep_double) {
  if (b < 0 || b >= buckets()) throw InvalidArgument("bucket index out of range");
  if (triples.empty()) throw InvalidArgument("no training triples for bucket");
  const bool dense = layout_.mode == DenoiserLayout::Mode::dense;
  const int p = layout_.feature_dim();
  const int out = dense ? layout_.data_dim() : 1;
  Eigen::MatrixXd G = Eigen::MatrixXd::Zero(p, p);
  Eigen::MatrixXd Rm = Eigen::MatrixXd::Zero(p, out);
  double eps_sq = 0.0;
  double rows = 0.0;
  for (std::size_t k = 0; k < triples.size(); ++k) {
    const auto& tr = triples[k];
    const Vec x_t = q_sample(s_, tr.example->x0, tr.t, tr.eps);
    const std::vector<int>* px = pixels ? &(*pixels)[k] : nullptr;
    const Eigen::MatrixXd phi = features(x_t, tr.example->cond, px);
    Eigen::MatrixXd E(phi.rows(), out);
    if (dense) {
      for (int i = 0; i < out; ++i) E(0, i) = tr.eps[i];
    } else {
      for (Eigen::Index r = 0; r < phi.rows(); ++r) E(r, 0) = tr.eps[px ? (*px)[r] : r];
    }
    G.selfadjointView<Eigen::Lower>().rankUpdate(phi.transpose());
    Rm.noalias() += phi.transpose() * E;
    eps_sq += E.squaredNorm();
    rows += static_cast<double>(phi.rows());
  }
  G = G.selfadjointView<Eigen::Lower>();
  Eigen::MatrixXd A = G / rows;
  A.diagonal().array() += lambda_;
  Eigen::LDLT<Eigen::MatrixXd> ldlt(A);
  if (ldlt.info() != Eigen::Success || !(ldlt.rcond() > 1e-13)) {
    throw IllConditioned("normal equations are singular for bucket " + std::to_string(b) +
                         " (lambda " + std::to_string(lambda_) + ")");
  }
  // Rounded through float so the in-memory model equals its stored form.
  Eigen::MatrixXd W = ldlt.solve(Rm / rows).transpose();
  if (!keep_double) W = W.cast<float>().cast<double>();
  weights_[b] = W;
  const double elements = rows * out;
  const double cross = (W * Rm).trace();
  const double quad = (W * G * W.transpose()).trace();
  loss_[b] = std::max(0.0, (eps_sq - 2.0 * cross + quad) / elements);
  baseline_[b] = eps_sq / elements;
}

void LinearDenoiser::save(const std::filesystem::path& stem) const {
  Vec flat;
  nlohmann::json shapes = nlohmann::json::array();
  for (const auto& W : weights_) {
    shapes.push_back({W.rows(), W.cols()});
    for (Eigen::Index r = 0; r < W.rows(); ++r)
      for (Eigen::Index c = 0; c < W.cols(); ++c) flat.push_back(W(r, c));
  }
  io::write_f32(io::with_suffix(stem, ".raw"), flat);
  nlohmann::json j{{"buckets", buckets()},     {"lambda", lambda_},     {"dims", layout_.to_json()},
                   {"schedule", s_.to_json()}, {"shapes", shapes},      {"loss", loss_},
                   {"baseline", baseline_},    {"global_mean", gmean_}, {"global_scale", gscale_},
                   {"dtype", "float32"}};
  io::write_json(io::with_suffix(stem, ".json"), j);
}

LinearDenoiser LinearDenoiser::load(const std::filesystem::path& stem) {
  const auto j = io::read_json(io::with_suffix(stem, ".json"));
  try {
    LinearDenoiser m(DenoiserLayout::from_json(j.at("dims")), NoiseSchedule::from_json(j.at("schedule")),
                     j.at("buckets").get<int>(), j.at("lambda").get<double>());
    std::size_t total = 0;
    for (const auto& s : j.at("shapes")) total += s[0].get<std::size_t>() * s[1].get<std::size_t>();
    const Vec flat = io::read_f32(io::with_suffix(stem, ".raw"), total);
    std::size_t k = 0;
    for (auto& W : m.weights_) {
      for (Eigen::Index r = 0; r < W.rows(); ++r)
        for (Eigen::Index c = 0; c < W.cols(); ++c) W(r, c) = flat[k++];
    }
    if (k != total) throw IoError(stem.string() + ": weight shapes disagree with layout");
    m.loss_ = j.at("loss").get<Vec>();
    m.baseline_ = j.at("baseline").get<Vec>();
    m.gmean_ = j.at("global_mean").get<Vec>();
    m.gscale_ = j.at("global_scale").get<Vec>();
    return m;
  } catch (const nlohmann::json::exception& e) {
    throw IoError(stem.string() + ": bad denoiser header: " + e.what());
  }
}

LinearDenoiser fit_linear_denoiser(const std::vector<TrainingExample>& data, const NoiseSchedule& s,
                                   const DenoiserLayout& layout, const FitOptions& opt) {
  if (data.empty()) throw InvalidArgument("fit_linear_denoiser: empty dataset");
  LinearDenoiser m(layout, s, opt.buckets, opt.lambda);
  const int gd = layout.global_dim;
  if (layout.standardize && gd > 0) {
    Vec mean(gd, 0.0), sq(gd, 0.0);
    for (const auto& ex : data) {
      const Vec g = global_regressors(ex.cond);
      if (static_cast<int>(g.size()) != gd) throw ShapeError("global regressor length mismatch");
      for (int i = 0; i < gd; ++i) {
        mean[i] += g[i];
        sq[i] += g[i] * g[i];
      }
    }
    Vec scale(gd);
    const double n = static_cast<double>(data.size());
    for (int i = 0; i < gd; ++i) {
      mean[i] /= n;
      const double var = sq[i] / n - mean[i] * mean[i];
      scale[i] = var > 1e-20 ? std::sqrt(var) : 1.0;
    }
    m.set_standardization(mean, scale);
  }
  const int d = layout.data_dim();
  const bool subsample = layout.mode == DenoiserLayout::Mode::patch && opt.pixels_per_draw > 0;
  for (int b = 0; b < opt.buckets; ++b) {
    int lo = 0, hi = 0;
    for (int t = 1; t <= s.T(); ++t) {
      if (m.bucket_of(t) == b) {
        if (lo == 0) lo = t;
        hi = t;
      }
    }
    Rng rng = make_rng(substream_seed(opt.seed, "bucket" + std::to_string(b)));
    std::vector<TrainingTriple> triples(opt.draws_per_bucket);
    std::vector<std::vector<int>> pixels;
    if (subsample) pixels.resize(opt.draws_per_bucket);
    for (int k = 0; k < opt.draws_per_bucket; ++k) {
      auto& tr = triples[k];
      tr.example = &data[rng() % data.size()];
      tr.t = lo + static_cast<int>(rng() % static_cast<std::uint64_t>(hi - lo + 1));
      tr.eps = normal_vector(static_cast<std::size_t>(d), rng);
      if (subsample) {
        pixels[k].resize(opt.pixels_per_draw);
        for (int& px : pixels[k]) px = static_cast<int>(rng() % static_cast<std::uint64_t>(d));
      }
    }
    m.fit_bucket(b, triples, subsample ? &pixels : nullptr);
  }
  return m;
}

}  // namespace xdiff
