#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <span>
#include <vector>

#include <Eigen/Dense>

#include "xdiff/adapter.hpp"
#include "xdiff/schedule.hpp"

namespace xdiff {

struct ConditioningBundle {
  std::optional<FeaturePyramid> pyramid;
  std::optional<Vec> mi_feature;
  std::optional<Vec> extra_regressors;
  // Per-pixel guide image with the same length as x_t.
  std::optional<Vec> spatial;
};

class ScoreModel {
 public:
  virtual ~ScoreModel() = default;
  virtual Vec predict_noise(std::span<const double> x_t, int t,
                            const ConditioningBundle& cond) const = 0;
};

// mu = (x_t - beta_t / sqrt(1 - alpha_bar_t) * eps) / sqrt(alpha_t).
Vec reverse_mean(const NoiseSchedule& s, std::span<const double> x_t, std::span<const double> eps,
                 int t);

Vec reverse_step(const NoiseSchedule& s, const ScoreModel& model, std::span<const double> x_t,
                 int t, Rng& rng, const ConditioningBundle& cond = {});

// Iterates reverse_step from t_start down to 1.
Vec sample(const NoiseSchedule& s, const ScoreModel& model, std::span<const double> start,
           int t_start, Rng& rng, const ConditioningBundle& cond = {});
Vec sample_from_noise(const NoiseSchedule& s, const ScoreModel& model, std::size_t dim, Rng& rng,
                      const ConditioningBundle& cond = {});

Vec normal_vector(std::size_t n, Rng& rng);

struct GaussianComponent {
  Vec mean;
  Vec var;  // diagonal covariance
  double weight = 1.0;
};

// Exact noise prediction for a diagonal Gaussian mixture over x_0.
class AnalyticGaussianScore : public ScoreModel {
 public:
  AnalyticGaussianScore(const NoiseSchedule& s, std::vector<GaussianComponent> comps);

  Vec predict_noise(std::span<const double> x_t, int t,
                    const ConditioningBundle& cond = {}) const override;

  double log_marginal(std::span<const double> x_t, int t) const;
  Vec score(std::span<const double> x_t, int t) const;
  Eigen::MatrixXd score_jacobian(std::span<const double> x_t, int t) const;
  // E[x_0 | x_t] and Cov[x_0 | x_t].
  Vec tweedie_mean(std::span<const double> x_t, int t) const;
  Eigen::MatrixXd tweedie_cov(std::span<const double> x_t, int t) const;

  std::size_t dim() const { return comps_.front().mean.size(); }
  const std::vector<GaussianComponent>& components() const { return comps_; }
  const NoiseSchedule& schedule() const { return s_; }

 private:
  std::vector<double> responsibilities(std::span<const double> x_t, int t,
                                       double* log_norm = nullptr) const;

  NoiseSchedule s_;
  std::vector<GaussianComponent> comps_;
};

Vec analytic_noise_prediction(const AnalyticGaussianScore& m, std::span<const double> x_t, int t);

// Regressor layout of the closed-form denoiser.
struct DenoiserLayout {
  enum class Mode { dense, patch };
  Mode mode = Mode::dense;
  int rows = 1;  // image shape in patch mode
  int cols = 1;
  int patch = 3;          // odd side of the x_t neighbourhood
  int spatial_patch = 0;  // odd side of the guide neighbourhood, 0 disables
  int global_dim = 0;     // length of the global regressor vector
  bool film = false;      // x_t centre times each global
  bool standardize = true;

  int data_dim() const { return rows * cols; }
  int feature_dim() const;
  nlohmann::json to_json() const;
  static DenoiserLayout from_json(const nlohmann::json& j);
};

// Global regressors: pooled pyramid, then mi_feature, then extra_regressors.
Vec global_regressors(const ConditioningBundle& cond);

struct TrainingExample {
  Vec x0;
  ConditioningBundle cond;
};

struct TrainingTriple {
  const TrainingExample* example = nullptr;
  int t = 1;
  Vec eps;
};

struct FitOptions {
  int buckets = 10;
  double lambda = 1e-3;
  int draws_per_bucket = 200;
  int pixels_per_draw = 0;  // patch mode subsample, 0 uses all pixels
  std::uint64_t seed = 1;
};

// Per-bucket affine regression eps ~ W phi, fitted by ridge normal equations.
class LinearDenoiser : public ScoreModel {
 public:
  LinearDenoiser() = default;
  LinearDenoiser(DenoiserLayout layout, const NoiseSchedule& s, int buckets, double lambda);

  Vec predict_noise(std::span<const double> x_t, int t,
                    const ConditioningBundle& cond = {}) const override;

  int bucket_of(int t) const;
  int buckets() const { return static_cast<int>(weights_.size()); }
  double lambda() const { return lambda_; }
  const DenoiserLayout& layout() const { return layout_; }
  const NoiseSchedule& schedule() const { return s_; }
  const Eigen::MatrixXd& weights(int b) const { return weights_[b]; }
  // Mean squared error per element of the fit data, and of the zero predictor.
  double bucket_loss(int b) const { return loss_[b]; }
  double bucket_baseline(int b) const { return baseline_[b]; }
  // Per-sample versions: per-element values times the output dimension.
  double bucket_sample_loss(int b) const;
  double bucket_sample_baseline(int b) const;
  const Vec& global_mean() const { return gmean_; }
  const Vec& global_scale() const { return gscale_; }

  // Feature rows for one x_t: one row in dense mode, one per pixel in patch mode.
  Eigen::MatrixXd features(std::span<const double> x_t, const ConditioningBundle& cond,
                           const std::vector<int>* pixels = nullptr) const;

  // Weights are rounded through float unless keep_double is set.
  void fit_bucket(int b, const std::vector<TrainingTriple>& triples,
                  const std::vector<std::vector<int>>* pixels = nullptr, bool keep_double = false);
  void set_standardization(Vec mean, Vec scale);

  void save(const std::filesystem::path& stem) const;
  static LinearDenoiser load(const std::filesystem::path& stem);

 private:
  DenoiserLayout layout_;
  NoiseSchedule s_ = NoiseSchedule::linear(1, 0.5, 0.5);
  double lambda_ = 1e-3;
  std::vector<Eigen::MatrixXd> weights_;  // output_dim x feature_dim
  Vec loss_;
  Vec baseline_;
  Vec gmean_;
  Vec gscale_;
};

LinearDenoiser fit_linear_denoiser(const std::vector<TrainingExample>& data, const NoiseSchedule& s,
                                   const DenoiserLayout& layout, const FitOptions& opt);

}  // namespace xdiff
