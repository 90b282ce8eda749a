#pragma once

#include <span>
#include <vector>

#include <Eigen/Dense>

#include "xdiff/projection.hpp"
#include "xdiff/sampler.hpp"

namespace xdiff {

class ConditionGradient {
 public:
  virtual ~ConditionGradient() = default;
  // Gradient of log p(c | x_t) with respect to x_t.
  virtual Vec grad_log_likelihood(std::span<const double> x_t, int t) const = 0;
};

struct GuidanceWeights {
  double lq = 1.0;
  double y = 1.0;
  double m = 1.0;

  void validate() const;
  nlohmann::json to_json() const;
  static GuidanceWeights from_json(const nlohmann::json& j);
};

struct WeightedCondition {
  const ConditionGradient* condition = nullptr;
  double weight = 1.0;
};

// base + sum of weight * grad.
Vec composed_score(std::span<const double> base, const std::vector<WeightedCondition>& conditions,
                   std::span<const double> x_t, int t);

// reverse_step with the mean shifted by sigma_t^2 * sum of weighted gradients.
Vec guided_reverse_step(const NoiseSchedule& s, const ScoreModel& model,
                        std::span<const double> x_t, int t,
                        const std::vector<WeightedCondition>& conditions, Rng& rng,
                        const ConditioningBundle& cond = {});

Vec guided_sample(const NoiseSchedule& s, const ScoreModel& model, std::span<const double> start,
                  int t_start, const std::vector<WeightedCondition>& conditions, Rng& rng,
                  const ConditioningBundle& cond = {});

// Observation c = H x_0 + noise with variance sigma2, under an analytic prior.
class LinearGaussianCondition : public ConditionGradient {
 public:
  // none: N(c; H x0_hat, sigma2 I). tweedie: covariance sigma2 I + H Cov[x0|x_t] H^T.
  enum class Covariance { none, tweedie };

  LinearGaussianCondition(Eigen::MatrixXd H, Vec c, double sigma2,
                          const AnalyticGaussianScore& prior,
                          Covariance mode = Covariance::tweedie);

  Vec grad_log_likelihood(std::span<const double> x_t, int t) const override;
  // log N(c; H x0_hat(x_t), L) with L as used by the gradient, held fixed at x_t.
  double log_likelihood(std::span<const double> x_t, int t) const;

  Covariance mode() const { return mode_; }

 private:
  Eigen::MatrixXd likelihood_cov(std::span<const double> x_t, int t) const;

  Eigen::MatrixXd H_;
  Eigen::VectorXd c_;
  double sigma2_;
  const AnalyticGaussianScore& prior_;
  Covariance mode_;
};

Vec linear_gaussian_grad(const LinearGaussianCondition& cond, std::span<const double> x_t, int t);

// Sinogram data consistency: gradient of -|radon(x0_hat) - y|^2 / (2 sigma2),
// with dx0_hat/dx_t taken as I / sqrt(alpha_bar_t).
class SinogramCondition : public ConditionGradient {
 public:
  SinogramCondition(const Sinogram& y, double sigma2, const NoiseSchedule& s,
                    const ScoreModel& model, const ConditioningBundle& cond);

  Vec grad_log_likelihood(std::span<const double> x_t, int t) const override;

 private:
  Sinogram y_;
  double sigma2_;
  const NoiseSchedule& s_;
  const ScoreModel& model_;
  const ConditioningBundle& cond_;
};

}  // namespace xdiff
