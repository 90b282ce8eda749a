#include "xdiff/guidance.hpp"

#include <cmath>
#include <numbers>

namespace xdiff {

void GuidanceWeights::validate() const {
  if (!(lq >= 0.0 && y >= 0.0 && m >= 0.0)) throw ConfigError("guidance weights must be >= 0");
}

nlohmann::json GuidanceWeights::to_json() const { return {{"lq", lq}, {"y", y}, {"m", m}}; }

GuidanceWeights GuidanceWeights::from_json(const nlohmann::json& j) {
  GuidanceWeights w;
  w.lq = j.value("lq", 1.0);
  w.y = j.value("y", 1.0);
  w.m = j.value("m", 1.0);
  w.validate();
  return w;
}

Vec composed_score(std::span<const double> base, const std::vector<WeightedCondition>& conditions,
                   std::span<const double> x_t, int t) {
  Vec out(base.begin(), base.end());
  for (const auto& wc : conditions) {
    const Vec g = wc.condition->grad_log_likelihood(x_t, t);
    if (g.size() != out.size()) throw ShapeError("condition gradient length differs from base");
    for (std::size_t i = 0; i < out.size(); ++i) out[i] += wc.weight * g[i];
  }
  return out;
}

Vec guided_reverse_step(const NoiseSchedule& s, const ScoreModel& model,
                        std::span<const double> x_t, int t,
                        const std::vector<WeightedCondition>& conditions, Rng& rng,
                        const ConditioningBundle& cond) {
  if (t < 1 || t > s.T()) throw InvalidArgument("reverse step " + std::to_string(t) + " out of range");
  for (const auto& wc : conditions) {
    if (!(wc.weight >= 0.0)) throw InvalidArgument("guidance weight must be >= 0");
  }
  const Vec eps = model.predict_noise(x_t, t, cond);
  Vec x = reverse_mean(s, x_t, eps, t);
  const double s2 = s.sigma2(t);
  const Vec shift = composed_score(Vec(x.size(), 0.0), conditions, x_t, t);
  for (std::size_t i = 0; i < x.size(); ++i) x[i] += s2 * shift[i];
  if (t > 1) {
    const double sigma = std::sqrt(s2);
    for (double& v : x) v += sigma * standard_normal(rng);
  }
  return x;
}

Vec guided_sample(const NoiseSchedule& s, const ScoreModel& model, std::span<const double> start,
                  int t_start, const std::vector<WeightedCondition>& conditions, Rng& rng,
                  const ConditioningBundle& cond) {
  if (t_start < 0 || t_start > s.T()) throw InvalidArgument("t_start out of range");
  Vec x(start.begin(), start.end());
  for (int t = t_start; t >= 1; --t) x = guided_reverse_step(s, model, x, t, conditions, rng, cond);
  return x;
}

LinearGaussianCondition::LinearGaussianCondition(Eigen::MatrixXd H, Vec c, double sigma2,
                                                 const AnalyticGaussianScore& prior, Covariance mode)
    : H_(std::move(H)), c_(Eigen::Map<const Eigen::VectorXd>(c.data(), static_cast<Eigen::Index>(c.size()))),
      sigma2_(sigma2), prior_(prior), mode_(mode) {
  if (!(sigma2 > 0.0)) throw InvalidArgument("observation variance must be positive");
  if (H_.rows() != c_.size() || H_.cols() != static_cast<Eigen::Index>(prior.dim())) {
    throw ShapeError("observation operator shape does not match c and the prior");
  }
}

Eigen::MatrixXd LinearGaussianCondition::likelihood_cov(std::span<const double> x_t, int t) const {
  Eigen::MatrixXd L = sigma2_ * Eigen::MatrixXd::Identity(c_.size(), c_.size());
  if (mode_ == Covariance::tweedie) L += H_ * prior_.tweedie_cov(x_t, t) * H_.transpose();
  return L;
}

Vec LinearGaussianCondition::grad_log_likelihood(std::span<const double> x_t, int t) const {
  if (static_cast<Eigen::Index>(x_t.size()) != H_.cols()) throw ShapeError("x_t length mismatch");
  const Vec x0 = prior_.tweedie_mean(x_t, t);
  const Eigen::Map<const Eigen::VectorXd> x0v(x0.data(), static_cast<Eigen::Index>(x0.size()));
  const Eigen::VectorXd r = c_ - H_ * x0v;
  const Eigen::MatrixXd L = likelihood_cov(x_t, t);
  const double ab = prior_.schedule().alpha_bar(t);
  const Eigen::Index d = H_.cols();
  const Eigen::MatrixXd J =
      (Eigen::MatrixXd::Identity(d, d) + (1.0 - ab) * prior_.score_jacobian(x_t, t)) / std::sqrt(ab);
  const Eigen::VectorXd g = J.transpose() * (H_.transpose() * L.ldlt().solve(r));
  return Vec(g.data(), g.data() + g.size());
}

double LinearGaussianCondition::log_likelihood(std::span<const double> x_t, int t) const {
  const Vec x0 = prior_.tweedie_mean(x_t, t);
  const Eigen::Map<const Eigen::VectorXd> x0v(x0.data(), static_cast<Eigen::Index>(x0.size()));
  const Eigen::VectorXd r = c_ - H_ * x0v;
  const Eigen::MatrixXd L = likelihood_cov(x_t, t);
  const auto ldlt = L.ldlt();
  const double logdet = ldlt.vectorD().array().log().sum();
  return -0.5 * (r.dot(ldlt.solve(r)) + logdet + c_.size() * std::log(2.0 * std::numbers::pi));
}

Vec linear_gaussian_grad(const LinearGaussianCondition& cond, std::span<const double> x_t, int t) {
  return cond.grad_log_likelihood(x_t, t);
}

SinogramCondition::SinogramCondition(const Sinogram& y, double sigma2, const NoiseSchedule& s,
                                     const ScoreModel& model, const ConditioningBundle& cond)
    : y_(y), sigma2_(sigma2), s_(s), model_(model), cond_(cond) {
  if (!(sigma2 > 0.0)) throw InvalidArgument("sinogram variance must be positive");
}

Vec SinogramCondition::grad_log_likelihood(std::span<const double> x_t, int t) const {
  const int n = y_.geometry.image_size;
  if (x_t.size() != static_cast<std::size_t>(n) * n) throw ShapeError("x_t does not match geometry");
  const Vec eps = model_.predict_noise(x_t, t, cond_);
  const double ab = s_.alpha_bar(t);
  Image x0(n, n);
  for (std::size_t i = 0; i < x_t.size(); ++i) {
    x0.vec()[i] = (x_t[i] - std::sqrt(1.0 - ab) * eps[i]) / std::sqrt(ab);
  }
  Sinogram r = radon(x0, y_.geometry);
  for (std::size_t i = 0; i < r.data.size(); ++i) r.data.vec()[i] = y_.data.vec()[i] - r.data.vec()[i];
  Image g = backproject(r);
  const double k = 1.0 / (sigma2_ * std::sqrt(ab));
  for (double& v : g.vec()) v *= k;
  return g.vec();
}

}  // namespace xdiff
