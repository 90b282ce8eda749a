#pragma once

#include <span>
#include <string>
#include <vector>

#include "json.hpp"

#include "xdiff/image.hpp"
#include "xdiff/rng.hpp"

namespace xdiff {

// Variance schedule with 1-based step index. alpha_bar(0) is 1.
class NoiseSchedule {
 public:
  static NoiseSchedule linear(int T, double beta_start, double beta_end);

  // Linear schedule over T steps with betas scaled by a common factor so that
  // alpha_bar(T) equals that of linear(ref_T, beta_start, beta_end).
  static NoiseSchedule matched_linear(int T, int ref_T, double beta_start, double beta_end);

  static NoiseSchedule default_schedule() { return linear(1000, 1e-4, 0.02); }
  static NoiseSchedule desk_schedule(int T = 100) { return matched_linear(T, 1000, 1e-4, 0.02); }

  int T() const { return T_; }
  double beta(int t) const;
  double alpha(int t) const;
  double alpha_bar(int t) const;
  // Posterior variance (1 - alpha_bar(t-1)) / (1 - alpha_bar(t)) * beta(t).
  double sigma2(int t) const;

  const Vec& betas() const { return betas_; }
  const Vec& alphas() const { return alphas_; }
  const Vec& alpha_bars() const { return alpha_bars_; }

  double beta_start() const { return beta_start_; }
  double beta_end() const { return beta_end_; }
  const std::string& kind() const { return kind_; }

  nlohmann::json to_json() const;
  static NoiseSchedule from_json(const nlohmann::json& j);

 private:
  NoiseSchedule(int T, double beta_start, double beta_end, std::string kind, int ref_T);
  void check_step(int t, int lo) const;

  int T_ = 0;
  int ref_T_ = 0;
  double beta_start_ = 0.0;
  double beta_end_ = 0.0;
  std::string kind_;
  Vec betas_;
  Vec alphas_;
  Vec alpha_bars_;
};

struct Marginal {
  Vec mean;
  double std = 0.0;
};

Marginal forward_marginal(const NoiseSchedule& s, std::span<const double> x0, int t);

Vec q_sample(const NoiseSchedule& s, std::span<const double> x0, int t,
             std::span<const double> noise);

// Applies steps from+1..to of the one-step forward kernel to x.
Vec forward_steps(const NoiseSchedule& s, std::span<const double> x, int from, int to, Rng& rng);

}  // namespace xdiff
