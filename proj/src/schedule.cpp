#include "xdiff/schedule.hpp"

#include <cmath>

#include "json.hpp"

namespace xdiff {
namespace {

Vec linear_betas(int T, double b0, double b1, double scale) {
  Vec b(T);
  for (int i = 0; i < T; ++i) {
    const double f = T == 1 ? 0.0 : static_cast<double>(i) / (T - 1);
    b[i] = scale * (b0 + (b1 - b0) * f);
  }
  return b;
}

long double log_alpha_bar_T(const Vec& betas) {
  long double acc = 0.0L;
  for (double b : betas) acc += std::log1p(-static_cast<long double>(b));
  return acc;
}

void validate(int T, double b0, double b1) {
  if (T < 1) throw InvalidArgument("schedule needs T >= 1");
  if (!(b0 > 0.0) || !(b0 <= b1) || !(b1 < 1.0)) {
    throw InvalidArgument("schedule needs 0 < beta_start <= beta_end < 1");
  }
}

}  // namespace

NoiseSchedule::NoiseSchedule(int T, double beta_start, double beta_end, std::string kind,
                             int ref_T)
    : T_(T), ref_T_(ref_T), beta_start_(beta_start), beta_end_(beta_end), kind_(std::move(kind)) {
  validate(T, beta_start, beta_end);
  double scale = 1.0;
  if (kind_ == "matched_linear") {
    if (ref_T < 1) throw InvalidArgument("matched schedule needs ref_T >= 1");
    const long double target = log_alpha_bar_T(linear_betas(ref_T, beta_start, beta_end, 1.0));
    double lo = 1e-6;
    double hi = 1.0 / beta_end;
    if (log_alpha_bar_T(linear_betas(T, beta_start, beta_end, hi * (1.0 - 1e-12))) > target) {
      throw InvalidArgument("no beta scale reaches the reference alpha_bar");
    }
    for (int it = 0; it < 200; ++it) {
      const double mid = 0.5 * (lo + hi);
      if (log_alpha_bar_T(linear_betas(T, beta_start, beta_end, mid)) > target) {
        lo = mid;
      } else {
        hi = mid;
      }
    }
    scale = 0.5 * (lo + hi);
  } else if (kind_ != "linear") {
    throw InvalidArgument("unknown schedule kind '" + kind_ + "'");
  }
  betas_ = linear_betas(T, beta_start, beta_end, scale);
  alphas_.resize(T);
  alpha_bars_.resize(T);
  long double prod = 1.0L;
  for (int i = 0; i < T; ++i) {
    if (!(betas_[i] > 0.0 && betas_[i] < 1.0)) throw InvalidArgument("beta outside (0, 1)");
    alphas_[i] = 1.0 - betas_[i];
    prod *= static_cast<long double>(alphas_[i]);
    alpha_bars_[i] = static_cast<double>(prod);
  }
}

NoiseSchedule NoiseSchedule::linear(int T, double beta_start, double beta_end) {
  return NoiseSchedule(T, beta_start, beta_end, "linear", 0);
}

NoiseSchedule NoiseSchedule::matched_linear(int T, int ref_T, double beta_start,
                                            double beta_end) {
  return NoiseSchedule(T, beta_start, beta_end, "matched_linear", ref_T);
}

void NoiseSchedule::check_step(int t, int lo) const {
  if (t < lo || t > T_) {
    throw InvalidArgument("step " + std::to_string(t) + " outside [" + std::to_string(lo) + ", " +
                          std::to_string(T_) + "]");
  }
}

double NoiseSchedule::beta(int t) const {
  check_step(t, 1);
  return betas_[t - 1];
}

double NoiseSchedule::alpha(int t) const {
  check_step(t, 1);
  return alphas_[t - 1];
}

double NoiseSchedule::alpha_bar(int t) const {
  check_step(t, 0);
  return t == 0 ? 1.0 : alpha_bars_[t - 1];
}

double NoiseSchedule::sigma2(int t) const {
  check_step(t, 1);
  return (1.0 - alpha_bar(t - 1)) / (1.0 - alpha_bar(t)) * betas_[t - 1];
}

nlohmann::json NoiseSchedule::to_json() const {
  nlohmann::json j{{"T", T_}, {"beta_start", beta_start_}, {"beta_end", beta_end_}, {"kind", kind_}};
  if (kind_ == "matched_linear") j["ref_T"] = ref_T_;
  return j;
}

NoiseSchedule NoiseSchedule::from_json(const nlohmann::json& j) {
  try {
    const int T = j.at("T").get<int>();
    const double b0 = j.at("beta_start").get<double>();
    const double b1 = j.at("beta_end").get<double>();
    const std::string kind = j.value("kind", std::string("linear"));
    if (kind == "matched_linear") return matched_linear(T, j.value("ref_T", 1000), b0, b1);
    if (kind == "linear") return linear(T, b0, b1);
    throw ConfigError("unknown schedule kind '" + kind + "'");
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("schedule json: ") + e.what());
  }
}

Marginal forward_marginal(const NoiseSchedule& s, std::span<const double> x0, int t) {
  if (t < 1 || t > s.T()) throw InvalidArgument("forward_marginal step out of range");
  const double ab = s.alpha_bar(t);
  Marginal m;
  m.mean.resize(x0.size());
  const double r = std::sqrt(ab);
  for (std::size_t i = 0; i < x0.size(); ++i) m.mean[i] = r * x0[i];
  m.std = std::sqrt(1.0 - ab);
  return m;
}

Vec q_sample(const NoiseSchedule& s, std::span<const double> x0, int t,
             std::span<const double> noise) {
  if (noise.size() != x0.size()) throw ShapeError("q_sample: noise length differs from x0");
  if (t < 1 || t > s.T()) throw InvalidArgument("q_sample step out of range");
  const double ab = s.alpha_bar(t);
  const double a = std::sqrt(ab);
  const double b = std::sqrt(1.0 - ab);
  Vec out(x0.size());
  for (std::size_t i = 0; i < x0.size(); ++i) out[i] = a * x0[i] + b * noise[i];
  return out;
}

Vec forward_steps(const NoiseSchedule& s, std::span<const double> x, int from, int to, Rng& rng) {
  if (from < 0 || to > s.T() || from > to) throw InvalidArgument("forward_steps range invalid");
  Vec out(x.begin(), x.end());
  for (int t = from + 1; t <= to; ++t) {
    const double a = std::sqrt(s.alpha(t));
    const double b = std::sqrt(s.beta(t));
    for (double& v : out) v = a * v + b * standard_normal(rng);
  }
  return out;
}

}  // namespace xdiff
