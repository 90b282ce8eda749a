#pragma once

#include <filesystem>
#include <functional>
#include <span>
#include <string>
#include <vector>

#include "xdiff/sampler.hpp"

namespace xdiff {

// Q(N) = (S1 - S2) exp(-kS N) + (D2 - D1)(1 - exp(-kD N)) + S2 + D1
struct QualityParams {
  double S1 = 0.0;
  double S2 = 0.0;
  double D1 = 0.0;
  double D2 = 0.0;
  double kS = 1.0;
  double kD = 1.0;
  double T = 1000.0;

  void validate() const;
};

double quality(const QualityParams& p, double N);
double quality_derivative(const QualityParams& p, double N);
double quality_second_derivative(const QualityParams& p, double N);

struct OptimalN {
  enum class Kind { interior, boundary };
  double N = 0.0;
  Kind kind = Kind::boundary;
  double Q = 0.0;
};

// Stationary point ln((S1-S2) kS / ((D2-D1) kD)) / (kS - kD) when it is an
// interior maximum on [0, T], else the better endpoint (ties go to 0).
OptimalN optimal_N_closed_form(const QualityParams& p);
// Argmax over {0, step, 2 step, ...} plus T; ties go to the smaller N.
OptimalN optimal_N_grid(const QualityParams& p, double step);

// x_N ~ q(x_N | x_0 = x0_hat). N = 0 returns x0_hat unchanged and draws nothing.
Vec resample(const NoiseSchedule& s, std::span<const double> x0_hat, int N, Rng& rng);
Vec resample_noise_free(const NoiseSchedule& s, std::span<const double> x0_hat, int N);

struct CascadeRngs {
  Rng* sd1 = nullptr;
  Rng* resample = nullptr;
  Rng* sd2 = nullptr;
};

struct CascadeResult {
  Vec x0_hat;  // first stage output
  Vec x_N;
  Vec x0;
};

// Full T-step chain with sd1, forward to N, N-step chain with sd2.
CascadeResult cascade_sample(const NoiseSchedule& s, const ScoreModel& sd1, const ScoreModel& sd2,
                             std::span<const double> start, int N, const CascadeRngs& rngs,
                             const ConditioningBundle& cond1 = {},
                             const ConditioningBundle& cond2 = {});
CascadeResult cascade_sample(const NoiseSchedule& s, const ScoreModel& sd1, const ScoreModel& sd2,
                             std::span<const double> start, int N, Rng& rng,
                             const ConditioningBundle& cond1 = {},
                             const ConditioningBundle& cond2 = {});

struct QualityScores {
  double psnr = 0.0;
  double ssim = 0.0;
  double mse = 0.0;
};

struct SweepRow {
  int N = 0;
  double psnr = 0.0;
  double ssim = 0.0;
  double mse = 0.0;
  int cases = 0;
};

// evaluate(N, case_index) for every N and case; rows hold per-N means.
std::vector<SweepRow> empirical_quality_sweep(
    const std::vector<int>& Ns, int num_cases,
    const std::function<QualityScores(int N, int case_index)>& evaluate);

// Index of the row with the highest PSNR, ties to the smaller N.
std::size_t best_sweep_row(const std::vector<SweepRow>& rows);

void write_sweep_csv(const std::filesystem::path& path, const std::vector<SweepRow>& rows);
std::vector<SweepRow> read_sweep_csv(const std::filesystem::path& path);

}  // namespace xdiff
