#include "xdiff/cascade.hpp"

#include <cmath>
#include <fstream>
#include <iomanip>
#include <sstream>

#include "xdiff/io.hpp"

namespace xdiff {

void QualityParams::validate() const {
  if (!(kS > 0.0) || !(kD > 0.0)) throw InvalidArgument("decay rates must be positive");
  if (!(T > 0.0)) throw InvalidArgument("T must be positive");
  if (!std::isfinite(S1) || !std::isfinite(S2) || !std::isfinite(D1) || !std::isfinite(D2)) {
    throw InvalidArgument("quality parameters must be finite");
  }
}

namespace {

void check_N(const QualityParams& p, double N) {
  p.validate();
  if (!(N >= 0.0 && N <= p.T)) {
    throw InvalidArgument("N = " + std::to_string(N) + " outside [0, " + std::to_string(p.T) + "]");
  }
}

}  // namespace

double quality(const QualityParams& p, double N) {
  check_N(p, N);
  return (p.S1 - p.S2) * std::exp(-p.kS * N) + (p.D2 - p.D1) * (1.0 - std::exp(-p.kD * N)) +
         p.S2 + p.D1;
}

double quality_derivative(const QualityParams& p, double N) {
  check_N(p, N);
  return -p.kS * (p.S1 - p.S2) * std::exp(-p.kS * N) + p.kD * (p.D2 - p.D1) * std::exp(-p.kD * N);
}

double quality_second_derivative(const QualityParams& p, double N) {
  check_N(p, N);
  return p.kS * p.kS * (p.S1 - p.S2) * std::exp(-p.kS * N) -
         p.kD * p.kD * (p.D2 - p.D1) * std::exp(-p.kD * N);
}

OptimalN optimal_N_closed_form(const QualityParams& p) {
  p.validate();
  OptimalN best{0.0, OptimalN::Kind::boundary, quality(p, 0.0)};
  const double qT = quality(p, p.T);
  if (qT > best.Q) best = {p.T, OptimalN::Kind::boundary, qT};

  const double num = (p.S1 - p.S2) * p.kS;
  const double den = (p.D2 - p.D1) * p.kD;
  if (p.kS != p.kD && den != 0.0 && num / den > 0.0) {
    const double n = std::log(num / den) / (p.kS - p.kD);
    if (std::isfinite(n) && n > 0.0 && n < p.T && quality_second_derivative(p, n) < 0.0) {
      const double q = quality(p, n);
      if (q >= best.Q) best = {n, OptimalN::Kind::interior, q};
    }
  }
  return best;
}

OptimalN optimal_N_grid(const QualityParams& p, double step) {
  p.validate();
  if (!(step > 0.0)) throw InvalidArgument("grid step must be positive");
  OptimalN best{0.0, OptimalN::Kind::boundary, quality(p, 0.0)};
  const long long K = static_cast<long long>(std::floor(p.T / step + 1e-9));
  auto consider = [&](double n) {
    const double q = quality(p, n);
    if (q > best.Q) best = {n, OptimalN::Kind::interior, q};
  };
  for (long long k = 1; k <= K; ++k) consider(std::min(p.T, static_cast<double>(k) * step));
  if (static_cast<double>(K) * step < p.T) consider(p.T);
  if (best.N == 0.0 || best.N == p.T) best.kind = OptimalN::Kind::boundary;
  return best;
}

Vec resample(const NoiseSchedule& s, std::span<const double> x0_hat, int N, Rng& rng) {
  if (N < 0 || N > s.T()) throw InvalidArgument("resample step " + std::to_string(N) + " out of range");
  if (N == 0) return Vec(x0_hat.begin(), x0_hat.end());
  return q_sample(s, x0_hat, N, normal_vector(x0_hat.size(), rng));
}

Vec resample_noise_free(const NoiseSchedule& s, std::span<const double> x0_hat, int N) {
  if (N < 0 || N > s.T()) throw InvalidArgument("resample step " + std::to_string(N) + " out of range");
  return forward_marginal(s, x0_hat, N).mean;
}

CascadeResult cascade_sample(const NoiseSchedule& s, const ScoreModel& sd1, const ScoreModel& sd2,
                             std::span<const double> start, int N, const CascadeRngs& rngs,
                             const ConditioningBundle& cond1, const ConditioningBundle& cond2) {
  if (!rngs.sd1 || !rngs.resample || !rngs.sd2) throw InvalidArgument("cascade needs three rng streams");
  if (N < 0 || N > s.T()) throw InvalidArgument("cascade N " + std::to_string(N) + " out of range");
  CascadeResult r;
  r.x0_hat = sample(s, sd1, start, s.T(), *rngs.sd1, cond1);
  r.x_N = resample(s, r.x0_hat, N, *rngs.resample);
  r.x0 = N == 0 ? r.x_N : sample(s, sd2, r.x_N, N, *rngs.sd2, cond2);
  return r;
}

CascadeResult cascade_sample(const NoiseSchedule& s, const ScoreModel& sd1, const ScoreModel& sd2,
                             std::span<const double> start, int N, Rng& rng,
                             const ConditioningBundle& cond1, const ConditioningBundle& cond2) {
  return cascade_sample(s, sd1, sd2, start, N, CascadeRngs{&rng, &rng, &rng}, cond1, cond2);
}

std::vector<SweepRow> empirical_quality_sweep(
    const std::vector<int>& Ns, int num_cases,
    const std::function<QualityScores(int, int)>& evaluate) {
  if (num_cases <= 0) throw InvalidArgument("sweep needs at least one case");
  std::vector<SweepRow> rows;
  rows.reserve(Ns.size());
  for (int N : Ns) {
    SweepRow row;
    row.N = N;
    row.cases = num_cases;
    for (int c = 0; c < num_cases; ++c) {
      const QualityScores q = evaluate(N, c);
      row.psnr += q.psnr;
      row.ssim += q.ssim;
      row.mse += q.mse;
    }
    row.psnr /= num_cases;
    row.ssim /= num_cases;
    row.mse /= num_cases;
    rows.push_back(row);
  }
  return rows;
}

std::size_t best_sweep_row(const std::vector<SweepRow>& rows) {
  if (rows.empty()) throw InvalidArgument("empty sweep");
  std::size_t best = 0;
  for (std::size_t i = 1; i < rows.size(); ++i) {
    if (rows[i].psnr > rows[best].psnr ||
        (rows[i].psnr == rows[best].psnr && rows[i].N < rows[best].N)) {
      best = i;
    }
  }
  return best;
}

void write_sweep_csv(const std::filesystem::path& path, const std::vector<SweepRow>& rows) {
  std::ostringstream os;
  os << "N,psnr_mean,ssim_mean,mse_mean,cases\n" << std::setprecision(17);
  for (const auto& r : rows) os << r.N << ',' << r.psnr << ',' << r.ssim << ',' << r.mse << ',' << r.cases << '\n';
  io::write_text(path, os.str());
}

std::vector<SweepRow> read_sweep_csv(const std::filesystem::path& path) {
  std::istringstream is(io::read_text(path));
  std::string line;
  if (!std::getline(is, line) || line != "N,psnr_mean,ssim_mean,mse_mean,cases") {
    throw IoError("bad sweep header in " + path.string());
  }
  std::vector<SweepRow> rows;
  while (std::getline(is, line)) {
    if (line.empty()) continue;
    SweepRow r;
    char c1, c2, c3, c4;
    std::istringstream ls(line);
    if (!(ls >> r.N >> c1 >> r.psnr >> c2 >> r.ssim >> c3 >> r.mse >> c4 >> r.cases)) {
      throw IoError("bad sweep row in " + path.string());
    }
    rows.push_back(r);
  }
  return rows;
}

}  // namespace xdiff
