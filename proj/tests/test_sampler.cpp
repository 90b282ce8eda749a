#include <cmath>
#include <filesystem>

#include <Eigen/Dense>

#include "doctest.h"
#include "stats_util.hpp"
#include "xdiff/sampler.hpp"

using namespace xdiff;

namespace {

struct ZeroModel : ScoreModel {
  Vec predict_noise(std::span<const double> x, int, const ConditioningBundle&) const override {
    return Vec(x.size(), 0.0);
  }
};

struct ConstModel : ScoreModel {
  double c;
  explicit ConstModel(double v) : c(v) {}
  Vec predict_noise(std::span<const double> x, int, const ConditioningBundle&) const override {
    return Vec(x.size(), c);
  }
};

AnalyticGaussianScore single(const NoiseSchedule& s, Vec mean, Vec var) {
  return AnalyticGaussianScore(s, {{std::move(mean), std::move(var), 1.0}});
}

}  // namespace

TEST_SUITE("sampler") {
  TEST_CASE("zero noise prediction divides by sqrt alpha") {
    auto s = NoiseSchedule::desk_schedule(100);
    ZeroModel zero;
    Rng rng = make_rng(1);
    Vec x{1.0, -2.0, 0.5};
    auto y = reverse_step(s, zero, x, 1, rng);
    for (int i = 0; i < 3; ++i) CHECK(y[i] == doctest::Approx(x[i] / std::sqrt(s.alpha(1))).epsilon(1e-15));
    auto m = reverse_mean(s, x, Vec(3, 0.0), 40);
    for (int i = 0; i < 3; ++i) CHECK(m[i] == doctest::Approx(x[i] / std::sqrt(s.alpha(40))).epsilon(1e-15));
    CHECK_THROWS_AS(reverse_step(s, zero, x, 0, rng), InvalidArgument);
    CHECK_THROWS_AS(reverse_step(s, zero, x, 101, rng), InvalidArgument);
  }

  TEST_CASE("terminal step adds no noise") {
    auto s = NoiseSchedule::desk_schedule(100);
    ConstModel m(0.3);
    Rng a = make_rng(1), b = make_rng(2);
    Vec x{0.4, 0.9};
    CHECK(reverse_step(s, m, x, 1, a) == reverse_step(s, m, x, 1, b));
    CHECK_FALSE(reverse_step(s, m, x, 2, a) == reverse_step(s, m, x, 2, b));
  }

  TEST_CASE("mean inversion identity and posterior variance") {
    auto s = NoiseSchedule::default_schedule();
    Rng rng = make_rng(3);
    for (int t : {1, 2, 10, 250, 999, 1000}) {
      Vec x = normal_vector(5, rng), e = normal_vector(5, rng);
      auto mu = reverse_mean(s, x, e, t);
      for (int i = 0; i < 5; ++i) {
        const double back = std::sqrt(s.alpha(t)) * mu[i] + s.beta(t) / std::sqrt(1 - s.alpha_bar(t)) * e[i];
        CHECK(std::abs(back - x[i]) <= 1e-13 * (1 + std::abs(x[i])));
      }
      const double closed = (1 - s.alpha_bar(t - 1)) / (1 - s.alpha_bar(t)) * s.beta(t);
      CHECK(s.sigma2(t) == closed);
    }
    CHECK(s.sigma2(1) == 0.0);
  }

  TEST_CASE("sample edge cases and determinism") {
    auto s = NoiseSchedule::desk_schedule(100);
    auto m = single(s, {1.0, -1.0}, {0.5, 2.0});
    Rng rng = make_rng(4);
    Vec start{0.3, 0.7};
    CHECK(sample(s, m, start, 0, rng) == start);
    Rng a = make_rng(5), b = make_rng(5);
    CHECK(sample_from_noise(s, m, 2, a) == sample_from_noise(s, m, 2, b));
    CHECK_THROWS_AS(sample(s, m, start, 101, rng), InvalidArgument);
  }

  TEST_CASE("analytic prediction special points") {
    auto s = NoiseSchedule::default_schedule();
    auto m = single(s, {2.0, -1.0}, {0.3, 1.5});
    const int t = 300;
    const double ra = std::sqrt(s.alpha_bar(t));
    auto e = analytic_noise_prediction(m, Vec{ra * 2.0, -ra * 1.0}, t);
    CHECK(std::abs(e[0]) < 1e-15);
    CHECK(std::abs(e[1]) < 1e-15);
    AnalyticGaussianScore sym(s, {{{-3.0}, {0.5}, 0.5}, {{3.0}, {0.5}, 0.5}});
    CHECK(std::abs(analytic_noise_prediction(sym, Vec{0.0}, 50)[0]) < 1e-15);
  }

  TEST_CASE("analytic prediction against central differences of the log density") {
    auto s = NoiseSchedule::default_schedule();
    auto m = single(s, {0.5, -1.0, 2.0}, {0.4, 1.2, 0.1});
    AnalyticGaussianScore mix(s, {{{0.5, -1.0}, {0.4, 0.2}, 0.3}, {{-1.0, 1.5}, {0.8, 0.3}, 0.7}});
    Rng rng = make_rng(6);
    for (int trial = 0; trial < 20; ++trial) {
      const int t = 1 + static_cast<int>(rng() % 1000);
      for (const AnalyticGaussianScore* mdl : {&m, &mix}) {
        Vec x = normal_vector(mdl->dim(), rng);
        auto e = analytic_noise_prediction(*mdl, x, t);
        const double k = -std::sqrt(1 - s.alpha_bar(t));
        for (std::size_t i = 0; i < x.size(); ++i) {
          const double h = 1e-5;
          Vec xp = x, xm = x;
          xp[i] += h;
          xm[i] -= h;
          const double fd = k * (mdl->log_marginal(xp, t) - mdl->log_marginal(xm, t)) / (2 * h);
          CHECK(std::abs(e[i] - fd) <= 1e-6 * std::max(1.0, std::abs(fd)));
        }
      }
    }
  }

  TEST_CASE("score jacobian and tweedie moments") {
    auto s = NoiseSchedule::default_schedule();
    AnalyticGaussianScore mix(s, {{{0.5, -1.0}, {0.4, 0.2}, 0.3}, {{-1.0, 1.5}, {0.8, 0.3}, 0.7}});
    Vec x{0.2, 0.4};
    const int t = 120;
    auto H = mix.score_jacobian(x, t);
    for (int j = 0; j < 2; ++j) {
      Vec xp = x, xm = x;
      xp[j] += 1e-6;
      xm[j] -= 1e-6;
      auto sp = mix.score(xp, t), sm = mix.score(xm, t);
      for (int i = 0; i < 2; ++i) CHECK(std::abs(H(i, j) - (sp[i] - sm[i]) / 2e-6) < 1e-6);
    }
    // Single Gaussian: the conjugate posterior of x0 given x_t.
    auto g = single(s, {1.5}, {0.6});
    const double ab = s.alpha_bar(t), v0 = 0.6, m0 = 1.5, xt = -0.3;
    const double pv = 1.0 / (1.0 / v0 + ab / (1 - ab));
    const double pm = pv * (m0 / v0 + std::sqrt(ab) * xt / (1 - ab));
    CHECK(g.tweedie_mean(Vec{xt}, t)[0] == doctest::Approx(pm).epsilon(1e-12));
    CHECK(g.tweedie_cov(Vec{xt}, t)(0, 0) == doctest::Approx(pv).epsilon(1e-10));
  }

  TEST_CASE("reverse chain reproduces the forward marginal of a standard normal") {
    auto s = NoiseSchedule::default_schedule();
    auto m = single(s, {0.0}, {1.0});
    const int n = 10000;
    std::vector<double> at_quarter, at_half, ref_q, ref_h;
    Rng rng = make_rng(7);
    for (int i = 0; i < n; ++i) {
      Vec x{standard_normal(rng)};
      for (int t = s.T(); t > s.T() / 4; --t) {
        x = reverse_step(s, m, x, t, rng);
        if (t - 1 == s.T() / 2) at_half.push_back(x[0]);
      }
      at_quarter.push_back(x[0]);
      ref_q.push_back(standard_normal(rng));
      ref_h.push_back(standard_normal(rng));
    }
    CHECK(testutil::ks_pvalue(at_quarter, ref_q) > 0.01);
    CHECK(testutil::ks_pvalue(at_half, ref_h) > 0.01);
  }

  TEST_CASE("mixture mode masses are recovered") {
    auto s = NoiseSchedule::default_schedule();
    AnalyticGaussianScore mix(s, {{{-3.0}, {0.25}, 0.3}, {{3.0}, {0.25}, 0.7}});
    const int n = 10000;
    int left = 0;
    Rng rng = make_rng(8);
    for (int i = 0; i < n; ++i) left += sample_from_noise(s, mix, 1, rng)[0] < 0.0;
    CHECK(std::abs(static_cast<double>(left) / n - 0.3) < 0.02);
  }

  TEST_CASE("linear denoiser beats the zero predictor on a repeated example") {
    auto s = NoiseSchedule::desk_schedule(100);
    DenoiserLayout lay;
    lay.cols = 4;
    std::vector<TrainingExample> data(3, TrainingExample{{0.5, -1.0, 2.0, 0.1}, {}});
    FitOptions opt;
    opt.draws_per_bucket = 4000;
    auto m = fit_linear_denoiser(data, s, lay, opt);
    for (int b = 0; b < m.buckets(); ++b) {
      CHECK(m.bucket_sample_loss(b) < 4.0);
      CHECK(m.bucket_loss(b) <= m.bucket_baseline(b));
      CHECK(m.bucket_sample_baseline(b) == doctest::Approx(4.0).epsilon(0.05));
    }
    CHECK(m.bucket_of(1) == 0);
    CHECK(m.bucket_of(100) == 9);
    CHECK(m.bucket_of(10) == 0);
    CHECK(m.bucket_of(11) == 1);
  }

  TEST_CASE("ridge limit drives weights to zero") {
    auto s = NoiseSchedule::desk_schedule(100);
    DenoiserLayout lay;
    lay.cols = 3;
    std::vector<TrainingExample> data{{{1.0, 0.0, -1.0}, {}}, {{0.3, 0.2, 0.1}, {}}};
    FitOptions opt;
    opt.draws_per_bucket = 500;
    opt.lambda = 1e12;
    auto m = fit_linear_denoiser(data, s, lay, opt);
    for (int b = 0; b < m.buckets(); ++b) {
      CHECK(m.weights(b).cwiseAbs().maxCoeff() < 1e-9);
      CHECK(m.bucket_loss(b) == doctest::Approx(m.bucket_baseline(b)).epsilon(1e-6));
    }
  }

  TEST_CASE("singular normal equations without ridge") {
    auto s = NoiseSchedule::desk_schedule(100);
    DenoiserLayout lay;
    lay.cols = 6;
    std::vector<TrainingExample> data{{Vec(6, 0.0), {}}};
    FitOptions opt;
    opt.draws_per_bucket = 3;  // fewer draws than features
    opt.lambda = 0.0;
    CHECK_THROWS_AS(fit_linear_denoiser(data, s, lay, opt), IllConditioned);
  }

  TEST_CASE("fitted weights agree with a stacked least-squares oracle") {
    auto s = NoiseSchedule::desk_schedule(100);
    for (auto mode : {DenoiserLayout::Mode::dense, DenoiserLayout::Mode::patch}) {
      DenoiserLayout lay;
      lay.mode = mode;
      lay.rows = 3;
      lay.cols = 4;
      lay.patch = 3;
      lay.spatial_patch = mode == DenoiserLayout::Mode::patch ? 3 : 1;
      lay.global_dim = 2;
      lay.film = mode == DenoiserLayout::Mode::patch;
      lay.standardize = false;
      Rng rng = make_rng(9);
      std::vector<TrainingExample> data(5);
      for (auto& ex : data) {
        ex.x0 = normal_vector(12, rng);
        ex.cond.spatial = normal_vector(12, rng);
        ex.cond.extra_regressors = normal_vector(2, rng);
      }
      std::vector<TrainingTriple> tr;
      for (int k = 0; k < 60; ++k) tr.push_back({&data[k % 5], 1 + k % 10, normal_vector(12, rng)});
      const double lambda = 0.05;
      LinearDenoiser m(lay, s, 10, lambda);
      m.fit_bucket(0, tr, nullptr, true);

      const int p = lay.feature_dim();
      const int out = mode == DenoiserLayout::Mode::dense ? 12 : 1;
      std::vector<Eigen::RowVectorXd> rows;
      std::vector<Eigen::RowVectorXd> targets;
      for (const auto& t : tr) {
        const Vec xt = q_sample(s, t.example->x0, t.t, t.eps);
        const auto phi = m.features(xt, t.example->cond);
        for (Eigen::Index r = 0; r < phi.rows(); ++r) {
          rows.push_back(phi.row(r));
          Eigen::RowVectorXd e(out);
          for (int i = 0; i < out; ++i) e[i] = out == 1 ? t.eps[r] : t.eps[i];
          targets.push_back(e);
        }
      }
      const Eigen::Index n = static_cast<Eigen::Index>(rows.size());
      Eigen::MatrixXd A(n + p, p), Y(n + p, out);
      A.setZero();
      Y.setZero();
      for (Eigen::Index i = 0; i < n; ++i) {
        A.row(i) = rows[i];
        Y.row(i) = targets[i];
      }
      A.bottomRows(p) = std::sqrt(n * lambda) * Eigen::MatrixXd::Identity(p, p);
      const Eigen::MatrixXd W = A.colPivHouseholderQr().solve(Y).transpose();
      CHECK((W - m.weights(0)).cwiseAbs().maxCoeff() < 1e-8);
    }
  }

  TEST_CASE("denoiser persistence") {
    auto s = NoiseSchedule::desk_schedule(100);
    DenoiserLayout lay;
    lay.mode = DenoiserLayout::Mode::patch;
    lay.rows = lay.cols = 8;
    lay.global_dim = 3;
    std::vector<TrainingExample> data(4);
    Rng rng = make_rng(10);
    for (auto& ex : data) {
      ex.x0 = normal_vector(64, rng);
      ex.cond.mi_feature = normal_vector(3, rng);
    }
    FitOptions opt;
    opt.draws_per_bucket = 30;
    opt.pixels_per_draw = 20;
    auto m = fit_linear_denoiser(data, s, lay, opt);
    auto dir = std::filesystem::temp_directory_path() / "xdiff_denoiser_test";
    m.save(dir / "m");
    auto r = LinearDenoiser::load(dir / "m");
    Vec x = normal_vector(64, rng);
    CHECK(r.predict_noise(x, 37, data[0].cond) == m.predict_noise(x, 37, data[0].cond));
    CHECK(r.global_mean() == m.global_mean());
    std::filesystem::remove_all(dir);
  }
}
