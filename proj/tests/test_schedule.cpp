#include <cmath>

#include "doctest.h"
#include "xdiff/schedule.hpp"

using namespace xdiff;

TEST_SUITE("schedule") {
  TEST_CASE("single step") {
    auto s = NoiseSchedule::linear(1, 0.1, 0.1);
    REQUIRE(s.betas().size() == 1);
    CHECK(s.beta(1) == 0.1);
    CHECK(s.alpha_bar(1) == doctest::Approx(0.9).epsilon(1e-15));
    CHECK(s.alpha_bar(0) == 1.0);
  }

  TEST_CASE("constant beta is a geometric product") {
    auto s = NoiseSchedule::linear(3, 0.1, 0.1);
    CHECK(s.alpha_bar(1) == doctest::Approx(0.9).epsilon(1e-15));
    CHECK(s.alpha_bar(2) == doctest::Approx(0.81).epsilon(1e-15));
    CHECK(s.alpha_bar(3) == doctest::Approx(0.729).epsilon(1e-15));
  }

  TEST_CASE("default schedule end value against 40-digit product") {
    auto s = NoiseSchedule::default_schedule();
    const double frozen = 4.035829765375683e-05;
    CHECK(std::abs(s.alpha_bar(1000) - frozen) / frozen < 1e-12);
    CHECK(s.beta(1) == 1e-4);
    CHECK(s.beta(1000) == doctest::Approx(0.02).epsilon(1e-15));
  }

  TEST_CASE("invariants and monotonicity") {
    for (auto s : {NoiseSchedule::default_schedule(), NoiseSchedule::desk_schedule(100)}) {
      for (int t = 1; t <= s.T(); ++t) {
        CHECK(s.beta(t) > 0.0);
        CHECK(s.beta(t) < 1.0);
        CHECK(s.alpha(t) == 1.0 - s.beta(t));
        CHECK(s.alpha_bar(t) < s.alpha_bar(t - 1));
      }
    }
  }

  TEST_CASE("desk schedule matches the long schedule endpoint") {
    auto d = NoiseSchedule::desk_schedule(100);
    auto l = NoiseSchedule::default_schedule();
    CHECK(std::abs(d.alpha_bar(100) / l.alpha_bar(1000) - 1.0) < 1e-9);
  }

  TEST_CASE("range errors") {
    CHECK_THROWS_AS(NoiseSchedule::linear(0, 0.1, 0.2), InvalidArgument);
    CHECK_THROWS_AS(NoiseSchedule::linear(10, 0.0, 0.2), InvalidArgument);
    CHECK_THROWS_AS(NoiseSchedule::linear(10, 0.3, 0.2), InvalidArgument);
    CHECK_THROWS_AS(NoiseSchedule::linear(10, 0.1, 1.0), InvalidArgument);
    auto s = NoiseSchedule::linear(10, 0.01, 0.02);
    Vec x{1.0};
    CHECK_THROWS_AS(forward_marginal(s, x, 0), InvalidArgument);
    CHECK_THROWS_AS(forward_marginal(s, x, 11), InvalidArgument);
    Vec n2{1.0, 2.0};
    CHECK_THROWS_AS(q_sample(s, x, 1, n2), ShapeError);
  }

  TEST_CASE("json round trip") {
    auto s = NoiseSchedule::desk_schedule(100);
    auto j = s.to_json();
    CHECK(j.at("T") == 100);
    CHECK(j.at("kind") == "matched_linear");
    auto r = NoiseSchedule::from_json(j);
    CHECK(r.betas() == s.betas());
  }

  TEST_CASE("forward marginal arithmetic") {
    auto s = NoiseSchedule::linear(2, 0.1, 0.1);
    Vec zero(3, 0.0);
    auto m0 = forward_marginal(s, zero, 1);
    CHECK(m0.mean == Vec(3, 0.0));
    CHECK(m0.std == doctest::Approx(std::sqrt(0.1)));
    Vec ones{1.0, 1.0};
    auto m = forward_marginal(s, ones, 2);
    CHECK(m.mean[0] == doctest::Approx(0.9).epsilon(1e-15));
    CHECK(m.mean[1] == doctest::Approx(0.9).epsilon(1e-15));
    CHECK(m.std == doctest::Approx(std::sqrt(0.19)).epsilon(1e-14));
  }

  TEST_CASE("q_sample special cases and reparameterisation") {
    auto s = NoiseSchedule::desk_schedule(100);
    Vec x0{0.3, -1.2, 2.0};
    Vec z(3, 0.0);
    Vec eps{0.5, -0.25, 1.5};
    const int t = 37;
    const double a = std::sqrt(s.alpha_bar(t));
    const double b = std::sqrt(1.0 - s.alpha_bar(t));
    auto v = q_sample(s, x0, t, z);
    for (int i = 0; i < 3; ++i) CHECK(v[i] == a * x0[i]);
    auto w = q_sample(s, z, t, eps);
    for (int i = 0; i < 3; ++i) CHECK(w[i] == b * eps[i]);
    auto m = forward_marginal(s, x0, t);
    auto g = q_sample(s, x0, t, eps);
    for (int i = 0; i < 3; ++i) CHECK(g[i] == doctest::Approx(m.mean[i] + m.std * eps[i]).epsilon(1e-15));
  }

  TEST_CASE("q_sample is jointly linear") {
    auto s = NoiseSchedule::desk_schedule(100);
    Vec x0{0.3, -1.2}, eps{0.7, 0.1};
    const double k = 2.5;
    Vec kx{k * x0[0], k * x0[1]}, ke{k * eps[0], k * eps[1]};
    auto lhs = q_sample(s, kx, 50, ke);
    auto rhs = q_sample(s, x0, 50, eps);
    for (int i = 0; i < 2; ++i) CHECK(lhs[i] == doctest::Approx(k * rhs[i]).epsilon(1e-14));
  }

  TEST_CASE("Monte Carlo marginal moments") {
    auto s = NoiseSchedule::desk_schedule(100);
    const int n = 100000;
    const int t = 30;
    const double x0 = 1.7;
    Rng rng = make_rng(11);
    double sum = 0, sq = 0;
    for (int i = 0; i < n; ++i) {
      Vec e{standard_normal(rng)};
      Vec x{x0};
      const double v = q_sample(s, x, t, e)[0];
      sum += v;
      sq += v * v;
    }
    const double mean = sum / n;
    const double var = sq / n - mean * mean;
    const auto m = forward_marginal(s, Vec{x0}, t);
    CHECK(std::abs(mean - m.mean[0]) < 4.0 * m.std / std::sqrt(n));
    const double sd_var = m.std * m.std * std::sqrt(2.0 / n);
    CHECK(std::abs(var - m.std * m.std) < 4.0 * sd_var);
  }

  TEST_CASE("marginal composed with further forward steps matches the later marginal") {
    auto s = NoiseSchedule::desk_schedule(100);
    const int n = 100000;
    const int t = 20, extra = 15;
    const double x0 = -0.8;
    Rng rng = make_rng(12);
    double sum = 0, sq = 0;
    for (int i = 0; i < n; ++i) {
      Vec e{standard_normal(rng)};
      Vec xt = q_sample(s, Vec{x0}, t, e);
      const double v = forward_steps(s, xt, t, t + extra, rng)[0];
      sum += v;
      sq += v * v;
    }
    const double mean = sum / n;
    const double var = sq / n - mean * mean;
    const auto m = forward_marginal(s, Vec{x0}, t + extra);
    CHECK(std::abs(mean - m.mean[0]) < 4.0 * m.std / std::sqrt(n));
    CHECK(std::abs(var - m.std * m.std) < 4.0 * m.std * m.std * std::sqrt(2.0 / n));
  }
}
