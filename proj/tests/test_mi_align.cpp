#include <cmath>
#include <filesystem>
#include <numbers>

#include <Eigen/Dense>

#include "doctest.h"
#include "xdiff/mi_align.hpp"

using namespace xdiff;
using Eigen::MatrixXd;
using Eigen::VectorXd;

namespace {

MatrixXd randn(int r, int c, Rng& rng) {
  MatrixXd m(r, c);
  for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = standard_normal(rng);
  return m;
}

LoraLayer random_layer(int D, int r, Rng& rng) {
  LoraLayer l{randn(D, D, rng), randn(r, D, rng), randn(D, r, rng)};
  return l;
}

MatrixXd unit_rows(MatrixXd m) {
  for (Eigen::Index i = 0; i < m.rows(); ++i) m.row(i).normalize();
  return m;
}

MetaInfo random_meta(Rng& rng) {
  MetaInfo m;
  m.weight_kg = 50 + 40 * uniform01(rng);
  m.height_m = 1.5 + 0.4 * uniform01(rng);
  m.injected_dose_mbq = 150 + 200 * uniform01(rng);
  m.drf = 10;
  m.suv_max = 2 + 5 * uniform01(rng);
  m.suv_mean = 0.2 + 0.5 * uniform01(rng);
  return m;
}

std::vector<AlignPair> random_pairs(int n, int side, Rng& rng) {
  std::vector<AlignPair> out;
  for (int i = 0; i < n; ++i) {
    Image img(side, side);
    for (double& v : img.vec()) v = 2.0 * uniform01(rng);
    out.push_back({img, random_meta(rng)});
  }
  return out;
}

DualEncoderConfig tiny_config() {
  DualEncoderConfig c;
  c.dim = 8;
  c.rank = 2;
  c.blocks = 2;
  c.heads = 2;
  c.patch = 4;
  c.image_size = 8;
  c.seed = 3;
  return c;
}

}  // namespace

TEST_SUITE("mi_align") {
  TEST_CASE("zero-initialized lora is the base map") {
    Rng rng = make_rng(1);
    for (int k = 0; k < 10; ++k) {
      MatrixXd W = randn(12, 12, rng);
      LoraLayer l = lora_init(W, 4, 100 + k);
      VectorXd x = randn(12, 1, rng);
      CHECK((lora_apply(l, x) - W * x).cwiseAbs().maxCoeff() == 0.0);
      CHECK(l.B.isZero(0.0));
    }
  }

  TEST_CASE("constructed low-rank update") {
    const int D = 5;
    LoraLayer l{MatrixXd::Identity(D, D), MatrixXd::Zero(2, D), MatrixXd::Zero(D, 2)};
    l.A(0, 0) = 1.0;
    l.A(1, 1) = 1.0;
    l.B(0, 0) = 1.0;
    VectorXd x(D);
    x << 3, -1, 2, 0.5, 4;
    VectorXd y = lora_apply(l, x);
    CHECK(y[0] == 6.0);
    for (int i = 1; i < D; ++i) CHECK(y[i] == x[i]);
    CHECK_THROWS_AS(lora_apply(l, VectorXd::Zero(4)), ShapeError);
  }

  TEST_CASE("merged weight equivalence") {
    Rng rng = make_rng(2);
    double worst = 0.0;
    for (int k = 0; k < 100; ++k) {
      LoraLayer l = random_layer(16, 4, rng);
      VectorXd x = randn(16, 1, rng);
      const VectorXd merged = l.merged() * x;
      worst = std::max(worst, (lora_apply(l, x) - merged).cwiseAbs().maxCoeff() / merged.cwiseAbs().maxCoeff());
      MatrixXd X = randn(3, 16, rng);
      CHECK((lora_apply_rows(l, X) - X * l.merged().transpose()).cwiseAbs().maxCoeff() < 1e-12 * 100);
    }
    CHECK(worst < 1e-12);
  }

  TEST_CASE("low-rank update rank bound") {
    Rng rng = make_rng(3);
    for (int k = 0; k < 100; ++k) {
      const int r = 1 + k % 6;
      LoraLayer l = random_layer(20, r, rng);
      Eigen::JacobiSVD<MatrixXd> svd(l.B * l.A);
      const auto s = svd.singularValues();
      int count = 0;
      for (Eigen::Index i = 0; i < s.size(); ++i) count += s[i] > 1e-10 * s[0];
      CHECK(count <= r);
    }
  }

  TEST_CASE("kaiming scale of the down factor") {
    LoraLayer l = lora_init(10, 10000, 7);
    CHECK(l.A.size() == 100000);
    const double mean = l.A.mean();
    const double sd = std::sqrt((l.A.array() - mean).square().sum() / (l.A.size() - 1));
    CHECK(std::abs(sd / std::sqrt(2.0 / 10000) - 1.0) < 0.01);
    CHECK_THROWS_AS(lora_init(11, 10, 1), InvalidArgument);
  }

  TEST_CASE("attention special cases") {
    Rng rng = make_rng(4);
    MatrixXd q = randn(1, 6, rng), k = randn(1, 6, rng), v = randn(1, 6, rng);
    CHECK((attention(q, k, v) - v).cwiseAbs().maxCoeff() < 1e-15);
    MatrixXd Q = randn(4, 6, rng), K = randn(1, 6, rng).replicate(5, 1), V = randn(5, 6, rng);
    MatrixXd out = attention(Q, K, V);
    for (int i = 0; i < 4; ++i) CHECK((out.row(i) - V.colwise().mean()).cwiseAbs().maxCoeff() < 1e-14);
    CHECK_THROWS_AS(attention(Q, randn(5, 5, rng), V), ShapeError);
    MatrixXd P = softmax_rows(randn(7, 9, rng) * 5.0);
    for (int i = 0; i < 7; ++i) CHECK(P.row(i).sum() == doctest::Approx(1.0).epsilon(1e-15));
  }

  TEST_CASE("attention matches a loop oracle") {
    Rng rng = make_rng(5);
    MatrixXd Q = randn(4, 6, rng), K = randn(5, 6, rng), V = randn(5, 3, rng);
    MatrixXd ref = MatrixXd::Zero(4, 3);
    for (int i = 0; i < 4; ++i) {
      double w[5], z = 0.0;
      for (int j = 0; j < 5; ++j) {
        double s = 0.0;
        for (int d = 0; d < 6; ++d) s += Q(i, d) * K(j, d);
        w[j] = std::exp(s / std::sqrt(6.0));
        z += w[j];
      }
      for (int j = 0; j < 5; ++j) {
        for (int d = 0; d < 3; ++d) ref(i, d) += w[j] / z * V(j, d);
      }
    }
    CHECK((attention(Q, K, V) - ref).cwiseAbs().maxCoeff() < 1e-10);
  }

  TEST_CASE("cross attention sources") {
    Rng rng = make_rng(6);
    CrossAttention ca{random_layer(6, 2, rng), random_layer(6, 2, rng), random_layer(6, 2, rng)};
    MatrixXd dec = randn(5, 6, rng), mi = randn(1, 6, rng);
    MatrixXd out = cross_attention(ca, dec, mi);
    const VectorXd expect = ca.v.merged() * mi.row(0).transpose();
    for (int i = 0; i < 5; ++i) CHECK((out.row(i).transpose() - expect).cwiseAbs().maxCoeff() < 1e-12);
    MatrixXd mi3 = randn(3, 6, rng);
    const MatrixXd K = lora_apply_rows(ca.k, mi3), V = lora_apply_rows(ca.v, mi3);
    CHECK(cross_attention(ca, dec, mi3) == attention(lora_apply_rows(ca.q, dec), K, V));
    CHECK(cross_attention(ca, 2.5 * dec, mi3) == attention(lora_apply_rows(ca.q, 2.5 * dec), K, V));
  }

  TEST_CASE("contrastive loss closed cases") {
    MatrixXd I = MatrixXd::Identity(2, 2);
    auto r = contrastive_loss(I, I, 1.0);
    CHECK(r.loss == doctest::Approx(-std::log(std::exp(1.0) / (std::exp(1.0) + 1.0))).epsilon(1e-14));
    CHECK(r.loss == doctest::Approx(0.3133).epsilon(1e-4));
    for (int n : {2, 5, 16}) {
      MatrixXd same = MatrixXd::Zero(n, 4);
      same.col(0).setOnes();
      CHECK(std::abs(contrastive_loss(same, same, 0.3).loss - std::log(n)) < 1e-10);
    }
    Rng rng = make_rng(7);
    MatrixXd a = unit_rows(randn(6, 5, rng)), b = unit_rows(randn(6, 5, rng));
    CHECK(contrastive_loss(a, b, 0.2).loss == doctest::Approx(contrastive_loss(b, a, 0.2).loss).epsilon(1e-14));
    CHECK(contrastive_loss(a, b, 0.2).loss >= 0.0);
    CHECK_THROWS_AS(contrastive_loss(a.topRows(1), b.topRows(1), 1.0), InvalidArgument);
    MatrixXd z = a;
    z.row(2).setZero();
    CHECK_THROWS_AS(contrastive_loss(z, b, 1.0), InvalidArgument);
  }

  TEST_CASE("contrastive gradients match finite differences") {
    Rng rng = make_rng(8);
    double worst = 0.0;
    for (int k = 0; k < 50; ++k) {
      const int n = 2 + k % 7, D = 3 + k % 5;
      MatrixXd a = unit_rows(randn(n, D, rng)), b = unit_rows(randn(n, D, rng));
      const double tau = 0.1 + uniform01(rng);
      auto r = contrastive_loss(a, b, tau);
      const double h = 1e-5;
      auto rel = [](double an, double fd) { return std::abs(an - fd) / std::max(1e-4, std::abs(fd)); };
      for (int i = 0; i < n; ++i) {
        for (int d = 0; d < D; ++d) {
          MatrixXd ap = a, am = a, bp = b, bm = b;
          ap(i, d) += h;
          am(i, d) -= h;
          bp(i, d) += h;
          bm(i, d) -= h;
          worst = std::max(worst, rel(r.d_img(i, d), (contrastive_loss(ap, b, tau).loss - contrastive_loss(am, b, tau).loss) / (2 * h)));
          worst = std::max(worst, rel(r.d_mi(i, d), (contrastive_loss(a, bp, tau).loss - contrastive_loss(a, bm, tau).loss) / (2 * h)));
        }
      }
      worst = std::max(worst, rel(r.d_tau, (contrastive_loss(a, b, tau + h).loss - contrastive_loss(a, b, tau - h).loss) / (2 * h)));
    }
    CHECK(worst < 1e-5);
  }

  TEST_CASE("attention block backward matches finite differences") {
    Rng rng = make_rng(9);
    for (int heads : {1, 2}) {
      AttentionBlock blk{random_layer(6, 2, rng), random_layer(6, 2, rng), random_layer(6, 2, rng),
                         random_layer(6, 2, rng), random_layer(6, 2, rng), heads};
      for (LoraLayer* l : {&blk.q, &blk.k, &blk.v, &blk.w0, &blk.w1}) {
        l->W *= 0.4;
        l->B *= 0.2;
      }
      MatrixXd X = randn(4, 6, rng), R = randn(4, 6, rng);
      AttentionBlock::Cache c;
      blk.forward(X, &c);
      AttentionBlock g = AttentionBlock::zeros_like(blk);
      MatrixXd dX = blk.backward(R, c, g);
      auto f = [&](const AttentionBlock& b, const MatrixXd& x) { return b.forward(x).cwiseProduct(R).sum(); };
      const double h = 1e-6;
      for (int i = 0; i < 4; ++i) {
        for (int d = 0; d < 6; ++d) {
          MatrixXd xp = X, xm = X;
          xp(i, d) += h;
          xm(i, d) -= h;
          CHECK(dX(i, d) == doctest::Approx((f(blk, xp) - f(blk, xm)) / (2 * h)).epsilon(1e-6));
        }
      }
      AttentionBlock bp = blk, bm = blk;
      bp.v.A(1, 3) += h;
      bm.v.A(1, 3) -= h;
      CHECK(g.v.A(1, 3) == doctest::Approx((f(bp, X) - f(bm, X)) / (2 * h)).epsilon(1e-6));
      bp = blk;
      bm = blk;
      bp.w0.B(2, 1) += h;
      bm.w0.B(2, 1) -= h;
      CHECK(g.w0.B(2, 1) == doctest::Approx((f(bp, X) - f(bm, X)) / (2 * h)).epsilon(1e-6));
    }
  }

  TEST_CASE("encoder gradient matches finite differences") {
    Rng rng = make_rng(10);
    DualEncoder enc(tiny_config());
    auto pairs = random_pairs(5, 16, rng);
    enc.set_normalization(pairs);
    for (auto& b : enc.params().blocks) {
      for (LoraLayer* l : {&b.q, &b.k, &b.v, &b.w0, &b.w1}) l->B = 0.3 * randn(l->B.rows(), l->B.cols(), rng);
    }
    std::vector<const AlignPair*> batch;
    for (const auto& p : pairs) batch.push_back(&p);
    const unsigned groups = EncoderParams::projection | EncoderParams::lora;
    std::vector<MatrixXd> grads;
    enc.loss_and_grad(batch, groups, &grads);
    auto params = enc.params().list(groups);
    REQUIRE(params.size() == grads.size());
    double worst = 0.0;
    const double h = 1e-5;
    for (std::size_t k = 0; k < params.size(); ++k) {
      for (int s = 0; s < 3; ++s) {
        const Eigen::Index idx = static_cast<Eigen::Index>(uniform01(rng) * params[k]->size());
        double& w = params[k]->data()[idx];
        const double keep = w;
        w = keep + h;
        const double up = enc.loss_and_grad(batch, groups, nullptr);
        w = keep - h;
        const double dn = enc.loss_and_grad(batch, groups, nullptr);
        w = keep;
        const double fd = (up - dn) / (2 * h);
        worst = std::max(worst, std::abs(grads[k].data()[idx] - fd) / std::max(1e-3, std::abs(fd)));
      }
    }
    CHECK(worst < 1e-4);
  }

  TEST_CASE("training keeps base weights frozen") {
    Rng rng = make_rng(11);
    auto pairs = random_pairs(16, 16, rng);
    DualEncoder init(tiny_config());
    AlignTrainOptions opt;
    opt.epochs = 3;
    opt.batch = 8;
    for (bool lora : {false, true}) {
      opt.lora = lora;
      auto res = train_dual_encoder(pairs, tiny_config(), opt);
      for (std::size_t b = 0; b < init.params().blocks.size(); ++b) {
        const auto& a = init.params().blocks[b];
        const auto& t = res.encoder.params().blocks[b];
        CHECK(a.q.W == t.q.W);
        CHECK(a.w1.W == t.w1.W);
        if (lora) {
          CHECK_FALSE(t.q.B.isZero(0.0));
        } else {
          CHECK(t.q.B.isZero(0.0));
          CHECK(a.q.A == t.q.A);
        }
      }
      CHECK_FALSE(res.encoder.params().mi_proj == init.params().mi_proj);
    }
  }

  TEST_CASE("loss decreases at small learning rate") {
    Rng rng = make_rng(12);
    auto pairs = random_pairs(32, 16, rng);
    AlignTrainOptions opt;
    opt.epochs = 30;
    opt.batch = 16;
    opt.lr = 1e-3;
    auto res = train_dual_encoder(pairs, tiny_config(), opt);
    double first = 0.0, last = 0.0;
    for (int i = 0; i < 5; ++i) {
      first += res.epoch_loss[i];
      last += res.epoch_loss[res.epoch_loss.size() - 1 - i];
    }
    CHECK(last < first);
  }

  TEST_CASE("alignment probabilities") {
    Rng rng = make_rng(13);
    auto pairs = random_pairs(4, 16, rng);
    DualEncoder enc(tiny_config());
    enc.set_normalization(pairs);
    const std::string a = render_prompt(pairs[0].meta), b = render_prompt(pairs[1].meta);
    auto one = align_probability(enc, pairs[0].image, {a});
    CHECK(one[0] == doctest::Approx(1.0).epsilon(1e-15));
    auto dup = align_probability(enc, pairs[0].image, {a, b, a, b});
    CHECK(dup[0] == doctest::Approx(dup[2]).epsilon(1e-14));
    CHECK(dup[1] == doctest::Approx(dup[3]).epsilon(1e-14));
    CHECK(dup[0] + dup[1] + dup[2] + dup[3] == doctest::Approx(1.0).epsilon(1e-14));
    DualEncoder scaled = enc;
    scaled.params().img_proj *= 7.5;
    auto s = align_probability(scaled, pairs[0].image, {a, b});
    auto base = align_probability(enc, pairs[0].image, {a, b});
    CHECK(s[0] == doctest::Approx(base[0]).epsilon(1e-12));
    CHECK_THROWS_AS(align_probability(enc, pairs[0].image, {}), InvalidArgument);
    CHECK_THROWS_AS(align_accuracy(enc, pairs, 4, 1), InvalidArgument);
    CHECK_THROWS_AS(enc.encode_image(Image(12, 12)), ShapeError);
  }

  TEST_CASE("checkpoint round trip") {
    Rng rng = make_rng(14);
    auto pairs = random_pairs(8, 16, rng);
    AlignTrainOptions opt;
    opt.epochs = 2;
    opt.batch = 4;
    auto res = train_dual_encoder(pairs, tiny_config(), opt);
    auto dir = std::filesystem::temp_directory_path() / "xdiff_mi_align_test";
    res.encoder.save(dir / "enc");
    DualEncoder back = DualEncoder::load(dir / "enc");
    CHECK(back.encode_image(pairs[1].image) == res.encoder.encode_image(pairs[1].image));
    CHECK(back.encode_meta(pairs[2].meta) == res.encoder.encode_meta(pairs[2].meta));
    CHECK(back.tau() == res.encoder.tau());
  }

  TEST_CASE("prompt sources and downsampling") {
    CHECK(align_source_from_string("low") == AlignImageSource::low_fbp);
    CHECK_THROWS_AS(align_source_from_string("mid"), ConfigError);
    Image img(4, 4);
    for (int i = 0; i < 16; ++i) img.vec()[i] = i;
    Image s = box_downsample(img, 2);
    CHECK(s(0, 0) == (0 + 1 + 4 + 5) / 4.0);
    CHECK(s(1, 1) == (10 + 11 + 14 + 15) / 4.0);
    CHECK_THROWS_AS(box_downsample(img, 3), ShapeError);
  }
}
