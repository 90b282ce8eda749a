#include "xdiff/mi_align.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <numeric>

#include "xdiff/io.hpp"
#include "xdiff/projection.hpp"
#include "xdiff/rng.hpp"

namespace xdiff {

using Eigen::MatrixXd;
using Eigen::VectorXd;

void LoraLayer::validate() const {
  if (A.cols() != W.cols() || B.rows() != W.rows() || B.cols() != A.rows()) {
    throw ShapeError("lora factor shapes do not match the base matrix");
  }
  if (A.rows() > std::min(W.rows(), W.cols())) throw InvalidArgument("lora rank exceeds layer width");
}

VectorXd lora_apply(const LoraLayer& layer, const VectorXd& x) {
  if (x.size() != layer.W.cols()) {
    throw ShapeError("lora input length " + std::to_string(x.size()) + " != " + std::to_string(layer.W.cols()));
  }
  return layer.W * x + layer.B * (layer.A * x);
}

MatrixXd lora_apply_rows(const LoraLayer& layer, const MatrixXd& X) {
  if (X.cols() != layer.W.cols()) throw ShapeError("lora token width mismatch");
  return X * layer.W.transpose() + (X * layer.A.transpose()) * layer.B.transpose();
}

LoraLayer lora_init(const MatrixXd& W, int r, std::uint64_t seed) {
  if (r < 0 || r > std::min(W.rows(), W.cols())) throw InvalidArgument("lora rank out of range");
  Rng rng = make_rng(seed, "lora");
  LoraLayer l;
  l.W = W;
  l.A.resize(r, W.cols());
  const double sd = std::sqrt(2.0 / static_cast<double>(W.cols()));
  for (Eigen::Index i = 0; i < l.A.size(); ++i) l.A.data()[i] = sd * standard_normal(rng);
  l.B = MatrixXd::Zero(W.rows(), r);
  return l;
}

LoraLayer lora_init(int r, int D, std::uint64_t seed) { return lora_init(MatrixXd::Zero(D, D), r, seed); }

MatrixXd softmax_rows(const MatrixXd& S) {
  MatrixXd P(S.rows(), S.cols());
  for (Eigen::Index i = 0; i < S.rows(); ++i) {
    const double m = S.row(i).maxCoeff();
    P.row(i) = (S.row(i).array() - m).exp();
    P.row(i) /= P.row(i).sum();
  }
  return P;
}

MatrixXd attention(const MatrixXd& Q, const MatrixXd& K, const MatrixXd& V) {
  if (Q.cols() != K.cols() || K.rows() != V.rows()) throw ShapeError("attention operand shapes differ");
  if (K.rows() == 0) throw ShapeError("attention needs at least one key");
  const MatrixXd P = softmax_rows(Q * K.transpose() / std::sqrt(static_cast<double>(K.cols())));
  return P * V;
}

double gelu(double u) { return 0.5 * u * (1.0 + std::erf(u / std::numbers::sqrt2)); }

double gelu_derivative(double u) {
  return 0.5 * (1.0 + std::erf(u / std::numbers::sqrt2)) +
         u * std::exp(-0.5 * u * u) / std::sqrt(2.0 * std::numbers::pi);
}

MatrixXd CrossAttention::apply(const MatrixXd& F_dec, const MatrixXd& F_MI) const {
  return attention(lora_apply_rows(q, F_dec), lora_apply_rows(k, F_MI), lora_apply_rows(v, F_MI));
}

MatrixXd cross_attention(const CrossAttention& ca, const MatrixXd& F_dec, const MatrixXd& F_MI) {
  return ca.apply(F_dec, F_MI);
}

namespace {

void lora_backward(const LoraLayer& l, const MatrixXd& X, const MatrixXd& dY, LoraLayer& g, MatrixXd& dX) {
  const MatrixXd dM = dY.transpose() * X;
  g.W += dM;
  g.A += l.B.transpose() * dM;
  g.B += dM * l.A.transpose();
  dX += dY * l.merged();
}

LoraLayer lora_zeros(const LoraLayer& l) {
  return {MatrixXd::Zero(l.W.rows(), l.W.cols()), MatrixXd::Zero(l.A.rows(), l.A.cols()),
          MatrixXd::Zero(l.B.rows(), l.B.cols())};
}

}  // namespace

AttentionBlock AttentionBlock::zeros_like(const AttentionBlock& b) {
  return {lora_zeros(b.q), lora_zeros(b.k), lora_zeros(b.v), lora_zeros(b.w0), lora_zeros(b.w1), b.heads};
}

MatrixXd AttentionBlock::forward(const MatrixXd& X, Cache* cache) const {
  const Eigen::Index D = q.W.rows();
  if (heads < 1 || D % heads != 0) throw InvalidArgument("head count must divide the width");
  const Eigen::Index dh = D / heads;
  MatrixXd Q = lora_apply_rows(q, X), K = lora_apply_rows(k, X), V = lora_apply_rows(v, X);
  MatrixXd att(X.rows(), D);
  std::vector<MatrixXd> Ps;
  for (int h = 0; h < heads; ++h) {
    const MatrixXd P = softmax_rows(Q.middleCols(h * dh, dh) * K.middleCols(h * dh, dh).transpose() /
                                    std::sqrt(static_cast<double>(dh)));
    att.middleCols(h * dh, dh) = P * V.middleCols(h * dh, dh);
    if (cache) Ps.push_back(P);
  }
  MatrixXd H = X + att;
  MatrixXd U = lora_apply_rows(w0, H);
  MatrixXd G = U.unaryExpr([](double u) { return gelu(u); });
  MatrixXd out = H + lora_apply_rows(w1, G);
  if (cache) *cache = {X, std::move(Q), std::move(K), std::move(V), std::move(H), std::move(U), std::move(G), std::move(Ps)};
  return out;
}

MatrixXd AttentionBlock::backward(const MatrixXd& dOut, const Cache& c, AttentionBlock& g) const {
  const Eigen::Index D = q.W.rows();
  const Eigen::Index dh = D / heads;
  MatrixXd dH = dOut;
  MatrixXd dG = MatrixXd::Zero(c.G.rows(), c.G.cols());
  lora_backward(w1, c.G, dOut, g.w1, dG);
  const MatrixXd dU = dG.cwiseProduct(c.U.unaryExpr([](double u) { return gelu_derivative(u); }));
  lora_backward(w0, c.H, dU, g.w0, dH);

  MatrixXd dQ(c.Q.rows(), D), dK(c.K.rows(), D), dV(c.V.rows(), D);
  const double scale = 1.0 / std::sqrt(static_cast<double>(dh));
  for (int h = 0; h < heads; ++h) {
    const MatrixXd& P = c.P[h];
    const MatrixXd dA = dH.middleCols(h * dh, dh);
    const MatrixXd dP = dA * c.V.middleCols(h * dh, dh).transpose();
    dV.middleCols(h * dh, dh) = P.transpose() * dA;
    const VectorXd rs = (dP.cwiseProduct(P)).rowwise().sum();
    const MatrixXd dS = P.cwiseProduct(dP.colwise() - rs);
    dQ.middleCols(h * dh, dh) = scale * dS * c.K.middleCols(h * dh, dh);
    dK.middleCols(h * dh, dh) = scale * dS.transpose() * c.Q.middleCols(h * dh, dh);
  }
  MatrixXd dX = dH;
  lora_backward(q, c.X, dQ, g.q, dX);
  lora_backward(k, c.X, dK, g.k, dX);
  lora_backward(v, c.X, dV, g.v, dX);
  return dX;
}

ContrastiveResult contrastive_loss(const MatrixXd& F_img, const MatrixXd& F_mi, double tau) {
  const Eigen::Index n = F_img.rows();
  if (n < 2) throw InvalidArgument("contrastive loss needs at least two pairs");
  if (F_mi.rows() != n || F_mi.cols() != F_img.cols()) throw ShapeError("embedding matrices differ in shape");
  if (!(tau > 0.0)) throw InvalidArgument("temperature must be positive");
  for (Eigen::Index i = 0; i < n; ++i) {
    if (F_img.row(i).norm() == 0.0 || F_mi.row(i).norm() == 0.0) throw InvalidArgument("zero-norm embedding row");
  }
  const MatrixXd S = F_mi * F_img.transpose() / tau;
  const MatrixXd Pr = softmax_rows(S);
  const MatrixXd Pc = softmax_rows(S.transpose()).transpose();
  double loss = 0.0;
  for (Eigen::Index i = 0; i < n; ++i) loss -= std::log(Pr(i, i)) + std::log(Pc(i, i));
  loss /= 2.0 * n;
  const MatrixXd I = MatrixXd::Identity(n, n);
  const MatrixXd dS = ((Pr - I) + (Pc - I)) / (2.0 * n);
  ContrastiveResult r;
  r.loss = loss;
  r.d_mi = dS * F_img / tau;
  r.d_img = dS.transpose() * F_mi / tau;
  r.d_tau = -(dS.cwiseProduct(S)).sum() / tau;
  return r;
}

void DualEncoderConfig::validate() const {
  if (dim < 1 || rank < 0 || rank > dim || blocks < 0 || heads < 1 || dim % heads != 0) {
    throw ConfigError("invalid encoder widths");
  }
  if (patch < 1 || image_size < patch || image_size % patch != 0) {
    throw ConfigError("image_size must be a positive multiple of patch");
  }
  if (!(tau > 0.0)) throw ConfigError("tau must be positive");
}

nlohmann::json DualEncoderConfig::to_json() const {
  return {{"dim", dim}, {"rank", rank}, {"blocks", blocks}, {"heads", heads}, {"patch", patch},
          {"image_size", image_size}, {"tau", tau}, {"log_fields", log_fields},
          {"log_image", log_image}, {"seed", seed}};
}

DualEncoderConfig DualEncoderConfig::from_json(const nlohmann::json& j) {
  DualEncoderConfig c;
  try {
    c.dim = j.value("dim", c.dim);
    c.rank = j.value("rank", c.rank);
    c.blocks = j.value("blocks", c.blocks);
    c.heads = j.value("heads", c.heads);
    c.patch = j.value("patch", c.patch);
    c.image_size = j.value("image_size", c.image_size);
    c.tau = j.value("tau", c.tau);
    c.log_fields = j.value("log_fields", c.log_fields);
    c.log_image = j.value("log_image", c.log_image);
    c.seed = j.value("seed", c.seed);
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("encoder config: ") + e.what());
  }
  c.validate();
  return c;
}

VectorXd prompt_fields(const MetaInfo& m) {
  VectorXd v(kPromptFields);
  v << m.weight_kg, m.height_m, m.injected_dose_mbq, m.drf, m.suv_max, m.suv_mean;
  return v;
}

std::vector<MatrixXd*> EncoderParams::list(unsigned groups) {
  std::vector<MatrixXd*> out;
  if (groups & projection) {
    for (MatrixXd* m : {&patch_embed, &patch_bias, &img_proj, &field_embed, &field_pos, &mi_proj, &log_tau}) {
      out.push_back(m);
    }
  }
  for (auto& b : blocks) {
    for (LoraLayer* l : {&b.q, &b.k, &b.v, &b.w0, &b.w1}) {
      if (groups & lora) {
        out.push_back(&l->A);
        out.push_back(&l->B);
      }
      if (groups & base) out.push_back(&l->W);
    }
  }
  return out;
}

std::vector<std::string> EncoderParams::names(unsigned groups) const {
  std::vector<std::string> out;
  if (groups & projection) {
    for (const char* n : {"patch_embed", "patch_bias", "img_proj", "field_embed", "field_pos", "mi_proj", "log_tau"}) {
      out.emplace_back(n);
    }
  }
  for (std::size_t i = 0; i < blocks.size(); ++i) {
    for (const char* l : {"q", "k", "v", "w0", "w1"}) {
      const std::string p = "block" + std::to_string(i) + "." + l;
      if (groups & lora) {
        out.push_back(p + ".A");
        out.push_back(p + ".B");
      }
      if (groups & base) out.push_back(p + ".W");
    }
  }
  return out;
}

EncoderParams EncoderParams::zeros_like() const {
  EncoderParams z;
  auto zero = [](const MatrixXd& m) { return MatrixXd::Zero(m.rows(), m.cols()); };
  z.patch_embed = zero(patch_embed);
  z.patch_bias = zero(patch_bias);
  z.img_proj = zero(img_proj);
  z.field_embed = zero(field_embed);
  z.field_pos = zero(field_pos);
  z.mi_proj = zero(mi_proj);
  z.log_tau = zero(log_tau);
  for (const auto& b : blocks) z.blocks.push_back(AttentionBlock::zeros_like(b));
  return z;
}

namespace {

MatrixXd gaussian(Eigen::Index r, Eigen::Index c, double sd, Rng& rng) {
  MatrixXd m(r, c);
  for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = sd * standard_normal(rng);
  return m;
}

VectorXd unit(const VectorXd& v) {
  const double n = v.norm();
  if (n == 0.0) throw InvalidArgument("zero-norm embedding");
  return v / n;
}

// Gradient through v / |v|.
VectorXd unit_backward(const VectorXd& v, const VectorXd& d_unit) {
  const double n = v.norm();
  const VectorXd u = v / n;
  return (d_unit - u * u.dot(d_unit)) / n;
}

}  // namespace

DualEncoder::DualEncoder(const DualEncoderConfig& cfg) : cfg_(cfg) {
  cfg_.validate();
  const int D = cfg_.dim;
  const int p2 = cfg_.patch * cfg_.patch;
  Rng rng = make_rng(cfg_.seed, "encoder");
  auto& p = params_;
  p.patch_embed = gaussian(D, p2, std::sqrt(2.0 / p2), rng);
  p.patch_bias = MatrixXd::Zero(D, 1);
  p.img_proj = gaussian(D, D, 1.0 / std::sqrt(D), rng);
  p.field_embed = gaussian(kPromptFields, D, 1.0, rng);
  p.field_pos = gaussian(kPromptFields, D, 0.1, rng);
  p.mi_proj = gaussian(D, D, 1.0 / std::sqrt(D), rng);
  p.log_tau = MatrixXd::Constant(1, 1, std::log(cfg_.tau));
  std::uint64_t lseed = substream_seed(cfg_.seed, "lora");
  for (int b = 0; b < cfg_.blocks; ++b) {
    AttentionBlock blk;
    blk.heads = cfg_.heads;
    LoraLayer* layers[] = {&blk.q, &blk.k, &blk.v, &blk.w0, &blk.w1};
    for (LoraLayer* l : layers) {
      *l = lora_init(gaussian(D, D, 1.0 / std::sqrt(D), rng), cfg_.rank, lseed++);
    }
    blk.w1.W *= 0.5;
    p.blocks.push_back(std::move(blk));
  }
  for (MatrixXd* m : p.list(EncoderParams::projection | EncoderParams::lora | EncoderParams::base)) {
    *m = m->unaryExpr([](double v) { return static_cast<double>(static_cast<float>(v)); });
  }
}

VectorXd DualEncoder::raw_fields(const MetaInfo& m) const {
  VectorXd f = prompt_fields(m);
  if (cfg_.log_fields) f = f.cwiseMax(1e-3).array().log().matrix();
  return f;
}

void DualEncoder::set_normalization(const std::vector<AlignPair>& data) {
  if (data.empty()) throw InvalidArgument("normalization needs data");
  VectorXd s = VectorXd::Zero(kPromptFields), q = VectorXd::Zero(kPromptFields);
  double img = 0.0;
  for (const auto& d : data) {
    const VectorXd f = raw_fields(d.meta);
    s += f;
    q += f.cwiseProduct(f);
    img += std::abs(d.image.sum()) / static_cast<double>(d.image.size());
  }
  const double n = static_cast<double>(data.size());
  fmean_ = s / n;
  fscale_.resize(kPromptFields);
  for (int i = 0; i < kPromptFields; ++i) {
    const double var = std::max(0.0, q[i] / n - fmean_[i] * fmean_[i]);
    fscale_[i] = var > 1e-12 * std::max(1.0, fmean_[i] * fmean_[i]) ? std::sqrt(var) : 1.0;
  }
  image_scale_ = img / n > 0.0 ? img / n : 1.0;
}

Image box_downsample(const Image& img, int factor) {
  if (factor < 1 || img.rows() % factor != 0 || img.cols() % factor != 0) {
    throw ShapeError("image side not divisible by the downsample factor");
  }
  if (factor == 1) return img;
  Image out(img.rows() / factor, img.cols() / factor);
  const double w = 1.0 / (factor * factor);
  for (int r = 0; r < img.rows(); ++r) {
    for (int c = 0; c < img.cols(); ++c) out(r / factor, c / factor) += w * img(r, c);
  }
  return out;
}

MatrixXd DualEncoder::image_patches(const Image& img) const {
  const int n = cfg_.image_size;
  if (img.rows() != img.cols() || img.rows() % n != 0) {
    throw ShapeError("encoder expects a square image whose side is a multiple of " + std::to_string(n));
  }
  const Image small = box_downsample(img, img.rows() / n);
  const int p = cfg_.patch, per = n / p;
  MatrixXd P(per * per, p * p);
  for (int br = 0; br < per; ++br) {
    for (int bc = 0; bc < per; ++bc) {
      for (int r = 0; r < p; ++r) {
        for (int c = 0; c < p; ++c) {
          const double v = small(br * p + r, bc * p + c) / image_scale_;
          P(br * per + bc, r * p + c) = cfg_.log_image ? std::log1p(std::max(v, 0.0)) : v;
        }
      }
    }
  }
  return P;
}

VectorXd DualEncoder::image_forward(const Image& img, ImageCache* c) const {
  const auto& p = params_;
  MatrixXd patches = image_patches(img);
  MatrixXd U = (patches * p.patch_embed.transpose()).rowwise() + p.patch_bias.col(0).transpose();
  const VectorXd pooled = U.unaryExpr([](double u) { return gelu(u); }).colwise().mean().transpose();
  VectorXd g = p.img_proj * pooled;
  VectorXd out = unit(g);
  if (c) *c = {std::move(patches), std::move(U), pooled, g};
  return out;
}

VectorXd DualEncoder::meta_forward(const MetaInfo& m, MetaCache* c) const {
  const auto& p = params_;
  const VectorXd z = (raw_fields(m) - fmean_).cwiseQuotient(fscale_);
  MatrixXd X = z.asDiagonal() * p.field_embed + p.field_pos;
  std::vector<AttentionBlock::Cache> caches(p.blocks.size());
  for (std::size_t b = 0; b < p.blocks.size(); ++b) X = p.blocks[b].forward(X, c ? &caches[b] : nullptr);
  const VectorXd pooled = X.colwise().mean().transpose();
  VectorXd f = p.mi_proj * pooled;
  VectorXd out = unit(f);
  if (c) *c = {z, pooled, f, std::move(caches)};
  return out;
}

void DualEncoder::image_backward(const VectorXd& d_unit, const ImageCache& c, EncoderParams& g) const {
  const auto& p = params_;
  const VectorXd dg = unit_backward(c.g, d_unit);
  g.img_proj += dg * c.pooled.transpose();
  const VectorXd dpooled = p.img_proj.transpose() * dg;
  const double inv = 1.0 / static_cast<double>(c.U.rows());
  MatrixXd dU = c.U.unaryExpr([](double u) { return gelu_derivative(u); });
  for (Eigen::Index r = 0; r < dU.rows(); ++r) dU.row(r) = dU.row(r).cwiseProduct(dpooled.transpose()) * inv;
  g.patch_embed += dU.transpose() * c.patches;
  g.patch_bias.col(0) += dU.colwise().sum().transpose();
}

void DualEncoder::meta_backward(const VectorXd& d_unit, const MetaCache& c, EncoderParams& g) const {
  const auto& p = params_;
  const VectorXd df = unit_backward(c.f, d_unit);
  g.mi_proj += df * c.pooled.transpose();
  const VectorXd dpooled = p.mi_proj.transpose() * df;
  MatrixXd dX = (dpooled / static_cast<double>(kPromptFields)).transpose().replicate(kPromptFields, 1);
  for (std::size_t b = p.blocks.size(); b-- > 0;) dX = p.blocks[b].backward(dX, c.blocks[b], g.blocks[b]);
  g.field_pos += dX;
  g.field_embed += c.z.asDiagonal() * dX;
}

VectorXd DualEncoder::encode_image(const Image& img) const { return image_forward(img, nullptr); }
VectorXd DualEncoder::encode_meta(const MetaInfo& m) const { return meta_forward(m, nullptr); }
VectorXd DualEncoder::encode_prompt(const std::string& prompt) const { return encode_meta(parse_prompt(prompt)); }

double DualEncoder::loss_and_grad(const std::vector<const AlignPair*>& batch, unsigned groups,
                                  std::vector<MatrixXd>* grads) const {
  const Eigen::Index n = static_cast<Eigen::Index>(batch.size());
  const int D = cfg_.dim;
  MatrixXd Fi(n, D), Fm(n, D);
  std::vector<ImageCache> ic(n);
  std::vector<MetaCache> mc(n);
  for (Eigen::Index i = 0; i < n; ++i) {
    Fi.row(i) = image_forward(batch[i]->image, &ic[i]).transpose();
    Fm.row(i) = meta_forward(batch[i]->meta, &mc[i]).transpose();
  }
  const double tau = this->tau();
  const ContrastiveResult r = contrastive_loss(Fi, Fm, tau);
  if (grads) {
    EncoderParams g = params_.zeros_like();
    for (Eigen::Index i = 0; i < n; ++i) {
      image_backward(r.d_img.row(i).transpose(), ic[i], g);
      meta_backward(r.d_mi.row(i).transpose(), mc[i], g);
    }
    g.log_tau(0, 0) = r.d_tau * tau;
    grads->clear();
    for (MatrixXd* m : g.list(groups)) grads->push_back(*m);
  }
  return r.loss;
}

void DualEncoder::save(const std::filesystem::path& stem) const {
  auto& p = const_cast<EncoderParams&>(params_);
  const unsigned all = EncoderParams::projection | EncoderParams::lora | EncoderParams::base;
  Vec flat;
  nlohmann::json shapes = nlohmann::json::array();
  const auto names = p.names(all);
  const auto mats = p.list(all);
  for (std::size_t i = 0; i < mats.size(); ++i) {
    shapes.push_back({{"name", names[i]}, {"rows", mats[i]->rows()}, {"cols", mats[i]->cols()}});
    for (Eigen::Index c = 0; c < mats[i]->cols(); ++c) {
      for (Eigen::Index r = 0; r < mats[i]->rows(); ++r) flat.push_back((*mats[i])(r, c));
    }
  }
  io::write_f32(io::with_suffix(stem, ".raw"), flat);
  nlohmann::json j{{"config", cfg_.to_json()},
                   {"shapes", shapes},
                   {"field_mean", std::vector<double>(fmean_.data(), fmean_.data() + fmean_.size())},
                   {"field_scale", std::vector<double>(fscale_.data(), fscale_.data() + fscale_.size())},
                   {"image_scale", image_scale_},
                   {"count", flat.size()}};
  io::write_json(io::with_suffix(stem, ".json"), j);
}

DualEncoder DualEncoder::load(const std::filesystem::path& stem) {
  const auto j = io::read_json(io::with_suffix(stem, ".json"));
  DualEncoder e;
  try {
    e = DualEncoder(DualEncoderConfig::from_json(j.at("config")));
    const auto fm = j.at("field_mean").get<std::vector<double>>();
    const auto fs = j.at("field_scale").get<std::vector<double>>();
    if (fm.size() != kPromptFields || fs.size() != kPromptFields) throw ConfigError("field statistics length");
    e.fmean_ = Eigen::Map<const VectorXd>(fm.data(), kPromptFields);
    e.fscale_ = Eigen::Map<const VectorXd>(fs.data(), kPromptFields);
    e.image_scale_ = j.at("image_scale").get<double>();
    const auto flat = io::read_f32(io::with_suffix(stem, ".raw"), j.at("count").get<std::size_t>());
    const unsigned all = EncoderParams::projection | EncoderParams::lora | EncoderParams::base;
    auto mats = e.params_.list(all);
    const auto& shapes = j.at("shapes");
    if (shapes.size() != mats.size()) throw ConfigError("checkpoint parameter count differs from config");
    std::size_t off = 0;
    for (std::size_t i = 0; i < mats.size(); ++i) {
      const auto rows = shapes[i].at("rows").get<Eigen::Index>();
      const auto cols = shapes[i].at("cols").get<Eigen::Index>();
      if (rows != mats[i]->rows() || cols != mats[i]->cols()) throw ConfigError("checkpoint shape mismatch");
      for (Eigen::Index c = 0; c < cols; ++c) {
        for (Eigen::Index r = 0; r < rows; ++r) (*mats[i])(r, c) = flat.at(off++);
      }
    }
  } catch (const nlohmann::json::exception& ex) {
    throw ConfigError(std::string("encoder checkpoint: ") + ex.what());
  }
  return e;
}

AlignTrainResult train_dual_encoder(const std::vector<AlignPair>& pairs, const DualEncoderConfig& cfg,
                                    const AlignTrainOptions& opt) {
  if (pairs.size() < 2) throw InvalidArgument("training needs at least two pairs");
  if (opt.epochs < 0 || opt.batch < 2 || !(opt.lr > 0.0)) throw InvalidArgument("invalid training options");
  AlignTrainResult res;
  DualEncoder& enc = res.encoder;
  enc = DualEncoder(cfg);
  enc.set_normalization(pairs);
  const unsigned groups = EncoderParams::projection | (opt.lora ? EncoderParams::lora : 0u);
  auto params = enc.params().list(groups);
  std::vector<MatrixXd> m1, m2;
  for (auto* p : params) {
    m1.push_back(MatrixXd::Zero(p->rows(), p->cols()));
    m2.push_back(MatrixXd::Zero(p->rows(), p->cols()));
  }
  const double b1 = 0.9, b2 = 0.999, eps = 1e-8;
  long step = 0;
  Rng rng = make_rng(opt.seed, "align-train");
  std::vector<std::size_t> order(pairs.size());
  std::iota(order.begin(), order.end(), 0);
  const std::size_t bs = std::min<std::size_t>(opt.batch, pairs.size());
  std::vector<MatrixXd> grads;
  const double total_steps = std::max<double>(1.0, static_cast<double>(opt.epochs) * (pairs.size() / bs));
  for (int e = 0; e < opt.epochs; ++e) {
    for (std::size_t i = order.size(); i > 1; --i) {
      std::swap(order[i - 1], order[static_cast<std::size_t>(uniform01(rng) * i)]);
    }
    double total = 0.0;
    int batches = 0;
    for (std::size_t s = 0; s + bs <= order.size(); s += bs) {
      std::vector<const AlignPair*> batch;
      for (std::size_t k = s; k < s + bs; ++k) batch.push_back(&pairs[order[k]]);
      total += enc.loss_and_grad(batch, groups, &grads);
      ++batches;
      ++step;
      const double c1 = 1.0 - std::pow(b1, step), c2 = 1.0 - std::pow(b2, step);
      const double lr = opt.lr * 0.5 * (1.0 + std::cos(std::numbers::pi * (step - 1) / total_steps));
      for (std::size_t k = 0; k < params.size(); ++k) {
        m1[k] = b1 * m1[k] + (1.0 - b1) * grads[k];
        m2[k] = b2 * m2[k] + (1.0 - b2) * grads[k].cwiseProduct(grads[k]);
        *params[k] -= lr * ((m1[k] / c1).array() / ((m2[k] / c2).array().sqrt() + eps)).matrix();
      }
      double& lt = enc.params().log_tau(0, 0);
      lt = std::max(lt, std::log(opt.min_tau));
    }
    res.epoch_loss.push_back(total / std::max(1, batches));
  }
  for (auto* p : params) *p = p->unaryExpr([](double v) { return static_cast<double>(static_cast<float>(v)); });
  return res;
}

std::vector<double> align_probability(const DualEncoder& enc, const Image& image,
                                      const std::vector<std::string>& prompts) {
  if (prompts.empty()) throw InvalidArgument("align_probability needs at least one prompt");
  const VectorXd fi = enc.encode_image(image);
  VectorXd logits(static_cast<Eigen::Index>(prompts.size()));
  for (std::size_t i = 0; i < prompts.size(); ++i) logits[i] = fi.dot(enc.encode_prompt(prompts[i])) / enc.tau();
  const MatrixXd p = softmax_rows(logits.transpose());
  return std::vector<double>(p.data(), p.data() + p.size());
}

double align_accuracy(const DualEncoder& enc, const std::vector<AlignPair>& items, int distractors,
                      std::uint64_t seed) {
  if (distractors < 1 || items.size() < static_cast<std::size_t>(distractors) + 1) {
    throw InvalidArgument("not enough items for the requested distractors");
  }
  Rng rng = make_rng(seed, "align-eval");
  std::vector<VectorXd> mi;
  for (const auto& it : items) mi.push_back(enc.encode_meta(it.meta));
  int hits = 0;
  for (std::size_t i = 0; i < items.size(); ++i) {
    std::vector<std::size_t> others;
    for (std::size_t k = 0; k < items.size(); ++k) {
      if (k != i) others.push_back(k);
    }
    for (int d = 0; d < distractors; ++d) {
      const std::size_t pick = d + static_cast<std::size_t>(uniform01(rng) * (others.size() - d));
      std::swap(others[d], others[pick]);
    }
    const VectorXd fi = enc.encode_image(items[i].image);
    const double own = fi.dot(mi[i]);
    bool win = true;
    for (int d = 0; d < distractors; ++d) win = win && own > fi.dot(mi[others[d]]);
    hits += win ? 1 : 0;
  }
  return static_cast<double>(hits) / static_cast<double>(items.size());
}

AlignImageSource align_source_from_string(const std::string& s) {
  if (s == "phantom") return AlignImageSource::phantom;
  if (s == "full") return AlignImageSource::full_fbp;
  if (s == "low") return AlignImageSource::low_fbp;
  throw ConfigError("unknown alignment image source '" + s + "'");
}

std::vector<AlignPair> make_align_pairs(int count, std::uint64_t seed, const CaseConfig& cfg,
                                        AlignImageSource source) {
  if (count < 1) throw InvalidArgument("pair count must be positive");
  std::vector<AlignPair> out;
  out.reserve(count);
  for (int i = 0; i < count; ++i) {
    const Case c = generate_case(substream_seed(seed, "align" + std::to_string(i)), cfg,
                                 "align" + std::to_string(i), source != AlignImageSource::phantom);
    if (source == AlignImageSource::phantom) {
      out.push_back({c.phantom.image, c.meta});
      continue;
    }
    Image img = fbp(source == AlignImageSource::full_fbp ? c.acq.full : c.acq.low);
    const double k = 1.0 / c.acq.counts_scale;
    for (double& v : img.vec()) v *= k;
    out.push_back({std::move(img), c.meta});
  }
  return out;
}

}  // namespace xdiff
