#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "xdiff/datasim.hpp"
#include "xdiff/image.hpp"

namespace xdiff {

// Effective map W + B A with W frozen.
struct LoraLayer {
  Eigen::MatrixXd W;  // out x in
  Eigen::MatrixXd A;  // r x in
  Eigen::MatrixXd B;  // out x r

  int rank() const { return static_cast<int>(A.rows()); }
  int in_dim() const { return static_cast<int>(W.cols()); }
  int out_dim() const { return static_cast<int>(W.rows()); }
  Eigen::MatrixXd merged() const { return W + B * A; }
  void validate() const;
};

Eigen::VectorXd lora_apply(const LoraLayer& layer, const Eigen::VectorXd& x);
// Row-token form: X (tokens x in) -> X (W + BA)^T.
Eigen::MatrixXd lora_apply_rows(const LoraLayer& layer, const Eigen::MatrixXd& X);

// A ~ N(0, 2 / in) per entry, B = 0.
LoraLayer lora_init(const Eigen::MatrixXd& W, int r, std::uint64_t seed);
LoraLayer lora_init(int r, int D, std::uint64_t seed);

Eigen::MatrixXd softmax_rows(const Eigen::MatrixXd& S);
// softmax(Q K^T / sqrt(d)) V with d the key width.
Eigen::MatrixXd attention(const Eigen::MatrixXd& Q, const Eigen::MatrixXd& K, const Eigen::MatrixXd& V);

double gelu(double u);
double gelu_derivative(double u);

// Q from decoder tokens, K and V from MI tokens.
struct CrossAttention {
  LoraLayer q, k, v;
  Eigen::MatrixXd apply(const Eigen::MatrixXd& F_dec, const Eigen::MatrixXd& F_MI) const;
};

Eigen::MatrixXd cross_attention(const CrossAttention& ca, const Eigen::MatrixXd& F_dec,
                                const Eigen::MatrixXd& F_MI);

// H = X + attn(X Wq, X Wk, X Wv); out = H + W1 gelu(W0 H), every projection LoRA-adapted.
struct AttentionBlock {
  LoraLayer q, k, v, w0, w1;
  int heads = 1;

  struct Cache {
    Eigen::MatrixXd X, Q, K, V, H, U, G;
    std::vector<Eigen::MatrixXd> P;  // per-head attention weights
  };

  Eigen::MatrixXd forward(const Eigen::MatrixXd& X, Cache* cache = nullptr) const;
  // Accumulates parameter gradients into grad (same shapes) and returns dL/dX.
  Eigen::MatrixXd backward(const Eigen::MatrixXd& dOut, const Cache& cache, AttentionBlock& grad) const;

  static AttentionBlock zeros_like(const AttentionBlock& b);
};

struct ContrastiveResult {
  double loss = 0.0;
  Eigen::MatrixXd d_img;
  Eigen::MatrixXd d_mi;
  double d_tau = 0.0;
};

// Symmetric InfoNCE on S = F_mi F_img^T / tau with matches on the diagonal.
ContrastiveResult contrastive_loss(const Eigen::MatrixXd& F_img, const Eigen::MatrixXd& F_mi, double tau);

struct DualEncoderConfig {
  int dim = 32;
  int rank = 4;
  int blocks = 2;
  int heads = 1;
  int patch = 8;
  int image_size = 32;  // branch input side; larger inputs are box-downsampled
  double tau = 0.07;
  bool log_fields = true;  // standardize log of each prompt field
  bool log_image = true;   // patch values log1p(x / image_scale)
  std::uint64_t seed = 1;

  void validate() const;
  nlohmann::json to_json() const;
  static DualEncoderConfig from_json(const nlohmann::json& j);
};

constexpr int kPromptFields = 6;

// Prompt fields in render order: weight, height, dose, drf, suv_max, suv_mean.
Eigen::VectorXd prompt_fields(const MetaInfo& m);

struct EncoderParams {
  Eigen::MatrixXd patch_embed;  // dim x patch^2
  Eigen::MatrixXd patch_bias;   // dim x 1
  Eigen::MatrixXd img_proj;     // dim x dim
  Eigen::MatrixXd field_embed;  // fields x dim
  Eigen::MatrixXd field_pos;    // fields x dim
  Eigen::MatrixXd mi_proj;      // dim x dim
  Eigen::MatrixXd log_tau;      // 1 x 1
  std::vector<AttentionBlock> blocks;

  enum Group : unsigned { projection = 1, lora = 2, base = 4 };
  // Pointers in a fixed order; names match.
  std::vector<Eigen::MatrixXd*> list(unsigned groups);
  std::vector<std::string> names(unsigned groups) const;
  EncoderParams zeros_like() const;
};

struct AlignPair {
  Image image;
  MetaInfo meta;
};

class DualEncoder {
 public:
  DualEncoder() = default;
  explicit DualEncoder(const DualEncoderConfig& cfg);

  const DualEncoderConfig& config() const { return cfg_; }
  double tau() const { return std::exp(params_.log_tau(0, 0)); }
  EncoderParams& params() { return params_; }
  const EncoderParams& params() const { return params_; }

  // Field standardization and image scale, taken from training data.
  void set_normalization(const std::vector<AlignPair>& data);
  const Eigen::VectorXd& field_mean() const { return fmean_; }
  const Eigen::VectorXd& field_scale() const { return fscale_; }
  double image_scale() const { return image_scale_; }

  Eigen::VectorXd encode_image(const Image& img) const;
  Eigen::VectorXd encode_meta(const MetaInfo& m) const;
  Eigen::VectorXd encode_prompt(const std::string& prompt) const;

  // Loss and gradients over one batch, in the order of params().list(groups).
  double loss_and_grad(const std::vector<const AlignPair*>& batch, unsigned groups,
                       std::vector<Eigen::MatrixXd>* grads) const;

  void save(const std::filesystem::path& stem) const;
  static DualEncoder load(const std::filesystem::path& stem);

 private:
  struct ImageCache {
    Eigen::MatrixXd patches, U;
    Eigen::VectorXd pooled, g;
  };
  struct MetaCache {
    Eigen::VectorXd z, pooled, f;
    std::vector<AttentionBlock::Cache> blocks;
  };

  Eigen::VectorXd raw_fields(const MetaInfo& m) const;
  Eigen::MatrixXd image_patches(const Image& img) const;
  Eigen::VectorXd image_forward(const Image& img, ImageCache* c) const;
  Eigen::VectorXd meta_forward(const MetaInfo& m, MetaCache* c) const;
  void image_backward(const Eigen::VectorXd& d_unit, const ImageCache& c, EncoderParams& g) const;
  void meta_backward(const Eigen::VectorXd& d_unit, const MetaCache& c, EncoderParams& g) const;

  DualEncoderConfig cfg_;
  EncoderParams params_;
  Eigen::VectorXd fmean_ = Eigen::VectorXd::Zero(kPromptFields);
  Eigen::VectorXd fscale_ = Eigen::VectorXd::Ones(kPromptFields);
  double image_scale_ = 1.0;
};

struct AlignTrainOptions {
  int epochs = 40;
  int batch = 32;
  double lr = 3e-3;
  bool lora = true;
  double min_tau = 0.01;  // log tau is clamped after each step
  std::uint64_t seed = 1;
};

struct AlignTrainResult {
  DualEncoder encoder;
  std::vector<double> epoch_loss;
};

// Adam with cosine learning-rate decay on the contrastive loss. Base weights stay frozen; LoRA factors train only when enabled.
AlignTrainResult train_dual_encoder(const std::vector<AlignPair>& pairs, const DualEncoderConfig& cfg,
                                    const AlignTrainOptions& opt);

// Softmax over cosine similarity / tau between the image and each prompt.
std::vector<double> align_probability(const DualEncoder& enc, const Image& image,
                                      const std::vector<std::string>& prompts);

// Fraction of items whose own prompt wins among itself and `distractors` others.
double align_accuracy(const DualEncoder& enc, const std::vector<AlignPair>& items, int distractors,
                      std::uint64_t seed);

enum class AlignImageSource { phantom, full_fbp, low_fbp };

// Activity images from generated cases paired with their prompts.
std::vector<AlignPair> make_align_pairs(int count, std::uint64_t seed, const CaseConfig& cfg,
                                        AlignImageSource source = AlignImageSource::phantom);
AlignImageSource align_source_from_string(const std::string& s);

// Mean-pools a square image by an integer factor.
Image box_downsample(const Image& img, int factor);

}  // namespace xdiff
