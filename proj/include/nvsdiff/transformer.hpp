#pragma once

#include "nvsdiff/camera.hpp"
#include "nvsdiff/vm_field.hpp"

#include "json.hpp"
#include <torch/nn/module.h>
#include <torch/nn/modules/container/modulelist.h>
#include <torch/nn/modules/container/sequential.h>
#include <torch/nn/modules/linear.h>
#include <torch/nn/modules/normalization.h>

#include <array>
#include <vector>

namespace nvsdiff {

struct ModelConfig {
  int image_height = 32;
  int image_width = 32;
  int patch = 4;
  int dim = 192;
  int encoder_depth = 6;
  int decoder_depth = 8;
  int heads = 6;
  double mlp_ratio = 4.0;
  int grid = 24;
  int channels = 16;
  int matrix_patch = 3;
  int vector_patch = 3;
  int head_hidden = 32;
  double reference_dropout = 0.1;
  // Ablation switches.
  bool use_encoder = true;
  bool camera_conditioning = true;
  // Adds a sinusoidal diffusion-step embedding to every conditioning stream.
  bool timestep_conditioning = false;

  void validate() const;
  int image_tokens() const { return (image_height / patch) * (image_width / patch); }
  int matrix_tokens_per_plane() const {
    return (grid / matrix_patch) * (grid / matrix_patch);
  }
  int vector_tokens_per_line() const { return grid / vector_patch; }
  int output_tokens() const { return 3 * matrix_tokens_per_plane() + 3 * vector_tokens_per_line(); }
  int decoder_tokens() const { return output_tokens() + 2 * image_tokens(); }
  int mlp_hidden() const { return static_cast<int>(dim * mlp_ratio); }

  nlohmann::json to_json() const;
  static ModelConfig from_json(const nlohmann::json& j);
};

// Per-datum camera information visible to the model.
struct CameraConditioning {
  double r_d = 1.0;
  double focal = 1.0;  // focal length divided by image width
  Mat3 rotation = Mat3::Identity();   // R_ir
  Vec3 translation = Vec3::Zero();    // T_ir

  void validate() const;
  // Conditioning used when the reference is replaced by the null token.
  CameraConditioning without_reference() const {
    return {r_d, focal, Mat3::Identity(), Vec3::Zero()};
  }
};

enum class TokenGroup : int { kOutput = 0, kNoisy = 1, kReference = 2 };

struct GroupSizes {
  int64_t output = 0;
  int64_t noisy = 0;
  int64_t reference = 0;
  int64_t total() const { return output + noisy + reference; }
};

// Per-token-group modulation, each [B, D].
struct Modulation {
  torch::Tensor shift;
  torch::Tensor scale;
  torch::Tensor gate;
};

// LayerNorm without affine parameters, then x * (1 + scale) + shift.
torch::Tensor adaln_modulate(const torch::Tensor& normalized, const torch::Tensor& shift,
                             const torch::Tensor& scale);

// Broadcasts per-group [B, D] vectors to a [B, M, D] token tensor laid out as
// [output | noisy | reference].
torch::Tensor expand_groups(const std::array<torch::Tensor, 3>& per_group, const GroupSizes& sizes);

class AttentionImpl : public torch::nn::Module {
 public:
  AttentionImpl(int64_t dim, int64_t heads);
  torch::Tensor forward(const torch::Tensor& x);
  // Softmax attention probabilities [B, heads, M, M], for inspection.
  torch::Tensor attention_probs(const torch::Tensor& x);

  torch::nn::Linear qkv{nullptr};
  torch::nn::Linear proj{nullptr};

 private:
  int64_t heads_;
  int64_t head_dim_;
};
TORCH_MODULE(Attention);

class MlpImpl : public torch::nn::Module {
 public:
  MlpImpl(int64_t dim, int64_t hidden);
  torch::Tensor forward(const torch::Tensor& x);
  torch::nn::Linear fc1{nullptr};
  torch::nn::Linear fc2{nullptr};
};
TORCH_MODULE(Mlp);

// Pre-norm transformer block used by the encoder.
class EncoderBlockImpl : public torch::nn::Module {
 public:
  EncoderBlockImpl(int64_t dim, int64_t heads, int64_t mlp_hidden);
  torch::Tensor forward(const torch::Tensor& x);

  torch::nn::LayerNorm norm1{nullptr};
  Attention attn{nullptr};
  torch::nn::LayerNorm norm2{nullptr};
  Mlp mlp{nullptr};
};
TORCH_MODULE(EncoderBlock);

// Decoder block: joint self-attention over all tokens with AdaLN-zero
// modulation computed separately for each token group.
class AdaLnBlockImpl : public torch::nn::Module {
 public:
  AdaLnBlockImpl(int64_t dim, int64_t heads, int64_t mlp_hidden, int64_t cond_dim);

  // cond: per-group conditioning embeddings, each [B, cond_dim].
  torch::Tensor forward(const torch::Tensor& x, const GroupSizes& sizes,
                        const std::array<torch::Tensor, 3>& cond);

  // (shift, scale, gate) for the attention and MLP branches of one group.
  std::array<Modulation, 2> modulation(TokenGroup group, const torch::Tensor& cond);

  torch::nn::LayerNorm norm1{nullptr};
  Attention attn{nullptr};
  torch::nn::LayerNorm norm2{nullptr};
  Mlp mlp{nullptr};
  std::array<torch::nn::Linear, 3> modulators{nullptr, nullptr, nullptr};

 private:
  int64_t dim_;
};
TORCH_MODULE(AdaLnBlock);

// Abstract scene predictor: maps a noisy input view and an optional reference
// to a VM field in the canonical input frame.
class FieldPredictor {
 public:
  virtual ~FieldPredictor() = default;
  // z_t: [B, H, W, 3]; x_ref: [B, H, W, 3] (may be undefined when every entry
  // is dropped); ref_present: bool [B]; t: diffusion step per entry.
  virtual VMField predict(const torch::Tensor& z_t, const torch::Tensor& x_ref,
                          const torch::Tensor& ref_present,
                          const std::vector<CameraConditioning>& cond,
                          const std::vector<double>& t) = 0;
};

class NvsTransformerImpl : public torch::nn::Module, public FieldPredictor {
 public:
  explicit NvsTransformerImpl(ModelConfig config);

  const ModelConfig& config() const { return config_; }

  // [B, H, W, 3] -> tokens [B, (H/p)(W/p), D] with positional embeddings.
  torch::Tensor encode(const torch::Tensor& image);

  // Conditioning embeddings for (output, noisy, reference) groups, each
  // [B, D]. Reference conditioning uses identity/zero pose where the
  // reference is absent.
  std::array<torch::Tensor, 3> embed_conditioning(const std::vector<CameraConditioning>& cond,
                                                  const torch::Tensor& ref_present,
                                                  const std::vector<double>& t);

  // Joint self-attention decoder; returns the output-token slice.
  torch::Tensor decode(const torch::Tensor& noisy_tokens, const torch::Tensor& reference_tokens,
                       const std::array<torch::Tensor, 3>& cond);

  // Output tokens [B, M_out, D] -> VM field.
  VMField tokens_to_field(const torch::Tensor& output_tokens);

  VMField predict(const torch::Tensor& z_t, const torch::Tensor& x_ref,
                  const torch::Tensor& ref_present, const std::vector<CameraConditioning>& cond,
                  const std::vector<double>& t) override;

  int64_t parameter_count() const;

  torch::nn::Linear patch_embed{nullptr};
  torch::Tensor encoder_pos;
  torch::nn::ModuleList encoder_blocks{nullptr};
  torch::nn::LayerNorm encoder_norm{nullptr};

  torch::Tensor output_token;
  torch::Tensor output_pos;
  torch::Tensor null_reference;

  torch::nn::Sequential output_cond{nullptr};
  torch::nn::Sequential noisy_cond{nullptr};
  torch::nn::Sequential reference_cond{nullptr};
  torch::nn::Sequential time_cond{nullptr};

  torch::nn::ModuleList decoder_blocks{nullptr};
  torch::nn::LayerNorm decoder_norm{nullptr};
  torch::nn::Linear matrix_proj{nullptr};
  torch::nn::Linear vector_proj{nullptr};
  FieldHeads heads{nullptr};

 private:
  ModelConfig config_;
};
TORCH_MODULE(NvsTransformer);

// Flattens conditioning into tensors: [B, 2] (r_d, focal) and [B, 12] (R, T).
torch::Tensor camera_scalars(const std::vector<CameraConditioning>& cond);
torch::Tensor pose_features(const std::vector<CameraConditioning>& cond);

// Splits [B, H, W, 3] into row-major patches [B, (H/p)(W/p), p*p*3].
torch::Tensor patchify(const torch::Tensor& image, int patch);

}  // namespace nvsdiff
