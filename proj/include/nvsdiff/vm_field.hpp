#pragma once

#include <torch/nn/module.h>
#include <torch/nn/modules/linear.h>
#include <torch/types.h>

#include <filesystem>
#include <memory>

namespace nvsdiff {

// Density and color heads shared by every field a model produces.
// density = softplus(linear(feature)), rgb = sigmoid(W2 silu(W1 feature + b1) + b2).
class FieldHeadsImpl : public torch::nn::Module {
 public:
  FieldHeadsImpl(int64_t channels, int64_t hidden);

  torch::Tensor density(const torch::Tensor& features);
  torch::Tensor color(const torch::Tensor& features);

  // Sets every weight and bias to zero.
  void zero_();

  int64_t channels() const { return channels_; }
  int64_t hidden() const { return hidden_; }

  torch::nn::Linear density_head{nullptr};
  torch::nn::Linear color_hidden{nullptr};
  torch::nn::Linear color_out{nullptr};

 private:
  int64_t channels_;
  int64_t hidden_;
};
TORCH_MODULE(FieldHeads);

// Vector-matrix factorized feature grid over the cube [-1, 1]^3:
//   S = V_x o M_yz + V_y o M_zx + V_z o M_xy   (channelwise products)
// Grid nodes sit at -1 + 2 i / (G - 1) on every axis. A leading batch
// dimension lets one model call produce several scenes at once.
struct VMField {
  torch::Tensor planes;  // [B, 3, C, G, G]: M_yz[y][z], M_zx[z][x], M_xy[x][y]
  torch::Tensor lines;   // [B, 3, C, G]: V_x, V_y, V_z
  FieldHeads heads{nullptr};

  int64_t batch() const { return planes.size(0); }
  int64_t channels() const { return planes.size(2); }
  int64_t grid() const { return planes.size(3); }

  // Zero-valued field sharing `heads`.
  static VMField zeros(int64_t batch, int64_t grid, int64_t channels, FieldHeads heads,
                       torch::TensorOptions opts = torch::kFloat32);
  // Gaussian-initialized field with standard deviation `scale`.
  static VMField random(int64_t batch, int64_t grid, int64_t channels, FieldHeads heads,
                        double scale, torch::TensorOptions opts = torch::kFloat32,
                        std::optional<torch::Generator> gen = std::nullopt);

  VMField select(int64_t index) const;
  void validate() const;
};

struct FieldQuery {
  torch::Tensor density;   // [B, N]
  torch::Tensor features;  // [B, N, C]
};

// Pre-head features at continuous points [B, N, 3]; points outside the cube
// are clamped onto its boundary.
torch::Tensor query_features(const VMField& field, const torch::Tensor& points);
FieldQuery query(const VMField& field, const torch::Tensor& points);
torch::Tensor color(const VMField& field, const torch::Tensor& features);

// Dense G x G x G x C tensor of the factorization at grid nodes, for one batch
// entry. Refuses grids above kMaxDenseGrid.
inline constexpr int64_t kMaxDenseGrid = 64;
torch::Tensor to_dense(const VMField& field, int64_t batch_index = 0);

// Standalone export of a single field (batch 1) with its heads.
void save_field(const VMField& field, const std::filesystem::path& path);
VMField load_field(const std::filesystem::path& path);

}  // namespace nvsdiff
