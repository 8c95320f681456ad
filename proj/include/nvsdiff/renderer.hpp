#pragma once

#include "nvsdiff/camera.hpp"
#include "nvsdiff/vm_field.hpp"

#include <torch/types.h>

#include <optional>
#include <span>

namespace nvsdiff {

struct RaySamples {
  torch::Tensor positions;  // [N, S, 3]
  torch::Tensor ts;         // [N, S], strictly increasing per ray
  torch::Tensor deltas;     // [N, S], spacing to the next sample
};

struct RenderOutput {
  torch::Tensor color;          // [..., 3], premultiplied over a black background
  torch::Tensor weights;        // [..., S]
  torch::Tensor transmittance;  // [..., S]
  torch::Tensor depth;          // [...], expected depth sum_u w_u t_u
  torch::Tensor opacity;        // [...], sum_u w_u
  torch::Tensor ts;             // [..., S]
  torch::Tensor deltas;         // [..., S]
};

struct RenderOptions {
  int samples_per_ray = 48;
  bool stratified = true;
};

// S samples per ray over [near, far] split into S equal bins: bin midpoints,
// or one uniform draw per bin when stratified. The last delta is the mean of
// the others.
RaySamples sample_along_ray(const RayBundle& rays, int samples, bool stratified,
                            std::optional<torch::Generator> gen = std::nullopt);

// Discrete volume rendering over the trailing sample axis:
//   T_u = exp(-sum_{l<u} sigma_l delta_l),  w_u = T_u (1 - exp(-sigma_u delta_u)),
//   C = sum_u w_u c_u.
// Rejects negative densities.
RenderOutput composite(const torch::Tensor& densities, const torch::Tensor& colors,
                       const torch::Tensor& deltas);

// sample -> query -> color -> composite for a single field (batch 1).
RenderOutput render(const VMField& field, const RayBundle& rays, const RenderOptions& options,
                    std::optional<torch::Generator> gen = std::nullopt);

// Renders field b with rays[b]; all bundles must have the same ray count.
// Outputs carry a leading batch dimension.
RenderOutput render_batch(const VMField& fields, std::span<const RayBundle> rays,
                          const RenderOptions& options,
                          std::optional<torch::Generator> gen = std::nullopt);

// Distortion regularizer, averaged over rays:
//   sum_{i,j} w_i w_j |m_i - m_j| + 1/3 sum_i w_i^2 delta_i
// with m the sample positions (interval midpoints).
torch::Tensor distortion_loss(const torch::Tensor& weights, const torch::Tensor& ts,
                              const torch::Tensor& deltas);

}  // namespace nvsdiff
