#include "nvsdiff/renderer.hpp"

#include <torch/torch.h>

#include <string>

namespace nvsdiff {

RaySamples sample_along_ray(const RayBundle& rays, int samples, bool stratified,
                            std::optional<torch::Generator> gen) {
  if (samples < 2) throw ValidationError("sample_along_ray needs at least 2 samples per ray");
  if (!(rays.near >= 0.0 && rays.near < rays.far))
    throw ValidationError("ray bundle bounds must satisfy 0 <= near < far");
  const auto opts = rays.origins.options();
  const int64_t n = rays.origins.size(0);
  const double bin = (rays.far - rays.near) / samples;

  auto left = torch::arange(samples, opts).mul(bin).add(rays.near).expand({n, samples});
  torch::Tensor ts;
  if (stratified) {
    ts = left + torch::rand({n, samples}, gen, opts) * bin;
  } else {
    ts = (left + 0.5 * bin).contiguous();
  }

  auto diffs = ts.narrow(1, 1, samples - 1) - ts.narrow(1, 0, samples - 1);
  auto last = diffs.mean(1, true);
  auto deltas = torch::cat({diffs, last}, 1);

  auto positions = rays.origins.unsqueeze(1) + ts.unsqueeze(-1) * rays.directions.unsqueeze(1);
  return {positions, ts, deltas};
}

RenderOutput composite(const torch::Tensor& densities, const torch::Tensor& colors,
                       const torch::Tensor& deltas) {
  if (densities.sizes() != deltas.sizes())
    throw ValidationError("composite: densities and deltas must have the same shape");
  if (colors.dim() != densities.dim() + 1 || colors.size(-1) != 3)
    throw ValidationError("composite: colors must be densities.shape + [3]");
  if ((densities < 0).any().item<bool>())
    throw ValidationError("composite: densities must be non-negative");

  auto tau = densities * deltas;
  auto alpha = 1.0 - torch::exp(-tau);
  // Exclusive cumulative optical depth.
  auto accum = torch::cumsum(tau, -1) - tau;
  auto trans = torch::exp(-accum);
  auto weights = trans * alpha;

  RenderOutput out;
  out.color = (weights.unsqueeze(-1) * colors).sum(-2);
  out.weights = weights;
  out.transmittance = trans;
  out.opacity = weights.sum(-1);
  return out;
}

namespace {

RenderOutput render_samples(const VMField& fields, std::span<const RayBundle> rays,
                            const RenderOptions& options, std::optional<torch::Generator> gen) {
  fields.validate();
  if (static_cast<int64_t>(rays.size()) != fields.batch())
    throw ValidationError("render: expected " + std::to_string(fields.batch()) +
                          " ray bundles, got " + std::to_string(rays.size()));
  const int s = options.samples_per_ray;
  std::vector<torch::Tensor> positions, ts, deltas;
  positions.reserve(rays.size());
  for (const auto& bundle : rays) {
    auto smp = sample_along_ray(bundle, s, options.stratified, gen);
    positions.push_back(smp.positions);
    ts.push_back(smp.ts);
    deltas.push_back(smp.deltas);
  }
  auto pos = torch::stack(positions).to(fields.planes.scalar_type());  // [B, N, S, 3]
  const int64_t b = pos.size(0);
  const int64_t n = pos.size(1);

  auto q = query(fields, pos.reshape({b, n * s, 3}));
  auto rgb = color(fields, q.features);
  auto t = torch::stack(ts).to(pos.scalar_type());
  auto d = torch::stack(deltas).to(pos.scalar_type());
  auto out = composite(q.density.reshape({b, n, s}), rgb.reshape({b, n, s, 3}), d);
  out.depth = (out.weights * t).sum(-1);
  out.ts = t;
  out.deltas = d;
  return out;
}

}  // namespace

RenderOutput render(const VMField& field, const RayBundle& rays, const RenderOptions& options,
                    std::optional<torch::Generator> gen) {
  if (field.batch() != 1) throw ValidationError("render expects a single field");
  auto out = render_samples(field, std::span<const RayBundle>(&rays, 1), options, gen);
  for (auto* t : {&out.color, &out.weights, &out.transmittance, &out.depth, &out.opacity,
                  &out.ts, &out.deltas})
    *t = t->squeeze(0);
  return out;
}

RenderOutput render_batch(const VMField& fields, std::span<const RayBundle> rays,
                          const RenderOptions& options, std::optional<torch::Generator> gen) {
  return render_samples(fields, rays, options, gen);
}

torch::Tensor distortion_loss(const torch::Tensor& weights, const torch::Tensor& ts,
                              const torch::Tensor& deltas) {
  if (weights.sizes() != ts.sizes() || weights.sizes() != deltas.sizes())
    throw ValidationError("distortion_loss: weights, ts and deltas must share a shape");
  auto pair = (ts.unsqueeze(-1) - ts.unsqueeze(-2)).abs();
  auto inter = (weights.unsqueeze(-1) * weights.unsqueeze(-2) * pair).sum({-1, -2});
  auto self = (weights * weights * deltas).sum(-1) / 3.0;
  return (inter + self).mean();
}

}  // namespace nvsdiff
