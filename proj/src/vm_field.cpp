#include "nvsdiff/vm_field.hpp"

#include "nvsdiff/camera.hpp"

#include <torch/torch.h>

#include <string>

namespace nvsdiff {

namespace F = torch::nn::functional;

FieldHeadsImpl::FieldHeadsImpl(int64_t channels, int64_t hidden)
    : channels_(channels), hidden_(hidden) {
  density_head = register_module("density_head", torch::nn::Linear(channels, 1));
  color_hidden = register_module("color_hidden", torch::nn::Linear(channels, hidden));
  color_out = register_module("color_out", torch::nn::Linear(hidden, 3));
}

torch::Tensor FieldHeadsImpl::density(const torch::Tensor& features) {
  return F::softplus(density_head(features)).squeeze(-1);
}

torch::Tensor FieldHeadsImpl::color(const torch::Tensor& features) {
  return torch::sigmoid(color_out(torch::silu(color_hidden(features))));
}

void FieldHeadsImpl::zero_() {
  torch::NoGradGuard guard;
  for (auto& p : parameters()) p.zero_();
}

VMField VMField::zeros(int64_t batch, int64_t grid, int64_t channels, FieldHeads heads,
                       torch::TensorOptions opts) {
  return {torch::zeros({batch, 3, channels, grid, grid}, opts),
          torch::zeros({batch, 3, channels, grid}, opts), std::move(heads)};
}

VMField VMField::random(int64_t batch, int64_t grid, int64_t channels, FieldHeads heads,
                        double scale, torch::TensorOptions opts,
                        std::optional<torch::Generator> gen) {
  auto planes = torch::randn({batch, 3, channels, grid, grid}, gen, opts).mul_(scale);
  auto lines = torch::randn({batch, 3, channels, grid}, gen, opts).mul_(scale);
  return {planes, lines, std::move(heads)};
}

VMField VMField::select(int64_t index) const {
  return {planes.narrow(0, index, 1), lines.narrow(0, index, 1), heads};
}

void VMField::validate() const {
  if (!planes.defined() || planes.dim() != 5 || planes.size(1) != 3 ||
      planes.size(3) != planes.size(4))
    throw ValidationError("VMField planes must be [B, 3, C, G, G]");
  if (!lines.defined() || lines.dim() != 4 || lines.size(1) != 3 ||
      lines.size(0) != planes.size(0) || lines.size(2) != planes.size(2) ||
      lines.size(3) != planes.size(3))
    throw ValidationError("VMField lines must be [B, 3, C, G] matching the planes");
  if (planes.size(3) < 2) throw ValidationError("VMField grid must have at least 2 nodes");
  if (!heads) throw ValidationError("VMField has no heads");
  if (heads->channels() != planes.size(2))
    throw ValidationError("VMField heads expect " + std::to_string(heads->channels()) +
                          " channels, field has " + std::to_string(planes.size(2)));
}

torch::Tensor query_features(const VMField& field, const torch::Tensor& points) {
  field.validate();
  if (points.dim() != 3 || points.size(0) != field.batch() || points.size(2) != 3)
    throw ValidationError("query points must be [B, N, 3] matching the field batch");
  if (!torch::isfinite(points).all().item<bool>())
    throw ValidationError("query points must be finite");

  const int64_t b = field.batch();
  const int64_t c = field.channels();
  const int64_t g = field.grid();
  const int64_t n = points.size(1);

  auto p = points.clamp(-1.0, 1.0);
  auto x = p.select(-1, 0);
  auto y = p.select(-1, 1);
  auto z = p.select(-1, 2);

  // grid_sample reads (width, height) coordinates. Plane storage is
  // [first axis = height][second axis = width].
  auto plane_coords = torch::stack({torch::stack({z, y}, -1), torch::stack({x, z}, -1),
                                    torch::stack({y, x}, -1)},
                                   1);  // [B, 3, N, 2]
  auto plane_feat = F::grid_sample(field.planes.reshape({b * 3, c, g, g}),
                                   plane_coords.reshape({b * 3, n, 1, 2}),
                                   F::GridSampleFuncOptions()
                                       .mode(torch::kBilinear)
                                       .padding_mode(torch::kBorder)
                                       .align_corners(true));

  auto line_axis = torch::stack({x, y, z}, 1);  // [B, 3, N]
  auto line_coords = torch::stack({torch::zeros_like(line_axis), line_axis}, -1);
  auto line_feat = F::grid_sample(field.lines.reshape({b * 3, c, g, 1}),
                                  line_coords.reshape({b * 3, n, 1, 2}),
                                  F::GridSampleFuncOptions()
                                      .mode(torch::kBilinear)
                                      .padding_mode(torch::kBorder)
                                      .align_corners(true));

  auto feat = (plane_feat * line_feat).reshape({b, 3, c, n}).sum(1);  // [B, C, N]
  return feat.transpose(1, 2);
}

FieldQuery query(const VMField& field, const torch::Tensor& points) {
  auto features = query_features(field, points);
  return {field.heads.ptr()->density(features), features};
}

torch::Tensor color(const VMField& field, const torch::Tensor& features) {
  return field.heads.ptr()->color(features);
}

torch::Tensor to_dense(const VMField& field, int64_t batch_index) {
  field.validate();
  if (field.grid() > kMaxDenseGrid)
    throw ValidationError("to_dense: grid " + std::to_string(field.grid()) + " exceeds " +
                          std::to_string(kMaxDenseGrid));
  auto planes = field.planes[batch_index];  // [3, C, G, G]
  auto lines = field.lines[batch_index];    // [3, C, G]
  // dense[i, j, k, c] with (i, j, k) = (x, y, z) node indices.
  auto term_x = torch::einsum("ci,cjk->ijkc", {lines[0], planes[0]});
  auto term_y = torch::einsum("cj,cki->ijkc", {lines[1], planes[1]});
  auto term_z = torch::einsum("ck,cij->ijkc", {lines[2], planes[2]});
  return term_x + term_y + term_z;
}

void save_field(const VMField& field, const std::filesystem::path& path) {
  field.validate();
  if (field.batch() != 1) throw ValidationError("save_field expects a single field");
  torch::serialize::OutputArchive archive;
  archive.write("grid", torch::tensor(field.grid()));
  archive.write("channels", torch::tensor(field.channels()));
  archive.write("hidden", torch::tensor(field.heads->hidden()));
  archive.write("planes", field.planes.detach());
  archive.write("lines", field.lines.detach());
  torch::serialize::OutputArchive heads_archive;
  field.heads->save(heads_archive);
  archive.write("heads", heads_archive);
  archive.save_to(path.string());
}

VMField load_field(const std::filesystem::path& path) {
  torch::serialize::InputArchive archive;
  try {
    archive.load_from(path.string());
  } catch (const c10::Error& e) {
    throw ValidationError("cannot read field file " + path.string() + ": " + e.what_without_backtrace());
  }
  torch::Tensor channels, hidden;
  archive.read("channels", channels);
  archive.read("hidden", hidden);
  VMField field;
  archive.read("planes", field.planes);
  archive.read("lines", field.lines);
  field.heads = FieldHeads(channels.item<int64_t>(), hidden.item<int64_t>());
  torch::serialize::InputArchive heads_archive;
  archive.read("heads", heads_archive);
  field.heads->load(heads_archive);
  field.heads->to(field.planes.scalar_type());
  field.validate();
  return field;
}

}  // namespace nvsdiff
