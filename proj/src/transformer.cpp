#include "nvsdiff/transformer.hpp"

#include <torch/torch.h>

#include <cmath>
#include <string>

namespace nvsdiff {

namespace {

constexpr int kTimeFrequencyDim = 64;
constexpr double kInitialDensityBias = -3.0;

torch::nn::Sequential make_embedder(int64_t in, int64_t dim) {
  return torch::nn::Sequential(torch::nn::Linear(in, dim), torch::nn::SiLU(),
                               torch::nn::Linear(dim, dim));
}

void zero_linear(torch::nn::Linear& layer) {
  torch::NoGradGuard guard;
  layer->weight.zero_();
  if (layer->bias.defined()) layer->bias.zero_();
}

torch::Tensor timestep_frequencies(const std::vector<double>& t, torch::TensorOptions opts) {
  const int half = kTimeFrequencyDim / 2;
  auto freqs = torch::exp(-std::log(10000.0) * torch::arange(half, opts) / half);
  auto steps = torch::tensor(t, torch::TensorOptions().dtype(torch::kFloat64)).to(opts.dtype());
  auto args = steps.unsqueeze(1) * freqs.unsqueeze(0);
  return torch::cat({torch::cos(args), torch::sin(args)}, 1);
}

}  // namespace

void ModelConfig::validate() const {
  auto fail = [](const std::string& msg) { throw ValidationError("model config: " + msg); };
  if (patch < 1 || image_height % patch != 0 || image_width % patch != 0)
    fail("image dims must be divisible by the patch size");
  if (dim < 1 || heads < 1 || dim % heads != 0) fail("dim must be divisible by heads");
  if (encoder_depth < 0 || decoder_depth < 1) fail("invalid depth");
  if (matrix_patch < 1 || grid % matrix_patch != 0)
    fail("grid must be divisible by the matrix patch size");
  if (vector_patch < 1 || grid % vector_patch != 0)
    fail("grid must be divisible by the vector patch size");
  if (grid < 2 || channels < 1 || head_hidden < 1) fail("invalid field dims");
  if (!(reference_dropout >= 0.0 && reference_dropout <= 1.0))
    fail("reference dropout must lie in [0, 1]");
  if (!(mlp_ratio > 0.0)) fail("mlp ratio must be positive");
}

nlohmann::json ModelConfig::to_json() const {
  return {{"image_height", image_height},
          {"image_width", image_width},
          {"patch", patch},
          {"dim", dim},
          {"encoder_depth", encoder_depth},
          {"decoder_depth", decoder_depth},
          {"heads", heads},
          {"mlp_ratio", mlp_ratio},
          {"grid", grid},
          {"channels", channels},
          {"matrix_patch", matrix_patch},
          {"vector_patch", vector_patch},
          {"head_hidden", head_hidden},
          {"reference_dropout", reference_dropout},
          {"use_encoder", use_encoder},
          {"camera_conditioning", camera_conditioning},
          {"timestep_conditioning", timestep_conditioning}};
}

ModelConfig ModelConfig::from_json(const nlohmann::json& j) {
  ModelConfig c;
  c.image_height = j.value("image_height", c.image_height);
  c.image_width = j.value("image_width", c.image_width);
  c.patch = j.value("patch", c.patch);
  c.dim = j.value("dim", c.dim);
  c.encoder_depth = j.value("encoder_depth", c.encoder_depth);
  c.decoder_depth = j.value("decoder_depth", c.decoder_depth);
  c.heads = j.value("heads", c.heads);
  c.mlp_ratio = j.value("mlp_ratio", c.mlp_ratio);
  c.grid = j.value("grid", c.grid);
  c.channels = j.value("channels", c.channels);
  c.matrix_patch = j.value("matrix_patch", c.matrix_patch);
  c.vector_patch = j.value("vector_patch", c.vector_patch);
  c.head_hidden = j.value("head_hidden", c.head_hidden);
  c.reference_dropout = j.value("reference_dropout", c.reference_dropout);
  c.use_encoder = j.value("use_encoder", c.use_encoder);
  c.camera_conditioning = j.value("camera_conditioning", c.camera_conditioning);
  c.timestep_conditioning = j.value("timestep_conditioning", c.timestep_conditioning);
  c.validate();
  return c;
}

void CameraConditioning::validate() const {
  if (!(r_d > 0.0)) throw ValidationError("conditioning r_d must be > 0");
  if (!(focal > 0.0)) throw ValidationError("conditioning focal must be > 0");
  if (!is_rotation(rotation, 1e-6)) throw ValidationError("conditioning rotation is not a rotation");
  if (!translation.allFinite()) throw ValidationError("conditioning translation is not finite");
}

torch::Tensor adaln_modulate(const torch::Tensor& normalized, const torch::Tensor& shift,
                             const torch::Tensor& scale) {
  return normalized * (1.0 + scale) + shift;
}

torch::Tensor expand_groups(const std::array<torch::Tensor, 3>& per_group, const GroupSizes& sizes) {
  const std::array<int64_t, 3> counts{sizes.output, sizes.noisy, sizes.reference};
  std::vector<torch::Tensor> parts;
  for (size_t g = 0; g < 3; ++g) {
    if (counts[g] == 0) continue;
    const auto& v = per_group[g];
    parts.push_back(v.unsqueeze(1).expand({v.size(0), counts[g], v.size(1)}));
  }
  return torch::cat(parts, 1);
}

torch::Tensor patchify(const torch::Tensor& image, int patch) {
  const int64_t b = image.size(0), h = image.size(1), w = image.size(2), c = image.size(3);
  if (h % patch != 0 || w % patch != 0)
    throw ValidationError("image " + std::to_string(h) + "x" + std::to_string(w) +
                          " is not divisible by patch " + std::to_string(patch));
  return image.reshape({b, h / patch, patch, w / patch, patch, c})
      .permute({0, 1, 3, 2, 4, 5})
      .reshape({b, (h / patch) * (w / patch), patch * patch * c});
}

torch::Tensor camera_scalars(const std::vector<CameraConditioning>& cond) {
  std::vector<double> v;
  v.reserve(cond.size() * 2);
  for (const auto& c : cond) {
    v.push_back(c.r_d);
    v.push_back(c.focal);
  }
  return torch::tensor(v, torch::kFloat64).view({static_cast<int64_t>(cond.size()), 2});
}

torch::Tensor pose_features(const std::vector<CameraConditioning>& cond) {
  std::vector<double> v;
  v.reserve(cond.size() * 12);
  for (const auto& c : cond) {
    for (int r = 0; r < 3; ++r)
      for (int k = 0; k < 3; ++k) v.push_back(c.rotation(r, k));
    for (int k = 0; k < 3; ++k) v.push_back(c.translation(k));
  }
  return torch::tensor(v, torch::kFloat64).view({static_cast<int64_t>(cond.size()), 12});
}

AttentionImpl::AttentionImpl(int64_t dim, int64_t heads) : heads_(heads), head_dim_(dim / heads) {
  qkv = register_module("qkv", torch::nn::Linear(dim, 3 * dim));
  proj = register_module("proj", torch::nn::Linear(dim, dim));
}

torch::Tensor AttentionImpl::attention_probs(const torch::Tensor& x) {
  const int64_t b = x.size(0), m = x.size(1);
  auto qkv_t = qkv(x).reshape({b, m, 3, heads_, head_dim_}).permute({2, 0, 3, 1, 4});
  auto scores = torch::matmul(qkv_t[0], qkv_t[1].transpose(-2, -1)) / std::sqrt(double(head_dim_));
  return torch::softmax(scores, -1);
}

torch::Tensor AttentionImpl::forward(const torch::Tensor& x) {
  const int64_t b = x.size(0), m = x.size(1);
  auto qkv_t = qkv(x).reshape({b, m, 3, heads_, head_dim_}).permute({2, 0, 3, 1, 4});
  auto scores = torch::matmul(qkv_t[0], qkv_t[1].transpose(-2, -1)) / std::sqrt(double(head_dim_));
  auto out = torch::matmul(torch::softmax(scores, -1), qkv_t[2]);  // [B, H, M, hd]
  return proj(out.transpose(1, 2).reshape({b, m, heads_ * head_dim_}));
}

MlpImpl::MlpImpl(int64_t dim, int64_t hidden) {
  fc1 = register_module("fc1", torch::nn::Linear(dim, hidden));
  fc2 = register_module("fc2", torch::nn::Linear(hidden, dim));
}

torch::Tensor MlpImpl::forward(const torch::Tensor& x) {
  return fc2(torch::gelu(fc1(x), "tanh"));
}

EncoderBlockImpl::EncoderBlockImpl(int64_t dim, int64_t heads, int64_t mlp_hidden) {
  norm1 = register_module("norm1", torch::nn::LayerNorm(torch::nn::LayerNormOptions({dim})));
  attn = register_module("attn", Attention(dim, heads));
  norm2 = register_module("norm2", torch::nn::LayerNorm(torch::nn::LayerNormOptions({dim})));
  mlp = register_module("mlp", Mlp(dim, mlp_hidden));
}

torch::Tensor EncoderBlockImpl::forward(const torch::Tensor& x) {
  auto h = x + attn(norm1(x));
  return h + mlp(norm2(h));
}

AdaLnBlockImpl::AdaLnBlockImpl(int64_t dim, int64_t heads, int64_t mlp_hidden, int64_t cond_dim)
    : dim_(dim) {
  auto plain_norm = torch::nn::LayerNormOptions({dim}).elementwise_affine(false).eps(1e-6);
  norm1 = register_module("norm1", torch::nn::LayerNorm(plain_norm));
  attn = register_module("attn", Attention(dim, heads));
  norm2 = register_module("norm2", torch::nn::LayerNorm(plain_norm));
  mlp = register_module("mlp", Mlp(dim, mlp_hidden));
  const char* names[3] = {"mod_output", "mod_noisy", "mod_reference"};
  for (size_t g = 0; g < 3; ++g) {
    modulators[g] = register_module(names[g], torch::nn::Linear(cond_dim, 6 * dim));
    zero_linear(modulators[g]);
  }
}

std::array<Modulation, 2> AdaLnBlockImpl::modulation(TokenGroup group, const torch::Tensor& cond) {
  auto params = modulators[static_cast<size_t>(group)](torch::silu(cond)).chunk(6, -1);
  return {Modulation{params[0], params[1], params[2]}, Modulation{params[3], params[4], params[5]}};
}

torch::Tensor AdaLnBlockImpl::forward(const torch::Tensor& x, const GroupSizes& sizes,
                                      const std::array<torch::Tensor, 3>& cond) {
  std::array<std::array<Modulation, 2>, 3> mods;
  for (size_t g = 0; g < 3; ++g) mods[g] = modulation(static_cast<TokenGroup>(g), cond[g]);
  auto gather = [&](int branch, auto member) {
    return expand_groups({mods[0][branch].*member, mods[1][branch].*member,
                          mods[2][branch].*member},
                         sizes);
  };
  auto h = adaln_modulate(norm1(x), gather(0, &Modulation::shift), gather(0, &Modulation::scale));
  auto out = x + gather(0, &Modulation::gate) * attn(h);
  h = adaln_modulate(norm2(out), gather(1, &Modulation::shift), gather(1, &Modulation::scale));
  return out + gather(1, &Modulation::gate) * mlp(h);
}

NvsTransformerImpl::NvsTransformerImpl(ModelConfig config) : config_(config) {
  config_.validate();
  const int64_t d = config_.dim;
  const int64_t p = config_.patch;
  const int64_t n_img = config_.image_tokens();
  const int64_t n_out = config_.output_tokens();

  patch_embed = register_module("patch_embed", torch::nn::Linear(p * p * 3, d));
  encoder_pos = register_parameter("encoder_pos", torch::randn({1, n_img, d}) * 0.02);
  encoder_blocks = register_module("encoder_blocks", torch::nn::ModuleList());
  for (int i = 0; i < config_.encoder_depth; ++i)
    encoder_blocks->push_back(EncoderBlock(d, config_.heads, config_.mlp_hidden()));
  encoder_norm = register_module("encoder_norm", torch::nn::LayerNorm(torch::nn::LayerNormOptions({d})));

  output_token = register_parameter("output_token", torch::randn({1, 1, d}) * 0.02);
  output_pos = register_parameter("output_pos", torch::randn({1, n_out, d}) * 0.02);
  null_reference = register_parameter("null_reference", torch::randn({1, 1, d}) * 0.02);

  output_cond = register_module("output_cond", make_embedder(2, d));
  noisy_cond = register_module("noisy_cond", make_embedder(2, d));
  reference_cond = register_module("reference_cond", make_embedder(12, d));
  if (config_.timestep_conditioning)
    time_cond = register_module("time_cond", make_embedder(kTimeFrequencyDim, d));

  decoder_blocks = register_module("decoder_blocks", torch::nn::ModuleList());
  for (int i = 0; i < config_.decoder_depth; ++i)
    decoder_blocks->push_back(AdaLnBlock(d, config_.heads, config_.mlp_hidden(), d));
  decoder_norm = register_module("decoder_norm", torch::nn::LayerNorm(torch::nn::LayerNormOptions({d})));

  const int64_t c = config_.channels;
  matrix_proj = register_module(
      "matrix_proj", torch::nn::Linear(d, config_.matrix_patch * config_.matrix_patch * c));
  vector_proj = register_module("vector_proj", torch::nn::Linear(d, config_.vector_patch * c));
  zero_linear(matrix_proj);
  zero_linear(vector_proj);
  // Lines start at one: with both factors at zero the plane-line product has no
  // gradient. Features are still zero through the zero planes.
  {
    torch::NoGradGuard guard;
    vector_proj->bias.fill_(1.0);
  }

  heads = register_module("heads", FieldHeads(c, config_.head_hidden));
  torch::NoGradGuard guard;
  heads->density_head->bias.fill_(kInitialDensityBias);
}

torch::Tensor NvsTransformerImpl::encode(const torch::Tensor& image) {
  if (image.dim() != 4 || image.size(3) != 3)
    throw ValidationError("encode expects [B, H, W, 3] images");
  if (image.size(1) != config_.image_height || image.size(2) != config_.image_width)
    throw ValidationError("encode: image size does not match the model config");
  auto x = patch_embed(patchify(image, config_.patch)) + encoder_pos;
  if (!config_.use_encoder) return x;
  for (const auto& block : *encoder_blocks) x = block->as<EncoderBlock>()->forward(x);
  return encoder_norm(x);
}

std::array<torch::Tensor, 3> NvsTransformerImpl::embed_conditioning(
    const std::vector<CameraConditioning>& cond, const torch::Tensor& ref_present,
    const std::vector<double>& t) {
  const auto opts = encoder_pos.options();
  std::vector<CameraConditioning> ref_cond;
  ref_cond.reserve(cond.size());
  auto present = ref_present.to(torch::kBool).contiguous();
  for (size_t i = 0; i < cond.size(); ++i) {
    cond[i].validate();
    ref_cond.push_back(present[static_cast<int64_t>(i)].item<bool>() ? cond[i]
                                                                     : cond[i].without_reference());
  }
  auto scalars = camera_scalars(cond).to(opts);
  auto pose = pose_features(ref_cond).to(opts);
  if (!config_.camera_conditioning) {
    scalars = torch::zeros_like(scalars);
    pose = torch::zeros_like(pose);
  }
  std::array<torch::Tensor, 3> out{output_cond->forward(scalars), noisy_cond->forward(scalars),
                                   reference_cond->forward(pose)};
  if (config_.timestep_conditioning) {
    if (t.size() != cond.size()) throw ValidationError("timestep conditioning needs one t per entry");
    auto temb = time_cond->forward(timestep_frequencies(t, opts));
    for (auto& e : out) e = e + temb;
  }
  return out;
}

torch::Tensor NvsTransformerImpl::decode(const torch::Tensor& noisy_tokens,
                                         const torch::Tensor& reference_tokens,
                                         const std::array<torch::Tensor, 3>& cond) {
  const int64_t b = noisy_tokens.size(0);
  auto out_tokens = output_token.expand({b, config_.output_tokens(), config_.dim}) + output_pos;
  GroupSizes sizes{out_tokens.size(1), noisy_tokens.size(1), reference_tokens.size(1)};
  auto x = torch::cat({out_tokens, noisy_tokens, reference_tokens}, 1);
  for (const auto& block : *decoder_blocks) x = block->as<AdaLnBlock>()->forward(x, sizes, cond);
  return decoder_norm(x.narrow(1, 0, sizes.output));
}

VMField NvsTransformerImpl::tokens_to_field(const torch::Tensor& output_tokens) {
  const int64_t b = output_tokens.size(0);
  const int64_t g = config_.grid, c = config_.channels;
  const int64_t pm = config_.matrix_patch, pv = config_.vector_patch;
  const int64_t gm = g / pm, gv = g / pv;
  const int64_t n_mat = 3 * gm * gm;
  if (output_tokens.size(1) != n_mat + 3 * gv)
    throw ValidationError("tokens_to_field: expected " + std::to_string(n_mat + 3 * gv) +
                          " output tokens, got " + std::to_string(output_tokens.size(1)));

  auto mat = matrix_proj(output_tokens.narrow(1, 0, n_mat))
                 .reshape({b, 3, gm, gm, pm, pm, c})
                 .permute({0, 1, 6, 2, 4, 3, 5})
                 .reshape({b, 3, c, g, g});
  auto vec = vector_proj(output_tokens.narrow(1, n_mat, 3 * gv))
                 .reshape({b, 3, gv, pv, c})
                 .permute({0, 1, 4, 2, 3})
                 .reshape({b, 3, c, g});
  return {mat, vec, heads};
}

VMField NvsTransformerImpl::predict(const torch::Tensor& z_t, const torch::Tensor& x_ref,
                                    const torch::Tensor& ref_present,
                                    const std::vector<CameraConditioning>& cond,
                                    const std::vector<double>& t) {
  const int64_t b = z_t.size(0);
  if (static_cast<int64_t>(cond.size()) != b)
    throw ValidationError("predict: one conditioning entry per batch item required");
  auto present = ref_present.defined() ? ref_present.to(torch::kBool)
                                       : torch::zeros({b}, torch::kBool);
  if (present.any().item<bool>() && !x_ref.defined())
    throw ValidationError("predict: reference marked present but no reference image given");

  auto noisy = encode(z_t.to(encoder_pos.scalar_type()));
  auto null_tokens = null_reference.expand({b, config_.image_tokens(), config_.dim});
  torch::Tensor ref;
  if (x_ref.defined() && present.any().item<bool>()) {
    ref = torch::where(present.view({b, 1, 1}), encode(x_ref.to(encoder_pos.scalar_type())),
                       null_tokens);
  } else {
    ref = null_tokens;
  }
  auto cond_emb = embed_conditioning(cond, present, t);
  return tokens_to_field(decode(noisy, ref, cond_emb));
}

int64_t NvsTransformerImpl::parameter_count() const {
  int64_t n = 0;
  for (const auto& p : parameters()) n += p.numel();
  return n;
}

}  // namespace nvsdiff
