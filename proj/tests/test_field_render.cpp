#include "testing.hpp"
#include "helpers.hpp"

#include "nvsdiff/renderer.hpp"

#include <ATen/CPUGeneratorImpl.h>

#include <filesystem>

using namespace nvsdiff;
using namespace testing_util;

namespace {

// Independent trilinear interpolation of a dense [G, G, G, C] tensor.
torch::Tensor trilinear(const torch::Tensor& dense, const torch::Tensor& pts) {
  const int64_t g = dense.size(0), c = dense.size(3), n = pts.size(0);
  auto d = dense.accessor<double, 4>();
  auto p = pts.accessor<double, 2>();
  auto out = torch::zeros({n, c}, torch::kFloat64);
  auto o = out.accessor<double, 2>();
  for (int64_t i = 0; i < n; ++i) {
    int64_t lo[3];
    double fr[3];
    for (int a = 0; a < 3; ++a) {
      const double u = (p[i][a] + 1.0) * 0.5 * (g - 1);
      lo[a] = std::min<int64_t>(static_cast<int64_t>(std::floor(u)), g - 2);
      fr[a] = u - lo[a];
    }
    for (int corner = 0; corner < 8; ++corner) {
      double w = 1.0;
      int64_t idx[3];
      for (int a = 0; a < 3; ++a) {
        const int bit = (corner >> a) & 1;
        idx[a] = lo[a] + bit;
        w *= bit ? fr[a] : 1.0 - fr[a];
      }
      for (int64_t k = 0; k < c; ++k) o[i][k] += w * d[idx[0]][idx[1]][idx[2]][k];
    }
  }
  return out;
}

VMField random_field(int64_t g, int64_t c, uint64_t seed, torch::Dtype dtype = torch::kFloat64) {
  torch::manual_seed(seed);
  FieldHeads heads(c, 8);
  heads->to(dtype);
  auto gen = at::make_generator<at::CPUGeneratorImpl>(seed);
  return VMField::random(1, g, c, heads, 0.5, torch::TensorOptions().dtype(dtype), gen);
}

}  // namespace

TEST_SUITE("vm_field") {

TEST_CASE("zero field gives zero features and softplus(bias) density") {
  FieldHeads heads(2, 4);
  heads->to(torch::kFloat64);
  {
    torch::NoGradGuard g;
    heads->density_head->bias.fill_(0.3);
  }
  auto f = VMField::zeros(1, 4, 2, heads, torch::kFloat64);
  auto pts = torch::rand({1, 20, 3}, torch::kFloat64) * 2 - 1;
  auto q = query(f, pts);
  CHECK(q.features.abs().max().item<double>() == 0.0);
  CHECK(torch::allclose(q.density, torch::full_like(q.density, std::log1p(std::exp(0.3)))));
  CHECK(to_dense(f).abs().max().item<double>() == 0.0);
}

TEST_CASE("constant rank-one term gives unit features") {
  FieldHeads heads(1, 4);
  heads->to(torch::kFloat64);
  auto f = VMField::zeros(1, 5, 1, heads, torch::kFloat64);
  f.lines[0][0].fill_(1.0);
  f.planes[0][0].fill_(1.0);
  auto pts = torch::rand({1, 50, 3}, torch::kFloat64) * 2 - 1;
  CHECK((torch::allclose(query_features(f, pts), torch::ones({1, 50, 1}, torch::kFloat64), 0, 1e-12)));
}

TEST_CASE("single rank-one term densifies to an outer product") {
  auto f = random_field(4, 2, 1);
  f.planes.narrow(1, 1, 2).zero_();
  f.lines.narrow(1, 1, 2).zero_();
  auto dense = to_dense(f);
  auto vx = f.lines[0][0];     // [C, G]
  auto myz = f.planes[0][0];   // [C, G, G]
  auto expected = torch::einsum("ci,cjk->ijkc", {vx, myz});
  CHECK(torch::allclose(dense, expected, 0, 1e-14));
}

TEST_CASE("queries match trilinear interpolation of the dense tensor") {
  for (int trial = 0; trial < 10; ++trial) {
    auto f = random_field(4, 2, 100 + trial);
    auto pts = torch::rand({200, 3}, torch::kFloat64) * 2 - 1;
    auto got = query_features(f, pts.unsqueeze(0)).squeeze(0);
    auto expect = trilinear(to_dense(f), pts);
    CHECK((got - expect).abs().max().item<double>() < 1e-10);
  }
}

TEST_CASE("grid-node queries equal dense values") {
  auto f = random_field(5, 3, 7);
  auto dense = to_dense(f);
  auto nodes = torch::linspace(-1, 1, 5, torch::kFloat64);
  auto grid = torch::meshgrid({nodes, nodes, nodes}, "ij");
  auto pts = torch::stack({grid[0], grid[1], grid[2]}, -1).reshape({1, -1, 3});
  auto got = query_features(f, pts).reshape({5, 5, 5, 3});
  CHECK((got - dense).abs().max().item<double>() < 1e-6);
}

TEST_CASE("outside points clamp onto the cube") {
  auto f = random_field(4, 2, 3);
  auto inside = torch::tensor({{{1.0, -1.0, 0.25}}}, torch::kFloat64);
  auto outside = torch::tensor({{{3.0, -7.0, 0.25}}}, torch::kFloat64);
  CHECK(torch::allclose(query_features(f, inside), query_features(f, outside)));
  auto nan = torch::tensor({{{std::nan(""), 0.0, 0.0}}}, torch::kFloat64);
  CHECK_THROWS_AS(query_features(f, nan), ValidationError);
}

TEST_CASE("feature additivity across branches") {
  // Each branch is bilinear in its (vector, matrix) pair, so fields occupying
  // different branches add at the feature level.
  auto a = random_field(4, 2, 11);
  VMField fa{a.planes.clone(), a.lines.clone(), a.heads};
  VMField fb{a.planes.clone(), a.lines.clone(), a.heads};
  fa.planes.narrow(1, 1, 2).zero_();
  fa.lines.narrow(1, 1, 2).zero_();
  fb.planes.narrow(1, 0, 1).zero_();
  fb.lines.narrow(1, 0, 1).zero_();
  auto pts = torch::rand({1, 100, 3}, torch::kFloat64) * 2 - 1;
  CHECK(torch::allclose(query_features(a, pts), query_features(fa, pts) + query_features(fb, pts), 0, 1e-12));
  CHECK(torch::allclose(to_dense(fa) + to_dense(fb), to_dense(a), 0, 1e-12));
}

TEST_CASE("color head range and hand-computed values") {
  FieldHeads heads(2, 2);
  heads->to(torch::kFloat64);
  heads->zero_();
  auto f = VMField::zeros(1, 4, 2, heads, torch::kFloat64);
  auto feats = torch::zeros({1, 3, 2}, torch::kFloat64);
  CHECK((torch::allclose(color(f, feats), torch::full({1, 3, 3}, 0.5, torch::kFloat64))));

  {
    torch::NoGradGuard g;
    heads->color_hidden->weight.copy_(torch::tensor({{1.0, 2.0}, {-1.0, 0.5}}, torch::kFloat64));
    heads->color_hidden->bias.copy_(torch::tensor({0.1, -0.2}, torch::kFloat64));
    heads->color_out->weight.copy_(torch::tensor({{1.0, 0.0}, {0.0, 1.0}, {0.5, -0.5}}, torch::kFloat64));
    heads->color_out->bias.copy_(torch::tensor({0.0, 0.3, -0.1}, torch::kFloat64));
  }
  auto one = torch::tensor({{{1.0, 0.0}}}, torch::kFloat64);
  auto silu = [](double v) { return v / (1.0 + std::exp(-v)); };
  auto sig = [](double v) { return 1.0 / (1.0 + std::exp(-v)); };
  const double h0 = silu(1.0 + 0.1), h1 = silu(-1.0 - 0.2);
  auto rgb = color(f, one)[0][0];
  CHECK(rgb[0].item<double>() == doctest::Approx(sig(h0)));
  CHECK(rgb[1].item<double>() == doctest::Approx(sig(h1 + 0.3)));
  CHECK(rgb[2].item<double>() == doctest::Approx(sig(0.5 * h0 - 0.5 * h1 - 0.1)));

  auto big = torch::randn({1, 500, 2}, torch::kFloat64) * 100;
  auto c = color(f, big);
  CHECK(c.min().item<double>() >= 0.0);
  CHECK(c.max().item<double>() <= 1.0);
}

TEST_CASE("densities are non-negative") {
  auto f = random_field(6, 4, 9);
  auto q = query(f, torch::rand({1, 1000, 3}, torch::kFloat64) * 2 - 1);
  CHECK(q.density.min().item<double>() >= 0.0);
}

TEST_CASE("query gradients match finite differences") {
  auto f = random_field(4, 2, 21);
  auto pts = torch::rand({1, 30, 3}, torch::kFloat64) * 1.8 - 0.9;
  f.planes.set_requires_grad(true);
  f.lines.set_requires_grad(true);
  auto loss = query(f, pts).density.sum();
  loss.backward();
  auto eval = [&]() {
    torch::NoGradGuard g;
    return query(f, pts).density.sum().item<double>();
  };
  const double h = 1e-4;
  std::vector<torch::Tensor> params{f.planes, f.lines};
  params.push_back(f.heads->density_head->weight);
  params.push_back(f.heads->density_head->bias);
  double worst = 0.0;
  for (auto& p : params) {
    REQUIRE(p.grad().defined());
    auto grad = p.grad().clone();
    auto flat = p.detach().view({-1});
    auto gflat = grad.view({-1});
    for (int64_t k = 0; k < std::min<int64_t>(flat.numel(), 12); ++k) {
      const int64_t i = (k * 7919) % flat.numel();
      const double orig = flat[i].item<double>();
      flat[i] = orig + h;
      const double up = eval();
      flat[i] = orig - h;
      const double down = eval();
      flat[i] = orig;
      worst = std::max(worst, relative_error(gflat[i].item<double>(), (up - down) / (2 * h), 1e-4));
    }
  }
  CHECK(worst < 1e-3);
}

TEST_CASE("dense guard and field file round trip") {
  FieldHeads heads(1, 2);
  auto big = VMField::zeros(1, kMaxDenseGrid + 1, 1, heads);
  CHECK_THROWS_AS(to_dense(big), ValidationError);
  auto f = random_field(4, 2, 5, torch::kFloat32);
  auto path = std::filesystem::temp_directory_path() / "nvsdiff_field_test.pt";
  save_field(f, path);
  auto g = load_field(path);
  std::filesystem::remove(path);
  CHECK(torch::equal(f.planes, g.planes));
  CHECK(torch::equal(f.lines, g.lines));
  auto pts = torch::rand({1, 10, 3}) * 2 - 1;
  CHECK(torch::equal(query(f, pts).density, query(g, pts).density));
}

}

TEST_SUITE("renderer") {

TEST_CASE("midpoint and stratified samples") {
  RayBundle rays{torch::zeros({2, 3}, torch::kFloat64),
                 torch::tensor({{0.0, 0.0, 1.0}, {1.0, 0.0, 0.0}}, torch::kFloat64), 0.0, 1.0};
  auto s = sample_along_ray(rays, 4, false);
  CHECK((torch::allclose(s.ts[0], torch::tensor({0.125, 0.375, 0.625, 0.875}, torch::kFloat64))));
  CHECK((torch::allclose(s.deltas[0], torch::full({4}, 0.25, torch::kFloat64))));
  CHECK(s.positions[1][2][0].item<double>() == doctest::Approx(0.625));

  RayBundle wide{torch::zeros({64, 3}, torch::kFloat64), torch::zeros({64, 3}, torch::kFloat64), 1.0, 3.0};
  wide.directions.select(1, 2).fill_(1.0);
  auto gen = at::make_generator<at::CPUGeneratorImpl>(4);
  auto st = sample_along_ray(wide, 8, true, gen);
  auto bins = torch::arange(8, torch::kFloat64) * 0.25 + 1.0;
  CHECK((st.ts >= bins).all().item<bool>());
  CHECK((st.ts <= bins + 0.25).all().item<bool>());
  CHECK((st.deltas > 0).all().item<bool>());
  auto gen2 = at::make_generator<at::CPUGeneratorImpl>(4);
  CHECK(torch::equal(sample_along_ray(wide, 8, true, gen2).ts, st.ts));
  CHECK_THROWS_AS(sample_along_ray(wide, 1, false), ValidationError);
}

TEST_CASE("composite closed forms") {
  const int s = 16;
  const double sigma = 1.7, delta = 0.05;
  auto dens = torch::full({3, s}, sigma, torch::kFloat64);
  auto deltas = torch::full({3, s}, delta, torch::kFloat64);
  auto cols = torch::tensor({0.2, 0.5, 0.9}, torch::kFloat64).expand({3, s, 3});
  auto out = composite(dens, cols, deltas);
  const double expect = 1.0 - std::exp(-sigma * s * delta);
  CHECK(std::abs(out.color[0][0].item<double>() - 0.2 * expect) < 1e-12);
  CHECK(std::abs(out.color[2][2].item<double>() - 0.9 * expect) < 1e-12);

  auto zero = composite(torch::zeros({2, s}, torch::kFloat64), cols.narrow(0, 0, 2), deltas.narrow(0, 0, 2));
  CHECK(zero.color.abs().max().item<double>() == 0.0);
  CHECK((torch::allclose(zero.transmittance, torch::ones({2, s}, torch::kFloat64))));

  auto sat = torch::zeros({1, 4}, torch::kFloat64);
  sat[0][0] = 20.0 / 0.1;
  auto c4 = torch::rand({1, 4, 3}, torch::kFloat64);
  auto o = composite(sat, c4, torch::full({1, 4}, 0.1, torch::kFloat64));
  CHECK(o.weights[0][0].item<double>() >= 1 - 1e-8);
  CHECK(torch::allclose(o.color[0], c4[0][0], 0, 1e-8));

  CHECK_THROWS_AS(composite(-torch::ones({1, 4}, torch::kFloat64), c4, torch::ones({1, 4}, torch::kFloat64)),
                  ValidationError);
}

TEST_CASE("weights and transmittance invariants") {
  auto dens = torch::rand({50, 32}, torch::kFloat64) * 30;
  auto deltas = torch::rand({50, 32}, torch::kFloat64) * 0.1 + 0.01;
  auto out = composite(dens, torch::rand({50, 32, 3}, torch::kFloat64), deltas);
  CHECK((out.weights >= 0).all().item<bool>());
  CHECK((out.weights.sum(-1) <= 1.0 + 1e-6).all().item<bool>());
  auto diff = out.transmittance.narrow(1, 1, 31) - out.transmittance.narrow(1, 0, 31);
  CHECK((diff <= 0).all().item<bool>());
}

TEST_CASE("halving intervals with constant fields") {
  const double sigma = 1.0;
  for (double delta : {0.05, 0.09}) {
    auto a = composite(torch::full({1, 10}, sigma, torch::kFloat64),
                       torch::full({1, 10, 3}, 0.7, torch::kFloat64), torch::full({1, 10}, delta, torch::kFloat64));
    auto b = composite(torch::full({1, 20}, sigma, torch::kFloat64),
                       torch::full({1, 20, 3}, 0.7, torch::kFloat64), torch::full({1, 20}, delta / 2, torch::kFloat64));
    CHECK((a.color - b.color).abs().max().item<double>() < 1e-6);
  }
}

TEST_CASE("distortion loss hand cases") {
  auto zero = distortion_loss(torch::zeros({1, 3}, torch::kFloat64), torch::tensor({{0.1, 0.2, 0.3}}, torch::kFloat64),
                              torch::full({1, 3}, 0.1, torch::kFloat64));
  CHECK(zero.item<double>() == 0.0);
  auto single = distortion_loss(torch::ones({1, 1}, torch::kFloat64), torch::full({1, 1}, 0.5, torch::kFloat64),
                                torch::full({1, 1}, 0.3, torch::kFloat64));
  CHECK(single.item<double>() == doctest::Approx(0.1).epsilon(1e-12));
  auto spread = distortion_loss(torch::tensor({{0.5, 0.5}}, torch::kFloat64),
                                torch::tensor({{0.25, 0.75}}, torch::kFloat64), torch::full({1, 2}, 0.5, torch::kFloat64));
  CHECK(std::abs(spread.item<double>() - 1.0 / 3.0) < 1e-12);
  auto concentrated = distortion_loss(torch::tensor({{1.0, 0.0}}, torch::kFloat64),
                                      torch::tensor({{0.25, 0.75}}, torch::kFloat64), torch::full({1, 2}, 0.5, torch::kFloat64));
  CHECK(concentrated.item<double>() < spread.item<double>());
}

TEST_CASE("zero-density field renders black and determinism") {
  FieldHeads heads(2, 4);
  heads->to(torch::kFloat64);
  {
    torch::NoGradGuard g;
    heads->density_head->bias.fill_(-60.0);
  }
  auto f = VMField::zeros(1, 4, 2, heads, torch::kFloat64);
  auto pose = make_pose(Mat3::Identity(), Vec3(0, 0, 2.5), 6, 6.0);
  auto out = render(f, generate_rays(pose, torch::kFloat64), {16, false});
  CHECK(out.color.abs().max().item<double>() < 1e-20);

  auto g2 = random_field(4, 2, 31);
  auto rays = generate_rays(pose, torch::kFloat64);
  auto gen_a = at::make_generator<at::CPUGeneratorImpl>(3), gen_b = at::make_generator<at::CPUGeneratorImpl>(3);
  CHECK((torch::equal(render(g2, rays, {16, true}, gen_a).color, render(g2, rays, {16, true}, gen_b).color)));
}

TEST_CASE("rendering a constant slab matches the closed form") {
  // Unit feature everywhere (outside points clamp), so the density is sigma
  // over the whole [near, far] slab.
  const double sigma = 0.8;
  FieldHeads heads(1, 2);
  heads->to(torch::kFloat64);
  heads->zero_();
  {
    torch::NoGradGuard g;
    heads->density_head->bias.fill_(std::log(std::expm1(sigma)));
    heads->color_out->bias.copy_(torch::tensor({logit(0.2), logit(0.6), logit(0.9)}, torch::kFloat64));
  }
  auto f = VMField::zeros(1, 4, 1, heads, torch::kFloat64);
  f.lines[0][0].fill_(1.0);
  f.planes[0][0].fill_(1.0);
  auto pose = make_pose(Mat3::Identity(), Vec3(0, 0, 2.0), 4, 4.0);
  auto rays = generate_rays(pose, torch::kFloat64);
  auto out = render(f, rays, {64, false});
  const double expect = 1.0 - std::exp(-sigma * (rays.far - rays.near));
  CHECK((out.opacity - expect).abs().max().item<double>() < 1e-4);
  CHECK((out.color.select(1, 1) - 0.6 * expect).abs().max().item<double>() < 1e-4);
}

TEST_CASE("render gradients match finite differences") {
  auto f = random_field(4, 2, 41);
  auto pose = make_pose(Mat3::Identity(), Vec3(0, 0, 2.2), 3, 3.0);
  auto rays = generate_rays(pose, torch::kFloat64);
  f.planes.set_requires_grad(true);
  f.lines.set_requires_grad(true);
  auto target = torch::rand({9, 3}, torch::kFloat64);
  auto loss_of = [&]() { return (render(f, rays, {12, false}).color - target).pow(2).sum(); };
  loss_of().backward();
  std::vector<torch::Tensor> params{f.planes, f.lines};
  for (auto& p : f.heads->parameters()) params.push_back(p);
  const double h = 1e-5;
  double worst = 0;
  for (auto& p : params) {
    auto flat = p.detach().view({-1});
    auto g = p.grad().view({-1});
    for (int64_t k = 0; k < std::min<int64_t>(flat.numel(), 10); ++k) {
      const int64_t i = (k * 104729) % flat.numel();
      const double orig = flat[i].item<double>();
      torch::NoGradGuard ng;
      flat[i] = orig + h;
      const double up = loss_of().item<double>();
      flat[i] = orig - h;
      const double down = loss_of().item<double>();
      flat[i] = orig;
      worst = std::max(worst, relative_error(g[i].item<double>(), (up - down) / (2 * h), 1e-6));
    }
  }
  CHECK(worst < 1e-3);
}

TEST_CASE("batched render equals per-field renders") {
  auto a = random_field(4, 2, 51), b = random_field(4, 2, 52);
  b.heads = a.heads;
  VMField both{torch::cat({a.planes, b.planes}), torch::cat({a.lines, b.lines}), a.heads};
  auto p1 = make_pose(Mat3::Identity(), Vec3(0, 0, 2.5), 4, 4.0);
  auto p2 = make_pose(Mat3::Identity(), Vec3(0.1, 0, 2.0), 4, 4.0);
  std::vector<RayBundle> rays{generate_rays(p1, torch::kFloat64), generate_rays(p2, torch::kFloat64)};
  auto batched = render_batch(both, rays, {8, false});
  auto ra = render(a, rays[0], {8, false});
  auto rb = render(b, rays[1], {8, false});
  CHECK(torch::allclose(batched.color[0], ra.color, 0, 1e-12));
  CHECK(torch::allclose(batched.color[1], rb.color, 0, 1e-12));
  CHECK_THROWS_AS(render_batch(both, std::span<const RayBundle>(rays.data(), 1), {8, false}), ValidationError);
}

}
