#include "testing.hpp"
#include "helpers.hpp"

#include "nvsdiff/evaluation.hpp"
#include "nvsdiff/image_io.hpp"
#include "nvsdiff/metrics.hpp"
#include "nvsdiff/scene.hpp"

#include <torch/torch.h>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <sys/wait.h>

using namespace nvsdiff;
using namespace testing_util;
namespace fs = std::filesystem;

namespace {

fs::path temp_dir(const std::string& name) {
  auto p = fs::temp_directory_path() / ("nvsdiff_test_" + name);
  fs::remove_all(p);
  fs::create_directories(p);
  return p;
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

ToyScene single_sphere(double radius, double density, const Vec3& rgb) {
  ToyScene s;
  Primitive p;
  p.kind = PrimitiveKind::kSphere;
  p.size = Vec3::Constant(radius);
  p.density = density;
  p.rgb = rgb;
  s.primitives.push_back(p);
  return s;
}

// Straightforward windowed SSIM: valid 11x11 Gaussian windows, per channel.
double ssim_oracle(const torch::Tensor& a, const torch::Tensor& b) {
  const int win = 11;
  const double sigma = 1.5, c1 = 0.01 * 0.01, c2 = 0.03 * 0.03;
  std::vector<double> g(win);
  double gs = 0.0;
  for (int i = 0; i < win; ++i) {
    g[i] = std::exp(-((i - 5) * (i - 5)) / (2 * sigma * sigma));
    gs += g[i];
  }
  for (auto& v : g) v /= gs;
  auto A = a.to(torch::kFloat64).contiguous(), B = b.to(torch::kFloat64).contiguous();
  auto pa = A.accessor<double, 3>(), pb = B.accessor<double, 3>();
  const int h = a.size(0), w = a.size(1);
  double total = 0.0;
  int count = 0;
  for (int c = 0; c < 3; ++c) {
    double sum = 0.0;
    int n = 0;
    for (int y = 0; y + win <= h; ++y)
      for (int x = 0; x + win <= w; ++x) {
        double ma = 0, mb = 0, saa = 0, sbb = 0, sab = 0;
        for (int i = 0; i < win; ++i)
          for (int j = 0; j < win; ++j) {
            const double k = g[i] * g[j], va = pa[y + i][x + j][c], vb = pb[y + i][x + j][c];
            ma += k * va;
            mb += k * vb;
            saa += k * va * va;
            sbb += k * vb * vb;
            sab += k * va * vb;
          }
        const double vara = saa - ma * ma, varb = sbb - mb * mb, cov = sab - ma * mb;
        sum += ((2 * ma * mb + c1) * (2 * cov + c2)) / ((ma * ma + mb * mb + c1) * (vara + varb + c2));
        ++n;
      }
    total += sum / n;
    ++count;
  }
  return total / count;
}

int run_cli(const std::string& args) {
  const std::string cmd = std::string(NVSDIFF_CLI) + " " + args + " > /dev/null 2>&1";
  const int status = std::system(cmd.c_str());
  return WIFEXITED(status) ? WEXITSTATUS(status) : -1;
}

}  // namespace

TEST_SUITE("scene") {

TEST_CASE("scene generation is deterministic and valid") {
  for (uint64_t seed : {0, 1, 7, 123}) {
    auto a = generate_scene(seed), b = generate_scene(seed);
    CHECK(a.to_json() == b.to_json());
    CHECK(a.primitives.size() >= 1);
    CHECK(a.primitives.size() <= 4);
    for (const auto& p : a.primitives) {
      CHECK(p.density > 0.0);
      for (int k = 0; k < 3; ++k) {
        CHECK(p.rgb[k] >= 0.0);
        CHECK(p.rgb[k] <= 1.0);
        CHECK(std::abs(p.center[k]) + p.half_extent()[k] <= 1.0);
      }
    }
    CHECK(ToyScene::from_json(a.to_json()).to_json() == a.to_json());
  }
  CHECK(generate_scene(1).to_json() != generate_scene(2).to_json());
}

TEST_CASE("analytic density and color") {
  auto s = single_sphere(0.4, 12.0, Vec3(0.1, 0.5, 0.9));
  Primitive box;
  box.kind = PrimitiveKind::kBox;
  box.center = Vec3(0.5, 0.5, 0.5);
  box.size = Vec3(0.2, 0.2, 0.2);
  box.density = 3.0;
  box.rgb = Vec3(1, 0, 0);
  s.primitives.push_back(box);
  auto pts = torch::tensor({{0.0, 0.0, 0.0}, {0.9, -0.9, 0.9}, {0.5, 0.5, 0.5}, {0.35, 0.0, 0.0}}, torch::kFloat64);
  auto d = s.density(pts);
  CHECK(d[0].item<double>() == 12.0);
  CHECK(d[1].item<double>() == 0.0);
  CHECK(d[2].item<double>() == 3.0);
  CHECK(d[3].item<double>() == 12.0);
  auto c = s.color(pts);
  CHECK(c[0][2].item<double>() == doctest::Approx(0.9));
  CHECK(c[2][0].item<double>() == doctest::Approx(1.0));
  CHECK((ToyScene{}.density(pts).abs().max().item<double>() == 0.0));
}

TEST_CASE("center pixel matches the chord-length slab value") {
  // 9x9 image: pixel (4, 4) sits on the optical axis.
  auto pose = look_at(Vec3(0, 0, -2), Vec3::Zero(), 9, 8.0);
  const auto b = cube_bounds(2.0);
  const double delta = (b.far - b.near) / 256.0;
  // Radius on a bin boundary so midpoint sampling sees the exact chord.
  const double radius = (2.0 - b.near) - 90 * delta;
  const Vec3 rgb(0.7, 0.4, 0.2);
  const double density = 2.5;
  auto img = render_toy_view(single_sphere(radius, density, rgb), pose, 256);
  for (int k = 0; k < 3; ++k)
    CHECK(img[4][4][k].item<double>() ==
          doctest::Approx(rgb[k] * (1.0 - std::exp(-density * 2.0 * radius))).epsilon(1e-3));
  // Arbitrary radius: still within the discretization tolerance.
  auto img2 = render_toy_view(single_sphere(0.45, 1.0, rgb), pose, 256);
  CHECK(std::abs(img2[4][4][0].item<double>() - rgb[0] * (1.0 - std::exp(-0.9))) < 1e-2);
  CHECK((render_toy_view(ToyScene{}, pose, 64).abs().max().item<double>() == 0.0));
}

TEST_CASE("dataset round trip and determinism") {
  auto root = temp_dir("ds");
  DatasetRenderOptions o;
  o.n_views = 4;
  o.image_size = {8, 12};
  o.samples_per_ray = 32;
  auto summary = generate_dataset(5, 2, o, root / "a");
  CHECK(summary.train == 2);
  generate_dataset(5, 2, o, root / "b");
  CHECK(slurp(root / "a/train/scene_0001/images/002.png") == slurp(root / "b/train/scene_0001/images/002.png"));
  CHECK(slurp(root / "a/train/scene_0001/cameras.json") == slurp(root / "b/train/scene_0001/cameras.json"));

  auto ds = load_split(root / "a", "train");
  REQUIRE(ds.scenes.size() == 2);
  const auto& e = ds.scenes[1];
  CHECK((e.images.sizes() == std::vector<int64_t>{4, 8, 12, 3}));
  REQUIRE(e.ground_truth.has_value());
  auto truth = render_toy_view(*e.ground_truth, e.poses[2], 32);
  CHECK((to_unit(e.images[2]).to(torch::kFloat64) - truth).abs().max().item<double>() <= 0.5 / 255 + 1e-6);
  CHECK(e.images.min().item<float>() >= -1.0f);
  fs::remove_all(root);
}

TEST_CASE("loader rejects malformed scenes") {
  auto root = temp_dir("bad");
  DatasetRenderOptions o;
  o.n_views = 3;
  o.image_size = {8, 8};
  o.samples_per_ray = 16;
  generate_dataset(1, 1, o, root);
  const auto dir = root / "train" / "scene_0000";
  CHECK_NOTHROW(load_scene_dir(dir));

  auto cams = nlohmann::json::parse(slurp(dir / "cameras.json"));
  auto write = [&](const nlohmann::json& j) { std::ofstream(dir / "cameras.json") << j.dump(); };

  auto skew = cams;
  skew["frames"][0]["rotation"] = {1, 0.2, 0, 0, 1, 0, 0, 0, 1};
  write(skew);
  CHECK_THROWS_AS(load_scene_dir(dir), LoadError);

  auto one = cams;
  one["frames"] = nlohmann::json::array({cams["frames"][0]});
  write(one);
  CHECK_THROWS_AS(load_scene_dir(dir), LoadError);

  write(cams);
  fs::rename(dir / "images" / "001.png", dir / "images" / "gone.png");
  try {
    load_scene_dir(dir);
    CHECK(false);
  } catch (const LoadError& err) {
    CHECK(std::string(err.what()).find("001.png") != std::string::npos);
  }
  fs::rename(dir / "images" / "gone.png", dir / "images" / "001.png");
  write_png(dir / "images" / "001.png", torch::zeros({4, 8, 3}));
  CHECK_THROWS_AS(load_scene_dir(dir), LoadError);

  std::ofstream(dir / "cameras.json") << "{not json";
  CHECK_THROWS_AS(load_scene_dir(dir), LoadError);
  CHECK_THROWS_AS(load_split(root, "nope"), LoadError);
  fs::remove_all(root);
}

TEST_CASE("camera file schema round trip") {
  std::mt19937_64 rng(3);
  std::vector<CameraPose> poses{random_pose(rng, 10), random_pose(rng, 10)};
  std::vector<std::string> files{"000.png", "001.png"}, back_files;
  auto back = cameras_from_json(cameras_to_json(poses, files), &back_files);
  CHECK(back_files == files);
  for (size_t i = 0; i < poses.size(); ++i) {
    CHECK((back[i].rotation - poses[i].rotation).norm() < 1e-12);
    CHECK((back[i].translation - poses[i].translation).norm() < 1e-12);
    CHECK(back[i].focal == poses[i].focal);
  }
  CHECK(split_for_scene(49) == "test");
  CHECK(split_for_scene(50) == "train");
}

}

TEST_SUITE("metrics") {

TEST_CASE("png codec") {
  auto dir = temp_dir("png");
  torch::manual_seed(0);
  auto img = torch::rand({7, 5, 3});
  write_png(dir / "x.png", img);
  auto back = read_png(dir / "x.png");
  CHECK(back.sizes() == img.sizes());
  CHECK((back - img).abs().max().item<float>() <= 0.5f / 255 + 1e-6f);
  CHECK_THROWS_AS(read_png(dir / "missing.png"), ImageIoError);
  std::ofstream(dir / "junk.png") << "not a png";
  CHECK_THROWS_AS(read_png(dir / "junk.png"), ImageIoError);
  fs::remove_all(dir);
}

TEST_CASE("psnr") {
  auto a = torch::full({8, 8, 3}, 0.5);
  CHECK(psnr(a, a) == kPsnrCap);
  CHECK(psnr(a, a + 0.1) == doctest::Approx(20.0).epsilon(1e-5));
  torch::manual_seed(1);
  auto x = torch::rand({6, 6, 3}), y = torch::rand({6, 6, 3});
  const double mse = (x - y).to(torch::kFloat64).pow(2).mean().item<double>();
  CHECK(psnr(x, y) == doctest::Approx(10.0 * std::log10(1.0 / mse)).epsilon(1e-9));
  CHECK_THROWS_AS(psnr(x, torch::rand({5, 6, 3})), ValidationError);
}

TEST_CASE("ssim") {
  auto board = torch::zeros({16, 16, 3});
  for (int y = 0; y < 16; ++y)
    for (int x = 0; x < 16; ++x)
      if ((x / 2 + y / 2) % 2) board[y][x] = torch::tensor({0.9f, 0.6f, 0.3f});
  CHECK(ssim(board, board) == doctest::Approx(1.0).epsilon(1e-9));
  torch::manual_seed(2);
  auto noisy = (board + 0.1 * torch::randn_like(board)).clamp(0, 1);
  const double s = ssim(board, noisy);
  CHECK(s < 1.0);
  CHECK(s == doctest::Approx(ssim_oracle(board, noisy)).epsilon(1e-6));
  auto flat = torch::full({12, 13, 3}, 0.3), other = torch::rand({12, 13, 3});
  CHECK(ssim(flat, other) == doctest::Approx(ssim_oracle(flat, other)).epsilon(1e-6));
  CHECK_THROWS_AS(ssim(torch::zeros({8, 8, 3}), torch::zeros({8, 8, 3})), ValidationError);
}

TEST_CASE("report aggregation and self check") {
  MetricReport r;
  r.views = {{"a", 0, 20.0, 0.5}, {"b", 3, 30.0, 0.7}};
  CHECK(r.mean_psnr() == 25.0);
  CHECK(r.mean_ssim() == doctest::Approx(0.6));
  CHECK(r.to_table().find("b") != std::string::npos);
  auto j = report_to_json(r);
  CHECK(j["mean_psnr"] == 25.0);

  SceneDataset ds;
  DatasetRenderOptions o;
  o.n_views = 3;
  o.image_size = {16, 16};
  Rng rng(4);
  ds.scenes.push_back(scene_from_toy(generate_scene(4), orbit_cameras(o, rng), 32));
  auto check = self_check(ds);
  CHECK(check.views.size() == 3);
  for (const auto& v : check.views) {
    CHECK(v.psnr == kPsnrCap);
    CHECK(v.ssim == doctest::Approx(1.0));
  }
}

}

TEST_SUITE("cli") {

TEST_CASE("exit codes, determinism and the sampling round trip") {
  auto root = temp_dir("cli");
  const auto data = (root / "data").string();
  CHECK(run_cli("") == 1);
  CHECK(run_cli("no-such-command") == 1);
  CHECK(run_cli("generate-data --views 2 --out " + data) == 1);
  CHECK(run_cli("generate-data --seed 3 --n-scenes 1 --views 4 --height 16 --width 16 --samples 32 --out " + data) == 0);
  CHECK(run_cli("generate-data --seed 3 --n-scenes 1 --views 4 --height 16 --width 16 --samples 32 --out " +
                (root / "data2").string()) == 0);
  CHECK(slurp(root / "data/train/scene_0000/images/003.png") ==
        slurp(root / "data2/train/scene_0000/images/003.png"));

  nlohmann::json cfg = {
      {"model",
       {{"image_height", 16}, {"image_width", 16}, {"patch", 4}, {"dim", 32}, {"encoder_depth", 1},
        {"decoder_depth", 1}, {"heads", 2}, {"mlp_ratio", 2.0}, {"grid", 8}, {"channels", 4},
        {"matrix_patch", 4}, {"vector_patch", 4}, {"head_hidden", 8}}},
      {"schedule", {{"total_steps", 100}}},
      {"train", {{"steps", 2}, {"batch_size", 1}, {"rays_per_view", 16}, {"samples_per_ray", 8},
                 {"holdout_every", 0}, {"warmup_steps", 1}}}};
  std::ofstream(root / "cfg.json") << cfg.dump();
  const auto run = (root / "run").string();
  CHECK(run_cli("train --config " + (root / "cfg.json").string() + " --data " + data + " --run-dir " + run) == 0);
  CHECK(fs::exists(root / "run/checkpoints/step_00000002/model.pt"));

  const auto scene = (root / "data/train/scene_0000").string();
  const std::string common = "sample --checkpoint " + run + " --scene " + scene +
                             " --steps 3 --samples-per-ray 8 --seed 1 --novel-views 2 3 --out ";
  CHECK(run_cli(common + (root / "s1").string()) == 0);
  CHECK(run_cli(common + (root / "s2").string()) == 0);
  CHECK(slurp(root / "s1/denoised.png") == slurp(root / "s2/denoised.png"));
  CHECK(slurp(root / "s1/novel_grid.png") == slurp(root / "s2/novel_grid.png"));
  CHECK(fs::exists(root / "s1/field.pt"));
  CHECK(fs::exists(root / "s1/meta.json"));
  // The saved field re-rendered at the saved cameras gives the same novel views.
  CHECK(run_cli("render --field " + (root / "s1/field.pt").string() + " --cameras " +
                (root / "s1/cameras.json").string() + " --samples-per-ray 8 --out " + (root / "r1").string()) == 0);
  CHECK(slurp(root / "r1/view_001.png") == slurp(root / "s1/novel_003.png"));

  // Missing checkpoint -> load error.
  CHECK(run_cli("sample --checkpoint " + (root / "nope").string() + " --scene " + scene) == 2);
  CHECK(run_cli("eval --self-check --data " + data + " --split train --out " + (root / "m.json").string()) == 0);
  auto metrics = nlohmann::json::parse(slurp(root / "m.json"));
  CHECK(metrics["mean_psnr"] == kPsnrCap);
  CHECK(run_cli("eval --checkpoint " + run + " --data " + (root / "missing").string()) == 2);
  fs::remove_all(root);
}

}
