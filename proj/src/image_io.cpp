#include "nvsdiff/image_io.hpp"

#include <png.h>
#include <torch/torch.h>

#include <cstdio>
#include <memory>
#include <vector>

namespace nvsdiff {

namespace {

struct FileCloser {
  void operator()(std::FILE* f) const {
    if (f) std::fclose(f);
  }
};
using FilePtr = std::unique_ptr<std::FILE, FileCloser>;

}  // namespace

void write_png(const std::filesystem::path& path, const torch::Tensor& rgb01) {
  if (rgb01.dim() != 3 || rgb01.size(2) != 3)
    throw ImageIoError("write_png expects [H, W, 3], got " + std::to_string(rgb01.dim()) + "-d");
  auto bytes = rgb01.detach().to(torch::kFloat64).clamp(0.0, 1.0).mul(255.0).round().to(torch::kUInt8).contiguous();
  const auto h = static_cast<png_uint_32>(bytes.size(0));
  const auto w = static_cast<png_uint_32>(bytes.size(1));

  FilePtr fp(std::fopen(path.c_str(), "wb"));
  if (!fp) throw ImageIoError("cannot open " + path.string() + " for writing");

  png_structp png = png_create_write_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
  png_infop info = png ? png_create_info_struct(png) : nullptr;
  if (!png || !info) {
    png_destroy_write_struct(&png, &info);
    throw ImageIoError("libpng initialization failed");
  }
  if (setjmp(png_jmpbuf(png))) {
    png_destroy_write_struct(&png, &info);
    throw ImageIoError("libpng failed writing " + path.string());
  }
  png_init_io(png, fp.get());
  png_set_IHDR(png, info, w, h, 8, PNG_COLOR_TYPE_RGB, PNG_INTERLACE_NONE,
               PNG_COMPRESSION_TYPE_DEFAULT, PNG_FILTER_TYPE_DEFAULT);
  png_write_info(png, info);
  auto* data = bytes.data_ptr<uint8_t>();
  for (png_uint_32 y = 0; y < h; ++y) png_write_row(png, data + static_cast<size_t>(y) * w * 3);
  png_write_end(png, nullptr);
  png_destroy_write_struct(&png, &info);
}

torch::Tensor read_png(const std::filesystem::path& path) {
  FilePtr fp(std::fopen(path.c_str(), "rb"));
  if (!fp) throw ImageIoError("cannot open image " + path.string());
  unsigned char sig[8];
  if (std::fread(sig, 1, 8, fp.get()) != 8 || png_sig_cmp(sig, 0, 8) != 0)
    throw ImageIoError("not a PNG file: " + path.string());

  png_structp png = png_create_read_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
  png_infop info = png ? png_create_info_struct(png) : nullptr;
  if (!png || !info) {
    png_destroy_read_struct(&png, &info, nullptr);
    throw ImageIoError("libpng initialization failed");
  }
  std::vector<uint8_t> buffer;
  if (setjmp(png_jmpbuf(png))) {
    png_destroy_read_struct(&png, &info, nullptr);
    throw ImageIoError("corrupt PNG: " + path.string());
  }
  png_init_io(png, fp.get());
  png_set_sig_bytes(png, 8);
  png_read_info(png, info);

  png_set_strip_16(png);
  png_set_strip_alpha(png);
  png_set_packing(png);
  png_set_palette_to_rgb(png);
  png_set_expand_gray_1_2_4_to_8(png);
  png_set_gray_to_rgb(png);
  png_read_update_info(png, info);

  const auto w = png_get_image_width(png, info);
  const auto h = png_get_image_height(png, info);
  if (png_get_rowbytes(png, info) != static_cast<size_t>(w) * 3) {
    png_destroy_read_struct(&png, &info, nullptr);
    throw ImageIoError("unsupported PNG layout: " + path.string());
  }
  buffer.resize(static_cast<size_t>(w) * h * 3);
  std::vector<png_bytep> rows(h);
  for (png_uint_32 y = 0; y < h; ++y) rows[y] = buffer.data() + static_cast<size_t>(y) * w * 3;
  png_read_image(png, rows.data());
  png_read_end(png, nullptr);
  png_destroy_read_struct(&png, &info, nullptr);

  auto t = torch::from_blob(buffer.data(), {static_cast<int64_t>(h), static_cast<int64_t>(w), 3},
                            torch::kUInt8);
  return t.to(torch::kFloat32).div(255.0);
}

torch::Tensor tile_images(const std::vector<torch::Tensor>& images, int columns) {
  if (images.empty()) throw ImageIoError("tile_images: no images");
  columns = std::max(1, std::min<int>(columns, static_cast<int>(images.size())));
  const int rows = (static_cast<int>(images.size()) + columns - 1) / columns;
  auto blank = torch::zeros_like(images.front());
  std::vector<torch::Tensor> row_tiles;
  for (int r = 0; r < rows; ++r) {
    std::vector<torch::Tensor> cells;
    for (int c = 0; c < columns; ++c) {
      const size_t i = static_cast<size_t>(r * columns + c);
      cells.push_back(i < images.size() ? images[i] : blank);
    }
    row_tiles.push_back(torch::cat(cells, 1));
  }
  return torch::cat(row_tiles, 0);
}

torch::Tensor colorize_depth(const torch::Tensor& depth, const torch::Tensor& opacity) {
  auto mask = opacity > 0.5;
  auto d = depth.detach().to(torch::kFloat32);
  if (!mask.any().item<bool>()) return torch::zeros({d.size(0), d.size(1), 3});
  auto valid = d.masked_select(mask);
  const float lo = valid.min().item<float>();
  const float hi = valid.max().item<float>();
  auto norm = 1.0 - (d - lo) / std::max(hi - lo, 1e-6f);
  norm = torch::where(mask, 0.2 + 0.8 * norm, torch::zeros_like(norm));
  return norm.unsqueeze(-1).expand({-1, -1, 3}).contiguous();
}

}  // namespace nvsdiff
