#pragma once

#include <torch/types.h>

#include <filesystem>
#include <stdexcept>

namespace nvsdiff {

class ImageIoError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// 8-bit RGB PNG; pixel = round(255 * clamp(v, 0, 1)). Input is [H, W, 3].
void write_png(const std::filesystem::path& path, const torch::Tensor& rgb01);

// Returns float32 [H, W, 3] in [0, 1]. Grayscale and alpha inputs are
// converted to RGB.
torch::Tensor read_png(const std::filesystem::path& path);

// [0, 1] <-> [-1, 1]
inline torch::Tensor to_signed(const torch::Tensor& x01) { return x01 * 2.0 - 1.0; }
inline torch::Tensor to_unit(const torch::Tensor& xs) { return (xs + 1.0) * 0.5; }

// Tiles equally sized [H, W, 3] images into rows of `columns`.
torch::Tensor tile_images(const std::vector<torch::Tensor>& images, int columns);

// Maps a depth map [H, W] to a grayscale RGB image, near = bright.
torch::Tensor colorize_depth(const torch::Tensor& depth, const torch::Tensor& opacity);

}  // namespace nvsdiff
