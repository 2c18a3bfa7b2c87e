#pragma once

// Netpbm raster I/O (binary P5/P6, 8-bit).

#include <filesystem>

#include <torch/torch.h>

namespace mdsm {

/// Writes a [3, H, W] float image in [0, 1] as P6. Values are rounded to 8 bits.
void write_ppm(const std::filesystem::path& path, const torch::Tensor& image);
/// Returns a [3, H, W] float32 tensor with values k / 255.
torch::Tensor read_ppm(const std::filesystem::path& path);

/// Writes an [H, W] mask or grey image. Masks (integral dtypes) store 0/255.
void write_pgm(const std::filesystem::path& path, const torch::Tensor& image);
/// Reads a P5 file as an [H, W] uint8 tensor of raw values.
torch::Tensor read_pgm(const std::filesystem::path& path);

}  // namespace mdsm
