#include "mdsm/image_io.hpp"

#include <fstream>
#include <stdexcept>
#include <string>

namespace mdsm {
namespace {

struct NetpbmHeader {
  std::string magic;
  int64_t width = 0;
  int64_t height = 0;
  int maxval = 0;
};

NetpbmHeader read_header(std::istream& in, const std::filesystem::path& path) {
  NetpbmHeader h;
  auto next_token = [&in]() {
    std::string token;
    while (in >> token) {
      if (token[0] == '#') {
        std::string rest;
        std::getline(in, rest);
        continue;
      }
      return token;
    }
    return token;
  };
  h.magic = next_token();
  h.width = std::stoll(next_token());
  h.height = std::stoll(next_token());
  h.maxval = std::stoi(next_token());
  in.get();  // single whitespace before the raster
  if (!in || h.maxval != 255) {
    throw std::runtime_error("unsupported netpbm file: " + path.string());
  }
  return h;
}

std::ofstream open_out(const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  return out;
}

std::ifstream open_in(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot read " + path.string());
  return in;
}

}  // namespace

void write_ppm(const std::filesystem::path& path, const torch::Tensor& image) {
  TORCH_CHECK(image.dim() == 3 && image.size(0) == 3, "write_ppm expects [3, H, W]");
  auto bytes = image.detach().to(torch::kFloat32).clamp(0.0, 1.0).mul(255.0).round().to(torch::kUInt8);
  bytes = bytes.permute({1, 2, 0}).contiguous();
  auto out = open_out(path);
  out << "P6\n" << image.size(2) << ' ' << image.size(1) << "\n255\n";
  out.write(reinterpret_cast<const char*>(bytes.data_ptr<uint8_t>()), bytes.numel());
}

torch::Tensor read_ppm(const std::filesystem::path& path) {
  auto in = open_in(path);
  const auto h = read_header(in, path);
  if (h.magic != "P6") throw std::runtime_error("not a P6 file: " + path.string());
  auto bytes = torch::empty({h.height, h.width, 3}, torch::kUInt8);
  in.read(reinterpret_cast<char*>(bytes.data_ptr<uint8_t>()), bytes.numel());
  if (!in) throw std::runtime_error("truncated raster: " + path.string());
  return bytes.permute({2, 0, 1}).to(torch::kFloat32).div(255.0).contiguous();
}

void write_pgm(const std::filesystem::path& path, const torch::Tensor& image) {
  TORCH_CHECK(image.dim() == 2, "write_pgm expects [H, W]");
  torch::Tensor bytes;
  if (image.is_floating_point()) {
    bytes = image.detach().clamp(0.0, 1.0).mul(255.0).round().to(torch::kUInt8);
  } else {
    bytes = image.ne(0).to(torch::kUInt8).mul(255);
  }
  bytes = bytes.contiguous();
  auto out = open_out(path);
  out << "P5\n" << image.size(1) << ' ' << image.size(0) << "\n255\n";
  out.write(reinterpret_cast<const char*>(bytes.data_ptr<uint8_t>()), bytes.numel());
}

torch::Tensor read_pgm(const std::filesystem::path& path) {
  auto in = open_in(path);
  const auto h = read_header(in, path);
  if (h.magic != "P5") throw std::runtime_error("not a P5 file: " + path.string());
  auto bytes = torch::empty({h.height, h.width}, torch::kUInt8);
  in.read(reinterpret_cast<char*>(bytes.data_ptr<uint8_t>()), bytes.numel());
  if (!in) throw std::runtime_error("truncated raster: " + path.string());
  return bytes;
}

}  // namespace mdsm
