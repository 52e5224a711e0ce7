#include "dscm/pgm.hpp"

#include <cmath>
#include <fstream>

namespace dscm {

namespace {

void write_p5(const std::string& path, std::size_t w, std::size_t h,
              const std::vector<std::uint8_t>& bytes) {
  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  if (!f) throw std::runtime_error("cannot open " + path + " for writing");
  f << "P5\n" << w << " " << h << "\n255\n";
  f.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!f) throw std::runtime_error("write failure on " + path);
}

}  // namespace

void write_pgm(const std::string& path, const Tensor& image) {
  if (image.ndim() != 2) throw ContractError("write_pgm expects a HxW tensor");
  std::vector<std::uint8_t> bytes(image.size());
  for (std::size_t k = 0; k < image.size(); ++k) {
    double v = std::min(1.0, std::max(-1.0, image[k]));
    bytes[k] = static_cast<std::uint8_t>(std::lround((v + 1.0) * 0.5 * 255.0));
  }
  write_p5(path, image.shape()[1], image.shape()[0], bytes);
}

void write_pgm_heat(const std::string& path, const Tensor& image, double scale) {
  if (image.ndim() != 2) throw ContractError("write_pgm_heat expects a HxW tensor");
  std::vector<std::uint8_t> bytes(image.size());
  for (std::size_t k = 0; k < image.size(); ++k) {
    double v = std::min(1.0, std::max(0.0, image[k] * scale));
    bytes[k] = static_cast<std::uint8_t>(std::lround(v * 255.0));
  }
  write_p5(path, image.shape()[1], image.shape()[0], bytes);
}

Tensor tile_row(const std::vector<Tensor>& images) {
  if (images.empty()) throw ContractError("tile_row of zero images");
  const std::size_t h = images[0].shape()[0];
  std::size_t w = 0;
  for (const Tensor& img : images) {
    if (img.ndim() != 2 || img.shape()[0] != h) throw ContractError("tile_row shape mismatch");
    w += img.shape()[1];
  }
  w += images.size() - 1;
  Tensor out = Tensor::full({h, w}, -1.0);
  std::size_t off = 0;
  for (const Tensor& img : images) {
    for (std::size_t r = 0; r < h; ++r) {
      for (std::size_t c = 0; c < img.shape()[1]; ++c) {
        out.mutable_data()[r * w + off + c] = img[r * img.shape()[1] + c];
      }
    }
    off += img.shape()[1] + 1;
  }
  return out;
}

}  // namespace dscm
