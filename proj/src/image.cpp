#include "dotfan/image.hpp"

#include <cmath>
#include <string>

#include "dotfan/errors.hpp"

namespace dotfan {

Image Image::filled(int size, double value) {
  Image img;
  img.size = size;
  img.pixels.assign(3 * static_cast<std::size_t>(size) * size, value);
  return img;
}

Image Image::mirrored() const {
  Image out = *this;
  for (int c = 0; c < 3; ++c)
    for (int y = 0; y < size; ++y)
      for (int x = 0; x < size; ++x) out.at(c, y, x) = at(c, y, size - 1 - x);
  return out;
}

void Image::validate() const {
  if (size <= 0) throw ContractError("image has non-positive size");
  if (pixels.size() != 3 * plane()) {
    throw ContractError("image of size " + std::to_string(size) + " holds " +
                        std::to_string(pixels.size()) + " values");
  }
  for (double v : pixels) {
    if (!std::isfinite(v)) throw ContractError("image contains a non-finite value");
    if (v < -1.0 || v > 1.0) throw ContractError("image value outside [-1, 1]");
  }
}

double mean_squared_difference(const Image& a, const Image& b) {
  if (a.size != b.size || a.pixels.size() != b.pixels.size()) {
    throw ContractError("image size mismatch");
  }
  double acc = 0.0;
  for (std::size_t i = 0; i < a.pixels.size(); ++i) {
    const double d = a.pixels[i] - b.pixels[i];
    acc += d * d;
  }
  return acc / static_cast<double>(a.pixels.size());
}

}  // namespace dotfan
