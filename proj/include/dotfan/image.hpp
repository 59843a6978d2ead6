#pragma once

#include <cstddef>
#include <vector>

namespace dotfan {

// Square RGB image with values in [-1, 1], stored channel-major (3 x H x W).
struct Image {
  int size = 0;
  std::vector<double> pixels;

  static Image filled(int size, double value);

  int height() const { return size; }
  int width() const { return size; }
  std::size_t plane() const { return static_cast<std::size_t>(size) * size; }

  double& at(int channel, int y, int x) { return pixels[channel * plane() + y * size + x]; }
  double at(int channel, int y, int x) const { return pixels[channel * plane() + y * size + x]; }

  Image mirrored() const;
  // Throws ContractError when shape, range or finiteness is violated.
  void validate() const;
};

double mean_squared_difference(const Image& a, const Image& b);

}  // namespace dotfan
