#pragma once

#include <span>

namespace dotfan::ag::kernels {

struct ConvDims {
  int n = 0, c = 0, h = 0, w = 0;  // input
  int o = 0, ho = 0, wo = 0;       // output
  int k = 0, stride = 1, pad = 0, groups = 1;
};

// Forward convolution (cross-correlation), NCHW, weight [O, C/groups, k, k].
void conv_forward(const ConvDims& d, std::span<const double> x, std::span<const double> w,
                  std::span<double> y);
// dx += conv^T(gy); x-shaped output must be zero-initialised.
void conv_backward_input(const ConvDims& d, std::span<const double> gy,
                         std::span<const double> w, std::span<double> gx);
// dw = sum over batch of gy (x) im2col(x).
void conv_backward_weight(const ConvDims& d, std::span<const double> x,
                          std::span<const double> gy, std::span<double> gw);

}  // namespace dotfan::ag::kernels
