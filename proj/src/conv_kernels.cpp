#include "conv_kernels.hpp"

#include <Eigen/Core>

#include <algorithm>
#include <vector>

namespace dotfan::ag::kernels {

namespace {

using MatRM = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using Map = Eigen::Map<MatRM>;
using ConstMap = Eigen::Map<const MatRM>;

// cols: [C*k*k, N*Ho*Wo]
void im2col(const ConvDims& d, const double* x, double* cols) {
  const int L = d.n * d.ho * d.wo;
  const int plane = d.ho * d.wo;
  for (int c = 0; c < d.c; ++c) {
    for (int ki = 0; ki < d.k; ++ki) {
      for (int kj = 0; kj < d.k; ++kj) {
        double* row = cols + static_cast<std::ptrdiff_t>((c * d.k + ki) * d.k + kj) * L;
        for (int n = 0; n < d.n; ++n) {
          const double* src = x + (static_cast<std::ptrdiff_t>(n) * d.c + c) * d.h * d.w;
          double* dst = row + static_cast<std::ptrdiff_t>(n) * plane;
          for (int oy = 0; oy < d.ho; ++oy) {
            const int iy = oy * d.stride - d.pad + ki;
            if (iy < 0 || iy >= d.h) {
              std::fill_n(dst + oy * d.wo, d.wo, 0.0);
              continue;
            }
            const double* srow = src + iy * d.w;
            for (int ox = 0; ox < d.wo; ++ox) {
              const int ix = ox * d.stride - d.pad + kj;
              dst[oy * d.wo + ox] = (ix >= 0 && ix < d.w) ? srow[ix] : 0.0;
            }
          }
        }
      }
    }
  }
}

void col2im_add(const ConvDims& d, const double* cols, double* x) {
  const int L = d.n * d.ho * d.wo;
  const int plane = d.ho * d.wo;
  for (int c = 0; c < d.c; ++c) {
    for (int ki = 0; ki < d.k; ++ki) {
      for (int kj = 0; kj < d.k; ++kj) {
        const double* row = cols + static_cast<std::ptrdiff_t>((c * d.k + ki) * d.k + kj) * L;
        for (int n = 0; n < d.n; ++n) {
          double* dst = x + (static_cast<std::ptrdiff_t>(n) * d.c + c) * d.h * d.w;
          const double* src = row + static_cast<std::ptrdiff_t>(n) * plane;
          for (int oy = 0; oy < d.ho; ++oy) {
            const int iy = oy * d.stride - d.pad + ki;
            if (iy < 0 || iy >= d.h) continue;
            double* drow = dst + iy * d.w;
            for (int ox = 0; ox < d.wo; ++ox) {
              const int ix = ox * d.stride - d.pad + kj;
              if (ix >= 0 && ix < d.w) drow[ix] += src[oy * d.wo + ox];
            }
          }
        }
      }
    }
  }
}

// NCHW output <-> [O, N*Ho*Wo]
void nchw_to_rows(const ConvDims& d, const double* y, double* rows) {
  const int plane = d.ho * d.wo;
  const int L = d.n * plane;
  for (int n = 0; n < d.n; ++n)
    for (int o = 0; o < d.o; ++o)
      std::copy_n(y + (static_cast<std::ptrdiff_t>(n) * d.o + o) * plane, plane,
                  rows + static_cast<std::ptrdiff_t>(o) * L + n * plane);
}

void rows_to_nchw(const ConvDims& d, const double* rows, double* y) {
  const int plane = d.ho * d.wo;
  const int L = d.n * plane;
  for (int n = 0; n < d.n; ++n)
    for (int o = 0; o < d.o; ++o)
      std::copy_n(rows + static_cast<std::ptrdiff_t>(o) * L + n * plane, plane,
                  y + (static_cast<std::ptrdiff_t>(n) * d.o + o) * plane);
}

}  // namespace

void conv_forward(const ConvDims& d, std::span<const double> x, std::span<const double> w,
                  std::span<double> y) {
  const int L = d.n * d.ho * d.wo;
  const int cg = d.c / d.groups, og = d.o / d.groups;
  const int kk = cg * d.k * d.k;
  std::vector<double> cols(static_cast<std::size_t>(d.c) * d.k * d.k * L);
  im2col(d, x.data(), cols.data());
  std::vector<double> rows(static_cast<std::size_t>(d.o) * L);
  for (int g = 0; g < d.groups; ++g) {
    ConstMap wm(w.data() + static_cast<std::ptrdiff_t>(g) * og * kk, og, kk);
    ConstMap cm(cols.data() + static_cast<std::ptrdiff_t>(g) * kk * L, kk, L);
    Map ym(rows.data() + static_cast<std::ptrdiff_t>(g) * og * L, og, L);
    ym.noalias() = wm * cm;
  }
  rows_to_nchw(d, rows.data(), y.data());
}

void conv_backward_input(const ConvDims& d, std::span<const double> gy,
                         std::span<const double> w, std::span<double> gx) {
  const int L = d.n * d.ho * d.wo;
  const int cg = d.c / d.groups, og = d.o / d.groups;
  const int kk = cg * d.k * d.k;
  std::vector<double> rows(static_cast<std::size_t>(d.o) * L);
  nchw_to_rows(d, gy.data(), rows.data());
  std::vector<double> cols(static_cast<std::size_t>(d.c) * d.k * d.k * L);
  for (int g = 0; g < d.groups; ++g) {
    ConstMap wm(w.data() + static_cast<std::ptrdiff_t>(g) * og * kk, og, kk);
    ConstMap gm(rows.data() + static_cast<std::ptrdiff_t>(g) * og * L, og, L);
    Map cm(cols.data() + static_cast<std::ptrdiff_t>(g) * kk * L, kk, L);
    cm.noalias() = wm.transpose() * gm;
  }
  col2im_add(d, cols.data(), gx.data());
}

void conv_backward_weight(const ConvDims& d, std::span<const double> x,
                          std::span<const double> gy, std::span<double> gw) {
  const int L = d.n * d.ho * d.wo;
  const int cg = d.c / d.groups, og = d.o / d.groups;
  const int kk = cg * d.k * d.k;
  std::vector<double> cols(static_cast<std::size_t>(d.c) * d.k * d.k * L);
  im2col(d, x.data(), cols.data());
  std::vector<double> rows(static_cast<std::size_t>(d.o) * L);
  nchw_to_rows(d, gy.data(), rows.data());
  for (int g = 0; g < d.groups; ++g) {
    ConstMap gm(rows.data() + static_cast<std::ptrdiff_t>(g) * og * L, og, L);
    ConstMap cm(cols.data() + static_cast<std::ptrdiff_t>(g) * kk * L, kk, L);
    Map wm(gw.data() + static_cast<std::ptrdiff_t>(g) * og * kk, og, kk);
    wm.noalias() = gm * cm.transpose();
  }
}

}  // namespace dotfan::ag::kernels
