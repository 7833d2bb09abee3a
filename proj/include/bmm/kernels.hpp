#pragma once

// Raw tensor kernels behind the differentiable operators. Convolutions are
// lowered to im2col + GEMM; the matrix products go through Eigen.

#include <cstddef>
#include <optional>
#include <string>

#include <Eigen/Core>

#include "bmm/tensor.hpp"

namespace bmm::kernels {

template <typename T>
using RowMatrix = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename T>
using MatrixMap = Eigen::Map<RowMatrix<T>>;
template <typename T>
using ConstMatrixMap = Eigen::Map<const RowMatrix<T>>;

struct ConvGeometry {
  std::size_t stride = 1;
  std::size_t padding = 0;
  std::size_t output_padding = 0;  // transpose convolution only
};

inline std::size_t conv_output_extent(std::size_t in, std::size_t kernel,
                                      const ConvGeometry& geo, const char* axis) {
  if (geo.stride == 0) throw ShapeError("convolution stride must be positive");
  if (kernel > in + 2 * geo.padding) {
    throw ShapeError(std::string("conv2d: kernel extent ") + std::to_string(kernel) +
                     " exceeds padded input " + axis + " " +
                     std::to_string(in + 2 * geo.padding));
  }
  return (in + 2 * geo.padding - kernel) / geo.stride + 1;
}

inline std::size_t transpose_output_extent(std::size_t in, std::size_t kernel,
                                           const ConvGeometry& geo, const char* axis) {
  if (geo.stride == 0) throw ShapeError("conv2d_transpose: stride must be positive");
  if (geo.output_padding >= geo.stride) {
    throw ShapeError("conv2d_transpose: output_padding must be smaller than stride");
  }
  const std::size_t full = (in - 1) * geo.stride + kernel + geo.output_padding;
  if (full <= 2 * geo.padding) {
    throw ShapeError(std::string("conv2d_transpose: padding removes the whole ") + axis +
                     " extent");
  }
  return full - 2 * geo.padding;
}

/// Unfolds one [C,H,W] image into a [C*kh*kw, oh*ow] column matrix.
template <typename T>
void im2col(const T* image, std::size_t channels, std::size_t height, std::size_t width,
            std::size_t kh, std::size_t kw, const ConvGeometry& geo, std::size_t oh,
            std::size_t ow, T* cols) {
  const auto pad = static_cast<std::ptrdiff_t>(geo.padding);
  const auto stride = static_cast<std::ptrdiff_t>(geo.stride);
  for (std::size_t c = 0; c < channels; ++c) {
    const T* plane = image + c * height * width;
    for (std::size_t ki = 0; ki < kh; ++ki) {
      for (std::size_t kj = 0; kj < kw; ++kj) {
        T* row = cols + ((c * kh + ki) * kw + kj) * oh * ow;
        for (std::size_t oi = 0; oi < oh; ++oi) {
          const auto y = static_cast<std::ptrdiff_t>(oi) * stride - pad +
                         static_cast<std::ptrdiff_t>(ki);
          T* out = row + oi * ow;
          if (y < 0 || y >= static_cast<std::ptrdiff_t>(height)) {
            std::fill(out, out + ow, T{0});
            continue;
          }
          const T* src = plane + static_cast<std::size_t>(y) * width;
          for (std::size_t oj = 0; oj < ow; ++oj) {
            const auto x = static_cast<std::ptrdiff_t>(oj) * stride - pad +
                           static_cast<std::ptrdiff_t>(kj);
            out[oj] = (x < 0 || x >= static_cast<std::ptrdiff_t>(width))
                          ? T{0}
                          : src[static_cast<std::size_t>(x)];
          }
        }
      }
    }
  }
}

/// Adjoint of im2col: scatters-adds columns back into a [C,H,W] image.
template <typename T>
void col2im(const T* cols, std::size_t channels, std::size_t height, std::size_t width,
            std::size_t kh, std::size_t kw, const ConvGeometry& geo, std::size_t oh,
            std::size_t ow, T* image) {
  const auto pad = static_cast<std::ptrdiff_t>(geo.padding);
  const auto stride = static_cast<std::ptrdiff_t>(geo.stride);
  for (std::size_t c = 0; c < channels; ++c) {
    T* plane = image + c * height * width;
    for (std::size_t ki = 0; ki < kh; ++ki) {
      for (std::size_t kj = 0; kj < kw; ++kj) {
        const T* row = cols + ((c * kh + ki) * kw + kj) * oh * ow;
        for (std::size_t oi = 0; oi < oh; ++oi) {
          const auto y = static_cast<std::ptrdiff_t>(oi) * stride - pad +
                         static_cast<std::ptrdiff_t>(ki);
          if (y < 0 || y >= static_cast<std::ptrdiff_t>(height)) continue;
          T* dst = plane + static_cast<std::size_t>(y) * width;
          const T* in = row + oi * ow;
          for (std::size_t oj = 0; oj < ow; ++oj) {
            const auto x = static_cast<std::ptrdiff_t>(oj) * stride - pad +
                           static_cast<std::ptrdiff_t>(kj);
            if (x >= 0 && x < static_cast<std::ptrdiff_t>(width)) {
              dst[static_cast<std::size_t>(x)] += in[oj];
            }
          }
        }
      }
    }
  }
}

// -------------------------------------------------------------------------
// conv2d: input [N,C,H,W], kernel [F,C,kh,kw], bias [F] -> [N,F,oh,ow]

inline Shape conv2d_output_shape(const Shape& input, const Shape& kernel,
                                 const ConvGeometry& geo) {
  require_rank(input, 4, "conv2d input");
  require_rank(kernel, 4, "conv2d kernel");
  if (input[1] != kernel[1]) {
    throw ShapeError("conv2d: input channel dimension " + std::to_string(input[1]) +
                     " does not match kernel channel dimension " + std::to_string(kernel[1]));
  }
  return {input[0], kernel[0], conv_output_extent(input[2], kernel[2], geo, "height"),
          conv_output_extent(input[3], kernel[3], geo, "width")};
}

template <typename T>
void check_bias(const Tensor<T>* bias, std::size_t filters, const char* op) {
  if (bias && (bias->rank() != 1 || bias->dim(0) != filters)) {
    throw ShapeError(std::string(op) + ": bias shape " + shape_string(bias->shape()) +
                     " does not match filter count " + std::to_string(filters));
  }
}

template <typename T>
Tensor<T> conv2d_forward(const Tensor<T>& input, const Tensor<T>& kernel,
                         const Tensor<T>* bias, const ConvGeometry& geo) {
  const Shape out_shape = conv2d_output_shape(input.shape(), kernel.shape(), geo);
  check_bias(bias, kernel.dim(0), "conv2d");
  const std::size_t n = input.dim(0), c = input.dim(1), h = input.dim(2), w = input.dim(3);
  const std::size_t f = kernel.dim(0), kh = kernel.dim(2), kw = kernel.dim(3);
  const std::size_t oh = out_shape[2], ow = out_shape[3];
  const std::size_t ckk = c * kh * kw, pixels = oh * ow;

  Tensor<T> out(out_shape);
  std::vector<T> cols(ckk * pixels);
  ConstMatrixMap<T> kmat(kernel.data().data(), f, ckk);
  for (std::size_t s = 0; s < n; ++s) {
    im2col(input.data().data() + s * c * h * w, c, h, w, kh, kw, geo, oh, ow, cols.data());
    MatrixMap<T> y(out.data().data() + s * f * pixels, f, pixels);
    y.noalias() = kmat * ConstMatrixMap<T>(cols.data(), ckk, pixels);
    if (bias) {
      for (std::size_t j = 0; j < f; ++j) y.row(j).array() += (*bias)[j];
    }
  }
  return out;
}

template <typename T>
struct ConvGradients {
  std::optional<Tensor<T>> input;
  std::optional<Tensor<T>> kernel;
  std::optional<Tensor<T>> bias;
};

template <typename T>
ConvGradients<T> conv2d_backward(const Tensor<T>& input, const Tensor<T>& kernel,
                                 const Tensor<T>& grad_out, const ConvGeometry& geo,
                                 bool want_input, bool want_kernel, bool want_bias) {
  const std::size_t n = input.dim(0), c = input.dim(1), h = input.dim(2), w = input.dim(3);
  const std::size_t f = kernel.dim(0), kh = kernel.dim(2), kw = kernel.dim(3);
  const std::size_t oh = grad_out.dim(2), ow = grad_out.dim(3);
  const std::size_t ckk = c * kh * kw, pixels = oh * ow;

  ConvGradients<T> g;
  if (want_input) g.input.emplace(input.shape());
  if (want_kernel) g.kernel.emplace(kernel.shape());
  if (want_bias) g.bias.emplace(Shape{f});

  std::vector<T> cols(ckk * pixels);
  ConstMatrixMap<T> kmat(kernel.data().data(), f, ckk);
  for (std::size_t s = 0; s < n; ++s) {
    ConstMatrixMap<T> dy(grad_out.data().data() + s * f * pixels, f, pixels);
    if (want_kernel) {
      im2col(input.data().data() + s * c * h * w, c, h, w, kh, kw, geo, oh, ow, cols.data());
      MatrixMap<T>(g.kernel->data().data(), f, ckk).noalias() +=
          dy * ConstMatrixMap<T>(cols.data(), ckk, pixels).transpose();
    }
    if (want_input) {
      MatrixMap<T>(cols.data(), ckk, pixels).noalias() = kmat.transpose() * dy;
      col2im(cols.data(), c, h, w, kh, kw, geo, oh, ow,
             g.input->data().data() + s * c * h * w);
    }
    if (want_bias) {
      for (std::size_t j = 0; j < f; ++j) (*g.bias)[j] += dy.row(j).sum();
    }
  }
  return g;
}

// -------------------------------------------------------------------------
// conv2d_transpose: input [N,C,H,W], kernel [C,F,kh,kw], bias [F] -> [N,F,H',W']
// with H' = (H-1)*stride - 2*padding + kh + output_padding.

inline Shape conv2d_transpose_output_shape(const Shape& input, const Shape& kernel,
                                           const ConvGeometry& geo) {
  require_rank(input, 4, "conv2d_transpose input");
  require_rank(kernel, 4, "conv2d_transpose kernel");
  if (input[1] != kernel[0]) {
    throw ShapeError("conv2d_transpose: input channel dimension " + std::to_string(input[1]) +
                     " does not match kernel input dimension " + std::to_string(kernel[0]));
  }
  return {input[0], kernel[1], transpose_output_extent(input[2], kernel[2], geo, "height"),
          transpose_output_extent(input[3], kernel[3], geo, "width")};
}

template <typename T>
Tensor<T> conv2d_transpose_forward(const Tensor<T>& input, const Tensor<T>& kernel,
                                   const Tensor<T>* bias, const ConvGeometry& geo) {
  const Shape out_shape = conv2d_transpose_output_shape(input.shape(), kernel.shape(), geo);
  check_bias(bias, kernel.dim(1), "conv2d_transpose");
  const std::size_t n = input.dim(0), c = input.dim(1), pixels = input.dim(2) * input.dim(3);
  const std::size_t f = kernel.dim(1), kh = kernel.dim(2), kw = kernel.dim(3);
  const std::size_t oh = out_shape[2], ow = out_shape[3];
  const std::size_t fkk = f * kh * kw;

  Tensor<T> out(out_shape);
  std::vector<T> cols(fkk * pixels);
  ConstMatrixMap<T> kmat(kernel.data().data(), c, fkk);
  for (std::size_t s = 0; s < n; ++s) {
    MatrixMap<T>(cols.data(), fkk, pixels).noalias() =
        kmat.transpose() * ConstMatrixMap<T>(input.data().data() + s * c * pixels, c, pixels);
    T* y = out.data().data() + s * f * oh * ow;
    col2im(cols.data(), f, oh, ow, kh, kw, geo, input.dim(2), input.dim(3), y);
    if (bias) {
      for (std::size_t j = 0; j < f; ++j) {
        T* plane = y + j * oh * ow;
        for (std::size_t p = 0; p < oh * ow; ++p) plane[p] += (*bias)[j];
      }
    }
  }
  return out;
}

template <typename T>
ConvGradients<T> conv2d_transpose_backward(const Tensor<T>& input, const Tensor<T>& kernel,
                                           const Tensor<T>& grad_out, const ConvGeometry& geo,
                                           bool want_input, bool want_kernel, bool want_bias) {
  const std::size_t n = input.dim(0), c = input.dim(1);
  const std::size_t ih = input.dim(2), iw = input.dim(3), pixels = ih * iw;
  const std::size_t f = kernel.dim(1), kh = kernel.dim(2), kw = kernel.dim(3);
  const std::size_t oh = grad_out.dim(2), ow = grad_out.dim(3);
  const std::size_t fkk = f * kh * kw;

  ConvGradients<T> g;
  if (want_input) g.input.emplace(input.shape());
  if (want_kernel) g.kernel.emplace(kernel.shape());
  if (want_bias) g.bias.emplace(Shape{f});

  std::vector<T> cols(fkk * pixels);
  ConstMatrixMap<T> kmat(kernel.data().data(), c, fkk);
  for (std::size_t s = 0; s < n; ++s) {
    const T* dy = grad_out.data().data() + s * f * oh * ow;
    if (want_input || want_kernel) {
      im2col(dy, f, oh, ow, kh, kw, geo, ih, iw, cols.data());
      ConstMatrixMap<T> dcols(cols.data(), fkk, pixels);
      if (want_input) {
        MatrixMap<T>(g.input->data().data() + s * c * pixels, c, pixels).noalias() =
            kmat * dcols;
      }
      if (want_kernel) {
        MatrixMap<T>(g.kernel->data().data(), c, fkk).noalias() +=
            ConstMatrixMap<T>(input.data().data() + s * c * pixels, c, pixels) *
            dcols.transpose();
      }
    }
    if (want_bias) {
      for (std::size_t j = 0; j < f; ++j) {
        const T* plane = dy + j * oh * ow;
        T acc{0};
        for (std::size_t p = 0; p < oh * ow; ++p) acc += plane[p];
        (*g.bias)[j] += acc;
      }
    }
  }
  return g;
}

// -------------------------------------------------------------------------
// dense: input [N,D], weight [D,M], bias [M] -> [N,M]

template <typename T>
Tensor<T> dense_forward(const Tensor<T>& input, const Tensor<T>& weight, const Tensor<T>* bias) {
  require_rank(input.shape(), 2, "dense input");
  require_rank(weight.shape(), 2, "dense weight");
  if (input.dim(1) != weight.dim(0)) {
    throw ShapeError("dense: input feature dimension " + std::to_string(input.dim(1)) +
                     " does not match weight rows " + std::to_string(weight.dim(0)));
  }
  const std::size_t n = input.dim(0), d = input.dim(1), m = weight.dim(1);
  check_bias(bias, m, "dense");
  Tensor<T> out(Shape{n, m});
  MatrixMap<T> y(out.data().data(), n, m);
  y.noalias() = ConstMatrixMap<T>(input.data().data(), n, d) *
                ConstMatrixMap<T>(weight.data().data(), d, m);
  if (bias) {
    for (std::size_t i = 0; i < n; ++i) {
      for (std::size_t j = 0; j < m; ++j) y(i, j) += (*bias)[j];
    }
  }
  return out;
}

// -------------------------------------------------------------------------
// nearest-neighbour upsampling

template <typename T>
Tensor<T> upsample_nearest_forward(const Tensor<T>& input, std::size_t factor) {
  require_rank(input.shape(), 4, "upsample_nearest input");
  if (factor == 0) throw ShapeError("upsample_nearest: factor must be >= 1");
  const std::size_t n = input.dim(0), c = input.dim(1), h = input.dim(2), w = input.dim(3);
  Tensor<T> out(Shape{n, c, h * factor, w * factor});
  const std::size_t ow = w * factor;
  for (std::size_t p = 0; p < n * c; ++p) {
    const T* src = input.data().data() + p * h * w;
    T* dst = out.data().data() + p * h * w * factor * factor;
    for (std::size_t y = 0; y < h * factor; ++y) {
      const T* row = src + (y / factor) * w;
      for (std::size_t x = 0; x < ow; ++x) dst[y * ow + x] = row[x / factor];
    }
  }
  return out;
}

template <typename T>
Tensor<T> upsample_nearest_backward(const Shape& input_shape, const Tensor<T>& grad_out,
                                    std::size_t factor) {
  Tensor<T> g(input_shape);
  const std::size_t h = input_shape[2], w = input_shape[3], ow = w * factor;
  for (std::size_t p = 0; p < input_shape[0] * input_shape[1]; ++p) {
    const T* src = grad_out.data().data() + p * h * w * factor * factor;
    T* dst = g.data().data() + p * h * w;
    for (std::size_t y = 0; y < h * factor; ++y) {
      for (std::size_t x = 0; x < ow; ++x) dst[(y / factor) * w + x / factor] += src[y * ow + x];
    }
  }
  return g;
}

}  // namespace bmm::kernels
