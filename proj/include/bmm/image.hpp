#pragma once

#include <span>
#include <vector>

#include "bmm/tensor.hpp"

namespace bmm {

/// A single 2D intensity grid, shape [H,W].
using Image = Tensor<float>;

inline std::size_t image_height(const Image& im) { return im.dim(0); }
inline std::size_t image_width(const Image& im) { return im.dim(1); }

/// Packs images (all [H,W]) selected by `indices` into a [N,1,H,W] batch.
template <typename T = float>
Tensor<T> stack_images(std::span<const Image> images, std::span<const std::size_t> indices) {
  if (indices.empty()) throw ShapeError("stack_images: empty selection");
  const Shape& first = images[indices[0]].shape();
  require_rank(first, 2, "stack_images");
  Tensor<T> batch(Shape{indices.size(), 1, first[0], first[1]});
  const std::size_t plane = first[0] * first[1];
  for (std::size_t k = 0; k < indices.size(); ++k) {
    const auto& im = images[indices[k]];
    if (im.shape() != first) {
      throw ShapeError("stack_images: image " + std::to_string(indices[k]) + " has shape " +
                       shape_string(im.shape()) + ", expected " + shape_string(first));
    }
    for (std::size_t i = 0; i < plane; ++i) batch[k * plane + i] = static_cast<T>(im[i]);
  }
  return batch;
}

template <typename T = float>
Tensor<T> stack_images(std::span<const Image> images) {
  std::vector<std::size_t> idx(images.size());
  for (std::size_t i = 0; i < idx.size(); ++i) idx[i] = i;
  return stack_images<T>(images, idx);
}

/// Splits a [N,1,H,W] batch back into N images.
template <typename T>
std::vector<Image> unstack_images(const Tensor<T>& batch) {
  require_rank(batch.shape(), 4, "unstack_images");
  const std::size_t n = batch.dim(0), h = batch.dim(2), w = batch.dim(3);
  if (batch.dim(1) != 1) throw ShapeError("unstack_images: expected a single channel");
  std::vector<Image> out;
  out.reserve(n);
  for (std::size_t k = 0; k < n; ++k) {
    Image im(Shape{h, w});
    for (std::size_t i = 0; i < h * w; ++i) im[i] = static_cast<float>(batch[k * h * w + i]);
    out.push_back(std::move(im));
  }
  return out;
}

}  // namespace bmm
