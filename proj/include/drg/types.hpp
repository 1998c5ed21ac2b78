// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cmath>
#include <cstdint>
#include <span>
#include <stdexcept>
#include <vector>

#include "drg/errors.hpp"
#include "drg/tensor.hpp"

namespace drg {

/// One entry of the configured downsample-factor set. `index` is the class
/// position in [0, K); eval-only extra factors (e.g. x12) carry index -1 and
/// extra = true, and are never valid routing targets.
struct ResolutionClass {
  int index = 0;
  int factor = 1;
  bool extra = false;
};

/// Image + expression label + resolution label + position in its batch.
/// Images are H x W x 3 channel-last with values in [0, 1]; normalization
/// (part of augmentation) moves values outside that range.
struct LabeledSample {
  Tensorf image;
  int expression = 0;
  ResolutionClass resolution;
  std::size_t original_index = 0;
};

/// One-hot selector over K experts.
class RoutingVector {
 public:
  RoutingVector(int index, int length) : index_(index), length_(length) {
    if (length <= 0) throw std::invalid_argument("routing vector: length < 1");
    if (index < 0 || index >= length)
      throw std::invalid_argument("routing vector: index out of range");
  }

  int index() const { return index_; }
  int length() const { return length_; }

  std::uint8_t operator[](int i) const {
    return i == index_ ? std::uint8_t{1} : std::uint8_t{0};
  }

  std::vector<std::uint8_t> bits() const {
    std::vector<std::uint8_t> v(static_cast<std::size_t>(length_), 0);
    v[static_cast<std::size_t>(index_)] = 1;
    return v;
  }

  bool operator==(const RoutingVector& o) const {
    return index_ == o.index_ && length_ == o.length_;
  }

 private:
  int index_;
  int length_;
};

inline RoutingVector one_hot(int index, int length) {
  return RoutingVector(index, length);
}

/// Smallest index attaining the maximum. The lowest-index tie-break keeps
/// the result independent of floating summation order.
template <typename T>
int argmax_first(std::span<const T> v) {
  if (v.empty()) throw std::invalid_argument("argmax_first: empty vector");
  int best = 0;
  for (std::size_t i = 0; i < v.size(); ++i) {
    if (std::isnan(static_cast<double>(v[i])))
      throw NumericError("argmax_first: NaN at position " + std::to_string(i));
    if (v[i] > v[best]) best = static_cast<int>(i);
  }
  return best;
}

template <typename T>
int argmax_first(const std::vector<T>& v) {
  return argmax_first(std::span<const T>(v));
}

inline double total_accuracy(const std::vector<int>& predictions,
                             const std::vector<int>& labels) {
  if (predictions.size() != labels.size())
    throw std::invalid_argument("total_accuracy: length mismatch");
  if (predictions.empty())
    throw std::invalid_argument("total_accuracy: empty input");
  std::size_t correct = 0;
  for (std::size_t i = 0; i < predictions.size(); ++i)
    if (predictions[i] == labels[i]) ++correct;
  return static_cast<double>(correct) / static_cast<double>(predictions.size());
}

/// Ordered list of samples; sample order defines original indices 0..N-1.
struct Batch {
  std::vector<LabeledSample> samples;

  std::size_t size() const { return samples.size(); }

  static Batch from_samples(std::vector<LabeledSample> s) {
    Batch b{std::move(s)};
    for (std::size_t i = 0; i < b.samples.size(); ++i)
      b.samples[i].original_index = i;
    return b;
  }
};

/// H x W x C channel-last -> C x H x W channel-first.
template <typename T>
Tensor<T> hwc_to_chw(const Tensor<T>& img) {
  if (img.rank() != 3) throw std::invalid_argument("hwc_to_chw: rank != 3");
  const std::size_t h = img.dim(0), w = img.dim(1), c = img.dim(2);
  Tensor<T> out({c, h, w});
  for (std::size_t y = 0; y < h; ++y)
    for (std::size_t x = 0; x < w; ++x)
      for (std::size_t ch = 0; ch < c; ++ch)
        out(ch, y, x) = img(y, x, ch);
  return out;
}

template <typename T>
Tensor<T> chw_to_hwc(const Tensor<T>& img) {
  if (img.rank() != 3) throw std::invalid_argument("chw_to_hwc: rank != 3");
  const std::size_t c = img.dim(0), h = img.dim(1), w = img.dim(2);
  Tensor<T> out({h, w, c});
  for (std::size_t ch = 0; ch < c; ++ch)
    for (std::size_t y = 0; y < h; ++y)
      for (std::size_t x = 0; x < w; ++x)
        out(y, x, ch) = img(ch, y, x);
  return out;
}

/// Pack a batch of equally-sized channel-last images into one
/// N x C x H x W tensor.
inline Tensorf pack_images(const Batch& batch) {
  if (batch.samples.empty()) return Tensorf({0, 0, 0, 0});
  const auto& first = batch.samples.front().image;
  const std::size_t h = first.dim(0), w = first.dim(1), c = first.dim(2);
  Tensorf out({batch.size(), c, h, w});
  for (std::size_t n = 0; n < batch.size(); ++n) {
    const auto& img = batch.samples[n].image;
    if (img.shape() != first.shape())
      throw std::invalid_argument("pack_images: ragged image sizes");
    for (std::size_t y = 0; y < h; ++y)
      for (std::size_t x = 0; x < w; ++x)
        for (std::size_t ch = 0; ch < c; ++ch)
          out(n, ch, y, x) = img(y, x, ch);
  }
  return out;
}

/// Inverse of pack_images for one row.
inline Tensorf unpack_image(const Tensorf& packed, std::size_t n) {
  const std::size_t c = packed.dim(1), h = packed.dim(2), w = packed.dim(3);
  Tensorf img({h, w, c});
  for (std::size_t y = 0; y < h; ++y)
    for (std::size_t x = 0; x < w; ++x)
      for (std::size_t ch = 0; ch < c; ++ch)
        img(y, x, ch) = packed(n, ch, y, x);
  return img;
}

}  // namespace drg
