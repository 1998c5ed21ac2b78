// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <span>
#include <vector>

#include "drg/errors.hpp"
#include "drg/nn/backbone.hpp"
#include "drg/tensor.hpp"
#include "drg/types.hpp"

namespace drg {

/// Stabilized softmax: subtracts the max before exponentiating.
template <typename T>
std::vector<T> softmax(std::span<const T> logits) {
  if (logits.empty()) throw std::invalid_argument("softmax: empty input");
  for (T v : logits)
    if (!std::isfinite(static_cast<double>(v)))
      throw NumericError("softmax: non-finite logit");
  const T max = *std::max_element(logits.begin(), logits.end());
  std::vector<T> out(logits.size());
  T sum = 0;
  for (std::size_t i = 0; i < logits.size(); ++i) {
    out[i] = std::exp(logits[i] - max);
    sum += out[i];
  }
  for (T& v : out) v /= sum;
  return out;
}

template <typename T>
std::vector<T> softmax(const std::vector<T>& logits) {
  return softmax(std::span<const T>(logits));
}

/// Row-wise softmax over an N x K logits matrix.
template <typename T>
Tensor<T> softmax_rows(const Tensor<T>& logits) {
  if (logits.rank() != 2)
    throw std::invalid_argument("softmax_rows: expected N x K input");
  Tensor<T> out(logits.shape());
  const std::size_t n = logits.dim(0), k = logits.dim(1);
  for (std::size_t i = 0; i < n; ++i) {
    const auto row =
        softmax(std::span<const T>(logits.data() + i * k, k));
    std::copy(row.begin(), row.end(), out.data() + i * k);
  }
  return out;
}

/// -sum_j y_j log p_j with probabilities clamped at 1e-12 before the log.
template <typename T>
double cross_entropy(const RoutingVector& target, std::span<const T> probs) {
  if (static_cast<std::size_t>(target.length()) != probs.size())
    throw std::invalid_argument("cross_entropy: length mismatch");
  const double p = std::max(
      static_cast<double>(probs[static_cast<std::size_t>(target.index())]),
      1e-12);
  return -std::log(p);
}

template <typename T>
double cross_entropy(const RoutingVector& target, const std::vector<T>& probs) {
  return cross_entropy(target, std::span<const T>(probs));
}

/// Mean cross-entropy over a batch plus dL/dlogits = (p - y)/N.
template <typename T>
struct LossResult {
  double loss = 0;
  Tensor<T> dlogits;
};

template <typename T>
LossResult<T> softmax_cross_entropy(const Tensor<T>& logits,
                                    const std::vector<int>& targets) {
  if (logits.rank() != 2)
    throw std::invalid_argument("loss: expected N x K logits");
  const std::size_t n = logits.dim(0), k = logits.dim(1);
  if (targets.size() != n)
    throw std::invalid_argument("loss: target count mismatch");
  LossResult<T> res;
  res.dlogits = Tensor<T>(logits.shape());
  double total = 0;
  for (std::size_t i = 0; i < n; ++i) {
    if (targets[i] < 0 || static_cast<std::size_t>(targets[i]) >= k)
      throw std::invalid_argument("loss: target out of range");
    const auto probs = softmax(std::span<const T>(logits.data() + i * k, k));
    total += cross_entropy(RoutingVector(targets[i], static_cast<int>(k)),
                           std::span<const T>(probs));
    for (std::size_t j = 0; j < k; ++j) {
      const T y = (j == static_cast<std::size_t>(targets[i])) ? T{1} : T{0};
      res.dlogits(i, j) = (probs[j] - y) / static_cast<T>(n);
    }
  }
  res.loss = total / static_cast<double>(n);
  return res;
}

/// Max-based binarization (no threshold): one-hot at the first argmax.
template <typename T>
RoutingVector binarize(std::span<const T> logits) {
  return RoutingVector(argmax_first(logits), static_cast<int>(logits.size()));
}

template <typename T>
RoutingVector binarize(const std::vector<T>& logits) {
  return binarize(std::span<const T>(logits));
}

/// One route per sample, in batch order, with the softmax confidence of the
/// chosen class.
struct RoutePrediction {
  RoutingVector route;
  double confidence = 0;
};

template <typename T>
std::vector<RoutePrediction> rrn_predict(nn::ResNet<T>& rrn,
                                         const Tensor<T>& images,
                                         std::size_t expected_k) {
  if (static_cast<std::size_t>(rrn.out_classes()) != expected_k)
    throw ConfigError("rrn: head width " + std::to_string(rrn.out_classes()) +
                      " does not match K=" + std::to_string(expected_k));
  const Tensor<T> logits = rrn.forward(images, /*train=*/false);
  const std::size_t n = logits.dim(0), k = logits.dim(1);
  std::vector<RoutePrediction> out;
  out.reserve(n);
  for (std::size_t i = 0; i < n; ++i) {
    const std::span<const T> row(logits.data() + i * k, k);
    const RoutingVector route = binarize(row);
    const auto probs = softmax(row);
    out.push_back(
        {route,
         static_cast<double>(probs[static_cast<std::size_t>(route.index())])});
  }
  return out;
}

inline void write_route_dump(const std::filesystem::path& path,
                             const std::vector<std::size_t>& original_indices,
                             const std::vector<RoutePrediction>& preds) {
  if (original_indices.size() != preds.size())
    throw std::invalid_argument("route dump: size mismatch");
  std::ofstream os(path);
  if (!os) throw DataError("route dump: cannot open: " + path.string());
  os << "original_index,predicted_class,confidence\n";
  char buf[64];
  for (std::size_t i = 0; i < preds.size(); ++i) {
    std::snprintf(buf, sizeof(buf), "%.17g", preds[i].confidence);
    os << original_indices[i] << "," << preds[i].route.index() << "," << buf
       << "\n";
  }
  if (!os) throw DataError("route dump: write failed: " + path.string());
}

}  // namespace drg
