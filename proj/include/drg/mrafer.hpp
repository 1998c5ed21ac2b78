// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstddef>
#include <filesystem>
#include <fstream>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "drg/errors.hpp"
#include "drg/nn/backbone.hpp"
#include "drg/rrn.hpp"
#include "drg/tensor.hpp"
#include "drg/types.hpp"

namespace drg {

/// K expert classifiers, expert k trained on the k-th configured factor.
/// All experts share class count and input size.
template <typename T>
struct ExpertBank {
  std::vector<nn::ResNet<T>> experts;

  std::size_t size() const { return experts.size(); }

  void validate() const {
    if (experts.empty()) throw ConfigError("expert bank: empty");
    const int classes = experts.front().out_classes();
    const int input = experts.front().spec().input_size;
    for (const auto& e : experts)
      if (e.out_classes() != classes || e.spec().input_size != input)
        throw ConfigError("expert bank: experts disagree on classes or input size");
  }

  int out_classes() const { return experts.front().out_classes(); }
};

struct RoutedItem {
  std::size_t original_index = 0;
  Tensorf image;
};

/// K groups of samples, each remembering where it came from. Groups are
/// disjoint and together cover the batch; within-group order is original
/// relative order.
struct PartitionedBatch {
  std::vector<std::vector<RoutedItem>> groups;

  std::size_t total() const {
    std::size_t n = 0;
    for (const auto& g : groups) n += g.size();
    return n;
  }
};

inline PartitionedBatch assign(const Batch& batch,
                               const std::vector<RoutingVector>& routes,
                               int k) {
  if (k < 1) throw std::invalid_argument("assign: K < 1");
  if (routes.size() != batch.size())
    throw std::invalid_argument("assign: route count does not match batch");
  PartitionedBatch parts;
  parts.groups.resize(static_cast<std::size_t>(k));
  for (std::size_t i = 0; i < batch.size(); ++i) {
    if (routes[i].length() != k)
      throw std::invalid_argument("assign: route length does not match K");
    parts.groups[static_cast<std::size_t>(routes[i].index())].push_back(
        {i, batch.samples[i].image});
  }
  return parts;
}

/// Splices per-group predictions back to original batch order.
template <typename V>
std::vector<V> gather(const PartitionedBatch& parts,
                      const std::vector<std::vector<V>>& group_preds) {
  if (group_preds.size() != parts.groups.size())
    throw std::invalid_argument("gather: group count mismatch");
  for (std::size_t g = 0; g < parts.groups.size(); ++g)
    if (group_preds[g].size() != parts.groups[g].size())
      throw std::invalid_argument("gather: size mismatch in group " +
                                  std::to_string(g));
  std::vector<V> out(parts.total());
  for (std::size_t g = 0; g < parts.groups.size(); ++g)
    for (std::size_t j = 0; j < parts.groups[g].size(); ++j)
      out[parts.groups[g][j].original_index] = group_preds[g][j];
  return out;
}

/// Forwards each nonempty group through its expert (eval mode) and gathers
/// the logits back to original order as an N x C tensor.
template <typename T>
Tensor<T> mrafer_forward(ExpertBank<T>& bank, const PartitionedBatch& parts) {
  if (bank.size() != parts.groups.size())
    throw ConfigError("mrafer: bank size " + std::to_string(bank.size()) +
                      " does not match K=" + std::to_string(parts.groups.size()));
  bank.validate();
  const std::size_t n = parts.total();
  const std::size_t c = static_cast<std::size_t>(bank.out_classes());
  Tensor<T> out({n, c});
  for (std::size_t g = 0; g < parts.groups.size(); ++g) {
    const auto& group = parts.groups[g];
    if (group.empty()) continue;
    Batch sub;
    sub.samples.reserve(group.size());
    for (const auto& item : group)
      sub.samples.push_back({item.image, 0, ResolutionClass{}, item.original_index});
    const Tensorf packed = pack_images(sub);
    Tensor<T> input = packed.template cast<T>();
    const Tensor<T> logits = bank.experts[g].forward(input, /*train=*/false);
    for (std::size_t j = 0; j < group.size(); ++j)
      for (std::size_t cls = 0; cls < c; ++cls)
        out(group[j].original_index, cls) = logits(j, cls);
  }
  return out;
}

/// Full dynamic-resolution-guided prediction: route with the RRN, dispatch
/// to experts, argmax the gathered logits.
template <typename T>
struct DrgPrediction {
  std::vector<RoutePrediction> routes;
  Tensor<T> logits;
  std::vector<int> expressions;
};

template <typename T>
DrgPrediction<T> drg_predict(nn::ResNet<T>& rrn, ExpertBank<T>& bank,
                             const Batch& batch) {
  if (static_cast<std::size_t>(rrn.out_classes()) != bank.size())
    throw ConfigError("drg: RRN head width " +
                      std::to_string(rrn.out_classes()) +
                      " does not match expert bank size " +
                      std::to_string(bank.size()));
  DrgPrediction<T> pred;
  const std::size_t k = bank.size();
  if (batch.size() == 0) {
    pred.logits = Tensor<T>({0, static_cast<std::size_t>(bank.out_classes())});
    return pred;
  }
  const Tensorf packed = pack_images(batch);
  Tensor<T> input = packed.template cast<T>();
  pred.routes = rrn_predict(rrn, input, k);
  std::vector<RoutingVector> routes;
  routes.reserve(pred.routes.size());
  for (const auto& r : pred.routes) routes.push_back(r.route);
  const PartitionedBatch parts = assign(batch, routes, static_cast<int>(k));
  pred.logits = mrafer_forward(bank, parts);
  const std::size_t c = pred.logits.dim(1);
  pred.expressions.reserve(batch.size());
  for (std::size_t i = 0; i < batch.size(); ++i)
    pred.expressions.push_back(
        argmax_first(std::span<const T>(pred.logits.data() + i * c, c)));
  return pred;
}

template <typename T>
void write_prediction_dump(const std::filesystem::path& path,
                           const Batch& batch, const DrgPrediction<T>& pred,
                           const std::vector<int>& route_factors) {
  std::ofstream os(path);
  if (!os) throw DataError("prediction dump: cannot open: " + path.string());
  os << "original_index,routed_factor,predicted_expression,true_expression\n";
  for (std::size_t i = 0; i < batch.size(); ++i) {
    const int k = pred.routes[i].route.index();
    os << batch.samples[i].original_index << ","
       << route_factors[static_cast<std::size_t>(k)] << ","
       << pred.expressions[i] << "," << batch.samples[i].expression << "\n";
  }
  if (!os) throw DataError("prediction dump: write failed: " + path.string());
}

}  // namespace drg
