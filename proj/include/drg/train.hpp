// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <string>
#include <utility>
#include <vector>

#include "drg/adam.hpp"
#include "drg/degrade.hpp"
#include "drg/errors.hpp"
#include "drg/image.hpp"
#include "drg/nn/backbone.hpp"
#include "drg/rng.hpp"
#include "drg/rrn.hpp"
#include "drg/tensor.hpp"
#include "drg/types.hpp"

namespace drg {

/// Images held quantized to 8 bits (the on-disk representation), converted
/// to [0,1] floats at batch-assembly time. Loading from disk and building
/// from generated samples therefore produce identical pixels.
class InMemoryDataset {
 public:
  struct Item {
    std::vector<std::uint8_t> pixels;  // H x W x 3, channel-last
    int height = 0;
    int width = 0;
    int expression = 0;
    int factor = 0;  // 0 = base corpus (not yet degraded)
    std::string name;
  };

  /// Which manifest entries to load. Base entries carry factor 0 (original
  /// resolution, not yet degraded); degraded entries carry their factor.
  enum class FactorSelect { all, base_only, degraded_only, single };

  static InMemoryDataset load(const std::filesystem::path& root,
                              const std::string& split,
                              FactorSelect select = FactorSelect::all,
                              int factor = 0) {
    const auto split_dir = root / split;
    const DatasetManifest manifest = DatasetManifest::read(split_dir, split);
    InMemoryDataset ds;
    if (std::filesystem::exists(root / "norm.csv"))
      ds.stats_ = NormStats::read(root);
    for (const auto& e : manifest.entries) {
      const bool keep = select == FactorSelect::all ||
                        (select == FactorSelect::base_only && e.factor == 0) ||
                        (select == FactorSelect::degraded_only && e.factor != 0) ||
                        (select == FactorSelect::single && e.factor == factor);
      if (!keep) continue;
      const Tensorf img = read_ppm(split_dir / e.relative_path);
      ds.items_.push_back(quantize(img, e.expression, e.factor, e.relative_path));
    }
    if (ds.items_.empty())
      throw DataError("dataset: no matching entries in " + split_dir.string() +
                      (select == FactorSelect::single
                           ? " for factor " + std::to_string(factor)
                           : std::string{}));
    return ds;
  }

  static InMemoryDataset from_samples(const std::vector<LabeledSample>& samples,
                                      const std::vector<int>& factors,
                                      NormStats stats = NormStats::identity()) {
    if (samples.size() != factors.size())
      throw std::invalid_argument("dataset: factor list length mismatch");
    InMemoryDataset ds;
    ds.stats_ = stats;
    for (std::size_t i = 0; i < samples.size(); ++i)
      ds.items_.push_back(quantize(samples[i].image, samples[i].expression,
                                   factors[i],
                                   "sample_" + std::to_string(i)));
    return ds;
  }

  std::size_t size() const { return items_.size(); }
  const NormStats& stats() const { return stats_; }
  void set_stats(NormStats s) { stats_ = s; }
  const Item& item(std::size_t i) const { return items_[i]; }

  /// Pixel values restored to [0,1]; resolution label resolved through the
  /// degradation config when the item carries a nonzero factor. Base items
  /// get index -1 so a resolution-label training run on them fails loudly.
  LabeledSample sample(std::size_t i, const DegradeConfig& cfg) const {
    const Item& it = items_[i];
    LabeledSample s;
    s.image = Tensorf({static_cast<std::size_t>(it.height),
                       static_cast<std::size_t>(it.width), 3});
    for (std::size_t j = 0; j < s.image.numel(); ++j)
      s.image[j] = static_cast<float>(it.pixels[j]) / 255.0f;
    s.expression = it.expression;
    s.resolution =
        it.factor != 0 ? cfg.resolution_of(it.factor) : ResolutionClass{-1, 0, false};
    s.original_index = i;
    return s;
  }

  /// Channel mean/std over every pixel of every item (population std).
  NormStats compute_stats() const {
    NormStats s;
    double sum[3] = {0, 0, 0}, sum2[3] = {0, 0, 0};
    std::size_t count = 0;
    for (const auto& it : items_) {
      for (std::size_t j = 0; j + 3 <= it.pixels.size(); j += 3) {
        for (int c = 0; c < 3; ++c) {
          const double v =
              static_cast<double>(it.pixels[j + static_cast<std::size_t>(c)]) /
              255.0;
          sum[c] += v;
          sum2[c] += v * v;
        }
        ++count;
      }
    }
    if (count == 0) throw DataError("dataset: empty, cannot compute stats");
    for (int c = 0; c < 3; ++c) {
      s.mean[static_cast<std::size_t>(c)] = sum[c] / static_cast<double>(count);
      const double var =
          sum2[c] / static_cast<double>(count) -
          s.mean[static_cast<std::size_t>(c)] * s.mean[static_cast<std::size_t>(c)];
      s.stddev[static_cast<std::size_t>(c)] = std::sqrt(std::max(var, 1e-12));
    }
    return s;
  }

 private:
  static Item quantize(const Tensorf& img, int expression, int factor,
                       std::string name) {
    if (img.rank() != 3 || img.dim(2) != 3)
      throw std::invalid_argument("dataset: images must be H x W x 3");
    Item it;
    it.height = static_cast<int>(img.dim(0));
    it.width = static_cast<int>(img.dim(1));
    it.expression = expression;
    it.factor = factor;
    it.name = std::move(name);
    it.pixels.resize(img.numel());
    for (std::size_t j = 0; j < img.numel(); ++j)
      it.pixels[j] = static_cast<std::uint8_t>(
          std::lround(std::clamp(img[j], 0.0f, 1.0f) * 255.0f));
    return it;
  }

  std::vector<Item> items_;
  NormStats stats_;
};

enum class LabelOf { expression, resolution };

struct TrainConfig {
  int batch_size = 256;
  double lr = 3e-4;
  int epochs = 80;
  std::uint64_t seed = 0;

  /// Full contract check used at configuration boundaries. train_model
  /// itself tolerates lr == 0 (a deliberate no-op used in tests).
  void validate() const {
    if (batch_size < 1) throw ConfigError("train config: batch_size < 1");
    if (!(lr > 0)) throw ConfigError("train config: lr must be > 0");
    if (epochs < 1) throw ConfigError("train config: epochs < 1");
  }
};

struct TrainResult {
  std::vector<double> epoch_losses;  // mean per-sample loss per epoch
};

namespace detail {

inline constexpr std::uint64_t kTagShuffle = 1ull << 56;
inline constexpr std::uint64_t kTagAugment = 2ull << 56;
inline constexpr std::uint64_t kTagView = 3ull << 56;
inline constexpr std::uint64_t kTagInit = 4ull << 56;

inline void shuffle_indices(std::vector<std::size_t>& idx, RngStream& rng) {
  for (std::size_t i = idx.size(); i > 1; --i) {
    const std::size_t j = static_cast<std::size_t>(rng.uniform_int(i));
    std::swap(idx[i - 1], idx[j]);
  }
}

}  // namespace detail

/// Per-sample hook applied before augmentation (multi-scale training draws a
/// fresh degradation here). Receives a dedicated per-epoch stream.
using ViewFn = std::function<LabeledSample(const LabeledSample&, RngStream&)>;

template <typename T>
TrainResult train_model(nn::ResNet<T>& model, const InMemoryDataset& data,
                        LabelOf label_of, const DegradeConfig& dcfg,
                        const TrainConfig& cfg, const ViewFn& view = {}) {
  if (data.size() == 0) throw std::invalid_argument("train: empty dataset");
  if (cfg.batch_size < 1) throw std::invalid_argument("train: batch_size < 1");
  if (cfg.lr < 0) throw std::invalid_argument("train: lr < 0");

  const int classes = model.out_classes();
  auto label_for = [&](const LabeledSample& s, std::size_t idx) {
    const int label =
        label_of == LabelOf::expression ? s.expression : s.resolution.index;
    if (label < 0 || label >= classes)
      throw DataError("train: label " + std::to_string(label) +
                      " out of range [0," + std::to_string(classes) +
                      ") for entry " + data.item(idx).name);
    return label;
  };

  RngStream root(cfg.seed);
  Adam<T> opt(AdamConfig{cfg.lr, 0.9, 0.999, 1e-8});
  TrainResult result;
  std::vector<std::size_t> order(data.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;

  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    const auto e = static_cast<std::uint64_t>(epoch);
    RngStream shuffle_rng = root.fork(detail::kTagShuffle | e);
    RngStream aug_rng = root.fork(detail::kTagAugment | e);
    RngStream view_rng = root.fork(detail::kTagView | e);
    detail::shuffle_indices(order, shuffle_rng);

    double loss_sum = 0;
    for (std::size_t start = 0; start < order.size();
         start += static_cast<std::size_t>(cfg.batch_size)) {
      const std::size_t end =
          std::min(order.size(), start + static_cast<std::size_t>(cfg.batch_size));
      Batch batch;
      std::vector<int> targets;
      batch.samples.reserve(end - start);
      targets.reserve(end - start);
      for (std::size_t k = start; k < end; ++k) {
        LabeledSample s = data.sample(order[k], dcfg);
        if (view) s = view(s, view_rng);
        targets.push_back(label_for(s, order[k]));
        batch.samples.push_back(
            augment(s, aug_rng, /*train=*/true, data.stats()));
      }
      Tensor<T> images = pack_images(batch).template cast<T>();
      const Tensor<T> logits = model.forward(images, /*train=*/true);
      LossResult<T> loss = softmax_cross_entropy(logits, targets);
      model.backward(loss.dlogits);
      opt.step(model.params());
      model.zero_grads();
      loss_sum += loss.loss * static_cast<double>(end - start);
    }
    result.epoch_losses.push_back(loss_sum / static_cast<double>(data.size()));
  }
  return result;
}

}  // namespace drg
