// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <algorithm>
#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "drg/adam.hpp"
#include "drg/degrade.hpp"
#include "drg/errors.hpp"
#include "drg/mrafer.hpp"
#include "drg/nn/backbone.hpp"
#include "drg/nn/checkpoint.hpp"
#include "drg/rng.hpp"
#include "drg/rrn.hpp"
#include "drg/tensor.hpp"
#include "drg/train.hpp"
#include "drg/types.hpp"

namespace drg {

// ---------------------------------------------------------------------------
// Expert-ensemble pooling (the Mean / Max table columns)
// ---------------------------------------------------------------------------

enum class PoolMode { mean, max };

/// The published description says only "pooling strategies"; this pools the
/// K experts' output vectors elementwise. The pooling site (raw logits vs
/// softmax probabilities) is configurable; logits is the default.
enum class PoolSite { logits, probabilities };

template <typename T>
std::vector<T> ensemble_pool(const std::vector<std::vector<T>>& expert_outputs,
                             PoolMode mode) {
  if (expert_outputs.empty())
    throw std::invalid_argument("ensemble_pool: no experts");
  const std::size_t c = expert_outputs.front().size();
  for (const auto& v : expert_outputs)
    if (v.size() != c)
      throw std::invalid_argument("ensemble_pool: ragged expert outputs");
  std::vector<T> out(c);
  if (mode == PoolMode::mean) {
    for (std::size_t j = 0; j < c; ++j) {
      T s = 0;
      for (const auto& v : expert_outputs) s += v[j];
      out[j] = s / static_cast<T>(expert_outputs.size());
    }
  } else {
    out = expert_outputs.front();
    for (const auto& v : expert_outputs)
      for (std::size_t j = 0; j < c; ++j) out[j] = std::max(out[j], v[j]);
  }
  return out;
}

/// N x C pooled outputs for a whole batch: forward through every expert,
/// optionally softmax, pool elementwise.
template <typename T>
Tensor<T> pooled_forward(ExpertBank<T>& bank, const Tensor<T>& images,
                         PoolMode mode, PoolSite site = PoolSite::logits) {
  bank.validate();
  const std::size_t n = images.dim(0);
  const std::size_t c = static_cast<std::size_t>(bank.out_classes());
  std::vector<Tensor<T>> outputs;
  outputs.reserve(bank.size());
  for (auto& expert : bank.experts) {
    Tensor<T> logits = expert.forward(images, /*train=*/false);
    outputs.push_back(site == PoolSite::probabilities ? softmax_rows(logits)
                                                      : std::move(logits));
  }
  Tensor<T> pooled({n, c});
  for (std::size_t i = 0; i < n; ++i) {
    std::vector<std::vector<T>> rows(bank.size(), std::vector<T>(c));
    for (std::size_t k = 0; k < bank.size(); ++k)
      for (std::size_t j = 0; j < c; ++j) rows[k][j] = outputs[k](i, j);
    const std::vector<T> row = ensemble_pool(rows, mode);
    for (std::size_t j = 0; j < c; ++j) pooled(i, j) = row[j];
  }
  return pooled;
}

// ---------------------------------------------------------------------------
// Multi-scale training
// ---------------------------------------------------------------------------

/// Fresh uniformly drawn factor per call; expression label untouched.
inline LabeledSample mstrain_view(const LabeledSample& sample,
                                  const DegradeConfig& cfg, RngStream& rng) {
  const std::size_t pick =
      static_cast<std::size_t>(rng.uniform_int(cfg.factors.size()));
  return degrade_sample(sample, cfg.factors[pick], cfg);
}

/// ViewFn adapter for train_model.
inline ViewFn make_mstrain_view(const DegradeConfig& cfg) {
  return [cfg](const LabeledSample& s, RngStream& rng) {
    return mstrain_view(s, cfg, rng);
  };
}

// ---------------------------------------------------------------------------
// Resolution-aware batch normalization
// ---------------------------------------------------------------------------

/// Shared convolution/head weights with K parallel normalization branches.
/// Branch state (affines, running stats, Adam moments via stable naming)
/// lives in owned storage; the active branch is copied into the network's
/// normalization sites for the duration of a forward/step and copied back
/// afterwards, so inactive branches stay bit-identical.
template <typename T>
class RaBnResNet {
 public:
  RaBnResNet(const nn::NetworkSpec& spec, int out_classes, int k)
      : net_(spec, out_classes), k_(k) {
    if (k < 1) throw std::invalid_argument("rabn: K < 1");
    const auto sites = net_.bn_sites();
    branches_.resize(static_cast<std::size_t>(k));
    for (auto& branch : branches_) {
      branch.resize(sites.size());
      for (std::size_t s = 0; s < sites.size(); ++s) {
        branch[s].gamma = sites[s]->gamma;
        branch[s].beta = sites[s]->beta;
        branch[s].grad_gamma = Tensor<T>(sites[s]->gamma.shape());
        branch[s].grad_beta = Tensor<T>(sites[s]->beta.shape());
        branch[s].running_mean = sites[s]->running_mean;
        branch[s].running_var = sites[s]->running_var;
      }
    }
  }

  nn::ResNet<T>& net() { return net_; }
  int branch_count() const { return k_; }
  int out_classes() const { return net_.out_classes(); }

  void init(RngStream& rng) {
    net_.init(rng);
    const auto sites = net_.bn_sites();
    for (auto& branch : branches_)
      for (std::size_t s = 0; s < sites.size(); ++s) {
        branch[s].gamma = sites[s]->gamma;
        branch[s].beta = sites[s]->beta;
        branch[s].grad_gamma.zero();
        branch[s].grad_beta.zero();
        branch[s].running_mean = sites[s]->running_mean;
        branch[s].running_var = sites[s]->running_var;
      }
  }

  /// Shared parameters once, then every branch's normalization affines under
  /// stable branch-suffixed names. Order is fixed across calls, so one Adam
  /// instance can own the whole list.
  std::vector<nn::ParamRef<T>> params() {
    std::vector<nn::ParamRef<T>> out;
    for (auto& p : net_.params())
      if (!is_bn_param(p.name)) out.push_back(p);
    for (int b = 0; b < k_; ++b) {
      auto& branch = branches_[static_cast<std::size_t>(b)];
      for (std::size_t s = 0; s < branch.size(); ++s) {
        const std::string prefix =
            "bn_site" + std::to_string(s) + "@b" + std::to_string(b);
        out.push_back({prefix + ".gamma", &branch[s].gamma, &branch[s].grad_gamma});
        out.push_back({prefix + ".beta", &branch[s].beta, &branch[s].grad_beta});
      }
    }
    return out;
  }

  /// True at positions of normalization affines belonging to other branches;
  /// Adam skips them so their moments and values never move.
  std::vector<std::uint8_t> skip_mask_for(int active) {
    const auto all = params();
    std::vector<std::uint8_t> mask(all.size(), 0);
    const std::string suffix = "@b" + std::to_string(active) + ".";
    for (std::size_t i = 0; i < all.size(); ++i) {
      if (all[i].name.find("@b") == std::string::npos) continue;
      if (all[i].name.find(suffix) == std::string::npos) mask[i] = 1;
    }
    return mask;
  }

  Tensor<T> forward(const Tensor<T>& x, int branch, bool train) {
    check_branch(branch);
    load_branch(branch);
    Tensor<T> out = net_.forward(x, train);
    if (train) save_branch_stats(branch);
    return out;
  }

  /// One training step on `branch`: forward, loss, backward, Adam update of
  /// shared weights plus this branch's affines only.
  template <typename Opt>
  double train_step(const Tensor<T>& x, const std::vector<int>& targets,
                    int branch, Opt& opt) {
    check_branch(branch);
    load_branch(branch);
    const Tensor<T> logits = net_.forward(x, /*train=*/true);
    LossResult<T> loss = softmax_cross_entropy(logits, targets);
    net_.backward(loss.dlogits);
    save_branch_stats(branch);
    save_branch_grads(branch);
    opt.step(params(), skip_mask_for(branch));
    net_.zero_grads();
    zero_branch_grads(branch);
    return loss.loss;
  }

  struct BranchState {
    Tensor<T> gamma, beta;
    Tensor<T> grad_gamma, grad_beta;
    Tensor<T> running_mean, running_var;
  };

  const std::vector<BranchState>& branch_state(int b) const {
    return branches_[static_cast<std::size_t>(b)];
  }

  std::string describe() const {
    return net_.describe() + ";rabn=" + std::to_string(k_);
  }
  std::uint64_t fingerprint() const { return nn::fnv1a64(describe()); }

  /// Canonical persistent state: shared weights plus all branch storage.
  /// The network's transient normalization sites are excluded.
  std::vector<nn::NamedSlot<T>> checkpoint_slots() {
    std::vector<nn::NamedSlot<T>> slots;
    for (auto& p : net_.params())
      if (!is_bn_param(p.name)) slots.push_back({p.name, p.value});
    for (int b = 0; b < k_; ++b) {
      auto& branch = branches_[static_cast<std::size_t>(b)];
      for (std::size_t s = 0; s < branch.size(); ++s) {
        const std::string prefix =
            "bn_site" + std::to_string(s) + "@b" + std::to_string(b);
        slots.push_back({prefix + ".gamma", &branch[s].gamma});
        slots.push_back({prefix + ".beta", &branch[s].beta});
        slots.push_back({prefix + ".running_mean", &branch[s].running_mean});
        slots.push_back({prefix + ".running_var", &branch[s].running_var});
      }
    }
    return slots;
  }

 private:
  static bool is_bn_param(const std::string& name) {
    return name.ends_with(".gamma") || name.ends_with(".beta");
  }

  void check_branch(int b) const {
    if (b < 0 || b >= k_)
      throw std::invalid_argument("rabn: branch " + std::to_string(b) +
                                  " out of range [0," + std::to_string(k_) + ")");
  }

  void load_branch(int b) {
    auto sites = net_.bn_sites();
    auto& branch = branches_[static_cast<std::size_t>(b)];
    for (std::size_t s = 0; s < sites.size(); ++s) {
      sites[s]->gamma = branch[s].gamma;
      sites[s]->beta = branch[s].beta;
      sites[s]->running_mean = branch[s].running_mean;
      sites[s]->running_var = branch[s].running_var;
    }
  }

  void save_branch_stats(int b) {
    auto sites = net_.bn_sites();
    auto& branch = branches_[static_cast<std::size_t>(b)];
    for (std::size_t s = 0; s < sites.size(); ++s) {
      branch[s].running_mean = sites[s]->running_mean;
      branch[s].running_var = sites[s]->running_var;
    }
  }

  void save_branch_grads(int b) {
    auto sites = net_.bn_sites();
    auto& branch = branches_[static_cast<std::size_t>(b)];
    for (std::size_t s = 0; s < sites.size(); ++s) {
      for (std::size_t j = 0; j < branch[s].grad_gamma.numel(); ++j)
        branch[s].grad_gamma[j] += sites[s]->grad_gamma[j];
      for (std::size_t j = 0; j < branch[s].grad_beta.numel(); ++j)
        branch[s].grad_beta[j] += sites[s]->grad_beta[j];
    }
  }

  void zero_branch_grads(int b) {
    auto& branch = branches_[static_cast<std::size_t>(b)];
    for (auto& site : branch) {
      site.grad_gamma.zero();
      site.grad_beta.zero();
    }
  }

  nn::ResNet<T> net_;
  int k_;
  std::vector<std::vector<BranchState>> branches_;
};

// ---------------------------------------------------------------------------
// Adversarial domain adaptation
// ---------------------------------------------------------------------------

/// Identity forward; backward multiplies by -lambda.
template <typename T>
struct GradientReversal {
  double lambda = 1.0;

  Tensor<T> forward(const Tensor<T>& x) const { return x; }

  Tensor<T> backward(const Tensor<T>& dout) const {
    Tensor<T> dx(dout.shape());
    for (std::size_t i = 0; i < dout.numel(); ++i)
      dx[i] = static_cast<T>(-lambda) * dout[i];
    return dx;
  }
};

/// Two-way domain classifier on the feature vector.
template <typename T>
class DaHead {
 public:
  explicit DaHead(int feature_dim) : fc_(feature_dim, 2) {}

  void init(RngStream& rng) {
    const double bound =
        1.0 / std::sqrt(static_cast<double>(fc_.in_features()));
    for (std::size_t i = 0; i < fc_.weight.numel(); ++i)
      fc_.weight[i] = static_cast<T>(rng.uniform(-bound, bound));
    for (std::size_t i = 0; i < fc_.bias.numel(); ++i)
      fc_.bias[i] = static_cast<T>(rng.uniform(-bound, bound));
  }

  Tensor<T> forward(const Tensor<T>& features, bool record) {
    return fc_.forward(features, record);
  }

  Tensor<T> backward(const Tensor<T>& dlogits) { return fc_.backward(dlogits); }

  std::vector<nn::ParamRef<T>> params() {
    std::vector<nn::ParamRef<T>> out;
    fc_.collect("da_head", out);
    return out;
  }

  void zero_grads() {
    for (auto& p : params()) p.grad->zero();
  }

 private:
  nn::Linear<T> fc_;
};

struct DaLosses {
  double task = 0;
  double domain = 0;
};

/// One adversarial step: encoder sees source+target, task head sees source
/// only, domain head sees everything through the reversal. Domain labels:
/// 0 = source, 1 = target.
template <typename T>
DaLosses da_train_step(nn::ResNet<T>& model, DaHead<T>& head,
                       const Tensor<T>& source_images,
                       const std::vector<int>& source_labels,
                       const Tensor<T>& target_images, double lambda,
                       Adam<T>& opt_model, Adam<T>& opt_head) {
  if (lambda < 0) throw std::invalid_argument("da: lambda < 0");
  const std::size_t ns = source_images.dim(0), nt = target_images.dim(0);
  if (ns == 0 || nt == 0)
    throw std::invalid_argument("da: empty source or target batch");

  // One encoder pass over the concatenated batch.
  Tensor<T> all({ns + nt, source_images.dim(1), source_images.dim(2),
                 source_images.dim(3)});
  std::copy(source_images.data(), source_images.data() + source_images.numel(),
            all.data());
  std::copy(target_images.data(), target_images.data() + target_images.numel(),
            all.data() + source_images.numel());

  const Tensor<T> features = model.forward_features(all, /*train=*/true);
  const std::size_t f = features.dim(1);

  Tensor<T> source_features({ns, f});
  std::copy(features.data(), features.data() + ns * f, source_features.data());
  const Tensor<T> task_logits = model.head_forward(source_features, true);
  LossResult<T> task = softmax_cross_entropy(task_logits, source_labels);

  GradientReversal<T> grl{lambda};
  const Tensor<T> domain_logits = head.forward(grl.forward(features), true);
  std::vector<int> domain_labels(ns + nt, 0);
  for (std::size_t i = ns; i < ns + nt; ++i) domain_labels[i] = 1;
  LossResult<T> domain = softmax_cross_entropy(domain_logits, domain_labels);

  const Tensor<T> dfeat_task = model.backward_head(task.dlogits);
  const Tensor<T> dfeat_domain = grl.backward(head.backward(domain.dlogits));

  Tensor<T> dfeat(features.shape());
  for (std::size_t i = 0; i < dfeat.numel(); ++i) dfeat[i] = dfeat_domain[i];
  for (std::size_t i = 0; i < ns * f; ++i) dfeat[i] += dfeat_task[i];
  model.backward_trunk(dfeat);

  opt_model.step(model.params());
  opt_head.step(head.params());
  model.zero_grads();
  head.zero_grads();
  return {task.loss, domain.loss};
}

// ---------------------------------------------------------------------------
// Baseline training loops
// ---------------------------------------------------------------------------

template <typename T>
void save_rabn(const std::filesystem::path& path, RaBnResNet<T>& model) {
  nn::save_tensors(path, model.fingerprint(), model.describe(),
                   model.checkpoint_slots());
}

template <typename T>
RaBnResNet<T> load_rabn(const std::filesystem::path& path) {
  const nn::CheckpointInfo info = nn::read_checkpoint_info(path);
  const std::string marker = ";rabn=";
  const std::size_t pos = info.description.rfind(marker);
  if (pos == std::string::npos)
    throw DataError("checkpoint: not a resolution-aware-normalization model: " +
                    path.string());
  const auto parsed =
      nn::parse_network_description(info.description.substr(0, pos));
  if (parsed.dtype != dtype_name<T>::value)
    throw DataError("checkpoint: stored dtype " + parsed.dtype +
                    ", requested " + dtype_name<T>::value);
  int k = 0;
  try {
    k = std::stoi(info.description.substr(pos + marker.size()));
  } catch (const std::exception&) {
    throw DataError("checkpoint: malformed branch count in " + path.string());
  }
  RaBnResNet<T> model(parsed.spec, parsed.out_classes, k);
  nn::load_tensors(path, model.fingerprint(), model.describe(),
                   model.checkpoint_slots());
  return model;
}

/// Each batch is drawn from a single factor and normalized by that factor's
/// branch; factor batches are interleaved round-robin within an epoch.
template <typename T>
TrainResult train_rabn(RaBnResNet<T>& model, const InMemoryDataset& data,
                       const DegradeConfig& dcfg, const TrainConfig& cfg) {
  if (data.size() == 0) throw std::invalid_argument("rabn train: empty dataset");
  const int classes = model.out_classes();
  std::vector<std::vector<std::size_t>> by_branch(
      static_cast<std::size_t>(model.branch_count()));
  for (std::size_t i = 0; i < data.size(); ++i) {
    const int f = data.item(i).factor;
    ResolutionClass res;
    try {
      res = dcfg.resolution_of(f);
    } catch (const std::invalid_argument&) {
      res.index = -1;
    }
    if (res.extra || res.index < 0 ||
        res.index >= model.branch_count())
      throw DataError("rabn train: entry " + data.item(i).name +
                      " has no branch for factor " + std::to_string(f));
    by_branch[static_cast<std::size_t>(res.index)].push_back(i);
  }

  RngStream root(cfg.seed);
  Adam<T> opt(AdamConfig{cfg.lr, 0.9, 0.999, 1e-8});
  TrainResult result;
  const auto bsz = static_cast<std::size_t>(cfg.batch_size);
  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    const auto e = static_cast<std::uint64_t>(epoch);
    RngStream shuffle_rng = root.fork(detail::kTagShuffle | e);
    RngStream aug_rng = root.fork(detail::kTagAugment | e);
    for (auto& group : by_branch) detail::shuffle_indices(group, shuffle_rng);

    double loss_sum = 0;
    std::size_t seen = 0;
    std::vector<std::size_t> cursor(by_branch.size(), 0);
    bool any = true;
    while (any) {
      any = false;
      for (std::size_t b = 0; b < by_branch.size(); ++b) {
        const auto& group = by_branch[b];
        if (cursor[b] >= group.size()) continue;
        any = true;
        const std::size_t end = std::min(group.size(), cursor[b] + bsz);
        Batch batch;
        std::vector<int> targets;
        for (std::size_t k = cursor[b]; k < end; ++k) {
          LabeledSample s = data.sample(group[k], dcfg);
          if (s.expression < 0 || s.expression >= classes)
            throw DataError("rabn train: label out of range for entry " +
                            data.item(group[k]).name);
          targets.push_back(s.expression);
          batch.samples.push_back(augment(s, aug_rng, true, data.stats()));
        }
        Tensor<T> images = pack_images(batch).template cast<T>();
        const double loss =
            model.train_step(images, targets, static_cast<int>(b), opt);
        loss_sum += loss * static_cast<double>(end - cursor[b]);
        seen += end - cursor[b];
        cursor[b] = end;
      }
    }
    result.epoch_losses.push_back(loss_sum / static_cast<double>(seen));
  }
  return result;
}

struct DaTrainResult {
  std::vector<double> task_losses;
  std::vector<double> domain_losses;
};

/// Adversarial training: source domain carries expression labels, target
/// domain contributes only domain labels. Steps per epoch are limited by
/// the smaller split.
template <typename T>
DaTrainResult train_da(nn::ResNet<T>& model, DaHead<T>& head,
                       const InMemoryDataset& source,
                       const InMemoryDataset& target,
                       const DegradeConfig& dcfg, const TrainConfig& cfg,
                       double lambda) {
  if (source.size() == 0 || target.size() == 0)
    throw std::invalid_argument("da train: empty source or target");
  if (lambda < 0) throw std::invalid_argument("da: lambda < 0");
  const int classes = model.out_classes();

  RngStream root(cfg.seed);
  Adam<T> opt_model(AdamConfig{cfg.lr, 0.9, 0.999, 1e-8});
  Adam<T> opt_head(AdamConfig{cfg.lr, 0.9, 0.999, 1e-8});
  DaTrainResult result;
  const auto bsz = static_cast<std::size_t>(cfg.batch_size);

  std::vector<std::size_t> src_order(source.size()), tgt_order(target.size());
  for (std::size_t i = 0; i < src_order.size(); ++i) src_order[i] = i;
  for (std::size_t i = 0; i < tgt_order.size(); ++i) tgt_order[i] = i;

  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    const auto e = static_cast<std::uint64_t>(epoch);
    RngStream shuffle_rng = root.fork(detail::kTagShuffle | e);
    RngStream aug_rng = root.fork(detail::kTagAugment | e);
    detail::shuffle_indices(src_order, shuffle_rng);
    detail::shuffle_indices(tgt_order, shuffle_rng);

    const std::size_t n = std::min(src_order.size(), tgt_order.size());
    double task_sum = 0, domain_sum = 0;
    std::size_t steps = 0;
    for (std::size_t start = 0; start < n; start += bsz) {
      const std::size_t end = std::min(n, start + bsz);
      Batch src_batch, tgt_batch;
      std::vector<int> labels;
      for (std::size_t k = start; k < end; ++k) {
        LabeledSample s = source.sample(src_order[k], dcfg);
        if (s.expression < 0 || s.expression >= classes)
          throw DataError("da train: label out of range for entry " +
                          source.item(src_order[k]).name);
        labels.push_back(s.expression);
        src_batch.samples.push_back(augment(s, aug_rng, true, source.stats()));
        LabeledSample t = target.sample(tgt_order[k], dcfg);
        tgt_batch.samples.push_back(augment(t, aug_rng, true, target.stats()));
      }
      Tensor<T> src = pack_images(src_batch).template cast<T>();
      Tensor<T> tgt = pack_images(tgt_batch).template cast<T>();
      const DaLosses losses =
          da_train_step(model, head, src, labels, tgt, lambda, opt_model,
                        opt_head);
      task_sum += losses.task;
      domain_sum += losses.domain;
      ++steps;
    }
    result.task_losses.push_back(task_sum / static_cast<double>(steps));
    result.domain_losses.push_back(domain_sum / static_cast<double>(steps));
  }
  return result;
}

}  // namespace drg
