// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cmath>
#include <cstdint>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "drg/nn/layers.hpp"
#include "drg/rng.hpp"
#include "drg/tensor.hpp"

namespace drg::nn {

/// Architecture description: stem (conv + batch-norm + ReLU + optional
/// max-pool), then stages of residual BasicBlocks, then global average pool
/// and a fully connected head. The first stage never downsamples; every
/// later stage halves the spatial size in its first block.
struct NetworkSpec {
  int input_size = 224;
  int in_channels = 3;
  int stem_channels = 64;
  int stem_kernel = 7;
  int stem_stride = 2;
  int stem_pad = 3;
  bool stem_pool = true;  // 3x3 stride-2 pad-1 max pool
  std::vector<int> stage_channels = {64, 128, 256, 512};
  std::vector<int> stage_blocks = {2, 2, 2, 2};

  static NetworkSpec resnet18() { return NetworkSpec{}; }

  /// Reduced configuration for gradient checks, equivalence tests and the
  /// desk-scale experiment. The routing math is width-agnostic.
  static NetworkSpec tiny(int input_size, std::vector<int> channels = {8, 16, 32},
                          std::vector<int> blocks = {}, int in_channels = 3,
                          bool stem_pool = false) {
    NetworkSpec s;
    s.input_size = input_size;
    s.in_channels = in_channels;
    s.stem_channels = channels.front();
    s.stem_kernel = 3;
    s.stem_stride = 2;
    s.stem_pad = 1;
    s.stem_pool = stem_pool;
    s.stage_channels = channels;
    s.stage_blocks =
        blocks.empty() ? std::vector<int>(channels.size(), 1) : blocks;
    return s;
  }

  void validate() const {
    if (stage_channels.empty() || stage_channels.size() != stage_blocks.size())
      throw std::invalid_argument("network spec: bad stage configuration");
    for (int b : stage_blocks)
      if (b < 1) throw std::invalid_argument("network spec: empty stage");
  }

  int feature_dim() const { return stage_channels.back(); }

  int stage_stride(std::size_t stage) const { return stage == 0 ? 1 : 2; }

  std::string describe(int out_classes, const char* dtype) const {
    std::ostringstream os;
    os << "drgnet-v1;input=" << input_size << ";in=" << in_channels
       << ";stem=" << stem_channels << "k" << stem_kernel << "s" << stem_stride
       << "p" << stem_pad << ";pool=" << (stem_pool ? 1 : 0) << ";stages=";
    for (std::size_t i = 0; i < stage_channels.size(); ++i) {
      if (i) os << ",";
      os << stage_channels[i] << ":" << stage_blocks[i];
    }
    os << ";classes=" << out_classes << ";dtype=" << dtype;
    return os.str();
  }
};

inline std::uint64_t fnv1a64(const std::string& s) {
  std::uint64_t h = 0xcbf29ce484222325ull;
  for (unsigned char c : s) {
    h ^= c;
    h *= 0x100000001b3ull;
  }
  return h;
}

/// Residual block: two 3x3 conv+bn pairs, ReLU between, input added back
/// before the final ReLU. Projection shortcut (1x1 conv + bn) when the
/// stride or channel count changes.
template <typename T>
class BasicBlock {
 public:
  BasicBlock(int in_ch, int out_ch, int stride)
      : conv1(in_ch, out_ch, 3, stride, 1),
        bn1(out_ch),
        conv2(out_ch, out_ch, 3, 1, 1),
        bn2(out_ch),
        has_proj_(stride != 1 || in_ch != out_ch) {
    if (has_proj_) {
      proj_conv.emplace(in_ch, out_ch, 1, stride, 0);
      proj_bn.emplace(out_ch);
    }
  }

  Conv2d<T> conv1;
  BatchNorm2d<T> bn1;
  Conv2d<T> conv2;
  BatchNorm2d<T> bn2;
  std::optional<Conv2d<T>> proj_conv;
  std::optional<BatchNorm2d<T>> proj_bn;

  bool has_projection() const { return has_proj_; }

  Tensor<T> forward(const Tensor<T>& x, bool train, bool record) {
    Tensor<T> shortcut =
        has_proj_ ? proj_bn->forward(proj_conv->forward(x, record), train, record)
                  : x;
    Tensor<T> y = relu1_.forward(bn1.forward(conv1.forward(x, record), train, record),
                                 record);
    y = bn2.forward(conv2.forward(y, record), train, record);
    for (std::size_t i = 0; i < y.numel(); ++i) y[i] += shortcut[i];
    return relu2_.forward(y, record);
  }

  Tensor<T> backward(const Tensor<T>& dout) {
    const Tensor<T> dsum = relu2_.backward(dout);
    Tensor<T> dmain = conv1.backward(
        bn1.backward(relu1_.backward(conv2.backward(bn2.backward(dsum)))));
    if (has_proj_) {
      const Tensor<T> dshort =
          proj_conv->backward(proj_bn->backward(dsum));
      for (std::size_t i = 0; i < dmain.numel(); ++i) dmain[i] += dshort[i];
    } else {
      for (std::size_t i = 0; i < dmain.numel(); ++i) dmain[i] += dsum[i];
    }
    return dmain;
  }

  void collect(const std::string& prefix, std::vector<ParamRef<T>>& out) {
    conv1.collect(prefix + ".conv1", out);
    bn1.collect(prefix + ".bn1", out);
    conv2.collect(prefix + ".conv2", out);
    bn2.collect(prefix + ".bn2", out);
    if (has_proj_) {
      proj_conv->collect(prefix + ".proj.conv", out);
      proj_bn->collect(prefix + ".proj.bn", out);
    }
  }

  void collect_buffers(const std::string& prefix,
                       std::vector<BufferRef<T>>& out) {
    bn1.collect_buffers(prefix + ".bn1", out);
    bn2.collect_buffers(prefix + ".bn2", out);
    if (has_proj_) proj_bn->collect_buffers(prefix + ".proj.bn", out);
  }

  std::vector<BatchNorm2d<T>*> bn_sites() {
    std::vector<BatchNorm2d<T>*> v{&bn1, &bn2};
    if (has_proj_) v.push_back(&*proj_bn);
    return v;
  }

 private:
  ReLU<T> relu1_, relu2_;
  bool has_proj_ = false;
};

/// The network state: architecture plus trainable parameters and batch-norm
/// running statistics. Eval-mode forward is a pure function of
/// (input, state); train-mode forward updates running statistics and records
/// intermediates for backward.
template <typename T>
class ResNet {
 public:
  ResNet(const NetworkSpec& spec, int out_classes)
      : spec_(spec),
        out_classes_(out_classes),
        stem_(spec.in_channels, spec.stem_channels, spec.stem_kernel,
              spec.stem_stride, spec.stem_pad),
        stem_bn_(spec.stem_channels),
        head_(spec.feature_dim(), out_classes) {
    spec_.validate();
    if (out_classes < 2)
      throw std::invalid_argument("network: out_classes < 2");
    if (spec.stem_pool) stem_pool_.emplace(3, 2, 1);
    int in_ch = spec.stem_channels;
    for (std::size_t s = 0; s < spec.stage_channels.size(); ++s) {
      const int ch = spec.stage_channels[s];
      std::vector<BasicBlock<T>> stage;
      for (int b = 0; b < spec.stage_blocks[s]; ++b) {
        const int stride = (b == 0) ? spec_.stage_stride(s) : 1;
        stage.emplace_back(b == 0 ? in_ch : ch, ch, stride);
      }
      in_ch = ch;
      stages_.push_back(std::move(stage));
    }
  }

  const NetworkSpec& spec() const { return spec_; }
  int out_classes() const { return out_classes_; }

  std::string describe() const {
    return spec_.describe(out_classes_, dtype_name<T>::value);
  }
  std::uint64_t fingerprint() const { return fnv1a64(describe()); }

  /// He fan-out for convolutions, identity batch-norm (scale 1, shift 0),
  /// uniform +-1/sqrt(feature_dim) for the head. Deterministic under seed.
  void init(RngStream& rng) {
    for (auto& p : params()) {
      if (p.name.ends_with(".gamma"))
        p.value->fill(T{1});
      else if (p.name.ends_with(".beta") || p.name.ends_with(".b"))
        p.value->zero();
    }
    init_conv(stem_, rng);
    for (auto& stage : stages_)
      for (auto& block : stage) {
        init_conv(block.conv1, rng);
        init_conv(block.conv2, rng);
        if (block.has_projection()) init_conv(*block.proj_conv, rng);
      }
    const double bound = 1.0 / std::sqrt(static_cast<double>(spec_.feature_dim()));
    for (std::size_t i = 0; i < head_.weight.numel(); ++i)
      head_.weight[i] = static_cast<T>(rng.uniform(-bound, bound));
    for (std::size_t i = 0; i < head_.bias.numel(); ++i)
      head_.bias[i] = static_cast<T>(rng.uniform(-bound, bound));
    for (auto& b : buffers()) {
      if (b.name.ends_with(".running_var"))
        b.value->fill(T{1});
      else
        b.value->zero();
    }
  }

  Tensor<T> forward_features(const Tensor<T>& x, bool train) {
    check_input(x);
    const bool record = train;
    Tensor<T> y = stem_relu_.forward(
        stem_bn_.forward(stem_.forward(x, record), train, record), record);
    if (stem_pool_) y = stem_pool_->forward(y, record);
    for (auto& stage : stages_)
      for (auto& block : stage) y = block.forward(y, train, record);
    return gap_.forward(y, record);
  }

  Tensor<T> head_forward(const Tensor<T>& features, bool train) {
    return head_.forward(features, train);
  }

  Tensor<T> forward(const Tensor<T>& x, bool train) {
    return head_forward(forward_features(x, train), train);
  }

  /// dL/dlogits -> dL/dfeatures (head gradients accumulated).
  Tensor<T> backward_head(const Tensor<T>& dlogits) {
    return head_.backward(dlogits);
  }

  /// dL/dfeatures back through pool, stages and stem; returns dL/dinput.
  Tensor<T> backward_trunk(const Tensor<T>& dfeatures) {
    Tensor<T> d = gap_.backward(dfeatures);
    for (auto it = stages_.rbegin(); it != stages_.rend(); ++it)
      for (auto jt = it->rbegin(); jt != it->rend(); ++jt) d = jt->backward(d);
    if (stem_pool_) d = stem_pool_->backward(d);
    return stem_.backward(stem_bn_.backward(stem_relu_.backward(d)));
  }

  Tensor<T> backward(const Tensor<T>& dlogits) {
    return backward_trunk(backward_head(dlogits));
  }

  std::vector<ParamRef<T>> params() {
    std::vector<ParamRef<T>> out;
    stem_.collect("stem.conv", out);
    stem_bn_.collect("stem.bn", out);
    for (std::size_t s = 0; s < stages_.size(); ++s)
      for (std::size_t b = 0; b < stages_[s].size(); ++b)
        stages_[s][b].collect(
            "stage" + std::to_string(s) + ".block" + std::to_string(b), out);
    head_.collect("head", out);
    return out;
  }

  std::vector<BufferRef<T>> buffers() {
    std::vector<BufferRef<T>> out;
    stem_bn_.collect_buffers("stem.bn", out);
    for (std::size_t s = 0; s < stages_.size(); ++s)
      for (std::size_t b = 0; b < stages_[s].size(); ++b)
        stages_[s][b].collect_buffers(
            "stage" + std::to_string(s) + ".block" + std::to_string(b), out);
    return out;
  }

  std::vector<BatchNorm2d<T>*> bn_sites() {
    std::vector<BatchNorm2d<T>*> v{&stem_bn_};
    for (auto& stage : stages_)
      for (auto& block : stage)
        for (auto* bn : block.bn_sites()) v.push_back(bn);
    return v;
  }

  void zero_grads() {
    for (auto& p : params()) p.grad->zero();
  }

  std::size_t param_count() {
    std::size_t n = 0;
    for (auto& p : params()) n += p.value->numel();
    return n;
  }

 private:
  void check_input(const Tensor<T>& x) const {
    if (x.rank() != 4 || x.dim(0) < 1 ||
        static_cast<int>(x.dim(1)) != spec_.in_channels ||
        static_cast<int>(x.dim(2)) != spec_.input_size ||
        static_cast<int>(x.dim(3)) != spec_.input_size)
      throw std::invalid_argument(
          "network forward: expected N x " +
          std::to_string(spec_.in_channels) + " x " +
          std::to_string(spec_.input_size) + " x " +
          std::to_string(spec_.input_size) + " input");
  }

  static void init_conv(Conv2d<T>& conv, RngStream& rng) {
    const double fan_out = static_cast<double>(conv.out_channels()) *
                           conv.kernel() * conv.kernel();
    const double std_dev = std::sqrt(2.0 / fan_out);
    for (std::size_t i = 0; i < conv.weight.numel(); ++i)
      conv.weight[i] = static_cast<T>(rng.normal() * std_dev);
  }

  NetworkSpec spec_;
  int out_classes_;
  Conv2d<T> stem_;
  BatchNorm2d<T> stem_bn_;
  ReLU<T> stem_relu_;
  std::optional<MaxPool2d<T>> stem_pool_;
  std::vector<std::vector<BasicBlock<T>>> stages_;
  GlobalAvgPool<T> gap_;
  Linear<T> head_;
};

}  // namespace drg::nn
