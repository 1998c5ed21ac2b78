// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cmath>
#include <cstdint>
#include <string>
#include <vector>

#include "drg/errors.hpp"
#include "drg/nn/layers.hpp"
#include "drg/tensor.hpp"

namespace drg {

struct AdamConfig {
  double lr = 3e-4;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;

  void validate() const {
    if (lr < 0) throw std::invalid_argument("adam: lr < 0");
    if (beta1 < 0 || beta1 >= 1 || beta2 < 0 || beta2 >= 1)
      throw std::invalid_argument("adam: betas outside [0,1)");
    if (eps <= 0) throw std::invalid_argument("adam: eps <= 0");
  }
};

/// Adam with bias correction. Moment slots are keyed by parameter name and
/// created on first sight; the same optimizer instance must keep seeing the
/// same parameter list.
template <typename T>
class Adam {
 public:
  explicit Adam(AdamConfig cfg = {}) : cfg_(cfg) { cfg_.validate(); }

  const AdamConfig& config() const { return cfg_; }
  long step_count() const { return t_; }

  /// One update over all parameters; skip_mask[i] true freezes parameter i
  /// this step (used by resolution-aware normalization branches).
  void step(const std::vector<nn::ParamRef<T>>& params,
            const std::vector<std::uint8_t>& skip_mask = {}) {
    if (!skip_mask.empty() && skip_mask.size() != params.size())
      throw std::invalid_argument("adam: skip mask length mismatch");
    if (slots_.empty()) {
      slots_.reserve(params.size());
      for (const auto& p : params) {
        Slot s;
        s.name = p.name;
        s.m = Tensor<T>(p.value->shape());
        s.v = Tensor<T>(p.value->shape());
        slots_.push_back(std::move(s));
      }
    }
    if (slots_.size() != params.size())
      throw std::invalid_argument("adam: parameter count changed");
    ++t_;
    const double bc1 = 1.0 - std::pow(cfg_.beta1, static_cast<double>(t_));
    const double bc2 = 1.0 - std::pow(cfg_.beta2, static_cast<double>(t_));
    for (std::size_t i = 0; i < params.size(); ++i) {
      Slot& s = slots_[i];
      if (s.name != params[i].name)
        throw std::invalid_argument("adam: parameter order changed (" + s.name +
                                    " vs " + params[i].name + ")");
      if (!skip_mask.empty() && skip_mask[i]) continue;
      Tensor<T>& p = *params[i].value;
      const Tensor<T>& g = *params[i].grad;
      for (std::size_t j = 0; j < p.numel(); ++j) {
        const double gj = static_cast<double>(g[j]);
        if (std::isnan(gj))
          throw NumericError("adam: NaN gradient in " + s.name);
        const double m = cfg_.beta1 * static_cast<double>(s.m[j]) +
                         (1.0 - cfg_.beta1) * gj;
        const double v = cfg_.beta2 * static_cast<double>(s.v[j]) +
                         (1.0 - cfg_.beta2) * gj * gj;
        s.m[j] = static_cast<T>(m);
        s.v[j] = static_cast<T>(v);
        const double mhat = m / bc1;
        const double vhat = v / bc2;
        p[j] = static_cast<T>(static_cast<double>(p[j]) -
                              cfg_.lr * mhat / (std::sqrt(vhat) + cfg_.eps));
      }
    }
  }

 private:
  struct Slot {
    std::string name;
    Tensor<T> m, v;
  };
  AdamConfig cfg_;
  std::vector<Slot> slots_;
  long t_ = 0;
};

}  // namespace drg
