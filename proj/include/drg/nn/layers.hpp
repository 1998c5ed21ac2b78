// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <Eigen/Dense>
#include <cmath>
#include <cstdint>
#include <limits>
#include <stdexcept>
#include <string>
#include <vector>

#include "drg/tensor.hpp"

namespace drg::nn {

template <typename T>
using RowMat =
    Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename T>
using MatMap = Eigen::Map<RowMat<T>>;
template <typename T>
using ConstMatMap = Eigen::Map<const RowMat<T>>;

/// Named handle onto a trainable tensor and its gradient accumulator.
template <typename T>
struct ParamRef {
  std::string name;
  Tensor<T>* value;
  Tensor<T>* grad;
};

/// Named handle onto non-trainable state (batch-norm running statistics).
template <typename T>
struct BufferRef {
  std::string name;
  Tensor<T>* value;
};

inline int conv_out_size(int in, int kernel, int stride, int pad) {
  return (in + 2 * pad - kernel) / stride + 1;
}

// ---------------------------------------------------------------------------
// Convolution (no bias; a batch-norm always follows in this architecture)
// ---------------------------------------------------------------------------

template <typename T>
class Conv2d {
 public:
  Conv2d(int in_ch, int out_ch, int kernel, int stride, int pad)
      : in_ch_(in_ch),
        out_ch_(out_ch),
        kernel_(kernel),
        stride_(stride),
        pad_(pad),
        weight({static_cast<std::size_t>(out_ch),
                static_cast<std::size_t>(in_ch),
                static_cast<std::size_t>(kernel),
                static_cast<std::size_t>(kernel)}),
        grad_weight(weight.shape()) {}

  Tensor<T> weight;
  Tensor<T> grad_weight;

  int in_channels() const { return in_ch_; }
  int out_channels() const { return out_ch_; }
  int kernel() const { return kernel_; }
  int stride() const { return stride_; }

  Tensor<T> forward(const Tensor<T>& x, bool record) {
    check_input(x);
    const int n = static_cast<int>(x.dim(0));
    const int h = static_cast<int>(x.dim(2));
    const int w = static_cast<int>(x.dim(3));
    const int oh = conv_out_size(h, kernel_, stride_, pad_);
    const int ow = conv_out_size(w, kernel_, stride_, pad_);
    const int patch = in_ch_ * kernel_ * kernel_;
    const int positions = oh * ow;

    Tensor<T> out({static_cast<std::size_t>(n),
                   static_cast<std::size_t>(out_ch_),
                   static_cast<std::size_t>(oh), static_cast<std::size_t>(ow)});
    std::vector<T> col(static_cast<std::size_t>(patch) *
                       static_cast<std::size_t>(positions));
    ConstMatMap<T> wm(weight.data(), out_ch_, patch);
    for (int i = 0; i < n; ++i) {
      im2col(x, i, h, w, oh, ow, col.data());
      ConstMatMap<T> cm(col.data(), patch, positions);
      MatMap<T> om(out.data() + static_cast<std::size_t>(i) *
                                    static_cast<std::size_t>(out_ch_) *
                                    static_cast<std::size_t>(positions),
                   out_ch_, positions);
      om.noalias() = wm * cm;
    }
    if (record) {
      input_ = x;
      has_cache_ = true;
    }
    return out;
  }

  /// Accumulates into grad_weight and returns dL/dx.
  Tensor<T> backward(const Tensor<T>& dout) {
    if (!has_cache_) throw std::logic_error("conv backward without forward");
    const Tensor<T>& x = input_;
    const int n = static_cast<int>(x.dim(0));
    const int h = static_cast<int>(x.dim(2));
    const int w = static_cast<int>(x.dim(3));
    const int oh = static_cast<int>(dout.dim(2));
    const int ow = static_cast<int>(dout.dim(3));
    const int patch = in_ch_ * kernel_ * kernel_;
    const int positions = oh * ow;

    Tensor<T> dx(x.shape());
    dx.zero();
    std::vector<T> col(static_cast<std::size_t>(patch) *
                       static_cast<std::size_t>(positions));
    std::vector<T> dcol(col.size());
    ConstMatMap<T> wm(weight.data(), out_ch_, patch);
    MatMap<T> gwm(grad_weight.data(), out_ch_, patch);
    for (int i = 0; i < n; ++i) {
      im2col(x, i, h, w, oh, ow, col.data());
      ConstMatMap<T> cm(col.data(), patch, positions);
      ConstMatMap<T> dm(dout.data() + static_cast<std::size_t>(i) *
                                          static_cast<std::size_t>(out_ch_) *
                                          static_cast<std::size_t>(positions),
                        out_ch_, positions);
      gwm.noalias() += dm * cm.transpose();
      MatMap<T> dcm(dcol.data(), patch, positions);
      dcm.noalias() = wm.transpose() * dm;
      col2im_add(dcol.data(), i, h, w, oh, ow, dx);
    }
    has_cache_ = false;
    input_ = Tensor<T>();
    return dx;
  }

  void collect(const std::string& prefix, std::vector<ParamRef<T>>& out) {
    out.push_back({prefix + ".w", &weight, &grad_weight});
  }

 private:
  void check_input(const Tensor<T>& x) const {
    if (x.rank() != 4 || static_cast<int>(x.dim(1)) != in_ch_)
      throw std::invalid_argument("conv: input shape mismatch");
  }

  void im2col(const Tensor<T>& x, int sample, int h, int w, int oh, int ow,
              T* col) const {
    const T* base = x.data() + static_cast<std::size_t>(sample) *
                                   static_cast<std::size_t>(in_ch_) *
                                   static_cast<std::size_t>(h) *
                                   static_cast<std::size_t>(w);
    std::size_t r = 0;
    for (int c = 0; c < in_ch_; ++c) {
      const T* plane = base + static_cast<std::size_t>(c) *
                                  static_cast<std::size_t>(h) *
                                  static_cast<std::size_t>(w);
      for (int ky = 0; ky < kernel_; ++ky) {
        for (int kx = 0; kx < kernel_; ++kx, ++r) {
          T* dst = col + r * static_cast<std::size_t>(oh) *
                             static_cast<std::size_t>(ow);
          for (int oy = 0; oy < oh; ++oy) {
            const int iy = oy * stride_ - pad_ + ky;
            if (iy < 0 || iy >= h) {
              for (int ox = 0; ox < ow; ++ox) *dst++ = T{0};
              continue;
            }
            const T* src_row = plane + static_cast<std::size_t>(iy) *
                                           static_cast<std::size_t>(w);
            for (int ox = 0; ox < ow; ++ox) {
              const int ix = ox * stride_ - pad_ + kx;
              *dst++ = (ix < 0 || ix >= w) ? T{0} : src_row[ix];
            }
          }
        }
      }
    }
  }

  void col2im_add(const T* dcol, int sample, int h, int w, int oh, int ow,
                  Tensor<T>& dx) const {
    T* base = dx.data() + static_cast<std::size_t>(sample) *
                              static_cast<std::size_t>(in_ch_) *
                              static_cast<std::size_t>(h) *
                              static_cast<std::size_t>(w);
    std::size_t r = 0;
    for (int c = 0; c < in_ch_; ++c) {
      T* plane = base + static_cast<std::size_t>(c) *
                            static_cast<std::size_t>(h) *
                            static_cast<std::size_t>(w);
      for (int ky = 0; ky < kernel_; ++ky) {
        for (int kx = 0; kx < kernel_; ++kx, ++r) {
          const T* src = dcol + r * static_cast<std::size_t>(oh) *
                                    static_cast<std::size_t>(ow);
          for (int oy = 0; oy < oh; ++oy) {
            const int iy = oy * stride_ - pad_ + ky;
            if (iy < 0 || iy >= h) {
              src += ow;
              continue;
            }
            T* dst_row = plane + static_cast<std::size_t>(iy) *
                                     static_cast<std::size_t>(w);
            for (int ox = 0; ox < ow; ++ox) {
              const int ix = ox * stride_ - pad_ + kx;
              if (ix >= 0 && ix < w) dst_row[ix] += src[ox];
            }
            src += ow;
          }
        }
      }
    }
  }

  int in_ch_, out_ch_, kernel_, stride_, pad_;
  Tensor<T> input_;
  bool has_cache_ = false;
};

// ---------------------------------------------------------------------------
// Batch normalization over N, H, W per channel
// ---------------------------------------------------------------------------

template <typename T>
class BatchNorm2d {
 public:
  explicit BatchNorm2d(int channels, T momentum = T(0.1), T eps = T(1e-5))
      : channels_(channels),
        momentum_(momentum),
        eps_(eps),
        gamma({static_cast<std::size_t>(channels)}),
        beta({static_cast<std::size_t>(channels)}),
        grad_gamma(gamma.shape()),
        grad_beta(beta.shape()),
        running_mean(gamma.shape()),
        running_var(gamma.shape()) {
    gamma.fill(T{1});
    running_var.fill(T{1});
  }

  Tensor<T> gamma, beta;
  Tensor<T> grad_gamma, grad_beta;
  Tensor<T> running_mean, running_var;

  int channels() const { return channels_; }
  T momentum() const { return momentum_; }

  /// Train mode normalizes with batch statistics (biased variance) and moves
  /// the running statistics toward them by the momentum fraction. Eval mode
  /// uses running statistics only.
  Tensor<T> forward(const Tensor<T>& x, bool train, bool record) {
    if (x.rank() != 4 || static_cast<int>(x.dim(1)) != channels_)
      throw std::invalid_argument("batchnorm: input shape mismatch");
    const std::size_t n = x.dim(0), hw = x.dim(2) * x.dim(3);
    const std::size_t plane = static_cast<std::size_t>(channels_) * hw;
    const T count = static_cast<T>(n * hw);

    Tensor<T> out(x.shape());
    std::vector<T> mean(static_cast<std::size_t>(channels_));
    std::vector<T> inv_std(static_cast<std::size_t>(channels_));
    if (train) {
      for (int c = 0; c < channels_; ++c) {
        T s = 0, s2 = 0;
        for (std::size_t i = 0; i < n; ++i) {
          const T* p = x.data() + i * plane + static_cast<std::size_t>(c) * hw;
          for (std::size_t j = 0; j < hw; ++j) {
            s += p[j];
            s2 += p[j] * p[j];
          }
        }
        const T m = s / count;
        T var = s2 / count - m * m;
        if (var < T{0}) var = T{0};
        mean[static_cast<std::size_t>(c)] = m;
        inv_std[static_cast<std::size_t>(c)] = T{1} / std::sqrt(var + eps_);
        running_mean[static_cast<std::size_t>(c)] =
            (T{1} - momentum_) * running_mean[static_cast<std::size_t>(c)] +
            momentum_ * m;
        running_var[static_cast<std::size_t>(c)] =
            (T{1} - momentum_) * running_var[static_cast<std::size_t>(c)] +
            momentum_ * var;
      }
    } else {
      for (int c = 0; c < channels_; ++c) {
        mean[static_cast<std::size_t>(c)] =
            running_mean[static_cast<std::size_t>(c)];
        inv_std[static_cast<std::size_t>(c)] =
            T{1} /
            std::sqrt(running_var[static_cast<std::size_t>(c)] + eps_);
      }
    }

    if (record) {
      xhat_ = Tensor<T>(x.shape());
      train_cache_ = train;
    }
    for (std::size_t i = 0; i < n; ++i) {
      for (int c = 0; c < channels_; ++c) {
        const std::size_t off = i * plane + static_cast<std::size_t>(c) * hw;
        const T* p = x.data() + off;
        T* q = out.data() + off;
        const T m = mean[static_cast<std::size_t>(c)];
        const T is = inv_std[static_cast<std::size_t>(c)];
        const T g = gamma[static_cast<std::size_t>(c)];
        const T b = beta[static_cast<std::size_t>(c)];
        if (record) {
          T* xh = xhat_.data() + off;
          for (std::size_t j = 0; j < hw; ++j) {
            xh[j] = (p[j] - m) * is;
            q[j] = g * xh[j] + b;
          }
        } else {
          for (std::size_t j = 0; j < hw; ++j) q[j] = g * (p[j] - m) * is + b;
        }
      }
    }
    if (record) {
      inv_std_cache_ = std::move(inv_std);
      has_cache_ = true;
    }
    return out;
  }

  Tensor<T> backward(const Tensor<T>& dout) {
    if (!has_cache_) throw std::logic_error("batchnorm backward without forward");
    const std::size_t n = dout.dim(0), hw = dout.dim(2) * dout.dim(3);
    const std::size_t plane = static_cast<std::size_t>(channels_) * hw;
    const T count = static_cast<T>(n * hw);

    Tensor<T> dx(dout.shape());
    for (int c = 0; c < channels_; ++c) {
      T sum_d = 0, sum_dx = 0;
      for (std::size_t i = 0; i < n; ++i) {
        const std::size_t off = i * plane + static_cast<std::size_t>(c) * hw;
        const T* d = dout.data() + off;
        const T* xh = xhat_.data() + off;
        for (std::size_t j = 0; j < hw; ++j) {
          sum_d += d[j];
          sum_dx += d[j] * xh[j];
        }
      }
      grad_gamma[static_cast<std::size_t>(c)] += sum_dx;
      grad_beta[static_cast<std::size_t>(c)] += sum_d;
      const T g_is = gamma[static_cast<std::size_t>(c)] *
                     inv_std_cache_[static_cast<std::size_t>(c)];
      if (train_cache_) {
        const T mean_d = sum_d / count;
        const T mean_dx = sum_dx / count;
        for (std::size_t i = 0; i < n; ++i) {
          const std::size_t off = i * plane + static_cast<std::size_t>(c) * hw;
          const T* d = dout.data() + off;
          const T* xh = xhat_.data() + off;
          T* o = dx.data() + off;
          for (std::size_t j = 0; j < hw; ++j)
            o[j] = g_is * (d[j] - mean_d - xh[j] * mean_dx);
        }
      } else {
        for (std::size_t i = 0; i < n; ++i) {
          const std::size_t off = i * plane + static_cast<std::size_t>(c) * hw;
          const T* d = dout.data() + off;
          T* o = dx.data() + off;
          for (std::size_t j = 0; j < hw; ++j) o[j] = g_is * d[j];
        }
      }
    }
    has_cache_ = false;
    xhat_ = Tensor<T>();
    return dx;
  }

  void collect(const std::string& prefix, std::vector<ParamRef<T>>& out) {
    out.push_back({prefix + ".gamma", &gamma, &grad_gamma});
    out.push_back({prefix + ".beta", &beta, &grad_beta});
  }

  void collect_buffers(const std::string& prefix,
                       std::vector<BufferRef<T>>& out) {
    out.push_back({prefix + ".running_mean", &running_mean});
    out.push_back({prefix + ".running_var", &running_var});
  }

 private:
  int channels_;
  T momentum_, eps_;
  Tensor<T> xhat_;
  std::vector<T> inv_std_cache_;
  bool train_cache_ = false;
  bool has_cache_ = false;
};

// ---------------------------------------------------------------------------
// Activations and pooling
// ---------------------------------------------------------------------------

template <typename T>
class ReLU {
 public:
  Tensor<T> forward(const Tensor<T>& x, bool record) {
    Tensor<T> out(x.shape());
    if (record) mask_.assign(x.numel(), 0);
    for (std::size_t i = 0; i < x.numel(); ++i) {
      const bool pos = x[i] > T{0};
      out[i] = pos ? x[i] : T{0};
      if (record && pos) mask_[i] = 1;
    }
    has_cache_ = record;
    return out;
  }

  Tensor<T> backward(const Tensor<T>& dout) {
    if (!has_cache_) throw std::logic_error("relu backward without forward");
    Tensor<T> dx(dout.shape());
    for (std::size_t i = 0; i < dout.numel(); ++i)
      dx[i] = mask_[i] ? dout[i] : T{0};
    has_cache_ = false;
    return dx;
  }

 private:
  std::vector<std::uint8_t> mask_;
  bool has_cache_ = false;
};

template <typename T>
class MaxPool2d {
 public:
  MaxPool2d(int kernel, int stride, int pad)
      : kernel_(kernel), stride_(stride), pad_(pad) {}

  Tensor<T> forward(const Tensor<T>& x, bool record) {
    const int n = static_cast<int>(x.dim(0));
    const int c = static_cast<int>(x.dim(1));
    const int h = static_cast<int>(x.dim(2));
    const int w = static_cast<int>(x.dim(3));
    const int oh = conv_out_size(h, kernel_, stride_, pad_);
    const int ow = conv_out_size(w, kernel_, stride_, pad_);
    Tensor<T> out({static_cast<std::size_t>(n), static_cast<std::size_t>(c),
                   static_cast<std::size_t>(oh), static_cast<std::size_t>(ow)});
    if (record) {
      argmax_.assign(out.numel(), 0);
      in_shape_ = x.shape();
    }
    std::size_t o = 0;
    for (int i = 0; i < n; ++i) {
      for (int ch = 0; ch < c; ++ch) {
        const T* plane = x.data() + (static_cast<std::size_t>(i) *
                                         static_cast<std::size_t>(c) +
                                     static_cast<std::size_t>(ch)) *
                                        static_cast<std::size_t>(h) *
                                        static_cast<std::size_t>(w);
        for (int oy = 0; oy < oh; ++oy) {
          for (int ox = 0; ox < ow; ++ox, ++o) {
            T best = -std::numeric_limits<T>::infinity();
            std::size_t best_idx = 0;
            for (int ky = 0; ky < kernel_; ++ky) {
              const int iy = oy * stride_ - pad_ + ky;
              if (iy < 0 || iy >= h) continue;
              for (int kx = 0; kx < kernel_; ++kx) {
                const int ix = ox * stride_ - pad_ + kx;
                if (ix < 0 || ix >= w) continue;
                const std::size_t idx = static_cast<std::size_t>(iy) *
                                            static_cast<std::size_t>(w) +
                                        static_cast<std::size_t>(ix);
                if (plane[idx] > best) {  // strict: ties keep first
                  best = plane[idx];
                  best_idx = idx;
                }
              }
            }
            out[o] = best;
            if (record) argmax_[o] = best_idx;
          }
        }
      }
    }
    has_cache_ = record;
    return out;
  }

  Tensor<T> backward(const Tensor<T>& dout) {
    if (!has_cache_) throw std::logic_error("maxpool backward without forward");
    Tensor<T> dx(in_shape_);
    dx.zero();
    const std::size_t n = dout.dim(0), c = dout.dim(1);
    const std::size_t ohw = dout.dim(2) * dout.dim(3);
    const std::size_t hw = in_shape_[2] * in_shape_[3];
    std::size_t o = 0;
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t ch = 0; ch < c; ++ch) {
        T* plane = dx.data() + (i * c + ch) * hw;
        for (std::size_t j = 0; j < ohw; ++j, ++o) plane[argmax_[o]] += dout[o];
      }
    has_cache_ = false;
    return dx;
  }

 private:
  int kernel_, stride_, pad_;
  std::vector<std::size_t> argmax_;
  std::vector<std::size_t> in_shape_;
  bool has_cache_ = false;
};

/// Global average pool N x C x H x W -> N x C.
template <typename T>
class GlobalAvgPool {
 public:
  Tensor<T> forward(const Tensor<T>& x, bool record) {
    const std::size_t n = x.dim(0), c = x.dim(1), hw = x.dim(2) * x.dim(3);
    Tensor<T> out({n, c});
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t ch = 0; ch < c; ++ch) {
        const T* p = x.data() + (i * c + ch) * hw;
        T s = 0;
        for (std::size_t j = 0; j < hw; ++j) s += p[j];
        out(i, ch) = s / static_cast<T>(hw);
      }
    if (record) {
      in_shape_ = x.shape();
      has_cache_ = true;
    }
    return out;
  }

  Tensor<T> backward(const Tensor<T>& dout) {
    if (!has_cache_) throw std::logic_error("avgpool backward without forward");
    Tensor<T> dx(in_shape_);
    const std::size_t n = in_shape_[0], c = in_shape_[1],
                      hw = in_shape_[2] * in_shape_[3];
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t ch = 0; ch < c; ++ch) {
        const T g = dout(i, ch) / static_cast<T>(hw);
        T* p = dx.data() + (i * c + ch) * hw;
        for (std::size_t j = 0; j < hw; ++j) p[j] = g;
      }
    has_cache_ = false;
    return dx;
  }

 private:
  std::vector<std::size_t> in_shape_;
  bool has_cache_ = false;
};

// ---------------------------------------------------------------------------
// Fully connected
// ---------------------------------------------------------------------------

template <typename T>
class Linear {
 public:
  Linear(int in, int out)
      : in_(in),
        out_(out),
        weight({static_cast<std::size_t>(out), static_cast<std::size_t>(in)}),
        bias({static_cast<std::size_t>(out)}),
        grad_weight(weight.shape()),
        grad_bias(bias.shape()) {}

  Tensor<T> weight, bias;
  Tensor<T> grad_weight, grad_bias;

  int in_features() const { return in_; }
  int out_features() const { return out_; }

  Tensor<T> forward(const Tensor<T>& x, bool record) {
    if (x.rank() != 2 || static_cast<int>(x.dim(1)) != in_)
      throw std::invalid_argument("linear: input shape mismatch");
    const int n = static_cast<int>(x.dim(0));
    Tensor<T> out({static_cast<std::size_t>(n), static_cast<std::size_t>(out_)});
    ConstMatMap<T> xm(x.data(), n, in_);
    ConstMatMap<T> wm(weight.data(), out_, in_);
    MatMap<T> om(out.data(), n, out_);
    om.noalias() = xm * wm.transpose();
    for (int i = 0; i < n; ++i)
      for (int j = 0; j < out_; ++j)
        out(static_cast<std::size_t>(i), static_cast<std::size_t>(j)) +=
            bias[static_cast<std::size_t>(j)];
    if (record) {
      input_ = x;
      has_cache_ = true;
    }
    return out;
  }

  Tensor<T> backward(const Tensor<T>& dout) {
    if (!has_cache_) throw std::logic_error("linear backward without forward");
    const int n = static_cast<int>(dout.dim(0));
    ConstMatMap<T> dm(dout.data(), n, out_);
    ConstMatMap<T> xm(input_.data(), n, in_);
    MatMap<T> gwm(grad_weight.data(), out_, in_);
    gwm.noalias() += dm.transpose() * xm;
    for (int j = 0; j < out_; ++j) {
      T s = 0;
      for (int i = 0; i < n; ++i)
        s += dout(static_cast<std::size_t>(i), static_cast<std::size_t>(j));
      grad_bias[static_cast<std::size_t>(j)] += s;
    }
    Tensor<T> dx({static_cast<std::size_t>(n), static_cast<std::size_t>(in_)});
    ConstMatMap<T> wm(weight.data(), out_, in_);
    MatMap<T> dxm(dx.data(), n, in_);
    dxm.noalias() = dm * wm;
    has_cache_ = false;
    input_ = Tensor<T>();
    return dx;
  }

  void collect(const std::string& prefix, std::vector<ParamRef<T>>& out) {
    out.push_back({prefix + ".w", &weight, &grad_weight});
    out.push_back({prefix + ".b", &bias, &grad_bias});
  }

 private:
  int in_, out_;
  Tensor<T> input_;
  bool has_cache_ = false;
};

}  // namespace drg::nn
