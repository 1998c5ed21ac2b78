// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cmath>
#include <cstdio>
#include <filesystem>
#include <numbers>
#include <string>
#include <vector>

#include "drg/degrade.hpp"
#include "drg/image.hpp"
#include "drg/rng.hpp"
#include "drg/types.hpp"

namespace drg {

/// Procedural corpus generator. The expression class is encoded in the signs
/// of three low-order cosine harmonics, so it survives heavy downsampling;
/// a redundant mid-frequency stripe and dense pixel noise give each
/// downsample factor a distinct texture signature without carrying any class
/// information of their own.
struct SynthParams {
  double harmonic_amp = 0.11;
  double stripe_amp = 0.10;
  double stripe_cycles_frac = 0.125;  // stripe frequency = frac * base_size
  double background_amp = 0.07;
  double noise_amp = 0.22;
};

namespace detail {

inline void class_signs(int cls, int classes, double s[3]) {
  if (classes < 2 || classes > 8)
    throw std::invalid_argument("synth: classes must be in [2, 8]");
  if (cls < 0 || cls >= classes)
    throw std::invalid_argument("synth: class out of range");
  const int b0 = cls & 1, b1 = (cls >> 1) & 1, b2 = (cls >> 2) & 1;
  s[0] = b0 ? -1.0 : 1.0;
  s[1] = b1 ? -1.0 : 1.0;
  // Third sign is redundant for <= 4 classes (parity of the first two),
  // independent for 5..8.
  s[2] = (b2 ^ b0 ^ b1) ? -1.0 : 1.0;
}

}  // namespace detail

inline Tensorf synth_image(int cls, int classes, int base_size,
                           const SynthParams& p, RngStream& rng) {
  using std::numbers::pi;
  double signs[3];
  detail::class_signs(cls, classes, signs);

  // Per-instance variation, all class-independent.
  double jitter[3];
  for (double& j : jitter) j = rng.uniform(0.75, 1.25);
  const double bg_fx = rng.uniform(0.5, 1.5);
  const double bg_fy = rng.uniform(0.5, 1.5);
  const double bg_phase = rng.uniform(0.0, 2.0 * pi);
  double gain[3];
  for (double& g : gain) g = rng.uniform(0.85, 1.15);

  const double stripe_freq = p.stripe_cycles_frac * base_size;
  const std::size_t s = static_cast<std::size_t>(base_size);
  Tensorf img({s, s, 3});
  for (std::size_t y = 0; y < s; ++y) {
    const double v = (static_cast<double>(y) + 0.5) / base_size;
    for (std::size_t x = 0; x < s; ++x) {
      const double u = (static_cast<double>(x) + 0.5) / base_size;
      const double b0 = std::cos(pi * u);
      const double b1 = std::cos(pi * v);
      const double b2 = b0 * b1;
      double lum = p.harmonic_amp * (signs[0] * jitter[0] * b0 +
                                     signs[1] * jitter[1] * b1 +
                                     signs[2] * jitter[2] * b2);
      lum += p.stripe_amp * signs[2] * std::cos(2.0 * pi * stripe_freq * u);
      lum += p.background_amp *
             std::cos(2.0 * pi * (bg_fx * u + bg_fy * v) + bg_phase);
      for (std::size_t ch = 0; ch < 3; ++ch) {
        const double n = rng.uniform(-p.noise_amp, p.noise_amp);
        const double val = 0.5 + gain[ch] * lum + n;
        img(y, x, ch) = static_cast<float>(std::clamp(val, 0.0, 1.0));
      }
    }
  }
  return img;
}

/// Generate `n_per_class * classes` base-size images into `split_dir` and
/// return the manifest (also written to disk). Classes are interleaved so
/// any prefix is balanced; each image draws from a stream forked on its
/// global index, making the corpus byte-identical for a given seed.
inline DatasetManifest synth_corpus(const std::filesystem::path& split_dir,
                                    const std::string& split, int n_per_class,
                                    int classes, const DegradeConfig& cfg,
                                    const RngStream& rng,
                                    const SynthParams& params = SynthParams{}) {
  if (classes < 2) throw std::invalid_argument("synth_corpus: classes < 2");
  if (n_per_class < 1)
    throw std::invalid_argument("synth_corpus: n_per_class < 1");
  std::error_code ec;
  std::filesystem::create_directories(split_dir, ec);
  if (ec)
    throw DataError("synth_corpus: cannot create " + split_dir.string() +
                    ": " + ec.message());

  DatasetManifest manifest{split_dir, split, {}};
  const int total = n_per_class * classes;
  for (int i = 0; i < total; ++i) {
    const int cls = i % classes;
    RngStream img_rng = rng.fork(static_cast<std::uint64_t>(i));
    const Tensorf img =
        synth_image(cls, classes, cfg.base_size, params, img_rng);
    char name[32];
    std::snprintf(name, sizeof(name), "img_%05d.ppm", i);
    write_ppm(split_dir / name, img);
    manifest.entries.push_back(ManifestEntry{name, cls, 0});
  }
  manifest.write();
  return manifest;
}

}  // namespace drg
