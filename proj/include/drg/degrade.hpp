// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include "drg/bicubic.hpp"
#include "drg/errors.hpp"
#include "drg/image.hpp"
#include "drg/rng.hpp"
#include "drg/types.hpp"

namespace drg {

/// Degradation pipeline configuration. `factors` is the routed set (one
/// resolution class per entry); `eval_extra_factors` are harness-only.
struct DegradeConfig {
  int base_size = 100;
  std::vector<int> factors = {1, 2, 4, 6, 8};
  std::vector<int> eval_extra_factors = {12, 14, 16};
  int net_input_size = 224;
  double bicubic_a = -0.5;

  void validate() const {
    if (factors.empty())
      throw std::invalid_argument("degrade config: empty factor set");
    if (!std::is_sorted(factors.begin(), factors.end()))
      throw std::invalid_argument("degrade config: factors not ascending");
    if (factors.front() != 1)
      throw std::invalid_argument("degrade config: factor 1 missing");
    if (base_size < factors.back())
      throw std::invalid_argument("degrade config: base_size < max factor");
  }

  int class_count() const { return static_cast<int>(factors.size()); }

  /// Class of a factor; extra factors map to index -1 with extra = true.
  ResolutionClass resolution_of(int factor) const {
    for (std::size_t i = 0; i < factors.size(); ++i)
      if (factors[i] == factor)
        return ResolutionClass{static_cast<int>(i), factor, false};
    for (int f : eval_extra_factors)
      if (f == factor) return ResolutionClass{-1, factor, true};
    throw std::invalid_argument("factor " + std::to_string(factor) +
                                " not in configured factor set");
  }

  bool is_extra(int factor) const { return resolution_of(factor).extra; }
};

// ---------------------------------------------------------------------------
// Manifests. A dataset root holds one directory per split, each with a
// manifest.csv (header: relative_path,expression,factor). Prepared splits
// store images under x<F>/ subdirectories; base corpora use factor 0 for
// "original, not yet degraded".
// ---------------------------------------------------------------------------

struct ManifestEntry {
  std::string relative_path;
  int expression = 0;
  int factor = 0;
};

struct DatasetManifest {
  std::filesystem::path root;  // split directory holding manifest.csv
  std::string split;
  std::vector<ManifestEntry> entries;

  void write() const {
    std::filesystem::create_directories(root);
    const auto path = root / "manifest.csv";
    std::ofstream f(path);
    if (!f) throw DataError("manifest: cannot write " + path.string());
    f << "relative_path,expression,factor\n";
    for (const auto& e : entries)
      f << e.relative_path << "," << e.expression << "," << e.factor << "\n";
    if (!f) throw DataError("manifest: write failed for " + path.string());
  }

  static DatasetManifest read(const std::filesystem::path& split_dir,
                              std::string split) {
    const auto path = split_dir / "manifest.csv";
    std::ifstream f(path);
    if (!f) throw DataError("manifest: cannot read " + path.string());
    DatasetManifest m{split_dir, std::move(split), {}};
    std::string line;
    if (!std::getline(f, line) || line != "relative_path,expression,factor")
      throw DataError("manifest: bad header in " + path.string());
    while (std::getline(f, line)) {
      if (line.empty()) continue;
      std::istringstream ss(line);
      ManifestEntry e;
      std::string field;
      if (!std::getline(ss, e.relative_path, ',') ||
          !std::getline(ss, field, ','))
        throw DataError("manifest: bad row in " + path.string() + ": " + line);
      e.expression = std::stoi(field);
      if (!std::getline(ss, field))
        throw DataError("manifest: bad row in " + path.string() + ": " + line);
      e.factor = std::stoi(field);
      m.entries.push_back(std::move(e));
    }
    return m;
  }
};

/// Per-channel normalization constants computed at prepare time over the
/// train split (all factors pooled) and stored beside the manifests.
struct NormStats {
  std::array<double, 3> mean{0.0, 0.0, 0.0};
  std::array<double, 3> stddev{1.0, 1.0, 1.0};

  static NormStats identity() { return NormStats{}; }

  void write(const std::filesystem::path& root) const {
    const auto path = root / "norm.csv";
    std::ofstream f(path);
    if (!f) throw DataError("norm stats: cannot write " + path.string());
    f << "channel,mean,std\n";
    f.precision(17);
    for (int c = 0; c < 3; ++c)
      f << c << "," << mean[static_cast<std::size_t>(c)] << ","
        << stddev[static_cast<std::size_t>(c)] << "\n";
  }

  static NormStats read(const std::filesystem::path& root) {
    const auto path = root / "norm.csv";
    std::ifstream f(path);
    if (!f) throw DataError("norm stats: cannot read " + path.string());
    std::string line;
    std::getline(f, line);
    NormStats s;
    while (std::getline(f, line)) {
      if (line.empty()) continue;
      std::istringstream ss(line);
      std::string field;
      std::getline(ss, field, ',');
      const int c = std::stoi(field);
      if (c < 0 || c > 2) throw DataError("norm stats: bad channel in " + path.string());
      std::getline(ss, field, ',');
      s.mean[static_cast<std::size_t>(c)] = std::stod(field);
      std::getline(ss, field);
      s.stddev[static_cast<std::size_t>(c)] = std::stod(field);
    }
    return s;
  }
};

// ---------------------------------------------------------------------------
// Operations
// ---------------------------------------------------------------------------

/// Downsample to degraded_size then resize back up to net_input_size, both
/// bicubic. The sample's resolution label becomes the class of `factor`.
inline LabeledSample degrade_sample(const LabeledSample& s, int factor,
                                    const DegradeConfig& cfg) {
  cfg.validate();
  const ResolutionClass res = cfg.resolution_of(factor);  // throws if unknown
  if (s.image.rank() != 3 ||
      s.image.dim(0) != static_cast<std::size_t>(cfg.base_size) ||
      s.image.dim(1) != static_cast<std::size_t>(cfg.base_size))
    throw std::invalid_argument("degrade_sample: image is not base_size^2");
  const int d = degraded_size(cfg.base_size, factor);
  LabeledSample out;
  const Tensorf small = resize_bicubic(s.image, d, d, cfg.bicubic_a);
  out.image = resize_bicubic(small, cfg.net_input_size, cfg.net_input_size,
                             cfg.bicubic_a);
  out.expression = s.expression;
  out.resolution = res;
  out.original_index = s.original_index;
  return out;
}

template <typename T>
Tensor<T> flip_horizontal(const Tensor<T>& img) {
  if (img.rank() != 3) throw std::invalid_argument("flip_horizontal: rank != 3");
  const std::size_t h = img.dim(0), w = img.dim(1), c = img.dim(2);
  Tensor<T> out({h, w, c});
  for (std::size_t y = 0; y < h; ++y)
    for (std::size_t x = 0; x < w; ++x)
      for (std::size_t ch = 0; ch < c; ++ch)
        out(y, x, ch) = img(y, w - 1 - x, ch);
  return out;
}

/// Degrade one base split into a prepared split directory: base/ holds the
/// untouched originals (factor 0), x<F>/ the degraded-and-upsampled images
/// for every configured factor, plus the extra eval-only factors when
/// requested. Byte-deterministic: ordering is manifest order, then factors
/// ascending (extras after).
inline DatasetManifest prepare_split(const std::filesystem::path& base_root,
                                     const std::string& split,
                                     const std::filesystem::path& out_root,
                                     const DegradeConfig& cfg,
                                     bool include_extras) {
  cfg.validate();
  const DatasetManifest base = DatasetManifest::read(base_root / split, split);
  const auto out_dir = out_root / split;

  std::vector<int> factors = cfg.factors;
  if (include_extras)
    factors.insert(factors.end(), cfg.eval_extra_factors.begin(),
                   cfg.eval_extra_factors.end());

  std::error_code ec;
  std::filesystem::create_directories(out_dir / "base", ec);
  if (ec)
    throw DataError("prepare: cannot create " + (out_dir / "base").string());
  for (int f : factors) {
    std::filesystem::create_directories(out_dir / ("x" + std::to_string(f)), ec);
    if (ec)
      throw DataError("prepare: cannot create x" + std::to_string(f) +
                      " under " + out_dir.string());
  }

  DatasetManifest out{out_dir, split, {}};
  for (const auto& entry : base.entries) {
    if (entry.factor != 0)
      throw DataError("prepare: input entry " + entry.relative_path +
                      " is already degraded (factor " +
                      std::to_string(entry.factor) + ")");
    LabeledSample s;
    s.image = read_ppm(base_root / split / entry.relative_path);
    s.expression = entry.expression;
    const std::string base_rel = "base/" + entry.relative_path;
    write_ppm(out_dir / base_rel, s.image);
    out.entries.push_back(ManifestEntry{base_rel, entry.expression, 0});
    for (int f : factors) {
      const LabeledSample d = degrade_sample(s, f, cfg);
      const std::string rel =
          "x" + std::to_string(f) + "/" + entry.relative_path;
      write_ppm(out_dir / rel, d.image);
      out.entries.push_back(ManifestEntry{rel, entry.expression, f});
    }
  }
  out.write();
  return out;
}

/// Train mode: horizontal flip with probability 0.5, then per-channel
/// (x - mean) / std. Eval mode normalizes only.
inline LabeledSample augment(const LabeledSample& s, RngStream& rng, bool train,
                             const NormStats& stats = NormStats::identity()) {
  LabeledSample out = s;
  if (train && rng.bernoulli(0.5)) out.image = flip_horizontal(out.image);
  const std::size_t h = out.image.dim(0), w = out.image.dim(1),
                    c = out.image.dim(2);
  for (std::size_t y = 0; y < h; ++y)
    for (std::size_t x = 0; x < w; ++x)
      for (std::size_t ch = 0; ch < c; ++ch)
        out.image(y, x, ch) = static_cast<float>(
            (out.image(y, x, ch) - stats.mean[ch]) / stats.stddev[ch]);
  return out;
}

}  // namespace drg
