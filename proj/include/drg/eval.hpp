// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <map>
#include <optional>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "drg/baselines.hpp"
#include "drg/degrade.hpp"
#include "drg/errors.hpp"
#include "drg/mrafer.hpp"
#include "drg/nn/backbone.hpp"
#include "drg/rrn.hpp"
#include "drg/train.hpp"
#include "drg/types.hpp"

namespace drg {

struct EvalReport {
  std::string method;
  std::map<int, double> per_factor;  // factor -> total accuracy
  double mean_accuracy = 0;
  std::optional<double> route_accuracy;
  std::map<std::string, std::map<int, double>> cross;  // train set -> factor -> acc

  bool operator==(const EvalReport&) const = default;
};

/// Mean over the configured (non-extra) factors present in per_factor. A
/// grid made only of extra factors averages over whatever was evaluated.
inline double mean_over_configured(const std::map<int, double>& per_factor,
                                   const DegradeConfig& cfg) {
  if (per_factor.empty())
    throw std::invalid_argument("eval: no factors evaluated");
  double sum = 0;
  int n = 0;
  for (const auto& [factor, acc] : per_factor)
    if (!cfg.resolution_of(factor).extra) {
      sum += acc;
      ++n;
    }
  if (n == 0) {
    for (const auto& [factor, acc] : per_factor) sum += acc;
    return sum / static_cast<double>(per_factor.size());
  }
  return sum / n;
}

// ---------------------------------------------------------------------------
// Batched prediction over in-memory data
// ---------------------------------------------------------------------------

/// Eval-mode batch: normalization only, no flip. The throwaway stream is
/// never consumed in eval mode.
inline Batch make_eval_batch(const InMemoryDataset& data,
                             const std::vector<std::size_t>& idx,
                             std::size_t start, std::size_t end,
                             const DegradeConfig& dcfg) {
  Batch batch;
  batch.samples.reserve(end - start);
  RngStream unused(0);
  for (std::size_t k = start; k < end; ++k) {
    LabeledSample s = data.sample(idx[k], dcfg);
    batch.samples.push_back(augment(s, unused, /*train=*/false, data.stats()));
  }
  return batch;
}

template <typename T>
std::vector<int> predict_expressions(nn::ResNet<T>& model,
                                     const InMemoryDataset& data,
                                     const std::vector<std::size_t>& idx,
                                     const DegradeConfig& dcfg,
                                     int batch_size = 64) {
  std::vector<int> out;
  out.reserve(idx.size());
  for (std::size_t start = 0; start < idx.size();
       start += static_cast<std::size_t>(batch_size)) {
    const std::size_t end =
        std::min(idx.size(), start + static_cast<std::size_t>(batch_size));
    const Batch batch = make_eval_batch(data, idx, start, end, dcfg);
    Tensor<T> images = pack_images(batch).template cast<T>();
    const Tensor<T> logits = model.forward(images, /*train=*/false);
    const std::size_t c = logits.dim(1);
    for (std::size_t i = 0; i < logits.dim(0); ++i)
      out.push_back(
          argmax_first(std::span<const T>(logits.data() + i * c, c)));
  }
  return out;
}

struct DrgBatchResult {
  std::vector<int> expressions;
  std::vector<int> routed_classes;  // RRN (or ground-truth) route per sample
};

/// DRG prediction over an index list; ground_truth_routing bypasses the RRN
/// and routes by the sample's resolution label.
template <typename T>
DrgBatchResult predict_drg(nn::ResNet<T>* rrn, ExpertBank<T>& bank,
                           const InMemoryDataset& data,
                           const std::vector<std::size_t>& idx,
                           const DegradeConfig& dcfg, bool ground_truth_routing,
                           int batch_size = 64) {
  if (!ground_truth_routing && rrn == nullptr)
    throw ConfigError("drg eval: RRN required unless ground-truth routing");
  const int k = static_cast<int>(bank.size());
  DrgBatchResult res;
  res.expressions.reserve(idx.size());
  res.routed_classes.reserve(idx.size());
  for (std::size_t start = 0; start < idx.size();
       start += static_cast<std::size_t>(batch_size)) {
    const std::size_t end =
        std::min(idx.size(), start + static_cast<std::size_t>(batch_size));
    const Batch batch = make_eval_batch(data, idx, start, end, dcfg);
    std::vector<RoutingVector> routes;
    routes.reserve(batch.size());
    if (ground_truth_routing) {
      for (const auto& s : batch.samples) {
        if (s.resolution.index < 0)
          throw ConfigError(
              "drg eval: sample at extra factor has no ground-truth route");
        routes.emplace_back(s.resolution.index, k);
      }
    } else {
      Tensor<T> images = pack_images(batch).template cast<T>();
      for (const auto& p :
           rrn_predict(*rrn, images, static_cast<std::size_t>(k)))
        routes.push_back(p.route);
    }
    const PartitionedBatch parts = assign(batch, routes, k);
    const Tensor<T> logits = mrafer_forward(bank, parts);
    const std::size_t c = logits.dim(1);
    for (std::size_t i = 0; i < logits.dim(0); ++i) {
      res.expressions.push_back(
          argmax_first(std::span<const T>(logits.data() + i * c, c)));
      res.routed_classes.push_back(routes[i].index());
    }
  }
  return res;
}

// ---------------------------------------------------------------------------
// Factor grids over a prepared split
// ---------------------------------------------------------------------------

/// One prepared split loaded once, with item indices grouped by factor.
struct EvalSplit {
  InMemoryDataset data;
  std::map<int, std::vector<std::size_t>> by_factor;

  static EvalSplit load(const std::filesystem::path& root,
                        const std::string& split) {
    EvalSplit s{InMemoryDataset::load(root, split), {}};
    for (std::size_t i = 0; i < s.data.size(); ++i)
      s.by_factor[s.data.item(i).factor].push_back(i);
    return s;
  }

  static EvalSplit from_dataset(InMemoryDataset data) {
    EvalSplit s{std::move(data), {}};
    for (std::size_t i = 0; i < s.data.size(); ++i)
      s.by_factor[s.data.item(i).factor].push_back(i);
    return s;
  }

  const std::vector<std::size_t>& indices_for(int factor) const {
    const auto it = by_factor.find(factor);
    if (it == by_factor.end())
      throw DataError("eval: split has no images for factor x" +
                      std::to_string(factor));
    return it->second;
  }

  std::vector<int> labels_for(const std::vector<std::size_t>& idx) const {
    std::vector<int> labels;
    labels.reserve(idx.size());
    for (std::size_t i : idx) labels.push_back(data.item(i).expression);
    return labels;
  }
};

template <typename T>
EvalReport eval_model_grid(nn::ResNet<T>& model, const EvalSplit& split,
                           const std::vector<int>& factors,
                           const DegradeConfig& dcfg, std::string method,
                           int batch_size = 64) {
  EvalReport report;
  report.method = std::move(method);
  for (int f : factors) {
    dcfg.resolution_of(f);  // validates the factor (extras allowed here)
    const auto& idx = split.indices_for(f);
    const auto preds =
        predict_expressions(model, split.data, idx, dcfg, batch_size);
    report.per_factor[f] = total_accuracy(preds, split.labels_for(idx));
  }
  report.mean_accuracy = mean_over_configured(report.per_factor, dcfg);
  return report;
}

/// DRG evaluates only at its K trained factors, mirroring the table cells
/// that stay empty beyond x8.
template <typename T>
EvalReport eval_drg_grid(nn::ResNet<T>* rrn, ExpertBank<T>& bank,
                         const EvalSplit& split, const std::vector<int>& factors,
                         const DegradeConfig& dcfg, bool ground_truth_routing,
                         std::string method, int batch_size = 64) {
  for (int f : factors)
    if (dcfg.resolution_of(f).extra)
      throw ConfigError(
          "drg eval: factor x" + std::to_string(f) +
          " is outside the trained factor set; the dynamic router has no "
          "expert for it (evaluate single models instead)");
  EvalReport report;
  report.method = std::move(method);
  std::size_t route_hits = 0, route_total = 0;
  for (int f : factors) {
    const auto& idx = split.indices_for(f);
    const DrgBatchResult res = predict_drg(rrn, bank, split.data, idx, dcfg,
                                           ground_truth_routing, batch_size);
    report.per_factor[f] = total_accuracy(res.expressions, split.labels_for(idx));
    const int true_class = dcfg.resolution_of(f).index;
    for (int r : res.routed_classes) {
      route_hits += (r == true_class) ? 1u : 0u;
      ++route_total;
    }
  }
  report.mean_accuracy = mean_over_configured(report.per_factor, dcfg);
  if (!ground_truth_routing && route_total > 0)
    report.route_accuracy =
        static_cast<double>(route_hits) / static_cast<double>(route_total);
  return report;
}

template <typename T>
EvalReport eval_pool_grid(ExpertBank<T>& bank, PoolMode mode, PoolSite site,
                          const EvalSplit& split, const std::vector<int>& factors,
                          const DegradeConfig& dcfg, std::string method,
                          int batch_size = 64) {
  EvalReport report;
  report.method = std::move(method);
  for (int f : factors) {
    dcfg.resolution_of(f);
    const auto& idx = split.indices_for(f);
    std::vector<int> preds;
    preds.reserve(idx.size());
    for (std::size_t start = 0; start < idx.size();
         start += static_cast<std::size_t>(batch_size)) {
      const std::size_t end =
          std::min(idx.size(), start + static_cast<std::size_t>(batch_size));
      const Batch batch = make_eval_batch(split.data, idx, start, end, dcfg);
      Tensor<T> images = pack_images(batch).template cast<T>();
      const Tensor<T> pooled = pooled_forward(bank, images, mode, site);
      const std::size_t c = pooled.dim(1);
      for (std::size_t i = 0; i < pooled.dim(0); ++i)
        preds.push_back(
            argmax_first(std::span<const T>(pooled.data() + i * c, c)));
    }
    report.per_factor[f] = total_accuracy(preds, split.labels_for(idx));
  }
  report.mean_accuracy = mean_over_configured(report.per_factor, dcfg);
  return report;
}

/// Branch chosen by ground-truth factor; extra factors are refused because
/// they have no branch (route with the RRN variant instead).
template <typename T>
EvalReport eval_rabn_grid(RaBnResNet<T>& model, const EvalSplit& split,
                          const std::vector<int>& factors,
                          const DegradeConfig& dcfg, std::string method,
                          int batch_size = 64) {
  EvalReport report;
  report.method = std::move(method);
  for (int f : factors) {
    const ResolutionClass res = dcfg.resolution_of(f);
    if (res.extra)
      throw ConfigError("rabn eval: factor x" + std::to_string(f) +
                        " has no normalization branch");
    const auto& idx = split.indices_for(f);
    std::vector<int> preds;
    preds.reserve(idx.size());
    for (std::size_t start = 0; start < idx.size();
         start += static_cast<std::size_t>(batch_size)) {
      const std::size_t end =
          std::min(idx.size(), start + static_cast<std::size_t>(batch_size));
      const Batch batch = make_eval_batch(split.data, idx, start, end, dcfg);
      Tensor<T> images = pack_images(batch).template cast<T>();
      const Tensor<T> logits = model.forward(images, res.index, false);
      const std::size_t c = logits.dim(1);
      for (std::size_t i = 0; i < logits.dim(0); ++i)
        preds.push_back(
            argmax_first(std::span<const T>(logits.data() + i * c, c)));
    }
    report.per_factor[f] = total_accuracy(preds, split.labels_for(idx));
  }
  report.mean_accuracy = mean_over_configured(report.per_factor, dcfg);
  return report;
}

/// Expert k (trained on factors[k]) evaluated at every requested factor.
template <typename T>
std::map<std::string, std::map<int, double>> cross_matrix(
    ExpertBank<T>& bank, const std::vector<int>& expert_factors,
    const EvalSplit& split, const std::vector<int>& eval_factors,
    const DegradeConfig& dcfg, int batch_size = 64) {
  if (expert_factors.size() != bank.size())
    throw std::invalid_argument("cross_matrix: factor list does not match bank");
  std::map<std::string, std::map<int, double>> out;
  for (std::size_t k = 0; k < bank.size(); ++k) {
    const std::string row = "x" + std::to_string(expert_factors[k]);
    for (int f : eval_factors) {
      const auto& idx = split.indices_for(f);
      const auto preds = predict_expressions(bank.experts[k], split.data, idx,
                                             dcfg, batch_size);
      out[row][f] = total_accuracy(preds, split.labels_for(idx));
    }
  }
  return out;
}

// ---------------------------------------------------------------------------
// Report files
// ---------------------------------------------------------------------------

namespace detail {

inline std::string fmt_full(double v) {
  char buf[64];
  std::snprintf(buf, sizeof(buf), "%.17g", v);
  return buf;
}

inline std::string fmt_pct(double v) {
  char buf[32];
  std::snprintf(buf, sizeof(buf), "%.2f%%", v * 100.0);
  return buf;
}

inline std::vector<std::string> split_csv(const std::string& line) {
  std::vector<std::string> fields;
  std::string field;
  std::istringstream ss(line);
  while (std::getline(ss, field, ',')) fields.push_back(field);
  if (!line.empty() && line.back() == ',') fields.push_back("");
  return fields;
}

}  // namespace detail

/// report.csv: three labeled sections (accuracy rows = factors + mean,
/// columns = methods; route_accuracy; cross). Values at full precision;
/// missing cells are "-". Byte-deterministic for a given report list.
inline void write_report_csv(const std::filesystem::path& path,
                             const std::vector<EvalReport>& reports) {
  std::ofstream os(path);
  if (!os) throw DataError("report: cannot write " + path.string());
  std::set<int> factors;
  for (const auto& r : reports)
    for (const auto& [f, acc] : r.per_factor) factors.insert(f);

  os << "accuracy\nfactor";
  for (const auto& r : reports) os << "," << r.method;
  os << "\n";
  for (int f : factors) {
    os << f;
    for (const auto& r : reports) {
      const auto it = r.per_factor.find(f);
      os << ","
         << (it == r.per_factor.end() ? std::string("-")
                                      : detail::fmt_full(it->second));
    }
    os << "\n";
  }
  os << "mean";
  for (const auto& r : reports) os << "," << detail::fmt_full(r.mean_accuracy);
  os << "\n";

  os << "route_accuracy\nmethod,value\n";
  for (const auto& r : reports)
    if (r.route_accuracy)
      os << r.method << "," << detail::fmt_full(*r.route_accuracy) << "\n";

  os << "cross\nmethod,train,eval_factor,value\n";
  for (const auto& r : reports)
    for (const auto& [row, cells] : r.cross)
      for (const auto& [f, acc] : cells)
        os << r.method << "," << row << "," << f << ","
           << detail::fmt_full(acc) << "\n";
  if (!os) throw DataError("report: write failed for " + path.string());
}

/// report.md: accuracy table in the published layout (percent, two decimal
/// places, x-prefixed factor columns, Avg column, "-" for untested cells),
/// then routing and cross-evaluation tables when present.
inline void write_report_md(const std::filesystem::path& path,
                            const std::vector<EvalReport>& reports) {
  std::ofstream os(path);
  if (!os) throw DataError("report: cannot write " + path.string());
  std::set<int> factors;
  for (const auto& r : reports)
    for (const auto& [f, acc] : r.per_factor) factors.insert(f);

  os << "# Total accuracy by resolution\n\n";
  os << "| Method |";
  for (int f : factors) os << " x" << f << " |";
  os << " Avg |\n|---|";
  for (std::size_t i = 0; i < factors.size(); ++i) os << "---|";
  os << "---|\n";
  for (const auto& r : reports) {
    os << "| " << r.method << " |";
    for (int f : factors) {
      const auto it = r.per_factor.find(f);
      os << " "
         << (it == r.per_factor.end() ? std::string("-")
                                      : detail::fmt_pct(it->second))
         << " |";
    }
    os << " " << detail::fmt_pct(r.mean_accuracy) << " |\n";
  }

  bool any_route = false;
  for (const auto& r : reports) any_route = any_route || r.route_accuracy.has_value();
  if (any_route) {
    os << "\n# Resolution routing accuracy\n\n| Method | Route accuracy |\n|---|---|\n";
    for (const auto& r : reports)
      if (r.route_accuracy)
        os << "| " << r.method << " | " << detail::fmt_pct(*r.route_accuracy)
           << " |\n";
  }

  for (const auto& r : reports) {
    if (r.cross.empty()) continue;
    std::set<int> cols;
    for (const auto& [row, cells] : r.cross)
      for (const auto& [f, acc] : cells) cols.insert(f);
    os << "\n# Cross evaluation (" << r.method << ")\n\n| Trained on |";
    for (int f : cols) os << " x" << f << " |";
    os << "\n|---|";
    for (std::size_t i = 0; i < cols.size(); ++i) os << "---|";
    os << "\n";
    for (const auto& [row, cells] : r.cross) {
      os << "| " << row << " |";
      for (int f : cols) {
        const auto it = cells.find(f);
        os << " "
           << (it == cells.end() ? std::string("-") : detail::fmt_pct(it->second))
           << " |";
      }
      os << "\n";
    }
  }
  if (!os) throw DataError("report: write failed for " + path.string());
}

inline void write_report(const std::filesystem::path& dir,
                         const std::vector<EvalReport>& reports) {
  std::filesystem::create_directories(dir);
  write_report_csv(dir / "report.csv", reports);
  write_report_md(dir / "report.md", reports);
}

/// Inverse of write_report_csv; "-" cells are skipped.
inline std::vector<EvalReport> parse_report(const std::filesystem::path& path) {
  std::ifstream is(path);
  if (!is) throw DataError("report: cannot read " + path.string());
  std::string line;
  if (!std::getline(is, line) || line != "accuracy")
    throw DataError("report: expected accuracy section in " + path.string());
  if (!std::getline(is, line))
    throw DataError("report: missing accuracy header in " + path.string());
  const auto header = detail::split_csv(line);
  if (header.empty() || header[0] != "factor")
    throw DataError("report: bad accuracy header in " + path.string());

  std::vector<EvalReport> reports(header.size() - 1);
  for (std::size_t m = 1; m < header.size(); ++m)
    reports[m - 1].method = header[m];

  bool saw_mean = false;
  while (std::getline(is, line) && line != "route_accuracy") {
    const auto fields = detail::split_csv(line);
    if (fields.size() != header.size())
      throw DataError("report: ragged accuracy row in " + path.string());
    if (fields[0] == "mean") {
      for (std::size_t m = 1; m < fields.size(); ++m)
        reports[m - 1].mean_accuracy = std::stod(fields[m]);
      saw_mean = true;
    } else {
      const int f = std::stoi(fields[0]);
      for (std::size_t m = 1; m < fields.size(); ++m)
        if (fields[m] != "-")
          reports[m - 1].per_factor[f] = std::stod(fields[m]);
    }
  }
  if (!saw_mean) throw DataError("report: missing mean row in " + path.string());

  if (!std::getline(is, line) || line != "method,value")
    throw DataError("report: bad route_accuracy header in " + path.string());
  while (std::getline(is, line) && line != "cross") {
    const auto fields = detail::split_csv(line);
    if (fields.size() != 2)
      throw DataError("report: bad route row in " + path.string());
    for (auto& r : reports)
      if (r.method == fields[0]) r.route_accuracy = std::stod(fields[1]);
  }

  if (!std::getline(is, line) || line != "method,train,eval_factor,value")
    throw DataError("report: bad cross header in " + path.string());
  while (std::getline(is, line)) {
    if (line.empty()) continue;
    const auto fields = detail::split_csv(line);
    if (fields.size() != 4)
      throw DataError("report: bad cross row in " + path.string());
    for (auto& r : reports)
      if (r.method == fields[0])
        r.cross[fields[1]][std::stoi(fields[2])] = std::stod(fields[3]);
  }
  return reports;
}

}  // namespace drg
