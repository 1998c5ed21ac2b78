// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cmath>
#include <cstdint>
#include <map>
#include <ostream>
#include <sstream>
#include <string>
#include <vector>

#include "drg/adam.hpp"
#include "drg/baselines.hpp"
#include "drg/bicubic.hpp"
#include "drg/degrade.hpp"
#include "drg/mrafer.hpp"
#include "drg/rng.hpp"
#include "drg/rrn.hpp"
#include "drg/types.hpp"

namespace drg {

struct CheckResult {
  std::string name;
  bool passed = false;
  std::string detail;
};

/// Acceptance: gather(assign(batch)) restores original order for random
/// batch sizes, K values and routings.
inline CheckResult check_routing_round_trip(int batches = 1000,
                                            std::uint64_t seed = 101) {
  RngStream rng(seed);
  for (int b = 0; b < batches; ++b) {
    const int n = static_cast<int>(rng.uniform_int(257));  // 0..256
    const int k = 1 + static_cast<int>(rng.uniform_int(8));
    Batch batch;
    std::vector<RoutingVector> routes;
    for (int i = 0; i < n; ++i) {
      LabeledSample s;
      s.image = Tensorf({1, 1, 3});
      batch.samples.push_back(std::move(s));
      routes.emplace_back(static_cast<int>(rng.uniform_int(
                              static_cast<std::uint64_t>(k))),
                          k);
    }
    batch = Batch::from_samples(std::move(batch.samples));
    const PartitionedBatch parts = assign(batch, routes, k);
    if (parts.total() != static_cast<std::size_t>(n))
      return {"routing_round_trip", false,
              "group sizes do not sum to N at batch " + std::to_string(b)};
    std::vector<std::vector<std::size_t>> ids(parts.groups.size());
    for (std::size_t g = 0; g < parts.groups.size(); ++g)
      for (const auto& item : parts.groups[g])
        ids[g].push_back(item.original_index);
    const std::vector<std::size_t> restored = gather(parts, ids);
    for (std::size_t i = 0; i < restored.size(); ++i)
      if (restored[i] != i)
        return {"routing_round_trip", false,
                "order broken at batch " + std::to_string(b) + " position " +
                    std::to_string(i)};
  }
  return {"routing_round_trip", true,
          std::to_string(batches) + " random batches restored exactly"};
}

/// Acceptance: binarize always emits a one-hot vector, is shift-invariant,
/// idempotent, and consistent with softmax argmax, ties included.
inline CheckResult check_binarization(int vectors = 10000,
                                      std::uint64_t seed = 102) {
  RngStream rng(seed);
  for (int i = 0; i < vectors; ++i) {
    const int k = 1 + static_cast<int>(rng.uniform_int(8));
    std::vector<double> v(static_cast<std::size_t>(k));
    for (auto& x : v) x = rng.uniform(-10.0, 10.0);
    if (k > 1 && i % 3 == 0) {
      const std::size_t a = rng.uniform_int(static_cast<std::uint64_t>(k));
      const std::size_t b = rng.uniform_int(static_cast<std::uint64_t>(k));
      v[a] = v[b];  // exact tie
    }
    const RoutingVector r = binarize(v);
    const auto bits = r.bits();
    int ones = 0;
    for (auto bit : bits) ones += bit;
    if (ones != 1 || r.length() != k)
      return {"binarization", false, "not one-hot at vector " + std::to_string(i)};
    const double c = rng.uniform(-5.0, 5.0);
    std::vector<double> shifted(v);
    for (auto& x : shifted) x += c;
    if (!(binarize(shifted) == r))
      return {"binarization", false,
              "shift invariance broken at vector " + std::to_string(i)};
    std::vector<double> rebits(bits.begin(), bits.end());
    if (!(binarize(rebits) == r))
      return {"binarization", false,
              "not idempotent at vector " + std::to_string(i)};
    if (argmax_first(softmax(v)) != r.index())
      return {"binarization", false,
              "softmax argmax mismatch at vector " + std::to_string(i)};
  }
  return {"binarization", true,
          std::to_string(vectors) + " vectors (ties included) all one-hot"};
}

/// Acceptance: softmax and cross-entropy match extended-precision direct
/// evaluation within 1e-12.
inline CheckResult check_softmax_ce_oracle(int vectors = 1000,
                                           std::uint64_t seed = 103) {
  RngStream rng(seed);
  double worst = 0;
  for (int i = 0; i < vectors; ++i) {
    const int k = 2 + static_cast<int>(rng.uniform_int(7));
    std::vector<double> v(static_cast<std::size_t>(k));
    for (auto& x : v) x = rng.uniform(-30.0, 30.0);
    const auto probs = softmax(v);

    long double sum = 0;
    std::vector<long double> ref(v.size());
    for (std::size_t j = 0; j < v.size(); ++j) {
      ref[j] = std::exp(static_cast<long double>(v[j]));
      sum += ref[j];
    }
    long double total = 0;
    for (std::size_t j = 0; j < v.size(); ++j) {
      ref[j] /= sum;
      total += static_cast<long double>(probs[j]);
      const double diff =
          std::fabs(static_cast<double>(ref[j] - static_cast<long double>(probs[j])));
      worst = std::max(worst, diff);
      if (diff > 1e-12)
        return {"softmax_ce_oracle", false,
                "softmax off by " + std::to_string(diff) + " at vector " +
                    std::to_string(i)};
    }
    if (std::fabs(static_cast<double>(total) - 1.0) > 1e-9)
      return {"softmax_ce_oracle", false, "softmax does not sum to 1"};

    const int target = static_cast<int>(rng.uniform_int(static_cast<std::uint64_t>(k)));
    const double ce = cross_entropy(RoutingVector(target, k), probs);
    const long double clamped =
        std::max(ref[static_cast<std::size_t>(target)], (long double)1e-12);
    const double ce_ref = static_cast<double>(-std::log(clamped));
    if (std::fabs(ce - ce_ref) > 1e-12)
      return {"softmax_ce_oracle", false,
              "cross-entropy off at vector " + std::to_string(i)};
  }
  std::ostringstream os;
  os << vectors << " vectors within 1e-12 (worst " << worst << ")";
  return {"softmax_ce_oracle", true, os.str()};
}

/// Acceptance: analytic (p - y)/N gradient vs central finite differences in
/// float64, tolerance 1e-6.
inline CheckResult check_softmax_ce_gradient(std::uint64_t seed = 104) {
  RngStream rng(seed);
  const std::size_t n = 4, k = 5;
  Tensord logits({n, k});
  for (std::size_t i = 0; i < logits.numel(); ++i)
    logits[i] = rng.uniform(-3.0, 3.0);
  std::vector<int> targets;
  for (std::size_t i = 0; i < n; ++i)
    targets.push_back(static_cast<int>(rng.uniform_int(k)));

  const LossResult<double> res = softmax_cross_entropy(logits, targets);
  const double h = 1e-6;
  double worst = 0;
  for (std::size_t j = 0; j < logits.numel(); ++j) {
    Tensord lp = logits, lm = logits;
    lp[j] += h;
    lm[j] -= h;
    const double fd = (softmax_cross_entropy(lp, targets).loss -
                       softmax_cross_entropy(lm, targets).loss) /
                      (2 * h);
    worst = std::max(worst, std::fabs(fd - res.dlogits[j]));
  }
  if (worst > 1e-6)
    return {"softmax_ce_gradient", false,
            "max |analytic - fd| = " + std::to_string(worst)};
  std::ostringstream os;
  os << "max |analytic - fd| = " << worst;
  return {"softmax_ce_gradient", true, os.str()};
}

/// Acceptance: documented degraded sizes, kernel partition of unity,
/// constant-image fixed point (bit-exact in float).
inline CheckResult check_degradation_pipeline(std::uint64_t seed = 105) {
  const int expected[5][2] = {{1, 100}, {2, 50}, {4, 25}, {6, 17}, {8, 13}};
  for (const auto& e : expected)
    if (degraded_size(100, e[0]) != e[1])
      return {"degradation_pipeline", false,
              "degraded_size(100," + std::to_string(e[0]) + ") != " +
                  std::to_string(e[1])};

  RngStream rng(seed);
  for (int i = 0; i < 1000; ++i) {
    const double t = rng.uniform();  // fractional offset in [0,1)
    double sum = 0;
    for (int k = -1; k <= 2; ++k) sum += bicubic_kernel(t - k, -0.5);
    if (std::fabs(sum - 1.0) > 1e-9)
      return {"degradation_pipeline", false,
              "partition of unity off by " + std::to_string(sum - 1.0)};
  }

  Tensorf flat({10, 7, 3});
  flat.fill(0.37f);
  const Tensorf up = resize_bicubic(flat, 23, 11);
  const Tensorf down = resize_bicubic(flat, 4, 3);
  for (std::size_t i = 0; i < up.numel(); ++i)
    if (up[i] != 0.37f)
      return {"degradation_pipeline", false, "upsampled constant not exact"};
  for (std::size_t i = 0; i < down.numel(); ++i)
    if (down[i] != 0.37f)
      return {"degradation_pipeline", false, "downsampled constant not exact"};
  return {"degradation_pipeline", true,
          "sizes {100,50,25,17,13}; unity within 1e-9; constants exact"};
}

/// Acceptance: RA-BN inactive-branch isolation is bit-exact, gradient
/// reversal matches -lambda x identity within 1e-6, MSTrain draws are
/// uniform within +-0.02 over 10k, pooling arithmetic is exact.
inline CheckResult check_baseline_contracts(std::uint64_t seed = 106) {
  // Pooling arithmetic.
  {
    const std::vector<std::vector<double>> experts = {{1, 3}, {3, 1}};
    const auto mean = ensemble_pool(experts, PoolMode::mean);
    const auto mx = ensemble_pool(experts, PoolMode::max);
    if (mean != std::vector<double>{2, 2} || mx != std::vector<double>{3, 3})
      return {"baseline_contracts", false, "pooling arithmetic wrong"};
    const std::vector<std::vector<double>> one = {{0.5, -2.0, 7.0}};
    if (ensemble_pool(one, PoolMode::mean) != one[0] ||
        ensemble_pool(one, PoolMode::max) != one[0])
      return {"baseline_contracts", false, "K=1 pooling not identity"};
  }

  // Gradient reversal: forward identity (bit-exact), backward -lambda x d.
  {
    RngStream rng(seed);
    Tensord d({3, 4});
    for (std::size_t i = 0; i < d.numel(); ++i) d[i] = rng.uniform(-2.0, 2.0);
    for (const double lambda : {0.0, 0.5, 1.0}) {
      GradientReversal<double> grl{lambda};
      const Tensord fwd = grl.forward(d);
      if (!(fwd == d))
        return {"baseline_contracts", false, "reversal forward not identity"};
      const Tensord back = grl.backward(d);
      for (std::size_t i = 0; i < d.numel(); ++i)
        if (std::fabs(back[i] - (-lambda * d[i])) > 1e-6)
          return {"baseline_contracts", false,
                  "reversal backward off at lambda=" + std::to_string(lambda)};
    }
  }

  // MSTrain factor frequencies.
  {
    DegradeConfig dcfg;
    dcfg.base_size = 20;
    dcfg.net_input_size = 8;
    RngStream rng(seed + 1);
    LabeledSample s;
    s.image = Tensorf({20, 20, 3});
    s.image.fill(0.5f);
    s.expression = 3;
    std::map<int, int> counts;
    const int draws = 10000;
    for (int i = 0; i < draws; ++i) {
      const LabeledSample v = mstrain_view(s, dcfg, rng);
      counts[v.resolution.factor]++;
      if (v.expression != 3)
        return {"baseline_contracts", false, "mstrain altered the label"};
    }
    for (int f : dcfg.factors) {
      const double freq = static_cast<double>(counts[f]) / draws;
      if (std::fabs(freq - 0.2) > 0.02)
        return {"baseline_contracts", false,
                "mstrain factor x" + std::to_string(f) + " frequency " +
                    std::to_string(freq)};
    }
  }

  // RA-BN branch isolation under real training steps.
  {
    const nn::NetworkSpec spec = nn::NetworkSpec::tiny(8, {4}, {1});
    RaBnResNet<float> model(spec, 2, 3);
    RngStream rng(seed + 2);
    model.init(rng);

    auto snapshot = [&](int b) {
      std::vector<float> bytes;
      for (const auto& site : model.branch_state(b)) {
        for (std::size_t i = 0; i < site.gamma.numel(); ++i)
          bytes.push_back(site.gamma[i]);
        for (std::size_t i = 0; i < site.beta.numel(); ++i)
          bytes.push_back(site.beta[i]);
        for (std::size_t i = 0; i < site.running_mean.numel(); ++i)
          bytes.push_back(site.running_mean[i]);
        for (std::size_t i = 0; i < site.running_var.numel(); ++i)
          bytes.push_back(site.running_var[i]);
      }
      return bytes;
    };
    const auto before1 = snapshot(1);
    const auto before2 = snapshot(2);

    Adam<float> opt(AdamConfig{1e-2, 0.9, 0.999, 1e-8});
    Tensor<float> x({4, 3, 8, 8});
    for (std::size_t i = 0; i < x.numel(); ++i)
      x[i] = static_cast<float>(rng.uniform());
    const std::vector<int> targets = {0, 1, 0, 1};
    for (int step = 0; step < 5; ++step) model.train_step(x, targets, 0, opt);

    if (snapshot(1) != before1 || snapshot(2) != before2)
      return {"baseline_contracts", false,
              "rabn inactive branch changed after training branch 0"};
    const auto active = snapshot(0);
    if (active == before1)
      return {"baseline_contracts", false, "rabn active branch did not train"};
  }

  return {"baseline_contracts", true,
          "pooling exact; reversal within 1e-6; mstrain uniform; rabn isolated"};
}

inline std::vector<CheckResult> run_selftests(std::ostream& os) {
  std::vector<CheckResult> results;
  results.push_back(check_routing_round_trip());
  results.push_back(check_binarization());
  results.push_back(check_softmax_ce_oracle());
  results.push_back(check_softmax_ce_gradient());
  results.push_back(check_degradation_pipeline());
  results.push_back(check_baseline_contracts());
  int failed = 0;
  for (const auto& r : results) {
    os << (r.passed ? "PASS" : "FAIL") << " " << r.name << ": " << r.detail
       << "\n";
    if (!r.passed) ++failed;
  }
  os << (failed == 0 ? "all checks passed" : std::to_string(failed) + " check(s) failed")
     << "\n";
  return results;
}

}  // namespace drg
