// SPDX-License-Identifier: Apache-2.0
//
// Desk-scale acceptance gate. Runs nine criteria and prints one PASS/FAIL
// line per criterion with the measured values and runtime. Exits nonzero if
// any criterion fails. Criteria with a runtime budget fail when they exceed
// it even if the checks themselves pass.

#include <sys/wait.h>

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <functional>
#include <map>
#include <span>
#include <sstream>
#include <string>
#include <vector>

#include "drg/baselines.hpp"
#include "drg/bicubic.hpp"
#include "drg/degrade.hpp"
#include "drg/errors.hpp"
#include "drg/eval.hpp"
#include "drg/mrafer.hpp"
#include "drg/nn/backbone.hpp"
#include "drg/rng.hpp"
#include "drg/rrn.hpp"
#include "drg/tensor.hpp"
#include "drg/types.hpp"

using namespace drg;
namespace fs = std::filesystem;

namespace {

int g_failures = 0;

struct Outcome {
  bool pass = false;
  std::string detail;
};

std::string fmt(const char* format, double v) {
  char buf[64];
  std::snprintf(buf, sizeof(buf), format, v);
  return buf;
}

void run_criterion(int number, const std::string& name, double budget_seconds,
                   const std::function<Outcome()>& body) {
  const auto start = std::chrono::steady_clock::now();
  Outcome outcome;
  try {
    outcome = body();
  } catch (const std::exception& e) {
    outcome = {false, std::string("exception: ") + e.what()};
  }
  const double seconds =
      std::chrono::duration<double>(std::chrono::steady_clock::now() - start)
          .count();
  const bool in_budget = budget_seconds <= 0 || seconds < budget_seconds;
  if (!in_budget)
    outcome.detail += "; exceeded " + fmt("%.0f", budget_seconds) + " s budget";
  const bool pass = outcome.pass && in_budget;
  if (!pass) ++g_failures;
  std::printf("%s criterion %d (%s): %s [%.1f s]\n", pass ? "PASS" : "FAIL",
              number, name.c_str(), outcome.detail.c_str(), seconds);
  std::fflush(stdout);
}

Tensorf random_hwc_image(std::size_t h, std::size_t w, RngStream& rng) {
  Tensorf img({h, w, 3});
  for (std::size_t i = 0; i < img.numel(); ++i)
    img[i] = static_cast<float>(rng.uniform());
  return img;
}

// ---------------------------------------------------------------------------
// 1. Routing round-trip: gather(assign(batch)) restores original order.
// ---------------------------------------------------------------------------
Outcome criterion1() {
  RngStream rng(101);
  std::size_t samples = 0;
  std::size_t failures = 0;
  for (int b = 0; b < 1000; ++b) {
    const std::size_t n = rng.uniform_int(257);
    const int k = 1 + static_cast<int>(rng.uniform_int(8));
    Batch batch;
    batch.samples.reserve(n);
    for (std::size_t i = 0; i < n; ++i) {
      LabeledSample s;
      s.image = Tensorf({1, 1, 1});
      s.image[0] = static_cast<float>(i);
      batch.samples.push_back(std::move(s));
    }
    batch = Batch::from_samples(std::move(batch.samples));
    std::vector<RoutingVector> routes;
    routes.reserve(n);
    for (std::size_t i = 0; i < n; ++i)
      routes.emplace_back(static_cast<int>(rng.uniform_int(k)), k);

    const PartitionedBatch parts = assign(batch, routes, k);
    if (parts.total() != n) ++failures;
    std::vector<std::vector<std::size_t>> payload(parts.groups.size());
    for (std::size_t g = 0; g < parts.groups.size(); ++g)
      for (const auto& item : parts.groups[g])
        payload[g].push_back(item.original_index);
    const std::vector<std::size_t> restored = gather(parts, payload);
    for (std::size_t i = 0; i < n; ++i)
      if (restored[i] != i) ++failures;
    samples += n;
  }
  return {failures == 0, std::to_string(samples) + " samples in 1000 batches, " +
                             std::to_string(failures) + " order failures"};
}

// ---------------------------------------------------------------------------
// 2. End-to-end equivalence: drg row i equals expert route(i) run solo.
// ---------------------------------------------------------------------------
Outcome criterion2() {
  const int k = 3, classes = 5;
  ExpertBank<float> bank;
  for (int i = 0; i < k; ++i) {
    bank.experts.emplace_back(nn::NetworkSpec::tiny(8, {4, 6}), classes);
    RngStream r(200 + static_cast<std::uint64_t>(i));
    bank.experts.back().init(r);
  }

  RngStream rng(210);
  double worst = 0;
  std::size_t class_mismatches = 0;
  for (int b = 0; b < 200; ++b) {
    const std::size_t n = 1 + rng.uniform_int(12);
    std::vector<LabeledSample> samples(n);
    for (std::size_t i = 0; i < n; ++i)
      samples[i].image = random_hwc_image(8, 8, rng);
    const Batch batch = Batch::from_samples(std::move(samples));
    std::vector<RoutingVector> routes;
    routes.reserve(n);
    for (std::size_t i = 0; i < n; ++i)
      routes.emplace_back(static_cast<int>(rng.uniform_int(k)), k);

    const Tensor<float> merged = mrafer_forward(bank, assign(batch, routes, k));
    for (std::size_t i = 0; i < n; ++i) {
      Batch solo;
      solo.samples.push_back(batch.samples[i]);
      const Tensorf input = pack_images(solo);
      const Tensor<float> ref =
          bank.experts[static_cast<std::size_t>(routes[i].index())].forward(
              input, /*train=*/false);
      const std::span<const float> merged_row(merged.data() + i * classes,
                                              classes);
      const std::span<const float> ref_row(ref.data(), classes);
      if (argmax_first(merged_row) != argmax_first(ref_row))
        ++class_mismatches;
      for (int c = 0; c < classes; ++c)
        worst = std::max(worst, static_cast<double>(std::abs(
                                    merged_row[static_cast<std::size_t>(c)] -
                                    ref_row[static_cast<std::size_t>(c)])));
    }
  }
  const bool pass = class_mismatches == 0 && worst <= 1e-5;
  return {pass, "200 mixed batches, " + std::to_string(class_mismatches) +
                    " class mismatches, max logit diff " + fmt("%.2e", worst)};
}

// ---------------------------------------------------------------------------
// 3. Binarization: one-hot, first-max ties, shift-invariant, idempotent.
// ---------------------------------------------------------------------------
Outcome criterion3() {
  RngStream rng(301);
  std::size_t failures = 0;
  std::size_t ties = 0;
  for (int t = 0; t < 10000; ++t) {
    const int k = 1 + static_cast<int>(rng.uniform_int(8));
    std::vector<double> v(static_cast<std::size_t>(k));
    for (double& x : v) x = rng.uniform(-5.0, 5.0);
    if (t % 3 == 0 && k >= 2) {
      const std::size_t m = static_cast<std::size_t>(argmax_first(v));
      v[(m + 1) % v.size()] = v[m];
      ++ties;
    }
    const RoutingVector route = binarize(v);

    const auto bits = route.bits();
    std::size_t ones = 0;
    for (auto bit : bits) ones += bit;
    if (ones != 1 || bits.size() != v.size()) ++failures;

    const std::size_t idx = static_cast<std::size_t>(route.index());
    const double vmax = *std::max_element(v.begin(), v.end());
    if (v[idx] != vmax) ++failures;
    for (std::size_t j = 0; j < idx; ++j)
      if (v[j] == vmax) ++failures;

    const double shift = rng.uniform(-10.0, 10.0);
    std::vector<double> shifted = v;
    for (double& x : shifted) x += shift;
    if (binarize(shifted).index() != route.index()) ++failures;

    std::vector<double> rebinarized(bits.size());
    for (std::size_t j = 0; j < bits.size(); ++j)
      rebinarized[j] = static_cast<double>(bits[j]);
    if (binarize(rebinarized).index() != route.index()) ++failures;
  }
  return {failures == 0, "10000 vectors (" + std::to_string(ties) +
                             " with exact ties), " + std::to_string(failures) +
                             " property failures"};
}

// ---------------------------------------------------------------------------
// 4. Softmax and cross-entropy against long-double oracles plus finite
//    differences on the analytic gradient.
// ---------------------------------------------------------------------------
Outcome criterion4() {
  RngStream rng(401);
  double worst_softmax = 0, worst_loss = 0;
  for (int t = 0; t < 1000; ++t) {
    const std::size_t k = 2 + rng.uniform_int(9);
    std::vector<double> v(k);
    for (double& x : v) x = rng.uniform(-40.0, 40.0);

    const long double vmax =
        static_cast<long double>(*std::max_element(v.begin(), v.end()));
    std::vector<long double> exps(k);
    long double sum = 0;
    for (std::size_t j = 0; j < k; ++j) {
      exps[j] = std::exp(static_cast<long double>(v[j]) - vmax);
      sum += exps[j];
    }
    const std::vector<double> probs = softmax(v);
    for (std::size_t j = 0; j < k; ++j)
      worst_softmax =
          std::max(worst_softmax,
                   std::abs(probs[j] - static_cast<double>(exps[j] / sum)));

    const int target = static_cast<int>(rng.uniform_int(k));
    Tensor<double> logits({1, k});
    std::copy(v.begin(), v.end(), logits.data());
    const auto res = softmax_cross_entropy(logits, {target});
    const long double p = std::max(
        exps[static_cast<std::size_t>(target)] / sum, 1e-12L);
    worst_loss = std::max(
        worst_loss, std::abs(res.loss - static_cast<double>(-std::log(p))));
  }

  double worst_grad = 0;
  for (int t = 0; t < 20; ++t) {
    const std::size_t n = 4, k = 6;
    Tensor<double> logits({n, k});
    for (std::size_t i = 0; i < logits.numel(); ++i)
      logits[i] = rng.uniform(-3.0, 3.0);
    std::vector<int> targets(n);
    for (int& y : targets) y = static_cast<int>(rng.uniform_int(k));

    const auto res = softmax_cross_entropy(logits, targets);
    const double h = 1e-6;
    for (std::size_t i = 0; i < logits.numel(); ++i) {
      const double saved = logits[i];
      logits[i] = saved + h;
      const double up = softmax_cross_entropy(logits, targets).loss;
      logits[i] = saved - h;
      const double down = softmax_cross_entropy(logits, targets).loss;
      logits[i] = saved;
      const double fd = (up - down) / (2 * h);
      worst_grad = std::max(worst_grad, std::abs(fd - res.dlogits[i]));
    }
  }

  const bool pass =
      worst_softmax <= 1e-12 && worst_loss <= 1e-12 && worst_grad <= 1e-6;
  return {pass, "softmax " + fmt("%.2e", worst_softmax) + ", loss " +
                    fmt("%.2e", worst_loss) + " (tol 1e-12), grad vs fd " +
                    fmt("%.2e", worst_grad) + " (tol 1e-6)"};
}

// ---------------------------------------------------------------------------
// 5. Backbone gradient check in float64.
// ---------------------------------------------------------------------------
Outcome criterion5() {
  nn::ResNet<double> net(nn::NetworkSpec::tiny(8, {4, 6}), 3);
  RngStream rng(514);
  net.init(rng);

  Tensor<double> x({2, 3, 8, 8});
  RngStream xr(515);
  for (std::size_t i = 0; i < x.numel(); ++i) x[i] = xr.uniform();
  const std::vector<int> targets{1, 2};

  const auto loss_of = [&] {
    return softmax_cross_entropy(net.forward(x, true), targets).loss;
  };

  net.zero_grads();
  const auto res = softmax_cross_entropy(net.forward(x, true), targets);
  net.backward(res.dlogits);

  auto params = net.params();
  std::size_t total = 0;
  for (auto& p : params) total += p.value->numel();

  RngStream pick(516);
  const double h = 1e-5;
  double worst = 0;
  for (int checked = 0; checked < 50; ++checked) {
    std::size_t offset = pick.uniform_int(total);
    std::size_t which = 0;
    while (offset >= params[which].value->numel()) {
      offset -= params[which].value->numel();
      ++which;
    }
    double& w = (*params[which].value)[offset];
    const double saved = w;
    w = saved + h;
    const double up = loss_of();
    w = saved - h;
    const double down = loss_of();
    w = saved;
    const double fd = (up - down) / (2 * h);
    const double analytic = (*params[which].grad)[offset];
    const double denom = std::max({std::abs(fd), std::abs(analytic), 1e-8});
    worst = std::max(worst, std::abs(fd - analytic) / denom);
  }
  return {worst <= 1e-3,
          "50 parameters, worst relative error " + fmt("%.2e", worst) +
              " (tol 1e-3)"};
}

// ---------------------------------------------------------------------------
// 6. Degradation pipeline: sizes, kernel partition of unity, constant image.
// ---------------------------------------------------------------------------
Outcome criterion6() {
  const std::vector<std::pair<int, int>> expected{
      {1, 100}, {2, 50}, {4, 25}, {6, 17}, {8, 13}};
  for (const auto& [factor, size] : expected)
    if (degraded_size(100, factor) != size)
      return {false, "degraded_size(100," + std::to_string(factor) +
                         ") != " + std::to_string(size)};

  double worst_unity = 0;
  for (int i = 0; i <= 1000; ++i) {
    const double t = i / 1000.0;
    const double sum =
        bicubic_kernel(t + 1.0, -0.5) + bicubic_kernel(t, -0.5) +
        bicubic_kernel(t - 1.0, -0.5) + bicubic_kernel(t - 2.0, -0.5);
    worst_unity = std::max(worst_unity, std::abs(sum - 1.0));
  }
  if (worst_unity > 1e-9)
    return {false, "kernel unity deviation " + fmt("%.2e", worst_unity)};

  Tensorf img({31, 31, 3});
  img.fill(0.37f);
  std::size_t drifted = 0;
  for (int target : {7, 13, 31, 64, 101}) {
    const Tensorf out = resize_bicubic(img, target, target, -0.5);
    for (std::size_t i = 0; i < out.numel(); ++i)
      if (out[i] != 0.37f) ++drifted;
  }
  if (drifted != 0)
    return {false, std::to_string(drifted) + " constant-image pixels drifted"};
  return {true, "sizes {100,50,25,17,13} exact, kernel unity " +
                    fmt("%.2e", worst_unity) + ", constant image exact"};
}

// ---------------------------------------------------------------------------
// Subprocess pipeline helpers (criteria 7 and 9).
// ---------------------------------------------------------------------------
int run_cli(const std::vector<std::string>& args, const fs::path& log) {
  std::string cmd = std::string("\"") + DRG_CLI_PATH + "\"";
  for (const auto& a : args) cmd += " \"" + a + "\"";
  cmd += " >> \"" + log.string() + "\" 2>&1";
  const int status = std::system(cmd.c_str());
  if (status == -1) return -1;
  if (WIFEXITED(status)) return WEXITSTATUS(status);
  return -2;
}

// ---------------------------------------------------------------------------
// 7. Synthetic desk-scale experiment: train the full stack, then check the
//    routing accuracy, the margin over every single-factor expert on the
//    mixed test set, and drg-gt >= drg per factor.
// ---------------------------------------------------------------------------
Outcome criterion7() {
  const fs::path root = fs::temp_directory_path() / "drg_acceptance_desk";
  fs::remove_all(root);
  fs::create_directories(root);
  const fs::path log = root / "pipeline.log";
  const std::string corpus = (root / "corpus").string();
  const std::string prep = (root / "prep").string();
  const std::string models = (root / "models").string();

  const std::vector<std::vector<std::string>> steps{
      {"synth", "--classes", "4", "--per-class", "500", "--seed", "7",
       "--base-size", "64", "--output", corpus},
      {"prepare", "--input", corpus, "--output", prep, "--base-size", "64",
       "--net-input", "64"},
      {"train-rrn", "--dataset", prep, "--output", models, "--base-size", "64",
       "--net-input", "64", "--arch", "tiny", "--batch-size", "32", "--epochs",
       "30", "--lr", "1e-3", "--seed", "1"}};
  std::vector<std::vector<std::string>> all = steps;
  for (int f : {1, 2, 4, 6, 8})
    all.push_back({"train-expert", "--factor", std::to_string(f), "--dataset",
                   prep, "--output", models, "--base-size", "64", "--net-input",
                   "64", "--arch", "tiny", "--batch-size", "32", "--epochs",
                   "30", "--lr", "1e-3", "--seed", std::to_string(10 + f)});
  all.push_back({"eval", "--method", "drg", "--dataset", prep, "--models",
                 models, "--output", (root / "report").string(), "--base-size",
                 "64", "--net-input", "64", "--cross"});
  all.push_back({"eval", "--method", "drg-gt", "--dataset", prep, "--models",
                 models, "--output", (root / "report_gt").string(),
                 "--base-size", "64", "--net-input", "64"});

  for (const auto& step : all) {
    const int code = run_cli(step, log);
    if (code != 0)
      return {false, "step '" + step[0] + "' exited " + std::to_string(code) +
                         ", log at " + log.string()};
  }

  const auto drg_reports = parse_report(root / "report" / "report.csv");
  const auto gt_reports = parse_report(root / "report_gt" / "report.csv");
  if (drg_reports.size() != 1 || gt_reports.size() != 1)
    return {false, "unexpected report shape"};
  const EvalReport& dyn = drg_reports.front();
  const EvalReport& gt = gt_reports.front();
  if (!dyn.route_accuracy)
    return {false, "drg report lacks route accuracy"};

  const double route = *dyn.route_accuracy;

  double best_expert = 0;
  std::string best_name = "none";
  for (const auto& [row, cells] : dyn.cross) {
    double sum = 0;
    for (const auto& [factor, acc] : cells) sum += acc;
    const double mixed = sum / static_cast<double>(cells.size());
    if (mixed > best_expert) {
      best_expert = mixed;
      best_name = row;
    }
  }
  const double margin = dyn.mean_accuracy - best_expert;

  std::size_t gt_regressions = 0;
  for (const auto& [factor, acc] : dyn.per_factor) {
    const auto it = gt.per_factor.find(factor);
    if (it == gt.per_factor.end() || it->second < acc) ++gt_regressions;
  }

  const bool pass = route >= 0.95 && margin >= 0.05 && gt_regressions == 0;
  const std::string detail =
      "route " + fmt("%.2f", route * 100) + "% (need >=95%), drg mean " +
      fmt("%.2f", dyn.mean_accuracy * 100) + "% vs best expert " + best_name +
      " " + fmt("%.2f", best_expert * 100) + "% on the mixed set (margin " +
      fmt("%.1f", margin * 100) + " pts, need >=5), gt-route regressions " +
      std::to_string(gt_regressions);
  if (pass) fs::remove_all(root);
  return {pass, detail};
}

// ---------------------------------------------------------------------------
// 8. Baseline contracts: RA-BN isolation, gradient reversal, MSTrain
//    frequencies, pooling arithmetic.
// ---------------------------------------------------------------------------
Outcome criterion8() {
  // RA-BN: inactive branches must stay bit-identical across training steps.
  {
    RaBnResNet<float> model(nn::NetworkSpec::tiny(8, {4, 8}), 2, 3);
    RngStream r(873);
    model.init(r);
    Adam<float> opt(AdamConfig{1e-3, 0.9, 0.999, 1e-8});

    const auto snapshot = [&](int b) {
      std::vector<Tensor<float>> tensors;
      for (const auto& site : model.branch_state(b)) {
        tensors.push_back(site.gamma);
        tensors.push_back(site.beta);
        tensors.push_back(site.running_mean);
        tensors.push_back(site.running_var);
      }
      return tensors;
    };
    const auto b1 = snapshot(1);
    const auto b2 = snapshot(2);

    Tensor<float> x({4, 3, 8, 8});
    RngStream xr(875);
    for (std::size_t i = 0; i < x.numel(); ++i)
      x[i] = static_cast<float>(xr.uniform());
    const std::vector<int> targets{0, 1, 0, 1};
    for (int step = 0; step < 3; ++step) model.train_step(x, targets, 0, opt);

    const auto b1_after = snapshot(1);
    const auto b2_after = snapshot(2);
    for (std::size_t i = 0; i < b1.size(); ++i)
      if (!(b1_after[i] == b1[i]) || !(b2_after[i] == b2[i]))
        return {false, "rabn inactive branch state changed"};
  }

  // Gradient reversal: reversed path equals -lambda times the identity path.
  double worst_grl = 0;
  {
    DaHead<double> head(6);
    RngStream r(881);
    head.init(r);
    Tensor<double> features({3, 6});
    for (std::size_t i = 0; i < features.numel(); ++i)
      features[i] = r.uniform(-1.0, 1.0);
    const std::vector<int> domains{0, 1, 1};

    const Tensor<double> plain_logits = head.forward(features, true);
    const auto res = softmax_cross_entropy(plain_logits, domains);
    const Tensor<double> identity_grad = head.backward(res.dlogits);

    for (double lambda : {0.0, 0.5, 1.0, 2.5}) {
      GradientReversal<double> grl{lambda};
      const Tensor<double> forwarded = grl.forward(features);
      if (!(forwarded == features))
        return {false, "gradient reversal forward is not the identity"};
      head.zero_grads();
      head.forward(forwarded, true);
      const Tensor<double> reversed =
          grl.backward(head.backward(res.dlogits));
      for (std::size_t i = 0; i < reversed.numel(); ++i)
        worst_grl = std::max(
            worst_grl, std::abs(reversed[i] + lambda * identity_grad[i]));
    }
    if (worst_grl > 1e-6)
      return {false, "gradient reversal deviation " + fmt("%.2e", worst_grl)};
  }

  // MSTrain: drawn factors uniform within +/-0.02 over 10k draws.
  double worst_freq = 0;
  {
    DegradeConfig cfg;
    cfg.base_size = 16;
    cfg.net_input_size = 8;
    cfg.factors = {1, 2, 4};
    cfg.eval_extra_factors = {};

    LabeledSample base;
    base.image = Tensorf({16, 16, 3});
    RngStream ir(885);
    for (std::size_t i = 0; i < base.image.numel(); ++i)
      base.image[i] = static_cast<float>(ir.uniform());

    RngStream rng(887);
    std::map<int, int> counts;
    const int draws = 10000;
    for (int i = 0; i < draws; ++i)
      ++counts[mstrain_view(base, cfg, rng).resolution.factor];
    for (int f : cfg.factors) {
      const double freq = counts[f] / static_cast<double>(draws);
      worst_freq = std::max(
          worst_freq, std::abs(freq - 1.0 / static_cast<double>(
                                          cfg.factors.size())));
    }
    if (worst_freq > 0.02)
      return {false, "mstrain frequency deviation " + fmt("%.3f", worst_freq)};
  }

  // Pooling: mean and max must match plain arithmetic exactly.
  {
    const std::vector<std::vector<double>> two{{1.0, -2.0, 3.5},
                                              {2.0, 0.5, -1.0}};
    const std::vector<double> mean_ref{1.5, -0.75, 1.25};
    const std::vector<double> max_ref{2.0, 0.5, 3.5};
    if (ensemble_pool(two, PoolMode::mean) != mean_ref ||
        ensemble_pool(two, PoolMode::max) != max_ref)
      return {false, "pooling arithmetic mismatch on the worked example"};

    RngStream r(889);
    std::vector<std::vector<double>> many(4, std::vector<double>(7));
    for (auto& row : many)
      for (double& v : row) v = r.uniform(-4.0, 4.0);
    const auto mean_out = ensemble_pool(many, PoolMode::mean);
    const auto max_out = ensemble_pool(many, PoolMode::max);
    for (std::size_t j = 0; j < 7; ++j) {
      double sum = 0, vmax = many[0][j];
      for (const auto& row : many) {
        sum += row[j];
        vmax = std::max(vmax, row[j]);
      }
      if (mean_out[j] != sum / 4.0 || max_out[j] != vmax)
        return {false, "pooling arithmetic mismatch on random inputs"};
    }
  }

  return {true, "rabn isolation bit-exact, grl deviation " +
                    fmt("%.2e", worst_grl) + ", mstrain deviation " +
                    fmt("%.3f", worst_freq) + ", pooling exact"};
}

// ---------------------------------------------------------------------------
// 9. Determinism: two identical pipeline runs produce byte-identical
//    report.csv files.
// ---------------------------------------------------------------------------
Outcome criterion9() {
  const auto pipeline = [&](const fs::path& root) -> std::string {
    fs::remove_all(root);
    fs::create_directories(root);
    const fs::path log = root / "pipeline.log";
    const std::string corpus = (root / "corpus").string();
    const std::string prep = (root / "prep").string();
    const std::string models = (root / "models").string();

    std::vector<std::vector<std::string>> steps{
        {"synth", "--classes", "3", "--per-class", "8", "--seed", "21",
         "--base-size", "16", "--output", corpus},
        {"prepare", "--input", corpus, "--output", prep, "--base-size", "16",
         "--net-input", "8", "--factors", "1,2", "--extra-factors", "4"},
        {"train-rrn", "--dataset", prep, "--output", models, "--base-size",
         "16", "--net-input", "8", "--factors", "1,2", "--arch", "tiny",
         "--batch-size", "8", "--epochs", "2", "--lr", "1e-3", "--seed", "3"}};
    for (int f : {1, 2})
      steps.push_back({"train-expert", "--factor", std::to_string(f),
                       "--dataset", prep, "--output", models, "--base-size",
                       "16", "--net-input", "8", "--factors", "1,2", "--arch",
                       "tiny", "--batch-size", "8", "--epochs", "2", "--lr",
                       "1e-3", "--seed", "5"});
    steps.push_back({"eval", "--method", "drg", "--dataset", prep, "--models",
                     models, "--output", (root / "report").string(),
                     "--base-size", "16", "--net-input", "8",
                     "--train-factors", "1,2", "--factors", "1,2", "--cross"});

    for (const auto& step : steps) {
      const int code = run_cli(step, log);
      if (code != 0)
        return "step '" + step[0] + "' exited " + std::to_string(code) +
               ", log at " + log.string();
    }
    return "";
  };

  const fs::path root_a = fs::temp_directory_path() / "drg_acceptance_det_a";
  const fs::path root_b = fs::temp_directory_path() / "drg_acceptance_det_b";
  for (const fs::path& root : {root_a, root_b}) {
    const std::string err = pipeline(root);
    if (!err.empty()) return {false, err};
  }

  const auto read_bytes = [](const fs::path& p) {
    std::ifstream is(p, std::ios::binary);
    std::ostringstream ss;
    ss << is.rdbuf();
    return ss.str();
  };
  const std::string a = read_bytes(root_a / "report" / "report.csv");
  const std::string b = read_bytes(root_b / "report" / "report.csv");
  const bool pass = !a.empty() && a == b;
  if (pass) {
    fs::remove_all(root_a);
    fs::remove_all(root_b);
  }
  return {pass, pass ? "two runs, report.csv byte-identical (" +
                           std::to_string(a.size()) + " bytes)"
                     : "report.csv files differ or are empty"};
}

}  // namespace

int main() {
  std::printf("drg acceptance gate\n");
  run_criterion(1, "routing round-trip", 10, criterion1);
  run_criterion(2, "end-to-end equivalence", 120, criterion2);
  run_criterion(3, "binarization properties", 5, criterion3);
  run_criterion(4, "softmax and cross-entropy oracles", 0, criterion4);
  run_criterion(5, "backbone gradient check", 60, criterion5);
  run_criterion(6, "degradation pipeline", 0, criterion6);
  run_criterion(7, "synthetic desk-scale experiment", 1800, criterion7);
  run_criterion(8, "baseline contracts", 0, criterion8);
  run_criterion(9, "pipeline determinism", 0, criterion9);
  std::printf("%d of 9 criteria passed\n", 9 - g_failures);
  return g_failures == 0 ? 0 : 1;
}
