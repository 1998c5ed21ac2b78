// SPDX-License-Identifier: Apache-2.0
#include <catch2/catch_amalgamated.hpp>

#include <cmath>
#include <cstdint>
#include <filesystem>
#include <vector>

#include "drg/baselines.hpp"
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

using namespace drg;
namespace fs = std::filesystem;

namespace {

ExpertBank<float> small_bank(std::size_t k, int hw, int classes,
                             std::uint64_t seed) {
  ExpertBank<float> bank;
  for (std::size_t i = 0; i < k; ++i) {
    bank.experts.emplace_back(nn::NetworkSpec::tiny(hw, {4}), classes);
    RngStream r(seed + i);
    bank.experts.back().init(r);
  }
  return bank;
}

Tensor<float> random_images(std::size_t n, int hw, std::uint64_t seed) {
  RngStream rng(seed);
  Tensor<float> x({n, 3, static_cast<std::size_t>(hw),
                   static_cast<std::size_t>(hw)});
  for (std::size_t i = 0; i < x.numel(); ++i)
    x[i] = static_cast<float>(rng.uniform(0.0, 1.0));
  return x;
}

/// Class-separable 8x8 samples: class 0 dark, class 1 bright, plus noise.
std::vector<LabeledSample> toy_samples(std::size_t n, std::uint64_t seed) {
  RngStream rng(seed);
  std::vector<LabeledSample> out;
  for (std::size_t i = 0; i < n; ++i) {
    LabeledSample s;
    s.expression = static_cast<int>(i % 2);
    const double level = s.expression == 0 ? 0.2 : 0.8;
    s.image = Tensorf({8, 8, 3});
    for (std::size_t j = 0; j < s.image.numel(); ++j)
      s.image[j] = static_cast<float>(level + rng.uniform(-0.1, 0.1));
    out.push_back(std::move(s));
  }
  return out;
}

}  // namespace

// ---------------------------------------------------------------------------
// Ensemble pooling
// ---------------------------------------------------------------------------

TEST_CASE("ensemble_pool computes exact elementwise mean and max") {
  const std::vector<std::vector<double>> outputs{
      {1.0, -2.0, 0.5}, {3.0, 0.0, -0.5}, {2.0, 4.0, 0.0}};
  const auto mean = ensemble_pool(outputs, PoolMode::mean);
  CHECK(mean[0] == 2.0);
  CHECK(mean[1] == Catch::Approx(2.0 / 3.0).margin(1e-15));
  CHECK(mean[2] == 0.0);
  const auto mx = ensemble_pool(outputs, PoolMode::max);
  CHECK(mx[0] == 3.0);
  CHECK(mx[1] == 4.0);
  CHECK(mx[2] == 0.5);

  // A single expert pools to itself under both modes.
  const std::vector<std::vector<double>> one{{0.25, -0.75}};
  CHECK(ensemble_pool(one, PoolMode::mean) == one[0]);
  CHECK(ensemble_pool(one, PoolMode::max) == one[0]);

  CHECK_THROWS_AS(ensemble_pool(std::vector<std::vector<double>>{},
                                PoolMode::mean),
                  std::invalid_argument);
  const std::vector<std::vector<double>> ragged{{1.0, 2.0}, {1.0}};
  CHECK_THROWS_AS(ensemble_pool(ragged, PoolMode::max), std::invalid_argument);
}

TEST_CASE("mean pooling commutes with expert order") {
  // Dyadic values keep double sums exact under reordering.
  const std::vector<std::vector<double>> abc{
      {0.25, 0.5}, {0.75, -0.25}, {1.5, 2.0}};
  const std::vector<std::vector<double>> cba{
      {1.5, 2.0}, {0.75, -0.25}, {0.25, 0.5}};
  CHECK(ensemble_pool(abc, PoolMode::mean) == ensemble_pool(cba, PoolMode::mean));
  CHECK(ensemble_pool(abc, PoolMode::max) == ensemble_pool(cba, PoolMode::max));
}

TEST_CASE("pooled_forward agrees with per-expert forwards") {
  const int hw = 8, classes = 3;
  ExpertBank<float> bank = small_bank(3, hw, classes, 41);
  const Tensor<float> images = random_images(4, hw, 45);

  std::vector<Tensor<float>> logits;
  for (auto& e : bank.experts) logits.push_back(e.forward(images, false));

  const Tensor<float> mean = pooled_forward(bank, images, PoolMode::mean);
  const Tensor<float> mx = pooled_forward(bank, images, PoolMode::max);
  const Tensor<float> probs =
      pooled_forward(bank, images, PoolMode::mean, PoolSite::probabilities);

  for (std::size_t i = 0; i < 4; ++i)
    for (std::size_t c = 0; c < 3; ++c) {
      float sum = 0, best = logits[0](i, c);
      for (const auto& l : logits) {
        sum += l(i, c);
        best = std::max(best, l(i, c));
      }
      CHECK(mean(i, c) == Catch::Approx(sum / 3.0f).margin(1e-6));
      CHECK(mx(i, c) == best);
    }

  // Probability-site pooling averages softmax rows, so rows sum to one.
  for (std::size_t i = 0; i < 4; ++i) {
    float total = 0;
    for (std::size_t c = 0; c < 3; ++c) total += probs(i, c);
    CHECK(total == Catch::Approx(1.0f).margin(1e-5));
  }
}

// ---------------------------------------------------------------------------
// Multi-scale training view
// ---------------------------------------------------------------------------

TEST_CASE("mstrain view draws factors uniformly and keeps the label") {
  DegradeConfig cfg;
  cfg.base_size = 16;
  cfg.net_input_size = 8;
  cfg.factors = {1, 2, 4};
  cfg.eval_extra_factors.clear();
  cfg.validate();

  LabeledSample base;
  base.image = Tensorf({16, 16, 3});
  RngStream fill(51);
  for (std::size_t i = 0; i < base.image.numel(); ++i)
    base.image[i] = static_cast<float>(fill.uniform(0.0, 1.0));
  base.expression = 2;

  RngStream rng(52);
  std::vector<int> counts(3, 0);
  const int draws = 10000;
  for (int i = 0; i < draws; ++i) {
    const LabeledSample view = mstrain_view(base, cfg, rng);
    CHECK(view.expression == 2);
    REQUIRE_FALSE(view.resolution.extra);
    REQUIRE(view.resolution.index >= 0);
    REQUIRE(view.resolution.index < 3);
    CHECK(view.resolution.factor == cfg.factors[view.resolution.index]);
    CHECK(view.image.dim(0) == 8);
    ++counts[static_cast<std::size_t>(view.resolution.index)];
  }
  for (int c : counts) {
    const double freq = static_cast<double>(c) / draws;
    CHECK(freq >= 1.0 / 3 - 0.02);
    CHECK(freq <= 1.0 / 3 + 0.02);
  }
}

TEST_CASE("mstrain view replays deterministically") {
  DegradeConfig cfg;
  cfg.base_size = 16;
  cfg.net_input_size = 8;
  cfg.factors = {1, 2, 4};
  cfg.eval_extra_factors.clear();

  LabeledSample base;
  base.image = Tensorf({16, 16, 3});
  base.image.fill(0.5f);
  base.expression = 1;

  RngStream a(61), b(61);
  const ViewFn view = make_mstrain_view(cfg);
  for (int i = 0; i < 20; ++i) {
    const LabeledSample va = view(base, a);
    const LabeledSample vb = mstrain_view(base, cfg, b);
    CHECK(va.resolution.factor == vb.resolution.factor);
    CHECK(va.image == vb.image);
  }
}

// ---------------------------------------------------------------------------
// Resolution-aware normalization
// ---------------------------------------------------------------------------

TEST_CASE("rabn rejects bad branch configuration") {
  CHECK_THROWS_AS(RaBnResNet<float>(nn::NetworkSpec::tiny(8, {4}), 2, 0),
                  std::invalid_argument);
  RaBnResNet<float> model(nn::NetworkSpec::tiny(8, {4}), 2, 2);
  const Tensor<float> x = random_images(1, 8, 71);
  CHECK_THROWS_AS(model.forward(x, -1, false), std::invalid_argument);
  CHECK_THROWS_AS(model.forward(x, 2, false), std::invalid_argument);
  CHECK(model.branch_count() == 2);
}

TEST_CASE("rabn inactive branches stay bit-identical across training steps") {
  RaBnResNet<float> model(nn::NetworkSpec::tiny(8, {4, 8}), 2, 3);
  RngStream r(73);
  model.init(r);
  Adam<float> opt(AdamConfig{1e-3, 0.9, 0.999, 1e-8});

  auto snapshot = [&](int b) {
    std::vector<Tensor<float>> tensors;
    for (const auto& site : model.branch_state(b)) {
      tensors.push_back(site.gamma);
      tensors.push_back(site.beta);
      tensors.push_back(site.running_mean);
      tensors.push_back(site.running_var);
    }
    return tensors;
  };
  const auto branch1_before = snapshot(1);
  const auto branch2_before = snapshot(2);

  std::vector<float> shared_before;
  for (auto& p : model.net().params())
    if (p.name == "stem.conv.w")
      for (std::size_t i = 0; i < p.value->numel(); ++i)
        shared_before.push_back((*p.value)[i]);

  const Tensor<float> x = random_images(4, 8, 75);
  const std::vector<int> targets{0, 1, 0, 1};
  for (int step = 0; step < 3; ++step) model.train_step(x, targets, 0, opt);

  const auto branch1_after = snapshot(1);
  const auto branch2_after = snapshot(2);
  for (std::size_t i = 0; i < branch1_before.size(); ++i) {
    CHECK(branch1_after[i] == branch1_before[i]);
    CHECK(branch2_after[i] == branch2_before[i]);
  }

  // Shared convolution weights did move.
  bool moved = false;
  std::size_t j = 0;
  for (auto& p : model.net().params())
    if (p.name == "stem.conv.w")
      for (std::size_t i = 0; i < p.value->numel(); ++i, ++j)
        moved = moved || ((*p.value)[i] != shared_before[j]);
  CHECK(moved);

  // The active branch's affines and stats did move.
  const auto branch0 = snapshot(0);
  bool active_moved = false;
  for (std::size_t i = 0; i < branch0.size(); ++i)
    active_moved = active_moved || !(branch0[i] == branch1_before[i]);
  CHECK(active_moved);
}

TEST_CASE("rabn branches learn their own input statistics") {
  RaBnResNet<float> model(nn::NetworkSpec::tiny(8, {4}), 2, 2);
  RngStream r(81);
  model.init(r);

  Tensor<float> low({2, 3, 8, 8}), high({2, 3, 8, 8});
  low.fill(0.1f);
  high.fill(0.9f);
  model.forward(low, 0, true);
  model.forward(high, 1, true);

  // The stem convolution is linear with zero padding, so scaling the input
  // by 9 scales its pre-normalization statistics by 9 exactly.
  const auto& b0 = model.branch_state(0)[0];
  const auto& b1 = model.branch_state(1)[0];
  bool nonzero = false;
  for (std::size_t c = 0; c < b0.running_mean.numel(); ++c) {
    CHECK(b1.running_mean[c] ==
          Catch::Approx(9.0 * b0.running_mean[c]).margin(1e-5));
    nonzero = nonzero || std::abs(b0.running_mean[c]) > 1e-7;
  }
  CHECK(nonzero);

  // Eval through different branches now gives different outputs.
  const Tensor<float> probe = random_images(1, 8, 83);
  const Tensor<float> out0 = model.forward(probe, 0, false);
  const Tensor<float> out1 = model.forward(probe, 1, false);
  bool differs = false;
  for (std::size_t i = 0; i < out0.numel(); ++i)
    differs = differs || (out0[i] != out1[i]);
  CHECK(differs);
}

TEST_CASE("rabn skip mask covers exactly the other branches' affines") {
  RaBnResNet<float> model(nn::NetworkSpec::tiny(8, {4, 8}), 2, 3);
  const auto params = model.params();
  const std::size_t sites = model.net().bn_sites().size();
  for (int active = 0; active < 3; ++active) {
    const auto mask = model.skip_mask_for(active);
    REQUIRE(mask.size() == params.size());
    std::size_t ones = 0;
    for (std::size_t i = 0; i < mask.size(); ++i) {
      if (mask[i]) {
        ++ones;
        CHECK(params[i].name.find("@b") != std::string::npos);
        CHECK(params[i].name.find("@b" + std::to_string(active) + ".") ==
              std::string::npos);
      }
    }
    CHECK(ones == sites * 2 * 2);  // two frozen branches, gamma and beta each
  }
}

TEST_CASE("rabn checkpoints round trip") {
  const fs::path file = fs::temp_directory_path() / "drg_rabn_test.ckpt";
  RaBnResNet<float> model(nn::NetworkSpec::tiny(8, {4}), 2, 2);
  RngStream r(85);
  model.init(r);
  // Shift the branch states apart before saving.
  Tensor<float> low({2, 3, 8, 8}), high({2, 3, 8, 8});
  low.fill(0.2f);
  high.fill(0.8f);
  model.forward(low, 0, true);
  model.forward(high, 1, true);
  CHECK(model.describe().ends_with(";rabn=2"));
  save_rabn(file, model);

  RaBnResNet<float> loaded = load_rabn<float>(file);
  CHECK(loaded.branch_count() == 2);
  CHECK(loaded.describe() == model.describe());
  auto a = model.checkpoint_slots();
  auto b = loaded.checkpoint_slots();
  REQUIRE(a.size() == b.size());
  for (std::size_t i = 0; i < a.size(); ++i) CHECK(*a[i].tensor == *b[i].tensor);
  const Tensor<float> probe = random_images(2, 8, 87);
  for (int branch = 0; branch < 2; ++branch)
    CHECK(model.forward(probe, branch, false) ==
          loaded.forward(probe, branch, false));

  CHECK_THROWS_AS(load_rabn<double>(file), DataError);
  fs::remove(file);

  // A plain network checkpoint is not accepted.
  nn::ResNet<float> plain(nn::NetworkSpec::tiny(8, {4}), 2);
  RngStream r2(89);
  plain.init(r2);
  nn::save_checkpoint(file, plain);
  CHECK_THROWS_MATCHES(
      load_rabn<float>(file), DataError,
      Catch::Matchers::MessageMatches(Catch::Matchers::ContainsSubstring(
          "not a resolution-aware-normalization model")));
  fs::remove(file);
}

TEST_CASE("train_rabn runs deterministically and validates factors") {
  DegradeConfig cfg;
  cfg.base_size = 16;
  cfg.net_input_size = 8;
  cfg.factors = {1, 2};
  cfg.eval_extra_factors = {12};

  const auto samples = toy_samples(16, 91);
  std::vector<int> factors;
  for (std::size_t i = 0; i < samples.size(); ++i)
    factors.push_back(i < 8 ? 1 : 2);
  const InMemoryDataset data = InMemoryDataset::from_samples(samples, factors);

  TrainConfig tcfg;
  tcfg.batch_size = 4;
  tcfg.lr = 1e-3;
  tcfg.epochs = 2;
  tcfg.seed = 93;

  RaBnResNet<float> m1(nn::NetworkSpec::tiny(8, {4}), 2, 2);
  RaBnResNet<float> m2(nn::NetworkSpec::tiny(8, {4}), 2, 2);
  RngStream i1(95), i2(95);
  m1.init(i1);
  m2.init(i2);
  const TrainResult r1 = train_rabn(m1, data, cfg, tcfg);
  const TrainResult r2 = train_rabn(m2, data, cfg, tcfg);
  REQUIRE(r1.epoch_losses.size() == 2);
  CHECK(r1.epoch_losses == r2.epoch_losses);
  for (double l : r1.epoch_losses) {
    CHECK(std::isfinite(l));
    CHECK(l > 0);
  }

  // A factor outside the trained set has no branch.
  const InMemoryDataset extra =
      InMemoryDataset::from_samples({samples[0]}, {12});
  RaBnResNet<float> m3(nn::NetworkSpec::tiny(8, {4}), 2, 2);
  RngStream i3(97);
  m3.init(i3);
  CHECK_THROWS_AS(train_rabn(m3, extra, cfg, tcfg), DataError);
  const InMemoryDataset base_items =
      InMemoryDataset::from_samples({samples[0]}, {0});
  CHECK_THROWS_AS(train_rabn(m3, base_items, cfg, tcfg), DataError);
}

// ---------------------------------------------------------------------------
// Gradient reversal and domain adaptation
// ---------------------------------------------------------------------------

TEST_CASE("gradient reversal is identity forward, negated scaled backward") {
  Tensor<double> x({2, 3});
  RngStream rng(111);
  for (std::size_t i = 0; i < x.numel(); ++i) x[i] = rng.uniform(-2.0, 2.0);

  for (double lambda : {0.0, 0.5, 1.0, 2.5}) {
    GradientReversal<double> grl{lambda};
    CHECK(grl.forward(x) == x);
    Tensor<double> dout({2, 3});
    for (std::size_t i = 0; i < dout.numel(); ++i)
      dout[i] = rng.uniform(-1.0, 1.0);
    const Tensor<double> dx = grl.backward(dout);
    for (std::size_t i = 0; i < dout.numel(); ++i)
      CHECK(dx[i] == Catch::Approx(-lambda * dout[i]).margin(1e-15));
  }
}

TEST_CASE("reversed domain gradient matches finite differences") {
  const int feature_dim = 6;
  DaHead<double> head(feature_dim);
  RngStream r(113);
  head.init(r);

  Tensor<double> features({3, feature_dim});
  RngStream rf(115);
  for (std::size_t i = 0; i < features.numel(); ++i)
    features[i] = rf.uniform(-1.0, 1.0);
  const std::vector<int> domains{0, 1, 1};

  const auto loss_of = [&](const Tensor<double>& f) {
    Tensor<double> logits = head.forward(f, false);
    return softmax_cross_entropy(logits, domains).loss;
  };

  for (double lambda : {0.0, 0.5, 1.0}) {
    GradientReversal<double> grl{lambda};
    Tensor<double> logits = head.forward(grl.forward(features), true);
    const auto res = softmax_cross_entropy(logits, domains);
    const Tensor<double> applied = grl.backward(head.backward(res.dlogits));

    const double h = 1e-6;
    for (std::size_t i = 0; i < features.numel(); ++i) {
      const double saved = features[i];
      features[i] = saved + h;
      const double up = loss_of(features);
      features[i] = saved - h;
      const double down = loss_of(features);
      features[i] = saved;
      const double fd = (up - down) / (2 * h);
      CHECK(applied[i] == Catch::Approx(-lambda * fd).margin(1e-6));
    }
  }
}

TEST_CASE("da_train_step validates inputs and updates both networks") {
  nn::ResNet<float> model(nn::NetworkSpec::tiny(8, {4}), 2);
  RngStream r(117);
  model.init(r);
  DaHead<float> head(model.spec().feature_dim());
  RngStream rh(119);
  head.init(rh);
  Adam<float> opt_model, opt_head;

  const Tensor<float> source = random_images(3, 8, 121);
  const Tensor<float> target = random_images(2, 8, 123);
  const std::vector<int> labels{0, 1, 0};

  std::vector<float> head_before;
  for (auto& p : head.params())
    for (std::size_t i = 0; i < p.value->numel(); ++i)
      head_before.push_back((*p.value)[i]);

  const DaLosses losses =
      da_train_step(model, head, source, labels, target, 1.0, opt_model,
                    opt_head);
  CHECK(std::isfinite(losses.task));
  CHECK(std::isfinite(losses.domain));
  CHECK(losses.task > 0);
  CHECK(losses.domain > 0);

  bool head_moved = false;
  std::size_t j = 0;
  for (auto& p : head.params())
    for (std::size_t i = 0; i < p.value->numel(); ++i, ++j)
      head_moved = head_moved || ((*p.value)[i] != head_before[j]);
  CHECK(head_moved);

  CHECK_THROWS_AS(da_train_step(model, head, source, labels, target, -0.5,
                                opt_model, opt_head),
                  std::invalid_argument);
  const Tensor<float> empty({0, 3, 8, 8});
  CHECK_THROWS_AS(da_train_step(model, head, empty, {}, target, 1.0,
                                opt_model, opt_head),
                  std::invalid_argument);
}

TEST_CASE("train_da is deterministic and tracks both losses") {
  DegradeConfig cfg;
  cfg.base_size = 16;
  cfg.net_input_size = 8;
  cfg.factors = {1, 2};
  cfg.eval_extra_factors.clear();

  const auto src_samples = toy_samples(12, 131);
  const auto tgt_samples = toy_samples(8, 133);
  const InMemoryDataset source = InMemoryDataset::from_samples(
      src_samples, std::vector<int>(src_samples.size(), 1));
  const InMemoryDataset target = InMemoryDataset::from_samples(
      tgt_samples, std::vector<int>(tgt_samples.size(), 2));

  TrainConfig tcfg;
  tcfg.batch_size = 4;
  tcfg.lr = 1e-3;
  tcfg.epochs = 2;
  tcfg.seed = 135;

  auto run = [&] {
    nn::ResNet<float> model(nn::NetworkSpec::tiny(8, {4}), 2);
    RngStream ri(137);
    model.init(ri);
    DaHead<float> head(model.spec().feature_dim());
    RngStream rh(139);
    head.init(rh);
    return train_da(model, head, source, target, cfg, tcfg, 1.0);
  };
  const DaTrainResult a = run();
  const DaTrainResult b = run();
  REQUIRE(a.task_losses.size() == 2);
  REQUIRE(a.domain_losses.size() == 2);
  CHECK(a.task_losses == b.task_losses);
  CHECK(a.domain_losses == b.domain_losses);
  for (double l : a.task_losses) CHECK(std::isfinite(l));
  for (double l : a.domain_losses) CHECK(std::isfinite(l));

  nn::ResNet<float> model(nn::NetworkSpec::tiny(8, {4}), 2);
  RngStream ri(141);
  model.init(ri);
  DaHead<float> head(model.spec().feature_dim());
  RngStream rh(143);
  head.init(rh);
  CHECK_THROWS_AS(train_da(model, head, source, target, cfg, tcfg, -1.0),
                  std::invalid_argument);
  const InMemoryDataset empty;
  CHECK_THROWS_AS(train_da(model, head, empty, target, cfg, tcfg, 1.0),
                  std::invalid_argument);
}
