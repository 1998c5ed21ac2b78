// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "drg/baselines.hpp"
#include "drg/config.hpp"
#include "drg/degrade.hpp"
#include "drg/errors.hpp"
#include "drg/eval.hpp"
#include "drg/mrafer.hpp"
#include "drg/nn/backbone.hpp"
#include "drg/nn/checkpoint.hpp"
#include "drg/rrn.hpp"
#include "drg/selftest.hpp"
#include "drg/synth.hpp"
#include "drg/train.hpp"

namespace drg::cli {

namespace detail {

using drg::detail::kTagInit;

/// Flag > config file > default. Options track whether the user passed them.
struct Effective {
  const Config& cfg;

  int get(const CLI::Option* opt, int flag, const char* key, int dflt) const {
    return opt->count() ? flag : cfg.get_int(key, dflt);
  }
  double get(const CLI::Option* opt, double flag, const char* key,
             double dflt) const {
    return opt->count() ? flag : cfg.get_double(key, dflt);
  }
  std::uint64_t get(const CLI::Option* opt, std::uint64_t flag, const char* key,
                    std::uint64_t dflt) const {
    return opt->count() ? flag : cfg.get_u64(key, dflt);
  }
  std::string get(const CLI::Option* opt, const std::string& flag,
                  const char* key, const std::string& dflt) const {
    return opt->count() ? flag : cfg.get_str(key, dflt);
  }
  std::vector<int> get(const CLI::Option* opt, const std::string& flag,
                       const char* key, std::vector<int> dflt) const {
    if (opt->count()) {
      Config one;
      one.set(key, flag);
      return one.get_factors(key, {});
    }
    return cfg.get_factors(key, std::move(dflt));
  }

  std::string require(const CLI::Option* opt, const std::string& flag,
                      const char* key) const {
    if (opt->count()) return flag;
    if (cfg.has(key)) return cfg.require_str(key);
    throw ConfigError(std::string("missing required option for key \"") + key +
                      "\" (flag or config file)");
  }
};

inline nn::NetworkSpec make_spec(const std::string& arch, int net_input) {
  if (arch == "resnet18") {
    nn::NetworkSpec spec = nn::NetworkSpec::resnet18();
    spec.input_size = net_input;
    return spec;
  }
  if (arch == "tiny") return nn::NetworkSpec::tiny(net_input);
  throw ConfigError("unknown arch \"" + arch + "\" (expected tiny or resnet18)");
}

inline void write_loss_curve(const std::filesystem::path& path,
                             const std::vector<double>& losses) {
  std::ofstream os(path);
  if (!os) throw DataError("cannot write " + path.string());
  os << "epoch,loss\n";
  char buf[64];
  for (std::size_t i = 0; i < losses.size(); ++i) {
    std::snprintf(buf, sizeof(buf), "%.17g", losses[i]);
    os << i << "," << buf << "\n";
  }
}

inline int infer_classes(const InMemoryDataset& data) {
  int max_label = -1;
  for (std::size_t i = 0; i < data.size(); ++i)
    max_label = std::max(max_label, data.item(i).expression);
  if (max_label < 1)
    throw DataError("dataset: fewer than two expression classes present");
  return max_label + 1;
}

template <typename T>
ExpertBank<T> load_bank(const std::filesystem::path& models,
                        const std::vector<int>& factors) {
  ExpertBank<T> bank;
  for (int f : factors)
    bank.experts.push_back(nn::load_network<T>(
        models / ("expert_x" + std::to_string(f) + ".ckpt")));
  bank.validate();
  return bank;
}

inline void check_net_input(int net_input_size, int dcfg_input,
                            const std::string& what) {
  if (net_input_size != dcfg_input)
    throw ConfigError(what + " expects " + std::to_string(net_input_size) +
                      "x" + std::to_string(net_input_size) +
                      " inputs but the pipeline is configured for " +
                      std::to_string(dcfg_input) + " (pass --net-input " +
                      std::to_string(net_input_size) + ")");
}

inline std::string fmt_pct2(double v) {
  char buf[32];
  std::snprintf(buf, sizeof(buf), "%.2f%%", v * 100.0);
  return buf;
}

}  // namespace detail

inline int run_impl(const std::vector<std::string>& args) {
  CLI::App app{"dynamic resolution guidance for multi-resolution image "
               "classification"};
  app.require_subcommand(1);

  // Shared flag storage. Only one subcommand parses, so reuse is safe.
  std::string config_path, dataset, output, input, models, method, arch,
      split, factors_str, extra_factors_str, splits_str, pool_site_str;
  int classes = 4, per_class = 500, test_per_class = 0, base_size = 100,
      net_input = 224, batch_size = 256, epochs = 80, factor = 0,
      expert_factor = 0, source_factor = 1, target_factor = 2;
  double lr = 3e-4, lambda = 1.0;
  std::uint64_t seed = 0;
  bool with_cross = false;
  std::string report_inputs, report_format = "both";

  auto add_config = [&](CLI::App* sub) {
    return sub->add_option("--config", config_path,
                           "key=value configuration file; explicit flags win");
  };

  CLI::App* synth = app.add_subcommand(
      "synth", "generate a procedural base corpus (train and test splits)");
  auto* synth_out = synth->add_option("--output,--output_dir", output,
                                      "corpus root directory");
  auto* synth_classes =
      synth->add_option("--classes", classes, "number of expression classes");
  auto* synth_per_class =
      synth->add_option("--per-class,--per_class", per_class,
                        "training images per class");
  auto* synth_test_per_class =
      synth->add_option("--test-per-class,--test_per_class", test_per_class,
                        "test images per class (default per-class/4)");
  auto* synth_base =
      synth->add_option("--base-size,--base_size", base_size,
                        "side length of generated images");
  auto* synth_seed = synth->add_option("--seed", seed, "corpus seed");
  add_config(synth);

  CLI::App* prepare = app.add_subcommand(
      "prepare", "degrade a base corpus into per-factor splits");
  auto* prep_in = prepare->add_option("--input", input, "base corpus root");
  auto* prep_out = prepare->add_option("--output,--output_dir", output,
                                       "prepared dataset root");
  auto* prep_splits = prepare->add_option(
      "--splits", splits_str, "comma-separated splits (default train,test)");
  auto* prep_factors = prepare->add_option(
      "--factors", factors_str, "downsample factor set (default 1,2,4,6,8)");
  auto* prep_extras = prepare->add_option(
      "--extra-factors,--extra_factors", extra_factors_str,
      "eval-only factors prepared for non-train splits (default 12,14,16)");
  auto* prep_base = prepare->add_option("--base-size,--base_size", base_size,
                                        "expected base image side length");
  auto* prep_net = prepare->add_option("--net-input,--net_input", net_input,
                                       "network input side length");
  add_config(prepare);

  auto add_train_common = [&](CLI::App* sub) {
    struct Opts {
      CLI::Option *dataset, *out, *factors, *base, *net, *arch, *batch, *lr,
          *epochs, *seed;
    } o;
    o.dataset = sub->add_option("--dataset,--dataset_root", dataset,
                                "prepared dataset root");
    o.out = sub->add_option("--output,--output_dir", output,
                            "checkpoint output directory");
    o.factors = sub->add_option("--factors", factors_str,
                                "trained factor set (default 1,2,4,6,8)");
    o.base = sub->add_option("--base-size,--base_size", base_size,
                             "base image side length");
    o.net = sub->add_option("--net-input,--net_input", net_input,
                            "network input side length");
    o.arch = sub->add_option("--arch", arch,
                             "backbone: resnet18 (default) or tiny");
    o.batch = sub->add_option("--batch-size,--batch_size", batch_size,
                              "mini-batch size");
    o.lr = sub->add_option("--lr", lr, "Adam learning rate");
    o.epochs = sub->add_option("--epochs", epochs, "training epochs");
    o.seed = sub->add_option("--seed", seed, "training seed");
    add_config(sub);
    return o;
  };

  CLI::App* train_rrn = app.add_subcommand(
      "train-rrn", "train the resolution recognition network");
  auto rrn_opts = add_train_common(train_rrn);

  CLI::App* train_expert = app.add_subcommand(
      "train-expert", "train one single-resolution expert classifier");
  auto expert_opts = add_train_common(train_expert);
  auto* expert_factor_opt = train_expert->add_option(
      "--factor", factor, "the downsample factor this expert owns");
  auto* expert_classes_opt = train_expert->add_option(
      "--classes", classes, "expression classes (default: inferred)");

  CLI::App* train_baseline = app.add_subcommand(
      "train-baseline", "train a comparison method (mstrain, rabn, da)");
  auto baseline_opts = add_train_common(train_baseline);
  auto* baseline_method_opt = train_baseline->add_option(
      "--method", method, "one of mstrain, rabn, da");
  auto* baseline_classes_opt = train_baseline->add_option(
      "--classes", classes, "expression classes (default: inferred)");
  auto* baseline_lambda_opt = train_baseline->add_option(
      "--lambda", lambda, "gradient-reversal coefficient (da)");
  auto* baseline_source_opt = train_baseline->add_option(
      "--source-factor,--source_factor", source_factor,
      "adaptation source factor (da, default 1)");
  auto* baseline_target_opt = train_baseline->add_option(
      "--target-factor,--target_factor", target_factor,
      "adaptation target factor (da, default 2)");

  CLI::App* eval = app.add_subcommand(
      "eval", "evaluate a method over a factor grid and write reports");
  auto* eval_method_opt = eval->add_option(
      "--method", method, "drg, drg-gt, expert, mean, max, mstrain, rabn, da");
  auto* eval_dataset_opt = eval->add_option("--dataset,--dataset_root", dataset,
                                            "prepared dataset root");
  auto* eval_models_opt =
      eval->add_option("--models", models, "checkpoint directory");
  auto* eval_out_opt = eval->add_option("--output,--output_dir", output,
                                        "report directory (default --models)");
  auto* eval_split_opt =
      eval->add_option("--split", split, "dataset split (default test)");
  auto* eval_factors_opt = eval->add_option(
      "--factors", factors_str, "factors to evaluate (default: trained set)");
  auto* eval_train_factors_opt = eval->add_option(
      "--train-factors,--train_factors", extra_factors_str,
      "trained factor set defining the expert bank (default 1,2,4,6,8)");
  auto* eval_base = eval->add_option("--base-size,--base_size", base_size,
                                     "base image side length");
  auto* eval_net = eval->add_option("--net-input,--net_input", net_input,
                                    "network input side length");
  auto* eval_batch = eval->add_option("--batch-size,--batch_size", batch_size,
                                      "evaluation batch size");
  auto* eval_expert_factor_opt = eval->add_option(
      "--expert-factor,--expert_factor", expert_factor,
      "which expert checkpoint to evaluate (method expert)");
  auto* eval_pool_site_opt = eval->add_option(
      "--pool-site,--pool_site", pool_site_str,
      "mean/max pooling site: logits (default) or probs");
  eval->add_flag("--cross", with_cross,
                 "also emit the expert cross-evaluation matrix");
  add_config(eval);

  CLI::App* report = app.add_subcommand(
      "report", "merge one or more report.csv files and re-render");
  auto* report_inputs_opt = report->add_option(
      "--inputs", report_inputs, "comma-separated report.csv paths");
  auto* report_out_opt = report->add_option("--output,--output_dir", output,
                                            "output directory");
  report->add_option("--format", report_format, "csv, md, or both (default)");
  add_config(report);

  app.add_subcommand("selftest", "run the property-check suite");

  // ---- parse ----
  std::vector<const char*> argv;
  argv.push_back("drg");
  for (const auto& a : args) argv.push_back(a.c_str());
  try {
    app.parse(static_cast<int>(argv.size()), argv.data());
  } catch (const CLI::ParseError& e) {
    if (e.get_exit_code() == 0) return app.exit(e);  // help text
    std::cerr << e.what() << "\n\n" << app.help();
    return 2;
  }

  const Config cfg = config_path.empty() ? Config{}
                                         : Config::parse_file(config_path);
  const detail::Effective eff{cfg};

  if (app.got_subcommand("selftest")) {
    const auto results = run_selftests(std::cout);
    for (const auto& r : results)
      if (!r.passed) return 1;
    return 0;
  }

  if (app.got_subcommand(synth)) {
    const std::string out = eff.require(synth_out, output, "output_dir");
    const int n_classes = eff.get(synth_classes, classes, "classes", 4);
    const int n_train = eff.get(synth_per_class, per_class, "per_class", 500);
    const int n_test = eff.get(synth_test_per_class, test_per_class,
                               "test_per_class", std::max(1, n_train / 4));
    const std::uint64_t s = eff.get(synth_seed, seed, "seed", std::uint64_t{0});
    DegradeConfig dcfg;
    dcfg.base_size = eff.get(synth_base, base_size, "base_size", 100);
    RngStream root(s);
    const RngStream train_rng = root.fork(1);
    const RngStream test_rng = root.fork(2);
    const std::filesystem::path root_dir(out);
    synth_corpus(root_dir / "train", "train", n_train, n_classes, dcfg,
                 train_rng);
    synth_corpus(root_dir / "test", "test", n_test, n_classes, dcfg, test_rng);
    std::cout << "wrote " << n_classes * n_train << " train and "
              << n_classes * n_test << " test images under " << out << "\n";
    return 0;
  }

  if (app.got_subcommand(prepare)) {
    const std::string in = eff.require(prep_in, input, "input");
    const std::string out = eff.require(prep_out, output, "output_dir");
    DegradeConfig dcfg;
    dcfg.base_size = eff.get(prep_base, base_size, "base_size", 100);
    dcfg.net_input_size = eff.get(prep_net, net_input, "net_input", 224);
    dcfg.factors =
        eff.get(prep_factors, factors_str, "factors", std::vector<int>{1, 2, 4, 6, 8});
    dcfg.eval_extra_factors = eff.get(prep_extras, extra_factors_str,
                                      "extra_factors", std::vector<int>{12, 14, 16});
    try {
      dcfg.validate();
    } catch (const std::invalid_argument& e) {
      throw ConfigError(e.what());
    }
    const std::string splits =
        eff.get(prep_splits, splits_str, "splits", std::string("train,test"));
    std::istringstream ss(splits);
    std::string one;
    bool prepared_train = false;
    while (std::getline(ss, one, ',')) {
      if (one.empty()) continue;
      const bool extras = one != "train";
      prepare_split(in, one, out, dcfg, extras);
      prepared_train = prepared_train || one == "train";
      std::cout << "prepared split " << one << (extras ? " (with extras)" : "")
                << "\n";
    }
    if (prepared_train) {
      const auto train_ds = InMemoryDataset::load(
          out, "train", InMemoryDataset::FactorSelect::degraded_only);
      train_ds.compute_stats().write(out);
      std::cout << "wrote normalization stats\n";
    }
    return 0;
  }

  // Remaining verbs share the degradation configuration.
  auto make_dcfg = [&](CLI::Option* factors_opt, CLI::Option* base_opt,
                       CLI::Option* net_opt) {
    DegradeConfig dcfg;
    dcfg.base_size = eff.get(base_opt, base_size, "base_size", 100);
    dcfg.net_input_size = eff.get(net_opt, net_input, "net_input", 224);
    dcfg.factors =
        eff.get(factors_opt, factors_str, "factors", std::vector<int>{1, 2, 4, 6, 8});
    try {
      dcfg.validate();
    } catch (const std::invalid_argument& e) {
      throw ConfigError(e.what());
    }
    return dcfg;
  };

  auto make_tcfg = [&](const auto& opts) {
    TrainConfig tc;
    tc.batch_size = eff.get(opts.batch, batch_size, "batch_size", 256);
    tc.lr = eff.get(opts.lr, lr, "lr", 3e-4);
    tc.epochs = eff.get(opts.epochs, epochs, "epochs", 80);
    tc.seed = eff.get(opts.seed, seed, "seed", std::uint64_t{0});
    tc.validate();
    return tc;
  };

  if (app.got_subcommand(train_rrn)) {
    const std::string data_root =
        eff.require(rrn_opts.dataset, dataset, "dataset_root");
    const std::string out = eff.require(rrn_opts.out, output, "output_dir");
    const DegradeConfig dcfg =
        make_dcfg(rrn_opts.factors, rrn_opts.base, rrn_opts.net);
    const TrainConfig tc = make_tcfg(rrn_opts);
    const std::string arch_name =
        eff.get(rrn_opts.arch, arch, "arch", std::string("resnet18"));

    const nn::NetworkSpec spec =
        detail::make_spec(arch_name, dcfg.net_input_size);
    const auto data = InMemoryDataset::load(
        data_root, "train", InMemoryDataset::FactorSelect::degraded_only);
    nn::ResNet<float> net(spec, dcfg.class_count());
    RngStream root(tc.seed);
    RngStream init_rng = root.fork(detail::kTagInit);
    net.init(init_rng);
    const TrainResult res =
        train_model(net, data, LabelOf::resolution, dcfg, tc);
    std::filesystem::create_directories(out);
    nn::save_checkpoint(std::filesystem::path(out) / "rrn.ckpt", net);
    detail::write_loss_curve(std::filesystem::path(out) / "loss_rrn.csv",
                             res.epoch_losses);
    std::cout << "trained rrn for " << tc.epochs << " epochs; final loss "
              << res.epoch_losses.back() << "\n";
    return 0;
  }

  if (app.got_subcommand(train_expert)) {
    const std::string data_root =
        eff.require(expert_opts.dataset, dataset, "dataset_root");
    const std::string out = eff.require(expert_opts.out, output, "output_dir");
    const DegradeConfig dcfg =
        make_dcfg(expert_opts.factors, expert_opts.base, expert_opts.net);
    const TrainConfig tc = make_tcfg(expert_opts);
    const std::string arch_name =
        eff.get(expert_opts.arch, arch, "arch", std::string("resnet18"));
    const int f = eff.get(expert_factor_opt, factor, "factor", 0);
    if (f == 0) throw ConfigError("train-expert: --factor is required");
    if (dcfg.resolution_of(f).extra)
      throw ConfigError("train-expert: factor x" + std::to_string(f) +
                        " is eval-only; experts exist for the trained set");

    const nn::NetworkSpec spec =
        detail::make_spec(arch_name, dcfg.net_input_size);
    const auto data = InMemoryDataset::load(
        data_root, "train", InMemoryDataset::FactorSelect::single, f);
    const int n_classes = expert_classes_opt->count() || cfg.has("classes")
                              ? eff.get(expert_classes_opt, classes, "classes", 4)
                              : detail::infer_classes(data);
    nn::ResNet<float> net(spec, n_classes);
    RngStream root(tc.seed);
    RngStream init_rng = root.fork(detail::kTagInit);
    net.init(init_rng);
    const TrainResult res =
        train_model(net, data, LabelOf::expression, dcfg, tc);
    std::filesystem::create_directories(out);
    const std::string name = "expert_x" + std::to_string(f);
    nn::save_checkpoint(std::filesystem::path(out) / (name + ".ckpt"), net);
    detail::write_loss_curve(
        std::filesystem::path(out) / ("loss_" + name + ".csv"),
        res.epoch_losses);
    std::cout << "trained " << name << " for " << tc.epochs
              << " epochs; final loss " << res.epoch_losses.back() << "\n";
    return 0;
  }

  if (app.got_subcommand(train_baseline)) {
    const std::string m = eff.require(baseline_method_opt, method, "method");
    const std::string data_root =
        eff.require(baseline_opts.dataset, dataset, "dataset_root");
    const std::string out =
        eff.require(baseline_opts.out, output, "output_dir");
    const DegradeConfig dcfg =
        make_dcfg(baseline_opts.factors, baseline_opts.base, baseline_opts.net);
    const TrainConfig tc = make_tcfg(baseline_opts);
    const std::string arch_name =
        eff.get(baseline_opts.arch, arch, "arch", std::string("resnet18"));
    const nn::NetworkSpec spec =
        detail::make_spec(arch_name, dcfg.net_input_size);
    std::filesystem::create_directories(out);
    RngStream root(tc.seed);
    RngStream init_rng = root.fork(detail::kTagInit);

    if (m == "mean" || m == "max")
      throw ConfigError(
          "train-baseline: " + m +
          " pooling has no trainable state; it pools the expert checkpoints "
          "at eval time (train the experts, then run eval --method " + m + ")");

    if (m == "mstrain") {
      const auto data = InMemoryDataset::load(
          data_root, "train", InMemoryDataset::FactorSelect::base_only);
      const int n_classes =
          baseline_classes_opt->count() || cfg.has("classes")
              ? eff.get(baseline_classes_opt, classes, "classes", 4)
              : detail::infer_classes(data);
      nn::ResNet<float> net(spec, n_classes);
      net.init(init_rng);
      const TrainResult res = train_model(net, data, LabelOf::expression, dcfg,
                                          tc, make_mstrain_view(dcfg));
      nn::save_checkpoint(std::filesystem::path(out) / "baseline_mstrain.ckpt",
                          net);
      detail::write_loss_curve(
          std::filesystem::path(out) / "loss_baseline_mstrain.csv",
          res.epoch_losses);
      std::cout << "trained mstrain baseline; final loss "
                << res.epoch_losses.back() << "\n";
      return 0;
    }

    if (m == "rabn") {
      const auto data = InMemoryDataset::load(
          data_root, "train", InMemoryDataset::FactorSelect::degraded_only);
      const int n_classes =
          baseline_classes_opt->count() || cfg.has("classes")
              ? eff.get(baseline_classes_opt, classes, "classes", 4)
              : detail::infer_classes(data);
      RaBnResNet<float> model(spec, n_classes, dcfg.class_count());
      model.init(init_rng);
      const TrainResult res = train_rabn(model, data, dcfg, tc);
      save_rabn(std::filesystem::path(out) / "baseline_rabn.ckpt", model);
      detail::write_loss_curve(
          std::filesystem::path(out) / "loss_baseline_rabn.csv",
          res.epoch_losses);
      std::cout << "trained rabn baseline; final loss "
                << res.epoch_losses.back() << "\n";
      return 0;
    }

    if (m == "da") {
      const double lam = eff.get(baseline_lambda_opt, lambda, "lambda", 1.0);
      if (lam < 0) throw ConfigError("train-baseline: lambda < 0");
      const int sf =
          eff.get(baseline_source_opt, source_factor, "source_factor", 1);
      const int tf =
          eff.get(baseline_target_opt, target_factor, "target_factor", 2);
      const auto source = InMemoryDataset::load(
          data_root, "train", InMemoryDataset::FactorSelect::single, sf);
      const auto target = InMemoryDataset::load(
          data_root, "train", InMemoryDataset::FactorSelect::single, tf);
      const int n_classes =
          baseline_classes_opt->count() || cfg.has("classes")
              ? eff.get(baseline_classes_opt, classes, "classes", 4)
              : detail::infer_classes(source);
      nn::ResNet<float> net(spec, n_classes);
      net.init(init_rng);
      DaHead<float> head(net.spec().feature_dim());
      RngStream head_rng = root.fork(detail::kTagInit | 1);
      head.init(head_rng);
      const DaTrainResult res = train_da(net, head, source, target, dcfg, tc, lam);
      nn::save_checkpoint(std::filesystem::path(out) / "baseline_da.ckpt", net);
      detail::write_loss_curve(
          std::filesystem::path(out) / "loss_baseline_da_task.csv",
          res.task_losses);
      detail::write_loss_curve(
          std::filesystem::path(out) / "loss_baseline_da_domain.csv",
          res.domain_losses);
      std::cout << "trained da baseline; final task loss "
                << res.task_losses.back() << "\n";
      return 0;
    }

    throw ConfigError("train-baseline: unknown method \"" + m +
                      "\" (expected mstrain, rabn or da)");
  }

  if (app.got_subcommand(eval)) {
    const std::string m = eff.require(eval_method_opt, method, "method");
    const std::string data_root =
        eff.require(eval_dataset_opt, dataset, "dataset_root");
    const std::string model_dir = eff.require(eval_models_opt, models, "models");
    const std::string out =
        eval_out_opt->count() || cfg.has("output_dir")
            ? eff.get(eval_out_opt, output, "output_dir", model_dir)
            : model_dir;
    const std::string split_name =
        eff.get(eval_split_opt, split, "split", std::string("test"));
    const int bsz = eff.get(eval_batch, batch_size, "batch_size", 64);

    DegradeConfig dcfg;
    dcfg.base_size = eff.get(eval_base, base_size, "base_size", 100);
    dcfg.net_input_size = eff.get(eval_net, net_input, "net_input", 224);
    dcfg.factors = eff.get(eval_train_factors_opt, extra_factors_str,
                           "train_factors", std::vector<int>{1, 2, 4, 6, 8});
    dcfg.eval_extra_factors.clear();
    try {
      dcfg.validate();
    } catch (const std::invalid_argument& e) {
      throw ConfigError(e.what());
    }

    const std::vector<int> grid =
        eff.get(eval_factors_opt, factors_str, "factors", dcfg.factors);
    // Any grid factor outside the trained set counts as eval-only extra.
    for (int f : grid) {
      bool known = false;
      for (int t : dcfg.factors) known = known || t == f;
      if (!known) dcfg.eval_extra_factors.push_back(f);
    }

    const EvalSplit eval_split = EvalSplit::load(data_root, split_name);
    const std::filesystem::path mdir(model_dir);
    std::filesystem::create_directories(out);
    std::vector<EvalReport> reports;

    if (m == "drg" || m == "drg-gt") {
      ExpertBank<float> bank = detail::load_bank<float>(mdir, dcfg.factors);
      detail::check_net_input(bank.experts.front().spec().input_size,
                              dcfg.net_input_size, "expert bank");
      const bool gt = m == "drg-gt";
      std::optional<nn::ResNet<float>> rrn;
      if (!gt) {
        rrn.emplace(nn::load_network<float>(mdir / "rrn.ckpt"));
        detail::check_net_input(rrn->spec().input_size, dcfg.net_input_size,
                                "rrn");
      }
      EvalReport rep = eval_drg_grid(gt ? nullptr : &*rrn, bank, eval_split,
                                     grid, dcfg, gt, m, bsz);
      if (with_cross)
        rep.cross = cross_matrix(bank, dcfg.factors, eval_split, grid, dcfg, bsz);
      reports.push_back(std::move(rep));

      if (!gt) {
        // Route and prediction dumps over the evaluated factors, in split
        // order within each factor.
        std::vector<std::size_t> all_idx;
        for (int f : grid)
          for (std::size_t i : eval_split.indices_for(f)) all_idx.push_back(i);
        std::vector<RoutePrediction> routes;
        for (std::size_t start = 0; start < all_idx.size();
             start += static_cast<std::size_t>(bsz)) {
          const std::size_t end = std::min(
              all_idx.size(), start + static_cast<std::size_t>(bsz));
          const Batch b =
              make_eval_batch(eval_split.data, all_idx, start, end, dcfg);
          const Tensor<float> images = pack_images(b);
          for (auto& p : rrn_predict(*rrn, images, bank.size()))
            routes.push_back(p);
        }
        write_route_dump(std::filesystem::path(out) / "routes.csv", all_idx,
                         routes);
        const DrgBatchResult preds = predict_drg(
            &*rrn, bank, eval_split.data, all_idx, dcfg, false, bsz);
        std::ofstream pf(std::filesystem::path(out) / "predictions.csv");
        if (!pf) throw DataError("cannot write predictions.csv under " + out);
        pf << "original_index,routed_factor,predicted_expression,true_expression\n";
        for (std::size_t i = 0; i < all_idx.size(); ++i)
          pf << all_idx[i] << ","
             << dcfg.factors[static_cast<std::size_t>(preds.routed_classes[i])]
             << "," << preds.expressions[i] << ","
             << eval_split.data.item(all_idx[i]).expression << "\n";
      }
    } else if (m == "mean" || m == "max") {
      ExpertBank<float> bank = detail::load_bank<float>(mdir, dcfg.factors);
      detail::check_net_input(bank.experts.front().spec().input_size,
                              dcfg.net_input_size, "expert bank");
      const std::string site_name = eff.get(eval_pool_site_opt, pool_site_str,
                                            "pool_site", std::string("logits"));
      PoolSite site;
      if (site_name == "logits")
        site = PoolSite::logits;
      else if (site_name == "probs")
        site = PoolSite::probabilities;
      else
        throw ConfigError("eval: pool site must be logits or probs");
      EvalReport rep = eval_pool_grid(
          bank, m == "mean" ? PoolMode::mean : PoolMode::max, site, eval_split,
          grid, dcfg, m, bsz);
      if (with_cross)
        rep.cross = cross_matrix(bank, dcfg.factors, eval_split, grid, dcfg, bsz);
      reports.push_back(std::move(rep));
    } else if (m == "expert") {
      const int f = eff.get(eval_expert_factor_opt, expert_factor,
                            "expert_factor", 0);
      if (f == 0) throw ConfigError("eval: --expert-factor is required");
      nn::ResNet<float> net = nn::load_network<float>(
          mdir / ("expert_x" + std::to_string(f) + ".ckpt"));
      detail::check_net_input(net.spec().input_size, dcfg.net_input_size,
                              "expert");
      reports.push_back(eval_model_grid(net, eval_split, grid, dcfg,
                                        "expert_x" + std::to_string(f), bsz));
    } else if (m == "mstrain" || m == "da") {
      nn::ResNet<float> net = nn::load_network<float>(
          mdir / ("baseline_" + m + ".ckpt"));
      detail::check_net_input(net.spec().input_size, dcfg.net_input_size, m);
      reports.push_back(eval_model_grid(net, eval_split, grid, dcfg, m, bsz));
    } else if (m == "rabn") {
      RaBnResNet<float> model = load_rabn<float>(mdir / "baseline_rabn.ckpt");
      reports.push_back(eval_rabn_grid(model, eval_split, grid, dcfg, m, bsz));
    } else {
      throw ConfigError("eval: unknown method \"" + m + "\"");
    }

    write_report(out, reports);
    std::cout << "wrote report for " << m << " to " << out << "\n";
    for (const auto& r : reports) {
      for (const auto& [f, acc] : r.per_factor)
        std::cout << "  x" << f << ": " << detail::fmt_pct2(acc) << "\n";
      std::cout << "  mean: " << detail::fmt_pct2(r.mean_accuracy) << "\n";
      if (r.route_accuracy)
        std::cout << "  route accuracy: " << detail::fmt_pct2(*r.route_accuracy)
                  << "\n";
    }
    return 0;
  }

  if (app.got_subcommand(report)) {
    const std::string inputs =
        eff.require(report_inputs_opt, report_inputs, "inputs");
    const std::string out = eff.require(report_out_opt, output, "output_dir");
    std::vector<EvalReport> merged;
    std::istringstream ss(inputs);
    std::string one;
    while (std::getline(ss, one, ',')) {
      if (one.empty()) continue;
      for (auto& r : parse_report(one)) merged.push_back(std::move(r));
    }
    if (merged.empty()) throw ConfigError("report: no input reports given");
    std::filesystem::create_directories(out);
    const std::string fmt = report_format;
    if (fmt != "csv" && fmt != "md" && fmt != "both")
      throw ConfigError("report: format must be csv, md or both");
    if (fmt == "csv" || fmt == "both")
      write_report_csv(std::filesystem::path(out) / "report.csv", merged);
    if (fmt == "md" || fmt == "both")
      write_report_md(std::filesystem::path(out) / "report.md", merged);
    std::cout << "merged " << merged.size() << " method report(s) into " << out
              << "\n";
    return 0;
  }

  std::cerr << app.help();
  return 2;
}

/// Entry point used by main() and by tests. Maps the error taxonomy onto
/// exit codes: 0 ok, 2 configuration/usage, 3 data, 4 numeric.
inline int run(const std::vector<std::string>& args) {
  try {
    return run_impl(args);
  } catch (const ConfigError& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return 2;
  } catch (const DataError& e) {
    std::cerr << "data error: " << e.what() << "\n";
    return 3;
  } catch (const NumericError& e) {
    std::cerr << "numeric error: " << e.what() << "\n";
    return 4;
  } catch (const std::invalid_argument& e) {
    std::cerr << "argument error: " << e.what() << "\n";
    return 2;
  } catch (const std::logic_error& e) {
    std::cerr << "contract error: " << e.what() << "\n";
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
}

}  // namespace drg::cli
