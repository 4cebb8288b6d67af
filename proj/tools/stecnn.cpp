#include "stecnn/gradcheck.hpp"
#include "stecnn/harness.hpp"

#include <CLI11.hpp>

#include <cstdio>
#include <fstream>
#include <iostream>

namespace {

using namespace stecnn;

void write_text(const std::string& path, const std::string& text) {
  std::ofstream out(path);
  if (!out) fail_runtime("cannot open ", path, " for writing");
  out << text;
  if (!out) fail_runtime("write to ", path, " failed");
}

json read_json(const std::string& path) {
  std::ifstream in(path);
  if (!in) fail_runtime("cannot open ", path);
  json j;
  in >> j;
  return j;
}

CheckpointProvenance provenance_for(const RunConfig& cfg, const std::string& stage) {
  return {fnv1a_hash(config_fingerprint(cfg)), cfg.seed, stage};
}

std::vector<WindowSample> standardized_windows(const RunConfig& cfg,
                                               StandardizationStats* stats_out) {
  const auto raw = load_windows(cfg);
  if (cfg.data.global_standardization) {
    // Track was already standardized globally inside load_windows.
    if (stats_out != nullptr) {
      stats_out->mean.setZero();
      stats_out->stddev.setOnes();
    }
    return raw;
  }
  const auto stats = window_stats(raw);
  if (stats_out != nullptr) *stats_out = stats;
  return standardize_windows(raw, stats);
}

int run_synth(const std::string& config_path, const std::string& out_path) {
  RunConfig cfg = load_run_config(config_path);
  SyntheticConfig synth = cfg.data.synthetic;
  if (cfg.data.seed_from_run) synth.seed = Rng::derive_seed(cfg.seed, 0xDA7AULL);
  const auto track = synthesize(synth);
  save_csv(track, out_path);
  const auto samples = windowize(track);
  Index positives = 0;
  for (const auto& s : samples) positives += s.y != 0 ? 1 : 0;
  std::printf("wrote %s: %lld locations, %zu windows, %.2f%% positive\n", out_path.c_str(),
              static_cast<long long>(track.length()), samples.size(),
              100.0 * static_cast<double>(positives) / static_cast<double>(samples.size()));
  return 0;
}

int run_train(const std::string& config_path, const std::string& ckpt_path,
              const std::string& report_path) {
  RunConfig cfg = load_run_config(config_path);
  StandardizationStats stats;
  const auto samples = standardized_windows(cfg, &stats);
  auto model = build_model<float>(cfg.model, cfg.seed);
  if (!cfg.pretrain_checkpoint.empty())
    transfer(load_checkpoint<float>(cfg.pretrain_checkpoint).tensor_map(), *model);
  TrainOptions opt{cfg.batch_size, cfg.resolved_epochs(), cfg.lr,
                   Rng::derive_seed(cfg.seed, 0x7121ULL)};
  const auto losses = train_supervised(*model, samples, opt);

  auto tensors = model->named_tensors();
  tensors.emplace_back("norm.mean", Tensor<float>::from_flat(
                                        {6}, {static_cast<float>(stats.mean[0]),
                                              static_cast<float>(stats.mean[1]),
                                              static_cast<float>(stats.mean[2]),
                                              static_cast<float>(stats.mean[3]),
                                              static_cast<float>(stats.mean[4]),
                                              static_cast<float>(stats.mean[5])}));
  tensors.emplace_back("norm.stddev", Tensor<float>::from_flat(
                                          {6}, {static_cast<float>(stats.stddev[0]),
                                                static_cast<float>(stats.stddev[1]),
                                                static_cast<float>(stats.stddev[2]),
                                                static_cast<float>(stats.stddev[3]),
                                                static_cast<float>(stats.stddev[4]),
                                                static_cast<float>(stats.stddev[5])}));
  save_checkpoint(ckpt_path, tensors, provenance_for(cfg, "supervised"));
  std::printf("wrote %s (%lld parameters)\n", ckpt_path.c_str(),
              static_cast<long long>(model->parameter_count()));

  if (!report_path.empty()) {
    json j;
    j["model"] = to_string(cfg.model.kind);
    j["seed"] = cfg.seed;
    j["epochs"] = losses.size();
    j["loss_curve"] = losses;
    const auto report = evaluate(*model, samples, cfg.eval_ks);
    j["train_set_metrics"] = to_json(report);
    write_text(report_path, j.dump(2) + "\n");
    std::printf("wrote %s\n", report_path.c_str());
  }
  return 0;
}

int run_pretrain(const std::string& config_path, const std::string& ckpt_path) {
  RunConfig cfg = load_run_config(config_path);
  const auto samples = standardized_windows(cfg, nullptr);
  auto model = build_model<float>(cfg.model, cfg.seed);
  PretrainConfig pc = cfg.pretrain;
  pc.seed = cfg.seed;
  const auto result = pretrain(*model, samples, pc);

  std::vector<std::pair<std::string, Tensor<float>>> trunk;
  for (auto& [name, t] : model->named_tensors())
    if (name.rfind("trunk.", 0) == 0) trunk.emplace_back(name, t);
  save_checkpoint(ckpt_path, trunk, provenance_for(cfg, "pretrain"));
  if (!result.epoch_losses.empty())
    std::printf("pretrain loss: first epoch %.4f, last epoch %.4f\n", result.epoch_losses.front(),
                result.epoch_losses.back());
  std::printf("wrote %s (%zu trunk tensors)\n", ckpt_path.c_str(), trunk.size());
  return 0;
}

int run_crossval(const std::string& config_path, const std::string& report_path) {
  RunConfig cfg = load_run_config(config_path);
  const auto report = crossval<float>(cfg);
  const json j = to_json(report);
  write_text(report_path, j.dump(2) + "\n");
  for (const auto& name : crossval_metric_names())
    std::printf("%-8s %s\n", name.c_str(), j["aggregate"][name]["display"].get<std::string>().c_str());
  std::printf("wrote %s\n", report_path.c_str());
  return 0;
}

int run_eval(const std::string& config_path, const std::string& ckpt_path,
             const std::string& report_path) {
  RunConfig cfg = load_run_config(config_path);
  auto ckpt = load_checkpoint<float>(ckpt_path);

  // Peel off the stored feature statistics, if any; the rest is model state.
  StandardizationStats stats;
  bool have_stats = false;
  Checkpoint<float> model_state;
  model_state.provenance = ckpt.provenance;
  for (auto& [name, t] : ckpt.tensors) {
    if (name == "norm.mean") {
      for (Index f = 0; f < 6; ++f) stats.mean[f] = t[f];
      have_stats = true;
    } else if (name == "norm.stddev") {
      for (Index f = 0; f < 6; ++f) stats.stddev[f] = t[f];
    } else {
      model_state.tensors.emplace_back(name, t);
    }
  }

  const auto raw = load_windows(cfg);
  const auto samples = have_stats && !cfg.data.global_standardization
                           ? standardize_windows(raw, stats)
                           : (cfg.data.global_standardization
                                  ? raw
                                  : standardize_windows(raw, window_stats(raw)));

  auto model = build_model<float>(cfg.model, cfg.seed);
  load_into_model(model_state, *model);
  const auto report = evaluate(*model, samples, cfg.eval_ks);
  const json j = to_json(report);
  std::printf("%s\n", j.dump(2).c_str());
  if (!report_path.empty()) write_text(report_path, j.dump(2) + "\n");
  return 0;
}

int run_equicheck(const std::string& config_path) {
  RunConfig cfg = load_run_config(config_path);
  const auto& e = cfg.model.equi_onedcnn;
  const ScaleGrid grid(e.num_scales);
  Rng rng(cfg.seed);

  double shift_err = 0, scale_err = 0;
  auto base = Tensor<double>::uniform({e.lift_channels, kNumFeatures, e.kernel_size}, -1.0, 1.0,
                                      rng);
  auto gw = Tensor<double>::uniform(
      {e.gconv_channels[0], e.lift_channels, e.scale_kernel_size, e.kernel_size}, -1.0, 1.0, rng);
  for (int draw = 0; draw < 5; ++draw) {
    auto x = Tensor<double>::randn({2, kNumFeatures, kWindowLength}, rng);
    auto lift_layer = [&](const Tensor<double>& v) {
      return lift(v, base, grid, Padding::Circular);
    };
    auto stack = [&](const Tensor<double>& v) {
      return project(group_conv(lift(v, base, grid, Padding::Circular), gw, grid,
                                Padding::Circular),
                     e.projection);
    };
    for (Index t = 0; t < kWindowLength; ++t) {
      shift_err = std::max(shift_err,
                           check_equivariance<double>(stack, x, GroupTransform::Shift, t));
    }
    scale_err = std::max(scale_err,
                         check_equivariance<double>(lift_layer, x, GroupTransform::DyadicScale));
  }

  double grad_err = 0;
  {
    auto x = Tensor<double>::uniform({2, kNumFeatures, kWindowLength}, -1.0, 1.0, rng);
    std::vector<int> labels{3, 0};
    ModelConfig mc = cfg.model;
    mc.kind = ModelKind::EquiOneDCNN;
    auto model = build_model<double>(mc, cfg.seed);
    grad_err = fd_gradcheck(
        [&](const Tensor<double>& v) { return softmax_cross_entropy(model->forward(v), labels); },
        x);
  }

  std::printf("translation equivariance max abs error: %.3e\n", shift_err);
  std::printf("dyadic scale covariance max abs error:  %.3e\n", scale_err);
  std::printf("end-to-end gradient max relative error: %.3e\n", grad_err);
  const bool ok = shift_err <= 1e-12 && scale_err <= 1e-12 && grad_err < 1e-4;
  std::printf("%s\n", ok ? "OK" : "FAILED");
  return ok ? 0 : 2;
}

int run_compare(const std::string& path_a, const std::string& path_b) {
  const json a = read_json(path_a);
  const json b = read_json(path_b);
  const auto comparisons = compare_reports(a, b);
  if (comparisons.empty()) fail_runtime("compare: reports share no metrics");
  std::printf("%-8s %10s %10s %8s %10s %s\n", "metric", "mean_a", "mean_b", "U", "p", "sig");
  for (const auto& cmp : comparisons) {
    std::printf("%-8s %10.4f %10.4f %8.1f %10.4f %s\n", cmp.metric.c_str(), cmp.mean_a, cmp.mean_b,
                cmp.test.u, cmp.test.p, cmp.test.significant ? "*" : "");
  }
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"scale-translation equivariant 1D CNNs for windowed track localization"};
  app.require_subcommand(1);

  std::string config_path, out_path, ckpt_path, report_path, path_a, path_b;

  auto* synth = app.add_subcommand("synth", "generate a synthetic track as CSV");
  synth->add_option("--config", config_path, "run configuration file")->required();
  synth->add_option("--out", out_path, "output CSV path")->required();

  auto* train = app.add_subcommand("train", "supervised training on the configured dataset");
  train->add_option("--config", config_path, "run configuration file")->required();
  train->add_option("--checkpoint", ckpt_path, "output checkpoint path")->required();
  train->add_option("--report", report_path, "optional JSON report path");

  auto* pre = app.add_subcommand("pretrain", "contrastive pre-training of the model trunk");
  pre->add_option("--config", config_path, "run configuration file")->required();
  pre->add_option("--checkpoint", ckpt_path, "output checkpoint path")->required();

  auto* cv = app.add_subcommand("crossval", "5x2 cross-validation with aggregated metrics");
  cv->add_option("--config", config_path, "run configuration file")->required();
  cv->add_option("--report", report_path, "output JSON report path")->required();

  auto* ev = app.add_subcommand("eval", "score a checkpoint on the configured dataset");
  ev->add_option("--config", config_path, "run configuration file")->required();
  ev->add_option("--checkpoint", ckpt_path, "checkpoint to evaluate")->required();
  ev->add_option("--report", report_path, "optional JSON report path");

  auto* eq = app.add_subcommand("equicheck", "equivariance and gradient verification");
  eq->add_option("--config", config_path, "run configuration file")->required();

  auto* cmp = app.add_subcommand("compare", "Mann-Whitney comparison of two crossval reports");
  cmp->add_option("report_a", path_a, "first report")->required();
  cmp->add_option("report_b", path_b, "second report")->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return e.get_exit_code() == 0 ? 0 : 1;
  }

  try {
    if (*synth) return run_synth(config_path, out_path);
    if (*train) return run_train(config_path, ckpt_path, report_path);
    if (*pre) return run_pretrain(config_path, ckpt_path);
    if (*cv) return run_crossval(config_path, report_path);
    if (*ev) return run_eval(config_path, ckpt_path, report_path);
    if (*eq) return run_equicheck(config_path);
    if (*cmp) return run_compare(path_a, path_b);
  } catch (const std::invalid_argument& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 1;
  } catch (const std::exception& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 2;
  }
  return 1;
}
