#include "stecnn/harness.hpp"

#include <doctest.h>

#include <cstdio>
#include <filesystem>
#include <sstream>

using namespace stecnn;

namespace {

struct TempFile {
  std::string path;
  explicit TempFile(const std::string& name) {
    path = (std::filesystem::temp_directory_path() / name).string();
  }
  ~TempFile() { std::remove(path.c_str()); }
};

RunConfig tiny_synthetic_config() {
  RunConfig cfg;
  cfg.model.kind = ModelKind::EquiOneDCNN;
  cfg.model.equi_onedcnn.lift_channels = 4;
  cfg.model.equi_onedcnn.gconv_channels = {6};
  cfg.model.equi_onedcnn.head_hidden = {16};
  cfg.epochs = 2;
  cfg.batch_size = 32;
  cfg.seed = 5;
  cfg.data.synthetic.length = 96 * kWindowLength;
  return cfg;
}

}  // namespace

TEST_SUITE("mann_whitney") {
  TEST_CASE("small-sample enumeration reproduces 2/6") {
    std::vector<double> a{1, 2}, b{3, 4};
    const auto result = mann_whitney_u(a, b);
    CHECK(result.exact);
    CHECK(result.u == doctest::Approx(0.0));
    CHECK(result.p == doctest::Approx(2.0 / 6.0).epsilon(1e-12));
    CHECK_FALSE(result.significant);
  }

  TEST_CASE("identical samples are a symmetric null") {
    std::vector<double> a{1, 2}, b{1, 2};
    const auto result = mann_whitney_u(a, b);
    CHECK(result.u == doctest::Approx(2.0));  // n_a n_b / 2 with tie credit
    CHECK(result.p == doctest::Approx(1.0));
  }

  TEST_CASE("clearly separated large samples are significant") {
    std::vector<double> a, b;
    for (int i = 0; i < 10; ++i) {
      a.push_back(static_cast<double>(i));
      b.push_back(static_cast<double>(i) + 100.0);
    }
    const auto result = mann_whitney_u(a, b);
    CHECK_FALSE(result.exact);
    CHECK(result.p < 0.05);
    CHECK(result.significant);
  }

  TEST_CASE("exact and normal branches agree on random 6v6 samples") {
    Rng rng(41);
    for (int trial = 0; trial < 50; ++trial) {
      std::vector<double> a(6), b(6);
      for (int i = 0; i < 6; ++i) {
        a[static_cast<std::size_t>(i)] = rng.normal();
        b[static_cast<std::size_t>(i)] = rng.normal() + rng.uniform();
      }
      const auto exact = mann_whitney_exact(a, b);
      const auto approx = mann_whitney_normal(a, b);
      CHECK(std::abs(exact.p - approx.p) <= 0.05);
    }
  }

  TEST_CASE("empty samples rejected") {
    std::vector<double> a{1.0}, empty;
    CHECK_THROWS(mann_whitney_u(a, empty));
  }
}

TEST_SUITE("checkpoint") {
  TEST_CASE("save and load round trip bit-exactly") {
    TempFile file("stecnn_roundtrip.ckpt");
    ModelConfig cfg;
    cfg.kind = ModelKind::OneDCNN;
    auto model = build_model<float>(cfg, 77);
    CheckpointProvenance prov{fnv1a_hash("test"), 77, "supervised"};
    save_model_checkpoint(file.path, *model, prov);

    const auto loaded = load_checkpoint<float>(file.path);
    CHECK(loaded.provenance.stage == "supervised");
    CHECK(loaded.provenance.seed == 77);
    CHECK(loaded.provenance.config_hash == prov.config_hash);
    auto& named = model->named_tensors();
    REQUIRE(loaded.tensors.size() == named.size());
    for (std::size_t i = 0; i < named.size(); ++i) {
      CHECK(loaded.tensors[i].first == named[i].first);
      CHECK((loaded.tensors[i].second.values() == named[i].second.values()).all());
    }

    // Forward outputs bitwise unchanged after reload into a fresh model.
    auto reloaded = build_model<float>(cfg, 1234);
    load_into_model(loaded, *reloaded);
    Rng rng(3);
    auto x = Tensor<float>::uniform({3, kNumFeatures, kWindowLength}, -1.0f, 1.0f, rng);
    NoGrad ng;
    model->eval();
    reloaded->eval();
    CHECK((model->forward(x).values() == reloaded->forward(x).values()).all());
  }

  TEST_CASE("corrupted magic is not a checkpoint") {
    TempFile file("stecnn_magic.ckpt");
    std::ofstream(file.path) << "NOPEnothing";
    try {
      load_checkpoint<float>(file.path);
      FAIL("expected an error");
    } catch (const std::runtime_error& e) {
      CHECK(std::string(e.what()).find("not a checkpoint") != std::string::npos);
    }
  }

  TEST_CASE("loading into a mismatched model names the tensor") {
    TempFile file("stecnn_mismatch.ckpt");
    ModelConfig big;
    big.kind = ModelKind::EquiOneDCNN;
    auto source = build_model<float>(big, 1);
    save_model_checkpoint(file.path, *source, {0, 1, "supervised"});
    ModelConfig other;
    other.kind = ModelKind::Mlp;
    auto target = build_model<float>(other, 2);
    try {
      load_into_model(load_checkpoint<float>(file.path), *target);
      FAIL("expected an error");
    } catch (const std::runtime_error& e) {
      CHECK(std::string(e.what()).find("trunk.lift") != std::string::npos);
    }
  }

  TEST_CASE("precision mismatch rejected") {
    TempFile file("stecnn_dtype.ckpt");
    std::vector<std::pair<std::string, Tensor<double>>> tensors;
    tensors.emplace_back("trunk.w", Tensor<double>::ones({3}));
    save_checkpoint(file.path, tensors, {0, 0, "pretrain"});
    CHECK_THROWS(load_checkpoint<float>(file.path));
    CHECK_NOTHROW(load_checkpoint<double>(file.path));
  }
}

TEST_SUITE("train_supervised") {
  TEST_CASE("zero epochs keep the evaluation at its fresh-init value") {
    auto cfg = tiny_synthetic_config();
    const auto samples = load_windows(cfg);
    auto model_a = build_model<float>(cfg.model, 9);
    auto model_b = build_model<float>(cfg.model, 9);
    TrainOptions opt{cfg.batch_size, 0, cfg.lr, 3};
    const auto losses = train_supervised(*model_a, samples, opt);
    CHECK(losses.empty());
    const auto ra = evaluate(*model_a, samples);
    const auto rb = evaluate(*model_b, samples);
    CHECK(ra.acc.at(0) == rb.acc.at(0));
    CHECK(ra.mauc == doctest::Approx(rb.mauc).epsilon(1e-12));
  }

  TEST_CASE("loss curves are byte-identical across reruns with one seed") {
    auto cfg = tiny_synthetic_config();
    const auto samples = load_windows(cfg);
    TrainOptions opt{cfg.batch_size, 3, cfg.lr, 11};
    auto model_a = build_model<float>(cfg.model, 13);
    auto model_b = build_model<float>(cfg.model, 13);
    const auto la = train_supervised(*model_a, samples, opt);
    const auto lb = train_supervised(*model_b, samples, opt);
    REQUIRE(la.size() == lb.size());
    for (std::size_t i = 0; i < la.size(); ++i) CHECK(la[i] == lb[i]);
  }

  TEST_CASE("training on a separable synthetic set reduces the loss") {
    auto cfg = tiny_synthetic_config();
    cfg.data.synthetic.length = 192 * kWindowLength;
    const auto raw = load_windows(cfg);
    const auto samples = standardize_windows(raw, window_stats(raw));
    auto model = build_model<float>(cfg.model, 21);
    TrainOptions opt{64, 12, 1e-3, 17};
    const auto losses = train_supervised(*model, samples, opt);
    REQUIRE(losses.size() == 12);
    CHECK(losses.back() < losses.front());
  }
}

TEST_SUITE("crossval") {
  TEST_CASE("aggregate means equal an independent recomputation") {
    auto cfg = tiny_synthetic_config();
    const auto report = crossval<float>(cfg);
    REQUIRE(report.splits.size() == 10);
    for (const auto& name : crossval_metric_names()) {
      const auto column = metric_column(report, name);
      double mean = 0;
      for (double v : column) mean += v;
      mean /= static_cast<double>(column.size());
      CHECK(mean_std(column).first == doctest::Approx(mean).epsilon(1e-12));
    }
    const json j = to_json(report);
    CHECK(j["aggregate"]["g_mean"].contains("display"));
  }

  TEST_CASE("identical invocations serialize identically") {
    auto cfg = tiny_synthetic_config();
    const auto a = to_json(crossval<float>(cfg)).dump(2);
    const auto b = to_json(crossval<float>(cfg)).dump(2);
    CHECK(a == b);
  }

  TEST_CASE("comparing a report against itself gives p = 1") {
    auto cfg = tiny_synthetic_config();
    const json j = to_json(crossval<float>(cfg));
    const auto comparisons = compare_reports(j, j);
    CHECK(!comparisons.empty());
    for (const auto& cmp : comparisons) {
      CHECK(cmp.test.p == doctest::Approx(1.0));
      CHECK_FALSE(cmp.test.significant);
    }
  }
}

TEST_SUITE("config") {
  TEST_CASE("well-formed file parses into a run configuration") {
    std::istringstream in(
        "# experiment\n"
        "[run]\n"
        "model = equiresnet\n"
        "seed = 9\n"
        "epochs = 25\n"
        "batch = 64\n"
        "lr = 1e-3\n"
        "[data]\n"
        "source = synthetic\n"
        "length = 1600\n"
        "positive_fraction = 0.25\n"
        "[model]\n"
        "preset = paper\n"
        "num_scales = 2\n"
        "[pretrain]\n"
        "tau = 0.5\n"
        "epochs = 3\n");
    const auto cfg = parse_run_config(in, "test");
    CHECK(cfg.model.kind == ModelKind::EquiResNet);
    CHECK(cfg.seed == 9);
    CHECK(cfg.resolved_epochs() == 25);
    CHECK(cfg.batch_size == 64);
    CHECK(cfg.lr == doctest::Approx(1e-3));
    CHECK(cfg.data.synthetic.length == 1600);
    CHECK(cfg.model.equiresnet.blocks == std::vector<int>{3, 4, 6, 3});
    CHECK(cfg.model.equiresnet.num_scales == 2);
    CHECK(cfg.pretrain.tau == doctest::Approx(0.5));
    CHECK(cfg.pretrain.epochs == 3);
  }

  TEST_CASE("unknown keys are errors") {
    std::istringstream in("[run]\nmodle = mlp\n");
    try {
      parse_run_config(in, "test");
      FAIL("expected an error");
    } catch (const std::runtime_error& e) {
      CHECK(std::string(e.what()).find("modle") != std::string::npos);
    }
  }

  TEST_CASE("unknown sections and duplicate keys are errors") {
    std::istringstream bad_section("[optimizer]\nlr = 1\n");
    CHECK_THROWS(parse_run_config(bad_section, "test"));
    std::istringstream dup("[run]\nseed = 1\nseed = 2\n");
    CHECK_THROWS(parse_run_config(dup, "test"));
  }

  TEST_CASE("epoch defaults follow the model kind") {
    RunConfig cfg;
    cfg.model.kind = ModelKind::Mlp;
    CHECK(cfg.resolved_epochs() == 200);
    cfg.model.kind = ModelKind::EquiResNet;
    CHECK(cfg.resolved_epochs() == 400);
    cfg.epochs = 7;
    CHECK(cfg.resolved_epochs() == 7);
  }

  TEST_CASE("fingerprint changes with the configuration") {
    RunConfig a;
    RunConfig b;
    b.seed = 1;
    RunConfig c;
    c.model.kind = ModelKind::Mlp;
    CHECK(config_fingerprint(a) != config_fingerprint(b));
    CHECK(config_fingerprint(a) != config_fingerprint(c));
  }
}

TEST_SUITE("standardize_windows") {
  TEST_CASE("training-fold statistics standardize the fold") {
    RunConfig cfg = tiny_synthetic_config();
    const auto raw = load_windows(cfg);
    const auto stats = window_stats(raw);
    const auto out = standardize_windows(raw, stats);
    // Recompute stats over the standardized windows: mean 0, std 1 (or a
    // zeroed degenerate row).
    const auto post = window_stats(out);
    for (Index f = 0; f < kNumFeatures; ++f) {
      if (stats.stddev[f] < 1e-12) {
        CHECK(post.stddev[f] == 0.0);
      } else {
        CHECK(post.mean[f] == doctest::Approx(0.0).epsilon(1e-9));
        CHECK(post.stddev[f] == doctest::Approx(1.0).epsilon(1e-9));
      }
    }
    for (std::size_t i = 0; i < raw.size(); ++i) CHECK(out[i].y == raw[i].y);
  }
}
