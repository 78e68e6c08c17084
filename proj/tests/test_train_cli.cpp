#include <doctest.h>
#include <json.hpp>

#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <limits>
#include <sstream>
#include <string>
#include <vector>

#include "rcc/png_io.hpp"
#include "rcc/serialize.hpp"
#include "rcc/train.hpp"
#include "testutil.hpp"

using namespace rcc;
using testutil::contains;
using testutil::max_abs_diff;
using testutil::thrown_message;

namespace fs = std::filesystem;

namespace {

fs::path fresh_root(const std::string& tag) {
  fs::path root = fs::temp_directory_path() / ("rcc_train_" + tag);
  fs::remove_all(root);
  fs::create_directories(root);
  return root;
}

std::string slurp(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  REQUIRE(in.is_open());
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

void spill(const fs::path& path, const std::string& bytes) {
  std::ofstream out(path, std::ios::binary);
  REQUIRE(out.is_open());
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
}

ModelConfig tiny_model_config() {
  ModelConfig cfg;
  cfg.backbone.channels = {8, 16, 24, 32};
  cfg.backbone.depths = {1, 1, 1, 1};
  cfg.backbone.heads = {1, 2, 4, 4};
  cfg.c_f = 16;
  cfg.deab_depth = 1;
  cfg.heads = 4;
  return cfg;
}

// Small dataset + small network so a whole training run stays subsecond.
void tiny_dataset(const fs::path& root, uint64_t seed) {
  SynthConfig sc;
  sc.n_train = 8;
  sc.n_val = 4;
  sc.height = 64;
  sc.width = 64;
  sc.people_min = 3;
  sc.people_max = 12;
  sc.empty_fraction = 0.2;
  sc.seed = seed;
  synth_dataset(sc, root.string());
}

TrainConfig tiny_train_config(const fs::path& data, const fs::path& out) {
  TrainConfig cfg;
  cfg.model = tiny_model_config();
  cfg.model.head_eps = 0.01;
  cfg.epochs = 3;
  cfg.batch_size = 2;
  cfg.crop = 64;
  cfg.seed = 9;
  cfg.optim.lr = 1e-4;
  cfg.train_dir = (data / "train").string();
  cfg.val_dir = (data / "val").string();
  cfg.checkpoint = (out / "model.ckpt").string();
  cfg.log_path = (out / "log.jsonl").string();
  return cfg;
}

}  // namespace

TEST_SUITE_BEGIN("train_cli");

TEST_CASE("adamw matches the hand-stepped reference") {
  Tensor p = Tensor::from_data({3}, {0.5, -0.25, 1.5});
  p.set_requires_grad(true);
  Tensor frozen = Tensor::from_data({2}, {7.0, -7.0});
  ParamList params;
  params.push_back({"w", p, true});
  params.push_back({"stat", frozen, false});

  OptimConfig oc;
  oc.lr = 1e-2;
  oc.weight_decay = 0.1;
  AdamW opt(params, oc);

  const std::vector<std::vector<double>> grads = {{1.0, -2.0, 0.5},
                                                  {-0.5, 0.25, 3.0}};
  // Reference: decoupled decay, then the bias-corrected Adam direction,
  // stepped with plain scalar arithmetic.
  double w[3] = {0.5, -0.25, 1.5};
  double m[3] = {0, 0, 0}, v[3] = {0, 0, 0};
  for (int step = 1; step <= 2; ++step) {
    const double bc1 = 1.0 - std::pow(oc.beta1, step);
    const double bc2 = 1.0 - std::pow(oc.beta2, step);
    for (int i = 0; i < 3; ++i) {
      const double g = grads[static_cast<size_t>(step - 1)][static_cast<size_t>(i)];
      w[i] -= oc.lr * oc.weight_decay * w[i];
      m[i] = oc.beta1 * m[i] + (1.0 - oc.beta1) * g;
      v[i] = oc.beta2 * v[i] + (1.0 - oc.beta2) * g * g;
      w[i] -= oc.lr * (m[i] / bc1) / (std::sqrt(v[i] / bc2) + oc.eps);
    }

    Tape tape;
    Tensor c = Tensor::from_data({3}, grads[static_cast<size_t>(step - 1)]);
    tape.backward(sum(mul(p, c)));
    opt.step();

    CHECK(opt.steps() == step);
    for (int i = 0; i < 3; ++i) {
      CHECK(p.data()[i] == doctest::Approx(w[i]).epsilon(1e-14));
    }
  }
  // step() consumed the gradients and never touched the frozen entry.
  CHECK(p.grad_data()[0] == 0.0);
  CHECK(frozen.data()[0] == 7.0);
  CHECK(frozen.data()[1] == -7.0);
}

TEST_CASE("adamw rejects broken settings") {
  OptimConfig oc;
  oc.lr = 0.0;
  CHECK(contains(thrown_message([&] { AdamW opt({}, oc); }), "lr"));
  oc = OptimConfig{};
  oc.beta2 = 1.0;
  CHECK(contains(thrown_message([&] { AdamW opt({}, oc); }), "betas"));
}

TEST_CASE("run config json round trips and defaults hold") {
  TrainConfig def;
  CHECK(def.epochs == 30);
  CHECK(def.batch_size == 4);
  CHECK(def.crop == 128);
  CHECK(def.optim.lr == 1e-5);
  CHECK(def.optim.weight_decay == 1e-4);
  CHECK(def.optim.beta1 == 0.9);
  CHECK(def.optim.beta2 == 0.999);
  CHECK(def.optim.eps == 1e-8);
  CHECK(def.loss.lambda1 == 0.1);
  CHECK(def.loss.lambda2 == 0.01);
  CHECK(def.model.head_eps == 0.01);
  CHECK_FALSE(def.log_timing);

  def.optim.lr = 3e-4;
  def.loss.sinkhorn_iters = 17;
  def.model.c_f = 24;
  def.seed = 12345;
  def.log_timing = true;
  TrainConfig back = train_config_from_json(train_config_to_json(def));
  CHECK(back.optim.lr == 3e-4);
  CHECK(back.loss.sinkhorn_iters == 17);
  CHECK(back.model.c_f == 24);
  CHECK(back.seed == 12345);
  CHECK(back.log_timing);
  CHECK(back.epochs == def.epochs);
  CHECK(back.model.head_eps == 0.01);
}

TEST_CASE("run config json parses flat keys") {
  TrainConfig cfg = train_config_from_json(
      R"({"lr": 2e-4, "c_f": 24, "epochs": 5, "lambda1": 0.3,
          "backbone": {"channels": [8, 16, 24, 32]}})");
  CHECK(cfg.optim.lr == 2e-4);
  CHECK(cfg.model.c_f == 24);
  CHECK(cfg.epochs == 5);
  CHECK(cfg.loss.lambda1 == 0.3);
  CHECK(cfg.model.backbone.channels[0] == 8);
  // Unstated head floor defaults on; an explicit zero wins.
  CHECK(cfg.model.head_eps == 0.01);
  CHECK(train_config_from_json(R"({"head_eps": 0.0})").model.head_eps == 0.0);

  CHECK(contains(thrown_message([] { train_config_from_json("[1]"); }),
                 "top level"));
  CHECK(contains(thrown_message([] { train_config_from_json("{oops"); }),
                 "config:"));
  CHECK(contains(
      thrown_message([] { train_config_from_json(R"({"bogus": 1})"); }),
      "unknown key 'bogus'"));
  CHECK(contains(
      thrown_message([] { train_config_from_json(R"({"lr": "fast"})"); }),
      "lr"));
}

TEST_CASE("checkpoint round trips bitwise") {
  const fs::path root = fresh_root("ckpt");
  Rng rng(42);
  CrowdCounter model = CrowdCounter::make(rng, tiny_model_config());
  // Move every parameter off its init so the payload is non-trivial.
  ParamList before = model.parameters();
  Rng jitter(7);
  for (NamedTensor& p : before) {
    for (int64_t i = 0; i < p.value.numel(); ++i) {
      p.value.data()[i] += 0.01 * jitter.normal();
    }
  }

  const std::string path = (root / "m.ckpt").string();
  save_checkpoint(path, model);
  CrowdCounter loaded = load_checkpoint(path);

  CHECK(loaded.config.c_f == 16);
  CHECK(loaded.config.deab_depth == 1);
  ParamList after = loaded.parameters();
  REQUIRE(after.size() == before.size());
  for (size_t i = 0; i < before.size(); ++i) {
    CHECK(after[i].name == before[i].name);
    CHECK(after[i].trainable == before[i].trainable);
    CHECK(max_abs_diff(after[i].value, before[i].value) == 0.0);
  }

  Rng xr(3);
  Tensor x = Tensor::rand_uniform({1, 3, 64, 64}, xr, 0.0, 1.0);
  DensityMap a = model.forward(x, false);
  DensityMap b = loaded.forward(x, false);
  CHECK(max_abs_diff(a.grid, b.grid) == 0.0);

  CHECK(peek_checkpoint_config(path).c_f == 16);
}

TEST_CASE("checkpoint rejects junk files") {
  const fs::path root = fresh_root("ckpt_bad");
  Rng rng(42);
  CrowdCounter model = CrowdCounter::make(rng, tiny_model_config());
  const std::string good = (root / "good.ckpt").string();
  save_checkpoint(good, model);
  const std::string bytes = slurp(good);

  spill(root / "magic.ckpt", "NOPE" + bytes.substr(4));
  CHECK(contains(
      thrown_message([&] { load_checkpoint((root / "magic.ckpt").string()); }),
      "bad magic"));

  std::string versioned = bytes;
  versioned[4] = 9;
  spill(root / "version.ckpt", versioned);
  CHECK(contains(
      thrown_message(
          [&] { load_checkpoint((root / "version.ckpt").string()); }),
      "format version 9"));

  spill(root / "short.ckpt", bytes.substr(0, bytes.size() / 2));
  CHECK(contains(
      thrown_message([&] { load_checkpoint((root / "short.ckpt").string()); }),
      "truncated"));

  spill(root / "long.ckpt", bytes + "x");
  CHECK(contains(
      thrown_message([&] { load_checkpoint((root / "long.ckpt").string()); }),
      "trailing bytes"));

  CHECK(contains(
      thrown_message([&] { load_checkpoint((root / "nope.ckpt").string()); }),
      "cannot open"));
}

TEST_CASE("synthesized datasets are deterministic and guarded") {
  const fs::path root = fresh_root("synth");
  tiny_dataset(root / "a", 5);
  tiny_dataset(root / "b", 5);

  CHECK(slurp(root / "a/train/manifest.jsonl") ==
        slurp(root / "b/train/manifest.jsonl"));
  CHECK(slurp(root / "a/val/manifest.jsonl") ==
        slurp(root / "b/val/manifest.jsonl"));

  std::vector<ManifestEntry> train = read_manifest((root / "a/train").string());
  std::vector<ManifestEntry> val = read_manifest((root / "a/val").string());
  REQUIRE(train.size() == 8);
  REQUIRE(val.size() == 4);
  // Seed->id is injective and the splits draw from disjoint seed ranges.
  for (const ManifestEntry& t : train) {
    for (const ManifestEntry& v : val) CHECK(t.id != v.id);
  }
  CHECK(slurp(root / "a/train/images" / (train[0].id + ".png")) ==
        slurp(root / "b/train/images" / (train[0].id + ".png")));

  // A populated target needs --force; with it, the rebuild is clean.
  CHECK(contains(thrown_message([&] { tiny_dataset(root / "a", 6); }),
                 "--force"));
  SynthConfig sc;
  sc.n_train = 2;
  sc.n_val = 1;
  sc.height = 64;
  sc.width = 64;
  sc.people_min = 3;
  sc.people_max = 5;
  sc.seed = 6;
  sc.force = true;
  synth_dataset(sc, (root / "a").string());
  CHECK(read_manifest((root / "a/train").string()).size() == 2);
}

TEST_CASE("dataset loading cross-checks the manifest") {
  const fs::path root = fresh_root("load");
  tiny_dataset(root, 5);
  Dataset train = load_dataset((root / "train").string());
  CHECK(train.samples.size() == 8);
  CHECK(train.samples[0].image.dim(1) == 64);

  // Corrupt one manifest count; loading must refuse the silent mismatch.
  std::vector<ManifestEntry> rows = read_manifest((root / "val").string());
  rows[0].count += 1.0;
  write_manifest((root / "val").string(), rows);
  CHECK(contains(thrown_message([&] { load_dataset((root / "val").string()); }),
                 "does not match"));

  CHECK(contains(
      thrown_message([&] { load_dataset((root / "missing").string()); }),
      "manifest"));
}

TEST_CASE("training runs are byte-identical and logged") {
  const fs::path root = fresh_root("train_det");
  tiny_dataset(root / "data", 5);

  TrainConfig cfg = tiny_train_config(root / "data", root / "run1");
  fs::create_directories(root / "run1");
  TrainResult r1 = train_model(cfg);
  TrainConfig cfg2 = tiny_train_config(root / "data", root / "run2");
  fs::create_directories(root / "run2");
  TrainResult r2 = train_model(cfg2);

  REQUIRE_FALSE(r1.aborted);
  CHECK(slurp(root / "run1/log.jsonl") == slurp(root / "run2/log.jsonl"));
  CHECK(slurp(root / "run1/model.ckpt") == slurp(root / "run2/model.ckpt"));
  CHECK(r1.best_val_mae == r2.best_val_mae);
  CHECK(r1.best_epoch == r2.best_epoch);

  REQUIRE(r1.epochs.size() == 3);
  std::ifstream log(root / "run1/log.jsonl");
  std::string line;
  int64_t lines = 0;
  double best = std::numeric_limits<double>::infinity();
  while (std::getline(log, line)) {
    nlohmann::json j = nlohmann::json::parse(line);
    ++lines;
    CHECK(j["epoch"] == lines);
    CHECK(j["seconds"] == 0.0);  // timing is opt-in, logs stay reproducible
    CHECK(j["train_loss"].get<double>() ==
          r1.epochs[static_cast<size_t>(lines - 1)].train_loss);
    CHECK(std::isfinite(j["val_mae"].get<double>()));
    CHECK(std::isfinite(j["val_mse"].get<double>()));
    CHECK(std::isfinite(j["val_nae"].get<double>()));
    best = std::min(best, j["val_mae"].get<double>());
  }
  CHECK(lines == 3);
  CHECK(r1.best_val_mae == best);
  // The checkpoint on disk is the best-MAE epoch, ready to evaluate.
  CrowdCounter reloaded = load_checkpoint(cfg.checkpoint.c_str());
  Dataset val = load_dataset(cfg.val_dir);
  MetricSummary m = summarize(evaluate_dataset(reloaded, val, 1));
  CHECK(m.mae == doctest::Approx(r1.best_val_mae).epsilon(1e-12));
}

TEST_CASE("epochs zero checkpoints the initialization") {
  const fs::path root = fresh_root("train_zero");
  tiny_dataset(root / "data", 5);
  TrainConfig cfg = tiny_train_config(root / "data", root);
  cfg.epochs = 0;
  TrainResult r = train_model(cfg);
  CHECK_FALSE(r.aborted);
  CHECK(r.epochs.empty());
  CHECK(r.best_epoch == -1);
  CHECK(std::isinf(r.best_val_mae));
  CHECK(slurp(root / "log.jsonl").empty());
  CrowdCounter model = load_checkpoint(cfg.checkpoint);
  // Same seed, same init: a fresh run must start from these exact bytes.
  TrainConfig cfg2 = tiny_train_config(root / "data", root / "again");
  cfg2.epochs = 0;
  fs::create_directories(root / "again");
  train_model(cfg2);
  CHECK(slurp(root / "model.ckpt") == slurp(root / "again/model.ckpt"));
}

TEST_CASE("a non-finite loss aborts and keeps the last artifacts") {
  const fs::path root = fresh_root("train_abort");
  tiny_dataset(root / "data", 5);
  TrainConfig cfg = tiny_train_config(root / "data", root);
  // An absurd step size detonates the weights within the first epoch; the
  // scale-adaptive module is disabled because it rejects non-finite offsets
  // outright instead of letting the loss blow up.
  cfg.optim.lr = 1e12;
  cfg.model.use_asam = false;
  TrainResult r = train_model(cfg);
  CHECK(r.aborted);
  CHECK(contains(r.abort_reason, "non-finite"));
  // The initialization checkpoint survived the abort and still loads.
  CrowdCounter model = load_checkpoint(cfg.checkpoint);
  ParamList params = model.parameters();
  for (const NamedTensor& p : params) {
    for (int64_t i = 0; i < p.value.numel(); ++i) {
      CHECK(std::isfinite(p.value.data()[i]));
    }
  }
}

TEST_CASE("training reduces the loss on the pinned seed") {
  const fs::path root = fresh_root("train_improves");
  tiny_dataset(root / "data", 5);
  TrainConfig cfg = tiny_train_config(root / "data", root);
  TrainResult r = train_model(cfg);
  REQUIRE_FALSE(r.aborted);
  REQUIRE(r.epochs.size() == 3);
  CHECK(r.epochs.back().train_loss < r.epochs.front().train_loss);
}

TEST_CASE("evaluation is identical across thread counts") {
  Rng rng(11);
  CrowdCounter model = CrowdCounter::make(rng, tiny_model_config());
  Dataset data;
  for (uint64_t s = 0; s < 5; ++s) {
    SceneSpec spec;
    spec.height = 64;
    spec.width = 64;
    spec.people = 4 + static_cast<int64_t>(s);
    spec.seed = 100 + s;
    data.samples.push_back(synth_scene(spec));
  }
  std::vector<CountRecord> serial = evaluate_dataset(model, data, 1);
  std::vector<CountRecord> fanned = evaluate_dataset(model, data, 3);
  REQUIRE(serial.size() == fanned.size());
  for (size_t i = 0; i < serial.size(); ++i) {
    CHECK(serial[i].id == fanned[i].id);
    CHECK(serial[i].pred == fanned[i].pred);
    CHECK(serial[i].gt == fanned[i].gt);
  }
}

TEST_CASE("inference pads, counts, and round-trips the grid") {
  const fs::path root = fresh_root("infer");
  Rng rng(21);
  CrowdCounter model = CrowdCounter::make(rng, tiny_model_config());
  Rng xr(4);
  Tensor image = Tensor::rand_uniform({3, 100, 90}, xr, 0.0, 1.0);
  InferResult r = infer_image(model, image);
  CHECK(r.padded_h == 128);
  CHECK(r.padded_w == 96);
  REQUIRE(r.grid.ndim() == 2);
  CHECK(r.grid.dim(0) == 16);
  CHECK(r.grid.dim(1) == 12);
  double total = 0.0;
  for (int64_t i = 0; i < r.grid.numel(); ++i) total += r.grid.data()[i];
  CHECK(r.count == doctest::Approx(total).epsilon(1e-12));

  // Already-aligned input: no padding, grid is H/8 x W/8.
  Tensor aligned = Tensor::rand_uniform({3, 64, 64}, xr, 0.0, 1.0);
  InferResult ra = infer_image(model, aligned);
  CHECK(ra.padded_h == 64);
  CHECK(ra.grid.dim(0) == 8);

  const std::string grid_path = (root / "out.grid").string();
  write_density_grid(grid_path, r.grid);
  Tensor back = read_density_grid(grid_path);
  CHECK(max_abs_diff(back, r.grid) == 0.0);

  const std::string heat_path = (root / "heat.png").string();
  write_heatmap_png(heat_path, r.grid, 8);
  ImageU8 heat = read_png(heat_path);
  CHECK(heat.height == 16 * 8);
  CHECK(heat.width == 12 * 8);

  spill(root / "junk.grid", "WHAT");
  CHECK(contains(
      thrown_message([&] { read_density_grid((root / "junk.grid").string()); }),
      "magic"));
  const std::string bytes = slurp(grid_path);
  spill(root / "cut.grid", bytes.substr(0, bytes.size() - 9));
  CHECK(contains(
      thrown_message([&] { read_density_grid((root / "cut.grid").string()); }),
      "truncated"));
}

TEST_CASE("a zeroed head yields an all-zero grid") {
  ModelConfig mc = tiny_model_config();
  mc.head_eps = 0.0;  // no output floor: the head alone decides
  Rng rng(23);
  CrowdCounter model = CrowdCounter::make(rng, mc);
  for (int64_t i = 0; i < model.head.w.numel(); ++i) {
    model.head.w.data()[i] = 0.0;
  }
  for (int64_t i = 0; i < model.head.b.numel(); ++i) {
    model.head.b.data()[i] = 0.0;
  }
  Rng xr(5);
  Tensor image = Tensor::rand_uniform({3, 64, 64}, xr, 0.0, 1.0);
  InferResult r = infer_image(model, image);
  CHECK(r.count == 0.0);
  for (int64_t i = 0; i < r.grid.numel(); ++i) {
    CHECK(r.grid.data()[i] == 0.0);
  }
}

TEST_CASE("gradient certification covers the advertised scopes") {
  CHECK(contains(thrown_message([] { certify_gradients("everything"); }),
                 "unknown scope"));
  // The full scopes run in the acceptance gate; here just the cheapest one.
  std::vector<CertRow> rows = certify_gradients("ops");
  CHECK(rows.size() >= 15);
  for (const CertRow& r : rows) {
    CHECK(r.tol == 1e-4);
    CHECK(r.ok);
  }
}

TEST_CASE("ablation matrices have the documented rows") {
  const fs::path root = fresh_root("ablate");
  tiny_dataset(root / "data", 5);
  TrainConfig base = tiny_train_config(root / "data", root);
  base.epochs = 1;

  CHECK(contains(
      thrown_message([&] {
        ablate_matrix("table5", base, (root / "out").string());
      }),
      "unknown matrix 'table5'"));

  std::vector<AblateRow> rows =
      ablate_matrix("table6", base, (root / "out").string());
  REQUIRE(rows.size() == 3);
  CHECK(rows[0].name == "gsa");
  CHECK(rows[1].name == "gsa_local_conv");
  CHECK(rows[2].name == "dea");
  for (size_t i = 0; i < rows.size(); ++i) {
    CHECK(std::isfinite(rows[i].mae));
    CHECK(std::isfinite(rows[i].mse));
    const std::string slug = "table6_row" + std::to_string(i);
    CHECK(fs::exists(root / "out" / (slug + ".ckpt")));
    CHECK(fs::exists(root / "out" / (slug + ".jsonl")));
  }
}

TEST_SUITE_END();
