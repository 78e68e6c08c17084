#include <doctest.h>

#include <algorithm>
#include <array>
#include <cmath>
#include <set>
#include <string>
#include <vector>

#include "rcc/losses.hpp"
#include "rcc/model.hpp"
#include "rcc/rng.hpp"
#include "testutil.hpp"

using namespace rcc;
using testutil::contains;
using testutil::max_abs_diff;
using testutil::thrown_message;

namespace {

// Small enough to forward in milliseconds, wide enough that every module
// has something to do.
ModelConfig tiny_config() {
  ModelConfig c;
  c.backbone.channels = {8, 16, 24, 32};
  c.backbone.depths = {1, 1, 1, 1};
  c.backbone.heads = {1, 2, 4, 4};
  c.backbone.sr_ratios = {8, 4, 2, 1};
  c.c_f = 16;
  c.deab_depth = 1;
  c.heads = 4;
  return c;
}

std::set<std::string> param_names(CrowdCounter& m) {
  std::set<std::string> names;
  for (const NamedTensor& nt : m.parameters()) {
    REQUIRE(names.insert(nt.name).second);  // no duplicates
  }
  return names;
}

Tensor image_slice(const DensityMap& dm, int64_t i) {
  return reshape(slice(dm.grid, 0, i, 1), {dm.grid.dim(2), dm.grid.dim(3)});
}

}  // namespace

TEST_SUITE_BEGIN("model");

TEST_CASE("the network emits a stride-8 density grid") {
  Rng rng(7);
  CrowdCounter m = CrowdCounter::make(rng, tiny_config());
  Tensor x = Tensor::rand_uniform({1, 3, 64, 64}, rng, 0.0, 1.0);
  DensityMap dm = m.forward(x);
  CHECK(dm.grid.shape() == Shape{1, 1, 8, 8});
  CHECK(dm.batch() == 1);

  Tensor x2 = Tensor::rand_uniform({2, 3, 96, 96}, rng, 0.0, 1.0);
  DensityMap dm2 = m.forward(x2);
  CHECK(dm2.grid.shape() == Shape{2, 1, 12, 12});

  // Per-image counts are plain sums over that image's cells.
  double first = 0.0;
  for (int64_t k = 0; k < 12 * 12; ++k) first += dm2.grid.data()[k];
  CHECK(dm2.count(0) == first);
  CHECK(dm.count(0) == sum(dm.grid).data()[0]);
  CHECK(contains(thrown_message([&] { dm.count(1); }),
                 "image 1 out of range for batch 1"));
}

TEST_CASE("a zeroed head predicts exactly nobody") {
  Rng rng(11);
  CrowdCounter m = CrowdCounter::make(rng, tiny_config());
  for (int64_t i = 0; i < m.head.w.numel(); ++i) m.head.w.data()[i] = 0.0;
  for (int64_t i = 0; i < m.head.b.numel(); ++i) m.head.b.data()[i] = 0.0;
  Tensor x = Tensor::rand_uniform({1, 3, 64, 64}, rng, 0.0, 1.0);
  DensityMap dm = m.forward(x);
  for (int64_t i = 0; i < dm.grid.numel(); ++i)
    CHECK(dm.grid.data()[i] == 0.0);
  CHECK(dm.count(0) == 0.0);
}

TEST_CASE("density never goes negative and head_eps lifts its floor") {
  Rng rng(13);
  CrowdCounter m = CrowdCounter::make(rng, tiny_config());
  Tensor x = Tensor::rand_uniform({2, 3, 64, 64}, rng, 0.0, 1.0);
  DensityMap dm = m.forward(x);
  double lo = 1e300;
  for (int64_t i = 0; i < dm.grid.numel(); ++i)
    lo = std::min(lo, dm.grid.data()[i]);
  CHECK(lo >= 0.0);

  ModelConfig cfg = tiny_config();
  cfg.head_eps = 0.01;
  Rng rng2(13);
  CrowdCounter m2 = CrowdCounter::make(rng2, cfg);
  DensityMap dm2 = m2.forward(x);
  double lo2 = 1e300;
  for (int64_t i = 0; i < dm2.grid.numel(); ++i)
    lo2 = std::min(lo2, dm2.grid.data()[i]);
  CHECK(lo2 >= 0.01);
}

TEST_CASE("component toggles nest the parameter sets") {
  ModelConfig base = tiny_config();
  base.mffm_mode = "off";
  base.use_deab = false;
  base.use_asam = false;
  ModelConfig with_fusion = tiny_config();
  with_fusion.use_deab = false;
  with_fusion.use_asam = false;
  ModelConfig with_neck = tiny_config();
  with_neck.use_asam = false;
  ModelConfig full = tiny_config();

  std::vector<std::set<std::string>> sets;
  for (const ModelConfig& c : {base, with_fusion, with_neck, full}) {
    Rng rng(5);
    CrowdCounter m = CrowdCounter::make(rng, c);
    sets.push_back(param_names(m));
  }
  for (const std::string& n : sets[0]) {
    CHECK((n.rfind("backbone.", 0) == 0 || n.rfind("head.", 0) == 0));
  }
  for (size_t i = 1; i < sets.size(); ++i) {
    CHECK(sets[i].size() > sets[i - 1].size());
    CHECK(std::includes(sets[i].begin(), sets[i].end(),
                        sets[i - 1].begin(), sets[i - 1].end()));
  }

  // The plain trunk works at the deepest tap's width, the fused one at c_f.
  Rng r1(5), r2(5);
  CrowdCounter plain = CrowdCounter::make(r1, base);
  CrowdCounter fused = CrowdCounter::make(r2, full);
  CHECK(plain.head.w.dim(1) == 32);
  CHECK(fused.head.w.dim(1) == 16);

  // Zero refinement depth is a valid (if shallow) network.
  ModelConfig shallow = tiny_config();
  shallow.deab_depth = 0;
  Rng r3(5), r4(77);
  CrowdCounter s = CrowdCounter::make(r3, shallow);
  Tensor xs = Tensor::rand_uniform({1, 3, 32, 32}, r4, 0.0, 1.0);
  CHECK(s.forward(xs).grid.shape() == Shape{1, 1, 4, 4});
}

TEST_CASE("the same seed builds the same network") {
  Rng r1(21), r2(21), r3(22);
  CrowdCounter a = CrowdCounter::make(r1, tiny_config());
  CrowdCounter b = CrowdCounter::make(r2, tiny_config());
  CrowdCounter c = CrowdCounter::make(r3, tiny_config());
  ParamList pa = a.parameters();
  ParamList pb = b.parameters();
  REQUIRE(pa.size() == pb.size());
  for (size_t i = 0; i < pa.size(); ++i) {
    CHECK(pa[i].name == pb[i].name);
    CHECK(max_abs_diff(pa[i].value, pb[i].value) == 0.0);
  }
  Rng rx(99);
  Tensor x = Tensor::rand_uniform({1, 3, 64, 64}, rx, 0.0, 1.0);
  CHECK(max_abs_diff(a.forward(x).grid, b.forward(x).grid) == 0.0);
  CHECK(max_abs_diff(a.forward(x).grid, c.forward(x).grid) > 0.0);
}

TEST_CASE("bad configs are rejected at build time") {
  auto build = [](ModelConfig c) {
    Rng rng(1);
    return thrown_message([&] { CrowdCounter::make(rng, c); });
  };
  ModelConfig c = tiny_config();
  c.attention_mode = "vaswani";
  CHECK(contains(build(c), "unknown attention mode: vaswani"));
  c = tiny_config();
  c.idconv_mode = "dcn";
  CHECK(contains(build(c), "conv mode: unknown 'dcn'"));
  c = tiny_config();
  c.mffm_mode = "blend";
  CHECK(contains(build(c), "fuse mode: unknown 'blend'"));
  c = tiny_config();
  c.c_f = 18;
  CHECK(contains(build(c), "trunk width 18 not divisible by 4 heads"));
  c = tiny_config();
  c.heads = 1;
  c.c_f = 15;
  CHECK(contains(build(c), "must be even"));
  c = tiny_config();
  c.deab_depth = -1;
  CHECK(contains(build(c), "deab_depth must be >= 0"));
  c = tiny_config();
  c.local_kernel = 4;
  CHECK(contains(build(c), "local_kernel must be odd"));
  c = tiny_config();
  c.head_eps = -0.5;
  CHECK(contains(build(c), "head_eps must be >= 0"));
}

TEST_CASE("config json round-trips and rejects junk") {
  ModelConfig c;
  c.backbone.channels = {16, 32, 64, 96};
  c.backbone.depths = {2, 1, 3, 1};
  c.backbone.heads = {2, 2, 4, 8};
  c.backbone.sr_ratios = {4, 4, 2, 1};
  c.c_f = 32;
  c.deab_depth = 3;
  c.heads = 8;
  c.local_kernel = 3;
  c.alpha_init = 0.25;
  c.use_deab = false;
  c.use_asam = false;
  c.mffm_mode = "add";
  c.attention_mode = "gsa";
  c.idconv_mode = "vanilla";
  c.head_eps = 0.5;
  const std::string text = config_to_json(c);
  CHECK(config_to_json(config_from_json(text)) == text);

  // Partial configs keep defaults for everything unnamed.
  ModelConfig partial = config_from_json(R"({"c_f": 96, "heads": 8})");
  CHECK(partial.c_f == 96);
  CHECK(partial.heads == 8);
  CHECK(partial.deab_depth == 2);
  CHECK(partial.mffm_mode == "mffm");
  CHECK(partial.backbone.channels == std::array<int64_t, 4>{32, 64, 128, 256});

  CHECK(contains(thrown_message([] { config_from_json(R"({"cf": 1})"); }),
                 "config: unknown key 'cf'"));
  CHECK(contains(
      thrown_message(
          [] { config_from_json(R"({"backbone": {"width": 1}})"); }),
      "config: unknown key 'backbone.width'"));
  CHECK(contains(
      thrown_message([] { config_from_json(R"({"c_f": "wide"})"); }),
      "config: c_f must be an integer"));
  CHECK(contains(
      thrown_message(
          [] { config_from_json(R"({"backbone": {"channels": [1, 2]}})"); }),
      "backbone.channels must be an array of 4"));
  CHECK(contains(thrown_message([] { config_from_json("not json"); }),
                 "config:"));
  CHECK(contains(thrown_message([] { config_from_json("[1, 2]"); }),
                 "top level must be a JSON object"));
}

TEST_CASE("training gradients reach every live parameter") {
  ModelConfig cfg = tiny_config();
  cfg.head_eps = 0.01;  // keeps predicted mass positive for the loss
  Rng rng(31);
  CrowdCounter m = CrowdCounter::make(rng, cfg);
  // 64x64 keeps every attention stage's reduced key grid at 2x2 or more; a
  // single key token would make its softmax constant and the query/key
  // projections unreachable by any loss.
  Tensor x = Tensor::rand_uniform({2, 3, 64, 64}, rng, 0.0, 1.0);
  Tensor gt0 = Tensor::zeros({8, 8});
  gt0.data()[1 * 8 + 2] = 1.0;
  gt0.data()[4 * 8 + 6] = 2.0;
  gt0.data()[7 * 8 + 0] = 1.0;
  Tensor gt1 = Tensor::zeros({8, 8});
  gt1.data()[0 * 8 + 7] = 1.0;
  gt1.data()[5 * 8 + 3] = 1.0;

  Tape tape;
  DensityMap dm = m.forward(x, /*training=*/true);
  Tensor loss =
      add(composite_loss(image_slice(dm, 0), gt0),
          composite_loss(image_slice(dm, 1), gt1));
  REQUIRE(std::isfinite(loss.data()[0]));
  tape.backward(loss);

  // A bias that feeds straight into a batch norm is invisible: the norm
  // subtracts the batch mean, so shifting one channel by a constant does
  // nothing and the true gradient is exactly zero. Those biases sit right
  // before entry_bn / exit_bn / wb_bn inside the scale-adaptive module.
  auto structurally_dead = [](const std::string& n) {
    if (n.rfind("asam.", 0) != 0) return false;
    auto ends_with = [&](const std::string& suffix) {
      return n.size() >= suffix.size() &&
             n.compare(n.size() - suffix.size(), suffix.size(), suffix) == 0;
    };
    return ends_with(".mix.bias") || ends_with(".wb_in.bias");
  };

  int live = 0, dead = 0;
  for (const NamedTensor& nt : m.parameters()) {
    if (!nt.trainable) continue;
    double peak = 0.0;
    Tensor g = nt.value.grad();
    for (int64_t i = 0; i < g.numel(); ++i)
      peak = std::max(peak, std::abs(g.data()[i]));
    INFO("param ", nt.name, " peak grad ", peak);
    if (structurally_dead(nt.name)) {
      CHECK(peak < 1e-6);
      ++dead;
    } else {
      CHECK(peak > 0.0);
      ++live;
    }
  }
  CHECK(live > 100);
  CHECK(dead == 8);  // mix + wb_in biases of the four adaptive convolutions
}

TEST_SUITE_END();
