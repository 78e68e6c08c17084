#include "rcc/train.hpp"

#include <json.hpp>

#include <algorithm>
#include <atomic>
#include <chrono>
#include <cmath>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <functional>
#include <limits>
#include <numeric>
#include <thread>

#include "rcc/attention.hpp"
#include "rcc/backbone.hpp"
#include "rcc/gradcheck.hpp"
#include "rcc/idconv_asam.hpp"
#include "rcc/mffm.hpp"
#include "rcc/png_io.hpp"
#include "rcc/serialize.hpp"

namespace fs = std::filesystem;

namespace rcc {

// --- AdamW ------------------------------------------------------------------

AdamW::AdamW(ParamList params, const OptimConfig& cfg)
    : params_(std::move(params)), cfg_(cfg) {
  check(cfg_.lr > 0.0, "adamw: lr must be positive");
  check(cfg_.weight_decay >= 0.0, "adamw: weight decay must be >= 0");
  check(cfg_.beta1 >= 0.0 && cfg_.beta1 < 1.0 && cfg_.beta2 >= 0.0 &&
            cfg_.beta2 < 1.0,
        "adamw: betas must lie in [0, 1)");
  check(cfg_.eps > 0.0, "adamw: eps must be positive");
  m_.resize(params_.size());
  v_.resize(params_.size());
  for (size_t i = 0; i < params_.size(); ++i) {
    if (!params_[i].trainable) continue;
    m_[i].assign(static_cast<size_t>(params_[i].value.numel()), 0.0);
    v_[i].assign(static_cast<size_t>(params_[i].value.numel()), 0.0);
  }
}

void AdamW::step() {
  ++steps_;
  const double bc1 = 1.0 - std::pow(cfg_.beta1, static_cast<double>(steps_));
  const double bc2 = 1.0 - std::pow(cfg_.beta2, static_cast<double>(steps_));
  for (size_t k = 0; k < params_.size(); ++k) {
    NamedTensor& p = params_[k];
    if (!p.trainable) continue;
    double* w = p.value.data();
    const double* g = p.value.grad_data();  // zeros when nothing accumulated
    double* m = m_[k].data();
    double* v = v_[k].data();
    const int64_t n = p.value.numel();
    for (int64_t i = 0; i < n; ++i) {
      // Decoupled decay first, then the bias-corrected Adam direction.
      w[i] -= cfg_.lr * cfg_.weight_decay * w[i];
      m[i] = cfg_.beta1 * m[i] + (1.0 - cfg_.beta1) * g[i];
      v[i] = cfg_.beta2 * v[i] + (1.0 - cfg_.beta2) * g[i] * g[i];
      w[i] -= cfg_.lr * (m[i] / bc1) / (std::sqrt(v[i] / bc2) + cfg_.eps);
    }
    p.value.zero_grad();
  }
}

// --- Run-config JSON --------------------------------------------------------

namespace {

double want_number(const std::string& key, const nlohmann::json& v) {
  check(v.is_number(), "config: " + key + " must be a number");
  return v.get<double>();
}

int64_t want_int(const std::string& key, const nlohmann::json& v) {
  check(v.is_number_integer(), "config: " + key + " must be an integer");
  return v.get<int64_t>();
}

bool want_bool(const std::string& key, const nlohmann::json& v) {
  check(v.is_boolean(), "config: " + key + " must be a boolean");
  return v.get<bool>();
}

std::string want_string(const std::string& key, const nlohmann::json& v) {
  check(v.is_string(), "config: " + key + " must be a string");
  return v.get<std::string>();
}

}  // namespace

TrainConfig train_config_from_json(const std::string& text) {
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(text);
  } catch (const std::exception& e) {
    check(false, std::string("config: ") + e.what());
  }
  check(j.is_object(), "config: top level must be a JSON object");

  TrainConfig cfg;
  nlohmann::json model_keys = nlohmann::json::object();
  for (const auto& [key, val] : j.items()) {
    if (key == "epochs") {
      cfg.epochs = want_int(key, val);
    } else if (key == "batch_size") {
      cfg.batch_size = want_int(key, val);
    } else if (key == "crop") {
      cfg.crop = want_int(key, val);
    } else if (key == "seed") {
      check(val.is_number_integer() && val.get<int64_t>() >= 0,
            "config: seed must be a non-negative integer");
      cfg.seed = val.get<uint64_t>();
    } else if (key == "lr") {
      cfg.optim.lr = want_number(key, val);
    } else if (key == "weight_decay") {
      cfg.optim.weight_decay = want_number(key, val);
    } else if (key == "beta1") {
      cfg.optim.beta1 = want_number(key, val);
    } else if (key == "beta2") {
      cfg.optim.beta2 = want_number(key, val);
    } else if (key == "adam_eps") {
      cfg.optim.eps = want_number(key, val);
    } else if (key == "lambda1") {
      cfg.loss.lambda1 = want_number(key, val);
    } else if (key == "lambda2") {
      cfg.loss.lambda2 = want_number(key, val);
    } else if (key == "sinkhorn_reg") {
      cfg.loss.sinkhorn_reg = want_number(key, val);
    } else if (key == "sinkhorn_iters") {
      cfg.loss.sinkhorn_iters = static_cast<int>(want_int(key, val));
    } else if (key == "train_dir") {
      cfg.train_dir = want_string(key, val);
    } else if (key == "val_dir") {
      cfg.val_dir = want_string(key, val);
    } else if (key == "checkpoint") {
      cfg.checkpoint = want_string(key, val);
    } else if (key == "log") {
      cfg.log_path = want_string(key, val);
    } else if (key == "log_timing") {
      cfg.log_timing = want_bool(key, val);
    } else {
      // Everything else is a model key; the model parser owns the errors.
      model_keys[key] = val;
    }
  }
  // The training default keeps the output floor on unless the file takes an
  // explicit position.
  if (!model_keys.contains("head_eps")) model_keys["head_eps"] = 0.01;
  cfg.model = config_from_json(model_keys.dump());
  return cfg;
}

std::string train_config_to_json(const TrainConfig& cfg) {
  nlohmann::json j = nlohmann::json::parse(config_to_json(cfg.model));
  j["epochs"] = cfg.epochs;
  j["batch_size"] = cfg.batch_size;
  j["crop"] = cfg.crop;
  j["seed"] = cfg.seed;
  j["lr"] = cfg.optim.lr;
  j["weight_decay"] = cfg.optim.weight_decay;
  j["beta1"] = cfg.optim.beta1;
  j["beta2"] = cfg.optim.beta2;
  j["adam_eps"] = cfg.optim.eps;
  j["lambda1"] = cfg.loss.lambda1;
  j["lambda2"] = cfg.loss.lambda2;
  j["sinkhorn_reg"] = cfg.loss.sinkhorn_reg;
  j["sinkhorn_iters"] = cfg.loss.sinkhorn_iters;
  j["train_dir"] = cfg.train_dir;
  j["val_dir"] = cfg.val_dir;
  j["checkpoint"] = cfg.checkpoint;
  j["log"] = cfg.log_path;
  j["log_timing"] = cfg.log_timing;
  return j.dump(2);
}

// --- Datasets and evaluation ------------------------------------------------

Dataset load_dataset(const std::string& root) {
  std::vector<ManifestEntry> entries = read_manifest(root);
  check(!entries.empty(), "dataset: '" + root + "' has an empty manifest");
  Dataset d;
  d.samples.reserve(entries.size());
  for (const ManifestEntry& e : entries) {
    Sample s = load_sample(root, e.id);
    check(e.count == static_cast<double>(s.ann.dots.size()),
          "dataset: '" + e.id + "' manifest count " +
              std::to_string(e.count) + " does not match " +
              std::to_string(s.ann.dots.size()) + " annotated dots");
    d.samples.push_back(std::move(s));
  }
  return d;
}

std::vector<CountRecord> evaluate_dataset(CrowdCounter& model,
                                          const Dataset& data, int threads) {
  const size_t n = data.samples.size();
  std::vector<CountRecord> recs(n);
  threads = std::clamp(threads, 1, 64);

  std::atomic<size_t> next{0};
  auto worker = [&]() {
    for (;;) {
      const size_t i = next.fetch_add(1);
      if (i >= n) return;
      const Sample& s = data.samples[i];
      Tensor x = reshape(s.image, {1, s.image.dim(0), s.image.dim(1),
                                   s.image.dim(2)});
      DensityMap dm = model.forward(x, false);
      recs[i] = CountRecord{s.id, dm.count(0),
                            static_cast<double>(s.ann.dots.size())};
    }
  };
  if (threads == 1 || n <= 1) {
    worker();
  } else {
    std::vector<std::thread> pool;
    const int spawn = static_cast<int>(
        std::min<size_t>(static_cast<size_t>(threads), n));
    pool.reserve(static_cast<size_t>(spawn));
    for (int t = 0; t < spawn; ++t) pool.emplace_back(worker);
    for (std::thread& t : pool) t.join();
  }
  return recs;
}

// --- Training loop ------------------------------------------------------------

namespace {

bool params_all_finite(const ParamList& params) {
  for (const NamedTensor& p : params) {
    const double* d = p.value.data();
    for (int64_t i = 0; i < p.value.numel(); ++i) {
      if (!std::isfinite(d[i])) return false;
    }
  }
  return true;
}

std::string epoch_log_line(const EpochStats& st) {
  nlohmann::json j;
  j["epoch"] = st.epoch;
  j["train_loss"] = st.train_loss;
  j["val_mae"] = st.val_mae;
  j["val_mse"] = st.val_mse;
  j["val_nae"] = st.val_nae;
  j["seconds"] = st.seconds;
  return j.dump();
}

}  // namespace

TrainResult train_model(const TrainConfig& cfg) {
  check(cfg.epochs >= 0, "train: epochs must be >= 0");
  check(cfg.batch_size >= 1, "train: batch size must be >= 1");
  check(cfg.crop > 0 && cfg.crop % 32 == 0,
        "train: crop must be a positive multiple of 32");

  Dataset train_set = load_dataset(cfg.train_dir);
  Dataset val_set = load_dataset(cfg.val_dir);

  // One root seed fans out into independent streams, so reordering draws in
  // one stage can never shift another.
  Rng root(cfg.seed);
  Rng init_rng = root.derive("init");
  Rng order_rng = root.derive("order");
  Rng aug_rng = root.derive("augment");

  CrowdCounter model = CrowdCounter::make(init_rng, cfg.model);
  AdamW opt(model.parameters(), cfg.optim);

  std::ofstream log(cfg.log_path);
  check(log.is_open(), "train: cannot open log '" + cfg.log_path + "'");

  // Checkpoint the raw initialization so an abort at any point still leaves
  // a loadable model behind.
  save_checkpoint(cfg.checkpoint, model);

  TrainResult result;
  result.best_val_mae = std::numeric_limits<double>::infinity();

  const int64_t n = static_cast<int64_t>(train_set.samples.size());
  const int64_t crop = cfg.crop;
  std::vector<size_t> order(static_cast<size_t>(n));
  std::iota(order.begin(), order.end(), size_t{0});

  using Clock = std::chrono::steady_clock;
  for (int64_t epoch = 1; epoch <= cfg.epochs; ++epoch) {
    const auto t0 = Clock::now();

    for (int64_t i = n - 1; i > 0; --i) {
      const int64_t j = order_rng.uniform_int(0, i);
      std::swap(order[static_cast<size_t>(i)], order[static_cast<size_t>(j)]);
    }

    double loss_sum = 0.0;
    for (int64_t start = 0; start < n; start += cfg.batch_size) {
      const int64_t bs = std::min(cfg.batch_size, n - start);
      std::vector<Sample> batch;
      batch.reserve(static_cast<size_t>(bs));
      for (int64_t k = 0; k < bs; ++k) {
        batch.push_back(augment(
            train_set.samples[order[static_cast<size_t>(start + k)]], crop,
            crop, aug_rng));
      }
      Tensor x = Tensor::zeros({bs, 3, crop, crop});
      for (int64_t k = 0; k < bs; ++k) {
        std::memcpy(x.data() + k * 3 * crop * crop, batch[k].image.data(),
                    static_cast<size_t>(3 * crop * crop) * sizeof(double));
      }

      Tape tape;
      DensityMap dm = model.forward(x, true);
      const int64_t gh = dm.grid.dim(2);
      const int64_t gw = dm.grid.dim(3);
      Tensor loss;
      for (int64_t k = 0; k < bs; ++k) {
        Tensor p = reshape(slice(dm.grid, 0, k, 1), {gh, gw});
        Tensor gt = bin_dots(batch[k].ann, crop, crop);
        Tensor lk = composite_loss(p, gt, cfg.loss);
        loss = (k == 0) ? lk : add(loss, lk);
      }
      loss = mul(loss, 1.0 / static_cast<double>(bs));

      const double lv = loss.data()[0];
      if (!std::isfinite(lv)) {
        result.aborted = true;
        result.abort_reason = "non-finite loss at epoch " +
                              std::to_string(epoch) + ", batch " +
                              std::to_string(start / cfg.batch_size);
        return result;  // the last good checkpoint and log lines stand
      }
      tape.backward(loss);
      opt.step();
      loss_sum += lv * static_cast<double>(bs);
    }

    std::vector<CountRecord> recs = evaluate_dataset(model, val_set, 1);
    for (const CountRecord& r : recs) {
      if (!std::isfinite(r.pred)) {
        result.aborted = true;
        result.abort_reason = "non-finite prediction for '" + r.id +
                              "' during validation at epoch " +
                              std::to_string(epoch);
        return result;
      }
    }
    MetricSummary m = summarize(recs);

    EpochStats st;
    st.epoch = epoch;
    st.train_loss = loss_sum / static_cast<double>(n);
    st.val_mae = m.mae;
    st.val_mse = m.mse;
    st.val_nae = m.nae;
    st.seconds =
        cfg.log_timing ? std::chrono::duration<double>(Clock::now() - t0).count()
                       : 0.0;
    result.epochs.push_back(st);
    log << epoch_log_line(st) << "\n";
    log.flush();

    if (m.mae < result.best_val_mae) {
      ParamList ps = model.parameters();
      if (!params_all_finite(ps)) {
        result.aborted = true;
        result.abort_reason =
            "non-finite parameter at epoch " + std::to_string(epoch);
        return result;
      }
      save_checkpoint(cfg.checkpoint, model);
      result.best_val_mae = m.mae;
      result.best_epoch = epoch;
    }
  }
  return result;
}

// --- Dataset synthesis --------------------------------------------------------

void synth_dataset(const SynthConfig& cfg, const std::string& out_dir) {
  check(cfg.n_train >= 1 && cfg.n_val >= 1,
        "synth: need at least one scene per split");
  check(cfg.n_train <= (1 << 20) && cfg.n_val <= (1 << 20),
        "synth: split sizes above 2^20 would overlap the seed ranges");
  check(cfg.people_min >= 0 && cfg.people_max >= cfg.people_min,
        "synth: people range is empty");
  check(cfg.empty_fraction >= 0.0 && cfg.empty_fraction <= 1.0,
        "synth: empty_fraction must lie in [0, 1]");

  if (fs::exists(out_dir) && !fs::is_empty(out_dir)) {
    check(cfg.force,
          "synth: '" + out_dir + "' already holds files; pass --force to "
          "replace it");
    fs::remove_all(out_dir);
  }

  auto build_split = [&](const std::string& name, int64_t count,
                         uint64_t seed_base) {
    const std::string split_dir = out_dir + "/" + name;
    fs::create_directories(split_dir);
    std::vector<ManifestEntry> manifest;
    manifest.reserve(static_cast<size_t>(count));
    for (int64_t i = 0; i < count; ++i) {
      SceneSpec spec;
      spec.height = cfg.height;
      spec.width = cfg.width;
      spec.min_separation = cfg.min_separation;
      spec.distractors = cfg.distractors;
      spec.seed = seed_base + static_cast<uint64_t>(i);
      // The census draw hangs off the scene's own seed, so a scene is the
      // same no matter which split or batch it lands in.
      Rng census = Rng(spec.seed).derive("census");
      spec.people = census.bernoulli(cfg.empty_fraction)
                        ? 0
                        : census.uniform_int(cfg.people_min, cfg.people_max);
      Sample s = synth_scene(spec);
      save_sample(split_dir, s);
      manifest.push_back(
          {s.id, static_cast<double>(s.ann.dots.size()),
           density_level(static_cast<double>(s.ann.dots.size()))});
    }
    write_manifest(split_dir, manifest);
  };

  build_split("train", cfg.n_train, cfg.seed);
  build_split("val", cfg.n_val, cfg.seed + (uint64_t{1} << 20));
}

// --- Inference ------------------------------------------------------------

InferResult infer_image(CrowdCounter& model, const Tensor& image) {
  check(image.ndim() == 3 && image.dim(0) == 3,
        "infer: image must be [3, H, W], got " + shape_str(image.shape()));
  const int64_t h = image.dim(1);
  const int64_t w = image.dim(2);
  check(h >= 1 && w >= 1, "infer: empty image");
  const int64_t ph = (h + 31) / 32 * 32;
  const int64_t pw = (w + 31) / 32 * 32;

  Tensor padded = image;
  if (ph != h || pw != w) {
    // Replicate the last row/column so the padding does not fake a dark
    // (head-like) border.
    padded = Tensor::zeros({3, ph, pw});
    const double* src = image.data();
    double* dst = padded.data();
    for (int64_t c = 0; c < 3; ++c) {
      for (int64_t y = 0; y < ph; ++y) {
        const int64_t sy = std::min(y, h - 1);
        for (int64_t x = 0; x < pw; ++x) {
          const int64_t sx = std::min(x, w - 1);
          dst[(c * ph + y) * pw + x] = src[(c * h + sy) * w + sx];
        }
      }
    }
  }

  DensityMap dm = model.forward(reshape(padded, {1, 3, ph, pw}), false);
  InferResult r;
  r.grid = reshape(dm.grid, {dm.grid.dim(2), dm.grid.dim(3)});
  r.count = dm.count(0);
  r.padded_h = ph;
  r.padded_w = pw;
  return r;
}

void write_density_grid(const std::string& path, const Tensor& grid) {
  check(grid.ndim() == 2, "density grid: want a 2-D grid, got " +
                              shape_str(grid.shape()));
  std::ofstream out(path, std::ios::binary);
  check(out.is_open(), "density grid: cannot open '" + path + "' for writing");
  out.write("RCDG", 4);
  const uint64_t h = static_cast<uint64_t>(grid.dim(0));
  const uint64_t w = static_cast<uint64_t>(grid.dim(1));
  out.write(reinterpret_cast<const char*>(&h), 8);
  out.write(reinterpret_cast<const char*>(&w), 8);
  out.write(reinterpret_cast<const char*>(grid.data()),
            static_cast<std::streamsize>(grid.numel()) * 8);
  check(out.good(), "density grid: failed writing '" + path + "'");
}

Tensor read_density_grid(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  check(in.is_open(), "density grid: cannot open '" + path + "'");
  char magic[4];
  in.read(magic, 4);
  check(in.gcount() == 4 && std::memcmp(magic, "RCDG", 4) == 0,
        "density grid: '" + path + "' has the wrong magic");
  uint64_t h = 0, w = 0;
  in.read(reinterpret_cast<char*>(&h), 8);
  in.read(reinterpret_cast<char*>(&w), 8);
  check(in.good() && h > 0 && w > 0 && h < (1u << 20) && w < (1u << 20),
        "density grid: '" + path + "' has an implausible header");
  Tensor grid = Tensor::zeros({static_cast<int64_t>(h),
                               static_cast<int64_t>(w)});
  in.read(reinterpret_cast<char*>(grid.data()),
          static_cast<std::streamsize>(grid.numel()) * 8);
  check(in.gcount() == static_cast<std::streamsize>(grid.numel()) * 8,
        "density grid: '" + path + "' is truncated");
  return grid;
}

void write_heatmap_png(const std::string& path, const Tensor& grid,
                       int scale) {
  check(grid.ndim() == 2, "heatmap: want a 2-D grid, got " +
                              shape_str(grid.shape()));
  check(scale >= 1, "heatmap: scale must be >= 1");
  const int64_t gh = grid.dim(0);
  const int64_t gw = grid.dim(1);

  double peak = 0.0;
  for (int64_t i = 0; i < grid.numel(); ++i) {
    peak = std::max(peak, grid.data()[i]);
  }

  // Fixed four-stop palette, dark to bright.
  static constexpr double stops[4][3] = {{13, 8, 135},
                                         {156, 23, 158},
                                         {237, 121, 83},
                                         {240, 249, 33}};
  ImageU8 img;
  img.height = gh * scale;
  img.width = gw * scale;
  img.rgb.resize(static_cast<size_t>(img.height) * img.width * 3);
  for (int64_t y = 0; y < img.height; ++y) {
    for (int64_t x = 0; x < img.width; ++x) {
      const double v = grid.data()[(y / scale) * gw + (x / scale)];
      const double t = peak > 0.0 ? std::clamp(v / peak, 0.0, 1.0) : 0.0;
      const double pos = t * 3.0;
      const int seg = std::min(2, static_cast<int>(pos));
      const double frac = pos - seg;
      for (int c = 0; c < 3; ++c) {
        const double mixed =
            stops[seg][c] + frac * (stops[seg + 1][c] - stops[seg][c]);
        img.rgb[(y * img.width + x) * 3 + c] =
            static_cast<uint8_t>(std::lround(mixed));
      }
    }
  }
  write_png(path, img);
}

// --- Gradient certification -------------------------------------------------

namespace {

// Scalarizes an arbitrary tensor with fixed pseudo-random weights so every
// output element influences the objective differently.
Tensor pin(const Tensor& t, uint64_t salt) {
  Rng rng(salt);
  Tensor w = Tensor::rand_uniform(t.shape(), rng, 0.5, 1.5);
  return sum(mul(t, w));
}

std::vector<Tensor> trainables(ParamList& params) {
  std::vector<Tensor> out;
  for (NamedTensor& p : params) {
    if (p.trainable) out.push_back(p.value);
  }
  return out;
}

CertRow run_case(const std::string& name,
                 const std::function<Tensor(const std::vector<Tensor>&)>& f,
                 std::vector<Tensor> params, const GradCheckOpts& opts) {
  for (Tensor& p : params) p.set_requires_grad(true);
  GradCheckReport rep = grad_check(f, std::move(params), opts);
  return CertRow{name, rep.max_rel_err, opts.tol, rep.ok};
}

void certify_ops(std::vector<CertRow>& rows) {
  GradCheckOpts opts;
  opts.step = 1e-5;
  opts.tol = 1e-4;
  Rng rng(101);

  {
    Tensor a = Tensor::rand_uniform({3, 4}, rng, -1.0, 1.0);
    Tensor b = Tensor::rand_uniform({3, 4}, rng, 0.5, 1.5);
    Tensor c = Tensor::rand_uniform({4}, rng, 0.5, 1.5);  // broadcast arm
    rows.push_back(run_case(
        "add/sub/neg",
        [](const std::vector<Tensor>& p) {
          return pin(sub(add(p[0], p[1]), neg(p[2])), 1);
        },
        {a, b, c}, opts));
    rows.push_back(run_case(
        "mul/div",
        [](const std::vector<Tensor>& p) {
          return pin(div(mul(p[0], p[2]), p[1]), 2);
        },
        {a, b, c}, opts));
  }
  {
    Tensor a = Tensor::rand_uniform({2, 3, 4}, rng, -1.0, 1.0);
    Tensor b = Tensor::rand_uniform({4, 5}, rng, -1.0, 1.0);
    rows.push_back(run_case(
        "matmul",
        [](const std::vector<Tensor>& p) { return pin(matmul(p[0], p[1]), 3); },
        {a, b}, opts));
  }
  {
    Tensor a = Tensor::rand_uniform({2, 3, 4}, rng, -1.0, 1.0);
    rows.push_back(run_case(
        "transpose/reshape",
        [](const std::vector<Tensor>& p) {
          return pin(reshape(transpose(p[0], {2, 0, 1}), {4, 6}), 4);
        },
        {a}, opts));
  }
  {
    Tensor a = Tensor::rand_uniform({2, 3}, rng, -1.0, 1.0);
    Tensor b = Tensor::rand_uniform({2, 2}, rng, -1.0, 1.0);
    rows.push_back(run_case(
        "concat/slice",
        [](const std::vector<Tensor>& p) {
          Tensor cat = concat({p[0], p[1]}, 1);
          return pin(slice(cat, 1, 1, 3), 5);
        },
        {a, b}, opts));
  }
  {
    Tensor a = Tensor::rand_uniform({3, 1}, rng, -1.0, 1.0);
    rows.push_back(run_case(
        "broadcast_to",
        [](const std::vector<Tensor>& p) {
          return pin(broadcast_to(p[0], {2, 3, 4}), 6);
        },
        {a}, opts));
  }
  {
    Tensor a = Tensor::rand_uniform({3, 4}, rng, 0.2, 2.0);
    rows.push_back(run_case(
        "exp/log/sqrt",
        [](const std::vector<Tensor>& p) {
          return pin(exp(neg(log(sqrt(p[0])))), 7);
        },
        {a}, opts));
  }
  {
    // Keep every element away from the relu/abs kinks by more than the
    // finite-difference step.
    Tensor a = Tensor::rand_uniform({3, 4}, rng, 0.1, 1.0);
    Tensor b = Tensor::rand_uniform({3, 4}, rng, -1.0, -0.1);
    rows.push_back(run_case(
        "abs/relu/tanh/gelu",
        [](const std::vector<Tensor>& p) {
          return pin(add(abs(p[1]), add(relu(p[0]), add(tanh(p[0]),
                                                        gelu(p[1])))),
                     8);
        },
        {a, b}, opts));
  }
  {
    Tensor a = Tensor::rand_uniform({2, 3, 4}, rng, -1.0, 1.0);
    rows.push_back(run_case(
        "sum/mean axes",
        [](const std::vector<Tensor>& p) {
          return pin(add(sum(p[0], {1}), mean(p[0], {1})), 9);
        },
        {a}, opts));
  }
  {
    // Distinct values keep the max's argmax stable under the FD step.
    Tensor a = Tensor::from_data({2, 3}, {0.1, 0.9, 0.4, 0.8, 0.2, 0.6});
    rows.push_back(run_case(
        "max",
        [](const std::vector<Tensor>& p) {
          return pin(max(p[0], {1}), 10);
        },
        {a}, opts));
  }
  {
    Tensor x = Tensor::rand_uniform({2, 4, 6, 6}, rng, -1.0, 1.0);
    Conv2dSpec spec;
    spec.stride = 2;
    spec.padding = 1;
    spec.dilation = 2;
    spec.groups = 2;
    Tensor w = Tensor::rand_uniform({6, 2, 3, 3}, rng, -0.5, 0.5);
    Tensor b = Tensor::rand_uniform({6}, rng, -0.5, 0.5);
    rows.push_back(run_case(
        "conv2d grouped/dilated",
        [spec](const std::vector<Tensor>& p) {
          return pin(conv2d(p[0], p[1], p[2], spec), 11);
        },
        {x, w, b}, opts));
  }
  {
    Tensor x = Tensor::rand_uniform({2, 4, 5, 5}, rng, -1.0, 1.0);
    Conv2dSpec spec;
    spec.padding = 1;
    spec.groups = 4;  // depthwise
    Tensor w = Tensor::rand_uniform({4, 1, 3, 3}, rng, -0.5, 0.5);
    rows.push_back(run_case(
        "conv2d depthwise",
        [spec](const std::vector<Tensor>& p) {
          return pin(conv2d(p[0], p[1], Tensor(), spec), 12);
        },
        {x, w}, opts));
  }
  {
    Tensor x = Tensor::rand_uniform({2, 5, 3}, rng, -1.0, 1.0);
    Tensor w = Tensor::rand_uniform({3, 4}, rng, -0.5, 0.5);
    Tensor b = Tensor::rand_uniform({4}, rng, -0.5, 0.5);
    rows.push_back(run_case(
        "linear",
        [](const std::vector<Tensor>& p) {
          return pin(linear(p[0], p[1], p[2]), 13);
        },
        {x, w, b}, opts));
  }
  {
    Tensor x = Tensor::rand_uniform({2, 5, 6}, rng, -1.0, 1.0);
    Tensor gamma = Tensor::rand_uniform({6}, rng, 0.5, 1.5);
    Tensor beta = Tensor::rand_uniform({6}, rng, -0.5, 0.5);
    rows.push_back(run_case(
        "layer_norm",
        [](const std::vector<Tensor>& p) {
          return pin(layer_norm(p[0], p[1], p[2], 1e-5), 14);
        },
        {x, gamma, beta}, opts));
  }
  {
    Tensor x = Tensor::rand_uniform({3, 4, 2, 2}, rng, -1.0, 1.0);
    BatchNorm2d bn = BatchNorm2d::make(4);
    Rng brng(7);
    bn.gamma = Tensor::rand_uniform({4}, brng, 0.5, 1.5);
    bn.beta = Tensor::rand_uniform({4}, brng, -0.5, 0.5);
    rows.push_back(run_case(
        "batch_norm training",
        [bn](const std::vector<Tensor>& p) mutable {
          return pin(bn.forward(p[0], true), 15);
        },
        {x, bn.gamma, bn.beta}, opts));
  }
  {
    Tensor x = Tensor::rand_uniform({2, 3, 4, 5}, rng, -1.0, 1.0);
    Tensor coords = Tensor::rand_uniform({2, 6, 2}, rng, 0.4, 3.2);
    rows.push_back(run_case(
        "bilinear_sample",
        [](const std::vector<Tensor>& p) {
          return pin(bilinear_sample(p[0], p[1]), 16);
        },
        {x, coords}, opts));
  }
  {
    Tensor x = Tensor::rand_uniform({1, 3, 3, 4}, rng, -1.0, 1.0);
    rows.push_back(run_case(
        "upsample_bilinear",
        [](const std::vector<Tensor>& p) {
          return pin(upsample_bilinear(p[0], 2), 17);
        },
        {x}, opts));
  }
}

// Finite differences need a smooth point: fresh IdConvs put every bilinear
// tap exactly on an integer coordinate (a kink of the interpolation) and
// the weight-branch BN output exactly on the relu kink. Nudging the offset
// net and the BN shift moves the check to a generic point.
void nudge_off_kinks(IdConv& c, Rng& rng) {
  if (c.mode != ConvMode::kVanilla) {
    for (int64_t i = 0; i < c.offset_conv.w.numel(); ++i) {
      c.offset_conv.w.data()[i] = 0.02 * rng.normal();
    }
    for (int64_t i = 0; i < c.offset_conv.b.numel(); ++i) {
      c.offset_conv.b.data()[i] = rng.uniform() * 0.2 + 0.2;
    }
  }
  if (c.mode == ConvMode::kIdconv) {
    for (int64_t i = 0; i < c.wb_bn.beta.numel(); ++i) {
      c.wb_bn.beta.data()[i] = 0.3 * (rng.bernoulli(0.5) ? 1.0 : -1.0);
    }
  }
}

void certify_blocks(std::vector<CertRow>& rows) {
  GradCheckOpts opts;
  opts.step = 1e-5;
  opts.tol = 1e-3;
  opts.max_samples = 500;
  opts.sample_seed = 1;
  Rng rng(202);

  {
    DeaAttention attn = DeaAttention::make(rng, 16, 4, AttentionMode::kDea,
                                           1, 3, 0.6);
    Tensor x = Tensor::rand_uniform({2, 16, 16}, rng, -1.0, 1.0);
    ParamList pl;
    attn.collect("attn", pl);
    std::vector<Tensor> params = trainables(pl);
    params.push_back(x);
    rows.push_back(run_case(
        "dea attention",
        [attn, x](const std::vector<Tensor>&) {
          return pin(attn.forward(x, 4, 4), 21);
        },
        std::move(params), opts));
  }
  {
    Deab block = Deab::make(rng, 16, 4, AttentionMode::kDea, 1, 2, 3, 0.6);
    Tensor x = Tensor::rand_uniform({2, 16, 16}, rng, -1.0, 1.0);
    ParamList pl;
    block.collect("deab", pl);
    std::vector<Tensor> params = trainables(pl);
    params.push_back(x);
    rows.push_back(run_case(
        "deab block",
        [block, x](const std::vector<Tensor>&) {
          return pin(block.forward(x, 4, 4), 22);
        },
        std::move(params), opts));
  }
  {
    Mffm mffm = Mffm::make(rng, {8, 12, 16}, 16, 4, FuseMode::kMffm);
    FeaturePyramid pyr;
    pyr.f2 = Tensor::rand_uniform({2, 8, 4, 4}, rng, -1.0, 1.0);
    pyr.f3 = Tensor::rand_uniform({2, 12, 2, 2}, rng, -1.0, 1.0);
    pyr.f4 = Tensor::rand_uniform({2, 16, 1, 1}, rng, -1.0, 1.0);
    ParamList pl;
    mffm.collect("mffm", pl);
    std::vector<Tensor> params = trainables(pl);
    params.push_back(pyr.f2);
    params.push_back(pyr.f3);
    params.push_back(pyr.f4);
    rows.push_back(run_case(
        "mffm fusion",
        [mffm, pyr](const std::vector<Tensor>&) {
          return pin(mffm.forward(pyr), 23);
        },
        std::move(params), opts));
  }
  // Conv biases feeding straight into a batch norm have exactly-zero true
  // gradient; there the finite difference is pure cancellation noise scaled
  // by |f|, so these two cases keep the noise floor above it.
  GradCheckOpts bn_opts = opts;
  bn_opts.denom_floor = 1e-4;
  {
    IdConv conv = IdConv::make(rng, 8, 2, ConvMode::kIdconv);
    nudge_off_kinks(conv, rng);
    Tensor x = Tensor::rand_uniform({2, 8, 5, 5}, rng, -1.0, 1.0);
    ParamList pl;
    conv.collect("idconv", pl);
    std::vector<Tensor> params = trainables(pl);
    params.push_back(x);
    rows.push_back(run_case(
        "idconv",
        [conv, x](const std::vector<Tensor>&) mutable {
          return pin(conv.forward(x, true), 24);
        },
        std::move(params), bn_opts));
  }
  {
    Asam asam = Asam::make(rng, 16, ConvMode::kIdconv);
    nudge_off_kinks(asam.entry_idconv, rng);
    for (IdConv& b : asam.branches) nudge_off_kinks(b, rng);
    Tensor x = Tensor::rand_uniform({2, 16, 5, 5}, rng, -1.0, 1.0);
    ParamList pl;
    asam.collect("asam", pl);
    std::vector<Tensor> params = trainables(pl);
    params.push_back(x);
    rows.push_back(run_case(
        "asam",
        [asam, x](const std::vector<Tensor>&) mutable {
          return pin(asam.forward(x, true), 25);
        },
        std::move(params), bn_opts));
  }
  {
    // The transport term of the objective, including the normalizations.
    Tensor pred = Tensor::rand_uniform({4, 4}, rng, 0.3, 1.0);
    Tensor gt = Tensor::zeros({4, 4});
    gt.data()[1 * 4 + 2] = 2.0;
    gt.data()[3 * 4 + 0] = 1.0;
    LossConfig lc;
    lc.sinkhorn_iters = 40;
    rows.push_back(run_case(
        "sinkhorn composite",
        [gt, lc](const std::vector<Tensor>& p) {
          return composite_loss(p[0], gt, lc);
        },
        {pred}, opts));
  }
}

void certify_model(std::vector<CertRow>& rows) {
  GradCheckOpts opts;
  opts.step = 1e-5;
  opts.tol = 1e-3;
  opts.max_samples = 50;
  opts.sample_seed = 2;
  // The objective is O(10) here while structurally-dead directions (conv
  // biases feeding a batch norm) have exactly-zero gradient, so the floor
  // must sit above that cancellation noise.
  opts.denom_floor = 1e-4;

  ModelConfig cfg;
  cfg.backbone.channels = {8, 16, 24, 32};
  cfg.backbone.depths = {1, 1, 1, 1};
  cfg.backbone.heads = {1, 2, 4, 4};
  cfg.c_f = 16;
  cfg.deab_depth = 1;
  cfg.heads = 4;
  cfg.head_eps = 0.01;

  Rng rng(303);
  CrowdCounter model = CrowdCounter::make(rng, cfg);
  nudge_off_kinks(model.asam.entry_idconv, rng);
  for (IdConv& b : model.asam.branches) nudge_off_kinks(b, rng);
  // Every reduced key grid stays at least 2x2 at 64x64, so no stage's
  // attention collapses to a constant softmax.
  Tensor x = Tensor::rand_uniform({2, 3, 64, 64}, rng, 0.0, 1.0);
  Tensor gt0 = Tensor::zeros({8, 8});
  gt0.data()[1 * 8 + 2] = 1.0;
  gt0.data()[4 * 8 + 6] = 2.0;
  Tensor gt1 = Tensor::zeros({8, 8});
  gt1.data()[5 * 8 + 3] = 1.0;
  LossConfig lc;
  lc.sinkhorn_iters = 40;

  ParamList pl = model.parameters();
  std::vector<Tensor> params = trainables(pl);
  rows.push_back(run_case(
      "model composite loss",
      [&model, x, gt0, gt1, lc](const std::vector<Tensor>&) {
        DensityMap dm = model.forward(x, true);
        const int64_t gh = dm.grid.dim(2);
        const int64_t gw = dm.grid.dim(3);
        Tensor p0 = reshape(slice(dm.grid, 0, 0, 1), {gh, gw});
        Tensor p1 = reshape(slice(dm.grid, 0, 1, 1), {gh, gw});
        return add(composite_loss(p0, gt0, lc), composite_loss(p1, gt1, lc));
      },
      std::move(params), opts));
}

}  // namespace

std::vector<CertRow> certify_gradients(const std::string& scope) {
  std::vector<CertRow> rows;
  if (scope == "ops") {
    certify_ops(rows);
  } else if (scope == "blocks") {
    certify_blocks(rows);
  } else if (scope == "model") {
    certify_model(rows);
  } else {
    check(false, "gradcheck: unknown scope '" + scope +
                     "' (want ops|blocks|model)");
  }
  return rows;
}

// --- Ablation matrices ------------------------------------------------------

std::vector<AblateRow> ablate_matrix(const std::string& matrix,
                                     const TrainConfig& base,
                                     const std::string& out_dir) {
  struct RowSpec {
    std::string name;
    std::function<void(ModelConfig&)> tweak;
  };
  std::vector<RowSpec> rows;
  if (matrix == "table3") {
    rows = {
        {"baseline",
         [](ModelConfig& m) {
           m.mffm_mode = "off";
           m.use_deab = false;
           m.use_asam = false;
         }},
        {"+ mffm",
         [](ModelConfig& m) {
           m.use_deab = false;
           m.use_asam = false;
         }},
        {"+ deab", [](ModelConfig& m) { m.use_asam = false; }},
        {"+ asam", [](ModelConfig&) {}},
    };
  } else if (matrix == "table4") {
    for (const char* mode : {"add", "concat", "concat_add_add",
                             "concat_add_concat", "mffm"}) {
      rows.push_back({mode, [mode](ModelConfig& m) { m.mffm_mode = mode; }});
    }
  } else if (matrix == "table6") {
    for (const char* mode : {"gsa", "gsa_local_conv", "dea"}) {
      rows.push_back(
          {mode, [mode](ModelConfig& m) { m.attention_mode = mode; }});
    }
  } else if (matrix == "table7") {
    for (const char* mode : {"vanilla", "deformable", "idconv"}) {
      rows.push_back({mode, [mode](ModelConfig& m) { m.idconv_mode = mode; }});
    }
  } else {
    check(false, "ablate: unknown matrix '" + matrix +
                     "' (want table3|table4|table6|table7)");
  }

  fs::create_directories(out_dir);
  std::vector<AblateRow> out;
  for (size_t i = 0; i < rows.size(); ++i) {
    TrainConfig cfg = base;
    rows[i].tweak(cfg.model);
    const std::string slug = matrix + "_row" + std::to_string(i);
    cfg.checkpoint = out_dir + "/" + slug + ".ckpt";
    cfg.log_path = out_dir + "/" + slug + ".jsonl";
    TrainResult r = train_model(cfg);
    check(!r.aborted,
          "ablate: row '" + rows[i].name + "' aborted: " + r.abort_reason);
    check(r.best_epoch >= 1, "ablate: row '" + rows[i].name +
                                 "' finished without a validated epoch");
    const EpochStats& best = r.epochs[static_cast<size_t>(r.best_epoch - 1)];
    out.push_back({rows[i].name, best.val_mae, best.val_mse});
  }
  return out;
}

}  // namespace rcc
