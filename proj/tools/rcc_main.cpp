// rcc: batch entry points for the crowd-counting pipeline.
//
//   rcc synth     --out DIR [--config FILE] [--seed N] [--force]
//   rcc train     --config FILE [--seed N] [--out DIR]
//   rcc eval      CHECKPOINT DATASET [--out FILE]
//   rcc infer     CHECKPOINT IMAGE --out DIR
//   rcc gradcheck SCOPE            (ops | blocks | model)
//   rcc ablate    MATRIX --config FILE --out DIR [--seed N]
//
// Every command is deterministic under a fixed seed: rerunning with the
// same config and seed reproduces each artifact byte for byte. RCC_THREADS
// caps evaluation parallelism (default 1).

#include <CLI11.hpp>
#include <json.hpp>

#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <sstream>
#include <string>

#include "rcc/png_io.hpp"
#include "rcc/serialize.hpp"
#include "rcc/train.hpp"

namespace fs = std::filesystem;

namespace {

std::string read_text_file(const std::string& path) {
  std::ifstream in(path);
  rcc::check(in.is_open(), "cannot open config '" + path + "'");
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

int eval_threads() {
  const char* env = std::getenv("RCC_THREADS");
  if (env == nullptr || *env == '\0') return 1;
  char* end = nullptr;
  const long v = std::strtol(env, &end, 10);
  rcc::check(end != nullptr && *end == '\0' && v >= 1 && v <= 64,
             std::string("RCC_THREADS must be an integer in [1, 64], got '") +
                 env + "'");
  return static_cast<int>(v);
}

// Output paths from a config are laid down relative to --out when one is
// given; absolute paths in the config win.
std::string under(const std::string& out_dir, const std::string& path) {
  if (out_dir.empty() || fs::path(path).is_absolute()) return path;
  return (fs::path(out_dir) / path).string();
}

rcc::SynthConfig synth_config_from_json(const std::string& text) {
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(text);
  } catch (const std::exception& e) {
    rcc::check(false, std::string("config: ") + e.what());
  }
  rcc::check(j.is_object(), "config: top level must be a JSON object");
  rcc::SynthConfig cfg;
  for (const auto& [key, val] : j.items()) {
    const bool is_int = val.is_number_integer();
    const bool is_num = val.is_number();
    if (key == "n_train" && is_int) {
      cfg.n_train = val.get<int64_t>();
    } else if (key == "n_val" && is_int) {
      cfg.n_val = val.get<int64_t>();
    } else if (key == "height" && is_int) {
      cfg.height = val.get<int64_t>();
    } else if (key == "width" && is_int) {
      cfg.width = val.get<int64_t>();
    } else if (key == "people_min" && is_int) {
      cfg.people_min = val.get<int64_t>();
    } else if (key == "people_max" && is_int) {
      cfg.people_max = val.get<int64_t>();
    } else if (key == "empty_fraction" && is_num) {
      cfg.empty_fraction = val.get<double>();
    } else if (key == "min_separation" && is_num) {
      cfg.min_separation = val.get<double>();
    } else if (key == "distractors" && is_int) {
      cfg.distractors = val.get<int64_t>();
    } else if (key == "seed" && is_int) {
      cfg.seed = val.get<uint64_t>();
    } else {
      rcc::check(false, "config: unknown or mistyped synth key '" + key + "'");
    }
  }
  return cfg;
}

rcc::Tensor image_to_tensor(const rcc::ImageU8& img) {
  rcc::Tensor t = rcc::Tensor::zeros({3, img.height, img.width});
  double* d = t.data();
  const int64_t hw = img.height * img.width;
  for (int64_t i = 0; i < hw; ++i) {
    for (int64_t c = 0; c < 3; ++c) {
      d[c * hw + i] = static_cast<double>(img.rgb[i * 3 + c]) / 255.0;
    }
  }
  return t;
}

int cmd_synth(const std::string& out_dir, const std::string& config_path,
              bool seed_given, uint64_t seed, bool force) {
  rcc::SynthConfig cfg;
  if (!config_path.empty()) {
    cfg = synth_config_from_json(read_text_file(config_path));
  }
  if (seed_given) cfg.seed = seed;
  cfg.force = force;
  rcc::synth_dataset(cfg, out_dir);
  std::printf("wrote %lld train + %lld val scenes under %s\n",
              static_cast<long long>(cfg.n_train),
              static_cast<long long>(cfg.n_val), out_dir.c_str());
  return 0;
}

int cmd_train(const std::string& config_path, bool seed_given, uint64_t seed,
              const std::string& out_dir) {
  rcc::TrainConfig cfg = rcc::train_config_from_json(read_text_file(config_path));
  if (seed_given) cfg.seed = seed;
  if (!out_dir.empty()) {
    fs::create_directories(out_dir);
    cfg.checkpoint = under(out_dir, cfg.checkpoint);
    cfg.log_path = under(out_dir, cfg.log_path);
  }
  rcc::TrainResult r = rcc::train_model(cfg);
  if (r.aborted) {
    std::fprintf(stderr, "train: aborted: %s; last good checkpoint kept at %s\n",
                 r.abort_reason.c_str(), cfg.checkpoint.c_str());
    return 1;
  }
  if (cfg.epochs == 0) {
    std::printf("wrote initialization checkpoint %s\n", cfg.checkpoint.c_str());
    return 0;
  }
  std::printf("best val MAE %.6f at epoch %lld; checkpoint %s, log %s\n",
              r.best_val_mae, static_cast<long long>(r.best_epoch),
              cfg.checkpoint.c_str(), cfg.log_path.c_str());
  return 0;
}

int cmd_eval(const std::string& ckpt_path, const std::string& data_dir,
             const std::string& out_path) {
  rcc::CrowdCounter model = rcc::load_checkpoint(ckpt_path);
  rcc::Dataset data = rcc::load_dataset(data_dir);
  for (const rcc::Sample& s : data.samples) {
    const int64_t h = s.image.dim(1);
    const int64_t w = s.image.dim(2);
    rcc::check(h % 32 == 0 && w % 32 == 0,
               "eval: '" + s.id + "' is " + std::to_string(h) + "x" +
                   std::to_string(w) +
                   "; the checkpoint's pyramid wants multiples of 32 "
                   "(infer pads, eval does not)");
  }
  std::vector<rcc::CountRecord> recs =
      rcc::evaluate_dataset(model, data, eval_threads());
  rcc::MetricSummary m = rcc::summarize(recs);
  std::fputs(rcc::render_text(m).c_str(), stdout);
  if (!out_path.empty()) {
    std::ofstream out(out_path);
    rcc::check(out.is_open(), "eval: cannot open '" + out_path + "'");
    out << rcc::render_jsonl(recs);
    rcc::check(out.good(), "eval: failed writing '" + out_path + "'");
  }
  return 0;
}

int cmd_infer(const std::string& ckpt_path, const std::string& image_path,
              const std::string& out_dir) {
  rcc::CrowdCounter model = rcc::load_checkpoint(ckpt_path);
  rcc::ImageU8 img = rcc::read_png(image_path);
  rcc::Tensor image = image_to_tensor(img);
  rcc::InferResult r = rcc::infer_image(model, image);
  if (r.padded_h != img.height || r.padded_w != img.width) {
    std::fprintf(stderr, "infer: padded %lldx%lld to %lldx%lld\n",
                 static_cast<long long>(img.height),
                 static_cast<long long>(img.width),
                 static_cast<long long>(r.padded_h),
                 static_cast<long long>(r.padded_w));
  }
  fs::create_directories(out_dir);
  const std::string stem = fs::path(image_path).stem().string();
  rcc::write_density_grid(under(out_dir, stem + ".grid"), r.grid);
  rcc::write_heatmap_png(under(out_dir, stem + ".heatmap.png"), r.grid);
  std::printf("%.12f\n", r.count);
  return 0;
}

int cmd_gradcheck(const std::string& scope) {
  std::vector<rcc::CertRow> rows = rcc::certify_gradients(scope);
  std::printf("%-28s %14s %10s  %s\n", "case", "max rel err", "tol", "status");
  bool all_ok = true;
  for (const rcc::CertRow& r : rows) {
    std::printf("%-28s %14.3e %10.0e  %s\n", r.name.c_str(), r.max_rel_err,
                r.tol, r.ok ? "pass" : "FAIL");
    all_ok = all_ok && r.ok;
  }
  return all_ok ? 0 : 1;
}

int cmd_ablate(const std::string& matrix, const std::string& config_path,
               bool seed_given, uint64_t seed, const std::string& out_dir) {
  rcc::TrainConfig base =
      rcc::train_config_from_json(read_text_file(config_path));
  if (seed_given) base.seed = seed;
  std::vector<rcc::AblateRow> rows =
      rcc::ablate_matrix(matrix, base, out_dir);
  std::printf("%s, seed %llu, %lld epochs per row\n", matrix.c_str(),
              static_cast<unsigned long long>(base.seed),
              static_cast<long long>(base.epochs));
  std::printf("%-20s %10s %10s\n", "row", "val MAE", "val MSE");
  nlohmann::json report = nlohmann::json::array();
  for (const rcc::AblateRow& r : rows) {
    std::printf("%-20s %10.3f %10.3f\n", r.name.c_str(), r.mae, r.mse);
    report.push_back({{"row", r.name}, {"mae", r.mae}, {"mse", r.mse}});
  }
  const std::string report_path =
      (fs::path(out_dir) / (matrix + "_report.json")).string();
  std::ofstream out(report_path);
  rcc::check(out.is_open(), "ablate: cannot open '" + report_path + "'");
  out << report.dump(2) << "\n";
  rcc::check(out.good(), "ablate: failed writing '" + report_path + "'");
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"crowd counting: synthesize data, train, evaluate, infer"};
  app.require_subcommand(1);

  std::string config_path, out_dir, out_file;
  uint64_t seed = 0;
  bool force = false;

  CLI::App* synth = app.add_subcommand("synth", "write a synthetic dataset");
  synth->add_option("--out", out_dir, "dataset directory")->required();
  synth->add_option("--config", config_path, "synth config JSON");
  CLI::Option* synth_seed = synth->add_option("--seed", seed, "scene seed base");
  synth->add_flag("--force", force, "replace an existing dataset");

  CLI::App* train = app.add_subcommand("train", "train a counting model");
  train->add_option("--config", config_path, "training config JSON")->required();
  CLI::Option* train_seed = train->add_option("--seed", seed, "run seed");
  train->add_option("--out", out_dir, "directory for checkpoint and log");

  std::string ckpt_path, data_dir, image_path, scope, matrix;
  CLI::App* eval = app.add_subcommand("eval", "evaluate a checkpoint");
  eval->add_option("checkpoint", ckpt_path, "model checkpoint")->required();
  eval->add_option("dataset", data_dir, "dataset directory")->required();
  eval->add_option("--out", out_file, "also write per-image records (JSONL)");

  CLI::App* infer = app.add_subcommand("infer", "run one image");
  infer->add_option("checkpoint", ckpt_path, "model checkpoint")->required();
  infer->add_option("image", image_path, "input PNG")->required();
  infer->add_option("--out", out_dir, "directory for grid and heatmap")
      ->required();

  CLI::App* gradcheck =
      app.add_subcommand("gradcheck", "certify gradients against finite differences");
  gradcheck->add_option("scope", scope, "ops | blocks | model")->required();

  CLI::App* ablate = app.add_subcommand("ablate", "train one comparison matrix");
  ablate->add_option("matrix", matrix, "table3 | table4 | table6 | table7")
      ->required();
  ablate->add_option("--config", config_path, "base training config JSON")
      ->required();
  ablate->add_option("--out", out_dir, "directory for row artifacts")
      ->required();
  CLI::Option* ablate_seed = ablate->add_option("--seed", seed, "run seed");

  CLI11_PARSE(app, argc, argv);

  try {
    if (synth->parsed()) {
      return cmd_synth(out_dir, config_path, !synth_seed->empty(), seed, force);
    }
    if (train->parsed()) {
      return cmd_train(config_path, !train_seed->empty(), seed, out_dir);
    }
    if (eval->parsed()) return cmd_eval(ckpt_path, data_dir, out_file);
    if (infer->parsed()) return cmd_infer(ckpt_path, image_path, out_dir);
    if (gradcheck->parsed()) return cmd_gradcheck(scope);
    if (ablate->parsed()) {
      return cmd_ablate(matrix, config_path, !ablate_seed->empty(), seed,
                        out_dir);
    }
  } catch (const std::exception& e) {
    std::fprintf(stderr, "rcc: %s\n", e.what());
    return 1;
  }
  return 0;
}
