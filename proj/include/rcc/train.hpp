#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "rcc/data.hpp"
#include "rcc/losses.hpp"
#include "rcc/metrics.hpp"
#include "rcc/model.hpp"
#include "rcc/nnops.hpp"

namespace rcc {

struct OptimConfig {
  double lr = 1e-5;
  double weight_decay = 1e-4;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

// Adam with decoupled weight decay over a fixed parameter list. Gradients
// accumulate on the tensors during tape backward; step() consumes and
// clears them. Non-trainable entries (running stats) pass through untouched.
class AdamW {
 public:
  explicit AdamW(ParamList params, const OptimConfig& cfg = {});
  void step();
  int64_t steps() const { return steps_; }

 private:
  ParamList params_;
  OptimConfig cfg_;
  std::vector<std::vector<double>> m_, v_;
  int64_t steps_ = 0;
};

// One training run, fully reproducible from this struct. The flat JSON
// schema accepts every field below plus the model-config keys at top level.
struct TrainConfig {
  TrainConfig() {
    // A strictly positive output floor keeps the transport loss defined even
    // when every head cell starts in the dead half of the relu.
    model.head_eps = 0.01;
  }
  ModelConfig model;
  LossConfig loss;
  OptimConfig optim;
  int64_t epochs = 30;
  int64_t batch_size = 4;
  int64_t crop = 128;  // training crop edge, multiple of 32
  uint64_t seed = 0;
  std::string train_dir = "data/train";
  std::string val_dir = "data/val";
  std::string checkpoint = "model.ckpt";
  std::string log_path = "train_log.jsonl";
  // Off by default so identical (config, seed) runs write byte-identical
  // logs; turning it on fills "seconds" with real wall time instead of 0.
  bool log_timing = false;
};

TrainConfig train_config_from_json(const std::string& text);
std::string train_config_to_json(const TrainConfig& cfg);

struct EpochStats {
  int64_t epoch = 0;
  double train_loss = 0.0;
  double val_mae = 0.0;
  double val_mse = 0.0;
  double val_nae = 0.0;
  double seconds = 0.0;
};

struct TrainResult {
  std::vector<EpochStats> epochs;
  double best_val_mae = 0.0;  // +inf when no epoch validated
  int64_t best_epoch = -1;
  bool aborted = false;
  std::string abort_reason;
};

struct Dataset {
  std::vector<Sample> samples;
};

// Loads every manifest row's image and annotation into memory.
Dataset load_dataset(const std::string& root);

// Runs the training loop: shuffled batches, crop/flip augmentation, AdamW
// on the composite loss, one JSONL log line per epoch, and a checkpoint at
// every new best validation MAE (plus one of the raw initialization, so an
// abort always leaves a loadable file). A non-finite loss or prediction
// aborts and keeps the last good checkpoint and log lines.
TrainResult train_model(const TrainConfig& cfg);

// One gradient-free forward per image. `threads` > 1 fans out over workers;
// records land in image order, so results match the serial run exactly.
std::vector<CountRecord> evaluate_dataset(CrowdCounter& model,
                                          const Dataset& data,
                                          int threads = 1);

// --- Dataset synthesis ----------------------------------------------------

struct SynthConfig {
  int64_t n_train = 200;
  int64_t n_val = 40;
  int64_t height = 128;
  int64_t width = 128;
  int64_t people_min = 18;  // per-scene head count range (inclusive)
  int64_t people_max = 42;
  double empty_fraction = 0.05;  // chance a scene is a zero-person negative
  double min_separation = 3.0;
  int64_t distractors = 6;
  uint64_t seed = 0;
  bool force = false;  // replace an existing non-empty out_dir
};

// Writes <out_dir>/train and <out_dir>/val datasets. Scene seeds are
// seed + i for train and seed + 2^20 + i for val, so the two splits can
// never share a scene.
void synth_dataset(const SynthConfig& cfg, const std::string& out_dir);

// --- Inference ------------------------------------------------------------

struct InferResult {
  Tensor grid;     // [gh, gw] density cells
  double count = 0.0;
  int64_t padded_h = 0;  // image size actually fed (after /32 padding)
  int64_t padded_w = 0;
};

// Pads a [3, H, W] image to the next multiple of 32 by edge replication,
// runs the model, and returns the density grid with its total.
InferResult infer_image(CrowdCounter& model, const Tensor& image);

// Raw grid file: 4-byte magic "RCDG", u64 H, u64 W, then H*W little-endian
// f64 cells, row-major.
void write_density_grid(const std::string& path, const Tensor& grid);
Tensor read_density_grid(const std::string& path);

// Fixed-palette heatmap, each grid cell rendered as a scale x scale block.
void write_heatmap_png(const std::string& path, const Tensor& grid,
                       int scale = 8);

// --- Gradient certification and ablations ---------------------------------

struct CertRow {
  std::string name;
  double max_rel_err = 0.0;
  double tol = 0.0;
  bool ok = false;
};

// scope "ops": every tensor primitive against finite differences at 1e-4.
// scope "blocks": each architecture block and the transport loss at 1e-3.
// scope "model": the end-to-end loss over subsampled parameters at 1e-3.
std::vector<CertRow> certify_gradients(const std::string& scope);

struct AblateRow {
  std::string name;
  double mae = 0.0;
  double mse = 0.0;
};

// Trains one configuration per row of the requested comparison matrix with
// a shared seed and budget, evaluating each at its best-validation epoch.
// Matrices: "table3" component stack, "table4" fusion modes, "table6"
// attention modes, "table7" convolution modes.
std::vector<AblateRow> ablate_matrix(const std::string& matrix,
                                     const TrainConfig& base,
                                     const std::string& out_dir);

}  // namespace rcc
