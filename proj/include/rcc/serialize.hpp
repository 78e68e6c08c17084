#pragma once

#include <string>

#include "rcc/model.hpp"

namespace rcc {

// Checkpoint byte layout, all integers little-endian:
//   bytes 0..3    magic "RCKP"
//   u32           format version, currently 1
//   u64           config length in bytes
//   ...           model config as JSON text (config_to_json)
//   u64           parameter count
//   per parameter, in the model's registration order:
//     u32         name length, then that many name bytes
//     u32         rank, then rank u64 dims
//     f64 * numel row-major payload
// Non-trainable entries (batch-norm running stats) are stored too, so a
// reloaded model evaluates identically.
void save_checkpoint(const std::string& path, CrowdCounter& model);

// Rebuilds the model from the embedded config, then overwrites every
// parameter with the stored payload. Names and shapes must match the
// rebuilt model exactly.
CrowdCounter load_checkpoint(const std::string& path);

// Reads only the embedded config, for tools that need the metadata.
ModelConfig peek_checkpoint_config(const std::string& path);

}  // namespace rcc
