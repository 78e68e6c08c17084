#include "rcc/serialize.hpp"

#include <bit>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <string>
#include <vector>

namespace rcc {

namespace {

// The format is defined little-endian and the writer emits native bytes.
static_assert(std::endian::native == std::endian::little,
              "checkpoint io assumes a little-endian host");

constexpr char kMagic[4] = {'R', 'C', 'K', 'P'};
constexpr uint32_t kVersion = 1;

void put_u32(std::ofstream& out, uint32_t v) {
  out.write(reinterpret_cast<const char*>(&v), sizeof v);
}

void put_u64(std::ofstream& out, uint64_t v) {
  out.write(reinterpret_cast<const char*>(&v), sizeof v);
}

void take_bytes(std::ifstream& in, void* dst, size_t n,
                const std::string& path) {
  in.read(static_cast<char*>(dst), static_cast<std::streamsize>(n));
  check(static_cast<size_t>(in.gcount()) == n,
        "checkpoint: '" + path + "' is truncated");
}

uint32_t take_u32(std::ifstream& in, const std::string& path) {
  uint32_t v = 0;
  take_bytes(in, &v, sizeof v, path);
  return v;
}

uint64_t take_u64(std::ifstream& in, const std::string& path) {
  uint64_t v = 0;
  take_bytes(in, &v, sizeof v, path);
  return v;
}

// Reads through the header and returns the embedded config text.
std::string read_header(std::ifstream& in, const std::string& path) {
  char magic[4];
  take_bytes(in, magic, 4, path);
  check(std::memcmp(magic, kMagic, 4) == 0,
        "checkpoint: '" + path + "' is not a checkpoint (bad magic)");
  const uint32_t version = take_u32(in, path);
  check(version == kVersion, "checkpoint: unsupported format version " +
                                 std::to_string(version));
  const uint64_t cfg_len = take_u64(in, path);
  check(cfg_len < (1u << 20), "checkpoint: implausible config length");
  std::string cfg(cfg_len, '\0');
  take_bytes(in, cfg.data(), cfg_len, path);
  return cfg;
}

}  // namespace

void save_checkpoint(const std::string& path, CrowdCounter& model) {
  std::ofstream out(path, std::ios::binary);
  check(out.is_open(), "checkpoint: cannot open '" + path + "' for writing");

  out.write(kMagic, 4);
  put_u32(out, kVersion);
  const std::string cfg = config_to_json(model.config);
  put_u64(out, cfg.size());
  out.write(cfg.data(), static_cast<std::streamsize>(cfg.size()));

  ParamList params = model.parameters();
  put_u64(out, params.size());
  for (const NamedTensor& p : params) {
    put_u32(out, static_cast<uint32_t>(p.name.size()));
    out.write(p.name.data(), static_cast<std::streamsize>(p.name.size()));
    put_u32(out, static_cast<uint32_t>(p.value.ndim()));
    for (int64_t d = 0; d < p.value.ndim(); ++d) {
      put_u64(out, static_cast<uint64_t>(p.value.dim(d)));
    }
    out.write(reinterpret_cast<const char*>(p.value.data()),
              static_cast<std::streamsize>(p.value.numel()) * 8);
  }
  check(out.good(), "checkpoint: failed writing '" + path + "'");
}

CrowdCounter load_checkpoint(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  check(in.is_open(), "checkpoint: cannot open '" + path + "'");
  const std::string cfg = read_header(in, path);
  ModelConfig mc = config_from_json(cfg);

  // Every stored entry overwrites the fresh initialization below, so the
  // seed here has no bearing on the loaded weights.
  Rng rng(0);
  CrowdCounter model = CrowdCounter::make(rng, mc);
  ParamList params = model.parameters();

  const uint64_t count = take_u64(in, path);
  check(count == params.size(),
        "checkpoint: holds " + std::to_string(count) +
            " parameters, the model wants " + std::to_string(params.size()));
  for (size_t i = 0; i < params.size(); ++i) {
    const uint32_t name_len = take_u32(in, path);
    check(name_len < 4096, "checkpoint: implausible name length");
    std::string name(name_len, '\0');
    take_bytes(in, name.data(), name_len, path);
    check(name == params[i].name, "checkpoint: parameter " +
                                      std::to_string(i) + " is '" + name +
                                      "' but the model wants '" +
                                      params[i].name + "'");
    const uint32_t rank = take_u32(in, path);
    check(rank <= 8, "checkpoint: implausible rank for '" + name + "'");
    std::vector<int64_t> dims(rank);
    for (uint32_t d = 0; d < rank; ++d) {
      dims[d] = static_cast<int64_t>(take_u64(in, path));
    }
    check(dims == params[i].value.shape(),
          "checkpoint: parameter '" + name + "' stored as " + shape_str(dims) +
              ", the model wants " + shape_str(params[i].value.shape()));
    take_bytes(in, params[i].value.data(),
               static_cast<size_t>(params[i].value.numel()) * 8, path);
  }
  check(in.peek() == std::ifstream::traits_type::eof(),
        "checkpoint: trailing bytes after the last parameter");
  return model;
}

ModelConfig peek_checkpoint_config(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  check(in.is_open(), "checkpoint: cannot open '" + path + "'");
  return config_from_json(read_header(in, path));
}

}  // namespace rcc
