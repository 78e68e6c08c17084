#include <json.hpp>

#include <string>
#include <type_traits>

#include "rcc/model.hpp"

namespace rcc {

namespace {

using nlohmann::json;

template <typename T, size_t N>
std::array<T, N> int_array(const json& v, const std::string& where) {
  check(v.is_array() && v.size() == N,
        "config: " + where + " must be an array of " + std::to_string(N) +
            " integers");
  std::array<T, N> a{};
  for (size_t i = 0; i < N; ++i) {
    check(v[i].is_number_integer(),
          "config: " + where + " must be an array of " + std::to_string(N) +
              " integers");
    a[i] = v[i].get<T>();
  }
  return a;
}

template <typename T>
T scalar_of(const json& v, const std::string& key) {
  if constexpr (std::is_same_v<T, bool>) {
    check(v.is_boolean(), "config: " + key + " must be a boolean");
  } else if constexpr (std::is_same_v<T, double>) {
    check(v.is_number(), "config: " + key + " must be a number");
  } else if constexpr (std::is_same_v<T, std::string>) {
    check(v.is_string(), "config: " + key + " must be a string");
  } else {
    check(v.is_number_integer(), "config: " + key + " must be an integer");
  }
  return v.get<T>();
}

BackboneConfig backbone_from_json(const json& j) {
  BackboneConfig c;
  check(j.is_object(), "config: backbone must be an object");
  for (const auto& [key, val] : j.items()) {
    if (key == "channels") {
      c.channels = int_array<int64_t, 4>(val, "backbone.channels");
    } else if (key == "depths") {
      c.depths = int_array<int, 4>(val, "backbone.depths");
    } else if (key == "heads") {
      c.heads = int_array<int64_t, 4>(val, "backbone.heads");
    } else if (key == "sr_ratios") {
      c.sr_ratios = int_array<int, 4>(val, "backbone.sr_ratios");
    } else {
      check(false, "config: unknown key 'backbone." + key + "'");
    }
  }
  return c;
}

}  // namespace

ModelConfig config_from_json(const std::string& text) {
  json j;
  try {
    j = json::parse(text);
  } catch (const std::exception& e) {
    check(false, std::string("config: ") + e.what());
  }
  check(j.is_object(), "config: top level must be a JSON object");
  ModelConfig c;
  for (const auto& [key, val] : j.items()) {
    if (key == "backbone") {
      c.backbone = backbone_from_json(val);
    } else if (key == "c_f") {
      c.c_f = scalar_of<int64_t>(val, key);
    } else if (key == "deab_depth") {
      c.deab_depth = scalar_of<int>(val, key);
    } else if (key == "heads") {
      c.heads = scalar_of<int64_t>(val, key);
    } else if (key == "local_kernel") {
      c.local_kernel = scalar_of<int>(val, key);
    } else if (key == "alpha_init") {
      c.alpha_init = scalar_of<double>(val, key);
    } else if (key == "use_deab") {
      c.use_deab = scalar_of<bool>(val, key);
    } else if (key == "use_asam") {
      c.use_asam = scalar_of<bool>(val, key);
    } else if (key == "mffm_mode") {
      c.mffm_mode = scalar_of<std::string>(val, key);
    } else if (key == "attention_mode") {
      c.attention_mode = scalar_of<std::string>(val, key);
    } else if (key == "idconv_mode") {
      c.idconv_mode = scalar_of<std::string>(val, key);
    } else if (key == "head_eps") {
      c.head_eps = scalar_of<double>(val, key);
    } else {
      check(false, "config: unknown key '" + key + "'");
    }
  }
  return c;
}

std::string config_to_json(const ModelConfig& c) {
  json j;
  j["backbone"]["channels"] = c.backbone.channels;
  j["backbone"]["depths"] = c.backbone.depths;
  j["backbone"]["heads"] = c.backbone.heads;
  j["backbone"]["sr_ratios"] = c.backbone.sr_ratios;
  j["c_f"] = c.c_f;
  j["deab_depth"] = c.deab_depth;
  j["heads"] = c.heads;
  j["local_kernel"] = c.local_kernel;
  j["alpha_init"] = c.alpha_init;
  j["use_deab"] = c.use_deab;
  j["use_asam"] = c.use_asam;
  j["mffm_mode"] = c.mffm_mode;
  j["attention_mode"] = c.attention_mode;
  j["idconv_mode"] = c.idconv_mode;
  j["head_eps"] = c.head_eps;
  return j.dump(2);
}

double DensityMap::count(int64_t i) const {
  check(i >= 0 && i < grid.dim(0),
        "density map: image " + std::to_string(i) + " out of range for batch " +
            std::to_string(grid.dim(0)));
  const int64_t cells = grid.dim(2) * grid.dim(3);
  const double* p = grid.data() + i * cells;
  double total = 0.0;
  for (int64_t k = 0; k < cells; ++k) total += p[k];
  return total;
}

CrowdCounter CrowdCounter::make(Rng& rng, const ModelConfig& cfg) {
  const AttentionMode attn = attention_mode_from_string(cfg.attention_mode);
  const ConvMode conv = conv_mode_from_string(cfg.idconv_mode);
  if (cfg.mffm_mode != "off") (void)fuse_mode_from_string(cfg.mffm_mode);
  check(cfg.deab_depth >= 0, "model: deab_depth must be >= 0, got " +
                                 std::to_string(cfg.deab_depth));
  check(cfg.head_eps >= 0.0, "model: head_eps must be >= 0");
  const int64_t width =
      cfg.mffm_mode != "off" ? cfg.c_f : cfg.backbone.channels[3];
  check(width % cfg.heads == 0,
        "model: trunk width " + std::to_string(width) + " not divisible by " +
            std::to_string(cfg.heads) + " heads");

  CrowdCounter m;
  m.config = cfg;
  m.backbone = Backbone::make(rng, cfg.backbone);
  if (m.uses_fusion()) {
    const auto& ch = cfg.backbone.channels;
    m.mffm = Mffm::make(rng, {ch[1], ch[2], ch[3]}, cfg.c_f, cfg.heads,
                        fuse_mode_from_string(cfg.mffm_mode));
  }
  if (cfg.use_deab) {
    Rng nr = rng.derive("neck");
    for (int d = 0; d < cfg.deab_depth; ++d) {
      Rng br = nr.derive("block" + std::to_string(d));
      m.neck.push_back(Deab::make(br, width, cfg.heads, attn, /*sr_ratio=*/1,
                                  /*ffn_ratio=*/4, cfg.local_kernel,
                                  cfg.alpha_init));
    }
  }
  if (cfg.use_asam) m.asam = Asam::make(rng, width, conv);
  Rng hr = rng.derive("head");
  m.head = Conv2d::make(hr, width, 1, 1);
  return m;
}

DensityMap CrowdCounter::forward(const Tensor& images, bool training) {
  FeaturePyramid pyr = backbone.encode(images);
  Tensor f = uses_fusion() ? mffm.forward(pyr) : upsample_bilinear(pyr.f4, 4);
  if (!neck.empty()) {
    const int64_t h = f.dim(2), w = f.dim(3);
    Tensor t = spatial_to_tokens(f);
    for (const Deab& block : neck) t = block.forward(t, h, w);
    f = tokens_to_spatial(t, h, w);
  }
  if (config.use_asam) f = asam.forward(f, training);
  Tensor out = relu(head.forward(f));
  if (config.head_eps > 0.0) out = add(out, config.head_eps);
  DensityMap dm;
  dm.grid = out;
  return dm;
}

ParamList CrowdCounter::parameters() {
  ParamList out;
  backbone.collect("backbone", out);
  if (uses_fusion()) mffm.collect("mffm", out);
  for (size_t i = 0; i < neck.size(); ++i)
    neck[i].collect("neck." + std::to_string(i), out);
  if (config.use_asam) asam.collect("asam", out);
  head.collect("head", out);
  return out;
}

}  // namespace rcc
