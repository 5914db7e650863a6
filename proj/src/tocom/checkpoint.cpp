#include "tocom/checkpoint.hpp"

#include "tocom/artifact.hpp"

namespace tocom {

using nlohmann::json;

std::string to_string(TuneMode m) {
  switch (m) {
    case TuneMode::pretrain:
      return "pretrain";
    case TuneMode::full:
      return "full";
    case TuneMode::adaptformer:
      return "adaptformer";
    case TuneMode::arith:
      return "arith";
  }
  return "pretrain";
}

TuneMode parse_tune_mode(const std::string& s) {
  if (s == "pretrain") return TuneMode::pretrain;
  if (s == "full") return TuneMode::full;
  if (s == "adaptformer") return TuneMode::adaptformer;
  if (s == "arith") return TuneMode::arith;
  throw ValidationError("unknown mode '" + s + "' (expected full|adaptformer)");
}

std::string to_string(CompressionMode m) {
  switch (m) {
    case CompressionMode::none:
      return "none";
    case CompressionMode::merge:
      return "merge";
    case CompressionMode::prune:
      return "prune";
  }
  return "none";
}

CompressionMode parse_compression(const std::string& s) {
  if (s == "none") return CompressionMode::none;
  if (s == "merge" || s == "tome") return CompressionMode::merge;
  if (s == "prune" || s == "evit") return CompressionMode::prune;
  throw ValidationError("unknown compression '" + s + "' (expected merge|prune)");
}

void ModelCheckpoint::validate() const {
  config.validate();
  validate_weights(config, weights);
  if (adapter) validate_adapter(config, *adapter);
  if (meta.source_r > meta.rmax)
    throw ValidationError("checkpoint source_r " + std::to_string(meta.source_r) + " exceeds rmax " +
                          std::to_string(meta.rmax));
}

json config_to_json(const ModelConfig& cfg) {
  return {{"layers", cfg.layers},
          {"dim", cfg.dim},
          {"heads", cfg.heads},
          {"mlp_ratio", cfg.mlp_ratio},
          {"image_size", cfg.image_size},
          {"patch_size", cfg.patch_size},
          {"channels", cfg.channels},
          {"num_classes", cfg.num_classes},
          {"head_mode", cfg.head_mode == HeadMode::cls_logits ? "cls_logits" : "final_features"}};
}

ModelConfig config_from_json(const json& j, ModelConfig cfg) {
  if (!j.is_object()) throw ValidationError("model config must be a JSON object");
  auto get = [&](const char* key, std::size_t& dst) {
    if (!j.contains(key)) return;
    if (!j[key].is_number_unsigned()) throw ValidationError(std::string("model config: '") + key + "' must be a non-negative integer");
    dst = j[key].get<std::size_t>();
  };
  get("layers", cfg.layers);
  get("dim", cfg.dim);
  get("heads", cfg.heads);
  get("mlp_ratio", cfg.mlp_ratio);
  get("image_size", cfg.image_size);
  get("patch_size", cfg.patch_size);
  get("channels", cfg.channels);
  get("num_classes", cfg.num_classes);
  if (j.contains("head_mode")) {
    const auto m = j["head_mode"].get<std::string>();
    if (m == "cls_logits") cfg.head_mode = HeadMode::cls_logits;
    else if (m == "final_features") cfg.head_mode = HeadMode::final_features;
    else throw ValidationError("model config: unknown head_mode '" + m + "'");
  }
  cfg.validate();
  return cfg;
}

namespace {

template <class T>
T required(const json& j, const char* key) {
  if (!j.contains(key)) throw FormatError(std::string("artifact metadata lacks '") + key + "'");
  try {
    return j.at(key).get<T>();
  } catch (const json::exception&) {
    throw FormatError(std::string("artifact metadata field '") + key + "' has the wrong type");
  }
}

}  // namespace

std::vector<std::uint8_t> encode_checkpoint(const ModelCheckpoint& ckpt) {
  ckpt.validate();
  Artifact a;
  a.magic = kCheckpointMagic;
  a.metadata = {{"config", config_to_json(ckpt.config)},
                {"source_r", ckpt.meta.source_r},
                {"rmax", ckpt.meta.rmax},
                {"dataset", ckpt.meta.dataset},
                {"seed", ckpt.meta.seed},
                {"mode", to_string(ckpt.meta.mode)},
                {"compression", to_string(ckpt.meta.compression)},
                {"adapter", nullptr}};
  for (const auto& [name, t] : ckpt.weights.entries()) a.tensors.push_back({name, *t});
  if (ckpt.adapter) {
    a.metadata["adapter"] = {{"bottleneck", ckpt.adapter->bottleneck()}, {"scale", ckpt.adapter->scale}};
    for (std::size_t l = 0; l < ckpt.adapter->down.size(); ++l) {
      a.tensors.push_back({names::adapter_down(l), ckpt.adapter->down[l]});
      a.tensors.push_back({names::adapter_up(l), ckpt.adapter->up[l]});
    }
  }
  return encode_artifact(a);
}

ModelCheckpoint decode_checkpoint(std::span<const std::uint8_t> bytes) {
  Artifact a = decode_artifact(bytes, kCheckpointMagic);
  const json& m = a.metadata;
  ModelCheckpoint c;
  if (!m.contains("config")) throw FormatError("checkpoint metadata lacks 'config'");
  try {
    c.config = config_from_json(m["config"]);
  } catch (const ValidationError& e) {
    throw FormatError(std::string("checkpoint config: ") + e.what());
  }
  c.meta.source_r = required<std::size_t>(m, "source_r");
  c.meta.rmax = required<std::size_t>(m, "rmax");
  c.meta.dataset = required<std::string>(m, "dataset");
  c.meta.seed = required<std::uint64_t>(m, "seed");
  c.meta.mode = parse_tune_mode(required<std::string>(m, "mode"));
  c.meta.compression = parse_compression(required<std::string>(m, "compression"));
  const bool has_adapter = m.contains("adapter") && !m["adapter"].is_null();
  if (has_adapter) {
    AdapterWeights<float> ad;
    ad.scale = required<double>(m["adapter"], "scale");
    for (std::size_t l = 0; l < c.config.layers; ++l) {
      ad.down.push_back(a.tensor(names::adapter_down(l)));
      ad.up.push_back(a.tensor(names::adapter_up(l)));
    }
    c.adapter = std::move(ad);
  }
  for (auto& t : a.tensors) {
    if (t.name.rfind("adapter.", 0) == 0) {
      if (!has_adapter) throw FormatError("checkpoint holds adapter tensors but no adapter metadata");
      continue;
    }
    c.weights.set(t.name, std::move(t.value));
  }
  try {
    c.validate();
  } catch (const Error& e) {
    throw FormatError(std::string("checkpoint content: ") + e.what());
  }
  return c;
}

void save_checkpoint(const std::string& path, const ModelCheckpoint& ckpt) { write_file(path, encode_checkpoint(ckpt)); }

ModelCheckpoint load_checkpoint(const std::string& path) { return decode_checkpoint(read_file(path)); }

std::vector<std::uint8_t> encode_plugins(const ToComSet& set, const json& extra) {
  set.validate();
  Artifact a;
  a.magic = kPluginMagic;
  a.metadata = {{"rmax", set.rmax},   {"rank", set.rank},   {"layers", set.layers},
                {"dim", set.dim},     {"scale", set.scale}, {"variant", to_string(set.variant)},
                {"groups", set.groups.size()}};
  if (extra.is_object())
    for (const auto& [k, v] : extra.items())
      if (!a.metadata.contains(k)) a.metadata[k] = v;
  for (std::size_t g = 0; g < set.groups.size(); ++g)
    for (std::size_t l = 0; l < set.layers; ++l)
      for (LoraTarget t : {LoraTarget::q, LoraTarget::v}) {
        const auto& p = set.groups[g].at(l, t);
        a.tensors.push_back({plugin_tensor_name(g, l, t, true), p.a});
        a.tensors.push_back({plugin_tensor_name(g, l, t, false), p.b});
      }
  return encode_artifact(a);
}

ToComSet decode_plugins(std::span<const std::uint8_t> bytes, json* metadata) {
  Artifact a = decode_artifact(bytes, kPluginMagic);
  const json& m = a.metadata;
  ToComSet set;
  set.rmax = required<std::size_t>(m, "rmax");
  set.rank = required<std::size_t>(m, "rank");
  set.layers = required<std::size_t>(m, "layers");
  set.dim = required<std::size_t>(m, "dim");
  set.scale = required<double>(m, "scale");
  try {
    set.variant = parse_variant(required<std::string>(m, "variant"));
  } catch (const ValidationError& e) {
    throw FormatError(e.what());
  }
  const auto groups = required<std::size_t>(m, "groups");
  if (a.tensors.size() != groups * set.layers * 4)
    throw FormatError("plugin file holds " + std::to_string(a.tensors.size()) + " tensors, expected " +
                      std::to_string(groups * set.layers * 4));
  for (std::size_t g = 0; g < groups; ++g) {
    PluginGroup group;
    group.boundary = g % std::max<std::size_t>(set.rmax, 1);
    for (std::size_t l = 0; l < set.layers; ++l)
      for (LoraTarget t : {LoraTarget::q, LoraTarget::v})
        group.pairs.push_back({a.tensor(plugin_tensor_name(g, l, t, true)), a.tensor(plugin_tensor_name(g, l, t, false)),
                               t, l});
    set.groups.push_back(std::move(group));
  }
  try {
    set.validate();
  } catch (const Error& e) {
    throw FormatError(std::string("plugin content: ") + e.what());
  }
  if (metadata) *metadata = m;
  return set;
}

void save_plugins(const std::string& path, const ToComSet& set, const json& extra) {
  write_file(path, encode_plugins(set, extra));
}

ToComSet load_plugins(const std::string& path, json* metadata) { return decode_plugins(read_file(path), metadata); }

}  // namespace tocom
