#include "tocom/plugins.hpp"

#include <cmath>
#include <random>

namespace tocom {

namespace {

constexpr double kGrid = 1099511627776.0;  // 2^40
constexpr double kMaxMagnitude = 64.0;  // 128 terms * 64 * 2^40 stays below 2^53

}  // namespace

std::string to_string(PluginVariant v) {
  switch (v) {
    case PluginVariant::standard:
      return "default";
    case PluginVariant::shared_lora:
      return "shared";
    case PluginVariant::no_inversion:
      return "noinv";
  }
  return "default";
}

PluginVariant parse_variant(const std::string& s) {
  if (s == "default" || s == "standard") return PluginVariant::standard;
  if (s == "shared") return PluginVariant::shared_lora;
  if (s == "noinv") return PluginVariant::no_inversion;
  throw ValidationError("unknown plugin variant '" + s + "' (expected default|shared|noinv)");
}

void ToComSet::validate() const {
  if (rmax < 1) throw ValidationError("plugin set: rmax must be >= 1");
  if (rank < 1) throw ValidationError("plugin set: rank must be >= 1");
  std::size_t expected = rmax;
  if (variant == PluginVariant::shared_lora) expected = 1;
  if (variant == PluginVariant::no_inversion) expected = 2 * rmax;
  if (groups.size() != expected)
    throw ValidationError("plugin set: expected " + std::to_string(expected) + " groups, found " +
                          std::to_string(groups.size()));
  for (std::size_t g = 0; g < groups.size(); ++g) {
    const auto& group = groups[g];
    if (group.pairs.size() != 2 * layers) throw ValidationError("plugin set: group does not cover every layer");
    for (std::size_t l = 0; l < layers; ++l)
      for (LoraTarget t : {LoraTarget::q, LoraTarget::v}) {
        const auto& p = group.at(l, t);
        if (p.layer != l || p.target != t) throw ValidationError("plugin set: pair order is corrupted");
        if (p.a.shape() != Shape{dim, rank} || p.b.shape() != Shape{rank, dim})
          throw ShapeError("plugin set: group " + std::to_string(g) + " layer " + std::to_string(l) +
                           " has non-uniform rank or wrong dimension");
      }
  }
}

std::size_t ToComSet::parameter_count() const {
  std::size_t n = 0;
  for (const auto& g : groups)
    for (const auto& p : g.pairs) n += p.a.numel() + p.b.numel();
  return n;
}

ToComSet init_plugins(const PluginSetConfig& cfg) {
  if (cfg.rmax < 1 || cfg.rank < 1 || cfg.layers < 1 || cfg.dim < 1)
    throw ValidationError("plugin config: rmax, rank, layers and dim must be >= 1");
  ToComSet set;
  set.scale = cfg.scale;
  set.rmax = cfg.rmax;
  set.layers = cfg.layers;
  set.dim = cfg.dim;
  set.variant = cfg.variant;
  set.rank = cfg.variant == PluginVariant::shared_lora ? cfg.rank * cfg.rmax : cfg.rank;
  std::size_t count = cfg.rmax;
  if (cfg.variant == PluginVariant::shared_lora) count = 1;
  if (cfg.variant == PluginVariant::no_inversion) count = 2 * cfg.rmax;

  std::mt19937_64 rng(cfg.seed);
  std::normal_distribution<double> dist(0.0, 0.02);
  for (std::size_t g = 0; g < count; ++g) {
    PluginGroup group;
    group.boundary = g % cfg.rmax;
    for (std::size_t l = 0; l < cfg.layers; ++l)
      for (LoraTarget t : {LoraTarget::q, LoraTarget::v}) {
        LoraPair p;
        p.layer = l;
        p.target = t;
        p.a = Tensor<float>::matrix(cfg.dim, set.rank);
        for (float& x : p.a.values()) x = static_cast<float>(dist(rng));
        p.b = Tensor<float>::matrix(set.rank, cfg.dim);
        group.pairs.push_back(std::move(p));
      }
    set.groups.push_back(std::move(group));
  }
  return set;
}

std::size_t parameter_count(std::size_t rmax, std::size_t layers, std::size_t dim, std::size_t rank) {
  return rmax * layers * 2 * (dim * rank + rank * dim);
}

std::size_t parameter_count(const ToComSet& set, const ModelConfig& cfg) {
  if (set.layers != cfg.layers || set.dim != cfg.dim)
    throw ValidationError("plugin set does not match model config");
  return set.parameter_count();
}

std::vector<GroupTerm> compose_terms(const ToComSet& set, std::size_t m, std::size_t n) {
  if (m == n) throw ValidationError("compose: source and target degree are equal (" + std::to_string(m) + ")");
  if (m > set.rmax || n > set.rmax)
    throw ValidationError("compose: degree out of range [0, " + std::to_string(set.rmax) + "]");
  std::vector<GroupTerm> terms;
  const std::size_t lo = std::min(m, n), hi = std::max(m, n);
  switch (set.variant) {
    case PluginVariant::standard:
      for (std::size_t i = lo; i < hi; ++i) terms.push_back({i, n > m ? 1 : -1});
      break;
    case PluginVariant::shared_lora:
      terms.push_back({0, 1});
      break;
    case PluginVariant::no_inversion:
      for (std::size_t i = lo; i < hi; ++i) terms.push_back({n > m ? i : set.rmax + i, 1});
      break;
  }
  return terms;
}

CompensatorDelta compose(const ToComSet& set, std::size_t m, std::size_t n, std::optional<double> scale_override) {
  set.validate();
  const double s = scale_override.value_or(set.scale);
  const auto terms = compose_terms(set, m, n);
  const std::size_t d = set.dim;
  CompensatorDelta delta = CompensatorDelta::zeros(set.layers, d);
  std::vector<std::int64_t> acc(d * d);
  Tensor<double> prod;
  for (std::size_t l = 0; l < set.layers; ++l)
    for (LoraTarget t : {LoraTarget::q, LoraTarget::v}) {
      std::fill(acc.begin(), acc.end(), 0);
      for (const auto& term : terms) {
        const auto& pair = set.groups[term.group].at(l, t);
        gemm(pair.a.cast<double>(), false, pair.b.cast<double>(), false, prod);
        for (std::size_t i = 0; i < d * d; ++i) {
          const double v = s * prod[i];
          if (!(std::abs(v) < kMaxMagnitude)) throw ValidationError("compose: plugin product out of range");
          acc[i] += term.sign * static_cast<std::int64_t>(std::llround(v * kGrid));
        }
      }
      Tensor<double>& out = t == LoraTarget::q ? delta.q[l] : delta.v[l];
      for (std::size_t i = 0; i < d * d; ++i) out[i] = static_cast<double>(acc[i]) / kGrid;
    }
  return delta;
}

CompensatorDelta add(const CompensatorDelta& x, const CompensatorDelta& y) {
  if (x.q.size() != y.q.size()) throw ShapeError("delta add: layer count mismatch");
  CompensatorDelta out = x;
  for (std::size_t l = 0; l < x.q.size(); ++l) {
    add_inplace(out.q[l], y.q[l]);
    add_inplace(out.v[l], y.v[l]);
  }
  return out;
}

std::string plugin_tensor_name(std::size_t group, std::size_t layer, LoraTarget target, bool is_a) {
  return "group" + std::to_string(group) + ".layer" + std::to_string(layer) + "." +
         (target == LoraTarget::q ? "q" : "v") + "." + (is_a ? "A" : "B");
}

}  // namespace tocom
