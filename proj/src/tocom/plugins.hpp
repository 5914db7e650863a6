#pragma once

// Compensator plugins: one group of low-rank (A, B) pairs per adjacent pair
// of compression degrees, composed by signed accumulation into the query and
// value projections.

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "tocom/vit.hpp"

namespace tocom {

enum class LoraTarget { q, v };

struct LoraPair {
  Tensor<float> a;  // dim x rank
  Tensor<float> b;  // rank x dim
  LoraTarget target = LoraTarget::q;
  std::size_t layer = 0;
};

// P_{boundary -> boundary+1}: q and v pairs for every layer, ordered
// (layer 0 q, layer 0 v, layer 1 q, ...).
struct PluginGroup {
  std::size_t boundary = 0;
  std::vector<LoraPair> pairs;

  const LoraPair& at(std::size_t layer, LoraTarget target) const { return pairs[2 * layer + (target == LoraTarget::v)]; }
  LoraPair& at(std::size_t layer, LoraTarget target) { return pairs[2 * layer + (target == LoraTarget::v)]; }
};

enum class PluginVariant {
  standard,      // rmax groups, descent subtracts the ascent groups
  shared_lora,   // a single group used for every degree pair
  no_inversion,  // separate ascent and descent groups (2 * rmax)
};

std::string to_string(PluginVariant v);
PluginVariant parse_variant(const std::string& s);

struct PluginSetConfig {
  std::size_t layers = 4;
  std::size_t dim = 64;
  std::size_t rmax = 3;
  std::size_t rank = 2;
  double scale = 0.1;
  PluginVariant variant = PluginVariant::standard;
  std::uint64_t seed = 0;
};

struct ToComSet {
  std::vector<PluginGroup> groups;
  double scale = 0.1;
  std::size_t rmax = 0;
  std::size_t rank = 0;
  std::size_t layers = 0;
  std::size_t dim = 0;
  PluginVariant variant = PluginVariant::standard;

  void validate() const;
  std::size_t parameter_count() const;
};

// A entries ~ N(0, 0.02^2), B = 0, so every composed delta starts at zero.
// For shared_lora the single group gets rank * rmax to keep the budget.
ToComSet init_plugins(const PluginSetConfig& cfg);

// rmax * layers * 2 * (dim * rank + rank * dim).
std::size_t parameter_count(std::size_t rmax, std::size_t layers, std::size_t dim, std::size_t rank);
std::size_t parameter_count(const ToComSet& set, const ModelConfig& cfg);

// Group indices and signs that make up the (source m -> target n) update.
struct GroupTerm {
  std::size_t group = 0;
  int sign = 1;
};
std::vector<GroupTerm> compose_terms(const ToComSet& set, std::size_t m, std::size_t n);

// D = s * sum(sign * A_i B_i) per (layer, target). Each scaled group product
// is rounded once onto a 2^-40 fixed-point grid and summed exactly, so
// compose(m,k) + compose(k,n) == compose(m,n) and compose(n,m) == -compose(m,n)
// hold bit-for-bit.
CompensatorDelta compose(const ToComSet& set, std::size_t m, std::size_t n,
                         std::optional<double> scale_override = std::nullopt);

CompensatorDelta add(const CompensatorDelta& x, const CompensatorDelta& y);

std::string plugin_tensor_name(std::size_t group, std::size_t layer, LoraTarget target, bool is_a);

}  // namespace tocom
