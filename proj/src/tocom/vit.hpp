#pragma once

#include <cstdint>
#include <functional>
#include <map>
#include <memory>
#include <string>
#include <unordered_map>
#include <vector>

#include "tocom/autodiff.hpp"
#include "tocom/token_ops.hpp"

namespace tocom {

enum class HeadMode { cls_logits, final_features };

struct ModelConfig {
  std::size_t layers = 4;
  std::size_t dim = 64;
  std::size_t heads = 4;
  std::size_t mlp_ratio = 4;
  std::size_t image_size = 32;
  std::size_t patch_size = 8;
  std::size_t channels = 3;
  std::size_t num_classes = 10;
  HeadMode head_mode = HeadMode::cls_logits;

  std::size_t head_dim() const { return dim / heads; }
  std::size_t grid() const { return image_size / patch_size; }
  std::size_t patch_count() const { return grid() * grid(); }
  std::size_t token_count() const { return patch_count() + 1; }
  std::size_t patch_dim() const { return channels * patch_size * patch_size; }
  std::size_t image_numel() const { return channels * image_size * image_size; }
  std::size_t hidden() const { return dim * mlp_ratio; }
  void validate() const;

  friend bool operator==(const ModelConfig&, const ModelConfig&) = default;
};

// Named tensor table. Entries are shared and immutable; updates produce a new
// table that shares every untouched entry with the old one.
template <class T>
class WeightSet {
 public:
  using Map = std::map<std::string, std::shared_ptr<const Tensor<T>>>;

  bool contains(const std::string& name) const { return tensors_.count(name) != 0; }
  const Tensor<T>& at(const std::string& name) const;
  std::shared_ptr<const Tensor<T>> shared(const std::string& name) const;
  void set(const std::string& name, Tensor<T> value);
  void set_shared(const std::string& name, std::shared_ptr<const Tensor<T>> value);
  void erase(const std::string& name) { tensors_.erase(name); }
  const Map& entries() const { return tensors_; }
  std::size_t size() const { return tensors_.size(); }
  std::size_t parameter_count() const;

  template <class U>
  WeightSet<U> cast() const {
    WeightSet<U> out;
    for (const auto& [name, t] : tensors_) out.set(name, t->template cast<U>());
    return out;
  }

 private:
  Map tensors_;
};

// Per-layer bottleneck branch added next to the MLP:
// out += scale * ReLU(x * down) * up.
template <class T>
struct AdapterWeights {
  std::vector<Tensor<T>> down;  // dim x bottleneck
  std::vector<Tensor<T>> up;    // bottleneck x dim
  double scale = 1.0;

  std::size_t bottleneck() const { return down.empty() ? 0 : down[0].cols(); }
  template <class U>
  AdapterWeights<U> cast() const {
    AdapterWeights<U> out;
    for (const auto& t : down) out.down.push_back(t.template cast<U>());
    for (const auto& t : up) out.up.push_back(t.template cast<U>());
    out.scale = scale;
    return out;
  }
};

// Accumulated low-rank update for the query/value projections of every layer.
struct CompensatorDelta {
  std::vector<Tensor<double>> q;  // one dim x dim matrix per layer
  std::vector<Tensor<double>> v;

  static CompensatorDelta zeros(std::size_t layers, std::size_t dim);
  CompensatorDelta negated() const;
  bool is_zero() const;
};

namespace names {
std::string layer(std::size_t l, const char* leaf);
inline const char* kPatchW = "patch_embed.w";
inline const char* kPatchB = "patch_embed.b";
inline const char* kCls = "cls_token";
inline const char* kPos = "pos_embed";
inline const char* kNormG = "norm.g";
inline const char* kNormB = "norm.b";
inline const char* kHeadW = "head.w";
inline const char* kHeadB = "head.b";
std::string wq(std::size_t l);
std::string wv(std::size_t l);
std::string adapter_down(std::size_t l);
std::string adapter_up(std::size_t l);
bool is_head(const std::string& name);
}  // namespace names

std::vector<std::pair<std::string, Shape>> required_weights(const ModelConfig& cfg);

template <class T>
void validate_weights(const ModelConfig& cfg, const WeightSet<T>& weights);

WeightSet<float> init_weights(const ModelConfig& cfg, std::uint64_t seed);
// Fresh classification head for num_classes outputs.
void reset_head(const ModelConfig& cfg, WeightSet<float>& weights, std::uint64_t seed);
AdapterWeights<float> init_adapter(const ModelConfig& cfg, std::size_t bottleneck, double scale, std::uint64_t seed);

template <class T>
void validate_adapter(const ModelConfig& cfg, const AdapterWeights<T>& adapter);

// W <- W + D for every query/value projection; all other entries are shared.
template <class T>
WeightSet<T> apply_delta(const WeightSet<T>& weights, const CompensatorDelta& delta);

// --- compression schedule ---

enum class CompressionMode { none, merge, prune };

struct LayerDirective {
  CompressionMode mode = CompressionMode::none;
  std::size_t r = 0;
  bool dense_mode = false;  // merge dense_r tokens before the MLP, unmerge after
  std::size_t dense_r = 0;
};

struct MergeSchedule {
  std::vector<LayerDirective> layers;

  static MergeSchedule uniform(std::size_t layers, CompressionMode mode, std::size_t r);
  static MergeSchedule none(std::size_t layers) { return uniform(layers, CompressionMode::none, 0); }
  static MergeSchedule dense(std::size_t layers, std::size_t dense_r);
};

// --- differentiable forward ---

// Model parameters as graph nodes. Constants unless bound as trainable.
template <class T>
struct Params {
  std::unordered_map<std::string, ad::Var<T>> vars;
  bool has_adapter = false;
  T adapter_scale = T(0);

  const ad::Var<T>& operator[](const std::string& name) const;
  void set(const std::string& name, ad::Var<T> v) { vars[name] = std::move(v); }
};

using TrainablePredicate = std::function<bool(const std::string&)>;

template <class T>
Params<T> bind_params(const WeightSet<T>& weights, const AdapterWeights<T>* adapter = nullptr,
                      const TrainablePredicate& trainable = {});

template <class T>
struct TokenBatch {
  ad::Var<T> x;  // (batch * tokens) x dim
  std::size_t batch = 0;
  std::vector<TokenLayout> layouts;

  std::size_t tokens() const { return layouts.empty() ? 0 : layouts[0].count(); }
};

template <class T>
struct LayerTrace {
  Tensor<T> keys;           // (batch * tokens) x head_dim, mean over heads
  Tensor<T> cls_attention;  // batch x tokens, mean over heads
  std::size_t tokens_in = 0;
  std::size_t tokens_out = 0;
  std::vector<MergePlan> plans;  // per image, merge mode only
  bool clamped = false;
};

template <class T>
struct ForwardTrace {
  std::vector<LayerTrace<T>> layers;
  std::vector<std::size_t> token_counts;  // tokens leaving each layer
  ad::Var<T> features;                    // batch x dim (normalized CLS rows)
  ad::Var<T> logits;                      // batch x classes (cls_logits mode only)
  HeadMode head_mode = HeadMode::cls_logits;

  const ad::Var<T>& output() const { return head_mode == HeadMode::cls_logits ? logits : features; }
  // Sum over layers of tokens entering the attention block.
  std::size_t token_proxy() const;
};

struct ForwardOptions {
  bool keep_keys = true;
};

template <class T>
TokenBatch<T> patch_embed(const ModelConfig& cfg, const Params<T>& params, const Tensor<T>& images);

template <class T>
TokenBatch<T> mhsa_block(const ModelConfig& cfg, const Params<T>& params, std::size_t layer, const TokenBatch<T>& state,
                         LayerTrace<T>* trace, const CompensatorDelta* delta = nullptr);

template <class T>
TokenBatch<T> mlp_block(const ModelConfig& cfg, const Params<T>& params, std::size_t layer, const TokenBatch<T>& state);

// Applies a layer's compression directive to the state produced by mhsa_block.
// Returns the state the MLP block should see; dense-mode bookkeeping is
// written into stack.
template <class T>
TokenBatch<T> compress_tokens(const ModelConfig& cfg, const LayerDirective& directive, const TokenBatch<T>& state,
                              LayerTrace<T>& trace, std::vector<MergeStack>* dense_stacks);

template <class T>
ForwardTrace<T> forward(const ModelConfig& cfg, const Params<T>& params, const Tensor<T>& images,
                        const MergeSchedule& schedule, const ForwardOptions& options = {});

template <class T>
ForwardTrace<T> forward_tokens(const ModelConfig& cfg, const Params<T>& params, TokenBatch<T> state,
                               const MergeSchedule& schedule, const ForwardOptions& options = {});

// Inference convenience: folds the delta into the weights first.
template <class T>
ForwardTrace<T> forward(const ModelConfig& cfg, const WeightSet<T>& weights, const Tensor<T>& images,
                        const MergeSchedule& schedule, const CompensatorDelta* delta,
                        const AdapterWeights<T>* adapter);

}  // namespace tocom
