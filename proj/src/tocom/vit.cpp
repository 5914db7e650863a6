#include "tocom/vit.hpp"

#include <cmath>
#include <random>

namespace tocom {

void ModelConfig::validate() const {
  auto fail = [](const std::string& m) { throw ValidationError("model config: " + m); };
  if (layers < 1) fail("layers must be >= 1");
  if (dim < 1 || heads < 1 || dim % heads != 0) fail("dim must be a positive multiple of heads");
  if (mlp_ratio < 1) fail("mlp_ratio must be >= 1");
  if (patch_size < 1 || image_size < patch_size || image_size % patch_size != 0)
    fail("image_size must be a positive multiple of patch_size");
  if (channels < 1) fail("channels must be >= 1");
  if (num_classes < 1) fail("num_classes must be >= 1");
}

// ---------------------------------------------------------------------------

template <class T>
const Tensor<T>& WeightSet<T>::at(const std::string& name) const {
  return *shared(name);
}

template <class T>
std::shared_ptr<const Tensor<T>> WeightSet<T>::shared(const std::string& name) const {
  auto it = tensors_.find(name);
  if (it == tensors_.end()) throw ValidationError("missing weight '" + name + "'");
  return it->second;
}

template <class T>
void WeightSet<T>::set(const std::string& name, Tensor<T> value) {
  tensors_[name] = std::make_shared<const Tensor<T>>(std::move(value));
}

template <class T>
void WeightSet<T>::set_shared(const std::string& name, std::shared_ptr<const Tensor<T>> value) {
  tensors_[name] = std::move(value);
}

template <class T>
std::size_t WeightSet<T>::parameter_count() const {
  std::size_t n = 0;
  for (const auto& [_, t] : tensors_) n += t->numel();
  return n;
}

CompensatorDelta CompensatorDelta::zeros(std::size_t layers, std::size_t dim) {
  CompensatorDelta d;
  d.q.assign(layers, Tensor<double>::matrix(dim, dim));
  d.v.assign(layers, Tensor<double>::matrix(dim, dim));
  return d;
}

CompensatorDelta CompensatorDelta::negated() const {
  CompensatorDelta d = *this;
  for (auto* list : {&d.q, &d.v})
    for (auto& t : *list)
      for (double& x : t.values()) x = -x;
  return d;
}

bool CompensatorDelta::is_zero() const {
  for (const auto* list : {&q, &v})
    for (const auto& t : *list)
      for (double x : t.values())
        if (x != 0.0) return false;
  return true;
}

namespace names {
std::string layer(std::size_t l, const char* leaf) { return "blocks." + std::to_string(l) + "." + leaf; }
std::string wq(std::size_t l) { return layer(l, "attn.wq"); }
std::string wv(std::size_t l) { return layer(l, "attn.wv"); }
std::string adapter_down(std::size_t l) { return "adapter." + std::to_string(l) + ".down"; }
std::string adapter_up(std::size_t l) { return "adapter." + std::to_string(l) + ".up"; }
bool is_head(const std::string& name) { return name == kHeadW || name == kHeadB; }
}  // namespace names

std::vector<std::pair<std::string, Shape>> required_weights(const ModelConfig& cfg) {
  const std::size_t d = cfg.dim;
  std::vector<std::pair<std::string, Shape>> out = {
      {names::kPatchW, {cfg.patch_dim(), d}},
      {names::kPatchB, {1, d}},
      {names::kCls, {1, d}},
      {names::kPos, {cfg.token_count(), d}},
  };
  for (std::size_t l = 0; l < cfg.layers; ++l) {
    auto n = [l](const char* leaf) { return names::layer(l, leaf); };
    out.push_back({n("ln1.g"), {1, d}});
    out.push_back({n("ln1.b"), {1, d}});
    for (const char* w : {"attn.wq", "attn.wk", "attn.wv", "attn.wo"}) out.push_back({n(w), {d, d}});
    for (const char* b : {"attn.bq", "attn.bk", "attn.bv", "attn.bo"}) out.push_back({n(b), {1, d}});
    out.push_back({n("ln2.g"), {1, d}});
    out.push_back({n("ln2.b"), {1, d}});
    out.push_back({n("mlp.w1"), {d, cfg.hidden()}});
    out.push_back({n("mlp.b1"), {1, cfg.hidden()}});
    out.push_back({n("mlp.w2"), {cfg.hidden(), d}});
    out.push_back({n("mlp.b2"), {1, d}});
  }
  out.push_back({names::kNormG, {1, d}});
  out.push_back({names::kNormB, {1, d}});
  out.push_back({names::kHeadW, {d, cfg.num_classes}});
  out.push_back({names::kHeadB, {1, cfg.num_classes}});
  return out;
}

template <class T>
void validate_weights(const ModelConfig& cfg, const WeightSet<T>& weights) {
  cfg.validate();
  const auto req = required_weights(cfg);
  for (const auto& [name, shape] : req) {
    if (!weights.contains(name)) throw ValidationError("weight set is missing '" + name + "'");
    if (weights.at(name).shape() != shape)
      throw ShapeError("weight '" + name + "' has shape " + shape_str(weights.at(name).shape()) + ", expected " +
                       shape_str(shape));
  }
  if (weights.size() != req.size()) throw ValidationError("weight set has unexpected entries");
}

namespace {

Tensor<float> gaussian(Shape shape, double sigma, std::mt19937_64& rng) {
  std::normal_distribution<double> dist(0.0, sigma);
  Tensor<float> t(std::move(shape));
  for (float& v : t.values()) v = static_cast<float>(dist(rng));
  return t;
}

bool ends_with(const std::string& s, const std::string& suffix) {
  return s.size() >= suffix.size() && s.compare(s.size() - suffix.size(), suffix.size(), suffix) == 0;
}

}  // namespace

WeightSet<float> init_weights(const ModelConfig& cfg, std::uint64_t seed) {
  cfg.validate();
  std::mt19937_64 rng(seed);
  WeightSet<float> w;
  for (const auto& [name, shape] : required_weights(cfg)) {
    if (ends_with(name, ".g"))
      w.set(name, Tensor<float>(shape, 1.0f));
    else if (ends_with(name, ".b") || name.find(".attn.b") != std::string::npos ||
             name.find(".mlp.b") != std::string::npos)
      w.set(name, Tensor<float>(shape, 0.0f));
    else
      w.set(name, gaussian(shape, 0.02, rng));
  }
  return w;
}

void reset_head(const ModelConfig& cfg, WeightSet<float>& weights, std::uint64_t seed) {
  std::mt19937_64 rng(seed ^ 0x9e3779b97f4a7c15ULL);
  weights.set(names::kHeadW, gaussian({cfg.dim, cfg.num_classes}, 0.02, rng));
  weights.set(names::kHeadB, Tensor<float>({1, cfg.num_classes}, 0.0f));
}

AdapterWeights<float> init_adapter(const ModelConfig& cfg, std::size_t bottleneck, double scale, std::uint64_t seed) {
  if (bottleneck < 1) throw ValidationError("adapter bottleneck must be >= 1");
  std::mt19937_64 rng(seed);
  AdapterWeights<float> a;
  a.scale = scale;
  for (std::size_t l = 0; l < cfg.layers; ++l) {
    a.down.push_back(gaussian({cfg.dim, bottleneck}, 1.0 / std::sqrt(double(cfg.dim)), rng));
    a.up.push_back(Tensor<float>({bottleneck, cfg.dim}, 0.0f));
  }
  return a;
}

template <class T>
void validate_adapter(const ModelConfig& cfg, const AdapterWeights<T>& adapter) {
  if (adapter.down.size() != cfg.layers || adapter.up.size() != cfg.layers)
    throw ShapeError("adapter: expected one down/up pair per layer");
  const std::size_t h = adapter.bottleneck();
  if (h < 1) throw ValidationError("adapter bottleneck must be >= 1");
  for (std::size_t l = 0; l < cfg.layers; ++l) {
    if (adapter.down[l].shape() != Shape{cfg.dim, h} || adapter.up[l].shape() != Shape{h, cfg.dim})
      throw ShapeError("adapter: layer " + std::to_string(l) + " has mismatched shapes");
  }
}

template <class T>
WeightSet<T> apply_delta(const WeightSet<T>& weights, const CompensatorDelta& delta) {
  WeightSet<T> out = weights;
  auto fold = [&](const std::string& name, const Tensor<double>& d) {
    const Tensor<T>& w = weights.at(name);
    if (w.shape() != d.shape())
      throw ShapeError("delta for '" + name + "' has shape " + shape_str(d.shape()) + ", weight is " +
                       shape_str(w.shape()));
    Tensor<T> updated = w;
    for (std::size_t i = 0; i < w.numel(); ++i) updated[i] = static_cast<T>(static_cast<double>(w[i]) + d[i]);
    out.set(name, std::move(updated));
  };
  if (delta.q.size() != delta.v.size()) throw ShapeError("delta: q/v layer counts differ");
  for (std::size_t l = 0; l < delta.q.size(); ++l) {
    fold(names::wq(l), delta.q[l]);
    fold(names::wv(l), delta.v[l]);
  }
  return out;
}

// ---------------------------------------------------------------------------

MergeSchedule MergeSchedule::uniform(std::size_t layers, CompressionMode mode, std::size_t r) {
  MergeSchedule s;
  s.layers.assign(layers, LayerDirective{r == 0 ? CompressionMode::none : mode, r, false, 0});
  return s;
}

MergeSchedule MergeSchedule::dense(std::size_t layers, std::size_t dense_r) {
  MergeSchedule s;
  s.layers.assign(layers, LayerDirective{CompressionMode::none, 0, true, dense_r});
  return s;
}

template <class T>
const ad::Var<T>& Params<T>::operator[](const std::string& name) const {
  auto it = vars.find(name);
  if (it == vars.end()) throw ValidationError("missing parameter '" + name + "'");
  return it->second;
}

template <class T>
Params<T> bind_params(const WeightSet<T>& weights, const AdapterWeights<T>* adapter,
                      const TrainablePredicate& trainable) {
  Params<T> p;
  auto bind = [&](const std::string& name, const Tensor<T>& value) {
    p.set(name, trainable && trainable(name) ? ad::Var<T>::parameter(value) : ad::Var<T>::constant(value));
  };
  for (const auto& [name, t] : weights.entries()) bind(name, *t);
  if (adapter) {
    p.has_adapter = true;
    p.adapter_scale = static_cast<T>(adapter->scale);
    for (std::size_t l = 0; l < adapter->down.size(); ++l) {
      bind(names::adapter_down(l), adapter->down[l]);
      bind(names::adapter_up(l), adapter->up[l]);
    }
  }
  return p;
}

template <class T>
std::size_t ForwardTrace<T>::token_proxy() const {
  std::size_t s = 0;
  for (const auto& l : layers) s += l.tokens_in;
  return s;
}

template <class T>
TokenBatch<T> patch_embed(const ModelConfig& cfg, const Params<T>& params, const Tensor<T>& images) {
  if (images.rank() != 2 || images.cols() != cfg.image_numel())
    throw ShapeError("patch_embed: images " + shape_str(images.shape()) + " do not match " +
                     std::to_string(cfg.channels) + "x" + std::to_string(cfg.image_size) + "x" +
                     std::to_string(cfg.image_size));
  const std::size_t batch = images.rows();
  if (batch == 0) throw ShapeError("patch_embed: empty batch");
  const std::size_t g = cfg.grid(), p = cfg.patch_size, s = cfg.image_size, np = cfg.patch_count();
  Tensor<T> patches = Tensor<T>::matrix(batch * np, cfg.patch_dim());
  for (std::size_t b = 0; b < batch; ++b) {
    const T* img = images.data() + b * cfg.image_numel();
    for (std::size_t gy = 0; gy < g; ++gy)
      for (std::size_t gx = 0; gx < g; ++gx) {
        T* row = patches.data() + (b * np + gy * g + gx) * cfg.patch_dim();
        std::size_t k = 0;
        for (std::size_t c = 0; c < cfg.channels; ++c)
          for (std::size_t py = 0; py < p; ++py)
            for (std::size_t px = 0; px < p; ++px) row[k++] = img[(c * s + gy * p + py) * s + gx * p + px];
      }
  }
  auto x = ad::add_bias(ad::matmul(ad::Var<T>::constant(std::move(patches)), params[names::kPatchW]),
                        params[names::kPatchB]);
  const ad::Var<T> parts[] = {params[names::kCls], x};
  auto stacked = ad::concat_rows<T>(parts);
  const std::size_t n = cfg.token_count();
  std::vector<std::size_t> order, pos;
  order.reserve(batch * n);
  pos.reserve(batch * n);
  for (std::size_t b = 0; b < batch; ++b)
    for (std::size_t i = 0; i < n; ++i) {
      order.push_back(i == 0 ? 0 : 1 + b * np + (i - 1));
      pos.push_back(i);
    }
  auto tokens = ad::add(ad::gather_rows<T>(stacked, order), ad::gather_rows<T>(params[names::kPos], pos));
  return {tokens, batch, std::vector<TokenLayout>(batch, TokenLayout::identity(n))};
}

namespace {

template <class T>
ad::Var<T> linear(const ad::Var<T>& x, const ad::Var<T>& w, const ad::Var<T>& b) {
  return ad::add_bias(ad::matmul(x, w), b);
}

template <class T>
ad::Var<T> folded(const Params<T>& params, const std::string& name, const Tensor<double>* d) {
  if (!d) return params[name];
  const Tensor<T>& w = params[name].value();
  if (w.shape() != d->shape()) throw ShapeError("delta shape mismatch for '" + name + "'");
  Tensor<T> out = w;
  for (std::size_t i = 0; i < out.numel(); ++i) out[i] = static_cast<T>(static_cast<double>(w[i]) + (*d)[i]);
  return ad::Var<T>::constant(std::move(out));
}

}  // namespace

template <class T>
TokenBatch<T> mhsa_block(const ModelConfig& cfg, const Params<T>& params, std::size_t layer, const TokenBatch<T>& state,
                         LayerTrace<T>* trace, const CompensatorDelta* delta) {
  if (state.tokens() < 1) throw ShapeError("mhsa_block: empty token state");
  if (delta && (delta->q.size() != cfg.layers || delta->v.size() != cfg.layers))
    throw ShapeError("mhsa_block: delta does not cover every layer");
  auto n = [layer](const char* leaf) { return names::layer(layer, leaf); };
  const std::size_t batch = state.batch, tok = state.tokens();
  auto h = ad::layer_norm(state.x, params[n("ln1.g")], params[n("ln1.b")]);
  auto q = linear(h, folded(params, n("attn.wq"), delta ? &delta->q[layer] : nullptr), params[n("attn.bq")]);
  auto k = linear(h, params[n("attn.wk")], params[n("attn.bk")]);
  auto v = linear(h, folded(params, n("attn.wv"), delta ? &delta->v[layer] : nullptr), params[n("attn.bv")]);

  Tensor<T> key_bias = Tensor<T>::matrix(batch, tok);
  for (std::size_t b = 0; b < batch; ++b)
    for (std::size_t i = 0; i < tok; ++i) key_bias(b, i) = std::log(static_cast<T>(state.layouts[b].sizes[i]));

  Tensor<T> cls_attn;
  auto attn = ad::multi_head_attention(q, k, v, batch, cfg.heads, key_bias, &cls_attn);
  auto out = ad::add(state.x, linear(attn, params[n("attn.wo")], params[n("attn.bo")]));

  if (trace) {
    trace->tokens_in = tok;
    trace->cls_attention = std::move(cls_attn);
    const std::size_t hd = cfg.head_dim();
    Tensor<T> keys = Tensor<T>::matrix(batch * tok, hd);
    const auto& kv = k.value();
    const T inv = T(1) / static_cast<T>(cfg.heads);
    for (std::size_t r = 0; r < batch * tok; ++r)
      for (std::size_t hh = 0; hh < cfg.heads; ++hh)
        for (std::size_t j = 0; j < hd; ++j) keys(r, j) += kv(r, hh * hd + j) * inv;
    trace->keys = std::move(keys);
  }
  return {out, batch, state.layouts};
}

template <class T>
TokenBatch<T> mlp_block(const ModelConfig& cfg, const Params<T>& params, std::size_t layer, const TokenBatch<T>& state) {
  (void)cfg;
  auto n = [layer](const char* leaf) { return names::layer(layer, leaf); };
  auto h = ad::layer_norm(state.x, params[n("ln2.g")], params[n("ln2.b")]);
  auto m = linear(ad::gelu(linear(h, params[n("mlp.w1")], params[n("mlp.b1")])), params[n("mlp.w2")],
                  params[n("mlp.b2")]);
  auto out = ad::add(state.x, m);
  if (params.has_adapter) {
    const auto& down = params[names::adapter_down(layer)];
    const auto& up = params[names::adapter_up(layer)];
    if (down.rows() != state.x.cols() || up.rows() != down.cols() || up.cols() != state.x.cols())
      throw ShapeError("mlp_block: adapter shape mismatch in layer " + std::to_string(layer));
    auto branch = ad::matmul(ad::relu(ad::matmul(state.x, down)), up);
    out = ad::add(out, ad::scale(branch, params.adapter_scale));
  }
  return {out, state.batch, state.layouts};
}

template <class T>
TokenBatch<T> compress_tokens(const ModelConfig& cfg, const LayerDirective& directive, const TokenBatch<T>& state,
                              LayerTrace<T>& trace, std::vector<MergeStack>* dense_stacks) {
  const std::size_t tok = state.tokens();
  const std::size_t hd = cfg.head_dim();
  const bool dense = directive.dense_mode && directive.dense_r > 0;
  if (directive.dense_mode && directive.mode != CompressionMode::none)
    throw ValidationError("dense-mode directives cannot also merge or prune");
  if (!dense && (directive.mode == CompressionMode::none || directive.r == 0)) return state;

  ad::RowMix mix;
  mix.in_rows = state.batch * tok;
  std::vector<TokenLayout> layouts;
  layouts.reserve(state.batch);
  if (dense && dense_stacks) dense_stacks->assign(state.batch, MergeStack{});
  for (std::size_t b = 0; b < state.batch; ++b) {
    const TokenLayout& layout = state.layouts[b];
    if (dense || directive.mode == CompressionMode::merge) {
      Tensor<T> keys = Tensor<T>::matrix(tok, hd);
      std::copy(trace.keys.data() + b * tok * hd, trace.keys.data() + (b + 1) * tok * hd, keys.data());
      MergePlan plan = bipartite_soft_matching(keys, layout, dense ? directive.dense_r : directive.r);
      trace.clamped = trace.clamped || plan.clamped;
      append_mix(mix, merge_mix(layout, plan), b * tok);
      layouts.push_back(merged_layout(layout, plan));
      if (dense && dense_stacks) (*dense_stacks)[b] = MergeStack{layout, {plan}};
      trace.plans.push_back(std::move(plan));
    } else {
      std::span<const T> scores(trace.cls_attention.data() + b * tok, tok);
      auto keep = evit_keep(scores, layout, directive.r);
      trace.clamped = trace.clamped || (tok - keep.size() != std::min(directive.r, tok));
      append_mix(mix, ad::RowMix::gather(tok, keep), b * tok);
      layouts.push_back(gathered_layout(layout, keep));
    }
  }
  return {ad::mix_rows(state.x, mix), state.batch, std::move(layouts)};
}

template <class T>
ForwardTrace<T> forward_tokens(const ModelConfig& cfg, const Params<T>& params, TokenBatch<T> state,
                               const MergeSchedule& schedule, const ForwardOptions& options) {
  if (schedule.layers.size() != cfg.layers)
    throw ValidationError("merge schedule has " + std::to_string(schedule.layers.size()) + " entries for " +
                          std::to_string(cfg.layers) + " layers");
  ForwardTrace<T> trace;
  trace.head_mode = cfg.head_mode;
  for (std::size_t l = 0; l < cfg.layers; ++l) {
    LayerTrace<T> lt;
    state = mhsa_block(cfg, params, l, state, &lt);
    const auto& dir = schedule.layers[l];
    std::vector<MergeStack> stacks;
    const std::vector<TokenLayout> before = state.layouts;
    state = compress_tokens(cfg, dir, state, lt, &stacks);
    state = mlp_block(cfg, params, l, state);
    if (dir.dense_mode && dir.dense_r > 0) {
      ad::RowMix mix;
      const std::size_t tok = state.tokens();
      mix.in_rows = state.batch * tok;
      for (std::size_t b = 0; b < state.batch; ++b) append_mix(mix, unmerge_mix(state.layouts[b], stacks[b]), b * tok);
      state = {ad::mix_rows(state.x, mix), state.batch, before};
    }
    lt.tokens_out = state.tokens();
    trace.token_counts.push_back(lt.tokens_out);
    if (!options.keep_keys) lt.keys = Tensor<T>();
    trace.layers.push_back(std::move(lt));
  }
  std::vector<std::size_t> cls_rows(state.batch);
  for (std::size_t b = 0; b < state.batch; ++b) cls_rows[b] = b * state.tokens() + state.layouts[b].cls_index;
  auto cls = ad::gather_rows<T>(state.x, cls_rows);
  trace.features = ad::layer_norm(cls, params[names::kNormG], params[names::kNormB]);
  if (cfg.head_mode == HeadMode::cls_logits)
    trace.logits = ad::add_bias(ad::matmul(trace.features, params[names::kHeadW]), params[names::kHeadB]);
  return trace;
}

template <class T>
ForwardTrace<T> forward(const ModelConfig& cfg, const Params<T>& params, const Tensor<T>& images,
                        const MergeSchedule& schedule, const ForwardOptions& options) {
  if (schedule.layers.size() != cfg.layers)
    throw ValidationError("merge schedule has " + std::to_string(schedule.layers.size()) + " entries for " +
                          std::to_string(cfg.layers) + " layers");
  return forward_tokens(cfg, params, patch_embed(cfg, params, images), schedule, options);
}

template <class T>
ForwardTrace<T> forward(const ModelConfig& cfg, const WeightSet<T>& weights, const Tensor<T>& images,
                        const MergeSchedule& schedule, const CompensatorDelta* delta,
                        const AdapterWeights<T>* adapter) {
  if (adapter) validate_adapter(cfg, *adapter);
  if (delta) return forward(cfg, bind_params(apply_delta(weights, *delta), adapter), images, schedule);
  return forward(cfg, bind_params(weights, adapter), images, schedule);
}

#define TOCOM_VIT_INSTANTIATE(T)                                                                                  \
  template class WeightSet<T>;                                                                                    \
  template struct Params<T>;                                                                                      \
  template struct ForwardTrace<T>;                                                                                \
  template void validate_weights(const ModelConfig&, const WeightSet<T>&);                                        \
  template void validate_adapter(const ModelConfig&, const AdapterWeights<T>&);                                   \
  template WeightSet<T> apply_delta(const WeightSet<T>&, const CompensatorDelta&);                                \
  template Params<T> bind_params(const WeightSet<T>&, const AdapterWeights<T>*, const TrainablePredicate&);       \
  template TokenBatch<T> patch_embed(const ModelConfig&, const Params<T>&, const Tensor<T>&);                     \
  template TokenBatch<T> mhsa_block(const ModelConfig&, const Params<T>&, std::size_t, const TokenBatch<T>&,      \
                                    LayerTrace<T>*, const CompensatorDelta*);                                     \
  template TokenBatch<T> mlp_block(const ModelConfig&, const Params<T>&, std::size_t, const TokenBatch<T>&);      \
  template TokenBatch<T> compress_tokens(const ModelConfig&, const LayerDirective&, const TokenBatch<T>&,         \
                                         LayerTrace<T>&, std::vector<MergeStack>*);                               \
  template ForwardTrace<T> forward_tokens(const ModelConfig&, const Params<T>&, TokenBatch<T>,                    \
                                          const MergeSchedule&, const ForwardOptions&);                           \
  template ForwardTrace<T> forward(const ModelConfig&, const Params<T>&, const Tensor<T>&, const MergeSchedule&,  \
                                   const ForwardOptions&);                                                        \
  template ForwardTrace<T> forward(const ModelConfig&, const WeightSet<T>&, const Tensor<T>&,                     \
                                   const MergeSchedule&, const CompensatorDelta*, const AdapterWeights<T>*);

TOCOM_VIT_INSTANTIATE(float)
TOCOM_VIT_INSTANTIATE(double)

}  // namespace tocom
