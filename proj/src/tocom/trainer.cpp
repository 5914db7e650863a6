#include "tocom/trainer.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <sstream>

namespace tocom {

template <class T>
void adamw_update(Tensor<T>& w, const Tensor<T>& grad, AdamState<T>& state, double lr, double wd,
                  const AdamWHyper& hp) {
  if (w.shape() != grad.shape())
    throw ShapeError("adamw: gradient " + shape_str(grad.shape()) + " does not match parameter " +
                     shape_str(w.shape()));
  if (!grad.all_finite()) throw ValidationError("adamw: non-finite gradient");
  if (state.m.shape() != w.shape()) {
    state.m = Tensor<T>(w.shape(), T(0));
    state.v = Tensor<T>(w.shape(), T(0));
    state.step = 0;
  }
  ++state.step;
  const double c1 = 1.0 - std::pow(hp.beta1, static_cast<double>(state.step));
  const double c2 = 1.0 - std::pow(hp.beta2, static_cast<double>(state.step));
  const double decay = 1.0 - lr * wd;
  for (std::size_t i = 0; i < w.numel(); ++i) {
    const double g = grad[i];
    const double m = hp.beta1 * state.m[i] + (1.0 - hp.beta1) * g;
    const double v = hp.beta2 * state.v[i] + (1.0 - hp.beta2) * g * g;
    state.m[i] = static_cast<T>(m);
    state.v[i] = static_cast<T>(v);
    const double x = static_cast<double>(w[i]) * decay;
    w[i] = static_cast<T>(x - lr * (m / c1) / (std::sqrt(v / c2) + hp.eps));
  }
}

template <class T>
AdamW<T>::AdamW(std::vector<ad::Var<T>> params, AdamWHyper hp) : params_(std::move(params)), hp_(hp) {
  for (const auto& p : params_)
    if (!p.is_leaf() || !p.requires_grad()) throw ValidationError("adamw: parameters must be trainable leaves");
  state_.resize(params_.size());
}

template <class T>
void AdamW<T>::step(double lr, double wd) {
  for (std::size_t i = 0; i < params_.size(); ++i)
    if (params_[i].has_grad()) adamw_update(params_[i].mutable_value(), params_[i].grad(), state_[i], lr, wd, hp_);
}

template <class T>
void AdamW<T>::zero_grad() {
  for (auto& p : params_) p.zero_grad();
}

double lr_schedule(std::size_t step, std::size_t total, double base, std::size_t warmup, LrSchedule kind) {
  if (step > total) throw ValidationError("lr_schedule: step beyond total");
  if (warmup > 0 && step < warmup) return base * static_cast<double>(step) / static_cast<double>(warmup);
  if (kind == LrSchedule::constant) return base;
  if (total <= warmup) return base;
  const double t = static_cast<double>(step - warmup);
  const double span = static_cast<double>(total - warmup);
  return 0.5 * base * (1.0 + std::cos(std::numbers::pi * t / span));
}

std::string to_string(LossKind k) {
  switch (k) {
    case LossKind::kl_soft_targets:
      return "kl";
    case LossKind::l1_feature:
      return "l1";
    case LossKind::cross_entropy:
      return "ce";
  }
  return "kl";
}

LossKind parse_loss(const std::string& s) {
  if (s == "kl" || s == "kl_soft_targets") return LossKind::kl_soft_targets;
  if (s == "l1" || s == "l1_feature") return LossKind::l1_feature;
  if (s == "ce" || s == "cross_entropy") return LossKind::cross_entropy;
  throw ValidationError("unknown loss '" + s + "' (expected kl|l1|ce)");
}

void DistillConfig::validate(const ModelConfig& model) const {
  if (!(lr > 0)) throw ValidationError("distill config: lr must be > 0");
  if (weight_decay < 0) throw ValidationError("distill config: weight decay must be >= 0");
  if (batch_size < 1) throw ValidationError("distill config: batch size must be >= 1");
  if (rmax < 1) throw ValidationError("distill config: rmax must be >= 1");
  if (model.head_mode == HeadMode::final_features && loss != LossKind::l1_feature)
    throw ValidationError("distill config: a model without a classification head needs the l1 loss");
  if (compression == CompressionMode::none) throw ValidationError("distill config: compression mode must be merge or prune");
}

std::pair<std::size_t, std::size_t> sample_degree_pair(std::mt19937_64& rng, std::size_t rmax) {
  if (rmax < 1) throw ValidationError("sample_degree_pair: rmax must be >= 1");
  std::uniform_int_distribution<std::size_t> pick(0, rmax);
  for (;;) {
    const std::size_t m = pick(rng), n = pick(rng);
    if (m != n) return {m, n};
  }
}

MergeSchedule degree_schedule(const ModelConfig& cfg, CompressionMode mode, std::size_t r) {
  return MergeSchedule::uniform(cfg.layers, mode, r);
}

template <class T>
std::vector<ad::Var<T>> PluginVars<T>::flat() const {
  std::vector<ad::Var<T>> out;
  for (std::size_t g = 0; g < a.size(); ++g)
    for (std::size_t p = 0; p < a[g].size(); ++p) {
      out.push_back(a[g][p]);
      out.push_back(b[g][p]);
    }
  return out;
}

template <class T>
PluginVars<T> bind_plugins(const ToComSet& set, bool trainable) {
  PluginVars<T> vars;
  for (const auto& g : set.groups) {
    vars.a.emplace_back();
    vars.b.emplace_back();
    for (const auto& p : g.pairs) {
      auto make = [&](const Tensor<float>& t) {
        return trainable ? ad::Var<T>::parameter(t.cast<T>()) : ad::Var<T>::constant(t.cast<T>());
      };
      vars.a.back().push_back(make(p.a));
      vars.b.back().push_back(make(p.b));
    }
  }
  return vars;
}

template <class T>
PluginVars<T> unflatten_plugins(const ToComSet& set, const std::vector<ad::Var<T>>& flat) {
  PluginVars<T> vars;
  std::size_t k = 0;
  for (const auto& g : set.groups) {
    vars.a.emplace_back();
    vars.b.emplace_back();
    for (std::size_t p = 0; p < g.pairs.size(); ++p) {
      if (k + 2 > flat.size()) throw ShapeError("unflatten_plugins: too few tensors");
      vars.a.back().push_back(flat[k++]);
      vars.b.back().push_back(flat[k++]);
    }
  }
  if (k != flat.size()) throw ShapeError("unflatten_plugins: too many tensors");
  return vars;
}

template <class T>
Params<T> student_params(const WeightSet<T>& backbone, const ToComSet& set, const PluginVars<T>& vars, std::size_t m,
                         std::size_t n) {
  Params<T> params = bind_params(backbone);
  const auto terms = compose_terms(set, m, n);
  for (std::size_t l = 0; l < set.layers; ++l)
    for (LoraTarget t : {LoraTarget::q, LoraTarget::v}) {
      const std::size_t slot = 2 * l + (t == LoraTarget::v);
      ad::Var<T> acc;
      for (const auto& term : terms) {
        auto prod = ad::matmul(vars.a[term.group][slot], vars.b[term.group][slot]);
        if (term.sign < 0) prod = ad::scale(prod, T(-1));
        acc = acc ? ad::add(acc, prod) : prod;
      }
      const std::string name = t == LoraTarget::q ? names::wq(l) : names::wv(l);
      params.set(name, ad::add(params[name], ad::scale(acc, static_cast<T>(set.scale))));
    }
  return params;
}

namespace {

template <class T>
ad::Var<T> loss_against(const ForwardTrace<T>& student, const ForwardTrace<T>* teacher, std::span<const int> labels,
                        LossKind loss) {
  switch (loss) {
    case LossKind::kl_soft_targets:
      return ad::kl_soft_targets(student.logits, teacher->logits.value());
    case LossKind::l1_feature:
      return ad::l1_feature(student.features, teacher->features.value());
    case LossKind::cross_entropy:
      return ad::cross_entropy(student.logits, labels);
  }
  throw ValidationError("unknown loss kind");
}

void check_batch(const ModelConfig& cfg, std::size_t rows, std::span<const int> labels, LossKind loss) {
  if (cfg.head_mode == HeadMode::final_features && loss != LossKind::l1_feature)
    throw ValidationError("distill: a model without a classification head needs the l1 loss");
  if (loss == LossKind::cross_entropy && labels.size() != rows)
    throw ValidationError("distill: cross-entropy needs one label per image");
}

}  // namespace

template <class T>
ad::Var<T> distill_loss(const ModelConfig& cfg, const WeightSet<T>& backbone, const ToComSet& set,
                        const PluginVars<T>& vars, std::size_t m, std::size_t n, const DistillBatch<T>& batch,
                        LossKind loss, CompressionMode compression) {
  if (m == n) throw ValidationError("distill: source and target degree must differ");
  check_batch(cfg, batch.images->rows(), batch.labels, loss);
  std::optional<ForwardTrace<T>> teacher;
  if (loss != LossKind::cross_entropy)
    teacher = forward(cfg, bind_params(backbone), *batch.images, degree_schedule(cfg, compression, m));
  auto student = forward(cfg, student_params(backbone, set, vars, m, n), *batch.images,
                         degree_schedule(cfg, compression, n));
  return loss_against(student, teacher ? &*teacher : nullptr, batch.labels, loss);
}

double direct_distill_loss(const ModelConfig& cfg, const WeightSet<float>& backbone, const ToComSet& set,
                           std::size_t m, std::size_t n, const Tensor<float>& images, std::span<const int> labels,
                           LossKind loss, CompressionMode compression) {
  if (m == n) throw ValidationError("distill: source and target degree must differ");
  check_batch(cfg, images.rows(), labels, loss);
  const CompensatorDelta delta = compose(set, m, n);
  auto student = forward(cfg, backbone, images, degree_schedule(cfg, compression, n), &delta, static_cast<const AdapterWeights<float>*>(nullptr));
  std::optional<ForwardTrace<float>> teacher;
  if (loss != LossKind::cross_entropy)
    teacher = forward(cfg, backbone, images, degree_schedule(cfg, compression, m), nullptr,
                      static_cast<const AdapterWeights<float>*>(nullptr));
  return loss_against(student, teacher ? &*teacher : nullptr, labels, loss).value().item();
}

StepOutcome distill_step(const ModelConfig& cfg, const WeightSet<float>& backbone, ToComSet& set,
                         PluginVars<float>& vars, AdamW<float>& opt, std::size_t m, std::size_t n,
                         const DistillBatch<float>& batch, const DistillConfig& dc, double lr) {
  opt.zero_grad();
  auto loss = distill_loss(cfg, backbone, set, vars, m, n, batch, dc.loss, dc.compression);
  StepOutcome out;
  out.loss = loss.value().item();
  if (!std::isfinite(out.loss)) throw ValidationError("distill: non-finite loss");
  ad::backward(loss);
  for (std::size_t g = 0; g < vars.a.size(); ++g) {
    bool touched = false;
    for (std::size_t p = 0; p < vars.a[g].size(); ++p) touched = touched || vars.a[g][p].has_grad() || vars.b[g][p].has_grad();
    if (touched) out.touched_groups.push_back(g);
  }
  opt.step(lr, dc.weight_decay);
  for (std::size_t g = 0; g < vars.a.size(); ++g)
    for (std::size_t p = 0; p < vars.a[g].size(); ++p) {
      set.groups[g].pairs[p].a = vars.a[g][p].value();
      set.groups[g].pairs[p].b = vars.b[g][p].value();
    }
  return out;
}

TrainResult train_tocom(const Dataset& data, const ModelCheckpoint& backbone, ToComSet init, const DistillConfig& dc,
                        const StepCallback& on_step) {
  const ModelConfig& cfg = backbone.config;
  dc.validate(cfg);
  init.validate();
  if (init.layers != cfg.layers || init.dim != cfg.dim) throw ValidationError("plugin set does not match the backbone");
  if (init.rmax != dc.rmax) throw ValidationError("plugin set rmax does not match the training config");
  if (data.image_numel() != cfg.image_numel()) throw ValidationError("dataset images do not match the model input");

  TrainResult result{std::move(init), {}, {}};
  if (dc.epochs == 0) return result;
  std::vector<std::size_t> pool = data.indices(Split::pretrain);
  if (pool.empty()) throw ValidationError("dataset has no pretrain samples");

  const std::size_t per_epoch = (pool.size() + dc.batch_size - 1) / dc.batch_size;
  const std::size_t total = per_epoch * dc.epochs;
  const std::size_t warmup = per_epoch * dc.warmup_epochs;
  PluginVars<float> vars = bind_plugins<float>(result.set, true);
  AdamW<float> opt(vars.flat());
  std::mt19937_64 rng(dc.seed);
  std::size_t step = 0;
  for (std::size_t epoch = 0; epoch < dc.epochs; ++epoch) {
    std::shuffle(pool.begin(), pool.end(), rng);
    double sum = 0.0;
    for (std::size_t start = 0; start < pool.size(); start += dc.batch_size) {
      const std::span<const std::size_t> idx(pool.data() + start, std::min(dc.batch_size, pool.size() - start));
      const Tensor<float> images = data.gather(idx);
      const std::vector<int> labels = data.gather_labels(idx);
      const auto [m, n] = sample_degree_pair(rng, dc.rmax);
      const double lr = lr_schedule(step, total, dc.lr, warmup, dc.schedule);
      const auto outcome =
          distill_step(cfg, backbone.weights, result.set, vars, opt, m, n, {&images, labels}, dc, lr);
      StepRecord rec{step, epoch, m, n, outcome.loss, lr};
      result.log.push_back(rec);
      if (on_step) on_step(rec);
      sum += outcome.loss;
      ++step;
    }
    result.epoch_loss.push_back(sum / static_cast<double>(per_epoch));
  }
  return result;
}

double held_out_distill_loss(const ModelConfig& cfg, const WeightSet<float>& backbone, const ToComSet& set,
                             const Tensor<float>& images, std::span<const int> labels, LossKind loss,
                             CompressionMode compression, std::size_t batch_size) {
  if (images.rows() == 0) throw ValidationError("held-out loss: no samples");
  double total = 0.0;
  std::size_t pairs = 0;
  for (std::size_t m = 0; m <= set.rmax; ++m)
    for (std::size_t n = 0; n <= set.rmax; ++n) {
      if (m == n) continue;
      double acc = 0.0;
      for (std::size_t start = 0; start < images.rows(); start += batch_size) {
        const std::size_t count = std::min(batch_size, images.rows() - start);
        Tensor<float> chunk = Tensor<float>::matrix(count, images.cols());
        std::copy(images.data() + start * images.cols(), images.data() + (start + count) * images.cols(), chunk.data());
        const auto lab = labels.empty() ? labels : labels.subspan(start, count);
        acc += direct_distill_loss(cfg, backbone, set, m, n, chunk, lab, loss, compression) * double(count);
      }
      total += acc / double(images.rows());
      ++pairs;
    }
  return total / double(pairs);
}

std::string training_log_csv(const std::vector<StepRecord>& log) {
  std::ostringstream os;
  os.precision(9);
  os << "step,epoch,m,n,loss,lr\n";
  for (const auto& r : log) os << r.step << ',' << r.epoch << ',' << r.m << ',' << r.n << ',' << r.loss << ',' << r.lr << '\n';
  return os.str();
}

#define TOCOM_TRAINER_INSTANTIATE(T)                                                                              \
  template void adamw_update(Tensor<T>&, const Tensor<T>&, AdamState<T>&, double, double, const AdamWHyper&);    \
  template class AdamW<T>;                                                                                        \
  template struct PluginVars<T>;                                                                                  \
  template PluginVars<T> bind_plugins(const ToComSet&, bool);                                                     \
  template PluginVars<T> unflatten_plugins(const ToComSet&, const std::vector<ad::Var<T>>&);                      \
  template Params<T> student_params(const WeightSet<T>&, const ToComSet&, const PluginVars<T>&, std::size_t,      \
                                    std::size_t);                                                                 \
  template ad::Var<T> distill_loss(const ModelConfig&, const WeightSet<T>&, const ToComSet&, const PluginVars<T>&, \
                                   std::size_t, std::size_t, const DistillBatch<T>&, LossKind, CompressionMode);

TOCOM_TRAINER_INSTANTIATE(float)
TOCOM_TRAINER_INSTANTIATE(double)

}  // namespace tocom
