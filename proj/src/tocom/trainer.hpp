#pragma once

#include <functional>
#include <random>
#include <string>
#include <utility>
#include <vector>

#include "tocom/checkpoint.hpp"
#include "tocom/dataset.hpp"
#include "tocom/plugins.hpp"

namespace tocom {

// --- optimizer ---

struct AdamWHyper {
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

template <class T>
struct AdamState {
  Tensor<T> m;
  Tensor<T> v;
  std::int64_t step = 0;
};

// One decoupled-weight-decay Adam step: w <- w - lr*wd*w, then the Adam
// update with bias-corrected moments. Throws on a non-finite gradient.
template <class T>
void adamw_update(Tensor<T>& w, const Tensor<T>& grad, AdamState<T>& state, double lr, double wd,
                  const AdamWHyper& hp = {});

// Optimizer over a fixed list of leaf variables. Parameters that received no
// gradient in the current step are left untouched.
template <class T>
class AdamW {
 public:
  explicit AdamW(std::vector<ad::Var<T>> params, AdamWHyper hp = {});
  void step(double lr, double wd);
  void zero_grad();
  const std::vector<ad::Var<T>>& params() const { return params_; }
  const std::vector<AdamState<T>>& state() const { return state_; }

 private:
  std::vector<ad::Var<T>> params_;
  std::vector<AdamState<T>> state_;
  AdamWHyper hp_;
};

enum class LrSchedule { cosine, constant };

// Linear warmup from 0 over `warmup` steps, then 0.5*base*(1+cos(pi*t/T)) over
// the remaining span.
double lr_schedule(std::size_t step, std::size_t total, double base, std::size_t warmup,
                   LrSchedule kind = LrSchedule::cosine);

// --- distillation ---

enum class LossKind { kl_soft_targets, l1_feature, cross_entropy };
std::string to_string(LossKind k);
LossKind parse_loss(const std::string& s);

struct DistillConfig {
  std::size_t epochs = 10;
  std::size_t batch_size = 64;
  double lr = 1e-3;
  double weight_decay = 0.05;
  std::size_t warmup_epochs = 0;
  LrSchedule schedule = LrSchedule::cosine;
  LossKind loss = LossKind::kl_soft_targets;
  std::size_t rmax = 3;
  std::uint64_t seed = 0;
  CompressionMode compression = CompressionMode::merge;

  void validate(const ModelConfig& model) const;
};

// Uniform over {0..rmax}^2 with m != n.
std::pair<std::size_t, std::size_t> sample_degree_pair(std::mt19937_64& rng, std::size_t rmax);

MergeSchedule degree_schedule(const ModelConfig& cfg, CompressionMode mode, std::size_t r);

// Graph handles for every plugin tensor, indexed [group][pair] like ToComSet.
template <class T>
struct PluginVars {
  std::vector<std::vector<ad::Var<T>>> a;
  std::vector<std::vector<ad::Var<T>>> b;

  std::vector<ad::Var<T>> flat() const;
};

template <class T>
PluginVars<T> bind_plugins(const ToComSet& set, bool trainable);
// Rebuilds the handles from a flat list in flat() order.
template <class T>
PluginVars<T> unflatten_plugins(const ToComSet& set, const std::vector<ad::Var<T>>& flat);

// Backbone constants with W_q, W_v replaced by W + s * sum(sign * A B) over
// the groups compose_terms(m, n) selects.
template <class T>
Params<T> student_params(const WeightSet<T>& backbone, const ToComSet& set, const PluginVars<T>& vars, std::size_t m,
                         std::size_t n);

template <class T>
struct DistillBatch {
  const Tensor<T>* images = nullptr;
  std::span<const int> labels;
};

// Teacher: frozen backbone at degree m. Student: backbone patched with the
// (m -> n) plugin update, run at degree n. Returns the scalar loss node.
template <class T>
ad::Var<T> distill_loss(const ModelConfig& cfg, const WeightSet<T>& backbone, const ToComSet& set,
                        const PluginVars<T>& vars, std::size_t m, std::size_t n, const DistillBatch<T>& batch,
                        LossKind loss, CompressionMode compression);

// Same loss evaluated directly from two independent forwards: the teacher at
// m, the student with compose(m, n) folded into its weights at n.
double direct_distill_loss(const ModelConfig& cfg, const WeightSet<float>& backbone, const ToComSet& set,
                           std::size_t m, std::size_t n, const Tensor<float>& images, std::span<const int> labels,
                           LossKind loss, CompressionMode compression);

struct StepRecord {
  std::size_t step = 0;
  std::size_t epoch = 0;
  std::size_t m = 0;
  std::size_t n = 0;
  double loss = 0.0;
  double lr = 0.0;
};

struct StepOutcome {
  double loss = 0.0;
  // Groups that received a gradient in this step.
  std::vector<std::size_t> touched_groups;
};

// One optimization step on a single batch and degree pair.
StepOutcome distill_step(const ModelConfig& cfg, const WeightSet<float>& backbone, ToComSet& set,
                         PluginVars<float>& vars, AdamW<float>& opt, std::size_t m, std::size_t n,
                         const DistillBatch<float>& batch, const DistillConfig& dc, double lr);

struct TrainResult {
  ToComSet set;
  std::vector<StepRecord> log;
  std::vector<double> epoch_loss;
};

using StepCallback = std::function<void(const StepRecord&)>;

// Trains the plugin set on the pretrain split of the dataset. The backbone is
// never modified.
TrainResult train_tocom(const Dataset& data, const ModelCheckpoint& backbone, ToComSet init, const DistillConfig& dc,
                        const StepCallback& on_step = {});

// Mean distillation loss over every ordered pair (m, n), m != n, on the given
// samples.
double held_out_distill_loss(const ModelConfig& cfg, const WeightSet<float>& backbone, const ToComSet& set,
                             const Tensor<float>& images, std::span<const int> labels, LossKind loss,
                             CompressionMode compression, std::size_t batch_size = 128);

std::string training_log_csv(const std::vector<StepRecord>& log);

}  // namespace tocom
