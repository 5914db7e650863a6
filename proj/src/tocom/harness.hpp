#pragma once

#include <optional>
#include <string>
#include <vector>

#include "tocom/checkpoint.hpp"
#include "tocom/dataset.hpp"
#include "tocom/trainer.hpp"

namespace tocom {

struct TrainHyper {
  std::size_t epochs = 10;
  std::size_t batch_size = 64;
  double lr = 1e-3;
  double weight_decay = 0.05;
  std::size_t warmup_epochs = 0;
  std::uint64_t seed = 0;
  std::size_t adapter_bottleneck = 16;
  double adapter_scale = 0.1;
  CompressionMode compression = CompressionMode::merge;
  std::size_t rmax = 3;
};

struct TrainLog {
  std::vector<double> epoch_loss;
  std::vector<double> epoch_accuracy;  // on the training batches
};

// Cross-entropy training of a fresh model on the pretrain split (no token
// compression).
ModelCheckpoint pretrain(const ModelConfig& cfg, const Dataset& data, const TrainHyper& hyper,
                         TrainLog* log = nullptr);

// Downstream tuning with compression degree source_r active during training.
// The head is re-initialized for the dataset's classes. full updates every
// weight; adaptformer updates only the adapter and the head.
ModelCheckpoint finetune(const ModelCheckpoint& backbone, const Dataset& data, std::size_t source_r, TuneMode mode,
                         const TrainHyper& hyper, TrainLog* log = nullptr);

struct PluginPatch {
  const ToComSet* set = nullptr;
  std::optional<double> scale;  // defaults to the set's trained scale
};

enum class EvalSplit { automatic, pretrain, train, val, test };

struct EvalResult {
  double accuracy = 0.0;
  std::size_t correct = 0;
  std::size_t count = 0;
  double mean_tokens = 0.0;  // tokens per layer entering attention, averaged
  std::size_t token_proxy = 0;  // per image, summed over layers
  double seconds = 0.0;
  bool patched = false;
  std::vector<int> predictions;
};

// Indices for a split; automatic means downstream-test when present, else
// the pretrain samples.
std::vector<std::size_t> split_indices(const Dataset& data, EvalSplit split);

// Accuracy at compression degree target_r. With a plugin set the weights are
// patched by compose(source_r, target_r) on a copy; nothing is patched when
// source_r == target_r. Work is split into fixed chunks so results do not
// depend on the thread count.
EvalResult evaluate(const ModelCheckpoint& ckpt, const Dataset& data, std::size_t target_r,
                    const PluginPatch& tocom = {}, EvalSplit split = EvalSplit::automatic, std::size_t threads = 1);

inline const std::vector<double> kScaleCandidates = {0.01, 0.02, 0.05, 0.08, 0.1, 0.12, 0.15};

struct GridRow {
  std::size_t target_r = 0;
  std::string variant;  // baseline | tocom
  double accuracy = 0.0;
  double scale = 0.0;
  double mean_tokens = 0.0;
  std::size_t count = 0;
};

struct ScaleChoice {
  double scale = 0.0;
  std::vector<std::pair<double, double>> validation;  // (s, mean val accuracy)
};

// Picks s maximizing mean validation accuracy over the mismatched targets.
ScaleChoice search_scale(const ModelCheckpoint& ckpt, const Dataset& data, std::span<const std::size_t> targets,
                         const ToComSet& set, std::span<const double> candidates, std::size_t threads = 1);

std::vector<GridRow> eval_grid(const ModelCheckpoint& ckpt, const Dataset& data, std::span<const std::size_t> targets,
                               const ToComSet& set, std::span<const double> candidates, std::size_t threads = 1,
                               ScaleChoice* choice = nullptr);

std::string grid_csv(const std::vector<GridRow>& rows);

// W_base + W_plus - W_minus over shared tensor names; the head is taken from
// base whenever the three heads differ in shape.
ModelCheckpoint task_vector_arith(const ModelCheckpoint& base, const ModelCheckpoint& plus,
                                  const ModelCheckpoint& minus);

struct BenchRow {
  std::size_t r = 0;
  double images_per_second = 0.0;
  double seconds_per_batch = 0.0;
  std::size_t token_proxy = 0;
  double mean_tokens = 0.0;
};

std::vector<BenchRow> bench_throughput(const ModelCheckpoint& ckpt, std::span<const std::size_t> r_values,
                                       std::size_t batch, std::size_t repeats = 5, std::uint64_t seed = 0);

}  // namespace tocom
