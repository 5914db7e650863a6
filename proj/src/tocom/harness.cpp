#include "tocom/harness.hpp"

#include <algorithm>
#include <chrono>
#include <exception>
#include <sstream>
#include <thread>

namespace tocom {

namespace {

using Clock = std::chrono::steady_clock;

double seconds_since(Clock::time_point t0) {
  return std::chrono::duration<double>(Clock::now() - t0).count();
}

std::vector<int> argmax_rows(const Tensor<float>& logits) {
  std::vector<int> out(logits.rows());
  for (std::size_t r = 0; r < logits.rows(); ++r) {
    std::size_t best = 0;
    for (std::size_t c = 1; c < logits.cols(); ++c)
      if (logits(r, c) > logits(r, best)) best = c;
    out[r] = static_cast<int>(best);
  }
  return out;
}

// Trains the bound parameters selected by `trainable` with cross-entropy.
// Matrices with a single row (biases, norms, the class token) are not decayed.
void train_classifier(const ModelConfig& cfg, WeightSet<float>& weights, std::optional<AdapterWeights<float>>& adapter,
                      const TrainablePredicate& trainable, const Dataset& data, std::vector<std::size_t> pool,
                      const TrainHyper& hyper, const MergeSchedule& schedule, TrainLog* log) {
  if (hyper.epochs == 0) return;
  if (pool.empty()) throw ValidationError("training split is empty");
  if (!(hyper.lr > 0) || hyper.batch_size == 0) throw ValidationError("training: lr and batch size must be positive");
  Params<float> params = bind_params(weights, adapter ? &*adapter : nullptr, trainable);

  std::vector<std::string> trained;
  for (const auto& [name, v] : params.vars)
    if (v.requires_grad()) trained.push_back(name);
  std::sort(trained.begin(), trained.end());
  std::vector<ad::Var<float>> decayed, plain;
  for (const auto& name : trained) (params[name].rows() > 1 ? decayed : plain).push_back(params[name]);
  AdamW<float> opt_decay(decayed), opt_plain(plain);

  const std::size_t per_epoch = (pool.size() + hyper.batch_size - 1) / hyper.batch_size;
  const std::size_t total = per_epoch * hyper.epochs;
  const std::size_t warmup = per_epoch * hyper.warmup_epochs;
  std::mt19937_64 rng(hyper.seed);
  std::size_t step = 0;
  for (std::size_t epoch = 0; epoch < hyper.epochs; ++epoch) {
    std::shuffle(pool.begin(), pool.end(), rng);
    double loss_sum = 0.0;
    std::size_t correct = 0;
    for (std::size_t start = 0; start < pool.size(); start += hyper.batch_size) {
      const std::span<const std::size_t> idx(pool.data() + start, std::min(hyper.batch_size, pool.size() - start));
      const Tensor<float> images = data.gather(idx);
      const std::vector<int> labels = data.gather_labels(idx);
      opt_decay.zero_grad();
      opt_plain.zero_grad();
      auto trace = forward(cfg, params, images, schedule, {false});
      auto loss = ad::cross_entropy(trace.logits, std::span<const int>(labels));
      ad::backward(loss);
      const double lr = lr_schedule(step, total, hyper.lr, warmup);
      opt_decay.step(lr, hyper.weight_decay);
      opt_plain.step(lr, 0.0);
      loss_sum += loss.value().item();
      const auto pred = argmax_rows(trace.logits.value());
      for (std::size_t i = 0; i < pred.size(); ++i) correct += pred[i] == labels[i];
      ++step;
    }
    if (log) {
      log->epoch_loss.push_back(loss_sum / double(per_epoch));
      log->epoch_accuracy.push_back(double(correct) / double(pool.size()));
    }
  }
  for (const auto& name : trained) {
    if (name.rfind("adapter.", 0) == 0) continue;
    weights.set(name, params[name].value());
  }
  if (adapter)
    for (std::size_t l = 0; l < adapter->down.size(); ++l) {
      adapter->down[l] = params[names::adapter_down(l)].value();
      adapter->up[l] = params[names::adapter_up(l)].value();
    }
}

}  // namespace

ModelCheckpoint pretrain(const ModelConfig& cfg_in, const Dataset& data, const TrainHyper& hyper, TrainLog* log) {
  ModelConfig cfg = cfg_in;
  cfg.num_classes = data.classes;
  cfg.channels = data.channels;
  cfg.image_size = data.image_size;
  cfg.validate();
  if (cfg.head_mode != HeadMode::cls_logits) throw ValidationError("pretrain needs a classification head");
  ModelCheckpoint ckpt;
  ckpt.config = cfg;
  ckpt.weights = init_weights(cfg, hyper.seed);
  ckpt.meta = {0, hyper.rmax, data.id, hyper.seed, TuneMode::pretrain, hyper.compression};
  auto pool = data.indices(Split::pretrain);
  train_classifier(cfg, ckpt.weights, ckpt.adapter, [](const std::string&) { return true; }, data, pool, hyper,
                   MergeSchedule::none(cfg.layers), log);
  return ckpt;
}

ModelCheckpoint finetune(const ModelCheckpoint& backbone, const Dataset& data, std::size_t source_r, TuneMode mode,
                         const TrainHyper& hyper, TrainLog* log) {
  backbone.validate();
  if (mode != TuneMode::full && mode != TuneMode::adaptformer)
    throw ValidationError("finetune mode must be full or adaptformer");
  if (source_r > hyper.rmax)
    throw ValidationError("source_r " + std::to_string(source_r) + " exceeds rmax " + std::to_string(hyper.rmax));
  if (data.image_numel() != backbone.config.image_numel() || data.channels != backbone.config.channels)
    throw ValidationError("dataset images do not match the backbone input");
  auto pool = data.indices(Split::downstream_train);
  if (pool.empty()) throw ValidationError("dataset has no downstream-train split (open it with split=downstream)");

  ModelCheckpoint ckpt;
  ckpt.config = backbone.config;
  ckpt.config.num_classes = data.classes;
  ckpt.config.head_mode = HeadMode::cls_logits;
  ckpt.weights = backbone.weights;
  reset_head(ckpt.config, ckpt.weights, hyper.seed);
  if (mode == TuneMode::adaptformer)
    ckpt.adapter = init_adapter(ckpt.config, hyper.adapter_bottleneck, hyper.adapter_scale, hyper.seed + 1);
  ckpt.meta = {source_r, hyper.rmax, data.id, hyper.seed, mode, hyper.compression};

  TrainablePredicate trainable;
  if (mode == TuneMode::full)
    trainable = [](const std::string&) { return true; };
  else
    trainable = [](const std::string& n) { return names::is_head(n) || n.rfind("adapter.", 0) == 0; };
  train_classifier(ckpt.config, ckpt.weights, ckpt.adapter, trainable, data, pool, hyper,
                   degree_schedule(ckpt.config, hyper.compression, source_r), log);
  return ckpt;
}

std::vector<std::size_t> split_indices(const Dataset& data, EvalSplit split) {
  switch (split) {
    case EvalSplit::pretrain:
      return data.indices(Split::pretrain);
    case EvalSplit::train:
      return data.indices(Split::downstream_train);
    case EvalSplit::val:
      return data.indices(Split::downstream_val);
    case EvalSplit::test:
      return data.indices(Split::downstream_test);
    case EvalSplit::automatic: {
      auto test = data.indices(Split::downstream_test);
      return test.empty() ? data.indices(Split::pretrain) : test;
    }
  }
  return {};
}

EvalResult evaluate(const ModelCheckpoint& ckpt, const Dataset& data, std::size_t target_r, const PluginPatch& tocom,
                    EvalSplit split, std::size_t threads) {
  const auto t0 = Clock::now();
  const ModelConfig& cfg = ckpt.config;
  if (cfg.head_mode != HeadMode::cls_logits) throw ValidationError("evaluate needs a classification head");
  if (target_r > ckpt.meta.rmax)
    throw ValidationError("target_r " + std::to_string(target_r) + " exceeds rmax " + std::to_string(ckpt.meta.rmax));
  if (ckpt.meta.source_r > ckpt.meta.rmax) throw ValidationError("checkpoint metadata lacks a valid source_r");
  if (data.image_numel() != cfg.image_numel()) throw ValidationError("dataset images do not match the model input");
  if (data.classes != cfg.num_classes)
    throw ValidationError("dataset has " + std::to_string(data.classes) + " classes, model head has " +
                          std::to_string(cfg.num_classes));

  EvalResult res;
  WeightSet<float> weights = ckpt.weights;
  if (tocom.set && ckpt.meta.source_r != target_r) {
    if (tocom.set->layers != cfg.layers || tocom.set->dim != cfg.dim)
      throw ValidationError("plugin set does not match the model");
    weights = apply_delta(weights, compose(*tocom.set, ckpt.meta.source_r, target_r, tocom.scale));
    res.patched = true;
  }
  const auto idx = split_indices(data, split);
  if (idx.empty()) throw ValidationError("evaluation split is empty");
  const MergeSchedule schedule = degree_schedule(cfg, ckpt.meta.compression, target_r);

  constexpr std::size_t kChunk = 64;
  const std::size_t chunks = (idx.size() + kChunk - 1) / kChunk;
  res.predictions.assign(idx.size(), -1);
  std::vector<std::size_t> proxy(chunks, 0);
  const AdapterWeights<float>* adapter = ckpt.adapter ? &*ckpt.adapter : nullptr;
  auto work = [&](std::size_t first, std::size_t stride) {
    const Params<float> params = bind_params(weights, adapter);
    for (std::size_t c = first; c < chunks; c += stride) {
      const std::size_t begin = c * kChunk, count = std::min(kChunk, idx.size() - begin);
      const Tensor<float> images = data.gather(std::span<const std::size_t>(idx.data() + begin, count));
      const auto trace = forward(cfg, params, images, schedule, {false});
      const auto pred = argmax_rows(trace.logits.value());
      std::copy(pred.begin(), pred.end(), res.predictions.begin() + begin);
      proxy[c] = trace.token_proxy();
    }
  };
  const std::size_t nthreads = std::clamp<std::size_t>(threads, 1, chunks);
  if (nthreads == 1) {
    work(0, 1);
  } else {
    std::vector<std::exception_ptr> errors(nthreads);
    std::vector<std::thread> pool;
    for (std::size_t t = 0; t < nthreads; ++t)
      pool.emplace_back([&, t] {
        try {
          work(t, nthreads);
        } catch (...) {
          errors[t] = std::current_exception();
        }
      });
    for (auto& th : pool) th.join();
    for (auto& e : errors)
      if (e) std::rethrow_exception(e);
  }
  for (std::size_t i = 0; i < idx.size(); ++i) res.correct += res.predictions[i] == data.labels[idx[i]];
  res.count = idx.size();
  res.accuracy = double(res.correct) / double(res.count);
  res.token_proxy = proxy.front();
  res.mean_tokens = double(res.token_proxy) / double(cfg.layers);
  res.seconds = seconds_since(t0);
  return res;
}

ScaleChoice search_scale(const ModelCheckpoint& ckpt, const Dataset& data, std::span<const std::size_t> targets,
                         const ToComSet& set, std::span<const double> candidates, std::size_t threads) {
  if (candidates.empty()) throw ValidationError("scale search: no candidates");
  ScaleChoice choice;
  choice.scale = candidates.front();
  if (candidates.size() == 1) return choice;
  if (data.indices(Split::downstream_val).empty())
    throw ValidationError("scale search needs a downstream-val split");
  std::vector<std::size_t> mismatched;
  for (std::size_t t : targets)
    if (t != ckpt.meta.source_r) mismatched.push_back(t);
  double best = -1.0;
  for (double s : candidates) {
    double acc = 0.0;
    for (std::size_t t : mismatched) acc += evaluate(ckpt, data, t, {&set, s}, EvalSplit::val, threads).accuracy;
    acc = mismatched.empty() ? 0.0 : acc / double(mismatched.size());
    choice.validation.push_back({s, acc});
    if (acc > best) {
      best = acc;
      choice.scale = s;
    }
  }
  return choice;
}

std::vector<GridRow> eval_grid(const ModelCheckpoint& ckpt, const Dataset& data, std::span<const std::size_t> targets,
                               const ToComSet& set, std::span<const double> candidates, std::size_t threads,
                               ScaleChoice* choice_out) {
  if (targets.empty()) throw ValidationError("eval-grid: empty target list");
  const ScaleChoice choice = search_scale(ckpt, data, targets, set, candidates, threads);
  if (choice_out) *choice_out = choice;
  std::vector<GridRow> rows;
  for (std::size_t t : targets) {
    const auto base = evaluate(ckpt, data, t, {}, EvalSplit::automatic, threads);
    rows.push_back({t, "baseline", base.accuracy, 0.0, base.mean_tokens, base.count});
    const auto patched = evaluate(ckpt, data, t, {&set, choice.scale}, EvalSplit::automatic, threads);
    rows.push_back({t, "tocom", patched.accuracy, choice.scale, patched.mean_tokens, patched.count});
  }
  return rows;
}

std::string grid_csv(const std::vector<GridRow>& rows) {
  std::ostringstream os;
  os.precision(9);
  os << "target_r,variant,accuracy,scale,mean_tokens,count\n";
  for (const auto& r : rows)
    os << r.target_r << ',' << r.variant << ',' << r.accuracy << ',' << r.scale << ',' << r.mean_tokens << ','
       << r.count << '\n';
  return os.str();
}

ModelCheckpoint task_vector_arith(const ModelCheckpoint& base, const ModelCheckpoint& plus,
                                  const ModelCheckpoint& minus) {
  auto body = [](ModelConfig c) {
    c.num_classes = 0;
    return c;
  };
  if (!(body(base.config) == body(plus.config)) || !(body(base.config) == body(minus.config)))
    throw ValidationError("arith: model configs differ");
  ModelCheckpoint out = base;
  for (const auto& [name, w] : base.weights.entries()) {
    if (!plus.weights.contains(name) || !minus.weights.contains(name))
      throw ValidationError("arith: tensor '" + name + "' is missing from an operand");
    const auto& p = plus.weights.at(name);
    const auto& m = minus.weights.at(name);
    if (p.shape() != w->shape() || m.shape() != w->shape()) {
      if (names::is_head(name)) continue;
      throw ShapeError("arith: tensor '" + name + "' has mismatched shapes");
    }
    if (names::is_head(name) && !(base.config.num_classes == plus.config.num_classes &&
                                  plus.config.num_classes == minus.config.num_classes))
      continue;
    Tensor<float> r = *w;
    for (std::size_t i = 0; i < r.numel(); ++i)
      r[i] = static_cast<float>(double((*w)[i]) + double(p[i]) - double(m[i]));
    out.weights.set(name, std::move(r));
  }
  if (base.adapter && plus.adapter && minus.adapter) {
    auto& a = *out.adapter;
    auto combine = [](std::vector<Tensor<float>>& dst, const std::vector<Tensor<float>>& p,
                      const std::vector<Tensor<float>>& m) {
      for (std::size_t l = 0; l < dst.size(); ++l) {
        if (p.at(l).shape() != dst[l].shape() || m.at(l).shape() != dst[l].shape())
          throw ShapeError("arith: adapter shapes differ");
        for (std::size_t i = 0; i < dst[l].numel(); ++i)
          dst[l][i] = static_cast<float>(double(dst[l][i]) + double(p[l][i]) - double(m[l][i]));
      }
    };
    combine(a.down, plus.adapter->down, minus.adapter->down);
    combine(a.up, plus.adapter->up, minus.adapter->up);
  }
  out.meta.mode = TuneMode::arith;
  out.validate();
  return out;
}

std::vector<BenchRow> bench_throughput(const ModelCheckpoint& ckpt, std::span<const std::size_t> r_values,
                                       std::size_t batch, std::size_t repeats, std::uint64_t seed) {
  if (batch == 0 || repeats == 0) throw ValidationError("bench: batch and repeats must be positive");
  const ModelConfig& cfg = ckpt.config;
  std::mt19937_64 rng(seed);
  std::normal_distribution<float> dist(0.0f, 1.0f);
  Tensor<float> images = Tensor<float>::matrix(batch, cfg.image_numel());
  for (float& x : images.values()) x = dist(rng);
  const Params<float> params = bind_params(ckpt.weights, ckpt.adapter ? &*ckpt.adapter : nullptr);

  std::vector<BenchRow> rows;
  for (std::size_t r : r_values) {
    const auto schedule = degree_schedule(cfg, ckpt.meta.compression, r);
    BenchRow row;
    row.r = r;
    row.token_proxy = forward(cfg, params, images, schedule, {false}).token_proxy();
    std::vector<double> times;
    for (std::size_t i = 0; i < repeats; ++i) {
      const auto t0 = Clock::now();
      auto trace = forward(cfg, params, images, schedule, {false});
      times.push_back(seconds_since(t0));
    }
    std::sort(times.begin(), times.end());
    row.seconds_per_batch = times[times.size() / 2];
    row.images_per_second = double(batch) / row.seconds_per_batch;
    row.mean_tokens = double(row.token_proxy) / double(cfg.layers);
    rows.push_back(row);
  }
  return rows;
}

}  // namespace tocom
