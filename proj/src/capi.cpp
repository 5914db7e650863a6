#include "tocom/tocom.h"

#include <zlib.h>

#include <atomic>
#include <chrono>
#include <cstdlib>
#include <cstring>
#include <set>
#include <string>

#include "json.hpp"
#include "tocom/checkpoint.hpp"
#include "tocom/dataset.hpp"
#include "tocom/harness.hpp"
#include "tocom/selftest.hpp"
#include "tocom/trainer.hpp"

using nlohmann::json;

struct tocom_dataset {
  tocom::Dataset ds;
};

struct tocom_model {
  tocom::ModelCheckpoint ckpt;
};

struct tocom_plugin {
  tocom::ToComSet set;
  json metadata = json::object();
};

namespace {

thread_local std::string g_error;
std::atomic<int> g_threads{1};

struct UsageError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

template <class F>
tocom_status guarded(F&& body) {
  try {
    g_error.clear();
    body();
    return TOCOM_OK;
  } catch (const UsageError& e) {
    g_error = e.what();
    return TOCOM_ERR_USAGE;
  } catch (const tocom::FormatError& e) {
    g_error = e.what();
    return TOCOM_ERR_IO;
  } catch (const tocom::IoError& e) {
    g_error = e.what();
    return TOCOM_ERR_IO;
  } catch (const tocom::ValidationError& e) {
    g_error = e.what();
    return TOCOM_ERR_VALIDATION;
  } catch (const tocom::ShapeError& e) {
    g_error = e.what();
    return TOCOM_ERR_VALIDATION;
  } catch (const json::exception& e) {
    g_error = std::string("options: ") + e.what();
    return TOCOM_ERR_USAGE;
  } catch (const std::exception& e) {
    g_error = e.what();
    return TOCOM_ERR_INTERNAL;
  } catch (...) {
    g_error = "unknown error";
    return TOCOM_ERR_INTERNAL;
  }
}

void require(const void* p, const char* what) {
  if (!p) throw UsageError(std::string(what) + " must not be NULL");
}

char* dup_string(const std::string& s) {
  char* out = static_cast<char*>(std::malloc(s.size() + 1));
  if (!out) throw std::bad_alloc();
  std::memcpy(out, s.c_str(), s.size() + 1);
  return out;
}

void emit(char** out, const std::string& s) {
  if (out) *out = dup_string(s);
}

// Option object that rejects keys nobody asked for.
class Options {
 public:
  explicit Options(const char* text) {
    if (text && *text) {
      try {
        j_ = json::parse(text);
      } catch (const json::parse_error& e) {
        throw UsageError(std::string("options are not valid JSON: ") + e.what());
      }
    }
    if (j_.is_null()) j_ = json::object();
    if (!j_.is_object()) throw UsageError("options must be a JSON object");
  }

  template <class T>
  T get(const std::string& key, T fallback) {
    used_.insert(key);
    if (!j_.contains(key) || j_[key].is_null()) return fallback;
    try {
      if constexpr (std::is_unsigned_v<T> && !std::is_same_v<T, bool>) {
        if (!j_[key].is_number_unsigned()) throw UsageError("option '" + key + "' must be a non-negative integer");
      }
      return j_[key].get<T>();
    } catch (const json::exception&) {
      throw UsageError("option '" + key + "' has the wrong type");
    }
  }

  bool has(const std::string& key) {
    used_.insert(key);
    return j_.contains(key) && !j_[key].is_null();
  }

  const json& raw(const std::string& key) {
    used_.insert(key);
    return j_[key];
  }

  void finish() const {
    for (const auto& [key, value] : j_.items())
      if (!used_.count(key)) throw UsageError("unknown option '" + key + "'");
  }

 private:
  json j_;
  std::set<std::string> used_;
};

std::vector<std::size_t> size_list(Options& o, const std::string& key, std::vector<std::size_t> fallback) {
  if (!o.has(key)) return fallback;
  const json& v = o.raw(key);
  if (v.is_number_unsigned()) return {v.get<std::size_t>()};
  if (!v.is_array() || v.empty()) throw UsageError("option '" + key + "' must be a non-empty list of integers");
  std::vector<std::size_t> out;
  for (const auto& x : v) {
    if (!x.is_number_unsigned()) throw UsageError("option '" + key + "' must hold non-negative integers");
    out.push_back(x.get<std::size_t>());
  }
  return out;
}

std::string config_digest(const json& config) {
  const std::string s = config.dump();
  const auto crc = crc32(0L, reinterpret_cast<const Bytef*>(s.data()), static_cast<uInt>(s.size()));
  char buf[9];
  std::snprintf(buf, sizeof buf, "%08lx", static_cast<unsigned long>(crc));
  return buf;
}

class Report {
 public:
  explicit Report(std::string command) : command_(std::move(command)), t0_(std::chrono::steady_clock::now()) {}

  json config = json::object();
  json metrics = json::object();
  std::uint64_t seed = 0;

  std::string dump() const {
    const double wall = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0_).count();
    json r = {{"command", command_},        {"config", config}, {"config_digest", config_digest(config)},
              {"seed", seed},               {"metrics", metrics}, {"wall_seconds", wall}};
    return r.dump(2) + "\n";
  }

 private:
  std::string command_;
  std::chrono::steady_clock::time_point t0_;
};

tocom::EvalSplit parse_split(const std::string& s) {
  if (s == "auto") return tocom::EvalSplit::automatic;
  if (s == "pretrain") return tocom::EvalSplit::pretrain;
  if (s == "train") return tocom::EvalSplit::train;
  if (s == "val") return tocom::EvalSplit::val;
  if (s == "test") return tocom::EvalSplit::test;
  throw UsageError("unknown split '" + s + "'");
}

template <class F>
auto as_usage(F&& f) {
  try {
    return f();
  } catch (const tocom::ValidationError& e) {
    throw UsageError(e.what());
  }
}

tocom::TrainHyper read_hyper(Options& o, const json& defaults, json& echo) {
  tocom::TrainHyper h;
  h.epochs = o.get<std::size_t>("epochs", defaults.value("epochs", h.epochs));
  h.batch_size = o.get<std::size_t>("batch_size", h.batch_size);
  h.lr = o.get<double>("lr", defaults.value("lr", h.lr));
  h.weight_decay = o.get<double>("weight_decay", h.weight_decay);
  h.warmup_epochs = o.get<std::size_t>("warmup_epochs", h.warmup_epochs);
  h.seed = o.get<std::uint64_t>("seed", h.seed);
  h.rmax = o.get<std::size_t>("rmax", defaults.value("rmax", h.rmax));
  h.compression = as_usage([&] { return tocom::parse_compression(o.get<std::string>("compression", "merge")); });
  echo["epochs"] = h.epochs;
  echo["batch_size"] = h.batch_size;
  echo["lr"] = h.lr;
  echo["weight_decay"] = h.weight_decay;
  echo["warmup_epochs"] = h.warmup_epochs;
  echo["seed"] = h.seed;
  echo["rmax"] = h.rmax;
  echo["compression"] = tocom::to_string(h.compression);
  return h;
}

json model_json(const tocom::ModelCheckpoint& c) {
  json j = {{"config", tocom::config_to_json(c.config)},
            {"source_r", c.meta.source_r},
            {"rmax", c.meta.rmax},
            {"dataset", c.meta.dataset},
            {"seed", c.meta.seed},
            {"mode", tocom::to_string(c.meta.mode)},
            {"compression", tocom::to_string(c.meta.compression)},
            {"parameters", c.weights.parameter_count()},
            {"adapter", nullptr}};
  if (c.adapter) j["adapter"] = {{"bottleneck", c.adapter->bottleneck()}, {"scale", c.adapter->scale}};
  return j;
}

json plugin_json(const tocom_plugin& p) {
  const auto& s = p.set;
  return {{"rmax", s.rmax},     {"rank", s.rank},
          {"layers", s.layers}, {"dim", s.dim},
          {"scale", s.scale},   {"variant", tocom::to_string(s.variant)},
          {"groups", s.groups.size()}, {"parameters", s.parameter_count()},
          {"metadata", p.metadata}};
}

std::size_t threads() { return static_cast<std::size_t>(g_threads.load()); }

}  // namespace

extern "C" {

const char* tocom_version(void) { return "1.0.0"; }

const char* tocom_last_error(void) { return g_error.c_str(); }

void tocom_string_free(char* s) { std::free(s); }

tocom_status tocom_dataset_open(const char* descriptor, tocom_dataset** out) {
  return guarded([&] {
    require(descriptor, "descriptor");
    require(out, "out");
    *out = new tocom_dataset{tocom::open_dataset(descriptor)};
  });
}

tocom_status tocom_dataset_info(const tocom_dataset* ds, char** out) {
  return guarded([&] {
    require(ds, "dataset");
    require(out, "out");
    json splits = json::object();
    for (auto s : {tocom::Split::pretrain, tocom::Split::downstream_train, tocom::Split::downstream_val,
                   tocom::Split::downstream_test})
      splits[tocom::to_string(s)] = ds->ds.indices(s).size();
    json j = {{"kind", ds->ds.kind},       {"id", ds->ds.id},
              {"classes", ds->ds.classes}, {"channels", ds->ds.channels},
              {"image_size", ds->ds.image_size}, {"count", ds->ds.size()},
              {"splits", splits}};
    *out = dup_string(j.dump(2) + "\n");
  });
}

void tocom_dataset_free(tocom_dataset* ds) { delete ds; }

tocom_status tocom_model_load(const char* path, tocom_model** out) {
  return guarded([&] {
    require(path, "path");
    require(out, "out");
    *out = new tocom_model{tocom::load_checkpoint(path)};
  });
}

tocom_status tocom_model_save(const tocom_model* model, const char* path) {
  return guarded([&] {
    require(model, "model");
    require(path, "path");
    tocom::save_checkpoint(path, model->ckpt);
  });
}

tocom_status tocom_model_info(const tocom_model* model, char** out) {
  return guarded([&] {
    require(model, "model");
    require(out, "out");
    *out = dup_string(model_json(model->ckpt).dump(2) + "\n");
  });
}

void tocom_model_free(tocom_model* model) { delete model; }

tocom_status tocom_plugin_load(const char* path, tocom_plugin** out) {
  return guarded([&] {
    require(path, "path");
    require(out, "out");
    auto p = std::make_unique<tocom_plugin>();
    p->set = tocom::load_plugins(path, &p->metadata);
    *out = p.release();
  });
}

tocom_status tocom_plugin_save(const tocom_plugin* plugin, const char* path) {
  return guarded([&] {
    require(plugin, "plugin");
    require(path, "path");
    tocom::save_plugins(path, plugin->set, plugin->metadata);
  });
}

tocom_status tocom_plugin_info(const tocom_plugin* plugin, char** out) {
  return guarded([&] {
    require(plugin, "plugin");
    require(out, "out");
    *out = dup_string(plugin_json(*plugin).dump(2) + "\n");
  });
}

void tocom_plugin_free(tocom_plugin* plugin) { delete plugin; }

tocom_status tocom_pretrain(const tocom_dataset* ds, const char* options, tocom_model** out, char** report) {
  return guarded([&] {
    require(ds, "dataset");
    require(out, "out");
    Options o(options);
    Report rep("pretrain");
    tocom::ModelConfig cfg;
    if (o.has("config")) cfg = as_usage([&] { return tocom::config_from_json(o.raw("config"), cfg); });
    json echo = json::object();
    const auto hyper = read_hyper(o, json::object(), echo);
    o.finish();
    tocom::TrainLog log;
    auto ckpt = tocom::pretrain(cfg, ds->ds, hyper, &log);
    echo["config"] = tocom::config_to_json(ckpt.config);
    echo["dataset"] = ds->ds.id;
    rep.config = echo;
    rep.seed = hyper.seed;
    rep.metrics = {{"epoch_loss", log.epoch_loss},
                   {"epoch_accuracy", log.epoch_accuracy},
                   {"parameters", ckpt.weights.parameter_count()}};
    *out = new tocom_model{std::move(ckpt)};
    emit(report, rep.dump());
  });
}

tocom_status tocom_train_plugin(const tocom_model* backbone, const tocom_dataset* ds, const char* options,
                                tocom_plugin** out, char** report, char** log_csv) {
  return guarded([&] {
    require(backbone, "backbone");
    require(ds, "dataset");
    require(out, "out");
    Options o(options);
    Report rep("train-tocom");
    tocom::DistillConfig dc;
    dc.rmax = o.get<std::size_t>("rmax", backbone->ckpt.meta.rmax);
    dc.epochs = o.get<std::size_t>("epochs", dc.epochs);
    dc.batch_size = o.get<std::size_t>("batch_size", dc.batch_size);
    dc.lr = o.get<double>("lr", dc.lr);
    dc.weight_decay = o.get<double>("weight_decay", dc.weight_decay);
    dc.warmup_epochs = o.get<std::size_t>("warmup_epochs", dc.warmup_epochs);
    dc.seed = o.get<std::uint64_t>("seed", dc.seed);
    dc.loss = as_usage([&] { return tocom::parse_loss(o.get<std::string>("loss", "kl")); });
    dc.compression = as_usage([&] { return tocom::parse_compression(o.get<std::string>("compression", "merge")); });
    tocom::PluginSetConfig pc;
    pc.layers = backbone->ckpt.config.layers;
    pc.dim = backbone->ckpt.config.dim;
    pc.rmax = dc.rmax;
    pc.rank = o.get<std::size_t>("rank", pc.rank);
    pc.scale = o.get<double>("scale", pc.scale);
    pc.variant = as_usage([&] { return tocom::parse_variant(o.get<std::string>("variant", "default")); });
    pc.seed = dc.seed;
    o.finish();
    if (dc.loss == tocom::LossKind::cross_entropy && backbone->ckpt.config.head_mode != tocom::HeadMode::cls_logits)
      throw tocom::ValidationError("loss ce needs a classification head");
    const auto init = tocom::init_plugins(pc);
    auto result = tocom::train_tocom(ds->ds, backbone->ckpt, init, dc);

    json echo = {{"rmax", dc.rmax},
                 {"epochs", dc.epochs},
                 {"batch_size", dc.batch_size},
                 {"lr", dc.lr},
                 {"weight_decay", dc.weight_decay},
                 {"warmup_epochs", dc.warmup_epochs},
                 {"scale", pc.scale},
                 {"rank", pc.rank},
                 {"loss", tocom::to_string(dc.loss)},
                 {"variant", tocom::to_string(pc.variant)},
                 {"compression", tocom::to_string(dc.compression)},
                 {"seed", dc.seed},
                 {"dataset", ds->ds.id},
                 {"backbone", model_json(backbone->ckpt)}};
    rep.config = echo;
    rep.seed = dc.seed;
    rep.metrics = {{"epoch_loss", result.epoch_loss},
                   {"steps", result.log.size()},
                   {"first_loss", result.log.empty() ? 0.0 : result.log.front().loss},
                   {"parameters", result.set.parameter_count()}};
    auto p = std::make_unique<tocom_plugin>();
    p->set = std::move(result.set);
    p->metadata = {{"training", echo}, {"config_digest", config_digest(echo)}};
    if (log_csv) *log_csv = dup_string(tocom::training_log_csv(result.log));
    *out = p.release();
    emit(report, rep.dump());
  });
}

tocom_status tocom_finetune(const tocom_model* backbone, const tocom_dataset* ds, const char* options,
                            tocom_model** out, char** report) {
  return guarded([&] {
    require(backbone, "backbone");
    require(ds, "dataset");
    require(out, "out");
    Options o(options);
    Report rep("finetune");
    json echo = json::object();
    const auto source_r = o.get<std::size_t>("source_r", 0);
    const auto mode = as_usage([&] { return tocom::parse_tune_mode(o.get<std::string>("mode", "full")); });
    if (mode != tocom::TuneMode::full && mode != tocom::TuneMode::adaptformer)
      throw UsageError("mode must be full or adaptformer");
    auto hyper = read_hyper(o, {{"rmax", backbone->ckpt.meta.rmax}}, echo);
    hyper.adapter_bottleneck = o.get<std::size_t>("bottleneck", hyper.adapter_bottleneck);
    hyper.adapter_scale = o.get<double>("adapter_scale", hyper.adapter_scale);
    o.finish();
    echo["source_r"] = source_r;
    echo["mode"] = tocom::to_string(mode);
    if (mode == tocom::TuneMode::adaptformer) {
      echo["bottleneck"] = hyper.adapter_bottleneck;
      echo["adapter_scale"] = hyper.adapter_scale;
    }
    echo["dataset"] = ds->ds.id;
    echo["backbone"] = model_json(backbone->ckpt);
    tocom::TrainLog log;
    auto ckpt = tocom::finetune(backbone->ckpt, ds->ds, source_r, mode, hyper, &log);
    rep.config = echo;
    rep.seed = hyper.seed;
    rep.metrics = {{"epoch_loss", log.epoch_loss}, {"epoch_accuracy", log.epoch_accuracy}};
    *out = new tocom_model{std::move(ckpt)};
    emit(report, rep.dump());
  });
}

tocom_status tocom_evaluate(const tocom_model* model, const tocom_dataset* ds, const tocom_plugin* plugin,
                            const char* options, char** report) {
  return guarded([&] {
    require(model, "model");
    require(ds, "dataset");
    Options o(options);
    Report rep("eval");
    const auto& ck = model->ckpt;
    const auto target = o.get<std::size_t>("target_r", ck.meta.source_r);
    const bool search = o.get<bool>("scale_search", false);
    std::optional<double> scale;
    if (o.has("scale")) scale = o.get<double>("scale", 0.0);
    const auto split_name = o.get<std::string>("split", "auto");
    const auto split = parse_split(split_name);
    o.finish();
    if (search && !plugin) throw UsageError("scale_search needs a plugin");
    if (search && scale) throw UsageError("scale and scale_search are exclusive");

    json echo = {{"target_r", target},
                 {"source_r", ck.meta.source_r},
                 {"split", split_name},
                 {"dataset", ds->ds.id},
                 {"model", model_json(ck)},
                 {"plugin", plugin ? plugin_json(*plugin) : json(nullptr)}};
    json metrics = json::object();
    if (search && target != ck.meta.source_r) {
      const std::vector<std::size_t> targets{target};
      const auto choice = tocom::search_scale(ck, ds->ds, targets, plugin->set, tocom::kScaleCandidates, threads());
      scale = choice.scale;
      json table = json::array();
      for (const auto& [s, acc] : choice.validation) table.push_back({{"scale", s}, {"val_accuracy", acc}});
      metrics["scale_search"] = table;
    }
    tocom::PluginPatch patch;
    if (plugin) patch = {&plugin->set, scale};
    const auto res = tocom::evaluate(ck, ds->ds, target, patch, split, threads());
    const std::string variant = target == ck.meta.source_r ? "matched" : (plugin ? "tocom" : "baseline");
    echo["scale"] = plugin ? json(scale.value_or(plugin->set.scale)) : json(nullptr);
    echo["scale_search"] = search;
    rep.config = echo;
    rep.seed = ck.meta.seed;
    metrics["variant"] = variant;
    metrics["accuracy"] = res.accuracy;
    metrics["correct"] = res.correct;
    metrics["count"] = res.count;
    metrics["mean_tokens"] = res.mean_tokens;
    metrics["token_proxy"] = res.token_proxy;
    metrics["patched"] = res.patched;
    metrics["seconds"] = res.seconds;
    rep.metrics = metrics;
    emit(report, rep.dump());
  });
}

tocom_status tocom_eval_grid(const tocom_model* model, const tocom_dataset* ds, const tocom_plugin* plugin,
                             const char* options, char** report, char** csv) {
  return guarded([&] {
    require(model, "model");
    require(ds, "dataset");
    if (!plugin) throw UsageError("eval-grid needs a plugin");
    Options o(options);
    Report rep("eval-grid");
    const auto& ck = model->ckpt;
    std::vector<std::size_t> all(ck.meta.rmax + 1);
    for (std::size_t r = 0; r <= ck.meta.rmax; ++r) all[r] = r;
    const auto targets = size_list(o, "targets", all);
    std::vector<double> scales = tocom::kScaleCandidates;
    if (o.has("scales")) {
      scales = o.raw("scales").get<std::vector<double>>();
      if (scales.empty()) throw UsageError("option 'scales' must not be empty");
    }
    o.finish();
    tocom::ScaleChoice choice;
    const auto rows = tocom::eval_grid(ck, ds->ds, targets, plugin->set, scales, threads(), &choice);
    rep.config = {{"targets", targets},  {"scales", scales},          {"dataset", ds->ds.id},
                  {"model", model_json(ck)}, {"plugin", plugin_json(*plugin)}};
    rep.seed = ck.meta.seed;
    json table = json::array();
    for (const auto& r : rows)
      table.push_back({{"target_r", r.target_r},
                       {"variant", r.variant},
                       {"accuracy", r.accuracy},
                       {"scale", r.scale},
                       {"mean_tokens", r.mean_tokens},
                       {"count", r.count}});
    json search = json::array();
    for (const auto& [s, acc] : choice.validation) search.push_back({{"scale", s}, {"val_accuracy", acc}});
    rep.metrics = {{"rows", table}, {"scale", choice.scale}, {"scale_search", search}};
    if (csv) *csv = dup_string(tocom::grid_csv(rows));
    emit(report, rep.dump());
  });
}

tocom_status tocom_bench(const tocom_model* model, const char* options, char** report, char** csv) {
  return guarded([&] {
    require(model, "model");
    Options o(options);
    Report rep("bench");
    const auto rs = size_list(o, "r", {0, model->ckpt.meta.rmax});
    const auto batch = o.get<std::size_t>("batch", 32);
    const auto repeats = o.get<std::size_t>("repeats", 5);
    const auto seed = o.get<std::uint64_t>("seed", 0);
    o.finish();
    if (batch == 0 || repeats == 0) throw UsageError("batch and repeats must be positive");
    const auto rows = tocom::bench_throughput(model->ckpt, rs, batch, repeats, seed);
    rep.config = {{"r", rs}, {"batch", batch}, {"repeats", repeats}, {"model", model_json(model->ckpt)}};
    rep.seed = seed;
    json table = json::array();
    std::string text = "r,images_per_second,seconds_per_batch,token_proxy,mean_tokens\n";
    for (const auto& r : rows) {
      table.push_back({{"r", r.r},
                       {"images_per_second", r.images_per_second},
                       {"seconds_per_batch", r.seconds_per_batch},
                       {"token_proxy", r.token_proxy},
                       {"mean_tokens", r.mean_tokens}});
      char line[160];
      std::snprintf(line, sizeof line, "%zu,%.6g,%.6g,%zu,%.6g\n", r.r, r.images_per_second, r.seconds_per_batch,
                    r.token_proxy, r.mean_tokens);
      text += line;
    }
    rep.metrics = {{"rows", table}};
    if (rows.size() >= 2 && rows.front().images_per_second > 0)
      rep.metrics["speedup_last_vs_first"] = rows.back().images_per_second / rows.front().images_per_second;
    if (csv) *csv = dup_string(text);
    emit(report, rep.dump());
  });
}

tocom_status tocom_arith(const tocom_model* base, const tocom_model* plus, const tocom_model* minus,
                         tocom_model** out) {
  return guarded([&] {
    require(base, "base");
    require(plus, "plus");
    require(minus, "minus");
    require(out, "out");
    *out = new tocom_model{tocom::task_vector_arith(base->ckpt, plus->ckpt, minus->ckpt)};
  });
}

tocom_status tocom_selftest(const char* options, char** report) {
  bool all_passed = true;
  const tocom_status st = guarded([&] {
    Options o(options);
    Report rep("selftest");
    const auto seed = o.get<std::uint64_t>("seed", 0);
    o.finish();
    const auto suites = tocom::run_selftest(seed);
    json table = json::array();
    for (const auto& s : suites) {
      all_passed = all_passed && s.passed;
      table.push_back({{"suite", s.name}, {"passed", s.passed}, {"detail", s.detail}, {"seconds", s.seconds}});
    }
    rep.config = {{"seed", seed}};
    rep.seed = seed;
    rep.metrics = {{"suites", table}, {"passed", all_passed}};
    emit(report, rep.dump());
  });
  if (st != TOCOM_OK) return st;
  if (!all_passed) {
    g_error = "selftest: at least one suite failed";
    return TOCOM_ERR_VALIDATION;
  }
  return TOCOM_OK;
}

tocom_status tocom_set_threads(int n) {
  return guarded([&] {
    if (n < 1) throw UsageError("threads must be >= 1");
    g_threads = n;
  });
}

}  // extern "C"
