#include <cstdio>
#include <fstream>
#include <iostream>
#include <memory>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "json.hpp"
#include "tocom/tocom.h"

using nlohmann::json;

namespace {

struct Failure {
  int code;
  std::string message;
};

int exit_code(tocom_status st) {
  switch (st) {
    case TOCOM_OK:
      return 0;
    case TOCOM_ERR_USAGE:
      return 1;
    case TOCOM_ERR_IO:
      return 3;
    default:
      return 2;
  }
}

void check(tocom_status st) {
  if (st != TOCOM_OK) throw Failure{exit_code(st), tocom_last_error()};
}

struct CString {
  char* p = nullptr;
  ~CString() { tocom_string_free(p); }
  std::string str() const { return p ? p : ""; }
};

struct DatasetDeleter {
  void operator()(tocom_dataset* d) const { tocom_dataset_free(d); }
};
struct ModelDeleter {
  void operator()(tocom_model* m) const { tocom_model_free(m); }
};
struct PluginDeleter {
  void operator()(tocom_plugin* p) const { tocom_plugin_free(p); }
};
using DatasetPtr = std::unique_ptr<tocom_dataset, DatasetDeleter>;
using ModelPtr = std::unique_ptr<tocom_model, ModelDeleter>;
using PluginPtr = std::unique_ptr<tocom_plugin, PluginDeleter>;

DatasetPtr open_data(const std::string& d) {
  tocom_dataset* p = nullptr;
  check(tocom_dataset_open(d.c_str(), &p));
  return DatasetPtr(p);
}

ModelPtr load_model(const std::string& path) {
  tocom_model* p = nullptr;
  check(tocom_model_load(path.c_str(), &p));
  return ModelPtr(p);
}

PluginPtr load_plugin(const std::string& path) {
  tocom_plugin* p = nullptr;
  check(tocom_plugin_load(path.c_str(), &p));
  return PluginPtr(p);
}

void write_text(const std::string& path, const std::string& text) {
  std::ofstream f(path, std::ios::binary);
  if (!f) throw Failure{3, "cannot open " + path + " for writing"};
  f << text;
  if (!f.flush()) throw Failure{3, "write failed: " + path};
}

// Report goes to the file when one is given, else to stdout.
void publish(const std::string& report, const std::string& path) {
  if (path.empty())
    std::cout << report;
  else
    write_text(path, report);
}

// Accepts "a..b" (inclusive) or a comma list.
std::vector<std::size_t> parse_range(const std::string& text) {
  std::vector<std::size_t> out;
  try {
    if (const auto dots = text.find(".."); dots != std::string::npos) {
      const std::size_t lo = std::stoul(text.substr(0, dots)), hi = std::stoul(text.substr(dots + 2));
      if (lo > hi) throw Failure{1, "empty range '" + text + "'"};
      for (std::size_t r = lo; r <= hi; ++r) out.push_back(r);
      return out;
    }
    std::stringstream ss(text);
    for (std::string item; std::getline(ss, item, ',');) out.push_back(std::stoul(item));
  } catch (const std::logic_error&) {
    throw Failure{1, "bad range '" + text + "'"};
  }
  if (out.empty()) throw Failure{1, "bad range '" + text + "'"};
  return out;
}

// Options for one subcommand: values from --config first, flags on top.
// Keys the subcommand does not understand are dropped from the file, so an
// artifact metadata document can serve as a config.
class OptionSet {
 public:
  OptionSet(const json& file, std::initializer_list<const char*> keys) {
    for (const char* k : keys)
      if (file.contains(k)) j_[k] = file[k];
  }
  template <class T>
  void set(const char* key, const std::optional<T>& v) {
    if (v) j_[key] = *v;
  }
  void set(const char* key, const json& v) { j_[key] = v; }
  std::string str() const { return j_.dump(); }

 private:
  json j_ = json::object();
};

json load_config(const std::string& path) {
  if (path.empty()) return json::object();
  std::ifstream f(path);
  if (!f) throw Failure{3, "cannot read config " + path};
  json j;
  try {
    f >> j;
  } catch (const json::parse_error& e) {
    throw Failure{1, "config " + path + ": " + e.what()};
  }
  if (!j.is_object()) throw Failure{1, "config " + path + " must hold a JSON object"};
  return j;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Token compensator experiments"};
  app.require_subcommand(1);
  app.fallthrough();
  int threads = 1;
  std::string config_path;
  app.add_option("--threads", threads, "Evaluation worker threads")->check(CLI::PositiveNumber);
  app.add_option("--config", config_path, "JSON options file; flags override its values");

  std::optional<std::uint64_t> seed;
  auto add_seed = [&](CLI::App* sub) { sub->add_option("--seed", seed, "Seed")->envname("TOCOM_SEED"); };

  std::string data, out, json_out, csv_out, model_path, plugin_path, backbone, log_out;
  std::optional<std::size_t> epochs, batch, rmax, rank, source_r, target_r, bottleneck, warmup, repeats;
  std::optional<double> lr, wd, scale;
  std::optional<std::string> loss, variant, mode, split, compression;
  std::string targets_text, r_text;
  bool scale_search = false;
  std::string base_path, plus_path, minus_path;

  auto* pre = app.add_subcommand("pretrain", "Train a backbone on the pretrain split");
  pre->add_option("--data", data, "Dataset descriptor")->required();
  pre->add_option("--out", out, "Checkpoint path")->required();
  pre->add_option("--epochs", epochs);
  pre->add_option("--batch-size", batch);
  pre->add_option("--lr", lr);
  pre->add_option("--weight-decay", wd);
  pre->add_option("--warmup-epochs", warmup);
  pre->add_option("--rmax", rmax);
  pre->add_option("--json", json_out, "Report path");
  add_seed(pre);

  auto* tt = app.add_subcommand("train-tocom", "Distill a plugin set from a frozen backbone");
  tt->add_option("--backbone", backbone)->required();
  tt->add_option("--data", data)->required();
  tt->add_option("--out", out, "Plugin path")->required();
  tt->add_option("--rmax", rmax);
  tt->add_option("--epochs", epochs);
  tt->add_option("--batch-size", batch);
  tt->add_option("--lr", lr);
  tt->add_option("--weight-decay", wd);
  tt->add_option("--scale", scale);
  tt->add_option("--rank", rank);
  tt->add_option("--loss", loss)->check(CLI::IsMember({"kl", "l1", "ce"}));
  tt->add_option("--variant", variant)->check(CLI::IsMember({"default", "shared", "noinv"}));
  tt->add_option("--compression", compression)->check(CLI::IsMember({"merge", "prune"}));
  tt->add_option("--log", log_out, "Per-step CSV log");
  tt->add_option("--json", json_out, "Report path");
  add_seed(tt);

  auto* ft = app.add_subcommand("finetune", "Tune a backbone on the downstream split");
  ft->add_option("--backbone", backbone)->required();
  ft->add_option("--data", data)->required();
  ft->add_option("--out", out)->required();
  ft->add_option("--source-r", source_r);
  ft->add_option("--mode", mode)->check(CLI::IsMember({"full", "adaptformer"}));
  ft->add_option("--epochs", epochs);
  ft->add_option("--batch-size", batch);
  ft->add_option("--lr", lr);
  ft->add_option("--weight-decay", wd);
  ft->add_option("--bottleneck", bottleneck);
  ft->add_option("--rmax", rmax);
  ft->add_option("--compression", compression)->check(CLI::IsMember({"merge", "prune"}));
  ft->add_option("--json", json_out, "Report path");
  add_seed(ft);

  auto* ev = app.add_subcommand("eval", "Accuracy at one compression degree");
  ev->add_option("--model", model_path)->required();
  ev->add_option("--data", data)->required();
  ev->add_option("--target-r", target_r);
  ev->add_option("--tocom", plugin_path, "Plugin set");
  ev->add_option("--scale", scale);
  ev->add_flag("--scale-search", scale_search, "Pick the scale on the validation split");
  ev->add_option("--split", split)->check(CLI::IsMember({"auto", "pretrain", "train", "val", "test"}));
  ev->add_option("--json", json_out, "Report path");

  auto* eg = app.add_subcommand("eval-grid", "Baseline and compensated accuracy over target degrees");
  eg->add_option("--model", model_path)->required();
  eg->add_option("--data", data)->required();
  eg->add_option("--tocom", plugin_path)->required();
  eg->add_option("--targets", targets_text, "Range a..b or list");
  eg->add_option("--csv", csv_out);
  eg->add_option("--json", json_out, "Report path");

  auto* be = app.add_subcommand("bench", "Throughput per compression degree");
  be->add_option("--model", model_path)->required();
  be->add_option("--r", r_text, "Degrees: range a..b or list");
  be->add_option("--batch", batch);
  be->add_option("--repeats", repeats);
  be->add_option("--csv", csv_out);
  be->add_option("--json", json_out, "Report path");
  add_seed(be);

  auto* ar = app.add_subcommand("arith", "base + plus - minus");
  ar->add_option("--base", base_path)->required();
  ar->add_option("--plus", plus_path)->required();
  ar->add_option("--minus", minus_path)->required();
  ar->add_option("--out", out)->required();

  auto* st = app.add_subcommand("selftest", "Invariant suites");
  st->add_option("--json", json_out, "Report path");
  add_seed(st);

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e);
    return rc == 0 ? 0 : 1;
  }

  try {
    check(tocom_set_threads(threads));
    const json file = load_config(config_path);

    if (pre->parsed()) {
      OptionSet o(file, {"config", "epochs", "batch_size", "lr", "weight_decay", "warmup_epochs", "seed", "rmax",
                         "compression"});
      o.set("epochs", epochs);
      o.set("batch_size", batch);
      o.set("lr", lr);
      o.set("weight_decay", wd);
      o.set("warmup_epochs", warmup);
      o.set("rmax", rmax);
      o.set("seed", seed);
      auto ds = open_data(data);
      tocom_model* m = nullptr;
      CString report;
      check(tocom_pretrain(ds.get(), o.str().c_str(), &m, &report.p));
      ModelPtr model(m);
      check(tocom_model_save(model.get(), out.c_str()));
      publish(report.str(), json_out);
    } else if (tt->parsed()) {
      OptionSet o(file, {"rmax", "epochs", "batch_size", "lr", "weight_decay", "warmup_epochs", "scale", "rank", "loss",
                         "variant", "seed", "compression"});
      o.set("rmax", rmax);
      o.set("epochs", epochs);
      o.set("batch_size", batch);
      o.set("lr", lr);
      o.set("weight_decay", wd);
      o.set("scale", scale);
      o.set("rank", rank);
      o.set("loss", loss);
      o.set("variant", variant);
      o.set("compression", compression);
      o.set("seed", seed);
      auto bb = load_model(backbone);
      auto ds = open_data(data);
      tocom_plugin* p = nullptr;
      CString report, log;
      check(tocom_train_plugin(bb.get(), ds.get(), o.str().c_str(), &p, &report.p, log_out.empty() ? nullptr : &log.p));
      PluginPtr plugin(p);
      check(tocom_plugin_save(plugin.get(), out.c_str()));
      if (!log_out.empty()) write_text(log_out, log.str());
      publish(report.str(), json_out);
    } else if (ft->parsed()) {
      OptionSet o(file, {"source_r", "mode", "epochs", "batch_size", "lr", "weight_decay", "warmup_epochs", "seed",
                         "rmax", "bottleneck", "adapter_scale", "compression"});
      o.set("source_r", source_r);
      o.set("mode", mode);
      o.set("epochs", epochs);
      o.set("batch_size", batch);
      o.set("lr", lr);
      o.set("weight_decay", wd);
      o.set("bottleneck", bottleneck);
      o.set("rmax", rmax);
      o.set("compression", compression);
      o.set("seed", seed);
      auto bb = load_model(backbone);
      auto ds = open_data(data);
      tocom_model* m = nullptr;
      CString report;
      check(tocom_finetune(bb.get(), ds.get(), o.str().c_str(), &m, &report.p));
      ModelPtr model(m);
      check(tocom_model_save(model.get(), out.c_str()));
      publish(report.str(), json_out);
    } else if (ev->parsed()) {
      OptionSet o(file, {"target_r", "scale", "scale_search", "split"});
      o.set("target_r", target_r);
      o.set("scale", scale);
      if (scale_search) o.set("scale_search", json(true));
      o.set("split", split);
      auto model = load_model(model_path);
      auto ds = open_data(data);
      PluginPtr plugin;
      if (!plugin_path.empty()) plugin = load_plugin(plugin_path);
      CString report;
      check(tocom_evaluate(model.get(), ds.get(), plugin.get(), o.str().c_str(), &report.p));
      publish(report.str(), json_out);
    } else if (eg->parsed()) {
      OptionSet o(file, {"targets", "scales"});
      if (!targets_text.empty()) o.set("targets", json(parse_range(targets_text)));
      auto model = load_model(model_path);
      auto ds = open_data(data);
      auto plugin = load_plugin(plugin_path);
      CString report, csv;
      check(tocom_eval_grid(model.get(), ds.get(), plugin.get(), o.str().c_str(), &report.p, &csv.p));
      if (!csv_out.empty()) write_text(csv_out, csv.str());
      publish(report.str(), json_out);
    } else if (be->parsed()) {
      OptionSet o(file, {"r", "batch", "repeats", "seed"});
      if (!r_text.empty()) o.set("r", json(parse_range(r_text)));
      o.set("batch", batch);
      o.set("repeats", repeats);
      o.set("seed", seed);
      auto model = load_model(model_path);
      CString report, csv;
      check(tocom_bench(model.get(), o.str().c_str(), &report.p, &csv.p));
      if (!csv_out.empty()) write_text(csv_out, csv.str());
      publish(report.str(), json_out);
    } else if (ar->parsed()) {
      auto base = load_model(base_path);
      auto plus = load_model(plus_path);
      auto minus = load_model(minus_path);
      tocom_model* m = nullptr;
      check(tocom_arith(base.get(), plus.get(), minus.get(), &m));
      ModelPtr model(m);
      check(tocom_model_save(model.get(), out.c_str()));
      CString info;
      check(tocom_model_info(model.get(), &info.p));
      std::cout << info.str();
    } else if (st->parsed()) {
      OptionSet o(file, {"seed"});
      o.set("seed", seed);
      CString report;
      const tocom_status status = tocom_selftest(o.str().c_str(), &report.p);
      if (report.p) publish(report.str(), json_out);
      check(status);
    }
  } catch (const Failure& f) {
    std::cerr << "error: " << f.message << "\n";
    return f.code;
  }
  return 0;
}
