#include <algorithm>
#include <cstdlib>
#include <filesystem>
#include <string>

#include <unistd.h>

#include "doctest.h"
#include "json.hpp"
#include "tocom/tocom.h"

using nlohmann::json;
namespace fs = std::filesystem;

namespace {

json take(char* s) {
  REQUIRE(s != nullptr);
  json j = json::parse(s);
  tocom_string_free(s);
  return j;
}

std::string scratch(const std::string& name) {
  const fs::path dir = fs::temp_directory_path() / ("tocom_test_capi_" + std::to_string(::getpid()));
  fs::create_directories(dir);
  return (dir / name).string();
}

const char* kData = "synth:seed=2,classes=3,samples=120,size=8,window=4,noise=0.3";
const char* kDown = "synth:seed=3,classes=3,samples=120,size=8,window=4,noise=0.3,split=downstream,train=0.6,val=0.2";
const char* kModel = R"({"config":{"layers":2,"dim":16,"heads":2,"mlp_ratio":2,"image_size":8,"patch_size":2},
                        "epochs":1,"batch_size":32,"rmax":2,"seed":4})";

void check_report(const json& r, const std::string& command) {
  CHECK(r["command"] == command);
  CHECK(r["config"].is_object());
  CHECK(r["config_digest"].get<std::string>().size() == 8);
  CHECK(r["seed"].is_number_unsigned());
  CHECK(r["metrics"].is_object());
  CHECK(r["wall_seconds"].get<double>() >= 0.0);
}

}  // namespace

TEST_CASE("status codes and error text") {
  CHECK(std::string(tocom_version()) == "1.0.0");
  tocom_dataset* ds = nullptr;
  CHECK(tocom_dataset_open("synth:classes=1", &ds) == TOCOM_ERR_VALIDATION);
  CHECK(ds == nullptr);
  CHECK(std::string(tocom_last_error()).find("classes") != std::string::npos);
  CHECK(tocom_dataset_open(nullptr, &ds) == TOCOM_ERR_USAGE);
  CHECK(tocom_dataset_open("cifar10:/nonexistent/file.bin", &ds) == TOCOM_ERR_IO);

  tocom_model* m = nullptr;
  CHECK(tocom_model_load(scratch("absent.tckp").c_str(), &m) == TOCOM_ERR_IO);
  CHECK(tocom_set_threads(0) == TOCOM_ERR_USAGE);
  CHECK(tocom_set_threads(1) == TOCOM_OK);

  char* report = nullptr;
  CHECK(tocom_bench(nullptr, "{}", &report, nullptr) == TOCOM_ERR_USAGE);
}

TEST_CASE("end-to-end through the C interface") {
  tocom_dataset* ds = nullptr;
  REQUIRE(tocom_dataset_open(kData, &ds) == TOCOM_OK);
  const json info = take([&] {
    char* s = nullptr;
    CHECK(tocom_dataset_info(ds, &s) == TOCOM_OK);
    return s;
  }());
  CHECK(info["count"] == 120);
  CHECK(info["splits"]["pretrain"] == 120);

  tocom_model* model = nullptr;
  char* report = nullptr;
  CHECK(tocom_pretrain(ds, R"({"epochs":1,"bogus":3})", &model, &report) == TOCOM_ERR_USAGE);
  CHECK(std::string(tocom_last_error()).find("bogus") != std::string::npos);
  CHECK(tocom_pretrain(ds, R"({"epochs":"x"})", &model, &report) == TOCOM_ERR_USAGE);
  CHECK(tocom_pretrain(ds, "{not json", &model, &report) == TOCOM_ERR_USAGE);
  REQUIRE(tocom_pretrain(ds, kModel, &model, &report) == TOCOM_OK);
  const json pre = take(report);
  check_report(pre, "pretrain");
  CHECK(pre["seed"] == 4);
  CHECK(pre["config"]["epochs"] == 1);

  const std::string path = scratch("m.tckp");
  REQUIRE(tocom_model_save(model, path.c_str()) == TOCOM_OK);
  tocom_model* again = nullptr;
  REQUIRE(tocom_model_load(path.c_str(), &again) == TOCOM_OK);
  char* a = nullptr;
  char* b = nullptr;
  tocom_model_info(model, &a);
  tocom_model_info(again, &b);
  CHECK(take(a) == take(b));

  tocom_plugin* plugin = nullptr;
  char* log = nullptr;
  CHECK(tocom_train_plugin(model, ds, R"({"rmax":2,"epochs":1,"loss":"bad"})", &plugin, &report, nullptr) ==
        TOCOM_ERR_USAGE);
  REQUIRE(tocom_train_plugin(model, ds, R"({"rmax":2,"epochs":1,"batch_size":32,"lr":0.01,"seed":1})", &plugin,
                             &report, &log) == TOCOM_OK);
  const json tr = take(report);
  check_report(tr, "train-tocom");
  CHECK(tr["metrics"]["steps"] == 4);
  REQUIRE(log != nullptr);
  CHECK(std::string(log).rfind("step,epoch,m,n,loss,lr\n", 0) == 0);
  tocom_string_free(log);

  const std::string ppath = scratch("p.tcpl");
  REQUIRE(tocom_plugin_save(plugin, ppath.c_str()) == TOCOM_OK);
  tocom_plugin* loaded = nullptr;
  REQUIRE(tocom_plugin_load(ppath.c_str(), &loaded) == TOCOM_OK);
  CHECK(tocom_model_load(ppath.c_str(), &again) == TOCOM_ERR_IO);

  tocom_dataset* down = nullptr;
  REQUIRE(tocom_dataset_open(kDown, &down) == TOCOM_OK);
  tocom_model* tuned = nullptr;
  REQUIRE(tocom_finetune(model, down, R"({"source_r":1,"epochs":1,"mode":"adaptformer","rmax":2})", &tuned, &report) ==
          TOCOM_OK);
  check_report(take(report), "finetune");
  CHECK(tocom_finetune(model, down, R"({"source_r":1,"mode":"sideways"})", &tuned, &report) != TOCOM_OK);

  REQUIRE(tocom_evaluate(tuned, down, loaded, R"({"target_r":2})", &report) == TOCOM_OK);
  const json ev = take(report);
  check_report(ev, "eval");
  CHECK(ev["metrics"]["accuracy"].get<double>() >= 0.0);
  CHECK(ev["metrics"]["count"] == 24);

  char* csv = nullptr;
  REQUIRE(tocom_eval_grid(tuned, down, loaded, "{}", &report, &csv) == TOCOM_OK);
  check_report(take(report), "eval-grid");
  const std::string grid(csv);
  tocom_string_free(csv);
  CHECK(std::count(grid.begin(), grid.end(), '\n') == 1 + 2 * 3);
  CHECK(tocom_eval_grid(tuned, down, nullptr, "{}", &report, &csv) == TOCOM_ERR_USAGE);

  REQUIRE(tocom_bench(model, R"({"r":[0,2],"batch":4,"repeats":1})", &report, &csv) == TOCOM_OK);
  check_report(take(report), "bench");
  tocom_string_free(csv);

  tocom_model* sum = nullptr;
  REQUIRE(tocom_arith(model, again, again, &sum) == TOCOM_OK);
  tocom_model_info(sum, &a);
  CHECK(take(a)["mode"] == "arith");

  for (auto* p : {model, again, tuned, sum}) tocom_model_free(p);
  tocom_plugin_free(plugin);
  tocom_plugin_free(loaded);
  tocom_dataset_free(ds);
  tocom_dataset_free(down);
}

TEST_CASE("reports are reproducible") {
  tocom_dataset* ds = nullptr;
  REQUIRE(tocom_dataset_open(kData, &ds) == TOCOM_OK);
  json first, second;
  for (json* out : {&first, &second}) {
    tocom_model* m = nullptr;
    char* r = nullptr;
    REQUIRE(tocom_pretrain(ds, kModel, &m, &r) == TOCOM_OK);
    *out = take(r);
    out->erase("wall_seconds");
    tocom_model_free(m);
  }
  CHECK(first == second);
  tocom_dataset_free(ds);
}
