#include <cmath>
#include <filesystem>
#include <fstream>
#include <random>
#include <set>

#include <unistd.h>

#include "doctest.h"
#include "support.hpp"
#include "tocom/artifact.hpp"
#include "tocom/checkpoint.hpp"
#include "tocom/dataset.hpp"

using namespace tocom;
namespace fs = std::filesystem;

namespace {

fs::path scratch(const std::string& name) {
  const fs::path dir = fs::temp_directory_path() / ("tocom_test_data_io_" + std::to_string(::getpid()));
  fs::create_directories(dir);
  return dir / name;
}

void write_bytes(const fs::path& p, const std::vector<std::uint8_t>& bytes) {
  std::ofstream out(p, std::ios::binary);
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
}

ModelCheckpoint random_checkpoint(std::uint64_t seed, bool adapter) {
  std::mt19937_64 rng(seed);
  ModelCheckpoint c;
  c.config = testing::tiny_config();
  c.weights = testing::spread_weights<float>(c.config, rng);
  if (adapter) c.adapter = init_adapter(c.config, 4, 0.1, seed);
  c.meta.source_r = 2;
  c.meta.rmax = 3;
  c.meta.dataset = "synth:seed=1";
  c.meta.seed = seed;
  c.meta.mode = adapter ? TuneMode::adaptformer : TuneMode::full;
  return c;
}

}  // namespace

TEST_CASE("synthetic corpus") {
  const SynthOptions opts{.seed = 4, .classes = 3, .samples = 90, .image_size = 16, .window = 8, .noise = 0.5};
  const Dataset a = synth_dataset(opts);
  const Dataset b = synth_dataset(opts);
  CHECK(bit_identical(a.images, b.images));
  CHECK(a.labels == b.labels);
  CHECK(a.images.all_finite());
  for (int l : a.labels) CHECK((l >= 0 && l < 3));
  a.validate();

  const Dataset c = synth_dataset({.seed = 5, .classes = 3, .samples = 90, .image_size = 16, .window = 8});
  CHECK_FALSE(bit_identical(a.images, c.images));

  const Dataset tiny = synth_dataset({.seed = 1, .classes = 2, .samples = 10, .image_size = 8, .window = 4});
  CHECK(std::count(tiny.labels.begin(), tiny.labels.end(), 0) == 5);
  CHECK(std::count(tiny.labels.begin(), tiny.labels.end(), 1) == 5);
  CHECK_THROWS_AS(synth_dataset({.classes = 1}), ValidationError);
}

TEST_CASE("downstream splits are disjoint and complete") {
  Dataset d = synth_dataset({.seed = 2, .classes = 4, .samples = 200, .image_size = 8, .window = 4});
  assign_downstream_splits(d, 0.5, 0.2);
  const auto tr = d.indices(Split::downstream_train);
  const auto va = d.indices(Split::downstream_val);
  const auto te = d.indices(Split::downstream_test);
  CHECK(tr.size() == 100);
  CHECK(va.size() == 40);
  CHECK(te.size() == 60);
  std::set<std::size_t> all(tr.begin(), tr.end());
  all.insert(va.begin(), va.end());
  all.insert(te.begin(), te.end());
  CHECK(all.size() == 200);
  CHECK(d.indices(Split::pretrain).empty());
  CHECK_THROWS_AS(assign_downstream_splits(d, 0.6, 0.4), ValidationError);
}

TEST_CASE("dataset descriptors") {
  const Dataset d = open_dataset("synth:seed=3,classes=5,samples=50,size=8,window=4,noise=0.2");
  CHECK(d.classes == 5);
  CHECK(d.size() == 50);
  CHECK(d.image_size == 8);
  const Dataset s = open_dataset("synth:seed=3,classes=5,samples=50,size=8,window=4,split=downstream,train=0.6,val=0.2");
  CHECK(s.indices(Split::downstream_train).size() == 30);
  CHECK_THROWS_AS(open_dataset("synth:seed=x"), ValidationError);
  CHECK_THROWS_AS(open_dataset("synth:colour=3"), ValidationError);
  CHECK_THROWS_AS(open_dataset("imagenet:/x"), ValidationError);
}

TEST_CASE("CIFAR binary records") {
  std::vector<std::uint8_t> bytes;
  for (int i = 0; i < 10; ++i) {
    bytes.push_back(static_cast<std::uint8_t>(i));
    for (int p = 0; p < 3072; ++p) bytes.push_back(p < 1024 ? 0 : 255);
  }
  REQUIRE(bytes.size() == 30730);
  const auto path = scratch("ten.bin");
  write_bytes(path, bytes);
  const Dataset d = load_cifar_binary(path.string());
  CHECK(d.size() == 10);
  CHECK(d.classes == 10);
  CHECK(d.labels[7] == 7);
  CHECK(d.images(0, 0) == doctest::Approx(-kCifarMean[0] / kCifarStd[0]));
  CHECK(d.images(0, 1024) == doctest::Approx((1.0f - kCifarMean[1]) / kCifarStd[1]));
  CHECK(open_dataset("cifar10:" + path.string()).size() == 10);

  const auto empty = scratch("empty.bin");
  write_bytes(empty, {});
  try {
    load_cifar_binary(empty.string());
    FAIL("empty file accepted");
  } catch (const FormatError& e) {
    CHECK(std::string(e.what()).find("truncated") != std::string::npos);
  }
  bytes.pop_back();
  write_bytes(path, bytes);
  CHECK_THROWS_AS(load_cifar_binary(path.string()), FormatError);
  CHECK_THROWS_AS(load_cifar_binary(scratch("missing.bin").string()), IoError);

  std::vector<std::uint8_t> coarse_fine;
  for (int i = 0; i < 3; ++i) {
    coarse_fine.push_back(1);
    coarse_fine.push_back(static_cast<std::uint8_t>(40 + i));
    coarse_fine.insert(coarse_fine.end(), 3072, 128);
  }
  const auto c100 = scratch("c100.bin");
  write_bytes(c100, coarse_fine);
  const Dataset e = load_cifar_binary(c100.string(), true);
  CHECK(e.classes == 100);
  CHECK(e.labels == std::vector<int>{40, 41, 42});
}

TEST_CASE("checkpoint round trip") {
  for (bool adapter : {false, true}) {
    const auto ckpt = random_checkpoint(3, adapter);
    const auto path = scratch("model.tckp");
    save_checkpoint(path.string(), ckpt);
    const auto back = load_checkpoint(path.string());
    CHECK(back.config == ckpt.config);
    CHECK(back.meta.source_r == 2);
    CHECK(back.meta.dataset == ckpt.meta.dataset);
    CHECK(back.meta.mode == ckpt.meta.mode);
    CHECK(back.weights.size() == ckpt.weights.size());
    for (const auto& [name, t] : ckpt.weights.entries()) CHECK(bit_identical(*t, back.weights.at(name)));
    CHECK(back.adapter.has_value() == adapter);
    if (adapter) CHECK(bit_identical(back.adapter->up[1], ckpt.adapter->up[1]));
    CHECK(encode_checkpoint(back) == encode_checkpoint(ckpt));
  }
}

TEST_CASE("corrupted artifacts are rejected") {
  const auto bytes = encode_checkpoint(random_checkpoint(4, false));
  auto corrupt = [&](auto edit) {
    auto b = bytes;
    edit(b);
    return b;
  };
  CHECK_THROWS_AS(decode_checkpoint(corrupt([](auto& b) { b[0] = 'X'; })), FormatError);
  CHECK_THROWS_AS(decode_checkpoint(corrupt([](auto& b) { b[b.size() - 9] ^= 0x40; })), FormatError);
  CHECK_THROWS_AS(decode_checkpoint(corrupt([](auto& b) { b.back() ^= 1; })), FormatError);
  CHECK_THROWS_AS(decode_checkpoint(corrupt([](auto& b) { b.resize(b.size() / 2); })), FormatError);
  CHECK_THROWS_AS(decode_checkpoint(corrupt([](auto& b) { b.push_back(0); })), FormatError);
  CHECK_THROWS_AS(decode_checkpoint(corrupt([](auto& b) { b[4] = 9; })), FormatError);
  CHECK_THROWS_AS(decode_checkpoint(std::vector<std::uint8_t>{}), FormatError);
  CHECK_THROWS_AS(load_checkpoint(scratch("nothing.tckp").string()), IoError);
}

TEST_CASE("plugin files") {
  ToComSet set = init_plugins({2, 16, 3, 2, 0.05, PluginVariant::standard, 6});
  for (auto& g : set.groups)
    for (auto& p : g.pairs) p.b.values()[0] = 0.25f;
  const auto path = scratch("set.tcpl");
  save_plugins(path.string(), set, {{"note", "x"}});

  nlohmann::json meta;
  const ToComSet back = load_plugins(path.string(), &meta);
  CHECK(meta["note"] == "x");
  CHECK(back.rmax == 3);
  CHECK(back.scale == 0.05);
  CHECK(back.variant == PluginVariant::standard);
  for (std::size_t g = 0; g < 3; ++g)
    for (std::size_t p = 0; p < 4; ++p) {
      CHECK(bit_identical(back.groups[g].pairs[p].a, set.groups[g].pairs[p].a));
      CHECK(bit_identical(back.groups[g].pairs[p].b, set.groups[g].pairs[p].b));
    }

  const Artifact a = read_artifact(path.string(), kPluginMagic);
  CHECK(a.tensors.size() == 3 * 2 * 4);
  std::set<std::string> names;
  for (const auto& t : a.tensors) names.insert(t.name);
  CHECK(names.count(plugin_tensor_name(2, 1, LoraTarget::v, false)) == 1);
  CHECK(names.count("group0.layer0.q.A") == 1);

  CHECK_THROWS_AS(decode_checkpoint(encode_plugins(set)), FormatError);
  CHECK_THROWS_AS(decode_plugins(encode_checkpoint(random_checkpoint(1, false))), FormatError);
}
