#include <algorithm>
#include <random>

#include "doctest.h"
#include "support.hpp"
#include "tocom/harness.hpp"

using namespace tocom;

namespace {

struct Fixture {
  Dataset pre;
  Dataset down;
  ModelCheckpoint backbone;
};

TrainHyper quick(std::size_t epochs) {
  TrainHyper h;
  h.epochs = epochs;
  h.batch_size = 32;
  h.lr = 3e-3;
  h.weight_decay = 0.01;
  h.seed = 2;
  h.adapter_bottleneck = 4;
  h.rmax = 3;
  return h;
}

const Fixture& fixture() {
  static const Fixture f = [] {
    Fixture out;
    out.pre = synth_dataset({.seed = 8, .classes = 4, .samples = 200, .image_size = 8, .window = 4, .noise = 0.3});
    out.down = synth_dataset({.seed = 9, .classes = 3, .samples = 300, .image_size = 8, .window = 4, .noise = 0.3});
    assign_downstream_splits(out.down, 0.6, 0.2);
    out.backbone = pretrain(testing::tiny_config(2, 16, 8, 2), out.pre, quick(4));
    return out;
  }();
  return f;
}

ToComSet trained_like(const ModelCheckpoint& ckpt, std::uint64_t seed) {
  ToComSet set = init_plugins({ckpt.config.layers, ckpt.config.dim, 3, 2, 0.1, PluginVariant::standard, seed});
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> d(0.0, 0.2);
  for (auto& g : set.groups)
    for (auto& p : g.pairs)
      for (auto& x : p.b.values()) x = static_cast<float>(d(rng));
  return set;
}

bool same_weights(const WeightSet<float>& a, const WeightSet<float>& b) {
  if (a.size() != b.size()) return false;
  for (const auto& [name, t] : a.entries())
    if (!b.contains(name) || !bit_identical(*t, b.at(name))) return false;
  return true;
}

}  // namespace

TEST_CASE("pretraining learns the synthetic classes") {
  const auto& f = fixture();
  const auto r = evaluate(f.backbone, f.pre, 0);
  CHECK(r.count == 200);
  CHECK(r.accuracy > 0.25 + 0.1);
  CHECK(f.backbone.meta.mode == TuneMode::pretrain);
}

TEST_CASE("fine-tuning modes") {
  const auto& f = fixture();
  const auto frozen = f.backbone.weights.cast<float>();

  SUBCASE("zero epochs keeps the body") {
    const auto out = finetune(f.backbone, f.down, 1, TuneMode::full, quick(0));
    CHECK(out.config.num_classes == 3);
    for (const auto& [name, t] : frozen.entries())
      if (!names::is_head(name)) CHECK(bit_identical(*t, out.weights.at(name)));
  }
  SUBCASE("adapter tuning leaves the backbone untouched") {
    const auto out = finetune(f.backbone, f.down, 2, TuneMode::adaptformer, quick(2));
    REQUIRE(out.adapter.has_value());
    CHECK(out.meta.source_r == 2);
    CHECK(out.meta.mode == TuneMode::adaptformer);
    for (const auto& [name, t] : frozen.entries())
      if (!names::is_head(name)) CHECK(bit_identical(*t, out.weights.at(name)));
    CHECK(same_weights(frozen, f.backbone.weights));
  }
  SUBCASE("full tuning beats chance") {
    TrainLog log;
    const auto out = finetune(f.backbone, f.down, 1, TuneMode::full, quick(8), &log);
    CHECK(log.epoch_loss.size() == 8);
    CHECK(evaluate(out, f.down, 1).accuracy > 1.0 / 3.0 + 0.1);
    CHECK_FALSE(same_weights(frozen, out.weights));
  }
  SUBCASE("source degree above rmax is rejected") {
    CHECK_THROWS_AS(finetune(f.backbone, f.down, 4, TuneMode::full, quick(1)), ValidationError);
  }
}

TEST_CASE("evaluation with and without plugins") {
  const auto& f = fixture();
  const auto model = finetune(f.backbone, f.down, 1, TuneMode::full, quick(2));
  const auto set = trained_like(model, 3);

  const auto matched = evaluate(model, f.down, 1);
  CHECK(matched.count == f.down.indices(Split::downstream_test).size());
  CHECK_FALSE(matched.patched);
  const auto same_degree = evaluate(model, f.down, 1, {&set, std::nullopt});
  CHECK(same_degree.predictions == matched.predictions);
  CHECK_FALSE(same_degree.patched);

  const auto inert = init_plugins({2, 16, 3, 2, 0.1, PluginVariant::standard, 0});
  CHECK(evaluate(model, f.down, 3, {&inert, std::nullopt}).predictions == evaluate(model, f.down, 3).predictions);
  CHECK(evaluate(model, f.down, 3, {&set, 0.0}).predictions == evaluate(model, f.down, 3).predictions);
  CHECK(evaluate(model, f.down, 3, {&set, std::nullopt}).patched);

  const auto a = evaluate(model, f.down, 2, {&set, std::nullopt}, EvalSplit::val, 1);
  const auto b = evaluate(model, f.down, 2, {&set, std::nullopt}, EvalSplit::val, 3);
  CHECK(a.predictions == b.predictions);
  CHECK(a.count == f.down.indices(Split::downstream_val).size());

  const auto tokens0 = evaluate(model, f.down, 0);
  const auto tokens3 = evaluate(model, f.down, 3);
  CHECK(tokens0.token_proxy == 2 * 17);
  CHECK(tokens3.token_proxy == 17 + 14);
  CHECK(tokens3.mean_tokens < tokens0.mean_tokens);
}

TEST_CASE("evaluation grid") {
  const auto& f = fixture();
  const auto model = finetune(f.backbone, f.down, 1, TuneMode::full, quick(1));
  const auto set = trained_like(model, 4);
  const std::vector<std::size_t> targets = {0, 1, 2, 3};
  ScaleChoice choice;
  const auto rows = eval_grid(model, f.down, targets, set, kScaleCandidates, 1, &choice);
  CHECK(rows.size() == 2 * targets.size());
  CHECK(choice.validation.size() == kScaleCandidates.size());
  CHECK(std::find(kScaleCandidates.begin(), kScaleCandidates.end(), choice.scale) != kScaleCandidates.end());
  for (std::size_t i = 0; i < rows.size(); i += 2) {
    CHECK(rows[i].variant == "baseline");
    CHECK(rows[i + 1].variant == "tocom");
    CHECK(rows[i].target_r == rows[i + 1].target_r);
    if (rows[i].target_r == 1) CHECK(rows[i].accuracy == rows[i + 1].accuracy);
  }
  const std::vector<std::size_t> only_source = {1};
  const auto same = eval_grid(model, f.down, only_source, set, kScaleCandidates);
  REQUIRE(same.size() == 2);
  CHECK(same[0].accuracy == same[1].accuracy);

  const auto csv = grid_csv(rows);
  CHECK(std::count(csv.begin(), csv.end(), '\n') == static_cast<long>(rows.size() + 1));
}

TEST_CASE("task-vector arithmetic") {
  std::mt19937_64 rng(5);
  ModelCheckpoint base, plus, minus;
  for (auto* c : {&base, &plus, &minus}) {
    c->config = testing::tiny_config();
    c->weights = testing::spread_weights<float>(c->config, rng);
  }
  const auto cancel = task_vector_arith(base, plus, plus);
  CHECK(same_weights(cancel.weights, base.weights));
  CHECK(cancel.meta.mode == TuneMode::arith);

  const auto x = task_vector_arith(base, plus, minus);
  const auto y = task_vector_arith(plus, base, minus);
  for (const auto& [name, t] : x.weights.entries())
    for (std::size_t i = 0; i < t->numel(); ++i) {
      const double want = double(base.weights.at(name)[i]) + double(plus.weights.at(name)[i]) -
                          double(minus.weights.at(name)[i]);
      CHECK((*t)[i] == static_cast<float>(want));
      CHECK((*t)[i] == y.weights.at(name)[i]);
    }

  ModelCheckpoint other = plus;
  other.config.num_classes = 7;
  other.weights = testing::spread_weights<float>(other.config, rng);
  const auto mixed = task_vector_arith(base, other, minus);
  CHECK(bit_identical(mixed.weights.at(names::kHeadW), base.weights.at(names::kHeadW)));

  ModelCheckpoint wide = plus;
  wide.config.dim = 32;
  CHECK_THROWS_AS(task_vector_arith(base, wide, minus), ValidationError);
}

TEST_CASE("throughput bench") {
  const auto& f = fixture();
  const std::vector<std::size_t> rs = {0, 1, 3};
  const auto rows = bench_throughput(f.backbone, rs, 8, 2);
  REQUIRE(rows.size() == 3);
  CHECK(rows[0].token_proxy == 2 * 17);
  CHECK(rows[0].token_proxy >= rows[1].token_proxy);
  CHECK(rows[1].token_proxy >= rows[2].token_proxy);
  for (const auto& r : rows) {
    CHECK(r.images_per_second > 0.0);
    CHECK(r.seconds_per_batch > 0.0);
  }
}
