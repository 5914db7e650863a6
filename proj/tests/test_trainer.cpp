#include <algorithm>
#include <cmath>
#include <map>
#include <random>

#include "doctest.h"
#include "support.hpp"
#include "tocom/harness.hpp"
#include "tocom/trainer.hpp"

using namespace tocom;

namespace {

struct Fixture {
  Dataset data;
  ModelCheckpoint backbone;
};

const Fixture& fixture() {
  static const Fixture f = [] {
    Fixture out;
    out.data = synth_dataset({.seed = 3, .classes = 4, .samples = 160, .image_size = 8, .window = 4, .noise = 0.3});
    TrainHyper h;
    h.epochs = 3;
    h.batch_size = 32;
    h.lr = 3e-3;
    h.seed = 1;
    out.backbone = pretrain(testing::tiny_config(2, 16, 8, 2), out.data, h);
    return out;
  }();
  return f;
}

DistillConfig small_distill(std::size_t epochs) {
  DistillConfig dc;
  dc.epochs = epochs;
  dc.batch_size = 32;
  dc.lr = 1e-2;
  dc.weight_decay = 0.01;
  dc.rmax = 3;
  dc.seed = 5;
  return dc;
}

ToComSet fresh(const ModelCheckpoint& ckpt, std::size_t rmax = 3, std::uint64_t seed = 2) {
  return init_plugins({ckpt.config.layers, ckpt.config.dim, rmax, 2, 0.1, PluginVariant::standard, seed});
}

bool same_set(const ToComSet& x, const ToComSet& y) {
  for (std::size_t g = 0; g < x.groups.size(); ++g)
    for (std::size_t p = 0; p < x.groups[g].pairs.size(); ++p)
      if (!bit_identical(x.groups[g].pairs[p].a, y.groups[g].pairs[p].a) ||
          !bit_identical(x.groups[g].pairs[p].b, y.groups[g].pairs[p].b))
        return false;
  return true;
}

}  // namespace

TEST_CASE("degree pairs are uniform over distinct pairs") {
  std::mt19937_64 rng(1);
  for (int i = 0; i < 1000; ++i) {
    const auto [m, n] = sample_degree_pair(rng, 1);
    CHECK(((m == 0 && n == 1) || (m == 1 && n == 0)));
  }
  std::map<std::pair<std::size_t, std::size_t>, int> counts;
  const int draws = 120000;
  for (int i = 0; i < draws; ++i) {
    const auto p = sample_degree_pair(rng, 3);
    REQUIRE(p.first != p.second);
    REQUIRE(p.first <= 3);
    REQUIRE(p.second <= 3);
    ++counts[p];
  }
  REQUIRE(counts.size() == 12);
  const double expected = draws / 12.0;
  double chi2 = 0.0;
  for (const auto& [pair, c] : counts) chi2 += (c - expected) * (c - expected) / expected;
  CHECK(chi2 < 31.26);  // 11 degrees of freedom, p = 0.001
}

TEST_CASE("learning-rate schedule") {
  CHECK(lr_schedule(0, 100, 0.1, 0) == doctest::Approx(0.1));
  CHECK(lr_schedule(50, 100, 0.1, 0) == doctest::Approx(0.05));
  CHECK(lr_schedule(100, 100, 0.1, 0) == doctest::Approx(0.0).epsilon(1e-12));
  CHECK(lr_schedule(0, 100, 0.1, 10) == doctest::Approx(0.0));
  CHECK(lr_schedule(5, 100, 0.1, 10) == doctest::Approx(0.05));
  CHECK(lr_schedule(10, 100, 0.1, 10) == doctest::Approx(0.1));
  CHECK(lr_schedule(55, 100, 0.1, 10) == doctest::Approx(0.05));
  CHECK(lr_schedule(70, 100, 0.1, 0, LrSchedule::constant) == doctest::Approx(0.1));
}

TEST_CASE("AdamW update") {
  SUBCASE("decay only") {
    Tensor<double> w({1, 1}, 1.0), g({1, 1}, 0.0);
    AdamState<double> st;
    adamw_update(w, g, st, 0.1, 0.05);
    CHECK(w[0] == doctest::Approx(0.995).epsilon(1e-12));
  }
  SUBCASE("first step moves by lr") {
    Tensor<double> w({1, 1}, 1.0), g({1, 1}, 1.0);
    AdamState<double> st;
    adamw_update(w, g, st, 0.1, 0.0);
    CHECK(w[0] == doctest::Approx(0.9).epsilon(1e-7));
    CHECK(st.step == 1);
  }
  SUBCASE("hand-evaluated second step") {
    Tensor<double> w({1, 1}, 1.0), g({1, 1}, 1.0);
    AdamState<double> st;
    adamw_update(w, g, st, 0.1, 0.0);
    const double w1 = w[0];
    g[0] = -2.0;
    adamw_update(w, g, st, 0.1, 0.0);
    const double m = (0.9 * 0.1 * 1.0 + 0.1 * -2.0) / (1 - 0.81);
    const double v = (0.999 * 0.001 * 1.0 + 0.001 * 4.0) / (1 - 0.999 * 0.999);
    CHECK(w[0] == doctest::Approx(w1 - 0.1 * m / (std::sqrt(v) + 1e-8)).epsilon(1e-10));
  }
  SUBCASE("non-finite gradient") {
    Tensor<double> w({1, 1}, 1.0), g({1, 1}, std::nan(""));
    AdamState<double> st;
    CHECK_THROWS(adamw_update(w, g, st, 0.1, 0.0));
  }
  SUBCASE("parameters without a gradient are skipped") {
    auto used = ad::Var<double>::parameter(Tensor<double>({1, 2}, 1.0));
    auto idle = ad::Var<double>::parameter(Tensor<double>({1, 2}, 1.0));
    AdamW<double> opt({used, idle});
    auto loss = ad::sum(used);
    ad::backward(loss);
    opt.step(0.1, 0.5);
    CHECK(used.value()[0] < 1.0);
    CHECK(idle.value()[0] == 1.0);
    CHECK(opt.state()[1].step == 0);
  }
}

TEST_CASE("graph loss matches two independent forwards") {
  const auto& f = fixture();
  std::mt19937_64 rng(9);
  ToComSet set = fresh(f.backbone);
  for (auto& g : set.groups)
    for (auto& p : g.pairs)
      for (auto& x : p.b.values()) x = static_cast<float>(std::normal_distribution<double>(0, 0.3)(rng));
  const auto idx = std::vector<std::size_t>{0, 1, 2, 3, 4, 5, 6, 7};
  const auto images = f.data.gather(idx);
  const auto labels = f.data.gather_labels(idx);
  for (LossKind loss : {LossKind::kl_soft_targets, LossKind::l1_feature}) {
    for (auto [m, n] : std::vector<std::pair<std::size_t, std::size_t>>{{0, 3}, {3, 0}, {1, 2}}) {
      const auto vars = bind_plugins<float>(set, false);
      const double graph =
          distill_loss(f.backbone.config, f.backbone.weights, set, vars, m, n, {&images, labels}, loss,
                       CompressionMode::merge)
              .value()
              .item();
      const double direct =
          direct_distill_loss(f.backbone.config, f.backbone.weights, set, m, n, images, labels, loss,
                              CompressionMode::merge);
      CHECK(graph == doctest::Approx(direct).epsilon(1e-6));
      CHECK(direct >= 0.0);
    }
  }
  CHECK_THROWS_AS(direct_distill_loss(f.backbone.config, f.backbone.weights, set, 2, 2, images, labels,
                                      LossKind::kl_soft_targets, CompressionMode::merge),
                  ValidationError);
}

TEST_CASE("only the groups between the two degrees receive gradient") {
  const auto& f = fixture();
  ToComSet set = fresh(f.backbone);
  PluginVars<float> vars = bind_plugins<float>(set, true);
  AdamW<float> opt(vars.flat());
  const DistillConfig dc = small_distill(1);
  std::mt19937_64 rng(4);
  const auto pool = f.data.indices(Split::pretrain);
  for (int step = 0; step < 100; ++step) {
    std::vector<std::size_t> idx(pool.begin() + (step * 8) % 150, pool.begin() + (step * 8) % 150 + 8);
    const auto images = f.data.gather(idx);
    const auto labels = f.data.gather_labels(idx);
    const auto [m, n] = sample_degree_pair(rng, 3);
    const auto before = set;
    const auto out = distill_step(f.backbone.config, f.backbone.weights, set, vars, opt, m, n, {&images, labels}, dc,
                                  1e-2);
    for (std::size_t g : out.touched_groups) {
      CHECK(g >= std::min(m, n));
      CHECK(g < std::max(m, n));
    }
    for (std::size_t g = 0; g < set.groups.size(); ++g) {
      if (std::find(out.touched_groups.begin(), out.touched_groups.end(), g) != out.touched_groups.end()) continue;
      for (std::size_t p = 0; p < set.groups[g].pairs.size(); ++p)
        CHECK(bit_identical(set.groups[g].pairs[p].a, before.groups[g].pairs[p].a));
    }
  }
}

TEST_CASE("plugin training") {
  const auto& f = fixture();
  const auto weights_before = f.backbone.weights.cast<float>();

  SUBCASE("zero epochs returns the initial set") {
    const auto init = fresh(f.backbone);
    const auto out = train_tocom(f.data, f.backbone, init, small_distill(0));
    CHECK(same_set(out.set, init));
    CHECK(out.log.empty());
  }
  SUBCASE("deterministic and reduces held-out loss") {
    const auto a = train_tocom(f.data, f.backbone, fresh(f.backbone), small_distill(3));
    const auto b = train_tocom(f.data, f.backbone, fresh(f.backbone), small_distill(3));
    CHECK(same_set(a.set, b.set));
    CHECK(a.log.size() == 3 * 5);
    CHECK(a.epoch_loss.size() == 3);

    const auto held = synth_dataset({.seed = 77, .classes = 4, .samples = 64, .image_size = 8, .window = 4, .noise = 0.3});
    const double base = held_out_distill_loss(f.backbone.config, f.backbone.weights, fresh(f.backbone), held.images,
                                              held.labels, LossKind::kl_soft_targets, CompressionMode::merge);
    const double trained = held_out_distill_loss(f.backbone.config, f.backbone.weights, a.set, held.images,
                                                 held.labels, LossKind::kl_soft_targets, CompressionMode::merge);
    CHECK(trained < base);
    for (const auto& [name, t] : weights_before.entries()) CHECK(bit_identical(*t, f.backbone.weights.at(name)));
  }
  SUBCASE("cross-entropy and feature losses train") {
    for (LossKind loss : {LossKind::cross_entropy, LossKind::l1_feature}) {
      auto dc = small_distill(1);
      dc.loss = loss;
      const auto out = train_tocom(f.data, f.backbone, fresh(f.backbone), dc);
      for (double l : out.epoch_loss) CHECK(std::isfinite(l));
    }
  }
  SUBCASE("mismatched configuration is rejected") {
    CHECK_THROWS_AS(train_tocom(f.data, f.backbone, fresh(f.backbone, 2), small_distill(1)), ValidationError);
    auto dc = small_distill(1);
    dc.batch_size = 0;
    CHECK_THROWS_AS(train_tocom(f.data, f.backbone, fresh(f.backbone), dc), ValidationError);
  }
  SUBCASE("step log") {
    std::size_t calls = 0;
    const auto out = train_tocom(f.data, f.backbone, fresh(f.backbone), small_distill(1),
                                 [&](const StepRecord& r) { CHECK(r.step == calls++); });
    CHECK(calls == out.log.size());
    const auto csv = training_log_csv(out.log);
    CHECK(csv.rfind("step,", 0) == 0);
    CHECK(std::count(csv.begin(), csv.end(), '\n') == static_cast<long>(out.log.size() + 1));
  }
}
