#include <cmath>
#include <random>

#include "doctest.h"
#include "support.hpp"
#include "tocom/plugins.hpp"
#include "tocom/vit.hpp"

using namespace tocom;
using testing::random_tensor;
using testing::spread_weights;
using testing::tiny_config;

namespace {

// softmax(q k^T / sqrt(hd) + bias) v per head, one image.
Tensor<double> reference_attention(const Tensor<double>& q, const Tensor<double>& k, const Tensor<double>& v,
                                   std::size_t heads, const std::vector<double>& bias) {
  const std::size_t n = q.rows(), d = q.cols(), hd = d / heads;
  Tensor<double> out = Tensor<double>::matrix(n, d);
  for (std::size_t h = 0; h < heads; ++h)
    for (std::size_t i = 0; i < n; ++i) {
      std::vector<double> logit(n);
      double mx = -1e300;
      for (std::size_t j = 0; j < n; ++j) {
        double s = 0;
        for (std::size_t t = 0; t < hd; ++t) s += q(i, h * hd + t) * k(j, h * hd + t);
        logit[j] = s / std::sqrt(double(hd)) + bias[j];
        mx = std::max(mx, logit[j]);
      }
      double z = 0;
      for (auto& l : logit) z += (l = std::exp(l - mx));
      for (std::size_t j = 0; j < n; ++j)
        for (std::size_t t = 0; t < hd; ++t) out(i, h * hd + t) += logit[j] / z * v(j, h * hd + t);
    }
  return out;
}

void copy_patch(const ModelConfig& cfg, Tensor<float>& img, std::size_t from, std::size_t to) {
  const std::size_t g = cfg.grid(), p = cfg.patch_size, s = cfg.image_size;
  for (std::size_t c = 0; c < cfg.channels; ++c)
    for (std::size_t dy = 0; dy < p; ++dy)
      for (std::size_t dx = 0; dx < p; ++dx)
        img[(c * s + (to / g) * p + dy) * s + (to % g) * p + dx] =
            img[(c * s + (from / g) * p + dy) * s + (from % g) * p + dx];
}

}  // namespace

TEST_CASE("patch embedding shape") {
  ModelConfig cfg;
  cfg.dim = 16;
  cfg.heads = 2;
  const auto w = init_weights(cfg, 1);
  std::mt19937_64 rng(1);
  const auto tokens = patch_embed(cfg, bind_params(w), testing::random_images<float>(cfg, 2, rng));
  CHECK(tokens.tokens() == 17);
  CHECK(tokens.x.rows() == 34);
  CHECK(tokens.x.cols() == 16);
}

TEST_CASE("zero embedding yields zero patch tokens and the CLS embedding") {
  const auto cfg = tiny_config();
  std::mt19937_64 rng(2);
  auto w = spread_weights<float>(cfg, rng);
  w.set(names::kPatchW, Tensor<float>::matrix(cfg.patch_dim(), cfg.dim));
  w.set(names::kPatchB, Tensor<float>::matrix(1, cfg.dim));
  w.set(names::kPos, Tensor<float>::matrix(cfg.token_count(), cfg.dim));
  const auto x = patch_embed(cfg, bind_params(w), Tensor<float>::matrix(1, cfg.image_numel())).x.value();
  for (std::size_t j = 0; j < cfg.dim; ++j) CHECK(x(0, j) == w.at(names::kCls)(0, j));
  for (std::size_t i = 1; i < cfg.token_count(); ++i)
    for (std::size_t j = 0; j < cfg.dim; ++j) CHECK(x(i, j) == 0.0f);
}

TEST_CASE("patch projection is local") {
  const auto cfg = tiny_config();
  std::mt19937_64 rng(3);
  const auto w = spread_weights<float>(cfg, rng);
  auto a = testing::random_images<float>(cfg, 1, rng);
  auto b = a;
  const std::size_t patch = 7, g = cfg.grid(), s = cfg.image_size;
  b[(1 * s + (patch / g) * cfg.patch_size) * s + (patch % g) * cfg.patch_size + 1] += 1.0f;
  const auto xa = patch_embed(cfg, bind_params(w), a).x.value();
  const auto xb = patch_embed(cfg, bind_params(w), b).x.value();
  for (std::size_t i = 0; i < cfg.token_count(); ++i) {
    bool same = true;
    for (std::size_t j = 0; j < cfg.dim; ++j) same = same && xa(i, j) == xb(i, j);
    CHECK(same == (i != patch + 1));
  }
}

TEST_CASE("unit sizes match an unbiased attention reference") {
  std::mt19937_64 rng(4);
  const auto q = random_tensor<double>(7, 8, rng), k = random_tensor<double>(7, 8, rng),
             v = random_tensor<double>(7, 8, rng);
  Tensor<double> bias = Tensor<double>::matrix(1, 7);
  for (auto& b : bias.values()) b = std::log(1.0);
  const auto got = ad::multi_head_attention(ad::Var<double>::constant(q), ad::Var<double>::constant(k),
                                            ad::Var<double>::constant(v), 1, 2, bias)
                       .value();
  CHECK(max_abs_diff(got, reference_attention(q, k, v, 2, std::vector<double>(7, 0.0))) < 1e-12);
}

TEST_CASE("duplicated token equals one token of size two") {
  std::mt19937_64 rng(5);
  const std::size_t n = 6, d = 8, dup = 2;
  const auto q = random_tensor<double>(n, d, rng), k = random_tensor<double>(n, d, rng),
             v = random_tensor<double>(n, d, rng);
  auto append_copy = [&](const Tensor<double>& t) {
    Tensor<double> out = Tensor<double>::matrix(n + 1, d);
    std::copy(t.values().begin(), t.values().end(), out.values().begin());
    for (std::size_t j = 0; j < d; ++j) out(n, j) = t(dup, j);
    return out;
  };
  const auto full = ad::multi_head_attention(ad::Var<double>::constant(append_copy(q)),
                                             ad::Var<double>::constant(append_copy(k)),
                                             ad::Var<double>::constant(append_copy(v)), 1, 2, Tensor<double>())
                        .value();
  Tensor<double> bias = Tensor<double>::matrix(1, n);
  bias(0, dup) = std::log(2.0);
  const auto merged = ad::multi_head_attention(ad::Var<double>::constant(q), ad::Var<double>::constant(k),
                                               ad::Var<double>::constant(v), 1, 2, bias)
                          .value();
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < d; ++j) CHECK(std::abs(full(i, j) - merged(i, j)) < 1e-5);
}

TEST_CASE("zero delta and zero adapter change nothing") {
  const auto cfg = tiny_config();
  std::mt19937_64 rng(6);
  const auto w = spread_weights<float>(cfg, rng);
  const auto img = testing::random_images<float>(cfg, 3, rng);
  const auto sched = MergeSchedule::uniform(cfg.layers, CompressionMode::merge, 2);
  const auto plain = forward(cfg, w, img, sched, nullptr, static_cast<const AdapterWeights<float>*>(nullptr));

  PluginSetConfig pc;
  pc.layers = cfg.layers;
  pc.dim = cfg.dim;
  const auto delta = compose(init_plugins(pc), 0, 3);
  const auto adapter = init_adapter(cfg, 4, 0.5, 1);
  const auto patched = forward(cfg, w, img, sched, &delta, &adapter);
  CHECK(bit_identical(plain.logits.value(), patched.logits.value()));

  const auto folded = apply_delta(w, delta);
  for (const auto& [name, t] : w.entries()) CHECK(bit_identical(*t, folded.at(name)));
}

TEST_CASE("adapter branch") {
  const auto cfg = tiny_config();
  std::mt19937_64 rng(7);
  const auto w = spread_weights<double>(cfg, rng);
  auto adapter = init_adapter(cfg, 4, 0.7, 2).cast<double>();
  for (auto& u : adapter.up) u = random_tensor<double>(4, cfg.dim, rng);
  const auto img = testing::random_images<double>(cfg, 2, rng);
  const auto base = bind_params(w);
  const auto state = patch_embed(cfg, base, img);
  const auto without = mlp_block(cfg, base, 0, state).x.value();
  const auto with = mlp_block(cfg, bind_params(w, &adapter), 0, state).x.value();

  Tensor<double> hidden = matmul(state.x.value(), adapter.down[0]);
  for (auto& h : hidden.values()) h = std::max(h, 0.0);
  const auto branch = matmul(hidden, adapter.up[0]);
  for (std::size_t i = 0; i < with.numel(); ++i) CHECK(with[i] - without[i] == doctest::Approx(0.7 * branch[i]));

  adapter.scale = 0.0;
  CHECK(bit_identical(mlp_block(cfg, bind_params(w, &adapter), 0, state).x.value(), without));
}

TEST_CASE("r = 0 schedules are the uncompressed forward") {
  const auto cfg = tiny_config();
  std::mt19937_64 rng(8);
  const auto w = spread_weights<float>(cfg, rng);
  const auto img = testing::random_images<float>(cfg, 2, rng);
  const auto p = bind_params(w);
  const auto none = forward(cfg, p, img, MergeSchedule::none(cfg.layers));
  for (auto mode : {CompressionMode::merge, CompressionMode::prune}) {
    const auto t = forward(cfg, p, img, MergeSchedule::uniform(cfg.layers, mode, 0));
    CHECK(bit_identical(t.logits.value(), none.logits.value()));
    for (auto c : t.token_counts) CHECK(c == cfg.token_count());
  }

  // hand-assembled pipeline without any schedule handling
  auto state = patch_embed(cfg, p, img);
  for (std::size_t l = 0; l < cfg.layers; ++l) state = mlp_block(cfg, p, l, mhsa_block<float>(cfg, p, l, state, nullptr));
  const std::vector<std::size_t> cls = {0, cfg.token_count()};
  auto feat = ad::layer_norm(ad::gather_rows<float>(state.x, cls), p[names::kNormG], p[names::kNormB]);
  auto logits = ad::add_bias(ad::matmul(feat, p[names::kHeadW]), p[names::kHeadB]);
  CHECK(bit_identical(logits.value(), none.logits.value()));
}

TEST_CASE("token counts under a uniform schedule") {
  ModelConfig cfg = tiny_config(4, 16, 16, 4);
  std::mt19937_64 rng(9);
  const auto w = spread_weights<float>(cfg, rng);
  const auto t = forward(cfg, bind_params(w), testing::random_images<float>(cfg, 2, rng),
                         MergeSchedule::uniform(4, CompressionMode::merge, 3));
  CHECK(t.token_counts == std::vector<std::size_t>{14, 11, 8, 5});
  CHECK(t.token_proxy() == 17 + 14 + 11 + 8);
  const auto none = forward(cfg, bind_params(w), testing::random_images<float>(cfg, 1, rng), MergeSchedule::none(4));
  CHECK(none.token_proxy() == 4 * 17);
}

TEST_CASE("CLS is never merged or pruned") {
  const auto cfg = tiny_config(2, 16);
  std::mt19937_64 rng(10);
  const auto w = spread_weights<float>(cfg, rng);
  const auto img = testing::random_images<float>(cfg, 3, rng);
  const auto t = forward(cfg, bind_params(w), img, MergeSchedule::uniform(2, CompressionMode::merge, 100));
  for (const auto& l : t.layers)
    for (const auto& plan : l.plans) {
      CHECK(plan.destination[0] == 0);
      for (const auto& e : plan.edges) {
        CHECK(e.a != 0);
        CHECK(e.b != 0);
      }
    }
  const auto pr = forward(cfg, bind_params(w), img, MergeSchedule::uniform(2, CompressionMode::prune, 100));
  CHECK(pr.token_counts.back() >= 2);
}

TEST_CASE("duplicate patch merged at r = 1 matches the r = 0 logits") {
  auto run = [](auto tag, double tol) {
    using T = decltype(tag);
    const auto cfg = tiny_config(2, 16);
    std::mt19937_64 rng(11);
    for (int trial = 0; trial < 10; ++trial) {
      auto w = spread_weights<T>(cfg, rng);
      Tensor<T> pos = w.at(names::kPos);
      for (std::size_t j = 0; j < cfg.dim; ++j) pos(6, j) = pos(3, j);
      w.set(names::kPos, pos);
      auto img = testing::random_images<float>(cfg, 1, rng);
      copy_patch(cfg, img, 2, 5);
      const auto typed = img.template cast<T>();
      MergeSchedule sched = MergeSchedule::none(cfg.layers);
      sched.layers[0] = {CompressionMode::merge, 1, false, 0};
      const auto merged = forward(cfg, bind_params(w), typed, sched);
      const auto plain = forward(cfg, bind_params(w), typed, MergeSchedule::none(cfg.layers));
      REQUIRE(merged.layers[0].plans[0].edges.size() == 1);
      CHECK(merged.layers[0].plans[0].edges[0].a == 3);
      CHECK(merged.layers[0].plans[0].edges[0].b == 6);
      CHECK(max_abs_diff(merged.logits.value(), plain.logits.value()) <= tol);
    }
  };
  run(float{}, 1e-4);
  run(double{}, 1e-8);
}

TEST_CASE("config and weight validation") {
  ModelConfig cfg = tiny_config();
  cfg.heads = 3;
  CHECK_THROWS_AS(cfg.validate(), ValidationError);
  const auto good = tiny_config();
  auto w = init_weights(good, 1);
  validate_weights(good, w);
  w.set(names::kPos, Tensor<float>::matrix(3, good.dim));
  CHECK_THROWS_AS(validate_weights(good, w), ShapeError);
  CHECK_THROWS_AS(forward(good, bind_params(init_weights(good, 1)), Tensor<float>::matrix(1, 5),
                          MergeSchedule::none(good.layers)),
                  ShapeError);
}

TEST_CASE("apply_delta is persistent") {
  const auto cfg = tiny_config(1, 4, 4, 2);
  auto w = init_weights(cfg, 3);
  const auto before = w.at(names::wq(0));
  CompensatorDelta d = CompensatorDelta::zeros(1, 4);
  d.q[0](0, 0) = 0.5;
  const auto patched = apply_delta(w, d);
  CHECK(bit_identical(w.at(names::wq(0)), before));
  CHECK(patched.at(names::wq(0))(0, 0) == before(0, 0) + 0.5f);
  CHECK(patched.shared(names::kPos) == w.shared(names::kPos));
}
