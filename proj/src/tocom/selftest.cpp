#include "tocom/selftest.hpp"

#include <chrono>
#include <cmath>
#include <cstring>
#include <random>
#include <sstream>

#include "tocom/artifact.hpp"
#include "tocom/checkpoint.hpp"
#include "tocom/dataset.hpp"
#include "tocom/gradcheck.hpp"
#include "tocom/trainer.hpp"

namespace tocom {

namespace {

template <class F>
SuiteResult timed(const std::string& name, F&& body) {
  SuiteResult r;
  r.name = name;
  const auto t0 = std::chrono::steady_clock::now();
  try {
    body(r);
  } catch (const std::exception& e) {
    r.passed = false;
    r.detail = std::string("exception: ") + e.what();
  }
  r.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  return r;
}

ModelConfig tiny_config(std::size_t layers, std::size_t dim) {
  ModelConfig c;
  c.layers = layers;
  c.dim = dim;
  c.heads = 2;
  c.mlp_ratio = 2;
  c.image_size = 8;
  c.patch_size = 2;
  c.channels = 3;
  c.num_classes = 4;
  return c;
}

// Weights with enough spread that logits and gradients are O(1).
template <class T>
WeightSet<T> spread_weights(const ModelConfig& cfg, std::mt19937_64& rng, double sigma) {
  std::normal_distribution<double> dist(0.0, sigma);
  WeightSet<T> w;
  for (const auto& [name, shape] : required_weights(cfg)) {
    Tensor<T> t(shape, T(0));
    const bool gain = name.size() > 2 && name.compare(name.size() - 2, 2, ".g") == 0;
    for (auto& x : t.values()) x = static_cast<T>(gain ? 1.0 + 0.1 * dist(rng) : dist(rng));
    w.set(name, std::move(t));
  }
  return w;
}

ToComSet random_plugins(const ModelConfig& cfg, std::size_t rmax, std::size_t rank, double sigma, std::uint64_t seed,
                        PluginVariant variant = PluginVariant::standard) {
  PluginSetConfig pc;
  pc.layers = cfg.layers;
  pc.dim = cfg.dim;
  pc.rmax = rmax;
  pc.rank = rank;
  pc.seed = seed;
  pc.variant = variant;
  ToComSet set = init_plugins(pc);
  std::mt19937_64 rng(seed ^ 0x9e3779b97f4a7c15ULL);
  std::normal_distribution<float> dist(0.0f, static_cast<float>(sigma));
  for (auto& g : set.groups)
    for (auto& p : g.pairs) {
      for (auto& x : p.a.values()) x = dist(rng);
      for (auto& x : p.b.values()) x = dist(rng);
    }
  return set;
}

}  // namespace

SuiteResult selftest_gradcheck(std::uint64_t seed, std::size_t configs) {
  return timed("gradcheck", [&](SuiteResult& r) {
    std::mt19937_64 rng(seed);
    double worst = 0.0;
    for (std::size_t c = 0; c < configs; ++c) {
      const ModelConfig cfg = tiny_config(1 + rng() % 2, rng() % 2 ? 16 : 8);
      const std::size_t rmax = 1 + rng() % 3;
      const WeightSet<double> backbone = spread_weights<double>(cfg, rng, 0.4);
      ToComSet set = random_plugins(cfg, rmax, 1 + rng() % 2, 0.5, rng());
      set.scale = 0.5;
      const auto [m, n] = sample_degree_pair(rng, rmax);
      Tensor<double> images = Tensor<double>::matrix(2, cfg.image_numel());
      std::normal_distribution<double> px(0.0, 1.0);
      for (auto& x : images.values()) x = px(rng);
      std::vector<Tensor<double>> points;
      for (const auto& v : bind_plugins<double>(set, false).flat()) points.push_back(v.value());
      std::function<ad::Var<double>(const std::vector<ad::Var<double>>&)> f =
          [&](const std::vector<ad::Var<double>>& vars) {
            return distill_loss(cfg, backbone, set, unflatten_plugins(set, vars), m, n, {&images, {}},
                                LossKind::kl_soft_targets, CompressionMode::merge);
          };
      const auto res = ad::finite_difference_check<double>(f, points, 1e-5);
      worst = std::max(worst, res.max_relative_error);
    }
    r.passed = worst < 1e-4;
    r.detail = "max relative error " + std::to_string(worst) + " over " + std::to_string(configs) + " configs";
  });
}

namespace {

// Exhaustive reference: the A -> B best links by full scan, then the r-subset
// whose every member beats every non-member under (similarity desc, A order).
std::vector<std::pair<std::size_t, std::size_t>> oracle_edges(const Tensor<double>& keys, std::size_t r) {
  const std::size_t n = keys.rows(), k = keys.cols();
  std::vector<std::size_t> a_set, b_set;
  for (std::size_t i = 1; i < n; ++i) ((i - 1) % 2 == 0 ? a_set : b_set).push_back(i);
  r = std::min(r, (n - 1) / 2);
  auto cosine = [&](std::size_t x, std::size_t y) {
    double dot = 0, nx = 0, ny = 0;
    for (std::size_t j = 0; j < k; ++j) {
      dot += keys(x, j) * keys(y, j);
      nx += keys(x, j) * keys(x, j);
      ny += keys(y, j) * keys(y, j);
    }
    return nx == 0 || ny == 0 ? 0.0 : dot / (std::sqrt(nx) * std::sqrt(ny));
  };
  std::vector<std::size_t> link(a_set.size());
  std::vector<double> sim(a_set.size());
  for (std::size_t i = 0; i < a_set.size(); ++i) {
    std::size_t best = 0;
    for (std::size_t j = 1; j < b_set.size(); ++j)
      if (cosine(a_set[i], b_set[j]) > cosine(a_set[i], b_set[best])) best = j;
    link[i] = best;
    sim[i] = b_set.empty() ? 0.0 : cosine(a_set[i], b_set[best]);
  }
  auto beats = [&](std::size_t x, std::size_t y) { return sim[x] > sim[y] || (sim[x] == sim[y] && x < y); };
  std::vector<std::pair<std::size_t, std::size_t>> out;
  for (std::uint32_t mask = 0; mask < (1u << a_set.size()); ++mask) {
    if (static_cast<std::size_t>(__builtin_popcount(mask)) != r) continue;
    bool ok = true;
    for (std::size_t x = 0; x < a_set.size() && ok; ++x)
      for (std::size_t y = 0; y < a_set.size() && ok; ++y)
        if ((mask >> x & 1) && !(mask >> y & 1) && !beats(x, y)) ok = false;
    if (!ok) continue;
    for (std::size_t x = 0; x < a_set.size(); ++x)
      if (mask >> x & 1) out.push_back({a_set[x], b_set[link[x]]});
    break;
  }
  std::sort(out.begin(), out.end());
  return out;
}

}  // namespace

SuiteResult selftest_bsm_oracle(std::uint64_t seed, std::size_t seeds) {
  return timed("bsm_oracle", [&](SuiteResult& r) {
    std::size_t cases = 0, mismatches = 0;
    for (std::size_t s = 0; s < seeds; ++s) {
      std::mt19937_64 rng(seed * 1000003 + s);
      std::normal_distribution<double> dist(0.0, 1.0);
      std::uniform_int_distribution<int> coarse(-1, 1);
      const bool quantized = s % 2 == 1;  // coarse keys produce ties
      for (std::size_t n = 1; n <= 12; ++n) {
        Tensor<double> keys = Tensor<double>::matrix(n, 3);
        for (auto& x : keys.values()) x = quantized ? coarse(rng) : dist(rng);
        for (std::size_t req = 0; req <= n; ++req) {
          const MergePlan plan = bipartite_soft_matching(keys, TokenLayout::identity(n), req);
          std::vector<std::pair<std::size_t, std::size_t>> got;
          for (const auto& e : plan.edges) got.push_back({e.a, e.b});
          std::sort(got.begin(), got.end());
          ++cases;
          if (got != oracle_edges(keys, req)) ++mismatches;
        }
      }
    }
    r.passed = mismatches == 0;
    r.detail = std::to_string(mismatches) + " mismatches in " + std::to_string(cases) + " cases";
  });
}

SuiteResult selftest_duplicate_invariance(std::uint64_t seed, std::size_t trials) {
  return timed("duplicate_invariance", [&](SuiteResult& r) {
    std::mt19937_64 rng(seed);
    const ModelConfig cfg = tiny_config(2, 16);
    const std::size_t g = cfg.grid(), p = cfg.patch_size, s = cfg.image_size;
    // duplicate patches 2 (set A) and 5 (set B): tokens 3 and 6
    const std::size_t pa = 2, pb = 5;
    double worst = 0.0;
    std::size_t unmerged = 0;
    for (std::size_t t = 0; t < trials; ++t) {
      WeightSet<float> w = spread_weights<float>(cfg, rng, 0.3);
      Tensor<float> pos = w.at(names::kPos);
      for (std::size_t j = 0; j < cfg.dim; ++j) pos(pb + 1, j) = pos(pa + 1, j);
      w.set(names::kPos, pos);
      Tensor<float> img = Tensor<float>::matrix(1, cfg.image_numel());
      std::normal_distribution<float> px(0.0f, 1.0f);
      for (auto& x : img.values()) x = px(rng);
      for (std::size_t c = 0; c < cfg.channels; ++c)
        for (std::size_t dy = 0; dy < p; ++dy)
          for (std::size_t dx = 0; dx < p; ++dx) {
            const std::size_t src = (c * s + (pa / g) * p + dy) * s + (pa % g) * p + dx;
            const std::size_t dst = (c * s + (pb / g) * p + dy) * s + (pb % g) * p + dx;
            img[dst] = img[src];
          }
      MergeSchedule sched = MergeSchedule::none(cfg.layers);
      sched.layers[0] = {CompressionMode::merge, 1, false, 0};
      const auto merged = forward(cfg, bind_params(w), img, sched);
      const auto plain = forward(cfg, bind_params(w), img, MergeSchedule::none(cfg.layers));
      const auto& plan = merged.layers[0].plans.at(0);
      if (plan.edges.size() != 1 || plan.edges[0].a != pa + 1 || plan.edges[0].b != pb + 1) {
        ++unmerged;
        continue;
      }
      worst = std::max<double>(worst, max_abs_diff(merged.logits.value(), plain.logits.value()));
    }
    r.passed = worst <= 1e-4 && unmerged == 0;
    r.detail = "max |logit diff| " + std::to_string(worst) + ", duplicate pair not selected in " +
               std::to_string(unmerged) + " of " + std::to_string(trials);
  });
}

SuiteResult selftest_plugin_algebra(std::uint64_t seed) {
  return timed("plugin_algebra", [&](SuiteResult& r) {
    const ModelConfig cfg = tiny_config(2, 16);
    const std::size_t rmax = 3;
    const ToComSet set = random_plugins(cfg, rmax, 2, 0.3, seed);
    std::mt19937_64 rng(seed);
    const WeightSet<float> w = spread_weights<float>(cfg, rng, 0.3);
    auto same = [](const CompensatorDelta& x, const CompensatorDelta& y) {
      for (std::size_t l = 0; l < x.q.size(); ++l)
        if (!bit_identical(x.q[l], y.q[l]) || !bit_identical(x.v[l], y.v[l])) return false;
      return true;
    };
    std::size_t failures = 0, checks = 0;
    double worst_rel = 0.0;
    for (std::size_t m = 0; m <= rmax; ++m)
      for (std::size_t n = 0; n <= rmax; ++n) {
        if (m == n) continue;
        const auto d = compose(set, m, n);
        ++checks;
        if (!same(d, compose(set, n, m).negated())) ++failures;
        for (std::size_t k = 0; k <= rmax; ++k) {
          if (k == m || k == n) continue;
          ++checks;
          if (!same(add(compose(set, m, k), compose(set, k, n)), d)) ++failures;
        }
        const auto back = apply_delta(apply_delta(w, d), d.negated());
        for (std::size_t l = 0; l < cfg.layers; ++l)
          for (const auto& name : {names::wq(l), names::wv(l)}) {
            const double scale = std::max<double>(max_abs(w.at(name)), 1e-30);
            worst_rel = std::max<double>(worst_rel, max_abs_diff(back.at(name), w.at(name)) / scale);
          }
      }
    r.passed = failures == 0 && worst_rel <= 1e-5;
    r.detail = std::to_string(failures) + " exactness failures in " + std::to_string(checks) +
               " checks, apply/unapply max relative error " + std::to_string(worst_rel);
  });
}

SuiteResult selftest_persistence(std::uint64_t seed) {
  return timed("persistence", [&](SuiteResult& r) {
    ModelConfig cfg = tiny_config(2, 16);
    std::mt19937_64 rng(seed);
    ModelCheckpoint ckpt;
    ckpt.config = cfg;
    ckpt.weights = spread_weights<float>(cfg, rng, 1.0);
    ckpt.adapter = init_adapter(cfg, 4, 0.1, seed);
    for (auto& t : ckpt.adapter->up) t.fill(0.25f);
    ckpt.meta = {2, 3, "synth:seed=1", seed, TuneMode::adaptformer, CompressionMode::merge};
    const auto bytes = encode_checkpoint(ckpt);
    const ModelCheckpoint back = decode_checkpoint(bytes);
    bool ok = back.config == ckpt.config && back.meta.source_r == 2 && back.meta.mode == TuneMode::adaptformer &&
              back.weights.size() == ckpt.weights.size() && back.adapter.has_value();
    for (const auto& [name, t] : ckpt.weights.entries()) ok = ok && bit_identical(*t, back.weights.at(name));
    for (std::size_t l = 0; ok && l < cfg.layers; ++l)
      ok = bit_identical(ckpt.adapter->down[l], back.adapter->down[l]) &&
           bit_identical(ckpt.adapter->up[l], back.adapter->up[l]);

    const ToComSet set = random_plugins(cfg, 3, 2, 0.3, seed);
    const auto pbytes = encode_plugins(set);
    const ToComSet pset = decode_plugins(pbytes);
    for (std::size_t g = 0; ok && g < set.groups.size(); ++g)
      for (std::size_t p = 0; p < set.groups[g].pairs.size(); ++p)
        ok = ok && bit_identical(set.groups[g].pairs[p].a, pset.groups[g].pairs[p].a) &&
             bit_identical(set.groups[g].pairs[p].b, pset.groups[g].pairs[p].b);

    std::size_t rejected = 0, attempts = 0;
    auto expect_reject = [&](std::vector<std::uint8_t> b, bool plugin) {
      ++attempts;
      try {
        if (plugin)
          decode_plugins(b);
        else
          decode_checkpoint(b);
      } catch (const FormatError&) {
        ++rejected;
      }
    };
    auto bad_magic = bytes;
    bad_magic[0] = 'X';
    expect_reject(bad_magic, false);
    expect_reject(pbytes, false);  // plugin magic where a checkpoint is expected
    auto flipped = pbytes;
    flipped[flipped.size() - 9] ^= 0x01;  // last payload byte
    expect_reject(flipped, true);
    auto bad_crc = bytes;
    bad_crc.back() ^= 0xff;
    expect_reject(bad_crc, false);
    expect_reject({bytes.begin(), bytes.begin() + static_cast<long>(bytes.size() / 2)}, false);
    r.passed = ok && rejected == attempts;
    r.detail = std::string(ok ? "round trips bit-exact" : "round trip mismatch") + ", rejected " +
               std::to_string(rejected) + "/" + std::to_string(attempts) + " corrupted files";
  });
}

SuiteResult selftest_linear_probe(std::uint64_t seed) {
  return timed("linear_probe", [&](SuiteResult& r) {
    SynthOptions o;
    o.seed = seed + 1;
    o.classes = 4;
    o.samples = 1000;
    o.image_size = 16;
    o.window = 8;
    const Dataset ds = synth_dataset(o);
    std::vector<std::size_t> train(800), test(200);
    for (std::size_t i = 0; i < 800; ++i) train[i] = i;
    for (std::size_t i = 0; i < 200; ++i) test[i] = 800 + i;
    const Tensor<float> xtr = ds.gather(train), xte = ds.gather(test);
    const auto ytr = ds.gather_labels(train), yte = ds.gather_labels(test);
    auto w = ad::Var<float>::parameter(Tensor<float>::matrix(ds.image_numel(), o.classes));
    auto b = ad::Var<float>::parameter(Tensor<float>::matrix(1, o.classes));
    AdamW<float> opt({w, b});
    const auto x = ad::Var<float>::constant(xtr);
    for (int step = 0; step < 200; ++step) {
      opt.zero_grad();
      auto loss = ad::cross_entropy(ad::add_bias(ad::matmul(x, w), b), std::span<const int>(ytr));
      ad::backward(loss);
      opt.step(1e-2, 1e-2);
    }
    Tensor<float> logits;
    gemm(xte, false, w.value(), false, logits);
    std::size_t correct = 0;
    for (std::size_t i = 0; i < test.size(); ++i) {
      std::size_t best = 0;
      for (std::size_t c = 1; c < o.classes; ++c)
        if (logits(i, c) + b.value()[c] > logits(i, best) + b.value()[best]) best = c;
      correct += static_cast<int>(best) == yte[i];
    }
    const double acc = double(correct) / double(test.size());
    const double chance = 1.0 / double(o.classes);
    r.passed = acc > chance + 0.1;
    r.detail = "probe accuracy " + std::to_string(acc) + " (chance " + std::to_string(chance) + ")";
  });
}

std::vector<SuiteResult> run_selftest(std::uint64_t seed) {
  return {selftest_gradcheck(seed, 20),         selftest_bsm_oracle(seed, 100), selftest_duplicate_invariance(seed, 50),
          selftest_plugin_algebra(seed),        selftest_persistence(seed),    selftest_linear_probe(seed)};
}

}  // namespace tocom
