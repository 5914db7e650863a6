#include <algorithm>
#include <numeric>
#include <random>
#include <set>

#include "doctest.h"
#include "support.hpp"
#include "tocom/token_ops.hpp"

using namespace tocom;
using testing::random_tensor;

namespace {

struct Edge {
  std::size_t a, b;
  double sim;
};

// Every A token scanned against every B token; edges ranked by similarity,
// ties to the lower A token; best B ties to the lower B token.
std::vector<Edge> reference_edges(const Tensor<double>& keys, std::size_t r) {
  const std::size_t n = keys.rows();
  std::vector<std::size_t> as, bs;
  for (std::size_t i = 1; i < n; ++i) (i % 2 == 1 ? as : bs).push_back(i);
  std::vector<Edge> all;
  for (std::size_t a : as) {
    Edge best{a, 0, -2.0};
    for (std::size_t b : bs) {
      const double s = cosine_similarity(&keys(a, 0), &keys(b, 0), keys.cols());
      if (s > best.sim) best = {a, b, s};
    }
    if (!bs.empty()) all.push_back(best);
  }
  std::sort(all.begin(), all.end(), [](const Edge& x, const Edge& y) { return x.sim > y.sim || (x.sim == y.sim && x.a < y.a); });
  all.resize(std::min(all.size(), std::min(r, (n - 1) / 2)));
  return all;
}

TokenState<double> random_state(std::size_t n, std::size_t d, std::mt19937_64& rng) {
  return {random_tensor<double>(n, d, rng), TokenLayout::identity(n)};
}

std::set<int> all_sources(const TokenLayout& l) {
  std::set<int> out;
  for (const auto& s : l.sources) out.insert(s.begin(), s.end());
  return out;
}

}  // namespace

TEST_CASE("r = 0 keeps every token") {
  std::mt19937_64 rng(1);
  const auto keys = random_tensor<double>(9, 4, rng);
  const auto plan = bipartite_soft_matching(keys, TokenLayout::identity(9), 0);
  CHECK(plan.edges.empty());
  CHECK(plan.survivors.size() == 9);
}

TEST_CASE("tie-break picks the first A token") {
  const Tensor<double> keys({5, 2}, std::vector<double>{0.3, 0.7, 1, 0, 1, 0, 0, 1, 0, 1});
  const auto plan = bipartite_soft_matching(keys, TokenLayout::identity(5), 1);
  REQUIRE(plan.edges.size() == 1);
  CHECK(plan.edges[0].a == 1);
  CHECK(plan.edges[0].b == 2);
  CHECK(plan.edges[0].similarity == doctest::Approx(1.0));
}

TEST_CASE("r beyond the A set is clamped") {
  std::mt19937_64 rng(2);
  const auto keys = random_tensor<double>(8, 3, rng);
  const auto plan = bipartite_soft_matching(keys, TokenLayout::identity(8), 50);
  CHECK(plan.edges.size() == 3);
  CHECK(plan.clamped);
  CHECK(plan.survivors.size() == 5);
}

TEST_CASE("matching agrees with the exhaustive reference") {
  for (std::uint64_t seed = 0; seed < 100; ++seed) {
    std::mt19937_64 rng(seed);
    std::uniform_int_distribution<int> coarse(-1, 1);
    for (std::size_t n = 1; n <= 12; ++n) {
      Tensor<double> keys = random_tensor<double>(n, 3, rng);
      if (seed % 2) for (auto& x : keys.values()) x = coarse(rng);
      for (std::size_t r = 0; r <= n; ++r) {
        const auto plan = bipartite_soft_matching(keys, TokenLayout::identity(n), r);
        const auto ref = reference_edges(keys, r);
        REQUIRE(plan.edges.size() == ref.size());
        std::vector<std::pair<std::size_t, std::size_t>> got, want;
        for (const auto& e : plan.edges) got.push_back({e.a, e.b});
        for (const auto& e : ref) want.push_back({e.a, e.b});
        std::sort(got.begin(), got.end());
        std::sort(want.begin(), want.end());
        CHECK(got == want);
      }
    }
  }
}

TEST_CASE("size-weighted merge") {
  SUBCASE("identical tokens") {
    const Tensor<double> x({3, 2}, std::vector<double>{9, 9, 1, 2, 1, 2});
    TokenState<double> s{x, TokenLayout::identity(3)};
    const auto plan = bipartite_soft_matching(x, s.layout, 1);
    const auto m = apply_merge(s, plan);
    CHECK(m.tokens.rows() == 2);
    CHECK(m.tokens(1, 0) == 1.0);
    CHECK(m.tokens(1, 1) == 2.0);
    CHECK(m.layout.sizes[1] == 2);
  }
  SUBCASE("hand-evaluated weighted mean") {
    const Tensor<double> x({3, 2}, std::vector<double>{9, 9, 2, 0, 0, 2});
    TokenLayout layout = TokenLayout::identity(3);
    layout.sizes = {1, 1, 3};
    layout.sources = {{0}, {1}, {2, 3, 4}};
    const auto plan = bipartite_soft_matching(x, layout, 1);
    const auto m = apply_merge(TokenState<double>{x, layout}, plan);
    CHECK(m.tokens(1, 0) == doctest::Approx(0.5));
    CHECK(m.tokens(1, 1) == doctest::Approx(1.5));
    CHECK(m.layout.sizes[1] == 4);
  }
  SUBCASE("empty plan is the identity") {
    std::mt19937_64 rng(3);
    const auto s = random_state(7, 4, rng);
    const auto m = apply_merge(s, identity_plan(7));
    CHECK(bit_identical(m.tokens, s.tokens));
  }
}

TEST_CASE("unmerge broadcasts") {
  std::mt19937_64 rng(4);
  SUBCASE("duplicates round trip exactly") {
    auto s = random_state(9, 4, rng);
    for (std::size_t j = 0; j < 4; ++j) {
      s.tokens(2, j) = s.tokens(1, j);
      s.tokens(4, j) = s.tokens(3, j);
    }
    const auto plan = bipartite_soft_matching(s.tokens, s.layout, 2);
    REQUIRE(plan.edges.size() == 2);
    const auto back = unmerge(apply_merge(s, plan), MergeStack{s.layout, {plan}});
    CHECK(bit_identical(back.tokens, s.tokens));
  }
  SUBCASE("sources receive the merged value") {
    auto s = random_state(7, 3, rng);
    Tensor<double> keys = Tensor<double>::matrix(7, 2);
    for (std::size_t i = 0; i < 7; ++i) keys(i, i % 2) = 1.0 + double(i);
    keys(2, 0) = 1.0;
    keys(2, 1) = 0.0;
    keys(5, 0) = 1.0;
    keys(5, 1) = 0.0;
    keys(1, 0) = 0.0;
    keys(1, 1) = 1.0;
    keys(3, 0) = 0.0;
    keys(3, 1) = 1.0;
    const auto plan = bipartite_soft_matching(keys, s.layout, 1);
    REQUIRE(plan.edges.size() == 1);
    CHECK(plan.edges[0].a == 5);
    CHECK(plan.edges[0].b == 2);
    const auto merged = apply_merge(s, plan);
    const auto back = unmerge(merged, MergeStack{s.layout, {plan}});
    for (std::size_t j = 0; j < 3; ++j) {
      const double v = merged.tokens(plan.destination[2], j);
      CHECK(back.tokens(2, j) == v);
      CHECK(back.tokens(5, j) == v);
    }
  }
  SUBCASE("no merges") {
    const auto s = random_state(5, 3, rng);
    CHECK(bit_identical(unmerge(s, MergeStack{s.layout, {}}).tokens, s.tokens));
  }
}

TEST_CASE("merge sequences conserve size and partition sources") {
  for (std::uint64_t seed = 0; seed < 50; ++seed) {
    std::mt19937_64 rng(seed);
    auto s = random_state(17, 4, rng);
    MergeStack stack{s.layout, {}};
    while (s.layout.count() > 2) {
      const std::size_t before = s.layout.count();
      const auto plan = bipartite_soft_matching(random_tensor<double>(before, 4, rng), s.layout, 1 + rng() % 4);
      s = apply_merge(s, plan);
      stack.plans.push_back(plan);
      CHECK(s.layout.count() == before - plan.edges.size());
      CHECK(std::accumulate(s.layout.sizes.begin(), s.layout.sizes.end(), 0) == 17);
      std::size_t members = 0;
      for (const auto& src : s.layout.sources) members += src.size();
      CHECK(members == 17);
      CHECK(all_sources(s.layout).size() == 17);
      CHECK(s.layout.sizes[s.layout.cls_index] == 1);
      s.layout.validate();
    }
    CHECK(unmerge(s, stack).tokens.rows() == 17);
  }
}

TEST_CASE("merging exact duplicates leaves survivors unchanged") {
  std::mt19937_64 rng(5);
  auto s = random_state(11, 3, rng);
  for (std::size_t i = 1; i + 1 < 11; i += 2)
    for (std::size_t j = 0; j < 3; ++j) s.tokens(i, j) = s.tokens(i + 1, j);
  const auto plan = bipartite_soft_matching(s.tokens, s.layout, 5);
  const auto m = apply_merge(s, plan);
  for (std::size_t i = 0; i < 11; ++i)
    for (std::size_t j = 0; j < 3; ++j) CHECK(m.tokens(plan.destination[i], j) == s.tokens(i, j));
}

TEST_CASE("pruning by CLS attention") {
  const std::vector<double> scores = {0.9, 0.5, 0.3, 0.2};
  const auto keep = evit_keep(std::span<const double>(scores), TokenLayout::identity(4), 1);
  CHECK(keep == std::vector<std::size_t>{0, 1, 2});
  CHECK(evit_keep(std::span<const double>(scores), TokenLayout::identity(4), 0).size() == 4);

  for (std::uint64_t seed = 0; seed < 30; ++seed) {
    std::mt19937_64 rng(seed);
    std::uniform_real_distribution<double> u(0, 1);
    std::vector<double> sc(7);
    for (auto& x : sc) x = u(rng);
    const auto got = evit_keep(std::span<const double>(sc), TokenLayout::identity(7), 2);
    std::vector<std::size_t> order = {1, 2, 3, 4, 5, 6};
    std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return sc[a] > sc[b]; });
    std::vector<std::size_t> want = {0, order[0], order[1], order[2], order[3]};
    std::sort(want.begin(), want.end());
    CHECK(got == want);
  }

  std::mt19937_64 rng(6);
  const auto s = random_state(5, 2, rng);
  const std::vector<double> sc = {0.0, 0.1, 0.2, 0.3, 0.4};
  const auto p = evit_prune(s, std::span<const double>(sc), 10);
  CHECK(p.layout.count() == 2);
  CHECK(p.layout.cls_index == 0);
}
