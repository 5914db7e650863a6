#include "tocom/token_ops.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

namespace tocom {

TokenLayout TokenLayout::identity(std::size_t tokens) {
  TokenLayout l;
  l.sizes.assign(tokens, 1);
  l.sources.resize(tokens);
  for (std::size_t i = 0; i < tokens; ++i) l.sources[i] = {static_cast<int>(i)};
  l.cls_index = 0;
  l.original_count = tokens;
  return l;
}

void TokenLayout::validate() const {
  if (sources.size() != sizes.size()) throw ValidationError("token layout: sizes/sources length mismatch");
  if (cls_index >= sizes.size()) throw ValidationError("token layout: CLS index out of range");
  if (sizes[cls_index] != 1) throw ValidationError("token layout: CLS size must be 1");
  for (std::size_t i = 0; i < sizes.size(); ++i) {
    if (sizes[i] < 1) throw ValidationError("token layout: non-positive size");
    if (sources[i].empty()) throw ValidationError("token layout: empty source set");
  }
}

double cosine_similarity(const double* a, const double* b, std::size_t n) {
  double dot = 0, na = 0, nb = 0;
  for (std::size_t i = 0; i < n; ++i) {
    dot += a[i] * b[i];
    na += a[i] * a[i];
    nb += b[i] * b[i];
  }
  if (na == 0 || nb == 0) return 0.0;
  return dot / (std::sqrt(na) * std::sqrt(nb));
}

MergePlan identity_plan(std::size_t tokens) {
  MergePlan plan;
  plan.token_count = tokens;
  plan.survivors.resize(tokens);
  std::iota(plan.survivors.begin(), plan.survivors.end(), std::size_t{0});
  plan.destination = plan.survivors;
  return plan;
}

template <class T>
MergePlan bipartite_soft_matching(const Tensor<T>& keys, const TokenLayout& layout, std::size_t r) {
  const std::size_t n = layout.count();
  if (keys.rows() != n)
    throw ShapeError("bipartite_soft_matching: " + std::to_string(keys.rows()) + " key rows for " +
                     std::to_string(n) + " tokens");
  MergePlan plan;
  plan.token_count = n;
  plan.requested_r = r;
  for (std::size_t i = 0, ordinal = 0; i < n; ++i) {
    if (i == layout.cls_index) continue;
    (ordinal++ % 2 == 0 ? plan.set_a : plan.set_b).push_back(i);
  }
  const std::size_t limit = (plan.set_a.size() + plan.set_b.size()) / 2;
  const std::size_t r_eff = std::min(r, limit);
  plan.clamped = r_eff != r;

  if (r_eff > 0) {
    const std::size_t k = keys.cols();
    std::vector<double> kd(keys.numel());
    for (std::size_t i = 0; i < kd.size(); ++i) kd[i] = static_cast<double>(keys[i]);
    std::vector<MergeEdge> best;
    best.reserve(plan.set_a.size());
    for (std::size_t a : plan.set_a) {
      MergeEdge e{a, plan.set_b.front(), -std::numeric_limits<double>::infinity()};
      for (std::size_t b : plan.set_b) {
        const double s = cosine_similarity(&kd[a * k], &kd[b * k], k);
        if (s > e.similarity) e = {a, b, s};
      }
      best.push_back(e);
    }
    std::stable_sort(best.begin(), best.end(),
                     [](const MergeEdge& x, const MergeEdge& y) { return x.similarity > y.similarity; });
    best.resize(r_eff);
    plan.edges = std::move(best);
  }

  std::vector<bool> removed(n, false);
  for (const auto& e : plan.edges) removed[e.a] = true;
  std::vector<std::size_t> post(n, 0);
  for (std::size_t i = 0; i < n; ++i)
    if (!removed[i]) {
      post[i] = plan.survivors.size();
      plan.survivors.push_back(i);
    }
  plan.destination.resize(n);
  for (std::size_t i = 0; i < n; ++i) plan.destination[i] = post[i];
  for (const auto& e : plan.edges) plan.destination[e.a] = post[e.b];
  return plan;
}

namespace {

void check_plan(const TokenLayout& layout, const MergePlan& plan) {
  if (plan.token_count != layout.count() || plan.destination.size() != layout.count())
    throw ValidationError("merge plan was derived for " + std::to_string(plan.token_count) + " tokens, state has " +
                          std::to_string(layout.count()));
}

}  // namespace

ad::RowMix merge_mix(const TokenLayout& layout, const MergePlan& plan) {
  check_plan(layout, plan);
  ad::RowMix mix;
  mix.in_rows = layout.count();
  mix.rows.resize(plan.survivors.size());
  std::vector<double> total(plan.survivors.size(), 0.0);
  for (std::size_t i = 0; i < layout.count(); ++i) total[plan.destination[i]] += layout.sizes[i];
  for (std::size_t i = 0; i < layout.count(); ++i) {
    const std::size_t d = plan.destination[i];
    mix.rows[d].push_back({static_cast<std::uint32_t>(i), layout.sizes[i] / total[d]});
  }
  return mix;
}

TokenLayout merged_layout(const TokenLayout& layout, const MergePlan& plan) {
  check_plan(layout, plan);
  TokenLayout out;
  out.original_count = layout.original_count;
  out.sizes.assign(plan.survivors.size(), 0);
  out.sources.resize(plan.survivors.size());
  for (std::size_t i = 0; i < layout.count(); ++i) {
    const std::size_t d = plan.destination[i];
    out.sizes[d] += layout.sizes[i];
    out.sources[d].insert(out.sources[d].end(), layout.sources[i].begin(), layout.sources[i].end());
  }
  for (auto& s : out.sources) std::sort(s.begin(), s.end());
  out.cls_index = plan.destination[layout.cls_index];
  return out;
}

template <class T>
TokenState<T> apply_merge(const TokenState<T>& state, const MergePlan& plan) {
  if (plan.edges.empty()) {
    check_plan(state.layout, plan);
    return state;
  }
  auto mixed = ad::mix_rows(ad::Var<T>::constant(state.tokens), merge_mix(state.layout, plan));
  return {mixed.value(), merged_layout(state.layout, plan)};
}

ad::RowMix unmerge_mix(const TokenLayout& current, const MergeStack& stack) {
  const std::size_t base = stack.base.count();
  // Track where each base token ended up after every recorded plan.
  std::vector<std::size_t> where(base);
  std::iota(where.begin(), where.end(), std::size_t{0});
  std::size_t count = base;
  for (const auto& plan : stack.plans) {
    if (plan.token_count != count) throw ValidationError("unmerge: plan stack does not chain");
    for (auto& w : where) w = plan.destination[w];
    count = plan.survivors.size();
  }
  if (count != current.count())
    throw ValidationError("unmerge: missing plan record (" + std::to_string(current.count()) + " tokens, stack ends at " +
                          std::to_string(count) + ")");
  ad::RowMix mix;
  mix.in_rows = current.count();
  mix.rows.resize(base);
  for (std::size_t i = 0; i < base; ++i) mix.rows[i] = {{static_cast<std::uint32_t>(where[i]), 1.0}};
  return mix;
}

template <class T>
TokenState<T> unmerge(const TokenState<T>& state, const MergeStack& stack) {
  auto out = ad::mix_rows(ad::Var<T>::constant(state.tokens), unmerge_mix(state.layout, stack));
  return {out.value(), stack.base};
}

template <class T>
std::vector<std::size_t> evit_keep(std::span<const T> cls_attention, const TokenLayout& layout, std::size_t r) {
  const std::size_t n = layout.count();
  if (cls_attention.size() != n) throw ShapeError("evit_prune: score length does not match token count");
  std::vector<std::size_t> candidates;
  for (std::size_t i = 0; i < n; ++i)
    if (i != layout.cls_index) candidates.push_back(i);
  const std::size_t r_eff = candidates.empty() ? 0 : std::min(r, candidates.size() - 1);
  std::stable_sort(candidates.begin(), candidates.end(),
                   [&](std::size_t x, std::size_t y) { return cls_attention[x] < cls_attention[y]; });
  std::vector<bool> drop(n, false);
  for (std::size_t i = 0; i < r_eff; ++i) drop[candidates[i]] = true;
  std::vector<std::size_t> keep;
  for (std::size_t i = 0; i < n; ++i)
    if (!drop[i]) keep.push_back(i);
  return keep;
}

TokenLayout gathered_layout(const TokenLayout& layout, std::span<const std::size_t> keep) {
  TokenLayout out;
  out.original_count = layout.original_count;
  for (std::size_t j = 0; j < keep.size(); ++j) {
    const std::size_t i = keep[j];
    if (i == layout.cls_index) out.cls_index = j;
    out.sizes.push_back(layout.sizes[i]);
    out.sources.push_back(layout.sources[i]);
  }
  return out;
}

template <class T>
TokenState<T> evit_prune(const TokenState<T>& state, std::span<const T> cls_attention, std::size_t r) {
  auto keep = evit_keep(cls_attention, state.layout, r);
  if (keep.size() == state.layout.count()) return state;
  auto out = ad::gather_rows(ad::Var<T>::constant(state.tokens), std::span<const std::size_t>(keep));
  return {out.value(), gathered_layout(state.layout, keep)};
}

void append_mix(ad::RowMix& batch, const ad::RowMix& local, std::size_t in_offset) {
  for (const auto& row : local.rows) {
    auto& dst = batch.rows.emplace_back();
    dst.reserve(row.size());
    for (const auto& [src, w] : row) dst.push_back({static_cast<std::uint32_t>(src + in_offset), w});
  }
}

#define TOCOM_TOKEN_INSTANTIATE(T)                                                                       \
  template MergePlan bipartite_soft_matching(const Tensor<T>&, const TokenLayout&, std::size_t);          \
  template TokenState<T> apply_merge(const TokenState<T>&, const MergePlan&);                             \
  template TokenState<T> unmerge(const TokenState<T>&, const MergeStack&);                                \
  template std::vector<std::size_t> evit_keep(std::span<const T>, const TokenLayout&, std::size_t);       \
  template TokenState<T> evit_prune(const TokenState<T>&, std::span<const T>, std::size_t);

TOCOM_TOKEN_INSTANTIATE(float)
TOCOM_TOKEN_INSTANTIATE(double)

}  // namespace tocom
