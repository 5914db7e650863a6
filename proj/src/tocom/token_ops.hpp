#pragma once

// Token-set transformations applied between the attention and MLP blocks:
// bipartite soft matching, size-weighted merging, unmerging, and CLS-attention
// pruning. Everything here is a pure function of its inputs.

#include <cstddef>
#include <vector>

#include "tocom/autodiff.hpp"
#include "tocom/tensor.hpp"

namespace tocom {

// Bookkeeping for the tokens of one image.
struct TokenLayout {
  std::vector<int> sizes;                 // multiplicity of each current token
  std::vector<std::vector<int>> sources;  // original positions (sorted) represented by each token
  std::size_t cls_index = 0;
  std::size_t original_count = 0;  // patch count + 1

  static TokenLayout identity(std::size_t tokens);
  std::size_t count() const { return sizes.size(); }
  // Throws ValidationError if sizes/sources are inconsistent.
  void validate() const;
};

template <class T>
struct TokenState {
  Tensor<T> tokens;  // count x dim
  TokenLayout layout;
};

struct MergeEdge {
  std::size_t a = 0;  // token index in set A (removed)
  std::size_t b = 0;  // token index in set B (absorbs a)
  double similarity = 0.0;
};

struct MergePlan {
  std::size_t token_count = 0;  // tokens of the state the plan was derived from
  std::vector<std::size_t> set_a, set_b;
  std::vector<MergeEdge> edges;
  std::vector<std::size_t> survivors;    // kept token indices, original order
  std::vector<std::size_t> destination;  // token index -> index after merging
  std::size_t requested_r = 0;
  bool clamped = false;
};

// Plans applied since a reference layout; consumed by unmerge.
struct MergeStack {
  TokenLayout base;
  std::vector<MergePlan> plans;
};

// Cosine similarity of two key rows (0 when either row is all zero).
double cosine_similarity(const double* a, const double* b, std::size_t n);

// CLS is excluded; the remaining tokens alternate into A (even ordinal) and
// B (odd ordinal). Each A token links to its most similar B token (ties to the
// lower B index); the r strongest links are kept (ties to the lower A index).
// r is clamped to floor(non-CLS count / 2).
template <class T>
MergePlan bipartite_soft_matching(const Tensor<T>& keys, const TokenLayout& layout, std::size_t r);

// Plan that keeps every token.
MergePlan identity_plan(std::size_t tokens);

// Size-weighted mean of every token routed to the same destination.
ad::RowMix merge_mix(const TokenLayout& layout, const MergePlan& plan);
TokenLayout merged_layout(const TokenLayout& layout, const MergePlan& plan);

template <class T>
TokenState<T> apply_merge(const TokenState<T>& state, const MergePlan& plan);

// Broadcasts each current token back to every token of stack.base it absorbed.
// The result has stack.base's layout.
ad::RowMix unmerge_mix(const TokenLayout& current, const MergeStack& stack);

template <class T>
TokenState<T> unmerge(const TokenState<T>& state, const MergeStack& stack);

// Indices of the tokens kept after removing the r non-CLS tokens with the
// smallest CLS-attention score (ties remove the lower index first). r is
// clamped so that at least one non-CLS token survives.
template <class T>
std::vector<std::size_t> evit_keep(std::span<const T> cls_attention, const TokenLayout& layout, std::size_t r);

TokenLayout gathered_layout(const TokenLayout& layout, std::span<const std::size_t> keep);

template <class T>
TokenState<T> evit_prune(const TokenState<T>& state, std::span<const T> cls_attention, std::size_t r);

// Shifts a per-image mix into batch row space.
void append_mix(ad::RowMix& batch, const ad::RowMix& local, std::size_t in_offset);

}  // namespace tocom
