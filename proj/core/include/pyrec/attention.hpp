#pragma once

#include <span>
#include <vector>

#include "pyrec/tensor.hpp"

namespace pyrec {

/// One block of keys/values visible to the current queries. `mult` gives a
/// per-row key multiplicity: a row standing for m identical tokens gets its
/// attention score offset by log(m), which reproduces the softmax of the
/// physically expanded sequence exactly. Empty mult means all ones.
struct AttnSegment {
  Tensor keys;    // [n x d]
  Tensor values;  // [n x d]
  std::vector<float> mult;
};

/// Multi-head scaled dot-product attention of `q` against the concatenation
/// of all segments (scores q.k/sqrt(d_head) + log mult). Gradients flow into
/// q and into any segment tensor that requires them; constant segments stay
/// constant.
Tensor multihead_attention(const Tensor& q, std::span<const AttnSegment> segments, int heads);

/// Single-head attention over a key list whose LAST row is a merged constant
/// entry standing for `n_const` identical tokens, implemented with the
/// padding-column trick: the query gains a trailing 1, keys gain a trailing
/// column of zeros except log(n_const) on the constant row.
/// Requires n_const >= 1; a present entry with multiplicity zero is a
/// contract violation (the entry should have been dropped).
std::vector<float> merged_attention(std::span<const float> q, std::span<const float> keys,
                                    std::span<const float> values, int d_head, float n_const);

/// Block-structured visibility for full-sequence evaluation: a query in
/// block b may attend to keys in blocks <= b. Block 0 is text, block l+1 is
/// pyramid scale l.
struct AttnMask {
  std::vector<int> query_block;
  std::vector<int> key_block;

  bool allowed(size_t q, size_t k) const { return key_block[k] <= query_block[q]; }
};

/// Reference full-sequence path: one attention over the whole token sequence
/// under `mask`. Shares no code with the incremental cached path.
Tensor masked_attention(const Tensor& q, const Tensor& k, const Tensor& v, const AttnMask& mask,
                        int heads);

/// Per-layer, per-iteration key/value store. Segments are append-only and
/// immutable once appended.
struct CacheSegment {
  Tensor keys;       // [n x d] selected-token rows (and [REG]); text rows for segment 0
  Tensor values;     // [n x d]
  Tensor const_key;  // [1 x d] merged constant entry, undefined if none
  Tensor const_value;
  float const_mult = 0.0f;

  bool has_const() const { return const_key.defined(); }
  int rows() const { return keys.defined() ? keys.rows() : 0; }
  int entries() const { return rows() + (has_const() ? 1 : 0); }
};

class KVCache {
 public:
  KVCache() = default;
  explicit KVCache(int layers) : layers_(static_cast<size_t>(layers)) {}

  int layers() const { return static_cast<int>(layers_.size()); }
  const std::vector<CacheSegment>& segments(int layer) const {
    return layers_[static_cast<size_t>(layer)];
  }
  int completed(int layer) const {
    return static_cast<int>(layers_[static_cast<size_t>(layer)].size());
  }
  size_t entry_count(int layer) const;

  /// Appends the segment produced by iteration `segment_index` (0 = text,
  /// l+1 = scale l). Out-of-order or repeated appends are contract errors,
  /// as is a constant entry with multiplicity < 1.
  void append_segment(int layer, int segment_index, CacheSegment seg);

 private:
  std::vector<std::vector<CacheSegment>> layers_;
};

/// Flattens a layer's cached segments (constant entries included) and the
/// current block into the attention segment list.
std::vector<AttnSegment> attend_list(const KVCache& cache, int layer, AttnSegment current);

}  // namespace pyrec
