#pragma once

#include <array>
#include <cstdint>
#include <span>
#include <vector>

#include "pyrec/pyramid.hpp"
#include "pyrec/rng.hpp"
#include "pyrec/tensor.hpp"

namespace pyrec {

enum class TokenKind : uint8_t { kText, kCls, kPatch, kReg, kConst };

/// Encoder-ready token block. Kinds partition the sequence; coords are
/// meaningful for patch tokens only.
struct TokenSequence {
  Tensor feats;  // [n x d]
  std::vector<TokenKind> kinds;
  std::vector<std::array<float, 3>> coords;

  int size() const { return static_cast<int>(kinds.size()); }
};

/// All learned embedding state: word table, special tokens, patch
/// projection, position-scale embedding (PSE) perceptron, type embeddings.
struct EmbeddingTables {
  Tensor word;        // [vocab x d]
  Tensor cls;         // [1 x d]
  Tensor text_pos;    // [(L+1) x d]
  Tensor text_type;   // [1 x d]
  Tensor patch_proj;  // [(P*P*C) x d], bias-free
  Tensor image_type;  // [1 x d]
  Tensor reg;         // [1 x d]
  Tensor constant;    // [1 x d], the learned replacement token
  Tensor pse_w1;      // [3 x d]
  Tensor pse_b1;      // [d]
  Tensor pse_w2;      // [d x d]
  Tensor pse_b2;      // [d]

  static EmbeddingTables init(int d, int vocab, int text_len, int patch_dim, Rng& rng);
};

/// [CLS] + word rows + positional + text type. Ids must be in-vocabulary.
TokenSequence embed_text(const EmbeddingTables& emb, const std::vector<int>& ids);

/// Position-scale embedding of one (cx, cy, s) in [0,1]^3.
Tensor pse(const EmbeddingTables& emb, float cx, float cy, float s);

/// PSE over a batch of coordinate triples, one row each.
Tensor pse_rows(const EmbeddingTables& emb, std::span<const std::array<float, 3>> coords);

/// Linear projection of flattened patches + PSE + image type embedding.
TokenSequence embed_patches(const EmbeddingTables& emb, const PatchSet& patches);

/// Appends the [REG] token (shared embedding + image type) as the last row.
void append_reg(const EmbeddingTables& emb, TokenSequence& seq);

/// The complete embedded constant token substituted for unselected patches.
/// Identical for every replaced position, which is what makes merged
/// attention exact.
Tensor const_token(const EmbeddingTables& emb);

}  // namespace pyrec
