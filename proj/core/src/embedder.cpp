#include "pyrec/embedder.hpp"

#include <string>

#include "pyrec/errors.hpp"

namespace pyrec {

namespace {

Tensor normal_param(Shape shape, float stddev, Rng& rng) {
  Tensor t = Tensor::zeros(std::move(shape), /*requires_grad=*/true);
  for (float& v : t.mutable_data()) v = stddev * rng.gauss();
  return t;
}

Tensor xavier_param(int fan_in, int fan_out, Rng& rng) {
  const float stddev = std::sqrt(2.0f / static_cast<float>(fan_in + fan_out));
  return normal_param({fan_in, fan_out}, stddev, rng);
}

}  // namespace

EmbeddingTables EmbeddingTables::init(int d, int vocab, int text_len, int patch_dim, Rng& rng) {
  EmbeddingTables e;
  e.word = normal_param({vocab, d}, 0.02f, rng);
  e.cls = normal_param({1, d}, 0.02f, rng);
  e.text_pos = normal_param({text_len + 1, d}, 0.02f, rng);
  e.text_type = normal_param({1, d}, 0.02f, rng);
  e.patch_proj = xavier_param(patch_dim, d, rng);
  e.image_type = normal_param({1, d}, 0.02f, rng);
  e.reg = normal_param({1, d}, 0.02f, rng);
  e.constant = normal_param({1, d}, 0.02f, rng);
  e.pse_w1 = xavier_param(3, d, rng);
  e.pse_b1 = Tensor::zeros({d}, true);
  e.pse_w2 = xavier_param(d, d, rng);
  e.pse_b2 = Tensor::zeros({d}, true);
  return e;
}

TokenSequence embed_text(const EmbeddingTables& emb, const std::vector<int>& ids) {
  const int vocab = emb.word.rows();
  const int max_len = emb.text_pos.rows() - 1;
  for (int id : ids)
    if (id < 0 || id >= vocab)
      throw InputError("embed_text: token id " + std::to_string(id) + " outside vocabulary");
  if (static_cast<int>(ids.size()) > max_len)
    throw InputError("embed_text: text longer than the configured maximum");

  TokenSequence seq;
  const int n = static_cast<int>(ids.size()) + 1;
  Tensor body = ids.empty() ? emb.cls : concat_rows({emb.cls, gather_rows(emb.word, ids)});
  Tensor pos = slice_rows(emb.text_pos, 0, n);
  seq.feats = add_row(add(body, pos), emb.text_type);
  seq.kinds.assign(static_cast<size_t>(n), TokenKind::kText);
  seq.kinds[0] = TokenKind::kCls;
  seq.coords.assign(static_cast<size_t>(n), {0.0f, 0.0f, 0.0f});
  return seq;
}

Tensor pse_rows(const EmbeddingTables& emb, std::span<const std::array<float, 3>> coords) {
  std::vector<float> flat;
  flat.reserve(coords.size() * 3);
  for (const auto& c : coords) {
    for (float v : c) {
      if (v < 0.0f || v > 1.0f)
        throw InputError("pse: coordinate " + std::to_string(v) + " outside [0,1]");
      flat.push_back(v);
    }
  }
  Tensor in = Tensor::from({static_cast<int>(coords.size()), 3}, std::move(flat));
  Tensor h = gelu(add_row(matmul(in, emb.pse_w1), emb.pse_b1));
  return add_row(matmul(h, emb.pse_w2), emb.pse_b2);
}

Tensor pse(const EmbeddingTables& emb, float cx, float cy, float s) {
  std::array<float, 3> c = {cx, cy, s};
  return pse_rows(emb, std::span<const std::array<float, 3>>(&c, 1));
}

TokenSequence embed_patches(const EmbeddingTables& emb, const PatchSet& patches) {
  if (patches.flat.cols() != emb.patch_proj.rows())
    throw ConfigError("embed_patches: patch width " + std::to_string(patches.flat.cols()) +
                      " != projection input " + std::to_string(emb.patch_proj.rows()));
  TokenSequence seq;
  Tensor projected = matmul(patches.flat, emb.patch_proj);
  Tensor spatial = pse_rows(emb, patches.coords);
  seq.feats = add_row(add(projected, spatial), emb.image_type);
  seq.kinds.assign(patches.coords.size(), TokenKind::kPatch);
  seq.coords = patches.coords;
  return seq;
}

void append_reg(const EmbeddingTables& emb, TokenSequence& seq) {
  Tensor reg_row = add(emb.reg, emb.image_type);
  seq.feats = seq.feats.defined() ? concat_rows({seq.feats, reg_row}) : reg_row;
  seq.kinds.push_back(TokenKind::kReg);
  seq.coords.push_back({0.0f, 0.0f, 0.0f});
}

Tensor const_token(const EmbeddingTables& emb) { return add(emb.constant, emb.image_type); }

}  // namespace pyrec
