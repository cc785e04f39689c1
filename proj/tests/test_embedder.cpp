#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>

#include "pyrec/embedder.hpp"
#include "pyrec/pyramid.hpp"
#include "pyrec/rng.hpp"
#include "support/oracles.hpp"

using namespace pyrec;

namespace {

EmbeddingTables tables(int d = 16, int vocab = 18, int text_len = 8, int patch_dim = 48) {
  Rng rng(41);
  return EmbeddingTables::init(d, vocab, text_len, patch_dim, rng);
}

}  // namespace

TEST_CASE("embed_text prepends [CLS] and applies position/type embeddings") {
  auto emb = tables();
  TokenSequence empty = embed_text(emb, {});
  CHECK(empty.size() == 1);
  CHECK(empty.kinds[0] == TokenKind::kCls);

  TokenSequence full = embed_text(emb, {1, 2, 3, 4, 5, 6, 7, 8});
  CHECK(full.size() == 9);

  CHECK_THROWS_AS(embed_text(emb, {99}), InputError);
  CHECK_THROWS_AS(embed_text(emb, std::vector<int>(9, 1)), InputError);

  // same id at two positions differs exactly by the position embeddings
  TokenSequence twice = embed_text(emb, {5, 5});
  for (int j = 0; j < 16; ++j) {
    const float diff = twice.feats.at(1, j) - twice.feats.at(2, j);
    const float pos_diff = emb.text_pos.at(1, j) - emb.text_pos.at(2, j);
    CHECK(std::fabs(diff - pos_diff) <= 1e-6f);
  }
}

TEST_CASE("pse is deterministic, d-wide, and rejects out-of-range inputs") {
  auto emb = tables();
  Tensor a = pse(emb, 0.25f, 0.75f, 0.5f);
  Tensor b = pse(emb, 0.25f, 0.75f, 0.5f);
  CHECK(a.numel() == 16);
  for (size_t i = 0; i < a.numel(); ++i) CHECK(a.at(i) == b.at(i));
  CHECK_THROWS_AS(pse(emb, -0.1f, 0.5f, 0.5f), InputError);
  CHECK_THROWS_AS(pse(emb, 0.1f, 0.5f, 1.5f), InputError);
}

TEST_CASE("pse separates every paper-preset coordinate triple") {
  Rng rng(77);
  auto emb = EmbeddingTables::init(64, 18, 8, 48, rng);
  std::vector<std::array<float, 3>> coords;
  for (int side : {160, 320, 640}) {
    const int g = side / 32;
    for (int r = 0; r < g; ++r)
      for (int c = 0; c < g; ++c)
        coords.push_back({(c + 0.5f) / g, (r + 0.5f) / g, 32.0f / side});
  }
  REQUIRE(coords.size() == 25 + 100 + 400);
  Tensor out = pse_rows(emb, coords);
  float min_gap = 1e30f;
  for (size_t i = 0; i < coords.size(); ++i)
    for (size_t j = i + 1; j < coords.size(); ++j) {
      float gap = 0.0f;
      for (int t = 0; t < 64; ++t)
        gap = std::max(gap, std::fabs(out.at(static_cast<int>(i), t) - out.at(static_cast<int>(j), t)));
      min_gap = std::min(min_gap, gap);
    }
  CHECK(min_gap > 1e-6f);
}

TEST_CASE("embed_patches adds projection, PSE and the image type embedding") {
  auto emb = tables(16, 18, 8, 4 * 4 * 3);
  Image img;
  img.h = img.w = 8;
  img.c = 3;
  img.data.assign(static_cast<size_t>(8) * 8 * 3, 0.0f);
  PatchSet ps = patchify(img, 4);
  TokenSequence seq = embed_patches(emb, ps);
  CHECK(seq.size() == 4);
  for (const auto& kind : seq.kinds) CHECK(kind == TokenKind::kPatch);

  // zero pixels: the token is exactly PSE(coords) + image type
  Tensor expected = add_row(pse_rows(emb, ps.coords), emb.image_type);
  for (size_t i = 0; i < seq.feats.numel(); ++i) CHECK(seq.feats.at(i) == expected.at(i));

  // equal pixels, different coords: difference equals the PSE difference
  Rng rng(5);
  Image img2;
  img2.h = img2.w = 8;
  img2.c = 3;
  img2.data.resize(static_cast<size_t>(8) * 8 * 3);
  for (int y = 0; y < 8; ++y)
    for (int x = 0; x < 8; ++x)
      for (int c = 0; c < 3; ++c) img2.at(y, x, c) = img2.at(y % 4, x % 4, c) = 0.0f;
  // write one patch pattern and copy it to all four patches
  std::vector<float> pattern(48);
  for (float& v : pattern) v = rng.uniform();
  PatchSet ps2 = patchify(img2, 4);
  auto flat = ps2.flat.mutable_data();
  for (int p = 0; p < 4; ++p)
    std::copy(pattern.begin(), pattern.end(), flat.begin() + p * 48);
  TokenSequence seq2 = embed_patches(emb, ps2);
  Tensor pse_out = pse_rows(emb, ps2.coords);
  for (int j = 0; j < 16; ++j) {
    const float diff = seq2.feats.at(0, j) - seq2.feats.at(3, j);
    const float pdiff = pse_out.at(0, j) - pse_out.at(3, j);
    CHECK(std::fabs(diff - pdiff) <= 1e-5f);
  }

  // width mismatch
  PatchSet bad = patchify(img, 8);
  CHECK_THROWS_AS(embed_patches(emb, bad), ConfigError);
}

TEST_CASE("append_reg adds one shared trailing token") {
  auto emb = tables();
  TokenSequence a = embed_text(emb, {1, 2});
  const int before = a.size();
  append_reg(emb, a);
  CHECK(a.size() == before + 1);
  CHECK(a.kinds.back() == TokenKind::kReg);

  // the reg embedding is shared: identical across independent sequences
  TokenSequence b = embed_text(emb, {3});
  append_reg(emb, b);
  for (int j = 0; j < 16; ++j)
    CHECK(a.feats.at(a.size() - 1, j) == b.feats.at(b.size() - 1, j));
}

TEST_CASE("const_token is one fixed fully-embedded row") {
  auto emb = tables();
  Tensor c1 = const_token(emb);
  Tensor c2 = const_token(emb);
  CHECK(c1.rows() == 1);
  CHECK(c1.cols() == 16);
  for (size_t i = 0; i < c1.numel(); ++i) CHECK(c1.at(i) == c2.at(i));
}
