// Independent reference implementations the tests check the engine against.
// Nothing here shares code with the incremental/cached paths under test.

#pragma once

#include <cmath>
#include <vector>

#include "pyrec/attention.hpp"
#include "pyrec/model.hpp"
#include "pyrec/objectives.hpp"
#include "pyrec/rng.hpp"
#include "pyrec/tensor.hpp"

namespace oracles {

// Triple-loop matrix product accumulated in double.
inline std::vector<float> naive_matmul(const float* a, const float* b, int m, int k, int n) {
  std::vector<float> c(static_cast<size_t>(m) * n);
  for (int i = 0; i < m; ++i)
    for (int j = 0; j < n; ++j) {
      double acc = 0.0;
      for (int p = 0; p < k; ++p)
        acc += static_cast<double>(a[size_t(i) * k + p]) * static_cast<double>(b[size_t(p) * n + j]);
      c[size_t(i) * n + j] = static_cast<float>(acc);
    }
  return c;
}

// Single-head attention over a physically expanded sequence: key/value row j
// is repeated `repeat[j]` times before the softmax.
inline std::vector<float> attention_expanded(const std::vector<float>& q,
                                             const std::vector<float>& keys,
                                             const std::vector<float>& values, int d,
                                             const std::vector<int>& repeat) {
  const int n = static_cast<int>(keys.size()) / d;
  std::vector<float> ek, ev;
  for (int j = 0; j < n; ++j)
    for (int r = 0; r < repeat[static_cast<size_t>(j)]; ++r) {
      ek.insert(ek.end(), keys.begin() + size_t(j) * d, keys.begin() + size_t(j + 1) * d);
      ev.insert(ev.end(), values.begin() + size_t(j) * d, values.begin() + size_t(j + 1) * d);
    }
  const int m = static_cast<int>(ek.size()) / d;
  const float inv_sqrt = 1.0f / std::sqrt(static_cast<float>(d));
  std::vector<float> score(static_cast<size_t>(m));
  float mx = -1e30f;
  for (int j = 0; j < m; ++j) {
    float acc = 0.0f;
    for (int t = 0; t < d; ++t) acc += q[static_cast<size_t>(t)] * ek[size_t(j) * d + t];
    score[static_cast<size_t>(j)] = acc * inv_sqrt;
    mx = std::max(mx, score[static_cast<size_t>(j)]);
  }
  float denom = 0.0f;
  for (int j = 0; j < m; ++j) {
    score[static_cast<size_t>(j)] = std::exp(score[static_cast<size_t>(j)] - mx);
    denom += score[static_cast<size_t>(j)];
  }
  std::vector<float> out(static_cast<size_t>(d), 0.0f);
  for (int j = 0; j < m; ++j) {
    const float a = score[static_cast<size_t>(j)] / denom;
    for (int t = 0; t < d; ++t) out[static_cast<size_t>(t)] += a * ev[size_t(j) * d + t];
  }
  return out;
}

// Rasterized box areas on a G x G grid of cell centers. Boxes whose corners
// lie on the grid are counted exactly.
struct RasterPair {
  double iou;
  double giou;
};

inline RasterPair raster_iou_giou(const pyrec::BBox& a, const pyrec::BBox& b, int grid = 512) {
  const auto ca = a.corners();
  const auto cb = b.corners();
  auto inside = [](const std::array<float, 4>& c, double x, double y) {
    return x >= c[0] && x <= c[2] && y >= c[1] && y <= c[3];
  };
  const std::array<float, 4> hull = {std::min(ca[0], cb[0]), std::min(ca[1], cb[1]),
                                     std::max(ca[2], cb[2]), std::max(ca[3], cb[3])};
  long inter = 0, uni = 0, hull_n = 0;
  for (int i = 0; i < grid; ++i) {
    const double y = (i + 0.5) / grid;
    for (int j = 0; j < grid; ++j) {
      const double x = (j + 0.5) / grid;
      const bool in_a = inside(ca, x, y);
      const bool in_b = inside(cb, x, y);
      if (in_a && in_b) ++inter;
      if (in_a || in_b) ++uni;
      if (inside(hull, x, y)) ++hull_n;
    }
  }
  RasterPair out{};
  out.iou = uni == 0 ? 0.0 : static_cast<double>(inter) / uni;
  out.giou = hull_n == 0 ? out.iou
                         : out.iou - static_cast<double>(hull_n - uni) / hull_n;
  return out;
}

// Full-sequence reference forward: the whole token sequence runs through
// every layer at once under a block-visibility mask, instead of the
// incremental cached path.
inline pyrec::Tensor reference_encoder(const pyrec::Model& m, pyrec::Tensor x,
                                       const pyrec::AttnMask& mask) {
  using namespace pyrec;
  for (const auto& lp : m.layers) {
    Tensor xn = layer_norm(x, lp.ln1_g, lp.ln1_b);
    Tensor q = add_row(matmul(xn, lp.wq), lp.bq);
    Tensor k = add_row(matmul(xn, lp.wk), lp.bk);
    Tensor v = add_row(matmul(xn, lp.wv), lp.bv);
    Tensor attn = masked_attention(q, k, v, mask, m.cfg.heads);
    x = add(x, add_row(matmul(attn, lp.wo), lp.bo));
    Tensor x2n = layer_norm(x, lp.ln2_g, lp.ln2_b);
    Tensor h = gelu(add_row(matmul(x2n, lp.ffn_w1), lp.ffn_b1));
    x = add(x, add_row(matmul(h, lp.ffn_w2), lp.ffn_b2));
  }
  return x;
}

inline pyrec::Tensor random_tensor(pyrec::Shape shape, pyrec::Rng& rng, float lo = -1.0f,
                                   float hi = 1.0f, bool requires_grad = false) {
  pyrec::Tensor t = pyrec::Tensor::zeros(std::move(shape), requires_grad);
  for (float& v : t.mutable_data()) v = rng.uniform(lo, hi);
  return t;
}

}  // namespace oracles
