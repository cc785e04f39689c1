#include "pyrec/attention.hpp"

#include <cmath>
#include <cstring>
#include <string>

#include "pyrec/errors.hpp"

namespace pyrec {

namespace {

struct SegView {
  const float* k;
  const float* v;
  int n;
  const float* mult;  // nullable
};

void check_segments(const Tensor& q, std::span<const AttnSegment> segments, int heads) {
  if (q.shape().size() != 2) throw ShapeError("attention: q must be 2-D");
  const int d = q.cols();
  if (heads <= 0 || d % heads != 0)
    throw ConfigError("attention: width " + std::to_string(d) + " not divisible by " +
                      std::to_string(heads) + " heads");
  if (segments.empty()) throw ShapeError("attention: no key segments");
  for (const auto& s : segments) {
    if (s.keys.cols() != d || s.values.cols() != d || s.keys.rows() != s.values.rows())
      throw ShapeError("attention: segment shape mismatch");
    if (!s.mult.empty()) {
      if (static_cast<int>(s.mult.size()) != s.keys.rows())
        throw ShapeError("attention: multiplicity length mismatch");
      for (float m : s.mult)
        if (m < 1.0f) throw ContractError("attention: key multiplicity must be >= 1");
    }
  }
}

}  // namespace

Tensor multihead_attention(const Tensor& q, std::span<const AttnSegment> segments, int heads) {
  check_segments(q, segments, heads);
  const int n_q = q.rows();
  const int d = q.cols();
  const int dh = d / heads;
  const float inv_sqrt = 1.0f / std::sqrt(static_cast<float>(dh));

  std::vector<SegView> views;
  views.reserve(segments.size());
  int total_keys = 0;
  for (const auto& s : segments) {
    views.push_back({s.keys.data().data(), s.values.data().data(), s.keys.rows(),
                     s.mult.empty() ? nullptr : s.mult.data()});
    total_keys += s.keys.rows();
  }

  // Score offsets log(mult), flattened over the concatenated key rows.
  std::vector<float> offsets(static_cast<size_t>(total_keys), 0.0f);
  {
    size_t at = 0;
    for (const auto& view : views) {
      for (int j = 0; j < view.n; ++j, ++at)
        if (view.mult && view.mult[j] != 1.0f) offsets[at] = std::log(view.mult[j]);
    }
  }

  const bool build_graph = [&] {
    if (!grad_enabled()) return false;
    if (q.requires_grad()) return true;
    for (const auto& s : segments)
      if (s.keys.requires_grad() || s.values.requires_grad()) return true;
    return false;
  }();

  if (auto* c = mac_counter())
    c->macs += 2ull * uint64_t(n_q) * uint64_t(total_keys) * uint64_t(d);

  std::vector<float> out(static_cast<size_t>(n_q) * d, 0.0f);
  std::vector<float> probs;  // [n_q x heads x total_keys], saved when training
  if (build_graph) probs.resize(static_cast<size_t>(n_q) * heads * total_keys);
  std::vector<float> score(static_cast<size_t>(total_keys));

  const float* qd = q.data().data();
  for (int i = 0; i < n_q; ++i) {
    for (int h = 0; h < heads; ++h) {
      const float* qv = qd + size_t(i) * d + size_t(h) * dh;
      float mx = -std::numeric_limits<float>::infinity();
      size_t at = 0;
      for (const auto& view : views) {
        for (int j = 0; j < view.n; ++j, ++at) {
          const float* kv = view.k + size_t(j) * d + size_t(h) * dh;
          float acc = 0.0f;
          for (int t = 0; t < dh; ++t) acc += qv[t] * kv[t];
          score[at] = acc * inv_sqrt + offsets[at];
          mx = std::max(mx, score[at]);
        }
      }
      float denom = 0.0f;
      for (int j = 0; j < total_keys; ++j) {
        score[static_cast<size_t>(j)] = std::exp(score[static_cast<size_t>(j)] - mx);
        denom += score[static_cast<size_t>(j)];
      }
      const float inv_denom = 1.0f / denom;
      float* ov = out.data() + size_t(i) * d + size_t(h) * dh;
      at = 0;
      for (const auto& view : views) {
        for (int j = 0; j < view.n; ++j, ++at) {
          const float a = score[at] * inv_denom;
          if (build_graph) probs[(size_t(i) * heads + h) * total_keys + at] = a;
          const float* vv = view.v + size_t(j) * d + size_t(h) * dh;
          for (int t = 0; t < dh; ++t) ov[t] += a * vv[t];
        }
      }
    }
  }

  auto node = std::make_shared<Node>();
  node->shape = {n_q, d};
  node->data = std::move(out);
  Tensor result(node);
  if (!build_graph) return result;

  struct SegGrad {
    Node* kn;
    Node* vn;
    bool kw, vw;
    int n;
    std::vector<float> ksave, vsave;
  };
  std::vector<SegGrad> seg_grads;
  seg_grads.reserve(segments.size());
  node->parents.push_back(q.node());
  for (const auto& s : segments) {
    SegGrad sg;
    sg.kn = s.keys.node().get();
    sg.vn = s.values.node().get();
    sg.kw = s.keys.requires_grad();
    sg.vw = s.values.requires_grad();
    sg.n = s.keys.rows();
    sg.ksave.assign(s.keys.data().begin(), s.keys.data().end());
    sg.vsave.assign(s.values.data().begin(), s.values.data().end());
    seg_grads.push_back(std::move(sg));
    node->parents.push_back(s.keys.node());
    node->parents.push_back(s.values.node());
  }
  node->requires_grad = true;

  Node* qn = q.node().get();
  const bool qw = q.requires_grad();
  std::vector<float> qsave(q.data().begin(), q.data().end());
  node->backward = [qn, qw, n_q, d, dh, heads, inv_sqrt, total_keys, qsave = std::move(qsave),
                    probs = std::move(probs), seg_grads = std::move(seg_grads)](
                       const std::vector<float>& gout, GradMap& gm) {
    std::vector<float>* gq = qw ? &gm.at(qn, size_t(n_q) * d) : nullptr;
    std::vector<std::vector<float>*> gk(seg_grads.size(), nullptr);
    std::vector<std::vector<float>*> gv(seg_grads.size(), nullptr);
    for (size_t s = 0; s < seg_grads.size(); ++s) {
      if (seg_grads[s].kw) gk[s] = &gm.at(seg_grads[s].kn, seg_grads[s].ksave.size());
      if (seg_grads[s].vw) gv[s] = &gm.at(seg_grads[s].vn, seg_grads[s].vsave.size());
    }
    std::vector<float> da(static_cast<size_t>(total_keys));
    for (int i = 0; i < n_q; ++i) {
      for (int h = 0; h < heads; ++h) {
        const float* go = gout.data() + size_t(i) * d + size_t(h) * dh;
        const float* pr = probs.data() + (size_t(i) * heads + h) * total_keys;
        // dA_j = gout . v_j ; ds_j = a_j (dA_j - sum a dA)
        float mix = 0.0f;
        size_t at = 0;
        for (const auto& sg : seg_grads) {
          for (int j = 0; j < sg.n; ++j, ++at) {
            const float* vv = sg.vsave.data() + size_t(j) * d + size_t(h) * dh;
            float acc = 0.0f;
            for (int t = 0; t < dh; ++t) acc += go[t] * vv[t];
            da[at] = acc;
            mix += pr[at] * acc;
          }
        }
        const float* qv = qsave.data() + size_t(i) * d + size_t(h) * dh;
        float* gqv = gq ? gq->data() + size_t(i) * d + size_t(h) * dh : nullptr;
        at = 0;
        for (size_t s = 0; s < seg_grads.size(); ++s) {
          const auto& sg = seg_grads[s];
          for (int j = 0; j < sg.n; ++j, ++at) {
            const float a = pr[at];
            const float ds = a * (da[at] - mix) * inv_sqrt;
            const float* kv = sg.ksave.data() + size_t(j) * d + size_t(h) * dh;
            if (gqv)
              for (int t = 0; t < dh; ++t) gqv[t] += ds * kv[t];
            if (gk[s]) {
              float* gkv = gk[s]->data() + size_t(j) * d + size_t(h) * dh;
              for (int t = 0; t < dh; ++t) gkv[t] += ds * qv[t];
            }
            if (gv[s]) {
              float* gvv = gv[s]->data() + size_t(j) * d + size_t(h) * dh;
              for (int t = 0; t < dh; ++t) gvv[t] += a * go[t];
            }
          }
        }
      }
    }
  };
  return result;
}

std::vector<float> merged_attention(std::span<const float> q, std::span<const float> keys,
                                    std::span<const float> values, int d_head, float n_const) {
  if (d_head <= 0 || q.size() != static_cast<size_t>(d_head))
    throw ShapeError("merged_attention: query width mismatch");
  if (keys.size() != values.size() || keys.size() % static_cast<size_t>(d_head) != 0)
    throw ShapeError("merged_attention: key/value layout mismatch");
  const int n = static_cast<int>(keys.size()) / d_head;
  if (n < 1) throw ShapeError("merged_attention: empty key list");
  if (n_const < 1.0f)
    throw ContractError("merged_attention: constant entry with multiplicity < 1 must be dropped");

  // Padding-column construction: scale the query, append 1; append a key
  // column that is zero except log(n_const) on the (last) constant row.
  const float inv_sqrt = 1.0f / std::sqrt(static_cast<float>(d_head));
  std::vector<float> q_pad(static_cast<size_t>(d_head) + 1);
  for (int t = 0; t < d_head; ++t) q_pad[static_cast<size_t>(t)] = q[static_cast<size_t>(t)] * inv_sqrt;
  q_pad[static_cast<size_t>(d_head)] = 1.0f;

  std::vector<float> k_pad(static_cast<size_t>(n) * (d_head + 1), 0.0f);
  for (int j = 0; j < n; ++j)
    std::memcpy(k_pad.data() + size_t(j) * (d_head + 1), keys.data() + size_t(j) * d_head,
                sizeof(float) * static_cast<size_t>(d_head));
  k_pad[size_t(n - 1) * (d_head + 1) + d_head] = std::log(n_const);

  std::vector<float> score(static_cast<size_t>(n));
  float mx = -std::numeric_limits<float>::infinity();
  for (int j = 0; j < n; ++j) {
    const float* kv = k_pad.data() + size_t(j) * (d_head + 1);
    float acc = 0.0f;
    for (int t = 0; t <= d_head; ++t) acc += q_pad[static_cast<size_t>(t)] * kv[t];
    score[static_cast<size_t>(j)] = acc;
    mx = std::max(mx, acc);
  }
  float denom = 0.0f;
  for (int j = 0; j < n; ++j) {
    score[static_cast<size_t>(j)] = std::exp(score[static_cast<size_t>(j)] - mx);
    denom += score[static_cast<size_t>(j)];
  }
  std::vector<float> out(static_cast<size_t>(d_head), 0.0f);
  for (int j = 0; j < n; ++j) {
    const float a = score[static_cast<size_t>(j)] / denom;
    const float* vv = values.data() + size_t(j) * d_head;
    for (int t = 0; t < d_head; ++t) out[static_cast<size_t>(t)] += a * vv[t];
  }
  return out;
}

Tensor masked_attention(const Tensor& q, const Tensor& k, const Tensor& v, const AttnMask& mask,
                        int heads) {
  if (q.cols() != k.cols() || k.shape() != v.shape())
    throw ShapeError("masked_attention: shape mismatch");
  if (mask.query_block.size() != static_cast<size_t>(q.rows()) ||
      mask.key_block.size() != static_cast<size_t>(k.rows()))
    throw ShapeError("masked_attention: mask length mismatch");
  const int d = q.cols();
  if (d % heads != 0) throw ConfigError("masked_attention: width not divisible by heads");
  const int dh = d / heads;
  const int n_q = q.rows(), n_k = k.rows();
  const float inv_sqrt = 1.0f / std::sqrt(static_cast<float>(dh));

  std::vector<float> out(static_cast<size_t>(n_q) * d, 0.0f);
  std::vector<float> score(static_cast<size_t>(n_k));
  const float* qd = q.data().data();
  const float* kd = k.data().data();
  const float* vd = v.data().data();
  for (int i = 0; i < n_q; ++i) {
    for (int h = 0; h < heads; ++h) {
      const float* qv = qd + size_t(i) * d + size_t(h) * dh;
      float mx = -std::numeric_limits<float>::infinity();
      for (int j = 0; j < n_k; ++j) {
        if (!mask.allowed(static_cast<size_t>(i), static_cast<size_t>(j))) continue;
        const float* kv = kd + size_t(j) * d + size_t(h) * dh;
        float acc = 0.0f;
        for (int t = 0; t < dh; ++t) acc += qv[t] * kv[t];
        score[static_cast<size_t>(j)] = acc * inv_sqrt;
        mx = std::max(mx, score[static_cast<size_t>(j)]);
      }
      float denom = 0.0f;
      for (int j = 0; j < n_k; ++j) {
        if (!mask.allowed(static_cast<size_t>(i), static_cast<size_t>(j))) {
          score[static_cast<size_t>(j)] = 0.0f;
          continue;
        }
        score[static_cast<size_t>(j)] = std::exp(score[static_cast<size_t>(j)] - mx);
        denom += score[static_cast<size_t>(j)];
      }
      float* ov = out.data() + size_t(i) * d + size_t(h) * dh;
      for (int j = 0; j < n_k; ++j) {
        const float a = score[static_cast<size_t>(j)] / denom;
        if (a == 0.0f) continue;
        const float* vv = vd + size_t(j) * d + size_t(h) * dh;
        for (int t = 0; t < dh; ++t) ov[t] += a * vv[t];
      }
    }
  }
  return Tensor::from({n_q, d}, std::move(out));
}

size_t KVCache::entry_count(int layer) const {
  size_t n = 0;
  for (const auto& s : layers_[static_cast<size_t>(layer)]) n += static_cast<size_t>(s.entries());
  return n;
}

void KVCache::append_segment(int layer, int segment_index, CacheSegment seg) {
  if (layer < 0 || layer >= layers()) throw ContractError("append_segment: bad layer");
  auto& segs = layers_[static_cast<size_t>(layer)];
  if (segment_index != static_cast<int>(segs.size()))
    throw ContractError("append_segment: segment " + std::to_string(segment_index) +
                        " appended out of order (expected " + std::to_string(segs.size()) + ")");
  if (seg.has_const() && seg.const_mult < 1.0f)
    throw ContractError("append_segment: constant entry with multiplicity < 1");
  if (!seg.has_const() && seg.const_mult != 0.0f)
    throw ContractError("append_segment: multiplicity without a constant entry");
  segs.push_back(std::move(seg));
}

std::vector<AttnSegment> attend_list(const KVCache& cache, int layer, AttnSegment current) {
  std::vector<AttnSegment> list;
  for (const auto& seg : cache.segments(layer)) {
    if (seg.rows() > 0) list.push_back({seg.keys, seg.values, {}});
    if (seg.has_const())
      list.push_back({seg.const_key, seg.const_value, {seg.const_mult}});
  }
  list.push_back(std::move(current));
  return list;
}

}  // namespace pyrec
