#include "pyrec/selector.hpp"

#include <cmath>
#include <string>

#include "pyrec/errors.hpp"

namespace pyrec {

namespace {

float stable_sigmoid(float x) {
  if (x >= 0.0f) return 1.0f / (1.0f + std::exp(-x));
  const float e = std::exp(x);
  return e / (1.0f + e);
}

float sharp_sigmoid_df(float x) {
  const float raw = 1.2f * stable_sigmoid(x) - 0.1f;
  if (raw <= 0.0f || raw >= 1.0f) return 0.0f;
  const float s = stable_sigmoid(x);
  return 1.2f * s * (1.0f - s);
}

}  // namespace

float sharp_sigmoid_value(float x) {
  const float raw = 1.2f * stable_sigmoid(x) - 0.1f;
  return raw < 0.0f ? 0.0f : (raw > 1.0f ? 1.0f : raw);
}

Tensor sharp_sigmoid(const Tensor& x) {
  for (float v : x.data()) {
    const float raw = 1.2f * stable_sigmoid(v) - 0.1f;
    trace_branch(raw <= 0.0f ? 0 : (raw >= 1.0f ? 2 : 1));
  }
  return map_unary(x, sharp_sigmoid_value, sharp_sigmoid_df);
}

SelectionSample sample_selection(const Tensor& logits, ScanMode mode, const NoiseSource& noise,
                                 int level, BranchForce force) {
  const int n = static_cast<int>(logits.numel());
  SelectionSample out;
  out.records.resize(static_cast<size_t>(n));
  auto ld = logits.data();

  if (mode == ScanMode::kEval) {
    for (int i = 0; i < n; ++i) {
      auto& rec = out.records[static_cast<size_t>(i)];
      rec.logit = ld[static_cast<size_t>(i)];
      rec.noise = 0.0f;
      rec.branch_draw = 0.0f;
      rec.soft = sharp_sigmoid_value(rec.logit);
      rec.hard = rec.logit >= 0.0f ? 1.0f : 0.0f;
      rec.s = rec.hard;
      rec.used_hard = true;
    }
    return out;
  }

  std::vector<float> noise_vals(static_cast<size_t>(n));
  std::vector<float> forward(static_cast<size_t>(n));
  for (int i = 0; i < n; ++i) {
    auto& rec = out.records[static_cast<size_t>(i)];
    rec.logit = ld[static_cast<size_t>(i)];
    rec.noise = noise.gauss(level, i);
    rec.branch_draw = noise.uniform(level, i);
    noise_vals[static_cast<size_t>(i)] = rec.noise;
    const float rn = rec.logit + rec.noise;
    rec.soft = sharp_sigmoid_value(rn);
    rec.hard = rn >= 0.0f ? 1.0f : 0.0f;
    bool use_hard;
    if (mode == ScanMode::kSoft || force == BranchForce::kSoft) {
      use_hard = false;
    } else if (force == BranchForce::kHard) {
      use_hard = true;
    } else {
      use_hard = rec.branch_draw < 0.5f;
    }
    rec.used_hard = use_hard;
    rec.s = use_hard ? rec.hard : rec.soft;
    forward[static_cast<size_t>(i)] = rec.s;
  }

  Tensor flat = logits.shape().size() == 1 ? logits : reshape(logits, {n});
  Tensor noisy = add(flat, Tensor::from({n}, std::move(noise_vals)));
  Tensor soft = sharp_sigmoid(noisy);
  out.s = straight_through(soft, forward);
  return out;
}

Tensor replace_tokens(const Tensor& tokens, const Tensor& s, const Tensor& constant_row) {
  if (tokens.shape().size() != 2) throw ShapeError("replace_tokens: tokens must be 2-D");
  const int n = tokens.rows(), d = tokens.cols();
  if (static_cast<int>(s.numel()) != n) throw ShapeError("replace_tokens: factor count mismatch");
  if (static_cast<int>(constant_row.numel()) != d)
    throw ShapeError("replace_tokens: constant token width mismatch");
  for (float v : s.data())
    if (v < 0.0f || v > 1.0f)
      throw ContractError("replace_tokens: factor " + std::to_string(v) + " outside [0,1]");

  std::vector<float> out(tokens.numel());
  auto td = tokens.data();
  auto sd = s.data();
  auto cd = constant_row.data();
  for (int i = 0; i < n; ++i) {
    const float si = sd[static_cast<size_t>(i)];
    const float* row = td.data() + size_t(i) * d;
    float* orow = out.data() + size_t(i) * d;
    if (si == 0.0f) {
      // exact copy so replaced rows are bit-identical to the constant token
      for (int j = 0; j < d; ++j) orow[j] = cd[j];
    } else if (si == 1.0f) {
      for (int j = 0; j < d; ++j) orow[j] = row[j];
    } else {
      for (int j = 0; j < d; ++j) orow[j] = si * row[j] + (1.0f - si) * cd[j];
    }
  }

  auto node = std::make_shared<Node>();
  node->shape = tokens.shape();
  node->data = std::move(out);
  Tensor result(node);
  if (!grad_enabled() ||
      (!tokens.requires_grad() && !s.requires_grad() && !constant_row.requires_grad()))
    return result;

  Node* tn = tokens.node().get();
  Node* sn = s.node().get();
  Node* cn = constant_row.node().get();
  const bool tw = tokens.requires_grad(), sw = s.requires_grad(), cw = constant_row.requires_grad();
  std::vector<float> tsave(td.begin(), td.end());
  std::vector<float> ssave(sd.begin(), sd.end());
  std::vector<float> csave(cd.begin(), cd.end());
  node->parents = {tokens.node(), s.node(), constant_row.node()};
  node->requires_grad = true;
  node->backward = [tn, sn, cn, tw, sw, cw, n, d, tsave = std::move(tsave),
                    ssave = std::move(ssave), csave = std::move(csave)](
                       const std::vector<float>& g, GradMap& gm) {
    std::vector<float>* gt = tw ? &gm.at(tn, size_t(n) * d) : nullptr;
    std::vector<float>* gs = sw ? &gm.at(sn, size_t(n)) : nullptr;
    std::vector<float>* gc = cw ? &gm.at(cn, size_t(d)) : nullptr;
    for (int i = 0; i < n; ++i) {
      const float si = ssave[static_cast<size_t>(i)];
      const float* gr = g.data() + size_t(i) * d;
      if (gt) {
        float* gtr = gt->data() + size_t(i) * d;
        for (int j = 0; j < d; ++j) gtr[j] += si * gr[j];
      }
      if (gs) {
        float acc = 0.0f;
        const float* row = tsave.data() + size_t(i) * d;
        for (int j = 0; j < d; ++j) acc += gr[j] * (row[j] - csave[static_cast<size_t>(j)]);
        (*gs)[static_cast<size_t>(i)] += acc;
      }
      if (gc) {
        const float w = 1.0f - si;
        for (int j = 0; j < d; ++j) (*gc)[static_cast<size_t>(j)] += w * gr[j];
      }
    }
  };
  return result;
}

Tensor child_logit_rows(const Tensor& parent_feats, const SelectionHead& head) {
  return add_row(matmul(parent_feats, head.w), head.b);
}

std::vector<int> child_index_map(GridShape parent_grid, GridShape child_grid,
                                 std::span<const int> parent_rows) {
  std::vector<int> map(static_cast<size_t>(child_grid.count()), -1);
  for (size_t p = 0; p < parent_rows.size(); ++p) {
    const auto kids = children_of(parent_rows[p], parent_grid, child_grid);
    for (int q = 0; q < 4; ++q)
      map[static_cast<size_t>(kids[static_cast<size_t>(q)])] = static_cast<int>(p) * 4 + q;
  }
  return map;
}

}  // namespace pyrec
