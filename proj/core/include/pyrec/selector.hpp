#pragma once

#include <span>
#include <vector>

#include "pyrec/pyramid.hpp"
#include "pyrec/rng.hpp"
#include "pyrec/tensor.hpp"

namespace pyrec {

enum class ScanMode {
  kTrain,  // noisy logits, branch sampled between soft and hard values
  kEval,   // zero noise, hard thresholding, no graph
  kSoft,   // noisy logits, soft branch forced: the differentiable surface
           // used for finite-difference checks
};

/// Test hook: override the per-patch branch draw in train mode.
enum class BranchForce { kNone, kSoft, kHard };

/// Per-patch selection state. In train mode `s` is one of {soft, hard}
/// picked by branch_draw; at evaluation noise is zero and s = hard.
/// Gradients of s w.r.t. the logit always follow the soft value.
struct SelectionFactor {
  float logit = 0.0f;
  float noise = 0.0f;        // N(0,1) sample; 0 at evaluation
  float branch_draw = 0.0f;  // U[0,1] sample deciding the branch
  float soft = 0.0f;         // sigma'(logit + noise)
  float hard = 0.0f;         // 1(logit + noise >= 0)
  float s = 0.0f;
  bool used_hard = false;
};

struct SelectionSample {
  std::vector<SelectionFactor> records;
  Tensor s;  // [n] graph tensor; undefined in eval mode
};

/// Sharpened sigmoid clamp(1.2*sigmoid(x) - 0.1, 0, 1). Saturates to exact
/// 0/1 at |x| >= ln(11), with zero derivative in the clamped regions.
float sharp_sigmoid_value(float x);
Tensor sharp_sigmoid(const Tensor& x);

/// Draws selection factors for one pyramid level. Noise is counter-based per
/// (level, patch), so a scan re-evaluated with the same seed sees identical
/// draws.
SelectionSample sample_selection(const Tensor& logits, ScanMode mode, const NoiseSource& noise,
                                 int level, BranchForce force = BranchForce::kNone);

/// Row-wise convex blend s*E + (1-s)*constant. Rows with s = 0 come out
/// bit-identical to the constant token.
Tensor replace_tokens(const Tensor& tokens, const Tensor& s, const Tensor& constant_row);

/// Linear map from a parent token feature to its four child logits, ordered
/// like children_of.
struct SelectionHead {
  Tensor w;  // [d x 4]
  Tensor b;  // [4]
};

/// Logits for every supplied parent row: [P x 4].
Tensor child_logit_rows(const Tensor& parent_feats, const SelectionHead& head);

/// Flat map child-grid-index -> position in the row-major [P x 4] logit
/// block, following children_of. `parent_rows[p]` is the grid index of row p;
/// children of parents not present map to -1.
std::vector<int> child_index_map(GridShape parent_grid, GridShape child_grid,
                                 std::span<const int> parent_rows);

}  // namespace pyrec
