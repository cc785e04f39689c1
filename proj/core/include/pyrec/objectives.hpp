#pragma once

#include <array>
#include <span>

#include "pyrec/tensor.hpp"

namespace pyrec {

/// Normalized center/size box. Canonical corner form is
/// (x-w/2, y-h/2, x+w/2, y+h/2).
struct BBox {
  float x = 0.0f, y = 0.0f, w = 0.0f, h = 0.0f;

  std::array<float, 4> corners() const {
    return {x - 0.5f * w, y - 0.5f * h, x + 0.5f * w, y + 0.5f * h};
  }
  float area() const { return w * h; }
};

/// Intersection over union in [0,1]; 0 when the union is empty.
float iou(const BBox& a, const BBox& b);

/// Generalized IoU in [-1,1]: IoU minus the fraction of the smallest
/// enclosing box not covered by the union.
float giou(const BBox& a, const BBox& b);

/// Per-scale detection weights 4^(l-(S-1)): the finest scale gets 1.
std::vector<float> detection_weights(int scales);

constexpr float kLambdaSparse = 0.05f;

/// Target selection ratio 2^-level for the sparsity regularizer.
float beta_for_level(int level);

/// Mean absolute error over the four coordinates, as a graph op.
Tensor l1_loss(const Tensor& pred, const BBox& gt);

/// Differentiable GIoU of a predicted [1x4]/(4) box against a constant
/// ground truth. Degenerate enclosing hulls are handled by clamping areas
/// at 1e-8.
Tensor giou_loss_term(const Tensor& pred, const BBox& gt);  // returns 1 - GIoU

/// Sum over scales of lambda_l * (L1 + (1 - GIoU)).
Tensor detection_loss(std::span<const Tensor> boxes, const BBox& gt);

/// lambda * sum over levels >= 1 of (mean(s) - beta^level)^2. `factors[i]`
/// holds the selection factors of level i+1 (level 0 is excluded).
Tensor sparsity_loss(std::span<const Tensor> factors, float lambda = kLambdaSparse);

/// Percentage of pairs with IoU strictly greater than 0.5.
double acc_at_05(std::span<const BBox> preds, std::span<const BBox> gts);

}  // namespace pyrec
