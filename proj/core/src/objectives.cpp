#include "pyrec/objectives.hpp"

#include <algorithm>
#include <cmath>

#include "pyrec/errors.hpp"

namespace pyrec {

namespace {

struct Overlap {
  float inter;
  float uni;
  float hull;
};

Overlap overlap(const BBox& a, const BBox& b) {
  const auto ca = a.corners();
  const auto cb = b.corners();
  const float iw = std::max(0.0f, std::min(ca[2], cb[2]) - std::max(ca[0], cb[0]));
  const float ih = std::max(0.0f, std::min(ca[3], cb[3]) - std::max(ca[1], cb[1]));
  const float inter = iw * ih;
  const float uni = a.area() + b.area() - inter;
  const float hw = std::max(ca[2], cb[2]) - std::min(ca[0], cb[0]);
  const float hh = std::max(ca[3], cb[3]) - std::min(ca[1], cb[1]);
  return {inter, uni, hw * hh};
}

}  // namespace

float iou(const BBox& a, const BBox& b) {
  const Overlap o = overlap(a, b);
  if (o.uni <= 0.0f) return 0.0f;
  return o.inter / o.uni;
}

float giou(const BBox& a, const BBox& b) {
  const Overlap o = overlap(a, b);
  const float i = o.uni <= 0.0f ? 0.0f : o.inter / o.uni;
  if (o.hull <= 0.0f) return i;
  return i - (o.hull - o.uni) / o.hull;
}

std::vector<float> detection_weights(int scales) {
  std::vector<float> w(static_cast<size_t>(scales));
  for (int l = 0; l < scales; ++l)
    w[static_cast<size_t>(l)] = std::ldexp(1.0f, 2 * (l - (scales - 1)));  // exact 4^(l-(S-1))
  return w;
}

float beta_for_level(int level) { return std::ldexp(1.0f, -level); }  // exact 2^-level

Tensor l1_loss(const Tensor& pred, const BBox& gt) {
  if (pred.numel() != 4) throw ShapeError("l1_loss: box must have 4 coordinates");
  Tensor flat = pred.shape().size() == 1 ? pred : reshape(pred, {4});
  Tensor g = Tensor::from({4}, {gt.x, gt.y, gt.w, gt.h});
  return mean(absval(sub(flat, g)));
}

Tensor giou_loss_term(const Tensor& pred, const BBox& gt) {
  if (pred.numel() != 4) throw ShapeError("giou_loss_term: box must have 4 coordinates");
  Tensor flat = pred.shape().size() == 1 ? pred : reshape(pred, {4});
  Tensor px = element(flat, 0), py = element(flat, 1);
  Tensor pw = element(flat, 2), ph = element(flat, 3);
  Tensor half_w = scale(pw, 0.5f), half_h = scale(ph, 0.5f);
  Tensor ax1 = sub(px, half_w), ax2 = add(px, half_w);
  Tensor ay1 = sub(py, half_h), ay2 = add(py, half_h);
  const auto cb = gt.corners();
  Tensor bx1 = Tensor::scalar(cb[0]), by1 = Tensor::scalar(cb[1]);
  Tensor bx2 = Tensor::scalar(cb[2]), by2 = Tensor::scalar(cb[3]);

  Tensor iw = clamp_min(sub(minimum(ax2, bx2), maximum(ax1, bx1)), 0.0f);
  Tensor ih = clamp_min(sub(minimum(ay2, by2), maximum(ay1, by1)), 0.0f);
  Tensor inter = mul(iw, ih);
  Tensor area_a = mul(pw, ph);
  Tensor uni = sub(add(area_a, Tensor::scalar(gt.area())), inter);
  Tensor iou_t = divide(inter, clamp_min(uni, 1e-8f));
  Tensor hull = mul(sub(maximum(ax2, bx2), minimum(ax1, bx1)),
                    sub(maximum(ay2, by2), minimum(ay1, by1)));
  Tensor giou_t = sub(iou_t, divide(sub(hull, uni), clamp_min(hull, 1e-8f)));
  return sub(Tensor::scalar(1.0f), giou_t);
}

Tensor detection_loss(std::span<const Tensor> boxes, const BBox& gt) {
  if (boxes.empty()) throw ShapeError("detection_loss: no predictions");
  const auto w = detection_weights(static_cast<int>(boxes.size()));
  Tensor acc;
  for (size_t l = 0; l < boxes.size(); ++l) {
    Tensor term = scale(add(l1_loss(boxes[l], gt), giou_loss_term(boxes[l], gt)), w[l]);
    acc = acc.defined() ? add(acc, term) : term;
  }
  return acc;
}

Tensor sparsity_loss(std::span<const Tensor> factors, float lambda) {
  Tensor acc;
  for (size_t i = 0; i < factors.size(); ++i) {
    const int level = static_cast<int>(i) + 1;
    Tensor dev = sub(mean(factors[i]), Tensor::scalar(beta_for_level(level)));
    Tensor sq = mul(dev, dev);
    acc = acc.defined() ? add(acc, sq) : sq;
  }
  if (!acc.defined()) return Tensor::scalar(0.0f);
  return scale(acc, lambda);
}

double acc_at_05(std::span<const BBox> preds, std::span<const BBox> gts) {
  if (preds.empty() || preds.size() != gts.size())
    throw InputError("acc_at_05: prediction/ground-truth lists must be equal and non-empty");
  size_t hits = 0;
  for (size_t i = 0; i < preds.size(); ++i)
    if (iou(preds[i], gts[i]) > 0.5f) ++hits;  // strictly greater
  return 100.0 * static_cast<double>(hits) / static_cast<double>(preds.size());
}

}  // namespace pyrec
