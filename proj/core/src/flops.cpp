#include "pyrec/flops.hpp"

#include <string>

#include "pyrec/errors.hpp"

namespace pyrec {

uint64_t FlopReport::total_merged() const {
  uint64_t t = text_macs;
  for (const auto& s : scales) t += s.macs_merged;
  return t;
}

uint64_t FlopReport::total_dense() const {
  uint64_t t = text_macs;
  for (const auto& s : scales) t += s.macs_dense;
  return t;
}

double FlopReport::merged_over_dense() const {
  const uint64_t dense = total_dense();
  return dense == 0 ? 0.0 : static_cast<double>(total_merged()) / static_cast<double>(dense);
}

namespace {

// One encoder pass of n_cur rows against m keys, all layers.
uint64_t layer_macs(const ModelConfig& cfg, uint64_t n_cur, uint64_t m) {
  const uint64_t d = static_cast<uint64_t>(cfg.d);
  return static_cast<uint64_t>(cfg.layers) * (12 * n_cur * d * d + 2 * n_cur * m * d);
}

uint64_t embed_macs(const ModelConfig& cfg, uint64_t patches) {
  const uint64_t d = static_cast<uint64_t>(cfg.d);
  const uint64_t pd = static_cast<uint64_t>(cfg.patch_dim());
  return patches * pd * d + patches * 3 * d + patches * d * d;  // projection + PSE
}

uint64_t head_macs(const ModelConfig& cfg, uint64_t sel_rows, bool has_children) {
  const uint64_t d = static_cast<uint64_t>(cfg.d);
  uint64_t macs = d * d + d * d + d * 4;  // box head on the [REG] row
  if (has_children) macs += sel_rows * d * 4;
  return macs;
}

}  // namespace

FlopReport flops_estimate(const ModelConfig& cfg, const ScanCounts& counts) {
  cfg.validate();
  if (static_cast<int>(counts.kept.size()) != cfg.scales)
    throw InputError("flops_estimate: need one kept count per scale");

  FlopReport rep;
  rep.text_tokens = counts.text_tokens >= 0 ? counts.text_tokens : cfg.text_len + 1;
  const uint64_t n_t = static_cast<uint64_t>(rep.text_tokens);
  const uint64_t d = static_cast<uint64_t>(cfg.d);
  rep.text_macs =
      static_cast<uint64_t>(cfg.layers) * (12 * n_t * d * d + 2 * n_t * n_t * d);

  uint64_t cached_merged = n_t;  // key rows visible from earlier segments
  uint64_t cached_dense = n_t;
  for (int l = 0; l < cfg.scales; ++l) {
    ScaleCost sc;
    sc.total = cfg.level_tokens(l);
    sc.kept = l == 0 ? sc.total : counts.kept[static_cast<size_t>(l)];
    if (sc.kept < 0 || sc.kept > sc.total)
      throw InputError("flops_estimate: kept count for scale " + std::to_string(l) +
                       " outside [0, " + std::to_string(sc.total) + "]");
    sc.replaced = sc.total - sc.kept;
    sc.effective = sc.kept + 1 + (sc.replaced > 0 ? 1 : 0);
    const bool has_children = l + 1 < cfg.scales;

    {  // merged: physical rows are kept patches (+ representative) + [REG]
      const uint64_t n_cur = static_cast<uint64_t>(sc.effective);
      const uint64_t m = cached_merged + n_cur;
      sc.macs_merged = embed_macs(cfg, static_cast<uint64_t>(sc.kept)) +
                       layer_macs(cfg, n_cur, m) +
                       head_macs(cfg, static_cast<uint64_t>(sc.kept), has_children);
      cached_merged += n_cur;
    }
    {  // dense: every replaced token materialized as a duplicate
      const uint64_t n_cur = static_cast<uint64_t>(sc.total) + 1;
      const uint64_t m = cached_dense + n_cur;
      sc.macs_dense = embed_macs(cfg, static_cast<uint64_t>(sc.total)) +
                      layer_macs(cfg, n_cur, m) +
                      head_macs(cfg, static_cast<uint64_t>(sc.total), has_children);
      cached_dense += n_cur;
    }
    rep.scales.push_back(sc);
  }
  return rep;
}

}  // namespace pyrec
