#pragma once

#include <cstdint>
#include <vector>

#include "pyrec/model.hpp"

namespace pyrec {

/// Analytic multiply-accumulate model of one forward scan. Mirrors the
/// engine exactly: patch/PSE projections, per-layer QKV/output projections,
/// attention scores and value mixing against every visible key, FFN,
/// selection heads, box head. Elementwise work is not counted on either
/// side.
struct ScaleCost {
  int total = 0;
  int kept = 0;
  int replaced = 0;
  int effective = 0;  // kept + reg + (replaced > 0 ? 1 : 0)
  uint64_t macs_merged = 0;
  uint64_t macs_dense = 0;
};

struct FlopReport {
  int text_tokens = 0;
  uint64_t text_macs = 0;
  std::vector<ScaleCost> scales;

  uint64_t total_merged() const;
  uint64_t total_dense() const;
  double merged_over_dense() const;
};

struct ScanCounts {
  int text_tokens = -1;     // -1 = text_len + [CLS]
  std::vector<int> kept;    // per scale; scale 0 keeps everything regardless
};

FlopReport flops_estimate(const ModelConfig& cfg, const ScanCounts& counts);

}  // namespace pyrec
