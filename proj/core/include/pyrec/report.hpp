#pragma once

#include <map>
#include <span>
#include <string>
#include <vector>

#include "pyrec/model.hpp"
#include "pyrec/synthgym.hpp"

namespace pyrec {

/// Binary portable pixmap (P6); values in [0,1] are rounded to bytes.
void write_ppm(const std::string& path, const Image& img);

/// Reconstruction of one scale: kept patches copied from the pyramid level,
/// replaced patches mid-gray, predicted box as a 1-pixel white outline.
Image render_selection_map(const ScaleTrace& trace, const Image& level_image, int patch);

/// Writes one pixmap per scale: <out_prefix>_scale<l>.ppm.
void emit_selection_map(const ScanState& state, const ImagePyramid& pyr, int patch,
                        const std::string& out_prefix);

/// One evaluated sample: per-scale boxes, IoUs, kept counts, forward MACs.
struct SampleEval {
  std::vector<BBox> boxes;
  std::vector<double> ious;
  std::vector<int> kept;
  std::vector<int> total;
  uint64_t macs = 0;
};

std::vector<SampleEval> eval_samples(const Model& model, std::span<const Sample> data,
                                     bool merge = true, int threads = 0);

/// Per-sample metric rows: id, per-scale IoU, per-scale box, per-scale
/// selection ratio. Comma-separated, one row per sample.
void write_metric_rows(std::span<const SampleEval> evals, const std::string& path);

struct SelectionHistogram {
  std::vector<int> totals;                     // tokens per scale
  std::vector<std::map<int, int>> per_scale;   // kept count -> samples
  std::vector<std::vector<int>> kept_per_sample;

  double mean_ratio(int scale) const;
};

SelectionHistogram make_histogram(std::span<const SampleEval> evals, const ModelConfig& cfg);

/// Histogram rows: scale, kept, samples. Sample rows: id, per-scale kept,
/// total kept.
void write_histogram_csv(const SelectionHistogram& hist, const std::string& path);

}  // namespace pyrec
