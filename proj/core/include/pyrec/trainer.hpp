#pragma once

#include <iosfwd>
#include <span>
#include <string>
#include <vector>

#include "pyrec/model.hpp"
#include "pyrec/synthgym.hpp"

namespace pyrec {

/// Adaptive-moment optimizer state with decoupled weight decay.
struct OptimState {
  std::vector<std::vector<float>> m;
  std::vector<std::vector<float>> v;
  long step = 0;
  float beta1 = 0.9f;
  float beta2 = 0.999f;
  float eps = 1e-8f;
  float weight_decay = 0.0f;

  static OptimState init(std::span<const Tensor> params, float weight_decay);
};

/// p -= lr * (m_hat / (sqrt(v_hat) + eps) + wd * p), decay decoupled from
/// the moment update. Reads each parameter's accumulated grad; empty grads
/// count as zero.
void adamw_step(std::span<Tensor> params, OptimState& state, float lr);

struct TrainConfig {
  int epochs = 30;
  int batch = 32;
  int warmup_steps = 300;
  float peak_lr = 3e-4f;
  float weight_decay = 1e-4f;
  uint64_t seed = 7;
  int train_samples = 8000;
  int val_samples = 1000;
  int threads = 0;  // 0 = pick from the hardware; results do not depend on it
  float clip_norm = 1.0f;
};

/// Linear 0 -> peak over the warm-up, then linear peak -> 0 at the last step.
float lr_at(long step, long total_steps, const TrainConfig& cfg);

struct EvalStats {
  std::vector<double> acc;        // per-scale Acc@0.5, percent
  std::vector<double> mean_iou;   // per-scale
  std::vector<double> sel_ratio;  // per-scale kept/total mean
  double mean_macs = 0.0;         // per-sample forward multiply-accumulates
};

/// Deterministic evaluation scan over a dataset (merged inference).
EvalStats evaluate(const Model& model, std::span<const Sample> data, bool merge = true,
                   int threads = 0);

struct EpochStats {
  int epoch = 0;
  double l_bbox = 0.0;
  double l_sparse = 0.0;
  EvalStats val;
};

struct TrainResult {
  std::vector<EpochStats> log;
  std::string best_checkpoint;
  double best_acc = 0.0;  // finest-scale val Acc@0.5
};

/// Per-sample training loss graph; shared by the trainer and the gradient
/// checks. Returns (detection, sparsity) terms.
std::pair<Tensor, Tensor> sample_loss(const Model& model, const Sample& s,
                                      const ScanOptions& opts);

/// End-to-end optimization. Writes metrics.csv (one line per epoch) and the
/// best-by-validation checkpoint under out_dir. Aborts on a non-finite loss
/// with the offending batch id.
TrainResult train(Model& model, const TrainConfig& cfg, std::span<const Sample> train_data,
                  std::span<const Sample> val_data, const std::string& out_dir,
                  std::ostream* progress = nullptr);

}  // namespace pyrec
