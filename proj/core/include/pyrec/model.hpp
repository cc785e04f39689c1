#pragma once

#include <array>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "pyrec/attention.hpp"
#include "pyrec/embedder.hpp"
#include "pyrec/pyramid.hpp"
#include "pyrec/selector.hpp"
#include "pyrec/tensor.hpp"

namespace pyrec {

struct ModelConfig {
  int d = 64;
  int layers = 4;
  int heads = 4;
  int scales = 3;
  int patch = 8;
  int text_len = 8;
  int vocab = 18;
  int image = 64;
  int split = 2;  // encoder layers whose outputs drive next-scale selection
  int channels = 3;

  static constexpr int kPadId = 0;

  int patch_dim() const { return patch * patch * channels; }
  int level_side(int level) const { return image >> (scales - 1 - level); }
  GridShape level_grid(int level) const {
    const int g = level_side(level) / patch;
    return {g, g};
  }
  int level_tokens(int level) const { return level_grid(level).count(); }

  void validate() const;

  /// Small configuration trainable on a CPU in minutes.
  static ModelConfig desk();
  /// ViLT-sized configuration (640px, 32px patches, 12 layers, d=768); used
  /// for cost accounting, not for training here.
  static ModelConfig paper();
};

struct LayerParams {
  Tensor ln1_g, ln1_b;
  Tensor wq, bq, wk, bk, wv, bv, wo, bo;
  Tensor ln2_g, ln2_b;
  Tensor ffn_w1, ffn_b1, ffn_w2, ffn_b2;
};

struct BoxHead {
  Tensor w1, b1, w2, b2, w3, b3;
};

struct Model {
  ModelConfig cfg;
  EmbeddingTables emb;
  std::vector<LayerParams> layers;
  std::vector<SelectionHead> sel_heads;  // one per level except the finest
  BoxHead box_head;

  static Model init(const ModelConfig& cfg, uint64_t seed);

  std::vector<Tensor> parameters() const;
  std::vector<std::pair<std::string, Tensor>> named_parameters() const;
  void zero_grad() const;
};

/// Whether later iterations propagate gradients into cached segments.
/// kFlow keeps the whole scan differentiable end-to-end; kCut freezes a
/// segment once its iteration completes.
enum class CacheGrads { kFlow, kCut };

struct ScanOptions {
  ScanMode mode = ScanMode::kEval;
  bool merge = true;  // merge replaced tokens at evaluation
  CacheGrads cache_grads = CacheGrads::kFlow;
  uint64_t noise_seed = 0;
  BranchForce force = BranchForce::kNone;
};

struct FlopMeter {
  uint64_t text_macs = 0;
  std::vector<uint64_t> scale_macs;

  uint64_t total() const {
    uint64_t t = text_macs;
    for (uint64_t m : scale_macs) t += m;
    return t;
  }
};

/// Everything one scale contributed to a scan.
struct ScaleTrace {
  std::array<float, 4> box{};  // normalized (x, y, w, h)
  Tensor box_tensor;           // [1 x 4] graph output (training modes)
  std::vector<SelectionFactor> factors;
  Tensor factor_tensor;  // gated selection factors (training modes, level >= 1)
  int total = 0;
  int kept = 0;      // physically embedded patches
  int replaced = 0;  // total - kept at evaluation; 0 during training
  std::vector<int> kept_rows;  // grid indices of the physical patches

  float mean_factor() const;
};

struct ScanState {
  KVCache cache;
  std::vector<ScaleTrace> scales;
  FlopMeter flops;
  int text_tokens = 0;

  std::vector<std::array<float, 4>> boxes() const;
};

/// Factors feeding one scale. Level 0 is all-ones; later levels come from
/// the previous scale's child selection.
struct LevelFactors {
  std::vector<SelectionFactor> records;
  Tensor s;                   // [N] graph tensor (training modes)
  std::vector<uint8_t> keep;  // evaluation: patches that stay physical
  bool all_ones = false;
};

/// Child logits produced by one scale for the next.
struct ChildLogits {
  Tensor rows;              // [P x 4] graph block (training modes)
  std::vector<float> flat;  // arranged by child grid index; 0 where unset
  std::vector<int> index_map;
  GridShape child_grid;
};

/// Drives one image/text pass. Iterations must run in order: text first,
/// then scales 0..S-1; the wiring between scales goes through next_factors.
class Scanner {
 public:
  Scanner(const Model& model, const ScanOptions& opts);

  void forward_text(const std::vector<int>& ids);

  struct ScaleOut {
    Tensor box;  // [1 x 4]
    std::optional<ChildLogits> children;
  };
  ScaleOut forward_scale(int level, const ImagePyramid& pyr, const LevelFactors& factors);

  LevelFactors next_factors(int level, const ChildLogits& children, const LevelFactors& parent);

  LevelFactors ones_factors(int level) const;

  const ScanState& state() const { return state_; }
  ScanState finish() { return std::move(state_); }

 private:
  Tensor run_layers(Tensor x, int segment_index, int const_row, float const_mult,
                    Tensor* enc1_out);

  const Model& m_;
  ScanOptions opts_;
  ScanState state_;
  MacCounter* outer_counter_;
};

/// Full pass: text, then every scale coarse to fine with selection wiring.
ScanState scan(const Model& model, const Image& image, const std::vector<int>& text_ids,
               const ScanOptions& opts);

/// Same pass on a prebuilt pyramid (lets tests manipulate single levels).
ScanState scan_pyramid(const Model& model, const ImagePyramid& pyr,
                       const std::vector<int>& text_ids, const ScanOptions& opts);

/// Box regression head: shared two-hidden-layer perceptron with sigmoid
/// outputs, identical parameters at every scale.
Tensor predict_box(const BoxHead& head, const Tensor& reg_feat);

/// One pre-norm residual block: x + MHA(LN(x) | cache), then + FFN(LN(.)).
/// Also returns the K/V projections the caller appends to the cache.
/// `cur_mult` carries per-row key multiplicities of the current block
/// (empty = all ones).
struct LayerIO {
  Tensor out, keys, values;
};
LayerIO encoder_layer(const LayerParams& lp, const Tensor& x, const KVCache& cache,
                      int layer_index, std::span<const float> cur_mult, int heads);

}  // namespace pyrec
