#include "pyrec/trainer.hpp"

#include <atomic>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <numeric>
#include <ostream>
#include <thread>

#include "pyrec/checkpoint.hpp"
#include "pyrec/errors.hpp"
#include "pyrec/objectives.hpp"
#include "pyrec/rng.hpp"

namespace pyrec {

namespace {

int pick_threads(int requested) {
  if (requested > 0) return requested;
  const unsigned hw = std::thread::hardware_concurrency();
  return static_cast<int>(std::min<unsigned>(hw == 0 ? 1 : hw, 8));
}

void parallel_for(int n, int threads, const std::function<void(int)>& fn) {
  if (threads <= 1 || n <= 1) {
    for (int i = 0; i < n; ++i) fn(i);
    return;
  }
  std::atomic<int> next{0};
  auto work = [&] {
    for (int i = next.fetch_add(1); i < n; i = next.fetch_add(1)) fn(i);
  };
  std::vector<std::thread> pool;
  const int spawn = std::min(threads, n) - 1;
  pool.reserve(static_cast<size_t>(spawn));
  for (int t = 0; t < spawn; ++t) pool.emplace_back(work);
  work();
  for (auto& t : pool) t.join();
}

}  // namespace

OptimState OptimState::init(std::span<const Tensor> params, float weight_decay) {
  OptimState st;
  st.weight_decay = weight_decay;
  st.m.reserve(params.size());
  st.v.reserve(params.size());
  for (const Tensor& p : params) {
    st.m.emplace_back(p.numel(), 0.0f);
    st.v.emplace_back(p.numel(), 0.0f);
  }
  return st;
}

void adamw_step(std::span<Tensor> params, OptimState& state, float lr) {
  if (params.size() != state.m.size())
    throw ContractError("adamw_step: optimizer state does not match the parameter list");
  state.step += 1;
  const float bc1 = 1.0f - std::pow(state.beta1, static_cast<float>(state.step));
  const float bc2 = 1.0f - std::pow(state.beta2, static_cast<float>(state.step));
  for (size_t pi = 0; pi < params.size(); ++pi) {
    Tensor& p = params[pi];
    auto g = p.grad();
    auto data = p.mutable_data();
    auto& m = state.m[pi];
    auto& v = state.v[pi];
    for (size_t i = 0; i < data.size(); ++i) {
      const float gi = i < g.size() ? g[i] : 0.0f;
      m[i] = state.beta1 * m[i] + (1.0f - state.beta1) * gi;
      v[i] = state.beta2 * v[i] + (1.0f - state.beta2) * gi * gi;
      const float m_hat = m[i] / bc1;
      const float v_hat = v[i] / bc2;
      data[i] -= lr * (m_hat / (std::sqrt(v_hat) + state.eps) + state.weight_decay * data[i]);
    }
  }
}

float lr_at(long step, long total_steps, const TrainConfig& cfg) {
  if (step < 0) throw ContractError("lr_at: negative step");
  const long warm = cfg.warmup_steps;
  if (warm > total_steps) throw ConfigError("lr_at: warm-up longer than the run");
  if (step <= warm)
    return warm == 0 ? cfg.peak_lr : cfg.peak_lr * static_cast<float>(step) / static_cast<float>(warm);
  if (step >= total_steps) return 0.0f;
  return cfg.peak_lr * static_cast<float>(total_steps - step) /
         static_cast<float>(total_steps - warm);
}

std::pair<Tensor, Tensor> sample_loss(const Model& model, const Sample& s,
                                      const ScanOptions& opts) {
  ScanState st = scan(model, s.image, s.query_ids, opts);
  std::vector<Tensor> boxes;
  boxes.reserve(st.scales.size());
  for (auto& tr : st.scales) boxes.push_back(tr.box_tensor);
  Tensor det = detection_loss(std::span<const Tensor>(boxes.data(), boxes.size()), s.gt);
  std::vector<Tensor> factors;
  for (size_t l = 1; l < st.scales.size(); ++l) factors.push_back(st.scales[l].factor_tensor);
  Tensor sparse = sparsity_loss(std::span<const Tensor>(factors.data(), factors.size()));
  return {det, sparse};
}

EvalStats evaluate(const Model& model, std::span<const Sample> data, bool merge, int threads) {
  const int S = model.cfg.scales;
  const int n = static_cast<int>(data.size());
  EvalStats out;
  out.acc.assign(static_cast<size_t>(S), 0.0);
  out.mean_iou.assign(static_cast<size_t>(S), 0.0);
  out.sel_ratio.assign(static_cast<size_t>(S), 0.0);
  if (n == 0) return out;

  std::vector<std::vector<BBox>> boxes(static_cast<size_t>(S),
                                       std::vector<BBox>(static_cast<size_t>(n)));
  std::vector<std::vector<double>> ratios(static_cast<size_t>(S),
                                          std::vector<double>(static_cast<size_t>(n)));
  std::vector<double> macs(static_cast<size_t>(n));

  parallel_for(n, pick_threads(threads), [&](int i) {
    ScanOptions so;
    so.mode = ScanMode::kEval;
    so.merge = merge;
    ScanState st = scan(model, data[static_cast<size_t>(i)].image,
                        data[static_cast<size_t>(i)].query_ids, so);
    for (int l = 0; l < S; ++l) {
      const auto& tr = st.scales[static_cast<size_t>(l)];
      boxes[static_cast<size_t>(l)][static_cast<size_t>(i)] =
          BBox{tr.box[0], tr.box[1], tr.box[2], tr.box[3]};
      ratios[static_cast<size_t>(l)][static_cast<size_t>(i)] =
          static_cast<double>(tr.kept) / static_cast<double>(tr.total);
    }
    macs[static_cast<size_t>(i)] = static_cast<double>(st.flops.total());
  });

  std::vector<BBox> gts;
  gts.reserve(static_cast<size_t>(n));
  for (const auto& s : data) gts.push_back(s.gt);
  for (int l = 0; l < S; ++l) {
    const auto& bl = boxes[static_cast<size_t>(l)];
    out.acc[static_cast<size_t>(l)] =
        acc_at_05(std::span<const BBox>(bl.data(), bl.size()), std::span<const BBox>(gts.data(), gts.size()));
    double iou_acc = 0.0, ratio_acc = 0.0;
    for (int i = 0; i < n; ++i) {
      iou_acc += iou(bl[static_cast<size_t>(i)], gts[static_cast<size_t>(i)]);
      ratio_acc += ratios[static_cast<size_t>(l)][static_cast<size_t>(i)];
    }
    out.mean_iou[static_cast<size_t>(l)] = iou_acc / n;
    out.sel_ratio[static_cast<size_t>(l)] = ratio_acc / n;
  }
  out.mean_macs = std::accumulate(macs.begin(), macs.end(), 0.0) / n;
  return out;
}

TrainResult train(Model& model, const TrainConfig& cfg, std::span<const Sample> train_data,
                  std::span<const Sample> val_data, const std::string& out_dir,
                  std::ostream* progress) {
  namespace fs = std::filesystem;
  std::error_code ec;
  fs::create_directories(out_dir, ec);
  if (ec) throw IoError("train: cannot create " + out_dir);

  const int B = cfg.batch;
  const int n = static_cast<int>(train_data.size());
  if (n < B) throw ConfigError("train: dataset smaller than one batch");
  const long batches_per_epoch = n / B;
  const long total_steps = batches_per_epoch * cfg.epochs;
  if (cfg.warmup_steps > total_steps) throw ConfigError("train: warm-up exceeds total steps");

  auto params = model.parameters();
  OptimState opt = OptimState::init(std::span<const Tensor>(params.data(), params.size()),
                                    cfg.weight_decay);
  const int threads = pick_threads(cfg.threads);

  std::ofstream metrics((fs::path(out_dir) / "metrics.csv").string());
  if (!metrics) throw IoError("train: cannot open metrics.csv");

  TrainResult result;
  result.best_checkpoint = (fs::path(out_dir) / "model_best.ckpt").string();
  long step = 0;
  std::vector<int> order(static_cast<size_t>(n));
  std::iota(order.begin(), order.end(), 0);

  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    Rng shuffle_rng(hash_combine(cfg.seed, 0x65706f63ULL + static_cast<uint64_t>(epoch)));
    for (size_t i = order.size(); i > 1; --i)
      std::swap(order[i - 1], order[static_cast<size_t>(shuffle_rng.uniform_int(0, static_cast<int>(i) - 1))]);

    double epoch_bbox = 0.0, epoch_sparse = 0.0;
    for (long b = 0; b < batches_per_epoch; ++b) {
      std::vector<GradMap> sinks(static_cast<size_t>(B));
      std::vector<double> l_bbox(static_cast<size_t>(B)), l_sparse(static_cast<size_t>(B));
      std::vector<uint8_t> finite(static_cast<size_t>(B), 1);

      parallel_for(B, threads, [&](int j) {
        const int idx = order[static_cast<size_t>(b * B + j)];
        const Sample& s = train_data[static_cast<size_t>(idx)];
        ScanOptions so;
        so.mode = ScanMode::kTrain;
        so.cache_grads = CacheGrads::kFlow;
        so.noise_seed = hash_combine(cfg.seed, hash_combine(static_cast<uint64_t>(epoch),
                                                            static_cast<uint64_t>(idx)));
        auto [det, sparse] = sample_loss(model, s, so);
        Tensor total = add(det, sparse);
        l_bbox[static_cast<size_t>(j)] = det.item();
        l_sparse[static_cast<size_t>(j)] = sparse.item();
        if (!all_finite(total)) {
          finite[static_cast<size_t>(j)] = 0;
          return;
        }
        backward(scale(total, 1.0f / static_cast<float>(B)), sinks[static_cast<size_t>(j)]);
      });

      for (int j = 0; j < B; ++j)
        if (!finite[static_cast<size_t>(j)])
          throw TrainError("train: non-finite loss in batch " + std::to_string(step) +
                           " (epoch " + std::to_string(epoch) + ")");

      // deterministic reduction: sample order, then parameter order
      for (int j = 0; j < B; ++j) {
        for (Tensor& p : params) {
          const std::vector<float>* g = sinks[static_cast<size_t>(j)].find(p.node().get());
          if (!g) continue;
          auto& acc = p.node()->grad;
          if (acc.empty()) acc.assign(p.numel(), 0.0f);
          for (size_t k = 0; k < g->size(); ++k) acc[k] += (*g)[k];
        }
      }

      if (cfg.clip_norm > 0.0f) {
        double sq = 0.0;
        for (const Tensor& p : params)
          for (float g : p.grad()) sq += static_cast<double>(g) * g;
        const double norm = std::sqrt(sq);
        if (norm > cfg.clip_norm) {
          const float scale_by = static_cast<float>(cfg.clip_norm / norm);
          for (Tensor& p : params) {
            auto& acc = p.node()->grad;
            for (float& g : acc) g *= scale_by;
          }
        }
      }

      adamw_step(std::span<Tensor>(params.data(), params.size()), opt,
                 lr_at(step + 1, total_steps, cfg));
      for (Tensor& p : params) p.zero_grad();
      ++step;

      for (int j = 0; j < B; ++j) {
        epoch_bbox += l_bbox[static_cast<size_t>(j)];
        epoch_sparse += l_sparse[static_cast<size_t>(j)];
      }
    }

    EpochStats es;
    es.epoch = epoch;
    es.l_bbox = epoch_bbox / static_cast<double>(batches_per_epoch * B);
    es.l_sparse = epoch_sparse / static_cast<double>(batches_per_epoch * B);
    es.val = evaluate(model, val_data, /*merge=*/true, threads);

    metrics << epoch << "," << es.l_bbox << "," << es.l_sparse;
    for (double a : es.val.acc) metrics << "," << a;
    for (double r : es.val.sel_ratio) metrics << "," << r;
    metrics << "," << es.val.mean_macs << "\n";
    metrics.flush();

    const double fine_acc = es.val.acc.empty() ? 0.0 : es.val.acc.back();
    if (result.log.empty() || fine_acc > result.best_acc) {
      result.best_acc = fine_acc;
      save_checkpoint(result.best_checkpoint, model);
    }
    if (progress) {
      (*progress) << "epoch " << epoch << " l_bbox " << es.l_bbox << " l_sparse " << es.l_sparse
                  << " val_acc";
      for (double a : es.val.acc) (*progress) << " " << a;
      (*progress) << " ratio";
      for (double r : es.val.sel_ratio) (*progress) << " " << r;
      (*progress) << std::endl;
    }
    result.log.push_back(std::move(es));
  }
  return result;
}

}  // namespace pyrec
