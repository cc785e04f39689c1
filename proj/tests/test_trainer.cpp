#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <filesystem>

#include "pyrec/checkpoint.hpp"
#include "pyrec/objectives.hpp"
#include "pyrec/trainer.hpp"
#include "support/oracles.hpp"

using namespace pyrec;
namespace fs = std::filesystem;

namespace {

ModelConfig tiny_config() {
  ModelConfig cfg;
  cfg.d = 16;
  cfg.layers = 2;
  cfg.heads = 2;
  cfg.scales = 3;
  cfg.patch = 4;
  cfg.image = 32;
  cfg.split = 1;
  return cfg;
}

GenConfig tiny_gen() {
  GenConfig g;
  g.image = 32;
  return g;
}

std::vector<Sample> tiny_data(int n, uint64_t seed = 100) {
  std::vector<Sample> out;
  for (int i = 0; i < n; ++i)
    out.push_back(generate_sample(hash_combine(seed, static_cast<uint64_t>(i)), tiny_gen()));
  return out;
}

fs::path temp_dir(const char* name) {
  fs::path p = fs::temp_directory_path() / "pyrec_tests" / name;
  fs::remove_all(p);
  fs::create_directories(p);
  return p;
}

std::vector<std::vector<float>> snapshot(const Model& m) {
  std::vector<std::vector<float>> out;
  for (const Tensor& t : m.parameters()) out.emplace_back(t.data().begin(), t.data().end());
  return out;
}

}  // namespace

TEST_CASE("adamw leaves parameters alone under zero gradient and no decay") {
  Tensor p = Tensor::from({3}, {1.0f, -2.0f, 0.5f}, true);
  std::vector<Tensor> params{p};
  OptimState st = OptimState::init(std::span<const Tensor>(params.data(), params.size()), 0.0f);
  adamw_step(std::span<Tensor>(params.data(), params.size()), st, 0.1f);
  CHECK(p.at(static_cast<size_t>(0)) == 1.0f);
  CHECK(p.at(static_cast<size_t>(1)) == -2.0f);
}

TEST_CASE("adamw with zero gradient and decay is a pure multiplicative shrink") {
  Tensor p = Tensor::from({2}, {2.0f, -4.0f}, true);
  std::vector<Tensor> params{p};
  OptimState st = OptimState::init(std::span<const Tensor>(params.data(), params.size()), 0.01f);
  adamw_step(std::span<Tensor>(params.data(), params.size()), st, 0.5f);
  CHECK(p.at(static_cast<size_t>(0)) == doctest::Approx(2.0f * (1.0f - 0.5f * 0.01f)));
  CHECK(p.at(static_cast<size_t>(1)) == doctest::Approx(-4.0f * (1.0f - 0.5f * 0.01f)));
}

TEST_CASE("the first adamw step with unit gradient moves by about -lr") {
  Tensor p = Tensor::from({1}, {0.0f}, true);
  p.node()->grad = {1.0f};
  std::vector<Tensor> params{p};
  OptimState st = OptimState::init(std::span<const Tensor>(params.data(), params.size()), 0.0f);
  adamw_step(std::span<Tensor>(params.data(), params.size()), st, 0.1f);
  CHECK(p.at(static_cast<size_t>(0)) == doctest::Approx(-0.1f).epsilon(1e-5));
}

TEST_CASE("the learning-rate schedule is triangular") {
  TrainConfig cfg;
  cfg.warmup_steps = 100;
  cfg.peak_lr = 2e-3f;
  const long total = 1100;
  CHECK(lr_at(0, total, cfg) == 0.0f);
  CHECK(lr_at(100, total, cfg) == doctest::Approx(2e-3f));
  CHECK(lr_at(50, total, cfg) == doctest::Approx(1e-3f));
  CHECK(lr_at(600, total, cfg) == doctest::Approx(1e-3f));  // midpoint of the decay span
  CHECK(lr_at(1100, total, cfg) == 0.0f);
  CHECK_THROWS_AS(lr_at(-1, total, cfg), ContractError);
  TrainConfig bad = cfg;
  bad.warmup_steps = 2000;
  CHECK_THROWS_AS(lr_at(5, total, bad), ConfigError);
}

TEST_CASE("one tiny step decreases the loss on the same batch") {
  auto data = tiny_data(40, 55);
  int improved = 0;
  const int trials = 20;
  for (int t = 0; t < trials; ++t) {
    Model m = Model::init(tiny_config(), 1000 + static_cast<uint64_t>(t));
    auto params = m.parameters();
    OptimState opt = OptimState::init(std::span<const Tensor>(params.data(), params.size()), 0.0f);
    auto batch_loss = [&](bool with_grad) {
      double total = 0.0;
      for (int j = 0; j < 2; ++j) {
        ScanOptions so;
        so.mode = ScanMode::kTrain;
        so.noise_seed = hash_combine(9000 + static_cast<uint64_t>(t), static_cast<uint64_t>(j));
        auto [det, sparse] = sample_loss(m, data[static_cast<size_t>(2 * t + j)], so);
        Tensor loss = add(det, sparse);
        total += loss.item();
        if (with_grad) backward(scale(loss, 0.5f));
      }
      return total / 2.0;
    };
    m.zero_grad();
    const double before = batch_loss(true);
    adamw_step(std::span<Tensor>(params.data(), params.size()), opt, 1e-4f);
    const double after = batch_loss(false);
    if (after < before) ++improved;
  }
  CHECK(improved >= trials * 95 / 100);
}

TEST_CASE("a zero learning rate leaves every parameter bit-identical") {
  auto dir = temp_dir("lr0");
  Model m = Model::init(tiny_config(), 21);
  auto before = snapshot(m);
  TrainConfig cfg;
  cfg.epochs = 1;
  cfg.batch = 4;
  cfg.warmup_steps = 0;
  cfg.peak_lr = 0.0f;
  cfg.seed = 5;
  cfg.threads = 2;
  auto data = tiny_data(8);
  auto val = tiny_data(4, 900);
  train(m, cfg, data, val, dir.string());
  auto after = snapshot(m);
  CHECK(before == after);
}

TEST_CASE("training is reproducible and thread-count independent") {
  auto data = tiny_data(16);
  auto val = tiny_data(4, 901);
  TrainConfig cfg;
  cfg.epochs = 2;
  cfg.batch = 4;
  cfg.warmup_steps = 2;
  cfg.peak_lr = 1e-3f;
  cfg.seed = 77;

  auto run = [&](int threads, const char* tag) {
    auto dir = temp_dir(tag);
    Model m = Model::init(tiny_config(), 31);
    TrainConfig c = cfg;
    c.threads = threads;
    TrainResult r = train(m, c, data, val, dir.string());
    return std::make_pair(snapshot(m), r);
  };
  auto [p1, r1] = run(1, "t1");
  auto [p2, r2] = run(2, "t2");
  CHECK(p1 == p2);
  REQUIRE(r1.log.size() == r2.log.size());
  for (size_t e = 0; e < r1.log.size(); ++e) {
    CHECK(r1.log[e].l_bbox == r2.log[e].l_bbox);
    CHECK(r1.log[e].l_sparse == r2.log[e].l_sparse);
    CHECK(r1.log[e].val.acc == r2.log[e].val.acc);
  }
}

TEST_CASE("metrics.csv has one line per epoch") {
  auto dir = temp_dir("metrics");
  Model m = Model::init(tiny_config(), 41);
  TrainConfig cfg;
  cfg.epochs = 3;
  cfg.batch = 4;
  cfg.warmup_steps = 0;
  cfg.peak_lr = 1e-3f;
  auto data = tiny_data(8);
  auto val = tiny_data(2, 902);
  train(m, cfg, data, val, dir.string());
  std::ifstream is(dir / "metrics.csv");
  int lines = 0;
  std::string line;
  while (std::getline(is, line))
    if (!line.empty()) ++lines;
  CHECK(lines == 3);
}

TEST_CASE("a poisoned parameter aborts with the offending batch") {
  auto dir = temp_dir("nan");
  Model m = Model::init(tiny_config(), 51);
  m.emb.word.mutable_data()[0] = std::numeric_limits<float>::quiet_NaN();
  TrainConfig cfg;
  cfg.epochs = 1;
  cfg.batch = 2;
  cfg.warmup_steps = 0;
  auto data = tiny_data(4);
  auto val = tiny_data(2, 903);
  CHECK_THROWS_AS(train(m, cfg, data, val, dir.string()), TrainError);
}

TEST_CASE("checkpoints reproduce evaluation bitwise") {
  auto dir = temp_dir("ckpt_eval");
  Model m = Model::init(tiny_config(), 61);
  auto val = tiny_data(6, 904);
  EvalStats before = evaluate(m, val);
  const std::string path = (dir / "m.ckpt").string();
  save_checkpoint(path, m);
  Model loaded = load_checkpoint(path);
  EvalStats after = evaluate(loaded, val);
  CHECK(before.acc == after.acc);
  CHECK(before.mean_iou == after.mean_iou);
  CHECK(before.sel_ratio == after.sel_ratio);
  CHECK(before.mean_macs == after.mean_macs);
}

TEST_CASE("evaluate reports per-scale ratios and accuracy") {
  Model m = Model::init(tiny_config(), 71);
  auto val = tiny_data(5, 905);
  EvalStats st = evaluate(m, val);
  REQUIRE(st.acc.size() == 3);
  CHECK(st.sel_ratio[0] == 1.0);  // the coarsest scale keeps everything
  for (double r : st.sel_ratio) {
    CHECK(r >= 0.0);
    CHECK(r <= 1.0);
  }
  CHECK(st.mean_macs > 0.0);
}
