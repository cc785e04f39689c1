#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <filesystem>
#include <fstream>

#include "pyrec/checkpoint.hpp"
#include "pyrec/config.hpp"
#include "pyrec/flops.hpp"
#include "pyrec/report.hpp"
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

fs::path temp_dir(const char* name) {
  fs::path p = fs::temp_directory_path() / "pyrec_tests" / name;
  fs::remove_all(p);
  fs::create_directories(p);
  return p;
}

std::vector<char> slurp(const fs::path& p) {
  std::ifstream is(p, std::ios::binary);
  return std::vector<char>((std::istreambuf_iterator<char>(is)), std::istreambuf_iterator<char>());
}

}  // namespace

TEST_CASE("with nothing replaced the merged and dense costs coincide") {
  ModelConfig cfg = ModelConfig::desk();
  ScanCounts counts;
  for (int l = 0; l < cfg.scales; ++l) counts.kept.push_back(cfg.level_tokens(l));
  FlopReport rep = flops_estimate(cfg, counts);
  for (const auto& s : rep.scales) {
    CHECK(s.macs_merged == s.macs_dense);
    CHECK(s.replaced == 0);
  }
  CHECK(rep.merged_over_dense() == doctest::Approx(1.0));
}

TEST_CASE("paper-preset counts give an effective finest sequence of 181 plus reg") {
  ModelConfig cfg = ModelConfig::paper();
  ScanCounts counts;
  counts.kept = {25, 60, 180};  // 40 and 220 replaced at scales 1 and 2
  FlopReport rep = flops_estimate(cfg, counts);
  CHECK(rep.scales[2].total == 400);
  CHECK(rep.scales[2].replaced == 220);
  CHECK(rep.scales[2].effective == 180 + 1 + 1);  // kept + constant + reg
  CHECK(rep.scales[1].effective == 60 + 1 + 1);
  CHECK(rep.total_merged() < rep.total_dense());
}

TEST_CASE("kept counts outside the valid range are input errors") {
  ModelConfig cfg = ModelConfig::desk();
  ScanCounts counts;
  counts.kept = {4, 17, 64};  // 17 > 16 available at scale 1
  CHECK_THROWS_AS(flops_estimate(cfg, counts), InputError);
  counts.kept = {4, 16};
  CHECK_THROWS_AS(flops_estimate(cfg, counts), InputError);
}

TEST_CASE("increasing a kept count never lowers the merged cost") {
  ModelConfig cfg = ModelConfig::desk();
  Rng rng(5);
  for (int trial = 0; trial < 20; ++trial) {
    ScanCounts counts;
    counts.kept = {cfg.level_tokens(0), rng.uniform_int(0, 15), rng.uniform_int(0, 63)};
    FlopReport base = flops_estimate(cfg, counts);
    ScanCounts more = counts;
    const int scale = rng.uniform_int(1, 2);
    if (more.kept[static_cast<size_t>(scale)] < cfg.level_tokens(scale)) {
      more.kept[static_cast<size_t>(scale)] += 1;
      FlopReport bigger = flops_estimate(cfg, more);
      CHECK(bigger.total_merged() >= base.total_merged());
    }
  }
}

TEST_CASE("the analytic model reproduces the instrumented counter exactly") {
  GenConfig g;
  g.image = 32;
  Sample s = generate_sample(17, g);
  Model m = Model::init(tiny_config(), 3);

  for (bool merge : {true, false}) {
    MacCounter counter;
    ScanState st;
    {
      MacCounterScope scope(&counter);
      ScanOptions so;
      so.mode = ScanMode::kEval;
      so.merge = merge;
      st = scan(m, s.image, s.query_ids, so);
    }
    ScanCounts counts;
    counts.text_tokens = st.text_tokens;
    for (const auto& tr : st.scales) counts.kept.push_back(tr.kept);
    FlopReport rep = flops_estimate(m.cfg, counts);
    const uint64_t analytic = merge ? rep.total_merged() : rep.total_dense();
    CHECK(counter.macs == st.flops.total());
    CHECK(analytic == counter.macs);
  }
}

TEST_CASE("selection maps keep kept pixels, gray out the rest, and draw the box") {
  // hand-built trace: 2x2 grid of 4px patches, patches 0 and 3 kept
  Image level;
  level.h = level.w = 8;
  level.c = 3;
  level.data.resize(static_cast<size_t>(8) * 8 * 3);
  Rng rng(9);
  for (float& v : level.data) v = 0.1f + 0.3f * rng.uniform();  // never mid-gray, never white

  ScaleTrace trace;
  trace.total = 4;
  trace.kept = 2;
  trace.replaced = 2;
  trace.kept_rows = {0, 3};
  trace.box = {0.75f, 0.25f, 0.25f, 0.25f};  // sits inside replaced patch 1

  Image out = render_selection_map(trace, level, 4);
  int kept_pixels = 0, gray_pixels = 0, white_pixels = 0;
  for (int y = 0; y < 8; ++y)
    for (int x = 0; x < 8; ++x) {
      const bool equals_level = out.at(y, x, 0) == level.at(y, x, 0) &&
                                out.at(y, x, 1) == level.at(y, x, 1) &&
                                out.at(y, x, 2) == level.at(y, x, 2);
      const bool gray = out.at(y, x, 0) == 0.5f && out.at(y, x, 1) == 0.5f && out.at(y, x, 2) == 0.5f;
      const bool white = out.at(y, x, 0) == 1.0f && out.at(y, x, 1) == 1.0f && out.at(y, x, 2) == 1.0f;
      kept_pixels += equals_level;
      gray_pixels += gray;
      white_pixels += white;
    }
  CHECK(kept_pixels == 2 * 4 * 4);  // kept patches * P^2 (outline avoids them here)
  CHECK(white_pixels > 0);
  CHECK(kept_pixels + gray_pixels + white_pixels == 64);

  // all kept: the image minus the outline
  ScaleTrace full = trace;
  full.kept_rows = {0, 1, 2, 3};
  full.kept = 4;
  full.replaced = 0;
  Image all_kept = render_selection_map(full, level, 4);
  int diff = 0;
  for (size_t i = 0; i < all_kept.data.size(); ++i)
    if (all_kept.data[i] != level.data[i]) ++diff;
  CHECK(diff > 0);            // the outline
  CHECK(diff <= 3 * 4 * 10);  // but nothing else

  // all replaced: gray everywhere except the outline
  ScaleTrace none = trace;
  none.kept_rows = {};
  none.kept = 0;
  none.replaced = 4;
  Image all_gone = render_selection_map(none, level, 4);
  for (int y = 0; y < 8; ++y)
    for (int x = 0; x < 8; ++x) {
      const bool gray = all_gone.at(y, x, 0) == 0.5f;
      const bool white = all_gone.at(y, x, 0) == 1.0f;
      CHECK((gray || white));
    }
}

TEST_CASE("ppm output is deterministic with a P6 header") {
  auto dir = temp_dir("ppm");
  Image img;
  img.h = img.w = 4;
  img.c = 3;
  img.data.assign(48, 0.25f);
  const std::string a = (dir / "a.ppm").string();
  const std::string b = (dir / "b.ppm").string();
  write_ppm(a, img);
  write_ppm(b, img);
  auto bytes = slurp(a);
  CHECK(bytes == slurp(b));
  CHECK(std::string(bytes.begin(), bytes.begin() + 2) == "P6");
}

TEST_CASE("eval rows and histograms are consistent with evaluate()") {
  GenConfig g;
  g.image = 32;
  std::vector<Sample> data;
  for (uint64_t i = 0; i < 12; ++i) data.push_back(generate_sample(300 + i, g));
  Model m = Model::init(tiny_config(), 5);

  auto evals = eval_samples(m, data);
  REQUIRE(evals.size() == data.size());
  auto hist = make_histogram(evals, m.cfg);

  // the coarsest scale is a point mass at its total
  REQUIRE(hist.per_scale[0].size() == 1);
  CHECK(hist.per_scale[0].begin()->first == m.cfg.level_tokens(0));
  CHECK(hist.per_scale[0].begin()->second == static_cast<int>(data.size()));

  // per-sample totals never exceed the global token budget
  int budget = 0;
  for (int l = 0; l < m.cfg.scales; ++l) budget += m.cfg.level_tokens(l);
  for (const auto& kept : hist.kept_per_sample) {
    int total = 0;
    for (int k : kept) total += k;
    CHECK(total <= budget);
  }

  // the stats tool and the trainer's evaluation agree on mean ratios
  EvalStats st = evaluate(m, data);
  for (int l = 0; l < m.cfg.scales; ++l)
    CHECK(std::fabs(hist.mean_ratio(l) - st.sel_ratio[static_cast<size_t>(l)]) <= 0.01);

  auto dir = temp_dir("rows");
  const std::string rows = (dir / "rows.csv").string();
  write_metric_rows(evals, rows);
  std::ifstream is(rows);
  std::string line;
  int lines = 0;
  while (std::getline(is, line)) {
    if (line.empty()) continue;
    ++lines;
    // id + S ious + 4S box coords + S ratios
    const size_t commas = static_cast<size_t>(std::count(line.begin(), line.end(), ','));
    CHECK(commas == static_cast<size_t>(3 + 12 + 3));
  }
  CHECK(lines == static_cast<int>(data.size()));

  const std::string hist_path = (dir / "hist.csv").string();
  write_histogram_csv(hist, hist_path);
  CHECK(slurp(hist_path).size() > 0);
}

TEST_CASE("run configuration parsing") {
  const char* text = R"(
# run configuration
model.d = 16
model.layers = 2
model.heads = 2
model.scales = 3
model.patch = 4
model.image = 32
model.split = 1
train.epochs = 2
train.peak_lr = 0.0005
gen.seed = 9
paths.data_dir = data
paths.out_dir = /abs/out
)";
  RunConfig rc = RunConfig::from_text(text, "/base");
  CHECK(rc.model.d == 16);
  CHECK(rc.train.epochs == 2);
  CHECK(rc.train.peak_lr == doctest::Approx(0.0005f));
  CHECK(rc.gen_seed == 9);
  CHECK(rc.data_dir == "/base/data");
  CHECK(rc.out_dir == "/abs/out");
  CHECK(rc.gen.image == 32);  // generator extents follow the model

  CHECK_THROWS_AS(RunConfig::from_text("model.unknown = 3"), ConfigError);
  CHECK_THROWS_AS(RunConfig::from_text("model.d: 3"), ConfigError);
  CHECK_THROWS_AS(RunConfig::from_text("train.epochs = soon"), ConfigError);
}

TEST_CASE("checkpoints round-trip bit-exactly") {
  auto dir = temp_dir("ckpt");
  Model m = Model::init(tiny_config(), 9);
  const std::string a = (dir / "a.ckpt").string();
  const std::string b = (dir / "b.ckpt").string();
  save_checkpoint(a, m);

  ModelConfig echoed = checkpoint_config(a);
  CHECK(echoed.d == 16);
  CHECK(echoed.layers == 2);

  Model loaded = load_checkpoint(a);
  auto pa = m.parameters();
  auto pb = loaded.parameters();
  REQUIRE(pa.size() == pb.size());
  for (size_t i = 0; i < pa.size(); ++i) {
    REQUIRE(pa[i].numel() == pb[i].numel());
    for (size_t j = 0; j < pa[i].numel(); ++j) CHECK(pa[i].at(j) == pb[i].at(j));
  }

  save_checkpoint(b, loaded);
  CHECK(slurp(a) == slurp(b));

  // corrupt header
  std::ofstream bad((dir / "bad.ckpt").string());
  bad << "NOT-A-CHECKPOINT\n";
  bad.close();
  CHECK_THROWS_AS(load_checkpoint((dir / "bad.ckpt").string()), IoError);
}
