// Command-line driver: dataset generation, training, evaluation,
// benchmarking, cost accounting, and selection-map visualization.

#include <algorithm>
#include <chrono>
#include <cstdio>
#include <cstring>
#include <filesystem>
#include <iostream>
#include <sstream>
#include <string>
#include <vector>

#include "pyrec/checkpoint.hpp"
#include "pyrec/config.hpp"
#include "pyrec/flops.hpp"
#include "pyrec/model.hpp"
#include "pyrec/objectives.hpp"
#include "pyrec/report.hpp"
#include "pyrec/synthgym.hpp"
#include "pyrec/trainer.hpp"

namespace fs = std::filesystem;
using namespace pyrec;

namespace {

const char* kUsage = R"(usage: pyrec <command> --config <file> [options]

commands:
  gen     write the synthetic train/val datasets under paths.data_dir
  train   optimize a model end-to-end; outputs under paths.out_dir
  eval    print per-scale Acc@0.5 for a checkpoint on the val split
  bench   analytic cost report + wall-clock medians, merged vs duplicate
  flops   analytic cost report for given per-scale kept counts
  viz     per-scale selection maps for one sample as P6 pixmaps

options:
  --config <file>      run configuration (required)
  --seed <n>           override gen.seed (gen, bench) or pick the sample (viz)
  --out <dir>          override the output directory
  --checkpoint <file>  override paths.checkpoint
  --kept <a,b,..>      per-scale kept counts for flops
  --scans <n>          scan count for bench (default 100, minimum 100)
)";

struct Args {
  std::string command;
  std::string config;
  std::string out;
  std::string checkpoint;
  std::string kept;
  uint64_t seed = 0;
  bool has_seed = false;
  int scans = 100;
};

int parse_args(int argc, char** argv, Args* args) {
  if (argc < 2) {
    std::cerr << kUsage;
    return 2;
  }
  args->command = argv[1];
  const char* known[] = {"gen", "train", "eval", "bench", "flops", "viz"};
  if (std::find_if(std::begin(known), std::end(known),
                   [&](const char* k) { return args->command == k; }) == std::end(known)) {
    std::cerr << "pyrec: unknown command '" << args->command << "'\n" << kUsage;
    return 2;
  }
  for (int i = 2; i < argc; ++i) {
    const std::string flag = argv[i];
    auto value = [&]() -> const char* {
      if (i + 1 >= argc) return nullptr;
      return argv[++i];
    };
    if (flag == "--config") {
      const char* v = value();
      if (!v) break;
      args->config = v;
    } else if (flag == "--seed") {
      const char* v = value();
      if (!v) break;
      args->seed = std::stoull(v);
      args->has_seed = true;
    } else if (flag == "--out") {
      const char* v = value();
      if (!v) break;
      args->out = v;
    } else if (flag == "--checkpoint") {
      const char* v = value();
      if (!v) break;
      args->checkpoint = v;
    } else if (flag == "--kept") {
      const char* v = value();
      if (!v) break;
      args->kept = v;
    } else if (flag == "--scans") {
      const char* v = value();
      if (!v) break;
      args->scans = std::stoi(v);
    } else {
      std::cerr << "pyrec: unknown flag '" << flag << "'\n" << kUsage;
      return 2;
    }
  }
  if (args->config.empty()) {
    std::cerr << "pyrec: --config is required\n" << kUsage;
    return 2;
  }
  return 0;
}

RunConfig load_run(const Args& args) {
  RunConfig rc = RunConfig::load(args.config);
  if (!args.out.empty()) rc.out_dir = args.out;
  if (!args.checkpoint.empty()) rc.checkpoint = args.checkpoint;
  return rc;
}

int cmd_gen(const Args& args) {
  RunConfig rc = load_run(args);
  if (!args.out.empty()) rc.data_dir = args.out;
  if (rc.data_dir.empty()) throw ConfigError("gen: paths.data_dir is not set");
  const uint64_t seed = args.has_seed ? args.seed : rc.gen_seed;
  const std::string train_manifest = render_dataset(
      rc.train.train_samples, seed, (fs::path(rc.data_dir) / "train").string(), rc.gen, 0);
  const std::string val_manifest = render_dataset(
      rc.train.val_samples, seed, (fs::path(rc.data_dir) / "val").string(), rc.gen,
      static_cast<uint64_t>(rc.train.train_samples));
  std::cout << "wrote " << rc.train.train_samples << " train samples: " << train_manifest << "\n";
  std::cout << "wrote " << rc.train.val_samples << " val samples: " << val_manifest << "\n";
  return 0;
}

int cmd_train(const Args& args) {
  RunConfig rc = load_run(args);
  if (rc.data_dir.empty()) throw ConfigError("train: paths.data_dir is not set");
  if (rc.out_dir.empty()) throw ConfigError("train: paths.out_dir is not set");
  auto train_data = load_dataset((fs::path(rc.data_dir) / "train" / "manifest.txt").string());
  auto val_data = load_dataset((fs::path(rc.data_dir) / "val" / "manifest.txt").string());
  Model model = Model::init(rc.model, rc.train.seed);
  TrainResult res = train(model, rc.train, train_data, val_data, rc.out_dir, &std::cout);
  std::cout << "best val Acc@0.5 (finest scale): " << res.best_acc << "\n";
  std::cout << "checkpoint: " << res.best_checkpoint << "\n";
  std::cout << "metrics: " << (fs::path(rc.out_dir) / "metrics.csv").string() << "\n";
  return 0;
}

int cmd_eval(const Args& args) {
  RunConfig rc = load_run(args);
  if (rc.checkpoint.empty()) throw ConfigError("eval: no checkpoint given");
  Model model = load_checkpoint(rc.checkpoint);
  auto val_data = load_dataset((fs::path(rc.data_dir) / "val" / "manifest.txt").string());
  auto evals = eval_samples(model, val_data, /*merge=*/true);
  const int S = model.cfg.scales;
  for (int l = 0; l < S; ++l) {
    int hits = 0;
    double iou_sum = 0.0;
    for (const auto& ev : evals) {
      if (ev.ious[static_cast<size_t>(l)] > 0.5) ++hits;
      iou_sum += ev.ious[static_cast<size_t>(l)];
    }
    std::printf("scale %d: Acc@0.5 %.2f%%  mean IoU %.4f\n", l,
                100.0 * hits / static_cast<double>(evals.size()),
                iou_sum / static_cast<double>(evals.size()));
  }
  if (!rc.out_dir.empty()) {
    fs::create_directories(rc.out_dir);
    const std::string rows = (fs::path(rc.out_dir) / "eval_rows.csv").string();
    write_metric_rows(evals, rows);
    auto hist = make_histogram(evals, model.cfg);
    const std::string hist_path = (fs::path(rc.out_dir) / "selection_stats.csv").string();
    write_histogram_csv(hist, hist_path);
    std::cout << "rows: " << rows << "\nstats: " << hist_path << "\n";
  }
  return 0;
}

void print_report(const FlopReport& rep) {
  std::printf("%-6s %7s %7s %9s %10s %14s %14s\n", "scale", "total", "kept", "replaced",
              "effective", "macs(merged)", "macs(dense)");
  for (size_t l = 0; l < rep.scales.size(); ++l) {
    const auto& s = rep.scales[l];
    std::printf("%-6zu %7d %7d %9d %10d %14llu %14llu\n", l, s.total, s.kept, s.replaced,
                s.effective, static_cast<unsigned long long>(s.macs_merged),
                static_cast<unsigned long long>(s.macs_dense));
  }
  std::printf("text tokens %d, text macs %llu\n", rep.text_tokens,
              static_cast<unsigned long long>(rep.text_macs));
  std::printf("total merged %llu, total dense %llu, ratio %.4f\n",
              static_cast<unsigned long long>(rep.total_merged()),
              static_cast<unsigned long long>(rep.total_dense()), rep.merged_over_dense());
}

int cmd_flops(const Args& args) {
  RunConfig rc = load_run(args);
  ScanCounts counts;
  counts.kept.assign(static_cast<size_t>(rc.model.scales), 0);
  for (int l = 0; l < rc.model.scales; ++l)
    counts.kept[static_cast<size_t>(l)] = rc.model.level_tokens(l);
  if (!args.kept.empty()) {
    std::istringstream is(args.kept);
    std::string part;
    size_t l = 0;
    while (std::getline(is, part, ',') && l < counts.kept.size())
      counts.kept[l++] = std::stoi(part);
    if (l != counts.kept.size()) throw InputError("flops: --kept needs one count per scale");
  }
  print_report(flops_estimate(rc.model, counts));
  return 0;
}

int cmd_bench(const Args& args) {
  RunConfig rc = load_run(args);
  Model model = rc.checkpoint.empty() ? Model::init(rc.model, rc.train.seed)
                                      : load_checkpoint(rc.checkpoint);
  const int n = std::max(args.scans, 100);
  const uint64_t seed = args.has_seed ? args.seed : rc.gen_seed;
  std::vector<Sample> samples;
  samples.reserve(static_cast<size_t>(n));
  for (int i = 0; i < n; ++i)
    samples.push_back(generate_sample(hash_combine(seed, 0xbe4cULL + static_cast<uint64_t>(i)), rc.gen));

  auto time_mode = [&](bool merge, std::vector<double>* kept_mean) {
    std::vector<double> us(static_cast<size_t>(n));
    std::vector<double> kept(static_cast<size_t>(model.cfg.scales), 0.0);
    for (int i = 0; i < n; ++i) {
      ScanOptions so;
      so.mode = ScanMode::kEval;
      so.merge = merge;
      const auto t0 = std::chrono::steady_clock::now();
      ScanState st = scan(model, samples[static_cast<size_t>(i)].image,
                          samples[static_cast<size_t>(i)].query_ids, so);
      const auto t1 = std::chrono::steady_clock::now();
      us[static_cast<size_t>(i)] =
          std::chrono::duration_cast<std::chrono::nanoseconds>(t1 - t0).count() / 1000.0;
      for (int l = 0; l < model.cfg.scales; ++l)
        kept[static_cast<size_t>(l)] += st.scales[static_cast<size_t>(l)].kept;
    }
    std::sort(us.begin(), us.end());
    if (kept_mean)
      for (double& k : kept) kept_mean->push_back(k / n);
    return us[us.size() / 2];
  };

  std::vector<double> kept_mean;
  const double merged_us = time_mode(true, &kept_mean);
  const double dense_us = time_mode(false, nullptr);

  ScanCounts counts;
  for (double k : kept_mean) counts.kept.push_back(static_cast<int>(std::lround(k)));
  print_report(flops_estimate(rc.model, counts));
  std::printf("median scan wall-clock over %d scans: merged %.1f us, duplicate %.1f us\n", n,
              merged_us, dense_us);
  return 0;
}

int cmd_viz(const Args& args) {
  RunConfig rc = load_run(args);
  if (rc.checkpoint.empty()) throw ConfigError("viz: no checkpoint given");
  Model model = load_checkpoint(rc.checkpoint);
  const uint64_t sample_seed = args.has_seed ? args.seed : 0;
  Sample s = generate_sample(hash_combine(rc.gen_seed, sample_seed), rc.gen);
  ImagePyramid pyr = build_pyramid(s.image, model.cfg.scales);
  ScanOptions so;
  so.mode = ScanMode::kEval;
  ScanState st = scan_pyramid(model, pyr, s.query_ids, so);
  const std::string dir = rc.out_dir.empty() ? "." : rc.out_dir;
  fs::create_directories(dir);
  const std::string prefix =
      (fs::path(dir) / ("sample_" + std::to_string(sample_seed))).string();
  emit_selection_map(st, pyr, model.cfg.patch, prefix);
  for (int l = 0; l < model.cfg.scales; ++l)
    std::cout << prefix << "_scale" << l << ".ppm\n";
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  Args args;
  const int rc = parse_args(argc, argv, &args);
  if (rc != 0) return rc;
  try {
    if (args.command == "gen") return cmd_gen(args);
    if (args.command == "train") return cmd_train(args);
    if (args.command == "eval") return cmd_eval(args);
    if (args.command == "bench") return cmd_bench(args);
    if (args.command == "flops") return cmd_flops(args);
    if (args.command == "viz") return cmd_viz(args);
  } catch (const std::exception& e) {
    std::cerr << "pyrec: " << e.what() << "\n";
    return 1;
  }
  return 2;
}
