#include "pyrec/report.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <fstream>
#include <thread>

#include "pyrec/errors.hpp"
#include "pyrec/objectives.hpp"

namespace pyrec {

void write_ppm(const std::string& path, const Image& img) {
  if (img.c != 3) throw InputError("write_ppm: needs a 3-channel image");
  std::ofstream os(path, std::ios::binary);
  if (!os) throw IoError("write_ppm: cannot open " + path);
  os << "P6\n" << img.w << " " << img.h << "\n255\n";
  std::vector<unsigned char> row(static_cast<size_t>(img.w) * 3);
  for (int y = 0; y < img.h; ++y) {
    for (int x = 0; x < img.w; ++x)
      for (int ch = 0; ch < 3; ++ch) {
        const long v = std::lround(img.at(y, x, ch) * 255.0f);
        row[static_cast<size_t>(x) * 3 + static_cast<size_t>(ch)] =
            static_cast<unsigned char>(std::clamp(v, 0L, 255L));
      }
    os.write(reinterpret_cast<const char*>(row.data()), static_cast<std::streamsize>(row.size()));
  }
  if (!os) throw IoError("write_ppm: write failed for " + path);
}

Image render_selection_map(const ScaleTrace& trace, const Image& level_image, int patch) {
  const int side = level_image.h;
  const int cols = side / patch;
  Image out;
  out.h = out.w = side;
  out.c = level_image.c;
  out.data.assign(level_image.data.size(), 0.5f);  // replaced patches stay mid-gray

  for (int idx : trace.kept_rows) {
    const int r = idx / cols, c = idx % cols;
    for (int py = 0; py < patch; ++py)
      for (int px = 0; px < patch; ++px)
        for (int ch = 0; ch < out.c; ++ch)
          out.at(r * patch + py, c * patch + px, ch) =
              level_image.at(r * patch + py, c * patch + px, ch);
  }

  // 1-pixel white outline of the predicted box
  const BBox box{trace.box[0], trace.box[1], trace.box[2], trace.box[3]};
  const auto corners = box.corners();
  auto to_px = [side](float v) {
    return std::clamp(static_cast<int>(std::lround(v * side)), 0, side - 1);
  };
  const int x1 = to_px(corners[0]), y1 = to_px(corners[1]);
  const int x2 = to_px(corners[2]), y2 = to_px(corners[3]);
  auto paint = [&](int y, int x) {
    for (int ch = 0; ch < out.c; ++ch) out.at(y, x, ch) = 1.0f;
  };
  for (int x = x1; x <= x2; ++x) {
    paint(y1, x);
    paint(y2, x);
  }
  for (int y = y1; y <= y2; ++y) {
    paint(y, x1);
    paint(y, x2);
  }
  return out;
}

void emit_selection_map(const ScanState& state, const ImagePyramid& pyr, int patch,
                        const std::string& out_prefix) {
  for (size_t l = 0; l < state.scales.size(); ++l) {
    Image img = render_selection_map(state.scales[l], pyr.levels[l], patch);
    write_ppm(out_prefix + "_scale" + std::to_string(l) + ".ppm", img);
  }
}

std::vector<SampleEval> eval_samples(const Model& model, std::span<const Sample> data, bool merge,
                                     int threads) {
  const int n = static_cast<int>(data.size());
  std::vector<SampleEval> out(static_cast<size_t>(n));
  int t = threads;
  if (t <= 0) {
    const unsigned hw = std::thread::hardware_concurrency();
    t = static_cast<int>(std::min<unsigned>(hw == 0 ? 1 : hw, 8));
  }
  std::atomic<int> next{0};
  auto work = [&] {
    for (int i = next.fetch_add(1); i < n; i = next.fetch_add(1)) {
      ScanOptions so;
      so.mode = ScanMode::kEval;
      so.merge = merge;
      ScanState st = scan(model, data[static_cast<size_t>(i)].image,
                          data[static_cast<size_t>(i)].query_ids, so);
      SampleEval& ev = out[static_cast<size_t>(i)];
      for (const auto& tr : st.scales) {
        const BBox b{tr.box[0], tr.box[1], tr.box[2], tr.box[3]};
        ev.boxes.push_back(b);
        ev.ious.push_back(iou(b, data[static_cast<size_t>(i)].gt));
        ev.kept.push_back(tr.kept);
        ev.total.push_back(tr.total);
      }
      ev.macs = st.flops.total();
    }
  };
  std::vector<std::thread> pool;
  for (int i = 0; i < std::min(t, n) - 1; ++i) pool.emplace_back(work);
  work();
  for (auto& th : pool) th.join();
  return out;
}

void write_metric_rows(std::span<const SampleEval> evals, const std::string& path) {
  std::ofstream os(path);
  if (!os) throw IoError("write_metric_rows: cannot open " + path);
  for (size_t i = 0; i < evals.size(); ++i) {
    const auto& ev = evals[i];
    os << i;
    for (double v : ev.ious) os << "," << v;
    for (const auto& b : ev.boxes) os << "," << b.x << "," << b.y << "," << b.w << "," << b.h;
    for (size_t l = 0; l < ev.kept.size(); ++l)
      os << "," << static_cast<double>(ev.kept[l]) / static_cast<double>(ev.total[l]);
    os << "\n";
  }
  if (!os) throw IoError("write_metric_rows: write failed for " + path);
}

double SelectionHistogram::mean_ratio(int scale) const {
  const auto& hist = per_scale[static_cast<size_t>(scale)];
  double acc = 0.0;
  long n = 0;
  for (const auto& [kept, count] : hist) {
    acc += static_cast<double>(kept) * count;
    n += count;
  }
  if (n == 0) return 0.0;
  return acc / (static_cast<double>(n) * totals[static_cast<size_t>(scale)]);
}

SelectionHistogram make_histogram(std::span<const SampleEval> evals, const ModelConfig& cfg) {
  SelectionHistogram h;
  h.totals.resize(static_cast<size_t>(cfg.scales));
  for (int l = 0; l < cfg.scales; ++l) h.totals[static_cast<size_t>(l)] = cfg.level_tokens(l);
  h.per_scale.resize(static_cast<size_t>(cfg.scales));
  for (const auto& ev : evals) {
    std::vector<int> kept(static_cast<size_t>(cfg.scales), 0);
    for (int l = 0; l < cfg.scales && l < static_cast<int>(ev.kept.size()); ++l) {
      kept[static_cast<size_t>(l)] = ev.kept[static_cast<size_t>(l)];
      h.per_scale[static_cast<size_t>(l)][ev.kept[static_cast<size_t>(l)]] += 1;
    }
    h.kept_per_sample.push_back(std::move(kept));
  }
  return h;
}

void write_histogram_csv(const SelectionHistogram& hist, const std::string& path) {
  std::ofstream os(path);
  if (!os) throw IoError("write_histogram_csv: cannot open " + path);
  for (size_t l = 0; l < hist.per_scale.size(); ++l)
    for (const auto& [kept, count] : hist.per_scale[l])
      os << "scale," << l << "," << kept << "," << count << "\n";
  for (size_t i = 0; i < hist.kept_per_sample.size(); ++i) {
    os << "sample," << i;
    int total = 0;
    for (int k : hist.kept_per_sample[i]) {
      os << "," << k;
      total += k;
    }
    os << "," << total << "\n";
  }
  if (!os) throw IoError("write_histogram_csv: write failed for " + path);
}

}  // namespace pyrec
