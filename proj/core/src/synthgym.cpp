#include "pyrec/synthgym.hpp"

#include <algorithm>
#include <array>
#include <cstdint>
#include <cstdio>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <sstream>

#include "pyrec/errors.hpp"

namespace pyrec {

namespace {

constexpr std::array<std::array<float, 3>, kNumColors> kPalette = {{
    {1.0f, 0.0f, 0.0f},  // red
    {0.0f, 1.0f, 0.0f},  // green
    {0.0f, 0.0f, 1.0f},  // blue
    {1.0f, 1.0f, 0.0f},  // yellow
    {1.0f, 0.0f, 1.0f},  // magenta
    {0.0f, 1.0f, 1.0f},  // cyan
    {1.0f, 0.5f, 0.0f},  // orange
    {0.5f, 0.0f, 0.5f},  // purple
}};

int color_id(int c) { return 1 + c; }
int size_id(int s) { return 1 + kNumColors + s; }
int shape_id(ShapeKind s) { return 1 + kNumColors + kNumSizes + static_cast<int>(s); }
int position_id(int p) { return 1 + kNumColors + kNumSizes + kNumShapes + p; }

struct PixelBox {
  int x0, y0, x1, y1;  // half-open
  int w() const { return x1 - x0; }
  int h() const { return y1 - y0; }
};

BBox normalize(const PixelBox& pb, int side) {
  const float s = static_cast<float>(side);
  return {(pb.x0 + 0.5f * pb.w()) / s, (pb.y0 + 0.5f * pb.h()) / s, pb.w() / s, pb.h() / s};
}

void draw_object(Image& img, const SceneObject& obj, const PixelBox& pb) {
  const auto& rgb = kPalette[static_cast<size_t>(obj.color)];
  const float cx = 0.5f * (pb.x0 + pb.x1 - 1);
  const float cy = 0.5f * (pb.y0 + pb.y1 - 1);
  const float rx = 0.5f * pb.w();
  const float ry = 0.5f * pb.h();
  for (int y = pb.y0; y < pb.y1; ++y) {
    for (int x = pb.x0; x < pb.x1; ++x) {
      bool inside = true;
      if (obj.shape == ShapeKind::kEllipse) {
        const float dx = (x - cx) / rx;
        const float dy = (y - cy) / ry;
        inside = dx * dx + dy * dy <= 1.0f;
      } else if (obj.shape == ShapeKind::kTriangle) {
        // apex at the top center, base along the bottom edge
        const float t = pb.h() <= 1 ? 1.0f : static_cast<float>(y - pb.y0) / (pb.h() - 1);
        inside = std::fabs(x - cx) <= t * rx;
      }
      if (!inside) continue;
      for (int ch = 0; ch < img.c; ++ch) img.at(y, x, ch) = rgb[static_cast<size_t>(ch)];
    }
  }
}

bool try_place(Rng& rng, const GenConfig& cfg, const std::vector<PixelBox>& placed,
               int size_class, PixelBox* out) {
  const int side = cfg.image;
  const int lo = size_class == 0 ? std::max(4, side * 9 / 100) : side * 25 / 100;
  const int hi = size_class == 0 ? side * 20 / 100 : side * 40 / 100;
  for (int attempt = 0; attempt < 100; ++attempt) {
    const int w = rng.uniform_int(lo, hi);
    const int h = rng.uniform_int(lo, hi);
    const int x0 = rng.uniform_int(0, side - w);
    const int y0 = rng.uniform_int(0, side - h);
    PixelBox pb{x0, y0, x0 + w, y0 + h};
    bool ok = true;
    for (const auto& other : placed) {
      BBox a = normalize(pb, side), b = normalize(other, side);
      if (iou(a, b) > 0.1f) {
        ok = false;
        break;
      }
    }
    if (ok) {
      *out = pb;
      return true;
    }
  }
  return false;
}

bool build_scene(Rng& rng, const GenConfig& cfg, Scene* scene,
                 std::vector<PixelBox>* pixel_boxes) {
  scene->objects.clear();
  pixel_boxes->clear();
  const int n = rng.uniform_int(cfg.min_objects, cfg.max_objects);
  for (int i = 0; i < n; ++i) {
    SceneObject obj;
    obj.color = rng.uniform_int(0, kNumColors - 1);
    obj.shape = static_cast<ShapeKind>(rng.uniform_int(0, kNumShapes - 1));
    obj.size = rng.uniform_int(0, kNumSizes - 1);
    PixelBox pb;
    if (!try_place(rng, cfg, *pixel_boxes, obj.size, &pb)) return false;
    obj.box = normalize(pb, cfg.image);
    scene->objects.push_back(obj);
    pixel_boxes->push_back(pb);
  }

  Image& img = scene->canvas;
  img.h = img.w = cfg.image;
  img.c = cfg.channels;
  img.data.resize(static_cast<size_t>(img.h) * img.w * img.c);
  for (float& v : img.data) v = cfg.noise_base + cfg.noise_amp * (2.0f * rng.uniform() - 1.0f);
  for (size_t i = 0; i < scene->objects.size(); ++i)
    draw_object(img, scene->objects[i], (*pixel_boxes)[i]);
  return true;
}

}  // namespace

std::vector<int> Query::token_ids(int text_len) const {
  std::vector<int> ids;
  ids.push_back(color_id(color));
  if (size >= 0) ids.push_back(size_id(size));
  ids.push_back(shape_id(shape));
  if (position >= 0) ids.push_back(position_id(position));
  ids.resize(static_cast<size_t>(text_len), 0);
  return ids;
}

const std::vector<std::string>& vocabulary() {
  static const std::vector<std::string> vocab = {
      "[PAD]",  "red",   "green",    "blue", "yellow", "magenta", "cyan",   "orange", "purple",
      "small",  "large", "rect",     "ellipse", "triangle", "left", "right", "top",   "bottom"};
  return vocab;
}

void write_vocab(const std::string& path) {
  std::ofstream os(path);
  if (!os) throw IoError("write_vocab: cannot open " + path);
  for (const auto& tok : vocabulary()) os << tok << "\n";
}

std::vector<std::string> read_vocab(const std::string& path) {
  std::ifstream is(path);
  if (!is) throw IoError("read_vocab: cannot open " + path);
  std::vector<std::string> out;
  std::string line;
  while (std::getline(is, line))
    if (!line.empty()) out.push_back(line);
  return out;
}

bool matches(const SceneObject& o, const Query& q) {
  if (o.color != q.color || o.shape != q.shape) return false;
  if (q.size >= 0 && o.size != q.size) return false;
  if (q.position >= 0) {
    switch (q.position) {
      case 0: return o.box.x < 0.5f;
      case 1: return o.box.x > 0.5f;
      case 2: return o.box.y < 0.5f;
      case 3: return o.box.y > 0.5f;
      default: return false;
    }
  }
  return true;
}

bool verify_unique_referent(const Scene& scene, const Query& query) {
  int count = 0;
  for (const auto& o : scene.objects)
    if (matches(o, query)) ++count;
  return count == 1;
}

Generated generate(uint64_t seed, const GenConfig& cfg) {
  Rng rng(hash_combine(seed, 0x73636e65ULL));
  for (int attempt = 0; attempt < cfg.max_retries; ++attempt) {
    Scene scene;
    std::vector<PixelBox> boxes;
    if (!build_scene(rng, cfg, &scene, &boxes)) continue;

    // candidate referents in random order
    std::vector<int> order(scene.objects.size());
    for (size_t i = 0; i < order.size(); ++i) order[static_cast<size_t>(i)] = static_cast<int>(i);
    for (size_t i = order.size(); i > 1; --i)
      std::swap(order[i - 1], order[static_cast<size_t>(rng.uniform_int(0, static_cast<int>(i) - 1))]);

    const bool want_size = rng.uniform() < 0.5f;
    const bool want_pos = rng.uniform() < 0.5f;
    for (int ref : order) {
      const SceneObject& o = scene.objects[static_cast<size_t>(ref)];
      const int pos = o.box.x < 0.5f ? 0 : (o.box.x > 0.5f ? 1 : (o.box.y < 0.5f ? 2 : 3));
      // try the drawn attribute set first, then add detail until unique
      const std::array<std::pair<bool, bool>, 4> variants = {{
          {want_size, want_pos}, {want_size, !want_pos}, {!want_size, want_pos}, {true, true}}};
      for (const auto& [with_size, with_pos] : variants) {
        Query q;
        q.color = o.color;
        q.shape = o.shape;
        q.size = with_size ? o.size : -1;
        q.position = with_pos ? pos : -1;
        if (verify_unique_referent(scene, q)) {
          Generated g;
          g.scene = std::move(scene);
          g.query = q;
          g.referent = ref;
          return g;
        }
      }
    }
  }
  throw GenError("generate: retry budget exhausted for seed " + std::to_string(seed));
}

Sample to_sample(const Generated& g, const GenConfig& cfg) {
  Sample s;
  s.image = g.scene.canvas;
  s.query_ids = g.query.token_ids(cfg.text_len);
  s.gt = g.scene.objects[static_cast<size_t>(g.referent)].box;
  return s;
}

Sample generate_sample(uint64_t seed, const GenConfig& cfg) {
  return to_sample(generate(seed, cfg), cfg);
}

void write_image(const std::string& path, const Image& img) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw IoError("write_image: cannot open " + path);
  const int32_t hdr[3] = {img.h, img.w, img.c};
  os.write(reinterpret_cast<const char*>(hdr), sizeof(hdr));
  os.write(reinterpret_cast<const char*>(img.data.data()),
           static_cast<std::streamsize>(img.data.size() * sizeof(float)));
  if (!os) throw IoError("write_image: write failed for " + path);
}

Image read_image(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw IoError("read_image: cannot open " + path);
  int32_t hdr[3];
  is.read(reinterpret_cast<char*>(hdr), sizeof(hdr));
  if (!is || hdr[0] <= 0 || hdr[1] <= 0 || hdr[2] <= 0)
    throw IoError("read_image: bad header in " + path);
  Image img;
  img.h = hdr[0];
  img.w = hdr[1];
  img.c = hdr[2];
  img.data.resize(static_cast<size_t>(img.h) * img.w * img.c);
  is.read(reinterpret_cast<char*>(img.data.data()),
          static_cast<std::streamsize>(img.data.size() * sizeof(float)));
  if (!is) throw IoError("read_image: truncated payload in " + path);
  return img;
}

std::string render_dataset(int n, uint64_t seed, const std::string& out_dir, const GenConfig& cfg,
                           uint64_t index_offset) {
  namespace fs = std::filesystem;
  std::error_code ec;
  fs::create_directories(fs::path(out_dir) / "images", ec);
  if (ec) throw IoError("render_dataset: cannot create " + out_dir);
  write_vocab((fs::path(out_dir) / "vocab.txt").string());

  const std::string manifest_path = (fs::path(out_dir) / "manifest.txt").string();
  std::ofstream manifest(manifest_path);
  if (!manifest) throw IoError("render_dataset: cannot open " + manifest_path);
  char name[64];
  for (int i = 0; i < n; ++i) {
    Sample s = generate_sample(hash_combine(seed, index_offset + static_cast<uint64_t>(i)), cfg);
    std::snprintf(name, sizeof(name), "images/sample_%06d.bin", i);
    write_image((fs::path(out_dir) / name).string(), s.image);
    manifest << name;
    for (int id : s.query_ids) manifest << ' ' << id;
    char box[96];
    std::snprintf(box, sizeof(box), " %.6f %.6f %.6f %.6f", s.gt.x, s.gt.y, s.gt.w, s.gt.h);
    manifest << box << "\n";
  }
  manifest.close();
  if (!manifest) throw IoError("render_dataset: manifest write failed");
  return manifest_path;
}

std::vector<ManifestRecord> read_manifest(const std::string& manifest_path) {
  std::ifstream is(manifest_path);
  if (!is) throw IoError("read_manifest: cannot open " + manifest_path);
  std::vector<ManifestRecord> out;
  std::string line;
  while (std::getline(is, line)) {
    if (line.empty()) continue;
    std::istringstream ls(line);
    ManifestRecord rec;
    ls >> rec.image_path;
    std::vector<float> tail;
    float v;
    while (ls >> v) tail.push_back(v);
    if (tail.size() < 4) throw IoError("read_manifest: malformed line: " + line);
    for (size_t i = 0; i + 4 < tail.size(); ++i)
      rec.query_ids.push_back(static_cast<int>(tail[i]));
    rec.gt = {tail[tail.size() - 4], tail[tail.size() - 3], tail[tail.size() - 2],
              tail[tail.size() - 1]};
    out.push_back(std::move(rec));
  }
  return out;
}

std::vector<Sample> load_dataset(const std::string& manifest_path) {
  namespace fs = std::filesystem;
  const fs::path dir = fs::path(manifest_path).parent_path();
  std::vector<Sample> out;
  for (const auto& rec : read_manifest(manifest_path)) {
    Sample s;
    s.image = read_image((dir / rec.image_path).string());
    s.query_ids = rec.query_ids;
    s.gt = rec.gt;
    out.push_back(std::move(s));
  }
  return out;
}

}  // namespace pyrec
