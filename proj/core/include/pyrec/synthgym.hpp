#pragma once

#include <string>
#include <vector>

#include "pyrec/objectives.hpp"
#include "pyrec/pyramid.hpp"
#include "pyrec/rng.hpp"

namespace pyrec {

// Fixed query grammar: [COLOR] [SIZE?] [SHAPE] [POSITION?], padded with
// [PAD] (id 0). Vocabulary ids are line numbers of vocabulary().
inline constexpr int kNumColors = 8;
inline constexpr int kNumSizes = 2;
inline constexpr int kNumShapes = 3;
inline constexpr int kNumPositions = 4;

enum class ShapeKind : int { kRect = 0, kEllipse = 1, kTriangle = 2 };

struct SceneObject {
  ShapeKind shape = ShapeKind::kRect;
  int color = 0;  // 0..7
  int size = 0;   // 0 small, 1 large
  BBox box;       // normalized, fully inside the canvas
};

struct Scene {
  Image canvas;
  std::vector<SceneObject> objects;
};

struct Query {
  int color = 0;
  int size = -1;      // -1 = unspecified
  ShapeKind shape = ShapeKind::kRect;
  int position = -1;  // -1 = unspecified; 0 left, 1 right, 2 top, 3 bottom

  std::vector<int> token_ids(int text_len) const;
};

struct GenConfig {
  int image = 64;
  int channels = 3;
  int min_objects = 2;
  int max_objects = 5;
  float noise_base = 0.10f;  // background level
  float noise_amp = 0.05f;   // uniform amplitude around the base
  int text_len = 8;
  int max_retries = 64;
};

struct Sample {
  Image image;
  std::vector<int> query_ids;  // padded to text_len
  BBox gt;
};

struct Generated {
  Scene scene;
  Query query;
  int referent = 0;
};

const std::vector<std::string>& vocabulary();
void write_vocab(const std::string& path);
std::vector<std::string> read_vocab(const std::string& path);

/// True iff the object satisfies every predicate of the query. Positions are
/// strict sides of the canvas midline by box center.
bool matches(const SceneObject& object, const Query& query);

/// True iff exactly one scene object satisfies the query.
bool verify_unique_referent(const Scene& scene, const Query& query);

/// Deterministic in seed. The emitted query is verified unique; attributes
/// are resampled on ambiguity with a bounded retry budget.
Generated generate(uint64_t seed, const GenConfig& cfg);
Sample to_sample(const Generated& g, const GenConfig& cfg);
Sample generate_sample(uint64_t seed, const GenConfig& cfg);

// Uncompressed image file: three little-endian int32 extents (h, w, c)
// followed by row-major float32 payload.
void write_image(const std::string& path, const Image& img);
Image read_image(const std::string& path);

struct ManifestRecord {
  std::string image_path;  // relative to the manifest directory
  std::vector<int> query_ids;
  BBox gt;
};

/// Writes n samples plus manifest.txt and vocab.txt under out_dir and
/// returns the manifest path. Sample i draws from index_offset + i, so
/// train/val splits use disjoint index ranges of one seed.
std::string render_dataset(int n, uint64_t seed, const std::string& out_dir, const GenConfig& cfg,
                           uint64_t index_offset = 0);

std::vector<ManifestRecord> read_manifest(const std::string& manifest_path);

/// Loads every record's image into memory.
std::vector<Sample> load_dataset(const std::string& manifest_path);

}  // namespace pyrec
