#include "pyrec/config.hpp"

#include <filesystem>
#include <fstream>
#include <sstream>

#include "pyrec/errors.hpp"

namespace pyrec {

namespace {

std::string trim(const std::string& s) {
  size_t a = s.find_first_not_of(" \t\r");
  size_t b = s.find_last_not_of(" \t\r");
  if (a == std::string::npos) return "";
  return s.substr(a, b - a + 1);
}

int to_int(const std::string& key, const std::string& v) {
  try {
    size_t pos = 0;
    const int r = std::stoi(v, &pos);
    if (pos != v.size()) throw std::invalid_argument(v);
    return r;
  } catch (const std::exception&) {
    throw ConfigError("config: bad integer for " + key + ": '" + v + "'");
  }
}

float to_float(const std::string& key, const std::string& v) {
  try {
    size_t pos = 0;
    const float r = std::stof(v, &pos);
    if (pos != v.size()) throw std::invalid_argument(v);
    return r;
  } catch (const std::exception&) {
    throw ConfigError("config: bad number for " + key + ": '" + v + "'");
  }
}

uint64_t to_u64(const std::string& key, const std::string& v) {
  try {
    size_t pos = 0;
    const uint64_t r = std::stoull(v, &pos);
    if (pos != v.size()) throw std::invalid_argument(v);
    return r;
  } catch (const std::exception&) {
    throw ConfigError("config: bad unsigned for " + key + ": '" + v + "'");
  }
}

}  // namespace

RunConfig RunConfig::from_text(const std::string& text, const std::string& base_dir) {
  RunConfig rc;
  std::istringstream is(text);
  std::string line;
  auto resolve = [&base_dir](const std::string& p) {
    namespace fs = std::filesystem;
    if (p.empty() || base_dir.empty() || fs::path(p).is_absolute()) return p;
    return (fs::path(base_dir) / p).lexically_normal().string();
  };
  int lineno = 0;
  while (std::getline(is, line)) {
    ++lineno;
    const size_t hash = line.find('#');
    if (hash != std::string::npos) line = line.substr(0, hash);
    line = trim(line);
    if (line.empty()) continue;
    const size_t eq = line.find('=');
    if (eq == std::string::npos)
      throw ConfigError("config: line " + std::to_string(lineno) + " is not key = value");
    const std::string key = trim(line.substr(0, eq));
    const std::string val = trim(line.substr(eq + 1));

    if (key == "model.d") rc.model.d = to_int(key, val);
    else if (key == "model.layers") rc.model.layers = to_int(key, val);
    else if (key == "model.heads") rc.model.heads = to_int(key, val);
    else if (key == "model.scales") rc.model.scales = to_int(key, val);
    else if (key == "model.patch") rc.model.patch = to_int(key, val);
    else if (key == "model.text_len") rc.model.text_len = to_int(key, val);
    else if (key == "model.vocab") rc.model.vocab = to_int(key, val);
    else if (key == "model.image") rc.model.image = to_int(key, val);
    else if (key == "model.split") rc.model.split = to_int(key, val);
    else if (key == "model.channels") rc.model.channels = to_int(key, val);
    else if (key == "train.epochs") rc.train.epochs = to_int(key, val);
    else if (key == "train.batch") rc.train.batch = to_int(key, val);
    else if (key == "train.warmup") rc.train.warmup_steps = to_int(key, val);
    else if (key == "train.peak_lr") rc.train.peak_lr = to_float(key, val);
    else if (key == "train.weight_decay") rc.train.weight_decay = to_float(key, val);
    else if (key == "train.seed") rc.train.seed = to_u64(key, val);
    else if (key == "train.train_samples") rc.train.train_samples = to_int(key, val);
    else if (key == "train.val_samples") rc.train.val_samples = to_int(key, val);
    else if (key == "train.threads") rc.train.threads = to_int(key, val);
    else if (key == "train.clip_norm") rc.train.clip_norm = to_float(key, val);
    else if (key == "gen.seed") rc.gen_seed = to_u64(key, val);
    else if (key == "gen.min_objects") rc.gen.min_objects = to_int(key, val);
    else if (key == "gen.max_objects") rc.gen.max_objects = to_int(key, val);
    else if (key == "gen.noise_base") rc.gen.noise_base = to_float(key, val);
    else if (key == "gen.noise_amp") rc.gen.noise_amp = to_float(key, val);
    else if (key == "paths.data_dir") rc.data_dir = resolve(val);
    else if (key == "paths.out_dir") rc.out_dir = resolve(val);
    else if (key == "paths.checkpoint") rc.checkpoint = resolve(val);
    else throw ConfigError("config: unknown key '" + key + "'");
  }
  rc.model.validate();
  rc.gen.image = rc.model.image;
  rc.gen.channels = rc.model.channels;
  rc.gen.text_len = rc.model.text_len;
  return rc;
}

RunConfig RunConfig::load(const std::string& path) {
  std::ifstream is(path);
  if (!is) throw IoError("config: cannot open " + path);
  std::stringstream buf;
  buf << is.rdbuf();
  return from_text(buf.str(), std::filesystem::path(path).parent_path().string());
}

}  // namespace pyrec
