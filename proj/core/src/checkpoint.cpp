#include "pyrec/checkpoint.hpp"

#include <cstring>
#include <fstream>
#include <sstream>

#include "pyrec/errors.hpp"

namespace pyrec {

namespace {

constexpr const char* kMagic = "PYREC-CKPT v1";

void echo_config(std::ostream& os, const ModelConfig& c) {
  os << "model.d = " << c.d << "\n";
  os << "model.layers = " << c.layers << "\n";
  os << "model.heads = " << c.heads << "\n";
  os << "model.scales = " << c.scales << "\n";
  os << "model.patch = " << c.patch << "\n";
  os << "model.text_len = " << c.text_len << "\n";
  os << "model.vocab = " << c.vocab << "\n";
  os << "model.image = " << c.image << "\n";
  os << "model.split = " << c.split << "\n";
  os << "model.channels = " << c.channels << "\n";
}

}  // namespace

void save_checkpoint(const std::string& path, const Model& model) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw IoError("save_checkpoint: cannot open " + path);
  os << kMagic << "\n";
  echo_config(os, model.cfg);
  size_t offset = 0;
  const auto named = model.named_parameters();
  for (const auto& [name, t] : named) {
    os << "param " << name << " " << t.shape().size();
    for (int e : t.shape()) os << " " << e;
    os << " " << offset << "\n";
    offset += t.numel() * sizeof(float);
  }
  os << "data " << offset << "\n";
  for (const auto& [name, t] : named) {
    os.write(reinterpret_cast<const char*>(t.data().data()),
             static_cast<std::streamsize>(t.numel() * sizeof(float)));
  }
  if (!os) throw IoError("save_checkpoint: write failed for " + path);
}

namespace {

struct Header {
  ModelConfig cfg;
  struct Entry {
    std::string name;
    Shape shape;
    size_t offset;
  };
  std::vector<Entry> entries;
  size_t data_bytes = 0;
  std::streampos payload_start;
};

Header read_header(std::ifstream& is, const std::string& path) {
  std::string line;
  if (!std::getline(is, line) || line != kMagic)
    throw IoError("checkpoint: bad magic in " + path);
  Header h;
  while (std::getline(is, line)) {
    if (line.rfind("model.", 0) == 0) {
      std::istringstream ls(line.substr(6));
      std::string key, eq;
      long value;
      ls >> key >> eq >> value;
      if (eq != "=") throw IoError("checkpoint: malformed config line: " + line);
      int* slot = nullptr;
      if (key == "d") slot = &h.cfg.d;
      else if (key == "layers") slot = &h.cfg.layers;
      else if (key == "heads") slot = &h.cfg.heads;
      else if (key == "scales") slot = &h.cfg.scales;
      else if (key == "patch") slot = &h.cfg.patch;
      else if (key == "text_len") slot = &h.cfg.text_len;
      else if (key == "vocab") slot = &h.cfg.vocab;
      else if (key == "image") slot = &h.cfg.image;
      else if (key == "split") slot = &h.cfg.split;
      else if (key == "channels") slot = &h.cfg.channels;
      else throw IoError("checkpoint: unknown config key " + key);
      *slot = static_cast<int>(value);
    } else if (line.rfind("param ", 0) == 0) {
      std::istringstream ls(line.substr(6));
      Header::Entry e;
      int rank;
      ls >> e.name >> rank;
      e.shape.resize(static_cast<size_t>(rank));
      for (int i = 0; i < rank; ++i) ls >> e.shape[static_cast<size_t>(i)];
      ls >> e.offset;
      if (!ls) throw IoError("checkpoint: malformed param line: " + line);
      h.entries.push_back(std::move(e));
    } else if (line.rfind("data ", 0) == 0) {
      h.data_bytes = std::stoull(line.substr(5));
      h.payload_start = is.tellg();
      return h;
    } else {
      throw IoError("checkpoint: unexpected line: " + line);
    }
  }
  throw IoError("checkpoint: missing data section in " + path);
}

}  // namespace

ModelConfig checkpoint_config(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw IoError("checkpoint: cannot open " + path);
  return read_header(is, path).cfg;
}

Model load_checkpoint(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw IoError("checkpoint: cannot open " + path);
  Header h = read_header(is, path);
  Model model = Model::init(h.cfg, /*seed=*/0);
  auto named = model.named_parameters();
  if (named.size() != h.entries.size())
    throw IoError("checkpoint: parameter count mismatch in " + path);
  for (size_t i = 0; i < named.size(); ++i) {
    auto& [name, t] = named[i];
    const auto& e = h.entries[i];
    if (e.name != name || e.shape != t.shape())
      throw IoError("checkpoint: parameter " + e.name + " does not match the model layout");
    is.seekg(h.payload_start + static_cast<std::streamoff>(e.offset));
    is.read(reinterpret_cast<char*>(t.mutable_data().data()),
            static_cast<std::streamsize>(t.numel() * sizeof(float)));
    if (!is) throw IoError("checkpoint: truncated payload in " + path);
  }
  return model;
}

}  // namespace pyrec
