#pragma once

#include <string>

#include "pyrec/model.hpp"
#include "pyrec/synthgym.hpp"
#include "pyrec/trainer.hpp"

namespace pyrec {

/// Flat `key = value` run configuration with section prefixes (model.,
/// train., gen., paths.). Unknown keys are rejected; relative paths resolve
/// against the config file's directory.
struct RunConfig {
  ModelConfig model;
  TrainConfig train;
  GenConfig gen;
  uint64_t gen_seed = 1;
  std::string data_dir;
  std::string out_dir;
  std::string checkpoint;

  static RunConfig from_text(const std::string& text, const std::string& base_dir = "");
  static RunConfig load(const std::string& path);
};

}  // namespace pyrec
