#pragma once

#include <string>

#include "pyrec/model.hpp"

namespace pyrec {

// Checkpoint file: a text manifest (magic, config echo, one line per
// parameter with name/shape/byte offset) terminated by a `data <bytes>`
// line, followed by the raw little-endian float32 payload. Round-trips are
// bit-exact.

void save_checkpoint(const std::string& path, const Model& model);

/// Reads the config echo without touching the payload.
ModelConfig checkpoint_config(const std::string& path);

/// Rebuilds the model described by the file.
Model load_checkpoint(const std::string& path);

}  // namespace pyrec
