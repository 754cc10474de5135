#pragma once

#include <string>

#include "retlab/encoder.hpp"

// Checkpoint format: one JSON header line {format_version, encoder config,
// tensor manifest name -> (shape, byte offset)} terminated by '\n', followed
// by the little-endian f64 payload. Round-trips are bitwise.

namespace retlab::cli {

constexpr int kCheckpointFormatVersion = 1;

void save_checkpoint(const std::string& path, const enc::Encoder& encoder);

// Rejects unknown format versions and manifests that do not match the
// config's parameter set.
enc::Encoder load_checkpoint(const std::string& path);

}  // namespace retlab::cli
