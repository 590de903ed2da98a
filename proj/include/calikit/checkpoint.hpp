#pragma once

#include <string>
#include <vector>

#include <json.hpp>

#include "calikit/array.hpp"

namespace calikit {

// Text checkpoint:
//
//   CALIKIT-MODEL-v1
//   manifest <single-line JSON>
//   param <name> <rows> <cols>
//   <values, shortest round-trip decimal, space separated>
//   ...
//
// Identical contents always serialise to identical bytes.
struct Checkpoint {
  nlohmann::json manifest = nlohmann::json::object();
  std::vector<std::string> names;
  std::vector<Array> params;
};

inline constexpr const char* kCheckpointMagic = "CALIKIT-MODEL-v1";

std::string serialize_checkpoint(const Checkpoint& c);
Checkpoint parse_checkpoint(const std::string& text, const std::string& origin = "checkpoint");

// Writes via a temporary file and rename.
void save_checkpoint(const std::string& path, const Checkpoint& c);
Checkpoint load_checkpoint(const std::string& path);

}  // namespace calikit
