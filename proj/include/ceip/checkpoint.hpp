#pragma once

#include <cstdint>
#include <string>
#include <string_view>
#include <vector>

#include "ceip/numerics.hpp"
#include "json.hpp"

namespace ceip {

// Checkpoint file = one JSON header line + raw little-endian f64 blob.
// The header carries the section layout, free-form metadata and an
// FNV-1a hash of the blob, verified on load.

std::uint64_t fnv1a64(const void* data, std::size_t n);
std::uint64_t fnv1a64(std::string_view s);
std::string to_hex(std::uint64_t v);

struct CheckpointSection {
  std::string name;
  std::int64_t offset = 0;
  std::int64_t size = 0;
};

struct Checkpoint {
  std::string kind;
  std::vector<CheckpointSection> sections;
  nlohmann::json meta = nlohmann::json::object();
  Vec values;

  std::string value_hash() const;
  Vec section(const std::string& name) const;
};

void save_checkpoint(const std::string& path, const Checkpoint& ck);
Checkpoint load_checkpoint(const std::string& path);

}  // namespace ceip
