#include "ceip/checkpoint.hpp"

#include <cstdio>
#include <fstream>

#include "ceip/errors.hpp"

namespace ceip {

std::uint64_t fnv1a64(const void* data, std::size_t n) {
  const auto* bytes = static_cast<const unsigned char*>(data);
  std::uint64_t h = 14695981039346656037ull;
  for (std::size_t i = 0; i < n; ++i) {
    h ^= bytes[i];
    h *= 1099511628211ull;
  }
  return h;
}

std::uint64_t fnv1a64(std::string_view s) { return fnv1a64(s.data(), s.size()); }

std::string to_hex(std::uint64_t v) {
  char buf[17];
  std::snprintf(buf, sizeof(buf), "%016llx", static_cast<unsigned long long>(v));
  return buf;
}

std::string Checkpoint::value_hash() const {
  return to_hex(fnv1a64(values.data(), values.size() * sizeof(double)));
}

Vec Checkpoint::section(const std::string& name) const {
  for (const auto& s : sections) {
    if (s.name != name) continue;
    if (s.offset < 0 || s.offset + s.size > values.size())
      throw IoError("checkpoint section out of range: " + name);
    return values.segment(s.offset, s.size);
  }
  throw IoError("checkpoint section missing: " + name);
}

void save_checkpoint(const std::string& path, const Checkpoint& ck) {
  nlohmann::json header;
  header["format"] = "ceip-checkpoint";
  header["version"] = 1;
  header["kind"] = ck.kind;
  auto secs = nlohmann::json::array();
  for (const auto& s : ck.sections)
    secs.push_back({{"name", s.name}, {"offset", s.offset}, {"size", s.size}});
  header["sections"] = secs;
  header["meta"] = ck.meta;
  header["count"] = ck.values.size();
  header["value_hash"] = ck.value_hash();

  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot write checkpoint: " + path);
  out << header.dump() << '\n';
  out.write(reinterpret_cast<const char*>(ck.values.data()),
            static_cast<std::streamsize>(ck.values.size() * sizeof(double)));
  if (!out) throw IoError("checkpoint write failed: " + path);
}

Checkpoint load_checkpoint(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot read checkpoint: " + path);
  std::string line;
  if (!std::getline(in, line)) throw IoError("empty checkpoint: " + path);
  nlohmann::json header;
  try {
    header = nlohmann::json::parse(line);
  } catch (const nlohmann::json::exception& e) {
    throw IoError("bad checkpoint header in " + path + ": " + e.what());
  }
  if (header.value("format", "") != "ceip-checkpoint")
    throw IoError("not a checkpoint file: " + path);
  if (header.value("version", 0) != 1)
    throw IoError("unsupported checkpoint version in " + path);

  Checkpoint ck;
  ck.kind = header.value("kind", "");
  ck.meta = header.value("meta", nlohmann::json::object());
  for (const auto& s : header["sections"])
    ck.sections.push_back(
        {s.at("name").get<std::string>(), s.at("offset").get<std::int64_t>(),
         s.at("size").get<std::int64_t>()});
  const auto count = header.at("count").get<std::int64_t>();
  if (count < 0) throw IoError("bad checkpoint count in " + path);
  ck.values.resize(count);
  in.read(reinterpret_cast<char*>(ck.values.data()),
          static_cast<std::streamsize>(count * sizeof(double)));
  if (in.gcount() != static_cast<std::streamsize>(count * sizeof(double)))
    throw IoError("truncated checkpoint blob: " + path);
  if (ck.value_hash() != header.at("value_hash").get<std::string>())
    throw IoError("checkpoint hash mismatch: " + path);
  return ck;
}

}  // namespace ceip
