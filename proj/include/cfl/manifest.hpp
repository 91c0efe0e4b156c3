#pragma once

#include "cfl/common.hpp"
#include "cfl/version.hpp"

#include <json.hpp>

#include <cstdint>
#include <fstream>
#include <map>
#include <string>
#include <vector>

namespace cfl::manifest {

/// FNV-1a 64-bit digest of a file's bytes, hex-encoded. Change detection,
/// not cryptography.
inline std::string file_digest(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw config_error("cannot digest missing file: " + path);
  std::uint64_t h = 0xCBF29CE484222325ull;
  char buf[4096];
  while (in.read(buf, sizeof(buf)) || in.gcount() > 0) {
    for (std::streamsize i = 0; i < in.gcount(); ++i) {
      h ^= static_cast<unsigned char>(buf[i]);
      h *= 0x100000001B3ull;
    }
  }
  char hex[17];
  std::snprintf(hex, sizeof(hex), "%016llx", static_cast<unsigned long long>(h));
  return std::string(hex);
}

struct RunManifest {
  std::string subcommand;
  nlohmann::json config;  // fully resolved, defaults materialized
  std::uint64_t seed = 0;
  std::string tool_version = kVersion;
  std::map<std::string, std::string> input_digests;
  std::vector<std::string> outputs;
  double wall_clock_seconds = 0.0;
  int schema_version = kSchemaVersion;

  nlohmann::json to_json() const {
    return {{"schema_version", schema_version}, {"subcommand", subcommand},
            {"config", config},                 {"seed", seed},
            {"tool_version", tool_version},     {"inputs", input_digests},
            {"outputs", outputs},               {"wall_clock_seconds", wall_clock_seconds}};
  }

  static RunManifest from_json(const nlohmann::json& j) {
    RunManifest m;
    m.schema_version = j.at("schema_version").get<int>();
    m.subcommand = j.at("subcommand").get<std::string>();
    m.config = j.at("config");
    m.seed = j.at("seed").get<std::uint64_t>();
    m.tool_version = j.at("tool_version").get<std::string>();
    if (j.contains("inputs"))
      m.input_digests = j.at("inputs").get<std::map<std::string, std::string>>();
    if (j.contains("outputs")) m.outputs = j.at("outputs").get<std::vector<std::string>>();
    m.wall_clock_seconds = j.value("wall_clock_seconds", 0.0);
    return m;
  }
};

inline void write(const RunManifest& m, const std::string& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw config_error("cannot write manifest: " + path);
  out << m.to_json().dump(2) << "\n";
}

inline RunManifest read(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw config_error("cannot read manifest: " + path);
  nlohmann::json j;
  in >> j;
  return RunManifest::from_json(j);
}

}  // namespace cfl::manifest
