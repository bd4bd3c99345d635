#pragma once

#include <cstdint>
#include <map>
#include <string>

#include "tapf/errors.hpp"

namespace tapf {

// Every run directory gets exactly one manifest.json recording what produced
// it: the full config snapshot, the seed, a git-blob-style content hash of
// the producing binary, and the artifact paths (relative to the directory).
struct RunManifest {
  std::string config_text;
  std::uint64_t seed = 0;
  std::string binary_sha1;
  std::map<std::string, std::string> outputs;
  std::string created_at;  // ISO-8601 UTC, the only field allowed to differ
                           // between reruns of the same command
};

// Hex SHA-1 of "blob <len>\0<bytes>", matching `git hash-object`.
std::string git_blob_sha1(const std::string& bytes);
std::string git_blob_sha1_file(const std::string& path);

std::string now_iso8601_utc();

std::string manifest_json(const RunManifest& m);
RunManifest parse_manifest(const std::string& text);

// write_manifest refuses to scribble over a foreign file: the target must
// either not exist or parse as a manifest.
void write_manifest(const std::string& dir, const RunManifest& m);
RunManifest read_manifest_dir(const std::string& dir);

// Field equality ignoring created_at; reruns with the same seed must agree.
bool manifests_equivalent(const RunManifest& a, const RunManifest& b);

}  // namespace tapf
