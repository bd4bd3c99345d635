#include "tapf/manifest.hpp"

#include <openssl/evp.h>

#include <cstdio>
#include <ctime>
#include <filesystem>

#include "json.hpp"
#include "tapf/io_bytes.hpp"

namespace tapf {

std::string git_blob_sha1(const std::string& bytes) {
  std::string msg = "blob " + std::to_string(bytes.size());
  msg.push_back('\0');
  msg += bytes;
  unsigned char digest[EVP_MAX_MD_SIZE];
  unsigned int len = 0;
  if (EVP_Digest(msg.data(), msg.size(), digest, &len, EVP_sha1(), nullptr) != 1)
    throw Error("sha1 digest failed");
  std::string hex;
  hex.reserve(2 * len);
  for (unsigned int i = 0; i < len; ++i) {
    char buf[3];
    std::snprintf(buf, sizeof(buf), "%02x", digest[i]);
    hex += buf;
  }
  return hex;
}

std::string git_blob_sha1_file(const std::string& path) {
  return git_blob_sha1(detail::read_file_bytes(path));
}

std::string now_iso8601_utc() {
  std::time_t now = std::time(nullptr);
  std::tm tm;
  gmtime_r(&now, &tm);
  char buf[32];
  std::strftime(buf, sizeof(buf), "%Y-%m-%dT%H:%M:%SZ", &tm);
  return buf;
}

std::string manifest_json(const RunManifest& m) {
  nlohmann::json j;
  j["config"] = m.config_text;
  j["seed"] = m.seed;
  j["binary_sha1"] = m.binary_sha1;
  j["outputs"] = m.outputs;
  j["created_at"] = m.created_at;
  return j.dump(2) + "\n";
}

RunManifest parse_manifest(const std::string& text) {
  nlohmann::json j = nlohmann::json::parse(text, nullptr, false);
  if (j.is_discarded()) throw FormatError("manifest: not valid JSON", 0);
  if (!j.is_object()) throw FormatError("manifest: top level must be an object", 0);
  RunManifest m;
  for (const char* field :
       {"config", "seed", "binary_sha1", "outputs", "created_at"})
    if (!j.contains(field))
      throw FormatError(std::string("manifest: missing field '") + field + "'", 0);
  if (!j["config"].is_string() || !j["binary_sha1"].is_string() ||
      !j["created_at"].is_string())
    throw FormatError("manifest: config, binary_sha1 and created_at must be strings", 0);
  if (!j["seed"].is_number_unsigned())
    throw FormatError("manifest: seed must be an unsigned integer", 0);
  if (!j["outputs"].is_object())
    throw FormatError("manifest: outputs must be an object", 0);
  m.config_text = j["config"].get<std::string>();
  m.seed = j["seed"].get<std::uint64_t>();
  m.binary_sha1 = j["binary_sha1"].get<std::string>();
  m.created_at = j["created_at"].get<std::string>();
  for (const auto& [k, v] : j["outputs"].items()) {
    if (!v.is_string())
      throw FormatError("manifest: output '" + k + "' must be a path string", 0);
    m.outputs[k] = v.get<std::string>();
  }
  return m;
}

void write_manifest(const std::string& dir, const RunManifest& m) {
  std::filesystem::path path = std::filesystem::path(dir) / "manifest.json";
  if (std::filesystem::exists(path)) parse_manifest(detail::read_file_bytes(path.string()));
  detail::write_file_bytes(path.string(), manifest_json(m));
}

RunManifest read_manifest_dir(const std::string& dir) {
  std::filesystem::path path = std::filesystem::path(dir) / "manifest.json";
  return parse_manifest(detail::read_file_bytes(path.string()));
}

bool manifests_equivalent(const RunManifest& a, const RunManifest& b) {
  return a.config_text == b.config_text && a.seed == b.seed &&
         a.binary_sha1 == b.binary_sha1 && a.outputs == b.outputs;
}

}  // namespace tapf
