#pragma once

// SHA-256 content hashes and directory manifests.

#include <algorithm>
#include <array>
#include <string>
#include <string_view>
#include <vector>

#include <openssl/evp.h>

#include <json.hpp>

#include "subdim/data_io.hpp"
#include "subdim/error.hpp"

namespace subdim {

inline std::string sha256_hex(std::string_view bytes) {
  std::array<unsigned char, EVP_MAX_MD_SIZE> digest{};
  unsigned int len = 0;
  if (EVP_Digest(bytes.data(), bytes.size(), digest.data(), &len, EVP_sha256(), nullptr) != 1)
    throw Error(Errc::io, "SHA-256 digest failed");
  static constexpr char hex[] = "0123456789abcdef";
  std::string out;
  out.reserve(2 * len);
  for (unsigned int i = 0; i < len; ++i) {
    out += hex[digest[i] >> 4];
    out += hex[digest[i] & 0xf];
  }
  return out;
}

inline std::string sha256_file(const fs::path& path) { return sha256_hex(read_file_bytes(path)); }

/// Path relative to `root` with forward slashes.
inline std::string relative_name(const fs::path& path, const fs::path& root) {
  return fs::relative(path, root).generic_string();
}

/// Every regular file under `dir` (sorted, relative paths) with its hash.
/// Files named in `skip` are left out.
inline nlohmann::json directory_manifest(const fs::path& dir, const std::vector<std::string>& skip = {}) {
  std::vector<std::string> names;
  if (fs::exists(dir))
    for (const auto& entry : fs::recursive_directory_iterator(dir))
      if (entry.is_regular_file()) {
        const auto name = relative_name(entry.path(), dir);
        if (std::find(skip.begin(), skip.end(), name) == skip.end()) names.push_back(name);
      }
  std::sort(names.begin(), names.end());
  nlohmann::json files = nlohmann::json::array();
  for (const auto& n : names) files.push_back({{"path", n}, {"sha256", sha256_file(dir / n)}});
  return files;
}

}  // namespace subdim
