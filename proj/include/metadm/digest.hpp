#pragma once

#include <cstddef>
#include <cstdint>
#include <string>
#include <vector>

namespace metadm {

// Streaming SHA-256 (OpenSSL-backed). Used for dataset, manifest, checkpoint
// and config digests.
class Sha256 {
 public:
  Sha256();
  ~Sha256();
  Sha256(const Sha256&) = delete;
  Sha256& operator=(const Sha256&) = delete;

  void update(const void* data, std::size_t len);
  void update(const std::string& s) { update(s.data(), s.size()); }
  void update(const std::vector<std::uint8_t>& v) { update(v.data(), v.size()); }

  // Finalizes; the object must not be updated afterwards.
  std::string hex();

 private:
  void* ctx_;
};

std::string sha256_hex(const void* data, std::size_t len);
std::string sha256_hex(const std::string& s);
std::string sha256_file_hex(const std::string& path);

}  // namespace metadm
