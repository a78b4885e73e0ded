#pragma once

#include <span>
#include <string>
#include <string_view>

namespace hted {

/// Incremental SHA-256 with a lowercase hex digest.
class Sha256 {
 public:
  Sha256();
  ~Sha256();
  Sha256(const Sha256&) = delete;
  Sha256& operator=(const Sha256&) = delete;

  void update(const void* data, std::size_t size);
  void update(std::string_view text) { update(text.data(), text.size()); }
  std::string hex_digest();

 private:
  void* ctx_;
};

std::string sha256_hex(std::string_view text);

}  // namespace hted
