#pragma once

#include <filesystem>
#include <string>
#include <string_view>
#include <vector>

namespace hted {

/// Writes `contents` to a sibling temporary file and renames it over `path`.
void write_file_atomic(const std::filesystem::path& path, std::string_view contents);

std::string read_file(const std::filesystem::path& path);

// Tracks files written by a command so they can be removed if it fails.
class OutputGuard {
 public:
  OutputGuard() = default;
  OutputGuard(const OutputGuard&) = delete;
  OutputGuard& operator=(const OutputGuard&) = delete;
  ~OutputGuard();

  void write(const std::filesystem::path& path, std::string_view contents);
  void track(const std::filesystem::path& path);
  void commit() noexcept { committed_ = true; }

 private:
  std::vector<std::filesystem::path> written_;
  bool committed_ = false;
};

}  // namespace hted
