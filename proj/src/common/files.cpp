#include "hted/common/files.hpp"

#include <fstream>
#include <sstream>
#include <vector>

#include "hted/common/errors.hpp"

namespace hted {

void write_file_atomic(const std::filesystem::path& path, std::string_view contents) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::filesystem::path tmp = path;
  tmp += ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw InputError("cannot open " + tmp.string() + " for writing");
    out.write(contents.data(), static_cast<std::streamsize>(contents.size()));
    if (!out) throw InputError("write to " + tmp.string() + " failed");
  }
  std::filesystem::rename(tmp, path);
}

std::string read_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw InputError("cannot open " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

OutputGuard::~OutputGuard() {
  if (committed_) return;
  for (const auto& p : written_) {
    std::error_code ec;
    std::filesystem::remove(p, ec);
  }
}

void OutputGuard::write(const std::filesystem::path& path, std::string_view contents) {
  written_.push_back(path);
  write_file_atomic(path, contents);
}

void OutputGuard::track(const std::filesystem::path& path) { written_.push_back(path); }

}  // namespace hted
