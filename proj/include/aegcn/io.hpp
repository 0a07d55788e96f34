#pragma once

// Binary container helpers shared by the NVOL, NFEA and NCKP formats: an
// 8-byte magic, one compact JSON header line, then little-endian payload.

#include <array>
#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <span>
#include <string>
#include <string_view>
#include <algorithm>
#include <vector>

#include "json.hpp"

#include "aegcn/error.hpp"

namespace aegcn::io {

using json = nlohmann::json;
namespace fs = std::filesystem;

using Magic = std::array<char, 8>;

inline constexpr Magic kVolumeMagic{'N', 'V', 'O', 'L', '\0', '\x01', '\0', '\0'};
inline constexpr Magic kFeatureMagic{'N', 'F', 'E', 'A', '\0', '\x01', '\0', '\0'};
inline constexpr Magic kCheckpointMagic{'N', 'C', 'K', 'P', '\0', '\x01', '\0', '\0'};

inline std::string partial_path(const fs::path& p) { return p.string() + ".partial"; }

// Output file written under "<path>.partial" and renamed into place by
// commit(). An uncommitted file keeps its .partial suffix.
class PartialFile {
 public:
  explicit PartialFile(fs::path target, std::ios::openmode mode = std::ios::binary)
      : target_(std::move(target)), tmp_(partial_path(target_)) {
    if (target_.has_parent_path()) {
      std::error_code ec;
      fs::create_directories(target_.parent_path(), ec);
    }
    out_.open(tmp_, mode | std::ios::out | std::ios::trunc);
    if (!out_) throw IoError("cannot open " + tmp_.string() + " for writing");
  }
  PartialFile(const PartialFile&) = delete;
  PartialFile& operator=(const PartialFile&) = delete;

  std::ostream& stream() { return out_; }

  void commit() {
    out_.flush();
    if (!out_) throw IoError("write failed for " + tmp_.string());
    out_.close();
    std::error_code ec;
    fs::rename(tmp_, target_, ec);
    if (ec) throw IoError("cannot rename " + tmp_.string() + ": " + ec.message());
  }

 private:
  fs::path target_;
  fs::path tmp_;
  std::ofstream out_;
};

inline std::ifstream open_input(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  if (!in) throw IoError("cannot open " + p.string());
  return in;
}

inline void write_header(std::ostream& out, const Magic& magic, const json& header) {
  out.write(magic.data(), static_cast<std::streamsize>(magic.size()));
  const std::string line = header.dump();
  out.write(line.data(), static_cast<std::streamsize>(line.size()));
  out.put('\n');
}

inline json read_header(std::istream& in, const Magic& magic, std::string_view what) {
  Magic got{};
  in.read(got.data(), static_cast<std::streamsize>(got.size()));
  if (!in || got != magic) throw FormatError(std::string(what) + ": bad magic");
  std::string line;
  if (!std::getline(in, line)) throw FormatError(std::string(what) + ": missing header line");
  try {
    return json::parse(line);
  } catch (const json::parse_error& e) {
    throw FormatError(std::string(what) + ": header is not JSON: " + e.what());
  }
}

template <typename V>
void write_le(std::ostream& out, std::span<const V> values) {
  static_assert(std::is_arithmetic_v<V>);
  if constexpr (std::endian::native == std::endian::little) {
    out.write(reinterpret_cast<const char*>(values.data()),
              static_cast<std::streamsize>(values.size_bytes()));
  } else {
    for (V v : values) {
      std::array<char, sizeof(V)> b;
      std::memcpy(b.data(), &v, sizeof(V));
      std::reverse(b.begin(), b.end());
      out.write(b.data(), sizeof(V));
    }
  }
}

template <typename V>
void read_le(std::istream& in, std::span<V> values, std::string_view what) {
  in.read(reinterpret_cast<char*>(values.data()), static_cast<std::streamsize>(values.size_bytes()));
  if (!in) throw FormatError(std::string(what) + ": truncated payload");
  if constexpr (std::endian::native != std::endian::little) {
    for (V& v : values) {
      std::array<char, sizeof(V)> b;
      std::memcpy(b.data(), &v, sizeof(V));
      std::reverse(b.begin(), b.end());
      std::memcpy(&v, b.data(), sizeof(V));
    }
  }
}

inline void expect_eof(std::istream& in, std::string_view what) {
  if (in.peek() != std::char_traits<char>::eof()) {
    throw FormatError(std::string(what) + ": trailing bytes after payload");
  }
}

}  // namespace aegcn::io
