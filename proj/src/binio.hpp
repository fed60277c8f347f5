#pragma once

#include <cstdint>
#include <cstring>
#include <istream>
#include <json.hpp>
#include <ostream>
#include <string>

#include "csmud/config.hpp"

// Shared binary container framing: 8-byte magic, version byte, u32 header
// length, UTF-8 JSON header, format-specific payload. Little endian
// throughout (asserted once per translation unit that writes payloads).

namespace csmud::binio {

inline void read_exact(std::istream& in, char* dst, std::streamsize n,
                       const char* what) {
  in.read(dst, n);
  if (in.gcount() != n)
    throw IntegrityError(std::string("truncated file: ") + what);
}

inline void write_u32(std::ostream& out, std::uint32_t v) {
  out.write(reinterpret_cast<const char*>(&v), 4);
}

inline std::uint32_t read_u32(std::istream& in, const char* what) {
  std::uint32_t v;
  read_exact(in, reinterpret_cast<char*>(&v), 4, what);
  return v;
}

inline void write_container_header(std::ostream& out, const char magic[8],
                                   std::uint8_t version,
                                   const nlohmann::json& header) {
  const std::string text = header.dump();
  out.write(magic, 8);
  out.put(static_cast<char>(version));
  write_u32(out, static_cast<std::uint32_t>(text.size()));
  out.write(text.data(), static_cast<std::streamsize>(text.size()));
}

inline nlohmann::json read_container_header(std::istream& in,
                                            const char magic[8],
                                            std::uint8_t version,
                                            const std::string& path) {
  char found[8];
  read_exact(in, found, 8, "magic");
  if (std::memcmp(found, magic, 8) != 0)
    throw IntegrityError("file header mismatch (bad magic): " + path);
  const int v = in.get();
  if (v != version)
    throw IntegrityError("unsupported container version " + std::to_string(v) +
                         " in " + path);
  const std::uint32_t len = read_u32(in, "header length");
  if (len > (1u << 20)) throw IntegrityError("oversized header in " + path);
  std::string text(len, '\0');
  read_exact(in, text.data(), len, "header");
  try {
    return nlohmann::json::parse(text);
  } catch (const nlohmann::json::exception& e) {
    throw IntegrityError("malformed header in " + path + ": " + e.what());
  }
}

}  // namespace csmud::binio
