#pragma once

#include <charconv>
#include <string>

namespace ddit {

// Shortest round-trip decimal form; identical doubles always print the same.
inline std::string format_double(double v) {
  char buf[64];
  auto res = std::to_chars(buf, buf + sizeof(buf), v);
  return std::string(buf, res.ptr);
}

}  // namespace ddit
