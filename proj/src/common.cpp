#include "unlearn/common.hpp"

#include <cstdio>

namespace unlearn {

uint64_t fnv1a64(std::string_view s) {
  uint64_t h = 0xcbf29ce484222325ull;
  for (unsigned char c : s) {
    h ^= c;
    h *= 0x100000001b3ull;
  }
  return h;
}

std::string hex64(uint64_t v) {
  char buf[17];
  std::snprintf(buf, sizeof(buf), "%016llx", static_cast<unsigned long long>(v));
  return buf;
}

std::string format_double(double v) {
  char buf[40];
  std::snprintf(buf, sizeof(buf), "%.17g", v);
  return buf;
}

#ifdef UNLEARN_GIT_REV
const char* kVersion = "0.1.0+" UNLEARN_GIT_REV;
#else
const char* kVersion = "0.1.0";
#endif

}  // namespace unlearn
