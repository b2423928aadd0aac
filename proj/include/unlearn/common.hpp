#pragma once

#include <cstdint>
#include <stdexcept>
#include <string>
#include <string_view>

namespace unlearn {

class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Shape or size disagreement between tensors.
class DimensionError : public Error {
 public:
  using Error::Error;
};
// The caller broke an API precondition.
class ContractError : public Error {
 public:
  using Error::Error;
};
class ConfigError : public Error {
 public:
  using Error::Error;
};
class ParseError : public Error {
 public:
  using Error::Error;
};
class ValidationError : public Error {
 public:
  using Error::Error;
};
class IoError : public Error {
 public:
  using Error::Error;
};
class TrainingError : public Error {
 public:
  using Error::Error;
};
class ScoringError : public Error {
 public:
  using Error::Error;
};
// A generator pool ran out of unique entries.
class CapacityError : public Error {
 public:
  using Error::Error;
};

// Stable content hash (FNV-1a) used for config provenance stamps.
uint64_t fnv1a64(std::string_view s);
std::string hex64(uint64_t v);

// Round-trip-exact decimal formatting for doubles.
std::string format_double(double v);

extern const char* kVersion;

}  // namespace unlearn
