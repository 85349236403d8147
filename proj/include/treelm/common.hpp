#pragma once

#include <cstdint>
#include <stdexcept>
#include <string>

namespace treelm {

// Structured error carried across module boundaries. The CLI maps these to
// exit code 1; usage problems are handled by the argument parser (exit 2).
class Error : public std::runtime_error {
 public:
  enum class Kind {
    Parse,      // malformed input text/JSON
    Structure,  // well-formed input violating a tree/segment invariant
    Shape,      // tensor/segment/model shape or kind mismatch
    Config,     // bad or unknown configuration
    Io,         // filesystem failures
    Numeric,    // NaN/Inf or other numeric error states
  };

  Error(Kind kind, std::string message)
      : std::runtime_error(std::move(message)), kind_(kind) {}

  Kind kind() const { return kind_; }

 private:
  Kind kind_;
};

[[noreturn]] inline void fail(Error::Kind kind, const std::string& message) {
  throw Error(kind, message);
}

// FNV-1a, used for vocab/config/content fingerprints in reports and headers.
inline std::uint64_t fnv1a64(const void* data, std::size_t n,
                             std::uint64_t seed = 0xcbf29ce484222325ull) {
  const auto* p = static_cast<const unsigned char*>(data);
  std::uint64_t h = seed;
  for (std::size_t i = 0; i < n; ++i) {
    h ^= p[i];
    h *= 0x100000001b3ull;
  }
  return h;
}

inline std::uint64_t fnv1a64(const std::string& s,
                             std::uint64_t seed = 0xcbf29ce484222325ull) {
  return fnv1a64(s.data(), s.size(), seed);
}

std::string to_hex(std::uint64_t v);

// splitmix64 step; used to derive independent stream seeds from one run seed.
inline std::uint64_t mix_seed(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ull;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ull;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebull;
  return x ^ (x >> 31);
}

}  // namespace treelm
