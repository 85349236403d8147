#pragma once

#include <cstdint>
#include <string>
#include <unordered_map>
#include <vector>

#include "treelm/seqgen.hpp"

namespace treelm {

// Token key with namespace tag: "T:<name>" for TYPE tokens, "V:<text>" for
// VALUE tokens. The one-character tag guarantees the two namespaces and the
// reserved specials can never collide.
std::string make_token_key(TokenNamespace ns, const std::string& text);

struct DecodedToken {
  bool reserved = false;
  TokenNamespace ns = TokenNamespace::Value;
  std::string text;
};

// Single-pass corpus counter feeding build_vocab.
class TokenCounter {
 public:
  void add(TokenNamespace ns, const std::string& text) {
    add_key(make_token_key(ns, text));
  }
  void add_key(const std::string& key) {
    ++counts_[key];
    ++total_;
  }
  const std::unordered_map<std::string, std::uint64_t>& counts() const {
    return counts_;
  }
  std::uint64_t total() const { return total_; }

 private:
  std::unordered_map<std::string, std::uint64_t> counts_;
  std::uint64_t total_ = 0;
};

class Vocab {
 public:
  static constexpr int kPad = 0;
  static constexpr int kUnk = 1;
  static constexpr int kReserved = 2;

  int encode_key(const std::string& key) const;
  int encode(TokenNamespace ns, const std::string& text) const {
    return encode_key(make_token_key(ns, text));
  }
  // Key for id; throws on out-of-range ids.
  const std::string& decode(int id) const;
  DecodedToken decode_parts(int id) const;

  int size() const { return static_cast<int>(id_to_key_.size()); }
  int max_size() const { return max_size_; }
  double coverage() const { return coverage_; }
  std::uint64_t total_tokens() const { return total_tokens_; }
  std::uint64_t count_of(int id) const;

  // Fingerprint over the ordered token table; recorded in checkpoints and
  // reports to catch vocab/model mismatches.
  std::string hash() const;

  void save(const std::string& path) const;
  static Vocab load(const std::string& path);

  friend Vocab build_vocab(const TokenCounter& counter, int max_size);

 private:
  std::vector<std::string> id_to_key_;
  std::vector<std::uint64_t> counts_;  // aligned with id_to_key_
  std::unordered_map<std::string, int> key_to_id_;
  int max_size_ = 100000;
  double coverage_ = 0.0;
  std::uint64_t total_tokens_ = 0;
};

// Top (max_size - 2) tokens by count, ties broken by ascending key, so the
// table is a pure function of the corpus multiset.
Vocab build_vocab(const TokenCounter& counter, int max_size = 100000);

}  // namespace treelm
