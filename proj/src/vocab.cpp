#include "treelm/vocab.hpp"

#include <algorithm>
#include <fstream>
#include <sstream>

#include <json.hpp>

namespace treelm {

using nlohmann::json;

namespace {
constexpr const char* kPadKey = "<pad>";
constexpr const char* kUnkKey = "<unk>";
}  // namespace

std::string make_token_key(TokenNamespace ns, const std::string& text) {
  return (ns == TokenNamespace::Type ? "T:" : "V:") + text;
}

int Vocab::encode_key(const std::string& key) const {
  auto it = key_to_id_.find(key);
  return it == key_to_id_.end() ? kUnk : it->second;
}

const std::string& Vocab::decode(int id) const {
  if (id < 0 || id >= size())
    fail(Error::Kind::Structure,
         "token id " + std::to_string(id) + " out of range (vocab size " +
             std::to_string(size()) + ")");
  return id_to_key_[static_cast<std::size_t>(id)];
}

DecodedToken Vocab::decode_parts(int id) const {
  const std::string& key = decode(id);
  DecodedToken out;
  if (id < kReserved) {
    out.reserved = true;
    out.text = key;
    return out;
  }
  out.ns = key[0] == 'T' ? TokenNamespace::Type : TokenNamespace::Value;
  out.text = key.substr(2);
  return out;
}

std::uint64_t Vocab::count_of(int id) const {
  decode(id);
  return counts_[static_cast<std::size_t>(id)];
}

std::string Vocab::hash() const {
  std::uint64_t h = 0xcbf29ce484222325ull;
  for (const std::string& key : id_to_key_) {
    h = fnv1a64(key, h);
    h = fnv1a64("\n", 1, h);
  }
  return to_hex(h);
}

Vocab build_vocab(const TokenCounter& counter, int max_size) {
  if (max_size < Vocab::kReserved)
    fail(Error::Kind::Config, "vocab max_size must be at least 2");
  std::vector<std::pair<std::string, std::uint64_t>> entries(
      counter.counts().begin(), counter.counts().end());
  std::sort(entries.begin(), entries.end(), [](const auto& a, const auto& b) {
    if (a.second != b.second) return a.second > b.second;
    return a.first < b.first;
  });
  const std::size_t keep =
      std::min(entries.size(), static_cast<std::size_t>(max_size - Vocab::kReserved));

  Vocab v;
  v.max_size_ = max_size;
  v.total_tokens_ = counter.total();
  v.id_to_key_ = {kPadKey, kUnkKey};
  v.counts_ = {0, 0};
  std::uint64_t in_vocab = 0;
  for (std::size_t i = 0; i < keep; ++i) {
    v.id_to_key_.push_back(entries[i].first);
    v.counts_.push_back(entries[i].second);
    in_vocab += entries[i].second;
  }
  for (int id = 0; id < v.size(); ++id)
    v.key_to_id_.emplace(v.id_to_key_[static_cast<std::size_t>(id)], id);
  v.coverage_ = counter.total() == 0
                    ? 0.0
                    : static_cast<double>(in_vocab) /
                          static_cast<double>(counter.total());
  return v;
}

void Vocab::save(const std::string& path) const {
  json doc;
  doc["format"] = "treelm-vocab-v1";
  doc["max_size"] = max_size_;
  doc["coverage"] = coverage_;
  doc["total_tokens"] = total_tokens_;
  json tokens = json::array();
  for (int id = kReserved; id < size(); ++id)
    tokens.push_back(json::array(
        {id_to_key_[static_cast<std::size_t>(id)], counts_[static_cast<std::size_t>(id)]}));
  doc["tokens"] = std::move(tokens);
  std::ofstream out(path);
  if (!out) fail(Error::Kind::Io, "cannot write vocab file " + path);
  out << doc.dump() << "\n";
  if (!out) fail(Error::Kind::Io, "failed writing vocab file " + path);
}

Vocab Vocab::load(const std::string& path) {
  std::ifstream in(path);
  if (!in) fail(Error::Kind::Io, "cannot open vocab file " + path);
  json doc;
  try {
    in >> doc;
  } catch (const json::parse_error& e) {
    fail(Error::Kind::Parse, "vocab file " + path + ": " + e.what());
  }
  if (doc.value("format", "") != "treelm-vocab-v1")
    fail(Error::Kind::Config, "vocab file " + path + ": unknown format");
  Vocab v;
  v.max_size_ = doc.at("max_size").get<int>();
  v.coverage_ = doc.at("coverage").get<double>();
  v.total_tokens_ = doc.at("total_tokens").get<std::uint64_t>();
  v.id_to_key_ = {kPadKey, kUnkKey};
  v.counts_ = {0, 0};
  for (const json& t : doc.at("tokens")) {
    v.id_to_key_.push_back(t.at(0).get<std::string>());
    v.counts_.push_back(t.at(1).get<std::uint64_t>());
  }
  for (int id = 0; id < v.size(); ++id) {
    if (!v.key_to_id_.emplace(v.id_to_key_[static_cast<std::size_t>(id)], id).second)
      fail(Error::Kind::Structure,
           "vocab file " + path + ": duplicate token key " +
               v.id_to_key_[static_cast<std::size_t>(id)]);
  }
  return v;
}

}  // namespace treelm
