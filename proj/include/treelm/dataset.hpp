#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "treelm/model.hpp"
#include "treelm/seqgen.hpp"
#include "treelm/vocab.hpp"

namespace treelm {

struct PrepareOptions {
  ModelKind kind = ModelKind::Trav;
  int context = 1000;
  int stride = 0;  // <= 0: half the context (the 1000/500 convention)
  int max_path_len = 13;
  int up_max = 8;
  int down_max = 8;
  std::string category_map_path;  // empty = builtin mapping
  int threads = 1;
};

struct DatasetHeader {
  std::string format = "treelm-segments-v1";
  std::string kind;
  int context = 1000;
  int stride = 500;
  int max_path_len = 13;
  int up_max = 8;
  int down_max = 8;
  std::string mapping_version;
  std::string vocab_hash;
  std::string source;
  bool approx_source_tokens = false;
  std::uint64_t n_trees = 0;
  std::uint64_t n_segments = 0;
  std::uint64_t dropped_empty = 0;

  nlohmann::json to_json() const;
  static DatasetHeader from_json(const nlohmann::json& j);
};

constexpr std::uint8_t kNoCategory = 255;

struct PreparedSegment {
  std::int32_t tree_index = 0;
  std::vector<std::int32_t> tokens;
  std::vector<std::uint8_t> ns_type;  // 1 = TYPE namespace token
  std::vector<std::uint8_t> loss_mask;
  std::vector<std::uint8_t> leaf;
  std::vector<std::uint8_t> cat;   // LeafCategory code per leaf position
  std::vector<std::uint8_t> tcat;  // TypeCategory code per internal position
  std::vector<std::int32_t> rel;   // lower-tri relation class ids (travrel)
  std::vector<std::vector<std::int32_t>> paths;  // per-position (rootpath)
};

struct Dataset {
  DatasetHeader header;
  std::vector<PreparedSegment> segments;

  ModelKind kind() const { return model_kind_from_string(header.kind); }
};

ModelInput to_model_input(const PreparedSegment& seg, ModelKind kind);

// Token-stream pass feeding build_vocab. For srcseq, `tokens_path` may point
// to a pre-tokenized JSON-lines file (one JSON array of strings per line);
// when empty the leaf-value stream of the normalized trees approximates it.
void count_corpus_tokens(ModelKind kind, const std::string& trees_path,
                         const std::string& tokens_path, TokenCounter& counter);

Dataset prepare_dataset(const PrepareOptions& opt, const std::string& trees_path,
                        const std::string& tokens_path, const Vocab& vocab);

void write_dataset(const Dataset& ds, const std::string& path);
Dataset read_dataset(const std::string& path);

}  // namespace treelm
