#pragma once

#include <unistd.h>

#include <algorithm>
#include <filesystem>
#include <fstream>
#include <random>
#include <string>
#include <vector>

#include <json.hpp>

#include "treelm/ast.hpp"
#include "treelm/dataset.hpp"
#include "treelm/synthetic.hpp"
#include "treelm/vocab.hpp"

namespace treelm::testing {

namespace fs = std::filesystem;

struct TempDir {
  fs::path path;
  explicit TempDir(const std::string& tag) {
    path = fs::temp_directory_path() /
           ("treelm_test_" + tag + "_" + std::to_string(::getpid()));
    fs::create_directories(path);
  }
  ~TempDir() {
    std::error_code ec;
    fs::remove_all(path, ec);
  }
  std::string file(const std::string& name) const {
    return (path / name).string();
  }
};

// The worked example tree: a 22-node spine, then
//   22 Call -> (23 NameLoad -> 24 "map",
//               25 AttributeLoad -> (26 NameLoad -> 27 "string",
//                                    28 attr -> 29 "atoi"))
// with the leaf ids counted after normalization.
inline std::string example_call_tree_json() {
  nlohmann::json arr = nlohmann::json::array();
  for (int k = 0; k < 22; ++k) {
    nlohmann::json node;
    node["type"] = k == 0 ? "Module" : "N" + std::to_string(k);
    node["children"] = {k + 1};
    arr.push_back(node);
  }
  arr.push_back({{"type", "Call"}, {"children", {23, 24}}});
  arr.push_back({{"type", "NameLoad"}, {"value", "map"}});
  arr.push_back({{"type", "AttributeLoad"}, {"children", {25, 26}}});
  arr.push_back({{"type", "NameLoad"}, {"value", "string"}});
  arr.push_back({{"type", "attr"}, {"value", "atoi"}});
  return arr.dump();
}

// Random unnormalized py150-style tree: nodes may be internal-only, dual, or
// (leaf) value-only; ids are assigned in pre-order.
inline Ast random_raw_tree(std::mt19937_64& rng, int max_nodes) {
  Ast ast;
  const int target =
      2 + static_cast<int>(rng() % static_cast<std::uint64_t>(max_nodes - 1));
  struct Builder {
    Ast& ast;
    std::mt19937_64& rng;
    int remaining;
    void node(int parent, int depth) {
      if (remaining == 0) return;
      --remaining;
      const int id = ast.size();
      ast.nodes.emplace_back();
      ast.nodes.back().parent = parent;
      if (parent >= 0)
        ast.nodes[static_cast<std::size_t>(parent)].children.push_back(id);
      const int flavor = static_cast<int>(rng() % 10);
      const std::string tag = std::to_string(rng() % 7);
      if (flavor < 2 && parent >= 0) {
        ast.nodes[static_cast<std::size_t>(id)].value = "w" + tag;
        return;  // pure leaf, no children
      }
      ast.nodes[static_cast<std::size_t>(id)].type_name = "t" + tag;
      if (flavor < 6) ast.nodes[static_cast<std::size_t>(id)].value = "w" + tag;
      if (depth < 8) {
        const int kids = static_cast<int>(rng() % 4);
        for (int k = 0; k < kids && remaining > 0; ++k) node(id, depth + 1);
      }
    }
  } b{ast, rng, target};
  b.node(-1, 0);
  // Root must not be a bare value node for normalize to accept children-less
  // roots; force a type if the draw made it a leaf.
  if (!ast.nodes[0].type_name) {
    ast.nodes[0].type_name = "t0";
    ast.nodes[0].value.reset();
  }
  return ast;
}

// Independent recursive pre-order walker (oracle for dfs_sequence).
inline void naive_preorder(const Ast& ast, int id, std::vector<int>& order) {
  order.push_back(id);
  for (int c : ast.at(id).children) naive_preorder(ast, c, order);
}

// Brute-force UDpath oracle: enumerate ancestor chains and find the first
// common element. Independent of the depth-walk in seqgen.
inline RelationClass ud_oracle(const Ast& ast, int a, int b) {
  std::vector<int> up_a, up_b;
  for (int x = a; x >= 0; x = ast.at(x).parent) up_a.push_back(x);
  for (int x = b; x >= 0; x = ast.at(x).parent) up_b.push_back(x);
  for (std::size_t i = 0; i < up_a.size(); ++i)
    for (std::size_t j = 0; j < up_b.size(); ++j)
      if (up_a[i] == up_b[j])
        return RelationClass{static_cast<int>(i), static_cast<int>(j)};
  return RelationClass{-1, -1};
}

// Double-precision log-softmax NLL oracle for cross-entropy checks.
inline double nll_oracle(const MatF& logits, int row, int target) {
  double mx = -1e300;
  for (Eigen::Index j = 0; j < logits.cols(); ++j)
    mx = std::max(mx, static_cast<double>(logits(row, j)));
  double sum = 0.0;
  for (Eigen::Index j = 0; j < logits.cols(); ++j)
    sum += std::exp(static_cast<double>(logits(row, j)) - mx);
  return mx + std::log(sum) - static_cast<double>(logits(row, target));
}

// Full-sort rank oracle with the cutoff-10 rule applied.
inline int rank_oracle(const std::vector<float>& logits, int target) {
  std::vector<int> ids(logits.size());
  for (std::size_t i = 0; i < ids.size(); ++i) ids[i] = static_cast<int>(i);
  std::stable_sort(ids.begin(), ids.end(), [&](int a, int b) {
    if (logits[static_cast<std::size_t>(a)] != logits[static_cast<std::size_t>(b)])
      return logits[static_cast<std::size_t>(a)] > logits[static_cast<std::size_t>(b)];
    return a < b;
  });
  for (std::size_t pos = 0; pos < ids.size(); ++pos)
    if (ids[pos] == target)
      return pos < 10 ? static_cast<int>(pos) + 1 : 0;
  return 0;
}

struct SyntheticData {
  Dataset dataset;
  Vocab vocab;
};

// Generates a corpus, builds (or reuses) a vocab over it, and prepares
// segments. Pass `with_vocab` to encode against an existing table (held-out
// splits must share the training ids).
inline SyntheticData make_synthetic_data(ModelKind kind, int n_trees,
                                         GrammarOptions gopt,
                                         PrepareOptions popt,
                                         const TempDir& dir,
                                         const std::string& tag,
                                         const Vocab* with_vocab = nullptr) {
  const auto lines = generate_trees(gopt, n_trees);
  const std::string trees = dir.file("trees_" + tag + ".jsonl");
  write_trees(lines, trees);
  SyntheticData out;
  if (with_vocab) {
    out.vocab = *with_vocab;
  } else {
    TokenCounter counter;
    count_corpus_tokens(kind, trees, "", counter);
    out.vocab = build_vocab(counter, 100000);
  }
  popt.kind = kind;
  out.dataset = prepare_dataset(popt, trees, "", out.vocab);
  return out;
}

}  // namespace treelm::testing
