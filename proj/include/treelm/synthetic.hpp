#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "treelm/ast.hpp"

namespace treelm {

// Synthetic py150-style corpora with a controlled leaf/parent dependency:
// every generated internal node is a dual node (type + value) whose value is
// a deterministic function of its type, so the parse -> normalize pipeline
// produces trees where each value leaf is its parent's first child.
//
// Chain mode: tree i opens with type index i mod n_types and every following
// internal node advances the index by 1, so each tree is fully determined by
// its first node (memorization-friendly).
//
// TwoClass mode: types come in classes A and B sharing the same value table;
// the next index advances by 1 after an A node and by 2 after a B node, with
// classes drawn uniformly. The value stream alone leaves the class latent, so
// structure-blind models top out around reciprocal rank 0.75 while any model
// that sees the parent type can predict the next value exactly.
struct GrammarOptions {
  enum class Mode { Chain, TwoClass };
  Mode mode = Mode::TwoClass;
  int n_types = 12;       // value-table size (per class in TwoClass mode)
  int min_internal = 16;  // internal nodes per tree, drawn uniformly
  int max_internal = 28;
  double branch_prob = 0.35;  // chance a node nests children instead of
                              // continuing at the current level
  int max_depth = 4;
  std::uint64_t seed = 1;
};

// Returns one py150-layout JSON line per tree (unnormalized, dual nodes).
std::vector<std::string> generate_trees(const GrammarOptions& opt, int count);

void write_trees(const std::vector<std::string>& lines, const std::string& path);

}  // namespace treelm
