#pragma once

#include <optional>
#include <string>
#include <vector>

#include "treelm/common.hpp"

namespace treelm {

// One arena node. After normalize_ast, a node carries exactly one of
// type_name (internal) or value (leaf), and leaves have no children.
struct AstNode {
  std::optional<std::string> type_name;
  std::optional<std::string> value;
  int parent = -1;  // -1 for the root
  std::vector<int> children;

  bool is_leaf() const { return value.has_value() && !type_name.has_value(); }
  bool is_internal() const {
    return type_name.has_value() && !value.has_value();
  }
  bool is_dual() const { return type_name.has_value() && value.has_value(); }
};

// Arena of nodes indexed by pre-order id; node 0 is the root.
struct Ast {
  std::vector<AstNode> nodes;

  int size() const { return static_cast<int>(nodes.size()); }
  const AstNode& at(int id) const;
  bool is_normalized() const;

  // Depth from root (root = 0); computed once on demand.
  const std::vector<int>& depths() const;

 private:
  mutable std::vector<int> depths_;
};

// Parses one py150-layout JSON line: an array of node objects with fields
// `type`, optional `value`, optional `children` (indices into the array,
// always pointing forward). Non-string values are kept verbatim as their
// JSON literal text. The result is unnormalized (dual nodes possible).
Ast parse_ast_json(const std::string& line);

// Emits the same layout back (debug/round-trip aid).
std::string emit_ast_json(const Ast& ast);

// Splits every dual node: the original keeps the type, a new leaf holding
// the value becomes the node's FIRST child. Ids are renumbered to pre-order.
Ast normalize_ast(const Ast& ast);

// Diagnostic invariant scan; returns one message per violation, empty when
// the arena is a valid normalized tree. Never mutates.
std::vector<std::string> validate_ast(const Ast& ast);

}  // namespace treelm
