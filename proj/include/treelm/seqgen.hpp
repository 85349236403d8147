#pragma once

#include <cstdint>
#include <string>
#include <unordered_map>
#include <vector>

#include "treelm/ast.hpp"

namespace treelm {

enum class TokenNamespace : std::uint8_t { Type = 0, Value = 1 };

struct NodeToken {
  std::string text;
  TokenNamespace ns = TokenNamespace::Value;
  int source_node_id = -1;

  bool operator==(const NodeToken&) const = default;
};

// Ancestor type names starting at the leaf's parent, walking toward the root,
// truncated to max_path_len keeping the leaf-adjacent end.
using RootPath = std::vector<NodeToken>;

// Raw UDpath(a, b) = U^up D^down: `up` edges from a to the lowest common
// ancestor, `down` edges from there to b. Unclipped.
struct RelationClass {
  int up = 0;
  int down = 0;
  bool operator==(const RelationClass&) const = default;
};

// Per-dimension saturated relation with an overflow marker; pairs where
// either dimension exceeded its bound all share one class id.
struct ClippedRelation {
  int up = 0;
  int down = 0;
  bool overflow = false;
  bool operator==(const ClippedRelation&) const = default;
};

inline int relation_class_count(int up_max, int down_max) {
  return (up_max + 1) * (down_max + 1) + 1;
}

ClippedRelation clip_relation(RelationClass rel, int up_max, int down_max);
int relation_class_id(RelationClass rel, int up_max, int down_max);
ClippedRelation decode_relation_class(int id, int up_max, int down_max);

enum class LeafCategory : std::uint8_t {
  AttrAccess = 0,
  NumConst = 1,
  Name = 2,
  FuncParam = 3,
  Other = 4,
};

enum class TypeCategory : std::uint8_t {
  Call = 0,
  Assign = 1,
  Return = 2,
  List = 3,
  Dict = 4,
  Raise = 5,
  OtherType = 6,
};

const char* to_string(LeafCategory c);
const char* to_string(TypeCategory c);

// Parent-type -> category mapping. The node-type names behind each category
// are not fixed by the task definition, so the table is data: built-in
// defaults, overridable from a JSON file {"version":..., "leaf": {...},
// "type": {...}}.
class CategoryMap {
 public:
  static CategoryMap builtin();
  static CategoryMap from_json_file(const std::string& path);

  LeafCategory leaf_category(const std::string& parent_type) const;
  TypeCategory type_category(const std::string& type_name) const;
  const std::string& version() const { return version_; }

 private:
  std::unordered_map<std::string, LeafCategory> leaf_;
  std::unordered_map<std::string, TypeCategory> type_;
  std::string version_;
};

// Lower-triangular matrix of relation class ids for one segment;
// entry (i, j), j <= i, relates key position j to query position i.
struct RelationMatrix {
  int n = 0;
  int up_max = 8;
  int down_max = 8;
  std::vector<std::int32_t> ids;  // n*(n+1)/2, row-major lower triangle

  std::int32_t id_at(int i, int j) const {
    return ids[static_cast<std::size_t>(i) * (i + 1) / 2 + j];
  }
  ClippedRelation at(int i, int j) const {
    return decode_relation_class(id_at(i, j), up_max, down_max);
  }
};

// A context-length slice of one serialized tree. loss_mask marks token
// positions whose loss this segment owns (sliding-window de-duplication).
struct Segment {
  std::vector<NodeToken> tokens;
  std::vector<std::uint8_t> loss_mask;
  std::vector<std::uint8_t> leaf_flags;
  int global_offset = 0;
};

// Pre-order serialization of a normalized tree; one token per node.
std::vector<NodeToken> dfs_sequence(const Ast& ast);

// Leaf tokens in DFS order (the LeafSeq/RootPath input sequence).
std::vector<NodeToken> leaf_sequence(const Ast& ast);

RootPath extract_root_path(const Ast& ast, int leaf_id, int max_path_len = 13);

RelationClass ud_path(const Ast& ast, int a, int b);

std::vector<Segment> slice_into_segments(const std::vector<NodeToken>& tokens,
                                         int context = 1000, int stride = 500);

RelationMatrix build_relation_matrix(const Ast& ast,
                                     const std::vector<int>& node_ids,
                                     int up_max = 8, int down_max = 8);

LeafCategory categorize_leaf(const Ast& ast, int leaf_id,
                             const CategoryMap& map);

}  // namespace treelm
