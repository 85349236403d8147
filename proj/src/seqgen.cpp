#include "treelm/seqgen.hpp"

#include <algorithm>
#include <fstream>

#include <json.hpp>

namespace treelm {

using nlohmann::json;

ClippedRelation clip_relation(RelationClass rel, int up_max, int down_max) {
  ClippedRelation c;
  c.overflow = rel.up > up_max || rel.down > down_max;
  c.up = std::min(rel.up, up_max);
  c.down = std::min(rel.down, down_max);
  return c;
}

int relation_class_id(RelationClass rel, int up_max, int down_max) {
  const ClippedRelation c = clip_relation(rel, up_max, down_max);
  if (c.overflow) return (up_max + 1) * (down_max + 1);
  return c.up + (up_max + 1) * c.down;
}

ClippedRelation decode_relation_class(int id, int up_max, int down_max) {
  const int plain = (up_max + 1) * (down_max + 1);
  if (id < 0 || id > plain)
    fail(Error::Kind::Structure, "relation class id " + std::to_string(id) +
                                     " out of range");
  if (id == plain) return ClippedRelation{up_max, down_max, true};
  return ClippedRelation{id % (up_max + 1), id / (up_max + 1), false};
}

const char* to_string(LeafCategory c) {
  switch (c) {
    case LeafCategory::AttrAccess: return "attribute_access";
    case LeafCategory::NumConst: return "numeric_constant";
    case LeafCategory::Name: return "name";
    case LeafCategory::FuncParam: return "function_parameter";
    case LeafCategory::Other: return "other";
  }
  return "?";
}

const char* to_string(TypeCategory c) {
  switch (c) {
    case TypeCategory::Call: return "call";
    case TypeCategory::Assign: return "assign";
    case TypeCategory::Return: return "return";
    case TypeCategory::List: return "list";
    case TypeCategory::Dict: return "dict";
    case TypeCategory::Raise: return "raise";
    case TypeCategory::OtherType: return "other_type";
  }
  return "?";
}

namespace {

LeafCategory leaf_category_from_string(const std::string& s) {
  if (s == "attribute_access") return LeafCategory::AttrAccess;
  if (s == "numeric_constant") return LeafCategory::NumConst;
  if (s == "name") return LeafCategory::Name;
  if (s == "function_parameter") return LeafCategory::FuncParam;
  if (s == "other") return LeafCategory::Other;
  fail(Error::Kind::Config, "unknown leaf category `" + s + "`");
}

TypeCategory type_category_from_string(const std::string& s) {
  if (s == "call") return TypeCategory::Call;
  if (s == "assign") return TypeCategory::Assign;
  if (s == "return") return TypeCategory::Return;
  if (s == "list") return TypeCategory::List;
  if (s == "dict") return TypeCategory::Dict;
  if (s == "raise") return TypeCategory::Raise;
  if (s == "other_type") return TypeCategory::OtherType;
  fail(Error::Kind::Config, "unknown type category `" + s + "`");
}

}  // namespace

CategoryMap CategoryMap::builtin() {
  CategoryMap m;
  m.version_ = "builtin-v1";
  m.leaf_ = {
      {"attr", LeafCategory::AttrAccess},
      {"Num", LeafCategory::NumConst},
      {"NameLoad", LeafCategory::Name},
      {"NameStore", LeafCategory::Name},
      {"NameParam", LeafCategory::FuncParam},
  };
  m.type_ = {
      {"Call", TypeCategory::Call},       {"Assign", TypeCategory::Assign},
      {"Return", TypeCategory::Return},   {"List", TypeCategory::List},
      {"ListLoad", TypeCategory::List},   {"ListStore", TypeCategory::List},
      {"Dict", TypeCategory::Dict},       {"Raise", TypeCategory::Raise},
  };
  return m;
}

CategoryMap CategoryMap::from_json_file(const std::string& path) {
  std::ifstream in(path);
  if (!in) fail(Error::Kind::Io, "cannot open category map " + path);
  json doc;
  try {
    in >> doc;
  } catch (const json::parse_error& e) {
    fail(Error::Kind::Parse, "category map " + path + ": " + e.what());
  }
  CategoryMap m;
  m.version_ = doc.value("version", "unversioned");
  if (doc.contains("leaf"))
    for (auto& [k, v] : doc.at("leaf").items())
      m.leaf_[k] = leaf_category_from_string(v.get<std::string>());
  if (doc.contains("type"))
    for (auto& [k, v] : doc.at("type").items())
      m.type_[k] = type_category_from_string(v.get<std::string>());
  return m;
}

LeafCategory CategoryMap::leaf_category(const std::string& parent_type) const {
  auto it = leaf_.find(parent_type);
  return it == leaf_.end() ? LeafCategory::Other : it->second;
}

TypeCategory CategoryMap::type_category(const std::string& type_name) const {
  auto it = type_.find(type_name);
  return it == type_.end() ? TypeCategory::OtherType : it->second;
}

namespace {

NodeToken token_for(const Ast& ast, int id) {
  const AstNode& node = ast.at(id);
  if (node.is_dual())
    fail(Error::Kind::Structure,
         "dual node " + std::to_string(id) + " encountered; normalize first");
  NodeToken tok;
  tok.source_node_id = id;
  if (node.is_internal()) {
    tok.ns = TokenNamespace::Type;
    tok.text = *node.type_name;
  } else {
    tok.ns = TokenNamespace::Value;
    tok.text = *node.value;
  }
  return tok;
}

}  // namespace

std::vector<NodeToken> dfs_sequence(const Ast& ast) {
  // Arena ids are already a pre-order numbering (validated at parse), so the
  // DFS sequence is just the arena order.
  std::vector<NodeToken> out;
  out.reserve(ast.nodes.size());
  for (int id = 0; id < ast.size(); ++id) out.push_back(token_for(ast, id));
  return out;
}

std::vector<NodeToken> leaf_sequence(const Ast& ast) {
  std::vector<NodeToken> out;
  for (int id = 0; id < ast.size(); ++id)
    if (ast.nodes[static_cast<std::size_t>(id)].is_leaf())
      out.push_back(token_for(ast, id));
  return out;
}

RootPath extract_root_path(const Ast& ast, int leaf_id, int max_path_len) {
  const AstNode& leaf = ast.at(leaf_id);
  if (!leaf.is_leaf())
    fail(Error::Kind::Structure,
         "node " + std::to_string(leaf_id) + " is not a leaf");
  if (leaf.parent < 0)
    fail(Error::Kind::Structure,
         "leaf " + std::to_string(leaf_id) + " has no parent (degenerate tree)");
  if (max_path_len < 1)
    fail(Error::Kind::Config, "max_path_len must be at least 1");
  RootPath path;
  for (int id = leaf.parent; id >= 0; id = ast.at(id).parent) {
    if (static_cast<int>(path.size()) == max_path_len) break;  // drop root end
    path.push_back(token_for(ast, id));
  }
  return path;
}

RelationClass ud_path(const Ast& ast, int a, int b) {
  ast.at(a);
  ast.at(b);
  const std::vector<int>& depth = ast.depths();
  int up = 0, down = 0;
  int x = a, y = b;
  while (depth[static_cast<std::size_t>(x)] > depth[static_cast<std::size_t>(y)]) {
    x = ast.at(x).parent;
    ++up;
  }
  while (depth[static_cast<std::size_t>(y)] > depth[static_cast<std::size_t>(x)]) {
    y = ast.at(y).parent;
    ++down;
  }
  while (x != y) {
    x = ast.at(x).parent;
    y = ast.at(y).parent;
    ++up;
    ++down;
  }
  return RelationClass{up, down};
}

std::vector<Segment> slice_into_segments(const std::vector<NodeToken>& tokens,
                                         int context, int stride) {
  if (context < 1) fail(Error::Kind::Config, "context must be positive");
  if (stride < 1) fail(Error::Kind::Config, "stride must be positive");
  if (stride > context)
    fail(Error::Kind::Config, "stride must not exceed context");
  const int n = static_cast<int>(tokens.size());
  std::vector<Segment> out;
  if (n == 0) return out;

  auto make = [&](int begin, int end, int mask_from) {
    Segment seg;
    seg.global_offset = begin;
    seg.tokens.assign(tokens.begin() + begin, tokens.begin() + end);
    seg.loss_mask.assign(static_cast<std::size_t>(end - begin), 0);
    for (int p = std::max(begin, mask_from); p < end; ++p)
      seg.loss_mask[static_cast<std::size_t>(p - begin)] = 1;
    seg.leaf_flags.resize(seg.tokens.size());
    for (std::size_t i = 0; i < seg.tokens.size(); ++i)
      seg.leaf_flags[i] = seg.tokens[i].ns == TokenNamespace::Value ? 1 : 0;
    return seg;
  };

  int covered = 0;  // first position not yet owned by any window
  int start = 0;
  while (start + context < n) {
    out.push_back(make(start, start + context, covered));
    covered = start + context;
    start += stride;
  }
  // Final window right-aligned to the end, length min(context, n).
  const int begin = std::max(0, n - context);
  out.push_back(make(begin, n, covered));
  return out;
}

RelationMatrix build_relation_matrix(const Ast& ast,
                                     const std::vector<int>& node_ids,
                                     int up_max, int down_max) {
  RelationMatrix m;
  m.n = static_cast<int>(node_ids.size());
  m.up_max = up_max;
  m.down_max = down_max;
  m.ids.resize(static_cast<std::size_t>(m.n) * (m.n + 1) / 2);
  std::size_t k = 0;
  for (int i = 0; i < m.n; ++i) {
    for (int j = 0; j <= i; ++j) {
      // Key position j relates to query position i: path from node_j to node_i.
      const RelationClass rel = ud_path(ast, node_ids[static_cast<std::size_t>(j)],
                                        node_ids[static_cast<std::size_t>(i)]);
      m.ids[k++] = relation_class_id(rel, up_max, down_max);
    }
  }
  return m;
}

LeafCategory categorize_leaf(const Ast& ast, int leaf_id,
                             const CategoryMap& map) {
  const AstNode& leaf = ast.at(leaf_id);
  if (!leaf.is_leaf())
    fail(Error::Kind::Structure,
         "node " + std::to_string(leaf_id) + " is not a leaf");
  if (leaf.parent < 0) return LeafCategory::Other;
  const AstNode& parent = ast.at(leaf.parent);
  if (!parent.type_name) return LeafCategory::Other;
  return map.leaf_category(*parent.type_name);
}

}  // namespace treelm
