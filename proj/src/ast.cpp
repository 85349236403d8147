#include "treelm/ast.hpp"

#include <algorithm>
#include <sstream>

#include <json.hpp>

namespace treelm {

using nlohmann::json;

const AstNode& Ast::at(int id) const {
  if (id < 0 || id >= size())
    fail(Error::Kind::Structure,
         "node id " + std::to_string(id) + " out of range (tree has " +
             std::to_string(size()) + " nodes)");
  return nodes[static_cast<std::size_t>(id)];
}

bool Ast::is_normalized() const {
  for (const AstNode& n : nodes) {
    if (n.is_dual()) return false;
    if (n.is_leaf() && !n.children.empty()) return false;
  }
  return true;
}

const std::vector<int>& Ast::depths() const {
  if (depths_.size() != nodes.size()) {
    depths_.assign(nodes.size(), 0);
    for (std::size_t i = 1; i < nodes.size(); ++i) {
      const int p = nodes[i].parent;
      if (p < 0 || p >= static_cast<int>(i))
        fail(Error::Kind::Structure,
             "node " + std::to_string(i) + " has non-pre-order parent " +
                 std::to_string(p));
      depths_[i] = depths_[static_cast<std::size_t>(p)] + 1;
    }
  }
  return depths_;
}

Ast parse_ast_json(const std::string& line) {
  json doc;
  try {
    doc = json::parse(line);
  } catch (const json::parse_error& e) {
    fail(Error::Kind::Parse, "malformed JSON at byte " + std::to_string(e.byte) +
                                 ": " + e.what());
  }
  if (!doc.is_array())
    fail(Error::Kind::Parse, "expected a JSON array of nodes");
  if (doc.empty()) fail(Error::Kind::Structure, "empty tree");

  const int n = static_cast<int>(doc.size());
  Ast ast;
  ast.nodes.resize(static_cast<std::size_t>(n));

  for (int i = 0; i < n; ++i) {
    const json& obj = doc[static_cast<std::size_t>(i)];
    if (!obj.is_object())
      fail(Error::Kind::Parse, "node " + std::to_string(i) + " is not an object");
    AstNode& node = ast.nodes[static_cast<std::size_t>(i)];
    if (auto it = obj.find("type"); it != obj.end() && !it->is_null()) {
      if (!it->is_string())
        fail(Error::Kind::Parse,
             "node " + std::to_string(i) + ": `type` must be a string");
      node.type_name = it->get<std::string>();
    }
    if (auto it = obj.find("value"); it != obj.end() && !it->is_null()) {
      // py150 occasionally holds numbers here; keep the literal text.
      node.value = it->is_string() ? it->get<std::string>() : it->dump();
    }
    if (!node.type_name && !node.value)
      fail(Error::Kind::Structure,
           "node " + std::to_string(i) + " has neither type nor value");
    if (auto it = obj.find("children"); it != obj.end() && !it->is_null()) {
      if (!it->is_array())
        fail(Error::Kind::Parse,
             "node " + std::to_string(i) + ": `children` must be an array");
      for (const json& c : *it) {
        if (!c.is_number_integer())
          fail(Error::Kind::Parse,
               "node " + std::to_string(i) + ": child index must be an integer");
        node.children.push_back(c.get<int>());
      }
    }
  }

  // Reconstruct parent links; py150 children always point forward.
  for (int i = 0; i < n; ++i) {
    for (int c : ast.nodes[static_cast<std::size_t>(i)].children) {
      if (c < 0 || c >= n)
        fail(Error::Kind::Structure, "node " + std::to_string(i) +
                                         " lists child " + std::to_string(c) +
                                         " outside the node array");
      if (c <= i)
        fail(Error::Kind::Structure,
             "node " + std::to_string(i) + " lists backward child " +
                 std::to_string(c));
      AstNode& child = ast.nodes[static_cast<std::size_t>(c)];
      if (child.parent != -1)
        fail(Error::Kind::Structure,
             "node " + std::to_string(c) + " claimed by two parents");
      child.parent = i;
    }
  }
  for (int i = 1; i < n; ++i)
    if (ast.nodes[static_cast<std::size_t>(i)].parent == -1)
      fail(Error::Kind::Structure,
           "node " + std::to_string(i) + " is unreachable (no parent)");
  return ast;
}

std::string emit_ast_json(const Ast& ast) {
  json arr = json::array();
  for (const AstNode& n : ast.nodes) {
    json obj = json::object();
    if (n.type_name) obj["type"] = *n.type_name;
    if (n.value) obj["value"] = *n.value;
    if (!n.children.empty()) obj["children"] = n.children;
    arr.push_back(std::move(obj));
  }
  return arr.dump();
}

namespace {

void copy_normalized(const Ast& src, int id, int parent, Ast& out) {
  const AstNode& node = src.nodes[static_cast<std::size_t>(id)];
  if (!node.type_name && !node.value)
    fail(Error::Kind::Structure,
         "node " + std::to_string(id) + " has neither type nor value");
  if (!node.type_name && !node.children.empty())
    fail(Error::Kind::Structure,
         "node " + std::to_string(id) + " has a value and children but no type");

  const int new_id = out.size();
  out.nodes.emplace_back();
  out.nodes.back().parent = parent;
  if (parent >= 0)
    out.nodes[static_cast<std::size_t>(parent)].children.push_back(new_id);

  if (node.type_name) {
    out.nodes.back().type_name = node.type_name;
    if (node.value) {
      // Dual node: the value becomes a fresh leaf, inserted first.
      const int leaf_id = out.size();
      out.nodes.emplace_back();
      out.nodes.back().parent = new_id;
      out.nodes.back().value = node.value;
      out.nodes[static_cast<std::size_t>(new_id)].children.push_back(leaf_id);
    }
  } else {
    out.nodes.back().value = node.value;
  }
  for (int c : node.children) copy_normalized(src, c, new_id, out);
}

}  // namespace

Ast normalize_ast(const Ast& ast) {
  if (ast.nodes.empty()) fail(Error::Kind::Structure, "empty tree");
  Ast out;
  out.nodes.reserve(ast.nodes.size() * 2);
  copy_normalized(ast, 0, -1, out);
  return out;
}

std::vector<std::string> validate_ast(const Ast& ast) {
  std::vector<std::string> violations;
  auto report = [&](const std::string& msg) { violations.push_back(msg); };
  const int n = ast.size();
  if (n == 0) {
    report("empty tree");
    return violations;
  }
  if (ast.nodes[0].parent != -1) report("root (node 0) has a parent");
  for (int i = 1; i < n; ++i) {
    const AstNode& node = ast.nodes[static_cast<std::size_t>(i)];
    if (node.parent < 0 || node.parent >= n) {
      report("node " + std::to_string(i) + " has invalid parent " +
             std::to_string(node.parent));
      continue;
    }
    const AstNode& parent = ast.nodes[static_cast<std::size_t>(node.parent)];
    if (std::find(parent.children.begin(), parent.children.end(), i) ==
        parent.children.end())
      report("node " + std::to_string(i) + " missing from parent " +
             std::to_string(node.parent) + "'s child list");
  }
  for (int i = 0; i < n; ++i) {
    const AstNode& node = ast.nodes[static_cast<std::size_t>(i)];
    if (node.is_dual())
      report("node " + std::to_string(i) + " has both type and value");
    if (!node.type_name && !node.value)
      report("node " + std::to_string(i) + " has neither type nor value");
    if (node.is_leaf() && !node.children.empty())
      report("leaf node " + std::to_string(i) + " has children");
    for (int c : node.children) {
      if (c < 0 || c >= n) {
        report("node " + std::to_string(i) + " lists child " +
               std::to_string(c) + " out of range");
        continue;
      }
      if (ast.nodes[static_cast<std::size_t>(c)].parent != i)
        report("child link " + std::to_string(i) + "->" + std::to_string(c) +
               " not mirrored by parent link");
      // Pre-order numbering: every id in a subtree exceeds its root's id.
      if (c <= i)
        report("edge " + std::to_string(i) + "->" + std::to_string(c) +
               " violates pre-order numbering");
    }
  }
  // Pre-order also requires children of one node to be visited contiguously:
  // node i's subtree must occupy a contiguous id range starting at i+1.
  std::vector<int> subtree_end(static_cast<std::size_t>(n), 0);
  for (int i = n - 1; i >= 0; --i) {
    int end = i + 1;
    for (int c : ast.nodes[static_cast<std::size_t>(i)].children)
      if (c > i && c < n) end = std::max(end, subtree_end[static_cast<std::size_t>(c)]);
    subtree_end[static_cast<std::size_t>(i)] = end;
    int expect = i + 1;
    for (int c : ast.nodes[static_cast<std::size_t>(i)].children) {
      if (c <= i || c >= n) continue;
      if (c != expect)
        report("edge " + std::to_string(i) + "->" + std::to_string(c) +
               " violates pre-order numbering");
      expect = subtree_end[static_cast<std::size_t>(c)];
    }
  }
  return violations;
}

}  // namespace treelm
