#include "treelm/synthetic.hpp"

#include <fstream>
#include <random>

namespace treelm {

namespace {

struct TreeBuilder {
  const GrammarOptions& opt;
  std::mt19937_64& rng;
  Ast ast;
  int remaining = 0;
  int value_index = 0;

  int append(int parent, AstNode node) {
    const int id = ast.size();
    node.parent = parent;
    ast.nodes.push_back(std::move(node));
    if (parent >= 0)
      ast.nodes[static_cast<std::size_t>(parent)].children.push_back(id);
    return id;
  }

  void subtree(int parent, int depth) {
    if (remaining == 0) return;
    --remaining;
    AstNode node;
    if (opt.mode == GrammarOptions::Mode::Chain) {
      node.type_name = "T" + std::to_string(value_index);
      node.value = "v" + std::to_string(value_index);
      value_index = (value_index + 1) % opt.n_types;
    } else {
      const bool cls_b = std::uniform_int_distribution<int>(0, 1)(rng) == 1;
      node.type_name =
          (cls_b ? "B" : "A") + std::to_string(value_index);
      node.value = "v" + std::to_string(value_index);
      value_index = (value_index + (cls_b ? 2 : 1)) % opt.n_types;
    }
    const int id = append(parent, std::move(node));
    if (opt.mode == GrammarOptions::Mode::TwoClass && depth < opt.max_depth &&
        std::uniform_real_distribution<double>(0.0, 1.0)(rng) < opt.branch_prob) {
      const int kids = 1 + std::uniform_int_distribution<int>(0, 1)(rng);
      for (int k = 0; k < kids && remaining > 0; ++k) subtree(id, depth + 1);
    }
  }
};

}  // namespace

std::vector<std::string> generate_trees(const GrammarOptions& opt, int count) {
  if (opt.n_types < 3) fail(Error::Kind::Config, "grammar needs >= 3 types");
  if (opt.min_internal < 1 || opt.max_internal < opt.min_internal)
    fail(Error::Kind::Config, "bad internal-node range");
  std::mt19937_64 rng(mix_seed(opt.seed));
  std::vector<std::string> lines;
  lines.reserve(static_cast<std::size_t>(count));
  for (int i = 0; i < count; ++i) {
    TreeBuilder b{opt, rng, Ast{}, 0, 0};
    AstNode root;
    root.type_name = "Mod";
    b.append(-1, std::move(root));
    if (opt.mode == GrammarOptions::Mode::Chain) {
      // Deterministic spine: the first type pins the whole tree.
      b.remaining = opt.max_internal;
      b.value_index = i % opt.n_types;
      while (b.remaining > 0) b.subtree(0, 1);
    } else {
      b.remaining = std::uniform_int_distribution<int>(
          opt.min_internal, opt.max_internal)(rng);
      b.value_index = std::uniform_int_distribution<int>(0, opt.n_types - 1)(rng);
      while (b.remaining > 0) b.subtree(0, 1);
    }
    lines.push_back(emit_ast_json(b.ast));
  }
  return lines;
}

void write_trees(const std::vector<std::string>& lines, const std::string& path) {
  std::ofstream out(path);
  if (!out) fail(Error::Kind::Io, "cannot write " + path);
  for (const std::string& line : lines) out << line << "\n";
  if (!out) fail(Error::Kind::Io, "failed writing " + path);
}

}  // namespace treelm
