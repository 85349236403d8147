#include "treelm/dataset.hpp"

#include <atomic>
#include <fstream>
#include <mutex>
#include <thread>

namespace treelm {

using nlohmann::json;

nlohmann::json DatasetHeader::to_json() const {
  return json{{"format", format},
              {"kind", kind},
              {"context", context},
              {"stride", stride},
              {"max_path_len", max_path_len},
              {"up_max", up_max},
              {"down_max", down_max},
              {"mapping_version", mapping_version},
              {"vocab_hash", vocab_hash},
              {"source", source},
              {"approx_source_tokens", approx_source_tokens},
              {"n_trees", n_trees},
              {"n_segments", n_segments},
              {"dropped_empty", dropped_empty}};
}

DatasetHeader DatasetHeader::from_json(const json& j) {
  DatasetHeader h;
  h.format = j.at("format").get<std::string>();
  if (h.format != "treelm-segments-v1")
    fail(Error::Kind::Config, "unknown dataset format `" + h.format + "`");
  h.kind = j.at("kind").get<std::string>();
  h.context = j.at("context").get<int>();
  h.stride = j.at("stride").get<int>();
  h.max_path_len = j.at("max_path_len").get<int>();
  h.up_max = j.at("up_max").get<int>();
  h.down_max = j.at("down_max").get<int>();
  h.mapping_version = j.value("mapping_version", "");
  h.vocab_hash = j.value("vocab_hash", "");
  h.source = j.value("source", "");
  h.approx_source_tokens = j.value("approx_source_tokens", false);
  h.n_trees = j.value("n_trees", std::uint64_t{0});
  h.n_segments = j.value("n_segments", std::uint64_t{0});
  h.dropped_empty = j.value("dropped_empty", std::uint64_t{0});
  return h;
}

ModelInput to_model_input(const PreparedSegment& seg, ModelKind kind) {
  ModelInput in;
  in.tokens = seg.tokens;
  if (kind_uses_paths(kind)) in.paths = seg.paths;
  if (kind_uses_relations(kind)) in.rel = seg.rel;
  return in;
}

namespace {

std::vector<std::string> read_lines(const std::string& path) {
  std::ifstream in(path);
  if (!in) fail(Error::Kind::Io, "cannot open " + path);
  std::vector<std::string> lines;
  std::string line;
  while (std::getline(in, line))
    if (!line.empty()) lines.push_back(line);
  return lines;
}

// Ordered parallel map over line indices; results land by index so the
// output is independent of the thread count.
template <typename Fn>
void for_each_index(std::size_t n, int threads, Fn&& fn) {
  if (threads <= 1 || n < 2) {
    for (std::size_t i = 0; i < n; ++i) fn(i);
    return;
  }
  std::atomic<std::size_t> next{0};
  std::vector<std::thread> pool;
  std::exception_ptr error;
  std::mutex error_mu;
  const int use = std::min<std::size_t>(static_cast<std::size_t>(threads), n);
  for (int t = 0; t < use; ++t) {
    pool.emplace_back([&] {
      for (;;) {
        const std::size_t i = next.fetch_add(1);
        if (i >= n) return;
        try {
          fn(i);
        } catch (...) {
          std::lock_guard<std::mutex> lock(error_mu);
          if (!error) error = std::current_exception();
          return;
        }
      }
    });
  }
  for (auto& th : pool) th.join();
  if (error) std::rethrow_exception(error);
}

std::vector<NodeToken> source_tokens_from_line(const std::string& line) {
  json doc;
  try {
    doc = json::parse(line);
  } catch (const json::parse_error& e) {
    fail(Error::Kind::Parse,
         "token line: malformed JSON at byte " + std::to_string(e.byte));
  }
  if (!doc.is_array())
    fail(Error::Kind::Parse, "token line must be a JSON array of strings");
  std::vector<NodeToken> out;
  out.reserve(doc.size());
  for (const json& t : doc) {
    if (!t.is_string())
      fail(Error::Kind::Parse, "token line entries must be strings");
    out.push_back(NodeToken{t.get<std::string>(), TokenNamespace::Value, -1});
  }
  return out;
}

struct TreeSequences {
  Ast ast;  // normalized
  std::vector<NodeToken> tokens;
};

TreeSequences sequences_for_tree(ModelKind kind, const std::string& line) {
  TreeSequences out;
  out.ast = normalize_ast(parse_ast_json(line));
  if (kind == ModelKind::Trav || kind == ModelKind::TravRel)
    out.tokens = dfs_sequence(out.ast);
  else
    out.tokens = leaf_sequence(out.ast);
  return out;
}

}  // namespace

void count_corpus_tokens(ModelKind kind, const std::string& trees_path,
                         const std::string& tokens_path, TokenCounter& counter) {
  if (kind == ModelKind::SrcSeq && !tokens_path.empty()) {
    for (const std::string& line : read_lines(tokens_path))
      for (const NodeToken& t : source_tokens_from_line(line))
        counter.add(t.ns, t.text);
    return;
  }
  for (const std::string& line : read_lines(trees_path)) {
    TreeSequences seq = sequences_for_tree(kind, line);
    for (const NodeToken& t : seq.tokens) counter.add(t.ns, t.text);
    if (kind_uses_paths(kind)) {
      for (const NodeToken& t : seq.tokens) {
        // A parentless leaf (single-node tree) has no path; prepare drops
        // its segment anyway.
        if (seq.ast.at(t.source_node_id).parent < 0) continue;
        for (const NodeToken& anc :
             extract_root_path(seq.ast, t.source_node_id))
          counter.add(anc.ns, anc.text);
      }
    }
  }
}

Dataset prepare_dataset(const PrepareOptions& opt, const std::string& trees_path,
                        const std::string& tokens_path, const Vocab& vocab) {
  const CategoryMap cmap = opt.category_map_path.empty()
                               ? CategoryMap::builtin()
                               : CategoryMap::from_json_file(opt.category_map_path);
  const bool external_tokens =
      opt.kind == ModelKind::SrcSeq && !tokens_path.empty();
  const std::vector<std::string> lines =
      read_lines(external_tokens ? tokens_path : trees_path);
  const int stride =
      opt.stride > 0 ? opt.stride : std::max(1, opt.context / 2);

  Dataset ds;
  ds.header.kind = to_string(opt.kind);
  ds.header.context = opt.context;
  ds.header.stride = stride;
  ds.header.max_path_len = opt.max_path_len;
  ds.header.up_max = opt.up_max;
  ds.header.down_max = opt.down_max;
  ds.header.mapping_version = cmap.version();
  ds.header.vocab_hash = vocab.hash();
  ds.header.source = external_tokens ? tokens_path : trees_path;
  ds.header.approx_source_tokens =
      opt.kind == ModelKind::SrcSeq && !external_tokens;
  ds.header.n_trees = lines.size();

  std::vector<std::vector<PreparedSegment>> per_tree(lines.size());
  std::atomic<std::uint64_t> dropped{0};

  for_each_index(lines.size(), opt.threads, [&](std::size_t li) {
    std::vector<NodeToken> tokens;
    Ast ast;
    bool have_tree = false;
    if (external_tokens) {
      tokens = source_tokens_from_line(lines[li]);
    } else {
      TreeSequences seq = sequences_for_tree(opt.kind, lines[li]);
      ast = std::move(seq.ast);
      tokens = std::move(seq.tokens);
      have_tree = true;
    }
    for (const Segment& raw :
         slice_into_segments(tokens, opt.context, stride)) {
      PreparedSegment seg;
      seg.tree_index = static_cast<std::int32_t>(li);
      const int n = static_cast<int>(raw.tokens.size());
      seg.tokens.reserve(static_cast<std::size_t>(n));
      seg.ns_type.reserve(static_cast<std::size_t>(n));
      for (const NodeToken& t : raw.tokens) {
        seg.tokens.push_back(vocab.encode(t.ns, t.text));
        seg.ns_type.push_back(t.ns == TokenNamespace::Type ? 1 : 0);
      }
      seg.loss_mask = raw.loss_mask;
      seg.leaf = raw.leaf_flags;
      seg.cat.assign(static_cast<std::size_t>(n), kNoCategory);
      seg.tcat.assign(static_cast<std::size_t>(n), kNoCategory);
      if (have_tree) {
        for (int i = 0; i < n; ++i) {
          const NodeToken& t = raw.tokens[static_cast<std::size_t>(i)];
          if (t.ns == TokenNamespace::Value) {
            seg.cat[static_cast<std::size_t>(i)] = static_cast<std::uint8_t>(
                categorize_leaf(ast, t.source_node_id, cmap));
          } else {
            seg.tcat[static_cast<std::size_t>(i)] = static_cast<std::uint8_t>(
                cmap.type_category(*ast.at(t.source_node_id).type_name));
          }
        }
      } else {
        for (int i = 0; i < n; ++i)
          seg.cat[static_cast<std::size_t>(i)] =
              static_cast<std::uint8_t>(LeafCategory::Other);
      }
      // Segments owning no loss positions (single-token trees, say) are
      // dropped before any relation/path work.
      const LossRows rows = loss_rows(seg.tokens, seg.loss_mask, seg.leaf,
                                      kind_predicts_leaves_only(opt.kind));
      if (rows.count == 0) {
        ++dropped;
        continue;
      }
      if (kind_uses_relations(opt.kind)) {
        std::vector<int> node_ids;
        node_ids.reserve(static_cast<std::size_t>(n));
        for (const NodeToken& t : raw.tokens) node_ids.push_back(t.source_node_id);
        seg.rel = build_relation_matrix(ast, node_ids, opt.up_max, opt.down_max).ids;
      }
      if (kind_uses_paths(opt.kind)) {
        seg.paths.resize(static_cast<std::size_t>(n));
        for (int i = 0; i < n; ++i) {
          const NodeToken& t = raw.tokens[static_cast<std::size_t>(i)];
          for (const NodeToken& anc :
               extract_root_path(ast, t.source_node_id, opt.max_path_len))
            seg.paths[static_cast<std::size_t>(i)].push_back(
                vocab.encode(anc.ns, anc.text));
        }
      }
      per_tree[li].push_back(std::move(seg));
    }
  });

  for (auto& group : per_tree)
    for (auto& seg : group) ds.segments.push_back(std::move(seg));
  ds.header.n_segments = ds.segments.size();
  ds.header.dropped_empty = dropped.load();
  return ds;
}

namespace {

json bits_to_json(const std::vector<std::uint8_t>& v) {
  json arr = json::array();
  for (std::uint8_t b : v) arr.push_back(static_cast<int>(b));
  return arr;
}

std::vector<std::uint8_t> bits_from_json(const json& arr) {
  std::vector<std::uint8_t> out;
  out.reserve(arr.size());
  for (const json& b : arr) out.push_back(static_cast<std::uint8_t>(b.get<int>()));
  return out;
}

}  // namespace

void write_dataset(const Dataset& ds, const std::string& path) {
  std::ofstream out(path);
  if (!out) fail(Error::Kind::Io, "cannot write dataset " + path);
  out << ds.header.to_json().dump() << "\n";
  for (const PreparedSegment& seg : ds.segments) {
    json j;
    j["i"] = seg.tree_index;
    j["t"] = seg.tokens;
    j["n"] = bits_to_json(seg.ns_type);
    j["m"] = bits_to_json(seg.loss_mask);
    j["l"] = bits_to_json(seg.leaf);
    j["c"] = bits_to_json(seg.cat);
    j["y"] = bits_to_json(seg.tcat);
    if (!seg.rel.empty()) j["r"] = seg.rel;
    if (!seg.paths.empty()) j["p"] = seg.paths;
    out << j.dump() << "\n";
  }
  if (!out) fail(Error::Kind::Io, "failed writing dataset " + path);
}

Dataset read_dataset(const std::string& path) {
  std::ifstream in(path);
  if (!in) fail(Error::Kind::Io, "cannot open dataset " + path);
  std::string line;
  if (!std::getline(in, line))
    fail(Error::Kind::Io, "dataset " + path + " is empty");
  Dataset ds;
  try {
    ds.header = DatasetHeader::from_json(json::parse(line));
    while (std::getline(in, line)) {
      if (line.empty()) continue;
      json j = json::parse(line);
      PreparedSegment seg;
      seg.tree_index = j.at("i").get<std::int32_t>();
      seg.tokens = j.at("t").get<std::vector<std::int32_t>>();
      seg.ns_type = bits_from_json(j.at("n"));
      seg.loss_mask = bits_from_json(j.at("m"));
      seg.leaf = bits_from_json(j.at("l"));
      seg.cat = bits_from_json(j.at("c"));
      seg.tcat = bits_from_json(j.at("y"));
      if (j.contains("r")) seg.rel = j.at("r").get<std::vector<std::int32_t>>();
      if (j.contains("p"))
        seg.paths = j.at("p").get<std::vector<std::vector<std::int32_t>>>();
      const std::size_t n = seg.tokens.size();
      if (seg.ns_type.size() != n || seg.loss_mask.size() != n ||
          seg.leaf.size() != n || seg.cat.size() != n || seg.tcat.size() != n)
        fail(Error::Kind::Structure, "dataset " + path + ": ragged segment");
      ds.segments.push_back(std::move(seg));
    }
  } catch (const json::exception& e) {
    fail(Error::Kind::Parse, "dataset " + path + ": " + e.what());
  }
  return ds;
}

}  // namespace treelm
