#include <doctest.h>

#include <fstream>
#include <iostream>
#include <sstream>

#include "support/fixtures.hpp"
#include "treelm/cli.hpp"
#include "treelm/run_config.hpp"

using namespace treelm;
using namespace treelm::testing;

namespace {

std::string slurp(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  REQUIRE(in);
  return std::string((std::istreambuf_iterator<char>(in)), {});
}

void write_file(const std::string& path, const std::string& text) {
  std::ofstream out(path);
  out << text;
}

}  // namespace

TEST_SUITE("pipeline") {

TEST_CASE("usage errors exit with code 2") {
  CHECK(run_cli({"no-such-subcommand"}) == 2);
  CHECK(run_cli({}) == 2);
  CHECK(run_cli({"train"}) == 2);  // missing required flags
  CHECK(run_cli({"--help"}) == 0);
}

TEST_CASE("config files with unknown keys are rejected") {
  TempDir dir("cfg");
  write_file(dir.file("bad.json"), R"({"data":"x","vocab":"y","typo":1})");
  CHECK_THROWS_AS(RunConfig::load(dir.file("bad.json")), Error);
  write_file(dir.file("bad2.json"),
             R"({"model":{"kind":"trav","n_blocks":6}})");
  CHECK_THROWS_AS(RunConfig::load(dir.file("bad2.json")), Error);
  write_file(dir.file("ok.json"),
             R"({"data":"d","vocab":"v","model":{"kind":"travrel","dropout":0.0},
                 "train":{"max_epochs":2,"seed":3}})");
  const RunConfig rc = RunConfig::load(dir.file("ok.json"));
  CHECK(rc.model.kind == ModelKind::TravRel);
  CHECK(rc.train.max_epochs == 2);
  CHECK(rc.train.seed == 3);
  CHECK(rc.model.n_block == 6);  // defaults kept
}

TEST_CASE("the full pipeline runs through the CLI, deterministically") {
  TempDir dir("e2e");
  const std::string trees = dir.file("trees.jsonl");
  const std::string vocab = dir.file("vocab.json");
  REQUIRE(run_cli({"--quiet", "gen", "--mode", "two-class", "--trees", "24",
                   "--out", trees, "--gen-seed", "5"}) == 0);
  REQUIRE(run_cli({"--quiet", "vocab", "--model-kind", "trav", "--input",
                   trees, "--out", vocab}) == 0);
  REQUIRE(run_cli({"--quiet", "prepare", "--model-kind", "trav", "--input",
                   trees, "--vocab", vocab, "--out", dir.file("data"),
                   "--context", "96", "--stride", "48"}) == 0);
  const std::string data = dir.file("data") + "/trav.segments.jsonl";

  write_file(dir.file("run.json"), R"({
    "data": ")" + data + R"(",
    "vocab": ")" + vocab + R"(",
    "model": {"kind":"trav","n_block":1,"n_head":2,"d_model":16,"context":96,"dropout":0.0},
    "train": {"learning_rate":1e-3,"batch_size":8,"max_epochs":2,"seed":7}
  })");

  for (const char* run : {"runA", "runB"}) {
    REQUIRE(run_cli({"--quiet", "train", "--config", dir.file("run.json"),
                     "--out", dir.file(run)}) == 0);
    REQUIRE(run_cli({"--quiet", "eval", "--ckpt", dir.file(run) + "/model.ckpt",
                     "--data", data, "--vocab", vocab, "--breakdown", "--out",
                     dir.file(std::string(run) + ".report.json")}) == 0);
  }
  // Same config + seed + input: byte-identical reports.
  CHECK(slurp(dir.file("runA.report.json")) ==
        slurp(dir.file("runB.report.json")));

  REQUIRE(run_cli({"--quiet", "inspect", "--ckpt", dir.file("runA") + "/model.ckpt",
                   "--data", data, "--vocab", vocab, "--tree-index", "1",
                   "--out", dir.file("heat"), "--max-positions", "6"}) == 0);
  CHECK(std::filesystem::exists(dir.file("heat") + "/saliency.csv"));
  CHECK(std::filesystem::exists(dir.file("heat") + "/saliency.svg"));

  // Joint evaluation drives the beam search end to end.
  REQUIRE(run_cli({"--quiet", "eval", "--ckpt", dir.file("runA") + "/model.ckpt",
                   "--data", data, "--vocab", vocab, "--joint",
                   "--max-joint-positions", "20", "--out",
                   dir.file("joint.json")}) == 0);
  const std::string joint = slurp(dir.file("joint.json"));
  CHECK(joint.find("\"joint\"") != std::string::npos);

  // --json switches stdout to the machine-readable report.
  std::ostringstream captured;
  std::streambuf* old = std::cout.rdbuf(captured.rdbuf());
  const int rc = run_cli({"--quiet", "--json", "eval", "--ckpt",
                          dir.file("runA") + "/model.ckpt", "--data", data,
                          "--vocab", vocab});
  std::cout.rdbuf(old);
  REQUIRE(rc == 0);
  const nlohmann::json parsed = nlohmann::json::parse(captured.str());
  CHECK(parsed.contains("overall"));
  CHECK(parsed.at("model_kind") == "trav");
  CHECK(parsed.at("oov_policy") == "oov-targets-miss-and-counted");
}

TEST_CASE("kind mismatches surface as runtime errors (exit 1)") {
  TempDir dir("mismatch");
  const std::string trees = dir.file("trees.jsonl");
  const std::string vocab = dir.file("vocab.json");
  REQUIRE(run_cli({"--quiet", "gen", "--mode", "two-class", "--trees", "8",
                   "--out", trees}) == 0);
  REQUIRE(run_cli({"--quiet", "vocab", "--model-kind", "rootpath", "--input",
                   trees, "--out", vocab}) == 0);
  REQUIRE(run_cli({"--quiet", "prepare", "--model-kind", "rootpath", "--input",
                   trees, "--vocab", vocab, "--out", dir.file("data")}) == 0);
  write_file(dir.file("run.json"), R"({
    "data": ")" + dir.file("data") + R"(/rootpath.segments.jsonl",
    "vocab": ")" + vocab + R"(",
    "model": {"kind":"trav","n_block":1,"n_head":1,"d_model":8,"dropout":0.0},
    "train": {"max_epochs":1}
  })");
  CHECK(run_cli({"--quiet", "train", "--config", dir.file("run.json"), "--out",
                 dir.file("ckpt")}) == 1);
}

TEST_CASE("srcseq accepts pre-tokenized streams and the leaf approximation") {
  TempDir dir("srcseq");
  const std::string trees = dir.file("trees.jsonl");
  REQUIRE(run_cli({"--quiet", "gen", "--mode", "two-class", "--trees", "6",
                   "--out", trees}) == 0);
  // Leaf-value approximation from the trees.
  REQUIRE(run_cli({"--quiet", "vocab", "--model-kind", "srcseq", "--input",
                   trees, "--out", dir.file("v1.json")}) == 0);
  REQUIRE(run_cli({"--quiet", "prepare", "--model-kind", "srcseq", "--input",
                   trees, "--vocab", dir.file("v1.json"), "--out",
                   dir.file("d1")}) == 0);
  const Dataset approx = read_dataset(dir.file("d1") + "/srcseq.segments.jsonl");
  CHECK(approx.header.approx_source_tokens);
  CHECK(approx.segments.size() == 6);

  // External pre-tokenized stream.
  write_file(dir.file("toks.jsonl"),
             "[\"def\",\"f\",\"(\",\"x\",\")\"]\n[\"return\",\"x\"]\n");
  REQUIRE(run_cli({"--quiet", "vocab", "--model-kind", "srcseq", "--tokens",
                   dir.file("toks.jsonl"), "--out", dir.file("v2.json")}) == 0);
  REQUIRE(run_cli({"--quiet", "prepare", "--model-kind", "srcseq", "--tokens",
                   dir.file("toks.jsonl"), "--vocab", dir.file("v2.json"),
                   "--out", dir.file("d2")}) == 0);
  const Dataset ext = read_dataset(dir.file("d2") + "/srcseq.segments.jsonl");
  CHECK_FALSE(ext.header.approx_source_tokens);
  REQUIRE(ext.segments.size() == 2);
  CHECK(ext.segments[0].tokens.size() == 5);
}

TEST_CASE("segments with nothing to predict are dropped and counted") {
  TempDir dir("dropped");
  // A single-leaf tree yields a one-token leaf sequence: no loss rows.
  write_file(dir.file("trees.jsonl"),
             R"([{"type":"Mod","value":"x"}])" "\n"
             R"([{"type":"Mod","children":[1,2]},{"type":"A","value":"a"},{"type":"B","value":"b"}])" "\n");
  TokenCounter counter;
  count_corpus_tokens(ModelKind::LeafSeq, dir.file("trees.jsonl"), "", counter);
  const Vocab vocab = build_vocab(counter, 100);
  PrepareOptions popt;
  popt.kind = ModelKind::LeafSeq;
  popt.context = 16;
  const Dataset ds = prepare_dataset(popt, dir.file("trees.jsonl"), "", vocab);
  CHECK(ds.header.dropped_empty == 1);
  REQUIRE(ds.segments.size() == 1);
  CHECK(ds.segments[0].tree_index == 1);
}

TEST_CASE("degenerate one-node trees do not abort rootpath preparation") {
  TempDir dir("degenerate");
  write_file(dir.file("trees.jsonl"),
             R"([{"value":"lonely"}])" "\n"
             R"([{"type":"Mod","children":[1,2]},{"type":"A","value":"a"},{"type":"B","value":"b"}])" "\n");
  TokenCounter counter;
  count_corpus_tokens(ModelKind::RootPath, dir.file("trees.jsonl"), "", counter);
  const Vocab vocab = build_vocab(counter, 100);
  PrepareOptions popt;
  popt.kind = ModelKind::RootPath;
  popt.context = 16;
  const Dataset ds = prepare_dataset(popt, dir.file("trees.jsonl"), "", vocab);
  CHECK(ds.header.dropped_empty == 1);
  REQUIRE(ds.segments.size() == 1);
  REQUIRE(ds.segments[0].paths.size() == 2);
  CHECK_FALSE(ds.segments[0].paths[0].empty());
}

TEST_CASE("dataset files round-trip") {
  TempDir dir("dataset_rt");
  GrammarOptions gopt;
  PrepareOptions popt;
  popt.context = 64;
  popt.stride = 32;
  const SyntheticData d =
      make_synthetic_data(ModelKind::TravRel, 10, gopt, popt, dir, "rt");
  const std::string path = dir.file("segs.jsonl");
  write_dataset(d.dataset, path);
  const Dataset back = read_dataset(path);
  REQUIRE(back.segments.size() == d.dataset.segments.size());
  CHECK(back.header.kind == "travrel");
  for (std::size_t i = 0; i < back.segments.size(); ++i) {
    CHECK(back.segments[i].tokens == d.dataset.segments[i].tokens);
    CHECK(back.segments[i].loss_mask == d.dataset.segments[i].loss_mask);
    CHECK(back.segments[i].rel == d.dataset.segments[i].rel);
    CHECK(back.segments[i].cat == d.dataset.segments[i].cat);
  }
}

TEST_CASE("multi-window travrel segments stay consistent with the trees") {
  TempDir dir("multiwin");
  GrammarOptions gopt;
  gopt.seed = 23;
  gopt.min_internal = 30;
  gopt.max_internal = 40;  // ~60-80 tokens per tree
  const auto lines = generate_trees(gopt, 8);
  const std::string trees = dir.file("trees.jsonl");
  write_trees(lines, trees);
  TokenCounter counter;
  count_corpus_tokens(ModelKind::TravRel, trees, "", counter);
  const Vocab vocab = build_vocab(counter, 1000);
  PrepareOptions popt;
  popt.kind = ModelKind::TravRel;
  popt.context = 32;
  popt.stride = 16;
  const Dataset ds = prepare_dataset(popt, trees, "", vocab);
  CHECK(ds.segments.size() > 2 * lines.size());  // several windows per tree

  for (std::size_t ti = 0; ti < lines.size(); ++ti) {
    const Ast ast = normalize_ast(parse_ast_json(lines[ti]));
    const auto tokens = dfs_sequence(ast);
    const auto windows = slice_into_segments(tokens, 32, 16);
    std::vector<const PreparedSegment*> segs;
    for (const PreparedSegment& s : ds.segments)
      if (s.tree_index == static_cast<std::int32_t>(ti)) segs.push_back(&s);
    REQUIRE(segs.size() == windows.size());

    std::size_t masked_total = 0;
    for (std::size_t w = 0; w < windows.size(); ++w) {
      const Segment& win = windows[w];
      const PreparedSegment& seg = *segs[w];
      REQUIRE(seg.tokens.size() == win.tokens.size());
      CHECK(seg.loss_mask == win.loss_mask);
      for (std::uint8_t m : seg.loss_mask) masked_total += m;
      // Relations were computed over this window's node ids.
      std::vector<int> ids;
      for (const NodeToken& t : win.tokens) ids.push_back(t.source_node_id);
      const RelationMatrix expect = build_relation_matrix(ast, ids, 8, 8);
      CHECK(seg.rel == expect.ids);
      // Token ids re-encode identically.
      for (std::size_t i = 0; i < win.tokens.size(); ++i)
        CHECK(seg.tokens[i] == vocab.encode(win.tokens[i].ns, win.tokens[i].text));
    }
    // The loss masks of one tree's windows partition all its tokens.
    CHECK(masked_total == tokens.size());
  }
}

TEST_CASE("prepare is thread-count invariant") {
  TempDir dir("threads");
  GrammarOptions gopt;
  gopt.seed = 17;
  const auto lines = generate_trees(gopt, 30);
  const std::string trees = dir.file("trees.jsonl");
  write_trees(lines, trees);
  TokenCounter counter;
  count_corpus_tokens(ModelKind::TravRel, trees, "", counter);
  const Vocab vocab = build_vocab(counter, 1000);
  PrepareOptions p1, p4;
  p1.kind = p4.kind = ModelKind::TravRel;
  p1.threads = 1;
  p4.threads = 4;
  const Dataset a = prepare_dataset(p1, trees, "", vocab);
  const Dataset b = prepare_dataset(p4, trees, "", vocab);
  REQUIRE(a.segments.size() == b.segments.size());
  for (std::size_t i = 0; i < a.segments.size(); ++i) {
    CHECK(a.segments[i].tree_index == b.segments[i].tree_index);
    CHECK(a.segments[i].tokens == b.segments[i].tokens);
    CHECK(a.segments[i].rel == b.segments[i].rel);
  }
}

}  // TEST_SUITE
