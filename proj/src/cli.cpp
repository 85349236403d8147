#include "treelm/cli.hpp"

#include <filesystem>
#include <fstream>
#include <iostream>
#include <sstream>

#include <CLI11.hpp>

#include "treelm/checkpoint.hpp"
#include "treelm/dataset.hpp"
#include "treelm/eval.hpp"
#include "treelm/run_config.hpp"
#include "treelm/saliency.hpp"
#include "treelm/synthetic.hpp"
#include "treelm/train.hpp"
#include "treelm/vocab.hpp"

namespace treelm {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

struct GlobalFlags {
  std::uint64_t seed = 0;
  bool seed_set = false;
  int threads = 1;
  bool quiet = false;
  bool json_out = false;
};

std::string config_fingerprint(const ModelConfig& cfg) {
  return to_hex(fnv1a64(cfg.to_json().dump()));
}

std::string params_fingerprint(ModelParams<float>& params) {
  std::uint64_t h = 0xcbf29ce484222325ull;
  for (auto& p : params.parameters())
    h = fnv1a64(p.tensor->data(),
                static_cast<std::size_t>(p.tensor->size()) * sizeof(float), h);
  return to_hex(h);
}

void note(const GlobalFlags& g, const std::string& msg) {
  if (!g.quiet) std::cerr << msg << "\n";
}

int cmd_gen(const GlobalFlags& g, const std::string& mode, int trees,
            std::uint64_t seed, const std::string& out, int types,
            int min_nodes, int max_nodes, double branch_prob, int max_depth) {
  GrammarOptions opt;
  if (mode == "chain")
    opt.mode = GrammarOptions::Mode::Chain;
  else if (mode == "two-class")
    opt.mode = GrammarOptions::Mode::TwoClass;
  else
    fail(Error::Kind::Config, "gen: mode must be `chain` or `two-class`");
  opt.n_types = types;
  opt.min_internal = min_nodes;
  opt.max_internal = max_nodes;
  opt.branch_prob = branch_prob;
  opt.max_depth = max_depth;
  opt.seed = g.seed_set ? g.seed : seed;
  write_trees(generate_trees(opt, trees), out);
  note(g, "wrote " + std::to_string(trees) + " trees to " + out);
  return 0;
}

int cmd_vocab(const GlobalFlags& g, const std::string& kind_str,
              const std::string& input, const std::string& tokens,
              const std::string& out, int max_size) {
  const ModelKind kind = model_kind_from_string(kind_str);
  TokenCounter counter;
  count_corpus_tokens(kind, input, tokens, counter);
  Vocab vocab = build_vocab(counter, max_size);
  vocab.save(out);
  std::ostringstream msg;
  msg << "vocab " << out << ": " << vocab.size() << " tokens, coverage "
      << vocab.coverage();
  note(g, msg.str());
  return 0;
}

int cmd_prepare(const GlobalFlags& g, const std::string& kind_str,
                const std::string& input, const std::string& tokens,
                const std::string& vocab_path, const std::string& out_dir,
                PrepareOptions opt) {
  opt.kind = model_kind_from_string(kind_str);
  opt.threads = g.threads;
  const Vocab vocab = Vocab::load(vocab_path);
  Dataset ds = prepare_dataset(opt, input, tokens, vocab);
  fs::create_directories(out_dir);
  const std::string path =
      (fs::path(out_dir) / (to_string(opt.kind) + std::string(".segments.jsonl")))
          .string();
  write_dataset(ds, path);
  note(g, "prepared " + std::to_string(ds.header.n_segments) + " segments (" +
              std::to_string(ds.header.dropped_empty) + " dropped empty) -> " +
              path);
  std::cout << path << "\n";
  return 0;
}

int cmd_train(const GlobalFlags& g, const std::string& config_path,
              const std::string& out_dir, const std::string& resume,
              const std::string& data_override, const std::string& vocab_override,
              double lr_override, int epochs_override, int batch_override) {
  RunConfig rc = RunConfig::load(config_path);
  if (!data_override.empty()) rc.data = data_override;
  if (!vocab_override.empty()) rc.vocab = vocab_override;
  if (g.seed_set) rc.train.seed = g.seed;
  if (lr_override > 0) rc.train.learning_rate = static_cast<float>(lr_override);
  if (epochs_override > 0) rc.train.max_epochs = epochs_override;
  if (batch_override > 0) rc.train.batch_size = batch_override;
  if (rc.data.empty() || rc.vocab.empty())
    fail(Error::Kind::Config, "train: config must name `data` and `vocab`");

  const Dataset dataset = read_dataset(rc.data);
  const Vocab vocab = Vocab::load(rc.vocab);
  rc.model.vocab_size = vocab.size();
  if (dataset.kind() != rc.model.kind)
    fail(Error::Kind::Config, std::string("kind mismatch: dataset is `") +
                                  dataset.header.kind + "` but model is `" +
                                  to_string(rc.model.kind) + "`");
  if (dataset.header.vocab_hash != vocab.hash())
    std::cerr << "warning: vocab hash differs from the one the dataset was "
                 "prepared with\n";
  for (const PreparedSegment& seg : dataset.segments)
    if (static_cast<int>(seg.tokens.size()) > rc.model.context)
      fail(Error::Kind::Config,
           "dataset segment longer than model context; re-prepare or raise "
           "model.context");

  fs::create_directories(out_dir);
  const std::string ckpt_path = (fs::path(out_dir) / "model.ckpt").string();
  const std::string log_path = (fs::path(out_dir) / "run_log.jsonl").string();

  Trainer trainer = resume.empty()
                        ? Trainer(rc.model, rc.train)
                        : Trainer::from_checkpoint(resume, rc.train);
  if (!resume.empty()) {
    if (trainer.params().cfg.kind != rc.model.kind)
      fail(Error::Kind::Config,
           std::string("resume: checkpoint model kind `") +
               to_string(trainer.params().cfg.kind) +
               "` differs from config kind `" + to_string(rc.model.kind) + "`");
    if (trainer.params().cfg.vocab_size != vocab.size())
      fail(Error::Kind::Config, "resume: checkpoint vocab size differs");
  }

  std::ofstream run_log(log_path, std::ios::app);
  if (!run_log) fail(Error::Kind::Io, "cannot write run log " + log_path);
  // Every effective value lands in the run log header record.
  run_log << json{{"event", "start"},
                  {"effective_config", rc.to_json()},
                  {"resumed_from", resume},
                  {"vocab_hash", vocab.hash()},
                  {"dataset", rc.data}}
                 .dump()
          << "\n";

  for (std::int64_t epoch = trainer.completed_epochs();
       epoch < rc.train.max_epochs; ++epoch) {
    const EpochStats stats = trainer.train_epoch(dataset, &run_log);
    std::ostringstream msg;
    msg << "epoch " << (epoch + 1) << "/" << rc.train.max_epochs
        << " mean_loss " << stats.mean_loss << " tokens/s "
        << static_cast<std::int64_t>(stats.tokens_per_sec);
    note(g, msg.str());
    if (rc.train.checkpoint_every_epochs > 0 &&
        (epoch + 1) % rc.train.checkpoint_every_epochs == 0)
      trainer.save(ckpt_path, vocab.hash(), rc.to_json());
  }
  trainer.save(ckpt_path, vocab.hash(), rc.to_json());
  note(g, "checkpoint -> " + ckpt_path);
  return 0;
}

int cmd_eval(const GlobalFlags& g, const std::string& ckpt_path,
             const std::string& data_path, const std::string& vocab_path,
             bool breakdown, bool joint, int beam_width,
             std::int64_t max_joint_positions, const std::string& out_path) {
  Checkpoint ck = load_checkpoint(ckpt_path);
  ModelParams<float> params = ck.build_params();
  const Dataset dataset = read_dataset(data_path);
  const Vocab vocab = Vocab::load(vocab_path);
  if (dataset.kind() != params.cfg.kind)
    fail(Error::Kind::Config, std::string("kind mismatch: dataset is `") +
                                  dataset.header.kind + "` but model is `" +
                                  to_string(params.cfg.kind) + "`");
  if (ck.vocab_hash != vocab.hash())
    std::cerr << "warning: vocab hash differs from the training checkpoint\n";
  if (joint && params.cfg.kind != ModelKind::Trav)
    fail(Error::Kind::Config, "--joint is only supported for the trav model");

  ModelRunner runner{&params};
  EvalOptions opt;
  opt.breakdown = breakdown;
  opt.joint = joint;
  opt.beam_width = beam_width;
  opt.max_joint_positions = max_joint_positions;
  EvalReport report =
      evaluate_corpus(runner.segment_fn(), dataset, vocab, opt,
                      joint ? runner.prefix_fn() : PrefixLogitsFn());
  report.model_kind = to_string(params.cfg.kind);
  report.config_hash = config_fingerprint(params.cfg);
  report.params_hash = params_fingerprint(params);

  if (g.json_out)
    std::cout << report.to_json().dump(2) << "\n";
  else
    std::cout << report.to_table();
  if (!out_path.empty()) {
    std::ofstream out(out_path);
    if (!out) fail(Error::Kind::Io, "cannot write report " + out_path);
    out << report.to_json().dump(2) << "\n";
    note(g, "report -> " + out_path);
  }
  return 0;
}

int cmd_inspect(const GlobalFlags& g, const std::string& ckpt_path,
                const std::string& data_path, const std::string& vocab_path,
                int tree_index, int max_positions, const std::string& out_dir) {
  Checkpoint ck = load_checkpoint(ckpt_path);
  ModelParams<float> params = ck.build_params();
  const Dataset dataset = read_dataset(data_path);
  const Vocab vocab = Vocab::load(vocab_path);
  if (dataset.kind() != params.cfg.kind)
    fail(Error::Kind::Config, "kind mismatch between dataset and model");

  const PreparedSegment* seg = nullptr;
  for (const PreparedSegment& s : dataset.segments)
    if (s.tree_index == tree_index) {
      seg = &s;
      break;
    }
  if (!seg)
    fail(Error::Kind::Config,
         "tree index " + std::to_string(tree_index) + " not in dataset");

  const LossRows rows =
      loss_rows(seg->tokens, seg->loss_mask, seg->leaf,
                kind_predicts_leaves_only(params.cfg.kind));
  std::vector<int> positions;
  for (std::size_t r = 0; r + 1 < seg->tokens.size(); ++r) {
    if (rows.rows[r]) positions.push_back(static_cast<int>(r) + 1);
    if (static_cast<int>(positions.size()) >= max_positions) break;
  }
  if (positions.empty())
    fail(Error::Kind::Config, "selected segment has no loss positions");

  const SaliencyMap map = saliency_map(params, *seg, vocab, positions);
  fs::create_directories(out_dir);
  const std::string csv = (fs::path(out_dir) / "saliency.csv").string();
  const std::string svg = (fs::path(out_dir) / "saliency.svg").string();
  export_heatmap_csv(map, csv);
  export_heatmap_svg(map, svg);
  note(g, "saliency -> " + csv + ", " + svg);
  return 0;
}

}  // namespace

int run_cli(const std::vector<std::string>& args) {
  CLI::App app{"treelm: next-token prediction over syntax trees with small "
               "causal transformers"};
  app.require_subcommand(1);

  GlobalFlags g;
  app.add_option("--seed", g.seed, "override the run seed")
      ->each([&](const std::string&) { g.seed_set = true; });
  app.add_option("--threads", g.threads, "worker threads for prepare");
  app.add_flag("--quiet", g.quiet, "suppress progress notes");
  app.add_flag("--json", g.json_out, "machine-readable stdout where supported");

  // gen
  auto* gen = app.add_subcommand("gen", "generate a synthetic tree corpus");
  std::string gen_mode = "two-class", gen_out;
  int gen_trees = 100, gen_types = 12, gen_min = 16, gen_max = 28,
      gen_depth = 4;
  std::uint64_t gen_seed = 1;
  double gen_branch = 0.35;
  gen->add_option("--mode", gen_mode, "chain | two-class");
  gen->add_option("--trees", gen_trees, "number of trees")->required();
  gen->add_option("--out", gen_out, "output trees.jsonl")->required();
  gen->add_option("--gen-seed", gen_seed, "generator seed");
  gen->add_option("--types", gen_types, "value-table size");
  gen->add_option("--min-nodes", gen_min, "min internal nodes per tree");
  gen->add_option("--max-nodes", gen_max, "max internal nodes per tree");
  gen->add_option("--branch-prob", gen_branch, "branching probability");
  gen->add_option("--max-depth", gen_depth, "max nesting depth");

  // vocab
  auto* voc = app.add_subcommand("vocab", "build a frequency-capped vocabulary");
  std::string voc_kind, voc_input, voc_tokens, voc_out;
  int voc_max = 100000;
  voc->add_option("--model-kind", voc_kind,
                  "srcseq|leafseq|rootpath|trav|travrel")
      ->required();
  voc->add_option("--input", voc_input, "trees.jsonl");
  voc->add_option("--tokens", voc_tokens, "pre-tokenized tokens.jsonl (srcseq)");
  voc->add_option("--out", voc_out, "vocab.json")->required();
  voc->add_option("--max-size", voc_max, "vocabulary cap");

  // prepare
  auto* prep = app.add_subcommand("prepare", "turn trees into model segments");
  std::string prep_kind, prep_input, prep_tokens, prep_vocab, prep_out,
      prep_catmap;
  PrepareOptions prep_opt;
  prep->add_option("--model-kind", prep_kind,
                   "srcseq|leafseq|rootpath|trav|travrel")
      ->required();
  prep->add_option("--input", prep_input, "trees.jsonl");
  prep->add_option("--tokens", prep_tokens,
                   "pre-tokenized tokens.jsonl (srcseq)");
  prep->add_option("--vocab", prep_vocab, "vocab.json")->required();
  prep->add_option("--out", prep_out, "output directory")->required();
  prep->add_option("--context", prep_opt.context, "segment length cap");
  prep->add_option("--stride", prep_opt.stride, "sliding-window stride (default: half the context)");
  prep->add_option("--max-path-len", prep_opt.max_path_len, "root-path cap");
  prep->add_option("--up-max", prep_opt.up_max, "relation up clip");
  prep->add_option("--down-max", prep_opt.down_max, "relation down clip");
  prep->add_option("--category-map", prep_catmap, "category mapping json");

  // train
  auto* tr = app.add_subcommand("train", "train a model from a run config");
  std::string tr_config, tr_out, tr_resume, tr_data, tr_vocab;
  double tr_lr = 0;
  int tr_epochs = 0, tr_batch = 0;
  tr->add_option("--config", tr_config, "run config json")->required();
  tr->add_option("--out", tr_out, "checkpoint/log directory")->required();
  tr->add_option("--resume", tr_resume, "checkpoint to resume from");
  tr->add_option("--data", tr_data, "override config data path");
  tr->add_option("--vocab", tr_vocab, "override config vocab path");
  tr->add_option("--lr", tr_lr, "override learning rate");
  tr->add_option("--epochs", tr_epochs, "override max epochs");
  tr->add_option("--batch-size", tr_batch, "override batch size");

  // eval
  auto* ev = app.add_subcommand("eval", "score a checkpoint with MRR@10");
  std::string ev_ckpt, ev_data, ev_vocab, ev_out;
  bool ev_breakdown = false, ev_joint = false;
  int ev_beam = 10;
  std::int64_t ev_joint_max = 500;
  ev->add_option("--ckpt", ev_ckpt, "checkpoint")->required();
  ev->add_option("--data", ev_data, "prepared segments")->required();
  ev->add_option("--vocab", ev_vocab, "vocab.json")->required();
  ev->add_flag("--breakdown", ev_breakdown, "per-category breakdown");
  ev->add_flag("--joint", ev_joint, "joint type+value beam evaluation (trav)");
  ev->add_option("--beam-width", ev_beam, "joint beam width");
  ev->add_option("--max-joint-positions", ev_joint_max,
                 "cap on joint-search positions");
  ev->add_option("--out", ev_out, "write the JSON report here");

  // inspect
  auto* ins = app.add_subcommand("inspect", "gradient saliency heatmap");
  std::string ins_ckpt, ins_data, ins_vocab, ins_out;
  int ins_tree = 0, ins_max_pos = 64;
  ins->add_option("--ckpt", ins_ckpt, "checkpoint")->required();
  ins->add_option("--data", ins_data, "prepared segments")->required();
  ins->add_option("--vocab", ins_vocab, "vocab.json")->required();
  ins->add_option("--tree-index", ins_tree, "tree to inspect")->required();
  ins->add_option("--max-positions", ins_max_pos, "cap on inspected positions");
  ins->add_option("--out", ins_out, "output directory")->required();

  // Let global flags (--seed, --threads, --quiet, --json) appear after the
  // subcommand as well.
  for (CLI::App* sub : app.get_subcommands([](const CLI::App*) { return true; }))
    sub->fallthrough();

  std::vector<std::string> reversed(args.rbegin(), args.rend());
  try {
    app.parse(reversed);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : 2;
  }

  try {
    if (gen->parsed())
      return cmd_gen(g, gen_mode, gen_trees, gen_seed, gen_out, gen_types,
                     gen_min, gen_max, gen_branch, gen_depth);
    if (voc->parsed())
      return cmd_vocab(g, voc_kind, voc_input, voc_tokens, voc_out, voc_max);
    if (prep->parsed()) {
      prep_opt.category_map_path = prep_catmap;
      return cmd_prepare(g, prep_kind, prep_input, prep_tokens, prep_vocab,
                         prep_out, prep_opt);
    }
    if (tr->parsed())
      return cmd_train(g, tr_config, tr_out, tr_resume, tr_data, tr_vocab,
                       tr_lr, tr_epochs, tr_batch);
    if (ev->parsed())
      return cmd_eval(g, ev_ckpt, ev_data, ev_vocab, ev_breakdown, ev_joint,
                      ev_beam, ev_joint_max, ev_out);
    if (ins->parsed())
      return cmd_inspect(g, ins_ckpt, ins_data, ins_vocab, ins_tree,
                         ins_max_pos, ins_out);
  } catch (const Error& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 2;
}

}  // namespace treelm
