#include "treelm/eval.hpp"

#include <algorithm>
#include <cmath>
#include <iomanip>
#include <sstream>

namespace treelm {

using nlohmann::json;

int rank_of_target(const float* logits, int vocab_size, int target) {
  if (target < 0 || target >= vocab_size)
    fail(Error::Kind::Shape, "rank_of_target: target id out of range");
  const float lt = logits[target];
  int rank = 1;
  for (int j = 0; j < vocab_size; ++j) {
    if (logits[j] > lt) {
      ++rank;
    } else if (logits[j] == lt && j < target) {
      ++rank;  // ties resolved by ascending token id
    }
    if (rank > 10) return kRankMiss;
  }
  return rank;
}

double compute_mrr(const std::vector<int>& ranks) {
  if (ranks.empty()) fail(Error::Kind::Shape, "compute_mrr: no rank results");
  double sum = 0.0;
  for (int r : ranks)
    if (r != kRankMiss) sum += 1.0 / r;
  return 100.0 * sum / static_cast<double>(ranks.size());
}

namespace {

json acc_to_json(const ScoreAccumulator& a) {
  return json{{"mrr", a.mrr()},
              {"count", a.count},
              {"hits", a.hits},
              {"oov", a.oov},
              {"oov_rate", a.oov_rate()}};
}

std::vector<double> softmax_row_double(const MatF& logits, Eigen::Index row) {
  const Eigen::Index v = logits.cols();
  double mx = -std::numeric_limits<double>::infinity();
  for (Eigen::Index j = 0; j < v; ++j)
    mx = std::max(mx, static_cast<double>(logits(row, j)));
  std::vector<double> p(static_cast<std::size_t>(v));
  double sum = 0.0;
  for (Eigen::Index j = 0; j < v; ++j) {
    p[static_cast<std::size_t>(j)] = std::exp(static_cast<double>(logits(row, j)) - mx);
    sum += p[static_cast<std::size_t>(j)];
  }
  for (double& x : p) x /= sum;
  return p;
}

}  // namespace

std::vector<std::pair<int, double>> joint_leaf_prediction(
    const PrefixLogitsFn& model, const std::vector<std::int32_t>& prefix,
    const Vocab& vocab, int beam_width) {
  if (prefix.empty())
    fail(Error::Kind::Shape, "joint_leaf_prediction: empty prefix");
  if (beam_width < 1)
    fail(Error::Kind::Config, "joint_leaf_prediction: beam width must be >= 1");

  const MatF type_logits = model(prefix);
  const std::vector<double> p_type =
      softmax_row_double(type_logits, type_logits.rows() - 1);

  std::vector<int> type_ids, value_ids;
  for (int id = Vocab::kReserved; id < vocab.size(); ++id) {
    if (vocab.decode_parts(id).ns == TokenNamespace::Type)
      type_ids.push_back(id);
    else
      value_ids.push_back(id);
  }
  std::stable_sort(type_ids.begin(), type_ids.end(), [&](int a, int b) {
    if (p_type[static_cast<std::size_t>(a)] != p_type[static_cast<std::size_t>(b)])
      return p_type[static_cast<std::size_t>(a)] > p_type[static_cast<std::size_t>(b)];
    return a < b;
  });
  if (static_cast<int>(type_ids.size()) > beam_width)
    type_ids.resize(static_cast<std::size_t>(beam_width));

  // Each VALUE token keeps its best joint probability across the beam.
  std::vector<double> best(static_cast<std::size_t>(vocab.size()), 0.0);
  std::vector<std::int32_t> extended = prefix;
  extended.push_back(0);
  for (int type_id : type_ids) {
    extended.back() = type_id;
    const MatF leaf_logits = model(extended);
    const std::vector<double> p_value =
        softmax_row_double(leaf_logits, leaf_logits.rows() - 1);
    const double pt = p_type[static_cast<std::size_t>(type_id)];
    for (int v : value_ids) {
      const double joint = pt * p_value[static_cast<std::size_t>(v)];
      best[static_cast<std::size_t>(v)] =
          std::max(best[static_cast<std::size_t>(v)], joint);
    }
  }

  std::vector<std::pair<int, double>> ranked;
  ranked.reserve(value_ids.size());
  for (int v : value_ids) ranked.emplace_back(v, best[static_cast<std::size_t>(v)]);
  std::stable_sort(ranked.begin(), ranked.end(), [](const auto& a, const auto& b) {
    if (a.second != b.second) return a.second > b.second;
    return a.first < b.first;
  });
  return ranked;
}

EvalReport evaluate_corpus(const SegmentLogitsFn& model, const Dataset& dataset,
                           const Vocab& vocab, const EvalOptions& options,
                           const PrefixLogitsFn& prefix_model) {
  EvalReport report;
  report.dataset_kind = dataset.header.kind;
  report.dataset_source = dataset.header.source;
  report.vocab_hash = vocab.hash();
  const ModelKind kind = dataset.kind();
  const bool leaves_only = kind_predicts_leaves_only(kind);
  if (options.joint && !prefix_model)
    fail(Error::Kind::Config, "joint evaluation requires a prefix model");
  report.joint_enabled = options.joint;

  std::int64_t joint_done = 0;
  for (const PreparedSegment& seg : dataset.segments) {
    const LossRows rows =
        loss_rows(seg.tokens, seg.loss_mask, seg.leaf, leaves_only);
    if (rows.count == 0) continue;
    const MatF logits = model(seg);
    if (logits.rows() != static_cast<Eigen::Index>(seg.tokens.size()))
      fail(Error::Kind::Shape, "model returned wrong number of logit rows");

    const int n = static_cast<int>(seg.tokens.size());
    for (int r = 0; r + 1 < n; ++r) {
      if (!rows.rows[static_cast<std::size_t>(r)]) continue;
      const int p = r + 1;
      RankResult res;
      res.position = p;
      res.target = seg.tokens[static_cast<std::size_t>(p)];
      res.target_was_oov = res.target == Vocab::kUnk;
      res.rank = res.target_was_oov
                     ? kRankMiss
                     : rank_of_target(logits.row(r).data(),
                                      static_cast<int>(logits.cols()), res.target);
      res.is_leaf = seg.leaf[static_cast<std::size_t>(p)] != 0;
      res.cat = seg.cat[static_cast<std::size_t>(p)];
      res.tcat = seg.tcat[static_cast<std::size_t>(p)];
      report.overall.add(res.rank, res.target_was_oov);
      if (res.is_leaf) {
        report.leaves.add(res.rank, res.target_was_oov);
        if (options.breakdown && res.cat != kNoCategory)
          report.leaf_categories[to_string(static_cast<LeafCategory>(res.cat))]
              .add(res.rank, res.target_was_oov);
      } else {
        report.internals.add(res.rank, res.target_was_oov);
        if (options.breakdown && res.tcat != kNoCategory)
          report.type_categories[to_string(static_cast<TypeCategory>(res.tcat))]
              .add(res.rank, res.target_was_oov);
      }
      // Joint type+value scoring at internal->leaf boundaries.
      if (options.joint && res.is_leaf && p >= 2 &&
          !seg.leaf[static_cast<std::size_t>(p - 1)]) {
        if (joint_done >= options.max_joint_positions) {
          ++report.joint_positions_skipped;
          continue;
        }
        ++joint_done;
        const std::vector<std::int32_t> prefix(
            seg.tokens.begin(), seg.tokens.begin() + (p - 1));
        const auto ranked =
            joint_leaf_prediction(prefix_model, prefix, vocab, options.beam_width);
        int rank_joint = kRankMiss;
        if (!res.target_was_oov) {
          for (std::size_t idx = 0; idx < ranked.size() && idx < 10; ++idx) {
            if (ranked[idx].first == res.target) {
              rank_joint = static_cast<int>(idx) + 1;
              break;
            }
          }
        }
        report.joint_overall.add(rank_joint, res.target_was_oov);
        if (res.cat != kNoCategory)
          report.joint_leaf_categories[to_string(static_cast<LeafCategory>(res.cat))]
              .add(rank_joint, res.target_was_oov);
      }
    }
  }
  if (report.overall.count == 0)
    fail(Error::Kind::Shape, "evaluation found no scoreable positions");
  return report;
}

json EvalReport::to_json() const {
  json j;
  j["model_kind"] = model_kind;
  j["dataset_kind"] = dataset_kind;
  j["dataset_source"] = dataset_source;
  j["vocab_hash"] = vocab_hash;
  j["config_hash"] = config_hash;
  j["params_hash"] = params_hash;
  j["oov_policy"] = oov_policy;
  j["overall"] = acc_to_json(overall);
  j["leaves"] = acc_to_json(leaves);
  j["internals"] = acc_to_json(internals);
  json lc = json::object();
  for (const auto& [name, acc] : leaf_categories) lc[name] = acc_to_json(acc);
  j["leaf_categories"] = std::move(lc);
  json tc = json::object();
  for (const auto& [name, acc] : type_categories) tc[name] = acc_to_json(acc);
  j["type_categories"] = std::move(tc);
  if (joint_enabled) {
    j["joint"] = acc_to_json(joint_overall);
    json jc = json::object();
    for (const auto& [name, acc] : joint_leaf_categories)
      jc[name] = acc_to_json(acc);
    j["joint_leaf_categories"] = std::move(jc);
    j["joint_positions_skipped"] = joint_positions_skipped;
  }
  return j;
}

std::string EvalReport::to_table() const {
  std::ostringstream out;
  out << std::fixed << std::setprecision(1);
  auto row = [&](const std::string& name, const ScoreAccumulator& a) {
    out << "  " << std::left << std::setw(28) << name << std::right
        << std::setw(7) << a.mrr() << std::setw(12) << a.count << std::setw(10)
        << std::setprecision(3) << a.oov_rate() << std::setprecision(1) << "\n";
  };
  out << "model " << model_kind << " on " << dataset_source << " ("
      << dataset_kind << " data)\n";
  out << "oov policy: " << oov_policy << "\n";
  out << "  " << std::left << std::setw(28) << "category" << std::right
      << std::setw(7) << "MRR" << std::setw(12) << "count" << std::setw(10)
      << "oov" << "\n";
  for (const auto& [name, acc] : leaf_categories) row("leaf: " + name, acc);
  row("all leaf tokens", leaves);
  if (internals.count > 0) {
    for (const auto& [name, acc] : type_categories) row("type: " + name, acc);
    row("all internal tokens", internals);
  }
  row("overall", overall);
  if (joint_enabled) {
    for (const auto& [name, acc] : joint_leaf_categories)
      row("joint leaf: " + name, acc);
    row("joint all leaves", joint_overall);
    if (joint_positions_skipped > 0)
      out << "  (joint skipped " << joint_positions_skipped
          << " positions beyond the cap)\n";
  }
  return out.str();
}

}  // namespace treelm
