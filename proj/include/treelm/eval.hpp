#pragma once

#include <functional>
#include <map>
#include <string>
#include <vector>

#include "treelm/dataset.hpp"
#include "treelm/model.hpp"
#include "treelm/vocab.hpp"

namespace treelm {

// Rank sentinel: the correct token was not in the top 10.
constexpr int kRankMiss = 0;

// 1 + (strictly greater logits) + (equal logits at lower token id);
// anything beyond rank 10 collapses to kRankMiss.
int rank_of_target(const float* logits, int vocab_size, int target);

struct RankResult {
  std::int32_t position = 0;  // target token position within its segment
  std::int32_t target = 0;
  int rank = kRankMiss;  // 1..10 or kRankMiss
  bool is_leaf = false;
  bool target_was_oov = false;
  std::uint8_t cat = kNoCategory;
  std::uint8_t tcat = kNoCategory;
};

// Mean of 1/rank (MISS contributing 0) as a percentage; errors on empty input.
double compute_mrr(const std::vector<int>& ranks);

struct ScoreAccumulator {
  std::int64_t count = 0;
  std::int64_t hits = 0;  // rank <= 10
  std::int64_t oov = 0;
  double sum_rr = 0.0;

  void add(int rank, bool was_oov) {
    ++count;
    if (was_oov) ++oov;
    if (rank != kRankMiss) {
      ++hits;
      sum_rr += 1.0 / rank;
    }
  }
  double mrr() const { return count == 0 ? 0.0 : 100.0 * sum_rr / count; }
  double oov_rate() const {
    return count == 0 ? 0.0 : static_cast<double>(oov) / count;
  }
};

struct EvalReport {
  std::string model_kind;
  std::string dataset_kind;
  std::string dataset_source;
  std::string vocab_hash;
  std::string config_hash;
  std::string params_hash;
  // Convention flag: out-of-vocabulary targets are scored as MISS and kept
  // in the denominator; the OOV rate is reported alongside.
  std::string oov_policy = "oov-targets-miss-and-counted";

  ScoreAccumulator overall;
  ScoreAccumulator leaves;
  ScoreAccumulator internals;
  std::map<std::string, ScoreAccumulator> leaf_categories;
  std::map<std::string, ScoreAccumulator> type_categories;

  bool joint_enabled = false;
  ScoreAccumulator joint_overall;
  std::map<std::string, ScoreAccumulator> joint_leaf_categories;
  std::int64_t joint_positions_skipped = 0;

  nlohmann::json to_json() const;
  std::string to_table() const;
};

struct EvalOptions {
  bool breakdown = true;
  bool joint = false;
  int beam_width = 10;
  // Joint search re-runs the model beam_width+1 times per position; cap it.
  std::int64_t max_joint_positions = 500;
};

using SegmentLogitsFn = std::function<MatF(const PreparedSegment&)>;
using PrefixLogitsFn = std::function<MatF(const std::vector<std::int32_t>&)>;

// Ranks computed at loss-mask positions only; leaf/internal and category
// breakdowns follow the segment's stored codes.
EvalReport evaluate_corpus(const SegmentLogitsFn& model, const Dataset& dataset,
                           const Vocab& vocab, const EvalOptions& options,
                           const PrefixLogitsFn& prefix_model = nullptr);

// Joint internal-type + leaf-value search: expand the top-`beam_width`
// TYPE-namespace candidates after `prefix`, query each conditional leaf
// distribution, and rank VALUE tokens by the best p(type) * p(value | type).
// Returns (value id, joint probability), best first, ties by ascending id.
std::vector<std::pair<int, double>> joint_leaf_prediction(
    const PrefixLogitsFn& model, const std::vector<std::int32_t>& prefix,
    const Vocab& vocab, int beam_width = 10);

// Convenience wrapper binding model params to the eval callables.
struct ModelRunner {
  const ModelParams<float>* params = nullptr;

  MatF segment_logits(const PreparedSegment& seg) const {
    Activations<float> acts;
    const ModelInput in = to_model_input(seg, params->cfg.kind);
    return model_forward<float>(*params, in, acts);
  }

  MatF prefix_logits(const std::vector<std::int32_t>& tokens) const {
    if (params->cfg.kind != ModelKind::Trav)
      fail(Error::Kind::Config,
           "prefix re-querying is only defined for the trav model");
    Activations<float> acts;
    ModelInput in;
    in.tokens = tokens;
    return model_forward<float>(*params, in, acts);
  }

  SegmentLogitsFn segment_fn() const {
    return [this](const PreparedSegment& s) { return segment_logits(s); };
  }
  PrefixLogitsFn prefix_fn() const {
    return [this](const std::vector<std::int32_t>& t) {
      return prefix_logits(t);
    };
  }
};

}  // namespace treelm
