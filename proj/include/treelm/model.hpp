#pragma once

#include <optional>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>

#include "treelm/kernels.hpp"
#include "treelm/seqgen.hpp"
#include "treelm/tensor.hpp"

namespace treelm {

enum class ModelKind { SrcSeq, LeafSeq, RootPath, Trav, TravRel };

const char* to_string(ModelKind k);
ModelKind model_kind_from_string(const std::string& s);

inline bool kind_predicts_leaves_only(ModelKind k) {
  return k != ModelKind::Trav && k != ModelKind::TravRel;
}
inline bool kind_uses_paths(ModelKind k) { return k == ModelKind::RootPath; }
inline bool kind_uses_relations(ModelKind k) { return k == ModelKind::TravRel; }

struct ModelConfig {
  ModelKind kind = ModelKind::Trav;
  int n_block = 6;
  int n_head = 6;
  int d_model = 300;
  int context = 1000;
  int vocab_size = 0;
  int max_path_len = 13;
  int up_max = 8;
  int down_max = 8;
  float dropout = 0.1f;
  // Off by default: feed position t the root path of the leaf it predicts
  // (t+1) instead of its own. The strictly causal reading keeps this false.
  bool include_target_path = false;

  int d_head() const {
    if (n_head < 1 || d_model % n_head != 0)
      fail(Error::Kind::Config, "d_model must be divisible by n_head");
    return d_model / n_head;
  }
  int relation_classes() const { return relation_class_count(up_max, down_max); }

  nlohmann::json to_json() const;
  static ModelConfig from_json(const nlohmann::json& j);
};

template <typename S>
struct BlockParams {
  Tensor<S> w_q, b_q, w_k, b_k, w_v, b_v, w_o, b_o;
  Tensor<S> ln1_g, ln1_b, ln2_g, ln2_b;
  Tensor<S> ff1_w, ff1_b, ff2_w, ff2_b;
};

// Gated recurrent memory cell summarizing root paths (final hidden state).
template <typename S>
struct LstmParams {
  Tensor<S> w_ih, w_hh;  // [d x 4d], [d x 4d]
  Tensor<S> b_ih, b_hh;  // [4d]
};

template <typename S>
struct ModelParams {
  ModelConfig cfg;
  Tensor<S> wte;  // [V x d]; deliberately no positional table anywhere
  std::vector<BlockParams<S>> blocks;
  Tensor<S> cls_w, cls_b;  // [d x V], [V]
  LstmParams<S> lstm;      // RootPath only
  Tensor<S> rel_logits;    // TravRel only: [relation classes x n_head]

  std::vector<Parameter<S>> parameters();
  void ensure_grads();
  void zero_grads();
  std::int64_t parameter_count() const;
  // Name of the first tensor holding a non-finite gradient, if any.
  std::optional<std::string> first_nonfinite_grad();

  template <typename T>
  ModelParams<T> cast() const;
};

template <typename S>
ModelParams<S> init_model_params(const ModelConfig& cfg, std::uint64_t seed);

// One segment's model-ready view.
struct ModelInput {
  std::vector<std::int32_t> tokens;
  // RootPath: token-encoded root path per position, lengths 1..max_path_len.
  std::vector<std::vector<std::int32_t>> paths;
  // TravRel: lower-triangular relation class ids, n(n+1)/2.
  std::vector<std::int32_t> rel;
};

template <typename S>
struct LstmStepCache {
  MatX<S> x, h_prev, c_prev;
  MatX<S> gi, gf, gg, go;  // post-activation gates
  MatX<S> tanh_c;
  std::vector<std::uint8_t> alive;
};

template <typename S>
struct LstmCache {
  std::vector<LstmStepCache<S>> steps;
  MatX<S> h_final;
};

template <typename S>
struct BlockCache {
  MatX<S> h_in;
  MatX<S> q, k, v;
  std::vector<MatX<S>> weights;     // per head, post-softmax
  std::vector<MatX<S>> drop_w;      // per head dropout scale (training only)
  std::vector<MatX<S>> scores_raw;  // per head QK^T (kept for relation grads)
  MatX<S> attn_concat, attn_proj;
  LayerNormCache<S> ln1;
  MatX<S> a;  // post-LN1
  MatX<S> ff1, gelu_out, ff_drop, ff2;
  LayerNormCache<S> ln2;
  MatX<S> out;
};

template <typename S>
struct Activations {
  MatX<S> input;  // embedding-layer output fed to block 0
  LstmCache<S> lstm;
  std::vector<MatX<S>> rel_factors;  // per head, exp(rel_logits) gathered
  std::vector<BlockCache<S>> blocks;
  MatX<S> logits;
};

// Forward pass; logits row i depends only on tokens[0..i]. `training` turns
// dropout on (requires rng).
template <typename S>
const MatX<S>& model_forward(const ModelParams<S>& params, const ModelInput& in,
                             Activations<S>& acts, bool training = false,
                             std::mt19937* rng = nullptr);

// Next-token loss rows: logits row r is scored against tokens[r+1] when that
// target position is owned by this segment's loss mask (and is a leaf, for
// leaf-predicting kinds). The first token of a tree is never a target and the
// final row of a segment never produces loss.
struct LossRows {
  std::vector<std::int32_t> targets;  // aligned with logits rows
  std::vector<std::uint8_t> rows;
  int count = 0;
};

LossRows loss_rows(std::span<const std::int32_t> tokens,
                   std::span<const std::uint8_t> loss_mask,
                   std::span<const std::uint8_t> leaf_flags, bool leaves_only);

template <typename S>
S compute_loss(const MatX<S>& logits, const LossRows& rows) {
  return masked_cross_entropy<S>(logits, rows.targets, rows.rows,
                                 /*want_grad=*/false)
      .loss;
}

struct LossStats {
  double sum_nll = 0.0;
  int count = 0;
};

// Backward pass. Parameter gradients are accumulated (+=) scaled so that a
// caller using grad_scale = 1/total_masked_rows gets the gradient of the mean
// NLL over those rows; input_grad (optional) receives d loss / d acts.input
// at the same scale.
template <typename S>
LossStats model_backward(ModelParams<S>& params, const ModelInput& in,
                         const Activations<S>& acts, const LossRows& rows,
                         S grad_scale, MatX<S>* input_grad = nullptr);

}  // namespace treelm

// ---------------------------------------------------------------------------
// implementation
// ---------------------------------------------------------------------------

namespace treelm {

inline const char* to_string(ModelKind k) {
  switch (k) {
    case ModelKind::SrcSeq: return "srcseq";
    case ModelKind::LeafSeq: return "leafseq";
    case ModelKind::RootPath: return "rootpath";
    case ModelKind::Trav: return "trav";
    case ModelKind::TravRel: return "travrel";
  }
  return "?";
}

inline ModelKind model_kind_from_string(const std::string& s) {
  if (s == "srcseq") return ModelKind::SrcSeq;
  if (s == "leafseq") return ModelKind::LeafSeq;
  if (s == "rootpath") return ModelKind::RootPath;
  if (s == "trav") return ModelKind::Trav;
  if (s == "travrel") return ModelKind::TravRel;
  fail(Error::Kind::Config, "unknown model kind `" + s + "`");
}

inline nlohmann::json ModelConfig::to_json() const {
  return nlohmann::json{{"kind", to_string(kind)},
                        {"n_block", n_block},
                        {"n_head", n_head},
                        {"d_model", d_model},
                        {"context", context},
                        {"vocab_size", vocab_size},
                        {"max_path_len", max_path_len},
                        {"up_max", up_max},
                        {"down_max", down_max},
                        {"dropout", dropout},
                        {"include_target_path", include_target_path}};
}

inline ModelConfig ModelConfig::from_json(const nlohmann::json& j) {
  ModelConfig c;
  c.kind = model_kind_from_string(j.at("kind").get<std::string>());
  c.n_block = j.value("n_block", c.n_block);
  c.n_head = j.value("n_head", c.n_head);
  c.d_model = j.value("d_model", c.d_model);
  c.context = j.value("context", c.context);
  c.vocab_size = j.value("vocab_size", c.vocab_size);
  c.max_path_len = j.value("max_path_len", c.max_path_len);
  c.up_max = j.value("up_max", c.up_max);
  c.down_max = j.value("down_max", c.down_max);
  c.dropout = j.value("dropout", c.dropout);
  c.include_target_path = j.value("include_target_path", c.include_target_path);
  return c;
}

template <typename S>
std::vector<Parameter<S>> ModelParams<S>::parameters() {
  std::vector<Parameter<S>> out;
  out.push_back({"wte", &wte});
  for (std::size_t b = 0; b < blocks.size(); ++b) {
    const std::string p = "blocks." + std::to_string(b) + ".";
    BlockParams<S>& blk = blocks[b];
    out.push_back({p + "w_q", &blk.w_q});
    out.push_back({p + "b_q", &blk.b_q});
    out.push_back({p + "w_k", &blk.w_k});
    out.push_back({p + "b_k", &blk.b_k});
    out.push_back({p + "w_v", &blk.w_v});
    out.push_back({p + "b_v", &blk.b_v});
    out.push_back({p + "w_o", &blk.w_o});
    out.push_back({p + "b_o", &blk.b_o});
    out.push_back({p + "ln1_g", &blk.ln1_g});
    out.push_back({p + "ln1_b", &blk.ln1_b});
    out.push_back({p + "ff1_w", &blk.ff1_w});
    out.push_back({p + "ff1_b", &blk.ff1_b});
    out.push_back({p + "ff2_w", &blk.ff2_w});
    out.push_back({p + "ff2_b", &blk.ff2_b});
    out.push_back({p + "ln2_g", &blk.ln2_g});
    out.push_back({p + "ln2_b", &blk.ln2_b});
  }
  out.push_back({"cls.w", &cls_w});
  out.push_back({"cls.b", &cls_b});
  if (kind_uses_paths(cfg.kind)) {
    out.push_back({"lstm.w_ih", &lstm.w_ih});
    out.push_back({"lstm.w_hh", &lstm.w_hh});
    out.push_back({"lstm.b_ih", &lstm.b_ih});
    out.push_back({"lstm.b_hh", &lstm.b_hh});
  }
  if (kind_uses_relations(cfg.kind)) out.push_back({"rel.logits", &rel_logits});
  return out;
}

template <typename S>
void ModelParams<S>::ensure_grads() {
  for (auto& p : parameters()) p.tensor->ensure_grad();
}

template <typename S>
void ModelParams<S>::zero_grads() {
  for (auto& p : parameters()) p.tensor->zero_grad();
}

template <typename S>
std::int64_t ModelParams<S>::parameter_count() const {
  std::int64_t n = 0;
  for (auto& p : const_cast<ModelParams<S>*>(this)->parameters())
    n += p.tensor->size();
  return n;
}

template <typename S>
std::optional<std::string> ModelParams<S>::first_nonfinite_grad() {
  for (auto& p : parameters())
    if (p.tensor->has_grad() && !p.tensor->grad_finite()) return p.name;
  return std::nullopt;
}

template <typename S>
template <typename T>
ModelParams<T> ModelParams<S>::cast() const {
  ModelParams<T> out;
  out.cfg = cfg;
  out.wte = wte.template cast<T>();
  out.blocks.reserve(blocks.size());
  for (const BlockParams<S>& b : blocks) {
    BlockParams<T> nb;
    nb.w_q = b.w_q.template cast<T>();
    nb.b_q = b.b_q.template cast<T>();
    nb.w_k = b.w_k.template cast<T>();
    nb.b_k = b.b_k.template cast<T>();
    nb.w_v = b.w_v.template cast<T>();
    nb.b_v = b.b_v.template cast<T>();
    nb.w_o = b.w_o.template cast<T>();
    nb.b_o = b.b_o.template cast<T>();
    nb.ln1_g = b.ln1_g.template cast<T>();
    nb.ln1_b = b.ln1_b.template cast<T>();
    nb.ff1_w = b.ff1_w.template cast<T>();
    nb.ff1_b = b.ff1_b.template cast<T>();
    nb.ff2_w = b.ff2_w.template cast<T>();
    nb.ff2_b = b.ff2_b.template cast<T>();
    nb.ln2_g = b.ln2_g.template cast<T>();
    nb.ln2_b = b.ln2_b.template cast<T>();
    out.blocks.push_back(std::move(nb));
  }
  out.cls_w = cls_w.template cast<T>();
  out.cls_b = cls_b.template cast<T>();
  if (kind_uses_paths(cfg.kind)) {
    out.lstm.w_ih = lstm.w_ih.template cast<T>();
    out.lstm.w_hh = lstm.w_hh.template cast<T>();
    out.lstm.b_ih = lstm.b_ih.template cast<T>();
    out.lstm.b_hh = lstm.b_hh.template cast<T>();
  }
  if (kind_uses_relations(cfg.kind))
    out.rel_logits = rel_logits.template cast<T>();
  return out;
}

template <typename S>
ModelParams<S> init_model_params(const ModelConfig& cfg, std::uint64_t seed) {
  if (cfg.vocab_size < 2)
    fail(Error::Kind::Config, "vocab_size must be set before init");
  cfg.d_head();  // divisibility check
  constexpr double kStd = 0.02;
  std::mt19937 rng(static_cast<std::mt19937::result_type>(mix_seed(seed)));

  ModelParams<S> p;
  p.cfg = cfg;
  const int d = cfg.d_model;
  const int v = cfg.vocab_size;
  p.wte = Tensor<S>({v, d});
  fill_normal(p.wte, rng, kStd);
  p.blocks.resize(static_cast<std::size_t>(cfg.n_block));
  for (BlockParams<S>& b : p.blocks) {
    b.w_q = Tensor<S>({d, d});
    b.w_k = Tensor<S>({d, d});
    b.w_v = Tensor<S>({d, d});
    b.w_o = Tensor<S>({d, d});
    b.ff1_w = Tensor<S>({d, 4 * d});
    b.ff2_w = Tensor<S>({4 * d, d});
    fill_normal(b.w_q, rng, kStd);
    fill_normal(b.w_k, rng, kStd);
    fill_normal(b.w_v, rng, kStd);
    fill_normal(b.w_o, rng, kStd);
    fill_normal(b.ff1_w, rng, kStd);
    fill_normal(b.ff2_w, rng, kStd);
    b.b_q = Tensor<S>({d});
    b.b_k = Tensor<S>({d});
    b.b_v = Tensor<S>({d});
    b.b_o = Tensor<S>({d});
    b.ff1_b = Tensor<S>({4 * d});
    b.ff2_b = Tensor<S>({d});
    b.ln1_g = Tensor<S>({d});
    b.ln1_b = Tensor<S>({d});
    b.ln2_g = Tensor<S>({d});
    b.ln2_b = Tensor<S>({d});
    b.ln1_g.vec().setOnes();
    b.ln2_g.vec().setOnes();
  }
  p.cls_w = Tensor<S>({d, v});
  fill_normal(p.cls_w, rng, kStd);
  p.cls_b = Tensor<S>({v});
  // Kind-specific tensors are drawn last so that models differing only in
  // kind share identical common weights for one seed.
  if (kind_uses_paths(cfg.kind)) {
    p.lstm.w_ih = Tensor<S>({d, 4 * d});
    p.lstm.w_hh = Tensor<S>({d, 4 * d});
    fill_normal(p.lstm.w_ih, rng, kStd);
    fill_normal(p.lstm.w_hh, rng, kStd);
    p.lstm.b_ih = Tensor<S>({4 * d});
    p.lstm.b_hh = Tensor<S>({4 * d});
  }
  if (kind_uses_relations(cfg.kind)) {
    // Zero logits = factor 1.0 everywhere = baseline attention at init.
    p.rel_logits = Tensor<S>({cfg.relation_classes(), cfg.n_head});
  }
  return p;
}

inline LossRows loss_rows(std::span<const std::int32_t> tokens,
                          std::span<const std::uint8_t> loss_mask,
                          std::span<const std::uint8_t> leaf_flags,
                          bool leaves_only) {
  const std::size_t n = tokens.size();
  if (loss_mask.size() != n || leaf_flags.size() != n)
    fail(Error::Kind::Shape, "loss_rows: flag length mismatch");
  LossRows out;
  out.targets.assign(n, 0);
  out.rows.assign(n, 0);
  for (std::size_t r = 0; r + 1 < n; ++r) {
    const std::size_t t = r + 1;
    if (!loss_mask[t]) continue;
    if (leaves_only && !leaf_flags[t]) continue;
    out.rows[r] = 1;
    out.targets[r] = tokens[t];
    ++out.count;
  }
  return out;
}

namespace detail {

template <typename S>
void validate_input(const ModelParams<S>& p, const ModelInput& in) {
  const ModelConfig& cfg = p.cfg;
  const int n = static_cast<int>(in.tokens.size());
  if (n == 0) fail(Error::Kind::Shape, "empty segment");
  if (n > cfg.context)
    fail(Error::Kind::Shape, "segment length " + std::to_string(n) +
                                 " exceeds model context " +
                                 std::to_string(cfg.context));
  for (std::int32_t t : in.tokens)
    if (t < 0 || t >= cfg.vocab_size)
      fail(Error::Kind::Shape, "token id " + std::to_string(t) +
                                   " outside vocab of size " +
                                   std::to_string(cfg.vocab_size));
  if (kind_uses_paths(cfg.kind)) {
    if (static_cast<int>(in.paths.size()) != n)
      fail(Error::Kind::Shape, "rootpath model requires one path per position");
    for (const auto& path : in.paths) {
      if (path.empty()) fail(Error::Kind::Shape, "empty root path");
      if (static_cast<int>(path.size()) > cfg.max_path_len)
        fail(Error::Kind::Shape, "root path longer than max_path_len");
    }
  } else if (!in.paths.empty()) {
    fail(Error::Kind::Shape, "paths supplied to a model kind that takes none");
  }
  if (kind_uses_relations(cfg.kind)) {
    const std::size_t want = static_cast<std::size_t>(n) * (n + 1) / 2;
    if (in.rel.size() != want)
      fail(Error::Kind::Shape, "relation array has " +
                                   std::to_string(in.rel.size()) +
                                   " entries, expected " + std::to_string(want));
  } else if (!in.rel.empty()) {
    fail(Error::Kind::Shape,
         "relation matrix supplied to a model kind that takes none");
  }
}

template <typename S>
MatX<S> embed_tokens(const Tensor<S>& wte, std::span<const std::int32_t> ids) {
  MatX<S> out(static_cast<Eigen::Index>(ids.size()), wte.dims()[1]);
  auto table = wte.mat();
  for (std::size_t i = 0; i < ids.size(); ++i)
    out.row(static_cast<Eigen::Index>(i)) = table.row(ids[i]);
  return out;
}

template <typename S>
S sigmoid(S x) {
  return S(1) / (S(1) + std::exp(-x));
}

// Runs the recurrent path encoder over all positions at once, one step per
// path depth; positions whose path is exhausted carry their state through.
template <typename S>
MatX<S> lstm_encode_paths(const ModelParams<S>& p,
                          const std::vector<std::vector<std::int32_t>>& paths,
                          LstmCache<S>& cache) {
  const int n = static_cast<int>(paths.size());
  const int d = p.cfg.d_model;
  int max_len = 0;
  for (const auto& path : paths)
    max_len = std::max(max_len, static_cast<int>(path.size()));

  MatX<S> h = MatX<S>::Zero(n, d);
  MatX<S> c = MatX<S>::Zero(n, d);
  auto table = p.wte.mat();
  const RowX<S> bias =
      (p.lstm.b_ih.vec() + p.lstm.b_hh.vec()).transpose();

  cache.steps.clear();
  cache.steps.reserve(static_cast<std::size_t>(max_len));
  for (int s = 0; s < max_len; ++s) {
    LstmStepCache<S> step;
    step.alive.assign(static_cast<std::size_t>(n), 0);
    step.x = MatX<S>::Zero(n, d);
    for (int i = 0; i < n; ++i) {
      if (s < static_cast<int>(paths[static_cast<std::size_t>(i)].size())) {
        step.alive[static_cast<std::size_t>(i)] = 1;
        step.x.row(i) =
            table.row(paths[static_cast<std::size_t>(i)][static_cast<std::size_t>(s)]);
      }
    }
    step.h_prev = h;
    step.c_prev = c;
    MatX<S> z = step.x * p.lstm.w_ih.mat() + h * p.lstm.w_hh.mat();
    z.rowwise() += bias;
    step.gi = z.middleCols(0, d).unaryExpr([](S v) { return sigmoid(v); });
    step.gf = z.middleCols(d, d).unaryExpr([](S v) { return sigmoid(v); });
    step.gg = z.middleCols(2 * d, d).unaryExpr([](S v) { return std::tanh(v); });
    step.go = z.middleCols(3 * d, d).unaryExpr([](S v) { return sigmoid(v); });
    MatX<S> c_new =
        step.gf.cwiseProduct(c) + step.gi.cwiseProduct(step.gg);
    step.tanh_c = c_new.unaryExpr([](S v) { return std::tanh(v); });
    MatX<S> h_new = step.go.cwiseProduct(step.tanh_c);
    for (int i = 0; i < n; ++i) {
      if (step.alive[static_cast<std::size_t>(i)]) {
        c.row(i) = c_new.row(i);
        h.row(i) = h_new.row(i);
      }
    }
    cache.steps.push_back(std::move(step));
  }
  cache.h_final = h;
  return h;
}

// Backward through the path encoder; dh is d loss / d final hidden state.
// Accumulates LSTM parameter grads and embedding grads for path tokens.
template <typename S>
void lstm_backward(ModelParams<S>& p,
                   const std::vector<std::vector<std::int32_t>>& paths,
                   const LstmCache<S>& cache, const MatX<S>& dh_final) {
  const int n = static_cast<int>(paths.size());
  const int d = p.cfg.d_model;
  MatX<S> dh = dh_final;
  MatX<S> dc = MatX<S>::Zero(n, d);
  auto dwte = p.wte.grad_mat();
  auto dw_ih = p.lstm.w_ih.grad_mat();
  auto dw_hh = p.lstm.w_hh.grad_mat();
  auto db_ih = p.lstm.b_ih.grad_vec();
  auto db_hh = p.lstm.b_hh.grad_vec();

  for (int s = static_cast<int>(cache.steps.size()) - 1; s >= 0; --s) {
    const LstmStepCache<S>& step = cache.steps[static_cast<std::size_t>(s)];
    MatX<S> dz = MatX<S>::Zero(n, 4 * d);
    for (int i = 0; i < n; ++i) {
      if (!step.alive[static_cast<std::size_t>(i)]) continue;
      // h = o * tanh(c); c = f * c_prev + i * g
      RowX<S> dho = dh.row(i);
      RowX<S> d_o = dho.cwiseProduct(step.tanh_c.row(i));
      RowX<S> dc_new =
          dc.row(i) + dho.cwiseProduct(step.go.row(i))
                          .cwiseProduct((S(1) - step.tanh_c.row(i).array().square())
                                            .matrix());
      RowX<S> d_f = dc_new.cwiseProduct(step.c_prev.row(i));
      RowX<S> d_i = dc_new.cwiseProduct(step.gg.row(i));
      RowX<S> d_g = dc_new.cwiseProduct(step.gi.row(i));
      dz.row(i).segment(0, d) =
          d_i.cwiseProduct(step.gi.row(i))
              .cwiseProduct((S(1) - step.gi.row(i).array()).matrix());
      dz.row(i).segment(d, d) =
          d_f.cwiseProduct(step.gf.row(i))
              .cwiseProduct((S(1) - step.gf.row(i).array()).matrix());
      dz.row(i).segment(2 * d, d) =
          d_g.cwiseProduct((S(1) - step.gg.row(i).array().square()).matrix());
      dz.row(i).segment(3 * d, d) =
          d_o.cwiseProduct(step.go.row(i))
              .cwiseProduct((S(1) - step.go.row(i).array()).matrix());
      // State grads for the step below.
      dc.row(i) = dc_new.cwiseProduct(step.gf.row(i));
    }
    dw_ih.noalias() += step.x.transpose() * dz;
    dw_hh.noalias() += step.h_prev.transpose() * dz;
    const VecX<S> dbias = dz.colwise().sum().transpose();
    db_ih += dbias;
    db_hh += dbias;
    MatX<S> dx = dz * p.lstm.w_ih.mat().transpose();
    MatX<S> dh_prev = dz * p.lstm.w_hh.mat().transpose();
    for (int i = 0; i < n; ++i) {
      if (step.alive[static_cast<std::size_t>(i)]) {
        dwte.row(paths[static_cast<std::size_t>(i)][static_cast<std::size_t>(s)]) +=
            dx.row(i);
        dh.row(i) = dh_prev.row(i);
      }
      // Dead rows: dh, dc pass through unchanged.
    }
  }
}

template <typename S>
void gather_relation_factors(const ModelParams<S>& p, const ModelInput& in,
                             int n, std::vector<MatX<S>>& factors) {
  const int heads = p.cfg.n_head;
  factors.assign(static_cast<std::size_t>(heads), MatX<S>::Ones(n, n));
  auto table = p.rel_logits.mat();
  std::size_t k = 0;
  for (int i = 0; i < n; ++i) {
    for (int j = 0; j <= i; ++j, ++k) {
      const std::int32_t cls = in.rel[k];
      if (cls < 0 || cls >= p.cfg.relation_classes())
        fail(Error::Kind::Shape,
             "relation class id " + std::to_string(cls) + " out of range");
      for (int h = 0; h < heads; ++h)
        factors[static_cast<std::size_t>(h)](i, j) = std::exp(table(cls, h));
    }
  }
}

}  // namespace detail

template <typename S>
const MatX<S>& model_forward(const ModelParams<S>& params, const ModelInput& in,
                             Activations<S>& acts, bool training,
                             std::mt19937* rng) {
  detail::validate_input(params, in);
  const ModelConfig& cfg = params.cfg;
  const int n = static_cast<int>(in.tokens.size());
  const int d = cfg.d_model;
  const int dk = cfg.d_head();
  const bool drop = training && cfg.dropout > 0.0f;
  if (drop && rng == nullptr)
    fail(Error::Kind::Config, "training forward with dropout requires an rng");

  acts.input = detail::embed_tokens(params.wte, in.tokens);
  if (kind_uses_paths(cfg.kind)) {
    std::vector<std::vector<std::int32_t>> used_paths;
    const std::vector<std::vector<std::int32_t>>* paths = &in.paths;
    if (cfg.include_target_path) {
      used_paths.reserve(in.paths.size());
      for (std::size_t t = 0; t + 1 < in.paths.size(); ++t)
        used_paths.push_back(in.paths[t + 1]);
      used_paths.push_back(in.paths.back());
      paths = &used_paths;
    }
    acts.input += detail::lstm_encode_paths(params, *paths, acts.lstm);
  }
  if (kind_uses_relations(cfg.kind))
    detail::gather_relation_factors(params, in, n, acts.rel_factors);

  const MaskMat causal = causal_mask(n);
  const S inv_sqrt_dk = S(1) / std::sqrt(static_cast<S>(dk));

  acts.blocks.assign(static_cast<std::size_t>(cfg.n_block), BlockCache<S>{});
  const MatX<S>* h = &acts.input;
  for (int b = 0; b < cfg.n_block; ++b) {
    BlockCache<S>& cache = acts.blocks[static_cast<std::size_t>(b)];
    const BlockParams<S>& blk = params.blocks[static_cast<std::size_t>(b)];
    cache.h_in = *h;
    cache.q = linear<S>(cache.h_in, blk.w_q.mat(), blk.b_q.vec());
    cache.k = linear<S>(cache.h_in, blk.w_k.mat(), blk.b_k.vec());
    cache.v = linear<S>(cache.h_in, blk.w_v.mat(), blk.b_v.vec());
    cache.weights.resize(static_cast<std::size_t>(cfg.n_head));
    if (drop) cache.drop_w.resize(static_cast<std::size_t>(cfg.n_head));
    if (kind_uses_relations(cfg.kind))
      cache.scores_raw.resize(static_cast<std::size_t>(cfg.n_head));
    cache.attn_concat.resize(n, d);
    for (int hh = 0; hh < cfg.n_head; ++hh) {
      auto qh = cache.q.middleCols(hh * dk, dk);
      auto kh = cache.k.middleCols(hh * dk, dk);
      auto vh = cache.v.middleCols(hh * dk, dk);
      MatX<S> scores = qh * kh.transpose();
      if (kind_uses_relations(cfg.kind)) {
        cache.scores_raw[static_cast<std::size_t>(hh)] = scores;
        scores =
            scores.cwiseProduct(acts.rel_factors[static_cast<std::size_t>(hh)]);
      }
      scores *= inv_sqrt_dk;
      MatX<S>& w = cache.weights[static_cast<std::size_t>(hh)];
      w = softmax_rows<S>(scores, causal);
      if (drop) {
        MatX<S>& mask = cache.drop_w[static_cast<std::size_t>(hh)];
        mask = dropout_mask<S>(n, n, static_cast<S>(cfg.dropout), *rng);
        cache.attn_concat.middleCols(hh * dk, dk).noalias() =
            w.cwiseProduct(mask) * vh;
      } else {
        cache.attn_concat.middleCols(hh * dk, dk).noalias() = w * vh;
      }
    }
    cache.attn_proj = linear<S>(cache.attn_concat, blk.w_o.mat(), blk.b_o.vec());
    // Post-norm composition: LN(attn + H), then LN(FF(A) + A).
    cache.a = layer_norm<S>(MatX<S>(cache.attn_proj + cache.h_in),
                            VecX<S>(blk.ln1_g.vec()), VecX<S>(blk.ln1_b.vec()),
                            &cache.ln1);
    cache.ff1 = linear<S>(cache.a, blk.ff1_w.mat(), blk.ff1_b.vec());
    cache.gelu_out = gelu<S>(cache.ff1);
    if (drop) {
      cache.ff_drop =
          dropout_mask<S>(n, 4 * d, static_cast<S>(cfg.dropout), *rng);
      cache.ff2 = linear<S>(MatX<S>(cache.gelu_out.cwiseProduct(cache.ff_drop)),
                            blk.ff2_w.mat(), blk.ff2_b.vec());
    } else {
      cache.ff2 = linear<S>(cache.gelu_out, blk.ff2_w.mat(), blk.ff2_b.vec());
    }
    cache.out = layer_norm<S>(MatX<S>(cache.ff2 + cache.a),
                              VecX<S>(blk.ln2_g.vec()), VecX<S>(blk.ln2_b.vec()),
                              &cache.ln2);
    h = &cache.out;
  }
  acts.logits = linear<S>(*h, params.cls_w.mat(), params.cls_b.vec());
  return acts.logits;
}

template <typename S>
LossStats model_backward(ModelParams<S>& params, const ModelInput& in,
                         const Activations<S>& acts, const LossRows& rows,
                         S grad_scale, MatX<S>* input_grad) {
  const ModelConfig& cfg = params.cfg;
  const int n = static_cast<int>(in.tokens.size());
  const int d = cfg.d_model;
  const int dk = cfg.d_head();
  params.ensure_grads();

  CrossEntropyOut<S> ce =
      masked_cross_entropy<S>(acts.logits, rows.targets, rows.rows);
  LossStats stats{static_cast<double>(ce.sum_nll), ce.count};
  // dlogits is for the per-segment mean; rescale to the caller's convention.
  MatX<S> dlogits = ce.dlogits * (static_cast<S>(ce.count) * grad_scale);

  const MatX<S>& trunk =
      cfg.n_block > 0 ? acts.blocks.back().out : acts.input;
  MatX<S> dh = linear_backward<S>(dlogits, trunk, params.cls_w.mat(),
                                  params.cls_w.grad_mat(),
                                  params.cls_b.grad_vec());

  std::vector<MatX<S>> drel;
  if (kind_uses_relations(cfg.kind))
    drel.assign(static_cast<std::size_t>(cfg.n_head), MatX<S>::Zero(n, n));

  for (int b = cfg.n_block - 1; b >= 0; --b) {
    const BlockCache<S>& cache = acts.blocks[static_cast<std::size_t>(b)];
    BlockParams<S>& blk = params.blocks[static_cast<std::size_t>(b)];
    const bool dropped = !cache.drop_w.empty();

    // LN2
    VecX<S> dg2 = VecX<S>::Zero(d), db2 = VecX<S>::Zero(d);
    MatX<S> dres2 = layer_norm_backward<S>(dh, cache.ln2,
                                           VecX<S>(blk.ln2_g.vec()), dg2, db2);
    blk.ln2_g.grad_vec() += dg2;
    blk.ln2_b.grad_vec() += db2;
    MatX<S> da = dres2;  // residual branch into A

    // FF
    MatX<S> gd = dropped ? MatX<S>(cache.gelu_out.cwiseProduct(cache.ff_drop))
                         : cache.gelu_out;
    MatX<S> dgd = linear_backward<S>(dres2, gd, blk.ff2_w.mat(),
                                     blk.ff2_w.grad_mat(), blk.ff2_b.grad_vec());
    MatX<S> dgelu = dropped ? MatX<S>(dgd.cwiseProduct(cache.ff_drop)) : dgd;
    MatX<S> dff1 = gelu_backward<S>(cache.ff1, dgelu);
    da += linear_backward<S>(dff1, cache.a, blk.ff1_w.mat(),
                             blk.ff1_w.grad_mat(), blk.ff1_b.grad_vec());

    // LN1
    VecX<S> dg1 = VecX<S>::Zero(d), db1 = VecX<S>::Zero(d);
    MatX<S> dres1 = layer_norm_backward<S>(da, cache.ln1,
                                           VecX<S>(blk.ln1_g.vec()), dg1, db1);
    blk.ln1_g.grad_vec() += dg1;
    blk.ln1_b.grad_vec() += db1;
    MatX<S> dh_in = dres1;  // residual branch into the block input

    // Attention output projection
    MatX<S> dconcat =
        linear_backward<S>(dres1, cache.attn_concat, blk.w_o.mat(),
                           blk.w_o.grad_mat(), blk.b_o.grad_vec());

    MatX<S> dq = MatX<S>::Zero(n, d), dkk = MatX<S>::Zero(n, d),
            dv = MatX<S>::Zero(n, d);
    const S inv_sqrt_dk = S(1) / std::sqrt(static_cast<S>(dk));
    for (int hh = 0; hh < cfg.n_head; ++hh) {
      auto qh = cache.q.middleCols(hh * dk, dk);
      auto kh = cache.k.middleCols(hh * dk, dk);
      auto vh = cache.v.middleCols(hh * dk, dk);
      const MatX<S>& w = cache.weights[static_cast<std::size_t>(hh)];
      MatX<S> dout_h = dconcat.middleCols(hh * dk, dk);
      MatX<S> wd = dropped
                       ? MatX<S>(w.cwiseProduct(cache.drop_w[static_cast<std::size_t>(hh)]))
                       : w;
      dv.middleCols(hh * dk, dk).noalias() = wd.transpose() * dout_h;
      MatX<S> dwd = dout_h * vh.transpose();
      if (dropped) dwd = dwd.cwiseProduct(cache.drop_w[static_cast<std::size_t>(hh)]);
      MatX<S> dscores = softmax_rows_backward<S>(w, dwd) * inv_sqrt_dk;
      if (kind_uses_relations(cfg.kind)) {
        const MatX<S>& rel = acts.rel_factors[static_cast<std::size_t>(hh)];
        drel[static_cast<std::size_t>(hh)] +=
            dscores.cwiseProduct(cache.scores_raw[static_cast<std::size_t>(hh)]);
        dscores = dscores.cwiseProduct(rel);
      }
      dq.middleCols(hh * dk, dk).noalias() = dscores * kh;
      dkk.middleCols(hh * dk, dk).noalias() = dscores.transpose() * qh;
    }
    dh_in += linear_backward<S>(dq, cache.h_in, blk.w_q.mat(),
                                blk.w_q.grad_mat(), blk.b_q.grad_vec());
    dh_in += linear_backward<S>(dkk, cache.h_in, blk.w_k.mat(),
                                blk.w_k.grad_mat(), blk.b_k.grad_vec());
    dh_in += linear_backward<S>(dv, cache.h_in, blk.w_v.mat(),
                                blk.w_v.grad_mat(), blk.b_v.grad_vec());
    dh = std::move(dh_in);
  }

  if (kind_uses_relations(cfg.kind)) {
    // R = exp(logit): d logit = dR * R, pooled per class id.
    auto table = params.rel_logits.mat();
    auto dtable = params.rel_logits.grad_mat();
    std::size_t k = 0;
    for (int i = 0; i < n; ++i)
      for (int j = 0; j <= i; ++j, ++k) {
        const std::int32_t cls = in.rel[k];
        for (int hh = 0; hh < cfg.n_head; ++hh)
          dtable(cls, hh) += drel[static_cast<std::size_t>(hh)](i, j) *
                             std::exp(table(cls, hh));
      }
  }

  if (kind_uses_paths(cfg.kind)) {
    // input = wte rows + path encoding: both branches receive dh.
    if (params.cfg.include_target_path) {
      std::vector<std::vector<std::int32_t>> used_paths;
      used_paths.reserve(in.paths.size());
      for (std::size_t t = 0; t + 1 < in.paths.size(); ++t)
        used_paths.push_back(in.paths[t + 1]);
      used_paths.push_back(in.paths.back());
      detail::lstm_backward(params, used_paths, acts.lstm, dh);
    } else {
      detail::lstm_backward(params, in.paths, acts.lstm, dh);
    }
  }
  auto dwte = params.wte.grad_mat();
  for (int i = 0; i < n; ++i)
    dwte.row(in.tokens[static_cast<std::size_t>(i)]) += dh.row(i);

  if (input_grad) *input_grad = std::move(dh);
  return stats;
}

}  // namespace treelm
