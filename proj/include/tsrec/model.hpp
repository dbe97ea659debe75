#pragma once

#include <Eigen/Dense>
#include <functional>
#include <optional>
#include <thread>

#include "json.hpp"
#include "tsrec/common.hpp"
#include "tsrec/corpus.hpp"
#include "tsrec/sidspace.hpp"

namespace tsrec {

// -----------------------------------------------------------------------------
// Word-level tokenizer over the expanded vocabulary
// -----------------------------------------------------------------------------

inline std::vector<std::uint32_t> word_tokenize(std::string_view text, const Vocabulary& vocab) {
  std::vector<std::uint32_t> ids;
  for (const auto& p : text_pieces(text)) ids.push_back(vocab.id_or_unk(p));
  return ids;
}

inline bool attaches_left(const std::string& t) {
  return t.size() == 1 && std::string_view(".,!?;:)]}%'").find(t[0]) != std::string_view::npos;
}
inline bool attaches_right(const std::string& t) { return t == "(" || t == "[" || t == "{" || t == "$"; }

// Space-joined pieces; punctuation hugs its neighbour and consecutive SID
// tokens are written without separators. Specials are not emitted.
inline std::string detokenize(const std::vector<std::uint32_t>& ids, const Vocabulary& vocab) {
  std::string out;
  bool prev_sid = false, glue_next = false;
  for (auto id : ids) {
    if (id == vocab.unk() || id == vocab.eos() || id == vocab.sep()) continue;
    const auto& t = vocab.token(id);
    const bool sid = vocab.is_sid(id);
    if (!out.empty() && !glue_next && !(sid && prev_sid) && !attaches_left(t)) out += ' ';
    out += t;
    prev_sid = sid;
    glue_next = attaches_right(t);
  }
  return out;
}

// Sorted set of non-SID pieces appearing in the given texts.
inline std::vector<std::string> collect_pre_tokens(const std::vector<const std::vector<InstructionExample>*>& sets,
                                                   const std::vector<std::string>& extra_texts = {}) {
  std::set<std::string> words;
  auto add = [&](std::string_view text) {
    for (auto& p : text_pieces(text))
      if (!parse_sid_token(p)) words.insert(std::move(p));
  };
  for (const auto* s : sets)
    for (const auto& ex : *s) {
      add(ex.instruction);
      add(ex.response);
    }
  for (const auto& t : extra_texts) add(t);
  for (auto s : {kUnk, kEos, kSep}) words.erase(std::string(s));
  return {words.begin(), words.end()};
}

// X <sep> Y <eos>; the mask marks Y and <eos>.
struct EncodedExample {
  std::vector<std::uint32_t> tokens;
  std::vector<std::uint8_t> mask;
  std::size_t masked() const { return static_cast<std::size_t>(std::count(mask.begin(), mask.end(), 1)); }
};

inline std::vector<std::uint32_t> encode_prompt(std::string_view instruction, const Vocabulary& vocab,
                                                std::size_t max_prompt) {
  auto x = word_tokenize(instruction, vocab);
  if (x.size() + 1 > max_prompt) x.erase(x.begin(), x.end() - static_cast<std::ptrdiff_t>(max_prompt - 1));
  x.push_back(vocab.sep());
  return x;
}

// Keeps the total input length (all tokens but the last) within max_seq by
// dropping the oldest instruction tokens, then response tail tokens.
inline EncodedExample encode_example(const InstructionExample& ex, const Vocabulary& vocab, std::size_t max_seq) {
  auto x = word_tokenize(ex.instruction, vocab);
  auto y = word_tokenize(ex.response, vocab);
  y.push_back(vocab.eos());
  const std::size_t budget = max_seq + 1;
  if (y.size() + 2 > budget) y.erase(y.begin() + static_cast<std::ptrdiff_t>(budget - 3), y.end() - 1);
  if (x.size() + 1 + y.size() > budget) x.erase(x.begin(), x.end() - static_cast<std::ptrdiff_t>(budget - 1 - y.size()));
  EncodedExample e;
  e.tokens = x;
  e.tokens.push_back(vocab.sep());
  e.mask.assign(e.tokens.size(), 0);
  e.tokens.insert(e.tokens.end(), y.begin(), y.end());
  e.mask.resize(e.tokens.size(), 1);
  return e;
}

// Plain language-model example: every token after the first is a target.
inline EncodedExample encode_text(std::string_view text, const Vocabulary& vocab, std::size_t max_seq) {
  EncodedExample e;
  e.tokens = word_tokenize(text, vocab);
  if (e.tokens.size() > max_seq) e.tokens.resize(max_seq);
  e.tokens.push_back(vocab.eos());
  e.mask.assign(e.tokens.size(), 1);
  e.mask[0] = 0;
  return e;
}

// -----------------------------------------------------------------------------
// Configuration and parameter layout
// -----------------------------------------------------------------------------

struct ModelConfig {
  std::size_t dim = 128;
  std::size_t layers = 4;
  std::size_t heads = 4;
  double ffn_mult = 4.0;
  std::size_t max_seq = 256;
  std::size_t vocab_size = 0;
  bool tie_embeddings = true;
  double dropout = 0.0;
  double init_std = 0.02;
  std::uint64_t seed = 0;

  std::size_t ffn_dim() const { return static_cast<std::size_t>(std::llround(ffn_mult * static_cast<double>(dim))); }

  void validate() const {
    if (dim == 0 || layers == 0 || heads == 0) throw ConfigError("model: dim, layers and heads must be positive");
    if (dim % heads) throw ConfigError("model: dim must be divisible by heads");
    if (vocab_size < 4) throw ConfigError("model: vocab_size too small");
    if (max_seq < 2) throw ConfigError("model: max_seq must be >= 2");
    if (!(ffn_mult > 0)) throw ConfigError("model: ffn_mult must be positive");
    if (dropout < 0 || dropout >= 1) throw ConfigError("model: dropout must be in [0, 1)");
  }

  nlohmann::ordered_json to_json() const {
    return {{"dim", dim},         {"layers", layers},   {"heads", heads},
            {"ffn_mult", ffn_mult}, {"max_seq", max_seq}, {"vocab_size", vocab_size},
            {"tie_embeddings", tie_embeddings}, {"dropout", dropout}, {"init_std", init_std},
            {"seed", seed}};
  }
  static ModelConfig from_json(const nlohmann::json& j) {
    ModelConfig c;
    c.dim = j.at("dim");
    c.layers = j.at("layers");
    c.heads = j.at("heads");
    c.ffn_mult = j.at("ffn_mult");
    c.max_seq = j.at("max_seq");
    c.vocab_size = j.at("vocab_size");
    c.tie_embeddings = j.at("tie_embeddings");
    c.dropout = j.at("dropout");
    c.init_std = j.at("init_std");
    c.seed = j.at("seed");
    return c;
  }
};

struct ParamInfo {
  std::string name;
  std::size_t rows, cols;  // cols == 0 marks a vector
  std::size_t offset;
  std::size_t size() const { return rows * std::max<std::size_t>(cols, 1); }
};

struct ParamLayout {
  std::vector<ParamInfo> params;
  std::size_t total = 0;

  std::size_t add(std::string name, std::size_t rows, std::size_t cols = 0) {
    params.push_back({std::move(name), rows, cols, total});
    total += params.back().size();
    return params.size() - 1;
  }
  const ParamInfo& find(std::string_view name) const {
    for (const auto& p : params)
      if (p.name == name) return p;
    throw ContractViolation("unknown parameter " + std::string(name));
  }
};

// -----------------------------------------------------------------------------
// Decoder-only transformer (pre-LN, GELU MLP) with hand-written backprop
// -----------------------------------------------------------------------------

template <class T>
class MiniRecModel {
 public:
  using Mat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
  using RowVec = Eigen::Matrix<T, 1, Eigen::Dynamic>;
  using MMap = Eigen::Map<Mat>;
  using CMMap = Eigen::Map<const Mat>;
  using VMap = Eigen::Map<RowVec>;
  using CVMap = Eigen::Map<const RowVec>;

  struct LayerIdx {
    std::size_t ln1_g, ln1_b, w_qkv, b_qkv, w_o, b_o, ln2_g, ln2_b, w_fc, b_fc, w_proj, b_proj;
  };

  explicit MiniRecModel(ModelConfig cfg) : cfg_(std::move(cfg)) {
    cfg_.validate();
    const auto D = cfg_.dim, F = cfg_.ffn_dim(), V = cfg_.vocab_size;
    wte_ = layout_.add("wte", V, D);
    wpe_ = layout_.add("wpe", cfg_.max_seq, D);
    for (std::size_t l = 0; l < cfg_.layers; ++l) {
      const auto p = "h" + std::to_string(l) + ".";
      LayerIdx li;
      li.ln1_g = layout_.add(p + "ln1_g", D);
      li.ln1_b = layout_.add(p + "ln1_b", D);
      li.w_qkv = layout_.add(p + "w_qkv", D, 3 * D);
      li.b_qkv = layout_.add(p + "b_qkv", 3 * D);
      li.w_o = layout_.add(p + "w_o", D, D);
      li.b_o = layout_.add(p + "b_o", D);
      li.ln2_g = layout_.add(p + "ln2_g", D);
      li.ln2_b = layout_.add(p + "ln2_b", D);
      li.w_fc = layout_.add(p + "w_fc", D, F);
      li.b_fc = layout_.add(p + "b_fc", F);
      li.w_proj = layout_.add(p + "w_proj", F, D);
      li.b_proj = layout_.add(p + "b_proj", D);
      layer_.push_back(li);
    }
    lnf_g_ = layout_.add("lnf_g", D);
    lnf_b_ = layout_.add("lnf_b", D);
    w_out_ = cfg_.tie_embeddings ? wte_ : layout_.add("w_out", V, D);
    theta_.assign(layout_.total, T(0));
  }

  const ModelConfig& config() const { return cfg_; }
  const ParamLayout& layout() const { return layout_; }
  std::vector<T>& params() { return theta_; }
  const std::vector<T>& params() const { return theta_; }
  std::size_t num_params() const { return theta_.size(); }

  // Normal(0, init_std) weights (output projections scaled by 1/sqrt(2L)),
  // unit LayerNorm gains, zero biases. Each tensor has its own seed stream so
  // replacing one tensor never shifts the draws of another.
  void init_parameters() {
    std::fill(theta_.begin(), theta_.end(), T(0));
    const double proj_std = cfg_.init_std / std::sqrt(2.0 * static_cast<double>(cfg_.layers));
    for (const auto& p : layout_.params) {
      const auto& n = p.name;
      const auto tail = n.substr(n.find('.') == std::string::npos ? 0 : n.find('.') + 1);
      T* dst = theta_.data() + p.offset;
      if (tail.ends_with("_g")) {
        std::fill(dst, dst + p.size(), T(1));
      } else if (p.cols != 0) {
        const double sd = (tail == "w_o" || tail == "w_proj") ? proj_std : cfg_.init_std;
        Rng rng(derive_seed(cfg_.seed, "param:" + n));
        for (std::size_t i = 0; i < p.size(); ++i) dst[i] = static_cast<T>(sd * rng.normal());
      }
    }
  }

  MMap param(std::size_t idx) { return mat(theta_.data(), idx); }
  CMMap param(std::size_t idx) const { return cmat(theta_.data(), idx); }
  std::size_t index_of(std::string_view name) const {
    for (std::size_t i = 0; i < layout_.params.size(); ++i)
      if (layout_.params[i].name == name) return i;
    throw ContractViolation("unknown parameter " + std::string(name));
  }
  std::size_t wte_index() const { return wte_; }
  std::size_t w_out_index() const { return w_out_; }

  void set_token_embedding(std::uint32_t token, const Eigen::VectorXd& row) {
    require(static_cast<std::size_t>(row.size()) == cfg_.dim, "set_token_embedding: dim mismatch");
    auto E = param(wte_);
    for (std::size_t j = 0; j < cfg_.dim; ++j) E(token, static_cast<Eigen::Index>(j)) = static_cast<T>(row(static_cast<Eigen::Index>(j)));
  }

  template <class U>
  MiniRecModel<U> cast() const {
    MiniRecModel<U> m(cfg_);
    for (std::size_t i = 0; i < theta_.size(); ++i) m.params()[i] = static_cast<U>(theta_[i]);
    return m;
  }

  // ---------------------------------------------------------------------------
  // Training forward/backward over one sequence
  // ---------------------------------------------------------------------------

  struct LayerCache {
    Mat x_in, ln1_xhat, ln1_out, qkv, att_out, h, ln2_xhat, ln2_out, fc_pre, fc_act;
    RowVec ln1_rstd, ln2_rstd;
    std::vector<Mat> att;
    Mat drop1, drop2;
  };

  struct SeqCache {
    std::vector<LayerCache> layers;
    Mat lnf_xhat, lnf_out;
    RowVec lnf_rstd;
  };

  struct LossResult {
    double nll_sum = 0.0;
    std::size_t count = 0;
  };

  // Sum of NLL over masked targets of one example. When grad is non-null,
  // accumulates grad_scale * d(nll_sum)/d(theta) into it. dropout_rng enables
  // dropout (training mode) when non-null and cfg.dropout > 0.
  LossResult sequence_loss(const EncodedExample& ex, std::vector<T>* grad = nullptr, T grad_scale = T(1),
                           Rng* dropout_rng = nullptr) const {
    const std::size_t n = ex.tokens.size();
    require(n >= 2 && ex.mask.size() == n, "sequence_loss: malformed example");
    const std::size_t Tn = n - 1;
    require(Tn <= cfg_.max_seq, "sequence_loss: sequence longer than max_seq");
    std::vector<std::size_t> pos;
    for (std::size_t i = 0; i < Tn; ++i)
      if (ex.mask[i + 1]) pos.push_back(i);
    LossResult res;
    if (pos.empty()) return res;

    const auto D = static_cast<Eigen::Index>(cfg_.dim);
    const auto V = static_cast<Eigen::Index>(cfg_.vocab_size);
    const bool drop = dropout_rng && cfg_.dropout > 0.0;
    SeqCache c;
    Mat x(static_cast<Eigen::Index>(Tn), D);
    {
      auto E = param(wte_);
      auto P = param(wpe_);
      for (std::size_t i = 0; i < Tn; ++i) {
        require(ex.tokens[i] < cfg_.vocab_size, "sequence_loss: token id out of range");
        x.row(static_cast<Eigen::Index>(i)) = E.row(ex.tokens[i]) + P.row(static_cast<Eigen::Index>(i));
      }
    }
    c.layers.resize(cfg_.layers);
    for (std::size_t l = 0; l < cfg_.layers; ++l) x = block_forward(layer_[l], x, c.layers[l], drop ? dropout_rng : nullptr);
    ln_forward(x, vec(lnf_g_), vec(lnf_b_), c.lnf_xhat, c.lnf_rstd, c.lnf_out);

    const auto P = static_cast<Eigen::Index>(pos.size());
    Mat H(P, D);
    for (Eigen::Index r = 0; r < P; ++r) H.row(r) = c.lnf_out.row(static_cast<Eigen::Index>(pos[r]));
    auto W = param(w_out_);
    Mat logits = H * W.transpose();
    Mat dlogits(P, V);
    for (Eigen::Index r = 0; r < P; ++r) {
      const auto tgt = static_cast<Eigen::Index>(ex.tokens[pos[r] + 1]);
      const T mx = logits.row(r).maxCoeff();
      const RowVec e = (logits.row(r).array() - mx).exp();
      const T z = e.sum();
      res.nll_sum += static_cast<double>(std::log(z) - (logits(r, tgt) - mx));
      dlogits.row(r) = e / z;
      dlogits(r, tgt) -= T(1);
    }
    res.count = pos.size();
    if (!grad) return res;

    std::vector<T>& g = *grad;
    dlogits *= grad_scale;
    mat(g.data(), w_out_).noalias() += dlogits.transpose() * H;
    Mat dH = dlogits * W;
    Mat dlnf = Mat::Zero(static_cast<Eigen::Index>(Tn), D);
    for (Eigen::Index r = 0; r < P; ++r) dlnf.row(static_cast<Eigen::Index>(pos[r])) = dH.row(r);
    Mat dx;
    auto dg = vmap(g.data(), lnf_g_);
    auto db = vmap(g.data(), lnf_b_);
    ln_backward(dlnf, c.lnf_xhat, c.lnf_rstd, vec(lnf_g_), dx, dg, db);
    for (std::size_t l = cfg_.layers; l-- > 0;) dx = block_backward(layer_[l], c.layers[l], dx, g);
    auto gE = mat(g.data(), wte_);
    auto gP = mat(g.data(), wpe_);
    for (std::size_t i = 0; i < Tn; ++i) {
      gE.row(ex.tokens[i]) += dx.row(static_cast<Eigen::Index>(i));
      gP.row(static_cast<Eigen::Index>(i)) += dx.row(static_cast<Eigen::Index>(i));
    }
    return res;
  }

  // ---------------------------------------------------------------------------
  // Incremental inference with a key/value cache
  // ---------------------------------------------------------------------------

  struct KVCache {
    std::vector<std::vector<T>> k, v;  // per layer, len x dim row-major
    std::size_t len = 0;
  };

  KVCache empty_cache() const {
    KVCache c;
    c.k.resize(cfg_.layers);
    c.v.resize(cfg_.layers);
    return c;
  }

  // Feeds one token and returns the final-LayerNorm hidden state at its position.
  RowVec step(KVCache& c, std::uint32_t token) const {
    require(c.len < cfg_.max_seq, "forward: prefix longer than max_seq");
    require(token < cfg_.vocab_size, "forward: token id out of range");
    const auto D = static_cast<Eigen::Index>(cfg_.dim);
    const auto Hh = static_cast<Eigen::Index>(cfg_.heads);
    const auto dh = D / Hh;
    const T scale = T(1) / std::sqrt(static_cast<T>(dh));
    RowVec x = param(wte_).row(token) + param(wpe_).row(static_cast<Eigen::Index>(c.len));
    const auto len = static_cast<Eigen::Index>(c.len + 1);
    for (std::size_t l = 0; l < cfg_.layers; ++l) {
      const auto& li = layer_[l];
      RowVec a = ln_row(x, vec(li.ln1_g), vec(li.ln1_b));
      RowVec qkv = a * param(li.w_qkv) + vec(li.b_qkv);
      auto& K = c.k[l];
      auto& Vv = c.v[l];
      K.insert(K.end(), qkv.data() + D, qkv.data() + 2 * D);
      Vv.insert(Vv.end(), qkv.data() + 2 * D, qkv.data() + 3 * D);
      CMMap Km(K.data(), len, D), Vm(Vv.data(), len, D);
      RowVec o(D);
      for (Eigen::Index h = 0; h < Hh; ++h) {
        Eigen::Matrix<T, Eigen::Dynamic, 1> s = Km.middleCols(h * dh, dh) * qkv.segment(h * dh, dh).transpose() * scale;
        const T mx = s.maxCoeff();
        s = (s.array() - mx).exp();
        s /= s.sum();
        o.segment(h * dh, dh) = s.transpose() * Vm.middleCols(h * dh, dh);
      }
      x += o * param(li.w_o) + vec(li.b_o);
      RowVec b = ln_row(x, vec(li.ln2_g), vec(li.ln2_b));
      RowVec f = b * param(li.w_fc) + vec(li.b_fc);
      for (Eigen::Index j = 0; j < f.size(); ++j) f(j) = gelu(f(j));
      x += f * param(li.w_proj) + vec(li.b_proj);
    }
    ++c.len;
    return ln_row(x, vec(lnf_g_), vec(lnf_b_));
  }

  // Log-softmax over the vocabulary for a hidden state, in double precision.
  Eigen::VectorXd log_probs(const RowVec& hidden) const {
    Eigen::VectorXd logits = (param(w_out_) * hidden.transpose()).template cast<double>();
    const double mx = logits.maxCoeff();
    const double lse = mx + std::log((logits.array() - mx).exp().sum());
    return logits.array() - lse;
  }

  Eigen::VectorXd forward_logits(const std::vector<std::uint32_t>& prefix) const {
    require(!prefix.empty(), "forward_logits: empty prefix");
    require(prefix.size() <= cfg_.max_seq, "forward_logits: prefix longer than max_seq");
    auto c = empty_cache();
    RowVec h;
    for (auto t : prefix) h = step(c, t);
    return log_probs(h);
  }

 private:
  MMap mat(T* base, std::size_t idx) const {
    const auto& p = layout_.params[idx];
    return MMap(base + p.offset, static_cast<Eigen::Index>(p.rows), static_cast<Eigen::Index>(std::max<std::size_t>(p.cols, 1)));
  }
  CMMap cmat(const T* base, std::size_t idx) const {
    const auto& p = layout_.params[idx];
    return CMMap(base + p.offset, static_cast<Eigen::Index>(p.rows), static_cast<Eigen::Index>(std::max<std::size_t>(p.cols, 1)));
  }
  CVMap vec(std::size_t idx) const {
    const auto& p = layout_.params[idx];
    return CVMap(theta_.data() + p.offset, static_cast<Eigen::Index>(p.size()));
  }
  VMap vmap(T* base, std::size_t idx) const {
    const auto& p = layout_.params[idx];
    return VMap(base + p.offset, static_cast<Eigen::Index>(p.size()));
  }

  static constexpr T kLnEps = T(1e-5);

  static T gelu(T x) {
    const T c = T(0.7978845608028654);
    return T(0.5) * x * (T(1) + std::tanh(c * (x + T(0.044715) * x * x * x)));
  }
  static T gelu_grad(T x) {
    const T c = T(0.7978845608028654);
    const T t = std::tanh(c * (x + T(0.044715) * x * x * x));
    return T(0.5) * (T(1) + t) + T(0.5) * x * (T(1) - t * t) * c * (T(1) + T(3 * 0.044715) * x * x);
  }

  static RowVec ln_row(const RowVec& x, const CVMap& g, const CVMap& b) {
    const T mu = x.mean();
    RowVec d = x.array() - mu;
    const T rstd = T(1) / std::sqrt(d.squaredNorm() / static_cast<T>(x.size()) + kLnEps);
    return (d * rstd).cwiseProduct(g) + b;
  }

  static void ln_forward(const Mat& x, const CVMap& g, const CVMap& b, Mat& xhat, RowVec& rstd, Mat& y) {
    const auto R = x.rows(), C = x.cols();
    xhat.resize(R, C);
    y.resize(R, C);
    rstd.resize(R);
    for (Eigen::Index r = 0; r < R; ++r) {
      const T mu = x.row(r).mean();
      RowVec d = x.row(r).array() - mu;
      rstd(r) = T(1) / std::sqrt(d.squaredNorm() / static_cast<T>(C) + kLnEps);
      xhat.row(r) = d * rstd(r);
      y.row(r) = xhat.row(r).cwiseProduct(g) + b;
    }
  }

  static void ln_backward(const Mat& dy, const Mat& xhat, const RowVec& rstd, const CVMap& g, Mat& dx, VMap& dg,
                          VMap& db) {
    const auto R = dy.rows(), C = dy.cols();
    dx.resize(R, C);
    for (Eigen::Index r = 0; r < R; ++r) {
      RowVec dxhat = dy.row(r).cwiseProduct(g);
      const T m1 = dxhat.mean();
      const T m2 = dxhat.cwiseProduct(xhat.row(r)).mean();
      dx.row(r) = rstd(r) * (dxhat.array() - m1 - xhat.row(r).array() * m2);
      dg += dy.row(r).cwiseProduct(xhat.row(r));
      db += dy.row(r);
    }
  }

  Mat dropout_mask(Eigen::Index R, Eigen::Index C, Rng& rng) const {
    const T keep = T(1) - static_cast<T>(cfg_.dropout);
    Mat m(R, C);
    for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = rng.uniform() < cfg_.dropout ? T(0) : T(1) / keep;
    return m;
  }

  Mat block_forward(const LayerIdx& li, const Mat& x, LayerCache& lc, Rng* drop) const {
    const auto Tn = x.rows();
    const auto D = static_cast<Eigen::Index>(cfg_.dim);
    const auto Hh = static_cast<Eigen::Index>(cfg_.heads);
    const auto dh = D / Hh;
    const T scale = T(1) / std::sqrt(static_cast<T>(dh));
    lc.x_in = x;
    ln_forward(x, vec(li.ln1_g), vec(li.ln1_b), lc.ln1_xhat, lc.ln1_rstd, lc.ln1_out);
    lc.qkv.noalias() = lc.ln1_out * param(li.w_qkv);
    lc.qkv.rowwise() += vec(li.b_qkv);
    lc.att.resize(static_cast<std::size_t>(Hh));
    lc.att_out.resize(Tn, D);
    for (Eigen::Index h = 0; h < Hh; ++h) {
      Mat S = lc.qkv.middleCols(h * dh, dh) * lc.qkv.middleCols(D + h * dh, dh).transpose() * scale;
      for (Eigen::Index i = 0; i < Tn; ++i) {
        const T mx = S.row(i).head(i + 1).maxCoeff();
        S.row(i).head(i + 1) = (S.row(i).head(i + 1).array() - mx).exp();
        S.row(i).head(i + 1) /= S.row(i).head(i + 1).sum();
        S.row(i).tail(Tn - i - 1).setZero();
      }
      lc.att_out.middleCols(h * dh, dh).noalias() = S * lc.qkv.middleCols(2 * D + h * dh, dh);
      lc.att[static_cast<std::size_t>(h)] = std::move(S);
    }
    Mat proj = lc.att_out * param(li.w_o);
    proj.rowwise() += vec(li.b_o);
    if (drop) {
      lc.drop1 = dropout_mask(Tn, D, *drop);
      proj = proj.cwiseProduct(lc.drop1);
    }
    lc.h = x + proj;
    ln_forward(lc.h, vec(li.ln2_g), vec(li.ln2_b), lc.ln2_xhat, lc.ln2_rstd, lc.ln2_out);
    lc.fc_pre.noalias() = lc.ln2_out * param(li.w_fc);
    lc.fc_pre.rowwise() += vec(li.b_fc);
    lc.fc_act = lc.fc_pre.unaryExpr([](T v) { return gelu(v); });
    Mat mlp = lc.fc_act * param(li.w_proj);
    mlp.rowwise() += vec(li.b_proj);
    if (drop) {
      lc.drop2 = dropout_mask(Tn, D, *drop);
      mlp = mlp.cwiseProduct(lc.drop2);
    }
    return lc.h + mlp;
  }

  Mat block_backward(const LayerIdx& li, const LayerCache& lc, const Mat& dout, std::vector<T>& g) const {
    const auto Tn = dout.rows();
    const auto D = static_cast<Eigen::Index>(cfg_.dim);
    const auto Hh = static_cast<Eigen::Index>(cfg_.heads);
    const auto dh = D / Hh;
    const T scale = T(1) / std::sqrt(static_cast<T>(dh));

    Mat dmlp = lc.drop2.size() ? Mat(dout.cwiseProduct(lc.drop2)) : dout;
    mat(g.data(), li.w_proj).noalias() += lc.fc_act.transpose() * dmlp;
    vmap(g.data(), li.b_proj) += dmlp.colwise().sum();
    Mat dfc = (dmlp * param(li.w_proj).transpose()).cwiseProduct(lc.fc_pre.unaryExpr([](T v) { return gelu_grad(v); }));
    mat(g.data(), li.w_fc).noalias() += lc.ln2_out.transpose() * dfc;
    vmap(g.data(), li.b_fc) += dfc.colwise().sum();
    Mat dln2 = dfc * param(li.w_fc).transpose();
    Mat dh_ln;
    {
      auto dg = vmap(g.data(), li.ln2_g);
      auto db = vmap(g.data(), li.ln2_b);
      ln_backward(dln2, lc.ln2_xhat, lc.ln2_rstd, vec(li.ln2_g), dh_ln, dg, db);
    }
    Mat dres = dout + dh_ln;

    Mat dproj = lc.drop1.size() ? Mat(dres.cwiseProduct(lc.drop1)) : dres;
    mat(g.data(), li.w_o).noalias() += lc.att_out.transpose() * dproj;
    vmap(g.data(), li.b_o) += dproj.colwise().sum();
    Mat datt = dproj * param(li.w_o).transpose();
    Mat dqkv(Tn, 3 * D);
    for (Eigen::Index h = 0; h < Hh; ++h) {
      const Mat& A = lc.att[static_cast<std::size_t>(h)];
      auto Q = lc.qkv.middleCols(h * dh, dh);
      auto K = lc.qkv.middleCols(D + h * dh, dh);
      auto Vv = lc.qkv.middleCols(2 * D + h * dh, dh);
      auto dO = datt.middleCols(h * dh, dh);
      Mat dA = dO * Vv.transpose();
      dqkv.middleCols(2 * D + h * dh, dh).noalias() = A.transpose() * dO;
      Eigen::Matrix<T, Eigen::Dynamic, 1> rs = dA.cwiseProduct(A).rowwise().sum();
      Mat dS = A.cwiseProduct(dA.colwise() - rs);
      dqkv.middleCols(h * dh, dh).noalias() = dS * K * scale;
      dqkv.middleCols(D + h * dh, dh).noalias() = dS.transpose() * Q * scale;
    }
    mat(g.data(), li.w_qkv).noalias() += lc.ln1_out.transpose() * dqkv;
    vmap(g.data(), li.b_qkv) += dqkv.colwise().sum();
    Mat dln1 = dqkv * param(li.w_qkv).transpose();
    Mat dx_ln;
    {
      auto dg = vmap(g.data(), li.ln1_g);
      auto db = vmap(g.data(), li.ln1_b);
      ln_backward(dln1, lc.ln1_xhat, lc.ln1_rstd, vec(li.ln1_g), dx_ln, dg, db);
    }
    return dres + dx_ln;
  }

  ModelConfig cfg_;
  ParamLayout layout_;
  std::vector<T> theta_;
  std::vector<LayerIdx> layer_;
  std::size_t wte_ = 0, wpe_ = 0, lnf_g_ = 0, lnf_b_ = 0, w_out_ = 0;
};

using Model = MiniRecModel<float>;

// -----------------------------------------------------------------------------
// Objective, gradient check
// -----------------------------------------------------------------------------

// Mean NLL per masked token over the batch.
template <class T>
double sft_loss(const MiniRecModel<T>& model, const std::vector<EncodedExample>& batch) {
  require(!batch.empty(), "sft_loss: empty batch");
  CompensatedSum s;
  std::size_t n = 0;
  for (const auto& ex : batch) {
    auto r = model.sequence_loss(ex);
    s.add(r.nll_sum);
    n += r.count;
  }
  if (n == 0) throw ContractViolation("sft_loss: loss mask is all zero");
  return s.value() / static_cast<double>(n);
}

// Mean-loss gradient over the batch, summed over shards in fixed order.
template <class T>
double loss_and_grad(const MiniRecModel<T>& model, const std::vector<const EncodedExample*>& batch, std::vector<T>& grad,
                     std::size_t threads = 1, Rng* dropout_rng = nullptr) {
  std::size_t n = 0;
  for (const auto* ex : batch) n += ex->masked();
  if (n == 0) throw ContractViolation("loss_and_grad: loss mask is all zero");
  const T scale = T(1) / static_cast<T>(n);
  grad.assign(model.num_params(), T(0));
  std::vector<std::uint64_t> drop_seeds(batch.size());
  if (dropout_rng)
    for (auto& s : drop_seeds) s = dropout_rng->next();
  auto run = [&](std::size_t begin, std::size_t end, std::vector<T>& g, double& nll) {
    for (std::size_t i = begin; i < end; ++i) {
      Rng r(drop_seeds[i]);
      nll += model.sequence_loss(*batch[i], &g, scale, dropout_rng ? &r : nullptr).nll_sum;
    }
  };
  threads = std::clamp<std::size_t>(threads, 1, batch.size());
  if (threads == 1) {
    double nll = 0.0;
    run(0, batch.size(), grad, nll);
    return nll / static_cast<double>(n);
  }
  std::vector<std::vector<T>> partial(threads, std::vector<T>(model.num_params(), T(0)));
  std::vector<double> nlls(threads, 0.0);
  std::vector<std::thread> pool;
  for (std::size_t t = 0; t < threads; ++t) {
    const std::size_t b = batch.size() * t / threads, e = batch.size() * (t + 1) / threads;
    pool.emplace_back(run, b, e, std::ref(partial[t]), std::ref(nlls[t]));
  }
  for (auto& th : pool) th.join();
  double nll = 0.0;
  for (std::size_t t = 0; t < threads; ++t) {
    for (std::size_t i = 0; i < grad.size(); ++i) grad[i] += partial[t][i];
    nll += nlls[t];
  }
  return nll / static_cast<double>(n);
}

struct GradCheckResult {
  double max_rel_error = 0.0;
  std::string worst_param;
  std::size_t checked = 0;
};

// Central differences (step h) on every parameter. Relative error is
// |a - n| / max(|a| + |n|, floor); the floor sits above the round-off level of
// the difference quotient so exactly-zero gradients are not scored as noise.
inline GradCheckResult grad_check(MiniRecModel<double>& model, const std::vector<EncodedExample>& batch, double h = 1e-5,
                                  double floor = 1e-6) {
  std::vector<const EncodedExample*> ptrs;
  for (const auto& e : batch) ptrs.push_back(&e);
  std::vector<double> grad;
  loss_and_grad(model, ptrs, grad);
  GradCheckResult r;
  auto& theta = model.params();
  for (std::size_t i = 0; i < theta.size(); ++i) {
    const double orig = theta[i];
    theta[i] = orig + h;
    const double lp = sft_loss(model, batch);
    theta[i] = orig - h;
    const double lm = sft_loss(model, batch);
    theta[i] = orig;
    const double num = (lp - lm) / (2 * h);
    const double rel = std::abs(grad[i] - num) / std::max(std::abs(grad[i]) + std::abs(num), floor);
    if (rel > r.max_rel_error) {
      r.max_rel_error = rel;
      for (const auto& p : model.layout().params)
        if (i >= p.offset && i < p.offset + p.size()) r.worst_param = p.name;
    }
    ++r.checked;
  }
  return r;
}

// -----------------------------------------------------------------------------
// Optimizer and training loop
// -----------------------------------------------------------------------------

struct AdamW {
  double lr = 3e-4, beta1 = 0.9, beta2 = 0.999, eps = 1e-8, weight_decay = 0.0;
  std::vector<double> m, v;
  std::vector<std::uint8_t> decay;  // 1 for matrix parameters
  std::vector<std::uint8_t> fixed;  // 1 for frozen parameters
  std::size_t t = 0;

  void init(const ParamLayout& layout) {
    m.assign(layout.total, 0.0);
    v.assign(layout.total, 0.0);
    decay.assign(layout.total, 0);
    fixed.assign(layout.total, 0);
    for (const auto& p : layout.params)
      if (p.cols != 0) std::fill(decay.begin() + static_cast<std::ptrdiff_t>(p.offset),
                                 decay.begin() + static_cast<std::ptrdiff_t>(p.offset + p.size()), 1);
  }

  template <class T>
  void update(std::vector<T>& theta, const std::vector<T>& grad, double lr_now) {
    ++t;
    const double c1 = 1.0 - std::pow(beta1, static_cast<double>(t));
    const double c2 = 1.0 - std::pow(beta2, static_cast<double>(t));
    for (std::size_t i = 0; i < theta.size(); ++i) {
      if (fixed[i]) continue;
      const double g = grad[i];
      m[i] = beta1 * m[i] + (1 - beta1) * g;
      v[i] = beta2 * v[i] + (1 - beta2) * g * g;
      double p = theta[i];
      if (decay[i]) p -= lr_now * weight_decay * p;
      p -= lr_now * (m[i] / c1) / (std::sqrt(v[i] / c2) + eps);
      theta[i] = static_cast<T>(p);
    }
  }
};

struct TrainConfig {
  std::size_t steps = 1000;
  std::size_t batch_size = 16;
  double lr = 3e-4;
  double weight_decay = 0.0;
  double beta1 = 0.9, beta2 = 0.999, eps = 1e-8;
  double clip = 1.0;
  std::size_t warmup = 0;
  std::size_t eval_every = 50;
  std::size_t patience = 3;
  std::size_t eval_examples = 128;
  std::size_t threads = 1;
  bool restore_best = true;
  std::uint64_t seed = 0;
  std::vector<std::string> frozen;  // parameter names held fixed
};

struct TrainRow {
  std::size_t step = 0;
  std::optional<double> train_loss, eval_loss, hr5;
};

struct TrainReport {
  std::vector<TrainRow> rows;
  std::size_t steps_run = 0;
  std::size_t best_step = 0;
  double best_eval_loss = std::numeric_limits<double>::infinity();
  bool early_stopped = false;

  std::string to_csv() const {
    auto f = [](const std::optional<double>& v) { return v ? fmt_double(*v) : std::string(); };
    std::string out = "step,train_loss,eval_loss,hr5\n";
    for (const auto& r : rows) out += std::to_string(r.step) + "," + f(r.train_loss) + "," + f(r.eval_loss) + "," + f(r.hr5) + "\n";
    return out;
  }

  std::vector<std::pair<std::size_t, double>> eval_curve() const {
    std::vector<std::pair<std::size_t, double>> out;
    for (const auto& r : rows)
      if (r.eval_loss) out.emplace_back(r.step, *r.eval_loss);
    return out;
  }
};

// Stops after `patience` consecutive evaluations without a strict improvement.
class EarlyStopper {
 public:
  explicit EarlyStopper(std::size_t patience) : patience_(patience) {}
  // Returns true when training should stop.
  bool update(double loss) {
    if (loss < best_) {
      best_ = loss;
      bad_ = 0;
      return false;
    }
    return ++bad_ >= patience_ && patience_ > 0;
  }
  bool improved_last() const { return bad_ == 0; }
  double best() const { return best_; }

 private:
  std::size_t patience_;
  std::size_t bad_ = 0;
  double best_ = std::numeric_limits<double>::infinity();
};

using HitRateFn = std::function<double(const Model&)>;

inline TrainReport train(Model& model, const std::vector<EncodedExample>& train_set, const std::vector<double>& weights,
                         const std::vector<EncodedExample>& valid_set, const TrainConfig& cfg,
                         const HitRateFn& hr5 = {}) {
  if (train_set.empty()) throw TrainingError("train: empty training set");
  if (weights.size() != train_set.size()) throw ContractViolation("train: one weight per example required");
  if (cfg.batch_size == 0) throw ConfigError("train: batch_size must be positive");
  std::vector<double> cum;
  double acc = 0.0;
  for (double w : weights) {
    if (!(w > 0.0)) throw ConfigError("train: example weights must be positive");
    cum.push_back(acc += w);
  }
  std::vector<EncodedExample> eval_set(valid_set.begin(),
                                       valid_set.begin() + static_cast<std::ptrdiff_t>(std::min(valid_set.size(), cfg.eval_examples)));

  AdamW opt;
  opt.beta1 = cfg.beta1;
  opt.beta2 = cfg.beta2;
  opt.eps = cfg.eps;
  opt.weight_decay = cfg.weight_decay;
  opt.init(model.layout());
  Rng sampler(derive_seed(cfg.seed, "train-sampler"));
  Rng dropout(derive_seed(cfg.seed, "train-dropout"));
  EarlyStopper stopper(cfg.patience);
  std::vector<std::pair<std::size_t, std::size_t>> frozen;
  for (const auto& name : cfg.frozen) {
    const auto& p = model.layout().find(name);
    frozen.emplace_back(p.offset, p.size());
    std::fill_n(opt.fixed.begin() + static_cast<std::ptrdiff_t>(p.offset), p.size(), 1);
  }
  TrainReport report;
  std::vector<float> best_params;
  std::vector<float> grad;

  auto evaluate = [&](std::size_t step, TrainRow& row) -> bool {
    if (eval_set.empty()) return false;
    row.eval_loss = sft_loss(model, eval_set);
    if (!std::isfinite(*row.eval_loss)) throw TrainingError("eval loss is not finite at step " + std::to_string(step));
    if (hr5) row.hr5 = hr5(model);
    const bool stop = stopper.update(*row.eval_loss);
    if (stopper.improved_last()) {
      report.best_step = step;
      report.best_eval_loss = *row.eval_loss;
      if (cfg.restore_best) best_params = model.params();
    }
    log_info("step " + std::to_string(step) + " eval_loss " + fmt_fixed(*row.eval_loss, 5) +
             (row.hr5 ? " hr5 " + fmt_fixed(*row.hr5, 4) : std::string()));
    return stop;
  };

  {
    TrainRow row;
    if (evaluate(0, row)) report.early_stopped = true;
    if (row.eval_loss) report.rows.push_back(row);
  }
  for (std::size_t step = 1; step <= cfg.steps && !report.early_stopped; ++step) {
    std::vector<const EncodedExample*> batch;
    for (std::size_t b = 0; b < cfg.batch_size; ++b) {
      const double u = sampler.uniform() * cum.back();
      auto i = static_cast<std::size_t>(std::upper_bound(cum.begin(), cum.end(), u) - cum.begin());
      batch.push_back(&train_set[std::min(i, train_set.size() - 1)]);
    }
    const bool use_dropout = model.config().dropout > 0.0;
    const double loss = loss_and_grad(model, batch, grad, cfg.threads, use_dropout ? &dropout : nullptr);
    if (!std::isfinite(loss)) throw TrainingError("training loss is not finite at step " + std::to_string(step));
    for (const auto& [off, n] : frozen) std::fill_n(grad.begin() + static_cast<std::ptrdiff_t>(off), n, 0.0f);
    double norm2 = 0.0;
    for (float g : grad) norm2 += static_cast<double>(g) * g;
    const double norm = std::sqrt(norm2);
    if (!std::isfinite(norm)) throw TrainingError("gradient is not finite at step " + std::to_string(step));
    if (cfg.clip > 0 && norm > cfg.clip) {
      const auto s = static_cast<float>(cfg.clip / norm);
      for (auto& g : grad) g *= s;
    }
    const double lr_now = cfg.warmup ? cfg.lr * std::min(1.0, static_cast<double>(step) / static_cast<double>(cfg.warmup)) : cfg.lr;
    opt.update(model.params(), grad, lr_now);
    TrainRow row;
    row.step = step;
    row.train_loss = loss;
    if ((cfg.eval_every && step % cfg.eval_every == 0) || step == cfg.steps)
      report.early_stopped = evaluate(step, row);
    report.rows.push_back(row);
    report.steps_run = step;
  }
  if (cfg.restore_best && !best_params.empty()) model.params() = best_params;
  return report;
}

// -----------------------------------------------------------------------------
// Checkpoint: "TSRECCKPT 1\n", u64 header length, header JSON, f32 blobs in
// layout order.
// -----------------------------------------------------------------------------

inline constexpr std::string_view kCheckpointMagic = "TSRECCKPT 1\n";

inline std::string format_checkpoint(const Model& model, const nlohmann::ordered_json& extra = {}) {
  nlohmann::ordered_json h;
  h["config"] = model.config().to_json();
  auto& params = h["params"] = nlohmann::ordered_json::array();
  for (const auto& p : model.layout().params)
    params.push_back({{"name", p.name}, {"shape", p.cols ? std::vector<std::size_t>{p.rows, p.cols} : std::vector<std::size_t>{p.rows}}});
  if (!extra.is_null()) h["meta"] = extra;
  const auto header = h.dump();
  std::string out(kCheckpointMagic);
  put_u64(out, header.size());
  out += header;
  for (float v : model.params()) put_f32(out, v);
  return out;
}

inline Model parse_checkpoint(std::string_view data, nlohmann::json* meta = nullptr) {
  if (!starts_with(data, kCheckpointMagic)) throw ParseError("not a checkpoint file");
  ByteReader rd(data.substr(kCheckpointMagic.size()));
  const auto len = rd.u64();
  nlohmann::json h;
  try {
    h = nlohmann::json::parse(rd.bytes(len));
  } catch (const nlohmann::json::exception& e) {
    throw ParseError(std::string("checkpoint header: ") + e.what());
  }
  Model m(ModelConfig::from_json(h.at("config")));
  const auto& params = h.at("params");
  if (params.size() != m.layout().params.size()) throw ParseError("checkpoint parameter list does not match config");
  for (std::size_t i = 0; i < params.size(); ++i)
    if (params[i].at("name").get<std::string>() != m.layout().params[i].name)
      throw ParseError("checkpoint parameter order mismatch at " + m.layout().params[i].name);
  for (auto& v : m.params()) v = rd.f32();
  if (rd.remaining()) throw ParseError("trailing bytes after checkpoint payload");
  for (float v : m.params())
    if (!std::isfinite(v)) throw DataError("non-finite parameter in checkpoint");
  if (meta && h.contains("meta")) *meta = h["meta"];
  return m;
}

}  // namespace tsrec
