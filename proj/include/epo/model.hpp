#pragma once

#include <cmath>
#include <concepts>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <functional>
#include <memory>
#include <string>
#include <vector>

#include "epo/common.hpp"
#include "epo/core.hpp"

namespace epo {

// ----------------------------------------------------------------------------
// Reference model: pre-norm decoder-only transformer, learned positional
// embeddings, GELU MLP, all arithmetic in 64-bit floats.
//
// Scoring convention: a prompt t_0..t_{n-1} is evaluated on the raw sequence
// [BOS, t_0, ..., t_{n-1}] so that every prompt token has a BOS-conditioned
// cross-entropy term. Public outputs are indexed by prompt position:
//   logits.row(i)    next-token logits after consuming t_0..t_i
//   residual[L].row(i), mlp_acts[L].row(i)  internals at the position holding t_i
// The BOS row only participates in ce_terms[0].
//
// layers == 0 degenerates to logits = (onehot . embed + pos) . unembed with no
// block and no final LayerNorm.
// ----------------------------------------------------------------------------

struct ToyTransformerSpec {
  int vocab_size = 0;  // V
  int d_model = 0;     // d
  int d_mlp = 0;       // h
  int layers = 0;
  int heads = 1;
  int n_max = 0;       // maximum prompt length (positional table holds n_max+1 rows)
  uint32_t seed = 0;

  void validate() const {
    if (vocab_size < 1) throw ModelError("vocab_size must be >= 1");
    if (d_model < 1) throw ModelError("d_model must be >= 1");
    if (d_mlp < 1) throw ModelError("d_mlp must be >= 1");
    if (layers < 0) throw ModelError("layers must be >= 0");
    if (heads < 1) throw ModelError("heads must be >= 1");
    if (n_max < 1) throw ModelError("n_max must be >= 1");
    if (d_model % heads != 0) throw ModelError("d_model must be divisible by heads");
  }

  bool operator==(const ToyTransformerSpec&) const = default;
};

namespace detail {

struct LnCache {
  Matrix xhat;       // s x d
  Vector inv_sigma;  // s
};

struct BlockCache {
  Matrix x_in;
  LnCache ln1;
  Matrix a;                 // normalized attention input
  Matrix q, k, v;           // s x d
  std::vector<Matrix> att;  // per head, s x s causal softmax
  Matrix heads_out;         // s x d, concatenated head outputs before the proj
  Matrix x_mid;             // after attention residual
  LnCache ln2;
  Matrix b_norm;
  Matrix pre_act;  // s x h
  Matrix act;      // s x h, post-GELU
  Matrix x_out;
};

struct ForwardCache {
  std::vector<TokenId> raw_ids;  // [bos, t_0..t_{n-1}]; empty on the relaxed path
  Matrix relaxed_rows;           // n x V on the relaxed path, else 0x0
  Matrix x0;
  std::vector<BlockCache> blocks;
  LnCache lnf;
  Matrix y;
  Matrix logits_raw;  // (n+1) x V
};

inline constexpr double kLnEps = 1e-5;
inline constexpr double kInvSqrt2 = 0.70710678118654752440084436210485;

inline double gelu(double x) { return 0.5 * x * (1.0 + std::erf(x * kInvSqrt2)); }

inline double gelu_grad(double x) {
  constexpr double inv_sqrt_2pi = 0.3989422804014326779399461;
  return 0.5 * (1.0 + std::erf(x * kInvSqrt2)) + x * inv_sqrt_2pi * std::exp(-0.5 * x * x);
}

}  // namespace detail

struct ModelOutputs {
  Matrix logits;                 // n x V
  std::vector<Matrix> residual;  // per layer, n x d (stream after each block)
  std::vector<Matrix> mlp_acts;  // per layer, n x h
  std::shared_ptr<const detail::ForwardCache> cache;

  int prompt_len() const { return static_cast<int>(logits.rows()); }
};

struct OneHotGradient {
  Matrix grad;  // n x V: d(objective)/d(one-hot entry), other positions held one-hot
  double objective_value = 0.0;
};

// Seed gradients with respect to the recorded forward outputs. Empty members
// contribute nothing. d_ce_terms[j] is the weight on the j-th cross-entropy
// term (the BOS-conditioned -log p(t_j | bos, t_<j)).
struct OutputSeeds {
  Matrix d_logits;
  std::vector<Matrix> d_residual;
  std::vector<Matrix> d_mlp_acts;
  std::vector<double> d_ce_terms;
};

// A differentiable scalar of the forward outputs. When `seeds` is non-null the
// callee must fill in the gradient of its return value; value-only callers
// (e.g. a finite-difference probe) pass nullptr.
using ScalarObjective =
    std::function<double(const ModelOutputs&, const TokenSequence&, OutputSeeds*)>;

// Per-position cross-entropy of the prompt under the model that produced
// `out`, in nats. Term j is -log p(t_j | bos, t_0..t_{j-1}).
inline std::vector<double> ce_terms_from(const ModelOutputs& out, const TokenSequence& seq) {
  const Matrix& raw = out.cache->logits_raw;
  int n = seq.length();
  std::vector<double> terms(static_cast<std::size_t>(n));
  for (int j = 0; j < n; ++j) {
    const auto row = raw.row(j);
    double m = row.maxCoeff();
    double lse = m + std::log((row.array() - m).exp().sum());
    terms[static_cast<std::size_t>(j)] = lse - row(seq[j]);
  }
  return terms;
}

struct TrainOptions {
  int window = 16;
  double lr = 3e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  uint64_t seed = 0;
};

struct Weights {
  struct Block {
    Vector ln1_g, ln1_b;
    Matrix wq, wk, wv, wo;
    Vector bq, bk, bv, bo;
    Vector ln2_g, ln2_b;
    Matrix w1;
    Vector b1;
    Matrix w2;
    Vector b2;
  };
  Matrix embed;  // V x d
  Matrix pos;    // (n_max+1) x d
  std::vector<Block> blocks;
  Vector lnf_g, lnf_b;
  Matrix unembed;  // d x V
};

class ToyTransformer {
 public:
  explicit ToyTransformer(const ToyTransformerSpec& spec) : spec_(spec) {
    spec_.validate();
    init_weights();
  }

  const ToyTransformerSpec& spec() const { return spec_; }
  int vocab_size() const { return spec_.vocab_size; }
  int max_prompt_len() const { return spec_.n_max; }
  Weights& weights() { return w_; }
  const Weights& weights() const { return w_; }

  // The BOS id used as the implicit scoring prefix. Defaults to V-1, where the
  // byte/word vocabulary builders place <bos>; set it once when pairing the
  // model with a vocabulary that puts BOS elsewhere.
  void set_bos_id(TokenId id) {
    if (id < 0 || id >= spec_.vocab_size) throw ModelError("bos id out of range");
    bos_id_ = id;
  }
  TokenId bos_id() const { return bos_id_; }

  // --------------------------------------------------------------------------
  // Forward
  // --------------------------------------------------------------------------

  ModelOutputs forward(const TokenSequence& seq) const {
    check_seq(seq);
    auto cache = std::make_shared<detail::ForwardCache>();
    cache->raw_ids.reserve(static_cast<std::size_t>(seq.length()) + 1);
    cache->raw_ids.push_back(bos_id_);
    for (TokenId id : seq.ids) cache->raw_ids.push_back(id);
    int s = static_cast<int>(cache->raw_ids.size());
    Matrix x0(s, spec_.d_model);
    for (int p = 0; p < s; ++p)
      x0.row(p) = w_.embed.row(cache->raw_ids[static_cast<std::size_t>(p)]) + w_.pos.row(p);
    cache->x0 = std::move(x0);
    return run_stack(std::move(cache));
  }

  // Relaxed input: `rows` is an n x V real matrix standing in for the one-hot
  // encoding of the prompt (the BOS row stays a true one-hot). Used by
  // gradient checks; gradients are defined at the one-hot point of this map.
  ModelOutputs forward_relaxed(const Matrix& rows) const {
    if (rows.cols() != spec_.vocab_size) throw InputError("relaxed input has wrong vocab width");
    if (rows.rows() < 1 || rows.rows() > spec_.n_max) throw InputError("relaxed input length out of range");
    auto cache = std::make_shared<detail::ForwardCache>();
    cache->relaxed_rows = rows;
    int s = static_cast<int>(rows.rows()) + 1;
    Matrix x0(s, spec_.d_model);
    x0.row(0) = w_.embed.row(bos_id_) + w_.pos.row(0);
    for (int p = 1; p < s; ++p)
      x0.row(p) = rows.row(p - 1) * w_.embed + w_.pos.row(p);
    cache->x0 = std::move(x0);
    return run_stack(std::move(cache));
  }

  std::vector<double> cross_entropy_terms(const TokenSequence& seq) const {
    return ce_terms_from(forward(seq), seq);
  }

  // --------------------------------------------------------------------------
  // Reverse mode
  // --------------------------------------------------------------------------

  OneHotGradient grad_onehot(const TokenSequence& seq, const ScalarObjective& objective) const {
    ModelOutputs out = forward(seq);
    OutputSeeds seeds;
    double value = objective(out, seq, &seeds);
    return OneHotGradient{backprop_to_onehot(out, seeds, seq), value};
  }

  Matrix backprop_to_onehot(const ModelOutputs& out, const OutputSeeds& seeds,
                            const TokenSequence& seq) const {
    return backward(*out.cache, seeds, seq, nullptr);
  }

  // --------------------------------------------------------------------------
  // Training (Adam on mean window cross-entropy)
  // --------------------------------------------------------------------------

  // Deterministic given options.seed; steps == 0 leaves weights untouched.
  void train(const std::vector<TokenId>& corpus, int steps, TrainOptions opt = {}) {
    if (corpus.empty()) throw InputError("training corpus is empty");
    for (TokenId id : corpus)
      if (id < 0 || id >= spec_.vocab_size) throw InputError("corpus token id out of range");
    if (steps == 0) return;
    int window = std::min<int>(opt.window, spec_.n_max);
    window = std::min<int>(window, static_cast<int>(corpus.size()));
    Adam adam(make_grads(), opt);
    for (int step = 0; step < steps; ++step) {
      CounterRng rng{opt.seed, rng_tag::train, static_cast<uint64_t>(step)};
      std::size_t span = corpus.size() - static_cast<std::size_t>(window);
      std::size_t start = span == 0 ? 0 : rng.next_below(span + 1);
      TokenSequence seq(std::vector<TokenId>(corpus.begin() + static_cast<std::ptrdiff_t>(start),
                                             corpus.begin() + static_cast<std::ptrdiff_t>(start) +
                                                 window));
      ModelOutputs out = forward(seq);
      OutputSeeds seeds;
      seeds.d_ce_terms.assign(static_cast<std::size_t>(window), 1.0 / window);
      WeightGrads grads = make_grads();
      backward(*out.cache, seeds, seq, &grads);
      adam.step(w_, grads);
    }
  }

  double mean_corpus_ce(const std::vector<TokenId>& corpus, int window = 16,
                        int stride = 0) const {
    if (corpus.empty()) throw InputError("corpus is empty");
    window = std::min<int>({window, spec_.n_max, static_cast<int>(corpus.size())});
    if (stride <= 0) stride = window;
    double total = 0.0;
    std::size_t count = 0;
    for (std::size_t s = 0; s + static_cast<std::size_t>(window) <= corpus.size();
         s += static_cast<std::size_t>(stride)) {
      TokenSequence seq(std::vector<TokenId>(corpus.begin() + static_cast<std::ptrdiff_t>(s),
                                             corpus.begin() + static_cast<std::ptrdiff_t>(s) +
                                                 window));
      for (double t : cross_entropy_terms(seq)) total += t;
      count += static_cast<std::size_t>(window);
    }
    return total / static_cast<double>(count);
  }

  // --------------------------------------------------------------------------
  // Serialization: "EPOW" magic, u32 version, u32 spec fields
  // (V, d, h, layers, heads, n_max, seed), then row-major little-endian f64
  // arrays in declaration order: embed, pos, per block {ln1_g, ln1_b, wq, bq,
  // wk, bk, wv, bv, wo, bo, ln2_g, ln2_b, w1, b1, w2, b2}, lnf_g, lnf_b,
  // unembed.
  // --------------------------------------------------------------------------

  void save(const std::string& path) const {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw ModelError("cannot open weight file for writing: " + path);
    out.write("EPOW", 4);
    for (uint32_t v : {kFormatVersion, static_cast<uint32_t>(spec_.vocab_size),
                       static_cast<uint32_t>(spec_.d_model), static_cast<uint32_t>(spec_.d_mlp),
                       static_cast<uint32_t>(spec_.layers), static_cast<uint32_t>(spec_.heads),
                       static_cast<uint32_t>(spec_.n_max), spec_.seed})
      write_u32(out, v);
    for_each_tensor(const_cast<Weights&>(w_), [&](const double* data, std::size_t count) {
      out.write(reinterpret_cast<const char*>(data),
                static_cast<std::streamsize>(count * sizeof(double)));
    });
    if (!out) throw ModelError("failed writing weight file: " + path);
  }

  static ToyTransformer load(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw ModelError("cannot open weight file: " + path);
    char magic[4];
    in.read(magic, 4);
    if (!in || std::memcmp(magic, "EPOW", 4) != 0)
      throw ModelError("not an EPOW weight file: " + path);
    uint32_t version = read_u32(in);
    if (version != kFormatVersion) throw ModelError("unsupported weight file version");
    ToyTransformerSpec spec;
    spec.vocab_size = static_cast<int>(read_u32(in));
    spec.d_model = static_cast<int>(read_u32(in));
    spec.d_mlp = static_cast<int>(read_u32(in));
    spec.layers = static_cast<int>(read_u32(in));
    spec.heads = static_cast<int>(read_u32(in));
    spec.n_max = static_cast<int>(read_u32(in));
    spec.seed = read_u32(in);
    if (!in) throw ModelError("truncated weight file header: " + path);
    ToyTransformer model(spec);
    bool ok = true;
    for_each_tensor(model.w_, [&](double* data, std::size_t count) {
      in.read(reinterpret_cast<char*>(data), static_cast<std::streamsize>(count * sizeof(double)));
      if (!in) ok = false;
    });
    if (!ok) throw ModelError("truncated weight file: " + path);
    in.peek();
    if (!in.eof()) throw ModelError("trailing bytes in weight file: " + path);
    return model;
  }

 private:
  static constexpr uint32_t kFormatVersion = 1;

  ToyTransformerSpec spec_;
  Weights w_;
  TokenId bos_id_ = 0;

  void check_seq(const TokenSequence& seq) const {
    if (seq.length() < 1) throw InputError("sequence is empty");
    if (seq.length() > spec_.n_max) throw InputError("sequence longer than n_max");
    for (TokenId id : seq.ids)
      if (id < 0 || id >= spec_.vocab_size) throw InputError("token id out of range");
  }

  void init_weights() {
    CounterRng rng{spec_.seed, rng_tag::weights};
    auto fill = [&](Matrix& m, int rows, int cols) {
      m.resize(rows, cols);
      for (int i = 0; i < rows; ++i)
        for (int j = 0; j < cols; ++j) m(i, j) = 0.08 * rng.normal();
    };
    auto zeros = [](Vector& v, int size) { v = Vector::Zero(size); };
    auto ones = [](Vector& v, int size) { v = Vector::Ones(size); };

    int d = spec_.d_model, h = spec_.d_mlp;
    fill(w_.embed, spec_.vocab_size, d);
    fill(w_.pos, spec_.n_max + 1, d);
    w_.blocks.resize(static_cast<std::size_t>(spec_.layers));
    for (auto& b : w_.blocks) {
      ones(b.ln1_g, d);
      zeros(b.ln1_b, d);
      fill(b.wq, d, d);
      zeros(b.bq, d);
      fill(b.wk, d, d);
      zeros(b.bk, d);
      fill(b.wv, d, d);
      zeros(b.bv, d);
      fill(b.wo, d, d);
      zeros(b.bo, d);
      ones(b.ln2_g, d);
      zeros(b.ln2_b, d);
      fill(b.w1, d, h);
      zeros(b.b1, h);
      fill(b.w2, h, d);
      zeros(b.b2, d);
    }
    ones(w_.lnf_g, d);
    zeros(w_.lnf_b, d);
    fill(w_.unembed, d, spec_.vocab_size);
    bos_id_ = spec_.vocab_size - 1;
  }

  // ---- LayerNorm ----

  static Matrix layer_norm(const Matrix& x, const Vector& g, const Vector& b,
                           detail::LnCache& cache) {
    int s = static_cast<int>(x.rows()), d = static_cast<int>(x.cols());
    cache.xhat.resize(s, d);
    cache.inv_sigma.resize(s);
    Matrix out(s, d);
    for (int p = 0; p < s; ++p) {
      double mu = x.row(p).mean();
      double var = (x.row(p).array() - mu).square().mean();
      double inv = 1.0 / std::sqrt(var + detail::kLnEps);
      cache.inv_sigma(p) = inv;
      cache.xhat.row(p) = ((x.row(p).array() - mu) * inv).matrix();
      out.row(p) = cache.xhat.row(p).cwiseProduct(g.transpose()) + b.transpose();
    }
    return out;
  }

  static Matrix layer_norm_backward(const Matrix& dout, const detail::LnCache& cache,
                                    const Vector& g, Vector* dg, Vector* db) {
    int s = static_cast<int>(dout.rows()), d = static_cast<int>(dout.cols());
    Matrix dx(s, d);
    for (int p = 0; p < s; ++p) {
      auto xhat = cache.xhat.row(p);
      Eigen::RowVectorXd dxhat = dout.row(p).cwiseProduct(g.transpose());
      double m1 = dxhat.mean();
      double m2 = dxhat.cwiseProduct(xhat).mean();
      dx.row(p) = (cache.inv_sigma(p) * (dxhat.array() - m1 - xhat.array() * m2)).matrix();
      if (dg) *dg += dout.row(p).cwiseProduct(xhat).transpose();
      if (db) *db += dout.row(p).transpose();
    }
    return dx;
  }

  // ---- Stack ----

  ModelOutputs run_stack(std::shared_ptr<detail::ForwardCache> cache) const {
    int s = static_cast<int>(cache->x0.rows());
    int n = s - 1;
    int d = spec_.d_model;
    int dh = d / spec_.heads;
    double scale = 1.0 / std::sqrt(static_cast<double>(dh));

    Matrix x = cache->x0;
    cache->blocks.resize(static_cast<std::size_t>(spec_.layers));
    for (int L = 0; L < spec_.layers; ++L) {
      auto& bc = cache->blocks[static_cast<std::size_t>(L)];
      const auto& wb = w_.blocks[static_cast<std::size_t>(L)];
      bc.x_in = x;
      bc.a = layer_norm(x, wb.ln1_g, wb.ln1_b, bc.ln1);
      bc.q = (bc.a * wb.wq).rowwise() + wb.bq.transpose();
      bc.k = (bc.a * wb.wk).rowwise() + wb.bk.transpose();
      bc.v = (bc.a * wb.wv).rowwise() + wb.bv.transpose();
      bc.att.resize(static_cast<std::size_t>(spec_.heads));
      bc.heads_out.resize(s, d);
      for (int t = 0; t < spec_.heads; ++t) {
        auto qh = bc.q.middleCols(t * dh, dh);
        auto kh = bc.k.middleCols(t * dh, dh);
        auto vh = bc.v.middleCols(t * dh, dh);
        Matrix scores = (qh * kh.transpose()) * scale;
        causal_softmax(scores);
        bc.att[static_cast<std::size_t>(t)] = scores;
        bc.heads_out.middleCols(t * dh, dh) = scores * vh;
      }
      bc.x_mid = bc.x_in + ((bc.heads_out * wb.wo).rowwise() + wb.bo.transpose());
      bc.b_norm = layer_norm(bc.x_mid, wb.ln2_g, wb.ln2_b, bc.ln2);
      bc.pre_act = (bc.b_norm * wb.w1).rowwise() + wb.b1.transpose();
      bc.act = bc.pre_act.unaryExpr([](double v) { return detail::gelu(v); });
      bc.x_out = bc.x_mid + ((bc.act * wb.w2).rowwise() + wb.b2.transpose());
      x = bc.x_out;
    }
    if (spec_.layers > 0)
      cache->y = layer_norm(x, w_.lnf_g, w_.lnf_b, cache->lnf);
    else
      cache->y = x;
    cache->logits_raw = cache->y * w_.unembed;

    ModelOutputs out;
    out.logits = cache->logits_raw.bottomRows(n);
    out.residual.reserve(static_cast<std::size_t>(spec_.layers));
    out.mlp_acts.reserve(static_cast<std::size_t>(spec_.layers));
    for (int L = 0; L < spec_.layers; ++L) {
      out.residual.push_back(cache->blocks[static_cast<std::size_t>(L)].x_out.bottomRows(n));
      out.mlp_acts.push_back(cache->blocks[static_cast<std::size_t>(L)].act.bottomRows(n));
    }
    out.cache = std::move(cache);
    return out;
  }

  static void causal_softmax(Matrix& scores) {
    int s = static_cast<int>(scores.rows());
    for (int p = 0; p < s; ++p) {
      auto seg = scores.row(p).segment(0, p + 1);
      double m = seg.maxCoeff();
      Eigen::RowVectorXd e = (seg.array() - m).exp().matrix();
      seg = e / e.sum();
      if (p + 1 < s) scores.row(p).segment(p + 1, s - p - 1).setZero();
    }
  }

  // ---- WeightGrads / Adam ----

  struct WeightGrads {
    Weights g;  // same shapes, zero-initialized
  };

  WeightGrads make_grads() const {
    WeightGrads wg;
    auto zero_like_m = [](const Matrix& m) { return Matrix::Zero(m.rows(), m.cols()).eval(); };
    auto zero_like_v = [](const Vector& v) { return Vector::Zero(v.size()).eval(); };
    wg.g.embed = zero_like_m(w_.embed);
    wg.g.pos = zero_like_m(w_.pos);
    wg.g.blocks.resize(w_.blocks.size());
    for (std::size_t i = 0; i < w_.blocks.size(); ++i) {
      const auto& b = w_.blocks[i];
      auto& gb = wg.g.blocks[i];
      gb.ln1_g = zero_like_v(b.ln1_g);
      gb.ln1_b = zero_like_v(b.ln1_b);
      gb.wq = zero_like_m(b.wq);
      gb.bq = zero_like_v(b.bq);
      gb.wk = zero_like_m(b.wk);
      gb.bk = zero_like_v(b.bk);
      gb.wv = zero_like_m(b.wv);
      gb.bv = zero_like_v(b.bv);
      gb.wo = zero_like_m(b.wo);
      gb.bo = zero_like_v(b.bo);
      gb.ln2_g = zero_like_v(b.ln2_g);
      gb.ln2_b = zero_like_v(b.ln2_b);
      gb.w1 = zero_like_m(b.w1);
      gb.b1 = zero_like_v(b.b1);
      gb.w2 = zero_like_m(b.w2);
      gb.b2 = zero_like_v(b.b2);
    }
    wg.g.lnf_g = zero_like_v(w_.lnf_g);
    wg.g.lnf_b = zero_like_v(w_.lnf_b);
    wg.g.unembed = zero_like_m(w_.unembed);
    return wg;
  }

  // Applies fn to every tensor in a fixed order (the serialization order).
  template <typename W, typename Fn>
  static void for_each_tensor(W& w, Fn&& fn) {
    auto m = [&](auto& t) { fn(t.data(), static_cast<std::size_t>(t.size())); };
    m(w.embed);
    m(w.pos);
    for (auto& b : w.blocks) {
      m(b.ln1_g);
      m(b.ln1_b);
      m(b.wq);
      m(b.bq);
      m(b.wk);
      m(b.bk);
      m(b.wv);
      m(b.bv);
      m(b.wo);
      m(b.bo);
      m(b.ln2_g);
      m(b.ln2_b);
      m(b.w1);
      m(b.b1);
      m(b.w2);
      m(b.b2);
    }
    m(w.lnf_g);
    m(w.lnf_b);
    m(w.unembed);
  }

  class Adam {
   public:
    Adam(WeightGrads zeros, const TrainOptions& opt)
        : m_(zeros), v_(std::move(zeros)), opt_(opt) {}

    void step(Weights& w, WeightGrads& grads) {
      ++t_;
      double bc1 = 1.0 - std::pow(opt_.beta1, t_);
      double bc2 = 1.0 - std::pow(opt_.beta2, t_);
      auto rw = refs(w);
      auto rg = refs(grads.g);
      auto rm = refs(m_.g);
      auto rv = refs(v_.g);
      for (std::size_t i = 0; i < rw.ptrs.size(); ++i) {
        double* pw = rw.ptrs[i];
        double* pg = rg.ptrs[i];
        double* pm = rm.ptrs[i];
        double* pv = rv.ptrs[i];
        for (std::size_t j = 0; j < rw.sizes[i]; ++j) {
          pm[j] = opt_.beta1 * pm[j] + (1.0 - opt_.beta1) * pg[j];
          pv[j] = opt_.beta2 * pv[j] + (1.0 - opt_.beta2) * pg[j] * pg[j];
          double mhat = pm[j] / bc1;
          double vhat = pv[j] / bc2;
          pw[j] -= opt_.lr * mhat / (std::sqrt(vhat) + opt_.eps);
        }
      }
    }

   private:
    struct TensorRefs {
      std::vector<double*> ptrs;
      std::vector<std::size_t> sizes;
    };

    static TensorRefs refs(Weights& w) {
      TensorRefs r;
      for_each_tensor(w, [&](double* data, std::size_t count) {
        r.ptrs.push_back(data);
        r.sizes.push_back(count);
      });
      return r;
    }

    WeightGrads m_, v_;
    TrainOptions opt_;
    int t_ = 0;
  };

  // ---- Backward ----

  // Backpropagates the seeded output gradients to the relaxed one-hot input.
  // Seeds are given in prompt coordinates; raw row i+1 holds prompt position i
  // and raw row j feeds ce term j. Returns the n x V input gradient; when
  // `wgrads` is non-null also accumulates weight gradients.
  Matrix backward(const detail::ForwardCache& cache, const OutputSeeds& seeds,
                  const TokenSequence& seq, WeightGrads* wgrads) const {
    int s = static_cast<int>(cache.logits_raw.rows());
    int n = s - 1;
    int d = spec_.d_model;
    int dh = d / spec_.heads;
    double scale = 1.0 / std::sqrt(static_cast<double>(dh));

    Matrix d_logits_raw = Matrix::Zero(s, spec_.vocab_size);
    if (seeds.d_logits.size() != 0) {
      if (seeds.d_logits.rows() != n || seeds.d_logits.cols() != spec_.vocab_size)
        throw InputError("d_logits seed has wrong shape");
      d_logits_raw.bottomRows(n) += seeds.d_logits;
    }
    if (!seeds.d_ce_terms.empty()) {
      if (static_cast<int>(seeds.d_ce_terms.size()) != n)
        throw InputError("d_ce_terms seed has wrong length");
      for (int j = 0; j < n; ++j) {
        double wj = seeds.d_ce_terms[static_cast<std::size_t>(j)];
        if (wj == 0.0) continue;
        const auto row = cache.logits_raw.row(j);
        double m = row.maxCoeff();
        Eigen::RowVectorXd p = (row.array() - m).exp().matrix();
        p /= p.sum();
        d_logits_raw.row(j) += wj * p;
        d_logits_raw(j, seq[j]) -= wj;
      }
    }

    Matrix dy = d_logits_raw * w_.unembed.transpose();
    if (wgrads) wgrads->g.unembed += cache.y.transpose() * d_logits_raw;

    Matrix dx;
    if (spec_.layers > 0)
      dx = layer_norm_backward(dy, cache.lnf, w_.lnf_g, wgrads ? &wgrads->g.lnf_g : nullptr,
                               wgrads ? &wgrads->g.lnf_b : nullptr);
    else
      dx = std::move(dy);

    for (int L = spec_.layers - 1; L >= 0; --L) {
      const auto& bc = cache.blocks[static_cast<std::size_t>(L)];
      const auto& wb = w_.blocks[static_cast<std::size_t>(L)];
      auto* gb = wgrads ? &wgrads->g.blocks[static_cast<std::size_t>(L)] : nullptr;

      if (static_cast<int>(seeds.d_residual.size()) > L &&
          seeds.d_residual[static_cast<std::size_t>(L)].size() != 0)
        dx.bottomRows(n) += seeds.d_residual[static_cast<std::size_t>(L)];

      // x_out = x_mid + act * w2 + b2
      Matrix dact = dx * wb.w2.transpose();
      if (static_cast<int>(seeds.d_mlp_acts.size()) > L &&
          seeds.d_mlp_acts[static_cast<std::size_t>(L)].size() != 0)
        dact.bottomRows(n) += seeds.d_mlp_acts[static_cast<std::size_t>(L)];
      if (gb) {
        gb->w2 += bc.act.transpose() * dx;
        gb->b2 += dx.colwise().sum().transpose();
      }
      Matrix dpre = dact.cwiseProduct(
          bc.pre_act.unaryExpr([](double v) { return detail::gelu_grad(v); }));
      Matrix db_norm = dpre * wb.w1.transpose();
      if (gb) {
        gb->w1 += bc.b_norm.transpose() * dpre;
        gb->b1 += dpre.colwise().sum().transpose();
      }
      Matrix dx_mid = dx + layer_norm_backward(db_norm, bc.ln2, wb.ln2_g,
                                               gb ? &gb->ln2_g : nullptr,
                                               gb ? &gb->ln2_b : nullptr);

      // x_mid = x_in + heads_out * wo + bo
      Matrix dheads = dx_mid * wb.wo.transpose();
      if (gb) {
        gb->wo += bc.heads_out.transpose() * dx_mid;
        gb->bo += dx_mid.colwise().sum().transpose();
      }
      Matrix dq = Matrix::Zero(s, d), dk = Matrix::Zero(s, d), dv = Matrix::Zero(s, d);
      for (int t = 0; t < spec_.heads; ++t) {
        const Matrix& P = bc.att[static_cast<std::size_t>(t)];
        auto qh = bc.q.middleCols(t * dh, dh);
        auto kh = bc.k.middleCols(t * dh, dh);
        auto vh = bc.v.middleCols(t * dh, dh);
        Matrix do_h = dheads.middleCols(t * dh, dh);
        Matrix dP = do_h * vh.transpose();
        dv.middleCols(t * dh, dh) = P.transpose() * do_h;
        // softmax backward per row; masked entries have P == 0, so dS == 0
        Matrix dS(s, s);
        for (int p = 0; p < s; ++p) {
          double dot = dP.row(p).cwiseProduct(P.row(p)).sum();
          dS.row(p) = P.row(p).cwiseProduct((dP.row(p).array() - dot).matrix());
        }
        dq.middleCols(t * dh, dh) = (dS * kh) * scale;
        dk.middleCols(t * dh, dh) = (dS.transpose() * qh) * scale;
      }
      Matrix da = dq * wb.wq.transpose() + dk * wb.wk.transpose() + dv * wb.wv.transpose();
      if (gb) {
        gb->wq += bc.a.transpose() * dq;
        gb->bq += dq.colwise().sum().transpose();
        gb->wk += bc.a.transpose() * dk;
        gb->bk += dk.colwise().sum().transpose();
        gb->wv += bc.a.transpose() * dv;
        gb->bv += dv.colwise().sum().transpose();
      }
      dx = dx_mid + layer_norm_backward(da, bc.ln1, wb.ln1_g, gb ? &gb->ln1_g : nullptr,
                                        gb ? &gb->ln1_b : nullptr);
    }

    // x0 row p = input_row_p * embed + pos row p
    if (wgrads) {
      wgrads->g.pos.topRows(s) += dx;
      if (cache.relaxed_rows.size() != 0) {
        wgrads->g.embed += cache.relaxed_rows.transpose() * dx.bottomRows(n);
        wgrads->g.embed.row(bos_id_) += dx.row(0);
      } else {
        for (int p = 0; p < s; ++p)
          wgrads->g.embed.row(cache.raw_ids[static_cast<std::size_t>(p)]) += dx.row(p);
      }
    }
    return dx.bottomRows(n) * w_.embed.transpose();
  }

  static void write_u32(std::ofstream& out, uint32_t v) {
    unsigned char buf[4] = {static_cast<unsigned char>(v & 0xff),
                            static_cast<unsigned char>((v >> 8) & 0xff),
                            static_cast<unsigned char>((v >> 16) & 0xff),
                            static_cast<unsigned char>((v >> 24) & 0xff)};
    out.write(reinterpret_cast<const char*>(buf), 4);
  }

  static uint32_t read_u32(std::ifstream& in) {
    unsigned char buf[4];
    in.read(reinterpret_cast<char*>(buf), 4);
    return static_cast<uint32_t>(buf[0]) | (static_cast<uint32_t>(buf[1]) << 8) |
           (static_cast<uint32_t>(buf[2]) << 16) | (static_cast<uint32_t>(buf[3]) << 24);
  }
};

// The model surface the engine relies on; the toy transformer is the one
// backend built here.
template <typename M>
concept LanguageModel = requires(const M& m, const TokenSequence& seq, const ModelOutputs& out,
                                 const OutputSeeds& seeds) {
  { m.vocab_size() } -> std::convertible_to<int>;
  { m.max_prompt_len() } -> std::convertible_to<int>;
  { m.forward(seq) } -> std::same_as<ModelOutputs>;
  { m.backprop_to_onehot(out, seeds, seq) } -> std::same_as<Matrix>;
};

// Invented plumbing: fit the reference model on a corpus so self-cross-entropy
// measures fluency at desk scale.
inline ToyTransformer train_toy(const ToyTransformerSpec& spec, const std::vector<TokenId>& corpus,
                                int steps, TrainOptions opt = {}) {
  ToyTransformer model(spec);
  model.train(corpus, steps, opt);
  return model;
}

}  // namespace epo
