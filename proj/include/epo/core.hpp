#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <optional>
#include <string>
#include <unordered_map>
#include <vector>

#include <nlohmann/json.hpp>

#include "epo/common.hpp"

namespace epo {

using TokenId = int32_t;

// ----------------------------------------------------------------------------
// Vocabulary: dense token ids in [0, V) with unique display strings.
// `sep` is inserted between tokens when a whole sequence is decoded to text
// ("" for byte-level vocabularies, " " for word-level).
// ----------------------------------------------------------------------------

class Vocabulary {
 public:
  Vocabulary(std::vector<std::string> tokens, TokenId bos_id, std::string sep)
      : tokens_(std::move(tokens)), bos_id_(bos_id), sep_(std::move(sep)) {
    if (tokens_.empty()) throw ConfigError("vocabulary must be non-empty");
    if (bos_id_ < 0 || bos_id_ >= static_cast<TokenId>(tokens_.size()))
      throw ConfigError("bos_id out of range");
    for (std::size_t i = 0; i < tokens_.size(); ++i) {
      auto [it, inserted] = index_.emplace(tokens_[i], static_cast<TokenId>(i));
      if (!inserted)
        throw ConfigError("duplicate token string in vocabulary: '" + tokens_[i] + "'");
    }
  }

  int size() const { return static_cast<int>(tokens_.size()); }
  TokenId bos_id() const { return bos_id_; }
  const std::string& sep() const { return sep_; }
  const std::vector<std::string>& tokens() const { return tokens_; }

  const std::string& token(TokenId id) const {
    if (id < 0 || id >= size()) throw InputError("token id out of range");
    return tokens_[static_cast<std::size_t>(id)];
  }

  std::optional<TokenId> encode(const std::string& token) const {
    auto it = index_.find(token);
    if (it == index_.end()) return std::nullopt;
    return it->second;
  }

  template <typename Seq>
  std::string decode(const Seq& ids) const {
    std::string out;
    bool first = true;
    for (TokenId id : ids) {
      if (!first) out += sep_;
      out += token(id);
      first = false;
    }
    return out;
  }

 private:
  std::vector<std::string> tokens_;
  std::unordered_map<std::string, TokenId> index_;
  TokenId bos_id_;
  std::string sep_;
};

// ----------------------------------------------------------------------------
// TokenSequence: fixed-length prompt; the search variable.
// ----------------------------------------------------------------------------

struct TokenSequence {
  std::vector<TokenId> ids;

  TokenSequence() = default;
  explicit TokenSequence(std::vector<TokenId> v) : ids(std::move(v)) {}

  int length() const { return static_cast<int>(ids.size()); }
  TokenId& operator[](int i) { return ids[static_cast<std::size_t>(i)]; }
  TokenId operator[](int i) const { return ids[static_cast<std::size_t>(i)]; }

  bool operator==(const TokenSequence& o) const { return ids == o.ids; }
  bool operator<(const TokenSequence& o) const { return ids < o.ids; }

  auto begin() const { return ids.begin(); }
  auto end() const { return ids.end(); }
};

// ----------------------------------------------------------------------------
// ScoredPrompt: prompt plus feature value and per-position cross-entropy
// (nats). mean_ce and perplexity are derived on construction.
// ----------------------------------------------------------------------------

struct ScoredPrompt {
  TokenSequence seq;
  double feature = 0.0;
  std::vector<double> ce_terms;
  double mean_ce = 0.0;
  double perplexity = 1.0;

  ScoredPrompt() = default;
  ScoredPrompt(TokenSequence s, double f, std::vector<double> terms)
      : seq(std::move(s)), feature(f), ce_terms(std::move(terms)) {
    double total = 0.0;
    for (double t : ce_terms) total += t;
    mean_ce = ce_terms.empty() ? 0.0 : total / static_cast<double>(ce_terms.size());
    perplexity = std::exp(mean_ce);
  }
};

// L_lambda(t) = f(t) - lambda * mean_ce(t).
inline double combined_objective(const ScoredPrompt& sp, double lambda) {
  return sp.feature - lambda * sp.mean_ce;
}

// ----------------------------------------------------------------------------
// LambdaGrid: the M regularization strengths.
// ----------------------------------------------------------------------------

struct LambdaGrid {
  std::vector<double> lambdas;

  int size() const { return static_cast<int>(lambdas.size()); }
  double operator[](int i) const { return lambdas[static_cast<std::size_t>(i)]; }

  // Explicit grid. Values must be non-negative and strictly increasing.
  // lambda = 0 is admitted here (a one-slot {0} grid is the GCG special case)
  // even though lambda_grid() only manufactures positive geometric grids.
  static LambdaGrid from_values(std::vector<double> values) {
    if (values.empty()) throw ConfigError("lambda grid must be non-empty");
    for (std::size_t i = 0; i < values.size(); ++i) {
      if (values[i] < 0.0 || !std::isfinite(values[i]))
        throw ConfigError("lambda grid values must be finite and non-negative");
      if (i > 0 && values[i] <= values[i - 1])
        throw ConfigError("lambda grid values must be strictly increasing");
    }
    return LambdaGrid{std::move(values)};
  }
};

// Geometric grid: log(lambda_i) uniformly spaced between log(lo) and log(hi).
inline LambdaGrid lambda_grid(int m, double lo, double hi) {
  if (m < 1) throw ConfigError("lambda grid size must be >= 1");
  if (!(lo > 0.0) || !(hi > 0.0)) throw ConfigError("lambda grid endpoints must be positive");
  if (lo > hi) throw ConfigError("lambda grid lo must be <= hi");
  if (m == 1) return LambdaGrid{{lo}};
  if (lo == hi) throw ConfigError("lambda grid with M >= 2 needs lo < hi");
  std::vector<double> values(static_cast<std::size_t>(m));
  double log_lo = std::log(lo);
  double log_hi = std::log(hi);
  for (int i = 0; i < m; ++i) {
    double t = static_cast<double>(i) / static_cast<double>(m - 1);
    values[static_cast<std::size_t>(i)] = std::exp(log_lo + t * (log_hi - log_lo));
  }
  values.front() = lo;  // exact endpoints
  values.back() = hi;
  return LambdaGrid{std::move(values)};
}

// ----------------------------------------------------------------------------
// Pareto archive over (higher feature, lower mean_ce).
// ----------------------------------------------------------------------------

struct FrontierPoint {
  double feature = 0.0;
  double mean_ce = 0.0;
  TokenSequence seq;
  int iteration = 0;
};

// a weakly dominates b: at least as good in both coordinates. Equal points
// weakly dominate each other; insertion treats that as "already covered".
template <typename A, typename B>
inline bool weakly_dominates(const A& a, const B& b) {
  return a.feature >= b.feature && a.mean_ce <= b.mean_ce;
}

template <typename A, typename B>
inline bool strictly_dominates(const A& a, const B& b) {
  return weakly_dominates(a, b) && (a.feature > b.feature || a.mean_ce < b.mean_ce);
}

// Shared insertion rule for any point type with .feature and .mean_ce.
// Returns true iff the point joined the frontier.
template <typename P>
inline bool pareto_insert(std::vector<P>& frontier, const P& p) {
  for (const P& q : frontier) {
    if (weakly_dominates(q, p)) return false;
  }
  std::erase_if(frontier, [&](const P& q) { return weakly_dominates(p, q); });
  frontier.push_back(p);
  return true;
}

class ParetoArchive {
 public:
  struct HistoryEntry {
    ScoredPrompt prompt;
    int iteration = 0;
  };

  explicit ParetoArchive(bool keep_history = true) : keep_history_(keep_history) {}

  // Inserts iff non-dominated; drops points the new one dominates; history is
  // always appended. Returns true iff the prompt joined the frontier.
  bool insert(const ScoredPrompt& sp, int iteration) {
    if (keep_history_) history_.push_back(HistoryEntry{sp, iteration});
    FrontierPoint p{sp.feature, sp.mean_ce, sp.seq, iteration};
    return pareto_insert(points_, p);
  }

  const std::vector<FrontierPoint>& points() const { return points_; }
  const std::vector<HistoryEntry>& history() const { return history_; }
  bool keeps_history() const { return keep_history_; }

  double best_combined(double lambda) const {
    double best = -std::numeric_limits<double>::infinity();
    for (const FrontierPoint& p : points_)
      best = std::max(best, p.feature - lambda * p.mean_ce);
    return best;
  }

  // Frontier in a deterministic export order: feature ascending, then mean_ce.
  std::vector<FrontierPoint> sorted_points() const {
    std::vector<FrontierPoint> out = points_;
    std::sort(out.begin(), out.end(), [](const FrontierPoint& a, const FrontierPoint& b) {
      if (a.feature != b.feature) return a.feature < b.feature;
      if (a.mean_ce != b.mean_ce) return a.mean_ce < b.mean_ce;
      return a.seq < b.seq;
    });
    return out;
  }

 private:
  std::vector<FrontierPoint> points_;
  std::vector<HistoryEntry> history_;
  bool keep_history_ = true;
};

// ----------------------------------------------------------------------------
// Run configuration. Defaults follow the reference hyperparameter table
// (T=300, M=8, r=32, k=512, restart window [0.667, 6.0] every 30 iterations,
// 12-token prompts, lambda grid endpoints 0.1 and 10).
// ----------------------------------------------------------------------------

enum class Reduction { max, last, mean };

inline const char* to_string(Reduction r) {
  switch (r) {
    case Reduction::max: return "max";
    case Reduction::last: return "last";
    case Reduction::mean: return "mean";
  }
  return "max";
}

inline Reduction reduction_from_string(const std::string& s) {
  if (s == "max") return Reduction::max;
  if (s == "last") return Reduction::last;
  if (s == "mean") return Reduction::mean;
  throw ConfigError("unknown position_reduction: '" + s + "'");
}

enum class GradRanking { signed_ascent, abs };

inline const char* to_string(GradRanking g) {
  return g == GradRanking::signed_ascent ? "signed" : "abs";
}

inline GradRanking grad_ranking_from_string(const std::string& s) {
  if (s == "signed") return GradRanking::signed_ascent;
  if (s == "abs") return GradRanking::abs;
  throw ConfigError("unknown grad_ranking: '" + s + "'");
}

struct EpoConfig {
  int T = 300;
  int M = 8;
  int r = 32;
  int k = 512;
  double lambda_lo = 0.1;
  double lambda_hi = 10.0;
  double lambda_r_min = 0.667;
  double lambda_r_max = 6.0;
  int T_restart = 30;  // 0 disables restarts
  int n = 12;
  uint64_t seed = 0;
  std::vector<std::string> reject_substrings;
  std::optional<Reduction> position_reduction;  // default reduction for features
  bool include_parents = false;
  GradRanking grad_ranking = GradRanking::signed_ascent;

  void validate() const {
    if (T < 0) throw ConfigError("T must be >= 0");
    if (M < 1) throw ConfigError("M must be >= 1");
    if (r < 1) throw ConfigError("r must be >= 1");
    if (k < 1) throw ConfigError("k must be >= 1");
    if (n < 1) throw ConfigError("n must be >= 1");
    if (T_restart < 0) throw ConfigError("T_restart must be >= 0 (0 disables restarts)");
    bool gcg_grid = (M == 1 && lambda_lo == 0.0 && lambda_hi == 0.0);
    if (!gcg_grid) {
      if (!(lambda_lo > 0.0) || !(lambda_hi > 0.0))
        throw ConfigError("lambda_lo/lambda_hi must be positive (or both 0 with M=1)");
      if (lambda_lo > lambda_hi) throw ConfigError("lambda_lo must be <= lambda_hi");
      if (M >= 2 && lambda_lo == lambda_hi)
        throw ConfigError("lambda_lo must be < lambda_hi when M >= 2");
    }
    if (!(lambda_r_min >= 0.0) || !(lambda_r_max >= 0.0) || lambda_r_min > lambda_r_max)
      throw ConfigError("restart range requires 0 <= lambda_r_min <= lambda_r_max");
  }

  LambdaGrid grid() const {
    if (M == 1 && lambda_lo == 0.0 && lambda_hi == 0.0) return LambdaGrid::from_values({0.0});
    return lambda_grid(M, lambda_lo, lambda_hi);
  }

  nlohmann::json to_json() const {
    nlohmann::json j{{"T", T},
                     {"M", M},
                     {"r", r},
                     {"k", k},
                     {"lambda_lo", lambda_lo},
                     {"lambda_hi", lambda_hi},
                     {"lambda_r_min", lambda_r_min},
                     {"lambda_r_max", lambda_r_max},
                     {"T_restart", T_restart},
                     {"n", n},
                     {"seed", seed},
                     {"reject_substrings", reject_substrings},
                     {"include_parents", include_parents},
                     {"grad_ranking", to_string(grad_ranking)}};
    if (position_reduction) j["position_reduction"] = to_string(*position_reduction);
    return j;
  }

  // Loads from a run-config document. Unknown keys are an error so that a
  // typo'd hyperparameter name cannot silently fall back to its default.
  // "feature" is the one key left for the caller (the feature spec lives in
  // the same document).
  static EpoConfig from_json(const nlohmann::json& j) {
    if (!j.is_object()) throw ConfigError("config must be a JSON object");
    EpoConfig c;
    for (const auto& [key, value] : j.items()) {
      try {
        if (key == "T") c.T = value.get<int>();
        else if (key == "M") c.M = value.get<int>();
        else if (key == "r") c.r = value.get<int>();
        else if (key == "k") c.k = value.get<int>();
        else if (key == "lambda_lo") c.lambda_lo = value.get<double>();
        else if (key == "lambda_hi") c.lambda_hi = value.get<double>();
        else if (key == "lambda_r_min") c.lambda_r_min = value.get<double>();
        else if (key == "lambda_r_max") c.lambda_r_max = value.get<double>();
        else if (key == "T_restart") c.T_restart = value.get<int>();
        else if (key == "n") c.n = value.get<int>();
        else if (key == "seed") c.seed = value.get<uint64_t>();
        else if (key == "reject_substrings") c.reject_substrings = value.get<std::vector<std::string>>();
        else if (key == "position_reduction") c.position_reduction = reduction_from_string(value.get<std::string>());
        else if (key == "include_parents") c.include_parents = value.get<bool>();
        else if (key == "grad_ranking") c.grad_ranking = grad_ranking_from_string(value.get<std::string>());
        else if (key == "feature") continue;
        else throw ConfigError("unknown config key: '" + key + "'");
      } catch (const nlohmann::json::exception& e) {
        throw ConfigError("bad value for config key '" + key + "': " + e.what());
      }
    }
    c.validate();
    return c;
  }
};

}  // namespace epo
