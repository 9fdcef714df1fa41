#pragma once

#include <algorithm>
#include <cstdio>
#include <optional>
#include <string>
#include <vector>

#include "epo/common.hpp"
#include "epo/core.hpp"
#include "epo/model.hpp"
#include "epo/objectives.hpp"

namespace epo {

// ----------------------------------------------------------------------------
// The evolutionary loop: per-slot gradient-guided single-token mutations,
// selection with replacement under each lambda, periodic restarts, cumulative
// Pareto archive. GCG is the M=1, lambda={0}, no-restart special case.
// ----------------------------------------------------------------------------

template <LanguageModel M>
struct Scorer {
  const M* feature_model = nullptr;
  const M* fluency_model = nullptr;  // may equal feature_model
  FeatureSpec feature;

  ScoredPrompt score(const TokenSequence& seq) const {
    ModelOutputs out = feature_model->forward(seq);
    double f = eval_feature(feature, out);
    std::vector<double> ce = (feature_model == fluency_model)
                                 ? ce_terms_from(out, seq)
                                 : ce_terms_from(fluency_model->forward(seq), seq);
    return ScoredPrompt(seq, f, std::move(ce));
  }

  // Gradient of L_lambda with respect to the one-hot prompt encoding. With a
  // shared model this is one backward pass; with distinct models the feature
  // and fluency gradients propagate through their own models and add.
  Matrix grad_combined(const TokenSequence& seq, double lambda) const {
    if (feature_model == fluency_model)
      return feature_model->grad_onehot(seq, make_epo_objective(feature, lambda)).grad;
    Matrix g = feature_model->grad_onehot(seq, make_feature_objective(feature)).grad;
    if (lambda != 0.0) {
      ModelOutputs out = fluency_model->forward(seq);
      OutputSeeds seeds;
      seeds.d_ce_terms.assign(static_cast<std::size_t>(seq.length()),
                              -lambda / static_cast<double>(seq.length()));
      g += fluency_model->backprop_to_onehot(out, seeds, seq);
    }
    return g;
  }
};

struct Population {
  std::vector<ScoredPrompt> members;  // slot i is selected under lambda_i
  int iteration = 0;
};

struct SlotRecord {
  double lambda = 0.0;
  double feature = 0.0;
  double mean_ce = 0.0;
  std::string text;
};

struct IterationRecord {
  int iter = 0;
  std::vector<SlotRecord> slots;
  bool restart = false;
  double lambda_r = 0.0;  // valid when restart
};

struct RunOptions {
  int workers = 1;
  bool record_pools = false;  // keep per-iteration selection pools (oracle tests)
  bool keep_history = true;
};

struct RunResult {
  ParetoArchive archive{true};
  std::vector<IterationRecord> log;  // exactly T entries on a completed run
  Population final_population;
  std::optional<std::string> aborted;  // set when the run stopped early; archive holds progress

  // record_pools only:
  std::vector<std::vector<ScoredPrompt>> pools;             // selection pool per iteration
  std::vector<std::optional<Population>> pre_restart;       // population before each restart
};

// ----------------------------------------------------------------------------
// Initialization: either M copies of a user prompt or M independent uniform
// prompts over the non-rejected vocabulary. Deterministic given config.seed.
// ----------------------------------------------------------------------------

inline std::vector<TokenSequence> init_population(const EpoConfig& config, const Vocabulary& vocab,
                                                  const std::optional<TokenSequence>& init = {}) {
  config.validate();
  const auto rejected = rejected_token_mask(vocab, config.reject_substrings);
  if (init) {
    if (init->length() != config.n) throw InputError("init prompt length differs from config n");
    for (TokenId id : init->ids)
      if (id < 0 || id >= vocab.size()) throw InputError("init token id out of range");
    for (TokenId id : init->ids)
      if (rejected[static_cast<std::size_t>(id)])
        throw InputError("init prompt contains a rejected token");
    if (prompt_rejected(*init, vocab, config.reject_substrings))
      throw InputError("init prompt text matches a reject pattern");
    return std::vector<TokenSequence>(static_cast<std::size_t>(config.M), *init);
  }

  std::vector<TokenId> allowed;
  for (int v = 0; v < vocab.size(); ++v)
    if (!rejected[static_cast<std::size_t>(v)]) allowed.push_back(v);
  if (allowed.empty()) throw ConfigError("reject patterns exclude the whole vocabulary");

  std::vector<TokenSequence> out;
  out.reserve(static_cast<std::size_t>(config.M));
  for (int m = 0; m < config.M; ++m) {
    TokenSequence seq;
    for (uint64_t attempt = 0;; ++attempt) {
      if (attempt >= 1000)
        throw EngineError("could not draw an initial prompt clear of reject patterns");
      CounterRng rng{config.seed, rng_tag::init, static_cast<uint64_t>(m), attempt};
      std::vector<TokenId> ids(static_cast<std::size_t>(config.n));
      for (auto& id : ids) id = allowed[rng.next_below(allowed.size())];
      seq = TokenSequence(std::move(ids));
      if (!prompt_rejected(seq, vocab, config.reject_substrings)) break;
    }
    out.push_back(std::move(seq));
  }
  return out;
}

// ----------------------------------------------------------------------------
// Mutation: r children per member, each differing from the parent in exactly
// one uniformly chosen position, with the replacement drawn uniformly from the
// top-k gradient-ranked tokens at that position (current token and rejected
// tokens excluded before ranking).
// ----------------------------------------------------------------------------

namespace detail_engine {

inline std::vector<std::vector<TokenId>> topk_candidates(const TokenSequence& parent,
                                                         const Matrix& grad, int k,
                                                         GradRanking ranking,
                                                         const std::vector<bool>& rejected) {
  int n = parent.length();
  int vocab = static_cast<int>(grad.cols());
  std::vector<std::vector<TokenId>> topk(static_cast<std::size_t>(n));
  std::vector<TokenId> pool;
  pool.reserve(static_cast<std::size_t>(vocab));
  for (int j = 0; j < n; ++j) {
    pool.clear();
    for (TokenId v = 0; v < vocab; ++v) {
      if (v == parent[j]) continue;
      if (rejected[static_cast<std::size_t>(v)]) continue;
      pool.push_back(v);
    }
    auto score = [&](TokenId v) {
      double g = grad(j, v);
      return ranking == GradRanking::abs ? std::abs(g) : g;
    };
    int keep = std::min<int>(k, static_cast<int>(pool.size()));
    std::partial_sort(pool.begin(), pool.begin() + keep, pool.end(), [&](TokenId a, TokenId b) {
      double sa = score(a), sb = score(b);
      if (sa != sb) return sa > sb;
      return a < b;
    });
    topk[static_cast<std::size_t>(j)].assign(pool.begin(), pool.begin() + keep);
  }
  return topk;
}

}  // namespace detail_engine

inline std::vector<TokenSequence> propose_children(const TokenSequence& parent, const Matrix& grad,
                                                   const EpoConfig& config,
                                                   const std::vector<bool>& rejected,
                                                   uint64_t iteration, int slot) {
  if (grad.rows() != parent.length()) throw EngineError("gradient shape mismatch");
  auto topk = detail_engine::topk_candidates(parent, grad, config.k, config.grad_ranking, rejected);
  for (const auto& c : topk)
    if (c.empty()) throw EngineError("no admissible replacement tokens at some position");

  std::vector<TokenSequence> children;
  children.reserve(static_cast<std::size_t>(config.r));
  for (int c = 0; c < config.r; ++c) {
    CounterRng rng{config.seed, rng_tag::child, iteration, static_cast<uint64_t>(slot),
                   static_cast<uint64_t>(c)};
    int j = static_cast<int>(rng.next_below(static_cast<uint64_t>(parent.length())));
    const auto& cands = topk[static_cast<std::size_t>(j)];
    TokenId pick = cands[rng.next_below(cands.size())];
    TokenSequence child = parent;
    child[j] = pick;
    children.push_back(std::move(child));
  }
  return children;
}

// ----------------------------------------------------------------------------
// Selection with replacement: slot i takes the pool argmax of L_{lambda_i};
// one pool prompt may fill several slots. Ties break toward lower mean_ce,
// then lexicographically smaller token ids.
// ----------------------------------------------------------------------------

inline int select_slot(const std::vector<ScoredPrompt>& pool, double lambda) {
  int best = 0;
  double best_value = combined_objective(pool[0], lambda);
  for (int i = 1; i < static_cast<int>(pool.size()); ++i) {
    double value = combined_objective(pool[static_cast<std::size_t>(i)], lambda);
    const auto& cand = pool[static_cast<std::size_t>(i)];
    const auto& cur = pool[static_cast<std::size_t>(best)];
    if (value > best_value ||
        (value == best_value &&
         (cand.mean_ce < cur.mean_ce || (cand.mean_ce == cur.mean_ce && cand.seq < cur.seq)))) {
      best = i;
      best_value = value;
    }
  }
  return best;
}

inline Population select(const std::vector<ScoredPrompt>& pool, const LambdaGrid& grid,
                         int iteration) {
  if (pool.empty()) throw EngineError("selection pool is empty after reject filtering");
  Population next;
  next.iteration = iteration;
  next.members.reserve(static_cast<std::size_t>(grid.size()));
  for (int i = 0; i < grid.size(); ++i)
    next.members.push_back(pool[static_cast<std::size_t>(select_slot(pool, grid[i]))]);
  return next;
}

// ----------------------------------------------------------------------------
// Restart: draw lambda_r uniformly (linear scale) in [lambda_r_min,
// lambda_r_max], keep only the member that maximizes L_{lambda_r}, and refill
// every slot with copies of it. The archive is untouched.
// ----------------------------------------------------------------------------

struct RestartEvent {
  double lambda_r = 0.0;
  int kept_slot = 0;
};

inline RestartEvent restart(Population& pop, const EpoConfig& config, uint64_t iteration) {
  CounterRng rng{config.seed, rng_tag::restart, iteration};
  double lambda_r = rng.uniform(config.lambda_r_min, config.lambda_r_max);
  int keep = select_slot(pop.members, lambda_r);
  ScoredPrompt kept = pop.members[static_cast<std::size_t>(keep)];
  for (auto& member : pop.members) member = kept;
  return RestartEvent{lambda_r, keep};
}

// ----------------------------------------------------------------------------
// The full run
// ----------------------------------------------------------------------------

template <LanguageModel M>
RunResult run(const EpoConfig& config, const Vocabulary& vocab, const M& feature_model,
              const M& fluency_model, const FeatureSpec& feature_in,
              const std::optional<TokenSequence>& init = {}, const RunOptions& opts = {}) {
  config.validate();
  if (vocab.size() != feature_model.vocab_size() || vocab.size() != fluency_model.vocab_size())
    throw ConfigError("feature and fluency models must share the vocabulary");
  if (config.n > feature_model.max_prompt_len() || config.n > fluency_model.max_prompt_len())
    throw ConfigError("prompt length n exceeds a model's n_max");

  const FeatureSpec feature = feature_in.resolved(config.position_reduction);
  const LambdaGrid grid = config.grid();
  const auto rejected = rejected_token_mask(vocab, config.reject_substrings);
  int rejected_count = static_cast<int>(std::count(rejected.begin(), rejected.end(), true));
  if (config.k > vocab.size() - rejected_count - 1)
    std::fprintf(stderr, "epo: warning: k=%d exceeds the %d admissible replacements; clamping\n",
                 config.k, vocab.size() - rejected_count - 1);

  Scorer<M> scorer{&feature_model, &fluency_model, feature};
  RunResult result;
  result.archive = ParetoArchive(opts.keep_history);

  auto score_all = [&](const std::vector<TokenSequence>& seqs) {
    std::vector<ScoredPrompt> scored(seqs.size());
    parallel_for(seqs.size(), opts.workers,
                 [&](std::size_t i) { scored[i] = scorer.score(seqs[i]); });
    return scored;
  };

  // Iteration 0: the initial population.
  std::vector<TokenSequence> init_seqs = init_population(config, vocab, init);
  Population pop;
  pop.iteration = 0;
  pop.members = score_all(init_seqs);
  for (const auto& sp : pop.members) result.archive.insert(sp, 0);

  result.log.reserve(static_cast<std::size_t>(config.T));
  try {
    for (int iter = 1; iter <= config.T; ++iter) {
      // Each slot's gradient is taken on the full objective under its own
      // lambda, fluency term included.
      std::vector<Matrix> grads(pop.members.size());
      parallel_for(pop.members.size(), opts.workers, [&](std::size_t m) {
        grads[m] = scorer.grad_combined(pop.members[m].seq, grid[static_cast<int>(m)]);
      });

      std::vector<TokenSequence> children;
      children.reserve(static_cast<std::size_t>(config.M) * static_cast<std::size_t>(config.r));
      for (int m = 0; m < config.M; ++m) {
        auto kids = propose_children(pop.members[static_cast<std::size_t>(m)].seq,
                                     grads[static_cast<std::size_t>(m)], config, rejected,
                                     static_cast<uint64_t>(iter), m);
        for (auto& kid : kids) children.push_back(std::move(kid));
      }

      // Safety net: single-token substitutions can still assemble a rejected
      // pattern across token boundaries.
      std::erase_if(children, [&](const TokenSequence& c) {
        return prompt_rejected(c, vocab, config.reject_substrings);
      });

      std::vector<ScoredPrompt> pool = score_all(children);
      for (const auto& sp : pool) result.archive.insert(sp, iter);
      if (config.include_parents)
        for (const auto& parent : pop.members) pool.push_back(parent);

      pop = select(pool, grid, iter);
      if (opts.record_pools) result.pools.push_back(pool);

      IterationRecord rec;
      rec.iter = iter;
      bool do_restart = config.T_restart > 0 && iter % config.T_restart == 0;
      if (opts.record_pools)
        result.pre_restart.push_back(do_restart ? std::optional<Population>(pop) : std::nullopt);
      if (do_restart) {
        RestartEvent ev = restart(pop, config, static_cast<uint64_t>(iter));
        rec.restart = true;
        rec.lambda_r = ev.lambda_r;
      }

      rec.slots.reserve(pop.members.size());
      for (std::size_t m = 0; m < pop.members.size(); ++m) {
        const auto& sp = pop.members[m];
        rec.slots.push_back(SlotRecord{grid[static_cast<int>(m)], sp.feature, sp.mean_ce,
                                       vocab.decode(sp.seq)});
      }
      result.log.push_back(std::move(rec));
    }
  } catch (const Error& e) {
    result.aborted = e.what();
  }

  result.final_population = std::move(pop);
  return result;
}

}  // namespace epo
