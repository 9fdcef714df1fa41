#pragma once

#include <algorithm>
#include <cmath>
#include <string>
#include <vector>

#include "epo/common.hpp"
#include "epo/core.hpp"
#include "epo/epo.hpp"
#include "epo/model.hpp"
#include "epo/objectives.hpp"

namespace epo {

// ----------------------------------------------------------------------------
// The two comparison methods: uniform-random prompts and corpus scanning,
// plus the z-score standardization used to compare them with dreaming.
// ----------------------------------------------------------------------------

struct RandomBaselineStats {
  double mu_random = 0.0;
  double sigma_random = 0.0;  // sample standard deviation (n-1 denominator)
  int n_samples = 0;
  double max_alignment = 0.0;
};

// Two-pass mean / sample standard deviation / max.
inline RandomBaselineStats compute_stats(const std::vector<double>& values) {
  if (values.size() < 2) throw InputError("baseline statistics need at least 2 samples");
  RandomBaselineStats s;
  s.n_samples = static_cast<int>(values.size());
  double total = 0.0;
  s.max_alignment = values[0];
  for (double v : values) {
    total += v;
    s.max_alignment = std::max(s.max_alignment, v);
  }
  s.mu_random = total / static_cast<double>(values.size());
  double ss = 0.0;
  for (double v : values) ss += (v - s.mu_random) * (v - s.mu_random);
  s.sigma_random = std::sqrt(ss / static_cast<double>(values.size() - 1));
  return s;
}

// Feature statistics over n_samples i.i.d. uniform prompts of length n.
// When `samples_out` is given, the per-sample feature values are logged there
// in draw order.
template <LanguageModel M>
RandomBaselineStats random_baseline(const M& model, const FeatureSpec& feature,
                                    const Vocabulary& vocab, int n, int n_samples, uint64_t seed,
                                    int workers = 1, std::vector<double>* samples_out = nullptr) {
  if (n_samples < 2) throw InputError("random baseline needs n_samples >= 2");
  if (n < 1 || n > model.max_prompt_len()) throw InputError("prompt length out of range");
  std::vector<double> values(static_cast<std::size_t>(n_samples));
  parallel_for(values.size(), workers, [&](std::size_t i) {
    CounterRng rng{seed, rng_tag::sample, static_cast<uint64_t>(i)};
    std::vector<TokenId> ids(static_cast<std::size_t>(n));
    for (auto& id : ids) id = static_cast<TokenId>(rng.next_below(static_cast<uint64_t>(vocab.size())));
    values[i] = eval_feature(feature, model.forward(TokenSequence(std::move(ids))));
  });
  if (samples_out) *samples_out = values;
  return compute_stats(values);
}

struct ScanHit {
  double feature = 0.0;
  double mean_ce = 0.0;
  std::string text;
  std::size_t start = 0;  // window offset in the corpus
};

struct CorpusScanResult {
  std::vector<ScanHit> top;  // descending feature; ties by earliest window
};

// Scores every length-n window (given stride) and keeps the top_n by feature.
template <LanguageModel M>
CorpusScanResult corpus_scan(const M& feature_model, const M& fluency_model,
                             const FeatureSpec& feature, const Vocabulary& vocab,
                             const std::vector<TokenId>& corpus, int n, int top_n, int stride = 1,
                             int workers = 1) {
  if (n < 1) throw InputError("window length must be >= 1");
  if (static_cast<std::size_t>(n) > corpus.size())
    throw InputError("corpus is shorter than the window length");
  if (top_n < 1) throw InputError("top_n must be >= 1");
  if (stride < 1) throw InputError("stride must be >= 1");

  std::vector<std::size_t> starts;
  for (std::size_t s = 0; s + static_cast<std::size_t>(n) <= corpus.size();
       s += static_cast<std::size_t>(stride))
    starts.push_back(s);

  Scorer<M> scorer{&feature_model, &fluency_model, feature};
  std::vector<ScoredPrompt> scored(starts.size());
  parallel_for(starts.size(), workers, [&](std::size_t i) {
    std::vector<TokenId> ids(corpus.begin() + static_cast<std::ptrdiff_t>(starts[i]),
                             corpus.begin() + static_cast<std::ptrdiff_t>(starts[i]) + n);
    scored[i] = scorer.score(TokenSequence(std::move(ids)));
  });

  std::vector<std::size_t> order(starts.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
  std::size_t keep = std::min<std::size_t>(static_cast<std::size_t>(top_n), order.size());
  std::partial_sort(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(keep), order.end(),
                    [&](std::size_t a, std::size_t b) {
                      if (scored[a].feature != scored[b].feature)
                        return scored[a].feature > scored[b].feature;
                      return starts[a] < starts[b];
                    });

  CorpusScanResult result;
  result.top.reserve(keep);
  for (std::size_t i = 0; i < keep; ++i) {
    const auto& sp = scored[order[i]];
    result.top.push_back(ScanHit{sp.feature, sp.mean_ce, vocab.decode(sp.seq), starts[order[i]]});
  }
  return result;
}

// Standard deviations above the random-prompt mean.
inline double zscore(double a, const RandomBaselineStats& stats) {
  if (!(stats.sigma_random > 0.0))
    throw DegenerateBaselineError("sigma_random is zero; the baseline feature is constant");
  return (a - stats.mu_random) / stats.sigma_random;
}

}  // namespace epo
