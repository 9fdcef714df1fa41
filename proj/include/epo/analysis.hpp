#pragma once

#include <algorithm>
#include <cmath>
#include <limits>
#include <optional>
#include <string>
#include <vector>

#include "epo/baselines.hpp"
#include "epo/common.hpp"
#include "epo/core.hpp"
#include "epo/epo.hpp"

namespace epo {

// ----------------------------------------------------------------------------
// Post-run analytics over exported run logs: slack curves, frontier evolution,
// layer sweeps. Everything here is a pure function of history records so the
// same numbers can be regenerated offline from the JSONL exports.
// ----------------------------------------------------------------------------

struct HistoryRecord {
  double feature = 0.0;
  double mean_ce = 0.0;
  int iteration = 0;
  std::string text;
};

inline std::vector<HistoryRecord> history_records(const ParetoArchive& archive,
                                                  const Vocabulary& vocab) {
  std::vector<HistoryRecord> out;
  out.reserve(archive.history().size());
  for (const auto& h : archive.history())
    out.push_back(HistoryRecord{h.prompt.feature, h.prompt.mean_ce, h.iteration,
                                vocab.decode(h.prompt.seq)});
  return out;
}

struct SlackCurve {
  std::vector<std::pair<double, double>> points;  // (slack, min_mean_ce)
};

// For each slack s: keep prompts with feature >= max_feature - s * sigma and
// report the minimum mean cross-entropy among them. The maximal prompt always
// qualifies at s >= 0, so the curve is total.
inline SlackCurve slack_curve(const std::vector<HistoryRecord>& history,
                              const RandomBaselineStats& stats,
                              const std::vector<double>& slacks) {
  if (history.empty()) throw InputError("slack curve needs a non-empty history");
  if (!(stats.sigma_random > 0.0))
    throw DegenerateBaselineError("sigma_random is zero; slack units are undefined");
  double max_feature = history[0].feature;
  for (const auto& h : history) max_feature = std::max(max_feature, h.feature);

  SlackCurve curve;
  curve.points.reserve(slacks.size());
  for (double s : slacks) {
    if (s < 0.0) throw InputError("slack values must be >= 0");
    double threshold = max_feature - s * stats.sigma_random;
    double min_ce = std::numeric_limits<double>::infinity();
    for (const auto& h : history)
      if (h.feature >= threshold) min_ce = std::min(min_ce, h.mean_ce);
    curve.points.emplace_back(s, min_ce);
  }
  return curve;
}

struct FrontierSnapshot {
  int iteration = 0;
  std::vector<HistoryRecord> points;  // non-dominated, sorted by feature asc
};

// Archive state as of each checkpoint, reconstructed by re-inserting every
// history entry discovered at or before it.
inline std::vector<FrontierSnapshot> frontier_evolution(const std::vector<HistoryRecord>& history,
                                                        const std::vector<int>& checkpoints) {
  std::vector<FrontierSnapshot> out;
  out.reserve(checkpoints.size());
  for (int c : checkpoints) {
    std::vector<HistoryRecord> frontier;
    for (const auto& h : history)
      if (h.iteration <= c) pareto_insert(frontier, h);
    std::sort(frontier.begin(), frontier.end(), [](const HistoryRecord& a, const HistoryRecord& b) {
      if (a.feature != b.feature) return a.feature < b.feature;
      if (a.mean_ce != b.mean_ce) return a.mean_ce < b.mean_ce;
      return a.text < b.text;
    });
    out.push_back(FrontierSnapshot{c, std::move(frontier)});
  }
  return out;
}

// True iff every point of `earlier` is weakly dominated by some point of
// `later` (the frontier only moves outward).
inline bool frontier_covers(const FrontierSnapshot& later, const FrontierSnapshot& earlier) {
  for (const auto& p : earlier.points) {
    bool covered = false;
    for (const auto& q : later.points)
      if (weakly_dominates(q, p)) {
        covered = true;
        break;
      }
    if (!covered) return false;
  }
  return true;
}

// ----------------------------------------------------------------------------
// Layer sweep: dreaming performance on random residual directions per layer,
// in z-score units of the random-prompt baseline.
// ----------------------------------------------------------------------------

struct DirectionResult {
  int layer = 0;
  int direction = 0;
  uint64_t direction_seed = 0;
  double max_z = 0.0;
  bool ok = false;
  std::string note;  // failure reason when !ok
};

struct LayerSweepRow {
  int layer = 0;
  double mean_z = 0.0;
  double std_z = 0.0;  // 0 with single_sample set when only one direction
  int n_directions = 0;
  bool single_sample = false;
};

struct LayerSweepResult {
  std::vector<DirectionResult> directions;
  std::vector<LayerSweepRow> rows;
};

// Aggregates recomputed purely from the per-direction rows.
inline std::vector<LayerSweepRow> aggregate_sweep(const std::vector<DirectionResult>& directions) {
  std::vector<int> layers;
  for (const auto& d : directions)
    if (std::find(layers.begin(), layers.end(), d.layer) == layers.end())
      layers.push_back(d.layer);
  std::sort(layers.begin(), layers.end());

  std::vector<LayerSweepRow> rows;
  for (int layer : layers) {
    std::vector<double> zs;
    for (const auto& d : directions)
      if (d.layer == layer && d.ok) zs.push_back(d.max_z);
    LayerSweepRow row;
    row.layer = layer;
    row.n_directions = static_cast<int>(zs.size());
    if (zs.empty()) {
      row.single_sample = true;
      rows.push_back(row);
      continue;
    }
    double total = 0.0;
    for (double z : zs) total += z;
    row.mean_z = total / static_cast<double>(zs.size());
    if (zs.size() == 1) {
      row.std_z = 0.0;
      row.single_sample = true;
    } else {
      double ss = 0.0;
      for (double z : zs) ss += (z - row.mean_z) * (z - row.mean_z);
      row.std_z = std::sqrt(ss / static_cast<double>(zs.size() - 1));
    }
    rows.push_back(row);
  }
  return rows;
}

template <LanguageModel M>
LayerSweepResult layer_sweep(const M& feature_model, const M& fluency_model,
                             const Vocabulary& vocab, const EpoConfig& base_config,
                             const std::vector<int>& layers, int directions_per_layer,
                             int baseline_samples, uint64_t sweep_seed, int workers = 1) {
  if (directions_per_layer < 1) throw InputError("need at least one direction per layer");
  for (int layer : layers)
    if (layer < 0 || layer >= feature_model.spec().layers)
      throw InputError("sweep layer out of model depth");

  LayerSweepResult result;
  for (int layer : layers) {
    for (int d = 0; d < directions_per_layer; ++d) {
      DirectionResult dir;
      dir.layer = layer;
      dir.direction = d;
      dir.direction_seed =
          CounterRng{sweep_seed, rng_tag::direction, static_cast<uint64_t>(layer),
                     static_cast<uint64_t>(d)}
              .next_u64();
      FeatureSpec feature;
      feature.kind = FeatureKind::residual_alignment;
      feature.layer = layer;
      feature.direction =
          FeatureSpec::random_unit_direction(dir.direction_seed, feature_model.spec().d_model);

      try {
        RandomBaselineStats stats =
            random_baseline(feature_model, feature, vocab, base_config.n, baseline_samples,
                            dir.direction_seed, workers);
        EpoConfig config = base_config;
        config.seed = dir.direction_seed;
        RunOptions opts;
        opts.workers = workers;
        RunResult run_result = run(config, vocab, feature_model, fluency_model, feature,
                                   std::nullopt, opts);
        if (run_result.aborted) throw EngineError(*run_result.aborted);
        double best = -std::numeric_limits<double>::infinity();
        for (const auto& h : run_result.archive.history())
          best = std::max(best, h.prompt.feature);
        dir.max_z = zscore(best, stats);
        dir.ok = true;
      } catch (const Error& e) {
        dir.ok = false;
        dir.note = e.what();
      }
      result.directions.push_back(std::move(dir));
    }
  }
  result.rows = aggregate_sweep(result.directions);
  return result;
}

}  // namespace epo
