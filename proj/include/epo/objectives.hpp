#pragma once

#include <algorithm>
#include <cctype>
#include <cmath>
#include <optional>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "epo/common.hpp"
#include "epo/core.hpp"
#include "epo/model.hpp"

namespace epo {

// ----------------------------------------------------------------------------
// The three dreaming objectives: MLP neuron activation, output logit
// difference, and standardized residual-stream alignment. Each is a scalar of
// the forward outputs with an analytic gradient seed.
// ----------------------------------------------------------------------------

enum class FeatureKind { neuron, logit_diff, residual_alignment };

inline const char* to_string(FeatureKind k) {
  switch (k) {
    case FeatureKind::neuron: return "neuron";
    case FeatureKind::logit_diff: return "logit_diff";
    case FeatureKind::residual_alignment: return "residual_alignment";
  }
  return "neuron";
}

struct FeatureSpec {
  FeatureKind kind = FeatureKind::neuron;
  int layer = 0;                          // neuron, residual_alignment
  int index = 0;                          // neuron
  TokenId target_token = 0;               // logit_diff
  Vector direction;                       // residual_alignment, unit norm
  std::optional<Reduction> reduction;     // position reduction, when applicable

  // Per-kind default: neurons reduce by max over positions, residual
  // alignment reads the final position. An explicit setting (feature JSON or
  // the config-wide position_reduction) wins.
  Reduction effective_reduction(std::optional<Reduction> config_default = std::nullopt) const {
    if (reduction) return *reduction;
    if (config_default) return *config_default;
    return kind == FeatureKind::residual_alignment ? Reduction::last : Reduction::max;
  }

  FeatureSpec resolved(std::optional<Reduction> config_default) const {
    FeatureSpec out = *this;
    out.reduction = effective_reduction(config_default);
    return out;
  }

  nlohmann::json to_json() const {
    nlohmann::json j{{"kind", to_string(kind)}};
    switch (kind) {
      case FeatureKind::neuron:
        j["layer"] = layer;
        j["index"] = index;
        break;
      case FeatureKind::logit_diff:
        j["target_token"] = target_token;
        break;
      case FeatureKind::residual_alignment: {
        j["layer"] = layer;
        std::vector<double> v(direction.data(), direction.data() + direction.size());
        j["direction"] = v;
        break;
      }
    }
    if (reduction) j["reduction"] = to_string(*reduction);
    return j;
  }

  // `d_model` is needed when a residual direction is given as a seed; `vocab`
  // resolves a string-valued target token.
  static FeatureSpec from_json(const nlohmann::json& j, int d_model = -1,
                               const Vocabulary* vocab = nullptr) {
    if (!j.is_object()) throw ConfigError("feature spec must be a JSON object");
    if (!j.contains("kind")) throw ConfigError("feature spec needs a 'kind'");
    FeatureSpec spec;
    std::string kind = j.at("kind").get<std::string>();
    if (kind == "neuron") spec.kind = FeatureKind::neuron;
    else if (kind == "logit_diff") spec.kind = FeatureKind::logit_diff;
    else if (kind == "residual_alignment") spec.kind = FeatureKind::residual_alignment;
    else throw ConfigError("unknown feature kind: '" + kind + "'");

    for (const auto& [key, value] : j.items()) {
      try {
        if (key == "kind") continue;
        else if (key == "layer" && spec.kind != FeatureKind::logit_diff)
          spec.layer = value.get<int>();
        else if (key == "index" && spec.kind == FeatureKind::neuron)
          spec.index = value.get<int>();
        else if (key == "target_token" && spec.kind == FeatureKind::logit_diff) {
          if (value.is_string()) {
            if (!vocab) throw ConfigError("string target_token needs a vocabulary");
            auto id = vocab->encode(value.get<std::string>());
            if (!id) throw ConfigError("target_token not in vocabulary: '" +
                                       value.get<std::string>() + "'");
            spec.target_token = *id;
          } else {
            spec.target_token = value.get<TokenId>();
          }
        } else if (key == "direction" && spec.kind == FeatureKind::residual_alignment) {
          auto v = value.get<std::vector<double>>();
          spec.direction = Eigen::Map<const Vector>(v.data(), static_cast<Eigen::Index>(v.size()));
        } else if (key == "direction_seed" && spec.kind == FeatureKind::residual_alignment) {
          if (d_model <= 0) throw ConfigError("direction_seed needs the model width");
          spec.direction = random_unit_direction(value.get<uint64_t>(), d_model);
        } else if (key == "reduction") {
          spec.reduction = reduction_from_string(value.get<std::string>());
        } else {
          throw ConfigError("unknown feature spec key: '" + key + "'");
        }
      } catch (const nlohmann::json::exception& e) {
        throw ConfigError("bad value for feature key '" + key + "': " + e.what());
      }
    }
    if (spec.kind == FeatureKind::residual_alignment) {
      if (spec.direction.size() == 0)
        throw ConfigError("residual_alignment needs 'direction' or 'direction_seed'");
      check_unit(spec.direction);
    }
    return spec;
  }

  static Vector random_unit_direction(uint64_t seed, int d) {
    CounterRng rng{seed, rng_tag::direction};
    Vector v(d);
    for (int i = 0; i < d; ++i) v(i) = rng.normal();
    double norm = v.norm();
    if (norm == 0.0) {
      v.setZero();
      v(0) = 1.0;
      return v;
    }
    return v / norm;
  }

  static void check_unit(const Vector& v) {
    if (std::abs(v.norm() - 1.0) > 1e-9)
      throw InputError("residual direction must have unit norm");
  }
};

// ----------------------------------------------------------------------------
// Candidate-token rejection (case-insensitive substring match on decoded
// text). Applied when ranking top-k candidates and again on whole decoded
// prompts at selection.
// ----------------------------------------------------------------------------

inline std::string ascii_lower(std::string s) {
  for (char& c : s) c = static_cast<char>(std::tolower(static_cast<unsigned char>(c)));
  return s;
}

inline bool text_matches_pattern(const std::string& text, const std::vector<std::string>& patterns) {
  if (patterns.empty()) return false;
  std::string folded = ascii_lower(text);
  for (const std::string& p : patterns) {
    if (p.empty()) continue;
    if (folded.find(ascii_lower(p)) != std::string::npos) return true;
  }
  return false;
}

inline bool token_reject(TokenId token, const Vocabulary& vocab,
                         const std::vector<std::string>& patterns) {
  return text_matches_pattern(vocab.token(token), patterns);
}

inline std::vector<bool> rejected_token_mask(const Vocabulary& vocab,
                                             const std::vector<std::string>& patterns) {
  std::vector<bool> mask(static_cast<std::size_t>(vocab.size()), false);
  if (patterns.empty()) return mask;
  for (int v = 0; v < vocab.size(); ++v)
    mask[static_cast<std::size_t>(v)] = token_reject(v, vocab, patterns);
  return mask;
}

inline bool prompt_rejected(const TokenSequence& seq, const Vocabulary& vocab,
                            const std::vector<std::string>& patterns) {
  if (patterns.empty()) return false;
  return text_matches_pattern(vocab.decode(seq), patterns);
}

// ----------------------------------------------------------------------------
// Objective evaluations
// ----------------------------------------------------------------------------

namespace detail_obj {

// Position weights implied by a reduction over n positions of `values`.
// max resolves ties to the first position.
inline std::vector<std::pair<int, double>> reduction_weights(Reduction red,
                                                             const std::vector<double>& values) {
  int n = static_cast<int>(values.size());
  switch (red) {
    case Reduction::last:
      return {{n - 1, 1.0}};
    case Reduction::max: {
      int best = 0;
      for (int i = 1; i < n; ++i)
        if (values[static_cast<std::size_t>(i)] > values[static_cast<std::size_t>(best)]) best = i;
      return {{best, 1.0}};
    }
    case Reduction::mean: {
      std::vector<std::pair<int, double>> w;
      w.reserve(static_cast<std::size_t>(n));
      for (int i = 0; i < n; ++i) w.emplace_back(i, 1.0 / n);
      return w;
    }
  }
  return {{n - 1, 1.0}};
}

inline double reduce(Reduction red, const std::vector<double>& values) {
  double acc = 0.0;
  for (auto [pos, w] : reduction_weights(red, values))
    acc += w * values[static_cast<std::size_t>(pos)];
  return acc;
}

// Standardized alignment of one residual vector with v, plus d(align)/dx.
// sigma uses the population convention over the d hidden dims. A (numerically)
// constant vector is degenerate: alignment 0 with zero gradient.
struct AlignResult {
  double value = 0.0;
  bool degenerate = false;
};

inline AlignResult align_value(const Eigen::Ref<const Eigen::RowVectorXd>& x, const Vector& v) {
  double mu = x.mean();
  double var = (x.array() - mu).square().mean();
  double sigma = std::sqrt(var);
  double scale = std::max(1.0, x.cwiseAbs().maxCoeff());
  if (sigma <= 1e-12 * scale) return {0.0, true};
  double value = ((x.array() - mu) / sigma).matrix().dot(v);
  return {value, false};
}

inline void align_grad(const Eigen::Ref<const Eigen::RowVectorXd>& x, const Vector& v,
                       double weight, Eigen::Ref<Eigen::RowVectorXd> grad_out) {
  int d = static_cast<int>(x.size());
  double mu = x.mean();
  double var = (x.array() - mu).square().mean();
  double sigma = std::sqrt(var);
  double scale = std::max(1.0, x.cwiseAbs().maxCoeff());
  if (sigma <= 1e-12 * scale) return;
  Eigen::RowVectorXd s = ((x.array() - mu) / sigma).matrix();
  double sv = s.dot(v);
  double vbar = v.mean();
  grad_out += (weight / sigma) *
              ((v.transpose().array() - vbar).matrix() - s * (sv / static_cast<double>(d)));
}

}  // namespace detail_obj

// Reduced activation of one MLP neuron over prompt positions.
inline double neuron_activation(const ModelOutputs& out, int layer, int index,
                                Reduction red = Reduction::max) {
  if (layer < 0 || layer >= static_cast<int>(out.mlp_acts.size()))
    throw InputError("neuron layer out of range");
  const Matrix& acts = out.mlp_acts[static_cast<std::size_t>(layer)];
  if (index < 0 || index >= acts.cols()) throw InputError("neuron index out of range");
  std::vector<double> per_pos(static_cast<std::size_t>(acts.rows()));
  for (int p = 0; p < acts.rows(); ++p) per_pos[static_cast<std::size_t>(p)] = acts(p, index);
  return detail_obj::reduce(red, per_pos);
}

// Final-position logit margin of the target over its best competitor;
// positive iff the target is the most likely next token.
inline double logit_difference(const ModelOutputs& out, TokenId target) {
  if (out.logits.cols() < 2) throw InputError("logit_difference needs V >= 2");
  if (target < 0 || target >= out.logits.cols()) throw InputError("target token out of range");
  const auto row = out.logits.row(out.logits.rows() - 1);
  double best_other = -std::numeric_limits<double>::infinity();
  for (int i = 0; i < row.size(); ++i)
    if (i != target) best_other = std::max(best_other, row(i));
  return row(target) - best_other;
}

// Reduced standardized residual-stream alignment with a unit direction.
inline double residual_alignment(const ModelOutputs& out, int layer, const Vector& v,
                                 Reduction red = Reduction::last, bool* degenerate = nullptr) {
  if (layer < 0 || layer >= static_cast<int>(out.residual.size()))
    throw InputError("residual layer out of range");
  const Matrix& x = out.residual[static_cast<std::size_t>(layer)];
  if (v.size() != x.cols()) throw InputError("direction width mismatch");
  FeatureSpec::check_unit(v);
  bool any_degenerate = false;
  std::vector<double> per_pos(static_cast<std::size_t>(x.rows()));
  for (int p = 0; p < x.rows(); ++p) {
    auto r = detail_obj::align_value(x.row(p), v);
    per_pos[static_cast<std::size_t>(p)] = r.value;
    any_degenerate = any_degenerate || r.degenerate;
  }
  if (degenerate) *degenerate = any_degenerate;
  return detail_obj::reduce(red, per_pos);
}

// Evaluate a FeatureSpec against forward outputs. `reduction` must already be
// resolved (FeatureSpec::resolved).
inline double eval_feature(const FeatureSpec& spec, const ModelOutputs& out,
                           bool* degenerate = nullptr) {
  if (degenerate) *degenerate = false;
  switch (spec.kind) {
    case FeatureKind::neuron:
      return neuron_activation(out, spec.layer, spec.index, spec.effective_reduction());
    case FeatureKind::logit_diff:
      return logit_difference(out, spec.target_token);
    case FeatureKind::residual_alignment:
      return residual_alignment(out, spec.layer, spec.direction, spec.effective_reduction(),
                                degenerate);
  }
  throw InputError("unknown feature kind");
}

// Accumulate d(feature)/d(outputs) into `seeds`.
inline void seed_feature(const FeatureSpec& spec, const ModelOutputs& out, OutputSeeds& seeds) {
  int layers = static_cast<int>(out.mlp_acts.size());
  switch (spec.kind) {
    case FeatureKind::neuron: {
      if (spec.layer < 0 || spec.layer >= layers) throw InputError("neuron layer out of range");
      const Matrix& acts = out.mlp_acts[static_cast<std::size_t>(spec.layer)];
      if (spec.index < 0 || spec.index >= acts.cols())
        throw InputError("neuron index out of range");
      if (seeds.d_mlp_acts.empty()) seeds.d_mlp_acts.resize(static_cast<std::size_t>(layers));
      Matrix& seed = seeds.d_mlp_acts[static_cast<std::size_t>(spec.layer)];
      if (seed.size() == 0) seed = Matrix::Zero(acts.rows(), acts.cols());
      std::vector<double> per_pos(static_cast<std::size_t>(acts.rows()));
      for (int p = 0; p < acts.rows(); ++p)
        per_pos[static_cast<std::size_t>(p)] = acts(p, spec.index);
      for (auto [pos, w] : detail_obj::reduction_weights(spec.effective_reduction(), per_pos))
        seed(pos, spec.index) += w;
      break;
    }
    case FeatureKind::logit_diff: {
      const auto row = out.logits.row(out.logits.rows() - 1);
      if (row.size() < 2) throw InputError("logit_difference needs V >= 2");
      int best_other = spec.target_token == 0 ? 1 : 0;
      for (int i = 0; i < row.size(); ++i)
        if (i != spec.target_token && row(i) > row(best_other)) best_other = i;
      if (seeds.d_logits.size() == 0)
        seeds.d_logits = Matrix::Zero(out.logits.rows(), out.logits.cols());
      seeds.d_logits(out.logits.rows() - 1, spec.target_token) += 1.0;
      seeds.d_logits(out.logits.rows() - 1, best_other) -= 1.0;
      break;
    }
    case FeatureKind::residual_alignment: {
      int rlayers = static_cast<int>(out.residual.size());
      if (spec.layer < 0 || spec.layer >= rlayers)
        throw InputError("residual layer out of range");
      const Matrix& x = out.residual[static_cast<std::size_t>(spec.layer)];
      if (seeds.d_residual.empty()) seeds.d_residual.resize(static_cast<std::size_t>(rlayers));
      Matrix& seed = seeds.d_residual[static_cast<std::size_t>(spec.layer)];
      if (seed.size() == 0) seed = Matrix::Zero(x.rows(), x.cols());
      std::vector<double> per_pos(static_cast<std::size_t>(x.rows()));
      for (int p = 0; p < x.rows(); ++p)
        per_pos[static_cast<std::size_t>(p)] = detail_obj::align_value(x.row(p), spec.direction).value;
      for (auto [pos, w] : detail_obj::reduction_weights(spec.effective_reduction(), per_pos)) {
        Eigen::RowVectorXd g = Eigen::RowVectorXd::Zero(x.cols());
        detail_obj::align_grad(x.row(pos), spec.direction, w, g);
        seed.row(pos) += g;
      }
      break;
    }
  }
}

// ----------------------------------------------------------------------------
// ScalarObjective builders for grad_onehot
// ----------------------------------------------------------------------------

inline ScalarObjective make_feature_objective(FeatureSpec spec) {
  return [spec](const ModelOutputs& out, const TokenSequence&, OutputSeeds* seeds) {
    double value = eval_feature(spec, out);
    if (seeds) seed_feature(spec, out, *seeds);
    return value;
  };
}

// Mean self-cross-entropy of the prompt.
inline ScalarObjective make_fluency_objective() {
  return [](const ModelOutputs& out, const TokenSequence& seq, OutputSeeds* seeds) {
    std::vector<double> terms = ce_terms_from(out, seq);
    double mean = 0.0;
    for (double t : terms) mean += t;
    mean /= static_cast<double>(terms.size());
    if (seeds)
      seeds->d_ce_terms.assign(terms.size(), 1.0 / static_cast<double>(terms.size()));
    return mean;
  };
}

// The full search objective L_lambda = f - lambda * mean_ce (feature and
// fluency read from the same model).
inline ScalarObjective make_epo_objective(FeatureSpec spec, double lambda) {
  return [spec, lambda](const ModelOutputs& out, const TokenSequence& seq, OutputSeeds* seeds) {
    double value = eval_feature(spec, out);
    std::vector<double> terms = ce_terms_from(out, seq);
    double mean = 0.0;
    for (double t : terms) mean += t;
    mean /= static_cast<double>(terms.size());
    if (seeds) {
      seed_feature(spec, out, *seeds);
      if (lambda != 0.0)
        seeds->d_ce_terms.assign(terms.size(), -lambda / static_cast<double>(terms.size()));
    }
    return value - lambda * mean;
  };
}

}  // namespace epo
