#pragma once

#include <algorithm>
#include <cstdio>
#include <limits>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "epo/common.hpp"
#include "epo/core.hpp"
#include "epo/epo.hpp"
#include "epo/model.hpp"
#include "epo/objectives.hpp"

namespace epo {

// ----------------------------------------------------------------------------
// Token-level causal attribution: for each position, rank k replacement
// candidates with the same top-k gradient operation the engine uses, evaluate
// the feature for each single-token substitution by a full forward pass, and
// report how much the best / worst substitution moves the feature.
// ----------------------------------------------------------------------------

struct AttributionRow {
  int position = 0;
  std::string token_text;
  double original_activation = 0.0;
  std::vector<double> candidate_activations;
  double delta_worst = 0.0;  // original - min(candidates)
  double delta_best = 0.0;   // original - max(candidates)
};

template <LanguageModel M>
std::vector<AttributionRow> attribute(const M& model, const Vocabulary& vocab,
                                      const TokenSequence& seq, const FeatureSpec& feature,
                                      int k, GradRanking ranking = GradRanking::signed_ascent,
                                      const std::vector<std::string>& reject_patterns = {},
                                      int workers = 1) {
  if (k < 1) throw InputError("attribution needs k >= 1");
  if (k > vocab.size() - 1) {
    std::fprintf(stderr, "epo: warning: attribution k=%d clamped to %d\n", k, vocab.size() - 1);
    k = vocab.size() - 1;
  }

  ModelOutputs out = model.forward(seq);
  double original = eval_feature(feature, out);
  OutputSeeds seeds;
  seed_feature(feature, out, seeds);
  Matrix grad = model.backprop_to_onehot(out, seeds, seq);

  const auto rejected = rejected_token_mask(vocab, reject_patterns);
  auto topk = detail_engine::topk_candidates(seq, grad, k, ranking, rejected);

  int n = seq.length();
  struct Job {
    int position;
    int slot;
    TokenId candidate;
  };
  std::vector<Job> jobs;
  for (int j = 0; j < n; ++j) {
    const auto& cands = topk[static_cast<std::size_t>(j)];
    for (std::size_t c = 0; c < cands.size(); ++c)
      jobs.push_back(Job{j, static_cast<int>(c), cands[c]});
  }

  std::vector<AttributionRow> rows(static_cast<std::size_t>(n));
  for (int j = 0; j < n; ++j) {
    auto& row = rows[static_cast<std::size_t>(j)];
    row.position = j;
    row.token_text = vocab.token(seq[j]);
    row.original_activation = original;
    row.candidate_activations.resize(topk[static_cast<std::size_t>(j)].size());
  }

  parallel_for(jobs.size(), workers, [&](std::size_t i) {
    const Job& job = jobs[i];
    TokenSequence sub = seq;
    sub[job.position] = job.candidate;
    double f = eval_feature(feature, model.forward(sub));
    rows[static_cast<std::size_t>(job.position)]
        .candidate_activations[static_cast<std::size_t>(job.slot)] = f;
  });

  for (auto& row : rows) {
    if (row.candidate_activations.empty()) {
      row.delta_worst = 0.0;
      row.delta_best = 0.0;
      continue;
    }
    double lo = row.candidate_activations[0], hi = row.candidate_activations[0];
    for (double v : row.candidate_activations) {
      lo = std::min(lo, v);
      hi = std::max(hi, v);
    }
    row.delta_worst = row.original_activation - lo;
    row.delta_best = row.original_activation - hi;
  }
  return rows;
}

// ----------------------------------------------------------------------------
// Static HTML report. Token background saturation is linear in delta_worst;
// the bar above each token is linear in delta_best; both normalized by the
// prompt-wide maximum of the respective quantity. The numeric table is
// embedded twice: human-readable and as JSON for machine reading.
// ----------------------------------------------------------------------------

inline std::string html_escape(const std::string& s) {
  std::string out;
  out.reserve(s.size());
  for (char c : s) {
    switch (c) {
      case '&': out += "&amp;"; break;
      case '<': out += "&lt;"; break;
      case '>': out += "&gt;"; break;
      case '"': out += "&quot;"; break;
      case '\'': out += "&#39;"; break;
      default: out += c;
    }
  }
  return out;
}

inline nlohmann::json attribution_rows_to_json(const std::vector<AttributionRow>& rows) {
  nlohmann::json arr = nlohmann::json::array();
  for (const auto& r : rows) {
    arr.push_back(nlohmann::json{{"position", r.position},
                                 {"token", r.token_text},
                                 {"original", r.original_activation},
                                 {"candidates", r.candidate_activations},
                                 {"delta_worst", r.delta_worst},
                                 {"delta_best", r.delta_best}});
  }
  return arr;
}

inline std::vector<AttributionRow> attribution_rows_from_json(const nlohmann::json& arr) {
  std::vector<AttributionRow> rows;
  for (const auto& j : arr) {
    AttributionRow r;
    r.position = j.at("position").get<int>();
    r.token_text = j.at("token").get<std::string>();
    r.original_activation = j.at("original").get<double>();
    r.candidate_activations = j.at("candidates").get<std::vector<double>>();
    r.delta_worst = j.at("delta_worst").get<double>();
    r.delta_best = j.at("delta_best").get<double>();
    rows.push_back(std::move(r));
  }
  return rows;
}

inline std::string render_report(const std::vector<AttributionRow>& rows,
                                 const std::string& title) {
  if (rows.empty()) throw InputError("attribution report needs at least one row");
  double max_worst = 0.0, max_best = 0.0;
  for (const auto& r : rows) {
    max_worst = std::max(max_worst, r.delta_worst);
    max_best = std::max(max_best, r.delta_best);
  }

  auto fmt = [](double v) {
    char buf[32];
    std::snprintf(buf, sizeof(buf), "%.6g", v);
    return std::string(buf);
  };

  std::string html;
  html += "<!DOCTYPE html>\n<html lang=\"en\">\n<head>\n<meta charset=\"utf-8\">\n";
  html += "<title>" + html_escape(title) + "</title>\n";
  html +=
      "<style>\n"
      "body { font-family: sans-serif; margin: 2em; }\n"
      ".prompt { display: flex; align-items: flex-end; gap: 2px; margin: 1.5em 0; }\n"
      ".tok { display: flex; flex-direction: column; align-items: center; }\n"
      ".bar { width: 100%; background: #444; }\n"
      ".txt { padding: 4px 6px; border-radius: 3px; white-space: pre; }\n"
      "table { border-collapse: collapse; }\n"
      "td, th { border: 1px solid #999; padding: 4px 8px; text-align: right; }\n"
      "td.tok-cell, th.tok-cell { text-align: left; }\n"
      "</style>\n</head>\n<body>\n";
  html += "<h1>" + html_escape(title) + "</h1>\n<div class=\"prompt\">\n";
  for (const auto& r : rows) {
    double sat = max_worst > 0.0 ? std::clamp(r.delta_worst / max_worst, 0.0, 1.0) : 0.0;
    double bar = max_best > 0.0 ? std::clamp(r.delta_best / max_best, 0.0, 1.0) : 0.0;
    html += "<div class=\"tok\">";
    html += "<div class=\"bar\" style=\"height:" + fmt(bar * 48.0) + "px\"></div>";
    html += "<span class=\"txt\" style=\"background: rgba(214,39,40," + fmt(sat) + ")\">" +
            html_escape(r.token_text) + "</span>";
    html += "</div>\n";
  }
  html += "</div>\n<table>\n<tr><th>position</th><th class=\"tok-cell\">token</th>"
          "<th>original</th><th>delta_worst</th><th>delta_best</th></tr>\n";
  for (const auto& r : rows) {
    html += "<tr><td>" + std::to_string(r.position) + "</td><td class=\"tok-cell\">" +
            html_escape(r.token_text) + "</td><td>" + fmt(r.original_activation) + "</td><td>" +
            fmt(r.delta_worst) + "</td><td>" + fmt(r.delta_best) + "</td></tr>\n";
  }
  html += "</table>\n<script type=\"application/json\" id=\"attribution-data\">\n";
  std::string data = attribution_rows_to_json(rows).dump(
      -1, ' ', false, nlohmann::json::error_handler_t::replace);
  // '<' only occurs inside JSON strings; escape it so script content cannot
  // open a tag
  std::string escaped;
  escaped.reserve(data.size());
  for (char c : data) {
    if (c == '<') escaped += "\\u003c";
    else escaped += c;
  }
  html += escaped;
  html += "\n</script>\n</body>\n</html>\n";
  return html;
}

}  // namespace epo
