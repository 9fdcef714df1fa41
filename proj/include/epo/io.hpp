#pragma once

#include <cstdint>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "epo/analysis.hpp"
#include "epo/common.hpp"
#include "epo/core.hpp"
#include "epo/epo.hpp"

namespace epo {

using nlohmann::json;

// Shortest round-trip decimal form (what the JSON serializer emits), so CSV
// numbers parse back to the exact double and reruns are byte-identical.
inline std::string fmt_double(double v) {
  if (std::isnan(v)) return "nan";
  if (std::isinf(v)) return v > 0 ? "inf" : "-inf";
  return json(v).dump();
}

inline std::string json_line(const json& j) {
  return j.dump(-1, ' ', false, json::error_handler_t::replace);
}

// ----------------------------------------------------------------------------
// CSV
// ----------------------------------------------------------------------------

inline std::string csv_escape(const std::string& field) {
  bool needs_quotes = field.find_first_of(",\"\n\r") != std::string::npos;
  if (!needs_quotes) return field;
  std::string out = "\"";
  for (char c : field) {
    if (c == '"') out += "\"\"";
    else out += c;
  }
  out += '"';
  return out;
}

class CsvWriter {
 public:
  explicit CsvWriter(const std::string& path) : out_(path, std::ios::binary) {
    if (!out_) throw InputError("cannot open for writing: " + path);
  }

  void row(const std::vector<std::string>& fields) {
    for (std::size_t i = 0; i < fields.size(); ++i) {
      if (i) out_ << ',';
      out_ << csv_escape(fields[i]);
    }
    out_ << '\n';
  }

 private:
  std::ofstream out_;
};

// ----------------------------------------------------------------------------
// Run exports
// ----------------------------------------------------------------------------

inline void write_iterations_jsonl(const std::string& path,
                                   const std::vector<IterationRecord>& log) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw InputError("cannot open for writing: " + path);
  for (const auto& rec : log) {
    json slots = json::array();
    for (const auto& s : rec.slots)
      slots.push_back(json{{"lambda", s.lambda},
                           {"feature", s.feature},
                           {"mean_ce", s.mean_ce},
                           {"text", s.text}});
    out << json_line(json{{"iter", rec.iter}, {"slots", slots}, {"restart", rec.restart}}) << '\n';
  }
}

inline void write_history_jsonl(const std::string& path, const ParetoArchive& archive,
                                const Vocabulary& vocab) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw InputError("cannot open for writing: " + path);
  for (const auto& h : archive.history()) {
    json ids = json::array();
    for (TokenId id : h.prompt.seq.ids) ids.push_back(id);
    out << json_line(json{{"iter", h.iteration},
                          {"feature", h.prompt.feature},
                          {"mean_ce", h.prompt.mean_ce},
                          {"text", vocab.decode(h.prompt.seq)},
                          {"ids", ids}})
        << '\n';
  }
}

inline std::vector<HistoryRecord> read_history_jsonl(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw InputError("cannot open history file: " + path);
  std::vector<HistoryRecord> out;
  std::string line;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    json j = json::parse(line);
    out.push_back(HistoryRecord{j.at("feature").get<double>(), j.at("mean_ce").get<double>(),
                                j.at("iter").get<int>(), j.at("text").get<std::string>()});
  }
  return out;
}

inline void write_frontier_csv(const std::string& path, const ParetoArchive& archive,
                               const Vocabulary& vocab) {
  CsvWriter csv(path);
  csv.row({"feature", "mean_ce", "perplexity", "text", "iteration"});
  for (const auto& p : archive.sorted_points()) {
    csv.row({fmt_double(p.feature), fmt_double(p.mean_ce), fmt_double(std::exp(p.mean_ce)),
             vocab.decode(p.seq), std::to_string(p.iteration)});
  }
}

inline void write_frontier_jsonl(const std::string& path, const ParetoArchive& archive,
                                 const Vocabulary& vocab) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw InputError("cannot open for writing: " + path);
  for (const auto& p : archive.sorted_points()) {
    out << json_line(json{{"feature", p.feature},
                          {"mean_ce", p.mean_ce},
                          {"perplexity", std::exp(p.mean_ce)},
                          {"text", vocab.decode(p.seq)},
                          {"iteration", p.iteration}})
        << '\n';
  }
}

// ----------------------------------------------------------------------------
// Vocabulary sidecar
// ----------------------------------------------------------------------------

inline void write_vocab_json(const std::string& path, const Vocabulary& vocab) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw InputError("cannot open for writing: " + path);
  out << json{{"tokens", vocab.tokens()}, {"bos_id", vocab.bos_id()}, {"sep", vocab.sep()}}.dump(2)
      << '\n';
}

inline Vocabulary read_vocab_json(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw InputError("cannot open vocabulary file: " + path);
  json j = json::parse(in);
  return Vocabulary(j.at("tokens").get<std::vector<std::string>>(), j.at("bos_id").get<TokenId>(),
                    j.at("sep").get<std::string>());
}

// ----------------------------------------------------------------------------
// Manifest + fingerprinting
// ----------------------------------------------------------------------------

inline uint64_t fnv1a64(const unsigned char* data, std::size_t size) {
  uint64_t h = 0xcbf29ce484222325ULL;
  for (std::size_t i = 0; i < size; ++i) {
    h ^= data[i];
    h *= 0x100000001b3ULL;
  }
  return h;
}

inline std::string file_fingerprint(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw InputError("cannot open file for fingerprinting: " + path);
  std::ostringstream buf;
  buf << in.rdbuf();
  std::string bytes = buf.str();
  uint64_t h = fnv1a64(reinterpret_cast<const unsigned char*>(bytes.data()), bytes.size());
  char out[17];
  std::snprintf(out, sizeof(out), "%016llx", static_cast<unsigned long long>(h));
  return std::string(out);
}

inline void write_manifest(const std::string& dir, const json& manifest) {
  std::ofstream out(dir + "/manifest.json", std::ios::binary);
  if (!out) throw InputError("cannot open for writing: " + dir + "/manifest.json");
  out << manifest.dump(2) << '\n';
}

inline json read_manifest(const std::string& dir) {
  std::ifstream in(dir + "/manifest.json", std::ios::binary);
  if (!in) throw InputError("cannot open manifest: " + dir + "/manifest.json");
  return json::parse(in);
}

}  // namespace epo
