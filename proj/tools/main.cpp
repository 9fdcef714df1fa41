// Command-line front end: one subcommand per pipeline (dream, scan, random,
// attribute, analyze, train-toy). Every run directory gets a manifest that
// pins the config, seed, and model fingerprint needed to reproduce it.

#include <chrono>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <nlohmann/json.hpp>

#include "epo/analysis.hpp"
#include "epo/attribution.hpp"
#include "epo/baselines.hpp"
#include "epo/common.hpp"
#include "epo/core.hpp"
#include "epo/corpus.hpp"
#include "epo/epo.hpp"
#include "epo/io.hpp"
#include "epo/model.hpp"
#include "epo/objectives.hpp"

namespace fs = std::filesystem;
using epo::json;

namespace {

struct CommonArgs {
  std::string config_path;
  std::string model_path;
  std::string vocab_path;  // default: vocab.json next to the model
  std::string out_dir;
  std::optional<uint64_t> seed_override;
  int workers = 1;
};

json load_config_doc(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw epo::ConfigError("cannot open config file: " + path);
  try {
    return json::parse(in);
  } catch (const json::exception& e) {
    throw epo::ConfigError("config file " + path + " is not valid JSON: " + e.what());
  }
}

std::string default_vocab_path(const std::string& model_path) {
  return (fs::path(model_path).parent_path() / "vocab.json").string();
}

struct LoadedModel {
  epo::ToyTransformer model;
  epo::Vocabulary vocab;
};

LoadedModel load_model(const CommonArgs& args) {
  epo::ToyTransformer model = epo::ToyTransformer::load(args.model_path);
  std::string vpath = args.vocab_path.empty() ? default_vocab_path(args.model_path)
                                              : args.vocab_path;
  epo::Vocabulary vocab = epo::read_vocab_json(vpath);
  if (vocab.size() != model.vocab_size())
    throw epo::ModelError("vocabulary size does not match the weight file");
  model.set_bos_id(vocab.bos_id());
  return LoadedModel{std::move(model), std::move(vocab)};
}

std::vector<epo::TokenId> encode_text(const std::string& text, const epo::Vocabulary& vocab) {
  if (vocab.sep() == " ") return epo::tokenize_words(text, vocab);
  auto ids = epo::tokenize_bytes(text);
  for (epo::TokenId id : ids)
    if (id >= vocab.size()) throw epo::InputError("byte out of vocabulary range");
  return ids;
}

std::vector<epo::TokenId> load_corpus(const std::string& path, const std::string& format,
                                      const epo::Vocabulary& vocab) {
  if (format == "u32") {
    auto ids = epo::read_u32_token_file(path);
    for (epo::TokenId id : ids)
      if (id < 0 || id >= vocab.size()) throw epo::InputError("corpus token id out of range");
    return ids;
  }
  return encode_text(epo::read_text_file(path), vocab);
}

json base_manifest(const std::string& command, const CommonArgs& args, uint64_t seed) {
  json m;
  m["tool_version"] = epo::kToolVersion;
  m["command"] = command;
  m["seed"] = seed;
  m["workers"] = args.workers;
  if (!args.model_path.empty()) {
    m["model_path"] = args.model_path;
    m["model_fingerprint"] = epo::file_fingerprint(args.model_path);
    m["vocab_path"] =
        args.vocab_path.empty() ? default_vocab_path(args.model_path) : args.vocab_path;
  }
  return m;
}

void finish_manifest(json& manifest, const std::string& out_dir,
                     std::chrono::steady_clock::time_point start,
                     const std::vector<std::string>& outputs) {
  manifest["outputs"] = outputs;
  manifest["duration_seconds"] =
      std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  epo::write_manifest(out_dir, manifest);
}

std::vector<int> parse_int_list(const std::string& csv) {
  std::vector<int> out;
  std::string cur;
  std::istringstream in(csv);
  while (std::getline(in, cur, ','))
    if (!cur.empty()) out.push_back(std::stoi(cur));
  return out;
}

std::vector<double> parse_double_list(const std::string& csv) {
  std::vector<double> out;
  std::string cur;
  std::istringstream in(csv);
  while (std::getline(in, cur, ','))
    if (!cur.empty()) out.push_back(std::stod(cur));
  return out;
}

// ---------------------------------------------------------------------------

int cmd_dream(const CommonArgs& args, const std::string& init_text) {
  auto start = std::chrono::steady_clock::now();
  json doc = load_config_doc(args.config_path);
  epo::EpoConfig config = epo::EpoConfig::from_json(doc);
  if (args.seed_override) config.seed = *args.seed_override;
  if (!doc.contains("feature")) throw epo::ConfigError("config needs a 'feature' object");
  LoadedModel lm = load_model(args);
  epo::FeatureSpec feature =
      epo::FeatureSpec::from_json(doc.at("feature"), lm.model.spec().d_model, &lm.vocab);

  std::optional<epo::TokenSequence> init;
  if (!init_text.empty()) init = epo::TokenSequence(encode_text(init_text, lm.vocab));

  epo::RunOptions opts;
  opts.workers = args.workers;
  epo::RunResult result =
      epo::run(config, lm.vocab, lm.model, lm.model, feature, init, opts);

  fs::create_directories(args.out_dir);
  epo::write_iterations_jsonl(args.out_dir + "/iterations.jsonl", result.log);
  epo::write_history_jsonl(args.out_dir + "/history.jsonl", result.archive, lm.vocab);
  epo::write_frontier_csv(args.out_dir + "/frontier.csv", result.archive, lm.vocab);
  epo::write_frontier_jsonl(args.out_dir + "/frontier.jsonl", result.archive, lm.vocab);

  json manifest = base_manifest("dream", args, config.seed);
  manifest["config"] = config.to_json();
  manifest["config"]["feature"] = feature.resolved(config.position_reduction).to_json();
  if (!init_text.empty()) manifest["init"] = init_text;
  if (result.aborted) manifest["aborted"] = *result.aborted;
  finish_manifest(manifest, args.out_dir, start,
                  {"iterations.jsonl", "history.jsonl", "frontier.csv", "frontier.jsonl"});

  if (result.aborted) {
    std::cerr << "epo: engine error (archive flushed): " << *result.aborted << "\n";
    return 1;
  }
  return 0;
}

int cmd_scan(const CommonArgs& args, const std::string& corpus_path, const std::string& format,
             int top_n, int stride) {
  auto start = std::chrono::steady_clock::now();
  json doc = load_config_doc(args.config_path);
  epo::EpoConfig config = epo::EpoConfig::from_json(doc);
  if (args.seed_override) config.seed = *args.seed_override;
  if (!doc.contains("feature")) throw epo::ConfigError("config needs a 'feature' object");
  LoadedModel lm = load_model(args);
  epo::FeatureSpec feature =
      epo::FeatureSpec::from_json(doc.at("feature"), lm.model.spec().d_model, &lm.vocab)
          .resolved(config.position_reduction);

  auto corpus = load_corpus(corpus_path, format, lm.vocab);
  epo::CorpusScanResult result = epo::corpus_scan(lm.model, lm.model, feature, lm.vocab, corpus,
                                                  config.n, top_n, stride, args.workers);

  fs::create_directories(args.out_dir);
  epo::CsvWriter csv(args.out_dir + "/scan.csv");
  csv.row({"feature", "mean_ce", "text", "start"});
  for (const auto& hit : result.top)
    csv.row({epo::fmt_double(hit.feature), epo::fmt_double(hit.mean_ce), hit.text,
             std::to_string(hit.start)});

  json manifest = base_manifest("scan", args, config.seed);
  manifest["config"] = config.to_json();
  manifest["config"]["feature"] = feature.to_json();
  manifest["corpus_path"] = corpus_path;
  manifest["corpus_fingerprint"] = epo::file_fingerprint(corpus_path);
  manifest["top_n"] = top_n;
  manifest["stride"] = stride;
  finish_manifest(manifest, args.out_dir, start, {"scan.csv"});
  return 0;
}

int cmd_random(const CommonArgs& args, int n_samples) {
  auto start = std::chrono::steady_clock::now();
  json doc = load_config_doc(args.config_path);
  epo::EpoConfig config = epo::EpoConfig::from_json(doc);
  if (args.seed_override) config.seed = *args.seed_override;
  if (!doc.contains("feature")) throw epo::ConfigError("config needs a 'feature' object");
  LoadedModel lm = load_model(args);
  epo::FeatureSpec feature =
      epo::FeatureSpec::from_json(doc.at("feature"), lm.model.spec().d_model, &lm.vocab)
          .resolved(config.position_reduction);

  std::vector<double> samples;
  epo::RandomBaselineStats stats = epo::random_baseline(
      lm.model, feature, lm.vocab, config.n, n_samples, config.seed, args.workers, &samples);
  bool degenerate = !(stats.sigma_random > 0.0);
  if (degenerate)
    std::cerr << "epo: warning: degenerate baseline (sigma_random = 0); z-scores undefined\n";

  fs::create_directories(args.out_dir);
  {
    epo::CsvWriter csv(args.out_dir + "/random.csv");
    csv.row({"mu_random", "sigma_random", "max_alignment", "n_samples", "degenerate"});
    csv.row({epo::fmt_double(stats.mu_random), epo::fmt_double(stats.sigma_random),
             epo::fmt_double(stats.max_alignment), std::to_string(stats.n_samples),
             degenerate ? "true" : "false"});
  }
  {
    epo::CsvWriter csv(args.out_dir + "/samples.csv");
    csv.row({"sample", "feature"});
    for (std::size_t i = 0; i < samples.size(); ++i)
      csv.row({std::to_string(i), epo::fmt_double(samples[i])});
  }

  json manifest = base_manifest("random", args, config.seed);
  manifest["config"] = config.to_json();
  manifest["config"]["feature"] = feature.to_json();
  manifest["n_samples"] = n_samples;
  finish_manifest(manifest, args.out_dir, start, {"random.csv", "samples.csv"});
  return 0;
}

int cmd_attribute(const CommonArgs& args, const std::string& prompt_text, const std::string& ids_csv,
                  int k) {
  auto start = std::chrono::steady_clock::now();
  json doc = load_config_doc(args.config_path);
  epo::EpoConfig config = epo::EpoConfig::from_json(doc);
  if (args.seed_override) config.seed = *args.seed_override;
  if (!doc.contains("feature")) throw epo::ConfigError("config needs a 'feature' object");
  LoadedModel lm = load_model(args);
  epo::FeatureSpec feature =
      epo::FeatureSpec::from_json(doc.at("feature"), lm.model.spec().d_model, &lm.vocab)
          .resolved(config.position_reduction);

  epo::TokenSequence seq;
  if (!prompt_text.empty()) {
    seq = epo::TokenSequence(encode_text(prompt_text, lm.vocab));
  } else if (!ids_csv.empty()) {
    std::vector<epo::TokenId> ids;
    for (int v : parse_int_list(ids_csv)) ids.push_back(static_cast<epo::TokenId>(v));
    seq = epo::TokenSequence(std::move(ids));
  } else {
    throw epo::ConfigError("attribute needs --prompt or --ids");
  }

  auto rows = epo::attribute(lm.model, lm.vocab, seq, feature, k, config.grad_ranking,
                             config.reject_substrings, args.workers);

  fs::create_directories(args.out_dir);
  {
    epo::CsvWriter csv(args.out_dir + "/attribution.csv");
    csv.row({"position", "token", "original", "delta_worst", "delta_best"});
    for (const auto& r : rows)
      csv.row({std::to_string(r.position), r.token_text, epo::fmt_double(r.original_activation),
               epo::fmt_double(r.delta_worst), epo::fmt_double(r.delta_best)});
  }
  {
    std::ofstream html(args.out_dir + "/attribution.html", std::ios::binary);
    html << epo::render_report(rows, "Token attribution");
  }

  json manifest = base_manifest("attribute", args, config.seed);
  manifest["config"] = config.to_json();
  manifest["config"]["feature"] = feature.to_json();
  manifest["prompt"] = lm.vocab.decode(seq);
  manifest["k"] = k;
  finish_manifest(manifest, args.out_dir, start, {"attribution.csv", "attribution.html"});
  return 0;
}

int cmd_analyze_run(const CommonArgs& args, const std::string& run_dir, const std::string& slacks_csv,
                    const std::string& checkpoints_csv, int baseline_samples) {
  auto start = std::chrono::steady_clock::now();
  json run_manifest = epo::read_manifest(run_dir);
  std::string model_path = run_manifest.at("model_path").get<std::string>();
  if (epo::file_fingerprint(model_path) !=
      run_manifest.at("model_fingerprint").get<std::string>())
    throw epo::ModelError("weight file does not match the run manifest fingerprint");

  CommonArgs margs = args;
  margs.model_path = model_path;
  if (margs.vocab_path.empty()) margs.vocab_path = run_manifest.at("vocab_path").get<std::string>();
  LoadedModel lm = load_model(margs);

  json config_json = run_manifest.at("config");
  epo::EpoConfig config = epo::EpoConfig::from_json(config_json);
  epo::FeatureSpec feature = epo::FeatureSpec::from_json(config_json.at("feature"),
                                                         lm.model.spec().d_model, &lm.vocab);

  auto history = epo::read_history_jsonl(run_dir + "/history.jsonl");

  std::vector<double> slacks = slacks_csv.empty()
                                   ? std::vector<double>{0, 0.5, 1, 1.5, 2, 2.5, 3, 4, 5}
                                   : parse_double_list(slacks_csv);
  std::vector<int> checkpoints;
  if (checkpoints_csv.empty()) {
    checkpoints = {0, config.T / 4, config.T / 2, 3 * config.T / 4, config.T};
    std::sort(checkpoints.begin(), checkpoints.end());
    checkpoints.erase(std::unique(checkpoints.begin(), checkpoints.end()), checkpoints.end());
  } else {
    checkpoints = parse_int_list(checkpoints_csv);
  }

  epo::RandomBaselineStats stats = epo::random_baseline(
      lm.model, feature, lm.vocab, config.n, baseline_samples, config.seed, args.workers);

  fs::create_directories(args.out_dir);
  std::vector<std::string> outputs;
  {
    epo::SlackCurve curve = epo::slack_curve(history, stats, slacks);
    epo::CsvWriter csv(args.out_dir + "/slack_curve.csv");
    csv.row({"slack", "min_mean_ce"});
    for (auto [s, ce] : curve.points) csv.row({epo::fmt_double(s), epo::fmt_double(ce)});
    outputs.push_back("slack_curve.csv");
  }
  for (const auto& snap : epo::frontier_evolution(history, checkpoints)) {
    std::string name = "frontier_" + std::to_string(snap.iteration) + ".csv";
    epo::CsvWriter csv(args.out_dir + "/" + name);
    csv.row({"feature", "mean_ce", "text"});
    for (const auto& p : snap.points)
      csv.row({epo::fmt_double(p.feature), epo::fmt_double(p.mean_ce), p.text});
    outputs.push_back(name);
  }

  json manifest = base_manifest("analyze", margs, config.seed);
  manifest["run_dir"] = run_dir;
  manifest["config"] = config_json;
  manifest["baseline_samples"] = baseline_samples;
  finish_manifest(manifest, args.out_dir, start, outputs);
  return 0;
}

int cmd_analyze_sweep(const CommonArgs& args, const std::string& layers_csv, int directions,
                      int baseline_samples) {
  auto start = std::chrono::steady_clock::now();
  json doc = load_config_doc(args.config_path);
  epo::EpoConfig config = epo::EpoConfig::from_json(doc);
  if (args.seed_override) config.seed = *args.seed_override;
  LoadedModel lm = load_model(args);
  std::vector<int> layers = parse_int_list(layers_csv);
  if (layers.empty()) throw epo::ConfigError("--layers needs at least one layer");

  epo::LayerSweepResult sweep =
      epo::layer_sweep(lm.model, lm.model, lm.vocab, config, layers, directions, baseline_samples,
                       config.seed, args.workers);

  fs::create_directories(args.out_dir);
  {
    epo::CsvWriter csv(args.out_dir + "/sweep_directions.csv");
    csv.row({"layer", "direction", "direction_seed", "max_z", "ok", "note"});
    for (const auto& d : sweep.directions)
      csv.row({std::to_string(d.layer), std::to_string(d.direction),
               std::to_string(d.direction_seed), epo::fmt_double(d.max_z),
               d.ok ? "true" : "false", d.note});
  }
  {
    epo::CsvWriter csv(args.out_dir + "/layer_sweep.csv");
    csv.row({"layer", "mean_z", "std_z", "n_directions"});
    for (const auto& row : sweep.rows)
      csv.row({std::to_string(row.layer), epo::fmt_double(row.mean_z),
               epo::fmt_double(row.std_z), std::to_string(row.n_directions)});
  }

  json manifest = base_manifest("analyze", args, config.seed);
  manifest["config"] = config.to_json();
  manifest["layers"] = layers;
  manifest["directions"] = directions;
  manifest["baseline_samples"] = baseline_samples;
  finish_manifest(manifest, args.out_dir, start, {"sweep_directions.csv", "layer_sweep.csv"});
  return 0;
}

int cmd_train_toy(const CommonArgs& args, const std::string& corpus_path,
                  const std::string& tokenizer, int steps, int d_model, int d_mlp, int layers,
                  int heads, int n_max, int window, double lr) {
  auto start = std::chrono::steady_clock::now();
  std::string text = epo::read_text_file(corpus_path);
  epo::Vocabulary vocab = tokenizer == "byte" ? epo::byte_vocabulary() : epo::word_vocabulary(text);
  std::vector<epo::TokenId> corpus =
      tokenizer == "byte" ? epo::tokenize_bytes(text) : epo::tokenize_words(text, vocab);

  uint64_t seed = args.seed_override.value_or(0);
  epo::ToyTransformerSpec spec;
  spec.vocab_size = vocab.size();
  spec.d_model = d_model;
  spec.d_mlp = d_mlp;
  spec.layers = layers;
  spec.heads = heads;
  spec.n_max = n_max;
  spec.seed = static_cast<uint32_t>(seed);

  epo::ToyTransformer model(spec);
  model.set_bos_id(vocab.bos_id());
  double ce_before = model.mean_corpus_ce(corpus, window);
  epo::TrainOptions opt;
  opt.window = window;
  opt.lr = lr;
  opt.seed = seed;
  model.train(corpus, steps, opt);
  double ce_after = model.mean_corpus_ce(corpus, window);
  std::cerr << "epo: train-toy mean corpus CE " << ce_before << " -> " << ce_after << " nats\n";

  fs::create_directories(args.out_dir);
  std::string weights_path = args.out_dir + "/weights.bin";
  model.save(weights_path);
  epo::write_vocab_json(args.out_dir + "/vocab.json", vocab);

  CommonArgs margs = args;
  margs.model_path = weights_path;
  json manifest = base_manifest("train-toy", margs, seed);
  manifest["corpus_path"] = corpus_path;
  manifest["corpus_fingerprint"] = epo::file_fingerprint(corpus_path);
  manifest["tokenizer"] = tokenizer;
  manifest["steps"] = steps;
  manifest["window"] = window;
  manifest["lr"] = lr;
  manifest["model_spec"] = json{{"vocab_size", spec.vocab_size}, {"d_model", spec.d_model},
                                {"d_mlp", spec.d_mlp},           {"layers", spec.layers},
                                {"heads", spec.heads},           {"n_max", spec.n_max},
                                {"seed", spec.seed}};
  manifest["mean_ce_before"] = ce_before;
  manifest["mean_ce_after"] = ce_after;
  finish_manifest(manifest, args.out_dir, start, {"weights.bin", "vocab.json"});
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Evolutionary prompt optimization over a toy differentiable language model"};
  app.require_subcommand(1);

  CommonArgs args;
  uint64_t seed_value = 0;

  auto add_common = [&](CLI::App* cmd, bool needs_config, bool needs_model) {
    if (needs_config) cmd->add_option("--config", args.config_path, "run config JSON")->required();
    if (needs_model) {
      cmd->add_option("--model", args.model_path, "EPOW weight file")->required();
      cmd->add_option("--vocab", args.vocab_path, "vocabulary JSON (default: sibling vocab.json)");
    }
    cmd->add_option("--out", args.out_dir, "output directory")->required();
    cmd->add_option("--seed", seed_value, "override the config seed")
        ->each([&](const std::string&) { args.seed_override = seed_value; });
    cmd->add_option("--workers", args.workers, "parallel evaluation workers")->default_val(1);
  };

  // dream
  auto* dream = app.add_subcommand("dream", "run the evolutionary search");
  std::string init_text;
  add_common(dream, true, true);
  dream->add_option("--init", init_text, "initial prompt (default: random population)");

  // scan
  auto* scan = app.add_subcommand("scan", "score every corpus window against the feature");
  std::string corpus_path, corpus_format = "text";
  int top_n = 64, stride = 1;
  add_common(scan, true, true);
  scan->add_option("--corpus", corpus_path, "corpus file")->required();
  scan->add_option("--format", corpus_format, "corpus format: text | u32")->default_val("text");
  scan->add_option("--top", top_n, "windows to keep")->default_val(64);
  scan->add_option("--stride", stride, "window stride")->default_val(1);

  // random
  auto* random_cmd = app.add_subcommand("random", "uniform-random prompt baseline");
  int n_samples = 1024;
  add_common(random_cmd, true, true);
  random_cmd->add_option("--samples", n_samples, "number of random prompts")->default_val(1024);

  // attribute
  auto* attr = app.add_subcommand("attribute", "token-level causal attribution");
  std::string prompt_text, ids_csv;
  int attr_k = 32;
  add_common(attr, true, true);
  attr->add_option("--prompt", prompt_text, "prompt text");
  attr->add_option("--ids", ids_csv, "prompt as comma-separated token ids");
  attr->add_option("--k", attr_k, "candidate replacements per position")->default_val(32);

  // analyze
  auto* analyze = app.add_subcommand("analyze", "post-run analytics / layer sweep");
  std::string run_dir, slacks_csv, checkpoints_csv, layers_csv;
  int directions = 8, baseline_samples = 1024;
  bool sweep_mode = false;
  analyze->add_option("--run", run_dir, "dream output directory to analyze");
  analyze->add_flag("--sweep", sweep_mode, "run a residual-direction layer sweep");
  analyze->add_option("--config", args.config_path, "run config JSON (sweep mode)");
  analyze->add_option("--model", args.model_path, "EPOW weight file (sweep mode)");
  analyze->add_option("--vocab", args.vocab_path, "vocabulary JSON");
  analyze->add_option("--out", args.out_dir, "output directory")->required();
  analyze->add_option("--seed", seed_value, "override the config seed")
      ->each([&](const std::string&) { args.seed_override = seed_value; });
  analyze->add_option("--workers", args.workers, "parallel evaluation workers")->default_val(1);
  analyze->add_option("--slacks", slacks_csv, "comma-separated slack values");
  analyze->add_option("--checkpoints", checkpoints_csv, "comma-separated frontier checkpoints");
  analyze->add_option("--layers", layers_csv, "comma-separated layers (sweep mode)");
  analyze->add_option("--directions", directions, "directions per layer")->default_val(8);
  analyze->add_option("--baseline-samples", baseline_samples, "random prompts for z-units")
      ->default_val(1024);

  // train-toy
  auto* train = app.add_subcommand("train-toy", "fit the reference model on a corpus");
  std::string train_corpus, tokenizer = "word";
  int steps = 2000, d_model = 32, d_mlp = 128, layers = 2, heads = 4, n_max = 24, window = 16;
  double lr = 3e-3;
  train->add_option("--corpus", train_corpus, "UTF-8 corpus file")->required();
  train->add_option("--out", args.out_dir, "output directory")->required();
  train->add_option("--tokenizer", tokenizer, "word | byte")->default_val("word");
  train->add_option("--steps", steps, "training steps")->default_val(2000);
  train->add_option("--d", d_model, "model width")->default_val(32);
  train->add_option("--mlp", d_mlp, "MLP width")->default_val(128);
  train->add_option("--layers", layers, "transformer blocks")->default_val(2);
  train->add_option("--heads", heads, "attention heads")->default_val(4);
  train->add_option("--nmax", n_max, "maximum prompt length")->default_val(24);
  train->add_option("--window", window, "training window length")->default_val(16);
  train->add_option("--lr", lr, "learning rate")->default_val(3e-3);
  train->add_option("--seed", seed_value, "init/training seed")
      ->each([&](const std::string&) { args.seed_override = seed_value; });

  CLI11_PARSE(app, argc, argv);

  try {
    if (dream->parsed()) return cmd_dream(args, init_text);
    if (scan->parsed()) return cmd_scan(args, corpus_path, corpus_format, top_n, stride);
    if (random_cmd->parsed()) return cmd_random(args, n_samples);
    if (attr->parsed()) return cmd_attribute(args, prompt_text, ids_csv, attr_k);
    if (analyze->parsed()) {
      if (sweep_mode) {
        if (args.config_path.empty() || args.model_path.empty())
          throw epo::ConfigError("--sweep needs --config and --model");
        return cmd_analyze_sweep(args, layers_csv, directions, baseline_samples);
      }
      if (run_dir.empty()) throw epo::ConfigError("analyze needs --run or --sweep");
      return cmd_analyze_run(args, run_dir, slacks_csv, checkpoints_csv, baseline_samples);
    }
    if (train->parsed())
      return cmd_train_toy(args, train_corpus, tokenizer, steps, d_model, d_mlp, layers, heads,
                           n_max, window, lr);
  } catch (const epo::ConfigError& e) {
    std::cerr << "epo: config error: " << e.what() << "\n";
    return 2;
  } catch (const epo::InputError& e) {
    std::cerr << "epo: input error: " << e.what() << "\n";
    return 2;
  } catch (const epo::ModelError& e) {
    std::cerr << "epo: model error: " << e.what() << "\n";
    return 3;
  } catch (const epo::Error& e) {
    std::cerr << "epo: error: " << e.what() << "\n";
    return 1;
  } catch (const std::exception& e) {
    std::cerr << "epo: unexpected error: " << e.what() << "\n";
    return 1;
  }
  return 0;
}
