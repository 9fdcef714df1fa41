// End-to-end tests of the command-line surface: every subcommand is exercised
// as a subprocess against small fixtures built with the library.

#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include <gtest/gtest.h>
#include <nlohmann/json.hpp>

#include "epo/baselines.hpp"
#include "epo/corpus.hpp"
#include "epo/io.hpp"
#include "epo/model.hpp"
#include "support.hpp"

using namespace epo;
namespace fs = std::filesystem;
using nlohmann::json;

namespace {

struct CliResult {
  int exit_code = -1;
  std::string err;
};

CliResult run_cli(const std::string& args) {
  fs::path err_path = fs::temp_directory_path() / "epo_cli_stderr.txt";
  std::string cmd = std::string(EPO_CLI_BIN) + " " + args + " 2>" + err_path.string();
  int status = std::system(cmd.c_str());
  CliResult r;
  r.exit_code = WEXITSTATUS(status);
  std::ifstream err(err_path);
  std::ostringstream buf;
  buf << err.rdbuf();
  r.err = buf.str();
  return r;
}

std::string read_file(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::ostringstream buf;
  buf << in.rdbuf();
  return buf.str();
}

// One trained-model fixture shared by all CLI tests.
class CliFixture : public ::testing::Test {
 protected:
  static void SetUpTestSuite() {
    root_ = new fs::path(fs::temp_directory_path() / "epo_cli_fixture");
    fs::remove_all(*root_);
    fs::create_directories(*root_);
    corpus_path_ = new std::string(std::string(EPO_DATA_DIR) + "/toy_corpus.txt");

    CliResult r = run_cli("train-toy --corpus " + *corpus_path_ + " --out " + model_dir().string() +
                          " --steps 150 --d 16 --mlp 32 --layers 2 --heads 2 --nmax 14 --seed 5");
    ASSERT_EQ(r.exit_code, 0) << r.err;

    std::ofstream cfg(config_path());
    cfg << R"({"T": 10, "M": 4, "r": 8, "k": 8, "n": 5, "T_restart": 5, "seed": 3,
               "lambda_lo": 0.1, "lambda_hi": 10.0,
               "feature": {"kind": "neuron", "layer": 1, "index": 2, "reduction": "max"}})";
  }

  static void TearDownTestSuite() {
    delete root_;
    delete corpus_path_;
    root_ = nullptr;
    corpus_path_ = nullptr;
  }

  static fs::path model_dir() { return *root_ / "model"; }
  static std::string model_path() { return (model_dir() / "weights.bin").string(); }
  static std::string config_path() { return (*root_ / "config.json").string(); }
  static fs::path out(const std::string& name) { return *root_ / name; }

  static fs::path* root_;
  static std::string* corpus_path_;
};

fs::path* CliFixture::root_ = nullptr;
std::string* CliFixture::corpus_path_ = nullptr;

}  // namespace

TEST_F(CliFixture, TrainToyWroteModelVocabAndManifest) {
  EXPECT_TRUE(fs::exists(model_path()));
  EXPECT_TRUE(fs::exists(model_dir() / "vocab.json"));
  json manifest = read_manifest(model_dir().string());
  EXPECT_EQ(manifest.at("command"), "train-toy");
  EXPECT_LT(manifest.at("mean_ce_after").get<double>(),
            manifest.at("mean_ce_before").get<double>());
  EXPECT_EQ(manifest.at("model_fingerprint"), file_fingerprint(model_path()));
  std::string bytes = read_file(model_path());
  EXPECT_EQ(bytes.substr(0, 4), "EPOW");
}

TEST_F(CliFixture, MissingConfigExitsTwoNamingPath) {
  CliResult r = run_cli("dream --config /nope/absent.json --model " + model_path() + " --out " +
                        out("d0").string());
  EXPECT_EQ(r.exit_code, 2);
  EXPECT_NE(r.err.find("/nope/absent.json"), std::string::npos);
}

TEST_F(CliFixture, UnknownConfigKeyExitsTwo) {
  std::string bad = (out("bad.json")).string();
  std::ofstream f(bad);
  f << R"({"T": 5, "lambda_low": 0.1})";
  f.close();
  CliResult r = run_cli("dream --config " + bad + " --model " + model_path() + " --out " +
                        out("d_bad").string());
  EXPECT_EQ(r.exit_code, 2);
  EXPECT_NE(r.err.find("lambda_low"), std::string::npos);
}

TEST_F(CliFixture, CorruptModelExitsThree) {
  std::string garbage = (out("garbage.bin")).string();
  std::ofstream f(garbage, std::ios::binary);
  f << "NOPE garbage";
  f.close();
  CliResult r = run_cli("dream --config " + config_path() + " --model " + garbage + " --out " +
                        out("d_garbage").string());
  EXPECT_EQ(r.exit_code, 3);
}

TEST_F(CliFixture, DreamZeroIterationsExportsInitialPopulation) {
  std::string cfg = (out("t0.json")).string();
  {
    std::ofstream f(cfg);
    f << R"({"T": 0, "M": 3, "r": 4, "k": 4, "n": 5, "seed": 9,
             "feature": {"kind": "neuron", "layer": 0, "index": 1}})";
  }
  fs::path dir = out("dream_t0");
  CliResult r = run_cli("dream --config " + cfg + " --model " + model_path() + " --out " +
                        dir.string());
  EXPECT_EQ(r.exit_code, 0) << r.err;
  EXPECT_TRUE(fs::exists(dir / "frontier.csv"));
  EXPECT_TRUE(fs::exists(dir / "iterations.jsonl"));
  EXPECT_TRUE(fs::exists(dir / "manifest.json"));
  EXPECT_TRUE(read_file(dir / "iterations.jsonl").empty());
  auto history = read_history_jsonl((dir / "history.jsonl").string());
  EXPECT_EQ(history.size(), 3u);
  for (const auto& h : history) EXPECT_EQ(h.iteration, 0);
  // frontier rows all discovered at iteration 0
  std::istringstream frontier(read_file(dir / "frontier.csv"));
  std::string line;
  std::getline(frontier, line);
  EXPECT_EQ(line, "feature,mean_ce,perplexity,text,iteration");
  int rows = 0;
  while (std::getline(frontier, line)) {
    EXPECT_EQ(line.substr(line.rfind(',') + 1), "0");
    ++rows;
  }
  EXPECT_GE(rows, 1);
}

TEST_F(CliFixture, DreamRunsAreReproducibleByteForByte) {
  fs::path a = out("dream_a"), b = out("dream_b");
  CliResult ra = run_cli("dream --config " + config_path() + " --model " + model_path() +
                         " --out " + a.string());
  CliResult rb = run_cli("dream --config " + config_path() + " --model " + model_path() +
                         " --out " + b.string());
  ASSERT_EQ(ra.exit_code, 0) << ra.err;
  ASSERT_EQ(rb.exit_code, 0) << rb.err;
  EXPECT_EQ(read_file(a / "frontier.csv"), read_file(b / "frontier.csv"));
  EXPECT_EQ(read_file(a / "iterations.jsonl"), read_file(b / "iterations.jsonl"));
  EXPECT_EQ(read_file(a / "history.jsonl"), read_file(b / "history.jsonl"));
  // manifests agree on everything except wall-clock duration
  json ma = read_manifest(a.string()), mb = read_manifest(b.string());
  ma.erase("duration_seconds");
  mb.erase("duration_seconds");
  EXPECT_EQ(ma, mb);
}

TEST_F(CliFixture, DreamWorkerCountDoesNotChangeOutputs) {
  fs::path a = out("dream_w1"), b = out("dream_w4");
  ASSERT_EQ(run_cli("dream --config " + config_path() + " --model " + model_path() + " --out " +
                    a.string() + " --workers 1")
                .exit_code,
            0);
  ASSERT_EQ(run_cli("dream --config " + config_path() + " --model " + model_path() + " --out " +
                    b.string() + " --workers 4")
                .exit_code,
            0);
  EXPECT_EQ(read_file(a / "frontier.csv"), read_file(b / "frontier.csv"));
}

TEST_F(CliFixture, SeedFlagOverridesConfig) {
  fs::path a = out("dream_seed3"), b = out("dream_seed4");
  ASSERT_EQ(run_cli("dream --config " + config_path() + " --model " + model_path() + " --out " +
                    a.string())
                .exit_code,
            0);
  ASSERT_EQ(run_cli("dream --config " + config_path() + " --model " + model_path() + " --out " +
                    b.string() + " --seed 4")
                .exit_code,
            0);
  EXPECT_NE(read_file(a / "frontier.csv"), read_file(b / "frontier.csv"));
  EXPECT_EQ(read_manifest(b.string()).at("seed").get<uint64_t>(), 4u);
}

TEST_F(CliFixture, ScanMatchesFullSortOracle) {
  fs::path dir = out("scan");
  CliResult r = run_cli("scan --config " + config_path() + " --model " + model_path() +
                        " --corpus " + *corpus_path_ + " --out " + dir.string() +
                        " --top 8 --workers 2");
  ASSERT_EQ(r.exit_code, 0) << r.err;

  // independent full sort of every window using the library
  ToyTransformer model = ToyTransformer::load(model_path());
  Vocabulary vocab = read_vocab_json((model_dir() / "vocab.json").string());
  model.set_bos_id(vocab.bos_id());
  auto corpus = tokenize_words(read_text_file(*corpus_path_), vocab);
  FeatureSpec feature{FeatureKind::neuron, 1, 2, 0, {}, Reduction::max};
  Scorer<ToyTransformer> scorer{&model, &model, feature};
  std::vector<std::pair<double, std::size_t>> all;
  for (std::size_t s = 0; s + 5 <= corpus.size(); ++s) {
    std::vector<TokenId> ids(corpus.begin() + static_cast<std::ptrdiff_t>(s),
                             corpus.begin() + static_cast<std::ptrdiff_t>(s) + 5);
    all.emplace_back(scorer.score(TokenSequence(std::move(ids))).feature, s);
  }
  std::sort(all.begin(), all.end(), [](auto& a, auto& b) {
    if (a.first != b.first) return a.first > b.first;
    return a.second < b.second;
  });

  std::istringstream scan(read_file(dir / "scan.csv"));
  std::string line;
  std::getline(scan, line);
  EXPECT_EQ(line, "feature,mean_ce,text,start");
  for (int i = 0; i < 8; ++i) {
    ASSERT_TRUE(std::getline(scan, line));
    double feature_got = std::stod(line.substr(0, line.find(',')));
    std::size_t start_got = std::stoull(line.substr(line.rfind(',') + 1));
    EXPECT_DOUBLE_EQ(feature_got, all[static_cast<std::size_t>(i)].first);
    EXPECT_EQ(start_got, all[static_cast<std::size_t>(i)].second);
  }
}

TEST_F(CliFixture, RandomReportsDegenerateBaseline) {
  // Zero-weight model: the feature is constant, so sigma is 0 and the command
  // warns about degeneracy.
  fs::path zdir = out("zero_model");
  fs::create_directories(zdir);
  Vocabulary vocab = read_vocab_json((model_dir() / "vocab.json").string());
  ToyTransformerSpec spec{vocab.size(), 8, 12, 1, 2, 8, 1};
  ToyTransformer zero(spec);
  zero.weights().embed.setZero();
  zero.weights().pos.setZero();
  for (auto& b : zero.weights().blocks) {
    b.wq.setZero();
    b.wk.setZero();
    b.wv.setZero();
    b.wo.setZero();
    b.w1.setZero();
    b.w2.setZero();
  }
  zero.save((zdir / "weights.bin").string());
  write_vocab_json((zdir / "vocab.json").string(), vocab);

  std::string cfg = (out("zcfg.json")).string();
  {
    std::ofstream f(cfg);
    f << R"({"n": 4, "seed": 2, "feature": {"kind": "neuron", "layer": 0, "index": 3}})";
  }
  fs::path dir = out("random_degenerate");
  CliResult r = run_cli("random --config " + cfg + " --model " + (zdir / "weights.bin").string() +
                        " --out " + dir.string() + " --samples 2");
  EXPECT_EQ(r.exit_code, 0) << r.err;
  EXPECT_NE(r.err.find("degenerate"), std::string::npos);
  std::istringstream csv(read_file(dir / "random.csv"));
  std::string header, row;
  std::getline(csv, header);
  std::getline(csv, row);
  EXPECT_EQ(header, "mu_random,sigma_random,max_alignment,n_samples,degenerate");
  EXPECT_NE(row.find(",true"), std::string::npos);
  EXPECT_EQ(row.substr(0, row.find(',')), "0");  // mu of a constant-zero feature
}

TEST_F(CliFixture, RandomStatsMatchSamplesFile) {
  fs::path dir = out("random_ok");
  CliResult r = run_cli("random --config " + config_path() + " --model " + model_path() +
                        " --out " + dir.string() + " --samples 64");
  ASSERT_EQ(r.exit_code, 0) << r.err;
  std::istringstream samples(read_file(dir / "samples.csv"));
  std::string line;
  std::getline(samples, line);
  std::vector<double> values;
  while (std::getline(samples, line)) values.push_back(std::stod(line.substr(line.find(',') + 1)));
  ASSERT_EQ(values.size(), 64u);
  RandomBaselineStats expected = compute_stats(values);
  std::istringstream stats(read_file(dir / "random.csv"));
  std::getline(stats, line);
  std::getline(stats, line);
  double mu = std::stod(line.substr(0, line.find(',')));
  EXPECT_NEAR(mu, expected.mu_random, 1e-12);
}

TEST_F(CliFixture, AttributeWritesCsvAndHtml) {
  fs::path dir = out("attribution");
  CliResult r = run_cli("attribute --config " + config_path() + " --model " + model_path() +
                        " --out " + dir.string() +
                        " --prompt \"the quick dog sees a\" --k 6");
  ASSERT_EQ(r.exit_code, 0) << r.err;
  std::string csv = read_file(dir / "attribution.csv");
  EXPECT_NE(csv.find("position,token,original,delta_worst,delta_best"), std::string::npos);
  EXPECT_EQ(std::count(csv.begin(), csv.end(), '\n'), 6);  // header + 5 positions
  std::string html = read_file(dir / "attribution.html");
  EXPECT_NE(html.find("<!DOCTYPE html>"), std::string::npos);
  EXPECT_NE(html.find("attribution-data"), std::string::npos);
}

TEST_F(CliFixture, AnalyzeReproducesRunFrontier) {
  fs::path run_dir = out("dream_for_analysis");
  ASSERT_EQ(run_cli("dream --config " + config_path() + " --model " + model_path() + " --out " +
                    run_dir.string())
                .exit_code,
            0);
  fs::path dir = out("analysis");
  CliResult r = run_cli("analyze --run " + run_dir.string() + " --out " + dir.string() +
                        " --baseline-samples 64 --checkpoints 0,5,10");
  ASSERT_EQ(r.exit_code, 0) << r.err;
  EXPECT_TRUE(fs::exists(dir / "slack_curve.csv"));

  // frontier_10.csv must equal the run's own frontier (projected columns)
  std::istringstream run_frontier(read_file(run_dir / "frontier.csv"));
  std::istringstream analyzed(read_file(dir / "frontier_10.csv"));
  std::string a, b;
  std::getline(run_frontier, a);
  std::getline(analyzed, b);
  EXPECT_EQ(b, "feature,mean_ce,text");
  std::vector<std::string> projected, got;
  while (std::getline(run_frontier, a)) {
    // columns: feature,mean_ce,perplexity,text,iteration -> take 1,2 and 4
    std::size_t c1 = a.find(','), c2 = a.find(',', c1 + 1), c3 = a.find(',', c2 + 1);
    std::size_t c4 = a.rfind(',');
    projected.push_back(a.substr(0, c2) + "," + a.substr(c3 + 1, c4 - c3 - 1));
  }
  while (std::getline(analyzed, b)) got.push_back(b);
  EXPECT_EQ(projected, got);

  // slack curve is monotone non-increasing
  std::istringstream slack(read_file(dir / "slack_curve.csv"));
  std::getline(slack, a);
  double prev = 1e300;
  while (std::getline(slack, a)) {
    double ce = std::stod(a.substr(a.find(',') + 1));
    EXPECT_LE(ce, prev + 1e-15);
    prev = ce;
  }
}

TEST_F(CliFixture, AnalyzeDetectsFingerprintMismatch) {
  fs::path run_dir = out("dream_tamper");
  ASSERT_EQ(run_cli("dream --config " + config_path() + " --model " + model_path() + " --out " +
                    run_dir.string())
                .exit_code,
            0);
  // tamper: point the manifest at a different weight file
  json manifest = read_manifest(run_dir.string());
  fs::path other_dir = out("other_model");
  ASSERT_EQ(run_cli("train-toy --corpus " + *corpus_path_ + " --out " + other_dir.string() +
                    " --steps 0 --d 16 --mlp 32 --layers 2 --heads 2 --nmax 14 --seed 6")
                .exit_code,
            0);
  manifest["model_path"] = (other_dir / "weights.bin").string();
  write_manifest(run_dir.string(), manifest);
  CliResult r = run_cli("analyze --run " + run_dir.string() + " --out " +
                        out("analysis_tamper").string() + " --baseline-samples 16");
  EXPECT_EQ(r.exit_code, 3);
  EXPECT_NE(r.err.find("fingerprint"), std::string::npos);
}

TEST_F(CliFixture, SweepWritesPerDirectionAndAggregateRows) {
  std::string cfg = (out("sweep_cfg.json")).string();
  {
    std::ofstream f(cfg);
    f << R"({"T": 4, "M": 2, "r": 4, "k": 6, "n": 5, "T_restart": 0, "seed": 11})";
  }
  fs::path dir = out("sweep");
  CliResult r = run_cli("analyze --sweep --config " + cfg + " --model " + model_path() +
                        " --layers 0,1 --directions 2 --baseline-samples 32 --out " +
                        dir.string());
  ASSERT_EQ(r.exit_code, 0) << r.err;
  std::string rows = read_file(dir / "layer_sweep.csv");
  EXPECT_NE(rows.find("layer,mean_z,std_z,n_directions"), std::string::npos);
  EXPECT_EQ(std::count(rows.begin(), rows.end(), '\n'), 3);  // header + 2 layers
  std::string dirs = read_file(dir / "sweep_directions.csv");
  EXPECT_EQ(std::count(dirs.begin(), dirs.end(), '\n'), 5);  // header + 4 directions
}
