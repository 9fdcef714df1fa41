#include <cmath>
#include <cstdio>
#include <filesystem>
#include <vector>

#include <gtest/gtest.h>

#include "epo/corpus.hpp"
#include "epo/model.hpp"
#include "epo/objectives.hpp"
#include "support.hpp"

using namespace epo;
using test::fd_gradient;
using test::max_rel_err;
using test::onehot_rows;
using test::random_seq;
using test::tiny_spec;

namespace {

void zero_weights(ToyTransformer& m) {
  auto zero_m = [](Matrix& x) { x.setZero(); };
  auto zero_v = [](Vector& x) { x.setZero(); };
  Weights& w = m.weights();
  zero_m(w.embed);
  zero_m(w.pos);
  for (auto& b : w.blocks) {
    zero_v(b.ln1_g);
    zero_v(b.ln1_b);
    zero_m(b.wq);
    zero_v(b.bq);
    zero_m(b.wk);
    zero_v(b.bk);
    zero_m(b.wv);
    zero_v(b.bv);
    zero_m(b.wo);
    zero_v(b.bo);
    zero_v(b.ln2_g);
    zero_v(b.ln2_b);
    zero_m(b.w1);
    zero_v(b.b1);
    zero_m(b.w2);
    zero_v(b.b2);
  }
  zero_v(w.lnf_g);
  zero_v(w.lnf_b);
  zero_m(w.unembed);
}

}  // namespace

TEST(Forward, ZeroWeightsGiveUniformDistribution) {
  ToyTransformer m(tiny_spec(10, 1));
  zero_weights(m);
  TokenSequence seq({1, 4, 7});
  ModelOutputs out = m.forward(seq);
  EXPECT_EQ(out.logits.rows(), 3);
  EXPECT_EQ(out.logits.cols(), 10);
  EXPECT_DOUBLE_EQ(out.logits.cwiseAbs().maxCoeff(), 0.0);
  // uniform cross-entropy = log V on every term
  auto terms = ce_terms_from(out, seq);
  for (double t : terms) EXPECT_NEAR(t, std::log(10.0), 1e-12);
}

TEST(Forward, SoftmaxRowsAreProbabilities) {
  ToyTransformer m(tiny_spec(16, 3));
  TokenSequence seq = random_seq(5, 16, 11);
  ModelOutputs out = m.forward(seq);
  for (int i = 0; i < out.logits.rows(); ++i) {
    Eigen::RowVectorXd row = out.logits.row(i);
    double mx = row.maxCoeff();
    Eigen::RowVectorXd p = (row.array() - mx).exp().matrix();
    p /= p.sum();
    EXPECT_NEAR(p.sum(), 1.0, 1e-9);
    EXPECT_GT(p.minCoeff(), 0.0);
  }
}

TEST(Forward, CausalityUnderSuffixPermutation) {
  ToyTransformer m(tiny_spec(16, 5, 2, 12, 20, 2, 8));
  TokenSequence a({3, 9, 1, 7, 2, 5});
  TokenSequence b({3, 9, 1, 5, 7, 2});  // same prefix through position 2
  ModelOutputs oa = m.forward(a);
  ModelOutputs ob = m.forward(b);
  for (int i = 0; i <= 2; ++i)
    for (int v = 0; v < 16; ++v) EXPECT_DOUBLE_EQ(oa.logits(i, v), ob.logits(i, v));
  for (int l = 0; l < 2; ++l)
    for (int i = 0; i <= 2; ++i) {
      EXPECT_DOUBLE_EQ((oa.residual[l].row(i) - ob.residual[l].row(i)).cwiseAbs().maxCoeff(), 0.0);
      EXPECT_DOUBLE_EQ((oa.mlp_acts[l].row(i) - ob.mlp_acts[l].row(i)).cwiseAbs().maxCoeff(), 0.0);
    }
}

TEST(Forward, DeterministicAcrossInstances) {
  ToyTransformerSpec spec = tiny_spec(20, 9);
  ToyTransformer a(spec), b(spec);
  TokenSequence seq = random_seq(4, 20, 5);
  ModelOutputs oa = a.forward(seq), ob = b.forward(seq);
  EXPECT_EQ(memcmp(oa.logits.data(), ob.logits.data(),
                   sizeof(double) * static_cast<std::size_t>(oa.logits.size())),
            0);
}

TEST(Forward, InputValidation) {
  ToyTransformer m(tiny_spec(8, 2, 1, 12, 20, 2, 4));
  EXPECT_THROW(m.forward(TokenSequence({1, 2, 3, 4, 5})), InputError);  // > n_max
  EXPECT_THROW(m.forward(TokenSequence(std::vector<TokenId>{})), InputError);
  EXPECT_THROW(m.forward(TokenSequence({9})), InputError);  // id out of range
}

// Golden forward values for the seeded reference model, generated by this
// implementation once its gradient checks passed, then frozen.
TEST(Forward, GoldenLogits) {
  ToyTransformerSpec spec{64, 32, 128, 2, 4, 16, 7};
  ToyTransformer m(spec);
  TokenSequence probe({5, 17, 42, 63, 0, 31, 8, 55});
  ModelOutputs out = m.forward(probe);
  // logits.row(7), first 8 entries
  const double expected[8] = {
      -0.083891609635172823, -0.27769765057823564, 0.71649865049776074, -0.17655055738869388,
      -0.239446298530926,    1.1170240879471429,   0.59335277959423804, -0.62150112213016673,
  };
  for (int v = 0; v < 8; ++v) EXPECT_NEAR(out.logits(7, v), expected[v], 1e-9);
}

TEST(CrossEntropy, MeanMatchesScoredPrompt) {
  ToyTransformer m(tiny_spec(12, 4));
  TokenSequence seq = random_seq(5, 12, 3);
  auto terms = m.cross_entropy_terms(seq);
  ASSERT_EQ(terms.size(), 5u);
  ScoredPrompt sp(seq, 0.0, terms);
  double mean = 0.0;
  for (double t : terms) mean += t;
  mean /= 5.0;
  EXPECT_DOUBLE_EQ(sp.mean_ce, mean);
}

TEST(CrossEntropy, MemorizedSequenceNearZero) {
  // A model trained on exactly one sequence should assign it near-zero CE.
  Vocabulary vocab = test::tiny_vocab(6);
  std::vector<TokenId> corpus{0, 1, 2, 3, 4, 0, 1, 2, 3, 4};
  ToyTransformerSpec spec = tiny_spec(6, 21, 1, 16, 32, 2, 10);
  ToyTransformer m(spec);
  m.set_bos_id(vocab.bos_id());
  TrainOptions opt;
  opt.window = 10;
  opt.seed = 3;
  m.train(corpus, 800, opt);
  TokenSequence seq({0, 1, 2, 3, 4, 0, 1, 2, 3, 4});
  auto terms = m.cross_entropy_terms(seq);
  double mean = 0.0;
  for (double t : terms) mean += t;
  mean /= static_cast<double>(terms.size());
  EXPECT_LT(mean, 0.1);
}

TEST(GradOnehot, ConstantObjectiveIsZero) {
  ToyTransformer m(tiny_spec(10, 6));
  TokenSequence seq = random_seq(4, 10, 9);
  ScalarObjective constant = [](const ModelOutputs&, const TokenSequence&, OutputSeeds*) {
    return 42.0;
  };
  OneHotGradient g = m.grad_onehot(seq, constant);
  EXPECT_DOUBLE_EQ(g.objective_value, 42.0);
  EXPECT_DOUBLE_EQ(g.grad.cwiseAbs().maxCoeff(), 0.0);
}

TEST(GradOnehot, LinearModelClosedForm) {
  // layers = 0: logits = (onehot . embed + pos) . unembed, so the gradient of
  // logits[n-1][v0] w.r.t. the one-hot entry (i, v) is [i == n-1] *
  // (embed . unembed)[v, v0]. Checkable by hand against the weight product.
  ToyTransformerSpec spec{9, 7, 4, 0, 1, 5, 13};
  ToyTransformer m(spec);
  TokenSequence seq({2, 5, 1});
  const TokenId v0 = 4;
  ScalarObjective objective = [&](const ModelOutputs& out, const TokenSequence&,
                                  OutputSeeds* seeds) {
    if (seeds) {
      seeds->d_logits = Matrix::Zero(out.logits.rows(), out.logits.cols());
      seeds->d_logits(out.logits.rows() - 1, v0) = 1.0;
    }
    return out.logits(out.logits.rows() - 1, v0);
  };
  OneHotGradient g = m.grad_onehot(seq, objective);
  Matrix product = m.weights().embed * m.weights().unembed;  // V x V
  for (int i = 0; i < 3; ++i)
    for (int v = 0; v < 9; ++v) {
      double expected = (i == 2) ? product(v, v0) : 0.0;
      EXPECT_NEAR(g.grad(i, v), expected, 1e-12);
    }
}

TEST(GradOnehot, MatchesFiniteDifferences) {
  // The central oracle: 20 random (model, prompt) pairs, full objective.
  int pairs = 0;
  for (uint64_t trial = 0; trial < 20; ++trial) {
    ToyTransformerSpec spec = tiny_spec(14, static_cast<uint32_t>(200 + trial));
    ToyTransformer m(spec);
    TokenSequence seq = random_seq(4, 14, trial);
    ScalarObjective obj =
        make_epo_objective(FeatureSpec{FeatureKind::neuron, 1, static_cast<int>(trial % 20), 0,
                                       {}, Reduction::max},
                           0.5 + 0.1 * static_cast<double>(trial));
    OneHotGradient g = m.grad_onehot(seq, obj);
    Matrix fd = fd_gradient(m, seq, obj);
    EXPECT_LT(max_rel_err(g.grad, fd), 1e-4) << "trial " << trial;
    ++pairs;
  }
  EXPECT_EQ(pairs, 20);
}

TEST(GradOnehot, CausalZeroRowsPastReadPosition) {
  // An objective reading only position-i outputs has exactly zero gradient
  // rows for positions > i.
  ToyTransformer m(tiny_spec(12, 8, 2, 12, 20, 2, 8));
  TokenSequence seq = random_seq(6, 12, 17);
  const int read_pos = 2;
  ScalarObjective objective = [&](const ModelOutputs& out, const TokenSequence&,
                                  OutputSeeds* seeds) {
    if (seeds) {
      seeds->d_mlp_acts.resize(out.mlp_acts.size());
      seeds->d_mlp_acts[1] = Matrix::Zero(out.mlp_acts[1].rows(), out.mlp_acts[1].cols());
      seeds->d_mlp_acts[1](read_pos, 3) = 1.0;
    }
    return out.mlp_acts[1](read_pos, 3);
  };
  OneHotGradient g = m.grad_onehot(seq, objective);
  for (int i = read_pos + 1; i < 6; ++i)
    EXPECT_DOUBLE_EQ(g.grad.row(i).cwiseAbs().maxCoeff(), 0.0);
  EXPECT_GT(g.grad.topRows(read_pos + 1).cwiseAbs().maxCoeff(), 0.0);
}

TEST(Training, ZeroStepsIsNoOp) {
  ToyTransformerSpec spec = tiny_spec(8, 12);
  ToyTransformer a(spec), b(spec);
  std::vector<TokenId> corpus{0, 1, 2, 3, 4, 5, 6, 7, 0, 1, 2, 3};
  b.train(corpus, 0);
  EXPECT_EQ(memcmp(a.weights().embed.data(), b.weights().embed.data(),
                   sizeof(double) * static_cast<std::size_t>(a.weights().embed.size())),
            0);
}

TEST(Training, LearnsBelowUniform) {
  std::string text = synthetic_corpus(11, 2000);
  Vocabulary vocab = word_vocabulary(text);
  std::vector<TokenId> corpus = tokenize_words(text, vocab);
  ToyTransformerSpec spec{vocab.size(), 24, 48, 2, 2, 12, 33};
  ToyTransformer m(spec);
  m.set_bos_id(vocab.bos_id());
  double before = m.mean_corpus_ce(corpus, 12);
  TrainOptions opt;
  opt.window = 12;
  opt.seed = 1;
  m.train(corpus, 800, opt);
  double after = m.mean_corpus_ce(corpus, 12);
  EXPECT_LT(after, before);
  EXPECT_LT(after, std::log(static_cast<double>(vocab.size())));
}

TEST(Training, HeldOutBeatsRandomStringsByOneNat) {
  // Threshold frozen from the first CI run of this fixture: the trained model
  // scores held-out grammar text at least 1 nat better than uniform noise.
  std::string train_text = synthetic_corpus(11, 3000);
  std::string held_text = synthetic_corpus(77, 600);
  Vocabulary vocab = word_vocabulary(train_text + " " + held_text);
  std::vector<TokenId> train_ids = tokenize_words(train_text, vocab);
  std::vector<TokenId> held_ids = tokenize_words(held_text, vocab);
  ToyTransformerSpec spec{vocab.size(), 24, 48, 2, 2, 12, 34};
  ToyTransformer m(spec);
  m.set_bos_id(vocab.bos_id());
  TrainOptions opt;
  opt.window = 12;
  opt.seed = 2;
  m.train(train_ids, 1500, opt);

  CounterRng rng{123, 9};
  std::vector<TokenId> noise(600);
  for (auto& id : noise)
    id = static_cast<TokenId>(rng.next_below(static_cast<uint64_t>(vocab.size())));
  double held_ce = m.mean_corpus_ce(held_ids, 12);
  double noise_ce = m.mean_corpus_ce(noise, 12);
  EXPECT_GE(noise_ce - held_ce, 1.0);
}

TEST(Training, DeterministicGivenSeed) {
  std::vector<TokenId> corpus;
  for (int i = 0; i < 200; ++i) corpus.push_back(static_cast<TokenId>(i % 7));
  ToyTransformerSpec spec = tiny_spec(7, 40, 1, 12, 20, 2, 8);
  ToyTransformer a(spec), b(spec);
  TrainOptions opt;
  opt.seed = 5;
  opt.window = 8;
  a.train(corpus, 50, opt);
  b.train(corpus, 50, opt);
  EXPECT_EQ(memcmp(a.weights().embed.data(), b.weights().embed.data(),
                   sizeof(double) * static_cast<std::size_t>(a.weights().embed.size())),
            0);
  EXPECT_THROW(a.train({}, 5), InputError);
}

TEST(Serialization, RoundTripBitIdentical) {
  namespace fs = std::filesystem;
  ToyTransformerSpec spec = tiny_spec(18, 55);
  ToyTransformer m(spec);
  std::string path = (fs::temp_directory_path() / "epo_test_weights.bin").string();
  m.save(path);
  ToyTransformer loaded = ToyTransformer::load(path);
  EXPECT_EQ(loaded.spec(), spec);
  TokenSequence seq = random_seq(4, 18, 2);
  ModelOutputs oa = m.forward(seq), ob = loaded.forward(seq);
  EXPECT_EQ(memcmp(oa.logits.data(), ob.logits.data(),
                   sizeof(double) * static_cast<std::size_t>(oa.logits.size())),
            0);
  // magic check
  std::ifstream in(path, std::ios::binary);
  char magic[4];
  in.read(magic, 4);
  EXPECT_EQ(std::string(magic, 4), "EPOW");
  fs::remove(path);
  EXPECT_THROW(ToyTransformer::load(path), ModelError);
}
