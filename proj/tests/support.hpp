#pragma once

// Shared fixtures and independent oracles for the test suites.

#include <algorithm>
#include <cstdint>
#include <vector>

#include "epo/core.hpp"
#include "epo/corpus.hpp"
#include "epo/model.hpp"
#include "epo/objectives.hpp"

namespace epo::test {

inline Vocabulary tiny_vocab(int size) {
  std::vector<std::string> tokens;
  tokens.reserve(static_cast<std::size_t>(size));
  for (int i = 0; i < size; ++i) tokens.push_back("t" + std::to_string(i));
  return Vocabulary(std::move(tokens), size - 1, " ");
}

inline ToyTransformerSpec tiny_spec(int vocab, uint32_t seed, int layers = 2, int d = 12,
                                    int mlp = 20, int heads = 2, int n_max = 6) {
  return ToyTransformerSpec{vocab, d, mlp, layers, heads, n_max, seed};
}

inline TokenSequence random_seq(int n, int vocab, uint64_t seed) {
  CounterRng rng{seed, 7777};
  std::vector<TokenId> ids(static_cast<std::size_t>(n));
  for (auto& id : ids) id = static_cast<TokenId>(rng.next_below(static_cast<uint64_t>(vocab)));
  return TokenSequence(std::move(ids));
}

inline Matrix onehot_rows(const TokenSequence& seq, int vocab) {
  Matrix rows = Matrix::Zero(seq.length(), vocab);
  for (int i = 0; i < seq.length(); ++i) rows(i, seq[i]) = 1.0;
  return rows;
}

// Central finite differences of `objective` on the relaxed one-hot input.
inline Matrix fd_gradient(const ToyTransformer& model, const TokenSequence& seq,
                          const ScalarObjective& objective, double h = 1e-5) {
  Matrix a = onehot_rows(seq, model.vocab_size());
  Matrix grad(seq.length(), model.vocab_size());
  for (int i = 0; i < seq.length(); ++i) {
    for (int v = 0; v < model.vocab_size(); ++v) {
      a(i, v) += h;
      double fp = objective(model.forward_relaxed(a), seq, nullptr);
      a(i, v) -= 2 * h;
      double fm = objective(model.forward_relaxed(a), seq, nullptr);
      a(i, v) += h;
      grad(i, v) = (fp - fm) / (2 * h);
    }
  }
  return grad;
}

inline double rel_err(double a, double b) {
  return std::abs(a - b) / std::max({std::abs(a), std::abs(b), 1e-6});
}

inline double max_rel_err(const Matrix& a, const Matrix& b) {
  double worst = 0.0;
  for (int i = 0; i < a.rows(); ++i)
    for (int j = 0; j < a.cols(); ++j) worst = std::max(worst, rel_err(a(i, j), b(i, j)));
  return worst;
}

}  // namespace epo::test
