#pragma once

// A corpus whose feature-0 activations are fully controlled: a 1-d identity
// dictionary reads the single activation coordinate directly.

#include <cstdint>
#include <string>
#include <vector>

#include "sparsedict/activation_store.hpp"
#include "sparsedict/dictionary.hpp"

namespace testing {

struct InterpCorpus {
  sparsedict::Dictionary dict;
  sparsedict::Matrix data;
  sparsedict::TokenStream tokens;
};

// `n_varying` lines of 64 tokens whose activation pattern varies, followed
// by `n_flat` lines of constant activation. Line i peaks at 1 + i / 8.
inline InterpCorpus make_interp_corpus(int n_varying, int n_flat = 0, int line_length = 64) {
  using sparsedict::Index;
  InterpCorpus c;
  c.dict = {sparsedict::Matrix::Ones(1, 1), sparsedict::Vector::Zero(1), std::nullopt};
  const int lines = n_varying + n_flat;
  c.data = sparsedict::Matrix::Zero(static_cast<Index>(lines) * line_length, 1);
  for (int line = 0; line < lines; ++line) {
    const float peak = 1.0f + static_cast<float>(line) / 8.0f;
    for (int t = 0; t < line_length; ++t) {
      const Index row = static_cast<Index>(line) * line_length + t;
      float a = 0.25f;
      if (line < n_varying) {
        a = ((t * 7 + line) % 11) / 10.0f * peak;
        if (t == (line * 5) % line_length) a = peak;
      }
      c.data(row, 0) = a;
      c.tokens.tokens.push_back("w" + std::to_string((t * 3 + line) % 17));
      c.tokens.doc_ids.push_back(line);
    }
  }
  return c;
}

}  // namespace testing
