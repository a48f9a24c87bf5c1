#pragma once

#include <array>
#include <string>
#include <vector>

#include "stpnet/tensor.hpp"

namespace stpnet {

// Four ordered phrase categories: Infection (2), Num (2), LeftLoc (8), RightLoc (8).
struct TextBank {
  std::string domain;  // "lung" or "polyp"
  std::array<std::vector<std::string>, 4> categories;
};

TextBank build_text_bank(const std::string& domain);

std::string serialize_text_bank(const TextBank& bank);
TextBank deserialize_text_bank(const std::string& text);

// One encoded phrase: frozen token features [L,D] (zero rows = padding) plus
// the mean over non-pad rows.
struct TextFeature {
  Tensor<double> tokens;  // [L, D]
  Tensor<double> pooled;  // [D]
  int category = 0;       // 1..4
  int index = 0;          // position within category
  int n_tokens = 0;       // non-pad rows
};

// Deterministic frozen encoder: lowercase whitespace tokens, each token's
// D-vector drawn from a generator seeded by hash(token) ^ seed; pad/truncate
// to L rows. Pure function of (phrase, seed) — call order never matters.
TextFeature encode_text(const TextBank& bank, int category, int index, uint64_t seed,
                        int64_t L = 8, int64_t D = 32);

Tensor<double> pool_tokens(const TextFeature& feature);

struct EncodedBank {
  std::array<std::vector<TextFeature>, 4> features;
  uint64_t seed = 0;
  int64_t L = 8;
  int64_t D = 32;
};

EncodedBank encode_bank(const TextBank& bank, uint64_t seed, int64_t L = 8,
                        int64_t D = 32);

// Pooled vectors of one category stacked as rows [K, D].
template <typename T>
Tensor<T> category_pooled_matrix(const EncodedBank& bank, int category);

}  // namespace stpnet
