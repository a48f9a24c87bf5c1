#include <algorithm>
#include <cctype>
#include <sstream>

#include "stpnet/common.hpp"
#include "stpnet/textbank.hpp"

namespace stpnet {

namespace {

std::vector<std::string> location_phrases(const std::string& side,
                                          const std::string& organ) {
  // "All" coverage is normalized to the explicit "Upper middle lower" form.
  std::vector<std::string> out = {
      "No lesion in " + side + " " + organ,
      "Upper " + side + " " + organ,
      "Middle " + side + " " + organ,
      "Lower " + side + " " + organ,
      "Upper lower " + side + " " + organ,
      "Upper middle " + side + " " + organ,
      "Middle lower " + side + " " + organ,
      "Upper middle lower " + side + " " + organ,
  };
  return out;
}

std::vector<std::string> tokenize(const std::string& phrase) {
  std::string lower;
  lower.reserve(phrase.size());
  for (char c : phrase) lower.push_back(char(std::tolower(static_cast<unsigned char>(c))));
  std::istringstream ss(lower);
  std::vector<std::string> tokens;
  std::string tok;
  while (ss >> tok) tokens.push_back(tok);
  return tokens;
}

}  // namespace

TextBank build_text_bank(const std::string& domain) {
  require(domain == "lung" || domain == "polyp", Status::InvalidArgument,
          "build_text_bank: unknown domain '" + domain + "'");
  const std::string organ = domain;
  TextBank bank;
  bank.domain = domain;
  bank.categories[0] = {"Unilateral pulmonary infection",
                        "Bilateral pulmonary infection"};
  bank.categories[1] = {"One infected area", "Multiple infected areas"};
  bank.categories[2] = location_phrases("left", organ);
  bank.categories[3] = location_phrases("right", organ);
  return bank;
}

std::string serialize_text_bank(const TextBank& bank) {
  std::ostringstream out;
  out << "domain " << bank.domain << "\n";
  for (const auto& cat : bank.categories) {
    out << "category " << cat.size() << "\n";
    for (const auto& phrase : cat) out << phrase << "\n";
  }
  return out.str();
}

TextBank deserialize_text_bank(const std::string& text) {
  std::istringstream in(text);
  std::string line;
  require(bool(std::getline(in, line)) && line.rfind("domain ", 0) == 0, Status::Io,
          "text bank parse: missing domain line");
  TextBank bank;
  bank.domain = line.substr(7);
  for (auto& cat : bank.categories) {
    require(bool(std::getline(in, line)) && line.rfind("category ", 0) == 0, Status::Io,
            "text bank parse: missing category header");
    size_t n = std::stoul(line.substr(9));
    cat.resize(n);
    for (auto& phrase : cat)
      require(bool(std::getline(in, phrase)), Status::Io,
              "text bank parse: truncated phrase list");
  }
  return bank;
}

TextFeature encode_text(const TextBank& bank, int category, int index, uint64_t seed,
                        int64_t L, int64_t D) {
  require(category >= 1 && category <= 4, Status::InvalidArgument,
          "encode_text: category must be 1..4");
  const auto& cat = bank.categories[size_t(category - 1)];
  require(index >= 0 && size_t(index) < cat.size(), Status::InvalidArgument,
          "encode_text: phrase index out of range");
  require(L >= 1 && D >= 1, Status::InvalidArgument, "encode_text: L and D must be >= 1");

  std::vector<std::string> tokens = tokenize(cat[size_t(index)]);
  TextFeature f;
  f.category = category;
  f.index = index;
  f.n_tokens = int(std::min<size_t>(tokens.size(), size_t(L)));
  f.tokens = Tensor<double>::zeros({L, D});
  for (int r = 0; r < f.n_tokens; ++r) {
    Rng rng(fnv1a64(tokens[size_t(r)]) ^ seed);
    for (int64_t d = 0; d < D; ++d) f.tokens[r * D + d] = rng.normal();
  }
  f.pooled = pool_tokens(f);
  return f;
}

Tensor<double> pool_tokens(const TextFeature& feature) {
  require(feature.n_tokens >= 1, Status::InvalidArgument,
          "pool_tokens: feature has no non-pad rows");
  require(feature.tokens.shape.size() == 2, Status::InvalidArgument,
          "pool_tokens: tokens must be [L,D]");
  int64_t L = feature.tokens.shape[0], D = feature.tokens.shape[1];
  require(feature.n_tokens <= L, Status::InvalidArgument,
          "pool_tokens: n_tokens exceeds row count");
  Tensor<double> pooled = Tensor<double>::zeros({D});
  for (int r = 0; r < feature.n_tokens; ++r)
    for (int64_t d = 0; d < D; ++d) pooled[d] += feature.tokens[r * D + d];
  for (int64_t d = 0; d < D; ++d) pooled[d] /= double(feature.n_tokens);
  return pooled;
}

EncodedBank encode_bank(const TextBank& bank, uint64_t seed, int64_t L, int64_t D) {
  EncodedBank enc;
  enc.seed = seed;
  enc.L = L;
  enc.D = D;
  for (int cat = 1; cat <= 4; ++cat) {
    const auto& phrases = bank.categories[size_t(cat - 1)];
    for (size_t j = 0; j < phrases.size(); ++j)
      enc.features[size_t(cat - 1)].push_back(
          encode_text(bank, cat, int(j), seed, L, D));
  }
  return enc;
}

template <typename T>
Tensor<T> category_pooled_matrix(const EncodedBank& bank, int category) {
  require(category >= 1 && category <= 4, Status::InvalidArgument,
          "category_pooled_matrix: category must be 1..4");
  const auto& feats = bank.features[size_t(category - 1)];
  require(!feats.empty(), Status::InvalidArgument,
          "category_pooled_matrix: empty category");
  Tensor<T> m = Tensor<T>::zeros({int64_t(feats.size()), bank.D});
  for (size_t j = 0; j < feats.size(); ++j)
    for (int64_t d = 0; d < bank.D; ++d)
      m[int64_t(j) * bank.D + d] = T(feats[j].pooled[d]);
  return m;
}

template Tensor<float> category_pooled_matrix<float>(const EncodedBank&, int);
template Tensor<double> category_pooled_matrix<double>(const EncodedBank&, int);

}  // namespace stpnet
