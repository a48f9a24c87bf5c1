#include <algorithm>
#include <cmath>

#include "stpnet/retrieval.hpp"

namespace stpnet {

template <typename T>
RetrievalEncoderNet<T> RetrievalEncoderNet<T>::create(ParamStore<T>& ps,
                                                      const std::string& prefix,
                                                      int64_t D, uint64_t master_seed) {
  RetrievalEncoderNet net;
  int64_t chans[5] = {1, 16, 32, 64, 128};
  for (int i = 0; i < 4; ++i) {
    std::string stage = prefix + ".stage" + std::to_string(i + 1);
    net.conv[i] = Conv2dLayer<T>::create(ps, stage + ".conv", chans[i], chans[i + 1], 3,
                                         1, 1, 1, 1, false, master_seed);
    net.bn[i] = BatchNorm2dLayer<T>::create(ps, stage + ".bn", chans[i + 1]);
  }
  net.fuse = Conv2dLayer<T>::create(ps, prefix + ".fuse", 128 + 64, 128, 1, 1, 0, 1, 1,
                                    true, master_seed);
  net.head = LinearLayer<T>::create(ps, prefix + ".head", 128, D, true, master_seed);
  return net;
}

template <typename T>
Var RetrievalEncoderNet<T>::forward(Ctx<T>& ctx, Var img) const {
  const Tensor<T>& iv = ctx.tape.val(img);
  require(iv.shape.size() == 4 && iv.shape[1] == 1, Status::InvalidArgument,
          "retrieval encoder: input must be [B,1,H,W]");
  require(iv.shape[2] % 16 == 0 && iv.shape[3] % 16 == 0, Status::InvalidArgument,
          "retrieval encoder: spatial dims must be divisible by 16");
  Var x = img;
  Var s3{};
  for (int i = 0; i < 4; ++i) {
    x = conv[i].forward(ctx, x);
    x = bn[i].forward(ctx, x);
    x = ctx.tape.relu(x);
    x = ctx.tape.maxpool2d(x, 2, 2);
    if (i == 2) s3 = x;
  }
  Var up = ctx.tape.upsample2x(x, UpsampleMode::Bilinear);
  Var cat = ctx.tape.concat({up, s3}, 1);
  Var fused = fuse.forward(ctx, cat);
  Var pooled = ctx.tape.global_max_pool(fused);  // [B,128]
  return head.forward(ctx, pooled);              // [B,D]
}

std::vector<double> score_category(const std::vector<double>& fv,
                                   const std::vector<Tensor<double>>& candidates,
                                   double tau) {
  require(tau > 0.0, Status::InvalidArgument, "score_category: tau must be > 0");
  require(!candidates.empty(), Status::InvalidArgument,
          "score_category: no candidates");
  double fnorm = 0.0;
  for (double v : fv) fnorm += v * v;
  fnorm = std::sqrt(fnorm);
  require(fnorm > 1e-12, Status::Numeric, "score_category: zero-norm query");
  std::vector<double> cos(candidates.size());
  for (size_t j = 0; j < candidates.size(); ++j) {
    const Tensor<double>& c = candidates[j];
    require(size_t(c.size()) == fv.size(), Status::InvalidArgument,
            "score_category: dimension mismatch");
    double dot = 0.0, cn = 0.0;
    for (size_t d = 0; d < fv.size(); ++d) {
      dot += fv[d] * c[int64_t(d)];
      cn += c[int64_t(d)] * c[int64_t(d)];
    }
    cn = std::sqrt(cn);
    require(cn > 1e-12, Status::Numeric, "score_category: zero-norm candidate");
    cos[j] = dot / (fnorm * cn);
  }
  double mx = *std::max_element(cos.begin(), cos.end());
  std::vector<double> scores(cos.size());
  double sum = 0.0;
  for (size_t j = 0; j < cos.size(); ++j) {
    scores[j] = std::exp((cos[j] - mx) / tau);
    sum += scores[j];
  }
  for (double& s : scores) s /= sum;
  return scores;
}

RetrievalResult retrieve(const std::vector<double>& fv, const EncodedBank& bank,
                         double tau) {
  RetrievalResult result;
  for (int cat = 0; cat < 4; ++cat) {
    const auto& feats = bank.features[size_t(cat)];
    require(!feats.empty(), Status::InvalidArgument, "retrieve: empty category");
    std::vector<Tensor<double>> candidates;
    candidates.reserve(feats.size());
    double fnorm = 0.0;
    for (double v : fv) fnorm += v * v;
    fnorm = std::sqrt(fnorm);
    require(fnorm > 1e-12, Status::Numeric, "retrieve: zero-norm query");
    CategoryRetrieval& cr = result.cats[size_t(cat)];
    cr.cosines.resize(feats.size());
    for (size_t j = 0; j < feats.size(); ++j) {
      const Tensor<double>& c = feats[j].pooled;
      double dot = 0.0, cn = 0.0;
      for (size_t d = 0; d < fv.size(); ++d) {
        dot += fv[d] * c[int64_t(d)];
        cn += c[int64_t(d)] * c[int64_t(d)];
      }
      cn = std::sqrt(cn);
      require(cn > 1e-12, Status::Numeric, "retrieve: zero-norm candidate");
      cr.cosines[j] = dot / (fnorm * cn);
      candidates.push_back(c);
    }
    cr.scores = score_category(fv, candidates, tau);
    cr.j_star = 0;
    for (size_t j = 1; j < cr.scores.size(); ++j)
      if (cr.scores[j] > cr.scores[size_t(cr.j_star)]) cr.j_star = int(j);
    cr.f_t = feats[size_t(cr.j_star)];
  }
  return result;
}

void recombine(RetrievalResult& result, bool swap_loc_order) {
  int order[4] = {0, 1, 2, 3};
  if (swap_loc_order) std::swap(order[2], order[3]);
  Shape shape;
  for (int i = 0; i < 4; ++i) {
    const TextFeature& f = result.cats[size_t(order[i])].f_t;
    require(f.tokens.size() > 0, Status::Contract,
            "recombine: retrieval result incomplete");
    if (i == 0)
      shape = f.tokens.shape;
    else
      require(f.tokens.shape == shape, Status::Contract,
              "recombine: mismatched token grids");
  }
  Tensor<double> acc = Tensor<double>::zeros(shape);
  for (int i = 0; i < 4; ++i) {
    const Tensor<double>& t = result.cats[size_t(order[i])].f_t.tokens;
    for (int64_t k = 0; k < acc.size(); ++k) acc[k] += t[k];
    result.recombined[size_t(i)] = Tensor<double>::zeros(shape);
    for (int64_t k = 0; k < acc.size(); ++k)
      result.recombined[size_t(i)][k] = acc[k] / double(i + 1);
  }
  result.has_recombined = true;
}

template <typename T>
Var cosine_scores(Tape<T>& tape, Var fv, const Tensor<T>& candidate_pooled) {
  require(candidate_pooled.shape.size() == 2, Status::InvalidArgument,
          "cosine_scores: candidates must be [K,D]");
  int64_t k = candidate_pooled.shape[0], d = candidate_pooled.shape[1];
  // normalized candidates stored transposed [D,K] for the matmul
  Tensor<T> bank_t = Tensor<T>::zeros({d, k});
  for (int64_t j = 0; j < k; ++j) {
    T norm = T(0);
    for (int64_t i = 0; i < d; ++i)
      norm += candidate_pooled[j * d + i] * candidate_pooled[j * d + i];
    norm = std::sqrt(norm);
    require(norm > T(1e-12), Status::Numeric, "cosine_scores: zero-norm candidate");
    for (int64_t i = 0; i < d; ++i)
      bank_t[i * k + j] = candidate_pooled[j * d + i] / norm;
  }
  Var fvn = tape.l2normalize_rows(fv);
  Var bank = tape.leaf(std::move(bank_t), false);
  return tape.matmul(fvn, bank);  // [B,K]
}

#define STPNET_INSTANTIATE_RETRIEVAL(T)                                        \
  template struct RetrievalEncoderNet<T>;                                      \
  template Var cosine_scores<T>(Tape<T>&, Var, const Tensor<T>&);

STPNET_INSTANTIATE_RETRIEVAL(float)
STPNET_INSTANTIATE_RETRIEVAL(double)

}  // namespace stpnet
