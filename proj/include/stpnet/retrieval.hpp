#pragma once

#include <array>
#include <string>
#include <vector>

#include "stpnet/nn.hpp"
#include "stpnet/textbank.hpp"

namespace stpnet {

// Small image encoder producing the retrieval query vector F_v:
// four conv3x3+BN+ReLU+maxpool stages (1->16->32->64->128), then a fusion
// head (upsample stage-4, concat stage-3, 1x1 affine, global max pool,
// linear to D).
template <typename T>
struct RetrievalEncoderNet {
  Conv2dLayer<T> conv[4];
  BatchNorm2dLayer<T> bn[4];
  Conv2dLayer<T> fuse;  // 1x1 over concat(up(stage4), stage3)
  LinearLayer<T> head;  // fuse channels -> D

  static RetrievalEncoderNet create(ParamStore<T>& ps, const std::string& prefix,
                                    int64_t D, uint64_t master_seed);
  // img [B,1,H,W] with H,W divisible by 16 -> F_v [B,D]
  Var forward(Ctx<T>& ctx, Var img) const;
};

// One category's scoring outcome plus the retrieved phrase feature.
struct CategoryRetrieval {
  std::vector<double> cosines;  // raw cosine(F_v, pooled_j)
  std::vector<double> scores;   // softmax(cosines / tau)
  int j_star = -1;              // argmax(scores), first index on ties
  TextFeature f_t;
};

struct RetrievalResult {
  std::array<CategoryRetrieval, 4> cats;
  bool has_recombined = false;
  std::array<Tensor<double>, 4> recombined;  // F_text,1..4, each [L,D]
};

// softmax(cosine(fv, candidates)/tau) over one candidate list.
std::vector<double> score_category(const std::vector<double>& fv,
                                   const std::vector<Tensor<double>>& candidates,
                                   double tau);

// Exhaustive scan of all four categories; no gradient flows through this path.
RetrievalResult retrieve(const std::vector<double>& fv, const EncodedBank& bank,
                         double tau);

// Coarse-to-fine recombination: F_text,i = (1/i) * sum_{j<=i} tokens(f_t,j),
// accumulated in category order (optionally with LeftLoc/RightLoc swapped).
void recombine(RetrievalResult& result, bool swap_loc_order = false);

// Tape expression for the training path: rows of fv [B,D] are L2-normalized
// and scored against the (normalized) candidate matrix [K,D]; returns
// cosines [B,K] with gradient into fv.
template <typename T>
Var cosine_scores(Tape<T>& tape, Var fv, const Tensor<T>& candidate_pooled);

}  // namespace stpnet
