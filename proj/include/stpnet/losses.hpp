#pragma once

#include <array>
#include <cstdint>
#include <vector>

#include "stpnet/nn.hpp"
#include "stpnet/retrieval.hpp"
#include "stpnet/textbank.hpp"

namespace stpnet {

// Smooth overlap score over the whole batch:
//   (2*sum(p*y) + eps) / (sum(p) + sum(y) + eps),  p = sigmoid(logits).
// Scalar in (0, 1]; differentiable everywhere, including empty targets.
template <typename T>
Var soft_dice(Tape<T>& tp, Var logits, const Tensor<T>& target, double eps = 1e-6);

// (1 - soft_dice) + pixel-mean binary cross entropy on the logits.
// Target values must be exactly 0 or 1.
template <typename T>
Var seg_loss(Tape<T>& tp, Var logits, const Tensor<T>& target);

template <typename T>
struct RetrievalLossOut {
  Var total;                         // scalar, sum of the four category terms
  std::array<Var, 4> per_category;   // batch-averaged -log p_positive terms
};

// Contrastive phrase-matching objective: for each category, softmax over the
// cosine similarities (scaled by 1/tau) of the query against every candidate
// of that category, take -log of the positive's probability, average over the
// batch, and sum across the four categories.
template <typename T>
RetrievalLossOut<T> retrieval_loss(Tape<T>& tp, Var fv,
                                   const EncodedBank& bank,
                                   const std::vector<CategoryLabels>& gt,
                                   double tau);

// Four linear classification heads on the query vector, one per text
// category, trained with a focusing weight (1-p)^gamma on the positive's
// log-probability. gamma = 0 reduces to plain cross entropy.
template <typename T>
struct FocalHeads {
  std::array<LinearLayer<T>, 4> heads;
  static FocalHeads create(ParamStore<T>& ps, const std::string& prefix,
                           int64_t d, uint64_t seed,
                           const std::array<int64_t, 4>& sizes = {2, 2, 8, 8});
  Var loss(Ctx<T>& ctx, Var fv, const std::vector<CategoryLabels>& gt,
           double gamma) const;
};

template <typename T>
struct LossReport {
  Var seg;
  Var retrieval;
  Var focal;
  Var mix;
  std::array<Var, 4> retrieval_per_category;
};

// mix = lambda1*seg + lambda2*retrieval + lambda3*focal on one shared batch.
template <typename T>
LossReport<T> mixed_loss(Ctx<T>& ctx, Var logits, const Tensor<T>& target,
                         Var fv, const EncodedBank& bank,
                         const FocalHeads<T>& heads,
                         const std::vector<CategoryLabels>& gt, double tau,
                         double gamma, double lambda1, double lambda2,
                         double lambda3);

// Scalar evaluation metrics on binarized masks. Degenerate conventions:
// both masks empty -> all four are 1; an empty prediction against a nonempty
// target (or vice versa) scores 0 on the affected ratio.
struct MaskMetrics {
  double dice = 0;
  double iou = 0;
  double precision = 0;
  double recall = 0;
};

MaskMetrics mask_metrics(const std::vector<uint8_t>& pred,
                         const std::vector<uint8_t>& gt);

// Threshold logits at 0 (i.e. sigmoid at 0.5) into a binary mask.
template <typename T>
std::vector<uint8_t> binarize_logits(const Tensor<T>& logits);

}  // namespace stpnet
