#include "stpnet/losses.hpp"

#include <cmath>
#include <string>

namespace stpnet {

namespace {

// one-hot rows for the batch's positive indices, shaped [B, K]
template <typename T>
Tensor<T> positive_mask(const std::vector<CategoryLabels>& gt, int cat,
                        int64_t k) {
  int64_t b = int64_t(gt.size());
  Tensor<T> mask = Tensor<T>::zeros({b, k});
  for (int64_t i = 0; i < b; ++i) {
    int pos = gt[size_t(i)][size_t(cat)];
    require(pos >= 0 && int64_t(pos) < k, Status::InvalidArgument,
            "loss: positive index " + std::to_string(pos) +
                " out of range for category " + std::to_string(cat + 1));
    mask[i * k + pos] = T(1);
  }
  return mask;
}

// batch mean of -log p_positive given row-wise log-probabilities [B, K]
template <typename T>
Var mean_negative_picked(Tape<T>& tp, Var log_probs, const Tensor<T>& mask) {
  int64_t b = mask.shape[0];
  return tp.affine(tp.vsum(tp.mul(log_probs, tp.leaf(mask))), T(-1.0 / double(b)),
                   T(0));
}

}  // namespace

template <typename T>
Var soft_dice(Tape<T>& tp, Var logits, const Tensor<T>& target, double eps) {
  const Tensor<T>& lv = tp.val(logits);
  require(lv.shape == target.shape, Status::InvalidArgument,
          "soft_dice: shape mismatch");
  double target_sum = 0;
  for (int64_t i = 0; i < target.size(); ++i) target_sum += double(target[i]);
  Var p = tp.sigmoid(logits);
  Var sum_py = tp.vsum(tp.mul(p, tp.leaf(target)));
  Var sum_p = tp.vsum(p);
  Var num = tp.affine(sum_py, T(2), T(eps));
  Var den = tp.affine(sum_p, T(1), T(target_sum + eps));
  return tp.divide(num, den);
}

template <typename T>
Var seg_loss(Tape<T>& tp, Var logits, const Tensor<T>& target) {
  for (int64_t i = 0; i < target.size(); ++i)
    require(target[i] == T(0) || target[i] == T(1), Status::InvalidArgument,
            "seg_loss: target must be binary");
  Var dice = soft_dice(tp, logits, target);
  Var bce = tp.bce_with_logits_mean(logits, target);
  return tp.add(tp.affine(dice, T(-1), T(1)), bce);
}

template <typename T>
RetrievalLossOut<T> retrieval_loss(Tape<T>& tp, Var fv, const EncodedBank& bank,
                                   const std::vector<CategoryLabels>& gt,
                                   double tau) {
  require(tau > 0, Status::InvalidArgument, "retrieval_loss: tau must be > 0");
  const Tensor<T>& fvv = tp.val(fv);
  require(fvv.shape.size() == 2, Status::InvalidArgument,
          "retrieval_loss: query must be [B,D]");
  require(int64_t(gt.size()) == fvv.shape[0], Status::InvalidArgument,
          "retrieval_loss: one label row per sample required");
  RetrievalLossOut<T> out;
  for (int cat = 0; cat < 4; ++cat) {
    Tensor<T> candidates = category_pooled_matrix<T>(bank, cat + 1);
    int64_t k = candidates.shape[0];
    Tensor<T> mask = positive_mask<T>(gt, cat, k);
    Var cos = cosine_scores(tp, fv, candidates);
    Var log_probs = tp.log_softmax_lastdim(tp.affine(cos, T(1.0 / tau), T(0)));
    out.per_category[size_t(cat)] = mean_negative_picked(tp, log_probs, mask);
    out.total = cat == 0 ? out.per_category[0]
                         : tp.add(out.total, out.per_category[size_t(cat)]);
  }
  return out;
}

template <typename T>
FocalHeads<T> FocalHeads<T>::create(ParamStore<T>& ps, const std::string& prefix,
                                    int64_t d, uint64_t seed,
                                    const std::array<int64_t, 4>& sizes) {
  FocalHeads<T> f;
  for (int i = 0; i < 4; ++i)
    f.heads[size_t(i)] =
        LinearLayer<T>::create(ps, prefix + std::to_string(i + 1), d,
                               sizes[size_t(i)], true, seed);
  return f;
}

template <typename T>
Var FocalHeads<T>::loss(Ctx<T>& ctx, Var fv,
                        const std::vector<CategoryLabels>& gt,
                        double gamma) const {
  Tape<T>& tp = ctx.tape;
  const Tensor<T>& fvv = tp.val(fv);
  require(fvv.shape.size() == 2 && int64_t(gt.size()) == fvv.shape[0],
          Status::InvalidArgument, "focal loss: query/labels mismatch");
  Var total{};
  for (int cat = 0; cat < 4; ++cat) {
    Var logits = heads[size_t(cat)].forward(ctx, fv);
    int64_t k = tp.val(logits).shape[1];
    Tensor<T> mask = positive_mask<T>(gt, cat, k);
    Var log_probs = tp.log_softmax_lastdim(logits);
    Var p = tp.exp_op(log_probs);
    Var weight = tp.pow_scalar(tp.affine(p, T(-1), T(1)), T(gamma));
    Var term = mean_negative_picked(tp, tp.mul(weight, log_probs), mask);
    total = cat == 0 ? term : tp.add(total, term);
  }
  return total;
}

template <typename T>
LossReport<T> mixed_loss(Ctx<T>& ctx, Var logits, const Tensor<T>& target,
                         Var fv, const EncodedBank& bank,
                         const FocalHeads<T>& heads,
                         const std::vector<CategoryLabels>& gt, double tau,
                         double gamma, double lambda1, double lambda2,
                         double lambda3) {
  Tape<T>& tp = ctx.tape;
  LossReport<T> rep;
  rep.seg = seg_loss(tp, logits, target);
  RetrievalLossOut<T> ret = retrieval_loss(tp, fv, bank, gt, tau);
  rep.retrieval = ret.total;
  rep.retrieval_per_category = ret.per_category;
  rep.focal = heads.loss(ctx, fv, gt, gamma);
  rep.mix = tp.add(tp.add(tp.affine(rep.seg, T(lambda1), T(0)),
                          tp.affine(rep.retrieval, T(lambda2), T(0))),
                   tp.affine(rep.focal, T(lambda3), T(0)));
  return rep;
}

MaskMetrics mask_metrics(const std::vector<uint8_t>& pred,
                         const std::vector<uint8_t>& gt) {
  require(pred.size() == gt.size(), Status::InvalidArgument,
          "mask_metrics: size mismatch");
  int64_t tp = 0, fp = 0, fn = 0;
  for (size_t i = 0; i < pred.size(); ++i) {
    bool p = pred[i] != 0, y = gt[i] != 0;
    tp += p && y;
    fp += p && !y;
    fn += !p && y;
  }
  int64_t np = tp + fp, ny = tp + fn;
  MaskMetrics m;
  m.dice = (np + ny == 0) ? 1.0 : 2.0 * double(tp) / double(np + ny);
  m.iou = (tp + fp + fn == 0) ? 1.0 : double(tp) / double(tp + fp + fn);
  m.precision = np == 0 ? (ny == 0 ? 1.0 : 0.0) : double(tp) / double(np);
  m.recall = ny == 0 ? (np == 0 ? 1.0 : 0.0) : double(tp) / double(ny);
  return m;
}

template <typename T>
std::vector<uint8_t> binarize_logits(const Tensor<T>& logits) {
  std::vector<uint8_t> out(size_t(logits.size()));
  for (int64_t i = 0; i < logits.size(); ++i) out[size_t(i)] = logits[i] > T(0);
  return out;
}

#define STPNET_INSTANTIATE_LOSSES(T)                                           \
  template Var soft_dice<T>(Tape<T>&, Var, const Tensor<T>&, double);          \
  template Var seg_loss<T>(Tape<T>&, Var, const Tensor<T>&);                   \
  template RetrievalLossOut<T> retrieval_loss<T>(                              \
      Tape<T>&, Var, const EncodedBank&, const std::vector<CategoryLabels>&,   \
      double);                                                                 \
  template struct FocalHeads<T>;                                               \
  template LossReport<T> mixed_loss<T>(                                        \
      Ctx<T>&, Var, const Tensor<T>&, Var, const EncodedBank&,                 \
      const FocalHeads<T>&, const std::vector<CategoryLabels>&, double,        \
      double, double, double, double);                                         \
  template std::vector<uint8_t> binarize_logits<T>(const Tensor<T>&);

STPNET_INSTANTIATE_LOSSES(float)
STPNET_INSTANTIATE_LOSSES(double)

}  // namespace stpnet
