#include "stpnet/train.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <numeric>

#include "stpnet/losses.hpp"

namespace stpnet {

namespace {

std::string fmt(double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.9g", v);
  return buf;
}

constexpr std::array<const char*, 4> kCategoryKeys = {"infection", "num",
                                                      "left_loc", "right_loc"};

struct Batch {
  Tensor<float> images;  // [B,1,S,S]
  Tensor<float> target;  // [B,1,S,S], exact 0/1
  std::vector<CategoryLabels> labels;
  std::vector<const std::vector<uint8_t>*> masks;
};

Batch make_batch(const Dataset& ds, const std::vector<int64_t>& order,
                 size_t lo, size_t hi, int64_t s) {
  int64_t b = int64_t(hi - lo);
  Batch out;
  out.images = Tensor<float>::zeros({b, 1, s, s});
  out.target = Tensor<float>::zeros({b, 1, s, s});
  out.labels.reserve(size_t(b));
  out.masks.reserve(size_t(b));
  int64_t plane = s * s;
  for (size_t k = lo; k < hi; ++k) {
    const SegSample& sample = ds.samples[size_t(order[k])];
    require(sample.image.shape == Shape{1, s, s} &&
                int64_t(sample.mask.size()) == plane,
            Status::InvalidArgument,
            "train: sample size differs from the model's image size");
    int64_t row = int64_t(k - lo) * plane;
    for (int64_t i = 0; i < plane; ++i) {
      out.images[row + i] = sample.image[i];
      out.target[row + i] = float(sample.mask[size_t(i)]);
    }
    out.labels.push_back(sample.labels);
    out.masks.push_back(&sample.mask);
  }
  return out;
}

// Accumulates eval-mode forward results over one batch.
struct EvalAccum {
  double dice = 0, iou = 0, precision = 0, recall = 0;
  std::array<int64_t, 4> hits{};
  int64_t n = 0;
};

void eval_batch(StpnetModel<float>& model, const EncodedBank& bank,
                const Batch& batch, EvalAccum& acc) {
  Tape<float> tape;
  Ctx<float> ctx(tape, model.ps, /*training=*/false);
  StpnetOutput<float> out = stpnet_forward(model, ctx, batch.images, bank);
  std::vector<uint8_t> pred = binarize_logits(tape.val(out.logits));
  int64_t b = batch.images.shape[0];
  size_t plane = size_t(batch.images.shape[2] * batch.images.shape[3]);
  for (int64_t i = 0; i < b; ++i) {
    std::vector<uint8_t> one(pred.begin() + size_t(i) * plane,
                             pred.begin() + size_t(i + 1) * plane);
    MaskMetrics m = mask_metrics(one, *batch.masks[size_t(i)]);
    acc.dice += m.dice;
    acc.iou += m.iou;
    acc.precision += m.precision;
    acc.recall += m.recall;
    for (int c = 0; c < 4; ++c)
      if (out.retrievals[size_t(i)].cats[size_t(c)].j_star ==
          batch.labels[size_t(i)][size_t(c)])
        ++acc.hits[size_t(c)];
  }
  acc.n += b;
}

}  // namespace

std::string serialize_epoch_record(const EpochRecord& r) {
  std::string line = "epoch=" + std::to_string(r.epoch) +
                     " train_loss=" + fmt(r.train_loss) +
                     " val_dice=" + fmt(r.val_dice) +
                     " val_iou=" + fmt(r.val_iou);
  for (int c = 0; c < 4; ++c)
    line += std::string(" top1_") + kCategoryKeys[size_t(c)] + "=" +
            fmt(r.val_top1[size_t(c)]);
  return line;
}

std::string serialize_report(const EvalReport& r) {
  std::string text;
  text += "split " + r.split + "\n";
  text += "n " + std::to_string(r.n) + "\n";
  text += "dice " + fmt(r.dice) + "\n";
  text += "iou " + fmt(r.iou) + "\n";
  text += "precision " + fmt(r.precision) + "\n";
  text += "recall " + fmt(r.recall) + "\n";
  for (int c = 0; c < 4; ++c)
    text += std::string("top1_") + kCategoryKeys[size_t(c)] + " " +
            fmt(r.top1[size_t(c)]) + "\n";
  return text;
}

EncodedBank bank_for_seed(const StpnetConfig& mcfg, uint64_t seed) {
  return encode_bank(build_text_bank(mcfg.domain), fnv1a64("textbank") ^ seed,
                     mcfg.L, mcfg.D);
}

EvalReport evaluate_model(StpnetModel<float>& model, const EncodedBank& bank,
                          const Dataset& ds, const std::string& split_name) {
  require(!ds.samples.empty(), Status::InvalidArgument,
          "evaluate: empty dataset");
  int64_t s = model.cfg.image_size;
  std::vector<int64_t> order(ds.samples.size());
  std::iota(order.begin(), order.end(), 0);
  EvalAccum acc;
  const size_t kEvalBatch = 16;
  for (size_t lo = 0; lo < order.size(); lo += kEvalBatch) {
    size_t hi = std::min(lo + kEvalBatch, order.size());
    Batch batch = make_batch(ds, order, lo, hi, s);
    eval_batch(model, bank, batch, acc);
  }
  EvalReport rep;
  rep.split = split_name;
  rep.n = acc.n;
  rep.dice = acc.dice / double(acc.n);
  rep.iou = acc.iou / double(acc.n);
  rep.precision = acc.precision / double(acc.n);
  rep.recall = acc.recall / double(acc.n);
  for (int c = 0; c < 4; ++c)
    rep.top1[size_t(c)] = double(acc.hits[size_t(c)]) / double(acc.n);
  return rep;
}

TrainResult train_model(StpnetConfig mcfg, const TrainConfig& tcfg,
                        const Dataset& train_ds, const Dataset& val_ds) {
  validate(tcfg);
  require(!train_ds.samples.empty() && !val_ds.samples.empty(),
          Status::InvalidArgument, "train: empty dataset");

  // run flags land on the architecture config; parameter registration is
  // unconditional, so all ablations share one parameter stream per seed
  mcfg.use_text = !tcfg.no_text;
  mcfg.use_ssm = !tcfg.no_ssm;
  mcfg.use_utrans_text = !tcfg.no_utrans_text;
  mcfg.swap_loc_order = tcfg.swap_loc_order;
  mcfg.tau = tcfg.tau;
  mcfg.gamma = tcfg.gamma;
  mcfg.lambda1 = tcfg.lambda1;
  mcfg.lambda2 = tcfg.lambda2;
  mcfg.lambda3 = tcfg.lambda3;
  mcfg.seed = tcfg.seed;
  validate(mcfg);

  TrainResult res;
  res.bank = bank_for_seed(mcfg, tcfg.seed);
  res.model = StpnetModel<float>::create(mcfg);

  // warn when some phrase of a category never appears in the training labels
  {
    std::array<std::array<bool, 8>, 4> seen{};
    for (const SegSample& sample : train_ds.samples)
      for (int c = 0; c < 4; ++c)
        seen[size_t(c)][size_t(sample.labels[size_t(c)])] = true;
    for (int c = 0; c < 4; ++c) {
      int64_t k = int64_t(res.bank.features[size_t(c)].size());
      for (int64_t v = 0; v < k; ++v)
        if (!seen[size_t(c)][size_t(v)])
          res.warnings.push_back(
              std::string("training labels never use value ") +
              std::to_string(v) + " of category " + kCategoryKeys[size_t(c)]);
    }
  }

  Adam<float> opt(float(tcfg.lr));
  std::vector<int64_t> order(train_ds.samples.size());
  std::iota(order.begin(), order.end(), 0);

  std::vector<Tensor<float>> best_snapshot;
  int64_t epochs_since_best = 0;
  double last_finite_loss = std::numeric_limits<double>::quiet_NaN();

  for (int64_t epoch = 1; epoch <= tcfg.epochs; ++epoch) {
    Rng shuffle_rng(fnv1a64("shuffle") ^ tcfg.seed ^ uint64_t(epoch));
    for (size_t i = order.size(); i > 1; --i) {
      size_t j = size_t(shuffle_rng.uniform_int(0, int64_t(i) - 1));
      std::swap(order[i - 1], order[j]);
    }

    double loss_sum = 0;
    int64_t steps = 0;
    for (size_t lo = 0; lo < order.size(); lo += size_t(tcfg.batch)) {
      size_t hi = std::min(lo + size_t(tcfg.batch), order.size());
      Batch batch = make_batch(train_ds, order, lo, hi, mcfg.image_size);
      double loss = 0;
      try {
        Tape<float> tape;
        Ctx<float> ctx(tape, res.model.ps, /*training=*/true);
        StpnetOutput<float> out = stpnet_forward(
            res.model, ctx, batch.images, res.bank,
            tcfg.teacher_force_text ? &batch.labels : nullptr);
        LossReport<float> rep = mixed_loss(
            ctx, out.logits, batch.target, out.fv, res.bank, res.model.focal,
            batch.labels, mcfg.tau, mcfg.gamma, mcfg.lambda1, mcfg.lambda2,
            mcfg.lambda3);
        loss = double(tape.val(rep.mix)[0]);
        require(std::isfinite(loss), Status::Numeric,
                "non-finite mixed loss");
        tape.backward(rep.mix);
        opt.step(res.model.ps, ctx.grads());
      } catch (const Error& e) {
        if (e.code() == Status::Numeric)
          fail(Status::Numeric,
               "training aborted at epoch " + std::to_string(epoch) +
                   ", step " + std::to_string(steps + 1) + ": " + e.what() +
                   " (last finite loss " + fmt(last_finite_loss) + ")");
        throw;
      }
      last_finite_loss = loss;
      loss_sum += loss;
      ++steps;
    }

    EvalReport val = evaluate_model(res.model, res.bank, val_ds, "val");
    EpochRecord rec;
    rec.epoch = epoch;
    rec.train_loss = loss_sum / double(steps);
    rec.val_dice = val.dice;
    rec.val_iou = val.iou;
    rec.val_top1 = val.top1;
    res.log.push_back(rec);

    if (val.dice > res.best_val_dice) {
      res.best_val_dice = val.dice;
      res.best_epoch = epoch;
      best_snapshot = res.model.ps.snapshot_values();
      epochs_since_best = 0;
    } else if (++epochs_since_best >= tcfg.patience) {
      res.early_stopped = true;
      break;
    }
  }

  if (!best_snapshot.empty()) res.model.ps.restore_values(best_snapshot);
  return res;
}

}  // namespace stpnet
