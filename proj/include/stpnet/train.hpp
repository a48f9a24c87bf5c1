#pragma once

#include <array>
#include <string>
#include <vector>

#include "stpnet/blocks.hpp"
#include "stpnet/config.hpp"
#include "stpnet/synthgen.hpp"

namespace stpnet {

// One structured-text record per epoch.
struct EpochRecord {
  int64_t epoch = 0;  // 1-based
  double train_loss = 0;  // mean mixed-objective value over the epoch's steps
  double val_dice = 0;
  double val_iou = 0;
  std::array<double, 4> val_top1{};  // retrieval top-1 per category
};

std::string serialize_epoch_record(const EpochRecord& r);

struct EvalReport {
  std::string split;
  int64_t n = 0;
  double dice = 0, iou = 0, precision = 0, recall = 0;
  std::array<double, 4> top1{};  // infection, num, left location, right location
};

std::string serialize_report(const EvalReport& r);

struct TrainResult {
  StpnetModel<float> model;  // parameters restored to the best-validation epoch
  EncodedBank bank;
  std::vector<EpochRecord> log;
  double best_val_dice = -1.0;
  int64_t best_epoch = 0;  // 1-based epoch whose snapshot the model carries
  bool early_stopped = false;
  std::vector<std::string> warnings;
};

// Phrase bank used by a run: its encoder seed is derived from the run seed so
// one seed pins the whole pipeline.
EncodedBank bank_for_seed(const StpnetConfig& mcfg, uint64_t seed);

// Optimizes the mixed objective on train_ds, validating on val_ds each epoch.
// The run flags are mapped onto the architecture config first (ablations only
// change forward wiring, never the parameter registry), so differently-ablated
// runs with one seed start from identical parameter values. Keeps the best
// validation-Dice snapshot and restores it before returning; stops early after
// `patience` epochs without a new best. Deterministic given (configs, data).
// A non-finite loss aborts with a numeric error naming the offending step and
// the last finite loss value.
TrainResult train_model(StpnetConfig mcfg, const TrainConfig& tcfg,
                        const Dataset& train_ds, const Dataset& val_ds);

// Eval-mode forward over the whole set: mean mask metrics over samples plus
// per-category retrieval top-1 accuracy.
EvalReport evaluate_model(StpnetModel<float>& model, const EncodedBank& bank,
                          const Dataset& ds, const std::string& split_name);

}  // namespace stpnet
