#pragma once

#include <cstdint>
#include <map>
#include <string>

#include "stpnet/blocks.hpp"
#include "stpnet/synthgen.hpp"

namespace stpnet {

// Optimization settings and ablation switches for a training run. The model
// architecture lives in StpnetConfig; train_model copies the switches and
// the seed onto it so one document configures a whole run.
struct TrainConfig {
  double lr = 3e-4;
  int64_t batch = 8;
  int64_t epochs = 30;
  int64_t patience = 10;  // epochs without a new best validation Dice
  uint64_t seed = 0;
  bool no_text = false;            // zero the injected text grids
  bool no_ssm = false;             // bypass the multi-scale residual blocks
  bool no_utrans_text = false;     // attention without text tokens
  bool teacher_force_text = false; // inject ground-truth phrases, not retrieved
  bool swap_loc_order = false;
  double lambda1 = 1.0, lambda2 = 1.0, lambda3 = 1.0;
  double tau = 0.07;
  double gamma = 2.0;
};

void validate(const TrainConfig& cfg);

// Line-oriented "key value" text. '#' starts a comment; blank lines are
// ignored; later assignments to the same key win.
std::map<std::string, std::string> parse_kv_text(const std::string& text);

// Apply known keys onto the corresponding config; keys that do not belong to
// any of the three sections are rejected. Returns the set of keys consumed.
struct RunConfig {
  StpnetConfig model;
  TrainConfig train;
  GenConfig gen;
  int64_t n_train = 512, n_val = 64, n_test = 128;
};

RunConfig parse_run_config(const std::string& text);
std::string serialize_run_config(const RunConfig& cfg);

// Architecture-only snapshot, embedded into checkpoints.
std::string serialize_model_config(const StpnetConfig& cfg);
StpnetConfig parse_model_config(const std::string& text);

}  // namespace stpnet
