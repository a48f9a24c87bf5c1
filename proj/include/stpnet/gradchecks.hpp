#pragma once

#include <string>
#include <vector>

#include "stpnet/common.hpp"

namespace stpnet {

// One finite-difference verification of a block, op, or loss.
struct CheckResult {
  std::string name;
  bool pass = false;
  double max_rel_error = 0.0;
  int64_t coords_checked = 0;
  std::string worst;
  double seconds = 0.0;
};

struct SuiteOptions {
  int64_t image_size = 32;  // spatial size the block instances are built for
  int64_t coords = 120;     // sampled coordinates per check
  double eps = 1e-5;
  double tol = 1e-4;
  uint64_t seed = 0;
  // Negative-control fixture: name of the one check whose analytic gradients
  // are deliberately perturbed so its failure report names the op.
  std::string corrupt;
};

// Runs 64-bit central-difference gradient checks over every network block
// (encoder, text-injection, multi-scale residual, attention, decoder,
// retrieval encoder), the raw convolution variants, and every loss term.
std::vector<CheckResult> run_gradcheck_suite(const SuiteOptions& opt = {});

bool all_pass(const std::vector<CheckResult>& results);

// One "PASS/FAIL name max_rel coords time" line per check plus a total line.
std::string serialize_results(const std::vector<CheckResult>& results);

}  // namespace stpnet
