#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <set>
#include <string>
#include <utility>
#include <vector>

#include "stpnet/common.hpp"
#include "stpnet/tensor.hpp"

namespace stpnet {

struct GradCheckReport {
  double max_rel_error = 0.0;
  bool pass = false;
  int64_t coords_checked = 0;
  std::string worst;  // "param#k[i] analytic=.. numeric=.."
};

// Central-difference gradient verification in 64-bit.
//   f_loss  : evaluates the scalar objective from the *current* contents of params
//   f_grads : fresh forward+backward, returns analytic grads aligned with params
// Checks min(coords, total) coordinates: all of them when total <= coords, else a
// seeded random sample (without replacement). rel = |a-n| / max(1e-8, |a|+|n|).
// f_loss is evaluated twice up front; any disagreement means the objective is not
// deterministic, which is a contract violation.
inline GradCheckReport grad_check(const std::function<double()>& f_loss,
                                  const std::function<std::vector<Tensor<double>>()>& f_grads,
                                  const std::vector<Tensor<double>*>& params,
                                  double eps, double tol, int64_t coords,
                                  uint64_t seed) {
  require(!params.empty(), Status::InvalidArgument, "grad_check: no parameters");
  double l0 = f_loss();
  double l1 = f_loss();
  require(l0 == l1, Status::Contract,
          "grad_check: objective is not deterministic (two forward passes disagree)");

  std::vector<Tensor<double>> analytic = f_grads();
  require(analytic.size() == params.size(), Status::InvalidArgument,
          "grad_check: gradient count mismatch");
  for (size_t i = 0; i < params.size(); ++i)
    require(analytic[i].shape == params[i]->shape, Status::InvalidArgument,
            "grad_check: gradient shape mismatch at param " + std::to_string(i));

  int64_t total = 0;
  for (const Tensor<double>* p : params) total += p->size();
  std::vector<std::pair<size_t, int64_t>> picked;  // (param index, flat index)
  if (total <= coords) {
    for (size_t pi = 0; pi < params.size(); ++pi)
      for (int64_t i = 0; i < params[pi]->size(); ++i) picked.emplace_back(pi, i);
  } else {
    Rng rng(seed);
    std::set<int64_t> chosen;
    while (int64_t(chosen.size()) < coords)
      chosen.insert(int64_t(rng.next_u64() % uint64_t(total)));
    for (int64_t flat : chosen) {
      int64_t rem = flat;
      size_t pi = 0;
      while (rem >= params[pi]->size()) {
        rem -= params[pi]->size();
        ++pi;
      }
      picked.emplace_back(pi, rem);
    }
  }

  GradCheckReport rep;
  rep.coords_checked = int64_t(picked.size());
  for (auto [pi, idx] : picked) {
    double saved = (*params[pi])[idx];
    (*params[pi])[idx] = saved + eps;
    double lp = f_loss();
    (*params[pi])[idx] = saved - eps;
    double lm = f_loss();
    (*params[pi])[idx] = saved;
    double numeric = (lp - lm) / (2.0 * eps);
    double a = analytic[pi][idx];
    double rel = std::abs(a - numeric) / std::max(1e-8, std::abs(a) + std::abs(numeric));
    if (rel > rep.max_rel_error) {
      rep.max_rel_error = rel;
      rep.worst = "param#" + std::to_string(pi) + "[" + std::to_string(idx) +
                  "] analytic=" + std::to_string(a) +
                  " numeric=" + std::to_string(numeric);
    }
  }
  rep.pass = rep.max_rel_error <= tol;
  return rep;
}

}  // namespace stpnet
