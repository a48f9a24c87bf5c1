#pragma once

#include <string>
#include <unordered_map>
#include <vector>

#include "stpnet/tape.hpp"

namespace stpnet {

// Named parameter registry. Insertion order is the canonical order for optimizer
// updates and checkpoint layout, so it must not depend on runtime flags: model
// construction registers every module unconditionally and ablations only change
// the forward wiring.
//
// Each parameter is initialized from its own generator seeded by
// fnv1a64(name) ^ master_seed, so two models built with the same seed share
// identical values for every identically-named parameter regardless of which
// other modules exist around them.
template <typename T>
struct ParamEntry {
  std::string name;
  Tensor<T> value;
  bool trainable = true;
  Tensor<T> m, v;  // optimizer moments, not serialized
};

template <typename T>
class ParamStore {
 public:
  void add(const std::string& name, Tensor<T> init, bool trainable);
  bool has(const std::string& name) const { return index_.count(name) > 0; }
  ParamEntry<T>& at(const std::string& name);
  const ParamEntry<T>& at(const std::string& name) const;
  Tensor<T>& value(const std::string& name) { return at(name).value; }

  std::vector<ParamEntry<T>>& entries() { return entries_; }
  const std::vector<ParamEntry<T>>& entries() const { return entries_; }
  size_t size() const { return entries_.size(); }

  // value snapshot (buffers included, moments excluded) for gradient checking
  std::vector<Tensor<T>> snapshot_values() const;
  void restore_values(const std::vector<Tensor<T>>& vals);

 private:
  std::vector<ParamEntry<T>> entries_;
  std::unordered_map<std::string, size_t> index_;
};

// Per-pass context: binds a tape to the store, caches one leaf per parameter so
// repeated forward uses of a weight share a single tape node.
template <typename T>
struct Ctx {
  Tape<T>& tape;
  ParamStore<T>& ps;
  bool training = false;
  std::unordered_map<std::string, Var> cache;

  Ctx(Tape<T>& t, ParamStore<T>& p, bool train) : tape(t), ps(p), training(train) {}

  Var p(const std::string& name) {
    auto it = cache.find(name);
    if (it != cache.end()) return it->second;
    ParamEntry<T>& e = ps.at(name);
    Var v = tape.leaf(e.value, e.trainable);
    cache.emplace(name, v);
    return v;
  }

  // pull analytic grads for every cached parameter after backward()
  std::unordered_map<std::string, Tensor<T>> grads() {
    std::unordered_map<std::string, Tensor<T>> out;
    for (auto& [name, var] : cache)
      if (tape.requires_grad(var)) out.emplace(name, tape.grad(var));
    return out;
  }
};


template <typename T>
Tensor<T> he_uniform(Shape shape, int64_t fan_in, uint64_t seed);
template <typename T>
Tensor<T> normal_init(Shape shape, T stddev, uint64_t seed);

template <typename T>
struct Conv2dLayer {
  std::string name;
  int stride = 1, padding = 0, dilation = 1, groups = 1;
  bool has_bias = true;

  static Conv2dLayer create(ParamStore<T>& ps, const std::string& name, int64_t ci,
                            int64_t co, int k, int stride, int padding, int dilation,
                            int groups, bool bias, uint64_t master_seed);
  Var forward(Ctx<T>& ctx, Var x) const;
};

template <typename T>
struct BatchNorm2dLayer {
  std::string name;
  T momentum = T(0.1);
  T eps = T(1e-5);

  static BatchNorm2dLayer create(ParamStore<T>& ps, const std::string& name,
                                 int64_t channels);
  Var forward(Ctx<T>& ctx, Var x) const;
};

template <typename T>
struct LinearLayer {
  std::string name;
  bool has_bias = true;

  static LinearLayer create(ParamStore<T>& ps, const std::string& name, int64_t in,
                            int64_t out, bool bias, uint64_t master_seed);
  Var forward(Ctx<T>& ctx, Var x) const;
};

template <typename T>
struct Adam {
  T lr;
  T beta1 = T(0.9), beta2 = T(0.999), eps = T(1e-8);
  int64_t t = 0;

  explicit Adam(T lr_) : lr(lr_) {}
  // updates trainable entries in insertion order; entries without a gradient
  // this step are left untouched
  void step(ParamStore<T>& ps, const std::unordered_map<std::string, Tensor<T>>& grads);
};

}  // namespace stpnet
