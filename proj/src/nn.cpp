#include "stpnet/nn.hpp"

#include <cmath>

#include "stpnet/common.hpp"

namespace stpnet {

template <typename T>
void ParamStore<T>::add(const std::string& name, Tensor<T> init, bool trainable) {
  require(!has(name), Status::Internal, "duplicate parameter name: " + name);
  ParamEntry<T> e;
  e.name = name;
  e.m = Tensor<T>::zeros(init.shape);
  e.v = Tensor<T>::zeros(init.shape);
  e.value = std::move(init);
  e.trainable = trainable;
  index_.emplace(name, entries_.size());
  entries_.push_back(std::move(e));
}

template <typename T>
ParamEntry<T>& ParamStore<T>::at(const std::string& name) {
  auto it = index_.find(name);
  require(it != index_.end(), Status::Internal, "unknown parameter: " + name);
  return entries_[it->second];
}

template <typename T>
const ParamEntry<T>& ParamStore<T>::at(const std::string& name) const {
  auto it = index_.find(name);
  require(it != index_.end(), Status::Internal, "unknown parameter: " + name);
  return entries_[it->second];
}

template <typename T>
std::vector<Tensor<T>> ParamStore<T>::snapshot_values() const {
  std::vector<Tensor<T>> out;
  out.reserve(entries_.size());
  for (const auto& e : entries_) out.push_back(e.value);
  return out;
}

template <typename T>
void ParamStore<T>::restore_values(const std::vector<Tensor<T>>& vals) {
  require(vals.size() == entries_.size(), Status::Internal, "snapshot size mismatch");
  for (size_t i = 0; i < vals.size(); ++i) entries_[i].value = vals[i];
}

template <typename T>
Tensor<T> he_uniform(Shape shape, int64_t fan_in, uint64_t seed) {
  Rng rng(seed);
  double bound = std::sqrt(6.0 / double(fan_in));
  Tensor<T> t = Tensor<T>::zeros(std::move(shape));
  for (int64_t i = 0; i < t.size(); ++i) t[i] = T(rng.uniform(-bound, bound));
  return t;
}

template <typename T>
Tensor<T> normal_init(Shape shape, T stddev, uint64_t seed) {
  Rng rng(seed);
  Tensor<T> t = Tensor<T>::zeros(std::move(shape));
  for (int64_t i = 0; i < t.size(); ++i) t[i] = T(rng.normal()) * stddev;
  return t;
}

template <typename T>
Conv2dLayer<T> Conv2dLayer<T>::create(ParamStore<T>& ps, const std::string& name,
                                      int64_t ci, int64_t co, int k, int stride,
                                      int padding, int dilation, int groups, bool bias,
                                      uint64_t master_seed) {
  Conv2dLayer l;
  l.name = name;
  l.stride = stride;
  l.padding = padding;
  l.dilation = dilation;
  l.groups = groups;
  l.has_bias = bias;
  int64_t fan_in = (ci / groups) * k * k;
  ps.add(name + ".w",
         he_uniform<T>({co, ci / groups, k, k}, fan_in, fnv1a64(name + ".w") ^ master_seed),
         true);
  if (bias) ps.add(name + ".b", Tensor<T>::zeros({co}), true);
  return l;
}

template <typename T>
Var Conv2dLayer<T>::forward(Ctx<T>& ctx, Var x) const {
  Var b = has_bias ? ctx.p(name + ".b") : Var{};
  return ctx.tape.conv2d(x, ctx.p(name + ".w"), b, stride, padding, dilation, groups);
}

template <typename T>
BatchNorm2dLayer<T> BatchNorm2dLayer<T>::create(ParamStore<T>& ps,
                                                const std::string& name,
                                                int64_t channels) {
  BatchNorm2dLayer l;
  l.name = name;
  ps.add(name + ".gamma", Tensor<T>::full({channels}, T(1)), true);
  ps.add(name + ".beta", Tensor<T>::zeros({channels}), true);
  ps.add(name + ".running_mean", Tensor<T>::zeros({channels}), false);
  ps.add(name + ".running_var", Tensor<T>::full({channels}, T(1)), false);
  return l;
}

template <typename T>
Var BatchNorm2dLayer<T>::forward(Ctx<T>& ctx, Var x) const {
  return ctx.tape.batchnorm2d(x, ctx.p(name + ".gamma"), ctx.p(name + ".beta"),
                              &ctx.ps.value(name + ".running_mean"),
                              &ctx.ps.value(name + ".running_var"), ctx.training,
                              momentum, eps);
}

template <typename T>
LinearLayer<T> LinearLayer<T>::create(ParamStore<T>& ps, const std::string& name,
                                      int64_t in, int64_t out, bool bias,
                                      uint64_t master_seed) {
  LinearLayer l;
  l.name = name;
  l.has_bias = bias;
  ps.add(name + ".w", he_uniform<T>({in, out}, in, fnv1a64(name + ".w") ^ master_seed),
         true);
  if (bias) ps.add(name + ".b", Tensor<T>::zeros({out}), true);
  return l;
}

template <typename T>
Var LinearLayer<T>::forward(Ctx<T>& ctx, Var x) const {
  Var b = has_bias ? ctx.p(name + ".b") : Var{};
  return ctx.tape.linear(x, ctx.p(name + ".w"), b);
}

template <typename T>
void Adam<T>::step(ParamStore<T>& ps,
                   const std::unordered_map<std::string, Tensor<T>>& grads) {
  ++t;
  T bc1 = T(1) - std::pow(beta1, T(t));
  T bc2 = T(1) - std::pow(beta2, T(t));
  for (ParamEntry<T>& e : ps.entries()) {
    if (!e.trainable) continue;
    auto it = grads.find(e.name);
    if (it == grads.end()) continue;
    const Tensor<T>& g = it->second;
    require(g.shape == e.value.shape, Status::Internal,
            "gradient shape mismatch for " + e.name);
    for (int64_t i = 0; i < g.size(); ++i) {
      e.m[i] = beta1 * e.m[i] + (T(1) - beta1) * g[i];
      e.v[i] = beta2 * e.v[i] + (T(1) - beta2) * g[i] * g[i];
      T mhat = e.m[i] / bc1;
      T vhat = e.v[i] / bc2;
      e.value[i] -= lr * mhat / (std::sqrt(vhat) + eps);
    }
  }
}

#define STPNET_INSTANTIATE_NN(T)                                                      \
  template class ParamStore<T>;                                                       \
  template Tensor<T> he_uniform<T>(Shape, int64_t, uint64_t);                         \
  template Tensor<T> normal_init<T>(Shape, T, uint64_t);                              \
  template struct Conv2dLayer<T>;                                                     \
  template struct BatchNorm2dLayer<T>;                                                \
  template struct LinearLayer<T>;                                                     \
  template struct Adam<T>;

STPNET_INSTANTIATE_NN(float)
STPNET_INSTANTIATE_NN(double)

}  // namespace stpnet
