#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <vector>

#include "naive_ref.hpp"
#include "stpnet/gradcheck.hpp"
#include "stpnet/tape.hpp"

using namespace stpnet;

namespace {

Tensor<double> iota(Shape shape, double start = 1.0) {
  Tensor<double> t = Tensor<double>::zeros(std::move(shape));
  for (int64_t i = 0; i < t.size(); ++i) t[i] = start + double(i);
  return t;
}

double max_abs_diff(const Tensor<double>& a, const Tensor<double>& b) {
  REQUIRE(a.shape == b.shape);
  double m = 0.0;
  for (int64_t i = 0; i < a.size(); ++i) m = std::max(m, std::abs(a[i] - b[i]));
  return m;
}

}  // namespace

TEST_CASE("conv2d scalar-scaling identity") {
  Tape<double> tp;
  Var x = tp.leaf(Tensor<double>::full({1, 1, 3, 3}, 1.0));
  Var w = tp.leaf(Tensor<double>({1, 1, 1, 1}, {2.0}));
  Var y = tp.conv2d(x, w, Var{}, 1, 0, 1, 1);
  CHECK(tp.val(y).shape == Shape{1, 1, 3, 3});
  for (int64_t i = 0; i < 9; ++i) CHECK(tp.val(y)[i] == 2.0);
}

TEST_CASE("conv2d dilation-2 direct-summation value") {
  // 5x5 grid 1..25, 3x3 all-ones kernel, dilation 2: samples the four corners,
  // edge midpoints and center -> 1+3+5+11+13+15+21+23+25 = 117
  Tape<double> tp;
  Var x = tp.leaf(iota({1, 1, 5, 5}));
  Var w = tp.leaf(Tensor<double>::full({1, 1, 3, 3}, 1.0));
  Var y = tp.conv2d(x, w, Var{}, 1, 0, 2, 1);
  CHECK(tp.val(y).shape == Shape{1, 1, 1, 1});
  CHECK(tp.val(y)[0] == 117.0);
}

TEST_CASE("conv2d depthwise shape") {
  Tape<double> tp;
  Rng rng(7);
  Var x = tp.leaf(naive::random_tensor({1, 2, 4, 4}, rng));
  Var w = tp.leaf(naive::random_tensor({2, 1, 3, 3}, rng));
  Var y = tp.conv2d(x, w, Var{}, 1, 1, 1, 2);
  CHECK(tp.val(y).shape == Shape{1, 2, 4, 4});
}

TEST_CASE("conv2d matches naive direct summation on random instances") {
  Rng rng(42);
  struct Case {
    int64_t b, ci, h, w, co, k;
    int stride, pad, dil, groups;
  };
  std::vector<Case> cases = {
      {1, 1, 5, 5, 1, 3, 1, 0, 1, 1},  {2, 4, 9, 9, 3, 3, 1, 1, 1, 1},
      {1, 3, 8, 8, 6, 3, 2, 1, 1, 3},  {1, 4, 16, 16, 4, 3, 1, 6, 6, 4},
      {1, 2, 9, 9, 2, 1, 1, 0, 1, 1},  {2, 2, 30, 30, 2, 3, 1, 12, 12, 1},
      {1, 3, 40, 40, 3, 3, 1, 18, 18, 1}, {2, 4, 6, 6, 4, 3, 1, 1, 1, 4},
      {1, 6, 7, 7, 9, 3, 1, 2, 2, 3},  {2, 3, 10, 8, 5, 3, 2, 1, 1, 1},
  };
  for (const Case& c : cases) {
    Tensor<double> x = naive::random_tensor({c.b, c.ci, c.h, c.w}, rng);
    Tensor<double> w = naive::random_tensor({c.co, c.ci / c.groups, c.k, c.k}, rng);
    std::vector<double> bias;
    for (int64_t i = 0; i < c.co; ++i) bias.push_back(rng.uniform(-1, 1));
    Tensor<double> ref = naive::conv2d(x, w, bias, c.stride, c.pad, c.dil, c.groups);
    Tape<double> tp;
    Var xv = tp.leaf(x), wv = tp.leaf(w);
    Var bv = tp.leaf(Tensor<double>({c.co}, bias));
    Var y = tp.conv2d(xv, wv, bv, c.stride, c.pad, c.dil, c.groups);
    CHECK(max_abs_diff(tp.val(y), ref) < 1e-9);
  }
}

TEST_CASE("maxpool2d values and tie-breaking gradient") {
  Tape<double> tp;
  Var x = tp.leaf(Tensor<double>({1, 1, 2, 2}, {1, 2, 3, 4}), true);
  Var y = tp.maxpool2d(x, 2, 2);
  CHECK(tp.val(y).size() == 1);
  CHECK(tp.val(y)[0] == 4.0);
  Var s = tp.vsum(y);
  tp.backward(s);
  Tensor<double> g = tp.grad(x);
  CHECK(g[0] == 0.0);
  CHECK(g[1] == 0.0);
  CHECK(g[2] == 0.0);
  CHECK(g[3] == 1.0);
}

TEST_CASE("maxpool2d constant input stays constant; first-occurrence tie") {
  Tape<double> tp;
  Var x = tp.leaf(Tensor<double>::full({1, 1, 4, 4}, 3.25), true);
  Var y = tp.maxpool2d(x, 2, 2);
  for (int64_t i = 0; i < tp.val(y).size(); ++i) CHECK(tp.val(y)[i] == 3.25);
  tp.backward(tp.vsum(y));
  Tensor<double> g = tp.grad(x);
  // ties route to the first element of each window in row-major order
  for (int64_t oy = 0; oy < 2; ++oy)
    for (int64_t ox = 0; ox < 2; ++ox)
      for (int64_t i = 0; i < 2; ++i)
        for (int64_t j = 0; j < 2; ++j)
          CHECK(g[(2 * oy + i) * 4 + 2 * ox + j] == ((i == 0 && j == 0) ? 1.0 : 0.0));
}

TEST_CASE("maxpool2d matches naive reference") {
  Rng rng(3);
  for (int iter = 0; iter < 10; ++iter) {
    int64_t b = rng.uniform_int(1, 2), c = rng.uniform_int(1, 3);
    int s = rng.uniform_int(2, 4);
    int64_t h = s * rng.uniform_int(1, 5), w = s * rng.uniform_int(1, 5);
    Tensor<double> x = naive::random_tensor({b, c, h, w}, rng);
    Tape<double> tp;
    Var y = tp.maxpool2d(tp.leaf(x), s, s);
    CHECK(max_abs_diff(tp.val(y), naive::maxpool2d(x, s, s)) == 0.0);
  }
}

TEST_CASE("batchnorm2d train mode normalizes and handles constant channels") {
  Rng rng(11);
  Tensor<double> x = naive::random_tensor({4, 3, 5, 5}, rng, -2.0, 5.0);
  Tensor<double> rm = Tensor<double>::zeros({3});
  Tensor<double> rv = Tensor<double>::full({3}, 1.0);
  Tape<double> tp;
  Var g = tp.leaf(Tensor<double>::full({3}, 1.0));
  Var b = tp.leaf(Tensor<double>::zeros({3}));
  Var y = tp.batchnorm2d(tp.leaf(x), g, b, &rm, &rv, true, 0.1, 1e-5);
  const Tensor<double>& o = tp.val(y);
  int64_t n = 4 * 5 * 5;
  for (int64_t c = 0; c < 3; ++c) {
    double mu = 0, var = 0;
    for (int64_t bi = 0; bi < 4; ++bi)
      for (int64_t p = 0; p < 25; ++p) mu += o[(bi * 3 + c) * 25 + p];
    mu /= double(n);
    for (int64_t bi = 0; bi < 4; ++bi)
      for (int64_t p = 0; p < 25; ++p) {
        double v = o[(bi * 3 + c) * 25 + p] - mu;
        var += v * v;
      }
    var /= double(n);
    CHECK(std::abs(mu) <= 1e-6);
    CHECK(std::abs(var - 1.0) <= 1e-4);
  }
  // constant channel collapses to zeros via the eps-regularized variance
  Tensor<double> xc = Tensor<double>::full({2, 1, 3, 3}, 7.0);
  Tensor<double> rm1 = Tensor<double>::zeros({1}), rv1 = Tensor<double>::full({1}, 1.0);
  Tape<double> tp2;
  Var y2 = tp2.batchnorm2d(tp2.leaf(xc), tp2.leaf(Tensor<double>::full({1}, 1.0)),
                           tp2.leaf(Tensor<double>::zeros({1})), &rm1, &rv1, true, 0.1,
                           1e-5);
  for (int64_t i = 0; i < tp2.val(y2).size(); ++i)
    CHECK(tp2.val(y2)[i] == doctest::Approx(0.0).epsilon(1e-12));
}

TEST_CASE("batchnorm2d eval mode hand value") {
  // running mean 2, running var 4, gamma 3, beta 1, x = 4:
  // 3*(4-2)/sqrt(4+1e-5)+1
  Tensor<double> rm = Tensor<double>({1}, {2.0});
  Tensor<double> rv = Tensor<double>({1}, {4.0});
  Tape<double> tp;
  Var y = tp.batchnorm2d(tp.leaf(Tensor<double>::full({1, 1, 1, 2}, 4.0)),
                         tp.leaf(Tensor<double>({1}, {3.0})),
                         tp.leaf(Tensor<double>({1}, {1.0})), &rm, &rv, false, 0.1,
                         1e-5);
  double expect = 3.0 * (4.0 - 2.0) / std::sqrt(4.0 + 1e-5) + 1.0;
  CHECK(tp.val(y)[0] == doctest::Approx(expect).epsilon(1e-12));
  CHECK(tp.val(y)[0] == doctest::Approx(3.9999963).epsilon(1e-6));
  // eval mode must not touch running stats
  CHECK(rm[0] == 2.0);
  CHECK(rv[0] == 4.0);
}

TEST_CASE("attention single token returns V row exactly") {
  Rng rng(5);
  Tensor<double> q = naive::random_tensor({2, 1, 8}, rng);
  Tensor<double> k = naive::random_tensor({2, 1, 8}, rng);
  Tensor<double> v = naive::random_tensor({2, 1, 8}, rng);
  Tape<double> tp;
  Var y = tp.scaled_dot_attention(tp.leaf(q), tp.leaf(k), tp.leaf(v), 2);
  CHECK(max_abs_diff(tp.val(y), v) == 0.0);
}

TEST_CASE("attention identical K rows give uniform weights") {
  Rng rng(6);
  int64_t t = 5;
  Tensor<double> q = naive::random_tensor({1, t, 4}, rng);
  Tensor<double> k = Tensor<double>::zeros({1, t, 4});
  for (int64_t r = 0; r < t; ++r)
    for (int64_t c = 0; c < 4; ++c) k[r * 4 + c] = double(c) * 0.3 - 0.1;
  Tensor<double> v = naive::random_tensor({1, t, 4}, rng);
  Tape<double> tp;
  Var y = tp.scaled_dot_attention(tp.leaf(q), tp.leaf(k), tp.leaf(v), 1);
  // uniform weights -> every output row is the mean of V rows
  for (int64_t c = 0; c < 4; ++c) {
    double mean = 0;
    for (int64_t r = 0; r < t; ++r) mean += v[r * 4 + c];
    mean /= double(t);
    for (int64_t r = 0; r < t; ++r)
      CHECK(tp.val(y)[r * 4 + c] == doctest::Approx(mean).epsilon(1e-12));
  }
}

TEST_CASE("attention hand-evaluated two-token case") {
  // Q=[1,1], K=[0, ln4], V=[0,1], dk=1 -> weights softmax([0, ln4]) = [0.2, 0.8]
  Tape<double> tp;
  Var q = tp.leaf(Tensor<double>({1, 2, 1}, {1.0, 1.0}));
  Var k = tp.leaf(Tensor<double>({1, 2, 1}, {0.0, std::log(4.0)}));
  Var v = tp.leaf(Tensor<double>({1, 2, 1}, {0.0, 1.0}));
  Var y = tp.scaled_dot_attention(q, k, v, 1);
  CHECK(tp.val(y)[0] == doctest::Approx(0.8).epsilon(1e-12));
  CHECK(tp.val(y)[1] == doctest::Approx(0.8).epsilon(1e-12));
}

TEST_CASE("attention matches naive reference on random instances") {
  Rng rng(99);
  for (int iter = 0; iter < 10; ++iter) {
    int heads = 1 << rng.uniform_int(0, 2);
    int64_t t = rng.uniform_int(1, 9);
    int64_t dk = heads * rng.uniform_int(1, 6);
    int64_t dv = heads * rng.uniform_int(1, 6);
    int64_t b = rng.uniform_int(1, 3);
    Tensor<double> q = naive::random_tensor({b, t, dk}, rng);
    Tensor<double> k = naive::random_tensor({b, t, dk}, rng);
    Tensor<double> v = naive::random_tensor({b, t, dv}, rng);
    Tape<double> tp;
    Var y = tp.scaled_dot_attention(tp.leaf(q), tp.leaf(k), tp.leaf(v), heads);
    CHECK(max_abs_diff(tp.val(y), naive::attention(q, k, v, heads)) < 1e-12);
  }
}

TEST_CASE("elementwise and softmax basics") {
  Tape<double> tp;
  Var sm = tp.softmax_lastdim(tp.leaf(Tensor<double>({2}, {0.0, 0.0})));
  CHECK(tp.val(sm)[0] == doctest::Approx(0.5).epsilon(1e-12));
  CHECK(tp.val(sm)[1] == doctest::Approx(0.5).epsilon(1e-12));
  Var r = tp.relu(tp.leaf(Tensor<double>({1}, {-3.0})));
  CHECK(tp.val(r)[0] == 0.0);
  Var s = tp.sigmoid(tp.leaf(Tensor<double>({1}, {0.0})));
  CHECK(tp.val(s)[0] == doctest::Approx(0.5).epsilon(1e-15));
  // softmax rows sum to 1
  Rng rng(1);
  Var big = tp.softmax_lastdim(tp.leaf(naive::random_tensor({7, 13}, rng, -30, 30)));
  for (int64_t row = 0; row < 7; ++row) {
    double sum = 0;
    for (int64_t j = 0; j < 13; ++j) sum += tp.val(big)[row * 13 + j];
    CHECK(std::abs(sum - 1.0) < 1e-6);
  }
}

TEST_CASE("nearest upsample2x block-replicates") {
  Tape<double> tp;
  Var x = tp.leaf(Tensor<double>({1, 1, 2, 2}, {1, 2, 3, 4}));
  Var y = tp.upsample2x(x, UpsampleMode::Nearest);
  std::vector<double> expect = {1, 1, 2, 2, 1, 1, 2, 2, 3, 3, 4, 4, 3, 3, 4, 4};
  for (int64_t i = 0; i < 16; ++i) CHECK(tp.val(y)[i] == expect[size_t(i)]);
}

TEST_CASE("bilinear upsample2x is corner-aligned") {
  Tape<double> tp;
  // constant input stays exactly constant, including the 1x1 -> 2x2 case
  Var c = tp.leaf(Tensor<double>::full({1, 1, 1, 1}, 0.7));
  Var yc = tp.upsample2x(c, UpsampleMode::Bilinear);
  for (int64_t i = 0; i < 4; ++i) CHECK(tp.val(yc)[i] == 0.7);
  // 1x2 row [0,1] -> corners map to corners: [0, 1/3, 2/3, 1]
  Var x = tp.leaf(Tensor<double>({1, 1, 1, 2}, {0.0, 1.0}));
  Var y = tp.upsample2x(x, UpsampleMode::Bilinear);
  CHECK(tp.val(y)[0] == doctest::Approx(0.0).epsilon(1e-12));
  CHECK(tp.val(y)[1] == doctest::Approx(1.0 / 3).epsilon(1e-12));
  CHECK(tp.val(y)[2] == doctest::Approx(2.0 / 3).epsilon(1e-12));
  CHECK(tp.val(y)[3] == doctest::Approx(1.0).epsilon(1e-12));
}

TEST_CASE("forward passes are bit-identical across runs") {
  Rng rng(1234);
  Tensor<double> x = naive::random_tensor({2, 3, 12, 12}, rng);
  Tensor<double> w = naive::random_tensor({4, 3, 3, 3}, rng);
  std::vector<double> first;
  for (int run = 0; run < 2; ++run) {
    Tape<double> tp;
    Var y = tp.conv2d(tp.leaf(x), tp.leaf(w), Var{}, 1, 1, 1, 1);
    Var z = tp.scaled_dot_attention(tp.nchw_to_ntc(y), tp.nchw_to_ntc(y),
                                    tp.nchw_to_ntc(y), 2);
    const Tensor<double>& o = tp.val(z);
    if (run == 0)
      first = o.data;
    else
      for (int64_t i = 0; i < o.size(); ++i) CHECK(o[i] == first[size_t(i)]);
  }
}

TEST_CASE("backward twice without fresh forward is an error") {
  Tape<double> tp;
  Var x = tp.leaf(Tensor<double>({3}, {1, 2, 3}), true);
  Var s = tp.vsum(tp.mul(x, x));
  tp.backward(s);
  CHECK_THROWS_AS(tp.backward(s), Error);
}

TEST_CASE("non-finite forward values are rejected") {
  Tape<double> tp;
  Var x = tp.leaf(Tensor<double>({1}, {800.0}));
  CHECK_THROWS_AS((void)tp.exp_op(x), Error);  // exp(800) overflows to inf
}

TEST_CASE("grad_check quadratic sanity") {
  Tensor<double> theta({3}, {1, 2, 3});
  auto loss = [&]() {
    Tape<double> tp;
    Var x = tp.leaf(theta, true);
    return tp.val(tp.vsum(tp.mul(x, x)))[0];
  };
  auto grads = [&]() {
    Tape<double> tp;
    Var x = tp.leaf(theta, true);
    Var s = tp.vsum(tp.mul(x, x));
    tp.backward(s);
    return std::vector<Tensor<double>>{tp.grad(x)};
  };
  GradCheckReport rep = grad_check(loss, grads, {&theta}, 1e-5, 1e-9, 100, 0);
  CHECK(rep.pass);
  CHECK(rep.max_rel_error <= 1e-9);
  // analytic grads are exactly [2,4,6]
  Tensor<double> g = grads()[0];
  CHECK(g[0] == doctest::Approx(2.0).epsilon(1e-12));
  CHECK(g[1] == doctest::Approx(4.0).epsilon(1e-12));
  CHECK(g[2] == doctest::Approx(6.0).epsilon(1e-12));
}

namespace {

// grad_check over sum(f(inputs)) for an arbitrary tape expression
template <typename BuildFn>
void check_expression_grads(std::vector<Tensor<double>> inputs, BuildFn build,
                            double tol, uint64_t seed, double eps = 1e-5) {
  auto loss = [&]() {
    Tape<double> tp;
    std::vector<Var> vars;
    for (auto& t : inputs) vars.push_back(tp.leaf(t, true));
    return tp.val(build(tp, vars))[0];
  };
  auto grads = [&]() {
    Tape<double> tp;
    std::vector<Var> vars;
    for (auto& t : inputs) vars.push_back(tp.leaf(t, true));
    Var s = build(tp, vars);
    tp.backward(s);
    std::vector<Tensor<double>> gs;
    for (Var v : vars) gs.push_back(tp.grad(v));
    return gs;
  };
  std::vector<Tensor<double>*> ptrs;
  for (auto& t : inputs) ptrs.push_back(&t);
  GradCheckReport rep = grad_check(loss, grads, ptrs, eps, tol, 120, seed);
  INFO("max_rel_error=", rep.max_rel_error, " worst=", rep.worst);
  CHECK(rep.pass);
}

}  // namespace

TEST_CASE("grad_check conv2d random shapes") {
  Rng rng(17);
  for (uint64_t iter = 0; iter < 3; ++iter) {
    Tensor<double> x = naive::random_tensor({1, 2, 6, 6}, rng);
    Tensor<double> w = naive::random_tensor({3, 2, 3, 3}, rng);
    Tensor<double> b = naive::random_tensor({3}, rng);
    check_expression_grads(
        {x, w, b},
        [](Tape<double>& tp, std::vector<Var>& v) {
          return tp.vsum(tp.conv2d(v[0], v[1], v[2], 1, 1, 1, 1));
        },
        1e-6, iter);
  }
  // strided + dilated + grouped variant
  Tensor<double> x = naive::random_tensor({2, 4, 9, 9}, rng);
  Tensor<double> w = naive::random_tensor({4, 1, 3, 3}, rng);
  check_expression_grads(
      {x, w},
      [](Tape<double>& tp, std::vector<Var>& v) {
        return tp.vsum(tp.sigmoid(tp.conv2d(v[0], v[1], Var{}, 2, 2, 2, 4)));
      },
      1e-6, 9);
}

TEST_CASE("grad_check attention") {
  Rng rng(23);
  for (uint64_t iter = 0; iter < 3; ++iter) {
    Tensor<double> q = naive::random_tensor({1, 4, 8}, rng);
    Tensor<double> k = naive::random_tensor({1, 4, 8}, rng);
    Tensor<double> v = naive::random_tensor({1, 4, 8}, rng);
    check_expression_grads(
        {q, k, v},
        [](Tape<double>& tp, std::vector<Var>& vars) {
          return tp.vsum(
              tp.sigmoid(tp.scaled_dot_attention(vars[0], vars[1], vars[2], 2)));
        },
        1e-5, iter);
  }
}

TEST_CASE("grad_check remaining primitives on random shapes") {
  Rng rng(31);
  for (uint64_t iter = 0; iter < 3; ++iter) {
    // relu composed through a smooth head so the kink is never sampled directly
    check_expression_grads(
        {naive::random_tensor({4, 7}, rng)},
        [](Tape<double>& tp, std::vector<Var>& v) {
          return tp.vsum(tp.sigmoid(tp.relu(v[0])));
        },
        1e-4, iter);
    check_expression_grads(
        {naive::random_tensor({3, 5}, rng)},
        [](Tape<double>& tp, std::vector<Var>& v) {
          return tp.vsum(tp.mul(tp.softmax_lastdim(v[0]), v[0]));
        },
        1e-4, iter);
    check_expression_grads(
        {naive::random_tensor({2, 6}, rng), naive::random_tensor({6, 4}, rng),
         naive::random_tensor({4}, rng)},
        [](Tape<double>& tp, std::vector<Var>& v) {
          return tp.vsum(tp.sigmoid(tp.linear(v[0], v[1], v[2])));
        },
        1e-4, iter);
    check_expression_grads(
        {naive::random_tensor({1, 2, 3, 4}, rng)},
        [](Tape<double>& tp, std::vector<Var>& v) {
          return tp.vsum(tp.sigmoid(tp.upsample2x(v[0], UpsampleMode::Bilinear)));
        },
        1e-4, iter);
    check_expression_grads(
        {naive::random_tensor({1, 2, 4, 4}, rng)},
        [](Tape<double>& tp, std::vector<Var>& v) {
          return tp.vsum(tp.sigmoid(tp.upsample2x(v[0], UpsampleMode::Nearest)));
        },
        1e-4, iter);
    check_expression_grads(
        {naive::random_tensor({1, 3, 4, 4}, rng)},
        [](Tape<double>& tp, std::vector<Var>& v) {
          return tp.vsum(tp.sigmoid(tp.maxpool2d(v[0], 2, 2)));
        },
        1e-4, iter);
    check_expression_grads(
        {naive::random_tensor({2, 3, 4}, rng), naive::random_tensor({2, 5, 4}, rng)},
        [](Tape<double>& tp, std::vector<Var>& v) {
          return tp.vsum(tp.sigmoid(tp.concat({v[0], v[1]}, 1)));
        },
        1e-4, iter);
    check_expression_grads(
        {naive::random_tensor({4, 9}, rng, 0.1, 2.0)},
        [](Tape<double>& tp, std::vector<Var>& v) {
          return tp.vsum(tp.log_op(v[0]));
        },
        1e-4, iter);
    check_expression_grads(
        {naive::random_tensor({4, 9}, rng, 0.2, 0.9)},
        [](Tape<double>& tp, std::vector<Var>& v) {
          return tp.vsum(tp.pow_scalar(v[0], 2.0));
        },
        1e-4, iter);
    check_expression_grads(
        {naive::random_tensor({3, 8}, rng)},
        [](Tape<double>& tp, std::vector<Var>& v) {
          return tp.vsum(tp.mul(tp.exp_op(tp.log_softmax_lastdim(v[0])), v[0]));
        },
        1e-4, iter);
    check_expression_grads(
        {naive::random_tensor({5, 6}, rng)},
        [](Tape<double>& tp, std::vector<Var>& v) {
          return tp.vsum(tp.sigmoid(tp.l2normalize_rows(v[0])));
        },
        1e-4, iter);
    check_expression_grads(
        {naive::random_tensor({2, 4, 3, 3}, rng)},
        [](Tape<double>& tp, std::vector<Var>& v) {
          return tp.vsum(tp.sigmoid(tp.global_max_pool(v[0])));
        },
        1e-4, iter);
    check_expression_grads(
        {naive::random_tensor({2, 5, 6}, rng), naive::random_tensor({6}, rng, 0.5, 1.5),
         naive::random_tensor({6}, rng)},
        [](Tape<double>& tp, std::vector<Var>& v) {
          return tp.vsum(tp.sigmoid(tp.layer_norm_lastdim(v[0], v[1], v[2], 1e-5)));
        },
        1e-4, iter);
    check_expression_grads(
        {naive::random_tensor({2, 3, 4, 4}, rng), naive::random_tensor({3}, rng, 0.5, 2),
         naive::random_tensor({3}, rng)},
        [](Tape<double>& tp, std::vector<Var>& v) {
          Tensor<double> rm = Tensor<double>::zeros({3});
          Tensor<double> rv = Tensor<double>::full({3}, 1.0);
          return tp.vsum(
              tp.sigmoid(tp.batchnorm2d(v[0], v[1], v[2], &rm, &rv, true, 0.1, 1e-5)));
        },
        1e-4, iter);
    check_expression_grads(
        {naive::random_tensor({2, 4}, rng)},
        [](Tape<double>& tp, std::vector<Var>& v) {
          Tensor<double> target({2, 4}, {1, 0, 0, 1, 0, 1, 1, 0});
          return tp.bce_with_logits_mean(v[0], target);
        },
        1e-4, iter);
    check_expression_grads(
        {naive::random_tensor({1, 2, 2, 2}, rng), naive::random_tensor({8, 2}, rng)},
        [](Tape<double>& tp, std::vector<Var>& v) {
          Var tok = tp.nchw_to_ntc(v[0]);  // [1,4,2]
          Var withpos = tp.add_broadcast_rows(tok, tp.slice_axis(v[1], 0, 0, 4));
          return tp.vsum(tp.sigmoid(tp.ntc_to_nchw(withpos, 2, 2)));
        },
        1e-4, iter);
    check_expression_grads(
        {naive::random_tensor({3}, rng), naive::random_tensor({2, 2}, rng)},
        [](Tape<double>& tp, std::vector<Var>& v) {
          Var maps = tp.broadcast_rows_to_maps(v[0], 2, 3);
          Var sc = tp.mean_all(v[1]);
          Var bc = tp.broadcast_scalar(sc, {3, 1, 2, 3});
          return tp.vsum(tp.sigmoid(tp.mul(maps, bc)));
        },
        1e-4, iter);
  }
}

TEST_CASE("division and reductions compose correctly") {
  // soft-dice-shaped expression: (2*sum(p*y)+eps)/(sum(p)+sum(y)+eps)
  Rng rng(77);
  Tensor<double> logits = naive::random_tensor({1, 6}, rng);
  Tensor<double> y({1, 6}, {1, 0, 1, 0, 0, 1});
  check_expression_grads(
      {logits},
      [&](Tape<double>& tp, std::vector<Var>& v) {
        Var p = tp.sigmoid(v[0]);
        Var yv = tp.leaf(y);
        Var inter = tp.vsum(tp.mul(p, yv));
        Var denom = tp.add(tp.vsum(p), tp.vsum(yv));
        Var dice = tp.divide(tp.affine(inter, 2.0, 1e-6), tp.affine(denom, 1.0, 1e-6));
        return tp.affine(dice, -1.0, 1.0);
      },
      1e-6, 4);
}
