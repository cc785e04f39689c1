#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <sstream>

#include "pyrec/rng.hpp"
#include "pyrec/tensor.hpp"
#include "support/oracles.hpp"

using namespace pyrec;

TEST_CASE("matmul identity and scalar cases") {
  Tensor eye = Tensor::from({3, 3}, {1, 0, 0, 0, 1, 0, 0, 0, 1});
  Rng rng(11);
  Tensor b = oracles::random_tensor({3, 5}, rng);
  Tensor out = matmul(eye, b);
  for (size_t i = 0; i < b.numel(); ++i) CHECK(out.at(i) == b.at(i));

  Tensor two = Tensor::from({1, 1}, {2.0f});
  Tensor three = Tensor::from({1, 1}, {3.0f});
  CHECK(matmul(two, three).item() == doctest::Approx(6.0f));
}

TEST_CASE("matmul matches the triple-loop oracle") {
  Rng rng(5);
  Tensor a = oracles::random_tensor({5, 4}, rng);
  Tensor b = oracles::random_tensor({4, 3}, rng);
  Tensor c = matmul(a, b);
  auto ref = oracles::naive_matmul(a.data().data(), b.data().data(), 5, 4, 3);
  for (size_t i = 0; i < ref.size(); ++i)
    CHECK(std::fabs(c.at(i) - ref[i]) <= 1e-6f);

  // random shapes up to 32
  for (int trial = 0; trial < 20; ++trial) {
    const int m = rng.uniform_int(1, 32), k = rng.uniform_int(1, 32), n = rng.uniform_int(1, 32);
    Tensor x = oracles::random_tensor({m, k}, rng, -0.25f, 0.25f);
    Tensor y = oracles::random_tensor({k, n}, rng, -0.25f, 0.25f);
    Tensor z = matmul(x, y);
    auto r = oracles::naive_matmul(x.data().data(), y.data().data(), m, k, n);
    for (size_t i = 0; i < r.size(); ++i) CHECK(std::fabs(z.at(i) - r[i]) <= 1e-6f);
  }
}

TEST_CASE("matmul rejects mismatched inner extents") {
  Tensor a = Tensor::zeros({2, 3});
  Tensor b = Tensor::zeros({4, 2});
  CHECK_THROWS_AS(matmul(a, b), ShapeError);
}

TEST_CASE("softmax is a stabilized probability map") {
  Tensor x = Tensor::from({1, 4}, {3.0f, 3.0f, 3.0f, 3.0f});
  Tensor p = softmax_rows(x);
  for (int j = 0; j < 4; ++j) CHECK(p.at(0, j) == doctest::Approx(0.25f));

  Rng rng(3);
  Tensor y = oracles::random_tensor({4, 7}, rng, -30.0f, 30.0f);
  Tensor py = softmax_rows(y);
  for (int i = 0; i < 4; ++i) {
    float s = 0.0f;
    for (int j = 0; j < 7; ++j) {
      CHECK(py.at(i, j) > 0.0f);
      s += py.at(i, j);
    }
    CHECK(std::fabs(s - 1.0f) <= 1e-6f);
  }

  // shift invariance
  Tensor shifted = add_scalar(y, 3.7f);
  Tensor ps = softmax_rows(shifted);
  for (size_t i = 0; i < py.numel(); ++i) CHECK(std::fabs(ps.at(i) - py.at(i)) <= 1e-6f);
}

TEST_CASE("layer_norm moments") {
  Tensor gain = Tensor::full({8}, 1.0f);
  Tensor bias = Tensor::zeros({8});
  Tensor constant = Tensor::full({2, 8}, 4.2f);
  Tensor out = layer_norm(constant, gain, bias);
  for (size_t i = 0; i < out.numel(); ++i) CHECK(out.at(i) == 0.0f);

  // constant row with gain 1 bias b -> bias vector
  Tensor b2 = Tensor::from({2}, {0.3f, -0.7f});
  Tensor g2 = Tensor::full({2}, 1.0f);
  Tensor row = Tensor::from({1, 2}, {5.0f, 5.0f});
  Tensor ob = layer_norm(row, g2, b2);
  CHECK(ob.at(0, 0) == doctest::Approx(0.3f));
  CHECK(ob.at(0, 1) == doctest::Approx(-0.7f));

  // mean ~ bias, variance ~ gain^2
  Rng rng(17);
  const int d = 64;
  Tensor x = oracles::random_tensor({1, d}, rng, -2.0f, 2.0f);
  const float gamma = 1.7f, beta = 0.4f;
  Tensor o = layer_norm(x, Tensor::full({d}, gamma), Tensor::full({d}, beta));
  double mu = 0.0;
  for (int j = 0; j < d; ++j) mu += o.at(0, j);
  mu /= d;
  double var = 0.0;
  for (int j = 0; j < d; ++j) var += (o.at(0, j) - mu) * (o.at(0, j) - mu);
  var /= d;
  CHECK(std::fabs(mu - beta) <= 1e-4);
  CHECK(std::fabs(var - gamma * gamma) <= 1e-4 * gamma * gamma + 1e-4);

  // closed form for [1, -1] with the default eps
  Tensor pm = layer_norm(Tensor::from({1, 2}, {1.0f, -1.0f}), g2, Tensor::zeros({2}));
  CHECK(std::fabs(pm.at(0, 0) - 1.0f) <= 1e-4f);
  CHECK(std::fabs(pm.at(0, 1) + 1.0f) <= 1e-4f);
}

TEST_CASE("backward computes sum(x^2) -> 2x and zero for unused leaves") {
  Tensor x = Tensor::from({3}, {1.5f, -2.0f, 0.25f}, true);
  Tensor unused = Tensor::from({2}, {1.0f, 1.0f}, true);
  Tensor loss = sum(mul(x, x));
  backward(loss);
  CHECK(x.grad()[0] == doctest::Approx(3.0f));
  CHECK(x.grad()[1] == doctest::Approx(-4.0f));
  CHECK(x.grad()[2] == doctest::Approx(0.5f));
  CHECK(unused.grad().empty());
}

TEST_CASE("backward requires a scalar root") {
  Tensor x = Tensor::from({2}, {1.0f, 2.0f}, true);
  Tensor y = mul(x, x);
  CHECK_THROWS_AS(backward(y), ContractError);
}

TEST_CASE("gradient accumulation is additive and zero_grad resets") {
  Tensor x = Tensor::from({1}, {2.0f}, true);
  backward(sum(mul(x, x)));
  backward(sum(mul(x, x)));
  CHECK(x.grad()[0] == doctest::Approx(8.0f));
  x.zero_grad();
  CHECK(x.grad()[0] == 0.0f);
}

TEST_CASE("check_gradients is exact on dyadic quadratics and linear maps") {
  // x^T A x with quarter-integer values: every float operation is exact, so
  // central differencing at dyadic steps has zero error.
  Tensor x = Tensor::from({1, 4}, {0.75f, -1.25f, 0.5f, 2.0f}, true);
  Tensor a = Tensor::from({4, 4}, {2, 1, 0, 0, 1, 3, 1, 0, 0, 1, 2, 1, 0, 0, 1, 4});
  auto quad = [&] { return sum(mul(matmul(x, a), x)); };
  GradCheckOptions opts;
  opts.steps = {0.25f, 0.5f};
  opts.max_coords = 4;
  std::vector<Tensor> params{x};
  auto rep = check_gradients(quad, params, opts);
  CHECK(rep.checked == 4);
  CHECK(rep.max_rel_err <= 1e-6);

  Tensor w = Tensor::from({1, 4}, {1.0f, -2.0f, 0.5f, 4.0f});
  auto linear = [&] { return sum(mul(x, w)); };
  auto rep2 = check_gradients(linear, params, opts);
  CHECK(rep2.max_rel_err <= 1e-7);
}

TEST_CASE("check_gradients skips probes that straddle a clamp kink") {
  // sharp-sigmoid style clamp at x = ln(11); a probe across it is excluded
  const float edge = std::log(11.0f);
  Tensor x = Tensor::from({1}, {edge}, true);
  std::vector<uint8_t> trace;
  auto make_loss = [&] {
    trace.clear();
    BranchTraceScope ts(&trace);
    return sum(clamp_min(scale(x, -1.0f), -edge));  // kink exactly at x = edge
  };
  GradCheckOptions opts;
  opts.steps = {1e-3f};
  opts.max_coords = 1;
  opts.signature = [&] { return trace; };
  std::vector<Tensor> params{x};
  auto rep = check_gradients(make_loss, params, opts);
  CHECK(rep.skipped == 1);
  CHECK(rep.checked == 0);
}

TEST_CASE("elementwise and reduction ops match finite differences") {
  Rng rng(23);
  auto check_op = [&](auto&& build) {
    Tensor x = oracles::random_tensor({2, 6}, rng, -1.2f, 1.2f, true);
    Tensor w = oracles::random_tensor({2, 6}, rng);
    auto make_loss = [&] { return sum(mul(build(x), w)); };
    std::vector<Tensor> params{x};
    GradCheckOptions opts;
    opts.max_coords = 12;
    auto rep = check_gradients(make_loss, params, opts);
    CHECK(rep.max_rel_err <= 1e-3);
  };
  check_op([](const Tensor& t) { return gelu(t); });
  check_op([](const Tensor& t) { return sigmoid(t); });
  check_op([](const Tensor& t) { return softmax_rows(t); });
  check_op([](const Tensor& t) { return mul(t, t); });

  // layer_norm w.r.t. input, gain and bias
  Tensor x = oracles::random_tensor({3, 8}, rng, -1.0f, 1.0f, true);
  Tensor g = oracles::random_tensor({8}, rng, 0.5f, 1.5f, true);
  Tensor b = oracles::random_tensor({8}, rng, -0.5f, 0.5f, true);
  Tensor w = oracles::random_tensor({3, 8}, rng);
  auto make_loss = [&] { return sum(mul(layer_norm(x, g, b), w)); };
  std::vector<Tensor> params{x, g, b};
  GradCheckOptions opts;
  opts.max_coords = 30;
  auto rep = check_gradients(make_loss, params, opts);
  CHECK(rep.max_rel_err <= 1e-3);
}

TEST_CASE("matmul and gather gradients match finite differences") {
  Rng rng(29);
  Tensor a = oracles::random_tensor({3, 4}, rng, -1.0f, 1.0f, true);
  Tensor b = oracles::random_tensor({4, 5}, rng, -1.0f, 1.0f, true);
  Tensor w = oracles::random_tensor({3, 5}, rng);
  auto make_loss = [&] { return sum(mul(matmul(a, b), w)); };
  std::vector<Tensor> params{a, b};
  GradCheckOptions opts;
  opts.max_coords = 32;
  CHECK(check_gradients(make_loss, params, opts).max_rel_err <= 1e-3);

  Tensor table = oracles::random_tensor({6, 3}, rng, -1.0f, 1.0f, true);
  Tensor w2 = oracles::random_tensor({4, 3}, rng);
  auto gather_loss = [&] { return sum(mul(gather_rows(table, {1, 3, 3, 5}), w2)); };
  std::vector<Tensor> params2{table};
  CHECK(check_gradients(gather_loss, params2, opts).max_rel_err <= 1e-3);
}

TEST_CASE("divide signals on zero denominators instead of emitting NaN") {
  Tensor a = Tensor::from({2}, {1.0f, 2.0f});
  Tensor b = Tensor::from({2}, {2.0f, 0.0f});
  CHECK_THROWS_AS(divide(a, b), ContractError);
  Tensor ok = divide(a, Tensor::from({2}, {2.0f, 4.0f}));
  CHECK(ok.at(static_cast<size_t>(0)) == doctest::Approx(0.5f));
  CHECK(all_finite(ok));
}

TEST_CASE("gather_rows rejects out-of-range ids") {
  Tensor table = Tensor::zeros({4, 2});
  CHECK_THROWS_AS(gather_rows(table, {4}), InputError);
}

TEST_CASE("straight_through forwards injected values but routes gradients") {
  Tensor soft = Tensor::from({3}, {0.2f, 0.5f, 0.9f}, true);
  std::vector<float> hard = {0.0f, 1.0f, 1.0f};
  Tensor s = straight_through(soft, hard);
  CHECK(s.at(static_cast<size_t>(0)) == 0.0f);
  CHECK(s.at(static_cast<size_t>(1)) == 1.0f);
  Tensor w = Tensor::from({3}, {1.0f, 2.0f, 3.0f});
  backward(sum(mul(s, w)));
  CHECK(soft.grad()[0] == doctest::Approx(1.0f));
  CHECK(soft.grad()[1] == doctest::Approx(2.0f));
  CHECK(soft.grad()[2] == doctest::Approx(3.0f));
}

TEST_CASE("backward into a sink leaves parameter grads untouched") {
  Tensor x = Tensor::from({2}, {1.0f, 3.0f}, true);
  GradMap sink;
  backward(sum(mul(x, x)), sink);
  CHECK(x.grad().empty());
  const std::vector<float>* g = sink.find(x.node().get());
  REQUIRE(g != nullptr);
  CHECK((*g)[0] == doctest::Approx(2.0f));
  CHECK((*g)[1] == doctest::Approx(6.0f));
}

TEST_CASE("tensor dump renders a plain-text grid") {
  Tensor t = Tensor::from({2, 2}, {1.0f, 2.0f, 3.0f, 4.0f});
  std::ostringstream os;
  dump(t, os);
  CHECK(os.str().find("tensor [2x2]") != std::string::npos);
  CHECK(os.str().find('3') != std::string::npos);
}

TEST_CASE("no-grad scope suppresses graph construction") {
  Tensor x = Tensor::from({2}, {1.0f, 2.0f}, true);
  NoGradGuard ng;
  Tensor y = mul(x, x);
  CHECK_FALSE(y.requires_grad());
}
