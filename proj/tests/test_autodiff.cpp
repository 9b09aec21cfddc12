#include "doctest.h"

#include <cmath>
#include <random>
#include <vector>

#include "grad_cases.hpp"
#include "xmmp/autodiff.hpp"

using namespace xmmp::ad;

using gradcases::random_tensor;
using gradcases::weighted_sum;

TEST_CASE("matmul of a 2x2 by a column") {
  Tape tape;
  Var a = tape.constant(Tensor::matrix({{1, 2}, {3, 4}}));
  Var b = tape.constant(Tensor::matrix({{1}, {1}}));
  Var c = matmul(a, b);
  CHECK(c.shape() == Shape{2, 1});
  CHECK(c.value()[0] == 3.0);
  CHECK(c.value()[1] == 7.0);
}

TEST_CASE("softmax of equal logits is uniform") {
  Tape tape;
  Var y = softmax(tape.constant(Tensor::vector({0.0, 0.0})), 0);
  CHECK(y.value()[0] == doctest::Approx(0.5));
  CHECK(y.value()[1] == doctest::Approx(0.5));
}

TEST_CASE("softmax is stable for large logits") {
  Tape tape;
  Var y = softmax(tape.constant(Tensor::vector({1000.0, 1000.0, 0.0})), 0);
  CHECK(y.value()[0] == doctest::Approx(0.5));
  CHECK(y.value()[2] == 0.0);
}

TEST_CASE("detach is a forward identity") {
  std::mt19937_64 rng(3);
  Tape tape;
  Tensor x = random_tensor({3, 4}, rng);
  Var d = detach(tape.leaf(x));
  CHECK(d.value() == x);
  CHECK_FALSE(d.requires_grad());
}

TEST_CASE("gradient of a linear map") {
  Tape tape;
  Var w = tape.constant(Tensor::vector({2.0, -1.0}));
  Var x = tape.leaf(Tensor::vector({1.0, 4.0}));
  Var y = sum(mul(w, x), 0);
  tape.backward(y);
  const Tensor g = tape.grad(x);
  CHECK(g[0] == 2.0);
  CHECK(g[1] == -1.0);
}

TEST_CASE("inactive relu passes no gradient") {
  Tape tape;
  Var x = tape.leaf(Tensor::vector({-1.0}));
  Var y = sum(relu(scale(x, 2.0)), 0);
  tape.backward(y);
  CHECK(tape.grad(x)[0] == 0.0);
}

TEST_CASE("only the non-detached factor contributes") {
  Tape tape;
  Var x = tape.leaf(Tensor::vector({3.0}));
  Var y = sum(mul(detach(x), x), 0);
  CHECK(y.value().item() == 9.0);
  tape.backward(y);
  CHECK(tape.grad(x)[0] == 3.0);
}

TEST_CASE("gradient through a purely detached path is exactly zero") {
  std::mt19937_64 rng(5);
  Tape tape;
  Var x = tape.leaf(random_tensor({2, 3}, rng));
  Var y = sum_all(exp(mul(detach(x), detach(x))));
  Var z = add(y, scale(sum_all(x), 0.0));
  tape.backward(z);
  for (double g : tape.grad(x).values()) CHECK(g == 0.0);
}

TEST_CASE("backward errors") {
  Tape tape;
  Var x = tape.leaf(Tensor::vector({1.0, 2.0}));
  Var y = scale(x, 2.0);
  CHECK_THROWS_AS(tape.backward(y), TapeError);
  Var s = sum(y, 0);
  tape.backward(s);
  CHECK_THROWS_AS(tape.backward(s), TapeError);
  tape.reset_gradients();
  CHECK_NOTHROW(tape.backward(s));
}

TEST_CASE("explicit seed for non-scalar output") {
  Tape tape;
  Var x = tape.leaf(Tensor::vector({1.0, 2.0}));
  Var y = scale(x, 3.0);
  tape.backward(y, Tensor::vector({1.0, -1.0}));
  CHECK(tape.grad(x)[0] == 3.0);
  CHECK(tape.grad(x)[1] == -3.0);
}

TEST_CASE("shape errors and non-finite outputs") {
  Tape tape;
  Var a = tape.leaf(Tensor::matrix({{1, 2}, {3, 4}}));
  Var b = tape.leaf(Tensor::matrix({{1, 2, 3}}));
  CHECK_THROWS_AS(add(a, b), ShapeError);
  CHECK_THROWS_AS(matmul(a, b), ShapeError);
  CHECK_THROWS_AS(slice(a, 1, 1, 3), ShapeError);
  CHECK_THROWS_AS(reshape(a, {3}), ShapeError);
  Var z = tape.leaf(Tensor::vector({0.0, 1.0}));
  CHECK_THROWS_AS(log(z), NumericError);
  CHECK_THROWS_AS(div(tape.leaf(Tensor::vector({1.0})), tape.leaf(Tensor::vector({0.0}))), NumericError);
}

TEST_CASE("forward_primitive dispatch") {
  Tape tape;
  Var a = tape.leaf(Tensor::matrix({{1, 2}, {3, 4}}));
  Var b = tape.leaf(Tensor::matrix({{1}, {1}}));
  const Var in[] = {a, b};
  Var c = forward_primitive(Primitive::matmul, in);
  CHECK(c.value()[1] == 7.0);
  PrimitiveArgs args;
  args.axis = 1;
  const Var one[] = {a};
  CHECK(forward_primitive(Primitive::sum, one, args).value()[0] == 3.0);
  CHECK_THROWS_AS(forward_primitive(Primitive::leaf, one), std::invalid_argument);
  CHECK(parse_primitive("softmax") == Primitive::softmax);
  CHECK_FALSE(parse_primitive("conv2d").has_value());
}

TEST_CASE("grad_check examples") {
  SUBCASE("quadratic") {
    auto f = [](Tape&, const Var& x) { return sum_all(mul(x, x)); };
    const auto r = grad_check(f, Tensor::vector({3.0}), 1e-4);
    CHECK(r.max_relative_error < 1e-6);
  }
  SUBCASE("linear") {
    auto f = [](Tape& t, const Var& x) { return sum_all(mul(t.constant(Tensor::vector({2.0, -1.0, 0.5})), x)); };
    const auto r = grad_check(f, Tensor::vector({1.0, 4.0, -2.0}), 1e-4);
    CHECK(r.max_relative_error < 1e-9);
  }
  SUBCASE("step outside the allowed range") {
    auto f = [](Tape&, const Var& x) { return sum_all(x); };
    CHECK_THROWS_AS(grad_check(f, Tensor::vector({1.0}), 1e-2), std::invalid_argument);
  }
}

TEST_CASE("grad_check freezes detached values") {
  // y = sum(detach(x) * x): the analytic gradient treats detach(x) as a
  // constant, and the replayed finite differences do the same.
  auto f = [](Tape&, const Var& x) { return sum_all(mul(detach(x), x)); };
  const auto r = grad_check(f, Tensor::vector({3.0, -2.0, 0.5}), 1e-5);
  CHECK(r.max_relative_error < 1e-9);
}

TEST_CASE("every primitive matches central differences on random inputs") {
  std::mt19937_64 rng(20240601);
  const auto cases = gradcases::primitive_cases(rng);
  for (const auto& c : cases) {
    CAPTURE(c.name);
    double worst = 0.0;
    for (int trial = 0; trial < 100; ++trial) {
      const Tensor p = random_tensor(c.shape, rng, c.lo, c.hi);
      worst = std::max(worst, grad_check(c.f, p, 1e-5).max_relative_error);
    }
    CHECK(worst < 1e-4);
  }
}

TEST_CASE("backward is deterministic") {
  std::mt19937_64 rng(9);
  const Tensor p = random_tensor({4, 5}, rng);
  const Tensor w = random_tensor({5, 3}, rng);
  auto run = [&]() {
    Tape tape;
    Var x = tape.leaf(p);
    Var y = sum_all(softmax(matmul(x, tape.constant(w)), 1));
    Var z = sum_all(mul(softmax(matmul(x, tape.constant(w)), 1), tape.constant(random_tensor({4, 3}, rng))));
    (void)y;
    tape.backward(z);
    return tape.grad(x);
  };
  std::mt19937_64 saved = rng;
  const Tensor g1 = run();
  rng = saved;
  const Tensor g2 = run();
  CHECK(g1 == g2);
}
