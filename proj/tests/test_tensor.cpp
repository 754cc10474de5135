#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <vector>

#include "retlab/rng.hpp"
#include "retlab/tensor.hpp"

using namespace retlab;
using ad::Tape;
using ad::Tensor;

namespace {

Tensor random_tensor(std::vector<std::size_t> shape, std::uint64_t seed,
                     double lo = -1.0, double hi = 1.0, bool requires_grad = false) {
  std::size_t n = 1;
  for (std::size_t d : shape) n *= d;
  rng::Stream stream(seed);
  std::vector<double> data(n);
  for (double& v : data) v = stream.next_uniform(lo, hi);
  return Tensor::from_data(std::move(shape), std::move(data), requires_grad);
}

}  // namespace

TEST_CASE("activation values at reference points") {
  Tape tape;
  const Tensor x = Tensor::from_data({3}, {0.0, 0.0, -0.0989});
  CHECK(tape.activation(x, ad::Activation::sigmoid).at(0) == 0.5);
  CHECK(tape.activation(x, ad::Activation::tanh_fn).at(1) == 0.0);
  CHECK(tape.activation(x, ad::Activation::clamp_unit).at(2) == 0.0);
}

TEST_CASE("backward: elementwise square") {
  Tape tape;
  const Tensor x = Tensor::from_data({3}, {1.0, 2.0, 3.0}, true);
  const Tensor loss = tape.sum(tape.mul(x, x));
  tape.backward(loss);
  CHECK(x.grad() == std::vector<double>({2.0, 4.0, 6.0}));
}

TEST_CASE("backward: sigmoid slope at origin") {
  Tape tape;
  const Tensor x = Tensor::scalar_value(0.0, true);
  const Tensor loss = tape.activation(x, ad::Activation::sigmoid);
  tape.backward(loss);
  CHECK(x.grad()[0] == doctest::Approx(0.25).epsilon(1e-15));
}

TEST_CASE("backward: matmul grads match finite differences") {
  const Tensor a = random_tensor({3, 3}, 11);
  const Tensor b = random_tensor({3, 3}, 13);
  const double err_a = ad::grad_check(
      [&b](Tape& tape, const Tensor& v) { return tape.sum(tape.matmul(v, b)); }, a,
      1e-5);
  CHECK(err_a < 1e-6);
  const double err_b = ad::grad_check(
      [&a](Tape& tape, const Tensor& v) { return tape.sum(tape.matmul(a, v)); }, b,
      1e-5);
  CHECK(err_b < 1e-6);
}

TEST_CASE("grad_check reference cases") {
  const Tensor x = random_tensor({8}, 17);
  const double tanh_err = ad::grad_check(
      [](Tape& tape, const Tensor& v) {
        return tape.sum(tape.activation(v, ad::Activation::tanh_fn));
      },
      x, 1e-5);
  CHECK(tanh_err < 1e-6);

  const double const_err = ad::grad_check(
      [](Tape& tape, const Tensor& v) {
        return tape.sum(tape.scale(v, 0.0));
      },
      x, 1e-5);
  CHECK(const_err == 0.0);

  const Tensor inside = random_tensor({8}, 19, 0.05, 0.95);
  const double clamp_err = ad::grad_check(
      [](Tape& tape, const Tensor& v) {
        return tape.sum(tape.activation(v, ad::Activation::clamp_unit));
      },
      inside, 1e-5);
  CHECK(clamp_err < 1e-6);
}

TEST_CASE("primitive gradients vs finite differences") {
  const Tensor x = random_tensor({4, 6}, 23, -1.5, 1.5);
  const Tensor gain = random_tensor({6}, 29, 0.5, 1.5);
  const Tensor bias = random_tensor({6}, 31, -0.3, 0.3);

  CHECK(ad::grad_check(
            [&](Tape& tape, const Tensor& v) {
              return tape.sum(tape.softmax_rows(v));
            },
            x, 1e-5) < 1e-4);
  CHECK(ad::grad_check(
            [&](Tape& tape, const Tensor& v) {
              return tape.sum(tape.layer_norm_rows(v, gain, bias));
            },
            x, 1e-5) < 1e-4);
  CHECK(ad::grad_check(
            [&](Tape& tape, const Tensor& v) {
              return tape.sum(tape.activation(v, ad::Activation::gelu));
            },
            x, 1e-5) < 1e-4);
  CHECK(ad::grad_check(
            [&](Tape& tape, const Tensor& v) {
              const Tensor z = random_tensor({4}, 37, 0.1, 0.9);
              return tape.sum(tape.row_scale(v, z));
            },
            x, 1e-5) < 1e-4);
  CHECK(ad::grad_check(
            [&](Tape& tape, const Tensor& v) {
              return tape.sum(tape.transpose(tape.slice_cols(v, 1, 3)));
            },
            x, 1e-5) < 1e-6);
  CHECK(ad::grad_check(
            [&](Tape& tape, const Tensor& v) {
              const Tensor s = tape.add_const(tape.sum(v), 20.0);
              return tape.div_by_scalar(tape.sum(tape.mul(v, v)), s);
            },
            x, 1e-5) < 1e-4);
}

TEST_CASE("cross entropy gradient and value") {
  Tape tape;
  const Tensor logits = Tensor::from_data({1, 3}, {0.2, -0.1, 0.5}, true);
  const Tensor loss = tape.cross_entropy_mean(logits, {2});
  // manual log-softmax
  const double lse =
      std::log(std::exp(0.2) + std::exp(-0.1) + std::exp(0.5));
  CHECK(loss.value() == doctest::Approx(lse - 0.5).epsilon(1e-12));

  const double err = ad::grad_check(
      [](Tape& tp, const Tensor& v) { return tp.cross_entropy_mean(v, {2}); },
      Tensor::from_data({1, 3}, {0.2, -0.1, 0.5}), 1e-6);
  CHECK(err < 1e-4);
}

TEST_CASE("backward is deterministic and accumulates across calls") {
  auto run = [](int) {
    Tape tape;
    const Tensor x = random_tensor({5}, 41, -1.0, 1.0, true);
    const Tensor loss =
        tape.sum(tape.mul(tape.activation(x, ad::Activation::tanh_fn), x));
    tape.backward(loss);
    return x.grad();
  };
  const std::vector<double> g1 = run(0);
  const std::vector<double> g2 = run(1);
  CHECK(g1 == g2);  // bit-identical

  Tape tape;
  const Tensor x = random_tensor({5}, 41, -1.0, 1.0, true);
  const Tensor loss =
      tape.sum(tape.mul(tape.activation(x, ad::Activation::tanh_fn), x));
  tape.backward(loss);
  tape.backward(loss);
  for (std::size_t i = 0; i < 5; ++i) {
    CHECK(x.grad()[i] == doctest::Approx(2.0 * g1[i]).epsilon(1e-15));
  }
}

TEST_CASE("contract and shape errors") {
  Tape tape;
  const Tensor a = Tensor::from_data({2, 3}, std::vector<double>(6, 1.0));
  const Tensor b = Tensor::from_data({2, 2}, std::vector<double>(4, 1.0));
  CHECK_THROWS_AS(tape.matmul(a, b), ad::ShapeError);
  CHECK_THROWS_WITH_AS(tape.matmul(a, b),
                       "matmul: inner dimensions differ, [2x3] vs [2x2]",
                       ad::ShapeError);
  CHECK_THROWS_AS(tape.backward(a), ad::ContractError);
  CHECK_THROWS_AS(Tensor::from_data({2}, {1.0, 2.0, 3.0}), ad::ShapeError);
}

TEST_CASE("non-finite outputs are an error, never silent") {
  Tape tape;
  const Tensor a = Tensor::from_data({2}, {1e308, 1e308});
  CHECK_THROWS_AS(tape.add(a, a), ad::NumericError);
  const Tensor zero = Tensor::scalar_value(0.0);
  const Tensor x = Tensor::from_data({2}, {1.0, 2.0});
  CHECK_THROWS_AS(tape.div_by_scalar(x, zero), ad::NumericError);
  CHECK_THROWS_AS(Tensor::from_data({1}, {std::nan("")}), ad::NumericError);
}

TEST_CASE("tensor memory tracking reports peaks") {
  ad::reset_peak_tensor_bytes();
  const std::uint64_t base = ad::peak_tensor_bytes();
  {
    const Tensor big = Tensor::zeros({256, 256});
    CHECK(ad::peak_tensor_bytes() >= base + 256 * 256 * sizeof(double));
  }
  ad::reset_peak_tensor_bytes();
  CHECK(ad::peak_tensor_bytes() <= base + 256 * 256 * sizeof(double));
}
