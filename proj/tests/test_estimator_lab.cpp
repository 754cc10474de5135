#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <vector>

#include "retlab/estimator_lab.hpp"
#include "retlab/rng.hpp"

using namespace retlab;

namespace {

double logit(double p) { return std::log(p / (1.0 - p)); }

}  // namespace

TEST_CASE("brute force expectation: linearity") {
  lab::ToyProblem toy = lab::make_linear_toy({1.0, 1.0}, {logit(0.5), logit(0.25)});
  const lab::BruteForceResult result = lab::brute_force_expected_loss(toy);
  CHECK(result.expectation == doctest::Approx(0.75).epsilon(1e-12));
  CHECK(result.grad_p[0] == doctest::Approx(1.0).epsilon(1e-10));
  CHECK(result.grad_p[1] == doctest::Approx(1.0).epsilon(1e-10));
}

TEST_CASE("brute force expectation: two-point case at T=1") {
  lab::ToyProblem toy = lab::make_quadratic_toy({2.0}, 1, {0.5}, {logit(0.3)});
  const lab::BruteForceResult result = lab::brute_force_expected_loss(toy);
  // p L(keep) + (1-p) L(drop): 0.3 (2-0.5)^2 + 0.7 (0.5)^2
  CHECK(result.expectation ==
        doctest::Approx(0.3 * 2.25 + 0.7 * 0.25).epsilon(1e-12));
}

TEST_CASE("brute force matches hard-Bernoulli Monte Carlo on a quadratic") {
  const lab::ToyProblem toy = lab::make_quadratic_toy(
      {0.6, -0.3, 0.2,  //
       -0.1, 0.8, 0.4},
      2, {0.3, -0.2}, {0.2, -0.5, 0.7});
  const lab::BruteForceResult exact = lab::brute_force_expected_loss(toy);

  const std::size_t n = 1000000;
  rng::Stream stream(88);
  double mean = 0.0, m2 = 0.0;
  std::vector<double> z(toy.t_len);
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t t = 0; t < toy.t_len; ++t) {
      z[t] = stream.next_unit_open() < toy.p[t] ? 1.0 : 0.0;
    }
    const double value = toy.loss(z);
    const double delta = value - mean;
    mean += delta / static_cast<double>(i + 1);
    m2 += delta * (value - mean);
  }
  const double se = std::sqrt(m2 / static_cast<double>(n - 1) /
                              static_cast<double>(n));
  CHECK(std::abs(mean - exact.expectation) < 4.0 * se);
}

TEST_CASE("brute force gradient matches finite differences of the enumeration") {
  lab::ToyProblem toy = lab::make_quadratic_toy(
      {0.5, -0.2, 0.9, 0.3}, 2, {0.4, -0.1}, {0.3, -0.6});
  const lab::BruteForceResult base = lab::brute_force_expected_loss(toy);
  const double h = 1e-7;
  for (std::size_t t = 0; t < toy.t_len; ++t) {
    lab::ToyProblem plus = toy;
    plus.p[t] += h;
    lab::ToyProblem minus = toy;
    minus.p[t] -= h;
    const double numeric = (lab::brute_force_expected_loss(plus).expectation -
                            lab::brute_force_expected_loss(minus).expectation) /
                           (2.0 * h);
    CHECK(std::abs(base.grad_p[t] - numeric) /
              std::max(1.0, std::abs(base.grad_p[t])) <
          1e-6);
  }
}

TEST_CASE("enumeration cap is enforced") {
  std::vector<double> coeff(13, 1.0), s(13, 0.0);
  lab::ToyProblem toy = lab::make_linear_toy(coeff, s);
  CHECK_THROWS_AS(lab::brute_force_expected_loss(toy), ad::ContractError);
}

TEST_CASE("single-sample pathwise gradient at u = 0.5 has the closed form") {
  const gate::HardConcreteParams hc;
  const double s = 0.4, c = 1.7;
  // chain rule: c * sigma'(s/beta) * (zeta - gamma) / beta when unclamped
  const double sig = 1.0 / (1.0 + std::exp(-s / hc.beta));
  const double expected =
      c * sig * (1.0 - sig) * (hc.stretch_high - hc.stretch_low) / hc.beta;
  const double got = c * gate::hard_concrete_dvalue_ds(s, 0.5, hc);
  CHECK(got == doctest::Approx(expected).epsilon(1e-12));
}

TEST_CASE("constant loss has exactly zero pathwise gradient") {
  lab::ToyProblem toy = lab::make_linear_toy({1.0, 2.0}, {0.1, -0.3});
  toy.kind = lab::ToyProblem::LossKind::constant;
  for (std::size_t b : {1, 7, 100}) {
    const lab::McGradient g = lab::mc_gradient_estimate(toy, b, 5);
    for (double v : g.mean) CHECK(v == 0.0);
  }
}

TEST_CASE("mc gradient is deterministic given seed and B") {
  const lab::ToyProblem toy = lab::make_linear_toy({1.0, -2.0}, {0.5, -0.2});
  const lab::McGradient a = lab::mc_gradient_estimate(toy, 500, 77);
  const lab::McGradient b = lab::mc_gradient_estimate(toy, 500, 77);
  CHECK(a.mean == b.mean);
  const lab::McGradient c = lab::mc_gradient_estimate(toy, 500, 78);
  CHECK(a.mean != c.mean);
}

TEST_CASE("pathwise estimator agrees with quadrature (unbiasedness, T<=3)") {
  {
    const lab::ToyProblem toy = lab::make_linear_toy({1.5}, {0.3});
    const lab::UnbiasednessReport report = lab::unbiasedness_check(toy, 100000, 3);
    CHECK(report.pass);
    CHECK(report.max_abs_z < 4.0);
  }
  {
    const lab::ToyProblem toy = lab::make_quadratic_toy(
        {0.8, -0.4, 0.3,  //
         0.2, 0.9, -0.7},
        2, {0.5, -0.3}, {0.4, -0.1, 0.6});
    const lab::UnbiasednessReport report = lab::unbiasedness_check(toy, 100000, 5);
    CHECK(report.pass);
  }
}

TEST_CASE("mean pathwise gradient approaches a high-B reference") {
  const lab::ToyProblem toy = lab::make_linear_toy({1.0, -2.0}, {0.5, -0.2});
  const lab::McGradient estimate = lab::mc_gradient_estimate(toy, 100000, 11);
  const std::vector<double> reference = lab::relaxed_gradient_quadrature(toy, 100000);
  for (std::size_t t = 0; t < toy.t_len; ++t) {
    CHECK(std::abs(estimate.mean[t] - reference[t]) < 4.0 * estimate.std_error[t]);
  }
}

TEST_CASE("variance scales as 1/B") {
  const lab::ToyProblem toy = lab::make_linear_toy({1.0, -2.0}, {0.5, -0.2});
  const lab::VarianceCurve curve =
      lab::variance_curve(toy, {8, 64, 512}, 120, 13);
  CHECK_FALSE(curve.degenerate);
  CHECK(curve.slope > -1.3);
  CHECK(curve.slope < -0.7);

  // doubling B roughly halves the variance
  const lab::VarianceCurve doubling =
      lab::variance_curve(toy, {256, 512, 1024}, 200, 17);
  const double r1 = doubling.variances[1] / doubling.variances[0];
  const double r2 = doubling.variances[2] / doubling.variances[1];
  CHECK(r1 > 0.3);
  CHECK(r1 < 0.8);
  CHECK(r2 > 0.3);
  CHECK(r2 < 0.8);
}

TEST_CASE("degenerate variance curve is reported, not fit") {
  lab::ToyProblem toy = lab::make_linear_toy({1.0}, {0.0});
  toy.kind = lab::ToyProblem::LossKind::constant;
  const lab::VarianceCurve curve = lab::variance_curve(toy, {8, 64, 512}, 10, 3);
  CHECK(curve.degenerate);
}

TEST_CASE("KKT solution of the binding instance") {
  const lab::ConvexToyInstance instance = lab::default_binding_instance();
  const lab::KktSolution sol = lab::solve_kkt(instance);

  double sum_p = 0.0, sum_q = 0.0;
  for (double v : sol.p_star) sum_p += v;
  for (double v : instance.q) sum_q += v;
  CHECK(sum_p == doctest::Approx(instance.budget).epsilon(1e-9));

  // equal unit weights and interior solution: p* = q - (sum q - M)/T
  const double delta =
      (sum_q - instance.budget) / static_cast<double>(instance.q.size());
  for (std::size_t t = 0; t < instance.q.size(); ++t) {
    CHECK(sol.p_star[t] == doctest::Approx(instance.q[t] - delta).epsilon(1e-9));
  }
  CHECK(sol.lambda_star == doctest::Approx(2.0 * delta).epsilon(1e-9));

  // theta* solves the normal equations: A^T (A theta - b) = 0
  const std::size_t n = instance.theta_dim, m = instance.b.size();
  for (std::size_t j = 0; j < n; ++j) {
    double g = 0.0;
    for (std::size_t i = 0; i < m; ++i) {
      double r = -instance.b[i];
      for (std::size_t k = 0; k < n; ++k) {
        r += instance.a[i * n + k] * sol.theta_star[k];
      }
      g += instance.a[i * n + j] * r;
    }
    CHECK(std::abs(g) < 1e-9);
  }
}

TEST_CASE("two-timescale convergence on the binding instance") {
  lagr::StepSchedules schedules;
  schedules.theta_scale = 0.3;
  schedules.p_scale = 0.3;
  schedules.lambda_scale = 0.5;
  const lab::ConvexToyInstance instance = lab::default_binding_instance();
  const lab::ConvergenceReport report =
      lab::convergence_experiment(instance, schedules, 100000, 99);

  CHECK_FALSE(report.diverged);
  CHECK(std::abs(report.final_violation) < 0.05);
  CHECK(report.distance_to_optimum < 0.05);
  CHECK(report.lambda_stabilized);
  CHECK(report.lambda_final > 0.0);
}

TEST_CASE("unconstrained instance keeps lambda at zero") {
  lagr::StepSchedules schedules;
  schedules.theta_scale = 0.3;
  schedules.p_scale = 0.3;
  schedules.lambda_scale = 0.5;
  const lab::ConvexToyInstance instance = lab::default_slack_instance();
  const lab::ConvergenceReport report =
      lab::convergence_experiment(instance, schedules, 50000, 101);
  CHECK(report.lambda_final == 0.0);
  CHECK(report.distance_to_optimum < 0.05);
}

TEST_CASE("certificate chain on the converged toy run") {
  lagr::StepSchedules schedules;
  schedules.theta_scale = 0.3;
  schedules.p_scale = 0.3;
  schedules.lambda_scale = 0.5;
  const lab::ConvexToyInstance instance = lab::default_binding_instance();
  const lab::ConvergenceReport run =
      lab::convergence_experiment(instance, schedules, 100000, 99);
  const lab::KktSolution sol = lab::solve_kkt(instance);

  double ref_sum_p = 0.0;
  for (double v : sol.p_star) ref_sum_p += v;
  const lagr::CertificateReport report = lagr::budget_certificates(
      run.trained_lagrangian, run.trained_task_loss, sol.objective, ref_sum_p,
      instance.budget, run.lambda_final, run.final_violation, 1e-3);
  for (const lagr::CertificateCheck& check : report.checks) {
    INFO(check.name, " lhs=", check.lhs, " rhs=", check.rhs);
    CHECK(check.pass);
  }
}
