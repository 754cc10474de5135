#include "retlab/verify.hpp"

#include <chrono>
#include <cmath>
#include <functional>

#include "retlab/encoder.hpp"
#include "retlab/estimator_lab.hpp"
#include "retlab/lagrangian.hpp"
#include "retlab/rng.hpp"

namespace retlab::verify {

using nlohmann::json;

namespace {

Check make_check(const std::string& name, double value, double threshold,
                 const std::string& comparison) {
  Check check;
  check.name = name;
  check.value = value;
  check.threshold = threshold;
  check.comparison = comparison;
  if (comparison == "<") {
    check.pass = value < threshold;
  } else if (comparison == "<=") {
    check.pass = value <= threshold;
  } else if (comparison == ">") {
    check.pass = value > threshold;
  } else if (comparison == ">=") {
    check.pass = value >= threshold;
  } else {
    check.pass = value == threshold;
  }
  return check;
}

void finish(SuiteReport& report,
            const std::chrono::steady_clock::time_point& start) {
  report.pass = true;
  for (const Check& check : report.checks) report.pass = report.pass && check.pass;
  report.seconds =
      std::chrono::duration<double>(std::chrono::steady_clock::now() - start)
          .count();
}

// Max relative gradient error over every encoder parameter for the full
// Lagrangian training loss, against central finite differences.
double end_to_end_gradient_error(std::uint64_t seed, double h, double lambda) {
  enc::EncoderConfig config;
  config.num_layers = 1;
  config.model_dim = 8;
  config.num_heads = 2;
  config.ff_dim = 16;
  config.vocab_size = 16;
  config.max_seq_len = 4;
  config.num_classes = 2;
  config.retention_mode = enc::RetentionMode::layer_wise;
  config.rho = 0.5;
  enc::Encoder encoder(config, seed);

  const std::vector<int> tokens = {3, 7, 11, 5};
  const int label = 1;
  const gate::HardConcreteParams hc;
  const double budget = 2.0;

  auto loss_value = [&](ad::Tape& tape) {
    const enc::TrainForward forward =
        encoder.forward_train(tape, tokens, label, hc, seed, 1, 0);
    return lagr::lagrangian_loss(tape, forward.task_loss, forward.p_layers[0],
                                 lambda, budget);
  };

  // analytic pass
  for (auto& [name, tensor] : encoder.parameters()) tensor.zero_grad();
  std::vector<std::vector<double>> analytic;
  {
    ad::Tape tape;
    const ad::Tensor loss = loss_value(tape);
    tape.backward(loss);
    for (auto& [name, tensor] : encoder.parameters()) {
      analytic.push_back(tensor.has_grad() ? tensor.grad()
                                           : std::vector<double>(tensor.size(), 0.0));
    }
  }

  double max_err = 0.0;
  std::size_t param_index = 0;
  for (auto& [name, tensor] : encoder.parameters()) {
    std::vector<double>& data = tensor.mutable_data();
    for (std::size_t i = 0; i < data.size(); ++i) {
      const double saved = data[i];
      data[i] = saved + h;
      ad::Tape tp(false);
      const double fp = loss_value(tp).value();
      data[i] = saved - h;
      ad::Tape tm(false);
      const double fm = loss_value(tm).value();
      data[i] = saved;
      const double numeric = (fp - fm) / (2.0 * h);
      const double a = analytic[param_index][i];
      max_err = std::max(max_err,
                         std::abs(a - numeric) / std::max(1.0, std::abs(a)));
    }
    ++param_index;
  }
  return max_err;
}

}  // namespace

SuiteReport run_gradients_suite(std::uint64_t seed) {
  const auto start = std::chrono::steady_clock::now();
  SuiteReport report;
  report.name = "gradients";

  rng::Stream stream(seed, 0x6ead);
  auto random_tensor = [&](std::vector<std::size_t> shape, double lo, double hi) {
    std::size_t n = 1;
    for (std::size_t d : shape) n *= d;
    std::vector<double> data(n);
    for (double& v : data) v = stream.next_uniform(lo, hi);
    return ad::Tensor::from_data(std::move(shape), std::move(data));
  };

  {
    const ad::Tensor x = random_tensor({8}, -1.0, 1.0);
    const double err = ad::grad_check(
        [](ad::Tape& tape, const ad::Tensor& v) {
          return tape.sum(tape.activation(v, ad::Activation::tanh_fn));
        },
        x, 1e-5);
    report.checks.push_back(make_check("tanh_sum", err, 1e-6, "<"));
  }
  {
    const ad::Tensor x = random_tensor({6}, -2.0, 2.0);
    const double err = ad::grad_check(
        [](ad::Tape& tape, const ad::Tensor& v) {
          return tape.sum(tape.activation(v, ad::Activation::sigmoid));
        },
        x, 1e-5);
    report.checks.push_back(make_check("sigmoid_sum", err, 1e-4, "<"));
  }
  {
    // clamp inactive region: all coordinates strictly inside (0, 1)
    const ad::Tensor x = random_tensor({8}, 0.05, 0.95);
    const double err = ad::grad_check(
        [](ad::Tape& tape, const ad::Tensor& v) {
          return tape.sum(tape.activation(v, ad::Activation::clamp_unit));
        },
        x, 1e-5);
    report.checks.push_back(make_check("clamp_unit_inactive", err, 1e-6, "<"));
  }
  {
    const ad::Tensor x = random_tensor({3, 4}, -1.0, 1.0);
    const ad::Tensor w = random_tensor({4, 3}, -1.0, 1.0);
    const double err = ad::grad_check(
        [&w](ad::Tape& tape, const ad::Tensor& v) {
          return tape.sum(tape.matmul(v, w));
        },
        x, 1e-5);
    report.checks.push_back(make_check("matmul_sum", err, 1e-4, "<"));
  }
  {
    const ad::Tensor x = random_tensor({4, 6}, -1.5, 1.5);
    const ad::Tensor g = random_tensor({6}, 0.5, 1.5);
    const ad::Tensor b = random_tensor({6}, -0.5, 0.5);
    const double err = ad::grad_check(
        [&](ad::Tape& tape, const ad::Tensor& v) {
          return tape.sum(tape.softmax_rows(tape.layer_norm_rows(v, g, b)));
        },
        x, 1e-5);
    report.checks.push_back(make_check("layernorm_softmax", err, 1e-4, "<"));
  }
  {
    const ad::Tensor x = random_tensor({10}, -2.0, 2.0);
    const double err = ad::grad_check(
        [](ad::Tape& tape, const ad::Tensor& v) {
          return tape.sum(tape.activation(v, ad::Activation::gelu));
        },
        x, 1e-5);
    report.checks.push_back(make_check("gelu_sum", err, 1e-4, "<"));
  }
  {
    // lagrangian gradient w.r.t. p is task gradient + lambda per coordinate
    const ad::Tensor p = random_tensor({5}, 0.1, 0.9);
    const double lambda = 0.7;
    const double err = ad::grad_check(
        [lambda](ad::Tape& tape, const ad::Tensor& v) {
          const ad::Tensor task = tape.sum(tape.mul(v, v));
          return lagr::lagrangian_loss(tape, task, v, lambda, 2.0);
        },
        p, 1e-6);
    report.checks.push_back(make_check("lagrangian_wrt_p", err, 1e-4, "<"));
  }
  {
    const double err = end_to_end_gradient_error(seed, 1e-5, 0.5);
    report.checks.push_back(make_check("end_to_end_lagrangian", err, 1e-3, "<"));
  }

  finish(report, start);
  return report;
}

SuiteReport run_unbiasedness_suite(std::uint64_t seed) {
  const auto start = std::chrono::steady_clock::now();
  SuiteReport report;
  report.name = "unbiasedness";
  const std::size_t samples = 100000;

  {
    const lab::ToyProblem toy = lab::make_linear_toy({1.5}, {0.3});
    const lab::UnbiasednessReport r = lab::unbiasedness_check(toy, samples, seed);
    report.checks.push_back(make_check("linear_t1_max_z", r.max_abs_z, 4.0, "<"));
  }
  {
    const lab::ToyProblem toy = lab::make_linear_toy({1.0, -2.0}, {0.5, -0.2});
    const lab::UnbiasednessReport r =
        lab::unbiasedness_check(toy, samples, rng::hash_key(seed, 2));
    report.checks.push_back(make_check("linear_t2_max_z", r.max_abs_z, 4.0, "<"));
  }
  {
    const lab::ToyProblem toy = lab::make_quadratic_toy(
        {0.8, -0.4, 0.3,  //
         0.2, 0.9, -0.7},
        2, {0.5, -0.3}, {0.4, -0.1, 0.6});
    const lab::UnbiasednessReport r =
        lab::unbiasedness_check(toy, samples, rng::hash_key(seed, 3));
    report.checks.push_back(make_check("quadratic_t3_max_z", r.max_abs_z, 4.0, "<"));
  }
  {
    lab::ToyProblem toy = lab::make_linear_toy({1.0, 1.0}, {0.2, -0.4});
    toy.kind = lab::ToyProblem::LossKind::constant;
    const lab::UnbiasednessReport r =
        lab::unbiasedness_check(toy, 1000, rng::hash_key(seed, 4));
    report.checks.push_back(
        make_check("constant_loss_max_z", r.max_abs_z, 0.0, "=="));
  }
  {
    // control arm: score-function estimator on hard Bernoulli vs enumeration
    const lab::ToyProblem toy = lab::make_linear_toy({1.2, -0.8}, {0.4, 0.1});
    const lab::BruteForceResult exact = lab::brute_force_expected_loss(toy);
    const lab::McGradient sf =
        lab::score_function_estimate(toy, 200000, rng::hash_key(seed, 5));
    double max_z = 0.0;
    for (std::size_t t = 0; t < toy.t_len; ++t) {
      const double z = sf.std_error[t] > 0.0
                           ? std::abs(sf.mean[t] - exact.grad_p[t]) / sf.std_error[t]
                           : 0.0;
      max_z = std::max(max_z, z);
    }
    report.checks.push_back(
        make_check("score_function_vs_brute_force_max_z", max_z, 4.0, "<"));
  }

  finish(report, start);
  return report;
}

SuiteReport run_variance_suite(std::uint64_t seed) {
  const auto start = std::chrono::steady_clock::now();
  SuiteReport report;
  report.name = "variance";
  const std::vector<std::size_t> sample_counts = {8, 64, 512, 4096};
  const std::size_t repeats = 200;

  {
    const lab::ToyProblem toy = lab::make_linear_toy({1.0, -2.0}, {0.5, -0.2});
    const lab::VarianceCurve curve =
        lab::variance_curve(toy, sample_counts, repeats, seed);
    report.checks.push_back(make_check("linear_slope_low", curve.slope, -1.15, ">"));
    report.checks.push_back(make_check("linear_slope_high", curve.slope, -0.85, "<"));
  }
  {
    const lab::ToyProblem toy = lab::make_quadratic_toy(
        {0.8, -0.4, 0.3,  //
         0.2, 0.9, -0.7},
        2, {0.5, -0.3}, {0.4, -0.1, 0.6});
    const lab::VarianceCurve curve =
        lab::variance_curve(toy, sample_counts, repeats, rng::hash_key(seed, 7));
    report.checks.push_back(
        make_check("quadratic_slope_low", curve.slope, -1.15, ">"));
    report.checks.push_back(
        make_check("quadratic_slope_high", curve.slope, -0.85, "<"));
  }
  {
    lab::ToyProblem toy = lab::make_linear_toy({1.0}, {0.0});
    toy.kind = lab::ToyProblem::LossKind::constant;
    const lab::VarianceCurve curve =
        lab::variance_curve(toy, sample_counts, 10, rng::hash_key(seed, 8));
    report.checks.push_back(make_check("constant_loss_degenerate",
                                       curve.degenerate ? 1.0 : 0.0, 1.0, "=="));
  }

  finish(report, start);
  return report;
}

SuiteReport run_convergence_suite(std::uint64_t seed) {
  const auto start = std::chrono::steady_clock::now();
  SuiteReport report;
  report.name = "convergence";

  lagr::StepSchedules schedules;
  schedules.theta_scale = 0.3;
  schedules.p_scale = 0.3;
  schedules.lambda_scale = 0.5;

  {
    const lab::ConvexToyInstance instance = lab::default_binding_instance();
    const lab::ConvergenceReport r =
        lab::convergence_experiment(instance, schedules, 100000, seed);
    report.checks.push_back(make_check("binding_final_violation",
                                       std::abs(r.final_violation), 0.05, "<"));
    report.checks.push_back(
        make_check("binding_distance", r.distance_to_optimum, 0.05, "<"));
    report.checks.push_back(make_check("binding_lambda_stabilized",
                                       r.lambda_stabilized ? 1.0 : 0.0, 1.0, "=="));
    report.checks.push_back(
        make_check("binding_diverged", r.diverged ? 1.0 : 0.0, 0.0, "=="));
  }
  {
    const lab::ConvexToyInstance instance = lab::default_slack_instance();
    const lab::ConvergenceReport r = lab::convergence_experiment(
        instance, schedules, 50000, rng::hash_key(seed, 11));
    report.checks.push_back(make_check("slack_lambda_zero", r.lambda_final, 0.0, "=="));
    report.checks.push_back(
        make_check("slack_distance", r.distance_to_optimum, 0.05, "<"));
  }

  finish(report, start);
  return report;
}

SuiteReport run_certificates_suite(std::uint64_t seed) {
  const auto start = std::chrono::steady_clock::now();
  SuiteReport report;
  report.name = "certificates";
  const double tol = 1e-3;

  lagr::StepSchedules schedules;
  schedules.theta_scale = 0.3;
  schedules.p_scale = 0.3;
  schedules.lambda_scale = 0.5;

  const lab::ConvexToyInstance instance = lab::default_binding_instance();
  const lab::ConvergenceReport run =
      lab::convergence_experiment(instance, schedules, 100000, seed);
  const lab::KktSolution sol = lab::solve_kkt(instance);
  double ref_sum_p = 0.0;
  for (double v : sol.p_star) ref_sum_p += v;

  const lagr::CertificateReport certs = lagr::budget_certificates(
      run.trained_lagrangian, run.trained_task_loss, sol.objective, ref_sum_p,
      instance.budget, run.lambda_final, run.final_violation, tol);
  for (const lagr::CertificateCheck& check : certs.checks) {
    report.checks.push_back(
        make_check("converged_" + check.name, check.lhs, check.rhs, "<="));
  }

  // Feasible trained point (slack instance, Delta < 0): all certificates
  // hold with nonnegative margins.
  {
    const lab::ConvexToyInstance slack = lab::default_slack_instance();
    const lab::ConvergenceReport run_slack = lab::convergence_experiment(
        slack, schedules, 50000, rng::hash_key(seed, 21));
    const lab::KktSolution sol_slack = lab::solve_kkt(slack);
    double ref_slack = 0.0;
    for (double v : sol_slack.p_star) ref_slack += v;
    const lagr::CertificateReport vac = lagr::budget_certificates(
        run_slack.trained_lagrangian, run_slack.trained_task_loss,
        sol_slack.objective, ref_slack, slack.budget,
        std::max(run_slack.lambda_final, 1e-6), run_slack.final_violation, tol);
    report.checks.push_back(make_check("feasible_slack_is_negative",
                                       run_slack.final_violation, 0.0, "<"));
    for (const lagr::CertificateCheck& check : vac.checks) {
      report.checks.push_back(
          make_check("feasible_" + check.name, check.lhs, check.rhs, "<="));
    }
  }

  finish(report, start);
  return report;
}

const std::vector<std::string>& suite_names() {
  static const std::vector<std::string> names = {
      "gradients", "unbiasedness", "variance", "convergence", "certificates"};
  return names;
}

SuiteReport run_suite(const std::string& name, std::uint64_t seed) {
  if (name == "gradients") return run_gradients_suite(seed);
  if (name == "unbiasedness") return run_unbiasedness_suite(seed);
  if (name == "variance") return run_variance_suite(seed);
  if (name == "convergence") return run_convergence_suite(seed);
  if (name == "certificates") return run_certificates_suite(seed);
  throw std::invalid_argument("verify: unknown suite \"" + name + "\"");
}

json report_to_json(const std::vector<SuiteReport>& suites) {
  json j;
  j["format_version"] = 1;
  bool all = true;
  json suite_array = json::array();
  for (const SuiteReport& suite : suites) {
    json s;
    s["name"] = suite.name;
    s["pass"] = suite.pass;
    s["seconds"] = suite.seconds;
    json checks = json::array();
    for (const Check& check : suite.checks) {
      json c;
      c["name"] = check.name;
      c["pass"] = check.pass;
      c["value"] = check.value;
      c["threshold"] = check.threshold;
      c["comparison"] = check.comparison;
      checks.push_back(c);
    }
    s["checks"] = checks;
    suite_array.push_back(s);
    all = all && suite.pass;
  }
  j["suites"] = suite_array;
  j["pass"] = all;
  return j;
}

bool validate_report_json(const json& report, std::string* error) {
  auto fail = [&](const std::string& message) {
    if (error != nullptr) *error = message;
    return false;
  };
  if (!report.is_object()) return fail("report must be an object");
  if (!report.contains("format_version") ||
      !report.at("format_version").is_number_integer()) {
    return fail("missing integer format_version");
  }
  if (!report.contains("pass") || !report.at("pass").is_boolean()) {
    return fail("missing boolean pass");
  }
  if (!report.contains("suites") || !report.at("suites").is_array()) {
    return fail("missing suites array");
  }
  for (const json& suite : report.at("suites")) {
    if (!suite.is_object()) return fail("suite entries must be objects");
    if (!suite.contains("name") || !suite.at("name").is_string()) {
      return fail("suite missing string name");
    }
    if (!suite.contains("pass") || !suite.at("pass").is_boolean()) {
      return fail("suite missing boolean pass");
    }
    if (!suite.contains("checks") || !suite.at("checks").is_array()) {
      return fail("suite missing checks array");
    }
    for (const json& check : suite.at("checks")) {
      if (!check.is_object() || !check.contains("name") ||
          !check.at("name").is_string() || !check.contains("pass") ||
          !check.at("pass").is_boolean() || !check.contains("value") ||
          !check.at("value").is_number() || !check.contains("threshold") ||
          !check.at("threshold").is_number()) {
        return fail("check entries need name/pass/value/threshold");
      }
    }
  }
  return true;
}

}  // namespace retlab::verify
