#include "retlab/lagrangian.hpp"

#include <algorithm>
#include <cmath>

namespace retlab::lagr {

void BudgetConfig::validate() const {
  if (mode == Mode::ratio && (value <= 0.0 || value > 1.0)) {
    throw ad::ContractError("budget: ratio must lie in (0, 1]");
  }
  if (mode == Mode::absolute && value <= 0.0) {
    throw ad::ContractError("budget: absolute budget must be positive");
  }
  if (eta <= 0.0) throw ad::ContractError("budget: eta must be positive");
  if (lambda_init < 0.0) {
    throw ad::ContractError("budget: lambda_init must be nonnegative");
  }
}

double BudgetConfig::resolve(std::size_t t_len) const {
  const double t = static_cast<double>(t_len);
  if (mode == Mode::ratio) return value * t;
  return std::min(value, t);
}

ad::Tensor lagrangian_loss(ad::Tape& tape, const ad::Tensor& task_loss,
                           const ad::Tensor& p, double lambda, double budget) {
  if (lambda < 0.0) {
    throw ad::ContractError("lagrangian_loss: lambda must be nonnegative");
  }
  const ad::Tensor violation = tape.add_const(tape.sum(p), -budget);
  return tape.add(task_loss, tape.scale(violation, lambda));
}

double lagrangian_value(double task_loss, double sum_p, double lambda,
                        double budget) {
  if (lambda < 0.0) {
    throw ad::ContractError("lagrangian_value: lambda must be nonnegative");
  }
  return task_loss + lambda * (sum_p - budget);
}

void ascend_lambda(LagrangeState& state, double sum_p, double budget, double eta,
                   std::size_t step) {
  if (eta <= 0.0) throw ad::ContractError("ascend_lambda: eta must be positive");
  const double violation = sum_p - budget;
  state.lambda = std::max(0.0, state.lambda + eta * violation);
  state.violation_history.emplace_back(step, violation);
}

void StepSchedules::validate() const {
  auto in_range = [](double e) { return e > 0.5 && e <= 1.0; };
  if (!in_range(theta_exponent) || !in_range(p_exponent) ||
      !in_range(lambda_exponent)) {
    throw ad::ContractError("schedules: exponents must lie in (0.5, 1]");
  }
  if (!(theta_exponent < p_exponent && p_exponent < lambda_exponent)) {
    throw ad::ContractError(
        "schedules: exponents must be strictly ordered theta < p < lambda");
  }
  if (theta_scale <= 0.0 || p_scale <= 0.0 || lambda_scale <= 0.0) {
    throw ad::ContractError("schedules: scales must be positive");
  }
}

StepSizes schedule_steps(const StepSchedules& schedules, std::size_t k) {
  if (k < 1) throw ad::ContractError("schedule_steps: iteration starts at 1");
  const double kd = static_cast<double>(k);
  return StepSizes{schedules.theta_scale * std::pow(kd, -schedules.theta_exponent),
                   schedules.p_scale * std::pow(kd, -schedules.p_exponent),
                   schedules.lambda_scale * std::pow(kd, -schedules.lambda_exponent)};
}

CertificateReport budget_certificates(double trained_lagrangian_value,
                                      double trained_task_loss,
                                      double feasible_reference_loss,
                                      double reference_sum_p,
                                      double reference_budget, double lambda,
                                      double slack_delta, double tol) {
  if (lambda <= 0.0) {
    throw ad::ContractError("budget_certificates: lambda must be positive");
  }
  if (reference_sum_p > reference_budget + 1e-12) {
    throw ad::ContractError(
        "budget_certificates: reference point is infeasible (sum_p = " +
        std::to_string(reference_sum_p) + " > budget = " +
        std::to_string(reference_budget) + ")");
  }

  CertificateReport report;
  report.lambda = lambda;
  report.slack = slack_delta;
  report.trained_task_loss = trained_task_loss;
  report.trained_lagrangian = trained_lagrangian_value;
  report.feasible_reference_loss = feasible_reference_loss;
  report.slack_bound = (feasible_reference_loss - trained_task_loss) / lambda;
  report.empirical_gap = feasible_reference_loss - trained_lagrangian_value;

  auto add_check = [&](const std::string& name, double lhs, double rhs) {
    CertificateCheck check;
    check.name = name;
    check.lhs = lhs;
    check.rhs = rhs;
    check.margin = rhs - lhs;
    check.pass = lhs <= rhs;
    report.checks.push_back(check);
  };

  // (a) L + lambda * Delta <= F_hat + tol
  add_check("lagrangian_below_feasible_reference",
            trained_task_loss + lambda * slack_delta,
            feasible_reference_loss + tol);
  // (b) Delta <= (F_hat - L) / lambda + tol
  add_check("slack_bound", slack_delta, report.slack_bound + tol);
  // (c) gap >= lambda * Delta - tol
  add_check("duality_gap_bounds_slackness", lambda * slack_delta - tol,
            report.empirical_gap);

  report.all_pass = true;
  for (const CertificateCheck& check : report.checks) {
    report.all_pass = report.all_pass && check.pass;
  }
  return report;
}

}  // namespace retlab::lagr
