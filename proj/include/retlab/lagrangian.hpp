#pragma once

#include <cstddef>
#include <string>
#include <vector>

#include "retlab/tensor.hpp"

// Budgeted-objective machinery: the Lagrangian penalty term, projected dual
// ascent on the multiplier, Robbins-Monro step schedules for the two-timescale
// verification mode, and the slackness / duality-gap certificates.

namespace retlab::lagr {

struct BudgetConfig {
  enum class Mode { absolute, ratio };
  Mode mode = Mode::ratio;
  double value = 0.5;        // M when absolute, rho when ratio
  double eta = 2e-4;         // dual step size (desk-scale default)
  double lambda_init = 0.0;

  void validate() const;
  bool operator==(const BudgetConfig&) const = default;
  // Resolve the budget for a sequence of length t_len.
  double resolve(std::size_t t_len) const;
};

struct LagrangeState {
  double lambda = 0.0;
  // (step, sum_p - M) per dual update
  std::vector<std::pair<std::size_t, double>> violation_history;
};

// task_loss + lambda * (sum(p) - budget); lambda enters as a constant.
ad::Tensor lagrangian_loss(ad::Tape& tape, const ad::Tensor& task_loss,
                           const ad::Tensor& p, double lambda, double budget);

// Plain-number variant for callers that already hold sum(p).
double lagrangian_value(double task_loss, double sum_p, double lambda,
                        double budget);

// lambda <- max(0, lambda + eta * (sum_p - M)); appends to history.
void ascend_lambda(LagrangeState& state, double sum_p, double budget,
                   double eta, std::size_t step);

struct StepSchedules {
  double theta_exponent = 0.6;
  double p_exponent = 0.75;
  double lambda_exponent = 0.9;
  double theta_scale = 1.0;
  double p_scale = 1.0;
  double lambda_scale = 1.0;

  void validate() const;
};

struct StepSizes {
  double alpha;  // theta step
  double beta;   // p step
  double gamma;  // lambda step
};

StepSizes schedule_steps(const StepSchedules& schedules, std::size_t k);

struct CertificateCheck {
  std::string name;
  bool pass = false;
  double lhs = 0.0;
  double rhs = 0.0;
  double margin = 0.0;  // rhs - lhs (nonnegative when the check passes)
};

struct CertificateReport {
  double lambda = 0.0;
  double slack = 0.0;               // Delta = sum_p - M at the trained point
  double trained_task_loss = 0.0;   // L
  double trained_lagrangian = 0.0;
  double feasible_reference_loss = 0.0;  // F_hat, upper bound on F*
  double slack_bound = 0.0;              // (F_hat - L) / lambda
  double empirical_gap = 0.0;            // F_hat - trained_lagrangian
  std::vector<CertificateCheck> checks;
  bool all_pass = false;
};

// Slackness and duality-gap certificates:
//   (a) L + lambda * Delta <= F_hat + tol
//   (b) Delta <= (F_hat - L) / lambda + tol
//   (c) gap = F_hat - trained_lagrangian >= lambda * Delta - tol
// The feasible reference must satisfy its budget; reference_sum_p is checked
// against reference_budget and an infeasible reference is rejected.
CertificateReport budget_certificates(double trained_lagrangian_value,
                                      double trained_task_loss,
                                      double feasible_reference_loss,
                                      double reference_sum_p,
                                      double reference_budget, double lambda,
                                      double slack_delta, double tol = 1e-3);

}  // namespace retlab::lagr
