#pragma once

#include <cstddef>
#include <cstdint>
#include <vector>

#include "retlab/gate.hpp"
#include "retlab/lagrangian.hpp"

// Statistical verification of the gate estimators: exact enumeration of the
// Bernoulli expectation, quadrature of the relaxed objective, Monte-Carlo
// pathwise and score-function estimators, variance scaling, and the
// two-timescale alternating scheme on a convex toy problem with a closed-form
// constrained optimum.

namespace retlab::lab {

struct ToyProblem {
  enum class LossKind { linear, quadratic, constant };
  LossKind kind = LossKind::linear;
  std::size_t t_len = 2;
  // linear: loss(z) = sum_t coeff[t] * z_t
  std::vector<double> coeff;
  // quadratic: loss(z) = || mix * z - target ||^2, mix is out_dim x t_len
  // (row-major). This is the || A (H . z) x - y ||^2 family with the constant
  // factors folded into mix.
  std::vector<double> mix;
  std::vector<double> target;
  std::size_t out_dim = 0;
  // gate parameters: probabilities for hard-Bernoulli estimators, logits for
  // the relaxed path (p = sigmoid(s) when both are used together)
  std::vector<double> p;
  std::vector<double> s;
  gate::HardConcreteParams hc;

  double loss(const std::vector<double>& z) const;
  std::vector<double> loss_grad_gates(const std::vector<double>& z) const;
  void validate() const;
};

ToyProblem make_linear_toy(std::vector<double> coeff, std::vector<double> s,
                           const gate::HardConcreteParams& hc = {});
ToyProblem make_quadratic_toy(std::vector<double> mix, std::size_t out_dim,
                              std::vector<double> target, std::vector<double> s,
                              const gate::HardConcreteParams& hc = {});

// Enumeration cap: 2^12 = 4096 masks keeps the oracle sub-second.
constexpr std::size_t kMaxEnumTokens = 12;

struct BruteForceResult {
  double expectation = 0.0;
  std::vector<double> grad_p;
};

// Exact E_{z~Bernoulli(p)}[loss(z)] by enumerating all 2^T hard masks, with
// the analytic gradient w.r.t. p from differentiating the mask weights.
BruteForceResult brute_force_expected_loss(const ToyProblem& problem);

struct McGradient {
  std::vector<double> mean;
  std::vector<double> std_error;
  std::size_t samples = 0;
};

// Pathwise (reparameterization) estimator: mean over B draws of
// d loss(z~(u)) / d s. Deterministic given (seed, B).
McGradient mc_gradient_estimate(const ToyProblem& problem, std::size_t samples,
                                std::uint64_t seed);

// Score-function (REINFORCE) estimator on hard Bernoulli samples, gradient
// w.r.t. p; the sanity control arm against brute force.
McGradient score_function_estimate(const ToyProblem& problem, std::size_t samples,
                                   std::uint64_t seed);

// Exact gradient of the relaxed objective E_u[loss(z~(u))] w.r.t. s via
// per-token 1-D midpoint quadrature (the toy losses are at most quadratic in
// independent gates, so the expectation factorizes). T <= 3 per the suite
// contract.
std::vector<double> relaxed_gradient_quadrature(const ToyProblem& problem,
                                                std::size_t grid_points);

struct UnbiasednessReport {
  std::vector<double> mc_mean;
  std::vector<double> reference;
  std::vector<double> z_scores;
  double max_abs_z = 0.0;
  bool pass = false;
};

// Compares the pathwise estimator mean against the exact relaxed-objective
// gradient (quadrature for T <= 3, a 100x larger Monte-Carlo reference
// otherwise). The check targets the relaxed objective: the stretched-and-
// clamped gate is not Bernoulli(p), so Bernoulli-law unbiasedness is not
// asserted.
UnbiasednessReport unbiasedness_check(const ToyProblem& problem,
                                      std::size_t samples, std::uint64_t seed,
                                      double z_threshold = 4.0);

struct VarianceCurve {
  std::vector<std::size_t> sample_counts;
  std::vector<double> variances;  // trace of the covariance of the B-mean
  double slope = 0.0;             // log-log least-squares fit
  bool degenerate = false;        // all variances zero (constant loss)
};

VarianceCurve variance_curve(const ToyProblem& problem,
                             const std::vector<std::size_t>& sample_counts,
                             std::size_t repeats, std::uint64_t seed);

// Convex instance for the alternating-scheme experiment:
//   minimize 0.5 ||A theta - b||^2 + sum_t w_t (p_t - q_t)^2
//   subject to sum_t p_t <= budget, p in [0,1]^T.
struct ConvexToyInstance {
  std::vector<double> a;  // m x n row-major
  std::vector<double> b;  // m
  std::size_t theta_dim = 0;
  std::vector<double> q;
  std::vector<double> w;
  double budget = 0.0;
  double noise_std = 0.0;

  std::size_t t_len() const { return q.size(); }
  double objective(const std::vector<double>& theta,
                   const std::vector<double>& p) const;
  void validate() const;
};

ConvexToyInstance default_binding_instance();
ConvexToyInstance default_slack_instance();  // budget = T, constraint inactive

struct KktSolution {
  std::vector<double> theta_star;
  std::vector<double> p_star;
  double lambda_star = 0.0;
  double objective = 0.0;
};

// Closed-form constrained optimum: theta from the normal equations, p from
// the KKT water-filling p_t = clip(q_t - lambda/(2 w_t), 0, 1) with lambda
// chosen by bisection so the budget binds (lambda = 0 if it is slack).
KktSolution solve_kkt(const ConvexToyInstance& instance);

struct ConvergenceReport {
  std::vector<double> theta_final;
  std::vector<double> p_final;
  double lambda_final = 0.0;
  double final_violation = 0.0;      // sum_p - budget
  double distance_to_optimum = 0.0;  // euclidean over (theta, p)
  double lambda_quartile_range = 0.0;
  double lambda_quartile_mean = 0.0;
  bool lambda_stabilized = false;
  bool diverged = false;
  double trained_task_loss = 0.0;
  double trained_lagrangian = 0.0;
  double sum_p_final = 0.0;
  std::vector<double> lambda_trace;  // subsampled trajectory
};

ConvergenceReport convergence_experiment(const ConvexToyInstance& instance,
                                         const lagr::StepSchedules& schedules,
                                         std::size_t iterations,
                                         std::uint64_t seed);

}  // namespace retlab::lab
