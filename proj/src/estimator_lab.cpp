#include "retlab/estimator_lab.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

#include "retlab/rng.hpp"

namespace retlab::lab {

namespace {

double stable_sigmoid(double x) {
  return x >= 0.0 ? 1.0 / (1.0 + std::exp(-x))
                  : std::exp(x) / (1.0 + std::exp(x));
}

}  // namespace

double ToyProblem::loss(const std::vector<double>& z) const {
  switch (kind) {
    case LossKind::constant:
      return 1.0;
    case LossKind::linear: {
      double total = 0.0;
      for (std::size_t t = 0; t < t_len; ++t) total += coeff[t] * z[t];
      return total;
    }
    case LossKind::quadratic: {
      double total = 0.0;
      for (std::size_t i = 0; i < out_dim; ++i) {
        double r = -target[i];
        for (std::size_t t = 0; t < t_len; ++t) r += mix[i * t_len + t] * z[t];
        total += r * r;
      }
      return total;
    }
  }
  return 0.0;
}

std::vector<double> ToyProblem::loss_grad_gates(const std::vector<double>& z) const {
  std::vector<double> grad(t_len, 0.0);
  switch (kind) {
    case LossKind::constant:
      break;
    case LossKind::linear:
      grad = coeff;
      break;
    case LossKind::quadratic:
      for (std::size_t i = 0; i < out_dim; ++i) {
        double r = -target[i];
        for (std::size_t t = 0; t < t_len; ++t) r += mix[i * t_len + t] * z[t];
        for (std::size_t t = 0; t < t_len; ++t) {
          grad[t] += 2.0 * r * mix[i * t_len + t];
        }
      }
      break;
  }
  return grad;
}

void ToyProblem::validate() const {
  if (t_len == 0) throw ad::ContractError("toy problem: empty gate vector");
  if (kind == LossKind::linear && coeff.size() != t_len) {
    throw ad::ContractError("toy problem: coeff size mismatch");
  }
  if (kind == LossKind::quadratic &&
      (mix.size() != out_dim * t_len || target.size() != out_dim)) {
    throw ad::ContractError("toy problem: mix/target size mismatch");
  }
  if (!s.empty() && s.size() != t_len) {
    throw ad::ContractError("toy problem: logit size mismatch");
  }
  if (!p.empty() && p.size() != t_len) {
    throw ad::ContractError("toy problem: probability size mismatch");
  }
}

ToyProblem make_linear_toy(std::vector<double> coeff, std::vector<double> s,
                           const gate::HardConcreteParams& hc) {
  ToyProblem problem;
  problem.kind = ToyProblem::LossKind::linear;
  problem.t_len = coeff.size();
  problem.coeff = std::move(coeff);
  problem.s = std::move(s);
  problem.hc = hc;
  problem.p.resize(problem.t_len);
  for (std::size_t t = 0; t < problem.t_len; ++t) {
    problem.p[t] = stable_sigmoid(problem.s[t]);
  }
  problem.validate();
  return problem;
}

ToyProblem make_quadratic_toy(std::vector<double> mix, std::size_t out_dim,
                              std::vector<double> target, std::vector<double> s,
                              const gate::HardConcreteParams& hc) {
  ToyProblem problem;
  problem.kind = ToyProblem::LossKind::quadratic;
  problem.out_dim = out_dim;
  problem.t_len = s.size();
  problem.mix = std::move(mix);
  problem.target = std::move(target);
  problem.s = std::move(s);
  problem.hc = hc;
  problem.p.resize(problem.t_len);
  for (std::size_t t = 0; t < problem.t_len; ++t) {
    problem.p[t] = stable_sigmoid(problem.s[t]);
  }
  problem.validate();
  return problem;
}

BruteForceResult brute_force_expected_loss(const ToyProblem& problem) {
  problem.validate();
  const std::size_t t_len = problem.t_len;
  if (t_len > kMaxEnumTokens) {
    throw ad::ContractError("brute_force_expected_loss: " + std::to_string(t_len) +
                            " tokens exceeds the enumeration cap of " +
                            std::to_string(kMaxEnumTokens));
  }
  if (problem.p.size() != t_len) {
    throw ad::ContractError("brute_force_expected_loss: probabilities required");
  }

  BruteForceResult result;
  result.grad_p.assign(t_len, 0.0);
  std::vector<double> z(t_len);
  const std::size_t masks = std::size_t{1} << t_len;
  for (std::size_t mask = 0; mask < masks; ++mask) {
    double weight = 1.0;
    for (std::size_t t = 0; t < t_len; ++t) {
      z[t] = (mask >> t) & 1U ? 1.0 : 0.0;
      weight *= z[t] > 0.5 ? problem.p[t] : 1.0 - problem.p[t];
    }
    const double value = problem.loss(z);
    result.expectation += weight * value;
    for (std::size_t t = 0; t < t_len; ++t) {
      // d weight / d p_t = weight * (z_t - p_t) / (p_t (1 - p_t))
      const double denom = problem.p[t] * (1.0 - problem.p[t]);
      result.grad_p[t] += value * weight * (z[t] - problem.p[t]) / denom;
    }
  }
  return result;
}

McGradient mc_gradient_estimate(const ToyProblem& problem, std::size_t samples,
                                std::uint64_t seed) {
  problem.validate();
  if (samples < 1) {
    throw ad::ContractError("mc_gradient_estimate: need at least one sample");
  }
  const std::size_t t_len = problem.t_len;
  std::vector<double> mean(t_len, 0.0);
  std::vector<double> m2(t_len, 0.0);
  std::vector<double> z(t_len), dz(t_len), sample_grad(t_len);
  for (std::size_t i = 0; i < samples; ++i) {
    for (std::size_t t = 0; t < t_len; ++t) {
      const double u = rng::uniform(seed, 0x9a7e, i, t);
      z[t] = gate::hard_concrete_value(problem.s[t], u, problem.hc);
      dz[t] = gate::hard_concrete_dvalue_ds(problem.s[t], u, problem.hc);
    }
    const std::vector<double> gz = problem.loss_grad_gates(z);
    for (std::size_t t = 0; t < t_len; ++t) {
      sample_grad[t] = gz[t] * dz[t];
      // Welford update
      const double delta = sample_grad[t] - mean[t];
      mean[t] += delta / static_cast<double>(i + 1);
      m2[t] += delta * (sample_grad[t] - mean[t]);
    }
  }
  McGradient out;
  out.mean = mean;
  out.samples = samples;
  out.std_error.assign(t_len, 0.0);
  if (samples > 1) {
    for (std::size_t t = 0; t < t_len; ++t) {
      out.std_error[t] = std::sqrt(m2[t] / static_cast<double>(samples - 1) /
                                   static_cast<double>(samples));
    }
  }
  return out;
}

McGradient score_function_estimate(const ToyProblem& problem, std::size_t samples,
                                   std::uint64_t seed) {
  problem.validate();
  const std::size_t t_len = problem.t_len;
  std::vector<double> mean(t_len, 0.0);
  std::vector<double> m2(t_len, 0.0);
  std::vector<double> z(t_len), sample_grad(t_len);
  for (std::size_t i = 0; i < samples; ++i) {
    for (std::size_t t = 0; t < t_len; ++t) {
      const double u = rng::uniform(seed, 0x5f5c, i, t);
      z[t] = u < problem.p[t] ? 1.0 : 0.0;
    }
    const double value = problem.loss(z);
    for (std::size_t t = 0; t < t_len; ++t) {
      const double denom = problem.p[t] * (1.0 - problem.p[t]);
      sample_grad[t] = value * (z[t] - problem.p[t]) / denom;
      const double delta = sample_grad[t] - mean[t];
      mean[t] += delta / static_cast<double>(i + 1);
      m2[t] += delta * (sample_grad[t] - mean[t]);
    }
  }
  McGradient out;
  out.mean = mean;
  out.samples = samples;
  out.std_error.assign(t_len, 0.0);
  if (samples > 1) {
    for (std::size_t t = 0; t < t_len; ++t) {
      out.std_error[t] = std::sqrt(m2[t] / static_cast<double>(samples - 1) /
                                   static_cast<double>(samples));
    }
  }
  return out;
}

std::vector<double> relaxed_gradient_quadrature(const ToyProblem& problem,
                                                std::size_t grid_points) {
  problem.validate();
  const std::size_t t_len = problem.t_len;
  if (t_len > 3) {
    throw ad::ContractError(
        "relaxed_gradient_quadrature: quadrature route is limited to T <= 3");
  }
  if (grid_points < 2) {
    throw ad::ContractError("relaxed_gradient_quadrature: grid too small");
  }

  // Per-token 1-D midpoint integrals: e1 = E[z], g1 = E[dz/ds], gz = E[z dz/ds].
  std::vector<double> e1(t_len, 0.0), g1(t_len, 0.0), gz(t_len, 0.0);
  const double h = 1.0 / static_cast<double>(grid_points);
  for (std::size_t t = 0; t < t_len; ++t) {
    for (std::size_t i = 0; i < grid_points; ++i) {
      const double u = (static_cast<double>(i) + 0.5) * h;
      const double z = gate::hard_concrete_value(problem.s[t], u, problem.hc);
      const double dz = gate::hard_concrete_dvalue_ds(problem.s[t], u, problem.hc);
      e1[t] += z;
      g1[t] += dz;
      gz[t] += z * dz;
    }
    e1[t] *= h;
    g1[t] *= h;
    gz[t] *= h;
  }

  std::vector<double> grad(t_len, 0.0);
  switch (problem.kind) {
    case ToyProblem::LossKind::constant:
      break;
    case ToyProblem::LossKind::linear:
      for (std::size_t t = 0; t < t_len; ++t) grad[t] = problem.coeff[t] * g1[t];
      break;
    case ToyProblem::LossKind::quadratic:
      // E[d/ds_t ||Mz - y||^2] with independent gates:
      //   2 sum_i M_it ( M_it E[z_t z_t'] + sum_{t' != t} M_it' E[z_t'] E[z_t']
      //                 - y_i E[z_t'] )    where z_t' denotes dz_t/ds_t
      for (std::size_t t = 0; t < t_len; ++t) {
        for (std::size_t i = 0; i < problem.out_dim; ++i) {
          const double mit = problem.mix[i * t_len + t];
          double cross = 0.0;
          for (std::size_t t2 = 0; t2 < t_len; ++t2) {
            if (t2 == t) continue;
            cross += problem.mix[i * t_len + t2] * e1[t2];
          }
          grad[t] += 2.0 * mit *
                     (mit * gz[t] + cross * g1[t] - problem.target[i] * g1[t]);
        }
      }
      break;
  }
  return grad;
}

UnbiasednessReport unbiasedness_check(const ToyProblem& problem,
                                      std::size_t samples, std::uint64_t seed,
                                      double z_threshold) {
  const McGradient mc = mc_gradient_estimate(problem, samples, seed);

  UnbiasednessReport report;
  report.mc_mean = mc.mean;
  std::vector<double> reference_se(problem.t_len, 0.0);
  if (problem.t_len <= 3) {
    report.reference = relaxed_gradient_quadrature(problem, 100000);
  } else {
    const McGradient ref =
        mc_gradient_estimate(problem, samples * 100, rng::hash_key(seed, 0x4ef));
    report.reference = ref.mean;
    reference_se = ref.std_error;
  }

  report.z_scores.resize(problem.t_len);
  for (std::size_t t = 0; t < problem.t_len; ++t) {
    const double se = std::sqrt(mc.std_error[t] * mc.std_error[t] +
                                reference_se[t] * reference_se[t]);
    const double diff = mc.mean[t] - report.reference[t];
    report.z_scores[t] = se > 0.0 ? diff / se : (diff == 0.0 ? 0.0 : 1e30);
    report.max_abs_z = std::max(report.max_abs_z, std::abs(report.z_scores[t]));
  }
  report.pass = report.max_abs_z < z_threshold;
  return report;
}

VarianceCurve variance_curve(const ToyProblem& problem,
                             const std::vector<std::size_t>& sample_counts,
                             std::size_t repeats, std::uint64_t seed) {
  if (sample_counts.size() < 3) {
    throw ad::ContractError("variance_curve: need at least 3 sample counts");
  }
  for (std::size_t i = 1; i < sample_counts.size(); ++i) {
    if (sample_counts[i] <= sample_counts[i - 1]) {
      throw ad::ContractError("variance_curve: sample counts must increase");
    }
  }
  if (repeats < 2) throw ad::ContractError("variance_curve: need >= 2 repeats");

  VarianceCurve curve;
  curve.sample_counts = sample_counts;
  const std::size_t t_len = problem.t_len;
  for (std::size_t bi = 0; bi < sample_counts.size(); ++bi) {
    const std::size_t b = sample_counts[bi];
    std::vector<double> mean(t_len, 0.0), m2(t_len, 0.0);
    for (std::size_t r = 0; r < repeats; ++r) {
      const McGradient g =
          mc_gradient_estimate(problem, b, rng::hash_key(seed, bi, r));
      for (std::size_t t = 0; t < t_len; ++t) {
        const double delta = g.mean[t] - mean[t];
        mean[t] += delta / static_cast<double>(r + 1);
        m2[t] += delta * (g.mean[t] - mean[t]);
      }
    }
    double trace = 0.0;
    for (std::size_t t = 0; t < t_len; ++t) {
      trace += m2[t] / static_cast<double>(repeats - 1);
    }
    curve.variances.push_back(trace);
  }

  curve.degenerate =
      std::all_of(curve.variances.begin(), curve.variances.end(),
                  [](double v) { return v <= 0.0; });
  if (!curve.degenerate) {
    // least-squares slope of log var vs log B
    double sx = 0.0, sy = 0.0, sxx = 0.0, sxy = 0.0;
    const double n = static_cast<double>(sample_counts.size());
    for (std::size_t i = 0; i < sample_counts.size(); ++i) {
      const double x = std::log(static_cast<double>(sample_counts[i]));
      const double y = std::log(curve.variances[i]);
      sx += x;
      sy += y;
      sxx += x * x;
      sxy += x * y;
    }
    curve.slope = (n * sxy - sx * sy) / (n * sxx - sx * sx);
  }
  return curve;
}

double ConvexToyInstance::objective(const std::vector<double>& theta,
                                    const std::vector<double>& p) const {
  const std::size_t m = b.size();
  double total = 0.0;
  for (std::size_t i = 0; i < m; ++i) {
    double r = -b[i];
    for (std::size_t j = 0; j < theta_dim; ++j) r += a[i * theta_dim + j] * theta[j];
    total += 0.5 * r * r;
  }
  for (std::size_t t = 0; t < q.size(); ++t) {
    const double d = p[t] - q[t];
    total += w[t] * d * d;
  }
  return total;
}

void ConvexToyInstance::validate() const {
  if (q.empty() || w.size() != q.size()) {
    throw ad::ContractError("toy instance: q/w size mismatch");
  }
  if (theta_dim == 0 || a.size() != b.size() * theta_dim) {
    throw ad::ContractError("toy instance: A/b size mismatch");
  }
  if (budget <= 0.0) throw ad::ContractError("toy instance: budget must be > 0");
}

ConvexToyInstance default_binding_instance() {
  ConvexToyInstance inst;
  inst.theta_dim = 3;
  inst.a = {1.0, 0.2, 0.0,  //
            0.1, 1.5, 0.3,  //
            0.0, 0.2, 0.8,  //
            0.4, 0.0, 1.1};
  inst.b = {0.7, -0.4, 0.9, 0.3};
  inst.q = {0.85, 0.7, 0.6, 0.55, 0.45, 0.65};
  inst.w = {1.0, 1.0, 1.0, 1.0, 1.0, 1.0};
  inst.budget = 3.0;  // sum q = 3.8 > 3, so the constraint binds
  inst.noise_std = 0.02;
  return inst;
}

ConvexToyInstance default_slack_instance() {
  ConvexToyInstance inst = default_binding_instance();
  inst.budget = static_cast<double>(inst.q.size());  // sum p <= T always
  return inst;
}

KktSolution solve_kkt(const ConvexToyInstance& instance) {
  instance.validate();
  KktSolution sol;

  // theta*: normal equations (A^T A) theta = A^T b, solved by Gaussian
  // elimination with partial pivoting (dimensions are tiny).
  const std::size_t n = instance.theta_dim;
  const std::size_t m = instance.b.size();
  std::vector<double> ata(n * n, 0.0), atb(n, 0.0);
  for (std::size_t i = 0; i < m; ++i) {
    for (std::size_t j = 0; j < n; ++j) {
      atb[j] += instance.a[i * n + j] * instance.b[i];
      for (std::size_t k = 0; k < n; ++k) {
        ata[j * n + k] += instance.a[i * n + j] * instance.a[i * n + k];
      }
    }
  }
  std::vector<double> aug(ata);
  std::vector<double> rhs(atb);
  std::vector<std::size_t> perm(n);
  for (std::size_t i = 0; i < n; ++i) perm[i] = i;
  for (std::size_t col = 0; col < n; ++col) {
    std::size_t pivot = col;
    for (std::size_t r = col + 1; r < n; ++r) {
      if (std::abs(aug[r * n + col]) > std::abs(aug[pivot * n + col])) pivot = r;
    }
    for (std::size_t c = 0; c < n; ++c) std::swap(aug[col * n + c], aug[pivot * n + c]);
    std::swap(rhs[col], rhs[pivot]);
    for (std::size_t r = col + 1; r < n; ++r) {
      const double f = aug[r * n + col] / aug[col * n + col];
      for (std::size_t c = col; c < n; ++c) aug[r * n + c] -= f * aug[col * n + c];
      rhs[r] -= f * rhs[col];
    }
  }
  sol.theta_star.assign(n, 0.0);
  for (std::size_t ri = n; ri-- > 0;) {
    double v = rhs[ri];
    for (std::size_t c = ri + 1; c < n; ++c) v -= aug[ri * n + c] * sol.theta_star[c];
    sol.theta_star[ri] = v / aug[ri * n + ri];
  }

  // p*: water-filling on lambda
  const std::size_t t_len = instance.t_len();
  auto p_of_lambda = [&](double lambda) {
    std::vector<double> p(t_len);
    for (std::size_t t = 0; t < t_len; ++t) {
      p[t] = std::clamp(instance.q[t] - lambda / (2.0 * instance.w[t]), 0.0, 1.0);
    }
    return p;
  };
  auto sum_of = [](const std::vector<double>& v) {
    double s = 0.0;
    for (double x : v) s += x;
    return s;
  };

  std::vector<double> p0 = p_of_lambda(0.0);
  if (sum_of(p0) <= instance.budget) {
    sol.lambda_star = 0.0;
    sol.p_star = std::move(p0);
  } else {
    double lo = 0.0, hi = 1.0;
    while (sum_of(p_of_lambda(hi)) > instance.budget) hi *= 2.0;
    for (int iter = 0; iter < 200; ++iter) {
      const double mid = 0.5 * (lo + hi);
      if (sum_of(p_of_lambda(mid)) > instance.budget) {
        lo = mid;
      } else {
        hi = mid;
      }
    }
    sol.lambda_star = 0.5 * (lo + hi);
    sol.p_star = p_of_lambda(sol.lambda_star);
  }
  sol.objective = instance.objective(sol.theta_star, sol.p_star);
  return sol;
}

ConvergenceReport convergence_experiment(const ConvexToyInstance& instance,
                                         const lagr::StepSchedules& schedules,
                                         std::size_t iterations,
                                         std::uint64_t seed) {
  instance.validate();
  schedules.validate();
  const std::size_t n = instance.theta_dim;
  const std::size_t t_len = instance.t_len();
  const std::size_t m = instance.b.size();

  std::vector<double> theta(n, 0.0);
  std::vector<double> p(t_len, 0.5);
  double lambda = 0.0;
  rng::Stream noise(seed, 0xc0ffee);

  ConvergenceReport report;
  const std::size_t trace_stride = std::max<std::size_t>(1, iterations / 1000);
  std::vector<double> lambda_last_quartile;
  lambda_last_quartile.reserve(iterations / 4 + 1);

  std::vector<double> grad_theta(n);
  for (std::size_t k = 1; k <= iterations; ++k) {
    const lagr::StepSizes steps = lagr::schedule_steps(schedules, k);

    // theta step: grad = A^T (A theta - b) + noise
    std::fill(grad_theta.begin(), grad_theta.end(), 0.0);
    for (std::size_t i = 0; i < m; ++i) {
      double r = -instance.b[i];
      for (std::size_t j = 0; j < n; ++j) r += instance.a[i * n + j] * theta[j];
      for (std::size_t j = 0; j < n; ++j) grad_theta[j] += instance.a[i * n + j] * r;
    }
    for (std::size_t j = 0; j < n; ++j) {
      theta[j] -= steps.alpha *
                  (grad_theta[j] + instance.noise_std * noise.next_normal());
    }

    // p step with projection to [0,1]^T
    double sum_p = 0.0;
    for (std::size_t t = 0; t < t_len; ++t) {
      const double g = 2.0 * instance.w[t] * (p[t] - instance.q[t]) + lambda +
                       instance.noise_std * noise.next_normal();
      p[t] = std::clamp(p[t] - steps.beta * g, 0.0, 1.0);
      sum_p += p[t];
    }

    // lambda projected ascent on the slowest timescale
    lambda = std::max(0.0, lambda + steps.gamma * (sum_p - instance.budget));

    if (k % trace_stride == 0) report.lambda_trace.push_back(lambda);
    if (k > iterations - iterations / 4) lambda_last_quartile.push_back(lambda);

    if (instance.objective(theta, p) > 1e6) {
      report.diverged = true;
      break;
    }
  }

  report.theta_final = theta;
  report.p_final = p;
  report.lambda_final = lambda;
  double sum_p = 0.0;
  for (double v : p) sum_p += v;
  report.sum_p_final = sum_p;
  report.final_violation = sum_p - instance.budget;
  report.trained_task_loss = instance.objective(theta, p);
  report.trained_lagrangian =
      report.trained_task_loss + lambda * report.final_violation;

  const KktSolution sol = solve_kkt(instance);
  double dist2 = 0.0;
  for (std::size_t j = 0; j < n; ++j) {
    const double d = theta[j] - sol.theta_star[j];
    dist2 += d * d;
  }
  for (std::size_t t = 0; t < t_len; ++t) {
    const double d = p[t] - sol.p_star[t];
    dist2 += d * d;
  }
  report.distance_to_optimum = std::sqrt(dist2);

  if (!lambda_last_quartile.empty()) {
    const auto [mn, mx] = std::minmax_element(lambda_last_quartile.begin(),
                                              lambda_last_quartile.end());
    double mean = 0.0;
    for (double v : lambda_last_quartile) mean += v;
    mean /= static_cast<double>(lambda_last_quartile.size());
    report.lambda_quartile_range = *mx - *mn;
    report.lambda_quartile_mean = mean;
    report.lambda_stabilized =
        mean > 0.0 ? report.lambda_quartile_range < 0.1 * mean
                   : report.lambda_quartile_range < 1e-9;
  }
  return report;
}

}  // namespace retlab::lab
