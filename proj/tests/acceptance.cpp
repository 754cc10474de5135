// Acceptance suite: one pass/fail line per criterion, nonzero exit on any
// failure. Criteria run end to end against the library, with tolerances
// pinned in code.

#include <chrono>
#include <cmath>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iostream>
#include <numeric>
#include <sstream>
#include <vector>

#include "config_fuzz.hpp"
#include "retlab/checkpoint.hpp"
#include "retlab/config.hpp"
#include "retlab/cost_profiler.hpp"
#include "retlab/estimator_lab.hpp"
#include "retlab/gate.hpp"
#include "retlab/lagrangian.hpp"
#include "retlab/metrics.hpp"
#include "retlab/needle.hpp"
#include "retlab/rng.hpp"
#include "retlab/train.hpp"
#include "retlab/verify.hpp"

using namespace retlab;
namespace fs = std::filesystem;

namespace {

struct Criterion {
  int number;
  std::string name;
  std::function<bool(std::string&)> run;
};

fs::path work_dir() {
  static const fs::path dir = [] {
    fs::path d = fs::temp_directory_path() / "retlab_acceptance";
    fs::remove_all(d);
    fs::create_directories(d);
    return d;
  }();
  return dir;
}

std::string read_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

// ---------------------------------------------------------------------------
// 1. gradient correctness

bool criterion_gradients(std::string& detail) {
  const verify::SuiteReport report = verify::run_gradients_suite(20260801);
  std::ostringstream ss;
  for (const verify::Check& check : report.checks) {
    if (!check.pass) ss << check.name << "=" << check.value << " ";
  }
  double end_to_end = -1.0;
  for (const verify::Check& check : report.checks) {
    if (check.name == "end_to_end_lagrangian") end_to_end = check.value;
  }
  detail = "end_to_end_rel_err=" + std::to_string(end_to_end) +
           (report.pass ? "" : " failing: " + ss.str());
  return report.pass;
}

// ---------------------------------------------------------------------------
// 2. unbiasedness on the T <= 3 quadrature suite at B = 1e5

bool criterion_unbiasedness(std::string& detail) {
  const std::size_t samples = 100000;
  double max_z = 0.0;
  {
    const lab::ToyProblem toy = lab::make_linear_toy({1.5}, {0.3});
    max_z = std::max(max_z, lab::unbiasedness_check(toy, samples, 101).max_abs_z);
  }
  {
    const lab::ToyProblem toy = lab::make_linear_toy({1.0, -2.0}, {0.5, -0.2});
    max_z = std::max(max_z, lab::unbiasedness_check(toy, samples, 102).max_abs_z);
  }
  {
    const lab::ToyProblem toy = lab::make_quadratic_toy(
        {0.8, -0.4, 0.3,  //
         0.2, 0.9, -0.7},
        2, {0.5, -0.3}, {0.4, -0.1, 0.6});
    max_z = std::max(max_z, lab::unbiasedness_check(toy, samples, 103).max_abs_z);
  }
  detail = "max |z| = " + std::to_string(max_z);
  return max_z < 4.0;
}

// ---------------------------------------------------------------------------
// 3. variance scaling: slope of log Var vs log B in [-1.15, -0.85]

bool criterion_variance(std::string& detail) {
  const std::vector<std::size_t> counts = {8, 64, 512, 4096};
  const lab::ToyProblem linear = lab::make_linear_toy({1.0, -2.0}, {0.5, -0.2});
  const lab::VarianceCurve curve_linear =
      lab::variance_curve(linear, counts, 200, 301);
  const lab::ToyProblem quad = lab::make_quadratic_toy(
      {0.8, -0.4, 0.3,  //
       0.2, 0.9, -0.7},
      2, {0.5, -0.3}, {0.4, -0.1, 0.6});
  const lab::VarianceCurve curve_quad = lab::variance_curve(quad, counts, 200, 302);
  detail = "slope_linear=" + std::to_string(curve_linear.slope) +
           " slope_quadratic=" + std::to_string(curve_quad.slope);
  auto in_range = [](double slope) { return slope > -1.15 && slope < -0.85; };
  return in_range(curve_linear.slope) && in_range(curve_quad.slope);
}

// shared converged toy run for criteria 4 and 5
const lab::ConvergenceReport& converged_run() {
  static const lab::ConvergenceReport report = [] {
    lagr::StepSchedules schedules;
    schedules.theta_scale = 0.3;
    schedules.p_scale = 0.3;
    schedules.lambda_scale = 0.5;
    return lab::convergence_experiment(lab::default_binding_instance(), schedules,
                                       100000, 401);
  }();
  return report;
}

// ---------------------------------------------------------------------------
// 4. slackness + duality-gap certificates at tol = 1e-3

bool criterion_certificates(std::string& detail) {
  const lab::ConvexToyInstance instance = lab::default_binding_instance();
  const lab::ConvergenceReport& run = converged_run();
  const lab::KktSolution sol = lab::solve_kkt(instance);
  double ref_sum_p = 0.0;
  for (double v : sol.p_star) ref_sum_p += v;
  const lagr::CertificateReport report = lagr::budget_certificates(
      run.trained_lagrangian, run.trained_task_loss, sol.objective, ref_sum_p,
      instance.budget, run.lambda_final, run.final_violation, 1e-3);
  std::ostringstream ss;
  for (const lagr::CertificateCheck& check : report.checks) {
    ss << check.name << (check.pass ? " ok" : " FAIL") << " margin=" << check.margin
       << "; ";
  }
  detail = ss.str();
  return report.all_pass;
}

// ---------------------------------------------------------------------------
// 5. two-timescale convergence on the binding instance

bool criterion_convergence(std::string& detail) {
  const lab::ConvergenceReport& run = converged_run();
  detail = "violation=" + std::to_string(run.final_violation) +
           " distance=" + std::to_string(run.distance_to_optimum) +
           " lambda_range/mean=" +
           std::to_string(run.lambda_quartile_range /
                          std::max(run.lambda_quartile_mean, 1e-300));
  return !run.diverged && std::abs(run.final_violation) < 0.05 &&
         run.distance_to_optimum < 0.05 && run.lambda_stabilized;
}

// ---------------------------------------------------------------------------
// 6. exact-budget inference vs a stable-sort oracle, with duplicates

bool criterion_top_m(std::string& detail) {
  rng::Stream stream(601);
  for (int trial = 0; trial < 1000; ++trial) {
    const std::size_t t_len = 1 + stream.next_below(40);
    std::vector<double> p(t_len);
    for (double& v : p) {
      v = trial % 2 == 0 ? static_cast<double>(stream.next_below(4)) / 4.0
                         : stream.next_unit_open();
    }
    const std::size_t m = stream.next_below(t_len + 1);
    const gate::TopMSelection sel = gate::select_top_m(p, m);

    if (std::count(sel.gates.begin(), sel.gates.end(), 1.0) !=
        static_cast<long>(m)) {
      detail = "trial " + std::to_string(trial) + ": wrong retained count";
      return false;
    }
    // stable-sort oracle
    std::vector<std::size_t> order(t_len);
    std::iota(order.begin(), order.end(), 0);
    std::stable_sort(order.begin(), order.end(),
                     [&](std::size_t a, std::size_t b) { return p[a] > p[b]; });
    std::vector<double> oracle(t_len, 0.0);
    for (std::size_t i = 0; i < m; ++i) oracle[order[i]] = 1.0;
    if (sel.gates != oracle) {
      detail = "trial " + std::to_string(trial) + ": differs from oracle";
      return false;
    }
  }
  detail = "1000 random vectors (half on a coarse duplicate-heavy grid)";
  return true;
}

// ---------------------------------------------------------------------------
// 7. projected ascent invariant

bool criterion_lambda_invariant(std::string& detail) {
  rng::Stream stream(701);
  for (int trial = 0; trial < 200; ++trial) {
    lagr::LagrangeState state;
    state.lambda = stream.next_uniform(0.0, 1.0);
    double previous = state.lambda;
    bool in_nonpositive_window = true;
    for (int step = 0; step < 500; ++step) {
      const double violation = stream.next_uniform(-3.0, 3.0);
      lagr::ascend_lambda(state, 10.0 + violation, 10.0,
                          stream.next_uniform(1e-3, 0.2), step);
      if (state.lambda < 0.0) {
        detail = "lambda went negative";
        return false;
      }
      in_nonpositive_window = violation <= 0.0;
      if (in_nonpositive_window && state.lambda > previous) {
        detail = "lambda increased on a nonpositive violation";
        return false;
      }
      previous = state.lambda;
    }
  }
  detail = "200 random update sequences of length 500";
  return true;
}

// ---------------------------------------------------------------------------
// 8. complexity model: instrumented MACs equal T^2 d and T M d exactly

bool criterion_complexity(std::string& detail) {
  const std::vector<std::size_t> ts = {4, 6, 8, 12, 16, 24, 32, 48, 64, 96};
  std::size_t points = 0;
  for (std::size_t i = 0; i < ts.size(); ++i) {
    const std::size_t t = ts[i];
    const std::size_t d = i % 2 == 0 ? 8 : 16;
    const std::size_t m = std::max<std::size_t>(1, t / 3);
    const std::size_t heads = i % 3 == 0 ? 1 : 2;

    const std::uint64_t dense =
        prof::measure_score_macs(prof::AttentionMode::dense, t, t, d, heads, 801);
    if (dense != static_cast<std::uint64_t>(t) * t * d) {
      detail = "dense mismatch at T=" + std::to_string(t);
      return false;
    }
    ++points;
    const std::uint64_t mixed = prof::measure_score_macs(
        prof::AttentionMode::mixed_full_sparse, t, m, d, heads, 802);
    if (mixed != static_cast<std::uint64_t>(t) * m * d) {
      detail = "mixed mismatch at T=" + std::to_string(t);
      return false;
    }
    ++points;
  }
  detail = std::to_string(points) + " grid points exact";
  return points == 20;
}

// ---------------------------------------------------------------------------
// 9. mask identity

bool criterion_mask_identity(std::string& detail) {
  enc::EncoderConfig config;
  config.num_layers = 2;
  config.model_dim = 16;
  config.num_heads = 2;
  config.ff_dim = 32;
  config.vocab_size = 64;
  config.max_seq_len = 24;
  config.num_classes = 4;
  const enc::Encoder encoder(config, 901);

  rng::Stream stream(902);
  for (int trial = 0; trial < 20; ++trial) {
    std::vector<int> tokens(8 + stream.next_below(16));
    for (int& t : tokens) t = static_cast<int>(2 + stream.next_below(60));

    ad::Tape tape_gated;
    enc::GateOverride ones;
    ones.kind = enc::GateOverride::Kind::ones;
    const enc::TrainForward gated = encoder.forward_train(
        tape_gated, tokens, 0, gate::HardConcreteParams{}, 901, 1, trial, ones);
    ad::Tape tape_plain;
    const ad::Tensor plain = encoder.forward_plain_logits(tape_plain, tokens);
    if (std::memcmp(gated.logits.data().data(), plain.data().data(),
                    plain.size() * sizeof(double)) != 0) {
      detail = "all-ones training forward differs from the gate-free encoder";
      return false;
    }
  }

  // rho = 1.0 evaluation equals gate-free accuracy exactly
  data::NeedleConfig needle;
  needle.seq_len = 24;
  needle.num_needles = 2;
  needle.num_classes = 4;
  needle.vocab_size = 64;
  const data::Dataset dataset = data::generate_needle_dataset(needle, 100, 903);
  cli::EvalOptions options;
  options.rho = 1.0;
  const cli::EvalResult at_full = cli::evaluate(encoder, dataset, options);
  const double plain_acc = cli::ungated_accuracy(encoder, dataset);
  detail = "rho=1 accuracy " + std::to_string(at_full.accuracy) +
           " == ungated " + std::to_string(plain_acc);
  return at_full.accuracy == plain_acc;
}

// ---------------------------------------------------------------------------
// 10. mechanism selectivity on the default needle task

cli::RunConfig needle_run_config(const std::string& out_dir) {
  cli::RunConfig config;
  config.seed = 1001;
  config.out_dir = out_dir;
  config.encoder.num_layers = 2;
  config.encoder.model_dim = 32;
  config.encoder.num_heads = 2;
  config.encoder.ff_dim = 128;
  config.encoder.vocab_size = 64;
  config.encoder.max_seq_len = 64;
  config.encoder.num_classes = 4;
  config.encoder.retention_mode = enc::RetentionMode::layer_wise;
  config.encoder.schedule_mode = enc::ScheduleMode::uniform_global;
  config.encoder.rho = 0.3;
  config.budget.mode = lagr::BudgetConfig::Mode::ratio;
  config.budget.value = 0.3;
  config.budget.eta = 2e-4;
  config.optimizer.kind = cli::OptimizerKind::sgd;
  config.optimizer.learning_rate = 0.05;
  config.optimizer.momentum = 0.9;
  config.optimizer.batch_size = 32;
  config.optimizer.epochs = 10;
  config.data.needle.seq_len = 64;
  config.data.needle.num_needles = 4;
  config.data.needle.num_classes = 4;
  config.data.needle.vocab_size = 64;
  config.data.n_train = 2000;
  config.data.n_valid = 500;
  config.log_interval = 50;
  return config;
}

bool criterion_selectivity(std::string& detail) {
  const fs::path dir = work_dir();
  cli::RunConfig adaptive_config = needle_run_config((dir / "adaptive").string());
  const cli::TrainResult adaptive = cli::train_run(adaptive_config);

  cli::RunConfig random_config = needle_run_config((dir / "random").string());
  random_config.baseline = cli::BaselineMode::random;
  const cli::TrainResult random_run = cli::train_run(random_config);

  // random-pruning baseline recall distribution over the held-out set
  data::Dataset train_unused, valid_set;
  cli::load_datasets(adaptive_config, train_unused, valid_set);
  const enc::Encoder random_model = cli::load_checkpoint(random_run.checkpoint_path);
  double mean_of_means = 0.0, m2 = 0.0;
  const std::size_t replications = 60;
  for (std::size_t r = 0; r < replications; ++r) {
    cli::EvalOptions options;
    options.rho = 0.3;
    options.random_selection = true;
    options.selection_seed = 5000 + r;
    const cli::EvalResult eval = cli::evaluate(random_model, valid_set, options);
    const double delta = eval.mean_recall - mean_of_means;
    mean_of_means += delta / static_cast<double>(r + 1);
    m2 += delta * (eval.mean_recall - mean_of_means);
  }
  const double sigma_mean = std::sqrt(m2 / static_cast<double>(replications - 1));
  const double random_mean = std::max(0.3, mean_of_means);
  const double recall_bar = random_mean + 3.0 * sigma_mean;

  // random baseline accuracy at rho = 0.3 (its own evaluation regime)
  cli::EvalOptions random_options;
  random_options.rho = 0.3;
  random_options.random_selection = true;
  random_options.selection_seed = 4242;
  const cli::EvalResult random_eval =
      cli::evaluate(random_model, valid_set, random_options);

  detail = "adaptive recall=" + std::to_string(adaptive.final_recall) +
           " vs bar=" + std::to_string(recall_bar) +
           "; adaptive acc=" + std::to_string(adaptive.final_accuracy) +
           " vs random acc=" + std::to_string(random_eval.accuracy);
  return adaptive.final_recall > recall_bar &&
         adaptive.final_accuracy >= random_eval.accuracy + 0.05;
}

// ---------------------------------------------------------------------------
// 11. throughput direction at T=512, d=64, L=4

bool criterion_throughput(std::string& detail) {
  prof::ThroughputConfig config;
  config.encoder.num_layers = 4;
  config.encoder.model_dim = 64;
  config.encoder.num_heads = 8;
  config.encoder.ff_dim = 256;
  config.encoder.vocab_size = 256;
  config.encoder.num_classes = 4;
  config.encoder.max_seq_len = 512;
  config.encoder.schedule_mode = enc::ScheduleMode::uniform_global;
  config.t_len = 512;
  config.batch_size = 2;
  config.warmup_batches = 2;
  config.timed_batches = 9;
  config.rho = 0.3;
  config.seed = 1101;

  const std::vector<prof::CostReport> reports = prof::profile_suite(config);
  const double dense = reports[0].median_seconds_per_batch;
  const double pruned = reports[1].median_seconds_per_batch;
  const double gated = reports[2].median_seconds_per_batch;
  const double speedup = dense / pruned;
  const double overhead = gated / dense - 1.0;
  detail = "speedup=" + std::to_string(speedup) +
           " scorer_overhead=" + std::to_string(overhead * 100.0) + "%";
  return speedup > 1.3 && overhead < 0.05;
}

// ---------------------------------------------------------------------------
// 12. determinism and round-trips

bool criterion_determinism(std::string& detail) {
  rng::Stream stream(1201);
  for (int i = 0; i < 500; ++i) {
    const cli::RunConfig config = testutil::random_config(stream);
    if (!(cli::parse_run_config(cli::serialize_run_config(config)) == config)) {
      detail = "config round-trip failed at case " + std::to_string(i);
      return false;
    }
  }

  const fs::path dir = work_dir();
  cli::RunConfig config = needle_run_config((dir / "det_a").string());
  config.data.n_train = 64;
  config.data.n_valid = 32;
  config.optimizer.epochs = 1;
  config.log_interval = 1;
  const cli::TrainResult a = cli::train_run(config);
  config.out_dir = (dir / "det_b").string();
  const cli::TrainResult b = cli::train_run(config);

  const std::string csv_a =
      cli::strip_wall_seconds_column(read_file(a.metrics_csv_path));
  const std::string csv_b =
      cli::strip_wall_seconds_column(read_file(b.metrics_csv_path));
  if (csv_a != csv_b) {
    detail = "metrics differ across identical (config, seed) runs";
    return false;
  }
  if (read_file(a.checkpoint_path) != read_file(b.checkpoint_path)) {
    detail = "checkpoints differ across identical (config, seed) runs";
    return false;
  }

  const enc::Encoder loaded = cli::load_checkpoint(a.checkpoint_path);
  const std::string again = (dir / "det_again.bin").string();
  cli::save_checkpoint(again, loaded);
  if (read_file(a.checkpoint_path) != read_file(again)) {
    detail = "checkpoint round-trip not bitwise";
    return false;
  }
  detail = "500 config cases; metrics, checkpoints bit-identical";
  return true;
}

}  // namespace

int main() {
  const std::vector<Criterion> criteria = {
      {1, "gradient correctness (end-to-end < 1e-3, primitives < 1e-4)",
       criterion_gradients},
      {2, "unbiasedness of the pathwise estimator (z < 4 at B = 1e5)",
       criterion_unbiasedness},
      {3, "variance scaling Var ~ C/B (slope in [-1.15, -0.85])",
       criterion_variance},
      {4, "slackness and duality-gap certificates (tol 1e-3)",
       criterion_certificates},
      {5, "two-timescale convergence (violation, distance < 0.05)",
       criterion_convergence},
      {6, "exact-budget top-M selection vs stable-sort oracle", criterion_top_m},
      {7, "projected dual ascent invariant (lambda >= 0)",
       criterion_lambda_invariant},
      {8, "complexity model: counted MACs equal T^2 d and T M d",
       criterion_complexity},
      {9, "mask identity: all-ones gates == ungated encoder",
       criterion_mask_identity},
      {10, "mechanism selectivity vs random pruning at rho = 0.3",
       criterion_selectivity},
      {11, "throughput > 1.3x at rho = 0.3; scorer overhead < 5%",
       criterion_throughput},
      {12, "determinism and serialization round-trips", criterion_determinism},
  };

  int failures = 0;
  for (const Criterion& criterion : criteria) {
    const auto start = std::chrono::steady_clock::now();
    bool pass = false;
    std::string detail;
    try {
      pass = criterion.run(detail);
    } catch (const std::exception& err) {
      detail = std::string("exception: ") + err.what();
    }
    const double seconds =
        std::chrono::duration<double>(std::chrono::steady_clock::now() - start)
            .count();
    std::cout << (pass ? "PASS" : "FAIL") << " criterion " << criterion.number
              << ": " << criterion.name << " [" << detail << "] ("
              << seconds << "s)" << std::endl;
    if (!pass) ++failures;
  }
  if (failures > 0) {
    std::cout << failures << " of " << criteria.size() << " criteria failed"
              << std::endl;
    return 1;
  }
  std::cout << "all " << criteria.size() << " criteria passed" << std::endl;
  return 0;
}
