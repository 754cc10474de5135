// retention_lab: train / eval / profile / sweep / verify / ingest for the
// budgeted token-retention encoder.

#include <atomic>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <sstream>
#include <thread>

#include <CLI11.hpp>
#include <json.hpp>

#include "retlab/checkpoint.hpp"
#include "retlab/config.hpp"
#include "retlab/cost_profiler.hpp"
#include "retlab/train.hpp"
#include "retlab/verify.hpp"

namespace fs = std::filesystem;
using nlohmann::json;
using namespace retlab;

namespace {

std::size_t worker_threads() {
  if (const char* env = std::getenv("RETENTION_LAB_THREADS")) {
    const long n = std::strtol(env, nullptr, 10);
    if (n > 0) return static_cast<std::size_t>(n);
  }
  return 1;
}

cli::RunConfig load_config_or_default(const std::string& path) {
  if (path.empty()) return cli::RunConfig{};
  return cli::load_run_config(path);
}

std::vector<double> parse_budget_list(const std::string& text) {
  std::vector<double> budgets;
  std::istringstream ss(text);
  std::string item;
  while (std::getline(ss, item, ',')) {
    if (!item.empty()) budgets.push_back(std::stod(item));
  }
  if (budgets.empty()) throw cli::ConfigError("eval: empty budget list");
  return budgets;
}

// Numeric sweep axes addressable from the grid spec.
using Setter = std::function<void(cli::RunConfig&, double)>;
const std::vector<std::pair<std::string, Setter>>& sweep_axes() {
  static const std::vector<std::pair<std::string, Setter>> axes = {
      {"hard_concrete.beta",
       [](cli::RunConfig& c, double v) { c.hard_concrete.beta = v; }},
      {"hard_concrete.stretch_low",
       [](cli::RunConfig& c, double v) { c.hard_concrete.stretch_low = v; }},
      {"hard_concrete.stretch_high",
       [](cli::RunConfig& c, double v) { c.hard_concrete.stretch_high = v; }},
      {"budget.value", [](cli::RunConfig& c, double v) { c.budget.value = v; }},
      {"budget.eta", [](cli::RunConfig& c, double v) { c.budget.eta = v; }},
      {"budget.lambda_init",
       [](cli::RunConfig& c, double v) { c.budget.lambda_init = v; }},
      {"optimizer.learning_rate",
       [](cli::RunConfig& c, double v) { c.optimizer.learning_rate = v; }},
      {"optimizer.weight_decay",
       [](cli::RunConfig& c, double v) { c.optimizer.weight_decay = v; }},
      {"encoder.rho", [](cli::RunConfig& c, double v) { c.encoder.rho = v; }},
      {"encoder.decay_gamma",
       [](cli::RunConfig& c, double v) { c.encoder.decay_gamma = v; }},
  };
  return axes;
}

double sweep_axis_value(const cli::RunConfig& config, const std::string& name) {
  if (name == "hard_concrete.beta") return config.hard_concrete.beta;
  if (name == "hard_concrete.stretch_low") return config.hard_concrete.stretch_low;
  if (name == "hard_concrete.stretch_high") return config.hard_concrete.stretch_high;
  if (name == "budget.value") return config.budget.value;
  if (name == "budget.eta") return config.budget.eta;
  if (name == "budget.lambda_init") return config.budget.lambda_init;
  if (name == "optimizer.learning_rate") return config.optimizer.learning_rate;
  if (name == "optimizer.weight_decay") return config.optimizer.weight_decay;
  if (name == "encoder.rho") return config.encoder.rho;
  if (name == "encoder.decay_gamma") return config.encoder.decay_gamma;
  throw cli::ConfigError("sweep: unknown parameter \"" + name + "\"");
}

struct SweepGrid {
  std::vector<std::string> names;
  std::vector<std::vector<double>> values;
};

SweepGrid parse_grid(const std::string& spec) {
  SweepGrid grid;
  std::istringstream ss(spec);
  std::string entry;
  while (std::getline(ss, entry, ';')) {
    if (entry.empty()) continue;
    const std::size_t eq = entry.find('=');
    if (eq == std::string::npos) {
      throw cli::ConfigError("sweep: grid entry \"" + entry +
                             "\" is not name=v1,v2,...");
    }
    const std::string name = entry.substr(0, eq);
    bool known = false;
    for (const auto& [axis, setter] : sweep_axes()) known = known || axis == name;
    if (!known) throw cli::ConfigError("sweep: unknown parameter \"" + name + "\"");
    std::vector<double> vals;
    std::istringstream vs(entry.substr(eq + 1));
    std::string v;
    while (std::getline(vs, v, ',')) {
      if (!v.empty()) vals.push_back(std::stod(v));
    }
    if (vals.empty()) {
      throw cli::ConfigError("sweep: no values for \"" + name + "\"");
    }
    grid.names.push_back(name);
    grid.values.push_back(vals);
  }
  if (grid.names.empty()) throw cli::ConfigError("sweep: empty grid");
  return grid;
}

void apply_axis(cli::RunConfig& config, const std::string& name, double value) {
  for (const auto& [axis, setter] : sweep_axes()) {
    if (axis == name) {
      setter(config, value);
      return;
    }
  }
  throw cli::ConfigError("sweep: unknown parameter \"" + name + "\"");
}

int cmd_train(const std::string& config_path, std::uint64_t seed_override,
              bool has_seed, const std::string& out_override) {
  cli::RunConfig config = load_config_or_default(config_path);
  if (has_seed) config.seed = seed_override;
  if (!out_override.empty()) config.out_dir = out_override;
  const cli::TrainResult result = cli::train_run(config);
  json summary;
  summary["steps"] = result.steps;
  summary["final_lambda"] = result.final_lambda;
  summary["final_violation"] = result.final_violation;
  summary["final_accuracy"] = result.final_accuracy;
  summary["final_recall"] = result.final_recall;
  summary["checkpoint"] = result.checkpoint_path;
  summary["metrics_csv"] = result.metrics_csv_path;
  std::cout << summary.dump(2) << "\n";
  return cli::kExitOk;
}

int cmd_eval(const std::string& checkpoint_path, const std::string& data_path,
             const std::string& config_path, const std::string& budgets_text,
             const std::string& out_path) {
  enc::Encoder encoder = cli::load_checkpoint(checkpoint_path);

  data::Dataset dataset;
  if (!data_path.empty()) {
    dataset = data::read_jsonl(data_path);
  } else if (!config_path.empty()) {
    const cli::RunConfig config = cli::load_run_config(config_path);
    // cross-check checkpoint against the config it claims to extend
    if (!(config.encoder == encoder.config())) {
      const json a = cli::encoder_config_to_json(config.encoder);
      const json b = cli::encoder_config_to_json(encoder.config());
      std::string divergent;
      for (const auto& [key, value] : a.items()) {
        if (b.at(key) != value) divergent += (divergent.empty() ? "" : ", ") + key;
      }
      throw cli::ConfigError("eval: checkpoint and config disagree on: " +
                             divergent);
    }
    data::Dataset train_unused;
    cli::load_datasets(config, train_unused, dataset);
  } else {
    throw cli::DataError("eval: provide --data or --config");
  }

  json output;
  output["n_examples"] = dataset.size();
  json per_budget = json::array();
  std::vector<std::vector<int>> sample_tokens;
  for (const auto& ex : dataset) sample_tokens.push_back(ex.tokens);
  for (double rho : parse_budget_list(budgets_text)) {
    cli::EvalOptions options;
    options.rho = rho;
    const cli::EvalResult eval = cli::evaluate(encoder, dataset, options);
    json row;
    row["budget"] = rho;
    row["accuracy"] = eval.accuracy;
    if (eval.has_recall) row["retention_recall"] = eval.mean_recall;
    per_budget.push_back(row);
  }
  output["budgets"] = per_budget;

  const prof::RetentionTable table =
      prof::retention_table(encoder, sample_tokens, parse_budget_list(budgets_text));
  output["retention_table"] = table.format_text();
  std::cout << output.dump(2) << "\n";
  if (!out_path.empty()) {
    std::ofstream out(out_path, std::ios::binary);
    out << output.dump(2) << "\n";
  }
  return cli::kExitOk;
}

int cmd_profile(const std::string& config_path, std::size_t t_len,
                std::size_t batch_size, std::size_t warmup, std::size_t timed,
                double rho, const std::string& out_dir) {
  prof::ThroughputConfig profile;
  if (!config_path.empty()) {
    profile.encoder = cli::load_run_config(config_path).encoder;
  } else {
    // desk-scale profile defaults
    profile.encoder.num_layers = 4;
    profile.encoder.model_dim = 64;
    profile.encoder.num_heads = 8;
    profile.encoder.ff_dim = 256;
    profile.encoder.vocab_size = 256;
    profile.encoder.num_classes = 4;
    profile.encoder.max_seq_len = 512;
  }
  profile.t_len = t_len;
  profile.batch_size = batch_size;
  profile.warmup_batches = warmup;
  profile.timed_batches = timed;
  profile.rho = rho;

  const std::vector<prof::CostReport> reports = prof::profile_suite(profile);

  // closed-form vs instrumented cross-check for the score stage
  json closed_forms = json::array();
  for (const auto mode :
       {prof::AttentionMode::dense, prof::AttentionMode::mixed_full_sparse,
        prof::AttentionMode::retained_block}) {
    const std::size_t m = static_cast<std::size_t>(
        rho * static_cast<double>(std::min<std::size_t>(t_len, 64)));
    const std::size_t small_t = std::min<std::size_t>(t_len, 64);
    prof::CostModel model{small_t, std::max<std::size_t>(1, m),
                          profile.encoder.model_dim, 1, mode};
    const prof::ClosedFormCost cost = prof::attention_cost(model);
    const std::uint64_t measured = prof::measure_score_macs(
        mode, model.t_len, model.retained, model.dim, profile.encoder.num_heads, 7);
    json row;
    row["mode"] = mode == prof::AttentionMode::dense ? "dense"
                  : mode == prof::AttentionMode::mixed_full_sparse
                      ? "mixed_full_sparse"
                      : "retained_block";
    row["closed_form_flops"] = cost.flops;
    row["measured_macs"] = measured;
    row["match"] = cost.flops == measured;
    closed_forms.push_back(row);
  }

  std::ostringstream csv;
  csv << prof::CostReport::csv_header() << "\n";
  for (const prof::CostReport& report : reports) csv << report.csv_row() << "\n";
  std::cout << csv.str();

  json output;
  output["reports"] = json::array();
  for (const prof::CostReport& report : reports) {
    json row;
    row["label"] = report.label;
    row["wall_seconds_per_batch"] = report.wall_seconds_per_batch;
    row["median_seconds_per_batch"] = report.median_seconds_per_batch;
    row["seconds_per_1k_tokens"] = report.seconds_per_1k_tokens;
    row["tokens_per_second"] = report.tokens_per_second;
    row["relative_throughput"] = report.relative_throughput;
    row["flop_count"] = report.flop_count;
    row["memory_units"] = report.memory_units;
    row["peak_resident_bytes"] = report.peak_resident_bytes;
    output["reports"].push_back(row);
  }
  output["score_stage_cross_check"] = closed_forms;
  std::cout << output.dump(2) << "\n";

  if (!out_dir.empty()) {
    fs::create_directories(out_dir);
    std::ofstream csv_file(fs::path(out_dir) / "profile.csv", std::ios::binary);
    csv_file << csv.str();
    std::ofstream json_file(fs::path(out_dir) / "profile.json", std::ios::binary);
    json_file << output.dump(2) << "\n";
  }
  return cli::kExitOk;
}

int cmd_sweep(const std::string& config_path, const std::string& grid_spec,
              const std::string& out_dir) {
  const cli::RunConfig base = load_config_or_default(config_path);
  const SweepGrid grid = parse_grid(grid_spec);
  fs::create_directories(out_dir);

  // cartesian expansion, lexicographic (first axis outermost)
  std::vector<std::vector<double>> points;
  std::vector<double> current(grid.names.size());
  std::function<void(std::size_t)> expand = [&](std::size_t axis) {
    if (axis == grid.names.size()) {
      points.push_back(current);
      return;
    }
    for (double v : grid.values[axis]) {
      current[axis] = v;
      expand(axis + 1);
    }
  };
  expand(0);

  // the defaults point rides along in every sweep
  std::vector<double> default_point(grid.names.size());
  for (std::size_t i = 0; i < grid.names.size(); ++i) {
    default_point[i] = sweep_axis_value(base, grid.names[i]);
  }
  bool default_in_grid = false;
  for (const auto& point : points) default_in_grid |= point == default_point;
  if (!default_in_grid) points.push_back(default_point);

  struct RowResult {
    cli::TrainResult train;
    bool ok = false;
    std::string error;
  };
  std::vector<RowResult> results(points.size());

  std::atomic<std::size_t> next{0};
  const std::size_t n_workers = std::min(worker_threads(), points.size());
  auto worker = [&]() {
    for (;;) {
      const std::size_t i = next.fetch_add(1);
      if (i >= points.size()) return;
      cli::RunConfig config = base;
      for (std::size_t a = 0; a < grid.names.size(); ++a) {
        apply_axis(config, grid.names[a], points[i][a]);
      }
      config.seed = base.seed + i;  // deterministic per-point offset
      char dirname[32];
      std::snprintf(dirname, sizeof(dirname), "sweep_%03zu", i);
      config.out_dir = (fs::path(out_dir) / dirname).string();
      try {
        results[i].train = cli::train_run(config);
        results[i].ok = true;
      } catch (const std::exception& err) {
        results[i].error = err.what();
      }
    }
  };
  std::vector<std::thread> threads;
  for (std::size_t w = 0; w + 1 < n_workers; ++w) threads.emplace_back(worker);
  worker();
  for (std::thread& t : threads) t.join();

  std::ofstream summary(fs::path(out_dir) / "summary.csv", std::ios::binary);
  summary << "index";
  for (const std::string& name : grid.names) summary << ',' << name;
  summary << ",is_default,eval_accuracy,retention_recall,final_lambda,"
             "final_violation,ok\n";
  for (std::size_t i = 0; i < points.size(); ++i) {
    summary << i;
    for (double v : points[i]) summary << ',' << cli::format_double(v);
    summary << ',' << (points[i] == default_point ? 1 : 0);
    summary << ',' << cli::format_double(results[i].train.final_accuracy) << ','
            << cli::format_double(results[i].train.final_recall) << ','
            << cli::format_double(results[i].train.final_lambda) << ','
            << cli::format_double(results[i].train.final_violation) << ','
            << (results[i].ok ? 1 : 0) << "\n";
  }
  std::cout << "sweep: " << points.size() << " runs complete, summary at "
            << (fs::path(out_dir) / "summary.csv").string() << "\n";
  for (const RowResult& row : results) {
    if (!row.ok) {
      std::cerr << "sweep: run failed: " << row.error << "\n";
      return cli::kExitNumericAbort;
    }
  }
  return cli::kExitOk;
}

int cmd_verify(std::vector<std::string> suites, std::uint64_t seed,
               const std::string& out_path) {
  if (suites.empty() ||
      (suites.size() == 1 && (suites[0] == "all" || suites[0] == "full"))) {
    suites = verify::suite_names();
  }
  std::vector<verify::SuiteReport> reports;
  for (const std::string& name : suites) {
    verify::SuiteReport report = verify::run_suite(name, seed);
    std::cout << "suite " << report.name << ": "
              << (report.pass ? "PASS" : "FAIL") << " ("
              << report.checks.size() << " checks, " << report.seconds << "s)\n";
    for (const verify::Check& check : report.checks) {
      if (!check.pass) {
        std::cout << "  FAIL " << check.name << ": " << check.value << " "
                  << check.comparison << " " << check.threshold << "\n";
      }
    }
    reports.push_back(std::move(report));
  }
  const json report_json = verify::report_to_json(reports);
  std::string schema_error;
  if (!verify::validate_report_json(report_json, &schema_error)) {
    std::cerr << "verify: report failed schema validation: " << schema_error
              << "\n";
    return cli::kExitVerifyFailure;
  }
  if (!out_path.empty()) {
    std::ofstream out(out_path, std::ios::binary);
    out << report_json.dump(2) << "\n";
  } else {
    std::cout << report_json.dump(2) << "\n";
  }
  return report_json.at("pass").get<bool>() ? cli::kExitOk
                                            : cli::kExitVerifyFailure;
}

int cmd_ingest(const std::string& input, const std::string& output,
               const std::string& vocab_out, const std::string& vocab_in) {
  std::map<std::string, int> fixed;
  const bool use_fixed = !vocab_in.empty();
  if (use_fixed) {
    std::ifstream in(vocab_in);
    if (!in) throw cli::DataError("ingest: cannot open vocab " + vocab_in);
    json j;
    in >> j;
    for (const auto& [token, id] : j.items()) fixed[token] = id.get<int>();
  }
  const cli::IngestResult result =
      cli::ingest_jsonl(input, use_fixed ? &fixed : nullptr);
  data::write_jsonl(result.dataset, output);
  if (!vocab_out.empty()) {
    json j = json::object();
    for (const auto& [token, id] : result.vocab) j[token] = id;
    std::ofstream out(vocab_out, std::ios::binary);
    out << j.dump(2) << "\n";
  }
  std::cout << "ingest: " << result.dataset.size() << " examples, vocab "
            << result.vocab.size() << " tokens";
  if (result.empty_text_warnings > 0) {
    std::cout << " (warning: " << result.empty_text_warnings
              << " empty-text lines mapped to a single pad token)";
  }
  std::cout << "\n";
  return cli::kExitOk;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Budgeted probabilistic token retention lab"};
  app.require_subcommand(1);

  std::string config_path, out_path, data_path, checkpoint_path;
  std::string budgets = "0.5";
  std::uint64_t seed = 0;
  bool has_seed = false;

  auto* train = app.add_subcommand("train", "Train a retention model");
  train->add_option("--config", config_path, "Run config JSON");
  auto* seed_opt = train->add_option("--seed", seed, "Seed override");
  train->add_option("--out", out_path, "Output directory override");

  auto* eval = app.add_subcommand("eval", "Evaluate a checkpoint");
  eval->add_option("--checkpoint", checkpoint_path, "Checkpoint path")->required();
  eval->add_option("--data", data_path, "JSONL dataset");
  eval->add_option("--config", config_path, "Run config (cross-check + data)");
  eval->add_option("--budget", budgets, "Comma-separated retention ratios");
  eval->add_option("--out", out_path, "Write eval JSON here");

  std::size_t t_len = 512, batch_size = 4, warmup = 3, timed = 10;
  double rho = 0.3;
  auto* profile = app.add_subcommand("profile", "Measure throughput and costs");
  profile->add_option("--config", config_path, "Run config JSON");
  profile->add_option("--t-len", t_len, "Sequence length");
  profile->add_option("--batch-size", batch_size, "Sequences per batch");
  profile->add_option("--warmup", warmup, "Warmup batches");
  profile->add_option("--timed", timed, "Timed batches");
  profile->add_option("--budget", rho, "Retention ratio for the pruned run");
  profile->add_option("--out", out_path, "Output directory");

  std::string grid_spec;
  auto* sweep = app.add_subcommand("sweep", "Hyperparameter sweep");
  sweep->add_option("--config", config_path, "Base run config JSON");
  sweep->add_option("--grid", grid_spec, "name=v1,v2;name2=v3,... grid spec")
      ->required();
  sweep->add_option("--out", out_path, "Sweep output directory")->required();

  std::vector<std::string> suites;
  auto* verify_cmd = app.add_subcommand("verify", "Run verification suites");
  verify_cmd->add_option("--suite", suites,
                         "Suite names (default: all). Known: gradients, "
                         "unbiasedness, variance, convergence, certificates");
  verify_cmd->add_option("--seed", seed, "Suite seed");
  verify_cmd->add_option("--out", out_path, "Write JSON report here");

  std::string vocab_out, vocab_in, ingest_out;
  auto* ingest = app.add_subcommand("ingest", "Tokenize a text JSONL dataset");
  ingest->add_option("--input", data_path, "Input JSONL")->required();
  ingest->add_option("--out", ingest_out, "Tokenized JSONL output")->required();
  ingest->add_option("--vocab-out", vocab_out, "Write vocabulary JSON");
  ingest->add_option("--use-vocab", vocab_in, "Fixed vocabulary JSON");

  CLI11_PARSE(app, argc, argv);
  has_seed = seed_opt->count() > 0;

  try {
    if (train->parsed()) return cmd_train(config_path, seed, has_seed, out_path);
    if (eval->parsed()) {
      return cmd_eval(checkpoint_path, data_path, config_path, budgets, out_path);
    }
    if (profile->parsed()) {
      return cmd_profile(config_path, t_len, batch_size, warmup, timed, rho,
                         out_path);
    }
    if (sweep->parsed()) return cmd_sweep(config_path, grid_spec, out_path);
    if (verify_cmd->parsed()) {
      return cmd_verify(suites, verify_cmd->count("--seed") > 0 ? seed : 1,
                        out_path);
    }
    if (ingest->parsed()) {
      return cmd_ingest(data_path, ingest_out, vocab_out, vocab_in);
    }
  } catch (const cli::ConfigError& err) {
    std::cerr << err.what() << "\n";
    return cli::kExitConfigError;
  } catch (const cli::DataError& err) {
    std::cerr << err.what() << "\n";
    return cli::kExitDataError;
  } catch (const cli::NumericAbort& err) {
    std::cerr << err.what() << "\n";
    return cli::kExitNumericAbort;
  } catch (const std::exception& err) {
    std::cerr << "error: " << err.what() << "\n";
    return 1;
  }
  return cli::kExitOk;
}
