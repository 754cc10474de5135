#include "retlab/train.hpp"

#include <algorithm>
#include <chrono>
#include <limits>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <sstream>

#include <json.hpp>

#include "retlab/checkpoint.hpp"
#include "retlab/lagrangian.hpp"
#include "retlab/rng.hpp"

namespace retlab::cli {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

// Random pruning baseline: token masking at the input to meet the budget.
// Masked positions are replaced by the pad id before any attention runs, so
// dropped information is unrecoverable. Returns the kept positions.
std::vector<std::size_t> mask_tokens_randomly(std::vector<int>& tokens,
                                              std::size_t keep,
                                              rng::Stream& stream) {
  const std::size_t t_len = tokens.size();
  std::vector<std::size_t> positions(t_len);
  for (std::size_t i = 0; i < t_len; ++i) positions[i] = i;
  for (std::size_t i = 0; i < keep; ++i) {
    const std::size_t j = i + stream.next_below(t_len - i);
    std::swap(positions[i], positions[j]);
  }
  std::vector<std::size_t> kept(positions.begin(), positions.begin() + keep);
  std::sort(kept.begin(), kept.end());
  std::vector<bool> keep_mask(t_len, false);
  for (std::size_t idx : kept) keep_mask[idx] = true;
  for (std::size_t i = 0; i < t_len; ++i) {
    if (!keep_mask[i]) tokens[i] = 0;  // pad id
  }
  return kept;
}

struct Optimizer {
  OptimizerConfig config;
  std::vector<std::vector<double>> slot1;  // momentum (sgd) or m (adamw)
  std::vector<std::vector<double>> slot2;  // v (adamw)
  std::size_t step = 0;

  explicit Optimizer(const OptimizerConfig& cfg,
                     const std::vector<std::pair<std::string, ad::Tensor>>& params)
      : config(cfg) {
    slot1.resize(params.size());
    slot2.resize(params.size());
    for (std::size_t i = 0; i < params.size(); ++i) {
      slot1[i].assign(params[i].second.size(), 0.0);
      if (config.kind == OptimizerKind::adamw) {
        slot2[i].assign(params[i].second.size(), 0.0);
      }
    }
  }

  void apply(std::vector<std::pair<std::string, ad::Tensor>>& params) {
    ++step;
    for (std::size_t i = 0; i < params.size(); ++i) {
      ad::Tensor& tensor = params[i].second;
      if (!tensor.has_grad()) continue;
      const std::vector<double>& grad = tensor.grad();
      std::vector<double>& weights = tensor.mutable_data();
      if (config.kind == OptimizerKind::sgd) {
        for (std::size_t j = 0; j < weights.size(); ++j) {
          const double g = grad[j] + config.weight_decay * weights[j];
          slot1[i][j] = config.momentum * slot1[i][j] + g;
          weights[j] -= config.learning_rate * slot1[i][j];
        }
      } else {
        const double bc1 = 1.0 - std::pow(config.adam_beta1, step);
        const double bc2 = 1.0 - std::pow(config.adam_beta2, step);
        for (std::size_t j = 0; j < weights.size(); ++j) {
          weights[j] -= config.learning_rate * config.weight_decay * weights[j];
          slot1[i][j] =
              config.adam_beta1 * slot1[i][j] + (1.0 - config.adam_beta1) * grad[j];
          slot2[i][j] = config.adam_beta2 * slot2[i][j] +
                        (1.0 - config.adam_beta2) * grad[j] * grad[j];
          const double mhat = slot1[i][j] / bc1;
          const double vhat = slot2[i][j] / bc2;
          weights[j] -= config.learning_rate * mhat / (std::sqrt(vhat) + config.adam_eps);
        }
      }
    }
  }
};

}  // namespace

EvalResult evaluate(const enc::Encoder& encoder, const data::Dataset& dataset,
                    const EvalOptions& options) {
  EvalResult result;
  result.n_examples = dataset.size();
  if (dataset.empty()) return result;

  std::size_t correct = 0;
  double recall_sum = 0.0;
  std::size_t recall_n = 0;
  for (std::size_t i = 0; i < dataset.size(); ++i) {
    const data::LabeledExample& ex = dataset[i];
    enc::InferResult infer;
    std::vector<std::size_t> retained;
    if (options.random_selection) {
      const auto keep = static_cast<std::size_t>(std::max(
          1.0, std::floor(options.rho * static_cast<double>(ex.tokens.size()))));
      std::vector<int> masked = ex.tokens;
      rng::Stream stream(rng::hash_key(options.selection_seed, 0xe5e1), i);
      retained = mask_tokens_randomly(masked, keep, stream);
      infer = encoder.forward_infer_ungated(masked);
    } else {
      infer = encoder.forward_infer(ex.tokens, options.rho);
      retained = infer.final_active;
    }
    if (infer.prediction == ex.label) ++correct;
    if (!ex.relevance.empty()) {
      recall_sum += data::retention_recall_indices(retained, ex.relevance);
      ++recall_n;
    }
  }
  result.accuracy = static_cast<double>(correct) / static_cast<double>(dataset.size());
  if (recall_n > 0) {
    result.has_recall = true;
    result.mean_recall = recall_sum / static_cast<double>(recall_n);
  }
  return result;
}

double ungated_accuracy(const enc::Encoder& encoder, const data::Dataset& dataset) {
  if (dataset.empty()) return 0.0;
  std::size_t correct = 0;
  for (const data::LabeledExample& ex : dataset) {
    if (encoder.forward_infer_ungated(ex.tokens).prediction == ex.label) ++correct;
  }
  return static_cast<double>(correct) / static_cast<double>(dataset.size());
}

void load_datasets(const RunConfig& config, data::Dataset& train,
                   data::Dataset& valid) {
  if (config.data.train_path.empty()) {
    train = data::generate_needle_dataset(config.data.needle, config.data.n_train,
                                          rng::hash_key(config.seed, 0x7a1));
    valid = data::generate_needle_dataset(config.data.needle, config.data.n_valid,
                                          rng::hash_key(config.seed, 0x7a2));
    return;
  }
  train = data::read_jsonl(config.data.train_path);
  if (!config.data.valid_path.empty()) {
    valid = data::read_jsonl(config.data.valid_path);
  } else {
    valid.clear();
  }
  if (train.empty()) {
    throw DataError("train: dataset at " + config.data.train_path + " is empty");
  }
}

TrainResult train_run(const RunConfig& config) {
  config.validate();
  fs::create_directories(config.out_dir);

  data::Dataset train_set, valid_set;
  load_datasets(config, train_set, valid_set);

  enc::Encoder encoder(config.encoder, config.seed);
  Optimizer optimizer(config.optimizer, encoder.parameters());
  lagr::LagrangeState dual;
  dual.lambda = config.budget.lambda_init;

  const std::string config_path = (fs::path(config.out_dir) / "config.json").string();
  {
    std::ofstream out(config_path, std::ios::binary);
    out << serialize_run_config(config);
  }
  const std::string checkpoint_path =
      (fs::path(config.out_dir) / "checkpoint.bin").string();
  const std::string csv_path = (fs::path(config.out_dir) / "metrics.csv").string();
  const std::string jsonl_path =
      (fs::path(config.out_dir) / "metrics.jsonl").string();
  MetricsWriter metrics(csv_path, jsonl_path);

  const std::size_t batch = config.optimizer.batch_size;
  const std::size_t batches_per_epoch =
      (train_set.size() + batch - 1) / batch;
  const std::size_t total_steps = batches_per_epoch * config.optimizer.epochs;

  const auto wall_start = std::chrono::steady_clock::now();
  TrainResult result;
  result.checkpoint_path = checkpoint_path;
  result.metrics_csv_path = csv_path;
  result.metrics_jsonl_path = jsonl_path;

  std::vector<std::size_t> order(train_set.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;

  std::size_t global_step = 0;
  save_checkpoint(checkpoint_path, encoder);  // last-good from step 0 on

  auto run_eval = [&](MetricsRecord& record) {
    EvalOptions options;
    options.rho = config.encoder.rho;
    options.random_selection = config.baseline == BaselineMode::random;
    options.selection_seed = rng::hash_key(config.seed, 0xeba1);
    const EvalResult eval = evaluate(encoder, valid_set, options);
    record.eval_accuracy = eval.accuracy;
    record.retention_recall = eval.mean_recall;
    result.final_accuracy = eval.accuracy;
    result.final_recall = eval.mean_recall;
  };

  try {
    for (std::size_t epoch = 0; epoch < config.optimizer.epochs; ++epoch) {
      // seeded Fisher-Yates shuffle per epoch
      rng::Stream shuffle(rng::hash_key(config.seed, 0x5f), epoch);
      for (std::size_t i = order.size(); i > 1; --i) {
        std::swap(order[i - 1], order[shuffle.next_below(i)]);
      }
      for (std::size_t b = 0; b < batches_per_epoch; ++b) {
        ++global_step;
        const std::size_t begin = b * batch;
        const std::size_t end = std::min(begin + batch, train_set.size());

        ad::Tape tape;
        ad::Tensor task_sum;
        ad::Tensor sum_p_total;
        double budget_total = 0.0;
        std::size_t n_points = 0;

        for (std::size_t idx = begin; idx < end; ++idx) {
          const data::LabeledExample& ex = train_set[order[idx]];
          const std::vector<std::size_t> schedule = enc::retention_schedule(
              ex.tokens.size(), config.encoder,
              config.budget.mode == lagr::BudgetConfig::Mode::ratio
                  ? config.budget.value
                  : std::min(1.0, config.budget.resolve(ex.tokens.size()) /
                                      static_cast<double>(ex.tokens.size())));

          const bool warming_up =
              global_step <= config.optimizer.gate_warmup_steps;
          enc::GateOverride override_gates;
          std::vector<int> tokens = ex.tokens;
          if (config.baseline == BaselineMode::random) {
            // input-level token masking to meet the budget; the learned
            // gating machinery stays out of the loss (gates forced open)
            override_gates.kind = enc::GateOverride::Kind::ones;
            if (!warming_up) {
              const std::size_t keep =
                  std::min(schedule[config.encoder.num_layers - 1], tokens.size());
              rng::Stream stream(rng::hash_key(config.seed, 0xba5e), global_step,
                                 order[idx]);
              mask_tokens_randomly(tokens, keep, stream);
            }
          } else if (warming_up) {
            override_gates.kind = enc::GateOverride::Kind::ones;
          }

          const enc::TrainForward forward = encoder.forward_train(
              tape, tokens, ex.label, config.hard_concrete, config.seed,
              global_step, order[idx], override_gates,
              config.optimizer.label_smoothing);

          task_sum = task_sum.defined() ? tape.add(task_sum, forward.task_loss)
                                        : forward.task_loss;
          for (std::size_t g = 0; g < forward.p_layers.size(); ++g) {
            const ad::Tensor sum_p = tape.sum(forward.p_layers[g]);
            sum_p_total =
                sum_p_total.defined() ? tape.add(sum_p_total, sum_p) : sum_p;
            const std::size_t point_layer =
                config.encoder.retention_mode == enc::RetentionMode::layer_wise
                    ? g
                    : config.encoder.num_layers - 1;
            budget_total += static_cast<double>(schedule[point_layer]);
            ++n_points;
          }
        }

        const double inv_examples = 1.0 / static_cast<double>(end - begin);
        const ad::Tensor task_mean = tape.scale(task_sum, inv_examples);
        const double mean_budget = budget_total / static_cast<double>(n_points);
        const ad::Tensor mean_sum_p =
            tape.scale(sum_p_total, 1.0 / static_cast<double>(n_points));
        const ad::Tensor violation = tape.add_const(mean_sum_p, -mean_budget);
        const ad::Tensor loss =
            tape.add(task_mean, tape.scale(violation, dual.lambda));

        for (auto& [name, tensor] : encoder.parameters()) tensor.zero_grad();
        tape.backward(loss);
        if (config.optimizer.clip_norm > 0.0) {
          double norm_sq = 0.0;
          for (const auto& [name, tensor] : encoder.parameters()) {
            if (!tensor.has_grad()) continue;
            for (double g : tensor.grad()) norm_sq += g * g;
          }
          const double norm = std::sqrt(norm_sq);
          if (norm > config.optimizer.clip_norm) {
            const double factor = config.optimizer.clip_norm / norm;
            for (auto& [name, tensor] : encoder.parameters()) {
              if (!tensor.has_grad()) continue;
              for (double& g : tensor.mutable_grad()) g *= factor;
            }
          }
        }
        optimizer.apply(encoder.parameters());

        // dual ascent after the primal step (alternating order); paused
        // while gates are warmed up
        if (global_step > config.optimizer.gate_warmup_steps &&
            config.baseline != BaselineMode::random) {
          lagr::ascend_lambda(dual, mean_sum_p.value(), mean_budget,
                              config.budget.eta, global_step);
        }

        result.final_violation = violation.value();
        result.mean_budget_per_point = mean_budget;

        if (global_step % config.log_interval == 0 || global_step == total_steps) {
          MetricsRecord record;
          record.step = global_step;
          record.task_loss = task_mean.value();
          record.lagrangian = loss.value();
          record.lambda = dual.lambda;
          record.expected_retention = mean_sum_p.value();
          record.budget_violation = violation.value();
          run_eval(record);
          record.wall_seconds = std::chrono::duration<double>(
                                    std::chrono::steady_clock::now() - wall_start)
                                    .count();
          metrics.append(record);
          save_checkpoint(checkpoint_path, encoder);
        }
      }
    }
  } catch (const ad::NumericError& err) {
    // last-good checkpoint is already on disk; record the diagnostic
    std::ofstream diag((fs::path(config.out_dir) / "abort.json").string());
    json j;
    j["error"] = err.what();
    j["step"] = global_step;
    diag << j.dump(2) << "\n";
    throw NumericAbort(std::string("train: non-finite value at step ") +
                       std::to_string(global_step) + ": " + err.what());
  }

  save_checkpoint(checkpoint_path, encoder);
  result.steps = global_step;
  result.final_lambda = dual.lambda;
  return result;
}

IngestResult ingest_jsonl(const std::string& path,
                          const std::map<std::string, int>* fixed_vocab) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("ingest: cannot open " + path);

  IngestResult result;
  if (fixed_vocab != nullptr) result.vocab = *fixed_vocab;
  int next_id = 2;
  for (const auto& [token, id] : result.vocab) next_id = std::max(next_id, id + 1);

  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty()) continue;
    json parsed;
    try {
      parsed = json::parse(line);
    } catch (const json::parse_error& err) {
      throw DataError("ingest: " + path + ":" + std::to_string(line_no) + ": " +
                      err.what());
    }
    data::LabeledExample ex;
    if (parsed.contains("tokens")) {
      ex.tokens = parsed.at("tokens").get<std::vector<int>>();
      ex.label = parsed.at("label").get<int>();
      if (parsed.contains("relevance")) {
        ex.relevance = parsed.at("relevance").get<std::vector<int>>();
      }
    } else if (parsed.contains("text")) {
      if (!parsed.contains("label")) {
        throw DataError("ingest: " + path + ":" + std::to_string(line_no) +
                        ": missing label");
      }
      ex.label = parsed.at("label").get<int>();
      if (ex.label < 0) {
        throw DataError("ingest: " + path + ":" + std::to_string(line_no) +
                        ": negative label");
      }
      const std::string text = parsed.at("text").get<std::string>();
      std::istringstream words(text);
      std::string word;
      while (words >> word) {
        auto it = result.vocab.find(word);
        if (it == result.vocab.end()) {
          if (fixed_vocab != nullptr) {
            ex.tokens.push_back(1);  // oov
            continue;
          }
          it = result.vocab.emplace(word, next_id++).first;
        }
        ex.tokens.push_back(it->second);
      }
      if (ex.tokens.empty()) {
        ex.tokens.push_back(0);  // pad
        ++result.empty_text_warnings;
      }
    } else {
      throw DataError("ingest: " + path + ":" + std::to_string(line_no) +
                      ": expected text or tokens field");
    }
    result.dataset.push_back(std::move(ex));
  }
  return result;
}

}  // namespace retlab::cli
