#pragma once

#include <cstdint>
#include <stdexcept>
#include <string>

#include <json.hpp>

#include "retlab/encoder.hpp"
#include "retlab/gate.hpp"
#include "retlab/lagrangian.hpp"
#include "retlab/needle.hpp"

// Run configuration: strict JSON schema (unknown fields rejected), lossless
// round-trip, defaults mirroring the training recipe scaled to desk tasks.

namespace retlab::cli {

class ConfigError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class DataError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Exit codes of the CLI.
enum ExitCode {
  kExitOk = 0,
  kExitConfigError = 2,
  kExitDataError = 3,
  kExitVerifyFailure = 4,
  kExitNumericAbort = 5,
};

enum class OptimizerKind { sgd, adamw };
enum class BaselineMode { none, random };

struct OptimizerConfig {
  OptimizerKind kind = OptimizerKind::sgd;
  double learning_rate = 0.05;
  double momentum = 0.9;
  double weight_decay = 0.0;
  double adam_beta1 = 0.9;
  double adam_beta2 = 0.999;
  double adam_eps = 1e-8;
  std::size_t batch_size = 32;
  std::size_t epochs = 3;
  // steps with gates forced open and the dual update paused, so the task
  // head is informative before pruning pressure starts
  std::size_t gate_warmup_steps = 150;
  // global gradient-norm clip; 0 disables
  double clip_norm = 1.0;
  // caps head confidence so gate noise cannot produce catastrophic losses
  double label_smoothing = 0.1;

  bool operator==(const OptimizerConfig&) const = default;
};

struct DataConfig {
  // When train_path is empty the needle generator below supplies the data.
  std::string train_path;
  std::string valid_path;
  data::NeedleConfig needle;
  std::size_t n_train = 2000;
  std::size_t n_valid = 500;

  bool operator==(const DataConfig&) const = default;
};

struct RunConfig {
  std::uint64_t seed = 7;
  std::string out_dir = "runs/out";
  enc::EncoderConfig encoder;
  lagr::BudgetConfig budget;
  gate::HardConcreteParams hard_concrete;
  OptimizerConfig optimizer;
  DataConfig data;
  BaselineMode baseline = BaselineMode::none;
  std::size_t log_interval = 50;

  bool operator==(const RunConfig&) const = default;
  void validate() const;
};

nlohmann::json encoder_config_to_json(const enc::EncoderConfig& config);
enc::EncoderConfig encoder_config_from_json(const nlohmann::json& j,
                                            const std::string& path);

nlohmann::json run_config_to_json(const RunConfig& config);
RunConfig run_config_from_json(const nlohmann::json& j);

std::string serialize_run_config(const RunConfig& config);
RunConfig parse_run_config(const std::string& text);
RunConfig load_run_config(const std::string& path);

}  // namespace retlab::cli
