#include "retlab/config.hpp"

#include <fstream>
#include <set>
#include <sstream>

namespace retlab::cli {

using nlohmann::json;

namespace {

void reject_unknown_keys(const json& j, const std::set<std::string>& allowed,
                         const std::string& path) {
  if (!j.is_object()) {
    throw ConfigError("config: " + path + " must be an object");
  }
  for (const auto& [key, value] : j.items()) {
    if (allowed.find(key) == allowed.end()) {
      throw ConfigError("config: unknown field \"" + path + key + "\"");
    }
  }
}

template <typename T>
T field_or(const json& j, const std::string& key, const T& fallback) {
  if (!j.contains(key)) return fallback;
  return j.at(key).get<T>();
}

std::string retention_mode_name(enc::RetentionMode mode) {
  return mode == enc::RetentionMode::layer_wise ? "layer_wise" : "output_gating";
}

enc::RetentionMode retention_mode_from(const std::string& name,
                                       const std::string& path) {
  if (name == "layer_wise") return enc::RetentionMode::layer_wise;
  if (name == "output_gating") return enc::RetentionMode::output_gating;
  throw ConfigError("config: " + path + ": unknown retention_mode \"" + name +
                    "\"");
}

std::string schedule_mode_name(enc::ScheduleMode mode) {
  switch (mode) {
    case enc::ScheduleMode::uniform_global:
      return "uniform_global";
    case enc::ScheduleMode::geometric:
      return "geometric";
    case enc::ScheduleMode::linear_decay:
      return "linear_decay";
  }
  return "uniform_global";
}

enc::ScheduleMode schedule_mode_from(const std::string& name,
                                     const std::string& path) {
  if (name == "uniform_global") return enc::ScheduleMode::uniform_global;
  if (name == "geometric") return enc::ScheduleMode::geometric;
  if (name == "linear_decay") return enc::ScheduleMode::linear_decay;
  throw ConfigError("config: " + path + ": unknown schedule_mode \"" + name +
                    "\"");
}

std::string pooling_name(enc::Pooling pooling) {
  return pooling == enc::Pooling::mean_over_retained ? "mean_over_retained"
                                                     : "first_retained";
}

enc::Pooling pooling_from(const std::string& name, const std::string& path) {
  if (name == "mean_over_retained") return enc::Pooling::mean_over_retained;
  if (name == "first_retained") return enc::Pooling::first_retained;
  throw ConfigError("config: " + path + ": unknown pooling \"" + name + "\"");
}

}  // namespace

void RunConfig::validate() const {
  encoder.validate();
  budget.validate();
  hard_concrete.validate();
  if (optimizer.learning_rate <= 0.0) {
    throw ConfigError("config: optimizer.learning_rate must be positive");
  }
  if (optimizer.batch_size == 0 || optimizer.epochs == 0) {
    throw ConfigError("config: optimizer.batch_size and epochs must be positive");
  }
  if (log_interval == 0) throw ConfigError("config: log_interval must be positive");
  if (data.train_path.empty()) {
    data.needle.validate();
    if (data.needle.seq_len > encoder.max_seq_len) {
      throw ConfigError("config: needle seq_len exceeds encoder max_seq_len");
    }
    if (data.needle.vocab_size > encoder.vocab_size) {
      throw ConfigError("config: needle vocab exceeds encoder vocab");
    }
    if (data.needle.num_classes != encoder.num_classes) {
      throw ConfigError("config: needle classes differ from encoder classes");
    }
  }
}

json encoder_config_to_json(const enc::EncoderConfig& config) {
  json j;
  j["num_layers"] = config.num_layers;
  j["model_dim"] = config.model_dim;
  j["num_heads"] = config.num_heads;
  j["ff_dim"] = config.ff_dim;
  j["vocab_size"] = config.vocab_size;
  j["max_seq_len"] = config.max_seq_len;
  j["num_classes"] = config.num_classes;
  j["retention_mode"] = retention_mode_name(config.retention_mode);
  j["schedule_mode"] = schedule_mode_name(config.schedule_mode);
  j["rho"] = config.rho;
  j["schedule_endpoints"] = {config.schedule_r_start, config.schedule_r_end};
  j["decay_gamma"] = config.decay_gamma;
  j["pooling"] = pooling_name(config.pooling);
  return j;
}

enc::EncoderConfig encoder_config_from_json(const json& j,
                                            const std::string& path) {
  reject_unknown_keys(j,
                      {"num_layers", "model_dim", "num_heads", "ff_dim",
                       "vocab_size", "max_seq_len", "num_classes",
                       "retention_mode", "schedule_mode", "rho",
                       "schedule_endpoints", "decay_gamma", "pooling"},
                      path);
  enc::EncoderConfig config;
  config.num_layers = field_or<std::size_t>(j, "num_layers", config.num_layers);
  config.model_dim = field_or<std::size_t>(j, "model_dim", config.model_dim);
  config.num_heads = field_or<std::size_t>(j, "num_heads", config.num_heads);
  config.ff_dim = field_or<std::size_t>(j, "ff_dim", config.ff_dim);
  config.vocab_size = field_or<std::size_t>(j, "vocab_size", config.vocab_size);
  config.max_seq_len = field_or<std::size_t>(j, "max_seq_len", config.max_seq_len);
  config.num_classes = field_or<std::size_t>(j, "num_classes", config.num_classes);
  if (j.contains("retention_mode")) {
    config.retention_mode =
        retention_mode_from(j.at("retention_mode").get<std::string>(), path);
  }
  if (j.contains("schedule_mode")) {
    config.schedule_mode =
        schedule_mode_from(j.at("schedule_mode").get<std::string>(), path);
  }
  config.rho = field_or<double>(j, "rho", config.rho);
  if (j.contains("schedule_endpoints")) {
    const auto endpoints = j.at("schedule_endpoints").get<std::vector<double>>();
    if (endpoints.size() != 2) {
      throw ConfigError("config: " + path +
                        "schedule_endpoints must hold exactly two values");
    }
    config.schedule_r_start = endpoints[0];
    config.schedule_r_end = endpoints[1];
  }
  config.decay_gamma = field_or<double>(j, "decay_gamma", config.decay_gamma);
  if (j.contains("pooling")) {
    config.pooling = pooling_from(j.at("pooling").get<std::string>(), path);
  }
  return config;
}

json run_config_to_json(const RunConfig& config) {
  json j;
  j["seed"] = config.seed;
  j["out_dir"] = config.out_dir;
  j["encoder"] = encoder_config_to_json(config.encoder);

  json budget;
  budget["mode"] =
      config.budget.mode == lagr::BudgetConfig::Mode::ratio ? "ratio" : "absolute";
  budget["value"] = config.budget.value;
  budget["eta"] = config.budget.eta;
  budget["lambda_init"] = config.budget.lambda_init;
  j["budget"] = budget;

  json hc;
  hc["beta"] = config.hard_concrete.beta;
  hc["stretch_low"] = config.hard_concrete.stretch_low;
  hc["stretch_high"] = config.hard_concrete.stretch_high;
  j["hard_concrete"] = hc;

  json opt;
  opt["kind"] = config.optimizer.kind == OptimizerKind::sgd ? "sgd" : "adamw";
  opt["learning_rate"] = config.optimizer.learning_rate;
  opt["momentum"] = config.optimizer.momentum;
  opt["weight_decay"] = config.optimizer.weight_decay;
  opt["adam_beta1"] = config.optimizer.adam_beta1;
  opt["adam_beta2"] = config.optimizer.adam_beta2;
  opt["adam_eps"] = config.optimizer.adam_eps;
  opt["batch_size"] = config.optimizer.batch_size;
  opt["epochs"] = config.optimizer.epochs;
  opt["gate_warmup_steps"] = config.optimizer.gate_warmup_steps;
  opt["clip_norm"] = config.optimizer.clip_norm;
  opt["label_smoothing"] = config.optimizer.label_smoothing;
  j["optimizer"] = opt;

  json dat;
  dat["train_path"] = config.data.train_path;
  dat["valid_path"] = config.data.valid_path;
  json needle;
  needle["seq_len"] = config.data.needle.seq_len;
  needle["num_needles"] = config.data.needle.num_needles;
  needle["num_classes"] = config.data.needle.num_classes;
  needle["vocab_size"] = config.data.needle.vocab_size;
  needle["needles_per_class"] = config.data.needle.needles_per_class;
  dat["needle"] = needle;
  dat["n_train"] = config.data.n_train;
  dat["n_valid"] = config.data.n_valid;
  j["data"] = dat;

  j["baseline"] = config.baseline == BaselineMode::random ? "random" : "none";
  j["log_interval"] = config.log_interval;
  return j;
}

RunConfig run_config_from_json(const json& j) {
  reject_unknown_keys(j,
                      {"seed", "out_dir", "encoder", "budget", "hard_concrete",
                       "optimizer", "data", "baseline", "log_interval"},
                      "");
  RunConfig config;
  config.seed = field_or<std::uint64_t>(j, "seed", config.seed);
  config.out_dir = field_or<std::string>(j, "out_dir", config.out_dir);
  if (j.contains("encoder")) {
    config.encoder = encoder_config_from_json(j.at("encoder"), "encoder.");
  }
  if (j.contains("budget")) {
    const json& budget = j.at("budget");
    reject_unknown_keys(budget, {"mode", "value", "eta", "lambda_init"}, "budget.");
    if (budget.contains("mode")) {
      const std::string mode = budget.at("mode").get<std::string>();
      if (mode == "ratio") {
        config.budget.mode = lagr::BudgetConfig::Mode::ratio;
      } else if (mode == "absolute") {
        config.budget.mode = lagr::BudgetConfig::Mode::absolute;
      } else {
        throw ConfigError("config: budget.mode must be ratio or absolute");
      }
    }
    config.budget.value = field_or<double>(budget, "value", config.budget.value);
    config.budget.eta = field_or<double>(budget, "eta", config.budget.eta);
    config.budget.lambda_init =
        field_or<double>(budget, "lambda_init", config.budget.lambda_init);
  }
  if (j.contains("hard_concrete")) {
    const json& hc = j.at("hard_concrete");
    reject_unknown_keys(hc, {"beta", "stretch_low", "stretch_high"},
                        "hard_concrete.");
    config.hard_concrete.beta =
        field_or<double>(hc, "beta", config.hard_concrete.beta);
    config.hard_concrete.stretch_low =
        field_or<double>(hc, "stretch_low", config.hard_concrete.stretch_low);
    config.hard_concrete.stretch_high =
        field_or<double>(hc, "stretch_high", config.hard_concrete.stretch_high);
  }
  if (j.contains("optimizer")) {
    const json& opt = j.at("optimizer");
    reject_unknown_keys(opt,
                        {"kind", "learning_rate", "momentum", "weight_decay",
                         "adam_beta1", "adam_beta2", "adam_eps", "batch_size",
                         "epochs", "gate_warmup_steps", "clip_norm",
                         "label_smoothing"},
                        "optimizer.");
    if (opt.contains("kind")) {
      const std::string kind = opt.at("kind").get<std::string>();
      if (kind == "sgd") {
        config.optimizer.kind = OptimizerKind::sgd;
      } else if (kind == "adamw") {
        config.optimizer.kind = OptimizerKind::adamw;
      } else {
        throw ConfigError("config: optimizer.kind must be sgd or adamw");
      }
    }
    config.optimizer.learning_rate =
        field_or<double>(opt, "learning_rate", config.optimizer.learning_rate);
    config.optimizer.momentum =
        field_or<double>(opt, "momentum", config.optimizer.momentum);
    config.optimizer.weight_decay =
        field_or<double>(opt, "weight_decay", config.optimizer.weight_decay);
    config.optimizer.adam_beta1 =
        field_or<double>(opt, "adam_beta1", config.optimizer.adam_beta1);
    config.optimizer.adam_beta2 =
        field_or<double>(opt, "adam_beta2", config.optimizer.adam_beta2);
    config.optimizer.adam_eps =
        field_or<double>(opt, "adam_eps", config.optimizer.adam_eps);
    config.optimizer.batch_size =
        field_or<std::size_t>(opt, "batch_size", config.optimizer.batch_size);
    config.optimizer.epochs =
        field_or<std::size_t>(opt, "epochs", config.optimizer.epochs);
    config.optimizer.gate_warmup_steps = field_or<std::size_t>(
        opt, "gate_warmup_steps", config.optimizer.gate_warmup_steps);
    config.optimizer.clip_norm =
        field_or<double>(opt, "clip_norm", config.optimizer.clip_norm);
    config.optimizer.label_smoothing = field_or<double>(
        opt, "label_smoothing", config.optimizer.label_smoothing);
  }
  if (j.contains("data")) {
    const json& dat = j.at("data");
    reject_unknown_keys(
        dat, {"train_path", "valid_path", "needle", "n_train", "n_valid"},
        "data.");
    config.data.train_path =
        field_or<std::string>(dat, "train_path", config.data.train_path);
    config.data.valid_path =
        field_or<std::string>(dat, "valid_path", config.data.valid_path);
    if (dat.contains("needle")) {
      const json& needle = dat.at("needle");
      reject_unknown_keys(needle,
                          {"seq_len", "num_needles", "num_classes", "vocab_size",
                           "needles_per_class"},
                          "data.needle.");
      config.data.needle.seq_len =
          field_or<std::size_t>(needle, "seq_len", config.data.needle.seq_len);
      config.data.needle.num_needles = field_or<std::size_t>(
          needle, "num_needles", config.data.needle.num_needles);
      config.data.needle.num_classes = field_or<std::size_t>(
          needle, "num_classes", config.data.needle.num_classes);
      config.data.needle.vocab_size = field_or<std::size_t>(
          needle, "vocab_size", config.data.needle.vocab_size);
      config.data.needle.needles_per_class = field_or<std::size_t>(
          needle, "needles_per_class", config.data.needle.needles_per_class);
    }
    config.data.n_train = field_or<std::size_t>(dat, "n_train", config.data.n_train);
    config.data.n_valid = field_or<std::size_t>(dat, "n_valid", config.data.n_valid);
  }
  if (j.contains("baseline")) {
    const std::string baseline = j.at("baseline").get<std::string>();
    if (baseline == "none") {
      config.baseline = BaselineMode::none;
    } else if (baseline == "random") {
      config.baseline = BaselineMode::random;
    } else {
      throw ConfigError("config: baseline must be none or random");
    }
  }
  config.log_interval =
      field_or<std::size_t>(j, "log_interval", config.log_interval);
  return config;
}

std::string serialize_run_config(const RunConfig& config) {
  return run_config_to_json(config).dump(2) + "\n";
}

RunConfig parse_run_config(const std::string& text) {
  json j;
  try {
    j = json::parse(text);
  } catch (const json::parse_error& err) {
    throw ConfigError(std::string("config: invalid JSON: ") + err.what());
  }
  return run_config_from_json(j);
}

RunConfig load_run_config(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("config: cannot open " + path);
  std::ostringstream buffer;
  buffer << in.rdbuf();
  return parse_run_config(buffer.str());
}

}  // namespace retlab::cli
