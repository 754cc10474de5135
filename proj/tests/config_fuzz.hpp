#pragma once

#include "retlab/config.hpp"
#include "retlab/rng.hpp"

// Random valid RunConfig generator shared by the round-trip property tests.

namespace retlab::testutil {

inline cli::RunConfig random_config(rng::Stream& stream) {
  cli::RunConfig config;
  config.seed = stream.next_u64() % 100000;
  config.out_dir = "runs/case_" + std::to_string(stream.next_below(1000));
  config.encoder.num_layers = 1 + stream.next_below(4);
  config.encoder.num_heads = 1 + stream.next_below(4);
  config.encoder.model_dim = config.encoder.num_heads * (2 + stream.next_below(6));
  config.encoder.ff_dim = 8 + stream.next_below(64);
  config.encoder.vocab_size = 16 + stream.next_below(100);
  config.encoder.max_seq_len = 8 + stream.next_below(120);
  config.encoder.num_classes = 2 + stream.next_below(6);
  config.encoder.retention_mode = stream.next_below(2) == 0
                                      ? enc::RetentionMode::layer_wise
                                      : enc::RetentionMode::output_gating;
  const std::size_t mode = stream.next_below(3);
  config.encoder.schedule_mode = mode == 0   ? enc::ScheduleMode::uniform_global
                                 : mode == 1 ? enc::ScheduleMode::geometric
                                             : enc::ScheduleMode::linear_decay;
  config.encoder.rho = stream.next_uniform(0.1, 1.0);
  config.encoder.schedule_r_start = stream.next_uniform(0.3, 0.9);
  config.encoder.schedule_r_end = stream.next_uniform(0.1, 0.5);
  config.encoder.decay_gamma = stream.next_uniform(0.0, 1.0);
  config.encoder.pooling = stream.next_below(2) == 0
                               ? enc::Pooling::mean_over_retained
                               : enc::Pooling::first_retained;
  config.budget.mode = stream.next_below(2) == 0 ? lagr::BudgetConfig::Mode::ratio
                                                 : lagr::BudgetConfig::Mode::absolute;
  config.budget.value = config.budget.mode == lagr::BudgetConfig::Mode::ratio
                            ? stream.next_uniform(0.05, 1.0)
                            : stream.next_uniform(1.0, 64.0);
  config.budget.eta = stream.next_uniform(1e-4, 0.5);
  config.budget.lambda_init = stream.next_uniform(0.0, 1.0);
  config.hard_concrete.beta = stream.next_uniform(0.1, 2.0);
  config.hard_concrete.stretch_low = stream.next_uniform(-0.5, -0.01);
  config.hard_concrete.stretch_high = stream.next_uniform(1.01, 1.5);
  config.optimizer.kind =
      stream.next_below(2) == 0 ? cli::OptimizerKind::sgd : cli::OptimizerKind::adamw;
  config.optimizer.learning_rate = stream.next_uniform(1e-5, 0.5);
  config.optimizer.momentum = stream.next_uniform(0.0, 0.99);
  config.optimizer.weight_decay = stream.next_uniform(0.0, 0.1);
  config.optimizer.batch_size = 1 + stream.next_below(64);
  config.optimizer.epochs = 1 + stream.next_below(10);
  config.optimizer.gate_warmup_steps = stream.next_below(500);
  config.optimizer.clip_norm = stream.next_uniform(0.0, 5.0);
  config.optimizer.label_smoothing = stream.next_uniform(0.0, 0.3);
  config.data.train_path = stream.next_below(2) == 0 ? "" : "data/custom.jsonl";
  config.data.needle.seq_len = 8 + stream.next_below(56);
  config.data.needle.num_needles = 1 + stream.next_below(4);
  config.data.needle.num_classes = 2 + stream.next_below(4);
  config.data.needle.vocab_size = 32 + stream.next_below(64);
  config.data.n_train = 10 + stream.next_below(5000);
  config.data.n_valid = 10 + stream.next_below(1000);
  config.baseline =
      stream.next_below(2) == 0 ? cli::BaselineMode::none : cli::BaselineMode::random;
  config.log_interval = 1 + stream.next_below(100);
  return config;
}

}  // namespace retlab::testutil
