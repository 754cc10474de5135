#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "retlab/gate.hpp"
#include "retlab/kernels.hpp"
#include "retlab/tensor.hpp"

// Small transformer encoder with per-token retention gates. Training applies
// relaxed gates as a soft mask (no token removal); inference prunes tokens
// layer-wise with deterministic top-M selection, so the active sequence
// shrinks with depth.

namespace retlab::enc {

enum class RetentionMode { output_gating, layer_wise };
enum class ScheduleMode { uniform_global, geometric, linear_decay };
enum class Pooling { mean_over_retained, first_retained };

struct EncoderConfig {
  std::size_t num_layers = 2;
  std::size_t model_dim = 32;
  std::size_t num_heads = 2;
  std::size_t ff_dim = 128;
  std::size_t vocab_size = 64;
  std::size_t max_seq_len = 64;
  std::size_t num_classes = 4;
  RetentionMode retention_mode = RetentionMode::layer_wise;
  ScheduleMode schedule_mode = ScheduleMode::uniform_global;
  double rho = 0.5;
  double schedule_r_start = 0.452;
  double schedule_r_end = 0.385;
  double decay_gamma = 0.9;
  Pooling pooling = Pooling::mean_over_retained;

  void validate() const;
  bool operator==(const EncoderConfig&) const = default;
};

// Per-gating-point retained counts for a sequence of length t_len. Every
// count is at least 1 (empty attention is degenerate).
std::vector<std::size_t> retention_schedule(std::size_t t_len,
                                            const EncoderConfig& config);
std::vector<std::size_t> retention_schedule(std::size_t t_len,
                                            const EncoderConfig& config,
                                            double rho_override);

struct GateOverride {
  enum class Kind { none, ones, zeros, fixed };
  Kind kind = Kind::none;
  // One gate vector per gating point when kind == fixed.
  const std::vector<std::vector<double>>* fixed = nullptr;
};

struct TrainForward {
  ad::Tensor task_loss;               // scalar, on tape
  ad::Tensor logits;                  // 1 x num_classes
  std::vector<ad::Tensor> p_layers;   // keep probabilities per gating point
  std::vector<ad::Tensor> gates;      // applied gate vectors per gating point
};

struct InferResult {
  int prediction = -1;
  std::vector<double> class_logits;
  // Active token count after each gating point.
  std::vector<std::size_t> retained_counts;
  // Original positions still alive after the final gating point.
  std::vector<std::size_t> final_active;
  std::vector<double> thresholds;  // top-M threshold per gating point
  // Attention score-stage MACs per layer; filled when a MAC counter is
  // installed on the encoder.
  std::vector<std::uint64_t> score_macs_per_layer;
};

class Encoder {
 public:
  Encoder(EncoderConfig config, std::uint64_t seed);

  const EncoderConfig& config() const { return config_; }
  std::size_t gating_points() const;

  // Name -> tensor, fixed order; shared with the optimizer and checkpoints.
  std::vector<std::pair<std::string, ad::Tensor>>& parameters() { return params_; }
  const std::vector<std::pair<std::string, ad::Tensor>>& parameters() const {
    return params_;
  }
  ad::Tensor parameter(const std::string& name) const;
  void set_parameter_data(const std::string& name, const std::vector<double>& data);

  // Training forward: soft gating, cross-entropy loss, everything on tape.
  // Uniform draws for the Hard-Concrete gates are keyed by
  // (seed, step, example, gating point, token).
  TrainForward forward_train(ad::Tape& tape, const std::vector<int>& tokens,
                             int label, const gate::HardConcreteParams& hc,
                             std::uint64_t sample_seed, std::uint64_t step,
                             std::uint64_t example,
                             const GateOverride& override_gates = {},
                             double label_smoothing = 0.0) const;

  // Gate-free forward (no scorer, unit pooling weights); the reference the
  // mask-identity invariant compares against.
  ad::Tensor forward_plain_logits(ad::Tape& tape,
                                  const std::vector<int>& tokens) const;

  // Inference with layer-wise pruning at the given target ratio. Never
  // samples; selection is deterministic top-M.
  InferResult forward_infer(const std::vector<int>& tokens, double rho) const;

  // Gate-free inference (dense forward, argmax head).
  InferResult forward_infer_ungated(const std::vector<int>& tokens) const;

  // Standard encoder block. When kv_indices is given, keys and values are
  // restricted to those rows while all tokens query (the mixed full-sparse
  // attention regime).
  ad::Tensor attention_block(ad::Tape& tape, const ad::Tensor& hidden,
                             std::size_t layer,
                             const std::vector<std::size_t>* kv_indices = nullptr) const;

  // MAC counter fed by the attention score stage (q . k products only).
  void set_score_mac_counter(kernels::MacCounter* counter) {
    score_macs_ = counter;
  }

  const gate::ScorerParams& scorer(std::size_t gating_point) const;

 private:
  EncoderConfig config_;
  std::vector<std::pair<std::string, ad::Tensor>> params_;
  std::vector<gate::ScorerParams> scorers_;
  ad::Tensor positional_;  // max_seq_len x d, fixed sinusoidal
  kernels::MacCounter* score_macs_ = nullptr;

  ad::Tensor embed(ad::Tape& tape, const std::vector<int>& tokens) const;
  ad::Tensor pooled_head_logits(ad::Tape& tape, const ad::Tensor& gated_hidden,
                                std::size_t original_t_len) const;
  ad::Tensor feed_forward(ad::Tape& tape, const ad::Tensor& hidden,
                          std::size_t layer) const;
  // block output read through the gating point's layer norm; what the
  // scorer actually sees
  ad::Tensor scorer_input(ad::Tape& tape, const ad::Tensor& hidden,
                          std::size_t gating_point) const;
  void register_param(const std::string& name, ad::Tensor t);
};

}  // namespace retlab::enc
