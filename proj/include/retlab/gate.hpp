#pragma once

#include <cstddef>
#include <vector>

#include "retlab/tensor.hpp"

// Retention scoring and gating: the gated scorer producing per-token keep
// probabilities, the Hard-Concrete relaxed sampler used during training, and
// the deterministic top-M selection used at inference.

namespace retlab::gate {

struct ScorerParams {
  // Stored in the orientation they are applied: score pre-activation is
  // H * w + M_prev * u (row per token).
  ad::Tensor w;            // d x d
  ad::Tensor u;            // d x d
  ad::Tensor v;            // d x 1
  ad::Tensor b;            // scalar
  double decay_gamma = 0.9;  // summary decay, fixed (not learned)
};

struct HardConcreteParams {
  double beta = 0.66;
  double stretch_low = -0.1;   // < 0
  double stretch_high = 1.1;   // > 1

  void validate() const;
  bool operator==(const HardConcreteParams&) const = default;
};

struct RetentionScores {
  ad::Tensor s;  // T logits, on tape
  ad::Tensor p;  // T probabilities sigmoid(s), on tape
  ad::Tensor m;  // T x d summary states m_1..m_T
};

enum class GateMode { relaxed, hard };

struct GateVector {
  ad::Tensor values;  // T gates; relaxed in [0,1] (on tape), hard in {0,1}
  GateMode mode = GateMode::relaxed;
};

struct TopMSelection {
  std::vector<double> gates;        // exactly M ones
  std::vector<std::size_t> indices; // selected positions, ascending
  double threshold;                 // the M-th largest probability
};

ScorerParams make_scorer_params(std::size_t dim, double decay_gamma,
                                std::uint64_t seed_key, bool requires_grad = true);

// m_t = gamma m_{t-1} + (1-gamma) h_t with m_0 = 0;
// s_t = v^T tanh(W h_t + U m_{t-1}) + b;  p_t = sigmoid(s_t).
RetentionScores score_tokens(ad::Tape& tape, const ad::Tensor& hidden,
                             const ScorerParams& params);

// Hard-Concrete relaxed gates: differentiable w.r.t. s, with u treated as
// constants. u values are clipped to [1e-12, 1-1e-12] before the log-odds
// transform; exact 0 or 1 inputs are rejected.
GateVector sample_hard_concrete(ad::Tape& tape, const ad::Tensor& s,
                                const std::vector<double>& u,
                                const HardConcreteParams& hc);

// Deterministic top-M: the M largest probabilities win, ties broken by the
// earlier position, so exactly M gates are set.
TopMSelection select_top_m(const std::vector<double>& p, std::size_t m);

// Sum of keep probabilities, on tape (the budget quantity of the Lagrangian).
ad::Tensor expected_retention(ad::Tape& tape, const ad::Tensor& p);

// Probability that the relaxed gate is strictly positive: sigmoid(s - beta *
// log(-stretch_low / stretch_high)). Diagnostic only; the budget uses
// sigmoid(s).
double active_probability(double s, const HardConcreteParams& hc);

// Scalar forward of the relaxed gate and its derivative w.r.t. s at fixed u.
double hard_concrete_value(double s, double u, const HardConcreteParams& hc);
double hard_concrete_dvalue_ds(double s, double u, const HardConcreteParams& hc);

}  // namespace retlab::gate
