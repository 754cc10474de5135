#include "retlab/gate.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <stdexcept>

#include "retlab/rng.hpp"

namespace retlab::gate {

namespace {

double stable_sigmoid(double x) {
  return x >= 0.0 ? 1.0 / (1.0 + std::exp(-x))
                  : std::exp(x) / (1.0 + std::exp(x));
}

constexpr double kUnitClip = 1e-12;

}  // namespace

void HardConcreteParams::validate() const {
  if (beta <= 0.0) {
    throw ad::ContractError("hard concrete: beta must be positive");
  }
  if (!(stretch_low < 0.0) || !(stretch_high > 1.0)) {
    throw ad::ContractError(
        "hard concrete: stretch parameters must satisfy low < 0 < 1 < high");
  }
}

ScorerParams make_scorer_params(std::size_t dim, double decay_gamma,
                                std::uint64_t seed_key, bool requires_grad) {
  if (decay_gamma < 0.0 || decay_gamma > 1.0) {
    throw ad::ContractError("scorer: decay_gamma must lie in [0, 1]");
  }
  rng::Stream stream(seed_key, 0x5c0e);
  const double bound = std::sqrt(6.0 / static_cast<double>(dim + dim));
  auto init = [&](std::size_t n) {
    std::vector<double> v(n);
    for (double& x : v) x = stream.next_uniform(-bound, bound);
    return v;
  };
  ScorerParams params;
  params.w = ad::Tensor::from_data({dim, dim}, init(dim * dim), requires_grad);
  params.u = ad::Tensor::from_data({dim, dim}, init(dim * dim), requires_grad);
  params.v = ad::Tensor::from_data({dim, 1}, init(dim), requires_grad);
  // gates start open: the task head trains on near-dense pooling until the
  // budget term pulls scores down
  params.b = ad::Tensor::from_data({1}, {2.0}, requires_grad);
  params.decay_gamma = decay_gamma;
  return params;
}

RetentionScores score_tokens(ad::Tape& tape, const ad::Tensor& hidden,
                             const ScorerParams& params) {
  const std::size_t t_len = hidden.rows();
  const std::size_t dim = hidden.cols();
  if (params.w.rows() != dim || params.u.rows() != dim || params.v.rows() != dim) {
    throw ad::ShapeError("score_tokens: parameter dimension does not match " +
                         ad::shape_to_string(hidden.shape()));
  }
  const double gamma = params.decay_gamma;

  // Summary recurrence m_t = gamma m_{t-1} + (1-gamma) h_t, m_0 = 0.
  // m_prev collects m_0..m_{T-1} (the state seen by token t).
  std::vector<ad::Tensor> prev_rows, cur_rows;
  prev_rows.reserve(t_len);
  cur_rows.reserve(t_len);
  ad::Tensor m_row = ad::Tensor::zeros({1, dim});
  for (std::size_t t = 0; t < t_len; ++t) {
    prev_rows.push_back(m_row);
    const ad::Tensor h_row = tape.slice_rows(hidden, t, 1);
    m_row = tape.add(tape.scale(m_row, gamma), tape.scale(h_row, 1.0 - gamma));
    cur_rows.push_back(m_row);
  }
  const ad::Tensor m_prev = tape.concat_rows(prev_rows);

  const ad::Tensor pre =
      tape.add(tape.matmul(hidden, params.w), tape.matmul(m_prev, params.u));
  const ad::Tensor hidden_act = tape.activation(pre, ad::Activation::tanh_fn);
  const ad::Tensor s_col =
      tape.add_rowvec(tape.matmul(hidden_act, params.v), params.b);

  RetentionScores scores;
  scores.s = tape.reshape(s_col, {t_len});
  scores.p = tape.activation(scores.s, ad::Activation::sigmoid);
  scores.m = tape.concat_rows(cur_rows);
  return scores;
}

GateVector sample_hard_concrete(ad::Tape& tape, const ad::Tensor& s,
                                const std::vector<double>& u,
                                const HardConcreteParams& hc) {
  hc.validate();
  if (u.size() != s.size()) {
    throw ad::ShapeError("sample_hard_concrete: " + std::to_string(u.size()) +
                         " uniforms for " + std::to_string(s.size()) + " logits");
  }
  std::vector<double> noise(u.size());
  for (std::size_t i = 0; i < u.size(); ++i) {
    if (u[i] <= 0.0 || u[i] >= 1.0) {
      throw std::domain_error("sample_hard_concrete: uniform draw at interval "
                              "endpoint (log singularity)");
    }
    const double uc = std::min(std::max(u[i], kUnitClip), 1.0 - kUnitClip);
    noise[i] = std::log(uc) - std::log(1.0 - uc);
  }
  const ad::Tensor noise_t = ad::Tensor::from_data(s.shape(), std::move(noise));
  const ad::Tensor pre = tape.scale(tape.add(s, noise_t), 1.0 / hc.beta);
  const ad::Tensor sig = tape.activation(pre, ad::Activation::sigmoid);
  const ad::Tensor stretched = tape.add_const(
      tape.scale(sig, hc.stretch_high - hc.stretch_low), hc.stretch_low);
  GateVector gates;
  gates.values = tape.activation(stretched, ad::Activation::clamp_unit);
  gates.mode = GateMode::relaxed;
  return gates;
}

TopMSelection select_top_m(const std::vector<double>& p, std::size_t m) {
  const std::size_t t_len = p.size();
  if (m > t_len) {
    throw ad::ContractError("select_top_m: budget " + std::to_string(m) +
                            " exceeds " + std::to_string(t_len) + " tokens");
  }
  std::vector<std::size_t> order(t_len);
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(),
                   [&](std::size_t a, std::size_t b) { return p[a] > p[b]; });

  TopMSelection sel;
  sel.gates.assign(t_len, 0.0);
  sel.indices.assign(order.begin(), order.begin() + m);
  std::sort(sel.indices.begin(), sel.indices.end());
  for (std::size_t idx : sel.indices) sel.gates[idx] = 1.0;
  sel.threshold = m == 0 ? std::numeric_limits<double>::infinity()
                         : p[order[m - 1]];
  return sel;
}

ad::Tensor expected_retention(ad::Tape& tape, const ad::Tensor& p) {
  return tape.sum(p);
}

double active_probability(double s, const HardConcreteParams& hc) {
  hc.validate();
  return stable_sigmoid(s - hc.beta * std::log(-hc.stretch_low / hc.stretch_high));
}

double hard_concrete_value(double s, double u, const HardConcreteParams& hc) {
  const double uc = std::min(std::max(u, kUnitClip), 1.0 - kUnitClip);
  const double pre = (s + std::log(uc) - std::log(1.0 - uc)) / hc.beta;
  const double stretched =
      stable_sigmoid(pre) * (hc.stretch_high - hc.stretch_low) + hc.stretch_low;
  return stretched < 0.0 ? 0.0 : (stretched > 1.0 ? 1.0 : stretched);
}

double hard_concrete_dvalue_ds(double s, double u, const HardConcreteParams& hc) {
  const double uc = std::min(std::max(u, kUnitClip), 1.0 - kUnitClip);
  const double pre = (s + std::log(uc) - std::log(1.0 - uc)) / hc.beta;
  const double sig = stable_sigmoid(pre);
  const double stretched = sig * (hc.stretch_high - hc.stretch_low) + hc.stretch_low;
  if (stretched <= 0.0 || stretched >= 1.0) return 0.0;
  return sig * (1.0 - sig) * (hc.stretch_high - hc.stretch_low) / hc.beta;
}

}  // namespace retlab::gate
