#include "retlab/encoder.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

#include "retlab/rng.hpp"

namespace retlab::enc {

namespace {

std::vector<double> xavier_init(rng::Stream& stream, std::size_t fan_in,
                                std::size_t fan_out, std::size_t n) {
  const double bound = std::sqrt(6.0 / static_cast<double>(fan_in + fan_out));
  std::vector<double> v(n);
  for (double& x : v) x = stream.next_uniform(-bound, bound);
  return v;
}

}  // namespace

void EncoderConfig::validate() const {
  if (num_layers < 1) throw ad::ContractError("encoder: num_layers must be >= 1");
  if (model_dim == 0 || num_heads == 0 || model_dim % num_heads != 0) {
    throw ad::ContractError("encoder: model_dim must be divisible by num_heads");
  }
  if (rho <= 0.0 || rho > 1.0) {
    throw ad::ContractError("encoder: rho must lie in (0, 1]");
  }
  if (vocab_size < 2 || num_classes < 2) {
    throw ad::ContractError("encoder: vocab_size and num_classes must be >= 2");
  }
  if (max_seq_len == 0) throw ad::ContractError("encoder: max_seq_len must be >= 1");
  if (schedule_mode == ScheduleMode::linear_decay &&
      (schedule_r_start <= 0.0 || schedule_r_start > 1.0 ||
       schedule_r_end <= 0.0 || schedule_r_end > 1.0)) {
    throw ad::ContractError("encoder: linear_decay endpoints must lie in (0, 1]");
  }
}

std::vector<std::size_t> retention_schedule(std::size_t t_len,
                                            const EncoderConfig& config,
                                            double rho_override) {
  if (t_len < 1) throw ad::ContractError("retention_schedule: empty sequence");
  const double rho = rho_override;
  if (rho <= 0.0 || rho > 1.0) {
    throw ad::ContractError("retention_schedule: rho must lie in (0, 1]");
  }
  const std::size_t layers = config.num_layers;
  std::vector<std::size_t> counts(layers);
  switch (config.schedule_mode) {
    case ScheduleMode::uniform_global: {
      const auto m = static_cast<std::size_t>(
          std::floor(rho * static_cast<double>(t_len)));
      std::fill(counts.begin(), counts.end(), std::max<std::size_t>(1, m));
      break;
    }
    case ScheduleMode::geometric: {
      std::size_t alive = t_len;
      for (std::size_t l = 0; l < layers; ++l) {
        const auto m = static_cast<std::size_t>(
            std::floor(rho * static_cast<double>(alive)));
        counts[l] = std::max<std::size_t>(1, m);
        alive = counts[l];
      }
      break;
    }
    case ScheduleMode::linear_decay: {
      for (std::size_t l = 0; l < layers; ++l) {
        const double frac =
            layers == 1
                ? config.schedule_r_start
                : config.schedule_r_start +
                      (config.schedule_r_end - config.schedule_r_start) *
                          static_cast<double>(l) / static_cast<double>(layers - 1);
        const auto m = static_cast<std::size_t>(
            std::floor(frac * static_cast<double>(t_len)));
        counts[l] = std::max<std::size_t>(1, m);
        if (l > 0) counts[l] = std::min(counts[l], counts[l - 1]);
      }
      break;
    }
  }
  return counts;
}

std::vector<std::size_t> retention_schedule(std::size_t t_len,
                                            const EncoderConfig& config) {
  return retention_schedule(t_len, config, config.rho);
}

Encoder::Encoder(EncoderConfig config, std::uint64_t seed)
    : config_(std::move(config)) {
  config_.validate();
  const std::size_t d = config_.model_dim;
  const std::size_t ff = config_.ff_dim;
  rng::Stream stream(seed, 0xe2c0de);

  register_param("embedding",
                 ad::Tensor::from_data({config_.vocab_size, d},
                                       xavier_init(stream, config_.vocab_size, d,
                                                   config_.vocab_size * d),
                                       true));
  for (std::size_t l = 0; l < config_.num_layers; ++l) {
    const std::string prefix = "layer" + std::to_string(l) + ".";
    auto mat = [&](std::size_t in, std::size_t out) {
      return ad::Tensor::from_data({in, out}, xavier_init(stream, in, out, in * out),
                                   true);
    };
    auto vec_zero = [&](std::size_t n) {
      return ad::Tensor::from_data({n}, std::vector<double>(n, 0.0), true);
    };
    auto vec_one = [&](std::size_t n) {
      return ad::Tensor::from_data({n}, std::vector<double>(n, 1.0), true);
    };
    register_param(prefix + "ln1_g", vec_one(d));
    register_param(prefix + "ln1_b", vec_zero(d));
    register_param(prefix + "wq", mat(d, d));
    register_param(prefix + "bq", vec_zero(d));
    register_param(prefix + "wk", mat(d, d));
    register_param(prefix + "bk", vec_zero(d));
    register_param(prefix + "wv", mat(d, d));
    register_param(prefix + "bv", vec_zero(d));
    register_param(prefix + "wo", mat(d, d));
    register_param(prefix + "bo", vec_zero(d));
    register_param(prefix + "ln2_g", vec_one(d));
    register_param(prefix + "ln2_b", vec_zero(d));
    register_param(prefix + "w1", mat(d, ff));
    register_param(prefix + "b1", vec_zero(ff));
    register_param(prefix + "w2", mat(ff, d));
    register_param(prefix + "b2", vec_zero(d));
  }
  register_param("head_w",
                 ad::Tensor::from_data(
                     {d, config_.num_classes},
                     xavier_init(stream, d, config_.num_classes,
                                 d * config_.num_classes),
                     true));
  register_param("head_b",
                 ad::Tensor::from_data({config_.num_classes},
                                       std::vector<double>(config_.num_classes, 0.0),
                                       true));

  const std::size_t n_scorers = gating_points();
  for (std::size_t g = 0; g < n_scorers; ++g) {
    gate::ScorerParams sp = gate::make_scorer_params(
        d, config_.decay_gamma, rng::hash_key(seed, 0x5c02e2, g), true);
    const std::string prefix = "scorer" + std::to_string(g) + ".";
    register_param(prefix + "ln_g",
                   ad::Tensor::from_data({d}, std::vector<double>(d, 1.0), true));
    register_param(prefix + "ln_b",
                   ad::Tensor::from_data({d}, std::vector<double>(d, 0.0), true));
    register_param(prefix + "w", sp.w);
    register_param(prefix + "u", sp.u);
    register_param(prefix + "v", sp.v);
    register_param(prefix + "b", sp.b);
    scorers_.push_back(std::move(sp));
  }

  // Fixed sinusoidal positional encodings; pruned tokens keep the encoding of
  // their original position.
  std::vector<double> pos(config_.max_seq_len * d);
  for (std::size_t t = 0; t < config_.max_seq_len; ++t) {
    for (std::size_t i = 0; i < d; ++i) {
      const double freq =
          std::pow(10000.0, -2.0 * static_cast<double>(i / 2) /
                                static_cast<double>(d));
      const double angle = static_cast<double>(t) * freq;
      pos[t * d + i] = (i % 2 == 0) ? std::sin(angle) : std::cos(angle);
    }
  }
  positional_ =
      ad::Tensor::from_data({config_.max_seq_len, d}, std::move(pos), false);
}

std::size_t Encoder::gating_points() const {
  return config_.retention_mode == RetentionMode::layer_wise ? config_.num_layers
                                                             : 1;
}

void Encoder::register_param(const std::string& name, ad::Tensor t) {
  params_.emplace_back(name, std::move(t));
}

ad::Tensor Encoder::parameter(const std::string& name) const {
  for (const auto& [pname, tensor] : params_) {
    if (pname == name) return tensor;
  }
  throw ad::ContractError("encoder: unknown parameter " + name);
}

void Encoder::set_parameter_data(const std::string& name,
                                 const std::vector<double>& data) {
  for (auto& [pname, tensor] : params_) {
    if (pname == name) {
      if (tensor.size() != data.size()) {
        throw ad::ShapeError("encoder: parameter " + name + " expects " +
                             std::to_string(tensor.size()) + " values, got " +
                             std::to_string(data.size()));
      }
      tensor.mutable_data() = data;
      return;
    }
  }
  throw ad::ContractError("encoder: unknown parameter " + name);
}

const gate::ScorerParams& Encoder::scorer(std::size_t gating_point) const {
  if (gating_point >= scorers_.size()) {
    throw ad::ContractError("encoder: gating point out of range");
  }
  return scorers_[gating_point];
}

ad::Tensor Encoder::embed(ad::Tape& tape, const std::vector<int>& tokens) const {
  if (tokens.empty()) throw ad::ContractError("encoder: empty token sequence");
  if (tokens.size() > config_.max_seq_len) {
    throw ad::ContractError("encoder: sequence of " +
                            std::to_string(tokens.size()) +
                            " tokens exceeds max_seq_len " +
                            std::to_string(config_.max_seq_len));
  }
  std::vector<std::size_t> ids(tokens.size());
  for (std::size_t i = 0; i < tokens.size(); ++i) {
    if (tokens[i] < 0 ||
        static_cast<std::size_t>(tokens[i]) >= config_.vocab_size) {
      throw ad::ContractError("encoder: token id " + std::to_string(tokens[i]) +
                              " outside vocabulary of " +
                              std::to_string(config_.vocab_size));
    }
    ids[i] = static_cast<std::size_t>(tokens[i]);
  }
  // token embeddings are scaled by sqrt(d) so they are not drowned out by
  // the unit-amplitude sinusoidal positions
  const ad::Tensor emb = tape.scale(
      tape.gather_rows(parameter("embedding"), ids),
      std::sqrt(static_cast<double>(config_.model_dim)));
  const ad::Tensor pos = tape.slice_rows(positional_, 0, tokens.size());
  return tape.add(emb, pos);
}

ad::Tensor Encoder::feed_forward(ad::Tape& tape, const ad::Tensor& hidden,
                                 std::size_t layer) const {
  const std::string prefix = "layer" + std::to_string(layer) + ".";
  const ad::Tensor h1 = tape.activation(
      tape.add_rowvec(tape.matmul(hidden, parameter(prefix + "w1")),
                      parameter(prefix + "b1")),
      ad::Activation::gelu);
  return tape.add_rowvec(tape.matmul(h1, parameter(prefix + "w2")),
                         parameter(prefix + "b2"));
}

ad::Tensor Encoder::attention_block(ad::Tape& tape, const ad::Tensor& hidden,
                                    std::size_t layer,
                                    const std::vector<std::size_t>* kv_indices) const {
  const std::string prefix = "layer" + std::to_string(layer) + ".";
  const std::size_t d = config_.model_dim;
  const std::size_t heads = config_.num_heads;
  const std::size_t dh = d / heads;

  const ad::Tensor normed = tape.layer_norm_rows(hidden, parameter(prefix + "ln1_g"),
                                                 parameter(prefix + "ln1_b"));
  const ad::Tensor kv_input =
      kv_indices == nullptr ? normed : tape.gather_rows(normed, *kv_indices);

  const ad::Tensor q = tape.add_rowvec(
      tape.matmul(normed, parameter(prefix + "wq")), parameter(prefix + "bq"));
  const ad::Tensor k = tape.add_rowvec(
      tape.matmul(kv_input, parameter(prefix + "wk")), parameter(prefix + "bk"));
  const ad::Tensor v = tape.add_rowvec(
      tape.matmul(kv_input, parameter(prefix + "wv")), parameter(prefix + "bv"));

  std::vector<ad::Tensor> head_outputs;
  head_outputs.reserve(heads);
  for (std::size_t h = 0; h < heads; ++h) {
    const ad::Tensor qh = tape.slice_cols(q, h * dh, dh);
    const ad::Tensor kh = tape.slice_cols(k, h * dh, dh);
    const ad::Tensor vh = tape.slice_cols(v, h * dh, dh);
    ad::Tensor scores;
    {
      kernels::ScopedMacCounter guard(score_macs_);
      scores = tape.matmul(qh, tape.transpose(kh));
    }
    const ad::Tensor attn = tape.softmax_rows(
        tape.scale(scores, 1.0 / std::sqrt(static_cast<double>(dh))));
    head_outputs.push_back(tape.matmul(attn, vh));
  }
  const ad::Tensor context = tape.concat_cols(head_outputs);
  const ad::Tensor attended = tape.add_rowvec(
      tape.matmul(context, parameter(prefix + "wo")), parameter(prefix + "bo"));
  const ad::Tensor mid = tape.add(hidden, attended);

  const ad::Tensor normed2 = tape.layer_norm_rows(mid, parameter(prefix + "ln2_g"),
                                                  parameter(prefix + "ln2_b"));
  return tape.add(mid, feed_forward(tape, normed2, layer));
}

ad::Tensor Encoder::scorer_input(ad::Tape& tape, const ad::Tensor& hidden,
                                 std::size_t gating_point) const {
  const std::string prefix = "scorer" + std::to_string(gating_point) + ".";
  return tape.layer_norm_rows(hidden, parameter(prefix + "ln_g"),
                              parameter(prefix + "ln_b"));
}

ad::Tensor Encoder::pooled_head_logits(ad::Tape& tape,
                                       const ad::Tensor& gated_hidden,
                                       std::size_t original_t_len) const {
  ad::Tensor pooled;
  if (config_.pooling == Pooling::mean_over_retained) {
    // masked mean: retained rows summed, divided by the original sequence
    // length, so all-zero gates pool to the exact zero vector
    const std::size_t rows = gated_hidden.rows();
    const ad::Tensor ones =
        ad::Tensor::from_data({1, rows}, std::vector<double>(rows, 1.0));
    const ad::Tensor col_sum = tape.matmul(ones, gated_hidden);
    const ad::Tensor denom =
        ad::Tensor::scalar_value(static_cast<double>(original_t_len));
    pooled = tape.div_by_scalar(col_sum, denom);
  } else {
    pooled = tape.slice_rows(gated_hidden, 0, 1);
  }
  return tape.add_rowvec(tape.matmul(pooled, parameter("head_w")),
                         parameter("head_b"));
}

TrainForward Encoder::forward_train(ad::Tape& tape, const std::vector<int>& tokens,
                                    int label, const gate::HardConcreteParams& hc,
                                    std::uint64_t sample_seed, std::uint64_t step,
                                    std::uint64_t example,
                                    const GateOverride& override_gates,
                                    double label_smoothing) const {
  const std::size_t t_len = tokens.size();
  ad::Tensor hidden = embed(tape, tokens);

  TrainForward result;

  auto make_gate = [&](const ad::Tensor& scores_s,
                       std::size_t gating_point) -> ad::Tensor {
    switch (override_gates.kind) {
      case GateOverride::Kind::ones:
        return ad::Tensor::from_data({t_len}, std::vector<double>(t_len, 1.0));
      case GateOverride::Kind::zeros:
        return ad::Tensor::from_data({t_len}, std::vector<double>(t_len, 0.0));
      case GateOverride::Kind::fixed:
        return ad::Tensor::from_data({t_len},
                                     override_gates.fixed->at(gating_point));
      case GateOverride::Kind::none:
      default: {
        std::vector<double> u(t_len);
        for (std::size_t t = 0; t < t_len; ++t) {
          u[t] = rng::uniform(sample_seed, step, example, gating_point, t);
        }
        return gate::sample_hard_concrete(tape, scores_s, u, hc).values;
      }
    }
  };

  ad::Tensor last_gate;
  for (std::size_t l = 0; l < config_.num_layers; ++l) {
    hidden = attention_block(tape, hidden, l);
    const bool gate_here =
        config_.retention_mode == RetentionMode::layer_wise ||
        l + 1 == config_.num_layers;
    if (!gate_here) continue;
    const std::size_t gating_point =
        config_.retention_mode == RetentionMode::layer_wise ? l : 0;
    const gate::RetentionScores scores = gate::score_tokens(
        tape, scorer_input(tape, hidden, gating_point), scorers_[gating_point]);
    const ad::Tensor z = make_gate(scores.s, gating_point);
    hidden = tape.row_scale(hidden, z);
    result.p_layers.push_back(scores.p);
    result.gates.push_back(z);
    last_gate = z;
  }

  result.logits = pooled_head_logits(tape, hidden, t_len);
  result.task_loss =
      tape.cross_entropy_mean(result.logits, {label}, label_smoothing);
  return result;
}

ad::Tensor Encoder::forward_plain_logits(ad::Tape& tape,
                                         const std::vector<int>& tokens) const {
  const std::size_t t_len = tokens.size();
  ad::Tensor hidden = embed(tape, tokens);
  for (std::size_t l = 0; l < config_.num_layers; ++l) {
    hidden = attention_block(tape, hidden, l);
  }
  const ad::Tensor ones =
      ad::Tensor::from_data({t_len}, std::vector<double>(t_len, 1.0));
  return pooled_head_logits(tape, tape.row_scale(hidden, ones), t_len);
}

InferResult Encoder::forward_infer(const std::vector<int>& tokens,
                                   double rho) const {
  const std::vector<std::size_t> schedule =
      retention_schedule(tokens.size(), config_, rho);

  ad::Tape tape(false);
  ad::Tensor hidden = embed(tape, tokens);
  std::vector<std::size_t> active(tokens.size());
  for (std::size_t i = 0; i < active.size(); ++i) active[i] = i;

  InferResult result;
  for (std::size_t l = 0; l < config_.num_layers; ++l) {
    const std::uint64_t macs_before = score_macs_ != nullptr ? score_macs_->macs : 0;
    hidden = attention_block(tape, hidden, l);
    if (score_macs_ != nullptr) {
      result.score_macs_per_layer.push_back(score_macs_->macs - macs_before);
    }
    const bool gate_here =
        config_.retention_mode == RetentionMode::layer_wise ||
        l + 1 == config_.num_layers;
    if (!gate_here) continue;
    const std::size_t gating_point =
        config_.retention_mode == RetentionMode::layer_wise ? l : 0;
    const gate::RetentionScores scores = gate::score_tokens(
        tape, scorer_input(tape, hidden, gating_point), scorers_[gating_point]);

    const std::size_t m = std::min(schedule[l], active.size());
    if (m == 0) {
      throw ad::ContractError("forward_infer: zero retained tokens at layer " +
                              std::to_string(l));
    }
    const gate::TopMSelection sel = gate::select_top_m(scores.p.data(), m);
    hidden = tape.gather_rows(hidden, sel.indices);
    std::vector<std::size_t> next_active(sel.indices.size());
    for (std::size_t i = 0; i < sel.indices.size(); ++i) {
      next_active[i] = active[sel.indices[i]];
    }
    active = std::move(next_active);
    result.retained_counts.push_back(active.size());
    result.thresholds.push_back(sel.threshold);
  }

  const std::size_t kept = hidden.rows();
  const ad::Tensor ones =
      ad::Tensor::from_data({kept}, std::vector<double>(kept, 1.0));
  const ad::Tensor logits =
      pooled_head_logits(tape, tape.row_scale(hidden, ones), tokens.size());
  result.class_logits = logits.data();
  result.prediction = static_cast<int>(
      std::max_element(result.class_logits.begin(), result.class_logits.end()) -
      result.class_logits.begin());
  result.final_active = std::move(active);
  return result;
}

InferResult Encoder::forward_infer_ungated(const std::vector<int>& tokens) const {
  ad::Tape tape(false);
  const ad::Tensor logits = forward_plain_logits(tape, tokens);
  InferResult result;
  result.class_logits = logits.data();
  result.prediction = static_cast<int>(
      std::max_element(result.class_logits.begin(), result.class_logits.end()) -
      result.class_logits.begin());
  result.final_active.resize(tokens.size());
  for (std::size_t i = 0; i < tokens.size(); ++i) result.final_active[i] = i;
  return result;
}

}  // namespace retlab::enc
