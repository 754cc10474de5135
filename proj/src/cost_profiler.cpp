#include "retlab/cost_profiler.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <sstream>

#include "retlab/rng.hpp"

namespace retlab::prof {

namespace {

std::vector<std::vector<int>> random_batch(const enc::EncoderConfig& config,
                                           std::size_t t_len, std::size_t batch,
                                           std::uint64_t seed) {
  rng::Stream stream(seed, 0xda7a);
  std::vector<std::vector<int>> out(batch);
  for (auto& seq : out) {
    seq.resize(t_len);
    for (auto& id : seq) {
      id = static_cast<int>(stream.next_below(config.vocab_size - 2) + 2);
    }
  }
  return out;
}

}  // namespace

void CostModel::validate() const {
  if (t_len == 0 || dim == 0 || layers == 0) {
    throw ad::ContractError("cost model: T, d, layers must be positive");
  }
  if (retained == 0 || retained > t_len) {
    throw ad::ContractError("cost model: retained count must satisfy 1 <= M <= T");
  }
}

ClosedFormCost attention_cost(const CostModel& model) {
  model.validate();
  const auto t = static_cast<std::uint64_t>(model.t_len);
  const auto m = static_cast<std::uint64_t>(model.retained);
  const auto d = static_cast<std::uint64_t>(model.dim);
  ClosedFormCost cost;
  switch (model.mode) {
    case AttentionMode::dense:
      cost.flops = t * t * d;
      cost.memory_units = t * t * d;
      break;
    case AttentionMode::retained_block:
      cost.flops = m * m * d;
      cost.memory_units = m * m * d;
      break;
    case AttentionMode::mixed_full_sparse:
      cost.flops = t * m * d;
      cost.memory_units = m * m * d;
      break;
  }
  return cost;
}

std::uint64_t score_matrix_bytes(std::size_t t_len) {
  return static_cast<std::uint64_t>(t_len) * t_len * sizeof(double);
}

std::uint64_t measure_score_macs(AttentionMode mode, std::size_t t_len,
                                 std::size_t retained, std::size_t dim,
                                 std::size_t heads, std::uint64_t seed) {
  enc::EncoderConfig config;
  config.num_layers = 1;
  config.model_dim = dim;
  config.num_heads = heads;
  config.ff_dim = 2 * dim;
  config.vocab_size = 16;
  config.max_seq_len = std::max<std::size_t>(t_len, 1);
  config.num_classes = 2;
  enc::Encoder encoder(config, seed);

  rng::Stream stream(seed, 0x51de);
  std::vector<double> hidden(t_len * dim);
  for (double& v : hidden) v = stream.next_uniform(-1.0, 1.0);

  kernels::MacCounter counter;
  encoder.set_score_mac_counter(&counter);
  ad::Tape tape(false);
  const ad::Tensor h = ad::Tensor::from_data({t_len, dim}, std::move(hidden));

  switch (mode) {
    case AttentionMode::dense:
      encoder.attention_block(tape, h, 0);
      break;
    case AttentionMode::mixed_full_sparse: {
      std::vector<std::size_t> kv(retained);
      for (std::size_t i = 0; i < retained; ++i) kv[i] = i;
      encoder.attention_block(tape, h, 0, &kv);
      break;
    }
    case AttentionMode::retained_block: {
      const ad::Tensor block = tape.slice_rows(h, 0, retained);
      encoder.attention_block(tape, block, 0);
      break;
    }
  }
  encoder.set_score_mac_counter(nullptr);
  return counter.macs;
}

std::string CostReport::csv_header() {
  return "label,flop_count,memory_units,wall_seconds_per_batch,"
         "median_seconds_per_batch,seconds_per_1k_tokens,tokens_per_second,"
         "relative_throughput,peak_resident_bytes,batches_per_measurement,"
         "exclusive_execution";
}

std::string CostReport::csv_row() const {
  std::ostringstream os;
  os.precision(17);
  os << label << ',' << flop_count << ',' << memory_units << ','
     << wall_seconds_per_batch << ','
     << median_seconds_per_batch << ','
     << seconds_per_1k_tokens << ',' << tokens_per_second
     << ',' << relative_throughput << ',' << peak_resident_bytes << ','
     << batches_per_measurement << ',' << (exclusive_execution ? 1 : 0);
  return os.str();
}

CostReport measure_throughput(const ThroughputConfig& config, RunVariant variant) {
  enc::EncoderConfig enc_config = config.encoder;
  enc_config.max_seq_len = std::max(enc_config.max_seq_len, config.t_len);
  enc::Encoder encoder(enc_config, config.seed);
  const std::vector<std::vector<int>> batch =
      random_batch(enc_config, config.t_len, config.batch_size, config.seed);

  auto run_batch = [&]() {
    for (const std::vector<int>& tokens : batch) {
      switch (variant) {
        case RunVariant::dense:
          encoder.forward_infer_ungated(tokens);
          break;
        case RunVariant::pruned:
          encoder.forward_infer(tokens, config.rho);
          break;
        case RunVariant::gated_unpruned:
          encoder.forward_infer(tokens, 1.0);
          break;
      }
    }
  };

  using clock = std::chrono::steady_clock;

  for (std::size_t i = 0; i < config.warmup_batches; ++i) run_batch();

  // Group batches until one measurement spans at least the timer floor.
  std::size_t group = 1;
  for (;;) {
    const auto start = clock::now();
    for (std::size_t g = 0; g < group; ++g) run_batch();
    const double elapsed =
        std::chrono::duration<double>(clock::now() - start).count();
    if (elapsed >= 1e-3 || group >= 4096) break;
    group *= 2;
  }

  ad::reset_peak_tensor_bytes();
  std::vector<double> per_batch(config.timed_batches);
  for (std::size_t i = 0; i < config.timed_batches; ++i) {
    const auto start = clock::now();
    for (std::size_t g = 0; g < group; ++g) run_batch();
    per_batch[i] = std::chrono::duration<double>(clock::now() - start).count() /
                   static_cast<double>(group);
  }

  CostReport report;
  switch (variant) {
    case RunVariant::dense:
      report.label = "dense";
      break;
    case RunVariant::pruned:
      report.label = "pruned_rho_" + std::to_string(config.rho);
      break;
    case RunVariant::gated_unpruned:
      report.label = "gated_unpruned";
      break;
  }

  double mean = 0.0;
  for (double v : per_batch) mean += v;
  mean /= static_cast<double>(per_batch.size());
  std::vector<double> sorted = per_batch;
  std::sort(sorted.begin(), sorted.end());
  const double median = sorted[sorted.size() / 2];

  const double tokens_per_batch =
      static_cast<double>(config.batch_size) * static_cast<double>(config.t_len);
  report.wall_seconds_per_batch = mean;
  report.median_seconds_per_batch = median;
  report.seconds_per_1k_tokens = mean / tokens_per_batch * 1000.0;
  report.tokens_per_second = tokens_per_batch / mean;
  report.batches_per_measurement = group;
  report.peak_resident_bytes = ad::peak_tensor_bytes();

  // Closed-form score-stage MACs for the variant's schedule.
  const std::size_t t = config.t_len;
  std::vector<std::size_t> alive_per_layer(enc_config.num_layers, t);
  if (variant == RunVariant::pruned) {
    const std::vector<std::size_t> schedule =
        enc::retention_schedule(t, enc_config, config.rho);
    std::size_t alive = t;
    for (std::size_t l = 0; l < enc_config.num_layers; ++l) {
      alive_per_layer[l] = alive;  // attention runs before the gating point
      alive = std::min(schedule[l], alive);
    }
  }
  std::uint64_t flops = 0;
  for (std::size_t alive : alive_per_layer) {
    CostModel model{alive, alive, enc_config.model_dim, 1, AttentionMode::dense};
    flops += attention_cost(model).flops;
  }
  report.flop_count = flops;
  report.memory_units =
      attention_cost(CostModel{t, t, enc_config.model_dim, 1, AttentionMode::dense})
          .memory_units;
  return report;
}

std::vector<CostReport> profile_suite(const ThroughputConfig& config) {
  std::vector<CostReport> reports;
  reports.push_back(measure_throughput(config, RunVariant::dense));
  reports.push_back(measure_throughput(config, RunVariant::pruned));
  reports.push_back(measure_throughput(config, RunVariant::gated_unpruned));
  const double dense_mean = reports[0].wall_seconds_per_batch;
  for (CostReport& report : reports) {
    report.relative_throughput = dense_mean / report.wall_seconds_per_batch;
  }
  return reports;
}

RetentionTable retention_table(const enc::Encoder& encoder,
                               const std::vector<std::vector<int>>& sample_tokens,
                               const std::vector<double>& budgets) {
  RetentionTable table;
  table.budgets = budgets;
  const std::size_t layers = encoder.config().num_layers;
  for (double rho : budgets) {
    std::vector<double> mean_fraction(layers, 0.0);
    for (const std::vector<int>& tokens : sample_tokens) {
      const enc::InferResult result = encoder.forward_infer(tokens, rho);
      for (std::size_t l = 0; l < layers; ++l) {
        const double count =
            l < result.retained_counts.size()
                ? static_cast<double>(result.retained_counts[l])
                : static_cast<double>(tokens.size());
        mean_fraction[l] += count / static_cast<double>(tokens.size());
      }
    }
    for (double& f : mean_fraction) {
      f /= static_cast<double>(sample_tokens.size());
    }
    table.fractions.push_back(std::move(mean_fraction));
  }
  return table;
}

std::string RetentionTable::format_text() const {
  std::ostringstream os;
  os << "Layer";
  for (double b : budgets) {
    os << "  |  " << static_cast<int>(b * 100.0 + 0.5) << "% Budget";
  }
  os << "\n";
  os << "Embedding";
  for (std::size_t i = 0; i < budgets.size(); ++i) os << "  |  100.0%";
  os << "\n";
  const std::size_t layers = fractions.empty() ? 0 : fractions[0].size();
  for (std::size_t l = 0; l < layers; ++l) {
    os << "Layer " << (l + 1);
    for (std::size_t b = 0; b < budgets.size(); ++b) {
      char buffer[32];
      std::snprintf(buffer, sizeof(buffer), "%.1f%%", fractions[b][l] * 100.0);
      os << "  |  " << buffer;
    }
    os << "\n";
  }
  return os.str();
}

}  // namespace retlab::prof
