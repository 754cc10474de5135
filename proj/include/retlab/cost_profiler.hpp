#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "retlab/encoder.hpp"

// Attention cost accounting: exact leading-term operation counts for the
// dense, retained-block, and mixed full-sparse regimes, instrumented MAC
// counters validating them, wall-clock throughput measurement, and per-layer
// retention tables.

namespace retlab::prof {

enum class AttentionMode { dense, retained_block, mixed_full_sparse };

struct CostModel {
  std::size_t t_len = 0;     // T
  std::size_t retained = 0;  // M (1 <= M <= T)
  std::size_t dim = 0;       // d
  std::size_t layers = 1;
  AttentionMode mode = AttentionMode::dense;

  void validate() const;
};

struct ClosedFormCost {
  std::uint64_t flops = 0;         // leading-term MACs, unit constant
  std::uint64_t memory_units = 0;  // leading-term units per the cost model
};

// Leading-term counts with constant 1: dense (T^2 d, T^2 d), retained block
// (M^2 d, M^2 d), mixed full-sparse (T M d time, M^2 d memory).
ClosedFormCost attention_cost(const CostModel& model);

// Literal byte count of one dense score matrix (f64), alongside the unit
// model above.
std::uint64_t score_matrix_bytes(std::size_t t_len);

// Instrumented counters for the attention score stage (q . k products) of a
// single encoder block on random hidden states.
std::uint64_t measure_score_macs(AttentionMode mode, std::size_t t_len,
                                 std::size_t retained, std::size_t dim,
                                 std::size_t heads, std::uint64_t seed);

enum class RunVariant { dense, pruned, gated_unpruned };

struct ThroughputConfig {
  enc::EncoderConfig encoder;
  std::size_t t_len = 512;
  std::size_t batch_size = 4;
  std::size_t warmup_batches = 5;
  std::size_t timed_batches = 20;
  double rho = 0.3;
  std::uint64_t seed = 1;
};

struct CostReport {
  std::string label;
  std::uint64_t flop_count = 0;     // closed-form score-stage MACs per layer sum
  std::uint64_t memory_units = 0;   // cost-model units
  double wall_seconds_per_batch = 0.0;  // mean over timed batches
  double median_seconds_per_batch = 0.0;
  double seconds_per_1k_tokens = 0.0;
  double tokens_per_second = 0.0;
  double relative_throughput = 1.0;  // vs dense baseline; dense vs itself = 1
  std::uint64_t peak_resident_bytes = 0;
  std::size_t batches_per_measurement = 1;  // > 1 when auto-grouped
  bool exclusive_execution = true;

  std::string csv_row() const;
  static std::string csv_header();
};

// Times forward passes for one variant. Batches shorter than the timer floor
// are grouped until each measurement spans at least ~1 ms.
CostReport measure_throughput(const ThroughputConfig& config, RunVariant variant);

// Dense + pruned + gated-unpruned sweep with relative throughput against the
// dense row.
std::vector<CostReport> profile_suite(const ThroughputConfig& config);

struct RetentionTable {
  std::vector<double> budgets;
  // fractions[budget][layer]: mean fraction of the original tokens still
  // active after that layer, over the sample set.
  std::vector<std::vector<double>> fractions;

  std::string format_text() const;  // Embedding row = 100%
};

RetentionTable retention_table(const enc::Encoder& encoder,
                               const std::vector<std::vector<int>>& sample_tokens,
                               const std::vector<double>& budgets);

}  // namespace retlab::prof
