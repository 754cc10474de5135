#pragma once

#include <cstdint>
#include <string>
#include <vector>

// Needle classification task: k planted tokens from one needle group
// determine the class; the rest is filler. Token-level ground truth makes
// gate selectivity directly measurable.

namespace retlab::data {

struct NeedleConfig {
  std::size_t seq_len = 64;      // T
  std::size_t num_needles = 4;   // k
  std::size_t num_classes = 4;
  std::size_t vocab_size = 64;   // ids 0 (pad) and 1 (oov) reserved
  std::size_t needles_per_class = 4;  // needle vocabulary ids per class

  void validate() const;
  bool operator==(const NeedleConfig&) const = default;
  // Needle ids for class c occupy [2 + c*needles_per_class, ...).
  std::size_t filler_begin() const { return 2 + num_classes * needles_per_class; }
};

struct LabeledExample {
  std::vector<int> tokens;
  int label = 0;
  std::vector<int> relevance;  // 0/1 mask, exactly k ones for needle data
};

using Dataset = std::vector<LabeledExample>;

// Deterministic per (config, seed); labels near-uniform.
Dataset generate_needle_dataset(const NeedleConfig& config, std::size_t n_examples,
                                std::uint64_t seed);

// |retained & relevant| / |relevant| for a hard gate vector over original
// positions.
double retention_recall(const std::vector<double>& hard_gates,
                        const std::vector<int>& relevance);
double retention_recall_indices(const std::vector<std::size_t>& retained_positions,
                                const std::vector<int>& relevance);

// JSONL persistence: one {"tokens": [...], "label": n, "relevance": [...]}
// object per line, UTF-8, LF.
void write_jsonl(const Dataset& dataset, const std::string& path);
Dataset read_jsonl(const std::string& path);

}  // namespace retlab::data
