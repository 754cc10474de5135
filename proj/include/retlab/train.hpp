#pragma once

#include <map>
#include <string>
#include <vector>

#include "retlab/config.hpp"
#include "retlab/encoder.hpp"
#include "retlab/metrics.hpp"
#include "retlab/needle.hpp"

// Training loop (alternating primal SGD / projected dual ascent), evaluation,
// and JSONL ingestion.

namespace retlab::cli {

class NumericAbort : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct EvalOptions {
  double rho = 0.5;
  // Random-pruning evaluation: selection is a seeded random M-subset instead
  // of top-M.
  bool random_selection = false;
  std::uint64_t selection_seed = 0;
};

struct EvalResult {
  double accuracy = 0.0;
  double mean_recall = 0.0;
  bool has_recall = false;
  std::size_t n_examples = 0;
};

EvalResult evaluate(const enc::Encoder& encoder, const data::Dataset& dataset,
                    const EvalOptions& options);

double ungated_accuracy(const enc::Encoder& encoder, const data::Dataset& dataset);

struct TrainResult {
  std::string checkpoint_path;
  std::string metrics_csv_path;
  std::string metrics_jsonl_path;
  std::size_t steps = 0;
  double final_lambda = 0.0;
  double final_violation = 0.0;     // mean (sum_p - M) per gating point
  double final_accuracy = 0.0;
  double final_recall = 0.0;
  double mean_budget_per_point = 0.0;
};

// Runs the full training loop into config.out_dir (config.json echo,
// metrics.csv/.jsonl, checkpoint.bin). Deterministic per (config, seed)
// except for the wall_seconds metrics column.
TrainResult train_run(const RunConfig& config);

// Loads datasets exactly as train_run does (generated needle data when
// train_path is empty).
void load_datasets(const RunConfig& config, data::Dataset& train,
                   data::Dataset& valid);

struct IngestResult {
  data::Dataset dataset;
  std::map<std::string, int> vocab;  // token -> id (>= 2); 0 pad, 1 oov
  std::size_t empty_text_warnings = 0;
};

// Whitespace tokenizer over {"text": str, "label": int} JSONL (synthetic
// {"tokens", ...} lines pass through). With a fixed vocabulary, unseen tokens
// map to the reserved OOV id 1; otherwise ids are assigned by first
// occurrence starting at 2.
IngestResult ingest_jsonl(const std::string& path,
                          const std::map<std::string, int>* fixed_vocab = nullptr);

}  // namespace retlab::cli
