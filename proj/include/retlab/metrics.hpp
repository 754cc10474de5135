#pragma once

#include <cstddef>
#include <fstream>
#include <string>
#include <vector>

// Training metrics: CSV with a fixed column order (the external contract)
// mirrored as JSON lines. wall_seconds is the only non-deterministic column;
// determinism comparisons strip it.

namespace retlab::cli {

struct MetricsRecord {
  std::size_t step = 0;
  double task_loss = 0.0;
  double lagrangian = 0.0;
  double lambda = 0.0;
  double expected_retention = 0.0;
  double budget_violation = 0.0;
  double eval_accuracy = 0.0;
  double retention_recall = 0.0;
  double wall_seconds = 0.0;
};

extern const char* const kMetricsCsvHeader;

class MetricsWriter {
 public:
  MetricsWriter(const std::string& csv_path, const std::string& jsonl_path);
  void append(const MetricsRecord& record);

 private:
  std::ofstream csv_;
  std::ofstream jsonl_;
};

std::vector<MetricsRecord> read_metrics_csv(const std::string& path);

// CSV text with the wall_seconds column removed; what the end-to-end
// determinism contract compares byte-for-byte.
std::string strip_wall_seconds_column(const std::string& csv_text);

std::string format_double(double v);  // shortest round-trip decimal

}  // namespace retlab::cli
