#include "retlab/metrics.hpp"

#include <cstdio>
#include <sstream>
#include <stdexcept>

#include <json.hpp>

namespace retlab::cli {

const char* const kMetricsCsvHeader =
    "step,task_loss,lagrangian,lambda,expected_retention,budget_violation,"
    "eval_accuracy,retention_recall,wall_seconds";

std::string format_double(double v) {
  char buffer[40];
  std::snprintf(buffer, sizeof(buffer), "%.17g", v);
  return buffer;
}

MetricsWriter::MetricsWriter(const std::string& csv_path,
                             const std::string& jsonl_path)
    : csv_(csv_path, std::ios::binary), jsonl_(jsonl_path, std::ios::binary) {
  if (!csv_) throw std::runtime_error("metrics: cannot open " + csv_path);
  if (!jsonl_) throw std::runtime_error("metrics: cannot open " + jsonl_path);
  csv_ << kMetricsCsvHeader << "\n";
}

void MetricsWriter::append(const MetricsRecord& r) {
  csv_ << r.step << ',' << format_double(r.task_loss) << ','
       << format_double(r.lagrangian) << ',' << format_double(r.lambda) << ','
       << format_double(r.expected_retention) << ','
       << format_double(r.budget_violation) << ','
       << format_double(r.eval_accuracy) << ','
       << format_double(r.retention_recall) << ','
       << format_double(r.wall_seconds) << "\n";
  csv_.flush();

  nlohmann::json j;
  j["step"] = r.step;
  j["task_loss"] = r.task_loss;
  j["lagrangian"] = r.lagrangian;
  j["lambda"] = r.lambda;
  j["expected_retention"] = r.expected_retention;
  j["budget_violation"] = r.budget_violation;
  j["eval_accuracy"] = r.eval_accuracy;
  j["retention_recall"] = r.retention_recall;
  j["wall_seconds"] = r.wall_seconds;
  jsonl_ << j.dump() << "\n";
  jsonl_.flush();
}

std::vector<MetricsRecord> read_metrics_csv(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("metrics: cannot open " + path);
  std::string line;
  if (!std::getline(in, line) || line != kMetricsCsvHeader) {
    throw std::runtime_error("metrics: unexpected header in " + path);
  }
  std::vector<MetricsRecord> records;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    std::istringstream ss(line);
    std::string field;
    MetricsRecord r;
    auto next = [&]() {
      if (!std::getline(ss, field, ',')) {
        throw std::runtime_error("metrics: short row in " + path);
      }
      return field;
    };
    r.step = std::stoull(next());
    r.task_loss = std::stod(next());
    r.lagrangian = std::stod(next());
    r.lambda = std::stod(next());
    r.expected_retention = std::stod(next());
    r.budget_violation = std::stod(next());
    r.eval_accuracy = std::stod(next());
    r.retention_recall = std::stod(next());
    r.wall_seconds = std::stod(next());
    records.push_back(r);
  }
  return records;
}

std::string strip_wall_seconds_column(const std::string& csv_text) {
  std::istringstream in(csv_text);
  std::ostringstream out;
  std::string line;
  while (std::getline(in, line)) {
    const std::size_t comma = line.rfind(',');
    out << (comma == std::string::npos ? line : line.substr(0, comma)) << "\n";
  }
  return out.str();
}

}  // namespace retlab::cli
