#include "retlab/needle.hpp"

#include <fstream>
#include <stdexcept>

#include <json.hpp>

#include "retlab/rng.hpp"
#include "retlab/tensor.hpp"

namespace retlab::data {

using nlohmann::json;

void NeedleConfig::validate() const {
  if (num_needles == 0) {
    throw ad::ContractError(
        "needle task: k must be at least 1 (label undefined otherwise)");
  }
  if (num_needles > seq_len) {
    throw ad::ContractError("needle task: k exceeds sequence length");
  }
  if (num_classes < 2) throw ad::ContractError("needle task: need >= 2 classes");
  if (filler_begin() + 1 >= vocab_size) {
    throw ad::ContractError(
        "needle task: vocabulary too small for needle groups plus filler");
  }
}

Dataset generate_needle_dataset(const NeedleConfig& config, std::size_t n_examples,
                                std::uint64_t seed) {
  config.validate();
  Dataset dataset(n_examples);
  const std::size_t filler_lo = config.filler_begin();
  const std::size_t filler_n = config.vocab_size - filler_lo;
  for (std::size_t i = 0; i < n_examples; ++i) {
    rng::Stream stream(seed, 0xd0e, i);
    LabeledExample& ex = dataset[i];
    ex.label = static_cast<int>(stream.next_below(config.num_classes));
    ex.tokens.resize(config.seq_len);
    ex.relevance.assign(config.seq_len, 0);
    for (std::size_t t = 0; t < config.seq_len; ++t) {
      ex.tokens[t] = static_cast<int>(filler_lo + stream.next_below(filler_n));
    }
    // k distinct positions, earliest-free placement of random draws
    std::size_t placed = 0;
    while (placed < config.num_needles) {
      const std::size_t pos = stream.next_below(config.seq_len);
      if (ex.relevance[pos] != 0) continue;
      ex.relevance[pos] = 1;
      const std::size_t needle_id =
          2 + static_cast<std::size_t>(ex.label) * config.needles_per_class +
          stream.next_below(config.needles_per_class);
      ex.tokens[pos] = static_cast<int>(needle_id);
      ++placed;
    }
  }
  return dataset;
}

double retention_recall(const std::vector<double>& hard_gates,
                        const std::vector<int>& relevance) {
  if (hard_gates.size() != relevance.size()) {
    throw ad::ShapeError("retention_recall: gate/relevance length mismatch");
  }
  std::size_t relevant = 0, kept = 0;
  for (std::size_t i = 0; i < relevance.size(); ++i) {
    if (relevance[i] != 0) {
      ++relevant;
      if (hard_gates[i] > 0.5) ++kept;
    }
  }
  if (relevant == 0) return 0.0;
  return static_cast<double>(kept) / static_cast<double>(relevant);
}

double retention_recall_indices(const std::vector<std::size_t>& retained_positions,
                                const std::vector<int>& relevance) {
  std::size_t relevant = 0, kept = 0;
  for (int r : relevance) relevant += r != 0 ? 1 : 0;
  for (std::size_t pos : retained_positions) {
    if (pos < relevance.size() && relevance[pos] != 0) ++kept;
  }
  if (relevant == 0) return 0.0;
  return static_cast<double>(kept) / static_cast<double>(relevant);
}

void write_jsonl(const Dataset& dataset, const std::string& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("write_jsonl: cannot open " + path);
  for (const LabeledExample& ex : dataset) {
    json line;
    line["tokens"] = ex.tokens;
    line["label"] = ex.label;
    line["relevance"] = ex.relevance;
    out << line.dump() << "\n";
  }
}

Dataset read_jsonl(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("read_jsonl: cannot open " + path);
  Dataset dataset;
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty()) continue;
    json parsed;
    try {
      parsed = json::parse(line);
    } catch (const json::parse_error& err) {
      throw std::runtime_error("read_jsonl: " + path + ":" +
                               std::to_string(line_no) + ": " + err.what());
    }
    LabeledExample ex;
    if (!parsed.contains("tokens") || !parsed.contains("label")) {
      throw std::runtime_error("read_jsonl: " + path + ":" +
                               std::to_string(line_no) +
                               ": missing tokens/label field");
    }
    ex.tokens = parsed.at("tokens").get<std::vector<int>>();
    ex.label = parsed.at("label").get<int>();
    if (parsed.contains("relevance")) {
      ex.relevance = parsed.at("relevance").get<std::vector<int>>();
    }
    dataset.push_back(std::move(ex));
  }
  return dataset;
}

}  // namespace retlab::data
