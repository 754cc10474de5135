#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <filesystem>
#include <fstream>
#include <sstream>

#include "retlab/checkpoint.hpp"
#include "retlab/config.hpp"
#include "retlab/metrics.hpp"
#include "retlab/rng.hpp"
#include "retlab/train.hpp"
#include "retlab/verify.hpp"

#include "config_fuzz.hpp"

using namespace retlab;
namespace fs = std::filesystem;

namespace {

fs::path temp_dir(const std::string& name) {
  const fs::path dir = fs::temp_directory_path() / ("retlab_test_" + name);
  fs::remove_all(dir);
  fs::create_directories(dir);
  return dir;
}

std::string read_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

cli::RunConfig tiny_train_config(const std::string& out_dir) {
  cli::RunConfig config;
  config.seed = 11;
  config.out_dir = out_dir;
  config.encoder.num_layers = 1;
  config.encoder.model_dim = 8;
  config.encoder.num_heads = 2;
  config.encoder.ff_dim = 16;
  config.encoder.vocab_size = 32;
  config.encoder.max_seq_len = 12;
  config.encoder.num_classes = 2;
  config.encoder.rho = 0.5;
  config.budget.value = 0.5;
  config.optimizer.learning_rate = 0.05;
  config.optimizer.batch_size = 8;
  config.optimizer.epochs = 1;
  config.data.needle.seq_len = 12;
  config.data.needle.num_needles = 2;
  config.data.needle.num_classes = 2;
  config.data.needle.vocab_size = 32;
  config.data.n_train = 32;
  config.data.n_valid = 16;
  config.log_interval = 2;
  return config;
}

}  // namespace

TEST_CASE("config round-trips losslessly (500 generated cases)") {
  rng::Stream stream(404);
  for (int i = 0; i < 500; ++i) {
    const cli::RunConfig config = testutil::random_config(stream);
    const std::string text = cli::serialize_run_config(config);
    const cli::RunConfig parsed = cli::parse_run_config(text);
    REQUIRE(parsed == config);
  }
}

TEST_CASE("unknown config fields are rejected with their path") {
  const std::string text = R"({"seed": 1, "encoder": {"model_dimension": 64}})";
  CHECK_THROWS_WITH_AS(cli::parse_run_config(text),
                       "config: unknown field \"encoder.model_dimension\"",
                       cli::ConfigError);
  CHECK_THROWS_AS(cli::parse_run_config(R"({"sede": 1})"), cli::ConfigError);
  CHECK_THROWS_AS(cli::parse_run_config("not json"), cli::ConfigError);
}

TEST_CASE("checkpoint round-trips bitwise") {
  const fs::path dir = temp_dir("ckpt");
  enc::EncoderConfig config;
  config.num_layers = 2;
  config.model_dim = 12;
  config.num_heads = 3;
  config.ff_dim = 24;
  config.vocab_size = 40;
  config.max_seq_len = 10;
  config.num_classes = 3;
  const enc::Encoder original(config, 77);

  const std::string path = (dir / "model.bin").string();
  cli::save_checkpoint(path, original);
  const enc::Encoder loaded = cli::load_checkpoint(path);

  CHECK(loaded.config() == original.config());
  REQUIRE(loaded.parameters().size() == original.parameters().size());
  for (std::size_t i = 0; i < loaded.parameters().size(); ++i) {
    const auto& [name_a, tensor_a] = original.parameters()[i];
    const auto& [name_b, tensor_b] = loaded.parameters()[i];
    CHECK(name_a == name_b);
    REQUIRE(tensor_a.size() == tensor_b.size());
    for (std::size_t j = 0; j < tensor_a.size(); ++j) {
      CHECK(tensor_a.data()[j] == tensor_b.data()[j]);  // bitwise
    }
  }

  // saving the loaded model reproduces the file byte for byte
  const std::string path2 = (dir / "model2.bin").string();
  cli::save_checkpoint(path2, loaded);
  CHECK(read_file(path) == read_file(path2));
  fs::remove_all(dir);
}

TEST_CASE("unknown checkpoint versions are rejected") {
  const fs::path dir = temp_dir("ckpt_bad");
  const std::string path = (dir / "bad.bin").string();
  {
    std::ofstream out(path, std::ios::binary);
    out << R"({"format_version": 99, "encoder": {}, "manifest": []})" << "\n";
  }
  CHECK_THROWS_AS(cli::load_checkpoint(path), cli::DataError);
  fs::remove_all(dir);
}

TEST_CASE("metrics csv round trip and wall-clock stripping") {
  const fs::path dir = temp_dir("metrics");
  const std::string csv = (dir / "m.csv").string();
  const std::string jsonl = (dir / "m.jsonl").string();
  {
    cli::MetricsWriter writer(csv, jsonl);
    cli::MetricsRecord r;
    r.step = 50;
    r.task_loss = 1.25;
    r.lagrangian = 1.5;
    r.lambda = 0.125;
    r.expected_retention = 6.5;
    r.budget_violation = 0.5;
    r.eval_accuracy = 0.75;
    r.retention_recall = 0.9;
    r.wall_seconds = 12.5;
    writer.append(r);
  }
  const auto records = cli::read_metrics_csv(csv);
  REQUIRE(records.size() == 1);
  CHECK(records[0].step == 50);
  CHECK(records[0].lambda == 0.125);
  CHECK(records[0].wall_seconds == 12.5);

  const std::string stripped = cli::strip_wall_seconds_column(read_file(csv));
  CHECK(stripped.find("wall_seconds") == std::string::npos);
  CHECK(stripped.find("12.5") == std::string::npos);
  CHECK(stripped.find("0.90000000000000002") != std::string::npos);
  fs::remove_all(dir);
}

TEST_CASE("training is deterministic per (config, seed) modulo wall clock") {
  const fs::path dir_a = temp_dir("train_a");
  const fs::path dir_b = temp_dir("train_b");
  const cli::TrainResult a = cli::train_run(tiny_train_config(dir_a.string()));
  const cli::TrainResult b = cli::train_run(tiny_train_config(dir_b.string()));

  const std::string csv_a = cli::strip_wall_seconds_column(read_file(a.metrics_csv_path));
  const std::string csv_b = cli::strip_wall_seconds_column(read_file(b.metrics_csv_path));
  CHECK(csv_a == csv_b);
  CHECK(read_file(a.checkpoint_path) == read_file(b.checkpoint_path));

  // different seed must change the metrics
  cli::RunConfig other = tiny_train_config(dir_a.string() + "_s");
  other.seed = 12;
  const cli::TrainResult c = cli::train_run(other);
  CHECK(cli::strip_wall_seconds_column(read_file(c.metrics_csv_path)) != csv_a);
  fs::remove_all(dir_a);
  fs::remove_all(dir_b);
  fs::remove_all(dir_a.string() + "_s");
}

TEST_CASE("eval at full budget equals the ungated accuracy") {
  const fs::path dir = temp_dir("eval_full");
  cli::RunConfig config = tiny_train_config(dir.string());
  const cli::TrainResult trained = cli::train_run(config);
  const enc::Encoder encoder = cli::load_checkpoint(trained.checkpoint_path);

  data::Dataset train_set, valid_set;
  cli::load_datasets(config, train_set, valid_set);

  cli::EvalOptions options;
  options.rho = 1.0;
  const cli::EvalResult at_full = cli::evaluate(encoder, valid_set, options);
  const double ungated = cli::ungated_accuracy(encoder, valid_set);
  CHECK(at_full.accuracy == ungated);
  fs::remove_all(dir);
}

TEST_CASE("ingest: determinism, OOV mapping, empty-text handling") {
  const fs::path dir = temp_dir("ingest");
  const std::string path = (dir / "text.jsonl").string();
  {
    std::ofstream out(path, std::ios::binary);
    out << R"({"text": "the cat sat", "label": 0})" << "\n";
    out << R"({"text": "the dog sat down", "label": 1})" << "\n";
    out << R"({"text": "", "label": 0})" << "\n";
  }
  const cli::IngestResult a = cli::ingest_jsonl(path);
  const cli::IngestResult b = cli::ingest_jsonl(path);
  REQUIRE(a.dataset.size() == 3);
  CHECK(a.dataset[0].tokens == b.dataset[0].tokens);
  CHECK(a.dataset[1].tokens == b.dataset[1].tokens);
  // first-occurrence ids: the=2 cat=3 sat=4 dog=5 down=6
  CHECK(a.dataset[0].tokens == std::vector<int>({2, 3, 4}));
  CHECK(a.dataset[1].tokens == std::vector<int>({2, 5, 4, 6}));
  CHECK(a.dataset[2].tokens == std::vector<int>({0}));
  CHECK(a.empty_text_warnings == 1);

  // eval-time ingestion with the training vocabulary: unseen token -> 1
  const std::string eval_path = (dir / "eval.jsonl").string();
  {
    std::ofstream out(eval_path, std::ios::binary);
    out << R"({"text": "the bird sat", "label": 1})" << "\n";
  }
  const cli::IngestResult eval_set = cli::ingest_jsonl(eval_path, &a.vocab);
  CHECK(eval_set.dataset[0].tokens == std::vector<int>({2, 1, 4}));

  const std::string bad_path = (dir / "bad.jsonl").string();
  {
    std::ofstream out(bad_path, std::ios::binary);
    out << R"({"text": "fine", "label": 0})" << "\n";
    out << "{broken" << "\n";
  }
  try {
    cli::ingest_jsonl(bad_path);
    FAIL("expected DataError");
  } catch (const cli::DataError& err) {
    CHECK(std::string(err.what()).find(":2:") != std::string::npos);
  }
  fs::remove_all(dir);
}

TEST_CASE("verify report conforms to the published schema") {
  const verify::SuiteReport report = verify::run_suite("certificates", 1);
  const nlohmann::json j = verify::report_to_json({report});
  std::string error;
  CHECK(verify::validate_report_json(j, &error));
  CHECK(error.empty());

  nlohmann::json broken = j;
  broken.erase("pass");
  CHECK_FALSE(verify::validate_report_json(broken, &error));
  CHECK_FALSE(error.empty());
}
