#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include <json.hpp>

// Verification suites behind the `verify` subcommand: gradient checks,
// estimator unbiasedness, variance scaling, two-timescale convergence, and
// the slackness/duality certificates, each with fixed seeds and a JSON
// report.

namespace retlab::verify {

struct Check {
  std::string name;
  bool pass = false;
  double value = 0.0;
  double threshold = 0.0;
  std::string comparison;  // "<", "<=", ">", ">=", "=="
};

struct SuiteReport {
  std::string name;
  std::vector<Check> checks;
  bool pass = false;
  double seconds = 0.0;
};

SuiteReport run_gradients_suite(std::uint64_t seed);
SuiteReport run_unbiasedness_suite(std::uint64_t seed);
SuiteReport run_variance_suite(std::uint64_t seed);
SuiteReport run_convergence_suite(std::uint64_t seed);
SuiteReport run_certificates_suite(std::uint64_t seed);

const std::vector<std::string>& suite_names();
SuiteReport run_suite(const std::string& name, std::uint64_t seed);

nlohmann::json report_to_json(const std::vector<SuiteReport>& suites);

// Structural validation against the published report schema
// (docs/verify_report.schema.json).
bool validate_report_json(const nlohmann::json& report, std::string* error = nullptr);

}  // namespace retlab::verify
