#pragma once

// The canonical experiments as JSON-configured sweeps, a worker pool for
// independent cells, and the pass/fail checks attached to each experiment.

#include <functional>
#include <string>
#include <vector>

#include <json.hpp>

#include "pclab/synthdata.hpp"

namespace pclab {

struct DataSpec {
  DataKind kind = DataKind::kLocalCopy;
  std::size_t n = 16;
  std::size_t vocab = 16;
  std::size_t train_rows = 2000;
  std::size_t valid_rows = 500;
  double mix_p = 0.5;
  std::uint64_t task_seed = 7;
  std::uint64_t seed = 1;

  nlohmann::json to_json() const;
  static DataSpec from_json(const nlohmann::json& j);
  // Train and validation draws come from disjoint seed streams.
  SequenceBatch train() const;
  SequenceBatch valid() const;
};

struct ResultRow {
  std::string experiment;
  std::string cell;  // grouping key across seeds
  std::string family;
  std::string dataset;
  std::string variant;
  std::size_t d = 0;
  std::uint64_t seed = 0;
  double best_valid = 0;  // NaN when the run diverged
  std::size_t param_count = 0;
  std::size_t epochs = 0;
  std::size_t best_epoch = 0;
  double wall_seconds = 0;
  std::string status = "ok";
  nlohmann::json report;  // full train report(s)
};

struct CellSummary {
  std::string cell;
  std::size_t runs = 0;
  double mean = 0;
  double std = 0;  // sample std, 0 for a single run
};

struct Check {
  std::string name;
  bool passed = false;
  std::string detail;
};

struct ExperimentResult {
  std::string experiment;
  nlohmann::json config;
  std::vector<ResultRow> rows;
  std::vector<CellSummary> summary;
  std::vector<Check> checks;
  double wall_seconds = 0;

  bool passed() const;
  const CellSummary* find(const std::string& cell) const;
  nlohmann::json summary_json() const;
};

const std::vector<std::string>& experiment_names();

// Full config of a preset; scale multiplies data rows and epoch budgets.
nlohmann::json preset(const std::string& experiment, double scale = 1.0);

// Runs every cell (on `jobs` worker threads) and evaluates the checks.
ExperimentResult run_experiment(const nlohmann::json& config, std::size_t jobs = 1);

// Runs fn(i) for i in [0, count) on up to `jobs` threads. Exceptions are
// rethrown after all workers stop.
void parallel_for(std::size_t count, std::size_t jobs, const std::function<void(std::size_t)>& fn);

std::vector<CellSummary> summarize(const std::vector<ResultRow>& rows);

std::string csv_header();
std::string csv_line(const ResultRow& r);

// Stable 64-bit FNV-1a hash of the compact config dump, as 16 hex digits.
std::string config_hash(const nlohmann::json& config);

// Writes config.json, results.csv, summary.json and reports.jsonl into
// <root>/<experiment>-<hash>/ and returns that directory.
std::string write_results(const ExperimentResult& r, const std::string& root);

}  // namespace pclab
