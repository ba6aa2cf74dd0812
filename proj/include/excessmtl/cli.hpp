#pragma once

#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "excessmtl/data.hpp"
#include "excessmtl/model.hpp"
#include "excessmtl/noise.hpp"
#include "excessmtl/trainer.hpp"

namespace excessmtl {

struct DatasetConfig {
  /// synthetic_classification, synthetic_regression or multimnist.
  std::string kind;
  std::size_t num_tasks = 2;
  std::size_t classes = 2;
  Index dim = 0;
  Index n = 0;
  double separation = 0.0;
  double noise_std = 0.0;
  std::uint64_t seed = 0;
  bool standardize = true;
  // multimnist inputs
  std::string train_images;
  std::string train_labels;
  std::string test_images;
  std::string test_labels;
  /// Use only the first `limit` images of each split (0 keeps all).
  std::size_t limit = 0;
  Index canvas = 36;
};

struct OutputConfig {
  std::string directory;
  std::vector<std::string> formats{"csv", "jsonl"};
};

struct ExperimentConfig {
  DatasetConfig dataset;
  std::vector<Index> trunk_layers;
  std::vector<NoiseSpec> noise;
  TrainConfig train;
  OutputConfig output;
};

/// Environment variable that relocates relative output directories.
inline constexpr const char* kOutputRootEnv = "EXCESSMTL_OUTPUT_ROOT";

/// Strict schema: unknown keys and missing scientific parameters (step
/// sizes, seeds, epochs, batch size, strategy) are ConfigErrors naming the
/// field.
ExperimentConfig parse_config(const nlohmann::json& j);
ExperimentConfig load_config(const std::filesystem::path& path);

/// Every field written out explicitly, defaults included.
nlohmann::json to_json(const ExperimentConfig& cfg);

/// Generated or loaded datasets with noise applied to train splits and
/// inputs standardized with train statistics.
std::vector<TaskSplits> build_datasets(const ExperimentConfig& cfg);
ModelSpec build_model_spec(const ExperimentConfig& cfg, const std::vector<TaskSplits>& data);

std::filesystem::path resolve_output_dir(const std::string& directory);

struct RunSummary {
  std::string strategy;
  std::vector<std::string> metric_kinds;
  std::vector<double> final_test_metric;
  /// Mean training loss of each task over the last epoch.
  std::vector<double> final_train_loss;
  std::vector<double> final_alpha;
  std::vector<std::size_t> noisy_tasks;
  std::size_t steps = 0;
};

nlohmann::json to_json(const RunSummary& s);
RunSummary summary_from_json(const nlohmann::json& j);

/// Trains and writes metrics.csv, metrics.jsonl, summary.json and
/// config.resolved.json into `out_dir`.
RunSummary run_experiment(const ExperimentConfig& cfg, const std::filesystem::path& out_dir);

/// cell seed = base seed XOR FNV-1a("<strategy>|<level>").
std::uint64_t sweep_cell_seed(std::uint64_t base_seed, const std::string& strategy, double level);

// Exit codes: 0 success, 1 runtime or I/O failure, 2 configuration error,
// 3 numerical divergence.
int cmd_run(const std::filesystem::path& config_path, std::ostream& out, std::ostream& err);
int cmd_sweep(const std::filesystem::path& config_path, const std::vector<double>& levels,
              const std::vector<std::string>& strategies, std::ostream& out, std::ostream& err);
int cmd_compare(const std::vector<std::filesystem::path>& run_dirs,
                const std::filesystem::path& csv_path, std::ostream& out, std::ostream& err);

}  // namespace excessmtl
