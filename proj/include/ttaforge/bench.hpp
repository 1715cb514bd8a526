// SPDX-License-Identifier: Apache-2.0
#pragma once

// Experiment runner: methods x corruptions x severities x seeds, with CSV
// and plain-text table output.
//
// Config files are flat `key = value` lines; `#` starts a comment. Lists are
// comma separated. See README.md for the full key reference.

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <map>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include "ttaforge/backbone.hpp"
#include "ttaforge/data.hpp"
#include "ttaforge/methods.hpp"
#include "ttaforge/stats.hpp"

namespace ttaforge {

struct ExperimentConfig {
  // data
  std::size_t classes = 3;
  std::size_t source_per_class = 200;
  std::size_t target_per_class = 2000;
  std::size_t image_size = 8;
  std::size_t channels = 1;
  std::uint64_t data_seed = 1;
  std::uint64_t target_seed = 2;
  std::uint64_t noise_seed = 5;
  // model
  std::size_t patch_size = 4;
  std::size_t d_model = 32;
  std::size_t depth = 2;
  std::size_t heads = 4;
  std::size_t mlp_ratio = 2;
  std::uint64_t model_seed = 7;
  std::size_t train_steps = 200;
  double train_lr = 0.05;
  std::size_t train_batch_size = 64;
  std::string model_path;  // load instead of training when set
  std::string stats_path;  // load instead of computing when set
  // protocol
  std::vector<Method> methods = {Method::Source, Method::CFA};
  std::vector<CorruptionKind> corruptions = {CorruptionKind::GaussianNoise};
  std::vector<int> severities = {5};
  std::size_t seeds = 3;  // data-ordering seeds 0..seeds-1
  // adaptation (shared by every method)
  AdaptConfig adapt;
  // execution
  std::size_t jobs = 1;
  std::string out = "report.csv";

  /// Applies one key/value pair; throws ConfigError on unknown keys or bad values.
  void set(std::string_view key, std::string_view value);
  void validate() const;
  /// Canonical key/value listing (used for the report echo).
  std::vector<std::pair<std::string, std::string>> entries() const;

  ModelConfig model_config() const;
  SyntheticSpec source_spec() const;
  SyntheticSpec target_spec() const;
};

ExperimentConfig parse_config(std::istream& in);
ExperimentConfig load_config(const std::filesystem::path& path);

/// Everything a run needs that does not depend on the cell: the source
/// model, source statistics, and the clean target split.
struct ExperimentContext {
  Model model;
  Dataset source;
  Dataset target;
  SourceStatistics stats;
  FeatureGaussian gaussian;
};

/// Builds (or loads) the source model and statistics.
ExperimentContext prepare_context(const ExperimentConfig& config);

/// Source statistics and TFA(-) moments of a model over a labelled split.
SourceStatistics compute_source_statistics(const Model& model, const Dataset& source, int max_order, bool normalize,
                                           double eps = kDefaultLnEps);
FeatureGaussian compute_feature_gaussian(const Model& model, const Dataset& source);
/// Writes both into one statistics container.
void save_source_statistics(const SourceStatistics& stats, const FeatureGaussian* gaussian,
                            const std::filesystem::path& path);

struct Aggregate {
  double mean = 0.0;
  double std = 0.0;       // divisor n-1
  bool single = false;    // n == 1, std reported as 0
};

/// Mean and unbiased standard deviation; throws on an empty list.
Aggregate aggregate(const std::vector<double>& values);

struct CellResult {
  std::string axis;        // empty for plain runs
  std::string axis_value;
  Method method = Method::Source;
  CorruptionKind corruption = CorruptionKind::Identity;
  int severity = 0;
  std::vector<std::uint64_t> seeds;
  std::vector<double> errors;         // top-1 error in percent, per seed
  std::vector<bool> catastrophic;     // per seed
  std::vector<std::string> failures;  // diagnostics for catastrophic seeds
  std::vector<std::vector<double>> losses;  // per seed, per batch
  Aggregate summary;
};

struct RunReport {
  ExperimentConfig config;
  std::vector<CellResult> cells;
  double wall_seconds = 0.0;
};

/// Top-1 error (percent) of per-batch predictions against batch labels.
double top1_error(const std::vector<std::vector<int>>& predictions, const std::vector<Batch>& stream);

/// Runs every (method, corruption, severity) cell of the config. Each seed of
/// each cell adapts a fresh copy of the source model. Cells run on up to
/// `config.jobs` threads; results do not depend on scheduling.
RunReport run_experiment(const ExperimentConfig& config, const ExperimentContext& context);
RunReport run_experiment(const ExperimentConfig& config);

enum class SweepAxis { LearningRate, BatchSize, Lambda, Clip };
SweepAxis parse_axis(std::string_view name);
std::string_view to_string(SweepAxis axis);
/// The values swept on an axis, as strings accepted by ExperimentConfig::set.
std::vector<std::string> sweep_values(SweepAxis axis);

/// One run per axis value with everything else at the config's values.
RunReport sweep(const ExperimentConfig& config, SweepAxis axis, const ExperimentContext& context);
RunReport sweep(const ExperimentConfig& config, SweepAxis axis);

inline constexpr std::string_view kCsvHeader =
    "axis,axis_value,method,corruption,severity,row,seed,top1_error,mean,std,n_seeds,catastrophic";

void write_csv(const RunReport& report, std::ostream& out);
void write_csv(const RunReport& report, const std::filesystem::path& path);
/// Human-readable tables (methods x corruption/severity, mean +- std) with a config echo.
void write_summary(const RunReport& report, std::ostream& out);

}  // namespace ttaforge
