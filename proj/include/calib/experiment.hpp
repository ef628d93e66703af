#pragma once

#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <optional>
#include <string>
#include <variant>
#include <vector>

#include <json.hpp>

#include "calib/datagen.hpp"
#include "calib/losses.hpp"
#include "calib/metrics.hpp"
#include "calib/trainer.hpp"

namespace calib {

// ---------------------------------------------------------------------------
// Method specs as text

/// Hyperparameter defaults applied to methods with a margin when the
/// config does not set one: "default" -> M = 10, "cifar10" -> M = 6.
double profile_margin(const std::string& profile);

/// {"name": "acls", "lambda1": 0.1, ...}. Unknown keys raise ConfigError.
MethodSpec method_from_json(const nlohmann::json& j, double default_margin = 10.0);
nlohmann::json method_to_json(const MethodSpec& spec);

/// "acls:lambda1=0.1,lambda2=0.01,margin=1"
MethodSpec parse_method_string(const std::string& text, double default_margin = 10.0);

// ---------------------------------------------------------------------------
// Experiments

struct MethodEntry {
    std::string label;  ///< used in file names; unique within a config
    MethodSpec spec;
};

struct ExperimentConfig {
    std::variant<GaussianMixtureSpec, std::filesystem::path> dataset;
    SplitFractions split;
    std::uint64_t split_seed = 0;
    TrainConfig train;  ///< method and seed are filled per run
    std::vector<MethodEntry> methods;
    std::vector<std::uint64_t> seeds;
    std::size_t bin_count = kDefaultBinCount;
    std::filesystem::path output_dir;
};

/// Strict parse: unknown keys, wrong types and invalid values raise ConfigError.
ExperimentConfig parse_config(const nlohmann::json& j);
ExperimentConfig load_config(const std::filesystem::path& path);

struct RunRecord {
    std::string label;
    MethodSpec spec;
    std::uint64_t seed = 0;
    bool ok = false;
    std::string error;
    std::optional<int> diverged_epoch;
    CalibrationReport val;
    CalibrationReport test;
    bool loss_partial = false;
    std::size_t prediction_flip_count = 0;
    double final_reg_inactive_fraction = 0.0;
};

struct MetricStats {
    double mean = 0.0;
    double stddev = 0.0;  ///< sample standard deviation; 0 for a single run
};

struct MethodAggregate {
    std::string label;
    std::size_t runs = 0;  ///< successful runs contributing to the statistics
    MetricStats val_ece, val_aece, val_accuracy;
    MetricStats test_ece, test_aece, test_accuracy;
};

struct ExperimentSummary {
    std::vector<RunRecord> runs;  ///< method-major, then seed, in config order
    std::vector<MethodAggregate> aggregates;
    bool any_failed() const;
};

/// Builds the dataset described by the config and applies its split.
Dataset materialize_dataset(const ExperimentConfig& config);

/// One training run per (method, seed). Writes into config.output_dir:
///   summary.json, reliability_<label>_<seed>.csv (test split),
///   trace_<label>_<seed>.csv, activity_<label>_<seed>.csv,
///   logits_<label>_<seed>.csv.
/// `threads` == 0 reads CALIB_THREADS (default: hardware concurrency).
ExperimentSummary run_experiment(const ExperimentConfig& config, std::size_t threads = 0);

/// The JSON written to summary.json. `generated_at` is the only
/// non-reproducible field.
nlohmann::json summary_to_json(const ExperimentSummary& summary, std::size_t bin_count,
                               const std::string& generated_at);

/// The published schema (schema/summary.schema.json).
const nlohmann::json& summary_schema();

/// Validates `doc` against the subset of JSON Schema used by the repo
/// (type, required, properties, additionalProperties, items, enum,
/// minimum, maximum, $ref into #/$defs). Returns the first violation.
std::optional<std::string> schema_violation(const nlohmann::json& doc, const nlohmann::json& schema);

/// Worker-slot count: CALIB_THREADS if set and positive, else hardware concurrency.
std::size_t worker_slots();

// ---------------------------------------------------------------------------
// Gradient anatomy

enum class SweepAxis { logit, probability };
enum class SweepBranch { automatic, yhat, other };

struct SweepConfig {
    std::optional<ClassIndex> target;  ///< default: argmax of the input logits
    SweepAxis axis = SweepAxis::logit;
    SweepBranch branch = SweepBranch::automatic;
    double from = -5.0;
    double to = 5.0;
    std::size_t steps = 101;
};

struct SweepPoint {
    double x = 0.0;
    double z = 0.0;
    double p = 0.0;
    ClassIndex yhat = 0;
    double f = 0.0;
    std::uint8_t indicator = 0;
    double reg_grad = 0.0;
    double total_grad = 0.0;
};

struct Anatomy {
    LogitVector logits;
    ProbVector probabilities;
    GradientDecomposition decomposition;
    std::vector<SweepPoint> sweep;
};

Anatomy anatomy(const MethodSpec& spec, const LogitVector& z, ClassIndex y,
                const std::optional<PairContext>& ctx, const SweepConfig& sweep);

void write_anatomy_table(std::ostream& out, const Anatomy& a);
/// `x,z,p,yhat,f,indicator,reg_grad,total_grad`
void write_sweep_csv(std::ostream& out, std::span<const SweepPoint> points);

// ---------------------------------------------------------------------------
// Regularizer-activity histograms

struct HistogramBin {
    double lower = 0.0;
    double upper = 0.0;
    std::size_t count = 0;
};

/// Values clipped into [lo, hi] and counted in equal-width bins [a, b); the
/// last bin also takes hi.
std::vector<HistogramBin> reg_histogram(std::span<const double> values, std::size_t bins = 20,
                                        double lo = 0.0, double hi = 0.1);

/// Share of the total count in the first bin.
double first_bin_share(std::span<const HistogramBin> bins);

void write_histogram_csv(std::ostream& out, std::span<const HistogramBin> bins);

/// Reads every activity_<label>_<seed>.csv in `run_dir`, writes the matching
/// reg_hist_<label>_<seed>.csv and returns (stem, histogram) pairs in name order.
std::vector<std::pair<std::string, std::vector<HistogramBin>>> reg_histogram_dir(
    const std::filesystem::path& run_dir);

std::vector<double> read_activity_csv(const std::filesystem::path& path);

// ---------------------------------------------------------------------------
// Post-hoc temperature scaling

struct LogitsTable {
    std::vector<LogitVector> val_logits;
    std::vector<ClassIndex> val_labels;
    std::vector<LogitVector> test_logits;
    std::vector<ClassIndex> test_labels;
};

/// `split,z0,...,z{C-1},label` with split in {val, test}.
void write_logits_csv(std::ostream& out, const LogitsTable& table);
LogitsTable read_logits_csv(std::istream& in);
LogitsTable read_logits_csv(const std::filesystem::path& path);

struct TemperatureReport {
    double temperature = 1.0;
    double val_nll_before = 0.0;
    double val_nll_after = 0.0;
    std::optional<CalibrationReport> test_before;
    std::optional<CalibrationReport> test_after;
};

/// Fits T on the val rows, evaluates before/after on test rows.
/// Throws InvalidInput when there are no val rows.
TemperatureReport posthoc_ts(const LogitsTable& table, std::size_t bin_count = kDefaultBinCount,
                             const TemperatureGrid& grid = {});

nlohmann::json temperature_report_to_json(const TemperatureReport& r);

}  // namespace calib
