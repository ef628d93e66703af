#pragma once

#include <cstddef>
#include <iosfwd>
#include <optional>
#include <span>
#include <vector>

#include "calib/numerics.hpp"

namespace calib {

inline constexpr std::size_t kDefaultBinCount = 15;

/// N >= 1 probability rows with matching labels.
class PredictionSet {
public:
    PredictionSet(std::vector<ProbVector> probabilities, std::vector<ClassIndex> labels);

    static PredictionSet from_logits(std::span<const LogitVector> logits,
                                     std::span<const ClassIndex> labels, double temperature = 1.0);

    std::size_t size() const noexcept { return labels_.size(); }
    std::size_t class_count() const noexcept { return probabilities_.front().size(); }
    const ProbVector& probabilities(std::size_t i) const { return probabilities_[i]; }
    ClassIndex label(std::size_t i) const { return labels_[i]; }

    /// Max probability of row i.
    double confidence(std::size_t i) const;
    /// Whether the lowest-index argmax of row i equals its label.
    bool correct(std::size_t i) const;

private:
    std::vector<ProbVector> probabilities_;
    std::vector<ClassIndex> labels_;
};

struct ReliabilityBin {
    double lower = 0.0;
    double upper = 0.0;
    std::size_t count = 0;
    std::optional<double> mean_confidence;  ///< empty when count == 0
    std::optional<double> mean_accuracy;
};

struct CalibrationReport {
    double ece = 0.0;       ///< percent
    double aece = 0.0;      ///< percent
    double accuracy = 0.0;  ///< percent
    double nll = 0.0;
    std::vector<ReliabilityBin> bins;
};

/// Equal-width bins (b/B, (b+1)/B]; a confidence of exactly 0 falls in bin 0.
std::size_t equal_width_bin(double confidence, std::size_t bin_count);

/// Expected calibration error in percent over equal-width bins.
double ece(const PredictionSet& preds, std::size_t bin_count = kDefaultBinCount);

/// Adaptive ECE in percent: confidences stably sorted, cut into B contiguous
/// bins whose sizes differ by at most one (larger bins first).
double aece(const PredictionSet& preds, std::size_t bin_count = kDefaultBinCount);

std::vector<ReliabilityBin> reliability_diagram(const PredictionSet& preds,
                                                std::size_t bin_count = kDefaultBinCount);

double accuracy(const PredictionSet& preds);
double nll(const PredictionSet& preds);

CalibrationReport calibration_report(const PredictionSet& preds,
                                     std::size_t bin_count = kDefaultBinCount);

/// `bin_lower,bin_upper,count,mean_confidence,mean_accuracy`; empty means as empty fields.
void write_reliability_csv(std::ostream& out, std::span<const ReliabilityBin> bins);

struct TemperatureGrid {
    double t_min = 0.05;
    double t_max = 10.0;
    std::size_t steps = 512;
};

/// Geometric grid from t_min to t_max, plus T = 1 when it lies inside a
/// multi-point grid. Sorted ascending, duplicates removed.
std::vector<double> temperature_candidates(const TemperatureGrid& grid);

double nll_at_temperature(std::span<const LogitVector> logits, std::span<const ClassIndex> labels,
                          double temperature);

/// Candidate with the lowest NLL of softmax(z / T); ties go to the smaller T.
double fit_temperature(std::span<const LogitVector> logits, std::span<const ClassIndex> labels,
                       const TemperatureGrid& grid = {});

ProbVector apply_temperature(const LogitVector& z, double temperature);

}  // namespace calib
