#pragma once

#include <cstddef>
#include <functional>
#include <initializer_list>
#include <span>
#include <vector>

namespace calib {

using ClassIndex = std::size_t;

/// Central-difference step used by every gradient check in the project.
inline constexpr double kFiniteDiffStep = 1e-6;
/// Relative tolerance for analytic-vs-numeric gradient agreement.
inline constexpr double kGradientTolerance = 1e-6;

/// Raw class scores for one sample. Always at least two classes, all finite.
class LogitVector {
public:
    explicit LogitVector(std::vector<double> values);
    LogitVector(std::initializer_list<double> values);

    std::size_t size() const noexcept { return values_.size(); }
    double operator[](std::size_t i) const { return values_[i]; }
    std::span<const double> values() const noexcept { return values_; }

    /// Copy with entry `j` replaced; used by perturbation oracles and sweeps.
    LogitVector with(std::size_t j, double value) const;

    bool operator==(const LogitVector&) const = default;

private:
    std::vector<double> values_;
};

/// Softmax output. Entries are non-negative and sum to one within 1e-12.
class ProbVector {
public:
    /// Validates an externally supplied distribution (e.g. parsed from a file).
    static ProbVector from_values(std::vector<double> values);

    std::size_t size() const noexcept { return values_.size(); }
    double operator[](std::size_t i) const { return values_[i]; }
    std::span<const double> values() const noexcept { return values_; }

    bool operator==(const ProbVector&) const = default;

private:
    explicit ProbVector(std::vector<double> values) : values_(std::move(values)) {}
    friend ProbVector softmax(const LogitVector& z);

    std::vector<double> values_;
};

/// Training target q. Entries in [0, 1]; sums to one within 1e-12.
class TargetDistribution {
public:
    static TargetDistribution from_values(std::vector<double> values);

    std::size_t size() const noexcept { return values_.size(); }
    double operator[](std::size_t i) const { return values_[i]; }
    std::span<const double> values() const noexcept { return values_; }

private:
    explicit TargetDistribution(std::vector<double> values) : values_(std::move(values)) {}
    std::vector<double> values_;
};

ProbVector softmax(const LogitVector& z);

/// log(softmax(z)) via the log-sum-exp of max-shifted logits.
std::vector<double> log_softmax(const LogitVector& z);

TargetDistribution one_hot(ClassIndex y, std::size_t class_count);

/// Smallest index attaining the maximum. Throws on empty input.
ClassIndex argmax_tiebreak_lowest(std::span<const double> v);

using LogitLoss = std::function<double(const LogitVector&)>;

/// Per-class central differences (L(z + h e_j) - L(z - h e_j)) / 2h.
/// Throws OracleFailure if any evaluation is non-finite.
std::vector<double> finite_diff_gradient(const LogitLoss& loss_fn, const LogitVector& z,
                                         double h = kFiniteDiffStep);

/// max_j |a_j - b_j| / max(1, ||a||_inf). Sizes must match.
double relative_gradient_error(std::span<const double> analytic, std::span<const double> numeric);

}  // namespace calib
