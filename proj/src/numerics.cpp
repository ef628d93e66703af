#include "calib/numerics.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <string>

#include "calib/error.hpp"

namespace calib {
namespace {

constexpr double kSumTolerance = 1e-12;

void check_distribution(std::span<const double> v, const char* what) {
    if (v.size() < 2) {
        throw InvalidInput(std::string(what) + ": at least two classes required");
    }
    double sum = 0.0;
    for (double x : v) {
        if (!std::isfinite(x) || x < 0.0 || x > 1.0) {
            throw InvalidInput(std::string(what) + ": entries must lie in [0, 1]");
        }
        sum += x;
    }
    if (std::abs(sum - 1.0) > kSumTolerance) {
        throw InvalidInput(std::string(what) + ": entries must sum to 1");
    }
}

}  // namespace

LogitVector::LogitVector(std::vector<double> values) : values_(std::move(values)) {
    if (values_.size() < 2) {
        throw InvalidInput("LogitVector: at least two classes required");
    }
    for (double v : values_) {
        if (!std::isfinite(v)) throw InvalidInput("LogitVector: non-finite logit");
    }
}

LogitVector::LogitVector(std::initializer_list<double> values)
    : LogitVector(std::vector<double>(values)) {}

LogitVector LogitVector::with(std::size_t j, double value) const {
    std::vector<double> copy = values_;
    copy.at(j) = value;
    return LogitVector(std::move(copy));
}

ProbVector ProbVector::from_values(std::vector<double> values) {
    check_distribution(values, "ProbVector");
    return ProbVector(std::move(values));
}

TargetDistribution TargetDistribution::from_values(std::vector<double> values) {
    check_distribution(values, "TargetDistribution");
    return TargetDistribution(std::move(values));
}

ProbVector softmax(const LogitVector& z) {
    const auto v = z.values();
    const double zmax = *std::max_element(v.begin(), v.end());
    std::vector<double> p(v.size());
    double sum = 0.0;
    for (std::size_t j = 0; j < v.size(); ++j) {
        p[j] = std::exp(v[j] - zmax);
        sum += p[j];
    }
    for (double& x : p) x /= sum;
    return ProbVector(std::move(p));
}

std::vector<double> log_softmax(const LogitVector& z) {
    const auto v = z.values();
    const double zmax = *std::max_element(v.begin(), v.end());
    double sum = 0.0;
    for (double x : v) sum += std::exp(x - zmax);
    const double log_norm = zmax + std::log(sum);
    std::vector<double> out(v.size());
    for (std::size_t j = 0; j < v.size(); ++j) out[j] = v[j] - log_norm;
    return out;
}

TargetDistribution one_hot(ClassIndex y, std::size_t class_count) {
    if (class_count < 2) throw InvalidInput("one_hot: at least two classes required");
    if (y >= class_count) throw InvalidInput("one_hot: label out of range");
    std::vector<double> q(class_count, 0.0);
    q[y] = 1.0;
    return TargetDistribution::from_values(std::move(q));
}

ClassIndex argmax_tiebreak_lowest(std::span<const double> v) {
    if (v.empty()) throw InvalidInput("argmax: empty vector");
    ClassIndex best = 0;
    for (std::size_t j = 1; j < v.size(); ++j) {
        if (v[j] > v[best]) best = j;
    }
    return best;
}

std::vector<double> finite_diff_gradient(const LogitLoss& loss_fn, const LogitVector& z, double h) {
    if (!(h > 0.0)) throw InvalidInput("finite_diff_gradient: step must be positive");
    std::vector<double> grad(z.size());
    for (std::size_t j = 0; j < z.size(); ++j) {
        const double plus = loss_fn(z.with(j, z[j] + h));
        const double minus = loss_fn(z.with(j, z[j] - h));
        if (!std::isfinite(plus) || !std::isfinite(minus)) {
            throw OracleFailure("finite_diff_gradient: non-finite loss at class " + std::to_string(j));
        }
        grad[j] = (plus - minus) / (2.0 * h);
    }
    return grad;
}

double relative_gradient_error(std::span<const double> analytic, std::span<const double> numeric) {
    if (analytic.size() != numeric.size()) {
        throw InvalidInput("relative_gradient_error: size mismatch");
    }
    double scale = 1.0;
    double worst = 0.0;
    for (std::size_t j = 0; j < analytic.size(); ++j) {
        scale = std::max(scale, std::abs(analytic[j]));
        worst = std::max(worst, std::abs(analytic[j] - numeric[j]));
    }
    return worst / scale;
}

}  // namespace calib
