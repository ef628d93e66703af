#include "calib/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <numeric>
#include <ostream>

#include "calib/error.hpp"

namespace calib {
namespace {

double bin_edge(std::size_t i, std::size_t bin_count) {
    return static_cast<double>(i) / static_cast<double>(bin_count);
}

void check_bins(std::size_t bin_count) {
    if (bin_count < 1) throw InvalidInput("bin count must be at least 1");
}

struct BinSums {
    std::size_t count = 0;
    double confidence = 0.0;
    double correct = 0.0;
};

double weighted_gap(std::span<const BinSums> bins, std::size_t n) {
    double total = 0.0;
    for (const auto& b : bins) total += std::abs(b.correct - b.confidence);
    return 100.0 * total / static_cast<double>(n);
}

std::vector<BinSums> equal_width_sums(const PredictionSet& preds, std::size_t bin_count) {
    std::vector<BinSums> sums(bin_count);
    for (std::size_t i = 0; i < preds.size(); ++i) {
        const double c = preds.confidence(i);
        auto& b = sums[equal_width_bin(c, bin_count)];
        ++b.count;
        b.confidence += c;
        b.correct += preds.correct(i) ? 1.0 : 0.0;
    }
    return sums;
}

}  // namespace

PredictionSet::PredictionSet(std::vector<ProbVector> probabilities, std::vector<ClassIndex> labels)
    : probabilities_(std::move(probabilities)), labels_(std::move(labels)) {
    if (labels_.empty()) throw InvalidInput("PredictionSet: empty prediction set");
    if (probabilities_.size() != labels_.size()) {
        throw InvalidInput("PredictionSet: probabilities and labels differ in length");
    }
    const std::size_t c = probabilities_.front().size();
    for (std::size_t i = 0; i < labels_.size(); ++i) {
        if (probabilities_[i].size() != c) throw InvalidInput("PredictionSet: ragged rows");
        if (labels_[i] >= c) throw InvalidInput("PredictionSet: label out of range");
    }
}

PredictionSet PredictionSet::from_logits(std::span<const LogitVector> logits,
                                         std::span<const ClassIndex> labels, double temperature) {
    std::vector<ProbVector> probs;
    probs.reserve(logits.size());
    for (const auto& z : logits) probs.push_back(apply_temperature(z, temperature));
    return PredictionSet(std::move(probs), {labels.begin(), labels.end()});
}

double PredictionSet::confidence(std::size_t i) const {
    const auto v = probabilities_[i].values();
    return *std::max_element(v.begin(), v.end());
}

bool PredictionSet::correct(std::size_t i) const {
    return argmax_tiebreak_lowest(probabilities_[i].values()) == labels_[i];
}

std::size_t equal_width_bin(double confidence, std::size_t bin_count) {
    check_bins(bin_count);
    if (!(confidence > 0.0)) return 0;
    auto b = static_cast<std::size_t>(
        std::max(0.0, std::ceil(confidence * static_cast<double>(bin_count)) - 1.0));
    b = std::min(b, bin_count - 1);
    // Correct for rounding in confidence * B against the stored edges.
    while (b > 0 && confidence <= bin_edge(b, bin_count)) --b;
    while (b + 1 < bin_count && confidence > bin_edge(b + 1, bin_count)) ++b;
    return b;
}

double ece(const PredictionSet& preds, std::size_t bin_count) {
    check_bins(bin_count);
    return weighted_gap(equal_width_sums(preds, bin_count), preds.size());
}

double aece(const PredictionSet& preds, std::size_t bin_count) {
    check_bins(bin_count);
    const std::size_t n = preds.size();
    if (bin_count > n) throw InvalidInput("aece: more bins than samples");
    std::vector<std::size_t> order(n);
    std::iota(order.begin(), order.end(), std::size_t{0});
    std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
        return preds.confidence(a) < preds.confidence(b);
    });
    std::vector<BinSums> sums(bin_count);
    const std::size_t base = n / bin_count;
    const std::size_t extra = n % bin_count;
    std::size_t pos = 0;
    for (std::size_t b = 0; b < bin_count; ++b) {
        const std::size_t size = base + (b < extra ? 1 : 0);
        for (std::size_t k = 0; k < size; ++k, ++pos) {
            const std::size_t i = order[pos];
            ++sums[b].count;
            sums[b].confidence += preds.confidence(i);
            sums[b].correct += preds.correct(i) ? 1.0 : 0.0;
        }
    }
    return weighted_gap(sums, n);
}

std::vector<ReliabilityBin> reliability_diagram(const PredictionSet& preds, std::size_t bin_count) {
    check_bins(bin_count);
    const auto sums = equal_width_sums(preds, bin_count);
    std::vector<ReliabilityBin> bins(bin_count);
    for (std::size_t b = 0; b < bin_count; ++b) {
        bins[b].lower = bin_edge(b, bin_count);
        bins[b].upper = bin_edge(b + 1, bin_count);
        bins[b].count = sums[b].count;
        if (sums[b].count > 0) {
            const auto c = static_cast<double>(sums[b].count);
            bins[b].mean_confidence = sums[b].confidence / c;
            bins[b].mean_accuracy = sums[b].correct / c;
        }
    }
    return bins;
}

double accuracy(const PredictionSet& preds) {
    std::size_t hits = 0;
    for (std::size_t i = 0; i < preds.size(); ++i) hits += preds.correct(i) ? 1 : 0;
    return 100.0 * static_cast<double>(hits) / static_cast<double>(preds.size());
}

double nll(const PredictionSet& preds) {
    double total = 0.0;
    for (std::size_t i = 0; i < preds.size(); ++i) {
        total -= std::log(preds.probabilities(i)[preds.label(i)]);
    }
    return total / static_cast<double>(preds.size());
}

CalibrationReport calibration_report(const PredictionSet& preds, std::size_t bin_count) {
    CalibrationReport r;
    r.ece = ece(preds, bin_count);
    r.aece = aece(preds, bin_count);
    r.accuracy = accuracy(preds);
    r.nll = nll(preds);
    r.bins = reliability_diagram(preds, bin_count);
    return r;
}

void write_reliability_csv(std::ostream& out, std::span<const ReliabilityBin> bins) {
    out << "bin_lower,bin_upper,count,mean_confidence,mean_accuracy\n";
    char buf[64];
    auto put = [&](double v) {
        std::snprintf(buf, sizeof buf, "%.17g", v);
        out << buf;
    };
    for (const auto& b : bins) {
        put(b.lower);
        out << ',';
        put(b.upper);
        out << ',' << b.count << ',';
        if (b.mean_confidence) put(*b.mean_confidence);
        out << ',';
        if (b.mean_accuracy) put(*b.mean_accuracy);
        out << '\n';
    }
}

std::vector<double> temperature_candidates(const TemperatureGrid& grid) {
    if (!(grid.t_min > 0.0)) throw InvalidInput("temperature grid: t_min must be positive");
    if (!(grid.t_max >= grid.t_min)) throw InvalidInput("temperature grid: t_max < t_min");
    if (grid.steps < 1) throw InvalidInput("temperature grid: at least one step required");
    std::vector<double> out;
    out.reserve(grid.steps + 1);
    if (grid.steps == 1) {
        out.push_back(grid.t_min);
        return out;
    }
    const double log_ratio = std::log(grid.t_max / grid.t_min);
    for (std::size_t i = 0; i < grid.steps; ++i) {
        const double frac = static_cast<double>(i) / static_cast<double>(grid.steps - 1);
        out.push_back(i + 1 == grid.steps ? grid.t_max : grid.t_min * std::exp(log_ratio * frac));
    }
    if (grid.t_min <= 1.0 && 1.0 <= grid.t_max) out.push_back(1.0);
    std::sort(out.begin(), out.end());
    out.erase(std::unique(out.begin(), out.end()), out.end());
    return out;
}

double nll_at_temperature(std::span<const LogitVector> logits, std::span<const ClassIndex> labels,
                          double temperature) {
    if (logits.empty()) throw InvalidInput("nll_at_temperature: empty input");
    if (logits.size() != labels.size()) throw InvalidInput("nll_at_temperature: size mismatch");
    if (!(temperature > 0.0)) throw InvalidInput("temperature must be positive");
    double total = 0.0;
    std::vector<double> scaled;
    for (std::size_t i = 0; i < logits.size(); ++i) {
        const auto v = logits[i].values();
        if (labels[i] >= v.size()) throw InvalidInput("nll_at_temperature: label out of range");
        scaled.assign(v.begin(), v.end());
        for (double& x : scaled) x /= temperature;
        total -= log_softmax(LogitVector(scaled))[labels[i]];
    }
    return total / static_cast<double>(logits.size());
}

double fit_temperature(std::span<const LogitVector> logits, std::span<const ClassIndex> labels,
                       const TemperatureGrid& grid) {
    if (logits.empty()) throw InvalidInput("fit_temperature: empty input");
    double best_t = 0.0;
    double best_nll = INFINITY;
    for (double t : temperature_candidates(grid)) {
        const double v = nll_at_temperature(logits, labels, t);
        if (v < best_nll) {
            best_nll = v;
            best_t = t;
        }
    }
    return best_t;
}

ProbVector apply_temperature(const LogitVector& z, double temperature) {
    if (!(temperature > 0.0)) throw InvalidInput("temperature must be positive");
    if (temperature == 1.0) return softmax(z);
    std::vector<double> scaled(z.values().begin(), z.values().end());
    for (double& x : scaled) x /= temperature;
    return softmax(LogitVector(std::move(scaled)));
}

}  // namespace calib
