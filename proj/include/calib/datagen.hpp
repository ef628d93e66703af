#pragma once

#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <span>
#include <vector>

#include "calib/numerics.hpp"

namespace calib {

/// Row-major feature matrix with labels and held-out split membership.
struct Dataset {
    std::size_t dim = 0;
    std::size_t class_count = 0;
    std::vector<double> features;  ///< size() * dim values
    std::vector<ClassIndex> labels;
    std::vector<std::size_t> train;
    std::vector<std::size_t> val;
    std::vector<std::size_t> test;

    std::size_t size() const noexcept { return labels.size(); }
    std::span<const double> row(std::size_t i) const {
        return std::span<const double>(features).subspan(i * dim, dim);
    }

    /// Throws InvalidInput on inconsistent shapes, labels >= class_count or
    /// overlapping / out-of-range split indices.
    void validate() const;
};

struct GaussianMixtureSpec {
    std::size_t class_count = 3;
    std::size_t dim = 2;
    std::vector<std::vector<double>> means;
    double stddev = 0.9;
    std::size_t samples_per_class = 1500;
    double label_noise = 0.1;
    std::uint64_t seed = 0;
};

/// Class means evenly spaced on a circle of `radius` in the first two
/// coordinates (angle 360 c / C degrees); remaining coordinates are zero.
std::vector<std::vector<double>> circle_means(std::size_t class_count, std::size_t dim,
                                              double radius);

/// Three overlapping classes at 0/120/240 degrees, radius 1.2, sigma 0.9,
/// 10% label noise, 1500 samples per class.
GaussianMixtureSpec default_benchmark_spec(std::uint64_t seed = 0);

/// Samples are emitted class-major. Feature draws and label-noise draws use
/// separate streams derived from `seed`, so changing the noise rate leaves
/// the features untouched. Exactly round(rate * N) labels are reassigned,
/// each to a uniformly chosen different class.
Dataset gen_gaussian_mixture(const GaussianMixtureSpec& spec);

struct SplitFractions {
    double train = 0.8;
    double val = 0.1;
    double test = 0.1;
};

/// Class-stratified seeded split. Per class, the cumulative quotas are
/// rounded to nearest and each split takes the difference, so every
/// split's per-class count is within one of fraction * class size.
Dataset split(const Dataset& dataset, const SplitFractions& fractions, std::uint64_t seed);

/// Header `f0,...,f{D-1},label`; 17 significant digits; LF line endings.
void save_csv(const Dataset& dataset, std::ostream& out);
void save_csv(const Dataset& dataset, const std::filesystem::path& path);

/// Splits are left empty. class_count is max(2, largest label + 1).
Dataset load_csv(std::istream& in);
Dataset load_csv(const std::filesystem::path& path);

}  // namespace calib
