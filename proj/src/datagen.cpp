#include "calib/datagen.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <numbers>
#include <numeric>
#include <sstream>
#include <string>

#include "calib/error.hpp"
#include "calib/rng.hpp"

namespace calib {
namespace {

std::size_t round_count(double x) { return static_cast<std::size_t>(std::floor(x + 0.5)); }


std::vector<std::string> split_fields(const std::string& line) {
    std::vector<std::string> fields;
    std::string field;
    std::istringstream ss(line);
    while (std::getline(ss, field, ',')) fields.push_back(field);
    if (!line.empty() && line.back() == ',') fields.emplace_back();
    return fields;
}

}  // namespace

void Dataset::validate() const {
    if (dim == 0) throw InvalidInput("Dataset: zero feature dimension");
    if (class_count < 2) throw InvalidInput("Dataset: at least two classes required");
    if (features.size() != labels.size() * dim) throw InvalidInput("Dataset: feature/label size mismatch");
    for (ClassIndex y : labels) {
        if (y >= class_count) throw InvalidInput("Dataset: label out of range");
    }
    std::vector<char> seen(labels.size(), 0);
    for (const auto* part : {&train, &val, &test}) {
        for (std::size_t i : *part) {
            if (i >= labels.size()) throw InvalidInput("Dataset: split index out of range");
            if (seen[i]) throw InvalidInput("Dataset: splits overlap");
            seen[i] = 1;
        }
    }
}

std::vector<std::vector<double>> circle_means(std::size_t class_count, std::size_t dim,
                                              double radius) {
    if (dim < 2) throw InvalidInput("circle_means: dim must be at least 2");
    std::vector<std::vector<double>> means(class_count, std::vector<double>(dim, 0.0));
    for (std::size_t c = 0; c < class_count; ++c) {
        const double angle = 2.0 * std::numbers::pi * static_cast<double>(c) /
                             static_cast<double>(class_count);
        means[c][0] = radius * std::cos(angle);
        means[c][1] = radius * std::sin(angle);
    }
    return means;
}

GaussianMixtureSpec default_benchmark_spec(std::uint64_t seed) {
    GaussianMixtureSpec spec;
    spec.means = circle_means(3, 2, 1.2);
    spec.seed = seed;
    return spec;
}

Dataset gen_gaussian_mixture(const GaussianMixtureSpec& spec) {
    if (spec.class_count < 2) throw InvalidInput("mixture: at least two classes required");
    if (spec.dim < 1) throw InvalidInput("mixture: dim must be positive");
    if (spec.means.size() != spec.class_count) throw InvalidInput("mixture: one mean per class required");
    for (const auto& m : spec.means) {
        if (m.size() != spec.dim) throw InvalidInput("mixture: mean dimension mismatch");
    }
    if (!(spec.stddev > 0.0)) throw InvalidInput("mixture: stddev must be positive");
    if (!(spec.label_noise >= 0.0 && spec.label_noise < 1.0)) {
        throw InvalidInput("mixture: label noise must lie in [0, 1)");
    }
    if (spec.samples_per_class < 1) throw InvalidInput("mixture: samples_per_class must be positive");

    Dataset d;
    d.dim = spec.dim;
    d.class_count = spec.class_count;
    const std::size_t n = spec.class_count * spec.samples_per_class;
    d.features.reserve(n * spec.dim);
    d.labels.reserve(n);

    Rng feature_rng(derive_seed(spec.seed, 0));
    for (std::size_t c = 0; c < spec.class_count; ++c) {
        for (std::size_t s = 0; s < spec.samples_per_class; ++s) {
            for (std::size_t k = 0; k < spec.dim; ++k) {
                d.features.push_back(spec.means[c][k] + spec.stddev * feature_rng.normal());
            }
            d.labels.push_back(c);
        }
    }

    Rng noise_rng(derive_seed(spec.seed, 1));
    std::vector<std::size_t> order(n);
    std::iota(order.begin(), order.end(), std::size_t{0});
    noise_rng.shuffle(std::span<std::size_t>(order));
    const std::size_t flips = round_count(spec.label_noise * static_cast<double>(n));
    for (std::size_t k = 0; k < flips; ++k) {
        auto& y = d.labels[order[k]];
        y = (y + 1 + noise_rng.below(spec.class_count - 1)) % spec.class_count;
    }
    return d;
}

Dataset split(const Dataset& dataset, const SplitFractions& fractions, std::uint64_t seed) {
    dataset.validate();
    const double f[3] = {fractions.train, fractions.val, fractions.test};
    for (double x : f) {
        if (!(x > 0.0)) throw InvalidInput("split: fractions must be positive");
    }
    if (f[0] + f[1] + f[2] > 1.0 + 1e-12) throw InvalidInput("split: fractions sum above 1");

    const std::size_t n = dataset.size();
    std::vector<std::vector<std::size_t>> by_class(dataset.class_count);
    for (std::size_t i = 0; i < n; ++i) by_class[dataset.labels[i]].push_back(i);
    std::vector<std::size_t> class_sizes;
    for (const auto& members : by_class) class_sizes.push_back(members.size());

    // Per-class cumulative quotas (train, train+val, train+val+test) rounded
    // to nearest; each split takes the difference, so its per-class count is
    // within one sample of proportional.
    std::vector<std::vector<std::size_t>> cumulative;
    double acc = 0.0;
    for (double x : f) {
        acc += x;
        std::vector<std::size_t> level;
        for (std::size_t size : class_sizes) {
            level.push_back(std::min(size, round_count(acc * static_cast<double>(size))));
        }
        cumulative.push_back(std::move(level));
    }

    Dataset out = dataset;
    out.train.clear();
    out.val.clear();
    out.test.clear();
    std::vector<std::size_t>* parts[3] = {&out.train, &out.val, &out.test};
    Rng rng(derive_seed(seed, 2));
    for (std::size_t c = 0; c < by_class.size(); ++c) {
        auto members = by_class[c];
        rng.shuffle(std::span<std::size_t>(members));
        std::size_t begin = 0;
        for (std::size_t s = 0; s < 3; ++s) {
            const std::size_t end = std::clamp(cumulative[s][c], begin, members.size());
            parts[s]->insert(parts[s]->end(), members.begin() + static_cast<std::ptrdiff_t>(begin),
                             members.begin() + static_cast<std::ptrdiff_t>(end));
            begin = end;
        }
    }
    for (auto* part : parts) {
        if (part->empty()) throw InvalidInput("split: a split received zero samples");
        std::sort(part->begin(), part->end());
    }
    return out;
}

void save_csv(const Dataset& dataset, std::ostream& out) {
    for (std::size_t k = 0; k < dataset.dim; ++k) out << 'f' << k << ',';
    out << "label\n";
    char buf[64];
    for (std::size_t i = 0; i < dataset.size(); ++i) {
        for (double x : dataset.row(i)) {
            std::snprintf(buf, sizeof buf, "%.17g", x);
            out << buf << ',';
        }
        out << dataset.labels[i] << '\n';
    }
}

void save_csv(const Dataset& dataset, const std::filesystem::path& path) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw IoError("cannot open for writing: " + path.string());
    save_csv(dataset, out);
    if (!out) throw IoError("write failed: " + path.string());
}

Dataset load_csv(std::istream& in) {
    std::string line;
    if (!std::getline(in, line)) throw SchemaError("missing header");
    if (!line.empty() && line.back() == '\r') line.pop_back();
    const auto header = split_fields(line);
    if (header.size() < 2 || header.back() != "label") {
        throw SchemaError("header must be f0,...,f{D-1},label");
    }
    for (std::size_t k = 0; k + 1 < header.size(); ++k) {
        if (header[k] != "f" + std::to_string(k)) {
            throw SchemaError("unexpected header column '" + header[k] + "'");
        }
    }

    Dataset d;
    d.dim = header.size() - 1;
    std::size_t line_no = 1;
    std::size_t max_label = 0;
    while (std::getline(in, line)) {
        ++line_no;
        if (!line.empty() && line.back() == '\r') line.pop_back();
        if (line.empty()) continue;
        const auto fields = split_fields(line);
        if (fields.size() != header.size()) {
            throw SchemaError("line " + std::to_string(line_no) + ": expected " +
                              std::to_string(header.size()) + " fields, got " +
                              std::to_string(fields.size()));
        }
        for (std::size_t k = 0; k < d.dim; ++k) {
            const auto& s = fields[k];
            double v = 0.0;
            const auto [ptr, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
            if (ec != std::errc() || ptr != s.data() + s.size() || s.empty() || !std::isfinite(v)) {
                throw ParseError(line_no, "malformed feature '" + s + "'");
            }
            d.features.push_back(v);
        }
        const auto& s = fields.back();
        std::size_t y = 0;
        const auto [ptr, ec] = std::from_chars(s.data(), s.data() + s.size(), y);
        if (ec != std::errc() || ptr != s.data() + s.size() || s.empty()) {
            throw ParseError(line_no, "malformed label '" + s + "'");
        }
        d.labels.push_back(y);
        max_label = std::max(max_label, y);
    }
    if (d.labels.empty()) throw SchemaError("no data rows");
    d.class_count = std::max<std::size_t>(2, max_label + 1);
    return d;
}

Dataset load_csv(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("cannot open for reading: " + path.string());
    return load_csv(in);
}

}  // namespace calib
