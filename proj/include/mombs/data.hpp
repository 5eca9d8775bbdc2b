#pragma once

// Synthetic Gaussian-blob datasets (long-tailed and symmetric-noise
// variants), CSV ingestion, and stratified train/test splitting.

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <fstream>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "mombs/csv.hpp"
#include "mombs/random.hpp"

namespace mombs {

struct TrainingSample {
    Eigen::VectorXd features;
    int label = 0;
    std::size_t index = 0;
};

struct Dataset {
    std::vector<TrainingSample> samples;
    std::size_t num_classes = 0;
    std::string provenance;
    // Original labels before noise injection. Diagnostics only.
    std::optional<std::vector<int>> clean_labels;

    std::size_t size() const { return samples.size(); }
    bool empty() const { return samples.empty(); }
    std::size_t dim() const { return samples.empty() ? 0 : static_cast<std::size_t>(samples.front().features.size()); }

    std::vector<int> labels() const {
        std::vector<int> out;
        out.reserve(samples.size());
        for (const auto& s : samples) out.push_back(s.label);
        return out;
    }

    std::vector<std::size_t> class_counts() const {
        std::vector<std::size_t> counts(num_classes, 0);
        for (const auto& s : samples) ++counts[static_cast<std::size_t>(s.label)];
        return counts;
    }
};

inline void validate(const Dataset& ds) {
    const std::size_t dim = ds.dim();
    for (std::size_t i = 0; i < ds.samples.size(); ++i) {
        const auto& s = ds.samples[i];
        if (s.index != i) throw std::invalid_argument("dataset indices are not contiguous at " + std::to_string(i));
        if (s.label < 0 || static_cast<std::size_t>(s.label) >= ds.num_classes)
            throw std::invalid_argument("sample " + std::to_string(i) + " has label out of range");
        if (static_cast<std::size_t>(s.features.size()) != dim)
            throw std::invalid_argument("sample " + std::to_string(i) + " has a different feature dimension");
    }
    if (ds.clean_labels) {
        if (ds.clean_labels->size() != ds.samples.size())
            throw std::invalid_argument("clean label count does not match sample count");
        for (int c : *ds.clean_labels)
            if (c < 0 || static_cast<std::size_t>(c) >= ds.num_classes)
                throw std::invalid_argument("clean label out of range");
    }
}

/// Class-conditional isotropic Gaussians. Means are drawn once per seed from
/// N(0, mean_spread^2 I); every class shares the same noise_scale.
struct BlobSpec {
    std::size_t num_classes = 10;
    std::size_t dim = 8;
    double mean_spread = 1.5;
    double noise_scale = 1.0;
    std::uint64_t seed = 0;
};

struct LTSpec {
    BlobSpec blobs;
    std::size_t max_per_class = 200;
    double imbalance_ratio = 0.01;
    std::size_t test_per_class = 100;
};

struct NLSpec {
    BlobSpec blobs;
    std::size_t per_class = 100;
    double noise_rate = 0.4;
};

inline std::vector<Eigen::VectorXd> class_means(const BlobSpec& spec) {
    Rng rng(derive_seed(spec.seed, stream::data, 0));
    std::vector<Eigen::VectorXd> means;
    for (std::size_t c = 0; c < spec.num_classes; ++c) {
        Eigen::VectorXd m(static_cast<Eigen::Index>(spec.dim));
        for (Eigen::Index j = 0; j < m.size(); ++j) m(j) = spec.mean_spread * rng.normal();
        means.push_back(std::move(m));
    }
    return means;
}

/// round(n_max * rho^(i / (C - 1))) for each class i.
inline std::vector<std::size_t> longtail_counts(std::size_t num_classes, std::size_t max_per_class,
                                                double imbalance_ratio) {
    if (num_classes < 2) throw std::invalid_argument("long-tailed data needs at least two classes");
    if (!(imbalance_ratio > 0.0 && imbalance_ratio <= 1.0))
        throw std::invalid_argument("imbalance ratio must lie in (0, 1]");
    std::vector<std::size_t> counts;
    for (std::size_t i = 0; i < num_classes; ++i) {
        const double exponent = static_cast<double>(i) / static_cast<double>(num_classes - 1);
        const double n = std::round(static_cast<double>(max_per_class) * std::pow(imbalance_ratio, exponent));
        if (n < 1.0) throw std::invalid_argument("class " + std::to_string(i) + " would receive no samples");
        counts.push_back(static_cast<std::size_t>(n));
    }
    return counts;
}

namespace detail {

inline void validate_blobs(const BlobSpec& spec) {
    if (spec.num_classes < 2) throw std::invalid_argument("blob data needs at least two classes");
    if (spec.dim < 1) throw std::invalid_argument("blob dimension must be positive");
    if (!(spec.noise_scale >= 0.0)) throw std::invalid_argument("noise scale must be >= 0");
}

inline Dataset draw_blobs(const BlobSpec& spec, const std::vector<std::size_t>& counts, std::uint64_t stream_seed,
                          std::string provenance) {
    validate_blobs(spec);
    const auto means = class_means(spec);
    Rng rng(stream_seed);
    Dataset ds;
    ds.num_classes = spec.num_classes;
    ds.provenance = std::move(provenance);
    for (std::size_t c = 0; c < counts.size(); ++c) {
        for (std::size_t k = 0; k < counts[c]; ++k) {
            Eigen::VectorXd x(static_cast<Eigen::Index>(spec.dim));
            for (Eigen::Index j = 0; j < x.size(); ++j) x(j) = means[c](j) + spec.noise_scale * rng.normal();
            ds.samples.push_back({std::move(x), static_cast<int>(c), ds.samples.size()});
        }
    }
    return ds;
}

}  // namespace detail

inline Dataset gen_longtail(const LTSpec& spec) {
    const auto counts = longtail_counts(spec.blobs.num_classes, spec.max_per_class, spec.imbalance_ratio);
    return detail::draw_blobs(spec.blobs, counts, derive_seed(spec.blobs.seed, stream::data, 1),
                              "longtail(C=" + std::to_string(spec.blobs.num_classes) +
                                  ",n_max=" + std::to_string(spec.max_per_class) +
                                  ",rho=" + csv::format_double(spec.imbalance_ratio) + ")");
}

/// Balanced held-out set from the same class means as gen_longtail.
inline Dataset gen_longtail_test(const LTSpec& spec) {
    std::vector<std::size_t> counts(spec.blobs.num_classes, spec.test_per_class);
    return detail::draw_blobs(spec.blobs, counts, derive_seed(spec.blobs.seed, stream::test_data, 1),
                              "longtail-test(C=" + std::to_string(spec.blobs.num_classes) + ")");
}

/// Balanced blobs with each label flipped with probability noise_rate to a
/// uniformly chosen different class.
inline Dataset gen_noisy(const NLSpec& spec) {
    if (!(spec.noise_rate >= 0.0 && spec.noise_rate < 1.0))
        throw std::invalid_argument("noise rate must lie in [0, 1)");
    std::vector<std::size_t> counts(spec.blobs.num_classes, spec.per_class);
    Dataset ds = detail::draw_blobs(spec.blobs, counts, derive_seed(spec.blobs.seed, stream::data, 2),
                                    "symmetric-noise(C=" + std::to_string(spec.blobs.num_classes) +
                                        ",r=" + csv::format_double(spec.noise_rate) + ")");
    ds.clean_labels = ds.labels();
    Rng rng(derive_seed(spec.blobs.seed, stream::noise_labels));
    const auto C = static_cast<std::uint64_t>(spec.blobs.num_classes);
    for (auto& s : ds.samples) {
        if (!rng.bernoulli(spec.noise_rate)) continue;
        // Uniform over the C - 1 wrong classes.
        auto other = static_cast<int>(rng.below(C - 1));
        if (other >= s.label) ++other;
        s.label = other;
    }
    return ds;
}

/// Copy of `ds` whose observed labels are replaced by its clean labels.
inline Dataset with_clean_labels(Dataset ds) {
    if (!ds.clean_labels) return ds;
    for (auto& s : ds.samples) s.label = (*ds.clean_labels)[s.index];
    return ds;
}

inline std::size_t flipped_count(const Dataset& ds) {
    if (!ds.clean_labels) return 0;
    std::size_t n = 0;
    for (const auto& s : ds.samples) n += s.label != (*ds.clean_labels)[s.index];
    return n;
}

/// Columns feature_0..feature_{D-1},label[,clean_label].
inline void save_csv(const Dataset& ds, const std::string& path) {
    std::ofstream out(path);
    if (!out) throw std::runtime_error("cannot write '" + path + "'");
    const std::size_t dim = ds.dim();
    for (std::size_t j = 0; j < dim; ++j) out << "feature_" << j << ',';
    out << "label";
    if (ds.clean_labels) out << ",clean_label";
    out << '\n';
    for (const auto& s : ds.samples) {
        for (Eigen::Index j = 0; j < s.features.size(); ++j) out << csv::format_double(s.features(j)) << ',';
        out << s.label;
        if (ds.clean_labels) out << ',' << (*ds.clean_labels)[s.index];
        out << '\n';
    }
    if (!out) throw std::runtime_error("failed writing '" + path + "'");
}

/// Every column other than `label` and `clean_label` is a feature. The class
/// count is one more than the largest label seen.
inline Dataset load_csv(const std::string& path) {
    const csv::Table table = csv::read_table(path);
    const auto label_col = table.column("label");
    if (!label_col) throw std::runtime_error("'" + path + "' has no 'label' column");
    const auto clean_col = table.column("clean_label");
    std::vector<std::size_t> feature_cols;
    for (std::size_t i = 0; i < table.header.size(); ++i)
        if (i != *label_col && (!clean_col || i != *clean_col)) feature_cols.push_back(i);
    if (feature_cols.empty()) throw std::runtime_error("'" + path + "' has no feature columns");
    if (table.rows.empty()) throw std::runtime_error("'" + path + "': no samples");

    auto parse_label = [&](const std::string& field, std::size_t row) {
        const auto v = csv::parse_int(field);
        if (!v || *v < 0 || *v > 1'000'000)
            throw std::runtime_error("'" + path + "' row " + std::to_string(row) + ": unknown label '" + field + "'");
        return static_cast<int>(*v);
    };

    Dataset ds;
    ds.provenance = path;
    if (clean_col) ds.clean_labels.emplace();
    int max_label = 0;
    for (std::size_t r = 0; r < table.rows.size(); ++r) {
        const auto& row = table.rows[r];
        const std::size_t line = r + 2;  // 1-based, after the header
        Eigen::VectorXd x(static_cast<Eigen::Index>(feature_cols.size()));
        for (std::size_t j = 0; j < feature_cols.size(); ++j) {
            const auto v = csv::parse_double(row[feature_cols[j]]);
            if (!v)
                throw std::runtime_error("'" + path + "' row " + std::to_string(line) + ": non-numeric feature '" +
                                         row[feature_cols[j]] + "' in column " + table.header[feature_cols[j]]);
            x(static_cast<Eigen::Index>(j)) = *v;
        }
        const int label = parse_label(row[*label_col], line);
        max_label = std::max(max_label, label);
        if (clean_col) {
            const int clean = parse_label(row[*clean_col], line);
            max_label = std::max(max_label, clean);
            ds.clean_labels->push_back(clean);
        }
        ds.samples.push_back({std::move(x), label, r});
    }
    ds.num_classes = static_cast<std::size_t>(max_label) + 1;
    validate(ds);
    return ds;
}

/// Stratified by clean label when present, otherwise by observed label. Each
/// class contributes round(n * test_fraction) samples to the test side,
/// clamped so both sides keep at least one. Outputs are reindexed 0..n-1 and
/// keep the source order.
inline std::pair<Dataset, Dataset> split(const Dataset& ds, double test_fraction, std::uint64_t seed) {
    if (!(test_fraction > 0.0 && test_fraction < 1.0)) throw std::invalid_argument("test fraction must lie in (0, 1)");
    auto stratum = [&](const TrainingSample& s) { return ds.clean_labels ? (*ds.clean_labels)[s.index] : s.label; };

    std::vector<std::vector<std::size_t>> by_class(ds.num_classes);
    for (const auto& s : ds.samples) by_class[static_cast<std::size_t>(stratum(s))].push_back(s.index);

    std::vector<bool> is_test(ds.size(), false);
    Rng rng(derive_seed(seed, stream::split));
    for (std::size_t c = 0; c < by_class.size(); ++c) {
        auto& members = by_class[c];
        if (members.empty()) continue;
        if (members.size() < 2)
            throw std::invalid_argument("class " + std::to_string(c) + " has fewer than two samples to split");
        rng.shuffle(std::span<std::size_t>(members));
        auto n_test = static_cast<std::size_t>(std::round(static_cast<double>(members.size()) * test_fraction));
        n_test = std::clamp<std::size_t>(n_test, 1, members.size() - 1);
        for (std::size_t k = 0; k < n_test; ++k) is_test[members[k]] = true;
    }

    auto make = [&](bool test_side) {
        Dataset out;
        out.num_classes = ds.num_classes;
        out.provenance = ds.provenance + (test_side ? "[test]" : "[train]");
        if (ds.clean_labels) out.clean_labels.emplace();
        for (const auto& s : ds.samples) {
            if (is_test[s.index] != test_side) continue;
            if (ds.clean_labels) out.clean_labels->push_back((*ds.clean_labels)[s.index]);
            out.samples.push_back({s.features, s.label, out.samples.size()});
        }
        return out;
    };
    return {make(false), make(true)};
}

}  // namespace mombs
