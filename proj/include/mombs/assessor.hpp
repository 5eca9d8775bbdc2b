#pragma once

// Per-sample difficulty: loss, perturbation uncertainty, their ascending
// ranks, the rank-sum score d = rank_l + rank_u, the value-sum score
// d_hat = l + u, and the loss/uncertainty quadrant of each sample.

#include <Eigen/Dense>

#include <algorithm>
#include <array>
#include <cmath>
#include <cstddef>
#include <fstream>
#include <numeric>
#include <span>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

#include "mombs/csv.hpp"
#include "mombs/data.hpp"
#include "mombs/micronet.hpp"

namespace mombs {

enum class Quadrant {
    poorly_labeled,     // high loss, low uncertainty
    under_represented,  // high loss, high uncertainty
    well_represented,   // low loss, low uncertainty
    overfitted,         // low loss, high uncertainty
};

inline constexpr std::size_t kNumQuadrants = 4;

inline std::string_view to_string(Quadrant q) {
    switch (q) {
        case Quadrant::poorly_labeled: return "s_p";
        case Quadrant::under_represented: return "s_u";
        case Quadrant::well_represented: return "s_w";
        case Quadrant::overfitted: return "s_o";
    }
    return "?";
}

inline Quadrant parse_quadrant(std::string_view s) {
    if (s == "s_p") return Quadrant::poorly_labeled;
    if (s == "s_u") return Quadrant::under_represented;
    if (s == "s_w") return Quadrant::well_represented;
    if (s == "s_o") return Quadrant::overfitted;
    throw std::invalid_argument("unknown quadrant '" + std::string(s) + "'");
}

struct SampleStats {
    std::size_t index = 0;
    double loss = 0;
    double uncertainty = 0;  // nats
    std::size_t rank_l = 0;
    std::size_t rank_u = 0;
    std::size_t d = 0;
    double d_hat = 0;
    Quadrant quadrant = Quadrant::well_represented;
};

struct DifficultyTable {
    std::size_t epoch = 0;
    std::vector<SampleStats> stats;  // stats[i].index == i

    std::size_t size() const { return stats.size(); }

    std::vector<std::size_t> d() const {
        std::vector<std::size_t> out;
        out.reserve(stats.size());
        for (const auto& s : stats) out.push_back(s.d);
        return out;
    }
    std::vector<double> losses() const {
        std::vector<double> out;
        out.reserve(stats.size());
        for (const auto& s : stats) out.push_back(s.loss);
        return out;
    }
    std::vector<double> uncertainties() const {
        std::vector<double> out;
        out.reserve(stats.size());
        for (const auto& s : stats) out.push_back(s.uncertainty);
        return out;
    }
    std::vector<Quadrant> quadrants() const {
        std::vector<Quadrant> out;
        out.reserve(stats.size());
        for (const auto& s : stats) out.push_back(s.quadrant);
        return out;
    }
};

/// Shannon entropy in nats, 0 ln 0 = 0.
inline double entropy(std::span<const double> p) {
    double total = 0.0;
    for (double v : p) {
        if (!(v >= 0.0)) throw std::invalid_argument("entropy of a vector with negative or NaN entries");
        total += v;
    }
    if (std::abs(total - 1.0) > 1e-9) throw std::invalid_argument("entropy input does not sum to 1");
    double h = 0.0;
    for (double v : p)
        if (v > 0.0) h -= v * std::log(v);
    return std::clamp(h, 0.0, std::log(static_cast<double>(p.size())));
}

inline double entropy(const Eigen::VectorXd& p) { return entropy(std::span<const double>(p.data(), static_cast<std::size_t>(p.size()))); }

/// Entropy of the mean prediction over spec.draws disturbed forwards.
inline double estimate_uncertainty(const MicroModel& m, const Eigen::VectorXd& x, const PerturbationSpec& spec) {
    validate(spec);
    // Running mean: identical draws leave the mean bit-identical to each draw.
    Eigen::VectorXd mean = Eigen::VectorXd::Zero(static_cast<Eigen::Index>(m.num_classes()));
    for (std::size_t g = 0; g < spec.draws; ++g) {
        const Eigen::VectorXd p = forward(m, x, draw_disturbance(m.feature_dim(), spec, g)).probs;
        mean += (p - mean) / static_cast<double>(g + 1);
    }
    return entropy(mean);
}

/// Undisturbed per-sample CE loss in index order.
inline std::vector<double> compute_sample_losses(const MicroModel& m, const Dataset& ds) {
    if (ds.empty()) throw std::invalid_argument("cannot compute losses of an empty dataset");
    std::vector<double> out;
    out.reserve(ds.size());
    for (const auto& s : ds.samples) out.push_back(sample_loss(m, s.features, s.label));
    return out;
}

/// Per-sample uncertainty; sample i draws its disturbances from a stream
/// derived from (spec.rng_seed, i).
inline std::vector<double> compute_sample_uncertainties(const MicroModel& m, const Dataset& ds,
                                                        const PerturbationSpec& spec) {
    std::vector<double> out;
    out.reserve(ds.size());
    for (const auto& s : ds.samples) {
        PerturbationSpec per_sample = spec;
        per_sample.rng_seed = derive_seed(spec.rng_seed, s.index);
        out.push_back(estimate_uncertainty(m, s.features, per_sample));
    }
    return out;
}

/// rank[i] = position of value i in ascending order; ties go to the smaller index first.
inline std::vector<std::size_t> rank_ascending(std::span<const double> values) {
    for (double v : values)
        if (!std::isfinite(v)) throw std::invalid_argument("cannot rank non-finite values");
    std::vector<std::size_t> order(values.size());
    std::iota(order.begin(), order.end(), std::size_t{0});
    std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return values[a] < values[b]; });
    std::vector<std::size_t> rank(values.size());
    for (std::size_t pos = 0; pos < order.size(); ++pos) rank[order[pos]] = pos;
    return rank;
}

inline bool is_permutation_of_range(std::span<const std::size_t> v) {
    std::vector<bool> seen(v.size(), false);
    for (auto x : v) {
        if (x >= v.size() || seen[x]) return false;
        seen[x] = true;
    }
    return true;
}

inline std::vector<std::size_t> difficulty_rank_scores(std::span<const std::size_t> loss_ranks,
                                                       std::span<const std::size_t> uncert_ranks) {
    if (loss_ranks.size() != uncert_ranks.size()) throw std::invalid_argument("rank vectors differ in length");
    if (!is_permutation_of_range(loss_ranks) || !is_permutation_of_range(uncert_ranks))
        throw std::invalid_argument("rank vectors must be permutations of 0..N-1");
    std::vector<std::size_t> d(loss_ranks.size());
    for (std::size_t i = 0; i < d.size(); ++i) d[i] = loss_ranks[i] + uncert_ranks[i];
    return d;
}

inline std::vector<double> value_difficulty_scores(std::span<const double> losses, std::span<const double> uncertainties) {
    if (losses.size() != uncertainties.size()) throw std::invalid_argument("loss and uncertainty vectors differ in length");
    std::vector<double> out(losses.size());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = losses[i] + uncertainties[i];
    return out;
}

/// Median split: a rank counts as high when rank >= ceil(N / 2).
inline Quadrant categorize_sample(std::size_t rank_l, std::size_t rank_u, std::size_t n) {
    const std::size_t threshold = (n + 1) / 2;
    const bool high_l = rank_l >= threshold;
    const bool high_u = rank_u >= threshold;
    if (high_l) return high_u ? Quadrant::under_represented : Quadrant::poorly_labeled;
    return high_u ? Quadrant::overfitted : Quadrant::well_represented;
}

inline DifficultyTable build_difficulty_table(std::span<const double> losses, std::span<const double> uncertainties,
                                              std::size_t epoch = 0) {
    const auto rank_l = rank_ascending(losses);
    const auto rank_u = rank_ascending(uncertainties);
    const auto d = difficulty_rank_scores(rank_l, rank_u);
    const auto d_hat = value_difficulty_scores(losses, uncertainties);
    DifficultyTable table;
    table.epoch = epoch;
    table.stats.resize(losses.size());
    for (std::size_t i = 0; i < losses.size(); ++i)
        table.stats[i] = {i, losses[i], uncertainties[i], rank_l[i], rank_u[i], d[i], d_hat[i],
                          categorize_sample(rank_l[i], rank_u[i], losses.size())};
    return table;
}

/// Losses without disturbance, uncertainties with spec.draws disturbances.
inline DifficultyTable assess(const MicroModel& m, const Dataset& ds, const PerturbationSpec& spec, std::size_t epoch) {
    const auto losses = compute_sample_losses(m, ds);
    const auto uncertainties = compute_sample_uncertainties(m, ds, spec);
    return build_difficulty_table(losses, uncertainties, epoch);
}

inline std::array<std::size_t, kNumQuadrants> quadrant_counts(const DifficultyTable& t) {
    std::array<std::size_t, kNumQuadrants> counts{};
    for (const auto& s : t.stats) ++counts[static_cast<std::size_t>(s.quadrant)];
    return counts;
}

/// index,loss,uncertainty,rank_l,rank_u,d,quadrant
inline void write_difficulty_csv(const DifficultyTable& t, const std::string& path) {
    std::ofstream out(path);
    if (!out) throw std::runtime_error("cannot write '" + path + "'");
    out << "index,loss,uncertainty,rank_l,rank_u,d,quadrant\n";
    for (const auto& s : t.stats)
        out << s.index << ',' << csv::format_double(s.loss) << ',' << csv::format_double(s.uncertainty) << ','
            << s.rank_l << ',' << s.rank_u << ',' << s.d << ',' << to_string(s.quadrant) << '\n';
    if (!out) throw std::runtime_error("failed writing '" + path + "'");
}

inline DifficultyTable read_difficulty_csv(const std::string& path, std::size_t epoch = 0) {
    const auto table = csv::read_table(path);
    const std::vector<std::string> expected{"index", "loss", "uncertainty", "rank_l", "rank_u", "d", "quadrant"};
    if (table.header != expected) throw std::runtime_error("'" + path + "' is not a difficulty table");
    DifficultyTable t;
    t.epoch = epoch;
    for (std::size_t r = 0; r < table.rows.size(); ++r) {
        const auto& row = table.rows[r];
        auto need_int = [&](std::size_t col) {
            const auto v = csv::parse_int(row[col]);
            if (!v || *v < 0) throw std::runtime_error("'" + path + "' row " + std::to_string(r + 2) + ": bad integer");
            return static_cast<std::size_t>(*v);
        };
        auto need_real = [&](std::size_t col) {
            const auto v = csv::parse_double(row[col]);
            if (!v) throw std::runtime_error("'" + path + "' row " + std::to_string(r + 2) + ": bad number");
            return *v;
        };
        SampleStats s;
        s.index = need_int(0);
        s.loss = need_real(1);
        s.uncertainty = need_real(2);
        s.rank_l = need_int(3);
        s.rank_u = need_int(4);
        s.d = need_int(5);
        s.d_hat = s.loss + s.uncertainty;
        s.quadrant = parse_quadrant(row[6]);
        t.stats.push_back(s);
    }
    return t;
}

}  // namespace mombs
