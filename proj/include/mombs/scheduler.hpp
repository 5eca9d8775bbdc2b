#pragma once

// Epoch plans: how one pass over the training set is cut into minibatches.
//
// Mixed-order plans sort samples by rank-sum difficulty d and give every
// batch one member from each difficulty stratum, which equalises the batch
// sums of d. For b = 2 this is the classic "pair rank k with rank N-1-k"
// matching, which minimises the variance of pair sums (rearrangement
// inequality). The anti-mixed-order ablation does the opposite and groups
// neighbouring difficulties together.

#include <algorithm>
#include <array>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <fstream>
#include <limits>
#include <numeric>
#include <optional>
#include <span>
#include <sstream>
#include <stdexcept>
#include <string>
#include <string_view>
#include <variant>
#include <vector>

#include "mombs/assessor.hpp"
#include "mombs/csv.hpp"
#include "mombs/random.hpp"

namespace mombs {

/// Unordered quadrant pairs. MB1..MB4 are the positive types.
enum class MbType : std::uint8_t { mb1 = 1, mb2, mb3, mb4, mb5, mb6, mb7, mb8, mb9, mb10 };

inline constexpr std::size_t kNumMbTypes = 10;

inline bool is_positive(MbType t) { return static_cast<int>(t) <= 4; }

inline std::string to_string(MbType t) { return "MB" + std::to_string(static_cast<int>(t)); }

inline MbType parse_mb_type(std::string_view s) {
    if (s.size() >= 3 && s.substr(0, 2) == "MB") {
        if (const auto v = csv::parse_int(s.substr(2)); v && *v >= 1 && *v <= 10) return static_cast<MbType>(*v);
    }
    throw std::invalid_argument("unknown minibatch type '" + std::string(s) + "'");
}

struct Minibatch {
    std::vector<std::size_t> members;
    long long d_sum = 0;
    std::optional<MbType> mb_type;
};

struct EpochPlan {
    std::vector<Minibatch> batches;
    double variance = 0.0;  // population variance of d_sum, once difficulty is attached

    std::size_t total_members() const {
        std::size_t n = 0;
        for (const auto& b : batches) n += b.members.size();
        return n;
    }
};

namespace detail {

/// Indices sorted by d ascending, ties by index.
inline std::vector<std::size_t> order_by_difficulty(std::span<const std::size_t> d) {
    std::vector<std::size_t> order(d.size());
    std::iota(order.begin(), order.end(), std::size_t{0});
    std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return d[a] < d[b]; });
    return order;
}

/// Splits the sorted order into the part that fills whole batches and the
/// `n mod b` middle entries that form the short batch.
struct StrataSplit {
    std::vector<std::size_t> dealt;
    std::vector<std::size_t> middle;
};

inline StrataSplit split_middle_remainder(const std::vector<std::size_t>& sorted, std::size_t b) {
    const std::size_t r = sorted.size() % b;
    const std::size_t start = (sorted.size() - r) / 2;
    StrataSplit out;
    out.dealt.reserve(sorted.size() - r);
    for (std::size_t i = 0; i < sorted.size(); ++i) {
        if (i >= start && i < start + r)
            out.middle.push_back(sorted[i]);
        else
            out.dealt.push_back(sorted[i]);
    }
    return out;
}

inline void shuffle_batch_order(EpochPlan& plan, std::uint64_t seed) {
    Rng rng(derive_seed(seed, stream::plan));
    rng.shuffle(std::span<Minibatch>(plan.batches));
}

inline void check_batch_size(std::size_t n, std::size_t b) {
    if (b == 0) throw std::invalid_argument("batch size must be positive");
    if (b > n) throw std::invalid_argument("batch size " + std::to_string(b) + " exceeds " + std::to_string(n) + " samples");
}

inline void append_short_batch(EpochPlan& plan, std::vector<std::size_t> middle) {
    if (!middle.empty()) plan.batches.push_back({std::move(middle), 0, std::nullopt});
}

}  // namespace detail

/// Population variance of the batch sums of d. Computed from exact integer
/// moments so equal-variance plans compare equal bit for bit.
/// Throws when a member is out of range or some index of d is never visited.
inline double plan_variance(const EpochPlan& plan, std::span<const std::size_t> d) {
    std::vector<bool> seen(d.size(), false);
    __int128 sum = 0, sum_sq = 0;
    for (const auto& b : plan.batches) {
        __int128 s = 0;
        for (auto i : b.members) {
            if (i >= d.size()) throw std::invalid_argument("plan member " + std::to_string(i) + " is out of range");
            seen[i] = true;
            s += static_cast<__int128>(d[i]);
        }
        sum += s;
        sum_sq += s * s;
    }
    if (std::find(seen.begin(), seen.end(), false) != seen.end())
        throw std::invalid_argument("plan does not cover every sample");
    const auto n = static_cast<__int128>(plan.batches.size());
    if (n == 0) return 0.0;
    const __int128 numerator = n * sum_sq - sum * sum;
    return static_cast<double>(static_cast<long double>(numerator) / static_cast<long double>(n * n));
}

/// Fills d_sum on every batch and the plan variance.
inline void attach_difficulty(EpochPlan& plan, std::span<const std::size_t> d) {
    plan.variance = plan_variance(plan, d);
    for (auto& b : plan.batches) {
        b.d_sum = 0;
        for (auto i : b.members) b.d_sum += static_cast<long long>(d[i]);
    }
}

/// Pairs sorted rank k with N-1-k, then shuffles batch order. Odd N leaves
/// the median sample in a batch of its own.
inline EpochPlan mirror_pairing(std::span<const std::size_t> d, std::uint64_t seed) {
    if (d.size() < 2) throw std::invalid_argument("mirror pairing needs at least two samples");
    auto split = detail::split_middle_remainder(detail::order_by_difficulty(d), 2);
    const auto& s = split.dealt;
    EpochPlan plan;
    for (std::size_t k = 0; k < s.size() / 2; ++k) plan.batches.push_back({{s[k], s[s.size() - 1 - k]}, 0, std::nullopt});
    detail::append_short_batch(plan, std::move(split.middle));
    detail::shuffle_batch_order(plan, seed);
    attach_difficulty(plan, d);
    return plan;
}

/// Deals the d-sorted indices into N/b batches in boustrophedon order, so
/// batch k takes one index from each of the b strata. b = 2 gives the same
/// plan as mirror_pairing.
inline EpochPlan snake_partition(std::span<const std::size_t> d, std::size_t b, std::uint64_t seed) {
    detail::check_batch_size(d.size(), b);
    auto split = detail::split_middle_remainder(detail::order_by_difficulty(d), b);
    const auto& s = split.dealt;
    const std::size_t m = s.size() / b;
    EpochPlan plan;
    plan.batches.resize(m);
    for (std::size_t stratum = 0; stratum < b; ++stratum) {
        for (std::size_t k = 0; k < m; ++k) {
            const std::size_t target = stratum % 2 == 0 ? k : m - 1 - k;
            plan.batches[target].members.push_back(s[stratum * m + k]);
        }
    }
    detail::append_short_batch(plan, std::move(split.middle));
    detail::shuffle_batch_order(plan, seed);
    attach_difficulty(plan, d);
    return plan;
}

/// Consecutive d-sorted runs of b indices per batch (hi+hi, lo+lo).
inline EpochPlan anti_partition(std::span<const std::size_t> d, std::size_t b, std::uint64_t seed) {
    detail::check_batch_size(d.size(), b);
    if (d.size() < 2) throw std::invalid_argument("anti-mixed pairing needs at least two samples");
    auto split = detail::split_middle_remainder(detail::order_by_difficulty(d), b);
    const auto& s = split.dealt;
    EpochPlan plan;
    for (std::size_t k = 0; k + b <= s.size(); k += b)
        plan.batches.push_back({std::vector<std::size_t>(s.begin() + static_cast<std::ptrdiff_t>(k),
                                                         s.begin() + static_cast<std::ptrdiff_t>(k + b)),
                                0, std::nullopt});
    detail::append_short_batch(plan, std::move(split.middle));
    detail::shuffle_batch_order(plan, seed);
    attach_difficulty(plan, d);
    return plan;
}

inline EpochPlan anti_mirror_pairing(std::span<const std::size_t> d, std::uint64_t seed) {
    return anti_partition(d, 2, seed);
}

/// Shuffles `items` and cuts them into batches of b (the last one may be
/// short). When `items` holds repeats, members are swapped across batches so
/// no batch holds the same index twice.
inline EpochPlan partition_items(std::vector<std::size_t> items, std::size_t b, std::uint64_t seed) {
    detail::check_batch_size(items.size(), b);
    Rng rng(derive_seed(seed, stream::plan, 1));
    rng.shuffle(std::span<std::size_t>(items));

    const std::size_t n = items.size();
    auto batch_of = [&](std::size_t pos) { return pos / b; };
    auto batch_holds = [&](std::size_t batch, std::size_t value, std::size_t skip) {
        const std::size_t lo = batch * b, hi = std::min(n, lo + b);
        for (std::size_t p = lo; p < hi; ++p)
            if (p != skip && items[p] == value) return true;
        return false;
    };
    for (std::size_t pos = 0; pos < n; ++pos) {
        if (!batch_holds(batch_of(pos), items[pos], pos)) continue;
        bool fixed = false;
        for (std::size_t step = 1; step < n && !fixed; ++step) {
            const std::size_t q = (pos + step) % n;
            if (batch_of(q) == batch_of(pos)) continue;
            if (batch_holds(batch_of(pos), items[q], pos) || batch_holds(batch_of(q), items[pos], q)) continue;
            std::swap(items[pos], items[q]);
            fixed = true;
        }
        if (!fixed) throw std::invalid_argument("cannot place repeated indices in distinct batches");
    }

    EpochPlan plan;
    for (std::size_t lo = 0; lo < n; lo += b)
        plan.batches.push_back({std::vector<std::size_t>(items.begin() + static_cast<std::ptrdiff_t>(lo),
                                                         items.begin() + static_cast<std::ptrdiff_t>(std::min(n, lo + b))),
                                0, std::nullopt});
    return plan;
}

/// Uniformly shuffled 0..n-1 cut into batches of b, without replacement.
inline EpochPlan random_partition(std::size_t n, std::size_t b, std::uint64_t seed) {
    std::vector<std::size_t> items(n);
    std::iota(items.begin(), items.end(), std::size_t{0});
    return partition_items(std::move(items), b, seed);
}

struct OptimalPairing {
    EpochPlan plan;
    double variance = 0.0;
};

inline constexpr std::size_t kMaxBruteForcePairs = 12;

/// Exhaustive search over all perfect matchings of an even-sized d.
inline OptimalPairing brute_force_optimal_pairing(std::span<const std::size_t> d) {
    const std::size_t n = d.size();
    if (n < 2 || n % 2 != 0) throw std::invalid_argument("brute-force pairing needs an even number of samples");
    if (n > kMaxBruteForcePairs) throw std::invalid_argument("brute-force pairing is limited to 12 samples");

    // Every perfect matching has the same total sum, so minimising the sum of
    // squared pair sums minimises the variance.
    std::vector<std::pair<std::size_t, std::size_t>> current, best;
    long long best_sq = std::numeric_limits<long long>::max();
    std::vector<bool> used(n, false);
    auto recurse = [&](auto&& self, long long sq) -> void {
        std::size_t first = 0;
        while (first < n && used[first]) ++first;
        if (first == n) {
            if (sq < best_sq) {
                best_sq = sq;
                best = current;
            }
            return;
        }
        used[first] = true;
        for (std::size_t j = first + 1; j < n; ++j) {
            if (used[j]) continue;
            used[j] = true;
            const auto s = static_cast<long long>(d[first] + d[j]);
            current.emplace_back(first, j);
            self(self, sq + s * s);
            current.pop_back();
            used[j] = false;
        }
        used[first] = false;
    };
    recurse(recurse, 0);

    OptimalPairing out;
    for (auto [a, b] : best) out.plan.batches.push_back({{a, b}, 0, std::nullopt});
    attach_difficulty(out.plan, d);
    out.variance = out.plan.variance;
    return out;
}

inline MbType classify_pair(Quadrant a, Quadrant b) {
    using Q = Quadrant;
    if (static_cast<int>(a) > static_cast<int>(b)) std::swap(a, b);
    // Enum order: s_p < s_u < s_w < s_o.
    if (a == Q::under_represented && b == Q::well_represented) return MbType::mb1;
    if (a == Q::poorly_labeled && b == Q::poorly_labeled) return MbType::mb2;
    if (a == Q::poorly_labeled && b == Q::overfitted) return MbType::mb3;
    if (a == Q::overfitted && b == Q::overfitted) return MbType::mb4;
    if (a == Q::well_represented && b == Q::well_represented) return MbType::mb5;
    if (a == Q::under_represented && b == Q::under_represented) return MbType::mb6;
    if (a == Q::poorly_labeled && b == Q::well_represented) return MbType::mb7;
    if (a == Q::well_represented && b == Q::overfitted) return MbType::mb8;
    if (a == Q::poorly_labeled && b == Q::under_represented) return MbType::mb9;
    return MbType::mb10;  // s_u with s_o
}

inline MbType classify_minibatch(const Minibatch& batch, std::span<const Quadrant> quadrants) {
    if (batch.members.size() != 2) throw std::invalid_argument("minibatch types are defined for pairs only");
    for (auto i : batch.members)
        if (i >= quadrants.size()) throw std::invalid_argument("minibatch member has no quadrant");
    return classify_pair(quadrants[batch.members[0]], quadrants[batch.members[1]]);
}

/// Tags every pair in the plan; larger or short batches stay untyped.
inline void attach_types(EpochPlan& plan, std::span<const Quadrant> quadrants) {
    for (auto& b : plan.batches)
        b.mb_type = b.members.size() == 2 ? std::optional(classify_minibatch(b, quadrants)) : std::nullopt;
}

/// counts[k] = number of batches of type MB(k+1).
inline std::array<std::size_t, kNumMbTypes> mb_histogram(const EpochPlan& plan) {
    std::array<std::size_t, kNumMbTypes> counts{};
    for (const auto& b : plan.batches)
        if (b.mb_type) ++counts[static_cast<std::size_t>(*b.mb_type) - 1];
    return counts;
}

enum class SclVariant { hard, linear };

/// Self-paced weight: hard keeps losses below lambda, linear fades to 0 at lambda.
inline double scl_weight(double loss, double lambda, SclVariant variant) {
    if (!(lambda > 0.0)) throw std::invalid_argument("self-paced threshold must be positive");
    if (variant == SclVariant::hard) return loss < lambda ? 1.0 : 0.0;
    return std::max(0.0, 1.0 - loss / lambda);
}

/// Linear-interpolated quantile, q in [0, 1].
inline double percentile(std::span<const double> values, double q) {
    if (values.empty()) throw std::invalid_argument("percentile of an empty set");
    if (!(q >= 0.0 && q <= 1.0)) throw std::invalid_argument("percentile must lie in [0, 1]");
    std::vector<double> v(values.begin(), values.end());
    std::sort(v.begin(), v.end());
    const double pos = q * static_cast<double>(v.size() - 1);
    const auto lo = static_cast<std::size_t>(std::floor(pos));
    const auto hi = std::min(lo + 1, v.size() - 1);
    return v[lo] + (pos - static_cast<double>(lo)) * (v[hi] - v[lo]);
}

/// Index multiset where the round(top_fraction * N) highest-loss samples
/// (at least one) appear `factor` times and every other sample once,
/// returned shuffled.
inline std::vector<std::size_t> ohem_expand(std::span<const double> losses, std::size_t factor, double top_fraction,
                                            std::uint64_t seed) {
    if (factor < 1) throw std::invalid_argument("OHEM factor must be at least 1");
    if (!(top_fraction > 0.0 && top_fraction <= 1.0)) throw std::invalid_argument("OHEM fraction must lie in (0, 1]");
    const std::size_t n = losses.size();
    std::vector<std::size_t> items(n);
    std::iota(items.begin(), items.end(), std::size_t{0});
    if (n == 0) return items;
    const auto hard_count = std::clamp<std::size_t>(
        static_cast<std::size_t>(std::llround(top_fraction * static_cast<double>(n))), 1, n);
    std::vector<std::size_t> by_loss = items;
    std::stable_sort(by_loss.begin(), by_loss.end(), [&](std::size_t a, std::size_t b) { return losses[a] > losses[b]; });
    for (std::size_t k = 0; k < hard_count; ++k)
        for (std::size_t rep = 1; rep < factor; ++rep) items.push_back(by_loss[k]);
    Rng rng(derive_seed(seed, stream::plan, 2));
    rng.shuffle(std::span<std::size_t>(items));
    return items;
}

struct RandomSampler {};
struct MixedOrderSampler {};
struct AntiMixedOrderSampler {};
struct SclSampler {
    SclVariant variant = SclVariant::hard;
    double lambda_percentile = 0.7;
};
struct OhemSampler {
    std::size_t factor = 2;
    double top_fraction = 0.25;
};

using SamplerKind = std::variant<RandomSampler, MixedOrderSampler, AntiMixedOrderSampler, SclSampler, OhemSampler>;

inline std::string sampler_name(const SamplerKind& kind) {
    struct Visitor {
        std::string operator()(const RandomSampler&) const { return "random"; }
        std::string operator()(const MixedOrderSampler&) const { return "mombs"; }
        std::string operator()(const AntiMixedOrderSampler&) const { return "anti_mombs"; }
        std::string operator()(const SclSampler& s) const { return s.variant == SclVariant::hard ? "scl_hard" : "scl_linear"; }
        std::string operator()(const OhemSampler&) const { return "ohem"; }
    };
    return std::visit(Visitor{}, kind);
}

inline SamplerKind parse_sampler(std::string_view name) {
    if (name == "random") return RandomSampler{};
    if (name == "mombs") return MixedOrderSampler{};
    if (name == "anti_mombs") return AntiMixedOrderSampler{};
    if (name == "scl_hard") return SclSampler{SclVariant::hard};
    if (name == "scl_linear") return SclSampler{SclVariant::linear};
    if (name == "ohem") return OhemSampler{};
    throw std::invalid_argument("unknown sampler '" + std::string(name) +
                                "' (expected random, mombs, anti_mombs, scl_hard, scl_linear or ohem)");
}

/// "3;17" style member list used in plan CSVs.
inline std::string join_members(const std::vector<std::size_t>& members) {
    std::string out;
    for (std::size_t k = 0; k < members.size(); ++k) {
        if (k) out += ';';
        out += std::to_string(members[k]);
    }
    return out;
}

/// epoch,batch_id,member_indices,d_sum,mb_type
inline void write_plan_csv(const EpochPlan& plan, std::size_t epoch, const std::string& path) {
    std::ofstream out(path);
    if (!out) throw std::runtime_error("cannot write '" + path + "'");
    out << "epoch,batch_id,member_indices,d_sum,mb_type\n";
    for (std::size_t k = 0; k < plan.batches.size(); ++k) {
        const auto& b = plan.batches[k];
        out << epoch << ',' << k << ',' << join_members(b.members) << ',' << b.d_sum << ','
            << (b.mb_type ? to_string(*b.mb_type) : std::string{}) << '\n';
    }
    if (!out) throw std::runtime_error("failed writing '" + path + "'");
}

inline EpochPlan read_plan_csv(const std::string& path) {
    const auto table = csv::read_table(path);
    const std::vector<std::string> expected{"epoch", "batch_id", "member_indices", "d_sum", "mb_type"};
    if (table.header != expected) throw std::runtime_error("'" + path + "' is not a plan file");
    EpochPlan plan;
    for (std::size_t r = 0; r < table.rows.size(); ++r) {
        const auto& row = table.rows[r];
        Minibatch b;
        for (const auto& field : csv::split_fields(row[2], ';')) {
            const auto v = csv::parse_int(field);
            if (!v || *v < 0) throw std::runtime_error("'" + path + "' row " + std::to_string(r + 2) + ": bad member list");
            b.members.push_back(static_cast<std::size_t>(*v));
        }
        const auto d_sum = csv::parse_int(row[3]);
        if (!d_sum) throw std::runtime_error("'" + path + "' row " + std::to_string(r + 2) + ": bad d_sum");
        b.d_sum = *d_sum;
        if (!row[4].empty()) b.mb_type = parse_mb_type(row[4]);
        plan.batches.push_back(std::move(b));
    }
    return plan;
}

}  // namespace mombs
