// Acceptance suite: one [PASS]/[FAIL] line per criterion, exit status 1 if
// any criterion fails.

#include <CLI11.hpp>

#include <chrono>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iomanip>
#include <iostream>
#include <limits>
#include <regex>
#include <sstream>
#include <string>
#include <vector>

#include "mombs/mombs.hpp"
#include "test_support.hpp"

namespace fs = std::filesystem;
using namespace mombs;
using mombs::testing::for_each_matching;
using mombs::testing::pair_sum_squares;

namespace {

using Clock = std::chrono::steady_clock;

struct Outcome {
    bool pass = false;
    std::string detail;
};

double seconds_since(Clock::time_point t0) {
    return std::chrono::duration<double>(Clock::now() - t0).count();
}

std::string fmt(double v, int precision = 4) {
    std::ostringstream o;
    o << std::setprecision(precision) << v;
    return o.str();
}

// ---------------------------------------------------------------------------

Outcome pairing_optimality() {
    Rng rng(derive_seed(1001, 1));
    std::size_t mismatched_min = 0, mismatched_max = 0;
    for (int t = 0; t < 200; ++t) {
        const std::size_t n = 4 + 2 * rng.below(3);
        std::vector<std::size_t> d(n);
        for (auto& v : d) v = rng.below(1000);

        const auto mirror = mirror_pairing(d, static_cast<std::uint64_t>(t));
        const auto anti = anti_mirror_pairing(d, static_cast<std::uint64_t>(t));
        const auto best = brute_force_optimal_pairing(d);
        if (mirror.variance != best.variance) ++mismatched_min;

        long long worst_sq = 0;
        std::vector<std::pair<std::size_t, std::size_t>> worst;
        for_each_matching(n, [&](const auto& m) {
            const auto sq = pair_sum_squares(m, d);
            if (sq > worst_sq) {
                worst_sq = sq;
                worst = m;
            }
        });
        EpochPlan worst_plan;
        for (auto [a, b] : worst) worst_plan.batches.push_back({{a, b}, 0, std::nullopt});
        if (anti.variance != plan_variance(worst_plan, d)) ++mismatched_max;
    }
    return {mismatched_min == 0 && mismatched_max == 0,
            "200 vectors, min mismatches " + std::to_string(mismatched_min) + ", max mismatches " +
                std::to_string(mismatched_max)};
}

Outcome gradient_correctness() {
    Rng rng(derive_seed(1002, 1));
    double worst = 0;
    for (int t = 0; t < 100; ++t) {
        std::vector<std::size_t> dims{1 + rng.below(8)};
        const std::size_t hidden = 1 + rng.below(3);
        for (std::size_t k = 0; k < hidden; ++k) dims.push_back(2 + rng.below(9));
        const std::size_t classes = 2 + rng.below(9);
        const Head head = classes == 2 && rng.bernoulli(0.5) ? Head::sigmoid_binary : Head::softmax_multiclass;
        dims.push_back(head == Head::sigmoid_binary ? 1 : classes);
        const Activation act = rng.bernoulli(0.25) ? Activation::relu : Activation::tanh;
        auto m = init_model(dims, head, std::nullopt, rng.next_u64(), act);
        mombs::testing::randomize_biases(m, rng);
        const auto x = mombs::testing::random_vector(rng, dims.front(), 1.5);
        const int label = static_cast<int>(rng.below(m.num_classes()));
        const auto analytic = backward(forward(m, x), label, m).flatten();
        const auto numeric = finite_diff_gradient(m, x, label, 1e-6).flatten();
        worst = std::max(worst, mombs::testing::max_relative_error(analytic, numeric));
    }
    return {worst < 1e-4, "100 pairs, worst relative error " + fmt(worst, 3)};
}

Outcome entropy_contracts() {
    double worst_onehot = 0, worst_uniform = 0;
    for (std::size_t c = 2; c <= 64; ++c) {
        std::vector<double> onehot(c, 0.0);
        onehot[c / 2] = 1.0;
        worst_onehot = std::max(worst_onehot, std::abs(entropy(onehot)));
        const std::vector<double> uniform(c, 1.0 / static_cast<double>(c));
        worst_uniform = std::max(worst_uniform, std::abs(entropy(uniform) - std::log(static_cast<double>(c))));
    }

    Rng rng(derive_seed(1003, 1));
    std::size_t not_exact = 0, over_bound = 0;
    for (int t = 0; t < 200; ++t) {
        const std::size_t classes = 2 + rng.below(9);
        const Head head = classes == 2 ? Head::sigmoid_binary : Head::softmax_multiclass;
        const auto m = init_model({5, 3 + rng.below(8), 4 + rng.below(8), head == Head::sigmoid_binary ? 1 : classes},
                                  head, 1 + rng.below(2), rng.next_u64());
        const auto x = mombs::testing::random_vector(rng, 5, 3.0);
        const PerturbationSpec exact{1 + rng.below(16), 0.0, rng.next_u64()};
        if (estimate_uncertainty(m, x, exact) != entropy(forward(m, x).probs)) ++not_exact;
        const PerturbationSpec wide{8, 2.0 * rng.uniform01(), rng.next_u64()};
        if (estimate_uncertainty(m, x, wide) > std::log(static_cast<double>(classes))) ++over_bound;
    }
    const bool pass = worst_onehot <= 1e-12 && worst_uniform <= 1e-12 && not_exact == 0 && over_bound == 0;
    return {pass, "one-hot err " + fmt(worst_onehot, 2) + ", uniform err " + fmt(worst_uniform, 2) +
                      ", gamma=0 mismatches " + std::to_string(not_exact) + "/200, bound violations " +
                      std::to_string(over_bound) + "/200"};
}

Outcome score_ordering() {
    Rng rng(derive_seed(1004, 1));
    std::size_t violations = 0, checked = 0;
    for (int t = 0; t < 100; ++t) {
        const std::size_t n = 2 + rng.below(999);
        std::vector<double> l(n), u(n);
        // Coarse values so ties exercise the index tie-break.
        for (auto& v : l) v = std::round(rng.uniform01() * 50.0) / 10.0;
        for (auto& v : u) v = std::round(rng.uniform01() * 50.0) / 10.0;
        const auto table = build_difficulty_table(l, u);
        std::vector<std::size_t> w, under;
        for (const auto& s : table.stats) {
            if (s.quadrant == Quadrant::well_represented) w.push_back(s.d);
            if (s.quadrant == Quadrant::under_represented) under.push_back(s.d);
        }
        for (auto dw : w)
            for (auto du : under) {
                ++checked;
                violations += dw >= du;
            }
    }
    return {violations == 0, std::to_string(checked) + " (s_w, s_u) pairs, violations " + std::to_string(violations)};
}

Outcome composition_shift() {
    const std::size_t n = 512;
    double mirror_mb1 = 0, random_mb1 = 0, mirror_neg = 0, random_neg = 0;
    std::size_t same_half = 0;
    for (std::uint64_t t = 0; t < 100; ++t) {
        Rng rng(derive_seed(1005, t));
        std::vector<double> l(n), u(n);
        for (std::size_t i = 0; i < n; ++i) {
            l[i] = rng.uniform01();
            u[i] = rng.uniform01();
        }
        const auto table = build_difficulty_table(l, u);
        const auto d = table.d();
        const auto q = table.quadrants();

        auto mirror = mirror_pairing(d, t);
        auto random = random_partition(n, 2, t);
        attach_types(mirror, q);
        attach_types(random, q);
        const auto hm = mb_histogram(mirror), hr = mb_histogram(random);
        mirror_mb1 += static_cast<double>(hm[0]) / 100.0;
        random_mb1 += static_cast<double>(hr[0]) / 100.0;
        mirror_neg += static_cast<double>(hm[4] + hm[5]) / 100.0;
        random_neg += static_cast<double>(hr[4] + hr[5]) / 100.0;

        std::vector<std::size_t> order(n);
        std::iota(order.begin(), order.end(), std::size_t{0});
        std::stable_sort(order.begin(), order.end(), [&](auto a, auto b) { return d[a] < d[b]; });
        std::vector<bool> upper(n, false);
        for (std::size_t k = n / 2; k < n; ++k) upper[order[k]] = true;
        for (const auto& b : mirror.batches)
            if (upper[b.members[0]] == upper[b.members[1]]) ++same_half;
    }
    const bool pass = mirror_mb1 >= random_mb1 && mirror_neg <= random_neg && same_half == 0;
    return {pass, "mean MB1 " + fmt(mirror_mb1) + " vs " + fmt(random_mb1) + ", mean MB5+MB6 " + fmt(mirror_neg) +
                      " vs " + fmt(random_neg) + ", same-half pairs " + std::to_string(same_half)};
}

ExperimentConfig quiet(ExperimentConfig c) {
    c.diagnostics = false;
    c.write_tables = false;
    c.probe.batches = 0;
    return c;
}

Outcome update_efficacy() {
    ExperimentConfig c;
    c.data.kind = DataKind::noisy;
    c.data.noise_rate = 0.0;
    c.data.per_class = 100;
    c.optimizer.pivot_epoch.reset();
    c.optimizer.total_epochs = 60;
    c.diagnostics = false;
    c.write_tables = false;
    c.probe.batches = 300;
    const auto run = run_experiment(c, RandomSampler{}, 1);
    const auto s = summarize_efficacy(run.efficacy);
    const bool pass = run.efficacy.size() >= 200 && s.correlation > 0 && s.top_quartile_mean > s.bottom_quartile_mean;
    return {pass, std::to_string(run.efficacy.size()) + " batches, train loss " +
                      fmt(run.metrics.epochs.back().train_loss) + ", pearson " + fmt(s.correlation) +
                      ", top-quartile mean dl_B " + fmt(s.top_quartile_mean) + " vs bottom " +
                      fmt(s.bottom_quartile_mean)};
}

struct PairedResult {
    double median_random = 0, median_mombs = 0, median_delta = 0;
    std::size_t wins = 0, losses = 0;
};

PairedResult paired_comparison(const ExperimentConfig& c) {
    std::vector<double> rnd, mixed, delta;
    for (auto seed : c.seeds()) {
        const double a = run_experiment(c, RandomSampler{}, seed).metrics.final_accuracy;
        const double b = run_experiment(c, MixedOrderSampler{}, seed).metrics.final_accuracy;
        rnd.push_back(a);
        mixed.push_back(b);
        delta.push_back(b - a);
    }
    PairedResult r;
    r.median_random = percentile(rnd, 0.5);
    r.median_mombs = percentile(mixed, 0.5);
    r.median_delta = percentile(delta, 0.5);
    for (double x : delta) {
        r.wins += x > 0;
        r.losses += x < 0;
    }
    return r;
}

std::string describe(const PairedResult& r, std::size_t seeds) {
    return std::to_string(seeds) + " seeds, median random " + fmt(r.median_random) + ", median mombs " +
           fmt(r.median_mombs) + ", median paired delta " + fmt(r.median_delta) + " (" + std::to_string(r.wins) +
           " up, " + std::to_string(r.losses) + " down)";
}

Outcome longtail_benefit() {
    ExperimentConfig c;  // C=10, n_max=200, rho=0.01, D=8, hidden [32, 32], b=4
    c.seed = 1;
    c.num_seeds = 12;
    c = quiet(c);
    const auto r = paired_comparison(c);
    // The long-tailed test set is class balanced, so plain accuracy is the balanced accuracy.
    return {r.median_mombs >= r.median_random && r.median_delta > 0, describe(r, c.num_seeds)};
}

Outcome noisy_benefit() {
    ExperimentConfig c;
    c.data.kind = DataKind::noisy;
    c.data.noise_rate = 0.4;
    c.seed = 1;
    c.num_seeds = 12;
    c = quiet(c);
    const auto r = paired_comparison(c);
    return {r.median_delta > 0, describe(r, c.num_seeds)};
}

std::string slurp(const fs::path& p) {
    std::ifstream in(p, std::ios::binary);
    std::stringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

std::string strip_line(const std::string& text, const std::regex& pattern) {
    return std::regex_replace(text, pattern, "");
}

// Files that differ between dirs a and b after `normalise`, plus files
// present in only one of them.
std::vector<std::string> differing_files(const fs::path& a, const fs::path& b,
                                         const std::function<std::string(const std::string&, const std::string&)>& normalise) {
    std::vector<std::string> names, out;
    for (const auto& e : fs::directory_iterator(a)) names.push_back(e.path().filename().string());
    std::size_t count_b = 0;
    for ([[maybe_unused]] const auto& e : fs::directory_iterator(b)) ++count_b;
    if (count_b != names.size()) out.push_back("<file count>");
    for (const auto& name : names) {
        if (!fs::exists(b / name)) {
            out.push_back(name);
            continue;
        }
        if (normalise(name, slurp(a / name)) != normalise(name, slurp(b / name))) out.push_back(name);
    }
    return out;
}

Outcome pivot_gate_and_determinism(const fs::path& root) {
    fs::remove_all(root);
    ExperimentConfig c;
    c.data.kind = DataKind::noisy;
    c.data.per_class = 40;
    c.optimizer.total_epochs = 8;
    c.optimizer.pivot_epoch = 2;
    c.probe.batches = 50;

    auto emit = [&](const ExperimentConfig& cfg, const SamplerKind& kind, const std::string& dir) {
        emit_outputs(run_experiment(cfg, kind, 3), cfg, root / dir);
    };
    ExperimentConfig never = c;
    never.optimizer.pivot_epoch.reset();
    emit(never, RandomSampler{}, "inf_random");
    emit(never, MixedOrderSampler{}, "inf_mombs");
    emit(c, MixedOrderSampler{}, "mombs_a");
    emit(c, MixedOrderSampler{}, "mombs_b");

    const std::regex timestamp(R"(\s*"timestamp": [0-9]+,?\n?)");
    const std::regex sampler_field(R"re(("sampler": |kinds = \[)"[a-z_]+")re");
    auto gate_view = [&](const std::string& name, const std::string& text) {
        if (name != "manifest.json" && name != "config.toml") return text;
        return std::regex_replace(strip_line(text, timestamp), sampler_field, "$1\"<sampler>\"");
    };
    auto rerun_view = [&](const std::string& name, const std::string& text) {
        return name == "manifest.json" ? strip_line(text, timestamp) : text;
    };
    const auto gate = differing_files(root / "inf_random", root / "inf_mombs", gate_view);
    const auto rerun = differing_files(root / "mombs_a", root / "mombs_b", rerun_view);

    std::size_t files = 0;
    for ([[maybe_unused]] const auto& e : fs::directory_iterator(root / "inf_random")) ++files;
    auto list = [](const std::vector<std::string>& v) {
        std::string s;
        for (const auto& x : v) s += (s.empty() ? "" : ",") + x;
        return s.empty() ? std::string("none") : s;
    };
    return {gate.empty() && rerun.empty(), std::to_string(files) + " files per run, pivot=inf differences: " +
                                               list(gate) + ", rerun differences: " + list(rerun)};
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"Acceptance checks"};
    std::string out = (fs::temp_directory_path() / "mombs_acceptance").string();
    std::vector<int> only;
    app.add_option("--out", out, "Scratch directory for run outputs");
    app.add_option("--only", only, "Run just these criteria (1-9)");
    CLI11_PARSE(app, argc, argv);

    struct Criterion {
        int id;
        const char* name;
        double budget_s;
        std::function<Outcome()> check;
    };
    const std::vector<Criterion> criteria{
        {1, "pairing optimality", 5, pairing_optimality},
        {2, "gradient correctness", 10, gradient_correctness},
        {3, "entropy and uncertainty contracts", 60, entropy_contracts},
        {4, "score ordering", 60, score_ordering},
        {5, "minibatch composition shift", 30, composition_shift},
        {6, "update efficacy", 120, update_efficacy},
        {7, "end-to-end long-tail benefit", 600, longtail_benefit},
        {8, "end-to-end noisy-label benefit", 600, noisy_benefit},
        {9, "pivot gate and determinism", 120, [&] { return pivot_gate_and_determinism(fs::path(out) / "ac9"); }},
    };

    int failed = 0;
    for (const auto& c : criteria) {
        if (!only.empty() && std::find(only.begin(), only.end(), c.id) == only.end()) continue;
        const auto t0 = Clock::now();
        Outcome o;
        try {
            o = c.check();
        } catch (const std::exception& e) {
            o = {false, std::string("exception: ") + e.what()};
        }
        const double elapsed = seconds_since(t0);
        const bool in_budget = elapsed < c.budget_s;
        const bool pass = o.pass && in_budget;
        failed += !pass;
        std::cout << (pass ? "[PASS] " : "[FAIL] ") << "AC" << c.id << " " << c.name << ": " << o.detail << "; "
                  << fmt(elapsed, 3) << " s (limit " << c.budget_s << " s)" << (in_budget ? "" : " OVER TIME")
                  << std::endl;
    }
    std::cout << (failed ? std::to_string(failed) + " criteria failed" : std::string("all criteria passed")) << "\n";
    return failed ? 1 : 0;
}
