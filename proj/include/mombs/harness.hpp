#pragma once

// Experiment driver: seeded training runs with a pivot epoch after which the
// configured sampler replaces random minibatching, sampler comparisons across
// seeds, one-step update-efficacy probes, and file emission.

#include <Eigen/Dense>

#include <algorithm>
#include <array>
#include <chrono>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <limits>
#include <map>
#include <numeric>
#include <span>
#include <nlohmann/json.hpp>
#include <optional>
#include <sstream>
#include <stdexcept>
#include <string>
#include <utility>
#include <variant>
#include <vector>

#include "mombs/assessor.hpp"
#include "mombs/config.hpp"
#include "mombs/csv.hpp"
#include "mombs/data.hpp"
#include "mombs/micronet.hpp"
#include "mombs/random.hpp"
#include "mombs/scheduler.hpp"
#include "mombs/version.hpp"

namespace mombs {

enum class DataKind { longtail, noisy, csv };

struct DataConfig {
    DataKind kind = DataKind::longtail;
    std::size_t num_classes = 10;
    std::size_t dim = 8;
    double mean_spread = 1.5;
    double noise_scale = 1.0;
    std::size_t max_per_class = 200;
    double imbalance_ratio = 0.01;
    std::size_t test_per_class = 100;
    std::size_t per_class = 100;
    double noise_rate = 0.4;
    std::string path;
    double test_fraction = 0.3;
};

struct ModelConfig {
    std::vector<std::size_t> hidden{32, 32};
    Activation activation = Activation::tanh;
    std::optional<std::size_t> perturbation_layer;  // default: first hidden activation
};

struct OptimizerCfg {
    double eta = 0.1;
    std::size_t batch_size = 4;
    std::optional<std::size_t> pivot_epoch = 10;  // nullopt = never switch
    std::size_t total_epochs = 40;
    double lr_decay = 1.0;                   // multiplied in every lr_decay_every epochs
    std::size_t lr_decay_every = 0;          // 0 = constant learning rate
};

struct SamplerConfig {
    std::vector<std::string> kinds{"random", "mombs"};
    double scl_percentile = 0.7;
    std::size_t ohem_factor = 2;
    double ohem_top_fraction = 0.25;
};

struct ProbeConfig {
    std::size_t batches = 200;
    double eta = 0.1;
};

struct ExperimentConfig {
    DataConfig data;
    ModelConfig model;
    OptimizerCfg optimizer;
    std::size_t disturbances = 8;
    double gamma = 0.3;
    SamplerConfig sampler;
    std::uint64_t seed = 1;
    std::size_t num_seeds = 1;
    std::string out_dir = "runs/default";
    bool diagnostics = true;   // assess every epoch, not just post-pivot ones
    bool write_tables = true;  // per-epoch difficulty and plan files
    ProbeConfig probe;

    /// seed, seed + 1, ..., seed + num_seeds - 1
    std::vector<std::uint64_t> seeds() const {
        std::vector<std::uint64_t> out;
        for (std::size_t k = 0; k < num_seeds; ++k) out.push_back(seed + k);
        return out;
    }
};

inline std::string to_string(DataKind k) {
    switch (k) {
        case DataKind::longtail: return "longtail";
        case DataKind::noisy: return "noisy";
        case DataKind::csv: return "csv";
    }
    return "?";
}

inline DataKind parse_data_kind(std::string_view s) {
    if (s == "longtail") return DataKind::longtail;
    if (s == "noisy") return DataKind::noisy;
    if (s == "csv") return DataKind::csv;
    throw ConfigError("unknown data kind '" + std::string(s) + "'");
}

/// Pivot resolved against the epoch count: 25% of the epochs when unset.
inline std::optional<std::size_t> default_pivot(std::size_t epochs) { return epochs / 4; }

inline void validate(const ExperimentConfig& c) {
    auto fail = [](const std::string& what) { throw ConfigError(what); };
    if (c.num_seeds < 1) fail("at least one seed is required");
    if (!(c.optimizer.eta > 0.0)) fail("learning rate must be positive");
    if (c.optimizer.batch_size < 2) fail("batch size must be at least 2");
    if (c.optimizer.pivot_epoch && *c.optimizer.pivot_epoch > c.optimizer.total_epochs)
        fail("pivot epoch exceeds the epoch count");
    if (!(c.optimizer.lr_decay > 0.0)) fail("lr_decay must be positive");
    if (c.disturbances < 1) fail("at least one disturbance is required");
    if (!(c.gamma >= 0.0)) fail("gamma must be >= 0");
    if (c.sampler.kinds.empty()) fail("no sampler configured");
    for (const auto& k : c.sampler.kinds) parse_sampler(k);
    if (!(c.sampler.scl_percentile > 0.0 && c.sampler.scl_percentile <= 1.0)) fail("scl_percentile must lie in (0, 1]");
    if (c.sampler.ohem_factor < 1) fail("ohem_factor must be at least 1");
    if (c.sampler.ohem_factor > c.optimizer.batch_size) fail("ohem_factor cannot exceed the batch size");
    if (!(c.sampler.ohem_top_fraction > 0.0 && c.sampler.ohem_top_fraction <= 1.0))
        fail("ohem_top_fraction must lie in (0, 1]");
    if (c.data.kind == DataKind::csv && c.data.path.empty()) fail("csv data needs a path");
    if (c.data.kind != DataKind::longtail && !(c.data.test_fraction > 0.0 && c.data.test_fraction < 1.0))
        fail("test_fraction must lie in (0, 1)");
}

/// Reads a config file. Unknown keys are rejected.
inline ExperimentConfig config_from_file(const ConfigFile& f) {
    ExperimentConfig c;
    auto size = [&](const std::string& key, std::size_t& into) {
        if (const auto v = f.get_int(key)) {
            if (*v < 0) throw ConfigError("'" + key + "' must be >= 0");
            into = static_cast<std::size_t>(*v);
        }
    };
    auto real = [&](const std::string& key, double& into) {
        if (const auto v = f.get_double(key)) into = *v;
    };

    if (const auto v = f.get_string("data.kind")) c.data.kind = parse_data_kind(*v);
    size("data.classes", c.data.num_classes);
    size("data.dim", c.data.dim);
    real("data.mean_spread", c.data.mean_spread);
    real("data.noise_scale", c.data.noise_scale);
    size("data.max_per_class", c.data.max_per_class);
    real("data.imbalance_ratio", c.data.imbalance_ratio);
    size("data.test_per_class", c.data.test_per_class);
    size("data.per_class", c.data.per_class);
    real("data.noise_rate", c.data.noise_rate);
    if (const auto v = f.get_string("data.path")) c.data.path = *v;
    real("data.test_fraction", c.data.test_fraction);

    if (const auto v = f.get_int_list("model.hidden")) {
        c.model.hidden.clear();
        for (auto h : *v) {
            if (h <= 0) throw ConfigError("'model.hidden' entries must be positive");
            c.model.hidden.push_back(static_cast<std::size_t>(h));
        }
    }
    if (const auto v = f.get_string("model.activation")) c.model.activation = parse_activation(*v);
    if (const auto v = f.get_int("model.perturbation_layer")) {
        if (*v < 0) throw ConfigError("'model.perturbation_layer' must be >= 0");
        c.model.perturbation_layer = static_cast<std::size_t>(*v);
    }

    real("train.eta", c.optimizer.eta);
    size("train.batch_size", c.optimizer.batch_size);
    size("train.epochs", c.optimizer.total_epochs);
    real("train.lr_decay", c.optimizer.lr_decay);
    size("train.lr_decay_every", c.optimizer.lr_decay_every);
    c.optimizer.pivot_epoch = default_pivot(c.optimizer.total_epochs);
    if (f.has("train.pivot_epoch")) {
        const auto as_double = f.get_double("train.pivot_epoch");
        if (std::isinf(*as_double))
            c.optimizer.pivot_epoch.reset();
        else if (*as_double < 0 || std::floor(*as_double) != *as_double)
            throw ConfigError("'train.pivot_epoch' must be a non-negative integer or \"inf\"");
        else
            c.optimizer.pivot_epoch = static_cast<std::size_t>(*as_double);
    }

    size("perturbation.disturbances", c.disturbances);
    real("perturbation.gamma", c.gamma);

    if (const auto v = f.get_string_list("sampler.kinds")) c.sampler.kinds = *v;
    real("sampler.scl_percentile", c.sampler.scl_percentile);
    size("sampler.ohem_factor", c.sampler.ohem_factor);
    real("sampler.ohem_top_fraction", c.sampler.ohem_top_fraction);

    if (const auto v = f.get_int("run.seed")) c.seed = static_cast<std::uint64_t>(*v);
    size("run.num_seeds", c.num_seeds);
    if (const auto v = f.get_string("run.out")) c.out_dir = *v;
    if (const auto v = f.get_bool("run.diagnostics")) c.diagnostics = *v;
    if (const auto v = f.get_bool("run.write_tables")) c.write_tables = *v;

    size("probe.batches", c.probe.batches);
    real("probe.eta", c.probe.eta);

    const auto unused = f.unused_keys();
    if (!unused.empty()) throw ConfigError("unknown config key '" + unused.front() + "'");
    validate(c);
    return c;
}

/// Round-trips through config_from_file.
inline std::string config_to_toml(const ExperimentConfig& c) {
    std::ostringstream o;
    auto num = [](double v) { return csv::format_double(v); };
    auto quoted = [](const std::string& s) { return "\"" + s + "\""; };
    o << "[data]\n"
      << "kind = " << quoted(to_string(c.data.kind)) << "\n"
      << "classes = " << c.data.num_classes << "\n"
      << "dim = " << c.data.dim << "\n"
      << "mean_spread = " << num(c.data.mean_spread) << "\n"
      << "noise_scale = " << num(c.data.noise_scale) << "\n"
      << "max_per_class = " << c.data.max_per_class << "\n"
      << "imbalance_ratio = " << num(c.data.imbalance_ratio) << "\n"
      << "test_per_class = " << c.data.test_per_class << "\n"
      << "per_class = " << c.data.per_class << "\n"
      << "noise_rate = " << num(c.data.noise_rate) << "\n"
      << "path = " << quoted(c.data.path) << "\n"
      << "test_fraction = " << num(c.data.test_fraction) << "\n\n";
    o << "[model]\nhidden = [";
    for (std::size_t k = 0; k < c.model.hidden.size(); ++k) o << (k ? ", " : "") << c.model.hidden[k];
    o << "]\nactivation = " << quoted(std::string(to_string(c.model.activation))) << "\n";
    if (c.model.perturbation_layer) o << "perturbation_layer = " << *c.model.perturbation_layer << "\n";
    o << "\n[train]\n"
      << "eta = " << num(c.optimizer.eta) << "\n"
      << "batch_size = " << c.optimizer.batch_size << "\n"
      << "epochs = " << c.optimizer.total_epochs << "\n"
      << "pivot_epoch = " << (c.optimizer.pivot_epoch ? std::to_string(*c.optimizer.pivot_epoch) : "\"inf\"") << "\n"
      << "lr_decay = " << num(c.optimizer.lr_decay) << "\n"
      << "lr_decay_every = " << c.optimizer.lr_decay_every << "\n\n";
    o << "[perturbation]\n"
      << "disturbances = " << c.disturbances << "\n"
      << "gamma = " << num(c.gamma) << "\n\n";
    o << "[sampler]\nkinds = [";
    for (std::size_t k = 0; k < c.sampler.kinds.size(); ++k) o << (k ? ", " : "") << quoted(c.sampler.kinds[k]);
    o << "]\n"
      << "scl_percentile = " << num(c.sampler.scl_percentile) << "\n"
      << "ohem_factor = " << c.sampler.ohem_factor << "\n"
      << "ohem_top_fraction = " << num(c.sampler.ohem_top_fraction) << "\n\n";
    o << "[run]\n"
      << "seed = " << c.seed << "\n"
      << "num_seeds = " << c.num_seeds << "\n"
      << "out = " << quoted(c.out_dir) << "\n"
      << "diagnostics = " << (c.diagnostics ? "true" : "false") << "\n"
      << "write_tables = " << (c.write_tables ? "true" : "false") << "\n\n";
    o << "[probe]\n"
      << "batches = " << c.probe.batches << "\n"
      << "eta = " << num(c.probe.eta) << "\n";
    return o.str();
}

struct DataSplits {
    Dataset train;
    Dataset test;  // evaluated against clean labels when available
};

/// Builds the train/test pair for one seed. The held-out side always carries
/// clean labels; the training side keeps its observed labels.
inline DataSplits make_data(const DataConfig& d, std::uint64_t seed) {
    const std::uint64_t data_seed = derive_seed(seed, stream::data);
    BlobSpec blobs{d.num_classes, d.dim, d.mean_spread, d.noise_scale, data_seed};
    switch (d.kind) {
        case DataKind::longtail: {
            LTSpec spec{blobs, d.max_per_class, d.imbalance_ratio, d.test_per_class};
            return {gen_longtail(spec), gen_longtail_test(spec)};
        }
        case DataKind::noisy: {
            auto [train, test] = split(gen_noisy(NLSpec{blobs, d.per_class, d.noise_rate}), d.test_fraction, data_seed);
            return {std::move(train), with_clean_labels(std::move(test))};
        }
        case DataKind::csv: {
            auto [train, test] = split(load_csv(d.path), d.test_fraction, data_seed);
            return {std::move(train), with_clean_labels(std::move(test))};
        }
    }
    throw std::logic_error("unreachable");
}

inline std::size_t predict(const MicroModel& m, const Eigen::VectorXd& x) {
    const auto probs = forward(m, x).probs;
    std::size_t best = 0;
    for (Eigen::Index c = 1; c < probs.size(); ++c)
        if (probs(c) > probs(static_cast<Eigen::Index>(best))) best = static_cast<std::size_t>(c);
    return best;
}

/// Top-1 accuracy; argmax ties go to the smallest class index.
inline double evaluate(const MicroModel& m, const Dataset& test) {
    if (test.empty()) throw std::invalid_argument("cannot evaluate on an empty test set");
    std::size_t hits = 0;
    for (const auto& s : test.samples) hits += predict(m, s.features) == static_cast<std::size_t>(s.label);
    return static_cast<double>(hits) / static_cast<double>(test.size());
}

/// Mean per-class recall over the classes present in `test`.
inline double balanced_accuracy(const MicroModel& m, const Dataset& test) {
    if (test.empty()) throw std::invalid_argument("cannot evaluate on an empty test set");
    std::vector<std::size_t> hits(test.num_classes, 0), totals(test.num_classes, 0);
    for (const auto& s : test.samples) {
        const auto y = static_cast<std::size_t>(s.label);
        ++totals[y];
        hits[y] += predict(m, s.features) == y;
    }
    double sum = 0;
    std::size_t present = 0;
    for (std::size_t c = 0; c < totals.size(); ++c) {
        if (!totals[c]) continue;
        sum += static_cast<double>(hits[c]) / static_cast<double>(totals[c]);
        ++present;
    }
    return sum / static_cast<double>(present);
}

struct EpochMetrics {
    std::size_t epoch = 0;
    double eta = 0;
    double train_loss = 0;  // mean per-sample loss seen by the SGD steps
    double test_accuracy = 0;
    double plan_variance = std::nan("");
    double mean_loss = std::nan("");
    double mean_uncertainty = std::nan("");
    std::array<std::size_t, kNumMbTypes> mb_counts{};
    bool sampler_active = false;
};

struct RunMetrics {
    std::string sampler;
    std::uint64_t seed = 0;
    std::vector<EpochMetrics> epochs;
    double initial_accuracy = 0;
    double final_accuracy = 0;
    double best_accuracy = 0;
    std::size_t best_epoch = 0;  // 0 with no epochs; otherwise 1-based count of epochs trained
};

struct EfficacyRecord {
    std::size_t member1 = 0, member2 = 0;
    double l1 = 0, l2 = 0;
    double dhat1 = 0, dhat2 = 0;
    double delta_lB = 0;
    double delta_lmin = 0;
};

struct RunArtifacts {
    RunMetrics metrics;
    std::vector<DifficultyTable> tables;
    std::vector<std::pair<std::size_t, EpochPlan>> plans;
    std::vector<EfficacyRecord> efficacy;
    MicroModel model;
};

/// Thrown when a training step produces a non-finite loss; `dump` holds the
/// state needed to reproduce it.
class NonFiniteLossError : public std::runtime_error {
public:
    NonFiniteLossError(const std::string& what, std::string dump) : std::runtime_error(what), dump_(std::move(dump)) {}
    const std::string& dump() const { return dump_; }

private:
    std::string dump_;
};

/// Mean gradient over `members`, each sample's gradient scaled by weights[i]
/// (all ones when `weights` is empty). Returns the mean unweighted loss.
inline double minibatch_gradient(const MicroModel& m, const Dataset& ds, const std::vector<std::size_t>& members,
                                 const std::vector<double>& weights, Gradients& out) {
    out = zero_gradients(m);
    double loss_sum = 0;
    const double scale = 1.0 / static_cast<double>(members.size());
    for (auto i : members) {
        const auto& s = ds.samples[i];
        const auto trace = forward(m, s.features);
        loss_sum += ce_loss(trace.probs, s.label);
        const double w = weights.empty() ? 1.0 : weights[i];
        if (w != 0.0) accumulate(out, backward(trace, s.label, m), w * scale);
    }
    return loss_sum * scale;
}

/// One SGD step per batch, each from the same checkpoint `m`; never
/// accumulates. d_hat uses `uncertainties` indexed by sample.
inline std::vector<EfficacyRecord> efficacy_probe(const MicroModel& m, const Dataset& ds, const EpochPlan& plan, double eta,
                                                  const std::vector<double>& uncertainties) {
    if (uncertainties.size() != ds.size()) throw std::invalid_argument("need one uncertainty per sample");
    std::vector<EfficacyRecord> out;
    out.reserve(plan.batches.size());
    Gradients g;
    for (const auto& b : plan.batches) {
        if (b.members.size() != 2) throw std::invalid_argument("efficacy probes need batches of two");
        const auto i = b.members[0], j = b.members[1];
        EfficacyRecord r;
        r.member1 = i;
        r.member2 = j;
        r.l1 = sample_loss(m, ds.samples[i].features, ds.samples[i].label);
        r.l2 = sample_loss(m, ds.samples[j].features, ds.samples[j].label);
        r.dhat1 = r.l1 + uncertainties[i];
        r.dhat2 = r.l2 + uncertainties[j];
        minibatch_gradient(m, ds, b.members, {}, g);
        const MicroModel stepped = sgd_step(m, g, eta);
        const double after1 = sample_loss(stepped, ds.samples[i].features, ds.samples[i].label);
        const double after2 = sample_loss(stepped, ds.samples[j].features, ds.samples[j].label);
        r.delta_lB = 0.5 * (r.l1 + r.l2) - 0.5 * (after1 + after2);
        const bool first_is_min = r.l1 < r.l2 || (r.l1 == r.l2 && i < j);
        r.delta_lmin = first_is_min ? r.l1 - after1 : r.l2 - after2;
        out.push_back(r);
    }
    return out;
}

namespace detail {

inline std::string state_dump(const MicroModel& m, std::size_t epoch, std::size_t batch_id,
                              const std::vector<std::size_t>& members, double eta, double loss) {
    std::ostringstream o;
    o << "epoch=" << epoch << " batch=" << batch_id << " eta=" << csv::format_double(eta)
      << " loss=" << csv::format_double(loss) << "\nmembers=" << join_members(members) << "\n";
    for (std::size_t k = 0; k < m.layers.size(); ++k)
        o << "layer" << k << " max|W|=" << csv::format_double(m.layers[k].weights.cwiseAbs().maxCoeff())
          << " max|b|=" << csv::format_double(m.layers[k].bias.cwiseAbs().maxCoeff())
          << " finite=" << (m.layers[k].weights.allFinite() && m.layers[k].bias.allFinite()) << "\n";
    return o.str();
}

inline std::vector<std::size_t> model_dims(const ExperimentConfig& c, const Dataset& train) {
    std::vector<std::size_t> dims{train.dim()};
    dims.insert(dims.end(), c.model.hidden.begin(), c.model.hidden.end());
    dims.push_back(train.num_classes == 2 ? 1 : train.num_classes);
    return dims;
}

inline SamplerKind configured(SamplerKind kind, const SamplerConfig& sc) {
    if (auto* s = std::get_if<SclSampler>(&kind)) s->lambda_percentile = sc.scl_percentile;
    if (auto* o = std::get_if<OhemSampler>(&kind)) {
        o->factor = sc.ohem_factor;
        o->top_fraction = sc.ohem_top_fraction;
    }
    return kind;
}

/// Plan for one post-pivot epoch. `weights` is filled for self-paced kinds.
inline EpochPlan build_plan(const SamplerKind& kind, const SamplerConfig& sc, const DifficultyTable& table,
                            std::size_t b, std::uint64_t seed, std::vector<double>& weights) {
    const auto d = table.d();
    const std::size_t n = table.size();
    struct Visitor {
        const DifficultyTable& table;
        const std::vector<std::size_t>& d;
        std::size_t n, b;
        std::uint64_t seed;
        std::vector<double>& weights;

        EpochPlan operator()(const RandomSampler&) const { return random_partition(n, b, seed); }
        EpochPlan operator()(const MixedOrderSampler&) const {
            return b == 2 ? mirror_pairing(d, seed) : snake_partition(d, b, seed);
        }
        EpochPlan operator()(const AntiMixedOrderSampler&) const { return anti_partition(d, b, seed); }
        EpochPlan operator()(const SclSampler& s) const {
            const auto losses = table.losses();
            // All-zero losses would give lambda = 0; everything is easy then.
            const double lambda = std::max(percentile(losses, s.lambda_percentile), std::numeric_limits<double>::min());
            weights.assign(n, 1.0);
            for (std::size_t i = 0; i < n; ++i) weights[i] = scl_weight(losses[i], lambda, s.variant);
            return random_partition(n, b, seed);
        }
        EpochPlan operator()(const OhemSampler& o) const {
            return partition_items(ohem_expand(table.losses(), o.factor, o.top_fraction, seed), b, seed);
        }
    };
    return std::visit(Visitor{table, d, n, b, seed, weights}, configured(kind, sc));
}

}  // namespace detail

/// Trains one model with one sampler and seed. Epochs before the pivot use a
/// random partition; from the pivot on, the difficulty table assessed at the
/// start of each epoch drives the configured sampler.
inline RunArtifacts run_experiment(const ExperimentConfig& c, const SamplerKind& kind, std::uint64_t seed) {
    validate(c);
    const DataSplits data = make_data(c.data, seed);
    const Dataset& train = data.train;
    const std::size_t n = train.size();
    const std::size_t b = c.optimizer.batch_size;
    if (b > n) throw std::invalid_argument("batch size exceeds the training set");

    RunArtifacts out;
    out.model = init_model(detail::model_dims(c, train),
                           train.num_classes == 2 ? Head::sigmoid_binary : Head::softmax_multiclass,
                           c.model.perturbation_layer, seed, c.model.activation);
    MicroModel& model = out.model;
    RunMetrics& metrics = out.metrics;
    metrics.sampler = sampler_name(kind);
    metrics.seed = seed;
    metrics.initial_accuracy = evaluate(model, data.test);
    metrics.final_accuracy = metrics.best_accuracy = metrics.initial_accuracy;

    const auto& opt = c.optimizer;
    Gradients grad;
    for (std::size_t epoch = 0; epoch < opt.total_epochs; ++epoch) {
        EpochMetrics em;
        em.epoch = epoch;
        em.eta = opt.eta;
        if (opt.lr_decay_every > 0)
            em.eta = opt.eta * std::pow(opt.lr_decay, static_cast<double>(epoch / opt.lr_decay_every));
        em.sampler_active = opt.pivot_epoch && epoch >= *opt.pivot_epoch;

        std::optional<DifficultyTable> table;
        if (em.sampler_active || c.diagnostics) {
            const PerturbationSpec spec{c.disturbances, c.gamma, derive_seed(seed, stream::perturbation, epoch)};
            table = assess(model, train, spec, epoch);
        }

        const std::uint64_t plan_seed = derive_seed(seed, stream::plan, epoch);
        std::vector<double> weights;
        EpochPlan plan = em.sampler_active ? detail::build_plan(kind, c.sampler, *table, b, plan_seed, weights)
                                           : random_partition(n, b, plan_seed);
        if (table) {
            const auto d = table->d();
            attach_difficulty(plan, d);
            attach_types(plan, table->quadrants());
            em.plan_variance = plan.variance;
            em.mb_counts = mb_histogram(plan);
            double lsum = 0, usum = 0;
            for (const auto& s : table->stats) {
                lsum += s.loss;
                usum += s.uncertainty;
            }
            em.mean_loss = lsum / static_cast<double>(n);
            em.mean_uncertainty = usum / static_cast<double>(n);
        }

        double loss_total = 0;
        for (std::size_t k = 0; k < plan.batches.size(); ++k) {
            const auto& members = plan.batches[k].members;
            const double batch_loss = minibatch_gradient(model, train, members, weights, grad);
            if (!std::isfinite(batch_loss))
                throw NonFiniteLossError("non-finite loss at epoch " + std::to_string(epoch) + ", batch " +
                                             std::to_string(k),
                                         detail::state_dump(model, epoch, k, members, em.eta, batch_loss));
            loss_total += batch_loss * static_cast<double>(members.size());
            model = sgd_step(std::move(model), grad, em.eta);
        }
        em.train_loss = loss_total / static_cast<double>(plan.total_members());
        em.test_accuracy = evaluate(model, data.test);

        metrics.final_accuracy = em.test_accuracy;
        if (metrics.epochs.empty() || em.test_accuracy > metrics.best_accuracy) {
            metrics.best_accuracy = em.test_accuracy;
            metrics.best_epoch = epoch + 1;
        }
        metrics.epochs.push_back(em);
        if (c.write_tables) {
            if (table) out.tables.push_back(std::move(*table));
            out.plans.emplace_back(epoch, std::move(plan));
        }
    }

    if (c.probe.batches > 0 && n >= 2) {
        const PerturbationSpec spec{c.disturbances, c.gamma, derive_seed(seed, stream::probe)};
        const auto uncertainties = compute_sample_uncertainties(model, train, spec);
        EpochPlan pairs = random_partition(n - n % 2, 2, derive_seed(seed, stream::probe, 1));
        if (pairs.batches.size() > c.probe.batches) pairs.batches.resize(c.probe.batches);
        out.efficacy = efficacy_probe(model, train, pairs, c.probe.eta, uncertainties);
    }
    return out;
}

inline double pearson(std::span<const double> x, std::span<const double> y) {
    if (x.size() != y.size() || x.size() < 2) throw std::invalid_argument("pearson needs two equal-length series");
    const double n = static_cast<double>(x.size());
    double mx = 0, my = 0;
    for (std::size_t i = 0; i < x.size(); ++i) {
        mx += x[i];
        my += y[i];
    }
    mx /= n;
    my /= n;
    double sxy = 0, sxx = 0, syy = 0;
    for (std::size_t i = 0; i < x.size(); ++i) {
        sxy += (x[i] - mx) * (y[i] - my);
        sxx += (x[i] - mx) * (x[i] - mx);
        syy += (y[i] - my) * (y[i] - my);
    }
    if (sxx == 0 || syy == 0) return 0.0;
    return sxy / std::sqrt(sxx * syy);
}

struct EfficacySummary {
    double correlation = 0;       // pearson(l1 + l2, delta_lB)
    double top_quartile_mean = 0;  // mean delta_lB of the highest-total-loss quarter
    double bottom_quartile_mean = 0;
};

inline EfficacySummary summarize_efficacy(const std::vector<EfficacyRecord>& records) {
    if (records.size() < 4) throw std::invalid_argument("need at least four efficacy records");
    std::vector<double> total, delta;
    for (const auto& r : records) {
        total.push_back(r.l1 + r.l2);
        delta.push_back(r.delta_lB);
    }
    EfficacySummary s;
    s.correlation = pearson(total, delta);
    std::vector<std::size_t> order(records.size());
    std::iota(order.begin(), order.end(), std::size_t{0});
    std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return total[a] < total[b]; });
    const std::size_t q = records.size() / 4;
    for (std::size_t k = 0; k < q; ++k) {
        s.bottom_quartile_mean += delta[order[k]];
        s.top_quartile_mean += delta[order[records.size() - 1 - k]];
    }
    s.bottom_quartile_mean /= static_cast<double>(q);
    s.top_quartile_mean /= static_cast<double>(q);
    return s;
}

struct ComparisonRow {
    std::string kind;
    double median = 0;
    double iqr = 0;
    double delta_vs_random = std::nan("");  // median of per-seed (kind - random)
    double mean_plan_variance = std::nan("");  // over sampler-active epochs
};

/// Per-kind summaries across seeds. Every kind must have been run on the same
/// seed list, in the same order.
inline std::vector<ComparisonRow> compare_samplers(const std::vector<std::string>& kinds,
                                                   const std::vector<std::vector<RunMetrics>>& runs) {
    if (kinds.size() != runs.size()) throw std::invalid_argument("one run list per sampler kind");
    if (kinds.size() < 2) throw std::invalid_argument("comparison needs at least two sampler kinds");
    for (const auto& r : runs) {
        if (r.size() != runs.front().size()) throw std::invalid_argument("mismatched seed lists");
        for (std::size_t k = 0; k < r.size(); ++k)
            if (r[k].seed != runs.front()[k].seed) throw std::invalid_argument("mismatched seed lists");
    }
    const auto random_it = std::find(kinds.begin(), kinds.end(), "random");
    std::vector<ComparisonRow> rows;
    for (std::size_t k = 0; k < kinds.size(); ++k) {
        ComparisonRow row;
        row.kind = kinds[k];
        std::vector<double> finals;
        double var_sum = 0;
        std::size_t var_count = 0;
        for (const auto& m : runs[k]) {
            finals.push_back(m.final_accuracy);
            for (const auto& e : m.epochs)
                if (e.sampler_active && !std::isnan(e.plan_variance)) {
                    var_sum += e.plan_variance;
                    ++var_count;
                }
        }
        row.median = percentile(finals, 0.5);
        row.iqr = percentile(finals, 0.75) - percentile(finals, 0.25);
        if (var_count) row.mean_plan_variance = var_sum / static_cast<double>(var_count);
        if (random_it != kinds.end()) {
            const auto& base = runs[static_cast<std::size_t>(random_it - kinds.begin())];
            std::vector<double> deltas;
            for (std::size_t s = 0; s < finals.size(); ++s) deltas.push_back(finals[s] - base[s].final_accuracy);
            row.delta_vs_random = percentile(deltas, 0.5);
        }
        rows.push_back(row);
    }
    return rows;
}

/// kind,median,iqr,delta_vs_random,mean_plan_variance
inline std::string comparison_csv(const std::vector<ComparisonRow>& rows) {
    std::ostringstream o;
    o << "kind,median,iqr,delta_vs_random,mean_plan_variance\n";
    for (const auto& r : rows)
        o << r.kind << ',' << csv::format_double(r.median) << ',' << csv::format_double(r.iqr) << ','
          << csv::format_double(r.delta_vs_random) << ',' << csv::format_double(r.mean_plan_variance) << '\n';
    return o.str();
}

inline std::string comparison_table(const std::vector<ComparisonRow>& rows) {
    std::ostringstream o;
    o << std::left << std::setw(12) << "sampler" << std::right << std::setw(10) << "median" << std::setw(10) << "iqr"
      << std::setw(12) << "delta" << std::setw(14) << "plan_var" << '\n';
    o << std::fixed;
    for (const auto& r : rows)
        o << std::left << std::setw(12) << r.kind << std::right << std::setprecision(4) << std::setw(10) << r.median
          << std::setw(10) << r.iqr << std::showpos << std::setw(12) << r.delta_vs_random << std::noshowpos
          << std::setprecision(2) << std::setw(14) << r.mean_plan_variance << '\n';
    return o.str();
}

inline void write_text(const std::filesystem::path& path, const std::string& text) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw std::runtime_error("cannot write '" + path.string() + "'");
    out << text;
    if (!out) throw std::runtime_error("failed writing '" + path.string() + "'");
}

inline std::string metrics_csv(const RunMetrics& m) {
    std::ostringstream o;
    o << "epoch,eta,train_loss,test_accuracy,plan_variance,mean_loss,mean_uncertainty";
    for (std::size_t k = 1; k <= kNumMbTypes; ++k) o << ",mb" << k;
    o << ",sampler_active\n";
    for (const auto& e : m.epochs) {
        o << e.epoch << ',' << csv::format_double(e.eta) << ',' << csv::format_double(e.train_loss) << ','
          << csv::format_double(e.test_accuracy) << ',' << csv::format_double(e.plan_variance) << ','
          << csv::format_double(e.mean_loss) << ',' << csv::format_double(e.mean_uncertainty);
        for (auto c : e.mb_counts) o << ',' << c;
        o << ',' << (e.sampler_active ? 1 : 0) << '\n';
    }
    return o.str();
}

/// l1,l2,dhat1,dhat2,delta_lB,delta_lmin
inline std::string efficacy_csv(const std::vector<EfficacyRecord>& records) {
    std::ostringstream o;
    o << "l1,l2,dhat1,dhat2,delta_lB,delta_lmin\n";
    for (const auto& r : records)
        o << csv::format_double(r.l1) << ',' << csv::format_double(r.l2) << ',' << csv::format_double(r.dhat1) << ','
          << csv::format_double(r.dhat2) << ',' << csv::format_double(r.delta_lB) << ','
          << csv::format_double(r.delta_lmin) << '\n';
    return o.str();
}

/// Writes metrics.csv, difficulty_epoch{k}.csv, plan_epoch{k}.csv,
/// efficacy.csv, config.toml and manifest.json into `dir`. Everything except
/// the manifest's timestamp is a pure function of (config, sampler, seed).
inline std::vector<std::string> emit_outputs(const RunArtifacts& run, const ExperimentConfig& c,
                                             const std::filesystem::path& dir) {
    std::error_code ec;
    std::filesystem::create_directories(dir, ec);
    if (ec) throw std::runtime_error("cannot create '" + dir.string() + "': " + ec.message());

    std::vector<std::string> files;
    auto emit = [&](const std::string& name, const std::string& text) {
        write_text(dir / name, text);
        files.push_back(name);
    };
    emit("metrics.csv", metrics_csv(run.metrics));
    for (const auto& t : run.tables) {
        const std::string name = "difficulty_epoch" + std::to_string(t.epoch) + ".csv";
        write_difficulty_csv(t, (dir / name).string());
        files.push_back(name);
    }
    for (const auto& [epoch, plan] : run.plans) {
        const std::string name = "plan_epoch" + std::to_string(epoch) + ".csv";
        write_plan_csv(plan, epoch, (dir / name).string());
        files.push_back(name);
    }
    emit("efficacy.csv", efficacy_csv(run.efficacy));
    ExperimentConfig snapshot = c;
    snapshot.seed = run.metrics.seed;
    snapshot.num_seeds = 1;
    snapshot.sampler.kinds = {run.metrics.sampler};
    emit("config.toml", config_to_toml(snapshot));

    nlohmann::ordered_json manifest;
    manifest["tool"] = "mombs";
    manifest["version"] = std::string(kVersion);
    manifest["sampler"] = run.metrics.sampler;
    manifest["seed"] = run.metrics.seed;
    manifest["epochs"] = run.metrics.epochs.size();
    manifest["initial_accuracy"] = run.metrics.initial_accuracy;
    manifest["final_accuracy"] = run.metrics.final_accuracy;
    manifest["best_accuracy"] = run.metrics.best_accuracy;
    manifest["best_epoch"] = run.metrics.best_epoch;
    manifest["files"] = files;
    const auto now = std::chrono::system_clock::now();
    manifest["timestamp"] = std::chrono::duration_cast<std::chrono::seconds>(now.time_since_epoch()).count();
    write_text(dir / "manifest.json", manifest.dump(2) + "\n");
    files.push_back("manifest.json");
    return files;
}

}  // namespace mombs
