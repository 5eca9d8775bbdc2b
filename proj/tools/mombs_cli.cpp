// mombs: command-line driver for mixed-order minibatch sampling experiments.
//
//   mombs run      --config exp.toml --seed 3 --sampler mombs --out runs/a
//   mombs compare  --config exp.toml --out runs/cmp
//   mombs probe    --config exp.toml --out runs/probe
//   mombs gen-data --config exp.toml --out data/

#include <CLI11.hpp>

#include <cstdint>
#include <filesystem>
#include <iostream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "mombs/mombs.hpp"

namespace {

struct Overrides {
    std::string config_path;
    std::optional<std::uint64_t> seed;
    std::optional<std::string> out;
    std::optional<std::string> sampler;
    std::optional<std::string> pivot_epoch;
    std::optional<std::size_t> batch_size;
    std::optional<double> gamma;
    std::optional<std::size_t> disturbances;
    std::optional<std::size_t> epochs;
    std::optional<std::size_t> num_seeds;
};

void add_common(CLI::App* cmd, Overrides& o) {
    cmd->add_option("--config", o.config_path, "TOML experiment config");
    cmd->add_option("--seed", o.seed, "Root seed; every random stream derives from it");
    cmd->add_option("--out", o.out, "Output directory");
    cmd->add_option("--sampler", o.sampler, "random|mombs|anti_mombs|scl_hard|scl_linear|ohem (comma list for compare)");
    cmd->add_option("--pivot-epoch", o.pivot_epoch, "Epoch at which the sampler takes over, or 'inf'");
    cmd->add_option("--batch-size", o.batch_size, "Minibatch size (>= 2)");
    cmd->add_option("--gamma", o.gamma, "Half-width of the uniform feature disturbance");
    cmd->add_option("--disturbances", o.disturbances, "Disturbed forwards per uncertainty estimate");
    cmd->add_option("--epochs", o.epochs, "Training epochs");
    cmd->add_option("--num-seeds", o.num_seeds, "Consecutive seeds starting at --seed (compare)");
}

mombs::ExperimentConfig resolve(const Overrides& o) {
    mombs::ExperimentConfig c;
    if (!o.config_path.empty()) c = mombs::config_from_file(mombs::ConfigFile::load(o.config_path));
    if (o.seed) c.seed = *o.seed;
    if (o.out) c.out_dir = *o.out;
    if (o.sampler) {
        c.sampler.kinds.clear();
        std::stringstream ss(*o.sampler);
        for (std::string item; std::getline(ss, item, ',');)
            if (!item.empty()) c.sampler.kinds.push_back(item);
    }
    if (o.epochs) {
        c.optimizer.total_epochs = *o.epochs;
        if (!o.pivot_epoch && o.config_path.empty()) c.optimizer.pivot_epoch = mombs::default_pivot(*o.epochs);
    }
    if (o.pivot_epoch) {
        if (*o.pivot_epoch == "inf") {
            c.optimizer.pivot_epoch.reset();
        } else {
            const auto v = mombs::csv::parse_int(*o.pivot_epoch);
            if (!v || *v < 0) throw mombs::ConfigError("--pivot-epoch must be a non-negative integer or 'inf'");
            c.optimizer.pivot_epoch = static_cast<std::size_t>(*v);
        }
    }
    if (o.batch_size) c.optimizer.batch_size = *o.batch_size;
    if (o.gamma) c.gamma = *o.gamma;
    if (o.disturbances) c.disturbances = *o.disturbances;
    if (o.num_seeds) c.num_seeds = *o.num_seeds;
    mombs::validate(c);
    return c;
}

int cmd_run(const mombs::ExperimentConfig& c) {
    const auto kind = mombs::parse_sampler(c.sampler.kinds.front());
    const auto run = mombs::run_experiment(c, kind, c.seed);
    mombs::emit_outputs(run, c, c.out_dir);
    const auto& m = run.metrics;
    std::cout << "sampler=" << m.sampler << " seed=" << m.seed << " epochs=" << m.epochs.size()
              << " final_accuracy=" << m.final_accuracy << " best_accuracy=" << m.best_accuracy
              << " (epoch " << m.best_epoch << ")\n"
              << "outputs written to " << c.out_dir << "\n";
    return 0;
}

int cmd_compare(const mombs::ExperimentConfig& c) {
    if (c.sampler.kinds.size() < 2) throw mombs::ConfigError("compare needs at least two sampler kinds");
    const auto seeds = c.seeds();
    std::vector<std::vector<mombs::RunMetrics>> runs(c.sampler.kinds.size());
    std::ostringstream per_run;
    per_run << "kind,seed,final_accuracy,best_accuracy,best_epoch\n";
    for (std::size_t k = 0; k < c.sampler.kinds.size(); ++k) {
        const auto kind = mombs::parse_sampler(c.sampler.kinds[k]);
        for (auto seed : seeds) {
            auto run = mombs::run_experiment(c, kind, seed);
            const auto dir = std::filesystem::path(c.out_dir) / c.sampler.kinds[k] / ("seed_" + std::to_string(seed));
            mombs::emit_outputs(run, c, dir);
            const auto& m = run.metrics;
            per_run << m.sampler << ',' << seed << ',' << mombs::csv::format_double(m.final_accuracy) << ','
                    << mombs::csv::format_double(m.best_accuracy) << ',' << m.best_epoch << '\n';
            std::cerr << "  " << m.sampler << " seed " << seed << ": final accuracy " << m.final_accuracy << "\n";
            runs[k].push_back(std::move(run.metrics));
        }
    }
    const auto rows = mombs::compare_samplers(c.sampler.kinds, runs);
    const std::filesystem::path out(c.out_dir);
    mombs::write_text(out / "summary.csv", mombs::comparison_csv(rows));
    mombs::write_text(out / "runs.csv", per_run.str());
    mombs::write_text(out / "config.toml", mombs::config_to_toml(c));
    std::cout << mombs::comparison_table(rows);
    return 0;
}

int cmd_probe(mombs::ExperimentConfig c) {
    c.sampler.kinds = {"random"};
    c.optimizer.pivot_epoch.reset();
    if (c.probe.batches == 0) throw mombs::ConfigError("probe.batches must be positive");
    const auto run = mombs::run_experiment(c, mombs::RandomSampler{}, c.seed);
    mombs::emit_outputs(run, c, c.out_dir);
    const auto s = mombs::summarize_efficacy(run.efficacy);
    std::cout << "probed " << run.efficacy.size() << " pairs after " << run.metrics.epochs.size() << " epochs\n"
              << "pearson(l1+l2, delta_lB) = " << s.correlation << "\n"
              << "mean delta_lB, top quartile of batch loss    = " << s.top_quartile_mean << "\n"
              << "mean delta_lB, bottom quartile of batch loss = " << s.bottom_quartile_mean << "\n";
    return 0;
}

int cmd_gen_data(const mombs::ExperimentConfig& c) {
    const auto data = mombs::make_data(c.data, c.seed);
    std::filesystem::create_directories(c.out_dir);
    const std::filesystem::path out(c.out_dir);
    mombs::save_csv(data.train, (out / "train.csv").string());
    mombs::save_csv(data.test, (out / "test.csv").string());
    std::cout << "train: " << data.train.size() << " samples, test: " << data.test.size() << " samples, "
              << data.train.num_classes << " classes, dim " << data.train.dim() << "\nclass counts:";
    for (auto n : data.train.class_counts()) std::cout << ' ' << n;
    std::cout << "\n";
    if (data.train.clean_labels)
        std::cout << "flipped labels: " << mombs::flipped_count(data.train) << " of " << data.train.size() << "\n";
    return 0;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"Mixed-order minibatch sampling experiments"};
    app.require_subcommand(1);
    app.set_version_flag("--version", mombs::kVersion);

    Overrides run_o, cmp_o, probe_o, gen_o;
    auto* run = app.add_subcommand("run", "Train one sampler on one seed and write all run artifacts");
    auto* cmp = app.add_subcommand("compare", "Run every configured sampler on a shared seed list and summarise");
    auto* probe = app.add_subcommand("probe", "Train with random batches, then measure one-step loss reductions");
    auto* gen = app.add_subcommand("gen-data", "Write the train/test CSVs the config describes");
    add_common(run, run_o);
    add_common(cmp, cmp_o);
    add_common(probe, probe_o);
    add_common(gen, gen_o);

    CLI11_PARSE(app, argc, argv);
    std::string out_dir;
    try {
        auto dispatch = [&](const Overrides& o, auto&& cmd) {
            const auto c = resolve(o);
            out_dir = c.out_dir;
            return cmd(c);
        };
        if (run->parsed()) return dispatch(run_o, cmd_run);
        if (cmp->parsed()) return dispatch(cmp_o, cmd_compare);
        if (probe->parsed()) return dispatch(probe_o, cmd_probe);
        if (gen->parsed()) return dispatch(gen_o, cmd_gen_data);
    } catch (const mombs::NonFiniteLossError& e) {
        std::cerr << "error: " << e.what() << "\n" << e.dump();
        try {
            std::filesystem::create_directories(out_dir);
            const auto path = std::filesystem::path(out_dir) / "diagnostic_dump.txt";
            mombs::write_text(path, std::string(e.what()) + "\n" + e.dump());
            std::cerr << "state written to " << path.string() << "\n";
        } catch (const std::exception&) {
        }
        return 3;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 2;
    }
    return 1;
}
