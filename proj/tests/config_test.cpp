#include <gtest/gtest.h>

#include "mombs/harness.hpp"

using namespace mombs;

TEST(ConfigFile, ParsesSectionsAndTypes) {
    const auto f = ConfigFile::parse(R"(
top = 1
[data]
kind = "noisy"   # trailing comment
rate = 0.25
[model]
hidden = [16, 8,]
names = ["a", "b # not a comment"]
flag = true
)");
    EXPECT_EQ(f.get_int("top"), 1);
    EXPECT_EQ(f.get_string("data.kind"), "noisy");
    EXPECT_EQ(f.get_double("data.rate"), 0.25);
    EXPECT_EQ(f.get_int_list("model.hidden"), (std::vector<long long>{16, 8}));
    EXPECT_EQ(f.get_string_list("model.names"), (std::vector<std::string>{"a", "b # not a comment"}));
    EXPECT_EQ(f.get_bool("model.flag"), true);
    EXPECT_FALSE(f.get_int("model.missing"));
    EXPECT_TRUE(f.unused_keys().empty());
}

TEST(ConfigFile, ReportsLineNumbers) {
    try {
        ConfigFile::parse("a = 1\n\nnot a pair\n", "x.toml");
        FAIL();
    } catch (const ConfigError& e) {
        EXPECT_NE(std::string(e.what()).find("x.toml:3"), std::string::npos) << e.what();
    }
    EXPECT_THROW(ConfigFile::parse("a = 1\na = 2\n"), ConfigError);
    EXPECT_THROW(ConfigFile::parse("[broken\n"), ConfigError);
}

TEST(ConfigFile, TypeErrors) {
    const auto f = ConfigFile::parse("s = bare\nn = \"x\"\nb = yes\nl = 3\n");
    EXPECT_THROW(f.get_string("s"), ConfigError);
    EXPECT_THROW(f.get_double("n"), ConfigError);
    EXPECT_THROW(f.get_bool("b"), ConfigError);
    EXPECT_THROW(f.get_int_list("l"), ConfigError);
}

TEST(ExperimentConfig, DefaultPivotIsAQuarterOfTraining) {
    const auto c = config_from_file(ConfigFile::parse("[train]\nepochs = 20\n"));
    EXPECT_EQ(c.optimizer.pivot_epoch, 5u);
    EXPECT_EQ(ExperimentConfig{}.optimizer.pivot_epoch, default_pivot(ExperimentConfig{}.optimizer.total_epochs));
}

TEST(ExperimentConfig, InfinitePivot) {
    const auto c = config_from_file(ConfigFile::parse("[train]\npivot_epoch = \"inf\"\n"));
    EXPECT_FALSE(c.optimizer.pivot_epoch);
    EXPECT_THROW(config_from_file(ConfigFile::parse("[train]\npivot_epoch = 2.5\n")), ConfigError);
}

TEST(ExperimentConfig, RejectsUnknownKeysAndBadValues) {
    EXPECT_THROW(config_from_file(ConfigFile::parse("[train]\netaa = 0.1\n")), ConfigError);
    EXPECT_THROW(config_from_file(ConfigFile::parse("[train]\nbatch_size = 1\n")), ConfigError);
    EXPECT_THROW(config_from_file(ConfigFile::parse("[train]\nepochs = 4\npivot_epoch = 9\n")), ConfigError);
    EXPECT_THROW(config_from_file(ConfigFile::parse("[perturbation]\ngamma = -0.1\n")), ConfigError);
    EXPECT_THROW(config_from_file(ConfigFile::parse("[sampler]\nkinds = [\"fancy\"]\n")), std::exception);
    EXPECT_THROW(config_from_file(ConfigFile::parse("[data]\nkind = \"images\"\n")), std::exception);
}

TEST(ExperimentConfig, TomlRoundTrip) {
    ExperimentConfig c;
    c.data.kind = DataKind::noisy;
    c.data.noise_rate = 0.3;
    c.model.hidden = {5, 6, 7};
    c.model.activation = Activation::relu;
    c.model.perturbation_layer = 2;
    c.optimizer.pivot_epoch.reset();
    c.optimizer.eta = 0.037;
    c.sampler.kinds = {"random", "ohem", "scl_linear"};
    c.seed = 42;
    c.num_seeds = 3;
    c.diagnostics = false;
    const auto back = config_from_file(ConfigFile::parse(config_to_toml(c)));
    EXPECT_EQ(config_to_toml(back), config_to_toml(c));
    EXPECT_EQ(back.seeds(), (std::vector<std::uint64_t>{42, 43, 44}));
}
