#include <gtest/gtest.h>

#include <filesystem>
#include <numeric>

#include "mombs/data.hpp"

using namespace mombs;

namespace {

std::string fixture(const char* name) { return std::string(MOMBS_FIXTURE_DIR) + "/" + name; }

}  // namespace

TEST(LongTail, Counts) {
    EXPECT_EQ(longtail_counts(10, 500, 0.01),
              (std::vector<std::size_t>{500, 300, 180, 108, 65, 39, 23, 14, 8, 5}));
    EXPECT_EQ(longtail_counts(10, 200, 0.01),
              (std::vector<std::size_t>{200, 120, 72, 43, 26, 15, 9, 6, 3, 2}));
    EXPECT_EQ(longtail_counts(3, 10, 1.0), (std::vector<std::size_t>{10, 10, 10}));
    EXPECT_THROW(longtail_counts(10, 20, 0.001), std::invalid_argument);
    EXPECT_THROW(longtail_counts(1, 20, 0.5), std::invalid_argument);
}

TEST(LongTail, GeneratedDataMatchesCounts) {
    LTSpec spec;
    spec.blobs.seed = 4;
    const auto ds = gen_longtail(spec);
    EXPECT_EQ(ds.class_counts(), longtail_counts(10, 200, 0.01));
    EXPECT_EQ(ds.dim(), 8u);
    EXPECT_NO_THROW(validate(ds));
    const auto test = gen_longtail_test(spec);
    EXPECT_EQ(test.class_counts(), std::vector<std::size_t>(10, 100));
}

TEST(LongTail, SeededAndSharedMeans) {
    LTSpec a, b;
    a.blobs.seed = b.blobs.seed = 9;
    const auto x = gen_longtail(a), y = gen_longtail(b);
    for (std::size_t i = 0; i < x.size(); ++i) EXPECT_EQ(x.samples[i].features, y.samples[i].features);
    b.blobs.seed = 10;
    EXPECT_NE(gen_longtail(b).samples[0].features, x.samples[0].features);
}

TEST(LongTail, ZeroNoisePutsSamplesOnTheirMeans) {
    LTSpec spec;
    spec.blobs.noise_scale = 0.0;
    spec.blobs.seed = 2;
    const auto means = class_means(spec.blobs);
    for (const auto& s : gen_longtail(spec).samples) EXPECT_EQ(s.features, means[static_cast<std::size_t>(s.label)]);
}

TEST(Noisy, FlipRateAndCleanLabels) {
    NLSpec spec;
    spec.blobs.seed = 3;
    spec.per_class = 500;
    const auto ds = gen_noisy(spec);
    ASSERT_TRUE(ds.clean_labels);
    const double rate = static_cast<double>(flipped_count(ds)) / static_cast<double>(ds.size());
    // 5000 Bernoulli(0.4) draws: sd ~ 0.007.
    EXPECT_NEAR(rate, 0.4, 0.03);
    EXPECT_EQ(flipped_count(with_clean_labels(ds)), 0u);
    spec.noise_rate = 0.0;
    EXPECT_EQ(flipped_count(gen_noisy(spec)), 0u);
    spec.noise_rate = 1.0;
    EXPECT_THROW(gen_noisy(spec), std::invalid_argument);
}

TEST(Noisy, FlipsNeverKeepTheOriginalClass) {
    NLSpec spec;
    spec.noise_rate = 0.9;
    spec.blobs.num_classes = 3;
    spec.blobs.seed = 5;
    const auto ds = gen_noisy(spec);
    std::vector<std::size_t> targets(3, 0);
    for (const auto& s : ds.samples) {
        const int clean = (*ds.clean_labels)[s.index];
        if (s.label != clean) ++targets[static_cast<std::size_t>(s.label)];
    }
    for (auto t : targets) EXPECT_GT(t, 0u);
}

TEST(Csv, LoadFixture) {
    const auto ds = load_csv(fixture("three_rows.csv"));
    ASSERT_EQ(ds.size(), 3u);
    EXPECT_EQ(ds.dim(), 2u);
    EXPECT_EQ(ds.num_classes, 3u);
    EXPECT_EQ(ds.samples[1].label, 2);
    EXPECT_DOUBLE_EQ(ds.samples[0].features(1), -1.25);
    EXPECT_EQ(ds.samples[2].index, 2u);
}

TEST(Csv, Errors) {
    try {
        load_csv(fixture("bad_feature.csv"));
        FAIL() << "expected an error";
    } catch (const std::runtime_error& e) {
        EXPECT_NE(std::string(e.what()).find("row 3"), std::string::npos) << e.what();
    }
    EXPECT_THROW(load_csv(fixture("bad_label.csv")), std::runtime_error);
    try {
        load_csv(fixture("header_only.csv"));
        FAIL() << "expected an error";
    } catch (const std::runtime_error& e) {
        EXPECT_NE(std::string(e.what()).find("no samples"), std::string::npos);
    }
    EXPECT_THROW(load_csv(fixture("missing.csv")), std::runtime_error);
}

TEST(Csv, RoundTripIsExact) {
    NLSpec spec;
    spec.per_class = 5;
    spec.blobs.seed = 8;
    const auto ds = gen_noisy(spec);
    const auto path = (std::filesystem::temp_directory_path() / "mombs_data_rt.csv").string();
    save_csv(ds, path);
    const auto back = load_csv(path);
    ASSERT_EQ(back.size(), ds.size());
    for (std::size_t i = 0; i < ds.size(); ++i) {
        EXPECT_EQ(back.samples[i].features, ds.samples[i].features);
        EXPECT_EQ(back.samples[i].label, ds.samples[i].label);
    }
    EXPECT_EQ(*back.clean_labels, *ds.clean_labels);
    std::filesystem::remove(path);
}

TEST(Split, StratifiedAndReindexed) {
    NLSpec spec;
    spec.per_class = 20;
    spec.blobs.seed = 1;
    const auto ds = gen_noisy(spec);
    const auto [train, test] = split(ds, 0.3, 5);
    EXPECT_EQ(train.size() + test.size(), ds.size());
    EXPECT_EQ(test.size(), 60u);
    std::vector<std::size_t> per_class(10, 0);
    for (const auto& s : test.samples) ++per_class[static_cast<std::size_t>((*test.clean_labels)[s.index])];
    for (auto c : per_class) EXPECT_EQ(c, 6u);
    EXPECT_NO_THROW(validate(train));
    EXPECT_NO_THROW(validate(test));
    EXPECT_THROW(split(ds, 1.0, 5), std::invalid_argument);
}

TEST(Split, SingletonClassCannotBeSplit) {
    const auto ds = load_csv(fixture("three_rows.csv"));
    EXPECT_THROW(split(ds, 0.5, 1), std::invalid_argument);
}

TEST(Split, TinyFractionStillLeavesOneTestSample) {
    NLSpec spec;
    spec.per_class = 4;
    spec.blobs.num_classes = 2;
    const auto [train, test] = split(gen_noisy(spec), 0.01, 2);
    EXPECT_EQ(test.size(), 2u);
    EXPECT_EQ(train.size(), 6u);
}

TEST(Validate, CatchesBadIndicesAndLabels) {
    auto ds = load_csv(fixture("three_rows.csv"));
    ds.samples[1].index = 5;
    EXPECT_THROW(validate(ds), std::invalid_argument);
    ds.samples[1].index = 1;
    ds.samples[1].label = 3;
    EXPECT_THROW(validate(ds), std::invalid_argument);
}
