#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>
#include <set>

#include "rpc/dataset_io.hpp"
#include "rpc/synthdata.hpp"

using namespace rpc;

namespace {

WorldConfig small_world(std::uint64_t seed = 3) {
    WorldConfig c;
    c.num_classes_total = 6;
    c.num_known = 3;
    c.dim_input = 8;
    c.samples_per_class = 20;
    c.labeled_fraction = 0.5;
    c.seed = seed;
    return c;
}

std::filesystem::path scratch(const std::string& name) {
    auto p = std::filesystem::temp_directory_path() / ("rpc_synth_" + name);
    std::filesystem::remove_all(p);
    std::filesystem::create_directories(p);
    return p;
}

}  // namespace

TEST(World, SplitSizes) {
    const World w = generate_world(small_world());
    // 3 known classes x 10 labeled; the rest unlabeled
    EXPECT_EQ(w.split.labeled.rows(), 30u);
    EXPECT_EQ(w.split.unlabeled.rows(), 90u);
    EXPECT_EQ(w.split.labels.size(), 30u);
    EXPECT_EQ(w.truth.truth().size(), 90u);
    EXPECT_EQ(w.split.dim(), 8u);
    for (int y : w.split.labels) {
        EXPECT_GE(y, 0);
        EXPECT_LT(y, 3);
    }
    std::vector<int> per_class(6, 0);
    for (int y : w.truth.truth()) {
        ++per_class[y];
    }
    EXPECT_EQ(per_class, (std::vector<int>{10, 10, 10, 20, 20, 20}));
}

TEST(World, DeterministicPerSeed) {
    const World a = generate_world(small_world(5));
    const World b = generate_world(small_world(5));
    const World c = generate_world(small_world(6));
    EXPECT_EQ(a.split, b.split);
    EXPECT_EQ(a.truth, b.truth);
    EXPECT_FALSE(a.split == c.split);
}

TEST(World, CentersAtRequestedDistance) {
    WorldConfig cfg = small_world();
    cfg.class_separation = 10.0;
    const World w = generate_world(cfg);
    const double r = 10.0 / std::sqrt(2.0);
    for (std::size_t c = 0; c < w.centers.rows(); ++c) {
        double n = 0.0;
        for (double v : w.centers.row_span(c)) {
            n += v * v;
        }
        EXPECT_NEAR(std::sqrt(n), r, 1e-9);
    }
}

TEST(World, WellSeparatedWorldIsNearestCenterSeparable) {
    WorldConfig cfg = small_world();
    cfg.dim_input = 32;
    cfg.class_separation = 10.0;
    EXPECT_GT(nearest_center_accuracy(generate_world(cfg)), 0.99);
}

TEST(World, InvalidConfigRejected) {
    WorldConfig cfg = small_world();
    cfg.num_known = 6;
    EXPECT_THROW(generate_world(cfg), ConfigError);
    cfg = small_world();
    cfg.labeled_fraction = 0.01;
    EXPECT_THROW(generate_world(cfg), ConfigError);
}

TEST(Augment, WeakIsAdditiveNoiseOnly) {
    Rng rng(1);
    const AugmentConfig cfg;
    const AugmentInstance a = sample_augmentation(16, AugmentStrength::weak, cfg, rng);
    for (std::size_t i = 0; i < 16; ++i) {
        EXPECT_EQ(a.scale[i], 1.0);
        EXPECT_EQ(a.keep[i], 1.0);
    }
}

TEST(Augment, StrongPerturbsMoreThanWeak) {
    Rng rng(2);
    const AugmentConfig cfg;
    const std::vector<double> x(2000, 1.0);
    double dw = 0.0, ds = 0.0;
    const auto w = augment(x, AugmentStrength::weak, cfg, rng);
    const auto s = augment(x, AugmentStrength::strong, cfg, rng);
    for (std::size_t i = 0; i < x.size(); ++i) {
        dw += (w[i] - x[i]) * (w[i] - x[i]);
        ds += (s[i] - x[i]) * (s[i] - x[i]);
    }
    EXPECT_GT(ds, 4.0 * dw);
}

TEST(Augment, ApplyRowsSharesTransform) {
    Rng rng(3);
    const AugmentInstance a = sample_augmentation(4, AugmentStrength::strong, AugmentConfig{}, rng);
    const Tensor x{{1, 2, 3, 4}, {1, 2, 3, 4}};
    const Tensor y = a.apply_rows(x);
    for (std::size_t j = 0; j < 4; ++j) {
        EXPECT_EQ(y(0, j), y(1, j));
    }
    EXPECT_EQ(y.row_vector(0), a.apply(x.row_span(0)));
}

TEST(DatasetIo, RoundTripIsBitExact) {
    const World w = generate_world(small_world());
    const auto dir = scratch("roundtrip");
    save_dataset(w.split, w.truth, dir / "d.csv");
    EXPECT_EQ(load_dataset(dir / "d.csv"), w.split);
    EXPECT_EQ(load_truth(dir / "d.csv"), w.truth);
}

TEST(DatasetIo, MalformedInputIsParseError) {
    const World w = generate_world(small_world());
    std::string text = serialize_dataset(w.split);
    EXPECT_THROW(parse_dataset("magic=NOPE\n\n"), ParseError);
    EXPECT_THROW(parse_dataset(text.substr(0, text.size() / 2)), ParseError);
    std::string bad = text;
    bad.replace(bad.rfind("U,-1,") + 5, 1, "x");
    EXPECT_THROW(parse_dataset(bad), ParseError);
}

TEST(DatasetIo, MissingFileIsIoError) {
    EXPECT_THROW(load_dataset("/nonexistent/d.csv"), IoError);
}
