#include <gtest/gtest.h>

#include <algorithm>
#include <random>
#include <set>

#include "oracles.hpp"
#include "rfcam/errors.hpp"
#include "rfcam/fixtures.hpp"
#include "rfcam/gbdt.hpp"
#include "test_util.hpp"

using namespace rfcam;
using rfcam::testing::random_ensemble;
using rfcam::testing::random_vector;
using rfcam::testing::TempDir;

namespace {

std::vector<LabeledExample> noisy_examples(std::uint64_t seed, int n, int k) {
    std::mt19937_64 rng(seed);
    std::uniform_real_distribution<double> u(-1.0, 1.0);
    std::vector<LabeledExample> out;
    for (int i = 0; i < n; ++i) {
        LabeledExample e;
        e.id = "x" + std::to_string(i);
        e.phi.values = random_vector(rng, k);
        const double score = e.phi.values[0] + 0.5 * e.phi.values[1] * e.phi.values[2] + 0.3 * u(rng);
        e.label = score > 0.0 ? 1 : 0;
        out.push_back(std::move(e));
    }
    return out;
}

TreeEnsemble stump(double base) {
    TreeEnsemble m;
    m.base_score = base;
    m.feature_count = 1;
    Tree t;
    t.nodes = {{0, 0.0, 1, 2, 0.0, 40.0}, {-1, 0.0, -1, -1, -1.0, 30.0}, {-1, 0.0, -1, -1, 1.0, 10.0}};
    m.trees.push_back(t);
    return m;
}

}  // namespace

TEST(Gbdt, EmptyEnsembleHasZeroMargin) {
    TreeEnsemble m;
    m.feature_count = 2;
    const std::vector<double> x{0.3, -0.2};
    EXPECT_EQ(predict_margin(m, x), 0.0);
    EXPECT_EQ(logistic(predict_margin(m, x)), 0.5);
}

TEST(Gbdt, StumpMargin) {
    const auto m = stump(0.25);
    const std::vector<double> x{5.0};
    EXPECT_EQ(predict_margin(m, x), 1.25);
    const std::vector<double> y{-5.0};
    EXPECT_EQ(predict_margin(m, y), -0.75);
    const std::vector<double> bad{1.0, 2.0};
    EXPECT_THROW(predict_margin(m, bad), ValidationError);
}

TEST(Gbdt, SingleLabelDataGivesNoTrees) {
    std::vector<LabeledExample> ex;
    for (int i = 0; i < 20; ++i) ex.push_back({"e" + std::to_string(i), {{double(i), 1.0}}, 1});
    const TreeEnsemble m = train_lsm(0, ex, BoostConfig{});
    EXPECT_TRUE(m.trees.empty());
    EXPECT_GT(logistic(predict_margin(m, ex[0].phi)), 0.99);
}

TEST(Gbdt, EmptyInputIsRejected) {
    EXPECT_THROW(train_lsm(0, std::vector<LabeledExample>{}, BoostConfig{}), ValidationError);
}

TEST(Gbdt, SeparableOneFeature) {
    std::mt19937_64 rng(11);
    std::uniform_real_distribution<double> u(-1.0, 1.0);
    std::vector<LabeledExample> train, test;
    for (int i = 0; i < 100; ++i) {
        const double x = u(rng);
        train.push_back({"t" + std::to_string(i), {{x}}, x > 0 ? 1 : 0});
    }
    for (int i = 0; i < 200; ++i) {
        const double x = u(rng);
        if (std::abs(x) < 0.02) continue;  // stay clear of the learned midpoint
        test.push_back({"s" + std::to_string(i), {{x}}, x > 0 ? 1 : 0});
    }
    const TreeEnsemble m = train_lsm(0, train, BoostConfig{});
    EXPECT_EQ(accuracy(m, train), 1.0);
    EXPECT_EQ(accuracy(m, test), 1.0);
}

TEST(Gbdt, GainTiesPreferLowestFeature) {
    std::vector<LabeledExample> ex;
    for (int i = 0; i < 40; ++i) {
        const double x = i < 20 ? -1.0 - i : 1.0 + i;
        ex.push_back({"e" + std::to_string(i), {{x, x}}, i < 20 ? 0 : 1});
    }
    BoostConfig cfg;
    cfg.num_rounds = 3;
    const TreeEnsemble m = train_lsm(0, ex, cfg);
    for (const Tree& t : m.trees) EXPECT_EQ(t.nodes[0].feature_index, 0);
}

TEST(Gbdt, RespectsDepthAndCover) {
    const auto ex = noisy_examples(12, 300, 6);
    BoostConfig cfg;
    cfg.max_depth = 2;
    const TreeEnsemble m = train_lsm(0, ex, cfg);
    for (const Tree& t : m.trees) {
        std::function<int(int)> depth = [&](int n) -> int {
            const TreeNode& node = t.nodes[n];
            if (node.is_leaf()) return 0;
            EXPECT_NEAR(node.cover, t.nodes[node.left].cover + t.nodes[node.right].cover, 1e-9);
            return 1 + std::max(depth(node.left), depth(node.right));
        };
        EXPECT_LE(depth(0), 2);
    }
}

TEST(Gbdt, MarginMatchesTreeWalkOracle) {
    std::mt19937_64 rng(13);
    for (int t = 0; t < 100; ++t) {
        const TreeEnsemble m = random_ensemble(rng, 6, 4, 8);
        for (int i = 0; i < 20; ++i) {
            const auto x = random_vector(rng, 6);
            EXPECT_EQ(predict_margin(m, x), oracle::tree_walk_margin(m, x));
        }
    }
}

TEST(Gbdt, TrainingIsDeterministic) {
    const auto ex = noisy_examples(14, 250, 8);
    EXPECT_EQ(ensemble_to_json(train_lsm(1, ex, BoostConfig{})), ensemble_to_json(train_lsm(1, ex, BoostConfig{})));
}

TEST(Gbdt, TrainingLossIsMonotone) {
    const auto ex = noisy_examples(15, 300, 8);
    const TreeEnsemble m = train_lsm(0, ex, BoostConfig{});
    ASSERT_FALSE(m.trees.empty());
    double previous = logistic_loss(m, ex, 0);
    for (std::size_t t = 1; t <= m.trees.size(); ++t) {
        const double loss = logistic_loss(m, ex, t);
        EXPECT_LE(loss, previous + 1e-12) << "round " << t;
        previous = loss;
    }
}

TEST(Gbdt, MarginIsPiecewiseConstant) {
    const auto ex = noisy_examples(16, 200, 5);
    const TreeEnsemble m = train_lsm(0, ex, BoostConfig{});
    std::vector<std::set<double>> thresholds(5);
    for (const Tree& t : m.trees) {
        for (const TreeNode& n : t.nodes) {
            if (!n.is_leaf()) thresholds[n.feature_index].insert(n.threshold);
        }
    }
    std::mt19937_64 rng(17);
    for (int trial = 0; trial < 200; ++trial) {
        auto x = random_vector(rng, 5);
        const double before = predict_margin(m, x);
        const int f = trial % 5;
        // Move halfway towards the nearest threshold above x[f] without crossing it.
        auto it = thresholds[f].upper_bound(x[f]);
        const double limit = it == thresholds[f].end() ? x[f] + 1.0 : *it;
        x[f] += (limit - x[f]) * 0.5;
        EXPECT_EQ(predict_margin(m, x), before);
    }
}

TEST(Gbdt, SerializationPreservesPredictions) {
    TempDir dir;
    const auto ex = noisy_examples(18, 300, 7);
    TreeEnsemble m = train_lsm(2, ex, BoostConfig{});
    m.metrics = {0.9, 0.8, 300, 0};
    save_ensemble(dir / "m.json", m);
    const TreeEnsemble back = load_ensemble(dir / "m.json");
    EXPECT_EQ(back, m);
    std::mt19937_64 rng(19);
    for (int i = 0; i < 1000; ++i) {
        const auto x = random_vector(rng, 7, -1.5, 1.5);
        ASSERT_EQ(predict_margin(back, x), predict_margin(m, x));
    }
}

TEST(Gbdt, MalformedJsonIsFormatError) {
    EXPECT_THROW(ensemble_from_json("{\"trees\": 3"), FormatError);
}

TEST(Labels, PolarityAndCounts) {
    TempDir dir;
    FixtureSpec spec;
    spec.train_per_class = 20;
    spec.test_per_class = 10;
    const FixtureOutput fx = fixture_gen(spec, dir.path());
    const auto sets = build_misclassification_labels(fx.bundle);
    std::map<int, int> per_class;
    for (const auto& e : fx.bundle.images()) per_class[e.true_label]++;
    for (const auto& [c, s] : sets) {
        EXPECT_EQ(static_cast<int>(s.train.size() + s.test.size()), per_class[c]);
        for (const auto* part : {&s.train, &s.test}) {
            for (const LabeledExample& ex : *part) {
                const ImageEntry* e = fx.bundle.find(ex.id);
                ASSERT_NE(e, nullptr);
                EXPECT_EQ(e->true_label, c);
                EXPECT_EQ(ex.label, e->predicted_label == e->true_label ? 1 : 0);
            }
        }
    }
}
