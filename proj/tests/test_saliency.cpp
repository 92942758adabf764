#include <gtest/gtest.h>

#include <cmath>
#include <random>

#include "oracles.hpp"
#include "rfcam/errors.hpp"
#include "rfcam/saliency.hpp"
#include "test_util.hpp"

using namespace rfcam;
using rfcam::testing::make_tensor;
using rfcam::testing::random_tensor;
using rfcam::testing::random_vector;

namespace {

SaliencyMap map_of(int h, int w, std::vector<double> data) {
    SaliencyMap m;
    m.height = h;
    m.width = w;
    m.data = std::move(data);
    return m;
}

double norm(const std::vector<double>& v) {
    double s = 0.0;
    for (double x : v) s += x * x;
    return std::sqrt(s);
}

}  // namespace

TEST(PoolGradients, ConstantAndMean) {
    EXPECT_EQ(pool_gradients(make_tensor({2, 2, 2}, std::vector<float>(8, 1.0f))).values,
              (std::vector<double>{1.0, 1.0}));
    EXPECT_EQ(pool_gradients(make_tensor({1, 2, 2}, {1, 2, 3, 4})).values, (std::vector<double>{2.5}));
}

TEST(PoolGradients, MatchesLoopOracle) {
    std::mt19937_64 rng(1);
    const Tensor g = random_tensor(rng, 8, 3, 3);
    const auto w = pool_gradients(g).values;
    for (int k = 0; k < 8; ++k) {
        double s = 0.0;
        for (int p = 0; p < 9; ++p) s += g.data[k * 9 + p];
        EXPECT_NEAR(w[k], s / 9.0, 1e-12);
    }
}

TEST(PoolGradients, IsLinear) {
    std::mt19937_64 rng(2);
    const Tensor a = random_tensor(rng, 5, 4, 4), b = random_tensor(rng, 5, 4, 4);
    Tensor c = a;
    const double alpha = 0.75, beta = -2.0;
    for (std::size_t i = 0; i < c.data.size(); ++i) {
        c.data[i] = static_cast<float>(alpha * a.data[i] + beta * b.data[i]);
    }
    const auto pa = pool_gradients(a).values, pb = pool_gradients(b).values, pc = pool_gradients(c).values;
    for (int k = 0; k < 5; ++k) EXPECT_NEAR(pc[k], alpha * pa[k] + beta * pb[k], 1e-6);
}

TEST(PoolGradients, RejectsNaN) {
    EXPECT_THROW(pool_gradients(make_tensor({1, 1, 2}, {1.0f, std::nanf("")})), ValidationError);
}

TEST(AnalyticHead, FormulaAndZeroRow) {
    HeadWeights h{2, 2, {2.0, 4.0, 0.0, 0.0}, {0.0, 0.0}};
    EXPECT_EQ(analytic_head_gradients(h, 0, 4).values, (std::vector<double>{0.5, 1.0}));
    EXPECT_EQ(analytic_head_gradients(h, 1, 4).values, (std::vector<double>{0.0, 0.0}));
    EXPECT_THROW(analytic_head_gradients(h, 2, 4), ValidationError);
}

TEST(AnalyticHead, MatchesFiniteDifferences) {
    std::mt19937_64 rng(3);
    for (int trial = 0; trial < 20; ++trial) {
        const int c = 3, k = 6, z = 9;
        HeadWeights h{c, k, random_vector(rng, c * k, -2, 2), random_vector(rng, c, -1, 1)};
        const auto a = random_vector(rng, k * z, 0, 1);
        for (int cls = 0; cls < c; ++cls) {
            const auto analytic = analytic_head_gradients(h, cls, z).values;
            const auto fd = oracle::finite_difference_weights(h, cls, a, k, z);
            for (int i = 0; i < k; ++i) {
                EXPECT_NEAR(fd[i], analytic[i], 1e-6 * std::max(1.0, std::abs(analytic[i])));
            }
        }
    }
}

TEST(UnitNormalize, Examples) {
    const std::vector<double> v{3, 4};
    const auto u = unit_normalize(v);
    EXPECT_DOUBLE_EQ(u[0], 0.6);
    EXPECT_DOUBLE_EQ(u[1], 0.8);
    const std::vector<double> z{0, 0, 0};
    EXPECT_EQ(unit_normalize(z), z);
}

TEST(UnitNormalize, UnitNormProperty) {
    std::mt19937_64 rng(4);
    for (int i = 0; i < 1000; ++i) {
        const auto v = random_vector(rng, 1 + i % 20, -5, 5);
        EXPECT_NEAR(norm(unit_normalize(v)), 1.0, 1e-12);
    }
}

TEST(BuildPhi, Examples) {
    EXPECT_EQ(build_phi({{1, 0}}, {{0, 1}}).values, (std::vector<double>{1, 1}));
    const auto p = build_phi({{0, 0}}, {{3, 4}}).values;
    EXPECT_DOUBLE_EQ(p[0], 0.6);
    EXPECT_DOUBLE_EQ(p[1], 0.8);
    EXPECT_THROW(build_phi({{1, 2}}, {{1}}), ValidationError);
}

TEST(BuildPhi, BoundedAndScaleInvariant) {
    std::mt19937_64 rng(5);
    for (int i = 0; i < 200; ++i) {
        const auto w = random_vector(rng, 10, -3, 3), m = random_vector(rng, 10, 0, 3);
        const auto p = build_phi({w}, {m}).values;
        std::vector<double> w3 = w;
        for (auto& x : w3) x *= 3.7;
        const auto q = build_phi({w3}, {m}).values;
        for (int k = 0; k < 10; ++k) {
            EXPECT_LE(std::abs(p[k]), 2.0);
            EXPECT_NEAR(p[k], q[k], 1e-12);
        }
    }
}

TEST(WeightedMap, Examples) {
    const std::vector<double> one{1.0}, neg{-1.0};
    EXPECT_EQ(weighted_activation_map(one, make_tensor({1, 2, 2}, {1, -1, 0, 2})).data,
              (std::vector<double>{1, 0, 0, 2}));
    EXPECT_EQ(weighted_activation_map(neg, make_tensor({1, 2, 2}, {1, 2, 3, 4})).data,
              (std::vector<double>{0, 0, 0, 0}));
    const std::vector<double> two{1.0, 2.0};
    EXPECT_THROW(weighted_activation_map(two, make_tensor({1, 2, 2}, {1, 2, 3, 4})), ValidationError);
}

TEST(WeightedMap, MatchesTripleLoopOracle) {
    std::mt19937_64 rng(6);
    const Tensor a = random_tensor(rng, 16, 5, 5);
    const auto c = random_vector(rng, 16);
    const auto got = weighted_activation_map(c, a).data;
    const auto want = oracle::weighted_map(c, a);
    for (std::size_t i = 0; i < got.size(); ++i) EXPECT_NEAR(got[i], want[i], 1e-10);
}

TEST(WeightedMap, NonNegativeAndHomogeneous) {
    std::mt19937_64 rng(7);
    for (int t = 0; t < 50; ++t) {
        const Tensor a = random_tensor(rng, 6, 4, 3);
        auto c = random_vector(rng, 6);
        const auto m1 = weighted_activation_map(c, a).data;
        for (auto& x : c) x *= 2.0;
        const auto m2 = weighted_activation_map(c, a).data;
        for (std::size_t i = 0; i < m1.size(); ++i) {
            EXPECT_GE(m1[i], 0.0);
            EXPECT_DOUBLE_EQ(m2[i], 2.0 * m1[i]);
        }
    }
}

TEST(NormalizeMap, Examples) {
    EXPECT_EQ(normalize_map(map_of(2, 2, {0, 2, 4, 8})).data, (std::vector<double>{0, 0.25, 0.5, 1.0}));
    EXPECT_EQ(normalize_map(map_of(2, 2, {0, 0, 0, 0})).data, (std::vector<double>{0, 0, 0, 0}));
}

TEST(NormalizeMap, MaxIsOneAndMaskIsScaleInvariant) {
    std::mt19937_64 rng(8);
    for (int t = 0; t < 100; ++t) {
        auto raw = random_vector(rng, 12, 0, 3);
        const auto n1 = normalize_map(map_of(3, 4, raw));
        EXPECT_EQ(n1.max_value(), 1.0);
        for (auto& x : raw) x *= 17.5;
        const auto n2 = normalize_map(map_of(3, 4, raw));
        for (int i = 0; i < 12; ++i) EXPECT_EQ(n1.data[i] > 0.78, n2.data[i] > 0.78);
    }
}

TEST(UpscaleMap, ConstantMidpointAndIdentity) {
    const auto c = upscale_map(map_of(1, 1, {0.5}), 4, 3);
    for (double v : c.data) EXPECT_EQ(v, 0.5);

    const auto m = upscale_map(map_of(2, 2, {1, 0, 0, 1}), 3, 3);
    EXPECT_DOUBLE_EQ(m.at(1, 1), 0.5);
    EXPECT_DOUBLE_EQ(m.at(0, 0), 1.0);
    EXPECT_DOUBLE_EQ(m.at(2, 2), 1.0);

    const auto src = map_of(2, 3, {0.1, 0.2, 0.3, 0.4, 0.5, 0.6});
    EXPECT_EQ(upscale_map(src, 2, 3).data, src.data);
    EXPECT_THROW(upscale_map(src, 1, 3), ValidationError);
}

TEST(UpscaleMap, StaysWithinSourceRange) {
    std::mt19937_64 rng(9);
    const auto src = map_of(3, 3, random_vector(rng, 9, 0, 1));
    const auto [lo, hi] = std::minmax_element(src.data.begin(), src.data.end());
    for (double v : upscale_map(src, 11, 17).data) {
        EXPECT_GE(v, *lo - 1e-15);
        EXPECT_LE(v, *hi + 1e-15);
    }
}

TEST(RampColor, Stops) {
    EXPECT_EQ(ramp_color(0.0), (std::array<std::uint8_t, 3>{0, 0, 255}));
    EXPECT_EQ(ramp_color(0.5), (std::array<std::uint8_t, 3>{0, 255, 0}));
    EXPECT_EQ(ramp_color(1.0), (std::array<std::uint8_t, 3>{255, 0, 0}));
}

TEST(RenderOverlay, UniformEndpointsAndDeterminism) {
    auto check_uniform = [](const std::vector<std::uint8_t>& png, std::array<std::uint8_t, 3> rgb) {
        const RgbImage img = decode_png(png);
        ASSERT_EQ(img.pixels.size(), static_cast<std::size_t>(img.height * img.width * 3));
        for (std::size_t i = 0; i < img.pixels.size(); i += 3) {
            ASSERT_EQ(img.pixels[i], rgb[0]);
            ASSERT_EQ(img.pixels[i + 1], rgb[1]);
            ASSERT_EQ(img.pixels[i + 2], rgb[2]);
        }
    };
    check_uniform(render_overlay(map_of(4, 4, std::vector<double>(16, 0.0))), {0, 0, 255});
    check_uniform(render_overlay(map_of(4, 4, std::vector<double>(16, 1.0))), {255, 0, 0});

    std::mt19937_64 rng(10);
    const auto m = map_of(5, 6, random_vector(rng, 30, 0, 1));
    RgbImage photo{2, 3, {}};
    for (int i = 0; i < 18; ++i) photo.pixels.push_back(static_cast<std::uint8_t>(i * 13));
    EXPECT_EQ(render_overlay(m), render_overlay(m));
    EXPECT_EQ(render_overlay(m, photo), render_overlay(m, photo));
    EXPECT_NE(render_overlay(m), render_overlay(m, photo));
}

TEST(Png, EncodeDecodeRoundTrip) {
    RgbImage img{3, 2, {}};
    for (int i = 0; i < 18; ++i) img.pixels.push_back(static_cast<std::uint8_t>(i * 11));
    EXPECT_EQ(decode_png(encode_png(img)), img);
}
