#include <gtest/gtest.h>

#include <cmath>

#include "vfm4sdg/gradcheck.hpp"
#include "vfm4sdg/gradcheck_suite.hpp"
#include "vfm4sdg/relation_distill.hpp"

using namespace vfm4sdg;

namespace {

// Direct pairwise cosine over spatial tokens of a C x H x W map.
double brute_cosine(const Tensor& x, std::size_t i, std::size_t j) {
    const std::size_t c = x.dim(0), n = x.dim(1) * x.dim(2);
    double dot = 0.0, ni = 0.0, nj = 0.0;
    for (std::size_t ch = 0; ch < c; ++ch) {
        const double a = x.values()[ch * n + i], b = x.values()[ch * n + j];
        dot += a * b;
        ni += a * a;
        nj += b * b;
    }
    return dot / std::sqrt(ni * nj);
}

double cell(const Tensor& m, std::size_t c, std::size_t y, std::size_t x) {
    return m.values()[(c * m.dim(1) + y) * m.dim(2) + x];
}

}  // namespace

TEST(ReconstructPyramidTest, SingleLevelRowMajor) {
    Tensor tokens = Tensor::matrix({{0, 10}, {1, 11}, {2, 12}, {3, 13}});
    FeaturePyramid p = reconstruct_pyramid(tokens, {{2, 2}});
    const Tensor& m = p.level(0);
    EXPECT_EQ(m.shape(), (Shape{2, 2, 2}));
    EXPECT_EQ(cell(m, 0, 0, 1), 1.0);
    EXPECT_EQ(cell(m, 0, 1, 0), 2.0);
    EXPECT_EQ(cell(m, 1, 1, 1), 13.0);
}

TEST(ReconstructPyramidTest, TwoLevelsSplitFourOne) {
    Tensor tokens = Tensor::matrix({{0}, {1}, {2}, {3}, {4}});
    FeaturePyramid p = reconstruct_pyramid(tokens, {{2, 2}, {1, 1}});
    ASSERT_EQ(p.levels().size(), 2u);
    EXPECT_EQ(p.level(0).shape(), (Shape{1, 2, 2}));
    EXPECT_EQ(p.level(1).shape(), (Shape{1, 1, 1}));
    EXPECT_EQ(p.level(1).values()[0], 4.0);
    EXPECT_EQ(p.level(0).values()[3], 3.0);
}

TEST(ReconstructPyramidTest, FlattenInvertsReconstruct) {
    SeededUniform rng(21);
    for (int trial = 0; trial < 10; ++trial) {
        Tensor t = random_tensor({4 * 4 + 2 * 3 + 1, 5}, rng);
        Tensor back = flatten_pyramid(reconstruct_pyramid(t, {{4, 4}, {2, 3}, {1, 1}}));
        EXPECT_EQ(std::vector<double>(back.values().begin(), back.values().end()),
                  std::vector<double>(t.values().begin(), t.values().end()));
    }
}

TEST(ReconstructPyramidTest, TokenCountMismatchReportsBoth) {
    try {
        reconstruct_pyramid(Tensor::zeros({6, 2}), {{2, 2}, {1, 1}});
        FAIL();
    } catch (const DimensionError& e) {
        const std::string msg = e.what();
        EXPECT_NE(msg.find("expect 5"), std::string::npos) << msg;
        EXPECT_NE(msg.find("got 6"), std::string::npos) << msg;
    }
}

TEST(FeaturePyramidTest, RejectsUnorderedOrMismatchedLevels) {
    EXPECT_THROW(FeaturePyramid({{1, Tensor::zeros({2, 2, 2})}, {0, Tensor::zeros({2, 1, 1})}}), ContractError);
    EXPECT_THROW(FeaturePyramid({{0, Tensor::zeros({2, 2, 2})}, {1, Tensor::zeros({3, 1, 1})}}), DimensionError);
}

TEST(AlignResolutionTest, PoolingPreservesConstants) {
    Tensor y = align_resolution(Tensor::full({2, 4, 4}, 1.75), 2, 2);
    for (double v : y.values()) EXPECT_EQ(v, 1.75);
}

TEST(AlignResolutionTest, BlockMeansOfRamp) {
    std::vector<double> v(16);
    for (int i = 0; i < 16; ++i) v[i] = i;
    Tensor y = align_resolution(Tensor(Shape{1, 4, 4}, v), 2, 2);
    EXPECT_EQ(std::vector<double>(y.values().begin(), y.values().end()), (std::vector<double>{2.5, 4.5, 10.5, 12.5}));
}

TEST(AlignResolutionTest, SameSizeIsIdentity) {
    Tensor x(Shape{1, 2, 2}, {1, 2, 3, 4});
    Tensor y = align_resolution(x, 2, 2);
    EXPECT_EQ(y.node(), x.node());
}

TEST(AlignResolutionTest, DivisibleRatiosMatchBruteForceBlockMeans) {
    SeededUniform rng(22);
    for (auto [h, w, th, tw] : {std::tuple{6, 4, 3, 2}, std::tuple{8, 8, 2, 4}, std::tuple{9, 3, 3, 1}}) {
        Tensor x = random_tensor({3, static_cast<std::size_t>(h), static_cast<std::size_t>(w)}, rng);
        Tensor y = align_resolution(x, th, tw);
        const int bh = h / th, bw = w / tw;
        for (std::size_t c = 0; c < 3; ++c)
            for (int i = 0; i < th; ++i)
                for (int j = 0; j < tw; ++j) {
                    double s = 0.0;
                    for (int a = 0; a < bh; ++a)
                        for (int b = 0; b < bw; ++b) s += cell(x, c, i * bh + a, j * bw + b);
                    EXPECT_NEAR(cell(y, c, i, j), s / (bh * bw), 1e-12);
                }
    }
}

TEST(AlignResolutionTest, NonDivisibleWindowsUseFloorCeil) {
    // 5 -> 3: windows [0,2), [1,4), [3,5).
    Tensor x(Shape{1, 5, 1}, {1, 2, 3, 4, 5});
    Tensor y = align_resolution(x, 3, 1);
    EXPECT_DOUBLE_EQ(y.values()[0], 1.5);
    EXPECT_DOUBLE_EQ(y.values()[1], 3.0);
    EXPECT_DOUBLE_EQ(y.values()[2], 4.5);
}

TEST(AlignResolutionTest, BilinearReproducesBilinearFunctionInside) {
    const double a = 0.3, b = -1.2, c = 0.7, d = 0.25;
    auto f = [&](double y, double x) { return a + b * y + c * x + d * x * y; };
    const std::size_t h = 3, w = 4, th = 7, tw = 9;
    std::vector<double> v(h * w);
    for (std::size_t y = 0; y < h; ++y)
        for (std::size_t x = 0; x < w; ++x) v[y * w + x] = f(static_cast<double>(y), static_cast<double>(x));
    Tensor out = align_resolution(Tensor(Shape{1, h, w}, v), th, tw);
    int interior = 0;
    for (std::size_t i = 0; i < th; ++i)
        for (std::size_t j = 0; j < tw; ++j) {
            const double sy = (static_cast<double>(i) + 0.5) * h / th - 0.5;
            const double sx = (static_cast<double>(j) + 0.5) * w / tw - 0.5;
            if (sy < 0 || sx < 0 || sy > h - 1.0 || sx > w - 1.0) continue;
            ++interior;
            EXPECT_NEAR(cell(out, 0, i, j), f(sy, sx), 1e-12);
        }
    EXPECT_GT(interior, 20);
}

TEST(AlignResolutionTest, MixedAspectUsesBilinear) {
    EXPECT_EQ(alignment_mode(4, 2, 2, 4), AlignMode::Bilinear);
    EXPECT_EQ(alignment_mode(4, 4, 2, 4), AlignMode::AdaptivePool);
    Tensor y = align_resolution(Tensor::full({1, 4, 2}, 3.0), 2, 4);
    EXPECT_EQ(y.shape(), (Shape{1, 2, 4}));
    for (double v : y.values()) EXPECT_NEAR(v, 3.0, 1e-15);
}

TEST(RelationMatrixTest, IdenticalTokensGiveOnes) {
    Tensor x(Shape{2, 1, 3}, {2, 2, 2, -1, -1, -1});
    RelationMatrix r = relation_matrix(x);
    for (std::size_t i = 0; i < 3; ++i)
        for (std::size_t j = 0; j < 3; ++j) EXPECT_NEAR(r.values(i, j), i == j ? 0.0 : 1.0, 1e-15);
}

TEST(RelationMatrixTest, OrthogonalTokensGiveZero) {
    Tensor x(Shape{2, 1, 2}, {1, 0, 0, 3});
    RelationMatrix r = relation_matrix(x);
    EXPECT_EQ(r.values(0, 1), 0.0);
    EXPECT_EQ(r.values(1, 0), 0.0);
}

TEST(RelationMatrixTest, MatchesBruteForceCosine) {
    SeededUniform rng(23);
    for (int trial = 0; trial < 20; ++trial) {
        Tensor x = random_tensor({4, 1, 3}, rng);
        RelationMatrix r = relation_matrix(x);
        ASSERT_TRUE(r.mask_diagonal);
        for (std::size_t i = 0; i < 3; ++i)
            for (std::size_t j = 0; j < 3; ++j) {
                if (i == j) {
                    EXPECT_EQ(r.values(i, j), 0.0);
                } else {
                    EXPECT_NEAR(r.values(i, j), brute_cosine(x, i, j), 1e-9);
                    EXPECT_EQ(r.values(i, j), r.values(j, i));
                }
            }
    }
}

TEST(RelationMatrixTest, PerTokenPositiveScalingInvariance) {
    SeededUniform rng(24);
    for (int trial = 0; trial < 20; ++trial) {
        Tensor x = random_tensor({3, 2, 3}, rng);
        std::vector<double> scaled(x.values().begin(), x.values().end());
        std::vector<double> factors(6);
        for (auto& f : factors) f = rng(0.01, 100.0);
        for (std::size_t c = 0; c < 3; ++c)
            for (std::size_t t = 0; t < 6; ++t) scaled[c * 6 + t] *= factors[t];
        RelationMatrix a = relation_matrix(x), b = relation_matrix(Tensor(x.shape(), scaled));
        for (std::size_t i = 0; i < a.values.size(); ++i) EXPECT_NEAR(a.values.values()[i], b.values.values()[i], 1e-9);
    }
}

TEST(CsrpdLossTest, ZeroWhenStudentEqualsTeacher) {
    SeededUniform rng(25);
    Tensor t = random_tensor({3, 2, 2}, rng);
    FeaturePyramid student({{0, t}, {1, t}, {2, t}});
    auto res = csrpd_loss(student, {t, "t"}, {0, 1, 2});
    EXPECT_EQ(res.total.item(), 0.0);
    ASSERT_EQ(res.per_level.size(), 3u);
}

TEST(CsrpdLossTest, TwoTokenClosedForm) {
    // Student tokens (1,0),(1,1): cosine 1/sqrt(2). Teacher tokens orthogonal.
    Tensor s(Shape{2, 1, 2}, {1, 1, 0, 1});
    Tensor t(Shape{2, 1, 2}, {1, 0, 0, 1});
    FeaturePyramid student({{0, s}});
    const double d = 1.0 / std::sqrt(2.0);
    const double expected = 0.5 * d * d;  // both residuals inside the quadratic branch
    EXPECT_NEAR(csrpd_loss(student, {t, ""}, {0}, 1.0).total.item(), expected, 1e-15);
    EXPECT_NEAR(expected, 0.25, 1e-15);
    // Smaller knee pushes both residuals onto the linear branch.
    EXPECT_NEAR(csrpd_loss(student, {t, ""}, {0}, 0.5).total.item(), d - 0.25, 1e-15);
}

TEST(CsrpdLossTest, LevelErrors) {
    Tensor t = Tensor::full({2, 2, 2}, 1.0);
    FeaturePyramid student({{0, t}});
    EXPECT_THROW(csrpd_loss(student, {t, ""}, {}), ContractError);
    EXPECT_THROW(csrpd_loss(student, {t, ""}, {0, 3}), LookupError);
}

TEST(CsrpdLossTest, NonNegativeAndMonotoneInLevelSet) {
    SeededUniform rng(26);
    for (int trial = 0; trial < 10; ++trial) {
        FeaturePyramid student({{0, random_tensor({4, 6, 6}, rng)},
                                {1, random_tensor({4, 3, 3}, rng)},
                                {2, random_tensor({4, 2, 2}, rng)},
                                {3, random_tensor({4, 1, 2}, rng)},
                                {4, random_tensor({4, 1, 1}, rng)}});
        TeacherFeature teacher{random_tensor({5, 3, 3}, rng), ""};
        double prev = 0.0;
        std::vector<int> levels;
        for (int l = 4; l >= 0; --l) {
            levels.push_back(l);
            const double v = csrpd_loss(student, teacher, levels).total.item();
            EXPECT_GE(v, prev);
            prev = v;
        }
        EXPECT_GT(prev, 0.0);
    }
}

TEST(CsrpdLossTest, TeacherReceivesNoGradient) {
    SeededUniform rng(27);
    Tensor s = random_tensor({4, 3, 3}, rng, true);
    Tensor t = random_tensor({4, 2, 2}, rng, true);
    FeaturePyramid student({{0, s}});
    const double before = csrpd_loss(student, {t, ""}, {0}).total.item();
    Tensor loss = csrpd_loss(student, {t, ""}, {0}).total;
    backward(loss);
    EXPECT_TRUE(s.has_grad());
    EXPECT_FALSE(t.has_grad());
    t.mutable_values()[0] += 0.5;
    EXPECT_NE(csrpd_loss(student, {t, ""}, {0}).total.item(), before);
}

TEST(CsrpdLossTest, GradientMatchesFiniteDifferences) {
    SeededUniform rng(28);
    for (int trial = 0; trial < 5; ++trial) {
        Tensor s = random_tensor({4, 3, 3}, rng, true);
        TeacherFeature teacher{random_tensor({4, 2, 2}, rng), ""};
        auto r = grad_check(
            [&](const Tensor& x) { return csrpd_loss(FeaturePyramid({{0, x}}), teacher, {0}).total; }, s);
        EXPECT_TRUE(r.pass) << r.max_rel_error;
    }
}

TEST(CsrpdLossTest, BatchAveragesImages) {
    SeededUniform rng(29);
    Tensor a = random_tensor({3, 2, 2}, rng), b = random_tensor({3, 2, 2}, rng);
    TeacherFeature ta{random_tensor({3, 2, 2}, rng), ""}, tb{random_tensor({3, 2, 2}, rng), ""};
    const double la = csrpd_loss(FeaturePyramid({{0, a}}), ta, {0}).total.item();
    const double lb = csrpd_loss(FeaturePyramid({{0, b}}), tb, {0}).total.item();
    auto res = csrpd_loss_batch({FeaturePyramid({{0, a}}), FeaturePyramid({{0, b}})}, {ta, tb}, {0});
    EXPECT_NEAR(res.total.item(), 0.5 * (la + lb), 1e-15);
    EXPECT_NEAR(res.per_level[0].second, 0.5 * (la + lb), 1e-15);
}

TEST(CombineLossesTest, Arithmetic) {
    EXPECT_EQ(combine_losses(2.0, 3.0, 0.0), 2.0);
    EXPECT_DOUBLE_EQ(combine_losses(2.0, 3.0, 0.5), 3.5);
    EXPECT_EQ(kDefaultLambda, 1.0);
    EXPECT_THROW(combine_losses(1.0, 1.0, -0.1), ContractError);
}

TEST(CombineLossesTest, GradientSplitsByLambda) {
    Tensor det = Tensor::scalar(2.0, true), distill = Tensor::scalar(3.0, true);
    backward(combine_losses(det, distill, 0.3));
    EXPECT_EQ(det.grad()[0], 1.0);
    EXPECT_DOUBLE_EQ(distill.grad()[0], 0.3);
}

TEST(CombineLossesTest, LinearInLambda) {
    for (double lam : {0.1, 0.3, 0.5, 0.8, 1.0, 1.2, 1.5}) {
        EXPECT_DOUBLE_EQ(combine_losses(0.0, 0.8, lam), lam * 0.8);
    }
}
