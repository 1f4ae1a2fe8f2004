#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <random>

#include "oracles.hpp"
#include "vfm4sdg/detect_metrics.hpp"

using namespace vfm4sdg;

namespace {

// Four ground-truth boxes: two found, one found with the wrong class, one
// missed, plus a stray detection far from everything.
oracle::DetectionProblem four_gt_case() {
    oracle::DetectionProblem p;
    p.gts = {{0, {0, 0, 10, 10}, 1}, {0, {20, 0, 10, 10}, 1}, {0, {40, 0, 10, 10}, 2}, {0, {60, 0, 10, 10}, 1}};
    p.dets = {{0, {0, 0, 10, 10}, 1, 0.9},
              {0, {21, 0, 10, 10}, 1, 0.8},
              {0, {40, 1, 10, 10}, 1, 0.7},
              {0, {200, 200, 10, 10}, 2, 0.6}};
    return p;
}

std::vector<Detection> perfect(const std::vector<BoxAnnotation>& gts) {
    std::vector<Detection> d;
    for (std::size_t i = 0; i < gts.size(); ++i) d.push_back({gts[i].image_id, gts[i].bbox, gts[i].category_id, 0.9 - 0.01 * i});
    return d;
}

}  // namespace

TEST(IouTest, Examples) {
    EXPECT_EQ(iou({1, 2, 3, 4}, {1, 2, 3, 4}), 1.0);
    EXPECT_EQ(iou({0, 0, 1, 1}, {5, 5, 1, 1}), 0.0);
    EXPECT_EQ(iou({0, 0, 1, 1}, {1, 0, 1, 1}), 0.0);
    EXPECT_DOUBLE_EQ(iou({0, 0, 1, 1}, {0.5, 0, 1, 1}), 1.0 / 3.0);
}

TEST(IouTest, SymmetricAndBounded) {
    std::mt19937_64 rng(61);
    std::uniform_real_distribution<double> u(0.0, 10.0);
    for (int i = 0; i < 1000; ++i) {
        Box a{u(rng), u(rng), 0.1 + u(rng), 0.1 + u(rng)}, b{u(rng), u(rng), 0.1 + u(rng), 0.1 + u(rng)};
        const double v = iou(a, b);
        EXPECT_EQ(v, iou(b, a));
        EXPECT_GE(v, 0.0);
        EXPECT_LE(v, 1.0);
    }
}

TEST(ApTest, PerfectDetectorScoresOne) {
    auto p = four_gt_case();
    EXPECT_EQ(ap50(perfect(p.gts), p.gts), 1.0);
    MapReport m = evaluate_map(perfect(p.gts), p.gts);
    ASSERT_EQ(m.per_class.size(), 2u);
    EXPECT_EQ(m.per_class[0].gt_count, 3u);
}

TEST(ApTest, EmptyDetectorScoresZero) {
    auto p = four_gt_case();
    EXPECT_EQ(ap50({}, p.gts), 0.0);
}

TEST(ApTest, FalsePositiveRankedSecond) {
    std::vector<BoxAnnotation> gts{{0, {0, 0, 10, 10}, 0}, {0, {50, 50, 10, 10}, 0}};
    std::vector<Detection> dets{{0, {0, 0, 10, 10}, 0, 0.9}, {0, {100, 0, 10, 10}, 0, 0.8}, {0, {50, 50, 10, 10}, 0, 0.7}};
    EXPECT_NEAR(ap50(dets, gts), 5.0 / 6.0, 1e-15);
    EXPECT_NEAR(oracle::ap_of_ranking(dets, gts, 0), 5.0 / 6.0, 1e-15);
}

TEST(ApTest, ClassesWithoutGroundTruthAreExcluded) {
    std::vector<BoxAnnotation> gts{{0, {0, 0, 10, 10}, 0}};
    std::vector<Detection> dets{{0, {0, 0, 10, 10}, 0, 0.9}, {0, {30, 0, 10, 10}, 5, 0.95}};
    MapReport m = evaluate_map(dets, gts);
    ASSERT_EQ(m.per_class.size(), 1u);
    EXPECT_EQ(m.map50, 1.0);
}

TEST(ApTest, DuplicateDetectionIsFalsePositive) {
    std::vector<BoxAnnotation> gts{{0, {0, 0, 10, 10}, 0}};
    std::vector<Detection> dets{{0, {0, 0, 10, 10}, 0, 0.9}, {0, {0, 0, 10, 10}, 0, 0.8}};
    EXPECT_EQ(ap50(dets, gts), 1.0);
    std::reverse(dets.begin(), dets.end());
    dets[0].score = 0.95;
    EXPECT_EQ(ap50(dets, gts), 1.0);
}

TEST(ApTest, MatchesExhaustiveOracleOnSmallInstances) {
    std::mt19937_64 rng(62);
    for (int i = 0; i < 3000; ++i) {
        const bool ties = i % 3 == 0;
        auto p = oracle::random_problem(rng, 6, 2, 2, ties);
        MapReport m = evaluate_map(p.dets, p.gts);
        for (const auto& c : m.per_class) {
            const auto all = oracle::ap_over_tie_orders(p.dets, p.gts, c.category);
            if (!ties) {
                ASSERT_EQ(all.size(), 1u);
                EXPECT_NEAR(c.ap, all[0], 1e-12) << "instance " << i;
            } else {
                EXPECT_NEAR(c.ap, oracle::ap_of_ranking(oracle::stable_ranking(p.dets), p.gts, c.category), 1e-12);
                EXPECT_TRUE(std::any_of(all.begin(), all.end(), [&](double v) { return std::abs(v - c.ap) < 1e-12; }));
            }
        }
        EXPECT_NEAR(m.map50, oracle::map_of(p.dets, p.gts), 1e-12);
    }
}

TEST(ApTest, InvariantUnderMonotoneScoreTransform) {
    std::mt19937_64 rng(63);
    for (int i = 0; i < 500; ++i) {
        auto p = oracle::random_problem(rng, 8, 3, 2, i % 2 == 0);
        const double before = ap50(p.dets, p.gts);
        for (auto& d : p.dets) d.score = std::sqrt(d.score) * 0.5;
        EXPECT_EQ(ap50(p.dets, p.gts), before);
    }
}

TEST(ApTest, BoundedByZeroAndOne) {
    std::mt19937_64 rng(64);
    for (int i = 0; i < 500; ++i) {
        auto p = oracle::random_problem(rng, 10);
        const double v = ap50(p.dets, p.gts);
        EXPECT_GE(v, 0.0);
        EXPECT_LE(v, 1.0);
    }
}

TEST(TaxonomyTest, PerfectPredictions) {
    auto p = four_gt_case();
    ErrorReport r = error_taxonomy(perfect(p.gts), p.gts);
    EXPECT_EQ(r.fn_rate, 0.0);
    EXPECT_EQ(r.fp_rate, 0.0);
    EXPECT_EQ(r.confusion_rate, 0.0);
    EXPECT_EQ(r.correct_rate, 1.0);
}

TEST(TaxonomyTest, TotalMiss) {
    auto p = four_gt_case();
    ErrorReport r = error_taxonomy({}, p.gts);
    EXPECT_EQ(r.fn_rate, 1.0);
    EXPECT_EQ(r.fp_rate, 0.0);
    EXPECT_EQ(r.confusion_rate, 0.0);
}

TEST(TaxonomyTest, FourGroundTruthCase) {
    auto p = four_gt_case();
    ErrorReport r = error_taxonomy(p.dets, p.gts);
    EXPECT_EQ(r.fn_rate, 0.25);
    EXPECT_EQ(r.confusion_rate, 0.25);
    EXPECT_EQ(r.fp_rate, 0.25);
    EXPECT_EQ(r.correct_rate, 0.5);
    auto o = oracle::taxonomy(p.dets, p.gts, 0.5, 0.5);
    EXPECT_EQ(o.fn, 1u);
    EXPECT_EQ(o.confusion, 1u);
    EXPECT_EQ(o.fp, 1u);
    EXPECT_EQ(o.correct, 2u);
}

TEST(TaxonomyTest, EmptyInputsGiveZeroRates) {
    ErrorReport r = error_taxonomy({}, {});
    EXPECT_EQ(r.fn_rate, 0.0);
    EXPECT_EQ(r.fp_rate, 0.0);
    EXPECT_EQ(r.confusion_rate, 0.0);
}

TEST(TaxonomyTest, ScoreThresholdFiltersDetections) {
    auto p = four_gt_case();
    ErrorReport r = error_taxonomy(p.dets, p.gts, {0.75, 0.5});
    EXPECT_EQ(r.counts.detections, 2u);
    EXPECT_EQ(r.fn_rate, 0.5);
    EXPECT_EQ(r.fp_rate, 0.0);
}

TEST(TaxonomyTest, ThresholdsOutsideUnitIntervalRejected) {
    EXPECT_THROW(error_taxonomy({}, {}, {0.0, 0.5}), ContractError);
    EXPECT_THROW(error_taxonomy({}, {}, {0.5, 1.5}), ContractError);
    EXPECT_NO_THROW(error_taxonomy({}, {}, {1.0, 1.0}));
}

TEST(TaxonomyTest, MatchesBruteForceEnumeration) {
    std::mt19937_64 rng(65);
    for (int i = 0; i < 5000; ++i) {
        auto p = oracle::random_problem(rng, 5, 2, 2, i % 2 == 0);
        const double st = i % 4 == 0 ? 0.3 : 0.5;
        ErrorReport r = error_taxonomy(p.dets, p.gts, {st, 0.5});
        auto o = oracle::taxonomy(p.dets, p.gts, st, 0.5);
        ASSERT_EQ(r.counts.correct, o.correct) << i;
        ASSERT_EQ(r.counts.confusion, o.confusion) << i;
        ASSERT_EQ(r.counts.false_negative, o.fn) << i;
        ASSERT_EQ(r.counts.false_positive, o.fp) << i;
        if (!p.gts.empty()) {
            EXPECT_EQ(r.fn_rate + r.confusion_rate + r.correct_rate, 1.0);
        }
        for (double v : {r.fn_rate, r.fp_rate, r.confusion_rate}) {
            EXPECT_GE(v, 0.0);
            EXPECT_LE(v, 1.0);
        }
    }
}

TEST(TaxonomyTest, InvariantToDetectionOrder) {
    std::mt19937_64 rng(66);
    for (int i = 0; i < 500; ++i) {
        auto p = oracle::random_problem(rng, 8);
        const auto ref = error_taxonomy(p.dets, p.gts).counts;
        std::shuffle(p.dets.begin(), p.dets.end(), rng);
        const auto c = error_taxonomy(p.dets, p.gts).counts;
        EXPECT_EQ(c.correct, ref.correct);
        EXPECT_EQ(c.confusion, ref.confusion);
        EXPECT_EQ(c.false_positive, ref.false_positive);
    }
}

TEST(TaxonomyTest, AddingDetectionNeverRaisesFalseNegatives) {
    std::mt19937_64 rng(67);
    for (int i = 0; i < 3000; ++i) {
        auto p = oracle::random_problem(rng, 8, 2, 2, i % 2 == 0);
        const double before = error_taxonomy(p.dets, p.gts).fn_rate;
        auto extra = oracle::random_problem(rng, 4, 2, 2, i % 2 == 0);
        for (const auto& d : extra.dets) {
            auto dets = p.dets;
            dets.insert(dets.begin() + static_cast<long>(rng() % (dets.size() + 1)), d);
            EXPECT_LE(error_taxonomy(dets, p.gts).fn_rate, before) << i;
        }
        if (!p.dets.empty()) {
            auto fewer = p.dets;
            fewer.erase(fewer.begin() + static_cast<long>(rng() % fewer.size()));
            EXPECT_GE(error_taxonomy(fewer, p.gts).fn_rate, before) << i;
        }
    }
}

TEST(DomainSweepTest, SingleDomainEqualsTaxonomy) {
    auto p = four_gt_case();
    auto reports = domain_sweep({{"daytime-clear", p.dets, p.gts}});
    ASSERT_EQ(reports.size(), 1u);
    ErrorReport r = error_taxonomy(p.dets, p.gts);
    EXPECT_EQ(reports[0].domain, "daytime-clear");
    EXPECT_EQ(reports[0].fn_rate, r.fn_rate);
    EXPECT_EQ(reports[0].fp_rate, r.fp_rate);
    EXPECT_EQ(reports[0].confusion_rate, r.confusion_rate);
    EXPECT_EQ(reports[0].map50, r.map50);
}

TEST(DomainSweepTest, DuplicateTagsRejected) {
    EXPECT_THROW(domain_sweep({{"a", {}, {}}, {"a", {}, {}}}), ContractError);
    EXPECT_THROW(domain_sweep({}), ContractError);
}

TEST(DomainSweepTest, DefaultOrderFollowsShiftSeverity) {
    EXPECT_EQ(default_domain_order(),
              (std::vector<std::string>{"daytime-clear", "daytime-foggy", "dusk-rainy", "night-clear", "night-rainy"}));
}

TEST(DomainSweepTest, ProgressiveDeletionGivesMonotoneFalseNegatives) {
    std::vector<BoxAnnotation> gts;
    for (int i = 0; i < 10; ++i) gts.push_back({0, {20.0 * i, 0, 10, 10}, i % 3});
    std::vector<DomainInput> domains;
    for (std::size_t k = 0; k < default_domain_order().size(); ++k) {
        auto dets = perfect(gts);
        dets.resize(dets.size() - 2 * k);
        domains.push_back({default_domain_order()[k], dets, gts});
    }
    auto reports = domain_sweep(domains);
    for (std::size_t k = 1; k < reports.size(); ++k) {
        EXPECT_GT(reports[k].fn_rate, reports[k - 1].fn_rate);
        EXPECT_EQ(reports[k].domain, default_domain_order()[k]);
    }
    const auto table = sweep_table(reports);
    EXPECT_EQ(table.at("columns").at("fn_rate").size(), reports.size());
    EXPECT_NE(format_sweep_table(reports).find("night-rainy"), std::string::npos);
}
