#pragma once

// Detection quality at IoU 0.5 (per-class AP, mAP@50) and the error
// taxonomy that splits ground-truth misses, stray detections and class
// confusions.

#include <algorithm>
#include <cstdio>
#include <map>
#include <numeric>
#include <set>
#include <string>
#include <vector>

#include <json.hpp>

#include "vfm4sdg/boxes.hpp"
#include "vfm4sdg/errors.hpp"

namespace vfm4sdg {

namespace metrics_detail {
inline constexpr const char* kModule = "detect-metrics";

// Detection indices by descending score; equal scores keep input order.
inline std::vector<std::size_t> score_order(const std::vector<Detection>& dets, const std::vector<std::size_t>& subset) {
    std::vector<std::size_t> order = subset;
    std::stable_sort(order.begin(), order.end(),
                     [&](std::size_t a, std::size_t b) { return dets[a].score > dets[b].score; });
    return order;
}

inline void check_threshold(double t, const char* name) {
    if (!(t > 0.0 && t <= 1.0)) throw ContractError(kModule, std::string(name) + " must lie in (0, 1]");
}

}  // namespace metrics_detail

inline constexpr double kMatchIou = 0.5;
inline constexpr double kDefaultScoreThreshold = 0.5;

// Best unmatched candidate by IoU (lowest index on ties), or -1.
inline long best_unmatched(const Box& box, const std::vector<BoxAnnotation>& gts, const std::vector<std::size_t>& candidates,
                           const std::vector<bool>& taken, double iou_threshold) {
    long best = -1;
    double best_iou = -1.0;
    for (std::size_t g : candidates) {
        if (taken[g]) continue;
        const double v = iou(box, gts[g].bbox);
        if (v >= iou_threshold && v > best_iou) {
            best = static_cast<long>(g);
            best_iou = v;
        }
    }
    return best;
}

struct ClassAp {
    CategoryId category = 0;
    double ap = 0.0;
    std::size_t gt_count = 0;
    std::size_t det_count = 0;
};

struct MapReport {
    std::vector<ClassAp> per_class;  // ascending category, classes with ground truth only
    double map50 = 0.0;
};

// All-point interpolated AP for one class. Detections are greedily matched in
// descending score order to the best unmatched same-class, same-image box.
inline double average_precision(const std::vector<Detection>& dets, const std::vector<BoxAnnotation>& gts,
                                CategoryId category, double iou_threshold = kMatchIou) {
    metrics_detail::check_threshold(iou_threshold, "iou_threshold");
    std::map<ImageId, std::vector<std::size_t>> gt_by_image;
    std::size_t npos = 0;
    for (std::size_t g = 0; g < gts.size(); ++g) {
        if (gts[g].category_id != category) continue;
        gt_by_image[gts[g].image_id].push_back(g);
        ++npos;
    }
    if (npos == 0) return 0.0;
    std::vector<std::size_t> subset;
    for (std::size_t d = 0; d < dets.size(); ++d)
        if (dets[d].category_id == category) subset.push_back(d);
    const auto order = metrics_detail::score_order(dets, subset);

    std::vector<bool> taken(gts.size(), false);
    std::vector<double> recall, precision;
    std::size_t tp = 0, seen = 0;
    for (std::size_t d : order) {
        ++seen;
        auto it = gt_by_image.find(dets[d].image_id);
        if (it != gt_by_image.end()) {
            const long g = best_unmatched(dets[d].bbox, gts, it->second, taken, iou_threshold);
            if (g >= 0) {
                taken[static_cast<std::size_t>(g)] = true;
                ++tp;
            }
        }
        recall.push_back(static_cast<double>(tp) / static_cast<double>(npos));
        precision.push_back(static_cast<double>(tp) / static_cast<double>(seen));
    }
    // Precision envelope, then area under the step curve.
    for (std::size_t i = precision.size(); i-- > 1;) precision[i - 1] = std::max(precision[i - 1], precision[i]);
    double ap = 0.0, prev_recall = 0.0;
    for (std::size_t i = 0; i < recall.size(); ++i) {
        ap += (recall[i] - prev_recall) * precision[i];
        prev_recall = recall[i];
    }
    return ap;
}

inline MapReport evaluate_map(const std::vector<Detection>& dets, const std::vector<BoxAnnotation>& gts,
                              double iou_threshold = kMatchIou) {
    std::map<CategoryId, ClassAp> classes;
    for (const auto& g : gts) {
        auto& c = classes[g.category_id];
        c.category = g.category_id;
        ++c.gt_count;
    }
    for (const auto& d : dets) {
        if (auto it = classes.find(d.category_id); it != classes.end()) ++it->second.det_count;
    }
    MapReport report;
    for (auto& [cat, c] : classes) {
        c.ap = average_precision(dets, gts, cat, iou_threshold);
        report.per_class.push_back(c);
    }
    if (!report.per_class.empty()) {
        double s = 0.0;
        for (const auto& c : report.per_class) s += c.ap;
        report.map50 = s / static_cast<double>(report.per_class.size());
    }
    return report;
}

inline double ap50(const std::vector<Detection>& dets, const std::vector<BoxAnnotation>& gts) {
    return evaluate_map(dets, gts, kMatchIou).map50;
}

// ---------------------------------------------------------------------------
// Error taxonomy

struct ErrorCounts {
    std::size_t ground_truth = 0;
    std::size_t detections = 0;  // after score filtering
    std::size_t correct = 0;
    std::size_t confusion = 0;
    std::size_t false_negative = 0;
    std::size_t false_positive = 0;
};

struct ErrorReport {
    std::string domain;
    double fn_rate = 0.0;
    double fp_rate = 0.0;
    double confusion_rate = 0.0;
    double correct_rate = 0.0;
    ErrorCounts counts;
    std::vector<ClassAp> per_class_ap;
    double map50 = 0.0;
};

struct TaxonomyOptions {
    double score_threshold = kDefaultScoreThreshold;
    double iou_threshold = kMatchIou;
};

// Greedy class-agnostic matching of score-filtered detections, then a class
// check per match. Unmatched ground truth is a false negative, a match with
// the wrong class is a confusion, an unmatched detection is a false positive.
inline ErrorCounts count_errors(const std::vector<Detection>& dets, const std::vector<BoxAnnotation>& gts,
                                const TaxonomyOptions& opt = {}) {
    metrics_detail::check_threshold(opt.score_threshold, "score_threshold");
    metrics_detail::check_threshold(opt.iou_threshold, "iou_threshold");
    std::map<ImageId, std::vector<std::size_t>> gt_by_image;
    for (std::size_t g = 0; g < gts.size(); ++g) gt_by_image[gts[g].image_id].push_back(g);

    std::vector<std::size_t> kept;
    for (std::size_t d = 0; d < dets.size(); ++d)
        if (dets[d].score >= opt.score_threshold) kept.push_back(d);

    ErrorCounts c;
    c.ground_truth = gts.size();
    c.detections = kept.size();
    std::vector<bool> taken(gts.size(), false);
    for (std::size_t d : metrics_detail::score_order(dets, kept)) {
        auto it = gt_by_image.find(dets[d].image_id);
        const long g = it == gt_by_image.end() ? -1 : best_unmatched(dets[d].bbox, gts, it->second, taken, opt.iou_threshold);
        if (g < 0) {
            ++c.false_positive;
            continue;
        }
        taken[static_cast<std::size_t>(g)] = true;
        if (gts[static_cast<std::size_t>(g)].category_id == dets[d].category_id) {
            ++c.correct;
        } else {
            ++c.confusion;
        }
    }
    c.false_negative = c.ground_truth - c.correct - c.confusion;
    return c;
}

inline ErrorReport error_taxonomy(const std::vector<Detection>& dets, const std::vector<BoxAnnotation>& gts,
                                  const TaxonomyOptions& opt = {}, std::string domain = {}) {
    ErrorReport r;
    r.domain = std::move(domain);
    r.counts = count_errors(dets, gts, opt);
    const auto& c = r.counts;
    if (c.ground_truth > 0) {
        const double n = static_cast<double>(c.ground_truth);
        r.fn_rate = static_cast<double>(c.false_negative) / n;
        r.confusion_rate = static_cast<double>(c.confusion) / n;
        r.correct_rate = static_cast<double>(c.correct) / n;
    }
    if (c.detections > 0) r.fp_rate = static_cast<double>(c.false_positive) / static_cast<double>(c.detections);
    const MapReport m = evaluate_map(dets, gts, opt.iou_threshold);
    r.per_class_ap = m.per_class;
    r.map50 = m.map50;
    return r;
}

struct DomainInput {
    std::string tag;
    std::vector<Detection> detections;
    std::vector<BoxAnnotation> ground_truth;
};

// Domain tags along increasing shift severity.
inline const std::vector<std::string>& default_domain_order() {
    static const std::vector<std::string> order{"daytime-clear", "daytime-foggy", "dusk-rainy", "night-clear",
                                                "night-rainy"};
    return order;
}

// One report per domain, in the given order.
inline std::vector<ErrorReport> domain_sweep(const std::vector<DomainInput>& domains, const TaxonomyOptions& opt = {}) {
    using metrics_detail::kModule;
    if (domains.empty()) throw ContractError(kModule, "domain_sweep: no domains");
    std::set<std::string> tags;
    for (const auto& d : domains) {
        if (!tags.insert(d.tag).second) throw ContractError(kModule, "domain_sweep: duplicate domain tag '" + d.tag + "'");
    }
    std::vector<ErrorReport> out;
    for (const auto& d : domains) out.push_back(error_taxonomy(d.detections, d.ground_truth, opt, d.tag));
    return out;
}

// ---------------------------------------------------------------------------
// Reporting

inline nlohmann::json to_json(const ClassAp& c) {
    return {{"category_id", c.category}, {"ap50", c.ap}, {"gt_count", c.gt_count}, {"det_count", c.det_count}};
}

inline nlohmann::json to_json(const MapReport& m) {
    nlohmann::json per = nlohmann::json::array();
    for (const auto& c : m.per_class) per.push_back(to_json(c));
    return {{"map50", m.map50}, {"per_class", per}};
}

inline nlohmann::json to_json(const ErrorReport& r) {
    nlohmann::json per = nlohmann::json::array();
    for (const auto& c : r.per_class_ap) per.push_back(to_json(c));
    const auto& c = r.counts;
    return {{"domain", r.domain},
            {"fn_rate", r.fn_rate},
            {"fp_rate", r.fp_rate},
            {"confusion_rate", r.confusion_rate},
            {"correct_rate", r.correct_rate},
            {"counts",
             {{"ground_truth", c.ground_truth},
              {"detections", c.detections},
              {"correct", c.correct},
              {"confusion", c.confusion},
              {"false_negative", c.false_negative},
              {"false_positive", c.false_positive}}},
            {"map50", r.map50},
            {"per_class", per}};
}

// Column-oriented table, one entry per domain in sweep order, for plotting
// error rates against shift severity.
inline nlohmann::json sweep_table(const std::vector<ErrorReport>& reports) {
    nlohmann::json domains = nlohmann::json::array(), fn = nlohmann::json::array(), fp = nlohmann::json::array(),
                   conf = nlohmann::json::array(), map = nlohmann::json::array(), rows = nlohmann::json::array();
    for (const auto& r : reports) {
        domains.push_back(r.domain);
        fn.push_back(r.fn_rate);
        fp.push_back(r.fp_rate);
        conf.push_back(r.confusion_rate);
        map.push_back(r.map50);
        rows.push_back(to_json(r));
    }
    return {{"columns", {{"domain", domains}, {"fn_rate", fn}, {"fp_rate", fp}, {"confusion_rate", conf}, {"map50", map}}},
            {"reports", rows}};
}

inline std::string format_sweep_table(const std::vector<ErrorReport>& reports) {
    std::size_t width = 6;
    for (const auto& r : reports) width = std::max(width, r.domain.size());
    std::string out;
    char buf[256];
    std::snprintf(buf, sizeof buf, "%-*s  %8s  %8s  %9s  %7s  %6s  %6s\n", static_cast<int>(width), "domain", "fn_rate",
                  "fp_rate", "confusion", "map50", "gt", "dets");
    out += buf;
    for (const auto& r : reports) {
        std::snprintf(buf, sizeof buf, "%-*s  %8.4f  %8.4f  %9.4f  %7.4f  %6zu  %6zu\n", static_cast<int>(width),
                      r.domain.c_str(), r.fn_rate, r.fp_rate, r.confusion_rate, r.map50, r.counts.ground_truth,
                      r.counts.detections);
        out += buf;
    }
    return out;
}

inline std::string format_map_table(const MapReport& m) {
    std::string out;
    char buf[128];
    std::snprintf(buf, sizeof buf, "%-10s  %8s  %6s  %6s\n", "category", "ap50", "gt", "dets");
    out += buf;
    for (const auto& c : m.per_class) {
        std::snprintf(buf, sizeof buf, "%-10lld  %8.4f  %6zu  %6zu\n", static_cast<long long>(c.category), c.ap,
                      c.gt_count, c.det_count);
        out += buf;
    }
    std::snprintf(buf, sizeof buf, "%-10s  %8.4f\n", "mAP@50", m.map50);
    out += buf;
    return out;
}

}  // namespace vfm4sdg
