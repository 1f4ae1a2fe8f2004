#pragma once

#include <cstdint>
#include <vector>

#include "vfm4sdg/detect_metrics.hpp"
#include "vfm4sdg/errors.hpp"
#include "vfm4sdg/query_enhance.hpp"
#include "vfm4sdg/relation_distill.hpp"

namespace vfm4sdg {

struct RunConfig {
    double lambda = kDefaultLambda;
    std::vector<int> levels = default_distill_levels();
    double beta = kDefaultBeta;
    std::size_t heads = kDefaultHeads;
    double score_threshold = kDefaultScoreThreshold;
    double iou_threshold = kMatchIou;
    std::uint64_t seed = 0;

    void validate() const {
        constexpr const char* kModule = "cli";
        if (!(lambda >= 0.0)) throw ContractError(kModule, "--lambda must be non-negative");
        if (levels.empty()) throw ContractError(kModule, "--levels must name at least one level");
        for (std::size_t i = 0; i < levels.size(); ++i) {
            if (levels[i] < 0 || levels[i] > 4) throw ContractError(kModule, "--levels entries must lie in 0..4");
            for (std::size_t j = 0; j < i; ++j)
                if (levels[j] == levels[i]) throw ContractError(kModule, "--levels lists a level twice");
        }
        if (!(beta > 0.0)) throw ContractError(kModule, "--beta must be positive");
        if (heads == 0) throw ContractError(kModule, "--heads must be positive");
        if (!(score_threshold > 0.0 && score_threshold <= 1.0)) throw ContractError(kModule, "--score-threshold must lie in (0, 1]");
        if (!(iou_threshold > 0.0 && iou_threshold <= 1.0)) throw ContractError(kModule, "--iou-threshold must lie in (0, 1]");
    }
};

}  // namespace vfm4sdg
