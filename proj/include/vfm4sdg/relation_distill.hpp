#pragma once

// Relational distillation between student encoder features and a frozen
// teacher feature map: pyramid reconstruction from flattened encoder tokens,
// resolution alignment, masked cosine relation matrices, and the multi-level
// Smooth-L1 loss on relation residuals.

#include <algorithm>
#include <cmath>
#include <set>
#include <string>
#include <utility>
#include <vector>

#include "vfm4sdg/tensor.hpp"

namespace vfm4sdg {

namespace relation_detail {
inline constexpr const char* kModule = "relation-distill";
}

struct FeatureLevel {
    int index = 0;
    Tensor map;  // C x H x W
};

class FeaturePyramid {
public:
    FeaturePyramid() = default;

    explicit FeaturePyramid(std::vector<FeatureLevel> levels) : levels_(std::move(levels)) {
        using relation_detail::kModule;
        if (levels_.empty()) throw ContractError(kModule, "feature pyramid needs at least one level");
        for (std::size_t i = 0; i < levels_.size(); ++i) {
            const auto& m = levels_[i].map;
            if (m.ndim() != 3) {
                throw DimensionError(kModule, "level " + std::to_string(levels_[i].index) + " is not C x H x W: " +
                                                  shape_str(m.shape()));
            }
            if (m.dim(0) != levels_[0].map.dim(0)) {
                throw DimensionError(kModule, "pyramid levels disagree on channel count");
            }
            if (i > 0 && levels_[i].index <= levels_[i - 1].index) {
                throw ContractError(kModule, "pyramid level indices must be distinct and ascending");
            }
        }
    }

    const std::vector<FeatureLevel>& levels() const noexcept { return levels_; }
    std::size_t channels() const { return levels_.at(0).map.dim(0); }

    const Tensor& level(int index) const {
        for (const auto& l : levels_)
            if (l.index == index) return l.map;
        throw LookupError(relation_detail::kModule, "pyramid has no level " + std::to_string(index));
    }

    bool has_level(int index) const {
        return std::any_of(levels_.begin(), levels_.end(), [index](const auto& l) { return l.index == index; });
    }

private:
    std::vector<FeatureLevel> levels_;
};

struct TeacherFeature {
    Tensor map;  // C_t x H_t x W_t
    std::string source_tag;

    std::size_t channels() const { return map.dim(0); }
    std::size_t height() const { return map.dim(1); }
    std::size_t width() const { return map.dim(2); }
};

struct RelationMatrix {
    Tensor values;  // N x N, zero diagonal
    bool mask_diagonal = true;

    std::size_t tokens() const { return values.dim(0); }
};

struct LevelShape {
    std::size_t height = 0;
    std::size_t width = 0;
};

// Splits a (sum_l H_l W_l) x C token sequence into per-level C x H_l x W_l
// maps. Tokens of one level are contiguous and row-major in space.
inline FeaturePyramid reconstruct_pyramid(const Tensor& tokens, const std::vector<LevelShape>& level_shapes) {
    using relation_detail::kModule;
    if (level_shapes.empty()) throw ContractError(kModule, "reconstruct_pyramid: no level shapes given");
    if (tokens.ndim() != 2) throw DimensionError(kModule, "tokens must be a matrix, got " + shape_str(tokens.shape()));
    std::size_t expected = 0;
    for (const auto& s : level_shapes) {
        if (s.height == 0 || s.width == 0) throw DimensionError(kModule, "level shape with zero extent");
        expected += s.height * s.width;
    }
    if (expected != tokens.dim(0)) {
        throw DimensionError(kModule, "token count mismatch: level shapes expect " + std::to_string(expected) +
                                          " tokens, got " + std::to_string(tokens.dim(0)));
    }
    const std::size_t c = tokens.dim(1);
    std::vector<FeatureLevel> levels;
    std::size_t offset = 0;
    for (std::size_t l = 0; l < level_shapes.size(); ++l) {
        const std::size_t n = level_shapes[l].height * level_shapes[l].width;
        std::vector<std::size_t> idx(c * n);
        for (std::size_t ch = 0; ch < c; ++ch)
            for (std::size_t t = 0; t < n; ++t) idx[ch * n + t] = (offset + t) * c + ch;
        levels.push_back({static_cast<int>(l),
                          gather(tokens, std::move(idx), Shape{c, level_shapes[l].height, level_shapes[l].width})});
        offset += n;
    }
    return FeaturePyramid(std::move(levels));
}

// Inverse of reconstruct_pyramid.
inline Tensor flatten_pyramid(const FeaturePyramid& pyramid) {
    const std::size_t c = pyramid.channels();
    std::size_t total = 0;
    for (const auto& l : pyramid.levels()) total += l.map.dim(1) * l.map.dim(2);
    std::vector<double> v(total * c);
    std::size_t offset = 0;
    for (const auto& l : pyramid.levels()) {
        const std::size_t n = l.map.dim(1) * l.map.dim(2);
        for (std::size_t ch = 0; ch < c; ++ch)
            for (std::size_t t = 0; t < n; ++t) v[(offset + t) * c + ch] = l.map.values()[ch * n + t];
        offset += n;
    }
    return Tensor(Shape{total, c}, std::move(v));
}

enum class AlignMode { Identity, AdaptivePool, Bilinear };

inline AlignMode alignment_mode(std::size_t h, std::size_t w, std::size_t target_h, std::size_t target_w) {
    if (h == target_h && w == target_w) return AlignMode::Identity;
    if (h >= target_h && w >= target_w) return AlignMode::AdaptivePool;
    return AlignMode::Bilinear;
}

// 1-D adaptive average pooling weights (out x in): output i averages input
// [floor(i*in/out), ceil((i+1)*in/out)).
inline std::vector<double> adaptive_pool_weights(std::size_t in, std::size_t out) {
    std::vector<double> w(out * in, 0.0);
    for (std::size_t i = 0; i < out; ++i) {
        const std::size_t begin = (i * in) / out;
        const std::size_t end = ((i + 1) * in + out - 1) / out;
        const double inv = 1.0 / static_cast<double>(end - begin);
        for (std::size_t a = begin; a < end; ++a) w[i * in + a] = inv;
    }
    return w;
}

// 1-D linear interpolation weights (out x in), half-pixel centres
// (align_corners = false), source coordinates clamped at the low edge.
inline std::vector<double> bilinear_weights(std::size_t in, std::size_t out) {
    std::vector<double> w(out * in, 0.0);
    const double ratio = static_cast<double>(in) / static_cast<double>(out);
    for (std::size_t i = 0; i < out; ++i) {
        const double src = std::max(0.0, (static_cast<double>(i) + 0.5) * ratio - 0.5);
        const std::size_t i0 = std::min(static_cast<std::size_t>(src), in - 1);
        const std::size_t i1 = std::min(i0 + 1, in - 1);
        const double frac = src - static_cast<double>(i0);
        w[i * in + i0] += 1.0 - frac;
        w[i * in + i1] += frac;
    }
    return w;
}

// Brings a C x H x W map to the teacher grid: adaptive average pooling when
// the map is at least as large on both axes, bilinear otherwise.
inline Tensor align_resolution(const Tensor& x, std::size_t target_h, std::size_t target_w) {
    using relation_detail::kModule;
    if (x.ndim() != 3) throw DimensionError(kModule, "align_resolution: expected C x H x W, got " + shape_str(x.shape()));
    if (target_h == 0 || target_w == 0) throw DimensionError(kModule, "align_resolution: empty target grid");
    const std::size_t h = x.dim(1), w = x.dim(2);
    switch (alignment_mode(h, w, target_h, target_w)) {
        case AlignMode::Identity:
            return x;
        case AlignMode::AdaptivePool:
            return separable_resample(x, adaptive_pool_weights(h, target_h), target_h,
                                      adaptive_pool_weights(w, target_w), target_w);
        case AlignMode::Bilinear:
            break;
    }
    return separable_resample(x, bilinear_weights(h, target_h), target_h, bilinear_weights(w, target_w), target_w);
}

// Masked cosine-similarity matrix between the H*W spatial tokens of a map.
inline RelationMatrix relation_matrix(const Tensor& x) {
    using relation_detail::kModule;
    if (x.ndim() != 3) throw DimensionError(kModule, "relation_matrix: expected C x H x W, got " + shape_str(x.shape()));
    const std::size_t c = x.dim(0), n = x.dim(1) * x.dim(2);
    Tensor z = l2_normalize_columns(reshape(x, Shape{c, n}));
    Tensor s = matmul(transpose(z), z);
    // Rounding can push |cos| a hair past 1; clamp the value, pass the slope.
    s = map_elementwise(
        s, [](double v) { return std::clamp(v, -1.0, 1.0); }, [](double) { return 1.0; });
    std::vector<double> mask(n * n, 1.0);
    for (std::size_t i = 0; i < n; ++i) mask[i * n + i] = 0.0;
    return RelationMatrix{mul(s, Tensor(Shape{n, n}, std::move(mask))), true};
}

// Smooth-L1 between two relation matrices over off-diagonal entries only.
inline Tensor relation_residual_loss(const RelationMatrix& student, const RelationMatrix& teacher, double beta) {
    using relation_detail::kModule;
    if (student.values.shape() != teacher.values.shape()) {
        throw DimensionError(kModule, "relation matrices differ in size: " + shape_str(student.values.shape()) +
                                          " vs " + shape_str(teacher.values.shape()));
    }
    const std::size_t n = student.tokens();
    if (n < 2) return Tensor::scalar(0.0);
    std::vector<std::size_t> off;
    off.reserve(n * (n - 1));
    for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = 0; j < n; ++j)
            if (i != j) off.push_back(i * n + j);
    const Shape shape{off.size()};
    Tensor s = gather(student.values, off, shape);
    Tensor t = gather(teacher.values, std::move(off), shape);
    return smooth_l1(s, t, beta);
}

inline const std::vector<int>& default_distill_levels() {
    static const std::vector<int> levels{0, 1, 2, 3, 4};
    return levels;
}

inline constexpr double kDefaultLambda = 1.0;
inline constexpr double kDefaultBeta = 1.0;

struct CsrpdResult {
    Tensor total;
    std::vector<std::pair<int, double>> per_level;  // ascending level index
};

inline CsrpdResult csrpd_loss(const FeaturePyramid& student, const TeacherFeature& teacher,
                              const std::vector<int>& levels, double beta = kDefaultBeta) {
    using relation_detail::kModule;
    if (levels.empty()) throw ContractError(kModule, "csrpd_loss: empty level set");
    if (teacher.map.ndim() != 3) {
        throw DimensionError(kModule, "teacher map must be C x H x W, got " + shape_str(teacher.map.shape()));
    }
    const std::set<int> selected(levels.begin(), levels.end());
    for (int l : selected) {
        if (!student.has_level(l)) throw LookupError(kModule, "csrpd_loss: student pyramid has no level " + std::to_string(l));
    }
    // The teacher is frozen: computed once, off the tape.
    const RelationMatrix target = relation_matrix(teacher.map.detach());
    CsrpdResult result;
    Tensor total = Tensor::scalar(0.0);
    for (int l : selected) {
        Tensor aligned = align_resolution(student.level(l), teacher.height(), teacher.width());
        Tensor term = relation_residual_loss(relation_matrix(aligned), target, beta);
        result.per_level.emplace_back(l, term.item());
        total = add(total, term);
    }
    result.total = total;
    return result;
}

// Per-image losses averaged over the batch; per-level values are averaged too.
inline CsrpdResult csrpd_loss_batch(const std::vector<FeaturePyramid>& students,
                                    const std::vector<TeacherFeature>& teachers, const std::vector<int>& levels,
                                    double beta = kDefaultBeta) {
    using relation_detail::kModule;
    if (students.empty() || students.size() != teachers.size()) {
        throw DimensionError(kModule, "batch needs one teacher per student pyramid (" + std::to_string(students.size()) +
                                          " vs " + std::to_string(teachers.size()) + ")");
    }
    CsrpdResult result;
    Tensor total = Tensor::scalar(0.0);
    const double inv_b = 1.0 / static_cast<double>(students.size());
    for (std::size_t b = 0; b < students.size(); ++b) {
        CsrpdResult one = csrpd_loss(students[b], teachers[b], levels, beta);
        total = add(total, one.total);
        if (result.per_level.empty()) {
            result.per_level = one.per_level;
            for (auto& [l, v] : result.per_level) v = 0.0;
        }
        for (std::size_t i = 0; i < one.per_level.size(); ++i) result.per_level[i].second += one.per_level[i].second * inv_b;
    }
    result.total = scale(total, inv_b);
    return result;
}

// det + lambda * csrpd.
inline Tensor combine_losses(const Tensor& det_loss, const Tensor& csrpd, double lambda = kDefaultLambda) {
    if (!(lambda >= 0.0)) throw ContractError(relation_detail::kModule, "combine_losses: lambda must be non-negative");
    return add(det_loss, scale(csrpd, lambda));
}

inline double combine_losses(double det_loss, double csrpd, double lambda = kDefaultLambda) {
    return combine_losses(Tensor::scalar(det_loss), Tensor::scalar(csrpd), lambda).item();
}

}  // namespace vfm4sdg
