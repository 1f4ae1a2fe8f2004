#pragma once

// Category prototypes: per-class means of teacher features pooled inside
// ground-truth boxes, built offline and stored as a tensor file plus a JSON
// sidecar.

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <map>
#include <numeric>
#include <string>
#include <tuple>
#include <vector>

#include <json.hpp>

#include "vfm4sdg/artifact_io.hpp"
#include "vfm4sdg/boxes.hpp"
#include "vfm4sdg/parallel.hpp"
#include "vfm4sdg/relation_distill.hpp"
#include "vfm4sdg/tensor.hpp"

namespace vfm4sdg {

namespace bank_detail {
inline constexpr const char* kModule = "prototype-bank";
}

inline constexpr int kBankFormatVersion = 1;

class PrototypeBank {
public:
    PrototypeBank() = default;

    PrototypeBank(Tensor prototypes, std::vector<CategoryId> category_ids, std::vector<std::size_t> instance_counts)
        : prototypes_(std::move(prototypes)),
          category_ids_(std::move(category_ids)),
          instance_counts_(std::move(instance_counts)) {
        using bank_detail::kModule;
        if (prototypes_.ndim() != 2) throw DimensionError(kModule, "prototypes must be K x C, got " + shape_str(prototypes_.shape()));
        const std::size_t k = prototypes_.dim(0);
        if (category_ids_.size() != k || instance_counts_.size() != k) {
            throw DimensionError(kModule, "bank has " + std::to_string(k) + " rows but " +
                                              std::to_string(category_ids_.size()) + " ids and " +
                                              std::to_string(instance_counts_.size()) + " counts");
        }
        for (auto c : instance_counts_) {
            if (c == 0) throw ContractError(kModule, "every stored category needs at least one instance");
        }
        if (!std::is_sorted(category_ids_.begin(), category_ids_.end()) ||
            std::adjacent_find(category_ids_.begin(), category_ids_.end()) != category_ids_.end()) {
            throw ContractError(kModule, "category ids must be strictly ascending");
        }
    }

    bool empty() const noexcept { return category_ids_.empty(); }
    std::size_t size() const noexcept { return category_ids_.size(); }
    std::size_t channels() const { return prototypes_.dim(1); }
    const Tensor& prototypes() const noexcept { return prototypes_; }
    const std::vector<CategoryId>& category_ids() const noexcept { return category_ids_; }
    const std::vector<std::size_t>& instance_counts() const noexcept { return instance_counts_; }

    std::vector<double> prototype(CategoryId id) const {
        auto it = std::lower_bound(category_ids_.begin(), category_ids_.end(), id);
        if (it == category_ids_.end() || *it != id) {
            throw LookupError(bank_detail::kModule, "bank has no category " + std::to_string(id));
        }
        const std::size_t row = static_cast<std::size_t>(it - category_ids_.begin());
        auto v = prototypes_.values().subspan(row * channels(), channels());
        return {v.begin(), v.end()};
    }

private:
    Tensor prototypes_;
    std::vector<CategoryId> category_ids_;
    std::vector<std::size_t> instance_counts_;
};

struct GridWindow {
    std::size_t row_begin = 0, row_end = 0;
    std::size_t col_begin = 0, col_end = 0;
};

// Maps a pixel box onto a grid_h x grid_w feature grid by proportional
// scaling, rounding outward so at least one cell is covered.
inline GridWindow box_to_grid(const Box& box, double image_h, double image_w, std::size_t grid_h, std::size_t grid_w) {
    using bank_detail::kModule;
    if (!(image_h > 0.0) || !(image_w > 0.0)) throw ContractError(kModule, "image size must be positive");
    const double x0 = std::max(box.x, 0.0), x1 = std::min(box.right(), image_w);
    const double y0 = std::max(box.y, 0.0), y1 = std::min(box.bottom(), image_h);
    if (!(x1 > x0) || !(y1 > y0)) throw ContractError(kModule, "box lies entirely outside the image");

    auto span = [](double lo, double hi, double extent, std::size_t cells) {
        const double scale = static_cast<double>(cells) / extent;
        auto begin = static_cast<std::size_t>(std::max(0.0, std::floor(lo * scale)));
        auto end = static_cast<std::size_t>(std::max(0.0, std::ceil(hi * scale)));
        begin = std::min(begin, cells - 1);
        end = std::clamp(end, begin + 1, cells);
        return std::pair{begin, end};
    };
    auto [r0, r1] = span(y0, y1, image_h, grid_h);
    auto [c0, c1] = span(x0, x1, image_w, grid_w);
    return {r0, r1, c0, c1};
}

// Mean teacher feature over the grid cells covered by a box.
inline std::vector<double> pool_box_feature(const TeacherFeature& teacher, const Box& box, double image_h,
                                            double image_w) {
    const Tensor& m = teacher.map;
    if (m.ndim() != 3) throw DimensionError(bank_detail::kModule, "teacher map must be C x H x W");
    const std::size_t c = m.dim(0), h = m.dim(1), w = m.dim(2);
    const GridWindow win = box_to_grid(box, image_h, image_w, h, w);
    std::vector<double> out(c, 0.0);
    for (std::size_t ch = 0; ch < c; ++ch) {
        double s = 0.0;
        for (std::size_t r = win.row_begin; r < win.row_end; ++r)
            for (std::size_t col = win.col_begin; col < win.col_end; ++col) s += m.values()[(ch * h + r) * w + col];
        out[ch] = s;
    }
    const double cells = static_cast<double>((win.row_end - win.row_begin) * (win.col_end - win.col_begin));
    for (auto& v : out) v /= cells;
    return out;
}

// Per-category mean of pooled instance vectors. Instances are reduced in a
// canonical order (category, image, box), so the result does not depend on
// annotation order.
inline PrototypeBank build_bank(const std::map<ImageId, TeacherFeature>& features,
                                const std::vector<BoxAnnotation>& annotations, const std::vector<ImageInfo>& images) {
    using bank_detail::kModule;
    if (annotations.empty()) throw ContractError(kModule, "build_bank: no annotations");
    std::map<ImageId, const ImageInfo*> image_index;
    for (const auto& im : images) image_index[im.id] = &im;

    std::size_t channels = 0;
    for (const auto& a : annotations) {
        auto f = features.find(a.image_id);
        if (f == features.end()) throw LookupError(kModule, "no teacher feature for image " + std::to_string(a.image_id));
        if (!image_index.count(a.image_id)) throw LookupError(kModule, "no image record for image " + std::to_string(a.image_id));
        const std::size_t c = f->second.map.dim(0);
        if (channels == 0) channels = c;
        if (c != channels) throw DimensionError(kModule, "teacher features disagree on channel count");
    }

    std::vector<std::size_t> order(annotations.size());
    std::iota(order.begin(), order.end(), std::size_t{0});
    auto key = [&](std::size_t i) {
        const auto& a = annotations[i];
        return std::tuple(a.category_id, a.image_id, a.bbox.x, a.bbox.y, a.bbox.w, a.bbox.h);
    };
    std::sort(order.begin(), order.end(), [&](std::size_t l, std::size_t r) { return key(l) < key(r); });

    std::vector<std::vector<double>> pooled(order.size());
    parallel_for(order.size(), [&](std::size_t i) {
        const auto& a = annotations[order[i]];
        const ImageInfo& im = *image_index.at(a.image_id);
        pooled[i] = pool_box_feature(features.at(a.image_id), a.bbox, im.height, im.width);
    });

    std::vector<CategoryId> ids;
    std::vector<std::size_t> counts;
    std::vector<double> rows;
    for (std::size_t i = 0; i < order.size();) {
        const CategoryId cat = annotations[order[i]].category_id;
        std::vector<double> acc(channels, 0.0);
        std::size_t n = 0;
        for (; i < order.size() && annotations[order[i]].category_id == cat; ++i, ++n)
            for (std::size_t ch = 0; ch < channels; ++ch) acc[ch] += pooled[i][ch];
        for (auto& v : acc) v /= static_cast<double>(n);
        ids.push_back(cat);
        counts.push_back(n);
        rows.insert(rows.end(), acc.begin(), acc.end());
    }
    const std::size_t k = ids.size();
    return PrototypeBank(Tensor(Shape{k, channels}, std::move(rows)), std::move(ids), std::move(counts));
}

inline std::filesystem::path bank_sidecar_path(const std::filesystem::path& bank_path) {
    return std::filesystem::path(bank_path.string() + ".json");
}

inline void save_bank(const std::filesystem::path& path, const PrototypeBank& bank) {
    if (bank.empty()) throw ContractError(bank_detail::kModule, "refusing to save a bank with no categories");
    nlohmann::json meta{{"format_version", kBankFormatVersion},
                        {"num_categories", bank.size()},
                        {"channels", bank.channels()},
                        {"category_ids", bank.category_ids()},
                        {"instance_counts", bank.instance_counts()}};
    write_tensor(path, bank.prototypes());
    write_text_file(bank_sidecar_path(path), meta.dump(2) + "\n");
}

inline PrototypeBank load_bank(const std::filesystem::path& path) {
    using bank_detail::kModule;
    Tensor protos = read_tensor(path);
    const nlohmann::json meta = io_detail::parse_json_text(read_text_file(bank_sidecar_path(path)));
    try {
        if (!meta.is_object()) throw FormatError(kModule, "bank metadata must be a JSON object");
        const int version = meta.at("format_version").get<int>();
        if (version != kBankFormatVersion) {
            throw VersionError(kModule, "bank format version " + std::to_string(version) + ", expected " +
                                            std::to_string(kBankFormatVersion));
        }
        auto ids = meta.at("category_ids").get<std::vector<CategoryId>>();
        auto counts = meta.at("instance_counts").get<std::vector<std::size_t>>();
        const auto channels = meta.at("channels").get<std::size_t>();
        if (protos.ndim() != 2 || protos.dim(0) != ids.size() || protos.dim(1) != channels) {
            throw FormatError(kModule, "bank tensor " + shape_str(protos.shape()) + " disagrees with its metadata");
        }
        return PrototypeBank(std::move(protos), std::move(ids), std::move(counts));
    } catch (const nlohmann::json::exception& e) {
        throw FormatError(kModule, std::string("bank metadata: ") + e.what());
    }
}

}  // namespace vfm4sdg
