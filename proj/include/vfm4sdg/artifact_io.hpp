#pragma once

// On-disk formats shared with the feature exporter.
//
// Tensor file ("VFMT"), all integers little-endian:
//   offset 0   magic    "VFMT"
//   offset 4   version  u32 (= 1)
//   offset 8   dtype    u32 (1 = float32 LE)
//   offset 12  ndim     u32
//   offset 16  dims     ndim x u64
//   then       payload  product(dims) x float32, row-major
//
// Annotation and detection files are COCO-layout JSON.

#include <array>
#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <limits>
#include <map>
#include <set>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>

#include "vfm4sdg/boxes.hpp"
#include "vfm4sdg/tensor.hpp"

namespace vfm4sdg {

namespace io_detail {
inline constexpr const char* kModule = "artifact-io";
}

inline constexpr std::array<std::uint8_t, 4> kTensorMagic{'V', 'F', 'M', 'T'};
inline constexpr std::uint32_t kTensorFormatVersion = 1;
inline constexpr std::uint32_t kDtypeFloat32 = 1;
inline constexpr std::uint32_t kMaxTensorRank = 16;

static_assert(std::numeric_limits<float>::is_iec559, "float32 payloads assume IEEE-754");

// Raw float32 view of a tensor file.
struct TensorData {
    Shape shape;
    std::vector<float> values;
};

namespace io_detail {

inline void put_u32(std::vector<std::uint8_t>& out, std::uint32_t v) {
    for (int i = 0; i < 4; ++i) out.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
}

inline void put_u64(std::vector<std::uint8_t>& out, std::uint64_t v) {
    for (int i = 0; i < 8; ++i) out.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
}

inline std::uint32_t get_u32(std::span<const std::uint8_t> b, std::size_t off) {
    std::uint32_t v = 0;
    for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(b[off + i]) << (8 * i);
    return v;
}

inline std::uint64_t get_u64(std::span<const std::uint8_t> b, std::size_t off) {
    std::uint64_t v = 0;
    for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(b[off + i]) << (8 * i);
    return v;
}

inline std::vector<std::uint8_t> read_file(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError(kModule, "cannot open " + path.string());
    return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

inline void write_file(const std::filesystem::path& path, std::span<const std::uint8_t> bytes) {
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw IoError(kModule, "cannot open " + path.string() + " for writing");
    out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
    if (!out) throw IoError(kModule, "write failed for " + path.string());
}

}  // namespace io_detail

inline std::vector<std::uint8_t> encode_tensor(const Shape& shape, std::span<const float> values) {
    if (numel(shape) != values.size()) {
        throw DimensionError(io_detail::kModule, "encode_tensor: shape " + shape_str(shape) + " does not match " +
                                                     std::to_string(values.size()) + " values");
    }
    if (shape.size() > kMaxTensorRank) throw DimensionError(io_detail::kModule, "encode_tensor: rank too large");
    std::vector<std::uint8_t> out(kTensorMagic.begin(), kTensorMagic.end());
    out.reserve(16 + 8 * shape.size() + 4 * values.size());
    io_detail::put_u32(out, kTensorFormatVersion);
    io_detail::put_u32(out, kDtypeFloat32);
    io_detail::put_u32(out, static_cast<std::uint32_t>(shape.size()));
    for (auto d : shape) io_detail::put_u64(out, d);
    for (float f : values) io_detail::put_u32(out, std::bit_cast<std::uint32_t>(f));
    return out;
}

inline std::vector<std::uint8_t> encode_tensor(const Tensor& t) {
    std::vector<float> f(t.values().begin(), t.values().end());
    return encode_tensor(t.shape(), f);
}

// Validates the whole header and the payload length before allocating
// anything proportional to the declared dimensions.
inline TensorData decode_tensor_f32(std::span<const std::uint8_t> bytes) {
    using io_detail::kModule;
    constexpr std::size_t kFixedHeader = 16;
    if (bytes.size() < kFixedHeader) {
        throw FormatError(kModule, "tensor header truncated at byte offset " + std::to_string(bytes.size()) +
                                       " (need " + std::to_string(kFixedHeader) + ")");
    }
    if (!std::equal(kTensorMagic.begin(), kTensorMagic.end(), bytes.begin())) {
        throw FormatError(kModule, "bad magic at byte offset 0");
    }
    const std::uint32_t version = io_detail::get_u32(bytes, 4);
    if (version != kTensorFormatVersion) {
        throw VersionError(kModule, "tensor format version " + std::to_string(version) + " at byte offset 4, expected " +
                                        std::to_string(kTensorFormatVersion));
    }
    const std::uint32_t dtype = io_detail::get_u32(bytes, 8);
    if (dtype != kDtypeFloat32) {
        throw UnsupportedDtypeError(kModule, "dtype code " + std::to_string(dtype) + " at byte offset 8");
    }
    const std::uint32_t ndim = io_detail::get_u32(bytes, 12);
    if (ndim > kMaxTensorRank) {
        throw FormatError(kModule, "rank " + std::to_string(ndim) + " at byte offset 12 exceeds " +
                                       std::to_string(kMaxTensorRank));
    }
    const std::size_t header = kFixedHeader + 8 * static_cast<std::size_t>(ndim);
    if (bytes.size() < header) {
        throw FormatError(kModule, "dimension table truncated at byte offset " + std::to_string(bytes.size()) +
                                       " (need " + std::to_string(header) + ")");
    }
    constexpr std::uint64_t kMaxCount = std::numeric_limits<std::uint64_t>::max() / sizeof(float);
    Shape shape(ndim);
    std::uint64_t count = 1;
    bool overflow = false;
    for (std::uint32_t i = 0; i < ndim; ++i) {
        const std::uint64_t d = io_detail::get_u64(bytes, kFixedHeader + 8 * i);
        if (d == 0) throw FormatError(kModule, "zero dimension at byte offset " + std::to_string(kFixedHeader + 8 * i));
        if (count > kMaxCount / d) overflow = true;
        if (!overflow) count *= d;
        shape[i] = static_cast<std::size_t>(d);
    }
    const std::size_t actual = bytes.size() - header;
    if (overflow || count * sizeof(float) != actual) {
        throw TruncationError(kModule, "payload length mismatch: expected " +
                                           (overflow ? std::string("more than 2^64") : std::to_string(count * sizeof(float))) +
                                           " bytes, got " + std::to_string(actual));
    }
    TensorData out{std::move(shape), std::vector<float>(static_cast<std::size_t>(count))};
    for (std::size_t i = 0; i < out.values.size(); ++i) {
        out.values[i] = std::bit_cast<float>(io_detail::get_u32(bytes, header + 4 * i));
    }
    return out;
}

inline Tensor decode_tensor(std::span<const std::uint8_t> bytes) {
    TensorData raw = decode_tensor_f32(bytes);
    return Tensor(std::move(raw.shape), std::vector<double>(raw.values.begin(), raw.values.end()));
}

inline void write_tensor(const std::filesystem::path& path, const Tensor& t) {
    io_detail::write_file(path, encode_tensor(t));
}

inline Tensor read_tensor(const std::filesystem::path& path) { return decode_tensor(io_detail::read_file(path)); }

// ---------------------------------------------------------------------------
// JSON

struct ImageInfo {
    ImageId id = 0;
    double width = 0.0;
    double height = 0.0;
    std::string domain;
};

struct CategoryInfo {
    CategoryId id = 0;
    std::string name;
};

struct AnnotationSet {
    std::vector<ImageInfo> images;
    std::vector<BoxAnnotation> annotations;
    std::vector<CategoryInfo> categories;
    std::vector<std::string> warnings;

    const ImageInfo& image(ImageId id) const {
        for (const auto& im : images)
            if (im.id == id) return im;
        throw LookupError(io_detail::kModule, "no image with id " + std::to_string(id));
    }
};

struct DetectionList {
    std::vector<Detection> detections;
    std::vector<std::string> warnings;
};

namespace io_detail {

using nlohmann::json;

inline json parse_json_text(const std::string& text) {
    try {
        return json::parse(text);
    } catch (const json::parse_error& e) {
        throw FormatError(kModule, "malformed JSON at byte offset " + std::to_string(e.byte) + ": " + e.what());
    }
}

inline const json& require(const json& obj, const std::string& key, const std::string& path) {
    if (!obj.is_object()) throw SchemaError(kModule, path + ": expected an object");
    auto it = obj.find(key);
    if (it == obj.end()) throw SchemaError(kModule, "missing required field " + path + "/" + key);
    return *it;
}

inline double require_number(const json& obj, const std::string& key, const std::string& path) {
    const json& v = require(obj, key, path);
    if (!v.is_number()) throw SchemaError(kModule, path + "/" + key + ": expected a number");
    return v.get<double>();
}

inline std::int64_t require_int(const json& obj, const std::string& key, const std::string& path) {
    const json& v = require(obj, key, path);
    if (!v.is_number_integer()) throw SchemaError(kModule, path + "/" + key + ": expected an integer");
    return v.get<std::int64_t>();
}

inline const json& require_array(const json& obj, const std::string& key, const std::string& path) {
    const json& v = require(obj, key, path);
    if (!v.is_array()) throw SchemaError(kModule, path + "/" + key + ": expected an array");
    return v;
}

inline Box parse_bbox(const json& obj, const std::string& path) {
    const json& b = require_array(obj, "bbox", path);
    if (b.size() != 4) throw SchemaError(kModule, path + "/bbox: expected [x, y, w, h]");
    for (std::size_t i = 0; i < 4; ++i) {
        if (!b[i].is_number()) throw SchemaError(kModule, path + "/bbox/" + std::to_string(i) + ": expected a number");
    }
    Box box{b[0].get<double>(), b[1].get<double>(), b[2].get<double>(), b[3].get<double>()};
    if (!(box.w > 0.0) || !(box.h > 0.0)) {
        throw ValidationError(kModule, path + "/bbox: width and height must be positive");
    }
    return box;
}

inline void warn_unknown_keys(const json& root, std::initializer_list<const char*> known,
                              std::vector<std::string>& warnings) {
    for (const auto& [key, _] : root.items()) {
        if (std::none_of(known.begin(), known.end(), [&](const char* k) { return key == k; })) {
            warnings.push_back("ignoring unknown top-level key '" + key + "'");
        }
    }
}

}  // namespace io_detail

inline AnnotationSet parse_annotations_text(const std::string& text) {
    using namespace io_detail;
    const json root = parse_json_text(text);
    if (!root.is_object()) throw SchemaError(kModule, "annotation file root must be an object");
    AnnotationSet set;
    warn_unknown_keys(root, {"images", "annotations", "categories", "info", "licenses"}, set.warnings);

    std::set<ImageId> image_ids;
    const json& images = require_array(root, "images", "");
    for (std::size_t i = 0; i < images.size(); ++i) {
        const std::string p = "/images/" + std::to_string(i);
        ImageInfo im{require_int(images[i], "id", p), require_number(images[i], "width", p),
                     require_number(images[i], "height", p), ""};
        if (auto it = images[i].find("domain"); it != images[i].end()) {
            if (!it->is_string()) throw SchemaError(kModule, p + "/domain: expected a string");
            im.domain = it->get<std::string>();
        }
        if (!(im.width > 0.0) || !(im.height > 0.0)) throw ValidationError(kModule, p + ": image size must be positive");
        if (!image_ids.insert(im.id).second) throw ValidationError(kModule, p + ": duplicate image id " + std::to_string(im.id));
        set.images.push_back(std::move(im));
    }

    std::set<CategoryId> category_ids;
    std::set<std::string> names;
    const json& cats = require_array(root, "categories", "");
    for (std::size_t i = 0; i < cats.size(); ++i) {
        const std::string p = "/categories/" + std::to_string(i);
        const json& name = require(cats[i], "name", p);
        if (!name.is_string()) throw SchemaError(kModule, p + "/name: expected a string");
        CategoryInfo c{require_int(cats[i], "id", p), name.get<std::string>()};
        if (!category_ids.insert(c.id).second) throw ValidationError(kModule, p + ": duplicate category id");
        if (!names.insert(c.name).second) throw ValidationError(kModule, p + ": duplicate category name '" + c.name + "'");
        set.categories.push_back(std::move(c));
    }

    const json& anns = require_array(root, "annotations", "");
    for (std::size_t i = 0; i < anns.size(); ++i) {
        const std::string p = "/annotations/" + std::to_string(i);
        BoxAnnotation a{require_int(anns[i], "image_id", p), parse_bbox(anns[i], p), require_int(anns[i], "category_id", p)};
        if (!image_ids.count(a.image_id)) {
            throw ValidationError(kModule, p + ": unknown image_id " + std::to_string(a.image_id));
        }
        if (!category_ids.count(a.category_id)) {
            throw ValidationError(kModule, p + ": unknown category_id " + std::to_string(a.category_id));
        }
        set.annotations.push_back(a);
    }
    return set;
}

// Accepts either a COCO results array or {"detections": [...]}.
inline DetectionList parse_detections_text(const std::string& text) {
    using namespace io_detail;
    const json root = parse_json_text(text);
    DetectionList out;
    const json* list = &root;
    std::string base;
    if (root.is_object()) {
        warn_unknown_keys(root, {"detections"}, out.warnings);
        list = &require_array(root, "detections", "");
        base = "/detections";
    } else if (!root.is_array()) {
        throw SchemaError(kModule, "detection file root must be an array or an object");
    }
    for (std::size_t i = 0; i < list->size(); ++i) {
        const std::string p = base + "/" + std::to_string(i);
        const json& d = (*list)[i];
        Detection det{require_int(d, "image_id", p), parse_bbox(d, p), require_int(d, "category_id", p),
                      require_number(d, "score", p)};
        if (!(det.score >= 0.0 && det.score <= 1.0)) throw ValidationError(kModule, p + "/score: must lie in [0, 1]");
        out.detections.push_back(det);
    }
    return out;
}

inline std::string read_text_file(const std::filesystem::path& path) {
    auto bytes = io_detail::read_file(path);
    return {bytes.begin(), bytes.end()};
}

inline AnnotationSet parse_annotations(const std::filesystem::path& path) {
    return parse_annotations_text(read_text_file(path));
}

inline DetectionList parse_detections(const std::filesystem::path& path) {
    return parse_detections_text(read_text_file(path));
}

inline nlohmann::json to_json(const AnnotationSet& set) {
    using nlohmann::json;
    json images = json::array(), anns = json::array(), cats = json::array();
    for (const auto& im : set.images) {
        json j{{"id", im.id}, {"width", im.width}, {"height", im.height}};
        if (!im.domain.empty()) j["domain"] = im.domain;
        images.push_back(std::move(j));
    }
    std::int64_t next_id = 1;
    for (const auto& a : set.annotations) {
        anns.push_back({{"id", next_id++},
                        {"image_id", a.image_id},
                        {"category_id", a.category_id},
                        {"bbox", {a.bbox.x, a.bbox.y, a.bbox.w, a.bbox.h}}});
    }
    for (const auto& c : set.categories) cats.push_back({{"id", c.id}, {"name", c.name}});
    return json{{"images", images}, {"annotations", anns}, {"categories", cats}};
}

inline nlohmann::json to_json(const std::vector<Detection>& dets) {
    nlohmann::json out = nlohmann::json::array();
    for (const auto& d : dets) {
        out.push_back({{"image_id", d.image_id},
                       {"category_id", d.category_id},
                       {"bbox", {d.bbox.x, d.bbox.y, d.bbox.w, d.bbox.h}},
                       {"score", d.score}});
    }
    return out;
}

inline void write_text_file(const std::filesystem::path& path, const std::string& text) {
    io_detail::write_file(path, std::span(reinterpret_cast<const std::uint8_t*>(text.data()), text.size()));
}

}  // namespace vfm4sdg
