#pragma once

// Query enhancement ahead of the first decoder layer:
//   prototype stage  Q_s = LN(Q   + Attn(Q,   Wp P, Wp P))
//   teacher stage    Q_p = LN(Q_s + Attn(Q_s, Wt T, Wt T))
// where P are category prototypes and T the flattened teacher tokens.

#include <cmath>
#include <cstdint>
#include <filesystem>
#include <limits>
#include <string>
#include <utility>
#include <vector>

#include <json.hpp>

#include "vfm4sdg/artifact_io.hpp"
#include "vfm4sdg/prototype_bank.hpp"
#include "vfm4sdg/relation_distill.hpp"
#include "vfm4sdg/tensor.hpp"

namespace vfm4sdg {

namespace enhance_detail {
inline constexpr const char* kModule = "query-enhance";
}

inline constexpr std::size_t kDefaultHeads = 8;
inline constexpr int kParamsFormatVersion = 1;

// y = x W^T + b, W stored out x in.
struct Linear {
    Tensor weight;
    Tensor bias;

    std::size_t in_features() const { return weight.dim(1); }
    std::size_t out_features() const { return weight.dim(0); }

    Tensor operator()(const Tensor& x) const { return add_row_bias(matmul(x, transpose(weight)), bias); }
};

struct LayerNormParams {
    Tensor gain;
    Tensor bias;
    double eps = 1e-5;

    Tensor operator()(const Tensor& x) const { return layer_norm(x, gain, bias, eps); }
};

class AttentionBlock {
public:
    AttentionBlock() = default;

    AttentionBlock(Linear query, Linear key, Linear value, Linear output, std::size_t heads)
        : query_(std::move(query)), key_(std::move(key)), value_(std::move(value)), output_(std::move(output)),
          heads_(heads) {
        using enhance_detail::kModule;
        const std::size_t d = query_.out_features();
        if (heads_ == 0 || d % heads_ != 0) {
            throw ConfigurationError(kModule, "embedding width " + std::to_string(d) + " is not divisible by " +
                                                  std::to_string(heads_) + " heads");
        }
        for (const Linear* l : {&query_, &key_, &value_, &output_}) {
            if (l->in_features() != d || l->out_features() != d) {
                throw ConfigurationError(kModule, "attention projections must all be " + std::to_string(d) + " x " +
                                                      std::to_string(d));
            }
        }
    }

    std::size_t heads() const noexcept { return heads_; }
    std::size_t width() const { return query_.out_features(); }
    const Linear& query() const noexcept { return query_; }
    const Linear& key() const noexcept { return key_; }
    const Linear& value() const noexcept { return value_; }
    const Linear& output() const noexcept { return output_; }

private:
    Linear query_, key_, value_, output_;
    std::size_t heads_ = 0;
};

struct AttentionResult {
    Tensor output;                // n x d
    std::vector<Tensor> weights;  // per head, n x m, rows sum to 1
};

// Multi-head scaled dot-product cross-attention of q (n x d) over kv (m x d).
inline AttentionResult cross_attention(const Tensor& q, const Tensor& kv, const AttentionBlock& block) {
    using enhance_detail::kModule;
    const std::size_t d = block.width();
    if (q.ndim() != 2 || kv.ndim() != 2 || q.dim(1) != d || kv.dim(1) != d) {
        throw DimensionError(kModule, "cross_attention: queries " + shape_str(q.shape()) + " and keys " +
                                          shape_str(kv.shape()) + " must both have width " + std::to_string(d));
    }
    const std::size_t h = block.heads(), dh = d / h;
    Tensor qp = block.query()(q);
    Tensor kp = block.key()(kv);
    Tensor vp = block.value()(kv);
    const double inv_sqrt = 1.0 / std::sqrt(static_cast<double>(dh));
    AttentionResult result;
    std::vector<Tensor> heads;
    for (std::size_t i = 0; i < h; ++i) {
        Tensor qh = slice_cols(qp, i * dh, dh);
        Tensor kh = slice_cols(kp, i * dh, dh);
        Tensor vh = slice_cols(vp, i * dh, dh);
        Tensor attn = softmax_rows(scale(matmul(qh, transpose(kh)), inv_sqrt));
        heads.push_back(matmul(attn, vh));
        result.weights.push_back(std::move(attn));
    }
    result.output = block.output()(h == 1 ? heads.front() : concat_cols(heads));
    return result;
}

struct EnhancerBlock {
    AttentionBlock attention;
    LayerNormParams norm;
};

struct EnhancerParams {
    Linear proto_projection;  // C_t -> C_q
    Linear token_projection;  // C_t -> C_q
    EnhancerBlock prototype_block;
    EnhancerBlock teacher_block;

    std::size_t teacher_channels() const { return proto_projection.in_features(); }
    std::size_t query_channels() const { return proto_projection.out_features(); }
    std::size_t heads() const { return prototype_block.attention.heads(); }

    // Stable parameter names, used by the manifest and by gradient checks.
    std::vector<std::pair<std::string, Tensor>> named_tensors() const {
        std::vector<std::pair<std::string, Tensor>> out{
            {"proto_projection.weight", proto_projection.weight}, {"proto_projection.bias", proto_projection.bias},
            {"token_projection.weight", token_projection.weight}, {"token_projection.bias", token_projection.bias}};
        for (auto [prefix, block] : {std::pair{"siga", &prototype_block}, std::pair{"csga", &teacher_block}}) {
            const std::string p(prefix);
            const auto& a = block->attention;
            for (auto [name, lin] : {std::pair{"query", &a.query()}, std::pair{"key", &a.key()},
                                     std::pair{"value", &a.value()}, std::pair{"output", &a.output()}}) {
                out.emplace_back(p + ".attn." + name + ".weight", lin->weight);
                out.emplace_back(p + ".attn." + name + ".bias", lin->bias);
            }
            out.emplace_back(p + ".norm.gain", block->norm.gain);
            out.emplace_back(p + ".norm.bias", block->norm.bias);
        }
        return out;
    }

    std::vector<Tensor> tensors() const {
        std::vector<Tensor> out;
        for (auto& [_, t] : named_tensors()) out.push_back(t);
        return out;
    }
};

// splitmix64; platform-independent so seeded initialisation is reproducible.
class SeededUniform {
public:
    explicit SeededUniform(std::uint64_t seed) : state_(seed) {}

    double operator()(double lo, double hi) {
        std::uint64_t z = (state_ += 0x9E3779B97F4A7C15ull);
        z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ull;
        z = (z ^ (z >> 27)) * 0x94D049BB133111EBull;
        z ^= z >> 31;
        const double u = static_cast<double>(z >> 11) * 0x1.0p-53;
        return lo + (hi - lo) * u;
    }

private:
    std::uint64_t state_;
};

namespace enhance_detail {

inline Tensor uniform_leaf(Shape shape, double bound, SeededUniform& rng) {
    std::vector<double> v(numel(shape));
    for (auto& x : v) x = rng(-bound, bound);
    return Tensor(std::move(shape), std::move(v), true);
}

inline Linear init_linear(std::size_t in, std::size_t out, SeededUniform& rng) {
    const double bound = 1.0 / std::sqrt(static_cast<double>(in));
    Tensor w = uniform_leaf(Shape{out, in}, bound, rng);
    return Linear{w, uniform_leaf(Shape{out}, bound, rng)};
}

inline EnhancerBlock init_block(std::size_t width, std::size_t heads, SeededUniform& rng) {
    Linear q = init_linear(width, width, rng);
    Linear k = init_linear(width, width, rng);
    Linear v = init_linear(width, width, rng);
    Linear o = init_linear(width, width, rng);
    return {AttentionBlock(q, k, v, o, heads),
            LayerNormParams{Tensor::full(Shape{width}, 1.0, true), Tensor::zeros(Shape{width}, true)}};
}

}  // namespace enhance_detail

// Uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)) weights and biases; LN gain 1, bias 0.
inline EnhancerParams init_enhancer(std::size_t teacher_channels, std::size_t query_channels,
                                    std::size_t heads = kDefaultHeads, std::uint64_t seed = 0) {
    using enhance_detail::kModule;
    if (teacher_channels == 0 || query_channels == 0) throw ConfigurationError(kModule, "channel counts must be positive");
    if (heads == 0 || query_channels % heads != 0) {
        throw ConfigurationError(kModule, "query width " + std::to_string(query_channels) + " is not divisible by " +
                                              std::to_string(heads) + " heads");
    }
    SeededUniform rng(seed);
    EnhancerParams p;
    p.proto_projection = enhance_detail::init_linear(teacher_channels, query_channels, rng);
    p.token_projection = enhance_detail::init_linear(teacher_channels, query_channels, rng);
    p.prototype_block = enhance_detail::init_block(query_channels, heads, rng);
    p.teacher_block = enhance_detail::init_block(query_channels, heads, rng);
    return p;
}

enum class QueryStage { Initial, AfterSiga, AfterCsga };

inline const char* to_string(QueryStage s) {
    switch (s) {
        case QueryStage::Initial: return "initial";
        case QueryStage::AfterSiga: return "after_siga";
        case QueryStage::AfterCsga: return "after_csga";
    }
    return "?";
}

struct QuerySet {
    Tensor queries;  // N_q x C_q
    QueryStage stage = QueryStage::Initial;
};

// Residual cross-attention block followed by layer norm.
inline Tensor enhance_block(const Tensor& q, const Tensor& context, const EnhancerBlock& block) {
    return block.norm(add(q, cross_attention(q, context, block.attention).output));
}

// Prototype stage on raw tensors: prototypes is K x C_t.
inline Tensor siga_forward(const Tensor& q, const Tensor& prototypes, const EnhancerParams& p) {
    using enhance_detail::kModule;
    if (prototypes.ndim() != 2 || prototypes.dim(1) != p.proto_projection.in_features()) {
        throw DimensionError(kModule, "prototypes " + shape_str(prototypes.shape()) + " do not match projection input width " +
                                          std::to_string(p.proto_projection.in_features()));
    }
    if (q.ndim() != 2 || q.dim(1) != p.query_channels()) {
        throw DimensionError(kModule, "queries " + shape_str(q.shape()) + " do not have width " +
                                          std::to_string(p.query_channels()));
    }
    return enhance_block(q, p.proto_projection(prototypes), p.prototype_block);
}

// Flattens a C_t x H_t x W_t map into H_t*W_t tokens of width C_t.
inline Tensor teacher_tokens(const Tensor& map) {
    if (map.ndim() != 3) {
        throw DimensionError(enhance_detail::kModule, "teacher map must be C x H x W, got " + shape_str(map.shape()));
    }
    return transpose(reshape(map, Shape{map.dim(0), map.dim(1) * map.dim(2)}));
}

// Teacher stage on raw tensors: tokens is N_t x C_t.
inline Tensor csga_forward(const Tensor& q, const Tensor& tokens, const EnhancerParams& p) {
    using enhance_detail::kModule;
    if (tokens.ndim() != 2 || tokens.dim(1) != p.token_projection.in_features()) {
        throw DimensionError(kModule, "teacher tokens " + shape_str(tokens.shape()) +
                                          " do not match projection input width " +
                                          std::to_string(p.token_projection.in_features()));
    }
    if (q.ndim() != 2 || q.dim(1) != p.query_channels()) {
        throw DimensionError(kModule, "queries " + shape_str(q.shape()) + " do not have width " +
                                          std::to_string(p.query_channels()));
    }
    return enhance_block(q, p.token_projection(tokens), p.teacher_block);
}

inline QuerySet siga(const QuerySet& q, const PrototypeBank& bank, const EnhancerParams& p) {
    if (q.stage != QueryStage::Initial) {
        throw ContractError(enhance_detail::kModule, std::string("prototype stage expects initial queries, got ") + to_string(q.stage));
    }
    if (bank.empty()) throw ContractError(enhance_detail::kModule, "prototype bank is empty");
    return {siga_forward(q.queries, bank.prototypes(), p), QueryStage::AfterSiga};
}

inline QuerySet csga(const QuerySet& q, const TeacherFeature& teacher, const EnhancerParams& p) {
    if (q.stage != QueryStage::AfterSiga) {
        throw ContractError(enhance_detail::kModule, std::string("teacher stage expects after_siga queries, got ") + to_string(q.stage));
    }
    return {csga_forward(q.queries, teacher_tokens(teacher.map.detach()), p), QueryStage::AfterCsga};
}

// Prototype stage, then teacher stage. The order is fixed.
inline QuerySet scpqe(const QuerySet& q, const PrototypeBank& bank, const TeacherFeature& teacher,
                      const EnhancerParams& p) {
    return csga(siga(q, bank, p), teacher, p);
}

// ---------------------------------------------------------------------------
// Persistence: one tensor file per parameter plus manifest.json.

inline void save_params(const std::filesystem::path& dir, const EnhancerParams& p) {
    std::filesystem::create_directories(dir);
    nlohmann::json tensors = nlohmann::json::array();
    for (const auto& [name, t] : p.named_tensors()) {
        const std::string file = name + ".vfmt";
        write_tensor(dir / file, t);
        tensors.push_back({{"name", name}, {"file", file}, {"shape", t.shape()}});
    }
    nlohmann::json manifest{{"format_version", kParamsFormatVersion},
                            {"heads", p.heads()},
                            {"teacher_channels", p.teacher_channels()},
                            {"query_channels", p.query_channels()},
                            {"tensors", tensors}};
    write_text_file(dir / "manifest.json", manifest.dump(2) + "\n");
}

inline EnhancerParams load_params(const std::filesystem::path& dir) {
    using enhance_detail::kModule;
    const nlohmann::json manifest = io_detail::parse_json_text(read_text_file(dir / "manifest.json"));
    try {
        const int version = manifest.at("format_version").get<int>();
        if (version != kParamsFormatVersion) {
            throw VersionError(kModule, "parameter manifest version " + std::to_string(version));
        }
        const auto heads = manifest.at("heads").get<std::size_t>();
        EnhancerParams p = init_enhancer(manifest.at("teacher_channels").get<std::size_t>(),
                                         manifest.at("query_channels").get<std::size_t>(), heads, 0);
        std::map<std::string, Tensor> loaded;
        for (const auto& entry : manifest.at("tensors")) {
            const auto name = entry.at("name").get<std::string>();
            Tensor t = read_tensor(dir / entry.at("file").get<std::string>());
            loaded.emplace(name, Tensor(t.shape(), std::vector<double>(t.values().begin(), t.values().end()), true));
        }
        for (auto& [name, t] : p.named_tensors()) {
            auto it = loaded.find(name);
            if (it == loaded.end()) throw LookupError(kModule, "parameter manifest lacks '" + name + "'");
            if (it->second.shape() != t.shape()) {
                throw DimensionError(kModule, "parameter '" + name + "' has shape " + shape_str(it->second.shape()) +
                                                  ", expected " + shape_str(t.shape()));
            }
            auto dst = t.mutable_values();
            std::copy(it->second.values().begin(), it->second.values().end(), dst.begin());
        }
        return p;
    } catch (const nlohmann::json::exception& e) {
        throw FormatError(kModule, std::string("parameter manifest: ") + e.what());
    }
}

}  // namespace vfm4sdg
