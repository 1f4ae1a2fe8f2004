#pragma once

// Finite-difference verification of every differentiable op and block, on
// seeded random instances. Shared by the CLI gradcheck command and the
// acceptance tests.

#include <chrono>
#include <cstdint>
#include <string>
#include <vector>

#include "vfm4sdg/gradcheck.hpp"
#include "vfm4sdg/query_enhance.hpp"
#include "vfm4sdg/relation_distill.hpp"
#include "vfm4sdg/tensor.hpp"

namespace vfm4sdg {

struct GradCheckCase {
    std::string name;
    std::uint64_t seed = 0;
    GradCheckReport report;
};

struct GradCheckSuiteResult {
    std::vector<GradCheckCase> cases;
    double seconds = 0.0;
    bool pass = true;
};

inline Tensor random_tensor(Shape shape, SeededUniform& rng, bool requires_grad = false, double lo = -1.0,
                            double hi = 1.0) {
    std::vector<double> v(numel(shape));
    for (auto& x : v) x = rng(lo, hi);
    return Tensor(std::move(shape), std::move(v), requires_grad);
}

namespace suite_detail {

// Weighted sum, so that ops whose plain sum is constant still get a
// non-trivial upstream gradient.
inline Tensor probe(const Tensor& y, const Tensor& weights) { return sum(mul(y, weights)); }

}  // namespace suite_detail

inline GradCheckSuiteResult run_gradcheck_suite(std::uint64_t seed, std::size_t instances = 20, double step = 1e-4,
                                                double tol = 1e-4) {
    using suite_detail::probe;
    const auto t0 = std::chrono::steady_clock::now();
    GradCheckSuiteResult result;
    auto record = [&](std::string name, std::uint64_t s, GradCheckReport r) {
        result.pass = result.pass && r.pass;
        result.cases.push_back({std::move(name), s, r});
    };

    for (std::size_t i = 0; i < instances; ++i) {
        const std::uint64_t s = seed * 1000003ull + i;
        SeededUniform rng(s);

        {
            Tensor x = random_tensor({3, 4}, rng, true);
            Tensor t = random_tensor({3, 4}, rng, true);
            record("smooth_l1", s, grad_check([](const std::vector<Tensor>& in) { return smooth_l1(in[0], in[1], 1.0); },
                                              {x, t}, step, tol));
        }
        {
            Tensor x = random_tensor({3, 5}, rng, true);
            Tensor g = random_tensor({5}, rng, true, 0.5, 1.5);
            Tensor b = random_tensor({5}, rng, true);
            Tensor w = random_tensor({3, 5}, rng);
            record("layer_norm", s,
                   grad_check([w](const std::vector<Tensor>& in) { return probe(layer_norm(in[0], in[1], in[2]), w); },
                              {x, g, b}, step, tol));
        }
        {
            Tensor x = random_tensor({4, 3}, rng, true, -2.0, 2.0);
            Tensor w = random_tensor({4, 3}, rng);
            record("softmax_rows", s,
                   grad_check([w](const std::vector<Tensor>& in) { return probe(softmax_rows(in[0]), w); }, {x}, step, tol));
        }
        {
            Tensor x = random_tensor({4, 5}, rng, true);
            Tensor w = random_tensor({4, 5}, rng);
            record("l2_normalize_columns", s,
                   grad_check([w](const std::vector<Tensor>& in) { return probe(l2_normalize_columns(in[0]), w); }, {x},
                              step, tol));
        }
        {
            Tensor a = random_tensor({3, 4}, rng, true);
            Tensor b = random_tensor({4, 2}, rng, true);
            Tensor w = random_tensor({3, 2}, rng);
            record("matmul", s,
                   grad_check([w](const std::vector<Tensor>& in) { return probe(matmul(in[0], in[1]), w); }, {a, b}, step,
                              tol));
        }
        {
            Tensor x = random_tensor({2, 3, 3}, rng, true);
            Tensor w1 = random_tensor({2, 2, 2}, rng);
            Tensor w2 = random_tensor({2, 4, 5}, rng);
            record("align_resolution", s,
                   grad_check(
                       [w1, w2](const std::vector<Tensor>& in) {
                           return add(probe(align_resolution(in[0], 2, 2), w1), probe(align_resolution(in[0], 4, 5), w2));
                       },
                       {x}, step, tol));
        }
        {
            EnhancerParams p = init_enhancer(4, 4, 2, s);
            Tensor q = random_tensor({3, 4}, rng, true);
            Tensor kv = random_tensor({5, 4}, rng, true);
            Tensor w = random_tensor({3, 4}, rng);
            const AttentionBlock& block = p.prototype_block.attention;
            std::vector<Tensor> inputs{q, kv};
            for (const Linear* l : {&block.query(), &block.key(), &block.value(), &block.output()}) {
                inputs.push_back(l->weight);
                inputs.push_back(l->bias);
            }
            record("cross_attention", s,
                   grad_check([&block, w](const std::vector<Tensor>& in) { return probe(cross_attention(in[0], in[1], block).output, w); },
                              inputs, step, tol));
        }
        {
            // Student levels exercise pooling (3x3), identity (2x2) and
            // bilinear (1x3) alignment onto a 2x2 teacher.
            Tensor l0 = random_tensor({4, 3, 3}, rng, true);
            Tensor l1 = random_tensor({4, 2, 2}, rng, true);
            Tensor l2 = random_tensor({4, 1, 3}, rng, true);
            TeacherFeature teacher{random_tensor({6, 2, 2}, rng), "random"};
            record("csrpd_loss", s,
                   grad_check(
                       [teacher](const std::vector<Tensor>& in) {
                           FeaturePyramid pyr({{0, in[0]}, {1, in[1]}, {2, in[2]}});
                           return csrpd_loss(pyr, teacher, {0, 1, 2}).total;
                       },
                       {l0, l1, l2}, step, tol));
        }
        {
            EnhancerParams p = init_enhancer(3, 4, 2, s + 7);
            Tensor q = random_tensor({3, 4}, rng, true);
            Tensor protos = random_tensor({2, 3}, rng);
            Tensor tokens = teacher_tokens(random_tensor({3, 2, 2}, rng));
            std::vector<Tensor> inputs = p.tensors();
            inputs.push_back(q);
            record("scpqe", s,
                   grad_check(
                       [&p, protos, tokens](const std::vector<Tensor>& in) {
                           return sum_squares(csga_forward(siga_forward(in.back(), protos, p), tokens, p));
                       },
                       inputs, step, tol));
        }
    }
    result.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    return result;
}

}  // namespace vfm4sdg
