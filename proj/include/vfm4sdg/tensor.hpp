#pragma once

// Dense row-major tensors with a minimal reverse-mode gradient tape.
//
// A Tensor is a cheap handle onto a shared node. Operations on tensors that
// require gradients record their inputs and a backward closure; backward()
// walks the recorded graph in reverse topological order. Only the op set
// needed by the distillation loss, the query-enhancement blocks and their
// finite-difference checks is provided.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <functional>
#include <initializer_list>
#include <memory>
#include <numeric>
#include <span>
#include <sstream>
#include <string>
#include <unordered_set>
#include <vector>

#include "vfm4sdg/errors.hpp"

namespace vfm4sdg {

using Shape = std::vector<std::size_t>;

inline std::size_t numel(const Shape& shape) {
    return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>{});
}

inline std::string shape_str(const Shape& shape) {
    std::ostringstream os;
    os << '[';
    for (std::size_t i = 0; i < shape.size(); ++i) {
        if (i) os << 'x';
        os << shape[i];
    }
    os << ']';
    return os.str();
}

namespace detail {

struct Node {
    Shape shape;
    std::vector<double> value;
    std::vector<double> grad;  // empty until first accumulation
    bool requires_grad = false;
    bool is_leaf = true;
    std::vector<std::shared_ptr<Node>> parents;
    std::function<void(const Node&)> backward;

    void ensure_grad() {
        if (grad.size() != value.size()) grad.assign(value.size(), 0.0);
    }
};

inline constexpr const char* kModule = "tensor-core";

}  // namespace detail

class Tensor {
public:
    Tensor() : Tensor(Shape{}, std::vector<double>{0.0}) {}

    Tensor(Shape shape, std::vector<double> values, bool requires_grad = false)
        : node_(std::make_shared<detail::Node>()) {
        for (auto d : shape) {
            if (d == 0) throw DimensionError(detail::kModule, "zero-sized dimension in shape " + shape_str(shape));
        }
        if (numel(shape) != values.size()) {
            throw DimensionError(detail::kModule, "shape " + shape_str(shape) + " needs " +
                                                      std::to_string(numel(shape)) + " values, got " +
                                                      std::to_string(values.size()));
        }
        node_->shape = std::move(shape);
        node_->value = std::move(values);
        node_->requires_grad = requires_grad;
    }

    static Tensor scalar(double v, bool requires_grad = false) { return Tensor(Shape{}, {v}, requires_grad); }

    static Tensor full(Shape shape, double v, bool requires_grad = false) {
        auto n = numel(shape);
        return Tensor(std::move(shape), std::vector<double>(n, v), requires_grad);
    }

    static Tensor zeros(Shape shape, bool requires_grad = false) { return full(std::move(shape), 0.0, requires_grad); }

    static Tensor matrix(std::initializer_list<std::initializer_list<double>> rows, bool requires_grad = false) {
        std::vector<double> v;
        std::size_t cols = rows.size() ? rows.begin()->size() : 0;
        for (const auto& r : rows) {
            if (r.size() != cols) throw DimensionError(detail::kModule, "ragged matrix literal");
            v.insert(v.end(), r.begin(), r.end());
        }
        return Tensor(Shape{rows.size(), cols}, std::move(v), requires_grad);
    }

    static Tensor identity(std::size_t n) {
        std::vector<double> v(n * n, 0.0);
        for (std::size_t i = 0; i < n; ++i) v[i * n + i] = 1.0;
        return Tensor(Shape{n, n}, std::move(v));
    }

    const Shape& shape() const noexcept { return node_->shape; }
    std::size_t ndim() const noexcept { return node_->shape.size(); }
    std::size_t dim(std::size_t i) const { return node_->shape.at(i); }
    std::size_t size() const noexcept { return node_->value.size(); }

    std::span<const double> values() const noexcept { return node_->value; }

    // Leaves only: intermediate values are owned by the tape.
    std::span<double> mutable_values() {
        if (!node_->is_leaf) throw ContractError(detail::kModule, "cannot mutate a non-leaf tensor");
        return node_->value;
    }

    double item() const {
        if (size() != 1) throw ContractError(detail::kModule, "item() on tensor of shape " + shape_str(shape()));
        return node_->value[0];
    }

    double operator()(std::size_t i, std::size_t j) const { return node_->value[i * node_->shape.back() + j]; }

    bool requires_grad() const noexcept { return node_->requires_grad; }
    bool is_leaf() const noexcept { return node_->is_leaf; }
    bool has_grad() const noexcept { return !node_->grad.empty(); }

    // Empty span when no gradient has reached this tensor.
    std::span<const double> grad() const noexcept { return node_->grad; }

    void zero_grad() { node_->grad.clear(); }

    // Same values, cut off from the tape.
    Tensor detach() const { return Tensor(node_->shape, node_->value, false); }

    const std::shared_ptr<detail::Node>& node() const noexcept { return node_; }

private:
    std::shared_ptr<detail::Node> node_;
};

namespace detail {

// Builds an op result. Inputs that do not require gradients are not kept
// alive by the result, so constant subgraphs are freed eagerly.
inline Tensor make_result(Shape shape, std::vector<double> values, std::initializer_list<Tensor> inputs,
                          std::function<void(const Node&)> backward) {
    Tensor out(std::move(shape), std::move(values));
    bool any = false;
    for (const auto& t : inputs) any = any || t.requires_grad();
    if (any) {
        auto& n = *out.node();
        n.requires_grad = true;
        n.is_leaf = false;
        for (const auto& t : inputs) n.parents.push_back(t.node());
        n.backward = std::move(backward);
    }
    return out;
}

inline Tensor make_result(Shape shape, std::vector<double> values, const std::vector<Tensor>& inputs,
                          std::function<void(const Node&)> backward) {
    Tensor out(std::move(shape), std::move(values));
    bool any = std::any_of(inputs.begin(), inputs.end(), [](const Tensor& t) { return t.requires_grad(); });
    if (any) {
        auto& n = *out.node();
        n.requires_grad = true;
        n.is_leaf = false;
        for (const auto& t : inputs) n.parents.push_back(t.node());
        n.backward = std::move(backward);
    }
    return out;
}

inline void require_same_shape(const Tensor& a, const Tensor& b, const char* op) {
    if (a.shape() != b.shape()) {
        throw DimensionError(kModule, std::string(op) + ": shape mismatch " + shape_str(a.shape()) + " vs " +
                                          shape_str(b.shape()));
    }
}

inline void require_matrix(const Tensor& a, const char* op) {
    if (a.ndim() != 2) {
        throw DimensionError(kModule, std::string(op) + ": expected a matrix, got shape " + shape_str(a.shape()));
    }
}

}  // namespace detail

// Runs reverse accumulation from a scalar. Leaf gradients accumulate across
// calls until zero_grad(); intermediate gradients are reset on every call.
inline void backward(const Tensor& loss) {
    using detail::Node;
    if (loss.size() != 1) {
        throw ContractError(detail::kModule, "backward() needs a scalar loss, got shape " + shape_str(loss.shape()));
    }
    if (!loss.requires_grad()) {
        throw ContractError(detail::kModule, "backward() on a loss that does not depend on any grad-requiring leaf");
    }

    std::vector<Node*> order;
    std::unordered_set<Node*> seen;
    std::vector<std::pair<Node*, std::size_t>> stack{{loss.node().get(), 0}};
    seen.insert(loss.node().get());
    while (!stack.empty()) {
        auto& [node, next] = stack.back();
        if (next < node->parents.size()) {
            Node* p = node->parents[next++].get();
            if (p->requires_grad && seen.insert(p).second) stack.emplace_back(p, 0);
        } else {
            order.push_back(node);
            stack.pop_back();
        }
    }

    for (Node* n : order) {
        if (!n->is_leaf) n->grad.assign(n->value.size(), 0.0);
    }
    Node& root = *loss.node();
    root.ensure_grad();
    root.grad[0] += 1.0;
    for (auto it = order.rbegin(); it != order.rend(); ++it) {
        if ((*it)->backward) (*it)->backward(**it);
    }
}

namespace detail {

inline void accumulate(const std::shared_ptr<Node>& p, std::size_t i, double g) {
    if (!p->requires_grad) return;
    p->ensure_grad();
    p->grad[i] += g;
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Elementwise

inline Tensor add(const Tensor& a, const Tensor& b) {
    detail::require_same_shape(a, b, "add");
    std::vector<double> v(a.size());
    for (std::size_t i = 0; i < v.size(); ++i) v[i] = a.values()[i] + b.values()[i];
    return detail::make_result(a.shape(), std::move(v), {a, b}, [](const detail::Node& out) {
        for (const auto& p : out.parents) {
            if (!p->requires_grad) continue;
            p->ensure_grad();
            for (std::size_t i = 0; i < out.grad.size(); ++i) p->grad[i] += out.grad[i];
        }
    });
}

inline Tensor sub(const Tensor& a, const Tensor& b) {
    detail::require_same_shape(a, b, "sub");
    std::vector<double> v(a.size());
    for (std::size_t i = 0; i < v.size(); ++i) v[i] = a.values()[i] - b.values()[i];
    return detail::make_result(a.shape(), std::move(v), {a, b}, [](const detail::Node& out) {
        for (std::size_t i = 0; i < out.grad.size(); ++i) {
            detail::accumulate(out.parents[0], i, out.grad[i]);
            detail::accumulate(out.parents[1], i, -out.grad[i]);
        }
    });
}

inline Tensor mul(const Tensor& a, const Tensor& b) {
    detail::require_same_shape(a, b, "mul");
    std::vector<double> v(a.size());
    for (std::size_t i = 0; i < v.size(); ++i) v[i] = a.values()[i] * b.values()[i];
    return detail::make_result(a.shape(), std::move(v), {a, b}, [](const detail::Node& out) {
        const auto& pa = out.parents[0];
        const auto& pb = out.parents[1];
        for (std::size_t i = 0; i < out.grad.size(); ++i) {
            detail::accumulate(pa, i, out.grad[i] * pb->value[i]);
            detail::accumulate(pb, i, out.grad[i] * pa->value[i]);
        }
    });
}

inline Tensor scale(const Tensor& a, double s) {
    std::vector<double> v(a.values().begin(), a.values().end());
    for (auto& x : v) x *= s;
    return detail::make_result(a.shape(), std::move(v), {a}, [s](const detail::Node& out) {
        for (std::size_t i = 0; i < out.grad.size(); ++i) detail::accumulate(out.parents[0], i, s * out.grad[i]);
    });
}

// Elementwise map with a caller-supplied derivative. Used for custom ops and
// for negative controls in gradient checks.
inline Tensor map_elementwise(const Tensor& a, std::function<double(double)> f, std::function<double(double)> df) {
    std::vector<double> v(a.size());
    for (std::size_t i = 0; i < v.size(); ++i) v[i] = f(a.values()[i]);
    return detail::make_result(a.shape(), std::move(v), {a}, [df = std::move(df)](const detail::Node& out) {
        const auto& p = out.parents[0];
        for (std::size_t i = 0; i < out.grad.size(); ++i) detail::accumulate(p, i, out.grad[i] * df(p->value[i]));
    });
}

// ---------------------------------------------------------------------------
// Reductions

inline Tensor sum(const Tensor& a) {
    double s = 0.0;
    for (double x : a.values()) s += x;
    return detail::make_result(Shape{}, {s}, {a}, [](const detail::Node& out) {
        const auto& p = out.parents[0];
        for (std::size_t i = 0; i < p->value.size(); ++i) detail::accumulate(p, i, out.grad[0]);
    });
}

inline Tensor mean(const Tensor& a) { return scale(sum(a), 1.0 / static_cast<double>(a.size())); }

inline Tensor sum_squares(const Tensor& a) { return sum(mul(a, a)); }

// ---------------------------------------------------------------------------
// Layout

// out[i] = a[indices[i]]; backward scatters. Covers reshape, transpose,
// flattening and masked selection.
inline Tensor gather(const Tensor& a, std::vector<std::size_t> indices, Shape shape) {
    if (numel(shape) != indices.size()) {
        throw DimensionError(detail::kModule, "gather: " + std::to_string(indices.size()) +
                                                  " indices for shape " + shape_str(shape));
    }
    std::vector<double> v(indices.size());
    for (std::size_t i = 0; i < indices.size(); ++i) {
        if (indices[i] >= a.size()) throw DimensionError(detail::kModule, "gather: index out of range");
        v[i] = a.values()[indices[i]];
    }
    return detail::make_result(std::move(shape), std::move(v), {a}, [idx = std::move(indices)](const detail::Node& out) {
        for (std::size_t i = 0; i < idx.size(); ++i) detail::accumulate(out.parents[0], idx[i], out.grad[i]);
    });
}

inline Tensor reshape(const Tensor& a, Shape shape) {
    if (numel(shape) != a.size()) {
        throw DimensionError(detail::kModule, "reshape: cannot view " + shape_str(a.shape()) + " as " + shape_str(shape));
    }
    std::vector<std::size_t> idx(a.size());
    std::iota(idx.begin(), idx.end(), std::size_t{0});
    return gather(a, std::move(idx), std::move(shape));
}

inline Tensor transpose(const Tensor& a) {
    detail::require_matrix(a, "transpose");
    const std::size_t r = a.dim(0), c = a.dim(1);
    std::vector<std::size_t> idx(r * c);
    for (std::size_t i = 0; i < c; ++i)
        for (std::size_t j = 0; j < r; ++j) idx[i * r + j] = j * c + i;
    return gather(a, std::move(idx), Shape{c, r});
}

inline Tensor slice_cols(const Tensor& a, std::size_t start, std::size_t count) {
    detail::require_matrix(a, "slice_cols");
    if (count == 0 || start + count > a.dim(1)) throw DimensionError(detail::kModule, "slice_cols: range out of bounds");
    const std::size_t r = a.dim(0), c = a.dim(1);
    std::vector<std::size_t> idx;
    idx.reserve(r * count);
    for (std::size_t i = 0; i < r; ++i)
        for (std::size_t j = 0; j < count; ++j) idx.push_back(i * c + start + j);
    return gather(a, std::move(idx), Shape{r, count});
}

inline Tensor concat_cols(const std::vector<Tensor>& parts) {
    if (parts.empty()) throw DimensionError(detail::kModule, "concat_cols: nothing to concatenate");
    const std::size_t r = parts.front().dim(0);
    std::size_t total = 0;
    for (const auto& p : parts) {
        detail::require_matrix(p, "concat_cols");
        if (p.dim(0) != r) throw DimensionError(detail::kModule, "concat_cols: row count mismatch");
        total += p.dim(1);
    }
    std::vector<double> v(r * total);
    std::size_t off = 0;
    for (const auto& p : parts) {
        const std::size_t c = p.dim(1);
        for (std::size_t i = 0; i < r; ++i)
            for (std::size_t j = 0; j < c; ++j) v[i * total + off + j] = p.values()[i * c + j];
        off += c;
    }
    return detail::make_result(Shape{r, total}, std::move(v), parts, [r, total](const detail::Node& out) {
        std::size_t off = 0;
        for (const auto& p : out.parents) {
            const std::size_t c = p->shape[1];
            if (p->requires_grad) {
                p->ensure_grad();
                for (std::size_t i = 0; i < r; ++i)
                    for (std::size_t j = 0; j < c; ++j) p->grad[i * c + j] += out.grad[i * total + off + j];
            }
            off += c;
        }
    });
}

// ---------------------------------------------------------------------------
// Linear algebra

inline Tensor matmul(const Tensor& a, const Tensor& b) {
    if (a.ndim() != 2 || b.ndim() != 2 || a.dim(1) != b.dim(0)) {
        throw DimensionError(detail::kModule,
                             "matmul: incompatible shapes " + shape_str(a.shape()) + " and " + shape_str(b.shape()));
    }
    const std::size_t m = a.dim(0), k = a.dim(1), n = b.dim(1);
    const auto av = a.values();
    const auto bv = b.values();
    std::vector<double> v(m * n, 0.0);
    for (std::size_t i = 0; i < m; ++i)
        for (std::size_t p = 0; p < k; ++p) {
            const double x = av[i * k + p];
            if (x == 0.0) continue;
            for (std::size_t j = 0; j < n; ++j) v[i * n + j] += x * bv[p * n + j];
        }
    return detail::make_result(Shape{m, n}, std::move(v), {a, b}, [m, k, n](const detail::Node& out) {
        const auto& pa = out.parents[0];
        const auto& pb = out.parents[1];
        const auto& g = out.grad;
        if (pa->requires_grad) {
            pa->ensure_grad();
            for (std::size_t i = 0; i < m; ++i)
                for (std::size_t p = 0; p < k; ++p) {
                    double s = 0.0;
                    for (std::size_t j = 0; j < n; ++j) s += g[i * n + j] * pb->value[p * n + j];
                    pa->grad[i * k + p] += s;
                }
        }
        if (pb->requires_grad) {
            pb->ensure_grad();
            for (std::size_t i = 0; i < m; ++i)
                for (std::size_t p = 0; p < k; ++p) {
                    const double x = pa->value[i * k + p];
                    for (std::size_t j = 0; j < n; ++j) pb->grad[p * n + j] += x * g[i * n + j];
                }
        }
    });
}

// x[n x d] + bias[d] broadcast over rows.
inline Tensor add_row_bias(const Tensor& x, const Tensor& bias) {
    detail::require_matrix(x, "add_row_bias");
    if (bias.size() != x.dim(1)) {
        throw DimensionError(detail::kModule, "add_row_bias: bias " + shape_str(bias.shape()) + " for rows of " +
                                                  shape_str(x.shape()));
    }
    const std::size_t n = x.dim(0), d = x.dim(1);
    std::vector<double> v(x.values().begin(), x.values().end());
    for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = 0; j < d; ++j) v[i * d + j] += bias.values()[j];
    return detail::make_result(x.shape(), std::move(v), {x, bias}, [n, d](const detail::Node& out) {
        for (std::size_t i = 0; i < n; ++i)
            for (std::size_t j = 0; j < d; ++j) {
                detail::accumulate(out.parents[0], i * d + j, out.grad[i * d + j]);
                detail::accumulate(out.parents[1], j, out.grad[i * d + j]);
            }
    });
}

// ---------------------------------------------------------------------------
// Normalisation and losses

// Row-wise softmax, stabilised by subtracting the row maximum.
inline Tensor softmax_rows(const Tensor& x) {
    detail::require_matrix(x, "softmax_rows");
    const std::size_t r = x.dim(0), c = x.dim(1);
    std::vector<double> v(r * c);
    for (std::size_t i = 0; i < r; ++i) {
        const double* row = x.values().data() + i * c;
        const double mx = *std::max_element(row, row + c);
        double z = 0.0;
        for (std::size_t j = 0; j < c; ++j) z += (v[i * c + j] = std::exp(row[j] - mx));
        for (std::size_t j = 0; j < c; ++j) v[i * c + j] /= z;
    }
    return detail::make_result(x.shape(), v, {x}, [r, c, y = v](const detail::Node& out) {
        const auto& p = out.parents[0];
        p->ensure_grad();
        for (std::size_t i = 0; i < r; ++i) {
            double dot = 0.0;
            for (std::size_t j = 0; j < c; ++j) dot += out.grad[i * c + j] * y[i * c + j];
            for (std::size_t j = 0; j < c; ++j) p->grad[i * c + j] += y[i * c + j] * (out.grad[i * c + j] - dot);
        }
    });
}

// Per-row normalisation to zero mean and unit (biased) variance, then
// gain * xhat + bias.
inline Tensor layer_norm(const Tensor& x, const Tensor& gain, const Tensor& bias, double eps = 1e-5) {
    detail::require_matrix(x, "layer_norm");
    const std::size_t n = x.dim(0), d = x.dim(1);
    if (gain.size() != d || bias.size() != d) {
        throw DimensionError(detail::kModule, "layer_norm: gain/bias " + shape_str(gain.shape()) + "/" +
                                                  shape_str(bias.shape()) + " for rows of " + shape_str(x.shape()));
    }
    if (!(eps > 0.0)) throw ContractError(detail::kModule, "layer_norm: eps must be positive");
    std::vector<double> xhat(n * d), inv_std(n), v(n * d);
    for (std::size_t i = 0; i < n; ++i) {
        const double* row = x.values().data() + i * d;
        double mu = 0.0;
        for (std::size_t j = 0; j < d; ++j) mu += row[j];
        mu /= static_cast<double>(d);
        double var = 0.0;
        for (std::size_t j = 0; j < d; ++j) var += (row[j] - mu) * (row[j] - mu);
        var /= static_cast<double>(d);
        inv_std[i] = 1.0 / std::sqrt(var + eps);
        for (std::size_t j = 0; j < d; ++j) {
            xhat[i * d + j] = (row[j] - mu) * inv_std[i];
            v[i * d + j] = xhat[i * d + j] * gain.values()[j] + bias.values()[j];
        }
    }
    return detail::make_result(
        x.shape(), std::move(v), {x, gain, bias},
        [n, d, xhat = std::move(xhat), inv_std = std::move(inv_std)](const detail::Node& out) {
            const auto& px = out.parents[0];
            const auto& pg = out.parents[1];
            const auto& pb = out.parents[2];
            const auto& g = out.grad;
            for (std::size_t i = 0; i < n; ++i) {
                double mean_dxh = 0.0, mean_dxh_xh = 0.0;
                for (std::size_t j = 0; j < d; ++j) {
                    const double dxh = g[i * d + j] * pg->value[j];
                    mean_dxh += dxh;
                    mean_dxh_xh += dxh * xhat[i * d + j];
                    detail::accumulate(pg, j, g[i * d + j] * xhat[i * d + j]);
                    detail::accumulate(pb, j, g[i * d + j]);
                }
                if (!px->requires_grad) continue;
                mean_dxh /= static_cast<double>(d);
                mean_dxh_xh /= static_cast<double>(d);
                px->ensure_grad();
                for (std::size_t j = 0; j < d; ++j) {
                    const double dxh = g[i * d + j] * pg->value[j];
                    px->grad[i * d + j] += inv_std[i] * (dxh - mean_dxh - xhat[i * d + j] * mean_dxh_xh);
                }
            }
        });
}

// Divides every column by max(||column||, eps). Zero columns stay zero.
inline Tensor l2_normalize_columns(const Tensor& x, double eps = 1e-12) {
    detail::require_matrix(x, "l2_normalize_columns");
    if (!(eps > 0.0)) throw ContractError(detail::kModule, "l2_normalize_columns: eps must be positive");
    const std::size_t c = x.dim(0), n = x.dim(1);
    std::vector<double> norms(n, 0.0), v(c * n);
    for (std::size_t i = 0; i < c; ++i)
        for (std::size_t j = 0; j < n; ++j) norms[j] += x.values()[i * n + j] * x.values()[i * n + j];
    for (auto& s : norms) s = std::sqrt(s);
    for (std::size_t i = 0; i < c; ++i)
        for (std::size_t j = 0; j < n; ++j) v[i * n + j] = x.values()[i * n + j] / std::max(norms[j], eps);
    return detail::make_result(x.shape(), v, {x}, [c, n, eps, norms = std::move(norms), y = v](const detail::Node& out) {
        const auto& p = out.parents[0];
        p->ensure_grad();
        for (std::size_t j = 0; j < n; ++j) {
            if (norms[j] > eps) {
                double dot = 0.0;
                for (std::size_t i = 0; i < c; ++i) dot += y[i * n + j] * out.grad[i * n + j];
                for (std::size_t i = 0; i < c; ++i)
                    p->grad[i * n + j] += (out.grad[i * n + j] - y[i * n + j] * dot) / norms[j];
            } else {
                for (std::size_t i = 0; i < c; ++i) p->grad[i * n + j] += out.grad[i * n + j] / eps;
            }
        }
    });
}

// Mean over elements of 0.5 d^2 / beta for |d| < beta, |d| - 0.5 beta otherwise.
inline Tensor smooth_l1(const Tensor& pred, const Tensor& target, double beta = 1.0) {
    detail::require_same_shape(pred, target, "smooth_l1");
    if (!(beta > 0.0)) throw ContractError(detail::kModule, "smooth_l1: beta must be positive");
    const std::size_t n = pred.size();
    std::vector<double> slope(n);
    double total = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
        const double d = pred.values()[i] - target.values()[i];
        const double ad = std::abs(d);
        if (ad < beta) {
            total += 0.5 * d * d / beta;
            slope[i] = d / beta;
        } else {
            total += ad - 0.5 * beta;
            slope[i] = d > 0 ? 1.0 : -1.0;
        }
    }
    const double inv_n = 1.0 / static_cast<double>(n);
    return detail::make_result(Shape{}, {total * inv_n}, {pred, target},
                               [inv_n, slope = std::move(slope)](const detail::Node& out) {
                                   const double g = out.grad[0] * inv_n;
                                   for (std::size_t i = 0; i < slope.size(); ++i) {
                                       detail::accumulate(out.parents[0], i, g * slope[i]);
                                       detail::accumulate(out.parents[1], i, -g * slope[i]);
                                   }
                               });
}

// ---------------------------------------------------------------------------
// Spatial resampling

// Separable linear resampling of a C x H x W map: out[c,i,j] =
// sum_a sum_b rows[i,a] * cols[j,b] * x[c,a,b], with rows (Ho x H) and
// cols (Wo x W) row-major weight matrices.
inline Tensor separable_resample(const Tensor& x, std::vector<double> rows, std::size_t out_h,
                                 std::vector<double> cols, std::size_t out_w) {
    if (x.ndim() != 3) {
        throw DimensionError(detail::kModule, "separable_resample: expected C x H x W, got " + shape_str(x.shape()));
    }
    const std::size_t c = x.dim(0), h = x.dim(1), w = x.dim(2);
    if (rows.size() != out_h * h || cols.size() != out_w * w) {
        throw DimensionError(detail::kModule, "separable_resample: weight matrices do not match the map size");
    }
    const auto xv = x.values();
    std::vector<double> tmp(c * out_h * w, 0.0), v(c * out_h * out_w, 0.0);
    for (std::size_t ch = 0; ch < c; ++ch)
        for (std::size_t i = 0; i < out_h; ++i)
            for (std::size_t a = 0; a < h; ++a) {
                const double r = rows[i * h + a];
                if (r == 0.0) continue;
                for (std::size_t b = 0; b < w; ++b) tmp[(ch * out_h + i) * w + b] += r * xv[(ch * h + a) * w + b];
            }
    for (std::size_t ch = 0; ch < c; ++ch)
        for (std::size_t i = 0; i < out_h; ++i)
            for (std::size_t j = 0; j < out_w; ++j) {
                double s = 0.0;
                for (std::size_t b = 0; b < w; ++b) s += cols[j * w + b] * tmp[(ch * out_h + i) * w + b];
                v[(ch * out_h + i) * out_w + j] = s;
            }
    return detail::make_result(
        Shape{c, out_h, out_w}, std::move(v), {x},
        [c, h, w, out_h, out_w, rows = std::move(rows), cols = std::move(cols)](const detail::Node& out) {
            const auto& p = out.parents[0];
            p->ensure_grad();
            std::vector<double> dtmp(c * out_h * w, 0.0);
            for (std::size_t ch = 0; ch < c; ++ch)
                for (std::size_t i = 0; i < out_h; ++i)
                    for (std::size_t j = 0; j < out_w; ++j) {
                        const double g = out.grad[(ch * out_h + i) * out_w + j];
                        for (std::size_t b = 0; b < w; ++b) dtmp[(ch * out_h + i) * w + b] += cols[j * w + b] * g;
                    }
            for (std::size_t ch = 0; ch < c; ++ch)
                for (std::size_t i = 0; i < out_h; ++i)
                    for (std::size_t a = 0; a < h; ++a) {
                        const double r = rows[i * h + a];
                        if (r == 0.0) continue;
                        for (std::size_t b = 0; b < w; ++b)
                            p->grad[(ch * h + a) * w + b] += r * dtmp[(ch * out_h + i) * w + b];
                    }
        });
}

}  // namespace vfm4sdg
