#pragma once

#include <Eigen/Core>

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <initializer_list>
#include <memory>
#include <numeric>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "footbots/errors.hpp"
#include "footbots/rng.hpp"

namespace footbots {

using Shape = std::vector<int>;

inline std::int64_t numel(const Shape& shape) {
    std::int64_t n = 1;
    for (int d : shape) n *= d;
    return n;
}

inline std::string shape_str(const Shape& shape) {
    std::ostringstream os;
    os << '[';
    for (std::size_t i = 0; i < shape.size(); ++i) {
        if (i) os << ',';
        os << shape[i];
    }
    os << ']';
    return os.str();
}

namespace detail {

inline bool& grad_mode_flag() {
    thread_local bool enabled = true;
    return enabled;
}

inline bool& finite_check_flag() {
    static bool enabled = true;
    return enabled;
}

}  // namespace detail

inline bool grad_mode_enabled() { return detail::grad_mode_flag(); }
inline void set_grad_mode(bool on) { detail::grad_mode_flag() = on; }
inline bool finite_checks_enabled() { return detail::finite_check_flag(); }
inline void set_finite_checks(bool on) { detail::finite_check_flag() = on; }

// Disables graph recording within a scope (evaluation paths).
struct NoGradGuard {
    NoGradGuard() : prev_(grad_mode_enabled()) { set_grad_mode(false); }
    ~NoGradGuard() { set_grad_mode(prev_); }
    NoGradGuard(const NoGradGuard&) = delete;
    NoGradGuard& operator=(const NoGradGuard&) = delete;

private:
    bool prev_;
};

template <typename T>
void check_finite(const std::vector<T>& values, const std::string& label) {
    if (!finite_checks_enabled()) return;
    for (std::size_t i = 0; i < values.size(); ++i) {
        if (!std::isfinite(values[i])) {
            std::ostringstream os;
            os << "non-finite value in tensor '" << label << "' at flat index " << i;
            throw NumericError(os.str());
        }
    }
}

template <typename T>
struct TensorNode {
    Shape shape;
    std::vector<T> values;
    std::vector<T> grad;  // sized lazily, always values.size() once present
    bool requires_grad = false;
    std::string label;
    std::vector<std::shared_ptr<TensorNode<T>>> parents;
    std::function<void()> backprop;

    std::int64_t size() const { return static_cast<std::int64_t>(values.size()); }

    void ensure_grad() {
        if (grad.size() != values.size()) grad.assign(values.size(), T(0));
    }
};

// Value-semantic handle onto a node of the computation graph. Values are
// immutable after an op produces them; only gradients accumulate.
template <typename T>
class Tensor {
public:
    Tensor() = default;

    explicit Tensor(Shape shape, T fill = T(0)) {
        validate_shape(shape);
        node_ = std::make_shared<TensorNode<T>>();
        node_->values.assign(static_cast<std::size_t>(numel(shape)), fill);
        node_->shape = std::move(shape);
    }

    Tensor(Shape shape, std::vector<T> values) {
        validate_shape(shape);
        if (numel(shape) != static_cast<std::int64_t>(values.size())) {
            throw ShapeError("tensor init: shape " + shape_str(shape) + " needs " +
                             std::to_string(numel(shape)) + " values, got " +
                             std::to_string(values.size()));
        }
        node_ = std::make_shared<TensorNode<T>>();
        node_->shape = std::move(shape);
        node_->values = std::move(values);
    }

    static Tensor parameter(Shape shape, std::vector<T> values, std::string label = {}) {
        Tensor t(std::move(shape), std::move(values));
        t.node_->requires_grad = true;
        t.node_->label = std::move(label);
        return t;
    }

    // Uniform init in +-sqrt(6 / (fan_in + fan_out)).
    static Tensor xavier(Shape shape, int fan_in, int fan_out, SplitMix64& rng,
                         std::string label = {}) {
        std::vector<T> v(static_cast<std::size_t>(numel(shape)));
        const double bound = std::sqrt(6.0 / (fan_in + fan_out));
        for (auto& x : v) x = static_cast<T>(rng.uniform(-bound, bound));
        return parameter(std::move(shape), std::move(v), std::move(label));
    }

    bool defined() const { return node_ != nullptr; }
    const Shape& shape() const { return n().shape; }
    int rank() const { return static_cast<int>(n().shape.size()); }
    int dim(int i) const { return n().shape.at(static_cast<std::size_t>(i)); }
    std::int64_t size() const { return n().size(); }

    const std::vector<T>& values() const { return n().values; }
    std::vector<T>& values_mut() { return n().values; }

    bool requires_grad() const { return n().requires_grad; }
    void set_requires_grad(bool rg) { n().requires_grad = rg; }

    const std::vector<T>& grad() const {
        if (n().grad.size() != n().values.size())
            throw ContractError("tensor '" + n().label + "' has no gradient populated");
        return n().grad;
    }
    bool has_grad() const { return n().grad.size() == n().values.size(); }
    void zero_grad() { n().grad.assign(n().values.size(), T(0)); }

    const std::string& label() const { return n().label; }
    Tensor& named(std::string label) {
        n().label = std::move(label);
        return *this;
    }

    T item() const {
        if (size() != 1) throw ContractError("item(): tensor " + shape_str(shape()) + " is not scalar");
        return n().values[0];
    }

    T at(std::initializer_list<int> idx) const {
        const auto& sh = shape();
        if (idx.size() != sh.size()) throw ShapeError("at(): index rank mismatch");
        std::int64_t flat = 0;
        auto it = idx.begin();
        for (std::size_t i = 0; i < sh.size(); ++i, ++it) flat = flat * sh[i] + *it;
        return n().values[static_cast<std::size_t>(flat)];
    }

    std::shared_ptr<TensorNode<T>> node() const { return node_; }

private:
    static void validate_shape(const Shape& shape) {
        if (shape.empty()) throw ShapeError("tensor shape must have at least one dimension");
        for (int d : shape)
            if (d <= 0) throw ShapeError("tensor shape has non-positive dimension: " + shape_str(shape));
    }

    TensorNode<T>& n() const {
        if (!node_) throw ContractError("operation on empty tensor handle");
        return *node_;
    }

    std::shared_ptr<TensorNode<T>> node_;
};

namespace detail {

template <typename T>
Tensor<T> make_op(Shape shape, std::vector<T> values,
                  std::initializer_list<const Tensor<T>*> parents, const char* name) {
    Tensor<T> out(std::move(shape), std::move(values));
    out.named(name);
    check_finite(out.values(), name);
    if (grad_mode_enabled()) {
        for (const Tensor<T>* p : parents) {
            if (p->defined() && p->requires_grad()) {
                out.node()->parents.push_back(p->node());
                out.set_requires_grad(true);
            }
        }
    }
    return out;
}

template <typename T>
using EMat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename T>
using EMap = Eigen::Map<EMat<T>>;
template <typename T>
using ECMap = Eigen::Map<const EMat<T>>;

}  // namespace detail

// ---------------------------------------------------------------------------
// Elementwise ops
// ---------------------------------------------------------------------------

namespace detail {

template <typename T, typename Fwd, typename Bwd>
Tensor<T> binary_elementwise(const Tensor<T>& a, const Tensor<T>& b, const char* name, Fwd fwd,
                             Bwd bwd) {
    if (a.shape() != b.shape()) {
        throw ShapeError(std::string(name) + ": shape mismatch " + shape_str(a.shape()) + " vs " +
                         shape_str(b.shape()));
    }
    const auto& av = a.values();
    const auto& bv = b.values();
    std::vector<T> ov(av.size());
    for (std::size_t i = 0; i < av.size(); ++i) ov[i] = fwd(av[i], bv[i]);
    Tensor<T> out = make_op<T>(a.shape(), std::move(ov), {&a, &b}, name);
    if (out.requires_grad()) {
        auto an = a.node();
        auto bn = b.node();
        auto* self = out.node().get();
        out.node()->backprop = [an, bn, self, bwd]() {
            const auto& g = self->grad;
            if (an->requires_grad) an->ensure_grad();
            if (bn->requires_grad) bn->ensure_grad();
            for (std::size_t i = 0; i < g.size(); ++i)
                bwd(g[i], an->values[i], bn->values[i],
                    an->requires_grad ? &an->grad[i] : nullptr,
                    bn->requires_grad ? &bn->grad[i] : nullptr);
        };
    }
    return out;
}

}  // namespace detail

template <typename T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b) {
    return detail::binary_elementwise<T>(
        a, b, "add", [](T x, T y) { return x + y; },
        [](T g, T, T, T* ga, T* gb) {
            if (ga) *ga += g;
            if (gb) *gb += g;
        });
}

template <typename T>
Tensor<T> sub(const Tensor<T>& a, const Tensor<T>& b) {
    return detail::binary_elementwise<T>(
        a, b, "sub", [](T x, T y) { return x - y; },
        [](T g, T, T, T* ga, T* gb) {
            if (ga) *ga += g;
            if (gb) *gb -= g;
        });
}

template <typename T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b) {
    return detail::binary_elementwise<T>(
        a, b, "mul", [](T x, T y) { return x * y; },
        [](T g, T x, T y, T* ga, T* gb) {
            if (ga) *ga += g * y;
            if (gb) *gb += g * x;
        });
}

template <typename T>
Tensor<T> scale(const Tensor<T>& a, T c) {
    std::vector<T> ov(a.values());
    for (auto& x : ov) x *= c;
    Tensor<T> out = detail::make_op<T>(a.shape(), std::move(ov), {&a}, "scale");
    if (out.requires_grad()) {
        auto an = a.node();
        auto* self = out.node().get();
        out.node()->backprop = [an, self, c]() {
            an->ensure_grad();
            for (std::size_t i = 0; i < self->grad.size(); ++i) an->grad[i] += self->grad[i] * c;
        };
    }
    return out;
}

// Subgradient at 0 is 0.
template <typename T>
Tensor<T> relu(const Tensor<T>& a) {
    std::vector<T> ov(a.values());
    for (auto& x : ov) x = x > T(0) ? x : T(0);
    Tensor<T> out = detail::make_op<T>(a.shape(), std::move(ov), {&a}, "relu");
    if (out.requires_grad()) {
        auto an = a.node();
        auto* self = out.node().get();
        out.node()->backprop = [an, self]() {
            an->ensure_grad();
            for (std::size_t i = 0; i < self->grad.size(); ++i)
                if (an->values[i] > T(0)) an->grad[i] += self->grad[i];
        };
    }
    return out;
}

// Elementwise square root; subgradient at 0 is 0 (the l2-norm kink).
template <typename T>
Tensor<T> sqrt_elem(const Tensor<T>& a) {
    std::vector<T> ov(a.values());
    for (auto& x : ov) x = std::sqrt(x);
    Tensor<T> out = detail::make_op<T>(a.shape(), std::move(ov), {&a}, "sqrt");
    if (out.requires_grad()) {
        auto an = a.node();
        auto* self = out.node().get();
        out.node()->backprop = [an, self]() {
            an->ensure_grad();
            for (std::size_t i = 0; i < self->grad.size(); ++i) {
                T y = self->values[i];
                if (y > T(0)) an->grad[i] += self->grad[i] / (T(2) * y);
            }
        };
    }
    return out;
}

// Adds a rank-1 bias along the last axis.
template <typename T>
Tensor<T> add_bias(const Tensor<T>& x, const Tensor<T>& b) {
    if (b.rank() != 1 || b.dim(0) != x.dim(x.rank() - 1)) {
        throw ShapeError("add_bias: bias " + shape_str(b.shape()) + " does not match last axis of " +
                         shape_str(x.shape()));
    }
    const std::int64_t d = b.dim(0);
    const std::int64_t rows = x.size() / d;
    std::vector<T> ov(x.values());
    for (std::int64_t r = 0; r < rows; ++r)
        for (std::int64_t j = 0; j < d; ++j) ov[static_cast<std::size_t>(r * d + j)] += b.values()[static_cast<std::size_t>(j)];
    Tensor<T> out = detail::make_op<T>(x.shape(), std::move(ov), {&x, &b}, "add_bias");
    if (out.requires_grad()) {
        auto xn = x.node();
        auto bn = b.node();
        auto* self = out.node().get();
        out.node()->backprop = [xn, bn, self, rows, d]() {
            const auto& g = self->grad;
            if (xn->requires_grad) {
                xn->ensure_grad();
                for (std::size_t i = 0; i < g.size(); ++i) xn->grad[i] += g[i];
            }
            if (bn->requires_grad) {
                bn->ensure_grad();
                for (std::int64_t r = 0; r < rows; ++r)
                    for (std::int64_t j = 0; j < d; ++j)
                        bn->grad[static_cast<std::size_t>(j)] += g[static_cast<std::size_t>(r * d + j)];
            }
        };
    }
    return out;
}

// ---------------------------------------------------------------------------
// Matrix multiplication
// ---------------------------------------------------------------------------

// a: [.., n, m] x b: [.., m, p] -> [.., n, p]. Leading batch dims must be
// equal, or either operand may be rank-2 and is then shared across the
// other's batch.
template <typename T>
Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b) {
    if (a.rank() < 2 || b.rank() < 2)
        throw ShapeError("matmul: operands must be rank >= 2, got " + shape_str(a.shape()) +
                         " and " + shape_str(b.shape()));
    const int ra = a.rank(), rb = b.rank();
    const std::int64_t n = a.dim(ra - 2), m = a.dim(ra - 1);
    const std::int64_t m2 = b.dim(rb - 2), p = b.dim(rb - 1);
    if (m != m2)
        throw ShapeError("matmul: inner dimensions disagree, " + shape_str(a.shape()) + " x " +
                         shape_str(b.shape()));

    Shape batch_a(a.shape().begin(), a.shape().end() - 2);
    Shape batch_b(b.shape().begin(), b.shape().end() - 2);
    if (!batch_a.empty() && !batch_b.empty() && batch_a != batch_b)
        throw ShapeError("matmul: batch dimensions disagree, " + shape_str(a.shape()) + " x " +
                         shape_str(b.shape()));
    const Shape& batch = batch_a.empty() ? batch_b : batch_a;
    const std::int64_t nbatch = numel(batch);
    const bool a_shared = batch_a.empty() && !batch.empty();
    const bool b_shared = batch_b.empty() && !batch.empty();

    Shape out_shape = batch;
    out_shape.push_back(static_cast<int>(n));
    out_shape.push_back(static_cast<int>(p));

    std::vector<T> ov(static_cast<std::size_t>(nbatch * n * p));
    using detail::ECMap;
    using detail::EMap;
    if (b_shared || batch.empty()) {
        // Contiguous a rows collapse into a single GEMM against shared b.
        ECMap<T> A(a.values().data(), nbatch * n, m);
        ECMap<T> B(b.values().data(), m, p);
        EMap<T> C(ov.data(), nbatch * n, p);
        C.noalias() = A * B;
    } else {
        for (std::int64_t i = 0; i < nbatch; ++i) {
            ECMap<T> A(a.values().data() + (a_shared ? 0 : i * n * m), n, m);
            ECMap<T> B(b.values().data() + i * m * p, m, p);
            EMap<T> C(ov.data() + i * n * p, n, p);
            C.noalias() = A * B;
        }
    }

    Tensor<T> out = detail::make_op<T>(std::move(out_shape), std::move(ov), {&a, &b}, "matmul");
    if (out.requires_grad()) {
        auto an = a.node();
        auto bn = b.node();
        auto* self = out.node().get();
        out.node()->backprop = [an, bn, self, nbatch, n, m, p, a_shared, b_shared]() {
            if (an->requires_grad) an->ensure_grad();
            if (bn->requires_grad) bn->ensure_grad();
            if (an->requires_grad && (b_shared || nbatch == 1)) {
                ECMap<T> G(self->grad.data(), nbatch * n, p);
                ECMap<T> B(bn->values.data(), m, p);
                EMap<T> GA(an->grad.data(), nbatch * n, m);
                GA.noalias() += G * B.transpose();
            }
            if (bn->requires_grad && (b_shared || nbatch == 1)) {
                ECMap<T> G(self->grad.data(), nbatch * n, p);
                ECMap<T> A(an->values.data(), nbatch * n, m);
                EMap<T> GB(bn->grad.data(), m, p);
                GB.noalias() += A.transpose() * G;
            }
            if (!b_shared && nbatch > 1) {
                for (std::int64_t i = 0; i < nbatch; ++i) {
                    ECMap<T> G(self->grad.data() + i * n * p, n, p);
                    if (an->requires_grad) {
                        ECMap<T> B(bn->values.data() + i * m * p, m, p);
                        EMap<T> GA(an->grad.data() + (a_shared ? 0 : i * n * m), n, m);
                        GA.noalias() += G * B.transpose();
                    }
                    if (bn->requires_grad) {
                        ECMap<T> A(an->values.data() + (a_shared ? 0 : i * n * m), n, m);
                        EMap<T> GB(bn->grad.data() + i * m * p, m, p);
                        GB.noalias() += A.transpose() * G;
                    }
                }
            }
        };
    }
    return out;
}

// ---------------------------------------------------------------------------
// Softmax
// ---------------------------------------------------------------------------

template <typename T>
Tensor<T> softmax(const Tensor<T>& x, int axis) {
    if (axis < 0 || axis >= x.rank())
        throw ShapeError("softmax: axis " + std::to_string(axis) + " invalid for shape " +
                         shape_str(x.shape()));
    const std::int64_t alen = x.dim(axis);
    std::int64_t outer = 1, inner = 1;
    for (int i = 0; i < axis; ++i) outer *= x.dim(i);
    for (int i = axis + 1; i < x.rank(); ++i) inner *= x.dim(i);

    std::vector<T> ov(x.values().size());
    const auto& xv = x.values();
    for (std::int64_t o = 0; o < outer; ++o) {
        for (std::int64_t in = 0; in < inner; ++in) {
            const std::int64_t base = o * alen * inner + in;
            T mx = xv[static_cast<std::size_t>(base)];
            for (std::int64_t k = 1; k < alen; ++k)
                mx = std::max(mx, xv[static_cast<std::size_t>(base + k * inner)]);
            T sum = T(0);
            for (std::int64_t k = 0; k < alen; ++k) {
                T e = std::exp(xv[static_cast<std::size_t>(base + k * inner)] - mx);
                ov[static_cast<std::size_t>(base + k * inner)] = e;
                sum += e;
            }
            for (std::int64_t k = 0; k < alen; ++k)
                ov[static_cast<std::size_t>(base + k * inner)] /= sum;
        }
    }

    Tensor<T> out = detail::make_op<T>(x.shape(), std::move(ov), {&x}, "softmax");
    if (out.requires_grad()) {
        auto xn = x.node();
        auto* self = out.node().get();
        out.node()->backprop = [xn, self, outer, alen, inner]() {
            xn->ensure_grad();
            const auto& y = self->values;
            const auto& g = self->grad;
            for (std::int64_t o = 0; o < outer; ++o) {
                for (std::int64_t in = 0; in < inner; ++in) {
                    const std::int64_t base = o * alen * inner + in;
                    T dot = T(0);
                    for (std::int64_t k = 0; k < alen; ++k) {
                        const auto i = static_cast<std::size_t>(base + k * inner);
                        dot += g[i] * y[i];
                    }
                    for (std::int64_t k = 0; k < alen; ++k) {
                        const auto i = static_cast<std::size_t>(base + k * inner);
                        xn->grad[i] += y[i] * (g[i] - dot);
                    }
                }
            }
        };
    }
    return out;
}

// ---------------------------------------------------------------------------
// Shape ops
// ---------------------------------------------------------------------------

template <typename T>
Tensor<T> reshape(const Tensor<T>& x, Shape new_shape) {
    std::int64_t known = 1;
    int infer = -1;
    for (std::size_t i = 0; i < new_shape.size(); ++i) {
        if (new_shape[i] == -1) {
            if (infer >= 0) throw ShapeError("reshape: more than one inferred dimension");
            infer = static_cast<int>(i);
        } else {
            known *= new_shape[i];
        }
    }
    if (infer >= 0) {
        if (known == 0 || x.size() % known != 0)
            throw ShapeError("reshape: cannot infer dimension for " + shape_str(x.shape()) +
                             " -> " + shape_str(new_shape));
        new_shape[static_cast<std::size_t>(infer)] = static_cast<int>(x.size() / known);
    }
    if (numel(new_shape) != x.size())
        throw ShapeError("reshape: element count mismatch " + shape_str(x.shape()) + " -> " +
                         shape_str(new_shape));
    Tensor<T> out = detail::make_op<T>(std::move(new_shape), std::vector<T>(x.values()), {&x},
                                       "reshape");
    if (out.requires_grad()) {
        auto xn = x.node();
        auto* self = out.node().get();
        out.node()->backprop = [xn, self]() {
            xn->ensure_grad();
            for (std::size_t i = 0; i < self->grad.size(); ++i) xn->grad[i] += self->grad[i];
        };
    }
    return out;
}

namespace detail {

// dst[perm-mapped index] accumulation helper shared by forward and backward.
template <typename T, bool Accumulate>
void permute_raw(const std::vector<T>& src, const Shape& src_shape, const std::vector<int>& perm,
                 std::vector<T>& dst) {
    const int r = static_cast<int>(src_shape.size());
    Shape dst_shape(static_cast<std::size_t>(r));
    for (int i = 0; i < r; ++i) dst_shape[static_cast<std::size_t>(i)] = src_shape[static_cast<std::size_t>(perm[static_cast<std::size_t>(i)])];

    std::vector<std::int64_t> src_strides(static_cast<std::size_t>(r), 1);
    for (int i = r - 2; i >= 0; --i)
        src_strides[static_cast<std::size_t>(i)] = src_strides[static_cast<std::size_t>(i + 1)] * src_shape[static_cast<std::size_t>(i + 1)];
    // stride in src for a step along dst axis i
    std::vector<std::int64_t> step(static_cast<std::size_t>(r));
    for (int i = 0; i < r; ++i) step[static_cast<std::size_t>(i)] = src_strides[static_cast<std::size_t>(perm[static_cast<std::size_t>(i)])];

    std::vector<std::int64_t> idx(static_cast<std::size_t>(r), 0);
    const std::int64_t total = numel(src_shape);
    std::int64_t src_off = 0;
    for (std::int64_t flat = 0; flat < total; ++flat) {
        if constexpr (Accumulate)
            dst[static_cast<std::size_t>(flat)] += src[static_cast<std::size_t>(src_off)];
        else
            dst[static_cast<std::size_t>(flat)] = src[static_cast<std::size_t>(src_off)];
        // advance mixed-radix counter over dst shape
        for (int i = r - 1; i >= 0; --i) {
            idx[static_cast<std::size_t>(i)]++;
            src_off += step[static_cast<std::size_t>(i)];
            if (idx[static_cast<std::size_t>(i)] < dst_shape[static_cast<std::size_t>(i)]) break;
            src_off -= step[static_cast<std::size_t>(i)] * dst_shape[static_cast<std::size_t>(i)];
            idx[static_cast<std::size_t>(i)] = 0;
        }
    }
}

}  // namespace detail

template <typename T>
Tensor<T> transpose(const Tensor<T>& x, const std::vector<int>& perm) {
    const int r = x.rank();
    if (static_cast<int>(perm.size()) != r)
        throw ShapeError("transpose: permutation size " + std::to_string(perm.size()) +
                         " does not match rank of " + shape_str(x.shape()));
    std::vector<bool> seen(static_cast<std::size_t>(r), false);
    for (int p : perm) {
        if (p < 0 || p >= r || seen[static_cast<std::size_t>(p)])
            throw ShapeError("transpose: invalid permutation for " + shape_str(x.shape()));
        seen[static_cast<std::size_t>(p)] = true;
    }
    Shape out_shape(static_cast<std::size_t>(r));
    for (int i = 0; i < r; ++i) out_shape[static_cast<std::size_t>(i)] = x.dim(perm[static_cast<std::size_t>(i)]);
    std::vector<T> ov(x.values().size());
    detail::permute_raw<T, false>(x.values(), x.shape(), perm, ov);

    Tensor<T> out = detail::make_op<T>(std::move(out_shape), std::move(ov), {&x}, "transpose");
    if (out.requires_grad()) {
        std::vector<int> inv(perm.size());
        for (std::size_t i = 0; i < perm.size(); ++i) inv[static_cast<std::size_t>(perm[i])] = static_cast<int>(i);
        auto xn = x.node();
        auto* self = out.node().get();
        Shape self_shape = out.shape();
        out.node()->backprop = [xn, self, inv, self_shape]() {
            xn->ensure_grad();
            detail::permute_raw<T, true>(self->grad, self_shape, inv, xn->grad);
        };
    }
    return out;
}

template <typename T>
Tensor<T> slice(const Tensor<T>& x, int axis, int start, int len) {
    if (axis < 0 || axis >= x.rank())
        throw ShapeError("slice: axis " + std::to_string(axis) + " invalid for " + shape_str(x.shape()));
    if (start < 0 || len <= 0 || start + len > x.dim(axis))
        throw ShapeError("slice: range [" + std::to_string(start) + "," +
                         std::to_string(start + len) + ") invalid for axis " + std::to_string(axis) +
                         " of " + shape_str(x.shape()));
    const std::int64_t alen = x.dim(axis);
    std::int64_t outer = 1, inner = 1;
    for (int i = 0; i < axis; ++i) outer *= x.dim(i);
    for (int i = axis + 1; i < x.rank(); ++i) inner *= x.dim(i);

    Shape out_shape = x.shape();
    out_shape[static_cast<std::size_t>(axis)] = len;
    std::vector<T> ov(static_cast<std::size_t>(outer * len * inner));
    for (std::int64_t o = 0; o < outer; ++o) {
        const T* src = x.values().data() + (o * alen + start) * inner;
        std::copy(src, src + len * inner, ov.begin() + o * len * inner);
    }
    Tensor<T> out = detail::make_op<T>(std::move(out_shape), std::move(ov), {&x}, "slice");
    if (out.requires_grad()) {
        auto xn = x.node();
        auto* self = out.node().get();
        out.node()->backprop = [xn, self, outer, inner, alen, start, len]() {
            xn->ensure_grad();
            for (std::int64_t o = 0; o < outer; ++o) {
                const T* g = self->grad.data() + o * len * inner;
                T* dst = xn->grad.data() + (o * alen + start) * inner;
                for (std::int64_t i = 0; i < len * inner; ++i) dst[i] += g[i];
            }
        };
    }
    return out;
}

template <typename T>
Tensor<T> concat(const std::vector<Tensor<T>>& parts, int axis) {
    if (parts.empty()) throw ContractError("concat: no tensors given");
    const int r = parts[0].rank();
    if (axis < 0 || axis >= r)
        throw ShapeError("concat: axis " + std::to_string(axis) + " invalid for " +
                         shape_str(parts[0].shape()));
    int total_axis = 0;
    for (const auto& t : parts) {
        if (t.rank() != r) throw ShapeError("concat: rank mismatch");
        for (int i = 0; i < r; ++i)
            if (i != axis && t.dim(i) != parts[0].dim(i))
                throw ShapeError("concat: shape mismatch " + shape_str(parts[0].shape()) + " vs " +
                                 shape_str(t.shape()));
        total_axis += t.dim(axis);
    }
    Shape out_shape = parts[0].shape();
    out_shape[static_cast<std::size_t>(axis)] = total_axis;
    std::int64_t outer = 1, inner = 1;
    for (int i = 0; i < axis; ++i) outer *= out_shape[static_cast<std::size_t>(i)];
    for (int i = axis + 1; i < r; ++i) inner *= out_shape[static_cast<std::size_t>(i)];

    std::vector<T> ov(static_cast<std::size_t>(outer * total_axis * inner));
    std::int64_t off = 0;
    for (const auto& t : parts) {
        const std::int64_t alen = t.dim(axis);
        for (std::int64_t o = 0; o < outer; ++o) {
            const T* src = t.values().data() + o * alen * inner;
            std::copy(src, src + alen * inner, ov.begin() + (o * total_axis + off) * inner);
        }
        off += alen;
    }

    Tensor<T> out(out_shape, std::move(ov));
    out.named("concat");
    check_finite(out.values(), "concat");
    bool rg = false;
    if (grad_mode_enabled())
        for (const auto& t : parts)
            if (t.requires_grad()) {
                rg = true;
                out.node()->parents.push_back(t.node());
            }
    out.set_requires_grad(rg);
    if (rg) {
        std::vector<std::shared_ptr<TensorNode<T>>> nodes;
        std::vector<std::int64_t> lens;
        for (const auto& t : parts) {
            nodes.push_back(t.node());
            lens.push_back(t.dim(axis));
        }
        auto* self = out.node().get();
        out.node()->backprop = [nodes, lens, self, outer, inner, total_axis]() {
            std::int64_t off2 = 0;
            for (std::size_t k = 0; k < nodes.size(); ++k) {
                auto& nd = nodes[k];
                const std::int64_t alen = lens[k];
                if (nd->requires_grad) {
                    nd->ensure_grad();
                    for (std::int64_t o = 0; o < outer; ++o) {
                        const T* g = self->grad.data() + (o * total_axis + off2) * inner;
                        T* dst = nd->grad.data() + o * alen * inner;
                        for (std::int64_t i = 0; i < alen * inner; ++i) dst[i] += g[i];
                    }
                }
                off2 += alen;
            }
        };
    }
    return out;
}

// Tiles an axis of extent 1 to extent n.
template <typename T>
Tensor<T> broadcast_axis(const Tensor<T>& x, int axis, int n) {
    if (axis < 0 || axis >= x.rank() || x.dim(axis) != 1)
        throw ShapeError("broadcast_axis: axis " + std::to_string(axis) + " of " +
                         shape_str(x.shape()) + " must have extent 1");
    if (n <= 0) throw ShapeError("broadcast_axis: target extent must be positive");
    std::int64_t outer = 1, inner = 1;
    for (int i = 0; i < axis; ++i) outer *= x.dim(i);
    for (int i = axis + 1; i < x.rank(); ++i) inner *= x.dim(i);
    Shape out_shape = x.shape();
    out_shape[static_cast<std::size_t>(axis)] = n;
    std::vector<T> ov(static_cast<std::size_t>(outer * n * inner));
    for (std::int64_t o = 0; o < outer; ++o) {
        const T* src = x.values().data() + o * inner;
        for (std::int64_t k = 0; k < n; ++k)
            std::copy(src, src + inner, ov.begin() + (o * n + k) * inner);
    }
    Tensor<T> out = detail::make_op<T>(std::move(out_shape), std::move(ov), {&x}, "broadcast_axis");
    if (out.requires_grad()) {
        auto xn = x.node();
        auto* self = out.node().get();
        out.node()->backprop = [xn, self, outer, inner, n]() {
            xn->ensure_grad();
            for (std::int64_t o = 0; o < outer; ++o) {
                T* dst = xn->grad.data() + o * inner;
                for (std::int64_t k = 0; k < n; ++k) {
                    const T* g = self->grad.data() + (o * n + k) * inner;
                    for (std::int64_t i = 0; i < inner; ++i) dst[i] += g[i];
                }
            }
        };
    }
    return out;
}

// ---------------------------------------------------------------------------
// Reductions
// ---------------------------------------------------------------------------

namespace detail {

template <typename T>
Tensor<T> reduce_axis(const Tensor<T>& x, int axis, bool keepdim, bool take_mean,
                      const char* name) {
    if (axis < 0 || axis >= x.rank())
        throw ShapeError(std::string(name) + ": axis " + std::to_string(axis) + " invalid for " +
                         shape_str(x.shape()));
    const std::int64_t alen = x.dim(axis);
    std::int64_t outer = 1, inner = 1;
    for (int i = 0; i < axis; ++i) outer *= x.dim(i);
    for (int i = axis + 1; i < x.rank(); ++i) inner *= x.dim(i);

    Shape out_shape;
    for (int i = 0; i < x.rank(); ++i) {
        if (i == axis) {
            if (keepdim) out_shape.push_back(1);
        } else {
            out_shape.push_back(x.dim(i));
        }
    }
    if (out_shape.empty()) out_shape.push_back(1);

    const T norm = take_mean ? T(1) / static_cast<T>(alen) : T(1);
    std::vector<T> ov(static_cast<std::size_t>(outer * inner), T(0));
    const auto& xv = x.values();
    for (std::int64_t o = 0; o < outer; ++o)
        for (std::int64_t k = 0; k < alen; ++k) {
            const T* src = xv.data() + (o * alen + k) * inner;
            T* dst = ov.data() + o * inner;
            for (std::int64_t i = 0; i < inner; ++i) dst[i] += src[i];
        }
    if (take_mean)
        for (auto& v : ov) v *= norm;

    Tensor<T> out = detail::make_op<T>(std::move(out_shape), std::move(ov), {&x}, name);
    if (out.requires_grad()) {
        auto xn = x.node();
        auto* self = out.node().get();
        out.node()->backprop = [xn, self, outer, inner, alen, norm]() {
            xn->ensure_grad();
            for (std::int64_t o = 0; o < outer; ++o)
                for (std::int64_t k = 0; k < alen; ++k) {
                    const T* g = self->grad.data() + o * inner;
                    T* dst = xn->grad.data() + (o * alen + k) * inner;
                    for (std::int64_t i = 0; i < inner; ++i) dst[i] += g[i] * norm;
                }
        };
    }
    return out;
}

}  // namespace detail

template <typename T>
Tensor<T> mean(const Tensor<T>& x, int axis, bool keepdim = false) {
    return detail::reduce_axis(x, axis, keepdim, true, "mean");
}

template <typename T>
Tensor<T> sum(const Tensor<T>& x, int axis, bool keepdim = false) {
    return detail::reduce_axis(x, axis, keepdim, false, "sum");
}

namespace detail {

template <typename T>
Tensor<T> reduce_all(const Tensor<T>& x, bool take_mean, const char* name) {
    const T norm = take_mean ? T(1) / static_cast<T>(x.size()) : T(1);
    T acc = T(0);
    for (T v : x.values()) acc += v;
    acc *= norm;
    Tensor<T> out = detail::make_op<T>({1}, std::vector<T>{acc}, {&x}, name);
    if (out.requires_grad()) {
        auto xn = x.node();
        auto* self = out.node().get();
        out.node()->backprop = [xn, self, norm]() {
            xn->ensure_grad();
            const T g = self->grad[0] * norm;
            for (auto& gv : xn->grad) gv += g;
        };
    }
    return out;
}

}  // namespace detail

template <typename T>
Tensor<T> mean_all(const Tensor<T>& x) {
    return detail::reduce_all(x, true, "mean_all");
}

template <typename T>
Tensor<T> sum_all(const Tensor<T>& x) {
    return detail::reduce_all(x, false, "sum_all");
}

// ---------------------------------------------------------------------------
// Layer normalization over the last axis
// ---------------------------------------------------------------------------

inline constexpr double kLayerNormEps = 1e-5;

template <typename T>
Tensor<T> layer_norm(const Tensor<T>& x, const Tensor<T>& gain, const Tensor<T>& bias) {
    const int d = x.dim(x.rank() - 1);
    if (gain.rank() != 1 || gain.dim(0) != d || bias.rank() != 1 || bias.dim(0) != d)
        throw ShapeError("layer_norm: gain/bias " + shape_str(gain.shape()) + "/" +
                         shape_str(bias.shape()) + " do not match last axis of " +
                         shape_str(x.shape()));
    const std::int64_t rows = x.size() / d;
    const T eps = static_cast<T>(kLayerNormEps);

    std::vector<T> ov(x.values().size());
    std::vector<T> xhat(x.values().size());
    std::vector<T> inv_std(static_cast<std::size_t>(rows));
    const auto& xv = x.values();
    const auto& gv = gain.values();
    const auto& bv = bias.values();
    for (std::int64_t r = 0; r < rows; ++r) {
        const T* row = xv.data() + r * d;
        T mu = T(0);
        for (int j = 0; j < d; ++j) mu += row[j];
        mu /= static_cast<T>(d);
        T var = T(0);
        for (int j = 0; j < d; ++j) {
            T c = row[j] - mu;
            var += c * c;
        }
        var /= static_cast<T>(d);
        const T is = T(1) / std::sqrt(var + eps);
        inv_std[static_cast<std::size_t>(r)] = is;
        for (int j = 0; j < d; ++j) {
            const auto i = static_cast<std::size_t>(r * d + j);
            xhat[i] = (row[j] - mu) * is;
            ov[i] = gv[static_cast<std::size_t>(j)] * xhat[i] + bv[static_cast<std::size_t>(j)];
        }
    }

    Tensor<T> out = detail::make_op<T>(x.shape(), std::move(ov), {&x, &gain, &bias}, "layer_norm");
    if (out.requires_grad()) {
        auto xn = x.node();
        auto gn = gain.node();
        auto bn = bias.node();
        auto* self = out.node().get();
        out.node()->backprop = [xn, gn, bn, self, rows, d, xhat = std::move(xhat),
                                inv_std = std::move(inv_std)]() {
            const auto& g = self->grad;
            if (gn->requires_grad) {
                gn->ensure_grad();
                for (std::int64_t r = 0; r < rows; ++r)
                    for (int j = 0; j < d; ++j)
                        gn->grad[static_cast<std::size_t>(j)] +=
                            g[static_cast<std::size_t>(r * d + j)] * xhat[static_cast<std::size_t>(r * d + j)];
            }
            if (bn->requires_grad) {
                bn->ensure_grad();
                for (std::int64_t r = 0; r < rows; ++r)
                    for (int j = 0; j < d; ++j)
                        bn->grad[static_cast<std::size_t>(j)] += g[static_cast<std::size_t>(r * d + j)];
            }
            if (xn->requires_grad) {
                xn->ensure_grad();
                for (std::int64_t r = 0; r < rows; ++r) {
                    T mean_h = T(0), mean_hx = T(0);
                    for (int j = 0; j < d; ++j) {
                        const auto i = static_cast<std::size_t>(r * d + j);
                        const T h = gn->values[static_cast<std::size_t>(j)] * g[i];
                        mean_h += h;
                        mean_hx += h * xhat[i];
                    }
                    mean_h /= static_cast<T>(d);
                    mean_hx /= static_cast<T>(d);
                    const T is = inv_std[static_cast<std::size_t>(r)];
                    for (int j = 0; j < d; ++j) {
                        const auto i = static_cast<std::size_t>(r * d + j);
                        const T h = gn->values[static_cast<std::size_t>(j)] * g[i];
                        xn->grad[i] += is * (h - mean_h - xhat[i] * mean_hx);
                    }
                }
            }
        };
    }
    return out;
}

// ---------------------------------------------------------------------------
// Backward pass
// ---------------------------------------------------------------------------

// Reverse-mode sweep from a scalar loss. Visits each recorded node exactly
// once in reverse topological order; gradients accumulate across fan-out.
template <typename T>
void backward(const Tensor<T>& loss) {
    if (loss.size() != 1)
        throw ContractError("backward: loss must be scalar, got " + shape_str(loss.shape()));
    if (!loss.requires_grad())
        throw ContractError("backward: loss does not require grad (no recorded graph)");

    // Iterative post-order DFS.
    std::vector<TensorNode<T>*> order;
    std::vector<std::pair<TensorNode<T>*, std::size_t>> stack;
    std::vector<const TensorNode<T>*> visited;
    auto is_visited = [&](const TensorNode<T>* n) {
        return std::find(visited.begin(), visited.end(), n) != visited.end();
    };
    stack.emplace_back(loss.node().get(), 0);
    visited.push_back(loss.node().get());
    while (!stack.empty()) {
        auto& [node, child] = stack.back();
        if (child < node->parents.size()) {
            TensorNode<T>* p = node->parents[child].get();
            ++child;
            if (p->requires_grad && !is_visited(p)) {
                visited.push_back(p);
                stack.emplace_back(p, 0);
            }
        } else {
            order.push_back(node);
            stack.pop_back();
        }
    }

    loss.node()->ensure_grad();
    loss.node()->grad[0] = T(1);
    for (auto it = order.rbegin(); it != order.rend(); ++it) {
        TensorNode<T>* node = *it;
        node->ensure_grad();
        check_finite(node->grad, node->label.empty() ? "unnamed" : node->label + " (grad)");
        if (node->backprop) node->backprop();
    }
}

// ---------------------------------------------------------------------------
// Adam optimizer
// ---------------------------------------------------------------------------

template <typename T>
struct OptimizerState {
    T lr = T(1e-3);
    T beta1 = T(0.9);
    T beta2 = T(0.999);
    T eps = T(1e-8);
    std::int64_t step = 0;
    std::vector<std::vector<T>> m;
    std::vector<std::vector<T>> v;

    bool initialized() const { return !m.empty(); }

    void init(const std::vector<Tensor<T>>& params) {
        m.clear();
        v.clear();
        for (const auto& p : params) {
            m.emplace_back(static_cast<std::size_t>(p.size()), T(0));
            v.emplace_back(static_cast<std::size_t>(p.size()), T(0));
        }
        step = 0;
    }
};

// Bias-corrected adaptive-moment update. Parameters without a populated
// gradient are treated as zero-gradient.
template <typename T>
void optimizer_step(std::vector<Tensor<T>>& params, OptimizerState<T>& state) {
    if (!state.initialized()) state.init(params);
    if (state.m.size() != params.size())
        throw ContractError("optimizer_step: state tracks " + std::to_string(state.m.size()) +
                            " parameters, got " + std::to_string(params.size()));
    for (std::size_t i = 0; i < params.size(); ++i)
        if (state.m[i].size() != params[i].values().size())
            throw ContractError("optimizer_step: moment shape mismatch for parameter '" +
                                params[i].label() + "'");

    state.step += 1;
    const T bc1 = T(1) - std::pow(state.beta1, static_cast<T>(state.step));
    const T bc2 = T(1) - std::pow(state.beta2, static_cast<T>(state.step));
    for (std::size_t i = 0; i < params.size(); ++i) {
        auto& p = params[i].values_mut();
        auto& m = state.m[i];
        auto& v = state.v[i];
        const bool has_g = params[i].has_grad();
        const auto* g = has_g ? params[i].grad().data() : nullptr;
        for (std::size_t j = 0; j < p.size(); ++j) {
            const T gj = has_g ? g[j] : T(0);
            m[j] = state.beta1 * m[j] + (T(1) - state.beta1) * gj;
            v[j] = state.beta2 * v[j] + (T(1) - state.beta2) * gj * gj;
            const T mhat = m[j] / bc1;
            const T vhat = v[j] / bc2;
            p[j] -= state.lr * mhat / (std::sqrt(vhat) + state.eps);
        }
    }
}

// Convenience operators.
template <typename T>
Tensor<T> operator+(const Tensor<T>& a, const Tensor<T>& b) {
    return add(a, b);
}
template <typename T>
Tensor<T> operator-(const Tensor<T>& a, const Tensor<T>& b) {
    return sub(a, b);
}
template <typename T>
Tensor<T> operator*(const Tensor<T>& a, const Tensor<T>& b) {
    return mul(a, b);
}
template <typename T>
Tensor<T> operator*(const Tensor<T>& a, T c) {
    return scale(a, c);
}
template <typename T>
Tensor<T> operator*(T c, const Tensor<T>& a) {
    return scale(a, c);
}

}  // namespace footbots
