#pragma once

// Dense row-major tensors with tape-based reverse-mode differentiation.
//
// Operations are recorded on the thread's active Tape (see TapeScope) when
// at least one input requires a gradient. backward() replays the records in
// exact reverse order. Without an active tape, ops run forward only.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <functional>
#include <limits>
#include <memory>
#include <numeric>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "moonbeam/errors.hpp"

namespace moonbeam {

enum class DType { f32, f64 };

template <class T>
constexpr DType dtype_of() {
    static_assert(std::is_same_v<T, float> || std::is_same_v<T, double>, "tensors hold float or double");
    return std::is_same_v<T, float> ? DType::f32 : DType::f64;
}

inline std::string_view dtype_name(DType d) { return d == DType::f32 ? "f32" : "f64"; }

using Shape = std::vector<std::size_t>;

inline std::size_t numel(const Shape& s) {
    return std::accumulate(s.begin(), s.end(), std::size_t{1}, std::multiplies<>());
}

inline std::string shape_str(const Shape& s) {
    std::string out = "[";
    for (std::size_t i = 0; i < s.size(); ++i) {
        if (i) out += ", ";
        out += std::to_string(s[i]);
    }
    return out + "]";
}

template <class T>
class Tape;

namespace detail {

template <class T>
struct TapeState;

template <class T>
struct Node {
    Shape shape;
    std::vector<T> data;
    std::vector<T> grad; // empty until a gradient reaches this node
    bool requires_grad = false;
    std::weak_ptr<TapeState<T>> tape;
    std::size_t tape_index = 0;

    bool on_tape() const { return !tape.expired(); }

    std::vector<T>& ensure_grad() {
        if (grad.empty()) grad.assign(data.size(), T{0});
        return grad;
    }
};

template <class T>
struct Record {
    std::shared_ptr<Node<T>> output;
    std::vector<std::shared_ptr<Node<T>>> inputs;
    std::function<void()> backward;
};

template <class T>
struct TapeState {
    std::vector<Record<T>> records;
};

template <class T>
inline thread_local std::shared_ptr<TapeState<T>> active_tape;

} // namespace detail

template <class T>
class Tensor {
public:
    using value_type = T;

    Tensor() = default;

    static Tensor zeros(Shape shape, bool requires_grad = false) {
        auto n = std::make_shared<detail::Node<T>>();
        n->data.assign(moonbeam::numel(shape), T{0});
        n->shape = std::move(shape);
        n->requires_grad = requires_grad;
        return Tensor(std::move(n));
    }

    static Tensor full(Shape shape, T value, bool requires_grad = false) {
        Tensor t = zeros(std::move(shape), requires_grad);
        std::fill(t.n_->data.begin(), t.n_->data.end(), value);
        return t;
    }

    static Tensor from(Shape shape, std::vector<T> data, bool requires_grad = false) {
        if (data.size() != moonbeam::numel(shape)) {
            throw ShapeError("data length " + std::to_string(data.size()) + " does not match shape " +
                             shape_str(shape));
        }
        auto n = std::make_shared<detail::Node<T>>();
        n->shape = std::move(shape);
        n->data = std::move(data);
        n->requires_grad = requires_grad;
        return Tensor(std::move(n));
    }

    static Tensor scalar(T v, bool requires_grad = false) { return from({1}, {v}, requires_grad); }

    bool defined() const { return static_cast<bool>(n_); }
    const Shape& shape() const { return n_->shape; }
    std::size_t rank() const { return n_->shape.size(); }
    std::size_t dim(std::ptrdiff_t i) const {
        if (i < 0) i += static_cast<std::ptrdiff_t>(rank());
        return n_->shape.at(static_cast<std::size_t>(i));
    }
    std::size_t numel() const { return n_->data.size(); }
    static constexpr DType dtype() { return dtype_of<T>(); }

    std::span<T> data() { return n_->data; }
    std::span<const T> data() const { return n_->data; }
    std::vector<T>& values() { return n_->data; }
    const std::vector<T>& values() const { return n_->data; }
    T item() const {
        if (numel() != 1) throw ShapeError("item() on tensor of shape " + shape_str(shape()));
        return n_->data[0];
    }
    T operator[](std::size_t i) const { return n_->data[i]; }

    bool requires_grad() const { return n_->requires_grad; }
    void set_requires_grad(bool r) { n_->requires_grad = r; }
    bool has_grad() const { return !n_->grad.empty(); }
    // Gradient values; all zeros if nothing has been accumulated yet.
    std::vector<T> grad() const { return has_grad() ? n_->grad : std::vector<T>(numel(), T{0}); }
    std::vector<T>& mutable_grad() { return n_->ensure_grad(); }
    void zero_grad() { n_->grad.clear(); }

    // Value copy that is not connected to any tape.
    Tensor detach() const { return from(shape(), n_->data, false); }

    detail::Node<T>* node() const { return n_.get(); }
    const std::shared_ptr<detail::Node<T>>& handle() const { return n_; }

    explicit Tensor(std::shared_ptr<detail::Node<T>> n) : n_(std::move(n)) {}

private:
    std::shared_ptr<detail::Node<T>> n_;
};

// Owns the records of one forward pass. Install it with TapeScope.
template <class T>
class Tape {
public:
    Tape() : state_(std::make_shared<detail::TapeState<T>>()) {}

    std::size_t size() const { return state_->records.size(); }
    void clear() { state_->records.clear(); }

    const std::shared_ptr<detail::TapeState<T>>& state() const { return state_; }

private:
    std::shared_ptr<detail::TapeState<T>> state_;
};

template <class T>
class TapeScope {
public:
    explicit TapeScope(Tape<T>& tape) : previous_(detail::active_tape<T>) { detail::active_tape<T> = tape.state(); }
    ~TapeScope() { detail::active_tape<T> = previous_; }
    TapeScope(const TapeScope&) = delete;
    TapeScope& operator=(const TapeScope&) = delete;

private:
    std::shared_ptr<detail::TapeState<T>> previous_;
};

// Runs forward-only inside its extent even if a tape is installed.
template <class T>
class NoGradScope {
public:
    NoGradScope() : previous_(detail::active_tape<T>) { detail::active_tape<T>.reset(); }
    ~NoGradScope() { detail::active_tape<T> = previous_; }
    NoGradScope(const NoGradScope&) = delete;
    NoGradScope& operator=(const NoGradScope&) = delete;

private:
    std::shared_ptr<detail::TapeState<T>> previous_;
};

namespace detail {

template <class T>
using NodePtr = std::shared_ptr<Node<T>>;

template <class T>
bool wants_grad(std::initializer_list<const Tensor<T>*> inputs) {
    if (!active_tape<T>) return false;
    for (const Tensor<T>* t : inputs) {
        if (t->requires_grad()) return true;
    }
    return false;
}

// Registers `out` as produced by `inputs`; `backward` reads out->grad and
// accumulates into the inputs' grads.
template <class T>
void record(Tensor<T>& out, std::vector<NodePtr<T>> inputs, std::function<void()> backward) {
    auto& state = active_tape<T>;
    out.set_requires_grad(true);
    out.node()->tape = state;
    out.node()->tape_index = state->records.size();
    state->records.push_back({out.handle(), std::move(inputs), std::move(backward)});
}

inline void check_same_shape(const Shape& a, const Shape& b, std::string_view op) {
    if (a != b) throw ShapeError(std::string(op) + ": shape mismatch " + shape_str(a) + " vs " + shape_str(b));
}

// b broadcasts over a iff b's shape is a trailing suffix of a's shape.
inline std::size_t suffix_period(const Shape& a, const Shape& b, std::string_view op) {
    if (b.size() > a.size() || !std::equal(b.rbegin(), b.rend(), a.rbegin())) {
        throw ShapeError(std::string(op) + ": shape mismatch " + shape_str(a) + " vs " + shape_str(b) +
                         " (only leading-batch expansion is supported)");
    }
    return numel(b);
}

inline std::size_t normalize_axis(std::ptrdiff_t axis, std::size_t rank, std::string_view op) {
    if (axis < 0) axis += static_cast<std::ptrdiff_t>(rank);
    if (axis < 0 || static_cast<std::size_t>(axis) >= rank) {
        throw ShapeError(std::string(op) + ": axis out of range for rank " + std::to_string(rank));
    }
    return static_cast<std::size_t>(axis);
}

// (outer, axis length, inner) decomposition around an axis.
struct AxisSplit {
    std::size_t outer, len, inner;
};

inline AxisSplit split_at(const Shape& s, std::size_t axis) {
    AxisSplit r{1, s[axis], 1};
    for (std::size_t i = 0; i < axis; ++i) r.outer *= s[i];
    for (std::size_t i = axis + 1; i < s.size(); ++i) r.inner *= s[i];
    return r;
}

} // namespace detail

// Reverse pass from a scalar loss. Gradients of leaves accumulate across
// calls; intermediate gradients are reset on every call.
template <class T>
void backward(const Tensor<T>& loss) {
    auto* n = loss.node();
    if (!n) throw InvariantError("backward on undefined tensor");
    if (loss.numel() != 1) throw ShapeError("backward requires a scalar loss, got " + shape_str(loss.shape()));
    auto state = n->tape.lock();
    if (!state) throw InvariantError("backward on a tensor that is not on a live tape");
    auto& records = state->records;
    const std::size_t last = n->tape_index;
    for (std::size_t i = 0; i <= last; ++i) records[i].output->grad.clear();
    n->ensure_grad()[0] = T{1};
    for (std::size_t i = last + 1; i-- > 0;) {
        if (!records[i].output->grad.empty()) records[i].backward();
    }
}

// ---------------------------------------------------------------------------
// Elementwise

namespace detail {

template <class T, class Fwd, class Da, class Db>
Tensor<T> binary(const Tensor<T>& a, const Tensor<T>& b, std::string_view name, Fwd fwd, Da da, Db db) {
    const std::size_t period = suffix_period(a.shape(), b.shape(), name);
    Tensor<T> out = Tensor<T>::zeros(a.shape());
    const auto& av = a.values();
    const auto& bv = b.values();
    auto& ov = out.values();
    for (std::size_t i = 0; i < ov.size(); ++i) ov[i] = fwd(av[i], bv[i % period]);
    if (wants_grad({&a, &b})) {
        NodePtr<T> an = a.handle(), bn = b.handle(), on = out.handle();
        record(out, {an, bn}, [an, bn, on, period, da, db] {
            const auto& g = on->grad;
            if (an->requires_grad) {
                auto& ga = an->ensure_grad();
                for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * da(an->data[i], bn->data[i % period]);
            }
            if (bn->requires_grad) {
                auto& gb = bn->ensure_grad();
                for (std::size_t i = 0; i < g.size(); ++i) {
                    gb[i % period] += g[i] * db(an->data[i], bn->data[i % period]);
                }
            }
        });
    }
    return out;
}

template <class T, class Fwd, class Deriv>
Tensor<T> unary(const Tensor<T>& a, Fwd fwd, Deriv deriv) {
    Tensor<T> out = Tensor<T>::zeros(a.shape());
    const auto& av = a.values();
    auto& ov = out.values();
    for (std::size_t i = 0; i < ov.size(); ++i) ov[i] = fwd(av[i]);
    if (wants_grad({&a})) {
        NodePtr<T> an = a.handle(), on = out.handle();
        // deriv(x, y) receives input and output values.
        record(out, {an}, [an, on, deriv] {
            auto& ga = an->ensure_grad();
            for (std::size_t i = 0; i < ga.size(); ++i) ga[i] += on->grad[i] * deriv(an->data[i], on->data[i]);
        });
    }
    return out;
}

} // namespace detail

template <class T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b) {
    return detail::binary(
        a, b, "add", [](T x, T y) { return x + y; }, [](T, T) { return T{1}; }, [](T, T) { return T{1}; });
}

template <class T>
Tensor<T> sub(const Tensor<T>& a, const Tensor<T>& b) {
    return detail::binary(
        a, b, "sub", [](T x, T y) { return x - y; }, [](T, T) { return T{1}; }, [](T, T) { return T{-1}; });
}

template <class T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b) {
    return detail::binary(
        a, b, "mul", [](T x, T y) { return x * y; }, [](T, T y) { return y; }, [](T x, T) { return x; });
}

template <class T>
Tensor<T> scale(const Tensor<T>& a, T s) {
    return detail::unary(a, [s](T x) { return x * s; }, [s](T, T) { return s; });
}

template <class T>
Tensor<T> sigmoid(const Tensor<T>& a) {
    return detail::unary(
        a, [](T x) { return T{1} / (T{1} + std::exp(-x)); }, [](T, T y) { return y * (T{1} - y); });
}

template <class T>
Tensor<T> tanh(const Tensor<T>& a) {
    return detail::unary(a, [](T x) { return std::tanh(x); }, [](T, T y) { return T{1} - y * y; });
}

template <class T>
Tensor<T> silu(const Tensor<T>& a) {
    return detail::unary(
        a, [](T x) { return x / (T{1} + std::exp(-x)); },
        [](T x, T) {
            const T s = T{1} / (T{1} + std::exp(-x));
            return s * (T{1} + x * (T{1} - s));
        });
}

// ---------------------------------------------------------------------------
// Reductions

template <class T>
Tensor<T> sum(const Tensor<T>& a) {
    T s{0};
    for (T v : a.values()) s += v;
    Tensor<T> out = Tensor<T>::scalar(s);
    if (detail::wants_grad({&a})) {
        detail::NodePtr<T> an = a.handle(), on = out.handle();
        detail::record(out, {an}, [an, on] {
            auto& ga = an->ensure_grad();
            for (auto& g : ga) g += on->grad[0];
        });
    }
    return out;
}

template <class T>
Tensor<T> mean(const Tensor<T>& a) {
    return scale(sum(a), T{1} / static_cast<T>(a.numel()));
}

// ---------------------------------------------------------------------------
// Shape manipulation

template <class T>
Tensor<T> reshape(const Tensor<T>& a, Shape shape) {
    if (numel(shape) != a.numel()) {
        throw ShapeError("reshape: cannot view " + shape_str(a.shape()) + " as " + shape_str(shape));
    }
    Tensor<T> out = Tensor<T>::from(std::move(shape), a.values());
    if (detail::wants_grad({&a})) {
        detail::NodePtr<T> an = a.handle(), on = out.handle();
        detail::record(out, {an}, [an, on] {
            auto& ga = an->ensure_grad();
            for (std::size_t i = 0; i < ga.size(); ++i) ga[i] += on->grad[i];
        });
    }
    return out;
}

template <class T>
Tensor<T> permute(const Tensor<T>& a, const std::vector<std::size_t>& perm) {
    const std::size_t r = a.rank();
    if (perm.size() != r) throw ShapeError("permute: permutation rank does not match " + shape_str(a.shape()));
    std::vector<bool> seen(r, false);
    for (std::size_t p : perm) {
        if (p >= r || seen[p]) throw ShapeError("permute: invalid permutation");
        seen[p] = true;
    }
    Shape out_shape(r);
    for (std::size_t i = 0; i < r; ++i) out_shape[i] = a.dim(static_cast<std::ptrdiff_t>(perm[i]));
    std::vector<std::size_t> in_stride(r, 1);
    for (std::size_t i = r - 1; i-- > 0;) in_stride[i] = in_stride[i + 1] * a.dim(static_cast<std::ptrdiff_t>(i + 1));
    // Source offset for every destination element.
    std::vector<std::size_t> src(a.numel());
    std::vector<std::size_t> idx(r, 0);
    for (std::size_t flat = 0; flat < src.size(); ++flat) {
        std::size_t off = 0;
        for (std::size_t i = 0; i < r; ++i) off += idx[i] * in_stride[perm[i]];
        src[flat] = off;
        for (std::size_t i = r; i-- > 0;) {
            if (++idx[i] < out_shape[i]) break;
            idx[i] = 0;
        }
    }
    Tensor<T> out = Tensor<T>::zeros(out_shape);
    auto& ov = out.values();
    const auto& av = a.values();
    for (std::size_t i = 0; i < src.size(); ++i) ov[i] = av[src[i]];
    if (detail::wants_grad({&a})) {
        detail::NodePtr<T> an = a.handle(), on = out.handle();
        detail::record(out, {an}, [an, on, src = std::move(src)] {
            auto& ga = an->ensure_grad();
            for (std::size_t i = 0; i < src.size(); ++i) ga[src[i]] += on->grad[i];
        });
    }
    return out;
}

// Swaps the last two axes.
template <class T>
Tensor<T> transpose(const Tensor<T>& a) {
    if (a.rank() < 2) throw ShapeError("transpose: needs rank >= 2, got " + shape_str(a.shape()));
    std::vector<std::size_t> perm(a.rank());
    std::iota(perm.begin(), perm.end(), std::size_t{0});
    std::swap(perm[a.rank() - 1], perm[a.rank() - 2]);
    return permute(a, perm);
}

template <class T>
Tensor<T> concat(const std::vector<Tensor<T>>& parts, std::ptrdiff_t axis) {
    if (parts.empty()) throw ShapeError("concat: no inputs");
    const std::size_t ax = detail::normalize_axis(axis, parts[0].rank(), "concat");
    Shape out_shape = parts[0].shape();
    out_shape[ax] = 0;
    for (const auto& p : parts) {
        Shape s = p.shape(), ref = parts[0].shape();
        if (s.size() != ref.size()) throw ShapeError("concat: rank mismatch " + shape_str(ref) + " vs " + shape_str(s));
        s[ax] = ref[ax] = 0;
        if (s != ref) throw ShapeError("concat: shape mismatch " + shape_str(parts[0].shape()) + " vs " + shape_str(p.shape()));
        out_shape[ax] += p.dim(static_cast<std::ptrdiff_t>(ax));
    }
    const auto outer = detail::split_at(out_shape, ax).outer;
    const auto inner = detail::split_at(out_shape, ax).inner;
    Tensor<T> out = Tensor<T>::zeros(out_shape);
    auto& ov = out.values();
    const std::size_t out_row = out_shape[ax] * inner;
    std::size_t col = 0;
    std::vector<std::size_t> cols;
    for (const auto& p : parts) {
        const std::size_t w = p.dim(static_cast<std::ptrdiff_t>(ax)) * inner;
        for (std::size_t o = 0; o < outer; ++o) {
            std::copy_n(p.values().begin() + static_cast<std::ptrdiff_t>(o * w), w,
                        ov.begin() + static_cast<std::ptrdiff_t>(o * out_row + col));
        }
        cols.push_back(col);
        col += w;
    }
    bool any = false;
    for (const auto& p : parts) any = any || detail::wants_grad({&p});
    if (any) {
        std::vector<detail::NodePtr<T>> ins;
        for (const auto& p : parts) ins.push_back(p.handle());
        detail::NodePtr<T> on = out.handle();
        detail::record(out, ins, [ins, on, cols, outer, out_row] {
            for (std::size_t k = 0; k < ins.size(); ++k) {
                if (!ins[k]->requires_grad) continue;
                auto& g = ins[k]->ensure_grad();
                const std::size_t w = g.size() / outer;
                for (std::size_t o = 0; o < outer; ++o) {
                    for (std::size_t j = 0; j < w; ++j) g[o * w + j] += on->grad[o * out_row + cols[k] + j];
                }
            }
        });
    }
    return out;
}

template <class T>
std::vector<Tensor<T>> split(const Tensor<T>& a, std::ptrdiff_t axis, const std::vector<std::size_t>& sizes) {
    const std::size_t ax = detail::normalize_axis(axis, a.rank(), "split");
    if (std::accumulate(sizes.begin(), sizes.end(), std::size_t{0}) != a.dim(static_cast<std::ptrdiff_t>(ax))) {
        throw ShapeError("split: sizes do not sum to axis length of " + shape_str(a.shape()));
    }
    const auto [outer, len, inner] = detail::split_at(a.shape(), ax);
    std::vector<Tensor<T>> outs;
    std::size_t start = 0;
    for (std::size_t sz : sizes) {
        Shape s = a.shape();
        s[ax] = sz;
        Tensor<T> out = Tensor<T>::zeros(s);
        auto& ov = out.values();
        const std::size_t w = sz * inner, row = len * inner, col = start * inner;
        for (std::size_t o = 0; o < outer; ++o) {
            std::copy_n(a.values().begin() + static_cast<std::ptrdiff_t>(o * row + col), w,
                        ov.begin() + static_cast<std::ptrdiff_t>(o * w));
        }
        if (detail::wants_grad({&a})) {
            detail::NodePtr<T> an = a.handle(), on = out.handle();
            detail::record(out, {an}, [an, on, w, row, col, outer = outer] {
                auto& g = an->ensure_grad();
                for (std::size_t o = 0; o < outer; ++o) {
                    for (std::size_t j = 0; j < w; ++j) g[o * row + col + j] += on->grad[o * w + j];
                }
            });
        }
        outs.push_back(std::move(out));
        start += sz;
    }
    return outs;
}

// Gathers slices along `axis` in the given order (indices may repeat).
template <class T>
Tensor<T> gather(const Tensor<T>& a, std::ptrdiff_t axis, const std::vector<std::size_t>& indices) {
    const std::size_t ax = detail::normalize_axis(axis, a.rank(), "gather");
    const auto [outer, len, inner] = detail::split_at(a.shape(), ax);
    for (std::size_t i : indices) {
        if (i >= len) {
            throw RangeError("gather: index " + std::to_string(i) + " out of range for axis length " +
                             std::to_string(len));
        }
    }
    Shape s = a.shape();
    s[ax] = indices.size();
    Tensor<T> out = Tensor<T>::zeros(s);
    auto& ov = out.values();
    const auto& av = a.values();
    const std::size_t n = indices.size();
    for (std::size_t o = 0; o < outer; ++o) {
        for (std::size_t k = 0; k < n; ++k) {
            std::copy_n(av.begin() + static_cast<std::ptrdiff_t>((o * len + indices[k]) * inner), inner,
                        ov.begin() + static_cast<std::ptrdiff_t>((o * n + k) * inner));
        }
    }
    if (detail::wants_grad({&a})) {
        detail::NodePtr<T> an = a.handle(), on = out.handle();
        detail::record(out, {an}, [an, on, indices, outer = outer, len = len, inner = inner] {
            auto& g = an->ensure_grad();
            const std::size_t n = indices.size();
            for (std::size_t o = 0; o < outer; ++o) {
                for (std::size_t k = 0; k < n; ++k) {
                    const std::size_t src = (o * len + indices[k]) * inner, dst = (o * n + k) * inner;
                    for (std::size_t j = 0; j < inner; ++j) g[src + j] += on->grad[dst + j];
                }
            }
        });
    }
    return out;
}

// Row lookup into a [vocab, width] table.
template <class T>
Tensor<T> embedding(const Tensor<T>& table, const std::vector<std::size_t>& ids) {
    if (table.rank() != 2) throw ShapeError("embedding: table must be rank 2, got " + shape_str(table.shape()));
    return gather(table, 0, ids);
}

// ---------------------------------------------------------------------------
// Linear algebra

// a: [..., m, k]; b: [k, n] (shared across the batch) or [..., k, n].
template <class T>
Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b) {
    if (a.rank() < 2 || b.rank() < 2) {
        throw ShapeError("matmul: operands need rank >= 2, got " + shape_str(a.shape()) + " and " + shape_str(b.shape()));
    }
    const std::size_t m = a.dim(-2), k = a.dim(-1), kb = b.dim(-2), n = b.dim(-1);
    const bool shared = b.rank() == 2;
    Shape batch_a(a.shape().begin(), a.shape().end() - 2);
    Shape batch_b(b.shape().begin(), b.shape().end() - 2);
    if (k != kb || (!shared && batch_a != batch_b)) {
        throw ShapeError("matmul: shape mismatch " + shape_str(a.shape()) + " x " + shape_str(b.shape()));
    }
    const std::size_t batch = numel(batch_a);
    Shape out_shape = batch_a;
    out_shape.push_back(m);
    out_shape.push_back(n);
    Tensor<T> out = Tensor<T>::zeros(out_shape);
    const T* A = a.values().data();
    const T* B = b.values().data();
    T* C = out.values().data();
    for (std::size_t z = 0; z < batch; ++z) {
        const T* Az = A + z * m * k;
        const T* Bz = shared ? B : B + z * k * n;
        T* Cz = C + z * m * n;
        for (std::size_t i = 0; i < m; ++i) {
            T* crow = Cz + i * n;
            for (std::size_t p = 0; p < k; ++p) {
                const T av = Az[i * k + p];
                const T* brow = Bz + p * n;
                for (std::size_t j = 0; j < n; ++j) crow[j] += av * brow[j];
            }
        }
    }
    if (detail::wants_grad({&a, &b})) {
        detail::NodePtr<T> an = a.handle(), bn = b.handle(), on = out.handle();
        detail::record(out, {an, bn}, [an, bn, on, batch, m, k, n, shared] {
            const T* G = on->grad.data();
            if (an->requires_grad) {
                T* GA = an->ensure_grad().data();
                const T* B = bn->data.data();
                for (std::size_t z = 0; z < batch; ++z) {
                    const T* Bz = shared ? B : B + z * k * n;
                    for (std::size_t i = 0; i < m; ++i) {
                        const T* grow = G + (z * m + i) * n;
                        for (std::size_t p = 0; p < k; ++p) {
                            const T* brow = Bz + p * n;
                            T acc{0};
                            for (std::size_t j = 0; j < n; ++j) acc += grow[j] * brow[j];
                            GA[(z * m + i) * k + p] += acc;
                        }
                    }
                }
            }
            if (bn->requires_grad) {
                T* GB = bn->ensure_grad().data();
                const T* A = an->data.data();
                for (std::size_t z = 0; z < batch; ++z) {
                    T* GBz = shared ? GB : GB + z * k * n;
                    for (std::size_t i = 0; i < m; ++i) {
                        const T* grow = G + (z * m + i) * n;
                        for (std::size_t p = 0; p < k; ++p) {
                            const T av = A[(z * m + i) * k + p];
                            T* gbrow = GBz + p * n;
                            for (std::size_t j = 0; j < n; ++j) gbrow[j] += av * grow[j];
                        }
                    }
                }
            }
        });
    }
    return out;
}

// ---------------------------------------------------------------------------
// Normalization and probability

template <class T>
Tensor<T> softmax(const Tensor<T>& a, std::ptrdiff_t axis = -1) {
    const std::size_t ax = detail::normalize_axis(axis, a.rank(), "softmax");
    const auto [outer, len, inner] = detail::split_at(a.shape(), ax);
    Tensor<T> out = Tensor<T>::zeros(a.shape());
    const auto& av = a.values();
    auto& ov = out.values();
    for (std::size_t o = 0; o < outer; ++o) {
        for (std::size_t in = 0; in < inner; ++in) {
            const std::size_t base = o * len * inner + in;
            T mx = -std::numeric_limits<T>::infinity();
            for (std::size_t i = 0; i < len; ++i) mx = std::max(mx, av[base + i * inner]);
            T s{0};
            for (std::size_t i = 0; i < len; ++i) s += (ov[base + i * inner] = std::exp(av[base + i * inner] - mx));
            for (std::size_t i = 0; i < len; ++i) ov[base + i * inner] /= s;
        }
    }
    if (detail::wants_grad({&a})) {
        detail::NodePtr<T> an = a.handle(), on = out.handle();
        detail::record(out, {an}, [an, on, outer = outer, len = len, inner = inner] {
            auto& ga = an->ensure_grad();
            const auto& y = on->data;
            const auto& g = on->grad;
            for (std::size_t o = 0; o < outer; ++o) {
                for (std::size_t in = 0; in < inner; ++in) {
                    const std::size_t base = o * len * inner + in;
                    T dot{0};
                    for (std::size_t i = 0; i < len; ++i) dot += g[base + i * inner] * y[base + i * inner];
                    for (std::size_t i = 0; i < len; ++i) {
                        const std::size_t p = base + i * inner;
                        ga[p] += y[p] * (g[p] - dot);
                    }
                }
            }
        });
    }
    return out;
}

// Attention mask shared by every head: allowed[b][q][k] for scores shaped
// [B, H, Sq, Sk].
struct AttentionMask {
    std::size_t batch = 0, queries = 0, keys = 0;
    std::vector<std::uint8_t> allowed;

    bool at(std::size_t b, std::size_t q, std::size_t k) const { return allowed[(b * queries + q) * keys + k] != 0; }
};

// Softmax over the last axis restricted to allowed keys; masked entries get
// probability exactly zero. Every query must allow at least one key.
template <class T>
Tensor<T> masked_softmax(const Tensor<T>& scores, std::shared_ptr<const AttentionMask> mask) {
    if (scores.rank() != 4 || scores.dim(0) != mask->batch || scores.dim(2) != mask->queries ||
        scores.dim(3) != mask->keys) {
        throw ShapeError("masked_softmax: scores " + shape_str(scores.shape()) + " vs mask " +
                         shape_str({mask->batch, mask->queries, mask->keys}));
    }
    const std::size_t B = scores.dim(0), H = scores.dim(1), Q = scores.dim(2), K = scores.dim(3);
    Tensor<T> out = Tensor<T>::zeros(scores.shape());
    const auto& sv = scores.values();
    auto& ov = out.values();
    for (std::size_t b = 0; b < B; ++b) {
        for (std::size_t h = 0; h < H; ++h) {
            for (std::size_t q = 0; q < Q; ++q) {
                const std::size_t row = ((b * H + h) * Q + q) * K;
                const std::uint8_t* allow = &mask->allowed[(b * Q + q) * K];
                T mx = -std::numeric_limits<T>::infinity();
                bool any = false;
                for (std::size_t k = 0; k < K; ++k) {
                    if (!allow[k]) continue;
                    any = true;
                    // NaN wins so that non-finite scores propagate.
                    if (std::isnan(sv[row + k]) || sv[row + k] > mx) mx = sv[row + k];
                    if (std::isnan(mx)) break;
                }
                if (!any) throw InvariantError("masked_softmax: query row with no visible keys");
                T s{0};
                for (std::size_t k = 0; k < K; ++k) {
                    if (allow[k]) s += (ov[row + k] = std::exp(sv[row + k] - mx));
                }
                for (std::size_t k = 0; k < K; ++k) ov[row + k] /= s;
            }
        }
    }
    if (detail::wants_grad({&scores})) {
        detail::NodePtr<T> an = scores.handle(), on = out.handle();
        detail::record(out, {an}, [an, on, rows = B * H * Q, K] {
            auto& ga = an->ensure_grad();
            const auto& y = on->data;
            const auto& g = on->grad;
            for (std::size_t r = 0; r < rows; ++r) {
                const std::size_t base = r * K;
                T dot{0};
                for (std::size_t k = 0; k < K; ++k) dot += g[base + k] * y[base + k];
                for (std::size_t k = 0; k < K; ++k) ga[base + k] += y[base + k] * (g[base + k] - dot);
            }
        });
    }
    return out;
}

// x / rms(x) * weight over the last axis.
template <class T>
Tensor<T> rms_norm(const Tensor<T>& x, const Tensor<T>& weight, T eps = T(1e-5)) {
    const std::size_t d = x.dim(-1);
    if (weight.rank() != 1 || weight.dim(0) != d) {
        throw ShapeError("rms_norm: weight " + shape_str(weight.shape()) + " vs input " + shape_str(x.shape()));
    }
    const std::size_t rows = x.numel() / d;
    Tensor<T> out = Tensor<T>::zeros(x.shape());
    std::vector<T> inv(rows);
    const auto& xv = x.values();
    const auto& wv = weight.values();
    auto& ov = out.values();
    for (std::size_t r = 0; r < rows; ++r) {
        T ss{0};
        for (std::size_t j = 0; j < d; ++j) ss += xv[r * d + j] * xv[r * d + j];
        inv[r] = T{1} / std::sqrt(ss / static_cast<T>(d) + eps);
        for (std::size_t j = 0; j < d; ++j) ov[r * d + j] = xv[r * d + j] * inv[r] * wv[j];
    }
    if (detail::wants_grad({&x, &weight})) {
        detail::NodePtr<T> xn = x.handle(), wn = weight.handle(), on = out.handle();
        detail::record(out, {xn, wn}, [xn, wn, on, inv = std::move(inv), rows, d] {
            const auto& g = on->grad;
            const auto& xv = xn->data;
            const auto& wv = wn->data;
            if (wn->requires_grad) {
                auto& gw = wn->ensure_grad();
                for (std::size_t r = 0; r < rows; ++r) {
                    for (std::size_t j = 0; j < d; ++j) gw[j] += g[r * d + j] * xv[r * d + j] * inv[r];
                }
            }
            if (xn->requires_grad) {
                auto& gx = xn->ensure_grad();
                for (std::size_t r = 0; r < rows; ++r) {
                    T dot{0};
                    for (std::size_t j = 0; j < d; ++j) dot += g[r * d + j] * wv[j] * xv[r * d + j];
                    const T c = dot * inv[r] * inv[r] * inv[r] / static_cast<T>(d);
                    for (std::size_t j = 0; j < d; ++j) {
                        gx[r * d + j] += g[r * d + j] * wv[j] * inv[r] - xv[r * d + j] * c;
                    }
                }
            }
        });
    }
    return out;
}

inline constexpr int kIgnoreIndex = -1;

enum class Reduction { mean, sum };

// Cross entropy of [N, C] logits against class indices; entries equal to
// kIgnoreIndex are skipped.
template <class T>
Tensor<T> cross_entropy(const Tensor<T>& logits, const std::vector<int>& targets, Reduction reduction = Reduction::mean) {
    if (logits.rank() != 2 || logits.dim(0) != targets.size()) {
        throw ShapeError("cross_entropy: logits " + shape_str(logits.shape()) + " vs " +
                         std::to_string(targets.size()) + " targets");
    }
    const std::size_t N = logits.dim(0), C = logits.dim(1);
    std::size_t count = 0;
    for (int t : targets) {
        if (t == kIgnoreIndex) continue;
        if (t < 0 || static_cast<std::size_t>(t) >= C) {
            throw RangeError("cross_entropy: target " + std::to_string(t) + " outside [0, " + std::to_string(C) + ")");
        }
        ++count;
    }
    if (count == 0) throw InputError("cross_entropy: no target left after masking");
    const auto& lv = logits.values();
    std::vector<T> probs(N * C, T{0});
    T total{0};
    for (std::size_t r = 0; r < N; ++r) {
        if (targets[r] == kIgnoreIndex) continue;
        const T* row = &lv[r * C];
        T mx = *std::max_element(row, row + C);
        T s{0};
        for (std::size_t c = 0; c < C; ++c) s += (probs[r * C + c] = std::exp(row[c] - mx));
        for (std::size_t c = 0; c < C; ++c) probs[r * C + c] /= s;
        total += mx + std::log(s) - row[targets[r]];
    }
    const T denom = reduction == Reduction::mean ? static_cast<T>(count) : T{1};
    Tensor<T> out = Tensor<T>::scalar(total / denom);
    if (detail::wants_grad({&logits})) {
        detail::NodePtr<T> ln = logits.handle(), on = out.handle();
        detail::record(out, {ln}, [ln, on, probs = std::move(probs), targets, N, C, denom] {
            auto& g = ln->ensure_grad();
            const T up = on->grad[0] / denom;
            for (std::size_t r = 0; r < N; ++r) {
                if (targets[r] == kIgnoreIndex) continue;
                for (std::size_t c = 0; c < C; ++c) g[r * C + c] += up * probs[r * C + c];
                g[r * C + static_cast<std::size_t>(targets[r])] -= up;
            }
        });
    }
    return out;
}

// ---------------------------------------------------------------------------
// Rotary rotation

// Per-position rotation angles for even/odd lane pairs. cos/sin are laid out
// like x with the last axis halved.
template <class T>
struct RotationTable {
    Shape shape; // shape of the rotated tensor
    std::vector<T> cos, sin;
};

// Rotates each lane pair (x[2j], x[2j+1]) by the tabulated angle:
//   y[2j]   = x[2j] cos - x[2j+1] sin
//   y[2j+1] = x[2j] sin + x[2j+1] cos
template <class T>
Tensor<T> rotate_pairs(const Tensor<T>& x, std::shared_ptr<const RotationTable<T>> table) {
    if (x.shape() != table->shape) {
        throw ShapeError("rotate_pairs: input " + shape_str(x.shape()) + " vs table " + shape_str(table->shape));
    }
    if (x.dim(-1) % 2) throw ConfigError("rotate_pairs: last dimension must be even, got " + std::to_string(x.dim(-1)));
    const std::size_t pairs = x.numel() / 2;
    Tensor<T> out = Tensor<T>::zeros(x.shape());
    const auto& xv = x.values();
    auto& ov = out.values();
    for (std::size_t p = 0; p < pairs; ++p) {
        const T c = table->cos[p], s = table->sin[p];
        const T a = xv[2 * p], b = xv[2 * p + 1];
        ov[2 * p] = a * c - b * s;
        ov[2 * p + 1] = a * s + b * c;
    }
    if (detail::wants_grad({&x})) {
        detail::NodePtr<T> xn = x.handle(), on = out.handle();
        detail::record(out, {xn}, [xn, on, table, pairs] {
            auto& g = xn->ensure_grad();
            const auto& go = on->grad;
            for (std::size_t p = 0; p < pairs; ++p) {
                const T c = table->cos[p], s = table->sin[p];
                g[2 * p] += go[2 * p] * c + go[2 * p + 1] * s;
                g[2 * p + 1] += -go[2 * p] * s + go[2 * p + 1] * c;
            }
        });
    }
    return out;
}

} // namespace moonbeam
