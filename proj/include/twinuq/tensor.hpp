#pragma once

// Dense double-precision tensors with reverse-mode automatic differentiation.
// Small by design: just the operations needed to train the fully connected and
// Conv1d fault classifiers and their variational counterparts. Summation in
// every reduction runs left-to-right so results are reproducible and can be
// compared bit-for-bit against naive loop oracles.

#include <atomic>
#include <cmath>
#include <cstdint>
#include <functional>
#include <memory>
#include <numbers>
#include <sstream>
#include <string>
#include <unordered_map>
#include <unordered_set>
#include <utility>
#include <vector>

#include "twinuq/errors.hpp"

namespace twinuq {

using Shape = std::vector<std::size_t>;

inline std::size_t shape_numel(const Shape& shape) {
    std::size_t n = 1;
    for (std::size_t d : shape) n *= d;
    return n;
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

struct TensorNode {
    std::uint64_t id;
    Shape shape;
    std::vector<double> data;
    bool requires_grad = false;

    static std::uint64_t fresh_id() {
        static std::atomic<std::uint64_t> counter{1};
        return counter.fetch_add(1, std::memory_order_relaxed);
    }
};

}  // namespace detail

class Tensor {
public:
    Tensor() = default;

    Tensor(Shape shape, std::vector<double> data, bool requires_grad = false) {
        for (std::size_t d : shape) {
            if (d == 0) throw contract_error("Tensor: zero dimension in shape " + shape_str(shape));
        }
        if (shape_numel(shape) != data.size()) {
            throw contract_error("Tensor: shape " + shape_str(shape) + " does not match data length " +
                                 std::to_string(data.size()));
        }
        node_ = std::make_shared<detail::TensorNode>();
        node_->id = detail::TensorNode::fresh_id();
        node_->shape = std::move(shape);
        node_->data = std::move(data);
        node_->requires_grad = requires_grad;
    }

    static Tensor zeros(Shape shape) {
        std::size_t n = shape_numel(shape);
        return Tensor(std::move(shape), std::vector<double>(n, 0.0));
    }
    static Tensor full(Shape shape, double value) {
        std::size_t n = shape_numel(shape);
        return Tensor(std::move(shape), std::vector<double>(n, value));
    }
    static Tensor scalar(double value) { return Tensor({1}, {value}); }
    static Tensor row(std::vector<double> values) {
        Shape s{values.size()};
        return Tensor(std::move(s), std::move(values));
    }
    static Tensor matrix(std::size_t rows, std::size_t cols, std::vector<double> values) {
        return Tensor({rows, cols}, std::move(values));
    }
    // Trainable leaf.
    static Tensor param(Shape shape, std::vector<double> values) {
        return Tensor(std::move(shape), std::move(values), true);
    }

    bool empty() const { return node_ == nullptr; }
    const Shape& shape() const { return node_->shape; }
    std::size_t ndim() const { return node_->shape.size(); }
    std::size_t dim(std::size_t i) const { return node_->shape[i]; }
    std::size_t numel() const { return node_->data.size(); }
    const std::vector<double>& data() const { return node_->data; }
    std::uint64_t id() const { return node_->id; }
    bool requires_grad() const { return node_->requires_grad; }
    void set_requires_grad(bool flag) { node_->requires_grad = flag; }

    double value() const {
        if (numel() != 1) throw contract_error("Tensor::value: tensor " + shape_str(shape()) + " is not scalar");
        return node_->data[0];
    }
    double at(std::size_t i) const { return node_->data[i]; }
    double at(std::size_t i, std::size_t j) const { return node_->data[i * dim(1) + j]; }
    double at(std::size_t i, std::size_t j, std::size_t k) const {
        return node_->data[(i * dim(1) + j) * dim(2) + k];
    }

    // In-place parameter update (optimizer use). Identity is preserved so the
    // tensor stays addressable by id across steps; never call mid-tape.
    void assign(const std::vector<double>& values) {
        if (values.size() != node_->data.size()) {
            throw contract_error("Tensor::assign: size mismatch " + std::to_string(values.size()) + " vs " +
                                 std::to_string(node_->data.size()));
        }
        node_->data = values;
    }

    std::shared_ptr<detail::TensorNode> node() const { return node_; }

private:
    std::shared_ptr<detail::TensorNode> node_;
};

// Gradients keyed by tensor id while a backward pass runs.
using GradMap = std::unordered_map<std::uint64_t, std::vector<double>>;

inline std::vector<double>& grad_slot(GradMap& grads, std::uint64_t id, std::size_t size) {
    auto it = grads.find(id);
    if (it == grads.end()) it = grads.emplace(id, std::vector<double>(size, 0.0)).first;
    return it->second;
}

// Records one node per differentiable operation, in execution order. backward()
// replays the list in reverse, which is a valid topological order by
// construction, then clears the tape for reuse.
class GradientTape {
public:
    using BackwardFn = std::function<void(const std::vector<double>& out_grad, GradMap& grads)>;

    struct OpNode {
        std::uint64_t out_id;
        BackwardFn backward;
    };

    bool tracked(const Tensor& t) const {
        return t.requires_grad() || tracked_ids_.count(t.id()) > 0;
    }

    void record(const Tensor& out, std::initializer_list<Tensor> inputs, BackwardFn backward) {
        for (const Tensor& in : inputs) {
            if (in.requires_grad()) leaves_.emplace(in.id(), in.node());
        }
        tracked_ids_.insert(out.id());
        nodes_.push_back(OpNode{out.id(), std::move(backward)});
    }

    std::size_t size() const { return nodes_.size(); }

    void clear() {
        nodes_.clear();
        tracked_ids_.clear();
        leaves_.clear();
    }

    // Accumulates gradients for every requires_grad leaf reachable from `loss`
    // and returns them keyed by tensor id. The tape is cleared afterwards.
    std::unordered_map<std::uint64_t, Tensor> backward(const Tensor& loss) {
        if (loss.numel() != 1) {
            throw contract_error("GradientTape::backward: loss must be scalar, got " + shape_str(loss.shape()));
        }
        GradMap grads;
        grads[loss.id()] = {1.0};
        for (auto it = nodes_.rbegin(); it != nodes_.rend(); ++it) {
            auto g = grads.find(it->out_id);
            if (g == grads.end()) continue;
            // References into an unordered_map survive rehashing, so g->second
            // stays valid while the closure inserts new slots; the iterator may
            // not, hence the erase-by-key afterwards.
            it->backward(g->second, grads);
            if (leaves_.find(it->out_id) == leaves_.end()) grads.erase(it->out_id);
        }
        std::unordered_map<std::uint64_t, Tensor> result;
        for (auto& [id, node] : leaves_) {
            auto g = grads.find(id);
            if (g == grads.end()) continue;
            result.emplace(id, Tensor(node->shape, std::move(g->second)));
        }
        clear();
        return result;
    }

private:
    std::vector<OpNode> nodes_;
    std::unordered_set<std::uint64_t> tracked_ids_;
    std::unordered_map<std::uint64_t, std::shared_ptr<detail::TensorNode>> leaves_;
};

namespace detail {

inline bool should_record(GradientTape* tape, std::initializer_list<Tensor> inputs) {
    if (!tape) return false;
    for (const Tensor& in : inputs) {
        if (tape->tracked(in)) return true;
    }
    return false;
}

inline void require_same_shape(const Tensor& a, const Tensor& b, const char* op) {
    if (a.shape() != b.shape()) {
        throw contract_error(std::string(op) + ": shape mismatch " + shape_str(a.shape()) + " vs " +
                             shape_str(b.shape()));
    }
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Elementwise binary operations
// ---------------------------------------------------------------------------

inline Tensor add(const Tensor& a, const Tensor& b, GradientTape* tape = nullptr) {
    detail::require_same_shape(a, b, "add");
    std::vector<double> out(a.numel());
    const auto &da = a.data(), &db = b.data();
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = da[i] + db[i];
    Tensor y(a.shape(), std::move(out));
    if (detail::should_record(tape, {a, b})) {
        auto an = a.node(), bn = b.node();
        tape->record(y, {a, b}, [an, bn](const std::vector<double>& g, GradMap& grads) {
            auto& ga = grad_slot(grads, an->id, an->data.size());
            auto& gb = grad_slot(grads, bn->id, bn->data.size());
            for (std::size_t i = 0; i < g.size(); ++i) {
                ga[i] += g[i];
                gb[i] += g[i];
            }
        });
    }
    return y;
}

inline Tensor sub(const Tensor& a, const Tensor& b, GradientTape* tape = nullptr) {
    detail::require_same_shape(a, b, "sub");
    std::vector<double> out(a.numel());
    const auto &da = a.data(), &db = b.data();
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = da[i] - db[i];
    Tensor y(a.shape(), std::move(out));
    if (detail::should_record(tape, {a, b})) {
        auto an = a.node(), bn = b.node();
        tape->record(y, {a, b}, [an, bn](const std::vector<double>& g, GradMap& grads) {
            auto& ga = grad_slot(grads, an->id, an->data.size());
            auto& gb = grad_slot(grads, bn->id, bn->data.size());
            for (std::size_t i = 0; i < g.size(); ++i) {
                ga[i] += g[i];
                gb[i] -= g[i];
            }
        });
    }
    return y;
}

inline Tensor mul(const Tensor& a, const Tensor& b, GradientTape* tape = nullptr) {
    detail::require_same_shape(a, b, "mul");
    std::vector<double> out(a.numel());
    const auto &da = a.data(), &db = b.data();
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = da[i] * db[i];
    Tensor y(a.shape(), std::move(out));
    if (detail::should_record(tape, {a, b})) {
        auto an = a.node(), bn = b.node();
        tape->record(y, {a, b}, [an, bn](const std::vector<double>& g, GradMap& grads) {
            auto& ga = grad_slot(grads, an->id, an->data.size());
            auto& gb = grad_slot(grads, bn->id, bn->data.size());
            for (std::size_t i = 0; i < g.size(); ++i) {
                ga[i] += g[i] * bn->data[i];
                gb[i] += g[i] * an->data[i];
            }
        });
    }
    return y;
}

inline Tensor div(const Tensor& a, const Tensor& b, GradientTape* tape = nullptr) {
    detail::require_same_shape(a, b, "div");
    std::vector<double> out(a.numel());
    const auto &da = a.data(), &db = b.data();
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = da[i] / db[i];
    Tensor y(a.shape(), std::move(out));
    if (detail::should_record(tape, {a, b})) {
        auto an = a.node(), bn = b.node();
        tape->record(y, {a, b}, [an, bn](const std::vector<double>& g, GradMap& grads) {
            auto& ga = grad_slot(grads, an->id, an->data.size());
            auto& gb = grad_slot(grads, bn->id, bn->data.size());
            for (std::size_t i = 0; i < g.size(); ++i) {
                const double inv = 1.0 / bn->data[i];
                ga[i] += g[i] * inv;
                gb[i] -= g[i] * an->data[i] * inv * inv;
            }
        });
    }
    return y;
}

// ---------------------------------------------------------------------------
// Elementwise unary operations
// ---------------------------------------------------------------------------

namespace detail {

// Shared scaffolding: forward map plus a backward weight w with dx += g * w.
template <typename Fwd, typename Bwd>
Tensor unary_op(const Tensor& a, GradientTape* tape, const char*, Fwd fwd, Bwd bwd_weight) {
    std::vector<double> out(a.numel());
    const auto& da = a.data();
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = fwd(da[i]);
    Tensor y(a.shape(), std::move(out));
    if (should_record(tape, {a})) {
        auto an = a.node();
        auto yn = y.node();
        tape->record(y, {a}, [an, yn, bwd_weight](const std::vector<double>& g, GradMap& grads) {
            auto& ga = grad_slot(grads, an->id, an->data.size());
            for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * bwd_weight(an->data[i], yn->data[i]);
        });
    }
    return y;
}

}  // namespace detail

inline Tensor neg(const Tensor& a, GradientTape* tape = nullptr) {
    return detail::unary_op(
        a, tape, "neg", [](double x) { return -x; }, [](double, double) { return -1.0; });
}

inline Tensor scale(const Tensor& a, double c, GradientTape* tape = nullptr) {
    return detail::unary_op(
        a, tape, "scale", [c](double x) { return c * x; }, [c](double, double) { return c; });
}

inline Tensor add_scalar(const Tensor& a, double c, GradientTape* tape = nullptr) {
    return detail::unary_op(
        a, tape, "add_scalar", [c](double x) { return x + c; }, [](double, double) { return 1.0; });
}

inline Tensor square(const Tensor& a, GradientTape* tape = nullptr) {
    return detail::unary_op(
        a, tape, "square", [](double x) { return x * x; }, [](double x, double) { return 2.0 * x; });
}

// Exact sqrt forward; the derivative is guarded near zero so that exact-zero
// variances stay representable without poisoning gradients with infinities.
inline Tensor sqrt_guarded(const Tensor& a, GradientTape* tape = nullptr) {
    return detail::unary_op(
        a, tape, "sqrt", [](double x) { return std::sqrt(x); },
        [](double, double y) { return 0.5 / std::max(y, 1e-6); });
}

inline Tensor exp(const Tensor& a, GradientTape* tape = nullptr) {
    return detail::unary_op(
        a, tape, "exp", [](double x) { return std::exp(x); }, [](double, double y) { return y; });
}

inline Tensor log(const Tensor& a, GradientTape* tape = nullptr) {
    return detail::unary_op(
        a, tape, "log", [](double x) { return std::log(x); }, [](double x, double) { return 1.0 / x; });
}

// Subgradient at exactly 0 is defined as 0.
inline Tensor relu(const Tensor& a, GradientTape* tape = nullptr) {
    return detail::unary_op(
        a, tape, "relu", [](double x) { return x > 0.0 ? x : 0.0; },
        [](double x, double) { return x > 0.0 ? 1.0 : 0.0; });
}

inline Tensor clamp_min(const Tensor& a, double lo, GradientTape* tape = nullptr) {
    return detail::unary_op(
        a, tape, "clamp_min", [lo](double x) { return x < lo ? lo : x; },
        [lo](double x, double) { return x < lo ? 0.0 : 1.0; });
}

// Standard normal CDF / PDF as differentiable primitives (ADF moment algebra).
inline double norm_cdf(double z) { return 0.5 * std::erfc(-z * std::numbers::sqrt2 / 2.0); }
inline double norm_pdf(double z) {
    return std::exp(-0.5 * z * z) / std::sqrt(2.0 * std::numbers::pi);
}

inline Tensor gauss_cdf(const Tensor& a, GradientTape* tape = nullptr) {
    return detail::unary_op(
        a, tape, "gauss_cdf", [](double x) { return norm_cdf(x); },
        [](double x, double) { return norm_pdf(x); });
}

inline Tensor gauss_pdf(const Tensor& a, GradientTape* tape = nullptr) {
    return detail::unary_op(
        a, tape, "gauss_pdf", [](double x) { return norm_pdf(x); },
        [](double x, double y) { return -x * y; });
}

// out[i] = mask[i] ? a[i] : b[i]; the mask is data, not a differentiable input.
inline Tensor select(const std::vector<std::uint8_t>& mask, const Tensor& a, const Tensor& b,
                     GradientTape* tape = nullptr) {
    detail::require_same_shape(a, b, "select");
    if (mask.size() != a.numel()) throw contract_error("select: mask length does not match tensors");
    std::vector<double> out(a.numel());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = mask[i] ? a.data()[i] : b.data()[i];
    Tensor y(a.shape(), std::move(out));
    if (detail::should_record(tape, {a, b})) {
        auto an = a.node(), bn = b.node();
        tape->record(y, {a, b}, [an, bn, mask](const std::vector<double>& g, GradMap& grads) {
            auto& ga = grad_slot(grads, an->id, an->data.size());
            auto& gb = grad_slot(grads, bn->id, bn->data.size());
            for (std::size_t i = 0; i < g.size(); ++i) {
                if (mask[i])
                    ga[i] += g[i];
                else
                    gb[i] += g[i];
            }
        });
    }
    return y;
}

// ---------------------------------------------------------------------------
// Reductions and shape manipulation
// ---------------------------------------------------------------------------

inline Tensor sum_all(const Tensor& a, GradientTape* tape = nullptr) {
    double s = 0.0;
    for (double v : a.data()) s += v;
    Tensor y = Tensor::scalar(s);
    if (detail::should_record(tape, {a})) {
        auto an = a.node();
        tape->record(y, {a}, [an](const std::vector<double>& g, GradMap& grads) {
            auto& ga = grad_slot(grads, an->id, an->data.size());
            for (double& v : ga) v += g[0];
        });
    }
    return y;
}

inline Tensor mean_all(const Tensor& a, GradientTape* tape = nullptr) {
    return scale(sum_all(a, tape), 1.0 / static_cast<double>(a.numel()), tape);
}

// Column sums of a [m x n] matrix -> [n].
inline Tensor sum_axis0(const Tensor& a, GradientTape* tape = nullptr) {
    if (a.ndim() != 2) throw contract_error("sum_axis0: need 2-D tensor, got " + shape_str(a.shape()));
    const std::size_t m = a.dim(0), n = a.dim(1);
    std::vector<double> out(n, 0.0);
    for (std::size_t i = 0; i < m; ++i)
        for (std::size_t j = 0; j < n; ++j) out[j] += a.at(i, j);
    Tensor y({n}, std::move(out));
    if (detail::should_record(tape, {a})) {
        auto an = a.node();
        tape->record(y, {a}, [an, m, n](const std::vector<double>& g, GradMap& grads) {
            auto& ga = grad_slot(grads, an->id, an->data.size());
            for (std::size_t i = 0; i < m; ++i)
                for (std::size_t j = 0; j < n; ++j) ga[i * n + j] += g[j];
        });
    }
    return y;
}

// Row sums of a [m x n] matrix -> [m].
inline Tensor sum_axis1(const Tensor& a, GradientTape* tape = nullptr) {
    if (a.ndim() != 2) throw contract_error("sum_axis1: need 2-D tensor, got " + shape_str(a.shape()));
    const std::size_t m = a.dim(0), n = a.dim(1);
    std::vector<double> out(m, 0.0);
    for (std::size_t i = 0; i < m; ++i)
        for (std::size_t j = 0; j < n; ++j) out[i] += a.at(i, j);
    Tensor y({m}, std::move(out));
    if (detail::should_record(tape, {a})) {
        auto an = a.node();
        tape->record(y, {a}, [an, m, n](const std::vector<double>& g, GradMap& grads) {
            auto& ga = grad_slot(grads, an->id, an->data.size());
            for (std::size_t i = 0; i < m; ++i)
                for (std::size_t j = 0; j < n; ++j) ga[i * n + j] += g[i];
        });
    }
    return y;
}

inline Tensor reshape(const Tensor& a, Shape shape, GradientTape* tape = nullptr) {
    if (shape_numel(shape) != a.numel()) {
        throw contract_error("reshape: cannot view " + shape_str(a.shape()) + " as " + shape_str(shape));
    }
    Tensor y(std::move(shape), a.data());
    if (detail::should_record(tape, {a})) {
        auto an = a.node();
        tape->record(y, {a}, [an](const std::vector<double>& g, GradMap& grads) {
            auto& ga = grad_slot(grads, an->id, an->data.size());
            for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i];
        });
    }
    return y;
}

inline Tensor transpose(const Tensor& a, GradientTape* tape = nullptr) {
    if (a.ndim() != 2) throw contract_error("transpose: need 2-D tensor, got " + shape_str(a.shape()));
    const std::size_t m = a.dim(0), n = a.dim(1);
    std::vector<double> out(m * n);
    for (std::size_t i = 0; i < m; ++i)
        for (std::size_t j = 0; j < n; ++j) out[j * m + i] = a.at(i, j);
    Tensor y({n, m}, std::move(out));
    if (detail::should_record(tape, {a})) {
        auto an = a.node();
        tape->record(y, {a}, [an, m, n](const std::vector<double>& g, GradMap& grads) {
            auto& ga = grad_slot(grads, an->id, an->data.size());
            for (std::size_t i = 0; i < m; ++i)
                for (std::size_t j = 0; j < n; ++j) ga[i * n + j] += g[j * m + i];
        });
    }
    return y;
}

// Broadcast a [n] vector to [rows x n].
inline Tensor tile_rows(const Tensor& v, std::size_t rows, GradientTape* tape = nullptr) {
    if (v.ndim() != 1) throw contract_error("tile_rows: need 1-D tensor, got " + shape_str(v.shape()));
    const std::size_t n = v.numel();
    std::vector<double> out(rows * n);
    for (std::size_t i = 0; i < rows; ++i)
        for (std::size_t j = 0; j < n; ++j) out[i * n + j] = v.at(j);
    Tensor y({rows, n}, std::move(out));
    if (detail::should_record(tape, {v})) {
        auto vn = v.node();
        tape->record(y, {v}, [vn, rows, n](const std::vector<double>& g, GradMap& grads) {
            auto& gv = grad_slot(grads, vn->id, vn->data.size());
            for (std::size_t i = 0; i < rows; ++i)
                for (std::size_t j = 0; j < n; ++j) gv[j] += g[i * n + j];
        });
    }
    return y;
}

// Repeat each row of [m x n] `times` consecutive times -> [m*times x n].
inline Tensor repeat_rows(const Tensor& a, std::size_t times, GradientTape* tape = nullptr) {
    if (a.ndim() != 2) throw contract_error("repeat_rows: need 2-D tensor, got " + shape_str(a.shape()));
    const std::size_t m = a.dim(0), n = a.dim(1);
    std::vector<double> out(m * times * n);
    for (std::size_t i = 0; i < m; ++i)
        for (std::size_t t = 0; t < times; ++t)
            for (std::size_t j = 0; j < n; ++j) out[(i * times + t) * n + j] = a.at(i, j);
    Tensor y({m * times, n}, std::move(out));
    if (detail::should_record(tape, {a})) {
        auto an = a.node();
        tape->record(y, {a}, [an, m, n, times](const std::vector<double>& g, GradMap& grads) {
            auto& ga = grad_slot(grads, an->id, an->data.size());
            for (std::size_t i = 0; i < m; ++i)
                for (std::size_t t = 0; t < times; ++t)
                    for (std::size_t j = 0; j < n; ++j) ga[i * n + j] += g[(i * times + t) * n + j];
        });
    }
    return y;
}

// out[i] = a[i, idx[i]]; backward scatters into the picked entries.
inline Tensor select_per_row(const Tensor& a, const std::vector<int>& idx, GradientTape* tape = nullptr) {
    if (a.ndim() != 2) throw contract_error("select_per_row: need 2-D tensor, got " + shape_str(a.shape()));
    const std::size_t m = a.dim(0), n = a.dim(1);
    if (idx.size() != m) throw contract_error("select_per_row: index count does not match rows");
    std::vector<double> out(m);
    for (std::size_t i = 0; i < m; ++i) {
        if (idx[i] < 0 || static_cast<std::size_t>(idx[i]) >= n) {
            throw contract_error("select_per_row: index " + std::to_string(idx[i]) + " out of range for " +
                                 shape_str(a.shape()));
        }
        out[i] = a.at(i, static_cast<std::size_t>(idx[i]));
    }
    Tensor y({m}, std::move(out));
    if (detail::should_record(tape, {a})) {
        auto an = a.node();
        tape->record(y, {a}, [an, idx, n](const std::vector<double>& g, GradMap& grads) {
            auto& ga = grad_slot(grads, an->id, an->data.size());
            for (std::size_t i = 0; i < g.size(); ++i) ga[i * n + static_cast<std::size_t>(idx[i])] += g[i];
        });
    }
    return y;
}

// ---------------------------------------------------------------------------
// Channel-broadcast operations: x viewed as [outer x C x inner], v as [C].
// With inner == 1 these are the usual row-vector (bias style) broadcasts.
// ---------------------------------------------------------------------------

namespace detail {

inline void check_channel(const Tensor& x, const Tensor& v, std::size_t inner, const char* op) {
    if (v.ndim() != 1) throw contract_error(std::string(op) + ": channel vector must be 1-D");
    const std::size_t c = v.numel();
    if (inner == 0 || x.numel() % (c * inner) != 0) {
        throw contract_error(std::string(op) + ": tensor " + shape_str(x.shape()) +
                             " is not a multiple of channels " + shape_str(v.shape()) + " with inner " +
                             std::to_string(inner));
    }
}

template <typename Combine, typename BackX, typename BackV>
Tensor channel_op(const Tensor& x, const Tensor& v, std::size_t inner, GradientTape* tape, const char* op,
                  Combine combine, BackX back_x, BackV back_v) {
    check_channel(x, v, inner, op);
    const std::size_t c = v.numel();
    const std::size_t outer = x.numel() / (c * inner);
    std::vector<double> out(x.numel());
    const auto &dx = x.data(), &dv = v.data();
    for (std::size_t o = 0; o < outer; ++o)
        for (std::size_t ch = 0; ch < c; ++ch) {
            const double vc = dv[ch];
            const std::size_t base = (o * c + ch) * inner;
            for (std::size_t i = 0; i < inner; ++i) out[base + i] = combine(dx[base + i], vc);
        }
    Tensor y(x.shape(), std::move(out));
    if (should_record(tape, {x, v})) {
        auto xn = x.node(), vn = v.node();
        tape->record(y, {x, v}, [xn, vn, outer, c, inner, back_x, back_v](const std::vector<double>& g,
                                                                          GradMap& grads) {
            auto& gx = grad_slot(grads, xn->id, xn->data.size());
            auto& gv = grad_slot(grads, vn->id, vn->data.size());
            for (std::size_t o = 0; o < outer; ++o)
                for (std::size_t ch = 0; ch < c; ++ch) {
                    const double vc = vn->data[ch];
                    const std::size_t base = (o * c + ch) * inner;
                    for (std::size_t i = 0; i < inner; ++i) {
                        const double go = g[base + i];
                        const double xo = xn->data[base + i];
                        gx[base + i] += go * back_x(xo, vc);
                        gv[ch] += go * back_v(xo, vc);
                    }
                }
        });
    }
    return y;
}

}  // namespace detail

inline Tensor add_channel(const Tensor& x, const Tensor& v, std::size_t inner = 1,
                          GradientTape* tape = nullptr) {
    return detail::channel_op(
        x, v, inner, tape, "add_channel", [](double a, double b) { return a + b; },
        [](double, double) { return 1.0; }, [](double, double) { return 1.0; });
}

inline Tensor sub_channel(const Tensor& x, const Tensor& v, std::size_t inner = 1,
                          GradientTape* tape = nullptr) {
    return detail::channel_op(
        x, v, inner, tape, "sub_channel", [](double a, double b) { return a - b; },
        [](double, double) { return 1.0; }, [](double, double) { return -1.0; });
}

inline Tensor mul_channel(const Tensor& x, const Tensor& v, std::size_t inner = 1,
                          GradientTape* tape = nullptr) {
    return detail::channel_op(
        x, v, inner, tape, "mul_channel", [](double a, double b) { return a * b; },
        [](double, double b) { return b; }, [](double a, double) { return a; });
}

inline Tensor div_channel(const Tensor& x, const Tensor& v, std::size_t inner = 1,
                          GradientTape* tape = nullptr) {
    return detail::channel_op(
        x, v, inner, tape, "div_channel", [](double a, double b) { return a / b; },
        [](double, double b) { return 1.0 / b; }, [](double a, double b) { return -a / (b * b); });
}

// Per-channel mean over all outer/inner positions: x [outer x C x inner] -> [C].
inline Tensor channel_mean(const Tensor& x, std::size_t channels, std::size_t inner = 1,
                           GradientTape* tape = nullptr) {
    if (channels == 0 || inner == 0 || x.numel() % (channels * inner) != 0) {
        throw contract_error("channel_mean: tensor " + shape_str(x.shape()) + " incompatible with channels " +
                             std::to_string(channels) + " inner " + std::to_string(inner));
    }
    const std::size_t outer = x.numel() / (channels * inner);
    const double inv_n = 1.0 / static_cast<double>(outer * inner);
    std::vector<double> out(channels, 0.0);
    for (std::size_t o = 0; o < outer; ++o)
        for (std::size_t ch = 0; ch < channels; ++ch) {
            const std::size_t base = (o * channels + ch) * inner;
            for (std::size_t i = 0; i < inner; ++i) out[ch] += x.data()[base + i];
        }
    for (double& v : out) v *= inv_n;
    Tensor y({channels}, std::move(out));
    if (detail::should_record(tape, {x})) {
        auto xn = x.node();
        tape->record(y, {x}, [xn, outer, channels, inner, inv_n](const std::vector<double>& g, GradMap& grads) {
            auto& gx = grad_slot(grads, xn->id, xn->data.size());
            for (std::size_t o = 0; o < outer; ++o)
                for (std::size_t ch = 0; ch < channels; ++ch) {
                    const std::size_t base = (o * channels + ch) * inner;
                    for (std::size_t i = 0; i < inner; ++i) gx[base + i] += g[ch] * inv_n;
                }
        });
    }
    return y;
}

// ---------------------------------------------------------------------------
// Linear algebra and convolution
// ---------------------------------------------------------------------------

inline Tensor matmul(const Tensor& a, const Tensor& b, GradientTape* tape = nullptr) {
    if (a.ndim() != 2 || b.ndim() != 2 || a.dim(1) != b.dim(0)) {
        throw contract_error("matmul: incompatible shapes " + shape_str(a.shape()) + " vs " +
                             shape_str(b.shape()));
    }
    const std::size_t m = a.dim(0), k = a.dim(1), n = b.dim(1);
    std::vector<double> out(m * n, 0.0);
    const auto &da = a.data(), &db = b.data();
    for (std::size_t i = 0; i < m; ++i)
        for (std::size_t j = 0; j < n; ++j) {
            double s = 0.0;  // left-to-right over the inner dimension
            for (std::size_t p = 0; p < k; ++p) s += da[i * k + p] * db[p * n + j];
            out[i * n + j] = s;
        }
    Tensor y({m, n}, std::move(out));
    if (detail::should_record(tape, {a, b})) {
        auto an = a.node(), bn = b.node();
        tape->record(y, {a, b}, [an, bn, m, k, n](const std::vector<double>& g, GradMap& grads) {
            auto& ga = grad_slot(grads, an->id, an->data.size());
            auto& gb = grad_slot(grads, bn->id, bn->data.size());
            // dA = g . B^T ; dB = A^T . g
            for (std::size_t i = 0; i < m; ++i)
                for (std::size_t p = 0; p < k; ++p) {
                    double s = 0.0;
                    for (std::size_t j = 0; j < n; ++j) s += g[i * n + j] * bn->data[p * n + j];
                    ga[i * k + p] += s;
                }
            for (std::size_t p = 0; p < k; ++p)
                for (std::size_t j = 0; j < n; ++j) {
                    double s = 0.0;
                    for (std::size_t i = 0; i < m; ++i) s += an->data[i * k + p] * g[i * n + j];
                    gb[p * n + j] += s;
                }
        });
    }
    return y;
}

// Valid (no padding) cross-correlation. x is [c_in x n] or [batch x c_in x n],
// kernels [c_out x c_in x w], bias [c_out] or empty. Output length
// floor((n - w) / stride) + 1.
inline Tensor conv1d(const Tensor& x, const Tensor& kernels, const Tensor& bias, std::size_t stride,
                     GradientTape* tape = nullptr) {
    if (stride == 0) throw contract_error("conv1d: stride must be >= 1");
    if (kernels.ndim() != 3) {
        throw contract_error("conv1d: kernels must be [c_out x c_in x w], got " + shape_str(kernels.shape()));
    }
    const bool batched = x.ndim() == 3;
    if (!batched && x.ndim() != 2) {
        throw contract_error("conv1d: input must be [c_in x n] or [batch x c_in x n], got " +
                             shape_str(x.shape()));
    }
    const std::size_t batch = batched ? x.dim(0) : 1;
    const std::size_t c_in = batched ? x.dim(1) : x.dim(0);
    const std::size_t n = batched ? x.dim(2) : x.dim(1);
    const std::size_t c_out = kernels.dim(0), w = kernels.dim(2);
    if (kernels.dim(1) != c_in) {
        throw contract_error("conv1d: channel mismatch, input " + shape_str(x.shape()) + " vs kernels " +
                             shape_str(kernels.shape()));
    }
    if (n < w) {
        throw contract_error("conv1d: window of length " + std::to_string(n) + " shorter than kernel width " +
                             std::to_string(w));
    }
    const bool has_bias = !bias.empty();
    if (has_bias && (bias.ndim() != 1 || bias.numel() != c_out)) {
        throw contract_error("conv1d: bias must be [c_out], got " + shape_str(bias.shape()));
    }
    const std::size_t m = (n - w) / stride + 1;
    std::vector<double> out(batch * c_out * m, 0.0);
    const auto& dx = x.data();
    const auto& dk = kernels.data();
    for (std::size_t b = 0; b < batch; ++b)
        for (std::size_t oc = 0; oc < c_out; ++oc)
            for (std::size_t j = 0; j < m; ++j) {
                double s = has_bias ? bias.at(oc) : 0.0;
                for (std::size_t ic = 0; ic < c_in; ++ic) {
                    const std::size_t xbase = (b * c_in + ic) * n + j * stride;
                    const std::size_t kbase = (oc * c_in + ic) * w;
                    for (std::size_t u = 0; u < w; ++u) s += dx[xbase + u] * dk[kbase + u];
                }
                out[(b * c_out + oc) * m + j] = s;
            }
    Tensor y(batched ? Shape{batch, c_out, m} : Shape{c_out, m}, std::move(out));
    const bool record = has_bias ? detail::should_record(tape, {x, kernels, bias})
                                 : detail::should_record(tape, {x, kernels});
    if (record) {
        auto xn = x.node(), kn = kernels.node();
        auto bn = has_bias ? bias.node() : std::shared_ptr<detail::TensorNode>{};
        auto backward = [xn, kn, bn, batch, c_in, c_out, n, m, w,
                         stride](const std::vector<double>& g, GradMap& grads) {
            auto& gx = grad_slot(grads, xn->id, xn->data.size());
            auto& gk = grad_slot(grads, kn->id, kn->data.size());
            for (std::size_t b = 0; b < batch; ++b)
                for (std::size_t oc = 0; oc < c_out; ++oc)
                    for (std::size_t j = 0; j < m; ++j) {
                        const double go = g[(b * c_out + oc) * m + j];
                        for (std::size_t ic = 0; ic < c_in; ++ic) {
                            const std::size_t xbase = (b * c_in + ic) * n + j * stride;
                            const std::size_t kbase = (oc * c_in + ic) * w;
                            for (std::size_t u = 0; u < w; ++u) {
                                gx[xbase + u] += go * kn->data[kbase + u];
                                gk[kbase + u] += go * xn->data[xbase + u];
                            }
                        }
                    }
            if (bn) {
                auto& gb = grad_slot(grads, bn->id, bn->data.size());
                for (std::size_t b = 0; b < batch; ++b)
                    for (std::size_t oc = 0; oc < c_out; ++oc)
                        for (std::size_t j = 0; j < m; ++j) gb[oc] += g[(b * c_out + oc) * m + j];
            }
        };
        if (has_bias) {
            tape->record(y, {x, kernels, bias}, std::move(backward));
        } else {
            tape->record(y, {x, kernels}, std::move(backward));
        }
    }
    return y;
}

// ---------------------------------------------------------------------------
// Batch normalization (training form, fused forward/backward)
// ---------------------------------------------------------------------------

struct BatchNormOut {
    Tensor y;
    std::vector<double> batch_mean;          // per channel
    std::vector<double> batch_var;           // biased, used for normalization
    std::vector<double> batch_var_unbiased;  // for running-statistics updates
};

// Normalizes x viewed as [outer x C x inner] per channel with batch statistics.
// gamma/beta are [C]. Gradients flow through the batch statistics.
inline BatchNormOut batchnorm_train(const Tensor& x, const Tensor& gamma, const Tensor& beta,
                                    std::size_t channels, std::size_t inner, double eps = 1e-5,
                                    GradientTape* tape = nullptr) {
    if (gamma.numel() != channels || beta.numel() != channels) {
        throw contract_error("batchnorm_train: gamma/beta must have " + std::to_string(channels) +
                             " channels");
    }
    if (channels == 0 || inner == 0 || x.numel() % (channels * inner) != 0) {
        throw contract_error("batchnorm_train: tensor " + shape_str(x.shape()) +
                             " incompatible with channels " + std::to_string(channels) + " inner " +
                             std::to_string(inner));
    }
    const std::size_t outer = x.numel() / (channels * inner);
    const std::size_t count = outer * inner;
    if (count < 2) throw contract_error("batchnorm_train: needs at least 2 elements per channel");
    const double inv_n = 1.0 / static_cast<double>(count);

    std::vector<double> mean(channels, 0.0), var(channels, 0.0);
    const auto& dx = x.data();
    for (std::size_t o = 0; o < outer; ++o)
        for (std::size_t ch = 0; ch < channels; ++ch) {
            const std::size_t base = (o * channels + ch) * inner;
            for (std::size_t i = 0; i < inner; ++i) mean[ch] += dx[base + i];
        }
    for (double& v : mean) v *= inv_n;
    for (std::size_t o = 0; o < outer; ++o)
        for (std::size_t ch = 0; ch < channels; ++ch) {
            const std::size_t base = (o * channels + ch) * inner;
            for (std::size_t i = 0; i < inner; ++i) {
                const double d = dx[base + i] - mean[ch];
                var[ch] += d * d;
            }
        }
    for (double& v : var) v *= inv_n;
    std::vector<double> var_unbiased(channels);
    for (std::size_t ch = 0; ch < channels; ++ch)
        var_unbiased[ch] = var[ch] * static_cast<double>(count) / static_cast<double>(count - 1);

    std::vector<double> inv_std(channels);
    for (std::size_t ch = 0; ch < channels; ++ch) inv_std[ch] = 1.0 / std::sqrt(var[ch] + eps);

    std::vector<double> out(x.numel());
    for (std::size_t o = 0; o < outer; ++o)
        for (std::size_t ch = 0; ch < channels; ++ch) {
            const std::size_t base = (o * channels + ch) * inner;
            const double a = gamma.at(ch) * inv_std[ch];
            const double b = beta.at(ch) - a * mean[ch];
            for (std::size_t i = 0; i < inner; ++i) out[base + i] = a * dx[base + i] + b;
        }
    Tensor y(x.shape(), std::move(out));

    if (detail::should_record(tape, {x, gamma, beta})) {
        auto xn = x.node(), gn = gamma.node(), bn = beta.node();
        tape->record(y, {x, gamma, beta},
                     [xn, gn, bn, outer, channels, inner, mean, inv_std, inv_n](const std::vector<double>& g,
                                                                                GradMap& grads) {
                         auto& gx = grad_slot(grads, xn->id, xn->data.size());
                         auto& gg = grad_slot(grads, gn->id, gn->data.size());
                         auto& gb = grad_slot(grads, bn->id, bn->data.size());
                         std::vector<double> sum_g(channels, 0.0), sum_gxhat(channels, 0.0);
                         for (std::size_t o = 0; o < outer; ++o)
                             for (std::size_t ch = 0; ch < channels; ++ch) {
                                 const std::size_t base = (o * channels + ch) * inner;
                                 for (std::size_t i = 0; i < inner; ++i) {
                                     const double xhat = (xn->data[base + i] - mean[ch]) * inv_std[ch];
                                     sum_g[ch] += g[base + i];
                                     sum_gxhat[ch] += g[base + i] * xhat;
                                 }
                             }
                         for (std::size_t ch = 0; ch < channels; ++ch) {
                             gb[ch] += sum_g[ch];
                             gg[ch] += sum_gxhat[ch];
                         }
                         for (std::size_t o = 0; o < outer; ++o)
                             for (std::size_t ch = 0; ch < channels; ++ch) {
                                 const std::size_t base = (o * channels + ch) * inner;
                                 const double a = gn->data[ch] * inv_std[ch];
                                 for (std::size_t i = 0; i < inner; ++i) {
                                     const double xhat = (xn->data[base + i] - mean[ch]) * inv_std[ch];
                                     gx[base + i] += a * (g[base + i] - inv_n * sum_g[ch] -
                                                          xhat * inv_n * sum_gxhat[ch]);
                                 }
                             }
                     });
    }
    return BatchNormOut{std::move(y), std::move(mean), std::move(var), std::move(var_unbiased)};
}

// ---------------------------------------------------------------------------
// Fused softmax / log-sum-exp on rows
// ---------------------------------------------------------------------------

// Numerically stable log(sum(exp(row))) for [m x n] -> [m].
inline Tensor logsumexp_rows(const Tensor& a, GradientTape* tape = nullptr) {
    if (a.ndim() != 2) throw contract_error("logsumexp_rows: need 2-D tensor, got " + shape_str(a.shape()));
    const std::size_t m = a.dim(0), n = a.dim(1);
    std::vector<double> out(m);
    for (std::size_t i = 0; i < m; ++i) {
        double hi = a.at(i, 0);
        for (std::size_t j = 1; j < n; ++j) hi = std::max(hi, a.at(i, j));
        double s = 0.0;
        for (std::size_t j = 0; j < n; ++j) s += std::exp(a.at(i, j) - hi);
        out[i] = hi + std::log(s);
    }
    Tensor y({m}, std::move(out));
    if (detail::should_record(tape, {a})) {
        auto an = a.node();
        auto yn = y.node();
        tape->record(y, {a}, [an, yn, m, n](const std::vector<double>& g, GradMap& grads) {
            auto& ga = grad_slot(grads, an->id, an->data.size());
            for (std::size_t i = 0; i < m; ++i)
                for (std::size_t j = 0; j < n; ++j)
                    ga[i * n + j] += g[i] * std::exp(an->data[i * n + j] - yn->data[i]);
        });
    }
    return y;
}

// Stable row softmax for [m x n] -> [m x n].
inline Tensor softmax_rows(const Tensor& a, GradientTape* tape = nullptr) {
    if (a.ndim() != 2) throw contract_error("softmax_rows: need 2-D tensor, got " + shape_str(a.shape()));
    const std::size_t m = a.dim(0), n = a.dim(1);
    std::vector<double> out(m * n);
    for (std::size_t i = 0; i < m; ++i) {
        double hi = a.at(i, 0);
        for (std::size_t j = 1; j < n; ++j) hi = std::max(hi, a.at(i, j));
        double s = 0.0;
        for (std::size_t j = 0; j < n; ++j) {
            out[i * n + j] = std::exp(a.at(i, j) - hi);
            s += out[i * n + j];
        }
        const double inv = 1.0 / s;
        for (std::size_t j = 0; j < n; ++j) out[i * n + j] *= inv;
    }
    Tensor y({m, n}, std::move(out));
    if (detail::should_record(tape, {a})) {
        auto an = a.node();
        auto yn = y.node();
        tape->record(y, {a}, [an, yn, m, n](const std::vector<double>& g, GradMap& grads) {
            auto& ga = grad_slot(grads, an->id, an->data.size());
            for (std::size_t i = 0; i < m; ++i) {
                double dot = 0.0;
                for (std::size_t j = 0; j < n; ++j) dot += g[i * n + j] * yn->data[i * n + j];
                for (std::size_t j = 0; j < n; ++j)
                    ga[i * n + j] += yn->data[i * n + j] * (g[i * n + j] - dot);
            }
        });
    }
    return y;
}

// ---------------------------------------------------------------------------
// Gradient checking
// ---------------------------------------------------------------------------

// Max over all coordinates of |analytic - central difference| /
// max(|analytic|, |cd|, 1e-8). f must be scalar-valued.
inline double grad_check(const std::function<Tensor(const std::vector<Tensor>&, GradientTape*)>& f,
                         const std::vector<Tensor>& inputs, double eps = 1e-5) {
    GradientTape tape;
    Tensor loss = f(inputs, &tape);
    auto grads = tape.backward(loss);

    double worst = 0.0;
    for (std::size_t which = 0; which < inputs.size(); ++which) {
        const Tensor& input = inputs[which];
        if (!input.requires_grad()) continue;
        auto it = grads.find(input.id());
        for (std::size_t j = 0; j < input.numel(); ++j) {
            const double analytic = it == grads.end() ? 0.0 : it->second.at(j);
            std::vector<Tensor> probe = inputs;
            std::vector<double> bumped = input.data();
            bumped[j] += eps;
            probe[which] = Tensor(input.shape(), bumped, true);
            const double up = f(probe, nullptr).value();
            bumped[j] -= 2.0 * eps;
            probe[which] = Tensor(input.shape(), bumped, true);
            const double down = f(probe, nullptr).value();
            const double cd = (up - down) / (2.0 * eps);
            const double denom = std::max({std::abs(analytic), std::abs(cd), 1e-8});
            worst = std::max(worst, std::abs(analytic - cd) / denom);
        }
    }
    return worst;
}

}  // namespace twinuq
