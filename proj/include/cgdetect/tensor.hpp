#pragma once

#include <cmath>
#include <cstddef>
#include <cstdint>
#include <functional>
#include <memory>
#include <numeric>
#include <sstream>
#include <string>
#include <unordered_set>
#include <utility>
#include <vector>

#include "cgdetect/common.hpp"

namespace cgdetect {

inline std::size_t numel_of(const std::vector<std::size_t>& shape) {
    std::size_t n = 1;
    for (std::size_t d : shape) n *= d;
    return n;
}

inline std::string shape_str(const std::vector<std::size_t>& shape) {
    std::ostringstream os;
    os << "[";
    for (std::size_t i = 0; i < shape.size(); ++i) os << (i ? "x" : "") << shape[i];
    os << "]";
    return os.str();
}

// Gradients live behind one extra indirection so that zero-copy views
// (reshape) observe a gradient buffer allocated after the view was made.
template <typename T>
struct GradHolder {
    std::vector<T> v;
};

template <typename T>
class Tensor;

// One recorded op. `backward` reads out_grad and accumulates into the
// parents' gradient holders.
template <typename T>
struct Node {
    std::vector<Tensor<T>> parents;
    std::shared_ptr<GradHolder<T>> out_grad;
    std::function<void(Node<T>&)> backward;
};

inline bool& grad_mode_ref() {
    thread_local bool enabled = true;
    return enabled;
}
inline bool grad_enabled() { return grad_mode_ref(); }

struct NoGradGuard {
    bool prev;
    NoGradGuard() : prev(grad_mode_ref()) { grad_mode_ref() = false; }
    ~NoGradGuard() { grad_mode_ref() = prev; }
};

// Dense row-major tensor handle. Copies are shallow; storage is shared.
// Values are immutable after construction except through optimizer updates.
template <typename T>
class Tensor {
public:
    std::vector<std::size_t> shape;
    std::shared_ptr<std::vector<T>> data;
    std::shared_ptr<GradHolder<T>> grad;
    bool requires_grad = false;
    std::shared_ptr<Node<T>> node;

    Tensor() = default;

    Tensor(std::vector<std::size_t> s, std::vector<T> values, bool rg = false)
        : shape(std::move(s)),
          data(std::make_shared<std::vector<T>>(std::move(values))),
          requires_grad(rg && grad_enabled()) {
        if (numel_of(shape) != data->size()) {
            throw ShapeError("tensor: shape " + shape_str(shape) + " does not match " +
                             std::to_string(data->size()) + " values");
        }
        if (requires_grad) grad = std::make_shared<GradHolder<T>>();
    }

    static Tensor zeros(std::vector<std::size_t> s, bool rg = false) {
        std::vector<T> v(numel_of(s), T(0));
        return Tensor(std::move(s), std::move(v), rg);
    }
    static Tensor full(std::vector<std::size_t> s, T value, bool rg = false) {
        std::vector<T> v(numel_of(s), value);
        return Tensor(std::move(s), std::move(v), rg);
    }
    static Tensor ones(std::vector<std::size_t> s, bool rg = false) { return full(std::move(s), T(1), rg); }
    static Tensor scalar(T value, bool rg = false) { return Tensor({1}, {value}, rg); }

    std::size_t numel() const { return data ? data->size() : 0; }
    std::size_t rank() const { return shape.size(); }

    T item() const {
        if (numel() != 1) throw ShapeError("item: tensor " + shape_str(shape) + " is not scalar");
        return (*data)[0];
    }

    const std::vector<T>& values() const { return *data; }
    std::vector<T>& values_mut() { return *data; }

    bool has_grad() const { return grad && !grad->v.empty(); }
    const std::vector<T>& grad_values() const {
        if (!has_grad()) throw SpecError("grad: not populated; call backward first");
        return grad->v;
    }

    void zero_grad() {
        if (grad) std::fill(grad->v.begin(), grad->v.end(), T(0));
    }
};

template <typename T>
void ensure_grad(const Tensor<T>& t) {
    if (t.grad && t.grad->v.size() != t.numel()) t.grad->v.assign(t.numel(), T(0));
}

template <typename T>
void assert_finite(const Tensor<T>& t, const std::string& context) {
    for (const T x : *t.data) {
        if (!std::isfinite(static_cast<double>(x))) {
            throw NumericError(context + ": non-finite value encountered");
        }
    }
}

namespace detail {

template <typename T>
Tensor<T> make_result(std::vector<std::size_t> shape, bool rg) {
    Tensor<T> out;
    out.shape = std::move(shape);
    out.data = std::make_shared<std::vector<T>>(numel_of(out.shape));
    out.requires_grad = rg && grad_enabled();
    if (out.requires_grad) out.grad = std::make_shared<GradHolder<T>>();
    return out;
}

template <typename T>
void attach_node(Tensor<T>& out, std::vector<Tensor<T>> parents,
                 std::function<void(Node<T>&)> backward) {
    if (!out.requires_grad) return;
    out.node = std::make_shared<Node<T>>();
    out.node->parents = std::move(parents);
    out.node->out_grad = out.grad;
    out.node->backward = std::move(backward);
}

template <typename T>
bool any_requires_grad(const Tensor<T>& a) {
    return a.requires_grad;
}
template <typename T, typename... Rest>
bool any_requires_grad(const Tensor<T>& a, const Rest&... rest) {
    return a.requires_grad || any_requires_grad(rest...);
}

inline std::vector<std::size_t> strides_of(const std::vector<std::size_t>& shape) {
    std::vector<std::size_t> s(shape.size(), 1);
    for (std::size_t i = shape.size(); i-- > 1;) s[i - 1] = s[i] * shape[i];
    return s;
}

// ---- deterministic GEMM kernels (fixed accumulation order per element) ----

template <typename T>
void gemm_nn(T* c, const T* a, const T* b, std::size_t m, std::size_t k, std::size_t n) {
    parallel_for(m, [&](std::size_t lo, std::size_t hi) {
        for (std::size_t i = lo; i < hi; ++i) {
            T* crow = c + i * n;
            const T* arow = a + i * k;
            for (std::size_t p = 0; p < k; ++p) {
                const T av = arow[p];
                const T* brow = b + p * n;
                for (std::size_t j = 0; j < n; ++j) crow[j] += av * brow[j];
            }
        }
    });
}

// c[m,n] += a[m,k] * b[n,k]^T
template <typename T>
void gemm_nt(T* c, const T* a, const T* b, std::size_t m, std::size_t k, std::size_t n) {
    parallel_for(m, [&](std::size_t lo, std::size_t hi) {
        for (std::size_t i = lo; i < hi; ++i) {
            const T* arow = a + i * k;
            T* crow = c + i * n;
            for (std::size_t j = 0; j < n; ++j) {
                const T* brow = b + j * k;
                T acc = T(0);
                for (std::size_t p = 0; p < k; ++p) acc += arow[p] * brow[p];
                crow[j] += acc;
            }
        }
    });
}

// c[m,n] += a[k,m]^T * b[k,n]
template <typename T>
void gemm_tn(T* c, const T* a, const T* b, std::size_t m, std::size_t k, std::size_t n) {
    parallel_for(m, [&](std::size_t lo, std::size_t hi) {
        for (std::size_t i = lo; i < hi; ++i) {
            T* crow = c + i * n;
            for (std::size_t p = 0; p < k; ++p) {
                const T av = a[p * m + i];
                const T* brow = b + p * n;
                for (std::size_t j = 0; j < n; ++j) crow[j] += av * brow[j];
            }
        }
    });
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Shape / movement ops
// ---------------------------------------------------------------------------

// Zero-copy view with a new shape; data and gradient storage are shared.
template <typename T>
Tensor<T> reshape(const Tensor<T>& x, std::vector<std::size_t> new_shape) {
    if (numel_of(new_shape) != x.numel()) {
        throw ShapeError("reshape: cannot view " + shape_str(x.shape) + " as " + shape_str(new_shape));
    }
    Tensor<T> out;
    out.shape = std::move(new_shape);
    out.data = x.data;
    out.requires_grad = x.requires_grad && grad_enabled();
    if (out.requires_grad) {
        out.grad = x.grad;
        detail::attach_node(out, {x}, [](Node<T>&) {});
    }
    return out;
}

// Generic gather-style movement op: out[i] = x[map(i)]. The map must be
// injective so the backward scatter is race-free.
template <typename T, typename MapFn>
Tensor<T> movement_op(const Tensor<T>& x, std::vector<std::size_t> out_shape, MapFn map) {
    Tensor<T> out = detail::make_result<T>(std::move(out_shape), x.requires_grad);
    const T* src = x.data->data();
    T* dst = out.data->data();
    const std::size_t n = out.numel();
    parallel_for(n, [&](std::size_t lo, std::size_t hi) {
        for (std::size_t i = lo; i < hi; ++i) dst[i] = src[map(i)];
    });
    detail::attach_node(out, {x}, [map, n](Node<T>& node) {
        const Tensor<T>& p = node.parents[0];
        if (!p.requires_grad) return;
        ensure_grad(p);
        const T* g = node.out_grad->v.data();
        T* pg = p.grad->v.data();
        parallel_for(n, [&](std::size_t lo, std::size_t hi) {
            for (std::size_t i = lo; i < hi; ++i) pg[map(i)] += g[i];
        });
    });
    return out;
}

template <typename T>
Tensor<T> permute(const Tensor<T>& x, const std::vector<std::size_t>& axes) {
    if (axes.size() != x.rank()) throw ShapeError("permute: axes rank mismatch for " + shape_str(x.shape));
    std::vector<std::size_t> out_shape(axes.size());
    for (std::size_t i = 0; i < axes.size(); ++i) out_shape[i] = x.shape[axes[i]];
    const auto in_strides = detail::strides_of(x.shape);
    const auto out_strides = detail::strides_of(out_shape);
    std::vector<std::size_t> stride_map(axes.size());  // out axis -> input stride
    for (std::size_t i = 0; i < axes.size(); ++i) stride_map[i] = in_strides[axes[i]];
    const std::size_t rank = axes.size();
    auto map = [out_strides, stride_map, rank](std::size_t out_idx) {
        std::size_t in_idx = 0;
        for (std::size_t a = 0; a < rank; ++a) {
            const std::size_t coord = out_idx / out_strides[a];
            out_idx -= coord * out_strides[a];
            in_idx += coord * stride_map[a];
        }
        return in_idx;
    };
    return movement_op(x, std::move(out_shape), map);
}

// Splits the last axis into `parts` equal slices.
template <typename T>
std::vector<Tensor<T>> chunk_last(const Tensor<T>& x, std::size_t parts) {
    const std::size_t last = x.shape.back();
    if (last % parts != 0) {
        throw ShapeError("chunk_last: last extent of " + shape_str(x.shape) + " not divisible by " +
                         std::to_string(parts));
    }
    const std::size_t piece = last / parts;
    std::vector<std::size_t> out_shape = x.shape;
    out_shape.back() = piece;
    std::vector<Tensor<T>> out;
    out.reserve(parts);
    for (std::size_t c = 0; c < parts; ++c) {
        const std::size_t offset = c * piece;
        auto map = [piece, last, offset](std::size_t i) {
            return (i / piece) * last + offset + (i % piece);
        };
        out.push_back(movement_op(x, out_shape, map));
    }
    return out;
}

// ---------------------------------------------------------------------------
// Arithmetic ops
// ---------------------------------------------------------------------------

template <typename T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b) {
    if (a.shape != b.shape) {
        throw ShapeError("add: shape mismatch " + shape_str(a.shape) + " vs " + shape_str(b.shape));
    }
    Tensor<T> out = detail::make_result<T>(a.shape, detail::any_requires_grad(a, b));
    const T* pa = a.data->data();
    const T* pb = b.data->data();
    T* po = out.data->data();
    parallel_for(out.numel(), [&](std::size_t lo, std::size_t hi) {
        for (std::size_t i = lo; i < hi; ++i) po[i] = pa[i] + pb[i];
    });
    detail::attach_node(out, {a, b}, [](Node<T>& node) {
        const T* g = node.out_grad->v.data();
        const std::size_t n = node.out_grad->v.size();
        for (const Tensor<T>& p : node.parents) {
            if (!p.requires_grad) continue;
            ensure_grad(p);
            T* pg = p.grad->v.data();
            parallel_for(n, [&](std::size_t lo, std::size_t hi) {
                for (std::size_t i = lo; i < hi; ++i) pg[i] += g[i];
            });
        }
    });
    return out;
}

// b broadcasts over the leading axes of x; b.shape must be a suffix of x.shape.
template <typename T>
Tensor<T> add_suffix_broadcast(const Tensor<T>& x, const Tensor<T>& b) {
    if (b.rank() > x.rank() ||
        !std::equal(b.shape.begin(), b.shape.end(), x.shape.end() - b.rank())) {
        throw ShapeError("add_suffix_broadcast: " + shape_str(b.shape) + " is not a suffix of " +
                         shape_str(x.shape));
    }
    const std::size_t span = b.numel();
    Tensor<T> out = detail::make_result<T>(x.shape, detail::any_requires_grad(x, b));
    const T* px = x.data->data();
    const T* pb = b.data->data();
    T* po = out.data->data();
    parallel_for(out.numel(), [&](std::size_t lo, std::size_t hi) {
        for (std::size_t i = lo; i < hi; ++i) po[i] = px[i] + pb[i % span];
    });
    detail::attach_node(out, {x, b}, [span](Node<T>& node) {
        const Tensor<T>& x = node.parents[0];
        const Tensor<T>& b = node.parents[1];
        const T* g = node.out_grad->v.data();
        const std::size_t n = node.out_grad->v.size();
        if (x.requires_grad) {
            ensure_grad(x);
            T* pg = x.grad->v.data();
            parallel_for(n, [&](std::size_t lo, std::size_t hi) {
                for (std::size_t i = lo; i < hi; ++i) pg[i] += g[i];
            });
        }
        if (b.requires_grad) {
            ensure_grad(b);
            T* pg = b.grad->v.data();
            for (std::size_t i = 0; i < n; ++i) pg[i % span] += g[i];
        }
    });
    return out;
}

template <typename T>
Tensor<T> scale(const Tensor<T>& x, T factor) {
    Tensor<T> out = detail::make_result<T>(x.shape, x.requires_grad);
    const T* px = x.data->data();
    T* po = out.data->data();
    parallel_for(out.numel(), [&](std::size_t lo, std::size_t hi) {
        for (std::size_t i = lo; i < hi; ++i) po[i] = px[i] * factor;
    });
    detail::attach_node(out, {x}, [factor](Node<T>& node) {
        const Tensor<T>& p = node.parents[0];
        if (!p.requires_grad) return;
        ensure_grad(p);
        const T* g = node.out_grad->v.data();
        T* pg = p.grad->v.data();
        parallel_for(node.out_grad->v.size(), [&](std::size_t lo, std::size_t hi) {
            for (std::size_t i = lo; i < hi; ++i) pg[i] += g[i] * factor;
        });
    });
    return out;
}

template <typename T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b) {
    if (a.shape != b.shape) {
        throw ShapeError("mul: shape mismatch " + shape_str(a.shape) + " vs " + shape_str(b.shape));
    }
    Tensor<T> out = detail::make_result<T>(a.shape, detail::any_requires_grad(a, b));
    const T* pa = a.data->data();
    const T* pb = b.data->data();
    T* po = out.data->data();
    parallel_for(out.numel(), [&](std::size_t lo, std::size_t hi) {
        for (std::size_t i = lo; i < hi; ++i) po[i] = pa[i] * pb[i];
    });
    detail::attach_node(out, {a, b}, [](Node<T>& node) {
        const Tensor<T>& a = node.parents[0];
        const Tensor<T>& b = node.parents[1];
        const T* g = node.out_grad->v.data();
        const std::size_t n = node.out_grad->v.size();
        if (a.requires_grad) {
            ensure_grad(a);
            T* pg = a.grad->v.data();
            const T* pb = b.data->data();
            for (std::size_t i = 0; i < n; ++i) pg[i] += g[i] * pb[i];
        }
        if (b.requires_grad) {
            ensure_grad(b);
            T* pg = b.grad->v.data();
            const T* pa = a.data->data();
            for (std::size_t i = 0; i < n; ++i) pg[i] += g[i] * pa[i];
        }
    });
    return out;
}

namespace detail {

template <typename T>
void check_batched_matmul(const Tensor<T>& a, const Tensor<T>& b, std::size_t b_rows_axis) {
    if (a.rank() < 2 || b.rank() != a.rank()) {
        throw ShapeError("matmul: ranks incompatible " + shape_str(a.shape) + " vs " + shape_str(b.shape));
    }
    for (std::size_t i = 0; i + 2 < a.rank(); ++i) {
        if (a.shape[i] != b.shape[i]) {
            throw ShapeError("matmul: batch extents differ " + shape_str(a.shape) + " vs " +
                             shape_str(b.shape));
        }
    }
    if (a.shape[a.rank() - 1] != b.shape[b_rows_axis]) {
        throw ShapeError("matmul: inner extents differ " + shape_str(a.shape) + " vs " +
                         shape_str(b.shape));
    }
}

}  // namespace detail

// Batched matrix product over the trailing two axes: [..,m,k] x [..,k,n].
template <typename T>
Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b) {
    detail::check_batched_matmul(a, b, b.rank() - 2);
    const std::size_t m = a.shape[a.rank() - 2];
    const std::size_t k = a.shape[a.rank() - 1];
    const std::size_t n = b.shape[b.rank() - 1];
    std::vector<std::size_t> out_shape(a.shape.begin(), a.shape.end() - 1);
    out_shape.push_back(n);
    const std::size_t batches = a.numel() / (m * k);

    Tensor<T> out = detail::make_result<T>(std::move(out_shape), detail::any_requires_grad(a, b));
    for (std::size_t bi = 0; bi < batches; ++bi) {
        detail::gemm_nn(out.data->data() + bi * m * n, a.data->data() + bi * m * k,
                        b.data->data() + bi * k * n, m, k, n);
    }
    detail::attach_node(out, {a, b}, [m, k, n, batches](Node<T>& node) {
        const Tensor<T>& a = node.parents[0];
        const Tensor<T>& b = node.parents[1];
        const T* g = node.out_grad->v.data();
        if (a.requires_grad) {
            ensure_grad(a);
            for (std::size_t bi = 0; bi < batches; ++bi) {
                detail::gemm_nt(a.grad->v.data() + bi * m * k, g + bi * m * n,
                                b.data->data() + bi * k * n, m, n, k);
            }
        }
        if (b.requires_grad) {
            ensure_grad(b);
            for (std::size_t bi = 0; bi < batches; ++bi) {
                detail::gemm_tn(b.grad->v.data() + bi * k * n, a.data->data() + bi * m * k,
                                g + bi * m * n, k, m, n);
            }
        }
    });
    return out;
}

// Batched product with the second factor transposed: [..,m,k] x [..,n,k]^T.
template <typename T>
Tensor<T> matmul_nt(const Tensor<T>& a, const Tensor<T>& b) {
    detail::check_batched_matmul(a, b, b.rank() - 1);
    const std::size_t m = a.shape[a.rank() - 2];
    const std::size_t k = a.shape[a.rank() - 1];
    const std::size_t n = b.shape[b.rank() - 2];
    std::vector<std::size_t> out_shape(a.shape.begin(), a.shape.end() - 1);
    out_shape.back() = m;
    out_shape.push_back(n);
    const std::size_t batches = a.numel() / (m * k);

    Tensor<T> out = detail::make_result<T>(std::move(out_shape), detail::any_requires_grad(a, b));
    for (std::size_t bi = 0; bi < batches; ++bi) {
        detail::gemm_nt(out.data->data() + bi * m * n, a.data->data() + bi * m * k,
                        b.data->data() + bi * n * k, m, k, n);
    }
    detail::attach_node(out, {a, b}, [m, k, n, batches](Node<T>& node) {
        const Tensor<T>& a = node.parents[0];
        const Tensor<T>& b = node.parents[1];
        const T* g = node.out_grad->v.data();
        if (a.requires_grad) {
            ensure_grad(a);
            for (std::size_t bi = 0; bi < batches; ++bi) {
                detail::gemm_nn(a.grad->v.data() + bi * m * k, g + bi * m * n,
                                b.data->data() + bi * n * k, m, n, k);
            }
        }
        if (b.requires_grad) {
            ensure_grad(b);
            for (std::size_t bi = 0; bi < batches; ++bi) {
                detail::gemm_tn(b.grad->v.data() + bi * n * k, g + bi * m * n,
                                a.data->data() + bi * m * k, n, m, k);
            }
        }
    });
    return out;
}

// x[.., in] * w[in, out] + bias[out]; arbitrary leading axes.
template <typename T>
Tensor<T> linear(const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>& bias) {
    if (w.rank() != 2 || x.shape.back() != w.shape[0]) {
        throw ShapeError("linear: input " + shape_str(x.shape) + " incompatible with weight " +
                         shape_str(w.shape));
    }
    const std::size_t in = w.shape[0];
    const std::size_t out_dim = w.shape[1];
    const bool has_bias = bias.data != nullptr;
    if (has_bias && (bias.rank() != 1 || bias.shape[0] != out_dim)) {
        throw ShapeError("linear: bias " + shape_str(bias.shape) + " incompatible with weight " +
                         shape_str(w.shape));
    }
    const std::size_t rows = x.numel() / in;
    std::vector<std::size_t> out_shape = x.shape;
    out_shape.back() = out_dim;

    const bool rg = has_bias ? detail::any_requires_grad(x, w, bias) : detail::any_requires_grad(x, w);
    Tensor<T> out = detail::make_result<T>(std::move(out_shape), rg);
    if (has_bias) {
        const T* pb = bias.data->data();
        T* po = out.data->data();
        parallel_for(rows, [&](std::size_t lo, std::size_t hi) {
            for (std::size_t r = lo; r < hi; ++r) {
                T* row = po + r * out_dim;
                for (std::size_t j = 0; j < out_dim; ++j) row[j] = pb[j];
            }
        });
    }
    detail::gemm_nn(out.data->data(), x.data->data(), w.data->data(), rows, in, out_dim);

    std::vector<Tensor<T>> parents = {x, w};
    if (has_bias) parents.push_back(bias);
    detail::attach_node(out, std::move(parents), [rows, in, out_dim, has_bias](Node<T>& node) {
        const Tensor<T>& x = node.parents[0];
        const Tensor<T>& w = node.parents[1];
        const T* g = node.out_grad->v.data();
        if (x.requires_grad) {
            ensure_grad(x);
            detail::gemm_nt(x.grad->v.data(), g, w.data->data(), rows, out_dim, in);
        }
        if (w.requires_grad) {
            ensure_grad(w);
            detail::gemm_tn(w.grad->v.data(), x.data->data(), g, in, rows, out_dim);
        }
        if (has_bias && node.parents[2].requires_grad) {
            const Tensor<T>& b = node.parents[2];
            ensure_grad(b);
            T* pg = b.grad->v.data();
            for (std::size_t r = 0; r < rows; ++r) {
                const T* grow = g + r * out_dim;
                for (std::size_t j = 0; j < out_dim; ++j) pg[j] += grow[j];
            }
        }
    });
    return out;
}

template <typename T>
Tensor<T> linear(const Tensor<T>& x, const Tensor<T>& w) {
    return linear(x, w, Tensor<T>());
}

// ---------------------------------------------------------------------------
// Nonlinear ops
// ---------------------------------------------------------------------------

// Max-subtraction stabilized softmax along `axis`.
template <typename T>
Tensor<T> softmax(const Tensor<T>& x, std::size_t axis) {
    if (axis >= x.rank()) {
        throw ShapeError("softmax: axis " + std::to_string(axis) + " invalid for " + shape_str(x.shape));
    }
    const std::size_t len = x.shape[axis];
    std::size_t inner = 1;
    for (std::size_t i = axis + 1; i < x.rank(); ++i) inner *= x.shape[i];
    const std::size_t outer = x.numel() / (len * inner);

    Tensor<T> out = detail::make_result<T>(x.shape, x.requires_grad);
    const T* px = x.data->data();
    T* po = out.data->data();
    parallel_for(outer, [&](std::size_t olo, std::size_t ohi) {
        for (std::size_t o = olo; o < ohi; ++o) {
            for (std::size_t j = 0; j < inner; ++j) {
                const std::size_t base = o * len * inner + j;
                T mx = px[base];
                for (std::size_t i = 1; i < len; ++i) mx = std::max(mx, px[base + i * inner]);
                T sum = T(0);
                for (std::size_t i = 0; i < len; ++i) {
                    const T e = std::exp(px[base + i * inner] - mx);
                    po[base + i * inner] = e;
                    sum += e;
                }
                const T inv = T(1) / sum;
                for (std::size_t i = 0; i < len; ++i) po[base + i * inner] *= inv;
            }
        }
    });
    auto y = out.data;  // saved output
    detail::attach_node(out, {x}, [y, len, inner, outer](Node<T>& node) {
        const Tensor<T>& p = node.parents[0];
        if (!p.requires_grad) return;
        ensure_grad(p);
        const T* g = node.out_grad->v.data();
        const T* py = y->data();
        T* pg = p.grad->v.data();
        parallel_for(outer, [&](std::size_t olo, std::size_t ohi) {
            for (std::size_t o = olo; o < ohi; ++o) {
                for (std::size_t j = 0; j < inner; ++j) {
                    const std::size_t base = o * len * inner + j;
                    T dot = T(0);
                    for (std::size_t i = 0; i < len; ++i) {
                        const std::size_t idx = base + i * inner;
                        dot += g[idx] * py[idx];
                    }
                    for (std::size_t i = 0; i < len; ++i) {
                        const std::size_t idx = base + i * inner;
                        pg[idx] += py[idx] * (g[idx] - dot);
                    }
                }
            }
        });
    });
    return out;
}

// Normalizes the last axis to zero mean / unit variance, then applies the
// per-channel affine. eps sits under the square root.
template <typename T>
Tensor<T> layer_norm(const Tensor<T>& x, const Tensor<T>& gamma, const Tensor<T>& beta, T eps) {
    const std::size_t c = x.shape.back();
    if (gamma.numel() != c || beta.numel() != c) {
        throw ShapeError("layer_norm: affine params " + shape_str(gamma.shape) + "/" +
                         shape_str(beta.shape) + " do not match last extent of " + shape_str(x.shape));
    }
    const std::size_t rows = x.numel() / c;
    Tensor<T> out = detail::make_result<T>(x.shape, detail::any_requires_grad(x, gamma, beta));
    auto xhat = std::make_shared<std::vector<T>>(x.numel());
    auto inv_std = std::make_shared<std::vector<T>>(rows);

    const T* px = x.data->data();
    const T* pgm = gamma.data->data();
    const T* pbt = beta.data->data();
    T* po = out.data->data();
    T* ph = xhat->data();
    T* pis = inv_std->data();
    parallel_for(rows, [&](std::size_t lo, std::size_t hi) {
        for (std::size_t r = lo; r < hi; ++r) {
            const T* row = px + r * c;
            T mean = T(0);
            for (std::size_t j = 0; j < c; ++j) mean += row[j];
            mean /= static_cast<T>(c);
            T var = T(0);
            for (std::size_t j = 0; j < c; ++j) {
                const T d = row[j] - mean;
                var += d * d;
            }
            var /= static_cast<T>(c);
            const T is = T(1) / std::sqrt(var + eps);
            pis[r] = is;
            for (std::size_t j = 0; j < c; ++j) {
                const T h = (row[j] - mean) * is;
                ph[r * c + j] = h;
                po[r * c + j] = h * pgm[j] + pbt[j];
            }
        }
    });

    detail::attach_node(out, {x, gamma, beta}, [xhat, inv_std, rows, c](Node<T>& node) {
        const Tensor<T>& x = node.parents[0];
        const Tensor<T>& gamma = node.parents[1];
        const Tensor<T>& beta = node.parents[2];
        const T* g = node.out_grad->v.data();
        const T* ph = xhat->data();
        const T* pgm = gamma.data->data();
        if (x.requires_grad) {
            ensure_grad(x);
            T* pg = x.grad->v.data();
            const T* pis = inv_std->data();
            parallel_for(rows, [&](std::size_t lo, std::size_t hi) {
                for (std::size_t r = lo; r < hi; ++r) {
                    const T* grow = g + r * c;
                    const T* hrow = ph + r * c;
                    T mean_h = T(0), mean_hx = T(0);
                    for (std::size_t j = 0; j < c; ++j) {
                        const T hg = grow[j] * pgm[j];
                        mean_h += hg;
                        mean_hx += hg * hrow[j];
                    }
                    mean_h /= static_cast<T>(c);
                    mean_hx /= static_cast<T>(c);
                    T* grad_row = pg + r * c;
                    for (std::size_t j = 0; j < c; ++j) {
                        const T hg = grow[j] * pgm[j];
                        grad_row[j] += (hg - mean_h - hrow[j] * mean_hx) * pis[r];
                    }
                }
            });
        }
        if (gamma.requires_grad) {
            ensure_grad(gamma);
            T* pg = gamma.grad->v.data();
            for (std::size_t r = 0; r < rows; ++r) {
                for (std::size_t j = 0; j < c; ++j) pg[j] += g[r * c + j] * ph[r * c + j];
            }
        }
        if (beta.requires_grad) {
            ensure_grad(beta);
            T* pg = beta.grad->v.data();
            for (std::size_t r = 0; r < rows; ++r) {
                for (std::size_t j = 0; j < c; ++j) pg[j] += g[r * c + j];
            }
        }
    });
    return out;
}

// Exact Gaussian-error formulation x * Phi(x).
template <typename T>
Tensor<T> gelu(const Tensor<T>& x) {
    Tensor<T> out = detail::make_result<T>(x.shape, x.requires_grad);
    const T* px = x.data->data();
    T* po = out.data->data();
    parallel_for(out.numel(), [&](std::size_t lo, std::size_t hi) {
        for (std::size_t i = lo; i < hi; ++i) {
            const T v = px[i];
            po[i] = T(0.5) * v * (T(1) + std::erf(v * T(M_SQRT1_2)));
        }
    });
    detail::attach_node(out, {x}, [](Node<T>& node) {
        const Tensor<T>& p = node.parents[0];
        if (!p.requires_grad) return;
        ensure_grad(p);
        const T* g = node.out_grad->v.data();
        const T* px = p.data->data();
        T* pg = p.grad->v.data();
        const T inv_sqrt_2pi = T(1) / std::sqrt(T(2) * T(M_PI));
        parallel_for(node.out_grad->v.size(), [&](std::size_t lo, std::size_t hi) {
            for (std::size_t i = lo; i < hi; ++i) {
                const T v = px[i];
                const T phi = T(0.5) * (T(1) + std::erf(v * T(M_SQRT1_2)));
                const T pdf = std::exp(T(-0.5) * v * v) * inv_sqrt_2pi;
                pg[i] += g[i] * (phi + v * pdf);
            }
        });
    });
    return out;
}

template <typename T>
Tensor<T> mean_axis(const Tensor<T>& x, std::size_t axis) {
    if (axis >= x.rank()) {
        throw ShapeError("mean_axis: axis " + std::to_string(axis) + " invalid for " + shape_str(x.shape));
    }
    const std::size_t len = x.shape[axis];
    std::size_t inner = 1;
    for (std::size_t i = axis + 1; i < x.rank(); ++i) inner *= x.shape[i];
    const std::size_t outer = x.numel() / (len * inner);
    std::vector<std::size_t> out_shape;
    for (std::size_t i = 0; i < x.rank(); ++i) {
        if (i != axis) out_shape.push_back(x.shape[i]);
    }
    if (out_shape.empty()) out_shape.push_back(1);

    Tensor<T> out = detail::make_result<T>(std::move(out_shape), x.requires_grad);
    const T* px = x.data->data();
    T* po = out.data->data();
    const T inv = T(1) / static_cast<T>(len);
    parallel_for(outer, [&](std::size_t olo, std::size_t ohi) {
        for (std::size_t o = olo; o < ohi; ++o) {
            for (std::size_t j = 0; j < inner; ++j) {
                T acc = T(0);
                for (std::size_t i = 0; i < len; ++i) acc += px[(o * len + i) * inner + j];
                po[o * inner + j] = acc * inv;
            }
        }
    });
    detail::attach_node(out, {x}, [len, inner, outer, inv](Node<T>& node) {
        const Tensor<T>& p = node.parents[0];
        if (!p.requires_grad) return;
        ensure_grad(p);
        const T* g = node.out_grad->v.data();
        T* pg = p.grad->v.data();
        parallel_for(outer, [&](std::size_t olo, std::size_t ohi) {
            for (std::size_t o = olo; o < ohi; ++o) {
                for (std::size_t i = 0; i < len; ++i) {
                    for (std::size_t j = 0; j < inner; ++j) {
                        pg[(o * len + i) * inner + j] += g[o * inner + j] * inv;
                    }
                }
            }
        });
    });
    return out;
}

template <typename T>
Tensor<T> sum_all(const Tensor<T>& x) {
    Tensor<T> out = detail::make_result<T>({1}, x.requires_grad);
    (*out.data)[0] = static_cast<T>(pairwise_sum(*x.data));
    detail::attach_node(out, {x}, [](Node<T>& node) {
        const Tensor<T>& p = node.parents[0];
        if (!p.requires_grad) return;
        ensure_grad(p);
        const T g = node.out_grad->v[0];
        for (T& v : p.grad->v) v += g;
    });
    return out;
}

// out[i, :] = table[indices[i], :]; backward scatter-adds into the table.
template <typename T>
Tensor<T> gather_rows(const Tensor<T>& table, std::shared_ptr<std::vector<std::size_t>> indices) {
    if (table.rank() != 2) throw ShapeError("gather_rows: table must be rank 2, got " + shape_str(table.shape));
    const std::size_t cols = table.shape[1];
    const std::size_t k = indices->size();
    Tensor<T> out = detail::make_result<T>({k, cols}, table.requires_grad);
    const T* pt = table.data->data();
    T* po = out.data->data();
    for (std::size_t i = 0; i < k; ++i) {
        const std::size_t r = (*indices)[i];
        for (std::size_t j = 0; j < cols; ++j) po[i * cols + j] = pt[r * cols + j];
    }
    detail::attach_node(out, {table}, [indices, cols, k](Node<T>& node) {
        const Tensor<T>& p = node.parents[0];
        if (!p.requires_grad) return;
        ensure_grad(p);
        const T* g = node.out_grad->v.data();
        T* pg = p.grad->v.data();
        for (std::size_t i = 0; i < k; ++i) {
            const std::size_t r = (*indices)[i];
            for (std::size_t j = 0; j < cols; ++j) pg[r * cols + j] += g[i * cols + j];
        }
    });
    return out;
}

// ---------------------------------------------------------------------------
// Reverse-mode sweep
// ---------------------------------------------------------------------------

// Populates gradients for every requires_grad tensor reachable from `loss`.
// With release_intermediates the sweep frees each op-output gradient once its
// node has been processed; only leaf gradients survive (what training needs).
template <typename T>
void backward(const Tensor<T>& loss, bool release_intermediates = false) {
    if (loss.numel() != 1) {
        throw SpecError("backward: loss must be scalar, got " + shape_str(loss.shape));
    }
    if (!loss.requires_grad) return;

    // Deterministic postorder DFS over the recorded graph.
    std::vector<std::shared_ptr<Node<T>>> order;
    std::unordered_set<Node<T>*> visited;
    struct Frame {
        std::shared_ptr<Node<T>> node;
        std::size_t next_parent = 0;
    };
    std::vector<Frame> stack;
    if (loss.node && visited.insert(loss.node.get()).second) stack.push_back({loss.node});
    while (!stack.empty()) {
        Frame& f = stack.back();
        bool descended = false;
        while (f.next_parent < f.node->parents.size()) {
            const auto& pn = f.node->parents[f.next_parent++].node;
            if (pn && visited.insert(pn.get()).second) {
                stack.push_back({pn});
                descended = true;
                break;
            }
        }
        if (!descended && f.next_parent >= f.node->parents.size()) {
            order.push_back(f.node);
            stack.pop_back();
        }
    }

    ensure_grad(loss);
    loss.grad->v[0] = T(1);

    for (std::size_t i = order.size(); i-- > 0;) {
        Node<T>& node = *order[i];
        if (node.out_grad && node.out_grad->v.empty()) {
            // Output never received gradient (disconnected via no-grad parent).
            continue;
        }
        if (node.backward) node.backward(node);
        if (release_intermediates) {
            bool shared_with_parent = false;
            for (const auto& p : node.parents) {
                if (p.grad == node.out_grad) shared_with_parent = true;
            }
            if (!shared_with_parent && node.out_grad) {
                node.out_grad->v.clear();
                node.out_grad->v.shrink_to_fit();
            }
            node.parents.clear();
            node.backward = nullptr;
        }
    }
}

// Max over coordinates of |analytic - central difference| / max(1, |analytic|).
// f must be scalar-valued; the probe point is restored on exit.
template <typename T, typename F>
double grad_check(F&& f, Tensor<T>& point, T step) {
    point.zero_grad();
    Tensor<T> loss = f(point);
    if (loss.numel() != 1) throw SpecError("grad_check: f must be scalar-valued");
    backward(loss);
    ensure_grad(point);
    std::vector<T> analytic = point.grad->v;

    double worst = 0.0;
    std::vector<T>& vals = *point.data;
    for (std::size_t i = 0; i < vals.size(); ++i) {
        const T saved = vals[i];
        NoGradGuard ng;
        vals[i] = saved + step;
        const double up = static_cast<double>(f(point).item());
        vals[i] = saved - step;
        const double down = static_cast<double>(f(point).item());
        vals[i] = saved;
        const double numeric = (up - down) / (2.0 * static_cast<double>(step));
        const double a = static_cast<double>(analytic[i]);
        const double err = std::abs(a - numeric) / std::max(1.0, std::abs(a));
        worst = std::max(worst, err);
    }
    return worst;
}

}  // namespace cgdetect
