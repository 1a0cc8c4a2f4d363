#pragma once

// Dense double-precision tensor with reverse-mode automatic differentiation.
//
// Tensors are value types sharing a reference-counted payload. Operations on
// tracked tensors record a backward rule and their input edges; backward()
// on a scalar walks the graph once in reverse topological order and
// accumulates gradients into every tracked leaf. Gradients on leaves persist
// across backward calls until zero_grad(), so repeated backward passes
// accumulate.
//
// Shapes are strict: elementwise ops require identical shapes, and the only
// broadcasting is the trailing-axis affine used by row-vector ops
// (add_rowvec / mul_rowvec / layer_norm gain+bias). Matrix products are
// delegated to Eigen over the same row-major buffers.

#include <Eigen/Core>

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <memory>
#include <numeric>
#include <stdexcept>
#include <string>
#include <unordered_set>
#include <vector>

#include "reenact/rng.hpp"

namespace reenact {

using Shape = std::vector<int64_t>;

// All numeric buffers are 64-byte aligned. Eigen's vectorized kernels peel
// scalar prologues up to the SIMD alignment boundary; with a fixed allocation
// alignment that peel length is identical for every buffer, which keeps all
// results bitwise reproducible run to run.
template <typename T>
struct AlignedAllocator {
    using value_type = T;
    static constexpr size_t kAlign = 64;

    AlignedAllocator() = default;
    template <typename U>
    AlignedAllocator(const AlignedAllocator<U>&) {}

    T* allocate(size_t n) {
        size_t bytes = (n * sizeof(T) + kAlign - 1) / kAlign * kAlign;
        void* p = std::aligned_alloc(kAlign, bytes);
        if (p == nullptr) throw std::bad_alloc();
        return static_cast<T*>(p);
    }
    void deallocate(T* p, size_t) { std::free(p); }

    // Value-constructions keep their arguments; bare default construction of
    // trivial types is skipped, so sized vector construction does not zero
    // buffers that an op is about to overwrite entirely.
    template <typename U, typename... Args>
    void construct(U* p, Args&&... args) {
        ::new (static_cast<void*>(p)) U(std::forward<Args>(args)...);
    }
    template <typename U>
    void construct(U* p) {
        if constexpr (!std::is_trivially_default_constructible_v<U>)
            ::new (static_cast<void*>(p)) U();
    }

    template <typename U>
    bool operator==(const AlignedAllocator<U>&) const { return true; }
};

using dvec = std::vector<double, AlignedAllocator<double>>;

inline bool operator==(const dvec& a, const std::vector<double>& b) {
    return a.size() == b.size() && std::equal(a.begin(), a.end(), b.begin());
}
inline bool operator==(const std::vector<double>& a, const dvec& b) { return b == a; }

inline dvec to_dvec(const std::vector<double>& v) { return dvec(v.begin(), v.end()); }

class DimError : public std::invalid_argument {
public:
    using std::invalid_argument::invalid_argument;
};

class ContractError : public std::logic_error {
public:
    using std::logic_error::logic_error;
};

inline int64_t shape_numel(const Shape& s) {
    int64_t n = 1;
    for (int64_t d : s) n *= d;
    return n;
}

inline std::string shape_str(const Shape& s) {
    std::string out = "[";
    for (size_t i = 0; i < s.size(); ++i) {
        if (i) out += ", ";
        out += std::to_string(s[i]);
    }
    return out + "]";
}

namespace detail {

inline thread_local int no_grad_depth = 0;

struct TensorImpl;
using TensorImplPtr = std::shared_ptr<TensorImpl>;

struct TensorImpl {
    Shape shape;
    dvec data;
    bool requires_grad = false;
    dvec grad;  // allocated on first accumulation
    std::vector<TensorImplPtr> parents;
    std::function<void(const TensorImpl&)> backprop;

    int64_t numel() const { return static_cast<int64_t>(data.size()); }
    bool is_leaf() const { return parents.empty(); }
    bool tracked() const { return requires_grad || backprop != nullptr; }

    void accumulate(const double* g, int64_t n) {
        if (grad.empty()) grad.assign(data.size(), 0.0);
        for (int64_t i = 0; i < n; ++i) grad[static_cast<size_t>(i)] += g[i];
    }
};

}  // namespace detail

// Disables graph recording for the enclosing scope (inference paths).
struct NoGradGuard {
    NoGradGuard() { ++detail::no_grad_depth; }
    ~NoGradGuard() { --detail::no_grad_depth; }
    NoGradGuard(const NoGradGuard&) = delete;
    NoGradGuard& operator=(const NoGradGuard&) = delete;
};

inline bool grad_enabled() { return detail::no_grad_depth == 0; }

class Tensor {
public:
    Tensor() = default;

    explicit Tensor(Shape shape, double fill = 0.0)
        : impl_(std::make_shared<detail::TensorImpl>()) {
        validate_shape(shape);
        impl_->shape = std::move(shape);
        impl_->data.assign(static_cast<size_t>(shape_numel(impl_->shape)), fill);
    }

    Tensor(Shape shape, dvec data)
        : impl_(std::make_shared<detail::TensorImpl>()) {
        validate_shape(shape);
        if (shape_numel(shape) != static_cast<int64_t>(data.size()))
            throw DimError("tensor data length " + std::to_string(data.size()) +
                           " does not match shape " + shape_str(shape));
        impl_->shape = std::move(shape);
        impl_->data = std::move(data);
    }

    Tensor(Shape shape, const std::vector<double>& data)
        : Tensor(std::move(shape), to_dvec(data)) {}

    Tensor(Shape shape, std::initializer_list<double> data)
        : Tensor(std::move(shape), dvec(data.begin(), data.end())) {}

    static Tensor zeros(Shape shape) { return Tensor(std::move(shape), 0.0); }
    static Tensor full(Shape shape, double v) { return Tensor(std::move(shape), v); }

    static Tensor randn(Shape shape, Rng& rng) {
        Tensor t(std::move(shape));
        for (auto& x : t.impl_->data) x = rng.gaussian();
        return t;
    }

    static Tensor uniform(Shape shape, Rng& rng, double lo, double hi) {
        Tensor t(std::move(shape));
        for (auto& x : t.impl_->data) x = rng.uniform(lo, hi);
        return t;
    }

    bool defined() const { return impl_ != nullptr; }
    const Shape& shape() const { return impl_->shape; }
    int64_t numel() const { return impl_->numel(); }
    int64_t dim(size_t i) const { return impl_->shape.at(i); }
    size_t rank() const { return impl_->shape.size(); }

    double* data() { return impl_->data.data(); }
    const double* data() const { return impl_->data.data(); }
    dvec& vec() { return impl_->data; }
    const dvec& vec() const { return impl_->data; }

    // 2-D element access
    double& at(int64_t r, int64_t c) {
        return impl_->data[static_cast<size_t>(r * impl_->shape[1] + c)];
    }
    double at(int64_t r, int64_t c) const {
        return impl_->data[static_cast<size_t>(r * impl_->shape[1] + c)];
    }

    double value() const {
        if (numel() != 1)
            throw ContractError("value(): tensor is not scalar, shape " + shape_str(shape()));
        return impl_->data[0];
    }

    bool requires_grad() const { return impl_->requires_grad; }
    Tensor& set_requires_grad(bool v) {
        impl_->requires_grad = v;
        return *this;
    }

    bool has_grad() const { return !impl_->grad.empty(); }
    const dvec& grad() const {
        if (impl_->grad.empty()) impl_->grad.assign(impl_->data.size(), 0.0);
        return impl_->grad;
    }
    dvec& grad_mut() {
        if (impl_->grad.empty()) impl_->grad.assign(impl_->data.size(), 0.0);
        return impl_->grad;
    }
    void zero_grad() { impl_->grad.clear(); }

    Tensor detach() const {
        Tensor t;
        t.impl_ = std::make_shared<detail::TensorImpl>();
        t.impl_->shape = impl_->shape;
        t.impl_->data = impl_->data;
        return t;
    }

    Tensor clone_data() const { return detach(); }

    bool same_impl(const Tensor& o) const { return impl_ == o.impl_; }

    // Reverse-mode sweep from a scalar. Gradients of interior nodes are
    // reset each call; leaf gradients accumulate across calls.
    void backward() const {
        if (numel() != 1)
            throw ContractError("backward: loss must be scalar, got shape " + shape_str(shape()));
        if (!impl_->tracked())
            throw ContractError("backward: loss is not connected to any tracked tensor");

        std::vector<detail::TensorImpl*> order;
        topo_sort(order);
        for (auto* node : order)
            if (!node->is_leaf()) node->grad.clear();
        impl_->accumulate(&kOne, 1);
        for (auto it = order.rbegin(); it != order.rend(); ++it) {
            detail::TensorImpl* node = *it;
            if (node->backprop && !node->grad.empty()) node->backprop(*node);
        }
    }

    detail::TensorImplPtr impl() const { return impl_; }

    // Internal: construct an op result and attach its backward rule.
    static Tensor make_op(Shape shape, dvec data,
                          std::vector<Tensor> inputs,
                          std::function<void(const detail::TensorImpl&)> backprop) {
        Tensor t(std::move(shape), std::move(data));
        bool track = false;
        if (grad_enabled())
            for (const auto& in : inputs)
                if (in.impl_->tracked()) track = true;
        if (track) {
            t.impl_->requires_grad = true;
            t.impl_->parents.reserve(inputs.size());
            for (auto& in : inputs) t.impl_->parents.push_back(in.impl_);
            t.impl_->backprop = std::move(backprop);
        }
        return t;
    }

private:
    static inline const double kOne = 1.0;

    static void validate_shape(const Shape& s) {
        for (int64_t d : s)
            if (d <= 0) throw DimError("shape dimensions must be positive, got " + shape_str(s));
    }

    void topo_sort(std::vector<detail::TensorImpl*>& order) const {
        // Iterative post-order DFS; each node appears once, parents first.
        std::unordered_set<detail::TensorImpl*> visited;
        struct Frame {
            detail::TensorImpl* node;
            size_t next_child;
        };
        std::vector<Frame> stack;
        stack.push_back({impl_.get(), 0});
        visited.insert(impl_.get());
        while (!stack.empty()) {
            Frame& f = stack.back();
            if (f.next_child < f.node->parents.size()) {
                detail::TensorImpl* child = f.node->parents[f.next_child++].get();
                if (visited.insert(child).second) stack.push_back({child, 0});
            } else {
                order.push_back(f.node);
                stack.pop_back();
            }
        }
    }

    detail::TensorImplPtr impl_;
};

namespace detail {

inline void check_same_shape(const Tensor& a, const Tensor& b, const char* op) {
    if (a.shape() != b.shape())
        throw DimError(std::string(op) + ": shape mismatch " + shape_str(a.shape()) +
                       " vs " + shape_str(b.shape()));
}

using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MapMat = Eigen::Map<RowMat>;
using CMapMat = Eigen::Map<const RowMat>;

// c (+)= op(a) * op(b) with optional transposes.
inline void gemm(const double* a, int64_t ar, int64_t ac, bool ta,
                 const double* b, int64_t br, int64_t bc, bool tb,
                 double* c, bool accumulate) {
    CMapMat A(a, ar, ac), B(b, br, bc);
    int64_t m = ta ? ac : ar;
    int64_t n = tb ? br : bc;
    MapMat C(c, m, n);
    if (!ta && !tb) {
        if (accumulate) C.noalias() += A * B; else C.noalias() = A * B;
    } else if (ta && !tb) {
        if (accumulate) C.noalias() += A.transpose() * B; else C.noalias() = A.transpose() * B;
    } else if (!ta && tb) {
        if (accumulate) C.noalias() += A * B.transpose(); else C.noalias() = A * B.transpose();
    } else {
        if (accumulate) C.noalias() += A.transpose() * B.transpose();
        else C.noalias() = A.transpose() * B.transpose();
    }
}

}  // namespace detail

// ---------------------------------------------------------------------------
// elementwise ops

inline Tensor add(const Tensor& a, const Tensor& b) {
    detail::check_same_shape(a, b, "add");
    dvec out(static_cast<size_t>(a.numel()));
    for (size_t i = 0; i < out.size(); ++i) out[i] = a.data()[i] + b.data()[i];
    auto ai = a.impl(), bi = b.impl();
    return Tensor::make_op(a.shape(), std::move(out), {a, b},
        [ai, bi](const detail::TensorImpl& self) {
            if (ai->tracked()) ai->accumulate(self.grad.data(), self.numel());
            if (bi->tracked()) bi->accumulate(self.grad.data(), self.numel());
        });
}

inline Tensor sub(const Tensor& a, const Tensor& b) {
    detail::check_same_shape(a, b, "sub");
    dvec out(static_cast<size_t>(a.numel()));
    for (size_t i = 0; i < out.size(); ++i) out[i] = a.data()[i] - b.data()[i];
    auto ai = a.impl(), bi = b.impl();
    return Tensor::make_op(a.shape(), std::move(out), {a, b},
        [ai, bi](const detail::TensorImpl& self) {
            if (ai->tracked()) ai->accumulate(self.grad.data(), self.numel());
            if (bi->tracked()) {
                if (bi->grad.empty()) bi->grad.assign(bi->data.size(), 0.0);
                for (int64_t i = 0; i < self.numel(); ++i)
                    bi->grad[static_cast<size_t>(i)] -= self.grad[static_cast<size_t>(i)];
            }
        });
}

inline Tensor mul(const Tensor& a, const Tensor& b) {
    detail::check_same_shape(a, b, "mul");
    dvec out(static_cast<size_t>(a.numel()));
    for (size_t i = 0; i < out.size(); ++i) out[i] = a.data()[i] * b.data()[i];
    auto ai = a.impl(), bi = b.impl();
    return Tensor::make_op(a.shape(), std::move(out), {a, b},
        [ai, bi](const detail::TensorImpl& self) {
            int64_t n = self.numel();
            if (ai->tracked()) {
                if (ai->grad.empty()) ai->grad.assign(ai->data.size(), 0.0);
                for (int64_t i = 0; i < n; ++i)
                    ai->grad[static_cast<size_t>(i)] +=
                        self.grad[static_cast<size_t>(i)] * bi->data[static_cast<size_t>(i)];
            }
            if (bi->tracked()) {
                if (bi->grad.empty()) bi->grad.assign(bi->data.size(), 0.0);
                for (int64_t i = 0; i < n; ++i)
                    bi->grad[static_cast<size_t>(i)] +=
                        self.grad[static_cast<size_t>(i)] * ai->data[static_cast<size_t>(i)];
            }
        });
}

inline Tensor scale(const Tensor& a, double c) {
    dvec out(static_cast<size_t>(a.numel()));
    for (size_t i = 0; i < out.size(); ++i) out[i] = a.data()[i] * c;
    auto ai = a.impl();
    return Tensor::make_op(a.shape(), std::move(out), {a},
        [ai, c](const detail::TensorImpl& self) {
            if (!ai->tracked()) return;
            if (ai->grad.empty()) ai->grad.assign(ai->data.size(), 0.0);
            for (int64_t i = 0; i < self.numel(); ++i)
                ai->grad[static_cast<size_t>(i)] += c * self.grad[static_cast<size_t>(i)];
        });
}

inline Tensor add_scalar(const Tensor& a, double c) {
    dvec out(static_cast<size_t>(a.numel()));
    for (size_t i = 0; i < out.size(); ++i) out[i] = a.data()[i] + c;
    auto ai = a.impl();
    return Tensor::make_op(a.shape(), std::move(out), {a},
        [ai](const detail::TensorImpl& self) {
            if (ai->tracked()) ai->accumulate(self.grad.data(), self.numel());
        });
}

// ---------------------------------------------------------------------------
// matmul / transpose

inline Tensor matmul(const Tensor& a, const Tensor& b) {
    if (a.rank() != 2 || b.rank() != 2 || a.dim(1) != b.dim(0))
        throw DimError("matmul: incompatible shapes " + shape_str(a.shape()) +
                       " vs " + shape_str(b.shape()));
    int64_t m = a.dim(0), k = a.dim(1), n = b.dim(1);
    dvec out(static_cast<size_t>(m * n));
    detail::gemm(a.data(), m, k, false, b.data(), k, n, false, out.data(), false);
    auto ai = a.impl(), bi = b.impl();
    return Tensor::make_op({m, n}, std::move(out), {a, b},
        [ai, bi, m, k, n](const detail::TensorImpl& self) {
            if (ai->tracked()) {
                if (ai->grad.empty()) ai->grad.assign(ai->data.size(), 0.0);
                // dA += g . B^T
                detail::gemm(self.grad.data(), m, n, false, bi->data.data(), k, n, true,
                             ai->grad.data(), true);
            }
            if (bi->tracked()) {
                if (bi->grad.empty()) bi->grad.assign(bi->data.size(), 0.0);
                // dB += A^T . g
                detail::gemm(ai->data.data(), m, k, true, self.grad.data(), m, n, false,
                             bi->grad.data(), true);
            }
        });
}

inline Tensor transpose(const Tensor& a) {
    if (a.rank() != 2)
        throw DimError("transpose: expected rank-2 tensor, got " + shape_str(a.shape()));
    int64_t r = a.dim(0), c = a.dim(1);
    dvec out(static_cast<size_t>(r * c));
    for (int64_t i = 0; i < r; ++i)
        for (int64_t j = 0; j < c; ++j)
            out[static_cast<size_t>(j * r + i)] = a.data()[i * c + j];
    auto ai = a.impl();
    return Tensor::make_op({c, r}, std::move(out), {a},
        [ai, r, c](const detail::TensorImpl& self) {
            if (!ai->tracked()) return;
            if (ai->grad.empty()) ai->grad.assign(ai->data.size(), 0.0);
            for (int64_t i = 0; i < c; ++i)
                for (int64_t j = 0; j < r; ++j)
                    ai->grad[static_cast<size_t>(j * c + i)] += self.grad[static_cast<size_t>(i * r + j)];
        });
}

// ---------------------------------------------------------------------------
// softmax / layer_norm / gelu

namespace detail {

// Row-stabilized softmax on a contiguous [rows, d] buffer, in place.
// Each row is contiguous, so every step runs through Eigen's vectorized
// array kernels without strided access.
inline void softmax_rows_inplace(double* data, int64_t rows, int64_t d) {
    for (int64_t r = 0; r < rows; ++r) {
        Eigen::Map<Eigen::ArrayXd> row(data + r * d, d);
        double mx = row.maxCoeff();
        row = (row - mx).exp();
        row /= row.sum();
    }
}

}  // namespace detail

// Softmax along the last axis, stabilized by per-row max subtraction.
inline Tensor softmax(const Tensor& x) {
    if (x.rank() == 0) throw DimError("softmax: undefined tensor");
    int64_t d = x.shape().back();
    int64_t rows = x.numel() / d;
    dvec out(x.vec());
    detail::softmax_rows_inplace(out.data(), rows, d);
    auto xi = x.impl();
    // ds = s * (g - sum(g*s)) per row; s is read back from self.data
    return Tensor::make_op(x.shape(), std::move(out), {x},
        [xi, rows, d](const detail::TensorImpl& self) {
            if (!xi->tracked()) return;
            if (xi->grad.empty()) xi->grad.assign(xi->data.size(), 0.0);
            for (int64_t r = 0; r < rows; ++r) {
                const double* s = self.data.data() + r * d;
                const double* g = self.grad.data() + r * d;
                double dot = 0.0;
                for (int64_t i = 0; i < d; ++i) dot += g[i] * s[i];
                double* gx = xi->grad.data() + r * d;
                for (int64_t i = 0; i < d; ++i) gx[i] += s[i] * (g[i] - dot);
            }
        });
}

// Per-row normalization over the trailing axis followed by the affine
// (gain, bias). gain and bias must have numel equal to the trailing axis.
inline Tensor layer_norm(const Tensor& x, const Tensor& gain, const Tensor& bias,
                         double eps = 1e-5) {
    if (eps <= 0.0) throw ContractError("layer_norm: eps must be positive");
    int64_t d = x.shape().back();
    if (gain.numel() != d || bias.numel() != d)
        throw DimError("layer_norm: gain/bias length must match trailing axis " +
                       std::to_string(d) + ", got " + shape_str(gain.shape()) + " and " +
                       shape_str(bias.shape()));
    int64_t rows = x.numel() / d;
    dvec out(static_cast<size_t>(x.numel()));
    auto xhat = std::make_shared<dvec>(static_cast<size_t>(x.numel()));
    auto rstd = std::make_shared<dvec>(static_cast<size_t>(rows));
    for (int64_t r = 0; r < rows; ++r) {
        const double* in = x.data() + r * d;
        double mean = 0.0;
        for (int64_t i = 0; i < d; ++i) mean += in[i];
        mean /= static_cast<double>(d);
        double var = 0.0;
        for (int64_t i = 0; i < d; ++i) {
            double v = in[i] - mean;
            var += v * v;
        }
        var /= static_cast<double>(d);
        double rs = 1.0 / std::sqrt(var + eps);
        (*rstd)[static_cast<size_t>(r)] = rs;
        double* xh = xhat->data() + r * d;
        double* o = out.data() + r * d;
        for (int64_t i = 0; i < d; ++i) {
            xh[i] = (in[i] - mean) * rs;
            o[i] = xh[i] * gain.data()[i] + bias.data()[i];
        }
    }
    auto xi = x.impl(), gi = gain.impl(), bi = bias.impl();
    return Tensor::make_op(x.shape(), std::move(out), {x, gain, bias},
        [xi, gi, bi, xhat, rstd, rows, d](const detail::TensorImpl& self) {
            if (bi->tracked()) {
                if (bi->grad.empty()) bi->grad.assign(bi->data.size(), 0.0);
                for (int64_t r = 0; r < rows; ++r)
                    for (int64_t i = 0; i < d; ++i)
                        bi->grad[static_cast<size_t>(i)] += self.grad[static_cast<size_t>(r * d + i)];
            }
            if (gi->tracked()) {
                if (gi->grad.empty()) gi->grad.assign(gi->data.size(), 0.0);
                for (int64_t r = 0; r < rows; ++r)
                    for (int64_t i = 0; i < d; ++i)
                        gi->grad[static_cast<size_t>(i)] +=
                            self.grad[static_cast<size_t>(r * d + i)] * (*xhat)[static_cast<size_t>(r * d + i)];
            }
            if (xi->tracked()) {
                if (xi->grad.empty()) xi->grad.assign(xi->data.size(), 0.0);
                for (int64_t r = 0; r < rows; ++r) {
                    const double* g = self.grad.data() + r * d;
                    const double* xh = xhat->data() + r * d;
                    double rs = (*rstd)[static_cast<size_t>(r)];
                    double mean_dxh = 0.0, mean_dxh_xh = 0.0;
                    for (int64_t i = 0; i < d; ++i) {
                        double dxh = g[i] * gi->data[static_cast<size_t>(i)];
                        mean_dxh += dxh;
                        mean_dxh_xh += dxh * xh[i];
                    }
                    mean_dxh /= static_cast<double>(d);
                    mean_dxh_xh /= static_cast<double>(d);
                    double* gx = xi->grad.data() + r * d;
                    for (int64_t i = 0; i < d; ++i) {
                        double dxh = g[i] * gi->data[static_cast<size_t>(i)];
                        gx[i] += rs * (dxh - mean_dxh - xh[i] * mean_dxh_xh);
                    }
                }
            }
        });
}

// GELU, tanh approximation: 0.5 x (1 + tanh(sqrt(2/pi) (x + 0.044715 x^3))).
// The tanh values are computed vectorized and kept for the backward pass.
inline Tensor gelu(const Tensor& x) {
    constexpr double kC = 0.7978845608028654;  // sqrt(2/pi)
    constexpr double kA = 0.044715;
    int64_t n = x.numel();
    auto tanh_u = std::make_shared<dvec>(static_cast<size_t>(n));
    {
        // Eigen vectorizes exp for doubles but not tanh, so evaluate
        // tanh(u) = 1 - 2 / (exp(2u) + 1); exact at both saturation ends.
        using Arr = Eigen::Map<Eigen::ArrayXd>;
        using CArr = Eigen::Map<const Eigen::ArrayXd>;
        CArr xv(x.data(), n);
        Arr tv(tanh_u->data(), n);
        tv = 1.0 - 2.0 / ((2.0 * kC * (xv + kA * xv.cube())).exp() + 1.0);
    }
    dvec out(static_cast<size_t>(n));
    for (int64_t i = 0; i < n; ++i)
        out[static_cast<size_t>(i)] = 0.5 * x.data()[i] * (1.0 + (*tanh_u)[static_cast<size_t>(i)]);
    auto xi = x.impl();
    return Tensor::make_op(x.shape(), std::move(out), {x},
        [xi, tanh_u](const detail::TensorImpl& self) {
            if (!xi->tracked()) return;
            if (xi->grad.empty()) xi->grad.assign(xi->data.size(), 0.0);
            for (int64_t i = 0; i < self.numel(); ++i) {
                double v = xi->data[static_cast<size_t>(i)];
                double t = (*tanh_u)[static_cast<size_t>(i)];
                double sech2 = 1.0 - t * t;
                double dd = 0.5 * (1.0 + t) + 0.5 * v * sech2 * kC * (1.0 + 3.0 * kA * v * v);
                xi->grad[static_cast<size_t>(i)] += self.grad[static_cast<size_t>(i)] * dd;
            }
        });
}

// ---------------------------------------------------------------------------
// concat / slice / gather

inline Tensor concat(const std::vector<Tensor>& ts, int axis) {
    if (ts.empty()) throw DimError("concat: empty input list");
    const Shape& s0 = ts[0].shape();
    size_t rank = s0.size();
    if (axis < 0 || static_cast<size_t>(axis) >= rank)
        throw DimError("concat: axis " + std::to_string(axis) + " out of range for rank " +
                       std::to_string(rank));
    int64_t axis_total = 0;
    for (const auto& t : ts) {
        if (t.rank() != rank)
            throw DimError("concat: rank mismatch " + shape_str(s0) + " vs " + shape_str(t.shape()));
        for (size_t i = 0; i < rank; ++i)
            if (i != static_cast<size_t>(axis) && t.shape()[i] != s0[i])
                throw DimError("concat: shape mismatch outside axis: " + shape_str(s0) +
                               " vs " + shape_str(t.shape()));
        axis_total += t.shape()[static_cast<size_t>(axis)];
    }
    Shape out_shape = s0;
    out_shape[static_cast<size_t>(axis)] = axis_total;

    int64_t outer = 1;
    for (size_t i = 0; i < static_cast<size_t>(axis); ++i) outer *= s0[i];
    int64_t inner = 1;
    for (size_t i = static_cast<size_t>(axis) + 1; i < rank; ++i) inner *= s0[i];

    dvec out(static_cast<size_t>(shape_numel(out_shape)));
    int64_t offset = 0;  // in axis units
    for (const auto& t : ts) {
        int64_t a = t.shape()[static_cast<size_t>(axis)];
        for (int64_t o = 0; o < outer; ++o)
            std::copy_n(t.data() + o * a * inner, a * inner,
                        out.data() + (o * axis_total + offset) * inner);
        offset += a;
    }

    std::vector<detail::TensorImplPtr> impls;
    std::vector<int64_t> axis_sizes;
    for (const auto& t : ts) {
        impls.push_back(t.impl());
        axis_sizes.push_back(t.shape()[static_cast<size_t>(axis)]);
    }
    return Tensor::make_op(out_shape, std::move(out), ts,
        [impls, axis_sizes, outer, inner, axis_total](const detail::TensorImpl& self) {
            int64_t offset = 0;
            for (size_t k = 0; k < impls.size(); ++k) {
                const auto& pi = impls[k];
                int64_t a = axis_sizes[k];
                if (pi->tracked()) {
                    if (pi->grad.empty()) pi->grad.assign(pi->data.size(), 0.0);
                    for (int64_t o = 0; o < outer; ++o) {
                        const double* g = self.grad.data() + (o * axis_total + offset) * inner;
                        double* dst = pi->grad.data() + o * a * inner;
                        for (int64_t i = 0; i < a * inner; ++i) dst[i] += g[i];
                    }
                }
                offset += a;
            }
        });
}

inline Tensor slice(const Tensor& x, int axis, int64_t start, int64_t len) {
    size_t rank = x.rank();
    if (axis < 0 || static_cast<size_t>(axis) >= rank)
        throw DimError("slice: axis " + std::to_string(axis) + " out of range for rank " +
                       std::to_string(rank));
    int64_t a = x.shape()[static_cast<size_t>(axis)];
    if (start < 0 || len <= 0 || start + len > a)
        throw DimError("slice: range [" + std::to_string(start) + ", " +
                       std::to_string(start + len) + ") out of bounds for axis size " +
                       std::to_string(a));
    Shape out_shape = x.shape();
    out_shape[static_cast<size_t>(axis)] = len;
    int64_t outer = 1;
    for (size_t i = 0; i < static_cast<size_t>(axis); ++i) outer *= x.shape()[i];
    int64_t inner = 1;
    for (size_t i = static_cast<size_t>(axis) + 1; i < rank; ++i) inner *= x.shape()[i];

    dvec out(static_cast<size_t>(shape_numel(out_shape)));
    for (int64_t o = 0; o < outer; ++o)
        std::copy_n(x.data() + (o * a + start) * inner, len * inner, out.data() + o * len * inner);

    auto xi = x.impl();
    return Tensor::make_op(out_shape, std::move(out), {x},
        [xi, outer, inner, a, start, len](const detail::TensorImpl& self) {
            if (!xi->tracked()) return;
            if (xi->grad.empty()) xi->grad.assign(xi->data.size(), 0.0);
            for (int64_t o = 0; o < outer; ++o) {
                const double* g = self.grad.data() + o * len * inner;
                double* dst = xi->grad.data() + (o * a + start) * inner;
                for (int64_t i = 0; i < len * inner; ++i) dst[i] += g[i];
            }
        });
}

// Gather rows of a rank-2 tensor; backward scatter-adds.
inline Tensor gather_rows(const Tensor& x, const std::vector<int64_t>& rows) {
    if (x.rank() != 2)
        throw DimError("gather_rows: expected rank-2 tensor, got " + shape_str(x.shape()));
    int64_t r = x.dim(0), d = x.dim(1);
    for (int64_t idx : rows)
        if (idx < 0 || idx >= r)
            throw DimError("gather_rows: row index " + std::to_string(idx) +
                           " out of range [0, " + std::to_string(r) + ")");
    dvec out(rows.size() * static_cast<size_t>(d));
    for (size_t i = 0; i < rows.size(); ++i)
        std::copy_n(x.data() + rows[i] * d, d, out.data() + static_cast<int64_t>(i) * d);
    auto xi = x.impl();
    auto idx = std::make_shared<std::vector<int64_t>>(rows);
    return Tensor::make_op({static_cast<int64_t>(rows.size()), d}, std::move(out), {x},
        [xi, idx, d](const detail::TensorImpl& self) {
            if (!xi->tracked()) return;
            if (xi->grad.empty()) xi->grad.assign(xi->data.size(), 0.0);
            for (size_t i = 0; i < idx->size(); ++i) {
                const double* g = self.grad.data() + static_cast<int64_t>(i) * d;
                double* dst = xi->grad.data() + (*idx)[i] * d;
                for (int64_t j = 0; j < d; ++j) dst[j] += g[j];
            }
        });
}

// ---------------------------------------------------------------------------
// trailing-axis affine (the only permitted broadcast)

namespace detail {
inline void check_rowvec(const Tensor& x, const Tensor& v, const char* op) {
    int64_t d = x.shape().back();
    if (v.numel() != d)
        throw DimError(std::string(op) + ": vector length " + std::to_string(v.numel()) +
                       " does not match trailing axis of " + shape_str(x.shape()));
}
}  // namespace detail

inline Tensor mul_rowvec(const Tensor& x, const Tensor& v) {
    detail::check_rowvec(x, v, "mul_rowvec");
    int64_t d = x.shape().back();
    int64_t rows = x.numel() / d;
    dvec out(static_cast<size_t>(x.numel()));
    for (int64_t r = 0; r < rows; ++r)
        for (int64_t i = 0; i < d; ++i)
            out[static_cast<size_t>(r * d + i)] = x.data()[r * d + i] * v.data()[i];
    auto xi = x.impl(), vi = v.impl();
    return Tensor::make_op(x.shape(), std::move(out), {x, v},
        [xi, vi, rows, d](const detail::TensorImpl& self) {
            if (xi->tracked()) {
                if (xi->grad.empty()) xi->grad.assign(xi->data.size(), 0.0);
                for (int64_t r = 0; r < rows; ++r)
                    for (int64_t i = 0; i < d; ++i)
                        xi->grad[static_cast<size_t>(r * d + i)] +=
                            self.grad[static_cast<size_t>(r * d + i)] * vi->data[static_cast<size_t>(i)];
            }
            if (vi->tracked()) {
                if (vi->grad.empty()) vi->grad.assign(vi->data.size(), 0.0);
                for (int64_t r = 0; r < rows; ++r)
                    for (int64_t i = 0; i < d; ++i)
                        vi->grad[static_cast<size_t>(i)] +=
                            self.grad[static_cast<size_t>(r * d + i)] * xi->data[static_cast<size_t>(r * d + i)];
            }
        });
}

inline Tensor add_rowvec(const Tensor& x, const Tensor& v) {
    detail::check_rowvec(x, v, "add_rowvec");
    int64_t d = x.shape().back();
    int64_t rows = x.numel() / d;
    dvec out(static_cast<size_t>(x.numel()));
    for (int64_t r = 0; r < rows; ++r)
        for (int64_t i = 0; i < d; ++i)
            out[static_cast<size_t>(r * d + i)] = x.data()[r * d + i] + v.data()[i];
    auto xi = x.impl(), vi = v.impl();
    return Tensor::make_op(x.shape(), std::move(out), {x, v},
        [xi, vi, rows, d](const detail::TensorImpl& self) {
            if (xi->tracked()) xi->accumulate(self.grad.data(), self.numel());
            if (vi->tracked()) {
                if (vi->grad.empty()) vi->grad.assign(vi->data.size(), 0.0);
                for (int64_t r = 0; r < rows; ++r)
                    for (int64_t i = 0; i < d; ++i)
                        vi->grad[static_cast<size_t>(i)] += self.grad[static_cast<size_t>(r * d + i)];
            }
        });
}

// Tile a length-d vector into n identical rows.
inline Tensor broadcast_row(const Tensor& v, int64_t n) {
    if (n <= 0) throw DimError("broadcast_row: row count must be positive");
    int64_t d = v.numel();
    dvec out(static_cast<size_t>(n * d));
    for (int64_t r = 0; r < n; ++r) std::copy_n(v.data(), d, out.data() + r * d);
    auto vi = v.impl();
    return Tensor::make_op({n, d}, std::move(out), {v},
        [vi, n, d](const detail::TensorImpl& self) {
            if (!vi->tracked()) return;
            if (vi->grad.empty()) vi->grad.assign(vi->data.size(), 0.0);
            for (int64_t r = 0; r < n; ++r)
                for (int64_t i = 0; i < d; ++i)
                    vi->grad[static_cast<size_t>(i)] += self.grad[static_cast<size_t>(r * d + i)];
        });
}

// ---------------------------------------------------------------------------
// reductions

inline Tensor sum(const Tensor& x) {
    double acc = 0.0;
    for (int64_t i = 0; i < x.numel(); ++i) acc += x.data()[i];
    auto xi = x.impl();
    return Tensor::make_op({1}, {acc}, {x},
        [xi](const detail::TensorImpl& self) {
            if (!xi->tracked()) return;
            if (xi->grad.empty()) xi->grad.assign(xi->data.size(), 0.0);
            double g = self.grad[0];
            for (auto& v : xi->grad) v += g;
        });
}

inline Tensor mean(const Tensor& x) {
    return scale(sum(x), 1.0 / static_cast<double>(x.numel()));
}

// ---------------------------------------------------------------------------
// fused ops for the transformer hot path. Semantically these are
// compositions of the primitive ops above; fusing them avoids the
// intermediate buffers and graph nodes.

// x [S, in] . w [in, out] + b (b broadcast over rows)
inline Tensor linear(const Tensor& x, const Tensor& w, const Tensor& b) {
    if (x.rank() != 2 || w.rank() != 2 || x.dim(1) != w.dim(0) || b.numel() != w.dim(1))
        throw DimError("linear: incompatible shapes " + shape_str(x.shape()) + " . " +
                       shape_str(w.shape()) + " + " + shape_str(b.shape()));
    int64_t s = x.dim(0), in = x.dim(1), out = w.dim(1);
    dvec o(static_cast<size_t>(s * out));
    detail::gemm(x.data(), s, in, false, w.data(), in, out, false, o.data(), false);
    for (int64_t r = 0; r < s; ++r)
        for (int64_t j = 0; j < out; ++j) o[static_cast<size_t>(r * out + j)] += b.data()[j];
    auto xi = x.impl(), wi = w.impl(), bi = b.impl();
    return Tensor::make_op({s, out}, std::move(o), {x, w, b},
        [xi, wi, bi, s, in, out](const detail::TensorImpl& self) {
            if (xi->tracked()) {
                if (xi->grad.empty()) xi->grad.assign(xi->data.size(), 0.0);
                detail::gemm(self.grad.data(), s, out, false, wi->data.data(), in, out, true,
                             xi->grad.data(), true);
            }
            if (wi->tracked()) {
                if (wi->grad.empty()) wi->grad.assign(wi->data.size(), 0.0);
                detail::gemm(xi->data.data(), s, in, true, self.grad.data(), s, out, false,
                             wi->grad.data(), true);
            }
            if (bi->tracked()) {
                if (bi->grad.empty()) bi->grad.assign(bi->data.size(), 0.0);
                for (int64_t r = 0; r < s; ++r)
                    for (int64_t j = 0; j < out; ++j)
                        bi->grad[static_cast<size_t>(j)] += self.grad[static_cast<size_t>(r * out + j)];
            }
        });
}

// layer_norm without learned affine followed by the adaLN modulation
// (1 + scale) * xhat + shift; equivalent to layer_norm(x, 1+scale, shift).
inline Tensor ln_modulate(const Tensor& x, const Tensor& shift, const Tensor& scale,
                          double eps = 1e-5) {
    int64_t d = x.shape().back();
    if (shift.numel() != d || scale.numel() != d)
        throw DimError("ln_modulate: shift/scale length must match trailing axis " +
                       std::to_string(d));
    int64_t rows = x.numel() / d;
    dvec out(static_cast<size_t>(x.numel()));
    auto xhat = std::make_shared<dvec>(static_cast<size_t>(x.numel()));
    auto rstd = std::make_shared<dvec>(static_cast<size_t>(rows));
    for (int64_t r = 0; r < rows; ++r) {
        const double* in = x.data() + r * d;
        double mean_v = 0.0;
        for (int64_t i = 0; i < d; ++i) mean_v += in[i];
        mean_v /= static_cast<double>(d);
        double var = 0.0;
        for (int64_t i = 0; i < d; ++i) {
            double v = in[i] - mean_v;
            var += v * v;
        }
        var /= static_cast<double>(d);
        double rs = 1.0 / std::sqrt(var + eps);
        (*rstd)[static_cast<size_t>(r)] = rs;
        double* xh = xhat->data() + r * d;
        double* o = out.data() + r * d;
        for (int64_t i = 0; i < d; ++i) {
            xh[i] = (in[i] - mean_v) * rs;
            o[i] = xh[i] * (1.0 + scale.data()[i]) + shift.data()[i];
        }
    }
    auto xi = x.impl(), si = shift.impl(), ci = scale.impl();
    return Tensor::make_op(x.shape(), std::move(out), {x, shift, scale},
        [xi, si, ci, xhat, rstd, rows, d](const detail::TensorImpl& self) {
            if (si->tracked()) {
                if (si->grad.empty()) si->grad.assign(si->data.size(), 0.0);
                for (int64_t r = 0; r < rows; ++r)
                    for (int64_t i = 0; i < d; ++i)
                        si->grad[static_cast<size_t>(i)] += self.grad[static_cast<size_t>(r * d + i)];
            }
            if (ci->tracked()) {
                if (ci->grad.empty()) ci->grad.assign(ci->data.size(), 0.0);
                for (int64_t r = 0; r < rows; ++r)
                    for (int64_t i = 0; i < d; ++i)
                        ci->grad[static_cast<size_t>(i)] +=
                            self.grad[static_cast<size_t>(r * d + i)] * (*xhat)[static_cast<size_t>(r * d + i)];
            }
            if (xi->tracked()) {
                if (xi->grad.empty()) xi->grad.assign(xi->data.size(), 0.0);
                for (int64_t r = 0; r < rows; ++r) {
                    const double* g = self.grad.data() + r * d;
                    const double* xh = xhat->data() + r * d;
                    double rs = (*rstd)[static_cast<size_t>(r)];
                    double mean_dxh = 0.0, mean_dxh_xh = 0.0;
                    for (int64_t i = 0; i < d; ++i) {
                        double dxh = g[i] * (1.0 + ci->data[static_cast<size_t>(i)]);
                        mean_dxh += dxh;
                        mean_dxh_xh += dxh * xh[i];
                    }
                    mean_dxh /= static_cast<double>(d);
                    mean_dxh_xh /= static_cast<double>(d);
                    double* gx = xi->grad.data() + r * d;
                    for (int64_t i = 0; i < d; ++i) {
                        double dxh = g[i] * (1.0 + ci->data[static_cast<size_t>(i)]);
                        gx[i] += rs * (dxh - mean_dxh - xh[i] * mean_dxh_xh);
                    }
                }
            }
        });
}

// x + y * gate (gate broadcast over rows): the gated residual add.
inline Tensor gate_add(const Tensor& x, const Tensor& y, const Tensor& gate) {
    detail::check_same_shape(x, y, "gate_add");
    int64_t d = x.shape().back();
    if (gate.numel() != d)
        throw DimError("gate_add: gate length " + std::to_string(gate.numel()) +
                       " does not match trailing axis of " + shape_str(x.shape()));
    int64_t rows = x.numel() / d;
    dvec out(static_cast<size_t>(x.numel()));
    for (int64_t r = 0; r < rows; ++r)
        for (int64_t i = 0; i < d; ++i)
            out[static_cast<size_t>(r * d + i)] =
                x.data()[r * d + i] + y.data()[r * d + i] * gate.data()[i];
    auto xi = x.impl(), yi = y.impl(), gi = gate.impl();
    return Tensor::make_op(x.shape(), std::move(out), {x, y, gate},
        [xi, yi, gi, rows, d](const detail::TensorImpl& self) {
            if (xi->tracked()) xi->accumulate(self.grad.data(), self.numel());
            if (yi->tracked()) {
                if (yi->grad.empty()) yi->grad.assign(yi->data.size(), 0.0);
                for (int64_t r = 0; r < rows; ++r)
                    for (int64_t i = 0; i < d; ++i)
                        yi->grad[static_cast<size_t>(r * d + i)] +=
                            self.grad[static_cast<size_t>(r * d + i)] * gi->data[static_cast<size_t>(i)];
            }
            if (gi->tracked()) {
                if (gi->grad.empty()) gi->grad.assign(gi->data.size(), 0.0);
                for (int64_t r = 0; r < rows; ++r)
                    for (int64_t i = 0; i < d; ++i)
                        gi->grad[static_cast<size_t>(i)] +=
                            self.grad[static_cast<size_t>(r * d + i)] * yi->data[static_cast<size_t>(r * d + i)];
            }
        });
}

// Multi-head scaled dot-product attention over projected q/k/v [S, d].
// Head h occupies columns [h*dh, (h+1)*dh). Keys/values may be longer than
// the query sequence. The per-head softmax probabilities are kept for the
// backward pass.
inline Tensor multi_head_attention(const Tensor& q, const Tensor& k, const Tensor& v,
                                   int n_heads,
                                   std::vector<std::pair<int64_t, int64_t>>* probe_shapes = nullptr,
                                   double* probe_row_err = nullptr) {
    if (q.rank() != 2 || k.rank() != 2 || v.rank() != 2 || q.dim(1) != k.dim(1) ||
        k.shape() != v.shape())
        throw DimError("attention: incompatible shapes q=" + shape_str(q.shape()) +
                       " k=" + shape_str(k.shape()) + " v=" + shape_str(v.shape()));
    int64_t d = q.dim(1);
    if (n_heads < 1 || d % n_heads != 0)
        throw DimError("attention: width " + std::to_string(d) + " not divisible by " +
                       std::to_string(n_heads) + " heads");
    const int64_t sq = q.dim(0), skv = k.dim(0), dh = d / n_heads;
    const double alpha = 1.0 / std::sqrt(static_cast<double>(dh));

    using detail::CMapMat;
    using detail::MapMat;
    auto probs = std::make_shared<dvec>(
        static_cast<size_t>(n_heads) * sq * skv);
    dvec out(static_cast<size_t>(sq * d));

    // per-head columns are gathered into contiguous workspaces so every
    // product runs through the packed GEMM kernel at full speed
    auto gather_head = [](const double* src, int64_t rows, int64_t width, int64_t c0,
                          int64_t cols, double* dst) {
        for (int64_t r = 0; r < rows; ++r)
            std::copy_n(src + r * width + c0, cols, dst + r * cols);
    };
    auto scatter_head = [](const double* src, int64_t rows, int64_t cols, double* dst,
                           int64_t width, int64_t c0) {
        for (int64_t r = 0; r < rows; ++r)
            std::copy_n(src + r * cols, cols, dst + r * width + c0);
    };
    dvec qh(static_cast<size_t>(sq * dh)), kh(static_cast<size_t>(skv * dh)),
        vh(static_cast<size_t>(skv * dh)), oh(static_cast<size_t>(sq * dh));
    for (int h = 0; h < n_heads; ++h) {
        gather_head(q.data(), sq, d, h * dh, dh, qh.data());
        gather_head(k.data(), skv, d, h * dh, dh, kh.data());
        gather_head(v.data(), skv, d, h * dh, dh, vh.data());
        MapMat P(probs->data() + static_cast<size_t>(h) * sq * skv, sq, skv);
        P.noalias() = CMapMat(qh.data(), sq, dh) * CMapMat(kh.data(), skv, dh).transpose();
        P.array() *= alpha;
        detail::softmax_rows_inplace(P.data(), sq, skv);
        MapMat(oh.data(), sq, dh).noalias() = P * CMapMat(vh.data(), skv, dh);
        scatter_head(oh.data(), sq, dh, out.data(), d, h * dh);
    }
    if (probe_shapes != nullptr)
        for (int h = 0; h < n_heads; ++h) probe_shapes->emplace_back(sq, skv);
    if (probe_row_err != nullptr) {
        for (int64_t i = 0; i < n_heads * sq; ++i) {
            double s = 0.0;
            for (int64_t j = 0; j < skv; ++j) s += (*probs)[static_cast<size_t>(i * skv + j)];
            *probe_row_err = std::max(*probe_row_err, std::abs(s - 1.0));
        }
    }

    auto qi = q.impl(), ki = k.impl(), vi = v.impl();
    return Tensor::make_op({sq, d}, std::move(out), {q, k, v},
        [qi, ki, vi, probs, sq, skv, dh, n_heads, alpha](const detail::TensorImpl& self) {
            bool need_q = qi->tracked(), need_k = ki->tracked(), need_v = vi->tracked();
            if (!need_q && !need_k && !need_v) return;
            int64_t d = dh * n_heads;
            if (need_q && qi->grad.empty()) qi->grad.assign(qi->data.size(), 0.0);
            if (need_k && ki->grad.empty()) ki->grad.assign(ki->data.size(), 0.0);
            if (need_v && vi->grad.empty()) vi->grad.assign(vi->data.size(), 0.0);
            auto gather_head = [](const double* src, int64_t rows, int64_t width, int64_t c0,
                                  int64_t cols, double* dst) {
                for (int64_t r = 0; r < rows; ++r)
                    std::copy_n(src + r * width + c0, cols, dst + r * cols);
            };
            auto scatter_add_head = [](const double* src, int64_t rows, int64_t cols,
                                       double* dst, int64_t width, int64_t c0) {
                for (int64_t r = 0; r < rows; ++r)
                    for (int64_t c = 0; c < cols; ++c) dst[r * width + c0 + c] += src[r * cols + c];
            };
            dvec dp_buf(static_cast<size_t>(sq * skv));
            dvec gh(static_cast<size_t>(sq * dh)), th(static_cast<size_t>(std::max(sq, skv) * dh)),
                wh(static_cast<size_t>(std::max(sq, skv) * dh));
            MapMat dP(dp_buf.data(), sq, skv);
            for (int h = 0; h < n_heads; ++h) {
                CMapMat P(probs->data() + static_cast<size_t>(h) * sq * skv, sq, skv);
                gather_head(self.grad.data(), sq, d, h * dh, dh, gh.data());
                CMapMat Gh(gh.data(), sq, dh);
                if (need_v) {
                    MapMat dVh(th.data(), skv, dh);
                    dVh.noalias() = P.transpose() * Gh;
                    scatter_add_head(th.data(), skv, dh, vi->grad.data(), d, h * dh);
                }
                if (!need_q && !need_k) continue;
                gather_head(vi->data.data(), skv, d, h * dh, dh, wh.data());
                dP.noalias() = Gh * CMapMat(wh.data(), skv, dh).transpose();
                // softmax backward, in place on dP: dS = P .* (dP - rowdot(dP, P))
                for (int64_t r = 0; r < sq; ++r) {
                    const double* p = probs->data() + (static_cast<size_t>(h) * sq + r) * skv;
                    double* dp = dp_buf.data() + r * skv;
                    double dot = 0.0;
                    for (int64_t i = 0; i < skv; ++i) dot += dp[i] * p[i];
                    for (int64_t i = 0; i < skv; ++i) dp[i] = p[i] * (dp[i] - dot) * alpha;
                }
                if (need_q) {
                    gather_head(ki->data.data(), skv, d, h * dh, dh, wh.data());
                    MapMat dQh(th.data(), sq, dh);
                    dQh.noalias() = dP * CMapMat(wh.data(), skv, dh);
                    scatter_add_head(th.data(), sq, dh, qi->grad.data(), d, h * dh);
                }
                if (need_k) {
                    gather_head(qi->data.data(), sq, d, h * dh, dh, wh.data());
                    MapMat dKh(th.data(), skv, dh);
                    dKh.noalias() = dP.transpose() * CMapMat(wh.data(), skv, dh);
                    scatter_add_head(th.data(), skv, dh, ki->grad.data(), d, h * dh);
                }
            }
        });
}

// Mean squared error between same-shape tensors (fused for the hot path).
inline Tensor mse(const Tensor& a, const Tensor& b) {
    detail::check_same_shape(a, b, "mse");
    int64_t n = a.numel();
    double acc = 0.0;
    for (int64_t i = 0; i < n; ++i) {
        double d = a.data()[i] - b.data()[i];
        acc += d * d;
    }
    acc /= static_cast<double>(n);
    auto ai = a.impl(), bi = b.impl();
    return Tensor::make_op({1}, {acc}, {a, b},
        [ai, bi, n](const detail::TensorImpl& self) {
            double g = self.grad[0] * 2.0 / static_cast<double>(n);
            if (ai->tracked()) {
                if (ai->grad.empty()) ai->grad.assign(ai->data.size(), 0.0);
                for (int64_t i = 0; i < n; ++i)
                    ai->grad[static_cast<size_t>(i)] +=
                        g * (ai->data[static_cast<size_t>(i)] - bi->data[static_cast<size_t>(i)]);
            }
            if (bi->tracked()) {
                if (bi->grad.empty()) bi->grad.assign(bi->data.size(), 0.0);
                for (int64_t i = 0; i < n; ++i)
                    bi->grad[static_cast<size_t>(i)] -=
                        g * (ai->data[static_cast<size_t>(i)] - bi->data[static_cast<size_t>(i)]);
            }
        });
}

}  // namespace reenact
