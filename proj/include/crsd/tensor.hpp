#pragma once

// Dense double tensors with a reverse-mode tape. Ops record onto the graph
// installed by GraphScope; without an active scope they just compute values.
// The op set is the closed set this project needs; rank is at most 2.

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstdint>
#include <functional>
#include <memory>
#include <random>
#include <span>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "crsd/common.hpp"

namespace crsd {

class Graph;

namespace detail {
inline std::atomic<uint64_t>& graph_epoch_counter() {
    static std::atomic<uint64_t> counter{1};
    return counter;
}
inline thread_local std::vector<Graph*> g_graph_stack;
}  // namespace detail

class Tensor {
public:
    Tensor() = default;

    static Tensor zeros(Shape shape) {
        Tensor t;
        t.shape_ = std::move(shape);
        t.data_ = std::make_shared<std::vector<double>>(shape_numel(t.shape_), 0.0);
        return t;
    }

    static Tensor full(Shape shape, double v) {
        Tensor t = zeros(std::move(shape));
        std::fill(t.data_->begin(), t.data_->end(), v);
        return t;
    }

    static Tensor scalar(double v) { return full({1}, v); }

    static Tensor from(Shape shape, std::vector<double> values) {
        if (static_cast<long>(values.size()) != shape_numel(shape))
            throw std::invalid_argument("Tensor::from: " + shape_str(shape) + " does not hold " +
                                        std::to_string(values.size()) + " values");
        Tensor t;
        t.shape_ = std::move(shape);
        t.data_ = std::make_shared<std::vector<double>>(std::move(values));
        return t;
    }

    static Tensor randn(Shape shape, std::mt19937_64& rng, double stddev) {
        Tensor t = zeros(std::move(shape));
        std::normal_distribution<double> dist(0.0, stddev);
        for (double& v : *t.data_) v = dist(rng);
        return t;
    }

    const Shape& shape() const { return shape_; }
    long size() const { return data_ ? static_cast<long>(data_->size()) : 0; }
    bool defined() const { return static_cast<bool>(data_); }

    int rows() const { return shape_.empty() ? 0 : shape_[0]; }
    int cols() const { return shape_.size() < 2 ? 1 : shape_[1]; }

    std::vector<double>& values() { return *data_; }
    const std::vector<double>& values() const { return *data_; }
    const double* ptr() const { return data_->data(); }
    double* ptr() { return data_->data(); }

    double operator[](long i) const { return (*data_)[i]; }
    double at(int r, int c) const { return (*data_)[static_cast<long>(r) * cols() + c]; }

    double item() const {
        if (size() != 1)
            throw std::invalid_argument("Tensor::item: tensor of shape " + shape_str(shape_) +
                                        " is not a scalar");
        return (*data_)[0];
    }

    void set_requires_grad(bool on = true) {
        if (on && !grad_) grad_ = std::make_shared<std::vector<double>>(data_->size(), 0.0);
        if (!on) grad_.reset();
    }
    bool requires_grad() const { return static_cast<bool>(grad_); }
    std::vector<double>& grad() {
        if (!grad_) throw std::logic_error("Tensor::grad: requires_grad is not set");
        return *grad_;
    }
    const std::vector<double>& grad() const {
        if (!grad_) throw std::logic_error("Tensor::grad: requires_grad is not set");
        return *grad_;
    }
    void zero_grad() {
        if (grad_) std::fill(grad_->begin(), grad_->end(), 0.0);
    }

    const void* data_id() const { return data_.get(); }

private:
    Shape shape_;
    std::shared_ptr<std::vector<double>> data_;
    std::shared_ptr<std::vector<double>> grad_;

    // Tape bookkeeping; set when the tensor is recorded. Logically metadata,
    // hence mutable through const references in op signatures.
    mutable Graph* graph_ = nullptr;
    mutable uint64_t epoch_ = 0;
    mutable int node_ = -1;

    friend class Graph;
};

// Reverse-mode tape. Nodes are appended in construction order, which is a
// topological order by construction; backward walks it in reverse. Scratch
// gradients are reset on every backward call, so repeated backward calls
// accumulate (and double) only leaf-parameter gradients.
class Graph {
public:
    struct Node {
        Tensor out;
        std::vector<int> args;
        std::function<void(Graph&, int)> back;  // null for leaf nodes
    };

    Graph() : epoch_(detail::graph_epoch_counter().fetch_add(1)) {}
    Graph(const Graph&) = delete;
    Graph& operator=(const Graph&) = delete;

    int size() const { return static_cast<int>(nodes_.size()); }

    void clear() {
        nodes_.clear();
        grads_.clear();
        epoch_ = detail::graph_epoch_counter().fetch_add(1);
    }

    static Graph* current() {
        return detail::g_graph_stack.empty() ? nullptr : detail::g_graph_stack.back();
    }

    int wrap(const Tensor& t) {
        if (!t.defined()) throw std::invalid_argument("graph: undefined tensor used in an op");
        if (t.graph_ == this && t.epoch_ == epoch_ && t.node_ >= 0 &&
            t.node_ < static_cast<int>(nodes_.size()) &&
            nodes_[t.node_].out.data_id() == t.data_id())
            return t.node_;
        int id = static_cast<int>(nodes_.size());
        t.graph_ = this;
        t.epoch_ = epoch_;
        t.node_ = id;
        nodes_.push_back(Node{t, {}, nullptr});
        return id;
    }

    Tensor record(Tensor out, std::vector<int> args, std::function<void(Graph&, int)> back) {
        out.graph_ = this;
        out.epoch_ = epoch_;
        out.node_ = static_cast<int>(nodes_.size());
        nodes_.push_back(Node{out, std::move(args), std::move(back)});
        return out;
    }

    const Node& node(int i) const { return nodes_[i]; }

    // Scratch gradient of node i, valid during backward.
    const std::vector<double>& grad_of(int i) const { return grads_[i]; }
    std::vector<double>& grad_mut(int i) { return grads_[i]; }
    std::vector<double>& arg_grad(int node_id, int arg_pos) {
        return grads_[nodes_[node_id].args[arg_pos]];
    }
    const Tensor& arg(int node_id, int arg_pos) const {
        return nodes_[nodes_[node_id].args[arg_pos]].out;
    }

    void backward(const Tensor& loss) {
        if (!loss.defined() || loss.size() != 1)
            throw std::invalid_argument("backward: loss must be a scalar, got shape " +
                                        (loss.defined() ? shape_str(loss.shape()) : "[]"));
        if (loss.graph_ != this || loss.epoch_ != epoch_ || loss.node_ < 0 ||
            loss.node_ >= static_cast<int>(nodes_.size()))
            throw std::invalid_argument("backward: loss is not recorded on this graph");

        grads_.resize(nodes_.size());
        for (size_t i = 0; i < nodes_.size(); ++i)
            grads_[i].assign(nodes_[i].out.size(), 0.0);

        grads_[loss.node_][0] = 1.0;
        for (int i = loss.node_; i >= 0; --i)
            if (nodes_[i].back) nodes_[i].back(*this, i);

        // Flush into persistent parameter gradients (accumulating).
        for (size_t i = 0; i < nodes_.size(); ++i) {
            Node& nd = nodes_[i];
            if (nd.back || !nd.out.requires_grad()) continue;
            std::vector<double>& pg = nd.out.grad();
            const std::vector<double>& sg = grads_[i];
            for (size_t j = 0; j < pg.size(); ++j) pg[j] += sg[j];
        }
    }

private:
    std::vector<Node> nodes_;
    std::vector<std::vector<double>> grads_;
    uint64_t epoch_;
};

struct GraphScope {
    explicit GraphScope(Graph& g) { detail::g_graph_stack.push_back(&g); }
    ~GraphScope() { detail::g_graph_stack.pop_back(); }
    GraphScope(const GraphScope&) = delete;
};

struct NoGradScope {
    NoGradScope() { detail::g_graph_stack.push_back(nullptr); }
    ~NoGradScope() { detail::g_graph_stack.pop_back(); }
    NoGradScope(const NoGradScope&) = delete;
};

inline void zero_grads(std::span<Tensor> params) {
    for (Tensor& p : params) p.zero_grad();
}

// ---------------------------------------------------------------------------
// kernels
// ---------------------------------------------------------------------------
namespace detail {

// C[m,n] += A[m,k] * B[k,n]
inline void mm_acc(const double* a, const double* b, double* c, int m, int k, int n) {
    for (int i = 0; i < m; ++i) {
        double* crow = c + static_cast<long>(i) * n;
        const double* arow = a + static_cast<long>(i) * k;
        for (int p = 0; p < k; ++p) {
            const double av = arow[p];
            const double* brow = b + static_cast<long>(p) * n;
            for (int j = 0; j < n; ++j) crow[j] += av * brow[j];
        }
    }
}

// C[m,k] += G[m,n] * B[k,n]^T   (dot of contiguous rows)
inline void mm_bt_acc(const double* g, const double* b, double* c, int m, int n, int k) {
    for (int i = 0; i < m; ++i) {
        const double* grow = g + static_cast<long>(i) * n;
        double* crow = c + static_cast<long>(i) * k;
        for (int p = 0; p < k; ++p) {
            const double* brow = b + static_cast<long>(p) * n;
            double acc = 0.0;
            for (int j = 0; j < n; ++j) acc += grow[j] * brow[j];
            crow[p] += acc;
        }
    }
}

// C[k,n] += A[m,k]^T * G[m,n]
inline void mm_at_acc(const double* a, const double* g, double* c, int m, int k, int n) {
    for (int i = 0; i < m; ++i) {
        const double* arow = a + static_cast<long>(i) * k;
        const double* grow = g + static_cast<long>(i) * n;
        for (int p = 0; p < k; ++p) {
            const double av = arow[p];
            double* crow = c + static_cast<long>(p) * n;
            for (int j = 0; j < n; ++j) crow[j] += av * grow[j];
        }
    }
}

inline void require_rank2(const Tensor& t, const char* op) {
    if (t.shape().size() != 2)
        throw std::invalid_argument(std::string(op) + ": expected a rank-2 tensor, got " +
                                    shape_str(t.shape()));
}

// Broadcasting is restricted to equal shapes or scalar-vs-tensor.
struct EwPlan {
    Shape out_shape;
    bool a_scalar = false;
    bool b_scalar = false;
};

inline EwPlan ew_plan(const Tensor& a, const Tensor& b, const char* op) {
    EwPlan plan;
    if (a.shape() == b.shape()) {
        plan.out_shape = a.shape();
        return plan;
    }
    if (b.size() == 1) {
        plan.out_shape = a.shape();
        plan.b_scalar = true;
        return plan;
    }
    if (a.size() == 1) {
        plan.out_shape = b.shape();
        plan.a_scalar = true;
        return plan;
    }
    throw std::invalid_argument(std::string(op) + ": shape mismatch " + shape_str(a.shape()) +
                                " vs " + shape_str(b.shape()));
}

}  // namespace detail

// ---------------------------------------------------------------------------
// elementwise binary ops
// ---------------------------------------------------------------------------

namespace detail {

template <class Fwd, class Back>
Tensor binary_op(const Tensor& a, const Tensor& b, const char* name, Fwd fwd, Back bwd) {
    EwPlan plan = ew_plan(a, b, name);
    Tensor out = Tensor::zeros(plan.out_shape);
    const long n = out.size();
    const double* pa = a.ptr();
    const double* pb = b.ptr();
    double* po = out.ptr();
    for (long i = 0; i < n; ++i) po[i] = fwd(pa[plan.a_scalar ? 0 : i], pb[plan.b_scalar ? 0 : i]);

    Graph* g = Graph::current();
    if (!g) return out;
    int ia = g->wrap(a), ib = g->wrap(b);
    return g->record(std::move(out), {ia, ib}, [a, b, plan, bwd](Graph& gg, int self) {
        const std::vector<double>& go = gg.grad_of(self);
        std::vector<double>& ga = gg.arg_grad(self, 0);
        std::vector<double>& gb = gg.arg_grad(self, 1);
        const double* pa = a.ptr();
        const double* pb = b.ptr();
        for (size_t i = 0; i < go.size(); ++i) {
            const size_t ai = plan.a_scalar ? 0 : i;
            const size_t bi = plan.b_scalar ? 0 : i;
            bwd(go[i], pa[ai], pb[bi], ga[ai], gb[bi]);
        }
    });
}

template <class Fwd, class Back>
Tensor unary_op(const Tensor& a, const char* name, Fwd fwd, Back bwd) {
    (void)name;
    Tensor out = Tensor::zeros(a.shape());
    const long n = out.size();
    const double* pa = a.ptr();
    double* po = out.ptr();
    for (long i = 0; i < n; ++i) po[i] = fwd(pa[i]);

    Graph* g = Graph::current();
    if (!g) return out;
    int ia = g->wrap(a);
    return g->record(std::move(out), {ia}, [a, bwd](Graph& gg, int self) {
        const std::vector<double>& go = gg.grad_of(self);
        std::vector<double>& ga = gg.arg_grad(self, 0);
        const std::vector<double>& outv = gg.node(self).out.values();
        const double* pa = a.ptr();
        for (size_t i = 0; i < go.size(); ++i) bwd(go[i], pa[i], outv[i], ga[i]);
    });
}

}  // namespace detail

inline Tensor add(const Tensor& a, const Tensor& b) {
    return detail::binary_op(
        a, b, "add", [](double x, double y) { return x + y; },
        [](double g, double, double, double& ga, double& gb) {
            ga += g;
            gb += g;
        });
}

inline Tensor sub(const Tensor& a, const Tensor& b) {
    return detail::binary_op(
        a, b, "sub", [](double x, double y) { return x - y; },
        [](double g, double, double, double& ga, double& gb) {
            ga += g;
            gb -= g;
        });
}

inline Tensor mul(const Tensor& a, const Tensor& b) {
    return detail::binary_op(
        a, b, "mul", [](double x, double y) { return x * y; },
        [](double g, double x, double y, double& ga, double& gb) {
            ga += g * y;
            gb += g * x;
        });
}

inline Tensor div(const Tensor& a, const Tensor& b) {
    return detail::binary_op(
        a, b, "div", [](double x, double y) { return x / y; },
        [](double g, double x, double y, double& ga, double& gb) {
            ga += g / y;
            gb -= g * x / (y * y);
        });
}

// Constant-scalar conveniences (the constant is not recorded).
inline Tensor add(const Tensor& a, double c) {
    return detail::unary_op(
        a, "add_const", [c](double x) { return x + c; },
        [](double g, double, double, double& ga) { ga += g; });
}
inline Tensor mul(const Tensor& a, double c) {
    return detail::unary_op(
        a, "mul_const", [c](double x) { return x * c; },
        [c](double g, double, double, double& ga) { ga += g * c; });
}
inline Tensor sub(double c, const Tensor& a) {
    return detail::unary_op(
        a, "rsub_const", [c](double x) { return c - x; },
        [](double g, double, double, double& ga) { ga -= g; });
}

inline Tensor neg(const Tensor& a) {
    return detail::unary_op(
        a, "neg", [](double x) { return -x; },
        [](double g, double, double, double& ga) { ga -= g; });
}

inline Tensor exp(const Tensor& a) {
    return detail::unary_op(
        a, "exp", [](double x) { return std::exp(x); },
        [](double g, double, double y, double& ga) { ga += g * y; });
}

inline Tensor log(const Tensor& a) {
    return detail::unary_op(
        a, "log", [](double x) { return std::log(x); },
        [](double g, double x, double, double& ga) { ga += g / x; });
}

inline Tensor tanh(const Tensor& a) {
    return detail::unary_op(
        a, "tanh", [](double x) { return std::tanh(x); },
        [](double g, double, double y, double& ga) { ga += g * (1.0 - y * y); });
}

inline Tensor square(const Tensor& a) {
    return detail::unary_op(
        a, "square", [](double x) { return x * x; },
        [](double g, double x, double, double& ga) { ga += 2.0 * g * x; });
}

inline Tensor sqrt(const Tensor& a) {
    return detail::unary_op(
        a, "sqrt", [](double x) { return std::sqrt(x); },
        [](double g, double, double y, double& ga) { ga += 0.5 * g / y; });
}

// clamp with pass-through gradient strictly inside (lo, hi)
inline Tensor clip(const Tensor& a, double lo, double hi) {
    return detail::unary_op(
        a, "clip", [lo, hi](double x) { return std::min(std::max(x, lo), hi); },
        [lo, hi](double g, double x, double, double& ga) {
            if (x > lo && x < hi) ga += g;
        });
}

// elementwise minimum; ties route the gradient to the first argument
inline Tensor min_elem(const Tensor& a, const Tensor& b) {
    return detail::binary_op(
        a, b, "min_elem", [](double x, double y) { return x <= y ? x : y; },
        [](double g, double x, double y, double& ga, double& gb) {
            if (x <= y)
                ga += g;
            else
                gb += g;
        });
}

// Dispatcher over the named elementwise kinds.
enum class EwKind { add, sub, mul, negate, exp, log, tanh, square };

inline Tensor elementwise(EwKind kind, const Tensor& a, const Tensor* b = nullptr) {
    const bool binary = (kind == EwKind::add || kind == EwKind::sub || kind == EwKind::mul);
    if (binary && !b) throw std::invalid_argument("elementwise: binary op needs two operands");
    if (!binary && b) throw std::invalid_argument("elementwise: unary op takes one operand");
    switch (kind) {
        case EwKind::add: return add(a, *b);
        case EwKind::sub: return sub(a, *b);
        case EwKind::mul: return mul(a, *b);
        case EwKind::negate: return neg(a);
        case EwKind::exp: return exp(a);
        case EwKind::log: return log(a);
        case EwKind::tanh: return tanh(a);
        case EwKind::square: return square(a);
    }
    throw std::logic_error("elementwise: unknown kind");
}

// ---------------------------------------------------------------------------
// linear algebra
// ---------------------------------------------------------------------------

inline Tensor matmul(const Tensor& a, const Tensor& b) {
    detail::require_rank2(a, "matmul");
    detail::require_rank2(b, "matmul");
    const int m = a.shape()[0], k = a.shape()[1];
    const int k2 = b.shape()[0], n = b.shape()[1];
    if (k != k2)
        throw std::invalid_argument("matmul: inner dimensions differ, " + shape_str(a.shape()) +
                                    " vs " + shape_str(b.shape()));
    Tensor out = Tensor::zeros({m, n});
    detail::mm_acc(a.ptr(), b.ptr(), out.ptr(), m, k, n);

    Graph* g = Graph::current();
    if (!g) return out;
    int ia = g->wrap(a), ib = g->wrap(b);
    return g->record(std::move(out), {ia, ib}, [a, b, m, k, n](Graph& gg, int self) {
        const double* go = gg.grad_of(self).data();
        detail::mm_bt_acc(go, b.ptr(), gg.arg_grad(self, 0).data(), m, n, k);
        detail::mm_at_acc(a.ptr(), go, gg.arg_grad(self, 1).data(), m, k, n);
    });
}

inline Tensor transpose(const Tensor& a) {
    detail::require_rank2(a, "transpose");
    const int m = a.shape()[0], n = a.shape()[1];
    Tensor out = Tensor::zeros({n, m});
    for (int i = 0; i < m; ++i)
        for (int j = 0; j < n; ++j) out.values()[static_cast<long>(j) * m + i] = a.at(i, j);

    Graph* g = Graph::current();
    if (!g) return out;
    int ia = g->wrap(a);
    return g->record(std::move(out), {ia}, [m, n](Graph& gg, int self) {
        const std::vector<double>& go = gg.grad_of(self);
        std::vector<double>& ga = gg.arg_grad(self, 0);
        for (int j = 0; j < n; ++j)
            for (int i = 0; i < m; ++i)
                ga[static_cast<long>(i) * n + j] += go[static_cast<long>(j) * m + i];
    });
}

// y = x*w + b, b broadcast over rows; b may be [m] or [1,m]
inline Tensor linear(const Tensor& x, const Tensor& w, const Tensor& b) {
    detail::require_rank2(x, "linear");
    detail::require_rank2(w, "linear");
    const int n = x.shape()[0], k = x.shape()[1];
    const int k2 = w.shape()[0], m = w.shape()[1];
    if (k != k2)
        throw std::invalid_argument("linear: inner dimensions differ, " + shape_str(x.shape()) +
                                    " vs " + shape_str(w.shape()));
    if (b.size() != m)
        throw std::invalid_argument("linear: bias shape " + shape_str(b.shape()) +
                                    " does not match output width " + std::to_string(m));
    Tensor out = Tensor::zeros({n, m});
    double* po = out.ptr();
    const double* pb = b.ptr();
    for (int i = 0; i < n; ++i)
        for (int j = 0; j < m; ++j) po[static_cast<long>(i) * m + j] = pb[j];
    detail::mm_acc(x.ptr(), w.ptr(), po, n, k, m);

    Graph* g = Graph::current();
    if (!g) return out;
    int ix = g->wrap(x), iw = g->wrap(w), ib = g->wrap(b);
    return g->record(std::move(out), {ix, iw, ib}, [x, w, n, k, m](Graph& gg, int self) {
        const double* go = gg.grad_of(self).data();
        detail::mm_bt_acc(go, w.ptr(), gg.arg_grad(self, 0).data(), n, m, k);
        detail::mm_at_acc(x.ptr(), go, gg.arg_grad(self, 1).data(), n, k, m);
        std::vector<double>& gb = gg.arg_grad(self, 2);
        for (int i = 0; i < n; ++i)
            for (int j = 0; j < m; ++j) gb[j] += go[static_cast<long>(i) * m + j];
    });
}

// Gather rows of a [V,d] table; backward scatter-adds.
inline Tensor rows(const Tensor& table, const std::vector<int>& ids) {
    detail::require_rank2(table, "rows");
    const int v = table.shape()[0], d = table.shape()[1];
    for (int id : ids)
        if (id < 0 || id >= v)
            throw std::invalid_argument("rows: id " + std::to_string(id) +
                                        " outside table with " + std::to_string(v) + " rows");
    const int t = static_cast<int>(ids.size());
    Tensor out = Tensor::zeros({t, d});
    for (int i = 0; i < t; ++i)
        std::copy_n(table.ptr() + static_cast<long>(ids[i]) * d, d, out.ptr() + static_cast<long>(i) * d);

    Graph* g = Graph::current();
    if (!g) return out;
    int it = g->wrap(table);
    return g->record(std::move(out), {it}, [ids, d](Graph& gg, int self) {
        const std::vector<double>& go = gg.grad_of(self);
        std::vector<double>& gt = gg.arg_grad(self, 0);
        for (size_t i = 0; i < ids.size(); ++i)
            for (int j = 0; j < d; ++j) gt[static_cast<long>(ids[i]) * d + j] += go[i * d + j];
    });
}

inline Tensor slice_rows(const Tensor& x, int r0, int r1) {
    detail::require_rank2(x, "slice_rows");
    const int m = x.shape()[0], n = x.shape()[1];
    if (r0 < 0 || r1 > m || r0 >= r1)
        throw std::invalid_argument("slice_rows: range [" + std::to_string(r0) + "," +
                                    std::to_string(r1) + ") invalid for " + shape_str(x.shape()));
    Tensor out = Tensor::zeros({r1 - r0, n});
    std::copy_n(x.ptr() + static_cast<long>(r0) * n, static_cast<long>(r1 - r0) * n, out.ptr());

    Graph* g = Graph::current();
    if (!g) return out;
    int ix = g->wrap(x);
    return g->record(std::move(out), {ix}, [r0, n](Graph& gg, int self) {
        const std::vector<double>& go = gg.grad_of(self);
        std::vector<double>& gx = gg.arg_grad(self, 0);
        for (size_t i = 0; i < go.size(); ++i) gx[static_cast<long>(r0) * n + i] += go[i];
    });
}

inline Tensor slice_cols(const Tensor& x, int c0, int c1) {
    detail::require_rank2(x, "slice_cols");
    const int m = x.shape()[0], n = x.shape()[1];
    if (c0 < 0 || c1 > n || c0 >= c1)
        throw std::invalid_argument("slice_cols: range [" + std::to_string(c0) + "," +
                                    std::to_string(c1) + ") invalid for " + shape_str(x.shape()));
    const int w = c1 - c0;
    Tensor out = Tensor::zeros({m, w});
    for (int i = 0; i < m; ++i)
        std::copy_n(x.ptr() + static_cast<long>(i) * n + c0, w, out.ptr() + static_cast<long>(i) * w);

    Graph* g = Graph::current();
    if (!g) return out;
    int ix = g->wrap(x);
    return g->record(std::move(out), {ix}, [m, n, c0, w](Graph& gg, int self) {
        const std::vector<double>& go = gg.grad_of(self);
        std::vector<double>& gx = gg.arg_grad(self, 0);
        for (int i = 0; i < m; ++i)
            for (int j = 0; j < w; ++j)
                gx[static_cast<long>(i) * n + c0 + j] += go[static_cast<long>(i) * w + j];
    });
}

inline Tensor concat_rows(const std::vector<Tensor>& parts) {
    if (parts.empty()) throw std::invalid_argument("concat_rows: no inputs");
    detail::require_rank2(parts[0], "concat_rows");
    const int n = parts[0].shape()[1];
    int total = 0;
    for (const Tensor& p : parts) {
        detail::require_rank2(p, "concat_rows");
        if (p.shape()[1] != n)
            throw std::invalid_argument("concat_rows: width mismatch " + shape_str(p.shape()) +
                                        " vs " + shape_str(parts[0].shape()));
        total += p.shape()[0];
    }
    Tensor out = Tensor::zeros({total, n});
    long off = 0;
    for (const Tensor& p : parts) {
        std::copy_n(p.ptr(), p.size(), out.ptr() + off);
        off += p.size();
    }

    Graph* g = Graph::current();
    if (!g) return out;
    std::vector<int> args;
    args.reserve(parts.size());
    for (const Tensor& p : parts) args.push_back(g->wrap(p));
    std::vector<long> sizes;
    for (const Tensor& p : parts) sizes.push_back(p.size());
    return g->record(std::move(out), std::move(args), [sizes](Graph& gg, int self) {
        const std::vector<double>& go = gg.grad_of(self);
        long off = 0;
        for (size_t a = 0; a < sizes.size(); ++a) {
            std::vector<double>& gp = gg.arg_grad(self, static_cast<int>(a));
            for (long i = 0; i < sizes[a]; ++i) gp[i] += go[off + i];
            off += sizes[a];
        }
    });
}

inline Tensor concat_cols(const std::vector<Tensor>& parts) {
    if (parts.empty()) throw std::invalid_argument("concat_cols: no inputs");
    detail::require_rank2(parts[0], "concat_cols");
    const int m = parts[0].shape()[0];
    int total = 0;
    for (const Tensor& p : parts) {
        detail::require_rank2(p, "concat_cols");
        if (p.shape()[0] != m)
            throw std::invalid_argument("concat_cols: height mismatch " + shape_str(p.shape()) +
                                        " vs " + shape_str(parts[0].shape()));
        total += p.shape()[1];
    }
    Tensor out = Tensor::zeros({m, total});
    int coff = 0;
    for (const Tensor& p : parts) {
        const int w = p.shape()[1];
        for (int i = 0; i < m; ++i)
            std::copy_n(p.ptr() + static_cast<long>(i) * w, w,
                        out.ptr() + static_cast<long>(i) * total + coff);
        coff += w;
    }

    Graph* g = Graph::current();
    if (!g) return out;
    std::vector<int> args;
    std::vector<int> widths;
    for (const Tensor& p : parts) {
        args.push_back(g->wrap(p));
        widths.push_back(p.shape()[1]);
    }
    return g->record(std::move(out), std::move(args), [m, total, widths](Graph& gg, int self) {
        const std::vector<double>& go = gg.grad_of(self);
        int coff = 0;
        for (size_t a = 0; a < widths.size(); ++a) {
            std::vector<double>& gp = gg.arg_grad(self, static_cast<int>(a));
            const int w = widths[a];
            for (int i = 0; i < m; ++i)
                for (int j = 0; j < w; ++j)
                    gp[static_cast<long>(i) * w + j] += go[static_cast<long>(i) * total + coff + j];
            coff += w;
        }
    });
}

// Same storage order, new shape; gradient passes through untouched.
inline Tensor reshape(const Tensor& x, Shape shape) {
    if (shape_numel(shape) != x.size())
        throw std::invalid_argument("reshape: " + shape_str(x.shape()) + " cannot become " +
                                    shape_str(shape));
    Tensor out = Tensor::from(std::move(shape), x.values());

    Graph* g = Graph::current();
    if (!g) return out;
    int ix = g->wrap(x);
    return g->record(std::move(out), {ix}, [](Graph& gg, int self) {
        const std::vector<double>& go = gg.grad_of(self);
        std::vector<double>& gx = gg.arg_grad(self, 0);
        for (size_t i = 0; i < go.size(); ++i) gx[i] += go[i];
    });
}

// ---------------------------------------------------------------------------
// reductions and row-structured ops
// ---------------------------------------------------------------------------

inline Tensor sum(const Tensor& x) {
    double acc = 0.0;
    for (long i = 0; i < x.size(); ++i) acc += x[i];
    Tensor out = Tensor::scalar(acc);

    Graph* g = Graph::current();
    if (!g) return out;
    int ix = g->wrap(x);
    return g->record(std::move(out), {ix}, [](Graph& gg, int self) {
        const double go = gg.grad_of(self)[0];
        std::vector<double>& gx = gg.arg_grad(self, 0);
        for (double& v : gx) v += go;
    });
}

inline Tensor mean(const Tensor& x) {
    if (x.size() == 0) throw std::invalid_argument("mean: empty tensor");
    return mul(sum(x), 1.0 / static_cast<double>(x.size()));
}

namespace detail {
// Rank-1 tensors are treated as a single row; returns (rows, cols).
inline std::pair<int, int> row_view(const Tensor& x, const char* op) {
    if (x.shape().size() == 1) return {1, x.shape()[0]};
    if (x.shape().size() == 2) return {x.shape()[0], x.shape()[1]};
    throw std::invalid_argument(std::string(op) + ": expected rank 1 or 2, got " +
                                shape_str(x.shape()));
}

inline void softmax_row(const double* x, double* y, int k) {
    double mx = x[0];
    for (int j = 1; j < k; ++j) mx = std::max(mx, x[j]);
    double s = 0.0;
    for (int j = 0; j < k; ++j) {
        y[j] = std::exp(x[j] - mx);
        s += y[j];
    }
    for (int j = 0; j < k; ++j) y[j] /= s;
}
}  // namespace detail

inline Tensor softmax_rows(const Tensor& x) {
    auto [n, k] = detail::row_view(x, "softmax");
    Tensor out = Tensor::zeros(x.shape());
    for (int i = 0; i < n; ++i)
        detail::softmax_row(x.ptr() + static_cast<long>(i) * k, out.ptr() + static_cast<long>(i) * k, k);

    Graph* g = Graph::current();
    if (!g) return out;
    int ix = g->wrap(x);
    return g->record(std::move(out), {ix}, [n, k](Graph& gg, int self) {
        const std::vector<double>& go = gg.grad_of(self);
        const std::vector<double>& y = gg.node(self).out.values();
        std::vector<double>& gx = gg.arg_grad(self, 0);
        for (int i = 0; i < n; ++i) {
            const long off = static_cast<long>(i) * k;
            double dot = 0.0;
            for (int j = 0; j < k; ++j) dot += go[off + j] * y[off + j];
            for (int j = 0; j < k; ++j) gx[off + j] += y[off + j] * (go[off + j] - dot);
        }
    });
}

// softmax along an axis of a rank-1/2 tensor; -1 means the last axis
inline Tensor softmax(const Tensor& x, int axis = -1) {
    const int rank = static_cast<int>(x.shape().size());
    if (axis < 0) axis += rank;
    if (axis < 0 || axis >= rank)
        throw std::invalid_argument("softmax: axis out of range for " + shape_str(x.shape()));
    if (rank == 1 || axis == rank - 1) return softmax_rows(x);
    return transpose(softmax_rows(transpose(x)));
}

inline Tensor log_softmax_rows(const Tensor& x) {
    auto [n, k] = detail::row_view(x, "log_softmax");
    Tensor out = Tensor::zeros(x.shape());
    for (int i = 0; i < n; ++i) {
        const double* xi = x.ptr() + static_cast<long>(i) * k;
        double* yi = out.ptr() + static_cast<long>(i) * k;
        double mx = xi[0];
        for (int j = 1; j < k; ++j) mx = std::max(mx, xi[j]);
        double s = 0.0;
        for (int j = 0; j < k; ++j) s += std::exp(xi[j] - mx);
        const double lse = mx + std::log(s);
        for (int j = 0; j < k; ++j) yi[j] = xi[j] - lse;
    }

    Graph* g = Graph::current();
    if (!g) return out;
    int ix = g->wrap(x);
    return g->record(std::move(out), {ix}, [n, k](Graph& gg, int self) {
        const std::vector<double>& go = gg.grad_of(self);
        const std::vector<double>& y = gg.node(self).out.values();
        std::vector<double>& gx = gg.arg_grad(self, 0);
        for (int i = 0; i < n; ++i) {
            const long off = static_cast<long>(i) * k;
            double gsum = 0.0;
            for (int j = 0; j < k; ++j) gsum += go[off + j];
            for (int j = 0; j < k; ++j) gx[off + j] += go[off + j] - std::exp(y[off + j]) * gsum;
        }
    });
}

// Per-row standardization followed by an affine map. gain/bias have the row
// width; eps guards zero variance (population variance).
inline Tensor layernorm(const Tensor& x, const Tensor& gain, const Tensor& bias, double eps = 1e-5) {
    auto [n, k] = detail::row_view(x, "layernorm");
    if (gain.size() != k || bias.size() != k)
        throw std::invalid_argument("layernorm: gain " + shape_str(gain.shape()) + " / bias " +
                                    shape_str(bias.shape()) + " do not match row width " +
                                    std::to_string(k));
    Tensor out = Tensor::zeros(x.shape());
    std::vector<double> xhat(static_cast<size_t>(n) * k);
    std::vector<double> inv_sd(n);
    for (int i = 0; i < n; ++i) {
        const double* xi = x.ptr() + static_cast<long>(i) * k;
        double mu = 0.0;
        for (int j = 0; j < k; ++j) mu += xi[j];
        mu /= k;
        double var = 0.0;
        for (int j = 0; j < k; ++j) var += (xi[j] - mu) * (xi[j] - mu);
        var /= k;
        const double isd = 1.0 / std::sqrt(var + eps);
        inv_sd[i] = isd;
        for (int j = 0; j < k; ++j) {
            const double h = (xi[j] - mu) * isd;
            xhat[static_cast<long>(i) * k + j] = h;
            out.ptr()[static_cast<long>(i) * k + j] = gain[j] * h + bias[j];
        }
    }

    Graph* g = Graph::current();
    if (!g) return out;
    int ix = g->wrap(x), ig = g->wrap(gain), ib = g->wrap(bias);
    return g->record(std::move(out), {ix, ig, ib},
                     [gain, n, k, xhat = std::move(xhat), inv_sd = std::move(inv_sd)](Graph& gg, int self) {
        const std::vector<double>& go = gg.grad_of(self);
        std::vector<double>& gx = gg.arg_grad(self, 0);
        std::vector<double>& gg_ = gg.arg_grad(self, 1);
        std::vector<double>& gb = gg.arg_grad(self, 2);
        for (int i = 0; i < n; ++i) {
            const long off = static_cast<long>(i) * k;
            double mean_dh = 0.0, mean_dh_h = 0.0;
            for (int j = 0; j < k; ++j) {
                const double dh = go[off + j] * gain[j];
                mean_dh += dh;
                mean_dh_h += dh * xhat[off + j];
                gg_[j] += go[off + j] * xhat[off + j];
                gb[j] += go[off + j];
            }
            mean_dh /= k;
            mean_dh_h /= k;
            for (int j = 0; j < k; ++j) {
                const double dh = go[off + j] * gain[j];
                gx[off + j] += inv_sd[i] * (dh - mean_dh - xhat[off + j] * mean_dh_h);
            }
        }
    });
}

// out[i] = x[i, ids[i]]
inline Tensor pick_per_row(const Tensor& x, const std::vector<int>& ids) {
    detail::require_rank2(x, "pick_per_row");
    const int n = x.shape()[0], k = x.shape()[1];
    if (static_cast<int>(ids.size()) != n)
        throw std::invalid_argument("pick_per_row: " + std::to_string(ids.size()) +
                                    " indices for " + std::to_string(n) + " rows");
    for (int id : ids)
        if (id < 0 || id >= k)
            throw std::invalid_argument("pick_per_row: column " + std::to_string(id) +
                                        " outside row width " + std::to_string(k));
    Tensor out = Tensor::zeros({n});
    for (int i = 0; i < n; ++i) out.ptr()[i] = x.at(i, ids[i]);

    Graph* g = Graph::current();
    if (!g) return out;
    int ix = g->wrap(x);
    return g->record(std::move(out), {ix}, [ids, k](Graph& gg, int self) {
        const std::vector<double>& go = gg.grad_of(self);
        std::vector<double>& gx = gg.arg_grad(self, 0);
        for (size_t i = 0; i < ids.size(); ++i) gx[i * k + ids[i]] += go[i];
    });
}

// Mean (or sum) of per-row -log softmax(logits)[label], stabilized.
inline Tensor cross_entropy_rows(const Tensor& logits, const std::vector<int>& labels,
                                 bool mean_reduce = true) {
    detail::require_rank2(logits, "cross_entropy");
    const int n = logits.shape()[0], k = logits.shape()[1];
    if (static_cast<int>(labels.size()) != n)
        throw std::invalid_argument("cross_entropy: " + std::to_string(labels.size()) +
                                    " labels for " + std::to_string(n) + " rows");
    for (int l : labels)
        if (l < 0 || l >= k)
            throw std::invalid_argument("cross_entropy: label " + std::to_string(l) +
                                        " outside [0," + std::to_string(k) + ")");
    double total = 0.0;
    for (int i = 0; i < n; ++i) {
        const double* xi = logits.ptr() + static_cast<long>(i) * k;
        double mx = xi[0];
        for (int j = 1; j < k; ++j) mx = std::max(mx, xi[j]);
        double s = 0.0;
        for (int j = 0; j < k; ++j) s += std::exp(xi[j] - mx);
        total += (mx + std::log(s)) - xi[labels[i]];
    }
    Tensor out = Tensor::scalar(mean_reduce ? total / n : total);

    Graph* g = Graph::current();
    if (!g) return out;
    int ix = g->wrap(logits);
    return g->record(std::move(out), {ix}, [logits, labels, n, k, mean_reduce](Graph& gg, int self) {
        const double go = gg.grad_of(self)[0] * (mean_reduce ? 1.0 / n : 1.0);
        std::vector<double>& gx = gg.arg_grad(self, 0);
        std::vector<double> p(k);
        for (int i = 0; i < n; ++i) {
            detail::softmax_row(logits.ptr() + static_cast<long>(i) * k, p.data(), k);
            for (int j = 0; j < k; ++j)
                gx[static_cast<long>(i) * k + j] += go * (p[j] - (j == labels[i] ? 1.0 : 0.0));
        }
    });
}

// Row-wise L2 normalization with an eps guard on the norm.
inline Tensor l2norm_rows(const Tensor& x, double eps = 1e-12) {
    auto [n, k] = detail::row_view(x, "l2norm_rows");
    Tensor out = Tensor::zeros(x.shape());
    std::vector<double> denom(n);
    std::vector<char> clamped(n);
    for (int i = 0; i < n; ++i) {
        const double* xi = x.ptr() + static_cast<long>(i) * k;
        double q = 0.0;
        for (int j = 0; j < k; ++j) q += xi[j] * xi[j];
        const double norm = std::sqrt(q);
        clamped[i] = norm < eps;
        denom[i] = std::max(norm, eps);
        for (int j = 0; j < k; ++j) out.ptr()[static_cast<long>(i) * k + j] = xi[j] / denom[i];
    }

    Graph* g = Graph::current();
    if (!g) return out;
    int ix = g->wrap(x);
    return g->record(std::move(out), {ix},
                     [n, k, denom = std::move(denom), clamped = std::move(clamped)](Graph& gg, int self) {
        const std::vector<double>& go = gg.grad_of(self);
        const std::vector<double>& y = gg.node(self).out.values();
        std::vector<double>& gx = gg.arg_grad(self, 0);
        for (int i = 0; i < n; ++i) {
            const long off = static_cast<long>(i) * k;
            if (clamped[i]) {
                // denominator pinned at eps, plain scaling
                for (int j = 0; j < k; ++j) gx[off + j] += go[off + j] / denom[i];
                continue;
            }
            double dot = 0.0;
            for (int j = 0; j < k; ++j) dot += go[off + j] * y[off + j];
            for (int j = 0; j < k; ++j) gx[off + j] += (go[off + j] - dot * y[off + j]) / denom[i];
        }
    });
}

}  // namespace crsd
