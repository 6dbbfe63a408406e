#pragma once

// Tape-based reverse-mode automatic differentiation over rank <= 2 arrays.
//
// A Graph records every operation in creation order. backward() walks the tape
// in reverse, so gradient accumulation order is fixed by node creation order
// and two backward passes over the same graph are bitwise identical.
//
// Parameters live outside the graph in a ParamStore; a graph references them
// through leaf nodes and adds leaf gradients back into the store at the end of
// backward().

#include <Eigen/Core>

#include <cmath>
#include <cstdint>
#include <functional>
#include <limits>
#include <string>
#include <unordered_map>
#include <utility>
#include <vector>

#include "mwm/array.hpp"
#include "mwm/error.hpp"

namespace mwm::ad {

enum class Group : std::uint8_t { backbone = 0, adaln = 1 };

inline const char* group_name(Group g) { return g == Group::backbone ? "backbone" : "adaln"; }

struct GroupMask {
    bool backbone = false;
    bool adaln = false;

    static constexpr GroupMask all() { return {true, true}; }
    static constexpr GroupMask only(Group g) {
        return g == Group::backbone ? GroupMask{true, false} : GroupMask{false, true};
    }
    bool contains(Group g) const { return g == Group::backbone ? backbone : adaln; }
};

template <typename R>
struct Parameter {
    std::string name;
    Group group = Group::backbone;
    Array<R> value;
    Array<R> grad;
    // Adam moments, allocated on first update.
    Array<R> m;
    Array<R> v;
    std::int64_t steps = 0;
};

template <typename R>
class ParamStore {
public:
    std::size_t add(std::string name, Group group, Array<R> value) {
        if (index_.count(name)) throw ContractError("ParamStore: duplicate parameter '" + name + "'");
        Parameter<R> p;
        p.name = std::move(name);
        p.group = group;
        p.grad = Array<R>(value.shape());
        p.value = std::move(value);
        index_.emplace(p.name, params_.size());
        params_.push_back(std::move(p));
        return params_.size() - 1;
    }

    std::size_t size() const { return params_.size(); }
    Parameter<R>& operator[](std::size_t i) { return params_[i]; }
    const Parameter<R>& operator[](std::size_t i) const { return params_[i]; }
    auto begin() { return params_.begin(); }
    auto end() { return params_.end(); }
    auto begin() const { return params_.begin(); }
    auto end() const { return params_.end(); }

    bool contains(const std::string& name) const { return index_.count(name) != 0; }
    std::size_t index_of(const std::string& name) const {
        auto it = index_.find(name);
        if (it == index_.end()) throw ContractError("ParamStore: unknown parameter '" + name + "'");
        return it->second;
    }
    Parameter<R>& at(const std::string& name) { return params_[index_of(name)]; }
    const Parameter<R>& at(const std::string& name) const { return params_[index_of(name)]; }

    void zero_grad() {
        for (auto& p : params_) p.grad.fill(R(0));
    }

    std::size_t scalar_count(Group g) const {
        std::size_t n = 0;
        for (const auto& p : params_)
            if (p.group == g) n += p.value.size();
        return n;
    }

    template <typename S>
    ParamStore<S> cast() const {
        ParamStore<S> out;
        for (const auto& p : params_) out.add(p.name, p.group, p.value.template cast<S>());
        return out;
    }

private:
    std::vector<Parameter<R>> params_;
    std::unordered_map<std::string, std::size_t> index_;
};

template <typename R>
class Graph;

// Handle to a node of a Graph. Cheap to copy; valid while its graph lives.
template <typename R>
struct Var {
    Graph<R>* graph = nullptr;
    std::uint32_t id = 0;

    const Array<R>& value() const { return graph->value(id); }
    const Array<R>& grad() const { return graph->grad(id); }
    bool requires_grad() const { return graph->requires_grad(id); }
    const std::vector<std::size_t>& shape() const { return value().shape(); }
};

template <typename R>
class Graph {
public:
    using BackwardFn = std::function<void(Graph&, std::uint32_t self)>;

    Graph() = default;
    Graph(const Graph&) = delete;
    Graph& operator=(const Graph&) = delete;

    Var<R> constant(Array<R> value) { return push("constant", std::move(value), false, nullptr); }

    // Leaf node that requires gradient but is not tied to a ParamStore.
    Var<R> variable(Array<R> value) { return push("variable", std::move(value), true, nullptr); }

    // Leaf node bound to a stored parameter. Repeated calls return the same node.
    Var<R> param(ParamStore<R>& store, std::size_t index) {
        auto key = std::make_pair(&store, index);
        for (const auto& l : leaves_)
            if (l.store == key.first && l.index == key.second) return Var<R>{this, l.node};
        Node n;
        n.op = "param";
        n.ext = &store[index].value;
        n.requires_grad = true;
        nodes_.push_back(std::move(n));
        auto id = static_cast<std::uint32_t>(nodes_.size() - 1);
        leaves_.push_back({&store, index, id});
        return Var<R>{this, id};
    }
    Var<R> param(ParamStore<R>& store, const std::string& name) { return param(store, store.index_of(name)); }

    // Records an op. The backward closure is dropped when no input needs a gradient
    // or gradient recording is disabled.
    Var<R> record(const char* op, Array<R> value, std::initializer_list<Var<R>> inputs, BackwardFn fn) {
        bool needs = false;
        if (grad_enabled_)
            for (const auto& v : inputs) needs = needs || requires_grad(v.id);
        return push(op, std::move(value), needs, needs ? std::move(fn) : nullptr);
    }
    Var<R> record(const char* op, Array<R> value, const std::vector<Var<R>>& inputs, BackwardFn fn) {
        bool needs = false;
        if (grad_enabled_)
            for (const auto& v : inputs) needs = needs || requires_grad(v.id);
        return push(op, std::move(value), needs, needs ? std::move(fn) : nullptr);
    }

    const Array<R>& value(std::uint32_t id) const {
        const auto& n = nodes_[id];
        return n.ext ? *n.ext : n.own;
    }
    const Array<R>& grad(std::uint32_t id) const { return nodes_[id].grad; }
    bool requires_grad(std::uint32_t id) const { return nodes_[id].requires_grad; }
    const char* op_name(std::uint32_t id) const { return nodes_[id].op; }
    std::size_t size() const { return nodes_.size(); }

    // Gradient buffer of a node, zero-initialised on first access.
    Array<R>& grad_buffer(std::uint32_t id) {
        auto& n = nodes_[id];
        if (n.grad.empty()) n.grad = Array<R>(value(id).shape());
        return n.grad;
    }

    bool grad_enabled() const { return grad_enabled_; }
    void set_grad_enabled(bool on) { grad_enabled_ = on; }

    void backward(Var<R> root) {
        if (root.graph != this) throw ContractError("backward: root belongs to another graph");
        if (value(root.id).size() != 1) {
            throw ContractError("backward: root must be scalar, got shape " +
                                Array<R>::shape_string(value(root.id).shape()));
        }
        if (!requires_grad(root.id)) return;
        grad_buffer(root.id)[0] += R(1);
        for (std::int64_t i = root.id; i >= 0; --i) {
            auto id = static_cast<std::uint32_t>(i);
            auto& n = nodes_[id];
            if (n.backward && !n.grad.empty()) n.backward(*this, id);
        }
        for (const auto& l : leaves_) {
            const auto& g = nodes_[l.node].grad;
            if (g.empty()) continue;
            auto& dst = (*l.store)[l.index].grad;
            for (std::size_t k = 0; k < g.size(); ++k) dst[k] += g[k];
        }
    }

private:
    struct Node {
        const char* op = "";
        Array<R> own;
        const Array<R>* ext = nullptr;
        Array<R> grad;
        bool requires_grad = false;
        BackwardFn backward;
    };
    struct Leaf {
        ParamStore<R>* store;
        std::size_t index;
        std::uint32_t node;
    };

    Var<R> push(const char* op, Array<R> value, bool rg, BackwardFn fn) {
        if (nodes_.size() >= std::numeric_limits<std::uint32_t>::max())
            throw RuntimeError("Graph: node limit exceeded");
        Node n;
        n.op = op;
        n.own = std::move(value);
        n.requires_grad = rg;
        n.backward = std::move(fn);
        nodes_.push_back(std::move(n));
        return Var<R>{this, static_cast<std::uint32_t>(nodes_.size() - 1)};
    }

    std::vector<Node> nodes_;
    std::vector<Leaf> leaves_;
    bool grad_enabled_ = true;
};

// Disables recording of backward closures for the lifetime of the guard.
template <typename R>
class NoGradGuard {
public:
    explicit NoGradGuard(Graph<R>& g) : g_(g), prev_(g.grad_enabled()) { g_.set_grad_enabled(false); }
    ~NoGradGuard() { g_.set_grad_enabled(prev_); }
    NoGradGuard(const NoGradGuard&) = delete;
    NoGradGuard& operator=(const NoGradGuard&) = delete;

private:
    Graph<R>& g_;
    bool prev_;
};

namespace detail {

template <typename R>
using RowMat = Eigen::Matrix<R, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

template <typename R>
Eigen::Map<const RowMat<R>> as_mat(const Array<R>& a) {
    return {a.data(), static_cast<Eigen::Index>(a.rows()), static_cast<Eigen::Index>(a.cols())};
}
template <typename R>
Eigen::Map<RowMat<R>> as_mat(Array<R>& a) {
    return {a.data(), static_cast<Eigen::Index>(a.rows()), static_cast<Eigen::Index>(a.cols())};
}

inline std::string shapes(const char* op, const std::vector<std::size_t>& a, const std::vector<std::size_t>& b) {
    return std::string(op) + ": shape mismatch " + Array<double>::shape_string(a) + " vs " +
           Array<double>::shape_string(b);
}

// Second operand equal in shape, or a single row broadcast over the rows of the first.
template <typename R>
bool row_broadcast(const Array<R>& a, const Array<R>& b, const char* op) {
    if (a.same_shape(b)) return false;
    if (b.rows() == 1 && b.cols() == a.cols() && a.rank() == 2) return true;
    throw ContractError(shapes(op, a.shape(), b.shape()));
}

template <typename R>
void accumulate(Array<R>& dst, const Array<R>& src) {
    for (std::size_t i = 0; i < src.size(); ++i) dst[i] += src[i];
}

template <typename R>
constexpr R gelu_k() {
    return R(0.7978845608028654);  // sqrt(2/pi)
}

}  // namespace detail

template <typename R>
Var<R> add(Var<R> a, Var<R> b) {
    const auto& av = a.value();
    const auto& bv = b.value();
    if (av.rows() == 1 && bv.rows() > 1 && av.cols() == bv.cols()) std::swap(a, b);
    const auto& x = a.value();
    const auto& y = b.value();
    bool bc = detail::row_broadcast(x, y, "add");
    Array<R> out = x;
    std::size_t c = x.cols();
    for (std::size_t i = 0; i < out.size(); ++i) out[i] += bc ? y[i % c] : y[i];
    return a.graph->record("add", std::move(out), {a, b}, [a, b, bc, c](Graph<R>& g, std::uint32_t self) {
        const auto& go = g.grad(self);
        if (g.requires_grad(a.id)) detail::accumulate(g.grad_buffer(a.id), go);
        if (g.requires_grad(b.id)) {
            auto& gb = g.grad_buffer(b.id);
            for (std::size_t i = 0; i < go.size(); ++i) gb[bc ? i % c : i] += go[i];
        }
    });
}

template <typename R>
Var<R> sub(Var<R> a, Var<R> b) {
    const auto& x = a.value();
    const auto& y = b.value();
    bool bc = detail::row_broadcast(x, y, "sub");
    Array<R> out = x;
    std::size_t c = x.cols();
    for (std::size_t i = 0; i < out.size(); ++i) out[i] -= bc ? y[i % c] : y[i];
    return a.graph->record("sub", std::move(out), {a, b}, [a, b, bc, c](Graph<R>& g, std::uint32_t self) {
        const auto& go = g.grad(self);
        if (g.requires_grad(a.id)) detail::accumulate(g.grad_buffer(a.id), go);
        if (g.requires_grad(b.id)) {
            auto& gb = g.grad_buffer(b.id);
            for (std::size_t i = 0; i < go.size(); ++i) gb[bc ? i % c : i] -= go[i];
        }
    });
}

template <typename R>
Var<R> mul(Var<R> a, Var<R> b) {
    const auto& av = a.value();
    const auto& bv = b.value();
    if (av.rows() == 1 && bv.rows() > 1 && av.cols() == bv.cols()) std::swap(a, b);
    const auto& x = a.value();
    const auto& y = b.value();
    bool bc = detail::row_broadcast(x, y, "mul");
    Array<R> out = x;
    std::size_t c = x.cols();
    for (std::size_t i = 0; i < out.size(); ++i) out[i] *= bc ? y[i % c] : y[i];
    return a.graph->record("mul", std::move(out), {a, b}, [a, b, bc, c](Graph<R>& g, std::uint32_t self) {
        const auto& go = g.grad(self);
        const auto& x = g.value(a.id);
        const auto& y = g.value(b.id);
        if (g.requires_grad(a.id)) {
            auto& ga = g.grad_buffer(a.id);
            for (std::size_t i = 0; i < go.size(); ++i) ga[i] += go[i] * (bc ? y[i % c] : y[i]);
        }
        if (g.requires_grad(b.id)) {
            auto& gb = g.grad_buffer(b.id);
            for (std::size_t i = 0; i < go.size(); ++i) gb[bc ? i % c : i] += go[i] * x[i];
        }
    });
}

template <typename R>
Var<R> scale(Var<R> a, R s) {
    Array<R> out = a.value();
    for (auto& v : out.values()) v *= s;
    return a.graph->record("scale", std::move(out), {a}, [a, s](Graph<R>& g, std::uint32_t self) {
        const auto& go = g.grad(self);
        auto& ga = g.grad_buffer(a.id);
        for (std::size_t i = 0; i < go.size(); ++i) ga[i] += go[i] * s;
    });
}

// a + c for a constant scalar c.
template <typename R>
Var<R> offset(Var<R> a, R c) {
    Array<R> out = a.value();
    for (auto& v : out.values()) v += c;
    return a.graph->record("offset", std::move(out), {a}, [a](Graph<R>& g, std::uint32_t self) {
        detail::accumulate(g.grad_buffer(a.id), g.grad(self));
    });
}

template <typename R>
Var<R> matmul(Var<R> a, Var<R> b) {
    const auto& x = a.value();
    const auto& y = b.value();
    if (x.cols() != y.rows()) throw ContractError(detail::shapes("matmul", x.shape(), y.shape()));
    std::vector<std::size_t> shape = x.rank() == 1 ? std::vector<std::size_t>{y.cols()}
                                                   : std::vector<std::size_t>{x.rows(), y.cols()};
    Array<R> out(shape);
    detail::as_mat(out).noalias() = detail::as_mat(x) * detail::as_mat(y);
    return a.graph->record("matmul", std::move(out), {a, b}, [a, b](Graph<R>& g, std::uint32_t self) {
        auto go = detail::as_mat(g.grad(self));
        if (g.requires_grad(a.id)) {
            auto ga = detail::as_mat(g.grad_buffer(a.id));
            ga.noalias() += go * detail::as_mat(g.value(b.id)).transpose();
        }
        if (g.requires_grad(b.id)) {
            auto gb = detail::as_mat(g.grad_buffer(b.id));
            gb.noalias() += detail::as_mat(g.value(a.id)).transpose() * go;
        }
    });
}

template <typename R>
Var<R> transpose(Var<R> a) {
    const auto& x = a.value();
    Array<R> out({x.cols(), x.rows()});
    detail::as_mat(out) = detail::as_mat(x).transpose();
    return a.graph->record("transpose", std::move(out), {a}, [a](Graph<R>& g, std::uint32_t self) {
        detail::as_mat(g.grad_buffer(a.id)) += detail::as_mat(g.grad(self)).transpose();
    });
}

template <typename R>
Var<R> tanh(Var<R> a) {
    Array<R> out = a.value();
    for (auto& v : out.values()) v = std::tanh(v);
    return a.graph->record("tanh", std::move(out), {a}, [a](Graph<R>& g, std::uint32_t self) {
        const auto& go = g.grad(self);
        const auto& y = g.value(self);
        auto& ga = g.grad_buffer(a.id);
        for (std::size_t i = 0; i < go.size(); ++i) ga[i] += go[i] * (R(1) - y[i] * y[i]);
    });
}


// GELU, tanh approximation.
template <typename R>
Var<R> gelu(Var<R> a) {
    constexpr R k = detail::gelu_k<R>();
    constexpr R c = R(0.044715);
    const auto& x = a.value();
    Array<R> out(x.shape());
    for (std::size_t i = 0; i < x.size(); ++i) {
        R u = x[i];
        out[i] = R(0.5) * u * (R(1) + std::tanh(k * (u + c * u * u * u)));
    }
    return a.graph->record("gelu", std::move(out), {a}, [a](Graph<R>& g, std::uint32_t self) {
        const auto& go = g.grad(self);
        const auto& x = g.value(a.id);
        auto& ga = g.grad_buffer(a.id);
        for (std::size_t i = 0; i < go.size(); ++i) {
            R u = x[i];
            R th = std::tanh(k * (u + c * u * u * u));
            R d = R(0.5) * (R(1) + th) + R(0.5) * u * (R(1) - th * th) * k * (R(1) + R(3) * c * u * u);
            ga[i] += go[i] * d;
        }
    });
}

template <typename R>
Var<R> abs(Var<R> a) {
    Array<R> out = a.value();
    for (auto& v : out.values()) v = std::abs(v);
    return a.graph->record("abs", std::move(out), {a}, [a](Graph<R>& g, std::uint32_t self) {
        const auto& go = g.grad(self);
        const auto& x = g.value(a.id);
        auto& ga = g.grad_buffer(a.id);
        for (std::size_t i = 0; i < go.size(); ++i) ga[i] += x[i] > R(0) ? go[i] : (x[i] < R(0) ? -go[i] : R(0));
    });
}

// Row-wise normalisation to zero mean and unit variance, no affine part.
template <typename R>
Var<R> layernorm(Var<R> a, R eps = R(1e-5)) {
    const auto& x = a.value();
    const std::size_t rows = x.rows(), cols = x.cols();
    Array<R> out(x.shape());
    std::vector<R> inv_std(rows);
    for (std::size_t r = 0; r < rows; ++r) {
        const R* xr = x.data() + r * cols;
        R mean = 0;
        for (std::size_t c = 0; c < cols; ++c) mean += xr[c];
        mean /= R(cols);
        R var = 0;
        for (std::size_t c = 0; c < cols; ++c) var += (xr[c] - mean) * (xr[c] - mean);
        var /= R(cols);
        inv_std[r] = R(1) / std::sqrt(var + eps);
        for (std::size_t c = 0; c < cols; ++c) out[r * cols + c] = (xr[c] - mean) * inv_std[r];
    }
    return a.graph->record("layernorm", std::move(out), {a},
                           [a, inv_std = std::move(inv_std), rows, cols](Graph<R>& g, std::uint32_t self) {
                               const auto& go = g.grad(self);
                               const auto& y = g.value(self);
                               auto& ga = g.grad_buffer(a.id);
                               for (std::size_t r = 0; r < rows; ++r) {
                                   R mg = 0, mgy = 0;
                                   for (std::size_t c = 0; c < cols; ++c) {
                                       mg += go[r * cols + c];
                                       mgy += go[r * cols + c] * y[r * cols + c];
                                   }
                                   mg /= R(cols);
                                   mgy /= R(cols);
                                   for (std::size_t c = 0; c < cols; ++c) {
                                       std::size_t i = r * cols + c;
                                       ga[i] += inv_std[r] * (go[i] - mg - y[i] * mgy);
                                   }
                               }
                           });
}

// Row-wise softmax.
template <typename R>
Var<R> softmax(Var<R> a) {
    const auto& x = a.value();
    const std::size_t rows = x.rows(), cols = x.cols();
    Array<R> out(x.shape());
    for (std::size_t r = 0; r < rows; ++r) {
        const R* xr = x.data() + r * cols;
        R mx = xr[0];
        for (std::size_t c = 1; c < cols; ++c) mx = std::max(mx, xr[c]);
        R s = 0;
        for (std::size_t c = 0; c < cols; ++c) s += (out[r * cols + c] = std::exp(xr[c] - mx));
        for (std::size_t c = 0; c < cols; ++c) out[r * cols + c] /= s;
    }
    return a.graph->record("softmax", std::move(out), {a}, [a, rows, cols](Graph<R>& g, std::uint32_t self) {
        const auto& go = g.grad(self);
        const auto& y = g.value(self);
        auto& ga = g.grad_buffer(a.id);
        for (std::size_t r = 0; r < rows; ++r) {
            R dot = 0;
            for (std::size_t c = 0; c < cols; ++c) dot += go[r * cols + c] * y[r * cols + c];
            for (std::size_t c = 0; c < cols; ++c) {
                std::size_t i = r * cols + c;
                ga[i] += y[i] * (go[i] - dot);
            }
        }
    });
}

// Row-wise projection onto the unit sphere: x / sqrt(|x|^2 + eps).
template <typename R>
Var<R> l2norm(Var<R> a, R eps = R(1e-10)) {
    const auto& x = a.value();
    const std::size_t rows = x.rows(), cols = x.cols();
    Array<R> out(x.shape());
    std::vector<R> inv(rows);
    for (std::size_t r = 0; r < rows; ++r) {
        R s = eps;
        for (std::size_t c = 0; c < cols; ++c) s += x[r * cols + c] * x[r * cols + c];
        inv[r] = R(1) / std::sqrt(s);
        for (std::size_t c = 0; c < cols; ++c) out[r * cols + c] = x[r * cols + c] * inv[r];
    }
    return a.graph->record("l2norm", std::move(out), {a},
                           [a, inv = std::move(inv), rows, cols](Graph<R>& g, std::uint32_t self) {
                               const auto& go = g.grad(self);
                               const auto& y = g.value(self);
                               auto& ga = g.grad_buffer(a.id);
                               for (std::size_t r = 0; r < rows; ++r) {
                                   R dot = 0;
                                   for (std::size_t c = 0; c < cols; ++c) dot += go[r * cols + c] * y[r * cols + c];
                                   for (std::size_t c = 0; c < cols; ++c) {
                                       std::size_t i = r * cols + c;
                                       ga[i] += inv[r] * (go[i] - y[i] * dot);
                                   }
                               }
                           });
}

// Stacks inputs vertically; rank-1 inputs count as one row.
template <typename R>
Var<R> concat_rows(const std::vector<Var<R>>& parts) {
    if (parts.empty()) throw ContractError("concat_rows: no inputs");
    const std::size_t cols = parts[0].value().cols();
    std::size_t rows = 0;
    for (const auto& p : parts) {
        if (p.value().cols() != cols)
            throw ContractError(detail::shapes("concat_rows", parts[0].shape(), p.shape()));
        rows += p.value().rows();
    }
    Array<R> out({rows, cols});
    std::size_t off = 0;
    for (const auto& p : parts) {
        std::copy(p.value().values().begin(), p.value().values().end(), out.values().begin() + off);
        off += p.value().size();
    }
    return parts[0].graph->record("concat_rows", std::move(out), parts, [parts](Graph<R>& g, std::uint32_t self) {
        const auto& go = g.grad(self);
        std::size_t off = 0;
        for (const auto& p : parts) {
            std::size_t n = g.value(p.id).size();
            if (g.requires_grad(p.id)) {
                auto& gp = g.grad_buffer(p.id);
                for (std::size_t i = 0; i < n; ++i) gp[i] += go[off + i];
            }
            off += n;
        }
    });
}

// Joins inputs horizontally; all inputs must have the same row count.
template <typename R>
Var<R> concat_cols(const std::vector<Var<R>>& parts) {
    if (parts.empty()) throw ContractError("concat_cols: no inputs");
    const std::size_t rows = parts[0].value().rows();
    std::size_t cols = 0;
    for (const auto& p : parts) {
        if (p.value().rows() != rows)
            throw ContractError(detail::shapes("concat_cols", parts[0].shape(), p.shape()));
        cols += p.value().cols();
    }
    std::vector<std::size_t> shape = parts[0].value().rank() == 1 ? std::vector<std::size_t>{cols}
                                                                  : std::vector<std::size_t>{rows, cols};
    Array<R> out(shape);
    std::size_t c0 = 0;
    for (const auto& p : parts) {
        const auto& v = p.value();
        for (std::size_t r = 0; r < rows; ++r)
            for (std::size_t c = 0; c < v.cols(); ++c) out[r * cols + c0 + c] = v[r * v.cols() + c];
        c0 += v.cols();
    }
    return parts[0].graph->record("concat_cols", std::move(out), parts,
                                  [parts, rows, cols](Graph<R>& g, std::uint32_t self) {
                                      const auto& go = g.grad(self);
                                      std::size_t c0 = 0;
                                      for (const auto& p : parts) {
                                          std::size_t pc = g.value(p.id).cols();
                                          if (g.requires_grad(p.id)) {
                                              auto& gp = g.grad_buffer(p.id);
                                              for (std::size_t r = 0; r < rows; ++r)
                                                  for (std::size_t c = 0; c < pc; ++c)
                                                      gp[r * pc + c] += go[r * cols + c0 + c];
                                          }
                                          c0 += pc;
                                      }
                                  });
}

// Rows [begin, end) as a rank-2 array.
template <typename R>
Var<R> slice_rows(Var<R> a, std::size_t begin, std::size_t end) {
    const auto& x = a.value();
    if (begin >= end || end > x.rows())
        throw ContractError("slice_rows: range [" + std::to_string(begin) + "," + std::to_string(end) +
                            ") invalid for shape " + Array<R>::shape_string(x.shape()));
    const std::size_t cols = x.cols();
    Array<R> out({end - begin, cols},
                 std::vector<R>(x.values().begin() + begin * cols, x.values().begin() + end * cols));
    return a.graph->record("slice_rows", std::move(out), {a}, [a, begin, cols](Graph<R>& g, std::uint32_t self) {
        const auto& go = g.grad(self);
        auto& ga = g.grad_buffer(a.id);
        for (std::size_t i = 0; i < go.size(); ++i) ga[begin * cols + i] += go[i];
    });
}

// Columns [begin, end), keeping the rank of the input.
template <typename R>
Var<R> slice_cols(Var<R> a, std::size_t begin, std::size_t end) {
    const auto& x = a.value();
    if (begin >= end || end > x.cols())
        throw ContractError("slice_cols: range [" + std::to_string(begin) + "," + std::to_string(end) +
                            ") invalid for shape " + Array<R>::shape_string(x.shape()));
    const std::size_t rows = x.rows(), cols = x.cols(), w = end - begin;
    std::vector<std::size_t> shape = x.rank() == 1 ? std::vector<std::size_t>{w} : std::vector<std::size_t>{rows, w};
    Array<R> out(shape);
    for (std::size_t r = 0; r < rows; ++r)
        for (std::size_t c = 0; c < w; ++c) out[r * w + c] = x[r * cols + begin + c];
    return a.graph->record("slice_cols", std::move(out), {a},
                           [a, begin, rows, cols, w](Graph<R>& g, std::uint32_t self) {
                               const auto& go = g.grad(self);
                               auto& ga = g.grad_buffer(a.id);
                               for (std::size_t r = 0; r < rows; ++r)
                                   for (std::size_t c = 0; c < w; ++c) ga[r * cols + begin + c] += go[r * w + c];
                           });
}

template <typename R>
Var<R> reshape(Var<R> a, std::vector<std::size_t> shape) {
    const auto& x = a.value();
    Array<R> out(std::move(shape), x.values());
    return a.graph->record("reshape", std::move(out), {a}, [a](Graph<R>& g, std::uint32_t self) {
        detail::accumulate(g.grad_buffer(a.id), g.grad(self));
    });
}

template <typename R>
Var<R> sum(Var<R> a) {
    R s = 0;
    for (R v : a.value().values()) s += v;
    return a.graph->record("sum", Array<R>::scalar(s), {a}, [a](Graph<R>& g, std::uint32_t self) {
        R go = g.grad(self)[0];
        for (auto& v : g.grad_buffer(a.id).values()) v += go;
    });
}

template <typename R>
Var<R> mean(Var<R> a) {
    const R n = R(a.value().size());
    R s = 0;
    for (R v : a.value().values()) s += v;
    return a.graph->record("mean", Array<R>::scalar(s / n), {a}, [a, n](Graph<R>& g, std::uint32_t self) {
        R go = g.grad(self)[0] / n;
        for (auto& v : g.grad_buffer(a.id).values()) v += go;
    });
}

// Same value as the input, never propagates gradient.
template <typename R>
Var<R> stop_gradient(Var<R> a) {
    return a.graph->constant(a.value());
}

template <typename R>
Var<R> operator+(Var<R> a, Var<R> b) { return add(a, b); }
template <typename R>
Var<R> operator-(Var<R> a, Var<R> b) { return sub(a, b); }
template <typename R>
Var<R> operator*(Var<R> a, Var<R> b) { return mul(a, b); }

struct AdamConfig {
    double lr = 1e-3;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
    double weight_decay = 0.0;
};

// AdamW update of every parameter whose group is in `mask`, using the gradients
// held in the store. Moments of unmasked parameters are left untouched.
template <typename R>
void adam_step(ParamStore<R>& params, const AdamConfig& cfg, GroupMask mask) {
    if (!(cfg.lr > 0)) throw ContractError("adam_step: learning rate must be positive");
    for (auto& p : params) {
        if (!mask.contains(p.group)) continue;
        if (p.m.empty()) {
            p.m = Array<R>(p.value.shape());
            p.v = Array<R>(p.value.shape());
        }
        ++p.steps;
        const double bc1 = 1.0 - std::pow(cfg.beta1, double(p.steps));
        const double bc2 = 1.0 - std::pow(cfg.beta2, double(p.steps));
        for (std::size_t i = 0; i < p.value.size(); ++i) {
            const double g = p.grad[i];
            const double m = cfg.beta1 * double(p.m[i]) + (1.0 - cfg.beta1) * g;
            const double v = cfg.beta2 * double(p.v[i]) + (1.0 - cfg.beta2) * g * g;
            p.m[i] = R(m);
            p.v[i] = R(v);
            const double upd = (m / bc1) / (std::sqrt(v / bc2) + cfg.eps) + cfg.weight_decay * double(p.value[i]);
            p.value[i] = R(double(p.value[i]) - cfg.lr * upd);
        }
    }
}

}  // namespace mwm::ad
