#pragma once

// Dense row-major tensors, trainable parameters and a reverse-mode tape.
//
// A Tape records every differentiable operation executed on it. backward()
// walks the recorded nodes in exact reverse order, so inputs are always
// recorded before the ops that consume them. Node values live in a deque so
// references stay valid while new nodes are appended.

#include <atomic>
#include <cmath>
#include <cstddef>
#include <deque>
#include <functional>
#include <initializer_list>
#include <numeric>
#include <span>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include <Eigen/Core>

#include "pgap/error.hpp"

namespace pgap {

using Shape = std::vector<std::size_t>;

inline std::string shape_to_string(const Shape& shape) {
    std::ostringstream os;
    os << '[';
    for (std::size_t i = 0; i < shape.size(); ++i) os << (i ? "x" : "") << shape[i];
    os << ']';
    return os.str();
}

class Tensor {
public:
    Tensor() = default;

    explicit Tensor(Shape shape, double fill = 0.0) : shape_(std::move(shape)) {
        data_.assign(checked_size(shape_), fill);
    }

    Tensor(Shape shape, const std::vector<double>& data) : shape_(std::move(shape)), data_(data.begin(), data.end()) {
        if (checked_size(shape_) != data_.size()) {
            throw DimensionError("tensor data length " + std::to_string(data_.size()) +
                                 " does not match shape " + shape_to_string(shape_));
        }
    }

    static Tensor vector(std::initializer_list<double> values) {
        return Tensor({values.size()}, std::vector<double>(values));
    }

    static Tensor matrix(std::initializer_list<std::initializer_list<double>> rows) {
        const std::size_t n = rows.size();
        const std::size_t c = n ? rows.begin()->size() : 0;
        std::vector<double> data;
        data.reserve(n * c);
        for (const auto& row : rows) {
            if (row.size() != c) throw DimensionError("ragged matrix literal");
            data.insert(data.end(), row.begin(), row.end());
        }
        return Tensor({n, c}, std::move(data));
    }

    static Tensor scalar(double value) { return Tensor({1}, std::vector<double>{value}); }

    const Shape& shape() const noexcept { return shape_; }
    std::size_t rank() const noexcept { return shape_.size(); }
    std::size_t size() const noexcept { return data_.size(); }
    bool empty() const noexcept { return data_.empty(); }

    /// Rank-1 tensors behave as a single row.
    std::size_t rows() const noexcept { return rank() == 2 ? shape_[0] : 1; }
    std::size_t cols() const noexcept { return rank() == 2 ? shape_[1] : data_.size(); }

    double& operator[](std::size_t i) { return data_[i]; }
    double operator[](std::size_t i) const { return data_[i]; }
    double& operator()(std::size_t r, std::size_t c) { return data_[r * cols() + c]; }
    double operator()(std::size_t r, std::size_t c) const { return data_[r * cols() + c]; }

    std::span<double> data() noexcept { return data_; }
    std::span<const double> data() const noexcept { return data_; }
    std::vector<double> values() const { return {data_.begin(), data_.end()}; }

    void fill(double v) { std::fill(data_.begin(), data_.end(), v); }

    Tensor reshaped(Shape shape) const& {
        Tensor t = *this;
        return std::move(t).reshaped(std::move(shape));
    }
    Tensor reshaped(Shape shape) && {
        if (checked_size(shape) != data_.size()) {
            throw DimensionError("cannot reshape " + shape_to_string(shape_) + " to " + shape_to_string(shape));
        }
        shape_ = std::move(shape);
        return std::move(*this);
    }

    bool operator==(const Tensor&) const = default;

private:
    static std::size_t checked_size(const Shape& shape) {
        if (shape.empty()) throw DimensionError("tensor shape must have at least one dimension");
        std::size_t n = 1;
        for (auto d : shape) {
            if (d == 0) throw EmptyInputError("tensor dimension of size zero in " + shape_to_string(shape));
            n *= d;
        }
        return n;
    }

    // Fixed alignment keeps Eigen's vectorised summation order independent of
    // where the allocator happens to place a buffer.
    using Storage = std::vector<double, Eigen::aligned_allocator<double>>;

    Shape shape_;
    Storage data_;
};

using RowMatrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MatrixView = Eigen::Map<RowMatrix>;
using ConstMatrixView = Eigen::Map<const RowMatrix>;

inline MatrixView as_matrix(Tensor& t) {
    return {t.data().data(), static_cast<Eigen::Index>(t.rows()), static_cast<Eigen::Index>(t.cols())};
}
inline ConstMatrixView as_matrix(const Tensor& t) {
    return {t.data().data(), static_cast<Eigen::Index>(t.rows()), static_cast<Eigen::Index>(t.cols())};
}

class Parameter {
public:
    Parameter(std::string name, Tensor value)
        : name_(std::move(name)), value_(std::move(value)), grad_(value_.shape()), id_(next_id()) {}

    Parameter(const Parameter& other)
        : name_(other.name_), value_(other.value_), grad_(other.grad_), id_(next_id()) {}
    Parameter& operator=(const Parameter& other) {
        name_ = other.name_;
        value_ = other.value_;
        grad_ = other.grad_;
        return *this;
    }
    Parameter(Parameter&&) noexcept = default;
    Parameter& operator=(Parameter&&) noexcept = default;

    const std::string& name() const noexcept { return name_; }
    std::size_t id() const noexcept { return id_; }
    const Tensor& value() const noexcept { return value_; }
    Tensor& value() noexcept { return value_; }
    const Tensor& grad() const noexcept { return grad_; }
    Tensor& grad() noexcept { return grad_; }

    void zero_grad() { grad_.fill(0.0); }

private:
    static std::size_t next_id() {
        static std::atomic<std::size_t> counter{0};
        return counter.fetch_add(1, std::memory_order_relaxed);
    }

    std::string name_;
    Tensor value_;
    Tensor grad_;
    std::size_t id_;
};

struct Var {
    std::size_t index = 0;
};

class Tape {
public:
    /// Receives the gradient flowing into the node's output.
    using BackwardFn = std::function<void(Tape&, const Tensor&)>;

    Tape() = default;
    Tape(const Tape&) = delete;
    Tape& operator=(const Tape&) = delete;
    Tape(Tape&&) = default;
    Tape& operator=(Tape&&) = default;

    Var constant(Tensor value) { return push(std::move(value), nullptr, nullptr, false, {}); }

    /// Trainable leaf: backward() accumulates into the parameter's gradient.
    Var parameter(Parameter& p) { return push({}, &p.value(), &p, true, {}); }

    /// Frozen leaf: the value is referenced, no gradient is produced.
    Var parameter(const Parameter& p) { return push({}, &p.value(), nullptr, false, {}); }

    Var record(Tensor value, bool requires_grad, BackwardFn fn) {
        return push(std::move(value), nullptr, nullptr, requires_grad, requires_grad ? std::move(fn) : BackwardFn{});
    }

    const Tensor& value(Var v) const {
        const Node& n = node(v);
        return n.external ? *n.external : n.value;
    }

    bool requires_grad(Var v) const { return node(v).requires_grad; }

    /// Gradient computed by the last backward() call; zero if none reached the
    /// node. Trainable leaves report their parameter's accumulated gradient.
    Tensor grad(Var v) const {
        const Node& n = node(v);
        if (n.param) return n.param->grad();
        return n.has_grad ? n.grad : Tensor(value(v).shape());
    }

    /// Mutable gradient slot of an input, zero-initialised on first use.
    /// Returns nullptr for nodes that do not need a gradient.
    Tensor* grad_slot(Var v) {
        Node& n = node(v);
        if (!n.requires_grad) return nullptr;
        if (n.param) return &n.param->grad();
        if (!n.has_grad) {
            n.grad = Tensor(value(v).shape());
            n.has_grad = true;
        }
        return &n.grad;
    }

    std::size_t size() const noexcept { return nodes_.size(); }

    /// Runs the reverse sweep seeded with gradients for one or more outputs.
    void backward(std::span<const std::pair<Var, Tensor>> seeds) {
        for (auto& n : nodes_) {
            n.has_grad = false;
            n.grad = Tensor();
        }
        std::size_t last = 0;
        for (const auto& [v, g] : seeds) {
            if (g.shape() != value(v).shape()) {
                throw DimensionError("seed gradient shape " + shape_to_string(g.shape()) +
                                     " does not match output shape " + shape_to_string(value(v).shape()));
            }
            if (Tensor* slot = grad_slot(v)) {
                as_matrix(*slot) += as_matrix(g);
            }
            last = std::max(last, v.index + 1);
        }
        for (std::size_t i = last; i-- > 0;) {
            Node& n = nodes_[i];
            if (!n.has_grad) continue;
            if (n.fn) n.fn(*this, n.grad);
        }
    }

private:
    struct Node {
        Tensor value;
        const Tensor* external = nullptr;
        Parameter* param = nullptr;
        bool requires_grad = false;
        bool has_grad = false;
        Tensor grad;
        BackwardFn fn;
    };

    Var push(Tensor value, const Tensor* external, Parameter* param, bool requires_grad, BackwardFn fn) {
        nodes_.push_back(Node{std::move(value), external, param, requires_grad, false, Tensor(), std::move(fn)});
        return Var{nodes_.size() - 1};
    }

    Node& node(Var v) {
        if (v.index >= nodes_.size()) throw ContractError("variable does not belong to this tape");
        return nodes_[v.index];
    }
    const Node& node(Var v) const {
        if (v.index >= nodes_.size()) throw ContractError("variable does not belong to this tape");
        return nodes_[v.index];
    }

    std::deque<Node> nodes_;
};

/// Backpropagates from a scalar loss. Parameter gradients accumulate across calls.
inline void backward(Tape& tape, Var loss) {
    if (tape.value(loss).size() != 1) {
        throw ContractError("backward() needs a scalar loss, got shape " +
                            shape_to_string(tape.value(loss).shape()));
    }
    const std::pair<Var, Tensor> seed{loss, Tensor(tape.value(loss).shape(), 1.0)};
    tape.backward(std::span(&seed, 1));
}

inline void backward(Tape& tape, std::span<const std::pair<Var, Tensor>> seeds) { tape.backward(seeds); }

// ---------------------------------------------------------------------------
// Differentiable operations

/// Row-wise affine map: out = x W + b. A rank-1 x is treated as one row.
inline Var linear(Tape& tape, Var x, Var weight, Var bias) {
    const Tensor& xv = tape.value(x);
    const Tensor& wv = tape.value(weight);
    const Tensor& bv = tape.value(bias);
    if (xv.rank() > 2 || wv.rank() != 2 || xv.cols() != wv.shape()[0]) {
        throw DimensionError("linear: input " + shape_to_string(xv.shape()) + " incompatible with weight " +
                             shape_to_string(wv.shape()));
    }
    if (bv.rank() != 1 || bv.size() != wv.shape()[1]) {
        throw DimensionError("linear: bias " + shape_to_string(bv.shape()) + " incompatible with weight " +
                             shape_to_string(wv.shape()));
    }
    const std::size_t out_cols = wv.shape()[1];
    Tensor out(xv.rank() == 2 ? Shape{xv.rows(), out_cols} : Shape{out_cols});
    auto o = as_matrix(out);
    o.noalias() = as_matrix(xv) * as_matrix(wv);
    o.rowwise() += as_matrix(bv).row(0);

    const bool rg = tape.requires_grad(x) || tape.requires_grad(weight) || tape.requires_grad(bias);
    return tape.record(std::move(out), rg, [x, weight, bias](Tape& t, const Tensor& g) {
        const auto gm = as_matrix(g);
        if (Tensor* gw = t.grad_slot(weight)) as_matrix(*gw).noalias() += as_matrix(t.value(x)).transpose() * gm;
        if (Tensor* gb = t.grad_slot(bias)) as_matrix(*gb) += gm.colwise().sum();
        if (Tensor* gx = t.grad_slot(x)) as_matrix(*gx).noalias() += gm * as_matrix(t.value(weight)).transpose();
    });
}

inline Var relu(Tape& tape, Var x) {
    const Tensor& xv = tape.value(x);
    Tensor out(xv.shape());
    auto in = xv.data();
    auto o = out.data();
    for (std::size_t i = 0; i < in.size(); ++i) o[i] = in[i] > 0.0 ? in[i] : 0.0;
    return tape.record(std::move(out), tape.requires_grad(x), [x](Tape& t, const Tensor& g) {
        Tensor* gx = t.grad_slot(x);
        auto in = t.value(x).data();
        auto gi = g.data();
        auto go = gx->data();
        for (std::size_t i = 0; i < in.size(); ++i) {
            if (in[i] > 0.0) go[i] += gi[i];
        }
    });
}

/// Column means of an n x c matrix (global average pooling).
inline Var mean_rows(Tape& tape, Var f) {
    const Tensor& fv = tape.value(f);
    if (fv.rank() != 2) throw DimensionError("mean_rows expects a matrix, got " + shape_to_string(fv.shape()));
    const std::size_t n = fv.rows();
    Tensor out({fv.cols()});
    as_matrix(out) = as_matrix(fv).colwise().sum() / static_cast<double>(n);
    return tape.record(std::move(out), tape.requires_grad(f), [f, n](Tape& t, const Tensor& g) {
        as_matrix(*t.grad_slot(f)).rowwise() += as_matrix(g).row(0) / static_cast<double>(n);
    });
}

/// Normalised Gram matrix (1/n) F^T F of an n x c matrix. The result is
/// mirrored from its upper triangle so it is exactly symmetric.
inline Var gram(Tape& tape, Var f) {
    const Tensor& fv = tape.value(f);
    if (fv.rank() != 2) throw DimensionError("gram expects a matrix, got " + shape_to_string(fv.shape()));
    const std::size_t n = fv.rows();
    const std::size_t c = fv.cols();
    Tensor out({c, c});
    auto o = as_matrix(out);
    const auto fm = as_matrix(fv);
    o.noalias() = fm.transpose() * fm;
    o /= static_cast<double>(n);
    for (std::size_t a = 0; a < c; ++a) {
        for (std::size_t b = a + 1; b < c; ++b) out(b, a) = out(a, b);
    }
    return tape.record(std::move(out), tape.requires_grad(f), [f, n](Tape& t, const Tensor& g) {
        const auto gm = as_matrix(g);
        const RowMatrix sym = (gm + gm.transpose()) / static_cast<double>(n);
        as_matrix(*t.grad_slot(f)).noalias() += as_matrix(t.value(f)) * sym;
    });
}

/// Flattens and concatenates inputs into one rank-1 tensor.
inline Var concat(Tape& tape, std::initializer_list<Var> parts) {
    std::vector<Var> inputs(parts);
    std::size_t total = 0;
    for (Var v : inputs) total += tape.value(v).size();
    Tensor out({total});
    std::size_t offset = 0;
    bool rg = false;
    for (Var v : inputs) {
        const auto src = tape.value(v).data();
        std::copy(src.begin(), src.end(), out.data().begin() + static_cast<std::ptrdiff_t>(offset));
        offset += src.size();
        rg = rg || tape.requires_grad(v);
    }
    return tape.record(std::move(out), rg, [inputs](Tape& t, const Tensor& g) {
        std::size_t off = 0;
        for (Var v : inputs) {
            const std::size_t len = t.value(v).size();
            if (Tensor* gv = t.grad_slot(v)) {
                auto dst = gv->data();
                for (std::size_t i = 0; i < len; ++i) dst[i] += g[off + i];
            }
            off += len;
        }
    });
}

inline constexpr double kNormEpsilon = 1e-12;

/// v / ||v||_2 for a rank-1 tensor.
inline Var l2_normalize(Tape& tape, Var v) {
    const Tensor& vv = tape.value(v);
    if (vv.rank() != 1) throw DimensionError("l2_normalize expects a vector, got " + shape_to_string(vv.shape()));
    const double norm = as_matrix(vv).norm();
    if (!(norm > kNormEpsilon)) {
        throw DegenerateError("cannot normalise a vector with norm " + std::to_string(norm));
    }
    Tensor out(vv.shape());
    as_matrix(out) = as_matrix(vv) / norm;
    return tape.record(std::move(out), tape.requires_grad(v), [v, norm](Tape& t, const Tensor& g) {
        // d(v/|v|) = (g - u (u.g)) / |v| with u = v/|v|
        const auto vm = as_matrix(t.value(v));
        const auto gm = as_matrix(g);
        const double ug = vm.row(0).dot(gm.row(0)) / norm;
        as_matrix(*t.grad_slot(v)) += (gm - vm * (ug / norm)) / norm;
    });
}

/// Numerically stable log-softmax of a rank-1 tensor.
inline Var log_softmax(Tape& tape, Var z) {
    const Tensor& zv = tape.value(z);
    if (zv.rank() != 1) throw DimensionError("log_softmax expects a vector, got " + shape_to_string(zv.shape()));
    const auto zm = as_matrix(zv);
    const double mx = zm.maxCoeff();
    const double lse = mx + std::log((zm.array() - mx).exp().sum());
    Tensor out(zv.shape());
    as_matrix(out) = zm.array() - lse;
    return tape.record(std::move(out), tape.requires_grad(z), [z, lse](Tape& t, const Tensor& g) {
        const auto gm = as_matrix(g);
        const double gsum = gm.sum();
        const auto probs = (as_matrix(t.value(z)).array() - lse).exp();
        as_matrix(*t.grad_slot(z)).array() += gm.array() - probs * gsum;
    });
}

/// Sum of all entries, as a scalar.
inline Var sum(Tape& tape, Var x) {
    const Tensor& xv = tape.value(x);
    Tensor out = Tensor::scalar(as_matrix(xv).sum());
    return tape.record(std::move(out), tape.requires_grad(x), [x](Tape& t, const Tensor& g) {
        as_matrix(*t.grad_slot(x)).array() += g[0];
    });
}

/// Sum of x weighted elementwise by a constant tensor of the same shape.
inline Var weighted_sum(Tape& tape, Var x, Tensor weights) {
    const Tensor& xv = tape.value(x);
    if (weights.shape() != xv.shape()) {
        throw DimensionError("weighted_sum: weights " + shape_to_string(weights.shape()) + " vs input " +
                             shape_to_string(xv.shape()));
    }
    Tensor out = Tensor::scalar(as_matrix(xv).cwiseProduct(as_matrix(weights)).sum());
    return tape.record(std::move(out), tape.requires_grad(x), [x, w = std::move(weights)](Tape& t, const Tensor& g) {
        as_matrix(*t.grad_slot(x)) += as_matrix(w) * g[0];
    });
}

} // namespace pgap
