#pragma once

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <limits>
#include <memory>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "gaitlab/tensor.hpp"

// Reverse-mode automatic differentiation on a per-iteration tape.
// All values are double precision; nodes are created in program order and
// the backward sweep walks them in exact reverse, so gradient accumulation
// is deterministic down to the bit in a single-worker run.
namespace gaitlab::ad {

using EMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using EMap = Eigen::Map<EMat>;
using ECMap = Eigen::Map<const EMat>;
using EVecMap = Eigen::Map<Eigen::VectorXd>;
using ECVecMap = Eigen::Map<const Eigen::VectorXd>;

class Tape;

struct Var {
    Tape* tape = nullptr;
    int id = -1;
    bool valid() const { return tape != nullptr && id >= 0; }
};

class Tape {
public:
    explicit Tape(bool grad_enabled = true) : grad_enabled_(grad_enabled) {}
    Tape(const Tape&) = delete;
    Tape& operator=(const Tape&) = delete;

    bool grad_enabled() const { return grad_enabled_; }

    Var input(Tensor value, bool needs_grad) {
        nodes_.push_back(NodeRec{std::move(value), Tensor{}, nullptr, needs_grad && grad_enabled_});
        return Var{this, static_cast<int>(nodes_.size()) - 1};
    }

    Var constant(Tensor value) { return input(std::move(value), false); }

    const Tensor& value(Var v) const { return rec(v).value; }

    bool needs_grad(Var v) const { return rec(v).needs_grad; }

    // Gradient buffer, zero-initialized on first touch.
    Tensor& grad(Var v) {
        NodeRec& n = rec(v);
        if (n.grad.empty()) n.grad = Tensor(n.value.shape);
        return n.grad;
    }

    bool has_grad(Var v) const { return !rec(v).grad.empty(); }

    // Creates an op node. `backward` may be empty for non-differentiable
    // results; it receives this tape and the node's own id.
    Var make(Tensor value, const std::vector<Var>& parents,
             std::function<void(Tape&, int)> backward) {
        bool needs = false;
        for (const Var& p : parents) {
            if (p.tape != this) throw std::logic_error("autodiff: parent from another tape");
            needs = needs || rec(p).needs_grad;
        }
        needs = needs && grad_enabled_;
        nodes_.push_back(NodeRec{std::move(value), Tensor{},
                                 needs ? std::move(backward) : nullptr, needs});
        return Var{this, static_cast<int>(nodes_.size()) - 1};
    }

    // Reverse sweep from a scalar root (seeds d root = 1).
    void backward(Var root) {
        if (value(root).size() != 1) throw std::logic_error("backward: root is not scalar");
        Tensor seed(value(root).shape);
        seed.data[0] = 1.0;
        backward_seeded(root, seed);
    }

    void backward_seeded(Var root, const Tensor& seed) {
        if (!grad_enabled_) throw std::logic_error("backward on a no-grad tape");
        if (!seed.same_shape(value(root))) throw std::logic_error("backward: seed shape mismatch");
        Tensor& g = grad(root);
        for (int i = 0; i < seed.size(); ++i) g.data[static_cast<std::size_t>(i)] += seed.data[static_cast<std::size_t>(i)];
        for (int i = root.id; i >= 0; --i) {
            NodeRec& n = nodes_[static_cast<std::size_t>(i)];
            if (n.backward && !n.grad.empty()) n.backward(*this, i);
        }
    }

    std::size_t node_count() const { return nodes_.size(); }

private:
    struct NodeRec {
        Tensor value;
        Tensor grad;
        std::function<void(Tape&, int)> backward;
        bool needs_grad = false;
    };

    NodeRec& rec(Var v) {
        if (v.tape != this) throw std::logic_error("autodiff: var from another tape");
        return nodes_.at(static_cast<std::size_t>(v.id));
    }
    const NodeRec& rec(Var v) const {
        if (v.tape != this) throw std::logic_error("autodiff: var from another tape");
        return nodes_.at(static_cast<std::size_t>(v.id));
    }

    std::vector<NodeRec> nodes_;
    bool grad_enabled_;
};

namespace detail {

inline Var self(Tape& t, int id) { return Var{&t, id}; }

inline void accum(Tensor& dst, const Tensor& src) {
    for (int i = 0; i < dst.size(); ++i) dst.data[static_cast<std::size_t>(i)] += src.data[static_cast<std::size_t>(i)];
}

}  // namespace detail

// ---- elementwise ----

inline Var add(Var a, Var b) {
    Tape& t = *a.tape;
    const Tensor& va = t.value(a);
    const Tensor& vb = t.value(b);
    if (!va.same_shape(vb)) throw std::invalid_argument("add: shape mismatch");
    Tensor out(va.shape);
    for (int i = 0; i < va.size(); ++i) out.data[static_cast<std::size_t>(i)] = va.data[static_cast<std::size_t>(i)] + vb.data[static_cast<std::size_t>(i)];
    return t.make(std::move(out), {a, b}, [a, b](Tape& tp, int id) {
        const Tensor& g = tp.grad(detail::self(tp, id));
        if (tp.needs_grad(a)) detail::accum(tp.grad(a), g);
        if (tp.needs_grad(b)) detail::accum(tp.grad(b), g);
    });
}

inline Var sub(Var a, Var b) {
    Tape& t = *a.tape;
    const Tensor& va = t.value(a);
    const Tensor& vb = t.value(b);
    if (!va.same_shape(vb)) throw std::invalid_argument("sub: shape mismatch");
    Tensor out(va.shape);
    for (int i = 0; i < va.size(); ++i) out.data[static_cast<std::size_t>(i)] = va.data[static_cast<std::size_t>(i)] - vb.data[static_cast<std::size_t>(i)];
    return t.make(std::move(out), {a, b}, [a, b](Tape& tp, int id) {
        const Tensor& g = tp.grad(detail::self(tp, id));
        if (tp.needs_grad(a)) detail::accum(tp.grad(a), g);
        if (tp.needs_grad(b)) {
            Tensor& gb = tp.grad(b);
            for (int i = 0; i < g.size(); ++i) gb.data[static_cast<std::size_t>(i)] -= g.data[static_cast<std::size_t>(i)];
        }
    });
}

inline Var mul(Var a, Var b) {
    Tape& t = *a.tape;
    const Tensor& va = t.value(a);
    const Tensor& vb = t.value(b);
    if (!va.same_shape(vb)) throw std::invalid_argument("mul: shape mismatch");
    Tensor out(va.shape);
    for (int i = 0; i < va.size(); ++i) out.data[static_cast<std::size_t>(i)] = va.data[static_cast<std::size_t>(i)] * vb.data[static_cast<std::size_t>(i)];
    return t.make(std::move(out), {a, b}, [a, b](Tape& tp, int id) {
        const Tensor& g = tp.grad(detail::self(tp, id));
        const Tensor& va2 = tp.value(a);
        const Tensor& vb2 = tp.value(b);
        if (tp.needs_grad(a)) {
            Tensor& ga = tp.grad(a);
            for (int i = 0; i < g.size(); ++i) ga.data[static_cast<std::size_t>(i)] += g.data[static_cast<std::size_t>(i)] * vb2.data[static_cast<std::size_t>(i)];
        }
        if (tp.needs_grad(b)) {
            Tensor& gb = tp.grad(b);
            for (int i = 0; i < g.size(); ++i) gb.data[static_cast<std::size_t>(i)] += g.data[static_cast<std::size_t>(i)] * va2.data[static_cast<std::size_t>(i)];
        }
    });
}

inline Var scale(Var a, double s) {
    Tape& t = *a.tape;
    const Tensor& va = t.value(a);
    Tensor out(va.shape);
    for (int i = 0; i < va.size(); ++i) out.data[static_cast<std::size_t>(i)] = va.data[static_cast<std::size_t>(i)] * s;
    return t.make(std::move(out), {a}, [a, s](Tape& tp, int id) {
        const Tensor& g = tp.grad(detail::self(tp, id));
        Tensor& ga = tp.grad(a);
        for (int i = 0; i < g.size(); ++i) ga.data[static_cast<std::size_t>(i)] += g.data[static_cast<std::size_t>(i)] * s;
    });
}

inline Var relu(Var a) {
    Tape& t = *a.tape;
    const Tensor& va = t.value(a);
    Tensor out(va.shape);
    for (int i = 0; i < va.size(); ++i) out.data[static_cast<std::size_t>(i)] = va.data[static_cast<std::size_t>(i)] > 0 ? va.data[static_cast<std::size_t>(i)] : 0.0;
    return t.make(std::move(out), {a}, [a](Tape& tp, int id) {
        const Tensor& g = tp.grad(detail::self(tp, id));
        const Tensor& va2 = tp.value(a);
        Tensor& ga = tp.grad(a);
        for (int i = 0; i < g.size(); ++i)
            if (va2.data[static_cast<std::size_t>(i)] > 0) ga.data[static_cast<std::size_t>(i)] += g.data[static_cast<std::size_t>(i)];
    });
}

inline Var sigmoid(Var a) {
    Tape& t = *a.tape;
    const Tensor& va = t.value(a);
    Tensor out(va.shape);
    for (int i = 0; i < va.size(); ++i) {
        double x = va.data[static_cast<std::size_t>(i)];
        out.data[static_cast<std::size_t>(i)] = x >= 0 ? 1.0 / (1.0 + std::exp(-x))
                                                       : std::exp(x) / (1.0 + std::exp(x));
    }
    return t.make(std::move(out), {a}, [a](Tape& tp, int id) {
        Var v = detail::self(tp, id);
        const Tensor& g = tp.grad(v);
        const Tensor& y = tp.value(v);
        Tensor& ga = tp.grad(a);
        for (int i = 0; i < g.size(); ++i) {
            double s = y.data[static_cast<std::size_t>(i)];
            ga.data[static_cast<std::size_t>(i)] += g.data[static_cast<std::size_t>(i)] * s * (1.0 - s);
        }
    });
}

// Elementwise maximum; on exact ties the gradient routes to `a`.
inline Var pairwise_max(Var a, Var b) {
    Tape& t = *a.tape;
    const Tensor& va = t.value(a);
    const Tensor& vb = t.value(b);
    if (!va.same_shape(vb)) throw std::invalid_argument("pairwise_max: shape mismatch");
    Tensor out(va.shape);
    for (int i = 0; i < va.size(); ++i) out.data[static_cast<std::size_t>(i)] = std::max(va.data[static_cast<std::size_t>(i)], vb.data[static_cast<std::size_t>(i)]);
    return t.make(std::move(out), {a, b}, [a, b](Tape& tp, int id) {
        const Tensor& g = tp.grad(detail::self(tp, id));
        const Tensor& va2 = tp.value(a);
        const Tensor& vb2 = tp.value(b);
        if (tp.needs_grad(a)) {
            Tensor& ga = tp.grad(a);
            for (int i = 0; i < g.size(); ++i)
                if (va2.data[static_cast<std::size_t>(i)] >= vb2.data[static_cast<std::size_t>(i)]) ga.data[static_cast<std::size_t>(i)] += g.data[static_cast<std::size_t>(i)];
        }
        if (tp.needs_grad(b)) {
            Tensor& gb = tp.grad(b);
            for (int i = 0; i < g.size(); ++i)
                if (va2.data[static_cast<std::size_t>(i)] < vb2.data[static_cast<std::size_t>(i)]) gb.data[static_cast<std::size_t>(i)] += g.data[static_cast<std::size_t>(i)];
        }
    });
}

// ---- shape ----

inline Var reshape(Var a, std::vector<int> new_shape) {
    Tape& t = *a.tape;
    const Tensor& va = t.value(a);
    if (Tensor::count(new_shape) != va.size()) throw std::invalid_argument("reshape: element count mismatch");
    Tensor out(new_shape, va.data);
    return t.make(std::move(out), {a}, [a](Tape& tp, int id) {
        const Tensor& g = tp.grad(detail::self(tp, id));
        Tensor& ga = tp.grad(a);
        for (int i = 0; i < g.size(); ++i) ga.data[static_cast<std::size_t>(i)] += g.data[static_cast<std::size_t>(i)];
    });
}

// Row gather from a 2-D tensor; backward scatter-adds (duplicates allowed).
inline Var gather_rows(Var a, std::vector<int> rows) {
    Tape& t = *a.tape;
    const Tensor& va = t.value(a);
    if (va.rank() != 2) throw std::invalid_argument("gather_rows: need 2-d input");
    const int c = va.dim(1);
    Tensor out({static_cast<int>(rows.size()), c});
    for (std::size_t r = 0; r < rows.size(); ++r) {
        int src = rows[r];
        if (src < 0 || src >= va.dim(0)) throw std::out_of_range("gather_rows: row index");
        std::copy_n(va.data.begin() + static_cast<std::ptrdiff_t>(src) * c, c,
                    out.data.begin() + static_cast<std::ptrdiff_t>(r) * c);
    }
    return t.make(std::move(out), {a}, [a, rows = std::move(rows), c](Tape& tp, int id) {
        const Tensor& g = tp.grad(detail::self(tp, id));
        Tensor& ga = tp.grad(a);
        for (std::size_t r = 0; r < rows.size(); ++r)
            for (int j = 0; j < c; ++j)
                ga.data[static_cast<std::size_t>(rows[r]) * c + static_cast<std::size_t>(j)] +=
                    g.data[r * static_cast<std::size_t>(c) + static_cast<std::size_t>(j)];
    });
}

// Stacks equal-width row vectors (shape {c} or {1,c}) into {n,c}.
inline Var stack_rows(const std::vector<Var>& rows) {
    if (rows.empty()) throw std::invalid_argument("stack_rows: empty input");
    Tape& t = *rows[0].tape;
    const int c = t.value(rows[0]).size();
    Tensor out({static_cast<int>(rows.size()), c});
    for (std::size_t r = 0; r < rows.size(); ++r) {
        const Tensor& v = t.value(rows[r]);
        if (v.size() != c) throw std::invalid_argument("stack_rows: width mismatch");
        std::copy_n(v.data.begin(), c, out.data.begin() + static_cast<std::ptrdiff_t>(r) * c);
    }
    return t.make(std::move(out), rows, [rows, c](Tape& tp, int id) {
        const Tensor& g = tp.grad(detail::self(tp, id));
        for (std::size_t r = 0; r < rows.size(); ++r) {
            if (!tp.needs_grad(rows[r])) continue;
            Tensor& gr = tp.grad(rows[r]);
            for (int j = 0; j < c; ++j)
                gr.data[static_cast<std::size_t>(j)] += g.data[r * static_cast<std::size_t>(c) + static_cast<std::size_t>(j)];
        }
    });
}

// ---- linear algebra ----

// {m,n} -> {n,m}.
inline Var transpose(Var a) {
    Tape& t = *a.tape;
    const Tensor& va = t.value(a);
    if (va.rank() != 2) throw std::invalid_argument("transpose: need 2-d input");
    const int m = va.dim(0), n = va.dim(1);
    Tensor out({n, m});
    EMap(out.data.data(), n, m).noalias() = ECMap(va.data.data(), m, n).transpose();
    return t.make(std::move(out), {a}, [a, m, n](Tape& tp, int id) {
        const Tensor& g = tp.grad(detail::self(tp, id));
        Tensor& ga = tp.grad(a);
        EMap(ga.data.data(), m, n).noalias() += ECMap(g.data.data(), n, m).transpose();
    });
}

inline Var matmul(Var a, Var b) {
    Tape& t = *a.tape;
    const Tensor& va = t.value(a);
    const Tensor& vb = t.value(b);
    if (va.rank() != 2 || vb.rank() != 2 || va.dim(1) != vb.dim(0))
        throw std::invalid_argument("matmul: incompatible shapes " + va.shape_str() + " x " + vb.shape_str());
    Tensor out({va.dim(0), vb.dim(1)});
    EMap(out.data.data(), out.dim(0), out.dim(1)) =
        ECMap(va.data.data(), va.dim(0), va.dim(1)) * ECMap(vb.data.data(), vb.dim(0), vb.dim(1));
    return t.make(std::move(out), {a, b}, [a, b](Tape& tp, int id) {
        const Tensor& g = tp.grad(detail::self(tp, id));
        const Tensor& va2 = tp.value(a);
        const Tensor& vb2 = tp.value(b);
        ECMap gm(g.data.data(), g.dim(0), g.dim(1));
        if (tp.needs_grad(a)) {
            Tensor& ga = tp.grad(a);
            EMap(ga.data.data(), ga.dim(0), ga.dim(1)).noalias() +=
                gm * ECMap(vb2.data.data(), vb2.dim(0), vb2.dim(1)).transpose();
        }
        if (tp.needs_grad(b)) {
            Tensor& gb = tp.grad(b);
            EMap(gb.data.data(), gb.dim(0), gb.dim(1)).noalias() +=
                ECMap(va2.data.data(), va2.dim(0), va2.dim(1)).transpose() * gm;
        }
    });
}

// a (m×k) times b-transposed (n×k) -> m×n; the layout linear layers want.
inline Var matmul_nt(Var a, Var b) {
    Tape& t = *a.tape;
    const Tensor& va = t.value(a);
    const Tensor& vb = t.value(b);
    if (va.rank() != 2 || vb.rank() != 2 || va.dim(1) != vb.dim(1))
        throw std::invalid_argument("matmul_nt: incompatible shapes " + va.shape_str() + " x " + vb.shape_str());
    Tensor out({va.dim(0), vb.dim(0)});
    EMap(out.data.data(), out.dim(0), out.dim(1)).noalias() =
        ECMap(va.data.data(), va.dim(0), va.dim(1)) *
        ECMap(vb.data.data(), vb.dim(0), vb.dim(1)).transpose();
    return t.make(std::move(out), {a, b}, [a, b](Tape& tp, int id) {
        const Tensor& g = tp.grad(detail::self(tp, id));
        const Tensor& va2 = tp.value(a);
        const Tensor& vb2 = tp.value(b);
        ECMap gm(g.data.data(), g.dim(0), g.dim(1));
        if (tp.needs_grad(a)) {
            Tensor& ga = tp.grad(a);
            EMap(ga.data.data(), ga.dim(0), ga.dim(1)).noalias() +=
                gm * ECMap(vb2.data.data(), vb2.dim(0), vb2.dim(1));
        }
        if (tp.needs_grad(b)) {
            Tensor& gb = tp.grad(b);
            EMap(gb.data.data(), gb.dim(0), gb.dim(1)).noalias() +=
                gm.transpose() * ECMap(va2.data.data(), va2.dim(0), va2.dim(1));
        }
    });
}

// Adds a length-n row vector to every row of an m×n tensor.
inline Var add_rowvec(Var a, Var b) {
    Tape& t = *a.tape;
    const Tensor& va = t.value(a);
    const Tensor& vb = t.value(b);
    if (va.rank() != 2 || vb.size() != va.dim(1)) throw std::invalid_argument("add_rowvec: shapes");
    Tensor out(va.shape);
    const int m = va.dim(0), n = va.dim(1);
    for (int r = 0; r < m; ++r)
        for (int j = 0; j < n; ++j)
            out.data[static_cast<std::size_t>(r) * n + j] = va.data[static_cast<std::size_t>(r) * n + j] + vb.data[static_cast<std::size_t>(j)];
    return t.make(std::move(out), {a, b}, [a, b, m, n](Tape& tp, int id) {
        const Tensor& g = tp.grad(detail::self(tp, id));
        if (tp.needs_grad(a)) detail::accum(tp.grad(a), g);
        if (tp.needs_grad(b)) {
            Tensor& gb = tp.grad(b);
            for (int r = 0; r < m; ++r)
                for (int j = 0; j < n; ++j) gb.data[static_cast<std::size_t>(j)] += g.data[static_cast<std::size_t>(r) * n + j];
        }
    });
}

// Multiplies every row of an m×n tensor by a length-n gate vector.
inline Var mul_rowvec(Var a, Var b) {
    Tape& t = *a.tape;
    const Tensor& va = t.value(a);
    const Tensor& vb = t.value(b);
    if (va.rank() != 2 || vb.size() != va.dim(1)) throw std::invalid_argument("mul_rowvec: shapes");
    Tensor out(va.shape);
    const int m = va.dim(0), n = va.dim(1);
    for (int r = 0; r < m; ++r)
        for (int j = 0; j < n; ++j)
            out.data[static_cast<std::size_t>(r) * n + j] = va.data[static_cast<std::size_t>(r) * n + j] * vb.data[static_cast<std::size_t>(j)];
    return t.make(std::move(out), {a, b}, [a, b, m, n](Tape& tp, int id) {
        const Tensor& g = tp.grad(detail::self(tp, id));
        const Tensor& va2 = tp.value(a);
        const Tensor& vb2 = tp.value(b);
        if (tp.needs_grad(a)) {
            Tensor& ga = tp.grad(a);
            for (int r = 0; r < m; ++r)
                for (int j = 0; j < n; ++j)
                    ga.data[static_cast<std::size_t>(r) * n + j] += g.data[static_cast<std::size_t>(r) * n + j] * vb2.data[static_cast<std::size_t>(j)];
        }
        if (tp.needs_grad(b)) {
            Tensor& gb = tp.grad(b);
            for (int r = 0; r < m; ++r)
                for (int j = 0; j < n; ++j)
                    gb.data[static_cast<std::size_t>(j)] += g.data[static_cast<std::size_t>(r) * n + j] * va2.data[static_cast<std::size_t>(r) * n + j];
        }
    });
}

// x·Wᵀ + b with W stored [out,in]; the standard fully-connected layer.
inline Var linear(Var x, Var w, Var b) { return add_rowvec(matmul_nt(x, w), b); }

// ---- reductions / normalizations ----

inline Var softmax_rows(Var a) {
    Tape& t = *a.tape;
    const Tensor& va = t.value(a);
    if (va.rank() != 2) throw std::invalid_argument("softmax_rows: need 2-d input");
    const int m = va.dim(0), n = va.dim(1);
    Tensor out(va.shape);
    for (int r = 0; r < m; ++r) {
        const double* row = va.data.data() + static_cast<std::ptrdiff_t>(r) * n;
        double* orow = out.data.data() + static_cast<std::ptrdiff_t>(r) * n;
        double mx = row[0];
        for (int j = 1; j < n; ++j) mx = std::max(mx, row[j]);
        double sum = 0;
        for (int j = 0; j < n; ++j) {
            orow[j] = std::exp(row[j] - mx);
            sum += orow[j];
        }
        for (int j = 0; j < n; ++j) orow[j] /= sum;
    }
    return t.make(std::move(out), {a}, [a, m, n](Tape& tp, int id) {
        Var v = detail::self(tp, id);
        const Tensor& g = tp.grad(v);
        const Tensor& y = tp.value(v);
        Tensor& ga = tp.grad(a);
        for (int r = 0; r < m; ++r) {
            const double* yr = y.data.data() + static_cast<std::ptrdiff_t>(r) * n;
            const double* gr = g.data.data() + static_cast<std::ptrdiff_t>(r) * n;
            double dotv = 0;
            for (int j = 0; j < n; ++j) dotv += yr[j] * gr[j];
            double* gar = ga.data.data() + static_cast<std::ptrdiff_t>(r) * n;
            for (int j = 0; j < n; ++j) gar[j] += yr[j] * (gr[j] - dotv);
        }
    });
}

// Per-row layer normalization with learnable gamma/beta (length n).
inline Var layernorm_rows(Var a, Var gamma, Var beta, double eps = 1e-5) {
    Tape& t = *a.tape;
    const Tensor& va = t.value(a);
    if (va.rank() != 2) throw std::invalid_argument("layernorm_rows: need 2-d input");
    const int m = va.dim(0), n = va.dim(1);
    const Tensor& vg = t.value(gamma);
    const Tensor& vb = t.value(beta);
    if (vg.size() != n || vb.size() != n) throw std::invalid_argument("layernorm_rows: param size");
    Tensor out(va.shape);
    // cached statistics for backward
    auto xhat = std::make_shared<std::vector<double>>(static_cast<std::size_t>(m) * n);
    auto inv_std = std::make_shared<std::vector<double>>(static_cast<std::size_t>(m));
    for (int r = 0; r < m; ++r) {
        const double* row = va.data.data() + static_cast<std::ptrdiff_t>(r) * n;
        double mean = 0;
        for (int j = 0; j < n; ++j) mean += row[j];
        mean /= n;
        double var = 0;
        for (int j = 0; j < n; ++j) var += (row[j] - mean) * (row[j] - mean);
        var /= n;
        double is = 1.0 / std::sqrt(var + eps);
        (*inv_std)[static_cast<std::size_t>(r)] = is;
        for (int j = 0; j < n; ++j) {
            double xh = (row[j] - mean) * is;
            (*xhat)[static_cast<std::size_t>(r) * n + j] = xh;
            out.data[static_cast<std::size_t>(r) * n + j] = vg.data[static_cast<std::size_t>(j)] * xh + vb.data[static_cast<std::size_t>(j)];
        }
    }
    return t.make(std::move(out), {a, gamma, beta},
                  [a, gamma, beta, m, n, xhat, inv_std](Tape& tp, int id) {
        const Tensor& g = tp.grad(detail::self(tp, id));
        const Tensor& vg = tp.value(gamma);
        for (int r = 0; r < m; ++r) {
            const double* gr = g.data.data() + static_cast<std::ptrdiff_t>(r) * n;
            const double* xh = xhat->data() + static_cast<std::ptrdiff_t>(r) * n;
            if (tp.needs_grad(gamma)) {
                Tensor& gg = tp.grad(gamma);
                for (int j = 0; j < n; ++j) gg.data[static_cast<std::size_t>(j)] += gr[j] * xh[j];
            }
            if (tp.needs_grad(beta)) {
                Tensor& gb = tp.grad(beta);
                for (int j = 0; j < n; ++j) gb.data[static_cast<std::size_t>(j)] += gr[j];
            }
            if (tp.needs_grad(a)) {
                double sum_gy = 0, sum_gyx = 0;
                for (int j = 0; j < n; ++j) {
                    double gy = gr[j] * vg.data[static_cast<std::size_t>(j)];
                    sum_gy += gy;
                    sum_gyx += gy * xh[j];
                }
                Tensor& ga = tp.grad(a);
                double* gar = ga.data.data() + static_cast<std::ptrdiff_t>(r) * n;
                double is = (*inv_std)[static_cast<std::size_t>(r)];
                for (int j = 0; j < n; ++j) {
                    double gy = gr[j] * vg.data[static_cast<std::size_t>(j)];
                    gar[j] += is * (gy - sum_gy / n - xh[j] * sum_gyx / n);
                }
            }
        }
    });
}

// Mean over rows: {m,n} -> {n}.
inline Var reduce_mean_rows(Var a) {
    Tape& t = *a.tape;
    const Tensor& va = t.value(a);
    if (va.rank() != 2) throw std::invalid_argument("reduce_mean_rows: need 2-d input");
    const int m = va.dim(0), n = va.dim(1);
    Tensor out({n});
    for (int r = 0; r < m; ++r)
        for (int j = 0; j < n; ++j) out.data[static_cast<std::size_t>(j)] += va.data[static_cast<std::size_t>(r) * n + j];
    for (int j = 0; j < n; ++j) out.data[static_cast<std::size_t>(j)] /= m;
    return t.make(std::move(out), {a}, [a, m, n](Tape& tp, int id) {
        const Tensor& g = tp.grad(detail::self(tp, id));
        Tensor& ga = tp.grad(a);
        for (int r = 0; r < m; ++r)
            for (int j = 0; j < n; ++j) ga.data[static_cast<std::size_t>(r) * n + j] += g.data[static_cast<std::size_t>(j)] / m;
    });
}

// Max over consecutive row blocks of size k: {b·k, c} -> {b, c}.
// Ties route the gradient to the lowest row inside the block.
inline Var rowblock_max(Var a, int k) {
    Tape& t = *a.tape;
    const Tensor& va = t.value(a);
    if (va.rank() != 2 || k < 1 || va.dim(0) % k != 0)
        throw std::invalid_argument("rowblock_max: rows not divisible by block");
    const int blocks = va.dim(0) / k, c = va.dim(1);
    Tensor out({blocks, c});
    auto arg = std::make_shared<std::vector<int>>(static_cast<std::size_t>(blocks) * c);
    for (int b = 0; b < blocks; ++b)
        for (int j = 0; j < c; ++j) {
            int best = b * k;
            double bv = va.data[static_cast<std::size_t>(b) * k * c + static_cast<std::size_t>(j)];
            for (int r = 1; r < k; ++r) {
                double v = va.data[(static_cast<std::size_t>(b) * k + r) * c + static_cast<std::size_t>(j)];
                if (v > bv) {
                    bv = v;
                    best = b * k + r;
                }
            }
            out.data[static_cast<std::size_t>(b) * c + static_cast<std::size_t>(j)] = bv;
            (*arg)[static_cast<std::size_t>(b) * c + static_cast<std::size_t>(j)] = best;
        }
    return t.make(std::move(out), {a}, [a, blocks, c, arg](Tape& tp, int id) {
        const Tensor& g = tp.grad(detail::self(tp, id));
        Tensor& ga = tp.grad(a);
        for (int b = 0; b < blocks; ++b)
            for (int j = 0; j < c; ++j)
                ga.data[static_cast<std::size_t>((*arg)[static_cast<std::size_t>(b) * c + static_cast<std::size_t>(j)]) * c + static_cast<std::size_t>(j)] +=
                    g.data[static_cast<std::size_t>(b) * c + static_cast<std::size_t>(j)];
    });
}

// Horizontal strip pooling of a {C,H,W} map: out[h,c] = max_w + mean_w.
inline Var strip_pool(Var a) {
    Tape& t = *a.tape;
    const Tensor& va = t.value(a);
    if (va.rank() != 3) throw std::invalid_argument("strip_pool: need 3-d input");
    const int C = va.dim(0), H = va.dim(1), W = va.dim(2);
    Tensor out({H, C});
    auto arg = std::make_shared<std::vector<int>>(static_cast<std::size_t>(H) * C);
    for (int c = 0; c < C; ++c)
        for (int h = 0; h < H; ++h) {
            const double* row = va.data.data() + (static_cast<std::ptrdiff_t>(c) * H + h) * W;
            double mx = row[0], mean = row[0];
            int am = 0;
            for (int w = 1; w < W; ++w) {
                if (row[w] > mx) {
                    mx = row[w];
                    am = w;
                }
                mean += row[w];
            }
            mean /= W;
            out.data[static_cast<std::size_t>(h) * C + c] = mx + mean;
            (*arg)[static_cast<std::size_t>(h) * C + c] = am;
        }
    return t.make(std::move(out), {a}, [a, C, H, W, arg](Tape& tp, int id) {
        const Tensor& g = tp.grad(detail::self(tp, id));
        Tensor& ga = tp.grad(a);
        for (int c = 0; c < C; ++c)
            for (int h = 0; h < H; ++h) {
                double gv = g.data[static_cast<std::size_t>(h) * C + c];
                double* row = ga.data.data() + (static_cast<std::ptrdiff_t>(c) * H + h) * W;
                row[(*arg)[static_cast<std::size_t>(h) * C + c]] += gv;
                for (int w = 0; w < W; ++w) row[w] += gv / W;
            }
    });
}

// ---- convolution ----

namespace detail {

inline void im2col(const Tensor& x, int kh, int kw, int stride, int pad, int ho, int wo,
                   std::vector<double>& cols) {
    const int cin = x.dim(0), h = x.dim(1), w = x.dim(2);
    cols.assign(static_cast<std::size_t>(cin) * kh * kw * ho * wo, 0.0);
    const int cols_w = ho * wo;
    for (int c = 0; c < cin; ++c)
        for (int ky = 0; ky < kh; ++ky)
            for (int kx = 0; kx < kw; ++kx) {
                double* dst = cols.data() + (static_cast<std::ptrdiff_t>(c) * kh * kw + ky * kw + kx) * cols_w;
                for (int oy = 0; oy < ho; ++oy) {
                    int iy = oy * stride - pad + ky;
                    if (iy < 0 || iy >= h) continue;
                    const double* src = x.data.data() + (static_cast<std::ptrdiff_t>(c) * h + iy) * w;
                    for (int ox = 0; ox < wo; ++ox) {
                        int ix = ox * stride - pad + kx;
                        if (ix >= 0 && ix < w) dst[oy * wo + ox] = src[ix];
                    }
                }
            }
}

inline void col2im_accum(const std::vector<double>& cols, int cin, int h, int w, int kh, int kw,
                         int stride, int pad, int ho, int wo, Tensor& gx) {
    const int cols_w = ho * wo;
    for (int c = 0; c < cin; ++c)
        for (int ky = 0; ky < kh; ++ky)
            for (int kx = 0; kx < kw; ++kx) {
                const double* src = cols.data() + (static_cast<std::ptrdiff_t>(c) * kh * kw + ky * kw + kx) * cols_w;
                for (int oy = 0; oy < ho; ++oy) {
                    int iy = oy * stride - pad + ky;
                    if (iy < 0 || iy >= h) continue;
                    double* dst = gx.data.data() + (static_cast<std::ptrdiff_t>(c) * h + iy) * w;
                    for (int ox = 0; ox < wo; ++ox) {
                        int ix = ox * stride - pad + kx;
                        if (ix >= 0 && ix < w) dst[ix] += src[oy * wo + ox];
                    }
                }
            }
}

}  // namespace detail

// 2-D convolution of a single {Cin,H,W} map with weights {Cout,Cin,kh,kw}
// and bias {Cout}. Implemented as im2col + GEMM; the backward pass rebuilds
// the column matrix instead of retaining it, trading FLOPs for memory.
inline Var conv2d(Var x, Var w, Var b, int stride, int pad) {
    Tape& t = *x.tape;
    const Tensor& vx = t.value(x);
    const Tensor& vw = t.value(w);
    const Tensor& vb = t.value(b);
    if (vx.rank() != 3 || vw.rank() != 4) throw std::invalid_argument("conv2d: ranks");
    const int cin = vx.dim(0), h = vx.dim(1), wdt = vx.dim(2);
    const int cout = vw.dim(0), kh = vw.dim(2), kw = vw.dim(3);
    if (vw.dim(1) != cin) throw std::invalid_argument("conv2d: channel mismatch");
    if (vb.size() != cout) throw std::invalid_argument("conv2d: bias size");
    const int ho = (h + 2 * pad - kh) / stride + 1;
    const int wo = (wdt + 2 * pad - kw) / stride + 1;
    if (ho < 1 || wo < 1) throw std::invalid_argument("conv2d: output would be empty");

    std::vector<double> cols;
    detail::im2col(vx, kh, kw, stride, pad, ho, wo, cols);
    Tensor out({cout, ho, wo});
    const int krows = cin * kh * kw, cols_w = ho * wo;
    EMap om(out.data.data(), cout, cols_w);
    om.noalias() = ECMap(vw.data.data(), cout, krows) * ECMap(cols.data(), krows, cols_w);
    for (int c = 0; c < cout; ++c) om.row(c).array() += vb.data[static_cast<std::size_t>(c)];

    return t.make(std::move(out), {x, w, b},
                  [x, w, b, stride, pad, cin, h, wdt, cout, kh, kw, ho, wo](Tape& tp, int id) {
        const Tensor& g = tp.grad(detail::self(tp, id));
        const int krows = cin * kh * kw, cols_w = ho * wo;
        ECMap gm(g.data.data(), cout, cols_w);
        if (tp.needs_grad(b)) {
            Tensor& gb = tp.grad(b);
            for (int c = 0; c < cout; ++c) gb.data[static_cast<std::size_t>(c)] += gm.row(c).sum();
        }
        if (tp.needs_grad(w)) {
            std::vector<double> cols;
            detail::im2col(tp.value(x), kh, kw, stride, pad, ho, wo, cols);
            Tensor& gw = tp.grad(w);
            EMap(gw.data.data(), cout, krows).noalias() +=
                gm * ECMap(cols.data(), krows, cols_w).transpose();
        }
        if (tp.needs_grad(x)) {
            std::vector<double> gcols(static_cast<std::size_t>(krows) * cols_w);
            EMap(gcols.data(), krows, cols_w).noalias() =
                ECMap(tp.value(w).data.data(), cout, krows).transpose() * gm;
            detail::col2im_accum(gcols, cin, h, wdt, kh, kw, stride, pad, ho, wo, tp.grad(x));
        }
    });
}

// ---- losses ----

// Softmax cross-entropy over per-strip logits, averaged over samples and
// strips: inputs are B tensors of shape {p, n_classes}.
inline Var ce_loss(const std::vector<Var>& logits, const std::vector<int>& labels) {
    if (logits.empty() || logits.size() != labels.size())
        throw std::invalid_argument("ce_loss: batch mismatch");
    Tape& t = *logits[0].tape;
    const int B = static_cast<int>(logits.size());
    const int p = t.value(logits[0]).dim(0);
    const int K = t.value(logits[0]).dim(1);
    double total = 0;
    for (int bi = 0; bi < B; ++bi) {
        const Tensor& lg = t.value(logits[static_cast<std::size_t>(bi)]);
        if (lg.rank() != 2 || lg.dim(0) != p || lg.dim(1) != K)
            throw std::invalid_argument("ce_loss: logit shape mismatch");
        int y = labels[static_cast<std::size_t>(bi)];
        if (y < 0 || y >= K) throw std::invalid_argument("ce_loss: label out of range");
        for (int s = 0; s < p; ++s) {
            const double* row = lg.data.data() + static_cast<std::ptrdiff_t>(s) * K;
            double mx = row[0];
            for (int j = 1; j < K; ++j) mx = std::max(mx, row[j]);
            double sum = 0;
            for (int j = 0; j < K; ++j) sum += std::exp(row[j] - mx);
            total += std::log(sum) + mx - row[y];
        }
    }
    Tensor out({1});
    out.data[0] = total / (static_cast<double>(B) * p);
    return t.make(std::move(out), logits, [logits, labels, B, p, K](Tape& tp, int id) {
        const double gl = tp.grad(detail::self(tp, id)).data[0];
        const double inv = gl / (static_cast<double>(B) * p);
        for (int bi = 0; bi < B; ++bi) {
            Var lv = logits[static_cast<std::size_t>(bi)];
            if (!tp.needs_grad(lv)) continue;
            const Tensor& lg = tp.value(lv);
            Tensor& gt = tp.grad(lv);
            int y = labels[static_cast<std::size_t>(bi)];
            for (int s = 0; s < p; ++s) {
                const double* row = lg.data.data() + static_cast<std::ptrdiff_t>(s) * K;
                double* grow = gt.data.data() + static_cast<std::ptrdiff_t>(s) * K;
                double mx = row[0];
                for (int j = 1; j < K; ++j) mx = std::max(mx, row[j]);
                double sum = 0;
                for (int j = 0; j < K; ++j) sum += std::exp(row[j] - mx);
                for (int j = 0; j < K; ++j) {
                    double soft = std::exp(row[j] - mx) / sum;
                    grow[j] += inv * (soft - (j == y ? 1.0 : 0.0));
                }
            }
        }
    });
}

// Batch-all triplet loss with positive-term averaging, per strip, mean over
// strips. Inputs are B embeddings of shape {p, E}. Counters (optional):
// *out_no_valid_triplets set when the batch admits no (a,p,n) at all.
inline Var triplet_loss_ba(const std::vector<Var>& embs, const std::vector<int>& labels,
                           double margin, int* out_no_valid_triplets = nullptr) {
    if (embs.empty() || embs.size() != labels.size())
        throw std::invalid_argument("triplet_loss_ba: batch mismatch");
    Tape& t = *embs[0].tape;
    const int B = static_cast<int>(embs.size());
    const int p = t.value(embs[0]).dim(0);
    const int E = t.value(embs[0]).dim(1);
    for (const Var& e : embs) {
        const Tensor& v = t.value(e);
        if (v.rank() != 2 || v.dim(0) != p || v.dim(1) != E)
            throw std::invalid_argument("triplet_loss_ba: embedding shape mismatch");
    }

    auto strip_dist = [&](int i, int j, int s) {
        const double* a = t.value(embs[static_cast<std::size_t>(i)]).data.data() + static_cast<std::ptrdiff_t>(s) * E;
        const double* b = t.value(embs[static_cast<std::size_t>(j)]).data.data() + static_cast<std::ptrdiff_t>(s) * E;
        double d2 = 0;
        for (int k = 0; k < E; ++k) d2 += (a[k] - b[k]) * (a[k] - b[k]);
        return std::sqrt(d2);
    };

    bool any_valid = false;
    double loss = 0;
    // kept for the backward pass: per strip the list of active triplets
    auto active = std::make_shared<std::vector<std::vector<std::array<int, 3>>>>(
        static_cast<std::size_t>(p));
    auto counts = std::make_shared<std::vector<int>>(static_cast<std::size_t>(p), 0);
    for (int s = 0; s < p; ++s) {
        double sum = 0;
        int cnt = 0;
        for (int a = 0; a < B; ++a)
            for (int pos = 0; pos < B; ++pos) {
                if (pos == a || labels[static_cast<std::size_t>(pos)] != labels[static_cast<std::size_t>(a)]) continue;
                for (int neg = 0; neg < B; ++neg) {
                    if (labels[static_cast<std::size_t>(neg)] == labels[static_cast<std::size_t>(a)]) continue;
                    any_valid = true;
                    double term = margin + (strip_dist(a, pos, s) - strip_dist(a, neg, s));
                    if (term > 0) {
                        sum += term;
                        ++cnt;
                        (*active)[static_cast<std::size_t>(s)].push_back({a, pos, neg});
                    }
                }
            }
        (*counts)[static_cast<std::size_t>(s)] = cnt;
        if (cnt > 0) loss += sum / cnt;
    }
    if (!any_valid && out_no_valid_triplets) ++*out_no_valid_triplets;

    Tensor out({1});
    out.data[0] = loss / p;
    return t.make(std::move(out), embs, [embs, p, E, active, counts](Tape& tp, int id) {
        const double gl = tp.grad(detail::self(tp, id)).data[0];
        auto emb_row = [&](int i, int s) {
            return tp.value(embs[static_cast<std::size_t>(i)]).data.data() + static_cast<std::ptrdiff_t>(s) * E;
        };
        auto grad_row = [&](int i, int s) {
            return tp.grad(embs[static_cast<std::size_t>(i)]).data.data() + static_cast<std::ptrdiff_t>(s) * E;
        };
        // d/dx ||x-y|| = (x-y)/||x-y||, guarded at 0
        auto add_dist_grad = [&](int i, int j, int s, double coef) {
            const double* a = emb_row(i, s);
            const double* b = emb_row(j, s);
            double d2 = 0;
            for (int k = 0; k < E; ++k) d2 += (a[k] - b[k]) * (a[k] - b[k]);
            double d = std::sqrt(d2);
            if (d == 0) return;
            double* ga = tp.needs_grad(embs[static_cast<std::size_t>(i)]) ? grad_row(i, s) : nullptr;
            double* gb = tp.needs_grad(embs[static_cast<std::size_t>(j)]) ? grad_row(j, s) : nullptr;
            for (int k = 0; k < E; ++k) {
                double u = coef * (a[k] - b[k]) / d;
                if (ga) ga[k] += u;
                if (gb) gb[k] -= u;
            }
        };
        for (int s = 0; s < p; ++s) {
            int cnt = (*counts)[static_cast<std::size_t>(s)];
            if (cnt == 0) continue;
            double coef = gl / (static_cast<double>(p) * cnt);
            for (const auto& tri : (*active)[static_cast<std::size_t>(s)]) {
                add_dist_grad(tri[0], tri[1], s, coef);    // + d(a,p)
                add_dist_grad(tri[0], tri[2], s, -coef);   // - d(a,n)
            }
        }
    });
}

}  // namespace gaitlab::ad
