#pragma once

#include <cmath>
#include <cstdint>
#include <deque>
#include <functional>
#include <limits>
#include <string>
#include <utility>
#include <vector>

#include "bicat/error.hpp"
#include "bicat/rng.hpp"
#include "bicat/tensor.hpp"

namespace bicat {

/// A learnable array: value plus a same-shaped gradient accumulator and a
/// stable identifier used by the optimizer and the checkpoint format.
struct Parameter {
    std::string name;
    Tensor value;
    Tensor grad;

    Parameter(std::string n, Tensor v)
        : name(std::move(n)), value(std::move(v)), grad(value.shape()) {}

    void zero_grad() { grad.fill(0.0); }
};

class Graph;

/// Handle to a node on a Graph tape.  Cheap to copy; valid as long as the
/// graph is alive and has not been cleared.
class Val {
public:
    Val() = default;
    Val(Graph* g, std::size_t id) : g_(g), id_(id) {}

    const Tensor& value() const;
    Graph* graph() const { return g_; }
    std::size_t id() const { return id_; }
    bool valid() const { return g_ != nullptr; }

private:
    Graph* g_ = nullptr;
    std::size_t id_ = std::numeric_limits<std::size_t>::max();
};

/// Reverse-mode tape.  Nodes are appended in execution order, so walking the
/// tape backwards is already a topological order of the recorded expression.
/// Leaf nodes bind Parameters; backward() accumulates into Parameter::grad.
class Graph {
public:
    struct Node {
        Tensor value;
        Tensor grad;  // allocated by backward()
        bool needs_grad = false;
        Parameter* param = nullptr;
        std::function<void(Graph&)> backprop;  // captures the ids it touches
    };

    Val leaf(Parameter& p) {
        Node n;
        n.value = p.value;
        n.needs_grad = true;
        n.param = &p;
        nodes_.push_back(std::move(n));
        return Val(this, nodes_.size() - 1);
    }

    Val constant(Tensor t) {
        Node n;
        n.value = std::move(t);
        nodes_.push_back(std::move(n));
        return Val(this, nodes_.size() - 1);
    }

    Val emplace(Tensor value, bool needs_grad) {
        Node n;
        n.value = std::move(value);
        n.needs_grad = needs_grad;
        nodes_.push_back(std::move(n));
        return Val(this, nodes_.size() - 1);
    }

    Node& node(std::size_t id) { return nodes_[id]; }
    const Node& node(std::size_t id) const { return nodes_[id]; }
    const Tensor& value_of(std::size_t id) const { return nodes_[id].value; }
    Tensor& grad_of(std::size_t id) { return nodes_[id].grad; }
    std::size_t size() const { return nodes_.size(); }

    /// Reverse pass from a scalar root.  Grad buffers up to the root are
    /// zero-initialized, the root is seeded with 1, and each node's rule
    /// scatters into its parents.  Parameter leaves then accumulate into
    /// their bound Parameter.
    void backward(Val root) {
        if (root.graph() != this)
            throw ShapeError("backward: val belongs to another graph");
        if (value_of(root.id()).numel() != 1)
            throw ShapeError("backward: root must be scalar, got shape " +
                             value_of(root.id()).shape_string());
        const std::size_t last = root.id();
        for (std::size_t i = 0; i <= last; ++i) {
            Node& n = nodes_[i];
            if (n.needs_grad) n.grad = Tensor::zeros(n.value.shape());
        }
        nodes_[last].grad.at(0) = 1.0;
        for (std::size_t i = last + 1; i-- > 0;) {
            Node& n = nodes_[i];
            if (n.needs_grad && n.backprop) n.backprop(*this);
        }
        for (std::size_t i = 0; i <= last; ++i) {
            Node& n = nodes_[i];
            if (n.param != nullptr && n.grad.numel() == n.param->grad.numel()) {
                for (std::size_t k = 0; k < n.grad.numel(); ++k)
                    n.param->grad.at(k) += n.grad.at(k);
            }
        }
    }

    void clear() { nodes_.clear(); }

private:
    std::deque<Node> nodes_;
};

inline const Tensor& Val::value() const { return g_->value_of(id_); }

namespace detail {

inline Graph& same_graph(Val a, Val b, const char* op) {
    if (a.graph() != b.graph())
        throw ShapeError(std::string(op) + ": operands recorded on different graphs");
    return *a.graph();
}

inline bool needs(Graph& g, Val v) { return g.node(v.id()).needs_grad; }

inline void axpy(Tensor& dst, const Tensor& src, double s = 1.0) {
    for (std::size_t k = 0; k < dst.numel(); ++k) dst.at(k) += s * src.at(k);
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Recorded operations.  Forward values come from the plain tensor ops; each
// op installs its reverse rule on the tape.
// ---------------------------------------------------------------------------

inline Val matmul(Val a, Val b) {
    Graph& g = detail::same_graph(a, b, "matmul");
    Val out = g.emplace(matmul(a.value(), b.value()),
                        detail::needs(g, a) || detail::needs(g, b));
    if (!g.node(out.id()).needs_grad) return out;
    const std::size_t ia = a.id(), ib = b.id(), io = out.id();
    g.node(io).backprop = [ia, ib, io](Graph& gr) {
        const Tensor& dc = gr.grad_of(io);
        if (gr.node(ia).needs_grad)
            detail::axpy(gr.grad_of(ia), matmul_nt(dc, gr.value_of(ib)));
        if (gr.node(ib).needs_grad)
            detail::axpy(gr.grad_of(ib), matmul_tn(gr.value_of(ia), dc));
    };
    return out;
}

/// a * b^T.
inline Val matmul_nt(Val a, Val b) {
    Graph& g = detail::same_graph(a, b, "matmul_nt");
    Val out = g.emplace(matmul_nt(a.value(), b.value()),
                        detail::needs(g, a) || detail::needs(g, b));
    if (!g.node(out.id()).needs_grad) return out;
    const std::size_t ia = a.id(), ib = b.id(), io = out.id();
    g.node(io).backprop = [ia, ib, io](Graph& gr) {
        const Tensor& dc = gr.grad_of(io);  // [m x p], c = a b^T
        if (gr.node(ia).needs_grad)
            detail::axpy(gr.grad_of(ia), matmul(dc, gr.value_of(ib)));
        if (gr.node(ib).needs_grad)
            detail::axpy(gr.grad_of(ib), matmul_tn(dc, gr.value_of(ia)));
    };
    return out;
}

inline Val add(Val a, Val b) {
    Graph& g = detail::same_graph(a, b, "add");
    if (!a.value().same_shape(b.value()))
        throw ShapeError("add: shape mismatch " + a.value().shape_string() + " vs " +
                         b.value().shape_string());
    Tensor t = a.value();
    detail::axpy(t, b.value());
    Val out = g.emplace(std::move(t), detail::needs(g, a) || detail::needs(g, b));
    if (!g.node(out.id()).needs_grad) return out;
    const std::size_t ia = a.id(), ib = b.id(), io = out.id();
    g.node(io).backprop = [ia, ib, io](Graph& gr) {
        const Tensor& dc = gr.grad_of(io);
        if (gr.node(ia).needs_grad) detail::axpy(gr.grad_of(ia), dc);
        if (gr.node(ib).needs_grad) detail::axpy(gr.grad_of(ib), dc);
    };
    return out;
}

inline Val sub(Val a, Val b) {
    Graph& g = detail::same_graph(a, b, "sub");
    if (!a.value().same_shape(b.value()))
        throw ShapeError("sub: shape mismatch " + a.value().shape_string() + " vs " +
                         b.value().shape_string());
    Tensor t = a.value();
    detail::axpy(t, b.value(), -1.0);
    Val out = g.emplace(std::move(t), detail::needs(g, a) || detail::needs(g, b));
    if (!g.node(out.id()).needs_grad) return out;
    const std::size_t ia = a.id(), ib = b.id(), io = out.id();
    g.node(io).backprop = [ia, ib, io](Graph& gr) {
        const Tensor& dc = gr.grad_of(io);
        if (gr.node(ia).needs_grad) detail::axpy(gr.grad_of(ia), dc);
        if (gr.node(ib).needs_grad) detail::axpy(gr.grad_of(ib), dc, -1.0);
    };
    return out;
}

inline Val mul(Val a, Val b) {
    Graph& g = detail::same_graph(a, b, "mul");
    if (!a.value().same_shape(b.value()))
        throw ShapeError("mul: shape mismatch " + a.value().shape_string() + " vs " +
                         b.value().shape_string());
    Tensor t = a.value();
    for (std::size_t k = 0; k < t.numel(); ++k) t.at(k) *= b.value().at(k);
    Val out = g.emplace(std::move(t), detail::needs(g, a) || detail::needs(g, b));
    if (!g.node(out.id()).needs_grad) return out;
    const std::size_t ia = a.id(), ib = b.id(), io = out.id();
    g.node(io).backprop = [ia, ib, io](Graph& gr) {
        const Tensor& dc = gr.grad_of(io);
        if (gr.node(ia).needs_grad) {
            Tensor& ga = gr.grad_of(ia);
            const Tensor& bv = gr.value_of(ib);
            for (std::size_t k = 0; k < ga.numel(); ++k) ga.at(k) += dc.at(k) * bv.at(k);
        }
        if (gr.node(ib).needs_grad) {
            Tensor& gb = gr.grad_of(ib);
            const Tensor& av = gr.value_of(ia);
            for (std::size_t k = 0; k < gb.numel(); ++k) gb.at(k) += dc.at(k) * av.at(k);
        }
    };
    return out;
}

inline Val scale(Val a, double s) {
    Graph& g = *a.graph();
    Tensor t = a.value();
    for (std::size_t k = 0; k < t.numel(); ++k) t.at(k) *= s;
    Val out = g.emplace(std::move(t), detail::needs(g, a));
    if (!g.node(out.id()).needs_grad) return out;
    const std::size_t ia = a.id(), io = out.id();
    g.node(io).backprop = [ia, io, s](Graph& gr) {
        detail::axpy(gr.grad_of(ia), gr.grad_of(io), s);
    };
    return out;
}

/// Elementwise product with a fixed tensor (dropout masks, loss masks).
inline Val mul_const(Val a, Tensor m) {
    Graph& g = *a.graph();
    if (!a.value().same_shape(m))
        throw ShapeError("mul_const: shape mismatch " + a.value().shape_string() + " vs " +
                         m.shape_string());
    Tensor t = a.value();
    for (std::size_t k = 0; k < t.numel(); ++k) t.at(k) *= m.at(k);
    Val out = g.emplace(std::move(t), detail::needs(g, a));
    if (!g.node(out.id()).needs_grad) return out;
    const std::size_t ia = a.id(), io = out.id();
    g.node(io).backprop = [ia, io, m = std::move(m)](Graph& gr) {
        Tensor& ga = gr.grad_of(ia);
        const Tensor& dc = gr.grad_of(io);
        for (std::size_t k = 0; k < ga.numel(); ++k) ga.at(k) += dc.at(k) * m.at(k);
    };
    return out;
}

/// [m x d] matrix plus a length-d bias broadcast over rows.
inline Val add_bias(Val m, Val bias) {
    Graph& g = detail::same_graph(m, bias, "add_bias");
    const std::size_t rows = m.value().rows(), d = m.value().cols();
    if (bias.value().numel() != d)
        throw ShapeError("add_bias: bias length " + std::to_string(bias.value().numel()) +
                         " vs row width " + std::to_string(d));
    Tensor t = m.value();
    for (std::size_t i = 0; i < rows; ++i)
        for (std::size_t j = 0; j < d; ++j) t.at(i, j) += bias.value().at(j);
    Val out = g.emplace(std::move(t), detail::needs(g, m) || detail::needs(g, bias));
    if (!g.node(out.id()).needs_grad) return out;
    const std::size_t im = m.id(), ib = bias.id(), io = out.id();
    g.node(io).backprop = [im, ib, io, rows, d](Graph& gr) {
        const Tensor& dc = gr.grad_of(io);
        if (gr.node(im).needs_grad) detail::axpy(gr.grad_of(im), dc);
        if (gr.node(ib).needs_grad) {
            Tensor& gb = gr.grad_of(ib);
            for (std::size_t i = 0; i < rows; ++i)
                for (std::size_t j = 0; j < d; ++j) gb.at(j) += dc.at(i, j);
        }
    };
    return out;
}

inline Val relu(Val a) {
    Graph& g = *a.graph();
    Tensor t = a.value();
    for (std::size_t k = 0; k < t.numel(); ++k) t.at(k) = std::max(t.at(k), 0.0);
    Val out = g.emplace(std::move(t), detail::needs(g, a));
    if (!g.node(out.id()).needs_grad) return out;
    const std::size_t ia = a.id(), io = out.id();
    g.node(io).backprop = [ia, io](Graph& gr) {
        Tensor& ga = gr.grad_of(ia);
        const Tensor& dc = gr.grad_of(io);
        const Tensor& x = gr.value_of(ia);
        for (std::size_t k = 0; k < ga.numel(); ++k)
            if (x.at(k) > 0.0) ga.at(k) += dc.at(k);
    };
    return out;
}

inline Val exp_elem(Val a) {
    Graph& g = *a.graph();
    Tensor t = a.value();
    for (std::size_t k = 0; k < t.numel(); ++k) t.at(k) = std::exp(t.at(k));
    Val out = g.emplace(std::move(t), detail::needs(g, a));
    if (!g.node(out.id()).needs_grad) return out;
    const std::size_t ia = a.id(), io = out.id();
    g.node(io).backprop = [ia, io](Graph& gr) {
        Tensor& ga = gr.grad_of(ia);
        const Tensor& dc = gr.grad_of(io);
        const Tensor& y = gr.value_of(io);
        for (std::size_t k = 0; k < ga.numel(); ++k) ga.at(k) += dc.at(k) * y.at(k);
    };
    return out;
}

/// log(sigmoid(x)), elementwise, with sigma clamped away from {0,1} by 1e-12.
/// Gradient is zero wherever the clamp is active.
inline Val log_sigmoid(Val a) {
    Graph& g = *a.graph();
    static const double kLo = std::log(1e-12);
    static const double kHi = std::log1p(-1e-12);
    Tensor t = a.value();
    for (std::size_t k = 0; k < t.numel(); ++k) t.at(k) = log_sigmoid_clamped(t.at(k));
    Val out = g.emplace(std::move(t), detail::needs(g, a));
    if (!g.node(out.id()).needs_grad) return out;
    const std::size_t ia = a.id(), io = out.id();
    g.node(io).backprop = [ia, io](Graph& gr) {
        Tensor& ga = gr.grad_of(ia);
        const Tensor& dc = gr.grad_of(io);
        const Tensor& x = gr.value_of(ia);
        const Tensor& y = gr.value_of(io);
        for (std::size_t k = 0; k < ga.numel(); ++k) {
            if (y.at(k) <= kLo || y.at(k) >= kHi) continue;  // clamped
            ga.at(k) += dc.at(k) * sigmoid(-x.at(k));
        }
    };
    return out;
}

/// Row-wise softmax of (x + mask) where mask is a fixed additive tensor of 0
/// and -infinity entries.  Fully masked rows yield all-zero probability rows
/// and propagate no gradient.
inline Val masked_softmax_rows(Val x, Tensor mask) {
    Graph& g = *x.graph();
    if (!x.value().same_shape(mask))
        throw ShapeError("masked_softmax_rows: mask shape " + mask.shape_string() +
                         " vs input " + x.value().shape_string());
    Tensor shifted = x.value();
    for (std::size_t k = 0; k < shifted.numel(); ++k) shifted.at(k) += mask.at(k);
    Val out = g.emplace(softmax_rows(shifted), detail::needs(g, x));
    if (!g.node(out.id()).needs_grad) return out;
    const std::size_t ix = x.id(), io = out.id();
    g.node(io).backprop = [ix, io](Graph& gr) {
        Tensor& gx = gr.grad_of(ix);
        const Tensor& dp = gr.grad_of(io);
        const Tensor& p = gr.value_of(io);
        const std::size_t m = p.rows(), n = p.cols();
        for (std::size_t i = 0; i < m; ++i) {
            double dot = 0.0;
            for (std::size_t j = 0; j < n; ++j) dot += dp.at(i, j) * p.at(i, j);
            for (std::size_t j = 0; j < n; ++j)
                gx.at(i, j) += p.at(i, j) * (dp.at(i, j) - dot);
        }
    };
    return out;
}

inline Val softmax_rows(Val x) { return masked_softmax_rows(x, Tensor::zeros(x.value().shape())); }

inline Val log_softmax_rows(Val x) {
    Graph& g = *x.graph();
    Val out = g.emplace(log_softmax_rows(x.value()), detail::needs(g, x));
    if (!g.node(out.id()).needs_grad) return out;
    const std::size_t ix = x.id(), io = out.id();
    g.node(io).backprop = [ix, io](Graph& gr) {
        Tensor& gx = gr.grad_of(ix);
        const Tensor& dl = gr.grad_of(io);
        const Tensor& l = gr.value_of(io);
        const std::size_t m = l.rows(), n = l.cols();
        for (std::size_t i = 0; i < m; ++i) {
            double rowsum = 0.0;
            for (std::size_t j = 0; j < n; ++j) rowsum += dl.at(i, j);
            for (std::size_t j = 0; j < n; ++j)
                gx.at(i, j) += dl.at(i, j) - std::exp(l.at(i, j)) * rowsum;
        }
    };
    return out;
}

/// Row-wise layer normalization with learnable gain and bias.
inline Val layer_norm(Val x, Val gain, Val bias, double eps = 1e-8) {
    Graph& g = *x.graph();
    detail::same_graph(x, gain, "layer_norm");
    detail::same_graph(x, bias, "layer_norm");
    Val out = g.emplace(layer_norm(x.value(), gain.value(), bias.value(), eps),
                        detail::needs(g, x) || detail::needs(g, gain) || detail::needs(g, bias));
    if (!g.node(out.id()).needs_grad) return out;
    const std::size_t ix = x.id(), ig = gain.id(), ib = bias.id(), io = out.id();
    g.node(io).backprop = [ix, ig, ib, io, eps](Graph& gr) {
        const Tensor& dy = gr.grad_of(io);
        const Tensor& xv = gr.value_of(ix);
        const Tensor& gv = gr.value_of(ig);
        const std::size_t m = xv.rows(), d = xv.cols();
        const double dd = static_cast<double>(d);
        for (std::size_t i = 0; i < m; ++i) {
            double mean = 0.0;
            for (std::size_t j = 0; j < d; ++j) mean += xv.at(i, j);
            mean /= dd;
            double var = 0.0;
            for (std::size_t j = 0; j < d; ++j) {
                const double c = xv.at(i, j) - mean;
                var += c * c;
            }
            var /= dd;
            const double inv = 1.0 / std::sqrt(var + eps);
            // dxhat_j = dy_j * gain_j; reduce the two row sums once.
            double s1 = 0.0, s2 = 0.0;
            for (std::size_t j = 0; j < d; ++j) {
                const double dxh = dy.at(i, j) * gv.at(j);
                const double xh = (xv.at(i, j) - mean) * inv;
                s1 += dxh;
                s2 += dxh * xh;
            }
            if (gr.node(ix).needs_grad) {
                Tensor& gx = gr.grad_of(ix);
                for (std::size_t j = 0; j < d; ++j) {
                    const double dxh = dy.at(i, j) * gv.at(j);
                    const double xh = (xv.at(i, j) - mean) * inv;
                    gx.at(i, j) += inv * (dxh - s1 / dd - xh * s2 / dd);
                }
            }
            if (gr.node(ig).needs_grad) {
                Tensor& gg = gr.grad_of(ig);
                for (std::size_t j = 0; j < d; ++j)
                    gg.at(j) += dy.at(i, j) * (xv.at(i, j) - mean) * inv;
            }
            if (gr.node(ib).needs_grad) {
                Tensor& gb = gr.grad_of(ib);
                for (std::size_t j = 0; j < d; ++j) gb.at(j) += dy.at(i, j);
            }
        }
    };
    return out;
}

/// Select rows of a 2-d tensor by index; duplicates allowed (embedding
/// lookup).  Backward scatter-adds into the source rows.
inline Val gather_rows(Val table, std::vector<std::size_t> idx) {
    Graph& g = *table.graph();
    const Tensor& tv = table.value();
    const std::size_t d = tv.cols();
    Tensor out({idx.size(), d});
    for (std::size_t i = 0; i < idx.size(); ++i) {
        if (idx[i] >= tv.rows())
            throw ShapeError("gather_rows: index " + std::to_string(idx[i]) +
                             " out of range for " + tv.shape_string());
        for (std::size_t j = 0; j < d; ++j) out.at(i, j) = tv.at(idx[i], j);
    }
    Val o = g.emplace(std::move(out), detail::needs(g, table));
    if (!g.node(o.id()).needs_grad) return o;
    const std::size_t it = table.id(), io = o.id();
    g.node(io).backprop = [it, io, idx = std::move(idx), d](Graph& gr) {
        Tensor& gt = gr.grad_of(it);
        const Tensor& dc = gr.grad_of(io);
        for (std::size_t i = 0; i < idx.size(); ++i)
            for (std::size_t j = 0; j < d; ++j) gt.at(idx[i], j) += dc.at(i, j);
    };
    return o;
}

/// Stack 2-d blocks with equal column counts on top of each other.
inline Val concat_rows(const std::vector<Val>& parts) {
    if (parts.empty()) throw ShapeError("concat_rows: no parts");
    Graph& g = *parts[0].graph();
    const std::size_t d = parts[0].value().cols();
    std::size_t total = 0;
    bool ng = false;
    for (const Val& p : parts) {
        if (p.graph() != &g) throw ShapeError("concat_rows: mixed graphs");
        if (p.value().cols() != d) throw ShapeError("concat_rows: column mismatch");
        total += p.value().rows();
        ng = ng || detail::needs(g, p);
    }
    Tensor out({total, d});
    std::size_t r = 0;
    std::vector<std::size_t> ids;
    std::vector<std::size_t> offsets;
    for (const Val& p : parts) {
        ids.push_back(p.id());
        offsets.push_back(r);
        const Tensor& pv = p.value();
        for (std::size_t i = 0; i < pv.rows(); ++i)
            for (std::size_t j = 0; j < d; ++j) out.at(r + i, j) = pv.at(i, j);
        r += pv.rows();
    }
    Val o = g.emplace(std::move(out), ng);
    if (!g.node(o.id()).needs_grad) return o;
    const std::size_t io = o.id();
    g.node(io).backprop = [ids = std::move(ids), offsets = std::move(offsets), io, d](Graph& gr) {
        const Tensor& dc = gr.grad_of(io);
        for (std::size_t p = 0; p < ids.size(); ++p) {
            if (!gr.node(ids[p]).needs_grad) continue;
            Tensor& gp = gr.grad_of(ids[p]);
            for (std::size_t i = 0; i < gp.rows(); ++i)
                for (std::size_t j = 0; j < d; ++j) gp.at(i, j) += dc.at(offsets[p] + i, j);
        }
    };
    return o;
}

/// Concatenate 2-d blocks with equal row counts side by side (head merge).
inline Val concat_cols(const std::vector<Val>& parts) {
    if (parts.empty()) throw ShapeError("concat_cols: no parts");
    Graph& g = *parts[0].graph();
    const std::size_t m = parts[0].value().rows();
    std::size_t total = 0;
    bool ng = false;
    for (const Val& p : parts) {
        if (p.graph() != &g) throw ShapeError("concat_cols: mixed graphs");
        if (p.value().rows() != m) throw ShapeError("concat_cols: row mismatch");
        total += p.value().cols();
        ng = ng || detail::needs(g, p);
    }
    Tensor out({m, total});
    std::size_t c = 0;
    std::vector<std::size_t> ids;
    std::vector<std::size_t> offsets;
    for (const Val& p : parts) {
        ids.push_back(p.id());
        offsets.push_back(c);
        const Tensor& pv = p.value();
        for (std::size_t i = 0; i < m; ++i)
            for (std::size_t j = 0; j < pv.cols(); ++j) out.at(i, c + j) = pv.at(i, j);
        c += pv.cols();
    }
    Val o = g.emplace(std::move(out), ng);
    if (!g.node(o.id()).needs_grad) return o;
    const std::size_t io = o.id();
    g.node(io).backprop = [ids = std::move(ids), offsets = std::move(offsets), io, m](Graph& gr) {
        const Tensor& dc = gr.grad_of(io);
        for (std::size_t p = 0; p < ids.size(); ++p) {
            if (!gr.node(ids[p]).needs_grad) continue;
            Tensor& gp = gr.grad_of(ids[p]);
            for (std::size_t i = 0; i < m; ++i)
                for (std::size_t j = 0; j < gp.cols(); ++j) gp.at(i, j) += dc.at(i, offsets[p] + j);
        }
    };
    return o;
}

/// Row-by-row dot product of two [m x d] tensors, producing shape [m].
inline Val rowwise_dot(Val a, Val b) {
    Graph& g = detail::same_graph(a, b, "rowwise_dot");
    if (!a.value().same_shape(b.value()))
        throw ShapeError("rowwise_dot: shape mismatch " + a.value().shape_string() + " vs " +
                         b.value().shape_string());
    const std::size_t m = a.value().rows(), d = a.value().cols();
    Tensor out({m});
    for (std::size_t i = 0; i < m; ++i) {
        double s = 0.0;
        for (std::size_t j = 0; j < d; ++j) s += a.value().at(i, j) * b.value().at(i, j);
        out.at(i) = s;
    }
    Val o = g.emplace(std::move(out), detail::needs(g, a) || detail::needs(g, b));
    if (!g.node(o.id()).needs_grad) return o;
    const std::size_t ia = a.id(), ib = b.id(), io = o.id();
    g.node(io).backprop = [ia, ib, io, m, d](Graph& gr) {
        const Tensor& dv = gr.grad_of(io);
        if (gr.node(ia).needs_grad) {
            Tensor& ga = gr.grad_of(ia);
            const Tensor& bv = gr.value_of(ib);
            for (std::size_t i = 0; i < m; ++i)
                for (std::size_t j = 0; j < d; ++j) ga.at(i, j) += dv.at(i) * bv.at(i, j);
        }
        if (gr.node(ib).needs_grad) {
            Tensor& gb = gr.grad_of(ib);
            const Tensor& av = gr.value_of(ia);
            for (std::size_t i = 0; i < m; ++i)
                for (std::size_t j = 0; j < d; ++j) gb.at(i, j) += dv.at(i) * av.at(i, j);
        }
    };
    return o;
}

inline Val sum_all(Val a) {
    Graph& g = *a.graph();
    double s = 0.0;
    for (std::size_t k = 0; k < a.value().numel(); ++k) s += a.value().at(k);
    Val o = g.emplace(Tensor::scalar(s), detail::needs(g, a));
    if (!g.node(o.id()).needs_grad) return o;
    const std::size_t ia = a.id(), io = o.id();
    g.node(io).backprop = [ia, io](Graph& gr) {
        Tensor& ga = gr.grad_of(ia);
        const double dc = gr.grad_of(io).at(0);
        for (std::size_t k = 0; k < ga.numel(); ++k) ga.at(k) += dc;
    };
    return o;
}

/// Mean of the elements selected by a {0,1} mask.  Errors when the mask is
/// empty, since an unmasked mean of nothing has no defined value.
inline Val mean_masked(Val a, Tensor mask) {
    Graph& g = *a.graph();
    if (!a.value().same_shape(mask))
        throw ShapeError("mean_masked: mask shape " + mask.shape_string() + " vs " +
                         a.value().shape_string());
    double nnz = 0.0;
    for (std::size_t k = 0; k < mask.numel(); ++k) nnz += (mask.at(k) != 0.0) ? 1.0 : 0.0;
    if (nnz == 0.0) throw LossError("mean_masked: mask selects no positions");
    double s = 0.0;
    for (std::size_t k = 0; k < mask.numel(); ++k)
        if (mask.at(k) != 0.0) s += a.value().at(k);
    Val o = g.emplace(Tensor::scalar(s / nnz), detail::needs(g, a));
    if (!g.node(o.id()).needs_grad) return o;
    const std::size_t ia = a.id(), io = o.id();
    g.node(io).backprop = [ia, io, mask = std::move(mask), nnz](Graph& gr) {
        Tensor& ga = gr.grad_of(ia);
        const double dc = gr.grad_of(io).at(0) / nnz;
        for (std::size_t k = 0; k < ga.numel(); ++k)
            if (mask.at(k) != 0.0) ga.at(k) += dc;
    };
    return o;
}

// ---------------------------------------------------------------------------
// Finite-difference gradient verification.
// ---------------------------------------------------------------------------

/// Checks analytic gradients of a scalar loss against central differences.
///
/// `loss` must be a deterministic function of the parameter values.  It is
/// called once with `with_grad=true` (and must leave fresh gradients in the
/// parameters) and then twice per coordinate with `with_grad=false`.
/// Returns max over coordinates of |analytic - numeric| /
/// (|analytic| + |numeric| + 1e-8).
inline double grad_check(const std::function<double(bool with_grad)>& loss,
                         const std::vector<Parameter*>& params, double h = 1e-5) {
    for (Parameter* p : params) p->zero_grad();
    const double base = loss(true);
    if (!std::isfinite(base)) throw LossError("grad_check: non-finite loss at base point");
    std::vector<Tensor> analytic;
    analytic.reserve(params.size());
    for (Parameter* p : params) analytic.push_back(p->grad);

    double worst = 0.0;
    for (std::size_t pi = 0; pi < params.size(); ++pi) {
        Parameter& p = *params[pi];
        for (std::size_t k = 0; k < p.value.numel(); ++k) {
            const double saved = p.value.at(k);
            p.value.at(k) = saved + h;
            const double up = loss(false);
            p.value.at(k) = saved - h;
            const double down = loss(false);
            p.value.at(k) = saved;
            if (!std::isfinite(up) || !std::isfinite(down))
                throw LossError("grad_check: non-finite loss at probe point");
            const double numeric = (up - down) / (2.0 * h);
            const double a = analytic[pi].at(k);
            const double rel = std::abs(a - numeric) / (std::abs(a) + std::abs(numeric) + 1e-8);
            worst = std::max(worst, rel);
        }
    }
    return worst;
}

}  // namespace bicat
