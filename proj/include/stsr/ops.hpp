#pragma once

#include <algorithm>
#include <cmath>
#include <memory>
#include <string>
#include <utility>
#include <vector>

#include "stsr/tensor.hpp"

namespace stsr {

namespace detail {

inline std::shared_ptr<GraphNode> make_node_vec(int numel,
                                                std::vector<std::shared_ptr<GraphNode>> parents) {
    auto n = std::make_shared<GraphNode>();
    n->seq = next_seq();
    n->numel = numel;
    for (auto& p : parents)
        if (p) n->parents.push_back(std::move(p));
    return n;
}

inline void check_same_shape(const char* op, const Tensor& a, const Tensor& b) {
    if (a.shape() != b.shape())
        throw DimensionError(std::string(op) + ": shape mismatch " + a.shape_string() + " vs " +
                             b.shape_string());
}

inline void check_rank(const char* op, const Tensor& t, int rank) {
    if (t.rank() != rank)
        throw DimensionError(std::string(op) + ": expected rank " + std::to_string(rank) +
                             " tensor, got " + t.shape_string());
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Elementwise
// ---------------------------------------------------------------------------

inline Tensor add(const Tensor& a, const Tensor& b) {
    detail::check_same_shape("add", a, b);
    const auto& av = a.values();
    const auto& bv = b.values();
    std::vector<double> out(av.size());
    for (std::size_t i = 0; i < av.size(); ++i) out[i] = av[i] + bv[i];
    Tensor r(a.shape(), std::move(out));
    if (grad_enabled() && (a.node() || b.node())) {
        auto na = a.node(), nb = b.node();
        auto n = detail::make_node(r.numel(), {na, nb});
        n->backprop = [na, nb](const std::vector<double>& g) {
            if (na)
                for (std::size_t i = 0; i < g.size(); ++i) na->grad[i] += g[i];
            if (nb)
                for (std::size_t i = 0; i < g.size(); ++i) nb->grad[i] += g[i];
        };
        r.attach(n);
    }
    return r;
}

inline Tensor sub(const Tensor& a, const Tensor& b) {
    detail::check_same_shape("sub", a, b);
    const auto& av = a.values();
    const auto& bv = b.values();
    std::vector<double> out(av.size());
    for (std::size_t i = 0; i < av.size(); ++i) out[i] = av[i] - bv[i];
    Tensor r(a.shape(), std::move(out));
    if (grad_enabled() && (a.node() || b.node())) {
        auto na = a.node(), nb = b.node();
        auto n = detail::make_node(r.numel(), {na, nb});
        n->backprop = [na, nb](const std::vector<double>& g) {
            if (na)
                for (std::size_t i = 0; i < g.size(); ++i) na->grad[i] += g[i];
            if (nb)
                for (std::size_t i = 0; i < g.size(); ++i) nb->grad[i] -= g[i];
        };
        r.attach(n);
    }
    return r;
}

inline Tensor mul(const Tensor& a, const Tensor& b) {
    detail::check_same_shape("mul", a, b);
    const auto& av = a.values();
    const auto& bv = b.values();
    std::vector<double> out(av.size());
    for (std::size_t i = 0; i < av.size(); ++i) out[i] = av[i] * bv[i];
    Tensor r(a.shape(), std::move(out));
    if (grad_enabled() && (a.node() || b.node())) {
        auto na = a.node(), nb = b.node();
        auto ad = a.data_ptr(), bd = b.data_ptr();
        auto n = detail::make_node(r.numel(), {na, nb});
        n->backprop = [na, nb, ad, bd](const std::vector<double>& g) {
            if (na)
                for (std::size_t i = 0; i < g.size(); ++i) na->grad[i] += g[i] * (*bd)[i];
            if (nb)
                for (std::size_t i = 0; i < g.size(); ++i) nb->grad[i] += g[i] * (*ad)[i];
        };
        r.attach(n);
    }
    return r;
}

// Elementwise quotient. Denominator entries must be nonzero.
inline Tensor div(const Tensor& a, const Tensor& b) {
    detail::check_same_shape("div", a, b);
    const auto& av = a.values();
    const auto& bv = b.values();
    std::vector<double> out(av.size());
    for (std::size_t i = 0; i < av.size(); ++i) out[i] = av[i] / bv[i];
    Tensor r(a.shape(), std::move(out));
    if (grad_enabled() && (a.node() || b.node())) {
        auto na = a.node(), nb = b.node();
        auto ad = a.data_ptr(), bd = b.data_ptr();
        auto n = detail::make_node(r.numel(), {na, nb});
        n->backprop = [na, nb, ad, bd](const std::vector<double>& g) {
            if (na)
                for (std::size_t i = 0; i < g.size(); ++i) na->grad[i] += g[i] / (*bd)[i];
            if (nb)
                for (std::size_t i = 0; i < g.size(); ++i)
                    nb->grad[i] -= g[i] * (*ad)[i] / ((*bd)[i] * (*bd)[i]);
        };
        r.attach(n);
    }
    return r;
}

inline Tensor add_scalar(const Tensor& a, double c) {
    const auto& av = a.values();
    std::vector<double> out(av.size());
    for (std::size_t i = 0; i < av.size(); ++i) out[i] = av[i] + c;
    Tensor r(a.shape(), std::move(out));
    if (grad_enabled() && a.node()) {
        auto na = a.node();
        auto n = detail::make_node(r.numel(), {na});
        n->backprop = [na](const std::vector<double>& g) {
            for (std::size_t i = 0; i < g.size(); ++i) na->grad[i] += g[i];
        };
        r.attach(n);
    }
    return r;
}

inline Tensor mul_scalar(const Tensor& a, double c) {
    const auto& av = a.values();
    std::vector<double> out(av.size());
    for (std::size_t i = 0; i < av.size(); ++i) out[i] = av[i] * c;
    Tensor r(a.shape(), std::move(out));
    if (grad_enabled() && a.node()) {
        auto na = a.node();
        auto n = detail::make_node(r.numel(), {na});
        n->backprop = [na, c](const std::vector<double>& g) {
            for (std::size_t i = 0; i < g.size(); ++i) na->grad[i] += c * g[i];
        };
        r.attach(n);
    }
    return r;
}

inline Tensor operator+(const Tensor& a, const Tensor& b) { return add(a, b); }
inline Tensor operator-(const Tensor& a, const Tensor& b) { return sub(a, b); }
inline Tensor operator*(const Tensor& a, const Tensor& b) { return mul(a, b); }

// ---------------------------------------------------------------------------
// Activations
// ---------------------------------------------------------------------------

inline Tensor relu(const Tensor& a) {
    const auto& av = a.values();
    std::vector<double> out(av.size());
    for (std::size_t i = 0; i < av.size(); ++i) out[i] = av[i] > 0.0 ? av[i] : 0.0;
    Tensor r(a.shape(), std::move(out));
    if (grad_enabled() && a.node()) {
        auto na = a.node();
        auto ad = a.data_ptr();
        auto n = detail::make_node(r.numel(), {na});
        n->backprop = [na, ad](const std::vector<double>& g) {
            for (std::size_t i = 0; i < g.size(); ++i)
                if ((*ad)[i] > 0.0) na->grad[i] += g[i];
        };
        r.attach(n);
    }
    return r;
}

inline Tensor silu(const Tensor& a) {
    const auto& av = a.values();
    std::vector<double> out(av.size());
    for (std::size_t i = 0; i < av.size(); ++i) {
        double s = 1.0 / (1.0 + std::exp(-av[i]));
        out[i] = av[i] * s;
    }
    Tensor r(a.shape(), std::move(out));
    if (grad_enabled() && a.node()) {
        auto na = a.node();
        auto ad = a.data_ptr();
        auto n = detail::make_node(r.numel(), {na});
        n->backprop = [na, ad](const std::vector<double>& g) {
            for (std::size_t i = 0; i < g.size(); ++i) {
                double x = (*ad)[i];
                double s = 1.0 / (1.0 + std::exp(-x));
                na->grad[i] += g[i] * s * (1.0 + x * (1.0 - s));
            }
        };
        r.attach(n);
    }
    return r;
}

// ---------------------------------------------------------------------------
// Shape ops
// ---------------------------------------------------------------------------

inline Tensor reshape(const Tensor& a, std::vector<int> shape) {
    Tensor r(std::move(shape), a.values());
    if (r.numel() != a.numel())
        throw DimensionError("reshape: cannot reshape " + a.shape_string() + " to " +
                             r.shape_string());
    if (grad_enabled() && a.node()) {
        auto na = a.node();
        auto n = detail::make_node(r.numel(), {na});
        n->backprop = [na](const std::vector<double>& g) {
            for (std::size_t i = 0; i < g.size(); ++i) na->grad[i] += g[i];
        };
        r.attach(n);
    }
    return r;
}

inline Tensor flatten(const Tensor& a) { return reshape(a, {a.numel()}); }

inline Tensor transpose(const Tensor& a) {
    detail::check_rank("transpose", a, 2);
    int m = a.dim(0), n2 = a.dim(1);
    const auto& av = a.values();
    std::vector<double> out(av.size());
    for (int i = 0; i < m; ++i)
        for (int j = 0; j < n2; ++j) out[static_cast<std::size_t>(j) * m + i] = av[static_cast<std::size_t>(i) * n2 + j];
    Tensor r({n2, m}, std::move(out));
    if (grad_enabled() && a.node()) {
        auto na = a.node();
        auto n = detail::make_node(r.numel(), {na});
        n->backprop = [na, m, n2](const std::vector<double>& g) {
            for (int j = 0; j < n2; ++j)
                for (int i = 0; i < m; ++i)
                    na->grad[static_cast<std::size_t>(i) * n2 + j] +=
                        g[static_cast<std::size_t>(j) * m + i];
        };
        r.attach(n);
    }
    return r;
}

// Concatenate equal-rank tensors along `dim`; all other dims must agree.
inline Tensor concat(const std::vector<Tensor>& parts, int dim) {
    if (parts.empty()) throw DimensionError("concat: no inputs");
    int rank = parts[0].rank();
    if (dim < 0 || dim >= rank) throw DimensionError("concat: dim out of range");
    std::vector<int> shape = parts[0].shape();
    int cat = 0;
    for (const auto& p : parts) {
        if (p.rank() != rank) throw DimensionError("concat: rank mismatch");
        for (int d = 0; d < rank; ++d)
            if (d != dim && p.dim(d) != shape[static_cast<std::size_t>(d)])
                throw DimensionError("concat: shape mismatch " + p.shape_string() + " vs " +
                                     Tensor::shape_string(shape));
        cat += p.dim(dim);
    }
    shape[static_cast<std::size_t>(dim)] = cat;

    int outer = 1, inner = 1;
    for (int d = 0; d < dim; ++d) outer *= parts[0].dim(d);
    for (int d = dim + 1; d < rank; ++d) inner *= parts[0].dim(d);

    std::vector<double> out;
    out.resize(static_cast<std::size_t>(outer) * cat * inner);
    std::vector<int> offsets(parts.size());
    int off = 0;
    for (std::size_t p = 0; p < parts.size(); ++p) {
        offsets[p] = off;
        int mid = parts[p].dim(dim);
        const auto& pv = parts[p].values();
        for (int o = 0; o < outer; ++o)
            std::copy(pv.begin() + static_cast<std::ptrdiff_t>(o) * mid * inner,
                      pv.begin() + static_cast<std::ptrdiff_t>(o + 1) * mid * inner,
                      out.begin() + (static_cast<std::ptrdiff_t>(o) * cat + off) * inner);
        off += mid;
    }
    Tensor r(shape, std::move(out));

    bool tracked = false;
    for (const auto& p : parts) tracked = tracked || (p.node() != nullptr);
    if (grad_enabled() && tracked) {
        std::vector<std::shared_ptr<detail::GraphNode>> ns;
        std::vector<int> mids;
        for (const auto& p : parts) {
            ns.push_back(p.node());
            mids.push_back(p.dim(dim));
        }
        auto n = detail::make_node_vec(r.numel(), ns);
        n->backprop = [ns, mids, offsets, outer, cat, inner](const std::vector<double>& g) {
            for (std::size_t p = 0; p < ns.size(); ++p) {
                if (!ns[p]) continue;
                int mid = mids[p];
                for (int o = 0; o < outer; ++o) {
                    const double* src = g.data() + (static_cast<std::ptrdiff_t>(o) * cat + offsets[p]) * inner;
                    double* dst = ns[p]->grad.data() + static_cast<std::ptrdiff_t>(o) * mid * inner;
                    for (int i = 0; i < mid * inner; ++i) dst[i] += src[i];
                }
            }
        };
        r.attach(n);
    }
    return r;
}

// ---------------------------------------------------------------------------
// Reductions
// ---------------------------------------------------------------------------

inline Tensor sum_all(const Tensor& a) {
    double s = 0.0;
    for (double v : a.values()) s += v;
    Tensor r = Tensor::scalar(s);
    if (grad_enabled() && a.node()) {
        auto na = a.node();
        auto n = detail::make_node(1, {na});
        n->backprop = [na](const std::vector<double>& g) {
            for (auto& gi : na->grad) gi += g[0];
        };
        r.attach(n);
    }
    return r;
}

inline Tensor mean_all(const Tensor& a) {
    double s = 0.0;
    for (double v : a.values()) s += v;
    double inv = 1.0 / static_cast<double>(a.numel());
    Tensor r = Tensor::scalar(s * inv);
    if (grad_enabled() && a.node()) {
        auto na = a.node();
        auto n = detail::make_node(1, {na});
        n->backprop = [na, inv](const std::vector<double>& g) {
            for (auto& gi : na->grad) gi += g[0] * inv;
        };
        r.attach(n);
    }
    return r;
}

// Euclidean norm of all entries, as a scalar tensor.
inline Tensor l2_norm(const Tensor& a) {
    double s = 0.0;
    for (double v : a.values()) s += v * v;
    double norm = std::sqrt(s);
    Tensor r = Tensor::scalar(norm);
    if (grad_enabled() && a.node()) {
        auto na = a.node();
        auto ad = a.data_ptr();
        auto n = detail::make_node(1, {na});
        n->backprop = [na, ad, norm](const std::vector<double>& g) {
            if (norm == 0.0) return;  // subgradient 0 at the origin
            double scale = g[0] / norm;
            for (std::size_t i = 0; i < na->grad.size(); ++i) na->grad[i] += scale * (*ad)[i];
        };
        r.attach(n);
    }
    return r;
}

// ---------------------------------------------------------------------------
// Linear algebra
// ---------------------------------------------------------------------------

inline Tensor matmul(const Tensor& a, const Tensor& b) {
    detail::check_rank("matmul", a, 2);
    detail::check_rank("matmul", b, 2);
    if (a.dim(1) != b.dim(0))
        throw DimensionError("matmul: inner dimensions differ, " + a.shape_string() + " vs " +
                             b.shape_string());
    int m = a.dim(0), k = a.dim(1), n2 = b.dim(1);
    const auto& av = a.values();
    const auto& bv = b.values();
    std::vector<double> out(static_cast<std::size_t>(m) * n2, 0.0);
    for (int i = 0; i < m; ++i) {
        const double* arow = av.data() + static_cast<std::ptrdiff_t>(i) * k;
        double* orow = out.data() + static_cast<std::ptrdiff_t>(i) * n2;
        for (int kk = 0; kk < k; ++kk) {
            double aik = arow[kk];
            const double* brow = bv.data() + static_cast<std::ptrdiff_t>(kk) * n2;
            for (int j = 0; j < n2; ++j) orow[j] += aik * brow[j];
        }
    }
    Tensor r({m, n2}, std::move(out));
    if (grad_enabled() && (a.node() || b.node())) {
        auto na = a.node(), nb = b.node();
        auto ad = a.data_ptr(), bd = b.data_ptr();
        auto n = detail::make_node(r.numel(), {na, nb});
        n->backprop = [na, nb, ad, bd, m, k, n2](const std::vector<double>& g) {
            if (na) {  // da = g . b^T
                for (int i = 0; i < m; ++i) {
                    const double* grow = g.data() + static_cast<std::ptrdiff_t>(i) * n2;
                    double* darow = na->grad.data() + static_cast<std::ptrdiff_t>(i) * k;
                    for (int kk = 0; kk < k; ++kk) {
                        const double* brow = bd->data() + static_cast<std::ptrdiff_t>(kk) * n2;
                        double s = 0.0;
                        for (int j = 0; j < n2; ++j) s += grow[j] * brow[j];
                        darow[kk] += s;
                    }
                }
            }
            if (nb) {  // db = a^T . g
                for (int i = 0; i < m; ++i) {
                    const double* arow = ad->data() + static_cast<std::ptrdiff_t>(i) * k;
                    const double* grow = g.data() + static_cast<std::ptrdiff_t>(i) * n2;
                    for (int kk = 0; kk < k; ++kk) {
                        double aik = arow[kk];
                        double* dbrow = nb->grad.data() + static_cast<std::ptrdiff_t>(kk) * n2;
                        for (int j = 0; j < n2; ++j) dbrow[j] += aik * grow[j];
                    }
                }
            }
        };
        r.attach(n);
    }
    return r;
}

// Row-stable softmax over the last dimension of an m x n tensor.
inline Tensor softmax_rows(const Tensor& a) {
    detail::check_rank("softmax_rows", a, 2);
    int m = a.dim(0), n2 = a.dim(1);
    const auto& av = a.values();
    std::vector<double> out(av.size());
    for (int i = 0; i < m; ++i) {
        const double* row = av.data() + static_cast<std::ptrdiff_t>(i) * n2;
        double* orow = out.data() + static_cast<std::ptrdiff_t>(i) * n2;
        double mx = row[0];
        for (int j = 1; j < n2; ++j) mx = std::max(mx, row[j]);
        double sum = 0.0;
        for (int j = 0; j < n2; ++j) {
            orow[j] = std::exp(row[j] - mx);
            sum += orow[j];
        }
        double inv = 1.0 / sum;
        for (int j = 0; j < n2; ++j) orow[j] *= inv;
    }
    Tensor r(a.shape(), std::move(out));
    if (grad_enabled() && a.node()) {
        auto na = a.node();
        auto rd = r.data_ptr();
        auto n = detail::make_node(r.numel(), {na});
        n->backprop = [na, rd, m, n2](const std::vector<double>& g) {
            for (int i = 0; i < m; ++i) {
                const double* p = rd->data() + static_cast<std::ptrdiff_t>(i) * n2;
                const double* grow = g.data() + static_cast<std::ptrdiff_t>(i) * n2;
                double dot = 0.0;
                for (int j = 0; j < n2; ++j) dot += grow[j] * p[j];
                double* din = na->grad.data() + static_cast<std::ptrdiff_t>(i) * n2;
                for (int j = 0; j < n2; ++j) din[j] += p[j] * (grow[j] - dot);
            }
        };
        r.attach(n);
    }
    return r;
}

// out[i, j] = x[i, j] + b[j]
inline Tensor bias_add_rows(const Tensor& x, const Tensor& b) {
    detail::check_rank("bias_add_rows", x, 2);
    detail::check_rank("bias_add_rows", b, 1);
    if (x.dim(1) != b.dim(0))
        throw DimensionError("bias_add_rows: width " + x.shape_string() + " vs bias " +
                             b.shape_string());
    int m = x.dim(0), n2 = x.dim(1);
    const auto& xv = x.values();
    const auto& bv = b.values();
    std::vector<double> out(xv.size());
    for (int i = 0; i < m; ++i)
        for (int j = 0; j < n2; ++j)
            out[static_cast<std::size_t>(i) * n2 + j] = xv[static_cast<std::size_t>(i) * n2 + j] + bv[static_cast<std::size_t>(j)];
    Tensor r(x.shape(), std::move(out));
    if (grad_enabled() && (x.node() || b.node())) {
        auto nx = x.node(), nb = b.node();
        auto n = detail::make_node(r.numel(), {nx, nb});
        n->backprop = [nx, nb, m, n2](const std::vector<double>& g) {
            if (nx)
                for (std::size_t i = 0; i < g.size(); ++i) nx->grad[i] += g[i];
            if (nb)
                for (int i = 0; i < m; ++i)
                    for (int j = 0; j < n2; ++j)
                        nb->grad[static_cast<std::size_t>(j)] += g[static_cast<std::size_t>(i) * n2 + j];
        };
        r.attach(n);
    }
    return r;
}

// Affine map x.W + b over row vectors; differentiable in all three arguments.
inline Tensor fc(const Tensor& x, const Tensor& w, const Tensor& b) {
    return bias_add_rows(matmul(x, w), b);
}

// out[c, y, x] = t[c, y, x] + b[c]
inline Tensor bias_add_channels(const Tensor& x, const Tensor& b) {
    detail::check_rank("bias_add_channels", x, 3);
    detail::check_rank("bias_add_channels", b, 1);
    if (x.dim(0) != b.dim(0))
        throw DimensionError("bias_add_channels: channels " + x.shape_string() + " vs bias " +
                             b.shape_string());
    int c = x.dim(0);
    int hw = x.dim(1) * x.dim(2);
    const auto& xv = x.values();
    const auto& bv = b.values();
    std::vector<double> out(xv.size());
    for (int ch = 0; ch < c; ++ch) {
        double bc = bv[static_cast<std::size_t>(ch)];
        const double* src = xv.data() + static_cast<std::ptrdiff_t>(ch) * hw;
        double* dst = out.data() + static_cast<std::ptrdiff_t>(ch) * hw;
        for (int i = 0; i < hw; ++i) dst[i] = src[i] + bc;
    }
    Tensor r(x.shape(), std::move(out));
    if (grad_enabled() && (x.node() || b.node())) {
        auto nx = x.node(), nb = b.node();
        auto n = detail::make_node(r.numel(), {nx, nb});
        n->backprop = [nx, nb, c, hw](const std::vector<double>& g) {
            if (nx)
                for (std::size_t i = 0; i < g.size(); ++i) nx->grad[i] += g[i];
            if (nb)
                for (int ch = 0; ch < c; ++ch) {
                    const double* grow = g.data() + static_cast<std::ptrdiff_t>(ch) * hw;
                    double s = 0.0;
                    for (int i = 0; i < hw; ++i) s += grow[i];
                    nb->grad[static_cast<std::size_t>(ch)] += s;
                }
        };
        r.attach(n);
    }
    return r;
}

// ---------------------------------------------------------------------------
// Spatial ops (CHW layout)
// ---------------------------------------------------------------------------

// Direct 2-D convolution with zero padding. x: (Cin,H,W), k: (Cout,Cin,kh,kw),
// b: (Cout). Output spatial size floor((H + 2p - kh)/s) + 1.
inline Tensor conv2d(const Tensor& x, const Tensor& k, const Tensor& b, int stride, int pad) {
    detail::check_rank("conv2d", x, 3);
    detail::check_rank("conv2d", k, 4);
    detail::check_rank("conv2d", b, 1);
    if (stride < 1 || pad < 0) throw DomainError("conv2d: stride must be >= 1 and pad >= 0");
    if (k.dim(1) != x.dim(0))
        throw DimensionError("conv2d: kernel channels " + k.shape_string() + " vs input " +
                             x.shape_string());
    if (b.dim(0) != k.dim(0))
        throw DimensionError("conv2d: bias " + b.shape_string() + " vs kernel " + k.shape_string());
    const int cin = x.dim(0), h = x.dim(1), w = x.dim(2);
    const int cout = k.dim(0), kh = k.dim(2), kw = k.dim(3);
    const int oh = (h + 2 * pad - kh) / stride + 1;
    const int ow = (w + 2 * pad - kw) / stride + 1;
    if (oh < 1 || ow < 1)
        throw DimensionError("conv2d: kernel " + k.shape_string() + " larger than padded input " +
                             x.shape_string());

    const auto& xv = x.values();
    const auto& kv = k.values();
    const auto& bv = b.values();
    std::vector<double> out(static_cast<std::size_t>(cout) * oh * ow);
    for (int oc = 0; oc < cout; ++oc)
        std::fill(out.begin() + static_cast<std::ptrdiff_t>(oc) * oh * ow,
                  out.begin() + static_cast<std::ptrdiff_t>(oc + 1) * oh * ow, bv[static_cast<std::size_t>(oc)]);

    auto run = [&](const double* xin, const double* ker, double* dst) {
        for (int oc = 0; oc < cout; ++oc)
            for (int ic = 0; ic < cin; ++ic)
                for (int ky = 0; ky < kh; ++ky)
                    for (int kx = 0; kx < kw; ++kx) {
                        double wv = ker[((static_cast<std::ptrdiff_t>(oc) * cin + ic) * kh + ky) * kw + kx];
                        if (wv == 0.0) continue;
                        // ox range keeping ix = ox*stride + kx - pad inside [0, w)
                        int lo = 0, hi = ow - 1;
                        if (kx - pad < 0) lo = (pad - kx + stride - 1) / stride;
                        if (kx - pad + (ow - 1) * stride >= w) hi = (w - 1 - kx + pad) / stride;
                        for (int oy = 0; oy < oh; ++oy) {
                            int iy = oy * stride + ky - pad;
                            if (iy < 0 || iy >= h) continue;
                            const double* xrow = xin + (static_cast<std::ptrdiff_t>(ic) * h + iy) * w;
                            double* orow = dst + (static_cast<std::ptrdiff_t>(oc) * oh + oy) * ow;
                            for (int ox = lo; ox <= hi; ++ox)
                                orow[ox] += wv * xrow[ox * stride + kx - pad];
                        }
                    }
    };
    run(xv.data(), kv.data(), out.data());
    Tensor r({cout, oh, ow}, std::move(out));

    if (grad_enabled() && (x.node() || k.node() || b.node())) {
        auto nx = x.node(), nk = k.node(), nb = b.node();
        auto xd = x.data_ptr(), kd = k.data_ptr();
        auto n = detail::make_node_vec(r.numel(), {nx, nk, nb});
        n->backprop = [nx, nk, nb, xd, kd, cin, h, w, cout, kh, kw, oh, ow, stride,
                       pad](const std::vector<double>& g) {
            if (nb) {
                for (int oc = 0; oc < cout; ++oc) {
                    const double* grow = g.data() + static_cast<std::ptrdiff_t>(oc) * oh * ow;
                    double s = 0.0;
                    for (int i = 0; i < oh * ow; ++i) s += grow[i];
                    nb->grad[static_cast<std::size_t>(oc)] += s;
                }
            }
            if (!nx && !nk) return;
            for (int oc = 0; oc < cout; ++oc)
                for (int ic = 0; ic < cin; ++ic)
                    for (int ky = 0; ky < kh; ++ky)
                        for (int kx = 0; kx < kw; ++kx) {
                            std::size_t kidx = ((static_cast<std::size_t>(oc) * cin + ic) * kh + ky) * kw + kx;
                            double wv = (*kd)[kidx];
                            double dk = 0.0;
                            int lo = 0, hi = ow - 1;
                            if (kx - pad < 0) lo = (pad - kx + stride - 1) / stride;
                            if (kx - pad + (ow - 1) * stride >= w) hi = (w - 1 - kx + pad) / stride;
                            for (int oy = 0; oy < oh; ++oy) {
                                int iy = oy * stride + ky - pad;
                                if (iy < 0 || iy >= h) continue;
                                const double* grow = g.data() + (static_cast<std::ptrdiff_t>(oc) * oh + oy) * ow;
                                const double* xrow = xd->data() + (static_cast<std::ptrdiff_t>(ic) * h + iy) * w;
                                double* dxrow = nx ? nx->grad.data() + (static_cast<std::ptrdiff_t>(ic) * h + iy) * w
                                                   : nullptr;
                                for (int ox = lo; ox <= hi; ++ox) {
                                    int ix = ox * stride + kx - pad;
                                    if (nk) dk += grow[ox] * xrow[ix];
                                    if (dxrow) dxrow[ix] += grow[ox] * wv;
                                }
                            }
                            if (nk) nk->grad[kidx] += dk;
                        }
        };
        r.attach(n);
    }
    return r;
}

// Integer-factor nearest-neighbor upsampling of a CHW tensor.
inline Tensor upsample_nearest(const Tensor& x, int factor) {
    detail::check_rank("upsample_nearest", x, 3);
    if (factor < 1) throw DomainError("upsample_nearest: factor must be >= 1");
    const int c = x.dim(0), h = x.dim(1), w = x.dim(2);
    const int oh = h * factor, ow = w * factor;
    const auto& xv = x.values();
    std::vector<double> out(static_cast<std::size_t>(c) * oh * ow);
    for (int ch = 0; ch < c; ++ch)
        for (int oy = 0; oy < oh; ++oy) {
            const double* src = xv.data() + (static_cast<std::ptrdiff_t>(ch) * h + oy / factor) * w;
            double* dst = out.data() + (static_cast<std::ptrdiff_t>(ch) * oh + oy) * ow;
            for (int ox = 0; ox < ow; ++ox) dst[ox] = src[ox / factor];
        }
    Tensor r({c, oh, ow}, std::move(out));
    if (grad_enabled() && x.node()) {
        auto nx = x.node();
        auto n = detail::make_node(r.numel(), {nx});
        n->backprop = [nx, c, h, w, factor, oh, ow](const std::vector<double>& g) {
            for (int ch = 0; ch < c; ++ch)
                for (int oy = 0; oy < oh; ++oy) {
                    double* dst = nx->grad.data() + (static_cast<std::ptrdiff_t>(ch) * h + oy / factor) * w;
                    const double* src = g.data() + (static_cast<std::ptrdiff_t>(ch) * oh + oy) * ow;
                    for (int ox = 0; ox < ow; ++ox) dst[ox / factor] += src[ox];
                }
        };
        r.attach(n);
    }
    return r;
}

// Non-overlapping block mean over fh x fw blocks of a CHW tensor.
inline Tensor block_average(const Tensor& x, int fh, int fw) {
    detail::check_rank("block_average", x, 3);
    const int c = x.dim(0), h = x.dim(1), w = x.dim(2);
    if (fh < 1 || fw < 1 || h % fh != 0 || w % fw != 0)
        throw DimensionError("block_average: factors " + std::to_string(fh) + "x" +
                             std::to_string(fw) + " do not divide " + x.shape_string());
    const int oh = h / fh, ow = w / fw;
    const double inv = 1.0 / (static_cast<double>(fh) * fw);
    const auto& xv = x.values();
    std::vector<double> out(static_cast<std::size_t>(c) * oh * ow, 0.0);
    for (int ch = 0; ch < c; ++ch)
        for (int iy = 0; iy < h; ++iy) {
            const double* src = xv.data() + (static_cast<std::ptrdiff_t>(ch) * h + iy) * w;
            double* dst = out.data() + (static_cast<std::ptrdiff_t>(ch) * oh + iy / fh) * ow;
            for (int ix = 0; ix < w; ++ix) dst[ix / fw] += src[ix] * inv;
        }
    Tensor r({c, oh, ow}, std::move(out));
    if (grad_enabled() && x.node()) {
        auto nx = x.node();
        auto n = detail::make_node(r.numel(), {nx});
        n->backprop = [nx, c, h, w, fh, fw, oh, ow, inv](const std::vector<double>& g) {
            for (int ch = 0; ch < c; ++ch)
                for (int iy = 0; iy < h; ++iy) {
                    double* dst = nx->grad.data() + (static_cast<std::ptrdiff_t>(ch) * h + iy) * w;
                    const double* src = g.data() + (static_cast<std::ptrdiff_t>(ch) * oh + iy / fh) * ow;
                    for (int ix = 0; ix < w; ++ix) dst[ix] += src[ix / fw] * inv;
                }
        };
        r.attach(n);
    }
    return r;
}

// Group normalization without affine parameters; channels are split into
// `groups` contiguous groups, each standardized over its channels and pixels.
inline Tensor group_norm(const Tensor& x, int groups, double eps = 1e-5) {
    detail::check_rank("group_norm", x, 3);
    const int c = x.dim(0), h = x.dim(1), w = x.dim(2);
    if (groups < 1 || c % groups != 0)
        throw DimensionError("group_norm: " + std::to_string(groups) +
                             " groups do not divide channels of " + x.shape_string());
    const int gsize = (c / groups) * h * w;
    const auto& xv = x.values();
    std::vector<double> out(xv.size());
    for (int g = 0; g < groups; ++g) {
        const double* src = xv.data() + static_cast<std::ptrdiff_t>(g) * gsize;
        double* dst = out.data() + static_cast<std::ptrdiff_t>(g) * gsize;
        double mu = 0.0;
        for (int i = 0; i < gsize; ++i) mu += src[i];
        mu /= gsize;
        double var = 0.0;
        for (int i = 0; i < gsize; ++i) {
            double d = src[i] - mu;
            var += d * d;
        }
        var /= gsize;
        double rstd = 1.0 / std::sqrt(var + eps);
        for (int i = 0; i < gsize; ++i) dst[i] = (src[i] - mu) * rstd;
    }
    Tensor r(x.shape(), std::move(out));
    if (grad_enabled() && x.node()) {
        auto nx = x.node();
        auto xd = x.data_ptr();
        auto rd = r.data_ptr();
        auto n = detail::make_node(r.numel(), {nx});
        n->backprop = [nx, xd, rd, groups, gsize, eps](const std::vector<double>& g) {
            for (int grp = 0; grp < groups; ++grp) {
                const double* src = xd->data() + static_cast<std::ptrdiff_t>(grp) * gsize;
                const double* y = rd->data() + static_cast<std::ptrdiff_t>(grp) * gsize;
                const double* gout = g.data() + static_cast<std::ptrdiff_t>(grp) * gsize;
                double* din = nx->grad.data() + static_cast<std::ptrdiff_t>(grp) * gsize;
                double mu = 0.0;
                for (int i = 0; i < gsize; ++i) mu += src[i];
                mu /= gsize;
                double var = 0.0;
                for (int i = 0; i < gsize; ++i) {
                    double d = src[i] - mu;
                    var += d * d;
                }
                var /= gsize;
                double rstd = 1.0 / std::sqrt(var + eps);
                double gmean = 0.0, gymean = 0.0;
                for (int i = 0; i < gsize; ++i) {
                    gmean += gout[i];
                    gymean += gout[i] * y[i];
                }
                gmean /= gsize;
                gymean /= gsize;
                for (int i = 0; i < gsize; ++i)
                    din[i] += rstd * (gout[i] - gmean - y[i] * gymean);
            }
        };
        r.attach(n);
    }
    return r;
}

// Extracts the (ah x aw) region at (y0, x0) of channel c from a CHW tensor.
inline Tensor slice_region(const Tensor& x, int c, int y0, int x0, int ah, int aw) {
    detail::check_rank("slice_region", x, 3);
    const int ch = x.dim(0), h = x.dim(1), w = x.dim(2);
    if (c < 0 || c >= ch || y0 < 0 || x0 < 0 || y0 + ah > h || x0 + aw > w)
        throw DimensionError("slice_region: region out of bounds of " + x.shape_string());
    const auto& xv = x.values();
    std::vector<double> out(static_cast<std::size_t>(ah) * aw);
    for (int y = 0; y < ah; ++y)
        std::copy(xv.begin() + (static_cast<std::ptrdiff_t>(c) * h + y0 + y) * w + x0,
                  xv.begin() + (static_cast<std::ptrdiff_t>(c) * h + y0 + y) * w + x0 + aw,
                  out.begin() + static_cast<std::ptrdiff_t>(y) * aw);
    Tensor r({ah, aw}, std::move(out));
    if (grad_enabled() && x.node()) {
        auto nx = x.node();
        auto n = detail::make_node(r.numel(), {nx});
        n->backprop = [nx, c, y0, x0, ah, aw, h, w](const std::vector<double>& g) {
            for (int y = 0; y < ah; ++y) {
                double* dst = nx->grad.data() + (static_cast<std::ptrdiff_t>(c) * h + y0 + y) * w + x0;
                const double* src = g.data() + static_cast<std::ptrdiff_t>(y) * aw;
                for (int x2 = 0; x2 < aw; ++x2) dst[x2] += src[x2];
            }
        };
        r.attach(n);
    }
    return r;
}

// Reassembles a CHW tensor from tiles of size (th x tw), ordered channel-major
// then tile-row-major. Inverse of slicing every tile with slice_region.
inline Tensor stack_tiles(const std::vector<Tensor>& tiles, int c, int h, int w) {
    if (tiles.empty()) throw DimensionError("stack_tiles: no tiles");
    detail::check_rank("stack_tiles", tiles[0], 2);
    const int th = tiles[0].dim(0), tw = tiles[0].dim(1);
    if (h % th != 0 || w % tw != 0)
        throw DimensionError("stack_tiles: tile size does not divide output grid");
    const int ty = h / th, tx = w / tw;
    if (static_cast<int>(tiles.size()) != c * ty * tx)
        throw DimensionError("stack_tiles: expected " + std::to_string(c * ty * tx) +
                             " tiles, got " + std::to_string(tiles.size()));
    std::vector<double> out(static_cast<std::size_t>(c) * h * w);
    for (int ch = 0; ch < c; ++ch)
        for (int i = 0; i < ty; ++i)
            for (int j = 0; j < tx; ++j) {
                const Tensor& t = tiles[static_cast<std::size_t>((ch * ty + i) * tx + j)];
                if (t.dim(0) != th || t.dim(1) != tw)
                    throw DimensionError("stack_tiles: inconsistent tile shape " + t.shape_string());
                const auto& tv = t.values();
                for (int y = 0; y < th; ++y)
                    std::copy(tv.begin() + static_cast<std::ptrdiff_t>(y) * tw,
                              tv.begin() + static_cast<std::ptrdiff_t>(y + 1) * tw,
                              out.begin() + (static_cast<std::ptrdiff_t>(ch) * h + i * th + y) * w + j * tw);
            }
    Tensor r({c, h, w}, std::move(out));

    bool tracked = false;
    for (const auto& t : tiles) tracked = tracked || (t.node() != nullptr);
    if (grad_enabled() && tracked) {
        std::vector<std::shared_ptr<detail::GraphNode>> ns;
        ns.reserve(tiles.size());
        for (const auto& t : tiles) ns.push_back(t.node());
        auto n = detail::make_node_vec(r.numel(), ns);
        n->backprop = [ns, c, h, w, th, tw, ty, tx](const std::vector<double>& g) {
            for (int ch = 0; ch < c; ++ch)
                for (int i = 0; i < ty; ++i)
                    for (int j = 0; j < tx; ++j) {
                        const auto& np = ns[static_cast<std::size_t>((ch * ty + i) * tx + j)];
                        if (!np) continue;
                        for (int y = 0; y < th; ++y) {
                            const double* src = g.data() + (static_cast<std::ptrdiff_t>(ch) * h + i * th + y) * w + j * tw;
                            double* dst = np->grad.data() + static_cast<std::ptrdiff_t>(y) * tw;
                            for (int x2 = 0; x2 < tw; ++x2) dst[x2] += src[x2];
                        }
                    }
        };
        r.attach(n);
    }
    return r;
}

}  // namespace stsr
