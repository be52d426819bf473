#pragma once

// Reverse-mode autodiff over Tensor with graph-building backward rules.
// Gradients are themselves Vars, so second-order quantities (gradient
// penalty training, Hessian-vector products) fall out of a second grad()
// call over the gradient graph.

#include <Eigen/Dense>
#include <functional>
#include <memory>
#include <unordered_map>
#include <unordered_set>

#include "minelab/tensor.hpp"

namespace minelab::ad {

struct Node;
using Var = std::shared_ptr<Node>;

struct Node {
    Tensor value;
    bool requires_grad = false;
    std::vector<Var> parents;
    // Produces one grad Var per parent (null for parents without grad).
    std::function<std::vector<Var>(const Var& self, const Var& g)> backward;

    explicit Node(Tensor v) : value(std::move(v)) {}
};

inline Var constant(Tensor t) { return std::make_shared<Node>(std::move(t)); }
inline Var constant_scalar(double v) { return constant(Tensor::scalar(v)); }

inline Var leaf(Tensor t) {
    Var n = std::make_shared<Node>(std::move(t));
    n->requires_grad = true;
    return n;
}

inline Var make_op(Tensor value, std::vector<Var> parents,
                   std::function<std::vector<Var>(const Var&, const Var&)> bw) {
    Var n = std::make_shared<Node>(std::move(value));
    n->parents = std::move(parents);
    for (const auto& p : n->parents)
        if (p && p->requires_grad) n->requires_grad = true;
    if (n->requires_grad) n->backward = std::move(bw);
    return n;
}

// ---------------------------------------------------------------------------
// elementwise and scalar ops

Var add(const Var& a, const Var& b);
Var sub(const Var& a, const Var& b);
Var mul(const Var& a, const Var& b);
Var div(const Var& a, const Var& b);
Var neg(const Var& a);
Var scale(const Var& a, double s);
Var add_scalar(const Var& a, double s);

inline Var add(const Var& a, const Var& b) {
    check_same_shape(a->value, b->value, "add");
    Tensor out = a->value;
    for (int64_t i = 0; i < out.numel(); ++i) out.data[i] += b->value.data[i];
    return make_op(std::move(out), {a, b}, [](const Var&, const Var& g) {
        return std::vector<Var>{g, g};
    });
}

inline Var neg(const Var& a) {
    Tensor out = a->value;
    for (double& v : out.data) v = -v;
    return make_op(std::move(out), {a}, [](const Var&, const Var& g) {
        return std::vector<Var>{neg(g)};
    });
}

inline Var sub(const Var& a, const Var& b) {
    check_same_shape(a->value, b->value, "sub");
    Tensor out = a->value;
    for (int64_t i = 0; i < out.numel(); ++i) out.data[i] -= b->value.data[i];
    return make_op(std::move(out), {a, b}, [](const Var&, const Var& g) {
        return std::vector<Var>{g, neg(g)};
    });
}

inline Var mul(const Var& a, const Var& b) {
    check_same_shape(a->value, b->value, "mul");
    Tensor out = a->value;
    for (int64_t i = 0; i < out.numel(); ++i) out.data[i] *= b->value.data[i];
    return make_op(std::move(out), {a, b}, [a, b](const Var&, const Var& g) {
        return std::vector<Var>{mul(g, b), mul(g, a)};
    });
}

inline Var div(const Var& a, const Var& b) {
    check_same_shape(a->value, b->value, "div");
    Tensor out = a->value;
    for (int64_t i = 0; i < out.numel(); ++i) out.data[i] /= b->value.data[i];
    return make_op(std::move(out), {a, b}, [a, b](const Var&, const Var& g) {
        Var ga = div(g, b);
        Var gb = neg(div(mul(g, a), mul(b, b)));
        return std::vector<Var>{ga, gb};
    });
}

inline Var scale(const Var& a, double s) {
    Tensor out = a->value;
    for (double& v : out.data) v *= s;
    return make_op(std::move(out), {a}, [s](const Var&, const Var& g) {
        return std::vector<Var>{scale(g, s)};
    });
}

inline Var add_scalar(const Var& a, double s) {
    Tensor out = a->value;
    for (double& v : out.data) v += s;
    return make_op(std::move(out), {a}, [](const Var&, const Var& g) {
        return std::vector<Var>{g};
    });
}

// ---------------------------------------------------------------------------
// activations / pointwise nonlinear

inline Var relu(const Var& a) {
    Tensor out = a->value;
    Tensor mask(out.shape);
    for (int64_t i = 0; i < out.numel(); ++i) {
        mask.data[i] = out.data[i] > 0.0 ? 1.0 : 0.0;
        out.data[i] = std::max(0.0, out.data[i]);
    }
    Var cmask = constant(std::move(mask));
    return make_op(std::move(out), {a}, [cmask](const Var&, const Var& g) {
        return std::vector<Var>{mul(g, cmask)};
    });
}

inline Var leaky_relu(const Var& a, double alpha = 0.2) {
    Tensor out = a->value;
    Tensor mask(out.shape);
    for (int64_t i = 0; i < out.numel(); ++i) {
        bool pos = out.data[i] > 0.0;
        mask.data[i] = pos ? 1.0 : alpha;
        if (!pos) out.data[i] *= alpha;
    }
    Var cmask = constant(std::move(mask));
    return make_op(std::move(out), {a}, [cmask](const Var&, const Var& g) {
        return std::vector<Var>{mul(g, cmask)};
    });
}

inline Var tanh_(const Var& a) {
    Tensor out = a->value;
    for (double& v : out.data) v = std::tanh(v);
    return make_op(std::move(out), {a}, [](const Var& self, const Var& g) {
        // d tanh = 1 - y^2, kept in the graph for double backward
        Var one_minus_y2 = add_scalar(neg(mul(self, self)), 1.0);
        return std::vector<Var>{mul(g, one_minus_y2)};
    });
}

inline Var exp_(const Var& a) {
    Tensor out = a->value;
    for (double& v : out.data) v = std::exp(v);
    return make_op(std::move(out), {a}, [](const Var& self, const Var& g) {
        return std::vector<Var>{mul(g, self)};
    });
}

inline Var log_(const Var& a) {
    Tensor out = a->value;
    for (double& v : out.data) v = std::log(v);
    return make_op(std::move(out), {a}, [a](const Var&, const Var& g) {
        return std::vector<Var>{div(g, a)};
    });
}

/// sqrt(x + eps); eps keeps the derivative finite at exactly-zero inputs
/// (gradient-norm penalties hit this with degenerate critics).
inline Var sqrt_(const Var& a, double eps = 1e-12) {
    Tensor out = a->value;
    for (double& v : out.data) v = std::sqrt(v + eps);
    return make_op(std::move(out), {a}, [](const Var& self, const Var& g) {
        return std::vector<Var>{div(scale(g, 0.5), self)};
    });
}

inline Var square(const Var& a) { return mul(a, a); }

// ---------------------------------------------------------------------------
// shape ops

inline Var reshape(const Var& a, Shape s) {
    if (shape_numel(s) != a->value.numel())
        throw std::invalid_argument("reshape: numel mismatch " + shape_str(a->value.shape) +
                                    " -> " + shape_str(s));
    Tensor out(std::move(s), a->value.data);
    Shape back = a->value.shape;
    return make_op(std::move(out), {a}, [back](const Var&, const Var& g) {
        return std::vector<Var>{reshape(g, back)};
    });
}

inline Var transpose(const Var& a) {
    const Tensor& x = a->value;
    assert(x.shape.size() == 2);
    Tensor out({x.cols(), x.rows()});
    for (int64_t r = 0; r < x.rows(); ++r)
        for (int64_t c = 0; c < x.cols(); ++c) out.at(c, r) = x.at(r, c);
    return make_op(std::move(out), {a}, [](const Var&, const Var& g) {
        return std::vector<Var>{transpose(g)};
    });
}

// ---------------------------------------------------------------------------
// reductions / broadcasts

Var broadcast_scalar(const Var& a, const Shape& s);

inline Var sum(const Var& a) {
    double s = 0.0;
    for (double v : a->value.data) s += v;
    Shape back = a->value.shape;
    return make_op(Tensor::scalar(s), {a}, [back](const Var&, const Var& g) {
        return std::vector<Var>{broadcast_scalar(g, back)};
    });
}

inline Var broadcast_scalar(const Var& a, const Shape& s) {
    assert(a->value.numel() == 1);
    Tensor out = Tensor::full(s, a->value.data[0]);
    return make_op(std::move(out), {a}, [](const Var&, const Var& g) {
        return std::vector<Var>{sum(g)};
    });
}

inline Var mean(const Var& a) { return scale(sum(a), 1.0 / static_cast<double>(a->value.numel())); }

Var tile_rows(const Var& a, int64_t n);

/// [n,m] -> [1,m] column sums.
inline Var sum_rows(const Var& a) {
    const Tensor& x = a->value;
    assert(x.shape.size() == 2);
    Tensor out({1, x.cols()});
    for (int64_t r = 0; r < x.rows(); ++r)
        for (int64_t c = 0; c < x.cols(); ++c) out.data[c] += x.at(r, c);
    int64_t n = x.rows();
    return make_op(std::move(out), {a}, [n](const Var&, const Var& g) {
        return std::vector<Var>{tile_rows(g, n)};
    });
}

/// [1,m] -> [n,m] row replication.
inline Var tile_rows(const Var& a, int64_t n) {
    const Tensor& x = a->value;
    assert(x.shape.size() == 2 && x.rows() == 1);
    Tensor out({n, x.cols()});
    for (int64_t r = 0; r < n; ++r)
        for (int64_t c = 0; c < x.cols(); ++c) out.at(r, c) = x.data[c];
    return make_op(std::move(out), {a}, [](const Var&, const Var& g) {
        return std::vector<Var>{sum_rows(g)};
    });
}

Var tile_cols(const Var& a, int64_t m);

/// [n,m] -> [n,1] row sums.
inline Var sum_cols(const Var& a) {
    const Tensor& x = a->value;
    assert(x.shape.size() == 2);
    Tensor out({x.rows(), 1});
    for (int64_t r = 0; r < x.rows(); ++r)
        for (int64_t c = 0; c < x.cols(); ++c) out.data[r] += x.at(r, c);
    int64_t m = x.cols();
    return make_op(std::move(out), {a}, [m](const Var&, const Var& g) {
        return std::vector<Var>{tile_cols(g, m)};
    });
}

/// [n,1] -> [n,m] column replication.
inline Var tile_cols(const Var& a, int64_t m) {
    const Tensor& x = a->value;
    assert(x.shape.size() == 2 && x.cols() == 1);
    Tensor out({x.rows(), m});
    for (int64_t r = 0; r < x.rows(); ++r)
        for (int64_t c = 0; c < m; ++c) out.at(r, c) = x.data[r];
    return make_op(std::move(out), {a}, [](const Var&, const Var& g) {
        return std::vector<Var>{sum_cols(g)};
    });
}

// ---------------------------------------------------------------------------
// matmul (Eigen-backed)

using EigenMap = Eigen::Map<const Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>>;
using EigenMapMut = Eigen::Map<Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>>;

inline Var matmul(const Var& a, const Var& b) {
    const Tensor& x = a->value;
    const Tensor& y = b->value;
    assert(x.shape.size() == 2 && y.shape.size() == 2);
    if (x.cols() != y.rows())
        throw std::invalid_argument("matmul: inner dim mismatch " + shape_str(x.shape) +
                                    " x " + shape_str(y.shape));
    Tensor out({x.rows(), y.cols()});
    EigenMap mx(x.data.data(), x.rows(), x.cols());
    EigenMap my(y.data.data(), y.rows(), y.cols());
    EigenMapMut mo(out.data.data(), out.rows(), out.cols());
    mo.noalias() = mx * my;
    return make_op(std::move(out), {a, b}, [a, b](const Var&, const Var& g) {
        return std::vector<Var>{matmul(g, transpose(b)), matmul(transpose(a), g)};
    });
}

// ---------------------------------------------------------------------------
// convolution geometry: im2col / col2im / upsample / layout permutation

struct ConvGeom {
    int64_t channels = 1, height = 0, width = 0;
    int64_t kh = 3, kw = 3, stride = 1, pad = 1;
    int64_t out_h() const { return (height + 2 * pad - kh) / stride + 1; }
    int64_t out_w() const { return (width + 2 * pad - kw) / stride + 1; }
    int64_t patch() const { return channels * kh * kw; }
};

Var col2im(const Var& a, ConvGeom geom, int64_t batch);

/// x: [B, C*H*W] -> [B*OH*OW, C*KH*KW]
inline Var im2col(const Var& a, ConvGeom geom) {
    const Tensor& x = a->value;
    assert(x.shape.size() == 2);
    assert(x.cols() == geom.channels * geom.height * geom.width);
    int64_t B = x.rows(), OH = geom.out_h(), OW = geom.out_w();
    Tensor out({B * OH * OW, geom.patch()});
    for (int64_t b = 0; b < B; ++b) {
        const double* img = x.data.data() + b * x.cols();
        for (int64_t oy = 0; oy < OH; ++oy)
            for (int64_t ox = 0; ox < OW; ++ox) {
                double* row = out.data.data() + ((b * OH + oy) * OW + ox) * geom.patch();
                for (int64_t c = 0; c < geom.channels; ++c)
                    for (int64_t ky = 0; ky < geom.kh; ++ky)
                        for (int64_t kx = 0; kx < geom.kw; ++kx) {
                            int64_t iy = oy * geom.stride - geom.pad + ky;
                            int64_t ix = ox * geom.stride - geom.pad + kx;
                            double v = 0.0;
                            if (iy >= 0 && iy < geom.height && ix >= 0 && ix < geom.width)
                                v = img[(c * geom.height + iy) * geom.width + ix];
                            row[(c * geom.kh + ky) * geom.kw + kx] = v;
                        }
            }
    }
    int64_t batch = B;
    return make_op(std::move(out), {a}, [geom, batch](const Var&, const Var& g) {
        return std::vector<Var>{col2im(g, geom, batch)};
    });
}

/// Adjoint of im2col: [B*OH*OW, C*KH*KW] -> [B, C*H*W] (scatter-add).
inline Var col2im(const Var& a, ConvGeom geom, int64_t batch) {
    const Tensor& x = a->value;
    int64_t OH = geom.out_h(), OW = geom.out_w();
    assert(x.rows() == batch * OH * OW && x.cols() == geom.patch());
    Tensor out({batch, geom.channels * geom.height * geom.width});
    for (int64_t b = 0; b < batch; ++b) {
        double* img = out.data.data() + b * out.cols();
        for (int64_t oy = 0; oy < OH; ++oy)
            for (int64_t ox = 0; ox < OW; ++ox) {
                const double* row = x.data.data() + ((b * OH + oy) * OW + ox) * geom.patch();
                for (int64_t c = 0; c < geom.channels; ++c)
                    for (int64_t ky = 0; ky < geom.kh; ++ky)
                        for (int64_t kx = 0; kx < geom.kw; ++kx) {
                            int64_t iy = oy * geom.stride - geom.pad + ky;
                            int64_t ix = ox * geom.stride - geom.pad + kx;
                            if (iy >= 0 && iy < geom.height && ix >= 0 && ix < geom.width)
                                img[(c * geom.height + iy) * geom.width + ix] +=
                                    row[(c * geom.kh + ky) * geom.kw + kx];
                        }
            }
    }
    return make_op(std::move(out), {a}, [geom](const Var&, const Var& g) {
        return std::vector<Var>{im2col(g, geom)};
    });
}

Var nchw_to_nhwc(const Var& a, int64_t B, int64_t C, int64_t H, int64_t W);

/// [B*H*W, C] (rows in b,y,x order) -> [B, C*H*W]
inline Var nhwc_to_nchw(const Var& a, int64_t B, int64_t H, int64_t W, int64_t C) {
    const Tensor& x = a->value;
    assert(x.rows() == B * H * W && x.cols() == C);
    Tensor out({B, C * H * W});
    for (int64_t b = 0; b < B; ++b)
        for (int64_t y = 0; y < H; ++y)
            for (int64_t xx = 0; xx < W; ++xx)
                for (int64_t c = 0; c < C; ++c)
                    out.data[b * C * H * W + (c * H + y) * W + xx] =
                        x.data[((b * H + y) * W + xx) * C + c];
    return make_op(std::move(out), {a}, [B, C, H, W](const Var&, const Var& g) {
        return std::vector<Var>{nchw_to_nhwc(g, B, C, H, W)};
    });
}

/// [B, C*H*W] -> [B*H*W, C]
inline Var nchw_to_nhwc(const Var& a, int64_t B, int64_t C, int64_t H, int64_t W) {
    const Tensor& x = a->value;
    assert(x.rows() == B && x.cols() == C * H * W);
    Tensor out({B * H * W, C});
    for (int64_t b = 0; b < B; ++b)
        for (int64_t y = 0; y < H; ++y)
            for (int64_t xx = 0; xx < W; ++xx)
                for (int64_t c = 0; c < C; ++c)
                    out.data[((b * H + y) * W + xx) * C + c] =
                        x.data[b * C * H * W + (c * H + y) * W + xx];
    return make_op(std::move(out), {a}, [B, C, H, W](const Var&, const Var& g) {
        return std::vector<Var>{nhwc_to_nchw(g, B, H, W, C)};
    });
}

Var downsample_sum(const Var& a, int64_t C, int64_t H, int64_t W, int64_t f);

/// Nearest-neighbour upsample of [B, C*H*W] by integer factor f.
inline Var upsample_nearest(const Var& a, int64_t C, int64_t H, int64_t W, int64_t f) {
    const Tensor& x = a->value;
    assert(x.cols() == C * H * W);
    int64_t B = x.rows(), H2 = H * f, W2 = W * f;
    Tensor out({B, C * H2 * W2});
    for (int64_t b = 0; b < B; ++b)
        for (int64_t c = 0; c < C; ++c)
            for (int64_t y = 0; y < H2; ++y)
                for (int64_t xx = 0; xx < W2; ++xx)
                    out.data[b * C * H2 * W2 + (c * H2 + y) * W2 + xx] =
                        x.data[b * C * H * W + (c * H + y / f) * W + xx / f];
    return make_op(std::move(out), {a}, [C, H, W, f](const Var&, const Var& g) {
        return std::vector<Var>{downsample_sum(g, C, H * f, W * f, f)};
    });
}

/// Adjoint of upsample_nearest: sum-pool [B, C*H*W] by factor f.
inline Var downsample_sum(const Var& a, int64_t C, int64_t H, int64_t W, int64_t f) {
    const Tensor& x = a->value;
    assert(x.cols() == C * H * W && H % f == 0 && W % f == 0);
    int64_t B = x.rows(), H2 = H / f, W2 = W / f;
    Tensor out({B, C * H2 * W2});
    for (int64_t b = 0; b < B; ++b)
        for (int64_t c = 0; c < C; ++c)
            for (int64_t y = 0; y < H; ++y)
                for (int64_t xx = 0; xx < W; ++xx)
                    out.data[b * C * H2 * W2 + (c * H2 + y / f) * W2 + xx / f] +=
                        x.data[b * C * H * W + (c * H + y) * W + xx];
    return make_op(std::move(out), {a}, [C, H2, W2, f](const Var&, const Var& g) {
        return std::vector<Var>{upsample_nearest(g, C, H2, W2, f)};
    });
}

// ---------------------------------------------------------------------------
// row selection (supersample routing)

Var scatter_rows(const Var& a, const std::vector<int64_t>& idx, int64_t n);

/// Gather rows of a [n,m] matrix: out[j] = a[idx[j]].
inline Var gather_rows(const Var& a, std::vector<int64_t> idx) {
    const Tensor& x = a->value;
    assert(x.shape.size() == 2);
    Tensor out({static_cast<int64_t>(idx.size()), x.cols()});
    for (size_t j = 0; j < idx.size(); ++j) {
        assert(idx[j] >= 0 && idx[j] < x.rows());
        std::copy_n(x.data.data() + idx[j] * x.cols(), x.cols(),
                    out.data.data() + static_cast<int64_t>(j) * x.cols());
    }
    int64_t n = x.rows();
    return make_op(std::move(out), {a}, [idx = std::move(idx), n](const Var&, const Var& g) {
        return std::vector<Var>{scatter_rows(g, idx, n)};
    });
}

/// Adjoint of gather_rows: out[idx[j]] += a[j].
inline Var scatter_rows(const Var& a, const std::vector<int64_t>& idx, int64_t n) {
    const Tensor& x = a->value;
    assert(x.rows() == static_cast<int64_t>(idx.size()));
    Tensor out({n, x.cols()});
    for (size_t j = 0; j < idx.size(); ++j)
        for (int64_t c = 0; c < x.cols(); ++c)
            out.data[idx[j] * x.cols() + c] += x.at(static_cast<int64_t>(j), c);
    return make_op(std::move(out), {a}, [idx](const Var&, const Var& g) {
        return std::vector<Var>{gather_rows(g, idx)};
    });
}

inline Var concat_rows(const Var& a, const Var& b) {
    const Tensor& x = a->value;
    const Tensor& y = b->value;
    assert(x.shape.size() == 2 && y.shape.size() == 2 && x.cols() == y.cols());
    Tensor out({x.rows() + y.rows(), x.cols()});
    std::copy(x.data.begin(), x.data.end(), out.data.begin());
    std::copy(y.data.begin(), y.data.end(), out.data.begin() + x.numel());
    int64_t na = x.rows(), nb = y.rows();
    return make_op(std::move(out), {a, b}, [na, nb](const Var&, const Var& g) {
        std::vector<int64_t> ia(na), ib(nb);
        for (int64_t i = 0; i < na; ++i) ia[i] = i;
        for (int64_t i = 0; i < nb; ++i) ib[i] = na + i;
        return std::vector<Var>{gather_rows(g, ia), gather_rows(g, ib)};
    });
}

// ---------------------------------------------------------------------------
// backward pass

/// Gradients of a scalar output w.r.t. each input, as graph nodes. The
/// returned Vars are differentiable again, which is how double backward
/// (gradient penalty, HVP) is obtained.
inline std::vector<Var> grad(const Var& output, const std::vector<Var>& inputs) {
    assert(output->value.numel() == 1);

    // topo order over the requires_grad subgraph
    std::vector<Node*> order;
    std::unordered_map<Node*, Var> holder;  // keep shared ownership by raw key
    holder[output.get()] = output;
    // iterative post-order
    struct Frame { Node* n; size_t child = 0; };
    std::vector<Frame> fs{{output.get(), 0}};
    std::unordered_set<Node*> opened;
    opened.insert(output.get());
    while (!fs.empty()) {
        Frame& f = fs.back();
        if (f.child < f.n->parents.size()) {
            Var p = f.n->parents[f.child++];
            if (p && p->requires_grad && !opened.count(p.get())) {
                opened.insert(p.get());
                holder[p.get()] = p;
                fs.push_back({p.get(), 0});
            }
        } else {
            order.push_back(f.n);
            fs.pop_back();
        }
    }
    // order is post-order: parents before children; reverse for backward
    std::reverse(order.begin(), order.end());

    std::unordered_map<Node*, Var> grads;
    grads[output.get()] = constant(Tensor::scalar(1.0));

    for (Node* n : order) {
        auto it = grads.find(n);
        if (it == grads.end() || !n->backward) continue;
        Var self = holder[n];
        std::vector<Var> pg = n->backward(self, it->second);
        assert(pg.size() == n->parents.size());
        for (size_t i = 0; i < pg.size(); ++i) {
            const Var& p = n->parents[i];
            if (!p || !p->requires_grad || !pg[i]) continue;
            auto g = grads.find(p.get());
            if (g == grads.end())
                grads[p.get()] = pg[i];
            else
                g->second = add(g->second, pg[i]);
        }
    }

    std::vector<Var> out;
    out.reserve(inputs.size());
    for (const auto& in : inputs) {
        auto it = grads.find(in.get());
        out.push_back(it != grads.end() ? it->second
                                        : constant(Tensor::zeros(in->value.shape)));
    }
    return out;
}

/// Detach: value copied into a fresh constant node (no history).
inline Var detach(const Var& a) { return constant(a->value); }

}  // namespace minelab::ad
