#include <gtest/gtest.h>

#include "minelab/autodiff.hpp"
#include "minelab/rng.hpp"

using namespace minelab;
namespace a = minelab::ad;

namespace {

// central finite difference of a scalar function of one leaf tensor
Tensor fd_grad(const std::function<double(const Tensor&)>& f, Tensor x, double h = 1e-6) {
    Tensor g(x.shape);
    for (int64_t i = 0; i < x.numel(); ++i) {
        double keep = x.data[i];
        x.data[i] = keep + h;
        double fp = f(x);
        x.data[i] = keep - h;
        double fm = f(x);
        x.data[i] = keep;
        g.data[i] = (fp - fm) / (2 * h);
    }
    return g;
}

void expect_close(const Tensor& a, const Tensor& b, double tol) {
    ASSERT_EQ(a.shape, b.shape);
    for (int64_t i = 0; i < a.numel(); ++i)
        EXPECT_NEAR(a.data[i], b.data[i], tol) << "at " << i;
}

}  // namespace

TEST(Autodiff, DenseChainGradMatchesFiniteDifference) {
    Rng rng(7);
    Tensor x0 = rng.normal_tensor({3, 4});
    Tensor w0 = rng.normal_tensor({4, 5});
    Tensor b0 = rng.normal_tensor({1, 5});

    auto loss_of = [&](const Tensor& wt) {
        a::Var x = a::constant(x0);
        a::Var w = a::constant(wt);
        a::Var b = a::constant(b0);
        a::Var y = a::tanh_(a::add(a::matmul(x, w), a::tile_rows(b, 3)));
        return a::mean(a::mul(y, y))->value.item();
    };

    a::Var x = a::constant(x0);
    a::Var w = a::leaf(w0);
    a::Var b = a::leaf(b0);
    a::Var y = a::tanh_(a::add(a::matmul(x, w), a::tile_rows(b, 3)));
    a::Var loss = a::mean(a::mul(y, y));
    auto g = a::grad(loss, {w, b});

    expect_close(g[0]->value, fd_grad(loss_of, w0), 1e-7);
}

TEST(Autodiff, ConvGradMatchesFiniteDifference) {
    Rng rng(11);
    a::ConvGeom geom{2, 5, 5, 3, 3, 2, 1};
    Tensor x0 = rng.normal_tensor({2, 2 * 5 * 5});
    Tensor w0 = rng.normal_tensor({geom.patch(), 3});

    auto run = [&](const Tensor& xt, const Tensor& wt) {
        a::Var x = a::leaf(xt);
        a::Var w = a::leaf(wt);
        a::Var cols = a::im2col(x, geom);
        a::Var y = a::leaky_relu(a::matmul(cols, w));
        a::Var img = a::nhwc_to_nchw(y, 2, geom.out_h(), geom.out_w(), 3);
        return std::tuple{x, w, a::mean(a::mul(img, img))};
    };

    auto [x, w, loss] = run(x0, w0);
    auto g = a::grad(loss, {x, w});
    expect_close(g[0]->value,
                 fd_grad([&](const Tensor& t) { return std::get<2>(run(t, w0))->value.item(); }, x0),
                 1e-7);
    expect_close(g[1]->value,
                 fd_grad([&](const Tensor& t) { return std::get<2>(run(x0, t))->value.item(); }, w0),
                 1e-7);
}

TEST(Autodiff, UpsampleGatherSumRowsGrads) {
    Rng rng(3);
    Tensor x0 = rng.normal_tensor({2, 1 * 2 * 2});
    auto f = [&](const Tensor& xt) {
        a::Var x = a::leaf(xt);
        a::Var up = a::upsample_nearest(x, 1, 2, 2, 2);
        a::Var gathered = a::gather_rows(up, {1, 0, 1});
        a::Var s = a::sum_cols(a::mul(gathered, gathered));
        return std::pair{x, a::sum(s)};
    };
    auto [x, loss] = f(x0);
    auto g = a::grad(loss, {x});
    expect_close(g[0]->value,
                 fd_grad([&](const Tensor& t) { return f(t).second->value.item(); }, x0), 1e-6);
}

TEST(Autodiff, SecondOrderQuadraticHvp) {
    // L(w) = 0.5 w^T A w with A = diag(1, 2): g = Aw, Hg = A^2 w
    Tensor w0({1, 2}, {1.0, 1.0});
    a::Var w = a::leaf(w0);
    a::Var coeff = a::constant(Tensor({1, 2}, {1.0, 2.0}));
    a::Var loss = a::scale(a::sum(a::mul(coeff, a::mul(w, w))), 0.5);

    auto g = a::grad(loss, {w});  // g = (1, 2)
    EXPECT_DOUBLE_EQ(g[0]->value.data[0], 1.0);
    EXPECT_DOUBLE_EQ(g[0]->value.data[1], 2.0);

    // directional derivative of g along v = g (detached) -> Hg
    a::Var v = a::detach(g[0]);
    a::Var dot = a::sum(a::mul(g[0], v));
    auto hg = a::grad(dot, {w});
    EXPECT_DOUBLE_EQ(hg[0]->value.data[0], 1.0);
    EXPECT_DOUBLE_EQ(hg[0]->value.data[1], 4.0);
}

TEST(Autodiff, SecondOrderThroughNonlinearity) {
    // f(w) = tanh(w)^2, check d/dw of (df/dw) by finite differences
    auto first = [](double wv) {
        a::Var w = a::leaf(Tensor::scalar(wv));
        a::Var y = a::tanh_(w);
        a::Var loss = a::mul(y, y);
        return a::grad(loss, {w})[0];
    };
    double w0 = 0.37;
    a::Var w = a::leaf(Tensor::scalar(w0));
    a::Var y = a::tanh_(w);
    a::Var loss = a::mul(y, y);
    a::Var g = a::grad(loss, {w})[0];
    a::Var g2 = a::grad(a::sum(g), {w})[0];

    double h = 1e-5;
    double fd = (first(w0 + h)->value.item() - first(w0 - h)->value.item()) / (2 * h);
    EXPECT_NEAR(g2->value.item(), fd, 1e-6);
}

TEST(Autodiff, GradAccumulatesAcrossSharedSubgraph) {
    a::Var w = a::leaf(Tensor::scalar(3.0));
    a::Var y = a::mul(w, w);        // w^2
    a::Var z = a::add(y, a::mul(y, w));  // w^2 + w^3
    auto g = a::grad(z, {w});
    EXPECT_DOUBLE_EQ(g[0]->value.item(), 2 * 3.0 + 3 * 9.0);
}

TEST(Autodiff, GatherScatterRoundTripAndConcat) {
    Tensor x({3, 2}, {1, 2, 3, 4, 5, 6});
    a::Var v = a::constant(x);
    a::Var g = a::gather_rows(v, {2, 2, 0});
    EXPECT_EQ(g->value.at(0, 0), 5);
    EXPECT_EQ(g->value.at(1, 1), 6);
    EXPECT_EQ(g->value.at(2, 0), 1);

    a::Var c = a::concat_rows(v, g);
    EXPECT_EQ(c->value.rows(), 6);
    EXPECT_EQ(c->value.at(3, 0), 5);
}

TEST(Autodiff, ShapeMismatchThrows) {
    a::Var x = a::constant(Tensor::zeros({2, 3}));
    a::Var y = a::constant(Tensor::zeros({3, 3}));
    EXPECT_THROW(a::add(x, y), std::invalid_argument);
    EXPECT_THROW(a::matmul(x, x), std::invalid_argument);
}
