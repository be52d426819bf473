#pragma once

// Network families: latent priors, miners, generators, critics, class
// embeddings and the conditionally-modulated generator. All forwards are
// pure functions of (parameters, input).

#include <map>
#include <optional>

#include "minelab/autodiff.hpp"
#include "minelab/errors.hpp"
#include "minelab/rng.hpp"

namespace minelab {

using ad::Var;

// ---------------------------------------------------------------------------

/// Diagonal-Gaussian input noise distribution.
struct LatentPrior {
    int64_t dim;
    std::vector<double> mean;  // length dim
    double stddev;

    LatentPrior(int64_t dim_, double stddev_ = 1.0)
        : dim(dim_), mean(dim_, 0.0), stddev(stddev_) { validate(); }
    LatentPrior(std::vector<double> mean_, double stddev_ = 1.0)
        : dim(static_cast<int64_t>(mean_.size())), mean(std::move(mean_)), stddev(stddev_) {
        validate();
    }

    void validate() const {
        if (dim <= 0) throw ConfigError("LatentPrior: dim must be positive");
        if (!(stddev > 0.0)) throw ConfigError("LatentPrior: stddev must be > 0");
        for (double m : mean)
            if (!std::isfinite(m)) throw ConfigError("LatentPrior: non-finite mean");
    }

    Tensor sample(Rng& rng, int64_t n) const {
        Tensor t({n, dim});
        for (int64_t r = 0; r < n; ++r)
            for (int64_t c = 0; c < dim; ++c)
                t.at(r, c) = rng.normal(mean[c], stddev);
        return t;
    }
};

// ---------------------------------------------------------------------------
// layers

enum class Activation { linear, relu, leaky_relu, tanh };

inline Var activate(const Var& x, Activation a) {
    switch (a) {
        case Activation::relu: return ad::relu(x);
        case Activation::leaky_relu: return ad::leaky_relu(x);
        case Activation::tanh: return ad::tanh_(x);
        default: return x;
    }
}

struct Dense {
    Var W;  // [in, out]
    Var b;  // [1, out]
    int64_t in = 0, out = 0;

    Dense() = default;
    Dense(int64_t in_, int64_t out_, Rng& rng, double init_std = 0.02)
        : in(in_), out(out_) {
        W = ad::leaf(rng.normal_tensor({in, out}, 0.0, init_std));
        b = ad::leaf(Tensor::zeros({1, out}));
    }

    Var forward(const Var& x) const {
        if (x->value.cols() != in)
            throw ConfigError("Dense: input width " + std::to_string(x->value.cols()) +
                              " != expected " + std::to_string(in));
        return ad::add(ad::matmul(x, W), ad::tile_rows(b, x->value.rows()));
    }
};

struct Conv2d {
    Var W;  // [C*KH*KW, OC]
    Var b;  // [1, OC]
    ad::ConvGeom geom;
    int64_t out_channels = 0;

    Conv2d() = default;
    Conv2d(ad::ConvGeom g, int64_t oc, Rng& rng, double init_std = 0.02)
        : geom(g), out_channels(oc) {
        W = ad::leaf(rng.normal_tensor({g.patch(), oc}, 0.0, init_std));
        b = ad::leaf(Tensor::zeros({1, oc}));
    }

    /// x: [B, C*H*W] -> [B, OC*OH*OW]
    Var forward(const Var& x) const {
        int64_t B = x->value.rows();
        if (x->value.cols() != geom.channels * geom.height * geom.width)
            throw ConfigError("Conv2d: input size mismatch");
        Var cols = ad::im2col(x, geom);
        Var y = ad::add(ad::matmul(cols, W), ad::tile_rows(b, cols->value.rows()));
        return ad::nhwc_to_nchw(y, B, geom.out_h(), geom.out_w(), out_channels);
    }
};

// ---------------------------------------------------------------------------
// parameter bookkeeping

using NamedParams = std::vector<std::pair<std::string, Var>>;

inline std::vector<Var> values_of(const NamedParams& np) {
    std::vector<Var> out;
    out.reserve(np.size());
    for (const auto& [n, v] : np) out.push_back(v);
    return out;
}

inline int64_t param_count(const NamedParams& np) {
    int64_t n = 0;
    for (const auto& [k, v] : np) n += v->value.numel();
    return n;
}

// ---------------------------------------------------------------------------

/// Small fully connected miner M: prior noise u -> generator latent z.
/// Weights start from N(0, 0.01).
struct MinerNet {
    std::vector<Dense> layers;
    std::vector<Activation> acts;  // one per layer
    std::vector<int64_t> widths;

    MinerNet() = default;
    /// widths = {in, hidden..., out}; hidden activations ReLU, last linear.
    MinerNet(std::vector<int64_t> widths_, Rng& rng) : widths(std::move(widths_)) {
        if (widths.size() < 2) throw ConfigError("MinerNet: need at least in/out widths");
        for (size_t i = 0; i + 1 < widths.size(); ++i) {
            layers.emplace_back(widths[i], widths[i + 1], rng, 0.01);
            acts.push_back(i + 2 < widths.size() ? Activation::relu : Activation::linear);
        }
    }

    int64_t in_dim() const { return widths.front(); }
    int64_t out_dim() const { return widths.back(); }

    Var forward(const Var& u) const {
        if (u->value.cols() != in_dim())
            throw ConfigError("MinerNet: input width " + std::to_string(u->value.cols()) +
                              " != miner input " + std::to_string(in_dim()));
        Var h = u;
        for (size_t i = 0; i < layers.size(); ++i) h = activate(layers[i].forward(h), acts[i]);
        return h;
    }

    NamedParams named_params(const std::string& prefix = "miner") const {
        NamedParams np;
        for (size_t i = 0; i < layers.size(); ++i) {
            np.emplace_back(prefix + ".fc" + std::to_string(i) + ".W", layers[i].W);
            np.emplace_back(prefix + ".fc" + std::to_string(i) + ".b", layers[i].b);
        }
        return np;
    }
};

/// Identity miner stand-in: widths ignored, forward is the identity.
/// Used by the plain-finetuning (transfer) baseline.
inline MinerNet identity_miner(int64_t dim, Rng& rng) {
    MinerNet m({dim, dim}, rng);
    Tensor w({dim, dim});
    for (int64_t i = 0; i < dim; ++i) w.at(i, i) = 1.0;
    m.layers[0].W->value = w;
    m.layers[0].b->value = Tensor::zeros({1, dim});
    return m;
}

// ---------------------------------------------------------------------------

struct ImageShape {
    int64_t channels = 1, height = 28, width = 28;
    int64_t numel() const { return channels * height * width; }
    bool operator==(const ImageShape&) const = default;
};

/// Upsampling convolutional generator; tanh output in [-1, 1].
/// latent -> dense to (base*2) x h0 x w0 -> 2x [upsample, conv3x3] -> tanh.
struct GeneratorNet {
    int64_t latent_dim = 128;
    ImageShape out_shape;
    int64_t base_channels = 16;

    Dense fc;
    Conv2d conv1, conv2;
    int64_t h0 = 0, w0 = 0;

    GeneratorNet() = default;
    GeneratorNet(int64_t latent, ImageShape img, int64_t base, Rng& rng)
        : latent_dim(latent), out_shape(img), base_channels(base) {
        h0 = img.height / 4;
        w0 = img.width / 4;
        if (h0 * 4 != img.height || w0 * 4 != img.width)
            throw ConfigError("GeneratorNet: output size must be divisible by 4");
        int64_t c0 = base * 2;
        fc = Dense(latent, c0 * h0 * w0, rng);
        conv1 = Conv2d({c0, h0 * 2, w0 * 2, 3, 3, 1, 1}, base, rng);
        conv2 = Conv2d({base, h0 * 4, w0 * 4, 3, 3, 1, 1}, img.channels, rng);
    }

    Var forward(const Var& z) const {
        if (z->value.cols() != latent_dim)
            throw ConfigError("GeneratorNet: latent width " + std::to_string(z->value.cols()) +
                              " != latent_dim " + std::to_string(latent_dim));
        int64_t c0 = base_channels * 2;
        Var h = ad::leaky_relu(fc.forward(z));
        h = ad::upsample_nearest(h, c0, h0, w0, 2);
        h = ad::leaky_relu(conv1.forward(h));
        h = ad::upsample_nearest(h, base_channels, h0 * 2, w0 * 2, 2);
        return ad::tanh_(conv2.forward(h));
    }

    NamedParams named_params(const std::string& prefix = "gen") const {
        return {{prefix + ".fc.W", fc.W},       {prefix + ".fc.b", fc.b},
                {prefix + ".conv1.W", conv1.W}, {prefix + ".conv1.b", conv1.b},
                {prefix + ".conv2.W", conv2.W}, {prefix + ".conv2.b", conv2.b}};
    }
};

// ---------------------------------------------------------------------------

/// Named group of parameter elements that freeze together (a conv filter,
/// or one output neuron of a dense layer; bias included with its filter).
struct FilterGroup {
    std::string name;
    // (index into the network's params() order, element indices within it)
    std::vector<std::pair<int, std::vector<int64_t>>> elems;

    int64_t weight_count() const {
        int64_t n = 0;
        for (const auto& [p, idx] : elems) n += static_cast<int64_t>(idx.size());
        return n;
    }
};

using FilterIndex = std::vector<FilterGroup>;

namespace detail {

/// Columns of a row-major [rows, out] matrix, one group per output index.
inline void add_column_groups(FilterIndex& fi, const std::string& layer, int param_w,
                              int param_b, int64_t rows, int64_t out) {
    for (int64_t oc = 0; oc < out; ++oc) {
        FilterGroup g;
        g.name = layer + "." + std::to_string(oc);
        std::vector<int64_t> widx(rows);
        for (int64_t r = 0; r < rows; ++r) widx[r] = r * out + oc;
        g.elems.emplace_back(param_w, std::move(widx));
        g.elems.emplace_back(param_b, std::vector<int64_t>{oc});
        fi.push_back(std::move(g));
    }
}

}  // namespace detail

/// Strided convolutional critic producing one scalar per image.
struct CriticNet {
    ImageShape in_shape;
    int64_t base_channels = 16;
    int64_t feat_dim = 64;

    Conv2d conv1, conv2;
    Dense fc1;   // flatten -> feat_dim
    Dense head;  // feat_dim -> 1

    CriticNet() = default;
    CriticNet(ImageShape img, int64_t base, int64_t feat, Rng& rng)
        : in_shape(img), base_channels(base), feat_dim(feat) {
        // stride-2 4x4 convs, two stages
        conv1 = Conv2d({img.channels, img.height, img.width, 4, 4, 2, 1}, base, rng);
        int64_t h1 = conv1.geom.out_h(), w1 = conv1.geom.out_w();
        conv2 = Conv2d({base, h1, w1, 4, 4, 2, 1}, base * 2, rng);
        int64_t h2 = conv2.geom.out_h(), w2 = conv2.geom.out_w();
        fc1 = Dense(base * 2 * h2 * w2, feat, rng);
        head = Dense(feat, 1, rng);
    }

    /// Penultimate features [B, feat_dim].
    Var features(const Var& x) const {
        if (x->value.cols() != in_shape.numel())
            throw ConfigError("CriticNet: input size " + std::to_string(x->value.cols()) +
                              " != expected " + std::to_string(in_shape.numel()));
        Var h = ad::leaky_relu(conv1.forward(x));
        h = ad::leaky_relu(conv2.forward(h));
        return ad::leaky_relu(fc1.forward(h));
    }

    /// Scalar critic score per image, [B, 1].
    Var forward(const Var& x) const { return head.forward(features(x)); }

    NamedParams named_params(const std::string& prefix = "critic") const {
        return {{prefix + ".conv1.W", conv1.W}, {prefix + ".conv1.b", conv1.b},
                {prefix + ".conv2.W", conv2.W}, {prefix + ".conv2.b", conv2.b},
                {prefix + ".fc1.W", fc1.W},     {prefix + ".fc1.b", fc1.b},
                {prefix + ".head.W", head.W},   {prefix + ".head.b", head.b}};
    }

    /// Partition of all critic parameters into freezable groups:
    /// conv filters per output channel, dense layers per output neuron.
    FilterIndex filter_index() const {
        FilterIndex fi;
        detail::add_column_groups(fi, "conv1", 0, 1, conv1.geom.patch(), conv1.out_channels);
        detail::add_column_groups(fi, "conv2", 2, 3, conv2.geom.patch(), conv2.out_channels);
        detail::add_column_groups(fi, "fc1", 4, 5, fc1.in, fc1.out);
        detail::add_column_groups(fi, "head", 6, 7, head.in, head.out);
        return fi;
    }
};

// ---------------------------------------------------------------------------

/// Label -> embedding row lookup table.
struct ClassEmbedding {
    int64_t num_classes = 0, embed_dim = 0;
    Var table;  // [num_classes, embed_dim]

    ClassEmbedding() = default;
    ClassEmbedding(int64_t nc, int64_t ed, Rng& rng) : num_classes(nc), embed_dim(ed) {
        table = ad::leaf(rng.normal_tensor({nc, ed}, 0.0, 0.02));
    }

    Var lookup(const std::vector<int64_t>& labels) const {
        for (int64_t l : labels)
            if (l < 0 || l >= num_classes)
                throw ArgumentError("ClassEmbedding: label " + std::to_string(l) +
                                    " out of range 0.." + std::to_string(num_classes - 1));
        return ad::gather_rows(table, labels);
    }

    NamedParams named_params(const std::string& prefix = "embed") const {
        return {{prefix + ".table", table}};
    }
};

/// Generator with per-layer conditional scale/shift driven by an embedding.
/// Conditioning enters only through these modulation parameters.
struct CondGeneratorNet {
    GeneratorNet backbone;
    int64_t embed_dim = 0;
    Dense mod1_scale, mod1_shift;  // embed -> channels of conv stage 1 input
    Dense mod2_scale, mod2_shift;  // embed -> channels of conv stage 2 input

    CondGeneratorNet() = default;
    CondGeneratorNet(int64_t latent, ImageShape img, int64_t base, int64_t ed, Rng& rng)
        : backbone(latent, img, base, rng), embed_dim(ed) {
        int64_t c0 = base * 2;
        mod1_scale = Dense(ed, c0, rng, 0.01);
        mod1_shift = Dense(ed, c0, rng, 0.01);
        mod2_scale = Dense(ed, base, rng, 0.01);
        mod2_shift = Dense(ed, base, rng, 0.01);
    }

    int64_t latent_dim() const { return backbone.latent_dim; }

    /// Per-sample per-channel modulation: y * (1 + scale(e)) + shift(e),
    /// broadcast over the spatial extent.
    static Var modulate(const Var& y, const Var& e, const Dense& sc, const Dense& sh,
                        int64_t channels, int64_t hw) {
        int64_t B = y->value.rows();
        Var gain = ad::add_scalar(sc.forward(e), 1.0);  // [B, C]
        Var bias = sh.forward(e);
        auto spread = [&](const Var& v) {
            return ad::reshape(ad::tile_cols(ad::reshape(v, {B * channels, 1}), hw),
                               {B, channels * hw});
        };
        return ad::add(ad::mul(y, spread(gain)), spread(bias));
    }

    /// z: [B, latent], e: [B, embed_dim] -> images [B, C*H*W] in [-1, 1].
    Var forward(const Var& z, const Var& e) const {
        if (e->value.cols() != embed_dim)
            throw ConfigError("CondGeneratorNet: embedding width " +
                              std::to_string(e->value.cols()) + " != embed_dim " +
                              std::to_string(embed_dim));
        const GeneratorNet& g = backbone;
        int64_t c0 = g.base_channels * 2;
        Var h = g.fc.forward(z);
        h = modulate(h, e, mod1_scale, mod1_shift, c0, g.h0 * g.w0);
        h = ad::leaky_relu(h);
        h = ad::upsample_nearest(h, c0, g.h0, g.w0, 2);
        h = g.conv1.forward(h);
        h = modulate(h, e, mod2_scale, mod2_shift, g.base_channels, g.h0 * g.w0 * 4);
        h = ad::leaky_relu(h);
        h = ad::upsample_nearest(h, g.base_channels, g.h0 * 2, g.w0 * 2, 2);
        return ad::tanh_(g.conv2.forward(h));
    }

    NamedParams named_params(const std::string& prefix = "cgen") const {
        NamedParams np = backbone.named_params(prefix);
        np.emplace_back(prefix + ".mod1_scale.W", mod1_scale.W);
        np.emplace_back(prefix + ".mod1_scale.b", mod1_scale.b);
        np.emplace_back(prefix + ".mod1_shift.W", mod1_shift.W);
        np.emplace_back(prefix + ".mod1_shift.b", mod1_shift.b);
        np.emplace_back(prefix + ".mod2_scale.W", mod2_scale.W);
        np.emplace_back(prefix + ".mod2_scale.b", mod2_scale.b);
        np.emplace_back(prefix + ".mod2_shift.W", mod2_shift.W);
        np.emplace_back(prefix + ".mod2_shift.b", mod2_shift.b);
        return np;
    }
};

/// Class-projection critic used while pretraining conditional sources:
/// score = head(phi(x)) + <E_d(l), P phi(x)>. Mining drops the projection
/// pathway and uses the unconditional head only.
struct CondCriticNet {
    CriticNet backbone;
    ClassEmbedding proj_embed;
    Dense proj;  // feat -> embed_dim

    CondCriticNet() = default;
    CondCriticNet(ImageShape img, int64_t base, int64_t feat, int64_t nc, int64_t ed, Rng& rng)
        : backbone(img, base, feat, rng), proj_embed(nc, ed, rng), proj(feat, ed, rng) {}

    Var forward_projected(const Var& x, const std::vector<int64_t>& labels) const {
        Var phi = backbone.features(x);
        Var base_score = backbone.head.forward(phi);
        Var e = proj_embed.lookup(labels);            // [B, ed]
        Var p = proj.forward(phi);                    // [B, ed]
        Var dot = ad::sum_cols(ad::mul(e, p));        // [B, 1]
        return ad::add(base_score, dot);
    }

    /// Unconditional scalar head (projection pathway dropped).
    Var forward(const Var& x) const { return backbone.forward(x); }

    NamedParams named_params(const std::string& prefix = "ccritic") const {
        NamedParams np = backbone.named_params(prefix);
        np.emplace_back(prefix + ".proj_embed.table", proj_embed.table);
        np.emplace_back(prefix + ".proj.W", proj.W);
        np.emplace_back(prefix + ".proj.b", proj.b);
        return np;
    }
};

}  // namespace minelab
