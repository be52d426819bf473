#pragma once

// Metric suite: Frechet distance in a learned feature space, Gaussian-kernel
// MMD, mean-variance diversity, and classifier probes. The feature space
// comes from a small frozen convolutional classifier trained once per
// source corpus; its weight hash travels with every metric record.

#include <Eigen/Dense>
#include <nlohmann/json.hpp>

#include "minelab/data.hpp"
#include "minelab/gan.hpp"

namespace minelab {

namespace detail {

using Mat = Eigen::MatrixXd;
using EigMap = Eigen::Map<const Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic,
                                              Eigen::RowMajor>>;

inline Mat as_matrix(const Tensor& t) { return EigMap(t.data.data(), t.rows(), t.cols()); }

/// Symmetric PSD square root by eigendecomposition. Eigenvalues below
/// -tol * max|eig| mean the input was not PSD.
inline Mat sqrtm_psd(const Mat& s, double tol = 1e-8) {
    Eigen::SelfAdjointEigenSolver<Mat> es(s);
    if (es.info() != Eigen::Success)
        throw NumericalError("fid: eigendecomposition failed");
    Eigen::VectorXd ev = es.eigenvalues();
    double scale = std::max(1.0, ev.cwiseAbs().maxCoeff());
    for (int i = 0; i < ev.size(); ++i) {
        if (ev[i] < -tol * scale)
            throw NumericalError("fid: matrix square root failed (eigenvalue " +
                                 std::to_string(ev[i]) + " beyond tolerance)");
        ev[i] = std::sqrt(std::max(ev[i], 0.0));
    }
    return es.eigenvectors() * ev.asDiagonal() * es.eigenvectors().transpose();
}

inline void mean_cov(const Mat& x, Eigen::VectorXd& mu, Mat& sigma) {
    int64_t n = x.rows();
    mu = x.colwise().mean();
    Mat centered = x.rowwise() - mu.transpose();
    sigma = centered.transpose() * centered / static_cast<double>(n - 1);
}

}  // namespace detail

/// Frechet distance between Gaussian fits of two feature sets:
/// ||mu_r - mu_f||^2 + tr(S_r + S_f - 2 (S_r S_f)^{1/2}).
inline double fid(const Tensor& features_real, const Tensor& features_fake) {
    if (features_real.cols() != features_fake.cols())
        throw ArgumentError("fid: feature dims differ: " + std::to_string(features_real.cols()) +
                            " vs " + std::to_string(features_fake.cols()));
    if (features_real.rows() < 2 || features_fake.rows() < 2)
        throw ArgumentError("fid: need at least 2 samples per side");

    detail::Mat xr = detail::as_matrix(features_real);
    detail::Mat xf = detail::as_matrix(features_fake);
    Eigen::VectorXd mr, mf;
    detail::Mat sr, sf;
    detail::mean_cov(xr, mr, sr);
    detail::mean_cov(xf, mf, sf);

    // tr(sqrt(S_r S_f)) computed on the symmetric form A S_f A, A = S_r^{1/2}
    detail::Mat a = detail::sqrtm_psd(sr);
    detail::Mat cross = detail::sqrtm_psd(a * sf * a);
    double d2 = (mr - mf).squaredNorm() + sr.trace() + sf.trace() - 2.0 * cross.trace();
    return d2;
}

/// Median of pooled pairwise Euclidean distances; the default kernel width.
inline double median_heuristic_bandwidth(const Tensor& a, const Tensor& b) {
    detail::Mat x(a.rows() + b.rows(), a.cols());
    x.topRows(a.rows()) = detail::as_matrix(a);
    x.bottomRows(b.rows()) = detail::as_matrix(b);
    std::vector<double> d;
    for (int64_t i = 0; i < x.rows(); ++i)
        for (int64_t j = i + 1; j < x.rows(); ++j)
            d.push_back((x.row(i) - x.row(j)).norm());
    if (d.empty()) throw ArgumentError("median_heuristic_bandwidth: need >= 2 pooled samples");
    size_t mid = d.size() / 2;
    std::nth_element(d.begin(), d.begin() + mid, d.end());
    double med = d[mid];
    return med > 0 ? med : 1.0;
}

/// Gaussian-kernel MMD, sqrt of the estimator clipped at 0. bandwidth <= 0
/// selects the median heuristic. The unbiased estimator drops diagonal
/// terms; the biased variant keeps them (and is exactly 0 on identical sets).
inline double kmmd(const Tensor& set_a, const Tensor& set_b, double bandwidth = 0.0,
                   bool biased = false) {
    if (set_a.cols() != set_b.cols())
        throw ArgumentError("kmmd: feature dims differ");
    int64_t n = set_a.rows(), m = set_b.rows();
    if (n < 2 || m < 2)
        throw ArgumentError("kmmd: unbiased estimator needs >= 2 samples per set");
    double sigma = bandwidth > 0 ? bandwidth : median_heuristic_bandwidth(set_a, set_b);

    detail::Mat a = detail::as_matrix(set_a);
    detail::Mat b = detail::as_matrix(set_b);
    auto k = [&](const auto& u, const auto& v) {
        return std::exp(-(u - v).squaredNorm() / (2.0 * sigma * sigma));
    };
    double kaa = 0, kbb = 0, kab = 0;
    for (int64_t i = 0; i < n; ++i)
        for (int64_t j = 0; j < n; ++j)
            if (biased || i != j) kaa += k(a.row(i), a.row(j));
    for (int64_t i = 0; i < m; ++i)
        for (int64_t j = 0; j < m; ++j)
            if (biased || i != j) kbb += k(b.row(i), b.row(j));
    for (int64_t i = 0; i < n; ++i)
        for (int64_t j = 0; j < m; ++j) kab += k(a.row(i), b.row(j));

    double nn = static_cast<double>(n), mm = static_cast<double>(m);
    double mmd2 = biased ? kaa / (nn * nn) + kbb / (mm * mm) - 2.0 * kab / (nn * mm)
                         : kaa / (nn * (nn - 1)) + kbb / (mm * (mm - 1)) - 2.0 * kab / (nn * mm);
    return std::sqrt(std::max(mmd2, 0.0));
}

/// Mean over feature dimensions of the per-dimension unbiased variance.
inline double mean_variance(const Tensor& features) {
    int64_t m = features.rows(), f = features.cols();
    if (m < 2) throw ArgumentError("mean_variance: need >= 2 samples");
    double acc = 0;
    for (int64_t c = 0; c < f; ++c) {
        double mean = 0;
        for (int64_t r = 0; r < m; ++r) mean += features.at(r, c);
        mean /= m;
        double ss = 0;
        for (int64_t r = 0; r < m; ++r) {
            double d = features.at(r, c) - mean;
            ss += d * d;
        }
        acc += ss / (m - 1);
    }
    return acc / f;
}

// ---------------------------------------------------------------------------
// feature extractor / probe

/// Small convolutional classifier. The penultimate layer (dim F) is the
/// embedding for FID/KMMD/MV; the softmax head is the probe.
struct FeatureExtractor {
    static constexpr uint32_t kVersion = 1;

    CriticNet trunk;  // features() is the embedding; trunk.head unused
    Dense cls;        // feat -> num_classes
    int64_t num_classes = 0;

    FeatureExtractor() = default;
    FeatureExtractor(ImageShape img, int64_t base, int64_t feat, int64_t nc, Rng& rng)
        : trunk(img, base, feat, rng), cls(feat, nc, rng), num_classes(nc) {}

    int64_t feature_dim() const { return trunk.feat_dim; }

    NamedParams named_params(const std::string& prefix = "extractor") const {
        NamedParams np{{prefix + ".conv1.W", trunk.conv1.W}, {prefix + ".conv1.b", trunk.conv1.b},
                       {prefix + ".conv2.W", trunk.conv2.W}, {prefix + ".conv2.b", trunk.conv2.b},
                       {prefix + ".fc1.W", trunk.fc1.W},     {prefix + ".fc1.b", trunk.fc1.b},
                       {prefix + ".cls.W", cls.W},           {prefix + ".cls.b", cls.b}};
        return np;
    }

    Var logits(const Var& x) const { return cls.forward(trunk.features(x)); }

    /// Embeddings for a (possibly large) image batch, chunked forward.
    Tensor features(const Tensor& images, int64_t chunk = 256) const {
        int64_t n = images.rows();
        Tensor out({n, feature_dim()});
        for (int64_t start = 0; start < n; start += chunk) {
            int64_t b = std::min(chunk, n - start);
            Tensor part({b, images.cols()});
            std::copy(images.data.begin() + start * images.cols(),
                      images.data.begin() + (start + b) * images.cols(), part.data.begin());
            Tensor f = trunk.features(ad::constant(part))->value;
            std::copy(f.data.begin(), f.data.end(), out.data.begin() + start * feature_dim());
        }
        return out;
    }

    std::vector<int64_t> predict(const Tensor& images, int64_t chunk = 256) const {
        int64_t n = images.rows();
        std::vector<int64_t> labels(n);
        for (int64_t start = 0; start < n; start += chunk) {
            int64_t b = std::min(chunk, n - start);
            Tensor part({b, images.cols()});
            std::copy(images.data.begin() + start * images.cols(),
                      images.data.begin() + (start + b) * images.cols(), part.data.begin());
            Tensor lg = logits(ad::constant(part))->value;
            for (int64_t r = 0; r < b; ++r) {
                int64_t best = 0;
                for (int64_t c = 1; c < num_classes; ++c)
                    if (lg.at(r, c) > lg.at(r, best)) best = c;
                labels[start + r] = best;
            }
        }
        return labels;
    }

    /// FNV-1a over version + all weights; identity of the embedding space.
    uint64_t hash() const {
        uint64_t h = 1469598103934665603ull;
        auto mix = [&](uint64_t bits) {
            for (int b = 0; b < 8; ++b) {
                h ^= (bits >> (8 * b)) & 0xff;
                h *= 1099511628211ull;
            }
        };
        mix(kVersion);
        for (const auto& [name, p] : named_params())
            for (double v : p->value.data) {
                uint64_t bits;
                std::memcpy(&bits, &v, sizeof(bits));
                mix(bits);
            }
        return h;
    }
};

/// Mean softmax cross-entropy with a row-max shift for stability.
inline Var softmax_cross_entropy(const Var& logits, const std::vector<int64_t>& labels) {
    int64_t B = logits->value.rows(), C = logits->value.cols();
    if (static_cast<int64_t>(labels.size()) != B)
        throw ArgumentError("softmax_cross_entropy: label count != batch size");
    Tensor shift({B, 1});
    Tensor onehot({B, C});
    for (int64_t r = 0; r < B; ++r) {
        if (labels[r] < 0 || labels[r] >= C)
            throw ArgumentError("softmax_cross_entropy: label out of range");
        double mx = logits->value.at(r, 0);
        for (int64_t c = 1; c < C; ++c) mx = std::max(mx, logits->value.at(r, c));
        shift.at(r, 0) = mx;
        onehot.at(r, labels[r]) = 1.0;
    }
    Var z = ad::sub(logits, ad::tile_cols(ad::constant(shift), C));
    Var lse = ad::log_(ad::sum_cols(ad::exp_(z)));              // [B, 1]
    Var picked = ad::sum_cols(ad::mul(z, ad::constant(onehot)));  // [B, 1]
    return ad::mean(ad::sub(lse, picked));
}

struct ExtractorTrainConfig {
    double lr = 0.001;
    int64_t batch_size = 64;
    int64_t iterations = 500;
    uint64_t seed = 0;
};

/// Train the classifier on a labeled corpus; callers freeze it afterwards
/// by convention (no further train calls).
inline FeatureExtractor train_feature_extractor(const ExtractorTrainConfig& cfg,
                                                const ImageSet& data, int64_t num_classes,
                                                int64_t base = 8, int64_t feat = 64,
                                                std::ostream* log = nullptr) {
    if (data.size() == 0) throw ArgumentError("train_feature_extractor: empty dataset");
    if (data.labels.size() != static_cast<size_t>(data.size()))
        throw ArgumentError("train_feature_extractor: labels required");
    ImageShape img = data.shape;
    Rng rng(cfg.seed);
    FeatureExtractor fx(img, base, feat, num_classes, rng);
    Adam opt(values_of(fx.named_params()), {cfg.lr, 0.9, 0.999, 1e-8});

    for (int64_t it = 0; it < cfg.iterations; ++it) {
        auto idx = sample_indices(rng, data.size(), cfg.batch_size);
        Tensor x = data.batch(idx);
        std::vector<int64_t> y;
        for (int64_t i : idx) y.push_back(data.labels[i]);
        Var loss = softmax_cross_entropy(fx.logits(ad::constant(x)), y);
        check_finite_loss(loss->value.item(), it);
        optimize_step(opt, loss);
        if (log && (it % 100 == 0 || it + 1 == cfg.iterations))
            *log << nlohmann::json{{"iter", it}, {"ce", loss->value.item()}}.dump() << "\n";
    }
    return fx;
}

/// Normalized class-assignment histogram over a sample batch.
inline std::vector<double> classifier_probe(const Tensor& images, const FeatureExtractor& fx) {
    auto labels = fx.predict(images);
    std::vector<double> hist(fx.num_classes, 0.0);
    for (int64_t l : labels) hist[l] += 1.0;
    if (!labels.empty())
        for (double& v : hist) v /= static_cast<double>(labels.size());
    return hist;
}

inline double probe_accuracy(const FeatureExtractor& fx, const ImageSet& data) {
    auto pred = fx.predict(data.images);
    int64_t hit = 0;
    for (size_t i = 0; i < pred.size(); ++i)
        if (pred[i] == data.labels[i]) ++hit;
    return data.size() ? static_cast<double>(hit) / data.size() : 0.0;
}

// ---------------------------------------------------------------------------

/// Generated-set size protocol: capped at the real-set size and a hard cap.
inline int64_t eval_sample_count(int64_t target_size, int64_t cap = 10000) {
    return std::min(cap, target_size);
}

struct MetricsReport {
    double fid = 0;
    double kmmd = 0;
    double mv = 0;
    std::vector<double> probe_histogram;
    int64_t n_real = 0, n_fake = 0;
    uint64_t extractor_hash = 0;
    uint64_t seed = 0;
    std::string tag;

    nlohmann::json to_json() const {
        return {{"tag", tag},       {"fid", fid},
                {"kmmd", kmmd},     {"mv", mv},
                {"probe", probe_histogram}, {"n_real", n_real},
                {"n_fake", n_fake}, {"extractor_hash", extractor_hash},
                {"seed", seed}};
    }
};

/// Full metric pass over a real set and a generated batch.
inline MetricsReport evaluate_samples(const FeatureExtractor& fx, const Tensor& real,
                                      const Tensor& fake, uint64_t seed,
                                      const std::string& tag = "") {
    Tensor fr = fx.features(real);
    Tensor ff = fx.features(fake);
    MetricsReport r;
    r.tag = tag;
    r.fid = fid(fr, ff);
    r.kmmd = kmmd(fr, ff);
    r.mv = mean_variance(ff);
    r.probe_histogram = classifier_probe(fake, fx);
    r.n_real = real.rows();
    r.n_fake = fake.rows();
    r.extractor_hash = fx.hash();
    r.seed = seed;
    return r;
}

}  // namespace minelab
