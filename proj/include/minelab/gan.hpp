#pragma once

// Wasserstein losses with gradient penalty and the source-domain
// adversarial pretraining loop.

#include <chrono>
#include <ostream>

#include "minelab/data.hpp"
#include "minelab/optim.hpp"

#include <nlohmann/json.hpp>

namespace minelab {

/// Gradient penalty: mean over interpolates of (||grad_x D(xhat)||_2 - 1)^2.
/// The returned Var stays connected to the critic parameters through the
/// double-backward graph, so it trains like any other loss term.
template <class CriticFn>
Var gradient_penalty(CriticFn&& critic, const Tensor& real, const Tensor& fake, Rng& rng) {
    if (real.shape.empty() || real.shape[0] == 0 || fake.shape.empty() || fake.shape[0] == 0)
        throw ArgumentError("gradient_penalty: empty batch");
    check_same_shape(real, fake, "gradient_penalty");
    int64_t B = real.shape[0], D = real.shape[1];

    Tensor xhat({B, D});
    for (int64_t b = 0; b < B; ++b) {
        double eps = rng.uniform();
        for (int64_t c = 0; c < D; ++c)
            xhat.at(b, c) = eps * real.at(b, c) + (1.0 - eps) * fake.at(b, c);
    }
    Var x = ad::leaf(std::move(xhat));
    Var scores = critic(x);  // [B, 1]
    Var gx = ad::grad(ad::sum(scores), {x})[0];
    Var norms = ad::sqrt_(ad::sum_cols(ad::square(gx)));  // [B, 1]
    return ad::mean(ad::square(ad::add_scalar(norms, -1.0)));
}

struct WganLosses {
    Var d_loss;  // mean D(fake) - mean D(real) + gp_coeff * gp
    Var g_loss;  // -mean D(fake)
    Var gp;      // penalty term alone
    Var fake;    // generated images (shared forward pass)
};

/// Critic/generator losses over already-built fake images.
template <class CriticFn>
WganLosses wgan_losses_on(CriticFn&& critic, const Var& fake, const Tensor& real_batch,
                          double gp_coeff, Rng& rng) {
    if (fake->value.cols() != real_batch.cols())
        throw ConfigError("wgan_losses: generated width " + std::to_string(fake->value.cols()) +
                          " != real width " + std::to_string(real_batch.cols()));
    Var fake_score = ad::mean(critic(fake));
    Var real_score = ad::mean(critic(ad::constant(real_batch)));
    Var gp = gradient_penalty(critic, real_batch, fake->value, rng);
    WganLosses out;
    out.gp = gp;
    out.d_loss = ad::add(ad::sub(fake_score, real_score), ad::scale(gp, gp_coeff));
    out.g_loss = ad::neg(fake_score);
    out.fake = fake;
    return out;
}

inline WganLosses wgan_losses(const CriticNet& critic, const GeneratorNet& gen,
                              const Tensor& z_batch, const Tensor& real_batch,
                              double gp_coeff, Rng& rng) {
    Var fake = gen.forward(ad::constant(z_batch));
    auto D = [&](const Var& x) { return critic.forward(x); };
    return wgan_losses_on(D, fake, real_batch, gp_coeff, rng);
}

// ---------------------------------------------------------------------------

struct GanTrainConfig {
    double lr_g = 0.0004;
    double lr_d = 0.0004;
    double beta1 = 0.5;
    double beta2 = 0.999;
    int64_t batch_size = 64;
    int64_t critic_steps = 5;   // critic updates per generator update
    double gp_coeff = 10.0;
    int64_t iterations = 2000;  // generator updates
    uint64_t seed = 0;

    void validate() const {
        if (!(lr_g > 0) || !(lr_d > 0)) throw ConfigError("GanTrainConfig: rates must be > 0");
        if (gp_coeff < 0) throw ConfigError("GanTrainConfig: gp_coeff must be >= 0");
        if (batch_size < 2) throw ConfigError("GanTrainConfig: batch_size must be >= 2");
    }

    AdamConfig adam_g() const { return {lr_g, beta1, beta2, 1e-8}; }
    AdamConfig adam_d() const { return {lr_d, beta1, beta2, 1e-8}; }
};

/// One line-delimited JSON record per logged iteration.
inline void log_record(std::ostream* log, int64_t iter, double ld, double lg, double gp,
                       double wall_ms, const char* event = nullptr) {
    if (!log) return;
    nlohmann::json j{{"iter", iter}, {"l_d", ld}, {"l_g", lg}, {"gp", gp}, {"wall_ms", wall_ms}};
    if (event) j["event"] = event;
    *log << j.dump() << "\n";
}

inline void check_finite_loss(double ld, int64_t iter) {
    if (!std::isfinite(ld))
        throw NumericalError("critic loss diverged (non-finite) at iteration " +
                             std::to_string(iter));
}

/// Source-domain WGAN-GP pretraining. Updates gen and critic in place.
inline void pretrain_source_gan(const GanTrainConfig& cfg, const ImageSet& data,
                                const LatentPrior& prior, GeneratorNet& gen, CriticNet& critic,
                                Rng& rng, std::ostream* log = nullptr) {
    cfg.validate();
    if (data.size() == 0) throw ArgumentError("pretrain_source_gan: dataset empty");
    Adam opt_g(values_of(gen.named_params()), cfg.adam_g());
    Adam opt_d(values_of(critic.named_params()), cfg.adam_d());

    auto t0 = std::chrono::steady_clock::now();
    for (int64_t it = 0; it < cfg.iterations; ++it) {
        double ld = 0, gp = 0;
        for (int64_t k = 0; k < cfg.critic_steps; ++k) {
            Tensor real = data.batch(sample_indices(rng, data.size(), cfg.batch_size));
            Tensor z = prior.sample(rng, cfg.batch_size);
            auto L = wgan_losses(critic, gen, z, real, cfg.gp_coeff, rng);
            ld = L.d_loss->value.item();
            gp = L.gp->value.item();
            check_finite_loss(ld, it);
            optimize_step(opt_d, L.d_loss);
        }
        Tensor real = data.batch(sample_indices(rng, data.size(), cfg.batch_size));
        Tensor z = prior.sample(rng, cfg.batch_size);
        auto L = wgan_losses(critic, gen, z, real, cfg.gp_coeff, rng);
        optimize_step(opt_g, L.g_loss);

        if (log && (it % 50 == 0 || it + 1 == cfg.iterations)) {
            double ms = std::chrono::duration<double, std::milli>(
                            std::chrono::steady_clock::now() - t0).count();
            log_record(log, it, ld, L.g_loss->value.item(), gp, ms);
        }
    }
}

/// Sample n images from G(z), z ~ prior. Plain forward, no graph retained.
inline Tensor sample_images(const GeneratorNet& gen, const LatentPrior& prior, Rng& rng,
                            int64_t n, int64_t chunk = 256) {
    Tensor out({n, gen.out_shape.numel()});
    int64_t done = 0;
    while (done < n) {
        int64_t b = std::min(chunk, n - done);
        Tensor z = prior.sample(rng, b);
        Var img = gen.forward(ad::constant(z));
        std::copy(img->value.data.begin(), img->value.data.end(),
                  out.data.begin() + done * gen.out_shape.numel());
        done += b;
    }
    return out;
}

}  // namespace minelab
