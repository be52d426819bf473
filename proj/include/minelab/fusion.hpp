#pragma once

// Fusing N unconditional generators into one index-conditioned generator.
// Training sees only pseudo-real samples drawn from the frozen sources;
// no dataset enters this path. Conditioning is implicit in the input
// prior: each source index owns a Gaussian region with its own mean.

#include "minelab/checkpoint.hpp"
#include "minelab/gan.hpp"
#include "minelab/mining.hpp"

namespace minelab {

/// Per-index Gaussian regions of the fused input prior. Means are scaled
/// one-hot vectors on the first N coordinates (pairwise distance sqrt(2)*delta),
/// unit variance.
struct FusedPrior {
    int64_t dim = 0;
    int64_t num_indices = 0;
    double delta = 3.0;

    FusedPrior() = default;
    FusedPrior(int64_t dim_, int64_t n, double delta_) : dim(dim_), num_indices(n), delta(delta_) {
        if (n <= 0 || dim <= 0) throw ConfigError("FusedPrior: need positive dim and index count");
        if (n > dim)
            throw ConfigError("FusedPrior: more indices than prior dimensions");
        if (!(delta > 0.0))
            throw ConfigError("FusedPrior: separation delta must be > 0 (regions must be distinct)");
    }

    std::vector<double> mean_of(int64_t index) const {
        if (index < 0 || index >= num_indices)
            throw ArgumentError("FusedPrior: index " + std::to_string(index) + " out of range 0.." +
                                std::to_string(num_indices - 1));
        std::vector<double> mu(dim, 0.0);
        mu[index] = delta;
        return mu;
    }

    /// Samples ~ N(mu_index, I).
    Tensor sample(Rng& rng, int64_t index, int64_t n) const {
        auto mu = mean_of(index);
        Tensor t({n, dim});
        for (int64_t r = 0; r < n; ++r)
            for (int64_t c = 0; c < dim; ++c) t.at(r, c) = rng.normal(mu[c], 1.0);
        return t;
    }

    /// Mixture mode: index drawn uniformly per sample.
    Tensor sample_mixture(Rng& rng, int64_t n, std::vector<int64_t>* indices_out = nullptr) const {
        Tensor t({n, dim});
        for (int64_t r = 0; r < n; ++r) {
            int64_t idx = rng.uniform_int(0, num_indices - 1);
            if (indices_out) indices_out->push_back(idx);
            auto mu = mean_of(idx);
            for (int64_t c = 0; c < dim; ++c) t.at(r, c) = rng.normal(mu[c], 1.0);
        }
        return t;
    }

    nlohmann::json to_json() const {
        return {{"dim", dim}, {"num_indices", num_indices}, {"delta", delta}};
    }
    static FusedPrior from_json(const nlohmann::json& j) {
        return FusedPrior(j.at("dim").get<int64_t>(), j.at("num_indices").get<int64_t>(),
                          j.at("delta").get<double>());
    }
};

/// Balanced minibatch: equal pseudo-real count per source, fake count
/// equal to the combined pseudo-real count.
struct FusionBatchSpec {
    int64_t per_source = 8;
    int64_t num_sources = 2;

    int64_t fake_count() const { return per_source * num_sources; }
    void validate() const {
        if (per_source <= 0 || num_sources <= 0)
            throw ArgumentError("FusionBatchSpec: counts must be positive");
    }
};

struct FusionLosses {
    Var d_loss;  // mean D(G_F(z)) - sum_i mean D(G_i(z^i)) + gp
    Var g_loss;  // -mean D(G_F(z))
    Var gp;
};

/// Adversarial losses with pseudo-real data in the role of real data.
/// Fakes draw from the fused prior in mixture mode; pseudo-reals draw
/// per-source from the base prior.
inline FusionLosses fusion_losses(const CriticNet& critic, const GeneratorNet& fused_gen,
                                  const std::vector<GeneratorNet>& source_gens,
                                  const FusedPrior& prior, const FusionBatchSpec& spec,
                                  double gp_coeff, Rng& rng,
                                  const LatentPrior* source_prior = nullptr) {
    spec.validate();
    if (spec.num_sources != static_cast<int64_t>(source_gens.size()))
        throw ArgumentError("fusion_losses: spec names " + std::to_string(spec.num_sources) +
                            " sources, got " + std::to_string(source_gens.size()));
    for (const auto& g : source_gens)
        if (!(g.out_shape == fused_gen.out_shape))
            throw ConfigError("fusion_losses: source/fused output shape mismatch");

    auto D = [&](const Var& x) { return critic.forward(x); };

    Var z = ad::constant(prior.sample_mixture(rng, spec.fake_count()));
    Var fake = fused_gen.forward(z);
    Var fake_term = ad::mean(D(fake));

    LatentPrior base = source_prior ? *source_prior : LatentPrior(prior.dim);
    Var real_term;
    Tensor pseudo_pool({spec.fake_count(), fused_gen.out_shape.numel()});
    int64_t row = 0;
    for (const auto& g : source_gens) {
        Tensor zi = base.sample(rng, spec.per_source);
        Var pseudo = g.forward(ad::constant(zi));
        Var t = ad::mean(D(pseudo));
        real_term = real_term ? ad::add(real_term, t) : t;
        std::copy(pseudo->value.data.begin(), pseudo->value.data.end(),
                  pseudo_pool.data.begin() + row * pseudo_pool.cols());
        row += spec.per_source;
    }

    FusionLosses out;
    out.gp = gradient_penalty(D, pseudo_pool, fake->value, rng);
    out.d_loss = ad::add(ad::sub(fake_term, real_term), ad::scale(out.gp, gp_coeff));
    out.g_loss = ad::neg(fake_term);
    return out;
}

struct FusionConfig {
    GanTrainConfig train;     // batch_size = pseudo-reals per source
    double prior_delta = 3.0;
};

/// Train the fused generator against pseudo-real data from the frozen
/// sources. The fused checkpoint carries the FusedPrior description so
/// downstream mining can reconstruct the conditioning.
inline Checkpoint train_fusion(const FusionConfig& cfg,
                               const std::vector<Checkpoint>& sources, Rng& rng,
                               std::ostream* log = nullptr,
                               const GeneratorNet* fused_init = nullptr) {
    cfg.train.validate();
    if (sources.empty()) throw ArgumentError("train_fusion: no source checkpoints");
    ArchConfig arch = arch_of(sources[0]);
    for (const auto& ck : sources)
        if (!(arch_of(ck).img == arch.img))
            throw ConfigError("train_fusion: source image shapes differ");

    std::vector<GeneratorNet> gens;
    for (const auto& ck : sources) gens.push_back(load_generator(ck));

    int64_t N = static_cast<int64_t>(sources.size());
    FusedPrior prior(arch.latent_dim, N, cfg.prior_delta);
    FusionBatchSpec spec{cfg.train.batch_size, N};

    Rng init_rng(cfg.train.seed);
    GeneratorNet fused(arch.latent_dim, arch.img, arch.gen_base, init_rng);
    if (fused_init) {
        // deep-copy values so the caller's network is untouched by training
        Checkpoint seed_ck;
        seed_ck.put_params(fused_init->named_params());
        seed_ck.get_params(fused.named_params());
    }
    CriticNet critic = load_critic(sources[0]);

    Adam opt_g(values_of(fused.named_params()), cfg.train.adam_g());
    Adam opt_d(values_of(critic.named_params()), cfg.train.adam_d());

    auto t0 = std::chrono::steady_clock::now();
    for (int64_t it = 0; it < cfg.train.iterations; ++it) {
        double ld = 0, gp = 0;
        for (int64_t k = 0; k < cfg.train.critic_steps; ++k) {
            auto L = fusion_losses(critic, fused, gens, prior, spec, cfg.train.gp_coeff, rng);
            ld = L.d_loss->value.item();
            gp = L.gp->value.item();
            check_finite_loss(ld, it);
            optimize_step(opt_d, L.d_loss);
        }
        auto L = fusion_losses(critic, fused, gens, prior, spec, cfg.train.gp_coeff, rng);
        optimize_step(opt_g, L.g_loss);
        if (log && (it % 50 == 0 || it + 1 == cfg.train.iterations)) {
            double ms = std::chrono::duration<double, std::milli>(
                            std::chrono::steady_clock::now() - t0).count();
            log_record(log, it, ld, L.g_loss->value.item(), gp, ms);
        }
    }

    Checkpoint out;
    out.meta["arch"] = arch;
    out.meta["stage"] = "fused";
    out.meta["fused_prior"] = prior.to_json();
    out.meta["rng_state"] = rng.save_state();
    out.put_params(fused.named_params());
    out.put_params(critic.named_params());
    return out;
}

inline FusedPrior fused_prior_of(const Checkpoint& ck) {
    if (!ck.meta.contains("fused_prior"))
        throw ConfigError("Checkpoint: no fused-prior description");
    return FusedPrior::from_json(ck.meta.at("fused_prior"));
}

/// Miner-input sampler for mining on a fused checkpoint: u drawn from the
/// fused mixture so the miner searches across all source regions.
inline PriorSampler fused_mining_sampler(const FusedPrior& prior) {
    return [prior](Rng& rng, int64_t n) { return prior.sample_mixture(rng, n); };
}

/// Index-conditioned sampling from a fused generator.
inline Tensor sample_fused(const GeneratorNet& fused, const FusedPrior& prior, int64_t index,
                           Rng& rng, int64_t n) {
    Var img = fused.forward(ad::constant(prior.sample(rng, index, n)));
    return img->value;
}

}  // namespace minelab
