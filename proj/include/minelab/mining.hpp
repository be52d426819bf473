#pragma once

// Single-GAN knowledge transfer. Stage 1 trains miner and critic against
// the target set with the generator frozen; stage 2 releases the generator
// and finetunes everything, optionally under a critic freeze mask.

#include <functional>

#include "minelab/checkpoint.hpp"
#include "minelab/gan.hpp"

namespace minelab {

struct MiningConfig {
    GanTrainConfig stage1;
    GanTrainConfig stage2;
    bool mine_only = false;
    bool critic_from_source = true;  // stage-1 critic starts from the source critic
    std::string target_id;

    void validate() const {
        stage1.validate();
        if (stage1.iterations < 0 || stage2.iterations < 0)
            throw ConfigError("MiningConfig: iteration counts must be >= 0");
        if (mine_only && stage2.iterations > 0)
            throw ConfigError("MiningConfig: mine_only forbids stage-2 settings");
        if (!mine_only) stage2.validate();
    }
};

inline WganLosses mine_losses(const CriticNet& critic, const GeneratorNet& gen,
                              const MinerNet& miner, const Tensor& u_batch,
                              const Tensor& target_batch, double gp_coeff, Rng& rng) {
    if (miner.out_dim() != gen.latent_dim)
        throw ConfigError("mine_losses: miner output " + std::to_string(miner.out_dim()) +
                          " != generator latent " + std::to_string(gen.latent_dim));
    Var fake = gen.forward(miner.forward(ad::constant(u_batch)));
    auto D = [&](const Var& x) { return critic.forward(x); };
    return wgan_losses_on(D, fake, target_batch, gp_coeff, rng);
}

/// Shared adversarial loop: critic steps on (fake, real) then one step on
/// the generator-side optimizer (miner and/or generator parameters).
template <class FakeFn, class CriticFn>
void adversarial_train(const GanTrainConfig& cfg, FakeFn&& make_fake, CriticFn&& critic,
                       Adam& opt_d, Adam& opt_g, const ImageSet& data, Rng& rng,
                       const FreezeMask* mask_d = nullptr, std::ostream* log = nullptr,
                       const std::function<bool(int64_t)>& stop = {}) {
    auto t0 = std::chrono::steady_clock::now();
    for (int64_t it = 0; it < cfg.iterations; ++it) {
        double ld = 0, gp = 0;
        for (int64_t k = 0; k < cfg.critic_steps; ++k) {
            Tensor real = data.batch(sample_indices(rng, data.size(), cfg.batch_size));
            Var fake = make_fake(cfg.batch_size);
            auto L = wgan_losses_on(critic, fake, real, cfg.gp_coeff, rng);
            ld = L.d_loss->value.item();
            gp = L.gp->value.item();
            check_finite_loss(ld, it);
            optimize_step(opt_d, L.d_loss, mask_d);
        }
        Tensor real = data.batch(sample_indices(rng, data.size(), cfg.batch_size));
        Var fake = make_fake(cfg.batch_size);
        auto L = wgan_losses_on(critic, fake, real, cfg.gp_coeff, rng);
        optimize_step(opt_g, L.g_loss);

        if (log && (it % 50 == 0 || it + 1 == cfg.iterations)) {
            double ms = std::chrono::duration<double, std::milli>(
                            std::chrono::steady_clock::now() - t0).count();
            log_record(log, it, ld, L.g_loss->value.item(), gp, ms);
        }
        if (stop && stop(it)) break;
    }
}

/// Stage 1: train a fresh miner (and the critic) with the generator frozen.
/// The generator blobs in the returned checkpoint are bit-identical to the
/// input checkpoint's.
/// Draws miner input noise; defaults to the standard normal prior. A fused
/// checkpoint mines with its mixture prior instead.
using PriorSampler = std::function<Tensor(Rng&, int64_t)>;

inline Checkpoint train_miner_stage(const MiningConfig& cfg, const Checkpoint& pretrained,
                                    const ImageSet& target, Rng& rng,
                                    std::ostream* log = nullptr,
                                    const PriorSampler& u_sampler = {}) {
    cfg.validate();
    if (target.size() == 0) throw ArgumentError("train_miner_stage: target set empty");

    ArchConfig arch = arch_of(pretrained);
    GeneratorNet gen = load_generator(pretrained);
    Rng init_rng(cfg.stage1.seed);
    MinerNet miner(arch.miner_widths(), init_rng);
    CriticNet critic = [&] {
        if (cfg.critic_from_source) return load_critic(pretrained);
        Rng tmp(cfg.stage1.seed + 1);
        return CriticNet(arch.img, arch.critic_base, arch.critic_feat, tmp);
    }();

    FreezeMask mask;
    bool masked = has_mask(pretrained);
    if (masked) mask = get_mask(pretrained, critic);

    Adam opt_d(values_of(critic.named_params()), cfg.stage1.adam_d());
    Adam opt_g(values_of(miner.named_params()), cfg.stage1.adam_g());
    LatentPrior prior(arch.latent_dim);

    auto fake = [&](int64_t n) {
        Tensor u = u_sampler ? u_sampler(rng, n) : prior.sample(rng, n);
        return gen.forward(miner.forward(ad::constant(u)));
    };
    auto D = [&](const Var& x) { return critic.forward(x); };
    if (log) log_record(log, 0, 0, 0, 0, 0, "stage1_begin");
    adversarial_train(cfg.stage1, fake, D, opt_d, opt_g, target, rng,
                      masked ? &mask : nullptr, log);
    if (log) log_record(log, cfg.stage1.iterations, 0, 0, 0, 0, "stage1_end");

    Checkpoint out;
    out.meta = pretrained.meta;
    out.meta["stage"] = "mined";
    out.meta["rng_state"] = rng.save_state();
    out.blobs = pretrained.blobs;  // carries gen.* forward untouched
    out.put_params(miner.named_params());
    out.put_params(critic.named_params());
    return out;
}

/// Stage 2: release the generator and finetune miner + generator + critic.
/// Frozen critic filters (when the checkpoint carries a mask) stay
/// bit-identical.
inline Checkpoint finetune_stage(const MiningConfig& cfg, const Checkpoint& mined,
                                 const ImageSet& target, Rng& rng,
                                 std::ostream* log = nullptr,
                                 const PriorSampler& u_sampler = {}) {
    cfg.validate();
    if (cfg.mine_only) throw ConfigError("finetune_stage: config is mine_only");
    if (target.size() == 0) throw ArgumentError("finetune_stage: target set empty");
    if (!mined.has_prefix("miner."))
        throw ConfigError("finetune_stage: checkpoint has no trained miner");

    ArchConfig arch = arch_of(mined);
    GeneratorNet gen = load_generator(mined);
    MinerNet miner = load_miner(mined);
    CriticNet critic = load_critic(mined);

    FreezeMask mask;
    bool masked = has_mask(mined);
    if (masked) mask = get_mask(mined, critic);

    Adam opt_d(values_of(critic.named_params()), cfg.stage2.adam_d());
    auto gen_side = values_of(miner.named_params());
    for (auto& p : values_of(gen.named_params())) gen_side.push_back(p);
    Adam opt_g(gen_side, cfg.stage2.adam_g());
    LatentPrior prior(arch.latent_dim);

    auto fake = [&](int64_t n) {
        Tensor u = u_sampler ? u_sampler(rng, n) : prior.sample(rng, n);
        return gen.forward(miner.forward(ad::constant(u)));
    };
    auto D = [&](const Var& x) { return critic.forward(x); };
    if (log) log_record(log, 0, 0, 0, 0, 0, "stage2_begin");
    adversarial_train(cfg.stage2, fake, D, opt_d, opt_g, target, rng,
                      masked ? &mask : nullptr, log);
    if (log) log_record(log, cfg.stage2.iterations, 0, 0, 0, 0, "stage2_end");

    Checkpoint out;
    out.meta = mined.meta;
    out.meta["stage"] = "finetuned";
    out.meta["rng_state"] = rng.save_state();
    out.blobs = mined.blobs;
    out.put_params(gen.named_params());
    out.put_params(miner.named_params());
    out.put_params(critic.named_params());
    return out;
}

/// Sample through miner + generator: G(M(u)), u ~ prior.
inline Tensor sample_mined(const GeneratorNet& gen, const MinerNet& miner,
                           const LatentPrior& prior, Rng& rng, int64_t n,
                           int64_t chunk = 256) {
    Tensor out({n, gen.out_shape.numel()});
    int64_t done = 0;
    while (done < n) {
        int64_t b = std::min(chunk, n - done);
        Var img = gen.forward(miner.forward(ad::constant(prior.sample(rng, b))));
        std::copy(img->value.data.begin(), img->value.data.end(),
                  out.data.begin() + done * gen.out_shape.numel());
        done += b;
    }
    return out;
}

}  // namespace minelab
