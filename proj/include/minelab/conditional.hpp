#pragma once

// Class-conditional transfer. Source pretraining uses the projection
// critic; mining drops the projection pathway and trains two miners on a
// shared input noise u: m_z steers the latent, m_c produces the class
// embedding directly. No target labels are read anywhere on the mining
// path.

#include "minelab/checkpoint.hpp"
#include "minelab/gan.hpp"
#include "minelab/mining.hpp"

namespace minelab {

// ---- conditional checkpoint plumbing ----

inline CondGeneratorNet load_cond_generator(const Checkpoint& ck,
                                            const std::string& prefix = "cgen") {
    ArchConfig a = arch_of(ck);
    Rng tmp(0);
    CondGeneratorNet g(a.latent_dim, a.img, a.gen_base, a.embed_dim, tmp);
    ck.get_params(g.named_params(prefix));
    return g;
}

inline CondCriticNet load_cond_critic(const Checkpoint& ck,
                                      const std::string& prefix = "ccritic") {
    ArchConfig a = arch_of(ck);
    Rng tmp(0);
    CondCriticNet d(a.img, a.critic_base, a.critic_feat, a.num_classes, a.embed_dim, tmp);
    ck.get_params(d.named_params(prefix));
    return d;
}

inline ClassEmbedding load_embedding(const Checkpoint& ck, const std::string& prefix = "embed") {
    ArchConfig a = arch_of(ck);
    Rng tmp(0);
    ClassEmbedding e(a.num_classes, a.embed_dim, tmp);
    ck.get_params(e.named_params(prefix));
    return e;
}

/// Pretrain a class-conditional source GAN on labeled data. The projection
/// term is active here and only here.
inline Checkpoint pretrain_conditional_source_gan(const GanTrainConfig& cfg, const ArchConfig& arch,
                                                  const ImageSet& data, Rng& rng,
                                                  std::ostream* log = nullptr) {
    cfg.validate();
    if (data.size() == 0) throw ArgumentError("pretrain_conditional_source_gan: empty dataset");
    if (data.labels.size() != static_cast<size_t>(data.size()))
        throw ArgumentError("pretrain_conditional_source_gan: labels required for every image");

    Rng init_rng(cfg.seed);
    CondGeneratorNet gen(arch.latent_dim, arch.img, arch.gen_base, arch.embed_dim, init_rng);
    CondCriticNet critic(arch.img, arch.critic_base, arch.critic_feat, arch.num_classes,
                         arch.embed_dim, init_rng);
    ClassEmbedding embed(arch.num_classes, arch.embed_dim, init_rng);
    LatentPrior prior(arch.latent_dim);

    auto gen_side = values_of(gen.named_params());
    for (auto& p : values_of(embed.named_params())) gen_side.push_back(p);
    Adam opt_g(gen_side, cfg.adam_g());
    Adam opt_d(values_of(critic.named_params()), cfg.adam_d());

    auto losses = [&]() {
        auto idx = sample_indices(rng, data.size(), cfg.batch_size);
        Tensor real = data.batch(idx);
        std::vector<int64_t> real_labels, fake_labels;
        for (int64_t i : idx) real_labels.push_back(data.labels[i]);
        for (int64_t i = 0; i < cfg.batch_size; ++i)
            fake_labels.push_back(rng.uniform_int(0, arch.num_classes - 1));

        Var z = ad::constant(prior.sample(rng, cfg.batch_size));
        Var fake = gen.forward(z, embed.lookup(fake_labels));
        Var fake_term = ad::mean(critic.forward_projected(fake, fake_labels));
        Var real_term = ad::mean(critic.forward_projected(ad::constant(real), real_labels));
        auto D_lbl = [&](const Var& x) { return critic.forward_projected(x, real_labels); };
        Var gp = gradient_penalty(D_lbl, real, fake->value, rng);
        WganLosses L;
        L.gp = gp;
        L.fake = fake;
        L.d_loss = ad::add(ad::sub(fake_term, real_term), ad::scale(gp, cfg.gp_coeff));
        L.g_loss = ad::neg(fake_term);
        return L;
    };

    auto t0 = std::chrono::steady_clock::now();
    for (int64_t it = 0; it < cfg.iterations; ++it) {
        double ld = 0, gp = 0;
        for (int64_t k = 0; k < cfg.critic_steps; ++k) {
            auto L = losses();
            ld = L.d_loss->value.item();
            gp = L.gp->value.item();
            check_finite_loss(ld, it);
            optimize_step(opt_d, L.d_loss);
        }
        auto L = losses();
        optimize_step(opt_g, L.g_loss);
        if (log && (it % 50 == 0 || it + 1 == cfg.iterations)) {
            double ms = std::chrono::duration<double, std::milli>(
                            std::chrono::steady_clock::now() - t0).count();
            log_record(log, it, ld, L.g_loss->value.item(), gp, ms);
        }
    }

    Checkpoint out;
    out.meta["arch"] = arch;
    out.meta["stage"] = "pretrained_conditional";
    out.meta["conditional"] = true;
    out.meta["rng_state"] = rng.save_state();
    out.put_params(gen.named_params());
    out.put_params(critic.named_params());
    out.put_params(embed.named_params());
    return out;
}

// ---- dual miner ----

/// Two miners sharing the same input noise per sample: m_z targets the
/// latent, m_c targets the embedding space.
struct DualMiner {
    MinerNet m_z;
    MinerNet m_c;

    DualMiner() = default;
    DualMiner(const ArchConfig& arch, Rng& rng)
        : m_z(arch.miner_widths(), rng), m_c(arch.class_miner_widths(), rng) {
        if (m_z.in_dim() != m_c.in_dim())
            throw ConfigError("DualMiner: m_z and m_c must consume the same input noise");
    }

    NamedParams named_params() const {
        NamedParams np = m_z.named_params("miner_z");
        for (auto& p : m_c.named_params("miner_c")) np.push_back(p);
        return np;
    }
};

/// Adversarial losses with fakes G(m_z(u), m_c(u)). The critic runs through
/// its unconditional head only; the projection pathway never sees a label.
inline WganLosses conditional_mine_losses(const CondCriticNet& critic,
                                          const CondGeneratorNet& gen, const DualMiner& dual,
                                          const Tensor& u_batch, const Tensor& target_batch,
                                          double gp_coeff, Rng& rng) {
    if (dual.m_c.out_dim() != gen.embed_dim)
        throw ConfigError("conditional_mine_losses: class-miner output " +
                          std::to_string(dual.m_c.out_dim()) + " != embed_dim " +
                          std::to_string(gen.embed_dim));
    if (dual.m_z.out_dim() != gen.latent_dim())
        throw ConfigError("conditional_mine_losses: latent-miner output " +
                          std::to_string(dual.m_z.out_dim()) + " != generator latent " +
                          std::to_string(gen.latent_dim()));
    Var u = ad::constant(u_batch);
    Var fake = gen.forward(dual.m_z.forward(u), dual.m_c.forward(u));
    auto D = [&](const Var& x) { return critic.forward(x); };
    return wgan_losses_on(D, fake, target_batch, gp_coeff, rng);
}

/// Stage 1 (+ optional stage 2) of conditional mining. Targets must be
/// unlabeled; both the generator backbone and the embedding table stay
/// bit-identical through stage 1.
inline Checkpoint train_conditional_mining(const MiningConfig& cfg,
                                           const Checkpoint& pretrained, const ImageSet& target,
                                           Rng& rng, std::ostream* log = nullptr) {
    cfg.validate();
    if (target.size() == 0) throw ArgumentError("train_conditional_mining: target set empty");
    if (!target.labels.empty())
        throw ArgumentError(
            "train_conditional_mining: target labels supplied; this path must stay label-free");
    if (!pretrained.has_prefix("cgen."))
        throw ConfigError("train_conditional_mining: checkpoint is not class-conditional");

    ArchConfig arch = arch_of(pretrained);
    CondGeneratorNet gen = load_cond_generator(pretrained);
    CondCriticNet critic = load_cond_critic(pretrained);
    Rng init_rng(cfg.stage1.seed);
    DualMiner dual(arch, init_rng);
    LatentPrior prior(arch.latent_dim);

    Adam opt_d(values_of(critic.backbone.named_params()), cfg.stage1.adam_d());
    Adam opt_g(values_of(dual.named_params()), cfg.stage1.adam_g());

    auto fake = [&](int64_t n) {
        Var u = ad::constant(prior.sample(rng, n));
        return gen.forward(dual.m_z.forward(u), dual.m_c.forward(u));
    };
    auto D = [&](const Var& x) { return critic.forward(x); };
    if (log) log_record(log, 0, 0, 0, 0, 0, "stage1_begin");
    adversarial_train(cfg.stage1, fake, D, opt_d, opt_g, target, rng, nullptr, log);
    if (log) log_record(log, cfg.stage1.iterations, 0, 0, 0, 0, "stage1_end");

    if (!cfg.mine_only && cfg.stage2.iterations > 0) {
        Adam opt_d2(values_of(critic.backbone.named_params()), cfg.stage2.adam_d());
        auto gen_side = values_of(dual.named_params());
        for (auto& p : values_of(gen.named_params())) gen_side.push_back(p);
        Adam opt_g2(gen_side, cfg.stage2.adam_g());
        if (log) log_record(log, 0, 0, 0, 0, 0, "stage2_begin");
        adversarial_train(cfg.stage2, fake, D, opt_d2, opt_g2, target, rng, nullptr, log);
        if (log) log_record(log, cfg.stage2.iterations, 0, 0, 0, 0, "stage2_end");
    }

    Checkpoint out;
    out.meta = pretrained.meta;
    out.meta["stage"] = cfg.mine_only || cfg.stage2.iterations == 0 ? "mined" : "finetuned";
    out.meta["rng_state"] = rng.save_state();
    out.blobs = pretrained.blobs;
    out.put_params(gen.named_params());
    out.put_params(critic.named_params());
    out.put_params(dual.named_params());
    return out;
}

inline DualMiner load_dual_miner(const Checkpoint& ck) {
    ArchConfig a = arch_of(ck);
    Rng tmp(0);
    DualMiner d(a, tmp);
    ck.get_params(d.named_params());
    return d;
}

/// Sample through the dual miners: G(m_z(u), m_c(u)), u ~ prior.
inline Tensor sample_conditional_mined(const CondGeneratorNet& gen, const DualMiner& dual,
                                       const LatentPrior& prior, Rng& rng, int64_t n,
                                       int64_t chunk = 256) {
    Tensor out({n, gen.backbone.out_shape.numel()});
    int64_t done = 0;
    while (done < n) {
        int64_t b = std::min(chunk, n - done);
        Var u = ad::constant(prior.sample(rng, b));
        Var img = gen.forward(dual.m_z.forward(u), dual.m_c.forward(u));
        std::copy(img->value.data.begin(), img->value.data.end(),
                  out.data.begin() + done * gen.backbone.out_shape.numel());
        done += b;
    }
    return out;
}

}  // namespace minelab
