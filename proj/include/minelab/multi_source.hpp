#pragma once

// Mining from N pretrained generators at once: supersample minibatches,
// argmax-critic branch selection, the sliding-window selector, and the
// max / permutation-corrected loss variants.

#include <deque>

#include "minelab/mining.hpp"

namespace minelab {

/// K supersamples, one latent u per supersample shared across the N
/// branches; images[i] holds G_i(M_i(u)) for all K latents (graph vars,
/// so miner gradients stay reachable).
struct SupersampleBatch {
    int64_t K = 0, N = 0;
    Tensor latents;           // [K, prior_dim]
    std::vector<Var> images;  // N entries of [K, CHW]
    Tensor critic_scores;     // [K, N], filled by select_argmax_indices
    bool scores_filled = false;
};

inline SupersampleBatch draw_supersample_batch(const std::vector<GeneratorNet>& gens,
                                               const std::vector<MinerNet>& miners,
                                               const LatentPrior& prior, int64_t K, Rng& rng) {
    if (gens.empty() || gens.size() != miners.size())
        throw ConfigError("draw_supersample_batch: need equally many generators and miners");
    for (size_t i = 1; i < gens.size(); ++i)
        if (!(gens[i].out_shape == gens[0].out_shape))
            throw ConfigError("draw_supersample_batch: heterogeneous generator output shapes");

    SupersampleBatch b;
    b.K = K;
    b.N = static_cast<int64_t>(gens.size());
    b.latents = prior.sample(rng, K);
    Var u = ad::constant(b.latents);
    for (int64_t i = 0; i < b.N; ++i)
        b.images.push_back(gens[i].forward(miners[i].forward(u)));
    b.critic_scores = Tensor({K, b.N});
    return b;
}

/// m[j] = argmax_i D(images[i][j]); ties break toward the lowest index.
/// Fills batch.critic_scores as a side effect.
template <class CriticT>
std::vector<int64_t> select_argmax_indices(const CriticT& critic, SupersampleBatch& batch) {
    for (int64_t i = 0; i < batch.N; ++i) {
        Tensor s = critic.forward(ad::constant(batch.images[i]->value))->value;
        for (int64_t j = 0; j < batch.K; ++j) batch.critic_scores.at(j, i) = s.data[j];
    }
    batch.scores_filled = true;
    std::vector<int64_t> m(batch.K);
    for (int64_t j = 0; j < batch.K; ++j) {
        int64_t best = 0;
        for (int64_t i = 1; i < batch.N; ++i)
            if (batch.critic_scores.at(j, i) > batch.critic_scores.at(j, best)) best = i;
        m[j] = best;
    }
    return m;
}

/// Categorical distribution over generators, estimated from per-minibatch
/// argmax histograms over a sliding window of the last `capacity` minibatches.
class Selector {
public:
    explicit Selector(int64_t n, int64_t capacity = 1000) : n_(n), capacity_(capacity) {
        if (n <= 0) throw ConfigError("Selector: need at least one generator");
        recompute();  // empty window reads as uniform
    }

    int64_t num_generators() const { return n_; }

    /// Append the minibatch histogram (evicting past capacity) and return pi.
    const std::vector<double>& update(const std::vector<int64_t>& m) {
        std::vector<int64_t> hist(n_, 0);
        for (int64_t i : m) {
            if (i < 0 || i >= n_) throw ArgumentError("Selector: branch index out of range");
            ++hist[i];
        }
        window_.push_back(std::move(hist));
        if (static_cast<int64_t>(window_.size()) > capacity_) window_.pop_front();
        recompute();
        return pi_;
    }

    const std::vector<double>& pi() const { return pi_; }
    int64_t window_size() const { return static_cast<int64_t>(window_.size()); }

    nlohmann::json to_json() const {
        return {{"n", n_}, {"capacity", capacity_}, {"pi", pi_},
                {"window", std::vector<std::vector<int64_t>>(window_.begin(), window_.end())}};
    }
    static Selector from_json(const nlohmann::json& j) {
        Selector s(j.at("n").get<int64_t>(), j.at("capacity").get<int64_t>());
        for (const auto& h : j.at("window")) s.window_.push_back(h.get<std::vector<int64_t>>());
        s.recompute();
        return s;
    }

private:
    void recompute() {
        std::vector<int64_t> total(n_, 0);
        int64_t sum = 0;
        for (const auto& h : window_)
            for (int64_t i = 0; i < n_; ++i) {
                total[i] += h[i];
                sum += h[i];
            }
        pi_.assign(n_, sum ? 0.0 : 1.0 / static_cast<double>(n_));
        if (sum)
            for (int64_t i = 0; i < n_; ++i)
                pi_[i] = static_cast<double>(total[i]) / static_cast<double>(sum);
    }

    int64_t n_, capacity_;
    std::deque<std::vector<int64_t>> window_;
    std::vector<double> pi_{1.0};
};

struct AssignmentPlan {
    std::vector<int64_t> m;  // argmax branch per supersample
    std::vector<int64_t> r;  // permutation of 0..K-1

    void validate(int64_t N) const {
        if (m.size() != r.size()) throw ArgumentError("AssignmentPlan: m/r length mismatch");
        std::vector<uint8_t> seen(r.size(), 0);
        for (int64_t v : r) {
            if (v < 0 || v >= static_cast<int64_t>(r.size()) || seen[v])
                throw ArgumentError("AssignmentPlan: r is not a permutation");
            seen[v] = 1;
        }
        for (int64_t v : m)
            if (v < 0 || v >= N) throw ArgumentError("AssignmentPlan: branch index out of range");
    }
};

inline AssignmentPlan permute_assignments(std::vector<int64_t> m, Rng& rng) {
    AssignmentPlan plan;
    plan.r = rng.permutation(static_cast<int64_t>(m.size()));
    plan.m = std::move(m);
    return plan;
}

enum class MultiMode { max, permuted };

/// Pairing rule for permuted mode. branch_only keeps each latent in place
/// and routes it through the branch selected for supersample r(j); literal
/// applies r to both the latent and the branch, which reindexes the max-mode
/// sum without changing gradient routing. Kept for A/B comparison.
enum class PermutedPairing { branch_only, literal };

/// Assemble the routed fake batch: row j comes from images[branch(j)][latent(j)].
inline Var routed_fake(const SupersampleBatch& batch, const std::vector<int64_t>& branch,
                       const std::vector<int64_t>& latent) {
    Var fake;
    for (int64_t i = 0; i < batch.N; ++i) {
        std::vector<int64_t> rows, positions;
        for (int64_t j = 0; j < batch.K; ++j)
            if (branch[j] == i) {
                rows.push_back(latent[j]);
                positions.push_back(j);
            }
        if (rows.empty()) continue;
        Var part = ad::scatter_rows(ad::gather_rows(batch.images[i], rows), positions, batch.K);
        fake = fake ? ad::add(fake, part) : part;
    }
    return fake;
}

/// Multi-source critic/miner losses. Fake term averages over the K routed
/// samples (matching the single-branch reduction); real term is the mean
/// critic score on the target batch; gradient penalty as usual.
template <class CriticT>
WganLosses multi_mine_losses(const CriticT& critic, const SupersampleBatch& batch,
                             const AssignmentPlan& plan, MultiMode mode, double gp_coeff,
                             const Tensor& target_batch, Rng& rng,
                             PermutedPairing pairing = PermutedPairing::branch_only) {
    if (static_cast<int64_t>(plan.m.size()) != batch.K)
        throw ArgumentError("multi_mine_losses: plan length " + std::to_string(plan.m.size()) +
                            " != batch K " + std::to_string(batch.K));
    plan.validate(batch.N);

    std::vector<int64_t> branch(batch.K), latent(batch.K);
    for (int64_t j = 0; j < batch.K; ++j) {
        if (mode == MultiMode::max) {
            branch[j] = plan.m[j];
            latent[j] = j;
        } else if (pairing == PermutedPairing::branch_only) {
            branch[j] = plan.m[plan.r[j]];
            latent[j] = j;
        } else {  // literal: reindex of the max-mode sum
            branch[j] = plan.m[plan.r[j]];
            latent[j] = plan.r[j];
        }
    }
    Var fake = routed_fake(batch, branch, latent);
    auto D = [&](const Var& x) { return critic.forward(x); };
    return wgan_losses_on(D, fake, target_batch, gp_coeff, rng);
}

/// Post-training inference: i ~ Categorical(pi), then G_i(M_i(u)).
inline Tensor sample_inference_multi(const Selector& sel, const std::vector<GeneratorNet>& gens,
                                     const std::vector<MinerNet>& miners,
                                     const LatentPrior& prior, int64_t n, Rng& rng,
                                     std::vector<int64_t>* branches_out = nullptr) {
    if (n <= 0) throw ArgumentError("sample_inference_multi: n must be positive");
    if (gens.empty() || gens.size() != miners.size())
        throw ConfigError("sample_inference_multi: generator/miner mismatch");
    int64_t chw = gens[0].out_shape.numel();
    Tensor out({n, chw});
    for (int64_t s = 0; s < n; ++s) {
        int64_t i = rng.categorical(sel.pi());
        if (branches_out) branches_out->push_back(i);
        Var img = gens[i].forward(miners[i].forward(ad::constant(prior.sample(rng, 1))));
        std::copy(img->value.data.begin(), img->value.data.end(), out.data.begin() + s * chw);
    }
    return out;
}

// ---------------------------------------------------------------------------
// training driver

struct MultiMiningConfig {
    GanTrainConfig train;          // batch_size is K
    MultiMode mode = MultiMode::permuted;
    PermutedPairing pairing = PermutedPairing::branch_only;
    int64_t critic_init_index = 0;  // which pretrained critic seeds the shared critic
    int64_t selector_window = 1000;
};

struct MultiMiningResult {
    std::vector<MinerNet> miners;
    CriticNet critic;
    Selector selector{1};
    std::vector<std::vector<double>> pi_trajectory;  // one pi per minibatch
};

/// Train miners and the shared critic against the target set. Generators
/// stay frozen throughout (multi-source stage 1).
inline MultiMiningResult train_multi_mining(const MultiMiningConfig& cfg,
                                            const std::vector<Checkpoint>& sources,
                                            const ImageSet& target, Rng& rng,
                                            std::ostream* log = nullptr) {
    cfg.train.validate();
    if (sources.empty()) throw ArgumentError("train_multi_mining: no source checkpoints");
    if (cfg.critic_init_index < 0 ||
        cfg.critic_init_index >= static_cast<int64_t>(sources.size()))
        throw ConfigError("train_multi_mining: critic_init_index out of range");
    if (target.size() == 0) throw ArgumentError("train_multi_mining: target set empty");

    ArchConfig arch = arch_of(sources[0]);
    std::vector<GeneratorNet> gens;
    std::vector<MinerNet> miners;
    Rng init_rng(cfg.train.seed);
    for (const auto& ck : sources) {
        gens.push_back(load_generator(ck));
        miners.emplace_back(arch.miner_widths(), init_rng);
    }
    MultiMiningResult res{std::move(miners),
                          load_critic(sources[cfg.critic_init_index]),
                          Selector(static_cast<int64_t>(sources.size()), cfg.selector_window),
                          {}};

    Adam opt_d(values_of(res.critic.named_params()), cfg.train.adam_d());
    std::vector<Var> miner_params;
    for (size_t i = 0; i < res.miners.size(); ++i)
        for (auto& p : values_of(res.miners[i].named_params("miner" + std::to_string(i))))
            miner_params.push_back(p);
    Adam opt_g(miner_params, cfg.train.adam_g());
    LatentPrior prior(arch.latent_dim);
    int64_t K = cfg.train.batch_size;

    auto t0 = std::chrono::steady_clock::now();
    for (int64_t it = 0; it < cfg.train.iterations; ++it) {
        double ld = 0, gp = 0;
        for (int64_t k = 0; k < cfg.train.critic_steps; ++k) {
            SupersampleBatch b = draw_supersample_batch(gens, res.miners, prior, K, rng);
            auto m = select_argmax_indices(res.critic, b);
            AssignmentPlan plan = permute_assignments(m, rng);
            Tensor real = target.batch(sample_indices(rng, target.size(), K));
            auto L = multi_mine_losses(res.critic, b, plan, cfg.mode, cfg.train.gp_coeff, real,
                                       rng, cfg.pairing);
            ld = L.d_loss->value.item();
            gp = L.gp->value.item();
            check_finite_loss(ld, it);
            optimize_step(opt_d, L.d_loss);
            res.selector.update(m);
            res.pi_trajectory.push_back(res.selector.pi());
        }
        SupersampleBatch b = draw_supersample_batch(gens, res.miners, prior, K, rng);
        auto m = select_argmax_indices(res.critic, b);
        AssignmentPlan plan = permute_assignments(m, rng);
        Tensor real = target.batch(sample_indices(rng, target.size(), K));
        auto L = multi_mine_losses(res.critic, b, plan, cfg.mode, cfg.train.gp_coeff, real, rng,
                                   cfg.pairing);
        optimize_step(opt_g, L.g_loss);

        if (log && (it % 50 == 0 || it + 1 == cfg.train.iterations)) {
            double ms = std::chrono::duration<double, std::milli>(
                            std::chrono::steady_clock::now() - t0).count();
            log_record(log, it, ld, L.g_loss->value.item(), gp, ms);
        }
    }
    return res;
}

}  // namespace minelab
