#include <gtest/gtest.h>

#include <algorithm>
#include <map>

#include "minelab/multi_source.hpp"
#include "oracle.hpp"

using namespace minelab;
namespace a = minelab::ad;

namespace {

struct TinyWorld {
    std::vector<GeneratorNet> gens;
    std::vector<MinerNet> miners;
    CriticNet critic;
    LatentPrior prior{6};

    explicit TinyWorld(int64_t n, uint64_t seed = 11) {
        Rng rng(seed);
        for (int64_t i = 0; i < n; ++i) {
            gens.emplace_back(6, ImageShape{1, 8, 8}, 2, rng);
            miners.emplace_back(std::vector<int64_t>{6, 8, 6}, rng);
        }
        critic = CriticNet({1, 8, 8}, 2, 8, rng);
    }
};

/// Scores each image by its first pixel; lets tests hand-set score tables.
struct FirstPixelCritic {
    Var forward(const Var& x) const {
        Tensor w({x->value.cols(), 1});
        w.data[0] = 1.0;
        return a::matmul(x, a::constant(w));
    }
};

Checkpoint make_source_checkpoint(uint64_t seed) {
    ArchConfig arch;
    arch.latent_dim = 6;
    arch.img = {1, 8, 8};
    arch.gen_base = 2;
    arch.critic_base = 2;
    arch.critic_feat = 8;
    arch.miner_hidden = {8};
    Rng rng(seed);
    GeneratorNet g(arch.latent_dim, arch.img, arch.gen_base, rng);
    CriticNet d(arch.img, arch.critic_base, arch.critic_feat, rng);
    Checkpoint ck;
    ck.meta["arch"] = arch;
    ck.put_params(g.named_params());
    ck.put_params(d.named_params());
    return ck;
}

}  // namespace

TEST(Supersample, CountsAndShapes) {
    TinyWorld w(2);
    Rng rng(1);
    SupersampleBatch b = draw_supersample_batch(w.gens, w.miners, w.prior, 3, rng);
    EXPECT_EQ(b.K, 3);
    EXPECT_EQ(b.N, 2);
    EXPECT_EQ(b.latents.shape, (Shape{3, 6}));
    ASSERT_EQ(b.images.size(), 2u);
    for (const auto& img : b.images) EXPECT_EQ(img->value.shape, (Shape{3, 64}));
}

TEST(Supersample, SingleGeneratorMatchesSingleGanPath) {
    TinyWorld w(1);
    Rng rng(2);
    SupersampleBatch b = draw_supersample_batch(w.gens, w.miners, w.prior, 4, rng);
    Var direct = w.gens[0].forward(w.miners[0].forward(a::constant(b.latents)));
    EXPECT_EQ(b.images[0]->value.data, direct->value.data);
}

TEST(Supersample, FixedSeedDeterministic) {
    TinyWorld w(2);
    auto run = [&]() {
        Rng rng(7);
        return draw_supersample_batch(w.gens, w.miners, w.prior, 3, rng);
    };
    SupersampleBatch b1 = run(), b2 = run();
    EXPECT_EQ(b1.latents.data, b2.latents.data);
    for (size_t i = 0; i < b1.images.size(); ++i)
        EXPECT_EQ(b1.images[i]->value.data, b2.images[i]->value.data);
}

TEST(Supersample, HeterogeneousShapesThrow) {
    Rng rng(3);
    std::vector<GeneratorNet> gens;
    gens.emplace_back(6, ImageShape{1, 8, 8}, 2, rng);
    gens.emplace_back(6, ImageShape{1, 12, 12}, 2, rng);
    std::vector<MinerNet> miners;
    miners.emplace_back(std::vector<int64_t>{6, 6}, rng);
    miners.emplace_back(std::vector<int64_t>{6, 6}, rng);
    LatentPrior prior(6);
    EXPECT_THROW(draw_supersample_batch(gens, miners, prior, 2, rng), ConfigError);
}

TEST(ArgmaxSelection, HandSetScoreTableWithTieRule) {
    // score table rows (by first pixel): [[1,2],[5,3],[0,0]]
    SupersampleBatch b;
    b.K = 3;
    b.N = 2;
    Tensor img0({3, 4}), img1({3, 4});
    img0.at(0, 0) = 1;
    img0.at(1, 0) = 5;
    img0.at(2, 0) = 0;
    img1.at(0, 0) = 2;
    img1.at(1, 0) = 3;
    img1.at(2, 0) = 0;
    b.images = {a::constant(img0), a::constant(img1)};
    b.critic_scores = Tensor({3, 2});
    auto m = select_argmax_indices(FirstPixelCritic{}, b);
    EXPECT_EQ(m, (std::vector<int64_t>{1, 0, 0}));  // tie at j=2 -> lowest index
    EXPECT_TRUE(b.scores_filled);
    EXPECT_DOUBLE_EQ(b.critic_scores.at(1, 0), 5.0);
}

TEST(ArgmaxSelection, MatchesBruteForceRowArgmax) {
    TinyWorld w(3);
    // fresh miners map everything near G(0); separate the branches so the
    // score table is not one giant numerical tie
    for (size_t i = 0; i < w.miners.size(); ++i)
        for (double& v : w.miners[i].layers.back().b->value.data)
            v = 0.4 * static_cast<double>(i + 1);
    Rng rng(4);
    SupersampleBatch b = draw_supersample_batch(w.gens, w.miners, w.prior, 5, rng);
    auto m = select_argmax_indices(w.critic, b);
    for (int64_t j = 0; j < b.K; ++j) {
        int64_t best = 0;
        double best_score = -1e300;
        for (int64_t i = 0; i < b.N; ++i) {
            double s = oracle::critic_forward(w.critic, oracle::row(b.images[i]->value, j));
            if (s > best_score + 1e-12) {
                best_score = s;
                best = i;
            }
        }
        EXPECT_EQ(m[j], best) << "row " << j;
    }
}

TEST(Selector, DegenerateWindowIsOneHot) {
    Selector s(2, 1000);
    std::vector<int64_t> m(8, 0);
    for (int i = 0; i < 1000; ++i) s.update(m);
    EXPECT_DOUBLE_EQ(s.pi()[0], 1.0);
    EXPECT_DOUBLE_EQ(s.pi()[1], 0.0);
}

TEST(Selector, NormalizedCounts) {
    Selector s(2, 1000);
    std::vector<int64_t> m;
    for (int i = 0; i < 30; ++i) m.push_back(0);
    for (int i = 0; i < 70; ++i) m.push_back(1);
    s.update(m);
    EXPECT_DOUBLE_EQ(s.pi()[0], 0.3);
    EXPECT_DOUBLE_EQ(s.pi()[1], 0.7);
}

TEST(Selector, WindowEvictsOldestPastCapacity) {
    Selector s(2, 3);
    s.update({0, 0});  // evicted after 3 more updates
    for (int i = 0; i < 3; ++i) s.update({1, 1});
    EXPECT_DOUBLE_EQ(s.pi()[0], 0.0);
    EXPECT_DOUBLE_EQ(s.pi()[1], 1.0);
    EXPECT_EQ(s.window_size(), 3);
}

TEST(Selector, PiIsAlwaysADistribution) {
    Selector s(3, 10);
    Rng rng(5);
    for (int step = 0; step < 25; ++step) {
        std::vector<int64_t> m;
        for (int j = 0; j < 6; ++j) m.push_back(rng.uniform_int(0, 2));
        const auto& pi = s.update(m);
        double sum = 0;
        for (double p : pi) {
            EXPECT_GE(p, 0.0);
            sum += p;
        }
        EXPECT_NEAR(sum, 1.0, 1e-12);
    }
}

TEST(Selector, FreshSelectorReadsUniform) {
    Selector s(4, 10);
    ASSERT_EQ(s.pi().size(), 4u);
    for (double p : s.pi()) EXPECT_DOUBLE_EQ(p, 0.25);
}

TEST(Selector, JsonRoundTrip) {
    Selector s(2, 5);
    s.update({0, 1, 1});
    s.update({1, 1, 1});
    Selector t = Selector::from_json(s.to_json());
    EXPECT_EQ(t.pi(), s.pi());
    EXPECT_EQ(t.window_size(), s.window_size());
}

TEST(Selector, OutOfRangeIndexThrows) {
    Selector s(2, 5);
    EXPECT_THROW(s.update({0, 2}), ArgumentError);
}

TEST(PermuteAssignments, SingleElementIsIdentity) {
    Rng rng(6);
    auto plan = permute_assignments({0}, rng);
    EXPECT_EQ(plan.r, (std::vector<int64_t>{0}));
}

TEST(PermuteAssignments, MultisetPreserved) {
    Rng rng(7);
    std::vector<int64_t> m{0, 0, 1};
    for (int trial = 0; trial < 50; ++trial) {
        auto plan = permute_assignments(m, rng);
        plan.validate(2);
        std::map<int64_t, int> hist;
        for (size_t j = 0; j < m.size(); ++j) ++hist[plan.m[plan.r[j]]];
        EXPECT_EQ(hist[0], 2);
        EXPECT_EQ(hist[1], 1);
    }
}

TEST(PermuteAssignments, UniformOverPermutations) {
    Rng rng(8);
    std::map<std::vector<int64_t>, int> counts;
    const int trials = 10000;
    for (int t = 0; t < trials; ++t) counts[rng.permutation(3)]++;
    ASSERT_EQ(counts.size(), 6u);
    for (const auto& [perm, c] : counts)
        EXPECT_NEAR(static_cast<double>(c) / trials, 1.0 / 6.0, 0.02);
}

TEST(AssignmentPlan, ValidationRejectsBadPlans) {
    AssignmentPlan p;
    p.m = {0, 1};
    p.r = {0, 0};  // not a bijection
    EXPECT_THROW(p.validate(2), ArgumentError);
    p.r = {1, 0};
    p.m = {0, 5};  // branch out of range
    EXPECT_THROW(p.validate(2), ArgumentError);
}

TEST(MultiMineLosses, IdentityPermutationEqualsMaxMode) {
    TinyWorld w(2);
    Rng rng(9);
    SupersampleBatch b = draw_supersample_batch(w.gens, w.miners, w.prior, 4, rng);
    AssignmentPlan plan;
    plan.m = select_argmax_indices(w.critic, b);
    plan.r = {0, 1, 2, 3};
    Tensor target = rng.normal_tensor({4, 64});

    Rng r1(42), r2(42);
    auto Lmax = multi_mine_losses(w.critic, b, plan, MultiMode::max, 10.0, target, r1);
    auto Lperm = multi_mine_losses(w.critic, b, plan, MultiMode::permuted, 10.0, target, r2);
    EXPECT_EQ(Lmax.d_loss->value.item(), Lperm.d_loss->value.item());
    EXPECT_EQ(Lmax.g_loss->value.item(), Lperm.g_loss->value.item());
}

TEST(MultiMineLosses, SingleBranchReducesToMineLosses) {
    TinyWorld w(1);
    Rng rng(10);
    SupersampleBatch b = draw_supersample_batch(w.gens, w.miners, w.prior, 4, rng);
    AssignmentPlan plan = permute_assignments(select_argmax_indices(w.critic, b), rng);
    Tensor target = rng.normal_tensor({4, 64});

    Rng r1(5), r2(5), r3(5);
    auto Lmax = multi_mine_losses(w.critic, b, plan, MultiMode::max, 10.0, target, r1);
    auto Lperm = multi_mine_losses(w.critic, b, plan, MultiMode::permuted, 10.0, target, r2);
    auto Lsingle =
        mine_losses(w.critic, w.gens[0], w.miners[0], b.latents, target, 10.0, r3);
    EXPECT_NEAR(Lmax.d_loss->value.item(), Lsingle.d_loss->value.item(), 1e-12);
    EXPECT_NEAR(Lperm.d_loss->value.item(), Lsingle.d_loss->value.item(), 1e-12);
    EXPECT_NEAR(Lmax.g_loss->value.item(), Lsingle.g_loss->value.item(), 1e-12);
}

TEST(MultiMineLosses, MaxModeMatchesBruteForceTable) {
    TinyWorld w(2);
    Rng rng(11);
    SupersampleBatch b = draw_supersample_batch(w.gens, w.miners, w.prior, 4, rng);
    AssignmentPlan plan;
    plan.m = select_argmax_indices(w.critic, b);
    plan.r = {0, 1, 2, 3};
    Tensor target = rng.normal_tensor({4, 64});

    auto L = multi_mine_losses(w.critic, b, plan, MultiMode::max, 0.0, target, rng);

    // exhaustive K x N table; generator loss averages the per-row maxima
    double acc = 0;
    for (int64_t j = 0; j < 4; ++j) {
        double best = -1e300;
        for (int64_t i = 0; i < 2; ++i)
            best = std::max(best,
                            oracle::critic_forward(w.critic, oracle::row(b.images[i]->value, j)));
        acc += best;
    }
    acc /= 4;
    EXPECT_NEAR(L.g_loss->value.item(), -acc, std::abs(acc) * 1e-9 + 1e-10);
}

TEST(MultiMineLosses, LiteralPairingIsAReindexOfMaxMode) {
    TinyWorld w(2);
    Rng rng(12);
    SupersampleBatch b = draw_supersample_batch(w.gens, w.miners, w.prior, 5, rng);
    AssignmentPlan plan = permute_assignments(select_argmax_indices(w.critic, b), rng);
    Tensor target = rng.normal_tensor({5, 64});

    Rng r1(3), r2(3);
    auto Lmax = multi_mine_losses(w.critic, b, plan, MultiMode::max, 0.0, target, r1);
    auto Llit = multi_mine_losses(w.critic, b, plan, MultiMode::permuted, 0.0, target, r2,
                                  PermutedPairing::literal);
    EXPECT_NEAR(Llit.g_loss->value.item(), Lmax.g_loss->value.item(), 1e-12);
    EXPECT_NEAR(Llit.d_loss->value.item(), Lmax.d_loss->value.item(), 1e-12);
}

TEST(MultiMineLosses, PermutedModeRoutesNonArgmaxLatents) {
    // m non-constant and r a cyclic shift: some latent j whose own branch
    // m[j] = 1 must be routed through branch m[r(j)] = 0, so generator 0's
    // miner receives gradient from a latent it did not win.
    TinyWorld w(2);
    Rng rng(13);
    SupersampleBatch b = draw_supersample_batch(w.gens, w.miners, w.prior, 4, rng);
    AssignmentPlan plan;
    plan.m = {0, 1, 0, 1};
    plan.r = {1, 2, 3, 0};
    Tensor target = rng.normal_tensor({4, 64});
    auto L = multi_mine_losses(w.critic, b, plan, MultiMode::permuted, 0.0, target, rng);

    bool crossover = false;
    for (int64_t j = 0; j < 4; ++j)
        if (plan.m[plan.r[j]] != plan.m[j]) crossover = true;
    EXPECT_TRUE(crossover);

    // both miners stay connected to the loss
    for (int64_t i = 0; i < 2; ++i) {
        auto g = ad::grad(L.g_loss, values_of(w.miners[i].named_params()));
        double norm = 0;
        for (const auto& gv : g)
            for (double v : gv->value.data) norm += v * v;
        EXPECT_GT(norm, 0.0) << "miner " << i;
    }
}

TEST(MultiMineLosses, PlanLengthMismatchThrows) {
    TinyWorld w(2);
    Rng rng(14);
    SupersampleBatch b = draw_supersample_batch(w.gens, w.miners, w.prior, 4, rng);
    AssignmentPlan plan;
    plan.m = {0, 1};
    plan.r = {1, 0};
    Tensor target = rng.normal_tensor({4, 64});
    EXPECT_THROW(multi_mine_losses(w.critic, b, plan, MultiMode::max, 10.0, target, rng),
                 ArgumentError);
}

TEST(InferenceSampling, OneHotSelectorUsesOnlyThatBranch) {
    TinyWorld w(2);
    Selector s(2, 5);
    std::vector<int64_t> all_zero(10, 0);
    s.update(all_zero);
    Rng rng(15);
    std::vector<int64_t> branches;
    sample_inference_multi(s, w.gens, w.miners, w.prior, 50, rng, &branches);
    for (int64_t b : branches) EXPECT_EQ(b, 0);
}

TEST(InferenceSampling, BalancedSelectorSplitsWithinBinomialBound) {
    TinyWorld w(2);
    Selector s(2, 5);
    s.update({0, 1});  // 50/50
    Rng rng(16);
    std::vector<int64_t> branches;
    sample_inference_multi(s, w.gens, w.miners, w.prior, 10000, rng, &branches);
    int64_t zeros = std::count(branches.begin(), branches.end(), 0);
    EXPECT_NEAR(static_cast<double>(zeros), 5000.0, 150.0);
}

TEST(InferenceSampling, NonPositiveCountThrows) {
    TinyWorld w(2);
    Selector s(2, 5);
    Rng rng(17);
    EXPECT_THROW(sample_inference_multi(s, w.gens, w.miners, w.prior, 0, rng), ArgumentError);
}

TEST(InferenceSampling, FixedSeedReproducible) {
    TinyWorld w(2);
    Selector s(2, 5);
    s.update({0, 1});
    auto run = [&]() {
        Rng rng(18);
        return sample_inference_multi(s, w.gens, w.miners, w.prior, 6, rng);
    };
    EXPECT_EQ(run().data, run().data);
}

TEST(TrainMultiMining, SmokeRunTracksSelectorTrajectory) {
    std::vector<Checkpoint> sources{make_source_checkpoint(21), make_source_checkpoint(22)};
    MultiMiningConfig cfg;
    cfg.train.iterations = 2;
    cfg.train.batch_size = 4;
    cfg.train.critic_steps = 2;
    cfg.train.seed = 30;

    Rng data_rng(19);
    ImageSet target;
    target.shape = {1, 8, 8};
    target.images = data_rng.normal_tensor({12, 64});

    Rng rng(20);
    auto res = train_multi_mining(cfg, sources, target, rng);
    EXPECT_EQ(res.miners.size(), 2u);
    EXPECT_EQ(res.pi_trajectory.size(), 4u);  // iterations * critic_steps
    for (const auto& pi : res.pi_trajectory) {
        double sum = 0;
        for (double p : pi) sum += p;
        EXPECT_NEAR(sum, 1.0, 1e-12);
    }
}

TEST(TrainMultiMining, FixedSeedReproducible) {
    std::vector<Checkpoint> sources{make_source_checkpoint(23), make_source_checkpoint(24)};
    MultiMiningConfig cfg;
    cfg.train.iterations = 1;
    cfg.train.batch_size = 4;
    cfg.train.critic_steps = 1;
    cfg.train.seed = 31;

    auto run = [&]() {
        Rng data_rng(25);
        ImageSet target;
        target.shape = {1, 8, 8};
        target.images = data_rng.normal_tensor({8, 64});
        Rng rng(26);
        auto res = train_multi_mining(cfg, sources, target, rng);
        return res.miners[0].layers[0].W->value.data;
    };
    EXPECT_EQ(run(), run());
}
