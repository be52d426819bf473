#pragma once

// Sparse subnetwork selection for the critic: score weights by their
// effect on gradient flow under the target data, admit the top budget
// fraction, and freeze every filter without enough admitted weights.

#include <algorithm>
#include <map>
#include <numeric>

#include "minelab/freeze.hpp"
#include "minelab/gan.hpp"

namespace minelab {

enum class ScoreDirection { low_score_important, high_score_important };
enum class SelectGranularity { filter, weight };

struct SubnetworkConfig {
    double weight_budget = 0.30;  // fraction of weights admitted
    int64_t theta_f = 6;          // min admitted weights for a trainable filter
    ScoreDirection direction = ScoreDirection::low_score_important;
    SelectGranularity granularity = SelectGranularity::filter;

    void validate() const {
        if (!(weight_budget > 0.0) || weight_budget > 1.0)
            throw ConfigError("SubnetworkConfig: weight_budget must be in (0,1]");
        if (theta_f <= 0) throw ConfigError("SubnetworkConfig: theta_f must be positive");
    }
};

/// -mean critic score over the batch.
inline Var critic_real_loss(const CriticNet& critic, const Tensor& target_batch) {
    if (target_batch.shape.empty() || target_batch.shape[0] == 0)
        throw ArgumentError("critic_real_loss: empty batch");
    return ad::neg(ad::mean(critic.forward(ad::constant(target_batch))));
}

struct GraspScores {
    std::vector<Tensor> scores;  // -w (.) Hg, aligned with critic params
    std::vector<Tensor> g;       // gradient, retained for auditing
    std::vector<Tensor> hg;      // Hessian-vector product, retained for auditing

    int64_t total() const {
        int64_t n = 0;
        for (const auto& s : scores) n += s.numel();
        return n;
    }
};

/// Per-weight scores -w (.) Hg where g is the gradient of the real-data
/// critic loss and Hg its Hessian-vector product along g (computed by a
/// second backward pass through the gradient graph).
inline GraspScores grasp_scores(const CriticNet& critic, const Tensor& target_batch) {
    auto named = critic.named_params();
    auto params = values_of(named);
    Var loss = critic_real_loss(critic, target_batch);
    auto g = ad::grad(loss, params);

    // dot(g, stop_grad(g)); differentiating it w.r.t. w gives Hg
    Var dot;
    for (size_t i = 0; i < params.size(); ++i) {
        Var term = ad::sum(ad::mul(g[i], ad::detach(g[i])));
        dot = dot ? ad::add(dot, term) : term;
    }
    auto hg = ad::grad(dot, params);

    GraspScores out;
    for (size_t i = 0; i < params.size(); ++i) {
        if (!g[i]->value.all_finite() || !hg[i]->value.all_finite())
            throw NumericalError("grasp_scores: non-finite gradient flow in parameter '" +
                                 named[i].first + "'");
        out.g.push_back(g[i]->value);
        out.hg.push_back(hg[i]->value);
        Tensor s(params[i]->value.shape);
        for (int64_t e = 0; e < s.numel(); ++e)
            s.data[e] = -params[i]->value.data[e] * hg[i]->value.data[e];
        out.scores.push_back(std::move(s));
    }
    return out;
}

namespace detail {

/// Admitted flags for the top weight_budget fraction on the importance
/// side. Ties resolved by flattened element order so that growing the
/// budget never drops an admitted weight.
inline std::vector<std::vector<uint8_t>> admit_weights(const GraspScores& scores,
                                                       const SubnetworkConfig& cfg) {
    int64_t total = scores.total();
    int64_t admit = static_cast<int64_t>(std::llround(cfg.weight_budget * static_cast<double>(total)));
    admit = std::clamp<int64_t>(admit, 1, total);

    struct Item { double key; int64_t flat; };
    std::vector<Item> items;
    items.reserve(total);
    int64_t flat = 0;
    for (const auto& s : scores.scores)
        for (double v : s.data) {
            double key = cfg.direction == ScoreDirection::low_score_important ? v : -v;
            items.push_back({key, flat++});
        }
    std::nth_element(items.begin(), items.begin() + admit - 1, items.end(),
                     [](const Item& a, const Item& b) {
                         return a.key < b.key || (a.key == b.key && a.flat < b.flat);
                     });

    std::vector<std::vector<uint8_t>> flags;
    for (const auto& s : scores.scores) flags.emplace_back(s.numel(), 0);
    auto mark = [&](int64_t f) {
        for (auto& fv : flags) {
            if (f < static_cast<int64_t>(fv.size())) {
                fv[f] = 1;
                return;
            }
            f -= static_cast<int64_t>(fv.size());
        }
    };
    for (int64_t i = 0; i < admit; ++i) mark(items[i].flat);
    return flags;
}

}  // namespace detail

/// Filter-level selection: a filter is trainable iff it holds at least
/// theta_f admitted weights; everything outside trainable filters freezes.
/// Weight granularity keeps the admitted set as-is (the *S^3 comparison mode).
inline FreezeMask select_trainable_filters(const GraspScores& scores, const FilterIndex& fi,
                                           const std::vector<Var>& params,
                                           const SubnetworkConfig& cfg) {
    cfg.validate();
    if (scores.scores.size() != params.size())
        throw ConfigError("select_trainable_filters: score/parameter misalignment");
    for (size_t i = 0; i < params.size(); ++i)
        if (!scores.scores[i].same_shape(params[i]->value))
            throw ConfigError("select_trainable_filters: score shape mismatch at index " +
                              std::to_string(i));

    auto admitted = detail::admit_weights(scores, cfg);

    if (cfg.granularity == SelectGranularity::weight) {
        FreezeMask m;
        m.weight_view = admitted;
        for (const auto& g : fi) {
            int64_t n = 0;
            for (const auto& [p, idx] : g.elems)
                for (int64_t e : idx) n += admitted[p][e];
            m.filter_names.push_back(g.name);
            m.filter_trainable.push_back(n > 0 ? 1 : 0);
        }
        return m;
    }

    int64_t max_filter = 0;
    for (const auto& g : fi) max_filter = std::max(max_filter, g.weight_count());
    if (cfg.theta_f > max_filter)
        throw ConfigError("select_trainable_filters: theta_f " + std::to_string(cfg.theta_f) +
                          " exceeds the largest filter size " + std::to_string(max_filter) +
                          "; no filter can qualify");

    std::vector<uint8_t> flags;
    flags.reserve(fi.size());
    for (const auto& g : fi) {
        int64_t n = 0;
        for (const auto& [p, idx] : g.elems)
            for (int64_t e : idx) n += admitted[p][e];
        flags.push_back(n >= cfg.theta_f ? 1 : 0);
    }
    return expand_mask(fi, flags, params);
}

/// Per-layer trainable weight fractions (layer = group name prefix).
inline std::map<std::string, double> mask_layer_report(const FreezeMask& mask,
                                                       const FilterIndex& fi) {
    std::map<std::string, std::pair<int64_t, int64_t>> acc;  // trainable, total
    for (size_t gi = 0; gi < fi.size(); ++gi) {
        std::string layer = fi[gi].name.substr(0, fi[gi].name.rfind('.'));
        auto& [tr, tot] = acc[layer];
        for (const auto& [p, idx] : fi[gi].elems)
            for (int64_t e : idx) {
                tr += mask.weight_view[p][e];
                ++tot;
            }
    }
    std::map<std::string, double> out;
    for (const auto& [layer, c] : acc)
        out[layer] = c.second ? static_cast<double>(c.first) / static_cast<double>(c.second) : 0.0;
    return out;
}

}  // namespace minelab
