#pragma once

// Filter-granular trainable/frozen flags and their per-weight view.

#include <cstdint>

#include "minelab/models.hpp"

namespace minelab {

struct FreezeMask {
    std::vector<std::string> filter_names;
    std::vector<uint8_t> filter_trainable;  // 1 = trainable
    // per-parameter-tensor element flags, aligned with the network's
    // named_params order; 1 = trainable
    std::vector<std::vector<uint8_t>> weight_view;

    bool empty() const { return weight_view.empty(); }

    int64_t trainable_weight_count() const {
        int64_t n = 0;
        for (const auto& wv : weight_view)
            for (uint8_t f : wv) n += f;
        return n;
    }

    int64_t total_weight_count() const {
        int64_t n = 0;
        for (const auto& wv : weight_view) n += static_cast<int64_t>(wv.size());
        return n;
    }

    /// FNV-1a over the per-weight view; stable identity for audit logs.
    uint64_t hash() const {
        uint64_t h = 1469598103934665603ull;
        for (const auto& wv : weight_view)
            for (uint8_t f : wv) {
                h ^= f;
                h *= 1099511628211ull;
            }
        return h;
    }
};

/// Expand per-filter flags into a per-weight view over `params`.
/// Elements not covered by any group default to trainable (the critic's
/// filter_index partitions everything, so this only matters for nets with
/// auxiliary always-trainable parameters).
inline FreezeMask expand_mask(const FilterIndex& fi, const std::vector<uint8_t>& flags,
                              const std::vector<Var>& params) {
    if (fi.size() != flags.size())
        throw ConfigError("expand_mask: flag count " + std::to_string(flags.size()) +
                          " != filter count " + std::to_string(fi.size()));
    FreezeMask m;
    m.weight_view.reserve(params.size());
    for (const auto& p : params)
        m.weight_view.emplace_back(p->value.numel(), 1);
    for (size_t gi = 0; gi < fi.size(); ++gi) {
        m.filter_names.push_back(fi[gi].name);
        m.filter_trainable.push_back(flags[gi]);
        for (const auto& [pidx, elems] : fi[gi].elems) {
            if (pidx < 0 || pidx >= static_cast<int>(params.size()))
                throw ConfigError("expand_mask: filter group '" + fi[gi].name +
                                  "' refers to missing parameter index " + std::to_string(pidx));
            for (int64_t e : elems) {
                if (e < 0 || e >= static_cast<int64_t>(m.weight_view[pidx].size()))
                    throw ConfigError("expand_mask: filter group '" + fi[gi].name +
                                      "' element out of range");
                m.weight_view[pidx][e] = flags[gi];
            }
        }
    }
    return m;
}

/// All-or-none check: the per-weight view must be constant within each group.
inline bool mask_is_filter_granular(const FreezeMask& m, const FilterIndex& fi) {
    for (size_t gi = 0; gi < fi.size(); ++gi)
        for (const auto& [pidx, elems] : fi[gi].elems)
            for (int64_t e : elems)
                if (m.weight_view[pidx][e] != m.filter_trainable[gi]) return false;
    return true;
}

}  // namespace minelab
