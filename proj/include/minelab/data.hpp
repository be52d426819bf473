#pragma once

// Lightweight labeled image container shared by training and evaluation.

#include "minelab/errors.hpp"
#include "minelab/models.hpp"

namespace minelab {

struct ImageSet {
    ImageShape shape;
    Tensor images;                 // [N, C*H*W], values in [-1, 1]
    std::vector<int64_t> labels;   // optional, empty when unlabeled

    int64_t size() const { return images.shape.empty() ? 0 : images.shape[0]; }

    bool labeled() const { return !labels.empty(); }

    Tensor batch(const std::vector<int64_t>& idx) const {
        Tensor out({static_cast<int64_t>(idx.size()), shape.numel()});
        for (size_t j = 0; j < idx.size(); ++j) {
            if (idx[j] < 0 || idx[j] >= size())
                throw ArgumentError("ImageSet::batch: index out of range");
            std::copy_n(images.data.data() + idx[j] * shape.numel(), shape.numel(),
                        out.data.data() + static_cast<int64_t>(j) * shape.numel());
        }
        return out;
    }

    ImageSet subset(const std::vector<int64_t>& idx) const {
        ImageSet out;
        out.shape = shape;
        out.images = batch(idx);
        if (labeled()) {
            out.labels.reserve(idx.size());
            for (int64_t i : idx) out.labels.push_back(labels[i]);
        }
        return out;
    }
};

/// Sample a batch of row indices uniformly with replacement.
inline std::vector<int64_t> sample_indices(Rng& rng, int64_t n, int64_t batch) {
    std::vector<int64_t> idx(batch);
    for (int64_t i = 0; i < batch; ++i) idx[i] = rng.uniform_int(0, n - 1);
    return idx;
}

}  // namespace minelab
