#pragma once

#include <cstdint>
#include <random>
#include <sstream>
#include <string>

#include "minelab/tensor.hpp"

namespace minelab {

/// Seeded RNG whose full state round-trips through checkpoints.
/// Single engine per training run keeps runs bit-reproducible.
class Rng {
public:
    explicit Rng(uint64_t seed = 0) : engine_(seed) {}

    std::mt19937_64& engine() { return engine_; }

    double uniform(double lo = 0.0, double hi = 1.0) {
        return std::uniform_real_distribution<double>(lo, hi)(engine_);
    }

    int64_t uniform_int(int64_t lo, int64_t hi) {  // inclusive bounds
        return std::uniform_int_distribution<int64_t>(lo, hi)(engine_);
    }

    double normal(double mean = 0.0, double stddev = 1.0) {
        return std::normal_distribution<double>(mean, stddev)(engine_);
    }

    Tensor normal_tensor(Shape s, double mean = 0.0, double stddev = 1.0) {
        Tensor t(std::move(s));
        std::normal_distribution<double> d(mean, stddev);
        for (double& v : t.data) v = d(engine_);
        return t;
    }

    /// Fisher-Yates permutation of 0..n-1.
    std::vector<int64_t> permutation(int64_t n) {
        std::vector<int64_t> p(n);
        for (int64_t i = 0; i < n; ++i) p[i] = i;
        for (int64_t i = n - 1; i > 0; --i) {
            int64_t j = uniform_int(0, i);
            std::swap(p[i], p[j]);
        }
        return p;
    }

    /// Categorical draw from non-negative weights summing to ~1.
    int64_t categorical(const std::vector<double>& pi) {
        double u = uniform();
        double acc = 0.0;
        for (size_t i = 0; i < pi.size(); ++i) {
            acc += pi[i];
            if (u < acc) return static_cast<int64_t>(i);
        }
        return static_cast<int64_t>(pi.size()) - 1;
    }

    std::string save_state() const {
        std::ostringstream os;
        os << engine_;
        return os.str();
    }

    void load_state(const std::string& s) {
        std::istringstream is(s);
        is >> engine_;
    }

private:
    std::mt19937_64 engine_;
};

}  // namespace minelab
