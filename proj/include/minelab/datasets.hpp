#pragma once

// Corpora and scenario construction. Two procedural desk-scale corpora
// (digit glyphs, icon shapes) plus IDX and PGM-folder ingestion, and the
// seeded source/target split logic used by every experiment.

#include <algorithm>
#include <filesystem>
#include <fstream>
#include <map>
#include <set>

#include <nlohmann/json.hpp>

#include "minelab/data.hpp"
#include "minelab/rng.hpp"

namespace minelab {

// ---------------------------------------------------------------------------
// procedural digit corpus

namespace detail {

/// 5x7 bitmap font, one row per byte, low 5 bits used.
inline const uint8_t* digit_glyph(int64_t d) {
    static const uint8_t glyphs[10][7] = {
        {0x0E, 0x11, 0x13, 0x15, 0x19, 0x11, 0x0E},  // 0
        {0x04, 0x0C, 0x04, 0x04, 0x04, 0x04, 0x0E},  // 1
        {0x0E, 0x11, 0x01, 0x02, 0x04, 0x08, 0x1F},  // 2
        {0x1F, 0x02, 0x04, 0x02, 0x01, 0x11, 0x0E},  // 3
        {0x02, 0x06, 0x0A, 0x12, 0x1F, 0x02, 0x02},  // 4
        {0x1F, 0x10, 0x1E, 0x01, 0x01, 0x11, 0x0E},  // 5
        {0x06, 0x08, 0x10, 0x1E, 0x11, 0x11, 0x0E},  // 6
        {0x1F, 0x01, 0x02, 0x04, 0x08, 0x08, 0x08},  // 7
        {0x0E, 0x11, 0x11, 0x0E, 0x11, 0x11, 0x0E},  // 8
        {0x0E, 0x11, 0x11, 0x0F, 0x01, 0x02, 0x0C},  // 9
    };
    return glyphs[d];
}

}  // namespace detail

struct CorpusConfig {
    int64_t per_class = 1200;
    int64_t size = 28;       // square canvas
    int64_t scale = 3;       // glyph cell size in pixels
    int64_t jitter = 2;      // max absolute offset from center
    double noise = 0.05;     // additive pixel noise stddev
    uint64_t seed = 0;
};

/// Digits 0-9 rendered with position jitter, intensity jitter, and pixel
/// noise. Pixels in [-1, 1], background -1.
inline ImageSet make_digit_corpus(const CorpusConfig& cfg,
                                  const std::vector<int64_t>& classes = {0, 1, 2, 3, 4, 5, 6, 7,
                                                                         8, 9}) {
    const int64_t S = cfg.size;
    int64_t gw = 5 * cfg.scale, gh = 7 * cfg.scale;
    if (gw > S || gh > S) throw ArgumentError("make_digit_corpus: glyph larger than canvas");
    Rng rng(cfg.seed);
    ImageSet out;
    out.shape = {1, S, S};
    out.images = Tensor({cfg.per_class * static_cast<int64_t>(classes.size()), S * S});
    int64_t row = 0;
    for (int64_t cls : classes) {
        if (cls < 0 || cls > 9) throw ArgumentError("make_digit_corpus: digit out of range");
        const uint8_t* glyph = detail::digit_glyph(cls);
        for (int64_t s = 0; s < cfg.per_class; ++s, ++row) {
            double* px = out.images.data.data() + row * S * S;
            std::fill(px, px + S * S, -1.0);
            int64_t ox = (S - gw) / 2 + rng.uniform_int(-cfg.jitter, cfg.jitter);
            int64_t oy = (S - gh) / 2 + rng.uniform_int(-cfg.jitter, cfg.jitter);
            double ink = rng.uniform(0.6, 1.0);
            for (int64_t r = 0; r < 7; ++r)
                for (int64_t c = 0; c < 5; ++c) {
                    if (!((glyph[r] >> (4 - c)) & 1)) continue;
                    for (int64_t dy = 0; dy < cfg.scale; ++dy)
                        for (int64_t dx = 0; dx < cfg.scale; ++dx) {
                            int64_t y = oy + r * cfg.scale + dy, x = ox + c * cfg.scale + dx;
                            px[y * S + x] = -1.0 + 2.0 * ink;
                        }
                }
            if (cfg.noise > 0)
                for (int64_t i = 0; i < S * S; ++i)
                    px[i] = std::clamp(px[i] + rng.normal(0.0, cfg.noise), -1.0, 1.0);
            out.labels.push_back(cls);
        }
    }
    return out;
}

/// Icon shapes standing in for a second image domain:
/// 0 ring, 1 disk, 2 square outline, 3 cross, 4 triangle.
inline ImageSet make_icon_corpus(const CorpusConfig& cfg,
                                 const std::vector<int64_t>& classes = {0, 1, 2, 3, 4}) {
    const int64_t S = cfg.size;
    Rng rng(cfg.seed);
    ImageSet out;
    out.shape = {1, S, S};
    out.images = Tensor({cfg.per_class * static_cast<int64_t>(classes.size()), S * S});
    int64_t row = 0;
    for (int64_t cls : classes) {
        if (cls < 0 || cls > 4) throw ArgumentError("make_icon_corpus: shape class out of range");
        for (int64_t s = 0; s < cfg.per_class; ++s, ++row) {
            double* px = out.images.data.data() + row * S * S;
            std::fill(px, px + S * S, -1.0);
            double cx = S / 2.0 + rng.uniform_int(-cfg.jitter, cfg.jitter);
            double cy = S / 2.0 + rng.uniform_int(-cfg.jitter, cfg.jitter);
            double rad = S * rng.uniform(0.25, 0.33);
            double ink = -1.0 + 2.0 * rng.uniform(0.6, 1.0);
            for (int64_t y = 0; y < S; ++y)
                for (int64_t x = 0; x < S; ++x) {
                    double dx = x - cx, dy = y - cy;
                    double r = std::sqrt(dx * dx + dy * dy);
                    bool on = false;
                    switch (cls) {
                        case 0: on = std::abs(r - rad) <= 1.5; break;
                        case 1: on = r <= rad; break;
                        case 2:
                            on = std::max(std::abs(dx), std::abs(dy)) <= rad &&
                                 std::max(std::abs(dx), std::abs(dy)) >= rad - 2.0;
                            break;
                        case 3:
                            on = (std::abs(dx) <= 1.5 || std::abs(dy) <= 1.5) &&
                                 std::max(std::abs(dx), std::abs(dy)) <= rad;
                            break;
                        case 4:
                            on = dy >= -rad && dy <= rad &&
                                 std::abs(dx) <= (dy + rad) / 2.0 * 0.9;
                            break;
                    }
                    if (on) px[y * S + x] = ink;
                }
            if (cfg.noise > 0)
                for (int64_t i = 0; i < S * S; ++i)
                    px[i] = std::clamp(px[i] + rng.normal(0.0, cfg.noise), -1.0, 1.0);
            out.labels.push_back(cls);
        }
    }
    return out;
}

// ---------------------------------------------------------------------------
// ingestion

namespace detail {

inline uint32_t read_be32(std::istream& is) {
    uint8_t b[4];
    is.read(reinterpret_cast<char*>(b), 4);
    return (uint32_t(b[0]) << 24) | (uint32_t(b[1]) << 16) | (uint32_t(b[2]) << 8) | b[3];
}

}  // namespace detail

/// IDX-format image + label pair (the classic digit-database layout).
/// Pixels are rescaled from [0, 255] to [-1, 1].
inline ImageSet load_idx(const std::filesystem::path& images_path,
                         const std::filesystem::path& labels_path) {
    std::ifstream imgs(images_path, std::ios::binary);
    if (!imgs) throw ArgumentError("load_idx: cannot read " + images_path.string());
    if (detail::read_be32(imgs) != 0x803)
        throw ArgumentError("load_idx: bad image-file magic in " + images_path.string());
    int64_t n = detail::read_be32(imgs);
    int64_t h = detail::read_be32(imgs);
    int64_t w = detail::read_be32(imgs);

    ImageSet out;
    out.shape = {1, h, w};
    out.images = Tensor({n, h * w});
    std::vector<uint8_t> buf(h * w);
    for (int64_t i = 0; i < n; ++i) {
        imgs.read(reinterpret_cast<char*>(buf.data()), h * w);
        if (!imgs) throw ArgumentError("load_idx: truncated image payload");
        for (int64_t p = 0; p < h * w; ++p)
            out.images.at(i, p) = buf[p] / 127.5 - 1.0;
    }

    std::ifstream lbls(labels_path, std::ios::binary);
    if (!lbls) throw ArgumentError("load_idx: cannot read " + labels_path.string());
    if (detail::read_be32(lbls) != 0x801)
        throw ArgumentError("load_idx: bad label-file magic in " + labels_path.string());
    int64_t nl = detail::read_be32(lbls);
    if (nl != n) throw ArgumentError("load_idx: image/label count mismatch");
    for (int64_t i = 0; i < n; ++i) {
        char c;
        lbls.read(&c, 1);
        out.labels.push_back(static_cast<uint8_t>(c));
    }
    return out;
}

/// Image-folder ingestion: each subdirectory names an integer class and
/// holds binary 8-bit PGM (P5) files of one common size.
inline ImageSet load_pgm_folder(const std::filesystem::path& root) {
    namespace fs = std::filesystem;
    if (!fs::is_directory(root))
        throw ArgumentError("load_pgm_folder: not a directory: " + root.string());

    std::vector<std::pair<int64_t, fs::path>> files;
    for (const auto& dir : fs::directory_iterator(root)) {
        if (!dir.is_directory()) continue;
        int64_t cls;
        try {
            cls = std::stoll(dir.path().filename().string());
        } catch (...) {
            throw ArgumentError("load_pgm_folder: class directory name is not an integer: " +
                                dir.path().filename().string());
        }
        for (const auto& f : fs::directory_iterator(dir.path()))
            if (f.path().extension() == ".pgm") files.emplace_back(cls, f.path());
    }
    std::sort(files.begin(), files.end());
    if (files.empty()) throw ArgumentError("load_pgm_folder: no .pgm files under " + root.string());

    ImageSet out;
    int64_t h = -1, w = -1;
    for (size_t i = 0; i < files.size(); ++i) {
        std::ifstream is(files[i].second, std::ios::binary);
        std::string magic;
        is >> magic;
        if (magic != "P5")
            throw ArgumentError("load_pgm_folder: not a binary PGM: " + files[i].second.string());
        int64_t fw, fh, maxv;
        is >> fw >> fh >> maxv;
        is.get();  // single whitespace before payload
        if (maxv != 255)
            throw ArgumentError("load_pgm_folder: only 8-bit PGM supported");
        if (h < 0) {
            h = fh;
            w = fw;
            out.shape = {1, h, w};
            out.images = Tensor({static_cast<int64_t>(files.size()), h * w});
        } else if (fh != h || fw != w) {
            throw ArgumentError("load_pgm_folder: image size mismatch in " +
                                files[i].second.string());
        }
        std::vector<uint8_t> buf(h * w);
        is.read(reinterpret_cast<char*>(buf.data()), h * w);
        if (!is) throw ArgumentError("load_pgm_folder: truncated " + files[i].second.string());
        for (int64_t p = 0; p < h * w; ++p)
            out.images.at(static_cast<int64_t>(i), p) = buf[p] / 127.5 - 1.0;
        out.labels.push_back(files[i].first);
    }
    return out;
}

/// Binary PGM writer for sample inspection; maps [-1, 1] to [0, 255].
inline void save_pgm(const std::filesystem::path& path, const Tensor& images, int64_t row,
                     int64_t h, int64_t w) {
    std::ofstream os(path, std::ios::binary);
    if (!os) throw ArgumentError("save_pgm: cannot write " + path.string());
    os << "P5\n" << w << " " << h << "\n255\n";
    for (int64_t p = 0; p < h * w; ++p) {
        double v = std::clamp((images.at(row, p) + 1.0) * 127.5, 0.0, 255.0);
        os.put(static_cast<char>(static_cast<uint8_t>(v)));
    }
}

// ---------------------------------------------------------------------------
// scenarios

enum class Manifold { on, off };

struct ScenarioSpec {
    std::vector<std::vector<int64_t>> source_class_sets;  // one set per source GAN
    std::vector<int64_t> target_classes;
    std::vector<double> mixture;  // per target class; empty = uniform
    int64_t target_size = 1000;
    uint64_t seed = 0;
    Manifold manifold = Manifold::off;

    void validate() const {
        if (source_class_sets.empty() || target_classes.empty())
            throw ArgumentError("ScenarioSpec: need source and target classes");
        if (target_size <= 0) throw ArgumentError("ScenarioSpec: target_size must be positive");
        if (!mixture.empty()) {
            if (mixture.size() != target_classes.size())
                throw ArgumentError("ScenarioSpec: mixture length != target class count");
            double sum = 0;
            for (double r : mixture) {
                if (r < 0) throw ArgumentError("ScenarioSpec: negative mixture ratio");
                sum += r;
            }
            if (std::abs(sum - 1.0) > 1e-9)
                throw ArgumentError("ScenarioSpec: mixture ratios must sum to 1");
        }
    }

    /// Per-class target counts: nearest-integer rounding, remainder to the
    /// first class.
    std::vector<int64_t> target_counts() const {
        size_t k = target_classes.size();
        std::vector<int64_t> counts(k);
        int64_t total = 0;
        for (size_t i = 0; i < k; ++i) {
            double r = mixture.empty() ? 1.0 / static_cast<double>(k) : mixture[i];
            counts[i] = std::llround(r * static_cast<double>(target_size));
            total += counts[i];
        }
        counts[0] += target_size - total;
        if (counts[0] < 0) throw ArgumentError("ScenarioSpec: rounding produced negative count");
        return counts;
    }
};

struct Scenario {
    std::vector<ImageSet> sources;
    ImageSet target;
    ScenarioSpec spec;

    nlohmann::json manifest() const {
        nlohmann::json srcs = nlohmann::json::array();
        for (const auto& s : spec.source_class_sets) srcs.push_back(s);
        return {{"source_class_sets", srcs},
                {"target_classes", spec.target_classes},
                {"mixture", spec.mixture},
                {"target_size", spec.target_size},
                {"seed", spec.seed},
                {"manifold", spec.manifold == Manifold::off ? "off" : "on"},
                {"source_sizes", [&] {
                     std::vector<int64_t> n;
                     for (const auto& s : sources) n.push_back(s.size());
                     return n;
                 }()},
                {"actual_target_size", target.size()}};
    }
};

/// Deterministic source/target split of a labeled corpus. Target subsets
/// are drawn per class without replacement under the spec seed.
inline Scenario build_scenario(const ScenarioSpec& spec, const ImageSet& raw) {
    spec.validate();
    if (raw.labels.size() != static_cast<size_t>(raw.size()))
        throw ArgumentError("build_scenario: raw data must be labeled");

    std::set<int64_t> all_source;
    for (const auto& set : spec.source_class_sets)
        for (int64_t c : set) all_source.insert(c);
    if (spec.manifold == Manifold::off)
        for (int64_t c : spec.target_classes)
            if (all_source.count(c))
                throw ArgumentError("build_scenario: off-manifold spec but class " +
                                    std::to_string(c) + " appears in both source and target");

    // class -> available row indices, in corpus order
    std::map<int64_t, std::vector<int64_t>> by_class;
    for (int64_t i = 0; i < raw.size(); ++i) by_class[raw.labels[i]].push_back(i);

    Scenario out;
    out.spec = spec;
    for (const auto& set : spec.source_class_sets) {
        std::vector<int64_t> idx;
        for (int64_t i = 0; i < raw.size(); ++i)
            if (std::find(set.begin(), set.end(), raw.labels[i]) != set.end()) idx.push_back(i);
        if (idx.empty()) throw ArgumentError("build_scenario: a source class set has no images");
        out.sources.push_back(raw.subset(idx));
    }

    Rng rng(spec.seed);
    auto counts = spec.target_counts();
    std::vector<int64_t> target_idx;
    for (size_t k = 0; k < spec.target_classes.size(); ++k) {
        auto it = by_class.find(spec.target_classes[k]);
        int64_t avail = it == by_class.end() ? 0 : static_cast<int64_t>(it->second.size());
        if (counts[k] > avail)
            throw ArgumentError("build_scenario: class " +
                                std::to_string(spec.target_classes[k]) + " needs " +
                                std::to_string(counts[k]) + " images but only " +
                                std::to_string(avail) + " available");
        // seeded draw without replacement
        std::vector<int64_t> pool = it->second;
        for (int64_t d = 0; d < counts[k]; ++d) {
            int64_t j = rng.uniform_int(d, static_cast<int64_t>(pool.size()) - 1);
            std::swap(pool[d], pool[j]);
            target_idx.push_back(pool[d]);
        }
    }
    out.target = raw.subset(target_idx);
    return out;
}

}  // namespace minelab
