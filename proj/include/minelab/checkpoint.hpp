#pragma once

// Checkpoint container: named double arrays with shape headers plus a JSON
// metadata block (architecture descriptors, selector state, freeze mask,
// fused-prior description, RNG state, config fingerprint). Round-trips are
// bit-exact: tensor payloads are stored as raw little-endian doubles.

#include <cstring>
#include <filesystem>
#include <fstream>
#include <map>

#include <nlohmann/json.hpp>

#include "minelab/freeze.hpp"
#include "minelab/models.hpp"

namespace minelab {

struct Checkpoint {
    static constexpr uint32_t kVersion = 1;
    static constexpr char kMagic[4] = {'M', 'L', 'C', 'P'};

    nlohmann::json meta = nlohmann::json::object();
    std::map<std::string, Tensor> blobs;

    // ---- parameter plumbing ----

    void put_params(const NamedParams& np) {
        for (const auto& [name, var] : np) blobs[name] = var->value;
    }

    /// Copy stored arrays into an existing network's parameters.
    void get_params(const NamedParams& np) const {
        for (const auto& [name, var] : np) {
            auto it = blobs.find(name);
            if (it == blobs.end())
                throw ConfigError("Checkpoint: missing parameter blob '" + name + "'");
            if (!(it->second.shape == var->value.shape))
                throw ConfigError("Checkpoint: shape mismatch for '" + name + "': stored " +
                                  shape_str(it->second.shape) + " vs expected " +
                                  shape_str(var->value.shape));
            var->value = it->second;
        }
    }

    bool has_prefix(const std::string& prefix) const {
        auto it = blobs.lower_bound(prefix);
        return it != blobs.end() && it->first.rfind(prefix, 0) == 0;
    }

    /// FNV-1a over the raw bytes of all blobs under a name prefix.
    uint64_t params_hash(const std::string& prefix) const {
        uint64_t h = 1469598103934665603ull;
        for (const auto& [name, t] : blobs) {
            if (name.rfind(prefix, 0) != 0) continue;
            for (double v : t.data) {
                uint64_t bits;
                std::memcpy(&bits, &v, sizeof(bits));
                for (int b = 0; b < 8; ++b) {
                    h ^= (bits >> (8 * b)) & 0xff;
                    h *= 1099511628211ull;
                }
            }
        }
        return h;
    }

    // ---- IO ----

    void save(const std::filesystem::path& path) const {
        nlohmann::json dir = nlohmann::json::array();
        for (const auto& [name, t] : blobs)
            dir.push_back({{"name", name}, {"shape", t.shape}});
        nlohmann::json header{{"version", kVersion}, {"meta", meta}, {"blobs", dir}};
        std::string hs = header.dump();

        std::ofstream os(path, std::ios::binary);
        if (!os) throw ArgumentError("Checkpoint: cannot write " + path.string());
        os.write(kMagic, 4);
        uint32_t ver = kVersion;
        uint64_t hlen = hs.size();
        os.write(reinterpret_cast<const char*>(&ver), sizeof(ver));
        os.write(reinterpret_cast<const char*>(&hlen), sizeof(hlen));
        os.write(hs.data(), static_cast<std::streamsize>(hs.size()));
        for (const auto& [name, t] : blobs)
            os.write(reinterpret_cast<const char*>(t.data.data()),
                     static_cast<std::streamsize>(t.data.size() * sizeof(double)));
    }

    static Checkpoint load(const std::filesystem::path& path) {
        std::ifstream is(path, std::ios::binary);
        if (!is) throw ArgumentError("Checkpoint: cannot read " + path.string());
        char magic[4];
        uint32_t ver = 0;
        uint64_t hlen = 0;
        is.read(magic, 4);
        is.read(reinterpret_cast<char*>(&ver), sizeof(ver));
        if (!is || std::memcmp(magic, kMagic, 4) != 0)
            throw ConfigError("Checkpoint: bad magic in " + path.string());
        if (ver != kVersion)
            throw ConfigError("Checkpoint: unsupported format version " + std::to_string(ver));
        is.read(reinterpret_cast<char*>(&hlen), sizeof(hlen));
        std::string hs(hlen, '\0');
        is.read(hs.data(), static_cast<std::streamsize>(hlen));
        nlohmann::json header = nlohmann::json::parse(hs);

        Checkpoint ck;
        ck.meta = header.at("meta");
        for (const auto& entry : header.at("blobs")) {
            Shape shape = entry.at("shape").get<Shape>();
            Tensor t(shape);
            is.read(reinterpret_cast<char*>(t.data.data()),
                    static_cast<std::streamsize>(t.data.size() * sizeof(double)));
            if (!is) throw ConfigError("Checkpoint: truncated payload in " + path.string());
            ck.blobs[entry.at("name").get<std::string>()] = std::move(t);
        }
        return ck;
    }
};

// ---------------------------------------------------------------------------
// architecture descriptors: enough to rebuild each network family

struct ArchConfig {
    int64_t latent_dim = 128;
    ImageShape img{1, 28, 28};
    int64_t gen_base = 16;
    int64_t critic_base = 16;
    int64_t critic_feat = 64;
    std::vector<int64_t> miner_hidden{128};  // between latent_dim in and out
    int64_t embed_dim = 16;
    int64_t num_classes = 10;

    std::vector<int64_t> miner_widths() const {
        std::vector<int64_t> w{latent_dim};
        w.insert(w.end(), miner_hidden.begin(), miner_hidden.end());
        w.push_back(latent_dim);
        return w;
    }
    std::vector<int64_t> class_miner_widths() const {
        std::vector<int64_t> w{latent_dim};
        w.insert(w.end(), miner_hidden.begin(), miner_hidden.end());
        w.push_back(embed_dim);
        return w;
    }
};

inline void to_json(nlohmann::json& j, const ImageShape& s) {
    j = {{"channels", s.channels}, {"height", s.height}, {"width", s.width}};
}
inline void from_json(const nlohmann::json& j, ImageShape& s) {
    j.at("channels").get_to(s.channels);
    j.at("height").get_to(s.height);
    j.at("width").get_to(s.width);
}
inline void to_json(nlohmann::json& j, const ArchConfig& a) {
    j = {{"latent_dim", a.latent_dim}, {"img", a.img},
         {"gen_base", a.gen_base},     {"critic_base", a.critic_base},
         {"critic_feat", a.critic_feat}, {"miner_hidden", a.miner_hidden},
         {"embed_dim", a.embed_dim},   {"num_classes", a.num_classes}};
}
inline void from_json(const nlohmann::json& j, ArchConfig& a) {
    j.at("latent_dim").get_to(a.latent_dim);
    j.at("img").get_to(a.img);
    j.at("gen_base").get_to(a.gen_base);
    j.at("critic_base").get_to(a.critic_base);
    j.at("critic_feat").get_to(a.critic_feat);
    j.at("miner_hidden").get_to(a.miner_hidden);
    j.at("embed_dim").get_to(a.embed_dim);
    j.at("num_classes").get_to(a.num_classes);
}

inline ArchConfig arch_of(const Checkpoint& ck) {
    if (!ck.meta.contains("arch")) throw ConfigError("Checkpoint: missing arch descriptor");
    return ck.meta.at("arch").get<ArchConfig>();
}

// rebuild helpers: construct with a throwaway rng, then overwrite weights

inline GeneratorNet load_generator(const Checkpoint& ck, const std::string& prefix = "gen") {
    ArchConfig a = arch_of(ck);
    Rng tmp(0);
    GeneratorNet g(a.latent_dim, a.img, a.gen_base, tmp);
    ck.get_params(g.named_params(prefix));
    return g;
}

inline CriticNet load_critic(const Checkpoint& ck, const std::string& prefix = "critic") {
    ArchConfig a = arch_of(ck);
    Rng tmp(0);
    CriticNet d(a.img, a.critic_base, a.critic_feat, tmp);
    ck.get_params(d.named_params(prefix));
    return d;
}

inline MinerNet load_miner(const Checkpoint& ck, const std::string& prefix = "miner") {
    ArchConfig a = arch_of(ck);
    Rng tmp(0);
    MinerNet m(a.miner_widths(), tmp);
    ck.get_params(m.named_params(prefix));
    return m;
}

// ---- freeze mask persistence (filter flags; weight view rebuilt on use) ----

inline void put_mask(Checkpoint& ck, const FreezeMask& mask) {
    nlohmann::json j;
    j["filter_names"] = mask.filter_names;
    j["filter_trainable"] = mask.filter_trainable;
    ck.meta["freeze_mask"] = j;
}

inline bool has_mask(const Checkpoint& ck) { return ck.meta.contains("freeze_mask"); }

/// Rebuild the per-weight view against a concrete critic. Names must match
/// the critic's filter index exactly.
inline FreezeMask get_mask(const Checkpoint& ck, const CriticNet& critic) {
    if (!has_mask(ck)) throw ConfigError("Checkpoint: no freeze mask stored");
    const auto& j = ck.meta.at("freeze_mask");
    auto names = j.at("filter_names").get<std::vector<std::string>>();
    auto flags = j.at("filter_trainable").get<std::vector<uint8_t>>();
    auto fi = critic.filter_index();
    if (names.size() != fi.size())
        throw ConfigError("Checkpoint: freeze mask filter count does not match critic");
    for (size_t i = 0; i < fi.size(); ++i)
        if (fi[i].name != names[i])
            throw ConfigError("Checkpoint: freeze mask names a filter '" + names[i] +
                              "' absent from the critic (found '" + fi[i].name + "')");
    return expand_mask(fi, flags, values_of(critic.named_params()));
}

/// FNV-1a fingerprint of a canonical JSON dump.
inline uint64_t json_fingerprint(const nlohmann::json& j) {
    std::string s = j.dump();
    uint64_t h = 1469598103934665603ull;
    for (unsigned char c : s) {
        h ^= c;
        h *= 1099511628211ull;
    }
    return h;
}

}  // namespace minelab
