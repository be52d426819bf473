#pragma once

// Experiment runner: one config describes a scenario, a method, and the
// stage budgets; run_experiment executes the stage chain into an artifact
// directory with resumable markers, metric records, and plot tables.

#include <filesystem>
#include <fstream>

#include "minelab/conditional.hpp"
#include "minelab/datasets.hpp"
#include "minelab/fusion.hpp"
#include "minelab/metrics.hpp"
#include "minelab/mining.hpp"
#include "minelab/multi_source.hpp"
#include "minelab/subnetwork.hpp"

namespace minelab {

// ---------------------------------------------------------------------------
// method selector

enum class Method {
    scratch,
    transfer,
    mine_only,
    minegan,
    minegan_pp,
    multi_max,
    multi_permuted,
    fusion,
    fusion_pp,
    transfer_pp,
};

inline const std::map<std::string, Method>& method_names() {
    static const std::map<std::string, Method> m{
        {"scratch", Method::scratch},
        {"transfer", Method::transfer},
        {"mine_only", Method::mine_only},
        {"minegan", Method::minegan},
        {"minegan_pp", Method::minegan_pp},
        {"multi_max", Method::multi_max},
        {"multi_permuted", Method::multi_permuted},
        {"fusion", Method::fusion},
        {"fusion_pp", Method::fusion_pp},
        {"transfer_pp", Method::transfer_pp},
    };
    return m;
}

inline std::string to_string(Method m) {
    for (const auto& [name, v] : method_names())
        if (v == m) return name;
    throw ConfigError("unknown method enum value");
}

inline Method method_from_string(const std::string& s) {
    auto it = method_names().find(s);
    if (it == method_names().end()) throw ConfigError("unknown method '" + s + "'");
    return it->second;
}

// ---------------------------------------------------------------------------
// config serialization

inline void to_json(nlohmann::json& j, const GanTrainConfig& c) {
    j = {{"lr_g", c.lr_g},           {"lr_d", c.lr_d},
         {"beta1", c.beta1},         {"beta2", c.beta2},
         {"batch_size", c.batch_size}, {"critic_steps", c.critic_steps},
         {"gp_coeff", c.gp_coeff},   {"iterations", c.iterations},
         {"seed", c.seed}};
}
inline void from_json(const nlohmann::json& j, GanTrainConfig& c) {
    c.lr_g = j.value("lr_g", c.lr_g);
    c.lr_d = j.value("lr_d", c.lr_d);
    c.beta1 = j.value("beta1", c.beta1);
    c.beta2 = j.value("beta2", c.beta2);
    c.batch_size = j.value("batch_size", c.batch_size);
    c.critic_steps = j.value("critic_steps", c.critic_steps);
    c.gp_coeff = j.value("gp_coeff", c.gp_coeff);
    c.iterations = j.value("iterations", c.iterations);
    c.seed = j.value("seed", c.seed);
}

inline void to_json(nlohmann::json& j, const MiningConfig& c) {
    j = {{"stage1", c.stage1}, {"stage2", c.stage2}, {"mine_only", c.mine_only},
         {"critic_from_source", c.critic_from_source}, {"target_id", c.target_id}};
}
inline void from_json(const nlohmann::json& j, MiningConfig& c) {
    if (j.contains("stage1")) j.at("stage1").get_to(c.stage1);
    if (j.contains("stage2")) j.at("stage2").get_to(c.stage2);
    c.mine_only = j.value("mine_only", c.mine_only);
    c.critic_from_source = j.value("critic_from_source", c.critic_from_source);
    c.target_id = j.value("target_id", c.target_id);
}

inline void to_json(nlohmann::json& j, const MultiMiningConfig& c) {
    j = {{"train", c.train},
         {"mode", c.mode == MultiMode::max ? "max" : "permuted"},
         {"pairing", c.pairing == PermutedPairing::literal ? "literal" : "branch_only"},
         {"critic_init_index", c.critic_init_index},
         {"selector_window", c.selector_window}};
}
inline void from_json(const nlohmann::json& j, MultiMiningConfig& c) {
    if (j.contains("train")) j.at("train").get_to(c.train);
    if (j.contains("mode")) {
        std::string m = j.at("mode");
        if (m == "max") c.mode = MultiMode::max;
        else if (m == "permuted") c.mode = MultiMode::permuted;
        else throw ConfigError("MultiMiningConfig: unknown mode '" + m + "'");
    }
    if (j.contains("pairing")) {
        std::string p = j.at("pairing");
        if (p == "literal") c.pairing = PermutedPairing::literal;
        else if (p == "branch_only") c.pairing = PermutedPairing::branch_only;
        else throw ConfigError("MultiMiningConfig: unknown pairing '" + p + "'");
    }
    c.critic_init_index = j.value("critic_init_index", c.critic_init_index);
    c.selector_window = j.value("selector_window", c.selector_window);
}

inline void to_json(nlohmann::json& j, const FusionConfig& c) {
    j = {{"train", c.train}, {"prior_delta", c.prior_delta}};
}
inline void from_json(const nlohmann::json& j, FusionConfig& c) {
    if (j.contains("train")) j.at("train").get_to(c.train);
    c.prior_delta = j.value("prior_delta", c.prior_delta);
}

inline void to_json(nlohmann::json& j, const SubnetworkConfig& c) {
    j = {{"weight_budget", c.weight_budget},
         {"theta_f", c.theta_f},
         {"direction", c.direction == ScoreDirection::low_score_important ? "low" : "high"},
         {"granularity", c.granularity == SelectGranularity::filter ? "filter" : "weight"}};
}
inline void from_json(const nlohmann::json& j, SubnetworkConfig& c) {
    c.weight_budget = j.value("weight_budget", c.weight_budget);
    c.theta_f = j.value("theta_f", c.theta_f);
    if (j.contains("direction")) {
        std::string d = j.at("direction");
        if (d == "low") c.direction = ScoreDirection::low_score_important;
        else if (d == "high") c.direction = ScoreDirection::high_score_important;
        else throw ConfigError("SubnetworkConfig: unknown direction '" + d + "'");
    }
    if (j.contains("granularity")) {
        std::string g = j.at("granularity");
        if (g == "filter") c.granularity = SelectGranularity::filter;
        else if (g == "weight") c.granularity = SelectGranularity::weight;
        else throw ConfigError("SubnetworkConfig: unknown granularity '" + g + "'");
    }
}

inline void to_json(nlohmann::json& j, const ExtractorTrainConfig& c) {
    j = {{"lr", c.lr}, {"batch_size", c.batch_size}, {"iterations", c.iterations},
         {"seed", c.seed}};
}
inline void from_json(const nlohmann::json& j, ExtractorTrainConfig& c) {
    c.lr = j.value("lr", c.lr);
    c.batch_size = j.value("batch_size", c.batch_size);
    c.iterations = j.value("iterations", c.iterations);
    c.seed = j.value("seed", c.seed);
}

inline void to_json(nlohmann::json& j, const CorpusConfig& c) {
    j = {{"per_class", c.per_class}, {"size", c.size}, {"scale", c.scale},
         {"jitter", c.jitter}, {"noise", c.noise}, {"seed", c.seed}};
}
inline void from_json(const nlohmann::json& j, CorpusConfig& c) {
    c.per_class = j.value("per_class", c.per_class);
    c.size = j.value("size", c.size);
    c.scale = j.value("scale", c.scale);
    c.jitter = j.value("jitter", c.jitter);
    c.noise = j.value("noise", c.noise);
    c.seed = j.value("seed", c.seed);
}

inline void to_json(nlohmann::json& j, const ScenarioSpec& s) {
    j = {{"source_class_sets", s.source_class_sets},
         {"target_classes", s.target_classes},
         {"mixture", s.mixture},
         {"target_size", s.target_size},
         {"seed", s.seed},
         {"manifold", s.manifold == Manifold::off ? "off" : "on"}};
}
inline void from_json(const nlohmann::json& j, ScenarioSpec& s) {
    if (j.contains("source_class_sets")) j.at("source_class_sets").get_to(s.source_class_sets);
    if (j.contains("target_classes")) j.at("target_classes").get_to(s.target_classes);
    if (j.contains("mixture")) j.at("mixture").get_to(s.mixture);
    s.target_size = j.value("target_size", s.target_size);
    s.seed = j.value("seed", s.seed);
    if (j.contains("manifold")) {
        std::string m = j.at("manifold");
        if (m == "off") s.manifold = Manifold::off;
        else if (m == "on") s.manifold = Manifold::on;
        else throw ConfigError("ScenarioSpec: unknown manifold tag '" + m + "'");
    }
}

// ---------------------------------------------------------------------------

struct ExperimentConfig {
    Method method = Method::minegan;
    std::string corpus = "digits";  // digits | icons | idx:<images>,<labels> | pgm:<dir>
    CorpusConfig corpus_cfg;
    ScenarioSpec scenario;
    ArchConfig arch;
    GanTrainConfig pretrain;
    MiningConfig mining;
    MultiMiningConfig multi;
    FusionConfig fusion;
    SubnetworkConfig subnet;
    ExtractorTrainConfig extractor;
    int64_t extractor_base = 8;
    int64_t extractor_feat = 64;
    int64_t eval_cap = 10000;
    std::string out_dir = "run";
    uint64_t seed = 0;

    static void cfg_check(const GanTrainConfig& c) { c.validate(); }

    bool is_multi() const { return method == Method::multi_max || method == Method::multi_permuted; }
    bool is_fusion() const { return method == Method::fusion || method == Method::fusion_pp; }
    bool is_masked() const {
        return method == Method::minegan_pp || method == Method::fusion_pp ||
               method == Method::transfer_pp;
    }

    /// Mining config with method-implied stage settings resolved.
    MiningConfig mining_for_method() const {
        MiningConfig m = mining;
        m.mine_only = method == Method::mine_only;
        if (m.mine_only) m.stage2.iterations = 0;
        return m;
    }

    void validate() const {
        if (out_dir.empty()) throw ConfigError("ExperimentConfig: out_dir empty");
        scenario.validate();
        pretrain.validate();
        if (is_multi()) {
            cfg_check(multi.train);
            if (scenario.source_class_sets.size() < 2)
                throw ConfigError("multi-source methods need at least two source class sets");
        } else if (is_fusion()) {
            cfg_check(fusion.train);
            mining_for_method().validate();
        } else if (method != Method::scratch) {
            mining_for_method().validate();
        }
        if (is_masked()) subnet.validate();
        if (extractor.iterations <= 0 || extractor.batch_size < 1)
            throw ConfigError("ExperimentConfig: extractor budget must be positive");
    }

    nlohmann::json to_json() const {
        return {{"method", minelab::to_string(method)},
                {"corpus", corpus},
                {"corpus_cfg", corpus_cfg},
                {"scenario", scenario},
                {"arch", arch},
                {"pretrain", pretrain},
                {"mining", mining},
                {"multi", multi},
                {"fusion", fusion},
                {"subnet", subnet},
                {"extractor", extractor},
                {"extractor_base", extractor_base},
                {"extractor_feat", extractor_feat},
                {"eval_cap", eval_cap},
                {"out_dir", out_dir},
                {"seed", seed}};
    }

    static ExperimentConfig from_json(const nlohmann::json& j) {
        ExperimentConfig c;
        if (j.contains("method")) c.method = method_from_string(j.at("method"));
        c.corpus = j.value("corpus", c.corpus);
        if (j.contains("corpus_cfg")) j.at("corpus_cfg").get_to(c.corpus_cfg);
        if (j.contains("scenario")) j.at("scenario").get_to(c.scenario);
        if (j.contains("arch")) j.at("arch").get_to(c.arch);
        if (j.contains("pretrain")) j.at("pretrain").get_to(c.pretrain);
        if (j.contains("mining")) j.at("mining").get_to(c.mining);
        if (j.contains("multi")) j.at("multi").get_to(c.multi);
        if (j.contains("fusion")) j.at("fusion").get_to(c.fusion);
        if (j.contains("subnet")) j.at("subnet").get_to(c.subnet);
        if (j.contains("extractor")) j.at("extractor").get_to(c.extractor);
        c.extractor_base = j.value("extractor_base", c.extractor_base);
        c.extractor_feat = j.value("extractor_feat", c.extractor_feat);
        c.eval_cap = j.value("eval_cap", c.eval_cap);
        c.out_dir = j.value("out_dir", c.out_dir);
        c.seed = j.value("seed", c.seed);
        return c;
    }

    /// Identity of the run; resume markers must match it.
    uint64_t fingerprint() const { return json_fingerprint(to_json()); }
};

// ---------------------------------------------------------------------------
// corpus loading

inline ImageSet load_experiment_corpus(const ExperimentConfig& cfg) {
    if (cfg.corpus == "digits") return make_digit_corpus(cfg.corpus_cfg);
    if (cfg.corpus == "icons") return make_icon_corpus(cfg.corpus_cfg);
    if (cfg.corpus.rfind("idx:", 0) == 0) {
        std::string rest = cfg.corpus.substr(4);
        size_t comma = rest.find(',');
        if (comma == std::string::npos)
            throw ConfigError("corpus: idx form is idx:<images>,<labels>");
        return load_idx(rest.substr(0, comma), rest.substr(comma + 1));
    }
    if (cfg.corpus.rfind("pgm:", 0) == 0) return load_pgm_folder(cfg.corpus.substr(4));
    throw ConfigError("corpus: unknown source '" + cfg.corpus + "'");
}

inline int64_t corpus_num_classes(const ImageSet& raw) {
    int64_t mx = -1;
    for (int64_t l : raw.labels) mx = std::max(mx, l);
    if (mx < 0) throw ConfigError("corpus has no labels");
    return mx + 1;
}

// ---------------------------------------------------------------------------
// feature extractor persistence

inline Checkpoint extractor_to_checkpoint(const FeatureExtractor& fx, int64_t base) {
    Checkpoint ck;
    ck.meta["extractor"] = {{"img", fx.trunk.in_shape}, {"base", base},
                            {"feat", fx.feature_dim()}, {"num_classes", fx.num_classes},
                            {"hash", fx.hash()}};
    ck.meta["stage"] = "extractor";
    ck.put_params(fx.named_params());
    return ck;
}

inline FeatureExtractor extractor_from_checkpoint(const Checkpoint& ck) {
    if (!ck.meta.contains("extractor"))
        throw ConfigError("Checkpoint: no extractor descriptor");
    const auto& d = ck.meta.at("extractor");
    Rng tmp(0);
    FeatureExtractor fx(d.at("img").get<ImageShape>(), d.at("base").get<int64_t>(),
                        d.at("feat").get<int64_t>(), d.at("num_classes").get<int64_t>(), tmp);
    ck.get_params(fx.named_params());
    return fx;
}

// ---------------------------------------------------------------------------
// standalone stage functions (also used directly by tests)

/// Source-domain pretraining packaged as a checkpoint.
inline Checkpoint pretrain_stage(const GanTrainConfig& cfg, const ArchConfig& arch,
                                 const ImageSet& data, Rng& rng, std::ostream* log = nullptr) {
    Rng init_rng(cfg.seed);
    GeneratorNet gen(arch.latent_dim, arch.img, arch.gen_base, init_rng);
    CriticNet critic(arch.img, arch.critic_base, arch.critic_feat, init_rng);
    LatentPrior prior(arch.latent_dim);
    pretrain_source_gan(cfg, data, prior, gen, critic, rng, log);
    Checkpoint ck;
    ck.meta["arch"] = arch;
    ck.meta["stage"] = "pretrained";
    ck.meta["rng_state"] = rng.save_state();
    ck.put_params(gen.named_params());
    ck.put_params(critic.named_params());
    return ck;
}

/// Plain finetuning: continue the adversarial game on the target with both
/// networks released. A freeze mask on the checkpoint still binds the critic.
inline Checkpoint transfer_stage(const GanTrainConfig& cfg, const Checkpoint& pretrained,
                                 const ImageSet& target, Rng& rng, std::ostream* log = nullptr) {
    cfg.validate();
    if (target.size() == 0) throw ArgumentError("transfer_stage: target set empty");
    ArchConfig arch = arch_of(pretrained);
    GeneratorNet gen = load_generator(pretrained);
    CriticNet critic = load_critic(pretrained);

    FreezeMask mask;
    bool masked = has_mask(pretrained);
    if (masked) mask = get_mask(pretrained, critic);

    Adam opt_d(values_of(critic.named_params()), cfg.adam_d());
    Adam opt_g(values_of(gen.named_params()), cfg.adam_g());
    LatentPrior prior(arch.latent_dim);
    auto fake = [&](int64_t n) { return gen.forward(ad::constant(prior.sample(rng, n))); };
    auto D = [&](const Var& x) { return critic.forward(x); };
    adversarial_train(cfg, fake, D, opt_d, opt_g, target, rng, masked ? &mask : nullptr, log);

    Checkpoint out;
    out.meta = pretrained.meta;
    out.meta["stage"] = "transferred";
    out.meta["rng_state"] = rng.save_state();
    out.blobs = pretrained.blobs;
    out.put_params(gen.named_params());
    out.put_params(critic.named_params());
    return out;
}

/// Score the checkpoint's critic on target data and attach the sparse
/// trainable-filter mask. Returns the augmented checkpoint and the
/// per-layer trainable fractions.
inline Checkpoint subnetwork_stage(const SubnetworkConfig& scfg, const Checkpoint& pretrained,
                                   const ImageSet& target, Rng& rng,
                                   std::map<std::string, double>* layer_report = nullptr,
                                   double* weight_fraction = nullptr) {
    scfg.validate();
    if (target.size() == 0) throw ArgumentError("subnetwork_stage: target set empty");
    CriticNet critic = load_critic(pretrained);
    int64_t b = std::min<int64_t>(64, target.size());
    Tensor batch = target.batch(sample_indices(rng, target.size(), b));
    GraspScores scores = grasp_scores(critic, batch);
    FreezeMask mask = select_trainable_filters(scores, critic.filter_index(),
                                               values_of(critic.named_params()), scfg);
    if (layer_report) *layer_report = mask_layer_report(mask, critic.filter_index());
    if (weight_fraction)
        *weight_fraction = static_cast<double>(mask.trainable_weight_count()) /
                           static_cast<double>(mask.total_weight_count());
    Checkpoint out = pretrained;
    put_mask(out, mask);
    out.meta["stage"] = "masked";
    return out;
}

/// Multi-source training result packaged as one checkpoint: per-source
/// generators and miners, the shared critic, and the selector state.
inline Checkpoint multi_to_checkpoint(const MultiMiningResult& res,
                                      const std::vector<Checkpoint>& sources) {
    Checkpoint ck;
    ck.meta["arch"] = arch_of(sources[0]);
    ck.meta["stage"] = "multi";
    ck.meta["num_sources"] = sources.size();
    ck.meta["selector"] = res.selector.to_json();
    for (size_t i = 0; i < sources.size(); ++i) {
        GeneratorNet g = load_generator(sources[i]);
        ck.put_params(g.named_params("gen" + std::to_string(i)));
        ck.put_params(res.miners[i].named_params("miner" + std::to_string(i)));
    }
    ck.put_params(res.critic.named_params());
    return ck;
}

/// Inference sampling from a packaged multi-source checkpoint.
inline Tensor sample_multi_checkpoint(const Checkpoint& ck, int64_t n, Rng& rng) {
    if (!ck.meta.contains("selector"))
        throw ConfigError("Checkpoint: no selector state; not a multi-source checkpoint");
    ArchConfig arch = arch_of(ck);
    int64_t N = ck.meta.at("num_sources").get<int64_t>();
    std::vector<GeneratorNet> gens;
    std::vector<MinerNet> miners;
    for (int64_t i = 0; i < N; ++i) {
        gens.push_back(load_generator(ck, "gen" + std::to_string(i)));
        miners.push_back(load_miner(ck, "miner" + std::to_string(i)));
    }
    Selector sel = Selector::from_json(ck.meta.at("selector"));
    LatentPrior prior(arch.latent_dim);
    return sample_inference_multi(sel, gens, miners, prior, n, rng);
}

/// Sample G(M(u)) with an explicit miner-input sampler (fused mixtures).
inline Tensor sample_mined_with(const GeneratorNet& gen, const MinerNet& miner,
                                const PriorSampler& u_sampler, Rng& rng, int64_t n,
                                int64_t chunk = 256) {
    Tensor out({n, gen.out_shape.numel()});
    int64_t done = 0;
    while (done < n) {
        int64_t b = std::min(chunk, n - done);
        Var img = gen.forward(miner.forward(ad::constant(u_sampler(rng, b))));
        std::copy(img->value.data.begin(), img->value.data.end(),
                  out.data.begin() + done * gen.out_shape.numel());
        done += b;
    }
    return out;
}

// ---------------------------------------------------------------------------
// metrics record round trip (for resume)

inline MetricsReport metrics_report_from_json(const nlohmann::json& j) {
    MetricsReport r;
    r.tag = j.value("tag", std::string());
    r.fid = j.at("fid").get<double>();
    r.kmmd = j.at("kmmd").get<double>();
    r.mv = j.at("mv").get<double>();
    r.probe_histogram = j.at("probe").get<std::vector<double>>();
    r.n_real = j.at("n_real").get<int64_t>();
    r.n_fake = j.at("n_fake").get<int64_t>();
    r.extractor_hash = j.at("extractor_hash").get<uint64_t>();
    r.seed = j.at("seed").get<uint64_t>();
    return r;
}

// ---------------------------------------------------------------------------
// runner

struct ExperimentResult {
    std::filesystem::path dir;
    MetricsReport report;
    bool evaluated = false;
    std::vector<std::string> stages;  // completed, in order
};

namespace detail {

inline uint64_t stage_seed(uint64_t base, const std::string& stage) {
    uint64_t h = 1469598103934665603ull;
    for (char c : stage) {
        h ^= static_cast<uint8_t>(c);
        h *= 1099511628211ull;
    }
    return h ^ base;
}

class Runner {
public:
    Runner(const ExperimentConfig& cfg)
        : cfg_(cfg), dir_(cfg.out_dir), fp_(cfg.fingerprint()) {
        namespace fs = std::filesystem;
        fs::create_directories(dir_);
        fs::create_directories(dir_ / "samples");
        {
            std::ofstream os(dir_ / "config.json");
            os << cfg_.to_json().dump(2) << "\n";
        }
        log_.open(dir_ / "train_log.jsonl", std::ios::app);

        raw_ = load_experiment_corpus(cfg_);
        if (!(raw_.shape == cfg_.arch.img))
            throw ConfigError("arch image shape does not match the corpus");
        scenario_ = build_scenario(cfg_.scenario, raw_);
        {
            std::ofstream os(dir_ / "scenario.json");
            os << scenario_.manifest().dump(2) << "\n";
        }
    }

    /// Run the method's stage chain up to and including `until`
    /// (empty = everything including evaluation).
    ExperimentResult run(const std::string& until = "") {
        ExperimentResult res;
        res.dir = dir_;

        FeatureExtractor fx = stage_extractor();
        res.stages.push_back("extractor");
        if (until == "extractor") return res;

        std::vector<Checkpoint> sources;
        if (cfg_.method != Method::scratch) {
            sources = stage_sources();
            for (size_t i = 0; i < sources.size(); ++i)
                res.stages.push_back("source" + std::to_string(i));
        }
        if (until == "sources") return res;

        Checkpoint final_ck = run_method(sources, until, res.stages, &res);
        if (!until.empty() && until != "evaluated") return res;

        res.report = stage_evaluate(fx, final_ck);
        res.evaluated = true;
        res.stages.push_back("evaluated");
        write_manifest(fx, res.stages);
        return res;
    }

private:
    // ---- resumable stage plumbing ----

    std::filesystem::path marker_path(const std::string& stage) const {
        return dir_ / ("stage_" + stage + ".done");
    }
    std::filesystem::path ck_path(const std::string& stage) const {
        return dir_ / ("stage_" + stage + ".ck");
    }

    bool stage_done(const std::string& stage) const {
        std::ifstream is(marker_path(stage));
        if (!is) return false;
        nlohmann::json j;
        is >> j;
        uint64_t saved = j.value("fingerprint", uint64_t(0));
        if (saved != fp_)
            throw ResumeError("stage '" + stage + "' was produced under a different config " +
                              "(fingerprint " + std::to_string(saved) + " vs " +
                              std::to_string(fp_) + "); clear the output directory or " +
                              "restore the original config");
        return true;
    }

    void mark_done(const std::string& stage) {
        std::ofstream os(marker_path(stage));
        os << nlohmann::json{{"stage", stage}, {"fingerprint", fp_}}.dump() << "\n";
    }

    template <class Fn>
    Checkpoint run_stage(const std::string& stage, Fn&& fn) {
        if (stage_done(stage)) return Checkpoint::load(ck_path(stage));
        log_ << nlohmann::json{{"stage", stage}, {"event", "begin"}}.dump() << "\n";
        Checkpoint ck = fn();
        ck.meta["config_fingerprint"] = fp_;
        ck.save(ck_path(stage));
        mark_done(stage);
        log_ << nlohmann::json{{"stage", stage}, {"event", "end"}}.dump() << "\n";
        return ck;
    }

    Rng stage_rng(const std::string& stage) const {
        return Rng(stage_seed(cfg_.seed, stage));
    }

    // ---- stages ----

    FeatureExtractor stage_extractor() {
        Checkpoint ck = run_stage("extractor", [&] {
            ExtractorTrainConfig ec = cfg_.extractor;
            ec.seed = stage_seed(cfg_.seed, "extractor");
            FeatureExtractor fx =
                train_feature_extractor(ec, raw_, corpus_num_classes(raw_), cfg_.extractor_base,
                                        cfg_.extractor_feat, &log_);
            return extractor_to_checkpoint(fx, cfg_.extractor_base);
        });
        return extractor_from_checkpoint(ck);
    }

    std::vector<Checkpoint> stage_sources() {
        std::vector<Checkpoint> out;
        for (size_t i = 0; i < scenario_.sources.size(); ++i) {
            std::string name = "source" + std::to_string(i);
            out.push_back(run_stage(name, [&] {
                GanTrainConfig g = cfg_.pretrain;
                g.seed = stage_seed(cfg_.seed, name);
                Rng rng = stage_rng(name);
                return pretrain_stage(g, cfg_.arch, scenario_.sources[i], rng, &log_);
            }));
        }
        return out;
    }

    Checkpoint stage_mask(const Checkpoint& base, const std::string& name) {
        return run_stage(name, [&] {
            Rng rng = stage_rng(name);
            std::map<std::string, double> layers;
            double frac = 0;
            Checkpoint ck = subnetwork_stage(cfg_.subnet, base, scenario_.target, rng,
                                             &layers, &frac);
            std::ofstream os(dir_ / "mask_report.tsv");
            os << "layer\ttrainable_fraction\n";
            for (const auto& [layer, f] : layers) os << layer << "\t" << f << "\n";
            os << "overall\t" << frac << "\n";
            return ck;
        });
    }

    Checkpoint run_method(const std::vector<Checkpoint>& sources, const std::string& until,
                          std::vector<std::string>& stages, ExperimentResult*) {
        switch (cfg_.method) {
            case Method::scratch: {
                stages.push_back("scratch");
                return run_stage("scratch", [&] {
                    GanTrainConfig g = cfg_.pretrain;
                    g.seed = stage_seed(cfg_.seed, "scratch");
                    Rng rng = stage_rng("scratch");
                    Checkpoint ck = pretrain_stage(g, cfg_.arch, scenario_.target, rng, &log_);
                    ck.meta["stage"] = "scratch";
                    return ck;
                });
            }
            case Method::transfer:
            case Method::transfer_pp: {
                Checkpoint base = sources.at(0);
                if (cfg_.method == Method::transfer_pp) {
                    stages.push_back("masked");
                    base = stage_mask(base, "masked");
                    if (until == "masked") return base;
                }
                stages.push_back("transferred");
                return run_stage("transferred", [&] {
                    GanTrainConfig g = cfg_.mining_for_method().stage2;
                    Rng rng = stage_rng("transferred");
                    return transfer_stage(g, base, scenario_.target, rng, &log_);
                });
            }
            case Method::mine_only:
            case Method::minegan:
            case Method::minegan_pp: {
                Checkpoint base = sources.at(0);
                MiningConfig m = cfg_.mining_for_method();
                if (cfg_.method == Method::minegan_pp) {
                    stages.push_back("masked");
                    base = stage_mask(base, "masked");
                    if (until == "masked") return base;
                }
                stages.push_back("mined");
                Checkpoint mined = run_stage("mined", [&] {
                    Rng rng = stage_rng("mined");
                    return train_miner_stage(m, base, scenario_.target, rng, &log_);
                });
                if (m.mine_only || until == "mined") return mined;
                stages.push_back("finetuned");
                return run_stage("finetuned", [&] {
                    Rng rng = stage_rng("finetuned");
                    return finetune_stage(m, mined, scenario_.target, rng, &log_);
                });
            }
            case Method::multi_max:
            case Method::multi_permuted: {
                if (sources.size() < 2)
                    throw ConfigError("multi-source methods need at least two source class sets");
                stages.push_back("multi");
                return run_stage("multi", [&] {
                    MultiMiningConfig mc = cfg_.multi;
                    mc.mode = cfg_.method == Method::multi_max ? MultiMode::max
                                                               : MultiMode::permuted;
                    mc.train.seed = stage_seed(cfg_.seed, "multi");
                    Rng rng = stage_rng("multi");
                    MultiMiningResult res =
                        train_multi_mining(mc, sources, scenario_.target, rng, &log_);
                    std::ofstream os(dir_ / "pi_trajectory.tsv");
                    os << "minibatch";
                    for (size_t i = 0; i < sources.size(); ++i) os << "\tpi" << i;
                    os << "\n";
                    for (size_t t = 0; t < res.pi_trajectory.size(); ++t) {
                        os << t;
                        for (double p : res.pi_trajectory[t]) os << "\t" << p;
                        os << "\n";
                    }
                    return multi_to_checkpoint(res, sources);
                });
            }
            case Method::fusion:
            case Method::fusion_pp: {
                stages.push_back("fused");
                Checkpoint fused = run_stage("fused", [&] {
                    FusionConfig fc = cfg_.fusion;
                    fc.train.seed = stage_seed(cfg_.seed, "fused");
                    Rng rng = stage_rng("fused");
                    return train_fusion(fc, sources, rng, &log_);
                });
                if (until == "fused") return fused;
                Checkpoint base = fused;
                if (cfg_.method == Method::fusion_pp) {
                    stages.push_back("masked");
                    base = stage_mask(base, "masked");
                    if (until == "masked") return base;
                }
                MiningConfig m = cfg_.mining_for_method();
                PriorSampler u = fused_mining_sampler(fused_prior_of(fused));
                stages.push_back("mined");
                Checkpoint mined = run_stage("mined", [&] {
                    Rng rng = stage_rng("mined");
                    return train_miner_stage(m, base, scenario_.target, rng, &log_, u);
                });
                if (m.stage2.iterations == 0 || until == "mined") return mined;
                stages.push_back("finetuned");
                return run_stage("finetuned", [&] {
                    Rng rng = stage_rng("finetuned");
                    return finetune_stage(m, mined, scenario_.target, rng, &log_, u);
                });
            }
        }
        throw ConfigError("unhandled method");
    }

    Tensor final_samples(const Checkpoint& ck, int64_t n, Rng& rng) const {
        ArchConfig arch = arch_of(ck);
        LatentPrior prior(arch.latent_dim);
        if (ck.meta.contains("selector")) return sample_multi_checkpoint(ck, n, rng);
        if (ck.has_prefix("miner.")) {
            GeneratorNet gen = load_generator(ck);
            MinerNet miner = load_miner(ck);
            if (ck.meta.contains("fused_prior"))
                return sample_mined_with(gen, miner,
                                         fused_mining_sampler(fused_prior_of(ck)), rng, n);
            return sample_mined(gen, miner, prior, rng, n);
        }
        GeneratorNet gen = load_generator(ck);
        return sample_images(gen, prior, rng, n);
    }

    MetricsReport stage_evaluate(const FeatureExtractor& fx, const Checkpoint& final_ck) {
        std::string tag = minelab::to_string(cfg_.method);
        if (stage_done("evaluated")) {
            std::ifstream is(dir_ / "metrics.jsonl");
            std::string line, last;
            while (std::getline(is, line))
                if (nlohmann::json::parse(line).value("tag", "") == tag) last = line;
            if (last.empty())
                throw ResumeError("evaluated marker present but no metrics record for '" + tag +
                                  "'");
            return metrics_report_from_json(nlohmann::json::parse(last));
        }

        Rng rng = stage_rng("evaluated");
        int64_t n = eval_sample_count(scenario_.target.size(), cfg_.eval_cap);
        Tensor fake = final_samples(final_ck, n, rng);
        MetricsReport r =
            evaluate_samples(fx, scenario_.target.images, fake, cfg_.seed, tag);
        {
            std::ofstream os(dir_ / "metrics.jsonl", std::ios::app);
            os << r.to_json().dump() << "\n";
        }
        int64_t h = cfg_.arch.img.height, w = cfg_.arch.img.width;
        for (int64_t i = 0; i < std::min<int64_t>(16, fake.rows()); ++i)
            save_pgm(dir_ / "samples" / (tag + "_" + std::to_string(i) + ".pgm"), fake, i, h, w);
        mark_done("evaluated");
        return r;
    }

    void write_manifest(const FeatureExtractor& fx, const std::vector<std::string>& stages) {
        nlohmann::json m{{"method", minelab::to_string(cfg_.method)},
                         {"config_fingerprint", fp_},
                         {"extractor_hash", fx.hash()},
                         {"scenario", scenario_.manifest()},
                         {"stages", stages},
                         {"metrics_file", "metrics.jsonl"}};
        std::ofstream os(dir_ / "manifest.json");
        os << m.dump(2) << "\n";
    }

    ExperimentConfig cfg_;
    std::filesystem::path dir_;
    uint64_t fp_;
    std::ofstream log_;
    ImageSet raw_;
    Scenario scenario_;
};

}  // namespace detail

inline ExperimentResult run_experiment(const ExperimentConfig& cfg,
                                       const std::string& until = "") {
    cfg.validate();
    detail::Runner runner(cfg);
    return runner.run(until);
}

/// Two-column FID-vs-target-size table from the run's metric records.
inline void write_plot_table(const std::filesystem::path& out_dir, std::ostream& os) {
    std::ifstream is(out_dir / "metrics.jsonl");
    if (!is)
        throw ArgumentError("plot: no metrics.jsonl in " + out_dir.string());
    os << "target_size\tfid\n";
    std::string line;
    while (std::getline(is, line)) {
        if (line.empty()) continue;
        nlohmann::json j = nlohmann::json::parse(line);
        os << j.at("n_real").get<int64_t>() << "\t" << j.at("fid").get<double>() << "\n";
    }
}

}  // namespace minelab
