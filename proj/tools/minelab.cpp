// Experiment runner CLI. One JSON config (or flags) describes a scenario,
// a method, and stage budgets; subcommands execute the stage chain up to a
// given point, resuming from markers in the output directory.
//
// Exit codes: 0 success, 2 config error, 3 numerical divergence,
// 4 resume-state mismatch.

#include <iostream>

#include <CLI11.hpp>

#include "minelab/experiment.hpp"

namespace {

struct CommonFlags {
    std::string config_path;
    std::vector<std::string> sets;  // key=value overrides, dotted keys
    std::string method, corpus, out_dir;
    int64_t target_size = -1;
    int64_t seed = -1;
};

void add_common(CLI::App* app, CommonFlags& f) {
    app->add_option("--config", f.config_path, "JSON config file");
    app->add_option("--set", f.sets,
                    "override any config key, dotted path (e.g. mining.stage1.iterations=500)");
    app->add_option("--method", f.method, "method selector");
    app->add_option("--corpus", f.corpus, "corpus: digits | icons | idx:<i>,<l> | pgm:<dir>");
    app->add_option("--out-dir", f.out_dir, "artifact directory");
    app->add_option("--target-size", f.target_size, "target subset size");
    app->add_option("--seed", f.seed, "master seed");
}

/// Flags win over config-file keys; config keys apply only when the flag
/// is absent.
nlohmann::json resolve_config(const CommonFlags& f) {
    nlohmann::json j = nlohmann::json::object();
    if (!f.config_path.empty()) {
        std::ifstream is(f.config_path);
        if (!is) throw minelab::ConfigError("cannot read config file " + f.config_path);
        is >> j;
    }
    for (const auto& kv : f.sets) {
        size_t eq = kv.find('=');
        if (eq == std::string::npos)
            throw minelab::ConfigError("--set expects key=value, got '" + kv + "'");
        std::string key = kv.substr(0, eq), val = kv.substr(eq + 1);
        std::string ptr = "/";
        for (char c : key) ptr += c == '.' ? '/' : c;
        nlohmann::json parsed;
        try {
            parsed = nlohmann::json::parse(val);
        } catch (...) {
            parsed = val;  // bare strings stay strings
        }
        j[nlohmann::json::json_pointer(ptr)] = parsed;
    }
    if (!f.method.empty()) j["method"] = f.method;
    if (!f.corpus.empty()) j["corpus"] = f.corpus;
    if (!f.out_dir.empty()) j["out_dir"] = f.out_dir;
    if (f.target_size >= 0) j["scenario"]["target_size"] = f.target_size;
    if (f.seed >= 0) j["seed"] = static_cast<uint64_t>(f.seed);
    return j;
}

int run_until(const CommonFlags& f, const std::string& until) {
    minelab::ExperimentConfig cfg = minelab::ExperimentConfig::from_json(resolve_config(f));
    minelab::ExperimentResult res = minelab::run_experiment(cfg, until);
    std::cout << "artifacts: " << res.dir.string() << "\n";
    for (const auto& s : res.stages) std::cout << "stage done: " << s << "\n";
    if (res.evaluated) std::cout << res.report.to_json().dump() << "\n";
    return 0;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"minelab: latent-mining GAN transfer experiments"};
    app.require_subcommand(1);

    struct Sub {
        const char* name;
        const char* desc;
        const char* until;
    };
    const Sub subs[] = {
        {"run", "full pipeline: stages plus evaluation", ""},
        {"pretrain", "train the source GAN(s) only", "sources"},
        {"mine", "stage 1: train the miner with frozen generator", "mined"},
        {"finetune", "stage 2: release the generator and finetune", "finetuned"},
        {"multi-mine", "multi-source mining with selector estimation", "multi"},
        {"fuse", "train the index-conditioned fused generator", "fused"},
        {"select-subnetwork", "attach the sparse trainable-filter mask", "masked"},
        {"evaluate", "run remaining stages and emit a metrics record", "evaluated"},
    };

    int rc = 0;
    std::vector<std::pair<CommonFlags, std::string>> jobs(std::size(subs));
    for (size_t i = 0; i < std::size(subs); ++i) {
        CLI::App* s = app.add_subcommand(subs[i].name, subs[i].desc);
        add_common(s, jobs[i].first);
        jobs[i].second = subs[i].until;
        s->callback([&, i] { rc = run_until(jobs[i].first, jobs[i].second); });
    }

    CommonFlags plot_flags;
    CLI::App* plot = app.add_subcommand("plot", "emit the FID-vs-target-size table");
    add_common(plot, plot_flags);
    plot->callback([&] {
        nlohmann::json j = resolve_config(plot_flags);
        std::string dir = j.value("out_dir", std::string("run"));
        std::ofstream os(std::filesystem::path(dir) / "plot.tsv");
        minelab::write_plot_table(dir, os);
        minelab::write_plot_table(dir, std::cout);
    });

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        int code = app.exit(e);
        return code == 0 ? 0 : 2;
    } catch (const minelab::ResumeError& e) {
        std::cerr << "resume error: " << e.what() << "\n";
        return 4;
    } catch (const minelab::NumericalError& e) {
        std::cerr << "numerical error: " << e.what() << "\n";
        return 3;
    } catch (const minelab::ConfigError& e) {
        std::cerr << "config error: " << e.what() << "\n";
        return 2;
    } catch (const minelab::ArgumentError& e) {
        std::cerr << "config error: " << e.what() << "\n";
        return 2;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    }
    return rc;
}
