#include <gtest/gtest.h>

#include <filesystem>
#include <fstream>
#include <set>

#include "minelab/datasets.hpp"

using namespace minelab;
namespace fs = std::filesystem;

namespace {

CorpusConfig tiny_cfg(uint64_t seed, int64_t per_class = 20) {
    CorpusConfig cfg;
    cfg.per_class = per_class;
    cfg.size = 16;
    cfg.scale = 2;
    cfg.jitter = 1;
    cfg.seed = seed;
    return cfg;
}

fs::path temp_dir(const std::string& name) {
    fs::path p = fs::temp_directory_path() / name;
    fs::remove_all(p);
    fs::create_directories(p);
    return p;
}

}  // namespace

TEST(DigitCorpus, ShapesLabelsAndRange) {
    ImageSet d = make_digit_corpus(tiny_cfg(1), {3, 7});
    EXPECT_EQ(d.size(), 40);
    EXPECT_EQ(d.shape, (ImageShape{1, 16, 16}));
    EXPECT_EQ(d.images.shape, (Shape{40, 256}));
    for (int64_t i = 0; i < 20; ++i) EXPECT_EQ(d.labels[i], 3);
    for (int64_t i = 20; i < 40; ++i) EXPECT_EQ(d.labels[i], 7);
    for (double v : d.images.data) {
        EXPECT_GE(v, -1.0);
        EXPECT_LE(v, 1.0);
    }
    // ink is present: some pixels well above background
    double mx = *std::max_element(d.images.data.begin(), d.images.data.end());
    EXPECT_GT(mx, 0.0);
}

TEST(DigitCorpus, DeterministicPerSeed) {
    ImageSet a = make_digit_corpus(tiny_cfg(5));
    ImageSet b = make_digit_corpus(tiny_cfg(5));
    ImageSet c = make_digit_corpus(tiny_cfg(6));
    EXPECT_EQ(a.images.data, b.images.data);
    EXPECT_NE(a.images.data, c.images.data);
}

TEST(DigitCorpus, RejectsOversizedGlyphAndBadClass) {
    CorpusConfig cfg = tiny_cfg(1);
    cfg.size = 10;  // glyph is 10x14 at scale 2
    EXPECT_THROW(make_digit_corpus(cfg), ArgumentError);
    EXPECT_THROW(make_digit_corpus(tiny_cfg(1), {10}), ArgumentError);
}

TEST(IconCorpus, ShapesAndDeterminism) {
    ImageSet a = make_icon_corpus(tiny_cfg(2));
    EXPECT_EQ(a.size(), 100);
    EXPECT_EQ(a.shape, (ImageShape{1, 16, 16}));
    ImageSet b = make_icon_corpus(tiny_cfg(2));
    EXPECT_EQ(a.images.data, b.images.data);
    for (double v : a.images.data) {
        EXPECT_GE(v, -1.0);
        EXPECT_LE(v, 1.0);
    }
    EXPECT_THROW(make_icon_corpus(tiny_cfg(2), {5}), ArgumentError);
}

TEST(IdxIngestion, RoundTrip) {
    fs::path dir = temp_dir("minelab_idx_test");
    fs::path ip = dir / "imgs.idx", lp = dir / "lbls.idx";

    auto be32 = [](std::ostream& os, uint32_t v) {
        for (int s = 24; s >= 0; s -= 8) os.put(static_cast<char>((v >> s) & 0xff));
    };
    {
        std::ofstream os(ip, std::ios::binary);
        be32(os, 0x803);
        be32(os, 3);  // count
        be32(os, 2);  // height
        be32(os, 2);  // width
        for (int i = 0; i < 12; ++i) os.put(static_cast<char>(i * 20));
        std::ofstream ls(lp, std::ios::binary);
        be32(ls, 0x801);
        be32(ls, 3);
        ls.put(4);
        ls.put(0);
        ls.put(9);
    }
    ImageSet d = load_idx(ip, lp);
    EXPECT_EQ(d.size(), 3);
    EXPECT_EQ(d.shape, (ImageShape{1, 2, 2}));
    EXPECT_EQ(d.labels, (std::vector<int64_t>{4, 0, 9}));
    for (int i = 0; i < 12; ++i)
        EXPECT_NEAR(d.images.data[i], (i * 20) / 127.5 - 1.0, 1e-12);

    // bad magic
    {
        std::ofstream os(ip, std::ios::binary);
        be32(os, 0x1234);
    }
    EXPECT_THROW(load_idx(ip, lp), ArgumentError);
    fs::remove_all(dir);
}

TEST(PgmIngestion, RoundTripThroughWriter) {
    fs::path dir = temp_dir("minelab_pgm_test");
    fs::create_directories(dir / "0");
    fs::create_directories(dir / "2");

    ImageSet src = make_digit_corpus(tiny_cfg(3, 2), {0, 2});
    save_pgm(dir / "0" / "a.pgm", src.images, 0, 16, 16);
    save_pgm(dir / "0" / "b.pgm", src.images, 1, 16, 16);
    save_pgm(dir / "2" / "a.pgm", src.images, 2, 16, 16);
    save_pgm(dir / "2" / "b.pgm", src.images, 3, 16, 16);

    ImageSet back = load_pgm_folder(dir);
    EXPECT_EQ(back.size(), 4);
    EXPECT_EQ(back.shape, (ImageShape{1, 16, 16}));
    EXPECT_EQ(back.labels, (std::vector<int64_t>{0, 0, 2, 2}));
    // 8-bit quantization bounds the round-trip error
    for (int64_t r = 0; r < 4; ++r)
        for (int64_t p = 0; p < 256; ++p)
            EXPECT_NEAR(back.images.at(r, p), src.images.at(r, p), 1.0 / 127.5);

    EXPECT_THROW(load_pgm_folder(dir / "missing"), ArgumentError);
    fs::remove_all(dir);
}

TEST(ScenarioSpec, MixtureValidation) {
    ScenarioSpec s;
    s.source_class_sets = {{0, 1}};
    s.target_classes = {8, 9};
    s.validate();  // empty mixture = uniform, fine

    s.mixture = {0.5};
    EXPECT_THROW(s.validate(), ArgumentError);
    s.mixture = {0.6, 0.6};
    EXPECT_THROW(s.validate(), ArgumentError);
    s.mixture = {-0.2, 1.2};
    EXPECT_THROW(s.validate(), ArgumentError);
    s.mixture = {0.3, 0.7};
    s.validate();
    s.target_size = 0;
    EXPECT_THROW(s.validate(), ArgumentError);
}

TEST(ScenarioSpec, TargetCountsRounding) {
    ScenarioSpec s;
    s.source_class_sets = {{0}};
    s.target_classes = {8, 9};
    s.mixture = {0.3, 0.7};
    s.target_size = 200;
    EXPECT_EQ(s.target_counts(), (std::vector<int64_t>{60, 140}));

    // uniform thirds of 100: rounding remainder lands on the first class
    s.target_classes = {7, 8, 9};
    s.mixture = {};
    s.target_size = 100;
    auto c = s.target_counts();
    EXPECT_EQ(c[0] + c[1] + c[2], 100);
    EXPECT_EQ(c[1], 33);
    EXPECT_EQ(c[2], 33);
    EXPECT_EQ(c[0], 34);
}

TEST(BuildScenario, SplitsSourcesAndDrawsTarget) {
    ImageSet raw = make_digit_corpus(tiny_cfg(4, 50), {0, 1, 8, 9});
    ScenarioSpec s;
    s.source_class_sets = {{0}, {1}};
    s.target_classes = {8, 9};
    s.mixture = {0.3, 0.7};
    s.target_size = 40;
    s.seed = 11;

    Scenario sc = build_scenario(s, raw);
    ASSERT_EQ(sc.sources.size(), 2u);
    EXPECT_EQ(sc.sources[0].size(), 50);
    EXPECT_EQ(sc.sources[1].size(), 50);
    for (int64_t l : sc.sources[0].labels) EXPECT_EQ(l, 0);
    for (int64_t l : sc.sources[1].labels) EXPECT_EQ(l, 1);

    EXPECT_EQ(sc.target.size(), 40);
    int64_t n8 = 0, n9 = 0;
    for (int64_t l : sc.target.labels) (l == 8 ? n8 : n9)++;
    EXPECT_EQ(n8, 12);
    EXPECT_EQ(n9, 28);

    // without replacement: every drawn image is distinct
    std::set<std::vector<double>> uniq;
    for (int64_t r = 0; r < sc.target.size(); ++r) {
        std::vector<double> row(sc.target.images.data.begin() + r * 256,
                                sc.target.images.data.begin() + (r + 1) * 256);
        uniq.insert(std::move(row));
    }
    EXPECT_EQ(uniq.size(), 40u);

    nlohmann::json m = sc.manifest();
    EXPECT_EQ(m.at("actual_target_size"), 40);
    EXPECT_EQ(m.at("manifold"), "off");
}

TEST(BuildScenario, DeterministicUnderSeed) {
    ImageSet raw = make_digit_corpus(tiny_cfg(4, 30), {0, 8, 9});
    ScenarioSpec s;
    s.source_class_sets = {{0}};
    s.target_classes = {8, 9};
    s.target_size = 20;
    s.seed = 21;
    Scenario a = build_scenario(s, raw);
    Scenario b = build_scenario(s, raw);
    EXPECT_EQ(a.target.images.data, b.target.images.data);
    EXPECT_EQ(a.target.labels, b.target.labels);

    s.seed = 22;
    Scenario c = build_scenario(s, raw);
    EXPECT_NE(a.target.images.data, c.target.images.data);
}

TEST(BuildScenario, OffManifoldOverlapRejected) {
    ImageSet raw = make_digit_corpus(tiny_cfg(4, 10), {0, 1, 9});
    ScenarioSpec s;
    s.source_class_sets = {{0, 9}};
    s.target_classes = {9};
    s.target_size = 5;
    try {
        build_scenario(s, raw);
        FAIL() << "expected overlap rejection";
    } catch (const ArgumentError& e) {
        EXPECT_NE(std::string(e.what()).find("9"), std::string::npos);
    }

    // the same overlap is legal once declared on-manifold
    s.manifold = Manifold::on;
    Scenario sc = build_scenario(s, raw);
    EXPECT_EQ(sc.target.size(), 5);
}

TEST(BuildScenario, InfeasibleTargetSizeListsAvailability) {
    ImageSet raw = make_digit_corpus(tiny_cfg(4, 10), {0, 9});
    ScenarioSpec s;
    s.source_class_sets = {{0}};
    s.target_classes = {9};
    s.target_size = 50;
    try {
        build_scenario(s, raw);
        FAIL() << "expected infeasible-size rejection";
    } catch (const ArgumentError& e) {
        std::string msg = e.what();
        EXPECT_NE(msg.find("50"), std::string::npos);
        EXPECT_NE(msg.find("10"), std::string::npos);
    }
}

TEST(BuildScenario, RequiresLabels) {
    ImageSet raw = make_digit_corpus(tiny_cfg(4, 10), {0, 9});
    raw.labels.clear();
    ScenarioSpec s;
    s.source_class_sets = {{0}};
    s.target_classes = {9};
    s.target_size = 5;
    EXPECT_THROW(build_scenario(s, raw), ArgumentError);
}
