#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <sstream>

#include "doctest.h"
#include "hbrnet/cli.hpp"
#include "hbrnet/config.hpp"
#include "hbrnet/eval.hpp"

using namespace hbrnet;

namespace {

std::vector<std::pair<std::string, bool>> roster(std::size_t cancerous, std::size_t benign) {
    std::vector<std::pair<std::string, bool>> out;
    for (std::size_t i = 0; i < cancerous; ++i) out.emplace_back("C" + std::to_string(i), true);
    for (std::size_t i = 0; i < benign; ++i) out.emplace_back("B" + std::to_string(i), false);
    return out;
}

int run_cli(std::vector<std::string> args, std::string* err_text = nullptr) {
    args.insert(args.begin(), "hbrnet");
    std::vector<char*> argv;
    for (auto& a : args) argv.push_back(a.data());
    std::ostringstream log;
    std::ostringstream err;
    const int code = cli::main(static_cast<int>(argv.size()), argv.data(), log, err);
    if (err_text) *err_text = err.str();
    return code;
}

std::filesystem::path scratch(const std::string& name) {
    const auto dir = std::filesystem::temp_directory_path() / ("hbrnet_unit_" + name);
    std::filesystem::remove_all(dir);
    std::filesystem::create_directories(dir);
    return dir;
}

}  // namespace

TEST_SUITE("eval") {

TEST_CASE("metric examples") {
    const auto m = eval::compute_metrics({47, 42, 8, 3});
    CHECK(*m.sensitivity == doctest::Approx(0.94));
    CHECK(*m.specificity == doctest::Approx(0.84));
    CHECK(*m.accuracy == doctest::Approx(0.89));
    const auto perfect = eval::compute_metrics({1, 1, 0, 0});
    CHECK(*perfect.sensitivity == 1.0);
    CHECK(*perfect.specificity == 1.0);
    CHECK(*perfect.accuracy == 1.0);
    CHECK(*eval::compute_metrics({0, 5, 0, 2}).sensitivity == 0.0);
    const auto none = eval::compute_metrics({0, 4, 1, 0});
    CHECK(!none.sensitivity.has_value());
    CHECK(!eval::compute_metrics({}).accuracy.has_value());
}

TEST_CASE("metric identities over all counts up to 20") {
    bool ok = true;
    for (std::uint64_t tp = 0; tp <= 20; ++tp)
        for (std::uint64_t tn = 0; tn <= 20; ++tn)
            for (std::uint64_t fp = 0; fp <= 20; ++fp)
                for (std::uint64_t fn = 0; fn <= 20; ++fn) {
                    const auto m = eval::compute_metrics({tp, tn, fp, fn});
                    ok &= m.sensitivity.has_value() == (tp + fn > 0);
                    ok &= m.specificity.has_value() == (tn + fp > 0);
                    ok &= m.accuracy.has_value() == (tp + tn + fp + fn > 0);
                    if (m.sensitivity) ok &= *m.sensitivity == static_cast<double>(tp) / (tp + fn);
                    if (m.specificity) ok &= *m.specificity == static_cast<double>(tn) / (tn + fp);
                    if (m.accuracy) ok &= *m.accuracy == static_cast<double>(tp + tn) / (tp + tn + fp + fn);
                }
    CHECK(ok);
}

TEST_CASE("fold example and partition property") {
    const auto split = eval::make_folds(roster(12, 12), 5, 7);
    std::vector<std::size_t> sizes;
    std::vector<std::size_t> cancer;
    for (std::size_t f = 0; f < 5; ++f) {
        const auto v = split.validation(f);
        sizes.push_back(v.size());
        cancer.push_back(std::count_if(v.begin(), v.end(), [](const auto& id) { return id[0] == 'C'; }));
        CHECK(split.training(f).size() + v.size() == 24);
    }
    std::sort(sizes.begin(), sizes.end());
    CHECK(sizes == std::vector<std::size_t>{4, 5, 5, 5, 5});
    CHECK(*std::max_element(cancer.begin(), cancer.end()) - *std::min_element(cancer.begin(), cancer.end()) <= 1);
    CHECK(eval::make_folds(roster(12, 12), 5, 7).assignment == split.assignment);
    CHECK_THROWS(eval::make_folds(roster(2, 1), 4, 7));
    CHECK_THROWS(eval::make_folds(roster(2, 2), 0, 7));

    RngStream rng(3);
    for (int trial = 0; trial < 200; ++trial) {
        const std::size_t c = rng.below(15);
        const std::size_t b = rng.below(15);
        if (c + b < 2) continue;
        const std::size_t k = 2 + rng.below(c + b - 1);
        const auto s = eval::make_folds(roster(c, b), k, rng.next_u64());
        std::map<std::string, int> seen;
        std::vector<std::size_t> per_c(k);
        std::vector<std::size_t> per_b(k);
        for (std::size_t f = 0; f < k; ++f)
            for (const auto& id : s.validation(f)) {
                ++seen[id];
                (id[0] == 'C' ? per_c : per_b)[f]++;
            }
        CAPTURE(trial);
        CHECK(seen.size() == c + b);
        CHECK(std::all_of(seen.begin(), seen.end(), [](const auto& e) { return e.second == 1; }));
        CHECK(*std::max_element(per_c.begin(), per_c.end()) - *std::min_element(per_c.begin(), per_c.end()) <= 1);
        CHECK(*std::max_element(per_b.begin(), per_b.end()) - *std::min_element(per_b.begin(), per_b.end()) <= 1);
    }
}

TEST_CASE("patient aggregation boundary and monotonicity") {
    CHECK(eval::aggregate_patient("a", std::vector<float>(10, 0.99F)).label == 1);
    CHECK(eval::aggregate_patient("a", std::vector<float>(10, 0.01F)).label == 0);
    std::vector<float> p(100, 0.1F);
    p[3] = 0.9F;
    CHECK(eval::aggregate_patient("a", p).label == 0);
    p[50] = 0.9F;
    CHECK(eval::aggregate_patient("a", p).label == 1);
    CHECK(eval::aggregate_patient("a", p).positive_fraction == doctest::Approx(0.02));
    CHECK_THROWS(eval::aggregate_patient("a", {}));

    RngStream rng(4);
    for (int trial = 0; trial < 500; ++trial) {
        std::vector<float> q(1 + rng.below(60));
        for (auto& v : q) v = static_cast<float>(rng.uniform());
        const int before = eval::aggregate_patient("a", q, 0.1).label;
        q[rng.below(q.size())] += static_cast<float>(rng.uniform(0.0, 0.5));
        const int after = eval::aggregate_patient("a", q, 0.1).label;
        CHECK(after >= before);
    }
}

TEST_CASE("heatmap examples") {
    const Dims3 d{1, 21, 21};
    const MaskVolume all(d, 1);
    const std::vector<patch::Center> one{{0, 10, 10}};
    const std::vector<float> p1{1.0F};
    const auto h = eval::render_heatmap(one, p1, 11, d, all);
    for (std::size_t y = 0; y < 21; ++y)
        for (std::size_t x = 0; x < 21; ++x) {
            const bool inside = y >= 5 && y <= 15 && x >= 5 && x <= 15;
            CHECK(h.at(0, y, x) == (inside ? 1.0F : 0.0F));
        }
    const std::vector<patch::Center> twice{{0, 10, 10}, {0, 10, 10}};
    const std::vector<float> p2{0.2F, 0.8F};
    CHECK(eval::render_heatmap(twice, p2, 11, d, all).at(0, 10, 10) == doctest::Approx(0.5F));
}

TEST_CASE("heatmap equals brute-force mean over covering patches") {
    RngStream rng(5);
    for (int trial = 0; trial < 30; ++trial) {
        const Dims3 d{1 + rng.below(3), 12 + rng.below(10), 12 + rng.below(10)};
        const std::size_t size = 3 + 2 * rng.below(3);
        MaskVolume mask(d, 0);
        for (auto& v : mask.values) v = rng.uniform() < 0.7;
        std::vector<patch::Center> centers;
        std::vector<float> probs;
        const std::size_t n = 1 + rng.below(25);
        for (std::size_t i = 0; i < n; ++i) {
            centers.push_back({rng.below(d.z), size / 2 + rng.below(d.h - size + 1),
                               size / 2 + rng.below(d.w - size + 1)});
            probs.push_back(static_cast<float>(rng.uniform()));
        }
        const auto h = eval::render_heatmap(centers, probs, size, d, mask);
        for (std::size_t z = 0; z < d.z; ++z)
            for (std::size_t y = 0; y < d.h; ++y)
                for (std::size_t x = 0; x < d.w; ++x) {
                    double sum = 0.0;
                    std::size_t cover = 0;
                    for (std::size_t i = 0; i < n; ++i) {
                        const auto& c = centers[i];
                        if (c.slice == z && y + size / 2 >= c.row && y <= c.row + size / 2 &&
                            x + size / 2 >= c.col && x <= c.col + size / 2) {
                            sum += probs[i];
                            ++cover;
                        }
                    }
                    const double expect = mask.at(z, y, x) && cover ? sum / cover : 0.0;
                    CHECK(h.at(z, y, x) == doctest::Approx(expect).epsilon(1e-6));
                    CHECK(h.at(z, y, x) >= 0.0F);
                    CHECK(h.at(z, y, x) <= 1.0F);
                }
    }
}

TEST_CASE("PGM encoding") {
    Volume3 h(Dims3{2, 2, 3}, 0.0F);
    h.at(1, 0, 0) = 1.0F;
    h.at(1, 1, 2) = 0.5F;
    const auto bytes = eval::encode_pgm(h, 1);
    const std::string header = "P5\n3 2\n255\n";
    REQUIRE(bytes.size() == header.size() + 6);
    CHECK(std::string(bytes.begin(), bytes.begin() + header.size()) == header);
    CHECK(bytes[header.size()] == 255);
    CHECK(bytes[header.size() + 5] == 128);
    const auto dir = scratch("pgm");
    eval::export_heatmap(h, "P7", dir);
    CHECK(std::filesystem::exists(dir / "P7_0.pgm"));
    CHECK(std::filesystem::exists(dir / "P7_1.pgm"));
    std::filesystem::remove_all(dir);
}

TEST_CASE("leakage injection is a hard failure") {
    phantom::CohortSpec s;
    s.n_patients = 4;
    s.z_min = 8;
    s.z_max = 8;
    s.height = 48;
    s.width = 48;
    s.lesion_radius_min = 3;
    s.lesion_radius_max = 5;
    s.lesion_z_min = 1.0;
    s.lesion_z_max = 1.5;
    const auto cohort = phantom::generate_cohort(s);
    eval::CvConfig cfg;
    cfg.folds = 2;
    cfg.split_hook = [](std::size_t, std::vector<const phantom::PatientRecord*>& train,
                        std::vector<const phantom::PatientRecord*>& validation) {
        train.push_back(validation.front());
    };
    CHECK_THROWS_AS(eval::cross_validate(cohort, cfg), eval::LeakageError);
    std::vector<const phantom::PatientRecord*> a{&cohort.patients[0]};
    std::vector<const phantom::PatientRecord*> b{&cohort.patients[1]};
    CHECK_NOTHROW(eval::check_disjoint(a, b));
    CHECK_THROWS_AS(eval::check_disjoint(a, a), eval::LeakageError);
}

}  // TEST_SUITE

TEST_SUITE("config") {

TEST_CASE("empty file gives the default table") {
    const auto c = config::parse_text("");
    const auto text = config::resolved_text(c);
    for (const char* line : {"seed = 7", "patch.size = 11", "patch.stride = 2", "patch.label_threshold = 0.7",
                             "eval.folds = 5", "eval.rho = 0.02", "eval.p_threshold = 0.5", "cohort.n_patients = 24",
                             "cohort.cancer_fraction = 0.5", "bias.reference_k = 4", "bias.reference_iters = 5",
                             "stage2.loss = focal", "stage2.focal_gamma = 2", "stage2.focal_alpha = 0.75"}) {
        CAPTURE(line);
        CHECK(text.find(std::string(line) + "\n") != std::string::npos);
    }
    std::size_t lines = std::count(text.begin(), text.end(), '\n');
    CHECK(lines == config::keys().size());
    CHECK(config::resolved_text(config::parse_text(text)) == text);
}

TEST_CASE("patch size propagates") {
    const auto c = config::parse_text("# ablation\npatch.size = 15\n");
    CHECK(c.cv.pipeline.size == 15);
    CHECK(config::get(c, "patch.size") == "15");
}

TEST_CASE("errors name the key and line") {
    auto expect_error = [](const std::string& text, const std::string& key, std::size_t line) {
        try {
            config::parse_text(text);
            FAIL("expected a config error for " << text);
        } catch (const config::ConfigError& e) {
            CHECK(e.key() == key);
            CHECK(e.line() == line);
            CHECK(std::string(e.what()).find(key) != std::string::npos);
        }
    };
    expect_error("patch.size = banana\n", "patch.size", 1);
    expect_error("seed = 3\n\npatch.bogus = 1\n", "patch.bogus", 3);
    expect_error("patch.hist_presets = 0.9:0.1\n", "patch.hist_presets", 1);
    expect_error("patch.size = 10\n", "patch.size", 1);
    expect_error("eval.folds = 1\n", "eval.folds", 1);
    expect_error("cohort.n_patients\n", "cohort.n_patients", 1);
}

TEST_CASE("overrides apply after the file") {
    auto c = config::parse_text("patch.size = 9\n");
    config::apply_overrides(c, {"patch.size=15", "seed=11"});
    CHECK(c.cv.pipeline.size == 15);
    CHECK(c.seed == 11);
    CHECK_THROWS_AS(config::apply_overrides(c, {"patch.size"}), config::ConfigError);
}

TEST_CASE("cli exit codes") {
    const auto out = scratch("cli");
    std::string err;
    CHECK(run_cli({"train-stage2", "--out", out.string()}, &err) == cli::missing_dependency);
    std::ofstream(out / "bad.cfg") << "patch.size = banana\n";
    CHECK(run_cli({"cv", "--config", (out / "bad.cfg").string(), "--out", out.string()}, &err) == cli::usage_error);
    CHECK(err.find("patch.size") != std::string::npos);
    CHECK(run_cli({"nonsense", "--out", out.string()}) == cli::usage_error);
    CHECK(run_cli({"phantom", "--out", out.string(), "--set", "cohort.n_patients=2", "--set", "cohort.z_min=4",
                   "--set", "cohort.z_max=4", "--set", "cohort.height=32", "--set", "cohort.width=32",
                   "--set", "cohort.lesion_radius_min=2", "--set", "cohort.lesion_radius_max=3", "--set",
                   "cohort.lesion_z_min=0.5", "--set", "cohort.lesion_z_max=0.8", "--set", "eval.folds=2"}) ==
          cli::ok);
    CHECK(std::filesystem::exists(out / "config.resolved"));
    CHECK(std::filesystem::exists(out / "cohort" / "manifest.json"));
    std::filesystem::remove_all(out);
}

}  // TEST_SUITE
