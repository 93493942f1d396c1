// One PASS/FAIL line per acceptance criterion. Usage: acceptance [N ...]
// with no arguments runs criteria 1 to 10. Exit status is nonzero if any
// selected criterion fails.

#include <algorithm>
#include <bit>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <ctime>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iostream>
#include <map>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "../support/grad_suite.hpp"
#include "hbrnet/bias.hpp"
#include "hbrnet/cli.hpp"
#include "hbrnet/config.hpp"
#include "hbrnet/eval.hpp"
#include "hbrnet/phantom.hpp"
#include "hbrnet/wht.hpp"
#include "json.hpp"

using namespace hbrnet;
namespace fs = std::filesystem;
using json = nlohmann::json;

namespace {

// Criterion 1
constexpr double kOracleTol = 1e-10;
constexpr double kInvolutionTol = 1e-10;
constexpr double kParsevalRelTol = 1e-12;
constexpr double kWhtSuiteSeconds = 1.0;
// Criterion 2
constexpr std::size_t kPerfLength = 4096;
constexpr int kPerfTrials = 10;
constexpr int kFastRepsPerTrial = 200;
constexpr double kMinSpeedup = 50.0;
// Criterion 3
constexpr double kGrad32Tol = 1e-3;
constexpr double kGrad64Tol = 1e-4;
constexpr double kGradSeconds = 120.0;
constexpr double kMaxKinkFraction = 0.10;
// Criterion 4
constexpr std::size_t kBiasPhantoms = 20;
constexpr double kFieldRatio = 0.5;
constexpr std::size_t kStage1Holdout = 4;
constexpr double kSliceImproveFraction = 0.90;
constexpr double kBiasCpuSeconds = 600.0;
// Criterion 6
constexpr int kRandomMasks = 50;
// Criterion 8
constexpr double kMinPatchAccuracy = 0.85;
constexpr double kMinSensitivity = 0.80;
constexpr double kMinSpecificity = 0.80;
constexpr double kMinPatientAccuracy = 0.80;
constexpr double kEndToEndSeconds = 30.0 * 60.0;
constexpr std::size_t kReferenceCores = 4;

struct Outcome {
    bool pass = false;
    std::string detail;
};

std::string fmt(const char* f, double v) {
    char buf[64];
    std::snprintf(buf, sizeof buf, f, v);
    return buf;
}

double seconds_since(std::chrono::steady_clock::time_point t0) {
    return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

double median(std::vector<double> v) {
    std::sort(v.begin(), v.end());
    const std::size_t n = v.size();
    return n % 2 ? v[n / 2] : 0.5 * (v[n / 2 - 1] + v[n / 2]);
}

std::vector<double> gaussian(std::size_t n, std::uint64_t seed) {
    RngStream rng(seed);
    std::vector<double> v(n);
    for (auto& x : v) x = rng.normal();
    return v;
}

double sylvester(std::size_t i, std::size_t j, std::size_t n) {
    return (std::popcount(i & j) % 2 ? -1.0 : 1.0) / std::sqrt(static_cast<double>(n));
}

fs::path scratch(const std::string& name) {
    const auto dir = fs::temp_directory_path() / ("hbrnet_acceptance_" + name);
    fs::remove_all(dir);
    fs::create_directories(dir);
    return dir;
}

int run_cli(std::vector<std::string> args) {
    args.insert(args.begin(), "hbrnet");
    std::vector<char*> argv;
    for (auto& a : args) argv.push_back(a.data());
    std::ostringstream log;
    std::ostringstream err;
    const int code = cli::main(static_cast<int>(argv.size()), argv.data(), log, err);
    if (code != 0) std::cerr << err.str();
    return code;
}

json read_json(const fs::path& p) {
    std::ifstream f(p);
    return json::parse(f);
}

std::string read_bytes(const fs::path& p) {
    std::ifstream f(p, std::ios::binary);
    return {std::istreambuf_iterator<char>(f), std::istreambuf_iterator<char>()};
}

void write_text(const fs::path& p, const std::string& text) { std::ofstream(p) << text; }

double metric(const json& block, const char* level, const char* key) {
    const auto& v = block.at(level).at(key);
    return v.is_null() ? std::nan("") : v.get<double>();
}

phantom::CohortSpec compact_cohort(std::size_t n, std::uint64_t seed) {
    phantom::CohortSpec s;
    s.n_patients = n;
    s.z_min = 8;
    s.z_max = 10;
    s.height = 48;
    s.width = 48;
    s.lesion_radius_min = 4;
    s.lesion_radius_max = 6;
    s.lesion_z_min = 1.0;
    s.lesion_z_max = 1.5;
    s.seed = seed;
    return s;
}

std::vector<const phantom::PatientRecord*> pointers(const phantom::Cohort& c) {
    std::vector<const phantom::PatientRecord*> out;
    for (const auto& p : c.patients) out.push_back(&p);
    return out;
}

// ---------------------------------------------------------------------------

Outcome wht_correctness() {
    const auto t0 = std::chrono::steady_clock::now();
    double oracle_err = 0.0;
    for (unsigned m = 0; m <= 6; ++m) {
        const std::size_t n = std::size_t{1} << m;
        const auto x = gaussian(n, 100 + m);
        const auto y = wht::fwht_1d(x, wht::WhtPlan::for_length(n));
        for (std::size_t i = 0; i < n; ++i) {
            double ref = 0.0;
            for (std::size_t j = 0; j < n; ++j) ref += sylvester(i, j, n) * x[j];
            oracle_err = std::max(oracle_err, std::abs(y[i] - ref));
        }
    }
    double inv_err = 0.0;
    double parseval = 0.0;
    bool counts = true;
    for (std::size_t n = 1; n <= 1024; n *= 2) {
        const auto x = gaussian(n, n);
        const auto plan = wht::WhtPlan::for_length(n);
        const auto y = wht::fwht_1d(x, plan);
        const auto z = wht::fwht_1d(y, plan);
        double ex = 0.0;
        double ey = 0.0;
        for (std::size_t i = 0; i < n; ++i) {
            inv_err = std::max(inv_err, std::abs(z[i] - x[i]));
            ex += x[i] * x[i];
            ey += y[i] * y[i];
        }
        parseval = std::max(parseval, std::abs(ey - ex) / ex);
        auto w = x;
        wht::OpCounter counter;
        wht::butterflies(std::span<double>(w), &counter);
        counts &= counter.add_sub == static_cast<std::uint64_t>(n) * std::countr_zero(n);
    }
    const double secs = seconds_since(t0);
    Outcome o;
    o.pass = oracle_err < kOracleTol && inv_err < kInvolutionTol && parseval < kParsevalRelTol && counts &&
             secs < kWhtSuiteSeconds;
    o.detail = "oracle err " + fmt("%.2e", oracle_err) + ", involution err " + fmt("%.2e", inv_err) +
               ", Parseval rel " + fmt("%.2e", parseval) + ", add count " + (counts ? "exact" : "WRONG") + ", " +
               fmt("%.3f", secs) + " s";
    return o;
}

Outcome wht_speed() {
    const std::size_t n = kPerfLength;
    std::vector<double> dense(n * n);
    for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = 0; j < n; ++j) dense[i * n + j] = sylvester(i, j, n);
    const auto x = gaussian(n, 9);
    const auto plan = wht::WhtPlan::for_length(n);
    std::vector<double> slow_t;
    std::vector<double> fast_t;
    double sink = 0.0;
    for (int t = 0; t < kPerfTrials; ++t) {
        auto t0 = std::chrono::steady_clock::now();
        std::vector<double> y(n, 0.0);
        for (std::size_t i = 0; i < n; ++i) {
            double s = 0.0;
            const double* row = dense.data() + i * n;
            for (std::size_t j = 0; j < n; ++j) s += row[j] * x[j];
            y[i] = s;
        }
        slow_t.push_back(seconds_since(t0));
        sink += y[t];
        t0 = std::chrono::steady_clock::now();
        for (int r = 0; r < kFastRepsPerTrial; ++r) {
            const auto z = wht::fwht_1d(x, plan);
            sink += z[static_cast<std::size_t>(r) % n];
        }
        fast_t.push_back(seconds_since(t0) / kFastRepsPerTrial);
    }
    const double slow = median(slow_t);
    const double fast = median(fast_t);
    Outcome o;
    o.pass = slow / fast >= kMinSpeedup;
    o.detail = "n=4096 direct " + fmt("%.3f", slow * 1e3) + " ms, fast " + fmt("%.4f", fast * 1e3) +
               " ms, speedup " + fmt("%.0f", slow / fast) + "x (median of 10)" + (sink == 0.12345 ? " " : "");
    return o;
}

Outcome gradients() {
    const auto t0 = std::chrono::steady_clock::now();
    bool ok = true;
    double worst32 = 0.0;
    double worst64 = 0.0;
    std::string worst32_name;
    std::string worst64_name;
    std::string failures;
    for (const auto& c : gradsuite::cases()) {
        for (bool single : {false, true}) {
            const auto r = c.run(single);
            const double tol = single ? kGrad32Tol : kGrad64Tol;
            const double kink_frac = r.probed ? static_cast<double>(r.kinks) / r.probed : 0.0;
            const bool pass = r.rel_err < tol && kink_frac <= kMaxKinkFraction;
            if (!pass) failures += " " + c.name + (single ? "/32" : "/64");
            ok &= pass;
            double& worst = single ? worst32 : worst64;
            if (r.rel_err > worst) {
                worst = r.rel_err;
                (single ? worst32_name : worst64_name) = c.name;
            }
        }
    }
    const double secs = seconds_since(t0);
    Outcome o;
    o.pass = ok && secs < kGradSeconds;
    o.detail = std::to_string(gradsuite::cases().size()) + " cases, worst 32-bit " + fmt("%.2e", worst32) + " (" +
               worst32_name + "), worst 64-bit " + fmt("%.2e", worst64) + " (" + worst64_name + "), " +
               fmt("%.1f", secs) + " s" + (failures.empty() ? "" : ", failing:" + failures);
    return o;
}

Outcome bias_recovery() {
    const std::clock_t c0 = std::clock();
    phantom::CohortSpec spec;
    spec.n_patients = kBiasPhantoms;
    spec.bias.amplitude = 0.2;
    spec.seed = 2024;
    const auto cohort = phantom::generate_cohort(spec);

    double est_sum = 0.0;
    double base_sum = 0.0;
    for (const auto& p : cohort.patients) {
        const Dims3 d = p.truth.dims;
        Volume3 truth_field(d);
        truth_field.values = p.bias_field.values;
        const Volume3 ones(d, 1.0F);
        const double base = bias::masked_rmse(ones, truth_field, p.prostate_mask);
        for (std::size_t c = 0; c < kChannels; ++c) {
            Volume3 ch(d);
            std::copy_n(p.observed.values.begin() + c * d.voxels(), d.voxels(), ch.values.begin());
            const auto r = bias::reference_correct(ch, p.prostate_mask);
            est_sum += bias::masked_rmse(r.field, truth_field, p.prostate_mask);
            base_sum += base;
        }
    }
    const double ratio = est_sum / base_sum;

    std::vector<const phantom::PatientRecord*> train;
    std::vector<const phantom::PatientRecord*> held;
    for (std::size_t i = 0; i < cohort.patients.size(); ++i)
        (i < cohort.patients.size() - kStage1Holdout ? train : held).push_back(&cohort.patients[i]);
    eval::Stage1Settings settings;
    std::vector<double> loss;
    const hunet::FrozenStage1 stage1(eval::train_stage1(train, settings, 5, &loss));
    std::size_t improved = 0;
    std::size_t slices = 0;
    for (const auto* p : held) {
        const auto corrected = stage1.correct(p->observed);
        const Dims3 d = p->truth.dims;
        const std::size_t nv = d.voxels();
        for (std::size_t z = 0; z < d.z; ++z) {
            double before = 0.0;
            double after = 0.0;
            std::size_t n = 0;
            for (std::size_t i = z * d.plane(); i < (z + 1) * d.plane(); ++i) {
                if (!p->prostate_mask.values[i]) continue;
                ++n;
                for (std::size_t c = 0; c < kChannels; ++c) {
                    const double s = bias::kChannelScale[c];
                    const double t = p->truth.values[c * nv + i];
                    before += std::pow((p->observed.values[c * nv + i] - t) / s, 2);
                    after += std::pow((corrected.values[c * nv + i] - t) / s, 2);
                }
            }
            if (n == 0) continue;
            ++slices;
            improved += after < before;
        }
    }
    const double frac = slices ? static_cast<double>(improved) / slices : 0.0;
    const double cpu = static_cast<double>(std::clock() - c0) / CLOCKS_PER_SEC;
    Outcome o;
    o.pass = ratio <= kFieldRatio && frac >= kSliceImproveFraction && cpu < kBiasCpuSeconds;
    o.detail = "field RMSE ratio " + fmt("%.3f", ratio) + " over 20 phantoms x 6 channels, Stage-1 improved " +
               std::to_string(improved) + "/" + std::to_string(slices) + " held-out slices, Stage-1 loss " +
               fmt("%.4g", loss.front()) + " -> " + fmt("%.4g", loss.back()) + ", " + fmt("%.0f", cpu) + " s CPU";
    return o;
}

Outcome decoupling() {
    const auto cohort = phantom::generate_cohort(compact_cohort(6, 31));
    const auto all = pointers(cohort);
    eval::Stage1Settings settings;
    settings.train.epochs = 3;
    const hunet::FrozenStage1 stage1(eval::train_stage1(all, settings, 1));
    const auto bytes_before = stage1.checkpoint_bytes();
    const auto hash_before = stage1.hash();

    patch::PipelineConfig pipeline;
    pipeline.max_negatives_per_patient = 60;
    const auto built = patch::build_dataset(all, &stage1, pipeline, true, 2);
    detector::TrainConfig tc;
    tc.epochs = 2;
    tc.patches_per_epoch = 256;
    tc.resnet.width = 8;
    detector::Model<float> model(pipeline.size, tc.resnet, 3);
    const auto log = detector::train(model, built.dataset, tc, &stage1, hash_before);

    const bool bytes_same = stage1.checkpoint_bytes() == bytes_before;
    const bool hash_same = stage1.hash() == hash_before && ckpt::fnv1a64(hunet::save_params(
                                                               hunet::load_params(bytes_before, stage1.config()))) ==
                                                               hash_before;
    bool verify_ok = true;
    try {
        stage1.verify();
    } catch (const hunet::DecouplingError&) {
        verify_ok = false;
    }
    bool guard_fires = false;
    try {
        detector::Model<float> other(pipeline.size, tc.resnet, 3);
        detector::train(other, built.dataset, tc, &stage1, hash_before ^ 1);
    } catch (const hunet::DecouplingError&) {
        guard_fires = true;
    }
    Outcome o;
    o.pass = bytes_same && hash_same && verify_ok && guard_fires && log.log.size() == tc.epochs;
    o.detail = "Stage-1 " + std::to_string(bytes_before.size()) + " bytes, hash " + stage1.hash_hex() +
               (bytes_same ? " unchanged" : " CHANGED") + " after " + std::to_string(log.log.size()) +
               " Stage-2 epochs; mismatch guard " + (guard_fires ? "fires" : "silent");
    return o;
}

Outcome patch_oracles() {
    RngStream rng(606);
    int matched = 0;
    for (int trial = 0; trial < kRandomMasks; ++trial) {
        const Dims3 d{1 + rng.below(4), 16 + rng.below(24), 16 + rng.below(24)};
        const std::size_t size = 3 + 2 * rng.below(6);
        const std::size_t stride = 1 + rng.below(3);
        MaskVolume mask(d, 0);
        const double density = rng.uniform(0.0, 0.4);
        for (auto& v : mask.values) v = rng.uniform() < density;
        std::size_t r0 = d.h;
        std::size_t c0 = d.w;
        for (std::size_t i = 0; i < mask.values.size(); ++i)
            if (mask.values[i]) {
                r0 = std::min(r0, (i / d.w) % d.h);
                c0 = std::min(c0, i % d.w);
            }
        r0 = std::max(r0, size / 2);
        c0 = std::max(c0, size / 2);
        std::size_t expect = 0;
        for (std::size_t z = 0; z < d.z; ++z)
            for (std::size_t y = r0; y + size / 2 < d.h; ++y)
                for (std::size_t x = c0; x + size / 2 < d.w; ++x)
                    expect += (y - r0) % stride == 0 && (x - c0) % stride == 0 && mask.at(z, y, x);
        matched += patch::enumerate_centers(mask, size, stride).size() == expect;
    }

    const bool ceil_ok = patch::positive_voxel_count(11, 0.7) == 85;
    std::vector<std::uint8_t> w(121, 0);
    std::fill(w.begin(), w.begin() + 85, 1);
    const bool at85 = patch::label_patch(w, 11, 0.7, true) == patch::Label::positive;
    w[84] = 0;
    const bool at84 = patch::label_patch(w, 11, 0.7, true) == patch::Label::excluded;

    const auto cohort = phantom::generate_cohort(compact_cohort(8, 17));
    const auto all = pointers(cohort);
    patch::PipelineConfig pipeline;
    const auto built = patch::build_dataset(all, nullptr, pipeline, true, 4);
    std::set<std::string> cancerous;
    for (const auto* p : all)
        if (p->has_cancer) cancerous.insert(p->patient_id);
    std::size_t bad = 0;
    for (std::size_t i = 0; i < built.dataset.count(); ++i)
        bad += built.dataset.labels[i] == 0 && cancerous.count(built.dataset.patients[i]);
    for (const auto& pc : built.manifest.patients) bad += pc.has_cancer ? pc.negatives : 0;

    Outcome o;
    o.pass = matched == kRandomMasks && ceil_ok && at85 && at84 && bad == 0;
    o.detail = std::to_string(matched) + "/50 masks match brute force, 85/121 -> positive " + (at85 ? "yes" : "no") +
               ", 84/121 -> excluded " + (at84 ? "yes" : "no") + ", negatives from cancerous patients " +
               std::to_string(bad) + " of " + std::to_string(built.dataset.count()) + " patches";
    return o;
}

Outcome metrics_and_cv() {
    bool exact = true;
    for (std::uint64_t tp = 0; tp <= 20; ++tp)
        for (std::uint64_t tn = 0; tn <= 20; ++tn)
            for (std::uint64_t fp = 0; fp <= 20; ++fp)
                for (std::uint64_t fn = 0; fn <= 20; ++fn) {
                    const auto m = eval::compute_metrics({tp, tn, fp, fn});
                    exact &= m.sensitivity.has_value() == (tp + fn > 0) && m.specificity.has_value() == (tn + fp > 0);
                    if (m.sensitivity) exact &= *m.sensitivity == static_cast<double>(tp) / (tp + fn);
                    if (m.specificity) exact &= *m.specificity == static_cast<double>(tn) / (tn + fp);
                    if (m.accuracy) exact &= *m.accuracy == static_cast<double>(tp + tn) / (tp + tn + fp + fn);
                }

    RngStream rng(707);
    int partitions = 0;
    int trials = 0;
    while (trials < 200) {
        const std::size_t c = rng.below(20);
        const std::size_t b = rng.below(20);
        if (c + b < 2) continue;
        ++trials;
        const std::size_t k = 2 + rng.below(std::min<std::size_t>(c + b - 1, 9));
        std::vector<std::pair<std::string, bool>> ids;
        for (std::size_t i = 0; i < c; ++i) ids.emplace_back("C" + std::to_string(i), true);
        for (std::size_t i = 0; i < b; ++i) ids.emplace_back("B" + std::to_string(i), false);
        const auto split = eval::make_folds(ids, k, rng.next_u64());
        std::map<std::string, int> seen;
        std::vector<int> pc(k);
        std::vector<int> pb(k);
        for (std::size_t f = 0; f < k; ++f)
            for (const auto& id : split.validation(f)) {
                ++seen[id];
                (id[0] == 'C' ? pc : pb)[f]++;
            }
        bool ok = seen.size() == c + b;
        for (const auto& e : seen) ok &= e.second == 1;
        ok &= *std::max_element(pc.begin(), pc.end()) - *std::min_element(pc.begin(), pc.end()) <= 1;
        ok &= *std::max_element(pb.begin(), pb.end()) - *std::min_element(pb.begin(), pb.end()) <= 1;
        partitions += ok;
    }

    const auto cohort = phantom::generate_cohort(compact_cohort(4, 5));
    eval::CvConfig cfg;
    cfg.folds = 2;
    cfg.split_hook = [](std::size_t, std::vector<const phantom::PatientRecord*>& train,
                        std::vector<const phantom::PatientRecord*>& validation) {
        train.push_back(validation.back());
    };
    bool leak_caught = false;
    try {
        eval::cross_validate(cohort, cfg);
    } catch (const eval::LeakageError&) {
        leak_caught = true;
    }
    Outcome o;
    o.pass = exact && partitions == trials && leak_caught;
    o.detail = std::string("metrics ") + (exact ? "exact" : "WRONG") + " on 21^4 count tuples, " +
               std::to_string(partitions) + "/" + std::to_string(trials) + " stratified partitions, leakage " +
               (leak_caught ? "raised LeakageError" : "NOT detected");
    return o;
}

// LPT schedule of measured fold times on the reference core count.
double projected_wall(std::vector<double> folds, std::size_t workers) {
    std::sort(folds.rbegin(), folds.rend());
    std::vector<double> load(workers, 0.0);
    for (double t : folds) *std::min_element(load.begin(), load.end()) += t;
    return *std::max_element(load.begin(), load.end());
}

Outcome end_to_end() {
    auto rc = config::parse_text("");
    rc.propagate_seed();
    const auto t0 = std::chrono::steady_clock::now();
    const auto cohort = phantom::generate_cohort(rc.cohort);
    const double gen_secs = seconds_since(t0);
    eval::CvConfig cv = rc.cv;
    cv.threads = cli::worker_count();
    cv.config_echo = config::resolved_json(rc);
    std::vector<double> fold_secs;
    const auto report = eval::report_json(eval::cross_validate(cohort, cv, [&](const std::string& line) {
        std::cout << "  " << line << std::endl;
        const auto at = line.rfind(" in ");
        if (at != std::string::npos) fold_secs.push_back(std::stod(line.substr(at + 4)));
    }));
    const double wall = seconds_since(t0);
    const auto& mean = report.at("mean");
    const double acc = metric(mean, "patch", "accuracy");
    const double sens = metric(mean, "patch", "sensitivity");
    const double spec = metric(mean, "patch", "specificity");
    const double pacc = metric(mean, "patient", "accuracy");
    const std::size_t cores = cli::worker_count();
    const double budget_wall = cores >= kReferenceCores ? wall : gen_secs + projected_wall(fold_secs, kReferenceCores);
    Outcome o;
    o.pass = acc >= kMinPatchAccuracy && sens >= kMinSensitivity && spec >= kMinSpecificity &&
             pacc >= kMinPatientAccuracy && budget_wall <= kEndToEndSeconds;
    o.detail = "patch acc " + fmt("%.3f", acc) + " sens " + fmt("%.3f", sens) + " spec " + fmt("%.3f", spec) +
               ", patient acc " + fmt("%.3f", pacc) + ", wall " + fmt("%.0f", wall) + " s on " + std::to_string(cores) +
               " core(s)" +
               (cores >= kReferenceCores ? "" : ", projected 4-core " + fmt("%.0f", budget_wall) + " s");
    return o;
}

std::string ablation_config(const std::string& base, const std::string& sweep) {
    return base + "eval.sweep = " + sweep + "\n";
}

json sweep_report(const std::string& name, const std::string& cfg_text) {
    const auto dir = scratch(name);
    write_text(dir / "run.cfg", cfg_text);
    if (run_cli({"phantom", "--config", (dir / "run.cfg").string(), "--out", dir.string()}) != 0 ||
        run_cli({"cv", "--config", (dir / "run.cfg").string(), "--out", dir.string()}) != 0) {
        return json();
    }
    return read_json(dir / "report.json");
}

const json* row(const json& report, const std::string& variant) {
    if (!report.contains("ablation")) return nullptr;
    for (const auto& r : report.at("ablation"))
        if (r.at("variant") == variant) return &r;
    return nullptr;
}

const std::string kAblationBase =
    "cohort.n_patients = 12\n"
    "cohort.z_min = 10\n"
    "cohort.z_max = 14\n"
    "stage1.epochs = 15\n"
    "eval.folds = 3\n";

Outcome ablation() {
    const auto t0 = std::chrono::steady_clock::now();
    const auto biased = sweep_report("bias", ablation_config(kAblationBase + "bias.amplitude = 0.3\n", "full,no_stage1"));
    const auto aniso = sweep_report("aniso", ablation_config(kAblationBase + "cohort.mimics = 3\n"
                                                                  "cohort.lesion_radius_min = 4\n"
                                                                  "cohort.lesion_radius_max = 6\n", "full,two_d"));
    const auto sizes = sweep_report("sizes", ablation_config("cohort.n_patients = 6\n"
                                                             "cohort.z_min = 8\n"
                                                             "cohort.z_max = 10\n"
                                                             "stage1.epochs = 5\n"
                                                             "stage2.epochs = 2\n"
                                                             "stage2.patches_per_epoch = 256\n"
                                                             "eval.folds = 2\n",
                                                             "size9,size11,size15"));
    auto acc = [](const json* r) { return r ? metric(r->at("mean"), "patch", "accuracy") : std::nan(""); };
    const double full_b = acc(row(biased, "full"));
    const double none_b = acc(row(biased, "no_stage1"));
    const double full_a = acc(row(aniso, "full"));
    const double flat_a = acc(row(aniso, "two_d"));
    std::set<std::size_t> sizes_seen;
    bool sizes_complete = true;
    for (const char* v : {"size9", "size11", "size15"}) {
        const json* r = row(sizes, v);
        if (!r) {
            sizes_complete = false;
            continue;
        }
        sizes_seen.insert(r->at("patch_size").get<std::size_t>());
        sizes_complete &= !std::isnan(acc(r));
    }
    Outcome o;
    o.pass = full_b >= none_b && full_a >= flat_a && sizes_complete && sizes_seen == std::set<std::size_t>{9, 11, 15};
    o.detail = "amplitude 0.3: full " + fmt("%.4f", full_b) + " vs no-Stage-1 " + fmt("%.4f", none_b) +
               "; mimic preset: 3-slice " + fmt("%.4f", full_a) + " vs 2-D " + fmt("%.4f", flat_a) + "; S rows " +
               std::to_string(sizes_seen.size()) + "/3, " + fmt("%.0f", seconds_since(t0)) + " s";
    return o;
}

Outcome reproducibility() {
    const std::string cfg = "seed = 123\n"
                            "cohort.n_patients = 6\n"
                            "cohort.z_min = 8\n"
                            "cohort.z_max = 10\n"
                            "stage1.epochs = 4\n"
                            "stage2.epochs = 2\n"
                            "stage2.patches_per_epoch = 256\n"
                            "eval.folds = 2\n";
    const auto first = scratch("repro_a");
    const auto second = scratch("repro_b");
    write_text(first / "run.cfg", cfg);
    bool ran = run_cli({"phantom", "--config", (first / "run.cfg").string(), "--out", first.string()}) == 0 &&
               run_cli({"cv", "--config", (first / "run.cfg").string(), "--out", first.string()}) == 0;
    const auto resolved = first / "config.resolved";
    ran = ran && run_cli({"phantom", "--config", resolved.string(), "--out", second.string()}) == 0 &&
          run_cli({"cv", "--config", resolved.string(), "--out", second.string()}) == 0;
    const std::string a = ran ? read_bytes(first / "report.json") : "";
    const std::string b = ran ? read_bytes(second / "report.json") : "";
    Outcome o;
    o.pass = ran && !a.empty() && a == b;
    o.detail = ran ? std::to_string(a.size()) + "-byte report " + (a == b ? "byte-identical" : "DIFFERS") +
                         " after rerun from config.resolved"
                   : "cv run failed";
    return o;
}

struct Criterion {
    int id;
    const char* title;
    std::function<Outcome()> run;
};

}  // namespace

int main(int argc, char** argv) {
    const std::vector<Criterion> all{
        {1, "WHT correctness", wht_correctness},
        {2, "WHT performance", wht_speed},
        {3, "gradient suite", gradients},
        {4, "bias recovery", bias_recovery},
        {5, "decoupling contract", decoupling},
        {6, "patch pipeline oracles", patch_oracles},
        {7, "metrics and CV", metrics_and_cv},
        {8, "end-to-end desk-scale detection", end_to_end},
        {9, "ablation direction", ablation},
        {10, "reproducibility", reproducibility},
    };
    std::set<int> wanted;
    for (int i = 1; i < argc; ++i) wanted.insert(std::atoi(argv[i]));
    int failed = 0;
    for (const auto& c : all) {
        if (!wanted.empty() && !wanted.count(c.id)) continue;
        Outcome o;
        try {
            o = c.run();
        } catch (const std::exception& e) {
            o = {false, std::string("threw: ") + e.what()};
        }
        failed += !o.pass;
        std::cout << "criterion " << c.id << " (" << c.title << "): " << (o.pass ? "PASS" : "FAIL") << " | "
                  << o.detail << std::endl;
    }
    return failed == 0 ? 0 : 1;
}
