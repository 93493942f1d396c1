#include "hbrnet/cli.hpp"

#include <fcntl.h>
#include <unistd.h>

#include <CLI11.hpp>
#include <algorithm>
#include <cstdlib>
#include <fstream>
#include <map>
#include <thread>

#include "hbrnet/checkpoint.hpp"

namespace hbrnet::cli {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

const std::vector<std::string> kSubcommands{"phantom", "train-stage1", "train-stage2", "eval", "cv", "heatmap"};

void write_text(const fs::path& path, const std::string& text) {
    std::ofstream f(path, std::ios::binary | std::ios::trunc);
    if (!f) throw std::runtime_error("cannot write " + path.string());
    f << text;
}

std::string read_text(const fs::path& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw std::runtime_error("cannot read " + path.string());
    return {std::istreambuf_iterator<char>(f), std::istreambuf_iterator<char>()};
}

fs::path cohort_path(const config::RunConfig& c, const fs::path& out) {
    return c.cohort_dir.empty() ? out / "cohort" : fs::path(c.cohort_dir);
}

phantom::Cohort load_cohort(const config::RunConfig& c, const fs::path& out) {
    const fs::path dir = cohort_path(c, out);
    if (!fs::exists(dir / "manifest.json")) {
        throw DependencyError("no cohort at " + dir.string() + "; run 'hbrnet phantom' first");
    }
    return phantom::read_cohort(dir);
}

struct Split {
    std::vector<const phantom::PatientRecord*> train;
    std::vector<const phantom::PatientRecord*> validation;
};

Split fold_split(const phantom::Cohort& cohort, const config::RunConfig& c) {
    std::vector<std::pair<std::string, bool>> ids;
    std::map<std::string, const phantom::PatientRecord*> by_id;
    for (const auto& p : cohort.patients) {
        ids.emplace_back(p.patient_id, p.has_cancer);
        by_id[p.patient_id] = &p;
    }
    const auto folds = eval::make_folds(ids, c.cv.folds, c.cv.seed);
    Split s;
    for (const auto& id : folds.training(c.fold)) s.train.push_back(by_id.at(id));
    for (const auto& id : folds.validation(c.fold)) s.validation.push_back(by_id.at(id));
    eval::check_disjoint(s.train, s.validation);
    return s;
}

std::uint64_t fold_seed(const config::RunConfig& c) { return c.cv.seed + c.fold; }

struct LoadedStage1 {
    std::optional<hunet::FrozenStage1> frozen;
    std::uint64_t hash = 0;
    const hunet::FrozenStage1* get() const { return frozen ? &*frozen : nullptr; }
};

LoadedStage1 load_stage1(const config::RunConfig& c, const fs::path& out) {
    LoadedStage1 s;
    if (c.cv.no_stage1) return s;
    const fs::path ckpt_path = out / "stage1.ckpt";
    const fs::path meta_path = out / "stage1.json";
    if (!fs::exists(ckpt_path) || !fs::exists(meta_path)) {
        throw DependencyError("no Stage-1 checkpoint in " + out.string() + "; run 'hbrnet train-stage1' first");
    }
    const auto bytes = ckpt::read_file(ckpt_path);
    s.frozen.emplace(hunet::load_params(bytes, c.cv.stage1.net));
    const json meta = json::parse(read_text(meta_path));
    if (meta.at("hash").get<std::string>() != s.frozen->hash_hex()) {
        throw hunet::DecouplingError("Stage-1 checkpoint hash differs from stage1.json");
    }
    s.hash = s.frozen->hash();
    return s;
}

detector::Model<float> load_stage2(const config::RunConfig& c, const fs::path& out) {
    const fs::path path = out / "stage2.ckpt";
    if (!fs::exists(path)) {
        throw DependencyError("no Stage-2 checkpoint in " + out.string() + "; run 'hbrnet train-stage2' first");
    }
    return detector::load_model(ckpt::read_file(path), c.cv.pipeline.size, c.cv.stage2.resnet);
}

void cmd_phantom(const config::RunConfig& c, const fs::path& out, std::ostream& log) {
    const auto cohort = phantom::generate_cohort(c.cohort);
    const fs::path dir = cohort_path(c, out);
    phantom::write_cohort(cohort, dir);
    log << "wrote " << cohort.patients.size() << " phantoms to " << dir.string() << "\n";
}

void cmd_train_stage1(const config::RunConfig& c, const fs::path& out, std::ostream& log) {
    if (c.cv.no_stage1) throw std::invalid_argument("train-stage1 with stage1.enabled = false");
    const auto cohort = load_cohort(c, out);
    const auto split = fold_split(cohort, c);
    std::vector<double> losses;
    const auto params = eval::train_stage1(split.train, c.cv.stage1, derive_seed(fold_seed(c), 1), &losses);
    const hunet::FrozenStage1 frozen(params);
    ckpt::write_file(out / "stage1.ckpt", frozen.checkpoint_bytes());
    write_text(out / "stage1_loss.csv", hunet::loss_log_csv(losses));
    json meta = {{"hash", frozen.hash_hex()}, {"fold", c.fold}, {"bytes", frozen.checkpoint_bytes().size()}};
    write_text(out / "stage1.json", meta.dump(2) + "\n");
    log << "stage1 trained on " << split.train.size() << " patients, hash " << frozen.hash_hex() << "\n";
}

void cmd_train_stage2(const config::RunConfig& c, const fs::path& out, std::ostream& log) {
    const auto s1 = load_stage1(c, out);
    const auto stage1_bytes = c.cv.no_stage1 ? std::vector<std::uint8_t>{} : ckpt::read_file(out / "stage1.ckpt");
    const auto cohort = load_cohort(c, out);
    const auto split = fold_split(cohort, c);
    const std::uint64_t seed = fold_seed(c);
    const auto built = patch::build_dataset(split.train, s1.get(), c.cv.pipeline, true, derive_seed(seed, 2));
    patch::write_store(built, out / "patches_train");
    detector::TrainConfig tc = c.cv.stage2;
    tc.seed = derive_seed(seed, 3);
    detector::Model<float> model(c.cv.pipeline.size, tc.resnet, derive_seed(seed, 4));
    const auto result = detector::train(model, built.dataset, tc, s1.get(), s1.hash,
                                        [&](const detector::EpochLog& e) {
                                            log << "epoch " << e.epoch << " loss " << e.loss << " acc "
                                                << e.train_acc << "\n";
                                        });
    if (!c.cv.no_stage1 && ckpt::read_file(out / "stage1.ckpt") != stage1_bytes) {
        throw hunet::DecouplingError("stage1.ckpt changed during Stage-2 training");
    }
    ckpt::write_file(out / "stage2.ckpt", detector::save_model(model));
    write_text(out / "stage2_log.csv", detector::log_csv(result.log));
    log << "stage2 trained on " << built.dataset.count() << " patches\n";
}

json fold_json(const eval::FoldResult& f) {
    eval::CvReport one;
    one.folds = {f};
    return eval::report_json(one)["folds"][0];
}

void cmd_eval(const config::RunConfig& c, const fs::path& out, std::ostream& log) {
    const auto s1 = load_stage1(c, out);
    auto model = load_stage2(c, out);
    const auto cohort = load_cohort(c, out);
    const auto split = fold_split(cohort, c);
    eval::FoldResult r;
    r.fold = c.fold;
    r.stage1_hash = s1.frozen ? s1.frozen->hash_hex() : "";
    eval::ConfusionCounts pc;
    eval::ConfusionCounts vc;
    eval::ConfusionCounts patc;
    for (const auto* p : split.validation) {
        r.validation_ids.push_back(p->patient_id);
        const auto s = eval::score_patient(*p, s1.get(), model, c.cv.pipeline);
        const auto counts = eval::tally(*p, s, c.cv.p_threshold);
        pc += counts.patch;
        vc += counts.voxel;
        const auto pp = eval::aggregate_patient(p->patient_id, s.probs, c.cv.rho, c.cv.p_threshold);
        (p->has_cancer ? (pp.label ? patc.tp : patc.fn) : (pp.label ? patc.fp : patc.tn)) += 1;
        r.patients.push_back(pp);
    }
    r.patch = eval::compute_metrics(pc, eval::Level::patch);
    r.voxel = eval::compute_metrics(vc, eval::Level::voxel);
    r.patient = eval::compute_metrics(patc, eval::Level::patient);
    json j = fold_json(r);
    j = {{"config", config::resolved_json(c)}, {"result", j}};
    write_text(out / "eval.json", j.dump(2) + "\n");
    log << "evaluated " << split.validation.size() << " patients\n";
}

eval::CvConfig variant_config(const config::RunConfig& c, const std::string& variant) {
    eval::CvConfig v = c.cv;
    if (variant == "no_stage1") {
        v.no_stage1 = true;
    } else if (variant == "two_d") {
        v.pipeline.two_d = true;
    } else if (variant.rfind("size", 0) == 0) {
        v.pipeline.size = std::stoul(variant.substr(4));
    }
    return v;
}

json variant_row(const std::string& variant, const eval::CvConfig& v, const json& report) {
    return {{"variant", variant},
            {"patch_size", v.pipeline.size},
            {"stage1", !v.no_stage1},
            {"two_d", v.pipeline.two_d},
            {"mean", report["mean"]},
            {"pooled", report["pooled"]}};
}

void cmd_cv(const config::RunConfig& c, const fs::path& out, std::ostream& log) {
    const auto cohort = load_cohort(c, out);
    auto run_one = [&](eval::CvConfig v, const std::string& tag) {
        v.config_echo = config::resolved_json(c);
        v.threads = worker_count();
        return eval::report_json(eval::cross_validate(cohort, v, [&](const std::string& line) {
            log << tag << ": " << line << "\n";
            log.flush();
        }));
    };
    json report = run_one(c.cv, "main");
    if (!c.sweep.empty()) {
        json rows = json::array();
        for (const auto& variant : c.sweep) {
            const auto v = variant_config(c, variant);
            const bool same = v.no_stage1 == c.cv.no_stage1 && v.pipeline.two_d == c.cv.pipeline.two_d &&
                              v.pipeline.size == c.cv.pipeline.size;
            rows.push_back(variant_row(variant, v, same ? report : run_one(v, variant)));
        }
        report["ablation"] = rows;
    }
    write_text(out / "report.json", report.dump(2) + "\n");
    log << "wrote " << (out / "report.json").string() << "\n";
}

void cmd_heatmap(const config::RunConfig& c, const fs::path& out, std::ostream& log) {
    const auto s1 = load_stage1(c, out);
    auto model = load_stage2(c, out);
    const auto cohort = load_cohort(c, out);
    std::vector<const phantom::PatientRecord*> targets;
    if (c.patient.empty()) {
        targets = fold_split(cohort, c).validation;
    } else {
        for (const auto& p : cohort.patients) {
            if (p.patient_id == c.patient) targets.push_back(&p);
        }
        if (targets.empty()) throw std::invalid_argument("eval.patient '" + c.patient + "' not in cohort");
    }
    for (const auto* p : targets) {
        const auto s = eval::score_patient(*p, s1.get(), model, c.cv.pipeline);
        eval::export_heatmap(s.heatmap, p->patient_id, out / "heatmaps");
        log << "heatmap " << p->patient_id << ": " << p->observed.dims.z << " slices\n";
    }
}

}  // namespace

DirectoryLock::DirectoryLock(const fs::path& out) : path_(out / ".hbrnet.lock") {
    fs::create_directories(out);
    const int fd = ::open(path_.c_str(), O_CREAT | O_EXCL | O_WRONLY, 0644);
    if (fd < 0) {
        throw LockError("output directory " + out.string() + " is locked by another run (" + path_.string() + ")");
    }
    const std::string pid = std::to_string(::getpid()) + "\n";
    [[maybe_unused]] auto n = ::write(fd, pid.data(), pid.size());
    ::close(fd);
}

DirectoryLock::~DirectoryLock() {
    std::error_code ec;
    fs::remove(path_, ec);
}

bool is_subcommand(const std::string& name) {
    return std::find(kSubcommands.begin(), kSubcommands.end(), name) != kSubcommands.end();
}

std::size_t worker_count() {
    std::size_t n = std::max(1U, std::thread::hardware_concurrency());
    if (const char* env = std::getenv("HBRNET_THREADS")) {
        const long cap = std::strtol(env, nullptr, 10);
        if (cap > 0) n = std::min<std::size_t>(n, static_cast<std::size_t>(cap));
    }
    return n;
}

void run(const std::string& subcommand, const config::RunConfig& config, const fs::path& out,
         std::ostream& log) {
    if (subcommand == "phantom") return cmd_phantom(config, out, log);
    if (subcommand == "train-stage1") return cmd_train_stage1(config, out, log);
    if (subcommand == "train-stage2") return cmd_train_stage2(config, out, log);
    if (subcommand == "eval") return cmd_eval(config, out, log);
    if (subcommand == "cv") return cmd_cv(config, out, log);
    if (subcommand == "heatmap") return cmd_heatmap(config, out, log);
    throw std::invalid_argument("unknown subcommand " + subcommand);
}

int main(int argc, char** argv, std::ostream& log, std::ostream& err) {
    CLI::App app{"Two-stage detector on synthetic biomarker phantoms"};
    app.require_subcommand(1, 1);
    std::string config_path;
    std::string out;
    std::vector<std::string> overrides;
    for (const auto& name : kSubcommands) {
        auto* sub = app.add_subcommand(name);
        sub->add_option("--config", config_path, "key = value config file");
        sub->add_option("--out", out, "output directory")->required();
        sub->add_option("--set", overrides, "key=value override (repeatable)");
    }
    try {
        app.parse(argc, argv);
    } catch (const CLI::CallForHelp& e) {
        return app.exit(e, log, err);
    } catch (const CLI::ParseError& e) {
        app.exit(e, log, err);
        return usage_error;
    }
    const std::string subcommand = app.get_subcommands().front()->get_name();

    config::RunConfig config;
    try {
        config = config_path.empty() ? config::parse_text("") : config::parse_file(config_path);
        config::apply_overrides(config, overrides);
    } catch (const std::exception& e) {
        err << "config error: " << e.what() << "\n";
        return usage_error;
    }

    try {
        DirectoryLock lock(out);
        write_text(fs::path(out) / "config.resolved", config::resolved_text(config));
        run(subcommand, config, out, log);
    } catch (const DependencyError& e) {
        err << "missing dependency: " << e.what() << "\n";
        return missing_dependency;
    } catch (const std::invalid_argument& e) {
        err << "usage error: " << e.what() << "\n";
        return usage_error;
    } catch (const std::exception& e) {
        err << "runtime failure: " << e.what() << "\n";
        return runtime_failure;
    }
    return ok;
}

}  // namespace hbrnet::cli
