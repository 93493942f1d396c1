#include "hbrnet/eval.hpp"

#include <algorithm>
#include <atomic>
#include <chrono>
#include <cstdio>
#include <cmath>
#include <fstream>
#include <mutex>
#include <set>
#include <thread>

namespace hbrnet::eval {

using nlohmann::json;

std::string level_name(Level level) {
    switch (level) {
        case Level::patch: return "patch";
        case Level::voxel: return "voxel";
        case Level::patient: return "patient";
    }
    return "?";
}

MetricsReport compute_metrics(const ConfusionCounts& c, Level level) {
    MetricsReport r;
    r.level = level;
    r.counts = c;
    auto ratio = [](std::uint64_t num, std::uint64_t den) -> std::optional<double> {
        if (den == 0) return std::nullopt;
        return static_cast<double>(num) / static_cast<double>(den);
    };
    r.sensitivity = ratio(c.tp, c.tp + c.fn);
    r.specificity = ratio(c.tn, c.tn + c.fp);
    r.accuracy = ratio(c.tp + c.tn, c.total());
    return r;
}

std::vector<std::string> FoldSplit::validation(std::size_t fold) const {
    std::vector<std::string> out;
    for (const auto& [id, f] : assignment) {
        if (f == fold) out.push_back(id);
    }
    return out;
}

std::vector<std::string> FoldSplit::training(std::size_t fold) const {
    std::vector<std::string> out;
    for (const auto& [id, f] : assignment) {
        if (f != fold) out.push_back(id);
    }
    return out;
}

FoldSplit make_folds(const std::vector<std::pair<std::string, bool>>& patients, std::size_t k,
                     std::uint64_t seed) {
    if (k == 0 || k > patients.size()) {
        throw std::invalid_argument("make_folds: k = " + std::to_string(k) + " with " +
                                    std::to_string(patients.size()) + " patients");
    }
    FoldSplit split;
    split.k = k;
    RngStream rng(seed);
    std::size_t next = 0;
    for (bool cls : {true, false}) {
        std::vector<std::string> ids;
        for (const auto& [id, c] : patients) {
            if (c == cls) ids.push_back(id);
        }
        for (std::size_t i = ids.size(); i > 1; --i) {
            std::swap(ids[i - 1], ids[rng.below(i)]);
        }
        for (const auto& id : ids) {
            if (!split.assignment.emplace(id, next).second) {
                throw std::invalid_argument("make_folds: duplicate patient id " + id);
            }
            next = (next + 1) % k;
        }
    }
    return split;
}

PatientPrediction aggregate_patient(const std::string& patient_id, std::span<const float> probs,
                                    double rho, double p_threshold) {
    if (probs.empty()) {
        throw std::invalid_argument("aggregate_patient: no patch predictions for " + patient_id);
    }
    const auto positives = std::count_if(probs.begin(), probs.end(),
                                         [&](float p) { return p >= p_threshold; });
    PatientPrediction out;
    out.patient_id = patient_id;
    out.positive_fraction = static_cast<double>(positives) / static_cast<double>(probs.size());
    out.label = out.positive_fraction >= rho ? 1 : 0;
    return out;
}

Volume3 render_heatmap(const std::vector<patch::Center>& centers, std::span<const float> probs,
                       std::size_t size, Dims3 dims, const MaskVolume& dilated) {
    if (centers.size() != probs.size()) {
        throw std::invalid_argument("render_heatmap: one probability per center required");
    }
    std::vector<double> sum(dims.voxels(), 0.0);
    std::vector<std::uint32_t> cover(dims.voxels(), 0);
    const std::size_t half = size / 2;
    for (std::size_t i = 0; i < centers.size(); ++i) {
        const auto& c = centers[i];
        for (std::size_t y = c.row - half; y <= c.row + half; ++y) {
            for (std::size_t x = c.col - half; x <= c.col + half; ++x) {
                const std::size_t k = (c.slice * dims.h + y) * dims.w + x;
                sum[k] += probs[i];
                ++cover[k];
            }
        }
    }
    Volume3 out(dims, 0.0F);
    for (std::size_t k = 0; k < out.values.size(); ++k) {
        if (dilated.values[k] && cover[k] > 0) {
            out.values[k] = static_cast<float>(sum[k] / cover[k]);
        }
    }
    return out;
}

std::vector<std::uint8_t> encode_pgm(const Volume3& heatmap, std::size_t slice) {
    const auto& d = heatmap.dims;
    const std::string header = "P5\n" + std::to_string(d.w) + " " + std::to_string(d.h) + "\n255\n";
    std::vector<std::uint8_t> out(header.begin(), header.end());
    for (std::size_t y = 0; y < d.h; ++y) {
        for (std::size_t x = 0; x < d.w; ++x) {
            const float v = std::clamp(heatmap.at(slice, y, x), 0.0F, 1.0F);
            out.push_back(static_cast<std::uint8_t>(std::lround(v * 255.0F)));
        }
    }
    return out;
}

void export_heatmap(const Volume3& heatmap, const std::string& patient_id,
                    const std::filesystem::path& dir) {
    std::filesystem::create_directories(dir);
    for (std::size_t z = 0; z < heatmap.dims.z; ++z) {
        const auto bytes = encode_pgm(heatmap, z);
        const auto path = dir / (patient_id + "_" + std::to_string(z) + ".pgm");
        std::ofstream f(path, std::ios::binary | std::ios::trunc);
        if (!f) throw std::runtime_error("cannot write " + path.string());
        f.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
    }
}

void check_disjoint(const std::vector<const phantom::PatientRecord*>& train,
                    const std::vector<const phantom::PatientRecord*>& validation) {
    std::set<std::string> val;
    for (const auto* p : validation) val.insert(p->patient_id);
    for (const auto* p : train) {
        if (val.count(p->patient_id)) {
            throw LeakageError("validation patient " + p->patient_id + " reached training");
        }
    }
}

PatientScores score_patient(const phantom::PatientRecord& p, const hunet::FrozenStage1* stage1,
                            detector::Model<float>& model, const patch::PipelineConfig& pipeline) {
    PatientScores s;
    s.patient_id = p.patient_id;
    s.has_cancer = p.has_cancer;
    const BiomarkerVolume vol = patch::prepared_volume(p, stage1);
    const MaskVolume dilated = patch::dilate_mask(p.prostate_mask, pipeline.dilation);
    s.centers = patch::enumerate_centers(dilated, pipeline.size, pipeline.stride);
    constexpr std::size_t kChunk = 256;
    const std::size_t pn = 3 * kChannels * pipeline.size * pipeline.size;
    std::vector<float> buf;
    for (std::size_t start = 0; start < s.centers.size(); start += kChunk) {
        const std::size_t end = std::min(s.centers.size(), start + kChunk);
        buf.clear();
        buf.reserve((end - start) * pn);
        for (std::size_t i = start; i < end; ++i) {
            const auto v = patch::extract_patch(vol, s.centers[i], pipeline.size, pipeline.two_d);
            buf.insert(buf.end(), v.begin(), v.end());
        }
        const auto pr = detector::predict(model, buf, end - start);
        s.probs.insert(s.probs.end(), pr.begin(), pr.end());
    }
    for (const auto& c : s.centers) {
        s.labels.push_back(patch::label_patch(patch::mask_window(p.cancer_mask, c, pipeline.size),
                                              pipeline.size, pipeline.label_threshold, p.has_cancer));
    }
    s.heatmap = render_heatmap(s.centers, s.probs, pipeline.size, p.observed.dims, dilated);
    return s;
}

PatientCounts tally(const phantom::PatientRecord& p, const PatientScores& s, double p_threshold) {
    PatientCounts c;
    for (std::size_t i = 0; i < s.probs.size(); ++i) {
        const bool pred = s.probs[i] >= p_threshold;
        if (s.labels[i] == patch::Label::positive) {
            (pred ? c.patch.tp : c.patch.fn) += 1;
        } else if (s.labels[i] == patch::Label::negative) {
            (pred ? c.patch.fp : c.patch.tn) += 1;
        }
    }
    for (std::size_t k = 0; k < s.heatmap.values.size(); ++k) {
        if (!p.prostate_mask.values[k]) continue;
        const bool pred = s.heatmap.values[k] >= p_threshold;
        if (p.cancer_mask.values[k]) {
            (pred ? c.voxel.tp : c.voxel.fn) += 1;
        } else {
            (pred ? c.voxel.fp : c.voxel.tn) += 1;
        }
    }
    return c;
}

hunet::Params<float> train_stage1(const std::vector<const phantom::PatientRecord*>& train,
                                  const Stage1Settings& settings, std::uint64_t seed,
                                  std::vector<double>* loss_log) {
    std::vector<hunet::Stage1Sample> samples;
    for (const auto* p : train) {
        auto s = hunet::make_samples(p->observed, p->prostate_mask, settings.reference,
                                     settings.reference_mode, 2);
        std::move(s.begin(), s.end(), std::back_inserter(samples));
    }
    hunet::TrainConfig tc = settings.train;
    tc.seed = seed;
    auto result = hunet::train(samples, settings.net, tc);
    if (loss_log) *loss_log = result.epoch_loss;
    return std::move(result.params);
}

FoldResult run_fold(const std::vector<const phantom::PatientRecord*>& train,
                    const std::vector<const phantom::PatientRecord*>& validation,
                    const CvConfig& config, std::size_t fold) {
    check_disjoint(train, validation);
    const std::uint64_t fold_seed = config.seed + fold;
    FoldResult r;
    r.fold = fold;
    for (const auto* p : validation) r.validation_ids.push_back(p->patient_id);

    std::optional<hunet::FrozenStage1> stage1;
    if (!config.no_stage1) {
        stage1.emplace(train_stage1(train, config.stage1, derive_seed(fold_seed, 1)));
        r.stage1_hash = stage1->hash_hex();
    }
    const hunet::FrozenStage1* s1 = stage1 ? &*stage1 : nullptr;
    const std::uint64_t s1_hash = stage1 ? stage1->hash() : 0;

    auto built = patch::build_dataset(train, s1, config.pipeline, true, derive_seed(fold_seed, 2));
    std::set<std::string> train_ids;
    for (const auto* p : train) train_ids.insert(p->patient_id);
    for (const auto& id : built.dataset.patients) {
        if (!train_ids.count(id)) {
            throw LeakageError("patch from non-training patient " + id + " in fold " +
                               std::to_string(fold));
        }
    }

    detector::TrainConfig tc = config.stage2;
    tc.seed = derive_seed(fold_seed, 3);
    detector::Model<float> model(config.pipeline.size, tc.resnet, derive_seed(fold_seed, 4));
    detector::train(model, built.dataset, tc, s1, s1_hash);
    built = {};

    ConfusionCounts patch_c;
    ConfusionCounts voxel_c;
    ConfusionCounts patient_c;
    for (const auto* p : validation) {
        const auto s = score_patient(*p, s1, model, config.pipeline);
        const auto counts = tally(*p, s, config.p_threshold);
        patch_c += counts.patch;
        voxel_c += counts.voxel;
        const auto pp = aggregate_patient(p->patient_id, s.probs, config.rho, config.p_threshold);
        if (p->has_cancer) {
            (pp.label ? patient_c.tp : patient_c.fn) += 1;
        } else {
            (pp.label ? patient_c.fp : patient_c.tn) += 1;
        }
        r.patients.push_back(pp);
    }
    if (s1) s1->verify_against(s1_hash);
    r.patch = compute_metrics(patch_c, Level::patch);
    r.voxel = compute_metrics(voxel_c, Level::voxel);
    r.patient = compute_metrics(patient_c, Level::patient);
    return r;
}

CvReport cross_validate(const phantom::Cohort& cohort, const CvConfig& config,
                        const std::function<void(const std::string&)>& log) {
    std::vector<std::pair<std::string, bool>> ids;
    std::map<std::string, const phantom::PatientRecord*> by_id;
    for (const auto& p : cohort.patients) {
        ids.emplace_back(p.patient_id, p.has_cancer);
        by_id[p.patient_id] = &p;
    }
    const FoldSplit split = make_folds(ids, config.folds, config.seed);

    std::vector<std::vector<const phantom::PatientRecord*>> trains(config.folds);
    std::vector<std::vector<const phantom::PatientRecord*>> vals(config.folds);
    for (std::size_t f = 0; f < config.folds; ++f) {
        for (const auto& id : split.training(f)) trains[f].push_back(by_id.at(id));
        for (const auto& id : split.validation(f)) vals[f].push_back(by_id.at(id));
        if (config.split_hook) config.split_hook(f, trains[f], vals[f]);
        check_disjoint(trains[f], vals[f]);
    }

    CvReport report;
    report.config = config.config_echo;
    report.folds.resize(config.folds);
    std::vector<std::exception_ptr> errors(config.folds);
    std::atomic<std::size_t> next{0};
    std::mutex log_mutex;
    auto worker = [&] {
        for (std::size_t f = next++; f < config.folds; f = next++) {
            try {
                const auto start = std::chrono::steady_clock::now();
                report.folds[f] = run_fold(trains[f], vals[f], config, f);
                const double seconds =
                    std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
                if (log) {
                    std::lock_guard<std::mutex> lock(log_mutex);
                    const auto& pm = report.folds[f].patch;
                    char took[32];
                    std::snprintf(took, sizeof took, " in %.1fs", seconds);
                    log("fold " + std::to_string(f) + " patch accuracy " +
                        (pm.accuracy ? std::to_string(*pm.accuracy) : std::string("undefined")) + took);
                }
            } catch (...) {
                errors[f] = std::current_exception();
            }
        }
    };
    const std::size_t n_threads = std::max<std::size_t>(1, std::min(config.threads, config.folds));
    if (n_threads == 1) {
        worker();
    } else {
        std::vector<std::thread> pool;
        for (std::size_t t = 0; t < n_threads; ++t) pool.emplace_back(worker);
        for (auto& t : pool) t.join();
    }
    for (auto& e : errors) {
        if (e) std::rethrow_exception(e);
    }
    return report;
}

json metrics_json(const MetricsReport& m) {
    auto opt = [](const std::optional<double>& v) -> json { return v ? json(*v) : json(nullptr); };
    return {{"tp", m.counts.tp},
            {"fn", m.counts.fn},
            {"tn", m.counts.tn},
            {"fp", m.counts.fp},
            {"sensitivity", opt(m.sensitivity)},
            {"specificity", opt(m.specificity)},
            {"accuracy", opt(m.accuracy)}};
}

namespace {

json mean_json(const std::vector<const MetricsReport*>& reports) {
    json out = json::object();
    for (const char* key : {"sensitivity", "specificity", "accuracy"}) {
        std::vector<double> v;
        for (const auto* r : reports) {
            const auto& m = std::string(key) == "sensitivity"   ? r->sensitivity
                            : std::string(key) == "specificity" ? r->specificity
                                                                : r->accuracy;
            if (m) v.push_back(*m);
        }
        if (v.empty()) {
            out[key] = nullptr;
            out[std::string(key) + "_std"] = nullptr;
            continue;
        }
        double mean = 0.0;
        for (double x : v) mean += x;
        mean /= static_cast<double>(v.size());
        double var = 0.0;
        for (double x : v) var += (x - mean) * (x - mean);
        out[key] = mean;
        out[std::string(key) + "_std"] = std::sqrt(var / static_cast<double>(v.size()));
    }
    return out;
}

}  // namespace

json report_json(const CvReport& report) {
    json folds = json::array();
    std::map<Level, std::vector<const MetricsReport*>> by_level;
    std::map<Level, ConfusionCounts> pooled;
    for (const auto& f : report.folds) {
        json entry = {{"fold", f.fold},
                      {"validation", f.validation_ids},
                      {"stage1_hash", f.stage1_hash}};
        for (const auto* m : {&f.patch, &f.voxel, &f.patient}) {
            entry[level_name(m->level)] = metrics_json(*m);
            by_level[m->level].push_back(m);
            pooled[m->level] += m->counts;
        }
        json preds = json::array();
        for (const auto& p : f.patients) {
            preds.push_back({{"patient_id", p.patient_id},
                             {"positive_fraction", p.positive_fraction},
                             {"label", p.label}});
        }
        entry["patients"] = preds;
        folds.push_back(entry);
    }
    json mean = json::object();
    json pooled_j = json::object();
    for (Level l : {Level::patch, Level::voxel, Level::patient}) {
        mean[level_name(l)] = mean_json(by_level[l]);
        pooled_j[level_name(l)] = metrics_json(compute_metrics(pooled[l], l));
    }
    return {{"config", report.config}, {"folds", folds}, {"mean", mean}, {"pooled", pooled_j}};
}

}  // namespace hbrnet::eval
