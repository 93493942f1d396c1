#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <map>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "json.hpp"

#include "hbrnet/bias.hpp"
#include "hbrnet/detector.hpp"
#include "hbrnet/hunet.hpp"
#include "hbrnet/patch.hpp"
#include "hbrnet/phantom.hpp"

namespace hbrnet::eval {

struct ConfusionCounts {
    std::uint64_t tp = 0;
    std::uint64_t tn = 0;
    std::uint64_t fp = 0;
    std::uint64_t fn = 0;

    std::uint64_t total() const { return tp + tn + fp + fn; }
    ConfusionCounts& operator+=(const ConfusionCounts& o) {
        tp += o.tp;
        tn += o.tn;
        fp += o.fp;
        fn += o.fn;
        return *this;
    }
    bool operator==(const ConfusionCounts&) const = default;
};

enum class Level { patch, voxel, patient };
std::string level_name(Level level);

/// Metrics are empty (undefined) when their denominator is zero.
struct MetricsReport {
    Level level = Level::patch;
    ConfusionCounts counts;
    std::optional<double> sensitivity;
    std::optional<double> specificity;
    std::optional<double> accuracy;
};

MetricsReport compute_metrics(const ConfusionCounts& counts, Level level = Level::patch);

struct FoldSplit {
    std::size_t k = 5;
    std::map<std::string, std::size_t> assignment;

    std::vector<std::string> validation(std::size_t fold) const;
    std::vector<std::string> training(std::size_t fold) const;
};

/// Seeded shuffle within each class, then round-robin over folds; the
/// cancer-free class continues where the cancerous class stopped.
FoldSplit make_folds(const std::vector<std::pair<std::string, bool>>& patients, std::size_t k,
                     std::uint64_t seed);

struct PatientPrediction {
    std::string patient_id;
    double positive_fraction = 0.0;
    int label = 0;
};

/// Positive iff the fraction of patches with p >= p_threshold is >= rho.
PatientPrediction aggregate_patient(const std::string& patient_id, std::span<const float> probs,
                                    double rho = 0.02, double p_threshold = 0.5);

/// Mean patch probability over the S x S windows covering each voxel of the
/// center's slice; zero outside the dilated mask and where nothing covers.
Volume3 render_heatmap(const std::vector<patch::Center>& centers, std::span<const float> probs,
                       std::size_t size, Dims3 dims, const MaskVolume& dilated);

/// Binary PGM (P5, maxval 255) of one slice, values scaled from [0, 1].
std::vector<std::uint8_t> encode_pgm(const Volume3& heatmap, std::size_t slice);
/// Writes <dir>/<patient>_<slice>.pgm for every slice.
void export_heatmap(const Volume3& heatmap, const std::string& patient_id,
                    const std::filesystem::path& dir);

class LeakageError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

/// Throws LeakageError if any training patient is also a validation patient.
void check_disjoint(const std::vector<const phantom::PatientRecord*>& train,
                    const std::vector<const phantom::PatientRecord*>& validation);

struct Stage1Settings {
    hunet::HUNetConfig net;
    hunet::TrainConfig train;
    bias::ReferenceConfig reference;
    hunet::ReferenceMode reference_mode = hunet::ReferenceMode::per_channel;
};

struct CvConfig {
    std::size_t folds = 5;
    std::uint64_t seed = 7;
    Stage1Settings stage1;
    patch::PipelineConfig pipeline;
    detector::TrainConfig stage2;
    double rho = 0.02;
    double p_threshold = 0.5;
    bool no_stage1 = false;
    std::size_t threads = 1;
    /// Echoed verbatim into the report.
    nlohmann::json config_echo = nlohmann::json::object();
    /// Test hook run on each fold's split before the leakage guard.
    std::function<void(std::size_t, std::vector<const phantom::PatientRecord*>&,
                       std::vector<const phantom::PatientRecord*>&)>
        split_hook;
};

struct PatientScores {
    std::string patient_id;
    bool has_cancer = false;
    std::vector<patch::Center> centers;
    std::vector<float> probs;
    std::vector<patch::Label> labels;
    Volume3 heatmap;
};

struct FoldResult {
    std::size_t fold = 0;
    std::vector<std::string> validation_ids;
    std::string stage1_hash;
    MetricsReport patch;
    MetricsReport voxel;
    MetricsReport patient;
    std::vector<PatientPrediction> patients;
};

struct CvReport {
    nlohmann::json config;
    std::vector<FoldResult> folds;
};

/// Scores every patch of one patient and renders its heatmap.
PatientScores score_patient(const phantom::PatientRecord& p, const hunet::FrozenStage1* stage1,
                            detector::Model<float>& model, const patch::PipelineConfig& pipeline);

/// Trains Stage 1 on the training patients; returns its parameters.
struct PatientCounts {
    ConfusionCounts patch;
    ConfusionCounts voxel;
};

/// Patch counts over labeled patches and voxel counts inside the prostate
/// from the thresholded heatmap.
PatientCounts tally(const phantom::PatientRecord& p, const PatientScores& s, double p_threshold);

hunet::Params<float> train_stage1(const std::vector<const phantom::PatientRecord*>& train,
                                  const Stage1Settings& settings, std::uint64_t seed,
                                  std::vector<double>* loss_log = nullptr);

FoldResult run_fold(const std::vector<const phantom::PatientRecord*>& train,
                    const std::vector<const phantom::PatientRecord*>& validation,
                    const CvConfig& config, std::size_t fold);

/// k-fold patient-wise cross-validation; folds run on up to config.threads
/// workers with results in fold order.
CvReport cross_validate(const phantom::Cohort& cohort, const CvConfig& config,
                        const std::function<void(const std::string&)>& log = {});

nlohmann::json metrics_json(const MetricsReport& m);
/// {"config", "folds": [...], "mean": {...}, "pooled": {...}}
nlohmann::json report_json(const CvReport& report);

}  // namespace hbrnet::eval
