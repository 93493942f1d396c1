#pragma once

#include <array>
#include <compare>
#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include "hbrnet/phantom.hpp"
#include "hbrnet/rng.hpp"
#include "hbrnet/volume.hpp"

namespace hbrnet::hunet {
class FrozenStage1;
}

namespace hbrnet::patch {

/// 3-D Chebyshev dilation clipped at the borders.
MaskVolume dilate_mask(const MaskVolume& mask, std::size_t radius = 2);

struct Center {
    std::size_t slice = 0;
    std::size_t row = 0;
    std::size_t col = 0;
    auto operator<=>(const Center&) const = default;
};

/// Centers on the stride grid anchored at the first admissible center
/// (bounding-box origin of the dilated mask, pushed in by S/2 at the image
/// border), inside the mask, whose S x S window fits in the image.
/// Sorted by (slice, row, col).
std::vector<Center> enumerate_centers(const MaskVolume& dilated, std::size_t size,
                                      std::size_t stride);

/// 3 x 6 x S x S values for slices (N-1, N, N+1); end slices are replicated.
/// two_d stacks slice N three times.
std::vector<float> extract_patch(const BiomarkerVolume& volume, const Center& c, std::size_t size,
                                 bool two_d = false);

/// S x S cancer-mask window on slice N.
std::vector<std::uint8_t> mask_window(const MaskVolume& mask, const Center& c, std::size_t size);

enum class Label { negative = 0, positive = 1, excluded = 2 };

/// ceil(threshold * S^2).
std::size_t positive_voxel_count(std::size_t size, double threshold);

Label label_patch(std::span<const std::uint8_t> window, std::size_t size, double threshold,
                  bool patient_has_cancer);

struct PatchTensor {
    std::size_t size = 11;
    std::vector<float> data;  // 3 x 6 x S x S
    Label label = Label::excluded;
    bool labeled = false;
    std::string patient_id;
    Center center;
};

/// Unlabeled patches of one volume in canonical order.
std::vector<PatchTensor> extract_patches(const BiomarkerVolume& volume, const MaskVolume& dilated,
                                         std::size_t size = 11, std::size_t stride = 2,
                                         const std::string& patient_id = {}, bool two_d = false);

/// Piecewise map: x < T_d -> 0.1 x; x >= T_u -> 1; else (x - T_d) / (T_u - T_d).
double hist_eq(double x, double t_low, double t_high);

enum class InverseMode { complement, swap_thresholds };

struct AugmentConfig {
    double p_hflip = 0.5;
    double p_vflip = 0.5;
    double p_rot90 = 0.5;
    std::vector<std::array<double, 2>> presets{{0.10, 0.90}, {0.15, 0.85}, {0.20, 0.80}};
    InverseMode inverse = InverseMode::complement;
    bool enabled = true;

    void validate() const;
};

/// In-place geometric ops on every S x S plane of a patch.
void hflip(std::span<float> data, std::size_t size);
void vflip(std::span<float> data, std::size_t size);
/// Counter-clockwise quarter turn.
void rot90(std::span<float> data, std::size_t size);

/// v_ep -> hist_eq(v_ep); v_lu -> 1 - hist_eq(1 - v_lu) (complement mode)
/// or hist_eq(v_lu; 1 - T_u, 1 - T_d) (swap mode).
void apply_hist_eq(std::span<float> data, std::size_t size, double t_low, double t_high,
                   InverseMode inverse);

/// The source with random flips/rotation, followed by one copy per
/// hist-eq preset (each with its own geometric draw).
std::vector<std::vector<float>> augment(std::span<const float> data, std::size_t size,
                                        const AugmentConfig& config, RngStream& rng);

struct PipelineConfig {
    std::size_t size = 11;
    std::size_t stride = 2;
    std::size_t dilation = 2;
    double label_threshold = 0.7;
    bool two_d = false;
    AugmentConfig augment;
    /// Seeded subsample of labeled source patches per patient; 0 keeps all.
    std::size_t max_negatives_per_patient = 300;
    std::size_t max_positives_per_patient = 0;

    void validate() const;
};

struct PatchDataset {
    std::size_t size = 11;
    std::vector<float> data;  // M x 3 x 6 x S x S
    std::vector<int> labels;
    std::vector<std::string> patients;
    std::vector<Center> centers;

    std::size_t count() const { return labels.size(); }
    std::size_t patch_numel() const { return 3 * kChannels * size * size; }
    std::span<const float> patch(std::size_t i) const {
        return {data.data() + i * patch_numel(), patch_numel()};
    }
    void push(std::span<const float> values, int label, const std::string& patient, const Center& c);
};

struct PatientCounts {
    std::string patient_id;
    bool has_cancer = false;
    std::size_t positives = 0;
    std::size_t negatives = 0;
    std::size_t excluded = 0;  // source windows below the labeling threshold
};

struct PatchDatasetManifest {
    std::vector<PatientCounts> patients;
    PipelineConfig config;
    bool augmented = false;
    std::uint64_t checksum = 0;
};

/// FNV-1a over patch values, labels and provenance.
std::uint64_t dataset_checksum(const PatchDataset& ds);

/// Per-patient class counts recomputed from the stored patches.
std::vector<PatientCounts> recount(const PatchDataset& ds,
                                   const std::vector<const phantom::PatientRecord*>& patients);

/// Stage-1 output (or the observed volume when stage1 is null), clamped to
/// the physical ranges.
BiomarkerVolume prepared_volume(const phantom::PatientRecord& p, const hunet::FrozenStage1* stage1);

struct BuiltDataset {
    PatchDataset dataset;
    PatchDatasetManifest manifest;
};

/// Correction, dilation, extraction, labeling, and (train only) augmentation.
/// Throws when no negative patch results or a cancerous patient would
/// contribute a negative.
BuiltDataset build_dataset(const std::vector<const phantom::PatientRecord*>& patients,
                           const hunet::FrozenStage1* stage1, const PipelineConfig& config,
                           bool train, std::uint64_t seed);

/// <stem>.hmv holds the M x 3 x 6 x S x S tensor; <stem>.json the manifest.
void write_store(const BuiltDataset& built, const std::filesystem::path& stem);
BuiltDataset read_store(const std::filesystem::path& stem);

}  // namespace hbrnet::patch
