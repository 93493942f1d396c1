#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include "hbrnet/bias.hpp"
#include "hbrnet/volume.hpp"

namespace hbrnet::phantom {

/// Mean biomarker values of one tissue class, in channel order.
using Profile = std::array<float, kChannels>;

struct TissueProfiles {
    Profile peripheral{0.30F, 0.25F, 1.10F, 1.90F, 90.0F, 140.0F};
    Profile transition{0.32F, 0.22F, 1.05F, 1.80F, 86.0F, 132.0F};
    Profile lesion{0.55F, 0.08F, 0.75F, 1.30F, 60.0F, 95.0F};
    Profile background{0.26F, 0.22F, 1.20F, 2.00F, 100.0F, 150.0F};
};

struct CohortSpec {
    std::size_t n_patients = 24;
    double cancer_fraction = 0.5;
    std::size_t z_min = 16;
    std::size_t z_max = 24;
    std::size_t height = 64;
    std::size_t width = 64;
    double lesion_radius_min = 6.0;  // in-plane semi-axis, voxels
    double lesion_radius_max = 9.0;
    double lesion_z_min = 1.5;       // through-plane semi-axis, voxels
    double lesion_z_max = 3.0;
    std::size_t lesions_min = 1;
    std::size_t lesions_max = 3;
    /// Single-slice benign blobs with the lesion profile in-plane.
    std::size_t mimics = 0;
    double texture = 0.05;           // std of the log texture field
    double texture_blur = 1.5;       // voxels
    bias::BiasSpec bias;
    bias::NoiseSpec noise{0.01, 0};
    TissueProfiles profiles;
    std::uint64_t seed = 7;

    /// Throws std::invalid_argument naming the first violated constraint.
    void validate() const;
};

struct PatientRecord {
    std::string patient_id;
    bool has_cancer = false;
    BiomarkerVolume observed;
    BiomarkerVolume truth;
    bias::BiasField bias_field;
    MaskVolume prostate_mask;
    MaskVolume cancer_mask;
};

class PhantomError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

/// Builds one synthetic patient. Lesion placement retries up to 100 times.
PatientRecord generate_phantom(const CohortSpec& spec, std::uint64_t patient_seed, bool has_cancer,
                               const std::string& patient_id = "P000");

struct ManifestEntry {
    std::string patient_id;
    bool has_cancer = false;
    std::uint64_t seed = 0;
};

struct Cohort {
    std::vector<PatientRecord> patients;
    std::vector<ManifestEntry> manifest;
};

/// Patient i gets seed derive_seed(spec.seed, i + 1); the cancerous subset
/// (round(n * fraction) patients) is a seeded permutation prefix.
std::vector<ManifestEntry> plan_cohort(const CohortSpec& spec);
Cohort generate_cohort(const CohortSpec& spec);

/// Writes <dir>/<id>_{observed,truth,bias,prostate,cancer}.hmv and manifest.json.
void write_cohort(const Cohort& cohort, const std::filesystem::path& dir);
/// Reads a cohort written by write_cohort.
Cohort read_cohort(const std::filesystem::path& dir);

}  // namespace hbrnet::phantom
