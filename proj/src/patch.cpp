#include "hbrnet/patch.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <fstream>
#include <map>
#include <stdexcept>

#include "json.hpp"

#include "hbrnet/checkpoint.hpp"
#include "hbrnet/hunet.hpp"

namespace hbrnet::patch {

using nlohmann::json;

MaskVolume dilate_mask(const MaskVolume& mask, std::size_t radius) {
    if (radius == 0) return mask;
    const Dims3 d = mask.dims;
    MaskVolume a = mask;
    MaskVolume b(d, 0);
    const long r = static_cast<long>(radius);
    // separable running max along x, then y, then z
    auto pass = [&](auto index, std::size_t n_axis, auto outer) {
        outer([&](auto base) {
            for (long i = 0; i < static_cast<long>(n_axis); ++i) {
                std::uint8_t v = 0;
                const long lo = std::max(0L, i - r);
                const long hi = std::min(static_cast<long>(n_axis) - 1, i + r);
                for (long j = lo; j <= hi && !v; ++j) v = a.values[index(base, j)];
                b.values[index(base, i)] = v;
            }
        });
        std::swap(a, b);
    };
    auto over_zy = [&](auto f) {
        for (std::size_t z = 0; z < d.z; ++z)
            for (std::size_t y = 0; y < d.h; ++y) f(std::array<std::size_t, 2>{z, y});
    };
    auto over_zx = [&](auto f) {
        for (std::size_t z = 0; z < d.z; ++z)
            for (std::size_t x = 0; x < d.w; ++x) f(std::array<std::size_t, 2>{z, x});
    };
    auto over_yx = [&](auto f) {
        for (std::size_t y = 0; y < d.h; ++y)
            for (std::size_t x = 0; x < d.w; ++x) f(std::array<std::size_t, 2>{y, x});
    };
    pass([&](auto zb, long i) { return (zb[0] * d.h + zb[1]) * d.w + static_cast<std::size_t>(i); },
         d.w, over_zy);
    pass([&](auto zb, long i) { return (zb[0] * d.h + static_cast<std::size_t>(i)) * d.w + zb[1]; },
         d.h, over_zx);
    pass([&](auto yb, long i) { return (static_cast<std::size_t>(i) * d.h + yb[0]) * d.w + yb[1]; },
         d.z, over_yx);
    return a;
}

std::vector<Center> enumerate_centers(const MaskVolume& dilated, std::size_t size,
                                      std::size_t stride) {
    const Dims3 d = dilated.dims;
    if (size % 2 == 0 || size == 0) {
        throw std::invalid_argument("extract_patches: patch size must be odd, got " +
                                    std::to_string(size));
    }
    if (stride == 0) {
        throw std::invalid_argument("extract_patches: stride must be positive");
    }
    if (size > d.h || size > d.w) {
        throw std::invalid_argument("extract_patches: patch size " + std::to_string(size) +
                                    " exceeds the " + std::to_string(d.h) + "x" +
                                    std::to_string(d.w) + " image");
    }
    std::size_t row0 = d.h;
    std::size_t col0 = d.w;
    for (std::size_t z = 0; z < d.z; ++z) {
        for (std::size_t y = 0; y < d.h; ++y) {
            for (std::size_t x = 0; x < d.w; ++x) {
                if (dilated.at(z, y, x)) {
                    row0 = std::min(row0, y);
                    col0 = std::min(col0, x);
                }
            }
        }
    }
    std::vector<Center> out;
    if (row0 == d.h) return out;
    const std::size_t half = size / 2;
    row0 = std::max(row0, half);
    col0 = std::max(col0, half);
    for (std::size_t z = 0; z < d.z; ++z) {
        for (std::size_t y = row0; y < d.h; y += stride) {
            if (y < half || y + half >= d.h) continue;
            for (std::size_t x = col0; x < d.w; x += stride) {
                if (x < half || x + half >= d.w) continue;
                if (dilated.at(z, y, x)) out.push_back({z, y, x});
            }
        }
    }
    return out;
}

std::vector<float> extract_patch(const BiomarkerVolume& volume, const Center& c, std::size_t size,
                                 bool two_d) {
    const Dims3 d = volume.dims;
    const std::size_t half = size / 2;
    std::vector<float> out(3 * kChannels * size * size);
    const std::size_t slices[3] = {
        two_d || c.slice == 0 ? c.slice : c.slice - 1,
        c.slice,
        two_d || c.slice + 1 >= d.z ? c.slice : c.slice + 1,
    };
    float* dst = out.data();
    for (std::size_t s = 0; s < 3; ++s) {
        for (std::size_t ch = 0; ch < kChannels; ++ch) {
            for (std::size_t y = 0; y < size; ++y) {
                const float* src = &volume.values[((ch * d.z + slices[s]) * d.h + c.row - half + y) * d.w +
                                                  c.col - half];
                std::copy_n(src, size, dst);
                dst += size;
            }
        }
    }
    return out;
}

std::vector<std::uint8_t> mask_window(const MaskVolume& mask, const Center& c, std::size_t size) {
    const std::size_t half = size / 2;
    std::vector<std::uint8_t> out(size * size);
    for (std::size_t y = 0; y < size; ++y) {
        for (std::size_t x = 0; x < size; ++x) {
            out[y * size + x] = mask.at(c.slice, c.row - half + y, c.col - half + x);
        }
    }
    return out;
}

std::size_t positive_voxel_count(std::size_t size, double threshold) {
    if (!(threshold > 0.0 && threshold <= 1.0)) {
        throw std::invalid_argument("label threshold must lie in (0, 1]");
    }
    // guard against 0.7 * 121 landing a hair above 84.7
    return static_cast<std::size_t>(std::ceil(threshold * static_cast<double>(size * size) - 1e-9));
}

Label label_patch(std::span<const std::uint8_t> window, std::size_t size, double threshold,
                  bool patient_has_cancer) {
    if (window.size() != size * size) {
        throw std::invalid_argument("label_patch: window does not hold S x S voxels");
    }
    const std::size_t need = positive_voxel_count(size, threshold);
    if (!patient_has_cancer) return Label::negative;
    const auto count = static_cast<std::size_t>(
        std::count_if(window.begin(), window.end(), [](auto v) { return v != 0; }));
    return count >= need ? Label::positive : Label::excluded;
}

std::vector<PatchTensor> extract_patches(const BiomarkerVolume& volume, const MaskVolume& dilated,
                                         std::size_t size, std::size_t stride,
                                         const std::string& patient_id, bool two_d) {
    if (!(volume.dims == dilated.dims)) {
        throw std::invalid_argument("extract_patches: mask dims do not match the volume");
    }
    std::vector<PatchTensor> out;
    for (const auto& c : enumerate_centers(dilated, size, stride)) {
        PatchTensor p;
        p.size = size;
        p.data = extract_patch(volume, c, size, two_d);
        p.patient_id = patient_id;
        p.center = c;
        out.push_back(std::move(p));
    }
    return out;
}

double hist_eq(double x, double t_low, double t_high) {
    if (!(t_low >= 0.0 && t_low < t_high && t_high <= 1.0)) {
        throw std::invalid_argument("hist_eq: need 0 <= T_d < T_u <= 1");
    }
    if (x < t_low) return 0.1 * x;
    if (x >= t_high) return 1.0;
    return (x - t_low) / (t_high - t_low);
}

void AugmentConfig::validate() const {
    for (double p : {p_hflip, p_vflip, p_rot90}) {
        if (!(p >= 0.0 && p <= 1.0)) {
            throw std::invalid_argument("augment: probabilities must lie in [0, 1]");
        }
    }
    for (const auto& t : presets) {
        if (!(t[0] >= 0.0 && t[0] < t[1] && t[1] <= 1.0)) {
            throw std::invalid_argument("augment: every preset needs 0 <= T_d < T_u <= 1");
        }
    }
}

void hflip(std::span<float> data, std::size_t size) {
    const std::size_t plane = size * size;
    for (std::size_t p = 0; p < data.size() / plane; ++p) {
        for (std::size_t y = 0; y < size; ++y) {
            float* row = data.data() + p * plane + y * size;
            std::reverse(row, row + size);
        }
    }
}

void vflip(std::span<float> data, std::size_t size) {
    const std::size_t plane = size * size;
    for (std::size_t p = 0; p < data.size() / plane; ++p) {
        float* base = data.data() + p * plane;
        for (std::size_t y = 0; y < size / 2; ++y) {
            std::swap_ranges(base + y * size, base + (y + 1) * size, base + (size - 1 - y) * size);
        }
    }
}

void rot90(std::span<float> data, std::size_t size) {
    const std::size_t plane = size * size;
    std::vector<float> tmp(plane);
    for (std::size_t p = 0; p < data.size() / plane; ++p) {
        float* base = data.data() + p * plane;
        for (std::size_t r = 0; r < size; ++r) {
            for (std::size_t c = 0; c < size; ++c) {
                tmp[r * size + c] = base[c * size + (size - 1 - r)];
            }
        }
        std::copy(tmp.begin(), tmp.end(), base);
    }
}

void apply_hist_eq(std::span<float> data, std::size_t size, double t_low, double t_high,
                   InverseMode inverse) {
    const std::size_t plane = size * size;
    for (std::size_t s = 0; s < 3; ++s) {
        float* ep = data.data() + (s * kChannels + v_ep) * plane;
        float* lu = data.data() + (s * kChannels + v_lu) * plane;
        for (std::size_t i = 0; i < plane; ++i) {
            ep[i] = static_cast<float>(hist_eq(std::clamp(ep[i], 0.0F, 1.0F), t_low, t_high));
            const double x = std::clamp(lu[i], 0.0F, 1.0F);
            lu[i] = static_cast<float>(inverse == InverseMode::complement
                                           ? 1.0 - hist_eq(1.0 - x, t_low, t_high)
                                           : hist_eq(x, 1.0 - t_high, 1.0 - t_low));
        }
    }
}

namespace {

void random_geometry(std::span<float> data, std::size_t size, const AugmentConfig& config,
                     RngStream& rng) {
    if (rng.bernoulli(config.p_hflip)) hflip(data, size);
    if (rng.bernoulli(config.p_vflip)) vflip(data, size);
    if (rng.bernoulli(config.p_rot90)) rot90(data, size);
}

}  // namespace

std::vector<std::vector<float>> augment(std::span<const float> data, std::size_t size,
                                        const AugmentConfig& config, RngStream& rng) {
    std::vector<std::vector<float>> out;
    out.emplace_back(data.begin(), data.end());
    random_geometry(out.back(), size, config, rng);
    for (const auto& t : config.presets) {
        out.emplace_back(data.begin(), data.end());
        apply_hist_eq(out.back(), size, t[0], t[1], config.inverse);
        random_geometry(out.back(), size, config, rng);
    }
    return out;
}

void PipelineConfig::validate() const {
    if (size % 2 == 0) throw std::invalid_argument("patch.size must be odd");
    if (stride == 0) throw std::invalid_argument("patch.stride must be positive");
    positive_voxel_count(size, label_threshold);
    augment.validate();
}

void PatchDataset::push(std::span<const float> values, int label, const std::string& patient,
                        const Center& c) {
    if (values.size() != patch_numel()) {
        throw std::invalid_argument("PatchDataset: patch has the wrong size");
    }
    data.insert(data.end(), values.begin(), values.end());
    labels.push_back(label);
    patients.push_back(patient);
    centers.push_back(c);
}

std::uint64_t dataset_checksum(const PatchDataset& ds) {
    std::vector<std::uint8_t> bytes(ds.data.size() * sizeof(float));
    std::memcpy(bytes.data(), ds.data.data(), bytes.size());
    for (std::size_t i = 0; i < ds.count(); ++i) {
        bytes.push_back(static_cast<std::uint8_t>(ds.labels[i]));
        bytes.insert(bytes.end(), ds.patients[i].begin(), ds.patients[i].end());
        for (auto v : {ds.centers[i].slice, ds.centers[i].row, ds.centers[i].col}) {
            for (int k = 0; k < 4; ++k) bytes.push_back(static_cast<std::uint8_t>(v >> (8 * k)));
        }
    }
    return ckpt::fnv1a64(bytes);
}

std::vector<PatientCounts> recount(const PatchDataset& ds,
                                   const std::vector<const phantom::PatientRecord*>& patients) {
    std::vector<PatientCounts> out;
    std::map<std::string, std::size_t> index;
    for (const auto* p : patients) {
        index[p->patient_id] = out.size();
        out.push_back({p->patient_id, p->has_cancer, 0, 0, 0});
    }
    for (std::size_t i = 0; i < ds.count(); ++i) {
        auto& c = out.at(index.at(ds.patients[i]));
        (ds.labels[i] == 1 ? c.positives : c.negatives) += 1;
    }
    return out;
}

BiomarkerVolume prepared_volume(const phantom::PatientRecord& p, const hunet::FrozenStage1* stage1) {
    if (stage1 == nullptr) {
        BiomarkerVolume v = p.observed;
        clamp_to_physical(v);
        return v;
    }
    return stage1->correct(p.observed);
}

namespace {

// k of n indices, uniformly without replacement, returned sorted
std::vector<std::size_t> subsample(std::size_t n, std::size_t k, RngStream& rng) {
    std::vector<std::size_t> idx(n);
    for (std::size_t i = 0; i < n; ++i) idx[i] = i;
    if (k == 0 || k >= n) return idx;
    for (std::size_t i = 0; i < k; ++i) {
        std::swap(idx[i], idx[i + rng.below(n - i)]);
    }
    idx.resize(k);
    std::sort(idx.begin(), idx.end());
    return idx;
}

}  // namespace

BuiltDataset build_dataset(const std::vector<const phantom::PatientRecord*>& patients,
                           const hunet::FrozenStage1* stage1, const PipelineConfig& config,
                           bool train, std::uint64_t seed) {
    config.validate();
    BuiltDataset out;
    out.dataset.size = config.size;
    out.manifest.config = config;
    out.manifest.augmented = train && config.augment.enabled;
    if (stage1 != nullptr) stage1->verify();
    for (std::size_t pi = 0; pi < patients.size(); ++pi) {
        const auto& p = *patients[pi];
        const BiomarkerVolume vol = prepared_volume(p, stage1);
        const MaskVolume dilated = dilate_mask(p.prostate_mask, config.dilation);
        const auto centers = enumerate_centers(dilated, config.size, config.stride);
        PatientCounts counts{p.patient_id, p.has_cancer, 0, 0, 0};
        std::vector<std::pair<Center, Label>> labeled;
        for (const auto& c : centers) {
            const auto window = mask_window(p.cancer_mask, c, config.size);
            const Label l = label_patch(window, config.size, config.label_threshold, p.has_cancer);
            if (l == Label::excluded) {
                ++counts.excluded;
                continue;
            }
            labeled.emplace_back(c, l);
        }
        RngStream rng(derive_seed(seed, pi + 1));
        if (train) {
            const std::size_t cap = p.has_cancer ? config.max_positives_per_patient
                                                 : config.max_negatives_per_patient;
            std::vector<std::pair<Center, Label>> kept;
            for (auto i : subsample(labeled.size(), cap, rng)) kept.push_back(labeled[i]);
            labeled = std::move(kept);
        }
        for (const auto& [c, l] : labeled) {
            if (l == Label::negative && p.has_cancer) {
                throw std::logic_error("patch pipeline: negative patch from cancerous patient " +
                                       p.patient_id);
            }
            const int y = l == Label::positive ? 1 : 0;
            const auto values = extract_patch(vol, c, config.size, config.two_d);
            if (out.manifest.augmented) {
                for (const auto& copy : augment(values, config.size, config.augment, rng)) {
                    out.dataset.push(copy, y, p.patient_id, c);
                    (y ? counts.positives : counts.negatives) += 1;
                }
            } else {
                out.dataset.push(values, y, p.patient_id, c);
                (y ? counts.positives : counts.negatives) += 1;
            }
        }
        out.manifest.patients.push_back(counts);
    }
    const bool any_negative = std::any_of(out.manifest.patients.begin(), out.manifest.patients.end(),
                                          [](const auto& c) { return c.negatives > 0; });
    if (!any_negative) {
        throw std::invalid_argument("patch pipeline: cohort yields no negative patches");
    }
    out.manifest.checksum = dataset_checksum(out.dataset);
    return out;
}

namespace {

json config_json(const PipelineConfig& c) {
    json presets = json::array();
    for (const auto& t : c.augment.presets) presets.push_back({t[0], t[1]});
    return {{"size", c.size},
            {"stride", c.stride},
            {"dilation", c.dilation},
            {"label_threshold", c.label_threshold},
            {"two_d", c.two_d},
            {"max_negatives_per_patient", c.max_negatives_per_patient},
            {"max_positives_per_patient", c.max_positives_per_patient},
            {"augment",
             {{"enabled", c.augment.enabled},
              {"p_hflip", c.augment.p_hflip},
              {"p_vflip", c.augment.p_vflip},
              {"p_rot90", c.augment.p_rot90},
              {"presets", presets},
              {"inverse", c.augment.inverse == InverseMode::complement ? "complement" : "swap"}}}};
}

PipelineConfig config_from_json(const json& j) {
    PipelineConfig c;
    c.size = j.at("size");
    c.stride = j.at("stride");
    c.dilation = j.at("dilation");
    c.label_threshold = j.at("label_threshold");
    c.two_d = j.at("two_d");
    c.max_negatives_per_patient = j.at("max_negatives_per_patient");
    c.max_positives_per_patient = j.at("max_positives_per_patient");
    const auto& a = j.at("augment");
    c.augment.enabled = a.at("enabled");
    c.augment.p_hflip = a.at("p_hflip");
    c.augment.p_vflip = a.at("p_vflip");
    c.augment.p_rot90 = a.at("p_rot90");
    c.augment.presets.clear();
    for (const auto& t : a.at("presets")) c.augment.presets.push_back({t.at(0), t.at(1)});
    c.augment.inverse = a.at("inverse") == "complement" ? InverseMode::complement
                                                        : InverseMode::swap_thresholds;
    return c;
}

}  // namespace

void write_store(const BuiltDataset& built, const std::filesystem::path& stem) {
    const auto& ds = built.dataset;
    const auto s = static_cast<std::uint32_t>(ds.size);
    write_volume(stem.string() + ".hmv",
                 HmvArray{{static_cast<std::uint32_t>(ds.count()), 3, static_cast<std::uint32_t>(kChannels), s, s},
                          ds.data});
    json centers = json::array();
    for (const auto& c : ds.centers) centers.push_back({c.slice, c.row, c.col});
    json counts = json::array();
    for (const auto& c : built.manifest.patients) {
        counts.push_back({{"patient_id", c.patient_id},
                          {"has_cancer", c.has_cancer},
                          {"positives", c.positives},
                          {"negatives", c.negatives},
                          {"excluded", c.excluded}});
    }
    json j = {{"labels", ds.labels},
              {"patients", ds.patients},
              {"centers", centers},
              {"counts", counts},
              {"augmented", built.manifest.augmented},
              {"config", config_json(built.manifest.config)},
              {"checksum", ckpt::hex64(built.manifest.checksum)}};
    std::ofstream f(stem.string() + ".json");
    if (!f) throw std::runtime_error("cannot write " + stem.string() + ".json");
    f << j.dump(1) << '\n';
}

BuiltDataset read_store(const std::filesystem::path& stem) {
    std::ifstream f(stem.string() + ".json");
    if (!f) throw std::runtime_error("cannot open " + stem.string() + ".json");
    const json j = json::parse(f);
    BuiltDataset out;
    out.manifest.config = config_from_json(j.at("config"));
    out.manifest.augmented = j.at("augmented");
    for (const auto& c : j.at("counts")) {
        out.manifest.patients.push_back({c.at("patient_id"), c.at("has_cancer"), c.at("positives"),
                                         c.at("negatives"), c.at("excluded")});
    }
    auto& ds = out.dataset;
    ds.size = out.manifest.config.size;
    ds.labels = j.at("labels").get<std::vector<int>>();
    ds.patients = j.at("patients").get<std::vector<std::string>>();
    for (const auto& c : j.at("centers")) ds.centers.push_back({c.at(0), c.at(1), c.at(2)});
    const auto arr = read_volume(stem.string() + ".hmv");
    if (arr.dtype() != DType::f32 || arr.dims.size() != 5 || arr.dims[0] != ds.labels.size()) {
        throw std::runtime_error("patch store tensor does not match its manifest");
    }
    ds.data = std::get<0>(arr.payload);
    out.manifest.checksum = dataset_checksum(ds);
    if (ckpt::hex64(out.manifest.checksum) != j.at("checksum").get<std::string>()) {
        throw std::runtime_error("patch store checksum mismatch for " + stem.string());
    }
    return out;
}

}  // namespace hbrnet::patch
