#include "hbrnet/phantom.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numeric>

#include <json.hpp>

#include "hbrnet/rng.hpp"

namespace hbrnet::phantom {

namespace {

constexpr int kMaxPlacementAttempts = 100;

struct Ellipsoid {
    double cz, cy, cx;
    double rz, ry, rx;

    bool contains(double z, double y, double x) const {
        const double a = (z - cz) / rz;
        const double b = (y - cy) / ry;
        const double c = (x - cx) / rx;
        return a * a + b * b + c * c <= 1.0;
    }
};

std::vector<double> gaussian_kernel(double sigma) {
    const int radius = std::max(1, static_cast<int>(std::ceil(3.0 * sigma)));
    std::vector<double> k(2 * static_cast<std::size_t>(radius) + 1);
    double s = 0.0;
    for (int i = -radius; i <= radius; ++i) {
        const double v = std::exp(-0.5 * i * i / (sigma * sigma));
        k[static_cast<std::size_t>(i + radius)] = v;
        s += v;
    }
    for (auto& v : k) v /= s;
    return k;
}

long clamp_index(long i, long n) { return std::clamp(i, 0L, n - 1); }

// Separable blur along one axis with edge clamping.
void blur_axis(std::vector<double>& v, Dims3 d, int axis, const std::vector<double>& k) {
    const long radius = static_cast<long>(k.size() / 2);
    std::vector<double> out(v.size());
    const long nz = static_cast<long>(d.z), ny = static_cast<long>(d.h), nx = static_cast<long>(d.w);
    for (long z = 0; z < nz; ++z) {
        for (long y = 0; y < ny; ++y) {
            for (long x = 0; x < nx; ++x) {
                double acc = 0.0;
                for (long t = -radius; t <= radius; ++t) {
                    long zz = z, yy = y, xx = x;
                    if (axis == 0) zz = clamp_index(z + t, nz);
                    if (axis == 1) yy = clamp_index(y + t, ny);
                    if (axis == 2) xx = clamp_index(x + t, nx);
                    acc += k[static_cast<std::size_t>(t + radius)] *
                           v[static_cast<std::size_t>((zz * ny + yy) * nx + xx)];
                }
                out[static_cast<std::size_t>((z * ny + y) * nx + x)] = acc;
            }
        }
    }
    v = std::move(out);
}

// Unit-std smooth Gaussian noise.
std::vector<double> smooth_noise(Dims3 d, double sigma, RngStream& rng) {
    std::vector<double> v(d.voxels());
    for (auto& x : v) x = rng.normal();
    const auto k = gaussian_kernel(sigma);
    blur_axis(v, d, 1, k);
    blur_axis(v, d, 2, k);
    blur_axis(v, d, 0, gaussian_kernel(std::max(0.5, sigma / 2.0)));
    double mean = std::accumulate(v.begin(), v.end(), 0.0) / static_cast<double>(v.size());
    double var = 0.0;
    for (double x : v) var += (x - mean) * (x - mean);
    const double sd = std::sqrt(var / static_cast<double>(v.size()));
    for (auto& x : v) x = sd > 0.0 ? (x - mean) / sd : 0.0;
    return v;
}

// Draws an ellipsoid fully inside the prostate (and outside `avoid`), or nullopt.
std::optional<Ellipsoid> place_blob(const CohortSpec& spec, const MaskVolume& prostate,
                                    const MaskVolume* avoid, double rz, RngStream& rng,
                                    const Ellipsoid& gland) {
    const Dims3 d = prostate.dims;
    const double ry = rng.uniform(spec.lesion_radius_min, spec.lesion_radius_max);
    const double rx = rng.uniform(spec.lesion_radius_min, spec.lesion_radius_max);
    Ellipsoid e{rng.uniform(gland.cz - gland.rz, gland.cz + gland.rz),
                rng.uniform(gland.cy - gland.ry, gland.cy + gland.ry),
                rng.uniform(gland.cx - gland.rx, gland.cx + gland.rx), rz, ry, rx};
    if (rz < 1.0) {
        e.cz = std::round(e.cz);  // single-slice blob
    }
    const long z0 = static_cast<long>(std::floor(e.cz - rz)), z1 = static_cast<long>(std::ceil(e.cz + rz));
    const long y0 = static_cast<long>(std::floor(e.cy - ry)), y1 = static_cast<long>(std::ceil(e.cy + ry));
    const long x0 = static_cast<long>(std::floor(e.cx - rx)), x1 = static_cast<long>(std::ceil(e.cx + rx));
    std::size_t inside = 0;
    for (long z = z0; z <= z1; ++z) {
        for (long y = y0; y <= y1; ++y) {
            for (long x = x0; x <= x1; ++x) {
                if (!e.contains(static_cast<double>(z), static_cast<double>(y), static_cast<double>(x))) continue;
                if (z < 0 || y < 0 || x < 0 || z >= static_cast<long>(d.z) ||
                    y >= static_cast<long>(d.h) || x >= static_cast<long>(d.w)) {
                    return std::nullopt;
                }
                const auto zu = static_cast<std::size_t>(z), yu = static_cast<std::size_t>(y),
                           xu = static_cast<std::size_t>(x);
                if (!prostate.at(zu, yu, xu)) return std::nullopt;
                if (avoid != nullptr && avoid->at(zu, yu, xu)) return std::nullopt;
                ++inside;
            }
        }
    }
    if (inside == 0) return std::nullopt;
    return e;
}

void paint(MaskVolume& m, const Ellipsoid& e) {
    const Dims3 d = m.dims;
    for (std::size_t z = 0; z < d.z; ++z)
        for (std::size_t y = 0; y < d.h; ++y)
            for (std::size_t x = 0; x < d.w; ++x)
                if (e.contains(static_cast<double>(z), static_cast<double>(y), static_cast<double>(x)))
                    m.at(z, y, x) = 1;
}

}  // namespace

void CohortSpec::validate() const {
    if (n_patients < 2) throw std::invalid_argument("cohort.n_patients must be >= 2");
    if (cancer_fraction < 0.0 || cancer_fraction > 1.0)
        throw std::invalid_argument("cohort.cancer_fraction must lie in [0, 1]");
    if (z_min < 4 || z_max > 64 || z_min > z_max)
        throw std::invalid_argument("cohort.z_min/z_max must satisfy 4 <= z_min <= z_max <= 64");
    if (height < 16 || width < 16 || height > 256 || width > 256)
        throw std::invalid_argument("cohort.height/width must lie in [16, 256]");
    if (lesion_radius_min <= 0.0 || lesion_radius_min > lesion_radius_max)
        throw std::invalid_argument("cohort.lesion_radius_min/max invalid");
    if (lesion_z_min <= 0.0 || lesion_z_min > lesion_z_max)
        throw std::invalid_argument("cohort.lesion_z_min/max invalid");
    if (lesions_min < 1 || lesions_min > lesions_max)
        throw std::invalid_argument("cohort.lesions_min/max invalid");
    if (texture < 0.0 || texture_blur <= 0.0)
        throw std::invalid_argument("cohort.texture must be >= 0 and texture_blur > 0");
}

PatientRecord generate_phantom(const CohortSpec& spec, std::uint64_t patient_seed, bool has_cancer,
                               const std::string& patient_id) {
    spec.validate();
    RngStream rng(patient_seed);
    const std::size_t z_count = spec.z_min + rng.below(spec.z_max - spec.z_min + 1);
    const Dims3 d{z_count, spec.height, spec.width};

    PatientRecord rec;
    rec.patient_id = patient_id;
    rec.has_cancer = has_cancer;
    rec.prostate_mask = MaskVolume(d, 0);
    rec.cancer_mask = MaskVolume(d, 0);

    const double h = static_cast<double>(d.h), w = static_cast<double>(d.w);
    const Ellipsoid gland{(static_cast<double>(d.z) - 1.0) / 2.0 + rng.uniform(-0.5, 0.5),
                          (h - 1.0) / 2.0 + rng.uniform(-1.0, 1.0),
                          (w - 1.0) / 2.0 + rng.uniform(-1.0, 1.0),
                          0.42 * static_cast<double>(d.z) * rng.uniform(0.95, 1.05),
                          0.34 * h * rng.uniform(0.95, 1.05),
                          0.36 * w * rng.uniform(0.95, 1.05)};
    const Ellipsoid transition{gland.cz, gland.cy - 0.25 * gland.ry, gland.cx,
                               gland.rz * 0.7, gland.ry * 0.5, gland.rx * 0.55};
    paint(rec.prostate_mask, gland);

    if (has_cancer) {
        const std::size_t count =
            spec.lesions_min + rng.below(spec.lesions_max - spec.lesions_min + 1);
        for (std::size_t l = 0; l < count; ++l) {
            std::optional<Ellipsoid> e;
            for (int attempt = 0; attempt < kMaxPlacementAttempts && !e; ++attempt) {
                const double rz = rng.uniform(spec.lesion_z_min, spec.lesion_z_max);
                e = place_blob(spec, rec.prostate_mask, nullptr, rz, rng, gland);
            }
            if (!e) {
                throw PhantomError("lesion does not fit inside the prostate mask after " +
                                   std::to_string(kMaxPlacementAttempts) + " attempts (" +
                                   patient_id + ")");
            }
            paint(rec.cancer_mask, *e);
        }
    }

    MaskVolume mimic_mask(d, 0);
    for (std::size_t m = 0; m < spec.mimics; ++m) {
        // keep a margin so mimics never touch a lesion
        MaskVolume avoid = rec.cancer_mask;
        for (std::size_t z = 0; z < d.z; ++z)
            for (std::size_t y = 0; y < d.h; ++y)
                for (std::size_t x = 0; x < d.w; ++x)
                    if (rec.cancer_mask.at(z, y, x)) {
                        for (long dz = -2; dz <= 2; ++dz)
                            for (long dy = -3; dy <= 3; ++dy)
                                for (long dx = -3; dx <= 3; ++dx) {
                                    const long zz = static_cast<long>(z) + dz, yy = static_cast<long>(y) + dy,
                                               xx = static_cast<long>(x) + dx;
                                    if (zz >= 0 && yy >= 0 && xx >= 0 && zz < static_cast<long>(d.z) &&
                                        yy < static_cast<long>(d.h) && xx < static_cast<long>(d.w))
                                        avoid.at(static_cast<std::size_t>(zz), static_cast<std::size_t>(yy),
                                                 static_cast<std::size_t>(xx)) = 1;
                                }
                    }
        std::optional<Ellipsoid> e;
        for (int attempt = 0; attempt < kMaxPlacementAttempts && !e; ++attempt) {
            e = place_blob(spec, rec.prostate_mask, &avoid, 0.5, rng, gland);
        }
        if (!e) {
            throw PhantomError("mimic does not fit inside the prostate mask (" + patient_id + ")");
        }
        paint(mimic_mask, *e);
    }

    rec.truth = BiomarkerVolume(d);
    const std::size_t n = d.voxels();
    for (std::size_t c = 0; c < kChannels; ++c) {
        const auto tex = smooth_noise(d, spec.texture_blur, rng);
        for (std::size_t z = 0; z < d.z; ++z) {
            for (std::size_t y = 0; y < d.h; ++y) {
                for (std::size_t x = 0; x < d.w; ++x) {
                    const std::size_t i = (z * d.h + y) * d.w + x;
                    const auto zd = static_cast<double>(z), yd = static_cast<double>(y),
                               xd = static_cast<double>(x);
                    float base = spec.profiles.background[c];
                    if (rec.cancer_mask.values[i] || mimic_mask.values[i]) {
                        base = spec.profiles.lesion[c];
                    } else if (rec.prostate_mask.values[i]) {
                        base = transition.contains(zd, yd, xd) ? spec.profiles.transition[c]
                                                               : spec.profiles.peripheral[c];
                    }
                    rec.truth.values[c * n + i] =
                        base * static_cast<float>(std::exp(spec.texture * tex[i]));
                }
            }
        }
    }
    clamp_to_physical(rec.truth);

    bias::BiasSpec bspec = spec.bias;
    bspec.seed = derive_seed(patient_seed, 0xB1A5);
    rec.bias_field = bias::synth_bias_field(bspec, d);
    bias::NoiseSpec nspec = spec.noise;
    nspec.seed = derive_seed(patient_seed, 0x0015E);
    rec.observed = bias::apply_bias(rec.truth, rec.bias_field, nspec);
    return rec;
}

std::vector<ManifestEntry> plan_cohort(const CohortSpec& spec) {
    spec.validate();
    const auto n_cancer = static_cast<std::size_t>(
        std::llround(static_cast<double>(spec.n_patients) * spec.cancer_fraction));
    std::vector<std::size_t> order(spec.n_patients);
    std::iota(order.begin(), order.end(), 0);
    RngStream rng(derive_seed(spec.seed, 0xC0407));
    for (std::size_t i = order.size(); i > 1; --i) {
        std::swap(order[i - 1], order[rng.below(i)]);
    }
    std::vector<ManifestEntry> out(spec.n_patients);
    for (std::size_t i = 0; i < spec.n_patients; ++i) {
        char id[16];
        std::snprintf(id, sizeof id, "P%03zu", i);
        out[i].patient_id = id;
        out[i].seed = derive_seed(spec.seed, i + 1);
    }
    for (std::size_t k = 0; k < n_cancer; ++k) out[order[k]].has_cancer = true;
    return out;
}

Cohort generate_cohort(const CohortSpec& spec) {
    Cohort c;
    c.manifest = plan_cohort(spec);
    for (const auto& e : c.manifest) {
        c.patients.push_back(generate_phantom(spec, e.seed, e.has_cancer, e.patient_id));
    }
    return c;
}

void write_cohort(const Cohort& cohort, const std::filesystem::path& dir) {
    std::filesystem::create_directories(dir);
    nlohmann::json manifest = nlohmann::json::array();
    for (std::size_t i = 0; i < cohort.patients.size(); ++i) {
        const auto& p = cohort.patients[i];
        const std::string id = p.patient_id;
        nlohmann::json paths;
        auto put = [&](const std::string& key, const HmvArray& a) {
            const std::string name = id + "_" + key + ".hmv";
            write_volume(dir / name, a);
            paths[key] = name;
        };
        put("observed", to_hmv(p.observed));
        put("truth", to_hmv(p.truth));
        put("bias", to_hmv(p.bias_field));
        put("prostate", to_hmv(p.prostate_mask));
        put("cancer", to_hmv(p.cancer_mask));
        nlohmann::json e;
        e["patient_id"] = id;
        e["has_cancer"] = p.has_cancer;
        e["seed"] = i < cohort.manifest.size() ? cohort.manifest[i].seed : 0;
        e["paths"] = paths;
        manifest.push_back(e);
    }
    std::ofstream f(dir / "manifest.json");
    f << manifest.dump(2) << "\n";
}

Cohort read_cohort(const std::filesystem::path& dir) {
    std::ifstream f(dir / "manifest.json");
    if (!f) {
        throw std::runtime_error("cohort manifest not found in " + dir.string());
    }
    const auto manifest = nlohmann::json::parse(f);
    Cohort c;
    for (const auto& e : manifest) {
        PatientRecord p;
        p.patient_id = e.at("patient_id").get<std::string>();
        p.has_cancer = e.at("has_cancer").get<bool>();
        const auto& paths = e.at("paths");
        p.observed = biomarkers_from_hmv(read_volume(dir / paths.at("observed").get<std::string>()));
        p.truth = biomarkers_from_hmv(read_volume(dir / paths.at("truth").get<std::string>()));
        p.bias_field = volume_from_hmv(read_volume(dir / paths.at("bias").get<std::string>()));
        p.prostate_mask = mask_from_hmv(read_volume(dir / paths.at("prostate").get<std::string>()));
        p.cancer_mask = mask_from_hmv(read_volume(dir / paths.at("cancer").get<std::string>()));
        c.manifest.push_back({p.patient_id, p.has_cancer, e.value("seed", std::uint64_t{0})});
        c.patients.push_back(std::move(p));
    }
    return c;
}

}  // namespace hbrnet::phantom
