#include "hbrnet/config.hpp"

#include <charconv>
#include <fstream>
#include <functional>
#include <sstream>

namespace hbrnet::config {

namespace {

std::string trim(const std::string& s) {
    const auto b = s.find_first_not_of(" \t\r\n");
    if (b == std::string::npos) return {};
    const auto e = s.find_last_not_of(" \t\r\n");
    return s.substr(b, e - b + 1);
}

std::vector<std::string> split(const std::string& s, char sep) {
    std::vector<std::string> out;
    if (trim(s).empty()) return out;
    std::stringstream ss(s);
    std::string item;
    while (std::getline(ss, item, sep)) out.push_back(trim(item));
    return out;
}

struct Ctx {
    const std::string& key;
    std::size_t line;

    [[noreturn]] void fail(const std::string& what) const { throw ConfigError(key, line, what); }
};

std::uint64_t to_uint(const std::string& v, const Ctx& c) {
    std::uint64_t out = 0;
    const auto* end = v.data() + v.size();
    auto [p, ec] = std::from_chars(v.data(), end, out);
    if (v.empty() || ec != std::errc() || p != end) c.fail("expected a nonnegative integer, got '" + v + "'");
    return out;
}

double to_real(const std::string& v, const Ctx& c) {
    double out = 0.0;
    const auto* end = v.data() + v.size();
    auto [p, ec] = std::from_chars(v.data(), end, out);
    if (v.empty() || ec != std::errc() || p != end) c.fail("expected a number, got '" + v + "'");
    return out;
}

bool to_bool(const std::string& v, const Ctx& c) {
    if (v == "true" || v == "1") return true;
    if (v == "false" || v == "0") return false;
    c.fail("expected true or false, got '" + v + "'");
}

std::string fmt(double v) {
    char buf[64];
    auto [p, ec] = std::to_chars(buf, buf + sizeof buf, v);
    return std::string(buf, p);
}
std::string fmt(std::uint64_t v) { return std::to_string(v); }
std::string fmt(bool v) { return v ? "true" : "false"; }

struct Entry {
    std::string key;
    std::function<void(RunConfig&, const std::string&, const Ctx&)> set;
    std::function<std::string(const RunConfig&)> get;
};

template <typename Field>
Entry uint_entry(std::string key, Field field) {
    return {std::move(key),
            [field](RunConfig& r, const std::string& v, const Ctx& c) {
                field(r) = static_cast<std::remove_reference_t<decltype(field(r))>>(to_uint(v, c));
            },
            [field](const RunConfig& r) {
                return fmt(static_cast<std::uint64_t>(field(const_cast<RunConfig&>(r))));
            }};
}

template <typename Field>
Entry real_entry(std::string key, Field field) {
    return {std::move(key),
            [field](RunConfig& r, const std::string& v, const Ctx& c) { field(r) = to_real(v, c); },
            [field](const RunConfig& r) { return fmt(static_cast<double>(field(const_cast<RunConfig&>(r)))); }};
}

template <typename Field>
Entry bool_entry(std::string key, Field field) {
    return {std::move(key),
            [field](RunConfig& r, const std::string& v, const Ctx& c) { field(r) = to_bool(v, c); },
            [field](const RunConfig& r) { return fmt(static_cast<bool>(field(const_cast<RunConfig&>(r)))); }};
}

template <typename E, typename Field>
Entry enum_entry(std::string key, Field field, std::vector<std::pair<std::string, E>> names) {
    return {std::move(key),
            [field, names](RunConfig& r, const std::string& v, const Ctx& c) {
                for (const auto& [n, e] : names) {
                    if (n == v) {
                        field(r) = e;
                        return;
                    }
                }
                std::string allowed;
                for (const auto& [n, e] : names) allowed += (allowed.empty() ? "" : "|") + n;
                c.fail("expected one of " + allowed + ", got '" + v + "'");
            },
            [field, names](const RunConfig& r) {
                for (const auto& [n, e] : names) {
                    if (e == field(const_cast<RunConfig&>(r))) return n;
                }
                return std::string("?");
            }};
}

const std::vector<Entry>& registry() {
    static const std::vector<Entry> entries = [] {
        std::vector<Entry> e;
        e.push_back(uint_entry("seed", [](RunConfig& r) -> auto& { return r.seed; }));

        e.push_back({"cohort.dir",
                     [](RunConfig& r, const std::string& v, const Ctx&) { r.cohort_dir = v; },
                     [](const RunConfig& r) { return r.cohort_dir; }});
        e.push_back(uint_entry("cohort.n_patients", [](RunConfig& r) -> auto& { return r.cohort.n_patients; }));
        e.push_back(real_entry("cohort.cancer_fraction",
                               [](RunConfig& r) -> auto& { return r.cohort.cancer_fraction; }));
        e.push_back(uint_entry("cohort.z_min", [](RunConfig& r) -> auto& { return r.cohort.z_min; }));
        e.push_back(uint_entry("cohort.z_max", [](RunConfig& r) -> auto& { return r.cohort.z_max; }));
        e.push_back(uint_entry("cohort.height", [](RunConfig& r) -> auto& { return r.cohort.height; }));
        e.push_back(uint_entry("cohort.width", [](RunConfig& r) -> auto& { return r.cohort.width; }));
        e.push_back(real_entry("cohort.lesion_radius_min",
                               [](RunConfig& r) -> auto& { return r.cohort.lesion_radius_min; }));
        e.push_back(real_entry("cohort.lesion_radius_max",
                               [](RunConfig& r) -> auto& { return r.cohort.lesion_radius_max; }));
        e.push_back(real_entry("cohort.lesion_z_min", [](RunConfig& r) -> auto& { return r.cohort.lesion_z_min; }));
        e.push_back(real_entry("cohort.lesion_z_max", [](RunConfig& r) -> auto& { return r.cohort.lesion_z_max; }));
        e.push_back(uint_entry("cohort.lesions_min", [](RunConfig& r) -> auto& { return r.cohort.lesions_min; }));
        e.push_back(uint_entry("cohort.lesions_max", [](RunConfig& r) -> auto& { return r.cohort.lesions_max; }));
        e.push_back(uint_entry("cohort.mimics", [](RunConfig& r) -> auto& { return r.cohort.mimics; }));
        e.push_back(real_entry("cohort.texture", [](RunConfig& r) -> auto& { return r.cohort.texture; }));
        e.push_back(real_entry("cohort.texture_blur", [](RunConfig& r) -> auto& { return r.cohort.texture_blur; }));
        e.push_back(real_entry("cohort.noise_sigma", [](RunConfig& r) -> auto& { return r.cohort.noise.sigma; }));

        e.push_back(real_entry("bias.amplitude", [](RunConfig& r) -> auto& { return r.cohort.bias.amplitude; }));
        e.push_back(uint_entry("bias.max_sequency",
                               [](RunConfig& r) -> auto& { return r.cohort.bias.max_sequency; }));
        e.push_back(uint_entry("bias.z_knots", [](RunConfig& r) -> auto& { return r.cohort.bias.z_knots; }));
        e.push_back(uint_entry("bias.reference_k", [](RunConfig& r) -> auto& { return r.cv.stage1.reference.k; }));
        e.push_back(uint_entry("bias.reference_iters",
                               [](RunConfig& r) -> auto& { return r.cv.stage1.reference.iters; }));
        e.push_back(real_entry("bias.log_floor",
                               [](RunConfig& r) -> auto& { return r.cv.stage1.reference.log_floor; }));

        e.push_back(bool_entry("stage1.enabled", [](RunConfig& r) -> auto& { return r.cv.no_stage1; }));
        // stage1.enabled is stored negated; fix the accessors below.
        e.back().set = [](RunConfig& r, const std::string& v, const Ctx& c) { r.cv.no_stage1 = !to_bool(v, c); };
        e.back().get = [](const RunConfig& r) { return fmt(!r.cv.no_stage1); };
        e.push_back({"stage1.widths",
                     [](RunConfig& r, const std::string& v, const Ctx& c) {
                         std::vector<std::size_t> w;
                         for (const auto& item : split(v, ',')) w.push_back(to_uint(item, c));
                         if (w.empty()) c.fail("expected a comma-separated list of widths");
                         r.cv.stage1.net.widths = w;
                         r.cv.stage1.net.levels = w.size();
                     },
                     [](const RunConfig& r) {
                         std::string s;
                         for (auto w : r.cv.stage1.net.widths) s += (s.empty() ? "" : ",") + std::to_string(w);
                         return s;
                     }});
        e.push_back(real_entry("stage1.dropout",
                               [](RunConfig& r) -> auto& { return r.cv.stage1.net.coeff_dropout_rate; }));
        e.push_back(uint_entry("stage1.epochs", [](RunConfig& r) -> auto& { return r.cv.stage1.train.epochs; }));
        e.push_back(uint_entry("stage1.batch", [](RunConfig& r) -> auto& { return r.cv.stage1.train.batch; }));
        e.push_back(real_entry("stage1.lr", [](RunConfig& r) -> auto& { return r.cv.stage1.train.adamw.lr; }));
        e.push_back(real_entry("stage1.weight_decay",
                               [](RunConfig& r) -> auto& { return r.cv.stage1.train.adamw.weight_decay; }));
        e.push_back(enum_entry<hunet::ReferenceMode>(
            "stage1.reference_mode", [](RunConfig& r) -> auto& { return r.cv.stage1.reference_mode; },
            {{"per_channel", hunet::ReferenceMode::per_channel}, {"shared", hunet::ReferenceMode::shared}}));

        e.push_back(uint_entry("patch.size", [](RunConfig& r) -> auto& { return r.cv.pipeline.size; }));
        e.push_back(uint_entry("patch.stride", [](RunConfig& r) -> auto& { return r.cv.pipeline.stride; }));
        e.push_back(uint_entry("patch.dilation", [](RunConfig& r) -> auto& { return r.cv.pipeline.dilation; }));
        e.push_back(real_entry("patch.label_threshold",
                               [](RunConfig& r) -> auto& { return r.cv.pipeline.label_threshold; }));
        e.push_back(bool_entry("patch.two_d", [](RunConfig& r) -> auto& { return r.cv.pipeline.two_d; }));
        e.push_back(bool_entry("patch.augment", [](RunConfig& r) -> auto& { return r.cv.pipeline.augment.enabled; }));
        e.push_back(real_entry("patch.p_hflip", [](RunConfig& r) -> auto& { return r.cv.pipeline.augment.p_hflip; }));
        e.push_back(real_entry("patch.p_vflip", [](RunConfig& r) -> auto& { return r.cv.pipeline.augment.p_vflip; }));
        e.push_back(real_entry("patch.p_rot90", [](RunConfig& r) -> auto& { return r.cv.pipeline.augment.p_rot90; }));
        e.push_back({"patch.hist_presets",
                     [](RunConfig& r, const std::string& v, const Ctx& c) {
                         std::vector<std::array<double, 2>> presets;
                         for (const auto& item : split(v, ',')) {
                             const auto pair = split(item, ':');
                             if (pair.size() != 2) c.fail("expected low:high pairs, got '" + item + "'");
                             presets.push_back({to_real(pair[0], c), to_real(pair[1], c)});
                         }
                         r.cv.pipeline.augment.presets = presets;
                     },
                     [](const RunConfig& r) {
                         std::string s;
                         for (const auto& p : r.cv.pipeline.augment.presets) {
                             s += (s.empty() ? "" : ",") + fmt(p[0]) + ":" + fmt(p[1]);
                         }
                         return s;
                     }});
        e.push_back(enum_entry<patch::InverseMode>(
            "patch.inverse", [](RunConfig& r) -> auto& { return r.cv.pipeline.augment.inverse; },
            {{"complement", patch::InverseMode::complement}, {"swap", patch::InverseMode::swap_thresholds}}));
        e.push_back(uint_entry("patch.max_negatives",
                               [](RunConfig& r) -> auto& { return r.cv.pipeline.max_negatives_per_patient; }));
        e.push_back(uint_entry("patch.max_positives",
                               [](RunConfig& r) -> auto& { return r.cv.pipeline.max_positives_per_patient; }));

        e.push_back(uint_entry("stage2.width", [](RunConfig& r) -> auto& { return r.cv.stage2.resnet.width; }));
        e.push_back(uint_entry("stage2.epochs", [](RunConfig& r) -> auto& { return r.cv.stage2.epochs; }));
        e.push_back(uint_entry("stage2.batch", [](RunConfig& r) -> auto& { return r.cv.stage2.batch; }));
        e.push_back(uint_entry("stage2.patches_per_epoch",
                               [](RunConfig& r) -> auto& { return r.cv.stage2.patches_per_epoch; }));
        e.push_back(real_entry("stage2.lr", [](RunConfig& r) -> auto& { return r.cv.stage2.adamw.lr; }));
        e.push_back(real_entry("stage2.weight_decay",
                               [](RunConfig& r) -> auto& { return r.cv.stage2.adamw.weight_decay; }));
        e.push_back(enum_entry<detector::LossConfig::Kind>(
            "stage2.loss", [](RunConfig& r) -> auto& { return r.cv.stage2.loss.kind; },
            {{"focal", detector::LossConfig::Kind::focal}, {"bce", detector::LossConfig::Kind::bce}}));
        e.push_back(real_entry("stage2.focal_gamma", [](RunConfig& r) -> auto& { return r.cv.stage2.loss.gamma; }));
        e.push_back(real_entry("stage2.focal_alpha", [](RunConfig& r) -> auto& { return r.cv.stage2.loss.alpha; }));

        e.push_back(uint_entry("eval.folds", [](RunConfig& r) -> auto& { return r.cv.folds; }));
        e.push_back(uint_entry("eval.fold", [](RunConfig& r) -> auto& { return r.fold; }));
        e.push_back(real_entry("eval.rho", [](RunConfig& r) -> auto& { return r.cv.rho; }));
        e.push_back(real_entry("eval.p_threshold", [](RunConfig& r) -> auto& { return r.cv.p_threshold; }));
        e.push_back({"eval.patient", [](RunConfig& r, const std::string& v, const Ctx&) { r.patient = v; },
                     [](const RunConfig& r) { return r.patient; }});
        e.push_back({"eval.sweep",
                     [](RunConfig& r, const std::string& v, const Ctx& c) {
                         std::vector<std::string> items = split(v, ',');
                         for (const auto& item : items) {
                             const bool size_variant = item.rfind("size", 0) == 0 && item.size() > 4;
                             if (size_variant) to_uint(item.substr(4), c);
                             if (!size_variant && item != "full" && item != "no_stage1" && item != "two_d") {
                                 c.fail("unknown variant '" + item + "' (full|no_stage1|two_d|size<S>)");
                             }
                         }
                         r.sweep = items;
                     },
                     [](const RunConfig& r) {
                         std::string s;
                         for (const auto& v : r.sweep) s += (s.empty() ? "" : ",") + v;
                         return s;
                     }});
        return e;
    }();
    return entries;
}

const Entry& find(const std::string& key, std::size_t line) {
    for (const auto& e : registry()) {
        if (e.key == key) return e;
    }
    throw ConfigError(key, line, "unknown key");
}

}  // namespace

ConfigError::ConfigError(std::string key, std::size_t line, const std::string& what)
    : std::runtime_error((line ? "line " + std::to_string(line) + ": " : std::string()) + "key '" + key +
                         "': " + what),
      key_(std::move(key)),
      line_(line) {}

void RunConfig::propagate_seed() {
    cohort.seed = seed;
    cv.seed = seed;
}

std::vector<std::string> keys() {
    std::vector<std::string> out;
    for (const auto& e : registry()) out.push_back(e.key);
    return out;
}

void set(RunConfig& config, const std::string& key, const std::string& value, std::size_t line) {
    const Entry& e = find(key, line);
    e.set(config, value, Ctx{key, line});
    config.origin[key] = line;
    if (key == "seed") config.propagate_seed();
}

std::string get(const RunConfig& config, const std::string& key) { return find(key, 0).get(config); }

RunConfig parse_text(const std::string& text) {
    RunConfig config;
    config.propagate_seed();
    std::istringstream in(text);
    std::string raw;
    std::size_t line = 0;
    while (std::getline(in, raw)) {
        ++line;
        const auto hash = raw.find('#');
        const std::string body = trim(hash == std::string::npos ? raw : raw.substr(0, hash));
        if (body.empty()) continue;
        const auto eq = body.find('=');
        if (eq == std::string::npos) {
            throw ConfigError(body, line, "expected 'key = value'");
        }
        set(config, trim(body.substr(0, eq)), trim(body.substr(eq + 1)), line);
    }
    validate(config);
    return config;
}

RunConfig parse_file(const std::filesystem::path& path) {
    std::ifstream f(path);
    if (!f) throw std::runtime_error("cannot read config " + path.string());
    std::stringstream ss;
    ss << f.rdbuf();
    return parse_text(ss.str());
}

void apply_overrides(RunConfig& config, const std::vector<std::string>& overrides) {
    for (const auto& o : overrides) {
        const auto eq = o.find('=');
        if (eq == std::string::npos) throw ConfigError(o, 0, "override must be key=value");
        set(config, trim(o.substr(0, eq)), trim(o.substr(eq + 1)), 0);
    }
    validate(config);
}

void validate(const RunConfig& config) {
    auto fail = [&](const std::string& key, const std::string& what) {
        const auto it = config.origin.find(key);
        throw ConfigError(key, it == config.origin.end() ? 0 : it->second, what);
    };
    for (const auto& p : config.cv.pipeline.augment.presets) {
        if (!(p[0] >= 0.0 && p[0] < p[1] && p[1] <= 1.0)) {
            fail("patch.hist_presets", "need 0 <= T_d < T_u <= 1, got " + fmt(p[0]) + ":" + fmt(p[1]));
        }
    }
    if (config.cv.pipeline.size % 2 == 0 || config.cv.pipeline.size < 3) {
        fail("patch.size", "must be odd and >= 3");
    }
    if (config.cv.pipeline.stride == 0) fail("patch.stride", "must be positive");
    if (config.cv.pipeline.label_threshold <= 0.0 || config.cv.pipeline.label_threshold > 1.0) {
        fail("patch.label_threshold", "must be in (0, 1]");
    }
    for (const char* key : {"patch.p_hflip", "patch.p_vflip", "patch.p_rot90"}) {
        const double p = std::stod(get(config, key));
        if (p < 0.0 || p > 1.0) fail(key, "probability must be in [0, 1]");
    }
    if (config.cohort.z_min > config.cohort.z_max) fail("cohort.z_min", "exceeds cohort.z_max");
    if (config.cohort.cancer_fraction < 0.0 || config.cohort.cancer_fraction > 1.0) {
        fail("cohort.cancer_fraction", "must be in [0, 1]");
    }
    if (config.cv.folds < 2) fail("eval.folds", "need at least 2 folds");
    if (config.cv.folds > config.cohort.n_patients) fail("eval.folds", "exceeds cohort.n_patients");
    if (config.fold >= config.cv.folds) fail("eval.fold", "must be below eval.folds");
    if (config.cv.stage2.resnet.width == 0) fail("stage2.width", "must be positive");
    if (config.cv.stage1.net.coeff_dropout_rate < 0.0 || config.cv.stage1.net.coeff_dropout_rate >= 1.0) {
        fail("stage1.dropout", "must be in [0, 1)");
    }
    if (config.cv.rho < 0.0 || config.cv.rho > 1.0) fail("eval.rho", "must be in [0, 1]");
    try {
        config.cohort.validate();
    } catch (const std::invalid_argument& e) {
        throw ConfigError("cohort", 0, e.what());
    }
    try {
        config.cv.stage1.net.validate();
    } catch (const std::invalid_argument& e) {
        fail("stage1.widths", e.what());
    }
}

std::string resolved_text(const RunConfig& config) {
    std::string out;
    for (const auto& e : registry()) out += e.key + " = " + e.get(config) + "\n";
    return out;
}

nlohmann::json resolved_json(const RunConfig& config) {
    nlohmann::json out = nlohmann::json::object();
    for (const auto& e : registry()) out[e.key] = e.get(config);
    return out;
}

}  // namespace hbrnet::config
