#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <stdexcept>
#include <string>
#include <vector>

#include "hbrnet/eval.hpp"
#include "hbrnet/phantom.hpp"

namespace hbrnet::config {

/// Parse or validation failure tied to one key. line is 0 for --set
/// overrides and defaults.
class ConfigError : public std::runtime_error {
public:
    ConfigError(std::string key, std::size_t line, const std::string& what);
    const std::string& key() const { return key_; }
    std::size_t line() const { return line_; }

private:
    std::string key_;
    std::size_t line_;
};

struct RunConfig {
    std::uint64_t seed = 7;
    phantom::CohortSpec cohort;
    /// Cohort location; empty means <out>/cohort.
    std::string cohort_dir;
    eval::CvConfig cv;
    /// Fold whose training split feeds train-stage1/train-stage2 and whose
    /// validation split feeds eval and heatmap.
    std::size_t fold = 0;
    /// Heatmap patient; empty means every validation patient of the fold.
    std::string patient;
    /// Extra cv variants reported as ablation rows.
    std::vector<std::string> sweep;
    /// Source line of every key set from a file; overrides record 0.
    std::map<std::string, std::size_t> origin;

    /// Copies the global seed into every module that draws randomness.
    void propagate_seed();
};

/// Key names in echo order.
std::vector<std::string> keys();

/// Sets one key from its text form.
void set(RunConfig& config, const std::string& key, const std::string& value, std::size_t line = 0);
/// Canonical text form of one key.
std::string get(const RunConfig& config, const std::string& key);

/// Parses "key = value" lines with '#' comments on top of the defaults.
RunConfig parse_text(const std::string& text);
RunConfig parse_file(const std::filesystem::path& path);
/// Applies "key=value" overrides after the file.
void apply_overrides(RunConfig& config, const std::vector<std::string>& overrides);

/// Cross-key checks; throws ConfigError naming the offending key.
void validate(const RunConfig& config);

/// Every key, one "key = value" line each, in keys() order.
std::string resolved_text(const RunConfig& config);
/// Same content as a JSON object of strings.
nlohmann::json resolved_json(const RunConfig& config);

}  // namespace hbrnet::config
