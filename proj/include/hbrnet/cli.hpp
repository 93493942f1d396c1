#pragma once

#include <filesystem>
#include <ostream>
#include <stdexcept>
#include <string>

#include "hbrnet/config.hpp"

namespace hbrnet::cli {

enum ExitCode : int { ok = 0, usage_error = 1, missing_dependency = 2, runtime_failure = 3 };

class DependencyError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

/// Another run holds the output directory.
class LockError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

/// Holds <out>/.hbrnet.lock for its lifetime.
class DirectoryLock {
public:
    explicit DirectoryLock(const std::filesystem::path& out);
    ~DirectoryLock();
    DirectoryLock(const DirectoryLock&) = delete;
    DirectoryLock& operator=(const DirectoryLock&) = delete;

private:
    std::filesystem::path path_;
};

bool is_subcommand(const std::string& name);

/// Worker count: hardware concurrency capped by HBRNET_THREADS when set.
std::size_t worker_count();

/// Runs one subcommand with a parsed config; errors propagate as exceptions.
void run(const std::string& subcommand, const config::RunConfig& config, const std::filesystem::path& out,
         std::ostream& log);

/// Full entry point: parses, locks, echoes config.resolved, runs, maps
/// failures to exit codes and reports them on err.
int main(int argc, char** argv, std::ostream& log, std::ostream& err);

}  // namespace hbrnet::cli
