#pragma once

#include <filesystem>
#include <iosfwd>
#include <string>
#include <vector>

#include <json.hpp>

namespace smokegen::cli {

enum ExitCode { kOk = 0, kUserError = 1, kInternalError = 2 };

/// One JSON file with a "global" block {seed, workers, data_root, runs_dir}
/// and one block per stage: prep, train, generate, score, select, export,
/// eval, annotate. Relative paths resolve against data_root, which itself
/// resolves against the config file's directory.
struct PipelineConfig {
    nlohmann::json root = nlohmann::json::object();
    std::filesystem::path base_dir = ".";

    static PipelineConfig load(const std::filesystem::path& path);
    const nlohmann::json& stage(const std::string& name) const;
    std::filesystem::path data_root() const;
    std::filesystem::path resolve(const std::string& path) const;
};

/// Human-readable problems; empty when the config is usable. Input paths
/// must exist unless an earlier stage in the same file produces them.
std::vector<std::string> validate_config(const PipelineConfig& cfg, bool check_paths = true);

/// The command-line entry point. `args` excludes the program name.
int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);

std::string git_describe();

}  // namespace smokegen::cli
