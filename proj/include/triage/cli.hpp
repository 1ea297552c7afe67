#pragma once

#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <optional>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

namespace triage::cli {

inline constexpr const char* kToolVersion = "0.1.0";
inline constexpr int kManifestVersion = 1;

/// Commands accepted by `triage <command>`.
const std::vector<std::string>& commands();

struct Violation {
  std::string path;  // e.g. "train.model.dropout", "eval.runs[1].seed"
  std::string message;

  friend bool operator==(const Violation&, const Violation&) = default;
};

/// Every recognised field with its default. Path fields default to null.
nlohmann::json default_config();

/// Checks field names, types, enum values, numeric ranges and that every
/// non-null input path exists. With a command, also reports input paths
/// the command needs but the config leaves unset. Pure.
std::vector<Violation> validate_config(const nlohmann::json& config,
                                       const std::optional<std::string>& command = std::nullopt);

struct LoadedConfig {
  nlohmann::json config;  // defaults merged with the file, paths absolute
  /// Set when the file was a run manifest; its recorded command.
  std::optional<std::string> manifest_command;
  /// Input digests recorded by the manifest, keyed by absolute path.
  nlohmann::json manifest_inputs;
};

/// Reads a config file or a run manifest. Relative paths in a config file
/// resolve against the file's directory. Throws triage::Error on
/// unreadable or non-object JSON.
LoadedConfig load_config(const std::filesystem::path& path);

/// Deep merge: objects merge key by key, anything else in `patch` wins.
nlohmann::json merge(nlohmann::json base, const nlohmann::json& patch);

/// sha256 of the canonical (sorted-key) dump.
std::string config_hash(const nlohmann::json& config);

/// Named random streams derived from one base seed.
nlohmann::json seed_streams(std::uint64_t seed);

struct RunOptions {
  std::string command;
  std::filesystem::path config_path;
  std::vector<std::uint64_t> seeds;         // overrides config "seed"
  std::optional<std::filesystem::path> out; // overrides config "out"
  std::vector<std::string> overrides;       // "dotted.path=json-value"
};

/// Executes one command. Returns the process exit code: 0 on success,
/// 1 with a JSON error report on `err` (also written to <out>/error.json
/// when the output directory is known).
int run(const RunOptions& options, std::ostream& err);

/// Full command-line entry point, including usage errors (exit 2).
int main(int argc, const char* const* argv, std::ostream& out, std::ostream& err);

}  // namespace triage::cli
