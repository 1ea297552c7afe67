#pragma once

#include <cstddef>
#include <filesystem>
#include <functional>
#include <string>
#include <string_view>
#include <vector>

#include <nlohmann/json.hpp>

namespace triage {

namespace fs = std::filesystem;
using json = nlohmann::json;

/// Reads a whole file. Throws triage::Error if it cannot be opened.
std::string read_file(const fs::path& path);

/// Writes `content` to `path`, creating parent directories.
void write_file(const fs::path& path, std::string_view content);

/// Calls `on_line(line_number, text)` for every non-blank line of a
/// line-delimited file. Line numbers are 1-based. Throws when the file
/// is missing.
void for_each_line(const fs::path& path,
                   const std::function<void(std::size_t, const std::string&)>& on_line);

/// One JSON value per line; blank lines skipped.
void write_jsonl(const fs::path& path, const std::vector<json>& records);

/// Stable JSON text: sorted keys, two-space indent, trailing newline.
std::string dump_json(const json& value);

std::string sha256_hex(std::string_view data);
std::string sha256_file(const fs::path& path);

}  // namespace triage
