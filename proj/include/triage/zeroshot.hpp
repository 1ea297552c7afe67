#pragma once

#include <cstddef>
#include <filesystem>
#include <map>
#include <mutex>
#include <memory>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include <nlohmann/json.hpp>

#include "triage/corpus.hpp"
#include "triage/error.hpp"
#include "triage/evaluation.hpp"
#include "triage/taxonomy.hpp"

namespace triage {

struct PromptPair {
  std::string system;
  std::string user;
};

/// System and user prompt. Options are listed in canonical letter order;
/// the prompt never depends on the post being classified.
PromptPair build_prompt(const Taxonomy& taxonomy = Taxonomy::wildfire());

/// Accepts exactly one option letter, case-insensitive, optionally
/// followed by '.' or ')' and wrapped in whitespace, quotes, asterisks or
/// brackets. Anything else is unparseable (nullopt).
Prediction parse_response(std::string_view raw, const Taxonomy& taxonomy = Taxonomy::wildfire());

struct VlmSettings {
  double temperature = 0.1;
  int num_beams = 1;
  int max_new_tokens = 1024;
};

struct VlmRequest {
  const PromptPair* prompt = nullptr;
  std::string post_id;
  /// Attachments; never interpolated into the prompt strings.
  std::string post_text;
  std::filesystem::path image_path;
  VlmSettings settings;
};

/// Network or backend failure. Retried by classify_zeroshot.
class TransportError : public Error {
 public:
  using Error::Error;
};

class VlmClient {
 public:
  virtual ~VlmClient() = default;
  /// Returns the model's raw text answer. Throws TransportError when the
  /// backend cannot be reached. Must be safe to call concurrently.
  virtual std::string complete(const VlmRequest& request) = 0;
};

/// Replays a response log: one JSON object per line with "post_id" and
/// either "raw" or "error". An "error" entry may carry "failures": the
/// number of attempts that fail before "raw" is returned.
class RecordedClient final : public VlmClient {
 public:
  explicit RecordedClient(const std::filesystem::path& path);
  std::string complete(const VlmRequest& request) override;

  /// Settings seen by the most recent call, for forwarding checks.
  std::optional<VlmSettings> last_settings() const;

 private:
  struct Entry {
    std::optional<std::string> raw;
    std::string error;
    std::size_t failures = 0;
  };
  std::map<std::string, Entry> entries_;
  std::map<std::string, std::size_t> attempts_;
  std::optional<VlmSettings> last_settings_;
  mutable std::mutex mutex_;
};

/// Named backend configuration. Free-text fields are recorded in manifests.
struct AdapterConfig {
  std::string name;
  std::string endpoint;  // http(s)://host[:port]/path
  std::string model;
  std::string auth_env;  // env var holding a bearer token; empty for none
  std::string quantization;
  /// "base64" sends local images as data URLs; "url" sends image_path verbatim.
  std::string image_mode = "base64";
  /// Whether to forward num_beams (local servers only).
  bool send_num_beams = false;
};

/// Presets for the four evaluated models.
std::vector<AdapterConfig> builtin_adapters();

/// OpenAI-compatible chat-completions client.
class HttpChatClient final : public VlmClient {
 public:
  explicit HttpChatClient(AdapterConfig config);
  std::string complete(const VlmRequest& request) override;

  /// Request body for a call; exposed for tests.
  nlohmann::json request_body(const VlmRequest& request) const;

 private:
  AdapterConfig config_;
};

struct ZeroShotResult {
  std::string post_id;
  Prediction label;
  std::string raw;
  std::optional<std::string> error;
  std::size_t retries = 0;
};

struct ZeroShotOptions {
  std::size_t max_in_flight = 1;
  std::size_t max_retries = 2;
};

/// One result per post in input order. Transport failures are retried up
/// to max_retries times and then recorded; the run continues.
std::vector<ZeroShotResult> classify_zeroshot(const std::vector<Post>& posts, VlmClient& client,
                                              const VlmSettings& settings,
                                              const ZeroShotOptions& options = {},
                                              const std::filesystem::path& image_root = {},
                                              const Taxonomy& taxonomy = Taxonomy::wildfire());

/// Response log: one line per post with post_id, raw, parsed_letter.
void write_response_log(const std::filesystem::path& path,
                        const std::vector<ZeroShotResult>& results, const Taxonomy& taxonomy);

}  // namespace triage
