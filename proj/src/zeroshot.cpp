#include "triage/zeroshot.hpp"

#include <algorithm>
#include <atomic>
#include <cctype>
#include <cstdlib>
#include <thread>

#include <fmt/format.h>
#include <openssl/evp.h>

#include "httplib.h"

#include "triage/util/io.hpp"

namespace triage {

PromptPair build_prompt(const Taxonomy& taxonomy) {
  PromptPair prompt;
  prompt.system =
      "You are an assistant who is being given an image and text pair as a Twitter post, which "
      "was created during a natural disaster event. Your task is to use information from both "
      "the text and the image to decide which option the post should be labeled as. You must pay "
      "close attention to each option when deciding which label to use.";
  prompt.user = "Which option should this post be labeled as?\n";
  for (const auto& label : taxonomy.canonical_order()) {
    prompt.user += fmt::format("{}. {} ({})\n", label.letter, label.name, label.prompt_hint);
  }
  prompt.user += "You may only answer with the chosen option's letter.";
  return prompt;
}

Prediction parse_response(std::string_view raw, const Taxonomy& taxonomy) {
  auto strippable = [](unsigned char c) {
    return std::isspace(c) || c == '"' || c == '\'' || c == '*' || c == '`' || c == '(' ||
           c == '[' || c == ']';
  };
  while (!raw.empty() && strippable(static_cast<unsigned char>(raw.front()))) raw.remove_prefix(1);
  while (!raw.empty() && strippable(static_cast<unsigned char>(raw.back()))) raw.remove_suffix(1);
  if (raw.size() == 2 && (raw[1] == '.' || raw[1] == ')')) raw.remove_suffix(1);
  if (raw.size() != 1) return std::nullopt;
  const int index = std::toupper(static_cast<unsigned char>(raw[0])) - 'A';
  if (index < 0 || static_cast<std::size_t>(index) >= taxonomy.size()) return std::nullopt;
  return ClassId{static_cast<std::size_t>(index)};
}

RecordedClient::RecordedClient(const std::filesystem::path& path) {
  for_each_line(path, [&](std::size_t line, const std::string& text) {
    json record;
    try {
      record = json::parse(text);
    } catch (const json::parse_error& e) {
      throw Error(fmt::format("{}:{}: invalid JSON: {}", path.string(), line, e.what()));
    }
    Entry entry;
    if (auto it = record.find("raw"); it != record.end() && it->is_string()) {
      entry.raw = it->get<std::string>();
    }
    entry.error = record.value("error", "");
    entry.failures = record.value("failures", entry.raw ? std::size_t{0} : SIZE_MAX);
    if (!entry.raw && entry.error.empty()) {
      throw Error(fmt::format("{}:{}: entry needs \"raw\" or \"error\"", path.string(), line));
    }
    entries_[record.at("post_id").get<std::string>()] = std::move(entry);
  });
}

std::string RecordedClient::complete(const VlmRequest& request) {
  std::lock_guard lock(mutex_);
  last_settings_ = request.settings;
  auto it = entries_.find(request.post_id);
  if (it == entries_.end()) {
    throw TransportError(fmt::format("no recorded response for post {}", request.post_id));
  }
  const std::size_t attempt = attempts_[request.post_id]++;
  if (attempt < it->second.failures || !it->second.raw) {
    throw TransportError(it->second.error.empty() ? "recorded transport failure"
                                                  : it->second.error);
  }
  return *it->second.raw;
}

std::optional<VlmSettings> RecordedClient::last_settings() const {
  std::lock_guard lock(mutex_);
  return last_settings_;
}

std::vector<AdapterConfig> builtin_adapters() {
  return {
      {"gpt-4o-mini", "https://api.openai.com/v1/chat/completions", "gpt-4o-mini-2024-07-18",
       "OPENAI_API_KEY", "none (hosted API)", "base64", false},
      {"llava-v1.5-13b", "http://localhost:8000/v1/chat/completions", "llava-v1.5-13b", "",
       "4-bit community quantization", "base64", true},
      {"qwen2.5-vl-7b", "http://localhost:8000/v1/chat/completions", "Qwen2.5-VL-7B-Instruct", "",
       "4-bit bitsandbytes", "base64", true},
      {"smolvlm-2b", "http://localhost:8000/v1/chat/completions", "SmolVLM-Instruct", "",
       "none (full precision)", "base64", true},
  };
}

HttpChatClient::HttpChatClient(AdapterConfig config) : config_(std::move(config)) {}

namespace {

std::string base64(std::string_view bytes) {
  std::string out(4 * ((bytes.size() + 2) / 3), '\0');
  const int written =
      EVP_EncodeBlock(reinterpret_cast<unsigned char*>(out.data()),
                      reinterpret_cast<const unsigned char*>(bytes.data()),
                      static_cast<int>(bytes.size()));
  out.resize(static_cast<std::size_t>(written));
  return out;
}

std::string mime_type(const std::filesystem::path& path) {
  std::string ext = path.extension().string();
  std::transform(ext.begin(), ext.end(), ext.begin(),
                 [](unsigned char c) { return static_cast<char>(std::tolower(c)); });
  if (ext == ".png") return "image/png";
  if (ext == ".gif") return "image/gif";
  if (ext == ".webp") return "image/webp";
  return "image/jpeg";
}

struct Endpoint {
  std::string origin;  // scheme://host[:port]
  std::string path;
};

Endpoint split_endpoint(const std::string& url) {
  const auto scheme_end = url.find("://");
  if (scheme_end == std::string::npos) throw Error(fmt::format("bad endpoint URL: {}", url));
  const auto path_start = url.find('/', scheme_end + 3);
  if (path_start == std::string::npos) return {url, "/"};
  return {url.substr(0, path_start), url.substr(path_start)};
}

}  // namespace

json HttpChatClient::request_body(const VlmRequest& request) const {
  json content = json::array();
  content.push_back({{"type", "text"}, {"text", request.prompt->user}});
  if (!request.post_text.empty()) {
    content.push_back({{"type", "text"}, {"text", request.post_text}});
  }
  if (!request.image_path.empty()) {
    std::string url;
    if (config_.image_mode == "url") {
      url = request.image_path.string();
    } else {
      url = "data:" + mime_type(request.image_path) + ";base64," +
            base64(read_file(request.image_path));
    }
    content.push_back({{"type", "image_url"}, {"image_url", {{"url", url}}}});
  }
  json body = {{"model", config_.model},
               {"temperature", request.settings.temperature},
               {"max_tokens", request.settings.max_new_tokens},
               {"messages",
                json::array({{{"role", "system"}, {"content", request.prompt->system}},
                             {{"role", "user"}, {"content", content}}})}};
  if (config_.send_num_beams) body["num_beams"] = request.settings.num_beams;
  return body;
}

std::string HttpChatClient::complete(const VlmRequest& request) {
  const json body = request_body(request);
  const Endpoint endpoint = split_endpoint(config_.endpoint);
  httplib::Client client(endpoint.origin);
  client.set_connection_timeout(30);
  client.set_read_timeout(300);
  httplib::Headers headers;
  if (!config_.auth_env.empty()) {
    const char* token = std::getenv(config_.auth_env.c_str());
    if (!token) throw TransportError(fmt::format("env var {} is not set", config_.auth_env));
    headers.emplace("Authorization", std::string("Bearer ") + token);
  }
  auto response = client.Post(endpoint.path, headers, body.dump(), "application/json");
  if (!response) {
    throw TransportError(fmt::format("request to {} failed: {}", config_.endpoint,
                                     httplib::to_string(response.error())));
  }
  if (response->status >= 500 || response->status == 429) {
    throw TransportError(fmt::format("backend returned HTTP {}", response->status));
  }
  if (response->status != 200) {
    throw Error(fmt::format("backend returned HTTP {}: {}", response->status, response->body));
  }
  try {
    const json reply = json::parse(response->body);
    return reply.at("choices").at(0).at("message").at("content").get<std::string>();
  } catch (const json::exception& e) {
    throw TransportError(fmt::format("malformed backend reply: {}", e.what()));
  }
}

std::vector<ZeroShotResult> classify_zeroshot(const std::vector<Post>& posts, VlmClient& client,
                                              const VlmSettings& settings,
                                              const ZeroShotOptions& options,
                                              const std::filesystem::path& image_root,
                                              const Taxonomy& taxonomy) {
  const PromptPair prompt = build_prompt(taxonomy);
  std::vector<ZeroShotResult> results(posts.size());
  std::atomic<std::size_t> next{0};

  auto worker = [&] {
    for (std::size_t i = next++; i < posts.size(); i = next++) {
      const Post& post = posts[i];
      VlmRequest request;
      request.prompt = &prompt;
      request.post_id = post.id;
      request.post_text = post.text;
      if (!post.image_path.empty()) request.image_path = image_root / post.image_path;
      request.settings = settings;

      ZeroShotResult& result = results[i];
      result.post_id = post.id;
      for (std::size_t attempt = 0;; ++attempt) {
        try {
          result.raw = client.complete(request);
          result.label = parse_response(result.raw, taxonomy);
          result.error.reset();
          break;
        } catch (const TransportError& e) {
          result.error = e.what();
          if (attempt >= options.max_retries) break;
          ++result.retries;
        } catch (const std::exception& e) {
          result.error = e.what();
          break;
        }
      }
    }
  };

  const std::size_t threads = std::clamp<std::size_t>(options.max_in_flight, 1, posts.size() + 1);
  if (threads <= 1) {
    worker();
  } else {
    std::vector<std::jthread> pool;
    for (std::size_t t = 0; t < threads; ++t) pool.emplace_back(worker);
  }
  return results;
}

void write_response_log(const std::filesystem::path& path,
                        const std::vector<ZeroShotResult>& results, const Taxonomy& taxonomy) {
  std::vector<json> lines;
  lines.reserve(results.size());
  for (const auto& result : results) {
    json line = {{"post_id", result.post_id}, {"raw", result.raw}};
    line["parsed_letter"] =
        result.label ? json(std::string(1, taxonomy.at(*result.label).letter)) : json(nullptr);
    if (result.error) {
      line["error"] = *result.error;
      line["retries"] = result.retries;
    }
    lines.push_back(std::move(line));
  }
  write_jsonl(path, lines);
}

}  // namespace triage
