// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <algorithm>
#include <atomic>
#include <chrono>
#include <optional>
#include <semaphore>
#include <string>
#include <thread>
#include <utility>
#include <vector>

#include <httplib.h>
#include <nlohmann/json.hpp>

#include "iterkey/error.hpp"
#include "iterkey/llm.hpp"
#include "iterkey/text.hpp"

namespace iterkey {

enum class LogprobMode {
  automatic,  // probe once; stop asking if the server omits logprobs
  always,
  never,
};

struct OpenAiConfig {
  // Base URL ("http://127.0.0.1:8000"), optionally with a path. A bare host
  // or one ending in /v1 gets /v1/chat/completions appended.
  std::string endpoint;
  std::string model;
  std::string api_key;
  int max_retries = 3;
  std::chrono::milliseconds initial_backoff{500};
  std::chrono::milliseconds timeout{60000};
  int max_in_flight = 4;
  LogprobMode logprobs = LogprobMode::automatic;
};

/// Splits an endpoint into scheme://host[:port] and request path.
inline std::pair<std::string, std::string> split_endpoint(const std::string& endpoint) {
  const auto scheme = endpoint.find("://");
  if (scheme == std::string::npos) throw PreconditionError("endpoint must include a scheme: " + endpoint);
  const auto slash = endpoint.find('/', scheme + 3);
  std::string host = endpoint.substr(0, slash);
  std::string path = slash == std::string::npos ? "" : endpoint.substr(slash);
  while (!path.empty() && path.back() == '/') path.pop_back();
  constexpr std::string_view kSuffix = "/chat/completions";
  if (path.empty()) {
    path = "/v1/chat/completions";
  } else if (path.size() < kSuffix.size() || path.compare(path.size() - kSuffix.size(), kSuffix.size(), kSuffix) != 0) {
    path += kSuffix;
  }
  return {host, path};
}

inline nlohmann::json chat_request_body(const std::string& model, std::span<const ChatMessage> messages,
                                        const GenParams& params, std::optional<int> top_logprobs) {
  nlohmann::json msgs = nlohmann::json::array();
  for (const auto& m : messages) msgs.push_back({{"role", to_string(m.role)}, {"content", m.content}});
  nlohmann::json body = {
      {"model", model},
      {"messages", std::move(msgs)},
      {"max_tokens", params.max_tokens},
      {"temperature", params.temperature},
  };
  if (top_logprobs) {
    body["logprobs"] = true;
    body["top_logprobs"] = *top_logprobs;
  }
  return body;
}

/// Reads the first token's alternatives from a chat-completions response.
/// Accepts both the chat shape (logprobs.content[0].top_logprobs[]) and the
/// legacy completions shape (logprobs.top_logprobs[0] as a token->logprob map).
inline std::optional<std::vector<TokenLogprob>> parse_top_logprobs(const nlohmann::json& choice) {
  auto lp = choice.find("logprobs");
  if (lp == choice.end() || !lp->is_object()) return std::nullopt;
  std::vector<TokenLogprob> out;
  if (auto content = lp->find("content"); content != lp->end() && content->is_array() && !content->empty()) {
    const auto& first = (*content)[0];
    if (auto top = first.find("top_logprobs"); top != first.end() && top->is_array()) {
      for (const auto& alt : *top) {
        if (alt.contains("token") && alt["token"].is_string() && alt.contains("logprob") && alt["logprob"].is_number()) {
          out.push_back({alt["token"].get<std::string>(), alt["logprob"].get<double>()});
        }
      }
    }
    if (out.empty() && first.contains("token") && first["token"].is_string() && first.contains("logprob") &&
        first["logprob"].is_number()) {
      out.push_back({first["token"].get<std::string>(), first["logprob"].get<double>()});
    }
  } else if (auto top = lp->find("top_logprobs"); top != lp->end() && top->is_array() && !top->empty() &&
                                                  (*top)[0].is_object()) {
    for (const auto& [tok, val] : (*top)[0].items()) {
      if (val.is_number()) out.push_back({tok, val.get<double>()});
    }
  }
  if (out.empty()) return std::nullopt;
  return out;
}

/// Client for OpenAI-compatible /chat/completions servers.
///
/// Retries transport failures, timeouts and 5xx up to `max_retries` times
/// with doubling backoff; any 2xx response is final. At most
/// `max_in_flight` requests run concurrently.
class OpenAiClient : public LlmBackend {
 public:
  explicit OpenAiClient(OpenAiConfig config)
      : config_(std::move(config)), slots_(std::max(1, config_.max_in_flight)) {
    auto [host, path] = split_endpoint(config_.endpoint);
    host_ = std::move(host);
    path_ = std::move(path);
    if (host_.rfind("http://", 0) != 0) {
      throw PreconditionError("unsupported endpoint scheme (only http:// is supported): " + config_.endpoint);
    }
    if (config_.max_retries < 0) throw PreconditionError("max_retries must be >= 0");
  }

  const OpenAiConfig& config() const noexcept { return config_; }
  const std::string& path() const noexcept { return path_; }
  std::size_t requests_sent() const noexcept { return requests_sent_; }
  bool logprobs_supported() const noexcept { return !logprobs_unsupported_; }

  std::string complete(std::span<const ChatMessage> messages, const GenParams& params) override {
    const auto resp = post(chat_request_body(config_.model, messages, params, std::nullopt));
    return message_content(first_choice(resp));
  }

  std::optional<std::vector<TokenLogprob>> next_token_logprobs(std::span<const ChatMessage> messages,
                                                               const GenParams& params, int top_n) override {
    if (config_.logprobs == LogprobMode::never) return std::nullopt;
    if (config_.logprobs == LogprobMode::automatic && logprobs_unsupported_) return std::nullopt;
    const auto resp = post(chat_request_body(config_.model, messages, params, top_n));
    auto alts = parse_top_logprobs(first_choice(resp));
    if (!alts && config_.logprobs == LogprobMode::automatic) logprobs_unsupported_ = true;
    return alts;
  }

 private:
  static const nlohmann::json& first_choice(const nlohmann::json& resp) {
    auto it = resp.find("choices");
    if (it == resp.end() || !it->is_array() || it->empty() || !(*it)[0].is_object()) {
      throw BackendError("response has no choices[0]", false);
    }
    return (*it)[0];
  }

  static std::string message_content(const nlohmann::json& choice) {
    if (auto m = choice.find("message"); m != choice.end() && m->is_object()) {
      auto c = m->find("content");
      if (c != m->end() && c->is_string()) return c->get<std::string>();
      if (c != m->end() && c->is_null()) return {};
    }
    if (auto t = choice.find("text"); t != choice.end() && t->is_string()) return t->get<std::string>();
    throw BackendError("response choice has no message content", false);
  }

  struct SlotGuard {
    std::counting_semaphore<>& s;
    explicit SlotGuard(std::counting_semaphore<>& sem) : s(sem) { s.acquire(); }
    ~SlotGuard() { s.release(); }
  };

  nlohmann::json post(const nlohmann::json& body) {
    const std::string payload = body.dump();
    auto backoff = config_.initial_backoff;
    for (int attempt = 0;; ++attempt) {
      try {
        return post_once(payload);
      } catch (const BackendError& e) {
        if (!e.retryable() || attempt >= config_.max_retries) throw;
      }
      std::this_thread::sleep_for(backoff);
      backoff *= 2;
    }
  }

  nlohmann::json post_once(const std::string& payload) {
    SlotGuard guard(slots_);
    httplib::Client cli(host_);
    const auto secs = std::chrono::duration_cast<std::chrono::seconds>(config_.timeout);
    const auto usecs = std::chrono::duration_cast<std::chrono::microseconds>(config_.timeout - secs);
    cli.set_connection_timeout(secs.count(), usecs.count());
    cli.set_read_timeout(secs.count(), usecs.count());
    cli.set_write_timeout(secs.count(), usecs.count());
    httplib::Headers headers;
    if (!config_.api_key.empty()) headers.emplace("Authorization", "Bearer " + config_.api_key);
    ++requests_sent_;
    auto res = cli.Post(path_, headers, payload, "application/json");
    if (!res) throw TransportError("transport error contacting " + host_ + path_ + ": " + httplib::to_string(res.error()));
    if (res->status < 200 || res->status >= 300) throw HttpStatusError(res->status, excerpt(res->body, 200));
    try {
      return nlohmann::json::parse(res->body);
    } catch (const nlohmann::json::parse_error& e) {
      throw BackendError(std::string("unparseable response body: ") + e.what(), false);
    }
  }

  OpenAiConfig config_;
  std::string host_;
  std::string path_;
  std::counting_semaphore<> slots_;
  std::atomic<std::size_t> requests_sent_{0};
  std::atomic<bool> logprobs_unsupported_{false};
};

}  // namespace iterkey
