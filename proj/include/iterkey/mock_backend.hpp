// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cmath>
#include <fstream>
#include <limits>
#include <mutex>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include <nlohmann/json.hpp>

#include "iterkey/error.hpp"
#include "iterkey/llm.hpp"
#include "iterkey/text.hpp"

namespace iterkey {

/// One scripted reply. `match` is a substring of the user message; an empty
/// match accepts any prompt. When `p_true`/`p_false` are present the entry
/// answers probability probes.
struct ScriptEntry {
  std::string match;
  std::string response;
  std::optional<double> p_true;
  std::optional<double> p_false;

  bool has_probabilities() const noexcept { return p_true.has_value() || p_false.has_value(); }
};

/// Deterministic scripted backend: each call consumes the first unconsumed
/// entry whose matcher occurs in the rendered user message.
class MockBackend : public LlmBackend {
 public:
  struct Call {
    std::string user_message;
    bool probe = false;
    std::size_t entry = 0;
  };

  MockBackend() = default;
  explicit MockBackend(std::vector<ScriptEntry> script)
      : script_(std::move(script)), consumed_(script_.size(), false) {}

  std::string complete(std::span<const ChatMessage> messages, const GenParams&) override {
    std::lock_guard lock(mu_);
    const auto user = user_text(messages);
    const auto i = find(user);
    consume(i, user, false);
    return script_[i].response;
  }

  std::optional<std::vector<TokenLogprob>> next_token_logprobs(std::span<const ChatMessage> messages,
                                                               const GenParams&, int) override {
    std::lock_guard lock(mu_);
    const auto user = user_text(messages);
    const auto i = find(user);
    const auto& e = script_[i];
    if (!e.has_probabilities()) return std::nullopt;
    consume(i, user, true);
    std::vector<TokenLogprob> alts;
    auto push = [&](const char* tok, const std::optional<double>& p) {
      if (p && *p > 0.0) alts.push_back(TokenLogprob{tok, std::log(*p)});
    };
    push("True", e.p_true);
    push("False", e.p_false);
    return alts;
  }

  std::size_t calls() const {
    std::lock_guard lock(mu_);
    return log_.size();
  }

  std::vector<Call> call_log() const {
    std::lock_guard lock(mu_);
    return log_;
  }

  std::size_t remaining() const {
    std::lock_guard lock(mu_);
    std::size_t n = 0;
    for (bool c : consumed_) n += c ? 0 : 1;
    return n;
  }

 private:
  static std::string user_text(std::span<const ChatMessage> messages) {
    for (auto it = messages.rbegin(); it != messages.rend(); ++it) {
      if (it->role == Role::user) return it->content;
    }
    return {};
  }

  std::size_t find(const std::string& user) const {
    bool any_left = false;
    for (std::size_t i = 0; i < script_.size(); ++i) {
      if (consumed_[i]) continue;
      any_left = true;
      if (user.find(script_[i].match) != std::string::npos) return i;
    }
    if (!any_left) throw MockScriptError("mock script exhausted at prompt: " + excerpt(user, 80));
    throw MockScriptError("no mock script entry matches prompt: " + excerpt(user, 80));
  }

  void consume(std::size_t i, const std::string& user, bool probe) {
    consumed_[i] = true;
    log_.push_back(Call{user, probe, i});
  }

  mutable std::mutex mu_;
  std::vector<ScriptEntry> script_;
  std::vector<bool> consumed_;
  std::vector<Call> log_;
};

/// Parses a mock script: one JSON object per line with `match`,
/// `response` and optional `p_true`/`p_false`.
inline std::vector<ScriptEntry> parse_mock_script(std::istream& in, const std::string& name = "<script>") {
  std::vector<ScriptEntry> out;
  std::string line;
  std::size_t no = 0;
  while (std::getline(in, line)) {
    ++no;
    if (trim(line).empty()) continue;
    const auto where = name + ":" + std::to_string(no) + ": ";
    nlohmann::json j;
    try {
      j = nlohmann::json::parse(line);
    } catch (const nlohmann::json::parse_error& e) {
      throw ParseError(where + "malformed JSON: " + e.what());
    }
    if (!j.is_object() || !j.contains("response") || !j["response"].is_string() ||
        (j.contains("match") && !j["match"].is_string())) {
      throw ParseError(where + "entry needs a string 'response' and an optional string 'match'");
    }
    ScriptEntry e{j.value("match", std::string{}), j["response"].get<std::string>(), std::nullopt, std::nullopt};
    for (auto [key, slot] : {std::pair{"p_true", &e.p_true}, std::pair{"p_false", &e.p_false}}) {
      if (!j.contains(key) || j[key].is_null()) continue;
      if (!j[key].is_number()) throw ParseError(where + key + " must be a number");
      const double p = j[key].get<double>();
      if (!(p >= 0.0 && p <= 1.0)) throw ParseError(where + key + " must lie in [0, 1]");
      *slot = p;
    }
    out.push_back(std::move(e));
  }
  return out;
}

inline std::vector<ScriptEntry> load_mock_script(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw Error("cannot open mock script: " + path);
  return parse_mock_script(in, path);
}

}  // namespace iterkey
