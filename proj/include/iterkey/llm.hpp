// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <atomic>
#include <cmath>
#include <cstddef>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "iterkey/error.hpp"
#include "iterkey/text.hpp"

namespace iterkey {

enum class Role { system, user };

inline const char* to_string(Role r) noexcept { return r == Role::system ? "system" : "user"; }

struct ChatMessage {
  Role role = Role::user;
  std::string content;

  friend bool operator==(const ChatMessage&, const ChatMessage&) = default;
};

struct GenParams {
  int max_tokens = 50;
  double temperature = 0.0;

  void validate() const {
    if (max_tokens <= 0) throw PreconditionError("max_tokens must be positive");
    if (!(temperature >= 0.0)) throw PreconditionError("temperature must be >= 0");
  }
};

/// One alternative from a next-token probability listing.
struct TokenLogprob {
  std::string token;
  double logprob = 0.0;
};

enum class VerdictMethod { logprob, text_fallback };

inline const char* to_string(VerdictMethod m) noexcept {
  return m == VerdictMethod::logprob ? "logprob" : "text-fallback";
}

struct BinaryVerdict {
  bool choice = false;
  std::optional<double> p_true;
  std::optional<double> p_false;
  VerdictMethod method = VerdictMethod::text_fallback;
  // Set when the output named neither option and False was assumed.
  bool unparsed = false;
  std::string raw;
};

/// Chat-completion endpoint. Implementations must be safe to share across
/// threads.
class LlmBackend {
 public:
  virtual ~LlmBackend() = default;

  /// Free generation. Returns the raw completion text.
  virtual std::string complete(std::span<const ChatMessage> messages, const GenParams& params) = 0;

  /// Probabilities of the next token, or nullopt if this backend cannot
  /// expose them. Backends that return nullopt must not have consumed a
  /// generation.
  virtual std::optional<std::vector<TokenLogprob>> next_token_logprobs(std::span<const ChatMessage> messages,
                                                                       const GenParams& params, int top_n) {
    (void)messages;
    (void)params;
    (void)top_n;
    return std::nullopt;
  }
};

/// Validated free generation; strips trailing whitespace only.
inline std::string complete(LlmBackend& backend, std::span<const ChatMessage> messages, const GenParams& params) {
  if (messages.empty()) throw PreconditionError("complete: messages must be non-empty");
  params.validate();
  return std::string(rtrim(backend.complete(messages, params)));
}

/// Maps the first alphabetic word of `text` to a verdict.
inline BinaryVerdict verdict_from_text(std::string_view text) {
  BinaryVerdict v;
  v.method = VerdictMethod::text_fallback;
  v.raw = std::string(text);
  const auto word = first_alpha_word(text);
  if (word == "true") {
    v.choice = true;
  } else if (word == "false") {
    v.choice = false;
  } else {
    v.choice = false;
    v.unparsed = true;
  }
  return v;
}

/// Picks True/False from next-token alternatives. Matching ignores case and
/// leading whitespace; the best-scoring variant of each option is used and
/// an option missing from the listing gets probability 0. Returns nullopt
/// if neither option appears.
inline std::optional<BinaryVerdict> verdict_from_logprobs(std::span<const TokenLogprob> alternatives) {
  std::optional<double> lp_true, lp_false;
  for (const auto& alt : alternatives) {
    std::string_view tok = alt.token;
    while (!tok.empty() && is_space(tok.front())) tok.remove_prefix(1);
    auto take = [&](std::optional<double>& slot) {
      if (!slot || alt.logprob > *slot) slot = alt.logprob;
    };
    if (iequals(tok, "true")) take(lp_true);
    if (iequals(tok, "false")) take(lp_false);
  }
  if (!lp_true && !lp_false) return std::nullopt;
  BinaryVerdict v;
  v.method = VerdictMethod::logprob;
  v.p_true = lp_true ? std::exp(*lp_true) : 0.0;
  v.p_false = lp_false ? std::exp(*lp_false) : 0.0;
  v.choice = *v.p_true > *v.p_false;
  return v;
}

inline constexpr int kForcedChoiceTopLogprobs = 5;

/// Forced decoding between "True" and "False".
///
/// Probes one output token with its top alternatives and takes the more
/// probable option. When the backend exposes no probabilities, or neither
/// option is among the alternatives, generates up to `params.max_tokens`
/// tokens and reads the first word instead.
inline BinaryVerdict forced_choice(LlmBackend& backend, std::span<const ChatMessage> messages,
                                   const GenParams& params) {
  if (messages.empty()) throw PreconditionError("forced_choice: messages must be non-empty");
  params.validate();
  GenParams probe = params;
  probe.max_tokens = 1;
  if (auto alts = backend.next_token_logprobs(messages, probe, kForcedChoiceTopLogprobs)) {
    if (auto v = verdict_from_logprobs(*alts)) return *v;
  }
  return verdict_from_text(backend.complete(messages, params));
}

/// Decorator counting calls that reach the wrapped backend.
class CountingBackend : public LlmBackend {
 public:
  explicit CountingBackend(LlmBackend& inner) : inner_(inner) {}

  std::string complete(std::span<const ChatMessage> messages, const GenParams& params) override {
    ++completions_;
    return inner_.complete(messages, params);
  }

  std::optional<std::vector<TokenLogprob>> next_token_logprobs(std::span<const ChatMessage> messages,
                                                               const GenParams& params, int top_n) override {
    auto r = inner_.next_token_logprobs(messages, params, top_n);
    if (r) ++probes_;
    return r;
  }

  std::size_t calls() const noexcept { return completions_ + probes_; }
  std::size_t completions() const noexcept { return completions_; }
  std::size_t probes() const noexcept { return probes_; }

 private:
  LlmBackend& inner_;
  std::atomic<std::size_t> completions_{0};
  std::atomic<std::size_t> probes_{0};
};

}  // namespace iterkey
