// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstddef>
#include <string>
#include <string_view>
#include <unordered_set>
#include <utility>
#include <vector>

namespace iterkey {

/// A token plus the byte range it was cut from.
struct TokenSpan {
  std::string text;
  std::size_t begin = 0;
  std::size_t end = 0;
};

/// Lowercasing tokenizer that splits on every non-alphanumeric byte.
///
/// Bytes >= 0x80 are kept as token characters so UTF-8 words survive
/// intact; only ASCII is case-folded. An optional stopword set filters
/// tokens after folding. Stemming is off unless enabled and is a
/// plural-only suffix stripper, applied after the stopword check.
class Tokenizer {
 public:
  Tokenizer() = default;
  explicit Tokenizer(std::unordered_set<std::string> stopwords, bool stem = false)
      : stopwords_(std::move(stopwords)), stem_(stem) {}

  const std::unordered_set<std::string>& stopwords() const noexcept { return stopwords_; }
  bool stem() const noexcept { return stem_; }

  std::vector<std::string> tokenize(std::string_view text) const {
    std::vector<std::string> out;
    scan(text, [&](std::string&& tok, std::size_t, std::size_t) { out.push_back(std::move(tok)); });
    return out;
  }

  std::vector<TokenSpan> tokenize_spans(std::string_view text) const {
    std::vector<TokenSpan> out;
    scan(text, [&](std::string&& tok, std::size_t b, std::size_t e) {
      out.push_back(TokenSpan{std::move(tok), b, e});
    });
    return out;
  }

  static bool is_token_byte(unsigned char c) noexcept {
    return (c >= '0' && c <= '9') || (c >= 'a' && c <= 'z') || (c >= 'A' && c <= 'Z') || c >= 0x80;
  }

 private:
  template <typename Sink>
  void scan(std::string_view text, Sink&& sink) const {
    std::size_t i = 0;
    const std::size_t n = text.size();
    while (i < n) {
      while (i < n && !is_token_byte(static_cast<unsigned char>(text[i]))) ++i;
      if (i >= n) break;
      const std::size_t start = i;
      std::string tok;
      while (i < n && is_token_byte(static_cast<unsigned char>(text[i]))) {
        char c = text[i];
        if (c >= 'A' && c <= 'Z') c = static_cast<char>(c - 'A' + 'a');
        tok.push_back(c);
        ++i;
      }
      if (!stopwords_.empty() && stopwords_.count(tok)) continue;
      if (stem_) strip_plural(tok);
      sink(std::move(tok), start, i);
    }
  }

  // Harman's S-stemmer.
  static void strip_plural(std::string& w) {
    auto ends = [&](std::string_view s) {
      return w.size() >= s.size() && std::string_view(w).substr(w.size() - s.size()) == s;
    };
    if (w.size() > 3 && ends("ies") && !ends("eies") && !ends("aies")) {
      w.replace(w.size() - 3, 3, "y");
    } else if (w.size() > 2 && ends("es") && !ends("aes") && !ends("ees") && !ends("oes")) {
      w.pop_back();
    } else if (w.size() > 1 && ends("s") && !ends("us") && !ends("ss")) {
      w.pop_back();
    }
  }

  std::unordered_set<std::string> stopwords_;
  bool stem_ = false;
};

/// A conventional English stopword list, for opting in via config.
inline std::unordered_set<std::string> english_stopwords() {
  return {"a",    "an",   "and",  "are",  "as",   "at",    "be",   "but",  "by",
          "for",  "if",   "in",   "into", "is",   "it",    "no",   "not",  "of",
          "on",   "or",   "such", "that", "the",  "their", "then", "there", "these",
          "they", "this", "to",   "was",  "will", "with",  "what", "which", "who"};
}

}  // namespace iterkey
