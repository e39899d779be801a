// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <algorithm>
#include <cstddef>
#include <fstream>
#include <optional>
#include <string>
#include <string_view>
#include <unordered_set>
#include <utility>
#include <vector>

#include <nlohmann/json.hpp>

#include "iterkey/error.hpp"
#include "iterkey/text.hpp"
#include "iterkey/tokenizer.hpp"

namespace iterkey {

struct Document {
  std::string id;
  std::string title;
  std::string text;
};

/// Contiguous window of a document's tokens. `token_begin`/`token_end`
/// index the document's token sequence; `text` is the original source
/// slice covering those tokens.
struct Chunk {
  std::string chunk_id;
  std::string doc_id;
  std::size_t ordinal = 0;
  std::size_t token_begin = 0;
  std::size_t token_end = 0;
  std::string title;
  std::string text;

  friend bool operator==(const Chunk&, const Chunk&) = default;
};

struct QaExample {
  std::string question;
  std::vector<std::string> answers;
};

inline std::string make_chunk_id(std::string_view doc_id, std::size_t ordinal) {
  std::string id(doc_id);
  id += '#';
  id += std::to_string(ordinal);
  return id;
}

namespace detail {

inline std::string line_error(const std::string& path, std::size_t line, const std::string& what) {
  return path + ":" + std::to_string(line) + ": " + what;
}

inline const std::string& require_string(const nlohmann::json& obj, const char* key,
                                         const std::string& path, std::size_t line) {
  auto it = obj.find(key);
  if (it == obj.end() || !it->is_string()) {
    throw CorpusError(line_error(path, line, std::string("missing or non-string field '") + key + "'"));
  }
  return it->get_ref<const std::string&>();
}

}  // namespace detail

/// Streams documents from a JSON-lines corpus file.
///
/// Blank lines are skipped. Every non-blank line must be an object with
/// string fields `id`, `title` and `text`; ids must be unique and text
/// must be non-blank. Errors carry the 1-based line number.
class CorpusReader {
 public:
  explicit CorpusReader(std::string path, std::optional<std::size_t> limit = std::nullopt)
      : path_(std::move(path)), in_(path_), limit_(limit) {
    if (!in_) throw CorpusError("cannot open corpus file: " + path_);
  }

  std::optional<Document> next() {
    if (limit_ && yielded_ >= *limit_) return std::nullopt;
    std::string line;
    while (std::getline(in_, line)) {
      ++line_no_;
      if (trim(line).empty()) continue;
      nlohmann::json obj;
      try {
        obj = nlohmann::json::parse(line);
      } catch (const nlohmann::json::parse_error& e) {
        throw CorpusError(detail::line_error(path_, line_no_, std::string("malformed JSON: ") + e.what()));
      }
      if (!obj.is_object()) throw CorpusError(detail::line_error(path_, line_no_, "record is not an object"));
      Document doc{detail::require_string(obj, "id", path_, line_no_),
                   detail::require_string(obj, "title", path_, line_no_),
                   detail::require_string(obj, "text", path_, line_no_)};
      if (doc.id.empty()) throw CorpusError(detail::line_error(path_, line_no_, "empty id"));
      if (trim(doc.text).empty()) {
        throw CorpusError(detail::line_error(path_, line_no_, "empty text for id '" + doc.id + "'"));
      }
      if (!seen_.insert(doc.id).second) {
        throw CorpusError(detail::line_error(path_, line_no_, "duplicate id '" + doc.id + "'"));
      }
      ++yielded_;
      return doc;
    }
    return std::nullopt;
  }

  std::size_t line() const noexcept { return line_no_; }

 private:
  std::string path_;
  std::ifstream in_;
  std::optional<std::size_t> limit_;
  std::size_t line_no_ = 0;
  std::size_t yielded_ = 0;
  std::unordered_set<std::string> seen_;
};

inline std::vector<Document> load_corpus(const std::string& path,
                                         std::optional<std::size_t> limit = std::nullopt) {
  CorpusReader reader(path, limit);
  std::vector<Document> docs;
  while (auto d = reader.next()) docs.push_back(std::move(*d));
  return docs;
}

inline std::vector<QaExample> load_qa_dataset(const std::string& path,
                                              std::optional<std::size_t> limit = std::nullopt) {
  std::ifstream in(path);
  if (!in) throw CorpusError("cannot open dataset file: " + path);
  std::vector<QaExample> out;
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (trim(line).empty()) continue;
    if (limit && out.size() >= *limit) break;
    nlohmann::json obj;
    try {
      obj = nlohmann::json::parse(line);
    } catch (const nlohmann::json::parse_error& e) {
      throw CorpusError(detail::line_error(path, line_no, std::string("malformed JSON: ") + e.what()));
    }
    if (!obj.is_object()) throw CorpusError(detail::line_error(path, line_no, "record is not an object"));
    QaExample ex;
    ex.question = detail::require_string(obj, "question", path, line_no);
    auto it = obj.find("answers");
    if (it == obj.end() || !it->is_array() || it->empty()) {
      throw CorpusError(detail::line_error(path, line_no, "'answers' must be a non-empty array"));
    }
    for (const auto& a : *it) {
      if (!a.is_string()) throw CorpusError(detail::line_error(path, line_no, "non-string answer"));
      ex.answers.push_back(a.get<std::string>());
    }
    out.push_back(std::move(ex));
  }
  return out;
}

/// Token windows [begin, end) for a document of `n_tokens` tokens.
///
/// Windows start every `chunk_size - overlap` tokens; the last one ends at
/// `n_tokens` and may be shorter. Zero tokens yields no windows.
inline std::vector<std::pair<std::size_t, std::size_t>> chunk_spans(std::size_t n_tokens,
                                                                    std::size_t chunk_size,
                                                                    std::size_t overlap) {
  if (chunk_size == 0) throw PreconditionError("chunk_size must be positive");
  if (overlap >= chunk_size) {
    throw PreconditionError("overlap (" + std::to_string(overlap) + ") must be smaller than chunk_size (" +
                            std::to_string(chunk_size) + ")");
  }
  std::vector<std::pair<std::size_t, std::size_t>> spans;
  const std::size_t stride = chunk_size - overlap;
  for (std::size_t start = 0; start < n_tokens; start += stride) {
    const std::size_t end = std::min(start + chunk_size, n_tokens);
    spans.emplace_back(start, end);
    if (end == n_tokens) break;
  }
  return spans;
}

inline std::vector<Chunk> chunk_document(const Document& doc, std::size_t chunk_size, std::size_t overlap,
                                         const Tokenizer& tokenizer = Tokenizer{}) {
  const auto tokens = tokenizer.tokenize_spans(doc.text);
  const auto spans = chunk_spans(tokens.size(), chunk_size, overlap);
  std::vector<Chunk> chunks;
  chunks.reserve(spans.size());
  for (std::size_t i = 0; i < spans.size(); ++i) {
    const auto [b, e] = spans[i];
    const std::size_t byte_begin = tokens[b].begin;
    const std::size_t byte_end = tokens[e - 1].end;
    chunks.push_back(Chunk{make_chunk_id(doc.id, i), doc.id, i, b, e, doc.title,
                           doc.text.substr(byte_begin, byte_end - byte_begin)});
  }
  return chunks;
}

}  // namespace iterkey
