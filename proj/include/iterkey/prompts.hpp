// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <algorithm>
#include <array>
#include <initializer_list>
#include <filesystem>
#include <fstream>
#include <map>
#include <optional>
#include <span>
#include <sstream>
#include <string>
#include <string_view>
#include <unordered_set>
#include <utility>
#include <vector>

#include <nlohmann/json.hpp>

#include "iterkey/error.hpp"
#include "iterkey/llm.hpp"
#include "iterkey/text.hpp"

namespace iterkey {

enum class TemplateId {
  step1_keywords,
  step2_answer,
  step3_validate,
  step4_regen,
  step4_regen_docwise,
  step3_validate_cot,
  step4_regen_cot,
  vanilla_answer,
};

inline constexpr std::array kAllTemplates = {
    TemplateId::step1_keywords,      TemplateId::step2_answer,       TemplateId::step3_validate,
    TemplateId::step4_regen,         TemplateId::step4_regen_docwise, TemplateId::step3_validate_cot,
    TemplateId::step4_regen_cot,     TemplateId::vanilla_answer,
};

inline const char* to_string(TemplateId id) noexcept {
  switch (id) {
    case TemplateId::step1_keywords: return "step1_keywords";
    case TemplateId::step2_answer: return "step2_answer";
    case TemplateId::step3_validate: return "step3_validate";
    case TemplateId::step4_regen: return "step4_regen";
    case TemplateId::step4_regen_docwise: return "step4_regen_docwise";
    case TemplateId::step3_validate_cot: return "step3_validate_cot";
    case TemplateId::step4_regen_cot: return "step4_regen_cot";
    case TemplateId::vanilla_answer: return "vanilla_answer";
  }
  return "?";
}

/// Placeholders each template must be rendered with.
inline std::vector<std::string> template_bindings(TemplateId id) {
  switch (id) {
    case TemplateId::step1_keywords: return {"q"};
    case TemplateId::step2_answer: return {"q", "D"};
    case TemplateId::step3_validate: return {"q", "a", "Docs"};
    case TemplateId::step4_regen: return {"q", "K"};
    case TemplateId::step4_regen_docwise: return {"q", "K", "Docs"};
    case TemplateId::step3_validate_cot: return {"q", "a", "Docs"};
    case TemplateId::step4_regen_cot: return {"q", "K"};
    case TemplateId::vanilla_answer: return {"q"};
  }
  return {};
}

struct PromptTemplate {
  TemplateId id = TemplateId::step1_keywords;
  std::string system;
  std::string user;
};

using Bindings = std::map<std::string, std::string, std::less<>>;

namespace detail {

inline bool is_placeholder_name(std::string_view s) {
  return s == "q" || s == "K" || s == "D" || s == "a" || s == "Docs";
}

// Calls `on_text(view)` for literal runs and `on_slot(name)` for {name}
// placeholders. Braces that do not enclose a known name are literal.
template <typename OnText, typename OnSlot>
void scan_template(std::string_view text, OnText&& on_text, OnSlot&& on_slot) {
  std::size_t i = 0;
  std::size_t lit = 0;
  while (i < text.size()) {
    if (text[i] == '{') {
      const auto close = text.find('}', i + 1);
      if (close != std::string_view::npos) {
        const auto name = text.substr(i + 1, close - i - 1);
        if (is_placeholder_name(name)) {
          on_text(text.substr(lit, i - lit));
          on_slot(name);
          i = close + 1;
          lit = i;
          continue;
        }
      }
    }
    ++i;
  }
  on_text(text.substr(lit));
}

}  // namespace detail

inline std::vector<std::string> placeholders_in(std::string_view text) {
  std::vector<std::string> out;
  detail::scan_template(text, [](std::string_view) {}, [&](std::string_view n) { out.emplace_back(n); });
  return out;
}

/// Throws unless every placeholder in the template is declared for its id.
inline void validate_template(const PromptTemplate& t) {
  const auto declared = template_bindings(t.id);
  for (const auto* part : {&t.system, &t.user}) {
    for (const auto& p : placeholders_in(*part)) {
      if (std::find(declared.begin(), declared.end(), p) == declared.end()) {
        throw PreconditionError(std::string("template ") + to_string(t.id) + " uses undeclared placeholder " + p);
      }
    }
  }
}

// Built-in prompt wording. Changing any of these strings changes the method;
// the golden tests pin them.
inline PromptTemplate builtin_template(TemplateId id) {
  switch (id) {
    case TemplateId::step1_keywords:
      return {id, "You are an assistant that generates keywords for information retrieval.",
              "Generate a list of important keywords related to the Query: {q}.\n\n"
              "Focus on keywords that are relevant and likely to appear in documents for BM25 search in the RAG "
              "framework.\n\n"
              "Output the keywords as: [\"keyword1\", \"keyword2\", \"keyword3\", ...].\n\n"
              "Separate each keyword with a comma and do not include any additional text."};
    case TemplateId::step2_answer:
      return {id, "You are an assistant that generates answers based on retrieved documents.",
              "Here is a question that you need to answer:\n"
              "Query: {q}\n\n"
              "Below are some documents that may contain information relevant to the question. Consider the "
              "information in these documents while combining it with your own knowledge to answer the question "
              "accurately.\n\n"
              "Documents: {D}\n\n"
              "Provide a clear and concise answer. Do not include any additional text."};
    case TemplateId::step3_validate:
      return {id, "You are an assistant that validates whether the provided answer is correct.",
              "Is the following answer correct?\n\n"
              "Query: {q}\n\n"
              "Answer: {a}\n\n"
              "Previous Retrieval Documents: {Docs}\n\n"
              "Respond 'True' or 'False'. Do not provide any additional explanation or text."};
    case TemplateId::step4_regen:
      return {id, "You refine keywords to improve document retrieval for BM25 search in the RAG framework.",
              "Refine the keyword selection process to improve the accuracy of retrieving documents with the "
              "correct answer.\n\n"
              "Query: {q}\n\n"
              "Previous Keywords: {K}\n\n"
              "Provide the refined list of keywords in this format: [\"keyword1\", \"keyword2\", ...].\n\n"
              "Separate each keyword with a comma and do not include any additional text."};
    case TemplateId::step4_regen_docwise:
      return {id,
              "Refine the provided keywords to enhance document retrieval accuracy for BM25 search in the RAG "
              "framework.",
              "Please refine the keyword selection process to improve the accuracy of retrieving documents "
              "containing the correct answer.\n\n"
              "Query: {q}\n\n"
              "Previous Keywords: {K}\n\n"
              "Previous Retrieval Documents: {Docs}\n\n"
              "Provide the refined list of keywords in this format: [\"keyword1\", \"keyword2\", ...].\n\n"
              "Ensure each keyword is separated by a comma, and do not include any additional text."};
    case TemplateId::step3_validate_cot:
      return {id, "You are an assistant that verifies whether an answer is correct based on retrieved documents.",
              "Question: {q}\n"
              "Answer: {a}\n"
              "Documents: {Docs}\n"
              "Let's think step by step.\n"
              "Chain of thought: (Explain your reasoning step by step. Refer to the documents when relevant.)\n"
              "Conclusion: True or False\n"
              "Do not output anything besides the above format."};
    case TemplateId::step4_regen_cot:
      return {id, "You refine keywords to improve document retrieval for BM25 search in the RAG framework.",
              "The previous keywords failed to retrieve useful documents for the query: {q}\n"
              "Here are the previous keywords: {K}\n"
              "Let's think step by step. Check if they are too general, too specific, or missing important "
              "concepts.\n"
              "Then, refine them to produce a more effective list of keywords for retrieving documents that "
              "contain the correct answer.\n"
              "Output the keywords in the exact format: [\"kw1\", \"kw2\", ...]\n"
              "Refined Keywords:"};
    case TemplateId::vanilla_answer:
      return {id, "You are an assistant that generates answers based on retrieved documents.",
              "Here is a question that you need to answer:\n"
              "Query: {q}\n\n"
              "Provide a clear and concise answer. Do not include any additional text."};
  }
  throw PreconditionError("unknown template id");
}

/// Substitutes `bindings` into `t`. Bindings must cover the template id's
/// placeholder set exactly.
inline std::vector<ChatMessage> render(const PromptTemplate& t, const Bindings& bindings) {
  const auto declared = template_bindings(t.id);
  for (const auto& name : declared) {
    if (!bindings.count(name)) throw PreconditionError("unbound placeholder " + name);
  }
  for (const auto& [name, value] : bindings) {
    if (std::find(declared.begin(), declared.end(), name) == declared.end()) {
      throw PreconditionError("unexpected binding " + name + " for template " + to_string(t.id));
    }
  }
  auto fill = [&](const std::string& text) {
    std::string out;
    detail::scan_template(
        text, [&](std::string_view lit) { out.append(lit); },
        [&](std::string_view name) {
          auto it = bindings.find(name);
          if (it == bindings.end()) throw PreconditionError("unbound placeholder " + std::string(name));
          out += it->second;
        });
    return out;
  };
  return {ChatMessage{Role::system, fill(t.system)}, ChatMessage{Role::user, fill(t.user)}};
}

/// Template set used by the pipeline; starts from the built-ins and can be
/// overridden per id from a directory.
class TemplateSet {
 public:
  TemplateSet() {
    for (auto id : kAllTemplates) templates_.emplace(id, builtin_template(id));
  }

  const PromptTemplate& get(TemplateId id) const { return templates_.at(id); }

  void set(PromptTemplate t) {
    validate_template(t);
    templates_[t.id] = std::move(t);
  }

  std::vector<ChatMessage> render(TemplateId id, const Bindings& b) const { return iterkey::render(get(id), b); }

  /// Loads `<dir>/<template_id>.txt` files. Each file holds the system text,
  /// a line consisting of `---`, then the user text. Ids without a file keep
  /// their current template.
  void load_dir(const std::filesystem::path& dir) {
    if (!std::filesystem::is_directory(dir)) throw PreconditionError("not a directory: " + dir.string());
    for (auto id : kAllTemplates) {
      const auto path = dir / (std::string(to_string(id)) + ".txt");
      if (!std::filesystem::exists(path)) continue;
      std::ifstream in(path);
      std::ostringstream ss;
      ss << in.rdbuf();
      std::string content = ss.str();
      const auto sep = content.find("\n---\n");
      if (sep == std::string::npos) throw PreconditionError(path.string() + ": missing '---' separator line");
      PromptTemplate t{id, content.substr(0, sep), std::string(rtrim(std::string_view(content).substr(sep + 5)))};
      set(std::move(t));
    }
  }

  bool operator==(const TemplateSet& o) const {
    for (auto id : kAllTemplates) {
      const auto& a = get(id);
      const auto& b = o.get(id);
      if (a.system != b.system || a.user != b.user) return false;
    }
    return true;
  }

 private:
  std::map<TemplateId, PromptTemplate> templates_;
};

// ---------------------------------------------------------------------------
// Keyword lists
// ---------------------------------------------------------------------------

/// Ordered keyword list, deduplicated case-insensitively (first spelling wins).
class KeywordSet {
 public:
  KeywordSet() = default;
  KeywordSet(std::initializer_list<std::string> kws) {
    for (const auto& k : kws) add(k);
  }

  /// Adds a cleaned keyword; returns false for blanks and duplicates.
  bool add(std::string_view raw) {
    std::string k;
    for (char c : trim(raw)) {
      if (c != '"') k.push_back(c);
    }
    const auto clean = trim(k);
    if (clean.empty()) return false;
    auto key = ascii_lower(clean);
    if (!seen_.insert(key).second) return false;
    items_.emplace_back(clean);
    return true;
  }

  bool contains(std::string_view kw) const { return seen_.count(ascii_lower(trim(kw))) > 0; }
  const std::vector<std::string>& items() const noexcept { return items_; }
  std::size_t size() const noexcept { return items_.size(); }
  bool empty() const noexcept { return items_.empty(); }
  auto begin() const noexcept { return items_.begin(); }
  auto end() const noexcept { return items_.end(); }

  friend bool operator==(const KeywordSet& a, const KeywordSet& b) { return a.items_ == b.items_; }

 private:
  std::vector<std::string> items_;
  std::unordered_set<std::string> seen_;
};

/// `["kw1", "kw2"]`, the list shape the prompts ask the model for. Each
/// keyword is a JSON string literal, so the output re-parses exactly.
inline std::string format_keywords(const KeywordSet& k) {
  std::string out = "[";
  bool first = true;
  for (const auto& kw : k) {
    if (!first) out += ", ";
    first = false;
    out += nlohmann::json(kw).dump();
  }
  out += ']';
  return out;
}

struct DocView {
  std::string_view title;
  std::string_view text;
};

/// Rank-ordered documents as "Document i: <title>" followed by the text,
/// separated by blank lines. Empty input renders as an empty string.
inline std::string format_documents(std::span<const DocView> docs) {
  std::string out;
  for (std::size_t i = 0; i < docs.size(); ++i) {
    if (i) out += "\n\n";
    out += "Document " + std::to_string(i + 1) + ":";
    if (!docs[i].title.empty()) {
      out += ' ';
      out += docs[i].title;
    }
    out += '\n';
    out += docs[i].text;
  }
  return out;
}

namespace detail {

// Index of the ']' closing the '[' at `open`, honouring quoted strings.
inline std::optional<std::size_t> matching_bracket(std::string_view s, std::size_t open) {
  int depth = 0;
  bool in_str = false;
  for (std::size_t i = open; i < s.size(); ++i) {
    const char c = s[i];
    if (in_str) {
      if (c == '\\') {
        ++i;
      } else if (c == '"') {
        in_str = false;
      }
      continue;
    }
    if (c == '"') {
      in_str = true;
    } else if (c == '[') {
      ++depth;
    } else if (c == ']') {
      if (--depth == 0) return i;
    }
  }
  return std::nullopt;
}

inline std::string strip_code_fences(std::string_view s) {
  std::string out;
  std::istringstream in{std::string(s)};
  std::string line;
  bool first = true;
  while (std::getline(in, line)) {
    if (trim(line).substr(0, 3) == "```") continue;
    if (!first) out += '\n';
    out += line;
    first = false;
  }
  return out;
}

}  // namespace detail

/// Extracts keywords from model output.
///
/// First tries the first balanced `[...]` span as a JSON array. Otherwise
/// (or if that yields nothing) strips code fences and brackets and splits on
/// commas and newlines, trimming quotes and whitespace from each piece.
inline KeywordSet parse_keyword_list(std::string_view text) {
  KeywordSet out;
  if (const auto open = text.find('['); open != std::string_view::npos) {
    if (const auto close = detail::matching_bracket(text, open)) {
      const auto span = text.substr(open, *close - open + 1);
      const auto j = nlohmann::json::parse(span, nullptr, false);
      if (!j.is_discarded() && j.is_array()) {
        for (const auto& el : j) {
          if (el.is_string()) {
            out.add(el.get<std::string>());
          } else if (el.is_number()) {
            out.add(el.dump());
          }
        }
      }
    }
  }
  if (!out.empty()) return out;

  std::string body = detail::strip_code_fences(text);
  std::string piece;
  auto flush = [&] {
    std::string_view p = trim(piece);
    while (!p.empty() && (p.front() == '"' || p.front() == '\'' || p.front() == '`')) p.remove_prefix(1);
    while (!p.empty() && (p.back() == '"' || p.back() == '\'' || p.back() == '`')) p.remove_suffix(1);
    out.add(p);
    piece.clear();
  };
  for (char c : body) {
    if (c == '[' || c == ']') continue;
    if (c == ',' || c == '\n') {
      flush();
    } else {
      piece.push_back(c);
    }
  }
  flush();
  if (out.empty()) throw ParseError("no keywords found in model output: " + excerpt(text, 80));
  return out;
}

/// Reads a chain-of-thought validation: the word after the last
/// "Conclusion:" decides (at a line start or inline after the reasoning).
/// Without a usable conclusion, the first word of the whole text is used as
/// in plain validation.
inline BinaryVerdict parse_cot_verdict(std::string_view text) {
  const std::string lower = ascii_lower(text);
  constexpr std::string_view kTag = "conclusion:";
  if (const auto at = lower.rfind(kTag); at != std::string::npos) {
    const auto word = first_alpha_word(std::string_view(text).substr(at + kTag.size()));
    if (word == "true" || word == "false") {
      BinaryVerdict v = verdict_from_text(word);
      v.raw = std::string(text);
      return v;
    }
  }
  return verdict_from_text(text);
}

}  // namespace iterkey
