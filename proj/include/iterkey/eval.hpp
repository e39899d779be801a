// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <algorithm>
#include <cstdint>
#include <functional>
#include <map>
#include <optional>
#include <string>
#include <string_view>
#include <unordered_set>
#include <vector>

#include <nlohmann/json.hpp>

#include "iterkey/error.hpp"
#include "iterkey/pipeline.hpp"
#include "iterkey/text.hpp"

namespace iterkey {

namespace detail {

// Decodes one UTF-8 sequence at s[i]; invalid bytes decode as themselves
// and are flagged so they can be copied through untouched.
inline char32_t decode_utf8(std::string_view s, std::size_t& i, bool& valid) {
  const auto b0 = static_cast<unsigned char>(s[i]);
  valid = true;
  auto cont = [&](std::size_t k) -> int {
    if (i + k >= s.size()) return -1;
    const auto b = static_cast<unsigned char>(s[i + k]);
    return (b & 0xC0) == 0x80 ? (b & 0x3F) : -1;
  };
  if (b0 < 0x80) {
    ++i;
    return b0;
  }
  int len = 0;
  char32_t cp = 0;
  if ((b0 & 0xE0) == 0xC0) {
    len = 2;
    cp = b0 & 0x1F;
  } else if ((b0 & 0xF0) == 0xE0) {
    len = 3;
    cp = b0 & 0x0F;
  } else if ((b0 & 0xF8) == 0xF0) {
    len = 4;
    cp = b0 & 0x07;
  }
  for (int k = 1; k < len; ++k) {
    const int c = cont(static_cast<std::size_t>(k));
    if (c < 0) {
      len = 0;
      break;
    }
    cp = (cp << 6) | static_cast<char32_t>(c);
  }
  if (len == 0) {
    valid = false;
    ++i;
    return b0;
  }
  i += static_cast<std::size_t>(len);
  return cp;
}

inline void encode_utf8(char32_t cp, std::string& out) {
  if (cp < 0x80) {
    out.push_back(static_cast<char>(cp));
  } else if (cp < 0x800) {
    out.push_back(static_cast<char>(0xC0 | (cp >> 6)));
    out.push_back(static_cast<char>(0x80 | (cp & 0x3F)));
  } else if (cp < 0x10000) {
    out.push_back(static_cast<char>(0xE0 | (cp >> 12)));
    out.push_back(static_cast<char>(0x80 | ((cp >> 6) & 0x3F)));
    out.push_back(static_cast<char>(0x80 | (cp & 0x3F)));
  } else {
    out.push_back(static_cast<char>(0xF0 | (cp >> 18)));
    out.push_back(static_cast<char>(0x80 | ((cp >> 12) & 0x3F)));
    out.push_back(static_cast<char>(0x80 | ((cp >> 6) & 0x3F)));
    out.push_back(static_cast<char>(0x80 | (cp & 0x3F)));
  }
}

// Lowercasing for ASCII, Latin-1, Latin Extended-A, basic Greek and Cyrillic.
inline char32_t to_lower(char32_t c) {
  if (c >= 'A' && c <= 'Z') return c + 32;
  if (c < 0x80) return c;
  if (c >= 0xC0 && c <= 0xDE && c != 0xD7) return c + 32;
  if (c >= 0x100 && c <= 0x137) return c | 1;
  if (c >= 0x139 && c <= 0x148) return (c & 1) ? c + 1 : c;
  if (c >= 0x14A && c <= 0x177) return c | 1;
  if (c == 0x178) return 0xFF;
  if (c >= 0x179 && c <= 0x17E) return (c & 1) ? c + 1 : c;
  if (c >= 0x391 && c <= 0x3A9 && c != 0x3A2) return c + 32;
  if (c >= 0x410 && c <= 0x42F) return c + 32;
  if (c >= 0x400 && c <= 0x40F) return c + 80;
  return c;
}

struct Range {
  char32_t lo, hi;
};

// Unicode general category P* (BMP blocks in practical use). ASCII is
// handled separately and includes the ASCII symbols as well.
inline constexpr Range kPunctRanges[] = {
    {0x00A1, 0x00A1}, {0x00A7, 0x00A7}, {0x00AB, 0x00AB}, {0x00B6, 0x00B7}, {0x00BB, 0x00BB},
    {0x00BF, 0x00BF}, {0x037E, 0x037E}, {0x0387, 0x0387}, {0x055A, 0x055F}, {0x0589, 0x058A},
    {0x05BE, 0x05BE}, {0x05C0, 0x05C0}, {0x05C3, 0x05C3}, {0x05C6, 0x05C6}, {0x05F3, 0x05F4},
    {0x0609, 0x060A}, {0x060C, 0x060D}, {0x061B, 0x061B}, {0x061D, 0x061F}, {0x066A, 0x066D},
    {0x06D4, 0x06D4}, {0x0964, 0x0965}, {0x0970, 0x0970}, {0x0E4F, 0x0E4F}, {0x0E5A, 0x0E5B},
    {0x2010, 0x2027}, {0x2030, 0x2043}, {0x2045, 0x2051}, {0x2053, 0x205E}, {0x207D, 0x207E},
    {0x208D, 0x208E}, {0x2308, 0x230B}, {0x2329, 0x232A}, {0x2768, 0x2775}, {0x27C5, 0x27C6},
    {0x27E6, 0x27EF}, {0x2983, 0x2998}, {0x29D8, 0x29DB}, {0x29FC, 0x29FD}, {0x2CF9, 0x2CFC},
    {0x2CFE, 0x2CFF}, {0x2E00, 0x2E2E}, {0x2E30, 0x2E4F}, {0x3001, 0x3003}, {0x3008, 0x3011},
    {0x3014, 0x301F}, {0x3030, 0x3030}, {0x303D, 0x303D}, {0x30A0, 0x30A0}, {0x30FB, 0x30FB},
    {0xFE10, 0xFE19}, {0xFE30, 0xFE52}, {0xFE54, 0xFE61}, {0xFE63, 0xFE63}, {0xFE68, 0xFE68},
    {0xFE6A, 0xFE6B}, {0xFF01, 0xFF03}, {0xFF05, 0xFF0A}, {0xFF0C, 0xFF0F}, {0xFF1A, 0xFF1B},
    {0xFF1F, 0xFF20}, {0xFF3B, 0xFF3D}, {0xFF3F, 0xFF3F}, {0xFF5B, 0xFF5B}, {0xFF5D, 0xFF5D},
    {0xFF5F, 0xFF65},
};

inline bool is_punct(char32_t c) {
  if (c < 0x80) {
    return (c >= 0x21 && c <= 0x2F) || (c >= 0x3A && c <= 0x40) || (c >= 0x5B && c <= 0x60) ||
           (c >= 0x7B && c <= 0x7E);
  }
  for (const auto& r : kPunctRanges) {
    if (c < r.lo) return false;
    if (c <= r.hi) return true;
  }
  return false;
}

inline bool is_unicode_space(char32_t c) {
  return c == ' ' || (c >= 0x09 && c <= 0x0D) || c == 0xA0 || c == 0x1680 || (c >= 0x2000 && c <= 0x200A) ||
         c == 0x2028 || c == 0x2029 || c == 0x202F || c == 0x205F || c == 0x3000;
}

}  // namespace detail

/// Lowercase, delete punctuation, drop the articles a/an/the, collapse
/// whitespace, trim.
inline std::string normalize_answer(std::string_view text) {
  std::string stripped;
  stripped.reserve(text.size());
  std::size_t i = 0;
  while (i < text.size()) {
    const std::size_t at = i;
    bool valid = true;
    const char32_t cp = detail::decode_utf8(text, i, valid);
    if (!valid) {
      stripped.append(text.substr(at, i - at));
      continue;
    }
    if (detail::is_punct(cp)) continue;
    if (detail::is_unicode_space(cp)) {
      stripped.push_back(' ');
      continue;
    }
    detail::encode_utf8(detail::to_lower(cp), stripped);
  }
  std::string out;
  std::size_t p = 0;
  while (p < stripped.size()) {
    while (p < stripped.size() && stripped[p] == ' ') ++p;
    if (p >= stripped.size()) break;
    const auto q = stripped.find(' ', p);
    const auto word = std::string_view(stripped).substr(p, q == std::string::npos ? std::string::npos : q - p);
    p = q == std::string::npos ? stripped.size() : q;
    if (word == "a" || word == "an" || word == "the") continue;
    if (!out.empty()) out.push_back(' ');
    out.append(word);
  }
  return out;
}

inline bool exact_match(std::string_view pred, const std::vector<std::string>& refs) {
  if (refs.empty()) throw PreconditionError("exact_match: refs must be non-empty");
  const auto p = normalize_answer(pred);
  for (const auto& r : refs) {
    if (normalize_answer(r) == p) return true;
  }
  return false;
}

/// True iff some normalized reference occurs in the normalized text on word
/// boundaries. References that normalize to nothing never match.
inline bool doc_contains_answer(std::string_view chunk_text, const std::vector<std::string>& refs) {
  if (refs.empty()) throw PreconditionError("doc_contains_answer: refs must be non-empty");
  const std::string hay = " " + normalize_answer(chunk_text) + " ";
  for (const auto& r : refs) {
    const auto n = normalize_answer(r);
    if (n.empty()) continue;
    if (hay.find(" " + n + " ") != std::string::npos) return true;
  }
  return false;
}

// ---------------------------------------------------------------------------
// Scoring
// ---------------------------------------------------------------------------

enum class EvalMode { base, verified_true, verified_all };

inline const char* to_string(EvalMode m) noexcept {
  switch (m) {
    case EvalMode::base: return "base";
    case EvalMode::verified_true: return "verified_true";
    case EvalMode::verified_all: return "verified_all";
  }
  return "?";
}

inline EvalMode eval_mode_from_string(std::string_view s) {
  if (s == "base") return EvalMode::base;
  if (s == "verified_true") return EvalMode::verified_true;
  if (s == "verified_all") return EvalMode::verified_all;
  throw PreconditionError("unknown eval mode '" + std::string(s) + "'");
}

/// Iteration whose answer counts under normal early stopping: the first
/// True verdict, or the last iteration when none was accepted.
inline std::size_t resolving_iteration(const RunTrace& t) {
  for (std::size_t i = 0; i < t.iterations.size(); ++i) {
    const auto& v = t.iterations[i].verdict;
    if (v && v->choice) return i;
  }
  return t.iterations.empty() ? 0 : t.iterations.size() - 1;
}

inline std::string base_answer(const RunTrace& t) {
  if (t.iterations.empty()) return {};
  return t.iterations[resolving_iteration(t)].answer;
}

/// First iteration index at which the trace counts as correct under `mode`,
/// or nullopt if it never does.
inline std::optional<std::size_t> correct_at(const RunTrace& t, const std::vector<std::string>& refs, EvalMode mode) {
  if (t.error || t.iterations.empty()) return std::nullopt;
  switch (mode) {
    case EvalMode::base: {
      const auto r = resolving_iteration(t);
      if (exact_match(t.iterations[r].answer, refs)) return r;
      return std::nullopt;
    }
    case EvalMode::verified_true:
    case EvalMode::verified_all:
      for (std::size_t i = 0; i < t.iterations.size(); ++i) {
        const auto& it = t.iterations[i];
        const bool eligible = mode == EvalMode::verified_all || (it.verdict && it.verdict->choice);
        if (eligible && exact_match(it.answer, refs)) return i;
      }
      return std::nullopt;
  }
  return std::nullopt;
}

struct DeltaStats {
  // Index 0 is step 2 (the first regeneration), up to step N.
  std::vector<double> keyword_step;
  std::vector<double> doc_step;
  std::vector<std::size_t> support;
  double keyword_total = 0.0;
  double keyword_mean = 0.0;
  double doc_total = 0.0;
  double doc_mean = 0.0;
};

struct RecallCurve {
  std::size_t k = 0;
  // Entry h-1: fraction of questions with a hit in the union of the top-k
  // lists of iterations 1..h.
  std::vector<double> union_at_horizon;
  double mean_over_horizons = 0.0;
};

struct EvalResult {
  EvalMode mode = EvalMode::base;
  double accuracy = 0.0;
  std::size_t n = 0;
  std::size_t n_errored = 0;
  std::vector<double> per_iteration_accuracy;
  double avg_iterations = 0.0;
  std::map<std::size_t, RecallCurve> recall;
  DeltaStats deltas;
  std::vector<std::pair<std::string, double>> latency_s;
};

/// Looks up the indexed text of a chunk; nullptr if unknown.
using ChunkTextLookup = std::function<std::optional<std::string>(std::string_view chunk_id)>;

inline ChunkTextLookup index_lookup(const Index& index) {
  return [&index](std::string_view id) -> std::optional<std::string> {
    const auto* c = index.find_chunk(id);
    if (!c) return std::nullopt;
    return indexed_text(c->title, c->text);
  };
}

inline std::size_t horizon_of(std::span<const RunTrace> traces) {
  std::size_t n = 0;
  for (const auto& t : traces) n = std::max({n, t.max_iterations, t.iterations.size()});
  return std::max<std::size_t>(n, 1);
}

namespace detail {

inline void check_aligned(std::span<const RunTrace> traces, std::span<const std::vector<std::string>> refs) {
  if (traces.size() != refs.size()) {
    throw PreconditionError("traces and references differ in length (" + std::to_string(traces.size()) + " vs " +
                            std::to_string(refs.size()) + ")");
  }
}

}  // namespace detail

/// Recall@k per iteration horizon. A question hits at horizon h if any of
/// the first k documents retrieved in iterations 1..h contains a reference
/// answer. Traces that stopped early keep their last state for later
/// horizons.
inline RecallCurve recall_at_k(std::span<const RunTrace> traces, std::span<const std::vector<std::string>> refs,
                               std::size_t k, const ChunkTextLookup& lookup, std::size_t horizon = 0) {
  detail::check_aligned(traces, refs);
  if (k == 0) throw PreconditionError("recall k must be >= 1");
  if (horizon == 0) horizon = horizon_of(traces);
  RecallCurve curve;
  curve.k = k;
  curve.union_at_horizon.assign(horizon, 0.0);
  if (traces.empty()) return curve;
  for (std::size_t q = 0; q < traces.size(); ++q) {
    const auto& t = traces[q];
    if (t.top_k != 0 && k > t.top_k) {
      throw PreconditionError("recall k=" + std::to_string(k) + " exceeds the retrieval depth " +
                              std::to_string(t.top_k) + " of the traces");
    }
    std::optional<std::size_t> first_hit;
    for (std::size_t i = 0; i < t.iterations.size() && !first_hit; ++i) {
      const auto& docs = t.iterations[i].retrieved;
      for (std::size_t d = 0; d < std::min(k, docs.size()); ++d) {
        const auto text = lookup(docs[d].chunk_id);
        if (!text) throw PreconditionError("chunk '" + docs[d].chunk_id + "' not found in index");
        if (doc_contains_answer(*text, refs[q])) {
          first_hit = i;
          break;
        }
      }
    }
    if (!first_hit) continue;
    for (std::size_t h = *first_hit; h < horizon; ++h) curve.union_at_horizon[h] += 1.0;
  }
  double sum = 0.0;
  for (auto& v : curve.union_at_horizon) {
    v /= static_cast<double>(traces.size());
    sum += v;
  }
  curve.mean_over_horizons = sum / static_cast<double>(horizon);
  return curve;
}

/// Mean number of new keywords / documents per regeneration step.
///
/// For step s (2..N) the mean runs over traces that reached s; novelty is
/// measured against the union of all earlier iterations of the same trace
/// (keywords case-insensitively, documents by chunk id). Total sums the
/// step means and Mean divides it by N-1.
inline DeltaStats delta_stats(std::span<const RunTrace> traces, std::size_t n_iterations = 0) {
  if (n_iterations == 0) n_iterations = horizon_of(traces);
  DeltaStats s;
  const std::size_t steps = n_iterations > 0 ? n_iterations - 1 : 0;
  s.keyword_step.assign(steps, 0.0);
  s.doc_step.assign(steps, 0.0);
  s.support.assign(steps, 0);
  for (const auto& t : traces) {
    std::unordered_set<std::string> kws, docs;
    for (std::size_t i = 0; i < t.iterations.size(); ++i) {
      std::size_t new_k = 0, new_d = 0;
      for (const auto& kw : t.iterations[i].keywords) new_k += kws.insert(ascii_lower(kw)).second ? 1 : 0;
      for (const auto& d : t.iterations[i].retrieved) new_d += docs.insert(d.chunk_id).second ? 1 : 0;
      if (i == 0 || i - 1 >= steps) continue;
      s.keyword_step[i - 1] += static_cast<double>(new_k);
      s.doc_step[i - 1] += static_cast<double>(new_d);
      ++s.support[i - 1];
    }
  }
  for (std::size_t j = 0; j < steps; ++j) {
    if (s.support[j]) {
      s.keyword_step[j] /= static_cast<double>(s.support[j]);
      s.doc_step[j] /= static_cast<double>(s.support[j]);
    }
    s.keyword_total += s.keyword_step[j];
    s.doc_total += s.doc_step[j];
  }
  if (steps) {
    s.keyword_mean = s.keyword_total / static_cast<double>(steps);
    s.doc_mean = s.doc_total / static_cast<double>(steps);
  }
  return s;
}

/// Mean per-question seconds spent in each step, over the traces that
/// executed that step, in pipeline order; the final row is "total", the
/// sum of the step rows.
inline std::vector<std::pair<std::string, double>> latency_report(std::span<const RunTrace> traces) {
  std::vector<std::pair<std::string, double>> rows;
  double total = 0.0;
  for (const auto label : kStepLabels) {
    double sum_ms = 0.0;
    std::size_t n = 0;
    for (const auto& t : traces) {
      bool present = false;
      double ms = 0.0;
      for (const auto& r : t.iterations) {
        if (auto it = r.wall_time_ms.find(label); it != r.wall_time_ms.end()) {
          present = true;
          ms += it->second;
        }
      }
      if (present) {
        sum_ms += ms;
        ++n;
      }
    }
    if (n == 0) continue;
    const double mean_s = sum_ms / static_cast<double>(n) / 1000.0;
    rows.emplace_back(std::string(label), mean_s);
    total += mean_s;
  }
  rows.emplace_back("total", total);
  return rows;
}

/// Accuracy under `mode` plus iteration accounting. Verified modes need
/// traces produced with early stopping disabled. Errored traces count as
/// incorrect and are excluded from avg_iterations.
inline EvalResult score_mode(std::span<const RunTrace> traces, std::span<const std::vector<std::string>> refs,
                             EvalMode mode) {
  detail::check_aligned(traces, refs);
  if (mode != EvalMode::base) {
    for (const auto& t : traces) {
      if (t.early_stop && !t.error && t.method != "vanilla" && t.method != "rag") {
        throw PreconditionError(std::string(to_string(mode)) +
                                " requires traces produced with early stopping disabled (--no-early-stop)");
      }
    }
  }
  EvalResult r;
  r.mode = mode;
  r.n = traces.size();
  const std::size_t horizon = horizon_of(traces);
  r.per_iteration_accuracy.assign(horizon, 0.0);
  std::size_t correct = 0, counted = 0;
  double iter_sum = 0.0;
  for (std::size_t q = 0; q < traces.size(); ++q) {
    const auto& t = traces[q];
    if (t.error || t.iterations.empty()) {
      ++r.n_errored;
      continue;
    }
    iter_sum += static_cast<double>(resolving_iteration(t) + 1);
    ++counted;
    if (const auto at = correct_at(t, refs[q], mode)) {
      ++correct;
      for (std::size_t h = *at; h < horizon; ++h) r.per_iteration_accuracy[h] += 1.0;
    }
  }
  if (r.n) {
    r.accuracy = static_cast<double>(correct) / static_cast<double>(r.n);
    for (auto& v : r.per_iteration_accuracy) v /= static_cast<double>(r.n);
  }
  r.avg_iterations = counted ? iter_sum / static_cast<double>(counted) : 0.0;
  return r;
}

struct EvalOptions {
  EvalMode mode = EvalMode::base;
  std::vector<std::size_t> recall_ks;
};

/// score_mode plus recall curves, keyword/document deltas and latency.
inline EvalResult evaluate(std::span<const RunTrace> traces, std::span<const std::vector<std::string>> refs,
                           const EvalOptions& opts, const ChunkTextLookup* lookup = nullptr) {
  auto r = score_mode(traces, refs, opts.mode);
  if (!opts.recall_ks.empty()) {
    if (!lookup) throw PreconditionError("recall needs chunk texts (pass an index)");
    for (auto k : opts.recall_ks) r.recall[k] = recall_at_k(traces, refs, k, *lookup);
  }
  r.deltas = delta_stats(traces);
  r.latency_s = latency_report(traces);
  return r;
}

inline nlohmann::ordered_json to_json(const EvalResult& r) {
  nlohmann::ordered_json j;
  j["mode"] = to_string(r.mode);
  j["accuracy"] = r.accuracy;
  j["n"] = r.n;
  j["n_errored"] = r.n_errored;
  j["per_iteration_accuracy"] = r.per_iteration_accuracy;
  j["avg_iterations"] = r.avg_iterations;
  nlohmann::ordered_json rec = nlohmann::ordered_json::object();
  for (const auto& [k, c] : r.recall) {
    rec[std::to_string(k)] = {{"union_at_horizon", c.union_at_horizon}, {"mean_over_horizons", c.mean_over_horizons}};
  }
  j["recall_at"] = std::move(rec);
  j["keyword_deltas"] = {{"steps", r.deltas.keyword_step}, {"total", r.deltas.keyword_total}, {"mean", r.deltas.keyword_mean}};
  j["doc_deltas"] = {{"steps", r.deltas.doc_step}, {"total", r.deltas.doc_total}, {"mean", r.deltas.doc_mean}};
  j["delta_support"] = r.deltas.support;
  nlohmann::ordered_json lat = nlohmann::ordered_json::object();
  for (const auto& [k, v] : r.latency_s) lat[k] = v;
  j["latency_s"] = std::move(lat);
  return j;
}

}  // namespace iterkey
