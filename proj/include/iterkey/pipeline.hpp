// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <array>
#include <chrono>
#include <cstddef>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <unordered_set>
#include <utility>
#include <vector>

#include "iterkey/bm25.hpp"
#include "iterkey/error.hpp"
#include "iterkey/llm.hpp"
#include "iterkey/prompts.hpp"
#include "iterkey/text.hpp"

namespace iterkey {

enum class RegenMode { keywords_only, docwise };
enum class ValidationMode { plain, cot };
enum class StopReason { validated_true, budget_exhausted, single_pass };

inline const char* to_string(RegenMode m) noexcept { return m == RegenMode::docwise ? "docwise" : "keywords_only"; }
inline const char* to_string(ValidationMode m) noexcept { return m == ValidationMode::cot ? "cot" : "plain"; }
inline const char* to_string(StopReason r) noexcept {
  switch (r) {
    case StopReason::validated_true: return "validated_true";
    case StopReason::budget_exhausted: return "budget_exhausted";
    case StopReason::single_pass: return "single_pass";
  }
  return "?";
}

// Step labels used for latency accounting.
inline constexpr std::string_view kStepQueryExpansion = "query_expansion";
inline constexpr std::string_view kStepRetrieval = "retrieval";
inline constexpr std::string_view kStepAnswerGeneration = "answer_generation";
inline constexpr std::string_view kStepAnswerValidation = "answer_validation";
inline constexpr std::array<std::string_view, 4> kStepLabels = {kStepQueryExpansion, kStepRetrieval,
                                                                kStepAnswerGeneration, kStepAnswerValidation};

// Record flags.
inline constexpr std::string_view kFlagKeywordParseFailed = "keyword_parse_failed";
inline constexpr std::string_view kFlagKeywordParseRetried = "keyword_parse_retried";
inline constexpr std::string_view kFlagDocwiseParseFailed = "docwise_parse_failed";
inline constexpr std::string_view kFlagVerdictUnparsed = "verdict_unparsed";
inline constexpr std::string_view kFlagEmptyRetrieval = "empty_retrieval";

struct RunConfig {
  std::size_t max_iterations = 5;
  std::size_t top_k = 3;
  RegenMode regen_mode = RegenMode::keywords_only;
  ValidationMode validation_mode = ValidationMode::plain;
  // When false, every trace runs all max_iterations regardless of verdicts.
  bool early_stop = true;
  // Validation sees every document retrieved so far instead of only D^i.
  bool validate_with_all_docs = false;
  bool save_raw = false;
  bool record_timing = true;
  GenParams keyword_params{50, 0.0};
  GenParams answer_params{50, 0.0};
  GenParams validate_params{30, 0.0};
  GenParams cot_validate_params{256, 0.0};

  void validate() const {
    if (max_iterations < 1) throw PreconditionError("max_iterations must be >= 1");
    if (top_k < 1) throw PreconditionError("top_k must be >= 1");
    keyword_params.validate();
    answer_params.validate();
    validate_params.validate();
    cot_validate_params.validate();
  }
};

/// Backends per step; they may all be the same object.
struct Backends {
  LlmBackend& keyword_gen;
  LlmBackend& answer_gen;
  LlmBackend& validate;

  static Backends uniform(LlmBackend& b) { return Backends{b, b, b}; }
};

/// Prompt and completion of one model call, kept for audit output.
struct RawExchange {
  std::string step;
  std::string system;
  std::string user;
  std::string completion;
};

struct IterationRecord {
  std::size_t index = 0;
  KeywordSet keywords;
  std::string expanded_query;
  std::vector<ScoredDoc> retrieved;
  std::string answer;
  std::optional<BinaryVerdict> verdict;
  std::size_t new_keywords = 0;
  std::size_t new_docs = 0;
  std::map<std::string, double, std::less<>> wall_time_ms;
  std::vector<std::string> flags;
  std::vector<RawExchange> raw;

  bool has_flag(std::string_view f) const {
    for (const auto& x : flags) {
      if (x == f) return true;
    }
    return false;
  }
};

struct RunTrace {
  std::size_t question_index = 0;
  std::string question;
  std::string method;
  bool early_stop = true;
  std::size_t max_iterations = 0;
  std::size_t top_k = 0;
  std::vector<IterationRecord> iterations;
  StopReason stop_reason = StopReason::budget_exhausted;
  std::string final_answer;
  // Set when the run was aborted by a backend failure.
  std::optional<std::string> error;
};

/// `q` followed by the keywords, single-space separated.
inline std::string expand_query(std::string_view q, const KeywordSet& k) {
  std::string out(trim(q));
  for (const auto& kw : k) {
    out += ' ';
    out += kw;
  }
  return out;
}

namespace detail {

class StepTimer {
 public:
  explicit StepTimer(bool enabled) : enabled_(enabled), start_(std::chrono::steady_clock::now()) {}
  double elapsed_ms() const {
    if (!enabled_) return 0.0;
    return std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - start_).count();
  }

 private:
  bool enabled_;
  std::chrono::steady_clock::time_point start_;
};

inline std::vector<DocView> doc_views(const Index& index, std::span<const ScoredDoc> docs) {
  std::vector<DocView> v;
  v.reserve(docs.size());
  for (const auto& d : docs) {
    const auto& c = index.chunk(d.chunk_ref);
    v.push_back(DocView{c.title, c.text});
  }
  return v;
}

inline std::string render_docs(const Index& index, std::span<const ScoredDoc> docs) {
  const auto views = doc_views(index, docs);
  return format_documents(views);
}

}  // namespace detail

/// Runs the keyword / retrieve / answer / validate loop for one question.
///
/// Iteration 0 asks for initial keywords; later iterations regenerate them
/// from the previous set (or per retrieved document in docwise mode). Each
/// iteration retrieves with q + K^i, answers from those documents and
/// validates the answer. With early stopping the loop ends at the first
/// True verdict. Reference answers are never visible here.
class IterKeyPipeline {
 public:
  IterKeyPipeline(const Index& index, Backends backends, RunConfig config, const TemplateSet& templates = {})
      : index_(index), backends_(backends), config_(std::move(config)), templates_(templates) {
    config_.validate();
  }

  const RunConfig& config() const noexcept { return config_; }

  RunTrace run(std::string_view question) const {
    RunTrace trace;
    trace.question = std::string(question);
    trace.method = config_.regen_mode == RegenMode::docwise ? "iterkey_docwise" : "iterkey";
    trace.early_stop = config_.early_stop;
    trace.max_iterations = config_.max_iterations;
    trace.top_k = config_.top_k;

    std::unordered_set<std::string> seen_keywords;
    std::unordered_set<std::string> seen_docs;
    std::vector<ScoredDoc> all_docs;

    for (std::size_t i = 0; i < config_.max_iterations; ++i) {
      IterationRecord rec;
      rec.index = i;

      detail::StepTimer t_kw(config_.record_timing);
      if (i == 0) {
        rec.keywords = generate_keywords(TemplateId::step1_keywords, {{"q", trace.question}}, rec);
      } else {
        const auto& prev = trace.iterations.back();
        rec.keywords = config_.regen_mode == RegenMode::docwise ? regenerate_docwise(trace.question, prev, rec)
                                                                : regenerate(trace.question, prev, rec);
      }
      rec.wall_time_ms[std::string(kStepQueryExpansion)] = t_kw.elapsed_ms();

      for (const auto& kw : rec.keywords) {
        if (seen_keywords.insert(ascii_lower(kw)).second) ++rec.new_keywords;
      }

      detail::StepTimer t_ret(config_.record_timing);
      rec.expanded_query = expand_query(trace.question, rec.keywords);
      rec.retrieved = index_.retrieve_top_k(rec.expanded_query, config_.top_k);
      rec.wall_time_ms[std::string(kStepRetrieval)] = t_ret.elapsed_ms();
      if (rec.retrieved.empty()) rec.flags.emplace_back(kFlagEmptyRetrieval);
      for (const auto& d : rec.retrieved) {
        if (seen_docs.insert(d.chunk_id).second) {
          ++rec.new_docs;
          all_docs.push_back(d);
        }
      }

      detail::StepTimer t_ans(config_.record_timing);
      rec.answer = answer(trace.question, rec.retrieved, rec);
      rec.wall_time_ms[std::string(kStepAnswerGeneration)] = t_ans.elapsed_ms();

      detail::StepTimer t_val(config_.record_timing);
      const std::span<const ScoredDoc> evidence =
          config_.validate_with_all_docs ? std::span<const ScoredDoc>(all_docs) : std::span<const ScoredDoc>(rec.retrieved);
      rec.verdict = validate(trace.question, rec.answer, evidence, rec);
      rec.wall_time_ms[std::string(kStepAnswerValidation)] = t_val.elapsed_ms();
      if (rec.verdict->unparsed) rec.flags.emplace_back(kFlagVerdictUnparsed);

      const bool accepted = rec.verdict->choice;
      trace.iterations.push_back(std::move(rec));
      if (accepted && config_.early_stop) break;
    }

    const auto& last = trace.iterations.back();
    trace.final_answer = last.answer;
    trace.stop_reason = last.verdict && last.verdict->choice ? StopReason::validated_true : StopReason::budget_exhausted;
    return trace;
  }

 private:
  std::string call(LlmBackend& backend, TemplateId id, const Bindings& b, const GenParams& params,
                   IterationRecord& rec) const {
    const auto msgs = templates_.render(id, b);
    auto out = complete(backend, msgs, params);
    if (config_.save_raw) rec.raw.push_back(RawExchange{to_string(id), msgs[0].content, msgs[1].content, out});
    return out;
  }

  // One keyword call with a single retry on unparseable output; falls back
  // to an empty set (expanded query = q) and flags the record.
  KeywordSet generate_keywords(TemplateId id, const Bindings& b, IterationRecord& rec) const {
    for (int attempt = 0; attempt < 2; ++attempt) {
      const auto text = call(backends_.keyword_gen, id, b, config_.keyword_params, rec);
      try {
        return parse_keyword_list(text);
      } catch (const ParseError&) {
        if (attempt == 0) rec.flags.emplace_back(kFlagKeywordParseRetried);
      }
    }
    rec.flags.emplace_back(kFlagKeywordParseFailed);
    return {};
  }

  KeywordSet regenerate(const std::string& q, const IterationRecord& prev, IterationRecord& rec) const {
    const auto id = config_.validation_mode == ValidationMode::cot ? TemplateId::step4_regen_cot : TemplateId::step4_regen;
    return generate_keywords(id, {{"q", q}, {"K", format_keywords(prev.keywords)}}, rec);
  }

  // One regeneration call per previously retrieved document, merged in rank
  // order. A document whose output cannot be parsed contributes nothing.
  KeywordSet regenerate_docwise(const std::string& q, const IterationRecord& prev, IterationRecord& rec) const {
    const auto prev_kw = format_keywords(prev.keywords);
    if (prev.retrieved.empty()) {
      return generate_keywords(TemplateId::step4_regen_docwise, {{"q", q}, {"K", prev_kw}, {"Docs", ""}}, rec);
    }
    KeywordSet merged;
    for (std::size_t d = 0; d < prev.retrieved.size(); ++d) {
      const auto docs = detail::render_docs(index_, std::span<const ScoredDoc>(&prev.retrieved[d], 1));
      const auto text = call(backends_.keyword_gen, TemplateId::step4_regen_docwise,
                             {{"q", q}, {"K", prev_kw}, {"Docs", docs}}, config_.keyword_params, rec);
      try {
        for (const auto& kw : parse_keyword_list(text)) merged.add(kw);
      } catch (const ParseError&) {
        rec.flags.push_back(std::string(kFlagDocwiseParseFailed) + ":" + prev.retrieved[d].chunk_id);
      }
    }
    if (merged.empty()) rec.flags.emplace_back(kFlagKeywordParseFailed);
    return merged;
  }

  std::string answer(const std::string& q, std::span<const ScoredDoc> docs, IterationRecord& rec) const {
    const auto text = call(backends_.answer_gen, TemplateId::step2_answer,
                           {{"q", q}, {"D", detail::render_docs(index_, docs)}}, config_.answer_params, rec);
    return std::string(trim(text));
  }

  BinaryVerdict validate(const std::string& q, const std::string& a, std::span<const ScoredDoc> docs,
                         IterationRecord& rec) const {
    const Bindings b{{"q", q}, {"a", a}, {"Docs", detail::render_docs(index_, docs)}};
    if (config_.validation_mode == ValidationMode::cot) {
      return parse_cot_verdict(call(backends_.validate, TemplateId::step3_validate_cot, b, config_.cot_validate_params, rec));
    }
    const auto msgs = templates_.render(TemplateId::step3_validate, b);
    auto v = forced_choice(backends_.validate, msgs, config_.validate_params);
    if (config_.save_raw) {
      std::string completion = v.raw;
      if (v.method == VerdictMethod::logprob) {
        completion = std::string("[logprob] p_true=") + std::to_string(*v.p_true) + " p_false=" + std::to_string(*v.p_false);
      }
      rec.raw.push_back(RawExchange{to_string(TemplateId::step3_validate), msgs[0].content, msgs[1].content, completion});
    }
    return v;
  }

  const Index& index_;
  Backends backends_;
  RunConfig config_;
  TemplateSet templates_;
};

inline RunTrace run_iterkey(std::string_view q, const Index& index, Backends backends, const RunConfig& config,
                            const TemplateSet& templates = {}) {
  return IterKeyPipeline(index, backends, config, templates).run(q);
}

/// The document-by-document regeneration variant.
inline RunTrace run_iterkey_docwise(std::string_view q, const Index& index, Backends backends, RunConfig config,
                                    const TemplateSet& templates = {}) {
  config.regen_mode = RegenMode::docwise;
  return IterKeyPipeline(index, backends, std::move(config), templates).run(q);
}

/// Answer with no retrieval at all.
inline std::string run_vanilla(std::string_view q, LlmBackend& backend, const GenParams& params = {50, 0.0},
                               const TemplateSet& templates = {}) {
  const auto msgs = templates.render(TemplateId::vanilla_answer, {{"q", std::string(q)}});
  return std::string(trim(complete(backend, msgs, params)));
}

struct RagResult {
  std::string answer;
  std::vector<ScoredDoc> retrieved;
  bool empty_retrieval = false;
};

/// Single retrieval with the raw question, then one answer call.
inline RagResult run_rag_once(std::string_view q, const Index& index, LlmBackend& backend, const RunConfig& config,
                              const TemplateSet& templates = {}) {
  config.validate();
  RagResult r;
  r.retrieved = index.retrieve_top_k(q, config.top_k);
  r.empty_retrieval = r.retrieved.empty();
  const auto msgs =
      templates.render(TemplateId::step2_answer, {{"q", std::string(q)}, {"D", detail::render_docs(index, r.retrieved)}});
  r.answer = std::string(trim(complete(backend, msgs, config.answer_params)));
  return r;
}

/// Baselines wrapped as single-iteration traces so they share the trace
/// file and evaluation path.
inline RunTrace vanilla_trace(std::string_view q, LlmBackend& backend, const RunConfig& config,
                              const TemplateSet& templates = {}) {
  RunTrace t;
  t.question = std::string(q);
  t.method = "vanilla";
  t.early_stop = true;
  t.max_iterations = 1;
  t.top_k = 0;
  IterationRecord rec;
  rec.expanded_query = t.question;
  detail::StepTimer timer(config.record_timing);
  const auto msgs = templates.render(TemplateId::vanilla_answer, {{"q", t.question}});
  const auto out = complete(backend, msgs, config.answer_params);
  rec.answer = std::string(trim(out));
  rec.wall_time_ms[std::string(kStepAnswerGeneration)] = timer.elapsed_ms();
  if (config.save_raw) rec.raw.push_back(RawExchange{"vanilla_answer", msgs[0].content, msgs[1].content, out});
  t.final_answer = rec.answer;
  t.iterations.push_back(std::move(rec));
  t.stop_reason = StopReason::single_pass;
  return t;
}

inline RunTrace rag_trace(std::string_view q, const Index& index, LlmBackend& backend, const RunConfig& config,
                          const TemplateSet& templates = {}) {
  config.validate();
  RunTrace t;
  t.question = std::string(q);
  t.method = "rag";
  t.early_stop = true;
  t.max_iterations = 1;
  t.top_k = config.top_k;
  IterationRecord rec;
  rec.expanded_query = t.question;
  detail::StepTimer t_ret(config.record_timing);
  rec.retrieved = index.retrieve_top_k(t.question, config.top_k);
  rec.wall_time_ms[std::string(kStepRetrieval)] = t_ret.elapsed_ms();
  if (rec.retrieved.empty()) rec.flags.emplace_back(kFlagEmptyRetrieval);
  rec.new_docs = rec.retrieved.size();
  detail::StepTimer t_ans(config.record_timing);
  const auto msgs =
      templates.render(TemplateId::step2_answer, {{"q", t.question}, {"D", detail::render_docs(index, rec.retrieved)}});
  const auto out = complete(backend, msgs, config.answer_params);
  rec.answer = std::string(trim(out));
  rec.wall_time_ms[std::string(kStepAnswerGeneration)] = t_ans.elapsed_ms();
  if (config.save_raw) rec.raw.push_back(RawExchange{"step2_answer", msgs[0].content, msgs[1].content, out});
  t.final_answer = rec.answer;
  t.iterations.push_back(std::move(rec));
  t.stop_reason = StopReason::single_pass;
  return t;
}

}  // namespace iterkey
