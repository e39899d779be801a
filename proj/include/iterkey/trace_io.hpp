// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <string>
#include <string_view>

#include <nlohmann/json.hpp>

#include "iterkey/error.hpp"
#include "iterkey/pipeline.hpp"

namespace iterkey {

using ojson = nlohmann::ordered_json;

inline constexpr int kTraceSchemaVersion = 1;

inline ojson verdict_to_json(const BinaryVerdict& v) {
  ojson j;
  j["choice"] = v.choice;
  j["method"] = to_string(v.method);
  if (v.p_true) j["p_true"] = *v.p_true;
  if (v.p_false) j["p_false"] = *v.p_false;
  if (v.unparsed) j["unparsed"] = true;
  return j;
}

inline BinaryVerdict verdict_from_json(const ojson& j) {
  BinaryVerdict v;
  v.choice = j.at("choice").get<bool>();
  const auto m = j.at("method").get<std::string>();
  if (m == "logprob") {
    v.method = VerdictMethod::logprob;
  } else if (m == "text-fallback") {
    v.method = VerdictMethod::text_fallback;
  } else {
    throw ParseError("unknown verdict method '" + m + "'");
  }
  if (j.contains("p_true")) v.p_true = j["p_true"].get<double>();
  if (j.contains("p_false")) v.p_false = j["p_false"].get<double>();
  v.unparsed = j.value("unparsed", false);
  return v;
}

inline ojson trace_to_json(const RunTrace& t) {
  ojson j;
  j["v"] = kTraceSchemaVersion;
  j["kind"] = "trace";
  j["index"] = t.question_index;
  j["question"] = t.question;
  j["method"] = t.method;
  j["early_stop"] = t.early_stop;
  j["max_iterations"] = t.max_iterations;
  j["top_k"] = t.top_k;
  if (t.error) {
    j["error"] = *t.error;
  } else {
    j["stop_reason"] = to_string(t.stop_reason);
    j["final_answer"] = t.final_answer;
  }
  ojson its = ojson::array();
  for (const auto& r : t.iterations) {
    ojson ij;
    ij["i"] = r.index;
    ij["keywords"] = r.keywords.items();
    ij["expanded_query"] = r.expanded_query;
    ojson docs = ojson::array();
    for (const auto& d : r.retrieved) docs.push_back({{"chunk_id", d.chunk_id}, {"score", d.score}, {"ref", d.chunk_ref}});
    ij["retrieved"] = std::move(docs);
    ij["answer"] = r.answer;
    if (r.verdict) ij["verdict"] = verdict_to_json(*r.verdict);
    ij["new_keywords"] = r.new_keywords;
    ij["new_docs"] = r.new_docs;
    ojson times = ojson::object();
    for (const auto& [k, v] : r.wall_time_ms) times[k] = v;
    ij["wall_time_ms"] = std::move(times);
    if (!r.flags.empty()) ij["flags"] = r.flags;
    if (!r.raw.empty()) {
      ojson raw = ojson::array();
      for (const auto& x : r.raw) {
        raw.push_back({{"step", x.step}, {"system", x.system}, {"user", x.user}, {"completion", x.completion}});
      }
      ij["raw"] = std::move(raw);
    }
    its.push_back(std::move(ij));
  }
  j["iterations"] = std::move(its);
  return j;
}

inline StopReason stop_reason_from_string(const std::string& s) {
  if (s == "validated_true") return StopReason::validated_true;
  if (s == "budget_exhausted") return StopReason::budget_exhausted;
  if (s == "single_pass") return StopReason::single_pass;
  throw ParseError("unknown stop_reason '" + s + "'");
}

inline RunTrace trace_from_json(const ojson& j) {
  if (j.value("v", 0) != kTraceSchemaVersion) throw ParseError("unsupported trace schema version");
  RunTrace t;
  t.question_index = j.at("index").get<std::size_t>();
  t.question = j.at("question").get<std::string>();
  t.method = j.at("method").get<std::string>();
  t.early_stop = j.at("early_stop").get<bool>();
  t.max_iterations = j.at("max_iterations").get<std::size_t>();
  t.top_k = j.at("top_k").get<std::size_t>();
  if (j.contains("error")) {
    t.error = j["error"].get<std::string>();
  } else {
    t.stop_reason = stop_reason_from_string(j.at("stop_reason").get<std::string>());
    t.final_answer = j.at("final_answer").get<std::string>();
  }
  for (const auto& ij : j.at("iterations")) {
    IterationRecord r;
    r.index = ij.at("i").get<std::size_t>();
    for (const auto& k : ij.at("keywords")) r.keywords.add(k.get<std::string>());
    r.expanded_query = ij.at("expanded_query").get<std::string>();
    for (const auto& d : ij.at("retrieved")) {
      r.retrieved.push_back(ScoredDoc{d.at("chunk_id").get<std::string>(), d.at("score").get<double>(),
                                      d.value("ref", std::uint32_t{0})});
    }
    r.answer = ij.at("answer").get<std::string>();
    if (ij.contains("verdict")) r.verdict = verdict_from_json(ij["verdict"]);
    r.new_keywords = ij.value("new_keywords", std::size_t{0});
    r.new_docs = ij.value("new_docs", std::size_t{0});
    if (ij.contains("wall_time_ms")) {
      for (const auto& [k, v] : ij["wall_time_ms"].items()) r.wall_time_ms[k] = v.get<double>();
    }
    if (ij.contains("flags")) r.flags = ij["flags"].get<std::vector<std::string>>();
    if (ij.contains("raw")) {
      for (const auto& x : ij["raw"]) {
        r.raw.push_back(RawExchange{x.at("step").get<std::string>(), x.at("system").get<std::string>(),
                                    x.at("user").get<std::string>(), x.at("completion").get<std::string>()});
      }
    }
    t.iterations.push_back(std::move(r));
  }
  return t;
}

inline std::string trace_to_line(const RunTrace& t) { return trace_to_json(t).dump(); }

inline RunTrace trace_from_line(std::string_view line) {
  ojson j;
  try {
    j = ojson::parse(line);
  } catch (const nlohmann::json::parse_error& e) {
    throw ParseError(std::string("malformed trace line: ") + e.what());
  }
  try {
    return trace_from_json(j);
  } catch (const nlohmann::json::exception& e) {
    throw ParseError(std::string("bad trace record: ") + e.what());
  }
}

}  // namespace iterkey
