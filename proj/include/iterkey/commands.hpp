// SPDX-License-Identifier: Apache-2.0
#pragma once

// Implementations behind the `iterkey` subcommands. Each returns the
// process exit code: 0 success, 1 runtime failure, 2 usage error.

#include <algorithm>
#include <atomic>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <map>
#include <memory>
#include <mutex>
#include <optional>
#include <ostream>
#include <set>
#include <string>
#include <thread>
#include <unordered_set>
#include <vector>

#include <nlohmann/json.hpp>

#include "iterkey/bm25.hpp"
#include "iterkey/corpus.hpp"
#include "iterkey/error.hpp"
#include "iterkey/eval.hpp"
#include "iterkey/mock_backend.hpp"
#include "iterkey/openai_client.hpp"
#include "iterkey/pipeline.hpp"
#include "iterkey/trace_io.hpp"

namespace iterkey::cli {

inline constexpr int kExitOk = 0;
inline constexpr int kExitFailure = 1;
inline constexpr int kExitUsage = 2;

namespace detail {

inline std::string fmt(double v, int prec = 4) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.*f", prec, v);
  return buf;
}

inline std::unordered_set<std::string> load_stopwords(const std::string& spec) {
  if (spec.empty() || spec == "none") return {};
  if (spec == "english") return english_stopwords();
  std::ifstream in(spec);
  if (!in) throw PreconditionError("cannot open stopword file: " + spec);
  std::unordered_set<std::string> out;
  std::string w;
  while (in >> w) out.insert(ascii_lower(w));
  return out;
}

inline void write_file_atomically(const std::filesystem::path& path, const std::string& content) {
  auto tmp = path;
  tmp += ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw Error("cannot write " + tmp.string());
    out << content;
    if (!out) throw Error("failed writing " + tmp.string());
  }
  std::filesystem::rename(tmp, path);
}

}  // namespace detail

// ---------------------------------------------------------------------------
// index
// ---------------------------------------------------------------------------

struct IndexOptions {
  std::string corpus;
  std::string out;
  std::size_t chunk_size = 256;
  std::size_t overlap = 50;
  double k1 = 1.5;
  double b = 0.75;
  std::string stopwords = "none";
  bool stem = false;
  bool force = false;
  std::optional<std::size_t> limit;
};

inline nlohmann::ordered_json effective_config(const IndexOptions& o) {
  return {{"command", "index"}, {"corpus", o.corpus},       {"chunk_size", o.chunk_size}, {"overlap", o.overlap},
          {"k1", o.k1},         {"b", o.b},                 {"stopwords", o.stopwords},   {"stem", o.stem},
          {"limit", o.limit ? nlohmann::ordered_json(*o.limit) : nlohmann::ordered_json(nullptr)}};
}

inline int cmd_index(const IndexOptions& o, std::ostream& out, std::ostream& err) {
  if (o.chunk_size == 0 || o.overlap >= o.chunk_size) {
    err << "usage error: --overlap (" << o.overlap << ") must be smaller than --chunk-size (" << o.chunk_size << ")\n";
    return kExitUsage;
  }
  try {
    Bm25Params{o.k1, o.b}.validate();
  } catch (const PreconditionError& e) {
    err << "usage error: " << e.what() << "\n";
    return kExitUsage;
  }
  if (std::filesystem::exists(o.out) && !o.force) {
    err << "error: " << o.out << " exists; pass --force to overwrite\n";
    return kExitFailure;
  }
  try {
    Tokenizer tokenizer(detail::load_stopwords(o.stopwords), o.stem);
    IndexBuilder builder(Bm25Params{o.k1, o.b}, tokenizer);
    builder.set_meta(effective_config(o).dump());
    CorpusReader reader(o.corpus, o.limit);
    std::size_t n_docs = 0;
    while (auto doc = reader.next()) {
      ++n_docs;
      for (const auto& c : chunk_document(*doc, o.chunk_size, o.overlap, tokenizer)) builder.add(c);
    }
    const auto index = std::move(builder).finish();
    save_index(index, o.out);
    out << "documents:   " << n_docs << "\n"
        << "chunks:      " << index.n_docs() << "\n"
        << "vocabulary:  " << index.vocab_size() << "\n"
        << "avg_doc_len: " << detail::fmt(index.avg_doc_len(), 2) << "\n"
        << "index_hash:  " << index_content_hash(index) << "\n";
    return kExitOk;
  } catch (const std::exception& e) {
    err << "error: " << e.what() << "\n";
    return kExitFailure;
  }
}

// ---------------------------------------------------------------------------
// run
// ---------------------------------------------------------------------------

struct StepEndpoint {
  std::string endpoint;
  std::string model;
};

struct RunOptions {
  std::string dataset;
  std::string index;
  std::string out;
  std::string method = "iterkey";  // vanilla | rag | iterkey
  RunConfig run;
  std::string mock_script;
  std::string prompts_dir;
  // Defaults for every step; per-step fields override when non-empty.
  StepEndpoint backend;
  StepEndpoint keyword_backend;
  StepEndpoint answer_backend;
  StepEndpoint validate_backend;
  std::string api_key;
  int max_retries = 3;
  int retry_backoff_ms = 500;
  int timeout_ms = 60000;
  int max_in_flight = 4;
  LogprobMode logprobs = LogprobMode::automatic;
  std::size_t jobs = 4;
  bool force = false;
  bool skip_completed = false;
  std::optional<std::size_t> limit;
};

inline nlohmann::ordered_json effective_config(const RunOptions& o) {
  using J = nlohmann::ordered_json;
  auto step = [&](const StepEndpoint& s) {
    return J{{"endpoint", s.endpoint.empty() ? o.backend.endpoint : s.endpoint},
             {"model", s.model.empty() ? o.backend.model : s.model}};
  };
  auto gen = [](const GenParams& g) { return J{{"max_tokens", g.max_tokens}, {"temperature", g.temperature}}; };
  J j;
  j["command"] = "run";
  j["method"] = o.method;
  j["dataset"] = o.dataset;
  j["index"] = o.method == "vanilla" ? J(nullptr) : J(o.index);
  j["out"] = o.out;
  j["max_iterations"] = o.run.max_iterations;
  j["top_k"] = o.run.top_k;
  j["regen_mode"] = to_string(o.run.regen_mode);
  j["validation_mode"] = to_string(o.run.validation_mode);
  j["early_stop"] = o.run.early_stop;
  j["validate_with_all_docs"] = o.run.validate_with_all_docs;
  j["save_raw"] = o.run.save_raw;
  j["record_timing"] = o.run.record_timing;
  j["gen_params"] = {{"keyword_gen", gen(o.run.keyword_params)},
                     {"answer_gen", gen(o.run.answer_params)},
                     {"validate", gen(o.run.validate_params)},
                     {"validate_cot", gen(o.run.cot_validate_params)}};
  if (!o.mock_script.empty()) {
    j["backend"] = {{"mock_script", o.mock_script}};
  } else {
    j["backend"] = {{"keyword_gen", step(o.keyword_backend)},
                    {"answer_gen", step(o.answer_backend)},
                    {"validate", step(o.validate_backend)},
                    {"max_retries", o.max_retries},
                    {"timeout_ms", o.timeout_ms},
                    {"max_in_flight", o.max_in_flight}};
  }
  j["prompts_dir"] = o.prompts_dir.empty() ? J(nullptr) : J(o.prompts_dir);
  j["jobs"] = o.jobs;
  j["limit"] = o.limit ? J(*o.limit) : J(nullptr);
  return j;
}

namespace detail {

struct TraceFile {
  std::optional<std::string> header;
  std::vector<std::pair<std::size_t, std::string>> traces;  // (question index, line)
};

inline TraceFile read_trace_file(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw Error("cannot open trace file: " + path);
  TraceFile tf;
  std::string line;
  std::size_t no = 0;
  while (std::getline(in, line)) {
    ++no;
    if (trim(line).empty()) continue;
    const auto j = nlohmann::ordered_json::parse(line, nullptr, false);
    if (j.is_discarded() || !j.is_object()) {
      // A run killed mid-write can leave a torn last line; drop it.
      continue;
    }
    if (j.value("kind", std::string{}) == "header") {
      if (!tf.header) tf.header = line;
      continue;
    }
    if (!j.contains("index") || !j["index"].is_number_unsigned()) {
      throw ParseError(path + ":" + std::to_string(no) + ": trace line without index");
    }
    tf.traces.emplace_back(j["index"].get<std::size_t>(), line);
  }
  return tf;
}

inline bool line_is_errored(const std::string& line) {
  const auto j = nlohmann::ordered_json::parse(line, nullptr, false);
  return j.is_discarded() || j.contains("error");
}

// Header first, then one line per question index in ascending order. When
// an index appears more than once the last successful line wins.
inline void resort_trace_file(const std::string& path) {
  auto tf = read_trace_file(path);
  std::map<std::size_t, std::string> by_index;
  for (auto& [idx, line] : tf.traces) {
    auto it = by_index.find(idx);
    if (it == by_index.end() || !line_is_errored(line) || line_is_errored(it->second)) by_index[idx] = line;
  }
  std::string content;
  if (tf.header) content += *tf.header + "\n";
  for (const auto& [idx, line] : by_index) content += line + "\n";
  write_file_atomically(path, content);
}

class BackendPool {
 public:
  explicit BackendPool(const RunOptions& o) {
    if (!o.mock_script.empty()) {
      mock_ = std::make_unique<MockBackend>(load_mock_script(o.mock_script));
      return;
    }
    keyword_ = client_for(o, o.keyword_backend);
    answer_ = client_for(o, o.answer_backend);
    validate_ = client_for(o, o.validate_backend);
  }

  Backends backends() {
    if (mock_) return Backends::uniform(*mock_);
    return Backends{*keyword_, *answer_, *validate_};
  }

  bool is_mock() const noexcept { return mock_ != nullptr; }

 private:
  LlmBackend* client_for(const RunOptions& o, const StepEndpoint& step) {
    OpenAiConfig cfg;
    cfg.endpoint = step.endpoint.empty() ? o.backend.endpoint : step.endpoint;
    cfg.model = step.model.empty() ? o.backend.model : step.model;
    if (cfg.endpoint.empty()) {
      throw PreconditionError("no LLM backend configured: pass --endpoint (or set ITERKEY_ENDPOINT) or --mock-script");
    }
    cfg.api_key = o.api_key;
    cfg.max_retries = o.max_retries;
    cfg.initial_backoff = std::chrono::milliseconds(o.retry_backoff_ms);
    cfg.timeout = std::chrono::milliseconds(o.timeout_ms);
    cfg.max_in_flight = o.max_in_flight;
    cfg.logprobs = o.logprobs;
    const auto key = cfg.endpoint + "\n" + cfg.model;
    auto& slot = clients_[key];
    if (!slot) slot = std::make_unique<OpenAiClient>(cfg);
    return slot.get();
  }

  std::unique_ptr<MockBackend> mock_;
  std::map<std::string, std::unique_ptr<OpenAiClient>> clients_;
  LlmBackend* keyword_ = nullptr;
  LlmBackend* answer_ = nullptr;
  LlmBackend* validate_ = nullptr;
};

}  // namespace detail

/// Runs `o.method` over every dataset question and writes one trace per
/// line after a header carrying the effective config and index hash.
/// Completed traces are flushed as they finish; on a clean exit the file
/// is rewritten sorted by question index. `cancel` stops scheduling new
/// questions (in-flight ones still finish and are written).
inline int cmd_run(const RunOptions& o, std::ostream& err, const std::atomic<bool>* cancel = nullptr) {
  if (o.method != "vanilla" && o.method != "rag" && o.method != "iterkey") {
    err << "usage error: --method must be one of vanilla, rag, iterkey\n";
    return kExitUsage;
  }
  try {
    o.run.validate();
  } catch (const PreconditionError& e) {
    err << "usage error: " << e.what() << "\n";
    return kExitUsage;
  }
  if (o.method != "vanilla" && o.index.empty()) {
    err << "usage error: --index is required for method " << o.method << "\n";
    return kExitUsage;
  }
  if (o.force && o.skip_completed) {
    err << "usage error: --force and --skip-completed are mutually exclusive\n";
    return kExitUsage;
  }
  const bool exists = std::filesystem::exists(o.out);
  if (exists && !o.force && !o.skip_completed) {
    err << "error: " << o.out << " exists; pass --force to overwrite or --skip-completed to resume\n";
    return kExitFailure;
  }

  std::vector<QaExample> dataset;
  std::optional<Index> index;
  std::unique_ptr<detail::BackendPool> pool;
  TemplateSet templates;
  try {
    dataset = load_qa_dataset(o.dataset, o.limit);
    if (o.method != "vanilla") index = load_index(o.index);
    if (!o.prompts_dir.empty()) templates.load_dir(o.prompts_dir);
    pool = std::make_unique<detail::BackendPool>(o);
  } catch (const PreconditionError& e) {
    err << "usage error: " << e.what() << "\n";
    return kExitUsage;
  } catch (const std::exception& e) {
    err << "error: " << e.what() << "\n";
    return kExitFailure;
  }

  std::set<std::size_t> done;
  bool have_header = false;
  if (exists && o.skip_completed) {
    try {
      const auto tf = detail::read_trace_file(o.out);
      have_header = tf.header.has_value();
      for (const auto& [idx, line] : tf.traces) {
        if (!detail::line_is_errored(line)) done.insert(idx);
      }
    } catch (const std::exception& e) {
      err << "error: " << e.what() << "\n";
      return kExitFailure;
    }
  }

  std::ofstream out(o.out, (exists && o.skip_completed) ? std::ios::app : std::ios::trunc);
  if (!out) {
    err << "error: cannot open " << o.out << " for writing\n";
    return kExitFailure;
  }
  if (!have_header) {
    nlohmann::ordered_json header;
    header["v"] = kTraceSchemaVersion;
    header["kind"] = "header";
    header["config"] = effective_config(o);
    header["index_hash"] = index ? nlohmann::ordered_json(index_content_hash(*index)) : nlohmann::ordered_json(nullptr);
    out << header.dump() << "\n" << std::flush;
  }

  std::vector<std::size_t> todo;
  for (std::size_t i = 0; i < dataset.size(); ++i) {
    if (!done.count(i)) todo.push_back(i);
  }

  // A scripted mock is consumed in call order, so questions run one at a
  // time to keep its responses deterministic.
  std::size_t jobs = std::max<std::size_t>(1, o.jobs);
  if (pool->is_mock()) jobs = 1;
  jobs = std::min(jobs, std::max<std::size_t>(1, todo.size()));

  auto backends = pool->backends();
  std::mutex write_mu;
  std::atomic<std::size_t> next{0};
  std::atomic<std::size_t> completed{0}, errored{0};

  auto run_one = [&](std::size_t qi) {
    const auto& q = dataset[qi].question;
    RunTrace t;
    try {
      if (o.method == "vanilla") {
        t = vanilla_trace(q, backends.answer_gen, o.run, templates);
      } else if (o.method == "rag") {
        t = rag_trace(q, *index, backends.answer_gen, o.run, templates);
      } else {
        t = run_iterkey(q, *index, backends, o.run, templates);
      }
    } catch (const std::exception& e) {
      t = RunTrace{};
      t.question = q;
      t.method = o.method == "iterkey" && o.run.regen_mode == RegenMode::docwise ? "iterkey_docwise" : o.method;
      t.early_stop = o.run.early_stop;
      t.max_iterations = o.method == "iterkey" ? o.run.max_iterations : 1;
      t.top_k = o.method == "vanilla" ? 0 : o.run.top_k;
      t.error = e.what();
    }
    t.question_index = qi;
    const auto line = trace_to_line(t);
    std::lock_guard lock(write_mu);
    out << line << "\n" << std::flush;
    if (t.error) {
      ++errored;
      err << "question " << qi << " failed: " << *t.error << "\n";
    } else {
      ++completed;
    }
  };

  auto worker = [&] {
    for (;;) {
      if (cancel && cancel->load()) return;
      const auto slot = next.fetch_add(1);
      if (slot >= todo.size()) return;
      run_one(todo[slot]);
    }
  };

  if (jobs == 1) {
    worker();
  } else {
    std::vector<std::jthread> threads;
    for (std::size_t i = 0; i < jobs; ++i) threads.emplace_back(worker);
  }
  out.close();

  const bool interrupted = cancel && cancel->load();
  try {
    detail::resort_trace_file(o.out);
  } catch (const std::exception& e) {
    err << "error: re-sorting " << o.out << ": " << e.what() << "\n";
    return kExitFailure;
  }
  const std::size_t attempted = completed + errored;
  err << "completed " << completed << ", errored " << errored << ", skipped " << done.size() << " of "
      << dataset.size() << " questions\n";
  if (interrupted) {
    err << "interrupted; rerun with --skip-completed to resume\n";
    return kExitFailure;
  }
  if (attempted > 0 && errored * 10 > attempted) {
    err << "error: more than 10% of questions failed\n";
    return kExitFailure;
  }
  return kExitOk;
}

// ---------------------------------------------------------------------------
// eval
// ---------------------------------------------------------------------------

struct EvalCmdOptions {
  std::string traces;
  std::string dataset;
  std::string mode = "base";
  std::vector<std::size_t> recall_ks;
  std::string index;
  std::string out;
  bool force = false;
};

inline nlohmann::ordered_json effective_config(const EvalCmdOptions& o) {
  using J = nlohmann::ordered_json;
  return {{"command", "eval"}, {"traces", o.traces}, {"dataset", o.dataset}, {"mode", o.mode},
          {"recall_ks", o.recall_ks}, {"index", o.index.empty() ? J(nullptr) : J(o.index)}};
}

inline std::vector<RunTrace> load_traces(const std::string& path) {
  const auto tf = detail::read_trace_file(path);
  std::map<std::size_t, RunTrace> by_index;
  for (const auto& [idx, line] : tf.traces) {
    auto t = trace_from_line(line);
    auto it = by_index.find(idx);
    if (it == by_index.end() || !t.error || it->second.error) by_index[idx] = std::move(t);
  }
  std::vector<RunTrace> out;
  out.reserve(by_index.size());
  for (auto& [idx, t] : by_index) out.push_back(std::move(t));
  return out;
}

/// Pairs each trace with its references: by question index when the
/// question text agrees, otherwise by unique question text.
inline std::vector<std::vector<std::string>> align_references(const std::vector<RunTrace>& traces,
                                                              const std::vector<QaExample>& dataset) {
  std::map<std::string, std::vector<std::size_t>> by_text;
  for (std::size_t i = 0; i < dataset.size(); ++i) by_text[dataset[i].question].push_back(i);
  std::vector<std::vector<std::string>> refs;
  refs.reserve(traces.size());
  for (const auto& t : traces) {
    if (t.question_index < dataset.size() && dataset[t.question_index].question == t.question) {
      refs.push_back(dataset[t.question_index].answers);
      continue;
    }
    auto it = by_text.find(t.question);
    if (it != by_text.end() && it->second.size() == 1) {
      refs.push_back(dataset[it->second.front()].answers);
      continue;
    }
    throw PreconditionError("traces and dataset are misaligned: trace " + std::to_string(t.question_index) +
                            " asks \"" + excerpt(t.question, 80) + "\" which has no unique match in the dataset");
  }
  return refs;
}

inline void print_report(const EvalResult& r, std::ostream& out) {
  using detail::fmt;
  out << "mode:            " << to_string(r.mode) << "\n"
      << "questions:       " << r.n << " (errored " << r.n_errored << ")\n"
      << "accuracy:        " << fmt(r.accuracy) << "\n"
      << "avg_iterations:  " << fmt(r.avg_iterations) << "\n"
      << "accuracy by iteration:";
  for (std::size_t i = 0; i < r.per_iteration_accuracy.size(); ++i) {
    out << "  iter" << (i + 1) << "=" << fmt(r.per_iteration_accuracy[i]);
  }
  out << "\n";
  for (const auto& [k, c] : r.recall) {
    out << "recall@" << k << " by horizon:";
    for (std::size_t h = 0; h < c.union_at_horizon.size(); ++h) out << "  h" << (h + 1) << "=" << fmt(c.union_at_horizon[h]);
    out << "  mean=" << fmt(c.mean_over_horizons) << "\n";
  }
  auto deltas = [&](const char* label, const std::vector<double>& steps, double total, double mean) {
    out << label;
    for (std::size_t s = 0; s < steps.size(); ++s) out << "  step" << (s + 2) << "=" << fmt(steps[s], 2);
    out << "  total=" << fmt(total, 2) << "  mean=" << fmt(mean, 2) << "\n";
  };
  deltas("new keywords:", r.deltas.keyword_step, r.deltas.keyword_total, r.deltas.keyword_mean);
  deltas("new documents:", r.deltas.doc_step, r.deltas.doc_total, r.deltas.doc_mean);
  out << "latency (s):";
  for (const auto& [step, s] : r.latency_s) out << "  " << step << "=" << fmt(s, 3);
  out << "\n";
}

inline int cmd_eval(const EvalCmdOptions& o, std::ostream& out, std::ostream& err) {
  EvalOptions eo;
  try {
    eo.mode = eval_mode_from_string(o.mode);
  } catch (const PreconditionError& e) {
    err << "usage error: " << e.what() << "\n";
    return kExitUsage;
  }
  eo.recall_ks = o.recall_ks;
  std::sort(eo.recall_ks.begin(), eo.recall_ks.end());
  eo.recall_ks.erase(std::unique(eo.recall_ks.begin(), eo.recall_ks.end()), eo.recall_ks.end());
  if (!eo.recall_ks.empty() && o.index.empty()) {
    err << "usage error: --recall-ks needs --index to read chunk texts\n";
    return kExitUsage;
  }
  if (!o.out.empty() && std::filesystem::exists(o.out) && !o.force) {
    err << "error: " << o.out << " exists; pass --force to overwrite\n";
    return kExitFailure;
  }
  try {
    const auto tf = detail::read_trace_file(o.traces);
    const auto traces = load_traces(o.traces);
    const auto dataset = load_qa_dataset(o.dataset);
    const auto refs = align_references(traces, dataset);
    std::optional<Index> index;
    std::optional<ChunkTextLookup> lookup;
    nlohmann::ordered_json index_hash = nullptr;
    if (!o.index.empty()) {
      index = load_index(o.index);
      lookup = index_lookup(*index);
      index_hash = index_content_hash(*index);
      if (tf.header) {
        const auto h = nlohmann::ordered_json::parse(*tf.header);
        if (h.contains("index_hash") && h["index_hash"].is_string() && h["index_hash"] != index_hash) {
          err << "warning: traces were produced with index " << h["index_hash"].get<std::string>()
              << " but --index has hash " << index_hash.get<std::string>() << "\n";
        }
      }
    }
    const auto result = evaluate(traces, refs, eo, lookup ? &*lookup : nullptr);
    print_report(result, out);
    if (!o.out.empty()) {
      nlohmann::ordered_json report;
      report["v"] = kTraceSchemaVersion;
      report["kind"] = "eval_report";
      report["config"] = effective_config(o);
      report["index_hash"] = index_hash;
      report["traces_header"] = tf.header ? nlohmann::ordered_json::parse(*tf.header) : nlohmann::ordered_json(nullptr);
      report["result"] = to_json(result);
      detail::write_file_atomically(o.out, report.dump(2) + "\n");
    }
    return kExitOk;
  } catch (const std::exception& e) {
    err << "error: " << e.what() << "\n";
    return kExitFailure;
  }
}

}  // namespace iterkey::cli
