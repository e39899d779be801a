// SPDX-License-Identifier: Apache-2.0
//
// iterkey: build BM25 indexes, run vanilla / rag / iterkey pipelines over a
// QA dataset, and evaluate the resulting trace files.
//
// Options may also come from a TOML/INI file given with --config, with one
// section per subcommand ([index], [run], [eval]). Command line flags
// override the file, and the file overrides ITERKEY_ENDPOINT and
// ITERKEY_API_KEY from the environment.

#include <atomic>
#include <csignal>
#include <cstdlib>
#include <iostream>
#include <map>
#include <string>

#include <CLI11.hpp>

#include "iterkey/commands.hpp"

namespace {

std::atomic<bool> g_cancel{false};

extern "C" void on_sigint(int) { g_cancel.store(true); }

void apply_env(CLI::Option* opt, std::string& target, const char* name) {
  if (opt->count() > 0) return;
  if (const char* v = std::getenv(name); v && *v) target = v;
}

}  // namespace

int main(int argc, char** argv) {
  namespace ik = iterkey::cli;

  CLI::App app{"Iterative keyword generation with BM25 retrieval for question answering"};
  app.set_config("--config", "", "Read options from a TOML/INI file with [index], [run] or [eval] sections");
  app.fallthrough();
  app.require_subcommand(1);

  // index ----------------------------------------------------------------
  ik::IndexOptions io;
  std::size_t io_limit = 0;
  auto* index = app.add_subcommand("index", "Chunk a JSONL corpus and build a BM25 index");
  index->add_option("--corpus", io.corpus, "JSONL corpus with id, title, text")->required();
  index->add_option("--out", io.out, "Index file to write")->required();
  index->add_option("--chunk-size", io.chunk_size, "Tokens per chunk")->capture_default_str();
  index->add_option("--overlap", io.overlap, "Tokens shared by consecutive chunks")->capture_default_str();
  index->add_option("--k1", io.k1, "BM25 term-frequency saturation")->capture_default_str();
  index->add_option("--b", io.b, "BM25 length normalization")->capture_default_str();
  index->add_option("--stopwords", io.stopwords, "none, english, or a file of words")->capture_default_str();
  index->add_flag("--stem", io.stem, "Strip English plural suffixes");
  index->add_option("--limit", io_limit, "Read only the first N documents");
  index->add_flag("--force", io.force, "Overwrite an existing index");

  // run ------------------------------------------------------------------
  ik::RunOptions ro;
  std::string regen_mode = "keywords_only";
  std::string logprobs = "auto";
  bool no_early_stop = false, cot = false, no_timing = false;
  std::size_t ro_limit = 0;
  auto* run = app.add_subcommand("run", "Answer every dataset question and write a trace file");
  run->add_option("--dataset", ro.dataset, "JSONL dataset with question, answers")->required();
  run->add_option("--index", ro.index, "Index file (not needed for vanilla)");
  run->add_option("--out", ro.out, "Trace file to write")->required();
  run->add_option("--method", ro.method, "vanilla, rag or iterkey")
      ->check(CLI::IsMember({"vanilla", "rag", "iterkey"}))
      ->capture_default_str();
  run->add_option("--max-iterations", ro.run.max_iterations, "Iteration budget")->capture_default_str();
  run->add_option("--top-k", ro.run.top_k, "Chunks retrieved per iteration")->capture_default_str();
  run->add_option("--regen-mode", regen_mode, "keywords_only or docwise")
      ->check(CLI::IsMember({"keywords_only", "docwise"}))
      ->capture_default_str();
  run->add_flag("--no-early-stop", no_early_stop, "Run every iteration even after a True verdict");
  run->add_flag("--cot", cot, "Validate with a chain-of-thought prompt");
  run->add_flag("--validate-all-docs", ro.run.validate_with_all_docs, "Validate against all documents seen so far");
  run->add_flag("--save-raw", ro.run.save_raw, "Embed prompts and raw completions in traces");
  run->add_flag("--no-timing", no_timing, "Record zero wall times (reproducible trace files)");
  run->add_option("--mock-script", ro.mock_script, "Scripted JSONL responses instead of a live model");
  run->add_option("--prompts-dir", ro.prompts_dir, "Directory of <template>.txt overrides");
  run->add_option("--endpoint", ro.backend.endpoint, "OpenAI-compatible base URL for every step");
  run->add_option("--model", ro.backend.model, "Model id for every step");
  run->add_option("--keyword-endpoint", ro.keyword_backend.endpoint, "Endpoint for keyword generation");
  run->add_option("--keyword-model", ro.keyword_backend.model, "Model for keyword generation");
  run->add_option("--answer-endpoint", ro.answer_backend.endpoint, "Endpoint for answer generation");
  run->add_option("--answer-model", ro.answer_backend.model, "Model for answer generation");
  run->add_option("--validate-endpoint", ro.validate_backend.endpoint, "Endpoint for answer validation");
  run->add_option("--validate-model", ro.validate_backend.model, "Model for answer validation");
  auto* api_key = run->add_option("--api-key", ro.api_key, "Bearer token");
  run->add_option("--logprobs", logprobs, "auto, always or never")
      ->check(CLI::IsMember({"auto", "always", "never"}))
      ->capture_default_str();
  run->add_option("--max-retries", ro.max_retries, "Retries for transport and 5xx errors")->capture_default_str();
  run->add_option("--retry-backoff-ms", ro.retry_backoff_ms, "Initial backoff, doubled per retry")
      ->capture_default_str();
  run->add_option("--timeout-ms", ro.timeout_ms, "Per-request timeout")->capture_default_str();
  run->add_option("--max-in-flight", ro.max_in_flight, "Concurrent requests per endpoint")->capture_default_str();
  run->add_option("--jobs", ro.jobs, "Questions processed concurrently")->capture_default_str();
  run->add_option("--limit", ro_limit, "Process only the first N questions");
  run->add_flag("--force", ro.force, "Overwrite an existing trace file");
  run->add_flag("--skip-completed", ro.skip_completed, "Resume: keep finished traces, run the rest");
  auto* endpoint = run->get_option("--endpoint");

  // eval -----------------------------------------------------------------
  ik::EvalCmdOptions eo;
  auto* eval = app.add_subcommand("eval", "Score a trace file against dataset references");
  eval->add_option("--traces", eo.traces, "Trace file from `iterkey run`")->required();
  eval->add_option("--dataset", eo.dataset, "JSONL dataset with question, answers")->required();
  eval->add_option("--mode", eo.mode, "base, verified_true or verified_all")
      ->check(CLI::IsMember({"base", "verified_true", "verified_all"}))
      ->capture_default_str();
  eval->add_option("--recall-ks", eo.recall_ks, "Comma-separated k values for recall@k")->delimiter(',');
  eval->add_option("--index", eo.index, "Index file (needed for recall)");
  eval->add_option("--out", eo.out, "Write the JSON report here");
  eval->add_flag("--force", eo.force, "Overwrite an existing report");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e);
    return rc == 0 ? ik::kExitOk : ik::kExitUsage;
  }

  if (index->parsed()) {
    if (index->count("--limit")) io.limit = io_limit;
    return ik::cmd_index(io, std::cout, std::cerr);
  }
  if (run->parsed()) {
    apply_env(endpoint, ro.backend.endpoint, "ITERKEY_ENDPOINT");
    apply_env(api_key, ro.api_key, "ITERKEY_API_KEY");
    ro.run.early_stop = !no_early_stop;
    ro.run.record_timing = !no_timing;
    ro.run.regen_mode = regen_mode == "docwise" ? iterkey::RegenMode::docwise : iterkey::RegenMode::keywords_only;
    ro.run.validation_mode = cot ? iterkey::ValidationMode::cot : iterkey::ValidationMode::plain;
    static const std::map<std::string, iterkey::LogprobMode> modes = {{"auto", iterkey::LogprobMode::automatic},
                                                                      {"always", iterkey::LogprobMode::always},
                                                                      {"never", iterkey::LogprobMode::never}};
    ro.logprobs = modes.at(logprobs);
    if (run->count("--limit")) ro.limit = ro_limit;
    std::signal(SIGINT, on_sigint);
    return ik::cmd_run(ro, std::cerr, &g_cancel);
  }
  return ik::cmd_eval(eo, std::cout, std::cerr);
}
