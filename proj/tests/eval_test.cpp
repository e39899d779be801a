// SPDX-License-Identifier: Apache-2.0
#include <gtest/gtest.h>

#include <random>

#include "iterkey/eval.hpp"
#include "test_support.hpp"

using namespace iterkey;
using Refs = std::vector<std::string>;

namespace {

struct Step {
  std::string answer;
  bool verdict;
  std::vector<std::string> keywords = {};
  std::vector<std::string> docs = {};
};

RunTrace make_trace(const std::vector<Step>& steps, bool early_stop = false, std::size_t n = 0) {
  RunTrace t;
  t.question = "q";
  t.method = "iterkey";
  t.early_stop = early_stop;
  t.max_iterations = n ? n : steps.size();
  t.top_k = 3;
  for (std::size_t i = 0; i < steps.size(); ++i) {
    IterationRecord r;
    r.index = i;
    for (const auto& k : steps[i].keywords) r.keywords.add(k);
    for (const auto& d : steps[i].docs) r.retrieved.push_back(ScoredDoc{d, 1.0, 0});
    r.answer = steps[i].answer;
    BinaryVerdict v;
    v.choice = steps[i].verdict;
    r.verdict = v;
    t.iterations.push_back(std::move(r));
  }
  t.final_answer = t.iterations.back().answer;
  t.stop_reason = steps.back().verdict ? StopReason::validated_true : StopReason::budget_exhausted;
  return t;
}

double accuracy(const std::vector<RunTrace>& traces, const std::vector<Refs>& refs, EvalMode mode) {
  return score_mode(traces, refs, mode).accuracy;
}

ChunkTextLookup map_lookup(std::map<std::string, std::string> texts) {
  return [texts = std::move(texts)](std::string_view id) -> std::optional<std::string> {
    auto it = texts.find(std::string(id));
    if (it == texts.end()) return std::nullopt;
    return it->second;
  };
}

}  // namespace

TEST(Normalize, FourRules) {
  EXPECT_EQ(normalize_answer("The Eagle!"), "eagle");
  EXPECT_EQ(normalize_answer("Newark  Penn   Station"), "newark penn station");
  EXPECT_EQ(normalize_answer("Sir George Cayley"), "sir george cayley");
  EXPECT_EQ(normalize_answer("  a  cat, an owl & the  dog. "), "cat owl dog");
  EXPECT_EQ(normalize_answer("theory"), "theory");
  EXPECT_EQ(normalize_answer("\xe2\x80\x9c" "Eagle\xe2\x80\x9d"), "eagle");
  EXPECT_EQ(normalize_answer("\xc3\x89T\xc3\x89"), "\xc3\xa9t\xc3\xa9");
  EXPECT_EQ(normalize_answer(""), "");
}

TEST(Normalize, Idempotent) {
  for (const char* s : {"The Eagle!", "A  b.c", "Ann's  THE-end", "\xce\x91\xce\x92 (x)", "an an the"}) {
    EXPECT_EQ(normalize_answer(normalize_answer(s)), normalize_answer(s)) << s;
  }
}

TEST(ExactMatch, Basics) {
  EXPECT_TRUE(exact_match("eagle", {"The Eagle"}));
  EXPECT_FALSE(exact_match("Apollo 11 Eagle", {"Eagle"}));
  EXPECT_FALSE(exact_match("", {"x"}));
  EXPECT_TRUE(exact_match("Columbia", {"Eagle", "columbia."}));
  EXPECT_THROW(exact_match("x", {}), PreconditionError);
}

TEST(ExactMatch, InvariantUnderPreNormalization) {
  const std::vector<std::pair<std::string, std::string>> cases = {
      {"The Eagle!", "eagle"}, {"Penn  Station", "penn station."}, {"a", "the"}, {"Eagle", "Apollo"}};
  for (const auto& [p, r] : cases) {
    EXPECT_EQ(exact_match(p, {r}), exact_match(normalize_answer(p), {r}));
    EXPECT_EQ(exact_match(p, {r}), exact_match(p, {normalize_answer(r)}));
  }
}

TEST(DocContainsAnswer, WordBoundaries) {
  EXPECT_TRUE(doc_contains_answer("...the lunar module Eagle landed...", {"Eagle"}));
  EXPECT_FALSE(doc_contains_answer("a big party", {"art"}));
  EXPECT_TRUE(doc_contains_answer("Newark Penn Station, NJ", {"penn station"}));
  EXPECT_THROW(doc_contains_answer("x", {}), PreconditionError);
}

TEST(ScoreMode, BothCorrectWhenTrueAnswerRight) {
  const std::vector<RunTrace> t = {make_trace({{"X", false}, {"Y", true}})};
  const std::vector<Refs> r = {{"Y"}};
  EXPECT_EQ(accuracy(t, r, EvalMode::base), 1.0);
  EXPECT_EQ(accuracy(t, r, EvalMode::verified_true), 1.0);
  EXPECT_EQ(accuracy(t, r, EvalMode::verified_all), 1.0);
}

TEST(ScoreMode, MissFalse) {
  const std::vector<RunTrace> t = {make_trace({{"Y", false}, {"X", true}})};
  const std::vector<Refs> r = {{"Y"}};
  EXPECT_EQ(accuracy(t, r, EvalMode::base), 0.0);
  EXPECT_EQ(accuracy(t, r, EvalMode::verified_true), 0.0);
  EXPECT_EQ(accuracy(t, r, EvalMode::verified_all), 1.0);
}

TEST(ScoreMode, MissTrue) {
  const std::vector<RunTrace> t = {make_trace({{"X", true}, {"Y", true}})};
  const std::vector<Refs> r = {{"Y"}};
  EXPECT_EQ(accuracy(t, r, EvalMode::base), 0.0);
  EXPECT_EQ(accuracy(t, r, EvalMode::verified_true), 1.0);
}

TEST(ScoreMode, BaseFallsBackToLastAnswer) {
  const std::vector<RunTrace> t = {make_trace({{"X", false}, {"Y", false}})};
  EXPECT_EQ(accuracy(t, {{"Y"}}, EvalMode::base), 1.0);
  EXPECT_EQ(base_answer(t[0]), "Y");
}

TEST(ScoreMode, VerifiedModesRefuseEarlyStoppedTraces) {
  const std::vector<RunTrace> t = {make_trace({{"Y", true}}, true, 5)};
  EXPECT_THROW(score_mode(t, std::vector<Refs>{{"Y"}}, EvalMode::verified_true), PreconditionError);
  EXPECT_THROW(score_mode(t, std::vector<Refs>{{"Y"}}, EvalMode::verified_all), PreconditionError);
  EXPECT_NO_THROW(score_mode(t, std::vector<Refs>{{"Y"}}, EvalMode::base));
}

TEST(ScoreMode, MisalignedInputs) {
  const std::vector<RunTrace> t = {make_trace({{"Y", true}})};
  EXPECT_THROW(score_mode(t, {}, EvalMode::base), PreconditionError);
}

TEST(ScoreMode, ErroredTracesCountAsWrong) {
  RunTrace bad;
  bad.question = "q";
  bad.method = "iterkey";
  bad.error = "boom";
  const std::vector<RunTrace> t = {make_trace({{"Y", true}}), bad};
  const auto r = score_mode(t, std::vector<Refs>{{"Y"}, {"Y"}}, EvalMode::base);
  EXPECT_EQ(r.accuracy, 0.5);
  EXPECT_EQ(r.n_errored, 1u);
  EXPECT_EQ(r.avg_iterations, 1.0);
}

TEST(ScoreMode, PerIterationAccuracyIsCumulative) {
  const std::vector<RunTrace> t = {make_trace({{"A", true}}, true, 3), make_trace({{"X", false}, {"B", true}}, true, 3),
                                   make_trace({{"X", false}, {"X", false}, {"X", false}}, true, 3)};
  const auto r = score_mode(t, std::vector<Refs>{{"A"}, {"B"}, {"C"}}, EvalMode::base);
  ASSERT_EQ(r.per_iteration_accuracy.size(), 3u);
  EXPECT_DOUBLE_EQ(r.per_iteration_accuracy[0], 1.0 / 3);
  EXPECT_DOUBLE_EQ(r.per_iteration_accuracy[1], 2.0 / 3);
  EXPECT_DOUBLE_EQ(r.per_iteration_accuracy[2], 2.0 / 3);
  EXPECT_DOUBLE_EQ(r.avg_iterations, (1.0 + 2.0 + 3.0) / 3);
}

TEST(ScoreMode, AvgIterationsIsNWhenNothingValidates) {
  const std::vector<RunTrace> t = {make_trace({{"X", false}, {"X", false}}, true, 2),
                                   make_trace({{"X", false}, {"X", false}}, true, 2)};
  EXPECT_EQ(score_mode(t, std::vector<Refs>{{"A"}, {"A"}}, EvalMode::base).avg_iterations, 2.0);
}

TEST(ScoreMode, MonotoneAcrossModesOnRandomTraces) {
  std::mt19937_64 rng(11);
  std::bernoulli_distribution coin(0.5);
  std::vector<RunTrace> traces;
  std::vector<Refs> refs;
  for (int q = 0; q < 200; ++q) {
    std::vector<Step> steps;
    for (int i = 0; i < 5; ++i) steps.push_back({coin(rng) ? "right" : "wrong", coin(rng)});
    traces.push_back(make_trace(steps));
    refs.push_back({"right"});
  }
  const double b = accuracy(traces, refs, EvalMode::base);
  const double vt = accuracy(traces, refs, EvalMode::verified_true);
  const double va = accuracy(traces, refs, EvalMode::verified_all);
  EXPECT_LE(b, vt);
  EXPECT_LE(vt, va);
}

TEST(Recall, UnionOverHorizons) {
  const std::vector<RunTrace> t = {make_trace({{"a", false, {}, {"miss"}}, {"b", false, {}, {"hit"}}})};
  const auto lookup = map_lookup({{"miss", "nothing here"}, {"hit", "the lunar module Eagle"}});
  const auto c = recall_at_k(t, std::vector<Refs>{{"Eagle"}}, 1, lookup);
  ASSERT_EQ(c.union_at_horizon.size(), 2u);
  EXPECT_EQ(c.union_at_horizon[0], 0.0);
  EXPECT_EQ(c.union_at_horizon[1], 1.0);
  EXPECT_EQ(c.mean_over_horizons, 0.5);
}

TEST(Recall, AllMiss) {
  const std::vector<RunTrace> t = {make_trace({{"a", false, {}, {"miss"}}})};
  const auto c = recall_at_k(t, std::vector<Refs>{{"Eagle"}}, 1, map_lookup({{"miss", "nothing"}}));
  EXPECT_EQ(c.union_at_horizon[0], 0.0);
}

TEST(Recall, MonotoneInK) {
  const std::vector<RunTrace> t = {make_trace({{"a", false, {}, {"x", "y", "hit"}}}),
                                   make_trace({{"a", false, {}, {"hit", "x", "y"}}})};
  const auto lookup = map_lookup({{"x", "nope"}, {"y", "nope"}, {"hit", "Eagle"}});
  const std::vector<Refs> refs = {{"Eagle"}, {"Eagle"}};
  const auto r1 = recall_at_k(t, refs, 1, lookup);
  const auto r3 = recall_at_k(t, refs, 3, lookup);
  EXPECT_EQ(r1.union_at_horizon[0], 0.5);
  EXPECT_EQ(r3.union_at_horizon[0], 1.0);
  EXPECT_THROW(recall_at_k(t, refs, 4, lookup), PreconditionError);
}

TEST(Recall, EarlyStoppedTraceKeepsHitForLaterHorizons) {
  const std::vector<RunTrace> t = {make_trace({{"a", true, {}, {"hit"}}}, true, 3)};
  const auto c = recall_at_k(t, std::vector<Refs>{{"Eagle"}}, 1, map_lookup({{"hit", "Eagle"}}));
  EXPECT_EQ(c.union_at_horizon, (std::vector<double>{1.0, 1.0, 1.0}));
}

TEST(Deltas, NewKeywordsAgainstPriorUnion) {
  const std::vector<RunTrace> t = {make_trace({{"a", false, {"a", "b"}, {"d1"}}, {"a", false, {"b", "c", "d"}, {"d1"}}})};
  const auto s = delta_stats(t);
  ASSERT_EQ(s.keyword_step.size(), 1u);
  EXPECT_EQ(s.keyword_step[0], 2.0);
  EXPECT_EQ(s.doc_step[0], 0.0);
}

TEST(Deltas, TotalAndMeanIdentities) {
  const std::vector<RunTrace> t = {
      make_trace({{"", false, {"a"}, {"1"}}, {"", false, {"b", "c"}, {"2"}}, {"", false, {"a", "d"}, {"1", "3"}}}),
      make_trace({{"", false, {"x"}, {"9"}}, {"", false, {"x"}, {"9"}}, {"", false, {"y"}, {"8", "7"}}})};
  const auto s = delta_stats(t);
  EXPECT_EQ(s.keyword_step, (std::vector<double>{1.0, 1.0}));
  EXPECT_EQ(s.doc_step, (std::vector<double>{0.5, 1.5}));
  EXPECT_EQ(s.keyword_total, 2.0);
  EXPECT_EQ(s.keyword_mean, 1.0);
  EXPECT_EQ(s.doc_total, 2.0);
  EXPECT_EQ(s.doc_mean, 1.0);
}

TEST(Latency, MeansAndTotal) {
  auto a = make_trace({{"x", true}});
  auto b = make_trace({{"x", true}});
  a.iterations[0].wall_time_ms = {{"retrieval", 10.0}, {"answer_generation", 100.0}};
  b.iterations[0].wall_time_ms = {{"retrieval", 30.0}, {"answer_generation", 300.0}};
  const std::vector<RunTrace> t = {a, b};
  const auto rows = latency_report(t);
  std::map<std::string, double> m(rows.begin(), rows.end());
  EXPECT_DOUBLE_EQ(m.at("retrieval"), 0.02);
  EXPECT_DOUBLE_EQ(m.at("answer_generation"), 0.2);
  EXPECT_EQ(m.count("answer_validation"), 0u);
  EXPECT_DOUBLE_EQ(m.at("total"), 0.22);
  EXPECT_EQ(rows.back().first, "total");
}

TEST(Evaluate, JsonReportFields) {
  const std::vector<RunTrace> t = {make_trace({{"x", false, {"k"}, {"d"}}, {"Eagle", true, {"j"}, {"d"}}}, true, 5)};
  EvalOptions opts;
  opts.recall_ks = {1};
  const auto lookup = map_lookup({{"d", "Eagle"}});
  const auto r = evaluate(t, std::vector<Refs>{{"Eagle"}}, opts, &lookup);
  const auto j = to_json(r);
  EXPECT_EQ(j["mode"], "base");
  EXPECT_EQ(j["accuracy"], 1.0);
  EXPECT_EQ(j["avg_iterations"], 2.0);
  EXPECT_TRUE(j["recall_at"].contains("1"));
  EXPECT_EQ(j["keyword_deltas"]["steps"].size(), 4u);
  EXPECT_THROW(evaluate(t, std::vector<Refs>{{"Eagle"}}, opts, nullptr), PreconditionError);
}

TEST(EvalMode, FromString) {
  EXPECT_EQ(eval_mode_from_string("verified_all"), EvalMode::verified_all);
  EXPECT_THROW(eval_mode_from_string("nope"), PreconditionError);
}
