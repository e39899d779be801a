// SPDX-License-Identifier: Apache-2.0
#include <gtest/gtest.h>

#include <cmath>
#include <sstream>

#include "iterkey/llm.hpp"
#include "iterkey/mock_backend.hpp"
#include "iterkey/openai_client.hpp"
#include "stub_server.hpp"
#include "test_support.hpp"

using namespace iterkey;
using iterkey::test::chat_reply;
using iterkey::test::StubReply;
using iterkey::test::StubServer;

namespace {

std::vector<ChatMessage> msgs(const std::string& user) {
  return {ChatMessage{Role::system, "You are an assistant."}, ChatMessage{Role::user, user}};
}

OpenAiConfig config_for(const StubServer& s) {
  OpenAiConfig c;
  c.endpoint = s.endpoint();
  c.model = "stub-model";
  c.initial_backoff = std::chrono::milliseconds(1);
  c.timeout = std::chrono::milliseconds(5000);
  return c;
}

}  // namespace

TEST(Complete, ReturnsTextWithTrailingWhitespaceTrimmed) {
  MockBackend mock({{"", "  Eagle \n", {}, {}}});
  EXPECT_EQ(complete(mock, msgs("q"), GenParams{}), "  Eagle");
}

TEST(Complete, EmptyMessagesIsPreconditionError) {
  MockBackend mock({{"", "x", {}, {}}});
  EXPECT_THROW(complete(mock, {}, GenParams{}), PreconditionError);
  EXPECT_EQ(mock.calls(), 0u);
}

TEST(GenParams, Validation) {
  EXPECT_THROW((GenParams{0, 0.0}).validate(), PreconditionError);
  EXPECT_THROW((GenParams{5, -1.0}).validate(), PreconditionError);
  EXPECT_NO_THROW((GenParams{5, 0.7}).validate());
}

TEST(MockBackend, FirstUnconsumedMatchingEntry) {
  MockBackend mock({{"Generate a list", R"(["Moon landing"])", {}, {}}, {"Query", "Eagle", {}, {}}});
  EXPECT_EQ(complete(mock, msgs("Query: who?"), {}), "Eagle");
  EXPECT_EQ(complete(mock, msgs("Generate a list of important keywords"), {}), R"(["Moon landing"])");
  EXPECT_EQ(mock.calls(), 2u);
  EXPECT_EQ(mock.remaining(), 0u);
}

TEST(MockBackend, ExhaustionIsAnError) {
  MockBackend mock({{"Generate a list", "x", {}, {}}});
  complete(mock, msgs("Generate a list"), {});
  try {
    complete(mock, msgs("Generate a list"), {});
    FAIL();
  } catch (const MockScriptError& e) {
    EXPECT_NE(std::string(e.what()).find("exhausted"), std::string::npos);
  }
}

TEST(MockBackend, NoMatchNamesPromptExcerpt) {
  MockBackend mock({{"Generate a list", "x", {}, {}}});
  try {
    complete(mock, msgs("Something unrelated entirely"), {});
    FAIL();
  } catch (const MockScriptError& e) {
    EXPECT_NE(std::string(e.what()).find("Something unrelated"), std::string::npos) << e.what();
    EXPECT_FALSE(e.retryable());
  }
}

TEST(MockBackend, IdenticalScriptAndCallsGiveIdenticalResponses) {
  const std::vector<ScriptEntry> script = {{"a", "1", {}, {}}, {"b", "2", {}, {}}, {"", "3", {}, {}}};
  std::vector<std::string> first, second;
  for (auto* out : {&first, &second}) {
    MockBackend m(script);
    for (const char* p : {"b", "a", "zzz"}) out->push_back(complete(m, msgs(p), {}));
  }
  EXPECT_EQ(first, second);
  EXPECT_EQ(first, (std::vector<std::string>{"2", "1", "3"}));
}

TEST(MockScript, ParsesJsonLines) {
  std::istringstream in(R"({"match":"Is the following","response":"True","p_true":0.7,"p_false":0.3}

{"response":"fallback"}
)");
  const auto script = parse_mock_script(in);
  ASSERT_EQ(script.size(), 2u);
  EXPECT_EQ(script[0].match, "Is the following");
  EXPECT_DOUBLE_EQ(*script[0].p_true, 0.7);
  EXPECT_EQ(script[1].match, "");
  EXPECT_FALSE(script[1].has_probabilities());
}

TEST(MockScript, RejectsBadLines) {
  std::istringstream a("{oops\n");
  EXPECT_THROW(parse_mock_script(a), ParseError);
  std::istringstream b(R"({"match":"x"})");
  EXPECT_THROW(parse_mock_script(b), ParseError);
  std::istringstream c(R"({"response":"x","p_true":1.5})");
  EXPECT_THROW(parse_mock_script(c), ParseError);
}

TEST(ForcedChoice, LogprobArgmax) {
  MockBackend mock({{"", "True", 0.7, 0.3}});
  const auto v = forced_choice(mock, msgs("Is the following answer correct?"), GenParams{30, 0.0});
  EXPECT_TRUE(v.choice);
  EXPECT_EQ(v.method, VerdictMethod::logprob);
  EXPECT_NEAR(*v.p_true, 0.7, 1e-12);
  EXPECT_NEAR(*v.p_false, 0.3, 1e-12);
  EXPECT_EQ(mock.calls(), 1u);
}

TEST(ForcedChoice, TextFallbackWordScan) {
  MockBackend mock({{"", " False.", {}, {}}});
  const auto v = forced_choice(mock, msgs("q"), GenParams{30, 0.0});
  EXPECT_FALSE(v.choice);
  EXPECT_EQ(v.method, VerdictMethod::text_fallback);
  EXPECT_FALSE(v.p_true.has_value());
  EXPECT_FALSE(v.p_false.has_value());
  EXPECT_FALSE(v.unparsed);
}

TEST(ForcedChoice, UnparseableFallbackIsFalseAndFlagged) {
  MockBackend mock({{"", "I cannot say", {}, {}}});
  const auto v = forced_choice(mock, msgs("q"), GenParams{30, 0.0});
  EXPECT_FALSE(v.choice);
  EXPECT_TRUE(v.unparsed);
  EXPECT_EQ(v.method, VerdictMethod::text_fallback);
}

TEST(ForcedChoice, TieGoesToFalse) {
  MockBackend mock({{"", "x", 0.5, 0.5}});
  EXPECT_FALSE(forced_choice(mock, msgs("q"), GenParams{}).choice);
}

TEST(VerdictFromLogprobs, CaseAndWhitespaceInsensitive) {
  const std::vector<TokenLogprob> alts = {{" true", std::log(0.2)}, {"FALSE", std::log(0.6)}, {"maybe", std::log(0.1)}};
  const auto v = verdict_from_logprobs(alts);
  ASSERT_TRUE(v);
  EXPECT_FALSE(v->choice);
  EXPECT_NEAR(*v->p_true, 0.2, 1e-12);
}

TEST(VerdictFromLogprobs, SymmetricUnderOrder) {
  std::vector<TokenLogprob> alts = {{"True", std::log(0.55)}, {"False", std::log(0.45)}};
  const auto a = verdict_from_logprobs(alts);
  std::swap(alts[0], alts[1]);
  const auto b = verdict_from_logprobs(alts);
  EXPECT_EQ(a->choice, b->choice);
  EXPECT_EQ(a->p_true, b->p_true);
  EXPECT_EQ(a->p_false, b->p_false);
}

TEST(VerdictFromLogprobs, BestVariantWinsAndMissingOptionIsZero) {
  const std::vector<TokenLogprob> alts = {{"True", std::log(0.1)}, {" True", std::log(0.4)}, {"Yes", std::log(0.5)}};
  const auto v = verdict_from_logprobs(alts);
  ASSERT_TRUE(v);
  EXPECT_TRUE(v->choice);
  EXPECT_NEAR(*v->p_true, 0.4, 1e-12);
  EXPECT_EQ(*v->p_false, 0.0);
  EXPECT_FALSE(verdict_from_logprobs(std::vector<TokenLogprob>{{"Yes", 0.0}}));
}

TEST(CountingBackend, CountsCompletionsAndProbes) {
  MockBackend mock({{"", "True", 0.9, 0.1}, {"", "answer", {}, {}}});
  CountingBackend counting(mock);
  forced_choice(counting, msgs("q"), GenParams{});
  complete(counting, msgs("q"), GenParams{});
  EXPECT_EQ(counting.probes(), 1u);
  EXPECT_EQ(counting.completions(), 1u);
  EXPECT_EQ(counting.calls(), 2u);
}

TEST(SplitEndpoint, AppendsChatCompletionsPath) {
  EXPECT_EQ(split_endpoint("http://h:8000"), (std::pair<std::string, std::string>{"http://h:8000", "/v1/chat/completions"}));
  EXPECT_EQ(split_endpoint("http://h:8000/v1/").second, "/v1/chat/completions");
  EXPECT_EQ(split_endpoint("http://h/api/v1/chat/completions").second, "/api/v1/chat/completions");
  EXPECT_THROW(split_endpoint("h:8000"), PreconditionError);
}

TEST(ParseTopLogprobs, LegacyShape) {
  const auto choice = nlohmann::json::parse(R"({"logprobs":{"top_logprobs":[{"True":-0.1,"False":-2.3}]}})");
  const auto alts = parse_top_logprobs(choice);
  ASSERT_TRUE(alts);
  EXPECT_EQ(alts->size(), 2u);
  EXPECT_FALSE(parse_top_logprobs(nlohmann::json::parse(R"({"logprobs":null})")));
}

TEST(OpenAiClient, RequestShapeAndAuth) {
  StubServer server([](const nlohmann::json&, std::size_t) { return StubReply{200, chat_reply("Eagle")}; });
  auto cfg = config_for(server);
  cfg.api_key = "sk-test";
  OpenAiClient client(cfg);
  EXPECT_EQ(complete(client, msgs("Query: who?"), GenParams{50, 0.0}), "Eagle");
  const auto reqs = server.requests();
  ASSERT_EQ(reqs.size(), 1u);
  const auto& r = reqs[0];
  EXPECT_EQ(r["model"], "stub-model");
  EXPECT_EQ(r["max_tokens"], 50);
  EXPECT_EQ(r["temperature"], 0.0);
  ASSERT_EQ(r["messages"].size(), 2u);
  EXPECT_EQ(r["messages"][0]["role"], "system");
  EXPECT_EQ(r["messages"][1]["role"], "user");
  EXPECT_EQ(r["messages"][1]["content"], "Query: who?");
  EXPECT_FALSE(r.contains("logprobs"));
  EXPECT_EQ(server.auth_headers()[0], "Bearer sk-test");
}

TEST(OpenAiClient, ProbeRequestsLogprobsAndTakesArgmax) {
  StubServer server([](const nlohmann::json&, std::size_t) {
    return StubReply{200, chat_reply("False", {{"False", std::log(0.35)}, {"True", std::log(0.6)}, {"The", -4.0}})};
  });
  OpenAiClient client(config_for(server));
  const auto v = forced_choice(client, msgs("Is the following answer correct?"), GenParams{30, 0.0});
  EXPECT_TRUE(v.choice);
  EXPECT_EQ(v.method, VerdictMethod::logprob);
  const auto reqs = server.requests();
  ASSERT_EQ(reqs.size(), 1u);
  EXPECT_EQ(reqs[0]["logprobs"], true);
  EXPECT_GE(reqs[0]["top_logprobs"].get<int>(), 5);
  EXPECT_EQ(reqs[0]["max_tokens"], 1);
}

TEST(OpenAiClient, FallsBackToTextWithoutLogprobs) {
  StubServer server([](const nlohmann::json&, std::size_t) { return StubReply{200, chat_reply("True, the answer is right")}; });
  OpenAiClient client(config_for(server));
  const auto v = forced_choice(client, msgs("q"), GenParams{30, 0.0});
  EXPECT_TRUE(v.choice);
  EXPECT_EQ(v.method, VerdictMethod::text_fallback);
  auto reqs = server.requests();
  ASSERT_EQ(reqs.size(), 2u);
  EXPECT_EQ(reqs[1]["max_tokens"], 30);
  EXPECT_FALSE(reqs[1].contains("logprobs"));
  EXPECT_FALSE(client.logprobs_supported());
  // Once the server is known to omit logprobs, probing stops.
  forced_choice(client, msgs("q"), GenParams{30, 0.0});
  EXPECT_EQ(server.requests().size(), 3u);
}

TEST(OpenAiClient, NeverModeSkipsProbe) {
  StubServer server([](const nlohmann::json&, std::size_t) { return StubReply{200, chat_reply("False")}; });
  auto cfg = config_for(server);
  cfg.logprobs = LogprobMode::never;
  OpenAiClient client(cfg);
  EXPECT_FALSE(forced_choice(client, msgs("q"), GenParams{30, 0.0}).choice);
  EXPECT_EQ(server.requests().size(), 1u);
}

TEST(OpenAiClient, RetriesServerErrorsThenSucceeds) {
  StubServer server([](const nlohmann::json&, std::size_t n) {
    return n < 2 ? StubReply{503, R"({"error":"busy"})"} : StubReply{200, chat_reply("ok")};
  });
  OpenAiClient client(config_for(server));
  EXPECT_EQ(complete(client, msgs("q"), GenParams{}), "ok");
  EXPECT_EQ(server.requests().size(), 3u);
}

TEST(OpenAiClient, GivesUpAfterMaxRetries) {
  StubServer server([](const nlohmann::json&, std::size_t) { return StubReply{500, "boom"}; });
  OpenAiClient client(config_for(server));
  try {
    complete(client, msgs("q"), GenParams{});
    FAIL();
  } catch (const HttpStatusError& e) {
    EXPECT_EQ(e.status(), 500);
    EXPECT_NE(std::string(e.what()).find("boom"), std::string::npos);
  }
  EXPECT_EQ(server.requests().size(), 4u);
}

TEST(OpenAiClient, ClientErrorsAreNotRetried) {
  StubServer server([](const nlohmann::json&, std::size_t) { return StubReply{400, R"({"error":"bad"})"}; });
  OpenAiClient client(config_for(server));
  EXPECT_THROW(complete(client, msgs("q"), GenParams{}), HttpStatusError);
  EXPECT_EQ(server.requests().size(), 1u);
}

TEST(OpenAiClient, SuccessfulResponseIsNeverRetried) {
  StubServer server([](const nlohmann::json&, std::size_t) { return StubReply{200, R"({"choices":[]})"}; });
  OpenAiClient client(config_for(server));
  EXPECT_THROW(complete(client, msgs("q"), GenParams{}), BackendError);
  EXPECT_EQ(server.requests().size(), 1u);
}

TEST(OpenAiClient, OnlyPlainHttpEndpoints) {
  OpenAiConfig cfg;
  cfg.endpoint = "https://api.example.com";
  EXPECT_THROW(OpenAiClient{cfg}, PreconditionError);
  cfg.endpoint = "ftp://host";
  EXPECT_THROW(OpenAiClient{cfg}, PreconditionError);
  cfg.endpoint = "http://127.0.0.1:9/v1";
  EXPECT_EQ(OpenAiClient{cfg}.path(), "/v1/chat/completions");
}

TEST(OpenAiClient, UnreachableEndpointIsTransportError) {
  const int port = test::closed_port();
  OpenAiConfig cfg;
  cfg.endpoint = "http://127.0.0.1:" + std::to_string(port);
  cfg.model = "m";
  cfg.max_retries = 2;
  cfg.initial_backoff = std::chrono::milliseconds(1);
  OpenAiClient client(cfg);
  try {
    complete(client, msgs("q"), GenParams{});
    FAIL();
  } catch (const TransportError& e) {
    EXPECT_TRUE(e.retryable());
  }
  EXPECT_EQ(client.requests_sent(), 3u);
}

TEST(OpenAiClient, ConcurrentRequestsAreSafe) {
  StubServer server([](const nlohmann::json& req, std::size_t) {
    return StubReply{200, chat_reply(test::last_user_text(req) + "!")};
  });
  auto cfg = config_for(server);
  cfg.max_in_flight = 2;
  OpenAiClient client(cfg);
  std::vector<std::string> out(8);
  {
    std::vector<std::jthread> threads;
    for (int i = 0; i < 8; ++i) {
      threads.emplace_back([&, i] { out[i] = complete(client, msgs("q" + std::to_string(i)), GenParams{}); });
    }
  }
  for (int i = 0; i < 8; ++i) EXPECT_EQ(out[i], "q" + std::to_string(i) + "!");
  EXPECT_EQ(server.requests().size(), 8u);
}
