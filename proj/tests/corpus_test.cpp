// SPDX-License-Identifier: Apache-2.0
#include <gtest/gtest.h>

#include <random>

#include "iterkey/corpus.hpp"
#include "oracles.hpp"
#include "test_support.hpp"

using namespace iterkey;
using iterkey::test::TempDir;
using iterkey::test::write_file;
using Spans = std::vector<std::pair<std::size_t, std::size_t>>;

namespace {

std::string words(std::size_t n) {
  std::string s;
  for (std::size_t i = 0; i < n; ++i) s += "t" + std::to_string(i) + " ";
  return s;
}

}  // namespace

TEST(LoadCorpus, ReadsDocumentsInFileOrder) {
  TempDir dir;
  write_file(dir.file("c.jsonl"), R"({"id":"a","title":"A","text":"first"}
{"id":"b","title":"","text":"second"}
)");
  const auto docs = load_corpus(dir.file("c.jsonl"));
  ASSERT_EQ(docs.size(), 2u);
  EXPECT_EQ(docs[0].id, "a");
  EXPECT_EQ(docs[0].title, "A");
  EXPECT_EQ(docs[1].id, "b");
  EXPECT_EQ(docs[1].text, "second");
}

TEST(LoadCorpus, EmptyFileIsEmptyStream) {
  TempDir dir;
  write_file(dir.file("c.jsonl"), "");
  EXPECT_TRUE(load_corpus(dir.file("c.jsonl")).empty());
}

TEST(LoadCorpus, DuplicateIdCitesLine) {
  TempDir dir;
  write_file(dir.file("c.jsonl"), R"({"id":"a","title":"","text":"x"}
{"id":"b","title":"","text":"y"}
{"id":"a","title":"","text":"z"}
)");
  try {
    load_corpus(dir.file("c.jsonl"));
    FAIL() << "expected CorpusError";
  } catch (const CorpusError& e) {
    EXPECT_NE(std::string(e.what()).find(":3:"), std::string::npos) << e.what();
    EXPECT_NE(std::string(e.what()).find("duplicate"), std::string::npos) << e.what();
  }
}

TEST(LoadCorpus, MalformedLineCitesLine) {
  TempDir dir;
  write_file(dir.file("c.jsonl"), "{\"id\":\"a\",\"title\":\"\",\"text\":\"x\"}\n{not json\n");
  try {
    load_corpus(dir.file("c.jsonl"));
    FAIL() << "expected CorpusError";
  } catch (const CorpusError& e) {
    EXPECT_NE(std::string(e.what()).find(":2:"), std::string::npos) << e.what();
  }
}

TEST(LoadCorpus, RejectsMissingFieldsAndBlankText) {
  TempDir dir;
  write_file(dir.file("a.jsonl"), R"({"id":"a","text":"x"})");
  EXPECT_THROW(load_corpus(dir.file("a.jsonl")), CorpusError);
  write_file(dir.file("b.jsonl"), R"({"id":"a","title":"","text":"   "})");
  EXPECT_THROW(load_corpus(dir.file("b.jsonl")), CorpusError);
  EXPECT_THROW(load_corpus(dir.file("missing.jsonl")), CorpusError);
}

TEST(LoadCorpus, HonorsLimit) {
  TempDir dir;
  write_file(dir.file("c.jsonl"), R"({"id":"a","title":"","text":"x"}
{"id":"b","title":"","text":"y"}
{"id":"c","title":"","text":"z"}
)");
  EXPECT_EQ(load_corpus(dir.file("c.jsonl"), 2).size(), 2u);
}

TEST(LoadQaDataset, ReadsQuestionsAndAnswers) {
  TempDir dir;
  write_file(dir.file("qa.jsonl"), R"({"question":"Who?","answers":["Eagle","The Eagle"]})");
  const auto qa = load_qa_dataset(dir.file("qa.jsonl"));
  ASSERT_EQ(qa.size(), 1u);
  EXPECT_EQ(qa[0].answers.size(), 2u);
  write_file(dir.file("bad.jsonl"), R"({"question":"Who?","answers":[]})");
  EXPECT_THROW(load_qa_dataset(dir.file("bad.jsonl")), CorpusError);
}

TEST(ChunkSpans, ThreeHundredTokens) {
  EXPECT_EQ(chunk_spans(300, 256, 50), (Spans{{0, 256}, {206, 300}}));
}

TEST(ChunkSpans, ShortDocumentIsOneChunk) {
  EXPECT_EQ(chunk_spans(100, 256, 50), (Spans{{0, 100}}));
  EXPECT_EQ(chunk_spans(256, 256, 50), (Spans{{0, 256}}));
}

TEST(ChunkSpans, FiveHundredTwelveTokens) {
  EXPECT_EQ(chunk_spans(512, 256, 50), (Spans{{0, 256}, {206, 462}, {412, 512}}));
}

TEST(ChunkSpans, OverlapMustBeSmallerThanSize) {
  EXPECT_THROW(chunk_spans(10, 256, 256), PreconditionError);
  EXPECT_THROW(chunk_spans(10, 256, 300), PreconditionError);
  EXPECT_NO_THROW(chunk_spans(10, 256, 0));
}

TEST(ChunkSpans, MatchesStrideEnumerationOracle) {
  std::mt19937_64 rng(7);
  for (int trial = 0; trial < 500; ++trial) {
    const std::size_t size = std::uniform_int_distribution<std::size_t>(1, 40)(rng);
    const std::size_t overlap = std::uniform_int_distribution<std::size_t>(0, size - 1)(rng);
    const std::size_t n = std::uniform_int_distribution<std::size_t>(0, 300)(rng);
    ASSERT_EQ(chunk_spans(n, size, overlap), oracle::chunk_spans(n, size, overlap))
        << "n=" << n << " size=" << size << " overlap=" << overlap;
  }
}

TEST(ChunkDocument, IdsOrdinalsAndText) {
  const Document doc{"d", "Title", words(300)};
  const auto chunks = chunk_document(doc, 256, 50);
  ASSERT_EQ(chunks.size(), 2u);
  EXPECT_EQ(chunks[0].chunk_id, "d#0");
  EXPECT_EQ(chunks[1].chunk_id, "d#1");
  EXPECT_EQ(chunks[1].ordinal, 1u);
  EXPECT_EQ(chunks[1].token_begin, 206u);
  EXPECT_EQ(chunks[1].token_end, 300u);
  EXPECT_EQ(chunks[1].title, "Title");
  EXPECT_EQ(chunks[1].text.substr(0, 5), "t206 ");
  EXPECT_EQ(chunks[1].text.substr(chunks[1].text.size() - 4), "t299");
}

TEST(ChunkDocument, TextSliceKeepsOriginalSpelling) {
  const Document doc{"d", "", "  Apollo 11, Lunar-Module!  "};
  const auto chunks = chunk_document(doc, 256, 50);
  ASSERT_EQ(chunks.size(), 1u);
  EXPECT_EQ(chunks[0].text, "Apollo 11, Lunar-Module");
}

TEST(ChunkDocument, RechunkingIsDeterministic) {
  const Document doc{"x", "", words(700)};
  EXPECT_EQ(chunk_document(doc, 128, 20), chunk_document(doc, 128, 20));
}

TEST(ChunkDocument, NoTokensNoChunks) {
  EXPECT_TRUE(chunk_document(Document{"x", "", "!!! ---"}, 256, 50).empty());
}
