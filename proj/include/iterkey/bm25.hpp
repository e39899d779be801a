// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <iterator>
#include <span>
#include <sstream>
#include <string>
#include <string_view>
#include <unordered_map>
#include <unordered_set>
#include <utility>
#include <vector>

#include "iterkey/corpus.hpp"
#include "iterkey/error.hpp"
#include "iterkey/text.hpp"
#include "iterkey/tokenizer.hpp"

namespace iterkey {

struct Bm25Params {
  double k1 = 1.5;
  double b = 0.75;

  void validate() const {
    if (!(k1 >= 0.0) || !std::isfinite(k1)) throw PreconditionError("k1 must be a nonnegative number");
    if (!(b >= 0.0 && b <= 1.0)) throw PreconditionError("b must lie in [0, 1]");
  }

  friend bool operator==(const Bm25Params&, const Bm25Params&) = default;
};

struct Posting {
  std::uint32_t chunk_ref = 0;
  std::uint32_t tf = 0;

  friend bool operator==(const Posting&, const Posting&) = default;
};

/// Chunk payload kept alongside the postings so retrieval results can be
/// rendered into prompts and checked for answers.
struct StoredChunk {
  std::string chunk_id;
  std::string doc_id;
  std::string title;
  std::string text;

  friend bool operator==(const StoredChunk&, const StoredChunk&) = default;
};

struct ScoredDoc {
  std::string chunk_id;
  double score = 0.0;
  std::uint32_t chunk_ref = 0;

  friend bool operator==(const ScoredDoc&, const ScoredDoc&) = default;
};

/// Text that is tokenized for a chunk at index time.
inline std::string indexed_text(std::string_view title, std::string_view text) {
  if (title.empty()) return std::string(text);
  std::string s(title);
  s += '\n';
  s += text;
  return s;
}

class Index;
inline Index deserialize_index(std::string_view bytes);

/// Immutable inverted index. Build with IndexBuilder or load_index().
/// Const member functions are safe to call concurrently.
class Index {
 public:
  const Bm25Params& params() const noexcept { return params_; }
  /// Free-form build description stored with the index (JSON by convention).
  const std::string& meta() const noexcept { return meta_; }
  const Tokenizer& tokenizer() const noexcept { return tokenizer_; }
  std::size_t n_docs() const noexcept { return chunks_.size(); }
  double avg_doc_len() const noexcept { return avg_doc_len_; }
  std::size_t vocab_size() const noexcept { return postings_.size(); }
  std::uint32_t doc_len(std::size_t ref) const { return doc_len_.at(ref); }
  std::span<const std::uint32_t> doc_lens() const noexcept { return doc_len_; }
  const StoredChunk& chunk(std::size_t ref) const { return chunks_.at(ref); }
  std::span<const StoredChunk> chunks() const noexcept { return chunks_; }

  const StoredChunk* find_chunk(std::string_view chunk_id) const {
    auto it = ref_by_id_.find(std::string(chunk_id));
    return it == ref_by_id_.end() ? nullptr : &chunks_[it->second];
  }

  std::span<const Posting> postings(std::string_view term) const {
    auto it = postings_.find(std::string(term));
    if (it == postings_.end()) return {};
    return it->second;
  }

  const std::unordered_map<std::string, std::vector<Posting>>& all_postings() const noexcept {
    return postings_;
  }

  /// ln((N - df + 0.5) / (df + 0.5) + 1); terms absent from the index use df = 0.
  double idf(std::string_view term) const { return idf_for_df(postings(term).size()); }

  double idf_for_df(std::size_t df) const noexcept {
    const double n = static_cast<double>(n_docs());
    const double d = static_cast<double>(df);
    return std::log((n - d + 0.5) / (d + 0.5) + 1.0);
  }

  /// Saturated, length-normalized weight of one occurrence of a query term.
  double term_weight(double idf, std::uint32_t tf, std::uint32_t len) const noexcept {
    const double k1 = params_.k1;
    const double b = params_.b;
    const double ratio = avg_doc_len_ > 0.0 ? static_cast<double>(len) / avg_doc_len_ : 1.0;
    const double t = static_cast<double>(tf);
    return idf * (t * (k1 + 1.0)) / (t + k1 * (1.0 - b + b * ratio));
  }

  /// BM25 score of one chunk. Repeated query tokens count once per repetition.
  double score(std::span<const std::string> query_tokens, std::size_t chunk_ref) const {
    if (chunk_ref >= n_docs()) {
      throw PreconditionError("chunk_ref " + std::to_string(chunk_ref) + " out of range (n_docs=" +
                              std::to_string(n_docs()) + ")");
    }
    double total = 0.0;
    for (const auto& [term, count] : term_counts(query_tokens)) {
      const auto plist = postings(term);
      auto it = std::lower_bound(plist.begin(), plist.end(), chunk_ref,
                                 [](const Posting& p, std::size_t r) { return p.chunk_ref < r; });
      if (it == plist.end() || it->chunk_ref != chunk_ref) continue;
      total += static_cast<double>(count) * term_weight(idf_for_df(plist.size()), it->tf, doc_len_[chunk_ref]);
    }
    return total;
  }

  /// Highest-scoring chunks, best first, ties by insertion order. Chunks
  /// scoring exactly zero are never returned.
  std::vector<ScoredDoc> retrieve_top_k(std::string_view query, std::size_t k) const {
    if (k == 0) throw PreconditionError("k must be at least 1");
    const auto tokens = tokenizer_.tokenize(query);
    return retrieve_tokens(tokens, k);
  }

  std::vector<ScoredDoc> retrieve_tokens(std::span<const std::string> tokens, std::size_t k) const {
    if (k == 0) throw PreconditionError("k must be at least 1");
    std::vector<double> acc(n_docs(), 0.0);
    std::vector<std::uint32_t> touched;
    for (const auto& [term, count] : term_counts(tokens)) {
      const auto plist = postings(term);
      if (plist.empty()) continue;
      const double w_idf = idf_for_df(plist.size());
      const double mult = static_cast<double>(count);
      for (const auto& p : plist) {
        if (acc[p.chunk_ref] == 0.0) touched.push_back(p.chunk_ref);
        acc[p.chunk_ref] += mult * term_weight(w_idf, p.tf, doc_len_[p.chunk_ref]);
      }
    }
    auto better = [&](std::uint32_t a, std::uint32_t b) {
      if (acc[a] != acc[b]) return acc[a] > acc[b];
      return a < b;
    };
    std::erase_if(touched, [&](std::uint32_t r) { return !(acc[r] > 0.0); });
    std::sort(touched.begin(), touched.end());
    touched.erase(std::unique(touched.begin(), touched.end()), touched.end());
    const std::size_t take = std::min(k, touched.size());
    std::partial_sort(touched.begin(), touched.begin() + static_cast<std::ptrdiff_t>(take), touched.end(), better);
    std::vector<ScoredDoc> out;
    out.reserve(take);
    for (std::size_t i = 0; i < take; ++i) {
      const auto r = touched[i];
      out.push_back(ScoredDoc{chunks_[r].chunk_id, acc[r], r});
    }
    return out;
  }

  friend bool operator==(const Index& a, const Index& b) {
    return a.params_ == b.params_ && a.meta_ == b.meta_ && a.chunks_ == b.chunks_ && a.doc_len_ == b.doc_len_ &&
           a.postings_ == b.postings_ && a.avg_doc_len_ == b.avg_doc_len_ &&
           a.tokenizer_.stopwords() == b.tokenizer_.stopwords() && a.tokenizer_.stem() == b.tokenizer_.stem();
  }

 private:
  friend class IndexBuilder;
  friend Index deserialize_index(std::string_view bytes);

  // Distinct terms in first-occurrence order with their multiplicity.
  static std::vector<std::pair<std::string_view, std::size_t>> term_counts(std::span<const std::string> tokens) {
    std::vector<std::pair<std::string_view, std::size_t>> counts;
    std::unordered_map<std::string_view, std::size_t> slot;
    for (const auto& t : tokens) {
      auto [it, fresh] = slot.try_emplace(t, counts.size());
      if (fresh) {
        counts.emplace_back(t, 1);
      } else {
        ++counts[it->second].second;
      }
    }
    return counts;
  }

  void finalize() {
    std::uint64_t total = 0;
    for (auto l : doc_len_) total += l;
    avg_doc_len_ = chunks_.empty() ? 0.0 : static_cast<double>(total) / static_cast<double>(chunks_.size());
    ref_by_id_.clear();
    for (std::uint32_t i = 0; i < chunks_.size(); ++i) ref_by_id_.emplace(chunks_[i].chunk_id, i);
  }

  Bm25Params params_;
  std::string meta_;
  Tokenizer tokenizer_;
  std::vector<StoredChunk> chunks_;
  std::vector<std::uint32_t> doc_len_;
  std::unordered_map<std::string, std::vector<Posting>> postings_;
  std::unordered_map<std::string, std::uint32_t> ref_by_id_;
  double avg_doc_len_ = 0.0;
};

/// Single-writer incremental construction of an Index.
class IndexBuilder {
 public:
  explicit IndexBuilder(Bm25Params params = {}, Tokenizer tokenizer = {}) {
    params.validate();
    index_.params_ = params;
    index_.tokenizer_ = std::move(tokenizer);
  }

  void add(const Chunk& c) { add(StoredChunk{c.chunk_id, c.doc_id, c.title, c.text}); }

  void add(StoredChunk c) {
    if (!ids_.insert(c.chunk_id).second) throw PreconditionError("duplicate chunk_id '" + c.chunk_id + "'");
    const auto ref = static_cast<std::uint32_t>(index_.chunks_.size());
    const auto tokens = index_.tokenizer_.tokenize(indexed_text(c.title, c.text));
    std::unordered_map<std::string, std::uint32_t> tf;
    for (const auto& t : tokens) ++tf[t];
    for (auto& [term, n] : tf) index_.postings_[term].push_back(Posting{ref, n});
    index_.doc_len_.push_back(static_cast<std::uint32_t>(tokens.size()));
    index_.chunks_.push_back(std::move(c));
  }

  std::size_t size() const noexcept { return index_.chunks_.size(); }
  void set_meta(std::string meta) { index_.meta_ = std::move(meta); }

  Index finish() && {
    if (index_.chunks_.empty()) throw PreconditionError("empty corpus");
    index_.finalize();
    return std::move(index_);
  }

 private:
  Index index_;
  std::unordered_set<std::string> ids_;
};

template <typename Range>
Index build_index(const Range& chunks, Bm25Params params = {}, Tokenizer tokenizer = {}) {
  IndexBuilder builder(params, std::move(tokenizer));
  for (const auto& c : chunks) builder.add(c);
  return std::move(builder).finish();
}

inline double idf(std::string_view term, const Index& index) { return index.idf(term); }

inline double score(std::span<const std::string> query_tokens, std::size_t chunk_ref, const Index& index) {
  return index.score(query_tokens, chunk_ref);
}

inline std::vector<ScoredDoc> retrieve_top_k(const Index& index, std::string_view query, std::size_t k) {
  return index.retrieve_top_k(query, k);
}

// ---------------------------------------------------------------------------
// On-disk format (all integers little-endian):
//
//   "ITKIDX1"  u8 version(=1)
//   str meta
//   f64 k1     f64 b
//   u8 stem    u32 n_stopwords  str...
//   u64 n_chunks, then per chunk: str chunk_id, str doc_id, str title, str text, u32 doc_len
//   u64 n_terms, then per term (byte-lexicographic order):
//       str term, varint n_postings, n_postings x (varint ref_delta, varint tf)
//   u64 FNV-1a of every preceding byte
//
// str = u32 length + bytes. ref_delta is the gap from the previous chunk_ref
// in the same list (the first is absolute).
// ---------------------------------------------------------------------------

inline constexpr std::string_view kIndexMagic = "ITKIDX1";
inline constexpr std::uint8_t kIndexVersion = 1;

namespace detail {

class ByteWriter {
 public:
  void u8(std::uint8_t v) { buf_.push_back(static_cast<char>(v)); }
  void u32(std::uint32_t v) {
    for (int i = 0; i < 4; ++i) u8(static_cast<std::uint8_t>(v >> (8 * i)));
  }
  void u64(std::uint64_t v) {
    for (int i = 0; i < 8; ++i) u8(static_cast<std::uint8_t>(v >> (8 * i)));
  }
  void f64(double d) {
    std::uint64_t v;
    std::memcpy(&v, &d, sizeof v);
    u64(v);
  }
  void varint(std::uint64_t v) {
    while (v >= 0x80) {
      u8(static_cast<std::uint8_t>(v | 0x80));
      v >>= 7;
    }
    u8(static_cast<std::uint8_t>(v));
  }
  void str(std::string_view s) {
    u32(static_cast<std::uint32_t>(s.size()));
    buf_.append(s);
  }
  void raw(std::string_view s) { buf_.append(s); }
  std::string& buffer() noexcept { return buf_; }

 private:
  std::string buf_;
};

class ByteReader {
 public:
  explicit ByteReader(std::string_view bytes) : data_(bytes) {}

  std::uint8_t u8() {
    need(1);
    return static_cast<std::uint8_t>(data_[pos_++]);
  }
  std::uint32_t u32() {
    std::uint32_t v = 0;
    for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(u8()) << (8 * i);
    return v;
  }
  std::uint64_t u64() {
    std::uint64_t v = 0;
    for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(u8()) << (8 * i);
    return v;
  }
  double f64() {
    const std::uint64_t v = u64();
    double d;
    std::memcpy(&d, &v, sizeof d);
    return d;
  }
  std::uint64_t varint() {
    std::uint64_t v = 0;
    for (int shift = 0; shift < 64; shift += 7) {
      const std::uint8_t b = u8();
      v |= static_cast<std::uint64_t>(b & 0x7f) << shift;
      if (!(b & 0x80)) return v;
    }
    throw IndexFormatError("corrupt index file: varint overflow");
  }
  std::string str() {
    const std::uint32_t n = u32();
    need(n);
    std::string s(data_.substr(pos_, n));
    pos_ += n;
    return s;
  }
  std::string_view raw(std::size_t n) {
    need(n);
    auto s = data_.substr(pos_, n);
    pos_ += n;
    return s;
  }
  std::size_t pos() const noexcept { return pos_; }
  std::size_t remaining() const noexcept { return data_.size() - pos_; }

 private:
  void need(std::size_t n) const {
    if (data_.size() - pos_ < n) throw IndexFormatError("truncated index file");
  }
  std::string_view data_;
  std::size_t pos_ = 0;
};

}  // namespace detail

inline std::string serialize_index(const Index& index) {
  detail::ByteWriter w;
  w.raw(kIndexMagic);
  w.u8(kIndexVersion);
  w.str(index.meta());
  w.f64(index.params().k1);
  w.f64(index.params().b);
  w.u8(index.tokenizer().stem() ? 1 : 0);
  std::vector<std::string> stop(index.tokenizer().stopwords().begin(), index.tokenizer().stopwords().end());
  std::sort(stop.begin(), stop.end());
  w.u32(static_cast<std::uint32_t>(stop.size()));
  for (const auto& s : stop) w.str(s);
  w.u64(index.n_docs());
  for (std::size_t i = 0; i < index.n_docs(); ++i) {
    const auto& c = index.chunk(i);
    w.str(c.chunk_id);
    w.str(c.doc_id);
    w.str(c.title);
    w.str(c.text);
    w.u32(index.doc_len(i));
  }
  std::vector<const std::pair<const std::string, std::vector<Posting>>*> terms;
  terms.reserve(index.all_postings().size());
  for (const auto& kv : index.all_postings()) terms.push_back(&kv);
  std::sort(terms.begin(), terms.end(), [](auto* a, auto* b) { return a->first < b->first; });
  w.u64(terms.size());
  for (const auto* kv : terms) {
    w.str(kv->first);
    w.varint(kv->second.size());
    std::uint32_t prev = 0;
    for (const auto& p : kv->second) {
      w.varint(p.chunk_ref - prev);
      w.varint(p.tf);
      prev = p.chunk_ref;
    }
  }
  Fnv1a64 h;
  h.update(w.buffer());
  w.u64(h.digest());
  return std::move(w.buffer());
}

inline Index deserialize_index(std::string_view bytes) {
  detail::ByteReader r(bytes);
  if (bytes.size() < kIndexMagic.size() + 1 || bytes.substr(0, kIndexMagic.size()) != kIndexMagic) {
    throw IndexFormatError("not an index file (bad magic or version)");
  }
  r.raw(kIndexMagic.size());
  const auto version = r.u8();
  if (version != kIndexVersion) {
    throw IndexFormatError("unsupported index version " + std::to_string(version));
  }
  if (bytes.size() < 8) throw IndexFormatError("truncated index file");

  Index idx;
  idx.meta_ = r.str();
  idx.params_.k1 = r.f64();
  idx.params_.b = r.f64();
  const bool stem = r.u8() != 0;
  std::unordered_set<std::string> stop;
  const auto n_stop = r.u32();
  for (std::uint32_t i = 0; i < n_stop; ++i) stop.insert(r.str());
  idx.tokenizer_ = Tokenizer(std::move(stop), stem);

  const auto n_docs = r.u64();
  if (n_docs == 0 || n_docs > r.remaining()) throw IndexFormatError("corrupt index file: bad chunk count");
  idx.chunks_.reserve(n_docs);
  idx.doc_len_.reserve(n_docs);
  for (std::uint64_t i = 0; i < n_docs; ++i) {
    StoredChunk c;
    c.chunk_id = r.str();
    c.doc_id = r.str();
    c.title = r.str();
    c.text = r.str();
    idx.chunks_.push_back(std::move(c));
    idx.doc_len_.push_back(r.u32());
  }
  const auto n_terms = r.u64();
  if (n_terms > r.remaining()) throw IndexFormatError("corrupt index file: bad term count");
  for (std::uint64_t t = 0; t < n_terms; ++t) {
    auto term = r.str();
    const auto n = r.varint();
    if (n == 0 || n > n_docs) throw IndexFormatError("corrupt index file: bad postings length");
    std::vector<Posting> plist;
    plist.reserve(n);
    std::uint64_t ref = 0;
    for (std::uint64_t j = 0; j < n; ++j) {
      const auto delta = r.varint();
      if (j > 0 && delta == 0) throw IndexFormatError("corrupt index file: unsorted postings");
      ref += delta;
      const auto tf = r.varint();
      if (ref >= n_docs || tf == 0) throw IndexFormatError("corrupt index file: bad posting");
      plist.push_back(Posting{static_cast<std::uint32_t>(ref), static_cast<std::uint32_t>(tf)});
    }
    if (!idx.postings_.emplace(std::move(term), std::move(plist)).second) {
      throw IndexFormatError("corrupt index file: duplicate term");
    }
  }
  const std::size_t body_len = r.pos();
  const auto stored = r.u64();
  Fnv1a64 h;
  h.update(bytes.substr(0, body_len));
  if (stored != h.digest()) throw IndexFormatError("corrupt index file: checksum mismatch");
  if (r.remaining() != 0) throw IndexFormatError("corrupt index file: trailing bytes");
  idx.finalize();
  return idx;
}

inline void save_index(const Index& index, const std::string& path) {
  const auto bytes = serialize_index(index);
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw Error("cannot write index file: " + path);
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw Error("failed writing index file: " + path);
}

inline std::string read_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error("cannot open file: " + path);
  std::ostringstream ss;
  ss << in.rdbuf();
  return std::move(ss).str();
}

inline Index load_index(const std::string& path) { return deserialize_index(read_file(path)); }

/// Content hash of an index's serialized form (hex FNV-1a).
inline std::string index_content_hash(const Index& index) {
  Fnv1a64 h;
  h.update(serialize_index(index));
  return h.hex();
}

}  // namespace iterkey
