#include <doctest.h>

#include <cstdio>
#include <set>

#include "cotprune/encoder.hpp"
#include "cotprune/retrieval.hpp"
#include "support/testutil.hpp"

using namespace cotprune;
using retrieval::RetrievalIndex;

namespace {

// Index with hand-picked embeddings and term stats, bypassing the encoder.
RetrievalIndex manual_index(const std::vector<std::vector<double>>& embeddings,
                            const std::vector<std::string>& texts = {}) {
  RetrievalIndex index;
  index.dim = embeddings.empty() ? 0 : embeddings[0].size();
  std::size_t total = 0;
  for (std::size_t i = 0; i < embeddings.size(); ++i) {
    retrieval::IndexEntry e;
    e.id = "doc-" + std::to_string(i);
    e.embedding = embeddings[i];
    if (i < texts.size()) {
      auto terms = retrieval::split_terms(texts[i]);
      e.length = terms.size();
      total += terms.size();
      for (auto& t : terms) e.term_freq[t]++;
      for (const auto& [t, _] : e.term_freq) index.doc_freq[t]++;
    }
    index.entries.push_back(std::move(e));
  }
  index.avg_doc_len = index.entries.empty()
                          ? 0.0
                          : static_cast<double>(total) / index.entries.size();
  return index;
}

std::vector<corpus::CotExample> small_pool() {
  auto planted = testutil::make_planted_corpus(3, 0, 0, 21);
  return planted.candidates;
}

}  // namespace

TEST_CASE("build_index creates one entry per candidate with term stats") {
  encoder::MockEncoder enc(16);
  const auto pool = small_pool();
  const auto index = retrieval::build_index(pool, enc);
  REQUIRE(index.entries.size() == 3);
  CHECK(index.dim == 16);

  // Average document length equals the mean term count of rendered examples.
  double total = 0.0;
  for (const auto& ex : pool)
    total += retrieval::split_terms(corpus::render(ex)).size();
  CHECK(index.avg_doc_len == doctest::Approx(total / 3.0));

  // A term present in every rendered example ("answer") has df = 3.
  CHECK(index.doc_freq.at("answer") == 3);
  for (const auto& [term, df] : index.doc_freq) CHECK(df <= 3);
}

TEST_CASE("topk ranks by cosine similarity with stable ties") {
  SUBCASE("a query equal to an entry ranks that entry first") {
    const auto index = manual_index({{1, 0, 0}, {0.2, 0.9, 0.1}, {0.5, 0.5, 0.7}});
    const auto ids = retrieval::retrieve_topk(index, std::vector<double>{0.2, 0.9, 0.1}, 2);
    REQUIRE_FALSE(ids.empty());
    CHECK(ids[0] == "doc-1");
  }
  SUBCASE("orthogonal query returns corpus order") {
    const auto index = manual_index({{1, 0, 0, 0}, {0, 1, 0, 0}, {0, 0, 1, 0}});
    const auto ids = retrieval::retrieve_topk(index, std::vector<double>{0, 0, 0, 1}, 3);
    REQUIRE(ids.size() == 3);
    CHECK(ids[0] == "doc-0");
    CHECK(ids[1] == "doc-1");
    CHECK(ids[2] == "doc-2");
  }
  SUBCASE("k larger than the pool returns the whole pool") {
    const auto index = manual_index({{1, 0}, {0, 1}});
    CHECK(retrieval::retrieve_topk(index, std::vector<double>{1, 1}, 10).size() == 2);
  }
  SUBCASE("zero-norm query is an error") {
    const auto index = manual_index({{1, 0}});
    CHECK_THROWS_AS(
        retrieval::retrieve_topk(index, std::vector<double>{0, 0}, 1), Error);
  }
}

TEST_CASE("topk agrees with the exhaustive cosine oracle on a random pool") {
  Rng rng(31);
  const std::size_t n = 50, dim = 12;
  std::vector<std::vector<double>> docs(n, std::vector<double>(dim));
  for (auto& d : docs)
    for (auto& v : d) v = rng.uniform(-1.0, 1.0);
  std::vector<double> query(dim);
  for (auto& v : query) v = rng.uniform(-1.0, 1.0);

  const auto index = manual_index(docs);
  const auto ids = retrieval::retrieve_topk(index, query, 20);
  const auto ref = testutil::ref_cosine_ranking(docs, query);
  REQUIRE(ids.size() == 20);
  for (std::size_t i = 0; i < 20; ++i)
    CHECK(ids[i] == "doc-" + std::to_string(ref[i]));
}

TEST_CASE("topk similarities are non-increasing") {
  Rng rng(77);
  const std::size_t n = 30, dim = 6;
  std::vector<std::vector<double>> docs(n, std::vector<double>(dim));
  for (auto& d : docs)
    for (auto& v : d) v = rng.uniform(-1.0, 1.0);
  std::vector<double> query(dim);
  for (auto& v : query) v = rng.uniform(-1.0, 1.0);
  const auto index = manual_index(docs);
  const auto ids = retrieval::retrieve_topk(index, query, n);
  auto cosine = [&](const std::vector<double>& d) {
    double dot = 0, dn = 0, qn = 0;
    for (std::size_t i = 0; i < dim; ++i) {
      dot += d[i] * query[i];
      dn += d[i] * d[i];
      qn += query[i] * query[i];
    }
    return dot / std::sqrt(dn * qn);
  };
  double prev = 2.0;
  for (const auto& id : ids) {
    const std::size_t i = std::stoul(id.substr(4));
    const double s = cosine(docs[i]);
    CHECK(s <= prev + 1e-12);
    prev = s;
  }
}

TEST_CASE("bm25 matches the reference formula on a synthetic pool") {
  Rng rng(13);
  const std::vector<std::string> vocab = {
      "tickets", "movie",  "dave",  "sara",   "apples", "count",
      "total",   "spent",  "won",   "bought", "cost",   "price",
      "steps",   "answer", "think", "final"};
  const std::size_t n = 20;
  std::vector<std::string> texts(n);
  std::vector<std::vector<std::string>> docs(n);
  for (std::size_t i = 0; i < n; ++i) {
    const std::size_t len = 5 + rng.next_below(20);
    for (std::size_t j = 0; j < len; ++j) {
      const auto& w = vocab[rng.next_below(vocab.size())];
      docs[i].push_back(w);
      texts[i] += w + " ";
    }
  }
  std::vector<std::vector<double>> embeddings(n, {1.0});
  const auto index = manual_index(embeddings, texts);

  const std::string query_text = "dave spent tickets on the movie total";
  const auto query_terms = retrieval::split_terms(query_text);
  const auto ref = testutil::ref_bm25_ranking(docs, query_terms, 1.5, 0.75);
  const auto ids = retrieval::retrieve_bm25(index, query_text, n);
  REQUIRE(ids.size() == n);
  for (std::size_t i = 0; i < n; ++i)
    CHECK(ids[i] == "doc-" + std::to_string(ref[i]));
}

TEST_CASE("bm25 falls back to corpus order when no term matches") {
  const auto index = manual_index({{1.0}, {1.0}, {1.0}},
                                  {"alpha beta", "gamma delta", "epsilon"});
  const auto ids = retrieval::retrieve_bm25(index, "zzz yyy", 3);
  REQUIRE(ids.size() == 3);
  CHECK(ids[0] == "doc-0");
  CHECK(ids[1] == "doc-1");
  CHECK(ids[2] == "doc-2");
}

TEST_CASE("bm25 on a single-document pool returns that document") {
  const auto index = manual_index({{1.0}}, {"only one document here"});
  CHECK(retrieval::retrieve_bm25(index, "anything", 1) ==
        std::vector<std::string>{"doc-0"});
}

TEST_CASE("random retrieval is seeded and uniform") {
  const auto index =
      manual_index({{1, 0}, {0, 1}, {1, 1}, {0.5, 0.5}});
  SUBCASE("k = pool size yields a permutation") {
    const auto ids = retrieval::retrieve_random(index, 4, 9);
    std::set<std::string> unique(ids.begin(), ids.end());
    CHECK(unique.size() == 4);
  }
  SUBCASE("identical seeds give identical sequences") {
    CHECK(retrieval::retrieve_random(index, 3, 42) ==
          retrieval::retrieve_random(index, 3, 42));
    CHECK(retrieval::retrieve_random(index, 3, 42) !=
          retrieval::retrieve_random(index, 3, 43));
  }
  SUBCASE("draw frequencies stay within 3 sigma of uniform") {
    // 10000 draws of k=1 from 4 docs: mean 2500, sigma = sqrt(n p (1-p)).
    std::map<std::string, int> counts;
    for (int i = 0; i < 10000; ++i)
      counts[retrieval::retrieve_random(index, 1, 1000 + i)[0]]++;
    const double sigma = std::sqrt(10000 * 0.25 * 0.75);
    for (const auto& [id, count] : counts)
      CHECK(std::abs(count - 2500.0) <= 3.0 * sigma);
  }
}

TEST_CASE("rankings are invariant under corpus permutation") {
  encoder::MockEncoder enc(12);
  auto pool = small_pool();
  auto planted = testutil::make_planted_corpus(5, 3, 0, 77);
  pool = planted.candidates;

  const auto index = retrieval::build_index(pool, enc);
  const auto query = retrieval::query_embedding("How many tickets remain?", enc);
  const auto base_topk = retrieval::retrieve_topk(index, query, 4);
  const auto base_bm25 = retrieval::retrieve_bm25(index, "tickets remain count", 4);

  // Rotate the corpus and re-ask: the returned id sets must match, and the
  // order must match wherever scores are distinct (ids are stable).
  std::vector<corpus::CotExample> rotated(pool.begin() + 3, pool.end());
  rotated.insert(rotated.end(), pool.begin(), pool.begin() + 3);
  const auto index2 = retrieval::build_index(rotated, enc);
  const auto topk2 = retrieval::retrieve_topk(index2, query, 4);
  const auto bm252 = retrieval::retrieve_bm25(index2, "tickets remain count", 4);
  // Cosine scores are distinct here, so the order itself must survive.
  CHECK(base_topk == topk2);

  // BM25 can tie (all-zero scores on filler docs); validate the rotated pool
  // against the reference formula instead, which exercises the index-order
  // tie-break on the permuted corpus.
  std::vector<std::vector<std::string>> docs;
  for (const auto& ex : rotated)
    docs.push_back(retrieval::split_terms(corpus::render(ex)));
  const auto ref = testutil::ref_bm25_ranking(
      docs, retrieval::split_terms("tickets remain count"), 1.5, 0.75);
  REQUIRE(bm252.size() == 4);
  for (std::size_t i = 0; i < bm252.size(); ++i)
    CHECK(bm252[i] == rotated[ref[i]].id);
  (void)base_bm25;
}

TEST_CASE("all retrieval modes return distinct ids present in the index") {
  encoder::MockEncoder enc(8);
  auto planted = testutil::make_planted_corpus(6, 6, 0, 3);
  const auto index = retrieval::build_index(planted.candidates, enc);
  std::set<std::string> known;
  for (const auto& e : index.entries) known.insert(e.id);
  const auto query = retrieval::query_embedding("counting apples", enc);
  for (const auto& ids :
       {retrieval::retrieve_topk(index, query, 5),
        retrieval::retrieve_bm25(index, "counting apples today", 5),
        retrieval::retrieve_random(index, 5, 4)}) {
    std::set<std::string> unique(ids.begin(), ids.end());
    CHECK(unique.size() == ids.size());
    for (const auto& id : ids) CHECK(known.count(id) == 1);
  }
}

TEST_CASE("index cache round-trips and invalidates on corpus change") {
  encoder::MockEncoder enc(8);
  auto planted = testutil::make_planted_corpus(4, 2, 0, 15);
  const auto index = retrieval::build_index(planted.candidates, enc);
  const std::string path = "/tmp/cotprune_test_index.bin";
  retrieval::save_index(path, index);

  const auto loaded = retrieval::load_index(path, index.corpus_fingerprint);
  REQUIRE(loaded.has_value());
  CHECK(loaded->entries.size() == index.entries.size());
  CHECK(loaded->dim == index.dim);
  CHECK(loaded->avg_doc_len == doctest::Approx(index.avg_doc_len));
  for (std::size_t i = 0; i < index.entries.size(); ++i) {
    CHECK(loaded->entries[i].id == index.entries[i].id);
    CHECK(loaded->entries[i].embedding == index.entries[i].embedding);
    CHECK(loaded->entries[i].term_freq == index.entries[i].term_freq);
  }

  CHECK_FALSE(retrieval::load_index(path, index.corpus_fingerprint + 1).has_value());
  CHECK_FALSE(retrieval::load_index("/tmp/no_such_cache.bin", 1).has_value());
  std::remove(path.c_str());
}
