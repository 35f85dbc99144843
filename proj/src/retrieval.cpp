#include "cotprune/retrieval.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <fstream>
#include <numeric>

namespace cotprune::retrieval {

std::vector<std::string> split_terms(std::string_view text) {
  std::vector<std::string> terms;
  std::string current;
  for (char c : text) {
    if (std::isalnum(static_cast<unsigned char>(c))) {
      current.push_back(static_cast<char>(std::tolower(static_cast<unsigned char>(c))));
    } else if (!current.empty()) {
      terms.push_back(std::move(current));
      current.clear();
    }
  }
  if (!current.empty()) terms.push_back(std::move(current));
  return terms;
}

RetrievalIndex build_index(const std::vector<corpus::CotExample>& candidates,
                           const encoder::EncoderBackend& embedder) {
  if (candidates.empty())
    raise(ErrorKind::invalid, "cannot build an index over an empty pool");
  RetrievalIndex index;
  index.dim = embedder.dim();
  index.corpus_fingerprint = corpus::corpus_hash(candidates);
  std::size_t total_len = 0;
  for (const auto& ex : candidates) {
    IndexEntry entry;
    entry.id = ex.id;
    const std::string rendered = corpus::render(ex);
    const auto tok = encoder::tokenize(rendered);
    std::vector<double> rows(tok.real_tokens() * index.dim, 0.0);
    embedder.embed(tok, rows);
    entry.embedding = encoder::pool_shot(
        rows, std::vector<std::uint8_t>(tok.real_tokens(), 1), index.dim);
    if (entry.embedding.size() != index.dim)
      raise(ErrorKind::invalid, "embedding dimension mismatch for '" + ex.id + "'");
    for (double v : entry.embedding)
      if (!std::isfinite(v))
        raise(ErrorKind::invalid, "non-finite embedding for '" + ex.id + "'");
    auto terms = split_terms(rendered);
    entry.length = terms.size();
    total_len += terms.size();
    for (auto& t : terms) entry.term_freq[t]++;
    for (const auto& [t, _] : entry.term_freq) index.doc_freq[t]++;
    index.entries.push_back(std::move(entry));
  }
  index.avg_doc_len =
      static_cast<double>(total_len) / static_cast<double>(candidates.size());
  return index;
}

std::vector<double> query_embedding(const std::string& question,
                                    const encoder::EncoderBackend& embedder) {
  const std::string rendered = "Q: " + question + "\nA:";
  const auto tok = encoder::tokenize(rendered);
  std::vector<double> rows(tok.real_tokens() * embedder.dim(), 0.0);
  embedder.embed(tok, rows);
  return encoder::pool_shot(
      rows, std::vector<std::uint8_t>(tok.real_tokens(), 1), embedder.dim());
}

namespace {

// Rank by score descending, corpus index ascending on ties.
std::vector<std::string> rank_by_score(const RetrievalIndex& index,
                                       const std::vector<double>& scores,
                                       std::size_t k) {
  std::vector<std::size_t> order(index.entries.size());
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
    if (scores[a] != scores[b]) return scores[a] > scores[b];
    return a < b;
  });
  const std::size_t take = std::min(k, order.size());
  std::vector<std::string> ids;
  ids.reserve(take);
  for (std::size_t i = 0; i < take; ++i)
    ids.push_back(index.entries[order[i]].id);
  return ids;
}

}  // namespace

std::vector<std::string> retrieve_topk(const RetrievalIndex& index,
                                       std::span<const double> query,
                                       std::size_t k) {
  if (k == 0) raise(ErrorKind::invalid, "k must be >= 1");
  if (query.size() != index.dim)
    raise(ErrorKind::invalid, "query dimension does not match the index");
  double qnorm2 = 0.0;
  for (double v : query) qnorm2 += v * v;
  if (qnorm2 <= 0.0)
    raise(ErrorKind::invalid, "zero-norm query vector");
  const double qnorm = std::sqrt(qnorm2);

  std::vector<double> scores(index.entries.size(), 0.0);
  for (std::size_t i = 0; i < index.entries.size(); ++i) {
    const auto& e = index.entries[i].embedding;
    double dot = 0.0, dnorm2 = 0.0;
    for (std::size_t d = 0; d < index.dim; ++d) {
      dot += e[d] * query[d];
      dnorm2 += e[d] * e[d];
    }
    scores[i] = dnorm2 > 0.0 ? dot / (qnorm * std::sqrt(dnorm2)) : 0.0;
  }
  return rank_by_score(index, scores, k);
}

std::vector<std::string> retrieve_bm25(const RetrievalIndex& index,
                                       std::string_view query_text,
                                       std::size_t k, Bm25Params params) {
  if (k == 0) raise(ErrorKind::invalid, "k must be >= 1");
  const auto query_terms = split_terms(query_text);
  std::map<std::string, int> qtf;
  for (const auto& t : query_terms) qtf[t]++;

  const double n_docs = static_cast<double>(index.entries.size());
  std::vector<double> scores(index.entries.size(), 0.0);
  for (std::size_t i = 0; i < index.entries.size(); ++i) {
    const auto& entry = index.entries[i];
    const double len_norm =
        params.k1 * (1.0 - params.b +
                     params.b * static_cast<double>(entry.length) /
                         std::max(index.avg_doc_len, 1e-12));
    double score = 0.0;
    for (const auto& [term, q_count] : qtf) {
      auto it = entry.term_freq.find(term);
      if (it == entry.term_freq.end()) continue;
      auto df_it = index.doc_freq.find(term);
      const double df = df_it == index.doc_freq.end() ? 0.0 : df_it->second;
      const double idf = std::log(1.0 + (n_docs - df + 0.5) / (df + 0.5));
      const double tf = static_cast<double>(it->second);
      score += q_count * idf * (tf * (params.k1 + 1.0)) / (tf + len_norm);
    }
    scores[i] = score;
  }
  return rank_by_score(index, scores, k);
}

std::vector<std::string> retrieve_random(const RetrievalIndex& index,
                                         std::size_t k, std::uint64_t seed) {
  if (k == 0) raise(ErrorKind::invalid, "k must be >= 1");
  std::vector<std::size_t> pool(index.entries.size());
  std::iota(pool.begin(), pool.end(), 0);
  Rng rng(derive_seed(seed, "retrieve-random"));
  const std::size_t take = std::min(k, pool.size());
  std::vector<std::string> ids;
  ids.reserve(take);
  for (std::size_t i = 0; i < take; ++i) {
    const std::size_t j = i + rng.next_below(pool.size() - i);
    std::swap(pool[i], pool[j]);
    ids.push_back(index.entries[pool[i]].id);
  }
  return ids;
}

// ---------------------------------------------------------------------------
// Index cache
// ---------------------------------------------------------------------------

namespace {

constexpr char kMagic[4] = {'C', 'P', 'I', 'X'};
constexpr std::uint32_t kVersion = 1;

void put_u32(std::string& buf, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) buf.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}
void put_u64(std::string& buf, std::uint64_t v) {
  for (int i = 0; i < 8; ++i) buf.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}
void put_f64(std::string& buf, double d) {
  std::uint64_t v;
  std::memcpy(&v, &d, 8);
  put_u64(buf, v);
}
void put_str(std::string& buf, std::string_view s) {
  put_u32(buf, static_cast<std::uint32_t>(s.size()));
  buf.append(s);
}

struct Reader {
  const std::string& buf;
  std::size_t pos = 0;
  bool ok = true;

  std::uint32_t u32() {
    if (pos + 4 > buf.size()) { ok = false; return 0; }
    std::uint32_t v = 0;
    for (int i = 0; i < 4; ++i)
      v |= static_cast<std::uint32_t>(static_cast<unsigned char>(buf[pos + i])) << (8 * i);
    pos += 4;
    return v;
  }
  std::uint64_t u64() {
    if (pos + 8 > buf.size()) { ok = false; return 0; }
    std::uint64_t v = 0;
    for (int i = 0; i < 8; ++i)
      v |= static_cast<std::uint64_t>(static_cast<unsigned char>(buf[pos + i])) << (8 * i);
    pos += 8;
    return v;
  }
  double f64() {
    std::uint64_t v = u64();
    double d;
    std::memcpy(&d, &v, 8);
    return d;
  }
  std::string str() {
    std::uint32_t n = u32();
    if (!ok || pos + n > buf.size()) { ok = false; return {}; }
    std::string s = buf.substr(pos, n);
    pos += n;
    return s;
  }
};

}  // namespace

void save_index(const std::string& path, const RetrievalIndex& index) {
  std::string buf;
  buf.append(kMagic, 4);
  put_u32(buf, kVersion);
  put_u64(buf, index.corpus_fingerprint);
  put_u32(buf, static_cast<std::uint32_t>(index.dim));
  put_u32(buf, static_cast<std::uint32_t>(index.entries.size()));
  for (const auto& e : index.entries) {
    put_str(buf, e.id);
    for (double v : e.embedding) put_f64(buf, v);
    put_u32(buf, static_cast<std::uint32_t>(e.length));
    put_u32(buf, static_cast<std::uint32_t>(e.term_freq.size()));
    for (const auto& [term, count] : e.term_freq) {
      put_str(buf, term);
      put_u32(buf, static_cast<std::uint32_t>(count));
    }
  }
  put_u64(buf, fnv1a64(buf));
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) raise(ErrorKind::io, "cannot write index cache: " + path);
  out.write(buf.data(), static_cast<std::streamsize>(buf.size()));
  if (!out) raise(ErrorKind::io, "index cache write failed: " + path);
}

std::optional<RetrievalIndex> load_index(const std::string& path,
                                         std::uint64_t corpus_fingerprint) {
  std::ifstream in(path, std::ios::binary);
  if (!in) return std::nullopt;
  std::string buf((std::istreambuf_iterator<char>(in)),
                  std::istreambuf_iterator<char>());
  if (buf.size() < 4 + 4 + 8 + 4 + 4 + 8) return std::nullopt;
  if (std::memcmp(buf.data(), kMagic, 4) != 0) return std::nullopt;
  std::uint64_t stored = 0;
  for (int i = 0; i < 8; ++i)
    stored |= static_cast<std::uint64_t>(
                  static_cast<unsigned char>(buf[buf.size() - 8 + i]))
              << (8 * i);
  if (fnv1a64(std::string_view(buf).substr(0, buf.size() - 8)) != stored)
    return std::nullopt;

  Reader r{buf, 4};
  if (r.u32() != kVersion) return std::nullopt;
  RetrievalIndex index;
  index.corpus_fingerprint = r.u64();
  if (index.corpus_fingerprint != corpus_fingerprint) return std::nullopt;
  index.dim = r.u32();
  const std::uint32_t count = r.u32();
  std::size_t total_len = 0;
  for (std::uint32_t i = 0; i < count && r.ok; ++i) {
    IndexEntry e;
    e.id = r.str();
    e.embedding.resize(index.dim);
    for (auto& v : e.embedding) v = r.f64();
    e.length = r.u32();
    const std::uint32_t terms = r.u32();
    for (std::uint32_t t = 0; t < terms && r.ok; ++t) {
      std::string term = r.str();
      e.term_freq[std::move(term)] = static_cast<int>(r.u32());
    }
    total_len += e.length;
    for (const auto& [term, _] : e.term_freq) index.doc_freq[term]++;
    index.entries.push_back(std::move(e));
  }
  if (!r.ok || index.entries.size() != count) return std::nullopt;
  index.avg_doc_len = index.entries.empty()
                          ? 0.0
                          : static_cast<double>(total_len) /
                                static_cast<double>(index.entries.size());
  return index;
}

}  // namespace cotprune::retrieval
