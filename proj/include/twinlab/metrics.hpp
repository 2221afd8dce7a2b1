#pragma once

// Readability (FRE, FGL), BLEU, SARI, DIFF and token cosine similarity.

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdio>
#include <map>
#include <set>
#include <span>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

#include "twinlab/error.hpp"
#include "twinlab/textcore.hpp"

namespace twinlab::metrics {

using textcore::TokenSeq;

// ---------------------------------------------------------------------------
// Readability
// ---------------------------------------------------------------------------

struct ReadabilityCounts {
  std::size_t sentences = 0;
  std::size_t words = 0;
  std::size_t syllables = 0;
};

// Punctuation tokens are not words. Sentences without a single word do not
// count as sentences either, so empty system outputs cannot inflate scores.
inline ReadabilityCounts readability_counts(std::span<const TokenSeq> sents) {
  ReadabilityCounts c;
  for (const auto& s : sents) {
    const std::size_t w = textcore::word_count(s);
    if (w == 0) continue;
    ++c.sentences;
    c.words += w;
    c.syllables += textcore::syllable_count(s);
  }
  if (c.words == 0) throw UndefinedMetric("readability is undefined without any word tokens");
  return c;
}

// Flesch Reading Ease of the input treated as one document.
inline double fre(std::span<const TokenSeq> sents) {
  const auto c = readability_counts(sents);
  return 206.835 - 1.015 * (static_cast<double>(c.words) / static_cast<double>(c.sentences)) -
         84.6 * (static_cast<double>(c.syllables) / static_cast<double>(c.words));
}

// Flesch-Kincaid Grade Level of the input treated as one document.
inline double fgl(std::span<const TokenSeq> sents) {
  const auto c = readability_counts(sents);
  return 0.39 * (static_cast<double>(c.words) / static_cast<double>(c.sentences)) +
         11.8 * (static_cast<double>(c.syllables) / static_cast<double>(c.words)) - 15.59;
}

inline double fre(const TokenSeq& s) { return fre(std::span<const TokenSeq>(&s, 1)); }
inline double fgl(const TokenSeq& s) { return fgl(std::span<const TokenSeq>(&s, 1)); }

// ---------------------------------------------------------------------------
// n-gram helpers
// ---------------------------------------------------------------------------

using NgramCounts = std::map<std::string, double>;

inline NgramCounts ngram_counts(const TokenSeq& s, std::size_t n) {
  NgramCounts out;
  if (s.size() < n) return out;
  for (std::size_t i = 0; i + n <= s.size(); ++i) {
    std::string key = s[i];
    for (std::size_t j = 1; j < n; ++j) {
      key.push_back(' ');
      key += s[i + j];
    }
    out[key] += 1.0;
  }
  return out;
}

// ---------------------------------------------------------------------------
// BLEU
// ---------------------------------------------------------------------------

// Corpus-level BLEU-4 without smoothing. Clipping uses the per-n-gram
// maximum over references; the brevity penalty uses the reference length
// closest to each hypothesis (ties go to the shorter reference).
inline double bleu(std::span<const TokenSeq> hyps, std::span<const std::vector<TokenSeq>> refs) {
  if (hyps.empty()) throw UndefinedMetric("BLEU of an empty hypothesis list");
  if (hyps.size() != refs.size()) throw std::invalid_argument("BLEU: hypothesis and reference counts differ");
  std::array<double, 4> matched{}, total{};
  double hyp_len = 0, ref_len = 0;
  for (std::size_t i = 0; i < hyps.size(); ++i) {
    const auto& hyp = hyps[i];
    if (refs[i].empty()) throw std::invalid_argument("BLEU: item " + std::to_string(i) + " has no reference");
    for (std::size_t n = 1; n <= 4; ++n) {
      const auto h = ngram_counts(hyp, n);
      NgramCounts max_ref;
      for (const auto& r : refs[i])
        for (const auto& [g, c] : ngram_counts(r, n)) max_ref[g] = std::max(max_ref[g], c);
      for (const auto& [g, c] : h) {
        total[n - 1] += c;
        auto it = max_ref.find(g);
        if (it != max_ref.end()) matched[n - 1] += std::min(c, it->second);
      }
    }
    hyp_len += static_cast<double>(hyp.size());
    std::size_t best = refs[i][0].size();
    for (const auto& r : refs[i]) {
      const auto d = [&](std::size_t len) { return std::abs(static_cast<double>(len) - static_cast<double>(hyp.size())); };
      if (d(r.size()) < d(best) || (d(r.size()) == d(best) && r.size() < best)) best = r.size();
    }
    ref_len += static_cast<double>(best);
  }
  double log_p = 0;
  for (std::size_t n = 0; n < 4; ++n) {
    if (total[n] == 0 || matched[n] == 0) return 0.0;
    log_p += 0.25 * std::log(matched[n] / total[n]);
  }
  const double bp = hyp_len > ref_len ? 1.0 : std::exp(1.0 - ref_len / hyp_len);
  return bp * std::exp(log_p);
}

// ---------------------------------------------------------------------------
// SARI
// ---------------------------------------------------------------------------

struct SariComponents {
  double keep = 0;  // F1
  double del = 0;   // precision
  double add = 0;   // F1
};

namespace detail {

inline double f1(double p, double r) { return (p > 0 || r > 0) ? 2 * p * r / (p + r) : 0.0; }

// Multiset algebra with the semantics of Python's Counter: & is min,
// - keeps positive differences only.
inline NgramCounts intersect(const NgramCounts& a, const NgramCounts& b) {
  NgramCounts out;
  for (const auto& [g, c] : a) {
    auto it = b.find(g);
    if (it != b.end() && std::min(c, it->second) > 0) out[g] = std::min(c, it->second);
  }
  return out;
}
inline NgramCounts minus(const NgramCounts& a, const NgramCounts& b) {
  NgramCounts out;
  for (const auto& [g, c] : a) {
    auto it = b.find(g);
    const double d = c - (it == b.end() ? 0.0 : it->second);
    if (d > 0) out[g] = d;
  }
  return out;
}
inline double get(const NgramCounts& m, const std::string& g) {
  auto it = m.find(g);
  return it == m.end() ? 0.0 : it->second;
}

}  // namespace detail

// One n-gram order of SARI for one sentence. Source and candidate counts
// are scaled by the number of references before being compared against the
// pooled reference counts, which gives KEEP and DELETE their
// reference-fraction weighting.
inline SariComponents sari_ngram(const NgramCounts& src, const NgramCounts& cand,
                                 const std::vector<NgramCounts>& refs) {
  using namespace detail;
  const double numref = static_cast<double>(refs.size());
  NgramCounts ref_all;
  for (const auto& r : refs)
    for (const auto& [g, c] : r) ref_all[g] += c;
  NgramCounts src_rep, cand_rep;
  for (const auto& [g, c] : src) src_rep[g] = c * numref;
  for (const auto& [g, c] : cand) cand_rep[g] = c * numref;

  SariComponents out;

  const NgramCounts keep = intersect(src_rep, cand_rep);
  const NgramCounts keep_good = intersect(keep, ref_all);
  const NgramCounts keep_all = intersect(src_rep, ref_all);
  double kp = 0, kr = 0;
  for (const auto& [g, c] : keep) kp += get(keep_good, g) / c;
  for (const auto& [g, c] : keep_all) kr += get(keep_good, g) / c;
  const double keep_p = keep.empty() ? 0.0 : kp / static_cast<double>(keep.size());
  const double keep_r = keep_all.empty() ? 0.0 : kr / static_cast<double>(keep_all.size());
  out.keep = f1(keep_p, keep_r);

  const NgramCounts del = minus(src_rep, cand_rep);
  const NgramCounts del_good = minus(del, ref_all);
  double dp = 0;
  for (const auto& [g, c] : del) dp += get(del_good, g) / c;
  out.del = del.empty() ? 0.0 : dp / static_cast<double>(del.size());

  std::set<std::string> add, add_all;
  for (const auto& [g, c] : cand)
    if (!src.count(g)) add.insert(g);
  for (const auto& [g, c] : ref_all)
    if (!src.count(g)) add_all.insert(g);
  double add_good = 0;
  for (const auto& g : add)
    if (ref_all.count(g)) add_good += 1;
  const double add_p = add.empty() ? 0.0 : add_good / static_cast<double>(add.size());
  const double add_r = add_all.empty() ? 0.0 : add_good / static_cast<double>(add_all.size());
  out.add = f1(add_p, add_r);
  return out;
}

inline double sari_sentence(const TokenSeq& src, const TokenSeq& hyp, std::span<const TokenSeq> refs) {
  if (refs.empty()) throw std::invalid_argument("SARI: item has no reference");
  double keep = 0, del = 0, add = 0;
  for (std::size_t n = 1; n <= 4; ++n) {
    std::vector<NgramCounts> r;
    for (const auto& ref : refs) r.push_back(ngram_counts(ref, n));
    const auto c = sari_ngram(ngram_counts(src, n), ngram_counts(hyp, n), r);
    keep += c.keep;
    del += c.del;
    add += c.add;
  }
  return (keep / 4 + del / 4 + add / 4) / 3;
}

// Macro average of sentence SARI over the corpus.
inline double sari(std::span<const TokenSeq> srcs, std::span<const TokenSeq> hyps,
                   std::span<const std::vector<TokenSeq>> refs) {
  if (srcs.empty()) throw UndefinedMetric("SARI of an empty corpus");
  if (srcs.size() != hyps.size() || srcs.size() != refs.size())
    throw std::invalid_argument("SARI: source, hypothesis and reference counts differ");
  double total = 0;
  for (std::size_t i = 0; i < srcs.size(); ++i) total += sari_sentence(srcs[i], hyps[i], refs[i]);
  return total / static_cast<double>(srcs.size());
}

// ---------------------------------------------------------------------------
// DIFF and similarity
// ---------------------------------------------------------------------------

// Mean of len(source) - len(output) in tokens; positive means shorter output.
inline double diff(std::span<const TokenSeq> srcs, std::span<const TokenSeq> hyps) {
  if (srcs.size() != hyps.size()) throw std::invalid_argument("DIFF: source and output counts differ");
  if (srcs.empty()) return 0.0;
  double total = 0;
  for (std::size_t i = 0; i < srcs.size(); ++i)
    total += static_cast<double>(srcs[i].size()) - static_cast<double>(hyps[i].size());
  return total / static_cast<double>(srcs.size());
}

// Fixed English stop-word list used by the similarity statistic.
inline const std::set<std::string>& stop_words() {
  static const std::set<std::string> words = {
      "a",    "an",   "the",  "and",  "or",   "but",  "if",   "of",    "at",   "by",
      "for",  "with", "to",   "from", "in",   "on",   "into", "as",    "is",   "are",
      "was",  "were", "be",   "been", "being", "has", "have", "had",   "do",   "does",
      "did",  "it",   "its",  "this", "that", "these", "those", "he",  "she",  "they",
      "we",   "you",  "i",    "his",  "her",  "their", "not", "no",    "so",   "than"};
  return words;
}

// Cosine of term-frequency vectors over non-stop-word word tokens.
inline double token_cosine(const TokenSeq& a, const TokenSeq& b) {
  auto tf = [](const TokenSeq& s) {
    std::map<std::string, double> m;
    for (const auto& t : s)
      if (textcore::is_word(t) && !stop_words().count(t)) m[t] += 1.0;
    return m;
  };
  const auto ta = tf(a), tb = tf(b);
  double dot = 0, na = 0, nb = 0;
  for (const auto& [t, c] : ta) {
    na += c * c;
    auto it = tb.find(t);
    if (it != tb.end()) dot += c * it->second;
  }
  for (const auto& [t, c] : tb) nb += c * c;
  if (na == 0 || nb == 0) return 0.0;
  return std::clamp(dot / (std::sqrt(na) * std::sqrt(nb)), 0.0, 1.0);
}

// ---------------------------------------------------------------------------
// Reports
// ---------------------------------------------------------------------------

struct MetricsReport {
  double bleu = 0;
  double sari = 0;
  double fgl = 0;
  double fre = 0;
  double diff = 0;
  std::size_t n = 0;
};

// BLEU and SARI against the references; FGL/FRE of the outputs.
inline MetricsReport evaluate(std::span<const TokenSeq> srcs, std::span<const TokenSeq> hyps,
                              std::span<const std::vector<TokenSeq>> refs) {
  if (hyps.empty()) throw UndefinedMetric("cannot evaluate an empty hypothesis list");
  MetricsReport r;
  r.bleu = bleu(hyps, refs);
  r.sari = sari(srcs, hyps, refs);
  r.fgl = fgl(hyps);
  r.fre = fre(hyps);
  r.diff = diff(srcs, hyps);
  r.n = hyps.size();
  return r;
}

inline std::string fixed6(double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.6f", v);
  std::string s(buf);
  if (s == "-0.000000") s = "0.000000";
  return s;
}

// {"bleu": ..., "sari": ..., "fgl": ..., "fre": ..., "diff": ..., "n": ...}
// with six fixed decimals.
inline std::string to_json(const MetricsReport& r) {
  return "{\"bleu\": " + fixed6(r.bleu) + ", \"sari\": " + fixed6(r.sari) + ", \"fgl\": " + fixed6(r.fgl) +
         ", \"fre\": " + fixed6(r.fre) + ", \"diff\": " + fixed6(r.diff) + ", \"n\": " + std::to_string(r.n) + "}";
}

}  // namespace twinlab::metrics
