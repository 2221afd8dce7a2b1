#pragma once

#include <span>
#include <string>

#include <json.hpp>

#include "twinlab/corpus.hpp"
#include "twinlab/metrics.hpp"

namespace twinlab::metrics {

struct BucketStats {
  double tok = 0;  // mean tokens per sentence
  double fre = 0;  // mean sentence FRE
  double fgl = 0;  // mean sentence FGL
  std::size_t size = 0;
};

struct CorpusStats {
  BucketStats hard;
  BucketStats easy;
  double sim = 0;  // mean token cosine over the pairs
  std::size_t pairs = 0;
};

inline BucketStats bucket_stats(std::span<const TokenSeq> bucket) {
  if (bucket.empty()) throw UndefinedMetric("statistics of an empty bucket");
  BucketStats b;
  for (const auto& s : bucket) {
    b.tok += static_cast<double>(s.size());
    b.fre += fre(s);
    b.fgl += fgl(s);
  }
  const auto n = static_cast<double>(bucket.size());
  b.tok /= n;
  b.fre /= n;
  b.fgl /= n;
  b.size = bucket.size();
  return b;
}

inline CorpusStats corpus_stats(const textcore::CorpusSplit& split, std::span<const textcore::OOAPair> pairs) {
  CorpusStats st;
  st.hard = bucket_stats(split.hard);
  st.easy = bucket_stats(split.easy);
  for (const auto& p : pairs) st.sim += token_cosine(p.source, p.target);
  st.pairs = pairs.size();
  if (!pairs.empty()) st.sim /= static_cast<double>(pairs.size());
  return st;
}

// Both bucket objects carry tok, fre, fgl, sim and size.
inline nlohmann::ordered_json to_json(const CorpusStats& st) {
  auto bucket = [&](const BucketStats& b) {
    nlohmann::ordered_json j;
    j["tok"] = b.tok;
    j["fre"] = b.fre;
    j["fgl"] = b.fgl;
    j["sim"] = st.sim;
    j["size"] = b.size;
    return j;
  };
  nlohmann::ordered_json j;
  j["hard"] = bucket(st.hard);
  j["easy"] = bucket(st.easy);
  j["pairs"] = st.pairs;
  return j;
}

}  // namespace twinlab::metrics
