#pragma once

// Hard/easy corpus construction and out-of-alignment pairing, plus the
// on-disk corpus formats (one sentence per line, TSV pairs, JSON sidecar).

#include <cstdint>
#include <filesystem>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include <json.hpp>

#include "twinlab/error.hpp"
#include "twinlab/io.hpp"
#include "twinlab/metrics.hpp"
#include "twinlab/random.hpp"
#include "twinlab/textcore.hpp"

namespace twinlab::textcore {

struct CorpusSplit {
  std::vector<TokenSeq> hard;
  std::vector<TokenSeq> easy;
  // Positions in the source corpus; hard, easy and dropped partition it.
  std::vector<std::size_t> hard_index;
  std::vector<std::size_t> easy_index;
  std::vector<std::size_t> dropped_index;
  std::string provenance;
  double hard_max_fre = 0;
  double easy_min_fre = 0;
};

// Source is hard, target is easy; nothing relates the two.
struct OOAPair {
  TokenSeq source;
  TokenSeq target;

  friend bool operator==(const OOAPair&, const OOAPair&) = default;
};

// hard: FRE < hard_max_fre; easy: FRE > easy_min_fre; everything else
// (including sentences without words) is dropped.
inline CorpusSplit partition_corpus(std::span<const TokenSeq> sents, double hard_max_fre, double easy_min_fre) {
  if (!(hard_max_fre < easy_min_fre))
    throw std::invalid_argument("partition_corpus: hard_max_fre must be below easy_min_fre");
  CorpusSplit split;
  split.hard_max_fre = hard_max_fre;
  split.easy_min_fre = easy_min_fre;
  for (std::size_t i = 0; i < sents.size(); ++i) {
    if (word_count(sents[i]) == 0) {
      split.dropped_index.push_back(i);
      continue;
    }
    const double score = metrics::fre(sents[i]);
    if (score < hard_max_fre) {
      split.hard.push_back(sents[i]);
      split.hard_index.push_back(i);
    } else if (score > easy_min_fre) {
      split.easy.push_back(sents[i]);
      split.easy_index.push_back(i);
    } else {
      split.dropped_index.push_back(i);
    }
  }
  if (split.hard.empty() || split.easy.empty())
    throw PartitionEmpty("partition with hard FRE < " + metrics::fixed6(hard_max_fre) + " and easy FRE > " +
                         metrics::fixed6(easy_min_fre) + " left the " + (split.hard.empty() ? "hard" : "easy") +
                         " bucket empty");
  return split;
}

// Pairs are drawn from independently shuffled bucket orders; a bucket is
// reshuffled only once all of its sentences have been used.
inline std::vector<OOAPair> make_ooa_pairs(const CorpusSplit& split, std::int64_t n, std::uint64_t seed) {
  if (n <= 0) throw InvalidCount("make_ooa_pairs: pair count must be positive, got " + std::to_string(n));
  if (split.hard.empty() || split.easy.empty()) throw PartitionEmpty("make_ooa_pairs: empty bucket");
  Rng rng(seed);
  auto make_order = [&](std::size_t size) {
    std::vector<std::size_t> order(size);
    for (std::size_t i = 0; i < size; ++i) order[i] = i;
    rng.shuffle(order.begin(), order.end());
    return order;
  };
  std::vector<std::size_t> hard_order = make_order(split.hard.size());
  std::vector<std::size_t> easy_order = make_order(split.easy.size());
  std::size_t hi = 0, ei = 0;
  std::vector<OOAPair> pairs;
  pairs.reserve(static_cast<std::size_t>(n));
  for (std::int64_t k = 0; k < n; ++k) {
    if (hi == hard_order.size()) {
      hard_order = make_order(split.hard.size());
      hi = 0;
    }
    if (ei == easy_order.size()) {
      easy_order = make_order(split.easy.size());
      ei = 0;
    }
    pairs.push_back({split.hard[hard_order[hi++]], split.easy[easy_order[ei++]]});
  }
  return pairs;
}

// ---------------------------------------------------------------------------
// Files
// ---------------------------------------------------------------------------

// Tokenizes every non-blank line.
inline std::vector<TokenSeq> read_corpus(const std::filesystem::path& path) {
  std::vector<TokenSeq> out;
  for (const auto& line : io::read_lines(path)) {
    if (line.find_first_not_of(" \t\r\f\v") == std::string::npos) continue;
    out.push_back(tokenize(line));
  }
  return out;
}

inline std::string corpus_text(std::span<const TokenSeq> sents) {
  std::string out;
  for (const auto& s : sents) {
    out += detokenize(s);
    out.push_back('\n');
  }
  return out;
}

inline void write_corpus(const std::filesystem::path& path, std::span<const TokenSeq> sents) {
  io::write_file_atomic(path, corpus_text(sents));
}

// hard.txt, easy.txt and split.json in `dir`.
inline void write_split(const std::filesystem::path& dir, const CorpusSplit& split, std::uint64_t seed) {
  write_corpus(dir / "hard.txt", split.hard);
  write_corpus(dir / "easy.txt", split.easy);
  nlohmann::ordered_json meta;
  meta["hard_max_fre"] = split.hard_max_fre;
  meta["easy_min_fre"] = split.easy_min_fre;
  meta["seed"] = seed;
  meta["provenance"] = split.provenance;
  meta["hard_count"] = split.hard.size();
  meta["easy_count"] = split.easy.size();
  meta["dropped_count"] = split.dropped_index.size();
  io::write_file_atomic(dir / "split.json", meta.dump(2) + "\n");
}

inline CorpusSplit read_split(const std::filesystem::path& dir) {
  CorpusSplit split;
  split.hard = read_corpus(dir / "hard.txt");
  split.easy = read_corpus(dir / "easy.txt");
  const auto meta = nlohmann::json::parse(io::read_file(dir / "split.json"));
  split.hard_max_fre = meta.at("hard_max_fre").get<double>();
  split.easy_min_fre = meta.at("easy_min_fre").get<double>();
  split.provenance = meta.value("provenance", "");
  return split;
}

inline std::string pairs_tsv(std::span<const OOAPair> pairs) {
  std::string out;
  for (const auto& p : pairs) {
    out += detokenize(p.source);
    out.push_back('\t');
    out += detokenize(p.target);
    out.push_back('\n');
  }
  return out;
}

inline void write_pairs(const std::filesystem::path& path, std::span<const OOAPair> pairs) {
  io::write_file_atomic(path, pairs_tsv(pairs));
}

inline std::vector<OOAPair> read_pairs(const std::filesystem::path& path) {
  std::vector<OOAPair> pairs;
  std::size_t lineno = 0;
  for (const auto& line : io::read_lines(path)) {
    ++lineno;
    if (line.empty()) continue;
    const auto tab = line.find('\t');
    if (tab == std::string::npos || line.find('\t', tab + 1) != std::string::npos)
      throw ConfigError(path.string() + ":" + std::to_string(lineno) + ": expected source<TAB>target");
    pairs.push_back({tokenize(line.substr(0, tab)), tokenize(line.substr(tab + 1))});
  }
  return pairs;
}

}  // namespace twinlab::textcore
