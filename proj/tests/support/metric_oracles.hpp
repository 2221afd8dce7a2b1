#pragma once

// Naive reference implementations used only by the tests. They enumerate
// n-grams as token vectors and count by linear scans, sharing no code with
// the library's map-based implementations.

#include <algorithm>
#include <cctype>
#include <cmath>
#include <set>
#include <string>
#include <vector>

namespace twinlab::testkit {

using Tokens = std::vector<std::string>;
using Gram = std::vector<std::string>;

inline std::vector<Gram> all_grams(const Tokens& s, std::size_t n) {
  std::vector<Gram> out;
  for (std::size_t i = 0; i + n <= s.size(); ++i) out.emplace_back(s.begin() + i, s.begin() + i + n);
  return out;
}

inline double occurrences(const std::vector<Gram>& bag, const Gram& g) {
  return static_cast<double>(std::count(bag.begin(), bag.end(), g));
}

inline std::vector<Gram> distinct(std::vector<Gram> bag) {
  std::sort(bag.begin(), bag.end());
  bag.erase(std::unique(bag.begin(), bag.end()), bag.end());
  return bag;
}

inline double brute_f1(double p, double r) { return p + r > 0 ? 2 * p * r / (p + r) : 0.0; }

// One n-gram order; returns {keep F1, delete precision, add F1}.
inline std::vector<double> brute_sari_order(const Tokens& src, const Tokens& hyp, const std::vector<Tokens>& refs,
                                            std::size_t n) {
  const auto s = all_grams(src, n);
  const auto c = all_grams(hyp, n);
  std::vector<Gram> r;
  for (const auto& ref : refs)
    for (auto& g : all_grams(ref, n)) r.push_back(std::move(g));
  const double k = static_cast<double>(refs.size());

  std::vector<Gram> universe = s;
  universe.insert(universe.end(), c.begin(), c.end());
  universe.insert(universe.end(), r.begin(), r.end());
  universe = distinct(universe);

  double kp_sum = 0, kp_n = 0, kr_sum = 0, kr_n = 0, dp_sum = 0, dp_n = 0;
  for (const auto& g : universe) {
    const double sc = occurrences(s, g) * k, cc = occurrences(c, g) * k, rc = occurrences(r, g);
    const double keep = std::min(sc, cc);
    const double keep_good = std::min(keep, rc);
    const double keep_all = std::min(sc, rc);
    if (keep > 0) {
      kp_sum += keep_good / keep;
      kp_n += 1;
    }
    if (keep_all > 0) {
      kr_sum += keep_good / keep_all;
      kr_n += 1;
    }
    const double del = std::max(sc - cc, 0.0);
    if (del > 0) {
      dp_sum += std::max(del - rc, 0.0) / del;
      dp_n += 1;
    }
  }

  double add_n = 0, add_all_n = 0, add_good = 0;
  for (const auto& g : universe) {
    const bool in_s = occurrences(s, g) > 0, in_c = occurrences(c, g) > 0, in_r = occurrences(r, g) > 0;
    if (in_c && !in_s) {
      add_n += 1;
      if (in_r) add_good += 1;
    }
    if (in_r && !in_s) add_all_n += 1;
  }

  const double keep_f1 = brute_f1(kp_n > 0 ? kp_sum / kp_n : 0.0, kr_n > 0 ? kr_sum / kr_n : 0.0);
  const double del_p = dp_n > 0 ? dp_sum / dp_n : 0.0;
  const double add_f1 = brute_f1(add_n > 0 ? add_good / add_n : 0.0, add_all_n > 0 ? add_good / add_all_n : 0.0);
  return {keep_f1, del_p, add_f1};
}

inline double brute_sari(const Tokens& src, const Tokens& hyp, const std::vector<Tokens>& refs) {
  double total = 0;
  for (std::size_t n = 1; n <= 4; ++n)
    for (double v : brute_sari_order(src, hyp, refs, n)) total += v;
  return total / 12.0;
}

// Corpus BLEU-4, no smoothing, closest reference length (shorter on ties).
inline double brute_bleu(const std::vector<Tokens>& hyps, const std::vector<std::vector<Tokens>>& refs) {
  double log_sum = 0;
  for (std::size_t n = 1; n <= 4; ++n) {
    double hit = 0, all = 0;
    for (std::size_t i = 0; i < hyps.size(); ++i) {
      const auto h = all_grams(hyps[i], n);
      for (const auto& g : distinct(h)) {
        double cap = 0;
        for (const auto& r : refs[i]) cap = std::max(cap, occurrences(all_grams(r, n), g));
        hit += std::min(occurrences(h, g), cap);
      }
      all += static_cast<double>(h.size());
    }
    if (hit == 0) return 0.0;
    log_sum += std::log(hit / all) / 4.0;
  }
  double c = 0, r = 0;
  for (std::size_t i = 0; i < hyps.size(); ++i) {
    const double hl = static_cast<double>(hyps[i].size());
    double best = -1;
    for (const auto& ref : refs[i]) {
      const double rl = static_cast<double>(ref.size());
      if (best < 0 || std::abs(rl - hl) < std::abs(best - hl) || (std::abs(rl - hl) == std::abs(best - hl) && rl < best))
        best = rl;
    }
    c += hl;
    r += best;
  }
  const double bp = c > r ? 1.0 : std::exp(1.0 - r / c);
  return bp * std::exp(log_sum);
}

inline bool brute_is_word(const std::string& t) {
  return std::any_of(t.begin(), t.end(), [](char c) { return std::isalnum(static_cast<unsigned char>(c)); });
}

// Term-frequency cosine over word tokens outside `stop`, via parallel count
// vectors over the union of terms.
inline double brute_cosine(const Tokens& a, const Tokens& b, const std::set<std::string>& stop) {
  Tokens terms;
  auto keep = [&](const std::string& t) { return brute_is_word(t) && !stop.count(t); };
  for (const Tokens* s : {&a, &b})
    for (const auto& t : *s)
      if (keep(t) && std::find(terms.begin(), terms.end(), t) == terms.end()) terms.push_back(t);
  double dot = 0, na = 0, nb = 0;
  for (const auto& term : terms) {
    const double x = static_cast<double>(std::count(a.begin(), a.end(), term));
    const double y = static_cast<double>(std::count(b.begin(), b.end(), term));
    dot += x * y;
    na += x * x;
    nb += y * y;
  }
  return na > 0 && nb > 0 ? dot / std::sqrt(na * nb) : 0.0;
}

}  // namespace twinlab::testkit
