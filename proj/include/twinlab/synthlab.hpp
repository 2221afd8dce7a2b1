#pragma once

// Synthetic hard/easy corpus and the desk-scale variant comparison.
//
// Easy sentences come from a monosyllabic lexicon and a small grammar:
//
//   S  -> NP V NP [P the PLACE] .
//   NP -> (the | a) [ADJ] N
//
// A hard sentence is an independent core of the same shape with a filler
// clause of polysyllabic words inserted either after the subject NP
// (", notwithstanding considerable complications ,") or before the final
// period. Held-out hard sentences keep their core as the gold simplification.

#include <algorithm>
#include <atomic>
#include <cstdint>
#include <cstdlib>
#include <exception>
#include <filesystem>
#include <functional>
#include <mutex>
#include <optional>
#include <ostream>
#include <set>
#include <string>
#include <thread>
#include <vector>

#include <json.hpp>

#include "twinlab/corpus.hpp"
#include "twinlab/corpus_stats.hpp"
#include "twinlab/error.hpp"
#include "twinlab/metrics.hpp"
#include "twinlab/random.hpp"
#include "twinlab/textcore.hpp"
#include "twinlab/trainer.hpp"
#include "twinlab/twinnet.hpp"

namespace twinlab::synthlab {

namespace fs = std::filesystem;
using json = nlohmann::ordered_json;
using textcore::CorpusSplit;
using textcore::OOAPair;
using textcore::TokenSeq;

// ---------------------------------------------------------------------------
// Lexicons
// ---------------------------------------------------------------------------

struct Lexicon {
  std::vector<std::string> nouns, verbs, adjectives, places, preps;
  std::vector<std::string> connectors, filler_adjectives, filler_nouns;
};

inline const Lexicon& full_lexicon() {
  static const Lexicon lex{
      {"cat", "dog", "man", "boy", "bird", "fish", "cow", "pig", "fox", "hen", "rat", "king", "duck", "frog", "goat",
       "wolf", "bear", "girl", "maid", "cook", "lamb", "mouse", "horse", "sheep"},
      {"saw", "ate", "found", "got", "had", "fed", "met", "held", "kept", "took", "hit", "dug", "bit", "hid",
       "lost", "won"},
      {"big", "red", "old", "small", "hot", "cold", "good", "bad", "new", "tall", "young", "sad", "glad", "blue",
       "fat", "wet"},
      {"park", "barn", "shop", "town", "lake", "field", "road", "hill", "yard", "pond", "wood", "house"},
      {"in", "at", "on", "near", "by"},
      {"notwithstanding", "consequently", "nevertheless", "accordingly", "furthermore", "simultaneously",
       "approximately", "additionally", "regardless", "particularly"},
      {"considerable", "administrative", "unprecedented", "organizational", "international", "extraordinary",
       "environmental", "institutional", "comprehensive", "economical", "traditional", "political"},
      {"complications", "difficulties", "investigations", "regulations", "negotiations", "modifications",
       "considerations", "responsibilities", "communications", "expectations", "authorities", "operations"}};
  return lex;
}

// ---------------------------------------------------------------------------
// Generation
// ---------------------------------------------------------------------------

struct SynthConfig {
  std::size_t easy_lexicon = 16;    // words used per easy category (nouns, verbs, ...)
  std::size_t filler_lexicon = 10;  // words used per filler category
  std::size_t easy_min_len = 6;     // tokens, final period included
  std::size_t easy_max_len = 11;
  std::size_t filler_min_words = 2;  // polysyllabic words per filler clause
  std::size_t filler_max_words = 3;
  std::size_t n_easy = 10000;
  std::size_t n_hard = 10000;
  std::size_t n_heldout = 300;
  std::size_t n_pairs = 20000;
  std::uint64_t seed = 7;
};

inline void validate(const SynthConfig& c) {
  if (c.easy_lexicon < 2) throw ConfigError("synth.easy_lexicon: must be at least 2");
  if (c.filler_lexicon < 1) throw ConfigError("synth.filler_lexicon: must be at least 1");
  if (c.easy_min_len < 6 || c.easy_min_len > c.easy_max_len || c.easy_max_len > 11)
    throw ConfigError("synth.easy_min_len/easy_max_len: need 6 <= min <= max <= 11");
  if (c.filler_min_words < 1 || c.filler_min_words > c.filler_max_words)
    throw ConfigError("synth.filler_min_words/filler_max_words: need 1 <= min <= max");
  if (c.n_easy < 1 || c.n_hard < 1 || c.n_pairs < 1) throw ConfigError("synth: corpus sizes must be positive");
}

inline json to_json(const SynthConfig& c) {
  return {{"easy_lexicon", c.easy_lexicon},   {"filler_lexicon", c.filler_lexicon},
          {"easy_min_len", c.easy_min_len},   {"easy_max_len", c.easy_max_len},
          {"filler_min_words", c.filler_min_words}, {"filler_max_words", c.filler_max_words},
          {"n_easy", c.n_easy},               {"n_hard", c.n_hard},
          {"n_heldout", c.n_heldout},         {"n_pairs", c.n_pairs},
          {"seed", c.seed}};
}

inline SynthConfig synth_config_from_json(const json& j) {
  SynthConfig c;
  if (!j.is_object()) throw ConfigError("synth: expected a JSON object");
  for (const auto& [k, v] : j.items()) {
    auto as_size = [&]() {
      if (!v.is_number_integer() || v.get<std::int64_t>() < 0)
        throw ConfigError("synth." + k + ": expected a non-negative integer");
      return v.get<std::size_t>();
    };
    if (k == "easy_lexicon") c.easy_lexicon = as_size();
    else if (k == "filler_lexicon") c.filler_lexicon = as_size();
    else if (k == "easy_min_len") c.easy_min_len = as_size();
    else if (k == "easy_max_len") c.easy_max_len = as_size();
    else if (k == "filler_min_words") c.filler_min_words = as_size();
    else if (k == "filler_max_words") c.filler_max_words = as_size();
    else if (k == "n_easy") c.n_easy = as_size();
    else if (k == "n_hard") c.n_hard = as_size();
    else if (k == "n_heldout") c.n_heldout = as_size();
    else if (k == "n_pairs") c.n_pairs = as_size();
    else if (k == "seed") c.seed = as_size();
    else throw ConfigError("synth." + k + ": unknown field");
  }
  validate(c);
  return c;
}

class Generator {
 public:
  Generator(const SynthConfig& cfg, std::uint64_t seed) : cfg_(cfg), rng_(seed) {
    const Lexicon& full = full_lexicon();
    auto take = [](const std::vector<std::string>& v, std::size_t n) {
      return std::vector<std::string>(v.begin(), v.begin() + static_cast<std::ptrdiff_t>(std::min(n, v.size())));
    };
    lex_.nouns = take(full.nouns, cfg.easy_lexicon);
    lex_.verbs = take(full.verbs, cfg.easy_lexicon);
    lex_.adjectives = take(full.adjectives, cfg.easy_lexicon);
    lex_.places = take(full.places, cfg.easy_lexicon);
    lex_.preps = full.preps;
    lex_.connectors = take(full.connectors, cfg.filler_lexicon);
    lex_.filler_adjectives = take(full.filler_adjectives, cfg.filler_lexicon);
    lex_.filler_nouns = take(full.filler_nouns, cfg.filler_lexicon);
  }

  // Core sentence and the index just past its subject NP.
  std::pair<TokenSeq, std::size_t> core() {
    for (;;) {
      TokenSeq s;
      noun_phrase(s);
      const std::size_t subject_end = s.size();
      s.push_back(pick(lex_.verbs));
      noun_phrase(s);
      if (rng_.bernoulli(0.5)) {
        s.push_back(pick(lex_.preps));
        s.push_back("the");
        s.push_back(pick(lex_.places));
      }
      s.push_back(".");
      if (s.size() >= cfg_.easy_min_len && s.size() <= cfg_.easy_max_len) return {s, subject_end};
    }
  }

  TokenSeq easy() { return core().first; }

  // Hard sentence and its core.
  std::pair<TokenSeq, TokenSeq> hard() {
    auto [c, subject_end] = core();
    TokenSeq clause{pick(lex_.connectors)};
    const std::size_t words =
        cfg_.filler_min_words + rng_.index(cfg_.filler_max_words - cfg_.filler_min_words + 1);
    for (std::size_t i = 1; i < words; ++i)
      clause.push_back(i + 1 == words ? pick(lex_.filler_nouns) : pick(lex_.filler_adjectives));
    TokenSeq h;
    if (rng_.bernoulli(0.5)) {
      h.assign(c.begin(), c.begin() + static_cast<std::ptrdiff_t>(subject_end));
      h.push_back(",");
      h.insert(h.end(), clause.begin(), clause.end());
      h.push_back(",");
      h.insert(h.end(), c.begin() + static_cast<std::ptrdiff_t>(subject_end), c.end());
    } else {
      h.assign(c.begin(), c.end() - 1);
      h.push_back(",");
      h.insert(h.end(), clause.begin(), clause.end());
      h.push_back(".");
    }
    return {h, c};
  }

 private:
  const std::string& pick(const std::vector<std::string>& v) { return v[rng_.index(v.size())]; }

  void noun_phrase(TokenSeq& s) {
    s.push_back(rng_.bernoulli(0.5) ? "the" : "a");
    if (rng_.bernoulli(0.5)) s.push_back(pick(lex_.adjectives));
    s.push_back(pick(lex_.nouns));
  }

  SynthConfig cfg_;
  Rng rng_;
  Lexicon lex_;
};

struct SynthCorpus {
  CorpusSplit split;                  // training buckets
  std::vector<TokenSeq> heldout_hard;  // evaluation sources
  std::vector<TokenSeq> heldout_gold;  // their cores
};

// Easy, hard and held-out sentences come from separate random streams; held-out
// items whose text occurs in the training buckets are redrawn.
inline SynthCorpus gen_synthetic(const SynthConfig& cfg) {
  validate(cfg);
  SynthCorpus out;
  Generator easy_gen(cfg, derive_seed(cfg.seed, 10));
  Generator hard_gen(cfg, derive_seed(cfg.seed, 11));
  Generator held_gen(cfg, derive_seed(cfg.seed, 12));
  for (std::size_t i = 0; i < cfg.n_easy; ++i) out.split.easy.push_back(easy_gen.easy());
  for (std::size_t i = 0; i < cfg.n_hard; ++i) out.split.hard.push_back(hard_gen.hard().first);
  std::set<TokenSeq> seen(out.split.easy.begin(), out.split.easy.end());
  seen.insert(out.split.hard.begin(), out.split.hard.end());
  while (out.heldout_hard.size() < cfg.n_heldout) {
    auto [h, c] = held_gen.hard();
    if (seen.count(h)) continue;
    out.heldout_hard.push_back(h);
    out.heldout_gold.push_back(c);
  }
  for (std::size_t i = 0; i < out.split.hard.size(); ++i) out.split.hard_index.push_back(i);
  for (std::size_t i = 0; i < out.split.easy.size(); ++i) out.split.easy_index.push_back(out.split.hard.size() + i);
  out.split.provenance = "synthetic corpus, seed " + std::to_string(cfg.seed);
  out.split.hard_max_fre = 0;
  out.split.easy_min_fre = 0;
  return out;
}

inline void write_synthetic(const fs::path& dir, const SynthConfig& cfg, const SynthCorpus& c,
                            std::span<const OOAPair> pairs) {
  textcore::write_split(dir, c.split, cfg.seed);
  textcore::write_corpus(dir / "heldout_hard.txt", c.heldout_hard);
  textcore::write_corpus(dir / "heldout_gold.txt", c.heldout_gold);
  textcore::write_pairs(dir / "pairs.tsv", pairs);
  io::write_file_atomic(dir / "synth.json", to_json(cfg).dump(2) + "\n");
  io::write_file_atomic(dir / "stats.json", metrics::to_json(metrics::corpus_stats(c.split, pairs)).dump(2) + "\n");
}

// ---------------------------------------------------------------------------
// Worker pool
// ---------------------------------------------------------------------------

// TWINLAB_THREADS if set to a positive integer, else the hardware count.
inline std::size_t worker_threads() {
  if (const char* env = std::getenv("TWINLAB_THREADS")) {
    char* end = nullptr;
    const long v = std::strtol(env, &end, 10);
    if (end != env && *end == '\0' && v > 0) return static_cast<std::size_t>(v);
    throw ConfigError(std::string("TWINLAB_THREADS: expected a positive integer, got '") + env + "'");
  }
  return std::max<std::size_t>(1, std::thread::hardware_concurrency());
}

// Runs jobs[i]() for every i on up to `threads` workers. The first
// exception is rethrown after all workers finish.
inline void run_parallel(std::vector<std::function<void()>> jobs, std::size_t threads) {
  threads = std::max<std::size_t>(1, std::min(threads, jobs.size()));
  std::atomic<std::size_t> next{0};
  std::exception_ptr failure;
  std::mutex failure_mutex;
  auto worker = [&] {
    for (std::size_t i; (i = next.fetch_add(1)) < jobs.size();) {
      try {
        jobs[i]();
      } catch (...) {
        std::lock_guard lock(failure_mutex);
        if (!failure) failure = std::current_exception();
      }
    }
  };
  if (threads == 1) {
    worker();
  } else {
    std::vector<std::jthread> pool;
    for (std::size_t t = 0; t < threads; ++t) pool.emplace_back(worker);
  }
  if (failure) std::rethrow_exception(failure);
}

// ---------------------------------------------------------------------------
// Desk experiment
// ---------------------------------------------------------------------------

struct VariantSpec {
  std::string label;  // e.g. "gamma_js_flip0"
  trainer::TrainConfig cfg;
};

struct DeskConfig {
  SynthConfig synth;
  std::vector<VariantSpec> variants;
  std::vector<std::uint64_t> seeds{1, 2, 3};
  std::optional<fs::path> out_dir;  // per-run checkpoints and history
  std::size_t threads = 1;
  std::ostream* log = nullptr;
};

struct RunReport {
  std::string label;
  std::uint64_t seed = 0;
  bool ok = false;
  std::string error;
  metrics::MetricsReport report;  // outputs vs gold cores
  double bleu_vs_source = 0;
  double fre_source = 0;
  double fgl_source = 0;
  double upper_copy_rate = 0;  // UPPER path exact reconstructions of easy sentences
  bool tied = false;           // weight tying held after training
  std::int64_t steps = 0;
  std::vector<TokenSeq> outputs;
};

struct DeskResult {
  RunReport source;  // identity baseline
  std::vector<RunReport> runs;

  const RunReport* find(const std::string& label, std::uint64_t seed) const {
    for (const auto& r : runs)
      if (r.label == label && r.seed == seed) return &r;
    return nullptr;
  }
};

// Reports for `outputs` as simplifications of the held-out hard sentences.
inline void score(RunReport& r, const SynthCorpus& corpus, std::vector<TokenSeq> outputs) {
  std::vector<std::vector<TokenSeq>> gold, src;
  for (std::size_t i = 0; i < corpus.heldout_hard.size(); ++i) {
    gold.push_back({corpus.heldout_gold[i]});
    src.push_back({corpus.heldout_hard[i]});
  }
  // Empty outputs are scored as a lone period so that every metric stays defined.
  for (auto& o : outputs)
    if (o.empty()) o = {"."};
  r.report = metrics::evaluate(corpus.heldout_hard, outputs, gold);
  r.bleu_vs_source = metrics::bleu(outputs, src);
  r.fre_source = metrics::fre(corpus.heldout_hard);
  r.fgl_source = metrics::fgl(corpus.heldout_hard);
  r.outputs = std::move(outputs);
}

inline json to_json(const RunReport& r) {
  json j;
  j["variant"] = r.label;
  j["seed"] = r.seed;
  j["ok"] = r.ok;
  if (!r.ok) {
    j["error"] = r.error;
    return j;
  }
  j["bleu"] = r.report.bleu;
  j["sari"] = r.report.sari;
  j["fgl"] = r.report.fgl;
  j["fre"] = r.report.fre;
  j["diff"] = r.report.diff;
  j["n"] = r.report.n;
  j["bleu_vs_source"] = r.bleu_vs_source;
  j["fre_gain"] = r.report.fre - r.fre_source;
  j["upper_copy_rate"] = r.upper_copy_rate;
  j["tied"] = r.tied;
  j["steps"] = r.steps;
  return j;
}

inline json to_json(const DeskResult& d) {
  json arr = json::array();
  arr.push_back(to_json(d.source));
  for (const auto& r : d.runs) arr.push_back(to_json(r));
  return arr;
}

inline RunReport run_variant(const VariantSpec& spec, std::uint64_t seed, const SynthCorpus& corpus,
                             std::span<const OOAPair> pairs, const DeskConfig& desk) {
  RunReport r;
  r.label = spec.label;
  r.seed = seed;
  trainer::TrainConfig cfg = spec.cfg;
  cfg.seed = seed;
  trainer::TrainOptions opt;
  if (desk.out_dir) opt.out_dir = *desk.out_dir / (spec.label + "_seed" + std::to_string(seed));
  opt.log = desk.log;
  try {
    auto res = trainer::train(cfg, pairs, opt);
    const auto& model = res.state.model;
    const auto& vocab = res.state.vocab;
    r.steps = res.state.step;
    r.tied = res.initial_storage == twinnet::path_storage(model, textcore::Task::Lower) &&
             twinnet::paths_share_storage(model, vocab, corpus.split.easy.front());
    score(r, corpus, twinnet::simplify(model, vocab, corpus.heldout_hard, cfg.max_len));
    const std::size_t probe = std::min<std::size_t>(200, corpus.split.easy.size());
    const std::span<const TokenSeq> easy(corpus.split.easy.data(), probe);
    const auto rebuilt = twinnet::transduce(model, vocab, easy, textcore::Task::Upper, cfg.max_len);
    std::size_t exact = 0;
    for (std::size_t i = 0; i < probe; ++i) exact += rebuilt[i] == easy[i] ? 1 : 0;
    r.upper_copy_rate = static_cast<double>(exact) / static_cast<double>(probe);
    r.ok = true;
  } catch (const DivergedError& e) {
    r.error = e.what();
  }
  return r;
}

// Shared training settings of the standard comparison.
inline trainer::TrainConfig desk_base_config() {
  trainer::TrainConfig c;
  c.flip_rate = 0.2;
  c.lr = 2e-3;
  c.batch_size = 32;
  c.max_steps = 1500;
  c.embed_dim = 64;
  c.hidden_dim = 128;
  c.max_len = 40;
  c.log_every = 0;
  return c;
}

// beta, gamma_js, gamma_js without flips, and gamma_w.
inline std::vector<VariantSpec> standard_variants(const trainer::TrainConfig& base) {
  using trainer::Variant;
  std::vector<VariantSpec> v;
  auto with = [&](std::string label, Variant variant, double flip_rate) {
    trainer::TrainConfig c = base;
    c.variant = variant;
    c.flip_rate = flip_rate;
    if (trainer::uses_critic(variant)) {
      trainer::CriticConfig k = base.critic.value_or(trainer::CriticConfig{});
      k.steps_per_gen = variant == Variant::GammaW ? 5 : 1;
      k.lr = base.critic ? base.critic->lr : base.lr;
      c.critic = k;
    } else {
      c.critic.reset();
    }
    v.push_back({std::move(label), c});
  };
  with("beta", Variant::Beta, base.flip_rate);
  with("gamma_js", Variant::GammaJs, base.flip_rate);
  with("gamma_js_flip0", Variant::GammaJs, 0.0);
  with("gamma_w", Variant::GammaW, base.flip_rate);
  return v;
}

inline DeskConfig default_desk_config() {
  DeskConfig d;
  d.variants = standard_variants(desk_base_config());
  return d;
}

// {"synth": {...}, "seeds": [...], "base": {train config fields},
//  "variants": [{"label": ..., "config": {train config}}]}
// Without "variants" the standard four are derived from "base".
inline DeskConfig desk_config_from_json(const json& j) {
  if (!j.is_object()) throw ConfigError("desk: expected a JSON object");
  for (const auto& [k, v] : j.items())
    if (k != "synth" && k != "seeds" && k != "base" && k != "variants")
      throw ConfigError("desk." + k + ": unknown field");
  DeskConfig d;
  if (j.contains("synth")) d.synth = synth_config_from_json(j.at("synth"));
  if (j.contains("seeds")) {
    const json& s = j.at("seeds");
    const bool ok = s.is_array() && std::all_of(s.begin(), s.end(), [](const json& x) {
      return x.is_number_integer() && x.get<std::int64_t>() >= 0;
    });
    if (!ok) throw ConfigError("desk.seeds: expected an array of non-negative integers");
    d.seeds = s.get<std::vector<std::uint64_t>>();
    if (d.seeds.empty()) throw ConfigError("desk.seeds: must not be empty");
  }
  trainer::TrainConfig base = desk_base_config();
  if (j.contains("base")) {
    json b = trainer::to_json(base);
    b.erase("critic");
    for (const auto& [k, v] : j.at("base").items()) {
      if (k == "dims" && v.is_object())
        for (const auto& [dk, dv] : v.items()) b["dims"][dk] = dv;
      else
        b[k] = v;
    }
    b["variant"] = "beta";  // the standard variants set their own
    base = trainer::config_from_json(b);
  }
  if (j.contains("variants")) {
    for (const auto& v : j.at("variants")) {
      if (!v.contains("label") || !v.contains("config"))
        throw ConfigError("desk.variants: each entry needs a label and a config");
      json c = trainer::to_json(base);
      c.erase("critic");
      for (const auto& [k, val] : v.at("config").items()) {
        if (k == "dims" && val.is_object())
          for (const auto& [dk, dv] : val.items()) c["dims"][dk] = dv;
        else
          c[k] = val;
      }
      d.variants.push_back({v.at("label").get<std::string>(), trainer::config_from_json(c)});
    }
  } else {
    d.variants = standard_variants(base);
  }
  return d;
}

inline json to_json(const DeskConfig& d) {
  json j;
  j["synth"] = to_json(d.synth);
  j["seeds"] = d.seeds;
  json vs = json::array();
  for (const auto& v : d.variants) vs.push_back({{"label", v.label}, {"config", trainer::to_json(v.cfg)}});
  j["variants"] = std::move(vs);
  return j;
}

// Trains every variant for every seed on one synthetic corpus and scores
// the LOWER path on the held-out hard sentences. Runs are independent and
// may execute concurrently; results are stored by (variant, seed) order.
inline DeskResult run_desk_experiment(const DeskConfig& desk) {
  const SynthCorpus corpus = gen_synthetic(desk.synth);
  const auto pairs = textcore::make_ooa_pairs(corpus.split, static_cast<std::int64_t>(desk.synth.n_pairs),
                                              derive_seed(desk.synth.seed, 13));
  if (desk.out_dir) write_synthetic(*desk.out_dir / "corpus", desk.synth, corpus, pairs);
  DeskResult out;
  out.source.label = "source";
  out.source.ok = true;
  out.source.tied = true;
  score(out.source, corpus, corpus.heldout_hard);

  out.runs.resize(desk.variants.size() * desk.seeds.size());
  std::vector<std::function<void()>> jobs;
  for (std::size_t v = 0; v < desk.variants.size(); ++v)
    for (std::size_t k = 0; k < desk.seeds.size(); ++k)
      jobs.emplace_back([&, v, k] {
        out.runs[v * desk.seeds.size() + k] = run_variant(desk.variants[v], desk.seeds[k], corpus, pairs, desk);
      });
  run_parallel(std::move(jobs), desk.threads);
  return out;
}

}  // namespace twinlab::synthlab
