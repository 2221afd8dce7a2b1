// twinlab command-line interface.
//
//   twinlab prep     --input FILE --hard-max-fre N --easy-min-fre N --pairs N --seed N --out DIR
//   twinlab train    --config FILE --pairs FILE --out DIR [--resume CKPT]
//   twinlab simplify --model CKPT --input FILE --output FILE
//   twinlab eval     --src FILE --hyp FILE --refs FILE...
//   twinlab synth    --out DIR [--config FILE] [--seed N]
//   twinlab report   [--config FILE] [--out DIR]
//
// Exit codes: 0 success, 2 usage or validation error, 3 numerical divergence.

#include <cstdint>
#include <filesystem>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "twinlab/corpus.hpp"
#include "twinlab/corpus_stats.hpp"
#include "twinlab/error.hpp"
#include "twinlab/io.hpp"
#include "twinlab/metrics.hpp"
#include "twinlab/synthlab.hpp"
#include "twinlab/textcore.hpp"
#include "twinlab/trainer.hpp"
#include "twinlab/twinnet.hpp"

namespace fs = std::filesystem;
using json = nlohmann::ordered_json;
using namespace twinlab;

namespace {

constexpr int kExitUsage = 2;
constexpr int kExitDiverged = 3;

void print_resolved(const std::string& command, const json& settings) {
  json j;
  j["command"] = command;
  j["settings"] = settings;
  std::cerr << j.dump() << "\n";
}

json read_json(const fs::path& path) {
  try {
    return json::parse(io::read_file(path));
  } catch (const json::parse_error& e) {
    throw ConfigError(path.string() + ": invalid JSON: " + e.what());
  }
}

// Non-blank lines, tokenized; blank lines become empty sequences so that
// line alignment is preserved.
std::vector<textcore::TokenSeq> read_aligned(const fs::path& path) {
  std::vector<textcore::TokenSeq> out;
  for (const auto& line : io::read_lines(path)) {
    if (line.find_first_not_of(" \t\r\f\v") == std::string::npos)
      out.emplace_back();
    else
      out.push_back(textcore::tokenize(line));
  }
  return out;
}

struct PrepArgs {
  std::string input, out;
  double hard_max = 50, easy_min = 70;
  std::int64_t pairs = 0;
  std::uint64_t seed = 1;
};

int cmd_prep(const PrepArgs& a) {
  print_resolved("prep", {{"input", a.input},
                          {"hard_max_fre", a.hard_max},
                          {"easy_min_fre", a.easy_min},
                          {"pairs", a.pairs},
                          {"seed", a.seed},
                          {"out", a.out}});
  const auto sents = textcore::read_corpus(a.input);
  auto split = textcore::partition_corpus(sents, a.hard_max, a.easy_min);
  split.provenance = fs::path(a.input).filename().string();
  const auto pairs = textcore::make_ooa_pairs(split, a.pairs, a.seed);
  const fs::path out(a.out);
  textcore::write_split(out, split, a.seed);
  textcore::write_pairs(out / "pairs.tsv", pairs);
  io::write_file_atomic(out / "stats.json", metrics::to_json(metrics::corpus_stats(split, pairs)).dump(2) + "\n");
  std::cerr << "hard " << split.hard.size() << ", easy " << split.easy.size() << ", dropped "
            << split.dropped_index.size() << ", pairs " << pairs.size() << "\n";
  return 0;
}

struct TrainArgs {
  std::string config, pairs, out, resume;
};

int cmd_train(const TrainArgs& a) {
  const auto cfg = trainer::config_from_json(read_json(a.config));
  print_resolved("train", {{"config", trainer::to_json(cfg)},
                           {"pairs", a.pairs},
                           {"out", a.out},
                           {"resume", a.resume.empty() ? json(nullptr) : json(a.resume)}});
  const auto pairs = textcore::read_pairs(a.pairs);
  trainer::TrainOptions opt;
  opt.out_dir = fs::path(a.out);
  if (!a.resume.empty()) opt.resume = fs::path(a.resume);
  opt.log = &std::cerr;
  const auto res = trainer::train(cfg, pairs, opt);
  if (res.last_checkpoint) std::cout << res.last_checkpoint->string() << "\n";
  return 0;
}

struct SimplifyArgs {
  std::string model, input, output;
  std::size_t max_len = 0;
};

int cmd_simplify(const SimplifyArgs& a) {
  const auto loaded = trainer::load_model(a.model);
  const std::size_t max_len = a.max_len > 0 ? a.max_len : loaded.cfg.max_len;
  print_resolved("simplify", {{"model", a.model},
                              {"input", a.input},
                              {"output", a.output},
                              {"max_len", max_len},
                              {"seed", loaded.cfg.seed},
                              {"step", loaded.step}});
  const auto lines = read_aligned(a.input);
  std::vector<textcore::TokenSeq> nonempty;
  for (const auto& l : lines)
    if (!l.empty()) nonempty.push_back(l);
  const auto outs = twinnet::simplify(loaded.model, loaded.vocab, nonempty, max_len);
  std::string text;
  std::size_t k = 0;
  for (const auto& l : lines) {
    if (!l.empty()) text += textcore::detokenize(outs[k++]);
    text.push_back('\n');
  }
  io::write_file_atomic(a.output, text);
  return 0;
}

struct EvalArgs {
  std::string src, hyp;
  std::vector<std::string> refs;
};

int cmd_eval(const EvalArgs& a) {
  print_resolved("eval", {{"src", a.src}, {"hyp", a.hyp}, {"refs", a.refs}});
  const auto src = read_aligned(a.src);
  const auto hyp = read_aligned(a.hyp);
  auto mismatch = [](const std::string& f1, std::size_t n1, const std::string& f2, std::size_t n2) {
    return ConfigError("line count mismatch: " + f1 + " has " + std::to_string(n1) + " lines, " + f2 + " has " +
                       std::to_string(n2));
  };
  if (src.size() != hyp.size()) throw mismatch(a.src, src.size(), a.hyp, hyp.size());
  std::vector<std::vector<textcore::TokenSeq>> refs(src.size());
  for (const auto& r : a.refs) {
    const auto lines = read_aligned(r);
    if (lines.size() != src.size()) throw mismatch(a.src, src.size(), r, lines.size());
    for (std::size_t i = 0; i < lines.size(); ++i) refs[i].push_back(lines[i]);
  }
  std::cout << metrics::to_json(metrics::evaluate(src, hyp, refs)) << "\n";
  return 0;
}

struct SynthArgs {
  std::string out, config;
  std::optional<std::uint64_t> seed;
};

int cmd_synth(const SynthArgs& a) {
  synthlab::SynthConfig cfg = a.config.empty() ? synthlab::SynthConfig{} : synthlab::synth_config_from_json(read_json(a.config));
  if (a.seed) cfg.seed = *a.seed;
  print_resolved("synth", {{"synth", synthlab::to_json(cfg)}, {"out", a.out}});
  const auto corpus = synthlab::gen_synthetic(cfg);
  const auto pairs = textcore::make_ooa_pairs(corpus.split, static_cast<std::int64_t>(cfg.n_pairs),
                                              derive_seed(cfg.seed, 13));
  synthlab::write_synthetic(a.out, cfg, corpus, pairs);
  return 0;
}

struct ReportArgs {
  std::string config, out;
};

int cmd_report(const ReportArgs& a) {
  auto desk = a.config.empty() ? synthlab::default_desk_config() : synthlab::desk_config_from_json(read_json(a.config));
  desk.threads = synthlab::worker_threads();
  if (!a.out.empty()) desk.out_dir = fs::path(a.out);
  desk.log = &std::cerr;
  print_resolved("report", {{"desk", synthlab::to_json(desk)}, {"threads", desk.threads}, {"out", a.out}});
  const auto result = synthlab::run_desk_experiment(desk);
  const std::string text = synthlab::to_json(result).dump(2) + "\n";
  if (desk.out_dir) io::write_file_atomic(*desk.out_dir / "report.json", text);
  std::cout << text;
  for (const auto& r : result.runs)
    if (!r.ok) return kExitDiverged;
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"twinlab: unsupervised text simplification with conjoined twin networks"};
  app.require_subcommand(1);

  PrepArgs prep;
  auto* p = app.add_subcommand("prep", "split a corpus into hard/easy buckets and draw OOA pairs");
  p->add_option("--input", prep.input, "corpus, one sentence per line")->required()->check(CLI::ExistingFile);
  p->add_option("--hard-max-fre", prep.hard_max, "hard bucket: FRE below this")->required();
  p->add_option("--easy-min-fre", prep.easy_min, "easy bucket: FRE above this")->required();
  p->add_option("--pairs", prep.pairs, "number of OOA pairs")->required();
  p->add_option("--seed", prep.seed, "pairing seed")->required();
  p->add_option("--out", prep.out, "output directory")->required();

  TrainArgs train;
  auto* t = app.add_subcommand("train", "train a twin model on OOA pairs");
  t->add_option("--config", train.config, "JSON training config")->required()->check(CLI::ExistingFile);
  t->add_option("--pairs", train.pairs, "TSV pairs source<TAB>target")->required()->check(CLI::ExistingFile);
  t->add_option("--out", train.out, "output directory")->required();
  t->add_option("--resume", train.resume, "checkpoint manifest to continue from")->check(CLI::ExistingFile);

  SimplifyArgs simp;
  auto* s = app.add_subcommand("simplify", "run the simplification path over a file");
  s->add_option("--model", simp.model, "checkpoint manifest")->required()->check(CLI::ExistingFile);
  s->add_option("--input", simp.input, "one sentence per line")->required()->check(CLI::ExistingFile);
  s->add_option("--output", simp.output, "output file")->required();
  s->add_option("--max-len", simp.max_len, "decoding limit (default: from the checkpoint config)");

  EvalArgs ev;
  auto* e = app.add_subcommand("eval", "score outputs against sources and references");
  e->add_option("--src", ev.src, "sources")->required()->check(CLI::ExistingFile);
  e->add_option("--hyp", ev.hyp, "system outputs")->required()->check(CLI::ExistingFile);
  e->add_option("--refs", ev.refs, "reference files")->required()->check(CLI::ExistingFile);

  SynthArgs syn;
  auto* y = app.add_subcommand("synth", "generate the synthetic hard/easy corpus");
  y->add_option("--out", syn.out, "output directory")->required();
  y->add_option("--config", syn.config, "JSON synth config")->check(CLI::ExistingFile);
  y->add_option("--seed", syn.seed, "override the corpus seed");

  ReportArgs rep;
  auto* r = app.add_subcommand("report", "run the desk-scale variant comparison");
  r->add_option("--config", rep.config, "JSON desk config")->check(CLI::ExistingFile);
  r->add_option("--out", rep.out, "directory for runs and report.json");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& err) {
    const int code = app.exit(err);
    return code == 0 ? 0 : kExitUsage;
  }

  try {
    if (*p) return cmd_prep(prep);
    if (*t) return cmd_train(train);
    if (*s) return cmd_simplify(simp);
    if (*e) return cmd_eval(ev);
    if (*y) return cmd_synth(syn);
    if (*r) return cmd_report(rep);
  } catch (const DivergedError& err) {
    std::cerr << "error: " << err.what() << "\n";
    return kExitDiverged;
  } catch (const Error& err) {
    std::cerr << "error: " << err.what() << "\n";
    return kExitUsage;
  } catch (const std::invalid_argument& err) {
    std::cerr << "error: " << err.what() << "\n";
    return kExitUsage;
  } catch (const std::exception& err) {
    std::cerr << "error: " << err.what() << "\n";
    return 1;
  }
  return kExitUsage;
}
