#pragma once

// Training: variant dispatch, the flip-flop schedule, Adam with global-norm
// clipping, checkpoints and the per-step history.

#include <cmath>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <optional>
#include <ostream>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>

#include "twinlab/adversary.hpp"
#include "twinlab/autodiff.hpp"
#include "twinlab/checkpoint.hpp"
#include "twinlab/corpus.hpp"
#include "twinlab/error.hpp"
#include "twinlab/io.hpp"
#include "twinlab/random.hpp"
#include "twinlab/textcore.hpp"
#include "twinlab/twinnet.hpp"

namespace twinlab::trainer {

namespace fs = std::filesystem;
using json = nlohmann::ordered_json;
using ad::Tensor;
using textcore::OOAPair;
using textcore::Task;
using textcore::Vocabulary;
using twinnet::SeqBatch;
using twinnet::TwinParams;
using adversary::CriticParams;

// ---------------------------------------------------------------------------
// Configuration
// ---------------------------------------------------------------------------

enum class Variant { Beta, GammaJs, GammaW, Sigma };

inline const char* variant_name(Variant v) {
  switch (v) {
    case Variant::Beta: return "beta";
    case Variant::GammaJs: return "gamma_js";
    case Variant::GammaW: return "gamma_w";
    case Variant::Sigma: return "sigma";
  }
  return "?";
}

inline Variant parse_variant(const std::string& s) {
  for (Variant v : {Variant::Beta, Variant::GammaJs, Variant::GammaW, Variant::Sigma})
    if (s == variant_name(v)) return v;
  throw ConfigError("config.variant: unknown variant '" + s + "' (expected beta, gamma_js, gamma_w or sigma)");
}

inline bool uses_critic(Variant v) { return v == Variant::GammaJs || v == Variant::GammaW; }

struct CriticConfig {
  std::size_t filters = 64;
  std::size_t width = 5;
  double lambda_gp = 1.0;
  std::size_t steps_per_gen = 1;
  double lr = 1e-3;
};

struct TrainConfig {
  Variant variant = Variant::Beta;
  std::uint64_t seed = 1;
  double flip_rate = 0.2;
  double lr = 1e-3;
  std::size_t batch_size = 32;
  std::int64_t max_steps = 1000;
  double clip_norm = 5.0;
  double adv_weight = 1.0;
  double sim_weight = 1.0;
  std::int64_t checkpoint_every = 0;  // 0: only the final step
  std::int64_t log_every = 100;       // 0: silent
  std::size_t embed_dim = 64;
  std::size_t hidden_dim = 128;
  std::size_t vocab_max = 5000;
  std::size_t max_len = 40;  // greedy decoding limit
  std::optional<CriticConfig> critic;
};

namespace detail {

template <class V>
V field(const json& obj, const std::string& path, const char* key, V fallback) {
  if (!obj.contains(key)) return fallback;
  try {
    return obj.at(key).get<V>();
  } catch (const json::exception&) {
    throw ConfigError(path + "." + key + ": has the wrong type");
  }
}

inline void reject_unknown(const json& obj, const std::string& path, std::initializer_list<const char*> known) {
  for (const auto& [k, v] : obj.items()) {
    bool ok = false;
    for (const char* name : known) ok = ok || k == name;
    if (!ok) throw ConfigError(path + "." + k + ": unknown field");
  }
}

inline void require_positive(double v, const std::string& what) {
  if (!(v > 0)) throw ConfigError(what + ": must be positive");
}

}  // namespace detail

inline void validate(const TrainConfig& c) {
  if (!(c.flip_rate >= 0 && c.flip_rate <= 1)) throw ConfigError("config.flip_rate: must lie in [0, 1]");
  detail::require_positive(c.lr, "config.lr");
  if (c.batch_size < 1) throw ConfigError("config.batch_size: must be at least 1");
  if (c.max_steps < 0) throw ConfigError("config.max_steps: must be non-negative");
  detail::require_positive(c.clip_norm, "config.clip_norm");
  if (c.adv_weight < 0) throw ConfigError("config.adv_weight: must be non-negative");
  if (c.sim_weight < 0) throw ConfigError("config.sim_weight: must be non-negative");
  if (c.checkpoint_every < 0) throw ConfigError("config.checkpoint_every: must be non-negative");
  if (c.embed_dim < 1) throw ConfigError("config.dims.embed: must be at least 1");
  if (c.hidden_dim < 1) throw ConfigError("config.dims.hidden: must be at least 1");
  if (c.vocab_max < Vocabulary::kReserved + 1) throw ConfigError("config.dims.vocab_max: must exceed 6");
  if (c.max_len < 1) throw ConfigError("config.dims.max_len: must be at least 1");
  if (uses_critic(c.variant)) {
    if (!c.critic)
      throw ConfigError(std::string("config.critic: required for variant ") + variant_name(c.variant));
    const auto& k = *c.critic;
    if (k.filters < 1) throw ConfigError("config.critic.filters: must be at least 1");
    if (k.width < 1 || k.width > c.hidden_dim)
      throw ConfigError("config.critic.width: must lie in [1, dims.hidden]");
    if (k.lambda_gp < 0) throw ConfigError("config.critic.lambda_gp: must be non-negative");
    if (k.steps_per_gen < 1) throw ConfigError("config.critic.steps_per_gen: must be at least 1");
    detail::require_positive(k.lr, "config.critic.lr");
  }
}

// Absent fields take their defaults; critic.steps_per_gen defaults to 1 for
// gamma_js and 5 for gamma_w.
inline TrainConfig config_from_json(const json& j) {
  using detail::field;
  if (!j.is_object()) throw ConfigError("config: expected a JSON object");
  detail::reject_unknown(j, "config",
                         {"variant", "seed", "flip_rate", "lr", "batch_size", "max_steps", "clip_norm", "adv_weight",
                          "sim_weight", "checkpoint_every", "log_every", "dims", "critic"});
  TrainConfig c;
  if (!j.contains("variant")) throw ConfigError("config.variant: required");
  c.variant = parse_variant(field<std::string>(j, "config", "variant", ""));
  c.seed = field<std::uint64_t>(j, "config", "seed", c.seed);
  c.flip_rate = field<double>(j, "config", "flip_rate", c.flip_rate);
  c.lr = field<double>(j, "config", "lr", c.lr);
  c.batch_size = field<std::size_t>(j, "config", "batch_size", c.batch_size);
  c.max_steps = field<std::int64_t>(j, "config", "max_steps", c.max_steps);
  c.clip_norm = field<double>(j, "config", "clip_norm", c.clip_norm);
  c.adv_weight = field<double>(j, "config", "adv_weight", c.adv_weight);
  c.sim_weight = field<double>(j, "config", "sim_weight", c.sim_weight);
  c.checkpoint_every = field<std::int64_t>(j, "config", "checkpoint_every", c.checkpoint_every);
  c.log_every = field<std::int64_t>(j, "config", "log_every", c.log_every);
  if (j.contains("dims")) {
    const json& d = j.at("dims");
    if (!d.is_object()) throw ConfigError("config.dims: expected an object");
    detail::reject_unknown(d, "config.dims", {"embed", "hidden", "vocab_max", "max_len"});
    c.embed_dim = field<std::size_t>(d, "config.dims", "embed", c.embed_dim);
    c.hidden_dim = field<std::size_t>(d, "config.dims", "hidden", c.hidden_dim);
    c.vocab_max = field<std::size_t>(d, "config.dims", "vocab_max", c.vocab_max);
    c.max_len = field<std::size_t>(d, "config.dims", "max_len", c.max_len);
  }
  if (j.contains("critic")) {
    const json& k = j.at("critic");
    if (!k.is_object()) throw ConfigError("config.critic: expected an object");
    detail::reject_unknown(k, "config.critic", {"filters", "width", "lambda_gp", "steps_per_gen", "lr"});
    if (!k.contains("filters")) throw ConfigError("config.critic.filters: required");
    if (!k.contains("width")) throw ConfigError("config.critic.width: required");
    CriticConfig cc;
    cc.filters = field<std::size_t>(k, "config.critic", "filters", cc.filters);
    cc.width = field<std::size_t>(k, "config.critic", "width", cc.width);
    cc.lambda_gp = field<double>(k, "config.critic", "lambda_gp", cc.lambda_gp);
    cc.steps_per_gen =
        field<std::size_t>(k, "config.critic", "steps_per_gen", c.variant == Variant::GammaW ? 5 : 1);
    cc.lr = field<double>(k, "config.critic", "lr", c.lr);
    c.critic = cc;
  }
  validate(c);
  return c;
}

inline json to_json(const TrainConfig& c) {
  json j;
  j["variant"] = variant_name(c.variant);
  j["seed"] = c.seed;
  j["flip_rate"] = c.flip_rate;
  j["lr"] = c.lr;
  j["batch_size"] = c.batch_size;
  j["max_steps"] = c.max_steps;
  j["clip_norm"] = c.clip_norm;
  j["adv_weight"] = c.adv_weight;
  j["sim_weight"] = c.sim_weight;
  j["checkpoint_every"] = c.checkpoint_every;
  j["log_every"] = c.log_every;
  j["dims"] = {{"embed", c.embed_dim}, {"hidden", c.hidden_dim}, {"vocab_max", c.vocab_max}, {"max_len", c.max_len}};
  if (c.critic)
    j["critic"] = {{"filters", c.critic->filters},
                   {"width", c.critic->width},
                   {"lambda_gp", c.critic->lambda_gp},
                   {"steps_per_gen", c.critic->steps_per_gen},
                   {"lr", c.critic->lr}};
  return j;
}

// ---------------------------------------------------------------------------
// Flip-flop schedule
// ---------------------------------------------------------------------------

enum class Mode { Translate, Autoencode };

inline Mode flip_decide(Rng& rng, double flip_rate) {
  if (!(flip_rate >= 0 && flip_rate <= 1)) throw ConfigError("flip_rate must lie in [0, 1]");
  return rng.bernoulli(flip_rate) ? Mode::Autoencode : Mode::Translate;
}

// Random stream assignment; every stream is derived from the run seed.
enum Stream : std::uint64_t { kModelInit = 0, kFlip = 1, kData = 2, kCriticInit = 3, kPenalty = 4 };

// ---------------------------------------------------------------------------
// Batches and the composite objective
// ---------------------------------------------------------------------------

// Pre-encoded ids for one OOA pair.
struct EncodedPair {
  std::vector<std::size_t> easy_upper;   // [<2upper>, easy..., EOS]
  std::vector<std::size_t> easy_target;  // [BOS, easy..., EOS]
  std::vector<std::size_t> hard_lower;   // [<2lower>, hard..., EOS]
  std::vector<std::size_t> hard_target;  // [BOS, hard..., EOS]
};

inline EncodedPair encode_pair(const Vocabulary& v, const OOAPair& p) {
  return {textcore::encode_ids(v, p.target, Task::Upper), textcore::encode_target(v, p.target),
          textcore::encode_ids(v, p.source, Task::Lower), textcore::encode_target(v, p.source)};
}

// UPPER reconstructs easy sentences; LOWER maps hard sources to the easy
// targets, or back to themselves when the batch is flipped.
struct TwinBatch {
  SeqBatch upper_src, upper_tgt, lower_src, lower_tgt;
  bool flipped = false;
};

inline TwinBatch make_twin_batch(std::span<const EncodedPair> pairs, std::span<const std::size_t> rows,
                                 bool flipped) {
  if (rows.empty()) throw EmptyBatch("make_twin_batch: no rows");
  std::vector<std::vector<std::size_t>> us, ut, ls, lt;
  for (std::size_t r : rows) {
    const auto& p = pairs[r];
    us.push_back(p.easy_upper);
    ut.push_back(p.easy_target);
    ls.push_back(p.hard_lower);
    lt.push_back(flipped ? p.hard_target : p.easy_target);
  }
  return {twinnet::make_batch(us), twinnet::make_batch(ut), twinnet::make_batch(ls), twinnet::make_batch(lt), flipped};
}

template <class T = float>
struct CompositeLoss {
  Tensor<T> total;
  Tensor<T> rec;
  Tensor<T> adv;  // undefined unless the variant has an adversary
  Tensor<T> sim;  // undefined unless sigma
};

// mean over rows of 1 - cos(a_row, b_row); lies in [0, 2].
template <class T>
Tensor<T> sim_term(const Tensor<T>& a, const Tensor<T>& b) {
  return ad::mean(ad::add_scalar(ad::scale(ad::cosine(a, b), T(-1)), T(1)));
}

template <class T>
CompositeLoss<T> composite_loss(const TrainConfig& cfg, const TwinBatch& b, const TwinParams<T>& p,
                                const CriticParams<T>* critic) {
  CompositeLoss<T> l;
  const auto enc_u = twinnet::encode(p, b.upper_src);
  const auto dec_u = twinnet::decode_teacher_forced(p, enc_u.final, b.upper_tgt);
  const auto enc_l = twinnet::encode(p, b.lower_src);
  const auto dec_l = twinnet::decode_teacher_forced(p, enc_l.final, b.lower_tgt);
  l.rec = ad::add(dec_u.nll, dec_l.nll);
  l.total = l.rec;
  switch (cfg.variant) {
    case Variant::Beta:
      break;
    case Variant::GammaJs:
    case Variant::GammaW: {
      if (critic == nullptr) throw ConfigError("composite_loss: variant needs a critic");
      const Tensor<T> real = ad::detach(enc_u.final.h);
      const Tensor<T> fake = enc_l.final.h;
      if (cfg.variant == Variant::GammaJs) {
        l.adv = adversary::js_losses(*critic, real, fake).generator;
      } else {
        Rng unused(0);
        l.adv = adversary::w_losses(*critic, real, fake, 0.0, unused).generator;
      }
      l.total = ad::add(l.total, ad::scale(l.adv, static_cast<T>(cfg.adv_weight)));
      break;
    }
    case Variant::Sigma:
      l.sim = sim_term(enc_l.final.h, dec_l.final_h);
      l.total = ad::add(l.total, ad::scale(l.sim, static_cast<T>(cfg.sim_weight)));
      break;
  }
  return l;
}

// ---------------------------------------------------------------------------
// Optimization
// ---------------------------------------------------------------------------

struct ClipResult {
  double norm = 0;     // global L2 norm before clipping
  double applied = 0;  // after clipping
};

// Rescales all gradients so that their joint L2 norm is at most max_norm.
inline ClipResult clip_gradients(std::span<Tensor<float>* const> params, double max_norm) {
  double sq = 0;
  for (Tensor<float>* t : params)
    for (float g : t->grad()) sq += static_cast<double>(g) * g;
  ClipResult r;
  r.norm = std::sqrt(sq);
  r.applied = r.norm;
  if (r.norm > max_norm && r.norm > 0) {
    const double s = max_norm / r.norm;
    double sq2 = 0;
    for (Tensor<float>* t : params) {
      float* g = t->node()->grad_data();
      for (std::size_t i = 0; i < t->numel(); ++i) {
        g[i] = static_cast<float>(g[i] * s);
        sq2 += static_cast<double>(g[i]) * g[i];
      }
    }
    r.applied = std::sqrt(sq2);
  }
  return r;
}

class Adam {
 public:
  Adam() = default;
  Adam(std::span<Tensor<float>* const> params, double lr) : lr_(lr) {
    for (Tensor<float>* t : params) {
      m_.emplace_back(t->numel(), 0.0f);
      v_.emplace_back(t->numel(), 0.0f);
    }
  }

  void step(std::span<Tensor<float>* const> params) {
    if (params.size() != m_.size()) throw Error("Adam: parameter list changed");
    ++t_;
    const double c1 = 1 - std::pow(kBeta1, static_cast<double>(t_));
    const double c2 = 1 - std::pow(kBeta2, static_cast<double>(t_));
    for (std::size_t k = 0; k < params.size(); ++k) {
      auto w = params[k]->mutable_data();
      const auto g = params[k]->grad();
      auto& m = m_[k];
      auto& v = v_[k];
      for (std::size_t i = 0; i < w.size(); ++i) {
        m[i] = static_cast<float>(kBeta1 * m[i] + (1 - kBeta1) * g[i]);
        v[i] = static_cast<float>(kBeta2 * v[i] + (1 - kBeta2) * static_cast<double>(g[i]) * g[i]);
        const double mhat = m[i] / c1, vhat = v[i] / c2;
        w[i] = static_cast<float>(w[i] - lr_ * mhat / (std::sqrt(vhat) + kEps));
      }
    }
  }

  std::int64_t steps() const { return t_; }
  std::vector<std::vector<float>>& first_moments() { return m_; }
  std::vector<std::vector<float>>& second_moments() { return v_; }
  void set_steps(std::int64_t t) { t_ = t; }

  static constexpr double kBeta1 = 0.9, kBeta2 = 0.999, kEps = 1e-8;

 private:
  double lr_ = 1e-3;
  std::int64_t t_ = 0;
  std::vector<std::vector<float>> m_, v_;
};

// ---------------------------------------------------------------------------
// Training state
// ---------------------------------------------------------------------------

struct StepRecord {
  std::int64_t step = 0;
  double rec_loss = 0;
  std::optional<double> adv_loss;
  std::optional<double> sim_loss;
  bool flipped = false;
  std::optional<double> critic_loss;
  double grad_norm = 0;
  double applied_norm = 0;
};

struct TrainState {
  TrainConfig cfg;
  Vocabulary vocab;
  std::vector<EncodedPair> pairs;
  TwinParams<float> model;
  std::optional<CriticParams<float>> critic;
  Adam model_opt, critic_opt;
  Rng flip_rng, data_rng, penalty_rng;
  std::vector<std::size_t> order;
  std::size_t cursor = 0;
  std::int64_t step = 0;

  std::vector<Tensor<float>*> model_params() {
    std::vector<Tensor<float>*> v;
    for (auto& [name, t] : model.named()) v.push_back(t);
    return v;
  }
  std::vector<Tensor<float>*> critic_params() {
    std::vector<Tensor<float>*> v;
    if (critic)
      for (auto& [name, t] : critic->named()) v.push_back(t);
    return v;
  }

  // Next batch of pair indices; reshuffles once fewer than a batch remain.
  std::vector<std::size_t> next_rows() {
    const std::size_t b = std::min(cfg.batch_size, order.size());
    if (cursor + b > order.size()) {
      data_rng.shuffle(order.begin(), order.end());
      cursor = 0;
    }
    std::vector<std::size_t> rows(order.begin() + static_cast<std::ptrdiff_t>(cursor),
                                  order.begin() + static_cast<std::ptrdiff_t>(cursor + b));
    cursor += b;
    return rows;
  }
};

inline Vocabulary build_vocab(std::span<const OOAPair> pairs, std::size_t max_size) {
  std::vector<textcore::TokenSeq> sents;
  sents.reserve(2 * pairs.size());
  for (const auto& p : pairs) {
    sents.push_back(p.source);
    sents.push_back(p.target);
  }
  return Vocabulary::build(sents, max_size);
}

inline TrainState init_state(const TrainConfig& cfg, std::span<const OOAPair> pairs,
                             std::optional<Vocabulary> vocab = std::nullopt) {
  validate(cfg);
  if (pairs.empty()) throw EmptyBatch("training needs at least one OOA pair");
  TrainState s;
  s.cfg = cfg;
  s.vocab = vocab ? std::move(*vocab) : build_vocab(pairs, cfg.vocab_max);
  for (const auto& p : pairs) s.pairs.push_back(encode_pair(s.vocab, p));
  s.model = twinnet::init_params<float>(s.vocab.size(), cfg.embed_dim, cfg.hidden_dim, derive_seed(cfg.seed, kModelInit));
  s.model_opt = Adam(s.model_params(), cfg.lr);
  if (uses_critic(cfg.variant)) {
    s.critic = adversary::init_critic<float>(cfg.hidden_dim, cfg.critic->filters, cfg.critic->width,
                                             derive_seed(cfg.seed, kCriticInit));
    s.critic_opt = Adam(s.critic_params(), cfg.critic->lr);
  }
  s.flip_rng = Rng(derive_seed(cfg.seed, kFlip));
  s.data_rng = Rng(derive_seed(cfg.seed, kData));
  s.penalty_rng = Rng(derive_seed(cfg.seed, kPenalty));
  s.order.resize(s.pairs.size());
  for (std::size_t i = 0; i < s.order.size(); ++i) s.order[i] = i;
  s.data_rng.shuffle(s.order.begin(), s.order.end());
  return s;
}

inline void zero_grads(std::span<Tensor<float>* const> params) {
  for (Tensor<float>* t : params) t->zero_grad();
}

inline void require_finite(double v, std::int64_t step, const char* what) {
  if (!std::isfinite(v)) throw DivergedError(step, std::string(what) + " is not finite");
}

// Critic updates on detached latents, then one generator + reconstruction
// update of the twin model.
inline StepRecord train_step(TrainState& s) {
  const std::int64_t step = s.step + 1;
  StepRecord rec;
  rec.step = step;
  rec.flipped = flip_decide(s.flip_rng, s.cfg.flip_rate) == Mode::Autoencode;
  const auto rows = s.next_rows();
  const TwinBatch batch = make_twin_batch(s.pairs, rows, rec.flipped);

  if (s.critic) {
    Tensor<float> real, fake;
    {
      ad::NoGrad<float> no_grad;
      real = ad::detach(twinnet::encode(s.model, batch.upper_src).final.h);
      fake = ad::detach(twinnet::encode(s.model, batch.lower_src).final.h);
    }
    auto params = s.critic_params();
    for (std::size_t k = 0; k < s.cfg.critic->steps_per_gen; ++k) {
      ad::Tape<float> tape;
      zero_grads(params);
      const auto losses = s.cfg.variant == Variant::GammaJs
                              ? adversary::js_losses(*s.critic, real, fake)
                              : adversary::w_losses(*s.critic, real, fake, s.cfg.critic->lambda_gp, s.penalty_rng);
      const double value = losses.critic.item();
      require_finite(value, step, "critic loss");
      ad::backward(tape, losses.critic);
      clip_gradients(params, s.cfg.clip_norm);
      s.critic_opt.step(params);
      rec.critic_loss = value;
    }
  }

  auto params = s.model_params();
  ad::Tape<float> tape;
  zero_grads(params);
  const auto loss = composite_loss(s.cfg, batch, s.model, s.critic ? &*s.critic : nullptr);
  rec.rec_loss = loss.rec.item();
  if (loss.adv.defined()) rec.adv_loss = loss.adv.item();
  if (loss.sim.defined()) rec.sim_loss = loss.sim.item();
  require_finite(loss.total.item(), step, "training loss");
  ad::backward(tape, loss.total);
  const ClipResult clip = clip_gradients(params, s.cfg.clip_norm);
  require_finite(clip.norm, step, "gradient norm");
  rec.grad_norm = clip.norm;
  rec.applied_norm = clip.applied;
  s.model_opt.step(params);
  s.step = step;
  return rec;
}

// ---------------------------------------------------------------------------
// History and checkpoints
// ---------------------------------------------------------------------------

inline std::string format_g(double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.9g", v);
  return buf;
}

inline std::string history_header() {
  return "step,rec_loss,adv_loss,sim_loss,flipped,critic_loss,grad_norm,applied_norm\n";
}

inline std::string history_row(const StepRecord& r) {
  auto opt = [](const std::optional<double>& v) { return v ? format_g(*v) : std::string(); };
  return std::to_string(r.step) + "," + format_g(r.rec_loss) + "," + opt(r.adv_loss) + "," + opt(r.sim_loss) + "," +
         (r.flipped ? "1" : "0") + "," + opt(r.critic_loss) + "," + format_g(r.grad_norm) + "," +
         format_g(r.applied_norm) + "\n";
}

inline std::string history_csv(std::span<const StepRecord> rows) {
  std::string out = history_header();
  for (const auto& r : rows) out += history_row(r);
  return out;
}

// Data lines of an existing history file with step <= max_step, verbatim.
inline std::vector<std::string> read_history_lines(const fs::path& path, std::int64_t max_step) {
  std::vector<std::string> out;
  if (!fs::exists(path)) return out;
  const auto lines = io::read_lines(path);
  for (std::size_t i = 1; i < lines.size(); ++i) {
    if (lines[i].empty()) continue;
    if (std::stoll(lines[i].substr(0, lines[i].find(','))) <= max_step) out.push_back(lines[i]);
  }
  return out;
}

inline fs::path checkpoint_path(const fs::path& dir, std::int64_t step) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "checkpoint_%08lld.json", static_cast<long long>(step));
  return dir / buf;
}

inline void save_state(const fs::path& manifest, TrainState& s) {
  std::vector<checkpoint::NamedTensor> tensors;
  for (auto& [name, t] : s.model.named()) tensors.push_back(checkpoint::snapshot(name, *t));
  if (s.critic)
    for (auto& [name, t] : s.critic->named()) tensors.push_back(checkpoint::snapshot(name, *t));
  auto add_moments = [&](const std::string& prefix, Adam& opt, std::vector<Tensor<float>*> params,
                         const std::vector<std::string>& names) {
    for (std::size_t k = 0; k < params.size(); ++k) {
      tensors.push_back({prefix + ".m." + names[k], params[k]->shape(), opt.first_moments()[k]});
      tensors.push_back({prefix + ".v." + names[k], params[k]->shape(), opt.second_moments()[k]});
    }
  };
  std::vector<std::string> model_names, critic_names;
  for (auto& [name, t] : s.model.named()) model_names.push_back(name);
  add_moments("adam", s.model_opt, s.model_params(), model_names);
  if (s.critic) {
    for (auto& [name, t] : s.critic->named()) critic_names.push_back(name);
    add_moments("adam", s.critic_opt, s.critic_params(), critic_names);
  }
  json meta;
  meta["config"] = to_json(s.cfg);
  meta["seed"] = s.cfg.seed;
  meta["step"] = s.step;
  meta["vocab"] = s.vocab.tokens();
  meta["rng"] = {{"flip", s.flip_rng.state()}, {"data", s.data_rng.state()}, {"penalty", s.penalty_rng.state()}};
  meta["data"] = {{"order", s.order}, {"cursor", s.cursor}};
  meta["adam_steps"] = {{"model", s.model_opt.steps()}, {"critic", s.critic_opt.steps()}};
  checkpoint::save(manifest, std::move(meta), tensors);
}

// Restores a full training state; the pairs must be the ones it was trained on.
inline TrainState load_state(const fs::path& manifest, std::span<const OOAPair> pairs) {
  const auto ck = checkpoint::load(manifest);
  const json& m = ck.manifest;
  try {
    const TrainConfig cfg = config_from_json(m.at("config"));
    const auto tokens = m.at("vocab").get<std::vector<std::string>>();
    TrainState s = init_state(cfg, pairs, Vocabulary::from_tokens(tokens));
    for (auto& [name, t] : s.model.named()) checkpoint::restore_into(*t, ck.tensor(name));
    if (s.critic)
      for (auto& [name, t] : s.critic->named()) checkpoint::restore_into(*t, ck.tensor(name));
    auto restore_moments = [&](Adam& opt, std::vector<std::pair<std::string, Tensor<float>*>> named) {
      for (std::size_t k = 0; k < named.size(); ++k) {
        opt.first_moments()[k] = ck.tensor("adam.m." + named[k].first).values;
        opt.second_moments()[k] = ck.tensor("adam.v." + named[k].first).values;
      }
    };
    restore_moments(s.model_opt, s.model.named());
    s.model_opt.set_steps(m.at("adam_steps").at("model").get<std::int64_t>());
    if (s.critic) {
      restore_moments(s.critic_opt, s.critic->named());
      s.critic_opt.set_steps(m.at("adam_steps").at("critic").get<std::int64_t>());
    }
    s.flip_rng.restore(m.at("rng").at("flip").get<std::string>());
    s.data_rng.restore(m.at("rng").at("data").get<std::string>());
    s.penalty_rng.restore(m.at("rng").at("penalty").get<std::string>());
    s.order = m.at("data").at("order").get<std::vector<std::size_t>>();
    s.cursor = m.at("data").at("cursor").get<std::size_t>();
    if (s.order.size() != s.pairs.size())
      throw CheckpointError("checkpoint was trained on " + std::to_string(s.order.size()) + " pairs, got " +
                            std::to_string(s.pairs.size()));
    s.step = m.at("step").get<std::int64_t>();
    return s;
  } catch (const json::exception& e) {
    throw CheckpointError("malformed checkpoint '" + manifest.string() + "': " + e.what());
  }
}

// Model and vocabulary only, for inference.
struct LoadedModel {
  TrainConfig cfg;
  Vocabulary vocab;
  TwinParams<float> model;
  std::int64_t step = 0;
};

inline LoadedModel load_model(const fs::path& manifest) {
  const auto ck = checkpoint::load(manifest);
  try {
    LoadedModel out;
    out.cfg = config_from_json(ck.manifest.at("config"));
    out.vocab = Vocabulary::from_tokens(ck.manifest.at("vocab").get<std::vector<std::string>>());
    out.model = twinnet::init_params<float>(out.vocab.size(), out.cfg.embed_dim, out.cfg.hidden_dim, 0);
    for (auto& [name, t] : out.model.named()) checkpoint::restore_into(*t, ck.tensor(name));
    out.step = ck.manifest.at("step").get<std::int64_t>();
    return out;
  } catch (const json::exception& e) {
    throw CheckpointError("malformed checkpoint '" + manifest.string() + "': " + e.what());
  }
}

// ---------------------------------------------------------------------------
// Training loop
// ---------------------------------------------------------------------------

struct TrainOptions {
  std::optional<fs::path> out_dir;  // checkpoints and history.csv
  std::optional<fs::path> resume;   // checkpoint manifest to continue from
  std::ostream* log = nullptr;
};

struct TrainResult {
  TrainState state;
  std::vector<StepRecord> history;  // steps run by this call
  std::optional<fs::path> last_checkpoint;
  twinnet::PathStorage initial_storage;  // parameter buffers before the first step
};

inline void log_step(std::ostream& os, const TrainConfig& cfg, const StepRecord& r) {
  os << variant_name(cfg.variant) << " seed " << cfg.seed << " step " << r.step << "/" << cfg.max_steps
     << " rec " << format_g(r.rec_loss);
  if (r.adv_loss) os << " adv " << format_g(*r.adv_loss);
  if (r.critic_loss) os << " critic " << format_g(*r.critic_loss);
  if (r.sim_loss) os << " sim " << format_g(*r.sim_loss);
  os << "\n";
}

// Runs until cfg.max_steps. On divergence the history so far is written and
// the DivergedError propagates; earlier checkpoints are left in place.
inline TrainResult train(const TrainConfig& cfg, std::span<const OOAPair> pairs, const TrainOptions& opt = {}) {
  TrainResult res{opt.resume ? load_state(*opt.resume, pairs) : init_state(cfg, pairs), {}, std::nullopt};
  TrainState& s = res.state;
  res.initial_storage = twinnet::path_storage(s.model, Task::Upper);
  if (opt.resume) {
    s.cfg.max_steps = cfg.max_steps;
    s.cfg.checkpoint_every = cfg.checkpoint_every;
    s.cfg.log_every = cfg.log_every;
  }
  std::vector<std::string> previous;
  if (opt.resume) previous = read_history_lines(opt.resume->parent_path() / "history.csv", s.step);

  auto write_history = [&] {
    if (!opt.out_dir) return;
    std::string text = history_header();
    for (const auto& line : previous) text += line + "\n";
    for (const auto& r : res.history) text += history_row(r);
    io::write_file_atomic(*opt.out_dir / "history.csv", text);
  };
  auto write_checkpoint = [&] {
    if (!opt.out_dir) return;
    res.last_checkpoint = checkpoint_path(*opt.out_dir, s.step);
    save_state(*res.last_checkpoint, s);
  };

  try {
    while (s.step < s.cfg.max_steps) {
      res.history.push_back(train_step(s));
      if (opt.log && s.cfg.log_every > 0 && s.step % s.cfg.log_every == 0) log_step(*opt.log, s.cfg, res.history.back());
      if (s.cfg.checkpoint_every > 0 && s.step % s.cfg.checkpoint_every == 0 && s.step < s.cfg.max_steps) {
        write_checkpoint();
        write_history();
      }
    }
  } catch (const DivergedError&) {
    write_history();
    throw;
  }
  write_checkpoint();
  write_history();
  return res;
}

}  // namespace twinlab::trainer
