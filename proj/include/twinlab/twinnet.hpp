#pragma once

// Conjoined encoder-decoder. One embedding, one encoder LSTM, one decoder
// LSTM and one output projection serve both paths; the path is selected by
// the task token at the start of the encoder input.

#include <algorithm>
#include <cstdint>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "twinlab/autodiff.hpp"
#include "twinlab/error.hpp"
#include "twinlab/random.hpp"
#include "twinlab/textcore.hpp"

namespace twinlab::twinnet {

using ad::Tensor;
using textcore::Task;
using textcore::TokenSeq;
using textcore::Vocabulary;

// Gate blocks are laid out as [input, forget, candidate, output].
template <class T = float>
struct LstmParams {
  Tensor<T> w_x;  // [embed, 4 * hidden]
  Tensor<T> w_h;  // [hidden, 4 * hidden]
  Tensor<T> b;    // [4 * hidden]
};

template <class T = float>
struct TwinParams {
  std::size_t vocab = 0, embed = 0, hidden = 0;
  Tensor<T> embedding;  // [vocab, embed]
  LstmParams<T> enc;
  LstmParams<T> dec;
  Tensor<T> out;  // [hidden, vocab]

  // Fixed order used by checkpoints and optimizers.
  std::vector<std::pair<std::string, Tensor<T>*>> named() {
    return {{"embedding", &embedding}, {"enc.w_x", &enc.w_x}, {"enc.w_h", &enc.w_h}, {"enc.b", &enc.b},
            {"dec.w_x", &dec.w_x},     {"dec.w_h", &dec.w_h}, {"dec.b", &dec.b},     {"out", &out}};
  }
  std::vector<std::pair<std::string, const Tensor<T>*>> named() const {
    auto v = const_cast<TwinParams*>(this)->named();
    return {v.begin(), v.end()};
  }

  std::size_t count() const {
    std::size_t n = 0;
    for (const auto& [name, t] : named()) n += t->numel();
    return n;
  }
};

inline std::size_t expected_param_count(std::size_t vocab, std::size_t embed, std::size_t hidden) {
  return vocab * embed + 4 * (embed * hidden + hidden * hidden + hidden) * 2 + hidden * vocab;
}

template <class T>
Tensor<T> uniform_parameter(ad::Shape shape, Rng& rng, double bound) {
  std::vector<T> v(ad::numel(shape));
  for (auto& x : v) x = static_cast<T>(rng.uniform(-bound, bound));
  return Tensor<T>::parameter(std::move(shape), std::move(v));
}

// U(-0.1, 0.1) everywhere, then +1 on the forget-gate bias.
template <class T = float>
TwinParams<T> init_params(std::size_t vocab, std::size_t embed, std::size_t hidden, std::uint64_t seed) {
  if (vocab < 1 || embed < 1 || hidden < 1) throw ConfigError("init_params: dimensions must be at least 1");
  Rng rng(seed);
  TwinParams<T> p;
  p.vocab = vocab;
  p.embed = embed;
  p.hidden = hidden;
  p.embedding = uniform_parameter<T>({vocab, embed}, rng, 0.1);
  for (LstmParams<T>* l : {&p.enc, &p.dec}) {
    l->w_x = uniform_parameter<T>({embed, 4 * hidden}, rng, 0.1);
    l->w_h = uniform_parameter<T>({hidden, 4 * hidden}, rng, 0.1);
    l->b = uniform_parameter<T>({4 * hidden}, rng, 0.1);
    auto b = l->b.mutable_data();
    for (std::size_t j = hidden; j < 2 * hidden; ++j) b[j] += T(1);
  }
  p.out = uniform_parameter<T>({hidden, vocab}, rng, 0.1);
  return p;
}

// Deep copy with fresh storage.
template <class T>
TwinParams<T> clone(const TwinParams<T>& p) {
  TwinParams<T> q = p;
  for (auto& [name, t] : q.named())
    *t = Tensor<T>::parameter(t->shape(), std::vector<T>(t->data().begin(), t->data().end()));
  return q;
}

// ---------------------------------------------------------------------------
// Batches
// ---------------------------------------------------------------------------

// Time-major padded id matrix: ids[t * batch + b], PAD past each length.
struct SeqBatch {
  std::size_t batch = 0;
  std::size_t steps = 0;
  std::vector<std::size_t> ids;
  std::vector<std::size_t> lengths;

  std::size_t at(std::size_t t, std::size_t b) const { return ids[t * batch + b]; }
};

inline SeqBatch make_batch(std::span<const std::vector<std::size_t>> seqs) {
  if (seqs.empty()) throw EmptyBatch("make_batch: no sequences");
  SeqBatch sb;
  sb.batch = seqs.size();
  for (const auto& s : seqs) {
    if (s.empty()) throw EmptyBatch("make_batch: empty sequence");
    sb.steps = std::max(sb.steps, s.size());
    sb.lengths.push_back(s.size());
  }
  sb.ids.assign(sb.steps * sb.batch, Vocabulary::kPad);
  for (std::size_t b = 0; b < sb.batch; ++b)
    for (std::size_t t = 0; t < seqs[b].size(); ++t) sb.ids[t * sb.batch + b] = seqs[b][t];
  return sb;
}

template <class T>
void check_ids(const TwinParams<T>& p, std::span<const std::size_t> ids) {
  for (std::size_t id : ids)
    if (id >= p.vocab)
      throw VocabError("token id " + std::to_string(id) + " outside vocabulary of size " + std::to_string(p.vocab));
}

// ---------------------------------------------------------------------------
// LSTM
// ---------------------------------------------------------------------------

template <class T = float>
struct LstmState {
  Tensor<T> h;  // [batch, hidden]
  Tensor<T> c;
};

// One step given the precomputed input projection xw = x W_x + b.
template <class T>
LstmState<T> lstm_step(const LstmParams<T>& l, std::size_t hidden, const Tensor<T>& xw, const LstmState<T>& s) {
  using namespace ad;
  const Tensor<T> gates = add(xw, matmul(s.h, l.w_h));
  const Tensor<T> i = sigmoid(slice(gates, 1, 0, hidden));
  const Tensor<T> f = sigmoid(slice(gates, 1, hidden, 2 * hidden));
  const Tensor<T> g = ad::tanh(slice(gates, 1, 2 * hidden, 3 * hidden));
  const Tensor<T> o = sigmoid(slice(gates, 1, 3 * hidden, 4 * hidden));
  LstmState<T> next;
  next.c = add(mul(f, s.c), mul(i, g));
  next.h = mul(o, ad::tanh(next.c));
  return next;
}

// Input projections for every step at once: [steps * batch, 4 * hidden].
template <class T>
Tensor<T> project_inputs(const TwinParams<T>& p, const LstmParams<T>& l, std::span<const std::size_t> ids) {
  return ad::add(ad::matmul(ad::take_rows(p.embedding, ids), l.w_x), l.b);
}

template <class T>
LstmState<T> zero_state(std::size_t batch, std::size_t hidden) {
  return {Tensor<T>::zeros({batch, hidden}), Tensor<T>::zeros({batch, hidden})};
}

// Rows whose sequence is still running take `next`; the rest keep `prev`.
template <class T>
LstmState<T> masked(const LstmState<T>& next, const LstmState<T>& prev, const std::vector<std::uint8_t>& active) {
  if (std::all_of(active.begin(), active.end(), [](std::uint8_t a) { return a != 0; })) return next;
  return {ad::blend<T>(active, next.h, prev.h), ad::blend<T>(active, next.c, prev.c)};
}

inline std::vector<std::uint8_t> active_rows(const SeqBatch& sb, std::size_t t, std::size_t shrink = 0) {
  std::vector<std::uint8_t> a(sb.batch);
  for (std::size_t b = 0; b < sb.batch; ++b) a[b] = t + shrink < sb.lengths[b] ? 1 : 0;
  return a;
}

// ---------------------------------------------------------------------------
// Encoder
// ---------------------------------------------------------------------------

template <class T = float>
struct EncoderOutput {
  std::vector<Tensor<T>> states;  // per step, [batch, hidden]
  LstmState<T> final;             // state at each sequence's own last token
};

template <class T>
EncoderOutput<T> encode(const TwinParams<T>& p, const SeqBatch& sb) {
  if (sb.batch == 0 || sb.steps == 0) throw EmptyBatch("encode: empty batch");
  check_ids(p, sb.ids);
  const Tensor<T> xw = project_inputs(p, p.enc, sb.ids);
  EncoderOutput<T> out;
  LstmState<T> s = zero_state<T>(sb.batch, p.hidden);
  for (std::size_t t = 0; t < sb.steps; ++t) {
    const Tensor<T> xw_t = ad::slice(xw, 0, t * sb.batch, (t + 1) * sb.batch);
    s = masked(lstm_step(p.enc, p.hidden, xw_t, s), s, active_rows(sb, t));
    out.states.push_back(s.h);
  }
  out.final = s;
  return out;
}

// Single sequence, which must start with a task token.
template <class T>
EncoderOutput<T> encode(const TwinParams<T>& p, std::span<const std::size_t> ids) {
  if (ids.empty()) throw EmptyBatch("encode: empty id list");
  if (ids[0] != Vocabulary::kTaskUpper && ids[0] != Vocabulary::kTaskLower)
    throw ConfigError("encode: input must begin with a task token");
  const std::vector<std::size_t> seq(ids.begin(), ids.end());
  return encode(p, make_batch(std::span<const std::vector<std::size_t>>(&seq, 1)));
}

// ---------------------------------------------------------------------------
// Decoder
// ---------------------------------------------------------------------------

template <class T = float>
struct DecodeResult {
  Tensor<T> logits;   // [(steps - 1) * batch, vocab], time-major
  Tensor<T> nll;      // scalar, mean over unmasked positions
  Tensor<T> final_h;  // [batch, hidden], state after each row's last input
};

// Teacher forcing over targets laid out [BOS, ..., EOS]: the decoder reads
// positions 0..L-2 and predicts 1..L-1. `mask` is time-major over the
// (steps - 1) * batch predictions.
template <class T>
DecodeResult<T> decode_teacher_forced(const TwinParams<T>& p, const LstmState<T>& init, const SeqBatch& tgt,
                                      std::span<const T> mask) {
  if (tgt.steps < 2) throw ShapeError("decode_teacher_forced: targets need at least BOS and EOS");
  const std::size_t steps = tgt.steps - 1;
  if (mask.size() != steps * tgt.batch)
    throw ShapeError("decode_teacher_forced: mask of length " + std::to_string(mask.size()) + " for " +
                     std::to_string(steps * tgt.batch) + " target positions");
  if (init.h.dim(0) != tgt.batch)
    throw ShapeError("decode_teacher_forced: initial state for " + std::to_string(init.h.dim(0)) +
                     " rows but batch of " + std::to_string(tgt.batch));
  check_ids(p, tgt.ids);
  const std::span<const std::size_t> inputs(tgt.ids.data(), steps * tgt.batch);
  const Tensor<T> xw = project_inputs(p, p.dec, inputs);
  std::vector<Tensor<T>> hs;
  hs.reserve(steps);
  LstmState<T> s = init;
  for (std::size_t t = 0; t < steps; ++t) {
    const Tensor<T> xw_t = ad::slice(xw, 0, t * tgt.batch, (t + 1) * tgt.batch);
    s = masked(lstm_step(p.dec, p.hidden, xw_t, s), s, active_rows(tgt, t, 1));
    hs.push_back(s.h);
  }
  DecodeResult<T> r;
  r.logits = ad::matmul(ad::concat(std::span<const Tensor<T>>(hs), 0), p.out);
  r.nll = ad::softmax_cross_entropy(r.logits, std::span<const std::size_t>(tgt.ids).subspan(tgt.batch), mask);
  r.final_h = s.h;
  return r;
}

// Mask selecting every real (non-padding) prediction.
template <class T>
std::vector<T> target_mask(const SeqBatch& tgt) {
  const std::size_t steps = tgt.steps - 1;
  std::vector<T> m(steps * tgt.batch, T(0));
  for (std::size_t t = 0; t < steps; ++t)
    for (std::size_t b = 0; b < tgt.batch; ++b) m[t * tgt.batch + b] = t + 1 < tgt.lengths[b] ? T(1) : T(0);
  return m;
}

template <class T>
DecodeResult<T> decode_teacher_forced(const TwinParams<T>& p, const LstmState<T>& init, const SeqBatch& tgt) {
  const auto mask = target_mask<T>(tgt);
  return decode_teacher_forced(p, init, tgt, std::span<const T>(mask));
}

// Single sequence from an encoder output; mask has one entry per prediction
// (target length - 1).
template <class T>
DecodeResult<T> decode_teacher_forced(const TwinParams<T>& p, const EncoderOutput<T>& enc,
                                      std::span<const std::size_t> target_ids, std::span<const T> mask) {
  if (target_ids.size() < 2 || target_ids.front() != Vocabulary::kBos || target_ids.back() != Vocabulary::kEos)
    throw ShapeError("decode_teacher_forced: target must be [BOS, ..., EOS]");
  if (mask.size() + 1 != target_ids.size())
    throw ShapeError("decode_teacher_forced: target of length " + std::to_string(target_ids.size()) +
                     " needs a mask of length " + std::to_string(target_ids.size() - 1) + ", got " +
                     std::to_string(mask.size()));
  const std::vector<std::size_t> seq(target_ids.begin(), target_ids.end());
  return decode_teacher_forced(p, enc.final, make_batch(std::span<const std::vector<std::size_t>>(&seq, 1)), mask);
}

// Greedy decoding from a batch of initial states. Each row stops at EOS or
// after max_len tokens; the returned ids exclude EOS.
template <class T>
std::vector<std::vector<std::size_t>> decode_greedy(const TwinParams<T>& p, const LstmState<T>& init,
                                                    std::size_t max_len) {
  if (max_len < 1) throw ConfigError("decode_greedy: max_len must be at least 1");
  ad::NoGrad<T> no_grad;
  const std::size_t batch = init.h.dim(0);
  std::vector<std::vector<std::size_t>> out(batch);
  std::vector<std::uint8_t> done(batch, 0);
  std::vector<std::size_t> prev(batch, Vocabulary::kBos);
  LstmState<T> s = init;
  for (std::size_t t = 0; t < max_len; ++t) {
    s = lstm_step(p.dec, p.hidden, project_inputs(p, p.dec, prev), s);
    const auto next = ad::argmax_rows(ad::matmul(s.h, p.out));
    bool all_done = true;
    for (std::size_t b = 0; b < batch; ++b) {
      if (done[b]) continue;
      if (next[b] == Vocabulary::kEos) {
        done[b] = 1;
        continue;
      }
      out[b].push_back(next[b]);
      prev[b] = next[b];
      all_done = false;
    }
    if (all_done) break;
  }
  return out;
}

// Encodes each sentence with the given task and decodes greedily, in
// chunks of `chunk` sentences.
template <class T>
std::vector<TokenSeq> transduce(const TwinParams<T>& p, const Vocabulary& v, std::span<const TokenSeq> sents,
                                Task task, std::size_t max_len, std::size_t chunk = 64) {
  ad::NoGrad<T> no_grad;
  std::vector<TokenSeq> out;
  out.reserve(sents.size());
  for (std::size_t start = 0; start < sents.size(); start += chunk) {
    const std::size_t end = std::min(sents.size(), start + chunk);
    std::vector<std::vector<std::size_t>> ids;
    for (std::size_t i = start; i < end; ++i) ids.push_back(textcore::encode_ids(v, sents[i], task));
    const auto enc = encode(p, make_batch(ids));
    for (const auto& row : decode_greedy(p, enc.final, max_len)) out.push_back(textcore::decode_ids(v, row));
  }
  return out;
}

// The simplification (LOWER) path.
template <class T>
std::vector<TokenSeq> simplify(const TwinParams<T>& p, const Vocabulary& v, std::span<const TokenSeq> sents,
                               std::size_t max_len) {
  return transduce(p, v, sents, Task::Lower, max_len);
}

template <class T>
TokenSeq simplify(const TwinParams<T>& p, const Vocabulary& v, const TokenSeq& sentence, std::size_t max_len) {
  return simplify(p, v, std::span<const TokenSeq>(&sentence, 1), max_len).front();
}

// ---------------------------------------------------------------------------
// Weight tying
// ---------------------------------------------------------------------------

// The parameter storage that one path reads.
struct PathStorage {
  std::vector<std::pair<std::string, const void*>> tensors;
  friend bool operator==(const PathStorage&, const PathStorage&) = default;
};

template <class T>
PathStorage path_storage(const TwinParams<T>& p, Task) {
  PathStorage s;
  for (const auto& [name, t] : p.named()) s.tensors.emplace_back(name, t->storage());
  return s;
}

// Runs both paths on one sentence under a scratch tape and checks that the
// leaves each loss actually reaches are the same buffers, namely the
// model's own parameter storage.
template <class T>
bool paths_share_storage(const TwinParams<T>& p, const Vocabulary& v, const TokenSeq& sentence) {
  if (!(path_storage(p, Task::Upper) == path_storage(p, Task::Lower))) return false;
  ad::Tape<T> tape;
  const auto target = textcore::encode_target(v, sentence);
  const std::vector<std::vector<std::size_t>> tgt_rows{target};
  const SeqBatch tgt = make_batch(tgt_rows);
  auto reached = [&](Task task) {
    const std::vector<std::vector<std::size_t>> rows{textcore::encode_ids(v, sentence, task)};
    const auto enc = encode(p, make_batch(rows));
    return ad::leaf_storages(decode_teacher_forced(p, enc.final, tgt).nll);
  };
  const auto upper = reached(Task::Upper);
  const auto lower = reached(Task::Lower);
  if (upper != lower) return false;
  std::unordered_set<const void*> own;
  for (const auto& [name, t] : p.named()) own.insert(t->storage());
  return upper == own;
}

}  // namespace twinlab::twinnet
