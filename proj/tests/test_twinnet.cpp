#include <gtest/gtest.h>

#include <cmath>
#include <vector>

#include "support/gradcheck.hpp"
#include "support/op_cases.hpp"
#include "twinlab/twinnet.hpp"

namespace {

using namespace twinlab;
using twinnet::TwinParams;
using textcore::Vocabulary;
using D = ad::Tensor<double>;

constexpr std::size_t kV = 9, kE = 3, kH = 4;

std::vector<std::size_t> ids(std::initializer_list<std::size_t> l) { return l; }

void fill(TwinParams<double>& p, double v) {
  for (auto& [name, t] : p.named())
    for (auto& x : t->mutable_data()) x = v;
}

std::vector<double> values(const D& t) { return {t.data().begin(), t.data().end()}; }

double sigmoid(double x) { return 1.0 / (1.0 + std::exp(-x)); }

// Reference LSTM written directly over the raw parameter arrays.
struct RefState {
  std::vector<double> h, c;
};

RefState ref_encode(const TwinParams<double>& p, const std::vector<std::size_t>& seq) {
  const std::size_t H = p.hidden, E = p.embed;
  RefState s{std::vector<double>(H, 0.0), std::vector<double>(H, 0.0)};
  const auto emb = p.embedding.data(), wx = p.enc.w_x.data(), wh = p.enc.w_h.data(), b = p.enc.b.data();
  for (std::size_t id : seq) {
    std::vector<double> z(4 * H);
    for (std::size_t j = 0; j < 4 * H; ++j) {
      double acc = b[j];
      for (std::size_t e = 0; e < E; ++e) acc += emb[id * E + e] * wx[e * 4 * H + j];
      for (std::size_t k = 0; k < H; ++k) acc += s.h[k] * wh[k * 4 * H + j];
      z[j] = acc;
    }
    for (std::size_t k = 0; k < H; ++k) {
      const double i = sigmoid(z[k]), f = sigmoid(z[H + k]), g = std::tanh(z[2 * H + k]), o = sigmoid(z[3 * H + k]);
      s.c[k] = f * s.c[k] + i * g;
      s.h[k] = o * std::tanh(s.c[k]);
    }
  }
  return s;
}

Vocabulary tiny_vocab() {
  const std::vector<textcore::TokenSeq> corpus{{"the", "cat", "sat", "."}, {"a", "dog", "ran", "."}};
  return Vocabulary::build(corpus, 100);
}

TEST(TwinParams, CountMatchesFormula) {
  const auto p = twinnet::init_params<float>(50, 8, 16, 1);
  EXPECT_EQ(p.count(), twinnet::expected_param_count(50, 8, 16));
  EXPECT_EQ(p.count(), 50u * 8 + 4 * (8 * 16 + 16 * 16 + 16) * 2 + 16 * 50);
}

TEST(TwinParams, SameSeedSameValues) {
  const auto a = twinnet::init_params<float>(20, 4, 6, 42);
  const auto b = twinnet::init_params<float>(20, 4, 6, 42);
  const auto c = twinnet::init_params<float>(20, 4, 6, 43);
  const auto na = a.named(), nb = b.named(), nc = c.named();
  bool any_diff = false;
  for (std::size_t i = 0; i < na.size(); ++i) {
    const auto va = na[i].second->data(), vb = nb[i].second->data(), vc = nc[i].second->data();
    EXPECT_TRUE(std::equal(va.begin(), va.end(), vb.begin(), vb.end())) << na[i].first;
    any_diff |= !std::equal(va.begin(), va.end(), vc.begin(), vc.end());
  }
  EXPECT_TRUE(any_diff);
}

TEST(TwinParams, ForgetBiasStartsNearOne) {
  const auto p = twinnet::init_params<float>(10, 4, 5, 3);
  const auto b = p.enc.b.data();
  for (std::size_t j = 5; j < 10; ++j) EXPECT_GT(b[j], 0.85f);
  for (std::size_t j = 0; j < 5; ++j) EXPECT_LT(std::abs(b[j]), 0.1f + 1e-6f);
}

TEST(TwinParams, RejectsZeroDimensions) {
  EXPECT_THROW(twinnet::init_params<float>(0, 4, 4, 1), ConfigError);
  EXPECT_THROW(twinnet::init_params<float>(4, 0, 4, 1), ConfigError);
  EXPECT_THROW(twinnet::init_params<float>(4, 4, 0, 1), ConfigError);
}

TEST(TwinParams, CloneHasFreshStorage) {
  const auto p = twinnet::init_params<float>(10, 3, 4, 1);
  const auto q = twinnet::clone(p);
  EXPECT_NE(twinnet::path_storage(p, textcore::Task::Lower), twinnet::path_storage(q, textcore::Task::Lower));
  EXPECT_TRUE(std::equal(p.out.data().begin(), p.out.data().end(), q.out.data().begin()));
}

TEST(Encoder, ZeroWeightsGiveZeroStates) {
  auto p = twinnet::init_params<double>(kV, kE, kH, 5);
  fill(p, 0.0);
  const auto enc = twinnet::encode(p, ids({Vocabulary::kTaskLower, 6, 7, 8, Vocabulary::kEos}));
  ASSERT_EQ(enc.states.size(), 5u);
  for (const auto& h : enc.states)
    for (double x : h.data()) EXPECT_EQ(x, 0.0);
  for (double x : enc.final.c.data()) EXPECT_EQ(x, 0.0);
}

TEST(Encoder, LengthOneInput) {
  const auto p = twinnet::init_params<double>(kV, kE, kH, 5);
  const auto enc = twinnet::encode(p, ids({Vocabulary::kTaskUpper}));
  ASSERT_EQ(enc.states.size(), 1u);
  EXPECT_EQ(values(enc.states[0]), values(enc.final.h));
}

TEST(Encoder, MatchesHandUnrolledTwoSteps) {
  const auto p = twinnet::init_params<double>(kV, kE, kH, 11);
  const auto seq = ids({Vocabulary::kTaskUpper, 7});
  const auto enc = twinnet::encode(p, seq);
  const RefState ref = ref_encode(p, seq);
  for (std::size_t k = 0; k < kH; ++k) {
    EXPECT_NEAR(enc.final.h.at(k), ref.h[k], 1e-12);
    EXPECT_NEAR(enc.final.c.at(k), ref.c[k], 1e-12);
  }
}

TEST(Encoder, PaddedRowsKeepTheirOwnFinalState) {
  const auto p = twinnet::init_params<double>(kV, kE, kH, 2);
  const std::vector<std::vector<std::size_t>> rows{{4, 6, 2}, {5, 7, 8, 6, 2}, {4, 2}};
  const auto batch = twinnet::encode(p, twinnet::make_batch(rows));
  for (std::size_t r = 0; r < rows.size(); ++r) {
    const RefState ref = ref_encode(p, rows[r]);
    for (std::size_t k = 0; k < kH; ++k) EXPECT_NEAR(batch.final.h.at(r * kH + k), ref.h[k], 1e-12) << r;
  }
}

TEST(Encoder, RequiresTaskToken) {
  const auto p = twinnet::init_params<double>(kV, kE, kH, 2);
  EXPECT_THROW(twinnet::encode(p, ids({6, 7})), ConfigError);
  EXPECT_THROW(twinnet::encode(p, std::vector<std::size_t>{}), EmptyBatch);
}

TEST(Encoder, RejectsIdsOutsideVocabulary) {
  const auto p = twinnet::init_params<double>(kV, kE, kH, 2);
  EXPECT_THROW(twinnet::encode(p, ids({Vocabulary::kTaskUpper, kV})), VocabError);
}

TEST(Decoder, UniformLogitsGiveLogV) {
  auto p = twinnet::init_params<double>(kV, kE, kH, 8);
  for (auto& x : p.out.mutable_data()) x = 0.0;
  const auto enc = twinnet::encode(p, ids({Vocabulary::kTaskLower, 6, 7}));
  const auto tgt = ids({Vocabulary::kBos, 6, 8, 7, Vocabulary::kEos});
  const std::vector<double> mask(4, 1.0);
  const auto r = twinnet::decode_teacher_forced(p, enc, tgt, std::span<const double>(mask));
  EXPECT_NEAR(r.nll.item(), std::log(static_cast<double>(kV)), 1e-12);
  EXPECT_EQ(r.logits.shape(), (ad::Shape{4, kV}));
}

TEST(Decoder, ConfidentLogitsDriveLossToZero) {
  // One-token target: the first prediction is EOS, from the zero-input
  // decoder state. A large EOS column makes that prediction certain.
  auto p = twinnet::init_params<double>(kV, kE, kH, 8);
  fill(p, 0.0);
  auto b = p.dec.b.mutable_data();
  for (std::size_t j = 0; j < 4 * kH; ++j) b[j] = 10.0;
  auto out = p.out.mutable_data();
  for (std::size_t k = 0; k < kH; ++k) out[k * kV + Vocabulary::kEos] = 100.0;
  const auto enc = twinnet::encode(p, ids({Vocabulary::kTaskLower, 6}));
  const std::vector<double> mask{1.0};
  const auto r = twinnet::decode_teacher_forced(p, enc, ids({Vocabulary::kBos, Vocabulary::kEos}),
                                                std::span<const double>(mask));
  EXPECT_LT(r.nll.item(), 1e-12);
}

TEST(Decoder, MaskedPositionHasNoGradient) {
  // Token 8 is only read as the input to the last prediction, which is masked.
  auto p = twinnet::init_params<double>(kV, kE, kH, 9);
  const auto tgt = ids({Vocabulary::kBos, 6, 8, Vocabulary::kEos});
  const std::vector<double> mask{1.0, 1.0, 0.0};
  auto loss = [&] {
    const auto enc = twinnet::encode(p, ids({Vocabulary::kTaskUpper, 6, 7}));
    return twinnet::decode_teacher_forced(p, enc, tgt, std::span<const double>(mask)).nll;
  };
  {
    ad::Tape<double> tape;
    p.embedding.zero_grad();
    ad::backward(tape, loss());
    const auto g = p.embedding.grad();
    for (std::size_t e = 0; e < kE; ++e) EXPECT_EQ(g[8 * kE + e], 0.0);
  }
  // Same conclusion from finite differences on the masked token's embedding.
  auto emb = p.embedding.mutable_data();
  for (std::size_t e = 0; e < kE; ++e) {
    const double saved = emb[8 * kE + e];
    emb[8 * kE + e] = saved + 1e-3;
    const double up = loss().item();
    emb[8 * kE + e] = saved - 1e-3;
    const double down = loss().item();
    emb[8 * kE + e] = saved;
    EXPECT_NEAR((up - down) / 2e-3, 0.0, 1e-12);
  }
}

TEST(Decoder, MaskLengthIsChecked) {
  const auto p = twinnet::init_params<double>(kV, kE, kH, 9);
  const auto enc = twinnet::encode(p, ids({Vocabulary::kTaskUpper, 6}));
  const std::vector<double> bad(4, 1.0);
  EXPECT_THROW(twinnet::decode_teacher_forced(p, enc, ids({Vocabulary::kBos, 6, Vocabulary::kEos}),
                                              std::span<const double>(bad)),
               ShapeError);
  const std::vector<double> ok(2, 1.0);
  EXPECT_THROW(twinnet::decode_teacher_forced(p, enc, ids({6, 7, Vocabulary::kEos}), std::span<const double>(ok)),
               ShapeError);
}

TEST(Decoder, EosDominantLogitsGiveEmptyOutput) {
  auto p = twinnet::init_params<double>(kV, kE, kH, 4);
  fill(p, 0.0);
  auto b = p.dec.b.mutable_data();
  for (std::size_t j = 0; j < 4 * kH; ++j) b[j] = 10.0;  // h is positive on every step
  auto out = p.out.mutable_data();
  for (std::size_t k = 0; k < kH; ++k) out[k * kV + Vocabulary::kEos] = 1.0;
  const auto enc = twinnet::encode(p, ids({Vocabulary::kTaskLower, 6, 7}));
  const auto res = twinnet::decode_greedy(p, enc.final, 10);
  ASSERT_EQ(res.size(), 1u);
  EXPECT_TRUE(res[0].empty());
}

TEST(Decoder, GreedyIsDeterministicAndBounded) {
  const auto v = tiny_vocab();
  const auto p = twinnet::init_params<float>(v.size(), 5, 7, 21);
  const std::vector<textcore::TokenSeq> sents{{"the", "cat", "sat", "."}, {"a", "dog", "."}};
  const auto a = twinnet::simplify(p, v, std::span<const textcore::TokenSeq>(sents), 6);
  const auto b = twinnet::simplify(p, v, std::span<const textcore::TokenSeq>(sents), 6);
  EXPECT_EQ(a, b);
  for (const auto& s : a) EXPECT_LE(s.size(), 6u);
  EXPECT_THROW(twinnet::decode_greedy(p, twinnet::zero_state<float>(1, 7), 0), ConfigError);
}

TEST(Decoder, BatchedGreedyMatchesSingleSentences) {
  const auto v = tiny_vocab();
  const auto p = twinnet::init_params<float>(v.size(), 5, 7, 22);
  const std::vector<textcore::TokenSeq> sents{{"the", "cat", "sat", "."}, {"a", "dog", "."}, {"cat", "."}};
  const auto batched = twinnet::simplify(p, v, std::span<const textcore::TokenSeq>(sents), 8);
  for (std::size_t i = 0; i < sents.size(); ++i) EXPECT_EQ(twinnet::simplify(p, v, sents[i], 8), batched[i]);
}

TEST(TwinModel, GradientsMatchFiniteDifferencesOverTwoSteps) {
  auto p = twinnet::init_params<double>(kV, kE, kH, 31);
  // Larger weights make the check sensitive to every gate.
  Rng rng(77);
  for (auto& [name, t] : p.named())
    for (auto& x : t->mutable_data()) x = rng.uniform(-0.8, 0.8);
  auto loss = [&] {
    const auto enc = twinnet::encode(p, ids({Vocabulary::kTaskLower, 6}));
    const std::vector<double> mask{1.0, 1.0};
    return twinnet::decode_teacher_forced(p, enc, ids({Vocabulary::kBos, 7, Vocabulary::kEos}),
                                          std::span<const double>(mask))
        .nll;
  };
  std::vector<D> leaves;
  for (auto& [name, t] : p.named()) leaves.push_back(*t);
  const auto res = testkit::check_gradients<double>(loss, leaves, 1e-3, 1000);
  EXPECT_LT(res.max_rel_error, 1e-3) << res.worst;
  EXPECT_EQ(res.checked, p.count());
}

TEST(TwinModel, BothPathsMatchFiniteDifferencesOver100Seeds) {
  double worst = 0.0;
  std::string where;
  for (std::uint64_t seed = 0; seed < 100; ++seed) {
    auto [loss, leaves] = testkit::twin_model_case(seed);
    const auto res = testkit::check_gradients<double>(loss, leaves, 1e-3, 1000);
    if (res.max_rel_error > worst) {
      worst = res.max_rel_error;
      where = "seed " + std::to_string(seed) + " " + res.worst;
    }
  }
  EXPECT_LT(worst, 1e-3) << where;
}

TEST(Tying, PathsReadTheSameStorage) {
  const auto v = tiny_vocab();
  const auto p = twinnet::init_params<float>(v.size(), 4, 6, 3);
  EXPECT_EQ(twinnet::path_storage(p, textcore::Task::Upper), twinnet::path_storage(p, textcore::Task::Lower));
  EXPECT_TRUE(twinnet::paths_share_storage(p, v, {"the", "cat", "sat", "."}));
}

}  // namespace
