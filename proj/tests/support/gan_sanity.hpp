#pragma once

// Critic training on two separable Gaussian clouds in 16 dimensions:
// real ~ N(+m, s^2 I), fake ~ N(-m, s^2 I) with m = s = 0.05. The means lie
// 8 standard deviations apart; at this latent-sized scale the distance
// between them (0.4) is small enough that a penalty weight of 1 can hold the
// critic's gradient norm near 1. The penalized optimum sits near 1 + dist/2.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <vector>

#include "twinlab/adversary.hpp"
#include "twinlab/random.hpp"
#include "twinlab/trainer.hpp"

namespace twinlab::testkit {

struct GanSanityResult {
  double js_accuracy = 0;           // held-out, after the JS steps
  std::vector<double> gap;          // E[f(real)] - E[f(fake)] on a fixed set, per WGAN step
  std::vector<double> gap_windows;  // means over consecutive 20-step windows
  double grad_dev_first = 0;        // mean |grad norm - 1| at the first probe step
  double grad_dev_last = 0;         // ... and at the last
  bool gap_rising = false;          // window means strictly increase up to rising_steps
};

struct GanSanityOptions {
  std::size_t dim = 16;
  std::size_t batch = 64;
  std::size_t js_steps = 200;
  std::size_t w_steps = 500;
  std::size_t probe_first = 10;
  std::size_t window = 20;
  std::size_t rising_steps = 200;  // horizon over which the windowed gap must rise
  double mean = 0.05;
  double sd = 0.05;
  std::uint64_t seed = 1;
};

inline ad::Tensor<float> gaussian_cloud(Rng& rng, std::size_t n, std::size_t d, double mean, double sd) {
  std::vector<float> v(n * d);
  for (auto& x : v) x = static_cast<float>(mean + sd * rng.normal());
  return ad::Tensor<float>::constant({n, d}, std::move(v));
}

// Mean |‖∇f(x̂)‖ − 1| over fixed interpolants.
inline double grad_norm_deviation(const adversary::CriticParams<float>& c, const ad::Tensor<float>& x_hat) {
  ad::Tape<float> tape;
  const auto x = ad::Tensor<float>::parameter(x_hat.shape(),
                                              std::vector<float>(x_hat.data().begin(), x_hat.data().end()));
  const auto g = ad::input_gradient(ad::sum(adversary::critic_f(c, x)), x);
  const std::size_t n = x.dim(0), d = x.dim(1);
  double dev = 0;
  for (std::size_t i = 0; i < n; ++i) {
    double sq = 0;
    for (std::size_t j = 0; j < d; ++j) sq += static_cast<double>(g.at(i * d + j)) * g.at(i * d + j);
    dev += std::abs(std::sqrt(sq) - 1.0);
  }
  return dev / static_cast<double>(n);
}

inline GanSanityResult run_gan_sanity(const GanSanityOptions& o = {}) {
  const trainer::CriticConfig cfg;
  GanSanityResult r;
  Rng eval_rng(derive_seed(o.seed, 1));
  const auto eval_real = gaussian_cloud(eval_rng, 500, o.dim, o.mean, o.sd);
  const auto eval_fake = gaussian_cloud(eval_rng, 500, o.dim, -o.mean, o.sd);

  auto train = [&](std::size_t steps, bool wgan, auto&& after_step) {
    auto critic = adversary::init_critic<float>(o.dim, cfg.filters, cfg.width, derive_seed(o.seed, 2));
    std::vector<ad::Tensor<float>*> params;
    for (auto& [name, t] : critic.named()) params.push_back(t);
    trainer::Adam opt(params, cfg.lr);
    Rng data(derive_seed(o.seed, 3)), penalty(derive_seed(o.seed, 4));
    for (std::size_t step = 1; step <= steps; ++step) {
      const auto real = gaussian_cloud(data, o.batch, o.dim, o.mean, o.sd);
      const auto fake = gaussian_cloud(data, o.batch, o.dim, -o.mean, o.sd);
      {
        ad::Tape<float> tape;
        trainer::zero_grads(params);
        const auto l = wgan ? adversary::w_losses(critic, real, fake, cfg.lambda_gp, penalty)
                            : adversary::js_losses(critic, real, fake);
        ad::backward(tape, l.critic);
      }
      opt.step(params);
      after_step(critic, step);
    }
    return critic;
  };

  const auto js = train(o.js_steps, false, [](const auto&, std::size_t) {});
  {
    ad::NoGrad<float> ng;
    const auto dr = adversary::disc_D(js, eval_real), df = adversary::disc_D(js, eval_fake);
    std::size_t correct = 0;
    for (std::size_t i = 0; i < dr.numel(); ++i) correct += dr.at(i) > 0.5f ? 1 : 0;
    for (std::size_t i = 0; i < df.numel(); ++i) correct += df.at(i) < 0.5f ? 1 : 0;
    r.js_accuracy = static_cast<double>(correct) / static_cast<double>(dr.numel() + df.numel());
  }

  // Fixed interpolants for the gradient-norm probe.
  std::vector<float> xh(eval_real.numel());
  for (std::size_t i = 0; i < 500; ++i) {
    const float eps = static_cast<float>(eval_rng.uniform());
    for (std::size_t j = 0; j < o.dim; ++j)
      xh[i * o.dim + j] = eps * eval_real.at(i * o.dim + j) + (1 - eps) * eval_fake.at(i * o.dim + j);
  }
  const auto x_hat = ad::Tensor<float>::constant(eval_real.shape(), std::move(xh));

  train(o.w_steps, true, [&](const adversary::CriticParams<float>& c, std::size_t step) {
    {
      ad::NoGrad<float> ng;
      r.gap.push_back(ad::mean(adversary::critic_f(c, eval_real)).item() -
                      ad::mean(adversary::critic_f(c, eval_fake)).item());
    }
    if (step == o.probe_first) r.grad_dev_first = grad_norm_deviation(c, x_hat);
    if (step == o.w_steps) r.grad_dev_last = grad_norm_deviation(c, x_hat);
  });
  for (std::size_t w = 0; w + o.window <= r.gap.size(); w += o.window) {
    double sum = 0;
    for (std::size_t i = w; i < w + o.window; ++i) sum += r.gap[i];
    r.gap_windows.push_back(sum / static_cast<double>(o.window));
  }
  const std::size_t n = std::min(r.gap_windows.size(), o.rising_steps / o.window);
  r.gap_rising = n >= 2;
  for (std::size_t i = 1; i < n; ++i) r.gap_rising = r.gap_rising && r.gap_windows[i] > r.gap_windows[i - 1];
  return r;
}

}  // namespace twinlab::testkit
