#pragma once

// Discriminator / critic over encoder latents and the adversarial losses.
//
//   f(h) = w . relu(maxpool(conv1d(h)))
//
// The latent is read as a single-channel signal of length d; maxpool takes
// the maximum over all positions of each filter.

#include <cmath>
#include <cstdint>
#include <optional>
#include <vector>

#include "twinlab/autodiff.hpp"
#include "twinlab/error.hpp"
#include "twinlab/random.hpp"

namespace twinlab::adversary {

using ad::Tensor;

template <class T = float>
struct CriticParams {
  Tensor<T> filters;  // [F, k]
  Tensor<T> w;        // [F, 1]

  std::size_t num_filters() const { return filters.dim(0); }
  std::size_t width() const { return filters.dim(1); }

  std::vector<std::pair<std::string, Tensor<T>*>> named() { return {{"critic.filters", &filters}, {"critic.w", &w}}; }
};

// Filters ~ U(-1/sqrt(k), 1/sqrt(k)), w ~ U(-1/sqrt(F), 1/sqrt(F)).
template <class T = float>
CriticParams<T> init_critic(std::size_t latent_dim, std::size_t num_filters, std::size_t width, std::uint64_t seed) {
  if (num_filters < 1 || width < 1) throw ConfigError("critic: filters and width must be at least 1");
  if (width > latent_dim)
    throw ConfigError("critic: width " + std::to_string(width) + " exceeds latent dimension " +
                      std::to_string(latent_dim));
  Rng rng(seed);
  auto draw = [&](ad::Shape shape, double bound) {
    std::vector<T> v(ad::numel(shape));
    for (auto& x : v) x = static_cast<T>(rng.uniform(-bound, bound));
    return Tensor<T>::parameter(std::move(shape), std::move(v));
  };
  CriticParams<T> c;
  c.filters = draw({num_filters, width}, 1.0 / std::sqrt(static_cast<double>(width)));
  c.w = draw({num_filters, 1}, 1.0 / std::sqrt(static_cast<double>(num_filters)));
  return c;
}

template <class T>
CriticParams<T> clone(const CriticParams<T>& c) {
  CriticParams<T> d = c;
  for (auto& [name, t] : d.named())
    *t = Tensor<T>::parameter(t->shape(), std::vector<T>(t->data().begin(), t->data().end()));
  return d;
}

// Latents [batch, d] -> scores [batch, 1].
template <class T>
Tensor<T> critic_f(const CriticParams<T>& c, const Tensor<T>& h) {
  if (h.rank() != 2) throw ShapeError("critic_f: expected latents [batch, d], got " + ad::shape_str(h.shape()));
  if (c.width() > h.dim(1))
    throw ShapeError("critic_f: latent " + ad::shape_str(h.shape()) + " shorter than filters " +
                     ad::shape_str(c.filters.shape()));
  const std::size_t batch = h.dim(0), nf = c.num_filters();
  const Tensor<T> conv = ad::conv1d(h, c.filters);                // [batch, F, P]
  const Tensor<T> pooled = ad::maxpool1d(conv, conv.dim(2));      // [batch, F, 1]
  const Tensor<T> act = ad::relu(ad::reshape(pooled, {batch, nf}));
  return ad::matmul(act, c.w);
}

template <class T>
Tensor<T> disc_D(const CriticParams<T>& c, const Tensor<T>& h) {
  return ad::sigmoid(critic_f(c, h));
}

template <class T = float>
struct AdvLosses {
  Tensor<T> critic;     // minimized by the discriminator / critic
  Tensor<T> generator;  // minimized by the encoder
};

inline constexpr double kProbClamp = 1e-7;

template <class T>
void require_batches(const Tensor<T>& real, const Tensor<T>& fake) {
  if (real.rank() != 2 || fake.rank() != 2 || real.dim(0) == 0 || fake.dim(0) == 0)
    throw EmptyBatch("adversarial loss needs non-empty [batch, d] latents");
  if (real.dim(1) != fake.dim(1))
    throw ShapeError("adversarial loss: latent shapes " + ad::shape_str(real.shape()) + " vs " +
                     ad::shape_str(fake.shape()));
}

// d = -E[log D(real)] - E[log(1 - D(fake))], g = -E[log D(fake)].
template <class T>
AdvLosses<T> js_losses(const CriticParams<T>& c, const Tensor<T>& real, const Tensor<T>& fake) {
  require_batches(real, fake);
  const T lo = static_cast<T>(kProbClamp), hi = static_cast<T>(1 - kProbClamp);
  const Tensor<T> d_real = ad::clamp(disc_D(c, real), lo, hi);
  const Tensor<T> d_fake = ad::clamp(disc_D(c, fake), lo, hi);
  AdvLosses<T> l;
  const Tensor<T> one_minus_fake = ad::add_scalar(ad::scale(d_fake, T(-1)), T(1));
  l.critic = ad::scale(ad::add(ad::mean(ad::log(d_real)), ad::mean(ad::log(one_minus_fake))), T(-1));
  l.generator = ad::scale(ad::mean(ad::log(d_fake)), T(-1));
  return l;
}

// E[(||grad_x f(x_hat)|| - 1)^2] at x_hat = eps * real + (1 - eps) * fake,
// one eps ~ U(0, 1) per row. Differentiable w.r.t. whatever `f` closes over.
// Without an active tape the value is computed under a scratch one.
template <class T, class F>
Tensor<T> gradient_penalty_fn(F&& f, const Tensor<T>& real, const Tensor<T>& fake, Rng& rng) {
  require_batches(real, fake);
  std::optional<ad::Tape<T>> scratch;
  if (ad::Tape<T>::current() == nullptr) scratch.emplace();
  if (real.dim(0) != fake.dim(0))
    throw ShapeError("gradient_penalty: batch sizes " + ad::shape_str(real.shape()) + " vs " +
                     ad::shape_str(fake.shape()));
  const std::size_t batch = real.dim(0), d = real.dim(1);
  std::vector<T> x(batch * d);
  const auto r = real.data(), g = fake.data();
  for (std::size_t b = 0; b < batch; ++b) {
    const T eps = static_cast<T>(rng.uniform());
    for (std::size_t j = 0; j < d; ++j) x[b * d + j] = eps * r[b * d + j] + (T(1) - eps) * g[b * d + j];
  }
  const Tensor<T> x_hat = Tensor<T>::parameter({batch, d}, std::move(x));
  const Tensor<T> grad = ad::input_gradient(ad::sum(f(x_hat)), x_hat);
  const Tensor<T> norms = ad::sqrt(ad::add_scalar(ad::row_sum(ad::square(grad)), T(1e-12)));
  return ad::mean(ad::square(ad::add_scalar(norms, T(-1))));
}

template <class T>
Tensor<T> gradient_penalty(const CriticParams<T>& c, const Tensor<T>& real, const Tensor<T>& fake, Rng& rng) {
  return gradient_penalty_fn([&](const Tensor<T>& x) { return critic_f(c, x); }, real, fake, rng);
}

// critic = E[f(fake)] - E[f(real)] + lambda * GP, g = -E[f(fake)].
// The penalty term is only built when lambda > 0.
template <class T>
AdvLosses<T> w_losses(const CriticParams<T>& c, const Tensor<T>& real, const Tensor<T>& fake, double lambda,
                      Rng& rng) {
  require_batches(real, fake);
  if (lambda < 0) throw ConfigError("w_losses: lambda must be non-negative");
  const Tensor<T> f_real = ad::mean(critic_f(c, real));
  const Tensor<T> f_fake = ad::mean(critic_f(c, fake));
  AdvLosses<T> l;
  l.critic = ad::sub(f_fake, f_real);
  if (lambda > 0)
    l.critic = ad::add(l.critic, ad::scale(gradient_penalty(c, ad::detach(real), ad::detach(fake), rng),
                                           static_cast<T>(lambda)));
  l.generator = ad::scale(f_fake, T(-1));
  return l;
}

}  // namespace twinlab::adversary
