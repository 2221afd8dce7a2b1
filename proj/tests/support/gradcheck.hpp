#pragma once

// Central finite-difference oracle. Test-only: it touches nothing but leaf
// values and the public forward ops, so it stays independent of the
// backward implementations it checks.

#include <algorithm>
#include <cmath>
#include <functional>
#include <sstream>
#include <string>
#include <vector>

#include "twinlab/autodiff.hpp"

namespace twinlab::testkit {

struct GradCheckResult {
  double max_rel_error = 0.0;
  std::size_t checked = 0;
  std::string worst;
};

// Relative error with a small-magnitude guard: |a - n| / max(|a|, |n|, floor).
// Below `floor` both values are treated as magnitude `floor`, which keeps
// near-zero components from turning truncation noise into huge ratios.
inline double rel_error(double analytic, double numeric, double floor = 1e-4) {
  return std::abs(analytic - numeric) / std::max({std::abs(analytic), std::abs(numeric), floor});
}

// `loss` must rebuild the graph from the current leaf values on every call.
// At most `max_per_leaf` elements per leaf are probed (evenly strided).
template <class T>
GradCheckResult check_gradients(const std::function<ad::Tensor<T>()>& loss, std::vector<ad::Tensor<T>> leaves,
                                double eps = 1e-3, std::size_t max_per_leaf = 64) {
  std::vector<std::vector<double>> analytic;
  {
    ad::Tape<T> tape;
    for (auto& l : leaves) l.zero_grad();
    const ad::Tensor<T> value = loss();
    ad::backward(tape, value);
    for (auto& l : leaves) analytic.emplace_back(l.grad().begin(), l.grad().end());
  }
  GradCheckResult res;
  // Evaluated under a throwaway tape: losses built from input_gradient need one.
  auto eval = [&] {
    ad::Tape<T> scratch;
    return static_cast<double>(loss().item());
  };
  for (std::size_t li = 0; li < leaves.size(); ++li) {
    auto values = leaves[li].mutable_data();
    const std::size_t stride = std::max<std::size_t>(1, values.size() / max_per_leaf);
    for (std::size_t i = 0; i < values.size(); i += stride) {
      const T saved = values[i];
      values[i] = saved + static_cast<T>(eps);
      const double up = eval();
      values[i] = saved - static_cast<T>(eps);
      const double down = eval();
      values[i] = saved;
      const double numeric = (up - down) / (2 * eps);
      const double err = rel_error(analytic[li][i], numeric);
      ++res.checked;
      if (err > res.max_rel_error || res.worst.empty()) {
        if (err >= res.max_rel_error) {
          res.max_rel_error = err;
          std::ostringstream os;
          os << "leaf " << li << " element " << i << ": analytic " << analytic[li][i] << " numeric " << numeric;
          res.worst = os.str();
        }
      }
    }
  }
  return res;
}

}  // namespace twinlab::testkit
