#pragma once

#include <cmath>
#include <cstdint>
#include <vector>

#include "bdlab/errors.hpp"
#include "bdlab/tensor.hpp"

namespace bdlab {

// Adam with bias correction. Moment arrays are laid out parallel to the
// parameter list handed to init(). ascent=true moves parameters in the
// +gradient direction (used by the pattern-estimation step).
template <typename T>
struct AdamStateT {
  int64_t step_count = 0;
  T lr = T(1e-3);
  T beta1 = T(0.9);
  T beta2 = T(0.999);
  T eps = T(1e-8);
  std::vector<std::vector<T>> first_moment;
  std::vector<std::vector<T>> second_moment;

  void init(const std::vector<TensorT<T>*>& params) {
    validate();
    step_count = 0;
    first_moment.clear();
    second_moment.clear();
    for (const auto* p : params) {
      first_moment.emplace_back(p->data.size(), T(0));
      second_moment.emplace_back(p->data.size(), T(0));
    }
  }

  void validate() const {
    if (!(lr > T(0))) throw ValidationError("adam: lr must be > 0");
    if (!(beta1 >= T(0) && beta1 < T(1))) throw ValidationError("adam: beta1 must be in [0,1)");
    if (!(beta2 >= T(0) && beta2 < T(1))) throw ValidationError("adam: beta2 must be in [0,1)");
    if (!(eps > T(0))) throw ValidationError("adam: eps must be > 0");
  }
};

using AdamState = AdamStateT<float>;

template <typename T>
void adam_step(const std::vector<TensorT<T>*>& params, AdamStateT<T>& state, bool ascent = false) {
  if (params.size() != state.first_moment.size())
    throw ShapeError("adam_step: state holds " + std::to_string(state.first_moment.size()) +
                     " moment arrays for " + std::to_string(params.size()) + " params");
  state.step_count += 1;
  const T b1 = state.beta1, b2 = state.beta2;
  const T corr1 = T(1) - static_cast<T>(std::pow(static_cast<double>(b1), static_cast<double>(state.step_count)));
  const T corr2 = T(1) - static_cast<T>(std::pow(static_cast<double>(b2), static_cast<double>(state.step_count)));
  const T sign = ascent ? T(1) : T(-1);
  for (size_t k = 0; k < params.size(); ++k) {
    TensorT<T>& p = *params[k];
    if (p.grad.size() != p.data.size())
      throw ShapeError("adam_step: param " + std::to_string(k) + " has no gradient");
    auto& m = state.first_moment[k];
    auto& v = state.second_moment[k];
    if (m.size() != p.data.size())
      throw ShapeError("adam_step: moment shape mismatch on param " + std::to_string(k));
    for (size_t i = 0; i < p.data.size(); ++i) {
      const T g = p.grad[i];
      m[i] = b1 * m[i] + (T(1) - b1) * g;
      v[i] = b2 * v[i] + (T(1) - b2) * g * g;
      const T mhat = m[i] / corr1;
      const T vhat = v[i] / corr2;
      p.data[i] += sign * state.lr * mhat / (std::sqrt(vhat) + state.eps);
    }
  }
}

}  // namespace bdlab
