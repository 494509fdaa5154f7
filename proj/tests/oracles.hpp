// SPDX-License-Identifier: Apache-2.0
//
// Independent reference implementations used as test oracles. Everything in
// this header is deliberately written the slow, obvious way and must stay
// independent of the implementation paths it checks.
#pragma once

#include <algorithm>
#include <cmath>
#include <complex>
#include <functional>
#include <map>
#include <string>
#include <vector>

#include "xasr/tensor.hpp"

namespace oracles {

/// Central finite differences of a scalar function of one tensor input.
inline xasr::TensorD finite_difference(
    const std::function<double(const xasr::TensorD&)>& f, const xasr::TensorD& x,
    double h = 1e-5) {
  xasr::TensorD grad(x.shape());
  xasr::TensorD probe = x;
  for (std::size_t i = 0; i < x.size(); ++i) {
    const double orig = probe[i];
    probe[i] = orig + h;
    const double fp = f(probe);
    probe[i] = orig - h;
    const double fm = f(probe);
    probe[i] = orig;
    grad[i] = (fp - fm) / (2.0 * h);
  }
  return grad;
}

/// Elementwise relative error, max over elements.
inline double max_relative_error(const xasr::TensorD& a, const xasr::TensorD& b) {
  double worst = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    const double denom = std::max({std::abs(a[i]), std::abs(b[i]), 1e-8});
    worst = std::max(worst, std::abs(a[i] - b[i]) / denom);
  }
  return worst;
}

/// Exponential-time recursive edit distance (unit costs).
inline std::size_t slow_edit_distance(const std::vector<std::string>& ref,
                                      const std::vector<std::string>& hyp,
                                      std::size_t i = 0, std::size_t j = 0) {
  if (i == ref.size()) return hyp.size() - j;
  if (j == hyp.size()) return ref.size() - i;
  if (ref[i] == hyp[j]) return slow_edit_distance(ref, hyp, i + 1, j + 1);
  const std::size_t sub = slow_edit_distance(ref, hyp, i + 1, j + 1);
  const std::size_t del = slow_edit_distance(ref, hyp, i + 1, j);
  const std::size_t ins = slow_edit_distance(ref, hyp, i, j + 1);
  return 1 + std::min({sub, del, ins});
}

/// Direct DFT magnitude-squared at one bin; oracle for the FFT used in the
/// log-mel frontend.
inline double dft_power(const std::vector<double>& x, std::size_t bin, std::size_t n) {
  std::complex<double> acc(0.0, 0.0);
  for (std::size_t i = 0; i < x.size(); ++i) {
    const double ang = -2.0 * M_PI * static_cast<double>(bin) * static_cast<double>(i) / n;
    acc += x[i] * std::complex<double>(std::cos(ang), std::sin(ang));
  }
  return std::norm(acc);
}

/// Scalar-by-scalar LSTM cell evaluation with unpacked weights, independent
/// of the tape op. Gate order i, f, g, o.
struct SlowLstmResult {
  std::vector<double> h;
  std::vector<double> c;
};
inline SlowLstmResult slow_lstm_step(const std::vector<double>& x,
                                     const std::vector<double>& h,
                                     const std::vector<double>& c,
                                     const std::vector<std::vector<double>>& wx,
                                     const std::vector<std::vector<double>>& wh,
                                     const std::vector<double>& b) {
  const std::size_t k = h.size();
  auto gate = [&](std::size_t g, std::size_t j) {
    double acc = b[g * k + j];
    for (std::size_t i = 0; i < x.size(); ++i) acc += x[i] * wx[i][g * k + j];
    for (std::size_t i = 0; i < k; ++i) acc += h[i] * wh[i][g * k + j];
    return acc;
  };
  auto sigmoid = [](double v) { return 1.0 / (1.0 + std::exp(-v)); };
  SlowLstmResult out;
  out.h.resize(k);
  out.c.resize(k);
  for (std::size_t j = 0; j < k; ++j) {
    const double gi = sigmoid(gate(0, j));
    const double gf = sigmoid(gate(1, j));
    const double gg = std::tanh(gate(2, j));
    const double go = sigmoid(gate(3, j));
    out.c[j] = gf * c[j] + gi * gg;
    out.h[j] = go * std::tanh(out.c[j]);
  }
  return out;
}

/// One hand-evaluated Adam update for a scalar parameter at step t=1.
inline double adam_first_step(double param, double grad, double lr, double beta1,
                              double beta2, double eps) {
  const double m = (1.0 - beta1) * grad;
  const double v = (1.0 - beta2) * grad * grad;
  const double mhat = m / (1.0 - beta1);
  const double vhat = v / (1.0 - beta2);
  return param - lr * mhat / (std::sqrt(vhat) + eps);
}

}  // namespace oracles
