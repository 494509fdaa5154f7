// SPDX-License-Identifier: Apache-2.0
#include <doctest.h>

#include <cmath>
#include <functional>
#include <map>
#include <random>
#include <string>
#include <vector>

#include "oracles.hpp"
#include "xasr/autodiff.hpp"
#include "xasr/optim.hpp"
#include "xasr/params.hpp"
#include "xasr/rng.hpp"

using namespace xasr;

namespace {

TensorD random_tensor(std::vector<std::size_t> shape, Rng& rng, double scale = 1.0) {
  TensorD t(std::move(shape));
  for (auto& v : t.values()) v = rng.uniform_real(-scale, scale);
  return t;
}

using Inputs = std::map<std::string, TensorD>;
using Builder = std::function<ValueT<double>(TapeD&, std::map<std::string, ValueT<double>>&)>;

/// Evaluate the builder's scalar output for given inputs on a fresh tape.
double eval_scalar(const Inputs& inputs, const Builder& build) {
  TapeD tape;
  std::map<std::string, ValueT<double>> vals;
  for (const auto& [name, t] : inputs) vals[name] = tape.param(name, t);
  ValueT<double> out = build(tape, vals);
  return tape.value(out)[0];
}

/// Reverse-mode gradients vs central finite differences for every input.
void check_against_fd(const Inputs& inputs, const Builder& build, double tol = 1e-4) {
  TapeD tape;
  std::map<std::string, ValueT<double>> vals;
  for (const auto& [name, t] : inputs) vals[name] = tape.param(name, t);
  ValueT<double> out = build(tape, vals);
  auto grads = tape.gradients(out);

  for (const auto& [name, t] : inputs) {
    Inputs probe = inputs;
    auto fd = oracles::finite_difference(
        [&](const TensorD& x) {
          probe[name] = x;
          return eval_scalar(probe, build);
        },
        t);
    const double err = oracles::max_relative_error(fd, grads.at(name));
    INFO("input ", name, " relative error ", err);
    CHECK(err < tol);
  }
}

/// Weighted sum with fixed pseudo-random coefficients, so every output
/// element's gradient is exercised.
ValueT<double> project_to_scalar(TapeD& tape, ValueT<double> v, std::uint64_t salt) {
  const auto& val = tape.value(v);
  TensorD coeff(val.shape());
  Rng rng(derive_seed(salt, "proj"));
  for (auto& c : coeff.values()) c = rng.uniform_real(-1.0, 1.0);
  return sum_all(tape, mul(tape, v, tape.constant(coeff)));
}

}  // namespace

TEST_CASE("affine matches hand matrix multiply") {
  Tape tape;
  auto x = tape.constant(Tensor({1, 2}, {1, 2}));
  auto w = tape.param("w", Tensor({2, 2}, {1, 0, 0, 1}));
  auto b = tape.param("b", Tensor({2}, {0, 0}));
  auto y = affine(tape, x, w, b);
  CHECK(tape.value(y).at(0, 0) == doctest::Approx(1));
  CHECK(tape.value(y).at(0, 1) == doctest::Approx(2));

  Tape tape2;
  auto x2 = tape2.constant(Tensor({1, 2}, {1, 1}));
  auto w2 = tape2.param("w", Tensor({2, 2}, {2, 3, 4, 5}));
  auto b2 = tape2.param("b", Tensor({2}, {1, 1}));
  auto y2 = affine(tape2, x2, w2, b2);
  CHECK(tape2.value(y2).at(0, 0) == doctest::Approx(7));
  CHECK(tape2.value(y2).at(0, 1) == doctest::Approx(9));
}

TEST_CASE("affine rejects mismatched shapes") {
  Tape tape;
  auto x = tape.constant(Tensor({4, 2}));
  auto w = tape.constant(Tensor({3, 2}));
  auto b = tape.constant(Tensor({2}));
  CHECK_THROWS_AS(affine(tape, x, w, b), DimensionError);
}

TEST_CASE("softmax basics") {
  Tensor u = softmax(Tensor({3}, {0, 0, 0}));
  for (std::size_t i = 0; i < 3; ++i) CHECK(u[i] == doctest::Approx(1.0 / 3));

  Tensor big = softmax(Tensor({2}, {1000, 1000}));
  CHECK(big[0] == doctest::Approx(0.5));
  CHECK(big[1] == doctest::Approx(0.5));
  CHECK(big.all_finite());

  Tensor ln3 = softmax(Tensor({2}, {0.0f, std::log(3.0f)}));
  CHECK(ln3[0] == doctest::Approx(0.25));
  CHECK(ln3[1] == doctest::Approx(0.75));
}

TEST_CASE("softmax sums to one and is shift invariant") {
  Rng rng(11);
  for (int trial = 0; trial < 50; ++trial) {
    const std::size_t n = 1 + trial % 12;
    Tensor logits({n});
    for (auto& v : logits.values()) v = rng.uniform_real(-20, 20);
    Tensor s = softmax(logits);
    float sum = 0;
    for (std::size_t i = 0; i < n; ++i) {
      CHECK(s[i] > 0.0f);
      sum += s[i];
    }
    CHECK(std::abs(sum - 1.0f) < 1e-6f);

    Tensor shifted = logits;
    for (auto& v : shifted.values()) v += 37.5f;
    Tensor s2 = softmax(shifted);
    for (std::size_t i = 0; i < n; ++i) CHECK(s2[i] == doctest::Approx(s[i]).epsilon(1e-5));
  }
}

TEST_CASE("conv length formula: two stacked stride-2 convs") {
  CHECK(encoder_out_len(96) == 24);
  CHECK(encoder_out_len(10) == 3);
  CHECK(encoder_out_len(1) == 1);
  for (std::size_t t = 1; t <= 4000; ++t) {
    CHECK(encoder_out_len(t) == (conv_out_len(t) + 1) / 2);
    CHECK(conv_out_len(t) == (t + 1) / 2);
  }
}

TEST_CASE("conv2d: all-zero input gives all-bias output, zero when no bias") {
  Rng rng(3);
  TensorD kernels = random_tensor({2, 1, 3, 3}, rng);
  TensorD zero_in({5, 1, 1, 4});
  TensorD bias({2}, {0.25, -0.5});
  TensorD out({conv_out_len(5), 1, 2, conv_out_len(4)});
  xasr::detail::conv2d_forward(zero_in, kernels, bias, out);
  for (std::size_t t = 0; t < out.dim(0); ++t)
    for (std::size_t c = 0; c < 2; ++c)
      for (std::size_t w = 0; w < out.dim(3); ++w)
        CHECK(out[((t * 1 + 0) * 2 + c) * out.dim(3) + w] ==
              doctest::Approx(bias[c]));

  // spec-layout overload without bias
  TensorD plain = conv2d(TensorD({1, 5, 4}), kernels);
  for (const auto& v : plain.values()) CHECK(v == 0.0);
}

TEST_CASE("lstm_step: zero input, state and params give zero output") {
  Tape tape;
  LstmWeights<float> w{tape.param("wx", Tensor({3, 8})), tape.param("wh", Tensor({2, 8})),
                       tape.param("b", Tensor({8}))};
  auto x = tape.constant(Tensor({1, 3}));
  auto h = tape.constant(Tensor({1, 2}));
  auto c = tape.constant(Tensor({1, 2}));
  auto [h2, c2] = lstm_step(tape, x, h, c, w);
  for (const auto& v : tape.value(h2).values()) CHECK(v == 0.0f);
  for (const auto& v : tape.value(c2).values()) CHECK(v == 0.0f);
}

TEST_CASE("lstm_step matches scalar-by-scalar oracle and |h| <= 1") {
  Rng rng(17);
  const std::size_t in_dim = 3, k = 4;
  TensorD wx = random_tensor({in_dim, 4 * k}, rng);
  TensorD wh = random_tensor({k, 4 * k}, rng);
  TensorD b = random_tensor({4 * k}, rng);
  TensorD x = random_tensor({1, in_dim}, rng, 2.0);
  TensorD h = random_tensor({1, k}, rng);
  TensorD c = random_tensor({1, k}, rng);

  TapeD tape;
  LstmWeights<double> w{tape.param("wx", wx), tape.param("wh", wh), tape.param("b", b)};
  auto [h2, c2] = lstm_step(tape, tape.constant(x), tape.constant(h), tape.constant(c), w);

  std::vector<std::vector<double>> wx_rows(in_dim, std::vector<double>(4 * k));
  std::vector<std::vector<double>> wh_rows(k, std::vector<double>(4 * k));
  for (std::size_t i = 0; i < in_dim; ++i)
    for (std::size_t j = 0; j < 4 * k; ++j) wx_rows[i][j] = wx.at(i, j);
  for (std::size_t i = 0; i < k; ++i)
    for (std::size_t j = 0; j < 4 * k; ++j) wh_rows[i][j] = wh.at(i, j);
  auto slow = oracles::slow_lstm_step(x.values(), h.values(), c.values(), wx_rows, wh_rows,
                                      b.values());
  for (std::size_t j = 0; j < k; ++j) {
    CHECK(tape.value(h2).at(0, j) == doctest::Approx(slow.h[j]).epsilon(1e-12));
    CHECK(tape.value(c2).at(0, j) == doctest::Approx(slow.c[j]).epsilon(1e-12));
    CHECK(std::abs(tape.value(h2).at(0, j)) <= 1.0);
  }
}

TEST_CASE("compute_gradients: f(x) = x^2 at x = 3 gives 6") {
  TapeD tape;
  auto x = tape.param("x", TensorD::scalar(3.0));
  auto y = sum_all(tape, mul(tape, x, x));
  auto grads = tape.gradients(y);
  CHECK(grads.at("x")[0] == doctest::Approx(6.0));
}

TEST_CASE("compute_gradients: softmax cross-entropy closed form") {
  // loss = -sum target_j * log_softmax(x)_j; gradient must be softmax(x) - target
  TensorD logits({1, 4}, {0.2, -1.3, 0.7, 0.1});
  TensorD target({1, 4}, {0.25, 0.25, 0.25, 0.25});
  TapeD tape;
  auto x = tape.param("x", logits);
  auto ls = log_softmax_rows(tape, x);
  auto nll = scale(tape, sum_all(tape, mul(tape, ls, tape.constant(target))), -1.0);
  auto grads = tape.gradients(nll);
  TensorD sm = softmax(logits.reshaped({4}));
  for (std::size_t j = 0; j < 4; ++j) {
    CHECK(grads.at("x")[j] == doctest::Approx(sm[j] - target[j]).epsilon(1e-10));
  }
}

TEST_CASE("compute_gradients: unused parameter gets exact zeros") {
  TapeD tape;
  auto x = tape.param("x", TensorD::scalar(2.0));
  [[maybe_unused]] auto dead = tape.param("dead", TensorD({3}, {1, 2, 3}));
  auto y = mul(tape, x, x);
  auto grads = tape.gradients(sum_all(tape, y));
  for (const auto& v : grads.at("dead").values()) CHECK(v == 0.0);
}

TEST_CASE("compute_gradients rejects non-scalar loss and double backward") {
  TapeD tape;
  auto x = tape.param("x", TensorD({2}, {1, 2}));
  CHECK_THROWS_AS(tape.gradients(x), UsageError);
  auto s = sum_all(tape, x);
  CHECK_NOTHROW(tape.gradients(s));
  CHECK_THROWS_AS(tape.gradients(s), UsageError);
}

TEST_CASE("finite differences: elementwise, linear and shape ops") {
  Rng rng(23);
  for (std::uint64_t trial = 0; trial < 8; ++trial) {
    Inputs in;
    in["a"] = random_tensor({3, 4}, rng);
    in["b"] = random_tensor({3, 4}, rng);
    check_against_fd(in, [trial](TapeD& t, auto& v) {
      auto m = mul(t, tanh_op(t, v["a"]), sigmoid_op(t, v["b"]));
      auto s = add(t, m, sub(t, v["a"], scale(t, v["b"], 0.7)));
      return project_to_scalar(t, s, trial);
    });
  }
}

TEST_CASE("finite differences: matmul + bias + activations chain") {
  Rng rng(29);
  for (std::uint64_t trial = 0; trial < 6; ++trial) {
    Inputs in;
    in["x"] = random_tensor({2, 3}, rng);
    in["w"] = random_tensor({3, 5}, rng);
    in["b"] = random_tensor({5}, rng);
    check_against_fd(in, [trial](TapeD& t, auto& v) {
      return project_to_scalar(t, tanh_op(t, affine(t, v["x"], v["w"], v["b"])), trial + 100);
    });
  }
}

TEST_CASE("finite differences: softmax family") {
  Rng rng(31);
  Inputs in;
  in["x"] = random_tensor({3, 6}, rng, 2.0);
  check_against_fd(in, [](TapeD& t, auto& v) {
    return project_to_scalar(t, softmax_rows(t, v["x"]), 7);
  });
  check_against_fd(in, [](TapeD& t, auto& v) {
    return project_to_scalar(t, log_softmax_rows(t, v["x"]), 8);
  });
  check_against_fd(in, [](TapeD& t, auto& v) {
    return project_to_scalar(t, masked_softmax_rows(t, v["x"], {6, 3, 1}), 9);
  });
}

TEST_CASE("finite differences: cross entropy with mask") {
  Rng rng(37);
  Inputs in;
  in["x"] = random_tensor({5, 4}, rng, 2.0);
  std::vector<std::size_t> targets{1, 3, 0, 2, 2};
  std::vector<std::uint8_t> mask{1, 1, 0, 1, 1};
  check_against_fd(in, [&](TapeD& t, auto& v) {
    return cross_entropy_masked(t, v["x"], targets, mask);
  });
}

TEST_CASE("finite differences: conv2d") {
  Rng rng(41);
  Inputs in;
  in["x"] = random_tensor({5, 2, 2, 6}, rng);
  in["k"] = random_tensor({3, 2, 3, 3}, rng);
  in["bias"] = random_tensor({3}, rng);
  check_against_fd(in, [](TapeD& t, auto& v) {
    return project_to_scalar(t, conv2d_s2(t, v["x"], v["k"], v["bias"]), 13);
  });
}

TEST_CASE("finite differences: sequence plumbing ops") {
  Rng rng(43);
  Inputs in;
  in["seq"] = random_tensor({4, 3, 5}, rng);
  std::vector<std::size_t> lengths{4, 2, 3};
  check_against_fd(in, [&](TapeD& t, auto& v) {
    auto rev = reverse_valid(t, v["seq"], lengths);
    auto masked = mask_time(t, rev, lengths);
    auto s0 = slice_time(t, masked, 0);
    auto s2 = slice_time(t, masked, 2);
    return project_to_scalar(t, concat_cols(t, s0, s2), 15);
  });
  check_against_fd(in, [&](TapeD& t, auto& v) {
    auto a = slice_time(t, v["seq"], 1);
    auto b = slice_time(t, v["seq"], 3);
    auto stacked = stack_time(t, {a, b, a});
    return project_to_scalar(t, stacked, 16);
  });
}

TEST_CASE("finite differences: gather ops") {
  Rng rng(47);
  Inputs in;
  in["table"] = random_tensor({6, 4}, rng);
  check_against_fd(in, [](TapeD& t, auto& v) {
    auto e = embedding_gather(t, v["table"], {0, 5, 2, 2});
    return project_to_scalar(t, e, 17);
  });
  in.clear();
  in["x"] = random_tensor({4, 3}, rng);
  check_against_fd(in, [](TapeD& t, auto& v) {
    auto r = select_rows(t, v["x"], {3, 3, 0, 1});
    return project_to_scalar(t, r, 18);
  });
}

TEST_CASE("finite differences: attention kernels") {
  Rng rng(53);
  Inputs in;
  in["ps"] = random_tensor({5, 2, 3}, rng);
  in["qp"] = random_tensor({2, 3}, rng);
  in["v"] = random_tensor({3}, rng);
  in["states"] = random_tensor({5, 2, 4}, rng);
  std::vector<std::size_t> lengths{5, 3};
  check_against_fd(in, [&](TapeD& t, auto& v) {
    auto scores = attention_scores(t, v["ps"], v["qp"], v["v"]);
    auto weights = masked_softmax_rows(t, scores, lengths);
    auto ctx = attention_context(t, weights, v["states"]);
    return project_to_scalar(t, ctx, 19);
  });
}

TEST_CASE("finite differences: lstm step") {
  Rng rng(59);
  Inputs in;
  in["wx"] = random_tensor({3, 8}, rng);
  in["wh"] = random_tensor({2, 8}, rng);
  in["b"] = random_tensor({8}, rng);
  in["x"] = random_tensor({2, 3}, rng);
  in["h"] = random_tensor({2, 2}, rng);
  in["c"] = random_tensor({2, 2}, rng);
  check_against_fd(in, [](TapeD& t, auto& v) {
    LstmWeights<double> w{v["wx"], v["wh"], v["b"]};
    auto [h2, c2] = lstm_step(t, v["x"], v["h"], v["c"], w);
    return add(t, project_to_scalar(t, h2, 20), project_to_scalar(t, c2, 21));
  });
}

TEST_CASE("optimizer_step: zero gradients leave parameters unchanged") {
  ParameterSet params;
  params.add("w", Tensor({2, 2}, {1, 2, 3, 4}), ParamRole::Encoder);
  Adam adam;
  std::unordered_map<std::string, Tensor> grads{{"w", Tensor({2, 2})}};
  adam.step(params, grads);
  adam.step(params, grads);
  CHECK(params.tensor("w").values() == std::vector<float>{1, 2, 3, 4});
}

TEST_CASE("optimizer_step: first step matches hand-evaluated Adam") {
  ParameterSet params;
  params.add("w", Tensor::scalar(0.5f), ParamRole::Encoder);
  AdamConfig cfg;
  cfg.lr = 0.1;
  Adam adam(cfg);
  std::unordered_map<std::string, Tensor> grads{{"w", Tensor::scalar(1.0f)}};
  adam.step(params, grads);
  const double want = oracles::adam_first_step(0.5, 1.0, 0.1, 0.9, 0.999, 1e-8);
  CHECK(params.tensor("w")[0] == doctest::Approx(want).epsilon(1e-6));
  CHECK(params.tensor("w")[0] == doctest::Approx(0.4).epsilon(1e-4));
}

TEST_CASE("optimizer_step: missing gradient key is a usage error") {
  ParameterSet params;
  params.add("w", Tensor::scalar(0.5f), ParamRole::Encoder);
  Adam adam;
  std::unordered_map<std::string, Tensor> grads;
  CHECK_THROWS_AS(adam.step(params, grads), UsageError);
}

TEST_CASE("optimizer_step: identical runs are bit-identical") {
  auto run = [] {
    Rng rng(7);
    ParameterSet params;
    Tensor w({4, 4});
    for (auto& v : w.values()) v = static_cast<float>(rng.uniform_real(-1, 1));
    params.add("w", w, ParamRole::Encoder);
    Adam adam;
    for (int step = 0; step < 25; ++step) {
      Tensor g({4, 4});
      for (auto& v : g.values()) v = static_cast<float>(rng.uniform_real(-1, 1));
      std::unordered_map<std::string, Tensor> grads{{"w", g}};
      adam.step(params, grads);
    }
    return params.tensor("w").values();
  };
  CHECK(run() == run());
}

TEST_CASE("bidirectional composition: backward pass equals forward on reversed input") {
  // constructive definition: BLSTM = [fw(x); rev(fw(rev(x)))]
  Rng rng(61);
  const std::size_t t_len = 5, b = 2, d = 3, k = 2;
  TensorD seq = random_tensor({t_len, b, d}, rng);
  std::vector<std::size_t> lengths{5, 3};

  auto run_forward = [&](TapeD& tape, ValueT<double> x, const LstmWeights<double>& w) {
    auto h = tape.constant(TensorD({b, k}));
    auto c = tape.constant(TensorD({b, k}));
    std::vector<ValueT<double>> outs;
    for (std::size_t t = 0; t < t_len; ++t) {
      auto xt = slice_time(tape, x, t);
      auto [h2, c2] = lstm_step(tape, xt, h, c, w);
      h = h2;
      c = c2;
      outs.push_back(h);
    }
    return stack_time(tape, outs);
  };

  TapeD tape;
  LstmWeights<double> w{tape.param("wx", random_tensor({d, 4 * k}, rng)),
                        tape.param("wh", random_tensor({k, 4 * k}, rng)),
                        tape.param("b", random_tensor({4 * k}, rng))};
  auto x = tape.constant(seq);
  auto bw_states = reverse_valid(tape, run_forward(tape, reverse_valid(tape, x, lengths), w),
                                 lengths);

  // manual per-element backward recursion over the valid range
  for (std::size_t bb = 0; bb < b; ++bb) {
    std::vector<double> h(k, 0.0), c(k, 0.0);
    std::vector<std::vector<double>> wx_rows(d, std::vector<double>(4 * k));
    std::vector<std::vector<double>> wh_rows(k, std::vector<double>(4 * k));
    for (std::size_t i = 0; i < d; ++i)
      for (std::size_t j = 0; j < 4 * k; ++j) wx_rows[i][j] = tape.value(w.wx).at(i, j);
    for (std::size_t i = 0; i < k; ++i)
      for (std::size_t j = 0; j < 4 * k; ++j) wh_rows[i][j] = tape.value(w.wh).at(i, j);
    const std::size_t len = lengths[bb];
    for (std::size_t step = 0; step < len; ++step) {
      const std::size_t t = len - 1 - step;  // walk the sequence backwards
      std::vector<double> xt(d);
      for (std::size_t j = 0; j < d; ++j) xt[j] = seq[(t * b + bb) * d + j];
      auto r = oracles::slow_lstm_step(xt, h, c, wx_rows, wh_rows, tape.value(w.b).values());
      h = r.h;
      c = r.c;
      for (std::size_t j = 0; j < k; ++j) {
        CHECK(tape.value(bw_states)[(t * b + bb) * k + j] ==
              doctest::Approx(h[j]).epsilon(1e-10));
      }
    }
  }
}
