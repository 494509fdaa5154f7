// SPDX-License-Identifier: Apache-2.0
//
// The shared ASR/ST architecture: a two-layer tanh DNN, two 3x3/stride-2
// convolutions, a three-layer BLSTM encoder, and a two-layer LSTM decoder
// with additive attention followed by a bottleneck projection and the
// vocabulary output layer.
#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <utility>
#include <vector>

#include "xasr/audio.hpp"
#include "xasr/autodiff.hpp"
#include "xasr/error.hpp"
#include "xasr/params.hpp"
#include "xasr/rng.hpp"
#include "xasr/text.hpp"

namespace xasr::model {

struct ModelConfig {
  std::size_t d0 = 80;    // input feature channels
  std::size_t d1 = 256;   // DNN hidden 1
  std::size_t d2 = 128;   // DNN hidden 2 (pre-conv feature width)
  std::size_t d3 = 512;   // BLSTM hidden per direction
  std::size_t d_o = 128;  // output bottleneck; also the embedding width
  std::size_t vocab_size = 0;
  std::size_t decoder_layers = 2;
  std::size_t encoder_blstm_layers = 3;

  std::size_t encoder_state_dim() const { return 2 * d3; }
  std::size_t decoder_hidden_dim() const { return 2 * d3; }
  std::size_t conv_flatten_dim() const { return 4 * d2; }
  std::size_t attention_dim() const { return d3; }
  std::size_t embed_dim() const { return d_o; }

  void validate() const;
  bool core_dims_equal(const ModelConfig& o) const {
    return d0 == o.d0 && d1 == o.d1 && d2 == o.d2 && d3 == o.d3 && d_o == o.d_o &&
           decoder_layers == o.decoder_layers &&
           encoder_blstm_layers == o.encoder_blstm_layers;
  }
};

/// Number of conv output channels; fixed by the architecture.
inline constexpr std::size_t kConvChannels = 16;

/// Uniform(-1/sqrt(fan_in), +1/sqrt(fan_in)) weights, zero biases, LSTM
/// forget-gate bias +1. Deterministic per (seed, parameter name).
ParameterSet init_parameters(const ModelConfig& cfg, std::uint64_t seed);

/// Fresh tensor for a single named parameter, same scheme as above. Used by
/// selective transfer to re-initialize replaced layers.
Tensor init_parameter_tensor(const ModelConfig& cfg, const std::string& name,
                             ParamRole role, std::uint64_t seed);

/// Declared shapes and roles of every parameter for a config.
std::vector<std::pair<std::string, ParamRole>> parameter_names(const ModelConfig& cfg);

/// Validate that a ParameterSet matches the config's declared shape table.
void check_parameters(const ModelConfig& cfg, const ParameterSet& params);

// --- batches -----------------------------------------------------------------

/// One training/decoding batch. Features are packed time-major
/// [Tmax x B x d0] with zero padding; token sequences carry bos/eos.
struct Batch {
  Tensor features;                                  // [Tmax x B x d0]
  std::vector<std::size_t> feature_lengths;         // valid frames per element
  std::vector<std::vector<std::size_t>> tokens;     // encoded targets, bos..eos
  std::vector<std::string> utterance_ids;
};

/// Pack per-utterance feature matrices into the padded time-major layout.
Tensor pack_features(const std::vector<const audio::FeatureMatrix*>& mats);

// --- graph building ----------------------------------------------------------

template <typename T>
struct EncoderStatesT {
  ValueT<T> states;                   // [Tc x B x 2*d3]
  std::vector<std::size_t> lengths;   // valid encoder frames per element
};

template <typename T>
struct DecoderStateT {
  // (h, c) per decoder layer, each [B x 2*d3]
  std::vector<std::pair<ValueT<T>, ValueT<T>>> layers;
};

/// Encoder states plus the attention projection computed once per sequence.
template <typename T>
struct AttentionContextT {
  EncoderStatesT<T> enc;
  ValueT<T> projected_states;  // [Tc x B x A]
};

struct TeacherForcedResult {
  double loss = 0.0;
  double token_accuracy = 0.0;
  std::size_t token_positions = 0;
};

/// A model bound to one tape: parameters are registered as tape leaves and
/// the graph builders below append operations. Pure given (inputs, params).
template <typename T>
class BoundModelT {
 public:
  BoundModelT(TapeT<T>& tape, const ModelConfig& cfg, const ParameterSetT<T>& params)
      : tape_(tape), cfg_(cfg) {
    cfg.validate();
    for (const auto& [name, entry] : params) {
      values_[name] = tape_.param(name, entry.tensor);
    }
  }

  const ModelConfig& config() const { return cfg_; }
  TapeT<T>& tape() { return tape_; }

  /// DNN -> conv x2 -> BLSTM stack. features [Tmax x B x d0], zero padded.
  EncoderStatesT<T> encode(const TensorT<T>& features,
                           std::vector<std::size_t> feature_lengths);

  /// Precompute the attention state projection for a decoded sequence.
  AttentionContextT<T> prepare_attention(EncoderStatesT<T> enc);

  DecoderStateT<T> initial_decoder_state(std::size_t batch) const;

  /// One decoder step: embedding -> LSTM1 -> attend -> LSTM2 (consuming the
  /// context) -> bottleneck -> vocab logits. Returns [B x vocab] logits.
  std::pair<ValueT<T>, DecoderStateT<T>> decode_step(
      const std::vector<std::size_t>& prev_tokens, const DecoderStateT<T>& state,
      const AttentionContextT<T>& attn, ValueT<T>* attention_weights_out = nullptr);

  /// Mean token cross entropy under teacher forcing, pad positions excluded.
  ValueT<T> teacher_forced_loss(const Batch& batch, CrossEntropyStats* stats);

 private:
  ValueT<T> p(const std::string& name) const {
    auto it = values_.find(name);
    if (it == values_.end()) throw UsageError("model parameter missing: " + name);
    return it->second;
  }
  ValueT<T> blstm_layer(ValueT<T> seq, const std::vector<std::size_t>& lengths,
                        const std::string& prefix);
  ValueT<T> lstm_direction(ValueT<T> seq, const std::string& prefix);

  TapeT<T>& tape_;
  ModelConfig cfg_;
  std::map<std::string, ValueT<T>> values_;
};

using BoundModel = BoundModelT<float>;

/// Convenience wrapper: run teacher-forced loss + gradients are left to the
/// caller (trainer) via the tape.
template <typename T>
TeacherForcedResult evaluate_teacher_forced(const ModelConfig& cfg,
                                            const ParameterSetT<T>& params,
                                            const Batch& batch);

// --- template implementations -------------------------------------------------

template <typename T>
EncoderStatesT<T> BoundModelT<T>::encode(const TensorT<T>& features,
                                         std::vector<std::size_t> feature_lengths) {
  if (features.rank() != 3 || features.dim(2) != cfg_.d0) {
    throw DimensionError("encode: features must be [T x B x d0], d0 = " +
                         std::to_string(cfg_.d0) + ", got " + features.shape_string());
  }
  if (feature_lengths.size() != features.dim(1)) {
    throw DimensionError("encode: lengths do not match batch size");
  }
  const std::size_t t_max = features.dim(0), b = features.dim(1);
  for (std::size_t len : feature_lengths) {
    if (len == 0 || len > t_max) throw DimensionError("encode: bad feature length");
  }

  ValueT<T> x = tape_.constant(features);

  // two-layer DNN with tanh
  ValueT<T> flat = reshape(tape_, x, {t_max * b, cfg_.d0});
  flat = tanh_op(tape_, affine(tape_, flat, p("encoder.dnn1.weight"), p("encoder.dnn1.bias")));
  flat = tanh_op(tape_, affine(tape_, flat, p("encoder.dnn2.weight"), p("encoder.dnn2.bias")));
  ValueT<T> seq = reshape(tape_, flat, {t_max, b, cfg_.d2});
  // zero the padding so the convolution sees the same neighborhood it would
  // for an unpadded utterance
  seq = mask_time(tape_, seq, feature_lengths);

  // conv stack, stride 2 in time and feature
  std::vector<std::size_t> len1(feature_lengths.size()), len2(feature_lengths.size());
  for (std::size_t i = 0; i < feature_lengths.size(); ++i) {
    len1[i] = conv_out_len(feature_lengths[i]);
    len2[i] = conv_out_len(len1[i]);
  }
  ValueT<T> c1 = reshape(tape_, seq, {t_max, b, 1, cfg_.d2});
  c1 = tanh_op(tape_, conv2d_s2(tape_, c1, p("encoder.conv1.kernels"), p("encoder.conv1.bias")));
  c1 = mask_time(tape_, c1, len1);
  ValueT<T> c2 = tanh_op(
      tape_, conv2d_s2(tape_, c1, p("encoder.conv2.kernels"), p("encoder.conv2.bias")));
  c2 = mask_time(tape_, c2, len2);

  const std::size_t t_out = tape_.value(c2).dim(0);
  const std::size_t flat_dim = tape_.value(c2).dim(2) * tape_.value(c2).dim(3);
  if (flat_dim != cfg_.conv_flatten_dim()) {
    throw DimensionError("encode: conv flatten width " + std::to_string(flat_dim) +
                         " != 4*d2 = " + std::to_string(cfg_.conv_flatten_dim()));
  }
  ValueT<T> states = reshape(tape_, c2, {t_out, b, flat_dim});

  for (std::size_t layer = 0; layer < cfg_.encoder_blstm_layers; ++layer) {
    states = blstm_layer(states, len2, "encoder.blstm" + std::to_string(layer));
  }
  return EncoderStatesT<T>{states, std::move(len2)};
}

template <typename T>
ValueT<T> BoundModelT<T>::lstm_direction(ValueT<T> seq, const std::string& prefix) {
  const auto& sv = tape_.value(seq);
  const std::size_t t_len = sv.dim(0), b = sv.dim(1);
  LstmWeights<T> w{p(prefix + ".wx"), p(prefix + ".wh"), p(prefix + ".bias")};
  ValueT<T> h = tape_.constant(TensorT<T>({b, cfg_.d3}));
  ValueT<T> c = tape_.constant(TensorT<T>({b, cfg_.d3}));
  std::vector<ValueT<T>> outs;
  outs.reserve(t_len);
  for (std::size_t t = 0; t < t_len; ++t) {
    auto [h2, c2] = lstm_step(tape_, slice_time(tape_, seq, t), h, c, w);
    h = h2;
    c = c2;
    outs.push_back(h);
  }
  return stack_time(tape_, outs);
}

template <typename T>
ValueT<T> BoundModelT<T>::blstm_layer(ValueT<T> seq, const std::vector<std::size_t>& lengths,
                                      const std::string& prefix) {
  const auto& sv = tape_.value(seq);
  const std::size_t t_len = sv.dim(0), b = sv.dim(1), d = sv.dim(2);
  ValueT<T> fw = lstm_direction(seq, prefix + ".fw");
  ValueT<T> bw = reverse_valid(
      tape_, lstm_direction(reverse_valid(tape_, seq, lengths), prefix + ".bw"), lengths);
  ValueT<T> fw2 = reshape(tape_, fw, {t_len * b, cfg_.d3});
  ValueT<T> bw2 = reshape(tape_, bw, {t_len * b, cfg_.d3});
  ValueT<T> cat = concat_cols(tape_, fw2, bw2);
  (void)d;
  return reshape(tape_, cat, {t_len, b, 2 * cfg_.d3});
}

template <typename T>
AttentionContextT<T> BoundModelT<T>::prepare_attention(EncoderStatesT<T> enc) {
  const auto& sv = tape_.value(enc.states);
  const std::size_t tc = sv.dim(0), b = sv.dim(1);
  ValueT<T> flat = reshape(tape_, enc.states, {tc * b, cfg_.encoder_state_dim()});
  ValueT<T> proj = matmul(tape_, flat, p("decoder.attention.state_proj.weight"));
  return AttentionContextT<T>{std::move(enc),
                              reshape(tape_, proj, {tc, b, cfg_.attention_dim()})};
}

template <typename T>
DecoderStateT<T> BoundModelT<T>::initial_decoder_state(std::size_t batch) const {
  DecoderStateT<T> st;
  auto& self = const_cast<BoundModelT<T>&>(*this);
  for (std::size_t layer = 0; layer < cfg_.decoder_layers; ++layer) {
    // zeros (paper is silent on the initial state)
    st.layers.emplace_back(self.tape_.constant(TensorT<T>({batch, cfg_.decoder_hidden_dim()})),
                           self.tape_.constant(TensorT<T>({batch, cfg_.decoder_hidden_dim()})));
  }
  return st;
}

template <typename T>
std::pair<ValueT<T>, DecoderStateT<T>> BoundModelT<T>::decode_step(
    const std::vector<std::size_t>& prev_tokens, const DecoderStateT<T>& state,
    const AttentionContextT<T>& attn, ValueT<T>* attention_weights_out) {
  for (std::size_t tok : prev_tokens) {
    if (tok >= cfg_.vocab_size) throw DataError("decode_step: token index out of range");
  }
  if (state.layers.size() != cfg_.decoder_layers) {
    throw UsageError("decode_step: decoder state layer count mismatch");
  }
  DecoderStateT<T> next;
  next.layers.resize(cfg_.decoder_layers);

  ValueT<T> emb = embedding_gather(tape_, p("decoder.embedding.weight"), prev_tokens);

  LstmWeights<T> w1{p("decoder.lstm1.wx"), p("decoder.lstm1.wh"), p("decoder.lstm1.bias")};
  auto [h1, c1] = lstm_step(tape_, emb, state.layers[0].first, state.layers[0].second, w1);
  next.layers[0] = {h1, c1};

  // additive attention, queried by the first LSTM layer's hidden state
  ValueT<T> qp = affine(tape_, h1, p("decoder.attention.query_proj.weight"),
                        p("decoder.attention.query_proj.bias"));
  ValueT<T> scores = attention_scores(tape_, attn.projected_states, qp,
                                      p("decoder.attention.score.weight"));
  ValueT<T> weights = masked_softmax_rows(tape_, scores, attn.enc.lengths);
  if (attention_weights_out) *attention_weights_out = weights;
  ValueT<T> context = attention_context(tape_, weights, attn.enc.states);

  ValueT<T> layer_in = concat_cols(tape_, h1, context);
  for (std::size_t layer = 1; layer < cfg_.decoder_layers; ++layer) {
    const std::string prefix = "decoder.lstm" + std::to_string(layer + 1);
    LstmWeights<T> w{p(prefix + ".wx"), p(prefix + ".wh"), p(prefix + ".bias")};
    auto [h, c] = lstm_step(tape_, layer_in, state.layers[layer].first,
                            state.layers[layer].second, w);
    next.layers[layer] = {h, c};
    layer_in = h;
  }

  ValueT<T> bottleneck =
      affine(tape_, layer_in, p("decoder.out_proj.weight"), p("decoder.out_proj.bias"));
  ValueT<T> logits =
      affine(tape_, bottleneck, p("decoder.vocab_proj.weight"), p("decoder.vocab_proj.bias"));
  return {logits, std::move(next)};
}

template <typename T>
ValueT<T> BoundModelT<T>::teacher_forced_loss(const Batch& batch, CrossEntropyStats* stats) {
  const std::size_t b = batch.feature_lengths.size();
  if (b == 0) throw UsageError("teacher_forced_loss: empty batch");
  if (batch.tokens.size() != b) throw DimensionError("teacher_forced_loss: tokens/batch mismatch");
  std::size_t max_len = 0;
  for (const auto& seq : batch.tokens) {
    if (seq.size() < 2 || seq.front() != text::kBos || seq.back() != text::kEos) {
      throw UsageError("teacher_forced_loss: target must begin with bos and end with eos");
    }
    max_len = std::max(max_len, seq.size());
  }

  TensorT<T> feats = batch.features.template cast<T>();
  EncoderStatesT<T> enc = encode(feats, batch.feature_lengths);
  AttentionContextT<T> attn = prepare_attention(std::move(enc));
  DecoderStateT<T> state = initial_decoder_state(b);

  const std::size_t steps = max_len - 1;
  std::vector<ValueT<T>> all_logits;
  all_logits.reserve(steps);
  std::vector<std::size_t> flat_targets(steps * b, text::kPad);
  std::vector<std::uint8_t> flat_mask(steps * b, 0);
  for (std::size_t t = 0; t < steps; ++t) {
    std::vector<std::size_t> prev(b, text::kPad);
    for (std::size_t i = 0; i < b; ++i) {
      const auto& seq = batch.tokens[i];
      if (t + 1 < seq.size()) {
        prev[i] = seq[t];
        flat_targets[t * b + i] = seq[t + 1];
        flat_mask[t * b + i] = 1;
      }
    }
    auto [logits, next] = decode_step(prev, state, attn);
    state = std::move(next);
    all_logits.push_back(logits);
  }
  ValueT<T> stacked = stack_time(tape_, all_logits);  // [steps x B x V]
  ValueT<T> flat = reshape(tape_, stacked, {steps * b, cfg_.vocab_size});
  return cross_entropy_masked(tape_, flat, flat_targets, flat_mask, stats);
}

template <typename T>
TeacherForcedResult evaluate_teacher_forced(const ModelConfig& cfg,
                                            const ParameterSetT<T>& params,
                                            const Batch& batch) {
  TapeT<T> tape;
  BoundModelT<T> bound(tape, cfg, params);
  CrossEntropyStats stats;
  ValueT<T> loss = bound.teacher_forced_loss(batch, &stats);
  TeacherForcedResult out;
  out.loss = static_cast<double>(tape.value(loss)[0]);
  out.token_accuracy = stats.accuracy();
  out.token_positions = stats.positions;
  return out;
}

}  // namespace xasr::model
