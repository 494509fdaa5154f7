// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <iosfwd>
#include <map>
#include <string>
#include <vector>

#include "xasr/rng.hpp"
#include "xasr/tensor.hpp"

namespace xasr::audio {

inline constexpr std::size_t kNumMelChannels = 80;
inline constexpr int kFrameSizeMs = 25;
inline constexpr int kFrameShiftMs = 10;

/// Mono waveform, samples in [-1, 1].
struct Waveform {
  std::vector<float> samples;
  int sample_rate_hz = 16000;
};

/// Per-utterance acoustic features, one row per 10ms frame, 80 mel channels.
struct FeatureMatrix {
  Tensor frames;  // [T x 80]
  bool cmvn_applied = false;

  std::size_t num_frames() const { return frames.rows(); }
  std::size_t num_channels() const { return frames.cols(); }
};

/// SpecAugment policy (LB-style, no time warping). Widths are maxima for the
/// uniform draws; time masks are additionally capped at ratio_cap * T.
struct AugmentPolicy {
  int num_freq_masks = 1;
  int max_freq_width = 27;
  int num_time_masks = 1;
  int max_time_width = 100;
  double time_mask_ratio_cap = 1.0;

  bool is_noop() const {
    return (num_freq_masks == 0 || max_freq_width == 0) &&
           (num_time_masks == 0 || max_time_width == 0);
  }
};

/// Log-mel filterbank extraction: 25ms Hann windows every 10ms, 512-point
/// FFT, 80 HTK-style triangular mel filters spanning 0 Hz to Nyquist,
/// natural log with floor 1e-10. Self-contained by design; no external
/// feature toolkit is matched bit-exactly.
FeatureMatrix compute_logmel(const Waveform& w);

/// Per-utterance, per-channel standardization to mean 0 / std 1.
/// Channels with zero variance are set to 0. Throws if already applied.
FeatureMatrix apply_cmvn(const FeatureMatrix& f);

/// Optional corpus-level variant: statistics pooled over all utterances.
std::vector<FeatureMatrix> apply_corpus_cmvn(const std::vector<FeatureMatrix>& fs);

struct LengthFilterReport {
  struct Removed {
    std::string id;
    std::string reason;  // "frames" or "chars"
  };
  std::vector<Removed> removed;
};

struct LengthFilterLimits {
  std::size_t max_frames = 3000;
  std::size_t max_chars = 512;
};

/// Length facts of one sample, as needed by the filter.
struct LengthSample {
  std::string id;
  std::size_t frames = 0;
  std::size_t chars = 0;  // Unicode codepoints
};

/// Drop samples longer than the limits (frames checked before chars).
/// Returns the indices of retained samples plus a report naming what was
/// removed and why.
std::pair<std::vector<std::size_t>, LengthFilterReport> filter_by_length(
    const std::vector<LengthSample>& samples, const LengthFilterLimits& limits = {});

/// Apply SpecAugment masks; the input is not mutated. Mask fill value is 0,
/// which matches the per-channel mean after CMVN.
FeatureMatrix apply_spec_augment(const FeatureMatrix& f, const AugmentPolicy& policy, Rng& rng);

// --- feature cache ----------------------------------------------------------
//
// Binary cache of per-utterance features plus a plain-text index:
//   <file>:      per record  u32 id_len | id bytes | u32 T | u32 n_mels |
//                            f32 frames[T*n_mels] (row-major, little-endian)
//   <file>.idx:  one line per record: "<id>\t<byte offset>\t<T>"

class FeatureCacheWriter {
 public:
  explicit FeatureCacheWriter(const std::string& path);
  ~FeatureCacheWriter();
  FeatureCacheWriter(const FeatureCacheWriter&) = delete;
  FeatureCacheWriter& operator=(const FeatureCacheWriter&) = delete;

  void append(const std::string& utterance_id, const FeatureMatrix& f);
  void close();

 private:
  struct Impl;
  Impl* impl_;
};

class FeatureCacheReader {
 public:
  explicit FeatureCacheReader(const std::string& path);
  ~FeatureCacheReader();
  FeatureCacheReader(const FeatureCacheReader&) = delete;
  FeatureCacheReader& operator=(const FeatureCacheReader&) = delete;

  bool contains(const std::string& utterance_id) const;
  FeatureMatrix read(const std::string& utterance_id) const;
  std::vector<std::string> ids() const;
  /// Frame count from the index alone (no feature data load).
  std::size_t num_frames(const std::string& utterance_id) const;

 private:
  struct Impl;
  Impl* impl_;
};

// --- WAV I/O ----------------------------------------------------------------

/// Minimal RIFF reader: PCM16 or float32, mono (multi-channel is averaged).
Waveform read_wav(const std::string& path);
/// PCM16 mono writer, mainly for tests and synthetic corpora.
void write_wav(const std::string& path, const Waveform& w);

}  // namespace xasr::audio
