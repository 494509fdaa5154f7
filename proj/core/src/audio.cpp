// SPDX-License-Identifier: Apache-2.0
#include "xasr/audio.hpp"

#include <algorithm>
#include <cmath>
#include <complex>
#include <cstring>
#include <fstream>
#include <map>
#include <sstream>

#include "xasr/error.hpp"

namespace xasr::audio {

namespace {

constexpr std::size_t kFftSize = 512;
constexpr double kLogFloor = 1e-10;

// Iterative radix-2 FFT, in place. kFftSize is a power of two.
void fft_inplace(std::vector<std::complex<double>>& a) {
  const std::size_t n = a.size();
  for (std::size_t i = 1, j = 0; i < n; ++i) {
    std::size_t bit = n >> 1;
    for (; j & bit; bit >>= 1) j ^= bit;
    j ^= bit;
    if (i < j) std::swap(a[i], a[j]);
  }
  for (std::size_t len = 2; len <= n; len <<= 1) {
    const double ang = -2.0 * M_PI / static_cast<double>(len);
    const std::complex<double> wl(std::cos(ang), std::sin(ang));
    for (std::size_t i = 0; i < n; i += len) {
      std::complex<double> w(1.0);
      for (std::size_t k = 0; k < len / 2; ++k) {
        const std::complex<double> u = a[i + k];
        const std::complex<double> v = a[i + k + len / 2] * w;
        a[i + k] = u + v;
        a[i + k + len / 2] = u - v;
        w *= wl;
      }
    }
  }
}

double hz_to_mel(double hz) { return 2595.0 * std::log10(1.0 + hz / 700.0); }
double mel_to_hz(double mel) { return 700.0 * (std::pow(10.0, mel / 2595.0) - 1.0); }

/// Triangular mel filterbank over the FFT bins, HTK mel scale, 0 Hz..Nyquist.
std::vector<std::vector<double>> build_mel_filters(int sample_rate_hz) {
  const std::size_t n_bins = kFftSize / 2 + 1;
  const double nyquist = sample_rate_hz / 2.0;
  const double mel_max = hz_to_mel(nyquist);
  std::vector<double> centers(kNumMelChannels + 2);
  for (std::size_t i = 0; i < centers.size(); ++i) {
    centers[i] = mel_to_hz(mel_max * static_cast<double>(i) / (kNumMelChannels + 1));
  }
  std::vector<std::vector<double>> filters(kNumMelChannels,
                                           std::vector<double>(n_bins, 0.0));
  for (std::size_t m = 0; m < kNumMelChannels; ++m) {
    const double lo = centers[m], mid = centers[m + 1], hi = centers[m + 2];
    for (std::size_t k = 0; k < n_bins; ++k) {
      const double f = static_cast<double>(k) * sample_rate_hz / kFftSize;
      if (f <= lo || f >= hi) continue;
      filters[m][k] = f <= mid ? (f - lo) / (mid - lo) : (hi - f) / (hi - mid);
    }
  }
  return filters;
}

}  // namespace

FeatureMatrix compute_logmel(const Waveform& w) {
  if (w.sample_rate_hz <= 0) throw DataError("compute_logmel: bad sample rate");
  const std::size_t win = static_cast<std::size_t>(
      std::lround(w.sample_rate_hz * (kFrameSizeMs / 1000.0)));
  const std::size_t shift = static_cast<std::size_t>(
      std::lround(w.sample_rate_hz * (kFrameShiftMs / 1000.0)));
  if (win > kFftSize) throw DataError("compute_logmel: sample rate too high for FFT size 512");
  if (w.samples.size() < win) {
    throw DataError("compute_logmel: waveform shorter than one 25ms window");
  }
  const std::size_t num_frames = 1 + (w.samples.size() - win) / shift;

  // periodic Hann window
  std::vector<double> window(win);
  for (std::size_t i = 0; i < win; ++i) {
    window[i] = 0.5 - 0.5 * std::cos(2.0 * M_PI * static_cast<double>(i) / win);
  }
  const auto filters = build_mel_filters(w.sample_rate_hz);

  FeatureMatrix out;
  out.frames = Tensor({num_frames, kNumMelChannels});
  std::vector<std::complex<double>> buf(kFftSize);
  for (std::size_t t = 0; t < num_frames; ++t) {
    const float* src = w.samples.data() + t * shift;
    for (std::size_t i = 0; i < win; ++i) buf[i] = src[i] * window[i];
    std::fill(buf.begin() + win, buf.end(), std::complex<double>(0.0));
    fft_inplace(buf);
    for (std::size_t m = 0; m < kNumMelChannels; ++m) {
      double energy = 0.0;
      const auto& filt = filters[m];
      for (std::size_t k = 0; k < filt.size(); ++k) {
        if (filt[k] == 0.0) continue;
        energy += filt[k] * std::norm(buf[k]);
      }
      out.frames.at(t, m) = static_cast<float>(std::log(std::max(energy, kLogFloor)));
    }
  }
  out.cmvn_applied = false;
  return out;
}

FeatureMatrix apply_cmvn(const FeatureMatrix& f) {
  if (f.cmvn_applied) throw UsageError("apply_cmvn: already applied");
  const std::size_t t_len = f.num_frames(), c = f.num_channels();
  FeatureMatrix out;
  out.frames = Tensor({t_len, c});
  for (std::size_t j = 0; j < c; ++j) {
    double mean = 0.0;
    for (std::size_t i = 0; i < t_len; ++i) mean += f.frames.at(i, j);
    mean /= static_cast<double>(t_len);
    double var = 0.0;
    for (std::size_t i = 0; i < t_len; ++i) {
      const double d = f.frames.at(i, j) - mean;
      var += d * d;
    }
    var /= static_cast<double>(t_len);
    const double stddev = std::sqrt(var);
    for (std::size_t i = 0; i < t_len; ++i) {
      out.frames.at(i, j) =
          stddev < 1e-10 ? 0.0f
                         : static_cast<float>((f.frames.at(i, j) - mean) / stddev);
    }
  }
  out.cmvn_applied = true;
  return out;
}

std::vector<FeatureMatrix> apply_corpus_cmvn(const std::vector<FeatureMatrix>& fs) {
  if (fs.empty()) return {};
  const std::size_t c = fs.front().num_channels();
  std::vector<double> mean(c, 0.0), var(c, 0.0);
  std::size_t total = 0;
  for (const auto& f : fs) {
    if (f.cmvn_applied) throw UsageError("apply_corpus_cmvn: already applied");
    for (std::size_t i = 0; i < f.num_frames(); ++i)
      for (std::size_t j = 0; j < c; ++j) mean[j] += f.frames.at(i, j);
    total += f.num_frames();
  }
  for (auto& m : mean) m /= static_cast<double>(total);
  for (const auto& f : fs)
    for (std::size_t i = 0; i < f.num_frames(); ++i)
      for (std::size_t j = 0; j < c; ++j) {
        const double d = f.frames.at(i, j) - mean[j];
        var[j] += d * d;
      }
  for (auto& v : var) v /= static_cast<double>(total);
  std::vector<FeatureMatrix> out;
  out.reserve(fs.size());
  for (const auto& f : fs) {
    FeatureMatrix g;
    g.frames = Tensor(f.frames.shape());
    for (std::size_t i = 0; i < f.num_frames(); ++i)
      for (std::size_t j = 0; j < c; ++j) {
        const double stddev = std::sqrt(var[j]);
        g.frames.at(i, j) =
            stddev < 1e-10 ? 0.0f
                           : static_cast<float>((f.frames.at(i, j) - mean[j]) / stddev);
      }
    g.cmvn_applied = true;
    out.push_back(std::move(g));
  }
  return out;
}

std::pair<std::vector<std::size_t>, LengthFilterReport> filter_by_length(
    const std::vector<LengthSample>& samples, const LengthFilterLimits& limits) {
  std::vector<std::size_t> retained;
  LengthFilterReport report;
  for (std::size_t i = 0; i < samples.size(); ++i) {
    const auto& s = samples[i];
    if (s.frames > limits.max_frames) {
      report.removed.push_back({s.id, "frames"});
    } else if (s.chars > limits.max_chars) {
      report.removed.push_back({s.id, "chars"});
    } else {
      retained.push_back(i);
    }
  }
  return {std::move(retained), std::move(report)};
}

FeatureMatrix apply_spec_augment(const FeatureMatrix& f, const AugmentPolicy& policy,
                                 Rng& rng) {
  if (!f.cmvn_applied) throw UsageError("apply_spec_augment: apply CMVN first");
  const std::size_t t_len = f.num_frames(), c = f.num_channels();
  FeatureMatrix out;
  out.frames = f.frames;
  out.cmvn_applied = true;
  for (int m = 0; m < policy.num_freq_masks; ++m) {
    const std::size_t cap = std::min<std::size_t>(policy.max_freq_width, c);
    const std::size_t width = static_cast<std::size_t>(rng.uniform_int(0, cap));
    const std::size_t start = static_cast<std::size_t>(rng.uniform_int(0, c - width));
    for (std::size_t i = 0; i < t_len; ++i)
      for (std::size_t j = start; j < start + width; ++j) out.frames.at(i, j) = 0.0f;
  }
  const std::size_t ratio_cap = static_cast<std::size_t>(
      std::floor(policy.time_mask_ratio_cap * static_cast<double>(t_len)));
  for (int m = 0; m < policy.num_time_masks; ++m) {
    const std::size_t cap =
        std::min({static_cast<std::size_t>(policy.max_time_width), ratio_cap, t_len});
    const std::size_t width = static_cast<std::size_t>(rng.uniform_int(0, cap));
    const std::size_t start = static_cast<std::size_t>(rng.uniform_int(0, t_len - width));
    for (std::size_t i = start; i < start + width; ++i)
      for (std::size_t j = 0; j < c; ++j) out.frames.at(i, j) = 0.0f;
  }
  return out;
}

// --- feature cache ----------------------------------------------------------

namespace {

template <typename T>
void write_pod(std::ostream& os, const T& v) {
  os.write(reinterpret_cast<const char*>(&v), sizeof(T));
}

template <typename T>
T read_pod(std::istream& is) {
  T v;
  is.read(reinterpret_cast<char*>(&v), sizeof(T));
  if (!is) throw ParseError("feature cache: truncated record");
  return v;
}

}  // namespace

struct FeatureCacheWriter::Impl {
  std::ofstream data;
  std::ofstream index;
  std::string path;
  bool closed = false;
};

FeatureCacheWriter::FeatureCacheWriter(const std::string& path) : impl_(new Impl) {
  impl_->path = path;
  impl_->data.open(path, std::ios::binary | std::ios::trunc);
  impl_->index.open(path + ".idx", std::ios::trunc);
  if (!impl_->data || !impl_->index) throw DataError("cannot open feature cache " + path);
}

FeatureCacheWriter::~FeatureCacheWriter() {
  close();
  delete impl_;
}

void FeatureCacheWriter::append(const std::string& utterance_id, const FeatureMatrix& f) {
  if (impl_->closed) throw UsageError("feature cache writer already closed");
  const auto offset = impl_->data.tellp();
  write_pod<std::uint32_t>(impl_->data, static_cast<std::uint32_t>(utterance_id.size()));
  impl_->data.write(utterance_id.data(), static_cast<std::streamsize>(utterance_id.size()));
  write_pod<std::uint32_t>(impl_->data, static_cast<std::uint32_t>(f.num_frames()));
  write_pod<std::uint32_t>(impl_->data, static_cast<std::uint32_t>(f.num_channels()));
  impl_->data.write(reinterpret_cast<const char*>(f.frames.data()),
                    static_cast<std::streamsize>(f.frames.size() * sizeof(float)));
  impl_->index << utterance_id << '\t' << offset << '\t' << f.num_frames() << '\n';
}

void FeatureCacheWriter::close() {
  if (!impl_->closed) {
    impl_->data.close();
    impl_->index.close();
    impl_->closed = true;
  }
}

struct FeatureCacheReader::Impl {
  std::string path;
  std::map<std::string, std::pair<std::uint64_t, std::size_t>> index;  // id -> (offset, T)
};

FeatureCacheReader::FeatureCacheReader(const std::string& path) : impl_(new Impl) {
  impl_->path = path;
  std::ifstream idx(path + ".idx");
  if (!idx) throw DataError("cannot open feature cache index " + path + ".idx");
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(idx, line)) {
    ++line_no;
    if (line.empty()) continue;
    const auto tab1 = line.find('\t');
    const auto tab2 = line.find('\t', tab1 + 1);
    if (tab1 == std::string::npos || tab2 == std::string::npos) {
      throw ParseError("feature cache index line " + std::to_string(line_no) + ": bad format");
    }
    const std::string id = line.substr(0, tab1);
    const std::uint64_t offset = std::stoull(line.substr(tab1 + 1, tab2 - tab1 - 1));
    const std::size_t frames = std::stoull(line.substr(tab2 + 1));
    if (!impl_->index.emplace(id, std::make_pair(offset, frames)).second) {
      throw DataError("feature cache index: duplicate utterance id " + id);
    }
  }
}

FeatureCacheReader::~FeatureCacheReader() { delete impl_; }

bool FeatureCacheReader::contains(const std::string& utterance_id) const {
  return impl_->index.count(utterance_id) != 0;
}

std::size_t FeatureCacheReader::num_frames(const std::string& utterance_id) const {
  auto it = impl_->index.find(utterance_id);
  if (it == impl_->index.end()) throw DataError("feature cache: unknown id " + utterance_id);
  return it->second.second;
}

FeatureMatrix FeatureCacheReader::read(const std::string& utterance_id) const {
  auto it = impl_->index.find(utterance_id);
  if (it == impl_->index.end()) throw DataError("feature cache: unknown id " + utterance_id);
  std::ifstream data(impl_->path, std::ios::binary);
  if (!data) throw DataError("cannot open feature cache " + impl_->path);
  data.seekg(static_cast<std::streamoff>(it->second.first));
  const auto id_len = read_pod<std::uint32_t>(data);
  std::string id(id_len, '\0');
  data.read(id.data(), id_len);
  if (id != utterance_id) throw ParseError("feature cache: index/data mismatch for " + utterance_id);
  const auto t_len = read_pod<std::uint32_t>(data);
  const auto n_mels = read_pod<std::uint32_t>(data);
  FeatureMatrix f;
  f.frames = Tensor({t_len, n_mels});
  data.read(reinterpret_cast<char*>(f.frames.data()),
            static_cast<std::streamsize>(f.frames.size() * sizeof(float)));
  if (!data) throw ParseError("feature cache: truncated frames for " + utterance_id);
  return f;
}

std::vector<std::string> FeatureCacheReader::ids() const {
  std::vector<std::string> out;
  out.reserve(impl_->index.size());
  for (const auto& [id, loc] : impl_->index) out.push_back(id);
  return out;
}

// --- WAV I/O ----------------------------------------------------------------

Waveform read_wav(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw DataError("cannot open wav file " + path);
  char tag[4];
  is.read(tag, 4);
  if (!is || std::memcmp(tag, "RIFF", 4) != 0) throw ParseError(path + ": not a RIFF file");
  read_pod<std::uint32_t>(is);
  is.read(tag, 4);
  if (!is || std::memcmp(tag, "WAVE", 4) != 0) throw ParseError(path + ": not a WAVE file");

  std::uint16_t format = 0, channels = 0, bits = 0;
  std::uint32_t sample_rate = 0;
  std::vector<char> data;
  while (is.read(tag, 4)) {
    const auto chunk_size = read_pod<std::uint32_t>(is);
    if (std::memcmp(tag, "fmt ", 4) == 0) {
      format = read_pod<std::uint16_t>(is);
      channels = read_pod<std::uint16_t>(is);
      sample_rate = read_pod<std::uint32_t>(is);
      read_pod<std::uint32_t>(is);  // byte rate
      read_pod<std::uint16_t>(is);  // block align
      bits = read_pod<std::uint16_t>(is);
      if (chunk_size > 16) is.seekg(chunk_size - 16, std::ios::cur);
    } else if (std::memcmp(tag, "data", 4) == 0) {
      data.resize(chunk_size);
      is.read(data.data(), chunk_size);
      break;
    } else {
      is.seekg(chunk_size + (chunk_size & 1), std::ios::cur);
    }
  }
  if (channels == 0 || data.empty()) throw ParseError(path + ": missing fmt or data chunk");

  Waveform w;
  w.sample_rate_hz = static_cast<int>(sample_rate);
  const std::size_t frame_bytes = static_cast<std::size_t>(channels) * (bits / 8);
  const std::size_t n = data.size() / frame_bytes;
  w.samples.resize(n);
  for (std::size_t i = 0; i < n; ++i) {
    double acc = 0.0;
    for (std::size_t c = 0; c < channels; ++c) {
      const char* p = data.data() + i * frame_bytes + c * (bits / 8);
      if (format == 1 && bits == 16) {
        std::int16_t v;
        std::memcpy(&v, p, 2);
        acc += v / 32768.0;
      } else if (format == 3 && bits == 32) {
        float v;
        std::memcpy(&v, p, 4);
        acc += v;
      } else {
        throw ParseError(path + ": unsupported wav encoding (need PCM16 or float32)");
      }
    }
    w.samples[i] = static_cast<float>(acc / channels);
  }
  return w;
}

void write_wav(const std::string& path, const Waveform& w) {
  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  if (!os) throw DataError("cannot open wav file for writing: " + path);
  const std::uint32_t data_bytes = static_cast<std::uint32_t>(w.samples.size() * 2);
  os.write("RIFF", 4);
  write_pod<std::uint32_t>(os, 36 + data_bytes);
  os.write("WAVE", 4);
  os.write("fmt ", 4);
  write_pod<std::uint32_t>(os, 16);
  write_pod<std::uint16_t>(os, 1);  // PCM
  write_pod<std::uint16_t>(os, 1);  // mono
  write_pod<std::uint32_t>(os, static_cast<std::uint32_t>(w.sample_rate_hz));
  write_pod<std::uint32_t>(os, static_cast<std::uint32_t>(w.sample_rate_hz * 2));
  write_pod<std::uint16_t>(os, 2);
  write_pod<std::uint16_t>(os, 16);
  os.write("data", 4);
  write_pod<std::uint32_t>(os, data_bytes);
  for (float s : w.samples) {
    const double clamped = std::clamp(static_cast<double>(s), -1.0, 1.0);
    const std::int16_t v = static_cast<std::int16_t>(std::lround(clamped * 32767.0));
    write_pod<std::int16_t>(os, v);
  }
}

}  // namespace xasr::audio
