// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <string>
#include <unordered_map>
#include <vector>

#include "xasr/error.hpp"

namespace xasr::text {

// --- UTF-8 helpers ----------------------------------------------------------

std::vector<char32_t> utf8_decode(const std::string& s);
std::string utf8_encode(const std::vector<char32_t>& cps);
std::string utf8_encode(char32_t cp);
std::size_t codepoint_count(const std::string& s);

// --- normalization ----------------------------------------------------------

/// Transcript after the normalization chain; language_tag is free-form
/// metadata carried through manifests.
struct NormalizedTranscript {
  std::string text;
  std::string language_tag;
};

/// Punctuation normalization (curly quotes to straight, dash family to
/// hyphen, ellipsis expanded), optional lowercasing (ASCII + Latin-1),
/// removal of punctuation except apostrophes (hyphens become spaces so words
/// are not glued), whitespace collapsed to single spaces. Idempotent.
NormalizedTranscript normalize_text(const std::string& raw, bool lowercase,
                                    const std::string& language_tag = "");

// --- character vocabulary ---------------------------------------------------

/// Reserved control symbols occupy indices 0..3 in every vocabulary.
enum ReservedToken : std::size_t {
  kPad = 0,
  kBos = 1,
  kEos = 2,
  kUnk = 3,
};
inline constexpr std::size_t kNumReserved = 4;

/// Character-to-index bijection. Regular symbols are ordered by descending
/// corpus frequency, ties broken by ascending codepoint.
class CharVocabulary {
 public:
  CharVocabulary() = default;

  /// Build from a corpus; every character that appears is included.
  static CharVocabulary build(const std::vector<NormalizedTranscript>& corpus);

  static CharVocabulary from_symbols(const std::vector<char32_t>& regular_symbols);

  std::size_t size() const { return kNumReserved + symbols_.size(); }

  bool contains(char32_t c) const { return index_.count(c) != 0; }
  std::size_t index_of(char32_t c) const;  // kUnk if absent
  char32_t symbol_at(std::size_t index) const;

  /// Encode text as [bos, chars..., eos]; unknown characters map to unk.
  std::vector<std::size_t> encode(const std::string& t) const;
  /// Inverse of encode; control tokens are dropped, unk renders as U+FFFD.
  std::string decode(const std::vector<std::size_t>& ids) const;

  /// Stable content hash; checkpoints refuse silent vocabulary swaps.
  std::uint64_t fingerprint() const;

  void save(const std::string& path) const;
  static CharVocabulary load(const std::string& path);

  const std::vector<char32_t>& regular_symbols() const { return symbols_; }

 private:
  std::vector<char32_t> symbols_;  // without the 4 reserved
  std::unordered_map<char32_t, std::size_t> index_;
};

// --- manifests ----------------------------------------------------------------

/// One corpus entry: TSV line of (id, audio-or-feature path, normalized
/// text, language tag).
struct ManifestEntry {
  std::string id;
  std::string path;
  std::string transcript;
  std::string language_tag;
};

std::vector<ManifestEntry> read_manifest(const std::string& path);
void write_manifest(const std::string& path, const std::vector<ManifestEntry>& entries);

}  // namespace xasr::text
