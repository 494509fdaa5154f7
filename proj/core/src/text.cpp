// SPDX-License-Identifier: Apache-2.0
#include "xasr/text.hpp"

#include <algorithm>
#include <fstream>
#include <map>
#include <sstream>

#include "xasr/rng.hpp"

namespace xasr::text {

// --- UTF-8 ------------------------------------------------------------------

std::vector<char32_t> utf8_decode(const std::string& s) {
  std::vector<char32_t> out;
  out.reserve(s.size());
  std::size_t i = 0;
  while (i < s.size()) {
    const unsigned char c = static_cast<unsigned char>(s[i]);
    char32_t cp = 0;
    std::size_t extra = 0;
    if (c < 0x80) {
      cp = c;
    } else if ((c >> 5) == 0x6) {
      cp = c & 0x1f;
      extra = 1;
    } else if ((c >> 4) == 0xe) {
      cp = c & 0x0f;
      extra = 2;
    } else if ((c >> 3) == 0x1e) {
      cp = c & 0x07;
      extra = 3;
    } else {
      throw ParseError("invalid UTF-8 lead byte");
    }
    if (i + extra >= s.size()) throw ParseError("truncated UTF-8 sequence");
    for (std::size_t k = 1; k <= extra; ++k) {
      const unsigned char cc = static_cast<unsigned char>(s[i + k]);
      if ((cc >> 6) != 0x2) throw ParseError("invalid UTF-8 continuation byte");
      cp = (cp << 6) | (cc & 0x3f);
    }
    out.push_back(cp);
    i += extra + 1;
  }
  return out;
}

std::string utf8_encode(char32_t cp) {
  std::string out;
  if (cp < 0x80) {
    out += static_cast<char>(cp);
  } else if (cp < 0x800) {
    out += static_cast<char>(0xc0 | (cp >> 6));
    out += static_cast<char>(0x80 | (cp & 0x3f));
  } else if (cp < 0x10000) {
    out += static_cast<char>(0xe0 | (cp >> 12));
    out += static_cast<char>(0x80 | ((cp >> 6) & 0x3f));
    out += static_cast<char>(0x80 | (cp & 0x3f));
  } else {
    out += static_cast<char>(0xf0 | (cp >> 18));
    out += static_cast<char>(0x80 | ((cp >> 12) & 0x3f));
    out += static_cast<char>(0x80 | ((cp >> 6) & 0x3f));
    out += static_cast<char>(0x80 | (cp & 0x3f));
  }
  return out;
}

std::string utf8_encode(const std::vector<char32_t>& cps) {
  std::string out;
  for (char32_t cp : cps) out += utf8_encode(cp);
  return out;
}

std::size_t codepoint_count(const std::string& s) { return utf8_decode(s).size(); }

// --- normalization ----------------------------------------------------------

namespace {

bool is_space_cp(char32_t c) {
  return c == U' ' || c == U'\t' || c == U'\n' || c == U'\r' || c == U'\f' || c == U'\v' ||
         c == 0x00A0 || c == 0x2028 || c == 0x2029 || (c >= 0x2000 && c <= 0x200B) ||
         c == 0x3000;
}

/// Punctuation table: ASCII punctuation plus the common Unicode punctuation
/// ranges seen in our corpora. Deliberately explicit rather than a full
/// Unicode category lookup.
bool is_punct_cp(char32_t c) {
  if (c < 0x80) {
    return (c >= U'!' && c <= U'/') || (c >= U':' && c <= U'@') ||
           (c >= U'[' && c <= U'`') || (c >= U'{' && c <= U'~');
  }
  if (c >= 0x2010 && c <= 0x2027) return true;   // dashes, quotes, daggers, bullets
  if (c >= 0x2030 && c <= 0x205E) return true;   // per-mille .. misc punctuation
  if (c >= 0x3001 && c <= 0x303F) return true;   // CJK symbols and punctuation
  if (c >= 0xFF01 && c <= 0xFF0F) return true;   // fullwidth forms
  if (c >= 0xFF1A && c <= 0xFF20) return true;
  if (c >= 0xFF3B && c <= 0xFF40) return true;
  if (c >= 0xFF5B && c <= 0xFF65) return true;
  switch (c) {
    case 0x00A1:  // inverted exclamation
    case 0x00A7:  // section sign
    case 0x00AB:  // left guillemet
    case 0x00B6:
    case 0x00B7:
    case 0x00BB:  // right guillemet
    case 0x00BF:  // inverted question mark
      return true;
    default:
      return false;
  }
}

char32_t lowercase_cp(char32_t c) {
  if (c >= U'A' && c <= U'Z') return c + 32;
  // Latin-1 supplement letters, excluding the multiplication sign
  if (c >= 0x00C0 && c <= 0x00DE && c != 0x00D7) return c + 32;
  // Latin Extended-A is mostly case-paired on even/odd codepoints
  if (c >= 0x0100 && c <= 0x017F && (c % 2 == 0)) return c + 1;
  // Greek and Cyrillic basic ranges
  if (c >= 0x0391 && c <= 0x03A9 && c != 0x03A2) return c + 32;
  if (c >= 0x0410 && c <= 0x042F) return c + 32;
  return c;
}

/// Pre-pass mapping of typographic variants onto their plain equivalents.
void normalize_punct_variants(std::vector<char32_t>& cps) {
  std::vector<char32_t> out;
  out.reserve(cps.size());
  for (char32_t c : cps) {
    switch (c) {
      case 0x2018:  // left single quote
      case 0x2019:  // right single quote
      case 0x201A:
      case 0x02BC:
        out.push_back(U'\'');
        break;
      case 0x201C:  // left double quote
      case 0x201D:  // right double quote
      case 0x201E:
        out.push_back(U'"');
        break;
      case 0x2010:  // hyphen family
      case 0x2011:
      case 0x2012:
      case 0x2013:  // en dash
      case 0x2014:  // em dash
      case 0x2015:
      case 0x2212:  // minus sign
        out.push_back(U'-');
        break;
      case 0x2026:  // ellipsis
        out.push_back(U'.');
        out.push_back(U'.');
        out.push_back(U'.');
        break;
      default:
        out.push_back(c);
    }
  }
  cps = std::move(out);
}

}  // namespace

NormalizedTranscript normalize_text(const std::string& raw, bool lowercase,
                                    const std::string& language_tag) {
  std::vector<char32_t> cps = utf8_decode(raw);
  normalize_punct_variants(cps);

  std::vector<char32_t> cleaned;
  cleaned.reserve(cps.size());
  for (char32_t c : cps) {
    if (is_space_cp(c)) {
      cleaned.push_back(U' ');
    } else if (c == U'\'') {
      cleaned.push_back(c);  // apostrophes survive
    } else if (c == U'-') {
      cleaned.push_back(U' ');  // hyphen acts as a word separator
    } else if (is_punct_cp(c)) {
      // dropped
    } else {
      cleaned.push_back(lowercase ? lowercase_cp(c) : c);
    }
  }

  // collapse whitespace runs, trim ends
  std::vector<char32_t> collapsed;
  collapsed.reserve(cleaned.size());
  bool pending_space = false;
  for (char32_t c : cleaned) {
    if (c == U' ') {
      pending_space = !collapsed.empty();
    } else {
      if (pending_space) collapsed.push_back(U' ');
      pending_space = false;
      collapsed.push_back(c);
    }
  }

  return NormalizedTranscript{utf8_encode(collapsed), language_tag};
}

// --- vocabulary ---------------------------------------------------------------

namespace {
const char* kReservedNames[kNumReserved] = {"<pad>", "<s>", "</s>", "<unk>"};
constexpr char32_t kUnkGlyph = 0xFFFD;
}  // namespace

CharVocabulary CharVocabulary::build(const std::vector<NormalizedTranscript>& corpus) {
  if (corpus.empty()) throw DataError("build_char_vocab: empty corpus");
  std::map<char32_t, std::size_t> freq;
  for (const auto& t : corpus) {
    for (char32_t c : utf8_decode(t.text)) ++freq[c];
  }
  std::vector<std::pair<char32_t, std::size_t>> items(freq.begin(), freq.end());
  std::sort(items.begin(), items.end(), [](const auto& a, const auto& b) {
    if (a.second != b.second) return a.second > b.second;
    return a.first < b.first;
  });
  std::vector<char32_t> symbols;
  symbols.reserve(items.size());
  for (const auto& [c, n] : items) symbols.push_back(c);
  return from_symbols(symbols);
}

CharVocabulary CharVocabulary::from_symbols(const std::vector<char32_t>& regular_symbols) {
  CharVocabulary v;
  v.symbols_ = regular_symbols;
  for (std::size_t i = 0; i < v.symbols_.size(); ++i) {
    if (!v.index_.emplace(v.symbols_[i], kNumReserved + i).second) {
      throw DataError("vocabulary: duplicate symbol");
    }
  }
  return v;
}

std::size_t CharVocabulary::index_of(char32_t c) const {
  auto it = index_.find(c);
  return it == index_.end() ? static_cast<std::size_t>(kUnk) : it->second;
}

char32_t CharVocabulary::symbol_at(std::size_t index) const {
  if (index < kNumReserved || index >= size()) {
    throw UsageError("vocabulary: no character symbol at index " + std::to_string(index));
  }
  return symbols_[index - kNumReserved];
}

std::vector<std::size_t> CharVocabulary::encode(const std::string& t) const {
  std::vector<std::size_t> out;
  const auto cps = utf8_decode(t);
  out.reserve(cps.size() + 2);
  out.push_back(kBos);
  for (char32_t c : cps) out.push_back(index_of(c));
  out.push_back(kEos);
  return out;
}

std::string CharVocabulary::decode(const std::vector<std::size_t>& ids) const {
  std::vector<char32_t> cps;
  cps.reserve(ids.size());
  for (std::size_t id : ids) {
    if (id == kPad || id == kBos || id == kEos) continue;
    if (id == kUnk) {
      cps.push_back(kUnkGlyph);
    } else {
      cps.push_back(symbol_at(id));
    }
  }
  return utf8_encode(cps);
}

std::uint64_t CharVocabulary::fingerprint() const {
  std::string blob;
  for (std::size_t i = 0; i < kNumReserved; ++i) {
    blob += kReservedNames[i];
    blob += '\n';
  }
  for (char32_t c : symbols_) {
    blob += utf8_encode(c);
    blob += '\n';
  }
  return fnv1a64(blob);
}

void CharVocabulary::save(const std::string& path) const {
  std::ofstream os(path, std::ios::trunc | std::ios::binary);
  if (!os) throw DataError("cannot write vocabulary file " + path);
  for (std::size_t i = 0; i < kNumReserved; ++i) os << kReservedNames[i] << '\n';
  for (char32_t c : symbols_) os << utf8_encode(c) << '\n';
}

CharVocabulary CharVocabulary::load(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw DataError("cannot open vocabulary file " + path);
  std::vector<char32_t> symbols;
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(is, line)) {
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line_no < kNumReserved) {
      if (line != kReservedNames[line_no]) {
        throw ParseError(path + ": line " + std::to_string(line_no + 1) +
                         " must be the reserved symbol " + kReservedNames[line_no]);
      }
    } else {
      const auto cps = utf8_decode(line);
      if (cps.size() != 1) {
        throw ParseError(path + ": line " + std::to_string(line_no + 1) +
                         " must hold exactly one character");
      }
      symbols.push_back(cps[0]);
    }
    ++line_no;
  }
  if (line_no < kNumReserved) throw ParseError(path + ": missing reserved symbols");
  return from_symbols(symbols);
}

// --- manifests ----------------------------------------------------------------

std::vector<ManifestEntry> read_manifest(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw DataError("cannot open manifest " + path);
  std::vector<ManifestEntry> out;
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(is, line)) {
    ++line_no;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty()) continue;
    std::vector<std::string> fields;
    std::size_t start = 0;
    for (std::size_t i = 0; i <= line.size(); ++i) {
      if (i == line.size() || line[i] == '\t') {
        fields.push_back(line.substr(start, i - start));
        start = i + 1;
      }
    }
    if (fields.size() != 4) {
      throw ParseError(path + ": line " + std::to_string(line_no) +
                       ": expected 4 tab-separated fields, got " +
                       std::to_string(fields.size()));
    }
    out.push_back(ManifestEntry{fields[0], fields[1], fields[2], fields[3]});
  }
  return out;
}

void write_manifest(const std::string& path, const std::vector<ManifestEntry>& entries) {
  std::ofstream os(path, std::ios::trunc | std::ios::binary);
  if (!os) throw DataError("cannot write manifest " + path);
  for (const auto& e : entries) {
    os << e.id << '\t' << e.path << '\t' << e.transcript << '\t' << e.language_tag << '\n';
  }
}

}  // namespace xasr::text
