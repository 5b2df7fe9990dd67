#include "kinfuse/lexkb.hpp"

#include <unicode/locid.h>
#include <unicode/normalizer2.h>
#include <unicode/unistr.h>

#include <algorithm>
#include <fstream>
#include <istream>
#include <stdexcept>

#include "kinfuse/error.hpp"
#include "kinfuse/textio.hpp"

namespace kinfuse {

namespace {

RelationKind mirror(RelationKind k) {
  switch (k) {
    case RelationKind::Hypernym:
      return RelationKind::Hyponym;
    case RelationKind::Hyponym:
      return RelationKind::Hypernym;
    default:
      return k;
  }
}

std::uint8_t bit(RelationKind k) { return static_cast<std::uint8_t>(1u << static_cast<int>(k)); }

}  // namespace

std::string_view to_string(RelationKind kind) {
  switch (kind) {
    case RelationKind::Synonym:
      return "synonym";
    case RelationKind::Antonym:
      return "antonym";
    case RelationKind::Hypernym:
      return "hypernym";
    case RelationKind::Hyponym:
      return "hyponym";
  }
  return "?";
}

std::optional<RelationKind> parse_relation(std::string_view token) {
  std::string lower(token);
  std::transform(lower.begin(), lower.end(), lower.begin(),
                 [](unsigned char c) { return static_cast<char>(std::tolower(c)); });
  for (RelationKind k : kAllRelations)
    if (lower == to_string(k)) return k;
  return std::nullopt;
}

bool RelationVector::is_zero() const noexcept {
  return std::all_of(bits.begin(), bits.end(), [](std::uint8_t b) { return b == 0; });
}

int indicator(const RelationVector& k) noexcept { return k.is_zero() ? 0 : 1; }

std::string normalize_lemma(std::string_view text) {
  UErrorCode status = U_ZERO_ERROR;
  const icu::Normalizer2* nfc = icu::Normalizer2::getNFCInstance(status);
  if (U_FAILURE(status)) throw std::runtime_error("normalize_lemma: ICU NFC unavailable");
  icu::UnicodeString u = icu::UnicodeString::fromUTF8(
      icu::StringPiece(text.data(), static_cast<std::int32_t>(text.size())));
  u.trim();
  u.toLower(icu::Locale::getRoot());
  icu::UnicodeString normalized = nfc->normalize(u, status);
  if (U_FAILURE(status)) throw std::runtime_error("normalize_lemma: NFC normalization failed");
  std::string out;
  normalized.toUTF8String(out);
  return out;
}

void LexicalKB::insert_one(const std::string& a, const std::string& b, RelationKind kind) {
  auto it = entries_.find(std::pair<std::string_view, std::string_view>(a, b));
  if (it == entries_.end()) it = entries_.emplace(std::make_pair(a, b), 0).first;
  it->second |= bit(kind);
  index_[a][static_cast<std::size_t>(kind)].insert(b);
}

void LexicalKB::add(std::string_view a, std::string_view b, RelationKind kind) {
  std::string na = normalize_lemma(a);
  std::string nb = normalize_lemma(b);
  if (na.empty() || nb.empty()) throw std::invalid_argument("LexicalKB: empty lemma");
  if (na == nb) throw std::invalid_argument("LexicalKB: self-pair '" + na + "' rejected");
  insert_one(na, nb, kind);
  insert_one(nb, na, mirror(kind));
}

RelationVector LexicalKB::relation_vector(std::string_view a, std::string_view b) const {
  RelationVector v;
  auto it = entries_.find(std::pair<std::string_view, std::string_view>(a, b));
  if (it == entries_.end()) {
    const std::string na = normalize_lemma(a);
    const std::string nb = normalize_lemma(b);
    it = entries_.find(std::pair<std::string_view, std::string_view>(na, nb));
    if (it == entries_.end()) return v;
  }
  for (std::size_t i = 0; i < kNumRelations; ++i) v.bits[i] = (it->second >> i) & 1u;
  return v;
}

std::vector<std::string> LexicalKB::related(std::string_view lemma, RelationKind kind) const {
  auto it = index_.find(lemma);
  if (it == index_.end()) {
    it = index_.find(normalize_lemma(lemma));
    if (it == index_.end()) return {};
  }
  const auto& set = it->second[static_cast<std::size_t>(kind)];
  return {set.begin(), set.end()};
}

bool LexicalKB::has_relation(std::string_view lemma, RelationKind kind) const {
  return !related(lemma, kind).empty();
}

std::size_t LexicalKB::count(RelationKind kind) const {
  return static_cast<std::size_t>(std::count_if(
      entries_.begin(), entries_.end(), [&](const auto& e) { return (e.second & bit(kind)) != 0; }));
}

std::vector<std::pair<std::string, std::string>> LexicalKB::pairs(RelationKind kind) const {
  std::vector<std::pair<std::string, std::string>> out;
  const bool symmetric = kind == RelationKind::Synonym || kind == RelationKind::Antonym;
  for (const auto& [key, bits] : entries_) {
    if ((bits & bit(kind)) == 0) continue;
    if (symmetric && !(key.first < key.second)) continue;
    out.push_back(key);
  }
  return out;
}

RelationVector relation_vector(const LexicalKB& kb, std::string_view a, std::string_view b) {
  return kb.relation_vector(a, b);
}

LexicalKB parse_kb(std::istream& in, const std::string& source) {
  LexicalKB kb;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (is_blank_or_comment(line)) continue;
    const auto fields = split_tabs(line);
    if (fields.size() != 3) {
      throw ParseError(source, lineno,
                       "expected 3 tab-separated fields, found " + std::to_string(fields.size()));
    }
    const auto kind = parse_relation(trim_ascii(fields[2]));
    if (!kind) {
      throw ParseError(source, lineno, "unknown relation '" + std::string(fields[2]) + "'");
    }
    try {
      kb.add(fields[0], fields[1], *kind);
    } catch (const std::invalid_argument& e) {
      throw ParseError(source, lineno, e.what());
    }
  }
  return kb;
}

LexicalKB load_kb(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw DataError("cannot open knowledge base '" + path.string() + "'");
  return parse_kb(in, path.string());
}

}  // namespace kinfuse
