#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <map>
#include <optional>
#include <set>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

namespace kinfuse {

/// Lexical relation kinds in their fixed encoding order.
enum class RelationKind : std::uint8_t { Synonym = 0, Antonym = 1, Hypernym = 2, Hyponym = 3 };

inline constexpr std::size_t kNumRelations = 4;
inline constexpr std::array<RelationKind, kNumRelations> kAllRelations = {
    RelationKind::Synonym, RelationKind::Antonym, RelationKind::Hypernym, RelationKind::Hyponym};

std::string_view to_string(RelationKind kind);
std::optional<RelationKind> parse_relation(std::string_view token);

/// Multi-hot relation encoding over the RelationKind order.
struct RelationVector {
  std::array<std::uint8_t, kNumRelations> bits{};

  std::uint8_t operator[](RelationKind k) const { return bits[static_cast<std::size_t>(k)]; }
  std::uint8_t operator[](std::size_t i) const { return bits[i]; }
  bool is_zero() const noexcept;
  friend bool operator==(const RelationVector&, const RelationVector&) = default;
};

/// 1 iff any relation bit is set.
int indicator(const RelationVector& k) noexcept;

/// Lowercase + NFC. Surrounding whitespace is trimmed.
std::string normalize_lemma(std::string_view text);

/// Directional lemma-pair relations. Mirror entries are always present:
/// Synonym/Antonym are symmetric and (a,b,Hypernym) ⟺ (b,a,Hyponym), where
/// (a,b,Hypernym) reads "a is-a b".
class LexicalKB {
 public:
  /// Adds the relation and its mirror. Self-pairs are rejected with
  /// std::invalid_argument. Lemmas are normalized.
  void add(std::string_view a, std::string_view b, RelationKind kind);

  RelationVector relation_vector(std::string_view a, std::string_view b) const;

  /// Lemmas related to `lemma` by `kind`, sorted.
  std::vector<std::string> related(std::string_view lemma, RelationKind kind) const;
  bool has_relation(std::string_view lemma, RelationKind kind) const;

  /// Number of ordered pairs carrying `kind`.
  std::size_t count(RelationKind kind) const;
  /// Number of ordered pairs with any relation.
  std::size_t num_pairs() const noexcept { return entries_.size(); }
  bool empty() const noexcept { return entries_.empty(); }

  /// Unordered pairs {a,b} with a < b carrying a symmetric `kind`
  /// (Synonym/Antonym), or ordered (a is-a b) pairs for Hypernym.
  std::vector<std::pair<std::string, std::string>> pairs(RelationKind kind) const;

  friend bool operator==(const LexicalKB&, const LexicalKB&) = default;

 private:
  void insert_one(const std::string& a, const std::string& b, RelationKind kind);

  struct PairLess {
    using is_transparent = void;
    template <typename A, typename B>
    bool operator()(const A& x, const B& y) const {
      const std::string_view x1 = x.first, y1 = y.first;
      if (x1 != y1) return x1 < y1;
      return std::string_view(x.second) < std::string_view(y.second);
    }
  };

  std::map<std::pair<std::string, std::string>, std::uint8_t, PairLess> entries_;
  std::map<std::string, std::array<std::set<std::string>, kNumRelations>, std::less<>> index_;
};

RelationVector relation_vector(const LexicalKB& kb, std::string_view a, std::string_view b);

/// Parses `lemma_a<TAB>lemma_b<TAB>relation` lines; `#` comments and blank
/// lines are skipped. Throws ParseError naming the offending line.
LexicalKB parse_kb(std::istream& in, const std::string& source = "<kb>");
LexicalKB load_kb(const std::filesystem::path& path);

}  // namespace kinfuse
