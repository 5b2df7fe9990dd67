#pragma once

#include <cstddef>
#include <filesystem>
#include <iosfwd>
#include <map>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

namespace kinfuse {

// Line helpers shared by the TSV readers.
std::vector<std::string_view> split_tabs(std::string_view line);
std::string_view trim_ascii(std::string_view s);
bool is_blank_or_comment(std::string_view line);

/// Lowercases (NFC), splits on Unicode whitespace and emits every ASCII
/// punctuation character as its own token.
std::vector<std::string> tokenize(std::string_view text);

class Vocab {
 public:
  static constexpr int kPad = 0;
  static constexpr int kUnk = 1;
  static constexpr int kCls = 2;
  static constexpr int kSep = 3;
  static constexpr std::size_t kNumReserved = 4;

  /// Vocabulary holding only the reserved tokens.
  Vocab();
  /// Rebuilds from an index-ordered token list whose first four entries are
  /// the reserved tokens.
  static Vocab from_tokens(std::vector<std::string> tokens);

  std::size_t size() const noexcept { return tokens_.size(); }
  int id(std::string_view token) const;
  bool contains(std::string_view token) const;
  const std::string& token(int id) const { return tokens_.at(static_cast<std::size_t>(id)); }
  const std::vector<std::string>& tokens() const noexcept { return tokens_; }

  friend bool operator==(const Vocab& a, const Vocab& b) { return a.tokens_ == b.tokens_; }

 private:
  void push(std::string token);

  std::vector<std::string> tokens_;
  std::map<std::string, int, std::less<>> index_;
};

struct Example {
  int label = 0;
  std::string text_a;
  std::string text_b;
  friend bool operator==(const Example&, const Example&) = default;
};

struct LabeledDataset {
  std::vector<Example> examples;
  int num_classes = 2;

  std::size_t size() const noexcept { return examples.size(); }
  bool empty() const noexcept { return examples.empty(); }
};

/// Tokens with corpus frequency >= min_freq, ordered by (frequency desc,
/// token asc) after the reserved entries.
Vocab build_vocab(const LabeledDataset& corpus, std::size_t min_freq);

/// Encoded `[CLS] A [SEP] B [SEP]`.
struct TokenizedPair {
  std::vector<int> ids;
  std::vector<std::string> lemmas_a;
  std::vector<std::string> lemmas_b;
  std::optional<int> label;

  std::size_t m() const noexcept { return lemmas_a.size(); }
  std::size_t n() const noexcept { return lemmas_b.size(); }
  std::size_t length() const noexcept { return ids.size(); }

  static constexpr std::size_t cls_pos() noexcept { return 0; }
  std::size_t a_pos(std::size_t i) const noexcept { return 1 + i; }
  std::size_t sep1_pos() const noexcept { return m() + 1; }
  std::size_t b_pos(std::size_t j) const noexcept { return m() + 2 + j; }
  std::size_t sep2_pos() const noexcept { return m() + n() + 2; }
};

inline constexpr std::size_t kDefaultMaxLen = 24;

/// Truncates each side to its limit, maps OOV tokens to UNK. Throws DataError
/// when either side tokenizes to nothing.
TokenizedPair encode_pair(const Vocab& vocab, std::string_view text_a, std::string_view text_b,
                          std::size_t max_a = kDefaultMaxLen, std::size_t max_b = kDefaultMaxLen);

/// `label<TAB>text_a<TAB>text_b` lines; CRLF tolerated, `#` comments skipped.
LabeledDataset parse_dataset(std::istream& in, int num_classes = 2,
                             const std::string& source = "<dataset>");
LabeledDataset load_dataset(const std::filesystem::path& path, int num_classes = 2);
void write_dataset(std::ostream& out, const LabeledDataset& data);
void save_dataset(const std::filesystem::path& path, const LabeledDataset& data);

}  // namespace kinfuse
