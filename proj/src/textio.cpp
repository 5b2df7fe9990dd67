#include "kinfuse/textio.hpp"

#include <unicode/locid.h>
#include <unicode/normalizer2.h>
#include <unicode/uchar.h>
#include <unicode/unistr.h>

#include <algorithm>
#include <charconv>
#include <fstream>
#include <istream>
#include <ostream>
#include <stdexcept>
#include <unordered_map>

#include "kinfuse/error.hpp"

namespace kinfuse {

std::vector<std::string_view> split_tabs(std::string_view line) {
  std::vector<std::string_view> out;
  std::size_t start = 0;
  while (true) {
    const std::size_t tab = line.find('\t', start);
    if (tab == std::string_view::npos) {
      out.push_back(line.substr(start));
      return out;
    }
    out.push_back(line.substr(start, tab - start));
    start = tab + 1;
  }
}

std::string_view trim_ascii(std::string_view s) {
  const auto ws = [](char c) { return c == ' ' || c == '\t' || c == '\r' || c == '\n'; };
  while (!s.empty() && ws(s.front())) s.remove_prefix(1);
  while (!s.empty() && ws(s.back())) s.remove_suffix(1);
  return s;
}

bool is_blank_or_comment(std::string_view line) {
  const std::string_view t = trim_ascii(line);
  return t.empty() || t.front() == '#';
}

std::vector<std::string> tokenize(std::string_view text) {
  UErrorCode status = U_ZERO_ERROR;
  const icu::Normalizer2* nfc = icu::Normalizer2::getNFCInstance(status);
  if (U_FAILURE(status)) throw std::runtime_error("tokenize: ICU NFC unavailable");
  icu::UnicodeString u = icu::UnicodeString::fromUTF8(
      icu::StringPiece(text.data(), static_cast<std::int32_t>(text.size())));
  u.toLower(icu::Locale::getRoot());
  u = nfc->normalize(u, status);
  if (U_FAILURE(status)) throw std::runtime_error("tokenize: NFC normalization failed");

  std::vector<std::string> tokens;
  icu::UnicodeString current;
  const auto flush = [&] {
    if (current.isEmpty()) return;
    std::string s;
    current.toUTF8String(s);
    tokens.push_back(std::move(s));
    current.remove();
  };
  for (std::int32_t i = 0; i < u.length();) {
    const UChar32 c = u.char32At(i);
    i += U16_LENGTH(c);
    if (u_isUWhiteSpace(c)) {
      flush();
    } else if (c < 0x80 && std::ispunct(static_cast<int>(c))) {
      flush();
      tokens.emplace_back(1, static_cast<char>(c));
    } else {
      current.append(c);
    }
  }
  flush();
  return tokens;
}

Vocab::Vocab() {
  for (const char* t : {"[PAD]", "[UNK]", "[CLS]", "[SEP]"}) push(t);
}

Vocab Vocab::from_tokens(std::vector<std::string> tokens) {
  Vocab v;
  if (tokens.size() < kNumReserved ||
      !std::equal(v.tokens_.begin(), v.tokens_.end(), tokens.begin())) {
    throw DataError("Vocab: token list must start with the reserved tokens");
  }
  for (std::size_t i = kNumReserved; i < tokens.size(); ++i) {
    if (v.contains(tokens[i])) throw DataError("Vocab: duplicate token '" + tokens[i] + "'");
    v.push(std::move(tokens[i]));
  }
  return v;
}

void Vocab::push(std::string token) {
  index_.emplace(token, static_cast<int>(tokens_.size()));
  tokens_.push_back(std::move(token));
}

int Vocab::id(std::string_view token) const {
  auto it = index_.find(token);
  return it == index_.end() ? kUnk : it->second;
}

bool Vocab::contains(std::string_view token) const { return index_.find(token) != index_.end(); }

Vocab build_vocab(const LabeledDataset& corpus, std::size_t min_freq) {
  if (min_freq < 1) throw std::invalid_argument("build_vocab: min_freq must be >= 1");
  if (corpus.empty()) throw DataError("build_vocab: empty corpus");
  std::unordered_map<std::string, std::size_t> freq;
  for (const Example& ex : corpus.examples) {
    for (auto& t : tokenize(ex.text_a)) ++freq[std::move(t)];
    for (auto& t : tokenize(ex.text_b)) ++freq[std::move(t)];
  }
  std::vector<std::pair<std::string, std::size_t>> kept;
  for (auto& [tok, n] : freq)
    if (n >= min_freq) kept.emplace_back(tok, n);
  std::sort(kept.begin(), kept.end(), [](const auto& x, const auto& y) {
    return x.second != y.second ? x.second > y.second : x.first < y.first;
  });
  std::vector<std::string> tokens = Vocab().tokens();
  for (auto& [tok, n] : kept) tokens.push_back(std::move(tok));
  return Vocab::from_tokens(std::move(tokens));
}

TokenizedPair encode_pair(const Vocab& vocab, std::string_view text_a, std::string_view text_b,
                          std::size_t max_a, std::size_t max_b) {
  if (max_a < 1 || max_b < 1) throw std::invalid_argument("encode_pair: limits must be >= 1");
  TokenizedPair p;
  p.lemmas_a = tokenize(text_a);
  p.lemmas_b = tokenize(text_b);
  if (p.lemmas_a.empty()) throw DataError("encode_pair: text_a has no tokens");
  if (p.lemmas_b.empty()) throw DataError("encode_pair: text_b has no tokens");
  if (p.lemmas_a.size() > max_a) p.lemmas_a.resize(max_a);
  if (p.lemmas_b.size() > max_b) p.lemmas_b.resize(max_b);

  p.ids.reserve(p.lemmas_a.size() + p.lemmas_b.size() + 3);
  p.ids.push_back(Vocab::kCls);
  for (const auto& t : p.lemmas_a) p.ids.push_back(vocab.id(t));
  p.ids.push_back(Vocab::kSep);
  for (const auto& t : p.lemmas_b) p.ids.push_back(vocab.id(t));
  p.ids.push_back(Vocab::kSep);
  return p;
}

LabeledDataset parse_dataset(std::istream& in, int num_classes, const std::string& source) {
  if (num_classes < 1) throw std::invalid_argument("parse_dataset: num_classes must be >= 1");
  LabeledDataset data;
  data.num_classes = num_classes;
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
    const std::string_view lab = trim_ascii(fields[0]);
    int label = 0;
    const auto [ptr, ec] = std::from_chars(lab.data(), lab.data() + lab.size(), label);
    if (ec != std::errc() || ptr != lab.data() + lab.size()) {
      throw ParseError(source, lineno, "label '" + std::string(lab) + "' is not an integer");
    }
    if (label < 0 || label >= num_classes) {
      throw ParseError(source, lineno,
                       "label " + std::to_string(label) + " outside [0, " +
                           std::to_string(num_classes) + ")");
    }
    data.examples.push_back({label, std::string(fields[1]), std::string(fields[2])});
  }
  return data;
}

LabeledDataset load_dataset(const std::filesystem::path& path, int num_classes) {
  std::ifstream in(path);
  if (!in) throw DataError("cannot open dataset '" + path.string() + "'");
  return parse_dataset(in, num_classes, path.string());
}

void write_dataset(std::ostream& out, const LabeledDataset& data) {
  for (const Example& ex : data.examples)
    out << ex.label << '\t' << ex.text_a << '\t' << ex.text_b << '\n';
}

void save_dataset(const std::filesystem::path& path, const LabeledDataset& data) {
  std::ofstream out(path);
  if (!out) throw DataError("cannot write dataset '" + path.string() + "'");
  write_dataset(out, data);
}

}  // namespace kinfuse
