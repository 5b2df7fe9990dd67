#include "kinfuse/robustness.hpp"

#include <fstream>
#include <istream>

#include "kinfuse/error.hpp"
#include "kinfuse/serialize.hpp"

namespace kinfuse {

namespace {

std::string join_tokens(const std::vector<std::string>& toks) {
  std::string out;
  for (std::size_t i = 0; i < toks.size(); ++i) {
    if (i) out += ' ';
    out += toks[i];
  }
  return out;
}

/// Candidates must survive tokenization as a single identical token, so the
/// rewritten text re-tokenizes to exactly the swapped sequence.
std::vector<std::string> single_token_related(const LexicalKB& kb, const std::string& lemma,
                                              RelationKind kind) {
  std::vector<std::string> out;
  for (std::string& c : kb.related(lemma, kind)) {
    const auto t = tokenize(c);
    if (t.size() == 1 && t[0] == c) out.push_back(std::move(c));
  }
  return out;
}

std::optional<TransformedPair> swap_with(const Example& pair, const LexicalKB& kb, Rng& rng,
                                         RelationKind kind) {
  std::vector<std::string> toks = tokenize(pair.text_b);
  TransformedPair out;
  for (std::size_t i = 0; i < toks.size(); ++i) {
    const auto cands = single_token_related(kb, toks[i], kind);
    if (cands.empty()) continue;
    const std::string& pick = cands.size() == 1 ? cands[0] : cands[rng.below(cands.size())];
    out.swaps.push_back({i, toks[i], pick, kind});
    toks[i] = pick;
  }
  if (out.swaps.empty()) return std::nullopt;
  out.original = pair;
  out.transformed = pair;
  out.transformed.text_b = join_tokens(toks);
  return out;
}

}  // namespace

std::optional<TransformedPair> swap_antonyms(const Example& pair, const LexicalKB& kb, Rng& rng) {
  if (pair.label != 1) return std::nullopt;
  auto out = swap_with(pair, kb, rng, RelationKind::Antonym);
  if (out) out->transformed.label = 0;
  return out;
}

std::optional<TransformedPair> swap_synonyms(const Example& pair, const LexicalKB& kb, Rng& rng) {
  return swap_with(pair, kb, rng, RelationKind::Synonym);
}

TransformResult transform_dataset(const LabeledDataset& data, const LexicalKB& kb, SwapKind kind,
                                  Rng& rng) {
  TransformResult r;
  r.data.num_classes = data.num_classes;
  for (std::size_t i = 0; i < data.size(); ++i) {
    auto t = kind == SwapKind::Antonym ? swap_antonyms(data.examples[i], kb, rng)
                                       : swap_synonyms(data.examples[i], kb, rng);
    if (!t) continue;
    r.data.examples.push_back(t->transformed);
    r.source_index.push_back(i);
    r.pairs.push_back(std::move(*t));
  }
  return r;
}

std::string swaps_jsonl(const TransformedPair& p, std::size_t index) {
  Json swaps = Json::array();
  for (const Swap& s : p.swaps) {
    swaps.push_back(Json{{"position", s.position},
                         {"old", s.old_lemma},
                         {"new", s.new_lemma},
                         {"relation", std::string(to_string(s.kind))}});
  }
  return Json{{"index", index},
              {"label", p.transformed.label},
              {"original_label", p.original.label},
              {"text_b", p.transformed.text_b},
              {"swaps", std::move(swaps)}}
      .dump();
}

bool SentenceTemplate::has_x() const { return text.find("{x}") != std::string::npos; }
bool SentenceTemplate::has_y() const { return text.find("{y}") != std::string::npos; }

std::string SentenceTemplate::fill(std::string_view x, std::string_view y) const {
  std::string out;
  for (std::size_t i = 0; i < text.size();) {
    if (text.compare(i, 3, "{x}") == 0) {
      out += x;
      i += 3;
    } else if (text.compare(i, 3, "{y}") == 0) {
      out += y;
      i += 3;
    } else {
      out += text[i++];
    }
  }
  return out;
}

std::vector<SentenceTemplate> parse_templates(std::istream& in, const std::string& source) {
  std::vector<SentenceTemplate> bank;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (is_blank_or_comment(line)) continue;
    SentenceTemplate t{std::string(trim_ascii(line))};
    if (!t.has_x()) throw ParseError(source, lineno, "template has no {x} slot");
    bank.push_back(std::move(t));
  }
  return bank;
}

std::vector<SentenceTemplate> load_templates(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw DataError("cannot open templates '" + path.string() + "'");
  return parse_templates(in, path.string());
}

namespace {

using LemmaPair = std::pair<std::string, std::string>;

struct Lexicon {
  std::vector<LemmaPair> synonyms;
  std::vector<LemmaPair> antonyms;
};

Lexicon lexicon_of(const LexicalKB& kb) {
  Lexicon lex{kb.pairs(RelationKind::Synonym), kb.pairs(RelationKind::Antonym)};
  const auto single = [](const LemmaPair& p) {
    const auto a = tokenize(p.first), b = tokenize(p.second);
    return a.size() == 1 && a[0] == p.first && b.size() == 1 && b[0] == p.second;
  };
  std::erase_if(lex.synonyms, [&](const LemmaPair& p) { return !single(p); });
  std::erase_if(lex.antonyms, [&](const LemmaPair& p) { return !single(p); });
  return lex;
}

LemmaPair oriented(const LemmaPair& p, Rng& rng) {
  return rng.bernoulli(0.5) ? p : LemmaPair{p.second, p.first};
}

LabeledDataset generate(const Lexicon& lex, std::size_t n_pairs,
                        const std::vector<SentenceTemplate>& bank, Rng& rng) {
  if (bank.empty()) throw DataError("synthetic: empty template bank");
  if (lex.synonyms.empty() || lex.antonyms.empty()) {
    throw DataError("synthetic: need at least one synonym and one antonym pair");
  }
  LabeledDataset out;
  const std::size_t n_pos = (n_pairs + 1) / 2;
  for (std::size_t k = 0; k < n_pairs; ++k) {
    const int label = k < n_pos ? 1 : 0;
    const SentenceTemplate& t = bank[rng.below(bank.size())];
    Example ex;
    ex.label = label;
    if (t.has_y()) {
      const LemmaPair syn = oriented(lex.synonyms[rng.below(lex.synonyms.size())], rng);
      const LemmaPair ant = oriented(lex.antonyms[rng.below(lex.antonyms.size())], rng);
      ex.text_a = t.fill(ant.first, syn.first);
      ex.text_b = t.fill(label == 1 ? ant.first : ant.second, syn.second);
    } else if (label == 1) {
      const LemmaPair syn = oriented(lex.synonyms[rng.below(lex.synonyms.size())], rng);
      ex.text_a = t.fill(syn.first);
      ex.text_b = t.fill(syn.second);
    } else {
      const LemmaPair ant = oriented(lex.antonyms[rng.below(lex.antonyms.size())], rng);
      ex.text_a = t.fill(ant.first);
      ex.text_b = t.fill(ant.second);
    }
    out.examples.push_back(std::move(ex));
  }
  rng.shuffle(out.examples);
  return out;
}

}  // namespace

LabeledDataset gen_synthetic(const LexicalKB& kb, std::size_t n_pairs,
                             const std::vector<SentenceTemplate>& bank, Rng& rng) {
  return generate(lexicon_of(kb), n_pairs, bank, rng);
}

SyntheticSplits gen_synthetic_splits(const LexicalKB& kb, std::size_t n_pairs,
                                     const std::vector<SentenceTemplate>& bank, Rng& rng) {
  Lexicon lex = lexicon_of(kb);
  if (lex.synonyms.size() < 3 || lex.antonyms.size() < 3) {
    throw DataError("synthetic splits: need at least three synonym and three antonym pairs");
  }
  rng.shuffle(lex.synonyms);
  rng.shuffle(lex.antonyms);
  // 70/15/15 with at least one pair per split
  const auto cut = [](std::size_t n) {
    std::size_t val = std::max<std::size_t>(1, n * 15 / 100);
    std::size_t test = std::max<std::size_t>(1, n * 15 / 100);
    return std::array<std::size_t, 3>{n - val - test, val, test};
  };
  const auto take = [](const std::vector<LemmaPair>& v, std::size_t from, std::size_t count) {
    return std::vector<LemmaPair>(v.begin() + static_cast<std::ptrdiff_t>(from),
                                  v.begin() + static_cast<std::ptrdiff_t>(from + count));
  };
  const auto syn = cut(lex.synonyms.size());
  const auto ant = cut(lex.antonyms.size());
  const auto sizes = cut(n_pairs);
  SyntheticSplits out;
  LabeledDataset* dst[3] = {&out.train, &out.val, &out.test};
  std::size_t s_off = 0, a_off = 0;
  for (int k = 0; k < 3; ++k) {
    Lexicon part{take(lex.synonyms, s_off, syn[k]), take(lex.antonyms, a_off, ant[k])};
    s_off += syn[k];
    a_off += ant[k];
    *dst[k] = generate(part, sizes[k], bank, rng);
  }
  return out;
}

}  // namespace kinfuse
