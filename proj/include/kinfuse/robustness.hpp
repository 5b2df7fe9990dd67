#pragma once

#include <filesystem>
#include <iosfwd>
#include <optional>
#include <string>
#include <vector>

#include "kinfuse/lexkb.hpp"
#include "kinfuse/numcore.hpp"
#include "kinfuse/textio.hpp"

namespace kinfuse {

struct Swap {
  std::size_t position = 0;  ///< token index in text_b
  std::string old_lemma;
  std::string new_lemma;
  RelationKind kind = RelationKind::Synonym;
  friend bool operator==(const Swap&, const Swap&) = default;
};

struct TransformedPair {
  Example original;
  Example transformed;
  std::vector<Swap> swaps;
};

/// Replaces every text_b token that has a KB antonym. Skips pairs not
/// labeled 1 and pairs with nothing to swap; emitted pairs are labeled 0.
/// The output text is the token sequence joined by single spaces.
std::optional<TransformedPair> swap_antonyms(const Example& pair, const LexicalKB& kb, Rng& rng);
/// Same with synonyms; the label is kept.
std::optional<TransformedPair> swap_synonyms(const Example& pair, const LexicalKB& kb, Rng& rng);

struct TransformResult {
  LabeledDataset data;
  std::vector<TransformedPair> pairs;
  std::vector<std::size_t> source_index;  ///< input row of each emitted pair
};

enum class SwapKind { Antonym, Synonym };

TransformResult transform_dataset(const LabeledDataset& data, const LexicalKB& kb, SwapKind kind,
                                  Rng& rng);
/// {"index":i,"label":..,"text_b":..,"swaps":[{position,old,new,relation}]}
std::string swaps_jsonl(const TransformedPair& p, std::size_t index);

/// A template is a sentence with a `{x}` slot and an optional `{y}` slot.
///   one slot:  label 1 puts synonyms (s, s') into x; label 0 puts (w, ant(w)).
///   two slots: y always holds synonyms (s, s'); x holds (w, w) for label 1
///              and (w, ant(w)) for label 0.
/// Label 1 then has one cross-text relation fewer than label 0 in the
/// two-slot form, so relation counts alone separate the classes.
struct SentenceTemplate {
  std::string text;
  bool has_x() const;
  bool has_y() const;
  std::string fill(std::string_view x, std::string_view y = {}) const;
};

std::vector<SentenceTemplate> parse_templates(std::istream& in, const std::string& source);
std::vector<SentenceTemplate> load_templates(const std::filesystem::path& path);

/// Balanced (|#1 − #0| ≤ 1), shuffled pairs drawn from the KB's synonym and
/// antonym pairs. Throws DataError when the KB lacks either relation or the
/// bank is empty.
LabeledDataset gen_synthetic(const LexicalKB& kb, std::size_t n_pairs,
                             const std::vector<SentenceTemplate>& bank, Rng& rng);

struct SyntheticSplits {
  LabeledDataset train;
  LabeledDataset val;
  LabeledDataset test;
};

/// Partitions the synonym and antonym pairs 70/15/15 before generation so no
/// lexicon pair is shared between splits. `n_pairs` is divided the same way.
SyntheticSplits gen_synthetic_splits(const LexicalKB& kb, std::size_t n_pairs,
                                     const std::vector<SentenceTemplate>& bank, Rng& rng);

}  // namespace kinfuse
