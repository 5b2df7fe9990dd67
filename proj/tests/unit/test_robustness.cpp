#include <gtest/gtest.h>

#include <sstream>

#include "kinfuse/error.hpp"
#include "kinfuse/robustness.hpp"
#include "kinfuse/serialize.hpp"

#include <set>

using namespace kinfuse;

namespace {

LexicalKB kb() {
  LexicalKB k;
  k.add("hot", "cold", RelationKind::Antonym);
  k.add("car", "automobile", RelationKind::Synonym);
  k.add("big", "small", RelationKind::Antonym);
  k.add("big", "little", RelationKind::Antonym);
  k.add("dog", "animal", RelationKind::Hypernym);
  return k;
}

std::vector<SentenceTemplate> one_slot() { return {{"the soup is {x}"}}; }

std::vector<SentenceTemplate> bank() {
  return {{"the {y} is {x}"}, {"a {x} {y} today"}, {"we saw the {y} , it was {x}"}};
}

}  // namespace

TEST(SwapAnt, SingleCandidate) {
  Rng rng(0);
  const auto t = swap_antonyms({1, "the soup is hot", "the soup is hot"}, kb(), rng);
  ASSERT_TRUE(t);
  EXPECT_EQ(t->transformed.text_b, "the soup is cold");
  EXPECT_EQ(t->transformed.text_a, "the soup is hot");
  EXPECT_EQ(t->transformed.label, 0);
  ASSERT_EQ(t->swaps.size(), 1u);
  EXPECT_EQ(t->swaps[0], (Swap{3, "hot", "cold", RelationKind::Antonym}));
}

TEST(SwapAnt, SkipsWhenNothingToSwapOrNotParaphrase) {
  Rng rng(0);
  EXPECT_FALSE(swap_antonyms({1, "a dog", "a dog"}, kb(), rng));
  EXPECT_FALSE(swap_antonyms({0, "hot", "hot"}, kb(), rng));
}

TEST(SwapAnt, SeededChoiceAmongSeveralAntonyms) {
  std::string first;
  for (int run = 0; run < 3; ++run) {
    Rng rng(42);
    const auto t = swap_antonyms({1, "big box", "big box"}, kb(), rng);
    ASSERT_TRUE(t);
    if (run == 0) first = t->transformed.text_b;
    EXPECT_EQ(t->transformed.text_b, first);
  }
  bool saw_small = false, saw_little = false;
  Rng rng(1);
  for (int k = 0; k < 50; ++k) {
    const auto t = swap_antonyms({1, "big", "big"}, kb(), rng);
    saw_small |= t->transformed.text_b == "small";
    saw_little |= t->transformed.text_b == "little";
  }
  EXPECT_TRUE(saw_small && saw_little);
}

TEST(SwapSyn, KeepsLabel) {
  Rng rng(0);
  const auto t = swap_synonyms({1, "buy a car", "buy a car"}, kb(), rng);
  ASSERT_TRUE(t);
  EXPECT_EQ(t->transformed.text_b, "buy a automobile");
  EXPECT_EQ(t->transformed.label, 1);
  EXPECT_FALSE(swap_synonyms({1, "a dog", "a dog"}, kb(), rng));
  const auto z = swap_synonyms({0, "car", "the car"}, kb(), rng);
  ASSERT_TRUE(z);
  EXPECT_EQ(z->transformed.label, 0);
}

TEST(SwapSyn, TwoCycleRestoresOriginal) {
  Rng rng(0);
  const auto once = swap_synonyms({1, "buy a car", "buy a car"}, kb(), rng);
  const auto twice = swap_synonyms(once->transformed, kb(), rng);
  ASSERT_TRUE(twice);
  EXPECT_EQ(twice->transformed.text_b, "buy a car");
}

TEST(Transforms, OnlySwappedTokensChange) {
  const LabeledDataset data = [] {
    LabeledDataset d;
    d.examples = {{1, "x", "the hot car is big"}, {1, "x", "no match here"}, {0, "x", "hot dog"},
                  {1, "x", "cold , small !"}};
    return d;
  }();
  for (SwapKind kind : {SwapKind::Antonym, SwapKind::Synonym}) {
    Rng rng(3);
    const TransformResult r = transform_dataset(data, kb(), kind, rng);
    ASSERT_EQ(r.pairs.size(), r.source_index.size());
    for (std::size_t k = 0; k < r.pairs.size(); ++k) {
      const TransformedPair& p = r.pairs[k];
      EXPECT_FALSE(p.swaps.empty());
      const auto before = tokenize(p.original.text_b), after = tokenize(p.transformed.text_b);
      ASSERT_EQ(before.size(), after.size());
      std::vector<bool> swapped(before.size(), false);
      for (const Swap& s : p.swaps) {
        swapped[s.position] = true;
        EXPECT_EQ(before[s.position], s.old_lemma);
        EXPECT_EQ(after[s.position], s.new_lemma);
      }
      for (std::size_t i = 0; i < before.size(); ++i)
        if (!swapped[i]) EXPECT_EQ(before[i], after[i]);
      EXPECT_EQ(p.transformed.label, kind == SwapKind::Antonym ? 0 : p.original.label);
      EXPECT_EQ(p.transformed.text_a, p.original.text_a);
    }
    if (kind == SwapKind::Antonym) {
      EXPECT_EQ(r.source_index, (std::vector<std::size_t>{0, 3}));
    }
  }
}

TEST(Transforms, SwapsLogIsJson) {
  Rng rng(0);
  const auto t = swap_antonyms({1, "the soup is hot", "the soup is hot"}, kb(), rng);
  const Json j = Json::parse(swaps_jsonl(*t, 7));
  EXPECT_EQ(j["index"], 7);
  EXPECT_EQ(j["swaps"][0]["new"], "cold");
  EXPECT_EQ(j["swaps"][0]["relation"], "antonym");
}

TEST(Templates, ParseAndFill) {
  std::istringstream in("# bank\nthe {y} is {x}\n\nno slot here\n");
  EXPECT_THROW(parse_templates(in, "t"), ParseError);
  std::istringstream ok("# bank\nthe {y} is {x}\r\n{x} again\n");
  const auto b = parse_templates(ok, "t");
  ASSERT_EQ(b.size(), 2u);
  EXPECT_EQ(b[0].fill("hot", "soup"), "the soup is hot");
  EXPECT_FALSE(b[1].has_y());
}

TEST(Synthetic, TwoPairsOneTemplate) {
  LexicalKB k;
  k.add("hot", "cold", RelationKind::Antonym);
  k.add("car", "automobile", RelationKind::Synonym);
  Rng rng(0);
  const LabeledDataset d = gen_synthetic(k, 2, one_slot(), rng);
  ASSERT_EQ(d.size(), 2u);
  EXPECT_EQ(d.examples[0].label + d.examples[1].label, 1);
  for (const Example& e : d.examples) {
    if (e.label == 1) {
      EXPECT_NE(k.relation_vector(tokenize(e.text_a)[3], tokenize(e.text_b)[3])[RelationKind::Synonym], 0);
    } else {
      EXPECT_NE(k.relation_vector(tokenize(e.text_a)[3], tokenize(e.text_b)[3])[RelationKind::Antonym], 0);
    }
  }
}

TEST(Synthetic, SeededAndBalanced) {
  for (std::size_t n : {1, 2, 7, 50, 101}) {
    Rng a(5), b(5);
    const LabeledDataset x = gen_synthetic(kb(), n, bank(), a);
    const LabeledDataset y = gen_synthetic(kb(), n, bank(), b);
    EXPECT_EQ(x.examples, y.examples);
    ASSERT_EQ(x.size(), n);
    long ones = 0;
    for (const Example& e : x.examples) ones += e.label;
    EXPECT_LE(std::labs(2 * ones - static_cast<long>(n)), 1);
  }
}

TEST(Synthetic, TwoSlotLabelsFollowTheXSlot) {
  Rng rng(6);
  const std::vector<SentenceTemplate> b = {{"the {y} is {x}"}};
  for (const Example& e : gen_synthetic(kb(), 40, b, rng).examples) {
    const auto ta = tokenize(e.text_a), tb = tokenize(e.text_b);
    EXPECT_NE(kb().relation_vector(ta[1], tb[1])[RelationKind::Synonym], 0);
    if (e.label == 1) {
      EXPECT_EQ(ta[3], tb[3]);
    } else {
      EXPECT_NE(kb().relation_vector(ta[3], tb[3])[RelationKind::Antonym], 0);
    }
  }
}

TEST(Synthetic, NeedsBothRelationsAndTemplates) {
  LexicalKB only_ant;
  only_ant.add("hot", "cold", RelationKind::Antonym);
  Rng rng(0);
  EXPECT_THROW(gen_synthetic(only_ant, 4, bank(), rng), DataError);
  EXPECT_THROW(gen_synthetic(kb(), 4, {}, rng), DataError);
}

TEST(Synthetic, SplitsUseDisjointLexiconPairs) {
  LexicalKB k;
  for (int i = 0; i < 20; ++i) {
    k.add("s" + std::to_string(i), "t" + std::to_string(i), RelationKind::Synonym);
    k.add("p" + std::to_string(i), "q" + std::to_string(i), RelationKind::Antonym);
  }
  Rng rng(8);
  const SyntheticSplits s = gen_synthetic_splits(k, 200, bank(), rng);
  EXPECT_EQ(s.train.size() + s.val.size() + s.test.size(), 200u);
  EXPECT_EQ(s.val.size(), 30u);
  const auto words = [](const LabeledDataset& d) {
    std::set<std::string> out;
    for (const Example& e : d.examples)
      for (const std::string& t : tokenize(e.text_a + " " + e.text_b))
        if (t.size() > 1 && (t[0] == 's' || t[0] == 't' || t[0] == 'p' || t[0] == 'q') &&
            std::isdigit(static_cast<unsigned char>(t[1])))
          out.insert(t);
    return out;
  };
  const auto a = words(s.train), b = words(s.val), c = words(s.test);
  for (const std::string& w : b) EXPECT_FALSE(a.count(w)) << w;
  for (const std::string& w : c) EXPECT_FALSE(a.count(w) || b.count(w)) << w;
  LexicalKB small;
  small.add("a", "b", RelationKind::Synonym);
  small.add("c", "d", RelationKind::Antonym);
  EXPECT_THROW(gen_synthetic_splits(small, 10, bank(), rng), DataError);
}
