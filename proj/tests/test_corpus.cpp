#include <gtest/gtest.h>

#include <filesystem>
#include <set>

#include "oracles.hpp"
#include "stackdetect/corpus.hpp"

using namespace stackdetect;

namespace {

const char* kCrusades =
    "Have you ever heard of the Crusades? A time in which Christians went on a 200 year rampage throughout Europe "
    "and on their path to Isreal in which they slaughtered innocent people in the name of your God?";

std::string random_text(Rng& rng, std::size_t max_words = 12) {
  static const std::vector<std::string> pool{"the", "court", "of", "appeals", "held", "a", "claim,", "\"quoted\"",
                                             "line\nbreak", "United", "States.", "crlf\r\nx", "é", "日本", ""};
  std::string t;
  const std::size_t n = 1 + rng.below(max_words);
  for (std::size_t i = 0; i < n; ++i) {
    if (i) t += rng.below(5) == 0 ? "  " : " ";
    t += pool[rng.below(pool.size())];
  }
  if (t.find_first_not_of(' ') == std::string::npos) t = "x";
  return t;
}

std::vector<std::string> random_corpus(Rng& rng, std::size_t docs) {
  static const std::vector<std::string> words{"the", "court", "of",  "appeals", "united", "states", "a",
                                              "held", "The",  "Court,", "of.", "claim", "and",   "denied"};
  std::vector<std::string> c;
  for (std::size_t d = 0; d < docs; ++d) {
    std::string t;
    const std::size_t n = rng.below(25);
    for (std::size_t i = 0; i < n; ++i) t += (i ? " " : "") + words[rng.below(words.size())];
    c.push_back(t);
  }
  return c;
}

Dataset numbered(std::size_t n) {
  Dataset d;
  for (std::size_t i = 0; i < n; ++i) d.push_back({static_cast<std::int64_t>(i), "t" + std::to_string(i), int(i % 2)});
  return d;
}

}  // namespace

TEST(LoadCsv, SampleTrainingRow) {
  const std::string csv = std::string("id,text,label\n0,\"") + kCrusades + "\",1\n";
  auto ds = parse_dataset_csv(csv);
  ASSERT_EQ(ds.size(), 1u);
  EXPECT_EQ(ds[0].id, 0);
  EXPECT_EQ(ds[0].text, kCrusades);
  EXPECT_EQ(ds[0].label, 1);
}

TEST(LoadCsv, HeaderOnlyAndUnlabeled) {
  EXPECT_TRUE(parse_dataset_csv("id,text,label\n").empty());
  auto ds = parse_dataset_csv("id,text\r\n7,hello\r\n");
  ASSERT_EQ(ds.size(), 1u);
  EXPECT_FALSE(ds[0].label.has_value());
  auto reordered = parse_dataset_csv("label,id,text\n0,3,x\n");
  EXPECT_EQ(reordered[0].id, 3);
  EXPECT_EQ(reordered[0].label, 0);
}

TEST(LoadCsv, PreservesTextByteForByte) {
  auto ds = parse_dataset_csv("id,text,label\n1,\"  padded, \"\"quoted\"\"\nnext  \",0\n");
  EXPECT_EQ(ds[0].text, "  padded, \"quoted\"\nnext  ");
}

TEST(LoadCsv, Errors) {
  try {
    parse_dataset_csv("id,text,label\n0,a,1\n1,b,2\n");
    FAIL();
  } catch (const ValidationError& e) {
    EXPECT_NE(std::string(e.what()).find("row 2"), std::string::npos) << e.what();
  }
  EXPECT_THROW(parse_dataset_csv("id,label\n0,1\n"), SchemaError);
  EXPECT_THROW(parse_dataset_csv("text,label\na,1\n"), SchemaError);
  EXPECT_THROW(parse_dataset_csv("id,text,label\n0,a,1\n0,b,0\n"), ValidationError);
  EXPECT_THROW(parse_dataset_csv("id,text,label\nx,a,1\n"), ValidationError);
  EXPECT_THROW(parse_dataset_csv("id,text,label\n0,\"open,1\n"), SchemaError);
  EXPECT_THROW(parse_dataset_csv(""), SchemaError);
  EXPECT_THROW(load_csv("/nonexistent/file.csv"), StorageError);
}

TEST(LoadCsv, WriteThenLoadIsIdentity) {
  Rng rng(11);
  const auto dir = std::filesystem::temp_directory_path() / "stackdetect_corpus_rt";
  std::filesystem::create_directories(dir);
  for (int trial = 0; trial < 200; ++trial) {
    Dataset ds;
    const std::size_t n = rng.below(20);
    const bool labeled = rng.below(4) != 0;
    for (std::size_t i = 0; i < n; ++i) {
      LabeledExample e{static_cast<std::int64_t>(i * 7) - 30, random_text(rng), std::nullopt};
      if (labeled) e.label = static_cast<int>(rng.below(2));
      ds.push_back(e);
    }
    const std::string text = format_dataset_csv(ds);
    EXPECT_EQ(parse_dataset_csv(text), ds) << "trial " << trial;
    if (trial % 20 == 0) {
      write_csv(dir / "rt.csv", ds);
      EXPECT_EQ(load_csv(dir / "rt.csv"), ds);
    }
  }
  std::filesystem::remove_all(dir);
}

TEST(Split, PaperScaleSizes) {
  auto b = split_dataset(numbered(18000), {}, 42);
  EXPECT_EQ(b.train.size(), 14400u);
  EXPECT_EQ(b.validation.size(), 1800u);
  EXPECT_EQ(b.test.size(), 1800u);
}

TEST(Split, GoldenMembership) {
  auto digest = [](const SplitBundle& b) {
    std::string s;
    for (const auto* part : {&b.train, &b.validation, &b.test}) {
      for (const auto& e : *part) s += std::to_string(e.id) + ",";
      s += "|";
    }
    return sha256_hex(s);
  };
  const auto a = split_dataset(numbered(100), {}, 7);
  EXPECT_EQ(digest(a), digest(split_dataset(numbered(100), {}, 7)));
  EXPECT_NE(digest(a), digest(split_dataset(numbered(100), {}, 8)));
  EXPECT_EQ(digest(a), "443cd116467a83b13dc6777dfb2c921e5f97ba7ecf63da0603b4ce10add2ed8e");
}

TEST(Split, DisjointExhaustiveAndSizeExact) {
  Rng rng(12);
  for (int trial = 0; trial < 1000; ++trial) {
    const std::size_t n = 3 + rng.below(400);
    const std::uint64_t seed = rng.below(1u << 30);
    auto b = split_dataset(numbered(n), {}, seed);
    const auto floor_of = [n](double r) { return static_cast<std::size_t>(std::floor(n * r + 1e-9)); };
    ASSERT_EQ(b.validation.size(), floor_of(0.1));
    ASSERT_EQ(b.test.size(), floor_of(0.1));
    ASSERT_EQ(b.train.size(), n - 2 * floor_of(0.1));
    std::set<std::int64_t> ids;
    for (const auto* part : {&b.train, &b.validation, &b.test})
      for (const auto& e : *part) ASSERT_TRUE(ids.insert(e.id).second) << "duplicate id " << e.id;
    ASSERT_EQ(ids.size(), n);
    ASSERT_EQ(*ids.rbegin(), static_cast<std::int64_t>(n - 1));
  }
}

TEST(Split, Errors) {
  EXPECT_THROW(split_dataset(numbered(2), {}, 1), ValidationError);
  EXPECT_THROW(split_dataset(numbered(10), {0.5, 0.1, 0.1}, 1), ValidationError);
  EXPECT_THROW(split_dataset(numbered(10), {0.9, 0.1, 0.0}, 1), ValidationError);
}

TEST(Stats, SingleText) {
  Dataset d{{0, "a b c", 1}};
  auto s = compute_stats(d);
  EXPECT_EQ(s.count, 1u);
  EXPECT_EQ(s.mean_words, 3.0);
  EXPECT_EQ(s.std_words, 0.0);
  EXPECT_EQ(s.min_words, 3u);
  EXPECT_EQ(s.max_words, 3u);
}

TEST(Stats, HandCountedFixture) {
  // Word counts 1, 2, 3, 4, 10: mean 4, population variance 10.
  Dataset d{{0, "one", 1},
            {1, "two words", 0},
            {2, "  three\twords here ", 1},
            {3, "four\nwords on lines", 0},
            {4, "1 2 3 4 5 6 7 8 9 10", std::nullopt}};
  auto s = compute_stats(d);
  EXPECT_DOUBLE_EQ(s.mean_words, 4.0);
  EXPECT_NEAR(s.std_words, std::sqrt(10.0), 1e-12);
  EXPECT_EQ(s.min_words, 1u);
  EXPECT_EQ(s.max_words, 10u);
  EXPECT_EQ(s.label0, 2u);
  EXPECT_EQ(s.label1, 2u);
  EXPECT_EQ(s.unlabeled, 1u);
  auto j = s.to_json();
  EXPECT_EQ(j["word_count"]["max"], 10);
  EXPECT_EQ(j["labels"]["unlabeled"], 1);
}

TEST(Stats, BalancedLabels) {
  auto s = compute_stats(numbered(10));
  EXPECT_EQ(s.label0, 5u);
  EXPECT_EQ(s.label1, 5u);
  EXPECT_THROW(compute_stats(Dataset{}), ValidationError);
}

TEST(Stats, MatchesTwoPassReference) {
  Rng rng(13);
  for (int trial = 0; trial < 100; ++trial) {
    Dataset d;
    std::vector<double> counts;
    const std::size_t n = 1 + rng.below(60);
    for (std::size_t i = 0; i < n; ++i) {
      d.push_back({static_cast<std::int64_t>(i), random_text(rng, 40), int(rng.below(2))});
      counts.push_back(static_cast<double>(word_count(d.back().text)));
    }
    auto s = compute_stats(d);
    auto ref = oracle::two_pass(counts);
    EXPECT_NEAR(s.mean_words, ref.mean, 1e-12);
    EXPECT_NEAR(s.std_words, ref.std, 1e-12);
    EXPECT_LE(static_cast<double>(s.min_words), s.mean_words + 1e-12);
    EXPECT_LE(s.mean_words, static_cast<double>(s.max_words) + 1e-12);
    EXPECT_EQ(s.label0 + s.label1 + s.unlabeled, s.count);
  }
}

TEST(Stopwords, Examples) {
  const std::set<std::string> stop{"the", "of"};
  EXPECT_EQ(remove_stopwords("The court of appeals", stop), (std::vector<std::string>{"court", "appeals"}));
  EXPECT_EQ(remove_stopwords("The court, of Appeals!", {}),
            (std::vector<std::string>{"the", "court", "of", "appeals"}));
  EXPECT_TRUE(remove_stopwords("the OF the ...", stop).empty());
  EXPECT_EQ(parse_stoplist("The\n\n  of \r\n# comment\nand\n"), (std::set<std::string>{"the", "of", "and"}));
}

TEST(Stopwords, ShippedListLoads) {
  auto stop = load_stoplist(std::filesystem::path(STACKDETECT_SOURCE_DIR) / "data" / "stopwords_en.txt");
  EXPECT_TRUE(stop.contains("the"));
  EXPECT_TRUE(stop.contains("of"));
  EXPECT_FALSE(stop.contains("court"));
}

TEST(TopK, TwoDocumentExample) {
  AnalysisConfig cfg;
  cfg.n_low = cfg.n_high = 3;
  cfg.k = 1;
  std::vector<std::string> corpus{"a b c d", "a b c e"};
  auto top = top_k_ngrams(corpus, cfg);
  ASSERT_EQ(top.size(), 1u);
  EXPECT_EQ(top[0], PhraseCount("a b c", 2));
}

TEST(TopK, DefaultsAndValidation) {
  AnalysisConfig cfg;
  EXPECT_EQ(cfg.n_low, 3u);
  EXPECT_EQ(cfg.n_high, 4u);
  EXPECT_EQ(cfg.k, 10u);
  cfg.n_low = 5;
  EXPECT_THROW(cfg.validate(), ValidationError);
  cfg = {};
  cfg.n_low = 0;
  EXPECT_THROW(cfg.validate(), ValidationError);
  cfg = {};
  cfg.k = 0;
  EXPECT_THROW(cfg.validate(), ValidationError);
  std::vector<std::string> tiny{"a b"};
  EXPECT_TRUE(top_k_ngrams(tiny, AnalysisConfig{}).empty());
}

TEST(TopK, MatchesBruteForceAndIgnoresDocumentOrder) {
  Rng rng(14);
  const std::set<std::string> stop{"the", "of", "a", "and"};
  for (int trial = 0; trial < 20; ++trial) {
    auto corpus = random_corpus(rng, 20);
    AnalysisConfig cfg;
    if (trial % 2) cfg.stoplist = stop;
    auto got = top_k_ngrams(corpus, cfg);
    EXPECT_EQ(got, oracle::top_k(corpus, 3, 4, 10, cfg.stoplist)) << "trial " << trial;
    rng.shuffle(corpus);
    EXPECT_EQ(top_k_ngrams(corpus, cfg), got);
  }
}

TEST(Union, Examples) {
  std::vector<PhraseCount> a{{"x y z", 3}, {"a b c", 2}};
  std::vector<std::vector<PhraseCount>> same{a, a};
  EXPECT_EQ(union_across_splits(same), (std::vector<std::string>{"a b c", "x y z"}));
  std::vector<PhraseCount> l1, l2;
  for (int i = 0; i < 10; ++i) {
    l1.push_back({"p" + std::to_string(i), 1});
    l2.push_back({"q" + std::to_string(i), 1});
  }
  std::vector<std::vector<PhraseCount>> disjoint{l1, l2};
  auto u = union_across_splits(disjoint);
  EXPECT_EQ(u.size(), 20u);
  EXPECT_TRUE(std::is_sorted(u.begin(), u.end()));
}
