#pragma once

// Desk-scale labeled corpus for end-to-end benchmarking. Both classes draw
// from one word inventory so that only word order separates them:
//   label 1: sentences filled from fixed grammatical templates
//   label 0: an order-2 Markov chain whose successor table is sampled
//            uniformly from the inventory, giving different bigram statistics

#include <cstddef>
#include <cstdint>
#include <map>
#include <string>
#include <utility>
#include <vector>

#include "stackdetect/corpus.hpp"
#include "stackdetect/matrix.hpp"

namespace stackdetect::synthetic {

struct Inventory {
  std::vector<std::string> determiners{"the", "a", "this", "that", "every", "some"};
  std::vector<std::string> adjectives{"district", "federal", "appellate", "written", "prior", "final",
                                      "relevant", "original", "lower", "supreme", "public", "formal"};
  std::vector<std::string> nouns{"court", "judge", "appeal", "statute", "decree", "party", "claim",
                                 "jurisdiction", "opinion", "record", "motion", "petition", "trial", "state",
                                 "congress", "suit"};
  std::vector<std::string> verbs{"affirmed", "reversed", "held", "denied", "granted", "reviewed", "cited",
                                 "dismissed", "remanded", "considered"};
  std::vector<std::string> preps{"of", "in", "under", "by", "for", "with"};

  std::vector<std::string> all() const {
    std::vector<std::string> w;
    for (const auto* v : {&determiners, &adjectives, &nouns, &verbs, &preps}) w.insert(w.end(), v->begin(), v->end());
    return w;
  }
};

namespace detail {

inline const std::string& pick(Rng& rng, const std::vector<std::string>& v) { return v[rng.below(v.size())]; }

inline std::string template_sentence(Rng& rng, const Inventory& inv) {
  const auto& D = inv.determiners;
  const auto& A = inv.adjectives;
  const auto& N = inv.nouns;
  const auto& V = inv.verbs;
  const auto& P = inv.preps;
  std::string s;
  switch (rng.below(4)) {
    case 0:  // D A N V D N
      s = pick(rng, D) + " " + pick(rng, A) + " " + pick(rng, N) + " " + pick(rng, V) + " " + pick(rng, D) + " " +
          pick(rng, N);
      break;
    case 1:  // D N P D N V
      s = pick(rng, D) + " " + pick(rng, N) + " " + pick(rng, P) + " " + pick(rng, D) + " " + pick(rng, N) + " " +
          pick(rng, V);
      break;
    case 2:  // D N V D A N P D N
      s = pick(rng, D) + " " + pick(rng, N) + " " + pick(rng, V) + " " + pick(rng, D) + " " + pick(rng, A) + " " +
          pick(rng, N) + " " + pick(rng, P) + " " + pick(rng, D) + " " + pick(rng, N);
      break;
    default:  // P D A N D N V
      s = pick(rng, P) + " " + pick(rng, D) + " " + pick(rng, A) + " " + pick(rng, N) + " " + pick(rng, D) + " " +
          pick(rng, N) + " " + pick(rng, V);
      break;
  }
  return s + ".";
}

}  // namespace detail

class MarkovSource {
 public:
  MarkovSource(const Inventory& inv, std::uint64_t seed, std::size_t successors = 4) : words_(inv.all()) {
    Rng rng(seed);
    for (std::size_t a = 0; a < words_.size(); ++a)
      for (std::size_t b = 0; b < words_.size(); ++b) {
        auto& succ = table_[{a, b}];
        for (std::size_t s = 0; s < successors; ++s) succ.push_back(static_cast<std::size_t>(rng.below(words_.size())));
      }
  }

  std::string generate(Rng& rng, std::size_t n_words) const {
    std::size_t a = static_cast<std::size_t>(rng.below(words_.size()));
    std::size_t b = static_cast<std::size_t>(rng.below(words_.size()));
    std::string s = words_[a] + " " + words_[b];
    for (std::size_t i = 2; i < n_words; ++i) {
      const auto& succ = table_.at({a, b});
      const std::size_t c = succ[rng.below(succ.size())];
      s += " " + words_[c];
      a = b;
      b = c;
    }
    return s + ".";
  }

 private:
  std::vector<std::string> words_;
  std::map<std::pair<std::size_t, std::size_t>, std::vector<std::size_t>> table_;
};

// n_docs examples with ids 0..n_docs-1, labels balanced and shuffled.
inline Dataset generate_benchmark(std::size_t n_docs, std::uint64_t seed) {
  const Inventory inv;
  Rng rng(seed);
  MarkovSource markov(inv, derive_seed(seed, 1));
  std::vector<int> labels(n_docs);
  for (std::size_t i = 0; i < n_docs; ++i) labels[i] = i < n_docs / 2 ? 1 : 0;
  rng.shuffle(labels);
  Dataset out;
  out.reserve(n_docs);
  for (std::size_t i = 0; i < n_docs; ++i) {
    std::string text;
    if (labels[i] == 1) {
      const std::size_t sentences = 1 + rng.below(2);
      for (std::size_t s = 0; s < sentences; ++s) text += (s ? " " : "") + detail::template_sentence(rng, inv);
    } else {
      text = markov.generate(rng, 6 + rng.below(12));
    }
    out.push_back({static_cast<std::int64_t>(i), std::move(text), labels[i]});
  }
  return out;
}

}  // namespace stackdetect::synthetic
