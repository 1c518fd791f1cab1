#pragma once

// Independent reference implementations used only by tests. None of these
// call into the library code they check.

#include <algorithm>
#include <cctype>
#include <cmath>
#include <cstdint>
#include <map>
#include <set>
#include <string>
#include <utility>
#include <vector>

namespace oracle {

// Scalar AdamW recurrence, written directly from the update rule.
inline std::vector<double> adamw_trajectory(double w, const std::vector<double>& grads, double lr = 1e-3,
                                            double b1 = 0.9, double b2 = 0.999, double eps = 1e-8,
                                            double wd = 0.01) {
  double m = 0.0, v = 0.0;
  std::vector<double> out;
  int t = 0;
  for (double g : grads) {
    ++t;
    m = b1 * m + (1 - b1) * g;
    v = b2 * v + (1 - b2) * g * g;
    const double mh = m / (1 - std::pow(b1, t));
    const double vh = v / (1 - std::pow(b2, t));
    w = w - lr * mh / (std::sqrt(vh) + eps) - lr * wd * w;
    out.push_back(w);
  }
  return out;
}

// Naive BPE: recount every adjacent pair from scratch each round, pick the
// most frequent (ties: smaller left, then smaller right), merge left to right.
inline std::vector<std::pair<unsigned, unsigned>> bpe_merges(const std::vector<std::string>& corpus,
                                                             std::size_t target) {
  std::vector<std::vector<unsigned>> seqs;
  for (const auto& t : corpus) {
    std::vector<unsigned> s;
    for (unsigned char c : t) s.push_back(c);
    seqs.push_back(s);
  }
  std::vector<std::pair<unsigned, unsigned>> merges;
  while (merges.size() < target) {
    std::map<std::pair<unsigned, unsigned>, long> counts;
    for (const auto& s : seqs)
      for (std::size_t i = 0; i + 1 < s.size(); ++i) ++counts[{s[i], s[i + 1]}];
    std::pair<unsigned, unsigned> best{};
    long best_count = 0;
    for (const auto& [pair, c] : counts)  // map order = (left, right) ascending
      if (c > best_count) {
        best_count = c;
        best = pair;
      }
    if (best_count < 2) break;
    const unsigned fresh = 256 + static_cast<unsigned>(merges.size());
    merges.push_back(best);
    for (auto& s : seqs) {
      std::vector<unsigned> out;
      for (std::size_t i = 0; i < s.size();) {
        if (i + 1 < s.size() && s[i] == best.first && s[i + 1] == best.second) {
          out.push_back(fresh);
          i += 2;
        } else {
          out.push_back(s[i++]);
        }
      }
      s = out;
    }
  }
  return merges;
}

inline std::vector<std::string> words_of(const std::string& text, const std::set<std::string>& stop) {
  std::vector<std::string> words;
  std::string cur;
  auto flush = [&] {
    if (cur.empty()) return;
    std::size_t b = 0, e = cur.size();
    while (b < e && std::ispunct(static_cast<unsigned char>(cur[b]))) ++b;
    while (e > b && std::ispunct(static_cast<unsigned char>(cur[e - 1]))) --e;
    std::string w;
    for (std::size_t i = b; i < e; ++i) w += static_cast<char>(std::tolower(static_cast<unsigned char>(cur[i])));
    if (!w.empty() && !stop.count(w)) words.push_back(w);
    cur.clear();
  };
  for (char c : text) {
    if (std::isspace(static_cast<unsigned char>(c))) flush();
    else cur += c;
  }
  flush();
  return words;
}

// Nested-loop n-gram counter, full sort, then truncation to k.
inline std::vector<std::pair<std::string, std::size_t>> top_k(const std::vector<std::string>& corpus, std::size_t lo,
                                                              std::size_t hi, std::size_t k,
                                                              const std::set<std::string>& stop) {
  std::map<std::string, std::size_t> counts;
  for (const auto& doc : corpus) {
    auto w = words_of(doc, stop);
    for (std::size_t n = lo; n <= hi; ++n)
      for (std::size_t i = 0; i + n <= w.size(); ++i) {
        std::string p;
        for (std::size_t j = i; j < i + n; ++j) p += (j > i ? " " : "") + w[j];
        counts[p] += 1;
      }
  }
  std::vector<std::pair<std::string, std::size_t>> all(counts.begin(), counts.end());
  std::stable_sort(all.begin(), all.end(), [](const auto& a, const auto& b) { return a.second > b.second; });
  if (all.size() > k) all.resize(k);
  return all;
}

// Direct truncated-kernel convolution with per-output renormalization.
inline std::vector<double> gaussian_convolve(const std::vector<double>& x, double sigma) {
  if (sigma == 0.0) return x;
  const int r = static_cast<int>(std::ceil(3 * sigma));
  const int n = static_cast<int>(x.size());
  std::vector<double> y(x.size());
  for (int i = 0; i < n; ++i) {
    double num = 0, den = 0;
    for (int j = std::max(0, i - r); j <= std::min(n - 1, i + r); ++j) {
      const double w = std::exp(-(double(i - j) * double(i - j)) / (2 * sigma * sigma));
      num += w * x[j];
      den += w;
    }
    y[i] = num / den;
  }
  return y;
}

struct TwoPassStats {
  double mean, std;
};

inline TwoPassStats two_pass(const std::vector<double>& v) {
  double s = 0;
  for (double x : v) s += x;
  const double mean = s / v.size();
  double ss = 0;
  for (double x : v) ss += (x - mean) * (x - mean);
  return {mean, std::sqrt(ss / v.size())};
}

}  // namespace oracle
