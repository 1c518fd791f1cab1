#pragma once

// Byte-level BPE. Ids 0..255 are raw bytes, merge r creates id 256 + r, and
// the three specials follow the last merge: CLS, SEP, PAD.

#include <algorithm>
#include <cstddef>
#include <cstdint>
#include <limits>
#include <set>
#include <span>
#include <string>
#include <string_view>
#include <tuple>
#include <unordered_map>
#include <utility>
#include <vector>

#include <json.hpp>

#include "stackdetect/errors.hpp"

namespace stackdetect {

using TokenId = std::uint32_t;

struct MergePair {
  TokenId left = 0;
  TokenId right = 0;
  friend auto operator<=>(const MergePair&, const MergePair&) = default;
};

class Vocabulary {
 public:
  static constexpr int kFormatVersion = 1;
  static constexpr std::size_t kByteTokens = 256;

  Vocabulary() { rebuild(); }
  explicit Vocabulary(std::vector<MergePair> merges) : merges_(std::move(merges)) { rebuild(); }

  const std::vector<MergePair>& merges() const& { return merges_; }
  std::vector<MergePair> merges() && { return std::move(merges_); }
  std::size_t merge_count() const { return merges_.size(); }
  std::size_t size() const { return kByteTokens + merges_.size() + 3; }

  TokenId cls() const { return static_cast<TokenId>(kByteTokens + merges_.size()); }
  TokenId sep() const { return cls() + 1; }
  TokenId pad() const { return cls() + 2; }
  bool is_special(TokenId id) const { return id >= cls() && id < size(); }

  // Byte expansion of a base or merged token.
  const std::string& bytes(TokenId id) const {
    if (id >= cls()) throw ValidationError("token id " + std::to_string(id) + " has no byte expansion");
    return expansions_[id];
  }

  // Rank of a pair, or npos if the pair was never merged.
  static constexpr std::size_t npos = std::numeric_limits<std::size_t>::max();
  std::size_t rank(TokenId left, TokenId right) const {
    auto it = ranks_.find(key(left, right));
    return it == ranks_.end() ? npos : it->second;
  }

  nlohmann::json to_json() const {
    nlohmann::json merges = nlohmann::json::array();
    for (const auto& m : merges_) merges.push_back({m.left, m.right});
    return {{"version", kFormatVersion},
            {"merges", std::move(merges)},
            {"specials", {{"cls", cls()}, {"sep", sep()}, {"pad", pad()}}}};
  }

  static Vocabulary from_json(const nlohmann::json& j) {
    try {
      if (j.at("version").get<int>() != kFormatVersion) {
        throw SchemaError("unsupported vocabulary version " + j.at("version").dump());
      }
      std::vector<MergePair> merges;
      for (const auto& m : j.at("merges")) {
        if (!m.is_array() || m.size() != 2) throw SchemaError("vocabulary merge entries must be [left, right]");
        const auto l = m[0].get<TokenId>(), r = m[1].get<TokenId>();
        const auto next_id = kByteTokens + merges.size();
        if (l >= next_id || r >= next_id) {
          throw ValidationError("merge " + std::to_string(merges.size()) + " references an id not yet defined");
        }
        merges.push_back({l, r});
      }
      Vocabulary v(std::move(merges));
      const auto& s = j.at("specials");
      if (s.at("cls").get<TokenId>() != v.cls() || s.at("sep").get<TokenId>() != v.sep() ||
          s.at("pad").get<TokenId>() != v.pad()) {
        throw ValidationError("special token ids do not follow the merge table");
      }
      return v;
    } catch (const nlohmann::json::exception& e) {
      throw SchemaError(std::string("malformed vocabulary: ") + e.what());
    }
  }

  friend bool operator==(const Vocabulary& a, const Vocabulary& b) { return a.merges_ == b.merges_; }

 private:
  static std::uint64_t key(TokenId l, TokenId r) { return (static_cast<std::uint64_t>(l) << 32) | r; }

  void rebuild() {
    expansions_.clear();
    ranks_.clear();
    expansions_.reserve(kByteTokens + merges_.size());
    for (std::size_t b = 0; b < kByteTokens; ++b) expansions_.emplace_back(1, static_cast<char>(b));
    for (std::size_t r = 0; r < merges_.size(); ++r) {
      const auto [l, rt] = merges_[r];
      if (l >= expansions_.size() || rt >= expansions_.size()) {
        throw ValidationError("merge " + std::to_string(r) + " references an undefined id");
      }
      if (!ranks_.emplace(key(l, rt), r).second) {
        throw ValidationError("duplicate merge pair at rank " + std::to_string(r));
      }
      expansions_.push_back(expansions_[l] + expansions_[rt]);
    }
  }

  std::vector<MergePair> merges_;
  std::vector<std::string> expansions_;
  std::unordered_map<std::uint64_t, std::size_t> ranks_;
};

struct TokenSequence {
  std::vector<TokenId> ids;   // always max_len entries
  std::size_t length = 0;     // tokens before padding, including CLS and SEP
  std::size_t max_len = 0;
};

inline std::vector<TokenId> bytes_to_ids(std::string_view text) {
  std::vector<TokenId> ids;
  ids.reserve(text.size());
  for (unsigned char c : text) ids.push_back(c);
  return ids;
}

// Greedy BPE: repeatedly merges the most frequent adjacent pair (ties go to
// the lower left id, then the lower right id) until `target_merges` merges
// exist or no pair occurs at least twice. Texts are never split, so merges
// may cross whitespace.
inline Vocabulary train_bpe(std::span<const std::string> corpus, std::size_t target_merges) {
  constexpr TokenId kDead = std::numeric_limits<TokenId>::max();
  constexpr std::int64_t kNone = -1;

  std::vector<TokenId> tok;
  std::vector<std::int64_t> prev, next;
  for (const auto& text : corpus) {
    const std::int64_t start = static_cast<std::int64_t>(tok.size());
    for (std::size_t i = 0; i < text.size(); ++i) {
      tok.push_back(static_cast<unsigned char>(text[i]));
      prev.push_back(i == 0 ? kNone : start + static_cast<std::int64_t>(i) - 1);
      next.push_back(i + 1 == text.size() ? kNone : start + static_cast<std::int64_t>(i) + 1);
    }
  }

  auto key = [](TokenId l, TokenId r) { return (static_cast<std::uint64_t>(l) << 32) | r; };
  std::unordered_map<std::uint64_t, std::int64_t> counts;
  std::unordered_map<std::uint64_t, std::vector<std::int64_t>> where;
  // Ordered by (-count, left, right): begin() is the next merge.
  std::set<std::tuple<std::int64_t, TokenId, TokenId>> queue;

  auto bump = [&](TokenId l, TokenId r, std::int64_t delta) {
    std::int64_t& c = counts[key(l, r)];
    if (c > 0) queue.erase({-c, l, r});
    c += delta;
    if (c > 0) queue.insert({-c, l, r});
  };

  for (std::size_t i = 0; i < tok.size(); ++i) {
    if (next[i] == kNone) continue;
    const TokenId l = tok[i], r = tok[static_cast<std::size_t>(next[i])];
    bump(l, r, 1);
    where[key(l, r)].push_back(static_cast<std::int64_t>(i));
  }

  std::vector<MergePair> merges;
  while (merges.size() < target_merges && !queue.empty()) {
    const auto [neg, l, r] = *queue.begin();
    if (-neg < 2) break;
    const TokenId fresh = static_cast<TokenId>(Vocabulary::kByteTokens + merges.size());
    merges.push_back({l, r});

    std::vector<std::int64_t> positions = std::move(where[key(l, r)]);
    where.erase(key(l, r));
    std::sort(positions.begin(), positions.end());
    positions.erase(std::unique(positions.begin(), positions.end()), positions.end());

    for (std::int64_t pos : positions) {
      const auto p = static_cast<std::size_t>(pos);
      if (tok[p] != l || next[p] == kNone) continue;
      const auto q = static_cast<std::size_t>(next[p]);
      if (tok[q] != r) continue;
      const std::int64_t before = prev[p];
      const std::int64_t after = next[q];
      if (before != kNone) bump(tok[static_cast<std::size_t>(before)], l, -1);
      bump(l, r, -1);
      if (after != kNone) bump(r, tok[static_cast<std::size_t>(after)], -1);

      tok[p] = fresh;
      tok[q] = kDead;
      next[p] = after;
      if (after != kNone) prev[static_cast<std::size_t>(after)] = pos;

      if (before != kNone) {
        bump(tok[static_cast<std::size_t>(before)], fresh, 1);
        where[key(tok[static_cast<std::size_t>(before)], fresh)].push_back(before);
      }
      if (after != kNone) {
        bump(fresh, tok[static_cast<std::size_t>(after)], 1);
        where[key(fresh, tok[static_cast<std::size_t>(after)])].push_back(pos);
      }
    }
  }
  return Vocabulary(std::move(merges));
}

// Applies merges lowest rank first, each to every occurrence left to right.
inline std::vector<TokenId> apply_merges(std::string_view text, const Vocabulary& vocab) {
  std::vector<TokenId> ids = bytes_to_ids(text);
  while (ids.size() >= 2) {
    std::size_t best = Vocabulary::npos;
    for (std::size_t i = 0; i + 1 < ids.size(); ++i) best = std::min(best, vocab.rank(ids[i], ids[i + 1]));
    if (best == Vocabulary::npos) break;
    const auto [l, r] = vocab.merges()[best];
    const auto fresh = static_cast<TokenId>(Vocabulary::kByteTokens + best);
    std::size_t w = 0;
    for (std::size_t i = 0; i < ids.size();) {
      if (i + 1 < ids.size() && ids[i] == l && ids[i + 1] == r) {
        ids[w++] = fresh;
        i += 2;
      } else {
        ids[w++] = ids[i++];
      }
    }
    ids.resize(w);
  }
  return ids;
}

// [CLS] content [SEP] [PAD]...; when too long the content is cut so that
// CLS and SEP both survive.
inline TokenSequence encode(std::string_view text, const Vocabulary& vocab, std::size_t max_len) {
  if (max_len < 2) throw ValidationError("encode requires max_len >= 2, got " + std::to_string(max_len));
  std::vector<TokenId> content = apply_merges(text, vocab);
  if (content.size() > max_len - 2) content.resize(max_len - 2);
  TokenSequence seq;
  seq.max_len = max_len;
  seq.ids.reserve(max_len);
  seq.ids.push_back(vocab.cls());
  seq.ids.insert(seq.ids.end(), content.begin(), content.end());
  seq.ids.push_back(vocab.sep());
  seq.length = seq.ids.size();
  seq.ids.resize(max_len, vocab.pad());
  return seq;
}

inline std::string decode(std::span<const TokenId> ids, const Vocabulary& vocab) {
  std::string out;
  for (TokenId id : ids) {
    if (id >= vocab.size()) {
      throw ValidationError("unknown token id " + std::to_string(id) + " (vocabulary size " +
                            std::to_string(vocab.size()) + ")");
    }
    if (vocab.is_special(id)) continue;
    out += vocab.bytes(id);
  }
  return out;
}

// 1 for real tokens (positions < length), 0 for padding.
inline std::vector<double> attention_mask(const TokenSequence& seq) {
  std::vector<double> mask(seq.ids.size(), 0.0);
  std::fill_n(mask.begin(), std::min(seq.length, mask.size()), 1.0);
  return mask;
}

}  // namespace stackdetect
