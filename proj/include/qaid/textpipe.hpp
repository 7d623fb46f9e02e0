#pragma once

#include <algorithm>
#include <cctype>
#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <map>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

#include "qaid/error.hpp"
#include "qaid/io.hpp"
#include "qaid/rng.hpp"

namespace qaid {

inline constexpr int kPadId = 0;
inline constexpr int kMaskId = 1;
inline constexpr int kClsId = 2;
inline constexpr int kUnkId = 3;
inline constexpr int kNumSpecials = 4;
inline constexpr std::size_t kDefaultQueryLength = 32;

/// Lowercased words; ASCII whitespace and punctuation separate tokens and are dropped.
inline std::vector<std::string> tokenize(std::string_view text) {
  std::vector<std::string> out;
  std::string cur;
  for (char ch : text) {
    const auto uc = static_cast<unsigned char>(ch);
    if (uc < 0x80 && (std::isspace(uc) || std::ispunct(uc))) {
      if (!cur.empty()) out.push_back(std::move(cur));
      cur.clear();
    } else {
      cur.push_back(uc < 0x80 ? static_cast<char>(std::tolower(uc)) : ch);
    }
  }
  if (!cur.empty()) out.push_back(std::move(cur));
  return out;
}

class Vocab {
 public:
  Vocab() : id_to_token_{"[PAD]", "[MASK]", "[CLS]", "[UNK]"} { reindex(); }

  explicit Vocab(std::vector<std::string> tokens) : id_to_token_(std::move(tokens)) {
    const Vocab base;
    if (id_to_token_.size() < kNumSpecials ||
        !std::equal(base.id_to_token_.begin(), base.id_to_token_.end(), id_to_token_.begin())) {
      throw DataError("vocab must start with [PAD], [MASK], [CLS], [UNK]");
    }
    reindex();
  }

  std::size_t size() const { return id_to_token_.size(); }
  const std::string& token(int id) const { return id_to_token_.at(static_cast<std::size_t>(id)); }
  const std::vector<std::string>& tokens() const { return id_to_token_; }

  int id(const std::string& tok) const {
    auto it = token_to_id_.find(tok);
    return it == token_to_id_.end() ? kUnkId : it->second;
  }

  std::vector<int> encode(std::string_view text) const {
    std::vector<int> ids;
    for (const auto& t : tokenize(text)) ids.push_back(id(t));
    return ids;
  }

  friend bool operator==(const Vocab& a, const Vocab& b) { return a.id_to_token_ == b.id_to_token_; }

 private:
  void reindex() {
    token_to_id_.clear();
    for (std::size_t i = 0; i < id_to_token_.size(); ++i) {
      const auto& t = id_to_token_[i];
      if (t.empty() || t.find_first_of("\n\r") != std::string::npos) {
        throw DataError("invalid vocab token at id " + std::to_string(i));
      }
      if (!token_to_id_.emplace(t, static_cast<int>(i)).second) {
        throw DataError("duplicate vocab token: " + t);
      }
    }
  }

  std::vector<std::string> id_to_token_;
  std::unordered_map<std::string, int> token_to_id_;
};

/// Tokens with frequency >= min_freq, by descending frequency then ascending
/// byte order, after the four specials.
inline Vocab build_vocab(const std::vector<std::string>& corpus, std::size_t min_freq = 1) {
  if (corpus.empty()) throw UsageError("vocab corpus is empty");
  if (min_freq == 0) throw UsageError("min_freq must be positive");
  std::map<std::string, std::size_t> freq;
  std::size_t total = 0;
  for (const auto& doc : corpus) {
    for (auto& t : tokenize(doc)) {
      ++freq[std::move(t)];
      ++total;
    }
  }
  if (total == 0) throw DataError("vocab corpus contains no tokens");
  std::vector<std::pair<std::string, std::size_t>> kept;
  for (auto& [tok, n] : freq) {
    if (n >= min_freq) kept.emplace_back(tok, n);
  }
  std::stable_sort(kept.begin(), kept.end(), [](const auto& a, const auto& b) { return a.second > b.second; });
  std::vector<std::string> tokens = Vocab().tokens();
  for (auto& [tok, n] : kept) tokens.push_back(tok);
  return Vocab(std::move(tokens));
}

inline std::string vocab_to_text(const Vocab& v) {
  std::string out;
  for (const auto& t : v.tokens()) out += t + "\n";
  return out;
}

inline void save_vocab(const Vocab& v, const std::filesystem::path& path) {
  io::write_file_atomic(path, vocab_to_text(v));
}

inline Vocab load_vocab(const std::filesystem::path& path) {
  const auto text = io::read_file(path);
  std::vector<std::string> tokens;
  std::size_t start = 0;
  while (start < text.size()) {
    auto end = text.find('\n', start);
    if (end == std::string::npos) end = text.size();
    tokens.emplace_back(text.substr(start, end - start));
    start = end + 1;
  }
  return Vocab(std::move(tokens));
}

enum class Attn : std::uint8_t {
  real,      ///< source token or CLS
  pad_mask,  ///< query padding; scores like a real token
  pad_inert  ///< answer padding; never scored
};

enum class Role : std::uint8_t { query, answer };

struct TokenSeq {
  std::vector<int> ids;
  std::vector<Attn> attn;
  Role role = Role::query;

  std::size_t size() const { return ids.size(); }

  friend bool operator==(const TokenSeq&, const TokenSeq&) = default;
};

/// [CLS] + tokens, truncated to `m`, right-padded to `m` with scoring MASK tokens.
inline TokenSeq encode_query(std::string_view text, const Vocab& v, std::size_t m = kDefaultQueryLength) {
  if (m < 2) throw UsageError("query length must be at least 2");
  TokenSeq s;
  s.role = Role::query;
  s.ids.reserve(m);
  s.ids.push_back(kClsId);
  s.attn.push_back(Attn::real);
  for (int id : v.encode(text)) {
    if (s.ids.size() == m) break;
    s.ids.push_back(id);
    s.attn.push_back(Attn::real);
  }
  while (s.ids.size() < m) {
    s.ids.push_back(kMaskId);
    s.attn.push_back(Attn::pad_mask);
  }
  return s;
}

/// [CLS] + tokens for each answer, all padded with inert PAD to the longest
/// in the batch. Answers longer than `max_len` are truncated.
inline std::vector<TokenSeq> encode_answers(const std::vector<std::string>& texts, const Vocab& v,
                                            std::size_t max_len = kDefaultQueryLength) {
  if (texts.empty()) throw UsageError("answer batch is empty");
  std::vector<TokenSeq> out;
  out.reserve(texts.size());
  std::size_t width = 0;
  for (const auto& t : texts) {
    TokenSeq s;
    s.role = Role::answer;
    s.ids.push_back(kClsId);
    for (int id : v.encode(t)) {
      if (s.ids.size() == max_len) break;
      s.ids.push_back(id);
    }
    s.attn.assign(s.ids.size(), Attn::real);
    width = std::max(width, s.ids.size());
    out.push_back(std::move(s));
  }
  for (auto& s : out) {
    s.ids.resize(width, kPadId);
    s.attn.resize(width, Attn::pad_inert);
  }
  return out;
}

/// Corruption probabilities. Of the selected positions, `mask` go to MASK,
/// `random` to a uniformly drawn non-special token, the rest stay unchanged.
struct MaskingRates {
  double select = 0.15;
  double mask = 0.80;
  double random = 0.10;
};

struct AugmentedView {
  TokenSeq seq;
  std::map<std::size_t, int> mlm_targets;  ///< position -> original id

  friend bool operator==(const AugmentedView&, const AugmentedView&) = default;
};

/// BERT-style corruption of the real, non-CLS positions of `seq`.
inline AugmentedView mask_augment(const TokenSeq& seq, Rng& rng, std::size_t vocab_size,
                                  const MaskingRates& rates = {}) {
  AugmentedView v{seq, {}};
  for (std::size_t i = 1; i < seq.size(); ++i) {
    if (seq.attn[i] != Attn::real) continue;
    if (rng.uniform() >= rates.select) continue;
    v.mlm_targets.emplace(i, seq.ids[i]);
    const double r = rng.uniform();
    if (r < rates.mask) {
      v.seq.ids[i] = kMaskId;
    } else if (r < rates.mask + rates.random) {
      if (vocab_size > kNumSpecials) {
        v.seq.ids[i] = kNumSpecials + static_cast<int>(rng.below(vocab_size - kNumSpecials));
      } else {
        v.seq.ids[i] = kMaskId;
      }
    }
  }
  return v;
}

}  // namespace qaid
