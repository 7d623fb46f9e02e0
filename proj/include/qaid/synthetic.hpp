#pragma once

#include <array>
#include <cstddef>
#include <cstdint>
#include <string>
#include <vector>

#include "qaid/corpus.hpp"
#include "qaid/rng.hpp"

namespace qaid::synthetic {

/// Toy intent task: every intent owns three signature keywords; queries mix
/// one to three of them with up to two shared filler words. Intent names share no
/// tokens with their keywords, so name-to-query association must be learned.
struct ToyTask {
  Dataset train;  ///< K-shot
  Dataset test;
};

struct ToyIntent {
  const char* name;
  std::array<const char*, 3> keywords;
};

inline constexpr std::array<ToyIntent, 10> kToyIntents{{
    {"block_card", {"freeze", "stolen", "lock"}},
    {"check_balance", {"balance", "funds", "remaining"}},
    {"transfer_money", {"wire", "send", "recipient"}},
    {"exchange_rate", {"currency", "convert", "euros"}},
    {"change_pin", {"digits", "code", "reset"}},
    {"card_arrival", {"delivery", "mail", "arrive"}},
    {"cash_withdrawal", {"atm", "withdraw", "dispense"}},
    {"top_up", {"reload", "add", "prepaid"}},
    {"refund_request", {"return", "reimburse", "merchant"}},
    {"close_account", {"terminate", "delete", "cancel"}},
}};

inline constexpr std::array<const char*, 30> kFillers{
    "i",   "my",   "the",  "a",   "please", "need",  "want",    "to",    "can", "you",
    "help", "me",  "with", "how", "do",     "is",    "it",      "on",    "for", "today",
    "now", "quickly", "again", "why", "what", "there", "some", "this", "that", "just"};

namespace detail {

inline std::string make_query(const ToyIntent& intent, const std::vector<std::size_t>& keyword_idx, Rng& rng) {
  std::vector<std::string> words;
  for (auto k : keyword_idx) words.emplace_back(intent.keywords[k]);
  const std::size_t fillers = rng.below(3);
  for (std::size_t f = 0; f < fillers; ++f) words.emplace_back(kFillers[rng.below(kFillers.size())]);
  rng.shuffle(words);
  std::string out;
  for (const auto& w : words) out += (out.empty() ? "" : " ") + w;
  return out;
}

}  // namespace detail

/// `shots` training queries per intent; shot j uses 1 + j % 3 consecutive
/// keywords starting at j % 3, so every keyword appears once shots >= 3.
/// `test_per_intent` test queries use a random non-empty keyword subset.
inline ToyTask make_toy_task(std::uint64_t seed, std::size_t shots = 5, std::size_t test_per_intent = 20) {
  std::vector<std::string> names;
  for (const auto& t : kToyIntents) names.emplace_back(t.name);
  IntentRegistry registry(names);
  ToyTask task;
  task.train.registry = task.test.registry = registry;
  task.train.split = Split::train;
  task.test.split = Split::test;
  auto rng = Rng::derive(seed, {0x70F});
  for (std::size_t c = 0; c < kToyIntents.size(); ++c) {
    for (std::size_t j = 0; j < shots; ++j) {
      std::vector<std::size_t> kw;
      for (std::size_t k = 0; k <= j % 3; ++k) kw.push_back((j + k) % 3);
      task.train.examples.push_back({detail::make_query(kToyIntents[c], kw, rng), static_cast<int>(c)});
    }
  }
  for (std::size_t c = 0; c < kToyIntents.size(); ++c) {
    for (std::size_t j = 0; j < test_per_intent; ++j) {
      std::vector<std::size_t> kw{0, 1, 2};
      rng.shuffle(kw);
      kw.resize(1 + rng.below(3));
      task.test.examples.push_back({detail::make_query(kToyIntents[c], kw, rng), static_cast<int>(c)});
    }
  }
  return task;
}

}  // namespace qaid::synthetic
