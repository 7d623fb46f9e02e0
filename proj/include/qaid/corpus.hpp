#pragma once

#include <algorithm>
#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <map>
#include <optional>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "qaid/error.hpp"
#include "qaid/io.hpp"
#include "qaid/rng.hpp"

namespace qaid {

struct Example {
  std::string text;
  int intent_id = 0;

  friend bool operator==(const Example&, const Example&) = default;
};

/// Ordered intent names; index in `names()` is the class id.
class IntentRegistry {
 public:
  IntentRegistry() = default;

  explicit IntentRegistry(std::vector<std::string> names) : names_(std::move(names)) {
    for (std::size_t i = 0; i < names_.size(); ++i) {
      if (names_[i].empty()) throw DataError("intent name " + std::to_string(i) + " is empty");
      if (!name_to_id_.emplace(names_[i], static_cast<int>(i)).second) {
        throw DataError("duplicate intent name: " + names_[i]);
      }
    }
  }

  std::size_t size() const { return names_.size(); }
  const std::vector<std::string>& names() const { return names_; }
  const std::string& name(int id) const { return names_.at(static_cast<std::size_t>(id)); }

  std::optional<int> find(const std::string& name) const {
    auto it = name_to_id_.find(name);
    if (it == name_to_id_.end()) return std::nullopt;
    return it->second;
  }

  friend bool operator==(const IntentRegistry& a, const IntentRegistry& b) { return a.names_ == b.names_; }

 private:
  std::vector<std::string> names_;
  std::map<std::string, int> name_to_id_;
};

enum class Split { train, valid, test };

struct Dataset {
  std::vector<Example> examples;
  IntentRegistry registry;
  Split split = Split::train;

  std::size_t num_classes() const { return registry.size(); }

  std::vector<std::string> texts() const {
    std::vector<std::string> out;
    out.reserve(examples.size());
    for (const auto& e : examples) out.push_back(e.text);
    return out;
  }

  friend bool operator==(const Dataset&, const Dataset&) = default;
};

namespace detail {

inline std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r\n\f\v");
  if (b == std::string::npos) return {};
  const auto e = s.find_last_not_of(" \t\r\n\f\v");
  return s.substr(b, e - b + 1);
}

}  // namespace detail

/// Reads an intents.txt sidecar: one intent name per line, blank lines skipped.
inline IntentRegistry load_registry(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw DataError("cannot open intents file: " + path.string());
  std::vector<std::string> names;
  std::string line;
  while (std::getline(in, line)) {
    auto t = detail::trim(line);
    if (!t.empty()) names.push_back(std::move(t));
  }
  if (names.empty()) throw DataError("intents file is empty: " + path.string());
  return IntentRegistry(std::move(names));
}

inline void save_registry(const IntentRegistry& r, const std::filesystem::path& path) {
  std::string out;
  for (const auto& n : r.names()) out += n + "\n";
  io::write_file_atomic(path, out);
}

/// Loads a JSONL dataset with string fields "text" and "intent".
///
/// Without a registry, class ids follow the lexicographic order of the
/// distinct intent strings. With one, intents outside it are rejected.
inline Dataset load_dataset(const std::filesystem::path& path,
                            const IntentRegistry* registry = nullptr,
                            Split split = Split::train) {
  std::ifstream in(path);
  if (!in) throw DataError("cannot open dataset: " + path.string());

  std::vector<std::pair<std::string, std::string>> rows;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (detail::trim(line).empty()) continue;
    const auto where = path.string() + ": line " + std::to_string(lineno);
    nlohmann::json obj;
    try {
      obj = nlohmann::json::parse(line);
    } catch (const nlohmann::json::parse_error&) {
      throw DataError(where + " is not valid JSON");
    }
    if (!obj.is_object() || !obj.contains("text") || !obj.contains("intent") ||
        !obj["text"].is_string() || !obj["intent"].is_string()) {
      throw DataError(where + " must be an object with string fields \"text\" and \"intent\"");
    }
    auto text = obj["text"].get<std::string>();
    if (detail::trim(text).empty()) {
      throw DataError(where + " has empty text");
    }
    rows.emplace_back(std::move(text), obj["intent"].get<std::string>());
  }
  if (rows.empty()) throw DataError("dataset is empty: " + path.string());

  Dataset d;
  d.split = split;
  if (registry) {
    d.registry = *registry;
  } else {
    std::set<std::string> distinct;
    for (const auto& r : rows) distinct.insert(r.second);
    d.registry = IntentRegistry({distinct.begin(), distinct.end()});
  }
  d.examples.reserve(rows.size());
  for (std::size_t i = 0; i < rows.size(); ++i) {
    auto id = d.registry.find(rows[i].second);
    if (!id) throw DataError(path.string() + ": unknown intent \"" + rows[i].second + "\"");
    d.examples.push_back({std::move(rows[i].first), *id});
  }
  return d;
}

/// Texts of a JSONL corpus for pre-training. Only "text" is required, so
/// unlabeled corpora work; any "intent" field is ignored.
inline std::vector<std::string> load_texts(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw DataError("cannot open corpus: " + path.string());
  std::vector<std::string> out;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (detail::trim(line).empty()) continue;
    const auto where = path.string() + ": line " + std::to_string(lineno);
    nlohmann::json obj;
    try {
      obj = nlohmann::json::parse(line);
    } catch (const nlohmann::json::parse_error&) {
      throw DataError(where + " is not valid JSON");
    }
    if (!obj.is_object() || !obj.contains("text") || !obj["text"].is_string()) {
      throw DataError(where + " must be an object with a string field \"text\"");
    }
    auto text = obj["text"].get<std::string>();
    if (detail::trim(text).empty()) throw DataError(where + " has empty text");
    out.push_back(std::move(text));
  }
  if (out.empty()) throw DataError("corpus is empty: " + path.string());
  return out;
}

inline std::string dataset_to_jsonl(const Dataset& d) {
  std::string out;
  for (const auto& e : d.examples) {
    nlohmann::json obj{{"text", e.text}, {"intent", d.registry.name(e.intent_id)}};
    out += obj.dump() + "\n";
  }
  return out;
}

inline void save_dataset(const Dataset& d, const std::filesystem::path& path) {
  io::write_file_atomic(path, dataset_to_jsonl(d));
}

/// Balanced K-shot subset: exactly k examples per intent, chosen by a seeded
/// shuffle within each intent. Output is grouped by intent, original order
/// preserved inside each group.
inline Dataset sample_kshot(const Dataset& d, std::size_t k, std::uint64_t seed) {
  if (k == 0) throw UsageError("k must be positive");
  const std::size_t c = d.num_classes();
  std::vector<std::vector<std::size_t>> by_intent(c);
  for (std::size_t i = 0; i < d.examples.size(); ++i) {
    by_intent[static_cast<std::size_t>(d.examples[i].intent_id)].push_back(i);
  }
  Dataset out;
  out.registry = d.registry;
  out.split = d.split;
  for (std::size_t cls = 0; cls < c; ++cls) {
    auto& idx = by_intent[cls];
    if (idx.size() < k) {
      throw DataError("intent \"" + d.registry.name(static_cast<int>(cls)) + "\" has " +
                      std::to_string(idx.size()) + " examples, fewer than k=" + std::to_string(k));
    }
    auto rng = Rng::derive(seed, {cls});
    rng.shuffle(idx);
    idx.resize(k);
    std::sort(idx.begin(), idx.end());
    for (auto i : idx) out.examples.push_back(d.examples[i]);
  }
  return out;
}

/// Answer text for an intent label: "_" and "-" become spaces, lowercased.
inline std::string normalize_intent_name(const std::string& name) {
  std::string out;
  out.reserve(name.size());
  bool pending_space = false;
  for (char ch : name) {
    if (ch == '_' || ch == '-' || ch == ' ') {
      pending_space = !out.empty();
      continue;
    }
    if (pending_space) {
      out.push_back(' ');
      pending_space = false;
    }
    out.push_back(static_cast<char>(ch >= 'A' && ch <= 'Z' ? ch - 'A' + 'a' : ch));
  }
  return out;
}

inline std::vector<Example> intent_name_examples(const IntentRegistry& r) {
  std::vector<Example> out;
  out.reserve(r.size());
  for (std::size_t i = 0; i < r.size(); ++i) {
    out.push_back({normalize_intent_name(r.names()[i]), static_cast<int>(i)});
  }
  return out;
}

}  // namespace qaid
