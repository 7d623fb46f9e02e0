#pragma once

#include <cmath>
#include <cstddef>
#include <cstdint>
#include <cstdio>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "qaid/corpus.hpp"
#include "qaid/encoder.hpp"
#include "qaid/error.hpp"
#include "qaid/index.hpp"
#include "qaid/textpipe.hpp"
#include "qaid/trainer.hpp"

namespace qaid {

namespace detail {

inline void check_vocab(const EncoderParams& p, const Vocab& vocab) {
  if (p.config.vocab_size != vocab.size()) {
    throw ShapeMismatchError("model vocab size " + std::to_string(p.config.vocab_size) + " differs from vocab size " +
                             std::to_string(vocab.size()));
  }
}

}  // namespace detail

/// Eval-mode projection of a raw query: no masking, no dropout.
inline ProjectedTokens project_query(const std::string& text, const EncoderParams& p, const Vocab& vocab) {
  detail::check_vocab(p, vocab);
  return forward(encode_query(text, vocab, p.config.max_len), p, false).proj;
}

/// Each intent name encoded on its own (no padding) in eval mode.
inline std::vector<IndexItem> answer_items(const EncoderParams& p, const Vocab& vocab, const IntentRegistry& registry) {
  detail::check_vocab(p, vocab);
  std::vector<IndexItem> out;
  for (const auto& ex : intent_name_examples(registry)) {
    const auto seq = encode_answers({ex.text}, vocab, p.config.max_len).front();
    out.push_back({ex.intent_id, forward(seq, p, false).proj});
  }
  return out;
}

/// Answer index over the intent names; nlist = 0 picks the default.
inline AnswerIndex build_answer_index(const EncoderParams& p, const Vocab& vocab, const IntentRegistry& registry,
                                      std::size_t nlist = 0, std::uint64_t seed = 0, bool quantize = true) {
  const auto items = answer_items(p, vocab, registry);
  std::size_t total = 0;
  for (const auto& it : items) total += detail::count_valid(it.tokens);
  return build_index(items, nlist == 0 ? default_nlist(total) : nlist, seed, {.quantize = quantize});
}

/// Match-QQ + Match-QA index: training queries labeled by intent plus the answers.
inline AnswerIndex build_qq_index(const EncoderParams& p, const Vocab& vocab, const IntentRegistry& registry,
                                  const std::vector<Example>& train, std::size_t nlist = 0, std::uint64_t seed = 0,
                                  bool quantize = true) {
  auto items = answer_items(p, vocab, registry);
  for (const auto& e : train) items.push_back({e.intent_id, project_query(e.text, p, vocab)});
  std::size_t total = 0;
  for (const auto& it : items) total += detail::count_valid(it.tokens);
  return build_index(items, nlist == 0 ? default_nlist(total) : nlist, seed,
                     {.quantize = quantize, .unique_labels = false});
}

/// Best answer for `text` with full retrieval (nprobe = nlist).
inline Hit predict_hit(const std::string& text, const EncoderParams& p, const Vocab& vocab, const AnswerIndex& idx) {
  const auto q = project_query(text, p, vocab);
  if (q.dim() != idx.dim) {
    throw ShapeMismatchError("model projects to " + std::to_string(q.dim()) + " dims but index stores " +
                             std::to_string(idx.dim));
  }
  return search(idx, q, 1, idx.nlist()).front();
}

inline int predict(const std::string& text, const EncoderParams& p, const Vocab& vocab, const AnswerIndex& idx) {
  return predict_hit(text, p, vocab, idx).label;
}

/// 1-NN over an index built by build_qq_index.
inline int predict_qq(const std::string& text, const EncoderParams& p, const Vocab& vocab, const AnswerIndex& qidx) {
  return predict_hit(text, p, vocab, qidx).label;
}

struct IntentAccuracy {
  std::string name;
  std::size_t correct = 0;
  std::size_t total = 0;
  double accuracy = 0.0;
};

struct EvalReport {
  double accuracy = 0.0;
  std::vector<IntentAccuracy> per_intent;  ///< intents present in the test set, by id
  std::size_t n_test = 0;
  std::vector<std::uint64_t> seeds;
  std::vector<double> seed_accuracies;
  double mean_accuracy = 0.0;
  double std_accuracy = 0.0;  ///< population standard deviation over seeds
};

/// Population mean and standard deviation.
inline std::pair<double, double> mean_std(const std::vector<double>& xs) {
  if (xs.empty()) return {0.0, 0.0};
  double sum = 0.0;
  for (double x : xs) sum += x;
  const double mean = sum / static_cast<double>(xs.size());
  double ss = 0.0;
  for (double x : xs) ss += (x - mean) * (x - mean);
  return {mean, std::sqrt(ss / static_cast<double>(xs.size()))};
}

inline EvalReport evaluate_predictions(const std::vector<int>& labels, const std::vector<int>& predictions,
                                       const IntentRegistry& registry) {
  if (labels.empty()) throw UsageError("cannot evaluate an empty test set");
  if (labels.size() != predictions.size()) throw UsageError("labels and predictions differ in length");
  std::vector<IntentAccuracy> acc(registry.size());
  std::size_t correct = 0;
  for (std::size_t i = 0; i < labels.size(); ++i) {
    auto& a = acc.at(static_cast<std::size_t>(labels[i]));
    ++a.total;
    if (labels[i] == predictions[i]) {
      ++a.correct;
      ++correct;
    }
  }
  EvalReport r;
  r.n_test = labels.size();
  r.accuracy = static_cast<double>(correct) / static_cast<double>(labels.size());
  for (std::size_t c = 0; c < acc.size(); ++c) {
    if (acc[c].total == 0) continue;
    acc[c].name = registry.names()[c];
    acc[c].accuracy = static_cast<double>(acc[c].correct) / static_cast<double>(acc[c].total);
    r.per_intent.push_back(acc[c]);
  }
  r.seed_accuracies = {r.accuracy};
  r.mean_accuracy = r.accuracy;
  return r;
}

inline EvalReport evaluate(const Dataset& test, const EncoderParams& p, const Vocab& vocab, const AnswerIndex& idx) {
  std::vector<int> labels, preds;
  for (const auto& e : test.examples) {
    labels.push_back(e.intent_id);
    preds.push_back(predict(e.text, p, vocab, idx));
  }
  return evaluate_predictions(labels, preds, test.registry);
}

/// Everything one fine-tune + index + evaluate run needs, minus the seed.
struct PipelineConfig {
  Dataset train;
  Dataset test;
  Vocab vocab;
  EncoderConfig model;
  std::optional<EncoderParams> init;  ///< pre-trained encoder; fresh per seed when empty
  TrainConfig finetune = TrainConfig::finetune_defaults();
  std::size_t nlist = 0;
  bool quantize = true;
};

struct SeedRun {
  EncoderParams params;
  AnswerIndex index;
  EvalReport report;
};

inline SeedRun run_seed(const PipelineConfig& cfg, std::uint64_t seed) {
  auto ft = cfg.finetune;
  ft.seed = seed;
  EncoderParams init = cfg.init ? *cfg.init : init_params(cfg.model, cfg.train.num_classes(), seed);
  auto trained = finetune(cfg.train.examples, cfg.train.registry, cfg.vocab, std::move(init), ft);
  auto idx = build_answer_index(trained.params, cfg.vocab, cfg.train.registry, cfg.nlist, seed, cfg.quantize);
  auto report = evaluate(cfg.test, trained.params, cfg.vocab, idx);
  return {std::move(trained.params), std::move(idx), std::move(report)};
}

/// Fine-tunes, indexes and evaluates once per seed; reports the mean and
/// population std of accuracy. Per-intent counts are pooled over seeds.
inline EvalReport multi_seed_eval(const PipelineConfig& cfg, const std::vector<std::uint64_t>& seeds) {
  if (seeds.empty()) throw UsageError("no seeds given");
  EvalReport out;
  out.seeds = seeds;
  for (auto s : seeds) {
    const auto run = run_seed(cfg, s);
    out.seed_accuracies.push_back(run.report.accuracy);
    out.n_test = run.report.n_test;
    if (out.per_intent.empty()) {
      out.per_intent = run.report.per_intent;
      for (auto& a : out.per_intent) a.correct = a.total = 0;
    }
    for (std::size_t i = 0; i < out.per_intent.size(); ++i) {
      out.per_intent[i].correct += run.report.per_intent[i].correct;
      out.per_intent[i].total += run.report.per_intent[i].total;
    }
  }
  for (auto& a : out.per_intent) a.accuracy = static_cast<double>(a.correct) / static_cast<double>(a.total);
  std::tie(out.mean_accuracy, out.std_accuracy) = mean_std(out.seed_accuracies);
  out.accuracy = out.mean_accuracy;
  return out;
}

/// Serialized form:
/// {"accuracy", "n_test", "mean_accuracy", "std_accuracy", "seeds": [..],
///  "seed_accuracies": [..], "per_intent": [{"intent","correct","total","accuracy"}]}
inline nlohmann::json report_to_json(const EvalReport& r) {
  nlohmann::json per = nlohmann::json::array();
  for (const auto& a : r.per_intent) {
    per.push_back({{"intent", a.name}, {"correct", a.correct}, {"total", a.total}, {"accuracy", a.accuracy}});
  }
  return {{"accuracy", r.accuracy},
          {"n_test", r.n_test},
          {"mean_accuracy", r.mean_accuracy},
          {"std_accuracy", r.std_accuracy},
          {"seeds", r.seeds},
          {"seed_accuracies", r.seed_accuracies},
          {"per_intent", per}};
}

inline std::string report_table(const EvalReport& r) {
  std::size_t width = 6;
  for (const auto& a : r.per_intent) width = std::max(width, a.name.size());
  std::string out;
  char buf[256];
  std::snprintf(buf, sizeof buf, "%-*s  %7s  %5s  %8s\n", static_cast<int>(width), "intent", "correct", "total",
                "accuracy");
  out += buf;
  for (const auto& a : r.per_intent) {
    std::snprintf(buf, sizeof buf, "%-*s  %7zu  %5zu  %8.4f\n", static_cast<int>(width), a.name.c_str(), a.correct,
                  a.total, a.accuracy);
    out += buf;
  }
  if (r.seeds.size() > 1) {
    for (std::size_t i = 0; i < r.seeds.size(); ++i) {
      std::snprintf(buf, sizeof buf, "seed %-6llu accuracy %.4f\n", static_cast<unsigned long long>(r.seeds[i]),
                    r.seed_accuracies[i]);
      out += buf;
    }
    std::snprintf(buf, sizeof buf, "mean %.4f  std %.4f  (n_test=%zu)\n", r.mean_accuracy, r.std_accuracy, r.n_test);
  } else {
    std::snprintf(buf, sizeof buf, "accuracy %.4f  (n_test=%zu)\n", r.accuracy, r.n_test);
  }
  out += buf;
  return out;
}

}  // namespace qaid
