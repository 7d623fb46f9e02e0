#pragma once

#include <cmath>
#include <cstddef>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <functional>
#include <map>
#include <span>
#include <sstream>
#include <string>
#include <vector>

#include "qaid/corpus.hpp"
#include "qaid/encoder.hpp"
#include "qaid/error.hpp"
#include "qaid/io.hpp"
#include "qaid/losses.hpp"
#include "qaid/rng.hpp"
#include "qaid/scoring.hpp"
#include "qaid/textpipe.hpp"

namespace qaid {

enum class Stage { pretrain, finetune };
enum class LossMode { supcon, npairs };

inline const char* to_string(Stage s) { return s == Stage::pretrain ? "pretrain" : "finetune"; }
inline const char* to_string(LossMode m) { return m == LossMode::supcon ? "supcon" : "npairs"; }
inline const char* to_string(ScoreMode m) { return m == ScoreMode::late_interaction ? "late" : "cls"; }

struct TrainConfig {
  Stage stage = Stage::finetune;
  std::size_t epochs = 10;
  std::size_t batch_n = 32;  ///< source examples per batch
  double lr = 1e-5;
  double tau = kDefaultTau;
  double lambda = kDefaultLambdaPretrain;  ///< MLM weight during pre-training
  double lambda_class = kDefaultLambdaClass;
  double lambda_mlm = kDefaultLambdaMlm;
  std::uint64_t seed = 0;
  ScoreMode score = ScoreMode::late_interaction;
  LossMode loss = LossMode::supcon;
  bool augment = true;
  MaskingRates masking;

  static TrainConfig pretrain_defaults() {
    TrainConfig c;
    c.stage = Stage::pretrain;
    c.epochs = 20;
    c.batch_n = 64;
    return c;
  }

  static TrainConfig finetune_defaults() { return TrainConfig{}; }

  void validate() const {
    if (batch_n == 0) throw UsageError("batch size must be positive");
    if (!(lr >= 0.0) || !std::isfinite(lr)) throw UsageError("learning rate must be non-negative");
    if (!(tau > 0.0)) throw UsageError("temperature must be positive");
    for (double l : {lambda, lambda_class, lambda_mlm}) {
      if (!(l >= 0.0)) throw UsageError("loss weights must be non-negative");
    }
    for (double r : {masking.select, masking.mask, masking.random}) {
      if (!(r >= 0.0 && r <= 1.0)) throw UsageError("masking rates must be in [0, 1]");
    }
    if (masking.mask + masking.random > 1.0) throw UsageError("mask + random rates exceed 1");
  }
};

/// Adam moments, shaped like the parameters.
struct OptimizerState {
  ParamGrads m;
  ParamGrads v;
  std::size_t step = 0;

  static OptimizerState for_params(const EncoderParams& p) { return {p.zeros_like(), p.zeros_like(), 0}; }
};

struct AdamOptions {
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

/// One bias-corrected Adam update. Rejects non-finite gradients.
inline void adam_step(EncoderParams& p, const ParamGrads& g, OptimizerState& s, double lr, const AdamOptions& o = {}) {
  auto pt = p.tensors();
  const auto gt = g.tensors();
  auto mt = s.m.tensors();
  auto vt = s.v.tensors();
  const auto names = EncoderParams::tensor_names();
  for (std::size_t k = 0; k < pt.size(); ++k) {
    if (!pt[k]->same_shape(*gt[k]) || !pt[k]->same_shape(*mt[k])) {
      throw UsageError("gradient shape mismatch for " + std::string(names[k]));
    }
    for (double x : gt[k]->data()) {
      if (!std::isfinite(x)) throw NumericError("non-finite gradient in " + std::string(names[k]));
    }
  }
  ++s.step;
  const double c1 = 1.0 - std::pow(o.beta1, static_cast<double>(s.step));
  const double c2 = 1.0 - std::pow(o.beta2, static_cast<double>(s.step));
  for (std::size_t k = 0; k < pt.size(); ++k) {
    auto& pd = pt[k]->data();
    const auto& gd = gt[k]->data();
    auto& md = mt[k]->data();
    auto& vd = vt[k]->data();
    for (std::size_t i = 0; i < pd.size(); ++i) {
      md[i] = o.beta1 * md[i] + (1.0 - o.beta1) * gd[i];
      vd[i] = o.beta2 * vd[i] + (1.0 - o.beta2) * gd[i] * gd[i];
      pd[i] -= lr * (md[i] / c1) / (std::sqrt(vd[i] / c2) + o.eps);
    }
  }
}

struct ContrastiveBatch {
  std::vector<AugmentedView> views;
  BatchStructure structure;
  std::vector<ViewMeta> meta;
};

namespace detail {

inline AugmentedView make_view(const TokenSeq& seq, std::uint64_t stream_seed, std::size_t view, std::size_t vocab_size,
                               bool augment, const MaskingRates& rates) {
  if (!augment) return {seq, {}};
  auto rng = Rng::derive(stream_seed, {view});
  return mask_augment(seq, rng, vocab_size, rates);
}

}  // namespace detail

/// Two augmented views per query; views 2i and 2i+1 come from query i.
inline ContrastiveBatch build_pretrain_batch(const std::vector<TokenSeq>& queries, std::size_t vocab_size, Rng& rng,
                                             bool augment = true, const MaskingRates& rates = {}) {
  if (queries.empty()) throw UsageError("pre-training batch is empty");
  const std::size_t n = queries.size();
  const std::uint64_t stream = rng.next();
  ContrastiveBatch b;
  auto& bs = b.structure;
  bs.size = 2 * n;
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t r = 0; r < 2; ++r) {
      const std::size_t t = 2 * i + r;
      b.views.push_back(detail::make_view(queries[i], stream, t, vocab_size, augment, rates));
      bs.pair_of.push_back(static_cast<int>(2 * i + 1 - r));
      bs.label_of.push_back(-1);
      bs.role_of.push_back(Role::query);
      bs.answer_of.push_back(-1);
      b.meta.push_back({i, r, Role::query, -1});
    }
  }
  return b;
}

/// 4n views: 2n augmented queries (2i, 2i+1 from example i) followed by 2n
/// augmented intent names (2n+2i, 2n+2i+1 from example i's intent).
inline ContrastiveBatch build_finetune_batch(const std::vector<Example>& examples, const IntentRegistry& registry,
                                             const Vocab& vocab, std::size_t max_len, Rng& rng, bool augment = true,
                                             const MaskingRates& rates = {}) {
  if (examples.empty()) throw UsageError("fine-tuning batch is empty");
  const std::size_t n = examples.size();
  const auto names = intent_name_examples(registry);
  std::vector<std::string> answer_texts;
  for (const auto& e : examples) {
    if (e.intent_id < 0 || static_cast<std::size_t>(e.intent_id) >= names.size()) {
      throw DataError("example \"" + e.text + "\" has no intent name in the registry");
    }
    answer_texts.push_back(names[static_cast<std::size_t>(e.intent_id)].text);
  }
  const auto answers = encode_answers(answer_texts, vocab, max_len);
  const std::uint64_t stream = rng.next();

  ContrastiveBatch b;
  auto& bs = b.structure;
  bs.size = 4 * n;
  b.views.resize(4 * n);
  bs.pair_of.resize(4 * n);
  bs.label_of.resize(4 * n);
  bs.role_of.resize(4 * n);
  bs.answer_of.assign(4 * n, -1);
  b.meta.resize(4 * n);
  for (std::size_t i = 0; i < n; ++i) {
    const auto query = encode_query(examples[i].text, vocab, max_len);
    const int label = examples[i].intent_id;
    for (std::size_t r = 0; r < 2; ++r) {
      const std::size_t q = 2 * i + r, a = 2 * n + 2 * i + r;
      b.views[q] = detail::make_view(query, stream, q, vocab.size(), augment, rates);
      b.views[a] = detail::make_view(answers[i], stream, a, vocab.size(), augment, rates);
      bs.pair_of[q] = static_cast<int>(2 * i + 1 - r);
      bs.pair_of[a] = static_cast<int>(2 * n + 2 * i + 1 - r);
      bs.label_of[q] = bs.label_of[a] = label;
      bs.role_of[q] = Role::query;
      bs.role_of[a] = Role::answer;
      bs.answer_of[q] = static_cast<int>(a);
      b.meta[q] = {i, r, Role::query, label};
      b.meta[a] = {i, r, Role::answer, label};
    }
  }
  return b;
}

struct BatchLosses {
  double total = 0.0;
  double contrastive = 0.0;
  double mlm = 0.0;
  double cls = 0.0;
};

/// Evaluates the stage objective on one batch and, when `grads` is given,
/// accumulates its exact gradient. Dropout masks for view t are drawn from
/// Rng::derive(dropout_seed, {t}), so repeated calls see identical masks.
inline BatchLosses batch_objective(const ContrastiveBatch& batch, const EncoderParams& p, const TrainConfig& cfg,
                                   std::uint64_t dropout_seed, ParamGrads* grads) {
  const std::size_t s = batch.views.size();
  std::vector<EncodingResult> enc;
  enc.reserve(s);
  for (std::size_t t = 0; t < s; ++t) {
    auto rng = Rng::derive(dropout_seed, {t});
    enc.push_back(forward(batch.views[t].seq, p, true, &rng));
  }
  std::vector<const ProjectedTokens*> proj;
  for (const auto& e : enc) proj.push_back(&e.proj);
  const auto scores = score_matrix(std::span<const ProjectedTokens* const>(proj), cfg.score, batch.meta);

  LossResult contrastive;
  if (cfg.stage == Stage::pretrain) {
    contrastive = self_contrastive(scores.values, batch.structure, cfg.tau);
  } else if (cfg.loss == LossMode::supcon) {
    contrastive = supervised_contrastive(scores.values, batch.structure, cfg.tau);
  } else {
    contrastive = npairs(scores.values, batch.structure, cfg.tau);
  }

  // MLM over every corrupted position of every view.
  std::vector<std::vector<std::size_t>> mlm_pos(s);
  std::vector<int> mlm_targets;
  std::vector<Matrix> mlm_per_view(s);
  std::size_t mlm_rows = 0;
  for (std::size_t t = 0; t < s; ++t) {
    for (const auto& [pos, id] : batch.views[t].mlm_targets) {
      mlm_pos[t].push_back(pos);
      mlm_targets.push_back(id);
    }
    mlm_per_view[t] = mlm_logits(enc[t], mlm_pos[t], p);
    mlm_rows += mlm_pos[t].size();
  }
  Matrix all_mlm(mlm_rows, p.config.vocab_size);
  for (std::size_t t = 0, row = 0; t < s; ++t) {
    for (std::size_t r = 0; r < mlm_pos[t].size(); ++r, ++row) {
      std::copy(mlm_per_view[t].row(r).begin(), mlm_per_view[t].row(r).end(), all_mlm.row(row).begin());
    }
  }
  const auto mlm = mlm_loss(all_mlm, mlm_targets);
  const double mlm_weight = cfg.stage == Stage::pretrain ? cfg.lambda : cfg.lambda_mlm;

  LossResult cls;
  std::vector<std::size_t> query_views;
  const bool use_cls = cfg.stage == Stage::finetune && p.num_classes > 0;
  if (use_cls) {
    std::vector<int> labels;
    for (std::size_t t = 0; t < s; ++t) {
      if (batch.structure.role_of[t] == Role::query) query_views.push_back(t);
    }
    Matrix logits(query_views.size(), p.num_classes);
    for (std::size_t r = 0; r < query_views.size(); ++r) {
      const auto l = class_logits(enc[query_views[r]], p);
      std::copy(l.begin(), l.end(), logits.row(r).begin());
      labels.push_back(batch.structure.label_of[query_views[r]]);
    }
    cls = classification_loss(logits, labels);
  }

  BatchLosses out;
  out.contrastive = contrastive.value;
  out.mlm = mlm.value;
  out.cls = cls.value;
  out.total = cfg.stage == Stage::pretrain
                  ? combine_pretrain(contrastive.value, mlm.value, cfg.lambda)
                  : combine_finetune(contrastive.value, cls.value, mlm.value, cfg.lambda_class, cfg.lambda_mlm);
  if (!std::isfinite(out.total)) throw NumericError("batch loss is not finite");
  if (!grads) return out;

  const auto grad_z = score_matrix_backward(std::span<const ProjectedTokens* const>(proj), cfg.score, contrastive.grad);
  std::vector<HeadCotangents> heads(s);
  if (mlm_weight != 0.0) {
    for (std::size_t t = 0, row = 0; t < s; ++t) {
      heads[t].mlm_positions = mlm_pos[t];
      heads[t].mlm = Matrix(mlm_pos[t].size(), p.config.vocab_size);
      for (std::size_t r = 0; r < mlm_pos[t].size(); ++r, ++row) {
        auto dst = heads[t].mlm.row(r);
        const auto src = mlm.grad.row(row);
        for (std::size_t k = 0; k < dst.size(); ++k) dst[k] = mlm_weight * src[k];
      }
    }
  }
  if (use_cls && cfg.lambda_class != 0.0) {
    for (std::size_t r = 0; r < query_views.size(); ++r) {
      const auto src = cls.grad.row(r);
      auto& dst = heads[query_views[r]].cls;
      dst.assign(src.begin(), src.end());
      for (auto& x : dst) x *= cfg.lambda_class;
    }
  }
  for (std::size_t t = 0; t < s; ++t) backward(enc[t], p, grad_z[t], heads[t], *grads);
  return out;
}

struct EpochStats {
  std::size_t epoch = 0;
  double total = 0.0;
  double contrastive = 0.0;
  double mlm = 0.0;
  double cls = 0.0;
};

struct TrainResult {
  EncoderParams params;
  std::vector<EpochStats> log;
};

/// epoch, mean_total, mean_contrastive, mean_mlm, mean_class (tab-separated).
inline std::string format_epoch_line(const EpochStats& e) {
  char buf[160];
  std::snprintf(buf, sizeof buf, "%zu\t%.9g\t%.9g\t%.9g\t%.9g", e.epoch, e.total, e.contrastive, e.mlm, e.cls);
  return buf;
}

using EpochCallback = std::function<void(const EpochStats&)>;

namespace detail {

/// Shuffled index batches; a short tail is kept only when it has >= 2 items.
inline std::vector<std::vector<std::size_t>> epoch_batches(std::size_t count, std::size_t batch_n, Rng& rng) {
  std::vector<std::size_t> order(count);
  for (std::size_t i = 0; i < count; ++i) order[i] = i;
  rng.shuffle(order);
  std::vector<std::vector<std::size_t>> out;
  for (std::size_t start = 0; start < count; start += batch_n) {
    const std::size_t end = std::min(count, start + batch_n);
    if (end - start < batch_n && end - start < 2) break;
    out.emplace_back(order.begin() + static_cast<std::ptrdiff_t>(start), order.begin() + static_cast<std::ptrdiff_t>(end));
  }
  return out;
}

template <typename MakeBatch>
TrainResult run_epochs(std::size_t count, EncoderParams params, const TrainConfig& cfg, MakeBatch make_batch,
                       const EpochCallback& on_epoch) {
  cfg.validate();
  TrainResult result{std::move(params), {}};
  auto state = OptimizerState::for_params(result.params);
  for (std::size_t epoch = 1; epoch <= cfg.epochs; ++epoch) {
    auto order_rng = Rng::derive(cfg.seed, {epoch, 0x0D3E});
    const auto batches = epoch_batches(count, cfg.batch_n, order_rng);
    EpochStats stats;
    stats.epoch = epoch;
    for (std::size_t b = 0; b < batches.size(); ++b) {
      auto batch_rng = Rng::derive(cfg.seed, {epoch, b, 0xBA7C});
      const auto batch = make_batch(batches[b], batch_rng);
      auto grads = result.params.zeros_like();
      const auto losses = batch_objective(batch, result.params, cfg, batch_rng.next(), &grads);
      adam_step(result.params, grads, state, cfg.lr);
      stats.total += losses.total;
      stats.contrastive += losses.contrastive;
      stats.mlm += losses.mlm;
      stats.cls += losses.cls;
    }
    if (!batches.empty()) {
      const double k = static_cast<double>(batches.size());
      stats.total /= k;
      stats.contrastive /= k;
      stats.mlm /= k;
      stats.cls /= k;
    }
    result.log.push_back(stats);
    if (on_epoch) on_epoch(stats);
  }
  return result;
}

}  // namespace detail

/// Self-supervised contrastive pre-training with the MLM auxiliary loss.
inline TrainResult pretrain(const std::vector<std::string>& texts, const Vocab& vocab, EncoderParams init,
                            TrainConfig cfg, const EpochCallback& on_epoch = {}) {
  if (texts.empty()) throw UsageError("pre-training corpus is empty");
  if (init.config.vocab_size != vocab.size()) throw ShapeMismatchError("encoder vocab size differs from vocab");
  cfg.stage = Stage::pretrain;
  std::vector<TokenSeq> seqs;
  seqs.reserve(texts.size());
  for (const auto& t : texts) seqs.push_back(encode_query(t, vocab, init.config.max_len));
  return detail::run_epochs(
      seqs.size(), std::move(init), cfg,
      [&](const std::vector<std::size_t>& idx, Rng& rng) {
        std::vector<TokenSeq> qs;
        for (auto i : idx) qs.push_back(seqs[i]);
        return build_pretrain_batch(qs, vocab.size(), rng, cfg.augment, cfg.masking);
      },
      on_epoch);
}

/// Supervised contrastive fine-tuning over queries and intent names. A class
/// head whose width differs from the registry is re-initialized.
inline TrainResult finetune(const std::vector<Example>& data, const IntentRegistry& registry, const Vocab& vocab,
                            EncoderParams init, TrainConfig cfg, const EpochCallback& on_epoch = {}) {
  if (data.empty()) throw UsageError("fine-tuning data is empty");
  if (registry.size() == 0) throw UsageError("intent registry is empty");
  if (init.config.vocab_size != vocab.size()) throw ShapeMismatchError("encoder vocab size differs from vocab");
  cfg.stage = Stage::finetune;
  if (init.num_classes != registry.size()) reset_class_head(init, registry.size(), cfg.seed);
  const std::size_t max_len = init.config.max_len;
  return detail::run_epochs(
      data.size(), std::move(init), cfg,
      [&](const std::vector<std::size_t>& idx, Rng& rng) {
        std::vector<Example> ex;
        for (auto i : idx) ex.push_back(data[i]);
        return build_finetune_batch(ex, registry, vocab, max_len, rng, cfg.augment, cfg.masking);
      },
      on_epoch);
}

/// Model shape plus training hyperparameters, as read from a config file.
struct ExperimentConfig {
  EncoderConfig model;
  TrainConfig train;
};

namespace detail {

inline bool parse_bool(const std::string& key, const std::string& v) {
  if (v == "true" || v == "1" || v == "yes" || v == "on") return true;
  if (v == "false" || v == "0" || v == "no" || v == "off") return false;
  throw UsageError("config key '" + key + "' expects a boolean, got '" + v + "'");
}

inline double parse_double(const std::string& key, const std::string& v) {
  try {
    std::size_t used = 0;
    const double d = std::stod(v, &used);
    if (used == v.size()) return d;
  } catch (const std::exception&) {
  }
  throw UsageError("config key '" + key + "' expects a number, got '" + v + "'");
}

inline std::uint64_t parse_uint(const std::string& key, const std::string& v) {
  try {
    std::size_t used = 0;
    if (!v.empty() && v[0] != '-') {
      const auto u = std::stoull(v, &used);
      if (used == v.size()) return u;
    }
  } catch (const std::exception&) {
  }
  throw UsageError("config key '" + key + "' expects a non-negative integer, got '" + v + "'");
}

}  // namespace detail

/// Applies `key = value` lines onto `cfg`. '#' starts a comment; unknown keys
/// are rejected.
inline void apply_config_text(const std::string& text, ExperimentConfig& cfg) {
  using Setter = std::function<void(const std::string&, const std::string&)>;
  auto& t = cfg.train;
  auto& m = cfg.model;
  const std::map<std::string, Setter> setters{
      {"epochs", [&](auto& k, auto& v) { t.epochs = detail::parse_uint(k, v); }},
      {"batch_size", [&](auto& k, auto& v) { t.batch_n = detail::parse_uint(k, v); }},
      {"lr", [&](auto& k, auto& v) { t.lr = detail::parse_double(k, v); }},
      {"tau", [&](auto& k, auto& v) { t.tau = detail::parse_double(k, v); }},
      {"lambda", [&](auto& k, auto& v) { t.lambda = detail::parse_double(k, v); }},
      {"lambda_class", [&](auto& k, auto& v) { t.lambda_class = detail::parse_double(k, v); }},
      {"lambda_mlm", [&](auto& k, auto& v) { t.lambda_mlm = detail::parse_double(k, v); }},
      {"seed", [&](auto& k, auto& v) { t.seed = detail::parse_uint(k, v); }},
      {"augment", [&](auto& k, auto& v) { t.augment = detail::parse_bool(k, v); }},
      {"mask_prob", [&](auto& k, auto& v) { t.masking.select = detail::parse_double(k, v); }},
      {"score",
       [&](auto& k, auto& v) {
         if (v == "late") t.score = ScoreMode::late_interaction;
         else if (v == "cls") t.score = ScoreMode::cls_cosine;
         else throw UsageError("config key '" + k + "' expects late or cls");
       }},
      {"loss",
       [&](auto& k, auto& v) {
         if (v == "supcon") t.loss = LossMode::supcon;
         else if (v == "npairs") t.loss = LossMode::npairs;
         else throw UsageError("config key '" + k + "' expects supcon or npairs");
       }},
      {"max_len", [&](auto& k, auto& v) { m.max_len = detail::parse_uint(k, v); }},
      {"d_model", [&](auto& k, auto& v) { m.d_model = detail::parse_uint(k, v); }},
      {"d_proj", [&](auto& k, auto& v) { m.d_proj = detail::parse_uint(k, v); }},
      {"dropout", [&](auto& k, auto& v) { m.dropout = detail::parse_double(k, v); }},
      {"mix", [&](auto& k, auto& v) { m.mix = detail::parse_bool(k, v); }},
  };
  std::istringstream in(text);
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (auto hash = line.find('#'); hash != std::string::npos) line.erase(hash);
    line = detail::trim(line);
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos) {
      throw UsageError("config line " + std::to_string(lineno) + ": expected 'key = value'");
    }
    const auto key = detail::trim(line.substr(0, eq));
    const auto value = detail::trim(line.substr(eq + 1));
    auto it = setters.find(key);
    if (it == setters.end()) throw UsageError("config line " + std::to_string(lineno) + ": unknown key '" + key + "'");
    it->second(key, value);
  }
}

inline void apply_config_file(const std::filesystem::path& path, ExperimentConfig& cfg) {
  apply_config_text(io::read_file(path), cfg);
}

}  // namespace qaid
