#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <limits>
#include <string>
#include <vector>

#include "qaid/error.hpp"
#include "qaid/tensor.hpp"
#include "qaid/textpipe.hpp"

namespace qaid {

/// Identity of every view in a contrastive batch.
///
/// pair_of[t] is the other augmentation of the same source (or -1),
/// label_of[t] the class (or -1 when unlabeled), answer_of[t] the designated
/// answer view of a query view (or -1).
struct BatchStructure {
  std::size_t size = 0;
  std::vector<int> pair_of;
  std::vector<int> label_of;
  std::vector<Role> role_of;
  std::vector<int> answer_of;

  /// Same-class views excluding t.
  std::vector<std::size_t> positives(std::size_t t) const {
    std::vector<std::size_t> out;
    for (std::size_t p = 0; p < size; ++p) {
      if (p != t && label_of[p] == label_of[t]) out.push_back(p);
    }
    return out;
  }
};

struct LossResult {
  double value = 0.0;
  Matrix grad;                   ///< d value / d input (scores or logits)
  std::vector<double> per_row;   ///< per-anchor / per-position contribution
};

namespace detail {

inline void check_scores(const Matrix& scores, const BatchStructure& bs, double tau) {
  if (!(tau > 0.0)) throw UsageError("temperature must be positive");
  if (scores.rows() != bs.size || scores.cols() != bs.size) throw UsageError("score matrix does not match batch size");
}

/// Softmax over a ≠ t of scores(t, a) / tau; returns log-sum-exp.
inline double row_softmax(const Matrix& scores, std::size_t t, double tau, std::vector<double>& prob) {
  const std::size_t s = scores.cols();
  double mx = -std::numeric_limits<double>::infinity();
  for (std::size_t a = 0; a < s; ++a) {
    if (a != t) mx = std::max(mx, scores(t, a) / tau);
  }
  double sum = 0.0;
  prob.assign(s, 0.0);
  for (std::size_t a = 0; a < s; ++a) {
    if (a == t) continue;
    prob[a] = std::exp(scores(t, a) / tau - mx);
    sum += prob[a];
  }
  for (auto& p : prob) p /= sum;
  return mx + std::log(sum);
}

/// Row loss lse - mean_{p in P} s_tp / tau with its gradient written into grad row t.
inline double contrastive_row(const Matrix& scores, std::size_t t, const std::vector<std::size_t>& pos, double tau,
                              Matrix& grad) {
  std::vector<double> prob;
  const double lse = row_softmax(scores, t, tau, prob);
  const double w = 1.0 / static_cast<double>(pos.size());
  double mean_pos = 0.0;
  for (auto p : pos) mean_pos += scores(t, p) / tau;
  mean_pos *= w;
  for (std::size_t a = 0; a < scores.cols(); ++a) grad(t, a) = prob[a] / tau;
  for (auto p : pos) grad(t, p) -= w / tau;
  grad(t, t) = 0.0;
  return lse - mean_pos;
}

}  // namespace detail

/// Self-supervised batch contrastive loss: each view's only positive is its
/// paired augmentation; the denominator runs over all other views.
inline LossResult self_contrastive(const Matrix& scores, const BatchStructure& bs, double tau) {
  detail::check_scores(scores, bs, tau);
  if (bs.size % 2 != 0) throw UsageError("self-contrastive batch size must be even");
  if (bs.pair_of.size() != bs.size) throw UsageError("pair_of length mismatch");
  LossResult r{0.0, Matrix(bs.size, bs.size), std::vector<double>(bs.size, 0.0)};
  for (std::size_t t = 0; t < bs.size; ++t) {
    const int j = bs.pair_of[t];
    if (j < 0 || static_cast<std::size_t>(j) >= bs.size || static_cast<std::size_t>(j) == t ||
        bs.pair_of[static_cast<std::size_t>(j)] != static_cast<int>(t)) {
      throw UsageError("pair_of must be a fixed-point-free involution");
    }
    r.per_row[t] = detail::contrastive_row(scores, t, {static_cast<std::size_t>(j)}, tau, r.grad);
    r.value += r.per_row[t];
  }
  return r;
}

/// Supervised batch contrastive loss over queries and intent names: every
/// same-label view is a positive, averaged per anchor, summed over anchors.
inline LossResult supervised_contrastive(const Matrix& scores, const BatchStructure& bs, double tau) {
  detail::check_scores(scores, bs, tau);
  if (bs.label_of.size() != bs.size) throw UsageError("label_of length mismatch");
  LossResult r{0.0, Matrix(bs.size, bs.size), std::vector<double>(bs.size, 0.0)};
  for (std::size_t t = 0; t < bs.size; ++t) {
    const auto pos = bs.positives(t);
    if (pos.empty()) throw UsageError("view " + std::to_string(t) + " has no positives in the batch");
    r.per_row[t] = detail::contrastive_row(scores, t, pos, tau, r.grad);
    r.value += r.per_row[t];
  }
  return r;
}

/// N-pairs loss: each query view is an anchor whose single positive is its
/// designated answer view; every other view is a negative. Answer views are
/// not anchors.
inline LossResult npairs(const Matrix& scores, const BatchStructure& bs, double tau) {
  detail::check_scores(scores, bs, tau);
  if (bs.role_of.size() != bs.size || bs.answer_of.size() != bs.size) {
    throw UsageError("role_of/answer_of length mismatch");
  }
  LossResult r{0.0, Matrix(bs.size, bs.size), std::vector<double>(bs.size, 0.0)};
  for (std::size_t t = 0; t < bs.size; ++t) {
    if (bs.role_of[t] != Role::query) continue;
    const int a = bs.answer_of[t];
    if (a < 0 || static_cast<std::size_t>(a) >= bs.size || bs.role_of[static_cast<std::size_t>(a)] != Role::answer) {
      throw UsageError("query view " + std::to_string(t) + " has no answer view in the batch");
    }
    r.per_row[t] = detail::contrastive_row(scores, t, {static_cast<std::size_t>(a)}, tau, r.grad);
    r.value += r.per_row[t];
  }
  return r;
}

/// Mean cross-entropy of rows of `logits` against `targets`.
inline LossResult mean_cross_entropy(const Matrix& logits, const std::vector<int>& targets, const char* what) {
  if (logits.rows() != targets.size()) throw UsageError(std::string(what) + ": logits and targets misaligned");
  LossResult r{0.0, Matrix(logits.rows(), logits.cols()), std::vector<double>(logits.rows(), 0.0)};
  if (targets.empty()) return r;
  const double inv_n = 1.0 / static_cast<double>(targets.size());
  for (std::size_t i = 0; i < targets.size(); ++i) {
    const int y = targets[i];
    if (y < 0 || static_cast<std::size_t>(y) >= logits.cols()) {
      throw UsageError(std::string(what) + ": target " + std::to_string(y) + " out of range");
    }
    const auto row = logits.row(i);
    const double mx = *std::max_element(row.begin(), row.end());
    double sum = 0.0;
    for (double x : row) sum += std::exp(x - mx);
    const double lse = mx + std::log(sum);
    r.per_row[i] = lse - row[static_cast<std::size_t>(y)];
    r.value += r.per_row[i] * inv_n;
    for (std::size_t k = 0; k < row.size(); ++k) r.grad(i, k) = std::exp(row[k] - lse) * inv_n;
    r.grad(i, static_cast<std::size_t>(y)) -= inv_n;
  }
  return r;
}

/// Average cross-entropy over all masked positions; zero when nothing is masked.
inline LossResult mlm_loss(const Matrix& logits, const std::vector<int>& targets) {
  return mean_cross_entropy(logits, targets, "mlm_loss");
}

/// Mean cross-entropy of the class head over query views.
inline LossResult classification_loss(const Matrix& logits, const std::vector<int>& labels) {
  return mean_cross_entropy(logits, labels, "classification_loss");
}

inline constexpr double kDefaultTau = 0.07;
inline constexpr double kDefaultLambdaPretrain = 0.1;
inline constexpr double kDefaultLambdaClass = 0.1;
inline constexpr double kDefaultLambdaMlm = 0.05;

inline double combine_pretrain(double self_loss, double mlm, double lambda = kDefaultLambdaPretrain) {
  return self_loss + lambda * mlm;
}

inline double combine_finetune(double sup, double cls, double mlm, double lambda_class = kDefaultLambdaClass,
                               double lambda_mlm = kDefaultLambdaMlm) {
  return sup + lambda_class * cls + lambda_mlm * mlm;
}

}  // namespace qaid
