#pragma once

#include <cstddef>
#include <limits>
#include <span>
#include <utility>
#include <vector>

#include "qaid/encoder.hpp"
#include "qaid/error.hpp"
#include "qaid/tensor.hpp"

namespace qaid {

enum class ScoreMode { late_interaction, cls_cosine };

namespace detail {

inline std::size_t count_valid(const ProjectedTokens& t) {
  std::size_t n = 0;
  for (auto v : t.valid) n += v ? 1 : 0;
  return n;
}

inline void check_operands(const ProjectedTokens& u, const ProjectedTokens& v) {
  if (u.dim() != v.dim()) throw UsageError("operands have different projection widths");
  if (count_valid(u) == 0) throw UsageError("left operand has no valid positions");
  if (count_valid(v) == 0) throw UsageError("right operand has no valid positions");
}

/// Index of the best-matching valid v token for u token i; ties keep the lowest j.
inline std::pair<std::size_t, double> best_match(const ProjectedTokens& u, std::size_t i, const ProjectedTokens& v) {
  std::size_t best = 0;
  double best_s = -std::numeric_limits<double>::infinity();
  const auto ui = u.z.row(i);
  for (std::size_t j = 0; j < v.size(); ++j) {
    if (!v.valid[j]) continue;
    const double s = dot(ui, v.z.row(j));
    if (s > best_s) {
      best_s = s;
      best = j;
    }
  }
  return {best, best_s};
}

}  // namespace detail

/// Normalized MaxSim: mean over valid u tokens of the best dot product
/// against any valid v token.
inline double late_interaction(const ProjectedTokens& u, const ProjectedTokens& v) {
  detail::check_operands(u, v);
  double sum = 0.0;
  std::size_t n = 0;
  for (std::size_t i = 0; i < u.size(); ++i) {
    if (!u.valid[i]) continue;
    sum += detail::best_match(u, i, v).second;
    ++n;
  }
  return sum / static_cast<double>(n);
}

/// Adds upstream * d late_interaction(u, v) into gu / gv (shaped like u.z / v.z).
/// Only argmax pairs receive gradient.
inline void late_interaction_accumulate(const ProjectedTokens& u, const ProjectedTokens& v, double upstream,
                                        Matrix& gu, Matrix& gv) {
  detail::check_operands(u, v);
  if (upstream == 0.0) return;
  const double scale = upstream / static_cast<double>(detail::count_valid(u));
  for (std::size_t i = 0; i < u.size(); ++i) {
    if (!u.valid[i]) continue;
    const auto j = detail::best_match(u, i, v).first;
    add_to(gu.row(i), v.z.row(j), scale);
    add_to(gv.row(j), u.z.row(i), scale);
  }
}

inline std::pair<Matrix, Matrix> late_interaction_grad(const ProjectedTokens& u, const ProjectedTokens& v,
                                                       double upstream) {
  Matrix gu(u.size(), u.dim()), gv(v.size(), v.dim());
  late_interaction_accumulate(u, v, upstream, gu, gv);
  return {std::move(gu), std::move(gv)};
}

/// Cosine of the position-0 (CLS) projections.
inline double cls_cosine(const ProjectedTokens& u, const ProjectedTokens& v) {
  if (u.size() == 0 || v.size() == 0) throw UsageError("operand has no CLS position");
  if (u.dim() != v.dim()) throw UsageError("operands have different projection widths");
  return dot(u.z.row(0), v.z.row(0));
}

inline void cls_cosine_accumulate(const ProjectedTokens& u, const ProjectedTokens& v, double upstream,
                                  Matrix& gu, Matrix& gv) {
  if (upstream == 0.0) return;
  add_to(gu.row(0), v.z.row(0), upstream);
  add_to(gv.row(0), u.z.row(0), upstream);
}

inline double score(const ProjectedTokens& u, const ProjectedTokens& v, ScoreMode mode) {
  return mode == ScoreMode::late_interaction ? late_interaction(u, v) : cls_cosine(u, v);
}

struct ViewMeta {
  std::size_t source = 0;  ///< example index within the batch
  std::size_t view = 0;    ///< augmentation index
  Role role = Role::query;
  int label = -1;
};

/// Square matrix of anchor-vs-candidate scores; row t scores t against every view.
struct ScoreMatrix {
  Matrix values;
  std::vector<ViewMeta> meta;  ///< row and column identity
};

inline ScoreMatrix score_matrix(std::span<const ProjectedTokens* const> views, ScoreMode mode,
                                std::vector<ViewMeta> meta = {}) {
  const std::size_t s = views.size();
  if (s < 2) throw UsageError("score matrix needs at least two views");
  if (!meta.empty() && meta.size() != s) throw UsageError("view metadata length mismatch");
  ScoreMatrix out{Matrix(s, s), std::move(meta)};
  for (std::size_t t = 0; t < s; ++t) {
    for (std::size_t a = 0; a < s; ++a) out.values(t, a) = score(*views[t], *views[a], mode);
  }
  return out;
}

inline ScoreMatrix score_matrix(const std::vector<ProjectedTokens>& views, ScoreMode mode,
                                std::vector<ViewMeta> meta = {}) {
  std::vector<const ProjectedTokens*> ptrs;
  for (const auto& v : views) ptrs.push_back(&v);
  return score_matrix(std::span<const ProjectedTokens* const>(ptrs), mode, std::move(meta));
}

/// Pulls grad_scores back to per-view projection cotangents (one matrix per view).
inline std::vector<Matrix> score_matrix_backward(std::span<const ProjectedTokens* const> views, ScoreMode mode,
                                                 const Matrix& grad_scores) {
  const std::size_t s = views.size();
  if (grad_scores.rows() != s || grad_scores.cols() != s) throw UsageError("grad_scores shape mismatch");
  std::vector<Matrix> out;
  out.reserve(s);
  for (const auto* v : views) out.emplace_back(v->size(), v->dim());
  for (std::size_t t = 0; t < s; ++t) {
    for (std::size_t a = 0; a < s; ++a) {
      const double g = grad_scores(t, a);
      if (g == 0.0) continue;
      if (mode == ScoreMode::late_interaction) {
        late_interaction_accumulate(*views[t], *views[a], g, out[t], out[a]);
      } else {
        cls_cosine_accumulate(*views[t], *views[a], g, out[t], out[a]);
      }
    }
  }
  return out;
}

}  // namespace qaid
