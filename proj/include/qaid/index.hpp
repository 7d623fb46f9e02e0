#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <limits>
#include <set>
#include <string>
#include <utility>
#include <vector>

#include "qaid/encoder.hpp"
#include "qaid/error.hpp"
#include "qaid/io.hpp"
#include "qaid/rng.hpp"
#include "qaid/scoring.hpp"
#include "qaid/tensor.hpp"

namespace qaid {

/// One indexable item: a label and its projected tokens (invalid rows are dropped).
struct IndexItem {
  int label = 0;
  ProjectedTokens tokens;
};

struct Hit {
  int label = 0;
  double score = 0.0;

  friend bool operator==(const Hit&, const Hit&) = default;
};

/// Descending score, ties by ascending label, one hit per label.
using SearchResult = std::vector<Hit>;

/// Per-dimension 8-bit uniform quantizer over [lo, hi].
struct ScalarQuantizer {
  std::vector<double> lo;
  std::vector<double> hi;

  static constexpr double kLevels = 255.0;

  double step(std::size_t d) const { return (hi[d] - lo[d]) / kLevels; }

  std::uint8_t encode(std::size_t d, double x) const {
    const double range = hi[d] - lo[d];
    if (!(range > 0.0)) return 0;
    const double q = std::round((x - lo[d]) / range * kLevels);
    return static_cast<std::uint8_t>(std::clamp(q, 0.0, kLevels));
  }

  double decode(std::size_t d, std::uint8_t c) const { return lo[d] + static_cast<double>(c) * step(d); }
};

struct IndexEntry {
  int label = 0;
  std::size_t num_tokens = 0;
  std::vector<std::uint8_t> codes;  ///< num_tokens x dim, quantized mode
  std::vector<double> raw;          ///< num_tokens x dim, full-precision mode
  ProjectedTokens decoded;          ///< scoring view; rebuilt on load, not serialized
};

struct IndexOptions {
  bool quantize = true;
  bool unique_labels = true;  ///< false for Match-QQ indexes holding many items per intent
  std::size_t kmeans_iters = 10;
};

/// Inverted-file store of per-token answer projections with optional 8-bit
/// scalar quantization.
struct AnswerIndex {
  static constexpr std::uint32_t kFormatVersion = 1;

  std::size_t dim = 0;
  bool quantized = true;
  ScalarQuantizer quant;
  Matrix centroids;  ///< nlist x dim
  std::vector<std::vector<std::pair<std::uint32_t, std::uint32_t>>> postings;  ///< (entry, token)
  std::vector<IndexEntry> entries;

  std::size_t nlist() const { return centroids.rows(); }
  std::size_t total_tokens() const {
    std::size_t n = 0;
    for (const auto& e : entries) n += e.num_tokens;
    return n;
  }
};

inline std::size_t default_nlist(std::size_t total_tokens) {
  return std::max<std::size_t>(1, static_cast<std::size_t>(std::ceil(std::sqrt(static_cast<double>(total_tokens)))));
}

namespace detail {

inline double sq_dist(std::span<const double> a, std::span<const double> b) {
  double s = 0.0;
  for (std::size_t k = 0; k < a.size(); ++k) {
    const double d = a[k] - b[k];
    s += d * d;
  }
  return s;
}

inline std::size_t nearest_centroid(const Matrix& centroids, std::span<const double> x) {
  std::size_t best = 0;
  double best_d = std::numeric_limits<double>::infinity();
  for (std::size_t c = 0; c < centroids.rows(); ++c) {
    const double d = sq_dist(centroids.row(c), x);
    if (d < best_d) {
      best_d = d;
      best = c;
    }
  }
  return best;
}

inline void decode_entry(const AnswerIndex& idx, IndexEntry& e) {
  e.decoded.z = Matrix(e.num_tokens, idx.dim);
  e.decoded.valid.assign(e.num_tokens, 1);
  for (std::size_t t = 0; t < e.num_tokens; ++t) {
    for (std::size_t d = 0; d < idx.dim; ++d) {
      const std::size_t k = t * idx.dim + d;
      e.decoded.z(t, d) = idx.quantized ? idx.quant.decode(d, e.codes[k]) : e.raw[k];
    }
  }
}

/// Seeded Lloyd iterations; initial centroids are distinct tokens drawn by a
/// seeded permutation. Empty clusters keep their previous centroid.
inline Matrix kmeans(const std::vector<std::span<const double>>& points, std::size_t k, std::size_t dim,
                     std::size_t iters, Rng& rng) {
  std::vector<std::size_t> order(points.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
  rng.shuffle(order);
  Matrix centroids(k, dim);
  for (std::size_t c = 0; c < k; ++c) {
    std::copy(points[order[c]].begin(), points[order[c]].end(), centroids.row(c).begin());
  }
  std::vector<std::size_t> assign(points.size());
  for (std::size_t it = 0; it < iters; ++it) {
    for (std::size_t i = 0; i < points.size(); ++i) assign[i] = nearest_centroid(centroids, points[i]);
    Matrix sums(k, dim);
    std::vector<std::size_t> counts(k, 0);
    for (std::size_t i = 0; i < points.size(); ++i) {
      add_to(sums.row(assign[i]), points[i]);
      ++counts[assign[i]];
    }
    for (std::size_t c = 0; c < k; ++c) {
      if (counts[c] == 0) continue;
      auto row = centroids.row(c);
      for (std::size_t d = 0; d < dim; ++d) row[d] = sums(c, d) / static_cast<double>(counts[c]);
    }
  }
  return centroids;
}

}  // namespace detail

/// Quantizes every valid answer token, clusters them into `nlist` cells and
/// files each token under its nearest centroid.
inline AnswerIndex build_index(const std::vector<IndexItem>& items, std::size_t nlist, std::uint64_t seed,
                               const IndexOptions& opts = {}) {
  if (items.empty()) throw UsageError("cannot index zero answers");
  AnswerIndex idx;
  idx.dim = items.front().tokens.dim();
  idx.quantized = opts.quantize;
  std::set<int> labels;
  std::size_t total = 0;
  for (const auto& it : items) {
    if (it.tokens.dim() != idx.dim) throw UsageError("answers have inconsistent projection widths");
    if (opts.unique_labels && !labels.insert(it.label).second) {
      throw UsageError("duplicate intent id " + std::to_string(it.label) + " in answer index");
    }
    std::size_t valid = detail::count_valid(it.tokens);
    if (valid == 0) throw UsageError("answer for intent " + std::to_string(it.label) + " has no valid tokens");
    total += valid;
  }
  if (nlist == 0 || nlist > total) {
    throw UsageError("nlist must be in [1, " + std::to_string(total) + "], got " + std::to_string(nlist));
  }

  idx.quant.lo.assign(idx.dim, std::numeric_limits<double>::infinity());
  idx.quant.hi.assign(idx.dim, -std::numeric_limits<double>::infinity());
  for (const auto& it : items) {
    for (std::size_t t = 0; t < it.tokens.size(); ++t) {
      if (!it.tokens.valid[t]) continue;
      for (std::size_t d = 0; d < idx.dim; ++d) {
        idx.quant.lo[d] = std::min(idx.quant.lo[d], it.tokens.z(t, d));
        idx.quant.hi[d] = std::max(idx.quant.hi[d], it.tokens.z(t, d));
      }
    }
  }

  for (const auto& it : items) {
    IndexEntry e;
    e.label = it.label;
    for (std::size_t t = 0; t < it.tokens.size(); ++t) {
      if (!it.tokens.valid[t]) continue;
      ++e.num_tokens;
      for (std::size_t d = 0; d < idx.dim; ++d) {
        const double x = it.tokens.z(t, d);
        if (idx.quantized) e.codes.push_back(idx.quant.encode(d, x));
        else e.raw.push_back(x);
      }
    }
    detail::decode_entry(idx, e);
    idx.entries.push_back(std::move(e));
  }

  std::vector<std::span<const double>> points;
  std::vector<std::pair<std::uint32_t, std::uint32_t>> owners;
  for (std::size_t a = 0; a < idx.entries.size(); ++a) {
    for (std::size_t t = 0; t < idx.entries[a].num_tokens; ++t) {
      points.push_back(idx.entries[a].decoded.z.row(t));
      owners.emplace_back(static_cast<std::uint32_t>(a), static_cast<std::uint32_t>(t));
    }
  }
  auto rng = Rng::derive(seed, {0x1DF});
  idx.centroids = detail::kmeans(points, nlist, idx.dim, opts.kmeans_iters, rng);
  idx.postings.assign(nlist, {});
  for (std::size_t i = 0; i < points.size(); ++i) {
    idx.postings[detail::nearest_centroid(idx.centroids, points[i])].push_back(owners[i]);
  }
  return idx;
}

namespace detail {

inline SearchResult rank(std::vector<Hit> hits, std::size_t topk) {
  std::sort(hits.begin(), hits.end(), [](const Hit& a, const Hit& b) {
    return a.score != b.score ? a.score > b.score : a.label < b.label;
  });
  SearchResult out;
  std::set<int> seen;
  for (const auto& h : hits) {
    if (out.size() == topk) break;
    if (seen.insert(h.label).second) out.push_back(h);
  }
  return out;
}

}  // namespace detail

/// Entries owning at least one token in the `nprobe` cells nearest to some
/// valid query token. With nprobe = nlist every entry is a candidate.
inline std::vector<std::size_t> candidate_entries(const AnswerIndex& idx, const ProjectedTokens& query,
                                                  std::size_t nprobe) {
  std::vector<std::size_t> out;
  if (nprobe >= idx.nlist()) {
    for (std::size_t a = 0; a < idx.entries.size(); ++a) out.push_back(a);
    return out;
  }
  std::vector<std::uint8_t> probe(idx.nlist(), 0);
  std::vector<std::pair<double, std::size_t>> dist(idx.nlist());
  for (std::size_t i = 0; i < query.size(); ++i) {
    if (!query.valid[i]) continue;
    for (std::size_t c = 0; c < idx.nlist(); ++c) dist[c] = {detail::sq_dist(idx.centroids.row(c), query.z.row(i)), c};
    std::partial_sort(dist.begin(), dist.begin() + static_cast<std::ptrdiff_t>(nprobe), dist.end());
    for (std::size_t r = 0; r < nprobe; ++r) probe[dist[r].second] = 1;
  }
  std::vector<std::uint8_t> hit(idx.entries.size(), 0);
  for (std::size_t c = 0; c < idx.nlist(); ++c) {
    if (!probe[c]) continue;
    for (const auto& [entry, token] : idx.postings[c]) hit[entry] = 1;
  }
  for (std::size_t a = 0; a < hit.size(); ++a) {
    if (hit[a]) out.push_back(a);
  }
  return out;
}

/// Top-k entries by normalized MaxSim against their stored (dequantized)
/// tokens. Candidates are always rescored against all of their tokens.
inline SearchResult search(const AnswerIndex& idx, const ProjectedTokens& query, std::size_t topk, std::size_t nprobe) {
  if (idx.entries.empty()) throw UsageError("index is empty");
  if (topk == 0) throw UsageError("topk must be at least 1");
  if (nprobe == 0 || nprobe > idx.nlist()) {
    throw UsageError("nprobe must be in [1, " + std::to_string(idx.nlist()) + "]");
  }
  if (query.dim() != idx.dim) throw UsageError("query width does not match index");
  std::vector<Hit> hits;
  for (auto a : candidate_entries(idx, query, nprobe)) {
    hits.push_back({idx.entries[a].label, late_interaction(query, idx.entries[a].decoded)});
  }
  return detail::rank(std::move(hits), topk);
}

/// Full-precision exhaustive MaxSim over `items`; the reference for search.
inline SearchResult exhaustive_search(const std::vector<IndexItem>& items, const ProjectedTokens& query,
                                      std::size_t topk) {
  if (items.empty()) throw UsageError("no answers to search");
  if (topk == 0) throw UsageError("topk must be at least 1");
  std::vector<Hit> hits;
  hits.reserve(items.size());
  for (const auto& it : items) hits.push_back({it.label, late_interaction(query, it.tokens)});
  return detail::rank(std::move(hits), topk);
}

// Index file: "QIDX", u32 version, u32 D_P, u32 entry count, u8 quantized,
// u32 nlist, f64 lo[D_P], f64 hi[D_P], f64 centroids[nlist][D_P],
// per list (u32 n, n x (u32 entry, u32 token)), per entry (i32 label,
// u32 tokens, then tokens x D_P u8 codes, or f64 when not quantized).
inline std::string index_bytes(const AnswerIndex& idx) {
  io::ByteWriter w;
  w.raw("QIDX");
  w.u32(AnswerIndex::kFormatVersion);
  w.u32(static_cast<std::uint32_t>(idx.dim));
  w.u32(static_cast<std::uint32_t>(idx.entries.size()));
  w.u8(idx.quantized ? 1 : 0);
  w.u32(static_cast<std::uint32_t>(idx.nlist()));
  w.f64s(idx.quant.lo);
  w.f64s(idx.quant.hi);
  w.f64s(idx.centroids.data());
  for (const auto& list : idx.postings) {
    w.u32(static_cast<std::uint32_t>(list.size()));
    for (const auto& [entry, token] : list) {
      w.u32(entry);
      w.u32(token);
    }
  }
  for (const auto& e : idx.entries) {
    w.i32(e.label);
    w.u32(static_cast<std::uint32_t>(e.num_tokens));
    if (idx.quantized) w.raw({reinterpret_cast<const char*>(e.codes.data()), e.codes.size()});
    else w.f64s(e.raw);
  }
  return w.bytes();
}

inline void save_index(const AnswerIndex& idx, const std::filesystem::path& path) {
  io::write_file_atomic(path, index_bytes(idx));
}

inline AnswerIndex parse_index(std::string_view bytes, const std::string& what = "index") {
  io::ByteReader r(bytes, what);
  if (r.raw(4) != "QIDX") throw CorruptFileError(what + ": bad magic");
  const auto version = r.u32();
  if (version != AnswerIndex::kFormatVersion) {
    throw CorruptFileError(what + ": unsupported index version " + std::to_string(version));
  }
  AnswerIndex idx;
  idx.dim = r.u32();
  const std::size_t count = r.u32();
  const auto q = r.u8();
  if (q > 1) throw CorruptFileError(what + ": bad quantization flag");
  idx.quantized = q == 1;
  const std::size_t nlist = r.u32();
  if (idx.dim == 0 || nlist == 0 || count == 0) throw CorruptFileError(what + ": empty index header");
  if (r.remaining() < (2 * idx.dim + nlist * idx.dim) * sizeof(double)) throw CorruptFileError(what + ": truncated");
  idx.quant.lo.resize(idx.dim);
  idx.quant.hi.resize(idx.dim);
  r.f64s(idx.quant.lo);
  r.f64s(idx.quant.hi);
  idx.centroids = Matrix(nlist, idx.dim);
  r.f64s(idx.centroids.data());
  idx.postings.resize(nlist);
  for (auto& list : idx.postings) {
    const std::size_t n = r.u32();
    if (r.remaining() < n * 8) throw CorruptFileError(what + ": truncated posting list");
    list.reserve(n);
    for (std::size_t i = 0; i < n; ++i) {
      const auto entry = r.u32();
      const auto token = r.u32();
      list.emplace_back(entry, token);
    }
  }
  idx.entries.resize(count);
  for (auto& e : idx.entries) {
    e.label = r.i32();
    e.num_tokens = r.u32();
    const std::size_t n = e.num_tokens * idx.dim;
    if (idx.quantized) {
      const auto raw = r.raw(n);
      e.codes.assign(raw.begin(), raw.end());
    } else {
      if (r.remaining() < n * sizeof(double)) throw CorruptFileError(what + ": truncated entry");
      e.raw.resize(n);
      r.f64s(e.raw);
    }
    detail::decode_entry(idx, e);
  }
  if (!r.at_end()) throw CorruptFileError(what + ": trailing bytes");
  for (const auto& list : idx.postings) {
    for (const auto& [entry, token] : list) {
      if (entry >= count || token >= idx.entries[entry].num_tokens) {
        throw CorruptFileError(what + ": posting refers to a missing token");
      }
    }
  }
  return idx;
}

inline AnswerIndex load_index(const std::filesystem::path& path) {
  return parse_index(io::read_file(path), path.string());
}

}  // namespace qaid
