#pragma once

#include <array>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "qaid/error.hpp"
#include "qaid/io.hpp"
#include "qaid/rng.hpp"
#include "qaid/tensor.hpp"
#include "qaid/textpipe.hpp"

namespace qaid {

struct EncoderConfig {
  std::size_t vocab_size = 0;
  std::size_t max_len = kDefaultQueryLength;  ///< m; also the positional table size
  std::size_t d_model = 64;                   ///< D_E
  std::size_t d_proj = 32;                    ///< D_P
  double dropout = 0.10;
  bool mix = true;

  void validate() const {
    if (vocab_size < kNumSpecials) throw UsageError("vocab_size must cover the special tokens");
    if (max_len < 2) throw UsageError("max_len must be at least 2");
    if (d_model == 0 || d_proj == 0) throw UsageError("model widths must be positive");
    if (d_proj > d_model) throw UsageError("d_proj must not exceed d_model");
    if (!(dropout >= 0.0 && dropout < 1.0)) throw UsageError("dropout must be in [0, 1)");
  }

  friend bool operator==(const EncoderConfig&, const EncoderConfig&) = default;
};

/// Trainable weights. Linear maps act on row vectors: y = x W + b, so every
/// weight is stored input-major (rows = input width).
struct EncoderParams {
  EncoderConfig config;
  std::size_t num_classes = 0;

  Matrix tok_emb;  // V x D_E
  Matrix pos_emb;  // m x D_E
  Matrix mix_w;    // D_E x D_E
  Matrix mix_b;    // 1 x D_E
  Matrix ffn_w;    // D_E x D_E
  Matrix ffn_b;    // 1 x D_E
  Matrix proj_w;   // D_E x D_P
  Matrix proj_b;   // 1 x D_P
  Matrix mlm_w;    // D_E x V
  Matrix mlm_b;    // 1 x V
  Matrix cls_w;    // D_E x C
  Matrix cls_b;    // 1 x C

  /// Zero tensors shaped for `cfg` and `classes`.
  static EncoderParams zeros(const EncoderConfig& cfg, std::size_t classes) {
    EncoderParams p;
    p.config = cfg;
    p.num_classes = classes;
    const auto v = cfg.vocab_size, m = cfg.max_len, de = cfg.d_model, dp = cfg.d_proj;
    p.tok_emb = Matrix(v, de);
    p.pos_emb = Matrix(m, de);
    p.mix_w = Matrix(de, de);
    p.mix_b = Matrix(1, de);
    p.ffn_w = Matrix(de, de);
    p.ffn_b = Matrix(1, de);
    p.proj_w = Matrix(de, dp);
    p.proj_b = Matrix(1, dp);
    p.mlm_w = Matrix(de, v);
    p.mlm_b = Matrix(1, v);
    p.cls_w = Matrix(de, classes);
    p.cls_b = Matrix(1, classes);
    return p;
  }

  EncoderParams zeros_like() const { return zeros(config, num_classes); }

  static constexpr std::array<std::string_view, 12> tensor_names() {
    return {"tok_emb", "pos_emb", "mix_w", "mix_b", "ffn_w", "ffn_b",
            "proj_w",  "proj_b",  "mlm_w", "mlm_b", "cls_w", "cls_b"};
  }

  /// Declaration order; the checkpoint layout and optimizer state follow it.
  std::array<Matrix*, 12> tensors() {
    return {&tok_emb, &pos_emb, &mix_w, &mix_b, &ffn_w, &ffn_b,
            &proj_w,  &proj_b,  &mlm_w, &mlm_b, &cls_w, &cls_b};
  }
  std::array<const Matrix*, 12> tensors() const {
    return {&tok_emb, &pos_emb, &mix_w, &mix_b, &ffn_w, &ffn_b,
            &proj_w,  &proj_b,  &mlm_w, &mlm_b, &cls_w, &cls_b};
  }

  friend bool operator==(const EncoderParams&, const EncoderParams&) = default;
};

/// Gradients share the parameter layout.
using ParamGrads = EncoderParams;

/// Fills `m` with uniform draws in [-bound, bound].
inline void fill_uniform(Matrix& m, Rng& rng, double bound) {
  for (auto& x : m.data()) x = rng.uniform(-bound, bound);
}

/// Weights and embeddings ~ U[-1/sqrt(D_E), 1/sqrt(D_E)], biases zero.
inline EncoderParams init_params(const EncoderConfig& cfg, std::size_t classes, std::uint64_t seed) {
  cfg.validate();
  auto p = EncoderParams::zeros(cfg, classes);
  const double bound = 1.0 / std::sqrt(static_cast<double>(cfg.d_model));
  auto rng = Rng::derive(seed, {0x1A17});
  for (Matrix* m : {&p.tok_emb, &p.pos_emb, &p.mix_w, &p.ffn_w, &p.proj_w, &p.mlm_w, &p.cls_w}) {
    fill_uniform(*m, rng, bound);
  }
  return p;
}

/// Replaces the classification head with a fresh one for `classes` outputs.
/// Used when fine-tuning starts from a checkpoint trained without labels.
inline void reset_class_head(EncoderParams& p, std::size_t classes, std::uint64_t seed) {
  p.num_classes = classes;
  p.cls_w = Matrix(p.config.d_model, classes);
  p.cls_b = Matrix(1, classes);
  auto rng = Rng::derive(seed, {0xC1A55});
  fill_uniform(p.cls_w, rng, 1.0 / std::sqrt(static_cast<double>(p.config.d_model)));
}

/// Per-token unit vectors and which of them take part in scoring.
struct ProjectedTokens {
  Matrix z;                          ///< L x D_P, unit rows
  std::vector<std::uint8_t> valid;   ///< 1 = scored

  std::size_t size() const { return z.rows(); }
  std::size_t dim() const { return z.cols(); }

  friend bool operator==(const ProjectedTokens&, const ProjectedTokens&) = default;
};

struct EncodingCache {
  std::vector<int> ids;
  std::vector<std::uint8_t> real;  ///< positions averaged into the context vector
  std::size_t num_real = 0;
  Matrix ffn_in;     ///< u_i: input to the feed-forward map
  Matrix act;        ///< tanh output before dropout
  Matrix keep;       ///< inverted-dropout multipliers; empty in eval mode
  std::vector<double> ctx;  ///< mean embedding over real positions
  std::vector<double> proj_norm;
};

struct EncodingResult {
  Matrix h;               ///< L x D_E
  ProjectedTokens proj;   ///< z and validity
  EncodingCache cache;

  std::span<const double> cls_h() const { return h.row(0); }
};

/// Enc + Proj for one sequence. In train mode inverted dropout is applied to
/// the token representations with masks drawn from `rng`.
inline EncodingResult forward(const TokenSeq& seq, const EncoderParams& p, bool train_mode, Rng* rng = nullptr) {
  const auto& cfg = p.config;
  const std::size_t len = seq.size(), de = cfg.d_model, dp = cfg.d_proj;
  if (len == 0) throw UsageError("cannot encode an empty sequence");
  if (len > cfg.max_len) {
    throw UsageError("sequence length " + std::to_string(len) + " exceeds max_len " + std::to_string(cfg.max_len));
  }
  if (seq.attn.size() != len) throw UsageError("token and attention lengths differ");

  EncodingResult r;
  auto& c = r.cache;
  c.ids = seq.ids;
  c.real.assign(len, 0);
  Matrix emb(len, de);
  for (std::size_t i = 0; i < len; ++i) {
    const int id = seq.ids[i];
    if (id < 0 || static_cast<std::size_t>(id) >= cfg.vocab_size) {
      throw UsageError("token id " + std::to_string(id) + " out of range for vocab of " +
                       std::to_string(cfg.vocab_size));
    }
    auto e = emb.row(i);
    const auto t = p.tok_emb.row(static_cast<std::size_t>(id));
    const auto q = p.pos_emb.row(i);
    for (std::size_t k = 0; k < de; ++k) e[k] = t[k] + q[k];
    if (seq.attn[i] == Attn::real) {
      c.real[i] = 1;
      ++c.num_real;
    }
  }

  c.ffn_in = emb;
  if (cfg.mix) {
    if (c.num_real == 0) throw UsageError("sequence has no real positions");
    c.ctx.assign(de, 0.0);
    for (std::size_t i = 0; i < len; ++i) {
      if (c.real[i]) add_to(c.ctx, emb.row(i));
    }
    for (auto& x : c.ctx) x /= static_cast<double>(c.num_real);
    std::vector<double> shift(p.mix_b.data());
    add_vec_mat(c.ctx, p.mix_w, shift);
    for (std::size_t i = 0; i < len; ++i) add_to(c.ffn_in.row(i), shift);
  }

  c.act = Matrix(len, de);
  for (std::size_t i = 0; i < len; ++i) {
    auto a = c.act.row(i);
    std::copy(p.ffn_b.data().begin(), p.ffn_b.data().end(), a.begin());
    add_vec_mat(c.ffn_in.row(i), p.ffn_w, a);
    for (auto& x : a) x = std::tanh(x);
  }

  r.h = c.act;
  if (train_mode && cfg.dropout > 0.0) {
    if (!rng) throw UsageError("train-mode forward with dropout needs a generator");
    const double scale = 1.0 / (1.0 - cfg.dropout);
    c.keep = Matrix(len, de);
    for (std::size_t i = 0; i < len; ++i) {
      for (std::size_t k = 0; k < de; ++k) {
        const double mult = rng->uniform() < cfg.dropout ? 0.0 : scale;
        c.keep(i, k) = mult;
        r.h(i, k) *= mult;
      }
    }
  }

  r.proj.z = Matrix(len, dp);
  r.proj.valid.assign(len, 0);
  c.proj_norm.assign(len, 0.0);
  for (std::size_t i = 0; i < len; ++i) {
    auto z = r.proj.z.row(i);
    std::copy(p.proj_b.data().begin(), p.proj_b.data().end(), z.begin());
    add_vec_mat(r.h.row(i), p.proj_w, z);
    const double norm = std::sqrt(dot(z, z));
    if (!(norm > 0.0) || !std::isfinite(norm)) {
      throw NumericError("projection at position " + std::to_string(i) + " has norm " + std::to_string(norm));
    }
    c.proj_norm[i] = norm;
    for (auto& x : z) x /= norm;
    r.proj.valid[i] = seq.attn[i] != Attn::pad_inert;
  }
  return r;
}

/// MLM head logits for the requested positions, one row each.
inline Matrix mlm_logits(const EncodingResult& res, const std::vector<std::size_t>& positions, const EncoderParams& p) {
  Matrix out(positions.size(), p.config.vocab_size);
  for (std::size_t r = 0; r < positions.size(); ++r) {
    if (positions[r] >= res.h.rows()) {
      throw UsageError("MLM position " + std::to_string(positions[r]) + " out of range");
    }
    auto row = out.row(r);
    std::copy(p.mlm_b.data().begin(), p.mlm_b.data().end(), row.begin());
    add_vec_mat(res.h.row(positions[r]), p.mlm_w, row);
  }
  return out;
}

/// Classification head logits from the CLS representation.
inline std::vector<double> class_logits(const EncodingResult& res, const EncoderParams& p) {
  std::vector<double> out(p.cls_b.data());
  add_vec_mat(res.cls_h(), p.cls_w, out);
  return out;
}

/// Cotangents arriving at the two heads of one encoded sequence.
struct HeadCotangents {
  std::vector<std::size_t> mlm_positions;
  Matrix mlm;                 ///< one row per entry of mlm_positions; may be empty
  std::vector<double> cls;    ///< empty when the class head is unused
};

/// Reverse pass of forward/mlm_logits/class_logits. Adds gradients into
/// `grads`, so several sequences can be accumulated into one buffer.
inline void backward(const EncodingResult& res, const EncoderParams& p, const Matrix& grad_z,
                     const HeadCotangents& heads, ParamGrads& grads) {
  const auto& c = res.cache;
  const std::size_t len = res.h.rows(), de = p.config.d_model;
  if (!grad_z.empty() && !grad_z.same_shape(res.proj.z)) throw UsageError("grad_z shape does not match the encoding");
  if (heads.mlm.rows() != heads.mlm_positions.size()) throw UsageError("MLM cotangent rows do not match positions");
  if (!heads.mlm.empty() && heads.mlm.cols() != p.config.vocab_size) throw UsageError("MLM cotangent width mismatch");
  if (!heads.cls.empty() && heads.cls.size() != p.num_classes) throw UsageError("class cotangent width mismatch");

  Matrix gh(len, de);
  std::vector<std::uint8_t> touched(len, 0);

  if (!grad_z.empty()) {
    std::vector<double> gp(p.config.d_proj);
    for (std::size_t i = 0; i < len; ++i) {
      const auto gz = grad_z.row(i);
      bool any = false;
      for (double x : gz) any = any || x != 0.0;
      if (!any) continue;
      // d normalize(p)/dp = (I - z z^T) / |p|
      const auto z = res.proj.z.row(i);
      const double zg = dot(z, gz);
      for (std::size_t k = 0; k < gp.size(); ++k) gp[k] = (gz[k] - z[k] * zg) / c.proj_norm[i];
      add_outer(res.h.row(i), gp, grads.proj_w);
      add_to(grads.proj_b.data(), gp);
      add_mat_vec(p.proj_w, gp, gh.row(i));
      touched[i] = 1;
    }
  }

  for (std::size_t r = 0; r < heads.mlm_positions.size(); ++r) {
    const std::size_t pos = heads.mlm_positions[r];
    const auto gl = heads.mlm.row(r);
    add_outer(res.h.row(pos), gl, grads.mlm_w);
    add_to(grads.mlm_b.data(), gl);
    add_mat_vec(p.mlm_w, gl, gh.row(pos));
    touched[pos] = 1;
  }

  if (!heads.cls.empty()) {
    add_outer(res.cls_h(), heads.cls, grads.cls_w);
    add_to(grads.cls_b.data(), heads.cls);
    add_mat_vec(p.cls_w, heads.cls, gh.row(0));
    touched[0] = 1;
  }

  Matrix ge(len, de);
  std::vector<double> sum_gu(de, 0.0), ga(de);
  bool any_touched = false;
  for (std::size_t i = 0; i < len; ++i) {
    if (!touched[i]) continue;
    any_touched = true;
    const auto g = c.act.row(i);
    auto gi = gh.row(i);
    for (std::size_t k = 0; k < de; ++k) {
      const double through_dropout = c.keep.empty() ? gi[k] : gi[k] * c.keep(i, k);
      ga[k] = through_dropout * (1.0 - g[k] * g[k]);
    }
    add_outer(c.ffn_in.row(i), ga, grads.ffn_w);
    add_to(grads.ffn_b.data(), ga);
    auto gu = ge.row(i);
    add_mat_vec(p.ffn_w, ga, gu);
    add_to(sum_gu, gu);
  }
  if (!any_touched) return;

  if (p.config.mix) {
    add_to(grads.mix_b.data(), sum_gu);
    add_outer(c.ctx, sum_gu, grads.mix_w);
    std::vector<double> gctx(de, 0.0);
    add_mat_vec(p.mix_w, sum_gu, gctx);
    const double inv = 1.0 / static_cast<double>(c.num_real);
    for (std::size_t i = 0; i < len; ++i) {
      if (c.real[i]) add_to(ge.row(i), gctx, inv);
    }
  }

  for (std::size_t i = 0; i < len; ++i) {
    const auto gi = ge.row(i);
    add_to(grads.tok_emb.row(static_cast<std::size_t>(c.ids[i])), gi);
    add_to(grads.pos_emb.row(i), gi);
  }
}

// Checkpoint: "QAID", u32 version, u32 V, u32 m, u32 D_E, u32 D_P, u32 C,
// f64 dropout, u8 mix, then every tensor in declaration order as f64.
inline constexpr std::uint32_t kCheckpointVersion = 1;

inline std::string checkpoint_bytes(const EncoderParams& p) {
  io::ByteWriter w;
  w.raw("QAID");
  w.u32(kCheckpointVersion);
  w.u32(static_cast<std::uint32_t>(p.config.vocab_size));
  w.u32(static_cast<std::uint32_t>(p.config.max_len));
  w.u32(static_cast<std::uint32_t>(p.config.d_model));
  w.u32(static_cast<std::uint32_t>(p.config.d_proj));
  w.u32(static_cast<std::uint32_t>(p.num_classes));
  w.f64(p.config.dropout);
  w.u8(p.config.mix ? 1 : 0);
  for (const Matrix* m : p.tensors()) w.f64s(m->data());
  return w.bytes();
}

inline void save_checkpoint(const EncoderParams& p, const std::filesystem::path& path) {
  io::write_file_atomic(path, checkpoint_bytes(p));
}

inline EncoderParams parse_checkpoint(std::string_view bytes, const std::string& what = "checkpoint") {
  io::ByteReader r(bytes, what);
  if (r.raw(4) != "QAID") throw CorruptFileError(what + ": bad magic");
  const auto version = r.u32();
  if (version != kCheckpointVersion) {
    throw CorruptFileError(what + ": unsupported format version " + std::to_string(version));
  }
  EncoderConfig cfg;
  cfg.vocab_size = r.u32();
  cfg.max_len = r.u32();
  cfg.d_model = r.u32();
  cfg.d_proj = r.u32();
  const std::size_t classes = r.u32();
  cfg.dropout = r.f64();
  const auto mix = r.u8();
  if (mix > 1) throw CorruptFileError(what + ": bad mix flag");
  cfg.mix = mix == 1;
  try {
    cfg.validate();
  } catch (const UsageError& e) {
    throw CorruptFileError(what + ": invalid header: " + e.what());
  }
  auto p = EncoderParams::zeros(cfg, classes);
  std::size_t expected = 0;
  for (Matrix* m : p.tensors()) expected += m->size() * sizeof(double);
  if (r.remaining() < expected) throw CorruptFileError(what + ": truncated tensor data");
  for (Matrix* m : p.tensors()) r.f64s(m->data());
  if (!r.at_end()) throw CorruptFileError(what + ": trailing bytes after tensors");
  return p;
}

inline EncoderParams load_checkpoint(const std::filesystem::path& path) {
  return parse_checkpoint(io::read_file(path), path.string());
}

/// Loads and checks the stored shapes against `expected` (class count ignored).
inline EncoderParams load_checkpoint(const std::filesystem::path& path, const EncoderConfig& expected) {
  auto p = load_checkpoint(path);
  const auto& c = p.config;
  auto check = [&](std::string_view field, std::size_t got, std::size_t want) {
    if (got != want) {
      throw ShapeMismatchError(path.string() + ": checkpoint " + std::string(field) + "=" + std::to_string(got) +
                               " but configuration expects " + std::to_string(want));
    }
  };
  check("vocab_size", c.vocab_size, expected.vocab_size);
  check("max_len", c.max_len, expected.max_len);
  check("d_model", c.d_model, expected.d_model);
  check("d_proj", c.d_proj, expected.d_proj);
  if (c.mix != expected.mix) throw ShapeMismatchError(path.string() + ": checkpoint mix flag differs");
  return p;
}

}  // namespace qaid
