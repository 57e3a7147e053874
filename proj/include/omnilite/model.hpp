#pragma once

// Deterministic toy decoder-only transformer with a KV cache, adapter sites and
// block-boundary token extraction.

#include <cmath>
#include <memory>
#include <optional>
#include <random>
#include <string>
#include <vector>

#include "lmme.hpp"
#include "mmlora.hpp"
#include "modality.hpp"
#include "numerics.hpp"

namespace omnilite {

struct ModelConfig {
  std::size_t layers = 8;
  std::size_t heads = 2;
  std::size_t dim = 16;
  std::size_t ffn = 32;
  std::size_t vocab = 64;
  std::uint64_t seed = 0;
  std::optional<lmme::ExtractorConfig> extractor;
  std::shared_ptr<const mmlora::AdapterSet> adapters;

  /// Scale of the sinusoidal position signal added to input embeddings.
  double pe_scale = 0.1;
  /// Output-projection init scale; keeps the residual stream close to its input.
  double residual_scale = 0.25;
  /// Keys are initialised as the (orthogonal) W_q plus N(0, key_noise^2 / dim) noise.
  double key_noise = 0.1;

  std::size_t head_dim() const { return heads ? dim / heads : 0; }

  /// Layers per extractor block (all layers when no extractor is attached).
  std::size_t block_depth() const { return extractor ? layers / extractor->n : layers; }

  void validate() const {
    if (layers == 0 || heads == 0 || dim == 0 || ffn == 0 || vocab == 0) {
      throw ConfigError("model: all sizes must be positive");
    }
    if (dim % heads != 0) {
      throw ConfigError("model: dim " + std::to_string(dim) + " not divisible by heads " +
                        std::to_string(heads));
    }
    if (extractor) {
      extractor->validate();
      if (layers % extractor->n != 0) {
        throw ConfigError("model: " + std::to_string(layers) + " layers cannot form " +
                          std::to_string(extractor->n) + " equal blocks");
      }
    }
  }
};

struct LayerWeights {
  Matrix wq, wk, wv, wo;  ///< dim x dim, applied as x W^T
  Matrix w1;              ///< ffn x dim
  Matrix w2;              ///< dim x ffn
  bool operator==(const LayerWeights&) const = default;
};

inline std::string adapter_site(std::size_t layer, char proj) {
  return "layer" + std::to_string(layer) + ".attn." + proj;
}

struct Model {
  ModelConfig cfg;
  std::vector<LayerWeights> layers;
  Matrix token_embedding;  ///< vocab x dim, embeds generated tokens
  Matrix head;             ///< vocab x dim
};

/// Random orthogonal matrix by Gram-Schmidt on Gaussian rows.
template <class Rng>
Matrix random_orthogonal(std::size_t n, Rng& rng) {
  std::normal_distribution<double> n01(0.0, 1.0);
  Matrix q(n, n);
  for (std::size_t i = 0; i < n; ++i) {
    auto r = q.row(i);
    for (double& x : r) x = n01(rng);
    for (std::size_t j = 0; j < i; ++j) {
      const double p = dot(r, q.row(j));
      for (std::size_t k = 0; k < n; ++k) r[k] -= p * q(j, k);
    }
    const double norm = std::sqrt(dot(r, r));
    for (double& x : r) x /= norm;
  }
  return q;
}

inline Model init_model(const ModelConfig& cfg) {
  cfg.validate();
  Model m;
  m.cfg = cfg;
  std::mt19937_64 rng(cfg.seed);
  std::normal_distribution<double> n01(0.0, 1.0);
  auto draw = [&](std::size_t r, std::size_t c, double sd) {
    Matrix w(r, c);
    for (double& x : w.data()) x = sd * n01(rng);
    return w;
  };
  const double d = static_cast<double>(cfg.dim);
  const double inv = 1.0 / std::sqrt(d);
  for (std::size_t l = 0; l < cfg.layers; ++l) {
    LayerWeights w;
    // Orthogonal queries make W_q^T W_k close to the identity, so query-key relevance
    // tracks embedding similarity.
    w.wq = random_orthogonal(cfg.dim, rng);
    w.wk = add(w.wq, draw(cfg.dim, cfg.dim, cfg.key_noise * inv));
    w.wv = draw(cfg.dim, cfg.dim, inv);
    w.wo = draw(cfg.dim, cfg.dim, cfg.residual_scale * inv);
    w.w1 = draw(cfg.ffn, cfg.dim, inv);
    w.w2 = draw(cfg.dim, cfg.ffn, cfg.residual_scale / std::sqrt(static_cast<double>(cfg.ffn)));
    m.layers.push_back(std::move(w));
  }
  m.token_embedding = draw(cfg.vocab, cfg.dim, 1.0);
  m.head = draw(cfg.vocab, cfg.dim, inv);
  return m;
}

// ---------------------------------------------------------------------------
// Building blocks

inline void rms_norm_row(std::span<const double> in, std::span<double> out) {
  double ss = 0.0;
  for (double x : in) ss += x * x;
  const double inv = 1.0 / std::sqrt(ss / static_cast<double>(in.size()) + 1e-6);
  for (std::size_t i = 0; i < in.size(); ++i) out[i] = in[i] * inv;
}

inline Matrix rms_norm(const Matrix& x) {
  Matrix out(x.rows(), x.cols());
  for (std::size_t r = 0; r < x.rows(); ++r) rms_norm_row(x.row(r), out.row(r));
  return out;
}

inline void add_position_signal(std::span<double> row, std::size_t pos, double scale) {
  const std::size_t d = row.size();
  for (std::size_t i = 0; i < d; i += 2) {
    const double freq = std::pow(10000.0, -static_cast<double>(i) / static_cast<double>(d));
    const double a = static_cast<double>(pos) * freq;
    row[i] += scale * std::sin(a);
    if (i + 1 < d) row[i + 1] += scale * std::cos(a);
  }
}

/// Attention of one query row over key/value rows [0, count) for one head.
/// `probs` must hold at least `count` entries and receives the attention weights.
inline void attend_head(std::span<const double> q, const Matrix& k, const Matrix& v,
                        std::size_t count, std::size_t off, std::size_t hd, double inv_sqrt,
                        std::span<double> probs, std::span<double> out) {
  double mx = -std::numeric_limits<double>::infinity();
  for (std::size_t j = 0; j < count; ++j) {
    const double* kr = k.data().data() + j * k.cols() + off;
    double s = 0.0;
    for (std::size_t t = 0; t < hd; ++t) s += q[t] * kr[t];
    s *= inv_sqrt;
    probs[j] = s;
    mx = std::max(mx, s);
  }
  double sum = 0.0;
  for (std::size_t j = 0; j < count; ++j) {
    probs[j] = std::exp(probs[j] - mx);
    sum += probs[j];
  }
  const double norm = 1.0 / sum;
  std::fill(out.begin(), out.end(), 0.0);
  for (std::size_t j = 0; j < count; ++j) {
    probs[j] *= norm;
    const double* vr = v.data().data() + j * v.cols() + off;
    for (std::size_t t = 0; t < hd; ++t) out[t] += probs[j] * vr[t];
  }
}

/// Multi-head causal attention; row i sees rows 0..i (rows are in position order).
inline Matrix causal_attention(const Matrix& q, const Matrix& k, const Matrix& v,
                               std::size_t heads) {
  const std::size_t L = q.rows();
  const std::size_t hd = q.cols() / heads;
  const double inv_sqrt = 1.0 / std::sqrt(static_cast<double>(hd));
  Matrix out(L, q.cols());
  std::vector<double> probs(L);
  for (std::size_t i = 0; i < L; ++i) {
    for (std::size_t h = 0; h < heads; ++h) {
      const std::size_t off = h * hd;
      attend_head(q.row(i).subspan(off, hd), k, v, i + 1, off, hd, inv_sqrt, probs,
                  out.row(i).subspan(off, hd));
    }
  }
  return out;
}

/// Full L x L causal attention weight matrix of one head (zeros above the diagonal).
inline Matrix causal_attention_weights(const Matrix& q, const Matrix& k, std::size_t heads,
                                       std::size_t head) {
  const std::size_t L = q.rows();
  const std::size_t hd = q.cols() / heads;
  const double inv_sqrt = 1.0 / std::sqrt(static_cast<double>(hd));
  Matrix w(L, L);
  std::vector<double> scratch(hd);
  for (std::size_t i = 0; i < L; ++i) {
    attend_head(q.row(i).subspan(head * hd, hd), k, k, i + 1, head * hd, hd, inv_sqrt,
                w.row(i).subspan(0, i + 1), scratch);
  }
  return w;
}

// ---------------------------------------------------------------------------
// KV cache

struct LayerCache {
  Matrix k;
  Matrix v;
  std::vector<std::size_t> pos;
  std::vector<ModalityTag> tags;
  bool operator==(const LayerCache&) const = default;
};

struct KvCache {
  std::vector<LayerCache> layers;
  std::size_t next_pos = 0;
  std::string adapter_key;
  bool operator==(const KvCache&) const = default;
};

/// Sum over layers of 2 * rows * dim * bytes_per_elem.
inline std::size_t kv_bytes(const KvCache& cache, std::size_t bytes_per_elem) {
  std::size_t total = 0;
  for (const LayerCache& lc : cache.layers) total += 2 * lc.k.rows() * lc.k.cols() * bytes_per_elem;
  return total;
}

// ---------------------------------------------------------------------------
// Forward passes

struct PrefillResult {
  Matrix logits;                    ///< one row per surviving position
  std::vector<std::size_t> positions;
  std::vector<ModalityTag> tags;
  KvCache cache;
  lmme::PruneTrace trace;
  Matrix hidden;                    ///< final residual stream of the survivors
};

namespace detail {

struct LayerAdapters {
  const mmlora::Adapter* q = nullptr;
  const mmlora::Adapter* k = nullptr;
  const mmlora::Adapter* v = nullptr;
  const mmlora::Adapter* o = nullptr;
};

inline LayerAdapters adapters_for(const Model& m, std::size_t layer, const std::string& key) {
  LayerAdapters a;
  if (!m.cfg.adapters || key.empty()) return a;
  const auto& set = *m.cfg.adapters;
  a.q = set.select(adapter_site(layer, 'q'), key);
  a.k = set.select(adapter_site(layer, 'k'), key);
  a.v = set.select(adapter_site(layer, 'v'), key);
  a.o = set.select(adapter_site(layer, 'o'), key);
  return a;
}

/// Residual feed-forward update applied in place.
inline void feed_forward(const LayerWeights& w, Matrix& h) {
  const Matrix f = rms_norm(h);
  Matrix hidden = matmul_bt(f, w.w1);
  for (double& x : hidden.data()) x = x > 0.0 ? x : 0.0;
  const Matrix out = matmul_bt(hidden, w.w2);
  for (std::size_t i = 0; i < h.data().size(); ++i) h.data()[i] += out.data()[i];
}

}  // namespace detail

inline PrefillResult prefill(const Model& model, const TokenSequence& seq) {
  const ModelConfig& cfg = model.cfg;
  if (seq.empty()) throw InputError("prefill: empty sequence");
  seq.validate();
  if (seq.dim() != cfg.dim) {
    throw ShapeError("prefill: token width " + std::to_string(seq.dim()) + " != model dim " +
                     std::to_string(cfg.dim));
  }

  PrefillResult res;
  Matrix h = seq.embed;
  for (std::size_t i = 0; i < seq.size(); ++i) add_position_signal(h.row(i), seq.orig_pos[i], cfg.pe_scale);
  std::vector<std::size_t> pos = seq.orig_pos;
  std::vector<ModalityTag> tags = seq.tags;

  const std::string key = modality_key(seq);
  res.cache.adapter_key = key;
  res.cache.next_pos = seq.orig_pos.back() + 1;
  res.cache.layers.resize(cfg.layers);
  const std::size_t depth = cfg.block_depth();

  for (std::size_t l = 0; l < cfg.layers; ++l) {
    const LayerWeights& w = model.layers[l];
    const auto ad = detail::adapters_for(model, l, key);
    const Matrix xn = rms_norm(h);
    Matrix q = mmlora::project_rows(xn, w.wq, ad.q);
    Matrix k = mmlora::project_rows(xn, w.wk, ad.k);
    Matrix v = mmlora::project_rows(xn, w.wv, ad.v);
    const Matrix att = causal_attention(q, k, v, cfg.heads);
    const Matrix o = mmlora::project_rows(att, w.wo, ad.o);
    for (std::size_t i = 0; i < h.data().size(); ++i) h.data()[i] += o.data()[i];
    detail::feed_forward(w, h);

    const bool boundary = cfg.extractor && (l + 1) % depth == 0;
    if (boundary) {
      lmme::BlockTrace bt;
      bt.block = (l + 1) / depth - 1;
      std::vector<std::size_t> text_rows;
      std::vector<std::size_t> other_rows;
      for (std::size_t i = 0; i < tags.size(); ++i) {
        (tags[i] == ModalityTag::text ? text_rows : other_rows).push_back(i);
      }
      for (std::size_t r : other_rows) bt.scored_pos.push_back(pos[r]);
      std::vector<std::size_t> keep_rows;
      if (text_rows.empty() || other_rows.empty()) {
        bt.skipped = true;
      } else {
        bt.scores = lmme::relevance_scores(q.gather_rows(text_rows), k.gather_rows(other_rows),
                                           cfg.head_dim(), cfg.heads);
        const std::size_t keep = lmme::keep_count(other_rows.size(), *cfg.extractor);
        keep_rows = lmme::survivor_rows(tags, pos, bt.scores, keep);
      }
      // This layer's cache keeps every row it processed.
      res.cache.layers[l] = {std::move(k), std::move(v), pos, tags};
      if (!bt.skipped) {
        h = h.gather_rows(keep_rows);
        std::vector<std::size_t> npos;
        std::vector<ModalityTag> ntags;
        for (std::size_t r : keep_rows) {
          npos.push_back(pos[r]);
          ntags.push_back(tags[r]);
        }
        pos = std::move(npos);
        tags = std::move(ntags);
      }
      bt.retained = pos;
      if (seq.needle) {
        std::size_t overlap = 0;
        for (std::size_t p : pos) overlap += seq.needle->contains(p) ? 1 : 0;
        bt.needle_overlap = overlap;
      }
      res.trace.blocks.push_back(std::move(bt));
    } else {
      res.cache.layers[l] = {std::move(k), std::move(v), pos, tags};
    }
  }

  res.logits = matmul_bt(rms_norm(h), model.head);
  res.positions = std::move(pos);
  res.tags = std::move(tags);
  res.hidden = std::move(h);
  return res;
}

/// One generated token. Appends its K/V row to every layer of `cache` and returns its logits.
/// The token is tagged text and takes the next position after everything in the cache.
inline Vector decode_step(const Model& model, KvCache& cache, std::span<const double> token_embed) {
  const ModelConfig& cfg = model.cfg;
  if (token_embed.size() != cfg.dim) throw ShapeError("decode_step: embedding width mismatch");
  if (cache.layers.size() != cfg.layers) throw ShapeError("decode_step: cache depth mismatch");
  Matrix x(1, cfg.dim, Vector(token_embed.begin(), token_embed.end()));
  add_position_signal(x.row(0), cache.next_pos, cfg.pe_scale);
  const std::size_t hd = cfg.head_dim();
  const double inv_sqrt = 1.0 / std::sqrt(static_cast<double>(hd));

  for (std::size_t l = 0; l < cfg.layers; ++l) {
    const LayerWeights& w = model.layers[l];
    const auto ad = detail::adapters_for(model, l, cache.adapter_key);
    LayerCache& lc = cache.layers[l];
    const Matrix xn = rms_norm(x);
    const Matrix q = mmlora::project_rows(xn, w.wq, ad.q);
    const Matrix k = mmlora::project_rows(xn, w.wk, ad.k);
    const Matrix v = mmlora::project_rows(xn, w.wv, ad.v);
    lc.k.append_row(k.row(0));
    lc.v.append_row(v.row(0));
    lc.pos.push_back(cache.next_pos);
    lc.tags.push_back(ModalityTag::text);

    Matrix att(1, cfg.dim);
    std::vector<double> probs(lc.k.rows());
    for (std::size_t h = 0; h < cfg.heads; ++h) {
      attend_head(q.row(0).subspan(h * hd, hd), lc.k, lc.v, lc.k.rows(), h * hd, hd, inv_sqrt,
                  probs, att.row(0).subspan(h * hd, hd));
    }
    const Matrix o = mmlora::project_rows(att, w.wo, ad.o);
    for (std::size_t i = 0; i < cfg.dim; ++i) x.data()[i] += o.data()[i];
    detail::feed_forward(w, x);
  }
  ++cache.next_pos;
  const Matrix logits = matmul_bt(rms_norm(x), model.head);
  return logits.data();
}

inline std::size_t argmax(std::span<const double> v) {
  std::size_t best = 0;
  for (std::size_t i = 1; i < v.size(); ++i)
    if (v[i] > v[best]) best = i;
  return best;
}

/// Greedy continuation from the last prefill logits row; returns generated token ids.
inline std::vector<std::size_t> generate_greedy(const Model& model, KvCache& cache,
                                                std::span<const double> last_logits,
                                                std::size_t steps) {
  std::vector<std::size_t> ids;
  ids.reserve(steps);
  Vector logits(last_logits.begin(), last_logits.end());
  for (std::size_t s = 0; s < steps; ++s) {
    const std::size_t next = argmax(logits);
    ids.push_back(next);
    logits = decode_step(model, cache, model.token_embedding.row(next));
  }
  return ids;
}

}  // namespace omnilite
