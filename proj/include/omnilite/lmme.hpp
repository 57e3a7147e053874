#pragma once

// Text-query-driven retention of non-text tokens at block boundaries.

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <numeric>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "modality.hpp"
#include "numerics.hpp"

namespace omnilite::lmme {

struct ExtractorConfig {
  std::size_t n = 4;       ///< block count
  double rho = 0.8;        ///< keep ratio per block, in (0, 1]
  std::size_t min_keep = 1;

  void validate() const {
    if (n < 1) throw ConfigError("extractor: n must be >= 1");
    if (!(rho > 0.0 && rho <= 1.0)) throw ConfigError("extractor: rho must lie in (0, 1]");
    if (min_keep < 1) throw ConfigError("extractor: min_keep must be >= 1");
  }

  std::string name() const {
    char buf[64];
    std::snprintf(buf, sizeof buf, "LMME(%zu, %g)", n, rho);
    return buf;
  }
};

/// Non-text tokens kept after one block that started with `current` of them.
inline std::size_t keep_count(std::size_t current, const ExtractorConfig& cfg) {
  if (current == 0) return 0;
  // The epsilon absorbs representation error in rho (0.8 * 820 must give 656, not 657).
  const double raw = cfg.rho * static_cast<double>(current);
  const auto ceiled = static_cast<std::size_t>(std::ceil(raw - 1e-9));
  return std::min(current, std::max(cfg.min_keep, ceiled));
}

/// Per-block survivor counts L_1..L_n for an initial non-text count L0.
inline std::vector<std::size_t> retention_schedule(std::size_t L0, const ExtractorConfig& cfg) {
  cfg.validate();
  std::vector<std::size_t> out;
  out.reserve(cfg.n);
  std::size_t cur = L0;
  for (std::size_t b = 0; b < cfg.n; ++b) {
    cur = keep_count(cur, cfg);
    out.push_back(cur);
  }
  return out;
}

/// Mean over text queries and heads of softmax_k(q k^T / sqrt(head_dim)), one entry per key.
/// Q_text is T x (heads*head_dim); K_nontext is N x (heads*head_dim).
inline Vector relevance_scores(const Matrix& Q_text, const Matrix& K_nontext, std::size_t head_dim,
                               std::size_t heads) {
  if (Q_text.rows() == 0) throw ScoringError("relevance_scores: no text query rows");
  if (K_nontext.rows() == 0) throw ScoringError("relevance_scores: no non-text keys");
  if (heads == 0 || head_dim == 0) throw ParameterError("relevance_scores: zero heads or head_dim");
  if (Q_text.cols() != heads * head_dim || K_nontext.cols() != heads * head_dim) {
    throw ShapeError("relevance_scores: width must equal heads*head_dim");
  }
  const std::size_t n = K_nontext.rows();
  const double inv_sqrt = 1.0 / std::sqrt(static_cast<double>(head_dim));
  Vector scores(n, 0.0);
  Vector logits(n);
  for (std::size_t h = 0; h < heads; ++h) {
    const std::size_t off = h * head_dim;
    for (std::size_t t = 0; t < Q_text.rows(); ++t) {
      auto q = Q_text.row(t).subspan(off, head_dim);
      for (std::size_t j = 0; j < n; ++j) {
        logits[j] = dot(q, K_nontext.row(j).subspan(off, head_dim)) * inv_sqrt;
      }
      softmax_inplace(logits);
      for (std::size_t j = 0; j < n; ++j) scores[j] += logits[j];
    }
  }
  const double norm = 1.0 / static_cast<double>(heads * Q_text.rows());
  for (double& s : scores) s *= norm;
  return scores;
}

/// Row indices kept by pruning: every text row plus the `keep` highest-scoring non-text rows
/// (ties to the lower original position), returned in original order. `scores` lists the
/// non-text rows in sequence order.
inline std::vector<std::size_t> survivor_rows(std::span<const ModalityTag> tags,
                                              std::span<const std::size_t> orig_pos,
                                              std::span<const double> scores, std::size_t keep) {
  std::vector<std::size_t> nontext;
  for (std::size_t i = 0; i < tags.size(); ++i)
    if (tags[i] != ModalityTag::text) nontext.push_back(i);
  if (scores.size() != nontext.size()) {
    throw ShapeError("prune: " + std::to_string(scores.size()) + " scores for " +
                     std::to_string(nontext.size()) + " non-text tokens");
  }
  if (keep > nontext.size()) {
    throw ParameterError("prune: keep " + std::to_string(keep) + " exceeds " +
                         std::to_string(nontext.size()) + " available");
  }
  std::vector<std::size_t> order(nontext.size());
  std::iota(order.begin(), order.end(), 0);
  std::partial_sort(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(keep), order.end(),
                    [&](std::size_t a, std::size_t b) {
                      if (scores[a] != scores[b]) return scores[a] > scores[b];
                      return orig_pos[nontext[a]] < orig_pos[nontext[b]];
                    });
  std::vector<bool> kept(tags.size(), false);
  for (std::size_t i = 0; i < tags.size(); ++i) kept[i] = tags[i] == ModalityTag::text;
  for (std::size_t i = 0; i < keep; ++i) kept[nontext[order[i]]] = true;
  std::vector<std::size_t> rows;
  for (std::size_t i = 0; i < tags.size(); ++i)
    if (kept[i]) rows.push_back(i);
  return rows;
}

inline TokenSequence prune(const TokenSequence& seq, std::span<const double> scores,
                           std::size_t keep) {
  return seq.select(survivor_rows(seq.tags, seq.orig_pos, scores, keep));
}

// ---------------------------------------------------------------------------

struct BlockTrace {
  std::size_t block = 0;
  bool skipped = false;                  ///< no text or no non-text tokens to score
  std::vector<std::size_t> scored_pos;   ///< non-text positions entering the block
  Vector scores;                         ///< relevance, aligned with scored_pos
  std::vector<std::size_t> retained;     ///< all positions surviving the block
  std::optional<std::size_t> needle_overlap;
};

struct PruneTrace {
  std::vector<BlockTrace> blocks;

  bool empty() const { return blocks.empty(); }

  /// Positions surviving every block, or nullptr when no pruning was recorded.
  const std::vector<std::size_t>* final_retained() const {
    return blocks.empty() ? nullptr : &blocks.back().retained;
  }
};

inline nlohmann::json to_json(const PruneTrace& trace, bool with_scores = false) {
  nlohmann::json j = nlohmann::json::array();
  for (const BlockTrace& b : trace.blocks) {
    nlohmann::json e = {{"block", b.block},
                        {"skipped", b.skipped},
                        {"kept", b.retained.size()},
                        {"kept_positions", b.retained}};
    if (b.needle_overlap) e["needle_overlap"] = *b.needle_overlap;
    if (with_scores) {
      e["scored_positions"] = b.scored_pos;
      e["scores"] = b.scores;
    }
    j.push_back(std::move(e));
  }
  return j;
}

}  // namespace omnilite::lmme
