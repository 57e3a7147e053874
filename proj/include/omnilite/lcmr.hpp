#pragma once

// Cross-modality alignment regulariser: -log-softmax token distance accumulated by
// dynamic time warping, normalised by the combined length, and its exact gradient.

#include <algorithm>
#include <cmath>
#include <utility>
#include <vector>

#include "numerics.hpp"

namespace omnilite::lcmr {

struct LcmrConfig {
  double tau = 1.0;
  double lambda = 0.1;

  void validate() const {
    if (!(tau > 0.0) || !std::isfinite(tau)) throw ParameterError("lcmr: tau must be > 0");
    if (!(lambda >= 0.0) || !std::isfinite(lambda)) throw ParameterError("lcmr: lambda must be >= 0");
  }
};

struct Step {
  std::size_t l = 0;
  std::size_t s = 0;
  bool operator==(const Step&) const = default;
};

struct AlignmentCost {
  Matrix dist;              ///< L x S
  Matrix D;                 ///< accumulated cost
  std::vector<Step> path;   ///< (0,0) .. (L-1,S-1), zero-based

  double total() const { return D(D.rows() - 1, D.cols() - 1); }
};

/// Similarity logits X_speech X_stt^T / tau.
inline Matrix similarity(const Matrix& speech, const Matrix& stt, double tau) {
  if (!(tau > 0.0) || !std::isfinite(tau)) throw ParameterError("dist_matrix: tau must be > 0");
  if (speech.cols() != stt.cols()) {
    throw ShapeError("dist_matrix: speech width " + std::to_string(speech.cols()) +
                     " != transcript width " + std::to_string(stt.cols()));
  }
  if (speech.rows() == 0 || stt.rows() == 0) throw InputError("dist_matrix: empty input");
  return scale(matmul_bt(speech, stt), 1.0 / tau);
}

/// Row l is -log softmax over s of the similarity logits.
inline Matrix dist_matrix(const Matrix& speech, const Matrix& stt, double tau) {
  Matrix z = similarity(speech, stt, tau);
  for (std::size_t l = 0; l < z.rows(); ++l) {
    auto row = z.row(l);
    const double lse = log_sum_exp(row);
    for (double& x : row) x = lse - x;
  }
  return z;
}

/// DTW accumulation; the backtrack prefers diagonal, then up (l-1), then left (s-1).
inline AlignmentCost dtw_accumulate(const Matrix& dist) {
  const std::size_t L = dist.rows();
  const std::size_t S = dist.cols();
  if (L == 0 || S == 0) throw InputError("dtw_accumulate: empty distance matrix");
  if (!all_finite(dist.data())) throw InputError("dtw_accumulate: non-finite distance");
  AlignmentCost ac;
  ac.dist = dist;
  ac.D = Matrix(L, S);
  Matrix& D = ac.D;
  for (std::size_t l = 0; l < L; ++l) {
    for (std::size_t s = 0; s < S; ++s) {
      double best;
      if (l == 0 && s == 0) {
        best = 0.0;
      } else if (l == 0) {
        best = D(0, s - 1);
      } else if (s == 0) {
        best = D(l - 1, 0);
      } else {
        best = std::min({D(l - 1, s - 1), D(l - 1, s), D(l, s - 1)});
      }
      D(l, s) = dist(l, s) + best;
    }
  }
  std::size_t l = L - 1;
  std::size_t s = S - 1;
  ac.path.push_back({l, s});
  while (l > 0 || s > 0) {
    if (l == 0) {
      --s;
    } else if (s == 0) {
      --l;
    } else {
      const double diag = D(l - 1, s - 1);
      const double up = D(l - 1, s);
      const double left = D(l, s - 1);
      if (diag <= up && diag <= left) {
        --l;
        --s;
      } else if (up <= left) {
        --l;
      } else {
        --s;
      }
    }
    ac.path.push_back({l, s});
  }
  std::reverse(ac.path.begin(), ac.path.end());
  return ac;
}

inline double lcmr_loss_from_cost(const AlignmentCost& ac) {
  return ac.total() / static_cast<double>(ac.D.rows() + ac.D.cols());
}

inline double lcmr_loss(const Matrix& speech, const Matrix& stt, const LcmrConfig& cfg) {
  cfg.validate();
  return lcmr_loss_from_cost(dtw_accumulate(dist_matrix(speech, stt, cfg.tau)));
}

struct LcmrGrad {
  Matrix speech;  ///< L x d
  Matrix stt;     ///< S x d
};

/// Exact gradient of lcmr_loss with the optimal path held fixed.
inline LcmrGrad lcmr_grad(const Matrix& speech, const Matrix& stt, const LcmrConfig& cfg) {
  cfg.validate();
  const Matrix z = similarity(speech, stt, cfg.tau);
  Matrix dist = z;
  Matrix prob = z;
  for (std::size_t l = 0; l < z.rows(); ++l) {
    const double lse = log_sum_exp(z.row(l));
    for (std::size_t s = 0; s < z.cols(); ++s) {
      dist(l, s) = lse - z(l, s);
      prob(l, s) = std::exp(z(l, s) - lse);
    }
  }
  const AlignmentCost ac = dtw_accumulate(dist);
  const double w = 1.0 / static_cast<double>(z.rows() + z.cols());

  // d dist(l,s) / d z(l,s') = p(l,s') - [s == s'].
  Matrix gz(z.rows(), z.cols());
  for (const Step& st : ac.path) {
    for (std::size_t s2 = 0; s2 < z.cols(); ++s2) gz(st.l, s2) += w * prob(st.l, s2);
    gz(st.l, st.s) -= w;
  }
  const double inv_tau = 1.0 / cfg.tau;
  LcmrGrad g;
  g.speech = scale(matmul(gz, stt), inv_tau);
  g.stt = scale(matmul(transpose(gz), speech), inv_tau);
  return g;
}

inline double total_loss(double ce, double lcmr, double lambda) {
  if (!(lambda >= 0.0)) throw ParameterError("total_loss: lambda must be >= 0");
  return ce + lambda * lcmr;
}

/// Gradient of ce + lambda * lcmr given both parts' gradients w.r.t. the same tensor.
inline Matrix total_grad(const Matrix& ce_grad, const Matrix& lcmr_grad, double lambda) {
  if (!(lambda >= 0.0)) throw ParameterError("total_grad: lambda must be >= 0");
  return add(ce_grad, scale(lcmr_grad, lambda));
}

}  // namespace omnilite::lcmr
