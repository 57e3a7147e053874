#pragma once

// Speech-unit generation core: hidden-state upsampling, CTC loss and greedy unit decoding.
// Blank is index 0; units are 1..K.

#include <cmath>
#include <limits>
#include <vector>

#include "numerics.hpp"

namespace omnilite::streamctc {

inline constexpr std::size_t kBlank = 0;

struct UnitSequence {
  std::vector<std::size_t> units;
  std::size_t K = 0;
  bool operator==(const UnitSequence&) const = default;
};

/// T x (K+1) matrix of per-frame log-probabilities.
struct FramePosteriors {
  Matrix logprobs;

  std::size_t frames() const { return logprobs.rows(); }
  std::size_t units() const { return logprobs.cols() == 0 ? 0 : logprobs.cols() - 1; }

  void validate(double tol = 1e-9) const {
    if (logprobs.cols() < 2) throw ParameterError("posteriors: need blank plus at least one unit");
    for (std::size_t t = 0; t < logprobs.rows(); ++t) {
      const double lse = log_sum_exp(logprobs.row(t));
      if (!(std::abs(lse) <= tol)) {
        throw ParameterError("posteriors: row " + std::to_string(t) +
                             " is not a log-probability vector (logsumexp " + std::to_string(lse) +
                             ")");
      }
    }
  }
};

/// Row-wise log_softmax, turning arbitrary scores into valid posteriors.
inline FramePosteriors log_softmax_rows(const Matrix& scores) {
  FramePosteriors p{scores};
  for (std::size_t t = 0; t < scores.rows(); ++t) {
    auto row = p.logprobs.row(t);
    const double lse = log_sum_exp(row);
    for (double& x : row) x -= lse;
  }
  return p;
}

inline Matrix upsample(const Matrix& hidden, std::size_t factor) {
  if (factor == 0) throw ParameterError("upsample: factor must be >= 1");
  Matrix out(hidden.rows() * factor, hidden.cols());
  for (std::size_t r = 0; r < hidden.rows(); ++r) {
    for (std::size_t f = 0; f < factor; ++f) {
      std::copy(hidden.row(r).begin(), hidden.row(r).end(), out.row(r * factor + f).begin());
    }
  }
  return out;
}

/// Merges adjacent duplicates, then drops blanks.
inline UnitSequence collapse_units(std::span<const std::size_t> raw, std::size_t K) {
  UnitSequence out{{}, K};
  std::size_t prev = std::numeric_limits<std::size_t>::max();
  for (std::size_t x : raw) {
    if (x > K) {
      throw ParameterError("collapse_units: index " + std::to_string(x) + " outside [0, " +
                           std::to_string(K) + "]");
    }
    if (x != prev && x != kBlank) out.units.push_back(x);
    prev = x;
  }
  return out;
}

/// Per-frame argmax (ties to the lower index), then collapse.
inline UnitSequence greedy_decode(const FramePosteriors& post) {
  std::vector<std::size_t> best(post.frames());
  for (std::size_t t = 0; t < post.frames(); ++t) {
    auto row = post.logprobs.row(t);
    std::size_t arg = 0;
    for (std::size_t k = 1; k < row.size(); ++k)
      if (row[k] > row[arg]) arg = k;
    best[t] = arg;
  }
  return collapse_units(best, post.units());
}

/// Minimum frame count that can emit `target`: one frame per unit plus a blank between repeats.
inline std::size_t min_frames(std::span<const std::size_t> target) {
  std::size_t n = target.size();
  for (std::size_t i = 1; i < target.size(); ++i) n += target[i] == target[i - 1] ? 1 : 0;
  return n;
}

struct CtcResult {
  bool feasible = false;
  double loss = std::numeric_limits<double>::infinity();
};

/// -log P(target | posteriors) by the blank-interleaved forward recursion in log space.
inline CtcResult ctc_loss(const FramePosteriors& post, const UnitSequence& target) {
  post.validate();
  const std::size_t K = post.units();
  for (std::size_t u : target.units) {
    if (u == kBlank || u > K) throw ParameterError("ctc_loss: target unit " + std::to_string(u) + " out of range");
  }
  const std::size_t T = post.frames();
  if (T < min_frames(target.units)) return {};

  const double ninf = -std::numeric_limits<double>::infinity();
  auto lse2 = [&](double a, double b) {
    if (a == ninf) return b;
    if (b == ninf) return a;
    const double m = std::max(a, b);
    return m + std::log(std::exp(a - m) + std::exp(b - m));
  };

  // Extended label: blank, u1, blank, u2, ..., blank.
  std::vector<std::size_t> ext(2 * target.units.size() + 1, kBlank);
  for (std::size_t i = 0; i < target.units.size(); ++i) ext[2 * i + 1] = target.units[i];
  const std::size_t S = ext.size();
  if (T == 0) return {true, 0.0};

  std::vector<double> alpha(S, ninf);
  std::vector<double> next(S, ninf);
  alpha[0] = post.logprobs(0, ext[0]);
  if (S > 1) alpha[1] = post.logprobs(0, ext[1]);
  for (std::size_t t = 1; t < T; ++t) {
    for (std::size_t s = 0; s < S; ++s) {
      double a = alpha[s];
      if (s >= 1) a = lse2(a, alpha[s - 1]);
      if (s >= 2 && ext[s] != kBlank && ext[s] != ext[s - 2]) a = lse2(a, alpha[s - 2]);
      next[s] = a == ninf ? ninf : a + post.logprobs(t, ext[s]);
    }
    std::swap(alpha, next);
  }
  double ll = alpha[S - 1];
  if (S > 1) ll = lse2(ll, alpha[S - 2]);
  if (ll == ninf) return {};
  return {true, -ll};
}

}  // namespace omnilite::streamctc
