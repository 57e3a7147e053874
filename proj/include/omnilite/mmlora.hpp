#pragma once

// Low-rank adapters selected by the combination of modalities present in the input.

#include <filesystem>
#include <fstream>
#include <map>
#include <optional>
#include <random>
#include <string>
#include <utility>

#include <json.hpp>

#include "blob.hpp"
#include "modality.hpp"
#include "numerics.hpp"

namespace omnilite::mmlora {

struct Adapter {
  Matrix A;  ///< r x d_in
  Matrix B;  ///< d_out x r
  std::size_t rank = 0;
  double scale = 1.0;

  std::size_t d_in() const { return A.cols(); }
  std::size_t d_out() const { return B.rows(); }

  void validate() const {
    if (rank < 1 || A.rows() != rank || B.cols() != rank) throw ShapeError("adapter: rank mismatch");
    if (rank > std::min(d_in(), d_out())) throw ShapeError("adapter: rank exceeds min(d_in, d_out)");
  }
};

/// Fresh adapter: A ~ N(0, init_std^2), B = 0, scale = alpha / r (alpha defaults to r).
inline Adapter make_adapter(std::size_t d_in, std::size_t d_out, std::size_t rank,
                            std::uint64_t seed, std::optional<double> alpha = std::nullopt,
                            double init_std = 0.02) {
  if (rank < 1 || rank > std::min(d_in, d_out)) {
    throw ParameterError("make_adapter: rank " + std::to_string(rank) + " outside [1, " +
                         std::to_string(std::min(d_in, d_out)) + "]");
  }
  Adapter ad;
  ad.rank = rank;
  ad.scale = alpha.value_or(static_cast<double>(rank)) / static_cast<double>(rank);
  ad.A = Matrix(rank, d_in);
  ad.B = Matrix(d_out, rank);
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> dist(0.0, init_std);
  for (double& x : ad.A.data()) x = dist(rng);
  return ad;
}

inline void check_conformal(const Adapter& ad, const Matrix& W) {
  ad.validate();
  if (W.rows() != ad.d_out() || W.cols() != ad.d_in()) {
    throw ShapeError("adapter " + std::to_string(ad.d_out()) + "x" + std::to_string(ad.d_in()) +
                     " does not fit weight " + std::to_string(W.rows()) + "x" +
                     std::to_string(W.cols()));
  }
}

/// H = W X + scale * B (A X), with W d_out x d_in and X d_in x L (tokens as columns).
inline Matrix apply(const Adapter& ad, const Matrix& W, const Matrix& X) {
  check_conformal(ad, W);
  if (X.rows() != W.cols()) throw ShapeError("apply: X rows must equal d_in");
  Matrix h = matmul(W, X);
  const Matrix low = scale(matmul(ad.B, matmul(ad.A, X)), ad.scale);
  for (std::size_t i = 0; i < h.data().size(); ++i) h.data()[i] += low.data()[i];
  return h;
}

/// Row-major variant used by the model: X holds tokens as rows, result is X W^T (+ adapter).
inline Matrix project_rows(const Matrix& X, const Matrix& W, const Adapter* ad = nullptr) {
  Matrix h = matmul_bt(X, W);
  if (ad != nullptr) {
    check_conformal(*ad, W);
    const Matrix low = matmul_bt(matmul_bt(X, ad->A), ad->B);
    for (std::size_t i = 0; i < h.data().size(); ++i) h.data()[i] += ad->scale * low.data()[i];
  }
  return h;
}

/// W' = W + scale * B A. Not idempotent: merging twice adds the update twice.
inline Matrix merge(const Adapter& ad, const Matrix& W) {
  check_conformal(ad, W);
  return add(W, scale(matmul(ad.B, ad.A), ad.scale));
}

/// W = W' - scale * B A, the inverse of merge up to rounding.
inline Matrix unmerge(const Adapter& ad, const Matrix& merged) {
  check_conformal(ad, merged);
  return add(merged, scale(matmul(ad.B, ad.A), -ad.scale));
}

/// Adapter with the same shape whose B is zero, i.e. an exact no-op.
inline Adapter zeroed(const Adapter& ad) {
  Adapter z = ad;
  z.B = Matrix(ad.B.rows(), ad.B.cols());
  return z;
}

class AdapterSet {
 public:
  void insert(const std::string& site, const std::string& key, Adapter ad) {
    if (!is_canonical_key(key)) throw ParameterError("adapter set: non-canonical key '" + key + "'");
    ad.validate();
    auto [it, fresh] = adapters_.try_emplace({site, key}, std::move(ad));
    if (!fresh) throw ParameterError("adapter set: duplicate adapter for " + site + " / " + key);
  }

  /// Exact-key lookup; nullptr means the base weight is used unmodified.
  const Adapter* select(const std::string& site, const std::string& key) const {
    if (!is_canonical_key(key)) throw ParameterError("adapter set: non-canonical key '" + key + "'");
    auto it = adapters_.find({site, key});
    return it == adapters_.end() ? nullptr : &it->second;
  }

  std::size_t size() const { return adapters_.size(); }
  bool empty() const { return adapters_.empty(); }
  const auto& entries() const { return adapters_; }

 private:
  std::map<std::pair<std::string, std::string>, Adapter> adapters_;
};

inline std::optional<Adapter> select(const AdapterSet& set, const std::string& site,
                                     const std::string& key) {
  const Adapter* ad = set.select(site, key);
  if (ad == nullptr) return std::nullopt;
  return *ad;
}

// ---------------------------------------------------------------------------
// Checkpoint files: one JSON header line, then A and B as binary32 little-endian blobs.

struct Checkpoint {
  std::string site;
  std::string key;
  Adapter adapter;
};

inline void save_adapter(const std::filesystem::path& path, const Checkpoint& ck) {
  ck.adapter.validate();
  if (!is_canonical_key(ck.key)) throw ParameterError("checkpoint: non-canonical key");
  nlohmann::json h = {{"site", ck.site},
                      {"key", ck.key},
                      {"r", ck.adapter.rank},
                      {"scale", ck.adapter.scale},
                      {"dims", {{"d_in", ck.adapter.d_in()}, {"d_out", ck.adapter.d_out()}}}};
  std::ofstream os(path, std::ios::binary);
  if (!os) throw FormatError("checkpoint: cannot write " + path.string());
  os << h.dump() << '\n';
  blob::write_f32(os, ck.adapter.A.data());
  blob::write_f32(os, ck.adapter.B.data());
}

inline Checkpoint load_adapter(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw FormatError("checkpoint: missing file " + path.string());
  std::string header;
  std::getline(is, header);
  Checkpoint ck;
  std::size_t d_in = 0;
  std::size_t d_out = 0;
  try {
    const auto h = nlohmann::json::parse(header);
    ck.site = h.at("site").get<std::string>();
    ck.key = h.at("key").get<std::string>();
    ck.adapter.rank = h.at("r").get<std::size_t>();
    ck.adapter.scale = h.at("scale").get<double>();
    d_in = h.at("dims").at("d_in").get<std::size_t>();
    d_out = h.at("dims").at("d_out").get<std::size_t>();
  } catch (const nlohmann::json::exception& e) {
    throw FormatError("checkpoint: bad header: " + std::string(e.what()));
  }
  if (!is_canonical_key(ck.key)) throw FormatError("checkpoint: non-canonical key '" + ck.key + "'");
  const std::size_t r = ck.adapter.rank;
  ck.adapter.A = Matrix(r, d_in, blob::read_f32(is, r * d_in));
  ck.adapter.B = Matrix(d_out, r, blob::read_f32(is, d_out * r));
  ck.adapter.validate();
  return ck;
}

}  // namespace omnilite::mmlora
