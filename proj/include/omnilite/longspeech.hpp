#pragma once

// Long-audio windowing with temporal mean-pool compression, and the synthetic
// needle-in-a-haystack speech stream.

#include <cmath>
#include <filesystem>
#include <fstream>
#include <optional>
#include <random>

#include <json.hpp>

#include "modality.hpp"
#include "numerics.hpp"

namespace omnilite::longspeech {

struct ChunkConfig {
  std::size_t window_frames = 1500;  ///< encoder frames per 30 s clip
  std::size_t pool_factor = 5;       ///< 1500 / 5 = 300 tokens per clip
  double frames_per_second = 50.0;

  void validate() const {
    if (window_frames == 0 || pool_factor == 0 || !(frames_per_second > 0.0)) {
      throw ConfigError("chunk config: all fields must be positive");
    }
    if (window_frames % pool_factor != 0) {
      throw ConfigError("chunk config: window_frames must be a multiple of pool_factor");
    }
  }

  std::size_t tokens_per_window() const { return window_frames / pool_factor; }
};

struct SpeechStream {
  Matrix frames;  ///< T x d
  double frames_per_second = 50.0;
  std::optional<Span> needle_span;  ///< frame coordinates

  std::size_t frame_count() const { return frames.rows(); }
  double duration_s() const { return static_cast<double>(frames.rows()) / frames_per_second; }
};

inline std::size_t frames_for(double seconds, const ChunkConfig& cfg) {
  return static_cast<std::size_t>(std::llround(seconds * cfg.frames_per_second));
}

inline std::size_t window_count(std::size_t frames, const ChunkConfig& cfg) {
  return (frames + cfg.window_frames - 1) / cfg.window_frames;
}

/// Compressed tokens produced for `frames` input frames, padding included.
inline std::size_t compressed_length(std::size_t frames, const ChunkConfig& cfg) {
  return window_count(frames, cfg) * cfg.tokens_per_window();
}

/// Leading compressed tokens that contain at least one real (unpadded) frame.
inline std::size_t unpadded_length(std::size_t frames, const ChunkConfig& cfg) {
  return (frames + cfg.pool_factor - 1) / cfg.pool_factor;
}

/// Frame span to compressed-token span (both endpoints floor-divided).
inline Span map_span(const Span& frames, const ChunkConfig& cfg) {
  const std::size_t a = frames.start / cfg.pool_factor;
  const std::size_t b = frames.end() / cfg.pool_factor;
  return {a, b - a};
}

/// Windows of window_frames (the last one zero-padded), each mean-pooled by pool_factor,
/// flattened in temporal order. Every output token is tagged speech.
inline TokenSequence chunk_and_compress(const SpeechStream& stream, const ChunkConfig& cfg) {
  cfg.validate();
  const std::size_t T = stream.frame_count();
  const std::size_t d = stream.frames.cols();
  const std::size_t n = compressed_length(T, cfg);
  const std::size_t P = cfg.pool_factor;
  TokenSequence seq;
  seq.embed = Matrix(n, d);
  const double inv = 1.0 / static_cast<double>(P);
  for (std::size_t t = 0; t < n; ++t) {
    auto out = seq.embed.row(t);
    const std::size_t first = t * P;
    for (std::size_t f = first; f < std::min(first + P, T); ++f) {
      auto in = stream.frames.row(f);
      for (std::size_t k = 0; k < d; ++k) out[k] += in[k];
    }
    for (double& x : out) x *= inv;
  }
  seq.tags.assign(n, ModalityTag::speech);
  seq.orig_pos.resize(n);
  for (std::size_t i = 0; i < n; ++i) seq.orig_pos[i] = i;
  if (stream.needle_span) seq.needle = map_span(*stream.needle_span, cfg);
  return seq;
}

struct HaystackNeedle {
  double offset_s = 0.0;
  double len_s = 10.0;
  Vector query_vec;
  double strength = 3.0;
};

/// Seeded N(0,1) background frames; needle frames add strength * query_vec.
inline SpeechStream make_haystack(double duration_s, std::size_t dim, const HaystackNeedle& needle,
                                  const ChunkConfig& cfg, std::uint64_t seed) {
  cfg.validate();
  if (dim == 0) throw ParameterError("make_haystack: dim must be >= 1");
  if (needle.offset_s < 0.0 || needle.len_s < 0.0 || needle.offset_s + needle.len_s > duration_s) {
    throw ParameterError("make_haystack: needle [" + std::to_string(needle.offset_s) + " s, +" +
                         std::to_string(needle.len_s) + " s) does not fit in " +
                         std::to_string(duration_s) + " s");
  }
  if (needle.query_vec.size() != dim) throw ParameterError("make_haystack: query_vec width");
  const std::size_t T = frames_for(duration_s, cfg);
  SpeechStream st;
  st.frames_per_second = cfg.frames_per_second;
  st.frames = Matrix(T, dim);
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> n01(0.0, 1.0);
  for (double& x : st.frames.data()) x = n01(rng);
  const Span span{frames_for(needle.offset_s, cfg), frames_for(needle.len_s, cfg)};
  if (span.end() > T) throw ParameterError("make_haystack: needle exceeds stream");
  for (std::size_t f = span.start; f < span.end(); ++f) {
    auto r = st.frames.row(f);
    for (std::size_t k = 0; k < dim; ++k) r[k] += needle.strength * needle.query_vec[k];
  }
  st.needle_span = span;
  return st;
}

// ---------------------------------------------------------------------------
// Haystack spec files: one prompt = compressed haystack followed by text query tokens.

struct HaystackSpec {
  double duration_s = 120.0;
  std::size_t dim = 16;
  std::uint64_t seed = 0;
  HaystackNeedle needle;
  std::size_t query_tokens = 8;
  double query_gain = 4.0;
  ChunkConfig chunk;
};

inline HaystackSpec parse_haystack_spec(const nlohmann::json& j) {
  HaystackSpec s;
  try {
    s.duration_s = j.at("duration_s").get<double>();
    s.dim = j.value("dim", s.dim);
    s.seed = j.value("seed", s.seed);
    s.query_tokens = j.value("query_tokens", s.query_tokens);
    s.query_gain = j.value("query_gain", s.query_gain);
    const auto& n = j.at("needle");
    s.needle.offset_s = n.at("offset_s").get<double>();
    s.needle.len_s = n.value("len_s", s.needle.len_s);
    s.needle.strength = n.value("strength", s.needle.strength);
    if (n.contains("query_vec")) s.needle.query_vec = n.at("query_vec").get<Vector>();
    if (j.contains("chunk")) {
      const auto& c = j.at("chunk");
      s.chunk.window_frames = c.value("window_frames", s.chunk.window_frames);
      s.chunk.pool_factor = c.value("pool_factor", s.chunk.pool_factor);
      s.chunk.frames_per_second = c.value("frames_per_second", s.chunk.frames_per_second);
    }
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("haystack spec: ") + e.what());
  }
  if (s.needle.query_vec.empty()) s.needle.query_vec = random_unit_vector(s.dim, s.seed + 1);
  return s;
}

inline HaystackSpec load_haystack_spec(const std::filesystem::path& path) {
  std::ifstream is(path);
  if (!is) throw FormatError("haystack spec: missing file " + path.string());
  try {
    return parse_haystack_spec(nlohmann::json::parse(is));
  } catch (const nlohmann::json::parse_error& e) {
    throw FormatError("haystack spec: " + std::string(e.what()));
  }
}

/// Compressed haystack (padding-only tokens dropped) followed by the text query. Text
/// tokens are N(0,1) noise plus query_gain * query_vec.
inline TokenSequence build_haystack_sequence(const HaystackSpec& spec) {
  const SpeechStream st =
      make_haystack(spec.duration_s, spec.dim, spec.needle, spec.chunk, spec.seed);
  TokenSequence speech = chunk_and_compress(st, spec.chunk);
  const std::size_t keep = unpadded_length(st.frame_count(), spec.chunk);
  std::vector<std::size_t> rows(keep);
  for (std::size_t i = 0; i < keep; ++i) rows[i] = i;
  TokenSequence seq = speech.select(rows);

  std::mt19937_64 rng(spec.seed ^ 0x5bd1e995ULL);
  std::normal_distribution<double> n01(0.0, 1.0);
  Vector tok(spec.dim);
  for (std::size_t q = 0; q < spec.query_tokens; ++q) {
    for (std::size_t k = 0; k < spec.dim; ++k) {
      tok[k] = n01(rng) + spec.query_gain * spec.needle.query_vec[k];
    }
    seq.embed.append_row(tok);
    seq.tags.push_back(ModalityTag::text);
    seq.orig_pos.push_back(seq.orig_pos.empty() ? 0 : seq.orig_pos.back() + 1);
  }
  blob::round_to_f32(seq.embed);
  return seq;
}

}  // namespace omnilite::longspeech
