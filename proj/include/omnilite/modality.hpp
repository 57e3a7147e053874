#pragma once

#include <algorithm>
#include <array>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <optional>
#include <random>
#include <set>
#include <string>
#include <string_view>
#include <vector>

#include <json.hpp>

#include "blob.hpp"
#include "numerics.hpp"

namespace omnilite {

enum class ModalityTag : std::uint8_t { text, image, video, speech, sound };

inline constexpr std::array<ModalityTag, 5> kAllModalities = {
    ModalityTag::text, ModalityTag::image, ModalityTag::video, ModalityTag::speech,
    ModalityTag::sound};

inline std::string_view to_string(ModalityTag t) {
  switch (t) {
    case ModalityTag::text: return "text";
    case ModalityTag::image: return "image";
    case ModalityTag::video: return "video";
    case ModalityTag::speech: return "speech";
    case ModalityTag::sound: return "sound";
  }
  return "?";
}

inline std::optional<ModalityTag> parse_modality(std::string_view s) {
  for (ModalityTag t : kAllModalities)
    if (to_string(t) == s) return t;
  return std::nullopt;
}

/// Half-open index range [start, start+len).
struct Span {
  std::size_t start = 0;
  std::size_t len = 0;

  std::size_t end() const { return start + len; }
  bool contains(std::size_t pos) const { return pos >= start && pos < end(); }
  bool operator==(const Span&) const = default;
};

struct Run {
  ModalityTag tag = ModalityTag::text;
  std::size_t len = 0;
  bool operator==(const Run&) const = default;
};

/// Embedded tokens with modality tags and original positions. Row i of `embed` is token i.
struct TokenSequence {
  Matrix embed;
  std::vector<ModalityTag> tags;
  std::vector<std::size_t> orig_pos;
  /// Needle span in orig_pos coordinates, when the sequence carries a planted needle.
  std::optional<Span> needle;

  std::size_t size() const { return tags.size(); }
  std::size_t dim() const { return embed.cols(); }
  bool empty() const { return tags.empty(); }

  void validate() const {
    if (tags.size() != embed.rows() || orig_pos.size() != tags.size()) {
      throw ShapeError("token sequence: embed rows, tags and positions disagree");
    }
    for (std::size_t i = 1; i < orig_pos.size(); ++i) {
      if (orig_pos[i] <= orig_pos[i - 1]) throw InputError("token sequence: positions not increasing");
    }
  }

  std::size_t count(ModalityTag t) const {
    return static_cast<std::size_t>(std::count(tags.begin(), tags.end(), t));
  }

  /// Subsequence at the given row indices (which must be increasing).
  TokenSequence select(std::span<const std::size_t> rows) const {
    TokenSequence out;
    out.embed = embed.gather_rows(rows);
    out.tags.reserve(rows.size());
    out.orig_pos.reserve(rows.size());
    for (std::size_t r : rows) {
      out.tags.push_back(tags[r]);
      out.orig_pos.push_back(orig_pos[r]);
    }
    out.needle = needle;
    return out;
  }

  bool operator==(const TokenSequence&) const = default;
};

inline std::vector<Run> runs_of(std::span<const ModalityTag> tags) {
  std::vector<Run> runs;
  for (ModalityTag t : tags) {
    if (!runs.empty() && runs.back().tag == t) {
      ++runs.back().len;
    } else {
      runs.push_back({t, 1});
    }
  }
  return runs;
}

inline std::vector<ModalityTag> expand_runs(std::span<const Run> runs) {
  std::vector<ModalityTag> tags;
  for (const Run& r : runs) tags.insert(tags.end(), r.len, r.tag);
  return tags;
}

/// Sorted, deduplicated, '+'-joined names of the modalities present.
inline std::string modality_key(std::span<const ModalityTag> tags) {
  std::set<std::string_view> names;
  for (ModalityTag t : tags) names.insert(to_string(t));
  std::string key;
  for (std::string_view n : names) {
    if (!key.empty()) key += '+';
    key += n;
  }
  return key;
}

inline std::string modality_key(const TokenSequence& seq) { return modality_key(seq.tags); }

/// True when `key` is what modality_key would produce for some non-empty tag set.
inline bool is_canonical_key(std::string_view key) {
  if (key.empty()) return false;
  std::vector<std::string_view> parts;
  std::size_t pos = 0;
  while (true) {
    const std::size_t next = key.find('+', pos);
    parts.push_back(key.substr(pos, next == std::string_view::npos ? next : next - pos));
    if (next == std::string_view::npos) break;
    pos = next + 1;
  }
  for (std::size_t i = 0; i < parts.size(); ++i) {
    if (!parse_modality(parts[i])) return false;
    if (i > 0 && !(parts[i - 1] < parts[i])) return false;
  }
  return true;
}

// ---------------------------------------------------------------------------
// Manifest files

struct Manifest {
  std::size_t dim = 0;
  std::vector<Run> runs;
  std::string embedding_path;
  std::optional<Span> needle_span;
};

inline Manifest parse_manifest(const nlohmann::json& j) {
  Manifest m;
  auto field = [&](const char* name) -> const nlohmann::json& {
    if (!j.contains(name)) throw FormatError(std::string("manifest: missing field '") + name + "'");
    return j.at(name);
  };
  try {
    m.dim = field("dim").get<std::size_t>();
    m.embedding_path = field("embedding_path").get<std::string>();
    const auto& runs = field("runs");
    if (!runs.is_array()) throw FormatError("manifest: 'runs' must be an array");
    for (std::size_t i = 0; i < runs.size(); ++i) {
      const std::string name = runs[i].at("tag").get<std::string>();
      auto tag = parse_modality(name);
      if (!tag) {
        throw FormatError("manifest: runs[" + std::to_string(i) + "].tag: unknown modality '" +
                          name + "'");
      }
      m.runs.push_back({*tag, runs[i].at("len").get<std::size_t>()});
    }
    if (j.contains("needle_span") && !j.at("needle_span").is_null()) {
      const auto& ns = j.at("needle_span");
      m.needle_span = Span{ns.at("start").get<std::size_t>(), ns.at("len").get<std::size_t>()};
    }
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("manifest: ") + e.what());
  }
  if (m.dim == 0) throw FormatError("manifest: dim must be >= 1");
  if (m.needle_span) {
    std::size_t begin = 0;
    bool inside = false;
    for (const Run& r : m.runs) {
      if (m.needle_span->start >= begin && m.needle_span->end() <= begin + r.len) inside = true;
      begin += r.len;
    }
    if (!inside) throw FormatError("manifest: needle_span does not lie inside one run");
  }
  return m;
}

inline nlohmann::json to_json(const Manifest& m) {
  nlohmann::json j;
  j["dim"] = m.dim;
  j["runs"] = nlohmann::json::array();
  for (const Run& r : m.runs) j["runs"].push_back({{"tag", to_string(r.tag)}, {"len", r.len}});
  j["embedding_path"] = m.embedding_path;
  if (m.needle_span) {
    j["needle_span"] = {{"start", m.needle_span->start}, {"len", m.needle_span->len}};
  }
  return j;
}

/// Loads a manifest and its embedding blob. Relative embedding paths resolve against the
/// manifest's directory.
inline TokenSequence load_manifest(const std::filesystem::path& path) {
  std::ifstream is(path);
  if (!is) throw FormatError("manifest: missing file " + path.string());
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(is);
  } catch (const nlohmann::json::exception& e) {
    throw FormatError("manifest: " + path.string() + ": " + e.what());
  }
  const Manifest m = parse_manifest(j);
  std::filesystem::path emb = m.embedding_path;
  if (emb.is_relative()) emb = path.parent_path() / emb;

  TokenSequence seq;
  seq.tags = expand_runs(m.runs);
  seq.embed = blob::load_matrix(emb, m.dim);
  if (seq.embed.rows() != seq.tags.size()) {
    throw FormatError("manifest: runs sum to " + std::to_string(seq.tags.size()) +
                      " tokens but embedding has " + std::to_string(seq.embed.rows()) + " rows");
  }
  if (seq.embed.rows() == 0) seq.embed = Matrix(0, m.dim);
  seq.orig_pos.resize(seq.tags.size());
  for (std::size_t i = 0; i < seq.orig_pos.size(); ++i) seq.orig_pos[i] = i;
  seq.needle = m.needle_span;
  return seq;
}

/// Writes `<path>` plus an embedding blob named `embedding_file` next to it.
inline void save_manifest(const TokenSequence& seq, const std::filesystem::path& path,
                          const std::string& embedding_file) {
  seq.validate();
  if (seq.dim() == 0) throw FormatError("manifest: sequence has zero width");
  Manifest m;
  m.dim = seq.dim();
  m.runs = runs_of(seq.tags);
  m.embedding_path = embedding_file;
  m.needle_span = seq.needle;
  blob::save_matrix(path.parent_path() / embedding_file, seq.embed);
  std::ofstream os(path);
  if (!os) throw FormatError("manifest: cannot write " + path.string());
  os << to_json(m).dump(2) << '\n';
}

// ---------------------------------------------------------------------------
// Synthetic embeddings

struct NeedleSpec {
  std::size_t start = 0;
  std::size_t len = 0;
  Vector query_vec;  ///< direction the needle and the text query share
  double strength = 3.0;
  /// Weight of query_vec added to every text token, making text tokens the query.
  double query_gain = 4.0;
};

struct SynthSpec {
  std::vector<Run> runs;
  std::size_t dim = 16;
  std::uint64_t seed = 0;
  std::optional<NeedleSpec> needle;
};

/// Seeded unit-norm direction in `dim` dimensions.
inline Vector random_unit_vector(std::size_t dim, std::uint64_t seed) {
  std::mt19937_64 rng(seed ^ 0x9e3779b97f4a7c15ULL);
  std::normal_distribution<double> n01(0.0, 1.0);
  Vector v(dim);
  double norm = 0.0;
  for (double& x : v) {
    x = n01(rng);
    norm += x * x;
  }
  norm = std::sqrt(norm);
  for (double& x : v) x /= norm;
  return v;
}

/// Background tokens are i.i.d. N(0,1) per entry. Needle tokens add strength * query_vec;
/// text tokens add query_gain * query_vec. Entries are rounded to binary32 so sequences
/// round-trip through manifests unchanged.
inline TokenSequence synth_sequence(const SynthSpec& spec) {
  if (spec.dim == 0) throw ParameterError("synth_sequence: dim must be >= 1");
  TokenSequence seq;
  seq.tags = expand_runs(spec.runs);
  const std::size_t n = seq.tags.size();
  if (spec.needle) {
    const auto& nd = *spec.needle;
    if (nd.start + nd.len > n) {
      throw ParameterError("synth_sequence: needle [" + std::to_string(nd.start) + ", " +
                           std::to_string(nd.start + nd.len) + ") exceeds length " +
                           std::to_string(n));
    }
    if (nd.query_vec.size() != spec.dim) throw ParameterError("synth_sequence: query_vec width");
  }
  std::mt19937_64 rng(spec.seed);
  std::normal_distribution<double> n01(0.0, 1.0);
  seq.embed = Matrix(n, spec.dim);
  for (double& x : seq.embed.data()) x = n01(rng);
  if (spec.needle) {
    const auto& nd = *spec.needle;
    for (std::size_t i = 0; i < n; ++i) {
      double w = 0.0;
      if (seq.tags[i] == ModalityTag::text) w = nd.query_gain;
      if (i >= nd.start && i < nd.start + nd.len) w = nd.strength;
      if (w == 0.0) continue;
      auto r = seq.embed.row(i);
      for (std::size_t k = 0; k < spec.dim; ++k) r[k] += w * nd.query_vec[k];
    }
    seq.needle = Span{nd.start, nd.len};
  }
  blob::round_to_f32(seq.embed);
  seq.orig_pos.resize(n);
  for (std::size_t i = 0; i < n; ++i) seq.orig_pos[i] = i;
  return seq;
}

}  // namespace omnilite
