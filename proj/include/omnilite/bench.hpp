#pragma once

// Desk-scale efficiency harness: prefill latency, decode throughput, training-step time,
// KV-cache accounting against a closed-form model, and the needle-in-a-haystack grid.

#include <algorithm>
#include <bit>
#include <chrono>
#include <cmath>
#include <ctime>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "lcmr.hpp"
#include "lmme.hpp"
#include "longspeech.hpp"
#include "mmlora.hpp"
#include "modality.hpp"
#include "model.hpp"

namespace omnilite::bench {

inline constexpr const char* kSchema = "omnilite.bench/1";

struct Variant {
  std::string name;
  std::optional<lmme::ExtractorConfig> extractor;
};

struct BenchConfig {
  ModelConfig model;
  std::vector<std::size_t> context_lengths = {256, 512, 1024, 2048, 4096, 8192};
  std::size_t text_tokens = 16;
  std::vector<Variant> variants = {
      {"baseline", std::nullopt},
      {"LMME(4, 0.8)", lmme::ExtractorConfig{4, 0.8, 1}},
      {"LMME(4, 0.7)", lmme::ExtractorConfig{4, 0.7, 1}},
  };
  std::vector<Variant> train_variants = {
      {"baseline", std::nullopt},
      {"LMME(4, 0.9)", lmme::ExtractorConfig{4, 0.9, 1}},
      {"LMME(4, 0.8)", lmme::ExtractorConfig{4, 0.8, 1}},
      {"LMME(4, 0.7)", lmme::ExtractorConfig{4, 0.7, 1}},
  };
  std::size_t decode_steps = 32;
  std::size_t repeats = 3;
  std::size_t bytes_per_elem = 2;
  /// Cells whose predicted KV plus attention footprint exceeds this are reported as OOM.
  /// Zero disables the check.
  std::size_t memory_budget_bytes = 0;
  std::size_t train_length = 4096;
  std::size_t adapter_rank = 4;
  std::uint64_t seed = 7;

  void validate() const {
    model.validate();
    if (repeats < 3) throw ConfigError("bench: repeats must be >= 3");
    if (context_lengths.empty()) throw ConfigError("bench: no context lengths");
    if (!std::is_sorted(context_lengths.begin(), context_lengths.end())) {
      throw ConfigError("bench: context lengths must be ascending");
    }
    for (std::size_t len : context_lengths) {
      if (len <= text_tokens) throw ConfigError("bench: context length must exceed text_tokens");
    }
    if (variants.empty() || train_variants.empty()) throw ConfigError("bench: no variants");
    for (const auto* vs : {&variants, &train_variants}) {
      for (const Variant& v : *vs) {
        if (v.extractor) {
          v.extractor->validate();
          if (model.layers % v.extractor->n != 0) {
            throw ConfigError("bench: variant " + v.name + " does not divide the layer count");
          }
        }
      }
    }
    if (bytes_per_elem == 0) throw ConfigError("bench: bytes_per_elem must be positive");
  }
};

// ---------------------------------------------------------------------------
// Config I/O

inline nlohmann::json variant_to_json(const Variant& v) {
  nlohmann::json j = {{"name", v.name}};
  if (v.extractor) {
    j["extractor"] = {{"n", v.extractor->n}, {"rho", v.extractor->rho}, {"min_keep", v.extractor->min_keep}};
  }
  return j;
}

inline Variant variant_from_json(const nlohmann::json& j) {
  Variant v;
  if (j.contains("extractor") && !j.at("extractor").is_null()) {
    const auto& e = j.at("extractor");
    v.extractor = lmme::ExtractorConfig{e.at("n").get<std::size_t>(), e.at("rho").get<double>(),
                                        e.value("min_keep", std::size_t{1})};
  }
  v.name = j.value("name", v.extractor ? v.extractor->name() : std::string("baseline"));
  return v;
}

inline nlohmann::json model_to_json(const ModelConfig& m) {
  return {{"layers", m.layers}, {"heads", m.heads},         {"dim", m.dim},
          {"ffn", m.ffn},       {"vocab", m.vocab},         {"seed", m.seed},
          {"pe_scale", m.pe_scale}, {"residual_scale", m.residual_scale},
          {"key_noise", m.key_noise}};
}

inline ModelConfig model_from_json(const nlohmann::json& j, ModelConfig m = {}) {
  m.layers = j.value("layers", m.layers);
  m.heads = j.value("heads", m.heads);
  m.dim = j.value("dim", m.dim);
  m.ffn = j.value("ffn", m.ffn);
  m.vocab = j.value("vocab", m.vocab);
  m.seed = j.value("seed", m.seed);
  m.pe_scale = j.value("pe_scale", m.pe_scale);
  m.residual_scale = j.value("residual_scale", m.residual_scale);
  m.key_noise = j.value("key_noise", m.key_noise);
  return m;
}

inline nlohmann::json to_json(const BenchConfig& c) {
  nlohmann::json j = {{"schema", kSchema},
                      {"model", model_to_json(c.model)},
                      {"context_lengths", c.context_lengths},
                      {"text_tokens", c.text_tokens},
                      {"decode_steps", c.decode_steps},
                      {"repeats", c.repeats},
                      {"bytes_per_elem", c.bytes_per_elem},
                      {"memory_budget_bytes", c.memory_budget_bytes},
                      {"train_length", c.train_length},
                      {"adapter_rank", c.adapter_rank},
                      {"seed", c.seed}};
  j["variants"] = nlohmann::json::array();
  for (const Variant& v : c.variants) j["variants"].push_back(variant_to_json(v));
  j["train_variants"] = nlohmann::json::array();
  for (const Variant& v : c.train_variants) j["train_variants"].push_back(variant_to_json(v));
  return j;
}

inline BenchConfig bench_config_from_json(const nlohmann::json& j) {
  BenchConfig c;
  try {
    if (j.contains("model")) c.model = model_from_json(j.at("model"), c.model);
    c.context_lengths = j.value("context_lengths", c.context_lengths);
    c.text_tokens = j.value("text_tokens", c.text_tokens);
    c.decode_steps = j.value("decode_steps", c.decode_steps);
    c.repeats = j.value("repeats", c.repeats);
    c.bytes_per_elem = j.value("bytes_per_elem", c.bytes_per_elem);
    c.memory_budget_bytes = j.value("memory_budget_bytes", c.memory_budget_bytes);
    c.train_length = j.value("train_length", c.train_length);
    c.adapter_rank = j.value("adapter_rank", c.adapter_rank);
    c.seed = j.value("seed", c.seed);
    if (j.contains("variants")) {
      c.variants.clear();
      for (const auto& v : j.at("variants")) c.variants.push_back(variant_from_json(v));
    }
    if (j.contains("train_variants")) {
      c.train_variants.clear();
      for (const auto& v : j.at("train_variants")) c.train_variants.push_back(variant_from_json(v));
    }
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("bench config: ") + e.what());
  }
  return c;
}

inline BenchConfig load_bench_config(const std::filesystem::path& path) {
  std::ifstream is(path);
  if (!is) throw FormatError("bench config: missing file " + path.string());
  try {
    return bench_config_from_json(nlohmann::json::parse(is));
  } catch (const nlohmann::json::parse_error& e) {
    throw FormatError("bench config: " + std::string(e.what()));
  }
}

inline std::uint64_t fnv1a(std::string_view bytes, std::uint64_t h = 0xcbf29ce484222325ULL) {
  for (unsigned char c : bytes) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  return h;
}

inline std::uint64_t checksum(std::span<const double> values) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (double v : values) {
    const auto bits = std::bit_cast<std::uint64_t>(v);
    for (int i = 0; i < 8; ++i) {
      h ^= (bits >> (8 * i)) & 0xffu;
      h *= 0x100000001b3ULL;
    }
  }
  return h;
}

inline std::string hex(std::uint64_t v) {
  std::ostringstream os;
  os << std::hex << std::setw(16) << std::setfill('0') << v;
  return os.str();
}

inline std::string config_hash(const BenchConfig& c) { return hex(fnv1a(to_json(c).dump())); }

// ---------------------------------------------------------------------------
// Analytic cost model

/// KV rows held by each layer when a prompt of `nontext` + `text` tokens is prefilled.
/// Layers in block b hold the tokens that entered that block.
inline std::vector<std::size_t> predicted_layer_rows(std::size_t nontext, std::size_t text,
                                                     const ModelConfig& model,
                                                     const std::optional<lmme::ExtractorConfig>& ex) {
  std::vector<std::size_t> rows(model.layers, nontext + text);
  if (!ex || text == 0 || nontext == 0) return rows;
  const std::size_t depth = model.layers / ex->n;
  const auto sched = lmme::retention_schedule(nontext, *ex);
  for (std::size_t l = depth; l < model.layers; ++l) rows[l] = sched[l / depth - 1] + text;
  return rows;
}

inline std::size_t predicted_kv_bytes(std::span<const std::size_t> layer_rows, std::size_t dim,
                                      std::size_t bytes_per_elem) {
  std::size_t total = 0;
  for (std::size_t r : layer_rows) total += 2 * r * dim * bytes_per_elem;
  return total;
}

inline double predicted_flops(std::span<const std::size_t> layer_rows, std::size_t text,
                              const ModelConfig& m, bool scoring) {
  const double d = static_cast<double>(m.dim);
  const double f = static_cast<double>(m.ffn);
  double total = 0.0;
  for (std::size_t l = 0; l < layer_rows.size(); ++l) {
    const double r = static_cast<double>(layer_rows[l]);
    total += 2.0 * r * d * d * 4.0;                 // q, k, v, o projections
    total += 2.0 * r * d * f * 2.0;                 // feed-forward
    total += 2.0 * d * r * (r + 1.0) / 2.0 * 2.0;   // causal scores and weighted values
    if (scoring && (l + 1) % (m.layers / std::max<std::size_t>(1, m.extractor ? m.extractor->n : 1)) == 0) {
      total += 2.0 * static_cast<double>(text) * (r - static_cast<double>(text)) * d;
    }
  }
  const double last = layer_rows.empty() ? 0.0 : static_cast<double>(layer_rows.back());
  total += 2.0 * last * d * static_cast<double>(m.vocab);
  return total;
}

/// Largest per-layer attention score matrix, heads * rows^2 elements, if it were materialised.
inline std::size_t peak_attention_elements(std::span<const std::size_t> layer_rows, std::size_t heads) {
  std::size_t peak = 0;
  for (std::size_t r : layer_rows) peak = std::max(peak, heads * r * r);
  return peak;
}

// ---------------------------------------------------------------------------
// Reports

struct Cell {
  std::string variant;
  std::size_t length = 0;
  bool oom = false;
  double prefill_seconds = 0.0;
  double decode_tokens_per_second = 0.0;
  double train_step_seconds = 0.0;
  std::size_t kv_bytes_measured = 0;
  std::size_t kv_bytes_predicted = 0;
  double flops_predicted = 0.0;
  std::size_t peak_attention_elements = 0;
  std::vector<std::size_t> survivors_per_block;
  std::uint64_t output_checksum = 0;
};

struct BenchReport {
  std::string kind;  ///< prefill | decode | train
  std::vector<Cell> cells;
  std::vector<std::string> violations;
  std::uint64_t seed = 0;
  std::string config_hash;
  std::string timestamp;

  const Cell* find(const std::string& variant, std::size_t length) const {
    for (const Cell& c : cells)
      if (c.variant == variant && c.length == length) return &c;
    return nullptr;
  }
};

inline std::string utc_timestamp() {
  const std::time_t now = std::time(nullptr);
  std::tm tm{};
  gmtime_r(&now, &tm);
  char buf[32];
  std::strftime(buf, sizeof buf, "%Y-%m-%dT%H:%M:%SZ", &tm);
  return buf;
}

inline double median(std::vector<double> v) {
  if (v.empty()) return 0.0;
  std::sort(v.begin(), v.end());
  const std::size_t n = v.size();
  return n % 2 ? v[n / 2] : 0.5 * (v[n / 2 - 1] + v[n / 2]);
}

template <class F>
double time_seconds(F&& f) {
  const auto t0 = std::chrono::steady_clock::now();
  f();
  const auto t1 = std::chrono::steady_clock::now();
  return std::chrono::duration<double>(t1 - t0).count();
}

/// Median wall time of `repeats` runs after one warmup.
template <class F>
double median_time(std::size_t repeats, F&& f) {
  f();
  std::vector<double> times;
  for (std::size_t r = 0; r < repeats; ++r) times.push_back(time_seconds(f));
  return median(times);
}

/// Bench prompt: `length - text` tokens of `modality` followed by `text` text tokens.
inline TokenSequence bench_sequence(std::size_t length, std::size_t text, ModalityTag modality,
                                    std::size_t dim, std::uint64_t seed) {
  SynthSpec spec;
  spec.runs = {{modality, length - text}, {ModalityTag::text, text}};
  spec.dim = dim;
  spec.seed = seed;
  return synth_sequence(spec);
}

inline ModelConfig with_extractor(ModelConfig m, const Variant& v) {
  m.extractor = v.extractor;
  return m;
}

namespace detail {

inline Cell predict_cell(const BenchConfig& cfg, const Variant& v, std::size_t length) {
  Cell c;
  c.variant = v.name;
  c.length = length;
  const ModelConfig mc = with_extractor(cfg.model, v);
  const auto rows = predicted_layer_rows(length - cfg.text_tokens, cfg.text_tokens, mc, v.extractor);
  c.kv_bytes_predicted = predicted_kv_bytes(rows, mc.dim, cfg.bytes_per_elem);
  c.flops_predicted = predicted_flops(rows, cfg.text_tokens, mc, v.extractor.has_value());
  c.peak_attention_elements = peak_attention_elements(rows, mc.heads);
  const std::size_t footprint = c.kv_bytes_predicted + c.peak_attention_elements * cfg.bytes_per_elem;
  c.oom = cfg.memory_budget_bytes != 0 && footprint > cfg.memory_budget_bytes;
  return c;
}

inline void check_kv(BenchReport& rep, const Cell& c) {
  if (!c.oom && c.kv_bytes_measured != c.kv_bytes_predicted) {
    rep.violations.push_back("kv bytes mismatch for " + c.variant + " @ " + std::to_string(c.length) +
                             ": measured " + std::to_string(c.kv_bytes_measured) + ", predicted " +
                             std::to_string(c.kv_bytes_predicted));
  }
}

inline BenchReport make_report(const BenchConfig& cfg, std::string kind) {
  BenchReport rep;
  rep.kind = std::move(kind);
  rep.seed = cfg.seed;
  rep.config_hash = config_hash(cfg);
  rep.timestamp = utc_timestamp();
  return rep;
}

/// Keep-all variants must reproduce the baseline's outputs bit for bit.
inline void check_keep_all(BenchReport& rep, const BenchConfig& cfg, std::span<const Variant> variants) {
  const Variant* base = nullptr;
  for (const Variant& v : variants)
    if (!v.extractor) base = &v;
  if (base == nullptr) return;
  for (const Variant& v : variants) {
    if (!v.extractor || v.extractor->rho != 1.0) continue;
    for (std::size_t len : cfg.context_lengths) {
      const Cell* a = rep.find(base->name, len);
      const Cell* b = rep.find(v.name, len);
      if (a && b && !a->oom && !b->oom && a->output_checksum != b->output_checksum) {
        rep.violations.push_back("keep-all variant " + v.name + " diverges from baseline @ " +
                                 std::to_string(len));
      }
    }
  }
}

}  // namespace detail

inline BenchReport run_prefill_bench(const BenchConfig& cfg) {
  cfg.validate();
  BenchReport rep = detail::make_report(cfg, "prefill");
  for (std::size_t len : cfg.context_lengths) {
    const TokenSequence seq = bench_sequence(len, cfg.text_tokens, ModalityTag::image, cfg.model.dim,
                                             cfg.seed + len);
    for (const Variant& v : cfg.variants) {
      Cell c = detail::predict_cell(cfg, v, len);
      if (!c.oom) {
        const Model model = init_model(with_extractor(cfg.model, v));
        PrefillResult out;
        c.prefill_seconds = median_time(cfg.repeats, [&] { out = prefill(model, seq); });
        c.kv_bytes_measured = kv_bytes(out.cache, cfg.bytes_per_elem);
        c.output_checksum = checksum(out.logits.data());
        for (const auto& b : out.trace.blocks) c.survivors_per_block.push_back(b.retained.size());
      }
      detail::check_kv(rep, c);
      rep.cells.push_back(std::move(c));
    }
  }
  detail::check_keep_all(rep, cfg, cfg.variants);
  return rep;
}

inline BenchReport run_decode_bench(const BenchConfig& cfg) {
  cfg.validate();
  if (cfg.decode_steps == 0) throw ConfigError("bench: decode_steps must be >= 1");
  BenchReport rep = detail::make_report(cfg, "decode");
  for (std::size_t len : cfg.context_lengths) {
    const TokenSequence seq = bench_sequence(len, cfg.text_tokens, ModalityTag::image, cfg.model.dim,
                                             cfg.seed + len);
    for (const Variant& v : cfg.variants) {
      Cell c = detail::predict_cell(cfg, v, len);
      if (!c.oom) {
        const Model model = init_model(with_extractor(cfg.model, v));
        const PrefillResult pre = prefill(model, seq);
        c.kv_bytes_measured = kv_bytes(pre.cache, cfg.bytes_per_elem);
        const auto last = pre.logits.row(pre.logits.rows() - 1);
        std::vector<std::size_t> ids;
        KvCache cache;
        auto run = [&] {
          cache = pre.cache;
          const double t = time_seconds([&] { ids = generate_greedy(model, cache, last, cfg.decode_steps); });
          return t;
        };
        run();
        std::vector<double> times;
        for (std::size_t r = 0; r < cfg.repeats; ++r) times.push_back(run());
        c.decode_tokens_per_second = static_cast<double>(cfg.decode_steps) / median(times);
        std::vector<double> as_double(ids.begin(), ids.end());
        c.output_checksum = checksum(as_double);
      }
      detail::check_kv(rep, c);
      rep.cells.push_back(std::move(c));
    }
  }
  detail::check_keep_all(rep, cfg, cfg.variants);
  return rep;
}

/// Adapters on every attention site for `key`, with non-zero B so the low-rank path does work.
inline std::shared_ptr<mmlora::AdapterSet> trained_adapters(const ModelConfig& m, const std::string& key,
                                                            std::size_t rank, std::uint64_t seed) {
  auto set = std::make_shared<mmlora::AdapterSet>();
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> dist(0.0, 0.02);
  for (std::size_t l = 0; l < m.layers; ++l) {
    for (char p : {'q', 'k', 'v', 'o'}) {
      mmlora::Adapter ad = mmlora::make_adapter(m.dim, m.dim, rank, seed + l * 4 + static_cast<std::uint64_t>(p));
      for (double& x : ad.B.data()) x = dist(rng);
      set->insert(adapter_site(l, p), key, std::move(ad));
    }
  }
  return set;
}

/// One training-step proxy: adapted forward pass, alignment-loss gradient between the
/// surviving speech states and the text states, and an adapter application on the output.
inline double train_step(const Model& model, const TokenSequence& seq, const mmlora::Adapter& head_adapter) {
  const PrefillResult out = prefill(model, seq);
  std::vector<std::size_t> speech_rows;
  std::vector<std::size_t> text_rows;
  for (std::size_t i = 0; i < out.tags.size(); ++i) {
    if (out.tags[i] == ModalityTag::text) {
      text_rows.push_back(i);
    } else if (speech_rows.size() < 64) {
      speech_rows.push_back(i);
    }
  }
  double acc = 0.0;
  if (!speech_rows.empty() && !text_rows.empty()) {
    const Matrix xs = out.hidden.gather_rows(speech_rows);
    const Matrix xt = out.hidden.gather_rows(text_rows);
    const auto g = lcmr::lcmr_grad(xs, xt, {});
    acc += g.speech(0, 0);
  }
  const Matrix W = Matrix::identity(model.cfg.dim);
  const Matrix h = mmlora::apply(head_adapter, W, transpose(out.hidden));
  return acc + h(0, 0);
}

inline BenchReport run_train_step_bench(const BenchConfig& cfg) {
  cfg.validate();
  BenchReport rep = detail::make_report(cfg, "train");
  const TokenSequence seq = bench_sequence(cfg.train_length, cfg.text_tokens, ModalityTag::speech,
                                           cfg.model.dim, cfg.seed + cfg.train_length);
  const std::string key = modality_key(seq);
  auto adapters = trained_adapters(cfg.model, key, cfg.adapter_rank, cfg.seed);
  const mmlora::Adapter head_adapter = mmlora::make_adapter(cfg.model.dim, cfg.model.dim, cfg.adapter_rank, cfg.seed + 1);
  BenchConfig sized = cfg;
  sized.context_lengths = {cfg.train_length};
  for (const Variant& v : cfg.train_variants) {
    Cell c = detail::predict_cell(sized, v, cfg.train_length);
    if (!c.oom) {
      ModelConfig mc = with_extractor(cfg.model, v);
      mc.adapters = adapters;
      const Model model = init_model(mc);
      double sink = 0.0;
      c.train_step_seconds = median_time(cfg.repeats, [&] { sink = train_step(model, seq, head_adapter); });
      c.output_checksum = checksum(std::span<const double>(&sink, 1));
    }
    rep.cells.push_back(std::move(c));
  }
  return rep;
}

/// 1 - variant / baseline step time, per variant name.
inline std::map<std::string, double> train_reductions(const BenchReport& rep) {
  std::map<std::string, double> out;
  const Cell* base = nullptr;
  for (const Cell& c : rep.cells)
    if (c.variant == "baseline") base = &c;
  if (base == nullptr || base->oom) return out;
  for (const Cell& c : rep.cells) {
    if (!c.oom) out[c.variant] = 1.0 - c.train_step_seconds / base->train_step_seconds;
  }
  return out;
}

/// Mean over layers of retained non-text KV rows divided by the initial non-text count.
inline double retained_kv_fraction(const KvCache& cache, std::size_t initial_nontext) {
  if (cache.layers.empty() || initial_nontext == 0) return 1.0;
  double sum = 0.0;
  for (const LayerCache& lc : cache.layers) {
    std::size_t n = 0;
    for (ModalityTag t : lc.tags) n += t != ModalityTag::text ? 1 : 0;
    sum += static_cast<double>(n) / static_cast<double>(initial_nontext);
  }
  return sum / static_cast<double>(cache.layers.size());
}

/// Closed-form retained fraction (1/n) * sum of the per-block input counts over L0.
inline double predicted_retained_fraction(std::size_t L0, const lmme::ExtractorConfig& ex) {
  const auto sched = lmme::retention_schedule(L0, ex);
  double sum = static_cast<double>(L0);
  for (std::size_t b = 0; b + 1 < sched.size(); ++b) sum += static_cast<double>(sched[b]);
  return sum / (static_cast<double>(ex.n) * static_cast<double>(L0));
}

inline nlohmann::json to_json(const BenchReport& rep) {
  nlohmann::json cells = nlohmann::json::array();
  for (const Cell& c : rep.cells) {
    nlohmann::json j = {{"variant", c.variant}, {"length", c.length}, {"oom", c.oom}};
    if (!c.oom) {
      if (rep.kind == "prefill") j["prefill_seconds"] = c.prefill_seconds;
      if (rep.kind == "decode") j["decode_tokens_per_second"] = c.decode_tokens_per_second;
      if (rep.kind == "train") j["train_step_seconds"] = c.train_step_seconds;
      j["kv_bytes_measured"] = c.kv_bytes_measured;
      j["survivors_per_block"] = c.survivors_per_block;
      j["output_checksum"] = hex(c.output_checksum);
    }
    j["kv_bytes_predicted"] = c.kv_bytes_predicted;
    j["flops_predicted"] = c.flops_predicted;
    j["peak_attention_elements"] = c.peak_attention_elements;
    cells.push_back(std::move(j));
  }
  return {{"schema", kSchema},
          {"kind", rep.kind},
          {"metadata", {{"seed", rep.seed}, {"config_hash", rep.config_hash}, {"timestamp", rep.timestamp}}},
          {"cells", cells},
          {"violations", rep.violations}};
}

/// CSV columns: variant, length, metric, value, predicted, ratio_vs_baseline.
inline std::string to_csv(const BenchReport& rep) {
  std::ostringstream os;
  os << std::setprecision(10);
  os << "variant,length,metric,value,predicted,ratio_vs_baseline\n";
  auto baseline = [&](std::size_t len) -> const Cell* {
    for (const Cell& c : rep.cells)
      if (c.variant == "baseline" && c.length == len && !c.oom) return &c;
    return nullptr;
  };
  auto ratio = [](double v, const Cell* b, double Cell::*field) -> std::string {
    if (b == nullptr || b->*field == 0.0) return "";
    std::ostringstream r;
    r << std::setprecision(6) << v / (b->*field);
    return r.str();
  };
  for (const Cell& c : rep.cells) {
    const Cell* b = baseline(c.length);
    auto line = [&](const std::string& metric, const std::string& value, const std::string& predicted,
                    const std::string& r) {
      os << '"' << c.variant << "\"," << c.length << ',' << metric << ',' << value << ',' << predicted
         << ',' << r << '\n';
    };
    auto num = [](double x) {
      std::ostringstream s;
      s << std::setprecision(10) << x;
      return s.str();
    };
    if (c.oom) {
      line("status", "OOM", "", "");
      continue;
    }
    if (rep.kind == "prefill") {
      line("prefill_seconds", num(c.prefill_seconds), "", ratio(c.prefill_seconds, b, &Cell::prefill_seconds));
    } else if (rep.kind == "decode") {
      line("decode_tokens_per_second", num(c.decode_tokens_per_second), "",
           ratio(c.decode_tokens_per_second, b, &Cell::decode_tokens_per_second));
    } else if (rep.kind == "train") {
      line("train_step_seconds", num(c.train_step_seconds), "",
           ratio(c.train_step_seconds, b, &Cell::train_step_seconds));
    }
    if (rep.kind != "train") {
      const std::string kv_ratio =
          b ? num(static_cast<double>(c.kv_bytes_measured) / static_cast<double>(b->kv_bytes_measured)) : "";
      line("kv_bytes", std::to_string(c.kv_bytes_measured), std::to_string(c.kv_bytes_predicted), kv_ratio);
    }
    line("flops", "", num(c.flops_predicted), b ? num(c.flops_predicted / b->flops_predicted) : "");
  }
  return os.str();
}

inline void write_report(const std::filesystem::path& dir, const BenchReport& rep) {
  std::filesystem::create_directories(dir);
  std::ofstream(dir / (rep.kind + ".json")) << to_json(rep).dump(2) << '\n';
  std::ofstream(dir / (rep.kind + ".csv")) << to_csv(rep);
}

// ---------------------------------------------------------------------------
// Needle in a long speech haystack

struct NeedleConfig {
  ModelConfig model;
  lmme::ExtractorConfig extractor{4, 0.7, 1};
  std::vector<double> durations_s = {60, 120, 180, 240, 300};
  std::vector<double> positions = {0.1, 0.3, 0.5, 0.7, 0.9};  ///< fraction of the free range
  double needle_len_s = 10.0;
  double strength = 3.0;
  double control_strength = 0.0;
  std::size_t query_tokens = 8;
  double query_gain = 4.0;
  longspeech::ChunkConfig chunk;
  std::uint64_t seed = 11;

  void validate() const {
    ModelConfig m = model;
    m.extractor = extractor;
    m.validate();
    chunk.validate();
    for (double d : durations_s) {
      if (needle_len_s > d) throw ConfigError("needle: needle longer than a " + std::to_string(d) + " s haystack");
    }
    for (double p : positions) {
      if (p < 0.0 || p > 1.0) throw ConfigError("needle: positions must lie in [0, 1]");
    }
  }
};

inline NeedleConfig needle_config_from_json(const nlohmann::json& j) {
  NeedleConfig c;
  try {
    if (j.contains("model")) c.model = model_from_json(j.at("model"), c.model);
    if (j.contains("extractor")) {
      const auto& e = j.at("extractor");
      c.extractor = {e.at("n").get<std::size_t>(), e.at("rho").get<double>(), e.value("min_keep", std::size_t{1})};
    }
    c.durations_s = j.value("durations_s", c.durations_s);
    c.positions = j.value("positions", c.positions);
    c.needle_len_s = j.value("needle_len_s", c.needle_len_s);
    c.strength = j.value("strength", c.strength);
    c.control_strength = j.value("control_strength", c.control_strength);
    c.query_tokens = j.value("query_tokens", c.query_tokens);
    c.query_gain = j.value("query_gain", c.query_gain);
    c.seed = j.value("seed", c.seed);
    if (j.contains("chunk")) {
      const auto& ch = j.at("chunk");
      c.chunk.window_frames = ch.value("window_frames", c.chunk.window_frames);
      c.chunk.pool_factor = ch.value("pool_factor", c.chunk.pool_factor);
      c.chunk.frames_per_second = ch.value("frames_per_second", c.chunk.frames_per_second);
    }
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("needle spec: ") + e.what());
  }
  return c;
}

inline NeedleConfig load_needle_config(const std::filesystem::path& path) {
  std::ifstream is(path);
  if (!is) throw FormatError("needle spec: missing file " + path.string());
  try {
    return needle_config_from_json(nlohmann::json::parse(is));
  } catch (const nlohmann::json::parse_error& e) {
    throw FormatError("needle spec: " + std::string(e.what()));
  }
}

struct NeedleCell {
  double duration_s = 0.0;
  double offset_s = 0.0;
  double strength = 0.0;
  std::size_t haystack_tokens = 0;
  Span needle_tokens;
  std::vector<std::size_t> overlap_per_block;
  double survival = 0.0;
  bool retrieved = false;
  std::size_t bin_width = 0;
  std::vector<double> retained_density;  ///< surviving fraction per position bin
  std::size_t peak_bin = 0;
  /// Start of the needle-length window holding the most surviving haystack tokens.
  std::size_t peak_start = 0;
  bool peak_in_needle = false;
  std::size_t final_nontext_kept = 0;
};

struct NeedleReport {
  std::vector<NeedleCell> cells;
  std::vector<NeedleCell> controls;
  double accuracy = 0.0;
  double control_survival = 0.0;
  double control_expected = 0.0;
  double control_sigma = 0.0;
  bool control_within_band = false;
  double peak_tracking = 0.0;
  std::uint64_t seed = 0;
  std::string timestamp;
};

inline NeedleCell run_needle_cell(const Model& model, const NeedleConfig& cfg, double duration,
                                  double frac, double strength, std::uint64_t seed) {
  longspeech::HaystackSpec hs;
  hs.duration_s = duration;
  hs.dim = cfg.model.dim;
  hs.seed = seed;
  hs.needle.offset_s = std::round(frac * (duration - cfg.needle_len_s));
  hs.needle.len_s = cfg.needle_len_s;
  hs.needle.strength = strength;
  hs.needle.query_vec = random_unit_vector(cfg.model.dim, cfg.seed);
  hs.query_tokens = cfg.query_tokens;
  hs.query_gain = cfg.query_gain;
  hs.chunk = cfg.chunk;
  const TokenSequence seq = longspeech::build_haystack_sequence(hs);

  NeedleCell cell;
  cell.duration_s = duration;
  cell.offset_s = hs.needle.offset_s;
  cell.strength = strength;
  cell.haystack_tokens = seq.size() - seq.count(ModalityTag::text);
  cell.needle_tokens = *seq.needle;

  const PrefillResult out = prefill(model, seq);
  for (const auto& b : out.trace.blocks) cell.overlap_per_block.push_back(b.needle_overlap.value_or(0));
  const std::size_t final_overlap = cell.overlap_per_block.empty() ? cell.needle_tokens.len : cell.overlap_per_block.back();
  cell.survival = cell.needle_tokens.len ? static_cast<double>(final_overlap) / static_cast<double>(cell.needle_tokens.len) : 0.0;
  cell.retrieved = cell.survival >= 0.5;

  cell.bin_width = std::max<std::size_t>(1, cell.needle_tokens.len);
  const std::size_t bins = (cell.haystack_tokens + cell.bin_width - 1) / cell.bin_width;
  std::vector<double> counts(bins, 0.0);
  for (std::size_t i = 0; i < out.positions.size(); ++i) {
    if (out.tags[i] == ModalityTag::text) continue;
    counts[out.positions[i] / cell.bin_width] += 1.0;
    ++cell.final_nontext_kept;
  }
  cell.retained_density.resize(bins);
  for (std::size_t b = 0; b < bins; ++b) {
    const std::size_t width = std::min(cell.bin_width, cell.haystack_tokens - b * cell.bin_width);
    cell.retained_density[b] = counts[b] / static_cast<double>(width);
  }
  cell.peak_bin = static_cast<std::size_t>(
      std::max_element(cell.retained_density.begin(), cell.retained_density.end()) - cell.retained_density.begin());

  // Token-resolution peak: bins are aligned to position 0, so a needle straddling a bin
  // edge would otherwise share its peak bin with a neighbouring offset.
  std::vector<std::size_t> prefix(cell.haystack_tokens + 1, 0);
  for (std::size_t i = 0; i < out.positions.size(); ++i) {
    if (out.tags[i] != ModalityTag::text) prefix[out.positions[i] + 1] = 1;
  }
  for (std::size_t i = 1; i < prefix.size(); ++i) prefix[i] += prefix[i - 1];
  const std::size_t w = std::min(cell.bin_width, cell.haystack_tokens);
  std::size_t best = 0;
  for (std::size_t s = 0; s + w <= cell.haystack_tokens; ++s) {
    const std::size_t n = prefix[s + w] - prefix[s];
    if (n > best) {
      best = n;
      cell.peak_start = s;
    }
  }
  const std::size_t a = std::max(cell.peak_start, cell.needle_tokens.start);
  const std::size_t b = std::min(cell.peak_start + w, cell.needle_tokens.end());
  cell.peak_in_needle = b > a && 2 * (b - a) >= cell.needle_tokens.len;
  return cell;
}

inline NeedleReport run_needle(const NeedleConfig& cfg) {
  cfg.validate();
  ModelConfig mc = cfg.model;
  mc.extractor = cfg.extractor;
  const Model model = init_model(mc);
  NeedleReport rep;
  rep.seed = cfg.seed;
  rep.timestamp = utc_timestamp();
  std::uint64_t cell_seed = cfg.seed * 1000;
  double hits = 0.0;
  double peaks = 0.0;
  double ctrl_kept = 0.0;
  double ctrl_total = 0.0;
  double ctrl_var = 0.0;
  const double p = std::pow(cfg.extractor.rho, static_cast<double>(cfg.extractor.n));
  for (double dur : cfg.durations_s) {
    for (double frac : cfg.positions) {
      ++cell_seed;
      NeedleCell c = run_needle_cell(model, cfg, dur, frac, cfg.strength, cell_seed);
      hits += c.retrieved ? 1.0 : 0.0;
      peaks += c.peak_in_needle ? 1.0 : 0.0;
      rep.cells.push_back(std::move(c));
      NeedleCell k = run_needle_cell(model, cfg, dur, frac, cfg.control_strength, cell_seed);
      const double n = static_cast<double>(k.needle_tokens.len);
      ctrl_kept += k.survival * n;
      ctrl_total += n;
      ctrl_var += n * p * (1.0 - p);
      rep.controls.push_back(std::move(k));
    }
  }
  const double cells = static_cast<double>(rep.cells.size());
  rep.accuracy = cells > 0 ? hits / cells : 0.0;
  rep.peak_tracking = cells > 0 ? peaks / cells : 0.0;
  rep.control_survival = ctrl_total > 0 ? ctrl_kept / ctrl_total : 0.0;
  rep.control_expected = p;
  rep.control_sigma = ctrl_total > 0 ? std::sqrt(ctrl_var) / ctrl_total : 0.0;
  rep.control_within_band = std::abs(rep.control_survival - p) <= 3.0 * rep.control_sigma;
  return rep;
}

inline nlohmann::json to_json(const NeedleCell& c) {
  return {{"duration_s", c.duration_s},
          {"offset_s", c.offset_s},
          {"strength", c.strength},
          {"haystack_tokens", c.haystack_tokens},
          {"needle_tokens", {{"start", c.needle_tokens.start}, {"len", c.needle_tokens.len}}},
          {"needle_overlap_per_block", c.overlap_per_block},
          {"survival", c.survival},
          {"retrieved", c.retrieved},
          {"bin_width", c.bin_width},
          {"retained_density", c.retained_density},
          {"peak_bin", c.peak_bin},
          {"peak_start", c.peak_start},
          {"peak_in_needle", c.peak_in_needle}};
}

inline nlohmann::json to_json(const NeedleReport& r) {
  nlohmann::json cells = nlohmann::json::array();
  for (const auto& c : r.cells) cells.push_back(to_json(c));
  nlohmann::json controls = nlohmann::json::array();
  for (const auto& c : r.controls) controls.push_back(to_json(c));
  return {{"schema", kSchema},
          {"kind", "needle"},
          {"metadata", {{"seed", r.seed}, {"timestamp", r.timestamp}}},
          {"accuracy", r.accuracy},
          {"peak_tracking", r.peak_tracking},
          {"control", {{"survival", r.control_survival},
                       {"expected", r.control_expected},
                       {"sigma", r.control_sigma},
                       {"within_3_sigma", r.control_within_band}}},
          {"cells", cells},
          {"controls", controls}};
}

inline std::string to_csv(const NeedleReport& r) {
  std::ostringstream os;
  os << std::setprecision(10);
  os << "variant,length,metric,value,predicted,ratio_vs_baseline\n";
  auto emit = [&](const char* variant, const NeedleCell& c, double predicted) {
    std::ostringstream name;
    name << variant << " @" << c.offset_s << "s";
    os << '"' << name.str() << "\"," << c.haystack_tokens << ",needle_survival," << c.survival << ','
       << predicted << ",\n";
  };
  for (const auto& c : r.cells) emit("needle", c, 1.0);
  for (const auto& c : r.controls) emit("control", c, r.control_expected);
  return os.str();
}

inline void write_report(const std::filesystem::path& dir, const NeedleReport& rep) {
  std::filesystem::create_directories(dir);
  std::ofstream(dir / "needle.json") << to_json(rep).dump(2) << '\n';
  std::ofstream(dir / "needle.csv") << to_csv(rep);
}

}  // namespace omnilite::bench
