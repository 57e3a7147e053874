#pragma once

// Release checks shared by the acceptance binary and `omnilite selftest`. Each check
// returns a verdict plus a one-line detail string; none of them throw on failure.

#include <chrono>
#include <cmath>
#include <cstdio>
#include <map>
#include <random>
#include <string>
#include <vector>

#include "../bench.hpp"
#include "../lcmr.hpp"
#include "../lmme.hpp"
#include "../longspeech.hpp"
#include "../mmlora.hpp"
#include "../model.hpp"
#include "../streamctc.hpp"
#include "oracles.hpp"

namespace omnilite::acceptance {

struct Verdict {
  int id = 0;
  std::string name;
  bool pass = false;
  std::string detail;
  double seconds = 0.0;
};

inline std::string format(const char* fmt, auto... args) {
  char buf[512];
  std::snprintf(buf, sizeof buf, fmt, args...);
  return buf;
}

inline std::string line(const Verdict& v) {
  return format("[%s] %2d %-28s %s (%.2f s)", v.pass ? "PASS" : "FAIL", v.id, v.name.c_str(),
                v.detail.c_str(), v.seconds);
}

template <class F>
Verdict timed(int id, std::string name, F&& body) {
  Verdict v;
  v.id = id;
  v.name = std::move(name);
  const auto t0 = std::chrono::steady_clock::now();
  try {
    body(v);
  } catch (const std::exception& e) {
    v.pass = false;
    v.detail = std::string("exception: ") + e.what();
  }
  v.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  return v;
}

inline Matrix gaussian(std::size_t r, std::size_t c, std::mt19937_64& rng, double sd = 1.0) {
  std::normal_distribution<double> n01(0.0, sd);
  Matrix m(r, c);
  for (double& x : m.data()) x = n01(rng);
  return m;
}

inline std::size_t uniform(std::mt19937_64& rng, std::size_t lo, std::size_t hi) {
  return std::uniform_int_distribution<std::size_t>(lo, hi)(rng);
}

inline double rel_diff(double a, double b) {
  if (a == b) return 0.0;
  return std::abs(a - b) / std::max(std::abs(a), std::abs(b));
}

// ---------------------------------------------------------------------------

inline Verdict dtw_oracle(std::uint64_t seed = 1) {
  return timed(1, "dtw-oracle", [&](Verdict& v) {
    std::mt19937_64 rng(seed);
    std::uniform_real_distribution<double> u01(0.0, 1.0);
    double worst = 0.0;
    std::size_t bad_paths = 0;
    for (int i = 0; i < 100; ++i) {
      const std::size_t L = uniform(rng, 1, 6);
      const std::size_t S = uniform(rng, 1, 6);
      Matrix dist(L, S);
      if (i % 2 == 0) {
        for (double& x : dist.data()) x = u01(rng);
      } else {
        const std::size_t d = uniform(rng, 1, 8);
        dist = lcmr::dist_matrix(gaussian(L, d, rng), gaussian(S, d, rng), 1.0);
      }
      const auto ac = lcmr::dtw_accumulate(dist);
      worst = std::max(worst, rel_diff(ac.total(), oracle::min_path_cost(dist)));
      double along = 0.0;
      for (const auto& st : ac.path) along += dist(st.l, st.s);
      if (rel_diff(along, ac.total()) > 1e-9) ++bad_paths;
    }
    v.pass = worst <= 1e-9 && bad_paths == 0;
    v.detail = format("100 instances, max rel err %.2e, path/cost mismatches %zu", worst, bad_paths);
  });
}

inline Verdict lcmr_gradient(std::uint64_t seed = 2) {
  return timed(2, "lcmr-gradient", [&](Verdict& v) {
    std::mt19937_64 rng(seed);
    double worst = 0.0;
    int checked = 0;
    int skipped = 0;
    const lcmr::LcmrConfig cfg{1.0, 0.1};
    while (checked < 50) {
      const std::size_t L = uniform(rng, 1, 5);
      const std::size_t S = uniform(rng, 1, 5);
      const std::size_t d = uniform(rng, 1, 8);
      const Matrix xs = gaussian(L, d, rng);
      const Matrix xt = gaussian(S, d, rng);
      if (oracle::path_tie_gap(lcmr::dist_matrix(xs, xt, cfg.tau)) < 1e-6) {
        ++skipped;
        continue;
      }
      Vector flat = xs.data();
      flat.insert(flat.end(), xt.data().begin(), xt.data().end());
      auto f = [&](const Vector& p) {
        Matrix a(L, d, Vector(p.begin(), p.begin() + static_cast<std::ptrdiff_t>(L * d)));
        Matrix b(S, d, Vector(p.begin() + static_cast<std::ptrdiff_t>(L * d), p.end()));
        return lcmr::lcmr_loss(a, b, cfg);
      };
      const Vector fd = finite_diff_grad(f, flat, 1e-6);
      const auto g = lcmr::lcmr_grad(xs, xt, cfg);
      Vector an = g.speech.data();
      an.insert(an.end(), g.stt.data().begin(), g.stt.data().end());
      worst = std::max(worst, max_rel_error(an, fd));
      ++checked;
    }
    v.pass = worst <= 1e-4;
    v.detail = format("50 instances (%d tie-skipped), max rel err %.2e", skipped, worst);
  });
}

/// Random mixed-modality prompt with at least one text and one non-text run.
inline TokenSequence random_prompt(std::mt19937_64& rng, std::size_t dim) {
  static constexpr ModalityTag kOther[] = {ModalityTag::image, ModalityTag::video, ModalityTag::speech,
                                           ModalityTag::sound};
  SynthSpec spec;
  spec.dim = dim;
  spec.seed = rng();
  const std::size_t runs = uniform(rng, 2, 5);
  for (std::size_t r = 0; r < runs; ++r) {
    const ModalityTag t = r == runs - 1 ? ModalityTag::text
                          : r == 0      ? kOther[uniform(rng, 0, 3)]
                                        : (uniform(rng, 0, 2) == 0 ? ModalityTag::text : kOther[uniform(rng, 0, 3)]);
    spec.runs.push_back({t, uniform(rng, 4, 60)});
  }
  return synth_sequence(spec);
}

inline Verdict keep_all_neutrality(std::uint64_t seed = 3) {
  return timed(3, "keep-all-neutrality", [&](Verdict& v) {
    std::mt19937_64 rng(seed);
    static constexpr std::size_t kBlocks[] = {1, 2, 4, 8};
    int identical = 0;
    for (int i = 0; i < 20; ++i) {
      ModelConfig mc;
      mc.seed = rng();
      const TokenSequence seq = random_prompt(rng, mc.dim);
      const PrefillResult off = prefill(init_model(mc), seq);
      mc.extractor = lmme::ExtractorConfig{kBlocks[i % 4], 1.0, 1};
      const PrefillResult on = prefill(init_model(mc), seq);
      const bool same = on.logits == off.logits && on.hidden == off.hidden &&
                        on.positions == off.positions && on.cache == off.cache;
      identical += same ? 1 : 0;
    }
    v.pass = identical == 20;
    v.detail = format("%d/20 seeds bitwise identical (logits, hidden state, KV cache)", identical);
  });
}

inline Verdict retention_schedule() {
  return timed(4, "retention-schedule", [&](Verdict& v) {
    const lmme::ExtractorConfig ex{4, 0.8, 1};
    const std::vector<std::size_t> want = {820, 656, 525, 420};
    const bool closed_form = lmme::retention_schedule(1024, ex) == want;

    ModelConfig mc;
    mc.extractor = ex;
    SynthSpec spec;
    spec.runs = {{ModalityTag::image, 1024}, {ModalityTag::text, 16}};
    spec.seed = 5;
    const PrefillResult out = prefill(init_model(mc), synth_sequence(spec));
    std::vector<std::size_t> got;
    bool text_kept = true;
    for (const auto& b : out.trace.blocks) {
      std::size_t nontext = 0;
      std::size_t text = 0;
      for (std::size_t p : b.retained) (p >= 1024 ? text : nontext) += 1;
      got.push_back(nontext);
      text_kept = text_kept && text == 16;
    }
    for (const auto& lc : out.cache.layers) {
      text_kept = text_kept && std::count(lc.tags.begin(), lc.tags.end(), ModalityTag::text) == 16;
    }
    v.pass = closed_form && got == want && text_kept;
    std::string g;
    for (std::size_t x : got) g += (g.empty() ? "" : ",") + std::to_string(x);
    v.detail = format("survivors [%s], text kept in every block: %s", g.c_str(), text_kept ? "yes" : "no");
  });
}

struct EfficiencyRun {
  bench::BenchReport prefill;
  bench::BenchReport decode;
  bench::BenchReport train;
};

inline Verdict efficiency(const bench::BenchConfig& cfg, EfficiencyRun& out) {
  return timed(5, "efficiency-ratios", [&](Verdict& v) {
    const auto t0 = std::chrono::steady_clock::now();
    out.prefill = bench::run_prefill_bench(cfg);
    out.decode = bench::run_decode_bench(cfg);
    out.train = bench::run_train_step_bench(cfg);
    const double elapsed = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();

    const std::size_t top = cfg.context_lengths.back();
    const auto* pb = out.prefill.find("baseline", top);
    const auto* p7 = out.prefill.find("LMME(4, 0.7)", top);
    const auto* db = out.decode.find("baseline", top);
    const auto* d7 = out.decode.find("LMME(4, 0.7)", top);
    if (!pb || !p7 || !db || !d7 || pb->oom || p7->oom || db->oom || d7->oom) {
      v.detail = "baseline or LMME(4, 0.7) cell missing at the largest length";
      return;
    }
    const double ratio = p7->prefill_seconds / pb->prefill_seconds;
    const double tps_ratio = d7->decode_tokens_per_second / db->decode_tokens_per_second;
    auto red = bench::train_reductions(out.train);
    const double r9 = red["LMME(4, 0.9)"];
    const double r8 = red["LMME(4, 0.8)"];
    const double r7 = red["LMME(4, 0.7)"];
    const bool ordered = r7 >= r8 && r8 >= r9 && r9 >= 0.0;
    v.pass = ratio <= 0.70 && tps_ratio >= 1.0 && ordered && elapsed < 600.0;
    v.detail = format("@%zu prefill ratio %.3f, TPS ratio %.3f; train reductions 0.9/0.8/0.7 = %.3f/%.3f/%.3f; %.0f s",
                      top, ratio, tps_ratio, r9, r8, r7, elapsed);
  });
}

/// Exact KV accounting across the given reports plus the retained-fraction law.
inline Verdict memory_model(std::span<const bench::BenchReport* const> reports) {
  return timed(6, "memory-model", [&](Verdict& v) {
    std::size_t cells = 0;
    std::size_t mismatched = 0;
    for (const auto* rep : reports) {
      for (const auto& c : rep->cells) {
        if (c.oom || rep->kind == "train") continue;
        ++cells;
        mismatched += c.kv_bytes_measured != c.kv_bytes_predicted ? 1 : 0;
      }
    }
    const lmme::ExtractorConfig ex{4, 0.8, 1};
    ModelConfig mc;
    mc.extractor = ex;
    const std::size_t L0 = 4096;
    SynthSpec spec;
    spec.runs = {{ModalityTag::image, L0}, {ModalityTag::text, 1}};
    spec.seed = 17;
    const PrefillResult out = prefill(init_model(mc), synth_sequence(spec));
    const double measured = bench::retained_kv_fraction(out.cache, L0);
    const double analytic = bench::predicted_retained_fraction(1u << 20, ex);
    v.pass = cells > 0 && mismatched == 0 && std::abs(measured - 0.738) <= 0.01 &&
             std::abs(analytic - 0.738) <= 0.01;
    v.detail = format("%zu/%zu cells exact; retained fraction %.4f measured (L0=%zu), %.4f closed form",
                      cells - mismatched, cells, measured, L0, analytic);
  });
}

inline Verdict needle_harness(const bench::NeedleConfig& cfg, bench::NeedleReport* keep = nullptr) {
  return timed(7, "needle-harness", [&](Verdict& v) {
    const bench::NeedleReport rep = bench::run_needle(cfg);
    // Peaks must move right as the needle moves right, within every duration.
    std::size_t shifted = 0;
    std::size_t pairs = 0;
    std::map<double, std::vector<const bench::NeedleCell*>> by_duration;
    for (const auto& c : rep.cells) by_duration[c.duration_s].push_back(&c);
    for (const auto& [dur, cells] : by_duration) {
      for (std::size_t i = 1; i < cells.size(); ++i) {
        ++pairs;
        const bool later = cells[i]->offset_s > cells[i - 1]->offset_s;
        const bool moved = cells[i]->peak_start > cells[i - 1]->peak_start;
        shifted += later == moved ? 1 : 0;
      }
    }
    const double z = rep.control_sigma > 0 ? (rep.control_survival - rep.control_expected) / rep.control_sigma : 0.0;
    v.pass = cfg.strength >= 3.0 && rep.accuracy >= 0.95 && rep.control_within_band &&
             rep.peak_tracking >= 0.95 && shifted == pairs;
    v.detail = format("retrieved %.0f%% of %zu cells; control %.4f vs %.4f (z=%+.2f); peak in needle %.0f%%, shifts %zu/%zu",
                      100.0 * rep.accuracy, rep.cells.size(), rep.control_survival, rep.control_expected, z,
                      100.0 * rep.peak_tracking, shifted, pairs);
    if (keep) *keep = rep;
  });
}

inline Verdict ctc_oracle(std::uint64_t seed = 8) {
  return timed(8, "ctc-oracle", [&](Verdict& v) {
    std::mt19937_64 rng(seed);
    std::size_t instances = 0;
    std::size_t infeasible = 0;
    std::size_t disagreements = 0;
    double worst = 0.0;
    for (std::size_t T = 1; T <= 4; ++T) {
      for (std::size_t K = 1; K <= 3; ++K) {
        const auto post = streamctc::log_softmax_rows(gaussian(T, K + 1, rng, 1.5));
        std::vector<std::vector<std::size_t>> targets = {{}};
        for (std::size_t a = 1; a <= K; ++a) {
          targets.push_back({a});
          for (std::size_t b = 1; b <= K; ++b) targets.push_back({a, b});
        }
        for (const auto& t : targets) {
          ++instances;
          const auto r = streamctc::ctc_loss(post, {t, K});
          const double ref = oracle::ctc_brute_force(post.logprobs, t);
          if (std::isinf(ref)) {
            ++infeasible;
            disagreements += r.feasible ? 1 : 0;
            continue;
          }
          if (!r.feasible) {
            ++disagreements;
            continue;
          }
          worst = std::max(worst, rel_diff(r.loss, ref));
        }
      }
    }
    const double h = std::log(0.5);
    const auto uni = streamctc::ctc_loss({Matrix{{h, h}, {h, h}}}, {{1}, 1});
    const bool exact = uni.feasible && uni.loss == -std::log(0.75);
    v.pass = worst <= 1e-9 && disagreements == 0 && exact;
    v.detail = format("%zu instances (%zu infeasible), max rel err %.2e, feasibility disagreements %zu; "
                      "uniform T=2 %s",
                      instances, infeasible, worst, disagreements, exact ? "== -ln 0.75" : "!= -ln 0.75");
  });
}

inline Verdict mlora_algebra(std::uint64_t seed = 9) {
  return timed(9, "mlora-algebra", [&](Verdict& v) {
    std::mt19937_64 rng(seed);
    std::uniform_real_distribution<double> sdist(0.25, 4.0);
    double apply_err = 0.0;
    double merge_err = 0.0;
    for (int i = 0; i < 50; ++i) {
      const std::size_t d_in = uniform(rng, 2, 8);
      const std::size_t d_out = uniform(rng, 2, 8);
      mmlora::Adapter ad;
      ad.rank = uniform(rng, 1, std::min(d_in, d_out));
      ad.scale = sdist(rng);
      ad.A = gaussian(ad.rank, d_in, rng);
      ad.B = gaussian(d_out, ad.rank, rng);
      const Matrix W = gaussian(d_out, d_in, rng);
      const Matrix X = gaussian(d_in, uniform(rng, 1, 6), rng);
      const Matrix dense = oracle::naive_matmul(add(scale(oracle::naive_matmul(ad.B, ad.A), ad.scale), W), X);
      const Matrix h = mmlora::apply(ad, W, X);
      apply_err = std::max(apply_err, max_rel_error(h.data(), dense.data()));
      const Matrix merged = mmlora::merge(ad, W);
      merge_err = std::max(merge_err, max_rel_error(mmlora::apply(mmlora::zeroed(ad), merged, X).data(), h.data()));
      merge_err = std::max(merge_err, max_rel_error(mmlora::unmerge(ad, merged).data(), W.data()));
    }

    // Fresh adapters (B = 0) on every attention site must not move the logits by one bit.
    ModelConfig mc;
    mc.seed = 21;
    mc.extractor = lmme::ExtractorConfig{4, 0.8, 1};
    const TokenSequence seq = random_prompt(rng, mc.dim);
    const std::string key = modality_key(seq);
    auto set = std::make_shared<mmlora::AdapterSet>();
    for (std::size_t l = 0; l < mc.layers; ++l) {
      for (char p : {'q', 'k', 'v', 'o'}) {
        set->insert(adapter_site(l, p), key, mmlora::make_adapter(mc.dim, mc.dim, 4, rng()));
      }
    }
    const PrefillResult plain = prefill(init_model(mc), seq);
    mc.adapters = set;
    const PrefillResult adapted = prefill(init_model(mc), seq);
    const bool unchanged = plain.logits == adapted.logits && plain.cache.layers == adapted.cache.layers;

    v.pass = apply_err <= 1e-10 && merge_err <= 1e-10 && unchanged;
    v.detail = format("apply vs dense %.2e, merge/unmerge %.2e over 50 cases; B=0 logits %s",
                      apply_err, merge_err, unchanged ? "bitwise unchanged" : "CHANGED");
  });
}

inline Verdict long_speech(std::uint64_t seed = 10) {
  return timed(10, "long-speech-arithmetic", [&](Verdict& v) {
    const longspeech::ChunkConfig cfg;
    auto compress = [&](std::size_t frames) {
      longspeech::SpeechStream st;
      st.frames = Matrix(frames, 1, Vector(frames, 1.0));
      return longspeech::chunk_and_compress(st, cfg).size();
    };
    const std::size_t f30 = longspeech::frames_for(30.0, cfg);
    const bool clip = compress(f30) == 300;
    const std::size_t f7200 = longspeech::frames_for(7200.0, cfg);
    const bool two_hours = f7200 == 360000 && compress(f7200) == 72000;

    std::mt19937_64 rng(seed);
    std::uniform_real_distribution<double> dur(0.02, 3600.0);
    std::size_t lawful = 0;
    for (int i = 0; i < 200; ++i) {
      const std::size_t T = longspeech::frames_for(dur(rng), cfg);
      const std::size_t want = (T + 1499) / 1500 * 300;
      lawful += compress(T) == want ? 1 : 0;
    }
    v.pass = clip && two_hours && lawful == 200;
    v.detail = format("30 s -> %zu tokens; 7200 s -> %zu frames, %zu tokens; length law %zu/200",
                      compress(f30), f7200, compress(f7200), lawful);
  });
}

}  // namespace omnilite::acceptance
