// omnilite command-line driver: benchmarks, needle grid, haystack generation and the
// small-instance checkers.

#include <cstdio>
#include <filesystem>
#include <iostream>
#include <optional>
#include <random>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include <omnilite/bench.hpp>
#include <omnilite/lcmr.hpp>
#include <omnilite/longspeech.hpp>
#include <omnilite/streamctc.hpp>
#include <omnilite/testing/acceptance.hpp>
#include <omnilite/testing/oracles.hpp>

namespace fs = std::filesystem;
using namespace omnilite;

namespace {

struct BenchArgs {
  std::string config;
  std::string out = "out";
  std::optional<std::uint64_t> seed;
};

bench::BenchConfig load_config(const BenchArgs& a) {
  bench::BenchConfig cfg = a.config.empty() ? bench::BenchConfig{} : bench::load_bench_config(a.config);
  if (a.seed) cfg.seed = *a.seed;
  return cfg;
}

void print_cells(const bench::BenchReport& rep) {
  std::printf("%-14s %7s %14s %14s %14s\n", "variant", "length", "metric", "kv_measured", "kv_predicted");
  for (const auto& c : rep.cells) {
    if (c.oom) {
      std::printf("%-14s %7zu %14s\n", c.variant.c_str(), c.length, "OOM");
      continue;
    }
    double metric = c.prefill_seconds;
    if (rep.kind == "decode") metric = c.decode_tokens_per_second;
    if (rep.kind == "train") metric = c.train_step_seconds;
    std::printf("%-14s %7zu %14.6g %14zu %14zu\n", c.variant.c_str(), c.length, metric, c.kv_bytes_measured,
                c.kv_bytes_predicted);
  }
}

int finish(const bench::BenchReport& rep, const std::string& out) {
  bench::write_report(out, rep);
  print_cells(rep);
  if (rep.kind == "train") {
    for (const auto& [name, r] : bench::train_reductions(rep)) std::printf("reduction %-14s %+.3f\n", name.c_str(), r);
  }
  std::printf("wrote %s/%s.{json,csv}\n", out.c_str(), rep.kind.c_str());
  for (const auto& v : rep.violations) std::fprintf(stderr, "violation: %s\n", v.c_str());
  return rep.violations.empty() ? 0 : 3;
}

Matrix random_matrix(std::size_t r, std::size_t c, std::mt19937_64& rng) {
  std::normal_distribution<double> n01(0.0, 1.0);
  Matrix m(r, c);
  for (double& x : m.data()) x = n01(rng);
  return m;
}

int dtw_check(const std::string& speech_path, const std::string& stt_path, std::size_t dim, double tau,
              double h, std::uint64_t seed) {
  Matrix xs;
  Matrix xt;
  if (speech_path.empty() != stt_path.empty()) throw InputError("dtw-check: give both --speech and --stt");
  if (!speech_path.empty()) {
    if (dim == 0) throw InputError("dtw-check: --dim is required with blob inputs");
    xs = blob::load_matrix(speech_path, dim);
    xt = blob::load_matrix(stt_path, dim);
  } else {
    std::mt19937_64 rng(seed);
    const std::size_t d = dim ? dim : 4;
    xs = random_matrix(5, d, rng);
    xt = random_matrix(3, d, rng);
  }
  const lcmr::LcmrConfig cfg{tau, 0.1};
  const auto ac = lcmr::dtw_accumulate(lcmr::dist_matrix(xs, xt, tau));
  const double loss = lcmr::lcmr_loss_from_cost(ac);
  std::printf("L=%zu S=%zu d=%zu tau=%g\n", xs.rows(), xt.rows(), xs.cols(), tau);
  std::printf("loss %.12g (accumulated cost %.12g)\npath", loss, ac.total());
  for (const auto& st : ac.path) std::printf(" (%zu,%zu)", st.l, st.s);
  std::printf("\n");

  bool tie = false;
  if (xs.rows() <= 8 && xt.rows() <= 8) {
    const double best = oracle::min_path_cost(ac.dist);
    const double gap = oracle::path_tie_gap(ac.dist);
    tie = gap < 1e-6;
    std::printf("exhaustive min cost %.12g, gap to second path %.3g%s\n", best, gap, tie ? " (tie)" : "");
  }

  const std::size_t n = xs.rows() * xs.cols();
  Vector flat = xs.data();
  flat.insert(flat.end(), xt.data().begin(), xt.data().end());
  auto f = [&](const Vector& p) {
    Matrix a(xs.rows(), xs.cols(), Vector(p.begin(), p.begin() + static_cast<std::ptrdiff_t>(n)));
    Matrix b(xt.rows(), xt.cols(), Vector(p.begin() + static_cast<std::ptrdiff_t>(n), p.end()));
    return lcmr::lcmr_loss(a, b, cfg);
  };
  const Vector fd = finite_diff_grad(f, flat, h);
  const auto g = lcmr::lcmr_grad(xs, xt, cfg);
  Vector an = g.speech.data();
  an.insert(an.end(), g.stt.data().begin(), g.stt.data().end());
  const double err = max_rel_error(an, fd);
  const bool ok = tie || err <= 1e-4;
  std::printf("gradient check: max rel err %.3e vs central differences (h=%g) %s\n", err, h,
              tie ? "SKIPPED (path tie)" : ok ? "ok" : "FAILED");
  return ok ? 0 : 3;
}

std::vector<std::size_t> parse_units(const std::string& s) {
  std::vector<std::size_t> out;
  std::stringstream ss(s);
  std::string tok;
  while (std::getline(ss, tok, ',')) {
    if (tok.empty()) continue;
    try {
      out.push_back(std::stoul(tok));
    } catch (const std::exception&) {
      throw InputError("ctc-check: bad target entry '" + tok + "'");
    }
  }
  return out;
}

int ctc_check(const std::string& post_path, std::size_t K, const std::string& target, bool logits,
              std::uint64_t seed) {
  Matrix scores;
  if (!post_path.empty()) {
    if (K == 0) throw InputError("ctc-check: --units is required with a posteriors blob");
    scores = blob::load_matrix(post_path, K + 1);
  } else {
    std::mt19937_64 rng(seed);
    K = K ? K : 3;
    scores = random_matrix(4, K + 1, rng);
    logits = true;
  }
  const streamctc::FramePosteriors post =
      logits ? streamctc::log_softmax_rows(scores) : streamctc::FramePosteriors{scores};
  const streamctc::UnitSequence tgt{parse_units(target), K};
  const auto r = streamctc::ctc_loss(post, tgt);
  std::printf("T=%zu K=%zu |target|=%zu min frames %zu\n", post.frames(), K, tgt.units.size(),
              streamctc::min_frames(tgt.units));
  if (r.feasible) {
    std::printf("ctc loss %.15g\n", r.loss);
  } else {
    std::printf("ctc loss inf (infeasible)\n");
  }
  std::printf("greedy decode:");
  for (std::size_t u : streamctc::greedy_decode(post).units) std::printf(" %zu", u);
  std::printf("\n");

  const double labellings = std::pow(static_cast<double>(K + 1), static_cast<double>(post.frames()));
  if (labellings > 2e6) {
    std::printf("brute force skipped (%.3g labellings)\n", labellings);
    return 0;
  }
  const double ref = oracle::ctc_brute_force(post.logprobs, tgt.units);
  bool ok = false;
  if (std::isinf(ref)) {
    ok = !r.feasible;
    std::printf("brute force: inf %s\n", ok ? "ok" : "MISMATCH");
  } else {
    const double rel = r.feasible ? std::abs(r.loss - ref) / std::max(std::abs(r.loss), std::abs(ref)) : INFINITY;
    ok = rel <= 1e-9;
    std::printf("brute force %.15g, rel err %.3e %s\n", ref, rel, ok ? "ok" : "MISMATCH");
  }
  return ok ? 0 : 3;
}

int selftest(bool full, std::uint64_t seed) {
  std::vector<acceptance::Verdict> out;
  auto run = [&](acceptance::Verdict v) {
    std::printf("%s\n", acceptance::line(v).c_str());
    std::fflush(stdout);
    out.push_back(std::move(v));
  };
  run(acceptance::dtw_oracle(seed + 1));
  run(acceptance::lcmr_gradient(seed + 2));
  run(acceptance::keep_all_neutrality(seed + 3));
  run(acceptance::retention_schedule());

  bench::BenchConfig cfg;
  if (!full) cfg.context_lengths = {256, 512, 1024};
  acceptance::EfficiencyRun eff;
  if (full) {
    run(acceptance::efficiency(cfg, eff));
  } else {
    eff.prefill = bench::run_prefill_bench(cfg);
    eff.decode = bench::run_decode_bench(cfg);
  }
  const bench::BenchReport* reports[] = {&eff.prefill, &eff.decode};
  run(acceptance::memory_model(reports));
  if (full) run(acceptance::needle_harness(bench::NeedleConfig{}));

  run(acceptance::ctc_oracle(seed + 8));
  run(acceptance::mlora_algebra(seed + 9));
  run(acceptance::long_speech(seed + 10));
  std::size_t failed = 0;
  for (const auto& v : out) failed += v.pass ? 0 : 1;
  std::printf("selftest: %zu/%zu suites passed\n", out.size() - failed, out.size());
  return failed ? 3 : 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"omnilite: token extraction, alignment and efficiency harness"};
  app.require_subcommand(1);

  BenchArgs pre_args;
  BenchArgs dec_args;
  BenchArgs train_args;
  auto add_bench = [&](const char* name, const char* help, BenchArgs& a) {
    auto* sub = app.add_subcommand(name, help);
    sub->add_option("--config", a.config, "bench config (JSON); defaults when omitted")->check(CLI::ExistingFile);
    sub->add_option("--out", a.out, "output directory")->capture_default_str();
    sub->add_option("--seed", a.seed, "override the config seed");
    return sub;
  };
  auto* prefill_cmd = add_bench("bench-prefill", "prefill latency and KV accounting per variant/length", pre_args);
  auto* decode_cmd = add_bench("bench-decode", "greedy decode throughput per variant/length", dec_args);
  auto* train_cmd = add_bench("bench-train", "training-step proxy time per variant", train_args);

  std::string needle_spec;
  std::string needle_out = "out";
  std::optional<std::uint64_t> needle_seed;
  auto* needle_cmd = app.add_subcommand("needle", "needle-in-a-haystack grid over durations and offsets");
  needle_cmd->add_option("--spec", needle_spec, "needle grid spec (JSON); defaults when omitted")->check(CLI::ExistingFile);
  needle_cmd->add_option("--out", needle_out, "output directory")->capture_default_str();
  needle_cmd->add_option("--seed", needle_seed, "override the spec seed");

  std::string hay_spec;
  std::string hay_out = "out";
  std::optional<std::uint64_t> hay_seed;
  auto* hay_cmd = app.add_subcommand("haystack", "write a haystack prompt as manifest + embedding blob");
  hay_cmd->add_option("--spec", hay_spec, "haystack spec (JSON)")->required()->check(CLI::ExistingFile);
  hay_cmd->add_option("--out", hay_out, "output directory")->capture_default_str();
  hay_cmd->add_option("--seed", hay_seed, "override the spec seed");

  std::string speech_blob;
  std::string stt_blob;
  std::size_t dtw_dim = 0;
  double tau = 1.0;
  double fd_step = 1e-6;
  std::uint64_t dtw_seed = 0;
  auto* dtw_cmd = app.add_subcommand("dtw-check", "alignment loss, path and gradient check for two embedding blobs");
  dtw_cmd->add_option("--speech", speech_blob, "speech embeddings (binary32, L x dim)")->check(CLI::ExistingFile);
  dtw_cmd->add_option("--stt", stt_blob, "transcript embeddings (binary32, S x dim)")->check(CLI::ExistingFile);
  dtw_cmd->add_option("--dim", dtw_dim, "embedding width");
  dtw_cmd->add_option("--tau", tau, "softmax temperature")->capture_default_str();
  dtw_cmd->add_option("--fd-step", fd_step, "finite-difference step")->capture_default_str();
  dtw_cmd->add_option("--seed", dtw_seed, "seed for a random instance when no blobs are given");

  std::string post_blob;
  std::size_t units = 0;
  std::string target;
  bool logits = false;
  std::uint64_t ctc_seed = 0;
  auto* ctc_cmd = app.add_subcommand("ctc-check", "CTC loss against brute-force alignment enumeration");
  ctc_cmd->add_option("--posteriors", post_blob, "T x (K+1) binary32 blob of log-probabilities")->check(CLI::ExistingFile);
  ctc_cmd->add_option("--units", units, "unit vocabulary size K (blank excluded)");
  ctc_cmd->add_option("--target", target, "comma-separated unit ids, e.g. 1,2");
  ctc_cmd->add_flag("--logits", logits, "blob holds unnormalised scores; apply log-softmax first");
  ctc_cmd->add_option("--seed", ctc_seed, "seed for a random instance when no blob is given");

  bool full = false;
  std::uint64_t self_seed = 0;
  auto* self_cmd = app.add_subcommand("selftest", "run the oracle suites");
  self_cmd->add_flag("--full", full, "also run the timing and needle-grid checks");
  self_cmd->add_option("--seed", self_seed, "offset for the suite seeds");

  CLI11_PARSE(app, argc, argv);

  try {
    if (*prefill_cmd) return finish(bench::run_prefill_bench(load_config(pre_args)), pre_args.out);
    if (*decode_cmd) return finish(bench::run_decode_bench(load_config(dec_args)), dec_args.out);
    if (*train_cmd) return finish(bench::run_train_step_bench(load_config(train_args)), train_args.out);
    if (*needle_cmd) {
      bench::NeedleConfig cfg = needle_spec.empty() ? bench::NeedleConfig{} : bench::load_needle_config(needle_spec);
      if (needle_seed) cfg.seed = *needle_seed;
      const auto rep = bench::run_needle(cfg);
      bench::write_report(needle_out, rep);
      std::printf("%8s %8s %8s %9s %5s\n", "dur_s", "offset_s", "survival", "retrieved", "peak");
      for (const auto& c : rep.cells) {
        std::printf("%8.0f %8.0f %8.3f %9s %5s\n", c.duration_s, c.offset_s, c.survival, c.retrieved ? "yes" : "no",
                    c.peak_in_needle ? "in" : "out");
      }
      std::printf("accuracy %.3f, peak tracking %.3f, control %.4f (chance %.4f +- %.4f)\n", rep.accuracy,
                  rep.peak_tracking, rep.control_survival, rep.control_expected, 3.0 * rep.control_sigma);
      std::printf("wrote %s/needle.{json,csv}\n", needle_out.c_str());
      return 0;
    }
    if (*hay_cmd) {
      auto spec = longspeech::load_haystack_spec(hay_spec);
      if (hay_seed) spec.seed = *hay_seed;
      const TokenSequence seq = longspeech::build_haystack_sequence(spec);
      fs::create_directories(hay_out);
      save_manifest(seq, fs::path(hay_out) / "manifest.json", "embeddings.f32");
      std::printf("%zu tokens (%zu speech, %zu text), needle tokens [%zu, %zu)\n", seq.size(),
                  seq.count(ModalityTag::speech), seq.count(ModalityTag::text), seq.needle->start, seq.needle->end());
      std::printf("wrote %s/manifest.json\n", hay_out.c_str());
      return 0;
    }
    if (*dtw_cmd) return dtw_check(speech_blob, stt_blob, dtw_dim, tau, fd_step, dtw_seed);
    if (*ctc_cmd) return ctc_check(post_blob, units, target, logits, ctc_seed);
    if (*self_cmd) return selftest(full, self_seed);
  } catch (const Error& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 2;
  }
  return 0;
}
