#pragma once

#include <array>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <limits>
#include <ostream>
#include <string>
#include <vector>

#include "json.hpp"

#include "mcaforge/attention.hpp"
#include "mcaforge/backends.hpp"
#include "mcaforge/bench.hpp"
#include "mcaforge/clip.hpp"
#include "mcaforge/denoiser.hpp"
#include "mcaforge/error.hpp"
#include "mcaforge/manifest.hpp"
#include "mcaforge/mixture.hpp"
#include "mcaforge/pipeline.hpp"
#include "mcaforge/rng.hpp"
#include "mcaforge/schedule.hpp"
#include "mcaforge/synth.hpp"
#include "mcaforge/tape.hpp"
#include "mcaforge/tensor.hpp"
#include "mcaforge/tensor_io.hpp"

namespace mcaforge::selftest {

namespace detail {

inline void ensure(bool ok, const std::string& what) {
  if (!ok) throw Error("selftest: " + what);
}

inline Tensor random_matrix(std::size_t rows, std::size_t cols, std::uint64_t seed) {
  SplitMix64 rng(seed);
  Tensor t = Tensor::zeros({rows, cols});
  for (std::size_t i = 0; i < t.numel(); ++i) t.data()[i] = static_cast<float>(rng.normal());
  return t;
}

inline BranchState random_branch(BranchRole role, std::size_t tokens, std::size_t d,
                                 std::uint64_t seed) {
  BranchState b;
  b.role = role;
  b.q = random_matrix(tokens, d, derive_seed(seed, 0));
  b.k = random_matrix(tokens, d, derive_seed(seed, 1));
  b.v = random_matrix(tokens, d, derive_seed(seed, 2));
  return b;
}

inline ToyModelConfig tiny_model_config() {
  ToyModelConfig cfg;
  cfg.layers = 2;
  cfg.width = 16;
  cfg.heads = 2;
  cfg.channels = 4;
  cfg.mlp_hidden = 32;
  cfg.cond_vocab = 8;
  return cfg;
}

// ---- checks ---------------------------------------------------------------

inline void check_rng_determinism() {
  SplitMix64 a(42), b(42), c(43);
  bool same = true, differ = false;
  for (int i = 0; i < 64; ++i) {
    const std::uint64_t x = a.next();
    same = same && x == b.next();
    differ = differ || x != c.next();
  }
  ensure(same, "same-seed streams diverged");
  ensure(differ, "distinct seeds produced one stream");
  ensure(derive_seed(1, 2) != derive_seed(2, 1), "seed derivation ignores argument order");
  SplitMix64 r(7);
  for (int i = 0; i < 1000; ++i) ensure(r.below(7) < 7, "below() out of range");
}

inline void check_tensor_basics() {
  Tensor z = Tensor::zeros({2, 3});
  ensure(z.rows() == 2 && z.cols() == 3 && z.numel() == 6, "zeros shape wrong");
  Tensor f = Tensor::full({2, 3}, 1.5f);
  ensure(f.at(1, 2) == 1.5f, "full() element wrong");
  ensure(!bit_equal(z, f), "bit_equal confuses distinct tensors");
  ensure(bit_equal(f, f), "bit_equal rejects identical tensor");
  f.at(0, 0) = -2.0f;
  ensure(f.data()[0] == -2.0f, "at() write did not land in storage");
}

inline void check_tensor_file_roundtrip() {
  std::vector<Tensor> cases;
  cases.push_back(Tensor(std::vector<std::size_t>{0}));
  cases.push_back(Tensor::full({1}, 3.25f));
  for (std::uint64_t s = 0; s < 3; ++s) cases.push_back(random_matrix(4, 5, derive_seed(9, s)));
  for (const Tensor& t : cases) {
    const Tensor back = decode_mcat(encode_mcat(t));
    ensure(bit_equal(t, back), "encode/decode round-trip not bit-exact");
  }
}

inline void check_attention_identities() {
  for (std::uint64_t s = 0; s < 8; ++s) {
    const BranchState own = random_branch(BranchRole::Src, 5, 4, derive_seed(100, s));
    BranchState twin = own;
    twin.role = BranchRole::Tar;
    const Tensor self_out = mca_attention(own, twin, McaVariant::Self);
    for (McaVariant v : {McaVariant::ConcatKV, McaVariant::SwapK, McaVariant::SwapKV}) {
      ensure(max_abs_diff(self_out, mca_attention(own, twin, v)) <= 1e-6,
             "identical-branch variant drifted from Self");
    }
    const Tensor w = mca_attention_weights(own, twin, McaVariant::ConcatK);
    for (std::size_t r = 0; r < w.rows(); ++r) {
      double sum = 0.0;
      for (std::size_t c = 0; c < w.cols(); ++c) sum += w.at(r, c);
      ensure(std::abs(sum - 1.0) <= 1e-6, "attention row does not sum to 1");
    }
  }
}

inline void check_attention_gradients() {
  const std::size_t tokens = 3, d = 4;
  const Tensor q = random_matrix(tokens, d, 11), k = random_matrix(tokens, d, 12),
               v = random_matrix(tokens, d, 13);
  const BranchState other = random_branch(BranchRole::Tar, tokens, d, 14);
  const Tensor target = random_matrix(tokens, d, 15);

  const double worst = grad_check(
      [&](GradTape& t, const std::vector<Var>& in) {
        BranchVars own{BranchRole::Src, t.constant(q), in[0], t.constant(v)};
        BranchVars oth{BranchRole::Tar, t.constant(other.q), t.constant(other.k),
                       t.constant(other.v)};
        const Var out = mca_attention(t, own, oth, McaVariant::ConcatK);
        return t.mse(out, t.constant(target));
      },
      {k});
  ensure(worst < 1e-4, "finite-difference gradient mismatch");
}

inline void check_schedule_presets() {
  for (const std::string& task : preset_tasks()) {
    const SchedulePolicy p = preset(task);
    validate_schedule(p);
    ensure(parse_schedule(render_schedule(p)) == p, "render/parse round-trip changed policy");
    const StageBoundaries stages;
    for (std::size_t layer = 0; layer < 4; ++layer) {
      for (std::size_t step = 0; step < 50; ++step) {
        for (BranchRole role : {BranchRole::Src, BranchRole::Tar}) {
          const McaVariant v = resolve(p, role, layer, step, 4, 50);
          const double frac = (static_cast<double>(step) + 0.5) / 50.0;
          if (stage_of(frac, stages) == StepStage::Late) {
            ensure(v != McaVariant::SwapK && v != McaVariant::SwapKV,
                   "swap variant assigned in the late stage");
          }
        }
      }
    }
  }
}

inline void check_synthetic_pairs() {
  for (const std::string& task : preset_tasks()) {
    const SynthPair p = synth_pair(ClipDims{}, task, derive_seed(55, fnv1a(task)), 0, 1);
    ensure(p.src.onset < p.src.clip.frames, "onset beyond clip");
    ensure(p.src.mask.size() == p.src.clip.values.rows(), "mask length != token count");
    bool inside_differs = false;
    for (std::size_t t = 0; t < p.src.mask.size(); ++t) {
      for (std::size_t c = 0; c < p.src.clip.channels; ++c) {
        const float a = p.src.clip.values.at(t, c), b = p.tar.clip.values.at(t, c);
        if (p.src.mask[t] == 0) {
          ensure(a == b, "unedited token differs between branches");
        } else if (a != b) {
          inside_differs = true;
        }
      }
    }
    ensure(inside_differs, "edit mask covers no actual change");
  }
}

inline void check_sampler_replay() {
  const ToyModel model = build_model(tiny_model_config(), 77);
  const ClipDims dims{2, 4, 4, 4};
  const SchedulePolicy self{"all_self", {}};
  const SampledPair a = sample_pair(model, 1, 2, self, 2, 31, true, dims);
  const SampledPair b = sample_pair(model, 1, 2, self, 2, 31, true, dims);
  ensure(bit_equal(a.src.values, b.src.values) && bit_equal(a.tar.values, b.tar.values),
         "same-seed sampling not bit-identical");
  const LatentClip s1 = sample_single(model, 1, 2, derive_seed(31, 0), dims);
  const LatentClip s2 = sample_single(model, 2, 2, derive_seed(31, 0), dims);
  ensure(bit_equal(a.src.values, s1.values) && bit_equal(a.tar.values, s2.values),
         "all-Self joint sampling differs from independent branches");
}

inline void check_mixture_frequencies() {
  const MixtureSpec spec = objectives_mixture();
  const std::size_t n = 20000;
  const std::vector<std::string> draws = mixture_sample(spec, n, 2024);
  ensure(draws == mixture_sample(spec, n, 2024), "mixture draws not reproducible");
  std::size_t gen = 0, vlm = 0, con = 0;
  for (const std::string& d : draws) {
    if (d == "generation") ++gen;
    else if (d == "vlm_reconstruction") ++vlm;
    else if (d == "consistency_preservation") ++con;
  }
  ensure(gen + vlm + con == n, "mixture drew an unknown category");
  const auto close = [&](std::size_t count, double want) {
    return std::abs(static_cast<double>(count) / n - want) <= 0.03;
  };
  ensure(close(gen, 0.7) && close(vlm, 0.2) && close(con, 0.1),
         "mixture frequencies far from weights");
}

inline void check_manifest_roundtrip() {
  PipelineRecord rec;
  rec.id = "rec_0000";
  rec.task = "object_insertion_removal";
  rec.stages_passed = kNumStages;
  rec.src_clip = "clips/a.src.mcat";
  rec.tar_clip = "clips/a.tar.mcat";
  rec.onset = 3;
  rec.has_pair = true;
  rec.instructions = {"Add it.", "Add it, starting at frame 3.", "Add it. Dense."};
  rec.has_instructions = true;
  rec.seed = 99;
  rec.schedule = "object_insertion_removal";
  rec.backend_versions = {{"text", "mock-text/1"}};
  const std::string line = encode_record(rec);
  const PipelineRecord back = decode_record(line);
  ensure(back.id == rec.id && back.onset == rec.onset && back.instructions == rec.instructions,
         "record round-trip lost fields");
  ensure(back.verified() && !back.rejected(), "verified record misclassified");
  const auto j = nlohmann::ordered_json::parse(line);
  auto it = j.begin();
  for (const char* key : {"id", "task", "stage_status", "src_clip", "tar_clip", "onset"}) {
    ensure(it != j.end() && it.key() == key, "manifest key order drifted");
    ++it;
  }
  ensure(j.at("reject_reason").is_null(), "verified record carries a reject reason");
}

inline void check_filter_rules() {
  const ClipDims dims{4, 2, 2, 2};
  const LatentClip flat = make_clip(dims, Tensor::full({dims.tokens(), dims.channels}, 1.0f));
  const EditMask mask = onset_mask(dims, 2);
  const PipelineThresholds th;
  ensure(filter_responses(flat, flat, mask, th).pass, "identical clips rejected");

  LatentClip bad = flat;
  bad.values.at(0, 0) = std::numeric_limits<float>::quiet_NaN();
  const FilterReport nan_report = filter_responses(flat, bad, mask, th);
  ensure(!nan_report.pass && nan_report.reason == "non-finite", "NaN not reported as non-finite");

  Tensor ramp = Tensor::zeros({dims.tokens(), dims.channels});
  const std::size_t per_frame = dims.height * dims.width;
  const float frame_vals[4] = {0.0f, 3.0f, 3.0f, 6.0f};
  for (std::size_t t = 0; t < dims.tokens(); ++t) {
    for (std::size_t c = 0; c < dims.channels; ++c) ramp.at(t, c) = frame_vals[t / per_frame];
  }
  const double tv = temporal_variation(make_clip(dims, std::move(ramp)));
  ensure(std::abs(tv - 2.0) < 1e-12, "temporal variation oracle mismatch");
}

inline void check_vqa_majority() {
  ScriptedJudgeBackend pass_judge({true, false, true});
  ensure(verify_vqa("clips/x.tar.mcat", pass_judge, 3, 2.0 / 3.0).verified,
         "2-of-3 yes failed a 2/3 threshold");
  ScriptedJudgeBackend fail_judge({true, true, false});
  ensure(!verify_vqa("clips/x.tar.mcat", fail_judge, 3, 1.0).verified,
         "2-of-3 yes passed a unanimous threshold");
  bool threw = false;
  try {
    verify_vqa("clips/x.tar.mcat", pass_judge, 0, 0.5);
  } catch (const ConfigError&) {
    threw = true;
  }
  ensure(threw, "zero VQA rounds accepted");
}

inline void check_bench_formatting() {
  ensure(mcaforge::detail::format_score(4.605) == "4.61", "half-up rounding drifted");
  ensure(mcaforge::detail::format_score(4.5) == "4.50", "two-decimal padding drifted");
  ensure(mcaforge::detail::format_score(0.00001) == "0.00", "tiny score misformatted");
  BenchAggregate agg;
  agg.all = MetricRow{82, 4.61, 4.50, 4.54, 4.80};
  const std::string table = render_table(agg);
  ensure(render_table(parse_table(table)) == table, "table render/parse not a fixed point");
}

inline void check_bench_aggregation() {
  const std::vector<BenchCase> cases = fixture_cases();
  MockScoreJudge judge;
  std::vector<std::pair<BenchCase, JudgeScore>> scored;
  for (const BenchCase& c : cases) scored.emplace_back(c, score_sample(c, judge));
  const BenchAggregate agg = aggregate(scored);
  ensure(agg.all.cases == cases.size(), "aggregate dropped cases");
  double sum = 0.0;
  for (const auto& [c, s] : scored) sum += s.overall;
  ensure(std::abs(agg.all.overall - sum / static_cast<double>(scored.size())) <= 1e-12,
         "aggregate mean differs from scalar recount");
}

}  // namespace detail

struct SelfCheck {
  const char* name;
  void (*fn)();
};

// Fast in-memory spot checks of the library's core invariants; one entry per
// subsystem. The CLI's selftest subcommand runs every entry and reports the
// count, so external monitors can detect a silently shrunk suite.
inline const std::array<SelfCheck, 14>& selftest_registry() {
  static const std::array<SelfCheck, 14> kChecks = {{
      {"rng-determinism", &detail::check_rng_determinism},
      {"tensor-basics", &detail::check_tensor_basics},
      {"tensor-file-roundtrip", &detail::check_tensor_file_roundtrip},
      {"attention-identities", &detail::check_attention_identities},
      {"attention-gradients", &detail::check_attention_gradients},
      {"schedule-presets", &detail::check_schedule_presets},
      {"synthetic-pairs", &detail::check_synthetic_pairs},
      {"sampler-replay", &detail::check_sampler_replay},
      {"mixture-frequencies", &detail::check_mixture_frequencies},
      {"manifest-roundtrip", &detail::check_manifest_roundtrip},
      {"filter-rules", &detail::check_filter_rules},
      {"vqa-majority", &detail::check_vqa_majority},
      {"bench-formatting", &detail::check_bench_formatting},
      {"bench-aggregation", &detail::check_bench_aggregation},
  }};
  return kChecks;
}

// Runs every registered check; returns the number of failures.
inline int run_selftest(std::ostream& out) {
  int failures = 0;
  const auto& registry = selftest_registry();
  for (const SelfCheck& check : registry) {
    try {
      check.fn();
      out << "ok   " << check.name << "\n";
    } catch (const std::exception& e) {
      ++failures;
      out << "FAIL " << check.name << ": " << e.what() << "\n";
    }
  }
  out << "selftest: " << (registry.size() - static_cast<std::size_t>(failures)) << "/"
      << registry.size() << " checks passed\n";
  return failures;
}

}  // namespace mcaforge::selftest
