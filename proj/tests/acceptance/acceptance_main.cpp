// Release gate: one check per shipping criterion, each printed as a single
// [PASS]/[FAIL] line with its measured runtime. Tolerances and budgets are
// pinned here on purpose; loosening them is a release decision, not a fix.
#include <chrono>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iostream>
#include <sstream>
#include <string>
#include <vector>

#include "mcaforge/attention.hpp"
#include "mcaforge/backends.hpp"
#include "mcaforge/bench.hpp"
#include "mcaforge/denoiser.hpp"
#include "mcaforge/error.hpp"
#include "mcaforge/experiment.hpp"
#include "mcaforge/mixture.hpp"
#include "mcaforge/pipeline.hpp"
#include "mcaforge/rng.hpp"
#include "mcaforge/schedule.hpp"
#include "mcaforge/tensor_io.hpp"

using namespace mcaforge;
namespace fs = std::filesystem;

namespace {

const fs::path kSource = MCAFORGE_SOURCE_DIR;

void require(bool ok, const std::string& what) {
  if (!ok) throw Error(what);
}

Tensor random_matrix(SplitMix64& rng, std::size_t rows, std::size_t cols) {
  Tensor t = Tensor::zeros({rows, cols});
  for (std::size_t i = 0; i < t.numel(); ++i) t[i] = static_cast<float>(rng.normal());
  return t;
}

BranchState random_state(SplitMix64& rng, BranchRole role, std::size_t tokens, std::size_t d) {
  BranchState b;
  b.role = role;
  b.q = random_matrix(rng, tokens, d);
  b.k = random_matrix(rng, tokens, d);
  b.v = random_matrix(rng, tokens, d);
  return b;
}

// ---- criterion 1: attention identities ------------------------------------

std::string criterion_attention_identities() {
  SplitMix64 rng(101);
  const std::size_t states = 1000;
  for (std::size_t i = 0; i < states; ++i) {
    const std::size_t tokens = 1 + rng.below(16), d = 1 + rng.below(16);
    const BranchState own = random_state(rng, BranchRole::Src, tokens, d);
    const BranchState other = random_state(rng, BranchRole::Tar, tokens, d);

    const Tensor plain =
        matmul(softmax_rows(scale(matmul(own.q, transpose(own.k)),
                                  1.0 / std::sqrt(static_cast<double>(d)))),
               own.v);
    require(bit_equal(mca_attention(own, other, McaVariant::Self), plain),
            "Self variant is not bit-identical to plain attention");

    const Tensor self_out = mca_attention(own, own, McaVariant::Self);
    for (McaVariant v : {McaVariant::ConcatKV, McaVariant::SwapK, McaVariant::SwapKV}) {
      require(max_abs_diff(self_out, mca_attention(own, own, v)) <= 1e-6,
              std::string("identical-branch ") + variant_name(v) + " drifted from Self");
    }

    for (McaVariant v : {McaVariant::Self, McaVariant::ConcatK, McaVariant::ConcatKV,
                         McaVariant::SwapK, McaVariant::SwapKV}) {
      const Tensor w = mca_attention_weights(own, other, v);
      for (std::size_t r = 0; r < w.rows(); ++r) {
        double sum = 0.0;
        for (std::size_t c = 0; c < w.cols(); ++c) sum += w.at(r, c);
        require(std::abs(sum - 1.0) <= 1e-6, "attention row does not sum to 1");
      }
    }
  }
  return std::to_string(states) + " randomized states";
}

// ---- criterion 2: gradient checks ------------------------------------------

std::string criterion_gradients() {
  constexpr McaVariant kVariants[] = {McaVariant::Self, McaVariant::ConcatK, McaVariant::ConcatKV,
                                      McaVariant::SwapK, McaVariant::SwapKV};
  SplitMix64 rng(202);
  double worst = 0.0;
  std::size_t instances = 0;

  // 45 instances through the five interaction variants (nine each).
  for (std::size_t i = 0; i < 45; ++i, ++instances) {
    const McaVariant variant = kVariants[i % 5];
    const std::size_t tokens = 2 + rng.below(4), d = 2 + rng.below(4);
    const Tensor q = random_matrix(rng, tokens, d), k = random_matrix(rng, tokens, d),
                 v = random_matrix(rng, tokens, d);
    const Tensor oq = random_matrix(rng, tokens, d), ok = random_matrix(rng, tokens, d),
                 ov = random_matrix(rng, tokens, d);
    const Tensor target = random_matrix(rng, tokens, d);
    const double err = grad_check(
        [&](GradTape& t, const std::vector<Var>& in) {
          BranchVars own{BranchRole::Src, in[0], in[1], in[2]};
          BranchVars oth{BranchRole::Tar, in[3], in[4], in[5]};
          return t.mse(mca_attention(t, own, oth, variant), t.constant(target));
        },
        {q, k, v, oq, ok, ov});
    require(err < 1e-4, std::string("gradient error through ") + variant_name(variant) +
                            " is " + std::to_string(err));
    worst = std::max(worst, err);
  }

  // 5 instances through a full transformer block (attention + MLP + norms
  // + embedding and output head), differentiating the block's input tokens.
  ToyModelConfig cfg;
  cfg.layers = 1;
  cfg.width = 16;
  cfg.heads = 2;
  cfg.channels = 4;
  cfg.mlp_hidden = 32;
  cfg.cond_vocab = 4;
  for (std::size_t i = 0; i < 5; ++i, ++instances) {
    const ToyModel model = build_model(cfg, derive_seed(77, i));
    const Tensor x = random_matrix(rng, 6, cfg.channels);
    const Tensor target = random_matrix(rng, 6, cfg.channels);
    const double err = grad_check(
        [&](GradTape& t, const std::vector<Var>& in) {
          const ModelVars vars = lift(t, model, false);
          const Var out = forward_single(t, vars, cfg, in[0], i % cfg.cond_vocab, 0.5);
          return t.mse(out, t.constant(target));
        },
        {x});
    require(err < 1e-4, "gradient error through the full block is " + std::to_string(err));
    worst = std::max(worst, err);
  }

  std::ostringstream detail;
  detail << instances << " instances, worst rel err " << worst;
  return detail.str();
}

// ---- criterion 3: schedule presets ------------------------------------------

std::string criterion_schedules() {
  const char* kFiles[] = {"object_insertion.sched", "local_modification.sched",
                          "background_replacement.sched", "color_material.sched",
                          "motion_viewpoint.sched"};
  const std::vector<std::string>& tasks = preset_tasks();
  require(tasks.size() == 5, "expected five preset tasks");

  const StageBoundaries stages;
  for (std::size_t i = 0; i < 5; ++i) {
    const SchedulePolicy from_file = load_schedule(kSource / "presets" / kFiles[i]);
    validate_schedule(from_file);
    const SchedulePolicy factory = preset(tasks[i]);
    require(from_file == factory, std::string(kFiles[i]) + " differs from the built-in preset");
    require(parse_schedule(render_schedule(factory)) == factory,
            "parse(render()) is not the identity for " + tasks[i]);

    for (std::size_t layer = 0; layer < 4; ++layer) {
      for (std::size_t step = 0; step < 50; ++step) {
        for (BranchRole role : {BranchRole::Src, BranchRole::Tar}) {
          const McaVariant v = resolve(factory, role, layer, step, 4, 50);
          const double frac = (static_cast<double>(step) + 0.5) / 50.0;
          if (stage_of(frac, stages) == StepStage::Late) {
            require(v != McaVariant::SwapK && v != McaVariant::SwapKV,
                    tasks[i] + " assigns a swap variant in the late stage");
          }
        }
      }
    }
  }
  return "5 presets, full 4x50 grid, no late-stage swaps";
}

// ---- criterion 4: toy alignment experiment -----------------------------------

std::string criterion_alignment() {
  const AlignmentResult r = run_alignment_experiment(AlignmentConfig{});
  std::ostringstream detail;
  detail.precision(5);
  detail << "median MSE preset " << r.preset_median << " vs all-self " << r.self_median
         << ", train " << static_cast<int>(r.train_seconds) << "s";
  require(r.train_seconds <= 600.0,
          "training exceeded the 10-minute budget: " + std::to_string(r.train_seconds) + "s");
  require(r.preset_median < r.self_median,
          "insertion preset did not beat all-self: " + detail.str());
  return detail.str();
}

// ---- criterion 5: pipeline determinism and conservation -----------------------

void compare_trees(const fs::path& a, const fs::path& b) {
  std::vector<fs::path> rel;
  for (const auto& e : fs::recursive_directory_iterator(a)) {
    if (e.is_regular_file()) rel.push_back(fs::relative(e.path(), a));
  }
  std::size_t b_files = 0;
  for (const auto& e : fs::recursive_directory_iterator(b)) b_files += e.is_regular_file();
  require(b_files == rel.size(), "output trees hold different file counts");
  for (const fs::path& p : rel) {
    std::ifstream fa(a / p, std::ios::binary), fb(b / p, std::ios::binary);
    require(fa.good() && fb.good(), "missing twin for " + p.string());
    const std::string da((std::istreambuf_iterator<char>(fa)), std::istreambuf_iterator<char>());
    const std::string db((std::istreambuf_iterator<char>(fb)), std::istreambuf_iterator<char>());
    require(da == db, p.string() + " differs between runs");
  }
}

std::string criterion_pipeline() {
  const fs::path root = fs::temp_directory_path() / "mcaforge_acceptance_pipeline";
  fs::remove_all(root);

  MockTextBackend text;
  MockInstructBackend instruct;
  MockJudgeBackend judge;

  const auto run_once = [&](const fs::path& out, std::size_t workers) {
    PipelineConfig cfg;
    cfg.records = 8;
    cfg.workers = workers;
    cfg.out_dir = out;
    MockGeneratorBackend generator(out, cfg.dims);
    return run_pipeline(cfg, 2026, {&text, &generator, &instruct, &judge});
  };

  const RunSummary first = run_once(root / "a", 1);
  const RunSummary rerun = run_once(root / "b", 1);
  const RunSummary wide = run_once(root / "c", 4);
  (void)rerun;
  (void)wide;

  require(first.complete, "mock run flagged an outage");
  require(first.verified + first.rejected_total() == first.submitted,
          "verified + rejections != submitted");
  compare_trees(root / "a", root / "b");
  compare_trees(root / "a", root / "c");

  const ManifestStats stats = manifest_stats(read_manifest(first.manifest_path));
  require(stats.total == first.submitted, "manifest row count drifted from the run summary");

  std::ostringstream detail;
  detail << first.submitted << " records, " << first.verified
         << " verified, byte-identical across reruns and workers 1/4";
  return detail.str();
}

// ---- criterion 6: mixture statistics -------------------------------------------

std::string criterion_mixtures() {
  const std::size_t n = 100000;
  const auto frequency = [&](const std::vector<std::string>& draws, const std::string& name) {
    std::size_t count = 0;
    for (const auto& d : draws) count += d == name;
    return static_cast<double>(count) / static_cast<double>(n);
  };

  const std::vector<std::string> objectives = mixture_sample(objectives_mixture(), n, 61);
  const double g = frequency(objectives, "generation");
  const double v = frequency(objectives, "vlm_reconstruction");
  const double c = frequency(objectives, "consistency_preservation");
  require(std::abs(g - 0.7) <= 0.015 && std::abs(v - 0.2) <= 0.015 && std::abs(c - 0.1) <= 0.015,
          "objective mixture frequencies off target");

  const std::vector<std::string> media = mixture_sample(media_mixture(), n, 62);
  const double img = frequency(media, "image");
  const double vid = frequency(media, "video");
  require(std::abs(img - 0.8) <= 0.015 && std::abs(vid - 0.2) <= 0.015,
          "media mixture frequencies off target");

  std::ostringstream detail;
  detail.precision(4);
  detail << "7:2:1 -> " << g << "/" << v << "/" << c << ", 4:1 -> " << img << "/" << vid;
  return detail.str();
}

// ---- criterion 7: bench aggregation oracle ---------------------------------------

std::string criterion_bench() {
  const std::vector<BenchCase> cases = fixture_cases();
  require(cases.size() == 82, "fixture case count drifted");
  MockScoreJudge judge;
  std::vector<std::pair<BenchCase, JudgeScore>> scored;
  for (const BenchCase& c : cases) scored.emplace_back(c, score_sample(c, judge));
  const BenchAggregate agg = aggregate(scored);

  // Independent recount: plain double accumulators over a flat pass.
  const auto recount = [&](auto pick, const std::string& label, double got) {
    double sum = 0.0;
    for (const auto& [c, s] : scored) sum += pick(s);
    const double mean = sum / static_cast<double>(scored.size());
    require(std::abs(mean - got) <= 1e-12, label + " mean differs from the scalar recount");
  };
  recount([](const JudgeScore& s) { return s.overall; }, "overall", agg.all.overall);
  recount([](const JudgeScore& s) { return s.ic; }, "ic", agg.all.ic);
  recount([](const JudgeScore& s) { return s.tvq; }, "tvq", agg.all.tvq);
  recount([](const JudgeScore& s) { return s.urp; }, "urp", agg.all.urp);
  for (const auto& [category, row] : agg.categories) {
    double sum = 0.0;
    std::size_t count = 0;
    for (const auto& [c, s] : scored) {
      if (c.category == category) {
        sum += s.overall;
        ++count;
      }
    }
    require(count == row.cases, category + " case count drifted");
    require(std::abs(sum / static_cast<double>(count) - row.overall) <= 1e-12,
            category + " mean differs from the scalar recount");
  }

  // The reference row must round-trip through parse -> render byte-exactly.
  BenchAggregate reference;
  reference.all = MetricRow{82, 4.61, 4.50, 4.54, 4.80};
  const std::string rendered = render_table(reference);
  require(render_table(parse_table(rendered)) == rendered,
          "reference row does not round-trip byte-exactly");
  std::ifstream golden_in(kSource / "tests" / "golden" / "bench_reference_row.txt",
                          std::ios::binary);
  require(golden_in.good(), "missing golden reference table");
  const std::string golden((std::istreambuf_iterator<char>(golden_in)),
                           std::istreambuf_iterator<char>());
  require(rendered == golden, "reference row drifted from the golden table");

  return "82 cases recounted, reference row round-trips";
}

// ---- criterion 8: tensor file round-trip ------------------------------------------

std::string criterion_tensor_io() {
  const fs::path dir = fs::temp_directory_path() / "mcaforge_acceptance_mcat";
  fs::remove_all(dir);
  fs::create_directories(dir);

  SplitMix64 rng(808);
  for (int i = 0; i < 100; ++i) {
    Tensor t;
    if (i == 0) {
      t = Tensor(std::vector<std::size_t>{0});
    } else if (i == 1) {
      t = Tensor::full({1}, -7.25f);
    } else {
      const std::size_t rank = 1 + rng.below(3);
      std::vector<std::size_t> shape;
      for (std::size_t r = 0; r < rank; ++r) shape.push_back(rng.below(7));
      t = Tensor(std::move(shape));
      for (std::size_t j = 0; j < t.numel(); ++j) t[j] = static_cast<float>(rng.normal());
    }
    const fs::path file = dir / ("t" + std::to_string(i) + ".mcat");
    write_mcat(file, t);
    require(bit_equal(read_mcat(file), t), "file round-trip not bit-exact");
  }
  return "100 tensors including empty and 1-element shapes";
}

// ---- driver -------------------------------------------------------------------

struct Criterion {
  const char* name;
  std::function<std::string()> fn;
  double budget_seconds;  // 0 = no runtime cap
};

}  // namespace

int main() {
  const std::vector<Criterion> criteria = {
      {"attention identities", criterion_attention_identities, 10.0},
      {"gradient checks", criterion_gradients, 30.0},
      {"schedule presets", criterion_schedules, 5.0},
      {"toy alignment experiment", criterion_alignment, 0.0},
      {"pipeline determinism", criterion_pipeline, 60.0},
      {"mixture statistics", criterion_mixtures, 5.0},
      {"bench aggregation", criterion_bench, 5.0},
      {"tensor file round-trip", criterion_tensor_io, 10.0},
  };

  int failures = 0;
  for (std::size_t i = 0; i < criteria.size(); ++i) {
    const auto start = std::chrono::steady_clock::now();
    std::string detail;
    bool ok = true;
    try {
      detail = criteria[i].fn();
    } catch (const std::exception& e) {
      ok = false;
      detail = e.what();
    }
    const double secs =
        std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
    if (ok && criteria[i].budget_seconds > 0.0 && secs > criteria[i].budget_seconds) {
      ok = false;
      detail = "runtime " + std::to_string(secs) + "s exceeds " +
               std::to_string(criteria[i].budget_seconds) + "s budget";
    }
    failures += !ok;
    std::ostringstream line;
    line.precision(3);
    line << (ok ? "[PASS] " : "[FAIL] ") << "criterion " << (i + 1) << ": " << criteria[i].name
         << " (" << detail << ", " << std::fixed << secs << "s)";
    std::cout << line.str() << std::endl;
  }
  std::cout << (failures == 0 ? "acceptance: all criteria passed"
                              : "acceptance: " + std::to_string(failures) + " criteria FAILED")
            << std::endl;
  return failures == 0 ? 0 : 1;
}
