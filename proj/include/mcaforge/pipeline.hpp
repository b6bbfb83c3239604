#pragma once

#include <algorithm>
#include <array>
#include <atomic>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <mutex>
#include <string>
#include <thread>
#include <utility>
#include <vector>

#include "json.hpp"

#include "mcaforge/backends.hpp"
#include "mcaforge/clip.hpp"
#include "mcaforge/error.hpp"
#include "mcaforge/manifest.hpp"
#include "mcaforge/rng.hpp"
#include "mcaforge/schedule.hpp"
#include "mcaforge/tensor_io.hpp"

namespace mcaforge {

// Full-scale dataset targets for the reference setting, recorded here as
// documentation; desk-scale runs use toy clip dims instead.
inline constexpr std::size_t kFullScaleSampleTarget = 300000;  // paired samples
inline constexpr int kFullScaleHeightPx = 480;
inline constexpr int kFullScaleFps = 16;
inline constexpr double kFullScaleClipSeconds = 3.0;

// Stage-3 acceptance bounds. A pair passes only if every check holds.
struct PipelineThresholds {
  double align = 0.05;        // max mean squared diff outside the edit mask
  double tv = 1.0;            // max mean |frame-to-frame delta| per clip
  double value_limit = 100.0;  // max |element| in either clip

  void validate() const {
    if (!(align > 0.0) || !std::isfinite(align)) throw ConfigError("thresholds: align must be positive");
    if (!(tv > 0.0) || !std::isfinite(tv)) throw ConfigError("thresholds: tv must be positive");
    if (!(value_limit > 0.0)) throw ConfigError("thresholds: value_limit must be positive");
  }
};

struct PipelineConfig {
  std::size_t records = 8;
  ClipDims dims;
  std::vector<std::string> tasks = preset_tasks();  // assigned round-robin
  std::vector<std::string> keywords = {"dog",     "park",   "car",   "street",
                                       "kitchen", "garden", "robot", "beach"};
  PipelineThresholds thresholds;
  std::size_t vqa_rounds = 3;
  double vqa_threshold = 2.0 / 3.0;
  std::size_t workers = 1;  // 0 means one per hardware thread
  std::filesystem::path out_dir;

  void validate() const {
    if (records == 0) throw ConfigError("pipeline: record count must be positive");
    if (tasks.empty()) throw ConfigError("pipeline: no tasks configured");
    for (const auto& t : tasks) preset(t);  // unknown task name throws here
    if (keywords.empty()) throw ConfigError("pipeline: keyword pool is empty");
    thresholds.validate();
    if (vqa_rounds == 0) throw ConfigError("pipeline: vqa rounds must be positive");
    if (!(vqa_threshold > 0.0 && vqa_threshold <= 1.0)) {
      throw ConfigError("pipeline: vqa threshold must lie in (0, 1]");
    }
    if (out_dir.empty()) throw ConfigError("pipeline: output directory not set");
  }
};

struct PipelineBackends {
  TextBackend* text = nullptr;
  GeneratorBackend* generator = nullptr;
  InstructBackend* instruct = nullptr;
  JudgeBackend* judge = nullptr;

  void validate() const {
    if (!text || !generator || !instruct || !judge) {
      throw ConfigError("pipeline: all four backends must be provided");
    }
  }

  std::vector<std::pair<std::string, std::string>> versions() const {
    return {{"text", text->version()},
            {"generator", generator->version()},
            {"instruct", instruct->version()},
            {"judge", judge->version()}};
  }
};

struct RunSummary {
  std::size_t submitted = 0;
  std::size_t processed = 0;  // records with a terminal manifest line
  std::size_t verified = 0;
  std::array<std::size_t, kNumStages> rejected_at{};
  bool complete = true;
  std::string outage_reason;
  std::filesystem::path manifest_path;
  std::filesystem::path out_dir;

  std::size_t rejected_total() const {
    std::size_t n = 0;
    for (std::size_t c : rejected_at) n += c;
    return n;
  }
};

namespace detail {

inline std::string record_id(std::size_t index) {
  std::string n = std::to_string(index);
  while (n.size() < 4) n.insert(n.begin(), '0');
  return "rec_" + n;
}

// Two distinct keywords from the pool (one if the pool is a singleton).
inline std::vector<std::string> pick_keywords(const std::vector<std::string>& pool,
                                              std::uint64_t record_seed) {
  SplitMix64 rng(derive_seed(record_seed, fnv1a("keywords")));
  if (pool.size() == 1) return {pool[0]};
  const std::size_t first = rng.below(pool.size());
  const std::size_t second = (first + 1 + rng.below(pool.size() - 1)) % pool.size();
  return {pool[first], pool[second]};
}

inline std::filesystem::path resolve_ref(const std::filesystem::path& root,
                                         const std::string& ref) {
  std::filesystem::path p(ref);
  return p.is_absolute() ? p : root / p;
}

// Shortest round-trip decimal form, e.g. 0.05 -> "0.05".
inline std::string format_threshold(double v) { return nlohmann::ordered_json(v).dump(); }

}  // namespace detail

// Tokens from the onset frame onward; the fallback when a generator
// provides no explicit per-token mask.
inline EditMask onset_mask(const ClipDims& dims, std::size_t onset) {
  EditMask mask(dims.tokens(), 0);
  const std::size_t per_frame = dims.height * dims.width;
  for (std::size_t t = onset * per_frame; t < mask.size(); ++t) mask[t] = 1;
  return mask;
}

// A generator may write `<stem>.mask.mcat` beside `<stem>.src.mcat` with the
// exact per-token edit flags; otherwise the mask is derived from the onset.
inline EditMask load_or_derive_mask(const std::filesystem::path& src_path, const ClipDims& dims,
                                    std::size_t onset) {
  const std::string name = src_path.filename().string();
  static const std::string kSrcSuffix = ".src.mcat";
  if (name.size() > kSrcSuffix.size() && name.ends_with(kSrcSuffix)) {
    std::filesystem::path mask_path =
        src_path.parent_path() /
        (name.substr(0, name.size() - kSrcSuffix.size()) + ".mask.mcat");
    if (std::filesystem::exists(mask_path)) {
      const Tensor m = read_mcat(mask_path);
      if (m.numel() != dims.tokens()) {
        throw ShapeError("edit mask " + mask_path.string() + " has " +
                         std::to_string(m.numel()) + " entries, expected " +
                         std::to_string(dims.tokens()));
      }
      EditMask mask(m.numel(), 0);
      for (std::size_t i = 0; i < m.numel(); ++i) mask[i] = m.data()[i] != 0.0f ? 1 : 0;
      return mask;
    }
  }
  return onset_mask(dims, onset);
}

// Mean absolute frame-to-frame change per (token, channel) step. A single
// frame has no temporal axis and scores 0.
inline double temporal_variation(const LatentClip& c) {
  c.validate();
  if (c.frames <= 1) return 0.0;
  const std::size_t per_frame = c.height * c.width;
  double sum = 0.0;
  for (std::size_t f = 0; f + 1 < c.frames; ++f) {
    const float* cur = c.values.data() + f * per_frame * c.channels;
    const float* nxt = cur + per_frame * c.channels;
    for (std::size_t i = 0; i < per_frame * c.channels; ++i) {
      sum += std::abs(static_cast<double>(nxt[i]) - static_cast<double>(cur[i]));
    }
  }
  return sum / (static_cast<double>(c.frames - 1) * static_cast<double>(per_frame) *
                static_cast<double>(c.channels));
}

struct FilterReport {
  bool pass = false;
  std::string reason;  // empty iff pass
  double alignment = 0.0;
  double tv_src = 0.0;
  double tv_tar = 0.0;
};

// Deterministic stage-3 checks, applied in a fixed order so the first
// failing check names the rejection: finiteness, value range, unedited
// region alignment, temporal smoothness. Identical clips always pass:
// rejection is reserved for pairs that violate a threshold.
inline FilterReport filter_responses(const LatentClip& src, const LatentClip& tar,
                                     const EditMask& mask, const PipelineThresholds& th) {
  th.validate();
  if (src.dims() != tar.dims()) throw ShapeError("filter: clip dimensions differ");
  if (mask.size() != src.tokens()) {
    throw ShapeError("filter: mask length does not match token count");
  }
  FilterReport rep;
  for (const LatentClip* c : {&src, &tar}) {
    for (std::size_t i = 0; i < c->values.numel(); ++i) {
      if (!std::isfinite(c->values.data()[i])) {
        rep.reason = "non-finite";
        return rep;
      }
    }
  }
  float peak = 0.0f;
  for (const LatentClip* c : {&src, &tar}) {
    for (std::size_t i = 0; i < c->values.numel(); ++i) {
      peak = std::max(peak, std::abs(c->values.data()[i]));
    }
  }
  if (static_cast<double>(peak) > th.value_limit) {
    rep.reason = "value range: peak |x| " + detail::format_threshold(peak) + " exceeds " +
                 detail::format_threshold(th.value_limit);
    return rep;
  }
  rep.alignment = alignment_metric(src, tar, mask);
  if (!(rep.alignment < th.align)) {
    rep.reason = "alignment " + detail::format_threshold(rep.alignment) + " not below " +
                 detail::format_threshold(th.align);
    return rep;
  }
  rep.tv_src = temporal_variation(src);
  rep.tv_tar = temporal_variation(tar);
  if (!(rep.tv_src < th.tv) || !(rep.tv_tar < th.tv)) {
    rep.reason = "temporal variation " +
                 detail::format_threshold(std::max(rep.tv_src, rep.tv_tar)) + " not below " +
                 detail::format_threshold(th.tv);
    return rep;
  }
  rep.pass = true;
  return rep;
}

// The alignment questions asked each verification round, cycling when
// rounds exceed the list.
inline const std::vector<std::string>& vqa_questions() {
  static const std::vector<std::string> kQuestions = {
      "Is the requested edit applied in the target clip?",
      "Is the content outside the edit region preserved from the source?",
      "Does the change match the editing instruction?"};
  return kQuestions;
}

struct VqaVerdict {
  std::size_t yes_count = 0;
  std::size_t rounds = 0;
  bool verified = false;
};

// Round r asks question r mod 3; the record passes when the yes fraction
// reaches the threshold (tiny epsilon so 2/3 of 3 rounds passes exactly).
inline VqaVerdict verify_vqa(const std::string& sample_ref, JudgeBackend& judge,
                             std::size_t rounds, double threshold) {
  if (rounds == 0) throw ConfigError("verify_vqa: rounds must be positive");
  VqaVerdict v;
  v.rounds = rounds;
  const auto& questions = vqa_questions();
  for (std::size_t r = 0; r < rounds; ++r) {
    const VqaReply reply = judge.vqa({sample_ref, questions[r % questions.size()]});
    if (reply.yes) ++v.yes_count;
  }
  v.verified = static_cast<double>(v.yes_count) + 1e-12 >=
               threshold * static_cast<double>(rounds);
  return v;
}

namespace detail {

struct RecordWork {
  PipelineRecord rec;
  CaptionReply prompts;
  bool terminal = false;  // has a manifest line (verified or rejected)
};

inline void reject(RecordWork& w, Stage failed, const std::string& why) {
  w.rec.reject_reason = std::string(stage_name(failed)) + ": " + why;
  w.terminal = true;
}

// Stages 2-5 for one record. Returns normally for verified and rejected
// records alike; throws BackendError only to signal an outage.
inline void advance_record(RecordWork& w, const PipelineConfig& cfg,
                           const PipelineBackends& backends) {
  // Stage 2: synthesize the pair.
  GeneratePairReply gen;
  try {
    gen = backends.generator->generate_pair(
        {w.prompts, w.rec.task, w.rec.schedule, w.rec.seed});
  } catch (const BackendError&) {
    throw;
  } catch (const Error& e) {
    reject(w, Stage::Synthesized, e.what());
    return;
  }
  w.rec.src_clip = gen.src_ref;
  w.rec.tar_clip = gen.tar_ref;
  w.rec.onset = gen.onset;
  w.rec.has_pair = true;
  w.rec.stages_passed = static_cast<std::size_t>(Stage::Synthesized) + 1;

  // Stage 3: load both clips and run the deterministic filters.
  w.rec.thresholds = {{"align", format_threshold(cfg.thresholds.align)},
                      {"tv", format_threshold(cfg.thresholds.tv)},
                      {"value_limit", format_threshold(cfg.thresholds.value_limit)}};
  FilterReport rep;
  try {
    const std::filesystem::path src_path = resolve_ref(cfg.out_dir, gen.src_ref);
    const std::filesystem::path tar_path = resolve_ref(cfg.out_dir, gen.tar_ref);
    const LatentClip src = make_clip(cfg.dims, read_mcat(src_path));
    const LatentClip tar = make_clip(cfg.dims, read_mcat(tar_path));
    const EditMask mask = load_or_derive_mask(src_path, cfg.dims, gen.onset);
    rep = filter_responses(src, tar, mask, cfg.thresholds);
  } catch (const Error& e) {
    reject(w, Stage::Filtered, e.what());
    return;
  }
  if (!rep.pass) {
    reject(w, Stage::Filtered, rep.reason);
    return;
  }
  w.rec.stages_passed = static_cast<std::size_t>(Stage::Filtered) + 1;

  // Stage 4: attach the instruction triple.
  Instructions instr;
  try {
    instr = backends.instruct->instruct({w.prompts, w.rec.task, w.rec.onset});
  } catch (const BackendError&) {
    throw;
  } catch (const Error& e) {
    reject(w, Stage::Instructed, e.what());
    return;
  }
  if (instr.short_form.empty() || instr.long_form.empty() || instr.long_dense.empty()) {
    reject(w, Stage::Instructed, "backend returned an empty instruction form");
    return;
  }
  w.rec.instructions = instr;
  w.rec.has_instructions = true;
  w.rec.stages_passed = static_cast<std::size_t>(Stage::Instructed) + 1;

  // Stage 5: multi-round yes/no verification.
  VqaVerdict verdict;
  try {
    verdict = verify_vqa(w.rec.tar_clip, *backends.judge, cfg.vqa_rounds, cfg.vqa_threshold);
  } catch (const BackendError&) {
    throw;
  } catch (const Error& e) {
    reject(w, Stage::Verified, e.what());
    return;
  }
  if (!verdict.verified) {
    reject(w, Stage::Verified,
           "pass fraction " + std::to_string(verdict.yes_count) + "/" +
               std::to_string(verdict.rounds) + " below threshold " +
               format_threshold(cfg.vqa_threshold));
    return;
  }
  w.rec.stages_passed = kNumStages;
  w.terminal = true;
}

inline void write_run_config(const std::filesystem::path& path, const PipelineConfig& cfg,
                             std::uint64_t seed, const PipelineBackends& backends,
                             const RunSummary& summary) {
  nlohmann::ordered_json j;
  j["seed"] = seed;
  j["records"] = cfg.records;
  j["dims"] = {{"frames", cfg.dims.frames},
               {"height", cfg.dims.height},
               {"width", cfg.dims.width},
               {"channels", cfg.dims.channels}};
  j["tasks"] = cfg.tasks;
  j["keywords"] = cfg.keywords;
  j["thresholds"] = {{"align", cfg.thresholds.align},
                     {"tv", cfg.thresholds.tv},
                     {"value_limit", cfg.thresholds.value_limit}};
  j["vqa"] = {{"rounds", cfg.vqa_rounds}, {"threshold", cfg.vqa_threshold}};
  nlohmann::ordered_json versions = nlohmann::ordered_json::object();
  for (const auto& [k, v] : backends.versions()) versions[k] = v;
  j["backend_versions"] = versions;
  j["complete"] = summary.complete;
  if (summary.complete) {
    j["outage"] = nullptr;
  } else {
    j["outage"] = summary.outage_reason;
  }
  nlohmann::ordered_json rejected = nlohmann::ordered_json::object();
  for (std::size_t s = 0; s < kNumStages; ++s) {
    rejected[stage_name(static_cast<Stage>(s))] = summary.rejected_at[s];
  }
  j["counts"] = {{"submitted", summary.submitted},
                 {"processed", summary.processed},
                 {"verified", summary.verified},
                 {"rejected", rejected}};
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot write run config: " + path.string());
  out << j.dump(2) << '\n';
}

}  // namespace detail

// Drives every record through the five stages and writes out_dir/
// manifest.jsonl plus a run_config.json echo. Captioning runs on the
// calling thread; the remaining stages run on a bounded worker pool. All
// per-record randomness derives from (seed, record index), so the manifest
// bytes do not depend on the worker count. A BackendError (a backend that
// stayed down through its retries) stops the run; completed records are
// still written and the run config is flagged incomplete.
inline RunSummary run_pipeline(const PipelineConfig& cfg, std::uint64_t seed,
                               const PipelineBackends& backends) {
  cfg.validate();
  backends.validate();
  std::filesystem::create_directories(cfg.out_dir);

  RunSummary summary;
  summary.submitted = cfg.records;
  summary.out_dir = cfg.out_dir;
  summary.manifest_path = cfg.out_dir / "manifest.jsonl";

  const auto versions = backends.versions();
  std::vector<detail::RecordWork> work(cfg.records);
  for (std::size_t i = 0; i < cfg.records; ++i) {
    auto& w = work[i];
    w.rec.id = detail::record_id(i);
    w.rec.task = cfg.tasks[i % cfg.tasks.size()];
    w.rec.schedule = w.rec.task;
    w.rec.seed = derive_seed(seed, i);
    w.rec.backend_versions = versions;
  }

  bool outage = false;
  std::string outage_reason;

  // Stage 1: captions, sequential.
  for (auto& w : work) {
    try {
      w.prompts = backends.text->caption(
          {detail::pick_keywords(cfg.keywords, w.rec.seed), w.rec.task, w.rec.seed});
      w.rec.stages_passed = 1;
    } catch (const BackendError& e) {
      detail::reject(w, Stage::Captioned, e.what());
      outage = true;
      outage_reason = e.what();
      break;
    } catch (const Error& e) {
      detail::reject(w, Stage::Captioned, e.what());
    }
  }

  // Stages 2-5: bounded worker pool over records.
  if (!outage) {
    std::size_t workers = cfg.workers ? cfg.workers : std::thread::hardware_concurrency();
    if (workers == 0) workers = 1;
    workers = std::min(workers, cfg.records);
    std::atomic<std::size_t> next{0};
    std::atomic<bool> stop{false};
    std::mutex outage_mutex;
    auto run_worker = [&] {
      for (;;) {
        const std::size_t i = next.fetch_add(1);
        if (i >= work.size() || stop.load()) return;
        auto& w = work[i];
        if (w.terminal) continue;  // rejected at stage 1
        try {
          detail::advance_record(w, cfg, backends);
        } catch (const BackendError& e) {
          detail::reject(w, static_cast<Stage>(w.rec.stages_passed), e.what());
          std::lock_guard<std::mutex> lock(outage_mutex);
          stop.store(true);
          outage = true;
          if (outage_reason.empty()) outage_reason = e.what();
        }
      }
    };
    if (workers == 1) {
      run_worker();
    } else {
      std::vector<std::thread> pool;
      pool.reserve(workers);
      for (std::size_t t = 0; t < workers; ++t) pool.emplace_back(run_worker);
      for (auto& t : pool) t.join();
    }
  }

  std::vector<PipelineRecord> lines;
  lines.reserve(work.size());
  for (const auto& w : work) {
    if (!w.terminal) continue;  // skipped after an outage
    lines.push_back(w.rec);
    ++summary.processed;
    if (w.rec.verified()) {
      ++summary.verified;
    } else {
      summary.rejected_at[w.rec.stages_passed] += 1;
    }
  }
  summary.complete = !outage;
  summary.outage_reason = outage_reason;

  write_manifest(summary.manifest_path, lines);
  detail::write_run_config(cfg.out_dir / "run_config.json", cfg, seed, backends, summary);
  return summary;
}

// Recomputed manifest statistics for `pipeline inspect` and tests.
struct ManifestStats {
  std::size_t total = 0;
  std::size_t verified = 0;
  std::array<std::size_t, kNumStages> rejected_at{};
  std::array<std::size_t, kNumStages> reached{};  // records passing stage k

  std::size_t rejected_total() const {
    std::size_t n = 0;
    for (std::size_t c : rejected_at) n += c;
    return n;
  }
};

inline ManifestStats manifest_stats(const std::vector<PipelineRecord>& records) {
  ManifestStats st;
  st.total = records.size();
  for (const auto& rec : records) {
    rec.validate();
    if (!rec.verified() && !rec.rejected()) {
      throw ConfigError("record " + rec.id + " is neither verified nor rejected");
    }
    for (std::size_t s = 0; s < rec.stages_passed; ++s) st.reached[s] += 1;
    if (rec.verified()) {
      ++st.verified;
    } else {
      st.rejected_at[rec.stages_passed] += 1;
    }
  }
  return st;
}

inline std::string inspect_manifest(const std::filesystem::path& path) {
  const auto records = read_manifest(path);
  const ManifestStats st = manifest_stats(records);
  std::string out;
  out += "records:  " + std::to_string(st.total) + "\n";
  out += "verified: " + std::to_string(st.verified) + "\n";
  for (std::size_t s = 0; s < kNumStages; ++s) {
    if (st.rejected_at[s] == 0) continue;
    out += "rejected at " + std::string(stage_name(static_cast<Stage>(s))) + ": " +
           std::to_string(st.rejected_at[s]) + "\n";
  }
  for (const auto& rec : records) {
    if (rec.rejected()) out += "  " + rec.id + ": " + rec.reject_reason + "\n";
  }
  const bool conserved = st.verified + st.rejected_total() == st.total;
  out += std::string("conservation: ") + (conserved ? "ok" : "VIOLATED") + "\n";
  return out;
}

}  // namespace mcaforge
