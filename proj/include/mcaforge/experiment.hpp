#pragma once

#include <algorithm>
#include <atomic>
#include <chrono>
#include <cstdint>
#include <thread>
#include <vector>

#include "mcaforge/denoiser.hpp"
#include "mcaforge/error.hpp"
#include "mcaforge/rng.hpp"
#include "mcaforge/schedule.hpp"
#include "mcaforge/synth.hpp"

namespace mcaforge {

// Schedule that resolves Self everywhere (the fallback covers every cell).
inline SchedulePolicy all_self_schedule() { return SchedulePolicy{"all_self", {}}; }

struct AlignmentConfig {
  ToyModelConfig model;
  SynthConfig data;
  std::size_t train_steps = 600;
  double lr = 0.05;
  std::size_t sample_steps = 20;
  std::size_t seeds = 16;
  std::size_t workers = 0;  // 0 = hardware concurrency
  std::uint64_t seed = 0x616c69676eULL;
};

struct AlignmentResult {
  std::vector<double> preset_mse;  // cross-branch unedited-region MSE, per seed
  std::vector<double> self_mse;
  double preset_median = 0.0;
  double self_median = 0.0;
  bool preset_improves = false;
  std::vector<double> loss_curve;
  double train_seconds = 0.0;
};

inline double median(std::vector<double> xs) {
  if (xs.empty()) throw ConfigError("median of empty sample");
  std::sort(xs.begin(), xs.end());
  const std::size_t n = xs.size();
  return n % 2 == 1 ? xs[n / 2] : 0.5 * (xs[n / 2 - 1] + xs[n / 2]);
}

// Trains one model, then for each seed jointly samples the same pair twice
// with shared noise and differing condition ids: once under the insertion
// preset and once all-Self. Reports cross-branch MSE over the pair's
// unedited region. Sampling jobs are self-contained (seeded by job index
// alone), so the result is independent of worker scheduling.
inline AlignmentResult run_alignment_experiment(const AlignmentConfig& cfg) {
  if (cfg.seeds == 0) throw ConfigError("alignment experiment: seed count must be positive");
  const ToyModel model = build_model(cfg.model, derive_seed(cfg.seed, 0));
  const std::vector<SynthPair> data = synth_dataset(cfg.data, derive_seed(cfg.seed, 1));

  const auto t0 = std::chrono::steady_clock::now();
  TrainResult trained = train(model, data, cfg.train_steps, cfg.lr, derive_seed(cfg.seed, 2));
  AlignmentResult out;
  out.train_seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  out.loss_curve = std::move(trained.loss_curve);

  const SchedulePolicy insertion = preset("object_insertion_removal");
  const SchedulePolicy all_self = all_self_schedule();
  out.preset_mse.resize(cfg.seeds);
  out.self_mse.resize(cfg.seeds);

  const auto job = [&](std::size_t i) {
    const SynthPair& pair = data[i % data.size()];
    const std::uint64_t job_seed = derive_seed(cfg.seed, 3, i);
    const std::size_t sc = pair.src.src_cond, tc = pair.tar.tar_cond;
    const SampledPair a = sample_pair(trained.model, sc, tc, insertion, cfg.sample_steps,
                                      job_seed, true, cfg.data.dims);
    const SampledPair b = sample_pair(trained.model, sc, tc, all_self, cfg.sample_steps,
                                      job_seed, true, cfg.data.dims);
    out.preset_mse[i] = alignment_metric(a.src, a.tar, pair.tar.mask);
    out.self_mse[i] = alignment_metric(b.src, b.tar, pair.tar.mask);
  };

  std::size_t workers = cfg.workers;
  if (workers == 0) {
    workers = std::max<std::size_t>(1, std::thread::hardware_concurrency());
  }
  workers = std::min(workers, cfg.seeds);
  if (workers <= 1) {
    for (std::size_t i = 0; i < cfg.seeds; ++i) job(i);
  } else {
    std::atomic<std::size_t> next{0};
    std::vector<std::thread> pool;
    pool.reserve(workers);
    for (std::size_t w = 0; w < workers; ++w) {
      pool.emplace_back([&] {
        for (std::size_t i = next.fetch_add(1); i < cfg.seeds; i = next.fetch_add(1)) job(i);
      });
    }
    for (std::thread& th : pool) th.join();
  }

  out.preset_median = median(out.preset_mse);
  out.self_median = median(out.self_mse);
  out.preset_improves = out.preset_median < out.self_median;
  return out;
}

}  // namespace mcaforge
