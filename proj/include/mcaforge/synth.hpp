#pragma once

#include <cstddef>
#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "mcaforge/clip.hpp"
#include "mcaforge/error.hpp"
#include "mcaforge/rng.hpp"
#include "mcaforge/schedule.hpp"

namespace mcaforge {

// One branch of a synthetic editing pair. The mask and onset are shared
// pair-level facts, duplicated into both scenes for convenience.
struct SynthScene {
  LatentClip clip;
  EditMask mask;
  std::size_t onset = 0;
  std::string task;
  std::size_t src_cond = 0;
  std::size_t tar_cond = 0;
};

struct SynthPair {
  SynthScene src;
  SynthScene tar;
  std::string task;
};

struct SynthConfig {
  std::size_t pairs = 8;
  ClipDims dims;  // defaults: 8 frames, 8x8 grid, 8 channels
  std::vector<std::string> tasks = preset_tasks();  // assigned round-robin
};

namespace detail {

// A moving rectangle: top-left trajectory with per-axis velocity, wrapping
// at the grid edges so it never leaves the frame.
struct Sprite {
  long y0 = 0, x0 = 0;
  long vy = 0, vx = 0;
  std::size_t h = 2, w = 2;
  std::vector<float> color;  // one value per channel

  bool covers(std::size_t f, std::size_t y, std::size_t x, const ClipDims& d) const {
    const long gy = static_cast<long>(d.height), gx = static_cast<long>(d.width);
    const long top = ((y0 + vy * static_cast<long>(f)) % gy + gy) % gy;
    const long left = ((x0 + vx * static_cast<long>(f)) % gx + gx) % gx;
    const long dy = (static_cast<long>(y) - top + gy) % gy;
    const long dx = (static_cast<long>(x) - left + gx) % gx;
    return dy < static_cast<long>(h) && dx < static_cast<long>(w);
  }
};

struct SceneSpec {
  std::vector<float> background;  // per (y, x, channel), static over time
  Sprite subject;
  Sprite extra;        // secondary object for insertion/modification tasks
  bool has_extra = false;

  // Branch-specific deviations, active from the onset frame on.
  bool swap_background = false;
  std::vector<float> background2;
  bool recolor_subject = false;
  std::vector<float> subject_color2;
  bool recolor_extra = false;
  std::vector<float> extra_color2;
  bool redirect_subject = false;
  long vy2 = 0, vx2 = 0;
  bool drop_extra_before_onset = false;  // extra exists only from onset on
  bool hide_extra = false;               // extra never shown in this branch
};

inline LatentClip render_scene(const ClipDims& d, const SceneSpec& s, std::size_t onset) {
  Tensor values({d.tokens(), d.channels});
  Sprite subject_late = s.subject;
  if (s.redirect_subject) {
    // The redirected branch keeps the pre-onset trajectory, then continues
    // from the onset position with the new velocity.
    subject_late.y0 = s.subject.y0 + s.subject.vy * static_cast<long>(onset) -
                      s.vy2 * static_cast<long>(onset);
    subject_late.x0 = s.subject.x0 + s.subject.vx * static_cast<long>(onset) -
                      s.vx2 * static_cast<long>(onset);
    subject_late.vy = s.vy2;
    subject_late.vx = s.vx2;
  }
  for (std::size_t f = 0; f < d.frames; ++f) {
    const bool after = f >= onset;
    const Sprite& subj = (s.redirect_subject && after) ? subject_late : s.subject;
    const std::vector<float>& bg =
        (s.swap_background && after) ? s.background2 : s.background;
    const std::vector<float>& subj_color =
        (s.recolor_subject && after) ? s.subject_color2 : s.subject.color;
    const bool extra_on =
        s.has_extra && !s.hide_extra && (!s.drop_extra_before_onset || after);
    const std::vector<float>& extra_color =
        (s.recolor_extra && after) ? s.extra_color2 : s.extra.color;
    for (std::size_t y = 0; y < d.height; ++y) {
      for (std::size_t x = 0; x < d.width; ++x) {
        const std::size_t tok = (f * d.height + y) * d.width + x;
        for (std::size_t c = 0; c < d.channels; ++c) {
          float v = bg[(y * d.width + x) * d.channels + c];
          if (subj.covers(f, y, x, d)) v = subj_color[c];
          if (extra_on && s.extra.covers(f, y, x, d)) v = extra_color[c];
          values.at(tok, c) = v;
        }
      }
    }
  }
  LatentClip clip{d.frames, d.height, d.width, d.channels, std::move(values)};
  return clip;
}

inline std::vector<float> random_field(SplitMix64& rng, const ClipDims& d, double lo, double hi) {
  std::vector<float> field(d.height * d.width * d.channels);
  for (float& v : field) v = static_cast<float>(rng.uniform(lo, hi));
  return field;
}

inline std::vector<float> random_color(SplitMix64& rng, std::size_t channels, double lo,
                                       double hi) {
  std::vector<float> c(channels);
  for (float& v : c) v = static_cast<float>(rng.uniform(lo, hi));
  return c;
}

}  // namespace detail

// Builds one aligned pair for a task: identical scenes except for the edit,
// which starts at a uniformly drawn onset frame. The mask is the exact
// per-token difference set, so everything outside it is bit-identical.
inline SynthPair synth_pair(const ClipDims& dims, const std::string& task, std::uint64_t seed,
                            std::size_t src_cond, std::size_t tar_cond) {
  if (dims.frames == 0 || dims.height < 2 || dims.width < 2 || dims.channels == 0) {
    throw ConfigError("synth_pair: degenerate clip dimensions");
  }
  SplitMix64 rng(seed);

  detail::SceneSpec base;
  base.background = detail::random_field(rng, dims, -0.6, 0.0);
  base.subject.h = 2 + rng.below(2);
  base.subject.w = 2 + rng.below(2);
  base.subject.y0 = static_cast<long>(rng.below(dims.height));
  base.subject.x0 = static_cast<long>(rng.below(dims.width));
  base.subject.vy = static_cast<long>(rng.below(3)) - 1;
  base.subject.vx = base.subject.vy == 0 ? 1 + static_cast<long>(rng.below(2)) * -2
                                         : static_cast<long>(rng.below(3)) - 1;
  base.subject.color = detail::random_color(rng, dims.channels, 0.6, 1.4);
  base.extra.h = 2;
  base.extra.w = 2;
  base.extra.y0 = static_cast<long>(rng.below(dims.height));
  base.extra.x0 = static_cast<long>(rng.below(dims.width));
  base.extra.vy = static_cast<long>(rng.below(3)) - 1;
  base.extra.vx = static_cast<long>(rng.below(3)) - 1;
  base.extra.color = detail::random_color(rng, dims.channels, -1.4, -0.6);

  std::size_t onset = rng.below(dims.frames);

  detail::SceneSpec src = base, tar = base;
  if (task == "object_insertion_removal") {
    src.has_extra = tar.has_extra = true;
    const bool removal = rng.below(2) == 1;
    // Insertion: the object exists only in the target from the onset on.
    // Removal: it exists only in the source from the onset on.
    (removal ? tar : src).hide_extra = true;
    (removal ? src : tar).drop_extra_before_onset = true;
  } else if (task == "local_modification") {
    src.has_extra = tar.has_extra = true;
    src.drop_extra_before_onset = tar.drop_extra_before_onset = false;
    tar.recolor_extra = true;
    tar.extra_color2 = detail::random_color(rng, dims.channels, 1.6, 2.4);
  } else if (task == "background_replacement") {
    tar.swap_background = true;
    tar.background2 = detail::random_field(rng, dims, 0.1, 0.5);
  } else if (task == "color_material") {
    tar.recolor_subject = true;
    tar.subject_color2 = detail::random_color(rng, dims.channels, -2.4, -1.6);
  } else if (task == "motion_viewpoint") {
    // Need at least one frame after the onset where trajectories differ.
    if (dims.frames > 1 && onset >= dims.frames - 1) onset = dims.frames - 2;
    tar.redirect_subject = true;
    tar.vy2 = base.subject.vy == 0 ? 1 : -base.subject.vy;
    tar.vx2 = -base.subject.vx;
  } else {
    throw ConfigError("synth_pair: unknown task '" + task + "'");
  }

  SynthPair pair;
  pair.task = task;
  pair.src.clip = detail::render_scene(dims, src, onset);
  pair.tar.clip = detail::render_scene(dims, tar, onset);

  EditMask mask(dims.tokens(), 0);
  for (std::size_t tok = 0; tok < dims.tokens(); ++tok) {
    for (std::size_t c = 0; c < dims.channels; ++c) {
      if (pair.src.clip.values.at(tok, c) != pair.tar.clip.values.at(tok, c)) {
        mask[tok] = 1;
        break;
      }
    }
  }

  for (SynthScene* s : {&pair.src, &pair.tar}) {
    s->mask = mask;
    s->onset = onset;
    s->task = task;
    s->src_cond = src_cond;
    s->tar_cond = tar_cond;
  }
  return pair;
}

// Round-robin task assignment; condition ids 2i (source) and 2i+1 (target).
inline std::vector<SynthPair> synth_dataset(const SynthConfig& cfg, std::uint64_t seed) {
  if (cfg.pairs == 0) throw ConfigError("synth_dataset: pair count must be positive");
  if (cfg.tasks.empty()) throw ConfigError("synth_dataset: no tasks configured");
  std::vector<SynthPair> out;
  out.reserve(cfg.pairs);
  for (std::size_t i = 0; i < cfg.pairs; ++i) {
    const std::string& task = cfg.tasks[i % cfg.tasks.size()];
    out.push_back(synth_pair(cfg.dims, task, derive_seed(seed, i), 2 * i, 2 * i + 1));
  }
  return out;
}

}  // namespace mcaforge
