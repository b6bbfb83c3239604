#pragma once

#include <cmath>
#include <cstdint>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <string>
#include <utility>
#include <vector>

#include "mcaforge/attention.hpp"
#include "mcaforge/clip.hpp"
#include "mcaforge/error.hpp"
#include "mcaforge/rng.hpp"
#include "mcaforge/schedule.hpp"
#include "mcaforge/synth.hpp"
#include "mcaforge/tape.hpp"
#include "mcaforge/tensor.hpp"
#include "mcaforge/tensor_io.hpp"

namespace mcaforge {

// Sinusoidal time features: sin/cos at octave-spaced frequencies.
inline constexpr std::size_t kTimeFeatures = 16;

struct ToyModelConfig {
  std::size_t layers = 4;
  std::size_t width = 64;
  std::size_t heads = 4;
  std::size_t channels = 8;
  std::size_t mlp_hidden = 128;
  std::size_t cond_vocab = 64;
  double layer_norm_eps = 1e-5;

  void validate() const {
    if (layers == 0) throw ConfigError("model: layer count must be positive");
    if (channels == 0) throw ConfigError("model: channel count must be positive");
    if (mlp_hidden == 0) throw ConfigError("model: mlp width must be positive");
    if (cond_vocab == 0) throw ConfigError("model: condition vocabulary must be positive");
    if (!(layer_norm_eps > 0.0)) throw ConfigError("model: layer_norm_eps must be positive");
    detail::check_mha(width, heads);
  }

  bool operator==(const ToyModelConfig&) const = default;
};

struct LayerParams {
  Tensor ln1_gain, ln1_bias;
  MhaWeights attn;
  Tensor ln2_gain, ln2_bias;
  Tensor mlp_w1, mlp_b1, mlp_w2, mlp_b2;
};

// Pre-norm transformer denoiser over latent clip tokens. Conditioning is a
// learned id embedding added to a projected time embedding, broadcast over
// tokens.
struct ToyModel {
  ToyModelConfig config;
  std::uint64_t seed = 0;  // initialization seed, kept for provenance
  Tensor in_w, in_b;
  Tensor cond_emb;
  Tensor time_w, time_b;
  std::vector<LayerParams> layers;
  Tensor final_gain, final_bias;
  Tensor out_w, out_b;
};

// Canonical parameter order. Checkpoint layout, the SGD update loop and
// tape lifting all iterate parameters through here, so they agree by
// construction. Must stay aligned with for_each_var below.
template <class Model, class Fn>
void for_each_param(Model& m, Fn&& fn) {
  fn("in_w", m.in_w);
  fn("in_b", m.in_b);
  fn("cond_emb", m.cond_emb);
  fn("time_w", m.time_w);
  fn("time_b", m.time_b);
  for (std::size_t i = 0; i < m.layers.size(); ++i) {
    auto& l = m.layers[i];
    const std::string p = "layer" + std::to_string(i) + ".";
    fn(p + "ln1_gain", l.ln1_gain);
    fn(p + "ln1_bias", l.ln1_bias);
    fn(p + "wq", l.attn.wq);
    fn(p + "wk", l.attn.wk);
    fn(p + "wv", l.attn.wv);
    fn(p + "wo", l.attn.wo);
    fn(p + "ln2_gain", l.ln2_gain);
    fn(p + "ln2_bias", l.ln2_bias);
    fn(p + "mlp_w1", l.mlp_w1);
    fn(p + "mlp_b1", l.mlp_b1);
    fn(p + "mlp_w2", l.mlp_w2);
    fn(p + "mlp_b2", l.mlp_b2);
  }
  fn("final_gain", m.final_gain);
  fn("final_bias", m.final_bias);
  fn("out_w", m.out_w);
  fn("out_b", m.out_b);
}

inline std::vector<std::pair<std::string, Tensor*>> param_list(ToyModel& m) {
  std::vector<std::pair<std::string, Tensor*>> out;
  for_each_param(m, [&](const std::string& name, Tensor& t) { out.emplace_back(name, &t); });
  return out;
}

inline std::vector<std::pair<std::string, const Tensor*>> param_list(const ToyModel& m) {
  std::vector<std::pair<std::string, const Tensor*>> out;
  for_each_param(m, [&](const std::string& name, const Tensor& t) { out.emplace_back(name, &t); });
  return out;
}

inline bool models_bit_equal(const ToyModel& a, const ToyModel& b) {
  if (!(a.config == b.config) || a.seed != b.seed) return false;
  const auto pa = param_list(a), pb = param_list(b);
  if (pa.size() != pb.size()) return false;
  for (std::size_t i = 0; i < pa.size(); ++i) {
    if (pa[i].first != pb[i].first || !bit_equal(*pa[i].second, *pb[i].second)) return false;
  }
  return true;
}

// Deterministic scaled-uniform initialization. Every parameter draws from
// its own stream keyed by its position in the canonical order, so adding a
// layer does not shift unrelated parameters within a fixed config.
inline ToyModel build_model(const ToyModelConfig& cfg, std::uint64_t seed) {
  cfg.validate();
  ToyModel m;
  m.config = cfg;
  m.seed = seed;
  m.in_w = Tensor({cfg.channels, cfg.width});
  m.in_b = Tensor({1, cfg.width});
  m.cond_emb = Tensor({cfg.cond_vocab, cfg.width});
  m.time_w = Tensor({kTimeFeatures, cfg.width});
  m.time_b = Tensor({1, cfg.width});
  m.layers.resize(cfg.layers);
  for (LayerParams& l : m.layers) {
    l.ln1_gain = Tensor({cfg.width});
    l.ln1_bias = Tensor({cfg.width});
    l.attn.wq = Tensor({cfg.width, cfg.width});
    l.attn.wk = Tensor({cfg.width, cfg.width});
    l.attn.wv = Tensor({cfg.width, cfg.width});
    l.attn.wo = Tensor({cfg.width, cfg.width});
    l.ln2_gain = Tensor({cfg.width});
    l.ln2_bias = Tensor({cfg.width});
    l.mlp_w1 = Tensor({cfg.width, cfg.mlp_hidden});
    l.mlp_b1 = Tensor({1, cfg.mlp_hidden});
    l.mlp_w2 = Tensor({cfg.mlp_hidden, cfg.width});
    l.mlp_b2 = Tensor({1, cfg.width});
  }
  m.final_gain = Tensor({cfg.width});
  m.final_bias = Tensor({cfg.width});
  m.out_w = Tensor({cfg.width, cfg.channels});
  m.out_b = Tensor({1, cfg.channels});

  std::size_t index = 0;
  for_each_param(m, [&](const std::string& name, Tensor& t) {
    SplitMix64 rng(derive_seed(seed, index++));
    if (name.ends_with("gain")) {
      for (std::size_t i = 0; i < t.numel(); ++i) t[i] = 1.0f;
    } else if (name.ends_with("bias") || name.ends_with("_b") || name.ends_with("_b1") ||
               name.ends_with("_b2")) {
      // zero-filled by construction
    } else {
      // cond_emb rows act as additive features of size width, so they scale
      // by the fan-out; matmul factors scale by fan-in (their row count).
      const double fan = name == "cond_emb" ? static_cast<double>(t.cols())
                                            : static_cast<double>(t.rows());
      const double bound = 1.0 / std::sqrt(fan);
      for (std::size_t i = 0; i < t.numel(); ++i)
        t[i] = static_cast<float>(rng.uniform(-bound, bound));
    }
  });
  return m;
}

// ---- tape lifting -----------------------------------------------------------

struct LayerVars {
  Var ln1_gain, ln1_bias;
  MhaWeightVars attn;
  Var ln2_gain, ln2_bias;
  Var mlp_w1, mlp_b1, mlp_w2, mlp_b2;
};

struct ModelVars {
  Var in_w, in_b, cond_emb, time_w, time_b;
  std::vector<LayerVars> layers;
  Var final_gain, final_bias, out_w, out_b;
  std::vector<Var> all;  // canonical order, aligned with param_list
};

// Mirror of for_each_param over the lifted handles; the two enumerations
// must visit corresponding fields in the same order.
template <class Fn>
void for_each_var(ModelVars& v, Fn&& fn) {
  fn(v.in_w);
  fn(v.in_b);
  fn(v.cond_emb);
  fn(v.time_w);
  fn(v.time_b);
  for (LayerVars& l : v.layers) {
    fn(l.ln1_gain);
    fn(l.ln1_bias);
    fn(l.attn.wq);
    fn(l.attn.wk);
    fn(l.attn.wv);
    fn(l.attn.wo);
    fn(l.ln2_gain);
    fn(l.ln2_bias);
    fn(l.mlp_w1);
    fn(l.mlp_b1);
    fn(l.mlp_w2);
    fn(l.mlp_b2);
  }
  fn(v.final_gain);
  fn(v.final_bias);
  fn(v.out_w);
  fn(v.out_b);
}

inline ModelVars lift(GradTape& t, const ToyModel& m, bool trainable) {
  ModelVars v;
  v.layers.resize(m.layers.size());
  for_each_param(m, [&](const std::string&, const Tensor& p) {
    v.all.push_back(t.leaf(p, trainable));
  });
  std::size_t i = 0;
  for_each_var(v, [&](Var& dst) { dst = v.all.at(i++); });
  if (i != v.all.size()) throw Error("lift: parameter enumeration mismatch");
  return v;
}

// ---- forward pass -----------------------------------------------------------

namespace detail {

inline Tensor time_feature_row(double time) {
  constexpr double kPi = 3.141592653589793;
  Tensor f({1, kTimeFeatures});
  double freq = kPi;
  for (std::size_t j = 0; j < kTimeFeatures / 2; ++j) {
    f[2 * j] = static_cast<float>(std::sin(freq * time));
    f[2 * j + 1] = static_cast<float>(std::cos(freq * time));
    freq *= 2.0;
  }
  return f;
}

inline Var conditioning_row(GradTape& t, const ModelVars& v, const ToyModelConfig& cfg,
                            std::size_t cond_id, double time) {
  if (cond_id >= cfg.cond_vocab) {
    throw ConfigError("condition id " + std::to_string(cond_id) + " outside vocabulary of " +
                      std::to_string(cfg.cond_vocab));
  }
  const Var emb = t.slice_rows(v.cond_emb, cond_id, cond_id + 1);
  const Var tf = t.constant(time_feature_row(time));
  return t.add(emb, t.add(t.matmul(tf, v.time_w), v.time_b));
}

inline Var embed_tokens(GradTape& t, const ModelVars& v, Var x, Var cond_row) {
  return t.add_row(t.add_row(t.matmul(x, v.in_w), v.in_b), cond_row);
}

inline Var mlp_block(GradTape& t, const LayerVars& l, Var h, double eps) {
  const Var a = t.layer_norm(h, l.ln2_gain, l.ln2_bias, eps);
  const Var u = t.gelu(t.add_row(t.matmul(a, l.mlp_w1), l.mlp_b1));
  return t.add(h, t.add_row(t.matmul(u, l.mlp_w2), l.mlp_b2));
}

inline Var output_head(GradTape& t, const ModelVars& v, Var h, double eps) {
  const Var a = t.layer_norm(h, v.final_gain, v.final_bias, eps);
  return t.add_row(t.matmul(a, v.out_w), v.out_b);
}

}  // namespace detail

// Velocity prediction for one branch; x is [tokens, channels].
inline Var forward_single(GradTape& t, const ModelVars& v, const ToyModelConfig& cfg, Var x,
                          std::size_t cond_id, double time) {
  Var h = detail::embed_tokens(t, v, x, detail::conditioning_row(t, v, cfg, cond_id, time));
  for (const LayerVars& l : v.layers) {
    const Var a = t.layer_norm(h, l.ln1_gain, l.ln1_bias, cfg.layer_norm_eps);
    h = t.add(h, multi_head_self(t, a, l.attn, cfg.heads));
    h = detail::mlp_block(t, l, h, cfg.layer_norm_eps);
  }
  return detail::output_head(t, v, h, cfg.layer_norm_eps);
}

struct PairVars {
  Var src, tar;
};

// Joint velocity prediction for both branches under per-layer variant
// assignments. With (Self, Self) at every layer each branch's node values
// equal those of forward_single on that branch alone.
inline PairVars forward_pair(GradTape& t, const ModelVars& v, const ToyModelConfig& cfg,
                             Var x_src, Var x_tar, std::size_t src_cond, std::size_t tar_cond,
                             double time,
                             const std::vector<std::pair<McaVariant, McaVariant>>& variants,
                             const McaOptions& opts = {}) {
  if (variants.size() != v.layers.size()) {
    throw ConfigError("forward_pair: expected one variant pair per layer");
  }
  Var hs =
      detail::embed_tokens(t, v, x_src, detail::conditioning_row(t, v, cfg, src_cond, time));
  Var ht =
      detail::embed_tokens(t, v, x_tar, detail::conditioning_row(t, v, cfg, tar_cond, time));
  for (std::size_t i = 0; i < v.layers.size(); ++i) {
    const LayerVars& l = v.layers[i];
    const Var as = t.layer_norm(hs, l.ln1_gain, l.ln1_bias, cfg.layer_norm_eps);
    const Var at = t.layer_norm(ht, l.ln1_gain, l.ln1_bias, cfg.layer_norm_eps);
    const MhaOutputVars o = multi_head_mca(t, as, at, l.attn, cfg.heads, variants[i].first,
                                           variants[i].second, opts);
    hs = t.add(hs, o.src);
    ht = t.add(ht, o.tar);
    hs = detail::mlp_block(t, l, hs, cfg.layer_norm_eps);
    ht = detail::mlp_block(t, l, ht, cfg.layer_norm_eps);
  }
  return {detail::output_head(t, v, hs, cfg.layer_norm_eps),
          detail::output_head(t, v, ht, cfg.layer_norm_eps)};
}

// ---- training ---------------------------------------------------------------

struct TrainResult {
  ToyModel model;
  std::vector<double> loss_curve;
};

// Flow-matching trainer: draw a scene, a time t and Gaussian noise x0, form
// x_t = (1-t) x0 + t x1, and regress the prediction onto the velocity
// x1 - x0 with plain fixed-rate gradient descent. Per-step draws come from
// an independent stream keyed by the step index (order: scene, time,
// noise), so the trajectory is reproducible. Single-threaded.
inline TrainResult train(ToyModel model, const std::vector<SynthPair>& data, std::size_t steps,
                         double lr, std::uint64_t seed) {
  model.config.validate();
  if (data.empty()) throw ConfigError("train: empty dataset");
  if (!(lr > 0.0) || !std::isfinite(lr)) throw ConfigError("train: learning rate must be positive");

  struct Sample {
    const LatentClip* clip;
    std::size_t cond;
  };
  std::vector<Sample> samples;
  samples.reserve(2 * data.size());
  for (const SynthPair& p : data) {
    samples.push_back({&p.src.clip, p.src.src_cond});
    samples.push_back({&p.tar.clip, p.tar.tar_cond});
  }
  for (const Sample& s : samples) {
    s.clip->validate();
    if (s.clip->channels != model.config.channels) {
      throw ShapeError("train: clip channels " + std::to_string(s.clip->channels) +
                       " do not match model channels " + std::to_string(model.config.channels));
    }
    if (s.cond >= model.config.cond_vocab) {
      throw ConfigError("train: condition id outside vocabulary");
    }
  }

  TrainResult out;
  out.loss_curve.reserve(steps);
  auto params = param_list(model);
  for (std::size_t step = 0; step < steps; ++step) {
    SplitMix64 rng(derive_seed(seed, step));
    const Sample& s = samples[rng.below(samples.size())];
    const double tt = rng.uniform();
    const Tensor& x1 = s.clip->values;
    Tensor x0(x1.shape()), xt(x1.shape()), vel(x1.shape());
    for (std::size_t i = 0; i < x1.numel(); ++i) {
      const double n = rng.normal();
      x0[i] = static_cast<float>(n);
      const double n32 = static_cast<double>(x0[i]);
      const double d = static_cast<double>(x1[i]);
      xt[i] = static_cast<float>((1.0 - tt) * n32 + tt * d);
      vel[i] = static_cast<float>(d - n32);
    }

    GradTape tape;
    const ModelVars vars = lift(tape, model, true);
    const Var pred = forward_single(tape, vars, model.config, tape.constant(xt), s.cond, tt);
    const Var loss = tape.mse(pred, tape.constant(vel));
    const double loss_value = tape.scalar(loss);
    if (!std::isfinite(loss_value)) {
      throw Error("training diverged at step " + std::to_string(step));
    }
    out.loss_curve.push_back(loss_value);

    tape.backward(loss);
    for (std::size_t i = 0; i < params.size(); ++i) {
      Tensor& p = *params[i].second;
      const std::vector<double>& g = tape.grad64(vars.all[i]);
      for (std::size_t j = 0; j < p.numel(); ++j) {
        p[j] = static_cast<float>(static_cast<double>(p[j]) - lr * g[j]);
      }
    }
  }
  out.model = std::move(model);
  return out;
}

// ---- sampling ---------------------------------------------------------------

inline Tensor make_noise(const ClipDims& dims, std::uint64_t seed) {
  Tensor x({dims.tokens(), dims.channels});
  SplitMix64 rng(seed);
  for (std::size_t i = 0; i < x.numel(); ++i) x[i] = static_cast<float>(rng.normal());
  return x;
}

namespace detail {

inline void check_finite_latents(const Tensor& x, std::size_t step) {
  for (std::size_t i = 0; i < x.numel(); ++i) {
    if (!std::isfinite(x[i])) {
      throw Error("non-finite latents at sampling step " + std::to_string(step));
    }
  }
}

inline void check_sampling_args(const ToyModel& model, std::size_t num_steps,
                                const ClipDims& dims) {
  model.config.validate();
  if (num_steps == 0) throw ConfigError("sampling: step count must be positive");
  if (dims.tokens() == 0) throw ConfigError("sampling: clip has no tokens");
  if (dims.channels != model.config.channels) {
    throw ShapeError("sampling: clip channels " + std::to_string(dims.channels) +
                     " do not match model channels " + std::to_string(model.config.channels));
  }
}

}  // namespace detail

struct SampledPair {
  LatentClip src, tar;
};

// Joint Euler sampling of a source/target pair. Per step s and layer l each
// branch resolves its variant from the schedule; both branches advance in
// lock-step inside one forward evaluation. Noise streams derive from the
// seed alone ((seed, 0) for source, (seed, 1) for target when not shared),
// so output bits depend only on (model, conditions, schedule, steps, seed).
inline SampledPair sample_pair(const ToyModel& model, std::size_t src_cond, std::size_t tar_cond,
                               const SchedulePolicy& schedule, std::size_t num_steps,
                               std::uint64_t seed, bool shared_noise = true,
                               const ClipDims& dims = ClipDims{}, const McaOptions& opts = {}) {
  detail::check_sampling_args(model, num_steps, dims);
  validate_schedule(schedule);
  const std::size_t layer_count = model.config.layers;

  Tensor x_src = make_noise(dims, derive_seed(seed, 0));
  Tensor x_tar = shared_noise ? x_src : make_noise(dims, derive_seed(seed, 1));
  const double dt = 1.0 / static_cast<double>(num_steps);
  std::vector<std::pair<McaVariant, McaVariant>> variants(layer_count);
  for (std::size_t s = 0; s < num_steps; ++s) {
    const double tt = static_cast<double>(s) * dt;
    for (std::size_t l = 0; l < layer_count; ++l) {
      variants[l] = {resolve(schedule, BranchRole::Src, l, s, layer_count, num_steps),
                     resolve(schedule, BranchRole::Tar, l, s, layer_count, num_steps)};
    }
    GradTape tape;
    const ModelVars vars = lift(tape, model, false);
    const PairVars pred =
        forward_pair(tape, vars, model.config, tape.constant(x_src), tape.constant(x_tar),
                     src_cond, tar_cond, tt, variants, opts);
    x_src = add(x_src, scale(tape.value(pred.src), dt));
    x_tar = add(x_tar, scale(tape.value(pred.tar), dt));
    detail::check_finite_latents(x_src, s);
    detail::check_finite_latents(x_tar, s);
  }
  return {make_clip(dims, std::move(x_src)), make_clip(dims, std::move(x_tar))};
}

// Independent single-branch sampling; with an all-Self schedule and the
// matching noise stream ((seed, 0) or (seed, 1)) it reproduces that branch
// of sample_pair bit for bit.
inline LatentClip sample_single(const ToyModel& model, std::size_t cond, std::size_t num_steps,
                                std::uint64_t noise_seed, const ClipDims& dims = ClipDims{}) {
  detail::check_sampling_args(model, num_steps, dims);
  Tensor x = make_noise(dims, noise_seed);
  const double dt = 1.0 / static_cast<double>(num_steps);
  for (std::size_t s = 0; s < num_steps; ++s) {
    const double tt = static_cast<double>(s) * dt;
    GradTape tape;
    const ModelVars vars = lift(tape, model, false);
    const Var pred = forward_single(tape, vars, model.config, tape.constant(x), cond, tt);
    x = add(x, scale(tape.value(pred), dt));
    detail::check_finite_latents(x, s);
  }
  return make_clip(dims, std::move(x));
}

// ---- checkpointing ----------------------------------------------------------

// A checkpoint is a directory holding one .mcat file per parameter plus a
// config.txt of key=value lines.
inline void save_model(const std::filesystem::path& dir, const ToyModel& model) {
  std::error_code ec;
  std::filesystem::create_directories(dir, ec);
  if (ec) throw IoError("cannot create checkpoint directory " + dir.string());
  const ToyModelConfig& c = model.config;
  std::ofstream out(dir / "config.txt", std::ios::binary);
  if (!out) throw IoError("cannot write " + (dir / "config.txt").string());
  out << "layers=" << c.layers << "\n"
      << "width=" << c.width << "\n"
      << "heads=" << c.heads << "\n"
      << "channels=" << c.channels << "\n"
      << "mlp_hidden=" << c.mlp_hidden << "\n"
      << "cond_vocab=" << c.cond_vocab << "\n"
      << "layer_norm_eps=" << detail::format_fraction(c.layer_norm_eps) << "\n"
      << "seed=" << model.seed << "\n";
  if (!out.flush()) throw IoError("failed writing " + (dir / "config.txt").string());
  for (const auto& [name, tensor] : param_list(model)) {
    write_mcat(dir / (name + ".mcat"), *tensor);
  }
}

inline ToyModel load_model(const std::filesystem::path& dir) {
  const std::filesystem::path cfg_path = dir / "config.txt";
  std::ifstream in(cfg_path, std::ios::binary);
  if (!in) throw IoError("cannot open " + cfg_path.string());

  ToyModelConfig cfg;
  std::uint64_t seed = 0;
  bool have[8] = {};
  std::string line;
  std::size_t line_no = 0;
  const auto parse_count = [&](const std::string& text) {
    char* end = nullptr;
    const unsigned long long v = std::strtoull(text.c_str(), &end, 10);
    if (end != text.c_str() + text.size() || text.empty()) {
      throw ParseError(line_no, "expected an unsigned integer, got '" + text + "'");
    }
    return static_cast<std::uint64_t>(v);
  };
  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty()) continue;
    const std::size_t eq = line.find('=');
    if (eq == std::string::npos) throw ParseError(line_no, "expected key=value");
    const std::string key = line.substr(0, eq), val = line.substr(eq + 1);
    if (key == "layers") cfg.layers = parse_count(val), have[0] = true;
    else if (key == "width") cfg.width = parse_count(val), have[1] = true;
    else if (key == "heads") cfg.heads = parse_count(val), have[2] = true;
    else if (key == "channels") cfg.channels = parse_count(val), have[3] = true;
    else if (key == "mlp_hidden") cfg.mlp_hidden = parse_count(val), have[4] = true;
    else if (key == "cond_vocab") cfg.cond_vocab = parse_count(val), have[5] = true;
    else if (key == "layer_norm_eps") {
      char* end = nullptr;
      cfg.layer_norm_eps = std::strtod(val.c_str(), &end);
      if (end != val.c_str() + val.size() || val.empty()) {
        throw ParseError(line_no, "expected a number, got '" + val + "'");
      }
      have[6] = true;
    } else if (key == "seed") seed = parse_count(val), have[7] = true;
    else throw ParseError(line_no, "unknown key '" + key + "'");
  }
  for (bool h : have) {
    if (!h) throw IoError("incomplete checkpoint config in " + cfg_path.string());
  }

  ToyModel model = build_model(cfg, seed);
  for (auto& [name, tensor] : param_list(model)) {
    Tensor loaded = read_mcat(dir / (name + ".mcat"));
    if (loaded.shape() != tensor->shape()) {
      throw IoError("checkpoint tensor " + name + " has shape (" + loaded.shape_string() +
                    "), expected (" + tensor->shape_string() + ")");
    }
    *tensor = std::move(loaded);
  }
  return model;
}

}  // namespace mcaforge
