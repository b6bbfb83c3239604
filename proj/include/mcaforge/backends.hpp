#pragma once

#include <chrono>
#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "httplib.h"
#include "json.hpp"

#include "mcaforge/clip.hpp"
#include "mcaforge/denoiser.hpp"
#include "mcaforge/error.hpp"
#include "mcaforge/manifest.hpp"
#include "mcaforge/rng.hpp"
#include "mcaforge/schedule.hpp"
#include "mcaforge/synth.hpp"
#include "mcaforge/tensor_io.hpp"

namespace mcaforge {

// Wire-level request/reply types. HTTP backends serialize exactly these
// fields; mock backends are pure functions of them.
struct CaptionRequest {
  std::vector<std::string> keywords;
  std::string task;
  std::uint64_t seed = 0;
};

struct CaptionReply {
  std::string source_prompt;
  std::string target_prompt;
};

struct GeneratePairRequest {
  CaptionReply prompts;
  std::string task;
  std::string schedule_name;
  std::uint64_t seed = 0;
};

struct GeneratePairReply {
  std::string src_ref;
  std::string tar_ref;
  std::size_t onset = 0;
};

struct InstructRequest {
  CaptionReply prompts;
  std::string task;
  std::size_t onset = 0;
};

struct VqaRequest {
  std::string sample_ref;
  std::string question;
};

struct VqaReply {
  bool yes = false;
  double confidence = 0.0;
};

class TextBackend {
 public:
  virtual ~TextBackend() = default;
  virtual CaptionReply caption(const CaptionRequest& req) = 0;
  virtual std::string version() const = 0;
};

class GeneratorBackend {
 public:
  virtual ~GeneratorBackend() = default;
  virtual GeneratePairReply generate_pair(const GeneratePairRequest& req) = 0;
  virtual std::string version() const = 0;
};

class InstructBackend {
 public:
  virtual ~InstructBackend() = default;
  virtual Instructions instruct(const InstructRequest& req) = 0;
  virtual std::string version() const = 0;
};

class JudgeBackend {
 public:
  virtual ~JudgeBackend() = default;
  virtual VqaReply vqa(const VqaRequest& req) = 0;
  virtual std::string version() const = 0;
};

namespace detail {

inline std::string hex16(std::uint64_t v) {
  static const char* digits = "0123456789abcdef";
  std::string s(16, '0');
  for (int i = 15; i >= 0; --i) {
    s[static_cast<std::size_t>(i)] = digits[v & 0xf];
    v >>= 4;
  }
  return s;
}

inline std::string join_keywords(const std::vector<std::string>& kw) {
  std::string out;
  for (std::size_t i = 0; i < kw.size(); ++i) {
    if (i > 0) out += (i + 1 == kw.size()) ? " and " : ", ";
    out += kw[i];
  }
  return out;
}

}  // namespace detail

// Deterministic caption pair: a scene sentence built from the keywords plus
// a task-specific edit clause. Template choices are seed-driven, so a
// spread of seeds exercises several templates per task.
class MockTextBackend : public TextBackend {
 public:
  CaptionReply caption(const CaptionRequest& req) override {
    if (req.keywords.empty()) throw ConfigError("caption: keyword list is empty");
    SplitMix64 rng(derive_seed(req.seed, fnv1a(req.task)));
    const std::string subject = detail::join_keywords(req.keywords);
    static const std::vector<std::string> heads = {
        "a video of ", "footage showing ", "a short clip of "};
    static const std::vector<std::string> tails = {
        " in a quiet scene", " from a fixed camera", " on a bright day"};
    const std::string scene =
        heads[rng.below(heads.size())] + subject + tails[rng.below(tails.size())];
    const auto& edits = edit_clauses(req.task);
    return {scene, scene + edits[rng.below(edits.size())]};
  }

  std::string version() const override { return "mock-text/1"; }

 private:
  static const std::vector<std::string>& edit_clauses(const std::string& task) {
    static const std::vector<std::string> insertion = {
        " with a new object appearing partway through",
        " where an object vanishes partway through"};
    static const std::vector<std::string> local = {
        " with one region subtly altered", " where a small detail changes"};
    static const std::vector<std::string> background = {
        " with the backdrop swapped for a new setting",
        " where the surroundings become a different place"};
    static const std::vector<std::string> color = {
        " with the subject recolored", " where the subject's material changes"};
    static const std::vector<std::string> motion = {
        " with the camera path altered", " viewed from a shifted vantage point"};
    static const std::vector<std::string> generic = {
        " with the requested edit applied", " after the requested edit"};
    if (task == "object_insertion_removal") return insertion;
    if (task == "local_modification") return local;
    if (task == "background_replacement") return background;
    if (task == "color_material") return color;
    if (task == "motion_viewpoint") return motion;
    return generic;
  }
};

// Deterministic instruction triple. The three forms nest, so the length
// ordering short < long < long_dense holds by construction.
class MockInstructBackend : public InstructBackend {
 public:
  Instructions instruct(const InstructRequest& req) override {
    const std::string verb = imperative(req.task);
    Instructions out;
    out.short_form = verb + ".";
    out.long_form = verb + ", starting at frame " + std::to_string(req.onset) +
                    " and keeping everything else unchanged.";
    out.long_dense = out.long_form + " The source shows: " + req.prompts.source_prompt +
                     ". The result shows: " + req.prompts.target_prompt +
                     ". Every region outside the edit stays identical to the source.";
    return out;
  }

  std::string version() const override { return "mock-instruct/1"; }

 private:
  static std::string imperative(const std::string& task) {
    if (task == "object_insertion_removal") return "Add or remove the object";
    if (task == "local_modification") return "Modify the highlighted region";
    if (task == "background_replacement") return "Replace the background";
    if (task == "color_material") return "Change the subject's color and material";
    if (task == "motion_viewpoint") return "Change the motion and viewpoint";
    return "Apply the " + task + " edit";
  }
};

// Deterministic yes/no judge keyed by a hash of the request. One question
// in deny_modulus comes back "no"; zero disables denials entirely.
class MockJudgeBackend : public JudgeBackend {
 public:
  explicit MockJudgeBackend(std::uint64_t deny_modulus = 16) : deny_modulus_(deny_modulus) {}

  VqaReply vqa(const VqaRequest& req) override {
    const std::uint64_t h = fnv1a(req.question, fnv1a(req.sample_ref));
    const bool yes = deny_modulus_ == 0 || (h % deny_modulus_) != 0;
    const double spread = static_cast<double>((h >> 16) % 40) / 100.0;
    return {yes, (yes ? 0.6 : 0.2) + spread};
  }

  std::string version() const override { return "mock-judge/1"; }

 private:
  std::uint64_t deny_modulus_;
};

// Replays a fixed answer sequence, cycling. For exact-threshold tests.
class ScriptedJudgeBackend : public JudgeBackend {
 public:
  explicit ScriptedJudgeBackend(std::vector<bool> answers) : answers_(std::move(answers)) {
    if (answers_.empty()) throw ConfigError("scripted judge: empty answer list");
  }

  VqaReply vqa(const VqaRequest&) override {
    const bool yes = answers_[next_++ % answers_.size()];
    return {yes, yes ? 0.9 : 0.1};
  }

  std::string version() const override { return "scripted-judge/1"; }

 private:
  std::vector<bool> answers_;
  std::size_t next_ = 0;
};

// Synthesizes an aligned pair directly from the scene renderer and writes
// src/tar clips plus the exact edit mask next to them. File names are
// keyed by the request seed, so reruns produce identical bytes.
class MockGeneratorBackend : public GeneratorBackend {
 public:
  MockGeneratorBackend(std::filesystem::path root, const ClipDims& dims)
      : root_(std::move(root)), dims_(dims) {
    std::filesystem::create_directories(root_ / "clips");
  }

  GeneratePairReply generate_pair(const GeneratePairRequest& req) override {
    const SynthPair pair = synth_pair(dims_, req.task, req.seed, 0, 1);
    const std::string stem = "clips/pair_" + detail::hex16(req.seed);
    write_mcat(root_ / (stem + ".src.mcat"), pair.src.clip.values);
    write_mcat(root_ / (stem + ".tar.mcat"), pair.tar.clip.values);
    Tensor mask({pair.src.mask.size()});
    for (std::size_t i = 0; i < pair.src.mask.size(); ++i) {
      mask.data()[i] = pair.src.mask[i] ? 1.0f : 0.0f;
    }
    write_mcat(root_ / (stem + ".mask.mcat"), mask);
    return {stem + ".src.mcat", stem + ".tar.mcat", pair.src.onset};
  }

  std::string version() const override { return "mock-generator/1"; }

 private:
  std::filesystem::path root_;
  ClipDims dims_;
};

// Samples a pair from a trained (or fresh) toy denoiser under the named
// task schedule. Conditioning ids and the reported onset come from a
// request-seed stream; the sampler only yields latents, not an onset.
class ToyGeneratorBackend : public GeneratorBackend {
 public:
  ToyGeneratorBackend(std::filesystem::path root, ToyModel model, const ClipDims& dims,
                      std::size_t sample_steps, bool shared_noise = true)
      : root_(std::move(root)),
        model_(std::move(model)),
        dims_(dims),
        sample_steps_(sample_steps),
        shared_noise_(shared_noise) {
    std::filesystem::create_directories(root_ / "clips");
  }

  GeneratePairReply generate_pair(const GeneratePairRequest& req) override {
    const SchedulePolicy policy = preset(req.schedule_name);
    SplitMix64 rng(derive_seed(req.seed, 2));
    const std::size_t vocab = model_.config.cond_vocab;
    const std::size_t src_cond = rng.below(vocab);
    std::size_t tar_cond = rng.below(vocab);
    if (tar_cond == src_cond) tar_cond = (tar_cond + 1) % vocab;
    const std::size_t onset = rng.below(dims_.frames);
    const SampledPair out = sample_pair(model_, src_cond, tar_cond, policy, sample_steps_,
                                        req.seed, shared_noise_, dims_);
    const std::string stem = "clips/pair_" + detail::hex16(req.seed);
    write_mcat(root_ / (stem + ".src.mcat"), out.src.values);
    write_mcat(root_ / (stem + ".tar.mcat"), out.tar.values);
    return {stem + ".src.mcat", stem + ".tar.mcat", onset};
  }

  std::string version() const override { return "toy-generator/1"; }

 private:
  std::filesystem::path root_;
  ToyModel model_;
  ClipDims dims_;
  std::size_t sample_steps_;
  bool shared_noise_;
};

// HTTP plumbing shared by all remote backends.
struct HttpBackendConfig {
  std::string host = "127.0.0.1";
  int port = 8080;
  int timeout_ms = 2000;
  int retries = 2;  // extra attempts after the first

  std::string label() const { return "http://" + host + ":" + std::to_string(port); }
};

namespace detail {

inline nlohmann::ordered_json post_json(const HttpBackendConfig& cfg, const std::string& path,
                                        const nlohmann::ordered_json& body) {
  std::string last_error = "no attempt made";
  for (int attempt = 0; attempt <= cfg.retries; ++attempt) {
    httplib::Client client(cfg.host, cfg.port);
    client.set_connection_timeout(std::chrono::milliseconds(cfg.timeout_ms));
    client.set_read_timeout(std::chrono::milliseconds(cfg.timeout_ms));
    client.set_write_timeout(std::chrono::milliseconds(cfg.timeout_ms));
    auto res = client.Post(path, body.dump(), "application/json");
    if (!res) {
      last_error = "transport: " + httplib::to_string(res.error());
      continue;
    }
    if (res->status != 200) {
      last_error = "status " + std::to_string(res->status);
      continue;
    }
    try {
      return nlohmann::ordered_json::parse(res->body);
    } catch (const nlohmann::json::exception& e) {
      last_error = std::string("bad reply json: ") + e.what();
    }
  }
  throw BackendError("POST " + path + " failed after " + std::to_string(cfg.retries + 1) +
                     " attempts (" + last_error + ")");
}

template <class T>
T reply_field(const nlohmann::ordered_json& j, const char* key, const char* path) {
  auto it = j.find(key);
  if (it == j.end()) {
    throw BackendError(std::string(path) + " reply missing field '" + key + "'");
  }
  try {
    return it->get<T>();
  } catch (const nlohmann::json::exception& e) {
    throw BackendError(std::string(path) + " reply field '" + key + "': " + e.what());
  }
}

inline nlohmann::ordered_json prompts_json(const CaptionReply& prompts) {
  nlohmann::ordered_json p;
  p["source_prompt"] = prompts.source_prompt;
  p["target_prompt"] = prompts.target_prompt;
  return p;
}

}  // namespace detail

class HttpTextBackend : public TextBackend {
 public:
  explicit HttpTextBackend(HttpBackendConfig cfg) : cfg_(std::move(cfg)) {}

  CaptionReply caption(const CaptionRequest& req) override {
    if (req.keywords.empty()) throw ConfigError("caption: keyword list is empty");
    nlohmann::ordered_json body;
    body["keywords"] = req.keywords;
    body["task"] = req.task;
    body["seed"] = req.seed;
    const auto j = detail::post_json(cfg_, "/v1/caption", body);
    return {detail::reply_field<std::string>(j, "source_prompt", "/v1/caption"),
            detail::reply_field<std::string>(j, "target_prompt", "/v1/caption")};
  }

  std::string version() const override { return cfg_.label() + "/v1/caption"; }

 private:
  HttpBackendConfig cfg_;
};

class HttpGeneratorBackend : public GeneratorBackend {
 public:
  explicit HttpGeneratorBackend(HttpBackendConfig cfg) : cfg_(std::move(cfg)) {}

  GeneratePairReply generate_pair(const GeneratePairRequest& req) override {
    nlohmann::ordered_json body;
    body["prompts"] = detail::prompts_json(req.prompts);
    body["task"] = req.task;
    body["schedule_name"] = req.schedule_name;
    body["seed"] = req.seed;
    const auto j = detail::post_json(cfg_, "/v1/generate_pair", body);
    return {detail::reply_field<std::string>(j, "src_ref", "/v1/generate_pair"),
            detail::reply_field<std::string>(j, "tar_ref", "/v1/generate_pair"),
            detail::reply_field<std::size_t>(j, "onset", "/v1/generate_pair")};
  }

  std::string version() const override { return cfg_.label() + "/v1/generate_pair"; }

 private:
  HttpBackendConfig cfg_;
};

class HttpInstructBackend : public InstructBackend {
 public:
  explicit HttpInstructBackend(HttpBackendConfig cfg) : cfg_(std::move(cfg)) {}

  Instructions instruct(const InstructRequest& req) override {
    nlohmann::ordered_json body;
    body["prompts"] = detail::prompts_json(req.prompts);
    body["task"] = req.task;
    body["onset"] = req.onset;
    const auto j = detail::post_json(cfg_, "/v1/instruct", body);
    return {detail::reply_field<std::string>(j, "short", "/v1/instruct"),
            detail::reply_field<std::string>(j, "long", "/v1/instruct"),
            detail::reply_field<std::string>(j, "long_dense", "/v1/instruct")};
  }

  std::string version() const override { return cfg_.label() + "/v1/instruct"; }

 private:
  HttpBackendConfig cfg_;
};

class HttpJudgeBackend : public JudgeBackend {
 public:
  explicit HttpJudgeBackend(HttpBackendConfig cfg) : cfg_(std::move(cfg)) {}

  VqaReply vqa(const VqaRequest& req) override {
    nlohmann::ordered_json body;
    body["sample_ref"] = req.sample_ref;
    body["question"] = req.question;
    const auto j = detail::post_json(cfg_, "/v1/vqa", body);
    const std::string answer = detail::reply_field<std::string>(j, "answer", "/v1/vqa");
    if (answer != "yes" && answer != "no") {
      throw BackendError("/v1/vqa reply answer must be yes or no, got '" + answer + "'");
    }
    return {answer == "yes", detail::reply_field<double>(j, "confidence", "/v1/vqa")};
  }

  std::string version() const override { return cfg_.label() + "/v1/vqa"; }

 private:
  HttpBackendConfig cfg_;
};

}  // namespace mcaforge
