// Command-line front end: every library workflow behind one binary.
// Exit codes: 0 success, 1 domain error, 2 usage error.
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <memory>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "json.hpp"

#include "mcaforge/backends.hpp"
#include "mcaforge/bench.hpp"
#include "mcaforge/denoiser.hpp"
#include "mcaforge/error.hpp"
#include "mcaforge/manifest.hpp"
#include "mcaforge/pipeline.hpp"
#include "mcaforge/schedule.hpp"
#include "mcaforge/selftest.hpp"
#include "mcaforge/synth.hpp"

namespace {

using nlohmann::json;

json load_json_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw mcaforge::IoError("cannot open " + path.string());
  try {
    return json::parse(in);
  } catch (const json::exception& e) {
    throw mcaforge::ParseError(0, path.string() + ": " + e.what());
  }
}

// Reads "http://host:port"; anything else is a configuration mistake.
mcaforge::HttpBackendConfig parse_backend_url(const std::string& url, int timeout_ms,
                                              int retries) {
  const std::string prefix = "http://";
  if (url.rfind(prefix, 0) != 0) {
    throw mcaforge::ConfigError("backend url must start with http://, got '" + url + "'");
  }
  const std::string rest = url.substr(prefix.size());
  const std::size_t colon = rest.rfind(':');
  if (colon == std::string::npos || colon == 0 || colon + 1 == rest.size()) {
    throw mcaforge::ConfigError("backend url must look like http://host:port, got '" + url + "'");
  }
  mcaforge::HttpBackendConfig cfg;
  cfg.host = rest.substr(0, colon);
  try {
    cfg.port = std::stoi(rest.substr(colon + 1));
  } catch (const std::exception&) {
    throw mcaforge::ConfigError("backend url has a non-numeric port: '" + url + "'");
  }
  cfg.timeout_ms = timeout_ms;
  cfg.retries = retries;
  return cfg;
}

mcaforge::ClipDims dims_from_json(const json& j, mcaforge::ClipDims dims) {
  if (j.contains("frames")) dims.frames = j.at("frames").get<std::size_t>();
  if (j.contains("height")) dims.height = j.at("height").get<std::size_t>();
  if (j.contains("width")) dims.width = j.at("width").get<std::size_t>();
  if (j.contains("channels")) dims.channels = j.at("channels").get<std::size_t>();
  return dims;
}

// ---- schedule check --------------------------------------------------------

int cmd_schedule_check(const std::string& file) {
  const mcaforge::SchedulePolicy policy = mcaforge::load_schedule(file);
  mcaforge::validate_schedule(policy);
  // Resolving the whole grid surfaces policy errors that only appear at
  // lookup time; the counts double as a coverage summary.
  std::size_t cross[2] = {0, 0};
  const std::size_t layers = 4, steps = 50;
  for (std::size_t l = 0; l < layers; ++l) {
    for (std::size_t s = 0; s < steps; ++s) {
      const auto src = mcaforge::resolve(policy, mcaforge::BranchRole::Src, l, s, layers, steps);
      const auto tar = mcaforge::resolve(policy, mcaforge::BranchRole::Tar, l, s, layers, steps);
      cross[0] += src != mcaforge::McaVariant::Self;
      cross[1] += tar != mcaforge::McaVariant::Self;
    }
  }
  std::cout << "ok: " << file << "\n"
            << "  task: " << policy.task << "\n"
            << "  rules: " << policy.rules.size() << "\n"
            << "  cross-branch cells on a " << layers << "x" << steps
            << " grid: src " << cross[0] << ", tar " << cross[1] << "\n";
  return 0;
}

// ---- train-toy ---------------------------------------------------------------

struct TrainArgs {
  std::string config_file;
  std::string out_dir;  // overrides the config's out_dir when set
  std::uint64_t seed = 0;
  CLI::Option* seed_opt = nullptr;
};

int cmd_train_toy(const TrainArgs& args) {
  const json cfg = load_json_file(args.config_file);

  mcaforge::ToyModelConfig model_cfg;
  if (cfg.contains("model")) {
    const json& m = cfg.at("model");
    if (m.contains("layers")) model_cfg.layers = m.at("layers").get<std::size_t>();
    if (m.contains("width")) model_cfg.width = m.at("width").get<std::size_t>();
    if (m.contains("heads")) model_cfg.heads = m.at("heads").get<std::size_t>();
    if (m.contains("channels")) model_cfg.channels = m.at("channels").get<std::size_t>();
    if (m.contains("mlp_hidden")) model_cfg.mlp_hidden = m.at("mlp_hidden").get<std::size_t>();
    if (m.contains("cond_vocab")) model_cfg.cond_vocab = m.at("cond_vocab").get<std::size_t>();
  }

  mcaforge::SynthConfig data_cfg;
  data_cfg.dims.channels = model_cfg.channels;
  if (cfg.contains("data")) {
    const json& d = cfg.at("data");
    if (d.contains("pairs")) data_cfg.pairs = d.at("pairs").get<std::size_t>();
    if (d.contains("dims")) data_cfg.dims = dims_from_json(d.at("dims"), data_cfg.dims);
    if (d.contains("tasks")) data_cfg.tasks = d.at("tasks").get<std::vector<std::string>>();
  }

  std::size_t steps = 600;
  double lr = 0.05;
  if (cfg.contains("train")) {
    const json& t = cfg.at("train");
    if (t.contains("steps")) steps = t.at("steps").get<std::size_t>();
    if (t.contains("lr")) lr = t.at("lr").get<double>();
  }

  std::uint64_t seed = args.seed;
  if (args.seed_opt->count() == 0 && cfg.contains("seed")) {
    seed = cfg.at("seed").get<std::uint64_t>();
  }

  std::filesystem::path out_dir = args.out_dir;
  if (out_dir.empty() && cfg.contains("out_dir")) {
    out_dir = cfg.at("out_dir").get<std::string>();
  }
  if (out_dir.empty()) {
    throw mcaforge::ConfigError("train-toy: set out_dir in the config or pass --out");
  }

  const mcaforge::ToyModel model =
      mcaforge::build_model(model_cfg, mcaforge::derive_seed(seed, 0));
  const std::vector<mcaforge::SynthPair> data =
      mcaforge::synth_dataset(data_cfg, mcaforge::derive_seed(seed, 1));
  std::cout << "training: " << steps << " steps, lr " << lr << ", " << data.size()
            << " pairs, seed " << seed << "\n";
  mcaforge::TrainResult result =
      mcaforge::train(model, data, steps, lr, mcaforge::derive_seed(seed, 2));

  mcaforge::save_model(out_dir, result.model);
  std::ofstream loss_out(out_dir / "loss.txt", std::ios::binary);
  if (!loss_out) throw mcaforge::IoError("cannot write " + (out_dir / "loss.txt").string());
  loss_out.precision(17);
  for (double v : result.loss_curve) loss_out << v << "\n";
  if (!loss_out.flush()) {
    throw mcaforge::IoError("failed writing " + (out_dir / "loss.txt").string());
  }

  std::cout << "checkpoint: " << out_dir.string() << "\n"
            << "final loss: " << result.loss_curve.back() << "\n";
  return 0;
}

// ---- sample-pair -------------------------------------------------------------

struct SampleArgs {
  std::string model_dir;
  std::string schedule;
  std::string out_dir;
  std::size_t steps = 20;
  std::uint64_t seed = 0;
  std::size_t src_cond = 0;
  std::size_t tar_cond = 1;
  std::size_t frames = 8, height = 8, width = 8;
  bool independent_noise = false;
};

mcaforge::SchedulePolicy resolve_schedule_arg(const std::string& arg) {
  if (arg == "all_self") return mcaforge::SchedulePolicy{"all_self", {}};
  const auto& tasks = mcaforge::preset_tasks();
  if (std::find(tasks.begin(), tasks.end(), arg) != tasks.end()) {
    return mcaforge::preset(arg);
  }
  if (std::filesystem::exists(arg)) return mcaforge::load_schedule(arg);
  std::string options = "all_self";
  for (const auto& t : tasks) options += ", " + t;
  throw mcaforge::ConfigError("unknown schedule '" + arg +
                              "': expected a file path or one of: " + options);
}

int cmd_sample_pair(const SampleArgs& args) {
  const mcaforge::ToyModel model = mcaforge::load_model(args.model_dir);
  const mcaforge::SchedulePolicy schedule = resolve_schedule_arg(args.schedule);
  const mcaforge::ClipDims dims{args.frames, args.height, args.width, model.config.channels};

  const mcaforge::SampledPair pair =
      mcaforge::sample_pair(model, args.src_cond, args.tar_cond, schedule, args.steps, args.seed,
                            !args.independent_noise, dims);

  const std::filesystem::path out(args.out_dir);
  std::filesystem::create_directories(out);
  mcaforge::write_mcat(out / "src.mcat", pair.src.values);
  mcaforge::write_mcat(out / "tar.mcat", pair.tar.values);

  nlohmann::ordered_json meta;
  meta["schedule"] = schedule.task;
  meta["src_cond"] = args.src_cond;
  meta["tar_cond"] = args.tar_cond;
  meta["steps"] = args.steps;
  meta["seed"] = args.seed;
  meta["shared_noise"] = !args.independent_noise;
  meta["dims"] = {{"frames", dims.frames},
                  {"height", dims.height},
                  {"width", dims.width},
                  {"channels", dims.channels}};
  std::ofstream meta_out(out / "sample.json", std::ios::binary);
  if (!meta_out) throw mcaforge::IoError("cannot write " + (out / "sample.json").string());
  meta_out << meta.dump(2) << "\n";
  if (!meta_out.flush()) {
    throw mcaforge::IoError("failed writing " + (out / "sample.json").string());
  }

  std::cout << "wrote " << (out / "src.mcat").string() << ", " << (out / "tar.mcat").string()
            << ", " << (out / "sample.json").string() << "\n";
  return 0;
}

// ---- pipeline run / inspect ---------------------------------------------------

struct PipelineArgs {
  std::string config_file;
  std::string out_dir;
  std::uint64_t seed = 0;
  std::size_t workers = 1;
};

// Owns whichever backend implementations the config selects; the pipeline
// itself only sees the interface pointers.
struct BackendSet {
  std::vector<std::unique_ptr<mcaforge::TextBackend>> text;
  std::vector<std::unique_ptr<mcaforge::GeneratorBackend>> generator;
  std::vector<std::unique_ptr<mcaforge::InstructBackend>> instruct;
  std::vector<std::unique_ptr<mcaforge::JudgeBackend>> judge;
  mcaforge::PipelineBackends handles;
};

BackendSet make_backends(const json& cfg, const mcaforge::PipelineConfig& pipeline_cfg) {
  int timeout_ms = 2000, retries = 2;
  if (cfg.contains("http")) {
    const json& h = cfg.at("http");
    if (h.contains("timeout_ms")) timeout_ms = h.at("timeout_ms").get<int>();
    if (h.contains("retries")) retries = h.at("retries").get<int>();
  }
  json backends = cfg.contains("backends") ? cfg.at("backends") : json::object();
  const auto selector = [&](const char* key) -> std::string {
    return backends.contains(key) ? backends.at(key).get<std::string>() : "mock";
  };

  BackendSet set;

  const std::string text_sel = selector("text");
  if (text_sel == "mock") {
    set.text.push_back(std::make_unique<mcaforge::MockTextBackend>());
  } else {
    set.text.push_back(std::make_unique<mcaforge::HttpTextBackend>(
        parse_backend_url(text_sel, timeout_ms, retries)));
  }

  const std::string gen_sel = selector("generator");
  if (gen_sel == "mock") {
    set.generator.push_back(std::make_unique<mcaforge::MockGeneratorBackend>(
        pipeline_cfg.out_dir, pipeline_cfg.dims));
  } else if (gen_sel == "toy") {
    if (!backends.contains("toy") || !backends.at("toy").contains("model_dir")) {
      throw mcaforge::ConfigError("generator 'toy' needs backends.toy.model_dir");
    }
    const json& toy = backends.at("toy");
    const std::size_t steps =
        toy.contains("sample_steps") ? toy.at("sample_steps").get<std::size_t>() : 20;
    const bool shared =
        toy.contains("shared_noise") ? toy.at("shared_noise").get<bool>() : true;
    set.generator.push_back(std::make_unique<mcaforge::ToyGeneratorBackend>(
        pipeline_cfg.out_dir, mcaforge::load_model(toy.at("model_dir").get<std::string>()),
        pipeline_cfg.dims, steps, shared));
  } else {
    set.generator.push_back(std::make_unique<mcaforge::HttpGeneratorBackend>(
        parse_backend_url(gen_sel, timeout_ms, retries)));
  }

  const std::string ins_sel = selector("instruct");
  if (ins_sel == "mock") {
    set.instruct.push_back(std::make_unique<mcaforge::MockInstructBackend>());
  } else {
    set.instruct.push_back(std::make_unique<mcaforge::HttpInstructBackend>(
        parse_backend_url(ins_sel, timeout_ms, retries)));
  }

  const std::string judge_sel = selector("judge");
  if (judge_sel == "mock") {
    const std::uint64_t deny = backends.contains("judge_deny_modulus")
                                   ? backends.at("judge_deny_modulus").get<std::uint64_t>()
                                   : 16;
    set.judge.push_back(std::make_unique<mcaforge::MockJudgeBackend>(deny));
  } else {
    set.judge.push_back(std::make_unique<mcaforge::HttpJudgeBackend>(
        parse_backend_url(judge_sel, timeout_ms, retries)));
  }

  set.handles = {set.text.back().get(), set.generator.back().get(), set.instruct.back().get(),
                 set.judge.back().get()};
  return set;
}

int cmd_pipeline_run(const PipelineArgs& args) {
  const json cfg_json = load_json_file(args.config_file);

  mcaforge::PipelineConfig cfg;
  cfg.out_dir = args.out_dir;
  cfg.workers = args.workers;
  if (cfg_json.contains("records")) cfg.records = cfg_json.at("records").get<std::size_t>();
  if (cfg_json.contains("dims")) cfg.dims = dims_from_json(cfg_json.at("dims"), cfg.dims);
  if (cfg_json.contains("tasks")) {
    cfg.tasks = cfg_json.at("tasks").get<std::vector<std::string>>();
  }
  if (cfg_json.contains("keywords")) {
    cfg.keywords = cfg_json.at("keywords").get<std::vector<std::string>>();
  }
  if (cfg_json.contains("thresholds")) {
    const json& t = cfg_json.at("thresholds");
    if (t.contains("alignment")) cfg.thresholds.align = t.at("alignment").get<double>();
    if (t.contains("temporal_variation")) {
      cfg.thresholds.tv = t.at("temporal_variation").get<double>();
    }
    if (t.contains("value_limit")) cfg.thresholds.value_limit = t.at("value_limit").get<double>();
  }
  if (cfg_json.contains("vqa")) {
    const json& v = cfg_json.at("vqa");
    if (v.contains("rounds")) cfg.vqa_rounds = v.at("rounds").get<std::size_t>();
    if (v.contains("threshold")) cfg.vqa_threshold = v.at("threshold").get<double>();
  }

  BackendSet backends = make_backends(cfg_json, cfg);
  const mcaforge::RunSummary summary = mcaforge::run_pipeline(cfg, args.seed, backends.handles);

  std::cout << "submitted: " << summary.submitted << "\n"
            << "processed: " << summary.processed << "\n"
            << "verified:  " << summary.verified << "\n";
  for (std::size_t s = 0; s < mcaforge::kNumStages; ++s) {
    std::cout << "rejected at " << mcaforge::stage_name(static_cast<mcaforge::Stage>(s)) << ": "
              << summary.rejected_at[s] << "\n";
  }
  std::cout << "manifest: " << summary.manifest_path.string() << "\n";
  if (!summary.complete) {
    std::cerr << "error: run incomplete, backend outage: " << summary.outage_reason << "\n";
    return 1;
  }
  return 0;
}

// ---- bench score ---------------------------------------------------------------

struct BenchArgs {
  std::string manifest;
  std::string judge = "mock";
  std::string out_file;
  int timeout_ms = 2000;
  int retries = 2;
};

int cmd_bench_score(const BenchArgs& args) {
  const std::vector<mcaforge::BenchCase> cases = mcaforge::read_cases(args.manifest);
  std::unique_ptr<mcaforge::ScoreJudge> judge;
  if (args.judge == "mock") {
    judge = std::make_unique<mcaforge::MockScoreJudge>();
  } else {
    judge = std::make_unique<mcaforge::HttpScoreJudge>(
        parse_backend_url(args.judge, args.timeout_ms, args.retries));
  }
  const mcaforge::BenchAggregate agg = mcaforge::score_cases(cases, *judge);
  const std::string table = mcaforge::render_table(agg);

  std::ofstream out(args.out_file, std::ios::binary);
  if (!out) throw mcaforge::IoError("cannot write " + args.out_file);
  out << table;
  if (!out.flush()) throw mcaforge::IoError("failed writing " + args.out_file);

  std::cout << table;
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"paired-branch attention sampler, data pipeline, and scoring tools"};
  app.set_version_flag("--version", "mcaforge 0.1.0");
  app.require_subcommand(1);

  // schedule check <file>
  CLI::App* schedule = app.add_subcommand("schedule", "schedule file tools");
  schedule->require_subcommand(1);
  std::string sched_file;
  CLI::App* sched_check =
      schedule->add_subcommand("check", "parse, validate, and resolve a schedule file");
  sched_check->add_option("file", sched_file, "schedule file")->required();

  // train-toy --config <file>
  TrainArgs train_args;
  CLI::App* train_cmd = app.add_subcommand("train-toy", "train the toy denoiser");
  train_cmd->add_option("--config", train_args.config_file, "JSON training config")
      ->required();
  train_cmd->add_option("--out", train_args.out_dir, "checkpoint directory (overrides config)");
  train_args.seed_opt =
      train_cmd->add_option("--seed", train_args.seed, "training seed")
          ->envname("MCA_FORGE_SEED");

  // sample-pair --model <dir> --schedule <name|file>
  SampleArgs sample_args;
  CLI::App* sample_cmd = app.add_subcommand("sample-pair", "jointly sample an editing pair");
  sample_cmd->add_option("--model", sample_args.model_dir, "checkpoint directory")->required();
  sample_cmd->add_option("--schedule", sample_args.schedule, "preset name or schedule file")
      ->required();
  sample_cmd->add_option("--out", sample_args.out_dir, "output directory")->required();
  sample_cmd->add_option("--steps", sample_args.steps, "sampling steps");
  sample_cmd->add_option("--seed", sample_args.seed, "noise seed")->envname("MCA_FORGE_SEED");
  sample_cmd->add_option("--src-cond", sample_args.src_cond, "source condition id");
  sample_cmd->add_option("--tar-cond", sample_args.tar_cond, "target condition id");
  sample_cmd->add_option("--frames", sample_args.frames, "clip frames");
  sample_cmd->add_option("--height", sample_args.height, "clip height");
  sample_cmd->add_option("--width", sample_args.width, "clip width");
  sample_cmd->add_flag("--independent-noise", sample_args.independent_noise,
                       "draw per-branch initial noise instead of sharing it");

  // pipeline run / inspect
  CLI::App* pipeline = app.add_subcommand("pipeline", "paired-data pipeline");
  pipeline->require_subcommand(1);
  PipelineArgs pipe_args;
  CLI::App* pipe_run = pipeline->add_subcommand("run", "run the five-stage pipeline");
  pipe_run->add_option("--config", pipe_args.config_file, "JSON pipeline config")->required();
  pipe_run->add_option("--out", pipe_args.out_dir, "output directory")->required();
  pipe_run->add_option("--seed", pipe_args.seed, "run seed")->envname("MCA_FORGE_SEED");
  pipe_run->add_option("--workers", pipe_args.workers,
                       "worker threads for stages 2-5 (default 1)");
  std::string inspect_path;
  CLI::App* pipe_inspect = pipeline->add_subcommand("inspect", "summarize a manifest");
  pipe_inspect->add_option("manifest", inspect_path, "manifest JSONL file")->required();

  // bench score
  BenchArgs bench_args;
  CLI::App* bench = app.add_subcommand("bench", "benchmark scoring");
  bench->require_subcommand(1);
  CLI::App* bench_score = bench->add_subcommand("score", "score a case list and write the table");
  bench_score->add_option("--manifest", bench_args.manifest, "case list JSONL")->required();
  bench_score->add_option("--judge", bench_args.judge, "mock or http://host:port");
  bench_score->add_option("--out", bench_args.out_file, "output table file")->required();
  bench_score->add_option("--timeout-ms", bench_args.timeout_ms, "judge request timeout");
  bench_score->add_option("--retries", bench_args.retries, "judge request retries");

  // selftest
  CLI::App* selftest_cmd = app.add_subcommand("selftest", "run the built-in invariant checks");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForVersion& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return 2;
  }

  try {
    if (sched_check->parsed()) return cmd_schedule_check(sched_file);
    if (train_cmd->parsed()) return cmd_train_toy(train_args);
    if (sample_cmd->parsed()) return cmd_sample_pair(sample_args);
    if (pipe_run->parsed()) return cmd_pipeline_run(pipe_args);
    if (pipe_inspect->parsed()) {
      const std::string report = mcaforge::inspect_manifest(inspect_path);
      std::cout << report;
      return report.find("VIOLATED") == std::string::npos ? 0 : 1;
    }
    if (bench_score->parsed()) return cmd_bench_score(bench_args);
    if (selftest_cmd->parsed()) {
      return mcaforge::selftest::run_selftest(std::cout) == 0 ? 0 : 1;
    }
  } catch (const mcaforge::Error& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  } catch (const std::exception& e) {
    std::cerr << "internal error: " << e.what() << "\n";
    return 1;
  }
  return 2;
}
