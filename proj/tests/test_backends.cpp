#include <catch2/catch_amalgamated.hpp>

#include <atomic>
#include <filesystem>
#include <fstream>
#include <set>
#include <string>
#include <thread>
#include <vector>

#include "httplib.h"
#include "json.hpp"

#include "mcaforge/backends.hpp"
#include "mcaforge/denoiser.hpp"
#include "mcaforge/error.hpp"
#include "mcaforge/schedule.hpp"
#include "mcaforge/synth.hpp"
#include "mcaforge/tensor_io.hpp"

using namespace mcaforge;
using nlohmann::ordered_json;

namespace {

std::filesystem::path fresh_dir(const std::string& tag) {
  const auto dir = std::filesystem::temp_directory_path() / ("mcaforge_test_" + tag);
  std::filesystem::remove_all(dir);
  std::filesystem::create_directories(dir);
  return dir;
}

std::string slurp(const std::filesystem::path& p) {
  std::ifstream in(p, std::ios::binary);
  REQUIRE(in.good());
  return std::string(std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>());
}

ToyModelConfig tiny_config() {
  ToyModelConfig cfg;
  cfg.layers = 2;
  cfg.width = 16;
  cfg.heads = 2;
  cfg.channels = 4;
  cfg.mlp_hidden = 32;
  cfg.cond_vocab = 8;
  return cfg;
}

const ClipDims kTinyDims{2, 4, 4, 4};

// In-process HTTP server for exercising the wire contract end to end.
class TestServer {
 public:
  TestServer() {
    port_ = server_.bind_to_any_port("127.0.0.1");
    REQUIRE(port_ > 0);
    thread_ = std::thread([this] { server_.listen_after_bind(); });
    server_.wait_until_ready();
  }

  ~TestServer() {
    server_.stop();
    thread_.join();
  }

  httplib::Server& raw() { return server_; }

  HttpBackendConfig config(int timeout_ms = 2000, int retries = 2) const {
    return {"127.0.0.1", port_, timeout_ms, retries};
  }

 private:
  httplib::Server server_;
  int port_ = 0;
  std::thread thread_;
};

}  // namespace

TEST_CASE("mock captions are deterministic and keyword-grounded") {
  MockTextBackend text;
  const CaptionRequest req{{"dog", "park"}, "object_insertion_removal", 1};
  const CaptionReply a = text.caption(req);
  const CaptionReply b = text.caption(req);
  REQUIRE(a.source_prompt == b.source_prompt);
  REQUIRE(a.target_prompt == b.target_prompt);
  REQUIRE(a.source_prompt.find("dog") != std::string::npos);
  REQUIRE(a.source_prompt.find("park") != std::string::npos);
  REQUIRE(a.target_prompt.find(a.source_prompt) == 0);
  REQUIRE(a.target_prompt.size() > a.source_prompt.size());

  REQUIRE_THROWS_AS(text.caption({{}, "object_insertion_removal", 1}), ConfigError);
}

TEST_CASE("caption templates vary across seeds for every task") {
  MockTextBackend text;
  for (const std::string& task : preset_tasks()) {
    std::set<std::string> sources;
    std::set<std::string> edits;
    for (std::uint64_t seed = 0; seed < 100; ++seed) {
      const CaptionReply r = text.caption({{"robot", "garden"}, task, seed});
      sources.insert(r.source_prompt);
      edits.insert(r.target_prompt.substr(r.source_prompt.size()));
    }
    REQUIRE(sources.size() >= 2);
    REQUIRE(edits.size() >= 2);
  }
}

TEST_CASE("mock instructions nest with strictly growing length") {
  MockTextBackend text;
  MockInstructBackend instruct;
  std::size_t ordered = 0;
  for (std::uint64_t seed = 0; seed < 100; ++seed) {
    const std::string task = preset_tasks()[seed % preset_tasks().size()];
    const CaptionReply prompts = text.caption({{"car", "street"}, task, seed});
    const Instructions f = instruct.instruct({prompts, task, seed % 8});
    REQUIRE_FALSE(f.short_form.empty());
    REQUIRE_FALSE(f.long_form.empty());
    REQUIRE_FALSE(f.long_dense.empty());
    REQUIRE(f.short_form != f.long_form);
    REQUIRE(f.long_form != f.long_dense);
    REQUIRE(f.short_form != f.long_dense);
    if (f.short_form.size() < f.long_form.size() && f.long_form.size() < f.long_dense.size()) {
      ++ordered;
    }
  }
  REQUIRE(ordered >= 95);

  const Instructions a = instruct.instruct({{"s", "t"}, "local_modification", 3});
  const Instructions b = instruct.instruct({{"s", "t"}, "local_modification", 3});
  REQUIRE(a == b);
}

TEST_CASE("mock judge answers are a pure function of the request") {
  MockJudgeBackend judge(2);
  const VqaRequest req{"clips/pair_x.tar.mcat", "Is the requested edit applied?"};
  const VqaReply a = judge.vqa(req);
  REQUIRE(a.yes == judge.vqa(req).yes);
  REQUIRE(a.confidence == judge.vqa(req).confidence);
  REQUIRE(a.confidence >= 0.0);
  REQUIRE(a.confidence <= 1.0);

  std::size_t yes = 0, no = 0;
  for (int i = 0; i < 64; ++i) {
    const auto r = judge.vqa({"ref_" + std::to_string(i), "q"});
    (r.yes ? yes : no) += 1;
  }
  REQUIRE(yes > 0);
  REQUIRE(no > 0);

  MockJudgeBackend always_yes(0);
  for (int i = 0; i < 16; ++i) {
    REQUIRE(always_yes.vqa({"ref_" + std::to_string(i), "q"}).yes);
  }
}

TEST_CASE("scripted judge replays its answer cycle") {
  ScriptedJudgeBackend judge({true, false, true});
  REQUIRE(judge.vqa({"r", "q"}).yes);
  REQUIRE_FALSE(judge.vqa({"r", "q"}).yes);
  REQUIRE(judge.vqa({"r", "q"}).yes);
  REQUIRE(judge.vqa({"r", "q"}).yes);  // wraps around
  REQUIRE_THROWS_AS(ScriptedJudgeBackend({}), ConfigError);
}

TEST_CASE("mock generator writes clip pairs with an exact mask sidecar") {
  const auto dir = fresh_dir("mockgen");
  MockGeneratorBackend gen(dir, kTinyDims);
  const GeneratePairRequest req{{"src", "tar"}, "object_insertion_removal",
                                "object_insertion_removal", 99};
  const GeneratePairReply rep = gen.generate_pair(req);
  REQUIRE(std::filesystem::exists(dir / rep.src_ref));
  REQUIRE(std::filesystem::exists(dir / rep.tar_ref));

  const SynthPair oracle = synth_pair(kTinyDims, req.task, req.seed, 0, 1);
  REQUIRE(rep.onset == oracle.src.onset);
  REQUIRE(bit_equal(read_mcat(dir / rep.src_ref), oracle.src.clip.values));

  const std::string mask_ref =
      rep.src_ref.substr(0, rep.src_ref.size() - std::string(".src.mcat").size()) +
      ".mask.mcat";
  const Tensor mask = read_mcat(dir / mask_ref);
  REQUIRE(mask.numel() == kTinyDims.tokens());
  for (std::size_t i = 0; i < mask.numel(); ++i) {
    REQUIRE(mask.data()[i] == (oracle.src.mask[i] ? 1.0f : 0.0f));
  }

  const std::string before = slurp(dir / rep.src_ref);
  gen.generate_pair(req);
  REQUIRE(slurp(dir / rep.src_ref) == before);
}

TEST_CASE("toy generator samples deterministic pairs under a task schedule") {
  const ToyModel model = build_model(tiny_config(), 5);
  const auto dir = fresh_dir("toygen");
  ToyGeneratorBackend gen(dir, model, kTinyDims, 2);
  const GeneratePairRequest req{{"src", "tar"}, "local_modification", "local_modification", 7};
  const GeneratePairReply rep = gen.generate_pair(req);
  REQUIRE(std::filesystem::exists(dir / rep.src_ref));
  REQUIRE(rep.onset < kTinyDims.frames);

  const std::string src_bytes = slurp(dir / rep.src_ref);
  const std::string tar_bytes = slurp(dir / rep.tar_ref);
  gen.generate_pair(req);
  REQUIRE(slurp(dir / rep.src_ref) == src_bytes);
  REQUIRE(slurp(dir / rep.tar_ref) == tar_bytes);

  std::set<std::size_t> onsets;
  for (std::uint64_t seed = 0; seed < 32; ++seed) {
    onsets.insert(gen.generate_pair({{"s", "t"}, "local_modification", "local_modification",
                                     1000 + seed})
                      .onset);
  }
  REQUIRE(onsets.size() >= 2);

  REQUIRE_THROWS_AS(gen.generate_pair({{"s", "t"}, "local_modification", "no_such_task", 1}),
                    ConfigError);
}

TEST_CASE("http clients speak the wire contract") {
  TestServer server;
  std::atomic<int> caption_hits{0};

  server.raw().Post("/v1/caption", [&](const httplib::Request& q, httplib::Response& s) {
    caption_hits += 1;
    const auto body = ordered_json::parse(q.body);
    REQUIRE(body.at("keywords").get<std::vector<std::string>>() ==
            std::vector<std::string>{"dog", "park"});
    REQUIRE(body.at("task") == "object_insertion_removal");
    REQUIRE(body.at("seed") == 12);
    s.set_content(R"({"source_prompt":"a dog","target_prompt":"a dog with a ball"})",
                  "application/json");
  });
  server.raw().Post("/v1/generate_pair", [&](const httplib::Request& q, httplib::Response& s) {
    const auto body = ordered_json::parse(q.body);
    REQUIRE(body.at("prompts").at("source_prompt") == "a dog");
    REQUIRE(body.at("schedule_name") == "object_insertion_removal");
    REQUIRE(body.at("seed") == 12);
    s.set_content(R"({"src_ref":"clips/x.src.mcat","tar_ref":"clips/x.tar.mcat","onset":4})",
                  "application/json");
  });
  server.raw().Post("/v1/instruct", [&](const httplib::Request& q, httplib::Response& s) {
    const auto body = ordered_json::parse(q.body);
    REQUIRE(body.at("onset") == 4);
    REQUIRE(body.at("prompts").at("target_prompt") == "a dog with a ball");
    s.set_content(R"({"short":"add a ball","long":"add a ball at frame 4","long_dense":"add a ball at frame 4; keep the dog"})",
                  "application/json");
  });
  server.raw().Post("/v1/vqa", [&](const httplib::Request& q, httplib::Response& s) {
    const auto body = ordered_json::parse(q.body);
    REQUIRE(body.at("sample_ref") == "clips/x.tar.mcat");
    REQUIRE_FALSE(body.at("question").get<std::string>().empty());
    s.set_content(R"({"answer":"yes","confidence":0.75})", "application/json");
  });

  const HttpBackendConfig cfg = server.config();

  HttpTextBackend text(cfg);
  const CaptionReply prompts = text.caption({{"dog", "park"}, "object_insertion_removal", 12});
  REQUIRE(prompts.source_prompt == "a dog");
  REQUIRE(prompts.target_prompt == "a dog with a ball");
  REQUIRE(caption_hits == 1);

  HttpGeneratorBackend gen(cfg);
  const GeneratePairReply pair =
      gen.generate_pair({prompts, "object_insertion_removal", "object_insertion_removal", 12});
  REQUIRE(pair.src_ref == "clips/x.src.mcat");
  REQUIRE(pair.onset == 4);

  HttpInstructBackend instruct(cfg);
  const Instructions forms =
      instruct.instruct({prompts, "object_insertion_removal", pair.onset});
  REQUIRE(forms.short_form == "add a ball");
  REQUIRE(forms.long_dense.find("keep the dog") != std::string::npos);

  HttpJudgeBackend judge(cfg);
  const VqaReply reply = judge.vqa({pair.tar_ref, "Is the requested edit applied?"});
  REQUIRE(reply.yes);
  REQUIRE(reply.confidence == 0.75);
}

TEST_CASE("http clients retry transient failures and then give up") {
  TestServer server;
  std::atomic<int> hits{0};
  server.raw().Post("/v1/vqa", [&](const httplib::Request&, httplib::Response& s) {
    const int n = ++hits;
    if (n <= 2) {
      s.status = 500;
      return;
    }
    s.set_content(R"({"answer":"no","confidence":0.5})", "application/json");
  });

  SECTION("two failures then success within the retry budget") {
    HttpJudgeBackend judge(server.config(2000, 2));
    REQUIRE_FALSE(judge.vqa({"r", "q"}).yes);
    REQUIRE(hits == 3);
  }

  SECTION("retry budget too small surfaces a backend error") {
    HttpJudgeBackend judge(server.config(2000, 1));
    REQUIRE_THROWS_AS(judge.vqa({"r", "q"}), BackendError);
    REQUIRE(hits == 2);
  }
}

TEST_CASE("http client failure modes map to backend errors") {
  SECTION("nothing listening") {
    HttpJudgeBackend judge({"127.0.0.1", 9, 200, 0});
    REQUIRE_THROWS_AS(judge.vqa({"r", "q"}), BackendError);
  }
  SECTION("malformed reply json") {
    TestServer server;
    server.raw().Post("/v1/vqa", [](const httplib::Request&, httplib::Response& s) {
      s.set_content("not json", "application/json");
    });
    HttpJudgeBackend judge(server.config(2000, 0));
    REQUIRE_THROWS_AS(judge.vqa({"r", "q"}), BackendError);
  }
  SECTION("answer outside yes/no") {
    TestServer server;
    server.raw().Post("/v1/vqa", [](const httplib::Request&, httplib::Response& s) {
      s.set_content(R"({"answer":"maybe","confidence":0.5})", "application/json");
    });
    HttpJudgeBackend judge(server.config(2000, 0));
    REQUIRE_THROWS_AS(judge.vqa({"r", "q"}), BackendError);
  }
  SECTION("missing reply field") {
    TestServer server;
    server.raw().Post("/v1/caption", [](const httplib::Request&, httplib::Response& s) {
      s.set_content(R"({"source_prompt":"only half"})", "application/json");
    });
    HttpTextBackend text(server.config(2000, 0));
    REQUIRE_THROWS_AS(text.caption({{"k"}, "t", 0}), BackendError);
  }
}
