#pragma once

#include <array>
#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <string>
#include <utility>
#include <vector>

#include "json.hpp"

#include "mcaforge/error.hpp"

namespace mcaforge {

// Pipeline stages in execution order. A record's stage_status lists the
// stages it has passed, always a prefix of this sequence.
enum class Stage : std::size_t {
  Captioned = 0,
  Synthesized = 1,
  Filtered = 2,
  Instructed = 3,
  Verified = 4,
};

inline constexpr std::size_t kNumStages = 5;

inline const char* stage_name(Stage s) {
  static constexpr std::array<const char*, kNumStages> names = {
      "captioned", "synthesized", "filtered", "instructed", "verified"};
  return names.at(static_cast<std::size_t>(s));
}

inline Stage stage_from_name(const std::string& name) {
  for (std::size_t i = 0; i < kNumStages; ++i) {
    if (name == stage_name(static_cast<Stage>(i))) return static_cast<Stage>(i);
  }
  throw ParseError(0, "unknown stage name '" + name + "'");
}

// The three instruction forms attached at the instruction stage.
struct Instructions {
  std::string short_form;
  std::string long_form;
  std::string long_dense;

  bool empty() const { return short_form.empty() && long_form.empty() && long_dense.empty(); }
  bool operator==(const Instructions&) const = default;
};

// One pipeline record as serialized to the manifest. Fields beyond the
// stages a record reached stay at their empty defaults and serialize as
// null, so every line carries the same keys in the same order.
struct PipelineRecord {
  std::string id;
  std::string task;
  std::size_t stages_passed = 0;  // prefix length into the stage sequence
  std::string src_clip;           // relative ref produced by the generator
  std::string tar_clip;
  std::size_t onset = 0;
  bool has_pair = false;  // src_clip/tar_clip/onset populated
  Instructions instructions;
  bool has_instructions = false;
  std::string reject_reason;  // empty means not rejected
  std::uint64_t seed = 0;
  std::string schedule;
  std::vector<std::pair<std::string, std::string>> backend_versions;
  std::vector<std::pair<std::string, std::string>> thresholds;  // echoed by the filter stage

  bool rejected() const { return !reject_reason.empty(); }
  bool verified() const { return stages_passed == kNumStages; }

  // Terminal records are either fully verified or carry a reject reason.
  void validate() const {
    if (id.empty()) throw ConfigError("record: empty id");
    if (stages_passed > kNumStages) throw ConfigError("record: stage count out of range");
    if (has_instructions && instructions.empty()) {
      throw ConfigError("record " + id + ": instruction flag set but all forms empty");
    }
    if (stages_passed > static_cast<std::size_t>(Stage::Synthesized) && !has_pair) {
      throw ConfigError("record " + id + ": passed synthesis without clip refs");
    }
    if (stages_passed > static_cast<std::size_t>(Stage::Instructed) && !has_instructions) {
      throw ConfigError("record " + id + ": passed instruction stage without instructions");
    }
  }
};

namespace detail {

inline nlohmann::ordered_json kv_object(
    const std::vector<std::pair<std::string, std::string>>& pairs) {
  nlohmann::ordered_json obj = nlohmann::ordered_json::object();
  for (const auto& [k, v] : pairs) obj[k] = v;
  return obj;
}

inline std::vector<std::pair<std::string, std::string>> kv_pairs(const nlohmann::ordered_json& obj,
                                                                 const char* what) {
  if (!obj.is_object()) throw ParseError(0, std::string(what) + ": expected an object");
  std::vector<std::pair<std::string, std::string>> out;
  for (const auto& [k, v] : obj.items()) {
    if (!v.is_string()) throw ParseError(0, std::string(what) + "." + k + ": expected a string");
    out.emplace_back(k, v.get<std::string>());
  }
  return out;
}

}  // namespace detail

// One manifest line. Key order is part of the format: id, task,
// stage_status, src_clip, tar_clip, onset, instructions, reject_reason,
// meta.
inline std::string encode_record(const PipelineRecord& rec) {
  rec.validate();
  nlohmann::ordered_json j;
  j["id"] = rec.id;
  j["task"] = rec.task;
  nlohmann::ordered_json stages = nlohmann::ordered_json::array();
  for (std::size_t i = 0; i < rec.stages_passed; ++i) {
    stages.push_back(stage_name(static_cast<Stage>(i)));
  }
  j["stage_status"] = stages;
  if (rec.has_pair) {
    j["src_clip"] = rec.src_clip;
    j["tar_clip"] = rec.tar_clip;
    j["onset"] = rec.onset;
  } else {
    j["src_clip"] = nullptr;
    j["tar_clip"] = nullptr;
    j["onset"] = nullptr;
  }
  if (rec.has_instructions) {
    nlohmann::ordered_json instr;
    instr["short"] = rec.instructions.short_form;
    instr["long"] = rec.instructions.long_form;
    instr["long_dense"] = rec.instructions.long_dense;
    j["instructions"] = instr;
  } else {
    j["instructions"] = nullptr;
  }
  if (rec.rejected()) {
    j["reject_reason"] = rec.reject_reason;
  } else {
    j["reject_reason"] = nullptr;
  }
  nlohmann::ordered_json meta;
  meta["seed"] = rec.seed;
  meta["schedule"] = rec.schedule;
  meta["backend_versions"] = detail::kv_object(rec.backend_versions);
  if (!rec.thresholds.empty()) meta["thresholds"] = detail::kv_object(rec.thresholds);
  j["meta"] = meta;
  return j.dump();
}

inline PipelineRecord decode_record(const std::string& line) {
  nlohmann::ordered_json j;
  try {
    j = nlohmann::ordered_json::parse(line);
  } catch (const nlohmann::json::exception& e) {
    throw ParseError(0, std::string("manifest line: ") + e.what());
  }
  auto require = [&](const char* key) -> const nlohmann::ordered_json& {
    auto it = j.find(key);
    if (it == j.end()) throw ParseError(0, std::string("manifest line: missing key '") + key + "'");
    return *it;
  };
  PipelineRecord rec;
  rec.id = require("id").get<std::string>();
  rec.task = require("task").get<std::string>();
  const auto& stages = require("stage_status");
  if (!stages.is_array()) throw ParseError(0, "manifest line: stage_status must be an array");
  std::size_t expect = 0;
  for (const auto& s : stages) {
    Stage st = stage_from_name(s.get<std::string>());
    if (static_cast<std::size_t>(st) != expect) {
      throw ParseError(0, "record " + rec.id + ": stage_status is not a prefix of the stage order");
    }
    ++expect;
  }
  rec.stages_passed = expect;
  const auto& src = require("src_clip");
  const auto& tar = require("tar_clip");
  const auto& onset = require("onset");
  if (!src.is_null()) {
    rec.src_clip = src.get<std::string>();
    rec.tar_clip = tar.get<std::string>();
    rec.onset = onset.get<std::size_t>();
    rec.has_pair = true;
  } else if (!tar.is_null() || !onset.is_null()) {
    throw ParseError(0, "record " + rec.id + ": partial clip reference");
  }
  const auto& instr = require("instructions");
  if (!instr.is_null()) {
    rec.instructions.short_form = instr.at("short").get<std::string>();
    rec.instructions.long_form = instr.at("long").get<std::string>();
    rec.instructions.long_dense = instr.at("long_dense").get<std::string>();
    rec.has_instructions = true;
  }
  const auto& reason = require("reject_reason");
  if (!reason.is_null()) rec.reject_reason = reason.get<std::string>();
  const auto& meta = require("meta");
  rec.seed = meta.at("seed").get<std::uint64_t>();
  rec.schedule = meta.at("schedule").get<std::string>();
  rec.backend_versions = detail::kv_pairs(meta.at("backend_versions"), "meta.backend_versions");
  if (meta.contains("thresholds")) {
    rec.thresholds = detail::kv_pairs(meta.at("thresholds"), "meta.thresholds");
  }
  rec.validate();
  return rec;
}

inline void write_manifest(const std::filesystem::path& path,
                           const std::vector<PipelineRecord>& records) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot open manifest for writing: " + path.string());
  for (const auto& rec : records) out << encode_record(rec) << '\n';
  if (!out) throw IoError("manifest write failed: " + path.string());
}

inline std::vector<PipelineRecord> read_manifest(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open manifest: " + path.string());
  std::vector<PipelineRecord> records;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty()) continue;
    try {
      records.push_back(decode_record(line));
    } catch (const Error& e) {
      throw ParseError(static_cast<int>(lineno), path.string() + ": " + e.what());
    }
  }
  return records;
}

}  // namespace mcaforge
