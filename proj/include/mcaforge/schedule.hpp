#pragma once

#include <cstddef>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <optional>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "mcaforge/attention.hpp"
#include "mcaforge/error.hpp"

namespace mcaforge {

// Half-open fraction interval [begin, end) over a normalized axis.
struct Interval {
  double begin = 0.0;
  double end = 1.0;

  bool contains(double f) const { return f >= begin && f < end; }
  bool overlaps(const Interval& o) const { return begin < o.end && o.begin < end; }
  bool operator==(const Interval&) const = default;
};

// Denoising runs early -> mid -> late as the step fraction grows. Only the
// stage names are fixed; the boundary fractions are this library's choice.
enum class StepStage { Early, Mid, Late };

struct StageBoundaries {
  double f1 = 0.3;
  double f2 = 0.7;
};

inline StepStage stage_of(double step_fraction, const StageBoundaries& b = {}) {
  if (step_fraction < b.f1) return StepStage::Early;
  if (step_fraction < b.f2) return StepStage::Mid;
  return StepStage::Late;
}

enum class LayerGroup { Shallow, Mid, Deep };

struct LayerBoundaries {
  double g1 = 1.0 / 3.0;
  double g2 = 2.0 / 3.0;
};

inline LayerGroup layer_group_of(double layer_fraction, const LayerBoundaries& b = {}) {
  if (layer_fraction < b.g1) return LayerGroup::Shallow;
  if (layer_fraction < b.g2) return LayerGroup::Mid;
  return LayerGroup::Deep;
}

enum class RuleBranch { Src, Tar, Both };

inline const char* rule_branch_name(RuleBranch b) {
  switch (b) {
    case RuleBranch::Src: return "src";
    case RuleBranch::Tar: return "tar";
    case RuleBranch::Both: return "both";
  }
  return "both";
}

struct ScheduleRule {
  RuleBranch branch = RuleBranch::Both;
  Interval steps;
  bool all_layers = true;
  Interval layers;  // normalized to [0,1) when all_layers is true
  McaVariant variant = McaVariant::Self;

  bool applies_to(BranchRole role) const {
    if (branch == RuleBranch::Both) return true;
    return (branch == RuleBranch::Src) == (role == BranchRole::Src);
  }

  Interval layer_interval() const { return all_layers ? Interval{0.0, 1.0} : layers; }

  bool operator==(const ScheduleRule&) const = default;
};

// Maps (branch, layer fraction, step fraction) to an attention variant.
// Queries no rule covers fall back to Self. Validation guarantees at most
// one rule matches any cell, so rule order never changes the answer.
struct SchedulePolicy {
  std::string task;
  std::vector<ScheduleRule> rules;

  bool operator==(const SchedulePolicy&) const = default;
};

namespace detail {

inline bool branches_intersect(RuleBranch a, RuleBranch b) {
  return a == RuleBranch::Both || b == RuleBranch::Both || a == b;
}

inline std::optional<std::pair<std::size_t, std::size_t>> find_overlap(
    const std::vector<ScheduleRule>& rules) {
  for (std::size_t i = 0; i < rules.size(); ++i) {
    for (std::size_t j = i + 1; j < rules.size(); ++j) {
      if (!branches_intersect(rules[i].branch, rules[j].branch)) continue;
      if (!rules[i].steps.overlaps(rules[j].steps)) continue;
      if (!rules[i].layer_interval().overlaps(rules[j].layer_interval())) continue;
      return std::make_pair(i, j);
    }
  }
  return std::nullopt;
}

inline std::string_view trim(std::string_view s) {
  while (!s.empty() && (s.front() == ' ' || s.front() == '\t' || s.front() == '\r')) {
    s.remove_prefix(1);
  }
  while (!s.empty() && (s.back() == ' ' || s.back() == '\t' || s.back() == '\r')) {
    s.remove_suffix(1);
  }
  return s;
}

inline double parse_fraction(std::string_view s, int line, const char* what) {
  if (s.empty()) throw ParseError(line, std::string(what) + ": empty number");
  const std::string buf(s);
  char* stop = nullptr;
  const double v = std::strtod(buf.c_str(), &stop);
  if (stop != buf.c_str() + buf.size()) {
    throw ParseError(line, std::string(what) + ": cannot parse number '" + buf + "'");
  }
  if (!(v >= 0.0 && v <= 1.0)) {
    throw ParseError(line, std::string(what) + ": fraction " + buf + " outside [0, 1]");
  }
  return v;
}

inline Interval parse_interval(std::string_view s, int line, const char* what) {
  const std::size_t colon = s.find(':');
  if (colon == std::string_view::npos) {
    throw ParseError(line, std::string(what) + ": expected <begin>:<end>, got '" +
                               std::string(s) + "'");
  }
  Interval iv;
  iv.begin = parse_fraction(s.substr(0, colon), line, what);
  iv.end = parse_fraction(s.substr(colon + 1), line, what);
  if (!(iv.begin < iv.end)) {
    throw ParseError(line, std::string(what) + ": interval start must be below its end");
  }
  return iv;
}

// Expects "key=value"; returns the value or raises naming the key.
inline std::string_view expect_field(std::string_view token, std::string_view key, int line) {
  if (token.size() <= key.size() + 1 || token.substr(0, key.size()) != key ||
      token[key.size()] != '=') {
    throw ParseError(line, "expected " + std::string(key) + "=<...>, got '" +
                               std::string(token) + "'");
  }
  return token.substr(key.size() + 1);
}

// Shortest decimal string that parses back to exactly the same double.
inline std::string format_fraction(double v) {
  char buf[64];
  for (int precision = 1; precision <= 17; ++precision) {
    std::snprintf(buf, sizeof(buf), "%.*g", precision, v);
    if (std::strtod(buf, nullptr) == v) break;
  }
  return buf;
}

}  // namespace detail

// Rejects any pair of rules that could both match one (branch, layer, step)
// cell. Policies from parse_schedule and preset are already validated.
inline void validate_schedule(const SchedulePolicy& policy) {
  if (const auto clash = detail::find_overlap(policy.rules)) {
    const ScheduleRule& a = policy.rules[clash->first];
    const ScheduleRule& b = policy.rules[clash->second];
    throw ConfigError("schedule '" + policy.task + "': rule " +
                      std::to_string(clash->first + 1) + " (" + variant_name(a.variant) +
                      ") and rule " + std::to_string(clash->second + 1) + " (" +
                      variant_name(b.variant) + ") overlap");
  }
}

// Parses the line-based schedule grammar:
//   task=<name>
//   branch=<src|tar|both> steps=<f>:<f> layers=<f>:<f|all> variant=<name>
// '#' starts a comment; blank lines are skipped. Overlap validation is part
// of parsing.
inline SchedulePolicy parse_schedule(std::string_view text) {
  SchedulePolicy policy;
  std::vector<int> rule_lines;
  bool saw_task = false;
  int line_no = 0;

  std::size_t pos = 0;
  while (pos <= text.size()) {
    const std::size_t eol = text.find('\n', pos);
    std::string_view line =
        text.substr(pos, eol == std::string_view::npos ? text.size() - pos : eol - pos);
    pos = eol == std::string_view::npos ? text.size() + 1 : eol + 1;
    ++line_no;

    if (const std::size_t hash = line.find('#'); hash != std::string_view::npos) {
      line = line.substr(0, hash);
    }
    line = detail::trim(line);
    if (line.empty()) continue;

    // Tokenize on runs of spaces/tabs.
    std::vector<std::string_view> tokens;
    std::size_t i = 0;
    while (i < line.size()) {
      while (i < line.size() && (line[i] == ' ' || line[i] == '\t')) ++i;
      std::size_t j = i;
      while (j < line.size() && line[j] != ' ' && line[j] != '\t') ++j;
      if (j > i) tokens.push_back(line.substr(i, j - i));
      i = j;
    }

    if (tokens[0].substr(0, 5) == "task=") {
      if (saw_task) throw ParseError(line_no, "duplicate task header");
      if (tokens.size() != 1) throw ParseError(line_no, "task header takes no other fields");
      policy.task = std::string(tokens[0].substr(5));
      if (policy.task.empty()) throw ParseError(line_no, "task name is empty");
      saw_task = true;
      continue;
    }
    if (!saw_task) throw ParseError(line_no, "expected task=<name> before any rule");
    if (tokens.size() != 4) {
      throw ParseError(line_no,
                       "expected branch=... steps=... layers=... variant=..., got " +
                           std::to_string(tokens.size()) + " fields");
    }

    ScheduleRule rule;
    const std::string_view branch = detail::expect_field(tokens[0], "branch", line_no);
    if (branch == "src") {
      rule.branch = RuleBranch::Src;
    } else if (branch == "tar") {
      rule.branch = RuleBranch::Tar;
    } else if (branch == "both") {
      rule.branch = RuleBranch::Both;
    } else {
      throw ParseError(line_no, "unknown branch '" + std::string(branch) +
                                    "' (expected src, tar or both)");
    }

    rule.steps = detail::parse_interval(detail::expect_field(tokens[1], "steps", line_no),
                                        line_no, "steps");

    const std::string_view layers = detail::expect_field(tokens[2], "layers", line_no);
    if (layers == "all") {
      rule.all_layers = true;
      rule.layers = Interval{0.0, 1.0};
    } else {
      rule.all_layers = false;
      rule.layers = detail::parse_interval(layers, line_no, "layers");
    }

    const std::string_view variant = detail::expect_field(tokens[3], "variant", line_no);
    if (const auto v = try_parse_variant(variant)) {
      rule.variant = *v;
    } else {
      throw ParseError(line_no, "unknown variant '" + std::string(variant) + "'");
    }

    policy.rules.push_back(rule);
    rule_lines.push_back(line_no);
  }

  if (!saw_task) throw ParseError(0, "schedule has no task header");

  if (const auto clash = detail::find_overlap(policy.rules)) {
    throw ParseError(rule_lines[clash->second],
                     "rule overlaps the rule at line " +
                         std::to_string(rule_lines[clash->first]) + " (both can match one " +
                         "branch/layer/step cell)");
  }
  return policy;
}

// Emits the exact grammar parse_schedule reads; parse(render(p)) == p.
inline std::string render_schedule(const SchedulePolicy& policy) {
  std::string out = "task=" + policy.task + "\n";
  for (const ScheduleRule& r : policy.rules) {
    out += "branch=";
    out += rule_branch_name(r.branch);
    out += " steps=" + detail::format_fraction(r.steps.begin) + ":" +
           detail::format_fraction(r.steps.end);
    out += " layers=";
    if (r.all_layers) {
      out += "all";
    } else {
      out += detail::format_fraction(r.layers.begin) + ":" +
             detail::format_fraction(r.layers.end);
    }
    out += " variant=";
    out += variant_name(r.variant);
    out += "\n";
  }
  return out;
}

inline SchedulePolicy load_schedule(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open schedule file " + path.string());
  std::string text((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  try {
    return parse_schedule(text);
  } catch (const ParseError& e) {
    // e.what() already carries the line prefix; just add the file name.
    throw ParseError(0, path.string() + ": " + e.what());
  }
}

// Picks the variant for one attention evaluation. Indices convert to
// fractions as index/count, so step s of S lands in [s/S, (s+1)/S) and
// interval boundaries resolve to the later interval.
inline McaVariant resolve(const SchedulePolicy& policy, BranchRole branch, std::size_t layer,
                          std::size_t step, std::size_t layer_count, std::size_t step_count) {
  if (layer_count == 0 || step_count == 0) {
    throw ConfigError("resolve: layer and step counts must be positive");
  }
  if (layer >= layer_count || step >= step_count) {
    throw ConfigError("resolve: index out of range (layer " + std::to_string(layer) + "/" +
                      std::to_string(layer_count) + ", step " + std::to_string(step) + "/" +
                      std::to_string(step_count) + ")");
  }
  const double layer_f = static_cast<double>(layer) / static_cast<double>(layer_count);
  const double step_f = static_cast<double>(step) / static_cast<double>(step_count);
  for (const ScheduleRule& r : policy.rules) {
    if (!r.applies_to(branch)) continue;
    if (!r.steps.contains(step_f)) continue;
    if (!r.all_layers && !r.layers.contains(layer_f)) continue;
    return r.variant;
  }
  return McaVariant::Self;
}

inline const std::vector<std::string>& preset_tasks() {
  static const std::vector<std::string> kTasks = {
      "object_insertion_removal", "local_modification", "background_replacement",
      "color_material", "motion_viewpoint"};
  return kTasks;
}

// Built-in task schedules. Stage boundaries follow StageBoundaries defaults
// (early [0,0.3), mid [0.3,0.7), late [0.7,1)); the background task limits
// itself to the shallow and mid layer thirds. No preset uses a swap variant
// in the late stage: late swaps destabilize fine texture, so the branches
// settle independently there.
inline SchedulePolicy preset(std::string_view task) {
  const StageBoundaries sb;
  const LayerBoundaries lb;
  const Interval early{0.0, sb.f1};
  const Interval mid{sb.f1, sb.f2};
  const Interval late{sb.f2, 1.0};
  const Interval early_mid{0.0, sb.f2};
  const Interval shallow_mid{0.0, lb.g2};

  SchedulePolicy p;
  p.task = std::string(task);
  const auto rule = [](RuleBranch b, Interval steps, McaVariant v,
                       std::optional<Interval> layers = std::nullopt) {
    ScheduleRule r;
    r.branch = b;
    r.steps = steps;
    r.variant = v;
    if (layers) {
      r.all_layers = false;
      r.layers = *layers;
    }
    return r;
  };

  if (task == "object_insertion_removal") {
    // The source branch re-generates the unedited scene on its own; only the
    // edited branch reads across.
    p.rules = {rule(RuleBranch::Tar, early, McaVariant::SwapKV),
               rule(RuleBranch::Tar, mid, McaVariant::ConcatKV),
               rule(RuleBranch::Tar, late, McaVariant::Self)};
  } else if (task == "local_modification") {
    p.rules = {rule(RuleBranch::Both, early, McaVariant::SwapKV),
               rule(RuleBranch::Both, mid, McaVariant::ConcatKV),
               rule(RuleBranch::Both, late, McaVariant::Self)};
  } else if (task == "background_replacement") {
    p.rules = {rule(RuleBranch::Both, early_mid, McaVariant::SwapK, shallow_mid)};
  } else if (task == "color_material") {
    p.rules = {rule(RuleBranch::Both, early, McaVariant::SwapKV),
               rule(RuleBranch::Both, mid, McaVariant::ConcatK)};
  } else if (task == "motion_viewpoint") {
    p.rules = {rule(RuleBranch::Both, early_mid, McaVariant::ConcatKV)};
  } else {
    throw ConfigError("unknown schedule preset '" + std::string(task) + "'");
  }
  validate_schedule(p);
  return p;
}

}  // namespace mcaforge
