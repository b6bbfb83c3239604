#pragma once

#include <algorithm>
#include <charconv>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <set>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "json.hpp"

#include "mcaforge/backends.hpp"
#include "mcaforge/clip.hpp"
#include "mcaforge/error.hpp"
#include "mcaforge/rng.hpp"

namespace mcaforge {

// The fixed editing-category list; every bench case names one of these.
inline const std::vector<std::string>& bench_categories() {
  static const std::vector<std::string> kCategories = {
      "addition",       "removal",       "replacement", "recoloring",  "retexturing",
      "relocation",     "rescaling",     "background_switch", "weather_switch",
      "time_switch",    "season_switch", "stylization", "relighting"};
  return kCategories;
}

struct JudgeScore {
  double overall = 0.0;
  double ic = 0.0;
  double tvq = 0.0;
  double urp = 0.0;
  bool clamped = false;  // some raw judge value fell outside [1,5]

  bool operator==(const JudgeScore&) const = default;
};

struct BenchCase {
  std::string id;
  std::string category;
  std::string instruction;
  std::string src_clip;
  std::string edited_clip;
  std::string mask_ref;

  void validate() const {
    if (id.empty()) throw ConfigError("bench case: empty id");
    const auto& cats = bench_categories();
    if (std::find(cats.begin(), cats.end(), category) == cats.end()) {
      throw ConfigError("bench case " + id + ": unknown category '" + category + "'");
    }
    if (instruction.empty()) throw ConfigError("bench case " + id + ": empty instruction");
  }
};

inline std::string encode_case(const BenchCase& c) {
  c.validate();
  nlohmann::ordered_json j;
  j["id"] = c.id;
  j["category"] = c.category;
  j["instruction"] = c.instruction;
  j["src_clip"] = c.src_clip;
  j["edited_clip"] = c.edited_clip;
  j["mask"] = c.mask_ref;
  return j.dump();
}

inline BenchCase decode_case(const std::string& line) {
  nlohmann::ordered_json j;
  try {
    j = nlohmann::ordered_json::parse(line);
  } catch (const nlohmann::json::exception& e) {
    throw ParseError(0, std::string("bench case: ") + e.what());
  }
  BenchCase c;
  try {
    c.id = j.at("id").get<std::string>();
    c.category = j.at("category").get<std::string>();
    c.instruction = j.at("instruction").get<std::string>();
    c.src_clip = j.at("src_clip").get<std::string>();
    c.edited_clip = j.at("edited_clip").get<std::string>();
    c.mask_ref = j.at("mask").get<std::string>();
  } catch (const nlohmann::json::exception& e) {
    throw ParseError(0, std::string("bench case: ") + e.what());
  }
  c.validate();
  return c;
}

inline std::vector<BenchCase> read_cases(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open bench case list: " + path.string());
  std::vector<BenchCase> cases;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty()) continue;
    try {
      cases.push_back(decode_case(line));
    } catch (const Error& e) {
      throw ParseError(static_cast<int>(lineno), path.string() + ": " + e.what());
    }
  }
  return cases;
}

inline void write_cases(const std::filesystem::path& path, const std::vector<BenchCase>& cases) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot write bench case list: " + path.string());
  for (const auto& c : cases) out << encode_case(c) << '\n';
}

// The shipped 82-case demo list: categories cycle through the fixed list,
// so the first four categories carry seven cases and the rest six.
inline std::vector<BenchCase> fixture_cases() {
  const auto& cats = bench_categories();
  std::vector<BenchCase> cases;
  cases.reserve(82);
  for (std::size_t i = 0; i < 82; ++i) {
    BenchCase c;
    std::string n = std::to_string(i);
    while (n.size() < 4) n.insert(n.begin(), '0');
    c.id = "case_" + n;
    c.category = cats[i % cats.size()];
    c.instruction = "Perform the " + c.category + " edit described for clip " + c.id + ".";
    c.src_clip = "clips/" + c.id + ".src.mcat";
    c.edited_clip = "clips/" + c.id + ".tar.mcat";
    c.mask_ref = "clips/" + c.id + ".mask.mcat";
    cases.push_back(std::move(c));
  }
  return cases;
}

// Scoring judge: rates one edited sample against its instruction on the
// four 1-to-5 axes.
class ScoreJudge {
 public:
  virtual ~ScoreJudge() = default;
  virtual JudgeScore judge(const std::string& sample_ref, const std::string& instruction) = 0;
  virtual std::string version() const = 0;
};

// Deterministic stand-in: every axis is a pure hash of the request, spread
// uniformly over [1,5].
class MockScoreJudge : public ScoreJudge {
 public:
  JudgeScore judge(const std::string& sample_ref, const std::string& instruction) override {
    const std::uint64_t h = fnv1a(instruction, fnv1a(sample_ref));
    const auto axis = [&](std::uint64_t k) {
      return 1.0 + 4.0 * static_cast<double>(derive_seed(h, k) % 4001) / 4000.0;
    };
    return {axis(0), axis(1), axis(2), axis(3), false};
  }

  std::string version() const override { return "mock-score-judge/1"; }
};

class HttpScoreJudge : public ScoreJudge {
 public:
  explicit HttpScoreJudge(HttpBackendConfig cfg) : cfg_(std::move(cfg)) {}

  JudgeScore judge(const std::string& sample_ref, const std::string& instruction) override {
    nlohmann::ordered_json body;
    body["sample_ref"] = sample_ref;
    body["instruction"] = instruction;
    const auto j = detail::post_json(cfg_, "/v1/judge", body);
    return {detail::reply_field<double>(j, "overall", "/v1/judge"),
            detail::reply_field<double>(j, "ic", "/v1/judge"),
            detail::reply_field<double>(j, "tvq", "/v1/judge"),
            detail::reply_field<double>(j, "urp", "/v1/judge"), false};
  }

  std::string version() const override { return cfg_.label() + "/v1/judge"; }

 private:
  HttpBackendConfig cfg_;
};

// Clamps every axis into [1,5]; the flag records that clamping happened.
inline JudgeScore clamp_score(JudgeScore s) {
  for (double* v : {&s.overall, &s.ic, &s.tvq, &s.urp}) {
    if (!std::isfinite(*v)) throw BackendError("judge returned a non-finite score");
    if (*v < 1.0) {
      *v = 1.0;
      s.clamped = true;
    } else if (*v > 5.0) {
      *v = 5.0;
      s.clamped = true;
    }
  }
  return s;
}

inline JudgeScore score_sample(const BenchCase& c, ScoreJudge& judge) {
  c.validate();
  return clamp_score(judge.judge(c.edited_clip, c.instruction));
}

// 1 + 4*exp(-MSE/sigma) over the unedited region: identical content outside
// the mask scores exactly 5, and heavy damage decays toward 1.
inline double urp_proxy(const LatentClip& source, const LatentClip& edited, const EditMask& mask,
                        double sigma = 0.1) {
  if (!(sigma > 0.0)) throw ConfigError("urp_proxy: sigma must be positive");
  const double mse = alignment_metric(source, edited, mask);
  return 1.0 + 4.0 * std::exp(-mse / sigma);
}

// Mean squared frame-to-frame difference, the distance behind tvq_proxy.
inline double interframe_msd(const LatentClip& c) {
  c.validate();
  if (c.frames <= 1) return 0.0;
  const std::size_t per_frame = c.height * c.width * c.channels;
  double sum = 0.0;
  for (std::size_t f = 0; f + 1 < c.frames; ++f) {
    const float* cur = c.values.data() + f * per_frame;
    const float* nxt = cur + per_frame;
    for (std::size_t i = 0; i < per_frame; ++i) {
      const double d = static_cast<double>(nxt[i]) - static_cast<double>(cur[i]);
      sum += d * d;
    }
  }
  return sum / (static_cast<double>(c.frames - 1) * static_cast<double>(per_frame));
}

// Monotone decreasing in the inter-frame distance; a static clip scores 5
// and a single-frame clip has no temporal axis to violate, so it scores 5.
inline double tvq_proxy(const LatentClip& edited, double sigma = 1.0) {
  if (!(sigma > 0.0)) throw ConfigError("tvq_proxy: sigma must be positive");
  return 1.0 + 4.0 * std::exp(-interframe_msd(edited) / sigma);
}

struct MetricRow {
  std::size_t cases = 0;
  double overall = 0.0;
  double ic = 0.0;
  double tvq = 0.0;
  double urp = 0.0;
};

struct BenchAggregate {
  std::vector<std::pair<std::string, MetricRow>> categories;  // fixed-list order
  MetricRow all;
};

// Arithmetic means per category and across every case. The list is sorted
// by case id first, so the 64-bit reduction order does not depend on input
// order and equal inputs aggregate bit-identically.
inline BenchAggregate aggregate(const std::vector<std::pair<BenchCase, JudgeScore>>& scored) {
  if (scored.empty()) throw ConfigError("aggregate: no scored cases");
  std::vector<const std::pair<BenchCase, JudgeScore>*> order;
  order.reserve(scored.size());
  for (const auto& s : scored) {
    s.first.validate();
    order.push_back(&s);
  }
  std::sort(order.begin(), order.end(),
            [](const auto* a, const auto* b) { return a->first.id < b->first.id; });
  for (std::size_t i = 1; i < order.size(); ++i) {
    if (order[i - 1]->first.id == order[i]->first.id) {
      throw ConfigError("aggregate: duplicate case id '" + order[i]->first.id + "'");
    }
  }

  struct Sums {
    std::size_t n = 0;
    double overall = 0.0, ic = 0.0, tvq = 0.0, urp = 0.0;
  };
  const auto& cats = bench_categories();
  std::vector<Sums> per_cat(cats.size());
  Sums total;
  for (const auto* s : order) {
    const std::size_t ci = static_cast<std::size_t>(
        std::find(cats.begin(), cats.end(), s->first.category) - cats.begin());
    for (Sums* acc : {&per_cat[ci], &total}) {
      acc->n += 1;
      acc->overall += s->second.overall;
      acc->ic += s->second.ic;
      acc->tvq += s->second.tvq;
      acc->urp += s->second.urp;
    }
  }

  const auto row = [](const Sums& s) {
    const double n = static_cast<double>(s.n);
    return MetricRow{s.n, s.overall / n, s.ic / n, s.tvq / n, s.urp / n};
  };
  BenchAggregate agg;
  for (std::size_t ci = 0; ci < cats.size(); ++ci) {
    if (per_cat[ci].n > 0) agg.categories.emplace_back(cats[ci], row(per_cat[ci]));
  }
  agg.all = row(total);
  return agg;
}

namespace detail {

// Two decimals, rounding halves up. The value is first taken to its
// shortest round-trip decimal form, so a stored 4.605 prints as "4.61"
// even though the nearest binary double sits a hair below the half.
inline std::string format_score(double v) {
  if (!std::isfinite(v) || v < 0.0 || v >= 1000.0) {
    throw ConfigError("format_score: value out of table range");
  }
  char buf[64];
  const auto res = std::to_chars(buf, buf + sizeof(buf), v);
  std::string s(buf, res.ptr);
  if (s.find('e') != std::string::npos) {
    // Tiny magnitudes print scientific; a plain expansion is exact enough.
    const int n = std::snprintf(buf, sizeof(buf), "%.12f", v);
    s.assign(buf, static_cast<std::size_t>(n));
  }
  const std::size_t dot = s.find('.');
  std::string digits = (dot == std::string::npos) ? s : s.substr(0, dot) + s.substr(dot + 1);
  std::size_t frac = (dot == std::string::npos) ? 0 : s.size() - dot - 1;
  while (frac < 3) {
    digits += '0';
    ++frac;
  }
  // Round half-up at the second fractional digit.
  const std::size_t keep = digits.size() - frac + 2;
  bool round_up = digits[keep] >= '5';
  digits = digits.substr(0, keep);
  if (round_up) {
    for (std::size_t i = digits.size(); i-- > 0;) {
      if (digits[i] < '9') {
        digits[i] += 1;
        round_up = false;
        break;
      }
      digits[i] = '0';
    }
    if (round_up) digits.insert(digits.begin(), '1');
  }
  std::string out(digits.begin(), digits.end() - 2);
  out += '.';
  out += digits.substr(digits.size() - 2);
  return out;
}

inline std::string pad_left(const std::string& s, std::size_t width) {
  return s.size() >= width ? s : std::string(width - s.size(), ' ') + s;
}

inline std::string pad_right(const std::string& s, std::size_t width) {
  return s.size() >= width ? s : s + std::string(width - s.size(), ' ');
}

inline std::string table_row(const std::string& name, const MetricRow& r) {
  std::string line = pad_right(name, 18);
  line += pad_left(std::to_string(r.cases), 7);
  for (const double v : {r.overall, r.ic, r.tvq, r.urp}) {
    line += pad_left(format_score(v), 9);
  }
  return line;
}

}  // namespace detail

// Fixed-width text table: one row per present category in list order, then
// the across-all-cases summary row. Scores print with two decimals.
inline std::string render_table(const BenchAggregate& agg) {
  if (agg.all.cases == 0) throw ConfigError("render_table: empty aggregate");
  std::string out = detail::pad_right("category", 18) + detail::pad_left("cases", 7);
  for (const char* col : {"overall", "ic", "tvq", "urp"}) {
    out += detail::pad_left(col, 9);
  }
  out += '\n';
  for (const auto& [name, row] : agg.categories) {
    out += detail::table_row(name, row) + '\n';
  }
  out += detail::table_row("all", agg.all) + '\n';
  return out;
}

inline BenchAggregate parse_table(const std::string& text) {
  std::istringstream in(text);
  BenchAggregate agg;
  bool saw_header = false, saw_all = false;
  std::string line;
  int lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty()) continue;
    std::istringstream ls(line);
    std::string name;
    ls >> name;
    if (!saw_header) {
      if (name != "category") throw ParseError(lineno, "table must start with its header");
      saw_header = true;
      continue;
    }
    if (saw_all) throw ParseError(lineno, "rows after the summary row");
    MetricRow row;
    ls >> row.cases >> row.overall >> row.ic >> row.tvq >> row.urp;
    if (!ls) throw ParseError(lineno, "malformed table row '" + line + "'");
    if (name == "all") {
      agg.all = row;
      saw_all = true;
    } else {
      const auto& cats = bench_categories();
      if (std::find(cats.begin(), cats.end(), name) == cats.end()) {
        throw ParseError(lineno, "unknown category '" + name + "'");
      }
      agg.categories.emplace_back(name, row);
    }
  }
  if (!saw_header) throw ParseError(0, "table has no header");
  if (!saw_all) throw ParseError(0, "table has no summary row");
  return agg;
}

// Scores a case list with one judge and aggregates. Sequential: scoring a
// case is independent work, but the shipped judges are cheap enough that a
// pool would only blur determinism of HTTP request order.
inline BenchAggregate score_cases(const std::vector<BenchCase>& cases, ScoreJudge& judge) {
  if (cases.empty()) throw ConfigError("score_cases: empty case list");
  std::vector<std::pair<BenchCase, JudgeScore>> scored;
  scored.reserve(cases.size());
  for (const auto& c : cases) scored.emplace_back(c, score_sample(c, judge));
  return aggregate(scored);
}

}  // namespace mcaforge
