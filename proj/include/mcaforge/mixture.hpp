#pragma once

#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "mcaforge/error.hpp"
#include "mcaforge/rng.hpp"

namespace mcaforge {

// Weighted categorical distribution over named categories.
struct MixtureSpec {
  std::vector<std::pair<std::string, std::uint64_t>> categories;

  std::uint64_t total_weight() const {
    std::uint64_t total = 0;
    for (const auto& [name, w] : categories) total += w;
    return total;
  }

  void validate() const {
    if (categories.empty()) throw ConfigError("mixture: no categories");
    if (total_weight() == 0) throw ConfigError("mixture: all weights are zero");
    for (std::size_t i = 0; i < categories.size(); ++i) {
      for (std::size_t j = i + 1; j < categories.size(); ++j) {
        if (categories[i].first == categories[j].first) {
          throw ConfigError("mixture: duplicate category '" + categories[i].first + "'");
        }
      }
    }
  }
};

// Training-objective mix: generation, VLM reconstruction and consistency
// preservation at 7:2:1.
inline MixtureSpec objectives_mixture() {
  return {{{"generation", 7}, {"vlm_reconstruction", 2}, {"consistency_preservation", 1}}};
}

// Image-to-video data mix at 4:1.
inline MixtureSpec media_mixture() { return {{{"image", 4}, {"video", 1}}}; }

// Uniform mix over the three instruction forms.
inline MixtureSpec prompt_mixture() {
  return {{{"short", 1}, {"long", 1}, {"long_dense", 1}}};
}

// n i.i.d. draws; each category lands with probability weight/total exactly
// (the underlying integer draw is unbiased).
inline std::vector<std::string> mixture_sample(const MixtureSpec& spec, std::size_t n,
                                               std::uint64_t seed) {
  spec.validate();
  if (n == 0) throw ConfigError("mixture_sample: draw count must be positive");
  const std::uint64_t total = spec.total_weight();
  SplitMix64 rng(seed);
  std::vector<std::string> out;
  out.reserve(n);
  for (std::size_t i = 0; i < n; ++i) {
    std::uint64_t r = rng.below(total);
    for (const auto& [name, w] : spec.categories) {
      if (r < w) {
        out.push_back(name);
        break;
      }
      r -= w;
    }
  }
  return out;
}

}  // namespace mcaforge
