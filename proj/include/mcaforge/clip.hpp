#pragma once

#include <cstddef>
#include <cstdint>
#include <string>
#include <vector>

#include "mcaforge/error.hpp"
#include "mcaforge/tensor.hpp"

namespace mcaforge {

struct ClipDims {
  std::size_t frames = 8;
  std::size_t height = 8;
  std::size_t width = 8;
  std::size_t channels = 8;

  std::size_t tokens() const { return frames * height * width; }
  bool operator==(const ClipDims&) const = default;
};

// A latent video: one token per (frame, y, x) cell, each a channel vector.
// Tokens are laid out frame-major, then row-major within a frame.
struct LatentClip {
  std::size_t frames = 0;
  std::size_t height = 0;
  std::size_t width = 0;
  std::size_t channels = 0;
  Tensor values;  // [frames*height*width, channels]

  std::size_t tokens() const { return frames * height * width; }

  std::size_t token_index(std::size_t f, std::size_t y, std::size_t x) const {
    return (f * height + y) * width + x;
  }

  ClipDims dims() const { return {frames, height, width, channels}; }

  void validate() const {
    if (values.rank() != 2 || values.rows() != tokens() || values.cols() != channels) {
      throw ShapeError("latent clip values have shape (" + values.shape_string() +
                       "), expected " + std::to_string(tokens()) + "x" +
                       std::to_string(channels));
    }
  }
};

inline LatentClip make_clip(const ClipDims& d, Tensor values) {
  LatentClip c{d.frames, d.height, d.width, d.channels, std::move(values)};
  c.validate();
  return c;
}

// Per-token edit flags; 1 marks a token the edit touches.
using EditMask = std::vector<std::uint8_t>;

// Mean squared channel difference over tokens the mask leaves unedited.
// Identical clips give exactly 0; an all-edited mask gives 0 by convention
// (there is nothing to preserve).
inline double alignment_metric(const LatentClip& a, const LatentClip& b, const EditMask& mask) {
  if (a.dims() != b.dims()) {
    throw ShapeError("alignment_metric: clip dimensions differ");
  }
  if (mask.size() != a.tokens()) {
    throw ShapeError("alignment_metric: mask length " + std::to_string(mask.size()) +
                     " does not match token count " + std::to_string(a.tokens()));
  }
  double acc = 0.0;
  std::size_t cells = 0;
  for (std::size_t tok = 0; tok < a.tokens(); ++tok) {
    if (mask[tok]) continue;
    for (std::size_t c = 0; c < a.channels; ++c) {
      const double d = static_cast<double>(a.values.at(tok, c)) -
                       static_cast<double>(b.values.at(tok, c));
      acc += d * d;
    }
    cells += a.channels;
  }
  return cells == 0 ? 0.0 : acc / static_cast<double>(cells);
}

}  // namespace mcaforge
