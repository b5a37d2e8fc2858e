#pragma once

#include <cstddef>
#include <stdexcept>
#include <string>
#include <string_view>

namespace dualmode {

// Selects causal (left-context) or full-context behaviour of every dual-mode
// layer for one forward pass.
enum class Mode { Streaming, FullContext };

constexpr std::size_t mode_index(Mode m) { return m == Mode::Streaming ? 0 : 1; }

constexpr std::string_view to_string(Mode m) {
  return m == Mode::Streaming ? "streaming" : "fullcontext";
}

inline Mode parse_mode(std::string_view s) {
  if (s == "streaming") return Mode::Streaming;
  if (s == "fullcontext") return Mode::FullContext;
  throw std::invalid_argument("unknown mode '" + std::string(s) +
                              "' (expected streaming or fullcontext)");
}

}  // namespace dualmode
