#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "sketchnet/abc.hpp"
#include "sketchnet/midi.hpp"

namespace sketchnet {

enum class ScoreFormat { Abc, Midi };

/// Parses one monophonic 4/4 score into measures.
inline Melody parse_score(std::span<const std::uint8_t> source, ScoreFormat format,
                          const std::string& source_id = "score") {
  switch (format) {
    case ScoreFormat::Abc: {
      const std::string_view text(reinterpret_cast<const char*>(source.data()), source.size());
      return abc::parse(text, source_id);
    }
    case ScoreFormat::Midi: return midi::to_melody(midi::read(source), source_id);
  }
  throw ParseError("unknown score format");
}

inline Melody parse_score(std::string_view abc_text, const std::string& source_id = "score") {
  return abc::parse(abc_text, source_id);
}

inline std::vector<std::uint8_t> export_midi(std::span<const FrameSequence> measures,
                                             double tempo = 120.0) {
  return midi::write(measures, tempo);
}

}  // namespace sketchnet
