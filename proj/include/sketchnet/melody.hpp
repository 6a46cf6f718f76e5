#pragma once

#include <algorithm>
#include <cmath>
#include <string>
#include <vector>

#include "sketchnet/codec.hpp"

namespace sketchnet {

struct MelodyMeta {
  std::string source_id;
  std::string key = "C";
  double tempo = 120.0;  // quarter notes per minute
};

/// A monophonic 4/4 melody as a sequence of 24-frame measures.
struct Melody {
  std::vector<FrameSequence> measures;
  MelodyMeta meta;

  std::size_t size() const { return measures.size(); }
};

/// A note on an absolute time line measured in frames (24 per measure).
struct TimedNote {
  double start = 0.0;
  double end = 0.0;
  int pitch = 0;
};

/// Nearest frame; exact halves resolve toward the earlier frame.
inline int snap_to_frame(double t) { return static_cast<int>(std::ceil(t - 0.5 - 1e-9)); }

/// Snaps a monophonic time line onto the frame grid and cuts it into measures.
/// Notes that cross a barline continue as a fresh onset in the next measure.
/// `min_measures` pads the result with rest measures.
inline std::vector<FrameSequence> quantize_timeline(std::vector<TimedNote> notes,
                                                    int min_measures = 0) {
  std::sort(notes.begin(), notes.end(),
            [](const TimedNote& a, const TimedNote& b) { return a.start < b.start; });

  struct Span {
    int start, end, pitch;
  };
  std::vector<Span> spans;
  for (const auto& n : notes) {
    int s = std::max(0, snap_to_frame(n.start));
    int e = snap_to_frame(n.end);
    if (e <= s) e = s + 1;
    if (!spans.empty() && spans.back().start >= s) spans.pop_back();  // later onset wins
    if (!spans.empty() && spans.back().end > s) spans.back().end = s;
    spans.push_back({s, e, n.pitch});
  }

  int last_frame = 0;
  for (const auto& s : spans) last_frame = std::max(last_frame, s.end);
  const int n_measures =
      std::max({min_measures, (last_frame + kFramesPerMeasure - 1) / kFramesPerMeasure, 1});

  std::vector<std::vector<MeasureNote>> per_measure(static_cast<std::size_t>(n_measures));
  for (const auto& s : spans) {
    for (int m = s.start / kFramesPerMeasure; m * kFramesPerMeasure < s.end; ++m) {
      const int lo = std::max(s.start, m * kFramesPerMeasure);
      const int hi = std::min(s.end, (m + 1) * kFramesPerMeasure);
      per_measure[static_cast<std::size_t>(m)].push_back(
          {lo - m * kFramesPerMeasure, hi - lo, s.pitch});
    }
  }

  std::vector<FrameSequence> out;
  out.reserve(per_measure.size());
  for (const auto& m : per_measure) out.push_back(encode_measure(m));
  return out;
}

}  // namespace sketchnet
