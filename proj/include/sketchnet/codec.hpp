#pragma once

// Measure-level token codec: 24-frame encoding of one 4/4 measure and its
// factorization into a pitch-contour stream and a rhythm stream.

#include <algorithm>
#include <array>
#include <compare>
#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "sketchnet/errors.hpp"

namespace sketchnet {

inline constexpr int kFramesPerMeasure = 24;
inline constexpr int kBeatsPerMeasure = 4;
inline constexpr int kTicksPerBeat = 6;
static_assert(kBeatsPerMeasure * kTicksPerBeat == kFramesPerMeasure);

// Frame alphabet: 0..127 onsets, then HOLD and REST.
inline constexpr int kHold = 128;
inline constexpr int kRest = 129;
inline constexpr int kFrameVocab = 130;

// Pitch-contour alphabet: 0..127 pitches, then PAD.
inline constexpr int kPitchPad = 128;
inline constexpr int kPitchVocab = 129;

// Rhythm alphabet.
inline constexpr int kRhythmOnset = 0;
inline constexpr int kRhythmHold = 1;
inline constexpr int kRhythmRest = 2;
inline constexpr int kRhythmVocab = 3;

using TokenArray = std::array<int, kFramesPerMeasure>;

/// One measure as 24 frame tokens.
struct FrameSequence {
  TokenArray tokens{};

  int& operator[](std::size_t i) { return tokens[i]; }
  int operator[](std::size_t i) const { return tokens[i]; }
  auto operator<=>(const FrameSequence&) const = default;

  static FrameSequence rest() {
    FrameSequence f;
    f.tokens.fill(kRest);
    return f;
  }
};

/// Onset pitches of a measure compacted to the front, PAD-filled.
struct PitchSeq {
  TokenArray tokens{};

  int& operator[](std::size_t i) { return tokens[i]; }
  int operator[](std::size_t i) const { return tokens[i]; }
  auto operator<=>(const PitchSeq&) const = default;

  int onset_count() const {
    return static_cast<int>(std::count_if(tokens.begin(), tokens.end(),
                                          [](int t) { return t != kPitchPad; }));
  }
};

/// Positional ONSET / HOLD / REST pattern of a measure.
struct RhythmSeq {
  TokenArray tokens{};

  int& operator[](std::size_t i) { return tokens[i]; }
  int operator[](std::size_t i) const { return tokens[i]; }
  auto operator<=>(const RhythmSeq&) const = default;

  int onset_count() const {
    return static_cast<int>(std::count(tokens.begin(), tokens.end(), kRhythmOnset));
  }
};

/// A note inside one measure, in frame units.
struct MeasureNote {
  int onset = 0;
  int duration = 0;
  int pitch = 0;
  auto operator<=>(const MeasureNote&) const = default;
};

inline bool in_frame_vocab(int t) { return t >= 0 && t < kFrameVocab; }
inline bool is_onset(int t) { return t >= 0 && t < 128; }

/// True when every token is in-vocabulary and no HOLD starts the measure or
/// follows a REST.
inline bool is_well_formed(const FrameSequence& f) {
  int prev = kRest;
  for (int i = 0; i < kFramesPerMeasure; ++i) {
    const int t = f[i];
    if (!in_frame_vocab(t)) return false;
    if (t == kHold && prev == kRest) return false;
    prev = t;
  }
  return true;
}

inline bool is_valid(const PitchSeq& p) {
  bool seen_pad = false;
  for (int t : p.tokens) {
    if (t < 0 || t >= kPitchVocab) return false;
    if (t == kPitchPad) {
      seen_pad = true;
    } else if (seen_pad) {
      return false;
    }
  }
  return true;
}

inline bool is_valid(const RhythmSeq& r) {
  return std::all_of(r.tokens.begin(), r.tokens.end(),
                     [](int t) { return t >= 0 && t < kRhythmVocab; });
}

/// Builds a measure from sorted, non-overlapping notes.
inline FrameSequence encode_measure(std::span<const MeasureNote> notes) {
  FrameSequence f = FrameSequence::rest();
  int cursor = 0;
  for (const auto& n : notes) {
    if (n.pitch < 0 || n.pitch > 127) {
      throw RangeError("pitch " + std::to_string(n.pitch) + " outside 0..127");
    }
    if (n.onset < 0 || n.onset >= kFramesPerMeasure || n.duration < 1 ||
        n.onset + n.duration > kFramesPerMeasure) {
      throw RangeError("note at frame " + std::to_string(n.onset) + " with duration " +
                       std::to_string(n.duration) + " does not fit in the measure");
    }
    if (n.onset < cursor) {
      throw OverlapError("note at frame " + std::to_string(n.onset) +
                         " overlaps or precedes the previous note");
    }
    f[n.onset] = n.pitch;
    for (int i = n.onset + 1; i < n.onset + n.duration; ++i) f[i] = kHold;
    cursor = n.onset + n.duration;
  }
  return f;
}

inline FrameSequence encode_measure(std::initializer_list<MeasureNote> notes) {
  return encode_measure(std::span<const MeasureNote>(notes.begin(), notes.size()));
}

/// Inverse of encode_measure for well-formed measures.
inline std::vector<MeasureNote> decode_notes(const FrameSequence& f) {
  std::vector<MeasureNote> notes;
  for (int i = 0; i < kFramesPerMeasure; ++i) {
    if (is_onset(f[i])) {
      notes.push_back({i, 1, f[i]});
    } else if (f[i] == kHold && !notes.empty() &&
               notes.back().onset + notes.back().duration == i) {
      ++notes.back().duration;
    }
  }
  return notes;
}

inline RhythmSeq rhythm_of(const FrameSequence& f) {
  RhythmSeq r;
  for (int i = 0; i < kFramesPerMeasure; ++i) {
    r[i] = is_onset(f[i]) ? kRhythmOnset : (f[i] == kHold ? kRhythmHold : kRhythmRest);
  }
  return r;
}

inline PitchSeq pitch_of(const FrameSequence& f) {
  PitchSeq p;
  p.tokens.fill(kPitchPad);
  int k = 0;
  for (int t : f.tokens) {
    if (is_onset(t)) p[k++] = t;
  }
  return p;
}

struct Factorized {
  PitchSeq pitch;
  RhythmSeq rhythm;
};

inline Factorized factorize(const FrameSequence& f) { return {pitch_of(f), rhythm_of(f)}; }

/// k-th ONSET in the rhythm receives the k-th pitch. Surplus pitches are ignored.
inline FrameSequence recombine(const PitchSeq& p, const RhythmSeq& r) {
  if (p.onset_count() < r.onset_count()) {
    throw ArityMismatch("rhythm has " + std::to_string(r.onset_count()) +
                        " onsets but only " + std::to_string(p.onset_count()) +
                        " pitches are available");
  }
  FrameSequence f;
  int k = 0;
  for (int i = 0; i < kFramesPerMeasure; ++i) {
    switch (r[i]) {
      case kRhythmOnset: f[i] = p[k++]; break;
      case kRhythmHold: f[i] = kHold; break;
      case kRhythmRest: f[i] = kRest; break;
      default: throw VocabError("rhythm token " + std::to_string(r[i]) + " out of range");
    }
  }
  return f;
}

/// PitchSeq from a free-form contour: truncated to 24 entries, PAD-filled.
inline PitchSeq pitch_seq_from_contour(std::span<const int> contour) {
  PitchSeq p;
  p.tokens.fill(kPitchPad);
  const auto n = std::min<std::size_t>(contour.size(), kFramesPerMeasure);
  for (std::size_t i = 0; i < n; ++i) {
    if (contour[i] < 0 || contour[i] > 127) {
      throw RangeError("contour pitch " + std::to_string(contour[i]) + " outside 0..127");
    }
    p[i] = contour[i];
  }
  return p;
}

/// Fits a contour to a rhythm: cycled when short, truncated when long.
inline FrameSequence realize_contour(std::span<const int> contour, const RhythmSeq& r) {
  if (contour.empty()) throw SpecError("empty pitch contour");
  PitchSeq p;
  p.tokens.fill(kPitchPad);
  const int onsets = r.onset_count();
  for (int k = 0; k < onsets; ++k) p[k] = contour[static_cast<std::size_t>(k) % contour.size()];
  return recombine(p, r);
}

/// Playback-only repair: HOLD at frame 0 or after REST becomes REST, and
/// out-of-vocabulary tokens become REST.
inline FrameSequence repair_for_playback(FrameSequence f) {
  int prev = kRest;
  for (int i = 0; i < kFramesPerMeasure; ++i) {
    if (!in_frame_vocab(f[i]) || (f[i] == kHold && prev == kRest)) f[i] = kRest;
    prev = f[i];
  }
  return f;
}

}  // namespace sketchnet
