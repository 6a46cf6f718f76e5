#pragma once

// Standard MIDI file reader and writer for monophonic 4/4 melodies.

#include <cmath>
#include <cstdint>
#include <map>
#include <span>
#include <string>
#include <vector>

#include "sketchnet/errors.hpp"
#include "sketchnet/melody.hpp"

namespace sketchnet::midi {

inline constexpr int kExportDivision = 96;  // ticks per quarter note
inline constexpr int kExportVelocity = 80;

/// A note event in absolute ticks, as found in or written to a file.
struct NoteEvent {
  std::uint32_t on_tick = 0;
  std::uint32_t off_tick = 0;
  int pitch = 0;
  int velocity = 0;
};

struct MidiContents {
  int division = 0;
  double tempo = 120.0;
  std::uint32_t end_tick = 0;
  std::vector<NoteEvent> notes;
};

namespace detail {

class Reader {
 public:
  explicit Reader(std::span<const std::uint8_t> data) : data_(data) {}

  bool done() const { return pos_ >= data_.size(); }
  std::size_t pos() const { return pos_; }
  void seek(std::size_t p) { pos_ = p; }

  std::uint8_t u8() {
    if (pos_ >= data_.size()) throw ParseError("unexpected end of MIDI data");
    return data_[pos_++];
  }
  std::uint8_t peek() const {
    if (pos_ >= data_.size()) throw ParseError("unexpected end of MIDI data");
    return data_[pos_];
  }
  std::uint32_t be(int bytes) {
    std::uint32_t v = 0;
    for (int i = 0; i < bytes; ++i) v = (v << 8) | u8();
    return v;
  }
  std::uint32_t vlq() {
    std::uint32_t v = 0;
    for (int i = 0; i < 4; ++i) {
      const auto b = u8();
      v = (v << 7) | (b & 0x7F);
      if (!(b & 0x80)) return v;
    }
    throw ParseError("variable-length quantity longer than 4 bytes");
  }
  std::string tag() {
    std::string s;
    for (int i = 0; i < 4; ++i) s.push_back(static_cast<char>(u8()));
    return s;
  }
  void skip(std::size_t n) {
    if (pos_ + n > data_.size()) throw ParseError("chunk runs past end of file");
    pos_ += n;
  }

 private:
  std::span<const std::uint8_t> data_;
  std::size_t pos_ = 0;
};

inline void put_be(std::vector<std::uint8_t>& out, std::uint32_t v, int bytes) {
  for (int i = bytes - 1; i >= 0; --i) out.push_back(static_cast<std::uint8_t>((v >> (8 * i)) & 0xFF));
}

inline void put_vlq(std::vector<std::uint8_t>& out, std::uint32_t v) {
  std::uint8_t buf[5];
  int n = 0;
  buf[n++] = v & 0x7F;
  while ((v >>= 7) != 0) buf[n++] = static_cast<std::uint8_t>((v & 0x7F) | 0x80);
  while (n > 0) out.push_back(buf[--n]);
}

}  // namespace detail

/// Reads every note of every track. Rejects non-4/4 time signatures.
inline MidiContents read(std::span<const std::uint8_t> bytes) {
  detail::Reader r(bytes);
  if (bytes.size() < 14 || r.tag() != "MThd") throw ParseError("missing MThd header");
  const auto header_len = r.be(4);
  const auto header_end = r.pos() + header_len;
  r.be(2);  // format
  const auto n_tracks = r.be(2);
  const auto division = r.be(2);
  if (division & 0x8000) throw ParseError("SMPTE time division is not supported");
  if (division == 0) throw ParseError("zero time division");
  r.seek(header_end);

  MidiContents out;
  out.division = static_cast<int>(division);
  bool tempo_seen = false;

  for (std::uint32_t t = 0; t < n_tracks && !r.done(); ++t) {
    const auto tag = r.tag();
    const auto len = r.be(4);
    if (tag != "MTrk") {
      r.skip(len);
      --t;
      continue;
    }
    const auto end = r.pos() + len;
    std::uint32_t tick = 0;
    std::uint8_t running = 0;
    std::map<int, std::pair<std::uint32_t, int>> open;  // channel*128+pitch -> (tick, velocity)
    while (r.pos() < end) {
      tick += r.vlq();
      std::uint8_t status = r.peek();
      if (status & 0x80) {
        r.u8();
        if (status < 0xF0) running = status;
      } else {
        if (!running) throw ParseError("running status without a previous status byte");
        status = running;
      }
      if (status == 0xFF) {
        const auto type = r.u8();
        const auto mlen = r.vlq();
        const auto start = r.pos();
        if (type == 0x51 && mlen == 3 && !tempo_seen) {
          const auto usec = r.be(3);
          if (usec > 0) out.tempo = 60'000'000.0 / usec;
          tempo_seen = true;
        } else if (type == 0x58 && mlen >= 2) {
          const int num = r.u8();
          const int den = 1 << r.u8();
          if (num != 4 || den != 4) {
            throw UnsupportedMeter("time signature " + std::to_string(num) + "/" +
                                   std::to_string(den) + " is not 4/4");
          }
        }
        r.seek(start + mlen);
        if (type == 0x2F) out.end_tick = std::max(out.end_tick, tick);
        continue;
      }
      if (status == 0xF0 || status == 0xF7) {
        r.skip(r.vlq());
        continue;
      }
      const int kind = status & 0xF0;
      const int channel = status & 0x0F;
      const int d1 = r.u8();
      const int d2 = (kind == 0xC0 || kind == 0xD0) ? 0 : r.u8();
      if (kind == 0x90 && d2 > 0) {
        open[channel * 128 + d1] = {tick, d2};
      } else if (kind == 0x80 || (kind == 0x90 && d2 == 0)) {
        auto it = open.find(channel * 128 + d1);
        if (it != open.end()) {
          out.notes.push_back({it->second.first, tick, d1, it->second.second});
          open.erase(it);
        }
      }
    }
    for (const auto& [key, on] : open) out.notes.push_back({on.first, tick, key % 128, on.second});
    r.seek(end);
  }
  std::sort(out.notes.begin(), out.notes.end(),
            [](const NoteEvent& a, const NoteEvent& b) { return a.on_tick < b.on_tick; });
  return out;
}

/// Quantizes a MIDI file into measures. Overlaps longer than a quarter frame
/// are treated as polyphony.
inline Melody to_melody(const MidiContents& contents, const std::string& source_id = "midi") {
  const double ticks_per_frame = 4.0 * contents.division / kFramesPerMeasure;
  std::vector<TimedNote> notes;
  for (std::size_t i = 0; i < contents.notes.size(); ++i) {
    const auto& n = contents.notes[i];
    if (i + 1 < contents.notes.size()) {
      const auto& next = contents.notes[i + 1];
      const double overlap = static_cast<double>(n.off_tick) - static_cast<double>(next.on_tick);
      if (overlap > ticks_per_frame / 4.0) {
        throw PolyphonyError("overlapping notes at tick " + std::to_string(next.on_tick));
      }
    }
    notes.push_back({n.on_tick / ticks_per_frame, n.off_tick / ticks_per_frame, n.pitch});
  }
  const double end_frames = contents.end_tick / ticks_per_frame;
  const int min_measures =
      static_cast<int>(std::ceil((end_frames - 0.5) / kFramesPerMeasure - 1e-9));
  Melody m;
  m.meta.source_id = source_id;
  m.meta.tempo = contents.tempo;
  m.measures = quantize_timeline(std::move(notes), min_measures);
  return m;
}

/// Note events of a measure list after playback repair, in export ticks.
inline std::vector<NoteEvent> note_events(std::span<const FrameSequence> measures) {
  constexpr int ticks_per_frame = 4 * kExportDivision / kFramesPerMeasure;
  std::vector<NoteEvent> events;
  for (std::size_t m = 0; m < measures.size(); ++m) {
    const auto fixed = repair_for_playback(measures[m]);
    for (const auto& n : decode_notes(fixed)) {
      const auto base = static_cast<std::uint32_t>(m * kFramesPerMeasure + static_cast<std::size_t>(n.onset));
      events.push_back({base * ticks_per_frame,
                        (base + static_cast<std::uint32_t>(n.duration)) * ticks_per_frame, n.pitch,
                        kExportVelocity});
    }
  }
  return events;
}

/// Single-track format-0 file; each frame is 1/24 of a 4/4 measure.
inline std::vector<std::uint8_t> write(std::span<const FrameSequence> measures, double tempo) {
  using detail::put_be;
  using detail::put_vlq;
  std::vector<std::uint8_t> track;
  auto meta = [&](std::uint32_t delta, std::uint8_t type, std::initializer_list<std::uint8_t> data) {
    put_vlq(track, delta);
    track.push_back(0xFF);
    track.push_back(type);
    put_vlq(track, static_cast<std::uint32_t>(data.size()));
    track.insert(track.end(), data.begin(), data.end());
  };
  const auto usec = static_cast<std::uint32_t>(std::lround(60'000'000.0 / std::max(tempo, 1.0)));
  meta(0, 0x51, {static_cast<std::uint8_t>(usec >> 16), static_cast<std::uint8_t>(usec >> 8),
                 static_cast<std::uint8_t>(usec)});
  meta(0, 0x58, {4, 2, 24, 8});

  std::uint32_t now = 0;
  for (const auto& e : note_events(measures)) {
    put_vlq(track, e.on_tick - now);
    track.insert(track.end(), {0x90, static_cast<std::uint8_t>(e.pitch), static_cast<std::uint8_t>(e.velocity)});
    put_vlq(track, e.off_tick - e.on_tick);
    track.insert(track.end(), {0x80, static_cast<std::uint8_t>(e.pitch), 0});
    now = e.off_tick;
  }
  const auto end = static_cast<std::uint32_t>(measures.size() * 4 * kExportDivision);
  meta(end > now ? end - now : 0, 0x2F, {});

  std::vector<std::uint8_t> out = {'M', 'T', 'h', 'd'};
  put_be(out, 6, 4);
  put_be(out, 0, 2);
  put_be(out, 1, 2);
  put_be(out, kExportDivision, 2);
  out.insert(out.end(), {'M', 'T', 'r', 'k'});
  put_be(out, static_cast<std::uint32_t>(track.size()), 4);
  out.insert(out.end(), track.begin(), track.end());
  return out;
}

}  // namespace sketchnet::midi
