#pragma once

// ABC notation reader for single-voice 4/4 folk tunes.
//
// Supported: header fields X T M L Q K, inline fields, accidentals with bar
// scope, key signatures with modes, note lengths, broken rhythm, tuplets,
// ties, rests (z x Z), repeats with first/second endings. Chord symbols,
// decorations, slurs and grace notes are skipped. Chords with more than one
// note and multiple voices are rejected.

#include <array>
#include <cctype>
#include <algorithm>
#include <cmath>
#include <functional>
#include <map>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include "sketchnet/errors.hpp"
#include "sketchnet/melody.hpp"

namespace sketchnet::abc {

namespace detail {

inline std::string_view trim(std::string_view s) {
  while (!s.empty() && std::isspace(static_cast<unsigned char>(s.front()))) s.remove_prefix(1);
  while (!s.empty() && std::isspace(static_cast<unsigned char>(s.back()))) s.remove_suffix(1);
  return s;
}

inline std::string lower(std::string_view s) {
  std::string out(s);
  for (auto& c : out) c = static_cast<char>(std::tolower(static_cast<unsigned char>(c)));
  return out;
}

// Letter index C=0 .. B=6.
inline int letter_index(char upper) {
  switch (upper) {
    case 'C': return 0;
    case 'D': return 1;
    case 'E': return 2;
    case 'F': return 3;
    case 'G': return 4;
    case 'A': return 5;
    case 'B': return 6;
    default: return -1;
  }
}

inline constexpr std::array<int, 7> kLetterSemitone = {0, 2, 4, 5, 7, 9, 11};

/// Per-letter alteration (-1, 0, +1) implied by a K: field.
inline std::array<int, 7> key_signature(std::string_view field) {
  std::array<int, 7> acc{};
  const auto k = trim(field);
  if (k.empty()) return acc;
  const auto lk = lower(k);
  if (lk.rfind("none", 0) == 0 || lk.rfind("hp", 0) == 0) return acc;
  const char tonic = static_cast<char>(std::toupper(static_cast<unsigned char>(k[0])));
  static constexpr std::array<int, 7> kFifths = {0, 2, 4, -1, 1, 3, 5};  // C D E F G A B
  const int li = letter_index(tonic);
  if (li < 0) throw ParseError("unreadable key '" + std::string(k) + "'");
  int sharps = kFifths[static_cast<std::size_t>(li)];
  std::size_t pos = 1;
  if (pos < k.size() && (k[pos] == '#' || k[pos] == 'b')) {
    sharps += k[pos] == '#' ? 7 : -7;
    ++pos;
  }
  auto rest = lower(trim(k.substr(pos)));
  std::string mode = rest.substr(0, std::min<std::size_t>(3, rest.size()));
  if (mode.rfind("mix", 0) == 0) {
    sharps -= 1;
  } else if (mode.rfind("maj", 0) == 0 || mode.rfind("ion", 0) == 0) {
  } else if (mode.rfind("dor", 0) == 0) {
    sharps -= 2;
  } else if (mode.rfind("phr", 0) == 0) {
    sharps -= 4;
  } else if (mode.rfind("lyd", 0) == 0) {
    sharps += 1;
  } else if (mode.rfind("loc", 0) == 0) {
    sharps -= 5;
  } else if (mode.rfind("aeo", 0) == 0 || mode.rfind("m", 0) == 0) {
    sharps -= 3;
  }
  sharps = std::clamp(sharps, -7, 7);
  static constexpr std::array<int, 7> kSharpOrder = {3, 0, 4, 1, 5, 2, 6};  // F C G D A E B
  static constexpr std::array<int, 7> kFlatOrder = {6, 2, 5, 1, 4, 0, 3};   // B E A D G C F
  for (int i = 0; i < sharps; ++i) acc[static_cast<std::size_t>(kSharpOrder[static_cast<std::size_t>(i)])] = 1;
  for (int i = 0; i < -sharps; ++i) acc[static_cast<std::size_t>(kFlatOrder[static_cast<std::size_t>(i)])] = -1;
  return acc;
}

/// Throws unless the M: field denotes 4/4.
inline void require_common_time(std::string_view field) {
  const auto m = trim(field);
  if (m == "C" || m == "4/4") return;
  throw UnsupportedMeter("meter '" + std::string(m) + "' is not 4/4");
}

/// Unit note length as a fraction of a whole note.
inline double parse_fraction(std::string_view s) {
  s = trim(s);
  const auto slash = s.find('/');
  try {
    if (slash == std::string_view::npos) return std::stod(std::string(s));
    return std::stod(std::string(s.substr(0, slash))) / std::stod(std::string(s.substr(slash + 1)));
  } catch (const std::exception&) {
    throw ParseError("unreadable fraction '" + std::string(s) + "'");
  }
}

/// Quarter notes per minute from a Q: field.
inline double parse_tempo(std::string_view field) {
  const auto eq = field.find('=');
  std::string_view beat = "1/4";
  std::string_view value = field;
  if (eq != std::string_view::npos) {
    auto lhs = trim(field.substr(0, eq));
    const auto q = lhs.rfind('"');
    if (q != std::string_view::npos) lhs = trim(lhs.substr(q + 1));
    if (!lhs.empty()) beat = lhs;
    value = field.substr(eq + 1);
  }
  value = trim(value);
  std::size_t n = 0;
  while (n < value.size() && (std::isdigit(static_cast<unsigned char>(value[n])) || value[n] == '.')) ++n;
  if (n == 0) return 120.0;
  const double bpm = std::stod(std::string(value.substr(0, n)));
  double beat_len = 0.25;
  try {
    beat_len = parse_fraction(beat);
  } catch (const ParseError&) {
  }
  return bpm * beat_len / 0.25;
}

struct Element {
  bool rest = false;
  int pitch = 0;
  double duration = 0.0;  // frames
  bool tie = false;
};

struct Bar {
  std::vector<Element> elements;
  bool start_repeat = false;
  bool end_repeat = false;
  bool first_ending = false;

  double length() const {
    double d = 0.0;
    for (const auto& e : elements) d += e.duration;
    return d;
  }
};

class BodyParser {
 public:
  BodyParser(double unit, std::array<int, 7> key) : unit_(unit), key_(key) { bars_.emplace_back(); }

  void set_unit(double unit) { unit_ = unit; }
  void set_key(std::array<int, 7> key) { key_ = key; }

  void feed_line(std::string_view line) {
    line_ = line;
    pos_ = 0;
    while (pos_ < line_.size()) step();
  }

  std::vector<Bar> finish() {
    close_bar(false, false);
    std::vector<Bar> out;
    for (auto& b : bars_) {
      if (!b.elements.empty()) out.push_back(std::move(b));
    }
    return out;
  }

  // Inline field handlers are installed by the tune parser.
  std::function<void(char, std::string_view)> on_field;

 private:
  char peek(std::size_t ahead = 0) const {
    return pos_ + ahead < line_.size() ? line_[pos_ + ahead] : '\0';
  }

  void skip_until(char close) {
    ++pos_;
    while (pos_ < line_.size() && line_[pos_] != close) ++pos_;
    if (pos_ < line_.size()) ++pos_;
  }

  int read_int(int fallback) {
    std::size_t start = pos_;
    while (std::isdigit(static_cast<unsigned char>(peek()))) ++pos_;
    if (start == pos_) return fallback;
    return std::stoi(std::string(line_.substr(start, pos_ - start)));
  }

  double read_length() {
    double num = read_int(1);
    double den = 1.0;
    while (peek() == '/') {
      ++pos_;
      den *= read_int(2);
    }
    return num / den;
  }

  Bar& bar() { return bars_.back(); }

  void close_bar(bool end_repeat, bool start_repeat) {
    bar_accidentals_.clear();
    if (bar().elements.empty()) {
      // Adjacent barlines: repeat marks attach to the neighbouring bars.
      if (end_repeat && bars_.size() > 1) bars_[bars_.size() - 2].end_repeat = true;
      if (end_repeat) in_first_ending_ = false;
      bar().start_repeat = bar().start_repeat || start_repeat;
      return;
    }
    bar().end_repeat = bar().end_repeat || end_repeat;
    if (end_repeat) in_first_ending_ = false;
    bars_.emplace_back();
    bar().start_repeat = start_repeat;
  }

  void begin_ending(int number) {
    in_first_ending_ = number == 1;
    bar().first_ending = in_first_ending_;
  }

  void push(Element e) {
    if (tuplet_left_ > 0) {
      e.duration *= tuplet_factor_;
      --tuplet_left_;
    }
    if (pending_broken_ != 1.0) {
      e.duration *= pending_broken_;
      pending_broken_ = 1.0;
    }
    if (!e.rest && !bar().elements.empty() && bar().elements.back().tie &&
        !bar().elements.back().rest && bar().elements.back().pitch == e.pitch) {
      bar().elements.back().duration += e.duration;
      bar().elements.back().tie = false;
      return;
    }
    if (!bar().elements.empty()) bar().elements.back().tie = false;
    bar().first_ending = bar().first_ending || in_first_ending_;
    bar().elements.push_back(e);
  }

  std::optional<int> read_pitch() {
    int explicit_acc = 0;
    bool has_acc = false;
    while (peek() == '^' || peek() == '_' || peek() == '=') {
      has_acc = true;
      explicit_acc += peek() == '^' ? 1 : (peek() == '_' ? -1 : 0);
      ++pos_;
    }
    const char c = peek();
    const char upper = static_cast<char>(std::toupper(static_cast<unsigned char>(c)));
    const int li = letter_index(upper);
    if (li < 0) {
      if (has_acc) throw ParseError("accidental without a note");
      return std::nullopt;
    }
    ++pos_;
    int octave = std::islower(static_cast<unsigned char>(c)) ? 1 : 0;
    while (peek() == '\'' || peek() == ',') {
      octave += peek() == '\'' ? 1 : -1;
      ++pos_;
    }
    const int slot = li * 32 + octave + 16;
    int acc = key_[static_cast<std::size_t>(li)];
    if (has_acc) {
      acc = explicit_acc;
      bar_accidentals_[slot] = acc;
    } else if (auto it = bar_accidentals_.find(slot); it != bar_accidentals_.end()) {
      acc = it->second;
    }
    return 60 + 12 * octave + kLetterSemitone[static_cast<std::size_t>(li)] + acc;
  }

  void read_chord() {
    ++pos_;  // '['
    std::vector<int> pitches;
    while (pos_ < line_.size() && peek() != ']') {
      if (auto p = read_pitch()) {
        read_length();
        if (std::find(pitches.begin(), pitches.end(), *p) == pitches.end()) pitches.push_back(*p);
      } else {
        ++pos_;
      }
    }
    if (peek() == ']') ++pos_;
    if (pitches.size() > 1) throw PolyphonyError("chord with " + std::to_string(pitches.size()) + " notes");
    if (pitches.empty()) return;
    push({false, pitches.front(), read_length() * unit_, false});
  }

  void read_barline() {
    std::size_t start = pos_;
    while (peek() == '|' || peek() == ':' || peek() == ']' || (peek() == '[' && peek(1) == '|')) ++pos_;
    const auto token = line_.substr(start, pos_ - start);
    const bool end_rep = !token.empty() && token.front() == ':';
    const bool start_rep = token.size() > 1 && token.back() == ':';
    const bool is_double = token.find("||") != std::string_view::npos ||
                           token.find("|]") != std::string_view::npos ||
                           token.find("[|") != std::string_view::npos;
    close_bar(end_rep, start_rep);
    if (is_double && !end_rep) in_first_ending_ = false;
    if (std::isdigit(static_cast<unsigned char>(peek()))) begin_ending(read_int(0));
  }

  void step() {
    const char c = peek();
    if (c == '%') {
      pos_ = line_.size();
      return;
    }
    if (c == '|' || (c == ':' && (peek(1) == '|' || peek(1) == ':')) || (c == '[' && peek(1) == '|')) {
      read_barline();
      return;
    }
    if (c == '[') {
      const char n = peek(1);
      if (std::isdigit(static_cast<unsigned char>(n))) {
        ++pos_;
        begin_ending(read_int(0));
        return;
      }
      if (std::isalpha(static_cast<unsigned char>(n)) && peek(2) == ':') {
        const auto close = line_.find(']', pos_);
        const auto value = line_.substr(pos_ + 3, close == std::string_view::npos
                                                      ? std::string_view::npos
                                                      : close - pos_ - 3);
        if (on_field) on_field(n, value);
        pos_ = close == std::string_view::npos ? line_.size() : close + 1;
        return;
      }
      read_chord();
      return;
    }
    switch (c) {
      case '"': skip_until('"'); return;
      case '!': skip_until('!'); return;
      case '+': skip_until('+'); return;
      case '{': skip_until('}'); return;
      case '&': throw PolyphonyError("voice overlay");
      case '-':
        if (!bar().elements.empty()) bar().elements.back().tie = true;
        ++pos_;
        return;
      case '>':
      case '<': {
        int n = 0;
        while (peek() == c) {
          ++n;
          ++pos_;
        }
        const double shorter = std::pow(0.5, n);
        const double longer = 2.0 - shorter;
        if (!bar().elements.empty()) {
          auto& prev = bar().elements.back();
          const double f = c == '>' ? longer : shorter;
          prev.duration *= f;
        }
        pending_broken_ = c == '>' ? shorter : longer;
        return;
      }
      case '(': {
        if (std::isdigit(static_cast<unsigned char>(peek(1)))) {
          ++pos_;
          const int p = read_int(3);
          int q = -1;
          int r = p;
          if (peek() == ':') {
            ++pos_;
            q = read_int(-1);
            if (peek() == ':') {
              ++pos_;
              r = read_int(p);
            }
          }
          if (q < 0) q = (p == 2 || p == 4 || p == 8) ? 3 : 2;
          tuplet_factor_ = static_cast<double>(q) / p;
          tuplet_left_ = r;
        } else {
          ++pos_;
        }
        return;
      }
      case 'z':
      case 'x':
        ++pos_;
        push({true, 0, read_length() * unit_, false});
        return;
      case 'Z': {
        ++pos_;
        const int count = read_int(1);
        for (int i = 0; i < count; ++i) {
          if (i > 0) close_bar(false, false);
          push({true, 0, static_cast<double>(kFramesPerMeasure), false});
        }
        return;
      }
      default: break;
    }
    if (auto p = read_pitch()) {
      push({false, *p, read_length() * unit_, false});
      return;
    }
    ++pos_;  // spaces, slurs, decorations, anything else
  }

  std::string_view line_;
  std::size_t pos_ = 0;
  double unit_;
  std::array<int, 7> key_;
  std::map<int, int> bar_accidentals_;
  std::vector<Bar> bars_;
  double tuplet_factor_ = 1.0;
  int tuplet_left_ = 0;
  double pending_broken_ = 1.0;
  bool in_first_ending_ = false;
};

/// Plays repeats: |: ... :| twice, first endings skipped on the repeat.
inline std::vector<const Bar*> expand_repeats(const std::vector<Bar>& bars) {
  std::vector<const Bar*> out;
  std::vector<bool> repeated(bars.size(), false);
  std::size_t section = 0;
  bool second_pass = false;
  for (std::size_t i = 0; i < bars.size();) {
    const Bar& b = bars[i];
    if (b.start_repeat && !second_pass) section = i;
    if (second_pass && b.first_ending) {
      if (b.end_repeat) {
        second_pass = false;
        section = i + 1;
      }
      ++i;
      continue;
    }
    if (!b.elements.empty()) out.push_back(&b);
    if (b.end_repeat && !repeated[i]) {
      repeated[i] = true;
      second_pass = true;
      i = section;
      continue;
    }
    if (b.end_repeat) {
      second_pass = false;
      section = i + 1;
    }
    ++i;
  }
  return out;
}

}  // namespace detail

/// Splits an ABC book into single-tune texts at X: lines.
inline std::vector<std::string> split_tunes(std::string_view text) {
  std::vector<std::string> tunes;
  std::string current;
  std::size_t start = 0;
  while (start <= text.size()) {
    auto end = text.find('\n', start);
    if (end == std::string_view::npos) end = text.size();
    const auto line = text.substr(start, end - start);
    if (line.rfind("X:", 0) == 0 && !detail::trim(current).empty()) {
      tunes.push_back(std::move(current));
      current.clear();
    }
    current.append(line);
    current.push_back('\n');
    start = end + 1;
  }
  if (detail::trim(current).find("X:") != std::string_view::npos ||
      detail::trim(current).find("K:") != std::string_view::npos) {
    tunes.push_back(std::move(current));
  }
  return tunes;
}

/// Parses the first tune in `text`.
inline Melody parse(std::string_view text, const std::string& source_id = "abc") {
  Melody melody;
  melody.meta.source_id = source_id;
  std::optional<std::string> meter;
  double unit = -1.0;
  bool in_body = false;
  std::string voice;
  std::optional<detail::BodyParser> body;

  auto handle_field = [&](char field, std::string_view value) {
    value = detail::trim(value);
    switch (field) {
      case 'M':
        detail::require_common_time(value);
        meter = std::string(value);
        break;
      case 'L':
        unit = detail::parse_fraction(value) * kFramesPerMeasure;
        if (body) body->set_unit(unit);
        break;
      case 'Q': melody.meta.tempo = detail::parse_tempo(value); break;
      case 'K':
        if (!body) melody.meta.key = std::string(value);
        if (body) body->set_key(detail::key_signature(value));
        break;
      case 'V': {
        const auto name = std::string(value.substr(0, value.find(' ')));
        if (!voice.empty() && name != voice) throw PolyphonyError("multiple voices");
        voice = name;
        break;
      }
      default: break;
    }
  };

  std::size_t start = 0;
  bool seen_x = false;
  while (start < text.size()) {
    auto end = text.find('\n', start);
    if (end == std::string_view::npos) end = text.size();
    auto line = text.substr(start, end - start);
    start = end + 1;
    if (!line.empty() && line.back() == '\r') line.remove_suffix(1);

    const bool is_field =
        line.size() >= 2 && line[1] == ':' && std::isalpha(static_cast<unsigned char>(line[0])) &&
        !(in_body && detail::letter_index(static_cast<char>(
                         std::toupper(static_cast<unsigned char>(line[0])))) >= 0);
    if (is_field) {
      const char f = line[0];
      if (f == 'X') {
        if (seen_x) break;
        seen_x = true;
        continue;
      }
      if (in_body && (f == 'w' || f == 'W')) continue;
      handle_field(f, line.substr(2));
      if (f == 'K' && !in_body) {
        if (!meter) throw UnsupportedMeter("missing M: field");
        if (unit < 0) unit = kFramesPerMeasure / 8.0;
        body.emplace(unit, detail::key_signature(line.substr(2)));
        body->on_field = handle_field;
        in_body = true;
      }
      continue;
    }
    if (in_body) body->feed_line(line);
  }
  if (!body) throw ParseError("no K: field, tune body not found");

  const auto bars = body->finish();
  const auto played = detail::expand_repeats(bars);
  if (played.empty()) throw ParseError("tune has no notes");

  std::vector<TimedNote> notes;
  constexpr double kEps = 1e-6;
  for (std::size_t b = 0; b < played.size(); ++b) {
    const double len = played[b]->length();
    if (len > kFramesPerMeasure + kEps) {
      throw ParseError("bar " + std::to_string(b + 1) + " is overfull");
    }
    const bool pickup = b == 0 && len < kFramesPerMeasure - kEps;
    double t = static_cast<double>(b) * kFramesPerMeasure + (pickup ? kFramesPerMeasure - len : 0.0);
    for (const auto& e : played[b]->elements) {
      if (!e.rest) notes.push_back({t, t + e.duration, e.pitch});
      t += e.duration;
    }
  }
  for (const auto& n : notes) {
    if (n.pitch < 0 || n.pitch > 127) throw RangeError("pitch outside 0..127");
  }
  melody.measures = quantize_timeline(std::move(notes), static_cast<int>(played.size()));
  return melody;
}

}  // namespace sketchnet::abc
