#include "songgen/midi_io.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <map>
#include <sstream>

#include "songgen/error.hpp"

namespace songgen {

nlohmann::json midi_to_json(const MidiSequence& m) {
  nlohmann::json notes = nlohmann::json::array();
  for (const auto& n : m.notes()) notes.push_back({n.pitch, n.duration});
  return {{"frame_rate", m.frame_rate_hz()}, {"notes", notes}};
}

MidiSequence midi_from_json(const nlohmann::json& j) {
  try {
    std::vector<NoteEvent> notes;
    for (const auto& pair : j.at("notes")) {
      if (!pair.is_array() || pair.size() != 2) throw FormatError("note must be [pitch, duration]");
      notes.push_back({pair[0].get<int>(), pair[1].get<int>()});
    }
    return MidiSequence(std::move(notes), j.value("frame_rate", kTokenRateHz));
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("bad MIDI json: ") + e.what());
  }
}

std::string midi_to_records(const MidiSequence& m) {
  std::ostringstream out;
  for (const auto& n : m.notes()) out << n.pitch << ' ' << n.duration << '\n';
  return out.str();
}

MidiSequence midi_from_records(const std::string& text, double frame_rate_hz) {
  std::vector<NoteEvent> notes;
  std::istringstream in(text);
  std::string line;
  int line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    const auto hash = line.find('#');
    if (hash != std::string::npos) line.resize(hash);
    std::istringstream fields(line);
    NoteEvent n;
    if (!(fields >> n.pitch)) continue;
    if (!(fields >> n.duration)) throw FormatError("line " + std::to_string(line_no) + ": missing duration");
    notes.push_back(n);
  }
  return MidiSequence(std::move(notes), frame_rate_hz);
}

namespace {

void put_be(std::vector<std::uint8_t>& out, std::uint32_t v, int bytes) {
  for (int i = bytes - 1; i >= 0; --i) out.push_back(static_cast<std::uint8_t>((v >> (8 * i)) & 0xFF));
}

void put_varlen(std::vector<std::uint8_t>& out, std::uint32_t v) {
  std::uint8_t buf[5];
  int n = 0;
  buf[n++] = v & 0x7F;
  while ((v >>= 7) != 0) buf[n++] = static_cast<std::uint8_t>((v & 0x7F) | 0x80);
  while (n > 0) out.push_back(buf[--n]);
}

class Reader {
 public:
  explicit Reader(const std::vector<std::uint8_t>& b) : b_(b) {}
  std::uint32_t be(int bytes) {
    need(bytes);
    std::uint32_t v = 0;
    for (int i = 0; i < bytes; ++i) v = (v << 8) | b_[pos_++];
    return v;
  }
  std::uint32_t varlen() {
    std::uint32_t v = 0;
    for (int i = 0; i < 4; ++i) {
      need(1);
      const std::uint8_t c = b_[pos_++];
      v = (v << 7) | (c & 0x7F);
      if ((c & 0x80) == 0) return v;
    }
    throw FormatError("SMF variable-length quantity too long");
  }
  std::uint8_t byte() { need(1); return b_[pos_++]; }
  void skip(std::size_t n) { need(n); pos_ += n; }
  std::size_t pos() const { return pos_; }

 private:
  void need(std::size_t n) const {
    if (pos_ + n > b_.size()) throw FormatError("truncated SMF");
  }
  const std::vector<std::uint8_t>& b_;
  std::size_t pos_ = 0;
};

}  // namespace

std::vector<std::uint8_t> midi_to_smf(const MidiSequence& m, double tempo_bpm) {
  if (!(tempo_bpm > 0.0)) throw InvalidInput("tempo must be positive");
  // Quarter length in whole milliseconds; one tick per millisecond.
  const auto ms_per_quarter = static_cast<std::uint32_t>(std::lround(60000.0 / tempo_bpm));
  if (ms_per_quarter == 0 || ms_per_quarter > 0x7FFF) throw InvalidInput("tempo out of SMF range");
  const double ms_per_frame = 1000.0 / m.frame_rate_hz();

  std::vector<std::uint8_t> track;
  put_varlen(track, 0);
  track.insert(track.end(), {0xFF, 0x51, 0x03});
  put_be(track, ms_per_quarter * 1000, 3);
  for (const auto& n : m.notes()) {
    put_varlen(track, 0);
    track.insert(track.end(), {0x90, static_cast<std::uint8_t>(n.pitch), 100});
    put_varlen(track, static_cast<std::uint32_t>(std::lround(n.duration * ms_per_frame)));
    track.insert(track.end(), {0x80, static_cast<std::uint8_t>(n.pitch), 0});
  }
  put_varlen(track, 0);
  track.insert(track.end(), {0xFF, 0x2F, 0x00});

  std::vector<std::uint8_t> out = {'M', 'T', 'h', 'd'};
  put_be(out, 6, 4);
  put_be(out, 0, 2);
  put_be(out, 1, 2);
  put_be(out, ms_per_quarter, 2);
  out.insert(out.end(), {'M', 'T', 'r', 'k'});
  put_be(out, static_cast<std::uint32_t>(track.size()), 4);
  out.insert(out.end(), track.begin(), track.end());
  return out;
}

MidiSequence midi_from_smf(const std::vector<std::uint8_t>& bytes, double frame_rate_hz) {
  Reader r(bytes);
  if (r.be(4) != 0x4D546864) throw FormatError("missing MThd");
  const auto header_len = r.be(4);
  if (header_len < 6) throw FormatError("short MThd");
  r.be(2);
  const auto ntracks = r.be(2);
  const auto division = r.be(2);
  r.skip(header_len - 6);
  if (division & 0x8000) throw FormatError("SMPTE time division unsupported");
  if (ntracks < 1) throw FormatError("no tracks");
  if (r.be(4) != 0x4D54726B) throw FormatError("missing MTrk");
  const auto track_end = r.be(4) + r.pos();

  double us_per_quarter = 500000.0;
  double seconds = 0.0;
  std::map<int, double> onsets;
  std::vector<std::pair<double, NoteEvent>> timed;  // onset seconds, (pitch, duration in frames)
  std::uint8_t running = 0;
  while (r.pos() < track_end) {
    seconds += r.varlen() * us_per_quarter / 1e6 / division;
    std::uint8_t status = r.byte();
    if (status == 0xFF) {
      const auto type = r.byte();
      const auto len = r.varlen();
      if (type == 0x51 && len == 3) {
        us_per_quarter = r.be(3);
      } else {
        r.skip(len);
      }
      if (type == 0x2F) break;
      continue;
    }
    if (status == 0xF0 || status == 0xF7) {
      r.skip(r.varlen());
      continue;
    }
    std::uint8_t d1;
    if (status & 0x80) {
      running = status;
      d1 = r.byte();
    } else {
      d1 = status;
      status = running;
    }
    const auto kind = status & 0xF0;
    const bool two = !(kind == 0xC0 || kind == 0xD0);
    const std::uint8_t d2 = two ? r.byte() : 0;
    const bool on = kind == 0x90 && d2 > 0;
    const bool off = kind == 0x80 || (kind == 0x90 && d2 == 0);
    if (on) {
      onsets[d1] = seconds;
    } else if (off) {
      auto it = onsets.find(d1);
      if (it == onsets.end()) continue;
      const int frames = static_cast<int>(std::lround((seconds - it->second) * frame_rate_hz));
      timed.push_back({it->second, {d1, frames}});
      onsets.erase(it);
    }
  }
  std::sort(timed.begin(), timed.end(), [](const auto& a, const auto& b) { return a.first < b.first; });
  std::vector<NoteEvent> notes;
  for (const auto& [t, n] : timed) notes.push_back(n);
  return MidiSequence(std::move(notes), frame_rate_hz);
}

void save_midi_json(const std::filesystem::path& path, const MidiSequence& m) {
  std::ofstream out(path);
  if (!out) throw FormatError("cannot write " + path.string());
  out << midi_to_json(m).dump() << '\n';
}

MidiSequence load_midi_json(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw FormatError("cannot read " + path.string());
  try {
    return midi_from_json(nlohmann::json::parse(in));
  } catch (const nlohmann::json::parse_error& e) {
    throw FormatError(path.string() + ": " + e.what());
  }
}

}  // namespace songgen
