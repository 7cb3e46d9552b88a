#include "songgen/eval_metrics.hpp"

#include <algorithm>
#include <cmath>
#include <iomanip>
#include <limits>
#include <sstream>

#include "songgen/error.hpp"
#include "songgen/midi_stage.hpp"

namespace songgen {

double apd(const MidiSequence& gt, const MidiSequence& pred) {
  return std::abs(average_pitch(gt) - average_pitch(pred));
}

double td(const MidiSequence& gt, const MidiSequence& pred) {
  return std::abs(gt.total_seconds() - pred.total_seconds());
}

int duration_bin(int frames) {
  if (frames < 1) throw InvalidInput("duration must be positive");
  if (frames <= kExactDurationBins) return frames - 1;
  const int capped = std::min(frames, kMaxFrames);
  const double octaves = std::log2(static_cast<double>(capped) / kExactDurationBins);
  return kExactDurationBins - 1 + static_cast<int>(std::ceil(kDurationBinsPerOctave * octaves - 1e-12));
}

int duration_bin_count() { return duration_bin(kMaxFrames) + 1; }

std::vector<double> note_histogram(const MidiSequence& m, DistributionAttr attr) {
  if (m.empty()) throw InvalidInput("histogram of an empty sequence");
  std::vector<double> h(static_cast<std::size_t>(attr == DistributionAttr::pitch ? kPitchCount : duration_bin_count()),
                        0.0);
  for (const auto& n : m.notes()) {
    const int b = attr == DistributionAttr::pitch ? n.pitch - kMinPitch : duration_bin(n.duration);
    h[static_cast<std::size_t>(b)] += 1.0;
  }
  for (double& v : h) v /= static_cast<double>(m.size());
  return h;
}

double histogram_intersection(std::span<const double> a, std::span<const double> b) {
  if (a.size() != b.size()) throw InvalidInput("histogram sizes differ");
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) s += std::min(a[i], b[i]);
  return std::clamp(100.0 * s, 0.0, 100.0);
}

double distribution_similarity(const MidiSequence& gt, const MidiSequence& pred, DistributionAttr attr) {
  return histogram_intersection(note_histogram(gt, attr), note_histogram(pred, attr));
}

DtwResult dtw(std::span<const int> a, std::span<const int> b) {
  if (a.empty() || b.empty()) throw InvalidInput("dtw needs nonempty sequences");
  const std::size_t n = a.size(), m = b.size();
  constexpr double inf = std::numeric_limits<double>::infinity();
  std::vector<double> cost(n * m, inf);
  std::vector<int> len(n * m, 0);
  std::vector<std::uint8_t> from(n * m, 0);  // 0 diagonal, 1 from (i-1, j), 2 from (i, j-1)
  auto at = [m](std::size_t i, std::size_t j) { return i * m + j; };

  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < m; ++j) {
      const double c = std::abs(a[i] - b[j]);
      if (i == 0 && j == 0) {
        cost[0] = c;
        len[0] = 1;
        continue;
      }
      double best = inf;
      int best_len = 0;
      std::uint8_t dir = 0;
      auto consider = [&](std::size_t k, std::uint8_t d) {
        if (cost[k] < best || (cost[k] == best && len[k] < best_len)) {
          best = cost[k];
          best_len = len[k];
          dir = d;
        }
      };
      if (i > 0 && j > 0) consider(at(i - 1, j - 1), 0);
      if (i > 0) consider(at(i - 1, j), 1);
      if (j > 0) consider(at(i, j - 1), 2);
      cost[at(i, j)] = best + c;
      len[at(i, j)] = best_len + 1;
      from[at(i, j)] = dir;
    }

  DtwResult r;
  r.cost = cost[at(n - 1, m - 1)];
  std::size_t i = n - 1, j = m - 1;
  while (true) {
    r.path.emplace_back(static_cast<int>(i), static_cast<int>(j));
    if (i == 0 && j == 0) break;
    switch (from[at(i, j)]) {
      case 0: --i, --j; break;
      case 1: --i; break;
      default: --j; break;
    }
  }
  std::reverse(r.path.begin(), r.path.end());
  return r;
}

double melody_distance(std::span<const int> gt_pitches, std::span<const int> pred_pitches) {
  return dtw(gt_pitches, pred_pitches).normalized();
}

double melody_distance(const MidiSequence& gt, const MidiSequence& pred) {
  const auto a = expand(gt);
  const auto b = expand(pred);
  return melody_distance(a.pitches(), b.pitches());
}

double ffe(std::span<const double> gt_f0, std::span<const std::uint8_t> gt_voiced, std::span<const double> pred_f0,
           std::span<const std::uint8_t> pred_voiced) {
  const std::size_t n = gt_f0.size();
  if (gt_voiced.size() != n || pred_f0.size() != n || pred_voiced.size() != n)
    throw InvalidInput("ffe: track lengths differ");
  if (n == 0) throw InvalidInput("ffe: empty tracks");
  std::size_t errors = 0;
  for (std::size_t t = 0; t < n; ++t) {
    const bool gv = gt_voiced[t] != 0, pv = pred_voiced[t] != 0;
    if (gv != pv)
      ++errors;
    else if (gv && std::abs(pred_f0[t] - gt_f0[t]) > kFfeTolerance * gt_f0[t])
      ++errors;
  }
  return static_cast<double>(errors) / static_cast<double>(n);
}

namespace {

SampleMetrics score_pair(const EvalPair& p, const EvalOptions& opts) {
  SampleMetrics s;
  s.id = p.id;
  s.ka = key_accuracy(p.gt, p.pred, p.gt_tonic, p.gt_mode);
  s.apd = apd(p.gt, p.pred);
  s.td = td(p.gt, p.pred);
  const MidiSequence gt = opts.rounded ? round_to_grid(p.gt, p.tempo_bpm) : p.gt;
  const MidiSequence pred = opts.rounded ? round_to_grid(p.pred, p.tempo_bpm) : p.pred;
  s.pd = distribution_similarity(gt, pred, DistributionAttr::pitch);
  s.dd = distribution_similarity(gt, pred, DistributionAttr::duration);
  s.md = melody_distance(gt, pred);
  if (p.gt_f0 && p.pred_f0) s.ffe = ffe(p.gt_f0->f0_hz, p.gt_f0->voiced, p.pred_f0->f0_hz, p.pred_f0->voiced);
  return s;
}

nlohmann::json opt_json(const std::optional<double>& v) { return v ? nlohmann::json(*v) : nlohmann::json(nullptr); }

std::string cell(const std::optional<double>& v, double scale, int precision) {
  if (!v) return "-";
  std::ostringstream os;
  os << std::fixed << std::setprecision(precision) << *v * scale;
  return os.str();
}

}  // namespace

MetricReport evaluate_corpus(std::span<const EvalPair> pairs, const EvalOptions& opts) {
  if (pairs.empty()) throw InvalidInput("evaluate_corpus: no pairs");
  MetricReport r;
  r.rounded = opts.rounded;
  r.samples.reserve(pairs.size());
  for (const auto& p : pairs) r.samples.push_back(score_pair(p, opts));

  double ka = 0.0, f = 0.0;
  int ka_n = 0;
  for (const auto& s : r.samples) {
    if (s.ka) {
      ka += *s.ka;
      ++ka_n;
    } else {
      ++r.ka_excluded;
    }
    if (s.ffe) {
      f += *s.ffe;
      ++r.ffe_count;
    }
    r.apd += s.apd;
    r.td += s.td;
    r.pd += s.pd;
    r.dd += s.dd;
    r.md += s.md;
  }
  const double n = static_cast<double>(r.samples.size());
  r.apd /= n;
  r.td /= n;
  r.pd /= n;
  r.dd /= n;
  r.md /= n;
  if (ka_n > 0) r.ka = ka / ka_n;
  if (r.ffe_count > 0) r.ffe = f / r.ffe_count;
  return r;
}

nlohmann::json MetricReport::to_json() const {
  nlohmann::json j;
  j["rounded"] = rounded;
  j["count"] = samples.size();
  j["ka_excluded"] = ka_excluded;
  j["ffe_count"] = ffe_count;
  j["mean"] = {{"KA", opt_json(ka)}, {"APD", apd}, {"TD", td}, {"PD", pd},
               {"DD", dd}, {"MD", md}, {"FFE", opt_json(ffe)}};
  auto& rows = j["samples"] = nlohmann::json::array();
  for (const auto& s : samples)
    rows.push_back({{"id", s.id}, {"KA", opt_json(s.ka)}, {"APD", s.apd}, {"TD", s.td}, {"PD", s.pd},
                    {"DD", s.dd}, {"MD", s.md}, {"FFE", opt_json(s.ffe)}});
  return j;
}

std::string MetricReport::table(std::span<const std::pair<std::string, MetricReport>> rows) {
  std::size_t name_w = 6;
  for (const auto& [name, _] : rows) name_w = std::max(name_w, name.size());
  std::ostringstream os;
  auto line = [&](const std::string& name, const std::vector<std::string>& cells) {
    os << std::left << std::setw(static_cast<int>(name_w)) << name;
    for (const auto& c : cells) os << "  " << std::right << std::setw(7) << c;
    os << '\n';
  };
  line("Method", {"KA(%)", "APD", "TD", "PD(%)", "DD(%)", "MD", "FFE"});
  for (const auto& [name, r] : rows)
    line(name, {cell(r.ka, 100.0, 1), cell(r.apd, 1.0, 2), cell(r.td, 1.0, 2), cell(r.pd, 1.0, 1),
                cell(r.dd, 1.0, 1), cell(r.md, 1.0, 2), cell(r.ffe, 1.0, 3)});
  return os.str();
}

}  // namespace songgen
