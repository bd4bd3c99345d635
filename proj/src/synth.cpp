#include "tapf/synth.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>

#include "json.hpp"
#include "tapf/errors.hpp"
#include "tapf/io_bytes.hpp"
#include "tapf/rng.hpp"

namespace tapf {

namespace {

constexpr double kTwoPi = 6.283185307179586476925286766559;

// Smallest per-event slot that still fits a windowed burst.
constexpr std::size_t kMinSlot = 64;

}  // namespace

void SynthConfig::validate() const {
  if (!(sample_rate_hz > 0.0))
    throw ConfigError("synth: sample_rate_hz must be positive");
  if (n_classes < 1) throw ConfigError("synth: n_classes must be >= 1");
  if (!(tone_base_hz > 0.0) || !(tone_step_hz >= 0.0) || !(tone_jitter_hz >= 0.0))
    throw ConfigError("synth: tone parameters must be nonnegative (base > 0)");
  if (!(noise_sigma >= 0.0)) throw ConfigError("synth: noise_sigma must be >= 0");
  if (!(burst_amp > 0.0)) throw ConfigError("synth: burst_amp must be positive");
  if (!(video_base_sigma >= 0.0) || !(video_walk_sigma >= 0.0) ||
      !(video_step > 0.0))
    throw ConfigError("synth: video parameters out of range");
}

std::size_t onset_video_frame(std::size_t onset, std::size_t t, std::size_t t_v) {
  if (t == 0 || t_v == 0)
    throw ContractError("onset_video_frame: empty sequence");
  std::size_t frame = 1 + (onset * t_v) / t;
  return std::min(frame, t_v);
}

AVPair generate_pair(std::uint64_t seed, double rho, int n_events, std::size_t t,
                     std::size_t t_v, std::size_t d_v, const SynthConfig& cfg) {
  cfg.validate();
  if (!(rho >= 0.0 && rho <= 1.0))
    throw ContractError("generate_pair: rho must lie in [0, 1], got " +
                        std::to_string(rho));
  if (n_events < 1)
    throw ContractError("generate_pair: n_events must be >= 1, got " +
                        std::to_string(n_events));
  if (t == 0 || t_v == 0 || d_v == 0)
    throw ContractError("generate_pair: T, T_v and d_v must be positive");
  std::size_t slot = t / std::size_t(n_events);
  if (slot < kMinSlot)
    throw ContractError("generate_pair: cannot pack " + std::to_string(n_events) +
                        " events into " + std::to_string(t) +
                        " samples (needs >= " + std::to_string(kMinSlot) +
                        " per event)");

  Rng root(seed);
  AVPair pair;
  pair.t_v = t_v;
  pair.d_v = d_v;
  pair.rho = rho;
  pair.sample_rate_hz = cfg.sample_rate_hz;

  pair.audio.resize(t);
  Rng noise_rng = root.split("audio/noise");
  for (double& x : pair.audio) x = cfg.noise_sigma * noise_rng.normal();

  // One event per slot. Onsets keep a lead-in of slot/8 so the event's video
  // frame sits at t >= 2 where frame-difference complexity can observe it.
  std::size_t burst = std::max<std::size_t>(32, (slot * 3) / 5);
  std::size_t lead = slot / 8;
  for (int i = 0; i < n_events; ++i) {
    Rng ev = root.split("event", std::uint64_t(i));
    int class_id = int(ev.uniform_int(0, cfg.n_classes - 1));
    std::size_t lo = slot * std::size_t(i) + lead;
    std::size_t hi = slot * std::size_t(i) + slot - burst;
    std::size_t onset = lo + std::size_t(ev.uniform_int(0, std::int64_t(hi - lo)));
    double freq = cfg.tone_base_hz + cfg.tone_step_hz * class_id +
                  ev.uniform(-cfg.tone_jitter_hz, cfg.tone_jitter_hz);
    double phase = ev.uniform(0.0, kTwoPi);
    for (std::size_t n = 0; n < burst; ++n) {
      double env = 0.5 * (1.0 - std::cos(kTwoPi * double(n) / double(burst - 1)));
      double tone = std::sin(phase + kTwoPi * freq * double(n) / cfg.sample_rate_hz);
      pair.audio[onset + n] +=
          cfg.burst_amp * env * (tone + 0.1 * ev.normal());
    }
    pair.labels.push_back({onset, class_id});
  }

  // Base trajectory plus a slow random walk, drawn before any step so the
  // rho = 0 video is identical whatever the events were.
  pair.video.resize(t_v * d_v);
  Rng video_rng = root.split("video");
  for (std::size_t j = 0; j < d_v; ++j)
    pair.video[j] = cfg.video_base_sigma * video_rng.normal();
  for (std::size_t fr = 1; fr < t_v; ++fr)
    for (std::size_t j = 0; j < d_v; ++j)
      pair.video[fr * d_v + j] =
          pair.video[(fr - 1) * d_v + j] + cfg.video_walk_sigma * video_rng.normal();

  for (std::size_t i = 0; i < pair.labels.size(); ++i) {
    Rng corr = root.split("corr", std::uint64_t(i));
    if (!(corr.uniform() < rho)) continue;
    std::size_t fv = onset_video_frame(pair.labels[i].onset, t, t_v);
    std::size_t dir = std::size_t(pair.labels[i].class_id) % d_v;
    for (std::size_t fr = fv; fr <= t_v; ++fr)
      pair.video[(fr - 1) * d_v + dir] += cfg.video_step;
  }

  // Keep RMS inside [0.01, 1] so downstream spectral losses never see a
  // degenerate (all-quiet or clipped-scale) signal.
  double acc = 0.0;
  for (double x : pair.audio) acc += x * x;
  double rms = std::sqrt(acc / double(t));
  if (rms == 0.0)
    throw NumericError("generate_pair: degenerate silent audio");
  double scale = 1.0;
  if (rms > 1.0)
    scale = 1.0 / rms;
  else if (rms < 0.01)
    scale = 0.01 / rms;
  if (scale != 1.0)
    for (double& x : pair.audio) x *= scale;
  return pair;
}

std::string serialize_features(const FeatureArray& a) {
  if (a.dtype > 1)
    throw ConfigError("features: unknown dtype tag " + std::to_string(a.dtype));
  std::size_t n = std::size_t(a.rows) * std::size_t(a.cols);
  if (a.values.size() != n)
    throw ShapeError("features: " + std::to_string(a.rows) + "x" +
                     std::to_string(a.cols) + " wants " + std::to_string(n) +
                     " values, got " + std::to_string(a.values.size()));
  for (std::size_t i = 0; i < n; ++i)
    if (!std::isfinite(a.values[i]))
      throw NumericError("features: non-finite value at index " +
                         std::to_string(i));
  std::string out;
  out += "AVF1";
  detail::put_u32(out, kFeatureVersion);
  out.push_back(char(a.dtype));
  detail::put_u32(out, a.rows);
  detail::put_u32(out, a.cols);
  for (std::size_t i = 0; i < n; ++i) {
    if (a.dtype == 0) {
      float f = float(a.values[i]);
      std::uint32_t bits;
      std::memcpy(&bits, &f, 4);
      detail::put_u32(out, bits);
    } else {
      double f = a.values[i];
      std::uint64_t bits;
      std::memcpy(&bits, &f, 8);
      detail::put_u64(out, bits);
    }
  }
  return out;
}

FeatureArray parse_features(const std::string& bytes) {
  detail::ByteReader r(bytes, "features");
  const char* magic = r.take(4, "magic");
  if (std::memcmp(magic, "AVF1", 4) != 0)
    throw FormatError("features: bad magic", 0);
  std::uint32_t version = r.u32("version");
  if (version != kFeatureVersion)
    throw FormatError("features: unsupported version " + std::to_string(version),
                      4);
  FeatureArray a;
  std::size_t dtype_pos = r.pos();
  a.dtype = r.u8("dtype");
  if (a.dtype > 1)
    throw FormatError("features: unknown dtype tag " + std::to_string(a.dtype),
                      dtype_pos);
  a.rows = r.u32("rows");
  a.cols = r.u32("cols");
  std::size_t n = std::size_t(a.rows) * std::size_t(a.cols);
  // Check the advertised size against the actual payload before allocating,
  // so corrupt headers fail structurally instead of via bad_alloc.
  std::size_t elem = a.dtype == 0 ? 4 : 8;
  if (n > (bytes.size() - r.pos()) / elem)
    throw FormatError("features: payload for " + std::to_string(a.rows) + "x" +
                          std::to_string(a.cols) + " exceeds remaining bytes",
                      r.pos());
  a.values.resize(n);
  for (std::size_t i = 0; i < n; ++i) {
    if (a.dtype == 0) {
      std::uint32_t bits = r.u32("payload");
      float f;
      std::memcpy(&f, &bits, 4);
      a.values[i] = double(f);
    } else {
      std::uint64_t bits = r.u64("payload");
      double f;
      std::memcpy(&f, &bits, 8);
      a.values[i] = f;
    }
  }
  if (!r.done()) throw FormatError("features: trailing bytes", r.pos());
  return a;
}

void write_features(const std::string& path, const FeatureArray& a) {
  detail::write_file_bytes(path, serialize_features(a));
}

FeatureArray read_features(const std::string& path) {
  return parse_features(detail::read_file_bytes(path));
}

void write_audio(const std::string& path, const std::vector<double>& samples,
                 double sample_rate_hz) {
  if (!(sample_rate_hz > 0.0))
    throw ConfigError("audio: sample_rate_hz must be positive");
  std::string out;
  out.reserve(samples.size() * 4);
  for (double v : samples) {
    if (!std::isfinite(v)) throw NumericError("audio: non-finite sample");
    float f = float(v);
    std::uint32_t bits;
    std::memcpy(&bits, &f, 4);
    detail::put_u32(out, bits);
  }
  detail::write_file_bytes(path, out);
  nlohmann::json side;
  side["sample_rate_hz"] = sample_rate_hz;
  side["length"] = samples.size();
  detail::write_file_bytes(path + ".json", side.dump(2) + "\n");
}

std::vector<double> read_audio(const std::string& path, double* sample_rate_hz) {
  std::string side_text = detail::read_file_bytes(path + ".json");
  nlohmann::json side;
  try {
    side = nlohmann::json::parse(side_text);
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("audio sidecar: invalid JSON: ") + e.what(), 0);
  }
  if (!side.contains("sample_rate_hz") || !side.contains("length"))
    throw FormatError("audio sidecar: missing sample_rate_hz or length", 0);
  double sr = side["sample_rate_hz"].get<double>();
  std::size_t length = side["length"].get<std::size_t>();
  std::string bytes = detail::read_file_bytes(path);
  if (bytes.size() != length * 4)
    throw FormatError("audio: payload is " + std::to_string(bytes.size()) +
                          " bytes, sidecar length wants " +
                          std::to_string(length * 4),
                      bytes.size());
  std::vector<double> samples(length);
  for (std::size_t i = 0; i < length; ++i) {
    std::uint32_t bits;
    std::memcpy(&bits, bytes.data() + i * 4, 4);
    float f;
    std::memcpy(&f, &bits, 4);
    samples[i] = double(f);
  }
  if (sample_rate_hz) *sample_rate_hz = sr;
  return samples;
}

}  // namespace tapf
