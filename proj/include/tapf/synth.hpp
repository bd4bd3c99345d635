#pragma once

#include <cstdint>
#include <string>
#include <vector>

namespace tapf {

// Knobs for the synthetic audio-visual pair generator. Each event carries a
// class identity expressed in both modalities: a tone burst whose band is
// class-dependent in the audio, and a step along a class direction in the
// video. Tone jitter (+-150 Hz) is wider than the band spacing (120 Hz), so
// class identity is deliberately ambiguous from audio alone; the video step
// resolves it when correspondence is present.
struct SynthConfig {
  double sample_rate_hz = 8000.0;
  int n_classes = 8;
  double tone_base_hz = 600.0;
  double tone_step_hz = 120.0;
  double tone_jitter_hz = 150.0;
  double noise_sigma = 0.02;
  double burst_amp = 0.3;
  double video_base_sigma = 0.3;
  double video_walk_sigma = 0.05;
  double video_step = 1.0;

  void validate() const;
};

struct AVEvent {
  std::size_t onset = 0;  // sample index of the burst start
  int class_id = 0;
};

struct AVPair {
  std::vector<double> audio;
  std::vector<double> video;  // row-major t_v x d_v
  std::vector<AVEvent> labels;
  std::size_t t_v = 0;
  std::size_t d_v = 0;
  double rho = 0.0;
  double sample_rate_hz = 8000.0;
};

// 1-based video frame containing the given audio sample.
std::size_t onset_video_frame(std::size_t onset, std::size_t t, std::size_t t_v);

// Pure function of (seed, arguments, config): the same call is bit-identical
// across runs. The base video trajectory is drawn from a stream independent
// of the event stream, so at rho = 0 the video carries no trace of the
// audio events (not even through shared generator state).
AVPair generate_pair(std::uint64_t seed, double rho, int n_events, std::size_t t,
                     std::size_t t_v, std::size_t d_v, const SynthConfig& cfg = {});

// On-disk feature array: magic "AVF1", u32 version, u8 dtype tag
// (0 = f32, 1 = f64), u32 rows, u32 cols, row-major little-endian payload.
inline constexpr std::uint32_t kFeatureVersion = 1;

struct FeatureArray {
  std::uint8_t dtype = 0;  // 0 = f32, 1 = f64
  std::uint32_t rows = 0;
  std::uint32_t cols = 0;
  std::vector<double> values;  // widened for inspection; bits preserved per dtype
};

std::string serialize_features(const FeatureArray& a);
FeatureArray parse_features(const std::string& bytes);
void write_features(const std::string& path, const FeatureArray& a);
FeatureArray read_features(const std::string& path);

// Raw audio: 32-bit float little-endian samples in <path>, with a JSON
// sidecar <path>.json holding {"sample_rate_hz": ..., "length": ...}.
void write_audio(const std::string& path, const std::vector<double>& samples,
                 double sample_rate_hz);
std::vector<double> read_audio(const std::string& path,
                               double* sample_rate_hz = nullptr);

}  // namespace tapf
