#pragma once

#include <cmath>
#include <complex>
#include <fstream>
#include <map>
#include <numbers>
#include <string>
#include <vector>

#include "tapf/ops.hpp"
#include "tapf/tensor.hpp"

namespace tapf {

namespace detail {

inline bool is_pow2(std::size_t n) { return n > 0 && (n & (n - 1)) == 0; }

inline const std::vector<std::complex<double>>& fft_roots(std::size_t n) {
  thread_local std::map<std::size_t, std::vector<std::complex<double>>> cache;
  auto& r = cache[n];
  if (r.empty()) {
    r.resize(n / 2);
    for (std::size_t k = 0; k < n / 2; ++k)
      r[k] = std::polar(1.0, -2.0 * std::numbers::pi * double(k) / double(n));
  }
  return r;
}

inline void fft_inplace(std::vector<std::complex<double>>& a, bool inverse) {
  const std::size_t n = a.size();
  if (!is_pow2(n)) throw ContractError("fft: size must be a power of two");
  for (std::size_t i = 1, j = 0; i < n; ++i) {
    std::size_t bit = n >> 1;
    for (; j & bit; bit >>= 1) j ^= bit;
    j ^= bit;
    if (i < j) std::swap(a[i], a[j]);
  }
  const auto& roots = fft_roots(n);
  for (std::size_t len = 2; len <= n; len <<= 1) {
    std::size_t stride = n / len;
    for (std::size_t i = 0; i < n; i += len) {
      for (std::size_t j = 0; j < len / 2; ++j) {
        auto w = roots[j * stride];
        if (inverse) w = std::conj(w);
        auto u = a[i + j], v = a[i + j + len / 2] * w;
        a[i + j] = u + v;
        a[i + j + len / 2] = u - v;
      }
    }
  }
  if (inverse)
    for (auto& z : a) z /= double(n);
}

}  // namespace detail

// Periodic Hann: w[i] = 0.5 - 0.5 cos(2*pi*i/N).
inline std::vector<double> hann_window(std::size_t n) {
  std::vector<double> w(n);
  for (std::size_t i = 0; i < n; ++i)
    w[i] = 0.5 - 0.5 * std::cos(2.0 * std::numbers::pi * double(i) / double(n));
  return w;
}

// Triangular filters on the HTK mel scale mel(f) = 2595 log10(1 + f/700),
// peaks equally spaced in mel between 0 and sample_rate/2. Row-major
// n_mels x (fft_size/2 + 1), applied to magnitude spectrograms.
inline std::vector<double> mel_filterbank(int n_mels, std::size_t fft_size,
                                          double sample_rate_hz) {
  if (n_mels < 1) throw ConfigError("mel_filterbank: n_mels must be positive");
  if (!detail::is_pow2(fft_size))
    throw ConfigError("mel_filterbank: fft_size must be a power of two");
  if (!(sample_rate_hz > 0))
    throw ConfigError("mel_filterbank: sample_rate_hz must be positive");
  auto to_mel = [](double f) { return 2595.0 * std::log10(1.0 + f / 700.0); };
  auto from_mel = [](double m) {
    return 700.0 * (std::pow(10.0, m / 2595.0) - 1.0);
  };
  std::size_t bins = fft_size / 2 + 1;
  double mel_hi = to_mel(sample_rate_hz / 2.0);
  std::vector<double> edges(std::size_t(n_mels) + 2);
  for (std::size_t i = 0; i < edges.size(); ++i)
    edges[i] = from_mel(mel_hi * double(i) / double(n_mels + 1));
  std::vector<double> fb(std::size_t(n_mels) * bins, 0.0);
  for (int m = 0; m < n_mels; ++m) {
    double lo = edges[std::size_t(m)], mid = edges[std::size_t(m) + 1],
           hi = edges[std::size_t(m) + 2];
    for (std::size_t b = 0; b < bins; ++b) {
      double f = sample_rate_hz * double(b) / double(fft_size);
      double weight = 0.0;
      if (f > lo && f < mid)
        weight = (f - lo) / (mid - lo);
      else if (f >= mid && f < hi)
        weight = (hi - f) / (hi - mid);
      fb[std::size_t(m) * bins + b] = weight;
    }
  }
  return fb;
}

inline void write_mel_filterbank_csv(const std::string& path, int n_mels,
                                     std::size_t fft_size,
                                     double sample_rate_hz) {
  auto fb = mel_filterbank(n_mels, fft_size, sample_rate_hz);
  std::size_t bins = fft_size / 2 + 1;
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw Error("cannot open file for writing: " + path);
  for (int m = 0; m < n_mels; ++m) {
    for (std::size_t b = 0; b < bins; ++b) {
      if (b) out << ',';
      out << fb[std::size_t(m) * bins + b];
    }
    out << '\n';
  }
  if (!out) throw Error("short write: " + path);
}

struct SpectralConfig {
  std::vector<std::size_t> fft_sizes = {512, 256, 128, 64};
  std::vector<int> mel_bins = {40, 30, 20, 10};
  std::vector<double> scale_weights = {45.0, 1.0, 1.0, 1.0};
  double sample_rate_hz = 16000.0;

  void validate() const {
    if (fft_sizes.empty()) throw ConfigError("spectral.fft_sizes must be nonempty");
    for (std::size_t n : fft_sizes)
      if (!detail::is_pow2(n))
        throw ConfigError("spectral.fft_sizes: " + std::to_string(n) +
                          " is not a power of two");
    if (scale_weights.size() != fft_sizes.size())
      throw ConfigError("spectral.scale_weights length must match fft_sizes");
    if (mel_bins.size() != fft_sizes.size())
      throw ConfigError("spectral.mel_bins length must match fft_sizes");
    for (double w : scale_weights)
      if (!(w >= 0.0)) throw ConfigError("spectral.scale_weights must be nonnegative");
    for (int m : mel_bins)
      if (m < 1) throw ConfigError("spectral.mel_bins must be positive");
    if (!(sample_rate_hz > 0))
      throw ConfigError("spectral.sample_rate_hz must be positive");
  }

  // scale used by the point metrics: the largest FFT size
  std::size_t largest_scale() const {
    std::size_t best = 0;
    for (std::size_t i = 1; i < fft_sizes.size(); ++i)
      if (fft_sizes[i] > fft_sizes[best]) best = i;
    return best;
  }
};

// Hann-windowed one-sided magnitude spectrogram, hop = fft_size/4, frames
// cover the signal without padding. Backward routes through the FFT adjoint;
// bins with zero magnitude contribute zero gradient.
template <class T>
Tensor<T> stft_mag(const Tensor<T>& x, std::size_t fft_size) {
  if (x.rank() != 1)
    throw ShapeError("stft_mag: want a rank-1 signal, got " + shape_str(x.shape()));
  if (!detail::is_pow2(fft_size))
    throw ContractError("stft_mag: fft_size must be a power of two");
  std::size_t t_len = x.dim(0);
  if (t_len < fft_size)
    throw ContractError("stft_mag: signal length " + std::to_string(t_len) +
                        " shorter than fft_size " + std::to_string(fft_size));
  std::size_t hop = fft_size / 4;
  std::size_t frames = (t_len - fft_size) / hop + 1;
  std::size_t bins = fft_size / 2 + 1;
  auto window = hann_window(fft_size);

  std::vector<T> mags(frames * bins);
  // one-sided spectra kept for the backward pass
  auto spectra = std::make_shared<std::vector<std::complex<double>>>(frames * bins);
  std::vector<std::complex<double>> buf(fft_size);
  for (std::size_t f = 0; f < frames; ++f) {
    const T* seg = x.data().data() + f * hop;
    for (std::size_t i = 0; i < fft_size; ++i)
      buf[i] = {window[i] * double(seg[i]), 0.0};
    detail::fft_inplace(buf, false);
    for (std::size_t k = 0; k < bins; ++k) {
      (*spectra)[f * bins + k] = buf[k];
      mags[f * bins + k] = T(std::abs(buf[k]));
    }
  }

  Tape<T>* tape = detail::pick_tape("stft_mag", {x});
  auto y = make_op_result<T>({frames, bins}, std::move(mags), tape != nullptr, tape);
  if (tape) {
    auto xi = x.impl(), yi = y.impl();
    tape->record([xi, yi, spectra, window, frames, bins, fft_size, hop] {
      std::vector<std::complex<double>> acc(fft_size);
      for (std::size_t f = 0; f < frames; ++f) {
        std::fill(acc.begin(), acc.end(), std::complex<double>(0, 0));
        for (std::size_t k = 0; k < bins; ++k) {
          std::complex<double> xk = (*spectra)[f * bins + k];
          double mag = std::abs(xk);
          if (mag > 0.0)
            acc[k] = double(yi->grad[f * bins + k]) * std::conj(xk / mag);
        }
        detail::fft_inplace(acc, false);
        T* gx = xi->grad.data() + f * hop;
        for (std::size_t i = 0; i < fft_size; ++i)
          gx[i] += T(window[i] * acc[i].real());
      }
    });
  }
  return y;
}

namespace detail {

template <class T>
Tensor<T> log_mel(const Tensor<T>& x, std::size_t fft_size, int n_mels,
                  double sample_rate_hz) {
  auto mag = stft_mag(x, fft_size);
  std::size_t bins = fft_size / 2 + 1;
  auto fb = mel_filterbank(n_mels, fft_size, sample_rate_hz);
  // filterbank transposed to bins x n_mels so mel = mag @ fb_t
  std::vector<T> fb_t(bins * std::size_t(n_mels));
  for (int m = 0; m < n_mels; ++m)
    for (std::size_t b = 0; b < bins; ++b)
      fb_t[b * std::size_t(n_mels) + std::size_t(m)] =
          T(fb[std::size_t(m) * bins + b]);
  auto fbt = Tensor<T>::constant({bins, std::size_t(n_mels)}, std::move(fb_t));
  return log(clamp_min(matmul(mag, fbt), T(1e-5)));
}

}  // namespace detail

// Weighted sum over scales of the mean L1 distance between log-mel
// magnitudes (floor 1e-5 before the log). Zero-weight scales are skipped.
template <class T>
Tensor<T> multiscale_spectral_loss(const Tensor<T>& x, const Tensor<T>& x_hat,
                                   const SpectralConfig& cfg) {
  cfg.validate();
  if (x.rank() != 1 || x_hat.rank() != 1)
    throw ShapeError("multiscale_spectral_loss: want rank-1 signals");
  if (x.dim(0) != x_hat.dim(0))
    throw ShapeError("multiscale_spectral_loss: lengths " +
                     std::to_string(x.dim(0)) + " vs " +
                     std::to_string(x_hat.dim(0)));
  auto total = Tensor<T>::scalar(T(0));
  for (std::size_t s = 0; s < cfg.fft_sizes.size(); ++s) {
    if (cfg.scale_weights[s] == 0.0) continue;
    auto la = detail::log_mel(x, cfg.fft_sizes[s], cfg.mel_bins[s], cfg.sample_rate_hz);
    auto lb = detail::log_mel(x_hat, cfg.fft_sizes[s], cfg.mel_bins[s], cfg.sample_rate_hz);
    auto term = scale(l1(sub(la, lb)), T(cfg.scale_weights[s] / double(la.numel())));
    total = add(total, term);
  }
  return total;
}

// Scale-invariant SDR in dB: project the estimate onto the reference, then
// 10 log10(target energy / residual energy), clamped to [-100, +100].
template <class T>
double si_sdr(const std::vector<T>& x, const std::vector<T>& x_hat) {
  if (x.size() != x_hat.size())
    throw ShapeError("si_sdr: lengths " + std::to_string(x.size()) + " vs " +
                     std::to_string(x_hat.size()));
  double xx = 0, xy = 0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    xx += double(x[i]) * double(x[i]);
    xy += double(x[i]) * double(x_hat[i]);
  }
  if (xx == 0.0) throw ContractError("si_sdr: zero reference signal");
  double a = xy / xx;
  double target = 0, resid = 0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    double t = a * double(x[i]);
    double e = double(x_hat[i]) - t;
    target += t * t;
    resid += e * e;
  }
  if (resid == 0.0) return 100.0;
  if (target == 0.0) return -100.0;
  double db = 10.0 * std::log10(target / resid);
  return std::min(100.0, std::max(-100.0, db));
}

// Mean L1 over log-mel magnitudes at the largest scale.
template <class T>
double mel_error(const std::vector<T>& x, const std::vector<T>& x_hat,
                 const SpectralConfig& cfg) {
  cfg.validate();
  if (x.size() != x_hat.size())
    throw ShapeError("mel_error: lengths " + std::to_string(x.size()) +
                     " vs " + std::to_string(x_hat.size()));
  std::size_t s = cfg.largest_scale();
  auto xa = Tensor<T>::constant({x.size()}, x);
  auto xb = Tensor<T>::constant({x_hat.size()}, x_hat);
  auto la = detail::log_mel(xa, cfg.fft_sizes[s], cfg.mel_bins[s], cfg.sample_rate_hz);
  auto lb = detail::log_mel(xb, cfg.fft_sizes[s], cfg.mel_bins[s], cfg.sample_rate_hz);
  double acc = 0;
  for (std::size_t i = 0; i < la.numel(); ++i)
    acc += std::abs(double(la.data()[i]) - double(lb.data()[i]));
  return acc / double(la.numel());
}

// Mean L1 over linear magnitudes at the largest scale.
template <class T>
double stft_distance(const std::vector<T>& x, const std::vector<T>& x_hat,
                     const SpectralConfig& cfg) {
  cfg.validate();
  if (x.size() != x_hat.size())
    throw ShapeError("stft_distance: lengths " + std::to_string(x.size()) +
                     " vs " + std::to_string(x_hat.size()));
  std::size_t s = cfg.largest_scale();
  auto ma = stft_mag(Tensor<T>::constant({x.size()}, x), cfg.fft_sizes[s]);
  auto mb = stft_mag(Tensor<T>::constant({x_hat.size()}, x_hat), cfg.fft_sizes[s]);
  double acc = 0;
  for (std::size_t i = 0; i < ma.numel(); ++i)
    acc += std::abs(double(ma.data()[i]) - double(mb.data()[i]));
  return acc / double(ma.numel());
}

struct MetricsReport {
  double mel_error = 0;
  double stft_distance = 0;
  double si_sdr_db = 0;
};

template <class T>
MetricsReport metrics_report(const std::vector<T>& x, const std::vector<T>& x_hat,
                             const SpectralConfig& cfg) {
  MetricsReport r;
  r.mel_error = mel_error(x, x_hat, cfg);
  r.stft_distance = stft_distance(x, x_hat, cfg);
  r.si_sdr_db = si_sdr(x, x_hat);
  return r;
}

}  // namespace tapf
