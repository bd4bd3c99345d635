#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <string>
#include <vector>

#include "tapf/ops.hpp"
#include "tapf/rng.hpp"
#include "tapf/tensor.hpp"

namespace tapf {

struct RvqConfig {
  int n_q = 8;
  int codebook_size = 64;
  int dim = 64;
  double ema_decay = 0.99;
  int dead_code_steps = 1000;

  void validate() const {
    if (n_q < 1) throw ConfigError("quantizer.n_q must be >= 1");
    if (codebook_size < 1) throw ConfigError("quantizer.codebook_size must be >= 1");
    if (dim < 1) throw ConfigError("quantizer.dim must be >= 1");
    if (!(ema_decay > 0.0) || !(ema_decay < 1.0))
      throw ConfigError("quantizer.ema_decay must be in (0,1)");
  }
};

// EMA-learned codebooks; entries carry no autodiff gradient. Index 0 of each
// book starts as the zero vector so a residual can always fall back to "no
// correction", which is what makes residual energy non-increasing per layer.
template <class T>
struct RvqState {
  RvqConfig cfg;
  std::vector<Tensor<T>> codebooks;            // n_q books, each K x d
  std::vector<std::vector<int>> unused_steps;  // per book, per entry
  std::vector<std::vector<std::vector<T>>> reservoir;  // per book: recent input frames
  Rng rng{0};

  static RvqState init(const RvqConfig& cfg, const Rng& seed_rng) {
    cfg.validate();
    RvqState st;
    st.cfg = cfg;
    st.rng = seed_rng.split("rvq");
    for (int q = 0; q < cfg.n_q; ++q) {
      Rng layer = seed_rng.split("rvq/book", std::uint64_t(q));
      std::vector<T> entries(std::size_t(cfg.codebook_size) * cfg.dim, T(0));
      for (int k = 1; k < cfg.codebook_size; ++k)
        for (int j = 0; j < cfg.dim; ++j)
          entries[std::size_t(k) * cfg.dim + j] = T(0.1 * layer.normal());
      st.codebooks.push_back(Tensor<T>::constant(
          {std::size_t(cfg.codebook_size), std::size_t(cfg.dim)}, std::move(entries)));
      st.unused_steps.emplace_back(cfg.codebook_size, 0);
      st.reservoir.emplace_back();
    }
    return st;
  }

  static RvqState from_codebooks(std::vector<Tensor<T>> books, double ema_decay = 0.99,
                                 int dead_code_steps = 1000) {
    if (books.empty()) throw ConfigError("quantizer: empty codebook list");
    RvqState st;
    st.cfg.n_q = int(books.size());
    st.cfg.codebook_size = int(books[0].dim(0));
    st.cfg.dim = int(books[0].dim(1));
    st.cfg.ema_decay = ema_decay;
    st.cfg.dead_code_steps = dead_code_steps;
    for (auto& b : books) {
      if (b.rank() != 2 || b.dim(1) != std::size_t(st.cfg.dim))
        throw ShapeError("quantizer: codebook shape " + shape_str(b.shape()));
      if (b.dim(0) == 0) throw ConfigError("quantizer: empty codebook");
      st.unused_steps.emplace_back(b.dim(0), 0);
      st.reservoir.emplace_back();
      st.codebooks.push_back(std::move(b));
    }
    return st;
  }
};

template <class T>
struct QuantizeResult {
  std::vector<std::vector<int>> codes;          // n_q x T'
  Tensor<T> z_hat;                              // T' x d, straight-through
  Tensor<T> first_layer_features;               // \hat{z}_1, straight-through
  std::vector<std::vector<T>> per_layer;        // \hat{z}_i values, each T'*d
  std::vector<std::vector<T>> layer_inputs;     // r_{i-1} values, each T'*d
  std::vector<T> residual;                      // r_{n_q} = z_e - z_hat
};

namespace detail {

// nearest entry under squared Euclidean distance, ties to the lowest index
template <class T>
int nearest_entry(const T* frame, const Tensor<T>& book, int d) {
  std::size_t k = book.dim(0);
  const T* data = book.data().data();
  int best = 0;
  T best_dist = 0;
  for (int j = 0; j < d; ++j) {
    T diff = frame[j] - data[j];
    best_dist += diff * diff;
  }
  for (std::size_t e = 1; e < k; ++e) {
    const T* entry = data + e * std::size_t(d);
    T dist = 0;
    // Partial sums of squares are monotone nondecreasing, so an entry whose
    // prefix already reaches best_dist can neither beat it nor displace the
    // earlier index on a tie; abandoning it keeps the selection identical.
    int j = 0;
    bool alive = true;
    while (j < d) {
      int stop = std::min(d, j + 16);
      for (; j < stop; ++j) {
        T diff = frame[j] - entry[j];
        dist += diff * diff;
      }
      if (dist >= best_dist) {
        alive = false;
        break;
      }
    }
    if (alive && dist < best_dist) {
      best_dist = dist;
      best = int(e);
    }
  }
  return best;
}

}  // namespace detail

// Eq-style residual cascade: layer i quantizes r_{i-1}, r_i = r_{i-1} - zhat_i.
// The returned z_hat carries the accumulated sum as its forward value and the
// identity gradient into z_e. residual is formed as z_e - z_hat so that
// z_e - z_hat - residual is exactly zero elementwise.
template <class T>
QuantizeResult<T> rvq_quantize(const Tensor<T>& z_e, RvqState<T>& state) {
  if (z_e.rank() != 2 || z_e.dim(1) != std::size_t(state.cfg.dim))
    throw ShapeError("rvq_quantize: latents " + shape_str(z_e.shape()) +
                     " vs codebook dim " + std::to_string(state.cfg.dim));
  for (const auto& b : state.codebooks)
    if (b.dim(0) == 0) throw ConfigError("rvq_quantize: empty codebook");

  std::size_t frames = z_e.dim(0);
  int d = state.cfg.dim;
  int n_q = state.cfg.n_q;
  QuantizeResult<T> out;
  out.codes.assign(n_q, std::vector<int>(frames, 0));
  out.per_layer.assign(n_q, std::vector<T>(frames * d, T(0)));
  out.layer_inputs.assign(n_q, std::vector<T>(frames * d, T(0)));

  std::vector<T> r = z_e.data();
  std::vector<T> zsum(frames * d, T(0));
  for (int q = 0; q < n_q; ++q) {
    out.layer_inputs[q] = r;
    const auto& book = state.codebooks[q];
    for (std::size_t t = 0; t < frames; ++t) {
      T* frame = r.data() + t * d;
      int code = detail::nearest_entry(frame, book, d);
      out.codes[q][t] = code;
      const T* entry = book.data().data() + std::size_t(code) * d;
      T* zl = out.per_layer[q].data() + t * d;
      for (int j = 0; j < d; ++j) {
        zl[j] = entry[j];
        zsum[t * d + j] += entry[j];
        frame[j] -= entry[j];
      }
    }
  }

  std::vector<T> zhat_vals = ste_surrogate_flag() ? z_e.data() : zsum;
  out.residual.resize(frames * d);
  for (std::size_t i = 0; i < out.residual.size(); ++i)
    out.residual[i] = z_e.data()[i] - zhat_vals[i];
  std::vector<T> first_vals =
      ste_surrogate_flag() ? z_e.data() : out.per_layer[0];
  out.z_hat = straight_through(std::move(zhat_vals), z_e);
  out.first_layer_features = straight_through(std::move(first_vals), z_e);
  return out;
}

struct FsqConfig {
  std::vector<int> levels = {8, 5, 5, 5};

  void validate() const {
    if (levels.empty()) throw ConfigError("quantizer.fsq_levels must be nonempty");
    for (int l : levels)
      if (l < 2)
        throw ConfigError("quantizer.fsq_levels: level " + std::to_string(l) +
                          " < 2");
  }
  long long code_space() const {
    long long n = 1;
    for (int l : levels) n *= l;
    return n;
  }
};

template <class T>
struct FsqResult {
  std::vector<std::vector<int>> codes;   // d x T', per-dimension levels
  std::vector<long long> composite;      // T', mixed radix, dim 0 least significant
  Tensor<T> z_hat;                       // straight-through
};

// Per dimension: zhat_d = round(h * tanh(z_d)) / h with h = (L_d - 1)/2.
// The integer code is the rounded value shifted by floor(h) into
// [0, L_d - 1]. Gradient through the op is the identity into z.
template <class T>
FsqResult<T> fsq_quantize(const Tensor<T>& z, const FsqConfig& cfg) {
  cfg.validate();
  if (z.rank() != 2 || z.dim(1) != cfg.levels.size())
    throw ShapeError("fsq_quantize: latents " + shape_str(z.shape()) +
                     " vs levels count " + std::to_string(cfg.levels.size()));
  std::size_t frames = z.dim(0), d = cfg.levels.size();
  FsqResult<T> out;
  out.codes.assign(d, std::vector<int>(frames, 0));
  out.composite.assign(frames, 0);
  std::vector<T> vals(frames * d);
  for (std::size_t t = 0; t < frames; ++t) {
    long long radix = 1;
    for (std::size_t j = 0; j < d; ++j) {
      double h = (cfg.levels[j] - 1) / 2.0;
      double q = detail::round_half_away(h * std::tanh(double(z.at(t, j))));
      int shift = int(std::floor(h));
      // even levels can round to floor(h)+1 at exact tanh saturation; keep
      // the code inside [0, L-1]
      int code = std::clamp(int(q) + shift, 0, cfg.levels[j] - 1);
      out.codes[j][t] = code;
      vals[t * d + j] = T(double(code - shift) / h);
      out.composite[t] += radix * code;
      radix *= cfg.levels[j];
    }
  }
  if (ste_surrogate_flag()) vals = z.data();
  out.z_hat = straight_through(std::move(vals), z);
  return out;
}

// Inverts the per-dimension codes with the same expression the forward used,
// so decode(codes) == z_hat bit-exactly.
template <class T>
std::vector<T> fsq_decode(const std::vector<std::vector<int>>& codes,
                          const FsqConfig& cfg) {
  cfg.validate();
  if (codes.size() != cfg.levels.size())
    throw ShapeError("fsq_decode: " + std::to_string(codes.size()) +
                     " code rows vs " + std::to_string(cfg.levels.size()) +
                     " levels");
  std::size_t frames = codes.empty() ? 0 : codes[0].size();
  std::size_t d = cfg.levels.size();
  std::vector<T> vals(frames * d);
  for (std::size_t j = 0; j < d; ++j) {
    double h = (cfg.levels[j] - 1) / 2.0;
    int shift = int(std::floor(h));
    for (std::size_t t = 0; t < frames; ++t) {
      int code = codes[j][t];
      if (code < 0 || code >= cfg.levels[j])
        throw IndexError("fsq_decode: code " + std::to_string(code) +
                         " outside [0," + std::to_string(cfg.levels[j]) +
                         ") at level " + std::to_string(j));
      double q = double(code - shift);
      vals[t * d + j] = T(q / h);
    }
  }
  return vals;
}

// Mean squared error against the detached quantizer output; gradient reaches
// z_e only.
template <class T>
Tensor<T> commit_loss(const Tensor<T>& z_e, const Tensor<T>& z_hat) {
  if (z_e.shape() != z_hat.shape())
    throw ShapeError("commit_loss: shape mismatch " + shape_str(z_e.shape()) +
                     " vs " + shape_str(z_hat.shape()));
  auto diff = sub(z_e, z_hat.detach());
  return mean(mul(diff, diff));
}

// Per-step assignment statistics accumulated over a batch.
template <class T>
struct RvqBatchStats {
  std::vector<std::vector<T>> sums;    // per book: K x d accumulated inputs
  std::vector<std::vector<long>> counts;  // per book: K

  explicit RvqBatchStats(const RvqConfig& cfg) {
    sums.assign(cfg.n_q, std::vector<T>(std::size_t(cfg.codebook_size) * cfg.dim, T(0)));
    counts.assign(cfg.n_q, std::vector<long>(cfg.codebook_size, 0));
  }

  void accumulate(const QuantizeResult<T>& res, RvqState<T>& state) {
    int d = state.cfg.dim;
    for (std::size_t q = 0; q < res.codes.size(); ++q) {
      const auto& input = res.layer_inputs[q];
      for (std::size_t t = 0; t < res.codes[q].size(); ++t) {
        int k = res.codes[q][t];
        counts[q][k] += 1;
        T* dst = sums[q].data() + std::size_t(k) * d;
        const T* src = input.data() + t * d;
        for (int j = 0; j < d; ++j) dst[j] += src[j];
        // reservoir of recent layer inputs feeds dead-code reseeding
        auto& pool = state.reservoir[q];
        if (pool.size() < 32) {
          pool.emplace_back(src, src + d);
        } else if (state.rng.next_u64() % 61 == 0) {
          pool[std::size_t(state.rng.uniform_int(0, 31))].assign(src, src + d);
        }
      }
    }
  }
};

// Entries with assignments move toward the mean of their assigned inputs:
// e' = decay * e + (1 - decay) * mean(assigned). Unused entries are left
// alone until they have been unused for dead_code_steps consecutive updates,
// then reseeded to a random recent input frame.
template <class T>
void ema_update(RvqState<T>& state, const RvqBatchStats<T>& stats, double decay) {
  if (!(decay >= 0.0 && decay < 1.0))
    throw ConfigError("ema_update: decay must be in [0,1)");
  int d = state.cfg.dim;
  for (std::size_t q = 0; q < state.codebooks.size(); ++q) {
    auto& book = state.codebooks[q].data();
    for (std::size_t k = 0; k < state.unused_steps[q].size(); ++k) {
      long n = stats.counts[q][k];
      if (n > 0) {
        const T* sum = stats.sums[q].data() + k * std::size_t(d);
        T* entry = book.data() + k * std::size_t(d);
        for (int j = 0; j < d; ++j) {
          T m = sum[j] / T(n);
          entry[j] = T(decay) * entry[j] + T(1.0 - decay) * m;
        }
        state.unused_steps[q][k] = 0;
      } else {
        state.unused_steps[q][k] += 1;
        if (state.unused_steps[q][k] >= state.cfg.dead_code_steps &&
            !state.reservoir[q].empty()) {
          const auto& frame = state.reservoir[q][std::size_t(
              state.rng.uniform_int(0, std::int64_t(state.reservoir[q].size()) - 1))];
          std::copy(frame.begin(), frame.end(), book.begin() + k * std::size_t(d));
          state.unused_steps[q][k] = 0;
        }
      }
    }
  }
}

}  // namespace tapf
