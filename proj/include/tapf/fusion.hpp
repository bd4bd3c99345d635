#pragma once

#include <cmath>
#include <string>
#include <vector>

#include "tapf/codec.hpp"
#include "tapf/ops.hpp"
#include "tapf/quantize.hpp"
#include "tapf/rng.hpp"
#include "tapf/tensor.hpp"
#include "tapf/warnings.hpp"

namespace tapf {

enum class FusionLocation { pre_quantization, quantization_level };
enum class FusionMethod { distillation, contrastive, tapf, none };
enum class ComplexityNorm { l1, l2 };
enum class Pooling { attention, mean };

inline FusionLocation fusion_location_from_string(const std::string& s) {
  if (s == "pre_quantization") return FusionLocation::pre_quantization;
  if (s == "quantization_level") return FusionLocation::quantization_level;
  throw ConfigError("fusion.location: unknown value '" + s + "'");
}

inline std::string to_string(FusionLocation v) {
  return v == FusionLocation::pre_quantization ? "pre_quantization"
                                               : "quantization_level";
}

inline FusionMethod fusion_method_from_string(const std::string& s) {
  if (s == "distillation") return FusionMethod::distillation;
  if (s == "contrastive") return FusionMethod::contrastive;
  if (s == "tapf") return FusionMethod::tapf;
  if (s == "none") return FusionMethod::none;
  throw ConfigError("fusion.method: unknown value '" + s + "'");
}

inline std::string to_string(FusionMethod v) {
  switch (v) {
    case FusionMethod::distillation: return "distillation";
    case FusionMethod::contrastive: return "contrastive";
    case FusionMethod::tapf: return "tapf";
    default: return "none";
  }
}

inline ComplexityNorm complexity_norm_from_string(const std::string& s) {
  if (s == "l1") return ComplexityNorm::l1;
  if (s == "l2") return ComplexityNorm::l2;
  throw ConfigError("fusion.complexity_norm: unknown value '" + s + "'");
}

inline std::string to_string(ComplexityNorm v) {
  return v == ComplexityNorm::l1 ? "l1" : "l2";
}

inline Pooling pooling_from_string(const std::string& s) {
  if (s == "attention") return Pooling::attention;
  if (s == "mean") return Pooling::mean;
  throw ConfigError("fusion.pooling: unknown value '" + s + "'");
}

inline std::string to_string(Pooling v) {
  return v == Pooling::attention ? "attention" : "mean";
}

struct FusionConfig {
  FusionLocation location = FusionLocation::pre_quantization;
  FusionMethod method = FusionMethod::none;
  double lambda_fusion = 1.0;
  double tau = 0.07;
  int w_min = 1;
  int w_max = 7;
  double lambda_sim = 1.0;
  ComplexityNorm complexity_norm = ComplexityNorm::l2;
  Pooling pooling = Pooling::attention;
  bool complexity_standardize = true;
  int proj_dim = 16;

  void validate() const {
    if (!(lambda_fusion >= 0.0))
      throw ConfigError("fusion.lambda_fusion must be nonnegative");
    if (!(tau > 0.0)) throw ConfigError("fusion.tau must be positive");
    if (w_min < 1) throw ConfigError("fusion.w_min must be >= 1");
    if (w_min > w_max) throw ConfigError("fusion.w_min must be <= fusion.w_max");
    if (!(lambda_sim >= 0.0))
      throw ConfigError("fusion.lambda_sim must be nonnegative");
    if (proj_dim < 1) throw ConfigError("fusion.proj_dim must be positive");
  }
};

// Linear maps taking audio latents (d) and visual features (d_v) into the
// shared space d_s where all fusion losses live.
template <class T>
struct ProjectionHeads {
  Tensor<T> audio_w, audio_b, vision_w, vision_b;

  static ProjectionHeads init(int d, int d_v, int d_s, Tape<T>& tape,
                              ParamRegistry<T>& reg, const Rng& seed_rng) {
    if (d < 1 || d_v < 1 || d_s < 1)
      throw ConfigError("projection heads: dimensions must be positive");
    Rng rng = seed_rng.split("fusion");
    ProjectionHeads h;
    auto make_w = [&](const std::string& name, std::size_t rows, std::size_t cols) {
      std::vector<T> v(rows * cols);
      double s = 1.0 / std::sqrt(double(rows));
      for (auto& x : v) x = T(s * rng.normal());
      return reg.add(name, "fusion_head",
                     Tensor<T>::param(tape, {rows, cols}, std::move(v)));
    };
    auto make_b = [&](const std::string& name, std::size_t n) {
      return reg.add(name, "fusion_head",
                     Tensor<T>::param(tape, {n}, std::vector<T>(n, T(0))));
    };
    h.audio_w = make_w("fusion.audio.weight", std::size_t(d), std::size_t(d_s));
    h.audio_b = make_b("fusion.audio.bias", std::size_t(d_s));
    h.vision_w = make_w("fusion.vision.weight", std::size_t(d_v), std::size_t(d_s));
    h.vision_b = make_b("fusion.vision.bias", std::size_t(d_s));
    return h;
  }

  Tensor<T> project_audio(const Tensor<T>& x) const {
    return add_rowvec(matmul(x, audio_w), audio_b);
  }
  Tensor<T> project_vision(const Tensor<T>& v) const {
    return add_rowvec(matmul(v, vision_w), vision_b);
  }
};

// Proportional center-of-frame mapping from a 1-based video frame index to a
// 1-based audio frame index.
inline int align_index(int t, int t_v, int t_prime) {
  if (t_v < 1 || t_prime < 1)
    throw ContractError("align_index: sequence lengths must be >= 1");
  if (t < 1 || t > t_v)
    throw ContractError("align_index: frame " + std::to_string(t) +
                        " outside [1," + std::to_string(t_v) + "]");
  double center = (double(t) - 0.5) * double(t_prime) / double(t_v) + 0.5;
  int c = int(detail::round_half_away(center));
  return std::min(t_prime, std::max(1, c));
}

// W_t = round(W_min + (W_max - W_min) * sigmoid(c_t)), half away from zero.
inline int dynamic_window(double c, int w_min, int w_max) {
  if (w_min < 1 || w_min > w_max)
    throw ContractError("dynamic_window: need 1 <= W_min <= W_max");
  double sig = 1.0 / (1.0 + std::exp(-c));
  int w = int(detail::round_half_away(double(w_min) + double(w_max - w_min) * sig));
  return std::min(w_max, std::max(w_min, w));
}

// c_1 = ||v_1||, c_t = ||v_t - v_{t-1}|| for t >= 2; optionally standardized
// to zero mean and unit variance over the sequence (raw norms are
// nonnegative, which would pin sigmoid(c) >= 0.5 and halve the usable window
// range).
template <class T>
std::vector<double> visual_complexity(const Tensor<T>& v, ComplexityNorm norm,
                                      bool standardize) {
  if (v.rank() != 2 || v.dim(0) < 1)
    throw ShapeError("visual_complexity: want T_v x d_v with T_v >= 1, got " +
                     shape_str(v.shape()));
  std::size_t t_v = v.dim(0), d = v.dim(1);
  std::vector<double> c(t_v, 0.0);
  for (std::size_t t = 0; t < t_v; ++t) {
    double acc = 0;
    for (std::size_t j = 0; j < d; ++j) {
      double x = double(v.at(t, j)) - (t > 0 ? double(v.at(t - 1, j)) : 0.0);
      acc += norm == ComplexityNorm::l1 ? std::abs(x) : x * x;
    }
    c[t] = norm == ComplexityNorm::l1 ? acc : std::sqrt(acc);
  }
  if (standardize) {
    double mean = 0;
    for (double x : c) mean += x;
    mean /= double(t_v);
    double var = 0;
    for (double x : c) var += (x - mean) * (x - mean);
    var /= double(t_v);
    double sd = std::sqrt(var);
    if (sd > 0)
      for (double& x : c) x = (x - mean) / sd;
    else
      std::fill(c.begin(), c.end(), 0.0);
  }
  return c;
}

namespace detail {

inline void window_bounds(int center, int w, int t_prime, std::size_t& lo0,
                          std::size_t& len) {
  int half = w / 2;
  int lo = std::max(1, center - half);
  int hi = std::min(t_prime, center + half);
  lo0 = std::size_t(lo - 1);
  len = std::size_t(hi - lo + 1);
}

}  // namespace detail

// Attention over the window J_t = [center - floor(W/2), center + floor(W/2)]
// clipped to [1, T']; weights are a softmax over cosine similarities.
template <class T>
Tensor<T> attention_pool(const Tensor<T>& v_t, const Tensor<T>& z,
                         int center, int w_t) {
  if (v_t.rank() != 1 || z.rank() != 2 || z.dim(1) != v_t.dim(0))
    throw ShapeError("attention_pool: shapes " + shape_str(v_t.shape()) +
                     " vs " + shape_str(z.shape()));
  if (w_t < 1) throw ContractError("attention_pool: window must be >= 1");
  int t_prime = int(z.dim(0));
  if (center < 1 || center > t_prime)
    throw ContractError("attention_pool: center " + std::to_string(center) +
                        " outside [1," + std::to_string(t_prime) + "]");
  std::size_t lo0, len;
  detail::window_bounds(center, w_t, t_prime, lo0, len);
  auto zw = row_slice(z, lo0, len);
  auto alpha = softmax(cosine_similarity(zw, v_t));
  return reshape(matmul(reshape(alpha, {1, len}), zw), {v_t.dim(0)});
}

// Dimension-wise distillation: -log(sigmoid(cosim)) per aligned frame pair,
// averaged over video frames. Zero-norm rows contribute cosim = 0 and a
// recorded warning.
template <class T>
Tensor<T> distill_loss(const Tensor<T>& f_audio, const Tensor<T>& f_vision) {
  if (f_audio.rank() != 2 || f_vision.rank() != 2 ||
      f_audio.dim(1) != f_vision.dim(1))
    throw ShapeError("distill_loss: shapes " + shape_str(f_audio.shape()) +
                     " vs " + shape_str(f_vision.shape()));
  int t_prime = int(f_audio.dim(0)), t_v = int(f_vision.dim(0));
  if (t_prime < 1 || t_v < 1)
    throw ContractError("distill_loss: empty sequence");
  auto row_is_zero = [](const Tensor<T>& m, int row) {
    for (std::size_t j = 0; j < m.dim(1); ++j)
      if (m.at(std::size_t(row), j) != T(0)) return false;
    return true;
  };
  std::vector<int> centers(static_cast<std::size_t>(t_v), 0);
  for (int t = 1; t <= t_v; ++t) {
    int c = align_index(t, t_v, t_prime);
    centers[std::size_t(t - 1)] = c - 1;
    if (row_is_zero(f_audio, c - 1) || row_is_zero(f_vision, t - 1))
      warn("distill_loss: zero-norm vector at video frame " + std::to_string(t));
  }
  auto aligned = gather(f_audio, centers);
  auto cos = cosine_similarity(aligned, f_vision);
  // -log(sigmoid(c)) = log(1 + exp(-c)), stable for |c| <= 1
  return mean(log(add_scalar(exp(neg(cos)), T(1))));
}

// Symmetric InfoNCE over mean-pooled sequences.
template <class T>
Tensor<T> contrastive_loss(const std::vector<Tensor<T>>& f_audio,
                           const std::vector<Tensor<T>>& f_vision, double tau) {
  if (f_audio.empty() || f_audio.size() != f_vision.size())
    throw ContractError("contrastive_loss: need matching nonempty batches");
  if (!(tau > 0.0)) throw ConfigError("contrastive_loss: tau must be positive");
  std::size_t b = f_audio.size();
  std::vector<Tensor<T>> pa, pv;
  for (std::size_t i = 0; i < b; ++i) {
    if (f_audio[i].rank() != 2 || f_vision[i].rank() != 2 ||
        f_audio[i].dim(1) != f_vision[i].dim(1))
      throw ShapeError("contrastive_loss: item " + std::to_string(i) +
                       " shapes " + shape_str(f_audio[i].shape()) + " vs " +
                       shape_str(f_vision[i].shape()));
    pa.push_back(mean_axis(f_audio[i], 0));
    pv.push_back(mean_axis(f_vision[i], 0));
  }
  auto vmat = stack_rows(pv);
  std::vector<Tensor<T>> srows;
  for (std::size_t i = 0; i < b; ++i)
    srows.push_back(cosine_similarity(vmat, pa[i]));  // row i: s_{i,j} over j
  auto s = scale(stack_rows(srows), T(1.0 / tau));

  std::vector<T> eye(b * b, T(0));
  for (std::size_t i = 0; i < b; ++i) eye[i * b + i] = T(1);
  auto eye_t = Tensor<T>::constant({b, b}, std::move(eye));
  auto diag_nll = [&](const Tensor<T>& logits) {
    auto p = softmax(logits);
    return neg(mean(log(sum_axis(mul(p, eye_t), 1))));
  };
  auto l_av = diag_nll(s);
  auto l_va = diag_nll(transpose(s));
  return scale(add(l_av, l_va), T(0.5));
}

// (1/T_v) sum_t [ ||zhat_t - v_t||_1 + lambda_sim (1 - cosim(zhat_t, v_t)) ]
// with zhat_t pooled from the dynamic window around the aligned center.
template <class T>
Tensor<T> tapf_loss(const Tensor<T>& z, const Tensor<T>& v_proj,
                    const FusionConfig& cfg) {
  cfg.validate();
  if (z.rank() != 2 || v_proj.rank() != 2 || z.dim(1) != v_proj.dim(1))
    throw ShapeError("tapf_loss: shapes " + shape_str(z.shape()) + " vs " +
                     shape_str(v_proj.shape()));
  int t_prime = int(z.dim(0)), t_v = int(v_proj.dim(0));
  if (t_prime < 1 || t_v < 1) throw ContractError("tapf_loss: empty sequence");
  auto c = visual_complexity(v_proj, cfg.complexity_norm,
                             cfg.complexity_standardize);
  auto total = Tensor<T>::scalar(T(0));
  for (int t = 1; t <= t_v; ++t) {
    int w_t = dynamic_window(c[std::size_t(t - 1)], cfg.w_min, cfg.w_max);
    int center = align_index(t, t_v, t_prime);
    auto v_t = reshape(row_slice(v_proj, std::size_t(t - 1), 1), {v_proj.dim(1)});
    Tensor<T> zhat;
    if (cfg.pooling == Pooling::attention) {
      zhat = attention_pool(v_t, z, center, w_t);
    } else {
      std::size_t lo0, len;
      detail::window_bounds(center, w_t, t_prime, lo0, len);
      zhat = mean_axis(row_slice(z, lo0, len), 0);
    }
    auto term = l1(sub(zhat, v_t));
    if (cfg.lambda_sim != 0.0) {
      auto cos = cosine_similarity(zhat, v_t);
      term = add(term, scale(add_scalar(neg(cos), T(1)), T(cfg.lambda_sim)));
    }
    total = add(total, term);
  }
  return scale(total, T(1.0 / double(t_v)));
}

// Selects the audio-side features the fusion loss sees: the continuous
// encoder output, or the first-layer quantized features (straight-through
// into the encoder; codebooks update only via EMA).
template <class T>
Tensor<T> fusion_features(FusionLocation location, const Tensor<T>& z_e,
                          const QuantizeResult<T>& result) {
  if (location == FusionLocation::pre_quantization) return z_e;
  return result.first_layer_features;
}

template <class T>
struct FusionBatchItem {
  Tensor<T> features;  // T' x d audio-side features per fusion_features
  Tensor<T> video;     // T_v x d_v raw visual features
};

// Batch-level fusion objective; the caller multiplies by lambda_fusion.
template <class T>
Tensor<T> fusion_objective(const FusionConfig& cfg,
                           const ProjectionHeads<T>& heads,
                           const std::vector<FusionBatchItem<T>>& items) {
  cfg.validate();
  if (cfg.method == FusionMethod::none) return Tensor<T>::scalar(T(0));
  if (items.empty()) throw ContractError("fusion_objective: empty batch");
  if (cfg.method == FusionMethod::contrastive) {
    std::vector<Tensor<T>> fa, fv;
    for (const auto& it : items) {
      fa.push_back(heads.project_audio(it.features));
      fv.push_back(heads.project_vision(it.video));
    }
    return contrastive_loss(fa, fv, cfg.tau);
  }
  auto total = Tensor<T>::scalar(T(0));
  for (const auto& it : items) {
    auto fa = heads.project_audio(it.features);
    auto fv = heads.project_vision(it.video);
    auto term = cfg.method == FusionMethod::distillation
                    ? distill_loss(fa, fv)
                    : tapf_loss(fa, fv, cfg);
    total = add(total, term);
  }
  return scale(total, T(1.0 / double(items.size())));
}

}  // namespace tapf
