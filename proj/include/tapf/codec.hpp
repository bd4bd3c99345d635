#pragma once

#include <cmath>
#include <string>
#include <vector>

#include "tapf/ops.hpp"
#include "tapf/rng.hpp"
#include "tapf/tensor.hpp"

namespace tapf {

inline const std::vector<std::string>& component_labels() {
  static const std::vector<std::string> labels{"encoder_conv", "decoder_conv",
                                               "quantizer", "fusion_head"};
  return labels;
}

template <class T>
struct ParamEntry {
  std::string name;
  std::string component;
  Tensor<T> tensor;
};

// Flat list of every persistent tensor: trainable parameters plus EMA
// codebooks. Registration order is the checkpoint order and is fixed for a
// given configuration, which is what makes checkpoints replayable.
template <class T>
class ParamRegistry {
 public:
  Tensor<T> add(const std::string& name, const std::string& component,
                Tensor<T> tensor) {
    const auto& labels = component_labels();
    bool known = false;
    for (const auto& l : labels) known = known || l == component;
    if (!known)
      throw ConfigError("registry: unknown component label '" + component + "'");
    for (const auto& e : items_)
      if (e.name == name)
        throw ConfigError("registry: duplicate parameter name '" + name + "'");
    items_.push_back({name, component, tensor});
    return tensor;
  }

  const std::vector<ParamEntry<T>>& items() const { return items_; }
  std::vector<ParamEntry<T>>& items() { return items_; }

  Tensor<T> find(const std::string& name) const {
    for (const auto& e : items_)
      if (e.name == name) return e.tensor;
    throw ConfigError("registry: no parameter named '" + name + "'");
  }

  void zero_grads() {
    for (auto& e : items_) e.tensor.zero_grad();
  }

 private:
  std::vector<ParamEntry<T>> items_;
};

struct CodecConfig {
  std::vector<int> strides = {4, 2};
  int channels = 32;
  int latent_dim = 64;
  int kernel_size = 7;

  void validate() const {
    if (strides.empty()) throw ConfigError("codec.strides must be nonempty");
    for (int s : strides)
      if (s < 1) throw ConfigError("codec.strides must be positive");
    if (channels < 1) throw ConfigError("codec.channels must be positive");
    if (latent_dim < 1) throw ConfigError("codec.latent_dim must be positive");
    if (kernel_size < 1 || kernel_size % 2 == 0)
      throw ConfigError("codec.kernel_size must be odd and positive");
  }

  long compression() const {
    long p = 1;
    for (int s : strides) p *= s;
    return p;
  }
};

// Strided conv stack with tanh between stages and a 1x1 channel mixer in
// place of recurrence; the decoder mirrors it with transposed convs. Output
// length is restored exactly: pad (k-1)/2 both ways, out_pad stride-1.
template <class T>
struct CodecModel {
  CodecConfig cfg;
  std::vector<Tensor<T>> enc_w, enc_b;
  Tensor<T> enc_mix_w, enc_mix_b, enc_out_w, enc_out_b;
  Tensor<T> dec_in_w, dec_in_b;
  std::vector<Tensor<T>> dec_w, dec_b;
  Tensor<T> dec_out_w, dec_out_b;

  static CodecModel init(const CodecConfig& cfg, Tape<T>& tape,
                         ParamRegistry<T>& reg, const Rng& seed_rng) {
    cfg.validate();
    CodecModel m;
    m.cfg = cfg;
    Rng rng = seed_rng.split("codec");
    std::size_t ch = std::size_t(cfg.channels);
    std::size_t k = std::size_t(cfg.kernel_size);
    std::size_t d = std::size_t(cfg.latent_dim);

    auto weight = [&](const std::string& name, const std::string& comp,
                      Shape shape, std::size_t fan_in) {
      std::size_t n = shape_numel(shape);
      std::vector<T> v(n);
      double scale = 1.0 / std::sqrt(double(fan_in));
      for (auto& x : v) x = T(scale * rng.normal());
      return reg.add(name, comp, Tensor<T>::param(tape, std::move(shape), std::move(v)));
    };
    auto bias = [&](const std::string& name, const std::string& comp,
                    std::size_t n) {
      return reg.add(name, comp,
                     Tensor<T>::param(tape, {n}, std::vector<T>(n, T(0))));
    };

    std::size_t in_ch = 1;
    for (std::size_t i = 0; i < cfg.strides.size(); ++i) {
      std::string base = "encoder.stage" + std::to_string(i);
      m.enc_w.push_back(weight(base + ".weight", "encoder_conv",
                               {ch, in_ch, k}, in_ch * k));
      m.enc_b.push_back(bias(base + ".bias", "encoder_conv", ch));
      in_ch = ch;
    }
    m.enc_mix_w = weight("encoder.mix.weight", "encoder_conv", {ch, ch, 1}, ch);
    m.enc_mix_b = bias("encoder.mix.bias", "encoder_conv", ch);
    m.enc_out_w = weight("encoder.out.weight", "encoder_conv", {d, ch, 1}, ch);
    m.enc_out_b = bias("encoder.out.bias", "encoder_conv", d);

    m.dec_in_w = weight("decoder.in.weight", "decoder_conv", {ch, d, 1}, d);
    m.dec_in_b = bias("decoder.in.bias", "decoder_conv", ch);
    for (std::size_t i = 0; i < cfg.strides.size(); ++i) {
      std::string base = "decoder.stage" + std::to_string(i);
      m.dec_w.push_back(weight(base + ".weight", "decoder_conv",
                               {ch, ch, k}, ch * k));
      m.dec_b.push_back(bias(base + ".bias", "decoder_conv", ch));
    }
    m.dec_out_w = weight("decoder.out.weight", "decoder_conv", {1, ch, k}, ch * k);
    m.dec_out_b = bias("decoder.out.bias", "decoder_conv", 1);
    return m;
  }

  // x: rank-1 waveform of length T, T divisible by the compression factor.
  Tensor<T> encode(const Tensor<T>& x) const {
    if (x.rank() != 1)
      throw ShapeError("encode: want a rank-1 waveform, got " +
                       shape_str(x.shape()));
    std::size_t t_in = x.dim(0);
    long comp = cfg.compression();
    if (t_in == 0 || t_in % std::size_t(comp) != 0)
      throw PaddingError("encode: length " + std::to_string(t_in) +
                         " not divisible by compression factor " +
                         std::to_string(comp) + "; zero-pad the input");
    std::size_t pad = std::size_t(cfg.kernel_size - 1) / 2;
    auto h = reshape(x, {1, t_in});
    for (std::size_t i = 0; i < enc_w.size(); ++i)
      h = tanh(conv1d(h, enc_w[i], enc_b[i], std::size_t(cfg.strides[i]), pad));
    h = tanh(conv1d(h, enc_mix_w, enc_mix_b, 1, 0));
    h = conv1d(h, enc_out_w, enc_out_b, 1, 0);
    if (h.dim(1) != t_in / std::size_t(comp))
      throw ContractError("encode: frame count " + std::to_string(h.dim(1)) +
                          " != T/compression");
    return transpose(h);
  }

  // z: T'xd latent frames. Output length is exactly T' * compression.
  Tensor<T> decode(const Tensor<T>& z) const {
    if (z.rank() != 2 || z.dim(1) != std::size_t(cfg.latent_dim))
      throw ShapeError("decode: latents " + shape_str(z.shape()) +
                       " vs latent_dim " + std::to_string(cfg.latent_dim));
    for (T v : z.data())
      if (!std::isfinite(double(v)))
        throw NumericError("decode: non-finite latent input");
    std::size_t pad = std::size_t(cfg.kernel_size - 1) / 2;
    auto h = tanh(conv1d(transpose(z), dec_in_w, dec_in_b, 1, 0));
    for (std::size_t i = 0; i < dec_w.size(); ++i) {
      std::size_t s = std::size_t(cfg.strides[cfg.strides.size() - 1 - i]);
      h = tanh(conv1d_transpose(h, dec_w[i], dec_b[i], s, pad, s - 1));
    }
    h = conv1d(h, dec_out_w, dec_out_b, 1, pad);
    return reshape(h, {h.dim(1)});
  }
};

}  // namespace tapf
