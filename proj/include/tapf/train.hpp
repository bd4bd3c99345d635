#pragma once

#include <chrono>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "json.hpp"
#include "tapf/checkpoint.hpp"
#include "tapf/codec.hpp"
#include "tapf/fusion.hpp"
#include "tapf/gradstats.hpp"
#include "tapf/io_bytes.hpp"
#include "tapf/quantize.hpp"
#include "tapf/spectral.hpp"
#include "tapf/synth.hpp"
#include "tapf/tensor.hpp"

namespace tapf {

enum class QuantizerKind { rvq, fsq };
enum class Precision { f32, f64 };

inline QuantizerKind quantizer_kind_from_string(const std::string& s) {
  if (s == "rvq") return QuantizerKind::rvq;
  if (s == "fsq") return QuantizerKind::fsq;
  throw ConfigError("quantizer.kind: unknown value '" + s + "'");
}
inline std::string to_string(QuantizerKind k) {
  return k == QuantizerKind::rvq ? "rvq" : "fsq";
}

inline Precision precision_from_string(const std::string& s) {
  if (s == "f32") return Precision::f32;
  if (s == "f64") return Precision::f64;
  throw ConfigError("train.precision: unknown value '" + s + "'");
}
inline std::string to_string(Precision p) {
  return p == Precision::f32 ? "f32" : "f64";
}

struct TrainConfig {
  double lambda_recon = 500.0;
  double lambda_mel = 1.0;
  double lambda_commit = 10.0;
  double lambda_fusion = 1.0;
  double learning_rate = 1e-4;
  double beta1 = 0.9;
  double beta2 = 0.99;
  double weight_decay = 0.0;
  int batch_size = 8;
  int steps = 2000;
  std::uint64_t seed = 1;
  Precision precision = Precision::f32;
  int grad_capture_every = 50;

  void validate() const {
    if (!(lambda_recon >= 0.0) || !(lambda_mel >= 0.0) ||
        !(lambda_commit >= 0.0) || !(lambda_fusion >= 0.0))
      throw ConfigError("train: loss weights must be nonnegative");
    if (!(learning_rate > 0.0))
      throw ConfigError("train.learning_rate must be positive");
    if (!(beta1 >= 0.0 && beta1 < 1.0) || !(beta2 >= 0.0 && beta2 < 1.0))
      throw ConfigError("train: betas must lie in [0,1)");
    if (!(weight_decay >= 0.0))
      throw ConfigError("train.weight_decay must be nonnegative");
    if (batch_size < 1) throw ConfigError("train.batch_size must be >= 1");
    if (steps < 0) throw ConfigError("train.steps must be >= 0");
    if (grad_capture_every < 1)
      throw ConfigError("train.grad_capture_every must be >= 1");
  }
};

struct DataConfig {
  double rho = 1.0;
  int n_events = 2;
  std::size_t t = 2048;
  std::size_t t_v = 32;
  std::size_t d_v = 16;
  SynthConfig synth;

  void validate() const {
    if (!(rho >= 0.0 && rho <= 1.0))
      throw ConfigError("data.rho must lie in [0,1]");
    if (n_events < 1) throw ConfigError("data.n_events must be >= 1");
    if (t == 0 || t_v == 0 || d_v == 0)
      throw ConfigError("data: T, T_v and d_v must be positive");
    synth.validate();
  }
};

struct ExperimentConfig {
  TrainConfig train;
  CodecConfig codec;
  QuantizerKind quantizer = QuantizerKind::rvq;
  RvqConfig rvq;
  FsqConfig fsq;
  FusionConfig fusion;
  DataConfig data;
  SpectralConfig spectral;

  void validate() const {
    train.validate();
    codec.validate();
    rvq.validate();
    fsq.validate();
    fusion.validate();
    data.validate();
    spectral.validate();
    if (quantizer == QuantizerKind::rvq && rvq.dim != codec.latent_dim)
      throw ConfigError("quantizer.dim " + std::to_string(rvq.dim) +
                        " != codec.latent_dim " +
                        std::to_string(codec.latent_dim));
    if (quantizer == QuantizerKind::fsq &&
        fsq.levels.size() != std::size_t(codec.latent_dim))
      throw ConfigError("quantizer.fsq_levels count " +
                        std::to_string(fsq.levels.size()) +
                        " != codec.latent_dim " +
                        std::to_string(codec.latent_dim));
    if (data.t % std::size_t(codec.compression()) != 0)
      throw ConfigError("data.t " + std::to_string(data.t) +
                        " is not divisible by the codec compression factor " +
                        std::to_string(codec.compression()));
    for (std::size_t s : spectral.fft_sizes)
      if (data.t < s)
        throw ConfigError("data.t " + std::to_string(data.t) +
                          " shorter than fft size " + std::to_string(s));
  }
};

struct StepRecord {
  int step = 0;
  double l_recon = 0.0;
  double l_mel = 0.0;
  double l_commit = 0.0;
  double l_fusion = 0.0;
  double l_total = 0.0;
  double ms = 0.0;
};

// The composite objective: lambda_recon L_recon + lambda_mel L_mel +
// lambda_commit L_commit + lambda_fusion L_fusion. Each term must arrive
// finite; the error names the offender so an aborted run is diagnosable.
template <class T>
Tensor<T> total_loss(const Tensor<T>& recon, const Tensor<T>& mel,
                     const Tensor<T>& commit, const Tensor<T>& fusion,
                     const TrainConfig& cfg) {
  const Tensor<T>* terms[] = {&recon, &mel, &commit, &fusion};
  const char* names[] = {"recon", "mel", "commit", "fusion"};
  for (int i = 0; i < 4; ++i) {
    if (terms[i]->numel() != 1)
      throw ShapeError(std::string("total_loss: ") + names[i] +
                       " term is not scalar");
    if (!std::isfinite(double(terms[i]->item())))
      throw NumericError(std::string("total_loss: ") + names[i] +
                         " term is not finite");
  }
  auto out = scale(recon, T(cfg.lambda_recon));
  out = add(out, scale(mel, T(cfg.lambda_mel)));
  out = add(out, scale(commit, T(cfg.lambda_commit)));
  out = add(out, scale(fusion, T(cfg.lambda_fusion)));
  return out;
}

inline constexpr double kAdamEps = 1e-8;

struct AdamMoments {
  std::vector<std::vector<double>> m, v;
  std::int64_t t = 0;
};

namespace detail {

// Decoupled decay multiplies the parameter before the moment update; moments
// are f64 regardless of parameter precision.
template <class T>
void adamw_update_tensor(Tensor<T>& tensor, std::vector<double>& m,
                         std::vector<double>& v, double bc1, double bc2,
                         double lr, double beta1, double beta2, double wd) {
  auto& p = tensor.data();
  const auto& g = tensor.grad();
  for (std::size_t j = 0; j < p.size(); ++j) {
    double w = double(p[j]) * (1.0 - lr * wd);
    double gj = double(g[j]);
    m[j] = beta1 * m[j] + (1.0 - beta1) * gj;
    v[j] = beta2 * v[j] + (1.0 - beta2) * gj * gj;
    p[j] = T(w - lr * (m[j] / bc1) / (std::sqrt(v[j] / bc2) + kAdamEps));
  }
}

}  // namespace detail

// AdamW with decoupled weight decay and bias-corrected moments. Tensors
// without gradients (EMA codebooks) are skipped.
template <class T>
void adamw_step(ParamRegistry<T>& reg, AdamMoments& mom, const TrainConfig& cfg) {
  auto& items = reg.items();
  if (mom.m.empty() && mom.v.empty()) {
    for (const auto& e : items) {
      std::size_t n = e.tensor.requires_grad() ? e.tensor.numel() : 0;
      mom.m.emplace_back(n, 0.0);
      mom.v.emplace_back(n, 0.0);
    }
  }
  if (mom.m.size() != items.size() || mom.v.size() != items.size())
    throw ShapeError("adamw_step: optimizer tracks " +
                     std::to_string(mom.m.size()) + " tensors, registry has " +
                     std::to_string(items.size()));
  mom.t += 1;
  double bc1 = 1.0 - std::pow(cfg.beta1, double(mom.t));
  double bc2 = 1.0 - std::pow(cfg.beta2, double(mom.t));
  for (std::size_t i = 0; i < items.size(); ++i) {
    auto& tensor = items[i].tensor;
    if (!tensor.requires_grad()) continue;
    if (mom.m[i].size() != tensor.numel())
      throw ShapeError("adamw_step: tensor '" + items[i].name +
                       "' changed size under the optimizer");
    detail::adamw_update_tensor(tensor, mom.m[i], mom.v[i], bc1, bc2,
                                cfg.learning_rate, cfg.beta1, cfg.beta2,
                                cfg.weight_decay);
  }
}

// Same update over a plain tensor list (every entry must carry a gradient).
template <class T>
void adamw_step_tensors(std::vector<Tensor<T>>& params, AdamMoments& mom,
                        double lr, double beta1, double beta2,
                        double weight_decay) {
  if (mom.m.empty() && mom.v.empty()) {
    for (const auto& p : params) {
      mom.m.emplace_back(p.numel(), 0.0);
      mom.v.emplace_back(p.numel(), 0.0);
    }
  }
  if (mom.m.size() != params.size())
    throw ShapeError("adamw_step: optimizer tracks " +
                     std::to_string(mom.m.size()) + " tensors, got " +
                     std::to_string(params.size()));
  mom.t += 1;
  double bc1 = 1.0 - std::pow(beta1, double(mom.t));
  double bc2 = 1.0 - std::pow(beta2, double(mom.t));
  for (std::size_t i = 0; i < params.size(); ++i) {
    if (mom.m[i].size() != params[i].numel())
      throw ShapeError("adamw_step: tensor " + std::to_string(i) +
                       " changed size under the optimizer");
    detail::adamw_update_tensor(params[i], mom.m[i], mom.v[i], bc1, bc2, lr,
                                beta1, beta2, weight_decay);
  }
}

// Owns the tape, parameters and optimizer state for one training run.
// Not movable: parameters hold a pointer to the member tape.
template <class T>
class Trainer {
 public:
  explicit Trainer(const ExperimentConfig& cfg) : cfg_(cfg), root_(cfg.train.seed) {
    cfg.validate();
    codec_ = CodecModel<T>::init(cfg.codec, tape_, reg_, root_);
    if (cfg.quantizer == QuantizerKind::rvq) {
      rvq_ = RvqState<T>::init(cfg.rvq, root_);
      for (int q = 0; q < cfg.rvq.n_q; ++q)
        reg_.add("quantizer.book" + std::to_string(q), "quantizer",
                 rvq_.codebooks[std::size_t(q)]);
    }
    heads_ = ProjectionHeads<T>::init(cfg.codec.latent_dim, int(cfg.data.d_v),
                                      cfg.fusion.proj_dim, tape_, reg_, root_);
  }

  Trainer(const Trainer&) = delete;
  Trainer& operator=(const Trainer&) = delete;

  const ExperimentConfig& config() const { return cfg_; }
  ParamRegistry<T>& registry() { return reg_; }
  const ParamRegistry<T>& registry() const { return reg_; }
  Tape<T>& tape() { return tape_; }
  CodecModel<T>& codec() { return codec_; }
  RvqState<T>& rvq_state() { return rvq_; }
  ProjectionHeads<T>& heads() { return heads_; }
  int step_index() const { return step_index_; }

  // Resume point for checkpoint replay: the data stream is keyed by step.
  void set_step_index(int step) {
    if (step < 0) throw ContractError("set_step_index: negative step");
    step_index_ = step;
  }

  // One optimizer step over a freshly generated batch. If trace is given and
  // the step hits the capture cadence, per-component gradient norms are
  // appended after backward and before the parameter update.
  StepRecord step(GradTrace* trace = nullptr) {
    auto t0 = std::chrono::steady_clock::now();
    tape_.clear();
    reg_.zero_grads();

    auto recon_sum = Tensor<T>::scalar(T(0));
    auto mel_sum = Tensor<T>::scalar(T(0));
    auto commit_sum = Tensor<T>::scalar(T(0));
    std::vector<FusionBatchItem<T>> batch;
    RvqBatchStats<T> stats(cfg_.rvq);
    for (int b = 0; b < cfg_.train.batch_size; ++b) {
      AVPair pair = next_pair(step_index_, b);
      auto x = Tensor<T>::constant({pair.audio.size()},
                                   cast_values(pair.audio));
      auto z_e = codec_.encode(x);
      Tensor<T> z_q, feats;
      if (cfg_.quantizer == QuantizerKind::rvq) {
        QuantizeResult<T> qr = rvq_quantize(z_e, rvq_);
        stats.accumulate(qr, rvq_);
        commit_sum = add(commit_sum, commit_loss(z_e, qr.z_hat));
        z_q = qr.z_hat;
        feats = fusion_features(cfg_.fusion.location, z_e, qr);
      } else {
        FsqResult<T> fr = fsq_quantize(z_e, cfg_.fsq);
        z_q = fr.z_hat;
        feats = cfg_.fusion.location == FusionLocation::pre_quantization
                    ? z_e
                    : fr.z_hat;
      }
      auto x_hat = codec_.decode(z_q);
      recon_sum = add(recon_sum, scale(l1(sub(x, x_hat)),
                                       T(1.0 / double(pair.audio.size()))));
      mel_sum = add(mel_sum, multiscale_spectral_loss(x, x_hat, cfg_.spectral));
      batch.push_back({feats, Tensor<T>::constant({pair.t_v, pair.d_v},
                                                  cast_values(pair.video))});
    }
    T inv_b = T(1.0 / double(cfg_.train.batch_size));
    auto l_recon = scale(recon_sum, inv_b);
    auto l_mel = scale(mel_sum, inv_b);
    auto l_commit = scale(commit_sum, inv_b);
    auto l_fusion = fusion_objective(cfg_.fusion, heads_, batch);
    auto total = total_loss(l_recon, l_mel, l_commit, l_fusion, cfg_.train);
    tape_.backward(total);

    if (trace && step_index_ % cfg_.train.grad_capture_every == 0)
      trace->captures.push_back({step_index_, capture(reg_, tape_)});

    adamw_step(reg_, moments_, cfg_.train);
    if (cfg_.quantizer == QuantizerKind::rvq)
      ema_update(rvq_, stats, cfg_.rvq.ema_decay);

    StepRecord rec;
    rec.step = step_index_;
    rec.l_recon = double(l_recon.item());
    rec.l_mel = double(l_mel.item());
    rec.l_commit = double(l_commit.item());
    rec.l_fusion = double(l_fusion.item());
    rec.l_total = double(total.item());
    rec.ms = std::chrono::duration<double, std::milli>(
                 std::chrono::steady_clock::now() - t0)
                 .count();
    step_index_ += 1;
    return rec;
  }

  // Codes from the current parameters: n_q x T' for rvq, d x T' per-dimension
  // levels for fsq. Leaves no graph behind.
  std::vector<std::vector<int>> tokenize(const std::vector<double>& audio) {
    auto x = Tensor<T>::constant({audio.size()}, cast_values(audio));
    auto z_e = codec_.encode(x);
    std::vector<std::vector<int>> codes;
    if (cfg_.quantizer == QuantizerKind::rvq) {
      codes = rvq_quantize(z_e, rvq_).codes;
    } else {
      codes = fsq_quantize(z_e, cfg_.fsq).codes;
    }
    tape_.clear();
    return codes;
  }

  // Round trip through encode, quantize, decode with the current parameters.
  std::vector<double> reconstruct(const std::vector<double>& audio) {
    auto x = Tensor<T>::constant({audio.size()}, cast_values(audio));
    auto z_e = codec_.encode(x);
    Tensor<T> z_q = cfg_.quantizer == QuantizerKind::rvq
                        ? rvq_quantize(z_e, rvq_).z_hat
                        : fsq_quantize(z_e, cfg_.fsq).z_hat;
    auto x_hat = codec_.decode(z_q);
    std::vector<double> out(x_hat.data().begin(), x_hat.data().end());
    tape_.clear();
    return out;
  }

  AVPair next_pair(int step, int item) const {
    std::uint64_t pair_seed =
        root_.split("data", std::uint64_t(step))
            .split("item", std::uint64_t(item))
            .next_u64();
    return generate_pair(pair_seed, cfg_.data.rho, cfg_.data.n_events,
                         cfg_.data.t, cfg_.data.t_v, cfg_.data.d_v,
                         cfg_.data.synth);
  }

 private:
  static std::vector<T> cast_values(const std::vector<double>& v) {
    return std::vector<T>(v.begin(), v.end());
  }

  ExperimentConfig cfg_;
  Rng root_;
  Tape<T> tape_;
  ParamRegistry<T> reg_;
  CodecModel<T> codec_;
  RvqState<T> rvq_;
  ProjectionHeads<T> heads_;
  AdamMoments moments_;
  int step_index_ = 0;
};

inline nlohmann::json step_record_json(const StepRecord& r) {
  return nlohmann::json{{"step", r.step},     {"l_recon", r.l_recon},
                        {"l_mel", r.l_mel},   {"l_commit", r.l_commit},
                        {"l_fusion", r.l_fusion}, {"l_total", r.l_total},
                        {"ms", r.ms}};
}

inline std::string step_log_jsonl(const std::vector<StepRecord>& records) {
  std::string out;
  for (const auto& r : records) out += step_record_json(r).dump() + "\n";
  return out;
}

inline std::vector<StepRecord> parse_step_log_jsonl(const std::string& text) {
  std::vector<StepRecord> records;
  std::size_t pos = 0;
  while (pos < text.size()) {
    std::size_t end = text.find('\n', pos);
    if (end == std::string::npos) end = text.size();
    std::string line = text.substr(pos, end - pos);
    pos = end + 1;
    if (line.empty()) continue;
    nlohmann::json j;
    try {
      j = nlohmann::json::parse(line);
    } catch (const nlohmann::json::exception& e) {
      throw FormatError(std::string("step log: invalid JSON line: ") + e.what(),
                        pos);
    }
    StepRecord r;
    r.step = j.at("step").get<int>();
    r.l_recon = j.at("l_recon").get<double>();
    r.l_mel = j.at("l_mel").get<double>();
    r.l_commit = j.at("l_commit").get<double>();
    r.l_fusion = j.at("l_fusion").get<double>();
    r.l_total = j.at("l_total").get<double>();
    r.ms = j.at("ms").get<double>();
    records.push_back(r);
  }
  return records;
}

struct TrainResult {
  std::vector<StepRecord> records;
  std::string checkpoint_path;
  std::string step_log_path;
  std::string grad_trace_path;
  std::string grad_summary_path;
};

namespace detail {

template <class T>
TrainResult train_run_impl(const ExperimentConfig& cfg,
                           const std::string& out_dir) {
  std::filesystem::create_directories(out_dir);
  TrainResult res;
  res.checkpoint_path = (std::filesystem::path(out_dir) / "checkpoint.tapf").string();
  res.step_log_path = (std::filesystem::path(out_dir) / "steps.jsonl").string();
  res.grad_trace_path = (std::filesystem::path(out_dir) / "grad_trace.csv").string();
  res.grad_summary_path =
      (std::filesystem::path(out_dir) / "grad_summary.csv").string();

  Trainer<T> trainer(cfg);
  GradTrace trace;
  // Snapshot after every completed step; a NaN abort ships the last good one.
  std::string last_good = serialize_checkpoint(trainer.registry());
  auto flush = [&]() {
    write_file_bytes(res.checkpoint_path, last_good);
    write_file_bytes(res.step_log_path, step_log_jsonl(res.records));
    write_grad_trace_csv(res.grad_trace_path, trace);
    write_variance_summary_csv(res.grad_summary_path, trace);
  };
  for (int s = 0; s < cfg.train.steps; ++s) {
    try {
      res.records.push_back(trainer.step(&trace));
    } catch (const NumericError&) {
      flush();
      throw;
    }
    last_good = serialize_checkpoint(trainer.registry());
  }
  flush();
  return res;
}

}  // namespace detail

inline TrainResult train_run(const ExperimentConfig& cfg,
                             const std::string& out_dir) {
  cfg.validate();
  return cfg.train.precision == Precision::f64
             ? detail::train_run_impl<double>(cfg, out_dir)
             : detail::train_run_impl<float>(cfg, out_dir);
}

}  // namespace tapf
