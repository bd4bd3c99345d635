#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "json.hpp"
#include "tapf/ops.hpp"
#include "tapf/train.hpp"

namespace tapf {

struct ProbeConfig {
  int e_dim = 32;
  int hidden = 64;
  double learning_rate = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.99;
  int steps = 500;
  int batch_size = 8;
  int n_pairs = 96;
  double train_fraction = 0.75;
  std::uint64_t seed = 1;        // probe init and minibatch stream
  std::uint64_t data_seed = 1000;  // dataset pair stream

  void validate() const {
    if (e_dim < 1 || hidden < 1) throw ConfigError("probe: dims must be positive");
    if (!(learning_rate > 0.0))
      throw ConfigError("probe.learning_rate must be positive");
    if (!(beta1 >= 0.0 && beta1 < 1.0) || !(beta2 >= 0.0 && beta2 < 1.0))
      throw ConfigError("probe: betas must lie in [0,1)");
    if (steps < 1) throw ConfigError("probe.steps must be >= 1");
    if (batch_size < 1) throw ConfigError("probe.batch_size must be >= 1");
    if (n_pairs < 2) throw ConfigError("probe.n_pairs must be >= 2");
    if (!(train_fraction > 0.0 && train_fraction < 1.0))
      throw ConfigError("probe.train_fraction must lie in (0,1)");
  }
};

// Tokenized single-event clips: item -> level -> per-frame code.
struct ProbeDataset {
  std::vector<std::vector<std::vector<int>>> codes;
  std::vector<int> labels;
  std::vector<int> level_sizes;
  int n_classes = 0;
};

// Per-level lookup concatenated along features: T' x (n_levels * e_dim).
// Codes are validated against each level's table before the lookup so the
// error can name the level and the offending value.
template <class T>
Tensor<T> embed_codes(const std::vector<Tensor<T>>& tables,
                      const std::vector<std::vector<int>>& codes) {
  if (tables.empty() || codes.size() != tables.size())
    throw ShapeError("embed_codes: " + std::to_string(codes.size()) +
                     " code rows vs " + std::to_string(tables.size()) +
                     " tables");
  std::size_t frames = codes[0].size();
  if (frames == 0) throw ContractError("embed_codes: empty code sequence");
  std::vector<Tensor<T>> parts;
  for (std::size_t level = 0; level < tables.size(); ++level) {
    if (codes[level].size() != frames)
      throw ShapeError("embed_codes: level " + std::to_string(level) +
                       " holds " + std::to_string(codes[level].size()) +
                       " codes, level 0 holds " + std::to_string(frames));
    std::size_t k = tables[level].dim(0);
    for (int c : codes[level])
      if (c < 0 || std::size_t(c) >= k)
        throw IndexError("embed_codes: level " + std::to_string(level) +
                         " code " + std::to_string(c) + " outside [0," +
                         std::to_string(k) + ")");
    parts.push_back(gather(tables[level], codes[level]));
  }
  return parts.size() == 1 ? parts[0] : concat_cols(parts);
}

// Embedding tables, two dense mapping layers, and a linear classifier. The
// tokenizer underneath stays frozen; these are the only trainable tensors.
template <class T>
struct ProbeState {
  std::vector<Tensor<T>> tables;  // per level: K_i x e_dim
  Tensor<T> w1, b1, w2, b2, w3, b3;

  static ProbeState init(const std::vector<int>& level_sizes, int e_dim,
                         int hidden, int n_classes, Tape<T>& tape,
                         const Rng& seed_rng) {
    if (level_sizes.empty()) throw ConfigError("probe: no quantizer levels");
    for (int k : level_sizes)
      if (k < 1) throw ConfigError("probe: level size must be positive");
    if (n_classes < 2) throw ConfigError("probe: need at least 2 classes");
    ProbeState st;
    Rng rng = seed_rng.split("probe");
    auto dense = [&](std::size_t rows, std::size_t cols) {
      std::vector<T> v(rows * cols);
      double s = 1.0 / std::sqrt(double(rows));
      for (auto& x : v) x = T(s * rng.normal());
      return Tensor<T>::param(tape, {rows, cols}, std::move(v));
    };
    for (std::size_t i = 0; i < level_sizes.size(); ++i) {
      std::size_t k = std::size_t(level_sizes[i]);
      std::vector<T> v(k * std::size_t(e_dim));
      for (auto& x : v) x = T(0.1 * rng.normal());
      st.tables.push_back(
          Tensor<T>::param(tape, {k, std::size_t(e_dim)}, std::move(v)));
    }
    std::size_t in = level_sizes.size() * std::size_t(e_dim);
    st.w1 = dense(in, std::size_t(hidden));
    st.b1 = Tensor<T>::param(tape, {std::size_t(hidden)},
                             std::vector<T>(std::size_t(hidden), T(0)));
    st.w2 = dense(std::size_t(hidden), std::size_t(e_dim));
    st.b2 = Tensor<T>::param(tape, {std::size_t(e_dim)},
                             std::vector<T>(std::size_t(e_dim), T(0)));
    st.w3 = dense(std::size_t(e_dim), std::size_t(n_classes));
    st.b3 = Tensor<T>::param(tape, {std::size_t(n_classes)},
                             std::vector<T>(std::size_t(n_classes), T(0)));
    return st;
  }

  std::vector<Tensor<T>> all_params() const {
    std::vector<Tensor<T>> out = tables;
    out.insert(out.end(), {w1, b1, w2, b2, w3, b3});
    return out;
  }

  // Mean-pooled class logits for one clip's codes: {n_classes}.
  Tensor<T> logits(const std::vector<std::vector<int>>& codes) const {
    auto emb = embed_codes(tables, codes);
    auto h = tanh(add_rowvec(matmul(emb, w1), b1));
    auto mapped = add_rowvec(matmul(h, w2), b2);
    auto pooled = mean_axis(mapped, 0);
    auto row = reshape(pooled, {std::size_t(1), pooled.numel()});
    return reshape(add_rowvec(matmul(row, w3), b3), {w3.dim(1)});
  }
};

// Tokenizes n_pairs freshly generated single-event clips with the frozen
// tokenizer. Clips always carry exactly one event so the class label is
// unambiguous; rho and the remaining data knobs follow the tokenizer config.
template <class T>
ProbeDataset build_probe_dataset(Trainer<T>& tokenizer, int n_pairs,
                                 std::uint64_t data_seed) {
  if (n_pairs < 1) throw ConfigError("probe: n_pairs must be >= 1");
  const ExperimentConfig& cfg = tokenizer.config();
  ProbeDataset ds;
  ds.n_classes = cfg.data.synth.n_classes;
  if (cfg.quantizer == QuantizerKind::rvq)
    ds.level_sizes.assign(std::size_t(cfg.rvq.n_q), cfg.rvq.codebook_size);
  else
    ds.level_sizes = cfg.fsq.levels;
  Rng root(data_seed);
  for (int i = 0; i < n_pairs; ++i) {
    std::uint64_t pair_seed =
        root.split("probe/pair", std::uint64_t(i)).next_u64();
    AVPair pair = generate_pair(pair_seed, cfg.data.rho, 1, cfg.data.t,
                                cfg.data.t_v, cfg.data.d_v, cfg.data.synth);
    ds.codes.push_back(tokenizer.tokenize(pair.audio));
    ds.labels.push_back(pair.labels[0].class_id);
  }
  return ds;
}

struct ProbeResult {
  double accuracy = 0.0;
  int n_test = 0;
};

// Trains the probe on the head of the dataset and reports accuracy on the
// tail. The probe always runs in f64: it is an evaluation instrument, and
// determinism of the reported accuracy matters more than speed here.
inline ProbeResult probe_train_eval_on(const ProbeDataset& ds,
                                       const ProbeConfig& cfg) {
  cfg.validate();
  if (ds.codes.size() != ds.labels.size() || ds.codes.empty())
    throw ContractError("probe: dataset is empty or misaligned");
  std::size_t n = ds.codes.size();
  std::size_t n_train = std::size_t(double(n) * cfg.train_fraction);
  if (n_train == 0 || n_train == n)
    throw ContractError("probe: split leaves an empty train or test set");

  std::vector<bool> seen(std::size_t(ds.n_classes), false);
  for (std::size_t i = 0; i < n_train; ++i) {
    int label = ds.labels[i];
    if (label < 0 || label >= ds.n_classes)
      throw ContractError("probe: label " + std::to_string(label) +
                          " outside [0," + std::to_string(ds.n_classes) + ")");
    seen[std::size_t(label)] = true;
  }
  for (int c = 0; c < ds.n_classes; ++c)
    if (!seen[std::size_t(c)])
      throw ContractError("probe: class " + std::to_string(c) +
                          " absent from the train split");

  Rng root(cfg.seed);
  Tape<double> tape;
  auto probe = ProbeState<double>::init(ds.level_sizes, cfg.e_dim, cfg.hidden,
                                        ds.n_classes, tape, root);
  auto params = probe.all_params();
  AdamMoments mom;
  std::size_t c_n = std::size_t(ds.n_classes);

  for (int step = 0; step < cfg.steps; ++step) {
    tape.clear();
    for (auto& p : params) p.zero_grad();
    Rng batch_rng = root.split("probe/batch", std::uint64_t(step));
    std::vector<Tensor<double>> rows;
    std::vector<double> mask(std::size_t(cfg.batch_size) * c_n, 0.0);
    for (int b = 0; b < cfg.batch_size; ++b) {
      std::size_t idx = std::size_t(
          batch_rng.uniform_int(0, std::int64_t(n_train) - 1));
      rows.push_back(probe.logits(ds.codes[idx]));
      mask[std::size_t(b) * c_n + std::size_t(ds.labels[idx])] = 1.0;
    }
    auto logits = stack_rows(rows);
    auto mask_t = Tensor<double>::constant({std::size_t(cfg.batch_size), c_n},
                                           std::move(mask));
    auto picked = sum_axis(mul(softmax(logits), mask_t), 1);
    auto loss = neg(mean(log(picked)));
    tape.backward(loss);
    adamw_step_tensors(params, mom, cfg.learning_rate, cfg.beta1, cfg.beta2,
                       0.0);
  }

  tape.clear();
  int correct = 0;
  for (std::size_t i = n_train; i < n; ++i) {
    auto logits = probe.logits(ds.codes[i]);
    tape.clear();
    std::size_t best = 0;
    for (std::size_t j = 1; j < logits.numel(); ++j)
      if (logits.at(j) > logits.at(best)) best = j;
    if (int(best) == ds.labels[i]) ++correct;
  }
  ProbeResult res;
  res.n_test = int(n - n_train);
  res.accuracy = double(correct) / double(res.n_test);
  return res;
}

// Frozen-backbone evaluation against a live tokenizer: builds the dataset
// with the tokenizer's own data distribution, then trains only the probe.
template <class T>
ProbeResult probe_train_eval(Trainer<T>& tokenizer, const ProbeConfig& cfg) {
  cfg.validate();
  ProbeDataset ds = build_probe_dataset(tokenizer, cfg.n_pairs, cfg.data_seed);
  return probe_train_eval_on(ds, cfg);
}

inline nlohmann::json probe_result_json(const std::string& checkpoint,
                                        std::uint64_t seed,
                                        const ProbeResult& res) {
  return nlohmann::json{{"checkpoint", checkpoint},
                        {"seed", seed},
                        {"accuracy", res.accuracy},
                        {"n_test", res.n_test}};
}

}  // namespace tapf
