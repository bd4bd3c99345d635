// Python surface: the operations a notebook needs to drive experiments
// (synthetic pairs, config handling, training, quantization, metrics)
// without re-exporting the whole tensor machinery.

#include <pybind11/pybind11.h>
#include <pybind11/stl.h>

#include <cstdint>
#include <stdexcept>
#include <string>
#include <vector>

#include "tapf/config.hpp"
#include "tapf/errors.hpp"
#include "tapf/manifest.hpp"
#include "tapf/probe.hpp"
#include "tapf/quantize.hpp"
#include "tapf/rng.hpp"
#include "tapf/spectral.hpp"
#include "tapf/synth.hpp"
#include "tapf/train.hpp"

namespace py = pybind11;

namespace {

py::dict pair_to_dict(const tapf::AVPair& p, std::size_t t_v, std::size_t d_v) {
  py::dict out;
  out["audio"] = p.audio;
  std::vector<std::vector<double>> video(t_v, std::vector<double>(d_v));
  for (std::size_t t = 0; t < t_v; ++t)
    for (std::size_t j = 0; j < d_v; ++j) video[t][j] = p.video[t * d_v + j];
  out["video"] = video;
  py::list labels;
  for (const tapf::AVEvent& e : p.labels) {
    py::dict l;
    l["onset"] = e.onset;
    l["class_id"] = e.class_id;
    labels.append(l);
  }
  out["labels"] = labels;
  return out;
}

py::dict record_to_dict(const tapf::StepRecord& r) {
  py::dict d;
  d["step"] = r.step;
  d["l_recon"] = r.l_recon;
  d["l_mel"] = r.l_mel;
  d["l_commit"] = r.l_commit;
  d["l_fusion"] = r.l_fusion;
  d["l_total"] = r.l_total;
  d["ms"] = r.ms;
  return d;
}

}  // namespace

PYBIND11_MODULE(_core, m) {
  m.doc() = "Audio tokenizer laboratory: synthetic data, training, "
            "quantization, and evaluation primitives.";

  py::register_exception<tapf::Error>(m, "TapfError");

  m.def(
      "generate_pair",
      [](std::uint64_t seed, double rho, int n_events, std::size_t t,
         std::size_t t_v, std::size_t d_v) {
        tapf::AVPair p = tapf::generate_pair(seed, rho, n_events, t, t_v, d_v);
        return pair_to_dict(p, t_v, d_v);
      },
      py::arg("seed"), py::arg("rho"), py::arg("n_events"), py::arg("t"),
      py::arg("t_v"), py::arg("d_v"),
      "Deterministic synthetic audio-visual pair; rho controls "
      "audio-video correspondence.");

  m.def("default_config", [] { return tapf::serialize_config(tapf::ExperimentConfig{}); },
        "Canonical text form of the default experiment configuration.");

  m.def(
      "canonicalize_config",
      [](const std::string& text) {
        return tapf::serialize_config(tapf::parse_config_text(text));
      },
      py::arg("text"),
      "Parse and re-serialize a config; raises TapfError on unknown keys, "
      "bad values, or cross-field violations.");

  m.def(
      "train_run",
      [](const std::string& config_text, const std::string& out_dir) {
        tapf::ExperimentConfig cfg = tapf::parse_config_text(config_text);
        tapf::TrainResult res = tapf::train_run(cfg, out_dir);
        py::dict out;
        out["checkpoint_path"] = res.checkpoint_path;
        out["step_log_path"] = res.step_log_path;
        out["grad_trace_path"] = res.grad_trace_path;
        out["grad_summary_path"] = res.grad_summary_path;
        py::list records;
        for (const tapf::StepRecord& r : res.records) records.append(record_to_dict(r));
        out["records"] = records;
        return out;
      },
      py::arg("config_text"), py::arg("out_dir"),
      "Train per the given config text and write run artifacts to out_dir.");

  m.def(
      "probe_accuracy",
      [](const std::string& config_text, int n_pairs, int probe_steps,
         std::uint64_t seed) {
        tapf::ExperimentConfig cfg = tapf::parse_config_text(config_text);
        if (cfg.train.precision != tapf::Precision::f64)
          throw tapf::ConfigError(
              "probe_accuracy: set train.precision = f64 for the probe path");
        tapf::Trainer<double> trainer(cfg);
        for (int s = 0; s < cfg.train.steps; ++s) trainer.step();
        tapf::ProbeConfig pc;
        pc.n_pairs = n_pairs;
        pc.steps = probe_steps;
        pc.seed = seed;
        pc.data_seed = seed + 1000;
        tapf::ProbeResult pr = tapf::probe_train_eval(trainer, pc);
        py::dict out;
        out["accuracy"] = pr.accuracy;
        out["n_test"] = pr.n_test;
        return out;
      },
      py::arg("config_text"), py::arg("n_pairs") = 48,
      py::arg("probe_steps") = 200, py::arg("seed") = 1,
      "Train a tokenizer per config, then a frozen-backbone linear probe; "
      "returns held-out accuracy.");

  m.def(
      "rvq_quantize",
      [](const std::vector<std::vector<double>>& z, int n_q, int codebook_size,
         std::uint64_t seed) {
        if (z.empty() || z[0].empty())
          throw tapf::ShapeError("rvq_quantize: latents must be nonempty");
        std::size_t rows = z.size(), d = z[0].size();
        std::vector<double> flat;
        flat.reserve(rows * d);
        for (const auto& row : z) {
          if (row.size() != d)
            throw tapf::ShapeError("rvq_quantize: ragged latent rows");
          flat.insert(flat.end(), row.begin(), row.end());
        }
        tapf::RvqConfig cfg;
        cfg.n_q = n_q;
        cfg.codebook_size = codebook_size;
        cfg.dim = int(d);
        auto state = tapf::RvqState<double>::init(cfg, tapf::Rng(seed));
        auto t = tapf::Tensor<double>::constant({rows, d}, flat);
        tapf::QuantizeResult<double> res = tapf::rvq_quantize(t, state);
        py::dict out;
        out["codes"] = res.codes;
        out["z_hat"] = res.z_hat.data();
        out["residual"] = res.residual;
        return out;
      },
      py::arg("z"), py::arg("n_q"), py::arg("codebook_size"),
      py::arg("seed") = 1,
      "Residual vector quantization of row latents with seeded codebooks; "
      "z_hat and residual are flat row-major.");

  m.def(
      "si_sdr",
      [](const std::vector<double>& x, const std::vector<double>& x_hat) {
        return tapf::si_sdr(x, x_hat);
      },
      py::arg("x"), py::arg("x_hat"),
      "Scale-invariant SDR in dB of x_hat against reference x.");

  m.def(
      "git_blob_sha1",
      [](py::bytes b) { return tapf::git_blob_sha1(std::string(b)); },
      py::arg("data"), "Git-style blob hash of a byte string.");
}
