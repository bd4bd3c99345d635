#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <cstdio>
#include <filesystem>
#include <string>
#include <vector>

#include "tapf/train.hpp"

using namespace tapf;

namespace {

// Desk-sized experiment that runs a step in milliseconds.
ExperimentConfig tiny_config() {
  ExperimentConfig cfg;
  cfg.train.batch_size = 2;
  cfg.train.steps = 3;
  cfg.train.seed = 11;
  cfg.train.precision = Precision::f64;
  cfg.train.grad_capture_every = 2;
  cfg.codec.strides = {4, 2};
  cfg.codec.channels = 8;
  cfg.codec.latent_dim = 8;
  cfg.codec.kernel_size = 5;
  cfg.rvq.n_q = 2;
  cfg.rvq.codebook_size = 16;
  cfg.rvq.dim = 8;
  cfg.fusion.method = FusionMethod::distillation;
  cfg.fusion.proj_dim = 6;
  cfg.data.t = 512;
  cfg.data.t_v = 8;
  cfg.data.d_v = 6;
  cfg.data.n_events = 1;
  cfg.spectral.fft_sizes = {64, 32};
  cfg.spectral.mel_bins = {8, 6};
  cfg.spectral.scale_weights = {1.0, 1.0};
  return cfg;
}

std::string temp_dir(const char* stem) {
  auto p = std::filesystem::temp_directory_path() / stem;
  std::filesystem::remove_all(p);
  return p.string();
}

}  // namespace

TEST_CASE("total loss composes the weighted terms") {
  Tape<double> tape;
  auto recon = Tensor<double>::param(tape, {1}, {0.1});
  auto mel = Tensor<double>::param(tape, {1}, {0.2});
  auto commit = Tensor<double>::param(tape, {1}, {0.05});
  auto fusion = Tensor<double>::param(tape, {1}, {0.3});
  TrainConfig cfg;  // lambdas (500, 1, 10, 1)
  auto total = total_loss(recon, mel, commit, fusion, cfg);
  CHECK(total.item() == doctest::Approx(51.0).epsilon(1e-12));
  tape.backward(total);
  CHECK(recon.grad()[0] == 500.0);
  CHECK(mel.grad()[0] == 1.0);
  CHECK(commit.grad()[0] == 10.0);
  CHECK(fusion.grad()[0] == 1.0);

  TrainConfig heavy = cfg;
  heavy.lambda_fusion = 120.0;
  auto t_heavy = total_loss(recon, mel, commit, fusion, heavy);
  CHECK(t_heavy.item() - total.item() ==
        doctest::Approx(119.0 * 0.3).epsilon(1e-12));

  TrainConfig off = cfg;
  off.lambda_fusion = 0.0;
  auto baseline = total_loss(recon, mel, commit,
                             Tensor<double>::scalar(0.0), cfg);
  auto reduced = total_loss(recon, mel, commit, fusion, off);
  CHECK(reduced.item() == baseline.item());
}

TEST_CASE("total loss names the offending non-finite term") {
  TrainConfig cfg;
  auto ok = Tensor<double>::scalar(0.5);
  auto bad = Tensor<double>::scalar(std::nan(""));
  try {
    total_loss(ok, ok, bad, ok, cfg);
    FAIL("expected NumericError");
  } catch (const NumericError& e) {
    CHECK(std::string(e.what()).find("commit") != std::string::npos);
  }
  auto inf = Tensor<double>::scalar(HUGE_VAL);
  try {
    total_loss(ok, inf, ok, ok, cfg);
    FAIL("expected NumericError");
  } catch (const NumericError& e) {
    CHECK(std::string(e.what()).find("mel") != std::string::npos);
  }
}

TEST_CASE("adamw bias correction makes the first step a signed learning rate") {
  Tape<double> tape;
  ParamRegistry<double> reg;
  auto p = reg.add("enc.w", "encoder_conv",
                   Tensor<double>::param(tape, {1}, {1.0}));
  auto loss = mean(p);
  tape.backward(loss);  // grad = 1
  TrainConfig cfg;
  cfg.learning_rate = 0.1;
  cfg.beta1 = 0.9;
  cfg.beta2 = 0.99;
  cfg.weight_decay = 0.0;
  AdamMoments mom;
  adamw_step(reg, mom, cfg);
  CHECK(mom.t == 1);
  CHECK(p.data()[0] == doctest::Approx(0.9).epsilon(1e-7));
}

TEST_CASE("adamw leaves parameters alone without gradient or decay") {
  Tape<double> tape;
  ParamRegistry<double> reg;
  auto p = reg.add("dec.w", "decoder_conv",
                   Tensor<double>::param(tape, {3}, {1.5, -2.0, 0.25}));
  TrainConfig cfg;
  cfg.weight_decay = 0.0;
  AdamMoments mom;
  adamw_step(reg, mom, cfg);  // grads all zero
  CHECK(p.data() == std::vector<double>{1.5, -2.0, 0.25});
}

TEST_CASE("adamw weight decay is decoupled and multiplicative") {
  Tape<double> tape;
  ParamRegistry<double> reg;
  auto p = reg.add("enc.w", "encoder_conv",
                   Tensor<double>::param(tape, {1}, {1.0}));
  TrainConfig cfg;
  cfg.learning_rate = 0.1;
  cfg.weight_decay = 0.1;
  AdamMoments mom;
  adamw_step(reg, mom, cfg);
  CHECK(p.data()[0] == doctest::Approx(0.99).epsilon(1e-12));

  // Power-of-two rates make the decay factor exact.
  auto q = reg.add("enc.w2", "encoder_conv",
                   Tensor<double>::param(tape, {1}, {1.0}));
  TrainConfig cfg2;
  cfg2.learning_rate = 0.125;
  cfg2.weight_decay = 0.25;
  AdamMoments mom2;
  adamw_step(reg, mom2, cfg2);
  CHECK(q.data()[0] == 1.0 - 0.03125);
}

TEST_CASE("experiment config cross-checks quantizer and data dimensions") {
  ExperimentConfig cfg = tiny_config();
  CHECK_NOTHROW(cfg.validate());
  ExperimentConfig bad_dim = cfg;
  bad_dim.rvq.dim = 5;
  CHECK_THROWS_AS(bad_dim.validate(), ConfigError);
  ExperimentConfig bad_fsq = cfg;
  bad_fsq.quantizer = QuantizerKind::fsq;  // 4 default levels vs latent 8
  CHECK_THROWS_AS(bad_fsq.validate(), ConfigError);
  ExperimentConfig bad_t = cfg;
  bad_t.data.t = 513;
  CHECK_THROWS_AS(bad_t.validate(), ConfigError);
  ExperimentConfig short_t = cfg;
  short_t.data.t = 32;
  CHECK_THROWS_AS(short_t.validate(), ConfigError);
  CHECK(quantizer_kind_from_string("rvq") == QuantizerKind::rvq);
  CHECK(precision_from_string("f64") == Precision::f64);
  CHECK_THROWS_AS(quantizer_kind_from_string("vq"), ConfigError);
  CHECK_THROWS_AS(precision_from_string("f16"), ConfigError);
}

TEST_CASE("training steps are deterministic given the seed") {
  ExperimentConfig cfg = tiny_config();
  Trainer<double> a(cfg), b(cfg);
  for (int s = 0; s < 3; ++s) {
    StepRecord ra = a.step();
    StepRecord rb = b.step();
    CHECK(ra.step == rb.step);
    CHECK(ra.l_recon == rb.l_recon);
    CHECK(ra.l_mel == rb.l_mel);
    CHECK(ra.l_commit == rb.l_commit);
    CHECK(ra.l_fusion == rb.l_fusion);
    CHECK(ra.l_total == rb.l_total);
  }
  CHECK(serialize_checkpoint(a.registry()) == serialize_checkpoint(b.registry()));
}

TEST_CASE("step records satisfy the weighted-sum identity") {
  ExperimentConfig cfg = tiny_config();
  Trainer<double> tr(cfg);
  for (int s = 0; s < 3; ++s) {
    StepRecord r = tr.step();
    double recomposed = cfg.train.lambda_recon * r.l_recon +
                        cfg.train.lambda_mel * r.l_mel +
                        cfg.train.lambda_commit * r.l_commit +
                        cfg.train.lambda_fusion * r.l_fusion;
    CHECK(std::abs(r.l_total - recomposed) <= 1e-9);
    CHECK(r.ms >= 0.0);
  }
}

TEST_CASE("a checkpoint replays the next step's losses bit-exactly") {
  ExperimentConfig cfg = tiny_config();
  Trainer<double> a(cfg);
  for (int s = 0; s < 3; ++s) a.step();
  std::string path = (std::filesystem::temp_directory_path() /
                      "tapf_replay_ckpt.tapf").string();
  save_checkpoint(path, a.registry());
  StepRecord expected = a.step();

  Trainer<double> b(cfg);
  load_checkpoint(path, b.registry());
  b.set_step_index(3);
  StepRecord got = b.step();
  CHECK(got.step == expected.step);
  CHECK(got.l_recon == expected.l_recon);
  CHECK(got.l_mel == expected.l_mel);
  CHECK(got.l_commit == expected.l_commit);
  CHECK(got.l_fusion == expected.l_fusion);
  CHECK(got.l_total == expected.l_total);
  std::remove(path.c_str());
}

TEST_CASE("reconstruction improves over a short pinned run") {
  ExperimentConfig cfg = tiny_config();
  cfg.train.learning_rate = 1e-3;
  cfg.train.steps = 200;
  cfg.train.seed = 3;
  Trainer<double> tr(cfg);
  StepRecord first = tr.step();
  StepRecord last;
  for (int s = 1; s < 200; ++s) last = tr.step();
  CHECK(last.l_recon < first.l_recon);
}

TEST_CASE("the fusion head receives zero gradient when fusion is off") {
  ExperimentConfig cfg = tiny_config();
  cfg.fusion.method = FusionMethod::none;
  Trainer<double> tr(cfg);
  std::vector<std::vector<double>> before;
  for (const auto& e : tr.registry().items())
    if (e.component == "fusion_head") before.push_back(e.tensor.data());
  REQUIRE(before.size() == 4);
  tr.step();
  std::size_t i = 0;
  for (const auto& e : tr.registry().items()) {
    if (e.component != "fusion_head") continue;
    for (double g : e.tensor.grad()) CHECK(g == 0.0);
    CHECK(e.tensor.data() == before[i]);  // zero grad, zero decay: frozen
    ++i;
  }
}

TEST_CASE("ema keeps the quantizer books moving inside the registry") {
  ExperimentConfig cfg = tiny_config();
  Trainer<double> tr(cfg);
  auto book0 = tr.registry().find("quantizer.book0");
  std::vector<double> init = book0.data();
  for (int s = 0; s < 3; ++s) tr.step();
  CHECK(tr.registry().find("quantizer.book0").data() != init);
  // The registry handle and the quantizer state alias the same storage.
  CHECK(tr.registry().find("quantizer.book0").impl() ==
        tr.rvq_state().codebooks[0].impl());
}

TEST_CASE("train_run writes the full artifact set") {
  ExperimentConfig cfg = tiny_config();
  cfg.train.steps = 4;
  std::string dir = temp_dir("tapf_run_artifacts");
  TrainResult res = train_run(cfg, dir);
  REQUIRE(res.records.size() == 4);

  auto logged = parse_step_log_jsonl(detail::read_file_bytes(res.step_log_path));
  REQUIRE(logged.size() == 4);
  for (std::size_t i = 0; i < 4; ++i) {
    CHECK(logged[i].step == int(i));
    CHECK(logged[i].l_total == res.records[i].l_total);
  }

  GradTrace trace = read_grad_trace_csv(res.grad_trace_path);
  REQUIRE(trace.captures.size() == 2);  // cadence 2 over steps 0..3
  CHECK(trace.captures[0].step == 0);
  CHECK(trace.captures[1].step == 2);
  // one norm per registry tensor at every capture
  for (const auto& cap : trace.captures)
    CHECK(cap.rows.size() == Trainer<double>(cfg).registry().items().size());
  CHECK(std::filesystem::exists(res.grad_summary_path));

  Trainer<double> fresh(cfg);
  CHECK_NOTHROW(load_checkpoint(res.checkpoint_path, fresh.registry()));
  std::filesystem::remove_all(dir);
}

TEST_CASE("steps zero leaves the checkpoint at initialization") {
  ExperimentConfig cfg = tiny_config();
  cfg.train.steps = 0;
  std::string dir = temp_dir("tapf_run_zero");
  TrainResult res = train_run(cfg, dir);
  CHECK(res.records.empty());
  Trainer<double> fresh(cfg);
  CHECK(detail::read_file_bytes(res.checkpoint_path) ==
        serialize_checkpoint(fresh.registry()));
  CHECK(parse_step_log_jsonl(detail::read_file_bytes(res.step_log_path)).empty());
  std::filesystem::remove_all(dir);
}

TEST_CASE("a diverging run aborts with the last good checkpoint on disk") {
  ExperimentConfig cfg = tiny_config();
  cfg.train.precision = Precision::f32;
  cfg.train.learning_rate = 1e30;  // one update overflows the f32 range
  cfg.train.steps = 10;
  std::string dir = temp_dir("tapf_run_abort");
  CHECK_THROWS_AS(train_run(cfg, dir), NumericError);
  auto tensors = read_checkpoint(dir + "/checkpoint.tapf");
  CHECK(!tensors.empty());
  for (const auto& t : tensors)
    for (double v : t.values) CHECK(std::isfinite(v));
  auto logged = parse_step_log_jsonl(detail::read_file_bytes(dir + "/steps.jsonl"));
  CHECK(logged.size() >= 1);
  CHECK(logged.size() < 10);
  std::filesystem::remove_all(dir);
}

TEST_CASE("fsq training runs end-to-end") {
  ExperimentConfig cfg = tiny_config();
  cfg.quantizer = QuantizerKind::fsq;
  cfg.codec.latent_dim = 3;
  cfg.fsq.levels = {5, 4, 3};
  Trainer<double> tr(cfg);
  StepRecord r = tr.step();
  CHECK(std::isfinite(r.l_total));
  CHECK(r.l_commit == 0.0);  // no codebook, no commitment term
  AVPair pair = tr.next_pair(100, 0);
  auto codes = tr.tokenize(pair.audio);
  REQUIRE(codes.size() == 3);
  for (std::size_t d = 0; d < 3; ++d) {
    CHECK(codes[d].size() == pair.audio.size() / 8);
    for (int c : codes[d]) {
      CHECK(c >= 0);
      CHECK(c < cfg.fsq.levels[d]);
    }
  }
}

TEST_CASE("tokenize emits per-level codes in range") {
  ExperimentConfig cfg = tiny_config();
  Trainer<double> tr(cfg);
  AVPair pair = tr.next_pair(0, 0);
  auto codes = tr.tokenize(pair.audio);
  REQUIRE(codes.size() == 2);
  for (const auto& level : codes) {
    CHECK(level.size() == cfg.data.t / 8);
    for (int c : level) {
      CHECK(c >= 0);
      CHECK(c < cfg.rvq.codebook_size);
    }
  }
  CHECK(tr.tape().node_count() == 0);  // tokenize leaves no graph behind
}
