#pragma once

#include <string>
#include <vector>

#include "tapf/train.hpp"

namespace tapf {

// Experiment files are plain text: one `key = value` per line, `#` starts a
// comment, blank lines are ignored. Keys are dotted (train.*, codec.*,
// quantizer.*, fusion.*, data.*, spectral.*); values are numbers, bare enum
// words, true/false, or comma-separated lists. Keys left unset keep their
// defaults, unknown or duplicate keys are rejected by name.
//
// serialize_config emits every key, and parsing that text reproduces the
// config field for field. train.lambda_fusion doubles as the fusion term
// weight, so the parser mirrors it into fusion.lambda_fusion.
ExperimentConfig parse_config_text(const std::string& text);
ExperimentConfig load_config(const std::string& path);
std::string serialize_config(const ExperimentConfig& cfg);
void save_config(const std::string& path, const ExperimentConfig& cfg);

// One key/value assignment without the final cross-field validation; the
// parser and programmatic overrides share this path so both name the
// offending key on error.
void apply_config_kv(ExperimentConfig& cfg, const std::string& key,
                     const std::string& value);

// Every recognised key, in serialization order.
std::vector<std::string> config_keys();

}  // namespace tapf
