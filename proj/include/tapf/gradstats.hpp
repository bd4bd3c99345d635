#pragma once

#include <cmath>
#include <string>
#include <utility>
#include <vector>

#include "tapf/codec.hpp"
#include "tapf/errors.hpp"
#include "tapf/tensor.hpp"

namespace tapf {

struct GradNormRow {
  std::string component;
  std::string tensor_name;
  double grad_norm = 0.0;
  bool had_grad = true;  // false for registry tensors outside the autodiff graph
};

struct GradCapture {
  int step = 0;
  std::vector<GradNormRow> rows;
};

struct GradTrace {
  std::vector<GradCapture> captures;
};

struct VarianceRow {
  int step = 0;
  std::string component;
  double variance = 0.0;
};

// One L2 norm per registry tensor, in registration order. Tensors that take
// no gradient (EMA codebooks) are recorded as 0 with had_grad = false so
// every capture covers the full parameter population.
template <class T>
std::vector<GradNormRow> capture(const ParamRegistry<T>& reg, const Tape<T>& tape) {
  if (!tape.backward_done())
    throw ContractError("grad capture: backward has not run on this tape");
  std::vector<GradNormRow> rows;
  rows.reserve(reg.items().size());
  for (const auto& e : reg.items()) {
    GradNormRow r;
    r.component = e.component;
    r.tensor_name = e.name;
    if (e.tensor.requires_grad()) {
      double acc = 0.0;
      for (T g : e.tensor.grad()) acc += double(g) * double(g);
      r.grad_norm = std::sqrt(acc);
      r.had_grad = true;
    } else {
      r.grad_norm = 0.0;
      r.had_grad = false;
    }
    rows.push_back(std::move(r));
  }
  return rows;
}

// Population variance. Norms are accumulated in sorted order, so the value
// is independent of parameter enumeration order; the all-equal case returns
// exactly zero.
double gradient_variance(const std::vector<double>& norms);

// OLS slope over the last tail_fraction of the series.
double trend_slope(const std::vector<std::pair<double, double>>& series,
                   double tail_fraction);

// Per capture step: one row per component present, plus an "all" row across
// every tensor.
std::vector<VarianceRow> variance_summary(const GradTrace& trace);

std::string grad_trace_csv(const GradTrace& trace);
GradTrace parse_grad_trace_csv(const std::string& text);
void write_grad_trace_csv(const std::string& path, const GradTrace& trace);
GradTrace read_grad_trace_csv(const std::string& path);
std::string variance_summary_csv(const GradTrace& trace);
void write_variance_summary_csv(const std::string& path, const GradTrace& trace);

}  // namespace tapf
