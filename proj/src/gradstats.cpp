#include "tapf/gradstats.hpp"

#include <algorithm>
#include <cstdio>
#include <map>
#include <sstream>

#include "tapf/io_bytes.hpp"

namespace tapf {

namespace {

std::string fmt_double(double v) {
  char buf[32];
  std::snprintf(buf, sizeof(buf), "%.17g", v);
  return buf;
}

std::vector<std::string> split_csv_line(const std::string& line) {
  std::vector<std::string> fields;
  std::string cur;
  for (char c : line) {
    if (c == ',') {
      fields.push_back(cur);
      cur.clear();
    } else {
      cur.push_back(c);
    }
  }
  fields.push_back(cur);
  return fields;
}

}  // namespace

double gradient_variance(const std::vector<double>& norms) {
  if (norms.empty())
    throw ContractError("gradient_variance: empty norm list");
  std::vector<double> sorted = norms;
  std::sort(sorted.begin(), sorted.end());
  if (sorted.front() == sorted.back()) return 0.0;
  double mean = 0.0;
  for (double x : sorted) mean += x;
  mean /= double(sorted.size());
  double acc = 0.0;
  for (double x : sorted) acc += (x - mean) * (x - mean);
  return acc / double(sorted.size());
}

double trend_slope(const std::vector<std::pair<double, double>>& series,
                   double tail_fraction) {
  if (!(tail_fraction > 0.0 && tail_fraction <= 1.0))
    throw ConfigError("trend_slope: tail_fraction must lie in (0,1], got " +
                      std::to_string(tail_fraction));
  std::size_t n = series.size();
  std::size_t take = std::size_t(std::ceil(tail_fraction * double(n)));
  if (take < 2)
    throw ContractError("trend_slope: tail window holds " +
                        std::to_string(take) + " point(s); need at least 2");
  std::size_t lo = n - take;
  double mx = 0.0, my = 0.0;
  for (std::size_t i = lo; i < n; ++i) {
    mx += series[i].first;
    my += series[i].second;
  }
  mx /= double(take);
  my /= double(take);
  double sxx = 0.0, sxy = 0.0;
  for (std::size_t i = lo; i < n; ++i) {
    double dx = series[i].first - mx;
    sxx += dx * dx;
    sxy += dx * (series[i].second - my);
  }
  if (sxx == 0.0)
    throw ContractError("trend_slope: degenerate tail (all steps identical)");
  return sxy / sxx;
}

std::vector<VarianceRow> variance_summary(const GradTrace& trace) {
  std::vector<VarianceRow> out;
  for (const auto& cap : trace.captures) {
    std::map<std::string, std::vector<double>> groups;
    std::vector<double> all;
    for (const auto& r : cap.rows) {
      groups[r.component].push_back(r.grad_norm);
      all.push_back(r.grad_norm);
    }
    for (const auto& [component, norms] : groups)
      out.push_back({cap.step, component, gradient_variance(norms)});
    if (!all.empty()) out.push_back({cap.step, "all", gradient_variance(all)});
  }
  return out;
}

std::string grad_trace_csv(const GradTrace& trace) {
  std::string out = "step,component,tensor_name,grad_norm\n";
  for (const auto& cap : trace.captures)
    for (const auto& r : cap.rows)
      out += std::to_string(cap.step) + "," + r.component + "," +
             r.tensor_name + "," + fmt_double(r.grad_norm) + "\n";
  return out;
}

GradTrace parse_grad_trace_csv(const std::string& text) {
  GradTrace trace;
  std::istringstream in(text);
  std::string line;
  if (!std::getline(in, line) || line != "step,component,tensor_name,grad_norm")
    throw FormatError("grad trace: missing or wrong header", 0);
  std::size_t lineno = 1;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty()) continue;
    auto fields = split_csv_line(line);
    if (fields.size() != 4)
      throw FormatError("grad trace: line " + std::to_string(lineno) +
                            " has " + std::to_string(fields.size()) +
                            " fields, want 4",
                        lineno);
    GradNormRow row;
    int step = 0;
    try {
      step = std::stoi(fields[0]);
      row.grad_norm = std::stod(fields[3]);
    } catch (const std::exception&) {
      throw FormatError("grad trace: line " + std::to_string(lineno) +
                            " has non-numeric step or norm",
                        lineno);
    }
    row.component = fields[1];
    row.tensor_name = fields[2];
    if (trace.captures.empty() || trace.captures.back().step != step)
      trace.captures.push_back({step, {}});
    trace.captures.back().rows.push_back(std::move(row));
  }
  return trace;
}

void write_grad_trace_csv(const std::string& path, const GradTrace& trace) {
  detail::write_file_bytes(path, grad_trace_csv(trace));
}

GradTrace read_grad_trace_csv(const std::string& path) {
  return parse_grad_trace_csv(detail::read_file_bytes(path));
}

std::string variance_summary_csv(const GradTrace& trace) {
  std::string out = "step,component,variance\n";
  for (const auto& row : variance_summary(trace))
    out += std::to_string(row.step) + "," + row.component + "," +
           fmt_double(row.variance) + "\n";
  return out;
}

void write_variance_summary_csv(const std::string& path, const GradTrace& trace) {
  detail::write_file_bytes(path, variance_summary_csv(trace));
}

}  // namespace tapf
