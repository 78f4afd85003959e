#pragma once

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <numeric>
#include <string>
#include <thread>
#include <vector>

#include "mosquitonet/model.hpp"
#include "mosquitonet/text.hpp"

namespace mqnet {

struct BenchReport {
  std::string name;
  Shape input_shape;  // per-call input, batch included
  std::size_t params = 0;
  std::size_t warmup = 0;
  std::size_t runs = 0;
  std::vector<double> latencies_ms;
  double mean_ms = 0.0;
  double std_ms = 0.0;  // population std over the timed runs
  double min_ms = 0.0;
  double max_ms = 0.0;
  double median_ms = 0.0;
  std::string machine;
};

/// CPU model, logical core count and compiler, for labeling reports.
inline std::string machine_descriptor() {
  std::string cpu = "unknown cpu";
  std::ifstream in("/proc/cpuinfo");
  for (std::string line; std::getline(in, line);) {
    if (line.rfind("model name", 0) == 0) {
      cpu = text::trim(line.substr(line.find(':') + 1));
      break;
    }
  }
  std::string out = cpu + "; " + std::to_string(std::thread::hardware_concurrency()) + " logical cores";
#if defined(__clang__)
  out += "; clang " __clang_version__;
#elif defined(__GNUC__)
  out += "; gcc " __VERSION__;
#endif
  return out;
}

inline void summarize_latencies(BenchReport& r) {
  const auto& v = r.latencies_ms;
  if (v.empty()) return;
  r.mean_ms = std::accumulate(v.begin(), v.end(), 0.0) / static_cast<double>(v.size());
  double sq = 0.0;
  for (double x : v) sq += (x - r.mean_ms) * (x - r.mean_ms);
  r.std_ms = std::sqrt(sq / static_cast<double>(v.size()));
  const auto [lo, hi] = std::minmax_element(v.begin(), v.end());
  r.min_ms = *lo;
  r.max_ms = *hi;
  std::vector<double> s = v;
  std::sort(s.begin(), s.end());
  const std::size_t n = s.size();
  r.median_ms = n % 2 ? s[n / 2] : 0.5 * (s[n / 2 - 1] + s[n / 2]);
  // Summation order can leave the mean an ulp outside [min, max].
  r.mean_ms = std::clamp(r.mean_ms, r.min_ms, r.max_ms);
}

using ForwardFn = std::function<Tensor(const Tensor&)>;

/// Times `forward` on one seeded random input. Only the call itself sits
/// inside the clock reads; warmup calls are discarded.
inline BenchReport run_bench(const std::string& name, std::size_t params, const ForwardFn& forward,
                             const Shape& input_shape, std::size_t warmup = 10, std::size_t runs = 100,
                             RngSeed seed = RngSeed{0}) {
  if (runs == 0) throw DomainError("bench needs at least one timed run");
  const Tensor input = random_init(input_shape, UniformInit{0.0f, 1.0f}, fork_seed(seed, "bench-input"));
  BenchReport r{name, input_shape, params, warmup, runs, {}, 0, 0, 0, 0, 0, machine_descriptor()};
  volatile float sink = 0.0f;
  for (std::size_t i = 0; i < warmup; ++i) {
    const Tensor out = forward(input);
    if (out.size()) sink = out[0];
  }
  r.latencies_ms.reserve(runs);
  for (std::size_t i = 0; i < runs; ++i) {
    const auto t0 = std::chrono::steady_clock::now();
    const Tensor out = forward(input);
    const auto t1 = std::chrono::steady_clock::now();
    if (out.size()) sink = out[0];
    r.latencies_ms.push_back(std::chrono::duration<double, std::milli>(t1 - t0).count());
  }
  (void)sink;
  summarize_latencies(r);
  return r;
}

/// Batch-1 eval-mode forward of `model`.
inline BenchReport run_bench(const MosquitoNet& model, std::size_t warmup = 10, std::size_t runs = 100,
                             RngSeed seed = RngSeed{0}, const std::string& name = "MosquitoNet") {
  const auto& c = model.config();
  return run_bench(
      name, count_parameters(model), [&model](const Tensor& x) { return model.forward(x); },
      Shape{1, c.channels, c.height, c.width}, warmup, runs, seed);
}

// ---------------------------------------------------------------------------
// Tables

/// One table row. Reference rows keep the text of the baselines file as is.
struct ReferenceRow {
  std::string name;
  std::string input;
  std::string params;
  std::string cpu_ms;
};

inline std::string group_thousands(std::size_t n) {
  std::string digits = std::to_string(n), out;
  for (std::size_t i = 0; i < digits.size(); ++i) {
    if (i && (digits.size() - i) % 3 == 0) out += ',';
    out += digits[i];
  }
  return out;
}

/// "3*120*120" from [1,3,120,120] (the batch dimension is dropped).
inline std::string input_size_label(const Shape& s) {
  std::string out;
  for (std::size_t i = s.size() == 4 ? 1 : 0; i < s.size(); ++i) out += (out.empty() ? "" : "*") + std::to_string(s[i]);
  return out;
}

inline ReferenceRow to_row(const BenchReport& r) {
  char ms[32];
  std::snprintf(ms, sizeof ms, "%.3f", r.mean_ms);
  return {r.name, input_size_label(r.input_shape), group_thousands(r.params), ms};
}

inline std::size_t parse_grouped(const std::string& s) {
  std::string digits;
  for (char c : s) {
    if (c != ',') digits += c;
  }
  return text::parse_number<std::size_t>(digits, "params");
}

/// Tab-separated name, input, params, cpu_ms; '#' lines and blanks skipped.
inline std::vector<ReferenceRow> parse_baselines(std::string_view doc) {
  std::vector<ReferenceRow> rows;
  std::size_t line_no = 0;
  for (const auto& raw : text::split(doc, '\n')) {
    ++line_no;
    const std::string line = raw.size() && raw.back() == '\r' ? raw.substr(0, raw.size() - 1) : raw;
    if (text::trim(line).empty() || text::trim(line)[0] == '#') continue;
    const auto f = text::split(line, '\t');
    if (f.size() != 4) {
      throw text::ParseError("baselines line " + std::to_string(line_no) + ": expected 4 tab-separated fields, got " +
                             std::to_string(f.size()));
    }
    (void)parse_grouped(f[2]);
    rows.push_back({f[0], f[1], f[2], f[3]});
  }
  return rows;
}

inline std::vector<ReferenceRow> load_baselines(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open baselines file " + path.string());
  const std::string doc((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  return parse_baselines(doc);
}

inline std::string render_baselines(const std::vector<BenchReport>& reports) {
  std::string out = "# name\tinput\tparams\tcpu_ms\n";
  for (const auto& r : reports) {
    const ReferenceRow row = to_row(r);
    out += row.name + "\t" + row.input + "\t" + row.params + "\t" + row.cpu_ms + "\n";
  }
  return out;
}

/// Measured rows sorted by parameter count, then the reference rows in file
/// order under a separator.
inline std::string render_table(std::vector<BenchReport> reports, const std::vector<ReferenceRow>& reference = {}) {
  if (reports.empty() && reference.empty()) throw DomainError("render_table: nothing to render");
  std::stable_sort(reports.begin(), reports.end(),
                   [](const BenchReport& a, const BenchReport& b) { return a.params < b.params; });
  std::string out;
  char line[256];
  auto row = [&](const ReferenceRow& r) {
    std::snprintf(line, sizeof line, "%-16s %-20s %14s %12s\n", r.name.c_str(), r.input.c_str(), r.params.c_str(),
                  r.cpu_ms.c_str());
    out += line;
  };
  row({"Model Name", "Input Size (Ch,H,W)", "Params", "CPU ms"});
  for (const auto& r : reports) row(to_row(r));
  if (!reference.empty()) {
    out += "-- reference --\n";
    for (const auto& r : reference) row(r);
  }
  return out;
}

/// Key=value summary of one report; latencies are listed in run order.
inline std::string render_bench_kv(const BenchReport& r) {
  using text::format_double;
  std::string out = "name=" + r.name + "\ninput=" + input_size_label(r.input_shape) +
                    "\nparams=" + std::to_string(r.params) + "\nwarmup=" + std::to_string(r.warmup) +
                    "\nruns=" + std::to_string(r.runs) + "\nmean_ms=" + format_double(r.mean_ms) +
                    "\nstd_ms=" + format_double(r.std_ms) + "\nmin_ms=" + format_double(r.min_ms) +
                    "\nmax_ms=" + format_double(r.max_ms) + "\nmedian_ms=" + format_double(r.median_ms) +
                    "\nmachine=" + r.machine + "\n";
  return out;
}

}  // namespace mqnet
