#pragma once

#include <algorithm>
#include <charconv>
#include <cmath>
#include <cstddef>
#include <cstdio>
#include <filesystem>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "stackdetect/corpus.hpp"
#include "stackdetect/errors.hpp"
#include "stackdetect/io.hpp"

namespace stackdetect {

struct MetricsRow {
  std::size_t epoch = 0;  // 1-based
  std::string split;      // "train" or "validation"
  double loss = 0.0;
  double accuracy = 0.0;

  friend bool operator==(const MetricsRow&, const MetricsRow&) = default;
};

using MetricsLog = std::vector<MetricsRow>;

inline std::string format_g6(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.6g", v);
  return buf;
}

// `epoch,split,loss,accuracy`, six significant digits, sorted by
// (epoch, train before validation).
inline std::string format_metrics_csv(std::span<const MetricsRow> log) {
  std::vector<MetricsRow> rows(log.begin(), log.end());
  std::stable_sort(rows.begin(), rows.end(), [](const MetricsRow& a, const MetricsRow& b) {
    if (a.epoch != b.epoch) return a.epoch < b.epoch;
    return (a.split == "train" ? 0 : 1) < (b.split == "train" ? 0 : 1);
  });
  std::string out = "epoch,split,loss,accuracy\n";
  for (const auto& r : rows) {
    if (r.split != "train" && r.split != "validation") throw ValidationError("metrics split must be train or validation");
    out += std::to_string(r.epoch) + "," + r.split + "," + format_g6(r.loss) + "," + format_g6(r.accuracy) + "\n";
  }
  return out;
}

inline void export_metrics(std::span<const MetricsRow> log, const std::filesystem::path& path) {
  write_file_atomic(path, format_metrics_csv(log));
}

inline MetricsLog parse_metrics_csv(std::string_view content) {
  auto records = csv::parse(content);
  if (records.empty() || records.front() != std::vector<std::string>{"epoch", "split", "loss", "accuracy"}) {
    throw SchemaError("metrics CSV must start with header epoch,split,loss,accuracy");
  }
  MetricsLog log;
  for (std::size_t i = 1; i < records.size(); ++i) {
    const auto& r = records[i];
    if (r.size() != 4) throw SchemaError("metrics row " + std::to_string(i) + " does not have 4 fields");
    const std::string where = "metrics row " + std::to_string(i);
    MetricsRow row;
    row.split = r[1];
    auto num = [&](const std::string& f, auto& out) {
      const auto [p, ec] = std::from_chars(f.data(), f.data() + f.size(), out);
      if (ec != std::errc() || p != f.data() + f.size()) throw SchemaError(where + ": bad number '" + f + "'");
    };
    num(r[0], row.epoch);
    num(r[2], row.loss);
    num(r[3], row.accuracy);
    if (row.split != "train" && row.split != "validation") throw ValidationError(where + ": split must be train or validation");
    log.push_back(std::move(row));
  }
  return log;
}

inline MetricsLog read_metrics(const std::filesystem::path& path) { return parse_metrics_csv(read_file(path)); }

// Convolution with a Gaussian kernel truncated at +-ceil(3 sigma). Near the
// ends the kernel is cut to the available samples and renormalized.
// sigma == 0 returns the series unchanged.
inline std::vector<double> gaussian_smooth(std::span<const double> series, double sigma) {
  if (!(sigma >= 0.0)) throw ValidationError("gaussian_smooth sigma must be >= 0");
  std::vector<double> out(series.begin(), series.end());
  if (sigma == 0.0 || series.empty()) return out;
  const auto radius = static_cast<std::ptrdiff_t>(std::ceil(3.0 * sigma));
  std::vector<double> kernel(static_cast<std::size_t>(2 * radius + 1));
  for (std::ptrdiff_t k = -radius; k <= radius; ++k)
    kernel[static_cast<std::size_t>(k + radius)] = std::exp(-0.5 * static_cast<double>(k * k) / (sigma * sigma));
  const auto n = static_cast<std::ptrdiff_t>(series.size());
  for (std::ptrdiff_t i = 0; i < n; ++i) {
    double acc = 0.0, wsum = 0.0;
    for (std::ptrdiff_t k = -radius; k <= radius; ++k) {
      const std::ptrdiff_t j = i + k;
      if (j < 0 || j >= n) continue;
      const double w = kernel[static_cast<std::size_t>(k + radius)];
      acc += w * series[static_cast<std::size_t>(j)];
      wsum += w;
    }
    out[static_cast<std::size_t>(i)] = acc / wsum;
  }
  return out;
}

// Smooths loss and accuracy per split independently.
inline MetricsLog smooth_metrics(std::span<const MetricsRow> log, double sigma) {
  MetricsLog out(log.begin(), log.end());
  for (const char* split : {"train", "validation"}) {
    std::vector<std::size_t> idx;
    for (std::size_t i = 0; i < out.size(); ++i)
      if (out[i].split == split) idx.push_back(i);
    std::vector<double> loss, acc;
    for (auto i : idx) {
      loss.push_back(out[i].loss);
      acc.push_back(out[i].accuracy);
    }
    loss = gaussian_smooth(loss, sigma);
    acc = gaussian_smooth(acc, sigma);
    for (std::size_t t = 0; t < idx.size(); ++t) {
      out[idx[t]].loss = loss[t];
      out[idx[t]].accuracy = acc[t];
    }
  }
  return out;
}

}  // namespace stackdetect
