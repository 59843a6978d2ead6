#pragma once

// Deterministic SVG line plots of training logs and evaluation reports.
// Output bytes depend only on the input values.

#include <filesystem>
#include <span>
#include <string>
#include <vector>

namespace dotfan::plot {

struct Series {
  std::string name;
  std::vector<double> x;
  std::vector<double> y;
};

struct Axis {
  double lo = 0.0;
  double hi = 1.0;
};

// Covers every finite value with lo < hi; a constant is padded by 0.5.
// Throws ContractError without finite values.
Axis axis_range(std::span<const double> values);

// One JSON object per line; the x value is "step" (or "epoch" when there
// is no step) and every other numeric field becomes a series. Throws
// DataError naming the line on malformed input and on an empty log.
std::vector<Series> read_log_series(const std::filesystem::path& path);

// Accuracy, AUC and TAR values of evaluation reports against their order.
std::vector<Series> read_report_series(std::span<const std::filesystem::path> reports);

// One panel per series, stacked vertically.
std::string render_svg(std::span<const Series> series, const std::string& title);

}  // namespace dotfan::plot
