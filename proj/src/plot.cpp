#include "dotfan/plot.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <map>
#include <sstream>

#include "dotfan/errors.hpp"
#include "dotfan/eval.hpp"
#include "dotfan/io.hpp"
#include "json.hpp"

namespace dotfan::plot {

namespace {

constexpr double kPanelWidth = 640.0;
constexpr double kPanelHeight = 180.0;
constexpr double kMargin = 60.0;
constexpr double kTitleHeight = 30.0;

// Fixed formatting keeps the output byte-stable.
std::string num(double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.2f", v);
  return buf;
}

std::string label_num(double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.4g", v);
  return buf;
}

std::string escape(const std::string& s) {
  std::string out;
  for (char c : s) {
    switch (c) {
      case '&': out += "&amp;"; break;
      case '<': out += "&lt;"; break;
      case '>': out += "&gt;"; break;
      case '"': out += "&quot;"; break;
      default: out += c;
    }
  }
  return out;
}

}  // namespace

Axis axis_range(std::span<const double> values) {
  double lo = INFINITY, hi = -INFINITY;
  for (double v : values) {
    if (!std::isfinite(v)) continue;
    lo = std::min(lo, v);
    hi = std::max(hi, v);
  }
  if (!(lo <= hi)) throw ContractError("axis_range: no finite values");
  if (lo == hi) return {lo - 0.5, hi + 0.5};
  return {lo, hi};
}

std::vector<Series> read_log_series(const std::filesystem::path& path) {
  std::istringstream is(io::read_text(path));
  std::string line;
  int line_no = 0;
  std::map<std::string, Series> by_name;
  bool any = false;
  while (std::getline(is, line)) {
    ++line_no;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    const auto where = path.string() + ":" + std::to_string(line_no) + ": ";
    nlohmann::json j;
    try {
      j = nlohmann::json::parse(line);
    } catch (const nlohmann::json::exception& e) {
      throw DataError(where + "malformed log line: " + e.what());
    }
    if (!j.is_object()) throw DataError(where + "log line is not an object");
    const char* x_key = j.contains("step") ? "step" : j.contains("epoch") ? "epoch" : nullptr;
    if (!x_key || !j.at(x_key).is_number()) throw DataError(where + "log line has no numeric step or epoch");
    const double x = j.at(x_key).get<double>();
    for (const auto& [key, value] : j.items()) {
      if (key == x_key || key == "step" || key == "epoch" || !value.is_number()) continue;
      auto& s = by_name[key];
      s.name = key;
      s.x.push_back(x);
      s.y.push_back(value.get<double>());
    }
    any = true;
  }
  if (!any) throw DataError(path.string() + ": empty log");
  if (by_name.empty()) throw DataError(path.string() + ": log has no numeric series");
  std::vector<Series> out;
  for (auto& [name, s] : by_name) out.push_back(std::move(s));
  return out;
}

std::vector<Series> read_report_series(std::span<const std::filesystem::path> reports) {
  if (reports.empty()) throw DataError("no evaluation reports given");
  std::map<std::string, Series> by_name;
  for (std::size_t i = 0; i < reports.size(); ++i) {
    nlohmann::json j;
    try {
      j = nlohmann::json::parse(io::read_text(reports[i]));
    } catch (const nlohmann::json::exception& e) {
      throw DataError(reports[i].string() + ": " + e.what());
    }
    const auto r = eval::EvalReport::from_json(j);
    const double x = static_cast<double>(i + 1);
    const auto add = [&](const std::string& name, double y) {
      auto& s = by_name[name];
      s.name = name;
      s.x.push_back(x);
      s.y.push_back(y);
    };
    add("accuracy", r.accuracy);
    add("auc", r.auc);
    for (const auto& [far, tar] : r.tar_at_far) add("tar@far=" + label_num(far), tar);
  }
  std::vector<Series> out;
  for (auto& [name, s] : by_name) out.push_back(std::move(s));
  return out;
}

std::string render_svg(std::span<const Series> series, const std::string& title) {
  if (series.empty()) throw ContractError("render_svg: nothing to plot");
  const double width = kPanelWidth + 2 * kMargin;
  const double height = kTitleHeight + series.size() * (kPanelHeight + kMargin);
  std::ostringstream os;
  os << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << num(width) << "\" height=\"" << num(height)
     << "\" font-family=\"sans-serif\" font-size=\"11\">\n";
  os << "<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n";
  os << "<text x=\"" << num(kMargin) << "\" y=\"20\" font-size=\"14\">" << escape(title) << "</text>\n";
  for (std::size_t k = 0; k < series.size(); ++k) {
    const auto& s = series[k];
    if (s.x.size() != s.y.size() || s.x.empty()) throw ContractError("render_svg: series '" + s.name + "' is empty");
    const Axis ax = axis_range(s.x);
    const Axis ay = axis_range(s.y);
    const double left = kMargin;
    const double top = kTitleHeight + k * (kPanelHeight + kMargin) + kMargin / 2;
    const auto px = [&](double v) { return left + (v - ax.lo) / (ax.hi - ax.lo) * kPanelWidth; };
    const auto py = [&](double v) { return top + kPanelHeight - (v - ay.lo) / (ay.hi - ay.lo) * kPanelHeight; };
    os << "<g>\n<text x=\"" << num(left) << "\" y=\"" << num(top - 6) << "\">" << escape(s.name) << "</text>\n";
    os << "<rect x=\"" << num(left) << "\" y=\"" << num(top) << "\" width=\"" << num(kPanelWidth) << "\" height=\""
       << num(kPanelHeight) << "\" fill=\"none\" stroke=\"#888\"/>\n";
    os << "<text x=\"" << num(left - 4) << "\" y=\"" << num(top + 10) << "\" text-anchor=\"end\">"
       << label_num(ay.hi) << "</text>\n";
    os << "<text x=\"" << num(left - 4) << "\" y=\"" << num(top + kPanelHeight) << "\" text-anchor=\"end\">"
       << label_num(ay.lo) << "</text>\n";
    os << "<text x=\"" << num(left) << "\" y=\"" << num(top + kPanelHeight + 14) << "\">" << label_num(ax.lo)
       << "</text>\n";
    os << "<text x=\"" << num(left + kPanelWidth) << "\" y=\"" << num(top + kPanelHeight + 14)
       << "\" text-anchor=\"end\">" << label_num(ax.hi) << "</text>\n";
    os << "<polyline fill=\"none\" stroke=\"#1f5fa8\" stroke-width=\"1.2\" points=\"";
    bool first = true;
    for (std::size_t i = 0; i < s.x.size(); ++i) {
      if (!std::isfinite(s.x[i]) || !std::isfinite(s.y[i])) continue;
      os << (first ? "" : " ") << num(px(s.x[i])) << ',' << num(py(s.y[i]));
      first = false;
    }
    os << "\"/>\n</g>\n";
  }
  os << "</svg>\n";
  return os.str();
}

}  // namespace dotfan::plot
