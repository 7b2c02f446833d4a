#pragma once

#include <filesystem>
#include <span>
#include <string>
#include <vector>

namespace tokenunlearn::svg {

struct Series {
  std::string name;
  std::vector<double> x;
  std::vector<double> y;
};

struct ChartOptions {
  std::string title;
  std::string x_label;
  std::string y_label;
  bool log_x = false;
  bool log_y = false;
  int width = 640;
  int height = 400;
};

/// Polyline chart with markers and a legend. Non-finite points are skipped.
std::string line_chart(std::span<const Series> series, const ChartOptions& options);

struct BarGroup {
  std::string label;
  std::vector<double> values;  // one per series name
};

/// Grouped vertical bars.
std::string bar_chart(std::span<const std::string> series_names, std::span<const BarGroup> groups,
                      const ChartOptions& options);

/// Writes `text` to `path`, creating parent directories. Throws IoError.
void write_file(const std::filesystem::path& path, const std::string& text);

}  // namespace tokenunlearn::svg
