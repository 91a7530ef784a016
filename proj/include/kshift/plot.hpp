#pragma once

#include <string>
#include <vector>

namespace kshift::plot {

struct Series {
  std::string label;
  std::vector<double> x;
  std::vector<double> y;
  std::vector<double> err;  // optional symmetric error bars, same length as y
};

struct Figure {
  std::string title;
  std::string x_label;
  std::string y_label;
  bool log_x = false;
  double y_min = 0.0;
  double y_max = 1.0;
  std::vector<Series> series;
};

/// Static SVG line chart.
std::string render_svg(const Figure& fig, int width = 640, int height = 420);

}  // namespace kshift::plot
