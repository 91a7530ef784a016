#include "kshift/plot.hpp"

#include <algorithm>
#include <cmath>
#include <iomanip>
#include <limits>
#include <sstream>

#include "kshift/errors.hpp"

namespace kshift::plot {

namespace {

const char* palette[] = {"#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b"};

std::string escape(const std::string& s) {
  std::string out;
  for (char c : s) {
    switch (c) {
      case '<': out += "&lt;"; break;
      case '>': out += "&gt;"; break;
      case '&': out += "&amp;"; break;
      default: out += c;
    }
  }
  return out;
}

}  // namespace

std::string render_svg(const Figure& fig, int width, int height) {
  if (!(fig.y_max > fig.y_min)) throw InvalidInput("empty y range");
  const double left = 64, right = 150, top = 36, bottom = 52;
  const double pw = width - left - right, ph = height - top - bottom;

  double x_lo = std::numeric_limits<double>::infinity(), x_hi = -x_lo;
  auto tx = [&](double x) { return fig.log_x ? std::log10(x) : x; };
  for (const auto& s : fig.series) {
    if (s.x.size() != s.y.size() || (!s.err.empty() && s.err.size() != s.y.size())) {
      throw InvalidInput("series " + s.label + " has mismatched lengths");
    }
    for (double x : s.x) {
      if (fig.log_x && !(x > 0)) throw InvalidInput("log axis needs positive x");
      x_lo = std::min(x_lo, tx(x));
      x_hi = std::max(x_hi, tx(x));
    }
  }
  if (!std::isfinite(x_lo)) x_lo = 0, x_hi = 1;
  if (x_hi == x_lo) x_lo -= 0.5, x_hi += 0.5;

  auto px = [&](double x) { return left + (tx(x) - x_lo) / (x_hi - x_lo) * pw; };
  auto py = [&](double y) {
    const double c = std::clamp(y, fig.y_min, fig.y_max);
    return top + (fig.y_max - c) / (fig.y_max - fig.y_min) * ph;
  };

  std::ostringstream ss;
  ss << std::fixed << std::setprecision(2);
  ss << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << width << "\" height=\"" << height
     << "\" font-family=\"sans-serif\" font-size=\"12\">\n";
  ss << "<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n";
  ss << "<text x=\"" << left + pw / 2 << "\" y=\"20\" text-anchor=\"middle\" font-size=\"14\">" << escape(fig.title)
     << "</text>\n";
  ss << "<rect x=\"" << left << "\" y=\"" << top << "\" width=\"" << pw << "\" height=\"" << ph
     << "\" fill=\"none\" stroke=\"black\"/>\n";

  for (int i = 0; i <= 5; ++i) {
    const double y = fig.y_min + (fig.y_max - fig.y_min) * i / 5.0;
    ss << "<line x1=\"" << left << "\" x2=\"" << left + pw << "\" y1=\"" << py(y) << "\" y2=\"" << py(y)
       << "\" stroke=\"#ddd\"/>\n";
    ss << "<text x=\"" << left - 6 << "\" y=\"" << py(y) + 4 << "\" text-anchor=\"end\">" << std::setprecision(2) << y
       << "</text>\n";
  }
  for (int i = 0; i <= 5; ++i) {
    const double t = x_lo + (x_hi - x_lo) * i / 5.0;
    const double x = left + (t - x_lo) / (x_hi - x_lo) * pw;
    std::ostringstream label;
    if (fig.log_x) {
      label << std::setprecision(2) << std::scientific << std::pow(10.0, t);
    } else {
      label << std::setprecision(2) << std::fixed << t;
    }
    ss << "<text x=\"" << x << "\" y=\"" << top + ph + 16 << "\" text-anchor=\"middle\">" << label.str() << "</text>\n";
  }
  ss << "<text x=\"" << left + pw / 2 << "\" y=\"" << height - 12 << "\" text-anchor=\"middle\">"
     << escape(fig.x_label) << "</text>\n";
  ss << "<text transform=\"translate(16," << top + ph / 2 << ") rotate(-90)\" text-anchor=\"middle\">"
     << escape(fig.y_label) << "</text>\n";

  for (std::size_t k = 0; k < fig.series.size(); ++k) {
    const auto& s = fig.series[k];
    const char* color = palette[k % std::size(palette)];
    ss << "<polyline fill=\"none\" stroke=\"" << color << "\" stroke-width=\"2\" points=\"";
    for (std::size_t i = 0; i < s.x.size(); ++i) ss << px(s.x[i]) << ',' << py(s.y[i]) << ' ';
    ss << "\"/>\n";
    for (std::size_t i = 0; i < s.x.size(); ++i) {
      if (!s.err.empty()) {
        ss << "<line x1=\"" << px(s.x[i]) << "\" x2=\"" << px(s.x[i]) << "\" y1=\"" << py(s.y[i] - s.err[i])
           << "\" y2=\"" << py(s.y[i] + s.err[i]) << "\" stroke=\"" << color << "\"/>\n";
      }
      ss << "<circle cx=\"" << px(s.x[i]) << "\" cy=\"" << py(s.y[i]) << "\" r=\"3\" fill=\"" << color << "\"/>\n";
    }
    const double ly = top + 14 + 18.0 * static_cast<double>(k);
    ss << "<line x1=\"" << left + pw + 10 << "\" x2=\"" << left + pw + 30 << "\" y1=\"" << ly << "\" y2=\"" << ly
       << "\" stroke=\"" << color << "\" stroke-width=\"2\"/>\n";
    ss << "<text x=\"" << left + pw + 34 << "\" y=\"" << ly + 4 << "\">" << escape(s.label) << "</text>\n";
  }
  ss << "</svg>\n";
  return ss.str();
}

}  // namespace kshift::plot
