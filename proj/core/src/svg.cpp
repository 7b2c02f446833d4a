#include "tokenunlearn/svg.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <limits>
#include <sstream>

#include "tokenunlearn/errors.hpp"

namespace tokenunlearn::svg {

namespace {

constexpr const char* kPalette[] = {"#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd",
                                    "#8c564b", "#e377c2", "#7f7f7f", "#bcbd22", "#17becf"};
constexpr int kMarginLeft = 64;
constexpr int kMarginRight = 150;
constexpr int kMarginTop = 36;
constexpr int kMarginBottom = 48;

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

const char* color(std::size_t i) { return kPalette[i % std::size(kPalette)]; }

std::string fmt(double v) {
  std::ostringstream o;
  o.precision(3);
  o << v;
  return o.str();
}

struct Axis {
  double lo = 0.0, hi = 1.0;
  bool log = false;

  double map(double v) const {
    const double t = log ? (std::log10(v) - std::log10(lo)) / (std::log10(hi) - std::log10(lo))
                         : (v - lo) / (hi - lo);
    return t;
  }

  void fit(double mn, double mx) {
    if (!(mn <= mx)) {
      mn = log ? 1.0 : 0.0;
      mx = log ? 10.0 : 1.0;
    }
    if (mn == mx) {
      if (log) {
        mn /= 2.0;
        mx *= 2.0;
      } else {
        mn -= 0.5;
        mx += 0.5;
      }
    }
    lo = mn;
    hi = mx;
    if (!log) {
      const double pad = 0.05 * (hi - lo);
      hi += pad;
      if (lo != 0.0) lo -= pad;
    }
  }

  std::vector<double> ticks() const {
    std::vector<double> t;
    if (log) {
      for (double p = std::floor(std::log10(lo)); p <= std::ceil(std::log10(hi)); p += 1.0) {
        const double v = std::pow(10.0, p);
        if (v >= lo * 0.999 && v <= hi * 1.001) t.push_back(v);
      }
      if (t.size() < 2) t = {lo, hi};
      return t;
    }
    for (int i = 0; i <= 5; ++i) t.push_back(lo + (hi - lo) * i / 5.0);
    return t;
  }
};

void header(std::ostringstream& o, const ChartOptions& opt) {
  o << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << opt.width << "\" height=\"" << opt.height
    << "\" viewBox=\"0 0 " << opt.width << ' ' << opt.height << "\" font-family=\"sans-serif\" font-size=\"11\">\n"
    << "<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n"
    << "<text x=\"" << opt.width / 2 << "\" y=\"20\" text-anchor=\"middle\" font-size=\"14\">"
    << escape(opt.title) << "</text>\n";
}

void frame(std::ostringstream& o, const ChartOptions& opt, const Axis& y, int pw, int ph) {
  o << "<rect x=\"" << kMarginLeft << "\" y=\"" << kMarginTop << "\" width=\"" << pw << "\" height=\"" << ph
    << "\" fill=\"none\" stroke=\"#333\"/>\n";
  for (double t : y.ticks()) {
    const double py = kMarginTop + ph * (1.0 - y.map(t));
    o << "<line x1=\"" << kMarginLeft - 4 << "\" y1=\"" << py << "\" x2=\"" << kMarginLeft + pw << "\" y2=\"" << py
      << "\" stroke=\"#ddd\"/>\n"
      << "<text x=\"" << kMarginLeft - 6 << "\" y=\"" << py + 4 << "\" text-anchor=\"end\">" << fmt(t)
      << "</text>\n";
  }
  o << "<text x=\"" << kMarginLeft + pw / 2 << "\" y=\"" << opt.height - 10 << "\" text-anchor=\"middle\">"
    << escape(opt.x_label) << "</text>\n"
    << "<text transform=\"translate(16," << kMarginTop + ph / 2 << ") rotate(-90)\" text-anchor=\"middle\">"
    << escape(opt.y_label) << "</text>\n";
}

void legend(std::ostringstream& o, std::span<const std::string> names, int x0) {
  for (std::size_t i = 0; i < names.size(); ++i) {
    const int y = kMarginTop + 8 + static_cast<int>(i) * 16;
    o << "<rect x=\"" << x0 << "\" y=\"" << y - 8 << "\" width=\"10\" height=\"10\" fill=\"" << color(i)
      << "\"/>\n<text x=\"" << x0 + 14 << "\" y=\"" << y + 1 << "\">" << escape(names[i]) << "</text>\n";
  }
}

}  // namespace

std::string line_chart(std::span<const Series> series, const ChartOptions& opt) {
  const int pw = opt.width - kMarginLeft - kMarginRight;
  const int ph = opt.height - kMarginTop - kMarginBottom;
  auto usable = [&](double x, double y) {
    return std::isfinite(x) && std::isfinite(y) && (!opt.log_x || x > 0.0) && (!opt.log_y || y > 0.0);
  };
  double xmin = std::numeric_limits<double>::infinity(), xmax = -xmin, ymin = xmin, ymax = -xmin;
  for (const Series& s : series) {
    for (std::size_t i = 0; i < std::min(s.x.size(), s.y.size()); ++i) {
      if (!usable(s.x[i], s.y[i])) continue;
      xmin = std::min(xmin, s.x[i]);
      xmax = std::max(xmax, s.x[i]);
      ymin = std::min(ymin, s.y[i]);
      ymax = std::max(ymax, s.y[i]);
    }
  }
  Axis xa{0, 1, opt.log_x}, ya{0, 1, opt.log_y};
  xa.fit(xmin, xmax);
  ya.fit(ymin, ymax);

  std::ostringstream o;
  header(o, opt);
  frame(o, opt, ya, pw, ph);
  for (double t : xa.ticks()) {
    const double px = kMarginLeft + pw * xa.map(t);
    o << "<text x=\"" << px << "\" y=\"" << kMarginTop + ph + 16 << "\" text-anchor=\"middle\">" << fmt(t)
      << "</text>\n";
  }
  std::vector<std::string> names;
  for (std::size_t k = 0; k < series.size(); ++k) {
    const Series& s = series[k];
    names.push_back(s.name);
    std::ostringstream pts;
    std::ostringstream marks;
    for (std::size_t i = 0; i < std::min(s.x.size(), s.y.size()); ++i) {
      if (!usable(s.x[i], s.y[i])) continue;
      const double px = kMarginLeft + pw * xa.map(s.x[i]);
      const double py = kMarginTop + ph * (1.0 - ya.map(s.y[i]));
      pts << px << ',' << py << ' ';
      marks << "<circle cx=\"" << px << "\" cy=\"" << py << "\" r=\"2.5\" fill=\"" << color(k) << "\"/>\n";
    }
    o << "<polyline fill=\"none\" stroke=\"" << color(k) << "\" stroke-width=\"1.5\" points=\"" << pts.str()
      << "\"/>\n"
      << marks.str();
  }
  legend(o, names, kMarginLeft + pw + 12);
  o << "</svg>\n";
  return o.str();
}

std::string bar_chart(std::span<const std::string> series_names, std::span<const BarGroup> groups,
                      const ChartOptions& opt) {
  const int pw = opt.width - kMarginLeft - kMarginRight;
  const int ph = opt.height - kMarginTop - kMarginBottom;
  double ymax = 0.0;
  for (const BarGroup& g : groups) {
    for (double v : g.values) {
      if (std::isfinite(v)) ymax = std::max(ymax, v);
    }
  }
  Axis ya;
  ya.fit(0.0, ymax > 0.0 ? ymax : 1.0);

  std::ostringstream o;
  header(o, opt);
  frame(o, opt, ya, pw, ph);
  const double slot = groups.empty() ? 0.0 : static_cast<double>(pw) / static_cast<double>(groups.size());
  const double bar = series_names.empty() ? 0.0 : 0.8 * slot / static_cast<double>(series_names.size());
  for (std::size_t g = 0; g < groups.size(); ++g) {
    const double x0 = kMarginLeft + slot * static_cast<double>(g) + 0.1 * slot;
    for (std::size_t k = 0; k < groups[g].values.size() && k < series_names.size(); ++k) {
      const double v = groups[g].values[k];
      if (!std::isfinite(v)) continue;
      const double h = ph * ya.map(std::max(0.0, v));
      o << "<rect x=\"" << x0 + bar * static_cast<double>(k) << "\" y=\"" << kMarginTop + ph - h
        << "\" width=\"" << bar << "\" height=\"" << h << "\" fill=\"" << color(k) << "\"/>\n";
    }
    o << "<text x=\"" << kMarginLeft + slot * (static_cast<double>(g) + 0.5) << "\" y=\""
      << kMarginTop + ph + 16 << "\" text-anchor=\"middle\">" << escape(groups[g].label) << "</text>\n";
  }
  legend(o, series_names, kMarginLeft + pw + 12);
  o << "</svg>\n";
  return o.str();
}

void write_file(const std::filesystem::path& path, const std::string& text) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot write " + path.string());
  out << text;
  if (!out) throw IoError("failed writing " + path.string());
}

}  // namespace tokenunlearn::svg
