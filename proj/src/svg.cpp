//
//  svg.cpp
//
//  Distributed under the Apache License, Version 2.0.
//  See the accompanying file LICENSE or http://www.apache.org/licenses/LICENSE-2.0.html
//

#include "drgp/svg.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <stdexcept>
#include <string>
#include <vector>

#include "drgp/common.hpp"
#include "drgp/io.hpp"

namespace drgp {

namespace {

// Pixel coordinates carry two decimals: enough for crisp lines, short
// enough to keep the document byte-stable and small.
std::string pixel(double value) {
    char buffer[32];
    std::snprintf(buffer, sizeof(buffer), "%.2f", value);
    return buffer;
}

std::string escape_text(const std::string& text) {
    std::string out;
    out.reserve(text.size());
    for (const char c : text) {
        if (c == '&')
            out += "&amp;";
        else if (c == '<')
            out += "&lt;";
        else if (c == '>')
            out += "&gt;";
        else
            out += c;
    }
    return out;
}

struct AxisScale {
    double low = 0.0;
    double high = 1.0;
    bool log = false;

    // Fraction of the axis length for a data value.
    double fraction(double value) const {
        const double v = log ? std::log10(value) : value;
        return (v - low) / (high - low);
    }
};

AxisScale make_scale(const std::vector<double>& values, bool log, const char* axis) {
    double lo = values.front();
    double hi = values.front();
    for (const double v : values) {
        lo = std::min(lo, v);
        hi = std::max(hi, v);
    }
    if (log) {
        require(lo > 0.0, std::string("line_plot_svg: log ") + axis +
                              " axis requires positive values");
        lo = std::log10(lo);
        hi = std::log10(hi);
    }
    if (lo == hi) {
        // A flat series still needs a visible band to sit in.
        lo -= 0.5;
        hi += 0.5;
    }
    AxisScale scale;
    scale.log = log;
    const double pad = 0.04 * (hi - lo);
    scale.low = lo - pad;
    scale.high = hi + pad;
    return scale;
}

// Tick positions in data space. Linear axes use a 1/2/5 ladder; log axes
// use decades, thinned when the span is wide.
std::vector<double> tick_values(const AxisScale& scale) {
    std::vector<double> ticks;
    if (scale.log) {
        const int first = static_cast<int>(std::ceil(scale.low));
        const int last = static_cast<int>(std::floor(scale.high));
        const int span = last - first;
        const int stride = span > 8 ? (span + 7) / 8 : 1;
        for (int k = first; k <= last; k += stride)
            ticks.push_back(std::pow(10.0, k));
        return ticks;
    }
    const double range = scale.high - scale.low;
    const double raw_step = range / 5.0;
    const double magnitude = std::pow(10.0, std::floor(std::log10(raw_step)));
    const double normalized = raw_step / magnitude;
    const double step =
        (normalized <= 2.0 ? 2.0 : normalized <= 5.0 ? 5.0 : 10.0) * magnitude;
    const double first = std::ceil(scale.low / step) * step;
    for (double v = first; v <= scale.high + 1e-9 * range; v += step) {
        // Snap near-zero ticks so the label reads "0" instead of residue.
        ticks.push_back(std::abs(v) < 1e-12 * range ? 0.0 : v);
    }
    return ticks;
}

std::string tick_label(double value, bool log) {
    if (log) {
        // Decades format compactly as powers when they get long.
        const double exponent = std::log10(value);
        if (std::abs(exponent) >= 5.0)
            return "1e" + format_double(exponent);
    }
    return format_double(value);
}

}  // namespace

std::string line_plot_svg(const std::vector<double>& x, const std::vector<double>& y,
                          const PlotOptions& options) {
    require(x.size() == y.size(), "line_plot_svg: x and y must have equal length");
    require(x.size() >= 2, "line_plot_svg: need at least two points");
    require(options.width >= 200 && options.height >= 150,
            "line_plot_svg: canvas too small");
    for (std::size_t i = 0; i < x.size(); ++i) {
        require(std::isfinite(x[i]) && std::isfinite(y[i]),
                "line_plot_svg: values must be finite");
    }

    const AxisScale sx = make_scale(x, options.log_x, "x");
    const AxisScale sy = make_scale(y, options.log_y, "y");

    const double left = 72.0, right = 20.0, top = 44.0, bottom = 56.0;
    const double plot_w = options.width - left - right;
    const double plot_h = options.height - top - bottom;
    const auto px = [&](double v) { return left + sx.fraction(v) * plot_w; };
    const auto py = [&](double v) { return top + (1.0 - sy.fraction(v)) * plot_h; };

    std::string out;
    out += "<svg xmlns=\"http://www.w3.org/2000/svg\" version=\"1.1\" width=\"" +
           std::to_string(options.width) + "\" height=\"" + std::to_string(options.height) +
           "\" viewBox=\"0 0 " + std::to_string(options.width) + " " +
           std::to_string(options.height) + "\">\n";
    out += "<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n";
    out += "<text x=\"" + pixel(options.width / 2.0) +
           "\" y=\"24\" text-anchor=\"middle\" font-family=\"sans-serif\" "
           "font-size=\"16\">" +
           escape_text(options.title) + "</text>\n";

    for (const double tick : tick_values(sx)) {
        const double gx = px(tick);
        out += "<line x1=\"" + pixel(gx) + "\" y1=\"" + pixel(top) + "\" x2=\"" + pixel(gx) +
               "\" y2=\"" + pixel(top + plot_h) +
               "\" stroke=\"#dddddd\" stroke-width=\"1\"/>\n";
        out += "<text x=\"" + pixel(gx) + "\" y=\"" + pixel(top + plot_h + 18.0) +
               "\" text-anchor=\"middle\" font-family=\"sans-serif\" font-size=\"11\">" +
               escape_text(tick_label(tick, sx.log)) + "</text>\n";
    }
    for (const double tick : tick_values(sy)) {
        const double gy = py(tick);
        out += "<line x1=\"" + pixel(left) + "\" y1=\"" + pixel(gy) + "\" x2=\"" +
               pixel(left + plot_w) + "\" y2=\"" + pixel(gy) +
               "\" stroke=\"#dddddd\" stroke-width=\"1\"/>\n";
        out += "<text x=\"" + pixel(left - 6.0) + "\" y=\"" + pixel(gy + 4.0) +
               "\" text-anchor=\"end\" font-family=\"sans-serif\" font-size=\"11\">" +
               escape_text(tick_label(tick, sy.log)) + "</text>\n";
    }

    out += "<rect x=\"" + pixel(left) + "\" y=\"" + pixel(top) + "\" width=\"" +
           pixel(plot_w) + "\" height=\"" + pixel(plot_h) +
           "\" fill=\"none\" stroke=\"#333333\" stroke-width=\"1\"/>\n";

    out += "<polyline fill=\"none\" stroke=\"#1f77b4\" stroke-width=\"1.8\" points=\"";
    for (std::size_t i = 0; i < x.size(); ++i) {
        if (i > 0) out += ' ';
        out += pixel(px(x[i])) + "," + pixel(py(y[i]));
    }
    out += "\"/>\n";

    out += "<text x=\"" + pixel(left + plot_w / 2.0) + "\" y=\"" +
           pixel(options.height - 14.0) +
           "\" text-anchor=\"middle\" font-family=\"sans-serif\" font-size=\"13\">" +
           escape_text(options.x_label) + "</text>\n";
    out += "<text x=\"18\" y=\"" + pixel(top + plot_h / 2.0) +
           "\" text-anchor=\"middle\" font-family=\"sans-serif\" font-size=\"13\" "
           "transform=\"rotate(-90 18 " +
           pixel(top + plot_h / 2.0) + ")\">" +
           escape_text(options.y_label) + "</text>\n";
    out += "</svg>\n";
    return out;
}

std::string sparkline(const std::vector<double>& values, int width) {
    require(!values.empty(), "sparkline: need at least one value");
    require(width >= 1, "sparkline: width must be positive");
    for (const double v : values)
        require(std::isfinite(v), "sparkline: values must be finite");

    // Bucket means compress long sequences to the requested width.
    const std::size_t count = values.size();
    const std::size_t columns = std::min<std::size_t>(count, static_cast<std::size_t>(width));
    std::vector<double> compressed(columns, 0.0);
    for (std::size_t c = 0; c < columns; ++c) {
        const std::size_t begin = c * count / columns;
        const std::size_t end = std::max(begin + 1, (c + 1) * count / columns);
        double sum = 0.0;
        for (std::size_t i = begin; i < end; ++i) sum += values[i];
        compressed[c] = sum / static_cast<double>(end - begin);
    }

    double lo = compressed.front(), hi = compressed.front();
    for (const double v : compressed) {
        lo = std::min(lo, v);
        hi = std::max(hi, v);
    }
    static const char levels[] = " .:-=+*#";
    std::string out;
    out.reserve(columns);
    for (const double v : compressed) {
        const double t = hi > lo ? (v - lo) / (hi - lo) : 0.5;
        const int level = std::min(7, static_cast<int>(t * 8.0));
        out += levels[level];
    }
    return out;
}

}  // namespace drgp
