//
//  svg.hpp
//
//  Distributed under the Apache License, Version 2.0.
//  See the accompanying file LICENSE or http://www.apache.org/licenses/LICENSE-2.0.html
//

#pragma once

#include <string>
#include <vector>

namespace drgp {

// Static line-plot settings. Log axes require strictly positive data on
// that axis.
struct PlotOptions {
    std::string title;
    std::string x_label;
    std::string y_label;
    bool log_x = false;
    bool log_y = false;
    int width = 860;
    int height = 520;
};

// Self-contained SVG 1.1 document with axes, tick grid and one polyline.
// Identical inputs give identical bytes.
std::string line_plot_svg(const std::vector<double>& x, const std::vector<double>& y,
                          const PlotOptions& options);

// One-line ASCII rendering of a value sequence for terminal output, eight
// density levels from ' ' to '#', downsampled to at most width characters.
std::string sparkline(const std::vector<double>& values, int width = 60);

}  // namespace drgp
