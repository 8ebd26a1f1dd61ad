//
//  io.hpp
//
//  Distributed under the Apache License, Version 2.0.
//  See the accompanying file LICENSE or http://www.apache.org/licenses/LICENSE-2.0.html
//

#pragma once

#include <string>

#include "drgp/common.hpp"
#include "drgp/model.hpp"

namespace drgp {

// Time-stamped series as stored on disk: one strictly increasing stamp per
// state, the exogenous block and the output column.
struct TimeSeries {
    Vector stamps;  // K
    Dataset data;

    void validate() const;
};

// Shortest decimal text that parses back to exactly the same double. Both
// file formats use it, which is what makes save -> load -> save byte-stable.
std::string format_double(double value);

// Parses the text produced by format_double (and any other standard decimal
// or scientific literal). Throws std::runtime_error naming the offending
// text when it is not a complete number.
double parse_double(const std::string& text);

// Comma-separated series with header "t,u_1,...,u_Qx,y". Rows are states in
// time order. Parse failures name the line and column; a non-increasing
// stamp column is a validation error.
TimeSeries load_series(const std::string& path);
void save_series(const std::string& path, const TimeSeries& series);

// In-memory forms of the same format, shared by the file functions and the
// byte-stability tests.
std::string series_to_csv(const TimeSeries& series);
TimeSeries series_from_csv(const std::string& text, const std::string& name);

// Deterministic actuator-like benchmark series: a smoothed random-step
// drive signal and a saturating second-order response. Identical bytes for
// identical arguments, which keeps the bundled fixture regenerable.
TimeSeries synthetic_series(Index num_states, Index exo_dim, unsigned seed);

// Self-describing plain-text model document with a versioned header and
// explicit shapes. save -> load -> save reproduces the file byte for byte.
std::string model_to_text(const DeepModel& model);
DeepModel model_from_text(const std::string& text);
void save_model(const std::string& path, const DeepModel& model);
DeepModel load_model(const std::string& path);

// Whole-file helpers; read throws std::runtime_error when the file cannot
// be opened, write when it cannot be created.
std::string read_text_file(const std::string& path);
void write_text_file(const std::string& path, const std::string& content);

}  // namespace drgp
