//
//  io.cpp
//
//  Distributed under the Apache License, Version 2.0.
//  See the accompanying file LICENSE or http://www.apache.org/licenses/LICENSE-2.0.html
//

#include "drgp/io.hpp"

#include <charconv>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <random>
#include <sstream>
#include <stdexcept>
#include <string>
#include <system_error>
#include <vector>

namespace drgp {

namespace {

constexpr int kModelFormatVersion = 1;

[[noreturn]] void fail(const std::string& message) { throw std::runtime_error(message); }

std::vector<std::string> split(const std::string& line, char sep) {
    std::vector<std::string> out;
    std::size_t start = 0;
    while (true) {
        const std::size_t pos = line.find(sep, start);
        if (pos == std::string::npos) {
            out.push_back(line.substr(start));
            return out;
        }
        out.push_back(line.substr(start, pos - start));
        start = pos + 1;
    }
}

// Column header for position c of a series file with Qx drive channels.
std::string column_name(Index c, Index exo_dim) {
    if (c == 0) return "t";
    if (c == exo_dim + 1) return "y";
    return "u_" + std::to_string(c);
}

// Uniform draw on [0, 1) from the top 53 bits of one engine output. The
// engine's output sequence is fixed by the standard, so generated series
// are identical bytes on every platform.
double uniform01(std::mt19937_64& rng) {
    return static_cast<double>(rng() >> 11) * 0x1.0p-53;
}

// Token reader for the model document: whitespace-separated stream with a
// position counter for error messages.
class TokenReader {
  public:
    explicit TokenReader(const std::string& text) : stream_(text) {}

    std::string next(const char* context) {
        std::string token;
        if (!(stream_ >> token))
            fail(std::string("model file: unexpected end of file, expected ") + context);
        ++count_;
        return token;
    }

    void expect(const std::string& keyword) {
        const std::string token = next(keyword.c_str());
        if (token != keyword)
            fail("model file: expected '" + keyword + "', found '" + token + "' (token " +
                 std::to_string(count_) + ")");
    }

    double number(const char* context) {
        const std::string token = next(context);
        double value = 0.0;
        const auto result = std::from_chars(token.data(), token.data() + token.size(), value);
        if (result.ec != std::errc{} || result.ptr != token.data() + token.size())
            fail(std::string("model file: ") + context + " is not a number: '" + token + "'");
        return value;
    }

    Index integer(const char* context) {
        const double value = number(context);
        const Index rounded = static_cast<Index>(value);
        if (static_cast<double>(rounded) != value)
            fail(std::string("model file: ") + context + " must be an integer");
        return rounded;
    }

    bool at_end() {
        std::string token;
        return !(stream_ >> token);
    }

  private:
    std::istringstream stream_;
    int count_ = 0;
};

Vector read_vector(TokenReader& reader, const char* name, Index size) {
    Vector out(size);
    for (Index i = 0; i < size; ++i) out[i] = reader.number(name);
    return out;
}

Matrix read_matrix(TokenReader& reader, const char* name, Index rows, Index cols) {
    Matrix out(rows, cols);
    for (Index r = 0; r < rows; ++r)
        for (Index c = 0; c < cols; ++c) out(r, c) = reader.number(name);
    return out;
}

void write_vector(std::string& out, const char* name, const Vector& v) {
    out += name;
    out += ' ';
    out += std::to_string(v.size());
    out += '\n';
    if (v.size() == 0) return;
    for (Index i = 0; i < v.size(); ++i) {
        if (i > 0) out += ' ';
        out += format_double(v[i]);
    }
    out += '\n';
}

void write_matrix(std::string& out, const char* name, const Matrix& m) {
    out += name;
    out += ' ';
    out += std::to_string(m.rows());
    out += ' ';
    out += std::to_string(m.cols());
    out += '\n';
    for (Index r = 0; r < m.rows(); ++r) {
        for (Index c = 0; c < m.cols(); ++c) {
            if (c > 0) out += ' ';
            out += format_double(m(r, c));
        }
        out += '\n';
    }
}

Vector read_sized_vector(TokenReader& reader, const std::string& name) {
    reader.expect(name);
    const Index size = reader.integer((name + " size").c_str());
    if (size < 0) fail("model file: " + name + " size must be nonnegative");
    return read_vector(reader, name.c_str(), size);
}

Matrix read_sized_matrix(TokenReader& reader, const std::string& name) {
    reader.expect(name);
    const Index rows = reader.integer((name + " rows").c_str());
    const Index cols = reader.integer((name + " cols").c_str());
    if (rows < 0 || cols < 0) fail("model file: " + name + " shape must be nonnegative");
    return read_matrix(reader, name.c_str(), rows, cols);
}

}  // namespace

void TimeSeries::validate() const {
    data.validate();
    require(stamps.size() == data.outputs.size(),
            "time series: one stamp per state required");
    require(stamps.allFinite(), "time series: stamps must be finite");
    for (Index k = 1; k < stamps.size(); ++k) {
        require(stamps[k] > stamps[k - 1],
                "time series: stamps must increase strictly (state " + std::to_string(k) +
                    ")");
    }
}

std::string format_double(double value) {
    char buffer[64];
    const auto result = std::to_chars(buffer, buffer + sizeof(buffer), value);
    return std::string(buffer, result.ptr);
}

double parse_double(const std::string& text) {
    double value = 0.0;
    const auto result = std::from_chars(text.data(), text.data() + text.size(), value);
    if (result.ec != std::errc{} || result.ptr != text.data() + text.size())
        fail("not a number: '" + text + "'");
    return value;
}

std::string series_to_csv(const TimeSeries& series) {
    series.validate();
    const Index exo_dim = series.data.exogenous.cols();
    const Index num_states = series.data.outputs.size();
    std::string out = "t";
    for (Index q = 1; q <= exo_dim; ++q) out += ",u_" + std::to_string(q);
    out += ",y\n";
    for (Index k = 0; k < num_states; ++k) {
        out += format_double(series.stamps[k]);
        for (Index q = 0; q < exo_dim; ++q) {
            out += ',';
            out += format_double(series.data.exogenous(k, q));
        }
        out += ',';
        out += format_double(series.data.outputs[k]);
        out += '\n';
    }
    return out;
}

TimeSeries series_from_csv(const std::string& text, const std::string& name) {
    std::vector<std::string> lines = split(text, '\n');
    // A trailing newline leaves one empty pseudo-line; interior blank lines
    // stay errors.
    while (!lines.empty() && lines.back().empty()) lines.pop_back();
    for (auto& line : lines) {
        if (!line.empty() && line.back() == '\r') line.pop_back();
    }
    if (lines.empty()) fail(name + ": empty file");

    const std::vector<std::string> header = split(lines[0], ',');
    if (header.size() < 2 || header.front() != "t" || header.back() != "y")
        fail(name + " line 1: header must be t,u_1,...,u_Qx,y");
    const Index exo_dim = static_cast<Index>(header.size()) - 2;
    for (Index q = 1; q <= exo_dim; ++q) {
        if (header[static_cast<std::size_t>(q)] != "u_" + std::to_string(q))
            fail(name + " line 1: drive column " + std::to_string(q) + " must be named u_" +
                 std::to_string(q));
    }

    const Index num_states = static_cast<Index>(lines.size()) - 1;
    if (num_states < 1) fail(name + ": no data rows");
    TimeSeries series;
    series.stamps = Vector(num_states);
    series.data.exogenous = Matrix(num_states, exo_dim);
    series.data.outputs = Vector(num_states);
    for (Index k = 0; k < num_states; ++k) {
        const std::string& line = lines[static_cast<std::size_t>(k) + 1];
        const int line_number = static_cast<int>(k) + 2;
        const std::vector<std::string> cells = split(line, ',');
        if (static_cast<Index>(cells.size()) != exo_dim + 2)
            fail(name + " line " + std::to_string(line_number) + ": expected " +
                 std::to_string(exo_dim + 2) + " fields, got " +
                 std::to_string(cells.size()));
        for (Index c = 0; c < exo_dim + 2; ++c) {
            const std::string& cell = cells[static_cast<std::size_t>(c)];
            double value = 0.0;
            const auto result =
                std::from_chars(cell.data(), cell.data() + cell.size(), value);
            if (result.ec != std::errc{} || result.ptr != cell.data() + cell.size())
                fail(name + " line " + std::to_string(line_number) + ", column " +
                     column_name(c, exo_dim) + ": not a number: '" + cell + "'");
            if (c == 0)
                series.stamps[k] = value;
            else if (c <= exo_dim)
                series.data.exogenous(k, c - 1) = value;
            else
                series.data.outputs[k] = value;
        }
    }
    series.validate();
    return series;
}

TimeSeries load_series(const std::string& path) {
    return series_from_csv(read_text_file(path), path);
}

void save_series(const std::string& path, const TimeSeries& series) {
    write_text_file(path, series_to_csv(series));
}

TimeSeries synthetic_series(Index num_states, Index exo_dim, unsigned seed) {
    require(num_states >= 2, "synthetic series: need at least two states");
    require(exo_dim >= 1, "synthetic series: need at least one drive channel");

    std::mt19937_64 rng(seed);
    TimeSeries series;
    series.stamps = Vector(num_states);
    series.data.exogenous = Matrix(num_states, exo_dim);
    series.data.outputs = Vector(num_states);

    // Piecewise-constant command levels smoothed by a first-order lag feed
    // a saturating second-order plant; the cubic term bends large swings
    // the way valve saturation does.
    const double dt = 0.05;
    double level = 2.0 * uniform01(rng) - 1.0;
    double drive = 0.0;
    double position = 0.0;
    double velocity = 0.0;
    for (Index k = 0; k < num_states; ++k) {
        if (k % 24 == 0) level = 2.0 * uniform01(rng) - 1.0;
        drive += 0.35 * (level - drive);
        velocity += dt * (9.0 * drive - 1.6 * velocity - 4.0 * position -
                          2.5 * position * position * position);
        position += dt * velocity;
        // Flat sum of four uniforms: a light, fully deterministic noise
        // floor with no library-defined sampling involved.
        const double noise = (uniform01(rng) + uniform01(rng) + uniform01(rng) +
                              uniform01(rng) - 2.0) *
                             0.02;
        series.stamps[k] = static_cast<double>(k) * dt;
        series.data.exogenous(k, 0) = drive;
        for (Index q = 1; q < exo_dim; ++q) {
            // Extra channels carry progressively slower shadows of the
            // drive so multi-channel configurations see distinct inputs.
            const double mix = 1.0 / (2.0 + static_cast<double>(q));
            const double previous = k == 0 ? 0.0 : series.data.exogenous(k - 1, q);
            series.data.exogenous(k, q) = previous + mix * (drive - previous);
        }
        series.data.outputs[k] = position + noise;
    }
    return series;
}

std::string model_to_text(const DeepModel& model) {
    model.validate();
    std::string out = "drgp-model " + std::to_string(kModelFormatVersion) + "\n";
    out += "mode ";
    out += model.mode == SpectralMode::kFixed ? "fixed" : "variational";
    out += "\nstates " + std::to_string(model.num_states);
    out += "\nlatent_horizon " + std::to_string(model.latent_horizon);
    out += "\nexo_horizon " + std::to_string(model.exo_horizon);
    out += "\nexo_dim " + std::to_string(model.exo_dim);
    out += "\nlayers " + std::to_string(model.layers.size());
    out += '\n';
    for (std::size_t l = 0; l < model.layers.size(); ++l) {
        const ModelLayer& ml = model.layers[l];
        out += "layer " + std::to_string(l) + '\n';
        out += "features " + std::to_string(ml.hyper.num_features) + '\n';
        out += "sigma_power " + format_double(ml.hyper.sigma_power) + '\n';
        out += "sigma_noise " + format_double(ml.hyper.sigma_noise) + '\n';
        write_vector(out, "lengthscales", ml.hyper.lengthscales);
        write_vector(out, "spectral_mean", ml.hyper.spectral_mean);
        write_matrix(out, "shifts", ml.hyper.shifts);
        write_vector(out, "phases", ml.hyper.phases);
        if (model.mode == SpectralMode::kFixed) {
            write_matrix(out, "points", ml.points.Z);
        } else {
            write_matrix(out, "spectral_means", ml.var.spectral_means);
            write_matrix(out, "spectral_vars", ml.var.spectral_vars);
        }
        write_vector(out, "weight_mean", ml.var.weight_mean);
        write_matrix(out, "weight_cov", ml.var.weight_cov);
        write_vector(out, "latent_means", ml.var.latent_means);
        write_vector(out, "latent_vars", ml.var.latent_vars);
    }
    out += "end\n";
    return out;
}

DeepModel model_from_text(const std::string& text) {
    TokenReader reader(text);
    reader.expect("drgp-model");
    const Index version = reader.integer("format version");
    if (version != kModelFormatVersion)
        fail("model file: unsupported format version " + std::to_string(version));

    DeepModel model;
    reader.expect("mode");
    const std::string mode = reader.next("mode value");
    if (mode == "fixed")
        model.mode = SpectralMode::kFixed;
    else if (mode == "variational")
        model.mode = SpectralMode::kVariational;
    else
        fail("model file: unknown mode '" + mode + "'");

    reader.expect("states");
    model.num_states = reader.integer("states");
    reader.expect("latent_horizon");
    model.latent_horizon = reader.integer("latent_horizon");
    reader.expect("exo_horizon");
    model.exo_horizon = reader.integer("exo_horizon");
    reader.expect("exo_dim");
    model.exo_dim = reader.integer("exo_dim");
    reader.expect("layers");
    const Index num_layers = reader.integer("layers");
    if (num_layers < 1) fail("model file: layer count must be positive");

    model.layers.resize(static_cast<std::size_t>(num_layers));
    for (Index l = 0; l < num_layers; ++l) {
        ModelLayer& ml = model.layers[static_cast<std::size_t>(l)];
        reader.expect("layer");
        const Index label = reader.integer("layer label");
        if (label != l) fail("model file: layer " + std::to_string(l) + " out of order");
        reader.expect("features");
        ml.hyper.num_features = reader.integer("features");
        reader.expect("sigma_power");
        ml.hyper.sigma_power = reader.number("sigma_power");
        reader.expect("sigma_noise");
        ml.hyper.sigma_noise = reader.number("sigma_noise");
        ml.hyper.lengthscales = read_sized_vector(reader, "lengthscales");
        ml.hyper.spectral_mean = read_sized_vector(reader, "spectral_mean");
        ml.hyper.shifts = read_sized_matrix(reader, "shifts");
        ml.hyper.phases = read_sized_vector(reader, "phases");
        if (model.mode == SpectralMode::kFixed) {
            ml.points.Z = read_sized_matrix(reader, "points");
        } else {
            ml.var.spectral_means = read_sized_matrix(reader, "spectral_means");
            ml.var.spectral_vars = read_sized_matrix(reader, "spectral_vars");
        }
        ml.var.weight_mean = read_sized_vector(reader, "weight_mean");
        ml.var.weight_cov = read_sized_matrix(reader, "weight_cov");
        ml.var.latent_means = read_sized_vector(reader, "latent_means");
        ml.var.latent_vars = read_sized_vector(reader, "latent_vars");
    }
    reader.expect("end");
    if (!reader.at_end()) fail("model file: trailing content after 'end'");
    model.validate();
    return model;
}

void save_model(const std::string& path, const DeepModel& model) {
    write_text_file(path, model_to_text(model));
}

DeepModel load_model(const std::string& path) {
    const std::string text = read_text_file(path);
    try {
        return model_from_text(text);
    } catch (const std::runtime_error& error) {
        fail(path + ": " + error.what());
    }
}

std::string read_text_file(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) fail("cannot open file: " + path);
    std::ostringstream buffer;
    buffer << in.rdbuf();
    if (in.bad()) fail("cannot read file: " + path);
    return buffer.str();
}

void write_text_file(const std::string& path, const std::string& content) {
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) fail("cannot create file: " + path);
    out << content;
    out.flush();
    if (!out) fail("cannot write file: " + path);
}

}  // namespace drgp
