//
//  experiment.cpp
//
//  Distributed under the Apache License, Version 2.0.
//  See the accompanying file LICENSE or http://www.apache.org/licenses/LICENSE-2.0.html
//

#include "drgp/experiment.hpp"

#include <atomic>
#include <chrono>
#include <cmath>
#include <cstdlib>
#include <exception>
#include <filesystem>
#include <string>
#include <thread>
#include <vector>

#include "drgp/svg.hpp"
#include "json.hpp"

namespace drgp {

namespace {

constexpr int kManifestVersion = 1;
constexpr int kModelVersion = 1;

// Sample paths averaged for the empirical objective when the sweep runs
// the empirical bound.
constexpr Index kQuasiRealPaths = 8;

using OrderedJson = nlohmann::ordered_json;

double evaluate_bound(const BoundInputs& inputs, double objective, BoundKind kind,
                      double tau, Index n) {
    switch (kind) {
        case BoundKind::kEmpirical:
            return empirical_risk_bound(inputs, objective, tau, n);
        case BoundKind::kGap:
            return consistency_gap_bound(inputs, tau, n);
        case BoundKind::kOracle:
            return oracle_risk_bound(inputs, tau, n);
    }
    throw std::logic_error("evaluate_bound: unreachable");
}

}  // namespace

LambdaRule lambda_rule_for(BoundKind kind) {
    return kind == BoundKind::kEmpirical ? LambdaRule::kN : LambdaRule::kSqrtN;
}

std::string bound_kind_name(BoundKind kind) {
    switch (kind) {
        case BoundKind::kEmpirical: return "empirical";
        case BoundKind::kGap: return "gap";
        case BoundKind::kOracle: return "oracle";
    }
    throw std::logic_error("bound_kind_name: unreachable");
}

std::string lambda_rule_name(LambdaRule rule) {
    return rule == LambdaRule::kN ? "N" : "sqrtN";
}

BoundKind parse_bound_kind(const std::string& name) {
    if (name == "empirical") return BoundKind::kEmpirical;
    if (name == "gap") return BoundKind::kGap;
    if (name == "oracle") return BoundKind::kOracle;
    throw std::invalid_argument("unknown bound kind '" + name +
                                "' (expected empirical, gap or oracle)");
}

LambdaRule parse_lambda_rule(const std::string& name) {
    if (name == "N") return LambdaRule::kN;
    if (name == "sqrtN") return LambdaRule::kSqrtN;
    throw std::invalid_argument("unknown lambda rule '" + name +
                                "' (expected N or sqrtN)");
}

void ExperimentConfig::validate() const {
    require(!dataset_path.empty(), "experiment config: dataset path required");
    require(depth >= 1, "experiment config: depth must be at least 1");
    require(num_features >= 1, "experiment config: need at least one feature");
    require(latent_horizon >= 1, "experiment config: latent horizon must be at least 1");
    require(exo_horizon >= 1, "experiment config: drive horizon must be at least 1");
    require(tau > 0.0 && tau <= 1.0, "experiment config: tau must lie in (0, 1]");
    require(n_max >= 1, "experiment config: n_max must be at least 1");
    require(grid_points >= 2, "experiment config: need at least two grid points");
    require(train.iterations >= 1, "experiment config: need at least one iteration");
    require(lambda_rule == lambda_rule_for(bound),
            "experiment config: the " + bound_kind_name(bound) + " bound runs at lambda = " +
                lambda_rule_name(lambda_rule_for(bound)));
}

std::vector<Index> log_spaced_grid(Index n_max, Index count) {
    require(n_max >= 1, "log_spaced_grid: n_max must be at least 1");
    require(count >= 2, "log_spaced_grid: need at least two points");
    std::vector<Index> grid;
    grid.reserve(static_cast<std::size_t>(count));
    const double top = std::log10(static_cast<double>(n_max));
    for (Index i = 0; i < count; ++i) {
        const double exponent = top * static_cast<double>(i) / static_cast<double>(count - 1);
        const Index value = static_cast<Index>(std::llround(std::pow(10.0, exponent)));
        const Index clamped = std::min(std::max<Index>(value, 1), n_max);
        if (grid.empty() || clamped != grid.back()) grid.push_back(clamped);
    }
    return grid;
}

BoundCurve evaluate_curve(const BoundInputs& inputs, double objective, BoundKind kind,
                          double tau, const std::vector<Index>& grid) {
    inputs.validate();
    require(!grid.empty(), "evaluate_curve: empty grid");
    for (const Index n : grid) require(n >= 1, "evaluate_curve: grid points must be >= 1");

    BoundCurve curve;
    curve.records.resize(grid.size());

    const unsigned hardware = std::max(1u, std::thread::hardware_concurrency());
    const unsigned workers =
        std::min({hardware, 8u, static_cast<unsigned>(grid.size())});

    std::atomic<std::size_t> cursor{0};
    std::atomic<bool> failed{false};
    std::exception_ptr first_error;
    std::mutex error_lock;

    const auto run = [&]() {
        while (!failed.load(std::memory_order_relaxed)) {
            const std::size_t i = cursor.fetch_add(1);
            if (i >= grid.size()) return;
            try {
                const Index n = grid[i];
                const double lambda = kind == BoundKind::kEmpirical
                                          ? static_cast<double>(n)
                                          : std::sqrt(static_cast<double>(n));
                const auto start = std::chrono::steady_clock::now();
                const RateTerms terms = capital_L_terms(inputs, lambda, n);
                const double value = evaluate_bound(inputs, objective, kind, tau, n);
                const auto stop = std::chrono::steady_clock::now();

                CurveRecord& record = curve.records[i];
                record.n = n;
                record.term1 = terms.variance_row;
                record.term2 = terms.logdet_row;
                record.term3 = terms.smoothness_row;
                record.kl = inputs.kl;
                record.bound = value;
                record.wall_ms =
                    std::chrono::duration<double, std::milli>(stop - start).count();
                if (!std::isfinite(value)) {
                    throw std::runtime_error(
                        "bound curve: non-finite value at N=" + std::to_string(n) +
                        " (variance row " + format_double(record.term1) +
                        ", determinant row " + format_double(record.term2) +
                        ", smoothness row " + format_double(record.term3) + ", kl " +
                        format_double(record.kl) + ")");
                }
            } catch (...) {
                const std::lock_guard<std::mutex> guard(error_lock);
                if (!first_error) first_error = std::current_exception();
                failed.store(true, std::memory_order_relaxed);
                return;
            }
        }
    };

    if (workers <= 1) {
        run();
    } else {
        std::vector<std::thread> pool;
        pool.reserve(workers);
        for (unsigned w = 0; w < workers; ++w) pool.emplace_back(run);
        for (auto& thread : pool) thread.join();
    }
    if (first_error) std::rethrow_exception(first_error);
    return curve;
}

std::string curve_to_csv(const BoundCurve& curve) {
    std::string out = "N,bound,term1,term2,term3,kl,wall_ms\n";
    for (const CurveRecord& record : curve.records) {
        out += std::to_string(record.n);
        out += ',';
        out += format_double(record.bound);
        out += ',';
        out += format_double(record.term1);
        out += ',';
        out += format_double(record.term2);
        out += ',';
        out += format_double(record.term3);
        out += ',';
        out += format_double(record.kl);
        out += ',';
        out += format_double(record.wall_ms);
        out += '\n';
    }
    return out;
}

RunArtifacts run_bound_evolution(const ExperimentConfig& config) {
    config.validate();

    std::string output_dir = config.output_dir;
    if (const char* override_dir = std::getenv("DRGP_OUTPUT_DIR");
        override_dir != nullptr && override_dir[0] != '\0') {
        output_dir = override_dir;
    }
    std::filesystem::create_directories(output_dir);
    const auto file_in_dir = [&](const char* name) {
        return (std::filesystem::path(output_dir) / name).string();
    };

    const TimeSeries series = load_series(config.dataset_path);
    Dataset data = series.data;
    normalize_dataset(data);

    RunArtifacts artifacts;
    artifacts.output_dir = output_dir;
    if (!config.model_path.empty()) {
        artifacts.model = load_model(config.model_path);
        require(artifacts.model.num_states == data.outputs.size(),
                "run_bound_evolution: model state count does not match the dataset");
    } else {
        const DeepModel initial = make_initial_model(
            data.outputs.size(), config.depth, config.num_features, config.latent_horizon,
            config.exo_horizon, data.exogenous.cols(), config.mode, data, config.seed);
        artifacts.model = train(initial, data, config.train).model;
    }

    // The empirical bound consumes an objective estimated on quasi-real
    // sample paths; the gap and oracle bounds are sample-free and use the
    // training objective for the record only.
    if (config.bound == BoundKind::kEmpirical) {
        const Matrix paths =
            generate_quasi_real(artifacts.model, data, kQuasiRealPaths, config.seed + 1);
        double total = 0.0;
        Dataset quasi = data;
        for (Index s = 0; s < paths.cols(); ++s) {
            quasi.outputs = paths.col(s);
            total += variational_bound(artifacts.model, quasi).bound;
        }
        artifacts.objective = total / static_cast<double>(paths.cols());
    } else {
        artifacts.objective = variational_bound(artifacts.model, data).bound;
    }

    const BoundInputs inputs =
        bound_inputs_from_model(artifacts.model, data, BoundConfig{config.tau, {}});
    const std::vector<Index> grid = log_spaced_grid(config.n_max, config.grid_points);
    artifacts.curve =
        evaluate_curve(inputs, artifacts.objective, config.bound, config.tau, grid);

    artifacts.model_file = file_in_dir("model.txt");
    save_model(artifacts.model_file, artifacts.model);
    artifacts.csv_file = file_in_dir("bound_curve.csv");
    write_text_file(artifacts.csv_file, curve_to_csv(artifacts.curve));

    std::vector<double> xs, ys;
    xs.reserve(artifacts.curve.records.size());
    ys.reserve(artifacts.curve.records.size());
    bool positive = true;
    for (const CurveRecord& record : artifacts.curve.records) {
        xs.push_back(static_cast<double>(record.n));
        ys.push_back(record.bound);
        positive = positive && record.bound > 0.0;
    }
    PlotOptions linear;
    linear.title = bound_kind_name(config.bound) + " bound over the sample count";
    linear.x_label = "N";
    linear.y_label = "bound";
    artifacts.svg_linear_file = file_in_dir("bound_curve_linear.svg");
    write_text_file(artifacts.svg_linear_file, line_plot_svg(xs, ys, linear));
    if (positive) {
        PlotOptions loglog = linear;
        loglog.log_x = true;
        loglog.log_y = true;
        artifacts.svg_loglog_file = file_in_dir("bound_curve_loglog.svg");
        write_text_file(artifacts.svg_loglog_file, line_plot_svg(xs, ys, loglog));
    }

    OrderedJson manifest;
    manifest["manifest_version"] = kManifestVersion;
    manifest["model_format_version"] = kModelVersion;
    manifest["config"] = OrderedJson{
        {"dataset_path", config.dataset_path},
        {"mode", config.mode == SpectralMode::kFixed ? "fixed" : "variational"},
        {"depth", config.depth},
        {"num_features", config.num_features},
        {"latent_horizon", config.latent_horizon},
        {"exo_horizon", config.exo_horizon},
        {"iterations", config.train.iterations},
        {"learning_rate", config.train.learning_rate},
        {"refresh_every", config.train.refresh_every},
        {"tau", config.tau},
        {"bound", bound_kind_name(config.bound)},
        {"lambda_rule", lambda_rule_name(config.lambda_rule)},
        {"n_max", config.n_max},
        {"grid_points", config.grid_points},
        {"seed", config.seed},
        {"model_path", config.model_path},
    };
    manifest["objective"] = artifacts.objective;
    manifest["outputs"] = OrderedJson{
        {"model", "model.txt"},
        {"csv", "bound_curve.csv"},
        {"svg_linear", "bound_curve_linear.svg"},
        {"svg_loglog", positive ? "bound_curve_loglog.svg" : ""},
    };
    artifacts.manifest_file = file_in_dir("manifest.json");
    write_text_file(artifacts.manifest_file, manifest.dump(2) + "\n");
    return artifacts;
}

}  // namespace drgp
