//
//  experiment.hpp
//
//  Distributed under the Apache License, Version 2.0.
//  See the accompanying file LICENSE or http://www.apache.org/licenses/LICENSE-2.0.html
//

#pragma once

#include <string>
#include <vector>

#include "drgp/bounds.hpp"
#include "drgp/io.hpp"
#include "drgp/model.hpp"

namespace drgp {

// Which high-probability bound the sweep evaluates at each grid point.
enum class BoundKind { kEmpirical, kGap, kOracle };

// Inverse temperature rule; each bound comes with the rule its statement
// fixes, so a mismatched pair is a configuration error.
enum class LambdaRule { kN, kSqrtN };

LambdaRule lambda_rule_for(BoundKind kind);
std::string bound_kind_name(BoundKind kind);
std::string lambda_rule_name(LambdaRule rule);
BoundKind parse_bound_kind(const std::string& name);
LambdaRule parse_lambda_rule(const std::string& name);

// Everything one end-to-end sweep needs. The struct is plain data so runs
// are reproducible from the manifest alone.
struct ExperimentConfig {
    std::string dataset_path;
    SpectralMode mode = SpectralMode::kVariational;
    Index depth = 1;           // hidden layers
    Index num_features = 16;   // trigonometric features per layer
    Index latent_horizon = 1;  // autoregressive lags on hidden states
    Index exo_horizon = 1;     // lags on the drive signal
    TrainConfig train;
    double tau = 0.5;
    BoundKind bound = BoundKind::kGap;
    LambdaRule lambda_rule = LambdaRule::kSqrtN;
    Index n_max = 50000;
    Index grid_points = 60;
    unsigned seed = 1;
    std::string output_dir = "out";
    std::string model_path;  // loads this model instead of training when nonempty

    void validate() const;
};

// One sweep sample: the bound value at sample count n with the three rate
// rows behind it, the posterior KL and the evaluation wall time.
struct CurveRecord {
    Index n = 0;
    double bound = 0.0;
    double term1 = 0.0;  // variance row of the rate function
    double term2 = 0.0;  // determinant row
    double term3 = 0.0;  // smoothness row
    double kl = 0.0;
    double wall_ms = 0.0;
};

struct BoundCurve {
    std::vector<CurveRecord> records;
};

// Log-spaced integer grid from 1 to n_max inclusive, duplicates removed.
std::vector<Index> log_spaced_grid(Index n_max, Index count);

// Evaluates the chosen bound at every grid point on a bounded worker pool
// over the immutable inputs. The objective feeds the empirical bound only.
// A non-finite value aborts with the offending grid point and its term
// breakdown.
BoundCurve evaluate_curve(const BoundInputs& inputs, double objective, BoundKind kind,
                          double tau, const std::vector<Index>& grid);

// CSV document with header "N,bound,term1,term2,term3,kl,wall_ms". The
// column set is append-only: new columns may follow wall_ms, existing ones
// never move.
std::string curve_to_csv(const BoundCurve& curve);

// Files written by one sweep, plus the trained model and the curve itself.
struct RunArtifacts {
    DeepModel model;
    BoundCurve curve;
    double objective = 0.0;
    std::string output_dir;
    std::string model_file;
    std::string csv_file;
    std::string svg_linear_file;
    std::string svg_loglog_file;  // empty when the curve has nonpositive values
    std::string manifest_file;
};

// Full pipeline: load the series, z-score it, train (or load the model
// named by the config), sweep the configured bound over the grid, and
// write the CSV, both SVG scales, the model document and a JSON manifest
// into the output directory. The DRGP_OUTPUT_DIR environment variable
// overrides config.output_dir when set and nonempty.
RunArtifacts run_bound_evolution(const ExperimentConfig& config);

}  // namespace drgp
