#pragma once

// Classical estimators: least squares, logistic propensity model, clipping,
// inverse-probability-weighted regression, blocking, balance diagnostics.

#include <optional>
#include <span>
#include <string>
#include <vector>

#include <Eigen/Dense>

namespace tte::linprop {

using Eigen::MatrixXd;
using Eigen::VectorXd;

// Fit of y = intercept + treatment * t + coefficients . x
struct OlsFit {
    double intercept = 0.0;
    double treatment = 0.0;
    VectorXd coefficients;
    double residual_variance = 0.0;

    VectorXd predict(const MatrixXd& x, const VectorXd& t) const;
};

struct AteEstimate {
    double value = 0.0;
    std::string method;
};

// Weighted least squares on the design [1, t, X]. Throws RankDeficientError
// naming the collinear columns; there is no ridge fallback.
OlsFit fit_ols(const MatrixXd& x, const VectorXd& t, const VectorXd& y, const VectorXd* weights = nullptr,
               std::span<const std::string> names = {});

AteEstimate ols_ate(const OlsFit& fit);

enum class FeatureMode { confounder_subset, all_covariates, all_with_interactions };

std::string_view to_string(FeatureMode mode);
FeatureMode feature_mode_from_string(std::string_view text);

struct PropensityOptions {
    FeatureMode mode = FeatureMode::all_covariates;
    std::vector<std::size_t> confounders;  // column indices, confounder_subset only
    int max_iterations = 100;
    double tolerance = 1e-8;  // relative change of the log-likelihood
};

struct PropensityModel {
    VectorXd coefficients;  // on standardized features, intercept first
    FeatureMode mode = FeatureMode::all_covariates;
    std::vector<std::size_t> confounders;
    VectorXd feature_mean;
    VectorXd feature_scale;
    double weight_control = 1.0;
    double weight_treated = 1.0;
    int iterations = 0;
    std::vector<double> log_likelihood;  // weighted, one entry per accepted iterate

    VectorXd predict(const MatrixXd& x) const;
};

// Feature matrix for a mode, without the intercept column.
MatrixXd propensity_features(const MatrixXd& x, FeatureMode mode, std::span<const std::size_t> confounders = {});

// Unpenalised logistic regression by iteratively reweighted least squares with
// class weights n / (2 n_c). Throws SeparationError when the coefficients diverge.
PropensityModel fit_propensity(const MatrixXd& x, const VectorXd& t, const PropensityOptions& options = {});

struct PropensityScores {
    VectorXd values;
    double floor = 0.1;
    std::optional<double> ceiling;
    std::size_t clipped = 0;
};

// Lower-only clip by default.
PropensityScores clip_scores(const VectorXd& scores, double floor = 0.1, std::optional<double> ceiling = std::nullopt);

// [e^t (1-e)^(1-t)]^-1
double ipw_weight(double e, double t);

AteEstimate dr_ipw_ate(const MatrixXd& x, const VectorXd& t, const VectorXd& y, const PropensityScores& scores);
OlsFit dr_ipw_fit(const MatrixXd& x, const VectorXd& t, const VectorXd& y, const PropensityScores& scores);

struct Block {
    double lower = 0.0;  // smallest score in the block
    double upper = 0.0;  // largest score in the block
    std::vector<std::size_t> rows;
    OlsFit fit;
    std::vector<std::size_t> kept_columns;  // covariates not constant inside the block
};

struct Blocking {
    std::vector<Block> blocks;
    double ate = 0.0;

    // Block whose score range is nearest to e.
    const Block& block_for(double e) const;
    VectorXd predict(const MatrixXd& x, const VectorXd& t, const VectorXd& scores) const;
};

// Quantile blocks of the scores; blocks lacking an arm (or too small for their
// regression) merge into the adjacent block with the closer mean score.
Blocking fit_blocking(const MatrixXd& x, const VectorXd& t, const VectorXd& y, const PropensityScores& scores,
                      int n_blocks = 5);

AteEstimate blocking_ate(const MatrixXd& x, const VectorXd& t, const VectorXd& y, const PropensityScores& scores,
                         int n_blocks = 5);

// Size-weighted mean of per-block effects.
double combine_block_effects(std::span<const double> effects, std::span<const std::size_t> sizes);

// (mean_treated - mean_control) / sqrt((var_treated + var_control) / 2) per column.
VectorXd normalized_mean_difference(const MatrixXd& x, const VectorXd& t);
double normalized_mean_difference(double mean_treated, double sd_treated, double mean_control, double sd_control);

// Same statistic with per-row weights (e.g. inverse-probability weights):
// weighted arm means and weighted (biased) arm variances.
VectorXd weighted_normalized_mean_difference(const MatrixXd& x, const VectorXd& t, const VectorXd& w);

struct OverlapHistogram {
    int bins = 20;
    std::vector<std::size_t> control;
    std::vector<std::size_t> treated;
};

OverlapHistogram overlap_histogram(const VectorXd& scores, const VectorXd& t, int bins = 20);

}  // namespace tte::linprop
