#pragma once

// Bayesian additive regression trees: backfitting MCMC over a sum of trees.
// The treatment indicator is appended to X as the last covariate.

#include <cstdint>
#include <span>
#include <vector>

#include <Eigen/Dense>

#include "tte/linprop.hpp"

namespace tte::bart {

using Eigen::MatrixXd;
using Eigen::VectorXd;

struct BartConfig {
    int trees = 50;
    double k = 2.0;
    double nu = 3.0;
    double q = 0.9;
    double alpha = 0.95;  // tree prior: split probability alpha (1 + depth)^-beta
    double beta = 2.0;
    int burn_in = 250;
    int draws = 1000;
    std::uint64_t seed = 0;

    void validate() const;  // throws ConfigError
};

// Flattened tree; node 0 is the root. Internal nodes send x[var] < value left.
struct TreeNode {
    int var = -1;  // -1 marks a leaf
    int left = -1;
    int right = -1;
    double value = 0.0;  // split value, or leaf mean on the scaled outcome
};

struct RegressionTree {
    std::vector<TreeNode> nodes;

    // Leaf value for one row of the augmented covariates [x, t].
    double evaluate(std::span<const double> row) const;
    std::size_t leaves() const;
};

struct BartDraw {
    std::vector<RegressionTree> trees;
    double sigma = 0.0;  // outcome units
};

struct BartPosterior {
    std::vector<BartDraw> draws;
    double shift = 0.0;  // y = (scaled + 0.5) * scale + shift
    double scale = 1.0;
    Eigen::Index covariates = 0;  // without the treatment column
    BartConfig config;

    // Sum of the tree values of one draw, on the scaled outcome.
    double draw_sum(std::size_t draw, std::span<const double> row) const;
    double unscale(double scaled) const { return (scaled + 0.5) * scale + shift; }
};

BartPosterior bart_fit(const MatrixXd& x, const VectorXd& t, const VectorXd& y, const BartConfig& config = {});

// Posterior mean of g(x, t) in outcome units.
VectorXd bart_predict(const BartPosterior& posterior, const MatrixXd& x, const VectorXd& t);

VectorXd bart_cate(const BartPosterior& posterior, const MatrixXd& x);

linprop::AteEstimate bart_ate(const BartPosterior& posterior, const MatrixXd& x_test);

// Grid point with the lowest mean held-out factual RMSE; ties go to the earlier
// point. Points whose fits fail are skipped.
BartConfig bart_cv_select(const MatrixXd& x, const VectorXd& t, const VectorXd& y, std::span<const BartConfig> grid,
                          int folds = 5, std::uint64_t seed = 0);

}  // namespace tte::bart
