#pragma once

// Optimal transport between uniform empirical measures under squared-Euclidean
// cost: an entropic approximation used as the imbalance penalty, and an exact
// assignment solver for small sets.

#include <vector>

#include <Eigen/Dense>

namespace tte::cfr {

using Eigen::MatrixXd;

struct SinkhornOptions {
    double lambda = 50.0;     // final entropic strength: epsilon = mean(C) / lambda
    double tolerance = 1e-3;  // L1 row-marginal error ending the final stage (10x looser before)
    int max_sweeps = 1000;    // per stage
};

// Rows are points.
struct TransportGradient {
    double distance = 0.0;
    MatrixXd grad_a;
    MatrixXd grad_b;
};

// Debiased entropic transport cost S(A,B) = c(A,B) - c(A,A)/2 - c(B,B)/2, where
// c is the squared-Euclidean cost of the entropic plan. Symmetric, and exactly
// zero for A = B.
double wasserstein_approx(const MatrixXd& a, const MatrixXd& b, const SinkhornOptions& options = {});

// Same value plus its gradient with the transport plans held fixed.
TransportGradient wasserstein_gradient(const MatrixXd& a, const MatrixXd& b, const SinkhornOptions& options = {});

// Exact optimal cost by assignment over lcm(|A|,|B|) equal-mass atoms.
// Requires |A| * |B| <= 64.
double wasserstein_exact(const MatrixXd& a, const MatrixXd& b);

// Minimum-cost perfect matching of a square cost matrix; returns the column
// assigned to each row.
std::vector<int> hungarian(const MatrixXd& cost);

}  // namespace tte::cfr
