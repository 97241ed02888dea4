#pragma once

#include <optional>
#include <span>
#include <string>
#include <vector>

#include <Eigen/Dense>

namespace tte {

// Complete-case design data handed to the estimators: covariates X (n x d),
// binary treatment t, factual outcome y. When the data are synthetic the
// potential outcomes travel along for oracle metrics.
struct Dataset {
    Eigen::MatrixXd x;
    Eigen::VectorXd t;
    Eigen::VectorXd y;
    std::vector<std::string> names;
    std::optional<Eigen::VectorXd> y1;
    std::optional<Eigen::VectorXd> y0;

    Eigen::Index rows() const { return x.rows(); }
    Eigen::Index cols() const { return x.cols(); }
    std::size_t treated() const;

    // Rows in the given order; repeated indices are repeated rows.
    Dataset subset(std::span<const std::size_t> rows) const;
};

}  // namespace tte
