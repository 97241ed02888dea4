#pragma once

// Data-generating processes with known potential outcomes.

#include <cstdint>
#include <string_view>

#include <Eigen/Dense>

#include "tte/cohort.hpp"
#include "tte/dataset.hpp"

namespace tte::synthetic {

enum class DgpKind { linear_confounded, nonlinear, null_effect };

std::string_view to_string(DgpKind kind);
DgpKind dgp_kind_from_string(std::string_view text);

struct DgpSpec {
    DgpKind kind = DgpKind::linear_confounded;
    int d = 10;
    int n = 2000;
    double tau = 10.0;    // constant part of the effect; forced to 0 for null_effect
    double gamma = 1.0;   // confounding strength
    double sigma = 1.0;   // outcome noise sd
    double effect_slope = 0.0;  // y1 - y0 = tau + effect_slope * x1
    std::uint64_t seed = 0;

    void validate() const;  // throws ConfigError
};

// Potential outcomes travel in data.y1 / data.y0.
struct SyntheticTable {
    Dataset data;
    Eigen::VectorXd e_true;
};

SyntheticTable generate(const DgpSpec& spec);
SyntheticTable generate(const DgpSpec& spec, std::uint64_t seed);

double true_ate(const Dataset& table);
double epsilon_ate(double estimate, const Dataset& table);
// Mean squared error against the per-row effects y1 - y0.
double epsilon_cate(const Eigen::VectorXd& tau_hat, const Dataset& table);

// Rows become observations with both outcome windows set to the factual y.
cohort::Cohort to_cohort(const SyntheticTable& table);

}  // namespace tte::synthetic
