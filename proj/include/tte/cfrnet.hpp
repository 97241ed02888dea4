#pragma once

// Counterfactual regression (CfR) and TARNet: a shared representation Phi with
// unit-norm output feeding two outcome heads, trained on a weighted factual loss
// plus an optional transport imbalance penalty (alpha = 0 gives TARNet).

#include <cstdint>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "tte/dataset.hpp"
#include "tte/linprop.hpp"
#include "tte/transport.hpp"

namespace tte::cfr {

using Eigen::VectorXd;

struct CfrConfig {
    int rep_layers = 3;
    int rep_width = 200;
    int head_layers = 3;
    int head_width = 100;
    double alpha = 1.0;    // imbalance penalty weight
    double lambda = 1e-4;  // squared-norm decay on head parameters
    double learning_rate = 1e-3;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double adam_epsilon = 1e-8;
    int batch_size = 128;
    int patience = 10;
    int max_epochs = 300;
    std::uint64_t seed = 0;
    SinkhornOptions sinkhorn;

    static CfrConfig tarnet();
    void validate() const;  // throws ConfigError
};

// Offsets of one dense layer (out x in weights, then out biases) in the flat
// parameter vector.
struct LayerShape {
    std::size_t weights = 0;
    std::size_t bias = 0;
    int in = 0;
    int out = 0;
};

struct CfrModel {
    std::vector<LayerShape> rep;
    std::vector<LayerShape> head0;
    std::vector<LayerShape> head1;  // each head ends with a linear 1-unit layer
    VectorXd params;
    std::size_t head_begin = 0;  // head parameters occupy [head_begin, params.size())

    // Standardisation applied before the network; outcomes are modelled in
    // standardised units.
    VectorXd x_mean;
    VectorXd x_scale;
    double y_mean = 0.0;
    double y_scale = 1.0;
    double treated_fraction = 0.5;  // u in the sample weights

    Eigen::Index inputs() const { return x_mean.size(); }
};

// Architecture with N(0, 1/fan_in) weights and zero biases; identity standardisation.
CfrModel init_model(int inputs, const CfrConfig& config, std::uint64_t seed);

// 1/2 (t/u + (1-t)/(1-u))
double sample_weight(double t, double u);

struct LossParts {
    double factual = 0.0;
    double regularization = 0.0;
    double imbalance = 0.0;
    double total = 0.0;
    bool penalty_skipped = false;  // single-arm batch with alpha > 0
};

LossParts cfr_loss(const CfrModel& model, const Dataset& batch, const CfrConfig& config);

// Loss and its gradient with respect to model.params.
LossParts cfr_loss_gradient(const CfrModel& model, const Dataset& batch, const CfrConfig& config, VectorXd& gradient);

// Unit-norm representation, one row per input row.
Eigen::MatrixXd representation(const CfrModel& model, const Eigen::MatrixXd& x);

struct TrainTrace {
    std::vector<double> objective;   // mean training batch loss per epoch
    std::vector<double> validation;  // surrogate validation loss per epoch
    int best_epoch = 0;              // 1-based
    int stop_epoch = 0;
    std::size_t skipped_penalties = 0;
};

struct TrainResult {
    CfrModel model;
    TrainTrace trace;
};

TrainResult cfr_train(const Dataset& train, const Dataset& validation, const CfrConfig& config);

// Factual-style prediction in outcome units.
VectorXd cfr_predict(const CfrModel& model, const Eigen::MatrixXd& x, const VectorXd& t);
VectorXd cfr_cate(const CfrModel& model, const Eigen::MatrixXd& x);
linprop::AteEstimate cfr_ate(const CfrModel& model, const Eigen::MatrixXd& x_test, const CfrConfig& config);

// Max relative error |a - n| / max(|a|, |n|, 1e-6) between analytic and central
// finite-difference gradients over a seeded sample of parameter coordinates,
// with alpha forced to 0.
double gradient_check(const CfrModel& model, const Dataset& batch, const CfrConfig& config, std::uint64_t seed = 0,
                      int coordinates = 400);

void write_trace(std::ostream& out, const TrainTrace& trace);

}  // namespace tte::cfr
