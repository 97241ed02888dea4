#include "tte/cfrnet.hpp"

#include <cmath>
#include <iostream>
#include <limits>
#include <numeric>
#include <ostream>
#include <random>

#include "tte/csv.hpp"
#include "tte/error.hpp"
#include "tte/rng.hpp"

namespace tte::cfr {

using Eigen::MatrixXd;

CfrConfig CfrConfig::tarnet() {
    CfrConfig c;
    c.alpha = 0.0;
    return c;
}

void CfrConfig::validate() const {
    if (rep_layers < 1 || head_layers < 1) throw ConfigError("cfr: need at least one representation and one head layer");
    if (rep_width < 1 || head_width < 1) throw ConfigError("cfr: layer widths must be positive");
    if (!(alpha >= 0.0)) throw ConfigError("cfr: alpha must be nonnegative");
    if (!(lambda >= 0.0)) throw ConfigError("cfr: lambda must be nonnegative");
    if (!(learning_rate > 0.0)) throw ConfigError("cfr: learning rate must be positive");
    if (!(beta1 >= 0.0 && beta1 < 1.0 && beta2 >= 0.0 && beta2 < 1.0)) throw ConfigError("cfr: moment decays must lie in [0,1)");
    if (batch_size < 1) throw ConfigError("cfr: batch size must be positive");
    if (patience < 1) throw ConfigError("cfr: patience must be positive");
    if (max_epochs < 1) throw ConfigError("cfr: max_epochs must be positive");
}

double sample_weight(double t, double u) {
    if (!(u > 0.0 && u < 1.0)) throw FitError("cfr: treated fraction must lie strictly inside (0,1)");
    return 0.5 * (t / u + (1.0 - t) / (1.0 - u));
}

namespace {

std::vector<LayerShape> stack(std::size_t& offset, int in, int width, int layers, bool linear_output) {
    std::vector<LayerShape> out;
    for (int l = 0; l < layers; ++l) {
        LayerShape s{offset, 0, in, width};
        offset += static_cast<std::size_t>(in) * static_cast<std::size_t>(width);
        s.bias = offset;
        offset += static_cast<std::size_t>(width);
        out.push_back(s);
        in = width;
    }
    if (linear_output) {
        LayerShape s{offset, 0, in, 1};
        offset += static_cast<std::size_t>(in);
        s.bias = offset;
        offset += 1;
        out.push_back(s);
    }
    return out;
}

Eigen::Map<const MatrixXd> weights(const VectorXd& p, const LayerShape& s) {
    return {p.data() + s.weights, s.out, s.in};
}
Eigen::Map<const VectorXd> bias(const VectorXd& p, const LayerShape& s) { return {p.data() + s.bias, s.out}; }
Eigen::Map<MatrixXd> weights(VectorXd& p, const LayerShape& s) { return {p.data() + s.weights, s.out, s.in}; }
Eigen::Map<VectorXd> bias(VectorXd& p, const LayerShape& s) { return {p.data() + s.bias, s.out}; }

MatrixXd elu(const MatrixXd& z) {
    return z.unaryExpr([](double v) { return v > 0.0 ? v : std::expm1(v); });
}
MatrixXd elu_grad(const MatrixXd& z) {
    return z.unaryExpr([](double v) { return v > 0.0 ? 1.0 : std::exp(v); });
}

// Columns are samples.
MatrixXd standardize(const CfrModel& model, const MatrixXd& x) {
    if (x.cols() != model.inputs()) throw FitError("cfr: covariate count differs from the model");
    return ((x.rowwise() - model.x_mean.transpose()).array().rowwise() / model.x_scale.transpose().array()).matrix().transpose();
}

struct StackCache {
    std::vector<MatrixXd> z;
    std::vector<MatrixXd> a;  // a[0] is the input
};

MatrixXd forward(const VectorXd& p, const std::vector<LayerShape>& layers, MatrixXd input, StackCache* cache,
                 bool linear_last) {
    if (cache) cache->a.push_back(input);
    for (std::size_t l = 0; l < layers.size(); ++l) {
        MatrixXd z = weights(p, layers[l]) * input;
        z.colwise() += bias(p, layers[l]);
        const bool linear = linear_last && l + 1 == layers.size();
        input = linear ? z : elu(z);
        if (cache) {
            cache->z.push_back(std::move(z));
            if (l + 1 < layers.size()) cache->a.push_back(input);
        }
    }
    return input;
}

// Backpropagates d(output) through a stack; accumulates parameter gradients
// and returns d(input).
MatrixXd backward(const VectorXd& p, const std::vector<LayerShape>& layers, const StackCache& cache, MatrixXd d_out,
                  bool linear_last, VectorXd& grad) {
    for (std::size_t k = layers.size(); k-- > 0;) {
        const bool linear = linear_last && k + 1 == layers.size();
        MatrixXd dz = linear ? d_out : MatrixXd(d_out.cwiseProduct(elu_grad(cache.z[k])));
        weights(grad, layers[k]) += dz * cache.a[k].transpose();
        bias(grad, layers[k]) += dz.rowwise().sum();
        d_out = weights(p, layers[k]).transpose() * dz;
    }
    return d_out;
}

struct RepOutput {
    StackCache cache;
    MatrixXd h;      // last hidden activations
    VectorXd norms;  // per column
    MatrixXd phi;    // unit-norm columns
};

RepOutput represent(const CfrModel& model, const MatrixXd& xs, bool keep_cache) {
    RepOutput r;
    r.h = forward(model.params, model.rep, xs, keep_cache ? &r.cache : nullptr, false);
    r.norms = r.h.colwise().norm().transpose().cwiseMax(1e-12);
    r.phi = r.h * r.norms.cwiseInverse().asDiagonal();
    return r;
}

MatrixXd columns(const MatrixXd& m, const std::vector<Eigen::Index>& cols) {
    MatrixXd out(m.rows(), static_cast<Eigen::Index>(cols.size()));
    for (std::size_t k = 0; k < cols.size(); ++k) out.col(static_cast<Eigen::Index>(k)) = m.col(cols[k]);
    return out;
}

LossParts evaluate(const CfrModel& model, const Dataset& batch, const CfrConfig& config, VectorXd* grad) {
    const Eigen::Index n = batch.rows();
    if (n == 0) throw FitError("cfr: empty batch");
    const MatrixXd xs = standardize(model, batch.x);
    RepOutput rep = represent(model, xs, grad != nullptr);

    std::vector<Eigen::Index> arm[2];
    for (Eigen::Index i = 0; i < n; ++i) arm[batch.t(i) > 0.5 ? 1 : 0].push_back(i);

    LossParts parts;
    MatrixXd d_phi;
    if (grad) {
        grad->setZero(model.params.size());
        d_phi = MatrixXd::Zero(rep.phi.rows(), n);
    }
    for (int a = 0; a < 2; ++a) {
        if (arm[a].empty()) continue;
        const auto& head = a == 1 ? model.head1 : model.head0;
        StackCache cache;
        const MatrixXd phi_a = columns(rep.phi, arm[a]);
        const MatrixXd out = forward(model.params, head, phi_a, grad ? &cache : nullptr, true);
        MatrixXd d_out(1, out.cols());
        for (std::size_t k = 0; k < arm[a].size(); ++k) {
            const Eigen::Index i = arm[a][k];
            const double w = sample_weight(batch.t(i), model.treated_fraction);
            const double r = out(0, static_cast<Eigen::Index>(k)) - (batch.y(i) - model.y_mean) / model.y_scale;
            parts.factual += w * r * r / static_cast<double>(n);
            d_out(0, static_cast<Eigen::Index>(k)) = 2.0 * w * r / static_cast<double>(n);
        }
        if (grad) {
            const MatrixXd d_in = backward(model.params, head, cache, d_out, true, *grad);
            for (std::size_t k = 0; k < arm[a].size(); ++k) d_phi.col(arm[a][k]) += d_in.col(static_cast<Eigen::Index>(k));
        }
    }

    const auto head_params = model.params.tail(model.params.size() - static_cast<Eigen::Index>(model.head_begin));
    parts.regularization = config.lambda * head_params.squaredNorm();
    if (grad) grad->tail(head_params.size()) += 2.0 * config.lambda * head_params;

    if (config.alpha > 0.0) {
        if (arm[0].empty() || arm[1].empty()) {
            parts.penalty_skipped = true;
        } else {
            const MatrixXd p1 = columns(rep.phi, arm[1]).transpose();
            const MatrixXd p0 = columns(rep.phi, arm[0]).transpose();
            if (grad) {
                const auto tg = wasserstein_gradient(p1, p0, config.sinkhorn);
                parts.imbalance = config.alpha * tg.distance;
                for (std::size_t k = 0; k < arm[1].size(); ++k)
                    d_phi.col(arm[1][k]) += config.alpha * tg.grad_a.row(static_cast<Eigen::Index>(k)).transpose();
                for (std::size_t k = 0; k < arm[0].size(); ++k)
                    d_phi.col(arm[0][k]) += config.alpha * tg.grad_b.row(static_cast<Eigen::Index>(k)).transpose();
            } else {
                parts.imbalance = config.alpha * wasserstein_approx(p1, p0, config.sinkhorn);
            }
        }
    }
    parts.total = parts.factual + parts.regularization + parts.imbalance;

    if (grad) {
        // phi = h / |h|: dh = (dphi - phi <phi, dphi>) / |h|
        const Eigen::RowVectorXd proj = rep.phi.cwiseProduct(d_phi).colwise().sum();
        MatrixXd d_h = (d_phi - rep.phi * proj.asDiagonal()) * rep.norms.cwiseInverse().asDiagonal();
        backward(model.params, model.rep, rep.cache, std::move(d_h), false, *grad);
    }
    return parts;
}

Dataset rows_of(const Dataset& data, std::span<const std::size_t> rows) {
    Dataset out;
    out.x.resize(static_cast<Eigen::Index>(rows.size()), data.x.cols());
    out.t.resize(static_cast<Eigen::Index>(rows.size()));
    out.y.resize(static_cast<Eigen::Index>(rows.size()));
    for (std::size_t k = 0; k < rows.size(); ++k) {
        const auto r = static_cast<Eigen::Index>(rows[k]);
        const auto i = static_cast<Eigen::Index>(k);
        out.x.row(i) = data.x.row(r);
        out.t(i) = data.t(r);
        out.y(i) = data.y(r);
    }
    return out;
}

// Weighted factual MSE on the whole validation set plus alpha times the mean
// transport penalty over consecutive validation chunks of one batch size.
double surrogate(const CfrModel& model, const Dataset& validation, const CfrConfig& config) {
    CfrConfig plain = config;
    plain.alpha = 0.0;
    plain.lambda = 0.0;
    double value = evaluate(model, validation, plain, nullptr).factual;
    if (config.alpha > 0.0) {
        const MatrixXd phi = representation(model, validation.x);
        double sum = 0.0;
        int chunks = 0;
        const auto n = static_cast<std::size_t>(validation.rows());
        const auto step = static_cast<std::size_t>(config.batch_size);
        for (std::size_t begin = 0; begin < n; begin += step) {
            std::vector<Eigen::Index> arm[2];
            for (std::size_t i = begin; i < std::min(n, begin + step); ++i)
                arm[validation.t(static_cast<Eigen::Index>(i)) > 0.5 ? 1 : 0].push_back(static_cast<Eigen::Index>(i));
            if (arm[0].empty() || arm[1].empty()) continue;
            MatrixXd p1(static_cast<Eigen::Index>(arm[1].size()), phi.cols()), p0(static_cast<Eigen::Index>(arm[0].size()), phi.cols());
            for (std::size_t k = 0; k < arm[1].size(); ++k) p1.row(static_cast<Eigen::Index>(k)) = phi.row(arm[1][k]);
            for (std::size_t k = 0; k < arm[0].size(); ++k) p0.row(static_cast<Eigen::Index>(k)) = phi.row(arm[0][k]);
            sum += wasserstein_approx(p1, p0, config.sinkhorn);
            ++chunks;
        }
        if (chunks > 0) value += config.alpha * sum / chunks;
    }
    return value;
}

}  // namespace

CfrModel init_model(int inputs, const CfrConfig& config, std::uint64_t seed) {
    config.validate();
    if (inputs < 1) throw FitError("cfr: need at least one covariate");
    CfrModel m;
    std::size_t offset = 0;
    m.rep = stack(offset, inputs, config.rep_width, config.rep_layers, false);
    m.head_begin = offset;
    m.head0 = stack(offset, config.rep_width, config.head_width, config.head_layers, true);
    m.head1 = stack(offset, config.rep_width, config.head_width, config.head_layers, true);
    m.params = VectorXd::Zero(static_cast<Eigen::Index>(offset));

    Rng rng(seed);
    std::normal_distribution<double> z(0.0, 1.0);
    for (const auto* layers : {&m.rep, &m.head0, &m.head1})
        for (const auto& s : *layers) {
            const double sd = 1.0 / std::sqrt(static_cast<double>(s.in));
            auto w = weights(m.params, s);
            for (Eigen::Index j = 0; j < w.cols(); ++j)
                for (Eigen::Index i = 0; i < w.rows(); ++i) w(i, j) = sd * z(rng);
        }
    m.x_mean = VectorXd::Zero(inputs);
    m.x_scale = VectorXd::Ones(inputs);
    return m;
}

LossParts cfr_loss(const CfrModel& model, const Dataset& batch, const CfrConfig& config) {
    return evaluate(model, batch, config, nullptr);
}

LossParts cfr_loss_gradient(const CfrModel& model, const Dataset& batch, const CfrConfig& config, VectorXd& gradient) {
    return evaluate(model, batch, config, &gradient);
}

MatrixXd representation(const CfrModel& model, const MatrixXd& x) {
    return represent(model, standardize(model, x), false).phi.transpose();
}

TrainResult cfr_train(const Dataset& train, const Dataset& validation, const CfrConfig& config) {
    config.validate();
    const Eigen::Index n = train.rows();
    if (n == 0 || validation.rows() == 0) throw FitError("cfr: training and validation sets must be nonempty");
    const double u = train.t.mean();
    if (!(u > 0.0 && u < 1.0)) throw FitError("cfr: training set must contain both arms");

    TrainResult result{init_model(static_cast<int>(train.cols()), config, config.seed), {}};
    CfrModel& model = result.model;
    TrainTrace& trace = result.trace;
    model.x_mean = train.x.colwise().mean().transpose();
    model.x_scale = ((train.x.rowwise() - model.x_mean.transpose()).array().square().colwise().mean().sqrt()).transpose();
    for (Eigen::Index j = 0; j < model.x_scale.size(); ++j)
        if (!(model.x_scale(j) > 0.0)) model.x_scale(j) = 1.0;
    model.y_mean = train.y.mean();
    model.y_scale = std::sqrt((train.y.array() - model.y_mean).square().mean());
    if (!(model.y_scale > 0.0)) model.y_scale = 1.0;
    model.treated_fraction = u;

    VectorXd m1 = VectorXd::Zero(model.params.size()), m2 = m1, grad;
    std::vector<std::size_t> order(static_cast<std::size_t>(n));
    std::iota(order.begin(), order.end(), 0);
    Rng rng(mix64(config.seed ^ hash_tag("cfr-batches")));
    long step = 0;

    double best = std::numeric_limits<double>::infinity();
    VectorXd best_params = model.params;
    int since_best = 0;
    for (int epoch = 1; epoch <= config.max_epochs; ++epoch) {
        std::shuffle(order.begin(), order.end(), rng);
        double objective = 0.0;
        int batches = 0;
        for (std::size_t begin = 0; begin < order.size(); begin += static_cast<std::size_t>(config.batch_size)) {
            const std::size_t end = std::min(order.size(), begin + static_cast<std::size_t>(config.batch_size));
            const Dataset batch = rows_of(train, std::span(order).subspan(begin, end - begin));
            const LossParts parts = evaluate(model, batch, config, &grad);
            if (!std::isfinite(parts.total) || !grad.allFinite())
                throw FitError("cfr: training diverged at epoch " + std::to_string(epoch) + " (last objective " +
                               (trace.objective.empty() ? std::string("n/a") : std::to_string(trace.objective.back())) + ")");
            trace.skipped_penalties += parts.penalty_skipped;
            objective += parts.total;
            ++batches;

            ++step;
            m1 = config.beta1 * m1 + (1.0 - config.beta1) * grad;
            m2 = config.beta2 * m2 + (1.0 - config.beta2) * grad.cwiseAbs2();
            const double c1 = 1.0 - std::pow(config.beta1, static_cast<double>(step));
            const double c2 = 1.0 - std::pow(config.beta2, static_cast<double>(step));
            model.params.array() -=
                config.learning_rate * (m1.array() / c1) / ((m2.array() / c2).sqrt() + config.adam_epsilon);
        }
        trace.objective.push_back(objective / batches);
        const double val = surrogate(model, validation, config);
        if (!std::isfinite(val))
            throw FitError("cfr: validation loss became non-finite at epoch " + std::to_string(epoch));
        trace.validation.push_back(val);
        trace.stop_epoch = epoch;
        if (val < best) {
            best = val;
            best_params = model.params;
            trace.best_epoch = epoch;
            since_best = 0;
        } else if (++since_best >= config.patience) {
            break;
        }
    }
    if (trace.skipped_penalties > 0)
        std::cerr << "warning: cfr: imbalance penalty skipped on " << trace.skipped_penalties << " single-arm batch(es)\n";
    model.params = best_params;
    return result;
}

VectorXd cfr_predict(const CfrModel& model, const MatrixXd& x, const VectorXd& t) {
    const RepOutput rep = represent(model, standardize(model, x), false);
    const MatrixXd f0 = forward(model.params, model.head0, rep.phi, nullptr, true);
    const MatrixXd f1 = forward(model.params, model.head1, rep.phi, nullptr, true);
    VectorXd out(x.rows());
    for (Eigen::Index i = 0; i < x.rows(); ++i) out(i) = (t(i) > 0.5 ? f1(0, i) : f0(0, i)) * model.y_scale + model.y_mean;
    return out;
}

VectorXd cfr_cate(const CfrModel& model, const MatrixXd& x) {
    const RepOutput rep = represent(model, standardize(model, x), false);
    const MatrixXd f0 = forward(model.params, model.head0, rep.phi, nullptr, true);
    const MatrixXd f1 = forward(model.params, model.head1, rep.phi, nullptr, true);
    return ((f1 - f0).transpose() * model.y_scale).col(0);
}

linprop::AteEstimate cfr_ate(const CfrModel& model, const MatrixXd& x_test, const CfrConfig& config) {
    if (x_test.rows() == 0) throw FitError("cfr: empty test set");
    return {cfr_cate(model, x_test).mean(), config.alpha == 0.0 ? "tarnet" : "cfr"};
}

double gradient_check(const CfrModel& model, const Dataset& batch, const CfrConfig& config, std::uint64_t seed,
                      int coordinates) {
    CfrConfig plain = config;
    plain.alpha = 0.0;
    VectorXd grad;
    evaluate(model, batch, plain, &grad);

    std::vector<std::pair<std::size_t, std::size_t>> blocks;  // [begin, end) per layer
    for (const auto* layers : {&model.rep, &model.head0, &model.head1})
        for (const auto& s : *layers) blocks.emplace_back(s.weights, s.bias + static_cast<std::size_t>(s.out));

    Rng rng(seed);
    CfrModel probe = model;
    double worst = 0.0;
    constexpr double h = 1e-5;
    for (int c = 0; c < coordinates; ++c) {
        const auto& [lo, hi] = blocks[std::uniform_int_distribution<std::size_t>(0, blocks.size() - 1)(rng)];
        const auto k = static_cast<Eigen::Index>(std::uniform_int_distribution<std::size_t>(lo, hi - 1)(rng));
        const double saved = probe.params(k);
        probe.params(k) = saved + h;
        const double up = evaluate(probe, batch, plain, nullptr).total;
        probe.params(k) = saved - h;
        const double down = evaluate(probe, batch, plain, nullptr).total;
        probe.params(k) = saved;
        const double numeric = (up - down) / (2.0 * h);
        const double analytic = grad(k);
        const double rel = std::abs(analytic - numeric) / std::max({std::abs(analytic), std::abs(numeric), 1e-6});
        worst = std::max(worst, rel);
    }
    return worst;
}

void write_trace(std::ostream& out, const TrainTrace& trace) {
    csv::write_row(out, {"epoch", "objective", "validation", "best"});
    for (std::size_t e = 0; e < trace.objective.size(); ++e)
        csv::write_row(out, {std::to_string(e + 1), csv::format_number(trace.objective[e], 8),
                             csv::format_number(trace.validation[e], 8),
                             static_cast<int>(e + 1) == trace.best_epoch ? "1" : "0"});
}

}  // namespace tte::cfr
