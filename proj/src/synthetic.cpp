#include "tte/synthetic.hpp"

#include <algorithm>
#include <cmath>
#include <random>
#include <string>

#include "tte/error.hpp"
#include "tte/rng.hpp"

namespace tte::synthetic {

std::string_view to_string(DgpKind kind) {
    switch (kind) {
        case DgpKind::linear_confounded: return "linear_confounded";
        case DgpKind::nonlinear: return "nonlinear";
        case DgpKind::null_effect: return "null_effect";
    }
    return "?";
}

DgpKind dgp_kind_from_string(std::string_view text) {
    for (auto k : {DgpKind::linear_confounded, DgpKind::nonlinear, DgpKind::null_effect})
        if (to_string(k) == text) return k;
    throw ConfigError("unknown DGP kind '" + std::string(text) + "'");
}

void DgpSpec::validate() const {
    if (n < 1) throw ConfigError("dgp: n must be at least 1");
    if (d < 1) throw ConfigError("dgp: d must be at least 1");
    if (kind == DgpKind::nonlinear && d < 3) throw ConfigError("dgp: the nonlinear DGP needs d >= 3");
    if (!(sigma >= 0.0)) throw ConfigError("dgp: sigma must be nonnegative");
    if (!std::isfinite(tau) || !std::isfinite(gamma) || !std::isfinite(effect_slope))
        throw ConfigError("dgp: parameters must be finite");
}

SyntheticTable generate(const DgpSpec& spec) { return generate(spec, spec.seed); }

SyntheticTable generate(const DgpSpec& spec, std::uint64_t seed) {
    spec.validate();
    Rng rng(mix64(seed));
    std::normal_distribution<double> normal(0.0, 1.0);
    std::uniform_real_distribution<double> unit(0.0, 1.0);

    const Eigen::Index n = spec.n, d = spec.d;
    Eigen::VectorXd beta(d);
    for (Eigen::Index j = 0; j < d; ++j) beta(j) = 2.0 * unit(rng) - 1.0;
    const double beta_norm = std::max(beta.norm(), 1e-12);
    const double tau = spec.kind == DgpKind::null_effect ? 0.0 : spec.tau;

    SyntheticTable out;
    Dataset& ds = out.data;
    ds.x.resize(n, d);
    ds.t.resize(n);
    ds.y.resize(n);
    ds.y1 = Eigen::VectorXd(n);
    ds.y0 = Eigen::VectorXd(n);
    out.e_true.resize(n);
    for (Eigen::Index j = 0; j < d; ++j) ds.names.push_back("x" + std::to_string(j + 1));

    for (Eigen::Index i = 0; i < n; ++i) {
        for (Eigen::Index j = 0; j < d; ++j) ds.x(i, j) = normal(rng);
        const auto x = ds.x.row(i);
        const double lin = x.dot(beta);
        double mu0 = lin;
        double score = lin / beta_norm;
        if (spec.kind == DgpKind::nonlinear) {
            const double step = x(2) > 0.0 ? 1.0 : 0.0;
            mu0 += 2.0 * x(0) * x(1) + 3.0 * step + 1.5 * (x(0) * x(0) - 1.0);
            score = (score + (x(0) * x(0) - 1.0) / std::sqrt(2.0) + 2.0 * (step - 0.5) + x(0) * x(1)) / 2.0;
        }
        const double e = std::clamp(1.0 / (1.0 + std::exp(-spec.gamma * score)), 0.05, 0.95);
        const double t = unit(rng) < e ? 1.0 : 0.0;
        const double y0 = mu0 + spec.sigma * normal(rng);
        const double y1 = y0 + tau + spec.effect_slope * x(0);
        out.e_true(i) = e;
        ds.t(i) = t;
        (*ds.y0)(i) = y0;
        (*ds.y1)(i) = y1;
        ds.y(i) = t > 0.5 ? y1 : y0;
    }
    return out;
}

double true_ate(const Dataset& table) {
    if (!table.y1 || !table.y0) throw Error("true_ate: table carries no potential outcomes");
    return (*table.y1 - *table.y0).mean();
}

double epsilon_ate(double estimate, const Dataset& table) { return std::abs(true_ate(table) - estimate); }

double epsilon_cate(const Eigen::VectorXd& tau_hat, const Dataset& table) {
    if (!table.y1 || !table.y0) throw Error("epsilon_cate: table carries no potential outcomes");
    if (tau_hat.size() != table.y1->size())
        throw Error("epsilon_cate: " + std::to_string(tau_hat.size()) + " estimates for " +
                    std::to_string(table.y1->size()) + " rows");
    return (tau_hat - (*table.y1 - *table.y0)).squaredNorm() / static_cast<double>(tau_hat.size());
}

cohort::Cohort to_cohort(const SyntheticTable& table) {
    const Dataset& ds = table.data;
    std::vector<cohort::CovariateEntry> entries;
    for (const auto& name : ds.names)
        entries.push_back({name, cohort::CovariateKind::numeric, "", name, cohort::Extraction::windowed, std::nullopt});
    cohort::Cohort c;
    c.spec = cohort::CovariateSpec(std::move(entries));
    for (Eigen::Index i = 0; i < ds.rows(); ++i) {
        cohort::Observation obs;
        obs.patient_id = "sim-" + std::to_string(i + 1);
        obs.x.resize(static_cast<std::size_t>(ds.cols()));
        for (Eigen::Index j = 0; j < ds.cols(); ++j) obs.x[static_cast<std::size_t>(j)] = ds.x(i, j);
        obs.missing.assign(obs.x.size(), 0);
        obs.treatment = ds.t(i) > 0.5 ? 1 : 0;
        obs.y_early = ds.y(i);
        obs.y_late = ds.y(i);
        obs.truth = cohort::PotentialOutcomes{(*ds.y1)(i), (*ds.y0)(i), table.e_true(i)};
        c.observations.push_back(std::move(obs));
    }
    c.provenance.synthetic = c.observations.size();
    return c;
}

}  // namespace tte::synthetic
