#include "tte/linprop.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "tte/error.hpp"

namespace tte::linprop {

namespace {

MatrixXd design(const MatrixXd& x, const VectorXd& t) {
    MatrixXd d(x.rows(), x.cols() + 2);
    d.col(0).setOnes();
    d.col(1) = t;
    d.rightCols(x.cols()) = x;
    return d;
}

std::string column_name(Eigen::Index j, std::span<const std::string> names) {
    if (j == 0) return "intercept";
    if (j == 1) return "treatment";
    const auto k = static_cast<std::size_t>(j - 2);
    return k < names.size() ? names[k] : "x" + std::to_string(k);
}

double sigmoid(double z) {
    return z >= 0 ? 1.0 / (1.0 + std::exp(-z)) : std::exp(z) / (1.0 + std::exp(z));
}

// Type-7 empirical quantile of sorted data.
double sorted_quantile(const std::vector<double>& sorted, double p) {
    const double h = (static_cast<double>(sorted.size()) - 1.0) * p;
    const auto lo = static_cast<std::size_t>(std::floor(h));
    const auto hi = std::min(lo + 1, sorted.size() - 1);
    return sorted[lo] + (h - static_cast<double>(lo)) * (sorted[hi] - sorted[lo]);
}

}  // namespace

VectorXd OlsFit::predict(const MatrixXd& x, const VectorXd& t) const {
    VectorXd out = x * coefficients;
    out.array() += intercept;
    out += treatment * t;
    return out;
}

OlsFit fit_ols(const MatrixXd& x, const VectorXd& t, const VectorXd& y, const VectorXd* weights,
               std::span<const std::string> names) {
    const Eigen::Index n = x.rows();
    const Eigen::Index p = x.cols() + 2;
    if (t.size() != n || y.size() != n || (weights && weights->size() != n))
        throw FitError("ols: inconsistent input lengths");
    if (n <= p) throw FitError("ols: need more rows (" + std::to_string(n) + ") than coefficients (" + std::to_string(p) + ")");

    MatrixXd a = design(x, t);
    VectorXd b = y;
    Eigen::Index effective = n;
    // constant weights leave the solution unchanged, so take the unweighted path exactly
    if (weights && n > 0 && (weights->array() == (*weights)(0)).all() && (*weights)(0) > 0.0) weights = nullptr;
    if (weights) {
        if ((weights->array() < 0.0).any() || !weights->allFinite()) throw FitError("ols: weights must be finite and nonnegative");
        const VectorXd s = weights->cwiseSqrt();
        a = s.asDiagonal() * a;
        b = s.asDiagonal() * b;
        effective = (weights->array() > 0.0).count();
    }

    Eigen::ColPivHouseholderQR<MatrixXd> qr(a);
    if (qr.rank() < p) {
        std::string cols;
        for (Eigen::Index k = qr.rank(); k < p; ++k) {
            if (!cols.empty()) cols += ", ";
            cols += column_name(qr.colsPermutation().indices()(k), names);
        }
        throw RankDeficientError("ols: design matrix is rank deficient; collinear column(s): " + cols);
    }
    const VectorXd beta = qr.solve(b);
    if (!beta.allFinite()) throw FitError("ols: non-finite coefficients");

    OlsFit fit;
    fit.intercept = beta(0);
    fit.treatment = beta(1);
    fit.coefficients = beta.tail(p - 2);
    const VectorXd r = b - a * beta;
    fit.residual_variance = effective > p ? r.squaredNorm() / static_cast<double>(effective - p) : 0.0;
    return fit;
}

AteEstimate ols_ate(const OlsFit& fit) { return {fit.treatment, "lr"}; }

std::string_view to_string(FeatureMode mode) {
    switch (mode) {
        case FeatureMode::confounder_subset: return "confounder_subset";
        case FeatureMode::all_covariates: return "all_covariates";
        case FeatureMode::all_with_interactions: return "all_with_interactions";
    }
    return "?";
}

FeatureMode feature_mode_from_string(std::string_view text) {
    for (auto m : {FeatureMode::confounder_subset, FeatureMode::all_covariates, FeatureMode::all_with_interactions})
        if (to_string(m) == text) return m;
    throw ConfigError("unknown propensity feature mode '" + std::string(text) + "'");
}

MatrixXd propensity_features(const MatrixXd& x, FeatureMode mode, std::span<const std::size_t> confounders) {
    switch (mode) {
        case FeatureMode::all_covariates: return x;
        case FeatureMode::confounder_subset: {
            if (confounders.empty()) throw ConfigError("propensity: confounder_subset mode needs a confounder list");
            MatrixXd f(x.rows(), static_cast<Eigen::Index>(confounders.size()));
            for (std::size_t k = 0; k < confounders.size(); ++k) {
                if (static_cast<Eigen::Index>(confounders[k]) >= x.cols())
                    throw ConfigError("propensity: confounder index out of range");
                f.col(static_cast<Eigen::Index>(k)) = x.col(static_cast<Eigen::Index>(confounders[k]));
            }
            return f;
        }
        case FeatureMode::all_with_interactions: {
            const Eigen::Index d = x.cols();
            MatrixXd f(x.rows(), d + d * (d - 1) / 2);
            f.leftCols(d) = x;
            Eigen::Index c = d;
            for (Eigen::Index i = 0; i < d; ++i)
                for (Eigen::Index j = i + 1; j < d; ++j) f.col(c++) = x.col(i).cwiseProduct(x.col(j));
            return f;
        }
    }
    return x;
}

VectorXd PropensityModel::predict(const MatrixXd& x) const {
    const MatrixXd f = propensity_features(x, mode, confounders);
    VectorXd eta = VectorXd::Constant(x.rows(), coefficients(0));
    for (Eigen::Index j = 0; j < f.cols(); ++j) {
        const double c = coefficients(j + 1);
        if (c != 0.0) eta += c * ((f.col(j).array() - feature_mean(j)) / feature_scale(j)).matrix();
    }
    return eta.unaryExpr([](double z) { return sigmoid(z); });
}

PropensityModel fit_propensity(const MatrixXd& x, const VectorXd& t, const PropensityOptions& options) {
    const Eigen::Index n = x.rows();
    const auto n1 = static_cast<double>((t.array() > 0.5).count());
    const double n0 = static_cast<double>(n) - n1;
    if (n1 == 0.0 || n0 == 0.0) throw FitError("propensity: both treatment arms must be present");

    PropensityModel model;
    model.mode = options.mode;
    model.confounders = options.confounders;
    model.weight_treated = static_cast<double>(n) / (2.0 * n1);
    model.weight_control = static_cast<double>(n) / (2.0 * n0);

    const MatrixXd raw = propensity_features(x, options.mode, options.confounders);
    const Eigen::Index q = raw.cols();
    model.feature_mean = raw.colwise().mean().transpose();
    model.feature_scale.resize(q);
    std::vector<Eigen::Index> active;
    for (Eigen::Index j = 0; j < q; ++j) {
        const double sd = std::sqrt((raw.col(j).array() - model.feature_mean(j)).square().mean());
        model.feature_scale(j) = sd > 0.0 ? sd : 1.0;
        if (sd > 1e-12 * std::max(1.0, std::abs(model.feature_mean(j)))) active.push_back(j);
    }
    // constant columns are aliased with the intercept and keep a zero coefficient
    MatrixXd f(n, static_cast<Eigen::Index>(active.size()) + 1);
    f.col(0).setOnes();
    for (std::size_t k = 0; k < active.size(); ++k) {
        const auto j = active[k];
        f.col(static_cast<Eigen::Index>(k) + 1) = (raw.col(j).array() - model.feature_mean(j)) / model.feature_scale(j);
    }

    const VectorXd cw = t.unaryExpr([&](double ti) { return ti > 0.5 ? model.weight_treated : model.weight_control; });
    auto loglik = [&](const VectorXd& eta) {
        double ll = 0.0;
        for (Eigen::Index i = 0; i < n; ++i) {
            // log p = -log(1+e^-eta), log(1-p) = -log(1+e^eta)
            const double z = eta(i);
            const double lp = -(std::max(-z, 0.0) + std::log1p(std::exp(-std::abs(z))));
            const double lq = -(std::max(z, 0.0) + std::log1p(std::exp(-std::abs(z))));
            ll += cw(i) * (t(i) > 0.5 ? lp : lq);
        }
        return ll;
    };

    VectorXd beta = VectorXd::Zero(f.cols());
    VectorXd eta = VectorXd::Zero(n);
    double ll = loglik(eta);
    model.log_likelihood.push_back(ll);
    constexpr double separation_eta = 30.0;
    bool converged = false;

    for (int it = 0; it < options.max_iterations; ++it) {
        const VectorXd p = eta.unaryExpr([](double z) { return sigmoid(z); });
        const VectorXd w = cw.cwiseProduct(p.cwiseProduct((1.0 - p.array()).matrix()));
        const MatrixXd h = f.transpose() * w.asDiagonal() * f;
        const VectorXd g = f.transpose() * cw.cwiseProduct(t - p);
        Eigen::LDLT<MatrixXd> ldlt(h);
        if (ldlt.info() != Eigen::Success || !ldlt.isPositive())
            throw FitError("propensity: singular information matrix (collinear features)");
        const VectorXd step = ldlt.solve(g);
        if (!step.allFinite()) throw FitError("propensity: singular information matrix (collinear features)");

        // step halving keeps the log-likelihood non-decreasing
        double scale = 1.0;
        VectorXd next_beta, next_eta;
        double next_ll = -std::numeric_limits<double>::infinity();
        for (int half = 0; half < 40; ++half) {
            next_beta = beta + scale * step;
            next_eta = f * next_beta;
            next_ll = loglik(next_eta);
            if (next_ll >= ll) break;
            scale *= 0.5;
        }
        if (!(next_ll >= ll)) {
            converged = true;  // no ascent direction left at machine precision
            break;
        }
        model.iterations = it + 1;
        const double change = std::abs(next_ll - ll) / std::max(std::abs(ll), 1e-300);
        beta = next_beta;
        eta = next_eta;
        ll = next_ll;
        model.log_likelihood.push_back(ll);
        if (eta.cwiseAbs().maxCoeff() > separation_eta)
            throw SeparationError("propensity: perfect or quasi-perfect separation, coefficients diverge (|eta| > " +
                                  std::to_string(static_cast<int>(separation_eta)) + " after " +
                                  std::to_string(it + 1) + " iterations)");
        if (change < options.tolerance) {
            converged = true;
            break;
        }
    }
    if (!converged)
        throw SeparationError("propensity: IRLS did not converge in " + std::to_string(options.max_iterations) +
                              " iterations");

    model.coefficients = VectorXd::Zero(q + 1);
    model.coefficients(0) = beta(0);
    for (std::size_t k = 0; k < active.size(); ++k) model.coefficients(active[k] + 1) = beta(static_cast<Eigen::Index>(k) + 1);
    return model;
}

PropensityScores clip_scores(const VectorXd& scores, double floor, std::optional<double> ceiling) {
    PropensityScores out{scores, floor, ceiling, 0};
    for (Eigen::Index i = 0; i < scores.size(); ++i) {
        if (out.values(i) < floor) {
            out.values(i) = floor;
            ++out.clipped;
        } else if (ceiling && out.values(i) > *ceiling) {
            out.values(i) = *ceiling;
            ++out.clipped;
        }
    }
    return out;
}

double ipw_weight(double e, double t) {
    if (!(e > 0.0 && e < 1.0)) throw FitError("ipw_weight: propensity score must lie strictly inside (0,1); clip first");
    return 1.0 / (t > 0.5 ? e : 1.0 - e);
}

OlsFit dr_ipw_fit(const MatrixXd& x, const VectorXd& t, const VectorXd& y, const PropensityScores& scores) {
    if (scores.values.size() != x.rows()) throw FitError("dr-ipw: score vector length mismatch");
    VectorXd w(x.rows());
    for (Eigen::Index i = 0; i < x.rows(); ++i) w(i) = ipw_weight(scores.values(i), t(i));
    return fit_ols(x, t, y, &w);
}

AteEstimate dr_ipw_ate(const MatrixXd& x, const VectorXd& t, const VectorXd& y, const PropensityScores& scores) {
    return {dr_ipw_fit(x, t, y, scores).treatment, "dripw"};
}

double combine_block_effects(std::span<const double> effects, std::span<const std::size_t> sizes) {
    if (effects.size() != sizes.size() || effects.empty()) throw FitError("blocking: mismatched block summaries");
    if (effects.size() == 1) return effects[0];  // e * n / n is not always e in floating point
    double num = 0.0, den = 0.0;
    for (std::size_t b = 0; b < effects.size(); ++b) {
        num += effects[b] * static_cast<double>(sizes[b]);
        den += static_cast<double>(sizes[b]);
    }
    return num / den;
}

namespace {

struct BlockDraft {
    std::vector<std::size_t> rows;  // ascending
    double score_sum = 0.0;

    double mean_score() const { return score_sum / static_cast<double>(rows.size()); }
};

// Fits one block, dropping covariates that are constant inside it. Empty optional
// when the block cannot support its own regression.
std::optional<Block> try_fit_block(const MatrixXd& x, const VectorXd& t, const VectorXd& y, const VectorXd& e,
                                   const BlockDraft& draft) {
    const auto n = static_cast<Eigen::Index>(draft.rows.size());
    Eigen::Index treated = 0;
    for (auto r : draft.rows) treated += t(static_cast<Eigen::Index>(r)) > 0.5;
    if (treated == 0 || treated == n) return std::nullopt;

    Block block;
    for (Eigen::Index j = 0; j < x.cols(); ++j) {
        const double first = x(static_cast<Eigen::Index>(draft.rows.front()), j);
        bool constant = true;
        for (auto r : draft.rows)
            if (x(static_cast<Eigen::Index>(r), j) != first) {
                constant = false;
                break;
            }
        if (!constant) block.kept_columns.push_back(static_cast<std::size_t>(j));
    }
    if (n <= static_cast<Eigen::Index>(block.kept_columns.size()) + 2) return std::nullopt;

    MatrixXd bx(n, static_cast<Eigen::Index>(block.kept_columns.size()));
    VectorXd bt(n), by(n);
    for (Eigen::Index i = 0; i < n; ++i) {
        const auto r = static_cast<Eigen::Index>(draft.rows[static_cast<std::size_t>(i)]);
        for (std::size_t k = 0; k < block.kept_columns.size(); ++k)
            bx(i, static_cast<Eigen::Index>(k)) = x(r, static_cast<Eigen::Index>(block.kept_columns[k]));
        bt(i) = t(r);
        by(i) = y(r);
    }
    try {
        block.fit = fit_ols(bx, bt, by);
    } catch (const RankDeficientError&) {
        return std::nullopt;
    }
    block.rows = draft.rows;
    block.lower = std::numeric_limits<double>::infinity();
    block.upper = -std::numeric_limits<double>::infinity();
    for (auto r : draft.rows) {
        block.lower = std::min(block.lower, e(static_cast<Eigen::Index>(r)));
        block.upper = std::max(block.upper, e(static_cast<Eigen::Index>(r)));
    }
    return block;
}

}  // namespace

const Block& Blocking::block_for(double e) const {
    for (const auto& b : blocks)
        if (e <= b.upper) return b;
    return blocks.back();
}

VectorXd Blocking::predict(const MatrixXd& x, const VectorXd& t, const VectorXd& scores) const {
    VectorXd out(x.rows());
    for (Eigen::Index i = 0; i < x.rows(); ++i) {
        const Block& b = block_for(scores(i));
        double v = b.fit.intercept + b.fit.treatment * t(i);
        for (std::size_t k = 0; k < b.kept_columns.size(); ++k)
            v += b.fit.coefficients(static_cast<Eigen::Index>(k)) * x(i, static_cast<Eigen::Index>(b.kept_columns[k]));
        out(i) = v;
    }
    return out;
}

Blocking fit_blocking(const MatrixXd& x, const VectorXd& t, const VectorXd& y, const PropensityScores& scores,
                      int n_blocks) {
    const Eigen::Index n = x.rows();
    const VectorXd& e = scores.values;
    if (n_blocks < 1) throw ConfigError("blocking: need at least one block");
    if (e.size() != n) throw FitError("blocking: score vector length mismatch");

    std::vector<double> sorted(e.data(), e.data() + n);
    std::sort(sorted.begin(), sorted.end());
    std::vector<double> cuts;
    for (int k = 1; k < n_blocks; ++k) cuts.push_back(sorted_quantile(sorted, static_cast<double>(k) / n_blocks));

    std::vector<BlockDraft> drafts(static_cast<std::size_t>(n_blocks));
    for (Eigen::Index i = 0; i < n; ++i) {
        const auto b = static_cast<std::size_t>(std::count_if(cuts.begin(), cuts.end(), [&](double c) { return c < e(i); }));
        drafts[b].rows.push_back(static_cast<std::size_t>(i));
        drafts[b].score_sum += e(i);
    }
    std::erase_if(drafts, [](const BlockDraft& d) { return d.rows.empty(); });

    std::vector<std::optional<Block>> fitted;
    for (const auto& d : drafts) fitted.push_back(try_fit_block(x, t, y, e, d));

    while (true) {
        auto bad = std::find_if(fitted.begin(), fitted.end(), [](const auto& f) { return !f.has_value(); });
        if (bad == fitted.end()) break;
        if (drafts.size() == 1) throw FitError("blocking: no valid block (both arms and a full-rank regression) remains");
        const auto i = static_cast<std::size_t>(bad - fitted.begin());
        std::size_t j;
        if (i == 0)
            j = 1;
        else if (i + 1 == drafts.size())
            j = i - 1;
        else
            j = std::abs(drafts[i - 1].mean_score() - drafts[i].mean_score()) <=
                        std::abs(drafts[i + 1].mean_score() - drafts[i].mean_score())
                    ? i - 1
                    : i + 1;
        const std::size_t keep = std::min(i, j), drop = std::max(i, j);
        auto& merged = drafts[keep];
        merged.rows.insert(merged.rows.end(), drafts[drop].rows.begin(), drafts[drop].rows.end());
        std::sort(merged.rows.begin(), merged.rows.end());
        merged.score_sum += drafts[drop].score_sum;
        drafts.erase(drafts.begin() + static_cast<std::ptrdiff_t>(drop));
        fitted.erase(fitted.begin() + static_cast<std::ptrdiff_t>(drop));
        fitted[keep] = try_fit_block(x, t, y, e, merged);
    }

    Blocking out;
    std::vector<double> effects;
    std::vector<std::size_t> sizes;
    for (auto& f : fitted) {
        effects.push_back(f->fit.treatment);
        sizes.push_back(f->rows.size());
        out.blocks.push_back(std::move(*f));
    }
    out.ate = combine_block_effects(effects, sizes);
    return out;
}

AteEstimate blocking_ate(const MatrixXd& x, const VectorXd& t, const VectorXd& y, const PropensityScores& scores,
                         int n_blocks) {
    return {fit_blocking(x, t, y, scores, n_blocks).ate, "blocking"};
}

double normalized_mean_difference(double mean_treated, double sd_treated, double mean_control, double sd_control) {
    const double pooled = std::sqrt((sd_treated * sd_treated + sd_control * sd_control) / 2.0);
    if (pooled == 0.0) return 0.0;
    return (mean_treated - mean_control) / pooled;
}

VectorXd normalized_mean_difference(const MatrixXd& x, const VectorXd& t) {
    std::vector<Eigen::Index> treated, control;
    for (Eigen::Index i = 0; i < t.size(); ++i) (t(i) > 0.5 ? treated : control).push_back(i);
    if (treated.empty() || control.empty()) throw FitError("balance: both arms must be nonempty");

    auto moments = [&](const std::vector<Eigen::Index>& rows, Eigen::Index j) {
        double mean = 0.0;
        for (auto r : rows) mean += x(r, j);
        mean /= static_cast<double>(rows.size());
        double ss = 0.0;
        for (auto r : rows) ss += (x(r, j) - mean) * (x(r, j) - mean);
        const double var = rows.size() > 1 ? ss / static_cast<double>(rows.size() - 1) : 0.0;
        return std::pair{mean, std::sqrt(var)};
    };
    VectorXd out(x.cols());
    for (Eigen::Index j = 0; j < x.cols(); ++j) {
        auto [m1, s1] = moments(treated, j);
        auto [m0, s0] = moments(control, j);
        out(j) = normalized_mean_difference(m1, s1, m0, s0);
    }
    return out;
}

VectorXd weighted_normalized_mean_difference(const MatrixXd& x, const VectorXd& t, const VectorXd& w) {
    if (w.size() != x.rows() || t.size() != x.rows()) throw FitError("balance: length mismatch");
    VectorXd out(x.cols());
    for (Eigen::Index j = 0; j < x.cols(); ++j) {
        double sw[2] = {0.0, 0.0}, m[2] = {0.0, 0.0}, v[2] = {0.0, 0.0};
        for (Eigen::Index i = 0; i < x.rows(); ++i) {
            const int a = t(i) > 0.5;
            sw[a] += w(i);
            m[a] += w(i) * x(i, j);
        }
        if (!(sw[0] > 0.0 && sw[1] > 0.0)) throw FitError("balance: both arms need positive weight");
        m[0] /= sw[0];
        m[1] /= sw[1];
        for (Eigen::Index i = 0; i < x.rows(); ++i) {
            const int a = t(i) > 0.5;
            v[a] += w(i) * (x(i, j) - m[a]) * (x(i, j) - m[a]);
        }
        out(j) = normalized_mean_difference(m[1], std::sqrt(v[1] / sw[1]), m[0], std::sqrt(v[0] / sw[0]));
    }
    return out;
}

OverlapHistogram overlap_histogram(const VectorXd& scores, const VectorXd& t, int bins) {
    if (bins < 1) throw ConfigError("overlap histogram: need at least one bin");
    OverlapHistogram h{bins, std::vector<std::size_t>(static_cast<std::size_t>(bins), 0),
                       std::vector<std::size_t>(static_cast<std::size_t>(bins), 0)};
    for (Eigen::Index i = 0; i < scores.size(); ++i) {
        auto b = static_cast<int>(std::floor(scores(i) * bins));
        b = std::clamp(b, 0, bins - 1);
        (t(i) > 0.5 ? h.treated : h.control)[static_cast<std::size_t>(b)]++;
    }
    return h;
}

}  // namespace tte::linprop
