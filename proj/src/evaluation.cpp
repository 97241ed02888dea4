#include "tte/evaluation.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstdio>
#include <exception>
#include <numeric>
#include <random>
#include <thread>
#include <unordered_set>

#include <json.hpp>

#include "tte/csv.hpp"
#include "tte/error.hpp"
#include "tte/rng.hpp"

namespace tte::eval {

const std::vector<std::string>& model_tags() {
    static const std::vector<std::string> tags{"lr", "dripw", "blocking", "bart", "tarnet", "cfr"};
    return tags;
}

bool is_model_tag(std::string_view tag) {
    const auto& tags = model_tags();
    return std::find(tags.begin(), tags.end(), tag) != tags.end();
}

std::string display_name(std::string_view tag) {
    if (tag == "lr") return "LR";
    if (tag == "dripw") return "DR-IPW";
    if (tag == "blocking") return "Blocking";
    if (tag == "bart") return "BART";
    if (tag == "tarnet") return "TARNet";
    if (tag == "cfr") return "CfR";
    return std::string(tag);
}

namespace {

Dataset concat(const Dataset& a, const Dataset& b) {
    if (b.rows() == 0) return a;
    Dataset out;
    out.names = a.names;
    out.x.resize(a.rows() + b.rows(), a.cols());
    out.x << a.x, b.x;
    out.t.resize(a.rows() + b.rows());
    out.t << a.t, b.t;
    out.y.resize(a.rows() + b.rows());
    out.y << a.y, b.y;
    return out;
}

double mean_of(std::span<const double> v) {
    return std::accumulate(v.begin(), v.end(), 0.0) / static_cast<double>(v.size());
}

}  // namespace

FitOutcome estimate_once(std::string_view tag, const Dataset& fit, const Dataset& validation, const Dataset& test,
                         const ModelSettings& settings, std::uint64_t seed) {
    if (test.rows() == 0) throw FitError("empty test set");
    FitOutcome out;
    if (tag == "tarnet" || tag == "cfr") {
        cfr::CfrConfig config = tag == "cfr" ? settings.cfr : settings.tarnet;
        config.seed = seed;
        const auto trained = cfr::cfr_train(fit, validation, config);
        out.ate = cfr::cfr_ate(trained.model, test.x, config).value;
        out.rmse = rmse_factual(cfr::cfr_predict(trained.model, test.x, test.t), test.y);
        return out;
    }

    const Dataset all = concat(fit, validation);
    if (tag == "lr") {
        const auto ols = linprop::fit_ols(all.x, all.t, all.y, nullptr, all.names);
        out.ate = linprop::ols_ate(ols).value;
        out.rmse = rmse_factual(ols.predict(test.x, test.t), test.y);
    } else if (tag == "dripw" || tag == "blocking") {
        const auto model = linprop::fit_propensity(all.x, all.t, settings.propensity);
        const auto scores = linprop::clip_scores(model.predict(all.x), settings.clip_floor, settings.clip_ceiling);
        const auto test_scores = linprop::clip_scores(model.predict(test.x), settings.clip_floor, settings.clip_ceiling);
        if (tag == "dripw") {
            const auto ols = linprop::dr_ipw_fit(all.x, all.t, all.y, scores);
            out.ate = ols.treatment;
            out.rmse = rmse_factual(ols.predict(test.x, test.t), test.y);
        } else {
            const auto blocking = linprop::fit_blocking(all.x, all.t, all.y, scores, settings.blocks);
            double sum = 0.0;
            for (Eigen::Index i = 0; i < test.rows(); ++i) sum += blocking.block_for(test_scores.values(i)).fit.treatment;
            out.ate = sum / static_cast<double>(test.rows());
            out.rmse = rmse_factual(blocking.predict(test.x, test.t, test_scores.values), test.y);
        }
    } else if (tag == "bart") {
        bart::BartConfig config = settings.bart;
        config.seed = seed;
        const auto posterior = bart::bart_fit(all.x, all.t, all.y, config);
        out.ate = bart::bart_ate(posterior, test.x).value;
        out.rmse = rmse_factual(bart::bart_predict(posterior, test.x, test.t), test.y);
    } else {
        throw ConfigError("unknown model tag '" + std::string(tag) + "'");
    }
    return out;
}

void BootstrapPlan::validate() const {
    if (replicates < 1) throw ConfigError("bootstrap: need at least one replicate");
    if (!(frac > 0.0 && frac <= 1.0)) throw ConfigError("bootstrap: frac must lie in (0,1]");
    if (!with_replacement) throw ConfigError("bootstrap: only resampling with replacement is supported");
}

std::size_t BootstrapPlan::resample_size(std::size_t n) const {
    return static_cast<std::size_t>(std::ceil(frac * static_cast<double>(n) - 1e-9));
}

std::vector<std::size_t> bootstrap_indices(const BootstrapPlan& plan, std::size_t n, std::size_t replicate) {
    if (n == 0) throw Error("bootstrap: empty training set");
    Rng rng(derive_seed(plan.seed, "bootstrap", replicate));
    std::uniform_int_distribution<std::size_t> pick(0, n - 1);
    std::vector<std::size_t> out(plan.resample_size(n));
    for (auto& i : out) i = pick(rng);
    return out;
}

double rmse_factual(const VectorXd& predictions, const VectorXd& y) {
    if (predictions.size() != y.size()) throw Error("rmse: length mismatch");
    if (y.size() == 0) throw Error("rmse: no rows");
    return std::sqrt((predictions - y).squaredNorm() / static_cast<double>(y.size()));
}

double quantile(std::vector<double> samples, double p) {
    if (samples.empty()) throw Error("quantile: no samples");
    std::sort(samples.begin(), samples.end());
    const double h = (static_cast<double>(samples.size()) - 1.0) * std::clamp(p, 0.0, 1.0);
    const auto lo = static_cast<std::size_t>(std::floor(h));
    const auto hi = std::min(lo + 1, samples.size() - 1);
    return samples[lo] + (h - static_cast<double>(lo)) * (samples[hi] - samples[lo]);
}

Interval percentile_ci(std::span<const double> samples, double level) {
    const std::vector<double> v(samples.begin(), samples.end());
    const double tail = (1.0 - level) / 2.0;
    return {quantile(v, tail), quantile(v, 1.0 - tail)};
}

Boxplot boxplot(std::span<const double> samples, double level) {
    const std::vector<double> v(samples.begin(), samples.end());
    const auto ci = percentile_ci(samples, level);
    return {ci.lo, quantile(v, 0.25), quantile(v, 0.5), quantile(v, 0.75), ci.hi};
}

double mean_difference(const VectorXd& t, const VectorXd& y) {
    double s[2] = {0.0, 0.0};
    std::size_t c[2] = {0, 0};
    for (Eigen::Index i = 0; i < t.size(); ++i) {
        const int a = t(i) > 0.5;
        s[a] += y(i);
        ++c[a];
    }
    if (c[0] == 0 || c[1] == 0) throw FitError("unadjusted effect: both arms must be nonempty");
    return s[1] / static_cast<double>(c[1]) - s[0] / static_cast<double>(c[0]);
}

Estimate unadjusted_effect(const VectorXd& t, const VectorXd& y, const BootstrapPlan& plan) {
    plan.validate();
    Estimate out;
    out.value = mean_difference(t, y);
    std::vector<double> samples;
    const auto n = static_cast<std::size_t>(t.size());
    for (int r = 0; r < plan.replicates; ++r) {
        const auto idx = bootstrap_indices(plan, n, static_cast<std::size_t>(r));
        VectorXd bt(static_cast<Eigen::Index>(idx.size())), by(static_cast<Eigen::Index>(idx.size()));
        for (std::size_t k = 0; k < idx.size(); ++k) {
            bt(static_cast<Eigen::Index>(k)) = t(static_cast<Eigen::Index>(idx[k]));
            by(static_cast<Eigen::Index>(k)) = y(static_cast<Eigen::Index>(idx[k]));
        }
        try {
            samples.push_back(mean_difference(bt, by));
        } catch (const FitError&) {
            // single-arm resample: no contrast to record
        }
    }
    out.ci = samples.empty() ? Interval{out.value, out.value} : percentile_ci(samples);
    return out;
}

AgreementFlags agreement(std::span<const ModelResult> models, const Reference& reference) {
    AgreementFlags flags;
    std::vector<double> means;
    bool all_above = true;
    for (const auto& m : models) {
        if (m.failed || m.ate_samples.empty()) {
            flags.overlaps_reference.emplace_back(m.tag, false);
            all_above = false;
            continue;
        }
        means.push_back(m.ate.value);
        all_above = all_above && m.ate.ci.lo > 0.0;
        flags.overlaps_reference.emplace_back(m.tag, m.ate.ci.lo <= reference.trial_ci.hi && m.ate.ci.hi >= reference.trial_ci.lo);
    }
    flags.all_above_zero = all_above && !means.empty();
    if (!means.empty()) flags.max_gap = *std::max_element(means.begin(), means.end()) - *std::min_element(means.begin(), means.end());
    return flags;
}

AgreementReport run_protocol(const Dataset& data, const cohort::SplitIndex& split, std::span<const std::string> models,
                             const ModelSettings& settings, const BootstrapPlan& plan, int threads) {
    plan.validate();
    if (models.empty()) throw ConfigError("protocol: no models configured");
    for (const auto& m : models)
        if (!is_model_tag(m)) throw ConfigError("protocol: unknown model tag '" + m + "'");

    const auto portion = split.training_portion();
    if (portion.empty() || split.test.empty()) throw Error("protocol: empty training portion or test set");
    const std::unordered_set<std::size_t> validation(split.validation.begin(), split.validation.end());
    const Dataset test = data.subset(split.test);

    AgreementReport report;
    report.plan = plan;
    report.n_train = portion.size();
    report.n_test = split.test.size();
    report.resample_size = plan.resample_size(portion.size());
    report.unadjusted = unadjusted_effect(data.t, data.y, plan);

    const auto replicates = static_cast<std::size_t>(plan.replicates);
    std::vector<std::vector<std::size_t>> fit_rows(replicates), val_rows(replicates);
    for (std::size_t r = 0; r < replicates; ++r)
        for (auto k : bootstrap_indices(plan, portion.size(), r)) {
            const auto row = portion[k];
            (validation.contains(row) ? val_rows[r] : fit_rows[r]).push_back(row);
        }

    struct Slot {
        bool ok = false;
        FitOutcome outcome;
        std::string error;
    };
    const std::size_t jobs = models.size() * replicates;
    std::vector<Slot> slots(jobs);
    std::atomic<std::size_t> next{0};
    auto worker = [&] {
        for (std::size_t j = next++; j < jobs; j = next++) {
            const std::size_t m = j / replicates, r = j % replicates;
            Slot& slot = slots[j];
            try {
                const Dataset fit = data.subset(fit_rows[r]);
                const Dataset val = data.subset(val_rows[r]);
                slot.outcome = estimate_once(models[m], fit, val, test, settings, derive_seed(plan.seed, models[m], r));
                slot.ok = std::isfinite(slot.outcome.ate) && std::isfinite(slot.outcome.rmse);
                if (!slot.ok) slot.error = "non-finite estimate";
            } catch (const std::exception& e) {
                slot.error = e.what();
            }
        }
    };
    const int workers = std::clamp(threads, 1, static_cast<int>(std::min<std::size_t>(jobs, 256)));
    if (workers == 1) {
        worker();
    } else {
        std::vector<std::thread> pool;
        for (int w = 0; w < workers; ++w) pool.emplace_back(worker);
        for (auto& th : pool) th.join();
    }

    for (std::size_t m = 0; m < models.size(); ++m) {
        ModelResult res;
        res.tag = models[m];
        for (std::size_t r = 0; r < replicates; ++r) {
            const Slot& slot = slots[m * replicates + r];
            if (slot.ok) {
                res.ate_samples.push_back(slot.outcome.ate);
                res.rmse_samples.push_back(slot.outcome.rmse);
            } else {
                res.failures.push_back("replicate " + std::to_string(r) + ": " + slot.error);
            }
        }
        res.failed = res.failures.size() * 10 > replicates;
        if (!res.ate_samples.empty()) {
            res.ate = {mean_of(res.ate_samples), percentile_ci(res.ate_samples)};
            res.rmse = {mean_of(res.rmse_samples), percentile_ci(res.rmse_samples)};
            res.box = boxplot(res.ate_samples);
        }
        report.models.push_back(std::move(res));
    }
    report.flags = agreement(report.models, report.reference);
    return report;
}

namespace {

constexpr PublishedRow kEarly[] = {
    {"LR", 15.31, 11.69, 19.80, 58.48, 57.91, 59.11},      {"DR-IPW", 14.54, 10.29, 19.00, 59.09, 58.15, 60.10},
    {"Blocking", 15.59, 11.44, 20.29, 60.02, 58.27, 61.71}, {"BART", 20.11, 14.17, 27.50, 48.62, 45.12, 56.81},
    {"TARNet", 17.70, 8.80, 25.60, 51.79, 50.74, 53.53},    {"CfR", 18.14, 9.28, 27.35, 51.82, 50.83, 53.52},
};
constexpr PublishedRow kLate[] = {
    {"LR", 14.47, 10.34, 19.34, 53.88, 53.41, 54.58},      {"DR-IPW", 13.53, 8.88, 19.45, 54.14, 53.58, 54.96},
    {"Blocking", 14.87, 9.39, 19.34, 53.22, 51.88, 55.14}, {"BART", 13.99, 6.70, 20.34, 50.44, 47.35, 55.40},
    {"TARNet", 15.13, 5.66, 25.97, 50.61, 48.80, 52.01},   {"CfR", 15.26, 5.54, 24.94, 50.59, 48.58, 51.54},
};

std::string fixed(double v, int digits) {
    if (!std::isfinite(v)) return "NA";
    return csv::format_number(v, digits);
}

std::string with_ci(const Estimate& e, int digits = 2) {
    return fixed(e.value, digits) + " (" + fixed(e.ci.lo, digits) + ", " + fixed(e.ci.hi, digits) + ")";
}

nlohmann::ordered_json estimate_json(const Estimate& e) {
    return {{"mean", e.value}, {"ci_lo", e.ci.lo}, {"ci_hi", e.ci.hi}};
}

}  // namespace

std::span<const PublishedRow> published_rows(cohort::OutcomeWindow window) {
    if (window == cohort::OutcomeWindow::early) return kEarly;
    return kLate;
}

Estimate published_unadjusted(cohort::OutcomeWindow window) {
    if (window == cohort::OutcomeWindow::early) return {12.89, {7.88, 17.22}};
    return {11.88, {7.88, 16.91}};
}

void write_summary(std::ostream& out, const AgreementReport& report, std::string_view outcome) {
    using nlohmann::ordered_json;
    ordered_json doc;
    doc["outcome"] = outcome;
    doc["bootstrap"] = {{"replicates", report.plan.replicates},
                        {"frac", report.plan.frac},
                        {"seed", report.plan.seed},
                        {"n_train", report.n_train},
                        {"resample_size", report.resample_size},
                        {"n_test", report.n_test}};
    doc["unadjusted"] = estimate_json(report.unadjusted);
    ordered_json models = ordered_json::array();
    for (const auto& m : report.models) {
        ordered_json j;
        j["model"] = m.tag;
        j["status"] = m.failed ? "failed" : "ok";
        j["replicates_ok"] = m.ate_samples.size();
        j["replicates_failed"] = m.failures.size();
        if (!m.ate_samples.empty()) {
            j["ate"] = estimate_json(m.ate);
            j["rmse"] = estimate_json(m.rmse);
            j["boxplot"] = {{"ci_lo", m.box.ci_lo}, {"q1", m.box.q1}, {"median", m.box.median}, {"q3", m.box.q3}, {"ci_hi", m.box.ci_hi}};
        }
        if (!m.failures.empty()) j["diagnostics"] = m.failures;
        models.push_back(std::move(j));
    }
    doc["models"] = std::move(models);
    ordered_json overlaps = ordered_json::object();
    for (const auto& [tag, ok] : report.flags.overlaps_reference) overlaps[tag] = ok;
    doc["agreement"] = {{"all_ci_above_zero", report.flags.all_above_zero},
                        {"max_pairwise_gap", report.flags.max_gap},
                        {"overlaps_target_trial_ci", overlaps}};
    doc["reference"] = {{"target_trial_ate", report.reference.trial_ate},
                        {"target_trial_ci", {report.reference.trial_ci.lo, report.reference.trial_ci.hi}},
                        {"note", "published constants for comparison only; not reproduced by this run"}};
    for (auto w : {cohort::OutcomeWindow::early, cohort::OutcomeWindow::late}) {
        ordered_json rows = ordered_json::array();
        for (const auto& r : published_rows(w))
            rows.push_back({{"model", r.model}, {"ate", {r.ate, r.ate_lo, r.ate_hi}}, {"rmse", {r.rmse, r.rmse_lo, r.rmse_hi}}});
        const auto u = published_unadjusted(w);
        const char* key = w == cohort::OutcomeWindow::early ? "published_early" : "published_late";
        doc["reference"][key] = {{"unadjusted", {u.value, u.ci.lo, u.ci.hi}}, {"models", std::move(rows)}};
    }
    out << doc.dump(2) << '\n';
}

void write_table_csv(std::ostream& out, const AgreementReport& report) {
    csv::write_row(out, {"model", "ate", "ate_lo", "ate_hi", "rmse", "rmse_lo", "rmse_hi", "replicates_ok", "status"});
    for (const auto& m : report.models) {
        const bool has = !m.ate_samples.empty();
        auto num = [&](double v) { return has ? fixed(v, 6) : std::string("NA"); };
        csv::write_row(out, {display_name(m.tag), num(m.ate.value), num(m.ate.ci.lo), num(m.ate.ci.hi), num(m.rmse.value),
                             num(m.rmse.ci.lo), num(m.rmse.ci.hi), std::to_string(m.ate_samples.size()),
                             m.failed ? "failed" : "ok"});
    }
}

void write_table_text(std::ostream& out, const AgreementReport& report) {
    char line[160];
    std::snprintf(line, sizeof line, "%-10s %-26s %-26s\n", "Model", "ATE", "RMSE");
    out << line;
    for (const auto& m : report.models) {
        const std::string ate = m.ate_samples.empty() ? "NA" : with_ci(m.ate);
        const std::string rmse = m.ate_samples.empty() ? "NA" : with_ci(m.rmse);
        std::snprintf(line, sizeof line, "%-10s %-26s %-26s%s\n", display_name(m.tag).c_str(), ate.c_str(), rmse.c_str(),
                      m.failed ? "  [failed]" : "");
        out << line;
    }
    out << "\nUnadjusted effect: " << with_ci(report.unadjusted) << '\n';
    out << "All ATE CIs above zero: " << (report.flags.all_above_zero ? "yes" : "no") << '\n';
    out << "Max pairwise gap of ATE means: " << fixed(report.flags.max_gap, 2) << '\n';
    out << "Reference: target-trial ATE 15 (3, 27)\n";
}

void write_boxplot_csv(std::ostream& out, const AgreementReport& report) {
    csv::write_row(out, {"model", "ci_lo", "q1", "median", "q3", "ci_hi", "mean"});
    for (const auto& m : report.models) {
        if (m.ate_samples.empty()) continue;
        csv::write_row(out, {display_name(m.tag), fixed(m.box.ci_lo, 6), fixed(m.box.q1, 6), fixed(m.box.median, 6),
                             fixed(m.box.q3, 6), fixed(m.box.ci_hi, 6), fixed(m.ate.value, 6)});
    }
}

void write_samples_csv(std::ostream& out, const AgreementReport& report) {
    csv::write_row(out, {"model", "sample", "ate", "rmse"});
    for (const auto& m : report.models)
        for (std::size_t k = 0; k < m.ate_samples.size(); ++k)
            csv::write_row(out, {m.tag, std::to_string(k), fixed(m.ate_samples[k], 6), fixed(m.rmse_samples[k], 6)});
}

void write_overlap_csv(std::ostream& out, const linprop::OverlapHistogram& h) {
    csv::write_row(out, {"bin_lo", "bin_hi", "control", "treated"});
    for (int b = 0; b < h.bins; ++b)
        csv::write_row(out, {fixed(static_cast<double>(b) / h.bins, 4), fixed(static_cast<double>(b + 1) / h.bins, 4),
                             std::to_string(h.control[static_cast<std::size_t>(b)]),
                             std::to_string(h.treated[static_cast<std::size_t>(b)])});
}

void write_balance_csv(std::ostream& out, std::span<const std::string> names, const VectorXd& before,
                       const VectorXd& after) {
    csv::write_row(out, {"covariate", "nmd_unweighted", "nmd_ipw", "abs_unweighted", "abs_ipw"});
    for (std::size_t j = 0; j < names.size(); ++j) {
        const auto k = static_cast<Eigen::Index>(j);
        csv::write_row(out, {names[j], fixed(before(k), 6), fixed(after(k), 6), fixed(std::abs(before(k)), 6),
                             fixed(std::abs(after(k)), 6)});
    }
}

}  // namespace tte::eval
