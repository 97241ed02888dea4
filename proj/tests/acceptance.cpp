// Acceptance run: one PASS/FAIL line per primary criterion.
// Usage: tte_acceptance [substring ...] runs only the criteria whose key matches.

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <functional>
#include <numeric>
#include <sstream>
#include <string>
#include <vector>

#include "tte/bart.hpp"
#include "tte/cfrnet.hpp"
#include "tte/cohort.hpp"
#include "tte/evaluation.hpp"
#include "tte/ingest.hpp"
#include "tte/linprop.hpp"
#include "tte/rng.hpp"
#include "tte/synthetic.hpp"
#include "tte/transport.hpp"

using namespace tte;
using Eigen::MatrixXd;
using Eigen::VectorXd;

namespace {

struct Verdict {
    bool pass = false;
    std::string detail;
};

struct Criterion {
    std::string key;
    std::string title;
    double budget_s;
    std::function<Verdict()> run;
};

std::string fmt(const char* f, auto... args) {
    char buf[512];
    std::snprintf(buf, sizeof buf, f, args...);
    return buf;
}

MatrixXd gaussian(Rng& rng, Eigen::Index rows, Eigen::Index cols) {
    std::normal_distribution<double> z;
    MatrixXd m(rows, cols);
    for (Eigen::Index j = 0; j < cols; ++j)
        for (Eigen::Index i = 0; i < rows; ++i) m(i, j) = z(rng);
    return m;
}

// The CLI estimate path: seeded split, fit on train (+ validation for the
// non-neural models), ATE as mean CATE over the test rows.
struct Trial {
    Dataset fit, validation, test;
};

Trial trial(synthetic::DgpKind kind, std::uint64_t seed) {
    synthetic::DgpSpec spec;
    spec.kind = kind;
    spec.d = 10;
    spec.n = 2000;
    spec.sigma = 1.0;
    spec.tau = 10.0;
    const auto data = synthetic::generate(spec, seed).data;
    const auto s = cohort::split(static_cast<std::size_t>(data.rows()), seed);
    return {data.subset(s.train), data.subset(s.validation), data.subset(s.test)};
}

double trial_ate(const std::string& tag, const Trial& t, std::uint64_t seed) {
    return eval::estimate_once(tag, t.fit, t.validation, t.test, eval::ModelSettings{}, derive_seed(seed, tag, 0)).ate;
}

constexpr int kSeeds = 10;

Verdict session_fixture() {
    std::ifstream in(TTE_TEST_DATA "/two_arm_patient_events.csv");
    if (!in) return {false, "fixture missing"};
    const auto counts = ingest::count_sessions(ingest::slice_all(ingest::parse_events(in)).sessions);
    return {counts.supine() == 4 && counts.prone == 2,
            fmt("supine=%zu (original %zu + artificial %zu) prone=%zu; want 4 + 2", counts.supine(),
                counts.original_supine, counts.artificial_supine, counts.prone)};
}

Verdict ols_oracle() {
    Rng rng(2024);
    std::bernoulli_distribution coin(0.5);
    double worst = 0.0;
    for (int rep = 0; rep < 50; ++rep) {
        const MatrixXd x = gaussian(rng, 50, 5);
        VectorXd t(50);
        for (auto& v : t) v = coin(rng);
        const VectorXd y = gaussian(rng, 50, 1).col(0) + 3.0 * t + x * VectorXd::LinSpaced(5, -1.0, 1.0);
        const auto fit = linprop::fit_ols(x, t, y);
        MatrixXd d(50, 7);
        d << VectorXd::Ones(50), t, x;
        const VectorXd b = (d.transpose() * d).ldlt().solve(d.transpose() * y);
        VectorXd mine(7);
        mine << fit.intercept, fit.treatment, fit.coefficients;
        worst = std::max(worst, (mine - b).cwiseAbs().maxCoeff());
    }
    return {worst <= 1e-8, fmt("max |coef - normal equations| = %.2e over 50 problems; tol 1e-8", worst)};
}

Verdict classical_recovery() {
    const std::vector<std::string> tags{"lr", "dripw", "blocking"};
    std::vector<int> hits(tags.size(), 0);
    std::vector<double> worst(tags.size(), 0.0);
    for (int s = 1; s <= kSeeds; ++s) {
        const auto t = trial(synthetic::DgpKind::linear_confounded, static_cast<std::uint64_t>(s));
        for (std::size_t m = 0; m < tags.size(); ++m) {
            const double err = std::abs(trial_ate(tags[m], t, static_cast<std::uint64_t>(s)) - 10.0);
            hits[m] += err <= 0.5;
            worst[m] = std::max(worst[m], err);
        }
    }
    const bool pass = std::all_of(hits.begin(), hits.end(), [](int h) { return h >= 9; });
    return {pass, fmt("|ATE-10|<=0.5 in LR %d/10, DR-IPW %d/10, Blocking %d/10 (need >=9); worst %.3f %.3f %.3f", hits[0],
                      hits[1], hits[2], worst[0], worst[1], worst[2])};
}

Verdict flexible_recovery() {
    const std::vector<std::string> tags{"bart", "tarnet", "cfr"};
    std::vector<int> hits(tags.size(), 0);
    std::vector<double> worst(tags.size(), 0.0);
    for (int s = 1; s <= kSeeds; ++s) {
        const auto t = trial(synthetic::DgpKind::linear_confounded, static_cast<std::uint64_t>(s));
        for (std::size_t m = 0; m < tags.size(); ++m) {
            const double err = std::abs(trial_ate(tags[m], t, static_cast<std::uint64_t>(s)) - 10.0);
            hits[m] += err <= 1.5;
            worst[m] = std::max(worst[m], err);
        }
    }
    const bool pass = std::all_of(hits.begin(), hits.end(), [](int h) { return h >= 8; });
    return {pass, fmt("|ATE-10|<=1.5 in BART %d/10, TARNet %d/10, CfR %d/10 (need >=8); worst %.3f %.3f %.3f", hits[0],
                      hits[1], hits[2], worst[0], worst[1], worst[2])};
}

Verdict nonlinearity_separation() {
    int bart_wins = 0, cfr_wins = 0;
    double lr_sum = 0.0, bart_sum = 0.0, cfr_sum = 0.0;
    for (int s = 1; s <= kSeeds; ++s) {
        const auto seed = static_cast<std::uint64_t>(s);
        const auto t = trial(synthetic::DgpKind::nonlinear, seed);
        const double lr = std::abs(synthetic::epsilon_ate(trial_ate("lr", t, seed), t.test));
        const double bart = std::abs(synthetic::epsilon_ate(trial_ate("bart", t, seed), t.test));
        const double cfr = std::abs(synthetic::epsilon_ate(trial_ate("cfr", t, seed), t.test));
        bart_wins += bart < lr;
        cfr_wins += cfr < lr;
        lr_sum += lr;
        bart_sum += bart;
        cfr_sum += cfr;
    }
    return {bart_wins >= 8 && cfr_wins >= 8,
            fmt("eps_ATE below LR: BART %d/10, CfR %d/10 (need >=8); mean eps LR %.3f BART %.3f CfR %.3f", bart_wins,
                cfr_wins, lr_sum / kSeeds, bart_sum / kSeeds, cfr_sum / kSeeds)};
}

Verdict degenerate_reductions() {
    const auto t = trial(synthetic::DgpKind::linear_confounded, 77);
    const auto& d = t.fit;
    const double ols = linprop::ols_ate(linprop::fit_ols(d.x, d.t, d.y)).value;
    const linprop::PropensityScores half{VectorXd::Constant(d.rows(), 0.5)};
    const double dr = linprop::dr_ipw_ate(d.x, d.t, d.y, half).value;
    const auto scores = linprop::clip_scores(linprop::fit_propensity(d.x, d.t).predict(d.x));
    const double one_block = linprop::blocking_ate(d.x, d.t, d.y, scores, 1).value;

    cfr::CfrConfig cfr_zero;
    cfr_zero.alpha = 0.0;
    const cfr::CfrConfig tarnet = cfr::CfrConfig::tarnet();
    const auto model = cfr::init_model(static_cast<int>(d.cols()), cfr_zero, 77);
    std::vector<std::size_t> rows(64);
    std::iota(rows.begin(), rows.end(), 0);
    const auto batch = d.subset(rows);
    const double loss_gap = std::abs(cfr::cfr_loss(model, batch, cfr_zero).total - cfr::cfr_loss(model, batch, tarnet).total);

    const bool pass = dr == ols && one_block == ols && loss_gap <= 1e-12;
    return {pass, fmt("DR-IPW(e=0.5)-OLS = %.1e, one-block-OLS = %.1e (exact); |CfR(a=0)-TARNet| = %.1e (tol 1e-12)",
                      dr - ols, one_block - ols, loss_gap)};
}

Verdict transport_oracle() {
    Rng rng(31);
    std::uniform_int_distribution<int> size(1, 8), dim(1, 4);
    std::uniform_real_distribution<double> shift(-1.0, 1.0);
    double worst = 0.0, self = 0.0;
    for (int rep = 0; rep < 200; ++rep) {
        const int k = dim(rng);
        const MatrixXd a = gaussian(rng, size(rng), k);
        const MatrixXd b = gaussian(rng, size(rng), k).rowwise() + Eigen::RowVectorXd::Constant(k, shift(rng));
        const double exact = cfr::wasserstein_exact(a, b);
        const double approx = cfr::wasserstein_approx(a, b);
        worst = std::max(worst, std::abs(approx - exact) / exact);
        self = std::max(self, cfr::wasserstein_approx(a, a));
    }
    return {worst <= 0.05 && self < 1e-6,
            fmt("max relative error %.4f over 200 pairs (tol 0.05); max Wass(A,A) %.1e (tol 1e-6)", worst, self)};
}

Verdict gradient_check() {
    Rng rng(41);
    std::uniform_int_distribution<int> rows(2, 8), cols(2, 10);
    double worst = 0.0;
    for (int rep = 0; rep < 20; ++rep) {
        const int n = rows(rng), d = cols(rng);
        Dataset batch;
        batch.x = gaussian(rng, n, d);
        batch.y = gaussian(rng, n, 1).col(0);
        batch.t.resize(n);
        for (int i = 0; i < n; ++i) batch.t(i) = (i + rep) % 2;
        cfr::CfrConfig config;
        const auto model = cfr::init_model(d, config, static_cast<std::uint64_t>(100 + rep));
        worst = std::max(worst, cfr::gradient_check(model, batch, config, static_cast<std::uint64_t>(rep)));
    }
    return {worst <= 1e-4, fmt("max relative error %.2e over 20 batches (tol 1e-4)", worst)};
}

Verdict bootstrap_coverage() {
    int covered = 0;
    const std::vector<std::string> lr{"lr"};
    for (int s = 1; s <= 40; ++s) {
        synthetic::DgpSpec spec;
        const auto data = synthetic::generate(spec, static_cast<std::uint64_t>(1000 + s)).data;
        const auto split = cohort::split(static_cast<std::size_t>(data.rows()), static_cast<std::uint64_t>(s));
        eval::BootstrapPlan plan;
        plan.replicates = 100;
        plan.frac = 0.95;
        plan.seed = static_cast<std::uint64_t>(s);
        const auto ci = eval::run_protocol(data, split, lr, eval::ModelSettings{}, plan).models[0].ate.ci;
        covered += ci.lo <= 10.0 && 10.0 <= ci.hi;
    }
    return {covered >= 34, fmt("95%% CI contains 10 in %d/40 runs (need >=34)", covered)};
}

Verdict protocol_fidelity() {
    synthetic::DgpSpec spec;
    const auto table = synthetic::generate(spec, 5);
    // through the cohort layer, as the CLI does
    const auto c = synthetic::to_cohort(table);
    const auto split = cohort::split(c.size(), 5);
    const auto data = cohort::to_dataset(cohort::impute_with_split(c, split), cohort::OutcomeWindow::early);
    eval::BootstrapPlan plan;
    plan.seed = 5;
    const std::vector<std::string> models{"lr", "dripw", "blocking"};

    auto render = [&](const eval::AgreementReport& r) {
        std::ostringstream out;
        eval::write_summary(out, r, "early");
        eval::write_table_csv(out, r);
        eval::write_table_text(out, r);
        eval::write_samples_csv(out, r);
        eval::write_boxplot_csv(out, r);
        return out.str();
    };
    const auto a = eval::run_protocol(data, split, models, eval::ModelSettings{}, plan);
    const auto b = eval::run_protocol(data, split, models, eval::ModelSettings{}, plan);
    const bool identical = render(a) == render(b);

    const std::size_t n_train = split.training_portion().size();
    const auto want = static_cast<std::size_t>(std::ceil(0.95 * static_cast<double>(n_train)));
    bool sizes = a.resample_size == want;
    for (int r = 0; r < plan.replicates; ++r) sizes = sizes && eval::bootstrap_indices(plan, n_train, r).size() == want;

    bool replicates = a.plan.replicates == 100;
    for (const auto& m : a.models) replicates = replicates && m.ate_samples.size() == 100 && m.rmse_samples.size() == 100;

    // every replicate is scored on the same held-out rows: refit replicate 0
    // and 99 by hand against split.test
    const auto portion = split.training_portion();
    const auto test = data.subset(split.test);
    bool fixed_test = a.n_test == split.test.size();
    for (std::size_t r : {std::size_t(0), std::size_t(99)}) {
        std::vector<std::size_t> rows;
        for (auto k : eval::bootstrap_indices(plan, n_train, r)) rows.push_back(portion[k]);
        const auto fit = data.subset(rows);
        const auto ols = linprop::fit_ols(fit.x, fit.t, fit.y);
        const double rmse = eval::rmse_factual(ols.predict(test.x, test.t), test.y);
        fixed_test = fixed_test && std::abs(a.models[0].rmse_samples[r] - rmse) <= 1e-12 * std::max(1.0, rmse);
    }

    std::ostringstream csv;
    eval::write_table_csv(csv, a);
    std::istringstream lines(csv.str());
    std::string header, line;
    std::getline(lines, header);
    int rows = 0;
    while (std::getline(lines, line)) rows += std::count(line.begin(), line.end(), ',') == 8;
    const bool shape = header == "model,ate,ate_lo,ate_hi,rmse,rmse_lo,rmse_hi,replicates_ok,status" && rows == 3;

    return {identical && sizes && replicates && fixed_test && shape,
            fmt("resample size %zu of n_train %zu (want %zu): %s; B=100: %s; fixed test set (%zu rows): %s; results rows: %s; "
                "byte-identical rerun: %s",
                a.resample_size, n_train, want, sizes ? "ok" : "bad", replicates ? "ok" : "bad", a.n_test,
                fixed_test ? "ok" : "bad", shape ? "ok" : "bad", identical ? "ok" : "bad")};
}

Verdict inclusion_boundaries() {
    const auto spec = cohort::CovariateSpec::standard();
    auto make = [&](double pf, double fio2, double peep, int t, double hours_long) {
        cohort::Observation obs;
        obs.x.assign(spec.size(), 0.0);
        obs.missing.assign(spec.size(), 0);
        obs.x[*spec.index_of("pf_ratio")] = pf;
        obs.x[*spec.index_of("pao2")] = pf * fio2 / 100.0;
        obs.x[*spec.index_of("fio2")] = fio2;
        obs.x[*spec.index_of("peep")] = peep;
        obs.treatment = t;
        ingest::Session s;
        s.start = Instant{};
        s.end = s.start + Seconds(static_cast<long long>(hours_long * 3600));
        s.parent_end = s.end;
        s.position = t ? ingest::Position::prone : ingest::Position::supine;
        obs.session = s;
        return obs;
    };
    const bool pf150 = !cohort::meets_inclusion(make(150, 80, 10, 0, 24), spec);
    const bool pf149 = cohort::meets_inclusion(make(149, 60, 5, 0, 24), spec);
    const bool prone97 = !cohort::meets_inclusion(make(100, 80, 10, 1, 97), spec);
    return {pf150 && pf149 && prone97, fmt("P/F=150 excluded: %s; P/F=149,FiO2=60,PEEP=5 included: %s; prone 97h excluded: %s",
                                           pf150 ? "yes" : "no", pf149 ? "yes" : "no", prone97 ? "yes" : "no")};
}

}  // namespace

int main(int argc, char** argv) {
    const std::vector<Criterion> criteria{
        {"session-fixture", "Session fixture", 1, session_fixture},
        {"ols-oracle", "OLS oracle", 5, ols_oracle},
        {"classical-recovery", "Classical recovery", 30, classical_recovery},
        {"flexible-recovery", "Flexible recovery", 600, flexible_recovery},
        {"nonlinearity-separation", "Nonlinearity separation", 900, nonlinearity_separation},
        {"degenerate-reductions", "Degenerate reductions", 5, degenerate_reductions},
        {"transport-oracle", "Optimal transport oracle", 30, transport_oracle},
        {"gradient-check", "Gradient check", 60, gradient_check},
        {"bootstrap-coverage", "Bootstrap coverage", 600, bootstrap_coverage},
        {"protocol-fidelity", "Protocol fidelity", 60, protocol_fidelity},
        {"inclusion-boundaries", "Inclusion boundary tests", 1, inclusion_boundaries},
    };
    std::vector<std::string> filters(argv + 1, argv + argc);
    int failed = 0;
    for (const auto& c : criteria) {
        if (!filters.empty() &&
            std::none_of(filters.begin(), filters.end(), [&](const std::string& f) { return c.key.find(f) != std::string::npos; }))
            continue;
        const auto start = std::chrono::steady_clock::now();
        Verdict v;
        try {
            v = c.run();
        } catch (const std::exception& e) {
            v = {false, std::string("error: ") + e.what()};
        }
        const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
        const bool in_time = secs <= c.budget_s;
        const bool pass = v.pass && in_time;
        failed += !pass;
        std::printf("%s  %-26s %s [%.1fs, budget %.0fs%s]\n", pass ? "PASS" : "FAIL", c.title.c_str(), v.detail.c_str(), secs,
                    c.budget_s, in_time ? "" : ", over budget");
        std::fflush(stdout);
    }
    return failed == 0 ? 0 : 1;
}
