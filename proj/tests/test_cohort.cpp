#include <doctest.h>

#include <algorithm>
#include <set>
#include <sstream>

#include "support.hpp"
#include "tte/cohort.hpp"
#include "tte/error.hpp"

using namespace tte;
using namespace tte::cohort;
using tte::test::at;
using tte::test::iso;
using tte::test::parse;

namespace {

const CovariateSpec& spec() {
    static const CovariateSpec s = CovariateSpec::standard();
    return s;
}

Observation candidate(double pf, double fio2, double peep, int treatment = 0, double hours_long = 24) {
    Observation obs;
    obs.x.assign(spec().size(), 0.0);
    obs.missing.assign(spec().size(), 0);
    obs.x[*spec().index_of("pao2")] = pf * fio2 / 100.0;
    obs.x[*spec().index_of("fio2")] = fio2;
    obs.x[*spec().index_of("peep")] = peep;
    obs.x[*spec().index_of("pf_ratio")] = pf;
    obs.treatment = treatment;
    ingest::Session s;
    s.start = at(iso(0));
    s.end = at(iso(hours_long));
    s.parent_end = s.end;
    s.position = treatment ? ingest::Position::prone : ingest::Position::supine;
    obs.session = s;
    return obs;
}

ingest::Session session(double from, double to, ingest::Position p = ingest::Position::supine) {
    ingest::Session s;
    s.patient_id = "p1";
    s.start = at(iso(from));
    s.end = at(iso(to));
    s.parent_end = s.end;
    s.position = p;
    return s;
}

double value(const CovariateRow& row, std::string_view name) { return row.x[*spec().index_of(name)]; }
bool missing(const CovariateRow& row, std::string_view name) { return row.missing[*spec().index_of(name)] != 0; }

CovariateSpec two_column_spec() {
    return CovariateSpec({{"peep", CovariateKind::numeric, "cmH2O", "peep", Extraction::windowed, std::nullopt},
                          {"copd", CovariateKind::binary, "", "copd", Extraction::comorbidity, std::nullopt}});
}

Observation row2(std::optional<double> peep, std::optional<double> copd) {
    Observation obs;
    obs.x = {peep.value_or(0.0), copd.value_or(0.0)};
    obs.missing = {std::uint8_t(!peep), std::uint8_t(!copd)};
    obs.y_early = 1.0;
    return obs;
}

}  // namespace

TEST_SUITE("cohort") {

TEST_CASE("default covariate spec has the 28 baseline covariates") {
    CHECK(spec().size() == 28);
    std::set<std::string> names;
    for (const auto& e : spec().entries()) names.insert(e.name);
    CHECK(names.size() == 28);
    for (auto n : {"age", "bmi", "morbid_obesity", "peep", "fio2", "pao2", "pf_ratio", "paco2"}) CHECK(spec().index_of(n));
}

TEST_CASE("duplicate covariate names are rejected") {
    CovariateEntry e{"age", CovariateKind::numeric, "y", "age", Extraction::patient_static, std::nullopt};
    CHECK_THROWS_AS(CovariateSpec({e, e}), ConfigError);
}

TEST_CASE("P/F = 150 is excluded") { CHECK_FALSE(meets_inclusion(candidate(150, 80, 10), spec())); }

TEST_CASE("P/F = 149 with FiO2 = 60 and PEEP = 5 is included") {
    CHECK(meets_inclusion(candidate(149, 60, 5), spec()));
}

TEST_CASE("threshold neighbours") {
    CHECK_FALSE(meets_inclusion(candidate(149, 59.9, 5), spec()));
    CHECK_FALSE(meets_inclusion(candidate(149, 60, 4.9), spec()));
}

TEST_CASE("prone sessions longer than 96h are excluded") {
    CHECK_FALSE(meets_inclusion(candidate(100, 80, 10, 1, 97), spec()));
    CHECK(meets_inclusion(candidate(100, 80, 10, 1, 96), spec()));
    CHECK(meets_inclusion(candidate(100, 80, 10, 0, 97), spec()));
}

TEST_CASE("missing baseline excludes") {
    auto obs = candidate(100, 80, 10);
    obs.missing[*spec().index_of("peep")] = 1;
    CHECK_FALSE(has_baseline(obs, spec()));
    CHECK_FALSE(meets_inclusion(obs, spec()));
}

TEST_CASE("funnel accounts for one P/F exclusion") {
    std::vector<Observation> rows{candidate(100, 80, 10), candidate(200, 80, 10), candidate(120, 70, 8)};
    for (auto& r : rows) r.y_early = 1.0;
    const auto result = apply_inclusion(rows, spec());
    CHECK(result.funnel.sessions_in == 3);
    CHECK(result.funnel.baseline_present == 3);
    CHECK(result.funnel.criteria_met == 2);
    CHECK(result.funnel.early_outcome == 2);
    CHECK(result.funnel.late_outcome == 0);
    CHECK(result.cohort.size() == 2);
}

TEST_CASE("inclusion verdicts are row-local") {
    std::vector<Observation> rows{candidate(100, 80, 10), candidate(149, 60, 5), candidate(300, 80, 10)};
    const auto all = apply_inclusion(rows, spec()).cohort.size();
    rows.erase(rows.begin() + 2);
    CHECK(apply_inclusion(rows, spec()).cohort.size() == all);
}

TEST_CASE("last lookback value wins") {
    const auto log = parse("p1," + iso(5) + ",measurement,peep,6\np1," + iso(7) + ",measurement,peep,9\n");
    const auto row = extract_covariates(session(8, 20), log.patients[0].events, spec());
    CHECK(value(row, "peep") == 9.0);
    CHECK_FALSE(missing(row, "peep"));
}

TEST_CASE("fallback uses the first value in the 30 minutes after start") {
    const auto log = parse("p1," + iso(8 + 20.0 / 60) + ",measurement,pao2,77\np1," + iso(8 + 25.0 / 60) +
                           ",measurement,pao2,88\np1," + iso(9) + ",measurement,fio2,60\n");
    const auto row = extract_covariates(session(8, 20), log.patients[0].events, spec());
    CHECK(value(row, "pao2") == 77.0);
    CHECK(missing(row, "fio2"));
}

TEST_CASE("lookback is limited to 8 hours") {
    const auto log = parse("p1," + iso(0) + ",measurement,peep,6\np1," + iso(20) + ",measurement,peep,9\n");
    CHECK(missing(extract_covariates(session(8.5, 20), log.patients[0].events, spec()), "peep"));
}

TEST_CASE("derived covariates") {
    const auto log = parse("p1," + iso(1) + ",measurement,pao2,90\np1," + iso(1) + ",measurement,fio2,60\n"
                           "p1," + iso(1) + ",measurement,bmi,36\n");
    const auto row = extract_covariates(session(2, 20), log.patients[0].events, spec());
    CHECK(value(row, "pf_ratio") == doctest::Approx(150.0));
    CHECK(value(row, "morbid_obesity") == 1.0);
}

TEST_CASE("medication flag uses the 8h lookback") {
    const auto log = parse("p1," + iso(1) + ",medication,vasopressors,1\np1," + iso(15) + ",medication,vasopressors,1\n");
    const auto& events = log.patients[0].events;
    CHECK(value(extract_covariates(session(8, 20), events, spec()), "vasopressors") == 1.0);
    CHECK(value(extract_covariates(session(10, 14), events, spec()), "vasopressors") == 0.0);
}

TEST_CASE("outcome windows") {
    const auto log = parse("p1," + iso(3) + ",measurement,pf_ratio,110\np1," + iso(5) +
                           ",measurement,pf_ratio,130\np1," + iso(13) + ",measurement,pf_ratio,140\n");
    const auto& events = log.patients[0].events;
    const auto six = session(0, 6);
    CHECK(extract_outcome(six, events, OutcomeWindow::early)->value == 130.0);
    CHECK_FALSE(extract_outcome(six, events, OutcomeWindow::late));
    CHECK_FALSE(extract_outcome(session(0, 10), events, OutcomeWindow::late));
    CHECK(extract_outcome(session(0, 20), events, OutcomeWindow::late)->value == 140.0);
    CHECK_FALSE(extract_outcome(session(12, 32), events, OutcomeWindow::early));
}

TEST_CASE("covariates precede outcomes") {
    const auto log = parse("p1," + iso(0) + ",measurement,peep,8\np1," + iso(7.9) + ",measurement,fio2,70\n"
                           "p1," + iso(8.2) + ",measurement,pao2,70\np1," + iso(11) + ",measurement,pf_ratio,120\n");
    const auto obs = make_observation(session(8, 20), log.patients[0].events, spec());
    REQUIRE(obs.latest_covariate_time);
    REQUIRE(obs.earliest_outcome_time);
    CHECK(*obs.latest_covariate_time < *obs.earliest_outcome_time);
}

TEST_CASE("imputation fills train means and false flags") {
    const auto s = two_column_spec();
    std::vector<Observation> train{row2(10, 1), row2(20, std::nullopt)};
    const auto stats = fit_impute(train, s);
    CHECK(stats.fill[0] == 15.0);
    std::vector<Observation> test{row2(std::nullopt, std::nullopt)};
    apply_impute(test, stats);
    CHECK(test[0].x[0] == 15.0);
    CHECK(test[0].x[1] == 0.0);
    CHECK(test[0].complete());
    auto again = test;
    apply_impute(again, stats);
    CHECK(again[0].x == test[0].x);
}

TEST_CASE("imputation never sees test rows") {
    // 5 rows: train {10, 20, 30}, test {100, missing}; train mean 20, pooled mean 40
    Cohort c;
    c.spec = two_column_spec();
    for (std::optional<double> v : {std::optional<double>(10), std::optional<double>(20), std::optional<double>(30),
                                    std::optional<double>(100), std::optional<double>()})
        c.observations.push_back(row2(v, 0));
    SplitIndex idx;
    idx.train = {0, 1};
    idx.validation = {2};
    idx.test = {3, 4};
    const auto imputed = impute_with_split(c, idx);
    CHECK(imputed.observations[4].x[0] == 20.0);
    CHECK(imputed.observations[4].x[0] != 40.0);
}

TEST_CASE("imputation fails when a covariate is never observed") {
    std::vector<Observation> train{row2(std::nullopt, 0), row2(std::nullopt, 1)};
    CHECK_THROWS_AS(fit_impute(train, two_column_spec()), FitError);
}

TEST_CASE("split sizes, disjointness and determinism") {
    const auto a = split(100, 7);
    CHECK(a.test.size() == 20);
    std::vector<std::size_t> all;
    for (auto* part : {&a.train, &a.validation, &a.test}) all.insert(all.end(), part->begin(), part->end());
    std::sort(all.begin(), all.end());
    CHECK(std::adjacent_find(all.begin(), all.end()) == all.end());
    CHECK(all.size() == 100);
    CHECK(all.back() == 99);
    CHECK(a.validation.size() == 24);
    const auto b = split(100, 7);
    CHECK(a.train == b.train);
    CHECK(a.test == b.test);
    CHECK(split(100, 8).test != a.test);
    CHECK_THROWS_AS(split(9, 1), ConfigError);
}

TEST_CASE("cohort CSV round trip keeps missingness") {
    Cohort c;
    c.spec = spec();
    auto obs = candidate(100, 80, 10, 1);
    obs.patient_id = "p9";
    obs.missing[*spec().index_of("age")] = 1;
    obs.y_early = 123.5;
    c.observations.push_back(obs);
    std::stringstream buf;
    write_cohort(buf, c);
    const auto back = read_cohort(buf, spec());
    REQUIRE(back.size() == 1);
    const auto& r = back.observations[0];
    CHECK(r.patient_id == "p9");
    CHECK(r.treatment == 1);
    CHECK(r.missing[*spec().index_of("age")] == 1);
    CHECK(r.x[*spec().index_of("pf_ratio")] == doctest::Approx(100.0));
    CHECK(*r.y_early == doctest::Approx(123.5));
    CHECK_FALSE(r.y_late);
}

}
