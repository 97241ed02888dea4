#include "tte/cohort.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <set>
#include <unordered_map>

#include "tte/csv.hpp"
#include "tte/error.hpp"
#include "tte/rng.hpp"

namespace tte::cohort {

using ingest::Event;
using ingest::Measurement;
using ingest::MedicationRecord;
using ingest::Session;

CovariateSpec::CovariateSpec(std::vector<CovariateEntry> entries) : entries_(std::move(entries)) {
    std::set<std::string> seen;
    for (std::size_t i = 0; i < entries_.size(); ++i) {
        const auto& e = entries_[i];
        if (e.name.empty()) throw ConfigError("covariate spec: empty name");
        if (!seen.insert(e.name).second) throw ConfigError("covariate spec: duplicate name '" + e.name + "'");
        if ((e.extraction == Extraction::derived) != e.derivation.has_value())
            throw ConfigError("covariate spec: '" + e.name + "' derivation does not match its extraction rule");
    }
}

CovariateSpec CovariateSpec::standard() {
    using K = CovariateKind;
    using X = Extraction;
    using Op = Derivation::Op;
    auto plain = [](std::string name, K kind, std::string units, X how) {
        CovariateEntry e{name, kind, std::move(units), name, how, std::nullopt};
        return e;
    };
    auto derived = [](std::string name, K kind, std::string units, Derivation d) {
        return CovariateEntry{std::move(name), kind, std::move(units), "", X::derived, std::move(d)};
    };
    return CovariateSpec({
        plain("age", K::numeric, "yr", X::patient_static),
        plain("male_sex", K::binary, "", X::comorbidity),
        plain("bmi", K::numeric, "kg/m2", X::patient_static),
        plain("sofa", K::numeric, "points", X::patient_static),
        plain("diabetes", K::binary, "", X::comorbidity),
        plain("renal_failure", K::binary, "", X::comorbidity),
        plain("hepatic_disease", K::binary, "", X::comorbidity),
        plain("coronary_artery_disease", K::binary, "", X::comorbidity),
        plain("cancer", K::binary, "", X::comorbidity),
        plain("copd", K::binary, "", X::comorbidity),
        plain("immunodeficiency", K::binary, "", X::comorbidity),
        derived("morbid_obesity", K::binary, "", {Op::greater_than, "bmi", "", 35.0}),
        plain("vasopressors", K::binary, "", X::medication),
        plain("neuromuscular_blockers", K::binary, "", X::medication),
        plain("renal_replacement_therapy", K::binary, "", X::medication),
        plain("glucocorticoids", K::binary, "", X::medication),
        plain("tidal_volume", K::numeric, "ml", X::windowed),
        derived("tidal_volume_per_kg_pbw", K::numeric, "ml/kg", {Op::ratio, "tidal_volume", "pbw", 1.0}),
        plain("respiratory_rate", K::numeric, "1/min", X::windowed),
        plain("peep", K::numeric, "cmH2O", X::windowed),
        plain("fio2", K::numeric, "%", X::windowed),
        plain("plateau_pressure", K::numeric, "cmH2O", X::windowed),
        plain("driving_pressure", K::numeric, "cmH2O", X::windowed),
        plain("pao2", K::numeric, "mmHg", X::windowed),
        derived("pf_ratio", K::numeric, "mmHg", {Op::ratio, "pao2", "fio2", 100.0}),
        plain("paco2", K::numeric, "mmHg", X::windowed),
        plain("arterial_ph", K::numeric, "", X::windowed),
        plain("lung_compliance_static", K::numeric, "ml/cmH2O", X::windowed),
    });
}

std::optional<std::size_t> CovariateSpec::index_of(std::string_view name) const {
    for (std::size_t i = 0; i < entries_.size(); ++i)
        if (entries_[i].name == name) return i;
    return std::nullopt;
}

std::vector<std::string> CovariateSpec::raw_variables() const {
    std::set<std::string> vars;
    for (const auto& e : entries_) {
        if (e.extraction == Extraction::derived) {
            for (const auto& op : {e.derivation->lhs, e.derivation->rhs})
                if (!op.empty() && !index_of(op)) vars.insert(op);
        } else if (e.extraction != Extraction::medication) {
            vars.insert(e.source);
        }
    }
    return {vars.begin(), vars.end()};
}

bool Observation::complete() const {
    return std::none_of(missing.begin(), missing.end(), [](std::uint8_t m) { return m != 0; });
}

namespace {

const Measurement* as_measurement(const Event& ev, std::string_view var) {
    const auto* m = std::get_if<Measurement>(&ev.payload);
    return (m && m->variable == var) ? m : nullptr;
}

// Last value of `var` with from <= time < to.
std::optional<TimedValue> last_in(std::span<const Event> events, std::string_view var, Instant from, Instant to) {
    std::optional<TimedValue> out;
    for (const auto& ev : events) {
        if (ev.timestamp >= to) break;
        if (ev.timestamp < from) continue;
        if (const auto* m = as_measurement(ev, var)) out = TimedValue{m->value, ev.timestamp};
    }
    return out;
}

// First value of `var` with from <= time <= to.
std::optional<TimedValue> first_in(std::span<const Event> events, std::string_view var, Instant from, Instant to) {
    for (const auto& ev : events) {
        if (ev.timestamp > to) break;
        if (ev.timestamp < from) continue;
        if (const auto* m = as_measurement(ev, var)) return TimedValue{m->value, ev.timestamp};
    }
    return std::nullopt;
}

std::optional<TimedValue> windowed(std::span<const Event> events, std::string_view var, const Session& s,
                                   const CohortConfig& cfg) {
    if (auto v = last_in(events, var, s.start - cfg.lookback, s.start)) return v;
    return first_in(events, var, s.start, s.start + cfg.fallback);
}

std::optional<TimedValue> patient_static(std::span<const Event> events, std::string_view var, const Session& s,
                                         const CohortConfig& cfg) {
    if (auto v = last_in(events, var, Instant::min(), s.start)) return v;
    return first_in(events, var, s.start, s.start + cfg.fallback);
}

std::optional<TimedValue> comorbidity(std::span<const Event> events, std::string_view var, const Session& s) {
    std::optional<TimedValue> out;
    for (const auto& ev : events) {
        if (ev.timestamp >= s.start) break;
        if (const auto* m = as_measurement(ev, var)) {
            const double flag = m->value != 0.0 ? 1.0 : 0.0;
            if (!out || flag > out->value) out = TimedValue{flag, ev.timestamp};
            else if (flag == out->value) out->at = ev.timestamp;
        }
    }
    return out;
}

std::optional<TimedValue> medication(std::span<const Event> events, std::string_view name, const Session& s,
                                     const CohortConfig& cfg) {
    std::optional<TimedValue> out;
    for (const auto& ev : events) {
        if (ev.timestamp > s.start) break;
        if (ev.timestamp < s.start - cfg.lookback) continue;
        const auto* rec = std::get_if<MedicationRecord>(&ev.payload);
        if (!rec || rec->name != name) continue;
        const double flag = rec->administered ? 1.0 : 0.0;
        if (!out || flag >= out->value) out = TimedValue{flag, ev.timestamp};
    }
    return out;
}

}  // namespace

CovariateRow extract_covariates(const Session& session, std::span<const Event> events, const CovariateSpec& spec,
                                const CohortConfig& config) {
    const std::size_t d = spec.size();
    CovariateRow row{std::vector<double>(d, 0.0), std::vector<std::uint8_t>(d, 1), std::nullopt};
    std::vector<std::optional<Instant>> used(d);

    auto note = [&](const std::optional<Instant>& at) {
        if (at && (!row.latest_source || *at > *row.latest_source)) row.latest_source = at;
    };

    // derived operand: an earlier covariate by name, else a raw variable
    auto operand = [&](std::size_t self, const std::string& name) -> std::optional<TimedValue> {
        if (auto j = spec.index_of(name); j && *j < self) {
            if (row.missing[*j]) return std::nullopt;
            return TimedValue{row.x[*j], used[*j].value_or(Instant::min())};
        }
        if (auto v = windowed(events, name, session, config)) return v;
        return patient_static(events, name, session, config);
    };

    for (std::size_t i = 0; i < d; ++i) {
        const auto& e = spec.at(i);
        std::optional<TimedValue> v;
        switch (e.extraction) {
            case Extraction::windowed: v = windowed(events, e.source, session, config); break;
            case Extraction::patient_static: v = patient_static(events, e.source, session, config); break;
            case Extraction::comorbidity: v = comorbidity(events, e.source, session); break;
            case Extraction::medication: v = medication(events, e.source, session, config); break;
            case Extraction::derived: {
                const auto& rule = *e.derivation;
                auto lhs = operand(i, rule.lhs);
                if (!lhs) break;
                if (rule.op == Derivation::Op::greater_than) {
                    v = TimedValue{lhs->value > rule.constant ? 1.0 : 0.0, lhs->at};
                } else {
                    auto rhs = operand(i, rule.rhs);
                    if (!rhs || rhs->value == 0.0) break;
                    v = TimedValue{rule.constant * lhs->value / rhs->value, std::max(lhs->at, rhs->at)};
                }
                break;
            }
        }
        if (v) {
            row.x[i] = v->value;
            row.missing[i] = 0;
            used[i] = v->at;
            if (v->at != Instant::min()) note(v->at);
        }
    }
    return row;
}

std::optional<TimedValue> extract_outcome(const Session& session, std::span<const Event> events, OutcomeWindow window,
                                          const CohortConfig& config) {
    const auto begin = session.start + (window == OutcomeWindow::early ? config.early_begin : config.late_begin);
    const auto end = std::min(session.start + (window == OutcomeWindow::early ? config.early_end : config.late_end),
                              session.end);
    if (begin >= end) return std::nullopt;
    return last_in(events, config.outcome_variable, begin, end);
}

Observation make_observation(const Session& session, std::span<const Event> events, const CovariateSpec& spec,
                             const CohortConfig& config) {
    Observation obs;
    obs.patient_id = session.patient_id;
    obs.session = session;
    obs.treatment = session.position == ingest::Position::prone ? 1 : 0;
    auto row = extract_covariates(session, events, spec, config);
    obs.x = std::move(row.x);
    obs.missing = std::move(row.missing);
    obs.latest_covariate_time = row.latest_source;
    for (auto w : {OutcomeWindow::early, OutcomeWindow::late}) {
        if (auto y = extract_outcome(session, events, w, config)) {
            (w == OutcomeWindow::early ? obs.y_early : obs.y_late) = y->value;
            if (!obs.earliest_outcome_time || y->at < *obs.earliest_outcome_time) obs.earliest_outcome_time = y->at;
        }
    }
    return obs;
}

std::vector<Observation> build_observations(const ingest::EventLog& log, std::span<const Session> sessions,
                                            const CovariateSpec& spec, const CohortConfig& config) {
    std::unordered_map<std::string, const ingest::PatientEvents*> by_patient;
    for (const auto& p : log.patients) by_patient.emplace(p.patient_id, &p);
    std::vector<Observation> out;
    out.reserve(sessions.size());
    static const std::vector<Event> none;
    for (const auto& s : sessions) {
        auto it = by_patient.find(s.patient_id);
        std::span<const Event> events = it == by_patient.end() ? std::span<const Event>(none) : it->second->events;
        out.push_back(make_observation(s, events, spec, config));
    }
    return out;
}

namespace {

std::size_t required_index(const CovariateSpec& spec, std::string_view name) {
    auto i = spec.index_of(name);
    if (!i) throw ConfigError("inclusion criteria need covariate '" + std::string(name) + "'");
    return *i;
}

}  // namespace

bool has_baseline(const Observation& obs, const CovariateSpec& spec) {
    for (auto name : {"pao2", "fio2", "peep"})
        if (obs.missing[required_index(spec, name)]) return false;
    return true;
}

bool meets_inclusion(const Observation& obs, const CovariateSpec& spec, const CohortConfig& config) {
    if (!has_baseline(obs, spec)) return false;
    const std::size_t i_pf = required_index(spec, "pf_ratio");
    if (obs.missing[i_pf]) return false;
    const double pf = obs.x[i_pf];
    const double fio2 = obs.x[required_index(spec, "fio2")];
    const double peep = obs.x[required_index(spec, "peep")];
    if (!(pf < config.pf_threshold)) return false;
    if (!(fio2 >= config.fio2_threshold)) return false;
    if (!(peep >= config.peep_threshold)) return false;
    if (obs.treatment == 1 && obs.session && obs.session->duration() > config.max_prone) return false;
    return true;
}

InclusionResult apply_inclusion(std::vector<Observation> observations, const CovariateSpec& spec,
                                const CohortConfig& config) {
    InclusionResult r;
    r.cohort.spec = spec;
    r.funnel.sessions_in = observations.size();
    for (auto& obs : observations) {
        if (!has_baseline(obs, spec)) continue;
        ++r.funnel.baseline_present;
        if (!meets_inclusion(obs, spec, config)) continue;
        ++r.funnel.criteria_met;
        if (obs.y_early) ++r.funnel.early_outcome;
        if (obs.y_late) ++r.funnel.late_outcome;
        auto& pc = r.cohort.provenance;
        if (obs.treatment == 1)
            ++pc.prone;
        else if (obs.session && obs.session->provenance == ingest::Provenance::artificial)
            ++pc.artificial_supine;
        else
            ++pc.original_supine;
        r.cohort.observations.push_back(std::move(obs));
    }
    return r;
}

Cohort select_outcome(const Cohort& cohort, OutcomeWindow window) {
    Cohort out{{}, cohort.spec, cohort.imputation, {}};
    for (const auto& obs : cohort.observations) {
        if (!obs.outcome(window)) continue;
        out.observations.push_back(obs);
        auto& pc = out.provenance;
        if (!obs.session)
            ++pc.synthetic;
        else if (obs.treatment == 1)
            ++pc.prone;
        else if (obs.session->provenance == ingest::Provenance::artificial)
            ++pc.artificial_supine;
        else
            ++pc.original_supine;
    }
    return out;
}

ImputationStats fit_impute(std::span<const Observation> train, const CovariateSpec& spec) {
    ImputationStats stats;
    stats.fill.assign(spec.size(), 0.0);
    for (std::size_t j = 0; j < spec.size(); ++j) {
        if (spec.at(j).kind == CovariateKind::binary) continue;
        double sum = 0.0;
        std::size_t count = 0;
        for (const auto& obs : train) {
            if (obs.missing[j]) continue;
            sum += obs.x[j];
            ++count;
        }
        if (count == 0)
            throw FitError("imputation: covariate '" + spec.at(j).name + "' is missing in every training row");
        stats.fill[j] = sum / static_cast<double>(count);
    }
    return stats;
}

void apply_impute(std::span<Observation> observations, const ImputationStats& stats) {
    for (auto& obs : observations) {
        for (std::size_t j = 0; j < obs.x.size(); ++j) {
            if (!obs.missing[j]) continue;
            obs.x[j] = stats.fill[j];
            obs.missing[j] = 0;
        }
    }
}

std::vector<std::size_t> SplitIndex::training_portion() const {
    std::vector<std::size_t> out = train;
    out.insert(out.end(), validation.begin(), validation.end());
    return out;
}

SplitIndex split(std::size_t n, std::uint64_t seed, double test_frac, double val_frac_of_train) {
    if (n < 10) throw ConfigError("split: need at least 10 observations, got " + std::to_string(n));
    if (!(test_frac > 0.0 && test_frac < 1.0) || !(val_frac_of_train >= 0.0 && val_frac_of_train < 1.0))
        throw ConfigError("split: fractions must lie in (0,1)");
    std::vector<std::size_t> perm(n);
    std::iota(perm.begin(), perm.end(), 0);
    Rng rng(mix64(seed));
    std::shuffle(perm.begin(), perm.end(), rng);

    const auto n_test = static_cast<std::size_t>(std::llround(test_frac * static_cast<double>(n)));
    const std::size_t n_train = n - n_test;
    const auto n_val = static_cast<std::size_t>(std::llround(val_frac_of_train * static_cast<double>(n_train)));

    SplitIndex s;
    s.seed = seed;
    s.test.assign(perm.begin(), perm.begin() + static_cast<std::ptrdiff_t>(n_test));
    s.validation.assign(perm.begin() + static_cast<std::ptrdiff_t>(n_test),
                        perm.begin() + static_cast<std::ptrdiff_t>(n_test + n_val));
    s.train.assign(perm.begin() + static_cast<std::ptrdiff_t>(n_test + n_val), perm.end());
    return s;
}

Cohort impute_with_split(const Cohort& cohort, const SplitIndex& split) {
    Cohort out = cohort;
    std::vector<Observation> train;
    for (auto i : split.training_portion()) train.push_back(cohort.observations.at(i));
    auto stats = fit_impute(train, cohort.spec);
    apply_impute(out.observations, stats);
    out.imputation = std::move(stats);
    return out;
}

Dataset to_dataset(const Cohort& cohort, OutcomeWindow window) {
    const auto n = static_cast<Eigen::Index>(cohort.size());
    const auto d = static_cast<Eigen::Index>(cohort.spec.size());
    Dataset ds;
    ds.x.resize(n, d);
    ds.t.resize(n);
    ds.y.resize(n);
    for (const auto& e : cohort.spec.entries()) ds.names.push_back(e.name);
    const bool has_truth = n > 0 && std::all_of(cohort.observations.begin(), cohort.observations.end(),
                                                [](const Observation& o) { return o.truth.has_value(); });
    if (has_truth) {
        ds.y1 = Eigen::VectorXd(n);
        ds.y0 = Eigen::VectorXd(n);
    }
    for (Eigen::Index i = 0; i < n; ++i) {
        const auto& obs = cohort.observations[static_cast<std::size_t>(i)];
        if (!obs.complete()) throw FitError("dataset: row " + std::to_string(i) + " still has missing covariates");
        const auto& y = obs.outcome(window);
        if (!y) throw FitError("dataset: row " + std::to_string(i) + " has no outcome");
        for (Eigen::Index j = 0; j < d; ++j) ds.x(i, j) = obs.x[static_cast<std::size_t>(j)];
        ds.t(i) = obs.treatment;
        ds.y(i) = *y;
        if (has_truth) {
            (*ds.y1)(i) = obs.truth->y1;
            (*ds.y0)(i) = obs.truth->y0;
        }
    }
    return ds;
}

void write_cohort(std::ostream& out, const Cohort& cohort) {
    const bool truth = std::any_of(cohort.observations.begin(), cohort.observations.end(),
                                   [](const Observation& o) { return o.truth.has_value(); });
    std::vector<std::string> header;
    for (const auto& e : cohort.spec.entries()) header.push_back(e.name);
    for (auto h : {"treatment", "y_early", "y_late", "patient_id", "session_start", "session_end", "provenance"})
        header.emplace_back(h);
    if (truth)
        for (auto h : {"y1", "y0", "e_true"}) header.emplace_back(h);
    csv::write_row(out, header);

    auto opt = [](const std::optional<double>& v) { return v ? csv::format_number(*v, 6) : std::string(); };
    for (const auto& obs : cohort.observations) {
        std::vector<std::string> row;
        for (std::size_t j = 0; j < obs.x.size(); ++j)
            row.push_back(obs.missing[j] ? std::string() : csv::format_number(obs.x[j], 6));
        row.push_back(std::to_string(obs.treatment));
        row.push_back(opt(obs.y_early));
        row.push_back(opt(obs.y_late));
        row.push_back(obs.patient_id);
        if (obs.session) {
            row.push_back(format_iso8601(obs.session->start));
            row.push_back(format_iso8601(obs.session->end));
            row.emplace_back(ingest::to_string(obs.session->provenance));
        } else {
            row.insert(row.end(), {"", "", "synthetic"});
        }
        if (truth) {
            if (obs.truth) {
                row.push_back(csv::format_number(obs.truth->y1, 6));
                row.push_back(csv::format_number(obs.truth->y0, 6));
                row.push_back(csv::format_number(obs.truth->e_true, 6));
            } else {
                row.insert(row.end(), {"", "", ""});
            }
        }
        csv::write_row(out, row);
    }
}

Cohort read_cohort(std::istream& in, const CovariateSpec& spec) {
    std::string line;
    std::size_t line_no = 0;
    std::vector<std::string> header;
    while (std::getline(in, line)) {
        ++line_no;
        if (!csv::trim(line).empty()) {
            header = csv::split_line(line);
            break;
        }
    }
    if (header.empty()) throw IoError("cohort file is empty");
    auto find = [&](std::string_view name) -> std::optional<std::size_t> {
        for (std::size_t i = 0; i < header.size(); ++i)
            if (csv::trim(header[i]) == name) return i;
        return std::nullopt;
    };
    const auto i_t = find("treatment");
    if (!i_t) throw IoError("cohort file: missing 'treatment' column");
    const std::size_t d = *i_t;

    std::vector<CovariateEntry> entries;
    for (std::size_t j = 0; j < d; ++j) {
        std::string name(csv::trim(header[j]));
        CovariateEntry e{name, CovariateKind::numeric, "", name, Extraction::windowed, std::nullopt};
        if (auto k = spec.index_of(name)) {
            e.kind = spec.at(*k).kind;
            e.units = spec.at(*k).units;
        }
        entries.push_back(std::move(e));
    }
    Cohort cohort;
    cohort.spec = CovariateSpec(std::move(entries));

    const auto i_early = find("y_early"), i_late = find("y_late"), i_pid = find("patient_id");
    const auto i_start = find("session_start"), i_end = find("session_end"), i_prov = find("provenance");
    const auto i_y1 = find("y1"), i_y0 = find("y0"), i_e = find("e_true");

    auto fail = [&](const std::string& msg) { throw IoError("cohort file line " + std::to_string(line_no) + ": " + msg); };
    auto number = [&](const std::vector<std::string>& f, std::optional<std::size_t> i) -> std::optional<double> {
        if (!i || *i >= f.size() || csv::trim(f[*i]).empty()) return std::nullopt;
        auto p = csv::parse_number(f[*i]);
        if (!p.ok || !p.finite) fail("bad number '" + f[*i] + "'");
        return p.value;
    };

    while (std::getline(in, line)) {
        ++line_no;
        if (csv::trim(line).empty()) continue;
        auto f = csv::split_line(line);
        if (f.size() < header.size()) fail("expected " + std::to_string(header.size()) + " fields");
        Observation obs;
        obs.x.assign(d, 0.0);
        obs.missing.assign(d, 1);
        for (std::size_t j = 0; j < d; ++j) {
            if (auto v = number(f, j)) {
                obs.x[j] = *v;
                obs.missing[j] = 0;
            }
        }
        const auto t = number(f, i_t);
        if (!t || (*t != 0.0 && *t != 1.0)) fail("treatment must be 0 or 1");
        obs.treatment = static_cast<int>(*t);
        obs.y_early = number(f, i_early);
        obs.y_late = number(f, i_late);
        if (i_pid) obs.patient_id = f[*i_pid];
        if (i_start && i_end && !csv::trim(f[*i_start]).empty()) {
            auto s = parse_iso8601(csv::trim(f[*i_start]));
            auto e = parse_iso8601(csv::trim(f[*i_end]));
            if (!s || !e) fail("bad session timestamps");
            ingest::Session session{obs.patient_id, *s, *e,
                                    obs.treatment ? ingest::Position::prone : ingest::Position::supine,
                                    ingest::Provenance::original, *e};
            if (i_prov && csv::trim(f[*i_prov]) == "artificial") session.provenance = ingest::Provenance::artificial;
            obs.session = session;
        }
        auto y1 = number(f, i_y1), y0 = number(f, i_y0), e = number(f, i_e);
        if (y1 && y0) obs.truth = PotentialOutcomes{*y1, *y0, e.value_or(std::nan(""))};

        auto& pc = cohort.provenance;
        if (!obs.session)
            ++pc.synthetic;
        else if (obs.treatment == 1)
            ++pc.prone;
        else if (obs.session->provenance == ingest::Provenance::artificial)
            ++pc.artificial_supine;
        else
            ++pc.original_supine;
        cohort.observations.push_back(std::move(obs));
    }
    return cohort;
}

}  // namespace tte::cohort
