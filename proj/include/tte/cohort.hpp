#pragma once

// Trial-emulating cohort construction: covariates, outcome windows, inclusion
// criteria, train-only imputation and splits.

#include <cstdint>
#include <istream>
#include <optional>
#include <ostream>
#include <span>
#include <string>
#include <vector>

#include "tte/dataset.hpp"
#include "tte/ingest.hpp"
#include "tte/time.hpp"

namespace tte::cohort {

enum class CovariateKind { numeric, binary };

// How a covariate value is read off the event stream relative to a session start.
enum class Extraction {
    windowed,        // last value in [start - lookback, start), else first in [start, start + fallback]
    patient_static,  // last value before start, else first in [start, start + fallback]
    comorbidity,     // 1 if any record before start has a non-zero value
    medication,      // 1 if any administration record in [start - lookback, start]
    derived,         // computed from other covariates or raw variables
};

struct Derivation {
    enum class Op { greater_than, ratio };
    Op op;
    std::string lhs;
    std::string rhs;        // ratio denominator; unused for greater_than
    double constant = 1.0;  // threshold for greater_than, multiplier for ratio
};

struct CovariateEntry {
    std::string name;
    CovariateKind kind = CovariateKind::numeric;
    std::string units;
    std::string source;  // raw variable or medication name
    Extraction extraction = Extraction::windowed;
    std::optional<Derivation> derivation;
};

class CovariateSpec {
public:
    CovariateSpec() = default;
    explicit CovariateSpec(std::vector<CovariateEntry> entries);

    // The 28 baseline covariates of the prone-positioning cohort.
    static CovariateSpec standard();

    const std::vector<CovariateEntry>& entries() const { return entries_; }
    std::size_t size() const { return entries_.size(); }
    std::optional<std::size_t> index_of(std::string_view name) const;
    const CovariateEntry& at(std::size_t i) const { return entries_[i]; }

    // Raw measurement variables this covariate set reads; used for the unknown-variable tally.
    std::vector<std::string> raw_variables() const;

private:
    std::vector<CovariateEntry> entries_;
};

enum class OutcomeWindow { early, late };

struct CohortConfig {
    Seconds lookback = hours(8);
    Seconds fallback = minutes(30);
    Seconds early_begin = hours(2);
    Seconds early_end = hours(8);
    Seconds late_begin = hours(12);
    Seconds late_end = hours(24);
    Seconds max_prone = hours(96);
    double pf_threshold = 150.0;
    double fio2_threshold = 60.0;
    double peep_threshold = 5.0;
    std::string outcome_variable = "pf_ratio";
};

struct PotentialOutcomes {
    double y1;
    double y0;
    double e_true;
};

struct Observation {
    std::string patient_id;
    std::optional<ingest::Session> session;
    std::vector<double> x;
    std::vector<std::uint8_t> missing;  // 1 marks a missing covariate
    int treatment = 0;
    std::optional<double> y_early;
    std::optional<double> y_late;
    std::optional<Instant> latest_covariate_time;
    std::optional<Instant> earliest_outcome_time;
    std::optional<PotentialOutcomes> truth;

    const std::optional<double>& outcome(OutcomeWindow w) const { return w == OutcomeWindow::early ? y_early : y_late; }
    bool complete() const;
};

struct CovariateRow {
    std::vector<double> x;
    std::vector<std::uint8_t> missing;
    std::optional<Instant> latest_source;
};

CovariateRow extract_covariates(const ingest::Session& session, std::span<const ingest::Event> events,
                                const CovariateSpec& spec, const CohortConfig& config = {});

struct TimedValue {
    double value;
    Instant at;
};

// Last outcome measurement in [start + begin, min(start + end, session end)).
std::optional<TimedValue> extract_outcome(const ingest::Session& session, std::span<const ingest::Event> events,
                                          OutcomeWindow window, const CohortConfig& config = {});

Observation make_observation(const ingest::Session& session, std::span<const ingest::Event> events,
                             const CovariateSpec& spec, const CohortConfig& config = {});

// One observation per session, in session order.
std::vector<Observation> build_observations(const ingest::EventLog& log, std::span<const ingest::Session> sessions,
                                            const CovariateSpec& spec, const CohortConfig& config = {});

struct ProvenanceCounts {
    std::size_t original_supine = 0;
    std::size_t artificial_supine = 0;
    std::size_t prone = 0;
    std::size_t synthetic = 0;
};

struct ImputationStats {
    std::vector<double> fill;  // train mean for numeric covariates, 0 for binary ones
};

struct Cohort {
    std::vector<Observation> observations;
    CovariateSpec spec;
    std::optional<ImputationStats> imputation;
    ProvenanceCounts provenance;

    std::size_t size() const { return observations.size(); }
};

struct Funnel {
    std::size_t sessions_in = 0;
    std::size_t baseline_present = 0;
    std::size_t criteria_met = 0;
    std::size_t early_outcome = 0;
    std::size_t late_outcome = 0;
};

struct InclusionResult {
    Cohort cohort;
    Funnel funnel;
};

// Per-row verdict; apply_inclusion keeps exactly the rows for which this is true.
bool meets_inclusion(const Observation& obs, const CovariateSpec& spec, const CohortConfig& config = {});
bool has_baseline(const Observation& obs, const CovariateSpec& spec);

InclusionResult apply_inclusion(std::vector<Observation> observations, const CovariateSpec& spec,
                                const CohortConfig& config = {});

// Only the rows carrying the requested outcome.
Cohort select_outcome(const Cohort& cohort, OutcomeWindow window);

ImputationStats fit_impute(std::span<const Observation> train, const CovariateSpec& spec);
void apply_impute(std::span<Observation> observations, const ImputationStats& stats);

struct SplitIndex {
    std::vector<std::size_t> train;       // fitting part of the training portion
    std::vector<std::size_t> validation;  // carved from the training portion
    std::vector<std::size_t> test;
    std::uint64_t seed = 0;

    // train followed by validation: the portion bootstrap replicates resample.
    std::vector<std::size_t> training_portion() const;
};

SplitIndex split(std::size_t n, std::uint64_t seed, double test_frac = 0.2, double val_frac_of_train = 0.3);

// Fits imputation on the training portion, applies it to every row.
Cohort impute_with_split(const Cohort& cohort, const SplitIndex& split);

// Requires complete rows and the outcome on every row.
Dataset to_dataset(const Cohort& cohort, OutcomeWindow window);

void write_cohort(std::ostream& out, const Cohort& cohort);

// Covariate kinds are looked up by name in `spec`; unknown names are numeric.
Cohort read_cohort(std::istream& in, const CovariateSpec& spec = CovariateSpec::standard());

}  // namespace tte::cohort
