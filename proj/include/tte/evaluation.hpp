#pragma once

// Bootstrap evaluation protocol: every model is refit on resamples of the
// training portion and scored on a fixed test set.

#include <cstdint>
#include <optional>
#include <ostream>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include <Eigen/Dense>

#include "tte/bart.hpp"
#include "tte/cfrnet.hpp"
#include "tte/cohort.hpp"
#include "tte/dataset.hpp"
#include "tte/linprop.hpp"

namespace tte::eval {

using Eigen::VectorXd;

// Valid model tags, in report order.
const std::vector<std::string>& model_tags();
bool is_model_tag(std::string_view tag);

struct ModelSettings {
    linprop::PropensityOptions propensity;
    double clip_floor = 0.1;
    std::optional<double> clip_ceiling;
    int blocks = 5;
    bart::BartConfig bart;
    cfr::CfrConfig cfr;
    cfr::CfrConfig tarnet = cfr::CfrConfig::tarnet();
};

struct FitOutcome {
    double ate = 0.0;
    double rmse = 0.0;  // factual, on the test rows
};

// One fit of one model. `validation` is only used by the neural models; the
// others fit on fit + validation. ATE is the mean CATE over the test rows.
FitOutcome estimate_once(std::string_view tag, const Dataset& fit, const Dataset& validation, const Dataset& test,
                         const ModelSettings& settings, std::uint64_t seed);

struct BootstrapPlan {
    int replicates = 100;
    double frac = 0.95;
    bool with_replacement = true;
    std::uint64_t seed = 0;

    void validate() const;
    std::size_t resample_size(std::size_t n) const;  // ceil(frac * n)
};

// Positions in [0, n) for one replicate; deterministic in (seed, replicate).
std::vector<std::size_t> bootstrap_indices(const BootstrapPlan& plan, std::size_t n, std::size_t replicate);

double rmse_factual(const VectorXd& predictions, const VectorXd& y);

// Type-7 quantile (linear interpolation between order statistics).
double quantile(std::vector<double> samples, double p);

struct Interval {
    double lo = 0.0;
    double hi = 0.0;
};

Interval percentile_ci(std::span<const double> samples, double level = 0.95);

struct Estimate {
    double value = 0.0;
    Interval ci;
};

double mean_difference(const VectorXd& t, const VectorXd& y);

// Difference in arm means with a bootstrap percentile CI from `plan`.
Estimate unadjusted_effect(const VectorXd& t, const VectorXd& y, const BootstrapPlan& plan);

// Lower CI end, first quartile, median, third quartile, upper CI end.
struct Boxplot {
    double ci_lo = 0.0;
    double q1 = 0.0;
    double median = 0.0;
    double q3 = 0.0;
    double ci_hi = 0.0;
};

Boxplot boxplot(std::span<const double> samples, double level = 0.95);

struct ModelResult {
    std::string tag;
    std::vector<double> ate_samples;  // successful replicates, replicate order
    std::vector<double> rmse_samples;
    std::vector<std::string> failures;  // "replicate k: message"
    bool failed = false;                // more than 10% of replicates failed
    Estimate ate;
    Estimate rmse;
    Boxplot box;
};

struct Reference {
    double trial_ate = 15.0;
    Interval trial_ci{3.0, 27.0};
};

struct AgreementFlags {
    bool all_above_zero = false;
    double max_gap = 0.0;
    std::vector<std::pair<std::string, bool>> overlaps_reference;
};

struct AgreementReport {
    std::vector<ModelResult> models;
    Estimate unadjusted;
    Reference reference;
    AgreementFlags flags;
    std::size_t n_train = 0;  // training portion (resampled)
    std::size_t n_test = 0;
    std::size_t resample_size = 0;
    BootstrapPlan plan;
};

AgreementFlags agreement(std::span<const ModelResult> models, const Reference& reference = {});

// The split must index `data`; imputation must already be fitted on the
// training portion. Jobs run on `threads` workers; results do not depend on it.
AgreementReport run_protocol(const Dataset& data, const cohort::SplitIndex& split, std::span<const std::string> models,
                             const ModelSettings& settings, const BootstrapPlan& plan, int threads = 1);

// Published estimates, shipped as labeled reference constants only.
struct PublishedRow {
    const char* model;
    double ate, ate_lo, ate_hi, rmse, rmse_lo, rmse_hi;
};
std::span<const PublishedRow> published_rows(cohort::OutcomeWindow window);
Estimate published_unadjusted(cohort::OutcomeWindow window);

void write_summary(std::ostream& out, const AgreementReport& report, std::string_view outcome);
void write_table_csv(std::ostream& out, const AgreementReport& report);
void write_table_text(std::ostream& out, const AgreementReport& report);
void write_boxplot_csv(std::ostream& out, const AgreementReport& report);
void write_samples_csv(std::ostream& out, const AgreementReport& report);
void write_overlap_csv(std::ostream& out, const linprop::OverlapHistogram& histogram);
void write_balance_csv(std::ostream& out, std::span<const std::string> names, const VectorXd& before,
                       const VectorXd& after);

// Display name used in tables ("LR", "DR-IPW", ...).
std::string display_name(std::string_view tag);

}  // namespace tte::eval
