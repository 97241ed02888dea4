#pragma once

// Run configuration: one JSON document, every key optional.

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include <json.hpp>

#include "tte/bart.hpp"
#include "tte/cohort.hpp"
#include "tte/evaluation.hpp"
#include "tte/ingest.hpp"
#include "tte/synthetic.hpp"

namespace tte {

struct Paths {
    std::string events = "events.csv";
    std::string sessions;  // empty: <out>/sessions.csv
    std::string cohort;    // empty: <out>/cohort.csv
    std::string out = "out";

    std::filesystem::path sessions_path() const;
    std::filesystem::path cohort_path() const;
};

struct RunConfig {
    Paths paths;
    std::uint64_t seed = 0;
    int threads = 1;

    cohort::CohortConfig cohort;
    ingest::BundleRule bundle;
    cohort::OutcomeWindow outcome = cohort::OutcomeWindow::early;
    double test_frac = 0.2;
    double val_frac = 0.3;

    std::vector<std::string> models = eval::model_tags();
    eval::ModelSettings settings;
    std::vector<std::string> confounders;  // names, for the confounder_subset propensity mode
    bool bart_cv = false;
    std::vector<bart::BartConfig> bart_grid;
    int bart_cv_folds = 5;

    eval::BootstrapPlan bootstrap;
    synthetic::DgpSpec simulate;

    void validate() const;  // throws ConfigError
};

// Unknown keys and ill-typed values throw ConfigError.
RunConfig parse_config(const nlohmann::json& doc);
RunConfig load_config(const std::filesystem::path& path);
nlohmann::ordered_json to_json(const RunConfig& config);

// Default cross-validation grid over (k, nu, q).
std::vector<bart::BartConfig> default_bart_grid(const bart::BartConfig& base);

}  // namespace tte
