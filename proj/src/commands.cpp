#include "tte/commands.hpp"

#include <algorithm>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <optional>

#include <CLI11.hpp>
#include <json.hpp>

#include "tte/cohort.hpp"
#include "tte/config.hpp"
#include "tte/csv.hpp"
#include "tte/error.hpp"
#include "tte/evaluation.hpp"
#include "tte/ingest.hpp"
#include "tte/rng.hpp"
#include "tte/synthetic.hpp"

namespace tte::cli {

namespace fs = std::filesystem;

namespace {

class EmptyCohortError : public Error {
public:
    using Error::Error;
};

class BadModelError : public Error {
public:
    using Error::Error;
};

struct Globals {
    std::string config;
    std::optional<std::uint64_t> seed;
    std::optional<std::string> out;
    std::optional<int> threads;
    std::optional<std::string> events, sessions, cohort;
};

RunConfig resolve_config(const Globals& g) {
    std::string path = g.config;
    if (path.empty())
        if (const char* env = std::getenv(config_env); env && *env) path = env;
    RunConfig c = path.empty() ? parse_config(nlohmann::json::object()) : load_config(path);
    if (g.seed) c.seed = *g.seed;
    if (g.out) c.paths.out = *g.out;
    if (g.events) c.paths.events = *g.events;
    if (g.sessions) c.paths.sessions = *g.sessions;
    if (g.cohort) c.paths.cohort = *g.cohort;
    if (g.threads) {
        if (*g.threads < 1) throw ConfigError("--threads must be at least 1");
        c.threads = *g.threads;
    }
    c.bootstrap.seed = c.seed;
    c.simulate.seed = c.seed;
    return c;
}

std::ifstream open_input(const fs::path& path, std::string_view what) {
    std::ifstream in(path);
    if (!in) throw IoError("cannot open " + std::string(what) + " '" + path.string() + "'");
    return in;
}

std::ofstream open_output(const fs::path& path) {
    std::error_code ec;
    if (path.has_parent_path()) fs::create_directories(path.parent_path(), ec);
    std::ofstream out(path, std::ios::binary);
    if (!out) throw IoError("cannot write '" + path.string() + "'");
    return out;
}

ingest::EventLog load_events(const RunConfig& c, std::ostream& err) {
    auto in = open_input(c.paths.events, "events file");
    ingest::ParseOptions options;
    for (const auto& v : cohort::CovariateSpec::standard().raw_variables()) options.known_variables.insert(v);
    options.known_variables.insert(c.cohort.outcome_variable);
    for (const auto& v : c.bundle.variables) options.known_variables.insert(v);
    auto log = ingest::parse_events(in, options);
    constexpr std::size_t shown = 10;
    for (std::size_t i = 0; i < std::min(shown, log.errors.size()); ++i)
        err << "warning: events line " << log.errors[i].line << ": " << log.errors[i].message << '\n';
    if (log.errors.size() > shown) err << "warning: " << log.errors.size() - shown << " more malformed record(s)\n";
    if (log.out_of_order > 0) err << "warning: " << log.out_of_order << " out-of-order event(s) re-sorted\n";
    for (const auto& [name, count] : log.unknown_variables)
        err << "warning: unknown variable '" << name << "' (" << count << " record(s))\n";
    return log;
}

cohort::Cohort load_cohort(const RunConfig& c) {
    auto in = open_input(c.paths.cohort_path(), "cohort file");
    return cohort::read_cohort(in, cohort::CovariateSpec::standard());
}

struct Prepared {
    Dataset data;
    cohort::SplitIndex split;
    eval::ModelSettings settings;
    bool truth = false;
};

// Outcome selection, split, train-only imputation, settings resolved against
// the cohort's covariates.
Prepared prepare(const RunConfig& c, const cohort::Cohort& full, std::ostream& err) {
    const auto selected = cohort::select_outcome(full, c.outcome);
    if (selected.size() == 0)
        throw EmptyCohortError("cohort has no rows with the " + std::string(c.outcome == cohort::OutcomeWindow::early ? "early" : "late") +
                               " outcome");
    Prepared p;
    p.split = cohort::split(selected.size(), c.seed, c.test_frac, c.val_frac);
    p.data = cohort::to_dataset(cohort::impute_with_split(selected, p.split), c.outcome);
    p.truth = p.data.y1.has_value();
    p.settings = c.settings;
    for (const auto& name : c.confounders) {
        auto k = selected.spec.index_of(name);
        if (!k) throw ConfigError("config: confounder '" + name + "' is not a cohort covariate");
        p.settings.propensity.confounders.push_back(*k);
    }
    if (c.bart_cv && std::find(c.models.begin(), c.models.end(), "bart") != c.models.end()) {
        const Dataset train = p.data.subset(p.split.training_portion());
        p.settings.bart = bart::bart_cv_select(train.x, train.t, train.y, c.bart_grid, c.bart_cv_folds, c.seed);
        err << "bart cv: k=" << p.settings.bart.k << " nu=" << p.settings.bart.nu << " q=" << p.settings.bart.q << '\n';
    }
    return p;
}

int cmd_ingest(const RunConfig& c, std::ostream& out, std::ostream& err) {
    const auto log = load_events(c, err);
    const auto result = ingest::slice_all(log, c.bundle);
    if (result.ignored_duplicates > 0)
        err << "warning: " << result.ignored_duplicates << " repeated position change(s) ignored\n";
    auto file = open_output(c.paths.sessions_path());
    ingest::write_sessions(file, result.sessions);
    const auto counts = ingest::count_sessions(result.sessions);
    out << "patients=" << log.patients.size() << " events=" << log.event_count() << '\n';
    out << "supine(original+artificial)=" << counts.supine() << " prone=" << counts.prone << '\n';
    out << "original_supine=" << counts.original_supine << " artificial_supine=" << counts.artificial_supine << '\n';
    out << "sessions written to " << c.paths.sessions_path().string() << '\n';
    return exit_ok;
}

int cmd_cohort(const RunConfig& c, std::ostream& out, std::ostream& err) {
    const auto log = load_events(c, err);
    auto in = open_input(c.paths.sessions_path(), "sessions file");
    const auto sessions = ingest::read_sessions(in);
    const auto spec = cohort::CovariateSpec::standard();
    auto observations = cohort::build_observations(log, sessions, spec, c.cohort);
    const auto result = cohort::apply_inclusion(std::move(observations), spec, c.cohort);
    const auto& f = result.funnel;
    out << "sessions in        " << f.sessions_in << '\n';
    out << "baseline present   " << f.baseline_present << "  (-" << f.sessions_in - f.baseline_present << ")\n";
    out << "criteria met       " << f.criteria_met << "  (-" << f.baseline_present - f.criteria_met << ")\n";
    out << "early outcome      " << f.early_outcome << "  (-" << f.criteria_met - f.early_outcome << ")\n";
    out << "late outcome       " << f.late_outcome << "  (-" << f.criteria_met - f.late_outcome << ")\n";
    const auto& pc = result.cohort.provenance;
    out << "included: prone=" << pc.prone << " supine_original=" << pc.original_supine
        << " supine_artificial=" << pc.artificial_supine << '\n';
    if (result.cohort.size() == 0) throw EmptyCohortError("no session meets the inclusion criteria");
    auto file = open_output(c.paths.cohort_path());
    cohort::write_cohort(file, result.cohort);
    out << "cohort written to " << c.paths.cohort_path().string() << '\n';
    return exit_ok;
}

int cmd_estimate(const RunConfig& c, const std::string& tag, std::ostream& out, std::ostream& err) {
    if (!eval::is_model_tag(tag)) {
        std::string valid;
        for (const auto& t : eval::model_tags()) valid += (valid.empty() ? "" : ", ") + t;
        throw BadModelError("unknown model '" + tag + "'; valid models: " + valid);
    }
    RunConfig local = c;
    local.models = {tag};
    const auto p = prepare(local, load_cohort(c), err);
    const Dataset fit = p.data.subset(p.split.train);
    const Dataset val = p.data.subset(p.split.validation);
    const Dataset test = p.data.subset(p.split.test);
    const auto result = eval::estimate_once(tag, fit, val, test, p.settings, derive_seed(c.seed, tag, 0));
    out << "model " << eval::display_name(tag) << '\n';
    if (tag == "cfr") out << "alpha = " << csv::format_number(p.settings.cfr.alpha, 0) << '\n';
    if (tag == "tarnet") out << "alpha = " << csv::format_number(p.settings.tarnet.alpha, 0) << '\n';
    out << "n_train " << p.split.training_portion().size() << " n_test " << p.split.test.size() << '\n';
    out << "ATE " << csv::format_number(result.ate, 2) << '\n';
    out << "RMSE " << csv::format_number(result.rmse, 2) << '\n';
    if (p.truth) {
        const double truth = synthetic::true_ate(test);
        out << "true ATE (test) " << csv::format_number(truth, 2) << '\n';
        out << "epsilon_ATE " << csv::format_number(std::abs(truth - result.ate), 4) << '\n';
    }
    return exit_ok;
}

void write_file(const fs::path& path, const std::function<void(std::ostream&)>& body) {
    auto file = open_output(path);
    body(file);
    if (!file) throw IoError("failed writing '" + path.string() + "'");
}

int cmd_evaluate(const RunConfig& c, std::ostream& out, std::ostream& err) {
    const auto p = prepare(c, load_cohort(c), err);
    const auto report = eval::run_protocol(p.data, p.split, c.models, p.settings, c.bootstrap, c.threads);
    const std::string outcome = c.outcome == cohort::OutcomeWindow::early ? "early" : "late";
    const fs::path dir(c.paths.out);

    write_file(dir / "summary.json", [&](std::ostream& o) { eval::write_summary(o, report, outcome); });
    write_file(dir / "results.csv", [&](std::ostream& o) { eval::write_table_csv(o, report); });
    write_file(dir / "results.txt", [&](std::ostream& o) { eval::write_table_text(o, report); });
    write_file(dir / "boxplot.csv", [&](std::ostream& o) { eval::write_boxplot_csv(o, report); });
    write_file(dir / "samples.csv", [&](std::ostream& o) { eval::write_samples_csv(o, report); });

    // propensity diagnostics on the training portion
    try {
        const Dataset train = p.data.subset(p.split.training_portion());
        const auto model = linprop::fit_propensity(train.x, train.t, p.settings.propensity);
        const Eigen::VectorXd raw = model.predict(train.x);
        const auto clipped = linprop::clip_scores(raw, p.settings.clip_floor, p.settings.clip_ceiling);
        Eigen::VectorXd w(train.rows());
        for (Eigen::Index i = 0; i < w.size(); ++i) w(i) = linprop::ipw_weight(clipped.values(i), train.t(i));
        write_file(dir / "overlap.csv", [&](std::ostream& o) { eval::write_overlap_csv(o, linprop::overlap_histogram(raw, train.t)); });
        write_file(dir / "balance.csv", [&](std::ostream& o) {
            eval::write_balance_csv(o, train.names, linprop::normalized_mean_difference(train.x, train.t),
                                    linprop::weighted_normalized_mean_difference(train.x, train.t, w));
        });
    } catch (const FitError& e) {
        err << "warning: propensity diagnostics skipped: " << e.what() << '\n';
    }

    eval::write_table_text(out, report);
    for (const auto& m : report.models)
        if (m.failed)
            err << "warning: model " << m.tag << " failed on " << m.failures.size() << " of " << c.bootstrap.replicates
                << " replicates; first: " << m.failures.front() << '\n';
    out << "report written to " << dir.string() << '\n';
    return exit_ok;
}

int cmd_simulate(const RunConfig& c, std::ostream& out) {
    const auto table = synthetic::generate(c.simulate, c.seed);
    const auto cohort = synthetic::to_cohort(table);
    auto file = open_output(c.paths.cohort_path());
    cohort::write_cohort(file, cohort);
    out << "dgp " << synthetic::to_string(c.simulate.kind) << " n=" << table.data.rows() << " d=" << table.data.cols()
        << " treated=" << table.data.treated() << '\n';
    out << "true ATE " << csv::format_number(synthetic::true_ate(table.data), 4) << '\n';
    out << "cohort written to " << c.paths.cohort_path().string() << '\n';
    return exit_ok;
}

int cmd_report(const RunConfig& c, std::ostream& out) {
    const fs::path path = fs::path(c.paths.out) / "summary.json";
    auto in = open_input(path, "summary");
    nlohmann::json doc;
    try {
        doc = nlohmann::json::parse(in);
    } catch (const nlohmann::json::exception& e) {
        throw IoError("summary '" + path.string() + "' is not valid JSON: " + e.what());
    }
    try {
        auto ci = [](const nlohmann::json& e) {
            return csv::format_number(e.at("mean").get<double>(), 2) + " (" + csv::format_number(e.at("ci_lo").get<double>(), 2) +
                   ", " + csv::format_number(e.at("ci_hi").get<double>(), 2) + ")";
        };
        char line[160];
        out << "Outcome: " << doc.at("outcome").get<std::string>() << '\n';
        std::snprintf(line, sizeof line, "%-10s %-26s %-26s\n", "Model", "ATE", "RMSE");
        out << line;
        for (const auto& m : doc.at("models")) {
            const std::string name = eval::display_name(m.at("model").get<std::string>());
            const bool has = m.contains("ate");
            std::snprintf(line, sizeof line, "%-10s %-26s %-26s%s\n", name.c_str(), has ? ci(m.at("ate")).c_str() : "NA",
                          has ? ci(m.at("rmse")).c_str() : "NA", m.at("status") == "failed" ? "  [failed]" : "");
            out << line;
        }
        out << "\nUnadjusted effect: " << ci(doc.at("unadjusted")) << '\n';
        const auto& a = doc.at("agreement");
        out << "All ATE CIs above zero: " << (a.at("all_ci_above_zero").get<bool>() ? "yes" : "no") << '\n';
        out << "Max pairwise gap of ATE means: " << csv::format_number(a.at("max_pairwise_gap").get<double>(), 2) << '\n';
        out << "Reference: target-trial ATE 15 (3, 27)\n";
    } catch (const nlohmann::json::exception& e) {
        throw IoError("summary '" + path.string() + "' is malformed: " + e.what());
    }
    return exit_ok;
}

}  // namespace

int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
    CLI::App app{"Target-trial emulation pipeline: sessions, cohort, causal estimators, bootstrap evaluation"};
    app.require_subcommand(1);
    Globals g;
    app.add_option("--config", g.config, "JSON run configuration (default: $" + std::string(config_env) + ")");
    app.add_option("--seed", g.seed, "Global seed, overrides the config");
    app.add_option("--out", g.out, "Output directory, overrides paths.out");
    app.add_option("--threads", g.threads, "Worker threads for evaluate");
    app.add_option("--events", g.events, "Events CSV, overrides paths.events");
    app.add_option("--sessions", g.sessions, "Sessions CSV, overrides paths.sessions");
    app.add_option("--cohort", g.cohort, "Cohort CSV, overrides paths.cohort");

    auto* ingest = app.add_subcommand("ingest", "Slice event streams into sessions");
    auto* cohort = app.add_subcommand("cohort", "Build the trial cohort from events and sessions");
    auto* estimate = app.add_subcommand("estimate", "Fit one model once and print its ATE");
    std::string tag;
    estimate->add_option("model", tag, "Model tag: lr, dripw, blocking, bart, tarnet, cfr")->required();
    auto* evaluate = app.add_subcommand("evaluate", "Bootstrap protocol over the configured models");
    auto* simulate = app.add_subcommand("simulate", "Write a synthetic cohort with known potential outcomes");
    auto* report = app.add_subcommand("report", "Print the results table from an evaluate summary");
    for (auto* sub : {ingest, cohort, estimate, evaluate, simulate, report}) sub->fallthrough();

    std::vector<std::string> reversed(args.rbegin(), args.rend());
    try {
        app.parse(reversed);
    } catch (const CLI::CallForHelp&) {
        out << app.help();
        return exit_ok;
    } catch (const CLI::CallForAllHelp&) {
        out << app.help("", CLI::AppFormatMode::All);
        return exit_ok;
    } catch (const CLI::ParseError& e) {
        err << "error: " << e.what() << '\n';
        return exit_bad_config;
    }

    try {
        const RunConfig c = resolve_config(g);
        if (ingest->parsed()) return cmd_ingest(c, out, err);
        if (cohort->parsed()) return cmd_cohort(c, out, err);
        if (estimate->parsed()) return cmd_estimate(c, tag, out, err);
        if (evaluate->parsed()) return cmd_evaluate(c, out, err);
        if (simulate->parsed()) return cmd_simulate(c, out);
        if (report->parsed()) return cmd_report(c, out);
        return exit_bad_config;
    } catch (const BadModelError& e) {
        err << "error: " << e.what() << '\n';
        return exit_bad_model;
    } catch (const EmptyCohortError& e) {
        err << "error: " << e.what() << '\n';
        return exit_empty_cohort;
    } catch (const ConfigError& e) {
        err << "error: " << e.what() << '\n';
        return exit_bad_config;
    } catch (const IoError& e) {
        err << "error: " << e.what() << '\n';
        return exit_io;
    } catch (const std::exception& e) {
        err << "error: " << e.what() << '\n';
        return exit_failure;
    }
}

}  // namespace tte::cli
