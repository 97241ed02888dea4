#include "tte/config.hpp"

#include <cmath>
#include <fstream>
#include <set>

#include "tte/error.hpp"

namespace tte {

using nlohmann::json;
using nlohmann::ordered_json;

std::filesystem::path Paths::sessions_path() const {
    return sessions.empty() ? std::filesystem::path(out) / "sessions.csv" : std::filesystem::path(sessions);
}

std::filesystem::path Paths::cohort_path() const {
    return cohort.empty() ? std::filesystem::path(out) / "cohort.csv" : std::filesystem::path(cohort);
}

namespace {

// Typed access to one JSON object that remembers which keys were read, so
// leftovers can be reported as unknown.
class Section {
public:
    Section(const json& node, std::string path) : node_(node), path_(std::move(path)) {
        if (!node_.is_null() && !node_.is_object()) throw ConfigError("config: '" + path_ + "' must be an object");
    }

    ~Section() = default;
    Section(const Section&) = delete;
    Section& operator=(const Section&) = delete;

    bool has(const std::string& key) {
        used_.insert(key);
        return node_.is_object() && node_.contains(key) && !node_.at(key).is_null();
    }

    const json& raw(const std::string& key) { return node_.at(key); }

    Section child(const std::string& key) {
        used_.insert(key);
        static const json empty = json::object();
        return Section(node_.is_object() && node_.contains(key) ? node_.at(key) : empty, name(key));
    }

    double number(const std::string& key, double def) {
        if (!has(key)) return def;
        const auto& v = node_.at(key);
        if (!v.is_number()) fail(key, "a number");
        const double d = v.get<double>();
        if (!std::isfinite(d)) fail(key, "a finite number");
        return d;
    }

    long long integer(const std::string& key, long long def) {
        if (!has(key)) return def;
        const auto& v = node_.at(key);
        if (v.is_number_integer()) return v.get<long long>();
        if (v.is_number_float() && std::floor(v.get<double>()) == v.get<double>()) return static_cast<long long>(v.get<double>());
        fail(key, "an integer");
    }

    std::uint64_t seed(const std::string& key, std::uint64_t def) {
        if (!has(key)) return def;
        const auto& v = node_.at(key);
        if (v.is_number_unsigned()) return v.get<std::uint64_t>();
        if (v.is_number_integer() && v.get<long long>() >= 0) return static_cast<std::uint64_t>(v.get<long long>());
        fail(key, "a nonnegative integer");
    }

    bool boolean(const std::string& key, bool def) {
        if (!has(key)) return def;
        if (!node_.at(key).is_boolean()) fail(key, "true or false");
        return node_.at(key).get<bool>();
    }

    std::string string(const std::string& key, const std::string& def) {
        if (!has(key)) return def;
        if (!node_.at(key).is_string()) fail(key, "a string");
        return node_.at(key).get<std::string>();
    }

    std::vector<std::string> strings(const std::string& key, const std::vector<std::string>& def) {
        if (!has(key)) return def;
        const auto& v = node_.at(key);
        if (!v.is_array()) fail(key, "an array of strings");
        std::vector<std::string> out;
        for (const auto& e : v) {
            if (!e.is_string()) fail(key, "an array of strings");
            out.push_back(e.get<std::string>());
        }
        return out;
    }

    std::pair<double, double> range(const std::string& key, std::pair<double, double> def) {
        if (!has(key)) return def;
        const auto& v = node_.at(key);
        if (!v.is_array() || v.size() != 2 || !v[0].is_number() || !v[1].is_number()) fail(key, "a [begin, end] pair of numbers");
        return {v[0].get<double>(), v[1].get<double>()};
    }

    void finish() const {
        if (!node_.is_object()) return;
        for (const auto& [key, value] : node_.items())
            if (!used_.contains(key)) throw ConfigError("config: unknown key '" + name(key) + "'");
    }

    std::string name(const std::string& key) const { return path_.empty() ? key : path_ + "." + key; }

private:
    [[noreturn]] void fail(const std::string& key, const std::string& what) const {
        throw ConfigError("config: '" + name(key) + "' must be " + what);
    }

    const json& node_;
    std::string path_;
    std::set<std::string> used_;
};

Seconds from_hours(double h) { return Seconds{std::llround(h * 3600.0)}; }

bart::BartConfig read_bart(Section& s, const bart::BartConfig& d) {
    bart::BartConfig c = d;
    c.trees = static_cast<int>(s.integer("trees", d.trees));
    c.k = s.number("k", d.k);
    c.nu = s.number("nu", d.nu);
    c.q = s.number("q", d.q);
    c.alpha = s.number("alpha", d.alpha);
    c.beta = s.number("beta", d.beta);
    c.burn_in = static_cast<int>(s.integer("burn_in", d.burn_in));
    c.draws = static_cast<int>(s.integer("draws", d.draws));
    return c;
}

cfr::CfrConfig read_cfr(Section& s, const cfr::CfrConfig& d) {
    cfr::CfrConfig c = d;
    c.rep_layers = static_cast<int>(s.integer("rep_layers", d.rep_layers));
    c.rep_width = static_cast<int>(s.integer("rep_width", d.rep_width));
    c.head_layers = static_cast<int>(s.integer("head_layers", d.head_layers));
    c.head_width = static_cast<int>(s.integer("head_width", d.head_width));
    c.alpha = s.number("alpha", d.alpha);
    c.lambda = s.number("lambda", d.lambda);
    c.learning_rate = s.number("learning_rate", d.learning_rate);
    c.beta1 = s.number("beta1", d.beta1);
    c.beta2 = s.number("beta2", d.beta2);
    c.adam_epsilon = s.number("adam_epsilon", d.adam_epsilon);
    c.batch_size = static_cast<int>(s.integer("batch_size", d.batch_size));
    c.patience = static_cast<int>(s.integer("patience", d.patience));
    c.max_epochs = static_cast<int>(s.integer("max_epochs", d.max_epochs));
    Section ot = s.child("sinkhorn");
    c.sinkhorn.lambda = ot.number("lambda", d.sinkhorn.lambda);
    c.sinkhorn.tolerance = ot.number("tolerance", d.sinkhorn.tolerance);
    c.sinkhorn.max_sweeps = static_cast<int>(ot.integer("max_sweeps", d.sinkhorn.max_sweeps));
    ot.finish();
    return c;
}

ordered_json bart_json(const bart::BartConfig& c) {
    return {{"trees", c.trees}, {"k", c.k},           {"nu", c.nu},         {"q", c.q},
            {"alpha", c.alpha}, {"beta", c.beta},     {"burn_in", c.burn_in}, {"draws", c.draws}};
}

ordered_json cfr_json(const cfr::CfrConfig& c) {
    return {{"rep_layers", c.rep_layers},
            {"rep_width", c.rep_width},
            {"head_layers", c.head_layers},
            {"head_width", c.head_width},
            {"alpha", c.alpha},
            {"lambda", c.lambda},
            {"learning_rate", c.learning_rate},
            {"beta1", c.beta1},
            {"beta2", c.beta2},
            {"adam_epsilon", c.adam_epsilon},
            {"batch_size", c.batch_size},
            {"patience", c.patience},
            {"max_epochs", c.max_epochs},
            {"sinkhorn", {{"lambda", c.sinkhorn.lambda}, {"tolerance", c.sinkhorn.tolerance}, {"max_sweeps", c.sinkhorn.max_sweeps}}}};
}

}  // namespace

std::vector<bart::BartConfig> default_bart_grid(const bart::BartConfig& base) {
    std::vector<bart::BartConfig> grid;
    for (double k : {2.0, 3.0, 5.0})
        for (auto [nu, q] : {std::pair{3.0, 0.9}, std::pair{3.0, 0.99}, std::pair{10.0, 0.75}}) {
            bart::BartConfig c = base;
            c.k = k;
            c.nu = nu;
            c.q = q;
            grid.push_back(c);
        }
    return grid;
}

void RunConfig::validate() const {
    if (threads < 1) throw ConfigError("config: threads must be at least 1");
    if (models.empty()) throw ConfigError("config: model set is empty");
    std::set<std::string> seen;
    for (const auto& m : models) {
        if (!eval::is_model_tag(m)) throw ConfigError("config: unknown model '" + m + "' in models");
        if (!seen.insert(m).second) throw ConfigError("config: model '" + m + "' listed twice");
    }
    if (!(test_frac > 0.0 && test_frac < 1.0)) throw ConfigError("config: split.test_frac must lie in (0,1)");
    if (!(val_frac > 0.0 && val_frac < 1.0)) throw ConfigError("config: split.val_frac must lie in (0,1)");
    const auto& c = cohort;
    if (c.lookback.count() < 0 || c.fallback.count() < 0) throw ConfigError("config: cohort windows must be nonnegative");
    if (!(c.early_begin < c.early_end) || !(c.late_begin < c.late_end))
        throw ConfigError("config: outcome windows need begin < end");
    if (c.outcome_variable.empty()) throw ConfigError("config: cohort.outcome_variable is empty");
    if (bundle.variables.empty()) throw ConfigError("config: cohort.bundle_variables is empty");
    if (!(settings.clip_floor >= 0.0 && settings.clip_floor < 1.0)) throw ConfigError("config: propensity.clip_floor must lie in [0,1)");
    if (settings.clip_ceiling && !(*settings.clip_ceiling > settings.clip_floor && *settings.clip_ceiling <= 1.0))
        throw ConfigError("config: propensity.clip_ceiling must lie in (clip_floor, 1]");
    if (settings.blocks < 1) throw ConfigError("config: propensity.blocks must be at least 1");
    if (settings.propensity.mode == linprop::FeatureMode::confounder_subset && confounders.empty())
        throw ConfigError("config: propensity.features = confounder_subset needs propensity.confounders");
    if (settings.propensity.max_iterations < 1) throw ConfigError("config: propensity.max_iterations must be positive");
    settings.bart.validate();
    for (const auto& g : bart_grid) g.validate();
    if (bart_cv && bart_cv_folds < 2) throw ConfigError("config: bart.cv_folds must be at least 2");
    settings.cfr.validate();
    settings.tarnet.validate();
    bootstrap.validate();
    simulate.validate();
}

RunConfig parse_config(const json& doc) {
    RunConfig c;
    Section root(doc, "");

    Section paths = root.child("paths");
    c.paths.events = paths.string("events", c.paths.events);
    c.paths.sessions = paths.string("sessions", c.paths.sessions);
    c.paths.cohort = paths.string("cohort", c.paths.cohort);
    c.paths.out = paths.string("out", c.paths.out);
    paths.finish();

    c.seed = root.seed("seed", c.seed);
    c.threads = static_cast<int>(root.integer("threads", c.threads));

    Section co = root.child("cohort");
    auto& cc = c.cohort;
    cc.lookback = from_hours(co.number("lookback_h", to_hours(cc.lookback)));
    cc.fallback = from_hours(co.number("fallback_min", to_hours(cc.fallback) * 60.0) / 60.0);
    auto early = co.range("early_window_h", {to_hours(cc.early_begin), to_hours(cc.early_end)});
    cc.early_begin = from_hours(early.first);
    cc.early_end = from_hours(early.second);
    auto late = co.range("late_window_h", {to_hours(cc.late_begin), to_hours(cc.late_end)});
    cc.late_begin = from_hours(late.first);
    cc.late_end = from_hours(late.second);
    cc.max_prone = from_hours(co.number("max_prone_h", to_hours(cc.max_prone)));
    cc.pf_threshold = co.number("pf_threshold", cc.pf_threshold);
    cc.fio2_threshold = co.number("fio2_threshold", cc.fio2_threshold);
    cc.peep_threshold = co.number("peep_threshold", cc.peep_threshold);
    cc.outcome_variable = co.string("outcome_variable", cc.outcome_variable);
    c.bundle.variables = co.strings("bundle_variables", c.bundle.variables);
    c.bundle.window = from_hours(co.number("bundle_window_h", to_hours(c.bundle.window)));
    c.bundle.margin = from_hours(co.number("bundle_margin_h", to_hours(c.bundle.margin)));
    co.finish();

    const std::string outcome = root.string("outcome", "early");
    if (outcome == "early")
        c.outcome = cohort::OutcomeWindow::early;
    else if (outcome == "late")
        c.outcome = cohort::OutcomeWindow::late;
    else
        throw ConfigError("config: outcome must be 'early' or 'late'");

    Section sp = root.child("split");
    c.test_frac = sp.number("test_frac", c.test_frac);
    c.val_frac = sp.number("val_frac", c.val_frac);
    sp.finish();

    c.models = root.strings("models", c.models);

    Section pr = root.child("propensity");
    c.settings.propensity.mode =
        linprop::feature_mode_from_string(pr.string("features", std::string(linprop::to_string(c.settings.propensity.mode))));
    c.confounders = pr.strings("confounders", c.confounders);
    c.settings.clip_floor = pr.number("clip_floor", c.settings.clip_floor);
    if (pr.has("clip_ceiling")) c.settings.clip_ceiling = pr.number("clip_ceiling", 1.0);
    c.settings.blocks = static_cast<int>(pr.integer("blocks", c.settings.blocks));
    c.settings.propensity.max_iterations = static_cast<int>(pr.integer("max_iterations", c.settings.propensity.max_iterations));
    c.settings.propensity.tolerance = pr.number("tolerance", c.settings.propensity.tolerance);
    pr.finish();

    Section ba = root.child("bart");
    c.settings.bart = read_bart(ba, c.settings.bart);
    c.bart_cv = ba.boolean("cv", c.bart_cv);
    c.bart_cv_folds = static_cast<int>(ba.integer("cv_folds", c.bart_cv_folds));
    if (ba.has("cv_grid")) {
        const auto& grid = ba.raw("cv_grid");
        if (!grid.is_array() || grid.empty()) throw ConfigError("config: 'bart.cv_grid' must be a nonempty array");
        for (std::size_t i = 0; i < grid.size(); ++i) {
            Section point(grid[i], "bart.cv_grid[" + std::to_string(i) + "]");
            c.bart_grid.push_back(read_bart(point, c.settings.bart));
            point.finish();
        }
    } else {
        c.bart_grid = default_bart_grid(c.settings.bart);
    }
    ba.finish();

    Section cf = root.child("cfr");
    c.settings.cfr = read_cfr(cf, c.settings.cfr);
    cf.finish();
    Section ta = root.child("tarnet");
    c.settings.tarnet = read_cfr(ta, c.settings.tarnet);
    ta.finish();

    Section bo = root.child("bootstrap");
    c.bootstrap.replicates = static_cast<int>(bo.integer("replicates", c.bootstrap.replicates));
    c.bootstrap.frac = bo.number("frac", c.bootstrap.frac);
    bo.finish();

    Section si = root.child("simulate");
    c.simulate.kind = synthetic::dgp_kind_from_string(si.string("kind", std::string(synthetic::to_string(c.simulate.kind))));
    c.simulate.d = static_cast<int>(si.integer("d", c.simulate.d));
    c.simulate.n = static_cast<int>(si.integer("n", c.simulate.n));
    c.simulate.tau = si.number("tau", c.simulate.tau);
    c.simulate.gamma = si.number("gamma", c.simulate.gamma);
    c.simulate.sigma = si.number("sigma", c.simulate.sigma);
    c.simulate.effect_slope = si.number("effect_slope", c.simulate.effect_slope);
    si.finish();

    root.finish();
    c.validate();
    return c;
}

RunConfig load_config(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw IoError("cannot open config file '" + path.string() + "'");
    json doc;
    try {
        doc = json::parse(in);
    } catch (const json::parse_error& e) {
        throw ConfigError("config file '" + path.string() + "' is not valid JSON: " + e.what());
    }
    return parse_config(doc);
}

ordered_json to_json(const RunConfig& c) {
    ordered_json doc;
    doc["paths"] = {{"events", c.paths.events}, {"sessions", c.paths.sessions}, {"cohort", c.paths.cohort}, {"out", c.paths.out}};
    doc["seed"] = c.seed;
    doc["threads"] = c.threads;
    const auto& cc = c.cohort;
    doc["cohort"] = {{"lookback_h", to_hours(cc.lookback)},
                     {"fallback_min", to_hours(cc.fallback) * 60.0},
                     {"early_window_h", {to_hours(cc.early_begin), to_hours(cc.early_end)}},
                     {"late_window_h", {to_hours(cc.late_begin), to_hours(cc.late_end)}},
                     {"max_prone_h", to_hours(cc.max_prone)},
                     {"pf_threshold", cc.pf_threshold},
                     {"fio2_threshold", cc.fio2_threshold},
                     {"peep_threshold", cc.peep_threshold},
                     {"outcome_variable", cc.outcome_variable},
                     {"bundle_variables", c.bundle.variables},
                     {"bundle_window_h", to_hours(c.bundle.window)},
                     {"bundle_margin_h", to_hours(c.bundle.margin)}};
    doc["outcome"] = c.outcome == cohort::OutcomeWindow::early ? "early" : "late";
    doc["split"] = {{"test_frac", c.test_frac}, {"val_frac", c.val_frac}};
    doc["models"] = c.models;
    doc["propensity"] = {{"features", linprop::to_string(c.settings.propensity.mode)},
                         {"confounders", c.confounders},
                         {"clip_floor", c.settings.clip_floor},
                         {"clip_ceiling", c.settings.clip_ceiling ? ordered_json(*c.settings.clip_ceiling) : ordered_json()},
                         {"blocks", c.settings.blocks},
                         {"max_iterations", c.settings.propensity.max_iterations},
                         {"tolerance", c.settings.propensity.tolerance}};
    auto bart = bart_json(c.settings.bart);
    bart["cv"] = c.bart_cv;
    bart["cv_folds"] = c.bart_cv_folds;
    bart["cv_grid"] = ordered_json::array();
    for (const auto& g : c.bart_grid) bart["cv_grid"].push_back(bart_json(g));
    doc["bart"] = std::move(bart);
    doc["cfr"] = cfr_json(c.settings.cfr);
    doc["tarnet"] = cfr_json(c.settings.tarnet);
    doc["bootstrap"] = {{"replicates", c.bootstrap.replicates}, {"frac", c.bootstrap.frac}};
    doc["simulate"] = {{"kind", synthetic::to_string(c.simulate.kind)}, {"d", c.simulate.d},
                       {"n", c.simulate.n},                             {"tau", c.simulate.tau},
                       {"gamma", c.simulate.gamma},                     {"sigma", c.simulate.sigma},
                       {"effect_slope", c.simulate.effect_slope}};
    return doc;
}

}  // namespace tte
