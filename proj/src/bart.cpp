#include "tte/bart.hpp"

#include <algorithm>
#include <cmath>
#include <iostream>
#include <limits>
#include <numeric>
#include <random>

#include <boost/math/distributions/chi_squared.hpp>

#include "tte/error.hpp"
#include "tte/rng.hpp"

namespace tte::bart {

void BartConfig::validate() const {
    if (trees < 1) throw ConfigError("bart: tree count must be at least 1");
    if (!(k > 0.0)) throw ConfigError("bart: k must be positive");
    if (!(nu > 0.0)) throw ConfigError("bart: nu must be positive");
    if (!(q > 0.0 && q < 1.0)) throw ConfigError("bart: q must lie in (0,1)");
    if (!(alpha > 0.0 && alpha < 1.0)) throw ConfigError("bart: tree prior alpha must lie in (0,1)");
    if (!(beta >= 0.0)) throw ConfigError("bart: tree prior beta must be nonnegative");
    if (burn_in < 0) throw ConfigError("bart: burn_in must be nonnegative");
    if (draws < 1) throw ConfigError("bart: draws must be at least 1");
}

double RegressionTree::evaluate(std::span<const double> row) const {
    int i = 0;
    while (nodes[static_cast<std::size_t>(i)].var >= 0) {
        const auto& node = nodes[static_cast<std::size_t>(i)];
        i = row[static_cast<std::size_t>(node.var)] < node.value ? node.left : node.right;
    }
    return nodes[static_cast<std::size_t>(i)].value;
}

std::size_t RegressionTree::leaves() const {
    return static_cast<std::size_t>(std::count_if(nodes.begin(), nodes.end(), [](const TreeNode& n) { return n.var < 0; }));
}

double BartPosterior::draw_sum(std::size_t draw, std::span<const double> row) const {
    double s = 0.0;
    for (const auto& tree : draws[draw].trees) s += tree.evaluate(row);
    return s;
}

namespace {

struct Node {
    int var = -1;
    int cut = 0;  // rank of the split value among the variable's unique values
    int left = -1;
    int right = -1;
    int parent = -1;
    int depth = 0;
    double mu = 0.0;
    bool alive = true;

    bool leaf() const { return var < 0; }
};

struct Tree {
    std::vector<Node> nodes{Node{}};

    int add(Node node) {
        for (std::size_t i = 0; i < nodes.size(); ++i)
            if (!nodes[i].alive) {
                nodes[i] = node;
                return static_cast<int>(i);
            }
        nodes.push_back(node);
        return static_cast<int>(nodes.size() - 1);
    }
};

struct Suff {
    double n = 0.0;
    double sum = 0.0;
};

class Sampler {
public:
    Sampler(const MatrixXd& xa, const VectorXd& ys, const BartConfig& config, double sigma2_hat)
        : n_(static_cast<int>(xa.rows())),
          p_(static_cast<int>(xa.cols())),
          ys_(ys),
          config_(config),
          rng_(config.seed),
          trees_(static_cast<std::size_t>(config.trees)),
          leaf_of_(static_cast<std::size_t>(config.trees), std::vector<int>(static_cast<std::size_t>(n_), 0)),
          total_(VectorXd::Zero(n_)),
          sigma2_(sigma2_hat) {
        const double sigma_mu = 0.5 / (config.k * std::sqrt(static_cast<double>(config.trees)));
        tau2_ = sigma_mu * sigma_mu;
        boost::math::chi_squared_distribution<double> chi(config.nu);
        lambda_ = sigma2_hat * boost::math::quantile(chi, 1.0 - config.q) / config.nu;

        ranks_.resize(static_cast<std::size_t>(n_) * static_cast<std::size_t>(p_));
        cuts_.resize(static_cast<std::size_t>(p_));
        for (int j = 0; j < p_; ++j) {
            auto& u = cuts_[static_cast<std::size_t>(j)];
            u.assign(xa.col(j).data(), xa.col(j).data() + n_);
            std::sort(u.begin(), u.end());
            u.erase(std::unique(u.begin(), u.end()), u.end());
            for (int i = 0; i < n_; ++i)
                rank(i, j) = static_cast<int>(std::lower_bound(u.begin(), u.end(), xa(i, j)) - u.begin());
        }
    }

    BartPosterior run() {
        BartPosterior post;
        post.config = config_;
        const int total_iterations = config_.burn_in + config_.draws;
        for (int it = 0; it < total_iterations; ++it) {
            for (std::size_t m = 0; m < trees_.size(); ++m) update_tree(m);
            draw_sigma2();
            if (it >= config_.burn_in) post.draws.push_back(snapshot());
        }
        return post;
    }

private:
    int& rank(int i, int j) { return ranks_[static_cast<std::size_t>(j) * static_cast<std::size_t>(n_) + static_cast<std::size_t>(i)]; }
    int rank(int i, int j) const {
        return ranks_[static_cast<std::size_t>(j) * static_cast<std::size_t>(n_) + static_cast<std::size_t>(i)];
    }

    double uniform() { return std::uniform_real_distribution<double>(0.0, 1.0)(rng_); }
    int pick(std::size_t count) { return std::uniform_int_distribution<int>(0, static_cast<int>(count) - 1)(rng_); }

    bool splittable(const std::vector<int>& rows, int j) const {
        if (rows.empty()) return false;
        const int r0 = rank(rows.front(), j);
        return std::any_of(rows.begin() + 1, rows.end(), [&](int i) { return rank(i, j) != r0; });
    }

    std::vector<int> splittable_vars(const std::vector<int>& rows) const {
        std::vector<int> vars;
        for (int j = 0; j < p_; ++j)
            if (splittable(rows, j)) vars.push_back(j);
        return vars;
    }

    bool has_rule(const std::vector<int>& rows) const {
        for (int j = 0; j < p_; ++j)
            if (splittable(rows, j)) return true;
        return false;
    }

    // Prior split probability of a node; zero when no rule can split its rows.
    double split_prob(int depth, const std::vector<int>& rows) const {
        if (!has_rule(rows)) return 0.0;
        return config_.alpha * std::pow(1.0 + depth, -config_.beta);
    }

    Suff suff(const std::vector<int>& rows) const {
        Suff s;
        s.n = static_cast<double>(rows.size());
        for (int i : rows) s.sum += resid_(i);
        return s;
    }

    // Log marginal likelihood of a leaf after integrating mu, up to shared terms.
    double leaf_loglik(const Suff& s) const {
        const double v = sigma2_ + s.n * tau2_;
        return 0.5 * std::log(sigma2_ / v) + s.sum * s.sum * tau2_ / (2.0 * sigma2_ * v);
    }

    std::vector<int> rows_in(std::size_t m, int node) const {
        std::vector<int> rows;
        const auto& lo = leaf_of_[m];
        for (int i = 0; i < n_; ++i)
            if (lo[static_cast<std::size_t>(i)] == node) rows.push_back(i);
        return rows;
    }

    void partition(const std::vector<int>& rows, int var, int cut, std::vector<int>& left, std::vector<int>& right) const {
        left.clear();
        right.clear();
        for (int i : rows) (rank(i, var) < cut ? left : right).push_back(i);
    }

    // Uniform cut among values that leave both children nonempty.
    int draw_cut(const std::vector<int>& rows, int var) {
        int lo = std::numeric_limits<int>::max(), hi = std::numeric_limits<int>::min();
        for (int i : rows) {
            lo = std::min(lo, rank(i, var));
            hi = std::max(hi, rank(i, var));
        }
        return lo + 1 + pick(static_cast<std::size_t>(hi - lo));
    }

    void update_tree(std::size_t m) {
        Tree& tree = trees_[m];
        auto& lo = leaf_of_[m];
        for (int i = 0; i < n_; ++i) total_(i) -= tree.nodes[static_cast<std::size_t>(lo[static_cast<std::size_t>(i)])].mu;
        resid_ = ys_ - total_;

        std::vector<int> leaves, nogs;
        for (std::size_t i = 0; i < tree.nodes.size(); ++i) {
            const auto& nd = tree.nodes[i];
            if (!nd.alive) continue;
            if (nd.leaf())
                leaves.push_back(static_cast<int>(i));
            else if (tree.nodes[static_cast<std::size_t>(nd.left)].leaf() && tree.nodes[static_cast<std::size_t>(nd.right)].leaf())
                nogs.push_back(static_cast<int>(i));
        }

        if (nogs.empty()) {
            grow(m, leaves, nogs, 1.0);
        } else {
            const double u = uniform();
            if (u < 0.25)
                grow(m, leaves, nogs, 0.25);
            else if (u < 0.5)
                prune(m, leaves, nogs);
            else
                change(m, nogs);
        }

        draw_leaves(m);
        for (int i = 0; i < n_; ++i) total_(i) += tree.nodes[static_cast<std::size_t>(lo[static_cast<std::size_t>(i)])].mu;
    }

    void grow(std::size_t m, const std::vector<int>& leaves, const std::vector<int>& nogs, double p_grow) {
        Tree& tree = trees_[m];
        const int eta = leaves[static_cast<std::size_t>(pick(leaves.size()))];
        const auto rows = rows_in(m, eta);
        const auto vars = splittable_vars(rows);
        if (vars.empty()) return;
        const int var = vars[static_cast<std::size_t>(pick(vars.size()))];
        const int cut = draw_cut(rows, var);
        std::vector<int> left, right;
        partition(rows, var, cut, left, right);

        const int depth = tree.nodes[static_cast<std::size_t>(eta)].depth;
        const double p_eta = config_.alpha * std::pow(1.0 + depth, -config_.beta);
        const double p_left = split_prob(depth + 1, left);
        const double p_right = split_prob(depth + 1, right);
        const double log_prior = std::log(p_eta) + std::log1p(-p_left) + std::log1p(-p_right) - std::log1p(-p_eta);
        const double log_lik = leaf_loglik(suff(left)) + leaf_loglik(suff(right)) - leaf_loglik(suff(rows));

        const int parent = tree.nodes[static_cast<std::size_t>(eta)].parent;
        const bool parent_was_nog = parent >= 0 && std::find(nogs.begin(), nogs.end(), parent) != nogs.end();
        const double nogs_after = static_cast<double>(nogs.size()) - (parent_was_nog ? 1.0 : 0.0) + 1.0;
        const double log_trans = std::log(0.25 / nogs_after) - std::log(p_grow / static_cast<double>(leaves.size()));

        if (std::log(uniform()) >= log_prior + log_lik + log_trans) return;

        Node child;
        child.parent = eta;
        child.depth = depth + 1;
        const int l = tree.add(child);
        const int r = tree.add(child);
        Node& node = tree.nodes[static_cast<std::size_t>(eta)];
        node.var = var;
        node.cut = cut;
        node.left = l;
        node.right = r;
        auto& lo = leaf_of_[m];
        for (int i : left) lo[static_cast<std::size_t>(i)] = l;
        for (int i : right) lo[static_cast<std::size_t>(i)] = r;
    }

    void prune(std::size_t m, const std::vector<int>& leaves, const std::vector<int>& nogs) {
        Tree& tree = trees_[m];
        const int nu = nogs[static_cast<std::size_t>(pick(nogs.size()))];
        const Node& node = tree.nodes[static_cast<std::size_t>(nu)];
        const auto left = rows_in(m, node.left);
        const auto right = rows_in(m, node.right);
        std::vector<int> rows(left);
        rows.insert(rows.end(), right.begin(), right.end());

        const double p_nu = config_.alpha * std::pow(1.0 + node.depth, -config_.beta);
        const double p_left = split_prob(node.depth + 1, left);
        const double p_right = split_prob(node.depth + 1, right);
        const double log_prior = std::log1p(-p_nu) - std::log(p_nu) - std::log1p(-p_left) - std::log1p(-p_right);
        const double log_lik = leaf_loglik(suff(rows)) - leaf_loglik(suff(left)) - leaf_loglik(suff(right));
        const double p_grow_after = node.parent < 0 ? 1.0 : 0.25;
        const double log_trans = std::log(p_grow_after / static_cast<double>(leaves.size() - 1)) -
                                 std::log(0.25 / static_cast<double>(nogs.size()));

        if (std::log(uniform()) >= log_prior + log_lik + log_trans) return;

        tree.nodes[static_cast<std::size_t>(node.left)].alive = false;
        tree.nodes[static_cast<std::size_t>(node.right)].alive = false;
        Node& pruned = tree.nodes[static_cast<std::size_t>(nu)];
        pruned.var = -1;
        pruned.left = pruned.right = -1;
        auto& lo = leaf_of_[m];
        for (int i : rows) lo[static_cast<std::size_t>(i)] = nu;
    }

    void change(std::size_t m, const std::vector<int>& nogs) {
        Tree& tree = trees_[m];
        const int nu = nogs[static_cast<std::size_t>(pick(nogs.size()))];
        const Node& node = tree.nodes[static_cast<std::size_t>(nu)];
        const auto old_left = rows_in(m, node.left);
        const auto old_right = rows_in(m, node.right);
        std::vector<int> rows(old_left);
        rows.insert(rows.end(), old_right.begin(), old_right.end());

        const auto vars = splittable_vars(rows);
        const int var = vars[static_cast<std::size_t>(pick(vars.size()))];
        const int cut = draw_cut(rows, var);
        std::vector<int> left, right;
        partition(rows, var, cut, left, right);

        const int d = node.depth + 1;
        const double log_prior = std::log1p(-split_prob(d, left)) + std::log1p(-split_prob(d, right)) -
                                 std::log1p(-split_prob(d, old_left)) - std::log1p(-split_prob(d, old_right));
        const double log_lik = leaf_loglik(suff(left)) + leaf_loglik(suff(right)) - leaf_loglik(suff(old_left)) -
                               leaf_loglik(suff(old_right));

        if (std::log(uniform()) >= log_prior + log_lik) return;

        Node& changed = tree.nodes[static_cast<std::size_t>(nu)];
        changed.var = var;
        changed.cut = cut;
        auto& lo = leaf_of_[m];
        for (int i : left) lo[static_cast<std::size_t>(i)] = changed.left;
        for (int i : right) lo[static_cast<std::size_t>(i)] = changed.right;
    }

    void draw_leaves(std::size_t m) {
        Tree& tree = trees_[m];
        std::vector<Suff> s(tree.nodes.size());
        const auto& lo = leaf_of_[m];
        for (int i = 0; i < n_; ++i) {
            auto& leaf = s[static_cast<std::size_t>(lo[static_cast<std::size_t>(i)])];
            leaf.n += 1.0;
            leaf.sum += resid_(i);
        }
        std::normal_distribution<double> z(0.0, 1.0);
        for (std::size_t i = 0; i < tree.nodes.size(); ++i) {
            Node& nd = tree.nodes[i];
            if (!nd.alive || !nd.leaf()) continue;
            const double precision = s[i].n / sigma2_ + 1.0 / tau2_;
            const double mean = (s[i].sum / sigma2_) / precision;
            nd.mu = mean + z(rng_) / std::sqrt(precision);
        }
    }

    void draw_sigma2() {
        const double ssr = (ys_ - total_).squaredNorm();
        std::chi_squared_distribution<double> chi(config_.nu + n_);
        sigma2_ = (config_.nu * lambda_ + ssr) / chi(rng_);
    }

    RegressionTree snapshot_tree(const Tree& tree) const {
        RegressionTree out;
        std::vector<int> order{0};
        std::vector<int> index(tree.nodes.size(), -1);
        for (std::size_t k = 0; k < order.size(); ++k) {
            const Node& nd = tree.nodes[static_cast<std::size_t>(order[k])];
            index[static_cast<std::size_t>(order[k])] = static_cast<int>(k);
            if (!nd.leaf()) {
                order.push_back(nd.left);
                order.push_back(nd.right);
            }
        }
        out.nodes.resize(order.size());
        for (std::size_t k = 0; k < order.size(); ++k) {
            const Node& nd = tree.nodes[static_cast<std::size_t>(order[k])];
            TreeNode& o = out.nodes[k];
            if (nd.leaf()) {
                o.value = nd.mu;
            } else {
                o.var = nd.var;
                o.value = cuts_[static_cast<std::size_t>(nd.var)][static_cast<std::size_t>(nd.cut)];
                o.left = index[static_cast<std::size_t>(nd.left)];
                o.right = index[static_cast<std::size_t>(nd.right)];
            }
        }
        return out;
    }

    BartDraw snapshot() const {
        BartDraw d;
        d.trees.reserve(trees_.size());
        for (const auto& tree : trees_) d.trees.push_back(snapshot_tree(tree));
        d.sigma = std::sqrt(sigma2_);
        return d;
    }

    int n_;
    int p_;
    VectorXd ys_;
    BartConfig config_;
    Rng rng_;
    std::vector<int> ranks_;                 // column-major rank of each value among the column's unique values
    std::vector<std::vector<double>> cuts_;  // sorted unique values per column
    std::vector<Tree> trees_;
    std::vector<std::vector<int>> leaf_of_;
    VectorXd total_;
    VectorXd resid_;
    double sigma2_;
    double tau2_ = 0.0;
    double lambda_ = 0.0;
};

MatrixXd augment(const MatrixXd& x, const VectorXd& t) {
    MatrixXd xa(x.rows(), x.cols() + 1);
    xa.leftCols(x.cols()) = x;
    xa.col(x.cols()) = t;
    return xa;
}

double residual_variance(const MatrixXd& xa, const VectorXd& ys) {
    const Eigen::Index n = xa.rows();
    MatrixXd a(n, xa.cols() + 1);
    a.col(0).setOnes();
    a.rightCols(xa.cols()) = xa;
    Eigen::ColPivHouseholderQR<MatrixXd> qr(a);
    const Eigen::Index dof = n - qr.rank();
    if (dof > 0) {
        const VectorXd r = ys - a * qr.solve(ys);
        const double v = r.squaredNorm() / static_cast<double>(dof);
        if (v > 0.0) return v;
    }
    return (ys.array() - ys.mean()).square().sum() / static_cast<double>(n - 1);
}

}  // namespace

BartPosterior bart_fit(const MatrixXd& x, const VectorXd& t, const VectorXd& y, const BartConfig& config) {
    config.validate();
    const Eigen::Index n = x.rows();
    if (t.size() != n || y.size() != n) throw FitError("bart: inconsistent input lengths");
    if (n < 20) throw FitError("bart: need at least 20 rows, got " + std::to_string(n));
    if (!y.allFinite() || !x.allFinite()) throw FitError("bart: non-finite input");
    const double lo = y.minCoeff(), hi = y.maxCoeff();
    if (!(hi > lo)) throw FitError("bart: outcome is constant; cannot scale to [-0.5, 0.5]");

    const MatrixXd xa = augment(x, t);
    const VectorXd ys = ((y.array() - lo) / (hi - lo) - 0.5).matrix();
    Sampler sampler(xa, ys, config, residual_variance(xa, ys));
    BartPosterior post = sampler.run();
    post.shift = lo;
    post.scale = hi - lo;
    post.covariates = x.cols();
    for (auto& d : post.draws) d.sigma *= post.scale;
    return post;
}

VectorXd bart_predict(const BartPosterior& posterior, const MatrixXd& x, const VectorXd& t) {
    if (x.cols() != posterior.covariates) throw FitError("bart: covariate count differs from the fitted model");
    VectorXd out(x.rows());
    std::vector<double> row(static_cast<std::size_t>(x.cols() + 1));
    for (Eigen::Index i = 0; i < x.rows(); ++i) {
        for (Eigen::Index j = 0; j < x.cols(); ++j) row[static_cast<std::size_t>(j)] = x(i, j);
        row.back() = t(i);
        double s = 0.0;
        for (std::size_t d = 0; d < posterior.draws.size(); ++d) s += posterior.draw_sum(d, row);
        out(i) = posterior.unscale(s / static_cast<double>(posterior.draws.size()));
    }
    return out;
}

VectorXd bart_cate(const BartPosterior& posterior, const MatrixXd& x) {
    return bart_predict(posterior, x, VectorXd::Ones(x.rows())) - bart_predict(posterior, x, VectorXd::Zero(x.rows()));
}

linprop::AteEstimate bart_ate(const BartPosterior& posterior, const MatrixXd& x_test) {
    if (x_test.rows() == 0) throw FitError("bart: empty test set");
    return {bart_cate(posterior, x_test).mean(), "bart"};
}

BartConfig bart_cv_select(const MatrixXd& x, const VectorXd& t, const VectorXd& y, std::span<const BartConfig> grid,
                          int folds, std::uint64_t seed) {
    if (grid.empty()) throw ConfigError("bart: empty cross-validation grid");
    if (grid.size() == 1) return grid.front();
    const Eigen::Index n = x.rows();
    if (folds < 2 || n < folds) throw ConfigError("bart: need at least 2 folds and one row per fold");

    std::vector<std::size_t> perm(static_cast<std::size_t>(n));
    std::iota(perm.begin(), perm.end(), 0);
    Rng rng(mix64(seed));
    std::shuffle(perm.begin(), perm.end(), rng);
    std::vector<int> fold_of(static_cast<std::size_t>(n));
    for (std::size_t k = 0; k < perm.size(); ++k) fold_of[perm[k]] = static_cast<int>(k % static_cast<std::size_t>(folds));

    auto take = [&](const std::vector<Eigen::Index>& rows, MatrixXd& bx, VectorXd& bt, VectorXd& by) {
        const auto m = static_cast<Eigen::Index>(rows.size());
        bx.resize(m, x.cols());
        bt.resize(m);
        by.resize(m);
        for (Eigen::Index i = 0; i < m; ++i) {
            const auto r = rows[static_cast<std::size_t>(i)];
            bx.row(i) = x.row(r);
            bt(i) = t(r);
            by(i) = y(r);
        }
    };

    std::optional<std::size_t> best;
    double best_rmse = std::numeric_limits<double>::infinity();
    for (std::size_t g = 0; g < grid.size(); ++g) {
        try {
            double rmse = 0.0;
            for (int f = 0; f < folds; ++f) {
                std::vector<Eigen::Index> fit_rows, held_rows;
                for (Eigen::Index i = 0; i < n; ++i) (fold_of[static_cast<std::size_t>(i)] == f ? held_rows : fit_rows).push_back(i);
                MatrixXd fx, hx;
                VectorXd ft, fy, ht, hy;
                take(fit_rows, fx, ft, fy);
                take(held_rows, hx, ht, hy);
                const auto post = bart_fit(fx, ft, fy, grid[g]);
                rmse += std::sqrt((bart_predict(post, hx, ht) - hy).squaredNorm() / static_cast<double>(hy.size()));
            }
            rmse /= folds;
            if (rmse < best_rmse) {
                best_rmse = rmse;
                best = g;
            }
        } catch (const Error& e) {
            std::cerr << "warning: bart cv grid point " << g << " skipped: " << e.what() << '\n';
        }
    }
    if (!best) throw FitError("bart: every cross-validation grid point failed");
    return grid[*best];
}

}  // namespace tte::bart
