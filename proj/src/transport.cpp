#include "tte/transport.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <string>
#include <vector>

#include "tte/error.hpp"

namespace tte::cfr {

namespace {

MatrixXd sq_distances(const MatrixXd& a, const MatrixXd& b) {
    const Eigen::VectorXd na = a.rowwise().squaredNorm();
    const Eigen::VectorXd nb = b.rowwise().squaredNorm();
    MatrixXd c = -2.0 * a * b.transpose();
    c.colwise() += na;
    c.rowwise() += nb.transpose();
    return c.cwiseMax(0.0);
}

double log_sum_exp(const Eigen::Ref<const Eigen::VectorXd>& v) {
    const double m = v.maxCoeff();
    if (!std::isfinite(m)) return m;
    return m + std::log((v.array() - m).exp().sum());
}

// Entropic plan between uniform measures by log-domain Sinkhorn with epsilon
// annealing from max(C) down to mean(C) / lambda.
MatrixXd sinkhorn_plan(const MatrixXd& c, const SinkhornOptions& options) {
    const Eigen::Index n = c.rows(), m = c.cols();
    const double log_a = -std::log(static_cast<double>(n));
    const double log_b = -std::log(static_cast<double>(m));
    const double cmax = c.maxCoeff();
    const double target = c.mean() / options.lambda;
    if (!(target > 0.0)) return MatrixXd::Constant(n, m, 1.0 / static_cast<double>(n * m));

    Eigen::VectorXd f = Eigen::VectorXd::Zero(n), g = Eigen::VectorXd::Zero(m);
    Eigen::VectorXd tmp_row(m), tmp_col(n);
    double eps = std::max(cmax, target);
    MatrixXd plan(n, m);
    Eigen::VectorXd f_next(n);
    while (true) {
        for (int sweep = 0; sweep < options.max_sweeps; ++sweep) {
            for (Eigen::Index i = 0; i < n; ++i) {
                tmp_row = (g.transpose() - c.row(i)) / eps;
                f_next(i) = -eps * (log_sum_exp(tmp_row) + log_b);
            }
            // columns are exact after each g update; row i of the current plan
            // sums to a * exp((f_i - f_next_i) / eps)
            if (sweep > 0) {
                const double err = (((f - f_next).array() / eps).exp() - 1.0).abs().sum() / static_cast<double>(n);
                if (err < (eps <= target ? options.tolerance : 10.0 * options.tolerance)) break;
            }
            f = f_next;
            for (Eigen::Index j = 0; j < m; ++j) {
                tmp_col = (f - c.col(j)) / eps;
                g(j) = -eps * (log_sum_exp(tmp_col) + log_a);
            }
        }
        if (eps <= target) break;
        eps = std::max(eps / 2.0, target);
    }
    for (Eigen::Index i = 0; i < n; ++i)
        for (Eigen::Index j = 0; j < m; ++j) plan(i, j) = std::exp((f(i) + g(j) - c(i, j)) / eps + log_a + log_b);
    return plan;
}

void check_dims(const MatrixXd& a, const MatrixXd& b) {
    if (a.rows() == 0 || b.rows() == 0) throw Error("transport: point sets must be nonempty");
    if (a.cols() != b.cols())
        throw Error("transport: dimension mismatch (" + std::to_string(a.cols()) + " vs " + std::to_string(b.cols()) + ")");
}

// The scaling iterations stop at a tolerance, so the two argument orders can
// differ slightly; a canonical order makes the result exactly symmetric.
bool swapped(const MatrixXd& a, const MatrixXd& b) {
    if (a.rows() != b.rows()) return a.rows() > b.rows();
    return std::lexicographical_compare(b.data(), b.data() + b.size(), a.data(), a.data() + a.size());
}

TransportGradient gradient_ordered(const MatrixXd& a, const MatrixXd& b, const SinkhornOptions& options) {
    const MatrixXd cab = sq_distances(a, b);
    const MatrixXd caa = sq_distances(a, a);
    const MatrixXd cbb = sq_distances(b, b);
    const MatrixXd pab = sinkhorn_plan(cab, options);
    const MatrixXd paa = sinkhorn_plan(caa, options);
    const MatrixXd pbb = sinkhorn_plan(cbb, options);

    TransportGradient out;
    out.distance = pab.cwiseProduct(cab).sum() - 0.5 * paa.cwiseProduct(caa).sum() - 0.5 * pbb.cwiseProduct(cbb).sum();

    // d/dx_i sum_j P_ij |x_i - y_j|^2 = 2 (r_i x_i - P_i. Y), r_i = row mass
    const Eigen::VectorXd rab = pab.rowwise().sum(), cab_mass = pab.colwise().sum().transpose();
    out.grad_a = 2.0 * (rab.asDiagonal() * a - pab * b);
    out.grad_b = 2.0 * (cab_mass.asDiagonal() * b - pab.transpose() * a);
    // self terms: x_i appears as both source and target
    const MatrixXd saa = paa + paa.transpose();
    const Eigen::VectorXd raa = saa.rowwise().sum();
    out.grad_a -= (raa.asDiagonal() * a - saa * a);
    const MatrixXd sbb = pbb + pbb.transpose();
    const Eigen::VectorXd rbb = sbb.rowwise().sum();
    out.grad_b -= (rbb.asDiagonal() * b - sbb * b);
    return out;
}

double approx_ordered(const MatrixXd& a, const MatrixXd& b, const SinkhornOptions& options) {
    const MatrixXd cab = sq_distances(a, b);
    const MatrixXd caa = sq_distances(a, a);
    const MatrixXd cbb = sq_distances(b, b);
    return sinkhorn_plan(cab, options).cwiseProduct(cab).sum() - 0.5 * sinkhorn_plan(caa, options).cwiseProduct(caa).sum() -
           0.5 * sinkhorn_plan(cbb, options).cwiseProduct(cbb).sum();
}

}  // namespace

TransportGradient wasserstein_gradient(const MatrixXd& a, const MatrixXd& b, const SinkhornOptions& options) {
    check_dims(a, b);
    if (!swapped(a, b)) return gradient_ordered(a, b, options);
    TransportGradient g = gradient_ordered(b, a, options);
    std::swap(g.grad_a, g.grad_b);
    return g;
}

double wasserstein_approx(const MatrixXd& a, const MatrixXd& b, const SinkhornOptions& options) {
    check_dims(a, b);
    return swapped(a, b) ? approx_ordered(b, a, options) : approx_ordered(a, b, options);
}

std::vector<int> hungarian(const MatrixXd& cost) {
    // Shortest augmenting path formulation with row/column potentials, 1-based.
    const int n = static_cast<int>(cost.rows());
    if (cost.cols() != n) throw Error("hungarian: cost matrix must be square");
    const double inf = std::numeric_limits<double>::infinity();
    std::vector<double> u(static_cast<std::size_t>(n + 1), 0.0), v(static_cast<std::size_t>(n + 1), 0.0);
    std::vector<int> match(static_cast<std::size_t>(n + 1), 0), way(static_cast<std::size_t>(n + 1), 0);
    for (int i = 1; i <= n; ++i) {
        match[0] = i;
        int j0 = 0;
        std::vector<double> minv(static_cast<std::size_t>(n + 1), inf);
        std::vector<bool> used(static_cast<std::size_t>(n + 1), false);
        do {
            used[static_cast<std::size_t>(j0)] = true;
            const int i0 = match[static_cast<std::size_t>(j0)];
            double delta = inf;
            int j1 = 0;
            for (int j = 1; j <= n; ++j) {
                if (used[static_cast<std::size_t>(j)]) continue;
                const double cur = cost(i0 - 1, j - 1) - u[static_cast<std::size_t>(i0)] - v[static_cast<std::size_t>(j)];
                if (cur < minv[static_cast<std::size_t>(j)]) {
                    minv[static_cast<std::size_t>(j)] = cur;
                    way[static_cast<std::size_t>(j)] = j0;
                }
                if (minv[static_cast<std::size_t>(j)] < delta) {
                    delta = minv[static_cast<std::size_t>(j)];
                    j1 = j;
                }
            }
            for (int j = 0; j <= n; ++j) {
                if (used[static_cast<std::size_t>(j)]) {
                    u[static_cast<std::size_t>(match[static_cast<std::size_t>(j)])] += delta;
                    v[static_cast<std::size_t>(j)] -= delta;
                } else {
                    minv[static_cast<std::size_t>(j)] -= delta;
                }
            }
            j0 = j1;
        } while (match[static_cast<std::size_t>(j0)] != 0);
        do {
            const int j1 = way[static_cast<std::size_t>(j0)];
            match[static_cast<std::size_t>(j0)] = match[static_cast<std::size_t>(j1)];
            j0 = j1;
        } while (j0 != 0);
    }
    std::vector<int> assignment(static_cast<std::size_t>(n), -1);
    for (int j = 1; j <= n; ++j) assignment[static_cast<std::size_t>(match[static_cast<std::size_t>(j)] - 1)] = j - 1;
    return assignment;
}

double wasserstein_exact(const MatrixXd& a, const MatrixXd& b) {
    check_dims(a, b);
    if (a.rows() * b.rows() > 64) throw Error("wasserstein_exact: |A|*|B| must not exceed 64");
    const auto na = static_cast<int>(a.rows()), nb = static_cast<int>(b.rows());
    const int l = std::lcm(na, nb);
    const MatrixXd c = sq_distances(a, b);
    MatrixXd expanded(l, l);
    for (int i = 0; i < l; ++i)
        for (int j = 0; j < l; ++j) expanded(i, j) = c(i / (l / na), j / (l / nb));
    const auto assignment = hungarian(expanded);
    double total = 0.0;
    for (int i = 0; i < l; ++i) total += expanded(i, assignment[static_cast<std::size_t>(i)]);
    return total / l;
}

}  // namespace tte::cfr
