#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <numeric>

#include "support.hpp"
#include "tte/cfrnet.hpp"
#include "tte/error.hpp"
#include "tte/synthetic.hpp"
#include "tte/transport.hpp"

using namespace tte;
using namespace tte::cfr;
using Eigen::MatrixXd;
using Eigen::VectorXd;

namespace {

// Brute force over all permutations of a square cost matrix.
double brute_force_assignment(const MatrixXd& cost) {
    std::vector<int> perm(static_cast<std::size_t>(cost.rows()));
    std::iota(perm.begin(), perm.end(), 0);
    double best = std::numeric_limits<double>::infinity();
    do {
        double c = 0.0;
        for (std::size_t i = 0; i < perm.size(); ++i) c += cost(static_cast<Eigen::Index>(i), perm[i]);
        best = std::min(best, c);
    } while (std::next_permutation(perm.begin(), perm.end()));
    return best;
}

Dataset batch_of(Rng& rng, int n, int d) {
    Dataset b;
    b.x = test::gaussian(rng, n, d);
    b.y = test::gaussian(rng, n, 1).col(0);
    b.t.resize(n);
    for (int i = 0; i < n; ++i) b.t(i) = i % 2;
    return b;
}

CfrConfig small() {
    CfrConfig c;
    c.rep_layers = 2;
    c.rep_width = 16;
    c.head_layers = 2;
    c.head_width = 8;
    return c;
}

double elu(double v) { return v > 0.0 ? v : std::expm1(v); }

}  // namespace

TEST_SUITE("cfrnet") {

TEST_CASE("sample weights") {
    CHECK(sample_weight(1, 0.5) == 1.0);
    CHECK(sample_weight(0, 0.5) == 1.0);
    CHECK(sample_weight(1, 0.25) == doctest::Approx(2.0));
    CHECK(sample_weight(0, 0.25) == doctest::Approx(2.0 / 3.0));
    CHECK_THROWS_AS(sample_weight(1, 0.0), FitError);
    CHECK_THROWS_AS(sample_weight(1, 1.0), FitError);
}

TEST_CASE("default architecture and TARNet preset") {
    const CfrConfig c;
    CHECK(c.rep_layers == 3);
    CHECK(c.rep_width == 200);
    CHECK(c.head_layers == 3);
    CHECK(c.head_width == 100);
    CHECK(c.alpha == 1.0);
    CHECK(c.lambda == 1e-4);
    CHECK(CfrConfig::tarnet().alpha == 0.0);
    const auto m = init_model(7, c, 1);
    REQUIRE(m.rep.size() == 3);
    CHECK(m.rep[0].in == 7);
    for (const auto& l : m.rep) CHECK(l.out == 200);
    REQUIRE(m.head0.size() == 4);
    CHECK(m.head0[0].in == 200);
    CHECK(m.head0[2].out == 100);
    CHECK(m.head0[3].out == 1);
    CHECK(m.head_begin == 7 * 200 + 200 + 2 * (200 * 200 + 200));
}

TEST_CASE("hungarian matches enumeration") {
    MatrixXd c(3, 3);
    c << 4, 1, 3, 2, 0, 5, 3, 2, 2;
    const auto a = hungarian(c);
    double total = 0.0;
    for (int i = 0; i < 3; ++i) total += c(i, a[static_cast<std::size_t>(i)]);
    CHECK(total == brute_force_assignment(c));
    CHECK(total == 5.0);
    Rng rng(1);
    for (int rep = 0; rep < 30; ++rep) {
        const MatrixXd r = test::gaussian(rng, 6, 6).cwiseAbs();
        const auto p = hungarian(r);
        double s = 0.0;
        for (int i = 0; i < 6; ++i) s += r(i, p[static_cast<std::size_t>(i)]);
        CHECK(s == doctest::Approx(brute_force_assignment(r)).epsilon(1e-12));
    }
}

TEST_CASE("exact transport") {
    MatrixXd a(1, 2), b(1, 2);
    a << 0, 0;
    b << 1, 2;
    CHECK(wasserstein_exact(a, b) == doctest::Approx(5.0));
    Rng rng(2);
    const MatrixXd p = test::gaussian(rng, 5, 3);
    CHECK(wasserstein_exact(p, p) == doctest::Approx(0.0));
    CHECK_THROWS(wasserstein_exact(test::gaussian(rng, 9, 2), test::gaussian(rng, 8, 2)));
    // unequal sizes: 2 points against 1 point, each carries its half of the mass
    MatrixXd two(2, 1), one(1, 1);
    two << 0, 2;
    one << 1;
    CHECK(wasserstein_exact(two, one) == doctest::Approx(1.0));
}

TEST_CASE("entropic transport basics") {
    Rng rng(3);
    const MatrixXd a = test::gaussian(rng, 12, 4);
    const MatrixXd b = test::gaussian(rng, 9, 4) + MatrixXd::Constant(9, 4, 0.3);
    CHECK(wasserstein_approx(a, a) < 1e-6);
    CHECK(wasserstein_approx(a, b) == wasserstein_approx(b, a));
    MatrixXd s(1, 3), t(1, 3);
    s << 0, 1, 0;
    t << 1, -1, 2;
    CHECK(std::abs(wasserstein_approx(s, t) - 9.0) < 0.01 * 9.0);
    CHECK_THROWS(wasserstein_approx(a, test::gaussian(rng, 3, 5)));
    CHECK(wasserstein_approx(a, b) == wasserstein_approx(a, b));
}

TEST_CASE("entropic transport within 5% of exact on 8-point sets") {
    Rng rng(4);
    for (int rep = 0; rep < 25; ++rep) {
        const MatrixXd a = test::gaussian(rng, 8, 3);
        const MatrixXd b = test::gaussian(rng, 8, 3) + MatrixXd::Constant(8, 3, 0.5);
        const double exact = wasserstein_exact(a, b);
        CHECK(std::abs(wasserstein_approx(a, b) - exact) <= 0.05 * exact);
    }
}

TEST_CASE("transport gradient returns the same distance") {
    Rng rng(5);
    const MatrixXd a = test::gaussian(rng, 6, 2), b = test::gaussian(rng, 5, 2);
    const auto g = wasserstein_gradient(a, b);
    CHECK(g.distance == doctest::Approx(wasserstein_approx(a, b)).epsilon(1e-12));
    CHECK(g.grad_a.rows() == 6);
    CHECK(g.grad_b.rows() == 5);
    // moving every point of A along its gradient lowers the distance
    const double h = 1e-3;
    CHECK(wasserstein_approx(a - h * g.grad_a, b) < g.distance);
}

TEST_CASE("hand-computed two-row loss") {
    CfrConfig c;
    c.rep_layers = 1;
    c.rep_width = 2;
    c.head_layers = 1;
    c.head_width = 1;
    c.alpha = 0.0;
    c.lambda = 0.01;
    auto m = init_model(1, c, 0);
    REQUIRE(m.params.size() == 14);
    // rep W, rep b, head0 W, b, out W, out b, head1 W, b, out W, out b
    m.params << 0.5, -1.0, 0.1, 0.2, -0.7, 0.2, 0.0, -0.5, 0.1, 0.3, -0.4, 0.05, 1.5, -0.2;
    m.treated_fraction = 0.25;
    Dataset b;
    b.x.resize(2, 1);
    b.x << 1.0, -2.0;
    b.t = VectorXd(2);
    b.t << 1.0, 0.0;
    b.y = VectorXd(2);
    b.y << 0.5, -1.0;

    auto phi = [](double x) {
        const double h0 = elu(0.5 * x + 0.1), h1 = elu(-1.0 * x + 0.2);
        const double norm = std::sqrt(h0 * h0 + h1 * h1);
        return std::pair{h0 / norm, h1 / norm};
    };
    const auto [a0, a1] = phi(1.0);
    const double f1 = 1.5 * elu(0.3 * a0 - 0.4 * a1 + 0.05) - 0.2;
    const auto [c0, c1] = phi(-2.0);
    const double f0 = -0.5 * elu(-0.7 * c0 + 0.2 * c1 + 0.0) + 0.1;
    const double factual = (2.0 * (f1 - 0.5) * (f1 - 0.5) + (2.0 / 3.0) * (f0 + 1.0) * (f0 + 1.0)) / 2.0;
    double heads = 0.0;
    for (int i = 4; i < 14; ++i) heads += m.params(i) * m.params(i);
    const auto parts = cfr_loss(m, b, c);
    CHECK(std::abs(parts.factual - factual) < 1e-10);
    CHECK(std::abs(parts.regularization - 0.01 * heads) < 1e-10);
    CHECK(std::abs(parts.total - factual - 0.01 * heads) < 1e-10);
}

TEST_CASE("alpha = 0 loss equals the TARNet loss exactly") {
    Rng rng(6);
    const auto b = batch_of(rng, 16, 5);
    auto c = small();
    c.alpha = 0.0;
    auto t = CfrConfig::tarnet();
    t.rep_layers = c.rep_layers;
    t.rep_width = c.rep_width;
    t.head_layers = c.head_layers;
    t.head_width = c.head_width;
    const auto m = init_model(5, c, 6);
    CHECK(std::abs(cfr_loss(m, b, c).total - cfr_loss(m, b, t).total) <= 1e-12);
    auto with_penalty = c;
    with_penalty.alpha = 1.0;
    CHECK(cfr_loss(m, b, with_penalty).total > cfr_loss(m, b, c).total);
}

TEST_CASE("single-arm batch skips the penalty") {
    Rng rng(7);
    auto b = batch_of(rng, 6, 3);
    b.t.setOnes();
    const auto parts = cfr_loss(init_model(3, small(), 1), b, small());
    CHECK(parts.penalty_skipped);
    CHECK(parts.imbalance == 0.0);
}

TEST_CASE("analytic gradients match finite differences") {
    Rng rng(8);
    for (int rep = 0; rep < 5; ++rep) {
        const auto b = batch_of(rng, 4, 6);
        const auto m = init_model(6, CfrConfig{}, 100 + rep);
        CHECK(gradient_check(m, b, CfrConfig{}, rep, 200) < 1e-4);
    }
    const auto b = batch_of(rng, 4, 6);
    const auto m = init_model(6, small(), 3);
    CHECK(gradient_check(m, b, small(), 9) == gradient_check(m, b, small(), 9));
}

TEST_CASE("zero-loss configuration has zero gradient") {
    auto c = small();
    c.alpha = 0.0;
    c.lambda = 0.0;
    auto m = init_model(3, c, 2);
    // zero the output layers so both heads predict exactly the (zero) outcome
    for (const auto* head : {&m.head0, &m.head1}) {
        const auto& out = head->back();
        for (int k = 0; k < out.in; ++k) m.params(static_cast<Eigen::Index>(out.weights) + k) = 0.0;
        m.params(static_cast<Eigen::Index>(out.bias)) = 0.0;
    }
    Rng rng(9);
    auto b = batch_of(rng, 8, 3);
    b.y.setZero();
    VectorXd g;
    const auto parts = cfr_loss_gradient(m, b, c, g);
    CHECK(parts.total == 0.0);
    CHECK(g.cwiseAbs().maxCoeff() < 1e-12);
}

TEST_CASE("representation has unit norm") {
    Rng rng(10);
    const MatrixXd x = test::gaussian(rng, 20, 4);
    const MatrixXd phi = representation(init_model(4, CfrConfig{}, 4), x);
    CHECK(phi.cols() == 200);
    CHECK((phi.rowwise().norm().array() - 1.0).abs().maxCoeff() < 1e-12);
}

TEST_CASE("identical heads give zero effect") {
    auto m = init_model(3, small(), 5);
    const auto n0 = static_cast<Eigen::Index>(m.head1.front().weights - m.head0.front().weights);
    m.params.segment(static_cast<Eigen::Index>(m.head1.front().weights), n0) =
        m.params.segment(static_cast<Eigen::Index>(m.head0.front().weights), n0);
    Rng rng(11);
    const MatrixXd x = test::gaussian(rng, 10, 3);
    CHECK(cfr_cate(m, x).cwiseAbs().maxCoeff() == 0.0);
    const auto any = init_model(3, small(), 6);
    CHECK(cfr_ate(any, x.topRows(1), small()).value == cfr_cate(any, x.topRows(1))(0));
    CHECK(cfr_ate(any, x, small()).method == "cfr");
    CHECK(cfr_ate(any, x, CfrConfig::tarnet()).method == "tarnet");
    CHECK_THROWS_AS(cfr_ate(any, MatrixXd(0, 3), small()), FitError);
}

TEST_CASE("training is deterministic and returns the best epoch") {
    synthetic::DgpSpec spec;
    spec.n = 300;
    spec.seed = 12;
    const auto data = synthetic::generate(spec).data;
    std::vector<std::size_t> fit_rows(200), val_rows(100);
    std::iota(fit_rows.begin(), fit_rows.end(), 0);
    std::iota(val_rows.begin(), val_rows.end(), 200);
    auto c = small();
    c.max_epochs = 12;
    c.patience = 3;
    c.batch_size = 32;
    c.seed = 12;
    const auto a = cfr_train(data.subset(fit_rows), data.subset(val_rows), c);
    const auto b = cfr_train(data.subset(fit_rows), data.subset(val_rows), c);
    CHECK(a.model.params == b.model.params);
    const auto& tr = a.trace;
    CHECK(tr.stop_epoch <= c.max_epochs);
    CHECK(tr.validation.size() == static_cast<std::size_t>(tr.stop_epoch));
    REQUIRE(tr.best_epoch >= 1);
    for (int e = 0; e < tr.best_epoch; ++e) CHECK(tr.validation[static_cast<std::size_t>(tr.best_epoch - 1)] <= tr.validation[static_cast<std::size_t>(e)]);
    for (double v : tr.objective) CHECK(std::isfinite(v));
}

TEST_CASE("null effect: TARNet CATE near zero") {
    synthetic::DgpSpec spec;
    spec.kind = synthetic::DgpKind::null_effect;
    spec.seed = 13;
    const auto data = synthetic::generate(spec).data;
    std::vector<std::size_t> fit_rows(1400), val_rows(600);
    std::iota(fit_rows.begin(), fit_rows.end(), 0);
    std::iota(val_rows.begin(), val_rows.end(), 1400);
    auto c = CfrConfig::tarnet();
    c.seed = 13;
    const auto result = cfr_train(data.subset(fit_rows), data.subset(val_rows), c);
    const double sd = std::sqrt((data.y.array() - data.y.mean()).square().mean());
    CHECK(std::abs(cfr_cate(result.model, data.x).mean()) < 0.2 * sd);
}

}
