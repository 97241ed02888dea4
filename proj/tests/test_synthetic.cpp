#include <doctest.h>

#include <cmath>

#include "tte/error.hpp"
#include "tte/linprop.hpp"
#include "tte/synthetic.hpp"

using namespace tte;
using namespace tte::synthetic;
using Eigen::VectorXd;

namespace {

Dataset four_rows() {
    Dataset d;
    d.x = Eigen::MatrixXd::Zero(4, 1);
    d.t = VectorXd::Zero(4);
    d.y1 = VectorXd(4);
    d.y0 = VectorXd(4);
    *d.y1 << 3, 5, 10, -1;
    *d.y0 << 1, 1, 4, -1;
    d.y = *d.y0;
    return d;
}

}  // namespace

TEST_SUITE("synthetic") {

TEST_CASE("noiseless constant effect") {
    DgpSpec spec;
    spec.sigma = 0.0;
    spec.gamma = 0.0;
    spec.n = 500;
    const auto table = generate(spec, 1);
    const VectorXd effect = *table.data.y1 - *table.data.y0;
    CHECK((effect.array() == 10.0).all());
    CHECK(true_ate(table.data) == 10.0);
}

TEST_CASE("consistency and positivity on every row") {
    for (auto kind : {DgpKind::linear_confounded, DgpKind::nonlinear, DgpKind::null_effect}) {
        DgpSpec spec;
        spec.kind = kind;
        spec.gamma = 3.0;
        const auto table = generate(spec, 2);
        const auto& d = table.data;
        for (Eigen::Index i = 0; i < d.rows(); ++i) CHECK(d.y(i) == (d.t(i) > 0.5 ? (*d.y1)(i) : (*d.y0)(i)));
        CHECK(table.e_true.minCoeff() >= 0.05);
        CHECK(table.e_true.maxCoeff() <= 0.95);
        const double u = d.t.mean();
        CHECK(u > 0.0);
        CHECK(u < 1.0);
    }
}

TEST_CASE("no confounding gives a balanced assignment") {
    DgpSpec spec;
    spec.gamma = 0.0;
    spec.n = 10000;
    CHECK(std::abs(generate(spec, 3).data.t.mean() - 0.5) < 0.02);
}

TEST_CASE("null effect has zero truth") {
    DgpSpec spec;
    spec.kind = DgpKind::null_effect;
    CHECK(true_ate(generate(spec, 4).data) == 0.0);
}

TEST_CASE("generation is deterministic in the seed") {
    DgpSpec spec;
    spec.kind = DgpKind::nonlinear;
    const auto a = generate(spec, 5), b = generate(spec, 5), c = generate(spec, 6);
    CHECK(a.data.x == b.data.x);
    CHECK(a.data.y == b.data.y);
    CHECK(a.data.t == b.data.t);
    CHECK(a.data.y != c.data.y);
    spec.seed = 5;
    CHECK(generate(spec).data.y == a.data.y);
}

TEST_CASE("heterogeneous truth by hand") {
    const auto d = four_rows();
    CHECK(true_ate(d) == doctest::Approx((2.0 + 4.0 + 6.0 + 0.0) / 4.0));
    DgpSpec spec;
    spec.effect_slope = 2.0;
    spec.sigma = 0.0;
    const auto t = generate(spec, 7);
    const VectorXd effect = *t.data.y1 - *t.data.y0;
    CHECK((effect - (10.0 + 2.0 * t.data.x.col(0).array()).matrix()).cwiseAbs().maxCoeff() < 1e-12);
}

TEST_CASE("effect errors") {
    const auto d = four_rows();
    CHECK(epsilon_ate(3.0, d) == 0.0);
    DgpSpec spec;
    spec.sigma = 0.0;
    const auto c = generate(spec, 8).data;
    CHECK(epsilon_ate(9.5, c) == doctest::Approx(0.5));
    CHECK(epsilon_ate(10.0 + 0.7, c) == epsilon_ate(10.0 - 0.7, c));
    VectorXd exact = *d.y1 - *d.y0;
    CHECK(epsilon_cate(exact, d) == 0.0);
    CHECK(epsilon_cate(VectorXd::Constant(c.rows(), 11.0), c) == doctest::Approx(1.0));
    VectorXd guess(4);
    guess << 1, 4, 9, 1;
    // errors -1, 0, 3, 1 -> (1 + 0 + 9 + 1) / 4
    CHECK(epsilon_cate(guess, d) == doctest::Approx(11.0 / 4.0));
    CHECK_THROWS_AS(epsilon_cate(VectorXd::Zero(3), d), Error);
}

TEST_CASE("treatment is ignorable given x") {
    DgpSpec spec;
    spec.n = 20000;
    const auto d = generate(spec, 9).data;
    // y0 minus its linear signal is pure noise; regress it on t and x
    const auto fit = linprop::fit_ols(d.x, d.t, *d.y0);
    CHECK(std::abs(fit.treatment) < 0.05);
}

TEST_CASE("spec validation") {
    DgpSpec spec;
    spec.n = 0;
    CHECK_THROWS_AS(spec.validate(), ConfigError);
    spec = {};
    spec.sigma = -1.0;
    CHECK_THROWS_AS(spec.validate(), ConfigError);
    CHECK(dgp_kind_from_string("nonlinear") == DgpKind::nonlinear);
    CHECK_THROWS_AS(dgp_kind_from_string("quadratic"), ConfigError);
}

TEST_CASE("cohort conversion keeps the truth") {
    DgpSpec spec;
    spec.n = 50;
    const auto table = generate(spec, 10);
    const auto c = to_cohort(table);
    REQUIRE(c.size() == 50);
    CHECK(c.provenance.synthetic == 50);
    const auto& o = c.observations[3];
    REQUIRE(o.truth);
    CHECK(o.truth->y1 == (*table.data.y1)(3));
    CHECK(o.truth->e_true == table.e_true(3));
    CHECK(*o.y_early == table.data.y(3));
}

}
