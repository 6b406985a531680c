#include <catch2/catch.hpp>

#include <Eigen/Dense>
#include <cmath>

#include "cdopt/engine.hpp"
#include "cdopt/graph.hpp"
#include "cdopt/problem.hpp"

using namespace cdopt;
using Eigen::MatrixXd;
using Eigen::VectorXd;

namespace {

bool bitwise_equal(const VectorXd& a, const VectorXd& b) {
    return a.size() == b.size() && (a.array() == b.array()).all();
}

DlecProblem scalar_chain_problem() {
    // n=2, d=q=1, f_i = x^2/2, A_i = [1], b_i = 0; optimum at 0
    DlecProblem p;
    p.n = 2;
    p.d = 1;
    p.q = 1;
    p.mu = 2.0;
    for (int i = 0; i < 2; ++i) {
        QuadraticObjective f;
        f.Q = MatrixXd::Identity(1, 1);
        f.c = VectorXd::Zero(1);
        p.objectives.push_back(f);
        p.A.push_back(MatrixXd::Identity(1, 1));
        p.b.push_back(VectorXd::Zero(1));
    }
    p.witness = VectorXd::Zero(1);
    return p;
}

StepSizes stable_steps_de(const DlecProblem& p, const SpectralData& sd, double eta) {
    auto bound = baseline_stability(baseline_transition_de(p, sd.laplacian, eta));
    REQUIRE(bound.kappa_max > 0.0);
    return StepSizes{bound.kappa_max / 8.0, 0.5, eta};
}

StepSizes stable_steps_ce(const ClecProblem& p, const SpectralData& sd, double eta) {
    auto bound = baseline_stability(baseline_transition_ce(p, sd.laplacian, eta));
    REQUIRE(bound.kappa_max > 0.0);
    return StepSizes{bound.kappa_max / 8.0, 0.5, eta};
}

}  // namespace

TEST_CASE("initialization modes") {
    auto p = generate_dlec(3, 4, 3, 2, 1.0);
    auto g = build_graph({GraphKind::ring, 4});
    CompressorSpec comp;  // identity
    StepSizes s{0.02, 0.5, 0.5};

    SECTION("zeros is the default and zeroes everything") {
        auto eng = init_de(p, g, comp, s, InitSpec{}, 1);
        for (const auto& a : eng.agents) {
            CHECK(a.x.norm() == 0.0);
            CHECK(a.nu.norm() == 0.0);
            CHECK(a.lambda.norm() == 0.0);
            CHECK(a.sigma_x.norm() == 0.0);
            CHECK(a.sigma_lambda.norm() == 0.0);
            for (const auto& link : a.links) CHECK(link.mirror_sigma_x.norm() == 0.0);
        }
    }
    SECTION("gaussian randomizes states but keeps filters at zero") {
        auto eng = init_de(p, g, comp, s, InitSpec{InitMode::gaussian, 1.0}, 1);
        CHECK(eng.agents[0].x.norm() > 0.0);
        CHECK(eng.agents[0].sigma_x.norm() == 0.0);
    }
    SECTION("certificate init copies the certificate blocks") {
        auto lap = laplacian(g);
        auto cert = kkt_oracle_dlec(p, lap, s.eta);
        auto eng = init_de(p, g, comp, s, InitSpec{InitMode::certificate}, 1, &cert);
        for (int i = 0; i < p.n; ++i) {
            CHECK(bitwise_equal(eng.agents[i].x, cert.x_star));
            CHECK(bitwise_equal(eng.agents[i].sigma_lambda,
                                cert.lambda_star.segment(i * p.d, p.d)));
        }
    }
    SECTION("certificate of the wrong shape is rejected") {
        auto other = generate_dlec(3, 4, 2, 1, 1.0);
        auto cert = kkt_oracle_dlec(other, laplacian(g), s.eta);
        CHECK_THROWS_AS(init_de(p, g, comp, s, InitSpec{InitMode::certificate}, 1, &cert),
                        InvalidSpec);
    }
    SECTION("compressor failing its contract is rejected") {
        CompressorSpec bad;
        bad.kind = CompressorKind::scaled_identity;
        bad.factor = 2.0;
        bad.kappa0 = 2.0;
        CHECK_THROWS_AS(init_de(p, g, bad, s, InitSpec{}, 1), CompressorRejected);
    }
}

TEST_CASE("one step from zero on the scalar chain stays at the optimum") {
    auto p = scalar_chain_problem();
    auto g = build_graph({GraphKind::ring, 2});
    CompressorSpec comp;
    StepSizes s{0.1, 0.5, 1.0};
    auto eng = init_de(p, g, comp, s, InitSpec{}, 1);
    eng.step();
    for (const auto& a : eng.agents) {
        CHECK(a.x.norm() == 0.0);
        CHECK(a.nu.norm() == 0.0);
        CHECK(a.lambda.norm() == 0.0);
    }
}

TEST_CASE("certificate initialization is a fixed point for every compressor") {
    auto pd = generate_dlec(21, 5, 3, 2, 1.0);
    auto pc = generate_clec(22, 5, 3, 2, 1.0);
    GraphSpec gs{GraphKind::erdos_renyi, 5};
    gs.p = 0.7;
    gs.seed = 40;
    auto g = build_graph(gs);
    auto sd = spectral(g);
    auto sde = stable_steps_de(pd, sd, 0.5);
    auto sce = stable_steps_ce(pc, sd, 0.5);
    auto cd = kkt_oracle_dlec(pd, sd.laplacian, sde.eta);
    auto cc = kkt_oracle_clec(pc, sd.laplacian, sce.eta);

    for (auto comp : builtin_compressors()) {
        INFO("compressor " << to_string(comp.kind));
        auto ed = init_de(pd, g, comp, sde, InitSpec{InitMode::certificate}, 9, &cd);
        auto ec = init_ce(pc, g, comp, sce, InitSpec{InitMode::certificate}, 9, &cc);
        double worst_de = 0.0, worst_ce = 0.0;
        for (int k = 0; k < 100; ++k) {
            ed.step();
            ec.step();
            worst_de = std::max(worst_de, residual_sq(ed.stacked_x(), cd.x_star));
            worst_ce = std::max(worst_ce, residual_sq(ec.stacked_x(), cc.x_star));
        }
        CHECK(worst_de <= 1e-10);
        CHECK(worst_ce <= 1e-10);
    }
}

TEST_CASE("identity compression reproduces the uncompressed baselines") {
    GraphSpec gs{GraphKind::erdos_renyi, 5};
    gs.p = 0.6;
    gs.seed = 12;
    auto g = build_graph(gs);
    auto sd = spectral(g);
    CompressorSpec comp;  // identity

    SECTION("per-agent constraints") {
        auto p = generate_dlec(77, 5, 3, 2, 1.0);
        auto s = stable_steps_de(p, sd, 0.5);
        auto eng = init_de(p, g, comp, s, InitSpec{}, 5);
        auto base = baseline_de(p, g, s);
        for (int k = 0; k < 1000; ++k) {
            eng.step();
            base.step();
            CHECK((eng.stacked_x() - base.x).lpNorm<Eigen::Infinity>() <= 1e-12);
            CHECK((eng.stacked_lambda() - base.lambda).lpNorm<Eigen::Infinity>() <= 1e-12);
            CHECK((eng.stacked_nu() - base.nu).lpNorm<Eigen::Infinity>() <= 1e-12);
        }
    }
    SECTION("coupled constraints") {
        auto p = generate_clec(78, 5, 3, 2, 1.0);
        auto s = stable_steps_ce(p, sd, 0.5);
        auto eng = init_ce(p, g, comp, s, InitSpec{}, 5);
        auto base = baseline_ce(p, g, s);
        for (int k = 0; k < 1000; ++k) {
            eng.step();
            base.step();
            CHECK((eng.stacked_x() - base.x).lpNorm<Eigen::Infinity>() <= 1e-12);
            CHECK((eng.stacked_z() - base.z).lpNorm<Eigen::Infinity>() <= 1e-12);
        }
    }
}

TEST_CASE("an agent's round reads only its neighborhood") {
    auto p = generate_dlec(31, 6, 2, 1, 1.0);
    auto g = build_graph({GraphKind::ring, 6});
    auto sd = spectral(g);
    CompressorSpec comp;
    comp.kind = CompressorKind::top_k;
    comp.k = 1;
    auto s = stable_steps_de(p, sd, 0.5);

    auto eng_a = init_de(p, g, comp, s, InitSpec{InitMode::gaussian, 1.0}, 3);
    auto eng_b = eng_a;
    // agent 3 is not a ring neighbor of agent 0 or 1
    eng_b.agents[3].x.array() += 5.0;
    eng_a.step();
    eng_b.step();
    for (int i : {0, 1, 5}) {
        CHECK(bitwise_equal(eng_a.agents[i].x, eng_b.agents[i].x));
        CHECK(bitwise_equal(eng_a.agents[i].nu, eng_b.agents[i].nu));
        CHECK(bitwise_equal(eng_a.agents[i].lambda, eng_b.agents[i].lambda));
    }
    // the perturbed agent's neighbors do differ
    CHECK_FALSE(bitwise_equal(eng_a.agents[2].x, eng_b.agents[2].x));
}

TEST_CASE("neighbor filter mirrors track the owners exactly") {
    auto p = generate_clec(41, 5, 3, 2, 1.0);
    GraphSpec gs{GraphKind::erdos_renyi, 5};
    gs.p = 0.8;
    gs.seed = 2;
    auto g = build_graph(gs);
    auto sd = spectral(g);
    CompressorSpec comp;
    comp.kind = CompressorKind::top_k;
    comp.k = 1;
    auto s = stable_steps_ce(p, sd, 0.5);
    auto eng = init_ce(p, g, comp, s, InitSpec{InitMode::gaussian, 1.0}, 8);
    for (int k = 0; k < 50; ++k) {
        eng.step();
        for (const auto& a : eng.agents) {
            for (const auto& link : a.links) {
                CHECK(bitwise_equal(link.mirror_sigma_x, eng.agents[link.j].sigma_x));
                CHECK(bitwise_equal(link.mirror_sigma_lambda, eng.agents[link.j].sigma_lambda));
                CHECK(bitwise_equal(link.mirror_sigma_z, eng.agents[link.j].sigma_z));
                CHECK(bitwise_equal(link.mirror_sigma_nu, eng.agents[link.j].sigma_nu));
            }
        }
    }
}

TEST_CASE("conserved sums stay put over long runs") {
    GraphSpec gs{GraphKind::erdos_renyi, 5};
    gs.p = 0.6;
    gs.seed = 31;
    auto g = build_graph(gs);
    auto sd = spectral(g);
    CompressorSpec comp;
    comp.kind = CompressorKind::scalarized;

    SECTION("sum of lambda in the per-agent engine") {
        auto p = generate_dlec(55, 5, 3, 2, 1.0);
        auto s = stable_steps_de(p, sd, 0.5);
        auto eng = init_de(p, g, comp, s, InitSpec{InitMode::gaussian, 1.0}, 4);
        RunOptions opts;
        opts.max_iters = 10000;
        opts.record_every = 10;
        auto trace = run(eng, opts);
        auto cons = conservation_check(trace);
        CHECK(cons.max_lambda_drift <= 1e-9);
    }
    SECTION("sum of z in the coupled engine") {
        auto p = generate_clec(56, 5, 3, 2, 1.0);
        auto s = stable_steps_ce(p, sd, 0.5);
        auto eng = init_ce(p, g, comp, s, InitSpec{InitMode::gaussian, 1.0}, 4);
        RunOptions opts;
        opts.max_iters = 10000;
        opts.record_every = 10;
        auto trace = run(eng, opts);
        auto cons = conservation_check(trace);
        CHECK(cons.has_z);
        CHECK(cons.max_z_drift <= 1e-9);
        CHECK(cons.max_lambda_drift <= 1e-9);
    }
}

TEST_CASE("run guards and stop rules") {
    auto p = generate_dlec(61, 4, 2, 1, 1.0);
    auto g = build_graph({GraphKind::ring, 4});
    auto sd = spectral(g);
    CompressorSpec comp;

    SECTION("max_iters must be positive") {
        auto s = stable_steps_de(p, sd, 0.5);
        auto eng = init_de(p, g, comp, s, InitSpec{}, 2);
        RunOptions opts;
        opts.max_iters = 0;
        CHECK_THROWS_AS(run(eng, opts), InvalidSpec);
    }
    SECTION("a target residual needs a certificate") {
        auto s = stable_steps_de(p, sd, 0.5);
        auto eng = init_de(p, g, comp, s, InitSpec{}, 2);
        RunOptions opts;
        opts.max_iters = 10;
        opts.target_residual = 1e-8;
        CHECK_THROWS_AS(run(eng, opts), InvalidSpec);
    }
    SECTION("oversized steps diverge with the round recorded and a partial trace") {
        StepSizes s{1000.0, 0.5, 1.0};
        auto eng = init_de(p, g, comp, s, InitSpec{InitMode::gaussian, 1.0}, 2);
        RunOptions opts;
        opts.max_iters = 500;
        try {
            run(eng, opts);
            FAIL("expected divergence");
        } catch (const EngineDiverged& e) {
            CHECK(e.round >= 0);
            CHECK(e.partial.rows.size() >= 1);
        }
    }
    SECTION("certificate-initialized runs hold the residual at numerical zero") {
        auto s = stable_steps_de(p, sd, 0.5);
        auto cert = kkt_oracle_dlec(p, sd.laplacian, s.eta);
        auto eng = init_de(p, g, comp, s, InitSpec{InitMode::certificate}, 2, &cert);
        RunOptions opts;
        opts.max_iters = 100;
        RecordContext ctx{&sd, &cert};
        auto trace = run(eng, opts, ctx);
        for (const auto& row : trace.rows) {
            REQUIRE(row.residual_sq.has_value());
            CHECK(*row.residual_sq <= 1e-20);
        }
    }
}

TEST_CASE("compressed-sum identity matches the tight-form rewrite") {
    // L x_c equals L x - L (x - x_c): the two published forms of the update
    auto g = build_graph({GraphKind::star, 5});
    auto lap = laplacian(g);
    Xoshiro256ss rng(17);
    for (int trial = 0; trial < 20; ++trial) {
        VectorXd x(5 * 3), xc(5 * 3);
        for (int i = 0; i < x.size(); ++i) {
            x(i) = rng.normal();
            xc(i) = rng.normal();
        }
        VectorXd direct = laplacian_kron_apply(lap, xc, 3);
        VectorXd rewritten = laplacian_kron_apply(lap, x, 3) -
                             laplacian_kron_apply(lap, (x - xc).eval(), 3);
        CHECK((direct - rewritten).lpNorm<Eigen::Infinity>() <= 1e-12);
    }
}

TEST_CASE("stochastic runs are reproducible bit-for-bit") {
    auto p = generate_dlec(81, 4, 3, 2, 1.0);
    auto g = build_graph({GraphKind::ring, 4});
    auto sd = spectral(g);
    CompressorSpec comp;
    comp.kind = CompressorKind::stochastic_quantizer;
    comp.seed = 5;
    auto s = stable_steps_de(p, sd, 0.5);

    auto run_once = [&]() {
        auto eng = init_de(p, g, comp, s, InitSpec{}, 123);
        RunOptions opts;
        opts.max_iters = 400;
        opts.record_every = 7;
        return run(eng, opts);
    };
    auto t1 = run_once();
    auto t2 = run_once();
    REQUIRE(t1.rows.size() == t2.rows.size());
    for (std::size_t i = 0; i < t1.rows.size(); ++i) {
        CHECK(t1.rows[i].k == t2.rows[i].k);
        CHECK(*t1.rows[i].feas_norm == *t2.rows[i].feas_norm);
        CHECK(t1.rows[i].comm_entries_cum == t2.rows[i].comm_entries_cum);
    }
}

TEST_CASE("tune_steps behaviors") {
    SECTION("a trivially easy instance accepts the first candidate") {
        DlecProblem p;
        p.n = 4;
        p.d = 2;
        p.q = 1;
        p.mu = 4.0;
        for (int i = 0; i < p.n; ++i) {
            QuadraticObjective f;
            f.Q = MatrixXd::Identity(2, 2);
            f.c = VectorXd::Zero(2);
            p.objectives.push_back(f);
            p.A.push_back(MatrixXd::Zero(1, 2));
            p.b.push_back(VectorXd::Zero(1));
        }
        p.witness = VectorXd::Zero(2);
        auto g = build_graph({GraphKind::ring, 4});
        auto sd = spectral(g);
        CompressorSpec comp;
        auto s = tune_steps(p, g, sd, comp, 17);
        // first candidate: eta = 1, kappa = min(formula, kappa_max / 8)
        const double formula = 1.0 / (sd.lambda_max() + 1.0);
        const double cap =
            baseline_stability(baseline_transition_de(p, sd.laplacian, 1.0)).kappa_max / 8.0;
        CHECK(s.eta == 1.0);
        CHECK(s.kappa == Approx(std::min(formula, cap)).margin(1e-15));
    }
    SECTION("returned kappa scales below 1/lambda_max") {
        CompressorSpec comp;
        auto p1 = generate_dlec(91, 12, 2, 1, 1.0);
        auto g1 = build_graph({GraphKind::ring, 12});
        auto sd1 = spectral(g1);
        auto s1 = tune_steps(p1, g1, sd1, comp, 17);
        CHECK(s1.kappa <= 1.0 / sd1.lambda_max());

        auto p2 = generate_dlec(91, 12, 2, 1, 1.0);
        auto g2 = build_graph({GraphKind::complete, 12});
        auto sd2 = spectral(g2);
        auto s2 = tune_steps(p2, g2, sd2, comp, 17);
        CHECK(s2.kappa <= 1.0 / sd2.lambda_max());
        CHECK(sd2.lambda_max() > sd1.lambda_max());
        CHECK(s2.kappa < s1.kappa);
    }
    SECTION("budget must be positive") {
        auto p = generate_dlec(61, 4, 2, 1, 1.0);
        auto g = build_graph({GraphKind::ring, 4});
        auto sd = spectral(g);
        CompressorSpec comp;
        CHECK_THROWS_AS(tune_steps(p, g, sd, comp, 17, 0), InvalidSpec);
    }
}
