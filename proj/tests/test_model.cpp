#include <catch2/catch_amalgamated.hpp>

#include <cmath>

#include "barack/model.hpp"

using namespace barack;

namespace {

GradBatch random_batch(Rng& rng, int n, int dim, int K, bool with_cond,
                       const ClassConditioning* cond) {
    GradBatch b;
    for (int i = 0; i < n; ++i) {
        for (int j = 0; j < dim; ++j) b.x.push_back(rng.normal());
        b.weight.push_back(0.25 + rng.uniform01());
        if (with_cond) {
            // pick a class, then a target group valid under the mask
            const int y = static_cast<int>(rng.uniform_int(cond->num_classes));
            std::vector<int> valid;
            for (int g = 0; g < cond->num_groups; ++g)
                if (cond->at(y, g) != kNegInf) valid.push_back(g);
            b.cond_y.push_back(y);
            b.target.push_back(valid[rng.uniform_int(valid.size())]);
        } else {
            b.target.push_back(static_cast<int>(rng.uniform_int(K)));
        }
    }
    return b;
}

double batch_loss(const ModelParams& p, const LossConfig& loss, const GradBatch& b,
                  const ClassConditioning* cond) {
    double total = 0.0;
    const int dim = p.input_dim;
    for (std::size_t i = 0; i < b.size(); ++i) {
        std::span<const double> xi(b.x.data() + i * dim, dim);
        const auto probs =
            forward(p, xi, cond, cond != nullptr ? b.cond_y[i] : -1);
        total += b.weight[i] * loss_value(loss, probs, b.target[i]);
    }
    return total;
}

/// Central finite differences over every parameter; returns the worst
/// relative error against the analytic gradient.
double fd_check(const ModelParams& p, const LossConfig& loss, const GradBatch& b,
                const ClassConditioning* cond) {
    const GradResult an = grad(p, loss, b, cond);
    const double h = 1e-5;
    double worst = 0.0;
    auto sweep = [&](std::vector<double> ModelParams::* field) {
        const auto& analytic = an.grad.*field;
        for (std::size_t i = 0; i < (p.*field).size(); ++i) {
            ModelParams q = p;
            (q.*field)[i] += h;
            const double up = batch_loss(q, loss, b, cond);
            (q.*field)[i] -= 2 * h;
            const double dn = batch_loss(q, loss, b, cond);
            const double fd = (up - dn) / (2 * h);
            const double err = std::abs(fd - analytic[i]) /
                               std::max(1.0, std::abs(analytic[i]));
            worst = std::max(worst, err);
        }
    };
    sweep(&ModelParams::w1);
    sweep(&ModelParams::b1);
    sweep(&ModelParams::w2);
    sweep(&ModelParams::b2);
    return worst;
}

} // namespace

TEST_CASE("init_params shapes and scale") {
    Rng rng(1, streams::stage1);
    const ModelParams lin = init_params({ArchKind::linear, 0}, 6, 3, rng);
    REQUIRE(lin.w2.size() == 18);
    REQUIRE(lin.w1.empty());
    for (double b : lin.b2) REQUIRE(b == 0.0);

    const ModelParams mlp = init_params({ArchKind::mlp1, 16}, 6, 3, rng);
    REQUIRE(mlp.w1.size() == 96);
    REQUIRE(mlp.w2.size() == 48);
    double sq = 0.0;
    for (double v : mlp.w1) sq += v * v;
    // variance 1/6 per entry, 96 entries
    REQUIRE(std::abs(sq / 96 - 1.0 / 6) < 3.0 * (1.0 / 6) * std::sqrt(2.0 / 96));
}

TEST_CASE("forward produces a probability vector") {
    Rng rng(2, streams::stage1);
    const ModelParams p = init_params({ArchKind::mlp1, 8}, 4, 5, rng);
    const std::vector<double> x = {0.5, -1.0, 2.0, 0.1};
    const auto probs = forward(p, x);
    REQUIRE(probs.size() == 5);
    double total = 0.0;
    for (double v : probs) {
        REQUIRE(v > 0.0);
        total += v;
    }
    REQUIRE(total == Catch::Approx(1.0));
    REQUIRE_THROWS_AS(forward(p, std::vector<double>{1.0}), ShapeError);
}

TEST_CASE("fit_conditioning matches empirical frequencies") {
    // 9 rows in group 0, 1 row in group 1, both class 0; class 1 has group 2
    std::vector<int> y(10, 0), z;
    for (int i = 0; i < 9; ++i) z.push_back(0);
    z.push_back(1);
    y.push_back(1);
    z.push_back(2);
    const std::vector<int> class_of_group = {0, 0, 1};
    const ClassConditioning cond = fit_conditioning(y, z, class_of_group, 2);
    REQUIRE(cond.at(0, 0) == Catch::Approx(std::log(0.9)));
    REQUIRE(cond.at(0, 1) == Catch::Approx(std::log(0.1)));
    REQUIRE(cond.at(0, 2) == kNegInf);
    REQUIRE(cond.at(1, 2) == Catch::Approx(0.0));
    REQUIRE(cond.at(1, 0) == kNegInf);
}

TEST_CASE("fit_conditioning smooths only when an in-class group is empty") {
    // class 0: groups 0,1 with counts 3,0 -> add-one smoothing (4/5, 1/5)
    const std::vector<int> y = {0, 0, 0};
    const std::vector<int> z = {0, 0, 0};
    const std::vector<int> class_of_group = {0, 0, 1};
    const ClassConditioning cond = fit_conditioning(y, z, class_of_group, 2);
    REQUIRE(cond.at(0, 0) == Catch::Approx(std::log(4.0 / 5)));
    REQUIRE(cond.at(0, 1) == Catch::Approx(std::log(1.0 / 5)));
    // class 1 has no rows: uniform over its single group
    REQUIRE(cond.at(1, 2) == Catch::Approx(0.0));
}

TEST_CASE("conditioning masks out-of-class groups exactly") {
    Rng rng(3, streams::stage1);
    const ModelParams p = init_params({ArchKind::linear, 0}, 3, 4, rng);
    const std::vector<int> class_of_group = {0, 0, 1, 1};
    const std::vector<int> y = {0, 0, 1, 1}, z = {0, 1, 2, 3};
    const ClassConditioning cond = fit_conditioning(y, z, class_of_group, 2);
    const std::vector<double> x = {0.3, -0.2, 1.1};
    const auto probs = forward(p, x, &cond, 0);
    REQUIRE(probs[2] == 0.0);
    REQUIRE(probs[3] == 0.0);
    REQUIRE(probs[0] + probs[1] == Catch::Approx(1.0));

    // identical to manually shifting the raw logits by the prior
    const auto raw = forward(p, x);
    const double l0 = std::log(raw[0]) + cond.at(0, 0);
    const double l1 = std::log(raw[1]) + cond.at(0, 1);
    REQUIRE(probs[0] == Catch::Approx(std::exp(l0) / (std::exp(l0) + std::exp(l1))));
}

TEST_CASE("analytic gradients match finite differences") {
    Rng rng(4, streams::stage1);
    const LossConfig ce, sq{LossKind::squared, 30.0};
    const std::vector<int> class_of_group = {0, 0, 1, 1};
    const std::vector<int> yy = {0, 0, 0, 1, 1}, zz = {0, 0, 1, 2, 3};
    const ClassConditioning cond = fit_conditioning(yy, zz, class_of_group, 2);

    for (int trial = 0; trial < 30; ++trial) {
        const bool mlp = trial % 2 == 0;
        const bool use_sq = trial % 3 == 0;
        const bool with_cond = trial % 5 < 2;
        const int K = with_cond ? 4 : 3;
        const int dim = 4;
        const ArchSpec arch{mlp ? ArchKind::mlp1 : ArchKind::linear, 6};
        const ModelParams p = init_params(arch, dim, K, rng);
        const GradBatch b =
            random_batch(rng, 5, dim, K, with_cond, with_cond ? &cond : nullptr);
        const double err = fd_check(p, use_sq ? sq : ce, b,
                                    with_cond ? &cond : nullptr);
        INFO("trial " << trial);
        REQUIRE(err < 1e-5);
    }
}

TEST_CASE("zero-weight rows contribute nothing") {
    Rng rng(5, streams::stage1);
    const LossConfig ce;
    const ModelParams p = init_params({ArchKind::mlp1, 4}, 3, 3, rng);
    GradBatch b = random_batch(rng, 4, 3, 3, false, nullptr);
    GradBatch trimmed = b;
    trimmed.x.resize(3 * 3);
    trimmed.target.resize(3);
    trimmed.weight.resize(3);
    b.weight[3] = 0.0;
    const GradResult full = grad(p, ce, b);
    const GradResult part = grad(p, ce, trimmed);
    REQUIRE(full.grad == part.grad);
}

TEST_CASE("grad input validation") {
    Rng rng(6, streams::stage1);
    const LossConfig ce;
    const ModelParams p = init_params({ArchKind::linear, 0}, 2, 3, rng);
    GradBatch b;
    b.x = {0.1, 0.2};
    b.target = {1};
    b.weight = {-1.0};
    REQUIRE_THROWS_AS(grad(p, ce, b), ParameterError);
    b.weight = {1.0};
    b.target = {5};
    REQUIRE_THROWS_AS(grad(p, ce, b), LabelRange);

    const std::vector<int> class_of_group = {0, 0, 1};
    const std::vector<int> y = {0, 1}, z = {0, 2};
    const ClassConditioning cond = fit_conditioning(y, z, class_of_group, 2);
    const ModelParams p3 = init_params({ArchKind::linear, 0}, 2, 3, rng);
    b.target = {2};
    b.cond_y = {0}; // group 2 belongs to class 1, masked under class 0
    REQUIRE_THROWS_AS(grad(p3, ce, b, &cond), DegenerateTarget);
}

TEST_CASE("argmax breaks ties toward the lowest index") {
    REQUIRE(argmax(std::vector<double>{0.3, 0.4, 0.4}) == 1);
    REQUIRE(argmax(std::vector<double>{0.5, 0.5}) == 0);
    REQUIRE(argmax(std::vector<double>{1.0}) == 0);
}

TEST_CASE("checkpoint round trip is exact") {
    Rng rng(7, streams::stage1);
    const ModelParams p = init_params({ArchKind::mlp1, 5}, 3, 4, rng);
    std::stringstream ss;
    save_params(p, ss);
    const ModelParams r = load_params(ss);
    REQUIRE(r == p);
    std::stringstream bad("nonsense");
    REQUIRE_THROWS_AS(load_params(bad), SchemaError);
}
