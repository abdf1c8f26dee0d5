#include <catch2/catch_amalgamated.hpp>

#include <cmath>
#include <sstream>

#include "barack/optim.hpp"

using namespace barack;

namespace {

TrainSet small_task(std::uint64_t seed, std::size_t n = 400) {
    const Dataset d = gen_spurious(n, 0.8, 1.0, 1.5, 2, seed);
    return task_trainset(d, d.group_labels, d.num_groups);
}

} // namespace

TEST_CASE("exp_gradient_update moves mass toward the lossy group") {
    GroupWeights gw{{0.25, 0.25, 0.25, 0.25}};
    const std::vector<double> losses = {0.1, 0.1, 0.1, 2.0};
    exp_gradient_update(gw, losses, 0.5);
    gw.check();
    for (int g = 0; g < 3; ++g) REQUIRE(gw.w[3] > gw.w[g]);
    REQUIRE(gw.w[0] == gw.w[1]);

    // invariant to adding a constant to every loss
    GroupWeights a{{0.4, 0.3, 0.3}}, b{{0.4, 0.3, 0.3}};
    exp_gradient_update(a, std::vector<double>{1.0, 2.0, 3.0}, 0.2);
    exp_gradient_update(b, std::vector<double>{11.0, 12.0, 13.0}, 0.2);
    for (int g = 0; g < 3; ++g) REQUIRE(a.w[g] == Catch::Approx(b.w[g]).epsilon(1e-12));

    REQUIRE_THROWS_AS(exp_gradient_update(a, std::vector<double>{1.0}, 0.2),
                      ShapeError);
}

TEST_CASE("gdro_train is deterministic for a fixed seed") {
    const TrainSet t = small_task(1);
    TrainConfig cfg;
    cfg.epochs = 3;
    const LossConfig loss;
    const TrainResult a = gdro_train(t, {ArchKind::mlp1, 8}, cfg, loss, nullptr, 7,
                                     streams::stage2);
    const TrainResult b = gdro_train(t, {ArchKind::mlp1, 8}, cfg, loss, nullptr, 7,
                                     streams::stage2);
    REQUIRE(a.params == b.params);
    REQUIRE(a.weights.w == b.weights.w);
    const TrainResult c = gdro_train(t, {ArchKind::mlp1, 8}, cfg, loss, nullptr, 8,
                                     streams::stage2);
    REQUIRE(!(a.params == c.params));
}

TEST_CASE("erm_train is bitwise the single-group trainer") {
    const TrainSet t = small_task(2);
    TrainSet flat = t;
    flat.groups.assign(flat.n, 0);
    flat.num_groups = 1;
    TrainConfig cfg;
    cfg.epochs = 2;
    cfg.sampling = Sampling::iid;
    const LossConfig loss;
    const TrainResult e = erm_train(t, {ArchKind::linear, 0}, cfg, loss, 3,
                                    streams::stage2);
    const TrainResult g = gdro_train(flat, {ArchKind::linear, 0}, cfg, loss, nullptr,
                                     3, streams::stage2);
    REQUIRE(e.params == g.params);
    REQUIRE(e.weights.w == std::vector<double>{1.0});
}

TEST_CASE("group adjustment upweights small groups from the first step") {
    // two groups with very different sizes and identical data: with C > 0 the
    // small group must carry more weight after step 1 than with C = 0
    const Dataset d = gen_spurious(600, 0.9, 1.0, 1.5, 2, 5);
    const TrainSet t = task_trainset(d, d.group_labels, d.num_groups);
    TrainConfig cfg;
    cfg.epochs = 1;
    cfg.batch_size = t.n > 64 ? 64 : static_cast<int>(t.n);
    cfg.lr = 0.0; // isolate the weight dynamics
    cfg.eta_group = 0.5;
    const LossConfig loss;

    std::vector<std::size_t> count(4, 0);
    for (int g : t.groups) ++count[g];
    const int small = static_cast<int>(
        std::min_element(count.begin(), count.end()) - count.begin());

    cfg.adjustment_C = 0.0;
    const TrainResult plain = gdro_train(t, {ArchKind::linear, 0}, cfg, loss,
                                         nullptr, 9, streams::stage2);
    cfg.adjustment_C = 20.0;
    const TrainResult adj = gdro_train(t, {ArchKind::linear, 0}, cfg, loss, nullptr,
                                       9, streams::stage2);
    REQUIRE(adj.weights.w[small] > plain.weights.w[small]);
}

TEST_CASE("trainer rejects bad inputs") {
    const TrainSet t = small_task(3);
    TrainConfig cfg;
    const LossConfig loss;
    REQUIRE_THROWS_AS(gdro_train(TrainSet{}, {ArchKind::linear, 0}, cfg, loss,
                                 nullptr, 1, streams::stage2),
                      EmptyDataset);
    cfg.epochs = 0;
    REQUIRE_THROWS_AS(
        gdro_train(t, {ArchKind::linear, 0}, cfg, loss, nullptr, 1, streams::stage2),
        ParameterError);
    cfg.epochs = 1;

    // a declared group with no rows breaks uniform-per-group sampling
    TrainSet missing = t;
    missing.num_groups = 5;
    REQUIRE_THROWS_AS(gdro_train(missing, {ArchKind::linear, 0}, cfg, loss, nullptr,
                                 1, streams::stage2),
                      EmptyGroup);

    // non-finite features must surface as an error, not train silently: the
    // softmax guard rejects the resulting NaN logits
    TrainSet poisoned = t;
    for (std::size_t i = 0; i < poisoned.n; ++i)
        poisoned.x[i * poisoned.dim] = std::numeric_limits<double>::quiet_NaN();
    REQUIRE_THROWS_AS(gdro_train(poisoned, {ArchKind::linear, 0}, cfg, loss, nullptr,
                                 1, streams::stage2),
                      DegenerateTarget);
}

TEST_CASE("uniform-per-group sampling visits every group each step") {
    const Dataset d = gen_spurious(2000, 0.99, 1.0, 1.5, 2, 11);
    const TrainSet t = task_trainset(d, d.group_labels, d.num_groups);
    TrainConfig cfg;
    cfg.epochs = 1;
    cfg.batch_size = 256;
    cfg.eval_every = 1;
    const LossConfig loss;
    const TrainResult r = gdro_train(t, {ArchKind::linear, 0}, cfg, loss, nullptr,
                                     13, streams::stage2);
    // history flushes every step; rare groups (~1% of data) still appear with
    // roughly a quarter of each 256-row batch
    std::vector<long> seen(4, 0);
    for (const auto& row : r.history.rows) ++seen[row.group];
    const long steps = r.history.rows.size() / 4;
    for (int g = 0; g < 4; ++g) REQUIRE(seen[g] == steps);
}

TEST_CASE("evaluate computes exact per-group means and handles absent groups") {
    TrainSet t;
    t.n = 3;
    t.dim = 1;
    t.x = {0.0, 0.0, 0.0};
    t.targets = {0, 1, 1};
    t.groups = {0, 0, 2};
    t.arity = 2;
    t.num_groups = 4;
    ModelParams p = zeros_like(ArchKind::linear, 1, 2, 0);
    // uniform predictor: probs = (0.5, 0.5), argmax -> class 0
    const LossConfig loss;
    const MetricsReport rep = evaluate(p, t, loss);
    REQUIRE(rep.group_present == std::vector<bool>{true, false, true, false});
    REQUIRE(rep.per_group_acc[0] == Catch::Approx(0.5));
    REQUIRE(rep.per_group_acc[2] == 0.0);
    REQUIRE(rep.per_group_loss[0] == Catch::Approx(std::log(2.0)));
    REQUIRE(rep.worst_group_acc == 0.0);
    REQUIRE(rep.worst_group_loss == Catch::Approx(std::log(2.0)));
    REQUIRE(rep.avg_acc == Catch::Approx(1.0 / 3));

    const std::vector<double> props = {0.7, 0.1, 0.1, 0.1};
    const MetricsReport rw = evaluate(p, t, loss, nullptr, props);
    REQUIRE(rw.reweighted_avg_acc == Catch::Approx((0.7 * 0.5 + 0.1 * 0.0) / 0.8));
    REQUIRE_THROWS_AS(evaluate(p, t, loss, nullptr, std::vector<double>{1.0}),
                      ShapeError);
}

TEST_CASE("training reduces worst-group loss on an easy separable task") {
    const Dataset d = gen_spurious(2000, 0.5, 2.0, 0.5, 2, 21);
    const TrainSet t = task_trainset(d, d.group_labels, d.num_groups);
    TrainConfig cfg;
    cfg.epochs = 10;
    const LossConfig loss;
    const TrainResult r = gdro_train(t, {ArchKind::linear, 0}, cfg, loss, nullptr,
                                     23, streams::stage2);
    const MetricsReport before =
        evaluate(zeros_like(ArchKind::linear, static_cast<int>(t.dim), t.arity, 0), t, loss);
    const MetricsReport after = evaluate(r.params, t, loss);
    REQUIRE(after.worst_group_loss < 0.5 * before.worst_group_loss);
    REQUIRE(after.worst_group_acc > 0.9);
}

TEST_CASE("eval hook fires at step zero, every eval_every, and the last step") {
    const TrainSet t = small_task(4, 200);
    TrainConfig cfg;
    cfg.epochs = 1;
    cfg.batch_size = 50; // 4 steps
    cfg.eval_every = 3;
    const LossConfig loss;
    std::vector<long> steps;
    gdro_train(t, {ArchKind::linear, 0}, cfg, loss, nullptr, 1, streams::stage2,
               [&](long s, const ModelParams&) { steps.push_back(s); });
    REQUIRE(steps == std::vector<long>{0, 3, 4});
}

TEST_CASE("history CSV has the documented layout") {
    History h;
    h.rows.push_back({50, "train", 2, 0.25, 0.75, 0.5});
    std::stringstream ss;
    h.write_csv(ss);
    std::string line;
    std::getline(ss, line);
    REQUIRE(line == "step,split,group,loss,acc,w_g");
    std::getline(ss, line);
    REQUIRE(line == "50,train,2,0.25,0.75,0.5");
}
