#include <catch2/catch_amalgamated.hpp>

#include <set>
#include <sstream>

#include "barack/pipeline.hpp"

using namespace barack;

namespace {

struct Fixture {
    Dataset train, val;
    LabelMask mask;
    BarackConfig cfg;
    LossConfig loss;
};

Fixture spurious_fixture(int budget = 16, std::uint64_t seed = 1) {
    Fixture f;
    f.train = gen_spurious(2000, 0.95, 0.75, 3.0, 8, Rng(seed, streams::data).next_u64());
    f.val = gen_spurious(2000, 0.95, 0.75, 3.0, 8,
                         Rng(seed, substream(streams::data, 2)).next_u64());
    f.mask = sample_group_budget(f.train, f.val, budget, seed);
    f.cfg.stage1.arch = {ArchKind::mlp1, 32};
    f.cfg.stage1.train.epochs = stage1_epochs(budget);
    f.cfg.stage1.train.batch_size = 64;
    f.cfg.stage1.train.aug_sigma = 0.1;
    f.cfg.stage2.arch = {ArchKind::mlp1, 32};
    f.cfg.stage2.train.epochs = 15;
    return f;
}

} // namespace

TEST_CASE("stage1_epochs keeps total work roughly constant") {
    REQUIRE(stage1_epochs(64) == 100);
    REQUIRE(stage1_epochs(8) == 800);
    REQUIRE(stage1_epochs(100000) == 1);
}

TEST_CASE("stage-1 classifier beats chance and keeps the earliest best step") {
    const Fixture f = spurious_fixture(32);
    const Stage1Result s1 = train_group_classifier(f.train, f.val, f.mask,
                                                   f.cfg.stage1, f.loss, 3);
    REQUIRE(s1.cond.has_value());
    const TrainSet valset = group_trainset(f.val, f.mask.labeled_val_idx);
    const MetricsReport rep = evaluate(s1.params, valset, f.loss, &*s1.cond);
    REQUIRE(rep.worst_group_acc == Catch::Approx(s1.best_val_worst_acc));
    REQUIRE(s1.best_val_worst_acc > 0.5); // chance is 1/4 groups (1/2 given class)

    // selection keeps the first checkpoint achieving the maximum
    double best = -1.0;
    long first = -1;
    std::vector<double> worst_by_step;
    long cur_step = -1;
    double cur_min = 2.0;
    for (const auto& row : s1.val_history.rows) {
        if (row.step != cur_step && cur_step >= 0) {
            if (cur_min > best) { best = cur_min; first = cur_step; }
            cur_min = 2.0;
        }
        cur_step = row.step;
        cur_min = std::min(cur_min, row.acc);
    }
    if (cur_min > best) { best = cur_min; first = cur_step; }
    REQUIRE(first == s1.best_step);
    REQUIRE(best == Catch::Approx(s1.best_val_worst_acc));
}

TEST_CASE("predict_groups copies ground truth and is deterministic") {
    const Fixture f = spurious_fixture(16);
    const Stage1Result s1 = train_group_classifier(f.train, f.val, f.mask,
                                                   f.cfg.stage1, f.loss, 5);
    const PseudoLabels am = predict_groups(s1.params, &*s1.cond, f.train, f.mask,
                                           PredictMode::argmax, 5);
    REQUIRE(am.z_hat.size() == f.train.n);
    for (std::size_t i : f.mask.labeled_train_idx) {
        REQUIRE(am.z_hat[i] == f.train.group_labels[i]);
        REQUIRE(am.source[i] == PseudoSource::ground_truth);
    }
    for (std::size_t i : f.mask.unlabeled_train_idx)
        REQUIRE(am.source[i] == PseudoSource::argmax_pred);

    // argmax must equal the argmax of forward, and class masking confines the
    // prediction to the point's own class
    for (std::size_t i : f.mask.unlabeled_train_idx) {
        const auto probs = forward(s1.params, f.train.row(i), &*s1.cond,
                                   f.train.class_labels[i]);
        REQUIRE(am.z_hat[i] == argmax(probs));
        REQUIRE(f.train.class_of_group[am.z_hat[i]] == f.train.class_labels[i]);
    }

    const PseudoLabels sa = predict_groups(s1.params, &*s1.cond, f.train, f.mask,
                                           PredictMode::sampled, 5);
    const PseudoLabels sb = predict_groups(s1.params, &*s1.cond, f.train, f.mask,
                                           PredictMode::sampled, 5);
    REQUIRE(sa.z_hat == sb.z_hat);
    for (std::size_t i : f.mask.unlabeled_train_idx)
        REQUIRE(sa.source[i] == PseudoSource::sampled_pred);
    const PseudoLabels sc = predict_groups(s1.params, &*s1.cond, f.train, f.mask,
                                           PredictMode::sampled, 6);
    REQUIRE(sa.z_hat != sc.z_hat);
}

TEST_CASE("pipeline collapses bitwise to full GDRO when every row is labeled") {
    Fixture f = spurious_fixture();
    const LabelMask full = full_mask(f.train, f.val);

    const BarackResult br = barack_run(f.train, f.val, full, f.cfg, f.loss, 11);
    const RobustResult fg = full_gdro(f.train, f.val, full.labeled_val_idx,
                                      f.cfg.stage2, f.loss, 11);
    REQUIRE(br.params == fg.params);
    REQUIRE(br.val_report == fg.val_report);
    for (std::size_t i = 0; i < f.train.n; ++i)
        REQUIRE(br.pseudolabels.source[i] == PseudoSource::ground_truth);

    // injecting ground-truth pseudolabels gives the same collapse under the
    // original partial mask
    PseudoLabels oracle;
    oracle.z_hat.assign(f.train.group_labels.begin(), f.train.group_labels.end());
    oracle.source.assign(f.train.n, PseudoSource::ground_truth);
    const BarackResult bi =
        barack_run(f.train, f.val, f.mask, f.cfg, f.loss, 11, &oracle);
    const RobustResult fg2 = full_gdro(f.train, f.val, f.mask.labeled_val_idx,
                                       f.cfg.stage2, f.loss, 11);
    REQUIRE(bi.params == fg2.params);
}

TEST_CASE("unlabeled group labels are never read by the partial-label methods") {
    Fixture f = spurious_fixture();
    Dataset poisoned = f.train;
    // scramble the group labels the pipeline must not look at, preserving the
    // class consistency invariant group/2 == class
    Rng rng(99, streams::data);
    for (std::size_t i : f.mask.unlabeled_train_idx)
        poisoned.group_labels[i] =
            2 * poisoned.class_labels[i] + static_cast<int>(rng.uniform_int(2));

    const BarackResult a = barack_run(f.train, f.val, f.mask, f.cfg, f.loss, 13);
    const BarackResult b = barack_run(poisoned, f.val, f.mask, f.cfg, f.loss, 13);
    REQUIRE(a.params == b.params);
    REQUIRE(a.pseudolabels.z_hat == b.pseudolabels.z_hat);
    // the analysis-only confusion matrix is the one thing allowed to differ
    REQUIRE(a.stage1_confusion.counts != b.stage1_confusion.counts);

    const SubsetResult sa = subset_gdro(f.train, f.val, f.mask, f.cfg.stage2, f.loss, 13);
    const SubsetResult sb = subset_gdro(poisoned, f.val, f.mask, f.cfg.stage2, f.loss, 13);
    REQUIRE(sa.params == sb.params);

    // full GDRO does read them, so it must change
    const RobustResult fa = full_gdro(f.train, f.val, f.mask.labeled_val_idx,
                                      f.cfg.stage2, f.loss, 13);
    const RobustResult fb = full_gdro(poisoned, f.val, f.mask.labeled_val_idx,
                                      f.cfg.stage2, f.loss, 13);
    REQUIRE(!(fa.params == fb.params));
}

TEST_CASE("pipeline is deterministic end to end") {
    Fixture f = spurious_fixture();
    const BarackResult a = barack_run(f.train, f.val, f.mask, f.cfg, f.loss, 17);
    const BarackResult b = barack_run(f.train, f.val, f.mask, f.cfg, f.loss, 17);
    REQUIRE(a.params == b.params);
    REQUIRE(a.pseudolabels.z_hat == b.pseudolabels.z_hat);
    REQUIRE(a.stage1_confusion.counts == b.stage1_confusion.counts);
    const BarackResult c = barack_run(f.train, f.val, f.mask, f.cfg, f.loss, 18);
    REQUIRE(!(a.params == c.params));
}

TEST_CASE("empty pseudo-groups are remapped contiguously") {
    Fixture f = spurious_fixture();
    PseudoLabels inj;
    inj.z_hat.assign(f.train.n, 0);
    inj.source.assign(f.train.n, PseudoSource::argmax_pred);
    // only groups 0 and 3 receive points
    for (std::size_t i = 0; i < f.train.n; i += 2) inj.z_hat[i] = 3;
    const BarackResult r = barack_run(f.train, f.val, f.mask, f.cfg, f.loss, 19, &inj);
    REQUIRE(r.remapped_groups == std::vector<int>{0, -1, -1, 1});
    REQUIRE(r.stage2.weights.w.size() == 2);
}

TEST_CASE("ssl stage 1 with full supervised weight shadows the plain trainer") {
    // lambda_sup = 1 silences the consistency term (its rows get weight 0),
    // but the shared supervised-batch scaling path is exercised
    Fixture f = spurious_fixture(32);
    Stage1Config cfg = f.cfg.stage1;
    cfg.ssl = SSLConfig{1.0, 2.0, 0.2}; // tau > 1: nothing is ever confident
    const Stage1Result s = ssl_group_trainer(f.train, f.mask, cfg, f.loss, 23);

    // same accuracy region as the supervised last iterate
    const TrainSet valset = group_trainset(f.val, f.mask.labeled_val_idx);
    const MetricsReport rep = evaluate(s.params, valset, f.loss, &*s.cond);
    REQUIRE(rep.worst_group_acc > 0.5);

    REQUIRE_THROWS_AS(ssl_group_trainer(f.train, f.mask, f.cfg.stage1, f.loss, 23),
                      ParameterError); // ssl config missing
}

TEST_CASE("semi-supervised stage 1 stays close to the supervised variant") {
    // rare-blob task, budget 8: consistency training on unlabeled points must
    // not fall more than 0.05 of worst-group pseudolabel accuracy behind
    const int budget = 8, seeds = 10;
    double diff_sum = 0.0;
    for (int s = 0; s < seeds; ++s) {
        const Dataset train =
            gen_rare_group(6000, 4, 0, 0.1, Rng(s, streams::data).next_u64());
        const Dataset val = gen_rare_group(
            3000, 4, 0, 0.1, Rng(s, substream(streams::data, 2)).next_u64());
        const LabelMask mask = sample_group_budget(train, val, budget, s);
        Stage1Config cfg;
        cfg.arch = {ArchKind::mlp1, 32};
        cfg.train.epochs = stage1_epochs(budget);
        cfg.train.batch_size = 32;
        cfg.train.aug_sigma = 0.1;
        const LossConfig loss;

        const Stage1Result sup = train_group_classifier(train, val, mask, cfg, loss, s);
        cfg.ssl = SSLConfig{};
        const Stage1Result ssl = ssl_group_trainer(train, mask, cfg, loss, s);

        auto wg_acc = [&](const Stage1Result& r) {
            const PseudoLabels pl = predict_groups(
                r.params, r.cond ? &*r.cond : nullptr, train, mask, PredictMode::argmax, s);
            const TrainSet t = group_trainset(train);
            std::vector<double> correct(4, 0.0), count(4, 0.0);
            for (std::size_t i = 0; i < train.n; ++i) {
                count[train.group_labels[i]] += 1.0;
                correct[train.group_labels[i]] += pl.z_hat[i] == train.group_labels[i];
            }
            double worst = 1.0;
            for (int g = 0; g < 4; ++g) worst = std::min(worst, correct[g] / count[g]);
            return worst;
        };
        diff_sum += wg_acc(ssl) - wg_acc(sup);
    }
    REQUIRE(diff_sum / seeds > -0.05);
}

TEST_CASE("class input raises stage-1 worst-group accuracy") {
    const int seeds = 6;
    double margin_sum = 0.0;
    for (int s = 0; s < seeds; ++s) {
        const Fixture f = spurious_fixture(32, 100 + s);
        Stage1Config with = f.cfg.stage1, without = f.cfg.stage1;
        without.use_class_input = false;
        const Stage1Result a = train_group_classifier(f.train, f.val, f.mask, with,
                                                      f.loss, s);
        const Stage1Result b = train_group_classifier(f.train, f.val, f.mask, without,
                                                      f.loss, s);
        REQUIRE(!b.cond.has_value());
        margin_sum += a.best_val_worst_acc - b.best_val_worst_acc;
    }
    REQUIRE(margin_sum / seeds > 0.0);
}

TEST_CASE("pseudolabel CSV layout") {
    PseudoLabels pl;
    pl.z_hat = {2, 1};
    pl.source = {PseudoSource::ground_truth, PseudoSource::argmax_pred};
    std::stringstream ss;
    save_pseudolabels_csv(pl, std::vector<int>{2, 3}, ss);
    std::string line;
    std::getline(ss, line);
    REQUIRE(line == "index,z_true,z_hat,source");
    std::getline(ss, line);
    REQUIRE(line == "0,2,2,ground_truth");
    std::getline(ss, line);
    REQUIRE(line == "1,3,1,argmax");
}

TEST_CASE("pipeline rejects empty masks") {
    Fixture f = spurious_fixture();
    LabelMask empty;
    REQUIRE_THROWS_AS(barack_run(f.train, f.val, empty, f.cfg, f.loss, 1),
                      EmptyDataset);
    REQUIRE_THROWS_AS(
        train_group_classifier(f.train, f.val, empty, f.cfg.stage1, f.loss, 1),
        EmptyDataset);
}
