// Command-line workbench: generate synthetic tasks, run robustness methods,
// evaluate theoretical bounds, run ablations and aggregate results.
//
// Exit codes: 0 success, 2 configuration error, 3 infeasible request
// (e.g. a label budget larger than a group), 4 runtime failure.

#include <atomic>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <mutex>
#include <sstream>
#include <thread>
#include <vector>

#include <CLI11.hpp>

#include "barack/ablation.hpp"
#include "barack/config.hpp"
#include "barack/dataset.hpp"
#include "barack/experiment.hpp"
#include "barack/pipeline.hpp"
#include "barack/theory.hpp"

namespace fs = std::filesystem;
using namespace barack;

namespace {

struct CommonArgs {
    std::string config_path;
    std::string out_dir = ".";
    std::uint64_t seed = 0;
    int workers = 1;
};

Config load_config(const CommonArgs& args) {
    Config c;
    if (!args.config_path.empty()) c = Config::parse_file(args.config_path);
    return c;
}

LossConfig loss_from_config(const Config& c) {
    LossConfig loss;
    const std::string kind = c.get_str("loss.kind", "truncated_ce");
    if (kind == "truncated_ce")
        loss.kind = LossKind::truncated_ce;
    else if (kind == "squared")
        loss.kind = LossKind::squared;
    else
        throw ConfigError("loss.kind must be truncated_ce or squared");
    loss.B = c.get_double("loss.B", loss.B);
    return loss;
}

std::vector<std::uint64_t> seeds_from_config(const Config& c, std::uint64_t base) {
    std::vector<std::uint64_t> seeds;
    if (c.has("seeds")) {
        for (long s : c.get_int_list("seeds", {}))
            seeds.push_back(static_cast<std::uint64_t>(s));
    } else {
        const long n = c.get_int("n_seeds", 1);
        for (long i = 0; i < n; ++i) seeds.push_back(base + i);
    }
    if (seeds.empty()) throw ConfigError("no seeds configured");
    return seeds;
}

std::string job_tag(const std::string& method, std::size_t budget, std::uint64_t seed) {
    std::ostringstream ss;
    ss << method << "_b" << budget << "_s" << seed;
    return ss.str();
}

void write_run_output(const fs::path& dir, const std::string& tag, const RunOutput& r,
                      const Dataset& train, std::size_t budget,
                      const std::string& task_name) {
    {
        std::ofstream out(dir / (tag + "_metrics.txt"));
        if (!out) throw IoError("cannot write metrics for " + tag);
        out << "task = " << task_name << '\n';
        out << "budget = " << budget << '\n';
        write_metrics_kv(r, out);
    }
    {
        std::ofstream out(dir / (tag + "_history.csv"));
        r.train_history.write_csv(out);
    }
    {
        std::ofstream out(dir / (tag + "_val_history.csv"));
        r.val_history.write_csv(out);
    }
    if (!r.pseudolabels.z_hat.empty()) {
        std::ofstream out(dir / (tag + "_pseudolabels.csv"));
        save_pseudolabels_csv(r.pseudolabels, train.group_labels, out);
        save_confusion_csv(r.stage1_confusion,
                           (dir / (tag + "_confusion.csv")).string());
    }
}

// -------------------------------------------------------------------------
// gen
// -------------------------------------------------------------------------

int cmd_gen(const CommonArgs& args) {
    const Config c = load_config(args);
    const TaskSpec spec = task_from_config(c.section("task"));
    fs::create_directories(args.out_dir);
    for (SplitTag tag : {SplitTag::train, SplitTag::val, SplitTag::test}) {
        const Dataset d = make_split(spec, tag, args.seed);
        const fs::path path = fs::path(args.out_dir) / (std::string(to_string(tag)) + ".txt");
        save_dataset(d, path.string());
        const GroupStats s = group_stats(d);
        std::cout << to_string(tag) << ": n=" << d.n << " groups=";
        for (std::size_t n : s.counts) std::cout << ' ' << n;
        std::cout << " q_min=" << s.q_min << '\n';
    }
    return 0;
}

// -------------------------------------------------------------------------
// run / ablate
// -------------------------------------------------------------------------

struct Job {
    std::size_t budget;
    std::uint64_t seed;
};

/// Methods within one (budget, seed) pair run sequentially so flip_gdro can
/// reuse the paired barack run; pairs run in parallel across workers.
void run_jobs(const std::vector<std::string>& methods, const Config& c,
              const CommonArgs& args) {
    const TaskSpec spec = task_from_config(c.section("task"));
    const LossConfig loss = loss_from_config(c);
    const MethodConfig mc = method_config_from_config(c.section("method"));
    const std::vector<std::uint64_t> seeds = seeds_from_config(c, args.seed);
    std::vector<std::size_t> budgets;
    for (long b : c.get_int_list("budgets", {16}))
        budgets.push_back(static_cast<std::size_t>(b));

    fs::create_directories(args.out_dir);
    std::vector<Job> jobs;
    for (std::size_t b : budgets)
        for (std::uint64_t s : seeds) jobs.push_back({b, s});

    std::atomic<std::size_t> next{0};
    std::mutex io_mutex;
    std::atomic<int> failure{0};

    auto worker = [&] {
        for (;;) {
            const std::size_t j = next.fetch_add(1);
            if (j >= jobs.size() || failure.load() != 0) return;
            const Job job = jobs[j];
            try {
                const Dataset train = make_split(spec, SplitTag::train, job.seed);
                const Dataset val = make_split(spec, SplitTag::val, job.seed);
                const Dataset test = make_split(spec, SplitTag::test, job.seed);
                const LabelMask mask =
                    sample_group_budget(train, val, job.budget, job.seed);

                const RunOutput* barack_out = nullptr;
                std::vector<RunOutput> done;
                done.reserve(methods.size());
                for (const std::string& name : methods) {
                    RunOutput r;
                    if (name == "barack_noclass") {
                        MethodConfig nc = mc;
                        nc.stage1.use_class_input = false;
                        r = run_method(Method::barack, train, val, test, mask, nc,
                                       loss, job.seed);
                    } else if (name == "flip_gdro") {
                        if (barack_out == nullptr)
                            throw ConfigError(
                                "flip_gdro must be listed after barack (it reuses "
                                "the paired run's confusion and hypers)");
                        r = run_method(Method::flip_gdro, train, val, test, mask, mc,
                                       loss, job.seed, &barack_out->stage1_confusion,
                                       barack_out->chosen);
                    } else {
                        r = run_method(method_from_string(name), train, val, test,
                                       mask, mc, loss, job.seed);
                    }
                    done.push_back(std::move(r));
                    if (name == "barack") barack_out = &done.back();
                    write_run_output(args.out_dir, job_tag(name, job.budget, job.seed),
                                     done.back(), train, job.budget,
                                     to_string(spec.kind));
                }
                std::lock_guard<std::mutex> lock(io_mutex);
                std::cout << "done: budget " << job.budget << " seed " << job.seed
                          << '\n';
            } catch (const BudgetInfeasible& e) {
                std::lock_guard<std::mutex> lock(io_mutex);
                std::cerr << "infeasible: " << e.what() << '\n';
                failure.store(3);
            } catch (const std::exception& e) {
                std::lock_guard<std::mutex> lock(io_mutex);
                std::cerr << "job failed: " << e.what() << '\n';
                failure.store(4);
            }
        }
    };

    std::vector<std::thread> pool;
    const int n_workers = std::max(1, args.workers);
    for (int i = 0; i < n_workers; ++i) pool.emplace_back(worker);
    for (auto& t : pool) t.join();
    if (failure.load() == 3) throw BudgetInfeasible("one or more jobs infeasible");
    if (failure.load() != 0) throw std::runtime_error("one or more jobs failed");
}

int cmd_run(const CommonArgs& args) {
    const Config c = load_config(args);
    std::vector<std::string> methods;
    {
        std::stringstream ss(c.get_str("methods", "erm,subset_gdro,barack,full_gdro"));
        std::string tok;
        while (std::getline(ss, tok, ','))
            if (!tok.empty()) methods.push_back(tok);
    }
    run_jobs(methods, c, args);
    return 0;
}

int cmd_ablate(const CommonArgs& args) {
    const Config c = load_config(args);
    run_jobs({"barack", "flip_gdro", "barack_noclass", "barack_ssl"}, c, args);
    return 0;
}

// -------------------------------------------------------------------------
// bounds
// -------------------------------------------------------------------------

int cmd_bounds(const CommonArgs& args) {
    const Config c = load_config(args);
    const TaskSpec spec = task_from_config(c.section("task"));
    const LossConfig loss = loss_from_config(c);

    std::ostringstream report;
    char buf[128];
    auto put = [&](const char* key, double v) {
        std::snprintf(buf, sizeof buf, "%s = %.12g\n", key, v);
        report << buf;
    };

    switch (spec.kind) {
        case TaskKind::spurious:
            put("oracle_robust_loss", spurious_oracle_robust(spec.mu_core, loss));
            break;
        case TaskKind::rare_group:
            put("oracle_robust_loss", rare_group_oracle_robust(spec.num_groups, loss));
            break;
        case TaskKind::pointmass: {
            put("oracle_robust_loss",
                pointmass_oracle_robust(static_cast<int>(spec.priors.size()), loss));
            TrainConfig erm_cfg, gdro_cfg;
            erm_cfg.epochs = gdro_cfg.epochs =
                static_cast<int>(c.get_int("pointmass.epochs", 200));
            erm_cfg.lr = gdro_cfg.lr = c.get_double("pointmass.lr", 0.5);
            gdro_cfg.eta_group = c.get_double("pointmass.eta_group", 0.05);
            erm_cfg.sampling = Sampling::iid;
            const PointmassResult pm = pointmass_experiment(
                spec.priors, c.get_int("pointmass.n", 20000), erm_cfg, gdro_cfg, loss,
                args.seed);
            put("erm_worst_loss", pm.erm_worst_loss);
            put("gdro_worst_loss", pm.gdro_worst_loss);
            put("ratio", pm.ratio);
            put("bound", pm.bound);
            break;
        }
    }
    if (c.get_bool("scaling.enabled", false)) {
        ScalingConfig sc;
        sc.loss = loss;
        sc.mu_core = spec.mu_core;
        sc.mu_spur = spec.mu_spur;
        sc.seed = args.seed;
        sc.trials = static_cast<int>(c.get_int("scaling.trials", sc.trials));
        std::vector<std::size_t> sizes;
        for (long s : c.get_int_list("scaling.sizes", {}))
            sizes.push_back(static_cast<std::size_t>(s));
        if (!sizes.empty()) sc.sizes = sizes;
        const ScalingResult sr = excess_risk_scaling(sc);
        put("scaling_slope", sr.slope);
        put("scaling_slope_lo", sr.slope_lo);
        put("scaling_slope_hi", sr.slope_hi);
    }

    std::cout << report.str();
    fs::create_directories(args.out_dir);
    std::ofstream out(fs::path(args.out_dir) / "bounds.txt");
    if (!out) throw IoError("cannot write bounds.txt");
    out << report.str();
    return 0;
}

// -------------------------------------------------------------------------
// report
// -------------------------------------------------------------------------

struct Cell {
    std::vector<double> test_worst;
};

int cmd_report(const CommonArgs& args) {
    std::map<std::pair<std::string, long>, Cell> cells;
    for (const auto& entry : fs::directory_iterator(args.out_dir)) {
        const std::string name = entry.path().filename().string();
        if (name.size() < 12 || name.substr(name.size() - 12) != "_metrics.txt")
            continue;
        const Config m = Config::parse_file(entry.path().string());
        const std::string method = m.get_str("method", "");
        const long budget = m.get_int("budget", -1);
        const double worst = m.get_double("test_worst_group_acc", -1.0);
        if (method.empty() || budget < 0 || worst < 0.0) {
            std::cerr << "report: skipping malformed " << name << '\n';
            continue;
        }
        cells[{method, budget}].test_worst.push_back(worst);
    }
    if (cells.empty()) throw IoError("report: no *_metrics.txt files in " + args.out_dir);

    std::ostringstream text, csv, curve;
    text << "method          budget   n    worst-group acc (mean +- std)\n";
    csv << "method,budget,n,mean_test_worst_acc,std_test_worst_acc\n";
    curve << "method,budget,mean_test_worst_acc\n";
    char buf[160];
    for (const auto& [key, cell] : cells) {
        const auto& v = cell.test_worst;
        double mean = 0.0;
        for (double x : v) mean += x;
        mean /= v.size();
        double var = 0.0;
        for (double x : v) var += (x - mean) * (x - mean);
        const double sd = v.size() > 1 ? std::sqrt(var / (v.size() - 1)) : 0.0;
        std::snprintf(buf, sizeof buf, "%-15s %6ld %4zu    %.4f +- %.4f\n",
                      key.first.c_str(), key.second, v.size(), mean, sd);
        text << buf;
        std::snprintf(buf, sizeof buf, "%s,%ld,%zu,%.17g,%.17g\n", key.first.c_str(),
                      key.second, v.size(), mean, sd);
        csv << buf;
        std::snprintf(buf, sizeof buf, "%s,%ld,%.17g\n", key.first.c_str(), key.second,
                      mean);
        curve << buf;
    }
    std::cout << text.str();
    std::ofstream(fs::path(args.out_dir) / "summary.txt") << text.str();
    std::ofstream(fs::path(args.out_dir) / "summary.csv") << csv.str();
    std::ofstream(fs::path(args.out_dir) / "budget_curve.csv") << curve.str();
    return 0;
}

} // namespace

int main(int argc, char** argv) {
    CLI::App app{"Group-robustness workbench for partially group-labeled data"};
    app.require_subcommand(1);

    CommonArgs args;
    for (auto* sub : {app.add_subcommand("gen", "Generate dataset splits"),
                      app.add_subcommand("run", "Run methods over budgets and seeds"),
                      app.add_subcommand("bounds", "Evaluate theoretical bounds"),
                      app.add_subcommand("ablate", "Run the ablation suite"),
                      app.add_subcommand("report", "Aggregate metrics files")}) {
        sub->add_option("--config", args.config_path, "key = value config file");
        sub->add_option("--seed", args.seed, "base RNG seed");
        sub->add_option("--workers", args.workers, "parallel jobs");
        sub->add_option("--out", args.out_dir, "output directory");
    }

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int code = app.exit(e);
        return code == 0 ? 0 : 2;
    }

    try {
        if (app.got_subcommand("gen")) return cmd_gen(args);
        if (app.got_subcommand("run")) return cmd_run(args);
        if (app.got_subcommand("bounds")) return cmd_bounds(args);
        if (app.got_subcommand("ablate")) return cmd_ablate(args);
        return cmd_report(args);
    } catch (const ConfigError& e) {
        std::cerr << "config error: " << e.what() << '\n';
        return 2;
    } catch (const BudgetInfeasible& e) {
        std::cerr << "infeasible: " << e.what() << '\n';
        return 3;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << '\n';
        return 4;
    }
}
