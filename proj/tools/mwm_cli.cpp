// mwm: command-line driver for data generation, training, evaluation,
// planning benchmarks, ablations and report merging.
//
// Exit codes: 0 success, 2 invalid configuration or arguments, 1 runtime error.

#include <algorithm>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <nlohmann/json.hpp>

#include "mwm/checkpoint.hpp"
#include "mwm/config.hpp"
#include "mwm/experiments.hpp"

namespace fs = std::filesystem;
using namespace mwm;

namespace {

struct Options {
    std::string config;
    std::optional<std::uint64_t> seed;
    std::string out;
};

config::RunConfig resolve(const Options& o) {
    nlohmann::json j = nlohmann::json::object();
    if (!o.config.empty()) {
        std::ifstream is(o.config);
        if (!is) throw ConfigError("cannot open config file " + o.config);
        try {
            j = nlohmann::json::parse(is);
        } catch (const nlohmann::json::exception& e) {
            throw ConfigError("config parse error in " + o.config + ": " + e.what());
        }
    }
    if (o.seed) j["master_seed"] = *o.seed;
    if (!o.out.empty()) j["out_dir"] = o.out;
    return config::from_json(j);
}

fs::path prepare_out(const config::RunConfig& cfg) {
    fs::path dir(cfg.out_dir);
    fs::create_directories(dir);
    std::ofstream os(dir / "resolved_config.json");
    os << config::to_json(cfg).dump(2) << '\n';
    return dir;
}

std::ofstream open_out(const fs::path& p) {
    std::ofstream os(p, std::ios::binary);
    if (!os) throw RuntimeError("cannot write " + p.string());
    return os;
}

void log(const std::string& msg) { std::cerr << "[mwm] " << msg << '\n'; }

ckpt::ScheduleInfo sched_info(const config::RunConfig& cfg) { return {cfg.schedule, cfg.T}; }

std::optional<exp::Model> try_load(const fs::path& p) {
    if (!fs::exists(p)) return std::nullopt;
    return ckpt::load<float>(p).model;
}

int cmd_gen_data(const config::RunConfig& cfg) {
    auto dir = prepare_out(cfg);
    exp::Pipeline p(cfg);
    auto os = open_out(dir / "dataset.csv");
    sim::write_dataset_csv(os, p.dataset(), cfg.world.obs_dim);
    log("wrote " + std::to_string(p.dataset().size()) + " trajectories to " + (dir / "dataset.csv").string());
    return 0;
}

int cmd_train_stage1(const config::RunConfig& cfg) {
    auto dir = prepare_out(cfg);
    exp::Pipeline p(cfg);
    auto net = p.fresh_model();
    auto curve = p.stage1(net);
    ckpt::save(dir / "stage1.ckpt", net, sched_info(cfg));
    auto os = open_out(dir / "stage1_loss.csv");
    train::write_loss_csv(os, curve);
    log("stage I: " + std::to_string(curve.size()) + " steps, final loss " + metrics::fmt_num(curve.back().loss));
    return 0;
}

int cmd_posttrain_acc(const config::RunConfig& cfg) {
    auto dir = prepare_out(cfg);
    auto s1 = try_load(dir / "stage1.ckpt");
    if (!s1) throw RuntimeError("posttrain-acc: " + (dir / "stage1.ckpt").string() + " not found; run train-stage1 first");
    exp::Pipeline p(cfg);
    auto net = std::move(*s1);
    auto curve = p.acc(net);
    ckpt::save(dir / "acc.ckpt", net, sched_info(cfg));
    auto os = open_out(dir / "acc_loss.csv");
    train::write_loss_csv(os, curve);
    log("ACC: " + std::to_string(curve.size()) + " steps, final loss " + metrics::fmt_num(curve.back().loss));
    return 0;
}

std::vector<std::pair<std::string, exp::Model>> trained_models(const fs::path& dir) {
    std::vector<std::pair<std::string, exp::Model>> out;
    for (const char* name : {"stage1", "acc"})
        if (auto m = try_load(dir / (std::string(name) + ".ckpt"))) out.emplace_back(name, std::move(*m));
    return out;
}

int cmd_rollout_eval(const config::RunConfig& cfg) {
    auto dir = prepare_out(cfg);
    auto models = trained_models(dir);
    if (models.empty()) throw RuntimeError("rollout-eval: no checkpoint in " + dir.string());
    exp::Pipeline p(cfg);
    auto os = open_out(dir / "metrics_rollout.csv");
    os << metrics::kReportHeader << '\n';
    for (const auto& [name, net] : models) {
        metrics::MetricReport r;
        r.model = name;
        r.seed = cfg.master_seed;
        r.config_hash = config::config_hash(cfg);
        r.curve = p.evaluate(net);
        if (cfg.eval_pose_metrics) {
            r.ate = r.curve.ate;
            r.rpe = r.curve.rpe;
        }
        metrics::write_report_rows(os, r);
        log(name + ": perceptual@" + std::to_string(r.curve.horizons.back()) + " = " +
            metrics::fmt_num(r.curve.perceptual.back()));
    }
    return 0;
}

void prefixed(std::ostream& os, const std::string& prefix, const std::string& rows) {
    std::istringstream in(rows);
    std::string line;
    while (std::getline(in, line)) os << prefix << ',' << line << '\n';
}

int cmd_plan_bench(const config::RunConfig& cfg) {
    auto dir = prepare_out(cfg);
    auto models = trained_models(dir);
    exp::Pipeline p(cfg);
    auto scores = open_out(dir / "plan_scores.csv");
    auto plans = open_out(dir / "plans.csv");
    auto report = open_out(dir / "metrics_plan.csv");
    scores << "model,task_id,iteration,candidate,score,chosen\n";
    plans << "model,task_id,step,v,w\n";
    report << metrics::kReportHeader << '\n';
    auto run = [&](const std::string& name, const exp::Model* net) {
        auto b = p.plan_bench(net);
        for (const auto& t : b.tasks) {
            std::ostringstream s, pl;
            plan::write_plan_csv(pl, t.task_id, t.plan, false);
            prefixed(plans, name, pl.str());
            if (net) {
                plan::write_plan_scores_csv(s, t.task_id, t.result, false);
                prefixed(scores, name, s.str());
            }
        }
        metrics::MetricReport r;
        r.model = name;
        r.seed = cfg.master_seed;
        r.config_hash = config::config_hash(cfg);
        r.ate = b.ate;
        r.rpe = b.rpe;
        r.sr = b.sr;
        r.ne = b.ne;
        metrics::write_report_rows(report, r);
        log(name + ": SR " + metrics::fmt_num(b.sr) + ", NE " + metrics::fmt_num(b.ne));
    };
    run("random", nullptr);
    for (const auto& [name, net] : models) run(name, &net);
    return 0;
}

int cmd_ablate(const config::RunConfig& cfg) {
    auto dir = prepare_out(cfg);
    exp::Pipeline p(cfg);
    log("training ablation variants for seed " + std::to_string(cfg.master_seed));
    auto v = exp::train_variants(p);
    exp::AblationTables t;
    exp::evaluate_variants(p, v, t);
    const int h = *std::max_element(cfg.horizons.begin(), cfg.horizons.end());
    auto write = [&](const char* file, const char* col, const std::vector<exp::AblationRow>& rows) {
        auto os = open_out(dir / file);
        exp::write_ablation_csv(os, col, rows, h);
    };
    write("table_iv_loss.csv", "loss", t.loss);
    write("table_v_paradigm.csv", "paradigm", t.paradigm);
    write("table_vi_context.csv", "context", t.context);
    write("table_steps.csv", "sampler", t.steps);
    return 0;
}

// Pure merge of metrics_*.csv files found under the output directory.
int cmd_report(const config::RunConfig& cfg) {
    fs::path dir(cfg.out_dir);
    if (!fs::exists(dir)) throw RuntimeError("report: " + dir.string() + " does not exist");
    std::vector<fs::path> files;
    for (const auto& e : fs::recursive_directory_iterator(dir)) {
        const auto name = e.path().filename().string();
        if (e.is_regular_file() && name.rfind("metrics_", 0) == 0 && e.path().extension() == ".csv")
            files.push_back(e.path());
    }
    if (files.empty()) throw RuntimeError("report: no metrics_*.csv under " + dir.string());
    std::sort(files.begin(), files.end());
    auto summary = open_out(dir / "summary.csv");
    auto curves = open_out(dir / "curves.csv");
    summary << "source," << metrics::kReportHeader << '\n';
    curves << "source," << metrics::kReportHeader << '\n';
    for (const auto& f : files) {
        std::ifstream is(f);
        std::string line;
        if (!std::getline(is, line) || line != metrics::kReportHeader)
            throw RuntimeError("report: unexpected header in " + f.string());
        const auto src = fs::relative(f, dir).generic_string();
        while (std::getline(is, line)) {
            if (line.empty()) continue;
            // row kind is the fourth column
            std::size_t pos = 0;
            for (int i = 0; i < 3 && pos != std::string::npos; ++i) pos = line.find(',', pos) + 1;
            const bool is_summary = line.compare(pos, 7, "summary") == 0;
            (is_summary ? summary : curves) << src << ',' << line << '\n';
        }
    }
    log("merged " + std::to_string(files.size()) + " report files");
    return 0;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"Desk-scale navigation world model: data, training, evaluation and planning"};
    app.require_subcommand(1);
    Options opt;
    auto add_common = [&](CLI::App* sub) {
        sub->add_option("--config", opt.config, "JSON configuration file");
        sub->add_option("--seed", opt.seed, "override master_seed");
        sub->add_option("--out", opt.out, "output directory (overrides out_dir)");
    };
    using Fn = int (*)(const config::RunConfig&);
    const std::vector<std::tuple<const char*, const char*, Fn>> commands{
        {"gen-data", "generate the trajectory dataset", cmd_gen_data},
        {"train-stage1", "structure pretraining", cmd_train_stage1},
        {"posttrain-acc", "ACC post-training of the adaLN parameters", cmd_posttrain_acc},
        {"rollout-eval", "rollout divergence of trained checkpoints", cmd_rollout_eval},
        {"plan-bench", "goal-reaching benchmark with CEM planning", cmd_plan_bench},
        {"ablate", "loss, paradigm, context and sampler ablation tables", cmd_ablate},
        {"report", "merge metrics CSVs into summary and curve tables", cmd_report},
    };
    std::vector<CLI::App*> subs;
    for (const auto& [name, help, fn] : commands) {
        subs.push_back(app.add_subcommand(name, help));
        add_common(subs.back());
    }
    try {
        app.parse(argc, argv);
    } catch (const CLI::Success& e) {
        return app.exit(e);
    } catch (const CLI::ParseError& e) {
        app.exit(e);
        return 2;
    }
    try {
        const auto cfg = resolve(opt);
        for (std::size_t i = 0; i < subs.size(); ++i)
            if (subs[i]->parsed()) return std::get<2>(commands[i])(cfg);
    } catch (const ConfigError& e) {
        std::cerr << "mwm: invalid configuration: " << e.what() << '\n';
        return 2;
    } catch (const std::exception& e) {
        std::cerr << "mwm: error: " << e.what() << '\n';
        return 1;
    }
    return 1;
}
