// Acceptance run: one PASS/FAIL line per criterion.
//
//   acceptance [--seeds N] [--out DIR] [--strict]
//
// The heavy criteria (6-10) train every ablation variant on the default
// configuration for each seed and write their tables under DIR. The exit code
// is 0 once all criteria have been evaluated; with --strict it is 1 if any
// criterion failed.

#include <chrono>
#include <cmath>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <sstream>
#include <string>
#include <vector>

#include "mwm/checkpoint.hpp"
#include "mwm/config.hpp"
#include "mwm/experiments.hpp"

#include "gradcheck.hpp"

namespace fs = std::filesystem;
using namespace mwm;

namespace {

using Clock = std::chrono::steady_clock;

double seconds_since(Clock::time_point t0) { return std::chrono::duration<double>(Clock::now() - t0).count(); }

struct Verdict {
    int id;
    bool pass;
    std::string detail;
};

std::vector<Verdict> verdicts;

void report(int id, bool pass, const std::string& detail) {
    verdicts.push_back({id, pass, detail});
    std::cout << "criterion " << id << ": " << (pass ? "PASS" : "FAIL") << "  " << detail << std::endl;
}

std::string fmt(double v, int prec = 4) {
    std::ostringstream os;
    os.precision(prec);
    os << v;
    return os.str();
}

// ---------------------------------------------------------------- 1

void gradients() {
    auto t0 = Clock::now();
    double worst_op = 0;
    std::string worst_name;
    for (const auto& r : gradcheck::check_ops(50))
        if (r.worst >= worst_op) worst_op = r.worst, worst_name = r.name;
    double worst_net = gradcheck::check_denoiser(50);
    double secs = seconds_since(t0);
    report(1, worst_op <= 1e-4 && worst_net <= 1e-4 && secs < 120,
           "worst op rel err " + fmt(worst_op) + " (" + worst_name + "), denoiser " + fmt(worst_net) + ", " +
               fmt(secs, 3) + " s");
}

// ---------------------------------------------------------------- 2

void noising() {
    bool ok = true;
    double worst = 0;  // in standard errors
    for (auto kind : {diffusion::ScheduleKind::linear_beta, diffusion::ScheduleKind::cosine}) {
        diffusion::NoiseSchedule s(kind, 1000);
        Rng rng(11);
        const int n = 10000;
        for (int t : {1, 100, 500, 900, 1000}) {
            const double x0 = 0.7;
            double sum = 0, sq = 0;
            std::vector<double> x{x0};
            for (int i = 0; i < n; ++i) {
                std::vector<double> e{rng.normal()};
                double y = diffusion::forward_noise<double>(x, t, s, e)[0];
                sum += y;
                sq += y * y;
            }
            const double ab = s.alpha_bar(t), mu = std::sqrt(ab) * x0, var = 1 - ab;
            const double mean = sum / n, v = sq / n - mean * mean;
            const double zm = std::abs(mean - mu) / std::sqrt(var / n);
            const double zv = std::abs(v - var) / (var * std::sqrt(2.0 / (n - 1)));
            worst = std::max({worst, zm, zv});
            ok = ok && zm <= 3 && zv <= 3;
        }
    }
    report(2, ok, "worst deviation " + fmt(worst, 3) + " standard errors (n=10000, 2 schedules x 5 timesteps)");
}

// ---------------------------------------------------------------- 3

void ddim_algebra() {
    diffusion::NoiseSchedule s(diffusion::ScheduleKind::linear_beta, 1000);
    std::vector<float> st{0.3f, -1.f, 2.f}, s0{9.f, 9.f, 9.f};
    bool identity = diffusion::ddim_step<float>(st, s0, 400, 400, s) == st;

    Array<float> target = Array<float>::vector({0.2f, -0.7f, 0.95f, 0.0f});
    diffusion::GraphDenoiser<float> oracle = [&](ad::Graph<float>& g, const Array<float>&, int) {
        return g.constant(target);
    };
    double worst = 0;
    for (int count : {1, 5, 25}) {
        auto sub = diffusion::SubSchedule::evenly_spaced(1000, count);
        Rng rng{std::uint64_t(count)};
        ad::Graph<float> g;
        auto fr = diffusion::generate_frame<float>(g, oracle, 4, sub, s, rng);
        for (std::size_t i = 0; i < 4; ++i) worst = std::max(worst, double(std::abs(fr.final_state[i] - target[i])));
    }

    diffusion::GraphDenoiser<float> net = [](ad::Graph<float>& g, const Array<float>& x, int t) {
        return ad::tanh(ad::scale(g.constant(x), float(t) / 1000.0f));
    };
    auto sub = diffusion::SubSchedule::evenly_spaced(1000, 5);
    auto frame = [&] {
        Rng rng(99);
        ad::Graph<float> g;
        return diffusion::generate_frame<float>(g, net, 6, sub, s, rng).final_state;
    };
    model::ModelConfig mc;
    mc.hidden = 16;
    mc.blocks = 1;
    model::Denoiser<float> model(mc);
    rollout::Context ctx(4, sim::Observation(32, 0.1f));
    std::vector<sim::Action> acts(6, sim::Action{0.2, 0.1});
    auto roll = [&] { return rollout::rollout_batch<float>(model, s, sub, {ctx, ctx}, {acts, acts}, {5, 6}).data; };
    bool bitwise = frame() == frame() && roll() == roll();
    report(3, identity && worst <= 1e-5 && bitwise,
           std::string("identity ") + (identity ? "ok" : "broken") + ", oracle endpoint max err " + fmt(worst, 3) +
               " (T'=1,5,25), determinism " + (bitwise ? "bitwise" : "broken"));
}

// ---------------------------------------------------------------- 4

// Backbone hashes of the post-trained variants are compared with the Stage I
// model later, inside the ablation loop.
struct StopGradProbe {
    bool early_zero = false, late_nonzero = false, one_call = false;
};

StopGradProbe stop_gradient_probe() {
    diffusion::NoiseSchedule sched(diffusion::ScheduleKind::linear_beta, 1000);
    auto sub = diffusion::SubSchedule::evenly_spaced(1000, 5);
    Rng data(9);
    train::Segment<double> seg;
    for (int i = 0; i < 4; ++i) {
        Array<double> f({6});
        for (auto& v : f.values()) v = data.uniform(-1, 1);
        seg.context.push_back(f);
    }
    for (int i = 0; i < 6; ++i) {
        Array<double> f({6});
        for (auto& v : f.values()) v = data.uniform(-1, 1);
        seg.truth.push_back(f);
        seg.actions.push_back({0.1, 0.0});
    }
    StopGradProbe out{true, false, true};
    for (int k = 1; k <= 5; ++k) {
        ad::ParamStore<double> store;
        auto early = store.add("early", ad::Group::adaln, Array<double>({6}, 0.1));
        auto late = store.add("late", ad::Group::adaln, Array<double>({6}, 0.2));
        const int t_k = sub.step(k);
        ad::Graph<double> g;
        int calls = 0;
        train::Conditional<double> net = [&](ad::Graph<double>& gg, const Array<double>& s_t, int t,
                                             const Array<double>& ctx, const Array<double>&, sim::Action) {
            if (&gg == &g) ++calls;
            auto x = ad::add(ad::scale(gg.constant(s_t), 0.5), gg.constant(ctx));
            if (t > t_k) x = ad::mul(x, gg.param(store, early));
            return ad::tanh(ad::add(x, gg.param(store, late)));
        };
        Rng rng{std::uint64_t(k)};
        auto trace = train::acc_rollout<double>(g, net, sched, sub, seg, train::ACCConfig{}, 3, rng, k);
        g.backward(train::acc_loss<double>(g, trace, train::LossKind::l2, nullptr));
        for (double v : store[early].grad.values()) out.early_zero = out.early_zero && v == 0.0;
        for (double v : store[late].grad.values()) out.late_nonzero = out.late_nonzero || v != 0.0;
        out.one_call = out.one_call && calls == int(seg.truth.size());
        for (const auto& f : trace.frames) out.one_call = out.one_call && f.grad_calls == 1;
    }
    return out;
}

// ---------------------------------------------------------------- 5

void cem() {
    using plan::Plan;
    // -(v - 0.3)^2 with the turn rate ignored
    plan::BatchScorer quad = [](const std::vector<Plan>& c, const std::vector<std::uint64_t>&) {
        std::vector<double> out;
        for (const auto& p : c) out.push_back(-(p[0].v - 0.3) * (p[0].v - 0.3));
        return out;
    };
    plan::CEMConfig qc;
    qc.horizon = 1;
    qc.iterations = 10;
    qc.seed = 1;
    auto qr = plan::cem_plan(quad, plan::Bounds{}, qc);
    double quad_err = std::abs(qr.iterations.back().mean[0].v - 0.3);

    const std::vector<double> levels{-0.5, -0.25, 0.0, 0.25, 0.5};
    double worst_ratio = 1.0;
    bool monotone = true;
    for (std::uint64_t seed = 0; seed < 10; ++seed) {
        Rng rng(seed + 100);
        sim::Pose goal{rng.uniform(-1.2, 1.2), rng.uniform(-1.2, 1.2), 0};
        auto drive = [&](const Plan& p) {
            sim::Pose x{};
            for (const auto& a : p) x = sim::integrate(x, a);
            return -sim::distance(x, goal);
        };
        double best = -1e300, worst = 1e300;
        for (int i = 0; i < 25 * 25 * 25; ++i) {
            Plan p;
            for (int s = 0, code = i; s < 3; ++s, code /= 25)
                p.push_back({levels[std::size_t(code % 25 / 5)], levels[std::size_t(code % 5)]});
            double sc = drive(p);
            best = std::max(best, sc);
            worst = std::min(worst, sc);
        }
        plan::CEMConfig cfg;
        cfg.horizon = 3;
        cfg.iterations = 10;
        cfg.sims = 1;
        cfg.seed = seed;
        plan::BatchScorer score = [&](const std::vector<Plan>& c, const std::vector<std::uint64_t>&) {
            std::vector<double> out;
            for (const auto& p : c) out.push_back(drive(p));
            return out;
        };
        auto res = plan::cem_plan(score, plan::Bounds{}, cfg);
        worst_ratio = std::min(worst_ratio, (res.best_score - worst) / (best - worst));
        for (std::size_t i = 1; i < res.iterations.size(); ++i)
            monotone = monotone && res.iterations[i].best_score >= res.iterations[i - 1].best_score;
    }
    report(5, quad_err <= 1e-2 && worst_ratio >= 0.95 && monotone,
           "quadratic mean error " + fmt(quad_err, 3) + " after 10 iterations, grid oracle worst normalised score " +
               fmt(worst_ratio, 4) + " over 10 seeds, best score " + (monotone ? "monotone" : "NOT monotone"));
}

// ---------------------------------------------------------------- 11

void metric_oracles() {
    using sim::Pose;
    std::vector<Pose> gt{{0, 0, 0}, {1, 0, 0}};
    bool zero = metrics::ate(gt, gt) == 0.0 && metrics::rpe(gt, gt) == 0.0;
    double e1 = std::abs(metrics::ate({{0, 0, 0}, {1, 1, 0}}, gt) - 0.70710678118654752);
    double e2 = std::abs(metrics::rpe({{0, 0, 0}, {0, 1, 0}}, gt) - 1.4142135623730951);
    double e3 = std::abs(metrics::rpe({{0, 0, sim::kPi / 2}, {0, 1, sim::kPi / 2}}, gt));
    double hand = std::max({e1, e2, e3});

    perceptual::Embedder emb(32, 3);
    Rng rng(5);
    std::vector<std::vector<float>> set;
    for (int i = 0; i < 200; ++i) {
        std::vector<float> v(32);
        for (auto& x : v) x = float(rng.uniform(-1, 1));
        set.push_back(v);
    }
    double ffd_same = perceptual::frechet_feature_distance(emb, set, set);

    const int k = 4, n = 2000;
    Eigen::VectorXd mu2(k);
    mu2 << 1, -0.5, 0.25, 0;
    Eigen::MatrixXd A2(k, k);
    A2 << 1.5, 0.2, 0, 0, 0, 0.8, 0.1, 0, 0, 0, 1.2, 0.3, 0.1, 0, 0, 0.6;
    Eigen::MatrixXd S2 = A2 * A2.transpose();
    // first distribution is standard normal, so the cross term is tr(S2^(1/2))
    double closed = mu2.squaredNorm() + k + S2.trace() - 2 * perceptual::detail::psd_sqrt(S2).trace();
    Rng g(6);
    Eigen::MatrixXd X(n, k), Y(n, k);
    for (int i = 0; i < n; ++i) {
        Eigen::VectorXd z1(k), z2(k);
        for (int j = 0; j < k; ++j) z1(j) = g.normal(), z2(j) = g.normal();
        X.row(i) = z1.transpose();
        Y.row(i) = (mu2 + A2 * z2).transpose();
    }
    double est = perceptual::frechet_distance(perceptual::feature_stats(X), perceptual::feature_stats(Y));
    double rel = std::abs(est - closed) / closed;
    report(11, zero && hand <= 1e-9 && ffd_same <= 1e-8 && rel <= 0.05,
           std::string("ATE/RPE identical ") + (zero ? "0" : "nonzero") + ", hand cases max err " + fmt(hand, 3) +
               ", FFD identical " + fmt(ffd_same, 3) + ", Gaussian closed form rel err " + fmt(rel, 3));
}

// ---------------------------------------------------------------- 12

int run_cli(const std::string& args) {
    std::string cmd = std::string(MWM_CLI_PATH) + " " + args + " 2>/dev/null";
    int status = std::system(cmd.c_str());
    return WIFEXITED(status) ? WEXITSTATUS(status) : -1;
}

std::string slurp(const fs::path& p) {
    std::ifstream is(p, std::ios::binary);
    std::ostringstream ss;
    ss << is.rdbuf();
    return ss.str();
}

std::string drop_last_column(const std::string& csv) {
    std::istringstream in(csv);
    std::ostringstream out;
    std::string line;
    while (std::getline(in, line)) out << line.substr(0, line.rfind(',')) << '\n';
    return out.str();
}

void reproducibility(const fs::path& out) {
    const auto cfg = (fs::path(MWM_SOURCE_DIR) / "configs" / "smoke.json").string();
    const auto work = out / "repro";
    fs::remove_all(work);
    bool ran = true;
    for (const char* keep : {"first", "second"}) {
        for (const char* cmd :
             {"gen-data", "train-stage1", "posttrain-acc", "rollout-eval", "plan-bench", "ablate", "report"})
            ran = ran && run_cli(std::string(cmd) + " --config " + cfg + " --seed 2 --out " + (work / "run").string()) == 0;
        fs::rename(work / "run", work / keep);
    }
    int files = 0, differing = 0;
    std::string first_diff;
    if (ran) {
        for (const auto& e : fs::directory_iterator(work / "first")) {
            const auto name = e.path().filename().string();
            auto a = slurp(e.path()), b = slurp(work / "second" / name);
            // loss curves end with a wall-clock column
            if (name.find("_loss.csv") != std::string::npos) a = drop_last_column(a), b = drop_last_column(b);
            ++files;
            if (a != b) {
                ++differing;
                if (first_diff.empty()) first_diff = name;
            }
        }
    }
    report(12, ran && files > 0 && differing == 0,
           ran ? std::to_string(files) + " artifacts from all 7 commands compared, " + std::to_string(differing) +
                     " differ" + (first_diff.empty() ? "" : " (first: " + first_diff + ")")
               : "a command failed");
}

// ---------------------------------------------------------------- 6-10

struct SeedResult {
    exp::AblationTables tables;
    exp::Pipeline::Benchmark random, stage1, full;
    bool backbone_frozen = false;
};

double row(const std::vector<exp::AblationRow>& rows, const std::string& label) {
    for (const auto& r : rows)
        if (r.label == label) return r.perceptual;
    throw RuntimeError("acceptance: missing ablation row " + label);
}

void heavy(int seeds, const fs::path& out, const StopGradProbe& probe) {
    const auto cfg_path = fs::path(MWM_SOURCE_DIR) / "configs" / "default.json";
    std::ifstream is(cfg_path);
    auto base = nlohmann::json::parse(is);
    std::vector<SeedResult> results;
    double train_eval_secs = 0, plan_secs = 0;
    for (int seed = 0; seed < seeds; ++seed) {
        auto j = base;
        j["master_seed"] = seed;
        const auto cfg = config::from_json(j);
        auto t0 = Clock::now();
        exp::Pipeline p(cfg);
        auto v = exp::train_variants(p);
        SeedResult r;
        exp::evaluate_variants(p, v, r.tables);
        train_eval_secs += seconds_since(t0);
        const auto bb = ad::GroupMask::only(ad::Group::backbone);
        const auto h = ckpt::params_hash(v.stage1.params(), bb);
        r.backbone_frozen = ckpt::params_hash(v.full.params(), bb) == h &&
                            ckpt::params_hash(v.x0hat.params(), bb) == h &&
                            ckpt::params_hash(v.l1.params(), bb) == h && ckpt::params_hash(v.l2.params(), bb) == h;
        auto t1 = Clock::now();
        r.random = p.plan_bench(nullptr);
        r.stage1 = p.plan_bench(&v.stage1);
        r.full = p.plan_bench(&v.full);
        plan_secs += seconds_since(t1);
        std::cout << "  seed " << seed << ": full " << fmt(row(r.tables.paradigm, exp::kLabelBoth)) << ", stage I "
                  << fmt(row(r.tables.paradigm, exp::kLabelStructure)) << ", SR full/stage I/random "
                  << r.full.sr << "/" << r.stage1.sr << "/" << r.random.sr << " ("
                  << fmt(train_eval_secs + plan_secs, 4) << " s elapsed)" << std::endl;
        results.push_back(std::move(r));
    }

    fs::create_directories(out);
    const int hz = 16;
    auto write = [&](const char* file, const char* col, std::vector<exp::AblationRow> exp::AblationTables::*member) {
        std::vector<exp::AblationRow> rows;
        for (const auto& r : results) rows.insert(rows.end(), (r.tables.*member).begin(), (r.tables.*member).end());
        std::ofstream os(out / file);
        exp::write_ablation_csv(os, col, rows, hz);
    };
    write("table_iv_loss.csv", "loss", &exp::AblationTables::loss);
    write("table_v_paradigm.csv", "paradigm", &exp::AblationTables::paradigm);
    write("table_vi_context.csv", "context", &exp::AblationTables::context);
    write("table_steps.csv", "sampler", &exp::AblationTables::steps);

    int full_beats_s1 = 0, acc_only_worst = 0, icsd_wins = 0, few_beats_few = 0, few_near_many = 0, loss_order = 0;
    bool frozen = true;
    std::vector<double> perc, l1v, l2v;
    for (const auto& r : results) {
        const auto& t = r.tables;
        double full = row(t.paradigm, exp::kLabelBoth), s1 = row(t.paradigm, exp::kLabelStructure);
        double acc_only = row(t.paradigm, exp::kLabelAccOnly);
        full_beats_s1 += full < s1;
        acc_only_worst += acc_only > full && acc_only > s1;
        icsd_wins += row(t.context, exp::kLabelIcsd) <= row(t.context, exp::kLabelX0hat);
        double s1_many = t.steps[1].perceptual;
        few_beats_few += full < s1;
        few_near_many += full <= 1.1 * s1_many;
        double lp = row(t.loss, exp::kLabelPerceptual), ll1 = row(t.loss, exp::kLabelL1), ll2 = row(t.loss, exp::kLabelL2);
        loss_order += lp <= ll1 && ll1 <= ll2;
        perc.push_back(lp);
        l1v.push_back(ll1);
        l2v.push_back(ll2);
        frozen = frozen && r.backbone_frozen;
    }
    const int need = (4 * seeds + 4) / 5;  // 4 of 5
    auto frac = [&](int k) { return std::to_string(k) + "/" + std::to_string(seeds); };

    report(4, probe.early_zero && probe.late_nonzero && probe.one_call && frozen,
           std::string("pre-truncation parameter gradient ") + (probe.early_zero ? "zero" : "NONZERO") +
               ", one gradient-bearing call per frame " + (probe.one_call ? "yes" : "no") +
               ", backbone hash unchanged through ACC in all variants " + (frozen ? "yes" : "no"));
    report(6, full_beats_s1 >= need && acc_only_worst >= need && train_eval_secs <= 1800,
           "stage I + ACC < stage I on " + frac(full_beats_s1) + ", ACC-only worst on " + frac(acc_only_worst) +
               ", train+eval " + fmt(train_eval_secs / 60, 3) + " min");
    report(7, icsd_wins >= need, "icsd <= x0hat on " + frac(icsd_wins));
    report(8, few_beats_few >= need && few_near_many >= need,
           "ACC DDIM-5 < stage I DDIM-5 on " + frac(few_beats_few) + ", within 10% of stage I DDIM-25 on " +
               frac(few_near_many));
    std::string per_seed;
    for (std::size_t i = 0; i < perc.size(); ++i)
        per_seed += (i ? "; " : "") + fmt(perc[i], 3) + "/" + fmt(l1v[i], 3) + "/" + fmt(l2v[i], 3);
    report(9, loss_order >= need,
           "perceptual <= l1 <= l2 on " + frac(loss_order) + " (perceptual/l1/l2 per seed: " + per_seed + ")");

    double sr[3] = {0, 0, 0}, ne[3] = {0, 0, 0};
    for (const auto& r : results) {
        const exp::Pipeline::Benchmark* b[3] = {&r.random, &r.stage1, &r.full};
        for (int i = 0; i < 3; ++i) sr[i] += b[i]->sr / seeds, ne[i] += b[i]->ne / seeds;
    }
    {
        std::ofstream os(out / "planning.csv");
        os << "planner,seed,sr,ne,ate,rpe\n";
        for (std::size_t s = 0; s < results.size(); ++s) {
            const auto& r = results[s];
            for (auto [name, b] : {std::pair{"random", &r.random}, {"stage1", &r.stage1}, {"full", &r.full}})
                os << name << ',' << s << ',' << metrics::fmt_num(b->sr) << ',' << metrics::fmt_num(b->ne) << ','
                   << metrics::fmt_num(b->ate) << ',' << metrics::fmt_num(b->rpe) << '\n';
        }
    }
    report(10, sr[2] > sr[0] && sr[2] > sr[1] && ne[2] < ne[0] && ne[2] < ne[1] && plan_secs <= 1200,
           "SR full/stage I/random " + fmt(sr[2], 3) + "/" + fmt(sr[1], 3) + "/" + fmt(sr[0], 3) + ", NE " +
               fmt(ne[2], 3) + "/" + fmt(ne[1], 3) + "/" + fmt(ne[0], 3) + " m, planning " + fmt(plan_secs / 60, 3) +
               " min");
}

}  // namespace

int main(int argc, char** argv) {
    int seeds = 5;
    bool strict = false;
    fs::path out = "acceptance_out";
    for (int i = 1; i < argc; ++i) {
        std::string a = argv[i];
        if (a == "--seeds" && i + 1 < argc) seeds = std::atoi(argv[++i]);
        else if (a == "--out" && i + 1 < argc) out = argv[++i];
        else if (a == "--strict") strict = true;
        else {
            std::cerr << "usage: acceptance [--seeds N] [--out DIR] [--strict]\n";
            return 2;
        }
    }
    if (seeds < 1) {
        std::cerr << "acceptance: --seeds must be >= 1\n";
        return 2;
    }
    try {
        auto t0 = Clock::now();
        gradients();
        noising();
        ddim_algebra();
        auto probe = stop_gradient_probe();
        cem();
        metric_oracles();
        reproducibility(out);
        heavy(seeds, out, probe);
        std::sort(verdicts.begin(), verdicts.end(), [](const Verdict& a, const Verdict& b) { return a.id < b.id; });
        int passed = 0;
        std::cout << "\nsummary (" << fmt(seconds_since(t0) / 60, 3) << " min)\n";
        for (const auto& v : verdicts) {
            std::cout << "criterion " << v.id << ": " << (v.pass ? "PASS" : "FAIL") << '\n';
            passed += v.pass;
        }
        std::cout << passed << "/" << verdicts.size() << " criteria pass" << std::endl;
        return strict && passed != int(verdicts.size()) ? 1 : 0;
    } catch (const std::exception& e) {
        std::cerr << "acceptance: " << e.what() << '\n';
        return 1;
    }
}
