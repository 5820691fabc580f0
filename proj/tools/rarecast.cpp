// rarecast: rare-event probability estimation for a 2D highway simulator.
//
// Subcommands: naive (plain Monte Carlo), ce (cross-entropy search for an
// importance sampler), eval (importance-sampling estimate from learned
// parameters), compare (rare-event and variance ratios), required-n (sample
// size for a target relative accuracy), fit-policy (reference driver weights),
// rollout (single trajectory with optional trace), worker (rollout worker
// process), table (render a CSV).
//
// Exit codes: 0 success, 1 input or data error, 2 usage error, 3 the search
// stalled in every iteration.

#include <unistd.h>

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <memory>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "rarecast/ce.hpp"
#include "rarecast/csv.hpp"
#include "rarecast/manifest.hpp"
#include "rarecast/orchestrator.hpp"
#include "rarecast/policy_fit.hpp"
#include "rarecast/rollout.hpp"
#include "rarecast/scenario.hpp"

namespace {

using namespace rarecast;
namespace fs = std::filesystem;

constexpr int kExitOk = 0;
constexpr int kExitData = 1;
constexpr int kExitUsage = 2;
constexpr int kExitStall = 3;

std::string self_executable() {
    char buf[4096];
    const ssize_t n = ::readlink("/proc/self/exe", buf, sizeof buf - 1);
    if (n <= 0) return "rarecast";
    buf[n] = '\0';
    return buf;
}

std::string join_command_line(int argc, char** argv) {
    std::string s;
    for (int i = 0; i < argc; ++i) {
        if (i) s += ' ';
        s += argv[i];
    }
    return s;
}

std::vector<double> parse_real_list(const std::string& text) {
    std::vector<double> out;
    std::stringstream ss(text);
    std::string item;
    while (std::getline(ss, item, ',')) {
        std::size_t pos = 0;
        const double v = std::stod(item, &pos);
        if (pos != item.size()) throw std::invalid_argument("not a number: '" + item + "'");
        out.push_back(v);
    }
    if (out.empty()) throw std::invalid_argument("empty list");
    return out;
}

std::vector<double> flatten_theta(const expfam::ParamPoint& theta) {
    std::vector<double> out;
    for (const auto& b : theta.blocks) {
        if (const auto* beta = std::get_if<expfam::BetaParams>(&b)) {
            out.push_back(beta->alpha);
            out.push_back(beta->beta);
        } else {
            const auto& g = std::get<expfam::GaussianParams>(b);
            out.insert(out.end(), g.mu.begin(), g.mu.end());
        }
    }
    return out;
}

/// Scenario- or toy-backed execution context: the family, its base point and
/// a rollout provider (in-process serial for --workers 0, a socket pool with
/// spawned worker processes otherwise).
struct Engine {
    expfam::FamilySpec family;
    expfam::ParamPoint theta0;
    std::string hash_hex;
    std::unique_ptr<sim::ScenarioRuntime> runtime;
    std::unique_ptr<RolloutProvider> serial;
    std::unique_ptr<orch::WorkerPool> pool;

    RolloutProvider& provider() { return pool ? *pool : *serial; }
};

Engine make_engine(const std::string& scenario_path, bool toy, std::size_t workers,
                   std::uint16_t listen_port = 0, std::size_t external_workers = 0) {
    Engine e;
    if (toy) {
        e.family = ce::toy_gaussian_family();
        e.theta0 = ce::toy_gaussian_theta0();
        e.hash_hex = "toy-gaussian";
        e.serial = std::make_unique<ce::ToyGaussianRunner>();
        return e;
    }
    if (scenario_path.empty())
        throw CLI::ValidationError("--scenario is required unless --toy-gaussian is given");
    auto spec = scenario::load(scenario_path);
    e.runtime = std::make_unique<sim::ScenarioRuntime>(std::move(spec));
    e.family = e.runtime->family();
    e.theta0 = e.runtime->theta0();
    e.hash_hex = sha256::hex(e.runtime->hash());
    if (workers == 0 && external_workers == 0) {
        e.serial = std::make_unique<SerialRunner>(e.runtime->task_fn());
    } else {
        orch::PoolConfig cfg;
        cfg.scenario_hash = e.runtime->hash();
        cfg.port = listen_port;
        e.pool = std::make_unique<orch::WorkerPool>(cfg);
        if (workers > 0) {
            const std::vector<std::string> argv = {
                self_executable(), "worker", "--endpoint", "127.0.0.1:{port}",
                "--scenario",      scenario_path};
            e.pool->spawn(argv, workers);
        }
        if (external_workers > 0)
            std::fprintf(stderr, "waiting for %zu worker(s) on 127.0.0.1:%u\n", external_workers,
                         e.pool->port());
        e.pool->wait_for_workers(workers + external_workers);
    }
    return e;
}

void write_reports(const std::string& path, const std::vector<ce::EstimateReport>& reports,
                   bool with_ess) {
    csv::Writer w(path);
    std::vector<std::string> header = {"gamma_test", "p_hat", "std_err", "rare_count", "n"};
    if (with_ess) header.push_back("ess");
    w.header(header);
    for (const auto& r : reports) {
        std::vector<std::string> row = {csv::real17(r.gamma_test), csv::real17(r.p_hat),
                                        csv::real17(r.std_err), std::to_string(r.rare_count),
                                        std::to_string(r.n)};
        if (with_ess) row.push_back(csv::real17(r.ess));
        w.line(row);
    }
}

/// ce_history.csv: one row per iteration with the iterate, level, quantile,
/// rare count, weight diagnostics and the raw weighted-statistic estimate.
class HistoryWriter {
  public:
    HistoryWriter(const std::string& path, const expfam::FamilySpec& family)
        : writer_(path), theta_len_(flatten_len(family)), d_len_(family.stat_dim()) {
        std::vector<std::string> h = {"iter",       "gamma_k", "rho_quantile",
                                      "rare_count", "elite_mass", "ess",
                                      "w_max",      "w_min",   "stalled"};
        for (std::size_t i = 0; i < theta_len_; ++i) h.push_back("theta_" + std::to_string(i));
        for (std::size_t i = 0; i < d_len_; ++i) h.push_back("d_" + std::to_string(i));
        writer_.header(h);
    }

    void row(std::size_t iter, const ce::IterationRecord& rec) {
        std::vector<std::string> cells = {std::to_string(iter),
                                          csv::real17(rec.gamma_k),
                                          csv::real17(rec.rho_quantile),
                                          std::to_string(rec.rare_count),
                                          csv::real17(rec.elite_mass),
                                          csv::real17(rec.weights.ess),
                                          csv::real17(rec.weights.max_w),
                                          csv::real17(rec.weights.min_w),
                                          rec.stalled ? "1" : "0"};
        append_reals(cells, flatten_theta(rec.theta));
        append_reals(cells, rec.d);
        writer_.line(cells);
    }

    /// For runs with zero iterations: the base point and empty statistics.
    void theta0_row(const expfam::ParamPoint& theta0) {
        std::vector<std::string> cells = {"0", "nan", "nan", "0", "nan", "nan", "nan", "nan", "0"};
        append_reals(cells, flatten_theta(theta0));
        for (std::size_t i = 0; i < d_len_; ++i) cells.push_back("nan");
        writer_.line(cells);
    }

  private:
    static std::size_t flatten_len(const expfam::FamilySpec& family) {
        std::size_t n = 0;
        for (const auto& b : family.blocks)
            n += std::holds_alternative<expfam::BetaBlock>(b)
                     ? 2
                     : std::get<expfam::GaussianBlock>(b).dim;
        return n;
    }
    void append_reals(std::vector<std::string>& cells, const std::vector<double>& values) {
        for (double v : values) cells.push_back(csv::real17(v));
    }

    csv::Writer writer_;
    std::size_t theta_len_;
    std::size_t d_len_;
};

struct CommonFlags {
    std::string scenario_path;
    bool toy = false;
    std::size_t workers = 0;
    std::uint16_t listen_port = 0;
    std::size_t external_workers = 0;
    std::uint64_t seed = 0;
    std::string out_dir = ".";
};

void add_common(CLI::App* cmd, CommonFlags& f, bool with_workers = true) {
    cmd->add_option("--scenario", f.scenario_path, "scenario file (.scn)");
    cmd->add_flag("--toy-gaussian", f.toy,
                  "use the 1-D standard-normal benchmark with f(x) = x instead of the simulator");
    if (with_workers) {
        const char* env = std::getenv("RARECAST_WORKERS");
        if (env) f.workers = static_cast<std::size_t>(std::stoul(env));
        cmd->add_option("--workers", f.workers,
                        "worker processes (0 = in-process serial execution)");
        cmd->add_option("--listen", f.listen_port,
                        "controller port for externally launched workers (0 = ephemeral)");
        cmd->add_option("--external-workers", f.external_workers,
                        "wait for this many externally launched workers");
    }
    cmd->add_option("--seed", f.seed, "base seed for all randomness");
    cmd->add_option("--out", f.out_dir, "output directory")->capture_default_str();
}

nlohmann::json common_config(const CommonFlags& f) {
    return {{"scenario", f.scenario_path},
            {"toy_gaussian", f.toy},
            {"workers", f.workers},
            {"out", f.out_dir}};
}

int run_naive(const CommonFlags& flags, std::size_t n, const std::string& gamma_text,
              const std::string& command_line) {
    const auto gammas = parse_real_list(gamma_text);
    auto engine = make_engine(flags.scenario_path, flags.toy, flags.workers,
                              flags.listen_port, flags.external_workers);
    fs::create_directories(flags.out_dir);
    auto config = common_config(flags);
    config["n"] = n;
    config["gamma_test"] = gammas;
    manifest::RunManifest man((fs::path(flags.out_dir) / "manifest.json").string(), command_line,
                              engine.hash_hex, config, flags.seed);
    const auto csv_path = (fs::path(flags.out_dir) / "naive.csv").string();
    man.add_output("naive.csv");
    const auto reports =
        ce::estimate_naive(engine.family, engine.theta0, n, gammas, engine.provider(), flags.seed);
    write_reports(csv_path, reports, false);
    man.finalize();
    return kExitOk;
}

int run_ce_cmd(const CommonFlags& flags, const ce::CEConfig& config,
               const std::string& command_line) {
    auto engine = make_engine(flags.scenario_path, flags.toy, flags.workers,
                              flags.listen_port, flags.external_workers);
    fs::create_directories(flags.out_dir);
    auto cfg_json = common_config(flags);
    cfg_json["rho"] = config.rho;
    cfg_json["iterations"] = config.iterations;
    cfg_json["n_k"] = config.n_k;
    cfg_json["alpha"] = config.alpha;
    cfg_json["gamma"] = config.gamma;
    manifest::RunManifest man((fs::path(flags.out_dir) / "manifest.json").string(), command_line,
                              engine.hash_hex, cfg_json, flags.seed);
    man.add_output("ce_history.csv");
    man.add_output("theta_ce.params");

    HistoryWriter history_csv((fs::path(flags.out_dir) / "ce_history.csv").string(),
                              engine.family);
    ce::CEHistory history;
    try {
        history = ce::run_ce(engine.family, engine.theta0, config, engine.provider(),
                             [&](std::size_t k, const ce::IterationRecord& rec) {
                                 history_csv.row(k, rec);
                             });
    } catch (const orch::pool_error& e) {
        std::cerr << "rarecast ce: aborted, partial history kept: " << e.what() << "\n";
        man.finalize();
        return kExitData;
    }
    if (history.iterations.empty()) history_csv.theta0_row(engine.theta0);

    const auto& theta_ce = ce::select_best(history);
    scenario::write_theta_file((fs::path(flags.out_dir) / "theta_ce.params").string(), theta_ce);
    man.finalize();

    if (!history.iterations.empty() && history.stall_count() == history.iterations.size()) {
        std::cerr << "rarecast ce: every iteration stalled (no sample reached the level; "
                     "gamma may be unreachable at these sample sizes)\n";
        return kExitStall;
    }
    return kExitOk;
}

int run_eval(const CommonFlags& flags, const std::string& theta_path, std::size_t n,
             const std::string& gamma_text, const std::string& command_line) {
    const auto gammas = parse_real_list(gamma_text);
    auto engine = make_engine(flags.scenario_path, flags.toy, flags.workers,
                              flags.listen_port, flags.external_workers);
    const auto theta_ce = scenario::read_theta_file(theta_path);
    try {
        expfam::check_match(engine.family, theta_ce);
    } catch (const std::invalid_argument& e) {
        std::cerr << "rarecast eval: theta file " << theta_path
                  << " does not fit the scenario family: " << e.what() << "\n";
        return kExitData;
    }
    fs::create_directories(flags.out_dir);
    auto config = common_config(flags);
    config["n"] = n;
    config["gamma_test"] = gammas;
    config["theta"] = theta_path;
    manifest::RunManifest man((fs::path(flags.out_dir) / "manifest.json").string(), command_line,
                              engine.hash_hex, config, flags.seed);
    man.add_output("is.csv");
    const auto reports = ce::estimate_is(engine.family, engine.theta0, theta_ce, n, gammas,
                                         engine.provider(), flags.seed);
    write_reports((fs::path(flags.out_dir) / "is.csv").string(), reports, true);
    man.finalize();
    return kExitOk;
}

std::vector<ce::EstimateReport> reports_from_csv(const std::string& path,
                                                 const std::string& method) {
    const auto table = csv::read(path);
    std::vector<ce::EstimateReport> out;
    for (std::size_t r = 0; r < table.rows.size(); ++r) {
        ce::EstimateReport rep;
        rep.gamma_test = csv::cell_real(table, r, "gamma_test");
        rep.p_hat = csv::cell_real(table, r, "p_hat");
        rep.std_err = csv::cell_real(table, r, "std_err");
        rep.rare_count = static_cast<std::size_t>(csv::cell_real(table, r, "rare_count"));
        rep.n = static_cast<std::size_t>(csv::cell_real(table, r, "n"));
        rep.method = method;
        out.push_back(rep);
    }
    return out;
}

int run_compare(const std::string& is_path, const std::string& naive_path,
                const std::string& out_dir, const std::string& command_line) {
    const auto is_reports = reports_from_csv(is_path, "cross-entropy");
    const auto naive_reports = reports_from_csv(naive_path, "naive");
    std::vector<ce::CompareRow> rows;
    try {
        rows = ce::compare_report(is_reports, naive_reports);
    } catch (const std::invalid_argument& e) {
        std::cerr << "rarecast compare: " << e.what() << "\n";
        return kExitData;
    }
    fs::create_directories(out_dir);
    manifest::RunManifest man((fs::path(out_dir) / "manifest.json").string(), command_line, "",
                              {{"is", is_path}, {"naive", naive_path}}, 0);
    man.add_output("compare.csv");
    man.add_output("compare.txt");
    {
        csv::Writer w((fs::path(out_dir) / "compare.csv").string());
        w.header({"gamma_test", "rare_ratio", "variance_ratio"});
        for (const auto& row : rows)
            w.line({csv::real17(row.gamma_test), csv::real17(row.rare_ratio),
                    csv::real17(row.variance_ratio)});
    }
    {
        std::ofstream txt((fs::path(out_dir) / "compare.txt").string());
        txt << "threshold   rare-event ratio (IS/naive)   variance ratio (naive/IS)\n";
        for (const auto& row : rows) {
            char buf[128];
            std::snprintf(buf, sizeof buf, "%-11.6g %-29.6g %.6g\n", row.gamma_test,
                          row.rare_ratio, row.variance_ratio);
            txt << buf;
        }
    }
    man.finalize();
    return kExitOk;
}

int run_rollout(const std::string& scenario_path, std::uint64_t seed,
                const std::string& theta_path, const std::string& trace_path) {
    const auto spec = scenario::load(scenario_path);
    const sim::ScenarioRuntime runtime(spec);
    expfam::ParamPoint theta = runtime.theta0();
    if (!theta_path.empty()) {
        theta = scenario::read_theta_file(theta_path);
        expfam::check_match(runtime.family(), theta);
    }
    const auto sample = expfam::sample(runtime.family(), theta, seed);
    std::vector<sim::TraceRow> trace;
    auto ego = sim::make_ego_policy(spec);
    const auto result =
        sim::rollout(sample, spec, runtime.family(), runtime.theta0(), *ego, seed,
                     trace_path.empty() ? nullptr : &trace);
    if (!trace_path.empty()) {
        csv::Writer w(trace_path);
        w.header({"step", "vehicle", "x", "y", "heading", "speed"});
        for (const auto& row : trace)
            w.line({std::to_string(row.step), std::to_string(row.vehicle), csv::real17(row.x),
                    csv::real17(row.y), csv::real17(row.heading), csv::real17(row.speed)});
    }
    std::printf("min_ttc=%.17g crashed=%d crash_step=%lld steps=%llu log_p0=%.17g seed=%llu\n",
                result.min_ttc, result.crashed ? 1 : 0,
                static_cast<long long>(result.crash_step),
                static_cast<unsigned long long>(result.steps), result.log_p0,
                static_cast<unsigned long long>(result.seed));
    return kExitOk;
}

int run_worker(const std::string& endpoint, const std::string& scenario_path,
               std::size_t fail_after) {
    const auto colon = endpoint.rfind(':');
    if (colon == std::string::npos)
        throw CLI::ValidationError("--endpoint must look like host:port");
    const std::string host = endpoint.substr(0, colon);
    const auto port = static_cast<std::uint16_t>(std::stoul(endpoint.substr(colon + 1)));
    const auto spec = scenario::load(scenario_path);
    const sim::ScenarioRuntime runtime(spec);
    orch::WorkerOptions opts;
    opts.fail_after = fail_after;
    orch::worker_loop(host, port, runtime.hash(),
                      [&](const Task& t) { return runtime.execute(t); }, opts);
    return kExitOk;
}

int run_fit_policy(std::size_t beams, const std::string& out_prefix, double lane_width,
                   std::size_t lane_count, double max_range, std::size_t samples,
                   std::uint64_t seed) {
    policy_fit::FitConfig cfg;
    cfg.fan_beams = beams;
    cfg.road.lane_width_m = lane_width;
    cfg.road.lane_count = lane_count;
    cfg.max_range = max_range;
    cfg.samples = samples;
    cfg.seed = seed;
    const auto fit = policy_fit::fit_reference_policy(cfg);
    const std::size_t d = fit.mu0.size();
    scenario::write_vector_file(out_prefix + "_mu0.bin", fit.mu0);
    scenario::write_chol_file(out_prefix + "_sigma0.bin", fit.sigma_chol, d);
    std::printf("wrote %s_mu0.bin and %s_sigma0.bin (dim %zu, residual sd accel %.4g, steer %.4g)\n",
                out_prefix.c_str(), out_prefix.c_str(), d, fit.residual_sd_accel,
                fit.residual_sd_steer);
    return kExitOk;
}

}  // namespace

int main(int argc, char** argv) {
    const std::string command_line = join_command_line(argc, argv);
    CLI::App app{"rare-event probability estimation for a 2D highway simulator"};
    app.require_subcommand(1);

    // naive ------------------------------------------------------------------
    auto* naive = app.add_subcommand("naive", "plain Monte Carlo estimate of p_gamma");
    CommonFlags naive_flags;
    std::size_t naive_n = 10000;
    std::string naive_gammas;
    add_common(naive, naive_flags);
    naive->add_option("--n", naive_n, "number of rollouts")->capture_default_str();
    naive->add_option("--gamma-test", naive_gammas, "comma-separated thresholds")->required();

    // ce ---------------------------------------------------------------------
    auto* cecmd = app.add_subcommand("ce", "cross-entropy search for an importance sampler");
    CommonFlags ce_flags;
    ce::CEConfig ce_config;
    double ce_alpha = 0.8;
    std::size_t ce_nk = 5000;
    cecmd->add_option("--rho", ce_config.rho, "elite quantile level in (0,1)")
        ->capture_default_str();
    cecmd->add_option("--iterations,-K", ce_config.iterations, "iteration count")
        ->capture_default_str();
    cecmd->add_option("--nk", ce_nk, "samples per iteration")->capture_default_str();
    cecmd->add_option("--alpha", ce_alpha, "smoothing step size in (0,1]")->capture_default_str();
    cecmd->add_option("--gamma", ce_config.gamma, "rare-event threshold on f")
        ->capture_default_str();
    add_common(cecmd, ce_flags);

    // eval -------------------------------------------------------------------
    auto* eval = app.add_subcommand("eval", "importance-sampling estimate with learned theta");
    CommonFlags eval_flags;
    std::string eval_theta;
    std::size_t eval_n = 10000;
    std::string eval_gammas;
    add_common(eval, eval_flags);
    eval->add_option("--theta", eval_theta, "theta parameter file from 'ce'")->required();
    eval->add_option("--n", eval_n, "number of rollouts")->capture_default_str();
    eval->add_option("--gamma-test", eval_gammas, "comma-separated thresholds")->required();

    // compare ----------------------------------------------------------------
    auto* compare = app.add_subcommand("compare", "rare-event and variance ratios");
    std::string cmp_is, cmp_naive, cmp_out = ".";
    compare->add_option("--is", cmp_is, "is.csv from 'eval'")->required();
    compare->add_option("--naive", cmp_naive, "naive.csv from 'naive'")->required();
    compare->add_option("--out", cmp_out, "output directory")->capture_default_str();

    // required-n ---------------------------------------------------------------
    auto* reqn = app.add_subcommand("required-n",
                                    "samples needed for a relative accuracy at a probability");
    double req_p = 1e-5, req_eps = 0.1;
    reqn->add_option("--p", req_p, "rare-event probability")->capture_default_str();
    reqn->add_option("--eps", req_eps, "target relative accuracy")->capture_default_str();

    // fit-policy ---------------------------------------------------------------
    auto* fit = app.add_subcommand("fit-policy", "fit the reference driver weights");
    std::size_t fit_beams = 5, fit_samples = 4096, fit_lanes = 6;
    std::string fit_prefix = "policy";
    double fit_lane_width = 3.7, fit_max_range = 100.0;
    std::uint64_t fit_seed = 20240401;
    fit->add_option("--beams", fit_beams, "policy fan beams")->capture_default_str();
    fit->add_option("--out-prefix", fit_prefix, "output file prefix")->capture_default_str();
    fit->add_option("--lane-width", fit_lane_width, "lane width in meters")->capture_default_str();
    fit->add_option("--lane-count", fit_lanes, "lane count")->capture_default_str();
    fit->add_option("--max-range", fit_max_range, "lidar range in meters")->capture_default_str();
    fit->add_option("--samples", fit_samples, "fit sample count")->capture_default_str();
    fit->add_option("--seed", fit_seed, "fit seed")->capture_default_str();

    // rollout ------------------------------------------------------------------
    auto* roll = app.add_subcommand("rollout", "run one rollout, optionally tracing states");
    std::string roll_scenario, roll_theta, roll_trace;
    std::uint64_t roll_seed = 0;
    roll->add_option("--scenario", roll_scenario, "scenario file")->required();
    roll->add_option("--seed", roll_seed, "sample seed")->capture_default_str();
    roll->add_option("--theta", roll_theta, "sample from this theta instead of the base");
    roll->add_option("--trace", roll_trace, "write a per-step state CSV here");

    // worker -------------------------------------------------------------------
    auto* worker = app.add_subcommand("worker", "serve rollouts to a controller");
    std::string worker_endpoint, worker_scenario;
    std::size_t worker_fail_after = 0;
    if (const char* env = std::getenv("RARECAST_ENDPOINT")) worker_endpoint = env;
    worker->add_option("--endpoint", worker_endpoint, "controller host:port");
    worker->add_option("--scenario", worker_scenario, "scenario file")->required();
    worker->add_option("--fail-after", worker_fail_after,
                       "exit abruptly after this many tasks (fault-injection testing)");

    // table --------------------------------------------------------------------
    auto* table = app.add_subcommand("table", "render a CSV as aligned text");
    std::string table_csv;
    table->add_option("--csv", table_csv, "CSV file")->required();

    try {
        app.parse(argc, argv);
    } catch (const CLI::CallForHelp& e) {
        return app.exit(e);
    } catch (const CLI::CallForAllHelp& e) {
        return app.exit(e);
    } catch (const CLI::ParseError& e) {
        std::cerr << "rarecast: " << e.what() << "\n";
        return kExitUsage;
    }

    try {
        if (*naive) {
            if (naive_n < 1) {
                std::cerr << "rarecast naive: n must be >= 1\n";
                return kExitUsage;
            }
            return run_naive(naive_flags, naive_n, naive_gammas, command_line);
        }
        if (*cecmd) {
            if (!(ce_config.rho > 0.0 && ce_config.rho < 1.0)) {
                std::cerr << "rarecast ce: rho must lie in (0,1)\n";
                return kExitUsage;
            }
            if (!(ce_alpha > 0.0 && ce_alpha <= 1.0)) {
                std::cerr << "rarecast ce: alpha must lie in (0,1]\n";
                return kExitUsage;
            }
            if (ce_nk < 1) {
                std::cerr << "rarecast ce: nk must be >= 1\n";
                return kExitUsage;
            }
            ce_config.alpha = {ce_alpha};
            ce_config.n_k = {ce_nk};
            ce_config.seed = ce_flags.seed;
            return run_ce_cmd(ce_flags, ce_config, command_line);
        }
        if (*eval) {
            if (eval_n < 1) {
                std::cerr << "rarecast eval: n must be >= 1\n";
                return kExitUsage;
            }
            return run_eval(eval_flags, eval_theta, eval_n, eval_gammas, command_line);
        }
        if (*compare) return run_compare(cmp_is, cmp_naive, cmp_out, command_line);
        if (*reqn) {
            if (!(req_p > 0.0) || !(req_eps > 0.0)) {
                std::cerr << "rarecast required-n: p and eps must be positive\n";
                return kExitUsage;
            }
            std::printf("%.3g\n", ce::required_sample_size(req_p, req_eps));
            return kExitOk;
        }
        if (*fit) return run_fit_policy(fit_beams, fit_prefix, fit_lane_width, fit_lanes,
                                        fit_max_range, fit_samples, fit_seed);
        if (*roll) return run_rollout(roll_scenario, roll_seed, roll_theta, roll_trace);
        if (*worker) {
            if (worker_endpoint.empty()) {
                std::cerr << "rarecast worker: --endpoint or RARECAST_ENDPOINT is required\n";
                return kExitUsage;
            }
            return run_worker(worker_endpoint, worker_scenario, worker_fail_after);
        }
        if (*table) {
            std::fputs(csv::render(csv::read(table_csv)).c_str(), stdout);
            return kExitOk;
        }
    } catch (const CLI::ValidationError& e) {
        std::cerr << "rarecast: " << e.what() << "\n";
        return kExitUsage;
    } catch (const scenario::parse_error& e) {
        std::cerr << "rarecast: " << e.what() << "\n";
        return kExitData;
    } catch (const std::invalid_argument& e) {
        std::cerr << "rarecast: " << e.what() << "\n";
        return kExitUsage;
    } catch (const std::exception& e) {
        std::cerr << "rarecast: " << e.what() << "\n";
        return kExitData;
    }
    return kExitUsage;
}
