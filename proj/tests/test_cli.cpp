// End-to-end checks of the command-line tool: exit codes, file outputs,
// reproducibility and the documented flag contracts. Each case launches the
// real binary (path from RARECAST_CLI, set by CTest).

#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cstdlib>
#include <unistd.h>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>

#include "rarecast/csv.hpp"
#include "rarecast/policy_fit.hpp"
#include "rarecast/scenario.hpp"

using namespace rarecast;
namespace fs = std::filesystem;

namespace {

std::string cli() {
    const char* env = std::getenv("RARECAST_CLI");
    REQUIRE_MESSAGE(env != nullptr, "RARECAST_CLI must point at the rarecast binary");
    return env;
}

struct RunOutcome {
    int exit_code = -1;
    std::string output;
};

RunOutcome run(const std::string& args) {
    const std::string out_file = fs::temp_directory_path() / "rarecast_cli_out.txt";
    const std::string cmd = cli() + " " + args + " > " + out_file + " 2>&1";
    const int status = std::system(cmd.c_str());
    RunOutcome o;
    o.exit_code = WIFEXITED(status) ? WEXITSTATUS(status) : -1;
    std::ifstream in(out_file);
    std::stringstream ss;
    ss << in.rdbuf();
    o.output = ss.str();
    return o;
}

fs::path fresh_dir(const std::string& tag) {
    const auto dir = fs::temp_directory_path() / ("rarecast_cli_" + tag);
    fs::remove_all(dir);
    fs::create_directories(dir);
    return dir;
}

std::string read_file(const fs::path& p) {
    std::ifstream in(p, std::ios::binary);
    std::stringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

/// Scenario fixture shared by the scenario-backed cases: a small, fast copy
/// of the shipped setup (m = 3, short horizon).
std::string small_scenario(const fs::path& dir) {
    scenario::ScenarioSpec s;
    s.vehicle_count = 3;
    s.policy_dim = 32;
    s.mu0_path = "w_mu0.bin";
    s.sigma0_path = "w_sigma0.bin";
    s.env_lanes = {2, 1};
    s.horizon_s = 10.0;
    s.ego_lane = 2;
    s.ego_x = 50.0;
    s.ego_speed = 20.0;
    policy_fit::FitConfig fit_cfg;
    fit_cfg.road = s.road;
    const auto fit = policy_fit::fit_reference_policy(fit_cfg);
    scenario::write_vector_file((dir / s.mu0_path).string(), fit.mu0);
    scenario::write_chol_file((dir / s.sigma0_path).string(), fit.sigma_chol, 32);
    const auto path = (dir / "small.scn").string();
    scenario::save(s, path);
    return path;
}

}  // namespace

TEST_CASE("usage errors exit with 2") {
    CHECK(run("naive --toy-gaussian --n 0 --gamma-test=-3").exit_code == 2);
    CHECK(run("ce --toy-gaussian --rho 1.5").exit_code == 2);
    CHECK(run("ce --toy-gaussian --rho 0").exit_code == 2);
    CHECK(run("eval --toy-gaussian --n 0 --theta x --gamma-test=-3").exit_code == 2);
    CHECK(run("frobnicate").exit_code == 2);
    CHECK(run("naive --toy-gaussian").exit_code == 2);  // missing --gamma-test
    CHECK(run("--help").exit_code == 0);
}

TEST_CASE("input errors exit with 1") {
    const auto dir = fresh_dir("errs");
    CHECK(run("naive --scenario /nonexistent.scn --n 10 --gamma-test 0.14").exit_code == 1);
    CHECK(run("eval --toy-gaussian --theta /nonexistent.params --n 10 --gamma-test=-3 --out " +
              dir.string())
              .exit_code == 1);
    // empty scenario file: parse error names the missing key
    const auto empty = dir / "empty.scn";
    std::ofstream(empty).close();
    const auto out = run("naive --scenario " + empty.string() + " --n 10 --gamma-test 0.14");
    CHECK(out.exit_code == 1);
    CHECK(out.output.find("missing key: vehicle_count") != std::string::npos);
}

TEST_CASE("toy pipeline: files, columns, reproducibility") {
    const auto a = fresh_dir("toy_a");
    const auto b = fresh_dir("toy_b");
    const std::string flags =
        " --toy-gaussian --rho 0.1 -K 5 --nk 500 --gamma -3 --seed 11 --out ";
    CHECK(run("ce" + flags + a.string()).exit_code == 0);
    CHECK(run("ce" + flags + b.string()).exit_code == 0);
    CHECK(read_file(a / "ce_history.csv") == read_file(b / "ce_history.csv"));
    CHECK(read_file(a / "theta_ce.params") == read_file(b / "theta_ce.params"));

    const auto hist = csv::read((a / "ce_history.csv").string());
    CHECK(hist.rows.size() == 5);
    CHECK(hist.header[0] == "iter");
    CHECK(hist.header[1] == "gamma_k");
    CHECK(hist.header[2] == "rho_quantile");
    // gamma_k = min(gamma, rho_quantile) on every row
    for (std::size_t r = 0; r < hist.rows.size(); ++r) {
        const double gk = csv::cell_real(hist, r, "gamma_k");
        const double q = csv::cell_real(hist, r, "rho_quantile");
        CHECK(gk == std::min(-3.0, q));
    }

    const std::string eflags = " --toy-gaussian --theta " + (a / "theta_ce.params").string() +
                               " --n 2000 --gamma-test=-3,-2 --seed 5 --out ";
    CHECK(run("eval" + eflags + a.string()).exit_code == 0);
    CHECK(run("eval" + eflags + b.string()).exit_code == 0);
    CHECK(read_file(a / "is.csv") == read_file(b / "is.csv"));
    const auto is = csv::read((a / "is.csv").string());
    CHECK(is.rows.size() == 2);
    CHECK(is.header.back() == "ess");

    CHECK(run("naive --toy-gaussian --n 2000 --gamma-test=-3,-2 --seed 5 --out " + a.string())
              .exit_code == 0);
    const auto naive = csv::read((a / "naive.csv").string());
    CHECK(naive.rows.size() == 2);
    CHECK(naive.header.size() == 5);

    CHECK(run("compare --is " + (a / "is.csv").string() + " --naive " +
              (a / "naive.csv").string() + " --out " + a.string())
              .exit_code == 0);
    const auto cmp = csv::read((a / "compare.csv").string());
    CHECK(cmp.rows.size() == 2);
    CHECK(cmp.header == std::vector<std::string>{"gamma_test", "rare_ratio", "variance_ratio"});
}

TEST_CASE("an unreachable gamma stalls every iteration and exits 3") {
    const auto dir = fresh_dir("stall");
    const auto out =
        run("ce --toy-gaussian --rho 0.1 -K 3 --nk 200 --gamma -100 --out " + dir.string());
    CHECK(out.exit_code == 3);
    CHECK(out.output.find("stalled") != std::string::npos);
    const auto hist = csv::read((dir / "ce_history.csv").string());
    REQUIRE(hist.rows.size() == 3);
    for (std::size_t r = 0; r < 3; ++r) CHECK(csv::cell_real(hist, r, "stalled") == 1.0);
}

TEST_CASE("best quantile improves and never backslides across seeds") {
    int improved = 0;
    for (int seed = 1; seed <= 20; ++seed) {
        const auto dir = fresh_dir("mono_" + std::to_string(seed));
        REQUIRE(run("ce --toy-gaussian --rho 0.1 -K 8 --nk 500 --gamma -3 --seed " +
                    std::to_string(seed) + " --out " + dir.string())
                    .exit_code == 0);
        const auto hist = csv::read((dir / "ce_history.csv").string());
        double best = csv::cell_real(hist, 0, "rho_quantile");
        double prev_best = best;
        bool monotone = true;
        for (std::size_t r = 1; r < hist.rows.size(); ++r) {
            best = std::min(best, csv::cell_real(hist, r, "rho_quantile"));
            if (best > prev_best + 1e-15) monotone = false;
            prev_best = best;
        }
        CHECK(monotone);
        improved += best < csv::cell_real(hist, 0, "rho_quantile") ? 1 : 0;
    }
    CHECK(improved >= 18);  // >= 90% of seeds
}

TEST_CASE("K = 0 emits a single base-point row and exits 0") {
    const auto dir = fresh_dir("k0");
    CHECK(run("ce --toy-gaussian -K 0 --out " + dir.string()).exit_code == 0);
    const auto hist = csv::read((dir / "ce_history.csv").string());
    CHECK(hist.rows.size() == 1);
    CHECK(csv::cell_real(hist, 0, "theta_0") == 0.0);
}

TEST_CASE("gamma grid matching the four-threshold report layout") {
    const auto dir = fresh_dir("grid");
    CHECK(run("naive --toy-gaussian --n 500 --gamma-test 0.14,0.15,0.19,0.20 --seed 3 --out " +
              dir.string())
              .exit_code == 0);
    const auto t = csv::read((dir / "naive.csv").string());
    REQUIRE(t.rows.size() == 4);
    CHECK(csv::cell_real(t, 0, "gamma_test") == 0.14);
    CHECK(csv::cell_real(t, 1, "gamma_test") == 0.15);
    CHECK(csv::cell_real(t, 2, "gamma_test") == 0.19);
    CHECK(csv::cell_real(t, 3, "gamma_test") == 0.2);
}

TEST_CASE("weight identity: eval at theta0 equals naive, shared columns byte for byte") {
    const auto dir = fresh_dir("identity");
    // theta0 file via a zero-iteration search
    CHECK(run("ce --toy-gaussian -K 0 --out " + dir.string()).exit_code == 0);
    CHECK(run("eval --toy-gaussian --theta " + (dir / "theta_ce.params").string() +
              " --n 3000 --gamma-test=-3,-2,-1 --seed 21 --out " + dir.string())
              .exit_code == 0);
    CHECK(run("naive --toy-gaussian --n 3000 --gamma-test=-3,-2,-1 --seed 21 --out " +
              dir.string())
              .exit_code == 0);
    std::ifstream is_in(dir / "is.csv");
    std::ifstream nv_in(dir / "naive.csv");
    std::string is_line, nv_line;
    while (std::getline(nv_in, nv_line)) {
        REQUIRE(std::getline(is_in, is_line));
        // strip the ess column from the is.csv line
        const auto cut = is_line.rfind(',');
        CHECK(is_line.substr(0, cut) == nv_line);
    }
}

TEST_CASE("manifest lists outputs and records the configuration") {
    const auto dir = fresh_dir("manifest");
    CHECK(run("naive --toy-gaussian --n 200 --gamma-test=-2 --seed 9 --out " + dir.string())
              .exit_code == 0);
    const auto text = read_file(dir / "manifest.json");
    CHECK(text.find("\"naive.csv\"") != std::string::npos);
    CHECK(text.find("\"seed\": 9") != std::string::npos);
    CHECK(text.find("\"command_line\"") != std::string::npos);
    CHECK(text.find("\"start\"") != std::string::npos);
    CHECK(text.find("\"end\"") != std::string::npos);
    CHECK(text.find("\"git_describe\"") != std::string::npos);
}

TEST_CASE("required-n prints the sample-size bound") {
    const auto out = run("required-n --p 1e-5 --eps 0.1");
    CHECK(out.exit_code == 0);
    CHECK(std::stod(out.output) == 1e7);
}

TEST_CASE("scenario-backed commands run serially and in parallel") {
    const auto dir = fresh_dir("scn");
    const auto scn = small_scenario(dir);
    const std::string base =
        "naive --scenario " + scn + " --n 60 --gamma-test 0.5,1.0 --seed 4 --out ";
    const auto serial_dir = fresh_dir("scn_serial");
    const auto pool_dir = fresh_dir("scn_pool");
    CHECK(run(base + serial_dir.string() + " --workers 0").exit_code == 0);
    CHECK(run(base + pool_dir.string() + " --workers 2").exit_code == 0);
    CHECK(read_file(serial_dir / "naive.csv") == read_file(pool_dir / "naive.csv"));

    // theta mismatch: a toy theta against the highway family
    const auto toy_dir = fresh_dir("toy_theta");
    CHECK(run("ce --toy-gaussian -K 0 --out " + toy_dir.string()).exit_code == 0);
    const auto bad = run("eval --scenario " + scn + " --theta " +
                         (toy_dir / "theta_ce.params").string() +
                         " --n 10 --gamma-test 0.5 --out " + dir.string());
    CHECK(bad.exit_code == 1);
    CHECK(bad.output.find("does not fit") != std::string::npos);
}

TEST_CASE("scenario-backed search produces a usable sampler end to end") {
    const auto dir = fresh_dir("scn_ce");
    const auto scn = small_scenario(dir);
    CHECK(run("ce --scenario " + scn +
              " --rho 0.2 -K 2 --nk 80 --gamma 1e6 --seed 13 --workers 2 --out " + dir.string())
              .exit_code == 0);
    const auto hist = csv::read((dir / "ce_history.csv").string());
    REQUIRE(hist.rows.size() == 2);
    // the highway family flattens to 4 Beta pairs plus the 32 policy weights
    CHECK(hist.header.back() == "d_47");
    CHECK(run("eval --scenario " + scn + " --theta " + (dir / "theta_ce.params").string() +
              " --n 120 --gamma-test 2.5 --seed 14 --workers 2 --out " + dir.string())
              .exit_code == 0);
    CHECK(run("naive --scenario " + scn + " --n 120 --gamma-test 2.5 --seed 14 --out " +
              dir.string())
              .exit_code == 0);
    CHECK(run("compare --is " + (dir / "is.csv").string() + " --naive " +
              (dir / "naive.csv").string() + " --out " + dir.string())
              .exit_code == 0);
    const auto cmp = csv::read((dir / "compare.csv").string());
    CHECK(cmp.rows.size() == 1);
}

TEST_CASE("externally launched workers serve a pinned controller port") {
    const auto dir = fresh_dir("external");
    const auto scn = small_scenario(dir);
    const auto serial_dir = fresh_dir("external_serial");
    const auto ext_dir = fresh_dir("external_pool");
    CHECK(run("naive --scenario " + scn +
              " --n 40 --gamma-test 1.0 --seed 6 --workers 0 --out " + serial_dir.string())
              .exit_code == 0);
    // controller in the background waiting for one external worker
    const std::string controller =
        cli() + " naive --scenario " + scn +
        " --n 40 --gamma-test 1.0 --seed 6 --listen 46311 --external-workers 1 --out " +
        ext_dir.string() + " > /dev/null 2>&1 &";
    REQUIRE(std::system(controller.c_str()) == 0);
    // the worker retries its connect until the controller is listening; it
    // returns once the controller tears the pool down
    CHECK(run("worker --endpoint 127.0.0.1:46311 --scenario " + scn).exit_code == 0);
    for (int i = 0; i < 100 && !fs::exists(ext_dir / "naive.csv"); ++i) usleep(100000);
    CHECK(read_file(serial_dir / "naive.csv") == read_file(ext_dir / "naive.csv"));
}

TEST_CASE("rollout subcommand writes a trace") {
    const auto dir = fresh_dir("trace");
    const auto scn = small_scenario(dir);
    const auto trace = dir / "trace.csv";
    const auto out =
        run("rollout --scenario " + scn + " --seed 12 --trace " + trace.string());
    CHECK(out.exit_code == 0);
    CHECK(out.output.find("min_ttc=") != std::string::npos);
    const auto t = csv::read(trace.string());
    CHECK(t.header ==
          std::vector<std::string>{"step", "vehicle", "x", "y", "heading", "speed"});
    CHECK(t.rows.size() >= 3 * 100);  // three vehicles, 10 s at 0.1 s steps
}

TEST_CASE("table renders a CSV") {
    const auto dir = fresh_dir("table");
    CHECK(run("naive --toy-gaussian --n 100 --gamma-test=-2 --out " + dir.string()).exit_code ==
          0);
    const auto out = run("table --csv " + (dir / "naive.csv").string());
    CHECK(out.exit_code == 0);
    CHECK(out.output.find("gamma_test") != std::string::npos);
}
