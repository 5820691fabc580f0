#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>

#include "rarecast/policy_fit.hpp"
#include "rarecast/rollout.hpp"
#include "rarecast/scenario.hpp"
#include "rarecast/sha256.hpp"

using namespace rarecast;
namespace fs = std::filesystem;

namespace {

/// Writes a complete scenario plus fitted weight sidecars into dir and
/// returns the scn path. Mirrors the shipped i80 defaults.
std::string write_test_scenario(const fs::path& dir, std::size_t m = 6, std::size_t d = 32) {
    scenario::ScenarioSpec s;
    s.vehicle_count = m;
    s.policy_dim = d;
    s.mu0_path = "w_mu0.bin";
    s.sigma0_path = "w_sigma0.bin";
    s.env_lanes.assign(m - 1, 2);
    for (std::size_t i = 0; i + 1 < m; ++i) s.env_lanes[i] = (2 + i) % s.road.lane_count;
    policy_fit::FitConfig fit_cfg;
    fit_cfg.fan_beams = sim::policy_beams_for_dim(d);
    fit_cfg.road = s.road;
    const auto fit = policy_fit::fit_reference_policy(fit_cfg);
    scenario::write_vector_file((dir / s.mu0_path).string(), fit.mu0);
    scenario::write_chol_file((dir / s.sigma0_path).string(), fit.sigma_chol, d);
    const auto path = (dir / "test.scn").string();
    scenario::save(s, path);
    return path;
}

fs::path temp_dir(const char* tag) {
    auto dir = fs::temp_directory_path() / (std::string("rarecast_scn_") + tag);
    fs::remove_all(dir);
    fs::create_directories(dir);
    return dir;
}

}  // namespace

TEST_CASE("sha256 known vectors") {
    CHECK(sha256::hex(sha256::hash_string("")) ==
          "e3b0c44298fc1c149afbf4c8996fb92427ae41e4649b934ca495991b7852b855");
    CHECK(sha256::hex(sha256::hash_string("abc")) ==
          "ba7816bf8f01cfea414140de5dae2223b00361a396177a9cb410ff61f20015ad");
    CHECK(sha256::hex(sha256::hash_string(
              "abcdbcdecdefdefgefghfghighijhijkijkljklmklmnlmnomnopnopq")) ==
          "248d6a61d20638b8e5c026930c3e6039a33ce45964ff2167f6ecedd419db06c1");
    // block-boundary message
    CHECK(sha256::hex(sha256::hash_string(std::string(64, 'a'))) ==
          "ffe054fe7ae0cb6dc65c3af9b61d5209f439851db43d0ba5997337df154668eb");
}

TEST_CASE("parse: shipped-style defaults round trip") {
    const auto dir = temp_dir("roundtrip");
    const auto path = write_test_scenario(dir);
    const auto s = scenario::load(path);
    CHECK(s.vehicle_count == 6);
    CHECK(s.init_s.lo == 80.0);
    CHECK(s.init_s.hi == 120.0);
    CHECK(s.init_s.alpha == 2.0);
    CHECK(s.init_s.beta == 2.0);
    CHECK(s.init_t.lo == -0.25);
    CHECK(s.init_w.hi == 3.6);
    CHECK(s.init_v.lo == 10.0);
    CHECK(s.measure.n_beams == 20);
    CHECK(s.mu0.size() == 32);

    // parse(serialize(s)) is the identity
    std::istringstream round(scenario::serialize(s));
    const auto s2 = scenario::parse_stream(round, "roundtrip");
    CHECK(scenario::serialize(s2) == scenario::serialize(s));
}

TEST_CASE("parse: empty file names the first missing key") {
    std::istringstream empty("");
    try {
        scenario::parse_stream(empty, "empty");
        FAIL("expected parse_error");
    } catch (const scenario::parse_error& e) {
        CHECK(std::string(e.what()) == "missing key: vehicle_count");
    }
}

TEST_CASE("parse: unknown keys, duplicates and bad values are rejected") {
    const auto dir = temp_dir("badkeys");
    const auto path = write_test_scenario(dir);
    std::ifstream in(path);
    std::stringstream buf;
    buf << in.rdbuf();
    const std::string base = buf.str();

    {
        std::istringstream bad(base + "mystery_key = 1\n");
        CHECK_THROWS_WITH_AS(scenario::parse_stream(bad, "scn"),
                             doctest::Contains("unknown key 'mystery_key'"),
                             scenario::parse_error);
    }
    {
        std::istringstream bad(base + "vehicle_count = 6\n");
        CHECK_THROWS_WITH_AS(scenario::parse_stream(bad, "scn"),
                             doctest::Contains("duplicate key"), scenario::parse_error);
    }
    {
        std::string corrupted = base;
        const auto pos = corrupted.find("road.lane_width_m = ");
        corrupted.replace(pos, corrupted.find('\n', pos) - pos, "road.lane_width_m = -1");
        std::istringstream bad(corrupted);
        CHECK_THROWS_WITH_AS(scenario::parse_stream(bad, "scn"),
                             doctest::Contains("road.lane_width_m"), scenario::parse_error);
    }
    {
        std::string corrupted = base;
        const auto pos = corrupted.find("sim.dt_s = ");
        corrupted.replace(pos, corrupted.find('\n', pos) - pos, "sim.dt_s = fast");
        std::istringstream bad(corrupted);
        CHECK_THROWS_WITH_AS(scenario::parse_stream(bad, "scn"),
                             doctest::Contains("not a real number"), scenario::parse_error);
    }
}

TEST_CASE("load: sidecar dimension mismatch is caught") {
    const auto dir = temp_dir("dims");
    const auto path = write_test_scenario(dir);
    // shrink the mean vector to 30 entries
    const auto mu = scenario::read_vector_file((dir / "w_mu0.bin").string());
    scenario::write_vector_file((dir / "w_mu0.bin").string(),
                                std::span<const double>(mu.data(), 30));
    CHECK_THROWS_WITH_AS(scenario::load(path), doctest::Contains("dimension mismatch"),
                         scenario::parse_error);
}

TEST_CASE("binary sidecars: round trip and magic check") {
    const auto dir = temp_dir("bin");
    const std::vector<double> v = {1.5, -2.25, 3.75, 1e-300, 4e18};
    scenario::write_vector_file((dir / "v.bin").string(), v);
    CHECK(scenario::read_vector_file((dir / "v.bin").string()) == v);

    std::ofstream bad((dir / "bad.bin").string(), std::ios::binary);
    bad << "NOTMAGIC" << std::string(16, '\0');
    bad.close();
    CHECK_THROWS_WITH_AS(scenario::read_vector_file((dir / "bad.bin").string()),
                         doctest::Contains("bad magic"), scenario::parse_error);
}

TEST_CASE("base_family: block structure and theta0") {
    const auto dir = temp_dir("family");
    const auto s = scenario::load(write_test_scenario(dir, 6, 32));
    const auto [family, theta0] = scenario::base_family(s);
    CHECK(family.blocks.size() == 4 * 5 + 1);
    CHECK(family.sample_dim() == 4 * 5 + 32);
    CHECK(family.stat_dim() == 8 * 5 + 32);
    CHECK(expfam::satisfies_box(family, theta0));

    // smallest scenario: m = 2, d = 16 -> 4 Beta blocks + one Gaussian
    const auto dir2 = temp_dir("family2");
    const auto s2 = scenario::load(write_test_scenario(dir2, 2, 16));
    const auto [f2, t2] = scenario::base_family(s2);
    CHECK(f2.blocks.size() == 5);
    CHECK(f2.sample_dim() == 4 + 16);

    // theta0 samples have finite log density
    for (int i = 0; i < 1000; ++i) {
        const auto x = expfam::sample(family, theta0, rng::mix64(12, i));
        CHECK(std::isfinite(expfam::log_density(family, theta0, x)));
    }
}

TEST_CASE("samples honor the documented supports") {
    const auto dir = temp_dir("support");
    const auto s = scenario::load(write_test_scenario(dir));
    const auto [family, theta0] = scenario::base_family(s);
    const std::size_t env = s.vehicle_count - 1;
    for (int i = 0; i < 2000; ++i) {
        const auto x = expfam::sample(family, theta0, rng::mix64(77, i));
        for (std::size_t j = 0; j < env; ++j) {
            CHECK(x[j] >= 80.0);
            CHECK(x[j] <= 120.0);
            CHECK(x[env + j] >= -0.25);
            CHECK(x[env + j] <= 0.25);
            CHECK(x[2 * env + j] >= -3.6);
            CHECK(x[2 * env + j] <= 3.6);
            CHECK(x[3 * env + j] >= 10.0);
            CHECK(x[3 * env + j] <= 20.0);
        }
    }
}

TEST_CASE("content hash tracks payloads, not path strings") {
    const auto dir = temp_dir("hash");
    const auto s = scenario::load(write_test_scenario(dir));
    auto renamed = s;
    renamed.mu0_path = "elsewhere.bin";
    CHECK(scenario::content_hash(s) == scenario::content_hash(renamed));
    auto perturbed = s;
    perturbed.mu0[3] += 1e-9;
    CHECK(scenario::content_hash(s) != scenario::content_hash(perturbed));
    auto retuned = s;
    retuned.measure.gamma = 0.15;
    CHECK(scenario::content_hash(s) != scenario::content_hash(retuned));
}

TEST_CASE("build_world: ego fixed, environment from the sample") {
    const auto dir = temp_dir("world");
    const auto s = scenario::load(write_test_scenario(dir));
    const auto [family, theta0] = scenario::base_family(s);
    const auto x = expfam::sample(family, theta0, 5);
    const auto world = sim::build_world(s, x);
    REQUIRE(world.size() == 6);
    CHECK(world[0].x == s.ego_x);
    CHECK(world[0].speed == s.ego_speed);
    const std::size_t env = s.vehicle_count - 1;
    for (std::size_t i = 0; i < env; ++i) {
        CHECK(world[i + 1].x == x[i]);
        CHECK(world[i + 1].heading == x[2 * env + i] * sim::kDegToRad);
        CHECK(world[i + 1].speed == x[3 * env + i]);
    }
    const std::vector<double> short_sample(3, 0.0);
    CHECK_THROWS_AS(sim::build_world(s, short_sample), std::invalid_argument);
}

TEST_CASE("ScenarioRuntime: deterministic rollouts with log_p0 attached") {
    const auto dir = temp_dir("runtime");
    const auto s = scenario::load(write_test_scenario(dir));
    const sim::ScenarioRuntime runtime(s);
    Task task;
    task.task_id = 3;
    task.seed = 99;
    task.sample = expfam::sample(runtime.family(), runtime.theta0(), task.seed);
    task.scenario_hash = runtime.hash();
    const auto r1 = runtime.execute(task);
    const auto r2 = runtime.execute(task);
    REQUIRE(r1.ok);
    CHECK(r1.result.min_ttc == r2.result.min_ttc);
    CHECK(r1.result.steps == r2.result.steps);
    CHECK(r1.result.log_p0 ==
          expfam::log_density(runtime.family(), runtime.theta0(), task.sample));
    CHECK(r1.result.seed == 99);
    CHECK(r1.result.min_ttc > 0.0);
}
