#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <atomic>
#include <chrono>
#include <cmath>
#include <set>
#include <thread>
#include <vector>

#include "rarecast/orchestrator.hpp"
#include "rarecast/rng.hpp"

using namespace rarecast;
using Clock = std::chrono::steady_clock;

namespace {

sha256::Digest test_hash(std::uint8_t fill = 7) {
    sha256::Digest d;
    d.fill(fill);
    return d;
}

/// Deterministic stand-in rollout so serial and distributed paths can be
/// compared bit for bit.
TaskResult fake_rollout(const Task& t, double spin_ms = 0.0) {
    if (spin_ms > 0.0) {
        const auto until = Clock::now() + std::chrono::duration<double, std::milli>(spin_ms);
        volatile double sink = 0.0;
        while (Clock::now() < until) sink = sink + 1.0;
    }
    TaskResult r;
    r.task_id = t.task_id;
    r.ok = true;
    r.result.min_ttc = std::sin(static_cast<double>(t.seed % 1000));
    if (!t.sample.empty()) r.result.min_ttc += t.sample[0];
    r.result.crashed = (t.seed % 5) == 0;
    r.result.crash_step = r.result.crashed ? static_cast<std::int64_t>(t.seed % 100) : -1;
    r.result.steps = 100 + t.task_id % 7;
    r.result.log_p0 = -0.5 * static_cast<double>(t.task_id);
    r.result.seed = t.seed;
    return r;
}

std::vector<Task> make_tasks(std::size_t n, const sha256::Digest& hash) {
    std::vector<Task> tasks(n);
    for (std::size_t i = 0; i < n; ++i) {
        tasks[i].task_id = i;
        tasks[i].seed = rng::mix64(31337, i);
        tasks[i].sample = {static_cast<double>(i) * 0.25, -1.0};
        tasks[i].scenario_hash = hash;
    }
    return tasks;
}

struct ThreadWorker {
    std::thread thread;
    std::size_t executed = 0;

    ThreadWorker(std::uint16_t port, sha256::Digest hash, orch::WorkerOptions opts = {},
                 double spin_ms = 0.0) {
        opts.exit_process_on_failure = false;
        thread = std::thread([this, port, hash, opts, spin_ms] {
            executed = orch::worker_loop(
                "127.0.0.1", port, hash,
                [spin_ms](const Task& t) { return fake_rollout(t, spin_ms); }, opts);
        });
    }
    void join() {
        if (thread.joinable()) thread.join();
    }
    ~ThreadWorker() { join(); }
};

bool same_result(const TaskResult& a, const TaskResult& b) {
    return a.task_id == b.task_id && a.ok == b.ok && a.error == b.error &&
           a.result.min_ttc == b.result.min_ttc && a.result.crashed == b.result.crashed &&
           a.result.crash_step == b.result.crash_step && a.result.steps == b.result.steps &&
           a.result.log_p0 == b.result.log_p0 && a.result.seed == b.result.seed;
}

}  // namespace

TEST_CASE("wire format: task and result round trips") {
    rng::Sampler s(1);
    for (int rep = 0; rep < 100; ++rep) {
        Task t;
        t.task_id = static_cast<std::uint64_t>(s.uniform(0, 1e9));
        t.seed = static_cast<std::uint64_t>(s.uniform(0, 1e12));
        const int n = static_cast<int>(s.uniform(0, 60));
        for (int i = 0; i < n; ++i) t.sample.push_back(s.normal() * 1e3);
        t.scenario_hash = test_hash(static_cast<std::uint8_t>(rep));
        const Task back = orch::decode_task(orch::encode_task(t));
        CHECK(back.task_id == t.task_id);
        CHECK(back.seed == t.seed);
        CHECK(back.scenario_hash == t.scenario_hash);
        CHECK(back.sample == t.sample);

        TaskResult r = fake_rollout(t);
        const TaskResult rb = orch::decode_result(orch::encode_result(r));
        CHECK(same_result(r, rb));

        TaskResult bad;
        bad.task_id = t.task_id;
        bad.ok = false;
        bad.error = "diverged";
        CHECK(same_result(bad, orch::decode_result(orch::encode_result(bad))));
    }
}

TEST_CASE("pool matches the serial runner bit for bit, any worker count") {
    const auto hash = test_hash();
    const auto tasks = make_tasks(500, hash);
    SerialRunner serial([](const Task& t) { return fake_rollout(t); });
    const auto want = serial.run_batch(tasks);

    for (std::size_t workers : {1u, 2u, 4u}) {
        orch::PoolConfig cfg;
        cfg.scenario_hash = hash;
        orch::WorkerPool pool(cfg);
        std::vector<std::unique_ptr<ThreadWorker>> pack;
        for (std::size_t i = 0; i < workers; ++i)
            pack.push_back(std::make_unique<ThreadWorker>(pool.port(), hash));
        pool.wait_for_workers(workers);
        const auto got = pool.run_batch(tasks);
        REQUIRE(got.size() == want.size());
        for (std::size_t i = 0; i < got.size(); ++i) CHECK(same_result(got[i], want[i]));
        pool.shutdown();
    }
}

TEST_CASE("pool reuse across batches") {
    const auto hash = test_hash();
    orch::PoolConfig cfg;
    cfg.scenario_hash = hash;
    orch::WorkerPool pool(cfg);
    ThreadWorker w1(pool.port(), hash), w2(pool.port(), hash);
    pool.wait_for_workers(2);
    SerialRunner serial([](const Task& t) { return fake_rollout(t); });
    for (int rep = 0; rep < 3; ++rep) {
        const auto tasks = make_tasks(100 + rep * 37, hash);
        const auto got = pool.run_batch(tasks);
        const auto want = serial.run_batch(tasks);
        REQUIRE(got.size() == want.size());
        for (std::size_t i = 0; i < got.size(); ++i) CHECK(same_result(got[i], want[i]));
    }
    CHECK(pool.run_batch({}).empty());
    pool.shutdown();
}

TEST_CASE("worker death mid-batch loses nothing") {
    const auto hash = test_hash();
    orch::PoolConfig cfg;
    cfg.scenario_hash = hash;
    orch::WorkerPool pool(cfg);
    orch::WorkerOptions dying;
    dying.fail_after = 50;
    ThreadWorker victim(pool.port(), hash, dying);
    ThreadWorker survivor(pool.port(), hash);
    pool.wait_for_workers(2);
    const auto tasks = make_tasks(1000, hash);
    const auto got = pool.run_batch(tasks);
    REQUIRE(got.size() == 1000);
    std::set<std::uint64_t> ids;
    for (const auto& r : got) {
        CHECK(r.ok);
        ids.insert(r.task_id);
    }
    CHECK(ids.size() == 1000);
    pool.shutdown();
    victim.join();
    survivor.join();
    CHECK(victim.executed == 50);
    CHECK(survivor.executed >= 950);
}

TEST_CASE("randomized worker kills: no lost or duplicated task ids") {
    rng::Sampler s(99);
    for (int round = 0; round < 5; ++round) {
        const auto hash = test_hash();
        orch::PoolConfig cfg;
        cfg.scenario_hash = hash;
        orch::WorkerPool pool(cfg);
        std::vector<std::unique_ptr<ThreadWorker>> pack;
        for (int i = 0; i < 4; ++i) {
            orch::WorkerOptions opts;
            // two workers die at a random point, two survive
            if (i < 2) opts.fail_after = 1 + static_cast<std::size_t>(s.uniform(0, 40));
            pack.push_back(std::make_unique<ThreadWorker>(pool.port(), hash, opts));
        }
        pool.wait_for_workers(4);
        const auto tasks = make_tasks(300, hash);
        const auto got = pool.run_batch(tasks);
        REQUIRE(got.size() == 300);
        std::set<std::uint64_t> ids;
        std::size_t ok = 0;
        for (const auto& r : got) {
            ids.insert(r.task_id);
            ok += r.ok ? 1 : 0;
        }
        CHECK(ids.size() == 300);
        CHECK(ok == 300);
        pool.shutdown();
    }
}

TEST_CASE("scenario hash mismatch: refused, rerouted, never executed") {
    const auto hash = test_hash(1);
    const auto wrong = test_hash(2);
    orch::PoolConfig cfg;
    cfg.scenario_hash = hash;
    orch::WorkerPool pool(cfg);
    // the impostor will be dropped at the pong handshake
    ThreadWorker impostor(pool.port(), wrong);
    ThreadWorker good(pool.port(), hash);
    pool.wait_for_workers(1);
    const auto tasks = make_tasks(50, hash);
    const auto got = pool.run_batch(tasks);
    REQUIRE(got.size() == 50);
    for (const auto& r : got) CHECK(r.ok);
    pool.shutdown();
    impostor.join();
    good.join();
    CHECK(impostor.executed == 0);
    CHECK(good.executed == 50);
}

TEST_CASE("worker refuses tasks with a foreign hash in the task frame") {
    // handshake passes, but the task frames reference another scenario: the
    // worker answers with mismatch frames and executes nothing
    const auto hash = test_hash(3);
    orch::PoolConfig cfg;
    cfg.scenario_hash = hash;
    cfg.max_retries = 1;
    cfg.quiet_timeout_s = 10.0;
    orch::WorkerPool pool(cfg);
    ThreadWorker w(pool.port(), hash);
    pool.wait_for_workers(1);
    auto tasks = make_tasks(3, hash);
    for (auto& t : tasks) t.scenario_hash = test_hash(4);
    const auto got = pool.run_batch(tasks);
    REQUIRE(got.size() == 3);
    for (const auto& r : got) {
        CHECK_FALSE(r.ok);
        CHECK(r.error == "scenario hash mismatch");
    }
    pool.shutdown();
    w.join();
    CHECK(w.executed == 0);
}

TEST_CASE("batch fails cleanly when every worker is gone") {
    const auto hash = test_hash();
    orch::PoolConfig cfg;
    cfg.scenario_hash = hash;
    cfg.quiet_timeout_s = 0.5;
    orch::WorkerPool pool(cfg);
    const auto tasks = make_tasks(10, hash);
    CHECK_THROWS_AS(pool.run_batch(tasks), orch::pool_error);
    pool.shutdown();
}

TEST_CASE("one hundred sequential tasks give one result each") {
    const auto hash = test_hash();
    orch::PoolConfig cfg;
    cfg.scenario_hash = hash;
    orch::WorkerPool pool(cfg);
    ThreadWorker w(pool.port(), hash);
    pool.wait_for_workers(1);
    const auto tasks = make_tasks(100, hash);
    const auto got = pool.run_batch(tasks);
    REQUIRE(got.size() == 100);
    for (std::size_t i = 0; i < 100; ++i) CHECK(got[i].task_id == i);
    pool.shutdown();
    w.join();
    CHECK(w.executed == 100);
}

TEST_CASE("throughput scales with the worker count") {
    // coarse shape check: parallel wall-clock should be well under serial
    const auto hash = test_hash();
    const double spin_ms = 2.0;
    const std::size_t n = 400;
    const auto tasks = make_tasks(n, hash);

    SerialRunner serial([&](const Task& t) { return fake_rollout(t, spin_ms); });
    const auto t0 = Clock::now();
    serial.run_batch(tasks);
    const double serial_s = std::chrono::duration<double>(Clock::now() - t0).count();

    const std::size_t cores = std::max(2u, std::thread::hardware_concurrency());
    for (std::size_t workers : {2u, 4u, 8u}) {
        orch::PoolConfig cfg;
        cfg.scenario_hash = hash;
        orch::WorkerPool pool(cfg);
        std::vector<std::unique_ptr<ThreadWorker>> pack;
        for (std::size_t i = 0; i < workers; ++i)
            pack.push_back(std::make_unique<ThreadWorker>(pool.port(), hash, orch::WorkerOptions{},
                                                          spin_ms));
        pool.wait_for_workers(workers);
        const auto t1 = Clock::now();
        const auto got = pool.run_batch(tasks);
        const double par_s = std::chrono::duration<double>(Clock::now() - t1).count();
        REQUIRE(got.size() == n);
        const double bound =
            0.6 * serial_s / static_cast<double>(std::min(workers, cores)) + 1.5;
        CHECK(par_s <= bound);
        pool.shutdown();
    }
}
