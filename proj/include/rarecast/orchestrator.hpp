#pragma once

// Distributed rollout execution over local stream sockets.
//
// Framing: every message is [u32 LE length][u8 type][payload], where length
// counts the type byte plus the payload. Payloads open with a u16 LE protocol
// version (currently 1); integers are little-endian, reals are IEEE-754
// binary64 little-endian. Frame types:
//   1 task      u64 task_id, u64 seed, 32B scenario hash, u64 n, n x f64
//   2 result    u64 task_id, u8 ok; ok: f64 min_ttc, u8 crashed,
//               i64 crash_step, u64 steps, f64 log_p0, u64 seed
//               not ok: u32 len, len bytes of error text
//   3 ping      (empty)
//   4 pong      32B scenario hash of the worker's loaded scenario
//   5 shutdown  (empty)
//   6 mismatch  u64 task_id, 32B the worker's scenario hash
//   7 request   (empty) -- an idle worker asking for work
//
// Scheduling is pull-based: the controller hands a task to whichever worker
// asks next, so uneven rollout durations balance themselves. Results land in
// a buffer indexed by task position and are returned sorted by task_id,
// which makes every aggregate independent of worker count and timing. A
// worker death requeues its in-flight task, at most two retries per task.

#include <arpa/inet.h>
#include <netinet/in.h>
#include <netinet/tcp.h>
#include <poll.h>
#include <signal.h>
#include <sys/socket.h>
#include <sys/types.h>
#include <sys/wait.h>
#include <unistd.h>

#include <chrono>
#include <cstdint>
#include <cstring>
#include <deque>
#include <map>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include "rarecast/sha256.hpp"
#include "rarecast/tasks.hpp"

namespace rarecast::orch {

inline constexpr std::uint16_t kProtocolVersion = 1;

enum class FrameType : std::uint8_t {
    task = 1,
    result = 2,
    ping = 3,
    pong = 4,
    shutdown = 5,
    mismatch = 6,
    request = 7,
};

struct Frame {
    FrameType type{};
    std::vector<std::uint8_t> payload;
};

struct protocol_error : std::runtime_error {
    using std::runtime_error::runtime_error;
};

struct pool_error : std::runtime_error {
    using std::runtime_error::runtime_error;
};

// -- byte packing -------------------------------------------------------------

namespace wire {

inline void put_u16(std::vector<std::uint8_t>& b, std::uint16_t v) {
    b.push_back(static_cast<std::uint8_t>(v));
    b.push_back(static_cast<std::uint8_t>(v >> 8));
}

inline void put_u64(std::vector<std::uint8_t>& b, std::uint64_t v) {
    for (int i = 0; i < 8; ++i) b.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
}

inline void put_f64(std::vector<std::uint8_t>& b, double v) {
    std::uint64_t bits;
    std::memcpy(&bits, &v, 8);
    put_u64(b, bits);
}

struct Reader {
    const std::uint8_t* p;
    const std::uint8_t* end;

    explicit Reader(const std::vector<std::uint8_t>& b) : p(b.data()), end(b.data() + b.size()) {}

    void need(std::size_t n) const {
        if (static_cast<std::size_t>(end - p) < n) throw protocol_error("truncated frame");
    }
    std::uint16_t u16() {
        need(2);
        std::uint16_t v = static_cast<std::uint16_t>(p[0] | (p[1] << 8));
        p += 2;
        return v;
    }
    std::uint64_t u64() {
        need(8);
        std::uint64_t v = 0;
        for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(p[i]) << (8 * i);
        p += 8;
        return v;
    }
    std::uint8_t u8() {
        need(1);
        return *p++;
    }
    double f64() {
        const std::uint64_t bits = u64();
        double v;
        std::memcpy(&v, &bits, 8);
        return v;
    }
    void bytes(void* out, std::size_t n) {
        need(n);
        std::memcpy(out, p, n);
        p += n;
    }
};

}  // namespace wire

inline Frame encode_task(const Task& t) {
    Frame f;
    f.type = FrameType::task;
    wire::put_u16(f.payload, kProtocolVersion);
    wire::put_u64(f.payload, t.task_id);
    wire::put_u64(f.payload, t.seed);
    f.payload.insert(f.payload.end(), t.scenario_hash.begin(), t.scenario_hash.end());
    wire::put_u64(f.payload, t.sample.size());
    for (double v : t.sample) wire::put_f64(f.payload, v);
    return f;
}

inline Task decode_task(const Frame& f) {
    wire::Reader r(f.payload);
    if (r.u16() != kProtocolVersion) throw protocol_error("unsupported protocol version");
    Task t;
    t.task_id = r.u64();
    t.seed = r.u64();
    r.bytes(t.scenario_hash.data(), t.scenario_hash.size());
    const std::uint64_t n = r.u64();
    t.sample.resize(n);
    for (auto& v : t.sample) v = r.f64();
    return t;
}

inline Frame encode_result(const TaskResult& res) {
    Frame f;
    f.type = FrameType::result;
    wire::put_u16(f.payload, kProtocolVersion);
    wire::put_u64(f.payload, res.task_id);
    f.payload.push_back(res.ok ? 1 : 0);
    if (res.ok) {
        wire::put_f64(f.payload, res.result.min_ttc);
        f.payload.push_back(res.result.crashed ? 1 : 0);
        wire::put_u64(f.payload, static_cast<std::uint64_t>(res.result.crash_step));
        wire::put_u64(f.payload, res.result.steps);
        wire::put_f64(f.payload, res.result.log_p0);
        wire::put_u64(f.payload, res.result.seed);
    } else {
        const auto n = static_cast<std::uint32_t>(res.error.size());
        for (int i = 0; i < 4; ++i) f.payload.push_back(static_cast<std::uint8_t>(n >> (8 * i)));
        f.payload.insert(f.payload.end(), res.error.begin(), res.error.end());
    }
    return f;
}

inline TaskResult decode_result(const Frame& f) {
    wire::Reader r(f.payload);
    if (r.u16() != kProtocolVersion) throw protocol_error("unsupported protocol version");
    TaskResult res;
    res.task_id = r.u64();
    res.ok = r.u8() != 0;
    if (res.ok) {
        res.result.min_ttc = r.f64();
        res.result.crashed = r.u8() != 0;
        res.result.crash_step = static_cast<std::int64_t>(r.u64());
        res.result.steps = r.u64();
        res.result.log_p0 = r.f64();
        res.result.seed = r.u64();
    } else {
        std::uint32_t n = 0;
        for (int i = 0; i < 4; ++i) n |= static_cast<std::uint32_t>(r.u8()) << (8 * i);
        res.error.resize(n);
        r.bytes(res.error.data(), n);
    }
    return res;
}

inline Frame encode_control(FrameType type) {
    Frame f;
    f.type = type;
    wire::put_u16(f.payload, kProtocolVersion);
    return f;
}

inline Frame encode_pong(const sha256::Digest& hash) {
    Frame f;
    f.type = FrameType::pong;
    wire::put_u16(f.payload, kProtocolVersion);
    f.payload.insert(f.payload.end(), hash.begin(), hash.end());
    return f;
}

inline sha256::Digest decode_pong(const Frame& f) {
    wire::Reader r(f.payload);
    if (r.u16() != kProtocolVersion) throw protocol_error("unsupported protocol version");
    sha256::Digest d;
    r.bytes(d.data(), d.size());
    return d;
}

inline Frame encode_mismatch(std::uint64_t task_id, const sha256::Digest& worker_hash) {
    Frame f;
    f.type = FrameType::mismatch;
    wire::put_u16(f.payload, kProtocolVersion);
    wire::put_u64(f.payload, task_id);
    f.payload.insert(f.payload.end(), worker_hash.begin(), worker_hash.end());
    return f;
}

inline std::pair<std::uint64_t, sha256::Digest> decode_mismatch(const Frame& f) {
    wire::Reader r(f.payload);
    if (r.u16() != kProtocolVersion) throw protocol_error("unsupported protocol version");
    const std::uint64_t id = r.u64();
    sha256::Digest d;
    r.bytes(d.data(), d.size());
    return {id, d};
}

// -- socket plumbing ----------------------------------------------------------

namespace net {

inline bool write_all(int fd, const void* data, std::size_t len) {
    const auto* p = static_cast<const std::uint8_t*>(data);
    while (len > 0) {
        const ssize_t n = ::send(fd, p, len, MSG_NOSIGNAL);
        if (n <= 0) {
            if (n < 0 && errno == EINTR) continue;
            return false;
        }
        p += n;
        len -= static_cast<std::size_t>(n);
    }
    return true;
}

inline bool read_exact(int fd, void* data, std::size_t len) {
    auto* p = static_cast<std::uint8_t*>(data);
    while (len > 0) {
        const ssize_t n = ::recv(fd, p, len, 0);
        if (n <= 0) {
            if (n < 0 && errno == EINTR) continue;
            return false;
        }
        p += n;
        len -= static_cast<std::size_t>(n);
    }
    return true;
}

inline bool send_frame(int fd, const Frame& f) {
    const auto len = static_cast<std::uint32_t>(1 + f.payload.size());
    std::vector<std::uint8_t> buf;
    buf.reserve(4 + len);
    for (int i = 0; i < 4; ++i) buf.push_back(static_cast<std::uint8_t>(len >> (8 * i)));
    buf.push_back(static_cast<std::uint8_t>(f.type));
    buf.insert(buf.end(), f.payload.begin(), f.payload.end());
    return write_all(fd, buf.data(), buf.size());
}

inline std::optional<Frame> recv_frame(int fd) {
    std::uint8_t len_bytes[4];
    if (!read_exact(fd, len_bytes, 4)) return std::nullopt;
    std::uint32_t len = 0;
    for (int i = 0; i < 4; ++i) len |= static_cast<std::uint32_t>(len_bytes[i]) << (8 * i);
    if (len == 0 || len > (64u << 20)) return std::nullopt;
    Frame f;
    std::uint8_t type;
    if (!read_exact(fd, &type, 1)) return std::nullopt;
    f.type = static_cast<FrameType>(type);
    f.payload.resize(len - 1);
    if (len > 1 && !read_exact(fd, f.payload.data(), len - 1)) return std::nullopt;
    return f;
}

inline int listen_loopback(std::uint16_t& port) {
    // CLOEXEC everywhere on the controller side: spawned workers must not
    // inherit the listener or each other's connections, or a dead worker's
    // EOF would be masked by file-descriptor copies in its siblings
    const int fd = ::socket(AF_INET, SOCK_STREAM | SOCK_CLOEXEC, 0);
    if (fd < 0) throw pool_error("socket() failed");
    const int on = 1;
    ::setsockopt(fd, SOL_SOCKET, SO_REUSEADDR, &on, sizeof on);
    sockaddr_in addr{};
    addr.sin_family = AF_INET;
    addr.sin_addr.s_addr = htonl(INADDR_LOOPBACK);
    addr.sin_port = htons(port);
    if (::bind(fd, reinterpret_cast<sockaddr*>(&addr), sizeof addr) != 0) {
        ::close(fd);
        throw pool_error("bind() failed");
    }
    socklen_t len = sizeof addr;
    ::getsockname(fd, reinterpret_cast<sockaddr*>(&addr), &len);
    port = ntohs(addr.sin_port);
    if (::listen(fd, 64) != 0) {
        ::close(fd);
        throw pool_error("listen() failed");
    }
    return fd;
}

inline int connect_loopback(const std::string& host, std::uint16_t port, int attempts = 50) {
    for (int i = 0; i < attempts; ++i) {
        const int fd = ::socket(AF_INET, SOCK_STREAM, 0);
        if (fd < 0) return -1;
        sockaddr_in addr{};
        addr.sin_family = AF_INET;
        addr.sin_port = htons(port);
        if (::inet_pton(AF_INET, host.c_str(), &addr.sin_addr) != 1) {
            ::close(fd);
            return -1;
        }
        if (::connect(fd, reinterpret_cast<sockaddr*>(&addr), sizeof addr) == 0) {
            const int on = 1;
            ::setsockopt(fd, IPPROTO_TCP, TCP_NODELAY, &on, sizeof on);
            return fd;
        }
        ::close(fd);
        ::usleep(20000);
    }
    return -1;
}

}  // namespace net

// -- worker -------------------------------------------------------------------

struct WorkerOptions {
    /// For fault-injection tests: exit the process abruptly after this many
    /// completed tasks (0 = never).
    std::size_t fail_after = 0;
    bool exit_process_on_failure = true;
};

/// Connects to the controller and serves tasks until a shutdown frame.
/// Refuses tasks whose scenario hash differs from its own. Returns the number
/// of tasks executed.
inline std::size_t worker_loop(const std::string& host, std::uint16_t port,
                               const sha256::Digest& scenario_hash,
                               const SerialRunner::Fn& execute, WorkerOptions opts = {}) {
    const int fd = net::connect_loopback(host, port);
    if (fd < 0) throw pool_error("worker: cannot connect to controller");
    std::size_t executed = 0;
    if (!net::send_frame(fd, encode_control(FrameType::request))) {
        ::close(fd);
        return executed;
    }
    for (;;) {
        auto frame = net::recv_frame(fd);
        if (!frame) break;
        switch (frame->type) {
            case FrameType::ping:
                if (!net::send_frame(fd, encode_pong(scenario_hash))) goto done;
                break;
            case FrameType::task: {
                const Task task = decode_task(*frame);
                if (task.scenario_hash != scenario_hash) {
                    if (!net::send_frame(fd, encode_mismatch(task.task_id, scenario_hash)))
                        goto done;
                    if (!net::send_frame(fd, encode_control(FrameType::request))) goto done;
                    break;
                }
                const TaskResult res = execute(task);
                if (!net::send_frame(fd, encode_result(res))) goto done;
                ++executed;
                if (opts.fail_after > 0 && executed >= opts.fail_after) {
                    if (opts.exit_process_on_failure) ::_exit(17);
                    goto done;  // thread-hosted workers just drop the link
                }
                if (!net::send_frame(fd, encode_control(FrameType::request))) goto done;
                break;
            }
            case FrameType::shutdown:
                goto done;
            default:
                break;  // ignore anything unexpected
        }
    }
done:
    ::close(fd);
    return executed;
}

// -- controller / worker pool --------------------------------------------------

struct PoolConfig {
    std::uint16_t port = 0;            // 0 = ephemeral
    std::size_t max_retries = 2;       // extra attempts after the first
    double quiet_timeout_s = 120.0;    // abort when nothing happens for this long
    sha256::Digest scenario_hash{};    // what connecting workers must serve
};

/// Controller endpoint plus the set of connected workers. Single-threaded:
/// one poll loop dispatches, collects and detects deaths. The pool survives
/// across batches; workers idle between them.
class WorkerPool final : public RolloutProvider {
  public:
    explicit WorkerPool(PoolConfig cfg) : cfg_(cfg), port_(cfg.port) {
        listen_fd_ = net::listen_loopback(port_);
    }

    ~WorkerPool() override { shutdown(); }

    WorkerPool(const WorkerPool&) = delete;
    WorkerPool& operator=(const WorkerPool&) = delete;

    std::uint16_t port() const { return port_; }

    /// Spawn worker processes: argv must be a full command line; the strings
    /// "{port}" are substituted with the actual port.
    void spawn(const std::vector<std::string>& argv_template, std::size_t count) {
        for (std::size_t i = 0; i < count; ++i) {
            std::vector<std::string> argv = argv_template;
            for (auto& a : argv) {
                const auto pos = a.find("{port}");
                if (pos != std::string::npos) a.replace(pos, 6, std::to_string(port_));
            }
            const pid_t pid = ::fork();
            if (pid < 0) throw pool_error("fork() failed");
            if (pid == 0) {
                std::vector<char*> cargv;
                for (auto& a : argv) cargv.push_back(a.data());
                cargv.push_back(nullptr);
                ::execv(cargv[0], cargv.data());
                ::_exit(127);
            }
            children_.push_back(pid);
        }
    }

    /// Wait until at least `count` workers have completed the hash handshake.
    void wait_for_workers(std::size_t count, double timeout_s = 30.0) {
        const auto deadline =
            std::chrono::steady_clock::now() + std::chrono::duration<double>(timeout_s);
        while (verified_count() < count) {
            if (std::chrono::steady_clock::now() > deadline)
                throw pool_error("workers did not connect in time");
            pump(100);
        }
    }

    std::size_t verified_count() const {
        std::size_t n = 0;
        for (const auto& [fd, w] : workers_) n += w.verified ? 1 : 0;
        return n;
    }

    std::vector<TaskResult> run_batch(const std::vector<Task>& tasks) override {
        if (tasks.empty()) return {};
        batch_ = BatchState{};
        batch_->tasks = &tasks;
        batch_->results.assign(tasks.size(), std::nullopt);
        batch_->attempts.assign(tasks.size(), 0);
        for (std::size_t i = 0; i < tasks.size(); ++i) batch_->pending.push_back(i);
        batch_->remaining = tasks.size();
        last_progress_ = std::chrono::steady_clock::now();

        // hand work to everyone already idle
        std::vector<int> idle;
        idle.swap(idle_fds_);
        for (int fd : idle) dispatch(fd);

        while (batch_->remaining > 0) {
            if (live_worker_count() == 0 && !children_.empty() && !any_child_alive())
                throw pool_error("worker pool unavailable: all workers exited");
            pump(100);
            const auto quiet = std::chrono::duration<double>(std::chrono::steady_clock::now() -
                                                             last_progress_)
                                   .count();
            if (quiet > cfg_.quiet_timeout_s) throw pool_error("batch stalled: no progress");
        }

        std::vector<TaskResult> out;
        out.reserve(tasks.size());
        for (auto& slot : batch_->results) out.push_back(std::move(*slot));
        std::sort(out.begin(), out.end(),
                  [](const TaskResult& a, const TaskResult& b) { return a.task_id < b.task_id; });
        batch_.reset();
        return out;
    }

    void shutdown() {
        for (auto& [fd, w] : workers_) {
            net::send_frame(fd, encode_control(FrameType::shutdown));
            ::close(fd);
        }
        workers_.clear();
        idle_fds_.clear();
        if (listen_fd_ >= 0) {
            ::close(listen_fd_);
            listen_fd_ = -1;
        }
        for (pid_t pid : children_) {
            int status = 0;
            if (::waitpid(pid, &status, WNOHANG) == 0) {
                ::kill(pid, SIGTERM);
                ::usleep(10000);
                if (::waitpid(pid, &status, WNOHANG) == 0) {
                    ::kill(pid, SIGKILL);
                    ::waitpid(pid, &status, 0);
                }
            }
        }
        children_.clear();
    }

  private:
    struct WorkerConn {
        bool verified = false;
        std::optional<std::size_t> in_flight;  // task position in the batch
    };

    struct BatchState {
        const std::vector<Task>* tasks = nullptr;
        std::vector<std::optional<TaskResult>> results;
        std::vector<std::size_t> attempts;
        std::deque<std::size_t> pending;
        std::size_t remaining = 0;
    };

    std::size_t live_worker_count() const { return workers_.size(); }

    bool any_child_alive() const {
        for (pid_t pid : children_)
            if (::kill(pid, 0) == 0) return true;
        return false;
    }

    void progress() { last_progress_ = std::chrono::steady_clock::now(); }

    void dispatch(int fd) {
        if (!batch_ || batch_->pending.empty()) {
            idle_fds_.push_back(fd);
            return;
        }
        auto it = workers_.find(fd);
        if (it == workers_.end() || !it->second.verified) {
            idle_fds_.push_back(fd);
            return;
        }
        const std::size_t pos = batch_->pending.front();
        batch_->pending.pop_front();
        Task task = (*batch_->tasks)[pos];
        // an all-zero hash means "the pool's scenario"
        if (task.scenario_hash == sha256::Digest{}) task.scenario_hash = cfg_.scenario_hash;
        if (net::send_frame(fd, encode_task(task))) {
            it->second.in_flight = pos;
        } else {
            batch_->pending.push_front(pos);
            drop_worker(fd);
        }
    }

    void record_failure(std::size_t pos, const std::string& reason) {
        TaskResult res;
        res.task_id = (*batch_->tasks)[pos].task_id;
        res.ok = false;
        res.error = reason;
        if (!batch_->results[pos]) {
            batch_->results[pos] = std::move(res);
            --batch_->remaining;
        }
        progress();
    }

    void requeue(std::size_t pos, const std::string& reason) {
        if (!batch_ || batch_->results[pos]) return;
        if (++batch_->attempts[pos] > cfg_.max_retries) {
            record_failure(pos, reason);
            return;
        }
        batch_->pending.push_back(pos);
        // feed an idle worker right away
        if (!idle_fds_.empty()) {
            const int fd = idle_fds_.back();
            idle_fds_.pop_back();
            dispatch(fd);
        }
        progress();
    }

    void drop_worker(int fd) {
        auto it = workers_.find(fd);
        if (it == workers_.end()) return;
        const auto in_flight = it->second.in_flight;
        ::close(fd);
        workers_.erase(it);
        idle_fds_.erase(std::remove(idle_fds_.begin(), idle_fds_.end(), fd), idle_fds_.end());
        if (in_flight && batch_) requeue(*in_flight, "worker died after retries");
    }

    void handle_frame(int fd, const Frame& frame) {
        auto it = workers_.find(fd);
        if (it == workers_.end()) return;
        switch (frame.type) {
            case FrameType::pong: {
                const auto hash = decode_pong(frame);
                if (hash != cfg_.scenario_hash) {
                    net::send_frame(fd, encode_control(FrameType::shutdown));
                    drop_worker(fd);
                    return;
                }
                it->second.verified = true;
                progress();
                break;
            }
            case FrameType::request:
                dispatch(fd);
                break;
            case FrameType::result: {
                const TaskResult res = decode_result(frame);
                const auto pos = it->second.in_flight;
                it->second.in_flight.reset();
                if (batch_ && pos && !batch_->results[*pos]) {
                    batch_->results[*pos] = res;
                    --batch_->remaining;
                }
                progress();
                break;
            }
            case FrameType::mismatch: {
                // the worker refused a task whose hash is not its scenario;
                // the worker stays (the handshake already proved it is loaded
                // correctly), the task retries and then fails
                const auto pos = it->second.in_flight;
                it->second.in_flight.reset();
                if (batch_ && pos) requeue(*pos, "scenario hash mismatch");
                break;
            }
            default:
                break;
        }
    }

    /// One poll round: accept new connections, read every ready frame.
    void pump(int timeout_ms) {
        std::vector<pollfd> fds;
        fds.push_back({listen_fd_, POLLIN, 0});
        for (const auto& [fd, w] : workers_) fds.push_back({fd, POLLIN, 0});
        const int rc = ::poll(fds.data(), fds.size(), timeout_ms);
        if (rc <= 0) return;
        if (fds[0].revents & POLLIN) {
            const int conn = ::accept4(listen_fd_, nullptr, nullptr, SOCK_CLOEXEC);
            if (conn >= 0) {
                const int on = 1;
                ::setsockopt(conn, IPPROTO_TCP, TCP_NODELAY, &on, sizeof on);
                workers_.emplace(conn, WorkerConn{});
                if (!net::send_frame(conn, encode_control(FrameType::ping))) drop_worker(conn);
            }
        }
        for (std::size_t i = 1; i < fds.size(); ++i) {
            if (fds[i].revents & (POLLIN | POLLHUP | POLLERR)) {
                auto frame = net::recv_frame(fds[i].fd);
                if (!frame) {
                    drop_worker(fds[i].fd);
                    continue;
                }
                try {
                    handle_frame(fds[i].fd, *frame);
                } catch (const protocol_error&) {
                    drop_worker(fds[i].fd);
                }
            }
        }
    }

    PoolConfig cfg_;
    std::uint16_t port_;
    int listen_fd_ = -1;
    std::map<int, WorkerConn> workers_;
    std::vector<int> idle_fds_;
    std::vector<pid_t> children_;
    std::optional<BatchState> batch_;
    std::chrono::steady_clock::time_point last_progress_ = std::chrono::steady_clock::now();
};

}  // namespace rarecast::orch
