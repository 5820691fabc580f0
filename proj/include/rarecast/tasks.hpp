#pragma once

// Shared contracts between the CE controller, the simulator and the
// orchestrator: one rollout task, its result, and the provider interface the
// CE loop schedules batches through.

#include <array>
#include <cstdint>
#include <functional>
#include <stdexcept>
#include <string>
#include <vector>

namespace rarecast {

/// Reported objective for rollouts where nothing ever closes on the ego;
/// keeps serialized values finite.
inline constexpr double kMinTtcSentinel = 1e9;

/// Outcome of one simulation rollout. `min_ttc` is the objective f(X).
struct RolloutResult {
    double min_ttc = kMinTtcSentinel;
    bool crashed = false;
    std::int64_t crash_step = -1;  // valid iff crashed
    std::uint64_t steps = 0;
    double log_p0 = 0.0;  // log base density of the input sample
    std::uint64_t seed = 0;
};

struct Task {
    std::uint64_t task_id = 0;
    std::vector<double> sample;
    std::uint64_t seed = 0;
    std::array<std::uint8_t, 32> scenario_hash{};
};

struct TaskResult {
    std::uint64_t task_id = 0;
    bool ok = false;
    RolloutResult result;
    std::string error;
};

/// Executes a batch of tasks and returns results sorted by task_id, equal to
/// what a serial in-process loop over the same tasks would produce.
class RolloutProvider {
  public:
    virtual ~RolloutProvider() = default;
    virtual std::vector<TaskResult> run_batch(const std::vector<Task>& tasks) = 0;
};

/// In-process serial execution; the reference ordering every other provider
/// must match bit for bit.
class SerialRunner final : public RolloutProvider {
  public:
    using Fn = std::function<TaskResult(const Task&)>;
    explicit SerialRunner(Fn fn) : fn_(std::move(fn)) {}

    std::vector<TaskResult> run_batch(const std::vector<Task>& tasks) override {
        std::vector<TaskResult> out;
        out.reserve(tasks.size());
        for (const auto& t : tasks) out.push_back(fn_(t));
        return out;
    }

  private:
    Fn fn_;
};

}  // namespace rarecast
