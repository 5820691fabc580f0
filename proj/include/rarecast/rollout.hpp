#pragma once

// Binds a scenario to the simulator: sample layout -> initial world state,
// ego-policy construction, and the per-task rollout function used by both the
// in-process runner and the socket workers.
//
// Sample layout for m vehicles (m - 1 environment vehicles) and policy
// dimension d, matching the family block order:
//   [ S_1..S_{m-1} | T_1..T_{m-1} | W_1..W_{m-1} | V_1..V_{m-1} | xi_1..xi_d ]
// W values are degrees in the sample and converted once at initialization.

#include <memory>
#include <span>
#include <vector>

#include "rarecast/expfam.hpp"
#include "rarecast/scenario.hpp"
#include "rarecast/sim.hpp"
#include "rarecast/tasks.hpp"

namespace rarecast::sim {

inline constexpr double kDegToRad = M_PI / 180.0;

inline std::unique_ptr<EgoPolicy> make_ego_policy(const scenario::ScenarioSpec& spec) {
    if (spec.ego_policy == "constant") return std::make_unique<ConstantEgo>();
    return std::make_unique<LaneKeepEgo>();
}

inline SimConfig make_sim_config(const scenario::ScenarioSpec& spec) {
    SimConfig cfg;
    cfg.road = spec.road;
    cfg.measure = spec.measure;
    cfg.dt = spec.dt;
    cfg.horizon_s = spec.horizon_s;
    cfg.policy_beams = policy_beams_for_dim(spec.policy_dim);
    return cfg;
}

/// Initial vehicle states for one sampled realization; index 0 is the ego,
/// which comes from the scenario file rather than the sample.
inline std::vector<VehicleState> build_world(const scenario::ScenarioSpec& spec,
                                             std::span<const double> sample) {
    const std::size_t env = spec.vehicle_count - 1;
    if (sample.size() != 4 * env + spec.policy_dim)
        throw std::invalid_argument("sample dimension does not match the scenario");
    std::vector<VehicleState> world;
    world.reserve(spec.vehicle_count);
    VehicleState ego;
    ego.x = spec.ego_x;
    ego.y = spec.road.lane_center(spec.ego_lane) + spec.ego_t;
    ego.heading = spec.ego_heading_deg * kDegToRad;
    ego.speed = spec.ego_speed;
    ego.length = spec.ego_length;
    ego.width = spec.ego_width;
    world.push_back(ego);
    for (std::size_t i = 0; i < env; ++i) {
        VehicleState v;
        v.x = sample[i];
        v.y = spec.road.lane_center(spec.env_lanes[i]) + sample[env + i];
        v.heading = sample[2 * env + i] * kDegToRad;
        v.speed = sample[3 * env + i];
        v.length = spec.env_length;
        v.width = spec.env_width;
        world.push_back(v);
    }
    return world;
}

/// One rollout: world from the sample, shared policy weights from its tail,
/// log base density attached for downstream reweighting.
inline RolloutResult rollout(std::span<const double> sample, const scenario::ScenarioSpec& spec,
                             const expfam::FamilySpec& family, const expfam::ParamPoint& theta0,
                             EgoPolicy& ego, std::uint64_t seed,
                             std::vector<TraceRow>* trace = nullptr) {
    const std::size_t env = spec.vehicle_count - 1;
    auto world = build_world(spec, sample);
    const auto xi = sample.subspan(4 * env, spec.policy_dim);
    auto result = simulate(std::move(world), xi, ego, make_sim_config(spec), trace);
    result.log_p0 = expfam::log_density(family, theta0, sample);
    result.seed = seed;
    return result;
}

/// Everything a task executor needs for one scenario, constructed once and
/// reused across tasks. Callable on any thread; the ego policies shipped here
/// are stateless.
class ScenarioRuntime {
  public:
    explicit ScenarioRuntime(scenario::ScenarioSpec spec) : spec_(std::move(spec)) {
        auto fam = scenario::base_family(spec_);
        family_ = std::move(fam.first);
        theta0_ = std::move(fam.second);
        ego_ = make_ego_policy(spec_);
        hash_ = scenario::content_hash(spec_);
    }

    const scenario::ScenarioSpec& spec() const { return spec_; }
    const expfam::FamilySpec& family() const { return family_; }
    const expfam::ParamPoint& theta0() const { return theta0_; }
    const sha256::Digest& hash() const { return hash_; }

    TaskResult execute(const Task& task) const {
        TaskResult out;
        out.task_id = task.task_id;
        try {
            out.result = rollout(task.sample, spec_, family_, theta0_, *ego_, task.seed);
            out.ok = true;
        } catch (const diverged_error&) {
            out.error = "diverged";
        } catch (const std::exception& e) {
            out.error = e.what();
        }
        return out;
    }

    SerialRunner::Fn task_fn() const {
        return [this](const Task& t) { return execute(t); };
    }

  private:
    scenario::ScenarioSpec spec_;
    expfam::FamilySpec family_;
    expfam::ParamPoint theta0_;
    std::unique_ptr<EgoPolicy> ego_;
    sha256::Digest hash_{};
};

}  // namespace rarecast::sim
