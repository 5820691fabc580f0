#pragma once

// Deterministic 2D multi-agent highway simulator. Vehicles are oriented
// rectangles on a straight multi-lane road under kinematic unicycle dynamics
// (acceleration, steering-rate). The ego carries a virtual lidar: the safety
// objective is the minimum over the rollout of the per-step beam TTC
// min_i -s_i / sdot_i over closing beams. Environment vehicles drive a linear
// policy on a fixed feature vector; the ego policy is a black box behind
// EgoPolicy.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <optional>
#include <span>
#include <stdexcept>
#include <vector>

#include "rarecast/geometry.hpp"
#include "rarecast/tasks.hpp"

namespace rarecast::sim {

struct VehicleState {
    double x = 0.0;        // m, along the road
    double y = 0.0;        // m, lateral; lane 0 starts at y = 0
    double heading = 0.0;  // rad, 0 = road direction
    double speed = 0.0;    // m/s, >= 0
    double length = 4.8;   // m
    double width = 1.9;    // m
};

inline geom::Vec2 velocity(const VehicleState& v) {
    return {v.speed * std::cos(v.heading), v.speed * std::sin(v.heading)};
}

inline geom::OrientedRect footprint(const VehicleState& v) {
    return geom::OrientedRect::from_pose(v.x, v.y, v.heading, v.length, v.width);
}

struct RoadGeometry {
    double length_m = 2000.0;
    std::size_t lane_count = 6;
    double lane_width_m = 3.7;

    double width() const { return static_cast<double>(lane_count) * lane_width_m; }
    double lane_center(std::size_t lane) const {
        return (static_cast<double>(lane) + 0.5) * lane_width_m;
    }
    std::size_t lane_index(double y) const {
        const auto raw = static_cast<std::int64_t>(std::floor(y / lane_width_m));
        return static_cast<std::size_t>(std::clamp<std::int64_t>(
            raw, 0, static_cast<std::int64_t>(lane_count) - 1));
    }
};

struct LidarScan {
    std::vector<double> ranges;       // m, (0, max_range]
    std::vector<double> range_rates;  // m/s, 0 for misses
    std::vector<double> angles;       // rad, relative to the caster's heading
};

struct Action {
    double accel = 0.0;       // m/s^2
    double steer_rate = 0.0;  // rad/s
};

inline constexpr double kAccelMin = -8.0;
inline constexpr double kAccelMax = 4.0;
inline constexpr double kSteerRateMax = 0.5;

struct MeasureConfig {
    std::size_t n_beams = 20;
    double max_range = 100.0;
    double gamma = 0.14;  // default rare-event threshold, seconds of TTC
};

/// Beam directions for the safety measure: n uniformly spaced angles over
/// [0, 2*pi) relative to the ego heading.
inline std::vector<double> uniform_angles(std::size_t n) {
    std::vector<double> a(n);
    for (std::size_t j = 0; j < n; ++j) a[j] = 2.0 * M_PI * static_cast<double>(j) / static_cast<double>(n);
    return a;
}

/// Ray casting core shared by the safety measure and the policy observation:
/// one beam per relative angle, range to the nearest rectangle boundary and
/// the hit vehicle's relative velocity projected on the beam.
inline LidarScan cast_fan(const VehicleState& self, std::span<const VehicleState> others,
                          std::span<const double> rel_angles, double max_range) {
    LidarScan scan;
    const std::size_t n = rel_angles.size();
    scan.ranges.resize(n);
    scan.range_rates.assign(n, 0.0);
    scan.angles.assign(rel_angles.begin(), rel_angles.end());
    std::vector<geom::OrientedRect> rects;
    rects.reserve(others.size());
    for (const auto& v : others) rects.push_back(footprint(v));
    const geom::Vec2 origin{self.x, self.y};
    const geom::Vec2 self_vel = velocity(self);
    for (std::size_t j = 0; j < n; ++j) {
        const double a = self.heading + rel_angles[j];
        const geom::Vec2 dir{std::cos(a), std::sin(a)};
        double best = max_range;
        std::size_t hit = others.size();
        for (std::size_t i = 0; i < rects.size(); ++i) {
            const auto t = geom::ray_rect_boundary(origin, dir, rects[i]);
            if (t && *t < best) {
                best = *t;
                hit = i;
            }
        }
        scan.ranges[j] = std::max(best, 1e-9);
        if (hit < others.size()) {
            const geom::Vec2 rel{velocity(others[hit]).x - self_vel.x,
                                 velocity(others[hit]).y - self_vel.y};
            scan.range_rates[j] = geom::dot(rel, dir);
        }
    }
    return scan;
}

/// Safety-measure scan: full 360-degree coverage from the ego center.
inline LidarScan cast_rays(const VehicleState& ego, std::span<const VehicleState> others,
                           std::size_t n_beams, double max_range) {
    if (n_beams < 4) throw std::invalid_argument("n_beams must be >= 4");
    const auto angles = uniform_angles(n_beams);
    return cast_fan(ego, others, angles, max_range);
}

/// min over closing beams (sdot < 0) of -s/sdot; +inf when nothing closes.
inline double beam_ttc(const LidarScan& scan) {
    double best = std::numeric_limits<double>::infinity();
    for (std::size_t j = 0; j < scan.ranges.size(); ++j)
        if (scan.range_rates[j] < 0.0)
            best = std::min(best, -scan.ranges[j] / scan.range_rates[j]);
    return best;
}

/// Lowest index of a vehicle whose rectangle intersects the ego's.
inline std::optional<std::size_t> check_crash(const VehicleState& ego,
                                              std::span<const VehicleState> others) {
    const auto ego_rect = footprint(ego);
    for (std::size_t i = 0; i < others.size(); ++i)
        if (geom::rects_intersect(ego_rect, footprint(others[i]))) return i;
    return std::nullopt;
}

/// Kinematic update, in this order: heading, speed (floored at zero), then
/// position with the updated values.
inline void step(std::span<VehicleState> world, std::span<const Action> actions, double dt) {
    if (world.size() != actions.size()) throw std::invalid_argument("world/actions size mismatch");
    if (!(dt > 0.0)) throw std::invalid_argument("dt must be positive");
    for (std::size_t i = 0; i < world.size(); ++i) {
        auto& v = world[i];
        v.heading += actions[i].steer_rate * dt;
        v.speed = std::max(0.0, v.speed + actions[i].accel * dt);
        v.x += v.speed * std::cos(v.heading) * dt;
        v.y += v.speed * std::sin(v.heading) * dt;
    }
}

// ---------------------------------------------------------------------------
// Policy observation and the linear environment policy.

inline constexpr std::size_t kBaseFeatures = 6;  // bias, speed, lat, heading, left, right
inline constexpr double kSpeedScale = 40.0;      // m/s mapped onto [0,1]
inline constexpr double kRateScale = 40.0;       // |range rate| clamp, m/s
inline constexpr double kHeadingClamp = M_PI / 4.0;

/// Forward fan for policy observations: n beams spread uniformly over
/// [-pi/4, pi/4] around the vehicle heading.
inline std::vector<double> policy_angles(std::size_t n) {
    std::vector<double> a(n);
    for (std::size_t j = 0; j < n; ++j)
        a[j] = -0.25 * M_PI + 0.5 * M_PI * (static_cast<double>(j) + 0.5) / static_cast<double>(n);
    return a;
}

inline std::size_t policy_feature_dim(std::size_t fan_beams) {
    return kBaseFeatures + 2 * fan_beams;
}

/// Number of fan beams implied by a weight dimension d = 2 * (6 + 2n);
/// throws when d has no valid decomposition.
inline std::size_t policy_beams_for_dim(std::size_t d) {
    if (d < 2 * kBaseFeatures || d % 4 != 0)
        throw std::invalid_argument("policy dim must be 12 + 4n for integer n >= 0");
    return (d - 2 * kBaseFeatures) / 4;
}

inline double wrap_angle(double a) {
    while (a >= M_PI) a -= 2.0 * M_PI;
    while (a < -M_PI) a += 2.0 * M_PI;
    return a;
}

/// The fixed observation map: every entry clamped and scaled to [0, 1], plus
/// a leading bias of 1.
inline std::vector<double> policy_features(const VehicleState& v, const LidarScan& fan,
                                           const RoadGeometry& road, double max_range) {
    std::vector<double> f;
    f.reserve(policy_feature_dim(fan.ranges.size()));
    const double w = road.lane_width_m;
    const std::size_t lane = road.lane_index(v.y);
    const double offset = v.y - road.lane_center(lane);
    const double heading = std::clamp(wrap_angle(v.heading), -kHeadingClamp, kHeadingClamp);
    f.push_back(1.0);
    f.push_back(std::clamp(v.speed / kSpeedScale, 0.0, 1.0));
    f.push_back(std::clamp((offset + 0.5 * w) / w, 0.0, 1.0));
    f.push_back((heading + kHeadingClamp) / (2.0 * kHeadingClamp));
    f.push_back(std::clamp(((static_cast<double>(lane) + 1.0) * w - v.y) / w, 0.0, 1.0));
    f.push_back(std::clamp((v.y - static_cast<double>(lane) * w) / w, 0.0, 1.0));
    for (double s : fan.ranges) f.push_back(std::clamp(s / max_range, 0.0, 1.0));
    for (double r : fan.range_rates)
        f.push_back((std::clamp(r, -kRateScale, kRateScale) + kRateScale) / (2.0 * kRateScale));
    return f;
}

/// Environment-driver policy: action = weight matrix times features, clamped
/// to the actuation limits. xi is row-major, acceleration row first.
inline Action env_policy_act(std::span<const double> xi, const VehicleState& v,
                             const LidarScan& fan, const RoadGeometry& road, double max_range) {
    const auto f = policy_features(v, fan, road, max_range);
    if (xi.size() != 2 * f.size())
        throw std::invalid_argument("policy weight dimension does not match features");
    double accel = 0.0, steer = 0.0;
    for (std::size_t j = 0; j < f.size(); ++j) {
        accel += xi[j] * f[j];
        steer += xi[f.size() + j] * f[j];
    }
    return {std::clamp(accel, kAccelMin, kAccelMax),
            std::clamp(steer, -kSteerRateMax, kSteerRateMax)};
}

inline constexpr double kForwardCone = 0.45;  // rad, beams counted as "ahead"

/// Time to collision straight ahead, taken over the near-center fan beams;
/// +inf when nothing there is closing.
inline double forward_ttc(const LidarScan& fan) {
    double best = std::numeric_limits<double>::infinity();
    for (std::size_t j = 0; j < fan.ranges.size(); ++j)
        if (std::abs(fan.angles[j]) <= kForwardCone && fan.range_rates[j] < 0.0)
            best = std::min(best, -fan.ranges[j] / fan.range_rates[j]);
    return best;
}

/// Nearest return among the forward beams, closing or not.
inline double forward_range(const LidarScan& fan, double max_range) {
    double best = max_range;
    for (std::size_t j = 0; j < fan.ranges.size(); ++j)
        if (std::abs(fan.angles[j]) <= kForwardCone) best = std::min(best, fan.ranges[j]);
    return best;
}

namespace scripted {
inline constexpr double kLateralGain = 0.04;   // rad/s per m of offset
inline constexpr double kHeadingGain = 2.2;    // rad/s per rad
inline constexpr double kSpeedGain = 0.15;     // 1/s toward the cruise speed
inline constexpr double kCruiseSpeed = 17.0;   // m/s
inline constexpr double kBrakeTtc = 4.0;       // s, start braking below this
inline constexpr double kBrakeStrength = 8.0;  // m/s^2 at zero TTC
inline constexpr double kHeadwayFloor = 5.0;   // m, desired standstill gap
inline constexpr double kHeadwayTime = 1.0;    // s, desired time headway
inline constexpr double kGapGain = 4.0;        // m/s^2 at zero forward gap
}  // namespace scripted

/// Reference lane-keeping controller: linear lane centering and speed hold on
/// the observation features, plus nonlinear braking on the forward TTC and on
/// headway shortfall. Used as the default ego policy and as the teacher for
/// the environment-policy weights.
inline Action scripted_lane_keep(const VehicleState& v, const LidarScan& fan,
                                 const RoadGeometry& road, double max_range) {
    const auto f = policy_features(v, fan, road, max_range);
    const double w = road.lane_width_m;
    const double offset = w * f[2] - 0.5 * w;
    const double heading = 2.0 * kHeadingClamp * f[3] - kHeadingClamp;
    const double speed = kSpeedScale * f[1];
    double accel = scripted::kSpeedGain * (scripted::kCruiseSpeed - speed);
    const double ttc = forward_ttc(fan);
    if (ttc < scripted::kBrakeTtc)
        accel -= scripted::kBrakeStrength * (1.0 - ttc / scripted::kBrakeTtc);
    // ranges are measured from the center; keep headway bumper-to-boundary
    const double gap = forward_range(fan, max_range) - 0.5 * v.length;
    const double d_safe = scripted::kHeadwayFloor + scripted::kHeadwayTime * speed;
    if (gap < d_safe) accel -= scripted::kGapGain * (d_safe - gap) / d_safe;
    const double steer = -scripted::kLateralGain * offset - scripted::kHeadingGain * heading;
    return {std::clamp(accel, kAccelMin, kAccelMax),
            std::clamp(steer, -kSteerRateMax, kSteerRateMax)};
}

/// Black-box system under test. Implementations must be safe for concurrent
/// calls or run one instance per worker process.
class EgoPolicy {
  public:
    virtual ~EgoPolicy() = default;
    virtual Action act(const VehicleState& self, const LidarScan& fan, const RoadGeometry& road,
                       double max_range) = 0;
};

class LaneKeepEgo final : public EgoPolicy {
  public:
    Action act(const VehicleState& self, const LidarScan& fan, const RoadGeometry& road,
               double max_range) override {
        return scripted_lane_keep(self, fan, road, max_range);
    }
};

/// Holds heading and speed no matter what; useful as a non-reactive test ego.
class ConstantEgo final : public EgoPolicy {
  public:
    Action act(const VehicleState&, const LidarScan&, const RoadGeometry&, double) override {
        return {0.0, 0.0};
    }
};

struct diverged_error : std::runtime_error {
    diverged_error() : std::runtime_error("diverged") {}
};

struct SimConfig {
    RoadGeometry road;
    MeasureConfig measure;
    double dt = 0.1;
    double horizon_s = 60.0;
    std::size_t policy_beams = 5;
};

struct TraceRow {
    std::size_t step = 0;
    std::size_t vehicle = 0;
    double x = 0.0, y = 0.0, heading = 0.0, speed = 0.0;
};

/// Advance the world until horizon, road end or an ego crash. world[0] is the
/// ego; all environment vehicles share the policy weights xi. Each step:
/// measure the ego scan, fold its beam TTC into the running minimum, stop on
/// body intersection, otherwise query policies and integrate. Environment
/// vehicles never collide with each other; only ego contact ends a rollout.
inline RolloutResult simulate(std::vector<VehicleState> world, std::span<const double> xi,
                              EgoPolicy& ego, const SimConfig& cfg,
                              std::vector<TraceRow>* trace = nullptr) {
    if (world.empty()) throw std::invalid_argument("simulate needs at least the ego vehicle");
    const auto max_steps = static_cast<std::size_t>(std::ceil(cfg.horizon_s / cfg.dt));
    const auto measure_angles = uniform_angles(cfg.measure.n_beams);
    const auto fan_angles = policy_angles(cfg.policy_beams);

    RolloutResult result;
    double min_ttc = std::numeric_limits<double>::infinity();
    std::vector<VehicleState> others_buf(world.size() > 1 ? world.size() - 1 : 0);
    std::vector<Action> actions(world.size());

    auto gather_others = [&](std::size_t self) {
        others_buf.clear();
        for (std::size_t i = 0; i < world.size(); ++i)
            if (i != self) others_buf.push_back(world[i]);
        return std::span<const VehicleState>(others_buf);
    };

    std::size_t executed = 0;
    for (std::size_t s = 0;; ++s) {
        if (trace)
            for (std::size_t i = 0; i < world.size(); ++i)
                trace->push_back({s, i, world[i].x, world[i].y, world[i].heading, world[i].speed});

        const auto others = gather_others(0);
        const auto measure_scan = cast_fan(world[0], others, measure_angles, cfg.measure.max_range);
        min_ttc = std::min(min_ttc, beam_ttc(measure_scan));
        if (check_crash(world[0], others)) {
            result.crashed = true;
            result.crash_step = static_cast<std::int64_t>(s);
            break;
        }
        if (s >= max_steps) break;
        if (world[0].x >= cfg.road.length_m) break;

        {
            const auto ego_fan = cast_fan(world[0], others, fan_angles, cfg.measure.max_range);
            actions[0] = ego.act(world[0], ego_fan, cfg.road, cfg.measure.max_range);
        }
        for (std::size_t i = 1; i < world.size(); ++i) {
            const auto fan = cast_fan(world[i], gather_others(i), fan_angles, cfg.measure.max_range);
            actions[i] = env_policy_act(xi, world[i], fan, cfg.road, cfg.measure.max_range);
        }
        step(world, actions, cfg.dt);
        ++executed;
        for (const auto& v : world)
            if (!std::isfinite(v.x) || !std::isfinite(v.y) || !std::isfinite(v.heading) ||
                !std::isfinite(v.speed))
                throw diverged_error{};
    }

    result.min_ttc = std::min(min_ttc, kMinTtcSentinel);
    result.steps = executed;
    return result;
}

}  // namespace rarecast::sim
