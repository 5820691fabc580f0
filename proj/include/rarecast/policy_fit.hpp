#pragma once

// Produces the reference environment-policy weights and their covariance.
// mu0 is the ridge least-squares projection of the scripted lane-keeping
// controller onto the linear policy class, fitted over a synthetic sweep of
// observations; Sigma0 is the per-action-row parameter covariance implied by
// the fit residuals, diagonally loaded and assembled block-diagonal over the
// two action rows. Everything is a deterministic function of the seed.

#include <cmath>
#include <cstdint>
#include <vector>

#include "rarecast/linalg.hpp"
#include "rarecast/rng.hpp"
#include "rarecast/sim.hpp"

namespace rarecast::policy_fit {

struct FitConfig {
    std::size_t fan_beams = 5;
    sim::RoadGeometry road;
    double max_range = 100.0;
    std::size_t samples = 4096;
    std::uint64_t seed = 20240401;
    double spread = 10.0;        // widens the parameter covariance into a usable ensemble
    double design_load = 0.05;   // regularizes the (collinear) design moment matrix
    double diag_load = 1e-4;     // keeps Sigma0 positive definite
};

struct FitResult {
    std::vector<double> mu0;         // 2F weights, acceleration row first
    std::vector<double> sigma_chol;  // packed lower Cholesky factor of Sigma0
    double residual_sd_accel = 0.0;
    double residual_sd_steer = 0.0;
};

inline FitResult fit_reference_policy(const FitConfig& cfg) {
    const std::size_t F = sim::policy_feature_dim(cfg.fan_beams);
    rng::Sampler s(cfg.seed);
    const auto angles = sim::policy_angles(cfg.fan_beams);

    std::vector<double> xtx(F * F, 0.0);
    std::vector<double> xty_a(F, 0.0), xty_s(F, 0.0);
    std::vector<std::vector<double>> feats;
    std::vector<double> ys_a, ys_s;
    feats.reserve(cfg.samples);

    for (std::size_t m = 0; m < cfg.samples; ++m) {
        sim::VehicleState v;
        const auto lane = static_cast<std::size_t>(s.uniform01() * cfg.road.lane_count);
        v.y = cfg.road.lane_center(std::min(lane, cfg.road.lane_count - 1)) +
              s.uniform(-0.5, 0.5) * cfg.road.lane_width_m;
        v.heading = s.uniform(-0.25, 0.25);
        v.speed = s.uniform(2.0, 38.0);
        sim::LidarScan fan;
        fan.angles = angles;
        fan.ranges.resize(cfg.fan_beams);
        fan.range_rates.resize(cfg.fan_beams);
        for (std::size_t b = 0; b < cfg.fan_beams; ++b) {
            if (s.uniform01() < 0.5) {
                fan.ranges[b] = cfg.max_range;
                fan.range_rates[b] = 0.0;
            } else {
                fan.ranges[b] = s.uniform(2.0, cfg.max_range);
                fan.range_rates[b] = s.uniform(-20.0, 20.0);
            }
        }
        const auto f = sim::policy_features(v, fan, cfg.road, cfg.max_range);
        const auto act = sim::scripted_lane_keep(v, fan, cfg.road, cfg.max_range);
        for (std::size_t i = 0; i < F; ++i) {
            for (std::size_t j = 0; j < F; ++j) xtx[i * F + j] += f[i] * f[j];
            xty_a[i] += f[i] * act.accel;
            xty_s[i] += f[i] * act.steer_rate;
        }
        feats.push_back(f);
        ys_a.push_back(act.accel);
        ys_s.push_back(act.steer_rate);
    }

    // ridge solve per action row; the lane features are exactly collinear so
    // a small ridge is required for a unique solution
    double trace = 0.0;
    for (std::size_t i = 0; i < F; ++i) trace += xtx[i * F + i];
    const double ridge = 1e-6 * trace / static_cast<double>(F);
    std::vector<double> xtx_r = xtx;
    for (std::size_t i = 0; i < F; ++i) xtx_r[i * F + i] += ridge;
    std::vector<double> w_a = xty_a, w_s = xty_s;
    linalg::spd_solve(xtx_r, F, w_a);
    linalg::spd_solve(xtx_r, F, w_s);

    auto residual_var = [&](const std::vector<double>& w, const std::vector<double>& y) {
        double ss = 0.0;
        for (std::size_t m = 0; m < cfg.samples; ++m) {
            double pred = 0.0;
            for (std::size_t i = 0; i < F; ++i) pred += w[i] * feats[m][i];
            const double r = y[m] - pred;
            ss += r * r;
        }
        return ss / static_cast<double>(cfg.samples - F);
    };
    const double var_a = residual_var(w_a, ys_a);
    const double var_s = residual_var(w_s, ys_s);

    // per-row covariance: spread^2 * sigma^2 * inv(XtX/M + load*I) / M
    const double inv_m = 1.0 / static_cast<double>(cfg.samples);
    std::vector<double> moment(F * F);
    for (std::size_t i = 0; i < F * F; ++i) moment[i] = xtx[i] * inv_m;
    for (std::size_t i = 0; i < F; ++i) moment[i * F + i] += cfg.design_load;
    const auto moment_inv = linalg::spd_inverse(moment, F);

    const std::size_t d = 2 * F;
    std::vector<double> sigma(d * d, 0.0);
    for (std::size_t r = 0; r < F; ++r) {
        for (std::size_t c = 0; c < F; ++c) {
            const double base = cfg.spread * cfg.spread * moment_inv[r * F + c] * inv_m;
            sigma[r * d + c] = var_a * base;
            sigma[(F + r) * d + (F + c)] = var_s * base;
        }
    }
    for (std::size_t i = 0; i < d; ++i) sigma[i * d + i] += cfg.diag_load;

    FitResult out;
    out.mu0.reserve(d);
    out.mu0.insert(out.mu0.end(), w_a.begin(), w_a.end());
    out.mu0.insert(out.mu0.end(), w_s.begin(), w_s.end());
    out.sigma_chol = linalg::cholesky_packed(sigma, d);
    out.residual_sd_accel = std::sqrt(var_a);
    out.residual_sd_steer = std::sqrt(var_s);
    return out;
}

}  // namespace rarecast::policy_fit
