#pragma once

// Special functions needed by the exponential-family algebra: log-gamma,
// digamma, trigamma and log-beta. All are plain functions of double with no
// global state, so they are safe to call from worker threads. Accuracy is
// better than 1e-12 over the shape ranges the solver visits ([1.5, 20] and
// anything the Newton iteration wanders through).

#include <cmath>
#include <cstdlib>

namespace rarecast::special {

/// ln Gamma(x) for x > 0, Lanczos approximation (g = 7, 9 terms).
inline double log_gamma(double x) {
    static constexpr double kCoef[9] = {
        0.99999999999980993,    676.5203681218851,     -1259.1392167224028,
        771.32342877765313,     -176.61502916214059,   12.507343278686905,
        -0.13857109526572012,   9.9843695780195716e-6, 1.5056327351493116e-7};
    if (x < 0.5) {
        // reflection keeps small shapes usable even though the search box
        // never goes below 1.5
        return std::log(M_PI / std::sin(M_PI * x)) - log_gamma(1.0 - x);
    }
    const double z = x - 1.0;
    double acc = kCoef[0];
    for (int i = 1; i < 9; ++i) acc += kCoef[i] / (z + i);
    const double t = z + 7.5;
    return 0.91893853320467274178 /* ln sqrt(2 pi) */
           + (z + 0.5) * std::log(t) - t + std::log(acc);
}

inline double log_beta(double a, double b) {
    return log_gamma(a) + log_gamma(b) - log_gamma(a + b);
}

/// psi(x) = d/dx ln Gamma(x), x > 0. Recurrence up to x >= 10, then the
/// asymptotic Bernoulli series.
inline double digamma(double x) {
    double acc = 0.0;
    while (x < 10.0) {
        acc -= 1.0 / x;
        x += 1.0;
    }
    const double inv = 1.0 / x;
    const double inv2 = inv * inv;
    double series = std::log(x) - 0.5 * inv;
    series -= inv2 * (1.0 / 12.0 - inv2 * (1.0 / 120.0 - inv2 * (1.0 / 252.0 - inv2 * (1.0 / 240.0 - inv2 * (1.0 / 132.0 - inv2 * (691.0 / 32760.0 - inv2 / 12.0))))));
    return acc + series;
}

/// psi'(x), x > 0. Same recurrence-plus-series scheme.
inline double trigamma(double x) {
    double acc = 0.0;
    while (x < 10.0) {
        acc += 1.0 / (x * x);
        x += 1.0;
    }
    const double inv = 1.0 / x;
    const double inv2 = inv * inv;
    double series = inv * (1.0 + 0.5 * inv);
    series += inv * inv2 * (1.0 / 6.0 - inv2 * (1.0 / 30.0 - inv2 * (1.0 / 42.0 - inv2 * (1.0 / 30.0 - inv2 * (5.0 / 66.0 - inv2 * (691.0 / 2730.0 - inv2 * 7.0 / 6.0))))));
    return acc + series;
}

}  // namespace rarecast::special
