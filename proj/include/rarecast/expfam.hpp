#pragma once

// Natural exponential families used as importance samplers: products of
// scaled Beta blocks (one coordinate each) and fixed-covariance Gaussian
// blocks. The family description (support, covariance, search boxes) is
// separate from a concrete parameter point (Beta shapes, Gaussian means),
// and both are immutable value types.
//
// Sufficient-statistic layout, in block order:
//   Beta block on [lo, hi]        -> (ln u, ln(1 - u)),  u = (x - lo)/(hi - lo)
//   Gaussian block of dimension d -> the d raw coordinates
// Mean parameters follow the same layout: (psi(a) - psi(a+b), psi(b) - psi(a+b))
// per Beta block, mu per Gaussian block.

#include <cmath>
#include <cstdint>
#include <limits>
#include <span>
#include <stdexcept>
#include <string>
#include <variant>
#include <vector>

#include "rarecast/linalg.hpp"
#include "rarecast/rng.hpp"
#include "rarecast/special.hpp"

namespace rarecast::expfam {

inline constexpr double kUnitClamp = 1e-12;  // Beta boundary guard for ln u
inline constexpr double kBetaShapeMin = 1.5;
inline constexpr double kBetaShapeMax = 7.0;

/// Scaled Beta on [lo, hi]; search iterates keep both shapes in
/// [shape_min, shape_max].
struct BetaBlock {
    double lo = 0.0;
    double hi = 1.0;
    double shape_min = kBetaShapeMin;
    double shape_max = kBetaShapeMax;
};

/// Gaussian with fixed covariance; only the mean moves, inside the box
/// ||mu - mu0||_inf <= box. `chol` is the packed lower Cholesky factor of the
/// covariance.
struct GaussianBlock {
    std::size_t dim = 0;
    std::vector<double> mu0;
    std::vector<double> chol;
    double box = 0.0;
};

using Block = std::variant<BetaBlock, GaussianBlock>;

struct FamilySpec {
    std::vector<Block> blocks;

    std::size_t sample_dim() const {
        std::size_t n = 0;
        for (const auto& b : blocks)
            n += std::holds_alternative<BetaBlock>(b) ? 1 : std::get<GaussianBlock>(b).dim;
        return n;
    }
    std::size_t stat_dim() const {
        std::size_t n = 0;
        for (const auto& b : blocks)
            n += std::holds_alternative<BetaBlock>(b) ? 2 : std::get<GaussianBlock>(b).dim;
        return n;
    }
};

struct BetaParams {
    double alpha = 2.0;
    double beta = 2.0;
};
struct GaussianParams {
    std::vector<double> mu;
};
using BlockParams = std::variant<BetaParams, GaussianParams>;

struct ParamPoint {
    std::vector<BlockParams> blocks;
};

/// Moment-matching Newton solve did not reach tolerance; carries the final
/// residual so the CE loop can log it and keep the previous iterate.
struct newton_failure : std::runtime_error {
    double residual;
    explicit newton_failure(double r)
        : std::runtime_error("moment match did not converge, residual " + std::to_string(r)),
          residual(r) {}
};

inline void check_match(const FamilySpec& family, const ParamPoint& theta) {
    if (family.blocks.size() != theta.blocks.size())
        throw std::invalid_argument("family/theta block count mismatch");
    for (std::size_t i = 0; i < family.blocks.size(); ++i) {
        const bool fam_beta = std::holds_alternative<BetaBlock>(family.blocks[i]);
        const bool par_beta = std::holds_alternative<BetaParams>(theta.blocks[i]);
        if (fam_beta != par_beta) throw std::invalid_argument("family/theta block kind mismatch");
        if (!fam_beta &&
            std::get<GaussianBlock>(family.blocks[i]).dim != std::get<GaussianParams>(theta.blocks[i]).mu.size())
            throw std::invalid_argument("family/theta Gaussian dimension mismatch");
    }
}

inline void check_sample_dim(const FamilySpec& family, std::span<const double> x) {
    if (x.size() != family.sample_dim())
        throw std::invalid_argument("sample dimension mismatch");
}

/// True when every block of theta satisfies its search-box constraint.
inline bool satisfies_box(const FamilySpec& family, const ParamPoint& theta) {
    check_match(family, theta);
    for (std::size_t i = 0; i < family.blocks.size(); ++i) {
        if (const auto* bb = std::get_if<BetaBlock>(&family.blocks[i])) {
            const auto& p = std::get<BetaParams>(theta.blocks[i]);
            if (p.alpha < bb->shape_min || p.alpha > bb->shape_max) return false;
            if (p.beta < bb->shape_min || p.beta > bb->shape_max) return false;
        } else {
            const auto& gb = std::get<GaussianBlock>(family.blocks[i]);
            const auto& p = std::get<GaussianParams>(theta.blocks[i]);
            for (std::size_t j = 0; j < gb.dim; ++j)
                if (std::abs(p.mu[j] - gb.mu0[j]) > gb.box + 1e-15) return false;
        }
    }
    return true;
}

namespace detail {

inline double beta_log_density(const BetaBlock& b, const BetaParams& p, double x) {
    const double width = b.hi - b.lo;
    const double u_raw = (x - b.lo) / width;
    if (u_raw < 0.0 || u_raw > 1.0) return -std::numeric_limits<double>::infinity();
    const double u = std::min(1.0 - kUnitClamp, std::max(kUnitClamp, u_raw));
    return (p.alpha - 1.0) * std::log(u) + (p.beta - 1.0) * std::log1p(-u) -
           special::log_beta(p.alpha, p.beta) - std::log(width);
}

inline double gaussian_log_density(const GaussianBlock& g, const GaussianParams& p,
                                   std::span<const double> x) {
    std::vector<double> y(g.dim);
    for (std::size_t j = 0; j < g.dim; ++j) y[j] = x[j] - p.mu[j];
    linalg::forward_solve_packed(g.chol, g.dim, y);
    double quad = 0.0, log_det = 0.0;
    for (std::size_t j = 0; j < g.dim; ++j) {
        quad += y[j] * y[j];
        log_det += std::log(linalg::packed_at(g.chol, j, j));
    }
    return -0.5 * quad - log_det - 0.5 * static_cast<double>(g.dim) * std::log(2.0 * M_PI);
}

inline double gaussian_quad_form(const GaussianBlock& g, std::span<const double> mu,
                                 std::span<const double> x) {
    std::vector<double> y(g.dim);
    for (std::size_t j = 0; j < g.dim; ++j) y[j] = x[j] - mu[j];
    linalg::forward_solve_packed(g.chol, g.dim, y);
    double quad = 0.0;
    for (std::size_t j = 0; j < g.dim; ++j) quad += y[j] * y[j];
    return quad;
}

}  // namespace detail

/// ln p_theta(x), including the scale Jacobian of each Beta block; -inf for
/// points outside a Beta support.
inline double log_density(const FamilySpec& family, const ParamPoint& theta,
                          std::span<const double> x) {
    check_match(family, theta);
    check_sample_dim(family, x);
    double total = 0.0;
    std::size_t off = 0;
    for (std::size_t i = 0; i < family.blocks.size(); ++i) {
        if (const auto* bb = std::get_if<BetaBlock>(&family.blocks[i])) {
            total += detail::beta_log_density(*bb, std::get<BetaParams>(theta.blocks[i]), x[off]);
            off += 1;
        } else {
            const auto& gb = std::get<GaussianBlock>(family.blocks[i]);
            total += detail::gaussian_log_density(gb, std::get<GaussianParams>(theta.blocks[i]),
                                                  x.subspan(off, gb.dim));
            off += gb.dim;
        }
    }
    return total;
}

/// Draw one sample; a deterministic function of (theta, seed). Blocks are
/// consumed in declaration order from a single stream.
inline std::vector<double> sample(const FamilySpec& family, const ParamPoint& theta,
                                  std::uint64_t seed) {
    check_match(family, theta);
    rng::Sampler s(seed);
    std::vector<double> x;
    x.reserve(family.sample_dim());
    for (std::size_t i = 0; i < family.blocks.size(); ++i) {
        if (const auto* bb = std::get_if<BetaBlock>(&family.blocks[i])) {
            const auto& p = std::get<BetaParams>(theta.blocks[i]);
            x.push_back(bb->lo + (bb->hi - bb->lo) * s.beta(p.alpha, p.beta));
        } else {
            const auto& gb = std::get<GaussianBlock>(family.blocks[i]);
            const auto& p = std::get<GaussianParams>(theta.blocks[i]);
            std::vector<double> z(gb.dim);
            for (auto& v : z) v = s.normal();
            for (std::size_t r = 0; r < gb.dim; ++r) {
                double acc = p.mu[r];
                for (std::size_t c = 0; c <= r; ++c)
                    acc += linalg::packed_at(gb.chol, r, c) * z[c];
                x.push_back(acc);
            }
        }
    }
    return x;
}

/// Gamma(x): the sufficient-statistic vector, with the Beta boundary clamp.
inline std::vector<double> sufficient_stats(const FamilySpec& family, std::span<const double> x) {
    check_sample_dim(family, x);
    std::vector<double> g;
    g.reserve(family.stat_dim());
    std::size_t off = 0;
    for (const auto& blk : family.blocks) {
        if (const auto* bb = std::get_if<BetaBlock>(&blk)) {
            const double u_raw = (x[off] - bb->lo) / (bb->hi - bb->lo);
            const double u = std::min(1.0 - kUnitClamp, std::max(kUnitClamp, u_raw));
            g.push_back(std::log(u));
            g.push_back(std::log1p(-u));
            off += 1;
        } else {
            const auto& gb = std::get<GaussianBlock>(blk);
            for (std::size_t j = 0; j < gb.dim; ++j) g.push_back(x[off + j]);
            off += gb.dim;
        }
    }
    return g;
}

/// grad A(theta) in the sufficient-statistic layout.
inline std::vector<double> mean_params(const FamilySpec& family, const ParamPoint& theta) {
    check_match(family, theta);
    std::vector<double> eta;
    eta.reserve(family.stat_dim());
    for (std::size_t i = 0; i < family.blocks.size(); ++i) {
        if (std::holds_alternative<BetaBlock>(family.blocks[i])) {
            const auto& p = std::get<BetaParams>(theta.blocks[i]);
            const double ds = special::digamma(p.alpha + p.beta);
            eta.push_back(special::digamma(p.alpha) - ds);
            eta.push_back(special::digamma(p.beta) - ds);
        } else {
            const auto& p = std::get<GaussianParams>(theta.blocks[i]);
            eta.insert(eta.end(), p.mu.begin(), p.mu.end());
        }
    }
    return eta;
}

namespace detail {

/// Invert (psi(a) - psi(a+b), psi(b) - psi(a+b)) = (e1, e2) by damped Newton
/// with trigamma Jacobian. Throws newton_failure if the residual does not
/// reach tolerance within the iteration budget.
inline BetaParams solve_beta_moments(double e1, double e2, BetaParams init) {
    constexpr int kMaxIter = 100;
    constexpr double kTol = 1e-12;
    if (!(e1 < 0.0) || !(e2 < 0.0))
        throw newton_failure(std::numeric_limits<double>::infinity());
    double a = init.alpha, b = init.beta;
    auto residual = [&](double aa, double bb, double& r1, double& r2) {
        const double ds = special::digamma(aa + bb);
        r1 = special::digamma(aa) - ds - e1;
        r2 = special::digamma(bb) - ds - e2;
        return std::max(std::abs(r1), std::abs(r2));
    };
    double r1, r2;
    double rnorm = residual(a, b, r1, r2);
    for (int it = 0; it < kMaxIter; ++it) {
        if (rnorm <= kTol) return {a, b};
        const double ts = special::trigamma(a + b);
        const double j11 = special::trigamma(a) - ts;
        const double j22 = special::trigamma(b) - ts;
        const double det = j11 * j22 - ts * ts;
        if (det == 0.0 || !std::isfinite(det)) throw newton_failure(rnorm);
        const double da = (-r1 * j22 - r2 * ts) / det;
        const double db = (-r2 * j11 - r1 * ts) / det;
        double lambda = 1.0;
        bool accepted = false;
        for (int h = 0; h < 40; ++h) {
            const double na = a + lambda * da;
            const double nb = b + lambda * db;
            if (na > 1e-8 && nb > 1e-8 && na < 1e9 && nb < 1e9) {
                double n1, n2;
                const double nn = residual(na, nb, n1, n2);
                if (nn < rnorm) {
                    a = na;
                    b = nb;
                    r1 = n1;
                    r2 = n2;
                    rnorm = nn;
                    accepted = true;
                    break;
                }
            }
            lambda *= 0.5;
        }
        if (!accepted) throw newton_failure(rnorm);
    }
    if (rnorm <= kTol) return {a, b};
    throw newton_failure(rnorm);
}

}  // namespace detail

/// Invert grad A: recover the parameter point whose mean parameters equal
/// eta, then project every block onto its search box. `init` (if given)
/// seeds the Beta Newton solves, normally with the current iterate.
inline ParamPoint mean_to_natural(const FamilySpec& family, std::span<const double> eta,
                                  const ParamPoint* init = nullptr) {
    if (eta.size() != family.stat_dim())
        throw std::invalid_argument("mean vector dimension mismatch");
    if (init) check_match(family, *init);
    ParamPoint theta;
    theta.blocks.reserve(family.blocks.size());
    std::size_t off = 0;
    for (std::size_t i = 0; i < family.blocks.size(); ++i) {
        if (const auto* bb = std::get_if<BetaBlock>(&family.blocks[i])) {
            BetaParams seed{2.0, 2.0};
            if (init) seed = std::get<BetaParams>(init->blocks[i]);
            BetaParams p = detail::solve_beta_moments(eta[off], eta[off + 1], seed);
            p.alpha = std::min(bb->shape_max, std::max(bb->shape_min, p.alpha));
            p.beta = std::min(bb->shape_max, std::max(bb->shape_min, p.beta));
            theta.blocks.emplace_back(p);
            off += 2;
        } else {
            const auto& gb = std::get<GaussianBlock>(family.blocks[i]);
            GaussianParams p;
            p.mu.resize(gb.dim);
            for (std::size_t j = 0; j < gb.dim; ++j) {
                const double lo = gb.mu0[j] - gb.box;
                const double hi = gb.mu0[j] + gb.box;
                p.mu[j] = std::min(hi, std::max(lo, eta[off + j]));
            }
            theta.blocks.emplace_back(std::move(p));
            off += gb.dim;
        }
    }
    return theta;
}

/// ln p_theta0(x) - ln p_theta(x) as one sum of per-block differences; the
/// scale Jacobians and Gaussian normalizers cancel term by term, so the
/// result is exactly 0 when theta == theta0.
inline double log_likelihood_ratio(const FamilySpec& family, const ParamPoint& theta0,
                                   const ParamPoint& theta, std::span<const double> x) {
    check_match(family, theta0);
    check_match(family, theta);
    check_sample_dim(family, x);
    double total = 0.0;
    std::size_t off = 0;
    for (std::size_t i = 0; i < family.blocks.size(); ++i) {
        if (const auto* bb = std::get_if<BetaBlock>(&family.blocks[i])) {
            const auto& p0 = std::get<BetaParams>(theta0.blocks[i]);
            const auto& p = std::get<BetaParams>(theta.blocks[i]);
            const double u_raw = (x[off] - bb->lo) / (bb->hi - bb->lo);
            const double u = std::min(1.0 - kUnitClamp, std::max(kUnitClamp, u_raw));
            total += (p0.alpha - p.alpha) * std::log(u) + (p0.beta - p.beta) * std::log1p(-u) -
                     special::log_beta(p0.alpha, p0.beta) + special::log_beta(p.alpha, p.beta);
            off += 1;
        } else {
            const auto& gb = std::get<GaussianBlock>(family.blocks[i]);
            const auto& p0 = std::get<GaussianParams>(theta0.blocks[i]);
            const auto& p = std::get<GaussianParams>(theta.blocks[i]);
            const auto xs = x.subspan(off, gb.dim);
            total += 0.5 * (detail::gaussian_quad_form(gb, p.mu, xs) -
                            detail::gaussian_quad_form(gb, p0.mu, xs));
            off += gb.dim;
        }
    }
    return total;
}

}  // namespace rarecast::expfam
