#pragma once

// The cross-entropy search loop and the two probability estimators built on
// it. Per iteration: draw N_k samples from P_theta_k, set the level
// gamma_k = min(gamma, empirical rho-quantile of f), average the
// likelihood-weighted sufficient statistics of the samples at or below the
// level, and moment-match the next iterate, box-projected. The final sampler
// is the iterate with the lowest recorded rho-quantile.
//
// All likelihoods are handled in log scale and only exponentiated per sample
// when a weight itself is needed. Reductions run over index-ordered buffers,
// so results are independent of how the provider schedules work.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <functional>
#include <limits>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "rarecast/expfam.hpp"
#include "rarecast/rng.hpp"
#include "rarecast/tasks.hpp"

namespace rarecast::ce {

struct CEConfig {
    double rho = 0.01;                       // elite quantile level, (0, 1)
    std::vector<double> alpha = {0.8};       // step sizes, broadcast from the last entry
    std::vector<std::size_t> n_k = {5000};   // per-iteration sample sizes, broadcast
    std::size_t iterations = 100;            // K
    double gamma = 0.14;                     // rare-event threshold on f
    std::uint64_t seed = 0;

    double alpha_at(std::size_t k) const { return alpha[std::min(k, alpha.size() - 1)]; }
    std::size_t n_at(std::size_t k) const { return n_k[std::min(k, n_k.size() - 1)]; }

    void validate() const {
        if (!(rho > 0.0 && rho < 1.0)) throw std::invalid_argument("rho must lie in (0,1)");
        if (alpha.empty() || n_k.empty()) throw std::invalid_argument("empty schedule");
        for (double a : alpha)
            if (!(a > 0.0 && a <= 1.0)) throw std::invalid_argument("alpha_k must lie in (0,1]");
        for (std::size_t n : n_k)
            if (n == 0) throw std::invalid_argument("n_k must be >= 1");
    }
};

struct WeightSummary {
    double max_w = 0.0;
    double min_w = 0.0;
    double ess = 0.0;  // sum(w) / max(w)
};

struct IterationRecord {
    expfam::ParamPoint theta;     // iterate the samples were drawn from
    double gamma_k = 0.0;         // min(gamma, rho_quantile)
    double rho_quantile = 0.0;
    std::vector<double> d;        // unnormalized weighted-statistic estimate
    double elite_mass = 0.0;      // (1/N) sum of w over samples at or below gamma_k
    std::size_t rare_count = 0;   // samples with f <= gamma
    WeightSummary weights;
    bool stalled = false;         // no elites or failed moment match; theta kept
};

struct CEHistory {
    expfam::ParamPoint theta0;
    std::vector<IterationRecord> iterations;

    std::size_t stall_count() const {
        std::size_t n = 0;
        for (const auto& r : iterations) n += r.stalled ? 1 : 0;
        return n;
    }
};

struct EstimateReport {
    double gamma_test = 0.0;
    double p_hat = 0.0;
    double std_err = 0.0;
    std::size_t rare_count = 0;
    std::size_t n = 0;
    double ess = 0.0;  // sum(w)/max(w); equals n for the naive estimator
    std::string method;
};

struct empty_level_set : std::runtime_error {
    empty_level_set() : std::runtime_error("no sample at or below the level gamma_k") {}
};

/// The ceil(rho*N)-th smallest of `values` (lower empirical quantile). The
/// 1e-9 guard removes the binary-representation fuzz of decimal rho so that
/// e.g. rho = 0.01, N = 5000 indexes the 50th order statistic.
inline double quantile(std::span<const double> values, double rho) {
    if (values.empty()) throw std::invalid_argument("quantile of empty list");
    if (!(rho > 0.0 && rho < 1.0)) throw std::invalid_argument("rho must lie in (0,1)");
    const double scaled = rho * static_cast<double>(values.size());
    auto k = static_cast<std::size_t>(std::ceil(scaled - 1e-9));
    k = std::max<std::size_t>(1, std::min(k, values.size()));
    std::vector<double> buf(values.begin(), values.end());
    std::nth_element(buf.begin(), buf.begin() + (k - 1), buf.end());
    return buf[k - 1];
}

/// Per-iteration level: the minimum of the target gamma and the empirical
/// rho-quantile.
inline double proxy_threshold(double gamma, double rho_quantile) {
    return std::min(gamma, rho_quantile);
}

namespace detail {

struct WeightedStats {
    std::vector<double> d;       // (1/N) sum w * 1{f <= gamma_k} * Gamma(x)
    double elite_mass = 0.0;     // (1/N) sum w * 1{f <= gamma_k}
    std::size_t elite_count = 0;
    WeightSummary weights;
};

template <typename SampleAt>
WeightedStats weighted_stats(const expfam::FamilySpec& family, const expfam::ParamPoint& theta0,
                             const expfam::ParamPoint& theta_k, SampleAt&& sample_at,
                             std::span<const double> f_values, double gamma_k) {
    const std::size_t n = f_values.size();
    WeightedStats ws;
    ws.d.assign(family.stat_dim(), 0.0);
    ws.weights.min_w = std::numeric_limits<double>::infinity();
    double w_sum = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
        std::span<const double> x = sample_at(i);
        const double w = std::exp(expfam::log_likelihood_ratio(family, theta0, theta_k, x));
        w_sum += w;
        ws.weights.max_w = std::max(ws.weights.max_w, w);
        ws.weights.min_w = std::min(ws.weights.min_w, w);
        if (f_values[i] <= gamma_k) {
            ++ws.elite_count;
            ws.elite_mass += w;
            const auto g = expfam::sufficient_stats(family, x);
            for (std::size_t j = 0; j < g.size(); ++j) ws.d[j] += w * g[j];
        }
    }
    for (auto& v : ws.d) v /= static_cast<double>(n);
    ws.elite_mass /= static_cast<double>(n);
    ws.weights.ess = ws.weights.max_w > 0.0 ? w_sum / ws.weights.max_w : 0.0;
    if (n == 0) ws.weights.min_w = 0.0;
    return ws;
}

}  // namespace detail

/// D_{k+1}: the unnormalized average of likelihood-weighted sufficient
/// statistics over samples at or below gamma_k. Throws empty_level_set when
/// no sample qualifies.
inline std::vector<double> estimate_D(const std::vector<std::vector<double>>& samples,
                                      std::span<const double> f_values, double gamma_k,
                                      const expfam::FamilySpec& family,
                                      const expfam::ParamPoint& theta0,
                                      const expfam::ParamPoint& theta_k) {
    if (samples.size() != f_values.size())
        throw std::invalid_argument("samples/f_values length mismatch");
    if (samples.empty()) throw std::invalid_argument("estimate_D on empty batch");
    auto ws = detail::weighted_stats(
        family, theta0, theta_k,
        [&](std::size_t i) { return std::span<const double>(samples[i]); }, f_values, gamma_k);
    if (ws.elite_count == 0) throw empty_level_set{};
    return std::move(ws.d);
}

/// One smoothed moment-matching step: invert grad A at
/// alpha_k * D + (1 - alpha_k) * grad A(theta_k), box projection included.
inline expfam::ParamPoint ce_step(const expfam::FamilySpec& family,
                                  const expfam::ParamPoint& theta_k, std::span<const double> d,
                                  double alpha_k) {
    if (d.size() != family.stat_dim()) throw std::invalid_argument("D dimension mismatch");
    const auto eta_k = expfam::mean_params(family, theta_k);
    std::vector<double> target(d.size());
    for (std::size_t j = 0; j < d.size(); ++j)
        target[j] = alpha_k * d[j] + (1.0 - alpha_k) * eta_k[j];
    return expfam::mean_to_natural(family, target, &theta_k);
}

using IterationCallback = std::function<void(std::size_t, const IterationRecord&)>;

/// Full cross-entropy run. theta_0 starts at the base distribution; an
/// iteration with an empty level set or a failed moment match keeps the
/// current iterate and is recorded as stalled. Provider failures for single
/// tasks count as f = +inf (sentinel); `on_iteration`, when set, sees each
/// record as soon as it exists.
inline CEHistory run_ce(const expfam::FamilySpec& family, const expfam::ParamPoint& theta0,
                        const CEConfig& config, RolloutProvider& provider,
                        const IterationCallback& on_iteration = {}) {
    config.validate();
    expfam::check_match(family, theta0);
    CEHistory history;
    history.theta0 = theta0;
    expfam::ParamPoint theta = theta0;
    for (std::size_t k = 0; k < config.iterations; ++k) {
        const std::size_t n = config.n_at(k);
        const std::uint64_t batch_seed = rng::mix64(config.seed, k + 1);
        std::vector<Task> tasks(n);
        for (std::size_t i = 0; i < n; ++i) {
            tasks[i].task_id = i;
            tasks[i].seed = rng::mix64(batch_seed, i);
            tasks[i].sample = expfam::sample(family, theta, tasks[i].seed);
        }
        const auto results = provider.run_batch(tasks);
        std::vector<double> f(n);
        std::size_t failed = 0;
        for (std::size_t i = 0; i < n; ++i) {
            f[i] = results[i].ok ? results[i].result.min_ttc : kMinTtcSentinel;
            failed += results[i].ok ? 0 : 1;
        }
        if (failed > 0)
            std::fprintf(stderr,
                         "run_ce: iteration %zu: %zu of %zu rollouts failed, counted as f = +inf\n",
                         k, failed, n);

        IterationRecord rec;
        rec.theta = theta;
        rec.rho_quantile = quantile(f, config.rho);
        rec.gamma_k = proxy_threshold(config.gamma, rec.rho_quantile);
        for (double v : f) rec.rare_count += v <= config.gamma ? 1 : 0;
        auto ws = detail::weighted_stats(
            family, theta0, theta, [&](std::size_t i) { return std::span<const double>(tasks[i].sample); },
            f, rec.gamma_k);
        rec.d = std::move(ws.d);
        rec.elite_mass = ws.elite_mass;
        rec.weights = ws.weights;
        if (ws.elite_count == 0) {
            rec.stalled = true;  // keep theta, fresh seeds next iteration
        } else {
            // The mixture projection needs E_Q[Gamma]; dividing the weighted
            // sum by the elite mass turns the unnormalized estimate into one.
            std::vector<double> d_norm(rec.d.size());
            for (std::size_t j = 0; j < rec.d.size(); ++j) d_norm[j] = rec.d[j] / rec.elite_mass;
            try {
                theta = ce_step(family, theta, d_norm, config.alpha_at(k));
            } catch (const expfam::newton_failure&) {
                rec.stalled = true;
            }
        }
        history.iterations.push_back(std::move(rec));
        if (on_iteration) on_iteration(k, history.iterations.back());
    }
    return history;
}

/// The iterate with the lowest recorded rho-quantile; earliest iteration wins
/// ties. theta0 when the history has no iterations.
inline const expfam::ParamPoint& select_best(const CEHistory& history) {
    if (history.iterations.empty()) return history.theta0;
    std::size_t best = 0;
    for (std::size_t i = 1; i < history.iterations.size(); ++i)
        if (history.iterations[i].rho_quantile < history.iterations[best].rho_quantile) best = i;
    return history.iterations[best].theta;
}

namespace detail {

/// Shared accumulation for both estimators: p_hat and std_err come from the
/// first two moments of the per-sample summands w_i * 1{f_i <= gamma}, summed
/// in index order. With unit weights this reproduces the binomial formula
/// sqrt(p(1-p)/n) bit for bit.
inline EstimateReport reduce_report(double gamma_test, std::span<const double> weights,
                                    std::span<const double> f, std::string method) {
    const std::size_t n = f.size();
    double sum = 0.0, sum_sq = 0.0, w_sum = 0.0, w_max = 0.0;
    std::size_t rare = 0;
    for (std::size_t i = 0; i < n; ++i) {
        w_sum += weights[i];
        w_max = std::max(w_max, weights[i]);
        const double s = f[i] <= gamma_test ? weights[i] : 0.0;
        rare += f[i] <= gamma_test ? 1 : 0;
        sum += s;
        sum_sq += s * s;
    }
    EstimateReport rep;
    rep.gamma_test = gamma_test;
    rep.n = n;
    rep.rare_count = rare;
    rep.p_hat = sum / static_cast<double>(n);
    const double m2 = sum_sq / static_cast<double>(n);
    const double var = std::max(0.0, m2 - rep.p_hat * rep.p_hat);
    rep.std_err = std::sqrt(var / static_cast<double>(n));
    rep.ess = w_max > 0.0 ? w_sum / w_max : 0.0;
    rep.method = std::move(method);
    return rep;
}

struct EvalBatch {
    std::vector<double> f;
    std::vector<double> weights;
};

inline EvalBatch eval_batch(const expfam::FamilySpec& family, const expfam::ParamPoint& theta0,
                            const expfam::ParamPoint& theta_s, std::size_t n,
                            RolloutProvider& provider, std::uint64_t seed) {
    if (n == 0) throw std::invalid_argument("n must be >= 1");
    std::vector<Task> tasks(n);
    for (std::size_t i = 0; i < n; ++i) {
        tasks[i].task_id = i;
        tasks[i].seed = rng::mix64(seed, i);
        tasks[i].sample = expfam::sample(family, theta_s, tasks[i].seed);
    }
    const auto results = provider.run_batch(tasks);
    EvalBatch batch;
    batch.f.resize(n);
    batch.weights.resize(n);
    std::size_t failed = 0;
    for (std::size_t i = 0; i < n; ++i) {
        batch.f[i] = results[i].ok ? results[i].result.min_ttc : kMinTtcSentinel;
        failed += results[i].ok ? 0 : 1;
        batch.weights[i] =
            std::exp(expfam::log_likelihood_ratio(family, theta0, theta_s, tasks[i].sample));
    }
    if (failed > 0)
        std::fprintf(stderr, "estimate: %zu of %zu rollouts failed, counted as f = +inf\n",
                     failed, n);
    return batch;
}

}  // namespace detail

/// Importance-sampling estimates of p_gamma for every gamma in gamma_tests,
/// from one batch of n rollouts drawn from P_theta_ce.
inline std::vector<EstimateReport> estimate_is(const expfam::FamilySpec& family,
                                               const expfam::ParamPoint& theta0,
                                               const expfam::ParamPoint& theta_ce, std::size_t n,
                                               std::span<const double> gamma_tests,
                                               RolloutProvider& provider, std::uint64_t seed) {
    const auto batch = detail::eval_batch(family, theta0, theta_ce, n, provider, seed);
    std::vector<EstimateReport> reports;
    reports.reserve(gamma_tests.size());
    for (double g : gamma_tests)
        reports.push_back(detail::reduce_report(g, batch.weights, batch.f, "cross-entropy"));
    return reports;
}

/// Naive Monte Carlo estimates from one batch of n rollouts drawn from P_0.
inline std::vector<EstimateReport> estimate_naive(const expfam::FamilySpec& family,
                                                  const expfam::ParamPoint& theta0, std::size_t n,
                                                  std::span<const double> gamma_tests,
                                                  RolloutProvider& provider, std::uint64_t seed) {
    auto batch = detail::eval_batch(family, theta0, theta0, n, provider, seed);
    std::fill(batch.weights.begin(), batch.weights.end(), 1.0);
    std::vector<EstimateReport> reports;
    reports.reserve(gamma_tests.size());
    for (double g : gamma_tests)
        reports.push_back(detail::reduce_report(g, batch.weights, batch.f, "naive"));
    return reports;
}

struct CompareRow {
    double gamma_test = 0.0;
    double rare_ratio = 0.0;      // CE rare count / naive rare count
    double variance_ratio = 0.0;  // naive variance / CE variance
};

/// Per-threshold ratios between matched report lists.
inline std::vector<CompareRow> compare_report(std::span<const EstimateReport> ce_reports,
                                              std::span<const EstimateReport> naive_reports) {
    if (ce_reports.size() != naive_reports.size())
        throw std::invalid_argument("report lists differ in length");
    std::vector<CompareRow> rows;
    rows.reserve(ce_reports.size());
    for (std::size_t i = 0; i < ce_reports.size(); ++i) {
        const auto& c = ce_reports[i];
        const auto& v = naive_reports[i];
        if (c.gamma_test != v.gamma_test || c.n != v.n)
            throw std::invalid_argument("gamma_test grids or sample counts do not match");
        CompareRow row;
        row.gamma_test = c.gamma_test;
        if (c.rare_count == v.rare_count)
            row.rare_ratio = 1.0;
        else if (v.rare_count == 0)
            row.rare_ratio = std::numeric_limits<double>::infinity();
        else
            row.rare_ratio = static_cast<double>(c.rare_count) / static_cast<double>(v.rare_count);
        const double cv = c.std_err * c.std_err;
        const double vv = v.std_err * v.std_err;
        row.variance_ratio = cv == vv ? 1.0
                             : cv == 0.0 ? std::numeric_limits<double>::infinity()
                                         : vv / cv;
        rows.push_back(row);
    }
    return rows;
}

/// Sample size needed for eps-relative accuracy of a naive estimate of a
/// probability p: N >= 1 / (p * eps^2).
inline double required_sample_size(double p, double eps) {
    if (!(p > 0.0) || !(eps > 0.0)) throw std::invalid_argument("p and eps must be positive");
    return 1.0 / (p * eps * eps);
}

/// 1-D standard-normal benchmark family with f(x) = x. The wide search box
/// keeps the level-chasing update from tilting past the useful range when the
/// quantile drops below the target gamma.
inline expfam::FamilySpec toy_gaussian_family() {
    expfam::GaussianBlock g;
    g.dim = 1;
    g.mu0 = {0.0};
    g.chol = {1.0};
    g.box = 3.5;
    expfam::FamilySpec family;
    family.blocks.emplace_back(std::move(g));
    return family;
}

inline expfam::ParamPoint toy_gaussian_theta0() {
    expfam::ParamPoint p;
    p.blocks.emplace_back(expfam::GaussianParams{{0.0}});
    return p;
}

/// Provider for the benchmark: f(x) = x, no simulator involved.
class ToyGaussianRunner final : public RolloutProvider {
  public:
    std::vector<TaskResult> run_batch(const std::vector<Task>& tasks) override {
        std::vector<TaskResult> out;
        out.reserve(tasks.size());
        for (const auto& t : tasks) {
            TaskResult r;
            r.task_id = t.task_id;
            r.ok = true;
            r.result.min_ttc = t.sample.at(0);
            r.result.crashed = false;
            r.result.steps = 1;
            r.result.log_p0 = -0.5 * t.sample[0] * t.sample[0] - 0.5 * std::log(2.0 * M_PI);
            r.result.seed = t.seed;
            out.push_back(std::move(r));
        }
        return out;
    }
};

}  // namespace rarecast::ce
