#pragma once

// Beta-Bernoulli belief over an arm's click probability.

#include <cmath>
#include <cstdint>
#include <utility>

#include <boost/math/special_functions/beta.hpp>

#include "mabflow/error.hpp"
#include "mabflow/random.hpp"

namespace mabflow {

// Accumulated successes (visitors who clicked) and failures (visitors who
// did not) for one arm.
struct SufficientStats {
    std::uint64_t successes = 0;
    std::uint64_t failures = 0;

    std::uint64_t trials() const { return successes + failures; }
    bool empty() const { return successes == 0 && failures == 0; }

    SufficientStats& operator+=(const SufficientStats& other) {
        successes += other.successes;
        failures += other.failures;
        return *this;
    }
    friend SufficientStats operator+(SufficientStats a, const SufficientStats& b) { return a += b; }
    friend bool operator==(const SufficientStats&, const SufficientStats&) = default;
};

// Shapes are stored as reals so non-integer priors remain representable.
struct BetaPosterior {
    double alpha = 1.0;
    double beta = 1.0;

    double mean() const { return alpha / (alpha + beta); }

    double variance() const {
        const double s = alpha + beta;
        return alpha * beta / (s * s * (s + 1.0));
    }

    friend bool operator==(const BetaPosterior&, const BetaPosterior&) = default;
};

inline BetaPosterior prior() { return BetaPosterior{1.0, 1.0}; }

// Conjugate update from the uniform prior: Beta(S + 1, F + 1).
inline BetaPosterior update(const SufficientStats& stats) {
    return BetaPosterior{static_cast<double>(stats.successes) + 1.0,
                         static_cast<double>(stats.failures) + 1.0};
}

inline void validate(const BetaPosterior& p) {
    if (!(p.alpha > 0.0) || !(p.beta > 0.0) || !std::isfinite(p.alpha) || !std::isfinite(p.beta)) {
        throw Error(ErrorCode::parameter, "beta shape parameters must be positive and finite");
    }
}

// One Beta(alpha, beta) draw as X / (X + Y) with X ~ Gamma(alpha), Y ~ Gamma(beta).
inline double sample(const BetaPosterior& p, Rng& rng) {
    validate(p);
    const double x = rng.gamma(p.alpha);
    const double y = rng.gamma(p.beta);
    const double s = x + y;
    if (s == 0.0) {
        // Both gamma draws underflowed (only possible for tiny shapes).
        return rng.uniform() < p.mean() ? 1.0 : 0.0;
    }
    return x / s;
}

// Equal-tailed credible interval, e.g. mass = 0.95.
inline std::pair<double, double> credible_interval(const BetaPosterior& p, double mass = 0.95) {
    validate(p);
    if (!(mass > 0.0 && mass < 1.0)) {
        throw Error(ErrorCode::parameter, "credible mass must lie in (0,1)");
    }
    const double tail = (1.0 - mass) / 2.0;
    return {boost::math::ibeta_inv(p.alpha, p.beta, tail),
            boost::math::ibeta_inv(p.alpha, p.beta, 1.0 - tail)};
}

} // namespace mabflow
