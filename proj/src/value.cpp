#include "retro/value.hpp"

#include "retro/error.hpp"

#include <cmath>
#include <string>

namespace retro {

void check_gamma(double gamma) {
    if (!(gamma > 0.0 && gamma < 1.0)) {
        throw ConfigError("gamma must lie in (0, 1), got " + std::to_string(gamma));
    }
}

ValueScore score_remaining(std::size_t remaining, Reward reward, double gamma) {
    check_gamma(gamma);
    ValueScore s;
    s.gamma = gamma;
    s.remaining = remaining;
    s.reward = reward;
    s.value = std::pow(gamma, static_cast<double>(remaining)) * reward.value;
    return s;
}

ValueScore score(const Continuation& c, double gamma) {
    return score_remaining(c.segment_count() - 1, c.correct, gamma);
}

bool better(const ValueScore& candidate, const ValueScore& incumbent) {
    if (candidate.gamma != incumbent.gamma) {
        throw ConfigError("cannot compare values scored with different gamma");
    }
    // Same order as comparing `value`, but exact when pow() underflows.
    if (candidate.reward.value != incumbent.reward.value) {
        return candidate.reward.value > incumbent.reward.value;
    }
    if (candidate.reward.value == 0) {
        return false;
    }
    return candidate.remaining < incumbent.remaining;
}

}  // namespace retro
