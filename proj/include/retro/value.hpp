#pragma once

// Discounted value of a candidate continuation: gamma^remaining * reward,
// where remaining counts the segments after the first one (the solution is
// the terminal segment).

#include "retro/trace_model.hpp"
#include "retro/verifier.hpp"

#include <cstddef>
#include <vector>

namespace retro {

enum class Origin { existing, rollout };

struct Continuation {
    std::vector<Step> steps;
    Solution solution;
    /// Marker separating steps from the solution; empty when the solution is
    /// an inline final step.
    std::string close_marker;
    Reward correct;
    Origin origin = Origin::rollout;

    std::size_t segment_count() const { return steps.size() + 1; }
};

struct ValueScore {
    double gamma = 0.9;
    std::size_t remaining = 0;
    Reward reward;
    double value = 0.0;
};

/// Throws ConfigError unless 0 < gamma < 1.
void check_gamma(double gamma);

ValueScore score(const Continuation& c, double gamma);
ValueScore score_remaining(std::size_t remaining, Reward reward, double gamma);

/// Strictly greater value; ties keep the incumbent.
bool better(const ValueScore& candidate, const ValueScore& incumbent);

}  // namespace retro
