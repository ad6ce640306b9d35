#pragma once

// Retrospective revision of a verified-correct trajectory.
//
// Walks the thought boundaries of the trajectory in order. At each boundary
// it asks the provider for alternative continuations of the current thought
// (transition keywords banned in the first new step), scores each one and the
// existing suffix with the discounted value, and splices in the best rollout
// when it is strictly better. The walk then moves on to the next thought of
// the updated trajectory, so thoughts introduced by a splice are visited too.

#include "retro/rollout_provider.hpp"
#include "retro/trace_model.hpp"
#include "retro/value.hpp"
#include "retro/verifier.hpp"

#include <cstddef>
#include <cstdint>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

namespace retro {

enum class SearchMode { full, partial };

std::string_view to_string(SearchMode mode);
SearchMode parse_search_mode(std::string_view text);

struct SearchConfig {
    double gamma = 0.9;
    std::size_t rollouts_per_boundary = 2;
    SearchMode mode = SearchMode::full;
    std::uint64_t seed = 0;
    /// Cap on boundaries visited per record; unlimited when absent.
    std::optional<std::size_t> max_expansions;
    SamplingParams sampling;
    KeywordSet keywords = KeywordSet::defaults();
    /// Issue the rollouts of one boundary in parallel.
    bool concurrent_rollouts = true;

    void validate() const;
};

struct ExpansionEvent {
    std::size_t ordinal = 0;
    /// 0-based index of the thought whose end is the boundary.
    std::size_t boundary_thought_index = 0;
    ValueScore incumbent_score;
    std::optional<ValueScore> best_rollout_score;
    std::optional<std::size_t> best_sample_index;
    bool replaced = false;
    std::size_t discarded_samples = 0;
    std::size_t usage = 0;
};

enum class RevisionStatus { revised, unchanged, skipped_incorrect, failed };

std::string_view to_string(RevisionStatus status);
RevisionStatus parse_revision_status(std::string_view text);

struct RevisionResult {
    Trajectory revised;
    std::vector<ExpansionEvent> events;
    std::size_t original_steps = 0;
    std::size_t revised_steps = 0;
    RevisionStatus status = RevisionStatus::unchanged;
    /// Partial mode only: 1-based thought the walk began at (0 = no-op) and
    /// the seed it was drawn with.
    std::optional<std::size_t> partial_start_index;
    std::optional<std::uint64_t> partial_seed;
    std::size_t provider_usage = 0;
    std::string error;

    std::size_t replacements() const;
};

RevisionResult retro_search(const Question& q, const Trajectory& t, const GroundTruth& truth,
                            const SearchConfig& cfg, RolloutProvider& provider,
                            const Verifier& verifier = default_verifier());

/// Seed for the partial-mode draw of one record, stable across runs.
std::uint64_t partial_seed(std::uint64_t global_seed, std::string_view record_id);

/// 1-based thought ordinal drawn uniformly from {1, ..., num_thoughts - 1};
/// 0 for a single-thought trajectory.
std::size_t choose_partial_start(const Trajectory& t, std::uint64_t seed);

/// Builds a scoreable continuation from provider output. A truncated rollout
/// with no solution has no answer.
Continuation continuation_from(const ProviderResult& r, const GroundTruth& truth,
                               const Verifier& verifier = default_verifier());

/// Replaces everything after the boundary thought with `c`. The first new
/// step extends the boundary thought; later steps open new thoughts wherever
/// they start with a keyword. Throws InvariantViolation if the first new
/// segment uses a keyword.
Trajectory splice(const Trajectory& t, std::size_t boundary_thought_index, const Continuation& c,
                  const KeywordSet& keywords);

}  // namespace retro
