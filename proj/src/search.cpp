#include "retro/search.hpp"

#include "retro/error.hpp"

#include <future>
#include <random>

namespace retro {

std::string_view to_string(SearchMode mode) {
    return mode == SearchMode::full ? "full" : "partial";
}

SearchMode parse_search_mode(std::string_view text) {
    if (text == "full") {
        return SearchMode::full;
    }
    if (text == "partial") {
        return SearchMode::partial;
    }
    throw ConfigError("unknown search mode: " + std::string(text));
}

std::string_view to_string(RevisionStatus status) {
    switch (status) {
        case RevisionStatus::revised:
            return "revised";
        case RevisionStatus::unchanged:
            return "unchanged";
        case RevisionStatus::skipped_incorrect:
            return "skipped_incorrect";
        case RevisionStatus::failed:
            return "failed";
    }
    return "failed";
}

RevisionStatus parse_revision_status(std::string_view text) {
    for (auto s : {RevisionStatus::revised, RevisionStatus::unchanged,
                   RevisionStatus::skipped_incorrect, RevisionStatus::failed}) {
        if (to_string(s) == text) {
            return s;
        }
    }
    throw ConfigError("unknown revision status: " + std::string(text));
}

void SearchConfig::validate() const {
    check_gamma(gamma);
    if (rollouts_per_boundary < 1) {
        throw ConfigError("rollouts_per_boundary must be at least 1");
    }
    sampling.validate();
}

std::size_t RevisionResult::replacements() const {
    std::size_t n = 0;
    for (const auto& e : events) {
        n += e.replaced ? 1 : 0;
    }
    return n;
}

std::uint64_t partial_seed(std::uint64_t global_seed, std::string_view record_id) {
    // FNV-1a over the id, then a splitmix64 finalizer over the combination.
    std::uint64_t h = 0xcbf29ce484222325ULL;
    for (unsigned char c : record_id) {
        h ^= c;
        h *= 0x100000001b3ULL;
    }
    std::uint64_t z = h ^ (global_seed + 0x9e3779b97f4a7c15ULL);
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
    return z ^ (z >> 31);
}

std::size_t choose_partial_start(const Trajectory& t, std::uint64_t seed) {
    if (t.num_thoughts() < 2) {
        return 0;
    }
    std::mt19937_64 rng(seed);
    std::uniform_int_distribution<std::size_t> dist(1, t.num_thoughts() - 1);
    return dist(rng);
}

Continuation continuation_from(const ProviderResult& r, const GroundTruth& truth,
                               const Verifier& verifier) {
    Continuation c;
    c.origin = Origin::rollout;
    c.steps = r.steps;
    c.close_marker = r.close_marker;
    c.solution.text = r.solution_text;
    if (!r.solution_text.empty()) {
        // An inline solution is judged on the whole rollout, matching how the
        // spliced trace is read back.
        c.solution.extracted_answer =
            extract_answer(r.close_marker.empty() ? r.raw_text : r.solution_text);
    }
    c.correct = verifier.score(c.solution.extracted_answer, truth);
    return c;
}

Trajectory splice(const Trajectory& t, std::size_t boundary_thought_index, const Continuation& c,
                  const KeywordSet& keywords) {
    if (boundary_thought_index >= t.thoughts.size()) {
        throw InvariantViolation("splice boundary out of range");
    }
    std::vector<Step> tail = c.steps;
    if (c.close_marker.empty()) {
        tail.push_back(Step{c.solution.text});
    }
    if (!tail.empty() && keywords.contains_any(tail.front().text)) {
        throw InvariantViolation("spliced continuation opens with a transition keyword");
    }

    Trajectory out;
    out.preamble = t.preamble;
    out.dropped_blank_segments = t.dropped_blank_segments;
    out.crlf_normalized = t.crlf_normalized;
    out.thoughts.assign(t.thoughts.begin(),
                        t.thoughts.begin() + static_cast<std::ptrdiff_t>(boundary_thought_index) + 1);
    if (!tail.empty()) {
        out.thoughts.back().steps.push_back(tail.front());
        append_steps(out.thoughts, std::span<const Step>(tail).subspan(1), keywords);
    }
    out.close_marker = c.close_marker;
    out.solution = c.solution;
    return out;
}

namespace {

std::vector<ProviderResult> collect_rollouts(const Question& q, const Trajectory& cur,
                                             std::size_t boundary, std::size_t ordinal,
                                             const SearchConfig& cfg, RolloutProvider& provider) {
    std::vector<ProviderRequest> requests;
    const auto prefix = cur.steps_through(boundary);
    for (std::size_t i = 0; i < cfg.rollouts_per_boundary; ++i) {
        requests.push_back(ProviderRequest{q, prefix, cfg.keywords, cfg.sampling, i, ordinal});
    }

    std::vector<ProviderResult> results;
    if (cfg.concurrent_rollouts && requests.size() > 1) {
        std::vector<std::future<ProviderResult>> pending;
        for (const auto& req : requests) {
            pending.push_back(std::async(std::launch::async,
                                         [&provider, &req] { return provider.generate(req); }));
        }
        // Wait on every future before rethrowing so no task outlives `requests`.
        std::exception_ptr first_error;
        for (auto& f : pending) {
            try {
                results.push_back(f.get());
            } catch (...) {
                if (!first_error) {
                    first_error = std::current_exception();
                }
            }
        }
        if (first_error) {
            std::rethrow_exception(first_error);
        }
    } else {
        for (const auto& req : requests) {
            results.push_back(provider.generate(req));
        }
    }
    return results;
}

}  // namespace

RevisionResult retro_search(const Question& q, const Trajectory& t, const GroundTruth& truth,
                            const SearchConfig& cfg, RolloutProvider& provider,
                            const Verifier& verifier) {
    cfg.validate();
    if (t.thoughts.empty()) {
        throw MalformedTraceError("trajectory has no thoughts");
    }

    RevisionResult result;
    result.revised = t;
    result.original_steps = t.reasoning_steps();
    result.revised_steps = result.original_steps;

    if (!verifier.score(t.solution.extracted_answer, truth)) {
        result.status = RevisionStatus::skipped_incorrect;
        return result;
    }

    std::size_t tau = 0;
    if (cfg.mode == SearchMode::partial) {
        const auto seed = partial_seed(cfg.seed, q.id);
        const auto start = choose_partial_start(t, seed);
        result.partial_seed = seed;
        result.partial_start_index = start;
        if (start == 0) {
            result.status = RevisionStatus::unchanged;
            return result;
        }
        tau = start - 1;
    }

    Trajectory& cur = result.revised;
    std::size_t ordinal = 0;
    try {
        while (tau + 1 < cur.thoughts.size()) {
            if (cfg.max_expansions && ordinal >= *cfg.max_expansions) {
                break;
            }
            ExpansionEvent event;
            event.ordinal = ordinal;
            event.boundary_thought_index = tau;
            event.incumbent_score =
                score_remaining(cur.reasoning_steps_after(tau),
                                verifier.score(cur.solution.extracted_answer, truth), cfg.gamma);

            auto rollouts = collect_rollouts(q, cur, tau, ordinal, cfg, provider);

            std::optional<Continuation> best;
            for (std::size_t i = 0; i < rollouts.size(); ++i) {
                event.usage += rollouts[i].usage;
                if (!rollouts[i].constraint_satisfied) {
                    ++event.discarded_samples;
                    continue;
                }
                auto c = continuation_from(rollouts[i], truth, verifier);
                const auto s = score(c, cfg.gamma);
                if (!event.best_rollout_score || better(s, *event.best_rollout_score)) {
                    event.best_rollout_score = s;
                    event.best_sample_index = i;
                    best = std::move(c);
                }
            }
            result.provider_usage += event.usage;

            if (best && better(*event.best_rollout_score, event.incumbent_score)) {
                cur = splice(cur, tau, *best, cfg.keywords);
                event.replaced = true;
            }
            result.events.push_back(std::move(event));
            ++ordinal;
            ++tau;
        }
    } catch (const TransientError& e) {
        result.status = RevisionStatus::failed;
        result.error = e.what();
    } catch (const ProviderError& e) {
        result.status = RevisionStatus::failed;
        result.error = e.what();
    }

    result.revised_steps = cur.reasoning_steps();
    if (result.status != RevisionStatus::failed) {
        result.status =
            result.replacements() > 0 ? RevisionStatus::revised : RevisionStatus::unchanged;
    }
    return result;
}

}  // namespace retro
