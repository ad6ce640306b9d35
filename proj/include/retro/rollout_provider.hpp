#pragma once

// Generation of alternative continuations from a trajectory prefix.
//
// Every provider follows the same two-phase protocol:
//   1. draw exactly one step (generation stops at the first "\n\n") and
//      redraw, up to `resample_limit` draws, while it uses a banned phrase;
//   2. continue from the accepted step without constraints until the model
//      stops or the generation budget runs out.
// A result whose every phase-1 draw was rejected comes back with
// constraint_satisfied = false and must not be scored.

#include "retro/trace_model.hpp"

#include <chrono>
#include <cstddef>
#include <map>
#include <memory>
#include <semaphore>
#include <span>
#include <string>
#include <string_view>
#include <tuple>
#include <vector>

namespace retro {

struct SamplingParams {
    double temperature = 1.0;
    double top_p = 0.98;
    /// Provider-native units: tokens over HTTP, characters for fixtures.
    std::size_t max_new_units = 16384;
    std::size_t resample_limit = 4;

    void validate() const;
};

struct ProviderRequest {
    Question question;
    /// Every step up to and including the last step of the boundary thought.
    std::vector<Step> prefix_steps;
    KeywordSet banned = KeywordSet::defaults();
    SamplingParams sampling;
    std::size_t sample_index = 0;
    /// Boundaries visited so far on this record's evolving trajectory.
    std::size_t expansion_ordinal = 0;
};

struct ProviderResult {
    std::vector<Step> steps;
    std::string solution_text;
    /// Marker that preceded solution_text; empty when the solution is the
    /// last step of the rollout.
    std::string close_marker;
    bool constraint_satisfied = false;
    /// Generation ran out of budget before finishing.
    bool truncated = false;
    std::string raw_text;
    std::size_t usage = 0;
    std::size_t draws = 0;
};

/// Turns raw continuation text into steps and a solution segment. Text after
/// `close_marker` is the solution; without the marker the last step is, unless
/// the text was truncated, in which case the solution is empty.
ProviderResult parse_rollout_text(std::string raw, std::string_view close_marker, bool truncated);

/// The part of a phase-1 draw the keyword ban applies to: the text before a
/// close marker, if any.
std::string_view constrained_span(std::string_view phase1, std::string_view close_marker);

class RolloutProvider {
public:
    virtual ~RolloutProvider() = default;

    /// Must be safe to call concurrently.
    virtual ProviderResult generate(const ProviderRequest& req) = 0;
};

// ---------------------------------------------------------------------------
// Scripted fixtures

struct FixtureKey {
    std::string record_id;
    std::size_t expansion_ordinal = 0;
    std::size_t sample_index = 0;

    friend auto operator<=>(const FixtureKey& a, const FixtureKey& b) {
        return std::tie(a.record_id, a.expansion_ordinal, a.sample_index) <=>
               std::tie(b.record_id, b.expansion_ordinal, b.sample_index);
    }
    friend bool operator==(const FixtureKey&, const FixtureKey&) = default;
};

/// Deterministic provider answering by exact lookup on
/// (record id, expansion ordinal, sample index). An entry holds one or more
/// successive draws; draw j is used for the j-th phase-1 attempt, and the
/// last draw repeats once the list runs out.
///
/// Fixture file: JSON lines of
///   {"record_id": "r1", "expansion": 0, "sample": 1, "text": "..."}
/// or with "attempts": ["...", "..."] in place of "text".
class ScriptedProvider final : public RolloutProvider {
public:
    using Table = std::map<FixtureKey, std::vector<std::string>>;

    ScriptedProvider(Table table, std::string close_marker = std::string(kDefaultThinkClose));

    static std::unique_ptr<ScriptedProvider> load(
        const std::string& fixture_path, std::string close_marker = std::string(kDefaultThinkClose));
    static Table parse_fixture(std::string_view contents);

    ProviderResult generate(const ProviderRequest& req) override;

    const Table& table() const { return table_; }

private:
    Table table_;
    std::string close_marker_;
};

// ---------------------------------------------------------------------------
// Completion backends

struct Completion {
    std::string text;
    std::size_t usage = 0;
    /// Stopped because the budget ran out.
    bool truncated = false;
};

class CompletionBackend {
public:
    virtual ~CompletionBackend() = default;
    virtual Completion complete(const std::string& prompt, const SamplingParams& sampling,
                                std::size_t max_units, std::span<const std::string> stop) = 0;
};

/// R1-distill chat template; "{question}" is replaced with the question text.
inline constexpr std::string_view kR1DistillTemplate =
    "<\xef\xbd\x9c" "begin\xe2\x96\x81of\xe2\x96\x81sentence\xef\xbd\x9c>"
    "<\xef\xbd\x9c" "User\xef\xbd\x9c>{question}"
    "<\xef\xbd\x9c" "Assistant\xef\xbd\x9c><think>\n";

/// Completion-style prompt: the templated question followed by the prefix
/// steps and the delimiter that opens the next step.
std::string build_prompt(std::string_view prompt_template, const Question& question,
                         std::span<const Step> prefix_steps);

/// Runs the two-phase protocol against any completion backend.
class TwoPhaseProvider final : public RolloutProvider {
public:
    TwoPhaseProvider(std::shared_ptr<CompletionBackend> backend,
                     std::string prompt_template = std::string(kR1DistillTemplate),
                     std::string close_marker = std::string(kDefaultThinkClose));

    ProviderResult generate(const ProviderRequest& req) override;

private:
    std::shared_ptr<CompletionBackend> backend_;
    std::string template_;
    std::string close_marker_;
};

struct HttpConfig {
    /// Base URL such as "http://localhost:8000/v1", or the full
    /// ".../completions" URL.
    std::string endpoint = "http://localhost:8000/v1";
    std::string model;
    std::string api_key;
    std::size_t max_in_flight = 8;
    std::size_t max_attempts = 3;
    std::chrono::milliseconds initial_backoff{500};
    std::chrono::seconds timeout{600};
};

/// OpenAI-compatible text-completions client. Connection failures, timeouts,
/// 429 and 5xx are retried with exponential backoff and surface as
/// TransientError once attempts run out; other HTTP errors throw
/// ProviderError.
class HttpCompletionBackend final : public CompletionBackend {
public:
    explicit HttpCompletionBackend(HttpConfig config);

    Completion complete(const std::string& prompt, const SamplingParams& sampling,
                        std::size_t max_units, std::span<const std::string> stop) override;

    const HttpConfig& config() const { return config_; }

private:
    Completion post_once(const std::string& body);

    HttpConfig config_;
    std::string scheme_host_port_;
    std::string path_;
    std::counting_semaphore<> in_flight_;
};

/// Reads the API key from RETRO_API_KEY, falling back to OPENAI_API_KEY.
std::string api_key_from_env();

}  // namespace retro
