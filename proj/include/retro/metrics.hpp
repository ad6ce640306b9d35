#pragma once

// Trace-quality statistics: thought transitions, steps per thought and where
// in the trace the final answer first shows up.

#include "retro/trace_model.hpp"
#include "retro/verifier.hpp"

#include <cstddef>
#include <nlohmann/json.hpp>
#include <optional>
#include <string>
#include <vector>

namespace retro {

struct TraceStats {
    /// Thought transitions: keyword-opened steps after the first step.
    std::size_t transition_keyword_count = 0;
    /// Word-bounded keyword phrases anywhere in the thinking text.
    std::size_t keyword_occurrences = 0;
    double steps_per_thought = 0.0;
    /// (1-based step of first answer mention) / total_steps.
    std::optional<double> relative_solution_location;
    std::size_t total_steps = 0;
    std::size_t total_chars = 0;
};

TraceStats trace_stats(const Trajectory& t, const GroundTruth& truth, const KeywordSet& keywords);

/// Whether `step_text` mentions the answer: a boxed expression normalizing to
/// it, or the normalized answer as a standalone token.
bool mentions_answer(std::string_view step_text, const GroundTruth& truth);

/// One analyzed before/after pair.
struct StatsPair {
    std::string id;
    TraceStats original;
    TraceStats revised;
    std::optional<std::size_t> original_tokens;
    std::optional<std::size_t> revised_tokens;
};

struct ColumnMean {
    double sum = 0.0;
    std::size_t count = 0;

    void add(double v) {
        sum += v;
        ++count;
    }
    void merge(const ColumnMean& o) {
        sum += o.sum;
        count += o.count;
    }
    std::optional<double> mean() const {
        return count == 0 ? std::nullopt : std::optional<double>(sum / static_cast<double>(count));
    }
};

struct SideMeans {
    ColumnMean transition_keywords;
    ColumnMean keyword_occurrences;
    ColumnMean steps_per_thought;
    ColumnMean relative_solution_location;
    ColumnMean total_steps;
    ColumnMean total_chars;
    ColumnMean tokens;

    void add(const TraceStats& s, std::optional<std::size_t> tokens);
    void merge(const SideMeans& o);
};

/// Associative accumulation of per-record statistics.
struct DatasetReport {
    std::size_t records = 0;
    SideMeans original;
    SideMeans revised;

    void add(const StatsPair& p);
    void merge(const DatasetReport& o);

    nlohmann::json to_json() const;
    std::string to_table() const;
    std::string to_csv() const;
};

/// Throws Error when `pairs` is empty.
DatasetReport dataset_stats(const std::vector<StatsPair>& pairs);

}  // namespace retro
