#pragma once

// Reasoning trajectories: a thinking section split into steps on "\n\n",
// grouped into thoughts wherever a step opens with a transition keyword,
// followed by a terminal solution segment.

#include <cstddef>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

namespace retro {

inline constexpr std::string_view kStepDelimiter = "\n\n";
inline constexpr std::string_view kDefaultThinkClose = "</think>";
inline constexpr std::string_view kDefaultThinkOpen = "<think>";

struct Question {
    std::string id;
    std::string text;
};

struct Step {
    std::string text;

    friend bool operator==(const Step&, const Step&) = default;
};

struct Thought {
    std::vector<Step> steps;

    friend bool operator==(const Thought&, const Thought&) = default;
};

struct Solution {
    std::string text;
    std::optional<std::string> extracted_answer;

    friend bool operator==(const Solution&, const Solution&) = default;
};

/// Ordered transition phrases. Each phrase matches in its listed form and in
/// its all-lowercase form; the longest matching phrase wins.
class KeywordSet {
public:
    /// The transition phrases used for R1-style traces.
    static KeywordSet defaults();

    /// One phrase per line, '#' comment lines and blank lines ignored.
    static KeywordSet load(const std::string& path);
    static KeywordSet parse(std::string_view contents);

    explicit KeywordSet(std::vector<std::string> phrases);

    const std::vector<std::string>& phrases() const { return phrases_; }

    /// Length of the keyword that `text` opens with (after leading
    /// whitespace), or 0. A match must be followed by a non-letter or end.
    std::size_t match_at_start(std::string_view text) const;
    bool starts_with_keyword(std::string_view text) const { return match_at_start(text) > 0; }

    /// Word-bounded occurrence of any phrase anywhere in `text`.
    bool contains_any(std::string_view text) const;
    /// Number of word-bounded, non-overlapping phrase occurrences in `text`.
    std::size_t count_occurrences(std::string_view text) const;

private:
    std::size_t match_here(std::string_view text, std::size_t pos) const;

    std::vector<std::string> phrases_;
    // listed and lowercase forms, longest first
    std::vector<std::string> forms_;
};

struct Segmentation {
    std::vector<Thought> thoughts;
    /// Blank segments removed between delimiters; nonzero means render() will
    /// not reproduce the input.
    std::size_t dropped_blank_segments = 0;
};

/// Splits on exact "\n\n"; a new thought starts at every step that opens
/// with a keyword. Throws MalformedTraceError on empty or blank input.
Segmentation segment_detailed(std::string_view raw_think_text, const KeywordSet& keywords);
std::vector<Thought> segment(std::string_view raw_think_text, const KeywordSet& keywords);

/// Appends `steps` to `thoughts`: a step that opens with a keyword starts a
/// new thought, anything else joins the last thought.
void append_steps(std::vector<Thought>& thoughts, std::span<const Step> steps,
                  const KeywordSet& keywords);

std::string render(std::span<const Thought> thoughts);
std::string join_steps(std::span<const Step> steps);

struct Trajectory {
    /// Text before the thinking section (an opening think tag), kept verbatim.
    std::string preamble;
    std::vector<Thought> thoughts;
    /// Empty when the trace carried no close marker; the solution is then the
    /// last step of the last thought.
    std::string close_marker;
    Solution solution;

    std::size_t dropped_blank_segments = 0;
    bool crlf_normalized = false;

    bool solution_inline() const { return close_marker.empty(); }
    std::size_t num_thoughts() const { return thoughts.size(); }
    /// Steps across all thoughts.
    std::size_t total_steps() const;
    /// Steps excluding an inline solution step.
    std::size_t reasoning_steps() const;
    /// Reasoning steps in thoughts after `thought_index` (0-based).
    std::size_t reasoning_steps_after(std::size_t thought_index) const;
    std::vector<Step> flat_steps() const;
    std::vector<Step> steps_through(std::size_t thought_index) const;
    bool lossy() const { return dropped_blank_segments > 0 || crlf_normalized; }

    friend bool operator==(const Trajectory& a, const Trajectory& b) {
        return a.preamble == b.preamble && a.thoughts == b.thoughts &&
               a.close_marker == b.close_marker && a.solution == b.solution;
    }
};

std::string normalize_line_endings(std::string_view text);

/// Splits a full record trace into thinking section and solution.
Trajectory parse_record_trace(std::string_view raw_text,
                              std::string_view think_close_marker,
                              const KeywordSet& keywords);

/// Inverse of parse_record_trace for non-lossy inputs.
std::string render_trajectory(const Trajectory& t);

}  // namespace retro
