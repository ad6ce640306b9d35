#include "retro/trace_model.hpp"

#include "retro/error.hpp"
#include "retro/verifier.hpp"

#include <algorithm>
#include <fstream>
#include <sstream>

namespace retro {

namespace {

bool is_ascii_letter(char c) {
    return (c >= 'a' && c <= 'z') || (c >= 'A' && c <= 'Z');
}

bool is_blank(std::string_view s) {
    return s.find_first_not_of(" \t\n\r\f\v") == std::string_view::npos;
}

std::string to_lower_ascii(std::string_view s) {
    std::string out(s);
    std::transform(out.begin(), out.end(), out.begin(), [](unsigned char c) {
        return (c >= 'A' && c <= 'Z') ? static_cast<char>(c - 'A' + 'a') : static_cast<char>(c);
    });
    return out;
}

std::string_view trim_view(std::string_view s) {
    const auto first = s.find_first_not_of(" \t\r\n");
    if (first == std::string_view::npos) {
        return {};
    }
    const auto last = s.find_last_not_of(" \t\r\n");
    return s.substr(first, last - first + 1);
}

}  // namespace

// ---------------------------------------------------------------------------
// KeywordSet

KeywordSet KeywordSet::defaults() {
    return KeywordSet({"But", "Wait", "Alternatively", "However", "Hmm", "Hmmm", "Not sure",
                       "Going back", "Backtrack", "Trace back", "Another"});
}

KeywordSet::KeywordSet(std::vector<std::string> phrases) : phrases_(std::move(phrases)) {
    if (phrases_.empty()) {
        throw ConfigError("keyword set must not be empty");
    }
    for (const auto& p : phrases_) {
        if (p.empty()) {
            throw ConfigError("keyword phrases must not be empty");
        }
        forms_.push_back(p);
        auto lower = to_lower_ascii(p);
        if (lower != p) {
            forms_.push_back(std::move(lower));
        }
    }
    std::stable_sort(forms_.begin(), forms_.end(),
                     [](const std::string& a, const std::string& b) { return a.size() > b.size(); });
    forms_.erase(std::unique(forms_.begin(), forms_.end()), forms_.end());
}

KeywordSet KeywordSet::parse(std::string_view contents) {
    std::vector<std::string> phrases;
    std::size_t pos = 0;
    while (pos <= contents.size()) {
        auto nl = contents.find('\n', pos);
        if (nl == std::string_view::npos) {
            nl = contents.size();
        }
        auto line = trim_view(contents.substr(pos, nl - pos));
        if (!line.empty() && line.front() != '#') {
            phrases.emplace_back(line);
        }
        pos = nl + 1;
    }
    if (phrases.empty()) {
        throw LoadError("keyword file contains no phrases");
    }
    return KeywordSet(std::move(phrases));
}

KeywordSet KeywordSet::load(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) {
        throw LoadError("cannot open keyword file: " + path);
    }
    std::ostringstream buf;
    buf << in.rdbuf();
    return parse(buf.str());
}

std::size_t KeywordSet::match_here(std::string_view text, std::size_t pos) const {
    for (const auto& form : forms_) {
        if (text.compare(pos, form.size(), form) != 0) {
            continue;
        }
        const auto end = pos + form.size();
        if (end == text.size() || !is_ascii_letter(text[end])) {
            return form.size();
        }
    }
    return 0;
}

std::size_t KeywordSet::match_at_start(std::string_view text) const {
    const auto first = text.find_first_not_of(" \t\n\r");
    if (first == std::string_view::npos) {
        return 0;
    }
    return match_here(text, first);
}

bool KeywordSet::contains_any(std::string_view text) const {
    for (std::size_t i = 0; i < text.size(); ++i) {
        if (i > 0 && is_ascii_letter(text[i - 1])) {
            continue;
        }
        if (match_here(text, i) > 0) {
            return true;
        }
    }
    return false;
}

std::size_t KeywordSet::count_occurrences(std::string_view text) const {
    std::size_t count = 0;
    std::size_t i = 0;
    while (i < text.size()) {
        if (i == 0 || !is_ascii_letter(text[i - 1])) {
            if (auto len = match_here(text, i); len > 0) {
                ++count;
                i += len;
                continue;
            }
        }
        ++i;
    }
    return count;
}

// ---------------------------------------------------------------------------
// Segmentation

Segmentation segment_detailed(std::string_view raw_think_text, const KeywordSet& keywords) {
    if (is_blank(raw_think_text)) {
        throw MalformedTraceError("thinking section is empty");
    }
    Segmentation out;
    std::vector<Step> steps;
    std::size_t pos = 0;
    while (true) {
        const auto next = raw_think_text.find(kStepDelimiter, pos);
        const auto piece = raw_think_text.substr(
            pos, next == std::string_view::npos ? std::string_view::npos : next - pos);
        if (is_blank(piece)) {
            ++out.dropped_blank_segments;
        } else {
            steps.push_back(Step{std::string(piece)});
        }
        if (next == std::string_view::npos) {
            break;
        }
        pos = next + kStepDelimiter.size();
    }

    out.thoughts.push_back(Thought{{std::move(steps.front())}});
    append_steps(out.thoughts, std::span<const Step>(steps).subspan(1), keywords);
    return out;
}

std::vector<Thought> segment(std::string_view raw_think_text, const KeywordSet& keywords) {
    return segment_detailed(raw_think_text, keywords).thoughts;
}

void append_steps(std::vector<Thought>& thoughts, std::span<const Step> steps,
                  const KeywordSet& keywords) {
    for (const auto& step : steps) {
        if (thoughts.empty() || keywords.starts_with_keyword(step.text)) {
            thoughts.push_back(Thought{{step}});
        } else {
            thoughts.back().steps.push_back(step);
        }
    }
}

std::string join_steps(std::span<const Step> steps) {
    std::string out;
    for (std::size_t i = 0; i < steps.size(); ++i) {
        if (i > 0) {
            out += kStepDelimiter;
        }
        out += steps[i].text;
    }
    return out;
}

std::string render(std::span<const Thought> thoughts) {
    std::string out;
    bool first = true;
    for (const auto& thought : thoughts) {
        for (const auto& step : thought.steps) {
            if (!first) {
                out += kStepDelimiter;
            }
            out += step.text;
            first = false;
        }
    }
    return out;
}

// ---------------------------------------------------------------------------
// Trajectory

std::size_t Trajectory::total_steps() const {
    std::size_t n = 0;
    for (const auto& t : thoughts) {
        n += t.steps.size();
    }
    return n;
}

std::size_t Trajectory::reasoning_steps() const {
    const auto n = total_steps();
    return solution_inline() && n > 0 ? n - 1 : n;
}

std::size_t Trajectory::reasoning_steps_after(std::size_t thought_index) const {
    std::size_t n = 0;
    for (std::size_t i = thought_index + 1; i < thoughts.size(); ++i) {
        n += thoughts[i].steps.size();
    }
    if (solution_inline() && n > 0) {
        --n;
    }
    return n;
}

std::vector<Step> Trajectory::flat_steps() const {
    std::vector<Step> out;
    for (const auto& t : thoughts) {
        out.insert(out.end(), t.steps.begin(), t.steps.end());
    }
    return out;
}

std::vector<Step> Trajectory::steps_through(std::size_t thought_index) const {
    std::vector<Step> out;
    for (std::size_t i = 0; i <= thought_index && i < thoughts.size(); ++i) {
        out.insert(out.end(), thoughts[i].steps.begin(), thoughts[i].steps.end());
    }
    return out;
}

std::string normalize_line_endings(std::string_view text) {
    std::string out;
    out.reserve(text.size());
    for (std::size_t i = 0; i < text.size(); ++i) {
        if (text[i] == '\r' && i + 1 < text.size() && text[i + 1] == '\n') {
            continue;
        }
        out.push_back(text[i]);
    }
    return out;
}

Trajectory parse_record_trace(std::string_view raw_text, std::string_view think_close_marker,
                              const KeywordSet& keywords) {
    if (raw_text.empty()) {
        throw MalformedTraceError("trace is empty");
    }
    Trajectory t;
    const std::string normalized = normalize_line_endings(raw_text);
    t.crlf_normalized = normalized.size() != raw_text.size();
    std::string_view text = normalized;

    if (text.starts_with(kDefaultThinkOpen)) {
        auto end = kDefaultThinkOpen.size();
        while (end < text.size() && text[end] == '\n') {
            ++end;
        }
        t.preamble = std::string(text.substr(0, end));
        text.remove_prefix(end);
    }

    const auto marker_pos =
        think_close_marker.empty() ? std::string_view::npos : text.find(think_close_marker);
    if (marker_pos != std::string_view::npos) {
        auto seg = segment_detailed(text.substr(0, marker_pos), keywords);
        t.thoughts = std::move(seg.thoughts);
        t.dropped_blank_segments = seg.dropped_blank_segments;
        t.close_marker = std::string(think_close_marker);
        t.solution.text = std::string(text.substr(marker_pos + think_close_marker.size()));
        t.solution.extracted_answer = extract_answer(t.solution.text);
    } else {
        auto seg = segment_detailed(text, keywords);
        t.thoughts = std::move(seg.thoughts);
        t.dropped_blank_segments = seg.dropped_blank_segments;
        t.solution.text = t.thoughts.back().steps.back().text;
        t.solution.extracted_answer = extract_answer(text);
    }
    return t;
}

std::string render_trajectory(const Trajectory& t) {
    std::string out = t.preamble;
    out += render(t.thoughts);
    if (!t.solution_inline()) {
        out += t.close_marker;
        out += t.solution.text;
    }
    return out;
}

}  // namespace retro
