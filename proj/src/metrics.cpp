#include "retro/metrics.hpp"

#include "retro/error.hpp"

#include <cctype>
#include <iomanip>
#include <sstream>

namespace retro {

namespace {

bool is_alnum(char c) {
    return std::isalnum(static_cast<unsigned char>(c)) != 0;
}

bool is_digit(char c) {
    return c >= '0' && c <= '9';
}

std::string lower(std::string_view s) {
    std::string out(s);
    for (auto& c : out) {
        c = static_cast<char>(std::tolower(static_cast<unsigned char>(c)));
    }
    return out;
}

bool standalone_at(std::string_view text, std::size_t pos, std::size_t len) {
    if (pos > 0) {
        const char prev = text[pos - 1];
        if (is_alnum(prev)) {
            return false;
        }
        // "0.4" and "-4" are different numbers than "4"
        if ((prev == '.' || prev == ',') && pos > 1 && is_digit(text[pos - 2])) {
            return false;
        }
        if (prev == '-' && is_digit(text[pos])) {
            return false;
        }
    }
    const auto end = pos + len;
    if (end < text.size()) {
        const char next = text[end];
        if (is_alnum(next)) {
            return false;
        }
        if ((next == '.' || next == ',') && end + 1 < text.size() && is_digit(text[end + 1])) {
            return false;
        }
    }
    return true;
}

}  // namespace

bool mentions_answer(std::string_view step_text, const GroundTruth& truth) {
    for (const auto& boxed : boxed_contents(step_text)) {
        if (reward(normalize_answer(boxed), truth)) {
            return true;
        }
    }
    const auto& needle = truth.normalized;
    if (needle.empty()) {
        return false;
    }
    const auto haystack = lower(step_text);
    for (auto pos = haystack.find(needle); pos != std::string::npos;
         pos = haystack.find(needle, pos + 1)) {
        if (standalone_at(haystack, pos, needle.size())) {
            return true;
        }
    }
    return false;
}

TraceStats trace_stats(const Trajectory& t, const GroundTruth& truth, const KeywordSet& keywords) {
    TraceStats s;
    std::size_t index = 0;
    std::optional<std::size_t> first_mention;
    for (std::size_t ti = 0; ti < t.thoughts.size(); ++ti) {
        const auto& steps = t.thoughts[ti].steps;
        for (std::size_t si = 0; si < steps.size(); ++si) {
            ++index;
            const auto& text = steps[si].text;
            if (index > 1 && keywords.starts_with_keyword(text)) {
                ++s.transition_keyword_count;
            }
            s.keyword_occurrences += keywords.count_occurrences(text);
            s.total_chars += text.size();
            if (!first_mention && mentions_answer(text, truth)) {
                first_mention = index;
            }
        }
    }
    s.total_steps = index;
    s.steps_per_thought = t.thoughts.empty()
                              ? 0.0
                              : static_cast<double>(index) / static_cast<double>(t.thoughts.size());
    if (first_mention && index > 0) {
        s.relative_solution_location =
            static_cast<double>(*first_mention) / static_cast<double>(index);
    }
    return s;
}

void SideMeans::add(const TraceStats& s, std::optional<std::size_t> tok) {
    transition_keywords.add(static_cast<double>(s.transition_keyword_count));
    keyword_occurrences.add(static_cast<double>(s.keyword_occurrences));
    steps_per_thought.add(s.steps_per_thought);
    if (s.relative_solution_location) {
        relative_solution_location.add(*s.relative_solution_location);
    }
    total_steps.add(static_cast<double>(s.total_steps));
    total_chars.add(static_cast<double>(s.total_chars));
    if (tok) {
        tokens.add(static_cast<double>(*tok));
    }
}

void SideMeans::merge(const SideMeans& o) {
    transition_keywords.merge(o.transition_keywords);
    keyword_occurrences.merge(o.keyword_occurrences);
    steps_per_thought.merge(o.steps_per_thought);
    relative_solution_location.merge(o.relative_solution_location);
    total_steps.merge(o.total_steps);
    total_chars.merge(o.total_chars);
    tokens.merge(o.tokens);
}

void DatasetReport::add(const StatsPair& p) {
    ++records;
    original.add(p.original, p.original_tokens);
    revised.add(p.revised, p.revised_tokens);
}

void DatasetReport::merge(const DatasetReport& o) {
    records += o.records;
    original.merge(o.original);
    revised.merge(o.revised);
}

namespace {

struct Column {
    const char* key;
    const char* label;
    ColumnMean SideMeans::*member;
};

constexpr Column kColumns[] = {
    {"transition_keywords", "#Transition keywords", &SideMeans::transition_keywords},
    {"keyword_occurrences", "#Keyword occurrences (any position)", &SideMeans::keyword_occurrences},
    {"steps_per_thought", "#Steps / thought", &SideMeans::steps_per_thought},
    {"relative_solution_location", "Relative location of solution",
     &SideMeans::relative_solution_location},
    {"total_steps", "#Steps", &SideMeans::total_steps},
    {"total_chars", "#Characters", &SideMeans::total_chars},
    {"tokens", "#Tokens (external)", &SideMeans::tokens},
};

std::string format_mean(const ColumnMean& m) {
    const auto v = m.mean();
    if (!v) {
        return "-";
    }
    std::ostringstream out;
    out << std::fixed << std::setprecision(3) << *v;
    return out.str();
}

nlohmann::json side_json(const SideMeans& side) {
    nlohmann::json j = nlohmann::json::object();
    for (const auto& col : kColumns) {
        const auto& m = side.*(col.member);
        j[col.key] = m.mean() ? nlohmann::json(*m.mean()) : nlohmann::json(nullptr);
    }
    return j;
}

}  // namespace

nlohmann::json DatasetReport::to_json() const {
    return {
        {"records", records},
        {"original", side_json(original)},
        {"revised", side_json(revised)},
    };
}

std::string DatasetReport::to_table() const {
    std::size_t label_width = std::string_view("Metric").size();
    for (const auto& col : kColumns) {
        label_width = std::max(label_width, std::string_view(col.label).size());
    }
    constexpr int kValueWidth = 12;
    std::ostringstream out;
    out << std::left << std::setw(static_cast<int>(label_width)) << "Metric" << std::right
        << std::setw(kValueWidth) << "Original" << std::setw(kValueWidth) << "Revised" << '\n';
    out << std::string(label_width + 2 * kValueWidth, '-') << '\n';
    for (const auto& col : kColumns) {
        out << std::left << std::setw(static_cast<int>(label_width)) << col.label << std::right
            << std::setw(kValueWidth) << format_mean(original.*(col.member))
            << std::setw(kValueWidth) << format_mean(revised.*(col.member)) << '\n';
    }
    out << "records: " << records << '\n';
    return out.str();
}

std::string DatasetReport::to_csv() const {
    std::ostringstream out;
    out << "metric,original,revised\n";
    for (const auto& col : kColumns) {
        const auto o = (original.*(col.member)).mean();
        const auto r = (revised.*(col.member)).mean();
        out << col.key << ',';
        if (o) {
            out << *o;
        }
        out << ',';
        if (r) {
            out << *r;
        }
        out << '\n';
    }
    return out.str();
}

DatasetReport dataset_stats(const std::vector<StatsPair>& pairs) {
    if (pairs.empty()) {
        throw Error("no records with both an original and a revised trajectory");
    }
    DatasetReport report;
    for (const auto& p : pairs) {
        report.add(p);
    }
    return report;
}

}  // namespace retro
