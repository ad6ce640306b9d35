#include "retro/verifier.hpp"

#include "retro/error.hpp"

#include <spdlog/spdlog.h>

#include <cstdio>
#include <numeric>
#include <sys/wait.h>

namespace retro {

namespace {

bool is_space(char c) {
    return c == ' ' || c == '\t' || c == '\n' || c == '\r' || c == '\f' || c == '\v';
}

bool is_letter(char c) {
    return (c >= 'a' && c <= 'z') || (c >= 'A' && c <= 'Z');
}

std::string trim(std::string_view s) {
    std::size_t b = 0;
    std::size_t e = s.size();
    while (b < e && is_space(s[b])) {
        ++b;
    }
    while (e > b && is_space(s[e - 1])) {
        --e;
    }
    return std::string(s.substr(b, e - b));
}

// Index one past the brace that closes the '{' at `open`, or npos.
std::size_t match_brace(std::string_view s, std::size_t open) {
    int depth = 0;
    for (std::size_t i = open; i < s.size(); ++i) {
        if (s[i] == '{') {
            ++depth;
        } else if (s[i] == '}') {
            if (--depth == 0) {
                return i + 1;
            }
        }
    }
    return std::string_view::npos;
}

// Removes a control word (e.g. "\left") wherever it is not followed by a letter.
std::string strip_command(std::string_view s, std::string_view command) {
    std::string out;
    std::size_t i = 0;
    while (i < s.size()) {
        if (s.compare(i, command.size(), command) == 0 &&
            (i + command.size() == s.size() || !is_letter(s[i + command.size()]))) {
            i += command.size();
            continue;
        }
        out.push_back(s[i++]);
    }
    return out;
}

// Replaces "\text{X}" with "X".
std::string unwrap_text(std::string_view s) {
    static constexpr std::string_view kText = "\\text{";
    std::string out;
    std::size_t i = 0;
    while (i < s.size()) {
        if (s.compare(i, kText.size(), kText) == 0) {
            const auto open = i + kText.size() - 1;
            const auto close = match_brace(s, open);
            if (close != std::string_view::npos) {
                out.append(s.substr(open + 1, close - open - 2));
                i = close;
                continue;
            }
        }
        out.push_back(s[i++]);
    }
    return out;
}

// Replaces "\frac{A}{B}" with "A/B".
std::string rewrite_frac(std::string_view s) {
    static constexpr std::string_view kFrac = "\\frac{";
    std::string out;
    std::size_t i = 0;
    while (i < s.size()) {
        if (s.compare(i, kFrac.size(), kFrac) == 0) {
            const auto open1 = i + kFrac.size() - 1;
            const auto close1 = match_brace(s, open1);
            if (close1 != std::string_view::npos && close1 < s.size() && s[close1] == '{') {
                const auto close2 = match_brace(s, close1);
                if (close2 != std::string_view::npos) {
                    out.append(s.substr(open1 + 1, close1 - open1 - 2));
                    out.push_back('/');
                    out.append(s.substr(close1 + 1, close2 - close1 - 2));
                    i = close2;
                    continue;
                }
            }
        }
        out.push_back(s[i++]);
    }
    return out;
}

std::string collapse_whitespace(std::string_view s) {
    std::string out;
    bool in_space = false;
    for (char c : s) {
        if (is_space(c)) {
            in_space = true;
            continue;
        }
        if (in_space && !out.empty()) {
            out.push_back(' ');
        }
        in_space = false;
        out.push_back(c);
    }
    return out;
}

std::string normalize_once(std::string_view in) {
    std::string s = trim(in);
    while (s.size() >= 2 && s.front() == '$' && s.back() == '$') {
        s = trim(std::string_view(s).substr(1, s.size() - 2));
    }
    s = strip_command(s, "\\left");
    s = strip_command(s, "\\right");
    while (!s.empty() && s.back() == '.') {
        s.pop_back();
        s = trim(s);
    }
    s = unwrap_text(s);
    s = collapse_whitespace(s);
    for (auto& c : s) {
        if (c >= 'A' && c <= 'Z') {
            c = static_cast<char>(c - 'A' + 'a');
        }
    }
    return rewrite_frac(s);
}

struct Rational {
    __int128 num = 0;
    __int128 den = 1;
};

std::optional<__int128> parse_digits(std::string_view s) {
    if (s.empty() || s.size() > 18) {
        return std::nullopt;
    }
    __int128 v = 0;
    for (char c : s) {
        if (c < '0' || c > '9') {
            return std::nullopt;
        }
        v = v * 10 + (c - '0');
    }
    return v;
}

// Integers, finite decimals and integer fractions; anything else is absent.
std::optional<Rational> parse_rational(std::string_view s) {
    bool negative = false;
    if (!s.empty() && (s.front() == '-' || s.front() == '+')) {
        negative = s.front() == '-';
        s.remove_prefix(1);
    }
    Rational r;
    if (const auto slash = s.find('/'); slash != std::string_view::npos) {
        auto num = parse_digits(s.substr(0, slash));
        auto den = parse_digits(s.substr(slash + 1));
        if (!num || !den || *den == 0) {
            return std::nullopt;
        }
        r = {*num, *den};
    } else if (const auto dot = s.find('.'); dot != std::string_view::npos) {
        auto int_part = s.substr(0, dot);
        auto frac_part = s.substr(dot + 1);
        if (int_part.empty() && frac_part.empty()) {
            return std::nullopt;
        }
        if (int_part.size() + frac_part.size() > 18) {
            return std::nullopt;
        }
        std::string digits = std::string(int_part) + std::string(frac_part);
        auto num = parse_digits(digits);
        if (!num) {
            return std::nullopt;
        }
        __int128 den = 1;
        for (std::size_t i = 0; i < frac_part.size(); ++i) {
            den *= 10;
        }
        r = {*num, den};
    } else {
        auto num = parse_digits(s);
        if (!num) {
            return std::nullopt;
        }
        r = {*num, 1};
    }
    if (negative) {
        r.num = -r.num;
    }
    return r;
}

}  // namespace

GroundTruth GroundTruth::from_raw(std::string_view raw) {
    return GroundTruth{std::string(raw), normalize_answer(raw)};
}

std::string normalize_answer(std::string_view answer) {
    std::string current(answer);
    while (true) {
        auto next = normalize_once(current);
        if (next == current) {
            return current;
        }
        current = std::move(next);
    }
}

std::vector<std::string> boxed_contents(std::string_view text) {
    static constexpr std::string_view kBoxed = "\\boxed";
    std::vector<std::string> out;
    std::size_t pos = 0;
    while ((pos = text.find(kBoxed, pos)) != std::string_view::npos) {
        auto open = pos + kBoxed.size();
        while (open < text.size() && text[open] == ' ') {
            ++open;
        }
        pos += kBoxed.size();
        if (open >= text.size() || text[open] != '{') {
            continue;
        }
        const auto close = match_brace(text, open);
        if (close == std::string_view::npos) {
            continue;
        }
        out.emplace_back(text.substr(open + 1, close - open - 2));
    }
    return out;
}

std::optional<std::string> extract_answer(std::string_view solution_text) {
    static constexpr std::string_view kBoxed = "\\boxed";
    const auto pos = solution_text.rfind(kBoxed);
    if (pos == std::string_view::npos) {
        return std::nullopt;
    }
    auto open = pos + kBoxed.size();
    while (open < solution_text.size() && solution_text[open] == ' ') {
        ++open;
    }
    if (open >= solution_text.size() || solution_text[open] != '{') {
        spdlog::warn("\\boxed without an opening brace; treating answer as absent");
        return std::nullopt;
    }
    const auto close = match_brace(solution_text, open);
    if (close == std::string_view::npos) {
        spdlog::warn("unbalanced braces in \\boxed expression; treating answer as absent");
        return std::nullopt;
    }
    return normalize_answer(solution_text.substr(open + 1, close - open - 2));
}

Reward reward(const std::optional<std::string>& predicted, const GroundTruth& truth) {
    if (!predicted) {
        return Reward::incorrect();
    }
    const auto lhs = normalize_answer(*predicted);
    const auto rhs = normalize_answer(truth.normalized);
    if (lhs == rhs) {
        return Reward::correct();
    }
    const auto a = parse_rational(lhs);
    const auto b = parse_rational(rhs);
    if (a && b && a->num * b->den == b->num * a->den) {
        return Reward::correct();
    }
    return Reward::incorrect();
}

Reward CommandVerifier::score(const std::optional<std::string>& predicted,
                              const GroundTruth& truth) const {
    if (!predicted) {
        return Reward::incorrect();
    }
    std::lock_guard lock(mutex_);
    FILE* pipe = ::popen(command_.c_str(), "w");
    if (pipe == nullptr) {
        throw Error("cannot start verifier command: " + command_);
    }
    const std::string payload = *predicted + "\n" + truth.normalized + "\n";
    std::fwrite(payload.data(), 1, payload.size(), pipe);
    const int status = ::pclose(pipe);
    if (status == -1 || !WIFEXITED(status)) {
        throw Error("verifier command terminated abnormally: " + command_);
    }
    switch (WEXITSTATUS(status)) {
        case 0:
            return Reward::correct();
        case 1:
            return Reward::incorrect();
        default:
            throw Error("verifier command exited with status " +
                        std::to_string(WEXITSTATUS(status)));
    }
}

const Verifier& default_verifier() {
    static const ExactMatchVerifier verifier;
    return verifier;
}

}  // namespace retro
