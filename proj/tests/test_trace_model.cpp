#include "retro/error.hpp"
#include "retro/trace_model.hpp"

#include "reference_search.hpp"
#include "scenario.hpp"

#include <doctest.h>

#include <random>

using namespace retro;

namespace {

std::vector<std::vector<std::string>> texts(const std::vector<Thought>& thoughts) {
    std::vector<std::vector<std::string>> out;
    for (const auto& t : thoughts) {
        std::vector<std::string> steps;
        for (const auto& s : t.steps) {
            steps.push_back(s.text);
        }
        out.push_back(steps);
    }
    return out;
}

// Random trace of steps that never begin or end with a newline, so no blank
// segment can form.
std::string random_trace(std::mt19937_64& rng) {
    static const std::vector<std::string> words = {"x", "=", "1", "then", "we", "get", "Butter",
                                                   "but", "sum", "42", "Another", "(", ")", "\\boxed{3}"};
    const auto& kw = scenario::keywords();
    std::uniform_int_distribution<std::size_t> n_steps(1, 12);
    std::uniform_int_distribution<std::size_t> n_words(1, 8);
    std::uniform_int_distribution<int> roll(0, 9);
    std::string out;
    const auto steps = n_steps(rng);
    for (std::size_t s = 0; s < steps; ++s) {
        std::string step;
        if (roll(rng) < 2) {
            step += "  ";
        }
        if (roll(rng) < 4) {
            const auto& k = kw[rng() % kw.size()];
            step += roll(rng) < 3 ? std::string(1, static_cast<char>(std::tolower(k[0]))) + k.substr(1) : k;
            step += roll(rng) < 5 ? ", " : " ";
        }
        const auto nw = n_words(rng);
        for (std::size_t w = 0; w < nw; ++w) {
            if (w > 0) {
                step += roll(rng) == 0 ? "\n" : " ";
            }
            step += words[rng() % words.size()];
        }
        out += (s ? "\n\n" : "") + step;
    }
    return out;
}

}  // namespace

TEST_SUITE("trace_model") {
    TEST_CASE("segment: examples") {
        const auto kw = KeywordSet::defaults();
        CHECK(texts(segment("Compute 2+2.", kw)) ==
              std::vector<std::vector<std::string>>{{"Compute 2+2."}});
        CHECK(texts(segment("Compute 2+2.\n\nWait, check again.\n\nIt is 4.", kw)) ==
              std::vector<std::vector<std::string>>{{"Compute 2+2."}, {"Wait, check again.", "It is 4."}});

        const std::string derived = "x=1\n\nAnother approach: y.\n\nHowever, z.";
        const auto thoughts = segment(derived, kw);
        CHECK(texts(thoughts) == std::vector<std::vector<std::string>>{{"x=1"}, {"Another approach: y."}, {"However, z."}});
        // character-level reference splitter agrees
        CHECK(ref::count_thoughts(derived, scenario::keywords(), "</think>") == thoughts.size());
    }

    TEST_CASE("segment: empty input is malformed") {
        const auto kw = KeywordSet::defaults();
        CHECK_THROWS_AS(segment("", kw), MalformedTraceError);
        CHECK_THROWS_AS(segment(" \n\n \t", kw), MalformedTraceError);
    }

    TEST_CASE("segment: keyword rules") {
        const auto kw = KeywordSet::defaults();
        SUBCASE("word boundary") {
            CHECK(segment("a\n\nButter is soft", kw).size() == 1);
            CHECK(segment("a\n\nBut butter is soft", kw).size() == 2);
            CHECK(segment("a\n\nWait", kw).size() == 2);
        }
        SUBCASE("lowercase form matches, other casings do not") {
            CHECK(segment("a\n\nwait, no", kw).size() == 2);
            CHECK(segment("a\n\nWAIT, no", kw).size() == 1);
        }
        SUBCASE("leading whitespace is ignored") {
            CHECK(segment("a\n\n   Hmm, odd", kw).size() == 2);
        }
        SUBCASE("mid-step keyword does not split") {
            CHECK(segment("a but b\n\nc, wait", kw).size() == 1);
        }
        SUBCASE("first step never needs a keyword") {
            CHECK(segment("Wait, first\n\nsecond", kw).size() == 1);
        }
    }

    TEST_CASE("keyword longest match") {
        const auto kw = KeywordSet::defaults();
        CHECK(kw.match_at_start("Not sure about this") == std::string_view("Not sure").size());
        CHECK(kw.count_occurrences("Not sure about this") == 1);
        CHECK(kw.match_at_start("Hmmm, ok") == 4);
        CHECK(kw.match_at_start("Hmm, ok") == 3);
        CHECK(kw.match_at_start("Hmmmm") == 0);
        CHECK(kw.contains_any("it works but slowly"));
        CHECK_FALSE(kw.contains_any("Butter and rebuttal"));
    }

    TEST_CASE("keyword file") {
        const auto kw = KeywordSet::parse("# comment\nWait\n\n  Let me think  \n#Other\n");
        CHECK(kw.phrases() == std::vector<std::string>{"Wait", "Let me think"});
        CHECK(kw.starts_with_keyword("let me think again"));
        CHECK_THROWS_AS(KeywordSet::parse("# only comments\n"), LoadError);
        CHECK_THROWS_AS(KeywordSet::load("/nonexistent/keywords.txt"), LoadError);
    }

    TEST_CASE("render: examples") {
        CHECK(render(std::vector<Thought>{{{Step{"A"}}}, {{Step{"Wait, B"}}}}) == "A\n\nWait, B");
        CHECK(render(std::vector<Thought>{{{Step{"A"}, Step{"B"}}}}) == "A\n\nB");
    }

    TEST_CASE("property: round trip, boundary soundness and step conservation") {
        const auto kw = KeywordSet::defaults();
        std::mt19937_64 rng(20240517);
        for (int i = 0; i < 1000; ++i) {
            const auto raw = random_trace(rng);
            const auto seg = segment_detailed(raw, kw);
            REQUIRE(seg.dropped_blank_segments == 0);
            CHECK(render(seg.thoughts) == raw);

            std::size_t segments = 1;
            for (std::size_t p = raw.find("\n\n"); p != std::string::npos; p = raw.find("\n\n", p + 2)) {
                ++segments;
            }
            std::size_t steps = 0;
            for (std::size_t t = 0; t < seg.thoughts.size(); ++t) {
                for (std::size_t s = 0; s < seg.thoughts[t].steps.size(); ++s) {
                    const bool global_first = t == 0 && s == 0;
                    const bool opens = s == 0 && !global_first;
                    CHECK(opens == (!global_first && kw.starts_with_keyword(seg.thoughts[t].steps[s].text)));
                    ++steps;
                }
            }
            CHECK(steps == segments);
            CHECK(ref::count_thoughts(raw, scenario::keywords(), "</think>") == seg.thoughts.size());
        }
    }

    TEST_CASE("blank runs are dropped and flagged") {
        const auto kw = KeywordSet::defaults();
        const auto seg = segment_detailed("a\n\n\n\nb\n\n", kw);
        CHECK(texts(seg.thoughts) == std::vector<std::vector<std::string>>{{"a", "b"}});
        CHECK(seg.dropped_blank_segments == 2);

        // three newlines keep the extra one on the next step
        const auto three = segment_detailed("a\n\n\nb", kw);
        CHECK(three.dropped_blank_segments == 0);
        CHECK(render(three.thoughts) == "a\n\n\nb");
    }

    TEST_CASE("parse_record_trace: examples") {
        const auto kw = KeywordSet::defaults();
        SUBCASE("marker present") {
            const auto t = parse_record_trace("A\n\nWait, B</think>\\boxed{4}", "</think>", kw);
            CHECK(t.num_thoughts() == 2);
            CHECK(t.solution.text == "\\boxed{4}");
            CHECK(t.solution.extracted_answer == "4");
            CHECK_FALSE(t.solution_inline());
            CHECK(t.reasoning_steps() == 2);
        }
        SUBCASE("marker absent") {
            const auto t = parse_record_trace("A\n\n\\boxed{7}", "</think>", kw);
            CHECK(t.num_thoughts() == 1);
            CHECK(t.thoughts[0].steps.size() == 2);
            CHECK(t.solution.text == "\\boxed{7}");
            CHECK(t.solution.extracted_answer == "7");
            CHECK(t.solution_inline());
            CHECK(t.reasoning_steps() == 1);
        }
        SUBCASE("empty thinking section") {
            CHECK_THROWS_AS(parse_record_trace("</think>x", "</think>", kw), MalformedTraceError);
            CHECK_THROWS_AS(parse_record_trace("", "</think>", kw), MalformedTraceError);
        }
    }

    TEST_CASE("parse_record_trace: opening tag, CRLF and round trip") {
        const auto kw = KeywordSet::defaults();
        const std::string raw = "<think>\nLet x = 2.\n\nHmm, so 2x = 4.\n</think>\n\nThus \\boxed{4}.";
        const auto t = parse_record_trace(raw, "</think>", kw);
        CHECK(t.preamble == "<think>\n");
        CHECK(t.thoughts[0].steps[0].text == "Let x = 2.");
        CHECK(t.num_thoughts() == 2);
        CHECK(render_trajectory(t) == raw);
        CHECK_FALSE(t.lossy());

        const auto crlf = parse_record_trace("a\r\n\r\nWait b</think>\\boxed{1}", "</think>", kw);
        CHECK(crlf.crlf_normalized);
        CHECK(crlf.num_thoughts() == 2);
    }

    TEST_CASE("trajectory step accounting") {
        const auto kw = KeywordSet::defaults();
        const auto t = parse_record_trace("a\n\nb\n\nWait c\n\nd\n\nHmm e\n\n\\boxed{1}", "</think>", kw);
        REQUIRE(t.num_thoughts() == 3);
        CHECK(t.total_steps() == 6);
        CHECK(t.reasoning_steps() == 5);
        CHECK(t.reasoning_steps_after(0) == 3);  // c, d, e (boxed step is the solution)
        CHECK(t.reasoning_steps_after(1) == 1);
        CHECK(t.steps_through(1).size() == 4);
    }
}
