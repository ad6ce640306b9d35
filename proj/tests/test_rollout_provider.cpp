#include "retro/error.hpp"
#include "retro/rollout_provider.hpp"

#include "reference_search.hpp"
#include "scenario.hpp"

#include <doctest.h>
#include <httplib.h>
#include <nlohmann/json.hpp>

#include <atomic>
#include <deque>
#include <mutex>
#include <thread>

using namespace retro;
using json = nlohmann::json;

namespace {

ProviderRequest request_for(std::string id, std::size_t ordinal, std::size_t sample) {
    ProviderRequest req;
    req.question = Question{std::move(id), "What is 2+2?"};
    req.prefix_steps = {Step{"Let me add."}, Step{"2+2=4."}};
    req.expansion_ordinal = ordinal;
    req.sample_index = sample;
    return req;
}

// Minimal OpenAI-compatible completions server replaying canned responses.
class FakeEndpoint {
public:
    struct Reply {
        int status = 200;
        std::string text;
        std::string finish_reason = "stop";
        std::size_t tokens = 3;
    };

    FakeEndpoint() {
        server_.Post("/v1/completions", [this](const httplib::Request& req, httplib::Response& res) {
            Reply reply;
            {
                std::lock_guard lock(mutex_);
                bodies_.push_back(json::parse(req.body));
                authorization_ = req.get_header_value("Authorization");
                if (!replies_.empty()) {
                    reply = replies_.front();
                    replies_.pop_front();
                }
            }
            res.status = reply.status;
            if (reply.status == 200) {
                json body = {{"choices", {{{"text", reply.text}, {"finish_reason", reply.finish_reason}}}},
                             {"usage", {{"completion_tokens", reply.tokens}}}};
                res.set_content(body.dump(), "application/json");
            } else {
                res.set_content("{\"error\":\"nope\"}", "application/json");
            }
        });
        port_ = server_.bind_to_any_port("127.0.0.1");
        thread_ = std::thread([this] { server_.listen_after_bind(); });
        server_.wait_until_ready();
    }

    ~FakeEndpoint() {
        server_.stop();
        thread_.join();
    }

    void push(Reply r) {
        std::lock_guard lock(mutex_);
        replies_.push_back(std::move(r));
    }

    std::vector<json> bodies() {
        std::lock_guard lock(mutex_);
        return bodies_;
    }

    std::string authorization() {
        std::lock_guard lock(mutex_);
        return authorization_;
    }

    std::string url() const { return "http://127.0.0.1:" + std::to_string(port_) + "/v1"; }

private:
    httplib::Server server_;
    int port_ = 0;
    std::thread thread_;
    std::mutex mutex_;
    std::deque<Reply> replies_;
    std::vector<json> bodies_;
    std::string authorization_;
};

HttpConfig fast_config(const std::string& url) {
    HttpConfig cfg;
    cfg.endpoint = url;
    cfg.model = "tiny-reasoner";
    cfg.api_key = "sk-test";
    cfg.initial_backoff = std::chrono::milliseconds(1);
    cfg.timeout = std::chrono::seconds(5);
    return cfg;
}

}  // namespace

TEST_SUITE("rollout_provider") {
    TEST_CASE("defaults") {
        SamplingParams s;
        CHECK(s.temperature == 1.0);
        CHECK(s.top_p == doctest::Approx(0.98));
        CHECK(s.max_new_units == 16384);
        CHECK(s.resample_limit >= 1);
        SamplingParams bad;
        bad.resample_limit = 0;
        CHECK_THROWS_AS(bad.validate(), ConfigError);
    }

    TEST_CASE("parse_rollout_text") {
        SUBCASE("inline solution is the last step") {
            const auto r = parse_rollout_text("thus x=4\n\n\\boxed{4}", "</think>", false);
            CHECK(r.steps == std::vector<Step>{Step{"thus x=4"}});
            CHECK(r.solution_text == "\\boxed{4}");
            CHECK(r.close_marker.empty());
        }
        SUBCASE("marker splits steps and solution") {
            const auto r = parse_rollout_text("a\n\nb</think>\n\n\\boxed{4}", "</think>", false);
            CHECK(r.steps.size() == 2);
            CHECK(r.solution_text == "\n\n\\boxed{4}");
            CHECK(r.close_marker == "</think>");
        }
        SUBCASE("answer-only rollout") {
            const auto r = parse_rollout_text("</think>\\boxed{4}", "</think>", false);
            CHECK(r.steps.empty());
            CHECK(r.solution_text == "\\boxed{4}");
        }
        SUBCASE("truncation leaves no solution") {
            const auto r = parse_rollout_text("a\n\nb", "</think>", true);
            CHECK(r.steps.size() == 2);
            CHECK(r.solution_text.empty());
        }
    }

    TEST_CASE("scripted: examples") {
        ScriptedProvider::Table table;
        table[{"r1", 2, 0}] = {"thus x=4\n\n\\boxed{4}"};
        table[{"r1", 2, 1}] = {"so 4\n\n\\boxed{4}"};
        table[{"r1", 0, 0}] = {"Wait, hmm"};
        ScriptedProvider provider(table);

        const auto r = provider.generate(request_for("r1", 2, 0));
        CHECK(r.constraint_satisfied);
        CHECK(r.steps == std::vector<Step>{Step{"thus x=4"}});
        CHECK(r.solution_text == "\\boxed{4}");

        auto banned = request_for("r1", 0, 0);
        banned.sampling.resample_limit = 1;
        CHECK_FALSE(provider.generate(banned).constraint_satisfied);

        CHECK(provider.generate(request_for("r1", 2, 1)).raw_text != r.raw_text);
        CHECK_THROWS_AS(provider.generate(request_for("r1", 5, 0)), FixtureMissError);
        // same request, same answer
        CHECK(provider.generate(request_for("r1", 2, 0)).raw_text == r.raw_text);
    }

    TEST_CASE("scripted: resampling walks the attempt list") {
        ScriptedProvider::Table table;
        table[{"r", 0, 0}] = {"Hmm, odd\n\nx", "it is 4\n\n\\boxed{4}"};
        ScriptedProvider provider(table);
        auto req = request_for("r", 0, 0);
        req.sampling.resample_limit = 2;
        const auto ok = provider.generate(req);
        CHECK(ok.constraint_satisfied);
        CHECK(ok.draws == 2);
        CHECK(ok.steps.front().text == "it is 4");
        req.sampling.resample_limit = 1;
        CHECK_FALSE(provider.generate(req).constraint_satisfied);
    }

    TEST_CASE("scripted: budget in characters") {
        ScriptedProvider::Table table;
        table[{"r", 0, 0}] = {"abcdef\n\nghijkl\n\n\\boxed{4}"};
        ScriptedProvider provider(table);
        auto req = request_for("r", 0, 0);
        req.sampling.max_new_units = 10;
        const auto r = provider.generate(req);
        CHECK(r.truncated);
        CHECK(r.solution_text.empty());
        CHECK(r.usage == 10);
    }

    TEST_CASE("scripted: fixture file errors") {
        CHECK(ScriptedProvider::parse_fixture(
                  "{\"record_id\":\"a\",\"expansion\":0,\"sample\":0,\"text\":\"x\"}\n\n")
                  .size() == 1);
        try {
            ScriptedProvider::parse_fixture(
                "{\"record_id\":\"a\",\"expansion\":0,\"sample\":0,\"text\":\"x\"}\n"
                "{\"record_id\":\"a\",\"expansion\":0,\"sample\":0,\"text\":\"y\"}\n");
            FAIL("duplicate key accepted");
        } catch (const LoadError& e) {
            CHECK(std::string(e.what()).find("line 2") != std::string::npos);
        }
        CHECK_THROWS_AS(ScriptedProvider::parse_fixture("{not json\n"), LoadError);
        CHECK_THROWS_AS(ScriptedProvider::parse_fixture("{\"record_id\":\"a\",\"expansion\":0}\n"), LoadError);
        CHECK_THROWS_AS(ScriptedProvider::parse_fixture(
                            "{\"record_id\":\"a\",\"expansion\":-1,\"sample\":0,\"text\":\"x\"}\n"),
                        LoadError);
        CHECK_THROWS_AS(ScriptedProvider::load("/nonexistent/fixture.jsonl"), LoadError);
    }

    TEST_CASE("property: constraint soundness over fuzzed fixtures") {
        const auto kw = KeywordSet::defaults();
        for (std::uint64_t seed = 0; seed < 200; ++seed) {
            const auto sc = scenario::generate(seed);
            ScriptedProvider::Table table;
            for (const auto& [key, draws] : sc.fixture) {
                table[{std::get<0>(key), std::get<1>(key), std::get<2>(key)}] = draws;
            }
            ScriptedProvider provider(table);
            for (const auto& [key, draws] : table) {
                ProviderRequest req = request_for(key.record_id, key.expansion_ordinal, key.sample_index);
                const auto r = provider.generate(req);
                if (!r.constraint_satisfied) {
                    continue;
                }
                std::string first = !r.steps.empty() ? r.steps.front().text
                                    : r.close_marker.empty() ? r.solution_text
                                                             : std::string();
                CHECK_FALSE(ref::regex_contains_keyword(first, scenario::keywords()));
            }
        }
    }

    TEST_CASE("prompt matches the golden R1-distill layout") {
        const std::string golden =
            "<\xef\xbd\x9c" "begin\xe2\x96\x81of\xe2\x96\x81sentence\xef\xbd\x9c>"
            "<\xef\xbd\x9cUser\xef\xbd\x9c>What is 2+2?"
            "<\xef\xbd\x9c" "Assistant\xef\xbd\x9c><think>\n"
            "Let me add.\n\n2+2=4.\n\n";
        const auto req = request_for("r", 0, 0);
        CHECK(build_prompt(kR1DistillTemplate, req.question, req.prefix_steps) == golden);
        CHECK_THROWS_AS(build_prompt("no placeholder", req.question, req.prefix_steps), ConfigError);
    }

    TEST_CASE("http: two-phase protocol on the wire") {
        FakeEndpoint endpoint;
        endpoint.push({200, "Wait, hmm", "stop", 2});
        endpoint.push({200, "thus x=4", "stop", 4});
        endpoint.push({200, "</think>\n\n\\boxed{4}", "stop", 6});

        auto backend = std::make_shared<HttpCompletionBackend>(fast_config(endpoint.url()));
        TwoPhaseProvider provider(backend);
        const auto req = request_for("r", 0, 0);
        const auto r = provider.generate(req);

        CHECK(r.constraint_satisfied);
        CHECK(r.draws == 2);
        CHECK(r.steps == std::vector<Step>{Step{"thus x=4"}});
        CHECK(r.close_marker == "</think>");
        CHECK(r.solution_text == "\n\n\\boxed{4}");
        CHECK(r.usage == 12);

        const auto bodies = endpoint.bodies();
        REQUIRE(bodies.size() == 3);
        const auto prompt = build_prompt(kR1DistillTemplate, req.question, req.prefix_steps);
        for (int i = 0; i < 2; ++i) {
            CHECK(bodies[i]["model"] == "tiny-reasoner");
            CHECK(bodies[i]["prompt"] == prompt);
            CHECK(bodies[i]["temperature"] == 1.0);
            CHECK(bodies[i]["top_p"].get<double>() == doctest::Approx(0.98));
            CHECK(bodies[i]["max_tokens"] == 16384);
            CHECK(bodies[i]["stop"] == json::array({"\n\n"}));
        }
        CHECK(bodies[2]["prompt"] == prompt + "thus x=4\n\n");
        CHECK_FALSE(bodies[2].contains("stop"));
        CHECK(bodies[2]["max_tokens"] == 16384 - 4);
        CHECK(endpoint.authorization() == "Bearer sk-test");
    }

    TEST_CASE("http: every phase-1 draw banned") {
        FakeEndpoint endpoint;
        for (int i = 0; i < 3; ++i) {
            endpoint.push({200, "Alternatively, try", "stop", 2});
        }
        TwoPhaseProvider provider(std::make_shared<HttpCompletionBackend>(fast_config(endpoint.url())));
        auto req = request_for("r", 0, 0);
        req.sampling.resample_limit = 3;
        const auto r = provider.generate(req);
        CHECK_FALSE(r.constraint_satisfied);
        CHECK(endpoint.bodies().size() == 3);
    }

    TEST_CASE("http: budget exhausted without a solution") {
        FakeEndpoint endpoint;
        endpoint.push({200, "step one", "stop", 5});
        endpoint.push({200, "more and more", "length", 5});
        TwoPhaseProvider provider(std::make_shared<HttpCompletionBackend>(fast_config(endpoint.url())));
        auto req = request_for("r", 0, 0);
        req.sampling.max_new_units = 10;
        const auto r = provider.generate(req);
        CHECK(r.truncated);
        CHECK(r.solution_text.empty());
        CHECK(endpoint.bodies()[1]["max_tokens"] == 5);
    }

    TEST_CASE("http: retries transient errors, surfaces hard ones") {
        SUBCASE("503 then success") {
            FakeEndpoint endpoint;
            endpoint.push({503});
            endpoint.push({503});
            endpoint.push({200, "ok", "stop", 1});
            HttpCompletionBackend backend(fast_config(endpoint.url()));
            const auto c = backend.complete("p", SamplingParams{}, 8, {});
            CHECK(c.text == "ok");
            CHECK(endpoint.bodies().size() == 3);
        }
        SUBCASE("retry budget exhausted") {
            FakeEndpoint endpoint;
            for (int i = 0; i < 3; ++i) {
                endpoint.push({429});
            }
            HttpCompletionBackend backend(fast_config(endpoint.url()));
            CHECK_THROWS_AS(backend.complete("p", SamplingParams{}, 8, {}), TransientError);
            CHECK(endpoint.bodies().size() == 3);
        }
        SUBCASE("client error is not retried") {
            FakeEndpoint endpoint;
            endpoint.push({400});
            HttpCompletionBackend backend(fast_config(endpoint.url()));
            CHECK_THROWS_AS(backend.complete("p", SamplingParams{}, 8, {}), ProviderError);
            CHECK(endpoint.bodies().size() == 1);
        }
        SUBCASE("unreachable endpoint") {
            auto cfg = fast_config("http://127.0.0.1:1/v1");
            cfg.max_attempts = 2;
            HttpCompletionBackend backend(cfg);
            CHECK_THROWS_AS(backend.complete("p", SamplingParams{}, 8, {}), TransientError);
        }
    }

    TEST_CASE("http: endpoint forms") {
        CHECK_THROWS_AS(HttpCompletionBackend(HttpConfig{.endpoint = "localhost:8000"}), ConfigError);
        FakeEndpoint endpoint;
        endpoint.push({200, "a"});
        endpoint.push({200, "b"});
        HttpCompletionBackend full(fast_config(endpoint.url() + "/completions"));
        CHECK(full.complete("p", SamplingParams{}, 8, {}).text == "a");
        HttpCompletionBackend slash(fast_config(endpoint.url() + "/"));
        CHECK(slash.complete("p", SamplingParams{}, 8, {}).text == "b");
    }
}
