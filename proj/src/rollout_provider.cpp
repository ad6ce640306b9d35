#include "retro/rollout_provider.hpp"

#include "retro/error.hpp"

#include <httplib.h>
#include <nlohmann/json.hpp>
#include <spdlog/spdlog.h>

#include <cstdlib>
#include <fstream>
#include <sstream>
#include <thread>

namespace retro {

using json = nlohmann::json;

void SamplingParams::validate() const {
    if (temperature < 0.0) {
        throw ConfigError("temperature must be non-negative");
    }
    if (!(top_p > 0.0 && top_p <= 1.0)) {
        throw ConfigError("top_p must lie in (0, 1]");
    }
    if (max_new_units == 0) {
        throw ConfigError("max_new_units must be positive");
    }
    if (resample_limit < 1) {
        throw ConfigError("resample_limit must be at least 1");
    }
}

std::string_view constrained_span(std::string_view phase1, std::string_view close_marker) {
    if (!close_marker.empty()) {
        if (auto pos = phase1.find(close_marker); pos != std::string_view::npos) {
            return phase1.substr(0, pos);
        }
    }
    return phase1;
}

namespace {

bool is_blank(std::string_view s) {
    return s.find_first_not_of(" \t\n\r\f\v") == std::string_view::npos;
}

std::vector<Step> split_steps(std::string_view text) {
    std::vector<Step> steps;
    std::size_t pos = 0;
    while (pos <= text.size()) {
        auto next = text.find(kStepDelimiter, pos);
        auto piece = text.substr(pos, next == std::string_view::npos ? std::string_view::npos
                                                                     : next - pos);
        if (!is_blank(piece)) {
            steps.push_back(Step{std::string(piece)});
        }
        if (next == std::string_view::npos) {
            break;
        }
        pos = next + kStepDelimiter.size();
    }
    return steps;
}

std::string_view first_step(std::string_view text) {
    return text.substr(0, text.find(kStepDelimiter));
}

}  // namespace

ProviderResult parse_rollout_text(std::string raw, std::string_view close_marker, bool truncated) {
    ProviderResult r;
    r.truncated = truncated;
    const auto marker_pos =
        close_marker.empty() ? std::string::npos : raw.find(close_marker);
    if (marker_pos != std::string::npos) {
        r.steps = split_steps(std::string_view(raw).substr(0, marker_pos));
        r.close_marker = std::string(close_marker);
        r.solution_text = raw.substr(marker_pos + close_marker.size());
    } else {
        r.steps = split_steps(raw);
        if (!truncated && !r.steps.empty()) {
            r.solution_text = std::move(r.steps.back().text);
            r.steps.pop_back();
        }
    }
    r.raw_text = std::move(raw);
    return r;
}

// ---------------------------------------------------------------------------
// ScriptedProvider

ScriptedProvider::ScriptedProvider(Table table, std::string close_marker)
    : table_(std::move(table)), close_marker_(std::move(close_marker)) {}

ScriptedProvider::Table ScriptedProvider::parse_fixture(std::string_view contents) {
    Table table;
    std::size_t line_no = 0;
    std::size_t pos = 0;
    while (pos < contents.size()) {
        auto nl = contents.find('\n', pos);
        if (nl == std::string_view::npos) {
            nl = contents.size();
        }
        const auto line = contents.substr(pos, nl - pos);
        pos = nl + 1;
        ++line_no;
        if (is_blank(line)) {
            continue;
        }
        const auto fail = [&](const std::string& what) {
            return LoadError("fixture line " + std::to_string(line_no) + ": " + what);
        };
        json j;
        try {
            j = json::parse(line);
        } catch (const json::parse_error& e) {
            throw fail(std::string("invalid JSON: ") + e.what());
        }
        if (!j.is_object() || !j.contains("record_id") || !j["record_id"].is_string()) {
            throw fail("missing string field \"record_id\"");
        }
        for (const char* field : {"expansion", "sample"}) {
            if (!j.contains(field) || !j[field].is_number_unsigned()) {
                throw fail(std::string("missing non-negative integer field \"") + field + "\"");
            }
        }
        std::vector<std::string> draws;
        if (j.contains("text") && j["text"].is_string()) {
            draws.push_back(j["text"].get<std::string>());
        } else if (j.contains("attempts") && j["attempts"].is_array() && !j["attempts"].empty()) {
            for (const auto& a : j["attempts"]) {
                if (!a.is_string()) {
                    throw fail("\"attempts\" must hold strings");
                }
                draws.push_back(a.get<std::string>());
            }
        } else {
            throw fail("entry needs \"text\" or a non-empty \"attempts\" array");
        }
        FixtureKey key{j["record_id"].get<std::string>(), j["expansion"].get<std::size_t>(),
                       j["sample"].get<std::size_t>()};
        if (!table.emplace(key, std::move(draws)).second) {
            throw fail("duplicate key (" + key.record_id + ", " +
                       std::to_string(key.expansion_ordinal) + ", " +
                       std::to_string(key.sample_index) + ")");
        }
    }
    return table;
}

std::unique_ptr<ScriptedProvider> ScriptedProvider::load(const std::string& fixture_path,
                                                         std::string close_marker) {
    std::ifstream in(fixture_path, std::ios::binary);
    if (!in) {
        throw LoadError("cannot open fixture: " + fixture_path);
    }
    std::ostringstream buf;
    buf << in.rdbuf();
    return std::make_unique<ScriptedProvider>(parse_fixture(buf.str()), std::move(close_marker));
}

ProviderResult ScriptedProvider::generate(const ProviderRequest& req) {
    req.sampling.validate();
    const FixtureKey key{req.question.id, req.expansion_ordinal, req.sample_index};
    const auto it = table_.find(key);
    if (it == table_.end()) {
        throw FixtureMissError("no fixture entry for (" + key.record_id + ", " +
                               std::to_string(key.expansion_ordinal) + ", " +
                               std::to_string(key.sample_index) + ")");
    }
    const auto& draws = it->second;
    std::size_t usage = 0;
    for (std::size_t attempt = 0; attempt < req.sampling.resample_limit; ++attempt) {
        const std::string& draw = draws[std::min(attempt, draws.size() - 1)];
        const auto phase1 = first_step(draw);
        if (req.banned.contains_any(constrained_span(phase1, close_marker_))) {
            usage += std::min(phase1.size(), req.sampling.max_new_units);
            continue;
        }
        const bool truncated = draw.size() > req.sampling.max_new_units;
        auto result = parse_rollout_text(
            truncated ? draw.substr(0, req.sampling.max_new_units) : draw, close_marker_,
            truncated);
        result.constraint_satisfied = true;
        result.usage = usage + result.raw_text.size();
        result.draws = attempt + 1;
        return result;
    }
    ProviderResult rejected;
    rejected.raw_text = std::string(first_step(draws[std::min(req.sampling.resample_limit, draws.size()) - 1]));
    rejected.usage = usage;
    rejected.draws = req.sampling.resample_limit;
    return rejected;
}

// ---------------------------------------------------------------------------
// Two-phase driver

std::string build_prompt(std::string_view prompt_template, const Question& question,
                         std::span<const Step> prefix_steps) {
    static constexpr std::string_view kPlaceholder = "{question}";
    std::string prompt(prompt_template);
    if (auto pos = prompt.find(kPlaceholder); pos != std::string::npos) {
        prompt.replace(pos, kPlaceholder.size(), question.text);
    } else {
        throw ConfigError("prompt template lacks a {question} placeholder");
    }
    prompt += join_steps(prefix_steps);
    prompt += kStepDelimiter;
    return prompt;
}

TwoPhaseProvider::TwoPhaseProvider(std::shared_ptr<CompletionBackend> backend,
                                   std::string prompt_template, std::string close_marker)
    : backend_(std::move(backend)),
      template_(std::move(prompt_template)),
      close_marker_(std::move(close_marker)) {
    if (!backend_) {
        throw ConfigError("completion backend is required");
    }
}

ProviderResult TwoPhaseProvider::generate(const ProviderRequest& req) {
    req.sampling.validate();
    if (req.prefix_steps.empty()) {
        throw ConfigError("rollout prefix must hold at least one step");
    }
    const std::string prompt = build_prompt(template_, req.question, req.prefix_steps);
    const std::vector<std::string> step_stop{std::string(kStepDelimiter)};

    std::size_t usage = 0;
    Completion accepted;
    bool ok = false;
    std::size_t draws = 0;
    for (; draws < req.sampling.resample_limit && !ok; ++draws) {
        auto c = backend_->complete(prompt, req.sampling, req.sampling.max_new_units, step_stop);
        usage += c.usage;
        ok = !req.banned.contains_any(constrained_span(c.text, close_marker_));
        accepted = std::move(c);
    }
    if (!ok) {
        ProviderResult rejected;
        rejected.raw_text = std::move(accepted.text);
        rejected.usage = usage;
        rejected.draws = draws;
        return rejected;
    }

    std::string raw = accepted.text;
    bool truncated = accepted.truncated;
    if (!truncated) {
        const auto spent = std::min(accepted.usage, req.sampling.max_new_units);
        const auto budget = req.sampling.max_new_units - spent;
        if (budget == 0) {
            truncated = true;
        } else {
            const std::string continuation_prompt = prompt + accepted.text + std::string(kStepDelimiter);
            auto c = backend_->complete(continuation_prompt, req.sampling, budget, {});
            usage += c.usage;
            truncated = c.truncated;
            if (!c.text.empty()) {
                raw += kStepDelimiter;
                raw += c.text;
            }
        }
    }
    auto result = parse_rollout_text(std::move(raw), close_marker_, truncated);
    result.constraint_satisfied = true;
    result.usage = usage;
    result.draws = draws;
    return result;
}

// ---------------------------------------------------------------------------
// HTTP backend

namespace {

// Splits "http://host:port/v1" into ("http://host:port", "/v1/completions").
std::pair<std::string, std::string> split_endpoint(const std::string& endpoint) {
    const auto scheme_end = endpoint.find("://");
    if (scheme_end == std::string::npos) {
        throw ConfigError("endpoint must include a scheme: " + endpoint);
    }
    const auto path_start = endpoint.find('/', scheme_end + 3);
    std::string base = endpoint.substr(0, path_start);
    std::string path = path_start == std::string::npos ? "" : endpoint.substr(path_start);
    while (!path.empty() && path.back() == '/') {
        path.pop_back();
    }
    if (!path.ends_with("/completions")) {
        path += "/completions";
    }
    return {std::move(base), std::move(path)};
}

}  // namespace

HttpCompletionBackend::HttpCompletionBackend(HttpConfig config)
    : config_(std::move(config)),
      in_flight_(static_cast<std::ptrdiff_t>(std::max<std::size_t>(config_.max_in_flight, 1))) {
    if (config_.max_attempts < 1) {
        throw ConfigError("max_attempts must be at least 1");
    }
    std::tie(scheme_host_port_, path_) = split_endpoint(config_.endpoint);
}

Completion HttpCompletionBackend::post_once(const std::string& body) {
    httplib::Client client(scheme_host_port_);
    client.set_connection_timeout(config_.timeout);
    client.set_read_timeout(config_.timeout);
    client.set_write_timeout(config_.timeout);
    httplib::Headers headers;
    if (!config_.api_key.empty()) {
        headers.emplace("Authorization", "Bearer " + config_.api_key);
    }

    in_flight_.acquire();
    auto res = client.Post(path_, headers, body, "application/json");
    in_flight_.release();

    if (!res) {
        throw TransientError("request to " + config_.endpoint +
                             " failed: " + httplib::to_string(res.error()));
    }
    if (res->status == 429 || res->status >= 500) {
        throw TransientError("endpoint returned HTTP " + std::to_string(res->status));
    }
    if (res->status != 200) {
        throw ProviderError("endpoint returned HTTP " + std::to_string(res->status) + ": " +
                            res->body.substr(0, 200));
    }
    json j;
    try {
        j = json::parse(res->body);
    } catch (const json::parse_error& e) {
        throw ProviderError(std::string("invalid JSON from endpoint: ") + e.what());
    }
    if (!j.contains("choices") || !j["choices"].is_array() || j["choices"].empty() ||
        !j["choices"][0].contains("text") || !j["choices"][0]["text"].is_string()) {
        throw ProviderError("response lacks choices[0].text");
    }
    const auto& choice = j["choices"][0];
    Completion c;
    c.text = choice["text"].get<std::string>();
    c.truncated = choice.contains("finish_reason") && choice["finish_reason"] == "length";
    if (j.contains("usage") && j["usage"].contains("completion_tokens") &&
        j["usage"]["completion_tokens"].is_number_unsigned()) {
        c.usage = j["usage"]["completion_tokens"].get<std::size_t>();
    }
    return c;
}

Completion HttpCompletionBackend::complete(const std::string& prompt, const SamplingParams& sampling,
                                           std::size_t max_units,
                                           std::span<const std::string> stop) {
    json body = {
        {"model", config_.model},
        {"prompt", prompt},
        {"temperature", sampling.temperature},
        {"top_p", sampling.top_p},
        {"max_tokens", max_units},
    };
    if (!stop.empty()) {
        body["stop"] = std::vector<std::string>(stop.begin(), stop.end());
    }
    const std::string payload = body.dump();

    auto delay = config_.initial_backoff;
    for (std::size_t attempt = 1;; ++attempt) {
        try {
            return post_once(payload);
        } catch (const TransientError& e) {
            if (attempt >= config_.max_attempts) {
                throw;
            }
            spdlog::warn("attempt {}/{} failed ({}); retrying in {} ms", attempt,
                         config_.max_attempts, e.what(), delay.count());
            std::this_thread::sleep_for(delay);
            delay *= 2;
        }
    }
}

std::string api_key_from_env() {
    for (const char* name : {"RETRO_API_KEY", "OPENAI_API_KEY"}) {
        if (const char* v = std::getenv(name); v != nullptr && *v != '\0') {
            return v;
        }
    }
    return {};
}

}  // namespace retro
