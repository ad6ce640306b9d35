// retro: revise reasoning traces, analyze revised datasets, inspect segmentation.

#include "retro/error.hpp"
#include "retro/metrics.hpp"
#include "retro/pipeline.hpp"
#include "retro/rollout_provider.hpp"
#include "retro/search.hpp"
#include "retro/trace_model.hpp"
#include "retro/verifier.hpp"

#include <CLI11.hpp>
#include <spdlog/spdlog.h>

#include <fstream>
#include <iostream>
#include <sstream>

namespace {

struct ReviseArgs {
    std::string input;
    std::string output;
    std::string format = "raw_jsonl";
    std::string field_map;
    std::string provider = "scripted";
    std::string fixture;
    std::string endpoint = "http://localhost:8000/v1";
    std::string model;
    std::string template_file;
    double gamma = 0.9;
    std::size_t rollouts = 2;
    std::string mode = "full";
    std::uint64_t seed = 0;
    std::size_t workers = 1;
    std::string keywords;
    std::string checkpoint;
    std::size_t max_expansions = 0;
    double temperature = 1.0;
    double top_p = 0.98;
    std::size_t max_new_units = 16384;
    std::size_t resample_limit = 4;
    std::size_t max_in_flight = 8;
    std::size_t retries = 3;
    std::string think_close = std::string(retro::kDefaultThinkClose);
    std::string verifier_cmd;
    bool no_filter = false;
};

struct AnalyzeArgs {
    std::string input;
    std::string keywords;
    std::string think_close = std::string(retro::kDefaultThinkClose);
    bool csv = false;
};

struct SegmentArgs {
    std::string text;
    std::string file;
    std::string keywords;
    std::string think_close = std::string(retro::kDefaultThinkClose);
};

retro::KeywordSet keywords_from(const std::string& path) {
    return path.empty() ? retro::KeywordSet::defaults() : retro::KeywordSet::load(path);
}

std::string read_file(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) {
        throw retro::LoadError("cannot open " + path);
    }
    std::ostringstream buf;
    buf << in.rdbuf();
    return buf.str();
}

int run_revise(const ReviseArgs& a) {
    retro::SearchConfig cfg;
    cfg.gamma = a.gamma;
    cfg.rollouts_per_boundary = a.rollouts;
    cfg.mode = retro::parse_search_mode(a.mode);
    cfg.seed = a.seed;
    if (a.max_expansions > 0) {
        cfg.max_expansions = a.max_expansions;
    }
    cfg.sampling.temperature = a.temperature;
    cfg.sampling.top_p = a.top_p;
    cfg.sampling.max_new_units = a.max_new_units;
    cfg.sampling.resample_limit = a.resample_limit;
    cfg.keywords = keywords_from(a.keywords);
    cfg.validate();

    retro::IngestOptions ingest_opts;
    ingest_opts.format = retro::parse_input_format(a.format);
    ingest_opts.fields = retro::FieldMapping::defaults_for(ingest_opts.format);
    ingest_opts.fields.apply_overrides(a.field_map);
    ingest_opts.think_close = a.think_close;
    ingest_opts.keywords = cfg.keywords;

    std::unique_ptr<retro::Verifier> command_verifier;
    if (!a.verifier_cmd.empty()) {
        command_verifier = std::make_unique<retro::CommandVerifier>(a.verifier_cmd);
    }
    const retro::Verifier& verifier =
        command_verifier ? *command_verifier : retro::default_verifier();

    auto ingested = retro::ingest(a.input, ingest_opts);
    spdlog::info("ingested {} record(s), {} malformed line(s) skipped", ingested.records.size(),
                 ingested.malformed);
    auto records = std::move(ingested.records);
    if (!a.no_filter) {
        auto filtered = retro::filter_correct(std::move(records), verifier);
        spdlog::info("kept {} record(s) with verified answers, dropped {}", filtered.kept.size(),
                     filtered.dropped);
        records = std::move(filtered.kept);
    }

    nlohmann::json effective = retro::config_json(cfg);
    effective["provider"] = a.provider;
    effective["format"] = a.format;
    effective["think_close"] = a.think_close;
    effective["filter_correct"] = !a.no_filter;

    std::unique_ptr<retro::RolloutProvider> provider;
    if (a.provider == "scripted") {
        if (a.fixture.empty()) {
            throw retro::ConfigError("--fixture is required with --provider scripted");
        }
        provider = retro::ScriptedProvider::load(a.fixture, a.think_close);
        effective["fixture"] = a.fixture;
    } else if (a.provider == "http") {
        if (a.model.empty()) {
            throw retro::ConfigError("--model is required with --provider http");
        }
        retro::HttpConfig http;
        http.endpoint = a.endpoint;
        http.model = a.model;
        http.api_key = retro::api_key_from_env();
        http.max_in_flight = a.max_in_flight;
        http.max_attempts = a.retries;
        const std::string prompt_template = a.template_file.empty()
                                                ? std::string(retro::kR1DistillTemplate)
                                                : read_file(a.template_file);
        provider = std::make_unique<retro::TwoPhaseProvider>(
            std::make_shared<retro::HttpCompletionBackend>(http), prompt_template, a.think_close);
        effective["endpoint"] = a.endpoint;
        effective["model"] = a.model;
        effective["template"] = prompt_template;
    } else {
        throw retro::ConfigError("unknown provider: " + a.provider);
    }

    retro::BatchOptions batch;
    batch.workers = a.workers;
    batch.output_path = a.output;
    if (!a.checkpoint.empty()) {
        batch.checkpoint_path = a.checkpoint;
    }
    batch.effective_config = effective;

    const auto summary = retro::revise_batch(records, cfg, *provider, batch, verifier);
    spdlog::info(
        "records: {} (resumed {}), revised {}, unchanged {}, skipped {}, failed {}, usage {}",
        summary.total, summary.resumed, summary.revised, summary.unchanged,
        summary.skipped_incorrect, summary.failed, summary.provider_usage);
    return summary.exit_code();
}

int run_analyze(const AnalyzeArgs& a) {
    retro::AnalyzeOptions opts;
    opts.keywords = keywords_from(a.keywords);
    opts.think_close = a.think_close;
    const auto report = retro::dataset_stats(retro::load_stats_pairs(a.input, opts));
    if (a.csv) {
        std::cout << report.to_csv();
    } else {
        std::cout << report.to_table() << '\n' << report.to_json().dump(2) << '\n';
    }
    return 0;
}

int run_segment(const SegmentArgs& a) {
    const std::string text = a.file.empty() ? a.text : read_file(a.file);
    const auto t = retro::parse_record_trace(text, a.think_close, keywords_from(a.keywords));
    std::size_t step_no = 0;
    for (std::size_t i = 0; i < t.thoughts.size(); ++i) {
        std::cout << "== thought " << i + 1 << " (" << t.thoughts[i].steps.size() << " steps)\n";
        for (const auto& step : t.thoughts[i].steps) {
            std::cout << "  [" << ++step_no << "] " << nlohmann::json(step.text).dump() << '\n';
        }
    }
    std::cout << "== solution" << (t.solution_inline() ? " (inline)" : "") << ": "
              << nlohmann::json(t.solution.text).dump() << '\n';
    std::cout << "answer: " << t.solution.extracted_answer.value_or("<none>") << '\n';
    if (t.lossy()) {
        std::cout << "note: " << t.dropped_blank_segments
                  << " blank segment(s) dropped; rendering will not reproduce the input\n";
    }
    return 0;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"Retrospective revision of reasoning traces"};
    app.require_subcommand(1);
    app.set_config("--config", "", "TOML/INI config file; command-line flags take precedence");

    ReviseArgs revise;
    auto* rv = app.add_subcommand("revise", "Revise a dataset of correct reasoning traces");
    rv->add_option("--input", revise.input, "Input JSONL")->required()->check(CLI::ExistingFile);
    rv->add_option("--output", revise.output, "Output JSONL")->required();
    rv->add_option("--format", revise.format, "raw_jsonl or openthoughts_jsonl")
        ->check(CLI::IsMember({"raw_jsonl", "openthoughts_jsonl"}));
    rv->add_option("--field-map", revise.field_map, "Field overrides, e.g. question=prompt,answer=gt");
    rv->add_option("--provider", revise.provider, "http or scripted")
        ->check(CLI::IsMember({"http", "scripted"}));
    rv->add_option("--fixture", revise.fixture, "Scripted fixture JSONL");
    rv->add_option("--endpoint", revise.endpoint, "OpenAI-compatible base URL");
    rv->add_option("--model", revise.model, "Model name sent to the endpoint");
    rv->add_option("--template", revise.template_file, "Prompt template file with {question}");
    rv->add_option("--gamma", revise.gamma, "Discount factor in (0,1)");
    rv->add_option("--rollouts", revise.rollouts, "Rollouts per thought boundary");
    rv->add_option("--mode", revise.mode, "full or partial")->check(CLI::IsMember({"full", "partial"}));
    rv->add_option("--seed", revise.seed, "Seed for partial-mode start positions");
    rv->add_option("--workers", revise.workers, "Records in flight");
    rv->add_option("--keywords", revise.keywords, "Keyword file, one phrase per line");
    rv->add_option("--checkpoint", revise.checkpoint, "Checkpoint log for resumable runs");
    rv->add_option("--max-expansions", revise.max_expansions, "Boundaries per record (0 = unlimited)");
    rv->add_option("--temperature", revise.temperature, "Sampling temperature");
    rv->add_option("--top-p", revise.top_p, "Nucleus sampling mass");
    rv->add_option("--max-new-units", revise.max_new_units, "Generation budget per rollout");
    rv->add_option("--resample-limit", revise.resample_limit, "Phase-1 draws per rollout");
    rv->add_option("--max-in-flight", revise.max_in_flight, "Concurrent HTTP requests");
    rv->add_option("--retries", revise.retries, "HTTP attempts per request");
    rv->add_option("--think-close", revise.think_close, "Marker closing the thinking section");
    rv->add_option("--verifier-cmd", revise.verifier_cmd, "External verifier command");
    rv->add_flag("--no-filter", revise.no_filter, "Do not drop records with wrong answers");

    AnalyzeArgs analyze;
    auto* an = app.add_subcommand("analyze", "Trace statistics of a revise output file");
    an->add_option("--input", analyze.input, "revise output JSONL")->required()->check(CLI::ExistingFile);
    an->add_option("--keywords", analyze.keywords, "Keyword file");
    an->add_option("--think-close", analyze.think_close, "Marker closing the thinking section");
    an->add_flag("--csv", analyze.csv, "Emit CSV");

    SegmentArgs seg;
    auto* sg = app.add_subcommand("segment", "Show the thoughts and steps of one trace");
    auto* text_opt = sg->add_option("--text", seg.text, "Trace text");
    auto* file_opt = sg->add_option("-f,--file", seg.file, "Trace file")->check(CLI::ExistingFile);
    text_opt->excludes(file_opt);
    sg->add_option("--keywords", seg.keywords, "Keyword file");
    sg->add_option("--think-close", seg.think_close, "Marker closing the thinking section");

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        return app.exit(e) == 0 ? 0 : 1;
    }

    try {
        if (*rv) {
            return run_revise(revise);
        }
        if (*an) {
            return run_analyze(analyze);
        }
        if (seg.text.empty() && seg.file.empty()) {
            throw retro::ConfigError("segment needs --text or --file");
        }
        return run_segment(seg);
    } catch (const std::exception& e) {
        spdlog::error("{}", e.what());
        return 1;
    }
}
