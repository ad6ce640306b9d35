#include "retro/pipeline.hpp"

#include "retro/error.hpp"

#include <spdlog/spdlog.h>

#include <atomic>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <sstream>
#include <thread>
#include <unistd.h>

namespace retro {

using json = nlohmann::json;
namespace fs = std::filesystem;

InputFormat parse_input_format(std::string_view text) {
    if (text == "raw_jsonl" || text == "raw") {
        return InputFormat::raw_jsonl;
    }
    if (text == "openthoughts_jsonl" || text == "openthoughts") {
        return InputFormat::openthoughts_jsonl;
    }
    throw ConfigError("unknown input format: " + std::string(text));
}

FieldMapping FieldMapping::defaults_for(InputFormat format) {
    FieldMapping m;
    if (format == InputFormat::openthoughts_jsonl) {
        m.question = "problem";
        m.answer = "ground_truth_solution";
    }
    return m;
}

void FieldMapping::apply_overrides(std::string_view overrides) {
    std::size_t pos = 0;
    while (pos < overrides.size()) {
        auto comma = overrides.find(',', pos);
        if (comma == std::string_view::npos) {
            comma = overrides.size();
        }
        const auto item = overrides.substr(pos, comma - pos);
        pos = comma + 1;
        if (item.empty()) {
            continue;
        }
        const auto eq = item.find('=');
        if (eq == std::string_view::npos || eq == 0 || eq + 1 == item.size()) {
            throw ConfigError("field mapping entries look like key=field: " + std::string(item));
        }
        const auto key = item.substr(0, eq);
        std::string value(item.substr(eq + 1));
        if (key == "id") {
            id = value;
        } else if (key == "question") {
            question = value;
        } else if (key == "answer") {
            answer = value;
        } else if (key == "trace") {
            trace = value;
        } else if (key == "reasoning") {
            reasoning = value;
        } else if (key == "solution") {
            solution = value;
        } else if (key == "original_tokens") {
            original_tokens = value;
        } else {
            throw ConfigError("unknown field mapping key: " + std::string(key));
        }
    }
}

// ---------------------------------------------------------------------------
// Ingestion

namespace {

constexpr std::string_view kBeginThought = "<|begin_of_thought|>";
constexpr std::string_view kEndThought = "<|end_of_thought|>";
constexpr std::string_view kBeginSolution = "<|begin_of_solution|>";
constexpr std::string_view kEndSolution = "<|end_of_solution|>";

std::string string_field(const json& j, const std::string& name) {
    if (!j.contains(name)) {
        throw LoadError("missing field \"" + name + "\"");
    }
    const auto& v = j[name];
    if (v.is_string()) {
        return v.get<std::string>();
    }
    if (v.is_number()) {
        return v.dump();
    }
    throw LoadError("field \"" + name + "\" is not a string");
}

std::string between(std::string_view text, std::string_view open, std::string_view close) {
    auto begin = text.find(open);
    begin = begin == std::string_view::npos ? 0 : begin + open.size();
    auto end = text.find(close, begin);
    return std::string(text.substr(begin, end == std::string_view::npos ? std::string_view::npos
                                                                          : end - begin));
}

struct OpenThoughtsParts {
    std::string question;
    std::string reasoning;
    std::string solution;
};

OpenThoughtsParts openthoughts_parts(const json& j, const FieldMapping& f) {
    OpenThoughtsParts p;
    if (j.contains(f.reasoning)) {
        p.question = string_field(j, f.question);
        p.reasoning = string_field(j, f.reasoning);
        p.solution = j.contains(f.solution) ? string_field(j, f.solution) : std::string();
        return p;
    }
    if (!j.contains("conversations") || !j["conversations"].is_array()) {
        throw LoadError("missing field \"" + f.reasoning + "\" and no \"conversations\" array");
    }
    std::string assistant;
    for (const auto& turn : j["conversations"]) {
        const auto from = turn.value("from", std::string());
        if (from == "user" && p.question.empty()) {
            p.question = turn.value("value", std::string());
        } else if (from == "assistant") {
            assistant = turn.value("value", std::string());
        }
    }
    if (j.contains(f.question)) {
        p.question = string_field(j, f.question);
    }
    if (assistant.empty()) {
        throw LoadError("conversations lack an assistant turn");
    }
    p.reasoning = between(assistant, kBeginThought, kEndThought);
    if (assistant.find(kBeginSolution) != std::string::npos) {
        p.solution = between(assistant, kBeginSolution, kEndSolution);
    }
    return p;
}

RevisionRecord record_from_json(const json& j, std::size_t line_no, const IngestOptions& opts) {
    const auto& f = opts.fields;
    RevisionRecord r;
    r.id = j.contains(f.id) ? string_field(j, f.id) : "line-" + std::to_string(line_no);

    std::string answer_raw = string_field(j, f.answer);
    if (opts.format == InputFormat::raw_jsonl) {
        r.question = Question{r.id, string_field(j, f.question)};
        r.original_raw = string_field(j, f.trace);
    } else {
        auto parts = openthoughts_parts(j, f);
        r.question = Question{r.id, std::move(parts.question)};
        r.original_raw = parts.reasoning + opts.think_close;
        if (!parts.solution.empty()) {
            r.original_raw += "\n\n" + parts.solution;
        }
        // Reference solutions carry their answer in a box.
        if (auto boxed = boxed_contents(answer_raw); !boxed.empty()) {
            answer_raw = boxed.back();
        }
    }
    if (r.question.text.empty()) {
        throw LoadError("empty question");
    }
    r.ground_truth = GroundTruth::from_raw(answer_raw);
    r.original = parse_record_trace(r.original_raw, opts.think_close, opts.keywords);
    if (j.contains(f.original_tokens) && j[f.original_tokens].is_number_unsigned()) {
        r.original_tokens = j[f.original_tokens].get<std::size_t>();
    }
    return r;
}

}  // namespace

IngestResult ingest_stream(std::istream& in, const IngestOptions& options) {
    IngestResult out;
    std::set<std::string> seen;
    std::string line;
    std::size_t line_no = 0;
    while (std::getline(in, line)) {
        ++line_no;
        if (line.find_first_not_of(" \t\r") == std::string::npos) {
            continue;
        }
        ++out.lines;
        try {
            auto record = record_from_json(json::parse(line), line_no, options);
            if (!seen.insert(record.id).second) {
                throw LoadError("duplicate id \"" + record.id + "\"");
            }
            out.records.push_back(std::move(record));
        } catch (const json::exception& e) {
            ++out.malformed;
            spdlog::warn("line {}: {}", line_no, e.what());
        } catch (const Error& e) {
            ++out.malformed;
            spdlog::warn("line {}: {}", line_no, e.what());
        }
    }
    if (out.lines == 0) {
        spdlog::warn("input contains no records");
        return out;
    }
    if (out.malformed > 0) {
        spdlog::warn("skipped {} malformed line(s) of {}", out.malformed, out.lines);
    }
    if (static_cast<double>(out.malformed) >
        options.max_malformed_fraction * static_cast<double>(out.lines)) {
        throw LoadError(std::to_string(out.malformed) + " of " + std::to_string(out.lines) +
                        " input lines are malformed; aborting");
    }
    return out;
}

IngestResult ingest(const std::string& path, const IngestOptions& options) {
    std::ifstream in(path, std::ios::binary);
    if (!in) {
        throw LoadError("cannot open input: " + path);
    }
    return ingest_stream(in, options);
}

FilterResult filter_correct(std::vector<RevisionRecord> records, const Verifier& verifier) {
    FilterResult out;
    for (auto& r : records) {
        if (verifier.score(r.original.solution.extracted_answer, r.ground_truth)) {
            out.kept.push_back(std::move(r));
        } else {
            ++out.dropped;
        }
    }
    return out;
}

// ---------------------------------------------------------------------------
// Checkpoint

namespace {

void write_all_or_throw(std::FILE* f, const std::string& data, const std::string& what) {
    if (std::fwrite(data.data(), 1, data.size(), f) != data.size() || std::fflush(f) != 0) {
        throw Error("write failed: " + what);
    }
}

// Writes `contents` to `path` through a temporary file and rename.
void replace_file(const std::string& path, const std::string& contents) {
    const std::string tmp = path + ".tmp";
    std::FILE* f = std::fopen(tmp.c_str(), "wb");
    if (f == nullptr) {
        throw Error("cannot write " + tmp);
    }
    try {
        write_all_or_throw(f, contents, tmp);
        ::fsync(::fileno(f));
    } catch (...) {
        std::fclose(f);
        throw;
    }
    std::fclose(f);
    fs::rename(tmp, path);
}

// Lines terminated by '\n'; a torn final line is dropped.
std::vector<std::string> complete_lines(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    std::ostringstream buf;
    buf << in.rdbuf();
    const std::string data = buf.str();
    std::vector<std::string> lines;
    std::size_t pos = 0;
    while (true) {
        const auto nl = data.find('\n', pos);
        if (nl == std::string::npos) {
            break;
        }
        lines.push_back(data.substr(pos, nl - pos));
        pos = nl + 1;
    }
    return lines;
}

}  // namespace

Checkpoint::Checkpoint(std::string path, std::string fingerprint, std::size_t compact_every)
    : path_(std::move(path)),
      fingerprint_(std::move(fingerprint)),
      compact_every_(std::max<std::size_t>(compact_every, 1)) {
    if (fs::exists(path_)) {
        const auto lines = complete_lines(path_);
        if (!lines.empty()) {
            json header;
            try {
                header = json::parse(lines.front());
            } catch (const json::exception&) {
                throw LoadError("checkpoint header is unreadable: " + path_);
            }
            const auto stored = header.value("fingerprint", std::string());
            if (stored != fingerprint_) {
                throw ConfigError("checkpoint " + path_ + " was written with a different config (" +
                                  stored + " vs " + fingerprint_ + "); refusing to mix outputs");
            }
            for (std::size_t i = 1; i < lines.size(); ++i) {
                try {
                    const auto entry = json::parse(lines[i]);
                    const auto id = entry.at("id").get<std::string>();
                    if (completed_.insert(id).second) {
                        entries_.emplace_back(
                            id, parse_revision_status(entry.at("status").get<std::string>()));
                    }
                } catch (const std::exception&) {
                    spdlog::warn("ignoring unreadable checkpoint line {}", i + 1);
                }
            }
        }
    }
    compact();
}

Checkpoint::~Checkpoint() {
    if (file_ != nullptr) {
        std::fclose(file_);
    }
}

std::size_t Checkpoint::count(RevisionStatus status) const {
    std::size_t n = 0;
    for (const auto& [id, s] : entries_) {
        n += s == status ? 1 : 0;
    }
    return n;
}

void Checkpoint::open_for_append() {
    file_ = std::fopen(path_.c_str(), "ab");
    if (file_ == nullptr) {
        throw Error("cannot open checkpoint for append: " + path_);
    }
}

void Checkpoint::compact() {
    if (file_ != nullptr) {
        std::fclose(file_);
        file_ = nullptr;
    }
    std::string contents = json{{"fingerprint", fingerprint_}, {"version", 1}}.dump() + "\n";
    for (const auto& [id, status] : entries_) {
        contents += json{{"id", id}, {"status", to_string(status)}}.dump() + "\n";
    }
    replace_file(path_, contents);
    since_compaction_ = 0;
    open_for_append();
}

void Checkpoint::append(const std::string& id, RevisionStatus status) {
    const auto line = json{{"id", id}, {"status", to_string(status)}}.dump() + "\n";
    write_all_or_throw(file_, line, path_);
    if (completed_.insert(id).second) {
        entries_.emplace_back(id, status);
    }
    if (++since_compaction_ >= compact_every_) {
        compact();
    }
}

// ---------------------------------------------------------------------------
// Output

std::string config_fingerprint(const json& effective_config) {
    const auto text = effective_config.dump();
    std::uint64_t h = 0xcbf29ce484222325ULL;
    for (unsigned char c : text) {
        h ^= c;
        h *= 0x100000001b3ULL;
    }
    std::ostringstream out;
    out << std::hex << std::setw(16) << std::setfill('0') << h;
    return out.str();
}

json config_json(const SearchConfig& cfg) {
    json j = {
        {"gamma", cfg.gamma},
        {"rollouts", cfg.rollouts_per_boundary},
        {"mode", to_string(cfg.mode)},
        {"seed", cfg.seed},
        {"max_expansions", cfg.max_expansions ? json(*cfg.max_expansions) : json(nullptr)},
        {"temperature", cfg.sampling.temperature},
        {"top_p", cfg.sampling.top_p},
        {"max_new_units", cfg.sampling.max_new_units},
        {"resample_limit", cfg.sampling.resample_limit},
        {"keywords", cfg.keywords.phrases()},
    };
    return j;
}

namespace {

json score_json(const ValueScore& s) {
    return {{"remaining", s.remaining}, {"reward", s.reward.value}, {"value", s.value}};
}

}  // namespace

json to_json(const ExpansionEvent& e) {
    return {
        {"ordinal", e.ordinal},
        {"thought", e.boundary_thought_index},
        {"incumbent", score_json(e.incumbent_score)},
        {"best", e.best_rollout_score ? score_json(*e.best_rollout_score) : json(nullptr)},
        {"best_sample", e.best_sample_index ? json(*e.best_sample_index) : json(nullptr)},
        {"replaced", e.replaced},
        {"discarded", e.discarded_samples},
        {"usage", e.usage},
    };
}

json output_record(const RevisionRecord& record) {
    json j;
    j["id"] = record.id;
    const auto status = record.result ? record.result->status : RevisionStatus::failed;
    j["status"] = to_string(status);
    j["original_steps"] = record.original.reasoning_steps();
    if (record.result) {
        j["revised_steps"] = record.result->revised_steps;
    } else {
        j["revised_steps"] = nullptr;
    }
    j["revised_raw"] = record.revised ? json(render_trajectory(*record.revised)) : json(nullptr);
    json events = json::array();
    if (record.result) {
        for (const auto& e : record.result->events) {
            events.push_back(to_json(e));
        }
    }
    j["events"] = std::move(events);
    j["provider_usage"] = record.provider_usage;
    if (record.result && record.result->partial_start_index) {
        j["partial_start_index"] = *record.result->partial_start_index;
        j["partial_seed"] = *record.result->partial_seed;
    }
    j["question"] = record.question.text;
    j["answer"] = record.ground_truth.raw;
    j["original_raw"] = record.original_raw;
    if (record.original_tokens) {
        j["original_tokens"] = *record.original_tokens;
    }
    if (record.result && !record.result->error.empty()) {
        j["error"] = record.result->error;
    }
    return j;
}

// ---------------------------------------------------------------------------
// Batch revision

namespace {

json header_line(const std::string& fingerprint, const json& effective_config) {
    return {{"header", {{"fingerprint", fingerprint}, {"config", effective_config}}}};
}

// Rewrites the output so it holds the header plus exactly one line for each
// checkpointed id.
void reconcile_output(const std::string& output_path, const Checkpoint& checkpoint,
                      const json& header) {
    std::string contents = header.dump() + "\n";
    std::set<std::string> kept;
    if (fs::exists(output_path)) {
        for (const auto& line : complete_lines(output_path)) {
            json j;
            try {
                j = json::parse(line);
            } catch (const json::exception&) {
                continue;
            }
            if (!j.contains("id") || !j["id"].is_string()) {
                continue;
            }
            const auto id = j["id"].get<std::string>();
            if (checkpoint.contains(id) && kept.insert(id).second) {
                contents += line + "\n";
            }
        }
    }
    if (kept.size() != checkpoint.completed().size()) {
        throw LoadError("checkpoint lists " + std::to_string(checkpoint.completed().size()) +
                        " completed records but the output holds " + std::to_string(kept.size()) +
                        "; cannot resume");
    }
    replace_file(output_path, contents);
}

RevisionRecord revise_one(const RevisionRecord& input, const SearchConfig& cfg,
                          RolloutProvider& provider, const Verifier& verifier) {
    RevisionRecord r = input;
    r.started = std::chrono::system_clock::now();
    try {
        r.result = retro_search(r.question, r.original, r.ground_truth, cfg, provider, verifier);
    } catch (const std::exception& e) {
        RevisionResult failed;
        failed.revised = r.original;
        failed.original_steps = r.original.reasoning_steps();
        failed.revised_steps = failed.original_steps;
        failed.status = RevisionStatus::failed;
        failed.error = e.what();
        r.result = std::move(failed);
    }
    r.provider_usage = r.result->provider_usage;
    if (r.result->status == RevisionStatus::revised || r.result->status == RevisionStatus::unchanged) {
        r.revised = r.result->revised;
    }
    r.finished = std::chrono::system_clock::now();
    return r;
}

}  // namespace

BatchSummary revise_batch(const std::vector<RevisionRecord>& records, const SearchConfig& cfg,
                          RolloutProvider& provider, const BatchOptions& options,
                          const Verifier& verifier) {
    if (options.workers < 1) {
        throw ConfigError("workers must be at least 1");
    }
    cfg.validate();
    const auto fingerprint = config_fingerprint(options.effective_config);
    const auto header = header_line(fingerprint, options.effective_config);

    std::optional<Checkpoint> checkpoint;
    if (options.checkpoint_path) {
        checkpoint.emplace(*options.checkpoint_path, fingerprint, options.compact_every);
        reconcile_output(options.output_path, *checkpoint, header);
    } else {
        replace_file(options.output_path, header.dump() + "\n");
    }

    BatchSummary summary;
    summary.total = records.size();
    std::vector<const RevisionRecord*> pending;
    for (const auto& r : records) {
        if (checkpoint && checkpoint->contains(r.id)) {
            ++summary.resumed;
        } else {
            pending.push_back(&r);
        }
    }
    if (checkpoint) {
        summary.revised = checkpoint->count(RevisionStatus::revised);
        summary.unchanged = checkpoint->count(RevisionStatus::unchanged);
        summary.skipped_incorrect = checkpoint->count(RevisionStatus::skipped_incorrect);
        summary.failed = checkpoint->count(RevisionStatus::failed);
    }

    std::FILE* out = std::fopen(options.output_path.c_str(), "ab");
    if (out == nullptr) {
        throw Error("cannot open output for append: " + options.output_path);
    }

    std::mutex write_mutex;
    std::atomic<std::size_t> next{0};
    std::atomic<std::size_t> usage{0};
    std::atomic<bool> abort{false};
    std::exception_ptr fatal;

    auto worker = [&] {
        while (!abort.load()) {
            const auto i = next.fetch_add(1);
            if (i >= pending.size()) {
                return;
            }
            auto done = revise_one(*pending[i], cfg, provider, verifier);
            usage += done.provider_usage;
            const auto line = output_record(done).dump() + "\n";
            const auto status = done.result->status;

            std::lock_guard lock(write_mutex);
            if (abort.load()) {
                return;
            }
            try {
                write_all_or_throw(out, line, options.output_path);
                if (options.fault_hook) {
                    options.fault_hook("after_output", done.id);
                }
                if (checkpoint) {
                    checkpoint->append(done.id, status);
                }
                if (options.fault_hook) {
                    options.fault_hook("after_checkpoint", done.id);
                }
            } catch (...) {
                fatal = std::current_exception();
                abort = true;
                return;
            }
            switch (status) {
                case RevisionStatus::revised:
                    ++summary.revised;
                    break;
                case RevisionStatus::unchanged:
                    ++summary.unchanged;
                    break;
                case RevisionStatus::skipped_incorrect:
                    ++summary.skipped_incorrect;
                    break;
                case RevisionStatus::failed:
                    spdlog::warn("record {} failed: {}", done.id, done.result->error);
                    ++summary.failed;
                    break;
            }
        }
    };

    {
        const auto n = std::min(options.workers, std::max<std::size_t>(pending.size(), 1));
        std::vector<std::jthread> pool;
        for (std::size_t w = 0; w < n; ++w) {
            pool.emplace_back(worker);
        }
    }
    std::fclose(out);
    if (fatal) {
        std::rethrow_exception(fatal);
    }
    if (checkpoint) {
        checkpoint->compact();
    }
    summary.provider_usage = usage.load();
    return summary;
}

// ---------------------------------------------------------------------------
// Analysis

StatsPair stats_pair(const RevisionRecord& record, const KeywordSet& keywords) {
    if (!record.revised) {
        throw Error("record " + record.id + " has no revised trajectory");
    }
    StatsPair p;
    p.id = record.id;
    p.original = trace_stats(record.original, record.ground_truth, keywords);
    p.revised = trace_stats(*record.revised, record.ground_truth, keywords);
    p.original_tokens = record.original_tokens;
    return p;
}

std::vector<StatsPair> load_stats_pairs(const std::string& output_path,
                                        const AnalyzeOptions& options) {
    std::ifstream in(output_path, std::ios::binary);
    if (!in) {
        throw LoadError("cannot open " + output_path);
    }
    std::vector<StatsPair> pairs;
    std::string line;
    std::size_t line_no = 0;
    while (std::getline(in, line)) {
        ++line_no;
        if (line.find_first_not_of(" \t\r") == std::string::npos) {
            continue;
        }
        json j;
        try {
            j = json::parse(line);
        } catch (const json::exception& e) {
            spdlog::warn("line {}: {}", line_no, e.what());
            continue;
        }
        if (j.contains("header")) {
            continue;
        }
        if (!j.contains("revised_raw") || !j["revised_raw"].is_string() ||
            !j.contains("original_raw") || !j.contains("answer")) {
            continue;
        }
        try {
            const auto truth = GroundTruth::from_raw(j["answer"].get<std::string>());
            const auto original = parse_record_trace(j["original_raw"].get<std::string>(),
                                                     options.think_close, options.keywords);
            const auto revised = parse_record_trace(j["revised_raw"].get<std::string>(),
                                                    options.think_close, options.keywords);
            StatsPair p;
            p.id = j.value("id", std::string());
            p.original = trace_stats(original, truth, options.keywords);
            p.revised = trace_stats(revised, truth, options.keywords);
            if (j.contains("original_tokens") && j["original_tokens"].is_number_unsigned()) {
                p.original_tokens = j["original_tokens"].get<std::size_t>();
            }
            if (j.contains("revised_tokens") && j["revised_tokens"].is_number_unsigned()) {
                p.revised_tokens = j["revised_tokens"].get<std::size_t>();
            }
            pairs.push_back(std::move(p));
        } catch (const std::exception& e) {
            spdlog::warn("line {}: {}", line_no, e.what());
        }
    }
    return pairs;
}

}  // namespace retro
