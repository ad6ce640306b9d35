#pragma once

// Batch revision: dataset ingestion, correct-answer filtering, a worker pool
// running one search per record, and an id-keyed checkpoint that makes
// killed runs resumable with each record written exactly once.

#include "retro/metrics.hpp"
#include "retro/rollout_provider.hpp"
#include "retro/search.hpp"
#include "retro/trace_model.hpp"
#include "retro/verifier.hpp"

#include <chrono>
#include <cstddef>
#include <cstdio>
#include <functional>
#include <mutex>
#include <nlohmann/json.hpp>
#include <optional>
#include <set>
#include <string>
#include <string_view>
#include <vector>

namespace retro {

enum class InputFormat { raw_jsonl, openthoughts_jsonl };

InputFormat parse_input_format(std::string_view text);

/// Source field names. Defaults follow the raw format:
///   {"id", "question", "answer", "trace"}
/// and, for OpenThoughts metadata rows,
///   {"problem", "ground_truth_solution", "deepseek_reasoning", "deepseek_solution"}.
/// OpenThoughts rows without a reasoning field fall back to the
/// "conversations" array and its begin/end-of-thought tags.
struct FieldMapping {
    std::string id = "id";
    std::string question = "question";
    std::string answer = "answer";
    std::string trace = "trace";
    std::string reasoning = "deepseek_reasoning";
    std::string solution = "deepseek_solution";
    std::string original_tokens = "original_tokens";

    static FieldMapping defaults_for(InputFormat format);
    /// Applies "key=field,key=field" overrides.
    void apply_overrides(std::string_view overrides);
};

struct IngestOptions {
    InputFormat format = InputFormat::raw_jsonl;
    FieldMapping fields;
    std::string think_close = std::string(kDefaultThinkClose);
    KeywordSet keywords = KeywordSet::defaults();
    double max_malformed_fraction = 0.10;
};

struct RevisionRecord {
    std::string id;
    Question question;
    GroundTruth ground_truth;
    std::string original_raw;
    Trajectory original;
    std::optional<Trajectory> revised;
    std::optional<RevisionResult> result;
    std::size_t provider_usage = 0;
    std::optional<std::size_t> original_tokens;
    std::chrono::system_clock::time_point started{};
    std::chrono::system_clock::time_point finished{};
};

struct IngestResult {
    std::vector<RevisionRecord> records;
    std::size_t lines = 0;
    std::size_t malformed = 0;
};

/// One record per non-blank line. Malformed lines are logged and counted;
/// more than `max_malformed_fraction` of them aborts with LoadError.
IngestResult ingest(const std::string& path, const IngestOptions& options);
IngestResult ingest_stream(std::istream& in, const IngestOptions& options);

struct FilterResult {
    std::vector<RevisionRecord> kept;
    std::size_t dropped = 0;
};

/// Keeps records whose original trajectory earns reward 1.
FilterResult filter_correct(std::vector<RevisionRecord> records,
                            const Verifier& verifier = default_verifier());

// ---------------------------------------------------------------------------
// Checkpoint

/// Append-only log of completed ids behind a config fingerprint. Opening an
/// existing log compacts it (write-then-rename), discarding a torn last line.
class Checkpoint {
public:
    /// Throws ConfigError when an existing log has a different fingerprint.
    Checkpoint(std::string path, std::string fingerprint, std::size_t compact_every = 256);
    ~Checkpoint();

    Checkpoint(const Checkpoint&) = delete;
    Checkpoint& operator=(const Checkpoint&) = delete;

    bool contains(const std::string& id) const { return completed_.contains(id); }
    const std::set<std::string>& completed() const { return completed_; }
    const std::string& fingerprint() const { return fingerprint_; }
    std::size_t count(RevisionStatus status) const;

    /// Not thread-safe; callers serialize.
    void append(const std::string& id, RevisionStatus status);
    void compact();

private:
    void open_for_append();

    std::string path_;
    std::string fingerprint_;
    std::size_t compact_every_;
    std::size_t since_compaction_ = 0;
    std::set<std::string> completed_;
    std::vector<std::pair<std::string, RevisionStatus>> entries_;
    std::FILE* file_ = nullptr;
};

// ---------------------------------------------------------------------------
// Batch revision

std::string config_fingerprint(const nlohmann::json& effective_config);
nlohmann::json config_json(const SearchConfig& cfg);

nlohmann::json to_json(const ExpansionEvent& e);
/// One output line (without the trailing newline's JSON framing).
nlohmann::json output_record(const RevisionRecord& record);

struct BatchOptions {
    std::size_t workers = 1;
    std::string output_path;
    std::optional<std::string> checkpoint_path;
    std::size_t compact_every = 256;
    /// Echoed into the header line; its fingerprint guards resumes.
    nlohmann::json effective_config = nlohmann::json::object();
    /// Called with "after_output" and "after_checkpoint" for every record;
    /// lets tests crash the process between the two writes.
    std::function<void(std::string_view stage, const std::string& id)> fault_hook;
};

struct BatchSummary {
    std::size_t total = 0;
    std::size_t resumed = 0;
    std::size_t revised = 0;
    std::size_t unchanged = 0;
    std::size_t skipped_incorrect = 0;
    std::size_t failed = 0;
    std::size_t provider_usage = 0;

    /// 0 when every record succeeded, 2 when some failed.
    int exit_code() const { return failed > 0 ? 2 : 0; }
};

/// Processes every record not already in the checkpoint with up to
/// `options.workers` in flight. Output lines are appended as records finish;
/// their order is not guaranteed.
BatchSummary revise_batch(const std::vector<RevisionRecord>& records, const SearchConfig& cfg,
                          RolloutProvider& provider, const BatchOptions& options,
                          const Verifier& verifier = default_verifier());

// ---------------------------------------------------------------------------
// Analysis

struct AnalyzeOptions {
    std::string think_close = std::string(kDefaultThinkClose);
    KeywordSet keywords = KeywordSet::defaults();
};

/// Reads revise output and pairs original/revised statistics for every
/// record that carries a revised trace.
std::vector<StatsPair> load_stats_pairs(const std::string& output_path,
                                        const AnalyzeOptions& options);
StatsPair stats_pair(const RevisionRecord& record, const KeywordSet& keywords);

}  // namespace retro
