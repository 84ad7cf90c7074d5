#pragma once

// SPDX-License-Identifier: Apache-2.0

/**
 * @file harness.hpp
 * @brief Batch evaluation: datasets, run configuration, per-sample pipeline,
 *        trajectory persistence, accuracy metrics and replay.
 *
 * Trajectory file layout (JSON lines):
 *   line 1      header  {"format": "vqa-trajectory", "version": 1, "config_fingerprint": .., "metric": ..}
 *   lines 2..   one TrajectoryRecord per sample, in dataset order
 *   last line   footer  {"end": true, "records": N}
 *
 * Records are written in sample order even when samples finish out of order.
 */

#include "vqa/backend.hpp"
#include "vqa/concurrency.hpp"
#include "vqa/core.hpp"
#include "vqa/extraction.hpp"
#include "vqa/http_backend.hpp"
#include "vqa/knowledge.hpp"
#include "vqa/prompts.hpp"
#include "vqa/reasoning.hpp"

#include <nlohmann/json.hpp>

#include <chrono>
#include <condition_variable>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <map>
#include <memory>
#include <mutex>
#include <optional>
#include <set>
#include <sstream>
#include <string>
#include <vector>

namespace vqa {

inline constexpr int kTrajectoryVersion = 1;
inline constexpr std::string_view kTrajectoryFormat = "vqa-trajectory";

// ---------------------------------------------------------------------------
// Samples

enum class QuestionType { yes_no, number, other, multiple_choice, direct_answer, unspecified };

inline constexpr std::array<QuestionType, 6> kQuestionTypes = {
    QuestionType::yes_no,         QuestionType::number,        QuestionType::other,
    QuestionType::multiple_choice, QuestionType::direct_answer, QuestionType::unspecified};

inline std::string_view to_string(QuestionType t) {
    switch (t) {
    case QuestionType::yes_no: return "yes_no";
    case QuestionType::number: return "number";
    case QuestionType::other: return "other";
    case QuestionType::multiple_choice: return "multiple_choice";
    case QuestionType::direct_answer: return "direct_answer";
    case QuestionType::unspecified: return "unspecified";
    }
    return "unspecified";
}

inline std::optional<QuestionType> parse_question_type(std::string_view s) {
    for (auto t : kQuestionTypes)
        if (to_string(t) == s)
            return t;
    return std::nullopt;
}

struct Sample {
    std::string id;
    std::filesystem::path image_path;  // resolved against the dataset directory
    std::string image_ref;             // as written in the dataset
    std::string question;
    QuestionType question_type = QuestionType::unspecified;
    std::vector<std::string> references;
    std::vector<std::string> choices;
};

/// JSON-lines dataset: {"id", "image", "question", "question_type"?, "references"?, "choices"?} per line.
inline std::vector<Sample> load_dataset(const std::filesystem::path& path) {
    std::vector<Sample> samples;
    std::set<std::string> ids;
    const auto base = path.parent_path();
    for_each_json_line(path, [&](const nlohmann::json& j, std::size_t lineno) {
        auto where = path.string() + ":" + std::to_string(lineno);
        if (!j.is_object())
            throw FormatError(where + ": expected a JSON object");
        for (const char* field : {"id", "image", "question"}) {
            if (!j.contains(field) || !j[field].is_string())
                throw FormatError(where + ": missing required field \"" + field + "\"");
        }
        Sample s;
        s.id = j["id"].get<std::string>();
        s.image_ref = j["image"].get<std::string>();
        s.image_path = base / s.image_ref;
        s.question = j["question"].get<std::string>();
        if (j.contains("question_type")) {
            auto t = parse_question_type(j["question_type"].get<std::string>());
            if (!t)
                throw FormatError(where + ": unknown question_type " + j["question_type"].dump());
            s.question_type = *t;
        }
        if (j.contains("references"))
            s.references = j["references"].get<std::vector<std::string>>();
        if (j.contains("choices"))
            s.choices = j["choices"].get<std::vector<std::string>>();
        if (s.question_type == QuestionType::multiple_choice && s.choices.size() < 2)
            throw FormatError(where + ": multiple_choice sample \"" + s.id + "\" needs at least 2 choices");
        if (!ids.insert(s.id).second)
            throw FormatError(where + ": duplicate sample id \"" + s.id + "\"");
        samples.push_back(std::move(s));
    });
    return samples;
}

// ---------------------------------------------------------------------------
// Configuration

enum class MetricMode { exact, consensus };

inline std::string_view to_string(MetricMode m) { return m == MetricMode::exact ? "exact" : "consensus"; }

inline MetricMode parse_metric(std::string_view s) {
    if (s == "exact")
        return MetricMode::exact;
    if (s == "consensus")
        return MetricMode::consensus;
    throw ConfigError("unknown metric mode: " + std::string(s));
}

enum class EvaluationMode { automatic, reference_match, self_assessment };

enum class TimingMode { wall, logical };

struct BackendSpec {
    std::string kind;  // "http" or "scripted"
    std::filesystem::path script;
    HttpBackendConfig http;
    DecodeParams decode;

    /// Backends with equal identity share one instance (and, for scripts, one cursor).
    std::string identity() const {
        if (kind == "scripted")
            return "scripted|" + script.lexically_normal().string();
        return "http|" + http.url + "|" + http.model + "|" + http.api_key_env + "|" +
               std::to_string(http.max_attempts);
    }
};

struct RunConfig {
    std::map<BackendRole, BackendSpec> backends;
    std::optional<std::filesystem::path> grounder_fixture;
    ScoringParams thresholds;
    int max_reflections = 3;
    EvaluationMode evaluation_mode = EvaluationMode::automatic;
    EntityScoring entity_scoring = EntityScoring::batched;
    std::optional<std::filesystem::path> prompts_dir;
    std::size_t concurrency = 4;
    MetricMode metric = MetricMode::exact;
    std::optional<TimingMode> timing;  // unset: logical when every backend is scripted
    std::string fingerprint;
    std::vector<std::string> warnings;

    bool all_scripted() const {
        return std::all_of(backends.begin(), backends.end(), [](const auto& kv) { return kv.second.kind == "scripted"; });
    }
};

namespace detail {

inline void merge_object(nlohmann::json& into, const nlohmann::json& from) {
    for (const auto& [k, v] : from.items())
        into[k] = v;
}

inline BackendSpec backend_spec(BackendRole role, const nlohmann::json& j, const std::filesystem::path& base) {
    BackendSpec spec;
    spec.kind = j.value("kind", j.contains("script") ? std::string("scripted") : std::string("http"));
    spec.decode = default_decode(role);
    if (j.contains("temperature"))
        spec.decode.temperature = j["temperature"].get<double>();
    if (j.contains("max_tokens"))
        spec.decode.max_tokens = j["max_tokens"].get<int>();
    if (spec.kind == "scripted") {
        if (!j.contains("script"))
            throw ConfigError("backends." + std::string(to_string(role)) + ": scripted backend needs \"script\"");
        spec.script = base / j["script"].get<std::string>();
    } else if (spec.kind == "http") {
        if (!j.contains("url") || !j.contains("model"))
            throw ConfigError("backends." + std::string(to_string(role)) + ": http backend needs url and model");
        spec.http.url = j["url"].get<std::string>();
        spec.http.model = j["model"].get<std::string>();
        spec.http.api_key_env = j.value("api_key_env", std::string());
        spec.http.max_attempts = j.value("max_attempts", 3);
        spec.http.timeout_seconds = j.value("timeout_seconds", 120);
        spec.http.initial_backoff = std::chrono::milliseconds(j.value("initial_backoff_ms", 500));
    } else {
        throw ConfigError("backends." + std::string(to_string(role)) + ": unknown kind " + spec.kind);
    }
    return spec;
}

}  // namespace detail

/// Parses a run configuration document. Relative paths resolve against `base`.
inline RunConfig parse_config(const std::string& text, const std::filesystem::path& base) {
    nlohmann::json doc;
    try {
        doc = nlohmann::json::parse(text);
    } catch (const nlohmann::json::exception& e) {
        throw ConfigError(std::string("config is not valid JSON: ") + e.what());
    }
    RunConfig cfg;
    cfg.fingerprint = content_hash(text);
    try {
        const auto backends = doc.value("backends", nlohmann::json::object());
        for (const auto& [key, _] : backends.items()) {
            if (key != "default" && !parse_role(key))
                throw ConfigError("backends: unknown role " + key);
        }
        for (auto role : kAllRoles) {
            nlohmann::json merged = nlohmann::json::object();
            bool any = false;
            if (backends.contains("default")) {
                detail::merge_object(merged, backends["default"]);
                any = true;
            }
            if (backends.contains(std::string(to_string(role)))) {
                detail::merge_object(merged, backends[std::string(to_string(role))]);
                any = true;
            }
            if (any)
                cfg.backends[role] = detail::backend_spec(role, merged, base);
        }

        if (doc.contains("grounder") && doc["grounder"].contains("fixture"))
            cfg.grounder_fixture = base / doc["grounder"]["fixture"].get<std::string>();

        const auto th = doc.value("thresholds", nlohmann::json::object());
        cfg.thresholds.gamma = th.value("gamma", cfg.thresholds.gamma);
        cfg.thresholds.alpha = th.value("alpha", cfg.thresholds.alpha);
        cfg.thresholds.theta_e = ValidityScore(th.value("theta_e", cfg.thresholds.theta_e.value()));
        cfg.thresholds.theta_re = ValidityScore(th.value("theta_re", cfg.thresholds.theta_re.value()));
        cfg.thresholds.tau = ValidityScore(th.value("tau", cfg.thresholds.tau.value()));
        cfg.thresholds.validate();
        if (!cfg.thresholds.gamma_in_recommended_band())
            cfg.warnings.push_back("thresholds.gamma = " + std::to_string(cfg.thresholds.gamma) +
                                   " lies outside the recommended band (0.05, 0.2)");

        const auto rs = doc.value("reasoner", nlohmann::json::object());
        cfg.max_reflections = rs.value("max_reflections", cfg.max_reflections);
        if (cfg.max_reflections < 1)
            throw ConfigError("reasoner.max_reflections must be >= 1");
        auto mode = rs.value("evaluation_mode", std::string("auto"));
        if (mode == "auto")
            cfg.evaluation_mode = EvaluationMode::automatic;
        else if (mode == "reference_match")
            cfg.evaluation_mode = EvaluationMode::reference_match;
        else if (mode == "self_assessment")
            cfg.evaluation_mode = EvaluationMode::self_assessment;
        else
            throw ConfigError("reasoner.evaluation_mode: unknown value " + mode);

        if (doc.contains("extraction")) {
            auto es = doc["extraction"].value("entity_scoring", std::string("batched"));
            if (es == "batched")
                cfg.entity_scoring = EntityScoring::batched;
            else if (es == "per_entity")
                cfg.entity_scoring = EntityScoring::per_entity;
            else
                throw ConfigError("extraction.entity_scoring: unknown value " + es);
        }

        if (doc.contains("prompts") && doc["prompts"].contains("dir"))
            cfg.prompts_dir = base / doc["prompts"]["dir"].get<std::string>();

        const auto run = doc.value("run", nlohmann::json::object());
        cfg.concurrency = run.value("concurrency", cfg.concurrency);
        if (cfg.concurrency < 1)
            throw ConfigError("run.concurrency must be >= 1");
        if (run.contains("metric"))
            cfg.metric = parse_metric(run["metric"].get<std::string>());
        if (run.contains("timing")) {
            auto t = run["timing"].get<std::string>();
            if (t == "wall")
                cfg.timing = TimingMode::wall;
            else if (t == "logical")
                cfg.timing = TimingMode::logical;
            else if (t != "auto")
                throw ConfigError("run.timing: unknown value " + t);
        }
    } catch (const nlohmann::json::exception& e) {
        throw ConfigError(std::string("config: ") + e.what());
    } catch (const PreconditionError& e) {
        throw ConfigError(std::string("config: ") + e.what());
    }
    return cfg;
}

inline RunConfig load_config(const std::filesystem::path& path) {
    std::string text;
    try {
        text = read_file(path);
    } catch (const FormatError& e) {
        throw ConfigError(e.what());
    }
    return parse_config(text, path.parent_path());
}

/// Instantiates one backend per distinct identity and routes every configured role to it.
inline BackendRouter build_router(const RunConfig& cfg) {
    BackendRouter router;
    std::map<std::string, std::shared_ptr<ChatBackend>> instances;
    for (const auto& [role, spec] : cfg.backends) {
        auto& inst = instances[spec.identity()];
        if (!inst) {
            if (spec.kind == "scripted")
                inst = std::make_shared<ScriptedBackend>(ScriptedScenario::load(spec.script));
            else
                inst = std::make_shared<HttpBackend>(spec.http);
        }
        router.assign(role, inst, spec.decode);
    }
    return router;
}

// ---------------------------------------------------------------------------
// Trajectory records

struct StageTimings {
    double extraction = 0;
    double knowledge = 0;
    double reasoning = 0;

    friend bool operator==(const StageTimings&, const StageTimings&) = default;
};

struct TrajectoryRecord {
    std::size_t index = 0;
    std::string sample_id;
    std::string config_fingerprint;
    std::string image;
    std::string question;
    QuestionType question_type = QuestionType::unspecified;
    std::vector<std::string> references;
    std::vector<std::string> choices;

    std::string status = "ok";  // "ok" or "failed"
    std::string error;

    std::optional<ExtractionResult> extraction;
    KnowledgeBundle knowledge;
    std::optional<ParaphrasedQuestion> paraphrase;
    std::vector<ReasoningTrace> traces;
    std::vector<ReflectionNote> notes;
    std::string final_answer;
    bool resolved = false;
    std::optional<RewardSignal> reward;

    std::string timing_unit = "calls";
    StageTimings timings;
    std::vector<CallRecord> calls;
    std::vector<std::string> warnings;
    std::vector<std::string> flags;

    bool failed() const { return status != "ok"; }
    bool passed() const { return !failed() && reward && reward->passed(); }
};

inline bool operator==(const ExtractionResult& a, const ExtractionResult& b) {
    return a.entities == b.entities && a.relations == b.relations && a.description_d == b.description_d;
}

inline bool operator==(const TrajectoryRecord& a, const TrajectoryRecord& b) {
    return a.index == b.index && a.sample_id == b.sample_id && a.config_fingerprint == b.config_fingerprint &&
           a.image == b.image && a.question == b.question && a.question_type == b.question_type &&
           a.references == b.references && a.choices == b.choices && a.status == b.status && a.error == b.error &&
           a.extraction == b.extraction && a.knowledge == b.knowledge && a.paraphrase == b.paraphrase &&
           a.traces == b.traces && a.notes == b.notes && a.final_answer == b.final_answer &&
           a.resolved == b.resolved && a.reward == b.reward && a.timing_unit == b.timing_unit &&
           a.timings == b.timings && a.calls == b.calls && a.warnings == b.warnings && a.flags == b.flags;
}

namespace json_io {

using nlohmann::json;
using ojson = nlohmann::ordered_json;

inline ojson reward(const RewardSignal& r) {
    ojson j;
    j["outcome"] = std::string(to_string(r.outcome));
    j["mode"] = std::string(to_string(r.mode));
    if (r.matched_reference)
        j["matched_reference"] = *r.matched_reference;
    if (r.verdict)
        j["verdict"] = *r.verdict;
    if (r.flag)
        j["flag"] = *r.flag;
    return j;
}

inline RewardSignal reward(const json& j) {
    RewardSignal r;
    auto outcome = j.at("outcome").get<std::string>();
    if (outcome != "pass" && outcome != "fail")
        throw FormatError("reward outcome must be pass or fail");
    r.outcome = outcome == "pass" ? Outcome::pass : Outcome::fail;
    r.mode = j.at("mode").get<std::string>() == "self_assessment" ? RewardMode::self_assessment
                                                                   : RewardMode::reference_match;
    if (j.contains("matched_reference"))
        r.matched_reference = j["matched_reference"].get<std::string>();
    if (j.contains("verdict"))
        r.verdict = j["verdict"].get<std::string>();
    if (j.contains("flag"))
        r.flag = j["flag"].get<std::string>();
    return r;
}

inline ojson extraction(const ExtractionResult& x) {
    ojson ents = ojson::array();
    for (const auto& e : x.entities) {
        ojson je;
        je["name"] = e.name;
        je["entity_score"] = e.entity_score.value();
        je["is_key"] = e.is_key;
        if (e.region)
            je["region"] = {e.region->x, e.region->y, e.region->w, e.region->h};
        ents.push_back(std::move(je));
    }
    ojson rels = ojson::array();
    for (const auto& r : x.relations) {
        ojson jr;
        jr["subject"] = r.subject;
        jr["predicate"] = r.predicate;
        jr["object"] = r.object;
        jr["relation_score"] = r.relation_score.value();
        jr["joint_score"] = r.joint_score;
        jr["is_key"] = r.is_key;
        rels.push_back(std::move(jr));
    }
    ojson j;
    j["entities"] = std::move(ents);
    j["relations"] = std::move(rels);
    j["description"] = x.description_d;
    return j;
}

inline ExtractionResult extraction(const json& j) {
    ExtractionResult x;
    for (const auto& je : j.at("entities")) {
        ScoredEntity e;
        e.name = je.at("name").get<std::string>();
        e.entity_score = ValidityScore(je.at("entity_score").get<double>());
        e.is_key = je.at("is_key").get<bool>();
        if (je.contains("region")) {
            auto r = je["region"].get<std::vector<int>>();
            if (r.size() != 4)
                throw FormatError("region must have 4 entries");
            e.region = Region{r[0], r[1], r[2], r[3]};
        }
        x.entities.push_back(std::move(e));
    }
    for (const auto& jr : j.at("relations")) {
        x.relations.push_back({jr.at("subject").get<std::string>(), jr.at("predicate").get<std::string>(),
                               jr.at("object").get<std::string>(), ValidityScore(jr.at("relation_score").get<double>()),
                               jr.at("joint_score").get<double>(), jr.at("is_key").get<bool>()});
    }
    x.description_d = j.at("description").get<std::string>();
    return x;
}

inline ojson paraphrase(const ParaphrasedQuestion& q) {
    ojson j;
    j["original"] = q.original;
    j["subject"] = q.subject;
    j["context"] = q.context_snippets;
    j["paraphrased"] = q.paraphrased;
    j["fallback"] = q.fallback;
    return j;
}

inline ParaphrasedQuestion paraphrase(const json& j) {
    return {j.at("original").get<std::string>(), j.at("subject").get<std::string>(),
            j.at("context").get<std::vector<std::string>>(), j.at("paraphrased").get<std::string>(),
            j.at("fallback").get<bool>()};
}

inline ojson record(const TrajectoryRecord& r) {
    ojson j;
    j["index"] = r.index;
    j["sample_id"] = r.sample_id;
    j["config_fingerprint"] = r.config_fingerprint;
    j["image"] = r.image;
    j["question"] = r.question;
    j["question_type"] = std::string(to_string(r.question_type));
    j["references"] = r.references;
    if (!r.choices.empty())
        j["choices"] = r.choices;
    j["status"] = r.status;
    if (!r.error.empty())
        j["error"] = r.error;
    if (r.extraction)
        j["extraction"] = extraction(*r.extraction);
    j["knowledge"] = {{"description", r.knowledge.description_d},
                      {"analysis", r.knowledge.analysis_a},
                      {"caption", r.knowledge.caption_c},
                      {"degenerate", r.knowledge.degenerate}};
    if (r.paraphrase)
        j["paraphrase"] = paraphrase(*r.paraphrase);
    ojson traces = ojson::array();
    for (const auto& t : r.traces) {
        ojson jt;
        jt["attempt"] = t.attempt_index;
        jt["evidence"] = t.evidence;
        jt["steps"] = t.steps;
        jt["predicted"] = t.predicted;
        jt["reward"] = reward(t.reward);
        traces.push_back(std::move(jt));
    }
    j["traces"] = std::move(traces);
    ojson notes = ojson::array();
    for (const auto& n : r.notes)
        notes.push_back(ojson{{"after_attempt", n.produced_after_attempt},
                              {"cause", n.failure_cause},
                              {"plan", n.plan},
                              {"fallback", n.fallback}});
    j["notes"] = std::move(notes);
    j["final_answer"] = r.final_answer;
    j["resolved"] = r.resolved;
    if (r.reward)
        j["reward"] = reward(*r.reward);
    j["timing_unit"] = r.timing_unit;
    j["timings"] = {{"extraction", r.timings.extraction},
                    {"knowledge", r.timings.knowledge},
                    {"reasoning", r.timings.reasoning}};
    ojson calls = ojson::array();
    for (const auto& c : r.calls) {
        ojson jc;
        jc["stage"] = c.stage;
        jc["role"] = c.role;
        jc["prompt_hash"] = c.prompt_hash;
        jc["response_hash"] = c.response_hash;
        if (!c.error.empty())
            jc["error"] = c.error;
        calls.push_back(std::move(jc));
    }
    j["calls"] = std::move(calls);
    j["warnings"] = r.warnings;
    j["flags"] = r.flags;
    return j;
}

inline TrajectoryRecord record(const json& j) {
    TrajectoryRecord r;
    r.index = j.at("index").get<std::size_t>();
    r.sample_id = j.at("sample_id").get<std::string>();
    r.config_fingerprint = j.at("config_fingerprint").get<std::string>();
    r.image = j.at("image").get<std::string>();
    r.question = j.at("question").get<std::string>();
    auto qt = parse_question_type(j.at("question_type").get<std::string>());
    if (!qt)
        throw FormatError("unknown question_type");
    r.question_type = *qt;
    r.references = j.at("references").get<std::vector<std::string>>();
    if (j.contains("choices"))
        r.choices = j["choices"].get<std::vector<std::string>>();
    r.status = j.at("status").get<std::string>();
    if (r.status != "ok" && r.status != "failed")
        throw FormatError("unknown status " + r.status);
    r.error = j.value("error", std::string());
    if (j.contains("extraction"))
        r.extraction = extraction(j["extraction"]);
    const auto& k = j.at("knowledge");
    r.knowledge = {k.at("description").get<std::string>(), k.at("analysis").get<std::string>(),
                   k.at("caption").get<std::string>(), k.at("degenerate").get<bool>()};
    if (j.contains("paraphrase"))
        r.paraphrase = paraphrase(j["paraphrase"]);
    for (const auto& jt : j.at("traces")) {
        ReasoningTrace t;
        if (r.paraphrase)
            t.question = *r.paraphrase;
        t.attempt_index = jt.at("attempt").get<int>();
        t.evidence = jt.at("evidence").get<std::vector<std::string>>();
        t.steps = jt.at("steps").get<std::vector<std::string>>();
        t.predicted = jt.at("predicted").get<std::string>();
        t.reward = reward(jt.at("reward"));
        r.traces.push_back(std::move(t));
    }
    for (const auto& jn : j.at("notes"))
        r.notes.push_back({jn.at("cause").get<std::string>(), jn.at("plan").get<std::string>(),
                           jn.at("after_attempt").get<int>(), jn.at("fallback").get<bool>()});
    r.final_answer = j.at("final_answer").get<std::string>();
    r.resolved = j.at("resolved").get<bool>();
    if (j.contains("reward"))
        r.reward = reward(j["reward"]);
    r.timing_unit = j.at("timing_unit").get<std::string>();
    const auto& t = j.at("timings");
    r.timings = {t.at("extraction").get<double>(), t.at("knowledge").get<double>(), t.at("reasoning").get<double>()};
    for (const auto& jc : j.at("calls"))
        r.calls.push_back({jc.at("stage").get<std::string>(), jc.at("role").get<std::string>(),
                           jc.at("prompt_hash").get<std::string>(), jc.at("response_hash").get<std::string>(),
                           jc.value("error", std::string())});
    r.warnings = j.at("warnings").get<std::vector<std::string>>();
    r.flags = j.at("flags").get<std::vector<std::string>>();
    return r;
}

}  // namespace json_io

inline std::string serialize_record(const TrajectoryRecord& r) { return json_io::record(r).dump(); }

inline TrajectoryRecord deserialize_record(const std::string& line) {
    try {
        return json_io::record(nlohmann::json::parse(line));
    } catch (const nlohmann::json::exception& e) {
        throw FormatError(e.what());
    } catch (const PreconditionError& e) {
        throw FormatError(e.what());
    }
}

struct TrajectoryHeader {
    int version = kTrajectoryVersion;
    std::string config_fingerprint;
    MetricMode metric = MetricMode::exact;
};

/// Streams records to disk in sample-index order; out-of-order completions are buffered.
class TrajectoryWriter {
public:
    TrajectoryWriter(const std::filesystem::path& path, const TrajectoryHeader& header)
        : out_(path, std::ios::binary | std::ios::trunc) {
        if (!out_)
            throw FormatError("cannot write trajectory file " + path.string());
        nlohmann::ordered_json h;
        h["format"] = std::string(kTrajectoryFormat);
        h["version"] = header.version;
        h["config_fingerprint"] = header.config_fingerprint;
        h["metric"] = std::string(to_string(header.metric));
        out_ << h.dump() << '\n';
        out_.flush();
    }

    void submit(const TrajectoryRecord& record) {
        std::lock_guard lock(mu_);
        pending_[record.index] = serialize_record(record);
        while (!pending_.empty() && pending_.begin()->first == next_) {
            out_ << pending_.begin()->second << '\n';
            pending_.erase(pending_.begin());
            ++next_;
        }
        out_.flush();
    }

    void finish() {
        std::lock_guard lock(mu_);
        if (!pending_.empty())
            throw Error("trajectory writer finished with " + std::to_string(pending_.size()) + " records pending");
        out_ << nlohmann::ordered_json{{"end", true}, {"records", next_}}.dump() << '\n';
        out_.flush();
        if (!out_)
            throw FormatError("trajectory write failed");
    }

private:
    std::ofstream out_;
    std::mutex mu_;
    std::map<std::size_t, std::string> pending_;
    std::size_t next_ = 0;
};

struct TrajectoryFile {
    TrajectoryHeader header;
    std::vector<TrajectoryRecord> records;
};

/// Loads and validates a trajectory file; errors name the failing record index.
inline TrajectoryFile read_trajectories(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in)
        throw FormatError("cannot open trajectory file " + path.string());
    TrajectoryFile file;
    std::string line;
    if (!std::getline(in, line))
        throw FormatError(path.string() + ": empty trajectory file");
    try {
        auto h = nlohmann::json::parse(line);
        if (h.value("format", std::string()) != kTrajectoryFormat)
            throw FormatError(path.string() + ": not a trajectory file");
        file.header.version = h.at("version").get<int>();
        if (file.header.version != kTrajectoryVersion)
            throw FormatError(path.string() + ": trajectory version " + std::to_string(file.header.version) +
                              " is not supported by this build (expected " + std::to_string(kTrajectoryVersion) +
                              ")");
        file.header.config_fingerprint = h.at("config_fingerprint").get<std::string>();
        file.header.metric = parse_metric(h.at("metric").get<std::string>());
    } catch (const nlohmann::json::exception& e) {
        throw FormatError(path.string() + ": corrupt header: " + e.what());
    }

    bool footer = false;
    while (std::getline(in, line)) {
        if (line.empty())
            continue;
        auto index = file.records.size();
        if (footer)
            throw FormatError(path.string() + ": data after footer");
        nlohmann::json j;
        try {
            j = nlohmann::json::parse(line);
        } catch (const nlohmann::json::exception& e) {
            throw FormatError(path.string() + ": record " + std::to_string(index) + " is corrupt: " + e.what());
        }
        if (j.contains("end")) {
            if (j.value("records", std::size_t{0}) != file.records.size())
                throw FormatError(path.string() + ": footer count mismatch at record " + std::to_string(index));
            footer = true;
            continue;
        }
        try {
            file.records.push_back(json_io::record(j));
        } catch (const std::exception& e) {
            throw FormatError(path.string() + ": record " + std::to_string(index) + " is corrupt: " + e.what());
        }
        if (file.records.back().index != index)
            throw FormatError(path.string() + ": record " + std::to_string(index) + " is out of order");
    }
    if (!footer)
        throw FormatError(path.string() + ": truncated after record " + std::to_string(file.records.size()) +
                          " (no footer)");
    return file;
}

// ---------------------------------------------------------------------------
// Metrics

/// Accuracy is kept as an exact rational: score in thirds of a sample.
struct TypeStats {
    std::size_t count = 0;
    std::int64_t score_thirds = 0;

    friend bool operator==(const TypeStats&, const TypeStats&) = default;
};

struct RunReport {
    MetricMode metric = MetricMode::exact;
    TypeStats overall;
    std::map<QuestionType, TypeStats> per_type;  // types with zero samples are absent
    std::size_t unresolved = 0;
    std::size_t stage_failures = 0;
    std::size_t reflection_notes = 0;
    std::size_t completed = 0;  // samples that did not fail

    friend bool operator==(const RunReport&, const RunReport&) = default;
};

/// Percentage with one decimal, rounded half away from zero, from an exact ratio.
inline std::string format_percent(std::int64_t thirds, std::size_t count) {
    if (count == 0)
        return "-";
    const std::int64_t den = 3 * static_cast<std::int64_t>(count);
    const std::int64_t tenths = (2000 * thirds + den) / (2 * den);
    return std::to_string(tenths / 10) + "." + std::to_string(tenths % 10);
}

inline std::string format_ratio2(std::size_t num, std::size_t den) {
    if (den == 0)
        return "0.00";
    const std::size_t hundredths = (200 * num + den) / (2 * den);
    auto frac = std::to_string(hundredths % 100);
    return std::to_string(hundredths / 100) + "." + (frac.size() < 2 ? "0" + frac : frac);
}

/// Reference entries whose normalization equals the normalized prediction.
inline std::size_t matching_references(const std::string& predicted, const std::vector<std::string>& references) {
    auto norm = normalize_answer(predicted);
    std::size_t n = 0;
    for (const auto& r : references)
        if (normalize_answer(r) == norm)
            ++n;
    return n;
}

/// Per-sample score in thirds: exact => 3 on pass; consensus => min(matches, 3).
inline std::int64_t sample_score_thirds(const TrajectoryRecord& r, MetricMode metric) {
    if (metric == MetricMode::exact)
        return r.passed() ? 3 : 0;
    if (r.references.empty())
        throw PreconditionError("consensus metric: sample " + r.sample_id + " has no references");
    if (r.failed())
        return 0;
    return static_cast<std::int64_t>(std::min<std::size_t>(matching_references(r.final_answer, r.references), 3));
}

inline RunReport accuracy(const std::vector<TrajectoryRecord>& records, MetricMode metric) {
    RunReport rep;
    rep.metric = metric;
    for (const auto& r : records) {
        auto s = sample_score_thirds(r, metric);
        rep.overall.count++;
        rep.overall.score_thirds += s;
        auto& t = rep.per_type[r.question_type];
        t.count++;
        t.score_thirds += s;
        if (r.failed()) {
            rep.stage_failures++;
            continue;
        }
        rep.completed++;
        if (!r.resolved)
            rep.unresolved++;
        rep.reflection_notes += r.notes.size();
    }
    return rep;
}

inline std::string render_report(const RunReport& rep) {
    std::ostringstream out;
    auto row = [&](std::string_view name, const TypeStats& s) {
        std::string n(name);
        n.resize(std::max<std::size_t>(n.size(), 18), ' ');
        auto count = std::to_string(s.count);
        auto pct = format_percent(s.score_thirds, s.count);
        out << n << std::string(8 - std::min<std::size_t>(8, count.size()), ' ') << count
            << std::string(10 - std::min<std::size_t>(10, pct.size()), ' ') << pct << '\n';
    };
    out << "metric: " << to_string(rep.metric) << '\n';
    out << "question_type        count  accuracy\n";
    row("overall", rep.overall);
    for (auto t : kQuestionTypes) {
        auto it = rep.per_type.find(t);
        if (it != rep.per_type.end() && it->second.count > 0)
            row(to_string(t), it->second);
    }
    out << "unresolved: " << rep.unresolved << '\n';
    out << "stage failures: " << rep.stage_failures << '\n';
    out << "mean reflection depth: " << format_ratio2(rep.reflection_notes, rep.completed) << '\n';
    return out.str();
}

// ---------------------------------------------------------------------------
// Pipeline

struct PipelineOptions {
    ScoringParams params;
    EntityScoring entity_scoring = EntityScoring::batched;
    int max_reflections = 3;
    EvaluationMode evaluation_mode = EvaluationMode::automatic;
    TimingMode timing = TimingMode::logical;
    std::string config_fingerprint;
};

/// Everything needed to run samples: routed backends, prompts, grounder and options.
class Pipeline {
public:
    Pipeline(BackendRouter router, PromptSet prompts, std::shared_ptr<Grounder> grounder, PipelineOptions options)
        : router_(std::move(router)), prompts_(std::move(prompts)), grounder_(std::move(grounder)),
          options_(std::move(options)) {}

    static Pipeline from_config(const RunConfig& cfg) {
        auto router = build_router(cfg);
        auto prompts = cfg.prompts_dir ? PromptSet::load_dir(*cfg.prompts_dir) : PromptSet::defaults();
        std::shared_ptr<Grounder> grounder;
        if (cfg.grounder_fixture)
            grounder = std::make_shared<FixtureGrounder>(FixtureGrounder::load(*cfg.grounder_fixture));
        else
            grounder = std::make_shared<ModelGrounder>(prompts);
        PipelineOptions opts;
        opts.params = cfg.thresholds;
        opts.entity_scoring = cfg.entity_scoring;
        opts.max_reflections = cfg.max_reflections;
        opts.evaluation_mode = cfg.evaluation_mode;
        opts.timing = cfg.timing.value_or(cfg.all_scripted() ? TimingMode::logical : TimingMode::wall);
        opts.config_fingerprint = cfg.fingerprint;
        return Pipeline(std::move(router), std::move(prompts), std::move(grounder), opts);
    }

    const BackendRouter& router() const noexcept { return router_; }
    const PromptSet& prompts() const noexcept { return prompts_; }
    PipelineOptions& options() noexcept { return options_; }
    const PipelineOptions& options() const noexcept { return options_; }

    /// Roles a full run needs; the grounder role only when no fixture grounder is installed.
    void check_roles() const {
        std::vector<BackendRole> needed = {BackendRole::vrd_model, BackendRole::analyzer_ga,
                                           BackendRole::captioner_gc, BackendRole::paraphraser,
                                           BackendRole::reasoner};
        if (dynamic_cast<const ModelGrounder*>(grounder_.get()))
            needed.push_back(BackendRole::grounder);
        for (auto role : needed)
            if (!router_.configured(role))
                throw ConfigError("no backend configured for role " + std::string(to_string(role)));
    }

    /// Runs extraction, knowledge and reasoning for one sample. Never throws for sample-level failures.
    TrajectoryRecord run_sample(const Sample& sample, std::size_t index) const {
        TrajectoryRecord rec;
        rec.index = index;
        rec.sample_id = sample.id;
        rec.config_fingerprint = options_.config_fingerprint;
        rec.image = sample.image_ref;
        rec.question = sample.question;
        rec.question_type = sample.question_type;
        rec.references = sample.references;
        rec.choices = sample.choices;
        rec.timing_unit = options_.timing == TimingMode::logical ? "calls" : "ms";

        Session session(router_, sample.id);
        SolveResult solved;
        double* current_timer = nullptr;
        auto started = std::chrono::steady_clock::now();
        std::size_t calls_at_start = 0;
        auto start_timer = [&](double& slot) {
            current_timer = &slot;
            started = std::chrono::steady_clock::now();
            calls_at_start = session.calls().size();
        };
        auto stop_timer = [&] {
            if (!current_timer)
                return;
            if (options_.timing == TimingMode::logical)
                *current_timer = static_cast<double>(session.calls().size() - calls_at_start);
            else
                *current_timer = std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - started)
                                     .count();
            current_timer = nullptr;
        };

        try {
            session.set_stage("extraction");
            start_timer(rec.timings.extraction);
            auto image = load_image(sample.image_path);
            try {
                rec.extraction = extract(session, prompts_, *grounder_, image, options_.params, options_.entity_scoring);
            } catch (const NoKeyEntities& e) {
                session.flag("no_key_entities");
                session.warn(e.what());
            }
            stop_timer();

            session.set_stage("knowledge");
            start_timer(rec.timings.knowledge);
            rec.knowledge = build_knowledge(session, prompts_, image, rec.extraction ? &*rec.extraction : nullptr);
            stop_timer();

            start_timer(rec.timings.reasoning);
            SolveConfig sc;
            sc.max_reflections = options_.max_reflections;
            sc.mode = reward_mode_for(sample);
            solve(session, prompts_, {sample.question, sample.choices, sample.references, image}, rec.knowledge, sc,
                  &solved);
            stop_timer();
        } catch (const std::exception& e) {
            stop_timer();
            rec.status = "failed";
            rec.error = e.what();
        }

        if (!solved.question.paraphrased.empty())
            rec.paraphrase = solved.question;
        rec.traces = std::move(solved.traces);
        rec.notes = std::move(solved.notes);
        rec.final_answer = solved.final_answer;
        rec.resolved = solved.resolved && !rec.failed();
        if (!rec.traces.empty() && !rec.failed())
            rec.reward = rec.traces.back().reward;
        rec.calls = session.calls();
        rec.warnings = session.warnings();
        rec.flags = session.flags();
        return rec;
    }

private:
    RewardMode reward_mode_for(const Sample& s) const {
        switch (options_.evaluation_mode) {
        case EvaluationMode::reference_match: return RewardMode::reference_match;
        case EvaluationMode::self_assessment: return RewardMode::self_assessment;
        case EvaluationMode::automatic: break;
        }
        return s.references.empty() ? RewardMode::self_assessment : RewardMode::reference_match;
    }

    BackendRouter router_;
    PromptSet prompts_;
    std::shared_ptr<Grounder> grounder_;
    PipelineOptions options_;
};

struct BatchOptions {
    std::size_t concurrency = 4;
    MetricMode metric = MetricMode::exact;
};

struct BatchResult {
    std::vector<TrajectoryRecord> records;
    RunReport report;
};

/// Runs every sample; per-sample failures are recorded, never abort the batch.
/// With `out` set, records stream to that trajectory file as they complete (in index order).
inline BatchResult run_batch(const std::vector<Sample>& samples, const Pipeline& pipeline, const BatchOptions& opts,
                             const std::optional<std::filesystem::path>& out = std::nullopt) {
    pipeline.check_roles();
    if (opts.metric == MetricMode::consensus) {
        for (const auto& s : samples)
            if (s.references.empty())
                throw PreconditionError("consensus metric: sample " + s.id + " has no references");
    }
    std::unique_ptr<TrajectoryWriter> writer;
    if (out)
        writer = std::make_unique<TrajectoryWriter>(
            *out, TrajectoryHeader{kTrajectoryVersion, pipeline.options().config_fingerprint, opts.metric});

    BatchResult result;
    result.records.resize(samples.size());
    for_each_index(samples.size(), opts.concurrency, [&](std::size_t i) {
        result.records[i] = pipeline.run_sample(samples[i], i);
        if (writer)
            writer->submit(result.records[i]);
    });
    if (writer)
        writer->finish();
    result.report = accuracy(result.records, opts.metric);
    return result;
}

/// Recomputes the report from persisted records with no backend calls.
inline RunReport replay(const std::filesystem::path& trajectory_file) {
    auto file = read_trajectories(trajectory_file);
    return accuracy(file.records, file.header.metric);
}

}  // namespace vqa
