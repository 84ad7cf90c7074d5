#pragma once

// SPDX-License-Identifier: Apache-2.0

/**
 * @file knowledge.hpp
 * @brief Knowledge enrichment: analysis report A, detailed caption C, and the
 *        teacher/judge curation path that produces pseudo-ground-truth
 *        training records for the analyzer and captioner.
 *
 * Curation samples k candidates per (image, description) item from the teacher role,
 * scores each once with the judge role, and keeps candidates whose score is
 * strictly above tau. Caption curation is conditioned on retained analysis
 * reports only. Every candidate, kept or not, is returned for auditing.
 */

#include "vqa/backend.hpp"
#include "vqa/concurrency.hpp"
#include "vqa/core.hpp"
#include "vqa/extraction.hpp"
#include "vqa/prompts.hpp"

#include <nlohmann/json.hpp>

#include <filesystem>
#include <fstream>
#include <functional>
#include <mutex>
#include <optional>
#include <string>
#include <vector>

namespace vqa {

namespace detail {

inline std::string require_text(const std::string& text) {
    if (trim(text).empty())
        throw ParseError("empty model response");
    return trim(text);
}

inline bool mentions(std::string_view text, std::string_view name) {
    return lower(text).find(lower(name)) != std::string::npos;
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Inference path

/// Analysis report from the analyzer role. With `degenerate` set the prompt carries no description section.
inline std::string analyze_causal(Session& session, const PromptSet& prompts, const ImagePtr& image,
                                  const std::string& description_d, bool degenerate = false) {
    std::string prompt;
    if (degenerate) {
        prompt = prompts.render("analysis_fallback", {});
    } else {
        if (description_d.empty())
            throw PreconditionError("analyze_causal: empty description without the degenerate flag");
        prompt = prompts.render("analysis", {{"description", description_d}});
    }
    try {
        return session.complete_parsed(BackendRole::analyzer_ga, {ChatMessage::user(prompt, image)},
                                       detail::require_text);
    } catch (const ParseError& e) {
        throw StageError("knowledge", std::string("analysis: ") + e.what());
    }
}

/// Detailed caption C from the captioner role. Key entities absent from C are warned about, not fatal.
inline std::string enrich_caption(Session& session, const PromptSet& prompts, const ImagePtr& image,
                                  const std::string& description_d, const std::string& analysis_a,
                                  const std::vector<std::string>& key_entity_names = {}) {
    if (analysis_a.empty())
        throw PreconditionError("enrich_caption: empty analysis report");
    auto prompt = prompts.render("caption", {{"description", description_d}, {"analysis", analysis_a}});
    std::string caption;
    try {
        caption = session.complete_parsed(BackendRole::captioner_gc, {ChatMessage::user(prompt, image)},
                                          detail::require_text);
    } catch (const ParseError& e) {
        throw StageError("knowledge", std::string("caption: ") + e.what());
    }
    for (const auto& name : key_entity_names) {
        if (!detail::mentions(caption, name))
            session.warn("knowledge: caption does not mention key entity '" + name + "'");
    }
    return caption;
}

/// Runs A then C. A null `extraction` means the degenerate path (no key entities).
inline KnowledgeBundle build_knowledge(Session& session, const PromptSet& prompts, const ImagePtr& image,
                                       const ExtractionResult* extraction) {
    KnowledgeBundle bundle;
    std::vector<std::string> names;
    if (extraction) {
        bundle.description_d = extraction->description_d;
        for (const auto& e : extraction->key_entities())
            names.push_back(e.name);
    } else {
        bundle.degenerate = true;
    }
    bundle.analysis_a = analyze_causal(session, prompts, image, bundle.description_d, bundle.degenerate);
    bundle.caption_c = enrich_caption(session, prompts, image, bundle.description_d, bundle.analysis_a, names);
    return bundle;
}

// ---------------------------------------------------------------------------
// Curation

enum class CandidateKind { analysis, caption };

inline std::string_view to_string(CandidateKind k) { return k == CandidateKind::analysis ? "analysis" : "caption"; }

inline CandidateKind parse_kind(std::string_view s) {
    if (s == "analysis")
        return CandidateKind::analysis;
    if (s == "caption")
        return CandidateKind::caption;
    throw FormatError("unknown candidate kind: " + std::string(s));
}

struct CurationItem {
    std::string image_ref;
    ImagePtr image;
    std::string description_d;
    std::optional<std::string> analysis_input;  // retained analysis text; required for caption curation
};

struct CandidateRecord {
    CandidateKind kind = CandidateKind::analysis;
    std::string image_ref;
    std::string description_d;
    std::string content;
    ValidityScore judge_score;
    bool retained = false;
    std::optional<std::string> analysis_input;
    std::size_t item_index = 0;
    std::size_t sample_index = 0;

    friend bool operator==(const CandidateRecord&, const CandidateRecord&) = default;
};

struct CurationFailure {
    std::size_t item_index = 0;
    std::string error;
};

struct CurationResult {
    std::vector<CandidateRecord> candidates;  // item order, then sample order
    std::vector<CurationFailure> failures;

    std::vector<CandidateRecord> retained() const {
        std::vector<CandidateRecord> out;
        for (const auto& c : candidates)
            if (c.retained)
                out.push_back(c);
        return out;
    }
};

struct CurationOptions {
    int samples_per_item = 3;
    ValidityScore tau{0.6};
    std::size_t concurrency = 1;
};

/// Caption-curation inputs built from retained analysis candidates; non-retained ones are skipped.
inline std::vector<CurationItem> caption_items_from(const std::vector<CandidateRecord>& analysis_candidates,
                                                    const std::function<ImagePtr(const std::string&)>& image_for) {
    std::vector<CurationItem> items;
    for (const auto& c : analysis_candidates) {
        if (c.kind != CandidateKind::analysis || !c.retained)
            continue;
        items.push_back({c.image_ref, image_for ? image_for(c.image_ref) : nullptr, c.description_d, c.content});
    }
    return items;
}

namespace detail {

inline std::vector<CandidateRecord> curate_item(Session& session, const PromptSet& prompts, CandidateKind kind,
                                                const CurationItem& item, std::size_t item_index,
                                                const CurationOptions& opts) {
    TemplateVars vars{{"description", item.description_d}};
    if (kind == CandidateKind::caption)
        vars["analysis"] = *item.analysis_input;
    const auto teacher_prompt =
        prompts.render(kind == CandidateKind::analysis ? "teacher_analysis" : "teacher_caption", vars);
    const std::string judge_template = kind == CandidateKind::analysis ? "judge_analysis" : "judge_caption";

    std::vector<CandidateRecord> out;
    std::vector<std::pair<std::size_t, ValidityScore>> scored;
    for (int s = 0; s < opts.samples_per_item; ++s) {
        auto content = session.complete_parsed(BackendRole::teacher_llm,
                                               {ChatMessage::user(teacher_prompt, item.image)}, require_text);
        auto judge_vars = vars;
        judge_vars["candidate"] = content;
        auto score = session.complete_parsed(
            BackendRole::judge_f, {ChatMessage::user(prompts.render(judge_template, judge_vars), item.image)},
            [](const std::string& t) { return parse_score(t); });
        CandidateRecord rec;
        rec.kind = kind;
        rec.image_ref = item.image_ref;
        rec.description_d = item.description_d;
        rec.content = std::move(content);
        rec.judge_score = score;
        rec.analysis_input = item.analysis_input;
        rec.item_index = item_index;
        rec.sample_index = static_cast<std::size_t>(s);
        scored.emplace_back(out.size(), score);
        out.push_back(std::move(rec));
    }
    for (auto idx : filter_by_threshold(scored, opts.tau))
        out[idx].retained = true;
    return out;
}

}  // namespace detail

/// Teacher sampling + judge filtering over a batch. Item failures are recorded and the batch continues.
inline CurationResult curate(const BackendRouter& router, const PromptSet& prompts, CandidateKind kind,
                             const std::vector<CurationItem>& items, const CurationOptions& opts) {
    if (!router.configured(BackendRole::teacher_llm) || !router.configured(BackendRole::judge_f))
        throw PreconditionError("curate: teacher_llm and judge_f roles must be configured");
    if (opts.samples_per_item < 1)
        throw PreconditionError("curate: samples_per_item must be >= 1");
    for (std::size_t i = 0; i < items.size(); ++i) {
        if (kind == CandidateKind::caption && !items[i].analysis_input)
            throw PreconditionError("curate: caption item " + std::to_string(i) + " lacks analysis_input");
        if (!items[i].image)
            throw PreconditionError("curate: item " + std::to_string(i) + " has no image");
    }

    std::vector<std::vector<CandidateRecord>> per_item(items.size());
    std::vector<std::optional<std::string>> errors(items.size());
    for_each_index(items.size(), opts.concurrency, [&](std::size_t i) {
        Session session(router, items[i].image_ref);
        session.set_stage("curation");
        try {
            per_item[i] = detail::curate_item(session, prompts, kind, items[i], i, opts);
        } catch (const std::exception& e) {
            errors[i] = e.what();
        }
    });

    CurationResult result;
    for (std::size_t i = 0; i < items.size(); ++i) {
        if (errors[i]) {
            result.failures.push_back({i, *errors[i]});
            continue;
        }
        for (auto& c : per_item[i])
            result.candidates.push_back(std::move(c));
    }
    return result;
}

// ---------------------------------------------------------------------------
// Training records

struct TrainingRecord {
    std::string image;
    std::string rendered_template;
    std::string target;

    friend bool operator==(const TrainingRecord&, const TrainingRecord&) = default;
};

/// Generation prompt rendered with the candidate's inputs; target is the candidate text.
inline std::vector<TrainingRecord> emit_training_records(const PromptSet& prompts,
                                                         const std::vector<CandidateRecord>& retained) {
    std::vector<TrainingRecord> out;
    out.reserve(retained.size());
    for (std::size_t i = 0; i < retained.size(); ++i) {
        const auto& c = retained[i];
        if (!c.retained)
            throw PreconditionError("emit_training_records: record " + std::to_string(i) + " was not retained");
        TemplateVars vars{{"image_ref", c.image_ref}, {"description", c.description_d}};
        std::string name = "training_analysis";
        if (c.kind == CandidateKind::caption) {
            if (!c.analysis_input)
                throw PreconditionError("emit_training_records: caption record lacks analysis_input");
            vars["analysis"] = *c.analysis_input;
            name = "training_caption";
        }
        out.push_back({c.image_ref, prompts.render(name, vars), c.content});
    }
    return out;
}

// ---------------------------------------------------------------------------
// Serialization

inline nlohmann::ordered_json to_json(const CandidateRecord& c) {
    nlohmann::ordered_json j;
    j["kind"] = std::string(to_string(c.kind));
    j["image"] = c.image_ref;
    j["item_index"] = c.item_index;
    j["sample_index"] = c.sample_index;
    j["description"] = c.description_d;
    if (c.analysis_input)
        j["analysis_input"] = *c.analysis_input;
    j["content"] = c.content;
    j["judge_score"] = c.judge_score.value();
    j["retained"] = c.retained;
    return j;
}

inline CandidateRecord candidate_from_json(const nlohmann::json& j) {
    CandidateRecord c;
    c.kind = parse_kind(j.at("kind").get<std::string>());
    c.image_ref = j.at("image").get<std::string>();
    c.item_index = j.value("item_index", std::size_t{0});
    c.sample_index = j.value("sample_index", std::size_t{0});
    c.description_d = j.at("description").get<std::string>();
    if (j.contains("analysis_input"))
        c.analysis_input = j.at("analysis_input").get<std::string>();
    c.content = j.at("content").get<std::string>();
    c.judge_score = ValidityScore(j.at("judge_score").get<double>());
    c.retained = j.at("retained").get<bool>();
    return c;
}

inline nlohmann::ordered_json to_json(const TrainingRecord& r) {
    nlohmann::ordered_json j;
    j["image"] = r.image;
    j["template"] = r.rendered_template;
    j["target"] = r.target;
    return j;
}

inline TrainingRecord training_record_from_json(const nlohmann::json& j) {
    return {j.at("image").get<std::string>(), j.at("template").get<std::string>(), j.at("target").get<std::string>()};
}

/// Reads a JSON-lines file; `parse` is called per non-empty line with its 1-based line number.
template <typename Fn>
void for_each_json_line(const std::filesystem::path& path, Fn&& parse) {
    std::ifstream in(path, std::ios::binary);
    if (!in)
        throw FormatError("cannot open " + path.string());
    std::string line;
    std::size_t lineno = 0;
    while (std::getline(in, line)) {
        ++lineno;
        if (!line.empty() && line.back() == '\r')
            line.pop_back();
        if (detail::trim(line).empty())
            continue;
        nlohmann::json j;
        try {
            j = nlohmann::json::parse(line);
        } catch (const nlohmann::json::exception& e) {
            throw FormatError(path.string() + ":" + std::to_string(lineno) + ": malformed JSON: " + e.what());
        }
        try {
            parse(j, lineno);
        } catch (const nlohmann::json::exception& e) {
            throw FormatError(path.string() + ":" + std::to_string(lineno) + ": " + e.what());
        }
    }
}

template <typename Range>
void write_json_lines(const std::filesystem::path& path, const Range& records) {
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out)
        throw FormatError("cannot write " + path.string());
    for (const auto& r : records)
        out << to_json(r).dump() << '\n';
    if (!out)
        throw FormatError("write failed: " + path.string());
}

inline std::vector<CandidateRecord> load_candidates(const std::filesystem::path& path) {
    std::vector<CandidateRecord> out;
    for_each_json_line(path, [&](const nlohmann::json& j, std::size_t) { out.push_back(candidate_from_json(j)); });
    return out;
}

inline std::vector<TrainingRecord> load_training_records(const std::filesystem::path& path) {
    std::vector<TrainingRecord> out;
    for_each_json_line(path, [&](const nlohmann::json& j, std::size_t) { out.push_back(training_record_from_json(j)); });
    return out;
}

/// Per-record target-token log-probabilities supplied by an external trainer: {"logprobs": [...]} per line.
inline std::vector<TokenLogProbs> load_token_logprobs(const std::filesystem::path& path) {
    std::vector<TokenLogProbs> out;
    for_each_json_line(path, [&](const nlohmann::json& j, std::size_t lineno) {
        try {
            out.emplace_back(j.at("logprobs").get<std::vector<double>>());
        } catch (const PreconditionError& e) {
            throw FormatError(path.string() + ":" + std::to_string(lineno) + ": " + e.what());
        }
    });
    return out;
}

}  // namespace vqa
