#pragma once

// SPDX-License-Identifier: Apache-2.0

/**
 * @file reasoning.hpp
 * @brief Question paraphrase, chain-of-evidence reasoning, reward mapping and
 *        the bounded self-reflection loop.
 *
 * Model replies follow fixed section markers:
 *   paraphrase:  "Subject:" / "Context:" / "Paraphrase:"
 *   reasoning:   "Evidence:" / "Reasoning:" / "Answer:"
 *   reflection:  "Cause:" / "Plan:"
 * A reply missing a required section is re-requested up to kMaxReasks times.
 */

#include "vqa/backend.hpp"
#include "vqa/core.hpp"
#include "vqa/prompts.hpp"

#include <map>
#include <optional>
#include <regex>
#include <string>
#include <string_view>
#include <vector>

namespace vqa {

struct ParaphrasedQuestion {
    std::string original;
    std::string subject;  // empty when the question had no ambiguous subject
    std::vector<std::string> context_snippets;
    std::string paraphrased;
    bool fallback = false;  // reply never parsed; original question used

    friend bool operator==(const ParaphrasedQuestion&, const ParaphrasedQuestion&) = default;
};

struct ReasoningTrace {
    ParaphrasedQuestion question;
    std::vector<std::string> evidence;
    std::vector<std::string> steps;
    std::string predicted;
    RewardSignal reward;
    int attempt_index = 1;

    friend bool operator==(const ReasoningTrace&, const ReasoningTrace&) = default;
};

struct ReflectionNote {
    std::string failure_cause;
    std::string plan;
    int produced_after_attempt = 1;
    bool fallback = false;  // generic note substituted for an unparseable reply

    friend bool operator==(const ReflectionNote&, const ReflectionNote&) = default;
};

/// The three parts of a chain-of-evidence reply.
struct EvidenceAnswer {
    std::vector<std::string> evidence;
    std::vector<std::string> steps;
    std::string answer;

    friend bool operator==(const EvidenceAnswer&, const EvidenceAnswer&) = default;
};

// ---------------------------------------------------------------------------
// Section parsing

struct Section {
    bool present = false;
    std::vector<std::string> items;  // inline text after the marker, then following lines, bullets stripped
};

namespace detail {

/// Returns the remainder after `marker` if the line opens with it (ignoring markdown emphasis), else nullopt.
inline std::optional<std::string> after_marker(std::string_view line, std::string_view marker) {
    std::string s = trim(line);
    std::size_t i = 0;
    while (i < s.size() && (s[i] == '*' || s[i] == '#' || s[i] == ' '))
        ++i;
    std::string_view rest = std::string_view(s).substr(i);
    std::string_view word = marker;
    if (word.ends_with(':'))
        word.remove_suffix(1);
    if (rest.size() < word.size() || lower(rest.substr(0, word.size())) != lower(word))
        return std::nullopt;
    rest.remove_prefix(word.size());
    while (!rest.empty() && rest.front() == '*')
        rest.remove_prefix(1);
    if (rest.empty() || rest.front() != ':')
        return std::nullopt;
    rest.remove_prefix(1);
    while (!rest.empty() && rest.front() == '*')
        rest.remove_prefix(1);
    return trim(rest);
}

}  // namespace detail

/// Splits text into the named sections. Lines before the first marker are ignored.
inline std::map<std::string, Section> parse_sections(std::string_view text, const std::vector<std::string>& markers) {
    std::map<std::string, Section> out;
    for (const auto& m : markers)
        out[m];
    Section* current = nullptr;
    for (const auto& line : detail::split_lines(text)) {
        bool opened = false;
        for (const auto& m : markers) {
            if (auto rest = detail::after_marker(line, m)) {
                current = &out[m];
                current->present = true;
                if (!rest->empty())
                    current->items.push_back(detail::strip_bullet(*rest));
                opened = true;
                break;
            }
        }
        if (opened || current == nullptr)
            continue;
        auto item = detail::strip_bullet(line);
        if (!item.empty())
            current->items.push_back(std::move(item));
    }
    return out;
}

inline EvidenceAnswer parse_evidence_answer(std::string_view text) {
    auto s = parse_sections(text, {"Evidence:", "Reasoning:", "Answer:"});
    std::vector<std::string> missing;
    for (const char* m : {"Evidence:", "Reasoning:", "Answer:"})
        if (!s[m].present)
            missing.emplace_back(m);
    if (!missing.empty())
        throw ParseError("missing section marker " + detail::join(missing, ", "));
    EvidenceAnswer r{s["Evidence:"].items, s["Reasoning:"].items, detail::join(s["Answer:"].items, " ")};
    if (r.evidence.empty())
        throw ParseError("Evidence: section is empty");
    if (r.steps.empty())
        throw ParseError("Reasoning: section is empty");
    if (r.answer.empty())
        throw ParseError("Answer: section is empty");
    return r;
}

/// Canonical text form of a chain-of-evidence reply; parse_evidence_answer inverts it.
inline std::string render_evidence_answer(const EvidenceAnswer& r) {
    std::string out = "Evidence:\n";
    for (const auto& e : r.evidence)
        out += "- " + e + "\n";
    out += "Reasoning:\n";
    for (std::size_t i = 0; i < r.steps.size(); ++i)
        out += std::to_string(i + 1) + ". " + r.steps[i] + "\n";
    out += "Answer: " + r.answer;
    return out;
}

inline ReflectionNote parse_reflection(std::string_view text) {
    auto s = parse_sections(text, {"Cause:", "Plan:"});
    if (!s["Cause:"].present || !s["Plan:"].present)
        throw ParseError("reflection lacks Cause:/Plan: sections");
    ReflectionNote note{detail::join(s["Cause:"].items, " "), detail::join(s["Plan:"].items, " "), 1, false};
    if (note.failure_cause.empty() || note.plan.empty())
        throw ParseError("reflection has an empty Cause: or Plan:");
    return note;
}

/// Parses a paraphraser reply. "Subject: none" means the question needs no rewriting.
inline ParaphrasedQuestion parse_paraphrase(std::string_view text, const std::string& original) {
    auto s = parse_sections(text, {"Subject:", "Context:", "Paraphrase:"});
    if (!s["Subject:"].present)
        throw ParseError("paraphrase lacks a Subject: section");
    ParaphrasedQuestion q;
    q.original = original;
    q.subject = detail::join(s["Subject:"].items, " ");
    auto subj = detail::lower(q.subject);
    while (!subj.empty() && (subj.back() == '.' || subj.back() == '"'))
        subj.pop_back();
    if (!subj.empty() && subj.front() == '"')
        subj.erase(0, 1);
    if (subj.empty() || subj == "none") {
        q.subject.clear();
        q.paraphrased = original;
        return q;
    }
    if (!s["Paraphrase:"].present)
        throw ParseError("paraphrase lacks a Paraphrase: section");
    q.context_snippets = s["Context:"].items;
    q.paraphrased = detail::join(s["Paraphrase:"].items, " ");
    if (q.paraphrased.empty())
        throw ParseError("Paraphrase: section is empty");
    return q;
}

/// PASS or FAIL, whichever appears first as a whole word (case-insensitive).
inline Outcome parse_verdict(std::string_view text) {
    static const std::regex verdict(R"(\b(PASS|FAIL)\b)", std::regex::icase);
    std::string s(text);
    std::smatch m;
    if (!std::regex_search(s, m, verdict))
        throw ParseError("reply contains neither PASS nor FAIL");
    return detail::lower(m.str(1)) == "pass" ? Outcome::pass : Outcome::fail;
}

// ---------------------------------------------------------------------------
// Prompt fragments

inline std::string render_reflections(const std::vector<ReflectionNote>& notes) {
    if (notes.empty())
        return "(none)";
    std::vector<std::string> blocks;
    for (const auto& n : notes)
        blocks.push_back("Attempt " + std::to_string(n.produced_after_attempt) + ":\nCause: " + n.failure_cause +
                         "\nPlan: " + n.plan);
    return detail::join(blocks, "\n");
}

inline std::string render_trajectory(const ReasoningTrace& trace) {
    return "Question: " + trace.question.paraphrased + "\n" +
           render_evidence_answer({trace.evidence, trace.steps, trace.predicted}) +
           "\nOutcome: the answer was judged incorrect.";
}

inline std::string question_with_choices(const std::string& question, const std::vector<std::string>& choices) {
    if (choices.empty())
        return question;
    return question + "\nOptions: " + detail::join(choices, "; ");
}

// ---------------------------------------------------------------------------
// Operations

inline ParaphrasedQuestion paraphrase(Session& session, const PromptSet& prompts, const std::string& question,
                                      const std::string& caption_c, const ImagePtr& image = nullptr) {
    if (detail::trim(question).empty())
        throw PreconditionError("paraphrase: empty question");
    auto prompt = prompts.render("paraphrase", {{"question", question}, {"caption", caption_c}});
    try {
        return session.complete_parsed(BackendRole::paraphraser, {ChatMessage::user(prompt, image)},
                                       [&](const std::string& t) { return parse_paraphrase(t, question); });
    } catch (const ParseError&) {
        session.flag("paraphrase_fallback");
        ParaphrasedQuestion q;
        q.original = question;
        q.paraphrased = question;
        q.fallback = true;
        return q;
    }
}

/// One chain-of-evidence attempt. The reward is left for evaluate(); a reply that never
/// parses is a StageError with a parse-error verdict.
inline ReasoningTrace coe_reason(Session& session, const PromptSet& prompts, const ParaphrasedQuestion& q,
                                 const ImagePtr& image, const std::string& caption_c,
                                 const std::vector<ReflectionNote>& reflections,
                                 const std::vector<std::string>& choices = {}, int attempt_index = 1) {
    auto prompt = prompts.render("coe", {{"question", question_with_choices(q.paraphrased, choices)},
                                         {"caption", caption_c},
                                         {"reflections", render_reflections(reflections)}});
    EvidenceAnswer parsed;
    try {
        parsed = session.complete_parsed(BackendRole::reasoner, {ChatMessage::user(prompt, image)},
                                         [](const std::string& t) { return parse_evidence_answer(t); });
    } catch (const ParseError& e) {
        session.flag("parse_error");
        throw StageError("reasoning", std::string("parse-error: ") + e.what());
    }
    ReasoningTrace trace;
    trace.question = q;
    trace.evidence = std::move(parsed.evidence);
    trace.steps = std::move(parsed.steps);
    trace.predicted = std::move(parsed.answer);
    trace.attempt_index = attempt_index;
    return trace;
}

struct EvaluationContext {
    std::string question;
    std::string caption;
    ImagePtr image;
};

inline RewardSignal evaluate(Session& session, const PromptSet& prompts, const std::string& predicted,
                             const std::vector<std::string>& references, RewardMode mode,
                             const EvaluationContext& ctx = {}) {
    if (mode == RewardMode::reference_match)
        return reference_match_reward(predicted, references);

    if (!session.router().configured(BackendRole::reasoner))
        throw PreconditionError("evaluate: self_assessment needs the reasoner role");
    RewardSignal reward;
    reward.mode = RewardMode::self_assessment;
    auto prompt = prompts.render("self_assessment",
                                 {{"question", ctx.question}, {"caption", ctx.caption}, {"answer", predicted}});
    try {
        reward.outcome = session.complete_parsed(BackendRole::reasoner, {ChatMessage::user(prompt, ctx.image)},
                                                 [](const std::string& t) { return parse_verdict(t); });
        reward.verdict = reward.outcome == Outcome::pass ? "PASS" : "FAIL";
    } catch (const ParseError&) {
        reward.outcome = Outcome::fail;
        reward.flag = "no_verdict";
    }
    return reward;
}

inline ReflectionNote reflect(Session& session, const PromptSet& prompts, const ParaphrasedQuestion& q,
                              const std::string& caption_c, const ReasoningTrace& failed_trace,
                              const ImagePtr& image = nullptr) {
    if (failed_trace.reward.passed())
        throw PreconditionError("reflect: trace did not fail");
    auto prompt = prompts.render(
        "reflection",
        {{"question", q.paraphrased}, {"caption", caption_c}, {"trajectory", render_trajectory(failed_trace)}});
    ReflectionNote note;
    try {
        note = session.complete_parsed(BackendRole::reasoner, {ChatMessage::user(prompt, image)},
                                       [](const std::string& t) { return parse_reflection(t); });
    } catch (const ParseError&) {
        session.flag("reflection_fallback");
        note = {"The reply could not be analysed.", "Re-examine evidence extraction before answering.", 1, true};
    }
    note.produced_after_attempt = failed_trace.attempt_index;
    return note;
}

struct SolveConfig {
    int max_reflections = 3;  // maximum reasoning attempts per sample
    RewardMode mode = RewardMode::reference_match;
};

struct SolveInput {
    std::string question;
    std::vector<std::string> choices;
    std::vector<std::string> references;
    ImagePtr image;
};

struct SolveResult {
    ParaphrasedQuestion question;
    std::vector<ReasoningTrace> traces;
    std::vector<ReflectionNote> notes;
    std::string final_answer;
    bool resolved = false;
};

/// Paraphrase once, then reason / evaluate / reflect until a pass or max_reflections attempts.
/// `partial` (optional) receives progress so a caller can persist it if a later step throws.
inline SolveResult solve(Session& session, const PromptSet& prompts, const SolveInput& input,
                         const KnowledgeBundle& knowledge, const SolveConfig& config, SolveResult* partial = nullptr) {
    if (config.max_reflections < 1)
        throw PreconditionError("solve: max_reflections must be >= 1");
    if (!knowledge.complete() && !knowledge.degenerate)
        throw PreconditionError("solve: knowledge bundle incomplete");

    SolveResult local;
    SolveResult& result = partial ? *partial : local;
    result = {};

    session.set_stage("paraphrase");
    result.question = paraphrase(session, prompts, input.question, knowledge.caption_c, input.image);

    for (int attempt = 1; attempt <= config.max_reflections; ++attempt) {
        session.set_stage("reasoning");
        auto trace = coe_reason(session, prompts, result.question, input.image, knowledge.caption_c, result.notes,
                                input.choices, attempt);
        session.set_stage("evaluation");
        trace.reward = evaluate(session, prompts, trace.predicted, input.references, config.mode,
                                {question_with_choices(result.question.paraphrased, input.choices),
                                 knowledge.caption_c, input.image});
        result.traces.push_back(trace);
        result.final_answer = trace.predicted;
        if (trace.reward.passed()) {
            result.resolved = true;
            break;
        }
        if (attempt < config.max_reflections) {
            session.set_stage("reflection");
            result.notes.push_back(reflect(session, prompts, result.question, knowledge.caption_c,
                                           result.traces.back(), input.image));
        }
    }
    if (!result.resolved)
        session.flag("unresolved");
    if (partial)
        return *partial;
    return local;
}

}  // namespace vqa
