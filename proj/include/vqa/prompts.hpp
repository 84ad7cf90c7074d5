#pragma once

// SPDX-License-Identifier: Apache-2.0

// Prompt templates with {{placeholder}} substitution.
//
// Every template the pipeline renders has a name, a built-in default and a
// set of placeholders it must contain. A prompt directory may override any
// template with a `<name>.txt` file.

#include "vqa/error.hpp"

#include <filesystem>
#include <fstream>
#include <map>
#include <set>
#include <sstream>
#include <string>
#include <string_view>
#include <vector>

namespace vqa {

using TemplateVars = std::map<std::string, std::string, std::less<>>;

/// Placeholder names in order of appearance (duplicates kept).
inline std::vector<std::string> template_placeholders(std::string_view text) {
    std::vector<std::string> names;
    std::size_t pos = 0;
    while ((pos = text.find("{{", pos)) != std::string_view::npos) {
        auto close = text.find("}}", pos + 2);
        if (close == std::string_view::npos)
            throw TemplateError("unterminated placeholder at offset " + std::to_string(pos));
        names.emplace_back(text.substr(pos + 2, close - pos - 2));
        pos = close + 2;
    }
    return names;
}

/// Substitutes every {{name}}. Substituted values are not rescanned.
inline std::string render_template(std::string_view text, const TemplateVars& vars) {
    std::string out;
    out.reserve(text.size() * 2);
    std::size_t pos = 0;
    for (;;) {
        auto open = text.find("{{", pos);
        if (open == std::string_view::npos) {
            out.append(text.substr(pos));
            return out;
        }
        auto close = text.find("}}", open + 2);
        if (close == std::string_view::npos)
            throw TemplateError("unterminated placeholder at offset " + std::to_string(open));
        auto name = text.substr(open + 2, close - open - 2);
        auto it = vars.find(name);
        if (it == vars.end())
            throw TemplateError("unsubstituted placeholder {{" + std::string(name) + "}}");
        out.append(text.substr(pos, open - pos));
        out.append(it->second);
        pos = close + 2;
    }
}

namespace prompt {

struct Definition {
    std::string_view name;
    std::vector<std::string_view> required;
    std::string_view text;
};

// clang-format off
inline const std::vector<Definition>& builtin() {
    static const std::vector<Definition> defs = {
        {"entity_extraction", {},
R"(Task: entity-extraction
List every entity visible in the attached image. For each entity, assign a validity score between 0 and 1 that reflects how relevant the entity is to understanding the content of the image.
Reply with one line per entity in the form "name: score" and nothing else.
)"},
        {"entity_listing", {},
R"(Task: entity-listing
List every entity visible in the attached image, one name per line, with no other text.
)"},
        {"entity_judge", {"entity"},
R"(Task: entity-judge
Entity: {{entity}}
Rate how relevant this entity is to understanding the content of the attached image. Reply with a single score between 0 and 1.
)"},
        {"grounding", {"entity_list"},
R"(Task: grounding
Entities: {{entity_list}}
For each entity above, give the pixel bounding box of its region in the attached image. Reply with one line per entity in the form "name: x, y, w, h". Omit entities you cannot locate.
)"},
        {"relation_detection", {"subject", "entity_list", "region_list"},
R"(Task: relation-detection
Subject: {{subject}}
Key entities: {{entity_list}}
Regions:
{{region_list}}
List every potential relationship the subject takes part in as a predicate (for example "holding" or "standing next to"), one per line. Reply "none" if there are none.
)"},
        {"relation_targets", {"subject", "predicates", "entity_list", "region_list"},
R"(Task: relation-targets
Subject: {{subject}}
Predicates:
{{predicates}}
Key entities: {{entity_list}}
Regions:
{{region_list}}
For each predicate, name the entity in the image that it targets. Reply with one line per predicate in the form "predicate: target entity".
)"},
        {"relation_judge", {"subject", "predicate", "object"},
R"(Task: relation-judge
Relationship: {{subject}} | {{predicate}} | {{object}}
Rate how much this relationship contributes to understanding the attached image. Reply with a single score between 0 and 1.
)"},
        {"analysis", {"description"},
R"(Task: causal-analysis
Preliminary description: {{description}}
Interpret the description with respect to the attached image. Analyze the causal relationships between the behaviors of the key entities and the outcomes they are likely to lead to, and write a concise analysis report.
)"},
        {"analysis_fallback", {},
R"(Task: causal-analysis
Analyze the attached image. Identify the main entities and their behaviors, infer the outcomes those behaviors are likely to lead to, and write a concise analysis report.
)"},
        {"caption", {"description", "analysis"},
R"(Task: detailed-caption
Preliminary description: {{description}}
Analysis report: {{analysis}}
Enrich the preliminary description into a detailed caption of the attached image. Mention every entity from the description, their behaviors, and the inferences drawn in the analysis report.
)"},
        {"teacher_analysis", {"description"},
R"(Task: teacher-analysis
Preliminary description: {{description}}
Analyze the causal relationships between the behaviors of the key entities in the description and the outcomes you can infer from the attached image. Write a concise analysis report.
)"},
        {"teacher_caption", {"description", "analysis"},
R"(Task: teacher-caption
Preliminary description: {{description}}
Analysis report: {{analysis}}
Write a detailed caption of the attached image that describes the key entities, their behaviors, and the causal inferences in natural language.
)"},
        {"judge_analysis", {"description", "candidate"},
R"(Task: judge-analysis
Preliminary description: {{description}}
Candidate analysis report: {{candidate}}
Judge whether the candidate correctly uncovers the causal relationships in the attached image. Reply with a single validity score between 0 and 1.
)"},
        {"judge_caption", {"description", "analysis", "candidate"},
R"(Task: judge-caption
Preliminary description: {{description}}
Analysis report: {{analysis}}
Candidate caption: {{candidate}}
Judge whether the candidate correctly introduces the attached image. Reply with a single validity score between 0 and 1.
)"},
        {"training_analysis", {"image_ref", "description"},
R"(<image>{{image_ref}}</image>
Preliminary description: {{description}}
Analyze the causal relationships between the behaviors of the key entities and the outcomes they are likely to lead to.
)"},
        {"training_caption", {"image_ref", "description", "analysis"},
R"(<image>{{image_ref}}</image>
Preliminary description: {{description}}
Analysis report: {{analysis}}
Enrich the preliminary description into a detailed caption of the image.
)"},
        {"paraphrase", {"question", "caption"},
R"(Task: paraphrase
Question: {{question}}
Detailed caption: {{caption}}
Identify the main subject of the question. Query the caption for information about that subject and its interaction with the scene, then rewrite the question so that the subject is described unambiguously while keeping its meaning.
Reply in exactly this format:
Subject: <main subject, or "none" if the question is already unambiguous>
Context:
- <relevant snippet from the caption>
Paraphrase: <rewritten question>
)"},
        {"coe", {"question", "caption", "reflections"},
R"(Task: chain-of-evidence
Question: {{question}}
Detailed caption: {{caption}}
Reflections from previous attempts:
{{reflections}}
Use the visual information in the attached image and its caption to answer the question. First extract the factual information relevant to the question as evidence, then reason step by step using that evidence, then give the answer.
Reply in exactly this format:
Evidence:
- <fact>
Reasoning:
1. <step>
Answer: <short answer>
)"},
        {"reflection", {"question", "caption", "trajectory"},
R"(Task: reflection
Question: {{question}}
Detailed caption: {{caption}}
Previous trial:
{{trajectory}}
The previous trial produced an incorrect answer. Analyze its reasoning trajectory, identify the cause of the failure, and formulate a high-level plan that prevents similar failures.
Reply in exactly this format:
Cause: <why the previous attempt failed>
Plan: <what to do differently>
)"},
        {"self_assessment", {"question", "caption", "answer"},
R"(Task: self-assessment
Question: {{question}}
Detailed caption: {{caption}}
Proposed answer: {{answer}}
Decide whether the proposed answer is correct for the attached image. Reply with PASS or FAIL.
)"},
    };
    return defs;
}
// clang-format on

}  // namespace prompt

/// The full set of templates used by one run.
class PromptSet {
public:
    static PromptSet defaults() {
        PromptSet set;
        for (const auto& def : prompt::builtin())
            set.templates_.emplace(std::string(def.name), std::string(def.text));
        return set;
    }

    /// Defaults overlaid with every `<name>.txt` found in `dir`. Unknown files are ignored.
    static PromptSet load_dir(const std::filesystem::path& dir) {
        if (!std::filesystem::is_directory(dir))
            throw ConfigError("prompt directory not found: " + dir.string());
        PromptSet set = defaults();
        for (const auto& def : prompt::builtin()) {
            auto path = dir / (std::string(def.name) + ".txt");
            if (!std::filesystem::exists(path))
                continue;
            std::ifstream in(path, std::ios::binary);
            std::ostringstream buf;
            buf << in.rdbuf();
            set.set(std::string(def.name), buf.str());
        }
        return set;
    }

    /// Replaces one template after checking its required placeholders.
    void set(const std::string& name, std::string text) {
        const auto* def = find_definition(name);
        if (def == nullptr)
            throw TemplateError("unknown prompt template: " + name);
        auto present = template_placeholders(text);
        std::set<std::string_view> have(present.begin(), present.end());
        for (auto req : def->required) {
            if (!have.contains(req))
                throw TemplateError("prompt template " + name + " lacks required placeholder {{" +
                                    std::string(req) + "}}");
        }
        templates_[name] = std::move(text);
    }

    const std::string& text(const std::string& name) const {
        auto it = templates_.find(name);
        if (it == templates_.end())
            throw TemplateError("unknown prompt template: " + name);
        return it->second;
    }

    std::string render(const std::string& name, const TemplateVars& vars) const {
        return render_template(text(name), vars);
    }

private:
    static const prompt::Definition* find_definition(std::string_view name) {
        for (const auto& def : prompt::builtin())
            if (def.name == name)
                return &def;
        return nullptr;
    }

    std::map<std::string, std::string> templates_;
};

}  // namespace vqa
