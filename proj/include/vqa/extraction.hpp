#pragma once

// SPDX-License-Identifier: Apache-2.0

/**
 * @file extraction.hpp
 * @brief Visual relationship extraction: scored entities, grounded relations,
 *        joint-score selection and the preliminary description.
 *
 * Flow for one image:
 *   1. extract_entities   - one batched "name: score" call (or list + per-entity judge)
 *   2. key entities       - entity score > theta_e
 *   3. propose_regions    - grounder boxes for the key entities
 *   4. detect_relations   - per key entity: predicates, their targets, then a relation score per triple
 *   5. select_key_relations - joint score per subject, keep joint > theta_re
 *   6. compose_description
 */

#include "vqa/backend.hpp"
#include "vqa/core.hpp"
#include "vqa/prompts.hpp"

#include <algorithm>
#include <map>
#include <string>
#include <vector>

namespace vqa {

enum class EntityScoring { batched, per_entity };

struct ExtractionResult {
    std::vector<ScoredEntity> entities;     // every extracted entity, is_key set
    std::vector<ScoredRelation> relations;  // every scored relation, is_key set
    std::string description_d;

    std::vector<ScoredEntity> key_entities() const {
        std::vector<ScoredEntity> out;
        std::copy_if(entities.begin(), entities.end(), std::back_inserter(out), [](const auto& e) { return e.is_key; });
        return out;
    }
    std::vector<ScoredRelation> key_relations() const {
        std::vector<ScoredRelation> out;
        std::copy_if(relations.begin(), relations.end(), std::back_inserter(out), [](const auto& r) { return r.is_key; });
        return out;
    }
};

/// Raised when no entity clears theta_e. Recoverable: the pipeline continues with an empty description.
class NoKeyEntities : public StageError {
public:
    explicit NoKeyEntities(const std::string& what) : StageError("extraction", what) {}
};

// ---------------------------------------------------------------------------
// Parsing

/// Parses "name: score" lines; blank lines are skipped, duplicates keep the max score.
inline std::vector<std::pair<std::string, ValidityScore>> parse_entity_scores(std::string_view text) {
    std::vector<std::pair<std::string, ValidityScore>> out;
    if (detail::lower(detail::trim(text)) == "none")
        return out;
    for (const auto& raw : detail::split_lines(text)) {
        auto line = detail::strip_bullet(raw);
        if (line.empty())
            continue;
        auto colon = line.rfind(':');
        if (colon == std::string::npos)
            throw ParseError("entity line lacks 'name: score': " + line);
        auto name = detail::trim(std::string_view(line).substr(0, colon));
        if (name.empty())
            throw ParseError("entity line has an empty name: " + line);
        auto score = parse_score(std::string_view(line).substr(colon + 1));
        auto it = std::find_if(out.begin(), out.end(), [&](const auto& p) { return p.first == name; });
        if (it == out.end())
            out.emplace_back(std::move(name), score);
        else
            it->second = std::max(it->second, score);
    }
    if (out.empty())
        throw ParseError("entity reply lists no entities");
    return out;
}

/// One item per line, list markers stripped; a lone "none" means an empty list.
inline std::vector<std::string> parse_item_lines(std::string_view text) {
    std::vector<std::string> items;
    for (const auto& raw : detail::split_lines(text)) {
        auto item = detail::strip_bullet(raw);
        if (!item.empty())
            items.push_back(std::move(item));
    }
    if (items.size() == 1) {
        auto l = detail::lower(items.front());
        if (l == "none" || l == "none.")
            items.clear();
    }
    return items;
}

// ---------------------------------------------------------------------------
// Entities

inline void mark_key_entities(std::vector<ScoredEntity>& entities, ValidityScore theta_e) {
    for (auto& e : entities)
        e.is_key = e.entity_score.value() > theta_e.value();
}

inline std::vector<ScoredEntity> extract_entities(Session& session, const PromptSet& prompts, const ImagePtr& image,
                                                  const ScoringParams& params,
                                                  EntityScoring mode = EntityScoring::batched) {
    if (!image)
        throw PreconditionError("extract_entities: no image");

    std::vector<std::pair<std::string, ValidityScore>> scored;
    if (mode == EntityScoring::batched) {
        scored = session.complete_parsed(BackendRole::vrd_model,
                                         {ChatMessage::user(prompts.render("entity_extraction", {}), image)},
                                         [](const std::string& t) { return parse_entity_scores(t); });
    } else {
        auto names = session.complete_parsed(BackendRole::vrd_model,
                                             {ChatMessage::user(prompts.render("entity_listing", {}), image)},
                                             [](const std::string& t) { return parse_item_lines(t); });
        for (const auto& name : names) {
            if (std::any_of(scored.begin(), scored.end(), [&](const auto& p) { return p.first == name; }))
                continue;
            auto s = session.complete_parsed(
                BackendRole::vrd_model, {ChatMessage::user(prompts.render("entity_judge", {{"entity", name}}), image)},
                [](const std::string& t) { return parse_score(t); });
            scored.emplace_back(name, s);
        }
    }

    std::vector<ScoredEntity> entities;
    entities.reserve(scored.size());
    for (auto& [name, score] : scored)
        entities.push_back({std::move(name), std::nullopt, score, false});
    mark_key_entities(entities, params.theta_e);
    return entities;
}

// ---------------------------------------------------------------------------
// Relations

/// Identical (subject, predicate, object) triples collapse to the first, carrying the max relation score.
inline std::vector<ScoredRelation> dedup_relations(std::vector<ScoredRelation> relations) {
    std::vector<ScoredRelation> out;
    for (auto& r : relations) {
        auto it = std::find_if(out.begin(), out.end(), [&](const ScoredRelation& o) {
            return o.subject == r.subject && o.predicate == r.predicate && o.object == r.object;
        });
        if (it == out.end())
            out.push_back(std::move(r));
        else
            it->relation_score = std::max(it->relation_score, r.relation_score);
    }
    return out;
}

namespace detail {

inline std::string region_list(const std::string& subject, const std::vector<BoundingBox>& regions) {
    std::string out;
    for (const auto& b : regions) {
        out += b.label + ": (" + std::to_string(b.x) + ", " + std::to_string(b.y) + ", " + std::to_string(b.w) + ", " +
               std::to_string(b.h) + ")";
        if (b.label == subject)
            out += " <- subject";
        out += '\n';
    }
    if (out.empty())
        return "(no regions found)";
    out.pop_back();
    return out;
}

/// "predicate: target" lines.
inline std::vector<std::pair<std::string, std::string>> parse_target_lines(std::string_view text) {
    std::vector<std::pair<std::string, std::string>> out;
    for (const auto& raw : split_lines(text)) {
        auto line = strip_bullet(raw);
        if (line.empty())
            continue;
        auto colon = line.find(':');
        if (colon == std::string::npos)
            throw ParseError("target line lacks 'predicate: target': " + line);
        auto pred = trim(std::string_view(line).substr(0, colon));
        auto target = trim(std::string_view(line).substr(colon + 1));
        if (pred.empty() || target.empty())
            throw ParseError("target line has an empty side: " + line);
        out.emplace_back(std::move(pred), std::move(target));
    }
    return out;
}

}  // namespace detail

/// Candidate relations of every key entity with relation scores attached; joint scores are not computed here.
inline std::vector<ScoredRelation> detect_relations(Session& session, const PromptSet& prompts, const ImagePtr& image,
                                                    const std::vector<ScoredEntity>& key_entities,
                                                    const std::vector<BoundingBox>& regions) {
    if (key_entities.empty())
        throw PreconditionError("detect_relations: no key entities");

    std::vector<std::string> names;
    for (const auto& e : key_entities)
        names.push_back(e.name);
    const std::string entity_list = detail::join(names, ", ");

    std::vector<ScoredRelation> found;
    for (const auto& subject : key_entities) {
        TemplateVars vars{{"subject", subject.name},
                          {"entity_list", entity_list},
                          {"region_list", detail::region_list(subject.name, regions)}};

        auto predicates = session.complete_parsed(
            BackendRole::vrd_model, {ChatMessage::user(prompts.render("relation_detection", vars), image)},
            [](const std::string& t) { return parse_item_lines(t); });
        if (predicates.empty())
            continue;

        vars["predicates"] = detail::join(predicates, "\n");
        auto targets = session.complete_parsed(
            BackendRole::vrd_model, {ChatMessage::user(prompts.render("relation_targets", vars), image)},
            [](const std::string& t) { return detail::parse_target_lines(t); });

        for (const auto& predicate : predicates) {
            bool resolved = false;
            for (const auto& [pred, target] : targets) {
                if (detail::lower(pred) != detail::lower(predicate))
                    continue;
                resolved = true;
                auto s_r = session.complete_parsed(
                    BackendRole::vrd_model,
                    {ChatMessage::user(prompts.render("relation_judge", {{"subject", subject.name},
                                                                         {"predicate", predicate},
                                                                         {"object", target}}),
                                       image)},
                    [](const std::string& t) { return parse_score(t); });
                found.push_back({subject.name, predicate, target, s_r, 0.0, false});
            }
            if (!resolved)
                session.warn("extraction: no target resolved for '" + subject.name + " " + predicate + "'");
        }
        for (const auto& [pred, target] : targets) {
            if (std::none_of(predicates.begin(), predicates.end(),
                             [&](const auto& p) { return detail::lower(p) == detail::lower(pred); }))
                session.warn("extraction: ignored target for unlisted predicate '" + pred + "'");
        }
    }
    return dedup_relations(std::move(found));
}

/// Computes the joint score of every relation with N = relations held by its subject; sets is_key.
inline std::vector<ScoredRelation> score_relations(const std::vector<ScoredEntity>& entities,
                                                   std::vector<ScoredRelation> relations, const ScoringParams& params) {
    std::map<std::string, std::size_t> per_subject;
    for (const auto& r : relations)
        ++per_subject[r.subject];
    for (auto& r : relations) {
        auto it = std::find_if(entities.begin(), entities.end(), [&](const auto& e) { return e.name == r.subject; });
        if (it == entities.end() || !it->is_key)
            throw PreconditionError("relation subject '" + r.subject + "' is not a key entity");
        r.joint_score = joint_validity_score(it->entity_score, r.relation_score, per_subject[r.subject], params);
        r.is_key = r.joint_score > params.theta_re.value();
    }
    return relations;
}

/// Key relations only, grouped by subject (first-appearance order), joint score descending within a subject.
inline std::vector<ScoredRelation> select_key_relations(const std::vector<ScoredEntity>& entities,
                                                        const std::vector<ScoredRelation>& relations,
                                                        const ScoringParams& params) {
    auto scored = score_relations(entities, relations, params);
    std::vector<std::string> order;
    for (const auto& r : scored)
        if (std::find(order.begin(), order.end(), r.subject) == order.end())
            order.push_back(r.subject);

    std::vector<ScoredRelation> out;
    for (const auto& subject : order) {
        auto first = out.size();
        for (const auto& r : scored)
            if (r.subject == subject && r.is_key)
                out.push_back(r);
        std::stable_sort(out.begin() + static_cast<std::ptrdiff_t>(first), out.end(),
                         [](const auto& a, const auto& b) { return a.joint_score > b.joint_score; });
    }
    return out;
}

// ---------------------------------------------------------------------------
// Description

/// Key entities by descending entity score; each contributes one "subject predicate object." sentence per key
/// relation (descending joint score) or "The image contains X." when it has none.
inline std::string compose_description(const std::vector<ScoredEntity>& key_entities,
                                       const std::vector<ScoredRelation>& key_relations) {
    if (key_entities.empty())
        throw PreconditionError("compose_description: no key entities");

    std::vector<const ScoredEntity*> ordered;
    for (const auto& e : key_entities)
        ordered.push_back(&e);
    std::stable_sort(ordered.begin(), ordered.end(),
                     [](const auto* a, const auto* b) { return a->entity_score > b->entity_score; });

    std::vector<std::string> sentences;
    for (const auto* e : ordered) {
        std::vector<const ScoredRelation*> rels;
        for (const auto& r : key_relations)
            if (r.subject == e->name)
                rels.push_back(&r);
        std::stable_sort(rels.begin(), rels.end(),
                         [](const auto* a, const auto* b) { return a->joint_score > b->joint_score; });
        if (rels.empty())
            sentences.push_back("The image contains " + e->name + ".");
        for (const auto* r : rels)
            sentences.push_back(r->subject + " " + r->predicate + " " + r->object + ".");
    }
    return detail::join(sentences, " ");
}

// ---------------------------------------------------------------------------
// Stage driver

inline ExtractionResult extract(Session& session, const PromptSet& prompts, Grounder& grounder, const ImagePtr& image,
                                const ScoringParams& params, EntityScoring mode = EntityScoring::batched) {
    ExtractionResult result;
    result.entities = extract_entities(session, prompts, image, params, mode);
    auto keys = result.key_entities();
    if (keys.empty())
        throw NoKeyEntities("no entity scored above theta_e = " + std::to_string(params.theta_e.value()));

    std::vector<std::string> names;
    for (const auto& e : keys)
        names.push_back(e.name);
    auto regions = grounder.propose_regions(session, image, names);
    for (auto& e : result.entities) {
        auto it = std::find_if(regions.begin(), regions.end(), [&](const auto& b) { return b.label == e.name; });
        if (it != regions.end())
            e.region = it->region();
    }
    keys = result.key_entities();

    auto candidates = detect_relations(session, prompts, image, keys, regions);
    result.relations = score_relations(result.entities, std::move(candidates), params);
    result.description_d = compose_description(keys, select_key_relations(result.entities, result.relations, params));
    return result;
}

}  // namespace vqa
