#pragma once

// SPDX-License-Identifier: Apache-2.0

/**
 * @file core.hpp
 * @brief Domain types and pure scoring math shared by every pipeline stage.
 *
 * Everything here is a pure function over immutable values: the joint
 * entity-relation validity score, strict threshold filtering, the
 * distillation loss over supplied token log-probabilities, answer
 * normalization and the exact-match reward.
 */

#include "vqa/error.hpp"

#include <algorithm>
#include <cctype>
#include <cmath>
#include <optional>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

namespace vqa {

/// A validity score on the closed unit interval.
class ValidityScore {
public:
    constexpr ValidityScore() = default;

    explicit ValidityScore(double value) : value_(value) {
        if (!(value >= 0.0 && value <= 1.0))  // also rejects NaN
            throw PreconditionError("validity score out of [0,1]: " + std::to_string(value));
    }

    constexpr double value() const noexcept { return value_; }

    friend constexpr bool operator==(ValidityScore, ValidityScore) = default;
    friend constexpr auto operator<=>(ValidityScore, ValidityScore) = default;

private:
    double value_ = 0.0;
};

/// Hyperparameters of relation scoring and candidate filtering.
struct ScoringParams {
    double gamma = 0.1;
    int alpha = 4;
    ValidityScore theta_e{0.5};
    ValidityScore theta_re{0.55};
    ValidityScore tau{0.6};

    /// Throws on alpha < 1 or a non-finite gamma.
    void validate() const {
        if (alpha < 1)
            throw ConfigError("alpha must be >= 1, got " + std::to_string(alpha));
        if (!std::isfinite(gamma))
            throw ConfigError("gamma must be finite");
    }

    /// gamma inside the recommended open band (0.05, 0.2). Outside is legal but warned about.
    bool gamma_in_recommended_band() const noexcept { return gamma > 0.05 && gamma < 0.2; }
};

struct Region {
    int x = 0;
    int y = 0;
    int w = 0;
    int h = 0;

    friend bool operator==(const Region&, const Region&) = default;
};

struct ScoredEntity {
    std::string name;
    std::optional<Region> region;
    ValidityScore entity_score;
    bool is_key = false;

    friend bool operator==(const ScoredEntity&, const ScoredEntity&) = default;
};

struct ScoredRelation {
    std::string subject;
    std::string predicate;
    std::string object;
    ValidityScore relation_score;
    double joint_score = 0.0;
    bool is_key = false;

    friend bool operator==(const ScoredRelation&, const ScoredRelation&) = default;
};

/// Preliminary description, analysis report and detailed caption for one image.
struct KnowledgeBundle {
    std::string description_d;
    std::string analysis_a;
    std::string caption_c;
    bool degenerate = false;  // description is empty because no key entity survived extraction

    bool complete() const noexcept { return !caption_c.empty(); }

    friend bool operator==(const KnowledgeBundle&, const KnowledgeBundle&) = default;
};

/// Per-token log-probabilities of a target sequence; every entry is <= 0.
class TokenLogProbs {
public:
    TokenLogProbs() = default;

    explicit TokenLogProbs(std::vector<double> values) : values_(std::move(values)) {
        for (std::size_t i = 0; i < values_.size(); ++i) {
            if (!(values_[i] <= 0.0))
                throw PreconditionError("token " + std::to_string(i) +
                                        " is not a log-probability: " + std::to_string(values_[i]));
        }
    }

    const std::vector<double>& values() const noexcept { return values_; }
    std::size_t size() const noexcept { return values_.size(); }

private:
    std::vector<double> values_;
};

enum class Outcome { pass, fail };
enum class RewardMode { reference_match, self_assessment };

struct RewardSignal {
    Outcome outcome = Outcome::fail;
    std::optional<std::string> matched_reference;  // reference_match mode only
    RewardMode mode = RewardMode::reference_match;
    std::optional<std::string> verdict;  // raw PASS/FAIL token in self_assessment mode
    std::optional<std::string> flag;     // degenerate evaluation, e.g. "no_references"

    bool passed() const noexcept { return outcome == Outcome::pass; }

    friend bool operator==(const RewardSignal&, const RewardSignal&) = default;
};

inline std::string_view to_string(Outcome o) { return o == Outcome::pass ? "pass" : "fail"; }

inline std::string_view to_string(RewardMode m) {
    return m == RewardMode::reference_match ? "reference_match" : "self_assessment";
}

// ---------------------------------------------------------------------------
// Scoring

/// Relation weight 1 + gamma * (alpha - n), clamped below at 0.
inline double relation_weight(std::size_t n_relations, const ScoringParams& params) noexcept {
    double raw = 1.0 + params.gamma * (static_cast<double>(params.alpha) - static_cast<double>(n_relations));
    return std::max(0.0, raw);
}

/// Joint entity-relation validity: entity score * weight(n) * relation score.
inline double joint_validity_score(ValidityScore entity_score, ValidityScore relation_score, std::size_t n_relations,
                                   const ScoringParams& params) noexcept {
    return entity_score.value() * relation_weight(n_relations, params) * relation_score.value();
}

/// Keeps items whose score is strictly greater than tau, preserving order.
template <typename T>
std::vector<T> filter_by_threshold(const std::vector<std::pair<T, ValidityScore>>& candidates, ValidityScore tau) {
    std::vector<T> kept;
    for (const auto& [item, score] : candidates) {
        if (score.value() > tau.value())
            kept.push_back(item);
    }
    return kept;
}

/// Negative log-likelihood of a target sequence: -sum(logprobs).
inline double distillation_loss(const TokenLogProbs& logprobs) {
    double sum = 0.0;
    for (double lp : logprobs.values())
        sum += lp;
    return sum == 0.0 ? 0.0 : -sum;
}

inline double distillation_loss(const std::vector<double>& logprobs) {
    return distillation_loss(TokenLogProbs(logprobs));
}

// ---------------------------------------------------------------------------
// Answers

namespace detail {

inline bool is_space(char c) noexcept { return std::isspace(static_cast<unsigned char>(c)) != 0; }

inline bool is_terminal_punct(char c) noexcept {
    return c == '.' || c == ',' || c == '!' || c == '?' || c == ';' || c == ':';
}

inline std::string normalize_once(std::string_view raw) {
    std::string out;
    out.reserve(raw.size());
    bool pending_space = false;
    for (char c : raw) {
        if (is_space(c)) {
            pending_space = !out.empty();
            continue;
        }
        if (pending_space) {
            out.push_back(' ');
            pending_space = false;
        }
        out.push_back(static_cast<char>(std::tolower(static_cast<unsigned char>(c))));
    }

    while (!out.empty() && (is_terminal_punct(out.back()) || is_space(out.back())))
        out.pop_back();

    for (std::string_view article : {"a ", "an ", "the "}) {
        if (out.size() > article.size() && out.starts_with(article)) {
            out.erase(0, article.size());
            break;
        }
    }
    return out;
}

}  // namespace detail

/// Canonical form used for exact answer matching. Idempotent.
inline std::string normalize_answer(std::string_view raw) {
    std::string current = detail::normalize_once(raw);
    for (;;) {
        std::string next = detail::normalize_once(current);
        if (next == current)
            return current;
        current = std::move(next);
    }
}

/// Exact-match reward: pass iff the normalized prediction equals some normalized reference.
inline RewardSignal reference_match_reward(std::string_view predicted, const std::vector<std::string>& references) {
    RewardSignal reward;
    reward.mode = RewardMode::reference_match;
    if (references.empty()) {
        reward.flag = "no_references";
        return reward;
    }
    const std::string norm = normalize_answer(predicted);
    for (const auto& ref : references) {
        if (normalize_answer(ref) == norm) {
            reward.outcome = Outcome::pass;
            reward.matched_reference = ref;
            break;
        }
    }
    return reward;
}

}  // namespace vqa
