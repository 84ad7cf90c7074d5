// SPDX-License-Identifier: Apache-2.0

#include "vqa/reasoning.hpp"
#include "support.hpp"

#include <gtest/gtest.h>

using namespace vqa;
using test::coe_reply;

namespace {

KnowledgeBundle bundle() { return {"girl sitting in front of cake.", "analysis", "A girl with sugar on her face.", false}; }

SolveInput input(std::vector<std::string> refs = {"yes"}) {
    return {"Has the girl eaten the cake?", {}, std::move(refs), test::tiny_png("g.png")};
}

}  // namespace

TEST(Sections, CoeParse) {
    auto r = parse_evidence_answer("Evidence:\n- a\n- b\nReasoning:\n1. s1\n2. s2\nAnswer: yes");
    EXPECT_EQ(r.evidence, (std::vector<std::string>{"a", "b"}));
    EXPECT_EQ(r.steps, (std::vector<std::string>{"s1", "s2"}));
    EXPECT_EQ(r.answer, "yes");
}

TEST(Sections, ToleratesMarkdownAndCase) {
    auto r = parse_evidence_answer("Sure.\n**Evidence:** a fact\n## reasoning:\n- step\nANSWER: No.");
    EXPECT_EQ(r.evidence, std::vector<std::string>{"a fact"});
    EXPECT_EQ(r.steps, std::vector<std::string>{"step"});
    EXPECT_EQ(r.answer, "No.");
}

TEST(Sections, MissingMarkerIsParseError) {
    EXPECT_THROW(parse_evidence_answer("Evidence:\n- a\nAnswer: yes"), ParseError);
    EXPECT_THROW(parse_evidence_answer("Evidence:\nReasoning:\n1. s\nAnswer: yes"), ParseError);
    EXPECT_THROW(parse_evidence_answer("just yes"), ParseError);
}

TEST(Sections, RenderParseRenderIsStable) {
    const std::vector<std::string> replies = {
        "Evidence:\n- a\nReasoning:\n1. b\nAnswer: c",
        "**Evidence:**\n* fact one\n* fact two\n**Reasoning:**\n- step\n**Answer:** The 30.",
        "evidence: inline fact\nreasoning: inline step\nanswer: yes",
    };
    for (const auto& reply : replies) {
        auto once = render_evidence_answer(parse_evidence_answer(reply));
        EXPECT_EQ(render_evidence_answer(parse_evidence_answer(once)), once);
    }
}

TEST(Sections, Reflection) {
    auto n = parse_reflection("Cause: missed the sugar.\nPlan: look at faces.");
    EXPECT_EQ(n.failure_cause, "missed the sugar.");
    EXPECT_EQ(n.plan, "look at faces.");
    EXPECT_THROW(parse_reflection("Cause: x"), ParseError);
}

TEST(Sections, Paraphrase) {
    auto q = parse_paraphrase("Subject: the man on the motorcycle\nContext:\n- smoking\nParaphrase: What is the man "
                              "riding the motorcycle holding?",
                              "What is he holding?");
    EXPECT_EQ(q.subject, "the man on the motorcycle");
    EXPECT_EQ(q.context_snippets, std::vector<std::string>{"smoking"});
    EXPECT_EQ(q.paraphrased, "What is the man riding the motorcycle holding?");

    auto same = parse_paraphrase("Subject: none", "Is it red?");
    EXPECT_TRUE(same.subject.empty());
    EXPECT_EQ(same.paraphrased, "Is it red?");
    EXPECT_THROW(parse_paraphrase("no idea", "q"), ParseError);
}

TEST(Sections, Verdict) {
    EXPECT_EQ(parse_verdict("PASS"), Outcome::pass);
    EXPECT_EQ(parse_verdict("The answer is wrong: fail."), Outcome::fail);
    EXPECT_THROW(parse_verdict("passable"), ParseError);
}

TEST(Evaluate, SelfAssessment) {
    auto backend = test::scripted({{"reasoner", {"Task: self-assessment"}, "FAIL"}});
    auto router = test::route_all(backend);
    Session s(router);
    auto r = evaluate(s, PromptSet::defaults(), "no", {}, RewardMode::self_assessment, {"q", "c", nullptr});
    EXPECT_FALSE(r.passed());
    EXPECT_EQ(r.mode, RewardMode::self_assessment);
    EXPECT_EQ(r.verdict, "FAIL");
}

TEST(Evaluate, ReferenceMatchNeedsNoCall) {
    BackendRouter router;
    Session s(router);
    auto r = evaluate(s, PromptSet::defaults(), "cigarette", {"cigarette"}, RewardMode::reference_match);
    EXPECT_TRUE(r.passed());
    EXPECT_TRUE(s.calls().empty());
}

TEST(Reflect, FallbackAfterUnparseableReplies) {
    auto backend = test::scripted({{"reasoner", {"Task: reflection"}, "hmm"}}, "repeat_last");
    auto router = test::route_all(backend);
    Session s(router);
    ReasoningTrace failed;
    failed.predicted = "no";
    failed.evidence = {"e"};
    failed.steps = {"s"};
    failed.attempt_index = 1;
    auto note = reflect(s, PromptSet::defaults(), {"q", "", {}, "q", false}, "c", failed);
    EXPECT_TRUE(note.fallback);
    EXPECT_TRUE(s.flagged("reflection_fallback"));
    EXPECT_EQ(s.calls().size(), 3u);

    failed.reward.outcome = Outcome::pass;
    EXPECT_THROW(reflect(s, PromptSet::defaults(), {"q", "", {}, "q", false}, "c", failed), PreconditionError);
}

TEST(Solve, FailReflectPass) {
    auto backend = test::scripted({
        {"paraphraser", {"Task: paraphrase"}, "Subject: none"},
        {"reasoner", {"Task: chain-of-evidence", "(none)"}, coe_reply("The cake is on the table.", "No fork.", "no")},
        {"reasoner", {"Task: reflection"}, "Cause: the face was ignored.\nPlan: check the girl's face."},
        {"reasoner", {"Task: chain-of-evidence", "Plan: check the girl's face."},
         coe_reply("Sugar on her face.", "She ate it.", "yes")},
    });
    auto router = test::route_all(backend);
    Session s(router);
    auto r = solve(s, PromptSet::defaults(), input(), bundle(), {});
    EXPECT_TRUE(r.resolved);
    EXPECT_EQ(r.final_answer, "yes");
    ASSERT_EQ(r.traces.size(), 2u);
    ASSERT_EQ(r.notes.size(), 1u);
    EXPECT_EQ(r.notes[0].produced_after_attempt, 1);
    EXPECT_EQ(r.traces[1].attempt_index, 2);
    EXPECT_FALSE(s.flagged("unresolved"));
    EXPECT_EQ(backend->remaining(), 0u);
}

TEST(Solve, AlwaysFailStopsAtBound) {
    auto backend = test::scripted({
        {"paraphraser", {"Task: paraphrase"}, "Subject: none"},
        {"reasoner", {"Task: chain-of-evidence"}, coe_reply("e", "s", "no")},
        {"reasoner", {"Task: reflection"}, "Cause: c\nPlan: p"},
    }, "repeat_last");
    auto router = test::route_all(backend);
    Session s(router);
    auto r = solve(s, PromptSet::defaults(), input(), bundle(), {3, RewardMode::reference_match});
    EXPECT_FALSE(r.resolved);
    EXPECT_EQ(r.traces.size(), 3u);
    EXPECT_EQ(r.notes.size(), 2u);
    EXPECT_TRUE(s.flagged("unresolved"));
    EXPECT_EQ(r.final_answer, "no");
}

TEST(Solve, NotesAccumulateIntoLaterPrompts) {
    auto backend = test::scripted({
        {"paraphraser", {"Task: paraphrase"}, "Subject: none"},
        {"reasoner", {"Task: chain-of-evidence", "(none)"}, coe_reply("e", "s", "a1")},
        {"reasoner", {"Task: reflection"}, "Cause: first\nPlan: one"},
        {"reasoner", {"Task: chain-of-evidence", "Attempt 1:\nCause: first\nPlan: one"}, coe_reply("e", "s", "a2")},
        {"reasoner", {"Task: reflection"}, "Cause: second\nPlan: two"},
        {"reasoner", {"Task: chain-of-evidence", "Plan: one\nAttempt 2:\nCause: second\nPlan: two"},
         coe_reply("e", "s", "a3")},
    });
    auto router = test::route_all(backend);
    Session s(router);
    auto r = solve(s, PromptSet::defaults(), input(), bundle(), {});
    EXPECT_EQ(r.final_answer, "a3");
    EXPECT_EQ(backend->remaining(), 0u);
}

TEST(Solve, FirstAttemptPassSkipsReflection) {
    auto backend = test::scripted({
        {"paraphraser", {"Task: paraphrase"}, "Subject: none"},
        {"reasoner", {"Task: chain-of-evidence"}, coe_reply("e", "s", "Yes.")},
    });
    auto router = test::route_all(backend);
    Session s(router);
    auto r = solve(s, PromptSet::defaults(), input(), bundle(), {});
    EXPECT_EQ(r.traces.size(), 1u);
    EXPECT_TRUE(r.notes.empty());
    EXPECT_TRUE(r.resolved);
}

TEST(Solve, CoeParseFailureAfterTwoReasks) {
    auto backend = test::scripted({
        {"paraphraser", {"Task: paraphrase"}, "Subject: none"},
        {"reasoner", {"Task: chain-of-evidence"}, "Evidence:\n- e\nAnswer: yes"},
    }, "repeat_last");
    auto router = test::route_all(backend);
    Session s(router);
    SolveResult partial;
    try {
        solve(s, PromptSet::defaults(), input(), bundle(), {}, &partial);
        FAIL();
    } catch (const StageError& e) {
        EXPECT_EQ(e.stage(), "reasoning");
        EXPECT_NE(std::string(e.what()).find("parse-error"), std::string::npos);
    }
    EXPECT_TRUE(s.flagged("parse_error"));
    std::size_t coe_calls = 0;
    for (const auto& c : s.calls())
        coe_calls += c.stage == "reasoning";
    EXPECT_EQ(coe_calls, 3u);
    EXPECT_TRUE(partial.traces.empty());
    EXPECT_EQ(partial.question.paraphrased, input().question);
}

TEST(Solve, ParaphraseFallback) {
    auto backend = test::scripted({
        {"paraphraser", {"Task: paraphrase"}, "cannot help"},
        {"reasoner", {"Task: chain-of-evidence"}, coe_reply("e", "s", "yes")},
    }, "repeat_last");
    auto router = test::route_all(backend);
    Session s(router);
    auto r = solve(s, PromptSet::defaults(), input(), bundle(), {});
    EXPECT_TRUE(r.question.fallback);
    EXPECT_EQ(r.question.paraphrased, input().question);
    EXPECT_TRUE(s.flagged("paraphrase_fallback"));
}

TEST(Solve, MultipleChoiceOptionsReachPrompt) {
    auto backend = test::scripted({
        {"paraphraser", {"Task: paraphrase"}, "Subject: none"},
        {"reasoner", {"Task: chain-of-evidence", "Options: red; blue"}, coe_reply("e", "s", "blue")},
    });
    auto router = test::route_all(backend);
    Session s(router);
    SolveInput in{"What color?", {"red", "blue"}, {"blue"}, test::tiny_png("u.png")};
    EXPECT_TRUE(solve(s, PromptSet::defaults(), in, bundle(), {}).resolved);
}

TEST(Solve, RejectsIncompleteKnowledge) {
    BackendRouter router;
    Session s(router);
    EXPECT_THROW(solve(s, PromptSet::defaults(), input(), KnowledgeBundle{}, {}), PreconditionError);
}
