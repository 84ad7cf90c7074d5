#!/usr/bin/env python3
# SPDX-License-Identifier: Apache-2.0
"""Regenerates the scripted 10-sample fixture under tests/fixtures/.

Outputs: images/*.png, dataset.jsonl, boxes.json, scenario.json, config.json,
scenario_fault.json and config_fault.json. Planned outcome: 8 of 10 samples pass.
"""

import json
from pathlib import Path

from PIL import Image

HERE = Path(__file__).resolve().parent
W, H = 64, 48


def sample(sid, qtype, question, refs, *, entities, boxes=None, relations=None, analysis, caption,
           paraphrase, attempts, reflections=(), choices=None, verdicts=None):
    return dict(id=sid, qtype=qtype, question=question, refs=refs, entities=entities, boxes=boxes or {},
                relations=relations or {}, analysis=analysis, caption=caption, paraphrase=paraphrase,
                attempts=attempts, reflections=list(reflections), choices=choices, verdicts=verdicts)


def coe(evidence, steps, answer):
    out = "Evidence:\n" + "".join(f"- {e}\n" for e in evidence) + "Reasoning:\n"
    out += "".join(f"{i}. {s}\n" for i, s in enumerate(steps, 1))
    return out + f"Answer: {answer}"


SAMPLES = [
    # fail, reflect, pass
    sample("s01", "yes_no", "Has the girl eaten the cake?", ["yes"],
           entities={"girl": 0.9, "cake": 0.8, "table": 0.3},
           boxes={"girl": [4, 4, 30, 40], "cake": [36, 24, 20, 14]},
           relations={"girl": [("sitting in front of", "cake", 0.7)], "cake": []},
           analysis="The girl has white sugar on her face, which is a likely result of eating the cake in front of her.",
           caption="A girl with white sugar on her face sits in front of a half-eaten cake.",
           paraphrase="Subject: girl\nContext:\n- a girl with white sugar on her face\nParaphrase: Has the girl with sugar on her face eaten the cake?",
           attempts=[coe(["The cake is on the table."], ["Nobody is holding a fork."], "no"),
                     coe(["The girl has sugar on her face.", "The cake is half eaten."],
                         ["Sugar on the face is a trace of eating the cake."], "yes")],
           reflections=["Cause: The face of the girl was ignored.\nPlan: Check the entities for traces of the action."]),
    # paraphrase disambiguates the subject
    sample("s02", "other", "What is the man holding in his mouth?", ["cigarette", "cigarette", "a cigarette"],
           entities={"man": 0.9, "motorcycle": 0.8, "cigarette": 0.7, "road": 0.3},
           boxes={"man": [10, 2, 24, 30], "motorcycle": [6, 20, 40, 26], "cigarette": [26, 10, 4, 2]},
           relations={"man": [("riding", "motorcycle", 0.8), ("smoking", "cigarette", 0.5)],
                      "motorcycle": [], "cigarette": []},
           analysis="The man rides the motorcycle while smoking, which distracts him and endangers traffic.",
           caption="A man riding a motorcycle on a road holds a lit cigarette in his mouth.",
           paraphrase="Subject: the man riding the motorcycle\nContext:\n- a man riding a motorcycle\n- holds a lit cigarette in his mouth\nParaphrase: What is the man riding the motorcycle holding in his mouth?",
           attempts=[coe(["The man riding the motorcycle has a lit cigarette in his mouth."],
                         ["The object in his mouth is the cigarette."], "A Cigarette.")]),
    sample("s03", "number", "How old is the man?", ["30"],
           entities={"man": 0.8, "cake": 0.7, "candles": 0.6},
           boxes={"man": [2, 2, 28, 44], "cake": [34, 28, 24, 16], "candles": [36, 22, 20, 6]},
           relations={"man": [("celebrating with", "cake", 0.9)], "cake": [("topped with", "candles", 0.9)],
                      "candles": []},
           analysis="The candles on the cake show the age the man is celebrating.",
           caption="A man celebrates his birthday with a cake topped with candles that read thirty years of age.",
           paraphrase="Subject: none",
           attempts=[coe(["The candles read thirty years of age."], ["Thirty is written as 30."], "The 30")]),
    sample("s04", "yes_no", "Is the man getting off the train?", ["yes"],
           entities={"man": 0.9, "train door": 0.7},
           boxes={"man": [20, 4, 20, 40], "train door": [16, 0, 30, 48]},
           relations={"man": [("stepping out of", "train door", 0.9)], "train door": []},
           analysis="The man steps out of the open train door, so he is leaving the train.",
           caption="A man stands at an open train door and steps out onto the platform.",
           paraphrase="Subject: the man at the train door\nContext:\n- stands at an open train door\nParaphrase: Is the man at the train door getting off the train?",
           attempts=[coe(["The man is stepping out of the open door."], ["Stepping out means leaving."], "Yes.")]),
    # no entity clears the entity threshold: degenerate knowledge path
    sample("s05", "other", "What is shown in the picture?", ["sky"],
           entities={"cloud": 0.4, "haze": 0.2},
           analysis="The image shows an empty sky; there are no actors whose behavior leads to an outcome.",
           caption="An empty blue sky with faint haze.",
           paraphrase="Subject: none",
           attempts=[coe(["The whole frame is blue sky."], ["Nothing else is visible."], "the sky")]),
    sample("s06", "multiple_choice", "What color is the umbrella?", ["blue"],
           entities={"umbrella": 0.9, "woman": 0.7},
           boxes={"umbrella": [8, 2, 48, 16], "woman": [20, 12, 20, 34]},
           relations={"umbrella": [], "woman": [("holding", "umbrella", 0.8)]},
           analysis="The woman holds the umbrella to stay dry in the rain.",
           caption="A woman holding a blue umbrella walks in the rain.",
           paraphrase="Subject: none",
           attempts=[coe(["The umbrella is blue."], ["Blue is one of the options."], "blue")],
           choices=["red", "blue", "green"]),
    # no references: self assessment decides
    sample("s07", "unspecified", "Why is the dog wet?", [],
           entities={"dog": 0.9, "lake": 0.6},
           boxes={"dog": [10, 20, 20, 16], "lake": [0, 30, 64, 18]},
           relations={"dog": [("jumping into", "lake", 0.9)], "lake": []},
           analysis="The dog jumps into the lake, which makes its fur wet.",
           caption="A dog jumps into a lake and comes out with wet fur.",
           paraphrase="Subject: none",
           attempts=[coe(["The dog jumped into the lake."], ["Water from the lake soaks the fur."],
                         "it jumped into the lake")],
           verdicts=["PASS"]),
    sample("s08", "number", "How many dogs are on the sofa?", ["2"],
           entities={"dogs": 0.9, "sofa": 0.8},
           boxes={"dogs": [8, 8, 40, 20], "sofa": [0, 10, 64, 30]},
           relations={"dogs": [("lying on", "sofa", 0.9)], "sofa": []},
           analysis="Two dogs lie on the sofa, resting.",
           caption="Two dogs are lying on a grey sofa.",
           paraphrase="Subject: none",
           attempts=[coe(["Two dogs lie on the sofa."], ["Count the dogs: two."], "2")]),
    # never resolved: three failed attempts, two reflections
    sample("s09", "yes_no", "Is the traffic light green?", ["no"],
           entities={"traffic light": 0.9, "car": 0.6},
           boxes={"traffic light": [28, 2, 8, 20], "car": [4, 28, 40, 18]},
           relations={"traffic light": [], "car": [("waiting at", "traffic light", 0.8)]},
           analysis="The car waits at the traffic light, which suggests the light is red.",
           caption="A car waits at a traffic light at dusk.",
           paraphrase="Subject: none",
           attempts=[coe(["A car is on the road."], ["Cars drive on green."], "yes")] * 3,
           reflections=["Cause: The waiting car was ignored.\nPlan: Use the behavior of the car."] * 2),
    # never resolved, and the paraphraser never replies in format
    sample("s10", "other", "What sport is being played?", ["tennis"],
           entities={"player": 0.9, "racket": 0.7},
           boxes={"player": [10, 4, 24, 40], "racket": [30, 10, 12, 12]},
           relations={"player": [("swinging", "racket", 0.8)], "racket": []},
           analysis="The player swings the racket to hit a ball.",
           caption="A player swings a racket on a court.",
           paraphrase=["I am not sure."] * 3,
           attempts=[coe(["A player swings a racket."], ["Rackets are used in badminton."], "badminton")] * 3,
           reflections=["Cause: The court was not examined.\nPlan: Inspect the court markings."] * 2),
]

COLORS = [(200, 80, 80), (80, 200, 80), (80, 80, 200), (200, 200, 80), (80, 200, 200),
          (200, 80, 200), (120, 120, 120), (240, 160, 60), (60, 160, 240), (160, 60, 240)]


# Chain-of-evidence replies in the layouts models tend to produce.
COE_RESPONSES = [
    "Evidence:\n- The girl has sugar on her face.\nReasoning:\n1. Sugar is a trace of eating.\nAnswer: yes",
    "Evidence:\n- a\n- b\nReasoning:\n1. c\n2. d\nAnswer: e",
    "**Evidence:**\n* The man holds a cigarette.\n**Reasoning:**\n- He is smoking.\n**Answer:** A cigarette.",
    "## Evidence:\n- Two dogs lie on the sofa.\n## Reasoning:\n1. Count them.\n## Answer:\n2",
    "evidence: the light is red\nreasoning: cars wait at red lights\nanswer: no",
    "Sure, here is my analysis.\nEvidence:\n- The candles read thirty.\nReasoning:\n1. Thirty is 30.\nAnswer: 30",
    "Evidence:\n1. The umbrella is blue.\nReasoning:\n1. Blue is an option.\nAnswer: blue",
    "EVIDENCE:\n- The man steps out of the door.\nREASONING:\n- Stepping out means leaving.\nANSWER: yes",
    "Evidence: The sky fills the frame.\nReasoning: Nothing else is visible.\nAnswer: the sky",
    "Evidence:\n-   spaced bullet   \nReasoning:\n1)   spaced step\nAnswer:    spaced answer   ",
    "Evidence:\n- The player swings a racket.\n- The court has a net.\nReasoning:\n1. Rackets and nets mean tennis.\n2. The court is clay.\nAnswer: tennis",
    "Evidence:\n- fact\n\nReasoning:\n\n1. step\n\nAnswer: yes",
    "Evidence:\r\n- windows line endings\r\nReasoning:\r\n1. still parsed\r\nAnswer: ok",
    "**Evidence**: bold marker with colon outside\n**Reasoning**: step\n**Answer**: fine",
    "Evidence:\n- The dog is wet.\nReasoning:\n1. It jumped into the lake.\nAnswer: it jumped into the lake",
    "Evidence:\n- Only one bus is visible.\nReasoning:\n1. One.\nAnswer: 1",
    "Evidence:\n- x: y\nReasoning:\n1. colon: inside text\nAnswer: time: noon",
    "Evidence:\n- The woman holds a phone to her ear.\nReasoning:\n1. Holding a phone to the ear means a call.\nAnswer: talking on the phone",
    "Evidence:\n- The table has plates.\nReasoning:\n1. Plates suggest a meal.\nAnswer:\nhaving dinner",
    "# Evidence:\n+ plus-sign bullet\nReasoning:\n1. numbered\nAnswer: done.",
]


def entry(role, match, response):
    return {"role": role, "match": match, "response": response}


def scenario_for(s):
    img = f"<image:{s['id']}.png>"
    out = [entry("vrd_model", ["Task: entity-extraction", img],
                 "\n".join(f"{n}: {v}" for n, v in s["entities"].items()))]
    for subj, rels in s["relations"].items():
        subj_tag = f"Subject: {subj}\n"
        if not rels:
            out.append(entry("vrd_model", ["Task: relation-detection", subj_tag, img], "none"))
            continue
        out.append(entry("vrd_model", ["Task: relation-detection", subj_tag, img],
                         "\n".join(f"- {p}" for p, _, _ in rels)))
        out.append(entry("vrd_model", ["Task: relation-targets", subj_tag, img],
                         "\n".join(f"{p}: {o}" for p, o, _ in rels)))
        for p, o, score in rels:
            out.append(entry("vrd_model", ["Task: relation-judge", f"Relationship: {subj} | {p} | {o}", img],
                             f"Score: {score}"))
    out.append(entry("analyzer_ga", ["Task: causal-analysis", img], s["analysis"]))
    out.append(entry("captioner_gc", ["Task: detailed-caption", img], s["caption"]))
    para = s["paraphrase"] if isinstance(s["paraphrase"], list) else [s["paraphrase"]]
    out += [entry("paraphraser", ["Task: paraphrase", img], p) for p in para]
    out += [entry("reasoner", ["Task: chain-of-evidence", img], a) for a in s["attempts"]]
    out += [entry("reasoner", ["Task: reflection", img], r) for r in s["reflections"]]
    out += [entry("reasoner", ["Task: self-assessment", img], v) for v in (s["verdicts"] or [])]
    return out


def write_json(path, doc):
    path.write_text(json.dumps(doc, indent=2) + "\n")


def main():
    images = HERE / "images"
    images.mkdir(exist_ok=True)
    rows, boxes, entries = [], {}, []
    for s, color in zip(SAMPLES, COLORS):
        name = f"{s['id']}.png"
        Image.new("RGB", (W, H), color).save(images / name, optimize=False)
        row = {"id": s["id"], "image": f"images/{name}", "question": s["question"],
               "question_type": s["qtype"], "references": s["refs"]}
        if s["choices"]:
            row["choices"] = s["choices"]
        rows.append(row)
        if s["boxes"]:
            boxes[name] = [dict(label=k, x=v[0], y=v[1], w=v[2], h=v[3]) for k, v in s["boxes"].items()]
        entries += scenario_for(s)

    (HERE / "dataset.jsonl").write_text("".join(json.dumps(r) + "\n" for r in rows))
    write_json(HERE / "boxes.json", boxes)
    write_json(HERE / "scenario.json", {"exhaustion": "error", "entries": entries})

    # s08 loses its chain-of-evidence reply: that sample fails, the rest complete.
    fault = [e for e in entries
             if not ("<image:s08.png>" in e["match"] and "Task: chain-of-evidence" in e["match"])]
    write_json(HERE / "scenario_fault.json", {"exhaustion": "error", "entries": fault})

    write_json(HERE / "coe_responses.json", COE_RESPONSES)

    config = {
        "backends": {"default": {"kind": "scripted", "script": "scenario.json"}},
        "grounder": {"fixture": "boxes.json"},
        "thresholds": {"gamma": 0.1, "alpha": 4, "theta_e": 0.5, "theta_re": 0.55, "tau": 0.6},
        "reasoner": {"max_reflections": 3, "evaluation_mode": "auto"},
        "prompts": {"dir": "../../prompts"},
        "run": {"concurrency": 4, "metric": "exact"},
    }
    write_json(HERE / "config.json", config)
    config["backends"]["default"]["script"] = "scenario_fault.json"
    write_json(HERE / "config_fault.json", config)


if __name__ == "__main__":
    main()
