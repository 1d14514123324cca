#!/usr/bin/env python3
"""Generate the bundled demo corpus of emergency-department visits.

Writes visits.jsonl, anchors.json, labels.json and noise.json into the output
directory. Anchors are dispensed medications or chief-complaint keywords that
fire with known rates given the billing-code label, so noise.json holds the
exact corruption rates of the generated corpus.
"""

import argparse
import json
import pathlib
import random

# name: (prior, billing codes, anchor tokens, p(anchor | on), p(anchor | off),
#        characteristic words, medications)
CONDITIONS = {
    "abdominal pain acute": (0.10, ["789.0*"], ["meddisp:ONDANSETRON"], 0.70, 0.02,
                             ["abd pain", "nausea", "vomiting", "days", "ruq", "tender"], ["FAMOTIDINE"]),
    "alcohol acute": (0.08, ["303.0*", "305.0*"], ["etoh"], 0.75, 0.01,
                      ["sober", "intoxicated", "found", "admits", "slurred speech"], ["THIAMINE"]),
    "allergic reaction acute": (0.04, ["995.3"], ["meddisp:DIPHENHYDRAMINE"], 0.80, 0.02,
                                ["hives", "itching", "swelling", "rash", "lip"], ["FAMOTIDINE"]),
    "asthma-copd acute": (0.06, ["493*", "491.21"], ["meddisp:ALBUTEROL"], 0.85, 0.03,
                          ["sob", "wheezing", "cough", "nebs", "inhaler"], ["METHYLPREDNISOLONE"]),
    "back pain acute": (0.06, ["724*"], ["lbp"], 0.70, 0.02,
                        ["lumbar", "lifting", "radiating", "spasm", "paraspinal"], ["CYCLOBENZAPRINE"]),
    "cellulitis acute": (0.05, ["682*"], ["meddisp:CEPHALEXIN"], 0.70, 0.02,
                         ["redness", "warmth", "swelling", "erythema", "leg"], ["CLINDAMYCIN"]),
    "cva acute": (0.02, ["434*", "436"], ["meddisp:ALTEPLASE"], 0.40, 0.001,
                  ["weakness", "facial droop", "slurred speech", "neuro", "stroke"], []),
    "epistaxis acute": (0.02, ["784.7"], ["epistaxis"], 0.85, 0.01,
                        ["nosebleed", "packing", "bleeding", "nare"], ["OXYMETAZOLINE"]),
    "fall acute": (0.08, ["E888*"], ["fall"], 0.80, 0.02,
                   ["fell", "slipped", "tripped", "head", "loc"], []),
    "gi bleed acute": (0.03, ["578*"], ["meddisp:PANTOPRAZOLE"], 0.60, 0.02,
                       ["melena", "bloody stool", "hematemesis", "guaiac", "coffee ground"], []),
    "headache acute": (0.06, ["784.0"], ["headache"], 0.75, 0.03,
                       ["photophobia", "migraine", "throbbing", "head"], ["METOCLOPRAMIDE"]),
    "hematuria acute": (0.02, ["599.7*"], ["hematuria"], 0.75, 0.01,
                        ["urine", "urology", "flank pain", "blood", "clots"], []),
    "intracranial hemorrhage acute": (0.01, ["430", "431", "432*"], ["meddisp:NICARDIPINE"], 0.50, 0.002,
                                      ["head ct", "bleed", "neurosurgery", "confused"], []),
    "kidney stone acute": (0.03, ["592*"], ["meddisp:TAMSULOSIN"], 0.65, 0.005,
                           ["flank pain", "colicky", "urine", "strain"], ["KETOROLAC"]),
    "vehicle collision acute": (0.04, ["E81*"], ["mvc"], 0.85, 0.01,
                                ["car", "driver", "hit", "neck", "restrained", "airbag"], []),
    "pneumonia acute": (0.05, ["486", "481"], ["meddisp:LEVOFLOXACIN"], 0.65, 0.02,
                        ["cough", "fever", "infiltrate", "sputum", "cxr"], ["CEFTRIAXONE"]),
    "severe sepsis acute": (0.02, ["995.92"], ["meddisp:VANCOMYCIN"], 0.70, 0.02,
                            ["hypotension", "lactate", "fever", "fluids", "tachycardic"], ["PIPERACILLIN"]),
    "sexual assault acute": (0.01, ["V71.5"], ["assault"], 0.85, 0.01,
                             ["police", "kit", "sane", "advocate"], []),
    "suicidal ideation acute": (0.03, ["V62.84"], ["si"], 0.80, 0.01,
                                ["depressed", "psych", "plan", "sitter", "overdose"], []),
    "syncope acute": (0.04, ["780.2"], ["syncope"], 0.80, 0.01,
                      ["passed out", "dizzy", "lightheaded", "ekg", "orthostatic"], []),
    "uti acute": (0.07, ["599.0"], ["meddisp:NITROFURANTOIN"], 0.70, 0.02,
                  ["dysuria", "frequency", "urine", "burning"], ["CIPROFLOXACIN"]),
    "liver history": (0.04, ["571*"], ["medhx:LACTULOSE"], 0.60, 0.005,
                      ["cirrhosis", "ascites", "hepatology", "jaundice"], ["SPIRONOLACTONE"]),
    "hiv history": (0.02, ["042", "V08"], ["medhx:TRUVADA"], 0.70, 0.002,
                    ["cd4", "viral load", "id clinic"], ["RITONAVIR"]),
}

BACKGROUND = ["pain", "patient", "ed", "male", "female", "pt", "denies", "vitals",
              "stable", "history", "exam", "normal", "today", "well", "appearing"]
NEGATABLE = ["chest pain", "fever", "vomiting", "loc", "head strike", "sob",
             "abd pain", "headache", "weakness", "bleeding"]
STOPS = ["but", "and", "reports", "states", "complains of", "has"]
TRIGGERS = ["no", "not", "denies", "without", "unable to", "non"]


def visit(rng, k):
    on = [c for c, spec in CONDITIONS.items() if rng.random() < spec[0]]
    if not on:
        on = [rng.choice(list(CONDITIONS))]
    complaints, sentences, meds_disp, meds_hx, codes = [], [], set(), set(), []
    for name, (_, bill, anchors, p1, p0, words, meds) in CONDITIONS.items():
        present = name in on
        if present:
            code = rng.choice(bill)
            codes.append(code[:-1] + "1" if code.endswith("*") else code)
            picked = [w for w in words if rng.random() < 0.45]
            if picked:
                sentences.append(" ".join(picked))
            for med in meds:
                if rng.random() < 0.5:
                    meds_disp.add(med)
        if rng.random() < (p1 if present else p0):
            token = rng.choice(anchors)
            if token.startswith("meddisp:"):
                meds_disp.add(token.split(":", 1)[1])
            elif token.startswith("medhx:"):
                meds_hx.add(token.split(":", 1)[1])
            else:
                complaints.append(token)
    for _ in range(rng.randint(1, 3)):
        sentences.append(f"{rng.choice(TRIGGERS)} {rng.choice(NEGATABLE)} "
                         f"{rng.choice(STOPS)} {rng.choice(BACKGROUND)}")
    sentences.append(" ".join(rng.sample(BACKGROUND, rng.randint(2, 5))))
    rng.shuffle(sentences)
    if rng.random() < 0.3:
        sentences.append("- " + rng.choice(NEGATABLE))
    age = rng.randint(18, 95)
    return {
        "id": f"demo{k:05d}",
        "age": age,
        "sex": rng.choice(["M", "F"]),
        "chief_complaint": ". ".join(complaints),
        "triage": rng.choice(["", "ambulatory", "ems", "wheelchair"]),
        "md_comments": ". ".join(sentences) + ".",
        "medication_history": sorted(meds_hx),
        "dispensed_medications": sorted(meds_disp),
        "billing_codes": codes,
    }


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--out", default="data/demo")
    ap.add_argument("--visits", type=int, default=4000)
    ap.add_argument("--seed", type=int, default=7)
    args = ap.parse_args()
    out = pathlib.Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    rng = random.Random(args.seed)
    names = sorted(CONDITIONS)
    with open(out / "visits.jsonl", "w") as f:
        for k in range(args.visits):
            f.write(json.dumps(visit(rng, k)) + "\n")
    (out / "anchors.json").write_text(json.dumps(
        {c: CONDITIONS[c][2] for c in names}, indent=1) + "\n")
    (out / "labels.json").write_text(json.dumps(
        {c: CONDITIONS[c][1] for c in names}, indent=1) + "\n")
    (out / "noise.json").write_text(json.dumps(
        [{"p_a1_y1": CONDITIONS[c][3], "p_a1_y0": CONDITIONS[c][4]} for c in names],
        indent=1) + "\n")


if __name__ == "__main__":
    main()
