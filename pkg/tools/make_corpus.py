#!/usr/bin/env python3
"""Generate the bundled training corpus (data/corpus.txt).

Produces deterministic synthetic English-like prose: templated sentences
over a fixed word bank with Zipf-weighted sampling, assembled into titled
sections and paragraphs. The output carries the byte- and word-level
statistics a small byte-level LM needs (spelling, punctuation, function-word
grammar) without shipping any third-party text; the generated file is
dedicated to the public domain (CC0).

Usage: python tools/make_corpus.py [--size-mb 4.8] [--seed 20240501] [--out data/corpus.txt]
"""

import argparse
import random
from pathlib import Path

NOUNS = """
time year way day thing man world life hand part child eye woman place work
week case point company number group problem fact harbor garden machine river
window mountain signal letter market silence engine shadow journey teacher
door stone bridge forest island village winter summer morning evening road
music picture paper circle farmer sailor doctor library tower valley meadow
lantern compass anchor barrel craft voyage mill bird horse wheat copper iron
clock candle map chart crew storm coast harvest orchard cellar attic bell
""".split()

VERBS_TRANS = """
take see make find give tell ask follow carry build watch bring hold write
read open close measure gather repair draw paint study count trade mend
plant lift borrow return remember forget describe observe collect deliver
""".split()

VERBS_INTRANS = """
go come look wait stand sit run walk sleep rise fall travel listen sing
arrive depart rest wander drift settle bloom fade shine echo tremble
""".split()

ADJECTIVES = """
good new first last long great little old big high small large young early
quiet bright narrow distant heavy gentle ancient careful broad pale crooked
steady patient curious clever plain rough smooth golden silver wooden green
""".split()

ADVERBS = """
slowly quickly quietly carefully nearly almost often rarely soon finally
gently barely suddenly calmly patiently briefly plainly early late together
""".split()

NAMES = """
Abel Clara Edmund Greta Hollis Ingrid Jasper Lena Marit Nils Oskar Petra
Quinn Ruth Soren Thea Ulf Vera Wendel Ada Bram Cora Dagny Elias
""".split()

PLACES = """
Northfield Ashford Brinmore Calder Dunwick Eastmere Fallow Grenholm Harwick
Ivydale Juniper Kilbride Larkspur Millbrook Norwood Oakhaven
""".split()

PREPS = "of in to for with on at by from over under across behind beyond near".split()
DETS = "the a the the his her their this that each every the the".split()
CONJ = "and but so yet although because while when after before until".split()


def zipf_choice(rng, items):
    """Zipf-weighted pick: early list entries are proportionally more common."""
    n = len(items)
    r = rng.random()
    total = sum(1.0 / (i + 1) for i in range(n))
    acc = 0.0
    for i, item in enumerate(items):
        acc += 1.0 / (i + 1) / total
        if r <= acc:
            return item
    return items[-1]


class Prose:
    def __init__(self, seed):
        self.rng = random.Random(seed)

    def noun_phrase(self):
        rng = self.rng
        det = rng.choice(DETS)
        parts = [det]
        if rng.random() < 0.45:
            parts.append(zipf_choice(rng, ADJECTIVES))
        parts.append(zipf_choice(rng, NOUNS))
        if rng.random() < 0.25:
            parts += [rng.choice(PREPS), rng.choice(DETS), zipf_choice(rng, NOUNS)]
        return " ".join(parts)

    def clause(self):
        rng = self.rng
        subject = rng.choice(NAMES) if rng.random() < 0.3 else self.noun_phrase()
        if rng.random() < 0.55:
            verb = zipf_choice(rng, VERBS_TRANS)
            tail = self.noun_phrase()
            if rng.random() < 0.3:
                tail += f" {rng.choice(PREPS)} {self.noun_phrase()}"
            core = f"{subject} {self.past(verb)} {tail}"
        else:
            verb = zipf_choice(rng, VERBS_INTRANS)
            core = f"{subject} {self.past(verb)}"
            if rng.random() < 0.5:
                core += f" {rng.choice(PREPS)} {self.noun_phrase()}"
        if rng.random() < 0.35:
            core += f" {zipf_choice(rng, ADVERBS)}"
        return core

    @staticmethod
    def past(verb):
        irregular = {
            "take": "took", "see": "saw", "make": "made", "find": "found",
            "give": "gave", "tell": "told", "go": "went", "come": "came",
            "hold": "held", "write": "wrote", "read": "read", "draw": "drew",
            "bring": "brought", "build": "built", "sit": "sat", "stand": "stood",
            "run": "ran", "sleep": "slept", "rise": "rose", "fall": "fell",
            "sing": "sang", "forget": "forgot",
        }
        if verb in irregular:
            return irregular[verb]
        if verb.endswith("e"):
            return verb + "d"
        if verb.endswith("y") and verb[-2] not in "aeiou":
            return verb[:-1] + "ied"
        return verb + "ed"

    def sentence(self):
        rng = self.rng
        s = self.clause()
        while rng.random() < 0.3:
            s += f" {rng.choice(CONJ)} {self.clause()}"
        if rng.random() < 0.08:
            s += f", {rng.choice(ADVERBS)} enough"
        s = s[0].upper() + s[1:]
        end = rng.random()
        if end < 0.05:
            s += "?"
        elif end < 0.08:
            s += "!"
        else:
            s += "."
        if rng.random() < 0.06:
            speaker = rng.choice(NAMES)
            s = f'"{s}" said {speaker}.'
        return s

    def paragraph(self):
        n = self.rng.randint(3, 8)
        return " ".join(self.sentence() for _ in range(n))

    def section(self, index):
        rng = self.rng
        title = f"{index}. {rng.choice(['On', 'Concerning', 'Notes from', 'The matter of'])} " \
                f"{rng.choice(PLACES)}"
        year = rng.randint(1801, 1899)
        head = f"\n\n{title} ({year})\n\n"
        body = "\n\n".join(self.paragraph() for _ in range(rng.randint(4, 9)))
        return head + body


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--size-mb", type=float, default=4.8)
    ap.add_argument("--seed", type=int, default=20240501)
    ap.add_argument("--out", default="data/corpus.txt")
    args = ap.parse_args()

    prose = Prose(args.seed)
    target = int(args.size_mb * 1024 * 1024)
    chunks, total, section = [], 0, 1
    while total < target:
        s = prose.section(section)
        chunks.append(s)
        total += len(s.encode())
        section += 1
    text = "".join(chunks).lstrip() + "\n"
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    out.write_text(text, encoding="utf-8")
    print(f"wrote {out} ({out.stat().st_size / 1e6:.2f} MB, {section - 1} sections)")


if __name__ == "__main__":
    main()
