"""Shared fixtures: hand-specified identity embeddings and PE validator cases."""

from fractions import Fraction

import numpy as np

from idguide.metrics import EmbeddingSet

# (dimension, frame cosines to the reference); expected score is the exact
# rational mean of max(0, c), written out alongside
IDENTITY_CASES = [
    (2, ["1"], "1"),
    (2, ["0"], "0"),
    (3, ["4/5", "3/5", "-1/5"], "7/15"),
    (3, ["1/2", "1/2"], "1/2"),
    (4, ["-1", "-1/2"], "0"),
    (4, ["1", "0", "-1"], "1/3"),
    (5, ["9/10", "7/10", "3/10", "1/10"], "1/2"),
    (2, ["1/3", "2/3"], "1/2"),
    (3, ["3/4", "-3/4", "1/4", "1/4"], "5/16"),
    (6, ["1/7"] * 7, "1/7"),
    (8, ["99/100", "98/100"], "197/200"),
    (3, ["-1/10", "1/10"], "1/20"),
    (16, ["5/13", "12/13", "0", "1"], "15/26"),
    (2, ["1/8", "3/8", "5/8", "7/8"], "1/2"),
    (5, ["-3/5", "4/5"], "2/5"),
    (10, ["31/100", "29/100", "30/100"], "3/10"),
    (3, ["1", "1", "1", "1", "-1"], "4/5"),
    (7, ["2/9", "-2/9", "4/9"], "2/9"),
    (4, ["6217/10000", "3105/10000"], "4661/10000"),
    (12, ["1/1000"], "1/1000"),
]


def embed_cosines(dim, cosines, seed):
    """Reference and frames in a random orthonormal frame with the given cosines."""
    rng = np.random.default_rng(seed)
    q, _ = np.linalg.qr(rng.normal(size=(dim, dim)))
    ref = q[:, 0]
    frames = []
    for k, c in enumerate(cosines):
        c = float(Fraction(c))
        other = q[:, 1 + k % (dim - 1)]
        frames.append(c * ref + np.sqrt(max(0.0, 1 - c * c)) * other)
    return EmbeddingSet(ref, np.array(frames), "fixture")


def identity_fixtures():
    for i, (dim, cosines, expected) in enumerate(IDENTITY_CASES):
        assert sum(max(Fraction(c), 0) for c in cosines) / len(cosines) == Fraction(expected)
        yield embed_cosines(dim, cosines, i), float(Fraction(expected))


# -- prompt-enhancement validator cases ------------------------------------

SUBJECTS = ["The quarterback", "A marathon runner", "The lifeguard", "A chef", "The violinist"]
ACTIONS = ["sprints across the field", "jogs along the river", "swims past the pier", "stirs a pot of soup", "tunes her instrument"]
CLAUSES = [
    "who has short curly black hair and a square jaw",
    "with deep-set brown eyes and a light beard",
    "who has high cheekbones and freckles",
    "with a round face and thin eyebrows",
    "who has wavy auburn hair and green eyes",
]


def _mutations(prompt):
    words = prompt.split()
    return [
        " ".join(words[:-1] + [words[-1] + "s"]),
        " ".join(words[:-1]),
        prompt.lower(),
        " ".join([words[0], "quickly"] + words[1:]),
        " ".join([words[0], words[1][::-1]] + words[2:]),
    ]


def pe_cases():
    """50 preserved (prompt, enhanced) pairs and 50 pairs whose prompt text was altered."""
    preserved, mutated = [], []
    for i in range(50):
        prompt = f"{SUBJECTS[i % 5]} {ACTIONS[(i // 5) % 5]}"
        clause = CLAUSES[(i * 3 + i // 10) % 5]
        if i % 3 == 0:
            enhanced = f"{prompt}, {clause}."
        elif i % 3 == 1:
            enhanced = f"{prompt} {clause}."
        else:
            enhanced = f"{prompt}  {clause}"
        preserved.append((prompt, enhanced))
        bad = _mutations(prompt)[i % 5]
        assert bad != prompt
        mutated.append((prompt, f"{bad} {clause}."))
    return preserved, mutated
