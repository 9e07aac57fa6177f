"""Deterministic desk-scale corpus synthesizer for tests.

Assembles drug-like SMILES from a deliberately regular template family:
para-substituted benzenes carrying a linker plus a saturated or aromatic
tail, and a slice of phosphonate/phosphate esters so the model sees
phosphorus contexts. The regularity is the point: a small model trained on
a few hundred of these reaches the high per-token confidence that valid
sampling at temperature 1.0 requires, while staying inside the package
grammar (no fused aromatics, no aromatic O/N-H heterocycles) and away from
the shipped structural alerts.
"""

from __future__ import annotations

import random

PREFIXES = ["C", "CC", "CO", "CCO", "F", "Cl", "CC(C)"]

# tails reached through a carbon linker (amide/alkyl), so no N-aryl motifs
N_TAILS = ["N2CCOCC2", "N2CCCCC2", "N2CCN(C)CC2"]
C_TAILS = ["C2CCCCC2", "C2CCOCC2", "C2CCNCC2"]
ARYL_TAILS = ["c2ccccc2", "c2ccc(F)cc2", "c2ccc(Cl)cc2", "c2ccc(C)cc2"]
LIGHT_TAILS = ["F", "Cl", "OC", "CC", "C(C)C"]

PHOSPHO_R = ["C", "CC"]
PHOSPHO_MID = ["OC", "C"]
PHOSPHO_SUB = ["C", "F", "Cl", "OC", "CC"]


def _form_a(rng: random.Random) -> str:
    prefix = rng.choice(PREFIXES)
    kind = rng.randrange(4)
    if kind == 0:
        mid = rng.choice(["C", "CC", "CC(=O)"])
        tail = rng.choice(N_TAILS)
    elif kind == 1:
        mid = rng.choice(["C", "CC", "OC"])
        tail = rng.choice(C_TAILS)
    elif kind == 2:
        mid = rng.choice(["C", "CC", "O"])
        tail = rng.choice(ARYL_TAILS)
    else:
        mid = rng.choice(["C", "OC", "OCC"])
        tail = rng.choice(LIGHT_TAILS)
    return f"{prefix}c1ccc({mid}{tail})cc1"


def _form_phospho(rng: random.Random) -> str:
    r = rng.choice(PHOSPHO_R)
    mid = rng.choice(PHOSPHO_MID)
    sub = rng.choice(PHOSPHO_SUB)
    bridge = rng.choice(["O", "C"])
    return f"{r}OP(=O)({mid}){bridge}c1ccc({sub})cc1"


def make_corpus(n: int, seed: int = 0, phospho_fraction: float = 0.05) -> list[str]:
    """``n`` distinct template molecules, deterministic for a given seed."""
    rng = random.Random(seed)
    out: list[str] = []
    seen: set[str] = set()
    attempts = 0
    while len(out) < n:
        attempts += 1
        if attempts > 200 * n:
            raise RuntimeError("template space exhausted; lower n")
        text = _form_phospho(rng) if rng.random() < phospho_fraction else _form_a(rng)
        if text not in seen:
            seen.add(text)
            out.append(text)
    return out


def write_smi(path, molecules: list[str]) -> None:
    with open(path, "w", encoding="utf-8") as handle:
        for i, text in enumerate(molecules):
            handle.write(f"{text}\tmol-{i}\n")
