"""SMILES tokenizer, parser, valence checker and substructure matcher.

The grammar is deliberately small: organic-subset atoms (B C N O P S F Cl
Br I), aromatic lowercase forms (b c n o p s), explicit bonds ``- = #``,
branches, ring-bond digits (``1``-``9`` and ``%NN``), and bracket atoms.
Stereo markers (``/``, ``\\``, ``@``) and isotope prefixes are accepted on
input and discarded when the molecular graph is built, so corpus lines
that carry them still round-trip as text.

Aromaticity is trusted from the input (lowercase symbols); no perception
or kekulization is attempted. An aromatic bond contributes 1.5 to an
atom's bond-order sum and the per-atom total is rounded up.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from enum import Enum

from opforge.errors import (
    DanglingBond,
    EmptyInput,
    PatternTooLarge,
    SingleFragmentOnly,
    SpecialTokenPresent,
    UnknownCharacter,
    UnmatchedParenthesis,
    UnmatchedRingBond,
    UnterminatedBracket,
)

ORGANIC_ELEMENTS = ("Cl", "Br", "B", "C", "N", "O", "P", "S", "F", "I")
AROMATIC_ELEMENTS = ("b", "c", "n", "o", "p", "s")
BOND_ORDERS = {"-": 1, "=": 2, "#": 3}

# Maximum bond-order sums an element may carry (multi-valent P and S list
# every admissible state).
ALLOWED_VALENCES: dict[str, tuple[int, ...]] = {
    "B": (3,),
    "C": (4,),
    "N": (3,),
    "O": (2,),
    "P": (3, 5),
    "S": (2, 4, 6),
    "F": (1,),
    "Cl": (1,),
    "Br": (1,),
    "I": (1,),
}

PAD_TEXT = "PAD"
BOS_TEXT = "BOS"
EOS_TEXT = "EOS"

PAD_ID = 0
BOS_ID = 1
EOS_ID = 2


class TokenKind(Enum):
    ATOM = "atom"
    AROMATIC_ATOM = "aromatic-atom"
    BRACKET_ATOM = "bracket-atom"
    BOND = "bond"
    BRANCH_OPEN = "branch-open"
    BRANCH_CLOSE = "branch-close"
    RING_BOND = "ring-bond"
    SPECIAL = "special"


@dataclass(frozen=True)
class Token:
    text: str
    kind: TokenKind

    def is_atom(self) -> bool:
        return self.kind in (
            TokenKind.ATOM,
            TokenKind.AROMATIC_ATOM,
            TokenKind.BRACKET_ATOM,
        )

    def element(self) -> str | None:
        """Element symbol carried by this token, or None for non-atoms."""
        if self.kind is TokenKind.ATOM:
            return self.text
        if self.kind is TokenKind.AROMATIC_ATOM:
            return self.text.upper()
        if self.kind is TokenKind.BRACKET_ATOM:
            return _decode_bracket(self.text, 0)[0]
        return None


PAD = Token(PAD_TEXT, TokenKind.SPECIAL)
BOS = Token(BOS_TEXT, TokenKind.SPECIAL)
EOS = Token(EOS_TEXT, TokenKind.SPECIAL)
SPECIAL_TOKENS = (PAD, BOS, EOS)


def _decode_bracket(text: str, position: int) -> tuple[str, bool, int, int]:
    """Decode a ``[...]`` atom token.

    Returns (element, aromatic, explicit_h, charge). Isotope digits and
    chirality marks are validated and dropped. ``position`` is the offset
    of the opening bracket in the original string, used for error
    reporting.

    Raises:
        UnknownCharacter: on anything outside the supported bracket grammar.
    """
    body = text[1:-1]
    i = 0
    n = len(body)

    def bad(offset: int) -> UnknownCharacter:
        return UnknownCharacter("unsupported bracket-atom syntax", position + 1 + offset)

    while i < n and body[i].isdigit():  # isotope, discarded
        i += 1
    element = None
    aromatic = False
    for sym in ORGANIC_ELEMENTS:
        if body.startswith(sym, i):
            element = sym
            break
    if element is None:
        for sym in AROMATIC_ELEMENTS:
            if body.startswith(sym, i):
                element = sym.upper()
                aromatic = True
                break
    if element is None:
        raise bad(i)
    i += len(element) if not aromatic else 1

    while i < n and body[i] == "@":  # chirality, discarded
        i += 1

    explicit_h = 0
    if i < n and body[i] == "H":
        i += 1
        digits = ""
        while i < n and body[i].isdigit():
            digits += body[i]
            i += 1
        explicit_h = int(digits) if digits else 1

    charge = 0
    if i < n and body[i] in "+-":
        sign = 1 if body[i] == "+" else -1
        symbol = body[i]
        i += 1
        if i < n and body[i].isdigit():
            digits = ""
            while i < n and body[i].isdigit():
                digits += body[i]
                i += 1
            charge = sign * int(digits)
        else:
            charge = sign
            while i < n and body[i] == symbol:
                charge += sign
                i += 1
    if i != n:
        raise bad(i)
    return element, aromatic, explicit_h, charge


def tokenize(smiles: str) -> list[Token]:
    """Segment a SMILES string into tokens by greedy longest match.

    Two-letter elements (Cl, Br) win over their one-letter prefixes, and a
    bracket atom is a single token from ``[`` to its matching ``]``.

    Raises:
        UnknownCharacter: character (or bracket content) outside the grammar.
        UnterminatedBracket: ``[`` with no closing ``]``.
    """
    tokens: list[Token] = []
    i = 0
    n = len(smiles)
    while i < n:
        ch = smiles[i]
        if ch == "[":
            j = smiles.find("]", i + 1)
            if j < 0:
                raise UnterminatedBracket("unterminated bracket atom", i)
            text = smiles[i : j + 1]
            _decode_bracket(text, i)  # validate content now, decode again at parse
            tokens.append(Token(text, TokenKind.BRACKET_ATOM))
            i = j + 1
        elif ch == "%":
            if i + 2 < n and smiles[i + 1].isdigit() and smiles[i + 2].isdigit():
                tokens.append(Token(smiles[i : i + 3], TokenKind.RING_BOND))
                i += 3
            else:
                raise UnknownCharacter("'%' must be followed by two digits", i)
        elif smiles.startswith("Cl", i) or smiles.startswith("Br", i):
            tokens.append(Token(smiles[i : i + 2], TokenKind.ATOM))
            i += 2
        elif ch in "BCNOPSFI":
            tokens.append(Token(ch, TokenKind.ATOM))
            i += 1
        elif ch in "bcnops":
            tokens.append(Token(ch, TokenKind.AROMATIC_ATOM))
            i += 1
        elif ch in "-=#":
            tokens.append(Token(ch, TokenKind.BOND))
            i += 1
        elif ch in "/\\.":
            # stereo markers and the fragment separator; both are bond-slot
            # symbols (the separator is rejected later, at graph building)
            tokens.append(Token(ch, TokenKind.BOND))
            i += 1
        elif ch == "(":
            tokens.append(Token(ch, TokenKind.BRANCH_OPEN))
            i += 1
        elif ch == ")":
            tokens.append(Token(ch, TokenKind.BRANCH_CLOSE))
            i += 1
        elif ch.isdigit() and ch != "0":
            tokens.append(Token(ch, TokenKind.RING_BOND))
            i += 1
        else:
            raise UnknownCharacter(f"character {ch!r} is not in the grammar", i)
    return tokens


def detokenize(tokens: list[Token]) -> str:
    """Concatenate token texts back into a SMILES string.

    Raises:
        SpecialTokenPresent: if a BOS/EOS/PAD token slipped through.
    """
    for tok in tokens:
        if tok.kind is TokenKind.SPECIAL:
            raise SpecialTokenPresent(f"special token {tok.text} in detokenize input")
    return "".join(tok.text for tok in tokens)


class Vocabulary:
    """Bijection between token texts and integer ids.

    Ids 0, 1, 2 are PAD, BOS, EOS; the remaining tokens are sorted
    lexicographically so rebuilding from the same corpus (in any order)
    gives the identical mapping.
    """

    def __init__(self, tokens: list[Token]) -> None:
        self.tokens = tokens
        self.index = {tok.text: i for i, tok in enumerate(tokens)}
        if len(self.index) != len(tokens):
            raise ValueError("duplicate token text in vocabulary")

    def __len__(self) -> int:
        return len(self.tokens)

    def __eq__(self, other: object) -> bool:
        return isinstance(other, Vocabulary) and [t.text for t in self.tokens] == [
            t.text for t in other.tokens
        ]

    def id(self, text: str) -> int:
        return self.index[text]

    def token(self, token_id: int) -> Token:
        return self.tokens[token_id]

    def encode(self, tokens: list[Token]) -> list[int]:
        return [self.index[tok.text] for tok in tokens]

    def decode(self, ids: list[int]) -> list[Token]:
        return [self.tokens[i] for i in ids]


def build_vocabulary(corpus: list[list[Token]]) -> Vocabulary:
    """Collect every distinct token in the corpus into a Vocabulary.

    Raises:
        EmptyCorpus: on an empty corpus list.
    """
    if not corpus:
        raise EmptyCorpus("cannot build a vocabulary from an empty corpus")
    seen: dict[str, Token] = {}
    for tokens in corpus:
        for tok in tokens:
            if tok.kind is TokenKind.SPECIAL:
                continue
            seen.setdefault(tok.text, tok)
    ordered = list(SPECIAL_TOKENS) + [seen[text] for text in sorted(seen)]
    return Vocabulary(ordered)


def save_vocabulary(vocab: Vocabulary, path) -> None:
    """One token text per line, in id order (sidecar for checkpoints)."""
    with open(path, "w", encoding="utf-8") as handle:
        for tok in vocab.tokens:
            handle.write(tok.text + "\n")


def load_vocabulary(path) -> Vocabulary:
    special_by_text = {tok.text: tok for tok in SPECIAL_TOKENS}
    tokens: list[Token] = []
    with open(path, encoding="utf-8") as handle:
        for line in handle:
            text = line.rstrip("\n")
            if not text:
                continue
            if text in special_by_text:
                tokens.append(special_by_text[text])
                continue
            parsed = tokenize(text)
            if len(parsed) != 1:
                raise ValueError(f"vocabulary line {text!r} is not a single token")
            tokens.append(parsed[0])
    return Vocabulary(tokens)


# --- molecular graph ------------------------------------------------------


@dataclass(frozen=True)
class Atom:
    element: str
    charge: int = 0
    aromatic: bool = False
    explicit_h: int = 0
    bracket: bool = False  # bracket atoms carry their hydrogens explicitly


@dataclass(frozen=True)
class Bond:
    a: int
    b: int
    order: int = 1
    aromatic: bool = False

    def other(self, idx: int) -> int:
        return self.b if idx == self.a else self.a


@dataclass
class MolecularGraph:
    atoms: list[Atom]
    bonds: list[Bond]
    _adj: dict[int, list[int]] = field(init=False, repr=False, compare=False)

    def __post_init__(self) -> None:
        n = len(self.atoms)
        seen_pairs = set()
        adj: dict[int, list[int]] = {i: [] for i in range(n)}
        for bi, bond in enumerate(self.bonds):
            if bond.a == bond.b:
                raise ValueError(f"self-loop bond on atom {bond.a}")
            if not (0 <= bond.a < n and 0 <= bond.b < n):
                raise ValueError(f"bond {bond} references a missing atom")
            pair = frozenset((bond.a, bond.b))
            if pair in seen_pairs:
                raise ValueError(f"duplicate bond between atoms {bond.a} and {bond.b}")
            seen_pairs.add(pair)
            adj[bond.a].append(bi)
            adj[bond.b].append(bi)
        self._adj = adj

    def neighbor_bonds(self, idx: int) -> list[Bond]:
        return [self.bonds[bi] for bi in self._adj[idx]]

    def neighbors(self, idx: int) -> list[int]:
        return [bond.other(idx) for bond in self.neighbor_bonds(idx)]

    def bond_between(self, a: int, b: int) -> Bond | None:
        for bond in self.neighbor_bonds(a):
            if bond.other(a) == b:
                return bond
        return None

    def heavy_degree(self, idx: int) -> int:
        return len(self._adj[idx])


def effective_bond_sum(graph: MolecularGraph, idx: int) -> int:
    """Bond-order sum at an atom, aromatic bonds at 1.5, total rounded up."""
    total = 0.0
    for bond in graph.neighbor_bonds(idx):
        total += 1.5 if bond.aromatic else bond.order
    return math.ceil(total)


def allowed_valences(atom: Atom) -> tuple[int, ...]:
    values = ALLOWED_VALENCES[atom.element]
    if atom.element in ("N", "O") and atom.charge != 0:
        # +1 raises, -1 lowers the admissible sums
        values = tuple(max(0, v + atom.charge) for v in values)
    return values


def implicit_hydrogens(graph: MolecularGraph, idx: int) -> int:
    """Hydrogens added to fill up to the next admissible valence.

    Bracket atoms state their hydrogens explicitly and get none. Aromatic
    heteroatoms (lowercase n, o, s, ...) donate their spare pair into the
    ring and also get none; aromatic carbon follows the plain rule.
    """
    atom = graph.atoms[idx]
    if atom.bracket:
        return 0
    if atom.aromatic and atom.element != "C":
        return 0
    used = effective_bond_sum(graph, idx)
    for valence in allowed_valences(atom):
        if valence >= used:
            return valence - used
    return 0


def total_hydrogens(graph: MolecularGraph, idx: int) -> int:
    return graph.atoms[idx].explicit_h + implicit_hydrogens(graph, idx)


@dataclass(frozen=True)
class ValidityIssue:
    code: str
    atom: int
    message: str


@dataclass(frozen=True)
class ValidityReport:
    valid: bool
    errors: list[ValidityIssue]


def validate(graph: MolecularGraph) -> ValidityReport:
    """Check every atom against its allowed valence set.

    The occupied valence is the rounded-up bond-order sum plus explicit
    hydrogens; it must not exceed the largest allowed value (charge
    adjusted for N and O).
    """
    errors: list[ValidityIssue] = []
    for idx, atom in enumerate(graph.atoms):
        used = effective_bond_sum(graph, idx) + atom.explicit_h
        limit = max(allowed_valences(atom))
        if used > limit:
            errors.append(
                ValidityIssue(
                    "ValenceExceeded",
                    idx,
                    f"{atom.element} atom {idx} uses {used} valences, allows {limit}",
                )
            )
    return ValidityReport(valid=not errors, errors=errors)


def parse(smiles: str | list[Token]) -> MolecularGraph:
    """Build a MolecularGraph from a SMILES string or token list.

    Adjacent atoms get implicit single bonds (aromatic when both atoms are
    aromatic), explicit bond symbols apply to the following connection,
    branches nest through a stack, and ring-bond labels pair
    first-open/first-close. Stereo markers are discarded.

    Raises:
        EmptyInput, UnmatchedRingBond, UnmatchedParenthesis, DanglingBond,
        SingleFragmentOnly: on malformed input.
    """
    tokens = tokenize(smiles) if isinstance(smiles, str) else smiles
    atoms: list[Atom] = []
    bonds: list[Bond] = []
    bonded_pairs: set[frozenset[int]] = set()

    prev: int | None = None
    pending: int | None = None
    branch_stack: list[int] = []
    open_rings: dict[str, tuple[int, int | None]] = {}

    def add_bond(a: int, b: int, order: int | None) -> None:
        if a == b:
            raise UnmatchedRingBond("?", "ring bond closes on its own atom")
        pair = frozenset((a, b))
        if pair in bonded_pairs:
            raise UnmatchedRingBond("?", f"duplicate bond between atoms {a} and {b}")
        aromatic = False
        if order is None:
            if atoms[a].aromatic and atoms[b].aromatic:
                aromatic = True
            order = 1
        bonded_pairs.add(pair)
        bonds.append(Bond(a, b, order=order, aromatic=aromatic))

    for tok in tokens:
        if tok.kind is TokenKind.SPECIAL:
            raise SpecialTokenPresent(f"special token {tok.text} in parse input")
        if tok.is_atom():
            if tok.kind is TokenKind.ATOM:
                atom = Atom(element=tok.text)
            elif tok.kind is TokenKind.AROMATIC_ATOM:
                atom = Atom(element=tok.text.upper(), aromatic=True)
            else:
                element, aromatic, explicit_h, charge = _decode_bracket(tok.text, 0)
                atom = Atom(
                    element=element,
                    charge=charge,
                    aromatic=aromatic,
                    explicit_h=explicit_h,
                    bracket=True,
                )
            atoms.append(atom)
            idx = len(atoms) - 1
            if prev is not None:
                add_bond(prev, idx, pending)
            pending = None
            prev = idx
        elif tok.kind is TokenKind.BOND:
            if tok.text == ".":
                raise SingleFragmentOnly("multi-fragment input: candidates must be one molecule")
            if tok.text in "/\\":
                continue  # stereo marker, no structural meaning here
            if pending is not None:
                raise DanglingBond("two bond symbols in a row")
            if prev is None:
                raise DanglingBond("bond symbol before any atom")
            pending = BOND_ORDERS[tok.text]
        elif tok.kind is TokenKind.RING_BOND:
            label = tok.text
            if prev is None:
                raise UnmatchedRingBond(label, f"ring bond '{label}' before any atom")
            if label in open_rings:
                other, order_at_open = open_rings.pop(label)
                if order_at_open is not None and pending is not None and order_at_open != pending:
                    raise UnmatchedRingBond(
                        label, f"ring bond '{label}' opened and closed with different orders"
                    )
                add_bond(other, prev, order_at_open if order_at_open is not None else pending)
            else:
                open_rings[label] = (prev, pending)
            pending = None
        elif tok.kind is TokenKind.BRANCH_OPEN:
            if prev is None:
                raise UnmatchedParenthesis("branch opened before any atom")
            if pending is not None:
                raise DanglingBond("bond symbol before a branch opening")
            branch_stack.append(prev)
        elif tok.kind is TokenKind.BRANCH_CLOSE:
            if pending is not None:
                raise DanglingBond("bond symbol before a branch closing")
            if not branch_stack:
                raise UnmatchedParenthesis("branch closed but never opened")
            prev = branch_stack.pop()

    if pending is not None:
        raise DanglingBond("bond symbol at end of input")
    if open_rings:
        label = sorted(open_rings)[0]
        raise UnmatchedRingBond(label)
    if branch_stack:
        raise UnmatchedParenthesis("branch never closed")
    if not atoms:
        raise EmptyInput("no atoms in input")
    return MolecularGraph(atoms, bonds)


# --- ring analysis --------------------------------------------------------


def cycle_basis(graph: MolecularGraph) -> list[list[int]]:
    """Cycle basis from a BFS spanning forest (one cycle per non-tree bond)."""
    n = len(graph.atoms)
    parent: dict[int, int | None] = {}
    depth: dict[int, int] = {}
    cycles: list[list[int]] = []
    tree_bonds: set[int] = set()

    for root in range(n):
        if root in parent:
            continue
        parent[root] = None
        depth[root] = 0
        queue = [root]
        while queue:
            u = queue.pop(0)
            for bi in graph._adj[u]:
                v = graph.bonds[bi].other(u)
                if v not in parent:
                    parent[v] = u
                    depth[v] = depth[u] + 1
                    tree_bonds.add(bi)
                    queue.append(v)

    for bi, bond in enumerate(graph.bonds):
        if bi in tree_bonds:
            continue
        u, v = bond.a, bond.b
        path_u, path_v = [u], [v]
        while depth[path_u[-1]] > depth[path_v[-1]]:
            path_u.append(parent[path_u[-1]])
        while depth[path_v[-1]] > depth[path_u[-1]]:
            path_v.append(parent[path_v[-1]])
        while path_u[-1] != path_v[-1]:
            path_u.append(parent[path_u[-1]])
            path_v.append(parent[path_v[-1]])
        cycles.append(path_u + list(reversed(path_v[:-1])))
    return cycles


def ring_bond_indices(graph: MolecularGraph) -> set[int]:
    """Indices of bonds lying on at least one cycle."""
    in_ring: set[int] = set()
    for cycle in cycle_basis(graph):
        for i, a in enumerate(cycle):
            b = cycle[(i + 1) % len(cycle)]
            for bi in graph._adj[a]:
                if graph.bonds[bi].other(a) == b:
                    in_ring.add(bi)
    return in_ring


def atoms_in_three_rings(graph: MolecularGraph) -> set[int]:
    """Atoms that sit on a three-membered basis cycle."""
    hits: set[int] = set()
    for cycle in cycle_basis(graph):
        if len(cycle) == 3:
            hits.update(cycle)
    return hits


# --- substructure matching -------------------------------------------------

MAX_PATTERN_ATOMS = 24


def _bond_key(bond: Bond) -> tuple[bool, int]:
    return (bond.aromatic, 0 if bond.aromatic else bond.order)


def _atoms_compatible(pattern_atom: Atom, target_atom: Atom) -> bool:
    return (
        pattern_atom.element == target_atom.element
        and pattern_atom.aromatic == target_atom.aromatic
    )


def find_embeddings(target: MolecularGraph, pattern: MolecularGraph) -> list[dict[int, int]]:
    """All injective pattern-to-target mappings preserving element, aromatic
    flag and bond order. Exhaustive backtracking; patterns are small.
    """
    np_, nt = len(pattern.atoms), len(target.atoms)
    if np_ > MAX_PATTERN_ATOMS:
        raise PatternTooLarge(f"pattern has {np_} atoms, limit is {MAX_PATTERN_ATOMS}")
    if np_ == 0 or np_ > nt:
        return []

    # cheap multiset prune on (element, aromatic)
    def census(graph: MolecularGraph) -> dict[tuple[str, bool], int]:
        out: dict[tuple[str, bool], int] = {}
        for atom in graph.atoms:
            key = (atom.element, atom.aromatic)
            out[key] = out.get(key, 0) + 1
        return out

    target_census = census(target)
    for key, count in census(pattern).items():
        if target_census.get(key, 0) < count:
            return []

    # order pattern atoms so each one (after the first) touches a mapped atom
    order = [0]
    placed = {0}
    while len(order) < np_:
        for idx in range(np_):
            if idx in placed:
                continue
            if any(nb in placed for nb in pattern.neighbors(idx)):
                order.append(idx)
                placed.add(idx)
                break

    embeddings: list[dict[int, int]] = []
    mapping: dict[int, int] = {}
    used: set[int] = set()

    def extend(step: int) -> None:
        if step == np_:
            embeddings.append(dict(mapping))
            return
        p = order[step]
        mapped_nbrs = [nb for nb in pattern.neighbors(p) if nb in mapping]
        if mapped_nbrs:
            candidates = [
                c for c in target.neighbors(mapping[mapped_nbrs[0]]) if c not in used
            ]
        else:
            candidates = [c for c in range(nt) if c not in used]
        for cand in candidates:
            if not _atoms_compatible(pattern.atoms[p], target.atoms[cand]):
                continue
            ok = True
            for nb in mapped_nbrs:
                pbond = pattern.bond_between(p, nb)
                tbond = target.bond_between(cand, mapping[nb])
                if tbond is None or _bond_key(pbond) != _bond_key(tbond):
                    ok = False
                    break
            if ok:
                mapping[p] = cand
                used.add(cand)
                extend(step + 1)
                del mapping[p]
                used.discard(cand)

    extend(0)
    return embeddings


def match_substructure(target: MolecularGraph, pattern: MolecularGraph) -> int:
    """Number of distinct target atom-sets the pattern embeds onto.

    Counting by atom-set collapses the pattern's automorphisms (a benzene
    query hits a benzene ring once, not twelve times).

    Raises:
        PatternTooLarge: pattern exceeds 24 atoms.
    """
    sets = {frozenset(emb.values()) for emb in find_embeddings(target, pattern)}
    return len(sets)
