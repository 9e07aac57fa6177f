"""Drug-likeness descriptors and their desirability aggregate.

Eight descriptors (MW, ALOGP, HBA, HBD, PSA, ROTB, AROM, ALERTS) are
computed from a MolecularGraph, each is mapped through an asymmetric
double sigmoid, and the unweighted geometric mean of the eight
desirabilities is the screening score used throughout the pipeline.

All numeric parameters live in versioned TSV tables under the package's
``data/`` directory (override with the ``OPFORGE_DATA_DIR`` environment
variable), so alternate parameterizations can be swapped in without code
changes.
"""

from __future__ import annotations

import math
import os
from dataclasses import dataclass
from functools import lru_cache
from importlib import resources
from pathlib import Path

from opforge import smiles
from opforge.errors import TableError, UnknownElementWeight
from opforge.smiles import MolecularGraph, total_hydrogens

DESCRIPTOR_NAMES = ("MW", "ALOGP", "HBA", "HBD", "PSA", "ROTB", "AROM", "ALERTS")

_HETERO = frozenset({"N", "O", "P", "S", "F", "Cl", "Br", "I"})
_HALOGENS = frozenset({"F", "Cl", "Br", "I"})

DESIRABILITY_FLOOR = 1e-6


@dataclass(frozen=True)
class DescriptorVector:
    mw: float
    alogp: float
    hba: int
    hbd: int
    psa: float
    rotb: int
    arom: int
    alerts: int

    def as_tuple(self) -> tuple[float, ...]:
        return (
            self.mw,
            self.alogp,
            float(self.hba),
            float(self.hbd),
            self.psa,
            float(self.rotb),
            float(self.arom),
            float(self.alerts),
        )


@dataclass(frozen=True)
class DesirabilityParams:
    a: float
    b: float
    c: float
    d: float
    e: float
    f: float
    dmax: float


# key: (element, aromatic, charge, h, single, double, triple, arom_bonds, ring3)
_TpsaKey = tuple[str, bool, int, int, int, int, int, int, bool]


@dataclass(frozen=True)
class PropertyTables:
    atomic_weights: dict[str, float]
    crippen: dict[str, float]
    tpsa: dict[_TpsaKey, float]
    alerts: tuple[tuple[str, MolecularGraph], ...]
    desirability: dict[str, DesirabilityParams]
    versions: dict[str, str]


def _read_table(path: Path) -> tuple[str, list[list[str]]]:
    version = ""
    rows: list[list[str]] = []
    for raw in path.read_text(encoding="utf-8").splitlines():
        line = raw.rstrip("\n")
        if not line.strip():
            continue
        if line.startswith("#version"):
            version = line[len("#version") :].strip()
            continue
        if line.startswith("#"):
            continue
        rows.append(line.split("\t"))
    if not version:
        raise TableError(f"{path.name}: missing #version header")
    return version, rows


def default_data_dir() -> Path:
    env = os.environ.get("OPFORGE_DATA_DIR")
    if env:
        return Path(env)
    return Path(str(resources.files("opforge").joinpath("data")))


@lru_cache(maxsize=4)
def _load_tables_cached(data_dir: str) -> PropertyTables:
    base = Path(data_dir)
    versions: dict[str, str] = {}

    version, rows = _read_table(base / "atomic_weights.tsv")
    versions["atomic_weights"] = version
    weights = {element: float(value) for element, value in rows}

    version, rows = _read_table(base / "crippen_logp.tsv")
    versions["crippen_logp"] = version
    crippen = {label: float(value) for label, value in rows}

    version, rows = _read_table(base / "tpsa_fragments.tsv")
    versions["tpsa_fragments"] = version
    tpsa: dict[_TpsaKey, float] = {}
    for row in rows:
        element, aromatic, charge, h, single, double, triple, arom_bonds, ring3, value = row
        key = (
            element,
            aromatic == "1",
            int(charge),
            int(h),
            int(single),
            int(double),
            int(triple),
            int(arom_bonds),
            ring3 == "1",
        )
        tpsa[key] = float(value)

    version, rows = _read_table(base / "alert_patterns.tsv")
    versions["alert_patterns"] = version
    alerts = tuple((name, smiles.parse(pattern)) for name, pattern in rows)

    version, rows = _read_table(base / "qed_desirability.tsv")
    versions["qed_desirability"] = version
    desirability_params = {
        row[0]: DesirabilityParams(*(float(x) for x in row[1:8])) for row in rows
    }
    missing = set(DESCRIPTOR_NAMES) - set(desirability_params)
    if missing:
        raise TableError(f"qed_desirability.tsv: missing descriptors {sorted(missing)}")

    return PropertyTables(
        atomic_weights=weights,
        crippen=crippen,
        tpsa=tpsa,
        alerts=alerts,
        desirability=desirability_params,
        versions=versions,
    )


def load_tables(data_dir: str | Path | None = None) -> PropertyTables:
    """Load (and cache) the property tables from ``data_dir``.

    Defaults to ``OPFORGE_DATA_DIR`` when set, else the packaged data.
    """
    base = Path(data_dir) if data_dir is not None else default_data_dir()
    return _load_tables_cached(str(base.resolve()))


# --- atom environment helpers ----------------------------------------------


def _bond_profile(graph: MolecularGraph, idx: int) -> tuple[int, int, int, int]:
    """Counts of (single, double, triple, aromatic) heavy bonds at an atom."""
    single = double = triple = aromatic = 0
    for bond in graph.neighbor_bonds(idx):
        if bond.aromatic:
            aromatic += 1
        elif bond.order == 1:
            single += 1
        elif bond.order == 2:
            double += 1
        else:
            triple += 1
    return single, double, triple, aromatic


def _neighbor_elements(graph: MolecularGraph, idx: int) -> list[tuple[str, bool, int]]:
    """(element, aromatic, bond order; 0 for aromatic bonds) per neighbor."""
    out = []
    for bond in graph.neighbor_bonds(idx):
        other = graph.atoms[bond.other(idx)]
        order = 0 if bond.aromatic else bond.order
        out.append((other.element, other.aromatic, order))
    return out


# --- Crippen logP -----------------------------------------------------------


def _type_aromatic_carbon(graph: MolecularGraph, idx: int) -> str:
    if total_hydrogens(graph, idx) >= 1:
        return "C18"
    substituents = [
        (graph.atoms[b.other(idx)], b) for b in graph.neighbor_bonds(idx) if not b.aromatic
    ]
    if not substituents:
        return "C19"  # fusion carbon, three ring bonds
    atom, bond = substituents[0]
    if bond.order == 2:
        return "C25"
    if atom.aromatic:
        return "C20"
    return {
        "C": "C21",
        "N": "C22",
        "O": "C23",
        "S": "C24",
        "F": "C14",
        "Cl": "C15",
        "Br": "C16",
        "I": "C17",
    }.get(atom.element, "C13")


def _type_aliphatic_carbon(graph: MolecularGraph, idx: int) -> str:
    h = total_hydrogens(graph, idx)
    nbrs = _neighbor_elements(graph, idx)
    if any(order == 3 for _, _, order in nbrs):
        return "C7"
    doubles = [(el, arom) for el, arom, order in nbrs if order == 2]
    if doubles:
        if any(el != "C" for el, _ in doubles):
            return "C5"
        if any(arom for _, arom, _ in nbrs):
            return "C26"
        return "C6"
    if any(el in _HETERO and not arom for el, arom, _ in nbrs):
        return "C3" if h >= 2 else "C4"
    if any(arom for _, arom, _ in nbrs):
        if h == 3:
            aromatic_carbon = any(arom and el == "C" for el, arom, _ in nbrs)
            return "C8" if aromatic_carbon else "C9"
        return {2: "C10", 1: "C11"}.get(h, "C12")
    if all(el == "C" for el, _, _ in nbrs):
        return "C1" if h >= 2 else "C2"
    return "C27"


def _type_nitrogen(graph: MolecularGraph, idx: int) -> str:
    atom = graph.atoms[idx]
    h = total_hydrogens(graph, idx)
    if atom.aromatic:
        return "N12" if atom.charge > 0 else "N11"
    if atom.charge > 0:
        return "N10" if h >= 1 else "N13"
    if atom.charge < 0:
        return "N14"
    nbrs = _neighbor_elements(graph, idx)
    if any(order == 3 for _, _, order in nbrs):
        return "N9"
    if any(order == 2 for _, _, order in nbrs):
        return "N5" if h >= 1 else "N6"
    has_aromatic = any(arom for _, arom, _ in nbrs)
    if h >= 2:
        return "N3" if has_aromatic else "N1"
    if h == 1:
        return "N4" if has_aromatic else "N2"
    return "N8" if has_aromatic else "N7"


def _type_oxygen(graph: MolecularGraph, idx: int) -> str:
    atom = graph.atoms[idx]
    if atom.aromatic:
        return "O1"
    if total_hydrogens(graph, idx) >= 1:
        return "O2"
    nbrs = list(graph.neighbor_bonds(idx))
    if atom.charge < 0:
        for bond in nbrs:
            other = graph.atoms[bond.other(idx)]
            if other.element == "N":
                return "O5"
            if other.element == "S":
                return "O6"
            if other.element == "C":
                for b2 in graph.neighbor_bonds(bond.other(idx)):
                    if b2.order == 2 and graph.atoms[b2.other(bond.other(idx))].element == "O":
                        return "O12"
        return "O7"
    for bond in nbrs:
        if bond.aromatic or bond.order != 2:
            continue
        partner_idx = bond.other(idx)
        partner = graph.atoms[partner_idx]
        if partner.element in ("N", "O"):
            return "O5"
        if partner.element == "S":
            return "O6"
        if partner.element == "C":
            if partner.aromatic:
                return "O8"
            others = [
                graph.atoms[b.other(partner_idx)]
                for b in graph.neighbor_bonds(partner_idx)
                if b.other(partner_idx) != idx
            ]
            if any(o.element in _HETERO for o in others):
                return "O11"
            if any(o.aromatic for o in others):
                return "O10"
            return "O9"
        return "OS"  # =P and other exotic partners
    if len(nbrs) >= 1:
        aromatic_neighbor = any(graph.atoms[b.other(idx)].aromatic for b in nbrs)
        return "O4" if aromatic_neighbor else "O3"
    return "OS"


def crippen_atom_type(graph: MolecularGraph, idx: int) -> str:
    atom = graph.atoms[idx]
    if atom.element == "C":
        if atom.aromatic:
            return _type_aromatic_carbon(graph, idx)
        return _type_aliphatic_carbon(graph, idx)
    if atom.element == "N":
        return _type_nitrogen(graph, idx)
    if atom.element == "O":
        return _type_oxygen(graph, idx)
    if atom.element == "S":
        if atom.aromatic:
            return "S3"
        return "S2" if atom.charge != 0 else "S1"
    if atom.element == "P":
        return "P"
    if atom.element in _HALOGENS:
        return "HalAnion" if atom.charge < 0 else atom.element
    return atom.element  # B row ships a local default


def _hydrogen_type(graph: MolecularGraph, idx: int) -> str:
    """Crippen type of the hydrogens attached to heavy atom ``idx``."""
    atom = graph.atoms[idx]
    if atom.element == "C":
        return "H1"
    if atom.element == "N":
        return "H3"
    if atom.element == "O":
        heavy = graph.neighbors(idx)
        if not heavy:
            return "H2"
        partner_idx = heavy[0]
        partner = graph.atoms[partner_idx]
        if partner.element == "N":
            return "H3"
        if partner.element in ("O", "S"):
            return "H4"
        if partner.element == "C" and not partner.aromatic:
            for bond in graph.neighbor_bonds(partner_idx):
                if bond.order == 2 and graph.atoms[bond.other(partner_idx)].element in (
                    "C",
                    "N",
                    "O",
                    "S",
                ):
                    return "H4"  # acid / enol hydrogen
        return "H2"
    return "HS"


def alogp_contributions(graph: MolecularGraph, tables: PropertyTables) -> list[float]:
    """Per-heavy-atom logP contributions, hydrogens folded into their host."""
    out = []
    for idx in range(len(graph.atoms)):
        label = crippen_atom_type(graph, idx)
        value = tables.crippen.get(label, tables.crippen.get(label[0] + "S", 0.0))
        h = total_hydrogens(graph, idx)
        if h:
            value += h * tables.crippen[_hydrogen_type(graph, idx)]
        out.append(value)
    return out


# --- polar surface area -----------------------------------------------------


def psa_contributions(graph: MolecularGraph, tables: PropertyTables) -> list[float]:
    """Per-atom polar-surface contributions (zero for atoms other than N/O)."""
    three_ring = smiles.atoms_in_three_rings(graph)
    out = []
    for idx, atom in enumerate(graph.atoms):
        if atom.element not in ("N", "O"):
            out.append(0.0)
            continue
        h = total_hydrogens(graph, idx)
        single, double, triple, arom_bonds = _bond_profile(graph, idx)
        key = (
            atom.element,
            atom.aromatic,
            atom.charge,
            h,
            single,
            double,
            triple,
            arom_bonds,
            idx in three_ring,
        )
        value = tables.tpsa.get(key)
        if value is None:
            # generic degree-based fallback of the published scheme
            degree = graph.heavy_degree(idx) + h
            if atom.element == "N":
                value = 30.5 - degree * 8.2 + h * 1.5
            else:
                value = 28.5 - degree * 8.6 + h * 1.5
            value = max(0.0, value)
        out.append(value)
    return out


# --- remaining descriptors ---------------------------------------------------


def molecular_weight(graph: MolecularGraph, tables: PropertyTables) -> float:
    weights = tables.atomic_weights
    total = 0.0
    for idx, atom in enumerate(graph.atoms):
        if atom.element not in weights:
            raise UnknownElementWeight(f"no atomic weight for element {atom.element!r}")
        total += weights[atom.element] + total_hydrogens(graph, idx) * weights["H"]
    return total


def _is_nitro_nitrogen(graph: MolecularGraph, idx: int) -> bool:
    oxygens = [
        b for b in graph.neighbor_bonds(idx) if graph.atoms[b.other(idx)].element == "O"
    ]
    return len(oxygens) >= 2 and any(b.order == 2 or b.aromatic for b in oxygens)


def _excluded_acceptor(graph: MolecularGraph, idx: int) -> bool:
    """Amide carbonyl oxygens and nitro-group oxygens do not count as acceptors."""
    atom = graph.atoms[idx]
    if atom.element != "O":
        return False
    for bond in graph.neighbor_bonds(idx):
        partner_idx = bond.other(idx)
        partner = graph.atoms[partner_idx]
        if bond.order == 2 and not bond.aromatic and partner.element == "C" and atom.charge == 0:
            for b2 in graph.neighbor_bonds(partner_idx):
                if b2.order == 1 and not b2.aromatic:
                    if graph.atoms[b2.other(partner_idx)].element == "N":
                        return True
        if partner.element == "N" and _is_nitro_nitrogen(graph, partner_idx):
            if graph.heavy_degree(idx) == 1:
                return True
    return False


def hydrogen_bond_counts(graph: MolecularGraph) -> tuple[int, int]:
    """(acceptors, donors) over the molecule's N and O atoms."""
    hba = hbd = 0
    for idx, atom in enumerate(graph.atoms):
        if atom.element not in ("N", "O"):
            continue
        if total_hydrogens(graph, idx) >= 1:
            hbd += 1
        if not _excluded_acceptor(graph, idx):
            hba += 1
    return hba, hbd


def _is_amide_cn(graph: MolecularGraph, bond: smiles.Bond) -> bool:
    for c_idx, n_idx in ((bond.a, bond.b), (bond.b, bond.a)):
        if graph.atoms[c_idx].element == "C" and graph.atoms[n_idx].element == "N":
            for b2 in graph.neighbor_bonds(c_idx):
                if b2.order == 2 and not b2.aromatic and graph.atoms[b2.other(c_idx)].element == "O":
                    return True
    return False


def rotatable_bonds(graph: MolecularGraph) -> int:
    in_ring = smiles.ring_bond_indices(graph)
    count = 0
    for bi, bond in enumerate(graph.bonds):
        if bond.aromatic or bond.order != 1 or bi in in_ring:
            continue
        if graph.heavy_degree(bond.a) < 2 or graph.heavy_degree(bond.b) < 2:
            continue
        if _is_amide_cn(graph, bond):
            continue
        count += 1
    return count


def aromatic_ring_count(graph: MolecularGraph) -> int:
    count = 0
    for cycle in smiles.cycle_basis(graph):
        if all(graph.atoms[idx].aromatic for idx in cycle):
            count += 1
    return count


def alert_count(graph: MolecularGraph, tables: PropertyTables) -> int:
    count = 0
    for _name, pattern in tables.alerts:
        if smiles.match_substructure(graph, pattern) >= 1:
            count += 1
    return count


def descriptors(
    graph: MolecularGraph, tables: PropertyTables, *, skip_alerts: bool = False
) -> DescriptorVector:
    """Compute the eight screening descriptors for a validated graph.

    ``skip_alerts`` zeroes the structural-alert count; useful when
    comparing against scorers that ship a different alert set.
    """
    hba, hbd = hydrogen_bond_counts(graph)
    return DescriptorVector(
        mw=molecular_weight(graph, tables),
        alogp=sum(alogp_contributions(graph, tables)),
        hba=hba,
        hbd=hbd,
        psa=sum(psa_contributions(graph, tables)),
        rotb=rotatable_bonds(graph),
        arom=aromatic_ring_count(graph),
        alerts=0 if skip_alerts else alert_count(graph, tables),
    )


# --- desirability / aggregate ------------------------------------------------


def desirability(x: float, params: DesirabilityParams) -> float:
    """Asymmetric double sigmoid, normalized to peak 1, floored at 1e-6."""
    rising = params.b / (1.0 + math.exp(-(x - params.c + params.d / 2.0) / params.e))
    falling = 1.0 - 1.0 / (1.0 + math.exp(-(x - params.c - params.d / 2.0) / params.f))
    value = (params.a + rising * falling) / params.dmax
    return min(1.0, max(DESIRABILITY_FLOOR, value))


def qed(vector: DescriptorVector, tables: PropertyTables) -> float:
    """Unweighted geometric mean of the eight descriptor desirabilities."""
    total = 0.0
    for name, value in zip(DESCRIPTOR_NAMES, vector.as_tuple()):
        total += math.log(desirability(value, tables.desirability[name]))
    return math.exp(total / len(DESCRIPTOR_NAMES))


def qed_for_smiles(text: str, tables: PropertyTables, *, skip_alerts: bool = False) -> float:
    """Parse, validate and score one SMILES string; raises on invalid input."""
    graph = smiles.parse(text)
    report = smiles.validate(graph)
    if not report.valid:
        first = report.errors[0]
        raise ValueError(f"invalid molecule: {first.message}")
    return qed(descriptors(graph, tables, skip_alerts=skip_alerts), tables)
