"""External-tool adapters and report emission.

Docking poses and QSAR endpoints are computed outside this package; here
we only parse what those tools wrote (a docking result table, a
predictions CSV with caller-supplied column mapping), join the rows with
generation records on molecule id, and emit the screening summary, a
deterministic SVG scatter per property, and a matplotlib overview figure.

Docking affinities are stored signed as the tool reports them (negative
kcal/mol); summary rows quote magnitudes.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path
from xml.sax.saxutils import escape

from opforge.errors import (
    MalformedTable,
    MissingMappedColumn,
    NoPlottableData,
    NoResultRows,
)
from opforge.pipeline import GenerationRecord

LOGP_THRESHOLD = 5.0
CLEARANCE_THRESHOLD = 300.0
CACO2_THRESHOLD = 6.0

AXIS_LABELS = {
    "qed": "QED",
    "mw": "MW (g/mol)",
    "alogp": "ALOGP",
    "hba": "HBA (count)",
    "hbd": "HBD (count)",
    "psa": "PSA (Å²)",
    "rotb": "ROTB (count)",
    "arom": "AROM (count)",
    "alerts": "ALERTS (count)",
    "length": "length (tokens)",
    "logp": "logP",
    "clearance": "clearance (µl/10⁶ cells/min)",
    "caco2": "Caco-2 (log scale)",
    "affinity": "affinity magnitude (kcal/mol)",
}


@dataclass(frozen=True)
class DockingMode:
    index: int
    affinity: float  # kcal/mol, signed as reported
    rmsd_lower: float
    rmsd_upper: float


@dataclass(frozen=True)
class DockingResult:
    molecule_id: str
    modes: tuple[DockingMode, ...]

    @property
    def best_affinity(self) -> float:
        return self.modes[0].affinity

    @property
    def best_magnitude(self) -> float:
        return abs(self.modes[0].affinity)


@dataclass(frozen=True)
class ExternalPropertyRecord:
    molecule_id: str
    logp: float | None = None
    clearance: float | None = None
    caco2: float | None = None


@dataclass(frozen=True)
class SummaryTable:
    generation_mean_qed: dict[int, float]
    logp_fraction_below: float | None
    logp_count: int
    clearance_fraction_below: float | None
    clearance_count: int
    caco2_fraction_below: float | None
    caco2_count: int
    affinity_magnitude_min: float | None
    affinity_magnitude_max: float | None
    docking_count: int
    reference_outside_band: dict[str, float] = field(default_factory=dict)
    joined_count: int = 0
    unmatched_external: int = 0


# --- docking log parsing -------------------------------------------------------


def parse_vina_log(text: str, molecule_id: str = "") -> DockingResult:
    """Parse a docking result table: a header line containing ``mode``, a
    dashed separator, then ``mode affinity rmsd_lb rmsd_ub`` rows.

    Raises:
        MalformedTable: header/separator missing or mode numbering broken.
        NoResultRows: table present but empty.
    """
    lines = text.splitlines()
    header_idx = None
    for i, line in enumerate(lines):
        if "mode" in line.lower() and "|" in line:
            header_idx = i
            break
    if header_idx is None:
        raise MalformedTable("no result-table header found")
    sep_idx = None
    for i in range(header_idx + 1, len(lines)):
        stripped = lines[i].strip()
        if stripped and set(stripped) <= set("-+"):
            sep_idx = i
            break
    if sep_idx is None:
        raise MalformedTable("no dashed separator after header")

    modes: list[DockingMode] = []
    for line in lines[sep_idx + 1 :]:
        parts = line.split()
        if len(parts) != 4:
            break
        try:
            modes.append(
                DockingMode(int(parts[0]), float(parts[1]), float(parts[2]), float(parts[3]))
            )
        except ValueError:
            break
    if not modes:
        raise NoResultRows("result table has no data rows")
    for expected, mode in enumerate(modes, start=1):
        if mode.index != expected:
            raise MalformedTable(f"mode indices not consecutive at row {expected}")
    return DockingResult(molecule_id=molecule_id, modes=tuple(modes))


def render_vina_table(result: DockingResult) -> str:
    """Write a result back out in the same table layout (testing aid)."""
    lines = [
        "mode |   affinity | dist from best mode",
        "     | (kcal/mol) | rmsd l.b.| rmsd u.b.",
        "-----+------------+----------+----------",
    ]
    for mode in result.modes:
        lines.append(
            f"{mode.index:>4}       {mode.affinity:>6.1f}      {mode.rmsd_lower:.3f}      "
            f"{mode.rmsd_upper:.3f}"
        )
    return "\n".join(lines) + "\n"


# --- external property CSV -----------------------------------------------------

REQUIRED_EXTERNAL_FIELDS = ("id", "logp", "clearance", "caco2")


def parse_opera_csv(
    path: str | Path, column_map: dict[str, str]
) -> tuple[list[ExternalPropertyRecord], int]:
    """Read an external QSAR predictions CSV.

    ``column_map`` binds our field names (id, logp, clearance, caco2) to
    the file's column names, since those vary across tool versions. Rows
    with blank or unparseable numbers are skipped and counted.

    Raises:
        MissingMappedColumn: a required field is unmapped or its column is
            absent from the header.
    """
    for fieldname in REQUIRED_EXTERNAL_FIELDS:
        if fieldname not in column_map:
            raise MissingMappedColumn(fieldname, "<unmapped>")
    path = Path(path)
    records: list[ExternalPropertyRecord] = []
    skipped = 0
    with path.open(newline="", encoding="utf-8") as handle:
        reader = csv.DictReader(handle)
        header = reader.fieldnames or []
        for fieldname in REQUIRED_EXTERNAL_FIELDS:
            if column_map[fieldname] not in header:
                raise MissingMappedColumn(fieldname, column_map[fieldname])
        for row in reader:
            try:
                values = {
                    fieldname: float(row[column_map[fieldname]])
                    for fieldname in ("logp", "clearance", "caco2")
                }
            except (TypeError, ValueError):
                skipped += 1
                continue
            if not all(math.isfinite(v) for v in values.values()):
                skipped += 1
                continue
            records.append(
                ExternalPropertyRecord(molecule_id=row[column_map["id"]].strip(), **values)
            )
    return records, skipped


# --- summary -------------------------------------------------------------------


def _fraction_below(values: list[float], threshold: float) -> tuple[float | None, int]:
    if not values:
        return None, 0
    return sum(1 for v in values if v < threshold) / len(values), len(values)


def summarize(
    generation_records: list[GenerationRecord],
    external_records: list[ExternalPropertyRecord] = (),
    docking_results: list[DockingResult] = (),
    reference_docking: list[DockingResult] = (),
) -> SummaryTable:
    """Join generation records with external data and compute the report
    fractions (strict ``<`` thresholds), affinity magnitude band and
    per-generation mean QED over valid unique molecules.

    Reference docking results (known compounds docked for comparison) are
    flagged when their best-mode magnitude falls outside the band spanned
    by the generated molecules.
    """
    by_generation: dict[int, dict[str, GenerationRecord]] = {}
    known_ids = set()
    for record in generation_records:
        known_ids.add(record.molecule_id)
        if record.valid and record.qed is not None:
            by_generation.setdefault(record.generation, {}).setdefault(record.smiles, record)
    generation_mean_qed = {
        g: float(sum(r.qed for r in rows.values()) / len(rows))
        for g, rows in sorted(by_generation.items())
    }

    joined = [r for r in external_records if r.molecule_id in known_ids]
    unmatched = len(external_records) - len(joined)
    logp_fraction, logp_n = _fraction_below(
        [r.logp for r in joined if r.logp is not None], LOGP_THRESHOLD
    )
    clearance_fraction, clearance_n = _fraction_below(
        [r.clearance for r in joined if r.clearance is not None], CLEARANCE_THRESHOLD
    )
    caco2_fraction, caco2_n = _fraction_below(
        [r.caco2 for r in joined if r.caco2 is not None], CACO2_THRESHOLD
    )

    magnitudes = [d.best_magnitude for d in docking_results]
    mag_min = min(magnitudes) if magnitudes else None
    mag_max = max(magnitudes) if magnitudes else None
    outside: dict[str, float] = {}
    if magnitudes:
        for ref in reference_docking:
            magnitude = ref.best_magnitude
            if not (mag_min <= magnitude <= mag_max):
                outside[ref.molecule_id] = magnitude

    return SummaryTable(
        generation_mean_qed=generation_mean_qed,
        logp_fraction_below=logp_fraction,
        logp_count=logp_n,
        clearance_fraction_below=clearance_fraction,
        clearance_count=clearance_n,
        caco2_fraction_below=caco2_fraction,
        caco2_count=caco2_n,
        affinity_magnitude_min=mag_min,
        affinity_magnitude_max=mag_max,
        docking_count=len(magnitudes),
        reference_outside_band=outside,
        joined_count=len(joined),
        unmatched_external=unmatched,
    )


# --- field extraction for plotting ----------------------------------------------


def _field_value(record, name: str):
    if isinstance(record, dict):
        value = record.get(name)
    else:
        value = getattr(record, name, None)
        if value is None and getattr(record, "descriptors", None) is not None:
            value = getattr(record.descriptors, name, None)
    if value is None:
        return None
    value = float(value)
    return value if math.isfinite(value) else None


def extract_points(records, x_field: str, y_field: str) -> list[tuple[float, float]]:
    points = []
    for record in records:
        x = _field_value(record, x_field)
        y = _field_value(record, y_field)
        if x is not None and y is not None:
            points.append((x, y))
    return points


# --- deterministic SVG scatter ---------------------------------------------------

_SVG_WIDTH = 640
_SVG_HEIGHT = 480
_MARGIN_LEFT = 72
_MARGIN_RIGHT = 24
_MARGIN_TOP = 24
_MARGIN_BOTTOM = 56


def _axis_range(values: list[float]) -> tuple[float, float]:
    lo, hi = min(values), max(values)
    if lo == hi:
        lo, hi = lo - 1.0, hi + 1.0
    margin = 0.05 * (hi - lo)
    return lo - margin, hi + margin


def _ticks(lo: float, hi: float, count: int = 5) -> list[float]:
    step = (hi - lo) / (count - 1)
    return [lo + i * step for i in range(count)]


def emit_scatter(records, x_field: str, y_field: str = "qed", path: str | Path = "scatter.svg") -> None:
    """Write a standalone SVG scatter plot, one circle per record.

    Axes are linear, auto-scaled to the data extent plus a 5% margin, and
    labelled with the field names (units where known). Byte output is a
    pure function of the inputs.

    Raises:
        NoPlottableData: no record carries both fields.
    """
    points = extract_points(records, x_field, y_field)
    if not points:
        raise NoPlottableData(f"no records with both {x_field!r} and {y_field!r}")
    x_lo, x_hi = _axis_range([p[0] for p in points])
    y_lo, y_hi = _axis_range([p[1] for p in points])
    plot_w = _SVG_WIDTH - _MARGIN_LEFT - _MARGIN_RIGHT
    plot_h = _SVG_HEIGHT - _MARGIN_TOP - _MARGIN_BOTTOM

    def sx(x: float) -> float:
        return _MARGIN_LEFT + (x - x_lo) / (x_hi - x_lo) * plot_w

    def sy(y: float) -> float:
        return _MARGIN_TOP + plot_h - (y - y_lo) / (y_hi - y_lo) * plot_h

    x_label = escape(AXIS_LABELS.get(x_field, x_field))
    y_label = escape(AXIS_LABELS.get(y_field, y_field))

    parts = [
        '<?xml version="1.0" encoding="UTF-8"?>',
        f'<svg xmlns="http://www.w3.org/2000/svg" version="1.1" '
        f'width="{_SVG_WIDTH}" height="{_SVG_HEIGHT}" '
        f'viewBox="0 0 {_SVG_WIDTH} {_SVG_HEIGHT}">',
        f'<rect x="0" y="0" width="{_SVG_WIDTH}" height="{_SVG_HEIGHT}" fill="#ffffff"/>',
        f'<line x1="{_MARGIN_LEFT}" y1="{_MARGIN_TOP + plot_h}" '
        f'x2="{_MARGIN_LEFT + plot_w}" y2="{_MARGIN_TOP + plot_h}" '
        'stroke="#333333" stroke-width="1"/>',
        f'<line x1="{_MARGIN_LEFT}" y1="{_MARGIN_TOP}" '
        f'x2="{_MARGIN_LEFT}" y2="{_MARGIN_TOP + plot_h}" '
        'stroke="#333333" stroke-width="1"/>',
    ]
    for tick in _ticks(x_lo, x_hi):
        px = sx(tick)
        parts.append(
            f'<line x1="{px:.2f}" y1="{_MARGIN_TOP + plot_h}" x2="{px:.2f}" '
            f'y2="{_MARGIN_TOP + plot_h + 5}" stroke="#333333" stroke-width="1"/>'
        )
        parts.append(
            f'<text x="{px:.2f}" y="{_MARGIN_TOP + plot_h + 20}" font-size="11" '
            f'text-anchor="middle" font-family="sans-serif">{tick:.4g}</text>'
        )
    for tick in _ticks(y_lo, y_hi):
        py = sy(tick)
        parts.append(
            f'<line x1="{_MARGIN_LEFT - 5}" y1="{py:.2f}" x2="{_MARGIN_LEFT}" '
            f'y2="{py:.2f}" stroke="#333333" stroke-width="1"/>'
        )
        parts.append(
            f'<text x="{_MARGIN_LEFT - 8}" y="{py + 4:.2f}" font-size="11" '
            f'text-anchor="end" font-family="sans-serif">{tick:.4g}</text>'
        )
    parts.append(
        f'<text x="{_MARGIN_LEFT + plot_w / 2:.2f}" y="{_SVG_HEIGHT - 12}" font-size="13" '
        f'text-anchor="middle" font-family="sans-serif">{x_label}</text>'
    )
    parts.append(
        f'<text x="16" y="{_MARGIN_TOP + plot_h / 2:.2f}" font-size="13" '
        f'text-anchor="middle" font-family="sans-serif" '
        f'transform="rotate(-90 16 {_MARGIN_TOP + plot_h / 2:.2f})">{y_label}</text>'
    )
    for x, y in points:
        parts.append(
            f'<circle cx="{sx(x):.2f}" cy="{sy(y):.2f}" r="3" '
            'fill="#1f6fb4" fill-opacity="0.75"/>'
        )
    parts.append("</svg>")
    Path(path).write_bytes("\n".join(parts).encode("utf-8"))


# --- CSV emission ----------------------------------------------------------------


def _format_cell(value) -> str:
    if value is None:
        return ""
    if isinstance(value, bool):
        return "1" if value else "0"
    if isinstance(value, float):
        return f"{value:.4f}"
    return str(value)


RECORD_COLUMNS = (
    "generation",
    "smiles",
    "valid",
    "contains_fragment",
    "length",
    "qed",
    "mw",
    "alogp",
    "hba",
    "hbd",
    "psa",
    "rotb",
    "arom",
    "alerts",
)

STATS_COLUMNS = (
    "generation",
    "count",
    "validity_rate",
    "uniqueness_rate",
    "mean_qed",
    "mean_qed_valid_unique",
)


def emit_records_csv(records: list[GenerationRecord], path: str | Path) -> None:
    with Path(path).open("w", newline="", encoding="utf-8") as handle:
        writer = csv.writer(handle)
        writer.writerow(RECORD_COLUMNS)
        for r in records:
            d = r.descriptors
            writer.writerow(
                [
                    r.generation,
                    r.smiles,
                    _format_cell(r.valid),
                    _format_cell(r.contains_fragment),
                    r.length,
                    _format_cell(r.qed),
                    _format_cell(d.mw if d else None),
                    _format_cell(d.alogp if d else None),
                    _format_cell(d.hba if d else None),
                    _format_cell(d.hbd if d else None),
                    _format_cell(d.psa if d else None),
                    _format_cell(d.rotb if d else None),
                    _format_cell(d.arom if d else None),
                    _format_cell(d.alerts if d else None),
                ]
            )


def read_records_csv(path: str | Path) -> list[GenerationRecord]:
    """Read a generation records CSV back (inverse of emit_records_csv).

    Row order within each generation defines the molecule ids.
    """
    from opforge.properties import DescriptorVector

    records: list[GenerationRecord] = []
    index_within: dict[int, int] = {}
    with Path(path).open(newline="", encoding="utf-8") as handle:
        for row in csv.DictReader(handle):
            generation = int(row["generation"])
            index = index_within.get(generation, 0)
            index_within[generation] = index + 1
            valid = row["valid"] == "1"
            vector = None
            if valid and row.get("mw"):
                vector = DescriptorVector(
                    mw=float(row["mw"]),
                    alogp=float(row["alogp"]),
                    hba=int(float(row["hba"])),
                    hbd=int(float(row["hbd"])),
                    psa=float(row["psa"]),
                    rotb=int(float(row["rotb"])),
                    arom=int(float(row["arom"])),
                    alerts=int(float(row["alerts"])),
                )
            records.append(
                GenerationRecord(
                    smiles=row["smiles"],
                    valid=valid,
                    contains_fragment=row["contains_fragment"] == "1",
                    descriptors=vector,
                    qed=float(row["qed"]) if row.get("qed") else None,
                    length=int(row["length"]),
                    generation=generation,
                    index=index,
                )
            )
    return records


def emit_stats_csv(stats, path: str | Path) -> None:
    with Path(path).open("w", newline="", encoding="utf-8") as handle:
        writer = csv.writer(handle)
        writer.writerow(STATS_COLUMNS)
        for s in stats:
            writer.writerow(
                [
                    s.generation,
                    s.count,
                    _format_cell(s.validity_rate),
                    _format_cell(s.uniqueness_rate),
                    _format_cell(s.mean_qed),
                    _format_cell(s.mean_qed_valid_unique),
                ]
            )


def emit_summary_csv(summary: SummaryTable, path: str | Path) -> None:
    """Summary as metric,value rows; affinities are magnitudes (kcal/mol)."""
    rows: list[tuple[str, str]] = []
    for generation, mean in summary.generation_mean_qed.items():
        rows.append((f"generation_{generation}_mean_qed", _format_cell(mean)))
    rows.append(("fraction_logp_below_5", _format_cell(summary.logp_fraction_below)))
    rows.append(("logp_count", str(summary.logp_count)))
    rows.append(
        ("fraction_clearance_below_300", _format_cell(summary.clearance_fraction_below))
    )
    rows.append(("clearance_count", str(summary.clearance_count)))
    rows.append(("fraction_caco2_below_6", _format_cell(summary.caco2_fraction_below)))
    rows.append(("caco2_count", str(summary.caco2_count)))
    rows.append(("affinity_magnitude_min", _format_cell(summary.affinity_magnitude_min)))
    rows.append(("affinity_magnitude_max", _format_cell(summary.affinity_magnitude_max)))
    rows.append(("docking_count", str(summary.docking_count)))
    for molecule_id, magnitude in summary.reference_outside_band.items():
        rows.append((f"reference_outside_band_{molecule_id}", _format_cell(magnitude)))
    rows.append(("joined_count", str(summary.joined_count)))
    rows.append(("unmatched_external", str(summary.unmatched_external)))
    with Path(path).open("w", newline="", encoding="utf-8") as handle:
        writer = csv.writer(handle)
        writer.writerow(("metric", "value"))
        writer.writerows(rows)


def emit_csv(obj, path: str | Path) -> None:
    """Dispatch on payload type: summary table, generation records or stats."""
    if isinstance(obj, SummaryTable):
        emit_summary_csv(obj, path)
    elif obj and isinstance(obj[0], GenerationRecord):
        emit_records_csv(obj, path)
    else:
        emit_stats_csv(obj, path)


# --- matplotlib overview figure ---------------------------------------------------


def write_overview_figure(
    generation_records: list[GenerationRecord],
    external_records: list[ExternalPropertyRecord] = (),
    docking_results: list[DockingResult] = (),
    path: str | Path = "overview.png",
) -> None:
    """Four-panel property-vs-QED overview (PNG via the Agg backend)."""
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    valid = [r for r in generation_records if r.valid and r.qed is not None]
    qed_by_id = {r.molecule_id: r.qed for r in valid}
    docking_points = [
        (d.best_magnitude, qed_by_id[d.molecule_id])
        for d in docking_results
        if d.molecule_id in qed_by_id
    ]
    external_points = {
        name: [
            (getattr(e, name), qed_by_id[e.molecule_id])
            for e in external_records
            if e.molecule_id in qed_by_id and getattr(e, name) is not None
        ]
        for name in ("logp", "clearance", "caco2")
    }

    fig, axes = plt.subplots(2, 2, figsize=(10, 8))
    panels = [
        ("affinity", docking_points),
        ("alogp", [(r.descriptors.alogp, r.qed) for r in valid if r.descriptors]),
        ("clearance", external_points["clearance"]),
        ("caco2", external_points["caco2"]),
    ]
    for ax, (name, points) in zip(axes.flat, panels):
        if points:
            ax.scatter([p[0] for p in points], [p[1] for p in points], s=14, alpha=0.7)
        else:
            ax.text(0.5, 0.5, "no data", ha="center", va="center", transform=ax.transAxes)
        ax.set_xlabel(AXIS_LABELS.get(name, name))
        ax.set_ylabel(AXIS_LABELS["qed"])
    fig.tight_layout()
    fig.savefig(path, dpi=150)
    plt.close(fig)
