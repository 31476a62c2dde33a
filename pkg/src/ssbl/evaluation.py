"""Overlap and surface-distance metrics, flow end-point error, per-phase reports."""

from __future__ import annotations

import csv
import json
import math
from dataclasses import asdict, dataclass, fields
from pathlib import Path

import numpy as np


class EmptySetError(ValueError):
    """Hausdorff distance requested for an empty structure."""


def _labels(m) -> np.ndarray:
    return np.asarray(getattr(m, "data", m))


def _pair(a, b, cls: int) -> tuple[np.ndarray, np.ndarray]:
    la, lb = _labels(a), _labels(b)
    if la.shape != lb.shape:
        raise ValueError(f"mask extents differ: {la.shape} vs {lb.shape}")
    return la == cls, lb == cls


def dice(a, b, cls: int = 1) -> float:
    """2|A n B| / (|A| + |B|); 1 when both are empty."""
    sa, sb = _pair(a, b, cls)
    total = int(sa.sum()) + int(sb.sum())
    if total == 0:
        return 1.0
    return 2.0 * int((sa & sb).sum()) / total


def jaccard(a, b, cls: int = 1) -> float:
    """|A n B| / |A u B|; 1 when both are empty."""
    sa, sb = _pair(a, b, cls)
    union = int((sa | sb).sum())
    if union == 0:
        return 1.0
    return int((sa & sb).sum()) / union


# ---------------------------------------------------------------------------
# Hausdorff
# ---------------------------------------------------------------------------

def boundary_voxels(region: np.ndarray) -> np.ndarray:
    """Voxels of ``region`` with at least one 6-neighbour outside it (the
    outside of the volume counts as outside)."""
    region = np.asarray(region, dtype=bool)
    padded = np.pad(region, 1, constant_values=False)
    interior = region.copy()
    for axis in range(3):
        for shift in (-1, 1):
            interior &= np.roll(padded, shift, axis=axis)[1:-1, 1:-1, 1:-1]
    return region & ~interior


def _sq_dist(pa: np.ndarray, pb: np.ndarray) -> np.ndarray:
    # shared by both routes so they agree bit for bit
    d = pa[:, None, :] - pb[None, :, :]
    return (d * d).sum(axis=-1)


def _directed_brute(pa: np.ndarray, pb: np.ndarray, chunk_elems: int = 1 << 22) -> float:
    step = max(1, chunk_elems // max(len(pb), 1))
    worst = 0.0
    for i in range(0, len(pa), step):
        worst = max(worst, float(_sq_dist(pa[i:i + step], pb).min(axis=1).max()))
    return worst


def _directed_grid(ia: np.ndarray, ib: np.ndarray, spacing: np.ndarray, cell: int) -> float:
    """Same quantity as the brute-force route, searching B only in nearby buckets.

    Points of A are handled per bucket; the candidate ring grows until every
    point's current nearest distance is no larger than the smallest distance
    any point outside the ring could have.
    """
    pa, pb = ia * spacing, ib * spacing
    ca, cb = ia // cell, ib // cell
    smin = float(spacing.min())
    max_ring = int(max(np.abs(ca.max(0) - cb.min(0)).max(), np.abs(cb.max(0) - ca.min(0)).max())) + 1
    order = np.lexsort(ca.T[::-1])
    keys = ca[order]
    starts = np.flatnonzero(np.r_[True, (np.diff(keys, axis=0) != 0).any(axis=1)])
    ends = np.r_[starts[1:], len(order)]
    worst = 0.0
    for s, e in zip(starts, ends):
        members = order[s:e]
        cheb = np.abs(cb - keys[s]).max(axis=1)
        ring = 0
        while True:
            near = cheb <= ring
            if near.any():
                best = _sq_dist(pa[members], pb[near]).min(axis=1)
                bound = (ring * cell + 1) * smin
                if ring >= max_ring or best.max() <= bound * bound:
                    break
            ring += 1
        worst = max(worst, float(best.max()))
    return worst


def hausdorff(a, b, cls: int = 1, spacing=(1.0, 1.0, 1.0), method: str = "grid", cell: int = 4) -> float:
    """Symmetric Hausdorff distance in mm between the boundary voxels of class ``cls``.

    ``method`` is ``"grid"`` (bucketed search) or ``"brute"`` (all pairs); the
    two give identical results.
    """
    sa, sb = _pair(a, b, cls)
    if not sa.any() or not sb.any():
        raise EmptySetError(f"class {cls} is empty in {'both masks' if not (sa.any() or sb.any()) else 'one mask'}")
    sp = np.asarray(spacing, dtype=np.float64)
    ia = np.argwhere(boundary_voxels(sa)).astype(np.float64)
    ib = np.argwhere(boundary_voxels(sb)).astype(np.float64)
    if method == "brute":
        pa, pb = ia * sp, ib * sp
        sq = max(_directed_brute(pa, pb), _directed_brute(pb, pa))
    elif method == "grid":
        ia_i, ib_i = ia.astype(np.int64), ib.astype(np.int64)
        sq = max(_directed_grid(ia_i, ib_i, sp, cell), _directed_grid(ib_i, ia_i, sp, cell))
    else:
        raise ValueError(f"unknown method {method!r}")
    return math.sqrt(sq)


def endpoint_error(f, truth, region: np.ndarray | None = None) -> float:
    """Mean Euclidean norm of the per-voxel difference between two fields."""
    fa = np.asarray(getattr(f, "data", f), dtype=np.float64)
    fb = np.asarray(getattr(truth, "data", truth), dtype=np.float64)
    if fa.shape != fb.shape or fa.ndim != 4 or fa.shape[0] != 3:
        raise ValueError(f"field shapes {fa.shape} and {fb.shape} are not matching (3, X, Y, Z)")
    norm = np.sqrt(((fa - fb) ** 2).sum(axis=0))
    if region is not None:
        norm = norm[np.asarray(region, dtype=bool)]
    return float(norm.mean())


# ---------------------------------------------------------------------------
# Reports
# ---------------------------------------------------------------------------

@dataclass
class MetricRecord:
    study_id: str
    time_index: int
    class_id: int
    dice: float
    jaccard: float
    hausdorff_mm: float | None
    epe_voxels: float | None = None
    error: str | None = None
    kind: str = "phase"


@dataclass
class PhaseReport:
    records: list[MetricRecord]
    summary: list[MetricRecord]
    skipped: int

    def rows(self) -> list[MetricRecord]:
        return self.records + self.summary

    def mean_dice(self, cls: int = 1) -> float:
        for row in self.summary:
            if row.kind == "mean" and row.class_id == cls:
                return row.dice
        raise KeyError(cls)


def _stats(values: list[float]) -> tuple[float | None, float | None]:
    if not values:
        return None, None
    arr = np.asarray(values, dtype=np.float64)
    return float(arr.mean()), float(arr.std())


def summarize(records: list[MetricRecord], study_id: str = "all") -> tuple[list[MetricRecord], int]:
    """Mean and (population) standard deviation per class. Hausdorff values
    missing because of an empty structure are left out and counted."""
    summary, skipped = [], 0
    for cls in sorted({r.class_id for r in records}):
        rows = [r for r in records if r.class_id == cls]
        hd = [r.hausdorff_mm for r in rows if r.hausdorff_mm is not None]
        skipped += len(rows) - len(hd)
        epe = [r.epe_voxels for r in rows if r.epe_voxels is not None]
        d, j, h, e = (_stats([r.dice for r in rows]), _stats([r.jaccard for r in rows]),
                      _stats(hd), _stats(epe))
        for k, kind in enumerate(("mean", "std")):
            summary.append(MetricRecord(study_id, -1, cls, d[k], j[k], h[k], e[k], None, kind))
    return summary, skipped


def evaluate_phase(pred, truth, spacing, study_id: str = "", time_index: int = 0, cls: int = 1,
                   field=None, true_field=None) -> MetricRecord:
    hd, err = None, None
    try:
        hd = hausdorff(pred, truth, cls, spacing)
    except EmptySetError:
        err = "empty-set"
    epe = endpoint_error(field, true_field) if field is not None and true_field is not None else None
    return MetricRecord(study_id, time_index, cls, dice(pred, truth, cls), jaccard(pred, truth, cls), hd, epe, err)


def per_phase_report(predictions, truths, spacing=(1.0, 1.0, 1.0), study_id: str = "",
                     classes=(1,), fields=None, true_fields=None) -> PhaseReport:
    """One record per (phase, class) plus mean/std rows."""
    if len(predictions) != len(truths):
        raise ValueError(f"{len(predictions)} predictions for {len(truths)} ground-truth masks")
    records = []
    for t, (p, g) in enumerate(zip(predictions, truths)):
        for cls in classes:
            f = fields[t] if fields is not None else None
            tf = true_fields[t] if true_fields is not None else None
            records.append(evaluate_phase(p, g, spacing, study_id, t, cls, f, tf))
    summary, skipped = summarize(records, study_id)
    return PhaseReport(records, summary, skipped)


CSV_COLUMNS = [f.name for f in fields(MetricRecord)]


def write_report_csv(rows: list[MetricRecord], path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(CSV_COLUMNS)
        for r in rows:
            writer.writerow(["" if v is None else (repr(v) if isinstance(v, float) else v)
                             for v in (getattr(r, c) for c in CSV_COLUMNS)])


def read_report_csv(path) -> list[MetricRecord]:
    out = []
    with Path(path).open(newline="") as fh:
        for row in csv.DictReader(fh):
            def num(key, cast=float):
                return None if row[key] == "" else cast(row[key])
            out.append(MetricRecord(row["study_id"], int(row["time_index"]), int(row["class_id"]),
                                    num("dice"), num("jaccard"), num("hausdorff_mm"),
                                    num("epe_voxels"), row["error"] or None, row["kind"]))
    return out


def write_report_json(report: PhaseReport, path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    doc = {
        "summary": [asdict(r) for r in report.summary],
        "per_phase": [asdict(r) for r in report.records],
        "skipped_hausdorff": report.skipped,
    }
    path.write_text(json.dumps(doc, indent=1) + "\n")
