"""Overlap and surface-distance metrics, per-class reports and the paired t-test.

Surfaces are the foreground voxels with at least one 6-neighbour that is
background or outside the grid.  Distances are measured between voxel centres
in millimetres (index * spacing).
"""
from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import asdict, dataclass, field

import numpy as np

from .volume_io import CLASS_NAMES, NUM_CLASSES


class DimsMismatch(ValueError):
    pass


class EmptyMask(ValueError):
    pass


class EmptyReference(ValueError):
    pass


class LengthMismatch(ValueError):
    pass


class TooFewPairs(ValueError):
    pass


def _pair(x, y):
    x = np.asarray(x, dtype=bool)
    y = np.asarray(y, dtype=bool)
    if x.shape != y.shape:
        raise DimsMismatch(f"mask shapes {x.shape} and {y.shape} differ")
    return x, y


def dice(x, y) -> float:
    x, y = _pair(x, y)
    total = int(x.sum()) + int(y.sum())
    if total == 0:
        return 1.0
    return 2.0 * int(np.logical_and(x, y).sum()) / total


def volume_ratio(x, y) -> float:
    x, y = _pair(x, y)
    ref = int(y.sum())
    if ref == 0:
        raise EmptyReference("reference mask is empty")
    return int(x.sum()) / ref


def surface_mask(mask) -> np.ndarray:
    mask = np.asarray(mask, dtype=bool)
    padded = np.pad(mask, 1, constant_values=False)
    interior = mask.copy()
    for ax in range(mask.ndim):
        for shift in (-1, 1):
            nb = np.roll(padded, shift, axis=ax)[tuple(slice(1, -1) for _ in range(mask.ndim))]
            interior &= nb
    return mask & ~interior


@dataclass
class SurfacePointSet:
    indices: np.ndarray  # (n, 3) voxel coordinates
    spacing: tuple

    @property
    def points(self):
        return self.indices * np.asarray(self.spacing, dtype=np.float64)

    def __len__(self):
        return len(self.indices)


def extract_surface(mask, spacing=(1.0, 1.0, 1.0)) -> SurfacePointSet:
    surf = surface_mask(mask)
    if not surf.any():
        raise EmptyMask("mask has no foreground voxels")
    return SurfacePointSet(np.argwhere(surf), tuple(float(s) for s in spacing))


def _min_plus_axis(sq, axis, step, chunk_elems=1 << 22):
    # exact 1D pass: out[i] = min_j sq[j] + ((i - j) * step)^2
    moved = np.moveaxis(sq, axis, -1)
    shape = moved.shape
    n = shape[-1]
    lines = moved.reshape(-1, n)
    offs = np.arange(n, dtype=np.float64)
    kernel = ((offs[:, None] - offs[None, :]) * step) ** 2
    out = np.empty_like(lines)
    per = max(1, chunk_elems // (n * n))
    for start in range(0, lines.shape[0], per):
        block = lines[start:start + per]
        out[start:start + per] = (block[:, None, :] + kernel[None, :, :]).min(axis=2)
    return np.moveaxis(out.reshape(shape), -1, axis)


def squared_distance_transform(sites, spacing=(1.0, 1.0, 1.0)) -> np.ndarray:
    """Exact squared Euclidean distance (mm^2) from every voxel to the nearest ``sites`` voxel."""
    sites = np.asarray(sites, dtype=bool)
    if not sites.any():
        raise EmptyMask("no sites to measure distance to")
    sq = np.where(sites, 0.0, np.inf)
    for axis in range(sites.ndim):
        sq = _min_plus_axis(sq, axis, float(spacing[axis]))
    return sq


def distance_transform(mask, spacing=(1.0, 1.0, 1.0)) -> np.ndarray:
    """Per-voxel distance (mm) to the nearest surface voxel of ``mask``."""
    surf = surface_mask(mask)
    if not surf.any():
        raise EmptyMask("mask has no surface")
    return np.sqrt(squared_distance_transform(surf, spacing))


def surface_distances(x, y, spacing=(1.0, 1.0, 1.0)):
    """Directed nearest-surface distances (x surface -> y surface, y surface -> x surface)."""
    x, y = _pair(x, y)
    sx, sy = surface_mask(x), surface_mask(y)
    if not sx.any() or not sy.any():
        raise EmptyMask("both masks must be nonempty")
    to_y = np.sqrt(squared_distance_transform(sy, spacing))[sx]
    to_x = np.sqrt(squared_distance_transform(sx, spacing))[sy]
    return to_y, to_x


def _msd(a, b):
    return float((a.sum() + b.sum()) / (a.size + b.size))


def nearest_rank(values, pct=95):
    vals = np.sort(np.asarray(values, dtype=np.float64))
    rank = max(1, (pct * vals.size + 99) // 100)
    return float(vals[rank - 1])


def msd(x, y, spacing=(1.0, 1.0, 1.0)) -> float:
    """Both directed distance sums over the total number of surface points."""
    return _msd(*surface_distances(x, y, spacing))


def hd95(x, y, spacing=(1.0, 1.0, 1.0)) -> float:
    a, b = surface_distances(x, y, spacing)
    return nearest_rank(np.concatenate([a, b]), 95)


def hausdorff(x, y, spacing=(1.0, 1.0, 1.0)) -> float:
    a, b = surface_distances(x, y, spacing)
    return float(max(a.max(), b.max()))


# -- statistics ------------------------------------------------------------------

def _betacf(a, b, x, max_iter=300, eps=1e-15):
    # modified Lentz continued fraction for the incomplete beta function
    tiny = 1e-300
    qab, qap, qam = a + b, a + 1.0, a - 1.0
    c = 1.0
    d = 1.0 - qab * x / qap
    d = tiny if abs(d) < tiny else d
    d = 1.0 / d
    h = d
    for m in range(1, max_iter + 1):
        m2 = 2 * m
        aa = m * (b - m) * x / ((qam + m2) * (a + m2))
        d = 1.0 + aa * d
        d = tiny if abs(d) < tiny else d
        c = 1.0 + aa / c
        c = tiny if abs(c) < tiny else c
        d = 1.0 / d
        h *= d * c
        aa = -(a + m) * (qab + m) * x / ((a + m2) * (qap + m2))
        d = 1.0 + aa * d
        d = tiny if abs(d) < tiny else d
        c = 1.0 + aa / c
        c = tiny if abs(c) < tiny else c
        d = 1.0 / d
        delta = d * c
        h *= delta
        if abs(delta - 1.0) < eps:
            return h
    raise ArithmeticError("incomplete beta continued fraction did not converge")


def betainc_regularized(a: float, b: float, x: float) -> float:
    if not 0.0 <= x <= 1.0:
        raise ValueError("x must lie in [0, 1]")
    if x == 0.0 or x == 1.0:
        return x
    log_front = (
        math.lgamma(a + b) - math.lgamma(a) - math.lgamma(b) + a * math.log(x) + b * math.log1p(-x)
    )
    front = math.exp(log_front)
    if x < (a + 1.0) / (a + b + 2.0):
        return front * _betacf(a, b, x) / a
    return 1.0 - front * _betacf(b, a, 1.0 - x) / b


@dataclass
class PairedTTestResult:
    t: float
    p: float
    df: int
    mean_diff: float
    infinite_t: bool = False


def paired_t_test(a, b) -> PairedTTestResult:
    """Two-sided paired t-test on a - b."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape or a.ndim != 1:
        raise LengthMismatch(f"need equal-length 1D samples, got {a.shape} and {b.shape}")
    n = a.size
    if n < 2:
        raise TooFewPairs("need at least two pairs")
    d = a - b
    mean = float(d.mean())
    sd = float(d.std(ddof=1))
    df = n - 1
    if sd == 0.0:
        if mean == 0.0:
            return PairedTTestResult(0.0, 1.0, df, 0.0)
        return PairedTTestResult(math.copysign(math.inf, mean), 0.0, df, mean, infinite_t=True)
    t = mean / (sd / math.sqrt(n))
    p = betainc_regularized(df / 2.0, 0.5, df / (df + t * t))
    return PairedTTestResult(t, min(1.0, p), df, mean)


# -- reports ---------------------------------------------------------------------

METRICS = ("dice", "msd", "hd95", "vr")


@dataclass
class ClassMetrics:
    class_id: int
    name: str
    dice: float | None = None
    msd: float | None = None
    hd95: float | None = None
    hd_max: float | None = None
    vr: float | None = None
    flag: str = ""


@dataclass
class MetricsReport:
    rows: list
    summary: dict = field(default_factory=dict)  # metric -> {"mean", "std", "n"}
    cases: list = field(default_factory=list)  # per-case summaries for multi-case reports

    def row(self, class_id):
        for r in self.rows:
            if r.class_id == class_id:
                return r
        raise KeyError(class_id)

    def to_dict(self):
        return {"rows": [asdict(r) for r in self.rows], "summary": self.summary, "cases": self.cases}

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"

    @classmethod
    def from_dict(cls, d):
        return cls([ClassMetrics(**r) for r in d["rows"]], d.get("summary", {}), d.get("cases", []))

    def to_csv(self) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(["class_id", "segment", "dice", "msd_mm", "hd95_mm", "hd_max_mm", "vr", "flag"])
        for r in self.rows:
            writer.writerow([r.class_id, r.name] + [_fmt(getattr(r, k)) for k in
                                                    ("dice", "msd", "hd95", "hd_max", "vr")] + [r.flag])
        means = [self.summary.get(k, {}).get("mean") for k in ("dice", "msd", "hd95")]
        writer.writerow(["mean", "all"] + [_fmt(m) for m in means] + ["",
                        _fmt(self.summary.get("vr", {}).get("mean")), ""])
        return buf.getvalue()

    def to_table(self) -> str:
        """Aligned text table in the 'mean +- std' style with three decimals."""
        lines = [f"{'segment':<8}{'Dice':>10}{'MSD (mm)':>12}{'HD95 (mm)':>12}{'VR':>10}"]
        for r in self.rows:
            cells = [_fmt(getattr(r, k), blank="-") for k in METRICS]
            suffix = f"  [{r.flag}]" if r.flag else ""
            lines.append(f"{r.name:<8}{cells[0]:>10}{cells[1]:>12}{cells[2]:>12}{cells[3]:>10}{suffix}")
        parts = []
        for k in METRICS:
            s = self.summary.get(k)
            parts.append("-" if not s else f"{s['mean']:.3f} ± {s['std']:.3f}")
        lines.append(f"{'mean':<8}" + "  ".join(parts))
        return "\n".join(lines) + "\n"


def _fmt(v, blank=""):
    return blank if v is None else f"{v:.3f}"


def summarize(values):
    vals = [v for v in values if v is not None]
    if not vals:
        return None
    arr = np.asarray(vals, dtype=np.float64)
    return {"mean": float(arr.mean()), "std": float(arr.std()), "n": int(arr.size)}


def class_metrics(pred_mask, truth_mask, spacing, class_id=1) -> ClassMetrics:
    row = ClassMetrics(class_id, CLASS_NAMES[class_id] if class_id < NUM_CLASSES else str(class_id))
    has_p, has_t = bool(pred_mask.any()), bool(truth_mask.any())
    if not has_p and not has_t:
        row.flag = "absent in both"
        return row
    row.dice = dice(pred_mask, truth_mask)
    if has_t:
        row.vr = volume_ratio(pred_mask, truth_mask)
    if has_p and has_t:
        a, b = surface_distances(pred_mask, truth_mask, spacing)
        both = np.concatenate([a, b])
        row.msd = _msd(a, b)
        row.hd95 = nearest_rank(both, 95)
        row.hd_max = float(both.max())
    else:
        row.flag = "missing in prediction" if has_t else "missing in truth"
    return row


def build_report(pred, truth) -> MetricsReport:
    """Per-segment metrics for classes 1..9 plus mean/std over classes present in either volume."""
    if tuple(pred.dims) != tuple(truth.dims) or tuple(pred.spacing) != tuple(truth.spacing):
        raise DimsMismatch("prediction and truth must share dims and spacing")
    rows = [
        class_metrics(pred.data == c, truth.data == c, truth.spacing, c)
        for c in range(1, NUM_CLASSES)
    ]
    return MetricsReport(rows, _summary(rows))


def _summary(rows):
    present = [r for r in rows if r.flag != "absent in both"]
    out = {}
    for k in METRICS:
        s = summarize([getattr(r, k) for r in present])
        if s is not None:
            out[k] = s
    return out


def aggregate_reports(reports, case_ids) -> MetricsReport:
    """Cross-case report: per-class means over cases, summary over per-case mean values."""
    rows = []
    for c in range(1, NUM_CLASSES):
        per = [rep.row(c) for rep in reports]
        row = ClassMetrics(c, CLASS_NAMES[c])
        for k in ("dice", "msd", "hd95", "hd_max", "vr"):
            s = summarize([getattr(r, k) for r in per])
            setattr(row, k, None if s is None else s["mean"])
        if all(r.flag == "absent in both" for r in per):
            row.flag = "absent in both"
        rows.append(row)
    cases = []
    for cid, rep in zip(case_ids, reports):
        cases.append({"id": cid, **{k: rep.summary.get(k, {}).get("mean") for k in METRICS}})
    summary = {}
    for k in METRICS:
        s = summarize([c[k] for c in cases])
        if s is not None:
            summary[k] = s
    return MetricsReport(rows, summary, cases)


def compare_reports(a: MetricsReport, b: MetricsReport) -> dict:
    """Paired t-tests per metric: over matching cases when both reports list them, else over classes."""
    out = {}
    if a.cases and b.cases:
        ids = [c["id"] for c in a.cases if c["id"] in {x["id"] for x in b.cases}]
        amap = {c["id"]: c for c in a.cases}
        bmap = {c["id"]: c for c in b.cases}
        pairs = {k: [(amap[i][k], bmap[i][k]) for i in ids] for k in METRICS}
        unit = "cases"
    else:
        pairs = {k: [(getattr(ra, k), getattr(rb, k)) for ra, rb in zip(a.rows, b.rows)] for k in METRICS}
        unit = "classes"
    for k in METRICS:
        usable = [(x, y) for x, y in pairs[k] if x is not None and y is not None]
        entry = {"n": len(usable), "paired_over": unit}
        if len(usable) >= 2:
            xs, ys = zip(*usable)
            res = paired_t_test(xs, ys)
            entry.update(mean_a=float(np.mean(xs)), mean_b=float(np.mean(ys)), **asdict(res))
        out[k] = entry
    return out


def format_comparison(result: dict, name_a="A", name_b="B") -> str:
    lines = [f"{'metric':<8}{name_a:>12}{name_b:>12}{'t':>10}{'p-value':>12}{'n':>5}"]
    for k in METRICS:
        e = result[k]
        if "t" not in e:
            lines.append(f"{k:<8}{'-':>12}{'-':>12}{'-':>10}{'-':>12}{e['n']:>5}")
            continue
        t = "inf" if e["infinite_t"] else f"{e['t']:.3f}"
        lines.append(f"{k:<8}{e['mean_a']:>12.3f}{e['mean_b']:>12.3f}{t:>10}{e['p']:>12.4g}{e['n']:>5}")
    return "\n".join(lines) + "\n"
