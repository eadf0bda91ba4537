"""Segmentation quality metrics: Dice overlap and 95th-percentile
Hausdorff distance on 2-D binary masks.

Conventions (documented because they are oracle-checked):

* Boundary pixels are foreground pixels with at least one 4-connected
  background neighbor; pixels outside the image count as background, so
  foreground on the image border is boundary.
* HD95 uses the nearest-rank percentile, index ceil(0.95*n) (1-based) on
  the sorted multiset of boundary-to-boundary distances, computed
  exactly via integer arithmetic. The symmetric value is the max of the
  two directed percentiles; a percentile over the union of both directed
  multisets is available via ``method="union"`` for comparison.
* Degenerate cases: both masks empty scores DSC 1.0 / HD95 0.0; exactly
  one empty scores DSC 0.0 / HD95 equal to the image diagonal
  sqrt(H^2 + W^2). Such cases are counted separately in the report.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field

import numpy as np

REGIONS = ("WT", "TC", "ET")

_EDT_INF = 1.0e12  # squared-distance sentinel, far above any image diagonal


def _as_bool_mask(m: np.ndarray, name: str) -> np.ndarray:
    m = np.asarray(m)
    if m.ndim != 2:
        raise ValueError(f"{name} must be 2-D, got shape {m.shape}")
    if m.dtype != bool:
        vals = np.unique(m)
        if not np.all(np.isin(vals, (0, 1))):
            raise ValueError(f"{name} must be binary, found values {vals[:5]}")
        m = m.astype(bool)
    return m


def dice(pred: np.ndarray, gt: np.ndarray) -> float:
    """Dice similarity coefficient 2|P and G| / (|P| + |G|); 1.0 when both
    masks are empty."""
    p = _as_bool_mask(pred, "pred")
    g = _as_bool_mask(gt, "gt")
    if p.shape != g.shape:
        raise ValueError(f"shape mismatch: {p.shape} vs {g.shape}")
    np_, ng = int(p.sum()), int(g.sum())
    if np_ == 0 and ng == 0:
        return 1.0
    inter = int(np.count_nonzero(p & g))
    return 2.0 * inter / (np_ + ng)


def extract_boundary(mask: np.ndarray) -> np.ndarray:
    """Coordinates (row, col) of boundary pixels, in row-major order."""
    m = _as_bool_mask(mask, "mask")
    if not m.any():
        return np.empty((0, 2), dtype=np.int64)
    padded = np.pad(m, 1, constant_values=False)
    core = (padded[:-2, 1:-1] & padded[2:, 1:-1] &
            padded[1:-1, :-2] & padded[1:-1, 2:])
    return np.argwhere(m & ~core)


def _dt1d(f: np.ndarray) -> np.ndarray:
    """Exact 1-D squared distance transform (lower envelope of parabolas)."""
    n = f.shape[0]
    d = np.empty(n)
    v = np.zeros(n, dtype=np.int64)
    z = np.empty(n + 1)
    z[0] = -np.inf
    z[1] = np.inf
    k = 0
    for q in range(1, n):
        s = ((f[q] + q * q) - (f[v[k]] + v[k] * v[k])) / (2 * q - 2 * v[k])
        while s <= z[k]:
            k -= 1
            s = ((f[q] + q * q) - (f[v[k]] + v[k] * v[k])) / (2 * q - 2 * v[k])
        k += 1
        v[k] = q
        z[k] = s
        z[k + 1] = np.inf
    k = 0
    for q in range(n):
        while z[k + 1] < q:
            k += 1
        d[q] = (q - v[k]) ** 2 + f[v[k]]
    return d


def edt(points: np.ndarray, shape: tuple) -> np.ndarray:
    """Exact Euclidean distance transform of a nonempty point set.

    Two separable passes of the 1-D squared distance transform (columns,
    then rows), then a square root. Each output cell holds the exact
    distance to the nearest listed point.
    """
    points = np.asarray(points)
    if points.size == 0:
        raise ValueError("empty point set")
    h, w = shape
    sq = np.full((h, w), _EDT_INF)
    sq[points[:, 0], points[:, 1]] = 0.0
    for j in range(w):
        sq[:, j] = _dt1d(sq[:, j])
    for i in range(h):
        sq[i, :] = _dt1d(sq[i, :])
    return np.sqrt(sq)


def _nearest_rank_p95(values: np.ndarray) -> float:
    """Nearest-rank 95th percentile: sorted value at 1-based index
    ceil(0.95*n), computed as (19*n + 19) // 20 to avoid float rounding."""
    n = values.shape[0]
    idx = (19 * n + 19) // 20
    return float(np.sort(values)[idx - 1])


def hd95(pred: np.ndarray, gt: np.ndarray, method: str = "directed_max") -> float:
    """95th-percentile Hausdorff distance between mask boundaries, in pixels."""
    p = _as_bool_mask(pred, "pred")
    g = _as_bool_mask(gt, "gt")
    if p.shape != g.shape:
        raise ValueError(f"shape mismatch: {p.shape} vs {g.shape}")
    if method not in ("directed_max", "union"):
        raise ValueError(f"unknown hd95 method {method!r}")
    p_empty, g_empty = not p.any(), not g.any()
    if p_empty and g_empty:
        return 0.0
    if p_empty or g_empty:
        return math.hypot(*p.shape)
    bp = extract_boundary(p)
    bg = extract_boundary(g)
    d_pg = edt(bg, p.shape)[bp[:, 0], bp[:, 1]]
    d_gp = edt(bp, p.shape)[bg[:, 0], bg[:, 1]]
    if method == "union":
        return _nearest_rank_p95(np.concatenate([d_pg, d_gp]))
    return max(_nearest_rank_p95(d_pg), _nearest_rank_p95(d_gp))


def evaluate_regions(pred, gt_masks, threshold: float = 0.5,
                     hd95_method: str = "directed_max") -> dict:
    """Threshold (S,S,3) probabilities and score each region independently.

    ``gt_masks`` is anything with ``wt``/``tc``/``et`` binary attributes or
    an (S,S,3) array in region order (WT, TC, ET). Returns
    ``{region: {"dsc": float, "hd95": float}}``.
    """
    if not 0.0 < threshold < 1.0:
        raise ValueError(f"threshold must be in (0,1), got {threshold}")
    probs = np.asarray(pred.data if hasattr(pred, "data") else pred)
    if probs.ndim != 3 or probs.shape[-1] != len(REGIONS):
        raise ValueError(f"expected (S,S,3) probabilities, got {probs.shape}")
    if hasattr(gt_masks, "wt"):
        gt = np.stack([gt_masks.wt, gt_masks.tc, gt_masks.et], axis=-1)
    else:
        gt = np.asarray(gt_masks)
    if gt.shape != probs.shape:
        raise ValueError(f"shape mismatch: pred {probs.shape} vs gt {gt.shape}")
    hard = probs > threshold
    out = {}
    for c, region in enumerate(REGIONS):
        out[region] = {
            "dsc": dice(hard[:, :, c], gt[:, :, c]),
            "hd95": hd95(hard[:, :, c], gt[:, :, c], method=hd95_method),
        }
    return out


# ---------------------------------------------------------------------------
# Report container
# ---------------------------------------------------------------------------

@dataclass
class MetricsReport:
    """Per-sample DSC/HD95 records with per-region aggregate means."""

    records: list = field(default_factory=list)
    degenerate: dict = field(default_factory=lambda: {
        "both_empty": 0, "pred_empty": 0, "gt_empty": 0})

    def add_sample(self, sample_id: str, region_scores: dict,
                   pred_hard: np.ndarray | None = None,
                   gt: np.ndarray | None = None) -> None:
        for region in REGIONS:
            scores = region_scores[region]
            self.records.append({
                "sample_id": sample_id,
                "region": region,
                "dsc": float(scores["dsc"]),
                "hd95": float(scores["hd95"]),
            })
        if pred_hard is not None and gt is not None:
            for c in range(len(REGIONS)):
                pe = not pred_hard[:, :, c].any()
                ge = not gt[:, :, c].any()
                if pe and ge:
                    self.degenerate["both_empty"] += 1
                elif pe:
                    self.degenerate["pred_empty"] += 1
                elif ge:
                    self.degenerate["gt_empty"] += 1

    def aggregates(self) -> dict:
        agg = {}
        for region in REGIONS:
            rows = [r for r in self.records if r["region"] == region]
            agg[region] = {
                "dsc_mean": float(np.mean([r["dsc"] for r in rows])) if rows else float("nan"),
                "hd95_mean": float(np.mean([r["hd95"] for r in rows])) if rows else float("nan"),
                "n": len(rows),
            }
        return agg

    def to_dict(self) -> dict:
        return {
            "records": self.records,
            "aggregates": self.aggregates(),
            "degenerate": self.degenerate,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    @classmethod
    def from_dict(cls, d: dict) -> "MetricsReport":
        rep = cls(records=list(d["records"]))
        rep.degenerate = dict(d["degenerate"])
        return rep
