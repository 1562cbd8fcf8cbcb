"""Reconstruction-fidelity and pixel-level localization metrics.

Threshold conventions (fixed here and mirrored by the brute-force test
oracles):

- ``auprc`` sweeps every distinct score value v and predicts ``score >= v``,
  so the all-positive operating point is included; the area is the step-wise
  sum of precision * recall-increment over descending thresholds.
- ``max_dice`` sweeps only distinct *positive* scores (a zero threshold is not
  a detection), so score maps disjoint from the ground truth score 0.0 and any
  binarization of the score map is dominated by the maximum.
- Both are rank statistics: strictly monotone transforms of the scores that
  fix zero leave them unchanged.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field

import numpy as np


def _check_pair(a, b) -> tuple[np.ndarray, np.ndarray]:
    a = np.asarray(a)
    b = np.asarray(b)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {a.shape} vs {b.shape}")
    return a, b


def mse(a, b) -> float:
    a, b = _check_pair(a, b)
    d = a.astype(np.float64) - b.astype(np.float64)
    return float(np.mean(d * d))


# ---------------------------------------------------------------------------
# SSIM
# ---------------------------------------------------------------------------

def _gaussian_1d(size: int, sigma: float) -> np.ndarray:
    r = np.arange(size, dtype=np.float64) - (size - 1) / 2.0
    w = np.exp(-0.5 * (r / sigma) ** 2)
    return w / w.sum()


def _filter_same_reflect(img: np.ndarray, w: np.ndarray) -> np.ndarray:
    """Separable correlation with whole-sample reflect padding."""
    p = len(w) // 2
    out = np.pad(img, ((p, p), (0, 0)), mode="reflect")
    out = np.lib.stride_tricks.sliding_window_view(out, len(w), axis=0) @ w
    out = np.pad(out, ((0, 0), (p, p)), mode="reflect")
    out = np.lib.stride_tricks.sliding_window_view(out, len(w), axis=1) @ w
    return out


def ssim(a, b, *, window: int = 11, sigma: float = 1.5, k1: float = 0.01,
         k2: float = 0.03, data_range: float = 1.0, return_map: bool = False):
    """Mean structural similarity with an 11x11 Gaussian window (sigma 1.5).

    The local map is computed at every pixel over reflect-padded inputs; the
    scalar is its mean. Images must be at least window x window.
    """
    a, b = _check_pair(a, b)
    if a.ndim != 2:
        raise ValueError(f"expected 2-D images, got {a.shape}")
    if min(a.shape) < window:
        raise ValueError(f"image {a.shape} smaller than the {window}x{window} window")
    a = a.astype(np.float64)
    b = b.astype(np.float64)
    w = _gaussian_1d(window, sigma)
    c1 = (k1 * data_range) ** 2
    c2 = (k2 * data_range) ** 2
    mu_a = _filter_same_reflect(a, w)
    mu_b = _filter_same_reflect(b, w)
    var_a = _filter_same_reflect(a * a, w) - mu_a * mu_a
    var_b = _filter_same_reflect(b * b, w) - mu_b * mu_b
    cov = _filter_same_reflect(a * b, w) - mu_a * mu_b
    smap = ((2 * mu_a * mu_b + c1) * (2 * cov + c2)) / \
           ((mu_a * mu_a + mu_b * mu_b + c1) * (var_a + var_b + c2))
    if return_map:
        return float(smap.mean()), smap
    return float(smap.mean())


# ---------------------------------------------------------------------------
# Perceptual surrogate
# ---------------------------------------------------------------------------

def _avg_pool2(img: np.ndarray) -> np.ndarray:
    h, w = img.shape
    return img.reshape(h // 2, 2, w // 2, 2).mean(axis=(1, 3))


def _grad_mag_normalized(img: np.ndarray) -> np.ndarray:
    gy, gx = np.gradient(img)
    g = np.hypot(gy, gx)
    top = g.max()
    return g / top if top > 0 else np.zeros_like(g)


class PerceptualSurrogate:
    """Structure-sensitive per-pixel distance standing in for a learned one.

    At dyadic scales 1, 1/2 and 1/4 (dropping scales where the image no longer
    fits the SSIM window or does not divide evenly) it averages two cues:
    (1 - local SSIM) / 2 and the absolute difference of max-normalized
    gradient magnitudes. Maps are upsampled back by nearest neighbor and
    averaged, giving values in [0, 1]; zero iff the inputs agree. Deterministic
    and training-free; intensity shifts score low, structural edits high.
    """

    def __init__(self, window: int = 11, sigma: float = 1.5):
        self.window = window
        self.sigma = sigma

    def per_pixel(self, a, b) -> np.ndarray:
        a, b = _check_pair(a, b)
        h, w = a.shape
        maps = []
        for s in (1, 2, 4):
            if h % s or w % s or h // s < self.window or w // s < self.window:
                continue
            a_s, b_s = a.astype(np.float64), b.astype(np.float64)
            for _ in range(s.bit_length() - 1):
                a_s, b_s = _avg_pool2(a_s), _avg_pool2(b_s)
            _, smap = ssim(a_s, b_s, window=self.window, sigma=self.sigma,
                           return_map=True)
            gdiff = np.abs(_grad_mag_normalized(a_s) - _grad_mag_normalized(b_s))
            for m in ((1.0 - smap) / 2.0, gdiff):
                maps.append(np.repeat(np.repeat(m, s, axis=0), s, axis=1))
        if not maps:
            raise ValueError(f"image {a.shape} too small for the perceptual surrogate")
        out = np.mean(maps, axis=0)
        return np.clip(out, 0.0, None)

    def scalar(self, a, b) -> float:
        return float(self.per_pixel(a, b).mean())


# ---------------------------------------------------------------------------
# Localization metrics
# ---------------------------------------------------------------------------

def _check_scores_gt(scores, gt) -> tuple[np.ndarray, np.ndarray, int]:
    scores, gt = _check_pair(scores, gt)
    gt = gt.astype(bool)
    npos = int(gt.sum())
    if npos == 0:
        raise ValueError("ground truth has no positive pixels")
    if np.any(np.asarray(scores) < 0):
        raise ValueError("scores must be non-negative")
    return np.asarray(scores, dtype=np.float64), gt, npos


def dice(pred, gt) -> float:
    pred, gt = _check_pair(pred, gt)
    pred = pred.astype(bool)
    gt = gt.astype(bool)
    total = int(pred.sum()) + int(gt.sum())
    if total == 0:
        return 1.0
    return 2.0 * int(np.logical_and(pred, gt).sum()) / total


def max_dice(scores, gt) -> float:
    scores, gt, _ = _check_scores_gt(scores, gt)
    best = 0.0
    for thr in np.unique(scores):
        if thr <= 0:
            continue
        best = max(best, dice(scores >= thr, gt))
    return best


def auprc(scores, gt) -> float:
    scores, gt, npos = _check_scores_gt(scores, gt)
    flat = scores.ravel()
    pos = gt.ravel()
    order = np.argsort(-flat, kind="stable")
    sorted_scores = flat[order]
    tp = np.cumsum(pos[order])
    npred = np.arange(1, len(flat) + 1)
    # last index of each tied group = the operating point for that threshold
    last = np.nonzero(np.diff(sorted_scores, append=-np.inf))[0]
    area = 0.0
    prev_recall = 0.0
    for i in last:
        precision = tp[i] / npred[i]
        recall = tp[i] / npos
        area += (recall - prev_recall) * precision
        prev_recall = recall
    return float(area)


# ---------------------------------------------------------------------------
# Evaluation report
# ---------------------------------------------------------------------------

@dataclass
class EvalReport:
    """Long-format per-image metric records plus recomputable aggregates.

    Every record is a dict with at least ``metric`` and ``value``; grouping
    columns (method, noise_level, stratum, seed, image_id, ...) are free-form.
    """

    records: list[dict] = field(default_factory=list)

    def add(self, **record) -> None:
        if "metric" not in record or "value" not in record:
            raise ValueError("record needs 'metric' and 'value'")
        self.records.append(record)

    def aggregate(self, group_by: tuple[str, ...]) -> list[dict]:
        groups: dict[tuple, list[float]] = {}
        for r in self.records:
            key = tuple(r.get(k) for k in group_by) + (r["metric"],)
            groups.setdefault(key, []).append(float(r["value"]))
        out = []
        for key in sorted(groups, key=lambda k: tuple(str(x) for x in k)):
            vals = np.array(groups[key], dtype=np.float64)
            row = dict(zip(group_by, key[:-1]))
            row.update(metric=key[-1], mean=float(vals.mean()),
                       std=float(vals.std(ddof=1)) if len(vals) > 1 else 0.0,
                       n=len(vals))
            out.append(row)
        return out

    def columns(self) -> list[str]:
        cols: list[str] = []
        for r in self.records:
            for k in r:
                if k not in cols:
                    cols.append(k)
        return cols

    def to_csv(self, path) -> None:
        cols = self.columns()
        with open(path, "w", newline="") as f:
            w = csv.writer(f)
            w.writerow(cols)
            for r in self.records:
                w.writerow([_cell(r.get(c)) for c in cols])

    @classmethod
    def from_csv(cls, path) -> "EvalReport":
        out = cls()
        with open(path, newline="") as f:
            reader = csv.reader(f)
            cols = next(reader)
            for row in reader:
                rec = {}
                for c, v in zip(cols, row):
                    if v == "":
                        continue
                    rec[c] = _uncell(v)
                out.records.append(rec)
        return out

    def summary_json(self, path, group_by: tuple[str, ...]) -> None:
        with open(path, "w") as f:
            json.dump(self.aggregate(group_by), f, indent=2, sort_keys=True)
            f.write("\n")


def _cell(v):
    if v is None:
        return ""
    if isinstance(v, float):
        return repr(v)
    return v


def _uncell(v: str):
    try:
        return int(v)
    except ValueError:
        pass
    try:
        return float(v)
    except ValueError:
        return v
