"""Synthetic phantom corpus: healthy generation, lesion injection, dataset
persistence.

A phantom is a stack of nested, randomly rotated ellipses ("tissue layers")
with per-layer intensity bands, deformed by a smooth random warp field and
textured with low-amplitude smooth noise. Anomalies are star-convex blobs
(radial harmonic polygons) blended hard-edged into the tissue, either darker
(hypo) or brighter (hyper) than what they cover, so the altered-pixel set is
exactly the ground-truth mask.

Intensities stay in [background, 0.92]: the headroom keeps hyper lesions
distinguishable and bounded away from 1.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .imgio import FormatError, read_image, write_image
from .seeding import derive_rng

# lesion pixel-count classes at 64x64; quarter-area rescale of the 128x128
# reference cutoffs (<71 px and >=570 px)
DEFAULT_SIZE_RANGES: dict[str, tuple[int, int]] = {
    "small": (4, 17),
    "medium": (18, 142),
    "large": (143, 350),
}

BLEND_EPS = 1e-3  # pixels changed by more than this count as lesion


@dataclass(frozen=True)
class PhantomParams:
    size: int = 64
    n_layers: tuple[int, int] = (3, 5)
    bands: tuple[tuple[float, float], ...] = (
        (0.78, 0.90), (0.42, 0.55), (0.58, 0.72), (0.26, 0.38))
    background: float = 0.06
    deform_amplitude: float = 2.5
    deform_grid: int = 8
    texture_amplitude: float = 0.02

    def validate(self) -> None:
        if self.size % 4:
            raise ValueError("size must be divisible by 4")
        if self.size < 16:
            raise ValueError("size too small")
        if not (1 <= self.n_layers[0] <= self.n_layers[1]):
            raise ValueError("bad layer count range")
        for lo, hi in self.bands:
            if not (0.0 <= lo <= hi <= 1.0):
                raise ValueError("intensity bands must lie within [0, 1]")
        if self.deform_amplitude < 0 or self.texture_amplitude < 0:
            raise ValueError("amplitudes must be non-negative")
        if self.deform_grid < 2:
            raise ValueError("deform_grid must be >= 2")


@dataclass(frozen=True)
class AnomalySpec:
    size_class: str = "medium"
    ranges: dict[str, tuple[int, int]] = field(
        default_factory=lambda: dict(DEFAULT_SIZE_RANGES))
    intensity_mode: str = "hypo"
    irregularity: float = 0.35

    def validate(self) -> None:
        order = ["small", "medium", "large"]
        if self.size_class not in order:
            raise ValueError(f"unknown size class {self.size_class!r}")
        if self.intensity_mode not in ("hypo", "hyper"):
            raise ValueError(f"unknown intensity mode {self.intensity_mode!r}")
        if not (0.0 <= self.irregularity < 1.0):
            raise ValueError("irregularity must be in [0, 1)")
        prev_hi = 0
        for cls in order:
            lo, hi = self.ranges[cls]
            if lo <= prev_hi or hi < lo:
                raise ValueError("class ranges must be disjoint and ordered")
            prev_hi = hi


@dataclass
class LabeledSample:
    image: np.ndarray
    gt_mask: np.ndarray
    lesion_pixels: int
    stratum: str | None = None
    seed: int | None = None
    sample_id: str | None = None

    def validate(self, ranges: dict[str, tuple[int, int]] | None = None) -> None:
        if int(self.gt_mask.sum()) != self.lesion_pixels:
            raise ValueError("lesion_pixels does not match the mask popcount")
        if ranges is not None and self.stratum in ranges:
            lo, hi = ranges[self.stratum]
            if not (lo <= self.lesion_pixels <= hi):
                raise ValueError(
                    f"{self.lesion_pixels} px inconsistent with stratum {self.stratum}")


# ---------------------------------------------------------------------------
# healthy phantoms
# ---------------------------------------------------------------------------

def _bilinear_upsample(coarse: np.ndarray, size: int) -> np.ndarray:
    g = coarse.shape[0]
    pos = np.linspace(0.0, g - 1.0, size)
    i0 = np.clip(pos.astype(int), 0, g - 2)
    frac = pos - i0
    rows = coarse[i0] * (1 - frac)[:, None] + coarse[i0 + 1] * frac[:, None]
    cols = rows[:, i0] * (1 - frac)[None, :] + rows[:, i0 + 1] * frac[None, :]
    return cols


def _ellipse_mask(ys, xs, cy, cx, a, b, theta) -> np.ndarray:
    dy = ys - cy
    dx = xs - cx
    u = np.cos(theta) * dx + np.sin(theta) * dy
    v = -np.sin(theta) * dx + np.cos(theta) * dy
    return (u / a) ** 2 + (v / b) ** 2 <= 1.0


def _phantom_stages(params: PhantomParams, rng_geom, rng_warp, rng_tex) -> np.ndarray:
    """Phantom from three independent streams (geometry, warp, texture)."""
    S = params.size
    cy = S / 2 + rng_geom.uniform(-3, 3)
    cx = S / 2 + rng_geom.uniform(-3, 3)
    a = rng_geom.uniform(0.33, 0.41) * S
    b = rng_geom.uniform(0.39, 0.47) * S
    theta = rng_geom.uniform(-0.3, 0.3)
    n = int(rng_geom.integers(params.n_layers[0], params.n_layers[1] + 1))
    layers = []
    for i in range(n):
        lo, hi = params.bands[i % len(params.bands)]
        layers.append((cy, cx, a, b, theta, rng_geom.uniform(lo, hi)))
        cy = cy + rng_geom.uniform(-2, 2)
        cx = cx + rng_geom.uniform(-2, 2)
        scale = rng_geom.uniform(0.55, 0.8)
        a, b = a * scale, b * scale
        theta = theta + rng_geom.uniform(-0.25, 0.25)

    yy, xx = np.mgrid[0:S, 0:S].astype(np.float64)
    if params.deform_amplitude > 0:
        g = params.deform_grid
        dy = _bilinear_upsample(rng_warp.standard_normal((g, g)), S)
        dx = _bilinear_upsample(rng_warp.standard_normal((g, g)), S)
        yy = yy + params.deform_amplitude * dy
        xx = xx + params.deform_amplitude * dx

    img = np.full((S, S), params.background, dtype=np.float64)
    for cy_, cx_, a_, b_, th_, val in layers:
        img[_ellipse_mask(yy, xx, cy_, cx_, a_, b_, th_)] = val

    if params.texture_amplitude > 0:
        tex = _bilinear_upsample(rng_tex.standard_normal((S // 4, S // 4)), S)
        img = np.where(img > params.background + 1e-9,
                       img + params.texture_amplitude * tex, img)
    return np.clip(img, 0.0, 0.92).astype(np.float32)


def generate_healthy(params: PhantomParams, rng: np.random.Generator) -> np.ndarray:
    params.validate()
    rng_geom, rng_warp, rng_tex = rng.spawn(3)
    return _phantom_stages(params, rng_geom, rng_warp, rng_tex)


def foreground_mask(img: np.ndarray, threshold: float = 0.22) -> np.ndarray:
    return (np.asarray(img) >= threshold).astype(np.uint8)


# ---------------------------------------------------------------------------
# anomaly injection
# ---------------------------------------------------------------------------

def _erode(m: np.ndarray, k: int) -> np.ndarray:
    """Binary erosion with a k x k element; outside the image is background."""
    r = k // 2
    mp = np.pad(m.astype(bool), r)
    out = np.ones(m.shape, dtype=bool)
    h, w = m.shape
    for i in range(k):
        for j in range(k):
            out &= mp[i:i + h, j:j + w]
    return out.astype(np.uint8)


def _blob_mask(shape, center, radius, amps, phases) -> np.ndarray:
    yy, xx = np.mgrid[0:shape[0], 0:shape[1]].astype(np.float64)
    dy = yy - center[0]
    dx = xx - center[1]
    dist = np.hypot(dy, dx)
    ang = np.arctan2(dy, dx)
    s = np.zeros_like(ang)
    for k, (a, p) in enumerate(zip(amps, phases), start=2):
        s += a * np.cos(k * ang + p)
    return dist <= radius * (1.0 + s)


def inject_anomaly(img: np.ndarray, spec: AnomalySpec, rng: np.random.Generator,
                   ) -> LabeledSample:
    """Blend one star-convex lesion of the requested size class into the
    tissue; the ground-truth mask is exactly the set of altered pixels."""
    spec.validate()
    img = np.asarray(img, dtype=np.float32)
    lo, hi = spec.ranges[spec.size_class]
    fg = foreground_mask(img)

    for _ in range(30):
        target = int(rng.integers(lo, hi + 1))
        r0 = np.sqrt(target / np.pi)
        amps = rng.normal(0.0, 1.0, size=3) / np.arange(2, 5)
        peak = np.abs(amps).sum()
        if peak > 0:
            amps = amps / peak * spec.irregularity
        phases = rng.uniform(0.0, 2 * np.pi, size=3)

        reach = int(np.ceil(r0 * (1 + spec.irregularity))) + 1
        eligible = _erode(fg, 2 * reach + 1)
        coords = np.argwhere(eligible)
        if len(coords) == 0:
            continue
        center = coords[int(rng.integers(len(coords)))]

        lo_s, hi_s = 0.2, 1.0
        while _blob_mask(img.shape, center, hi_s * r0, amps, phases).sum() < lo \
                and hi_s < 8.0:
            hi_s *= 1.4
        blob = None
        for _ in range(50):
            mid = 0.5 * (lo_s + hi_s)
            cand = _blob_mask(img.shape, center, mid * r0, amps, phases)
            cnt = int(cand.sum())
            if cnt < lo:
                lo_s = mid
            elif cnt > hi:
                hi_s = mid
            else:
                blob = cand
                break
        if blob is None or not np.all(fg[blob]):
            continue

        out = img.copy()
        if spec.intensity_mode == "hypo":
            out[blob] = img[blob] * 0.45
        else:
            out[blob] = 0.55 + img[blob] * 0.45
        sample = LabeledSample(image=out, gt_mask=blob.astype(np.uint8),
                               lesion_pixels=int(blob.sum()),
                               stratum=spec.size_class)
        sample.validate(spec.ranges)
        changed = int((np.abs(out.astype(np.float64) - img) > BLEND_EPS).sum())
        if changed != sample.lesion_pixels:
            raise AssertionError("blend epsilon recount mismatch")
        return sample
    raise ValueError(
        f"could not place a {spec.size_class} lesion inside the foreground")


# ---------------------------------------------------------------------------
# normalization and stratification
# ---------------------------------------------------------------------------

def normalize_98(img: np.ndarray, percentile: float = 98.0) -> np.ndarray:
    """Divide by the given intensity percentile and clip to [0, 1]."""
    img = np.asarray(img)
    if not np.any(img > 0):
        raise ValueError("cannot normalize an all-zero image")
    q = np.percentile(img, percentile)
    if q <= 0:
        raise ValueError(f"{percentile}th percentile is not positive")
    return np.clip(img / q, 0.0, 1.0).astype(np.float32)


def stratify(samples: list[LabeledSample], q_low: float = 0.25,
             q_high: float = 0.75) -> list[str]:
    """Quartile size strata; boundary ties fall to 'medium'."""
    if not samples:
        raise ValueError("no samples to stratify")
    sizes = np.array([s.lesion_pixels for s in samples], dtype=np.float64)
    if np.any(sizes <= 0):
        raise ValueError("stratification needs positive lesion sizes")
    q1 = np.percentile(sizes, 100 * q_low)
    q3 = np.percentile(sizes, 100 * q_high)
    return ["small" if s < q1 else "large" if s > q3 else "medium" for s in sizes]


# ---------------------------------------------------------------------------
# dataset persistence
# ---------------------------------------------------------------------------

class DatasetError(Exception):
    pass


def dataset_save(samples: list[LabeledSample], directory) -> None:
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    manifest = {"format": "anodiff-dataset", "version": 1, "samples": []}
    for i, s in enumerate(samples):
        sid = s.sample_id or f"s{i:05d}"
        write_image(d / f"{sid}.img", s.image)
        entry = {"id": sid, "image": f"{sid}.img", "mask": None,
                 "lesion_pixels": s.lesion_pixels, "stratum": s.stratum,
                 "seed": s.seed}
        if s.lesion_pixels > 0:
            write_image(d / f"{sid}.msk", s.gt_mask.astype(np.uint8))
            entry["mask"] = f"{sid}.msk"
        manifest["samples"].append(entry)
    (d / "manifest.json").write_text(json.dumps(manifest, indent=2) + "\n")


def dataset_load(directory) -> list[LabeledSample]:
    d = Path(directory)
    mpath = d / "manifest.json"
    if not mpath.exists():
        raise DatasetError(f"{d}: no manifest.json")
    try:
        manifest = json.loads(mpath.read_text())
    except json.JSONDecodeError as e:
        raise DatasetError(f"{mpath}: invalid manifest: {e}") from e
    if manifest.get("format") != "anodiff-dataset" or manifest.get("version") != 1:
        raise DatasetError(f"{mpath}: unknown format/version")
    out = []
    for entry in manifest["samples"]:
        try:
            image = read_image(d / entry["image"])
            if entry["mask"] is not None:
                mask = read_image(d / entry["mask"])
            else:
                mask = np.zeros(image.shape, dtype=np.uint8)
        except FormatError as e:
            raise DatasetError(str(e)) from e
        s = LabeledSample(image=image, gt_mask=mask,
                          lesion_pixels=entry["lesion_pixels"],
                          stratum=entry["stratum"], seed=entry["seed"],
                          sample_id=entry["id"])
        s.validate()
        out.append(s)
    return out


def generate_dataset(params: PhantomParams, n_healthy: int,
                     anomalous: list[tuple[str, str]],
                     master_seed: int,
                     ranges: dict[str, tuple[int, int]] | None = None,
                     irregularity: float = 0.35) -> list[LabeledSample]:
    """n_healthy healthy samples plus one anomalous sample per
    (size_class, intensity_mode) entry, all from per-sample derived seeds."""
    params.validate()
    ranges = dict(ranges or DEFAULT_SIZE_RANGES)
    out = []
    for i in range(n_healthy):
        rng = derive_rng(master_seed, "healthy", i)
        img = generate_healthy(params, rng)
        out.append(LabeledSample(image=img, gt_mask=np.zeros(img.shape, np.uint8),
                                 lesion_pixels=0, stratum=None, seed=master_seed,
                                 sample_id=f"h{i:05d}"))
    for i, (cls, mode) in enumerate(anomalous):
        rng = derive_rng(master_seed, "anomalous", i)
        img = generate_healthy(params, rng)
        spec = AnomalySpec(size_class=cls, ranges=ranges, intensity_mode=mode,
                           irregularity=irregularity)
        s = inject_anomaly(img, spec, rng.spawn(1)[0])
        s.seed = master_seed
        s.sample_id = f"a{i:05d}"
        out.append(s)
    return out
