"""Anomaly-detection pipeline: pseudo-healthy reconstruction, automatic
masking, stitching with re-sampling, and uncertainty fusion.

Stages, all driven by a single trained (or analytic) noise predictor:

1. Noise the input to a high level (default t=200) and denoise back. Anomalies
   are not reproduced because the model only knows the healthy distribution.
2. Score each pixel by the percentile-normalized absolute residual times a
   perceptual distance map; binarize (recall-favoring percentile threshold on
   the nonzero scores) and dilate to get a generous anomaly mask.
3. Re-diffuse the stitched image (original outside the mask, reconstruction
   inside) to a low level (default t=50) and walk back down; at every step the
   outside-mask region is replaced by a freshly noised copy of the original,
   and each step oscillates between t and t-1 a configurable number of times
   (forward jump-backs) to harmonize the seam.
4. Score the final reconstruction; optionally multiply by the stage-2 heatmap
   so only pixels flagged both times survive (uncertainty fusion).

Pipeline functions accept ``(H, W)`` single images or ``(B, H, W)`` batches
with one RNG per row; per-pixel post-processing stays per image.
"""

from __future__ import annotations

import json
import time
from dataclasses import dataclass, asdict
from pathlib import Path

import numpy as np

from .diffusion import NoiseSchedule
from .imgio import read_image, write_image
from .metrics import PerceptualSurrogate
from .seeding import derive_rng


@dataclass(frozen=True)
class PipelineConfig:
    t_mask: int = 200            # noise level of the masking reconstruction
    t_stitch: int = 50           # starting level of the stitch/re-sample chain
    n_resample: int = 5          # jump-backs per step (n+1 denoise passes)
    dilation_kernel: int = 3
    binarize_quantile: float = 0.70
    norm_percentile: float = 95.0
    use_uncertainty: bool = True

    def validate(self, schedule: NoiseSchedule) -> None:
        if not (1 <= self.t_stitch <= self.t_mask <= schedule.t_max):
            raise ValueError(
                f"need 1 <= t_stitch ({self.t_stitch}) <= t_mask ({self.t_mask})"
                f" <= t_max ({schedule.t_max})")
        if self.n_resample < 0:
            raise ValueError("n_resample must be >= 0")
        if self.dilation_kernel < 1 or self.dilation_kernel % 2 == 0:
            raise ValueError("dilation_kernel must be odd and >= 1")
        if not (0.0 <= self.binarize_quantile <= 1.0):
            raise ValueError("binarize_quantile must be in [0, 1]")
        if not (0.0 < self.norm_percentile < 100.0):
            raise ValueError("norm_percentile must be in (0, 100)")


@dataclass
class DetectionResult:
    input_image: np.ndarray
    initial_reconstruction: np.ndarray
    initial_heatmap: np.ndarray
    mask: np.ndarray
    ph_reconstruction: np.ndarray
    final_map: np.ndarray
    config: PipelineConfig
    seed: int


# ---------------------------------------------------------------------------
# Stage 1: plain noise-and-denoise reconstruction (also the sweep baseline)
# ---------------------------------------------------------------------------

def reconstruct(x, denoiser, schedule: NoiseSchedule, t_start: int, rng,
                ) -> np.ndarray:
    """Noise x to t_start, denoise back to a clean estimate, clamp to [0, 1]."""
    schedule.check_t(t_start)
    x = np.asarray(x)
    if np.any(x < 0) or np.any(x > 1):
        raise ValueError("input image must lie in [0, 1]")
    x_t, _ = schedule.forward_to(x, t_start, rng)
    for t in range(t_start, 0, -1):
        eps_hat = denoiser.predict_eps(x_t, t)
        x_t = schedule.reverse_step(x_t, t, eps_hat, rng)
    return np.clip(x_t, 0.0, 1.0)


# ---------------------------------------------------------------------------
# Stage 2: heatmap and mask
# ---------------------------------------------------------------------------

def percentile_normalize(r, p: float = 95.0) -> np.ndarray:
    """Divide by the p-th percentile and clip to [0, 1]; all-zero stays zero."""
    r = np.asarray(r)
    if np.any(r < 0):
        raise ValueError("heatmap values must be non-negative")
    if not (0.0 < p < 100.0):
        raise ValueError("percentile must be in (0, 100)")
    q = np.percentile(r, p, axis=(-2, -1), keepdims=True)
    scaled = np.divide(r, q, out=np.zeros_like(r, dtype=np.float64), where=q > 0)
    return np.clip(scaled, 0.0, 1.0)


def anomaly_heatmap(x, xhat, perceptual, p: float = 95.0) -> np.ndarray:
    """Percentile-normalized absolute residual gated by perceptual distance."""
    x = np.asarray(x)
    xhat = np.asarray(xhat)
    if x.shape != xhat.shape:
        raise ValueError(f"shape mismatch: {x.shape} vs {xhat.shape}")
    residual = percentile_normalize(np.abs(xhat.astype(np.float64) - x), p)
    return residual * perceptual.per_pixel(xhat, x)


def binarize(h, quantile: float = 0.70) -> np.ndarray:
    """Mask of pixels at or above the given quantile of the nonzero scores."""
    h = np.asarray(h)
    if h.ndim != 2:
        raise ValueError(f"binarize works on one heatmap, got shape {h.shape}")
    nz = h[h > 0]
    if nz.size == 0:
        return np.zeros(h.shape, dtype=np.uint8)
    thr = np.percentile(nz, 100.0 * quantile)
    return (h >= thr).astype(np.uint8)


def dilate(m, k: int = 3) -> np.ndarray:
    """Binary dilation with a k x k square element, borders clipped."""
    if k < 1 or k % 2 == 0:
        raise ValueError(f"kernel side must be odd and >= 1, got {k}")
    m = np.asarray(m)
    if not np.isin(m, (0, 1)).all():
        raise ValueError("mask must be binary")
    r = k // 2
    spatial = [(0, 0)] * (m.ndim - 2) + [(r, r), (r, r)]
    mp = np.pad(m.astype(bool), spatial)
    out = np.zeros(m.shape, dtype=bool)
    h, w = m.shape[-2:]
    for i in range(k):
        for j in range(k):
            out |= mp[..., i:i + h, j:j + w]
    return out.astype(np.uint8)


# ---------------------------------------------------------------------------
# Stage 3: stitching and re-sampling
# ---------------------------------------------------------------------------

def naive_stitch(x, xhat0, m) -> np.ndarray:
    """Direct combination: original outside the mask, reconstruction inside."""
    mf = np.asarray(m).astype(np.asarray(x).dtype)
    return (1.0 - mf) * x + mf * xhat0


def _spawn_streams(rng, n: int):
    if isinstance(rng, np.random.Generator):
        return rng.spawn(n)
    per_image = [g.spawn(n) for g in rng]
    return [[s[i] for s in per_image] for i in range(n)]


def stitch_resample(x, xhat0, m, denoiser, schedule: NoiseSchedule,
                    cfg: PipelineConfig, rng) -> np.ndarray:
    """Masked inpainting chain from t_stitch down to 0.

    The chain starts from the noised stitched image. At each level t the
    outside-mask content is a fresh noising of the original to t-1, the
    inside-mask content is the denoised step, and the combination jumps back
    to t (one forward step) n_resample times before moving on. At t-1 = 0 the
    context is the original image itself, so outside the mask the output
    equals x exactly (then the whole image is clamped to [0, 1]).

    Four child RNG streams are used in a fixed order: initial noising,
    context noisings, denoising steps, jump-backs. With an all-ones mask and
    n_resample = 0 the denoising stream reproduces a plain reverse chain.
    """
    cfg.validate(schedule)
    x = np.asarray(x)
    if x.shape != np.shape(xhat0) or x.shape != np.shape(m):
        raise ValueError("x, xhat0 and mask must share one shape")
    mf = np.asarray(m).astype(x.dtype)
    r_init, r_ctx, r_ph, r_jump = _spawn_streams(rng, 4)

    x_t, _ = schedule.forward_to(naive_stitch(x, xhat0, mf), cfg.t_stitch, r_init)
    for t in range(cfg.t_stitch, 0, -1):
        # at t=1 neither the context, the reverse step, nor a jump-back draws
        # noise, so repetitions would be identical; one suffices
        reps = 1 if t == 1 else cfg.n_resample + 1
        for rep in range(reps):
            if t > 1:
                ctx, _ = schedule.forward_to(x, t - 1, r_ctx)
            else:
                ctx = x
            eps_hat = denoiser.predict_eps(x_t, t)
            ph = schedule.reverse_step(x_t, t, eps_hat, r_ph)
            x_prev = (1.0 - mf) * ctx + mf * ph
            if rep < reps - 1:
                x_t = schedule.forward_step(x_prev, t, r_jump)
        x_t = x_prev
    return np.clip(x_t, 0.0, 1.0)


# ---------------------------------------------------------------------------
# Stage 4: uncertainty fusion and the full pipeline
# ---------------------------------------------------------------------------

def final_anomaly_map(x, x_ph, initial, perceptual, use_uncertainty: bool = True,
                      p: float = 95.0) -> np.ndarray:
    """Residual heatmap of the final reconstruction, optionally gated by the
    initial heatmap so pixels flagged in only one stage are suppressed."""
    h = anomaly_heatmap(x, x_ph, perceptual, p)
    if use_uncertainty:
        initial = np.asarray(initial)
        if initial.shape != h.shape:
            raise ValueError(f"shape mismatch: {initial.shape} vs {h.shape}")
        return h * initial
    return h


def detect(x, denoiser, schedule: NoiseSchedule, cfg: PipelineConfig, seed: int,
           perceptual=None, xhat0: np.ndarray | None = None) -> DetectionResult:
    """Full single-image pipeline, reproducible from the integer seed.

    ``xhat0`` may carry a precomputed stage-1 reconstruction (it must come
    from the same (seed, "stage1") stream to preserve reproducibility);
    evaluation sweeps use this to share work with the baseline method.
    """
    cfg.validate(schedule)
    x = np.asarray(x, dtype=np.float32)
    perceptual = perceptual if perceptual is not None else PerceptualSurrogate()
    if xhat0 is None:
        xhat0 = reconstruct(x, denoiser, schedule, cfg.t_mask,
                            derive_rng(seed, "stage1"))
    initial = anomaly_heatmap(x, xhat0, perceptual, cfg.norm_percentile)
    mask = dilate(binarize(initial, cfg.binarize_quantile), cfg.dilation_kernel)
    x_ph = stitch_resample(x, xhat0, mask, denoiser, schedule, cfg,
                           derive_rng(seed, "stitch"))
    final = final_anomaly_map(x, x_ph, initial, perceptual, cfg.use_uncertainty,
                              cfg.norm_percentile)
    return DetectionResult(
        input_image=x, initial_reconstruction=np.asarray(xhat0, dtype=np.float32),
        initial_heatmap=initial, mask=mask,
        ph_reconstruction=np.asarray(x_ph, dtype=np.float32),
        final_map=final, config=cfg, seed=seed)


def boundary_energy(img, mask) -> float:
    """Mean absolute intensity jump across 4-neighbor pairs that cross the
    mask border; 0.0 when the mask has no border."""
    img = np.asarray(img, dtype=np.float64)
    m = np.asarray(mask).astype(bool)
    dv = np.abs(img[1:, :] - img[:-1, :])[m[1:, :] != m[:-1, :]]
    dh = np.abs(img[:, 1:] - img[:, :-1])[m[:, 1:] != m[:, :-1]]
    jumps = np.concatenate([dv, dh])
    return float(jumps.mean()) if jumps.size else 0.0


# ---------------------------------------------------------------------------
# Result persistence
# ---------------------------------------------------------------------------

_RESULT_FILES = {
    "input_image": "input.img",
    "initial_reconstruction": "stage1.img",
    "initial_heatmap": "initial_heatmap.img",
    "mask": "mask.img",
    "ph_reconstruction": "ph.img",
    "final_map": "final_map.img",
}


def save_detection(result: DetectionResult, directory, timings: dict | None = None,
                   ) -> None:
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    for attr, fname in _RESULT_FILES.items():
        arr = getattr(result, attr)
        write_image(d / fname, arr if attr == "mask" else np.asarray(arr, np.float32))
    meta = {
        "config": asdict(result.config),
        "seed": result.seed,
        "timings": timings or {},
        "written_at": time.strftime("%Y-%m-%dT%H:%M:%S"),
    }
    (d / "metadata.json").write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n")


def load_detection(directory) -> DetectionResult:
    d = Path(directory)
    meta = json.loads((d / "metadata.json").read_text())
    arrays = {attr: read_image(d / fname) for attr, fname in _RESULT_FILES.items()}
    arrays["initial_heatmap"] = arrays["initial_heatmap"].astype(np.float64)
    arrays["final_map"] = arrays["final_map"].astype(np.float64)
    return DetectionResult(config=PipelineConfig(**meta["config"]),
                           seed=meta["seed"], **arrays)
