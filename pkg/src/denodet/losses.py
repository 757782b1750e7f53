"""Joint objective: Dice + balanced BCE on the denoised image, and a
windowed DSNT detection loss (Euclidean + Jensen-Shannon) on the score map.

DSNT returns one coordinate per heatmap, so the detection loss is applied
to ``K x K`` windows of the score logits around each (jittered) reference
particle.  A balanced BCE "presence" term on ``sigmoid(logits)`` supervises
the background so the score map can be thresholded at inference time.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor

LOG_FLOOR = 1e-7
JSD_FLOOR = 1e-30


@dataclass
class LossConfig:
    eps: float = 1e-6
    delta: float = 1.0
    lam: float = 1.0
    gamma: float = 0.5
    sigma_hm: float = 1.0
    window: int = 7
    jitter: int = 2
    mu: float = 1.0
    presence_radius: float = 1.5
    beta_clamp: tuple[float, float] = (0.05, 0.95)

    def validate(self) -> None:
        if self.eps <= 0 or self.sigma_hm <= 0:
            raise ValueError("eps and sigma_hm must be positive")
        if self.window < 3 or self.window % 2 == 0:
            raise ValueError("window must be odd and >= 3")
        if min(self.delta, self.lam, self.gamma, self.mu) < 0 or self.jitter < 0:
            raise ValueError("loss weights and jitter must be non-negative")


@dataclass
class TrainingWindow:
    sample: int
    row0: int
    col0: int
    target_x: float  # window-local pixel coordinates
    target_y: float
    particle_id: int


# --- denoising --------------------------------------------------------------

def _check_unit_range(t: Tensor | np.ndarray, what: str) -> None:
    data = t.data if isinstance(t, Tensor) else np.asarray(t)
    if data.size and (data.min() < -1e-6 or data.max() > 1 + 1e-6):
        raise ValueError(f"{what} must lie in [0, 1]")


def dice_loss(pred: Tensor, ref, eps: float = 1e-6) -> Tensor:
    """One minus the soft Dice coefficient, sums taken over every element."""
    ref = ad._const(ref, pred)
    if pred.shape != ref.shape:
        raise ad.ShapeError(f"dice_loss: {pred.shape} vs {ref.shape}")
    _check_unit_range(pred, "dice_loss prediction")
    _check_unit_range(ref, "dice_loss reference")
    inter = (pred * ref).sum()
    return 1.0 - (2.0 * inter + eps) / (pred.sum() + ref.sum() + eps)


def background_fraction(ref: np.ndarray, clamp=(0.05, 0.95), per_sample: bool = False):
    """Fraction of ``ref`` below 0.5, clamped; with ``per_sample`` one value per
    leading index, shaped to broadcast against ``ref``."""
    ref = np.asarray(ref)
    if per_sample and ref.ndim > 1:
        axes = tuple(range(1, ref.ndim))
        return np.clip(np.mean(ref < 0.5, axis=axes, keepdims=True), *clamp)
    return float(np.clip(np.mean(ref < 0.5), *clamp))


def balanced_bce(pred: Tensor, ref, beta=None, clamp=(0.05, 0.95), per_sample: bool = False) -> Tensor:
    """Class-balanced cross-entropy; ``beta`` defaults to the background fraction
    of ``ref``, taken per sample (per training crop) when ``per_sample`` is set."""
    ref = ad._const(ref, pred)
    if pred.shape != ref.shape:
        raise ad.ShapeError(f"balanced_bce: {pred.shape} vs {ref.shape}")
    if beta is None:
        beta = background_fraction(ref.data, clamp, per_sample)
    if not np.isscalar(beta):
        beta = np.asarray(beta, dtype=pred.dtype)
    log_p = ad.log(ad.clamp(pred, LOG_FLOOR, None))
    log_q = ad.log(ad.clamp(1.0 - pred, LOG_FLOOR, None))
    total = (beta * ref * log_p + (1.0 - beta) * (1.0 - ref) * log_q).sum()
    return total * (-1.0 / pred.size)


def deno_loss(pred: Tensor, ref, config: LossConfig) -> Tensor:
    loss = dice_loss(pred, ref, config.eps)
    if config.delta:
        loss = loss + config.delta * balanced_bce(pred, ref, clamp=config.beta_clamp, per_sample=True)
    return loss


# --- DSNT machinery ---------------------------------------------------------

def dsnt_grid(k: int) -> np.ndarray:
    """Normalized pixel-centre coordinates ``(2j + 1 - k) / k`` in (-1, 1)."""
    return (2.0 * np.arange(k) + 1.0 - k) / k


def dsnt(heatmap: Tensor, tol: float = 1e-5) -> tuple[Tensor, Tensor]:
    """Expected (x, y) of ``[..., K, K]`` probability maps in normalized coordinates."""
    k = heatmap.shape[-1]
    if heatmap.shape[-2] != k:
        raise ad.ShapeError("dsnt expects square windows")
    sums = heatmap.data.sum(axis=(-2, -1))
    if np.any(heatmap.data < 0) or np.any(np.abs(sums - 1.0) > tol):
        raise ValueError("dsnt needs non-negative heatmaps that sum to 1")
    grid = dsnt_grid(k).astype(heatmap.dtype)
    x = (heatmap * grid[None, :]).sum(axis=(-2, -1))
    y = (heatmap * grid[:, None]).sum(axis=(-2, -1))
    return x, y


def pixel_to_normalized(p, k: int):
    return (2.0 * np.asarray(p) + 1.0) / k - 1.0


def normalized_to_pixel(c, k: int):
    return (np.asarray(c) + 1.0) * k / 2.0 - 0.5


def gaussian_target(k: int, cx: float, cy: float, sigma: float = 1.0) -> np.ndarray:
    """Isotropic Gaussian at window-local ``(cx, cy)``, evaluated at pixel centres, sums to 1."""
    if not (-0.5 < cx < k - 0.5 and -0.5 < cy < k - 0.5):
        raise ValueError("target centre must lie inside the window")
    j = np.arange(k, dtype=np.float64)
    g = np.exp(-((j[:, None] - cy) ** 2 + (j[None, :] - cx) ** 2) / (2 * sigma * sigma))
    return g / g.sum()


def jsd(p: Tensor, q, axis=(-2, -1)) -> Tensor:
    """Jensen-Shannon divergence (natural log) reduced over ``axis``; 0 log 0 = 0."""
    q = ad._const(q, p)
    if np.any(p.data < 0) or np.any(q.data < 0):
        raise ValueError("jsd needs non-negative distributions")
    m = ad.clamp(0.5 * (p + q), JSD_FLOOR, None)
    # log of the ratio rather than a difference of logs: identical inputs give
    # exactly 0 and disjoint dyadic ones exactly ln 2
    kl_p = p * ad.log(ad.clamp(p, JSD_FLOOR, None) / m)
    kl_q = q * ad.log(ad.clamp(q, JSD_FLOOR, None) / m)
    return 0.5 * (kl_p.sum(axis=axis) + kl_q.sum(axis=axis))


# --- windows and detection loss ---------------------------------------------

def _particle_rng(base: int, sample: int, pid: int) -> np.random.Generator:
    return np.random.default_rng([base, sample, pid])


def _rows(rows) -> np.ndarray:
    arr = np.asarray(rows, dtype=np.float64)
    return arr.reshape(0, 4) if arr.size == 0 else np.atleast_2d(arr)


def extract_training_windows(
    score_logits,
    truth: list[np.ndarray],
    config: LossConfig,
    rng: np.random.Generator,
) -> list[TrainingWindow]:
    """One jittered window per reference particle; clipped windows are dropped.

    ``truth[s]`` holds rows ``(id, x, y, ...)`` for batch sample ``s``.  Jitter
    is drawn from a per-particle stream keyed by ``(sample, id)``, so the
    result does not depend on the order of the rows.
    """
    h, w = score_logits.shape[-2:]
    k, half = config.window, config.window // 2
    base = int(rng.integers(0, 2**63 - 1))
    windows = []
    for s, rows in enumerate(truth):
        for row in _rows(rows):
            pid, x, y = int(row[0]), float(row[1]), float(row[2])
            if config.jitter:
                jx, jy = _particle_rng(base, s, pid).integers(-config.jitter, config.jitter + 1, size=2)
            else:
                jx = jy = 0
            col0 = int(np.floor(x + 0.5)) + int(jx) - half
            row0 = int(np.floor(y + 0.5)) + int(jy) - half
            if row0 < 0 or col0 < 0 or row0 + k > h or col0 + k > w:
                continue
            tx, ty = x - col0, y - row0
            if not (-0.5 < tx < k - 0.5 and -0.5 < ty < k - 0.5):
                continue
            windows.append(TrainingWindow(s, row0, col0, tx, ty, pid))
    windows.sort(key=lambda wdw: (wdw.sample, wdw.particle_id))
    return windows


def presence_mask(shape: tuple[int, int], positions: np.ndarray, radius: float = 1.5) -> np.ndarray:
    """1 on pixels whose centre lies within ``radius`` of any position."""
    h, w = shape
    mask = np.zeros((h, w), dtype=np.float32)
    r = int(np.ceil(radius))
    for x, y in np.asarray(positions, dtype=np.float64).reshape(-1, 2):
        cx, cy = int(np.floor(x + 0.5)), int(np.floor(y + 0.5))
        ys = np.arange(max(cy - r, 0), min(cy + r + 1, h))
        xs = np.arange(max(cx - r, 0), min(cx + r + 1, w))
        if ys.size == 0 or xs.size == 0:
            continue
        d2 = (ys[:, None] - y) ** 2 + (xs[None, :] - x) ** 2
        mask[ys[0] : ys[-1] + 1, xs[0] : xs[-1] + 1] = np.maximum(
            mask[ys[0] : ys[-1] + 1, xs[0] : xs[-1] + 1], (d2 <= radius * radius).astype(np.float32)
        )
    return mask


@dataclass
class DetLossParts:
    total: Tensor
    n_windows: int
    no_windows: bool
    euclid: float = 0.0
    jsd: float = 0.0
    presence: float = 0.0


def det_loss_parts(
    score_logits: Tensor,
    truth: list[np.ndarray],
    config: LossConfig,
    rng: np.random.Generator,
    mask_truth: list[np.ndarray] | None = None,
) -> DetLossParts:
    """Detection loss over a batch of ``[N, 1, H, W]`` logits.

    ``truth[s]`` supplies window supervision; ``mask_truth[s]`` (default:
    the same rows) supplies the presence mask.
    """
    n, _, h, w = score_logits.shape
    mask_truth = truth if mask_truth is None else mask_truth
    k = config.window
    windows = extract_training_windows(score_logits, truth, config, rng)
    total = None
    euclid_v = jsd_v = pres_v = 0.0
    if windows:
        s = np.array([wd.sample for wd in windows])
        r0 = np.array([wd.row0 for wd in windows])
        c0 = np.array([wd.col0 for wd in windows])
        heat = ad.softmax2d(ad.extract_windows(score_logits, s, r0, c0, k))
        px, py = dsnt(heat)
        tx = pixel_to_normalized([wd.target_x for wd in windows], k).astype(heat.dtype)
        ty = pixel_to_normalized([wd.target_y for wd in windows], k).astype(heat.dtype)
        # the 1e-12 floor keeps the distance differentiable at zero
        dist = ad.sqrt((px - tx) ** 2 + (py - ty) ** 2 + 1e-12)
        per_window = dist
        euclid_v = float(dist.data.mean())
        if config.lam:
            targets = np.stack([gaussian_target(k, wd.target_x, wd.target_y, config.sigma_hm) for wd in windows])
            div = jsd(heat, targets.astype(heat.dtype))
            jsd_v = float(div.data.mean())
            per_window = per_window + config.lam * div
        total = per_window.mean()
    if config.mu:
        mask = np.stack(
            [presence_mask((h, w), _rows(m)[:, 1:3], config.presence_radius) for m in mask_truth]
        )[:, None]
        pres = balanced_bce(ad.sigmoid(score_logits), mask.astype(score_logits.dtype), clamp=config.beta_clamp,
                            per_sample=True)
        pres_v = float(pres.data)
        total = config.mu * pres if total is None else total + config.mu * pres
    if total is None:
        total = (score_logits * 0.0).sum()
    if not windows:
        warnings.warn("det_loss: no usable training windows; presence term only", RuntimeWarning, stacklevel=2)
    return DetLossParts(total, len(windows), not windows, euclid_v, jsd_v, pres_v)


def det_loss(score_logits: Tensor, truth, config: LossConfig, rng, mask_truth=None) -> Tensor:
    return det_loss_parts(score_logits, truth, config, rng, mask_truth).total


def joint_loss(
    output,
    clean_ref,
    truth,
    config: LossConfig,
    rng: np.random.Generator,
    gamma: float | None = None,
    mask_truth=None,
) -> Tensor:
    """Detection loss plus ``gamma`` times the denoising loss."""
    gamma = config.gamma if gamma is None else gamma
    loss = det_loss(output.score_logits, truth, config, rng, mask_truth)
    if gamma:
        loss = loss + gamma * deno_loss(output.denoised, clean_ref, config)
    return loss
