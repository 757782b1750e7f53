"""Deterministic training: Adam, plateau learning-rate schedule, random
crops, and a detection-only warm start before joint training."""

from __future__ import annotations

import csv
import dataclasses
import io
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .evaluate import DEFAULT_GATE, detect_from_logits, detections_by_threshold, f1, match
from .losses import LossConfig, joint_loss
from .model import Denodet, ModelConfig, normalize_frame, percentile_range, save_checkpoint

log = logging.getLogger(__name__)

LOG_FIELDS = ("epoch", "phase", "lr", "train_loss", "val_loss", "val_f1")


class TrainingError(RuntimeError):
    pass


class TrainingDiverged(TrainingError):
    """Non-finite loss; the message names the offending batch."""


class TrainingAborted(TrainingError):
    """Too many consecutive optimizer steps skipped for non-finite gradients."""


@dataclass
class TrainConfig:
    epochs: int = 100
    batch_size: int = 4
    lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    plateau_factor: float = 0.1
    plateau_patience: int = 10
    plateau_min_delta: float = 1e-6
    lr_floor: float = 1e-7
    warm_start_epochs: int = 20
    crop_size: int = 128
    seed: int = 0
    val_fraction: float = 0.3
    threshold: float = 0.5
    gate: float = DEFAULT_GATE
    max_consecutive_skips: int = 50
    border_exclusion: float = 3.0
    calibrate_threshold: bool = True

    def validate(self) -> None:
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.crop_size % 4:
            raise ValueError("crop_size must be divisible by 4")
        if not 0 < self.plateau_factor < 1:
            raise ValueError("plateau_factor must lie in (0, 1)")
        if self.epochs < 0 or self.warm_start_epochs < 0:
            raise ValueError("epoch counts must be non-negative")


@dataclass
class OptimizerState:
    lr: float
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)
    step: int = 0
    best_val: float = math.inf
    bad_epochs: int = 0
    skipped: int = 0
    consecutive_skips: int = 0


def adam_step(params, state: OptimizerState, config: TrainConfig, lr: float | None = None) -> bool:
    """Bias-corrected Adam update in place.  Returns False if the step was skipped."""
    lr = state.lr if lr is None else lr
    grads = {k: p.grad for k, p in params.items()}
    if any(g is not None and not np.all(np.isfinite(g)) for g in grads.values()):
        state.skipped += 1
        state.consecutive_skips += 1
        if state.consecutive_skips >= config.max_consecutive_skips:
            raise TrainingAborted(f"{state.consecutive_skips} consecutive non-finite gradient steps")
        return False
    state.consecutive_skips = 0
    state.step += 1
    b1, b2 = config.beta1, config.beta2
    c1 = 1.0 - b1**state.step
    c2 = 1.0 - b2**state.step
    for name, p in params.items():
        g = grads[name]
        if g is None:
            continue
        m = state.m.get(name)
        if m is None:
            m = state.m[name] = np.zeros_like(p.data)
            state.v[name] = np.zeros_like(p.data)
        v = state.v[name]
        m *= b1
        m += (1 - b1) * g
        v *= b2
        v += (1 - b2) * g * g
        p.data -= (lr * (m / c1) / (np.sqrt(v / c2) + config.adam_eps)).astype(p.dtype)
    return True


def plateau_schedule(state: OptimizerState, val_loss: float, config: TrainConfig) -> float:
    """Reduce the learning rate after ``patience`` epochs without improvement."""
    if val_loss < state.best_val - config.plateau_min_delta:
        state.best_val = val_loss
        state.bad_epochs = 0
    else:
        state.bad_epochs += 1
        if state.bad_epochs >= config.plateau_patience:
            state.lr = max(state.lr * config.plateau_factor, config.lr_floor)
            state.bad_epochs = 0
    return state.lr


# --- data -------------------------------------------------------------------

@dataclass
class FrameRef:
    dataset: int
    index: int


@dataclass
class Crop:
    noisy: np.ndarray
    clean: np.ndarray
    truth: np.ndarray  # window supervision (border particles removed)
    mask_truth: np.ndarray  # every particle inside the crop
    origin: tuple[int, int]  # (row, col)


class FrameCache:
    """Normalized input/target frames, computed once per frame."""

    def __init__(self, datasets):
        self.datasets = datasets
        self._cache: dict[tuple[int, int], tuple[np.ndarray, np.ndarray]] = {}

    def get(self, ref: FrameRef) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        key = (ref.dataset, ref.index)
        ds = self.datasets[ref.dataset]
        if key not in self._cache:
            self._cache[key] = (normalize_frame(ds.noisy[ref.index]), normalize_frame(ds.clean[ref.index]))
        noisy, clean = self._cache[key]
        return noisy, clean, np.asarray(ds.truth[ref.index]).reshape(-1, 4)


def split_frames(datasets, val_fraction: float, seed: int) -> tuple[list[FrameRef], list[FrameRef]]:
    """Random train/validation split of frames, stratified per dataset."""
    train, val = [], []
    for d, ds in enumerate(datasets):
        n = len(ds)
        order = np.random.default_rng([seed, d, 0x5917]).permutation(n)
        n_val = int(round(val_fraction * n))
        if val_fraction > 0 and n > 1:
            n_val = min(max(n_val, 1), n - 1)
        val += [FrameRef(d, int(i)) for i in sorted(order[:n_val])]
        train += [FrameRef(d, int(i)) for i in sorted(order[n_val:])]
    return train, val


def _in_crop(truth: np.ndarray, origin, size: int, margin: float = 0.0) -> np.ndarray:
    r0, c0 = origin
    x = truth[:, 1] - c0
    y = truth[:, 2] - r0
    lo, hi = -0.5 + margin, size - 0.5 - margin
    return (x >= lo) & (x < hi) & (y >= lo) & (y < hi)


def sample_crop(noisy, clean, truth, size: int, rng: np.random.Generator,
                border: float = 3.0, attempts: int = 20) -> Crop:
    """Uniform random crop, redrawn up to ``attempts`` times until it holds a particle."""
    h, w = noisy.shape
    if size > h or size > w:
        raise ValueError(f"crop {size} larger than frame {h}x{w}")
    truth = np.asarray(truth, dtype=np.float64).reshape(-1, 4)
    for _ in range(attempts):
        origin = (int(rng.integers(0, h - size + 1)), int(rng.integers(0, w - size + 1)))
        inside = _in_crop(truth, origin, size)
        if inside.any():
            break
    rebased = truth[inside].copy()
    rebased[:, 1] -= origin[1]
    rebased[:, 2] -= origin[0]
    core = _in_crop(rebased, (0, 0), size, margin=border)
    sl = (slice(origin[0], origin[0] + size), slice(origin[1], origin[1] + size))
    return Crop(noisy[sl], clean[sl], rebased[core], rebased, origin)


# --- training loop ----------------------------------------------------------

@dataclass
class TrainResult:
    model: Denodet
    best_model: Denodet
    log: list[dict]
    state: OptimizerState


def _set_gamma(loss_config: LossConfig, gamma: float) -> LossConfig:
    return dataclasses.replace(loss_config, gamma=gamma)


def validate(model: Denodet, datasets, frames: list[FrameRef], loss_config: LossConfig,
             gamma: float | None = None, seed: int = 0, threshold: float = 0.5,
             gate: float = DEFAULT_GATE, cache: FrameCache | None = None) -> tuple[float, float]:
    """Mean joint loss and pooled F1 over full validation frames; parameters are untouched."""
    if not frames:
        raise ValueError("empty validation set")
    cache = cache or FrameCache(datasets)
    gamma = loss_config.gamma if gamma is None else gamma
    rng = np.random.default_rng([seed, 0xFA11])
    losses, tp, fp, fn = [], 0, 0, 0
    with ad.no_grad():
        for ref in frames:
            noisy, clean, truth = cache.get(ref)
            out = model(Tensor(noisy[None, None].astype(model.dtype)))
            loss = joint_loss(out, clean[None, None].astype(model.dtype), [truth], loss_config, rng, gamma=gamma)
            losses.append(float(loss.data))
            dets = detect_from_logits(out.score_logits.data[0, 0], threshold)
            res = match(dets, truth[:, 1:3], gate)
            tp, fp, fn = tp + res.tp, fp + len(res.fp), fn + len(res.fn)
    return float(np.mean(losses)), f1(tp, fp, fn)


# candidate operating points for the post-training threshold search
THRESHOLD_GRID = tuple(round(0.05 + 0.01 * k, 2) for k in range(95))


def calibrate_threshold(model: Denodet, datasets, frames: list[FrameRef], gate: float = DEFAULT_GATE,
                        cache: FrameCache | None = None, grid=THRESHOLD_GRID) -> tuple[float, float]:
    """Detection threshold with the best pooled F1 on ``frames``; returns ``(threshold, f1)``.

    Ties go to the smallest threshold in ``grid``.
    """
    if not frames:
        raise ValueError("no frames to calibrate on")
    cache = cache or FrameCache(datasets)
    counts = np.zeros((len(grid), 3), dtype=np.int64)
    with ad.no_grad():
        for ref in frames:
            noisy, _, truth = cache.get(ref)
            logits = model(Tensor(noisy[None, None].astype(model.dtype))).score_logits.data[0, 0]
            for k, dets in enumerate(detections_by_threshold(logits, grid)):
                res = match(dets, truth[:, 1:3], gate)
                counts[k] += (res.tp, len(res.fp), len(res.fn))
    scores = [f1(*c) for c in counts]
    best = int(np.argmax(scores))
    return float(grid[best]), float(scores[best])


def _norm_stats(datasets, frames: list[FrameRef]) -> dict:
    if not frames:
        return {}
    ranges = np.array([percentile_range(datasets[f.dataset].clean[f.index]) for f in frames])
    return {"target_lo": float(np.median(ranges[:, 0])), "target_hi": float(np.median(ranges[:, 1]))}


def log_csv(rows: list[dict]) -> str:
    buf = io.StringIO()
    writer = csv.DictWriter(buf, fieldnames=LOG_FIELDS, lineterminator="\n")
    writer.writeheader()
    for row in rows:
        writer.writerow({k: (f"{row[k]:.8g}" if isinstance(row[k], float) else row[k]) for k in LOG_FIELDS})
    return buf.getvalue()


def train(
    model_config: ModelConfig,
    train_config: TrainConfig,
    datasets,
    loss_config: LossConfig | None = None,
    out: str | Path | None = None,
    val_frames: list[FrameRef] | None = None,
) -> TrainResult:
    """Train from scratch.  With ``out`` set, writes ``out`` (final),
    ``<out>.best`` (best validation loss) and ``<out>.log.csv``."""
    train_config.validate()
    loss_config = loss_config or LossConfig()
    loss_config.validate()
    if not isinstance(datasets, (list, tuple)):
        datasets = [datasets]
    for ds in datasets:
        if len(ds) == 0 or ds.noisy.shape != ds.clean.shape or len(ds.truth) != len(ds):
            raise TrainingError("dataset is empty or inconsistent")
        if min(ds.noisy.shape[1:]) < train_config.crop_size:
            raise TrainingError(f"crop size {train_config.crop_size} exceeds frame size {ds.noisy.shape[1:]}")

    train_frames, auto_val = split_frames(datasets, train_config.val_fraction, train_config.seed)
    if val_frames is None:
        val_frames = auto_val
    else:
        held = {(f.dataset, f.index) for f in val_frames}
        train_frames = [f for f in train_frames + auto_val if (f.dataset, f.index) not in held]
    cache = FrameCache(datasets)

    model = Denodet.create(model_config)
    model.norm_stats.update(_norm_stats(datasets, train_frames))
    model.meta = {
        "train_config": dataclasses.asdict(train_config),
        "loss_config": dataclasses.asdict(loss_config),
    }
    best = model.copy()
    state = OptimizerState(lr=train_config.lr)
    rows: list[dict] = []
    out = Path(out) if out is not None else None
    best_score = math.inf
    phase = None

    for epoch in range(train_config.epochs):
        new_phase = "warm" if epoch < train_config.warm_start_epochs else "joint"
        if new_phase != phase:
            state.best_val, state.bad_epochs, best_score = math.inf, 0, math.inf
            phase = new_phase
        gamma = 0.0 if phase == "warm" else loss_config.gamma
        rng = np.random.default_rng([train_config.seed, epoch, 0x7EA1])
        order = rng.permutation(len(train_frames))
        batch_losses = []
        for b in range(0, len(order), train_config.batch_size):
            refs = [train_frames[i] for i in order[b : b + train_config.batch_size]]
            crops = []
            for ref in refs:
                noisy, clean, truth = cache.get(ref)
                crops.append(sample_crop(noisy, clean, truth, train_config.crop_size, rng,
                                         border=train_config.border_exclusion))
            x = Tensor(np.stack([c.noisy for c in crops])[:, None])
            ref_img = np.stack([c.clean for c in crops])[:, None]
            for p in model.params.values():
                p.grad = None
            with ad.Tape() as tape:
                output = model(x)
                loss = joint_loss(output, ref_img, [c.truth for c in crops], loss_config, rng,
                                  gamma=gamma, mask_truth=[c.mask_truth for c in crops])
            value = float(loss.data)
            if not math.isfinite(value):
                where = [(r.dataset, r.index, c.origin) for r, c in zip(refs, crops)]
                raise TrainingDiverged(f"non-finite loss at epoch {epoch}, batch {b // train_config.batch_size}: "
                                       f"(dataset, frame, crop origin) = {where}")
            tape.backward(loss)
            adam_step(model.params, state, train_config)
            batch_losses.append(value)

        if val_frames:
            val_loss, val_f1 = validate(model, datasets, val_frames, loss_config, gamma, train_config.seed,
                                        train_config.threshold, train_config.gate, cache)
        else:
            val_loss, val_f1 = float(np.mean(batch_losses)), float("nan")
        lr_used = state.lr
        plateau_schedule(state, val_loss, train_config)
        row = {"epoch": epoch, "phase": phase, "lr": lr_used,
               "train_loss": float(np.mean(batch_losses)), "val_loss": val_loss, "val_f1": val_f1}
        rows.append(row)
        log.info("epoch %d %s lr=%.3g train=%.4f val=%.4f f1=%.3f", epoch, phase, lr_used,
                 row["train_loss"], val_loss, val_f1)
        if val_loss < best_score:
            best_score = val_loss
            best = model.copy()
            if out is not None:
                save_checkpoint(best, out.with_name(out.name + ".best"))

    if train_config.calibrate_threshold and val_frames and train_config.epochs:
        for m in (model, best):
            tau, score = calibrate_threshold(m, datasets, val_frames, train_config.gate, cache)
            m.meta["threshold"], m.meta["threshold_val_f1"] = tau, score
        log.info("calibrated threshold %.2f (val F1 %.3f)", model.meta["threshold"], model.meta["threshold_val_f1"])
    if out is not None:
        save_checkpoint(model, out)
        save_checkpoint(best, out.with_name(out.name + ".best"))
        out.with_name(out.name + ".log.csv").write_text(log_csv(rows))
    return TrainResult(model, best, rows, state)
