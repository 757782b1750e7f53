"""Detection extraction, gated assignment and the evaluation metrics."""

from __future__ import annotations

import json
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage
from scipy.optimize import linear_sum_assignment
from scipy.spatial import cKDTree

from . import autodiff as ad
from .autodiff import Tensor
from .losses import dsnt, normalized_to_pixel
from .model import Denodet, normalize_frame, percentile_range

DEFAULT_GATE = 5.0
DEFAULT_THRESHOLD = 0.5
PSNR_CAP = 99.0


# --- detection --------------------------------------------------------------

def local_maxima(values: np.ndarray, size: int = 5, min_value: float = -np.inf) -> np.ndarray:
    """Peaks of a ``size x size`` neighbourhood, as ``(row, col)`` pairs in row-major order.

    A peak is at least as large as all its neighbours, strictly larger than
    the ones that come before it in row-major order (so an exact tie keeps the
    first pixel) and strictly larger than at least one neighbour (so a flat
    plateau has no peak).
    """
    v = np.asarray(values, dtype=np.float64)
    c = size // 2
    earlier = np.zeros((size, size), dtype=bool)
    earlier[:c] = True
    earlier[c, :c] = True
    later = ~earlier
    later[c, c] = False
    hood = earlier | later
    kw = dict(mode="constant", cval=-np.inf)
    max_before = ndimage.maximum_filter(v, footprint=earlier, **kw)
    max_after = ndimage.maximum_filter(v, footprint=later, **kw)
    lowest = ndimage.minimum_filter(v, footprint=hood, mode="constant", cval=np.inf)
    keep = (v > max_before) & (v >= max_after) & (v > lowest) & (v >= min_value)
    return np.argwhere(keep).astype(np.int64).reshape(-1, 2)


def _candidates(logits: np.ndarray, cut: float, nms_radius: float, window: int) -> tuple[np.ndarray, np.ndarray]:
    """Refined, suppressed detections ``(x, y)`` and their peak logits, strongest first.

    Keeping only the rows whose logit is at least a higher cut gives exactly
    the result for that cut: greedy suppression of a score-ordered prefix
    does not depend on the weaker candidates after it.
    """
    peaks = local_maxima(logits, 5, cut)
    if len(peaks) == 0:
        return np.zeros((0, 2)), np.zeros(0)
    half = window // 2
    with ad.no_grad():
        heat = ad.softmax2d(
            ad.extract_windows(
                Tensor(logits[None, None]),
                np.zeros(len(peaks)),
                peaks[:, 0] - half,
                peaks[:, 1] - half,
                window,
                fill=-np.inf,
            )
        )
        nx, ny = dsnt(heat)
    xy = np.column_stack([
        peaks[:, 1] - half + normalized_to_pixel(nx.data, window),
        peaks[:, 0] - half + normalized_to_pixel(ny.data, window),
    ])
    peak_logits = logits[peaks[:, 0], peaks[:, 1]]
    # strongest first; equal logits keep row-major order (argwhere order)
    order = np.argsort(-peak_logits, kind="stable")
    xy, peak_logits = xy[order], peak_logits[order]
    neighbours = cKDTree(xy).query_ball_point(xy, nms_radius)
    suppressed = np.zeros(len(xy), dtype=bool)
    kept = []
    for i in range(len(xy)):
        if not suppressed[i]:
            kept.append(i)
            suppressed[neighbours[i]] = True
    return xy[kept], peak_logits[kept]


def _logit(p: float) -> float:
    return math.log(p / (1 - p))


def _as_rows(xy: np.ndarray, peak_logits: np.ndarray) -> np.ndarray:
    # report in row-major order of the refined position
    order = np.lexsort((xy[:, 0], xy[:, 1]))
    scores = 1.0 / (1.0 + np.exp(-peak_logits[order]))
    return np.column_stack([xy[order], scores]).reshape(-1, 3)


def detect_from_logits(
    logits: np.ndarray,
    threshold: float = 0.5,
    nms_radius: float = 2.0,
    window: int = 7,
) -> np.ndarray:
    """Sub-pixel detections ``(x, y, score)`` from a single-channel logit map."""
    if window % 2 == 0:
        raise ValueError("window must be odd")
    if not 0 < threshold < 1:
        return np.zeros((0, 3))
    xy, peak_logits = _candidates(np.asarray(logits, dtype=np.float64), _logit(threshold), nms_radius, window)
    return _as_rows(xy, peak_logits)


def detections_by_threshold(
    logits: np.ndarray,
    thresholds,
    nms_radius: float = 2.0,
    window: int = 7,
) -> list[np.ndarray]:
    """``detect_from_logits`` for several thresholds from one candidate pass."""
    if window % 2 == 0:
        raise ValueError("window must be odd")
    thresholds = [float(t) for t in thresholds]
    valid = [t for t in thresholds if 0 < t < 1]
    if not valid:
        return [np.zeros((0, 3)) for _ in thresholds]
    xy, peak_logits = _candidates(np.asarray(logits, dtype=np.float64), _logit(min(valid)), nms_radius, window)
    out = []
    for t in thresholds:
        if not 0 < t < 1:
            out.append(np.zeros((0, 3)))
            continue
        keep = peak_logits >= _logit(t)
        out.append(_as_rows(xy[keep], peak_logits[keep]))
    return out


def model_threshold(model: Denodet, threshold: float | None = None) -> float:
    """An explicit threshold, else the one calibrated into the checkpoint, else 0.5."""
    if threshold is not None:
        return float(threshold)
    return float(model.meta.get("threshold", DEFAULT_THRESHOLD))


def detect(
    model: Denodet,
    image: np.ndarray,
    threshold: float | None = None,
    nms_radius: float = 2.0,
    window: int = 7,
) -> np.ndarray:
    """Run the network on one raw frame and extract detections."""
    if window % 2 == 0:
        raise ValueError("window must be odd")
    _, logits = model.predict(image)
    return detect_from_logits(logits, model_threshold(model, threshold), nms_radius, window)


# --- matching ---------------------------------------------------------------

def hungarian(cost: np.ndarray, gate: float = math.inf) -> list[tuple[int, int]]:
    """Optimal one-to-one assignment with pairs costing more than ``gate`` forbidden.

    The matrix is padded to square with dummy rows/columns whose cost is large
    enough that the number of feasible pairs is maximized first and the total
    cost second.
    """
    c = np.asarray(cost, dtype=np.float64)
    if c.ndim != 2:
        raise ValueError("cost must be a 2-D matrix")
    if not np.all(np.isfinite(c)) or np.any(c < 0):
        raise ValueError("costs must be finite and non-negative")
    n, m = c.shape
    if n == 0 or m == 0:
        return []
    feasible = c <= gate
    if not feasible.any():
        return []
    bound = float(c[feasible].max())
    dummy = min(n, m) * bound + 1.0
    big = np.full((n + m, n + m), np.inf)
    big[:n, :m] = np.where(feasible, c, np.inf)
    big[:n, m:][np.diag_indices(n)] = dummy
    big[n:, :m][np.diag_indices(m)] = dummy
    big[n:, m:] = 0.0
    rows, cols = linear_sum_assignment(big)
    return [(int(i), int(j)) for i, j in zip(rows, cols) if i < n and j < m]


@dataclass
class MatchResult:
    pairs: list[tuple[int, int, float]]
    fp: list[int]
    fn: list[int]
    gate: float

    @property
    def tp(self) -> int:
        return len(self.pairs)

    @property
    def distances(self) -> np.ndarray:
        return np.array([d for _, _, d in self.pairs], dtype=np.float64)


def _xy(rows) -> np.ndarray:
    arr = np.asarray(rows, dtype=np.float64)
    return arr.reshape(0, 2) if arr.size == 0 else np.atleast_2d(arr)[:, :2]


def match(predictions: np.ndarray, references: np.ndarray, gate: float = DEFAULT_GATE) -> MatchResult:
    """Euclidean matching of ``(x, y, ...)`` rows within ``gate`` pixels."""
    p, r = _xy(predictions), _xy(references)
    if len(p) and len(r):
        dist = np.sqrt(((p[:, None, :] - r[None, :, :]) ** 2).sum(-1))
        assigned = hungarian(dist, gate)
    else:
        dist, assigned = None, []
    pairs = [(i, j, float(dist[i, j])) for i, j in assigned]
    used_p = {i for i, _, _ in pairs}
    used_r = {j for _, j, _ in pairs}
    return MatchResult(
        pairs,
        [i for i in range(len(p)) if i not in used_p],
        [j for j in range(len(r)) if j not in used_r],
        gate,
    )


# --- metrics ----------------------------------------------------------------

def f1(tp: int, fp: int, fn: int) -> float:
    if tp == fp == fn == 0:
        return 1.0
    return 2.0 * tp / (2.0 * tp + fp + fn)


def rmse(distances) -> float:
    """Root mean square matched distance; NaN when nothing matched."""
    d = np.asarray(distances, dtype=np.float64)
    if d.size == 0:
        return float("nan")
    return float(np.sqrt(np.mean(d * d)))


def psnr(test: np.ndarray, reference: np.ndarray) -> float:
    """PSNR in dB for images on a [0, 1] scale, capped at 99 dB."""
    a = np.asarray(test, dtype=np.float64)
    b = np.asarray(reference, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"psnr: shape mismatch {a.shape} vs {b.shape}")
    mse = float(np.mean((a - b) ** 2))
    if mse == 0:
        return PSNR_CAP
    return min(PSNR_CAP, 10.0 * math.log10(1.0 / mse))


# --- LoG baseline -----------------------------------------------------------

def _quadratic_offset(patch: np.ndarray) -> tuple[float, float]:
    """Peak offset of a least-squares 2-D quadratic over a 3x3 patch."""
    y, x = np.mgrid[-1:2, -1:2]
    design = np.column_stack([np.ones(9), x.ravel(), y.ravel(), x.ravel() ** 2, (x * y).ravel(), y.ravel() ** 2])
    a, bx, by, cxx, cxy, cyy = np.linalg.lstsq(design, patch.ravel(), rcond=None)[0]
    hess = np.array([[2 * cxx, cxy], [cxy, 2 * cyy]])
    if np.linalg.det(hess) <= 0 or hess[0, 0] >= 0:
        return 0.0, 0.0
    dx, dy = np.linalg.solve(hess, [-bx, -by])
    return float(np.clip(dx, -1, 1)), float(np.clip(dy, -1, 1))


def log_response(image: np.ndarray, sigma: float) -> np.ndarray:
    return -(sigma**2) * ndimage.gaussian_laplace(np.asarray(image, dtype=np.float64), sigma)


def log_baseline_detect(image: np.ndarray, sigma: float = 1.0, threshold: float = 1.0) -> np.ndarray:
    """Laplacian-of-Gaussian spots ``(x, y, response)`` with 3x3 quadratic refinement.

    The third column is the raw filter response, not a probability.
    """
    if not np.isfinite(threshold):
        return np.zeros((0, 3))
    resp = log_response(image, sigma)
    peaks = local_maxima(resp, 5, threshold)
    padded = np.pad(resp, 1, mode="edge")
    rows = []
    for i, j in peaks:
        dx, dy = _quadratic_offset(padded[i : i + 3, j : j + 3])
        rows.append((j + dx, i + dy, resp[i, j]))
    return np.array(rows, dtype=np.float64).reshape(-1, 3)


def tune_log_baseline(frames, truths, sigmas=(1.0, 1.5, 2.0), n_thresholds: int = 40, gate: float = DEFAULT_GATE):
    """Grid search of (sigma, threshold) maximizing pooled F1; returns ``(sigma, threshold, f1)``."""
    best = (sigmas[0], math.inf, -1.0)
    for sigma in sigmas:
        responses = [log_response(f, sigma) for f in frames]
        peak_vals = np.concatenate([r[tuple(local_maxima(r, 5).T)] for r in responses])
        for thr in np.quantile(peak_vals, np.linspace(0.5, 0.999, n_thresholds)):
            tp = fp = fn = 0
            for img, truth in zip(frames, truths):
                res = match(log_baseline_detect(img, sigma, thr), np.asarray(truth)[:, 1:3], gate)
                tp, fp, fn = tp + res.tp, fp + len(res.fp), fn + len(res.fn)
            score = f1(tp, fp, fn)
            if score > best[2]:
                best = (float(sigma), float(thr), score)
    return best


# --- evaluation harness -----------------------------------------------------

@dataclass
class FrameMetrics:
    frame: int
    tp: int
    fp: int
    fn: int
    f1: float
    sq_dist_sum: float
    rmse: float
    psnr_noisy: float
    psnr_denoised: float


@dataclass
class SequenceMetrics:
    name: str
    scenario: str
    snr: float
    n_particles: int
    frames: list[FrameMetrics] = field(default_factory=list)

    def summary(self) -> dict:
        tp = sum(f.tp for f in self.frames)
        fp = sum(f.fp for f in self.frames)
        fn = sum(f.fn for f in self.frames)
        f1s = np.array([f.f1 for f in self.frames])
        rm = np.array([f.rmse for f in self.frames if not math.isnan(f.rmse)])
        pn = np.array([f.psnr_noisy for f in self.frames])
        pd = np.array([f.psnr_denoised for f in self.frames])
        sq = sum(f.sq_dist_sum for f in self.frames)
        return {
            "name": self.name,
            "scenario": self.scenario,
            "snr": self.snr,
            "n_particles": self.n_particles,
            "n_frames": len(self.frames),
            "tp": tp,
            "fp": fp,
            "fn": fn,
            "f1_mean": float(f1s.mean()) if len(f1s) else float("nan"),
            "f1_std": float(f1s.std()) if len(f1s) else float("nan"),
            "f1_pooled": f1(tp, fp, fn),
            "rmse": math.sqrt(sq / tp) if tp else float("nan"),
            "rmse_frame_std": float(rm.std()) if len(rm) else float("nan"),
            "psnr_noisy_mean": float(pn.mean()) if len(pn) else float("nan"),
            "psnr_noisy_std": float(pn.std()) if len(pn) else float("nan"),
            "psnr_denoised_mean": float(pd.mean()) if len(pd) else float("nan"),
            "psnr_denoised_std": float(pd.std()) if len(pd) else float("nan"),
        }


@dataclass
class MetricsReport:
    gate: float
    threshold: float
    sequences: list[SequenceMetrics] = field(default_factory=list)

    def aggregate(self) -> dict:
        pooled = SequenceMetrics("all", "mixed", float("nan"), 0)
        pooled.frames = [f for s in self.sequences for f in s.frames]
        out = pooled.summary()
        for key in ("name", "scenario", "snr", "n_particles"):
            out.pop(key)
        return out

    def to_dict(self) -> dict:
        return {
            "note": "mean/std are taken over frames within a sequence; rmse pools all matched pairs of a sequence",
            "gate": self.gate,
            "threshold": self.threshold,
            "sequences": [
                {**s.summary(), "frames": [vars(f) for f in s.frames]} for s in self.sequences
            ],
            "aggregate": self.aggregate(),
        }

    def to_json(self) -> str:
        return json.dumps(_finite(self.to_dict()), indent=2, sort_keys=True) + "\n"

    def to_table(self) -> str:
        head = f"{'scenario':<12}{'SNR':>5}{'N':>6}{'F1':>16}{'RMSE':>9}{'PSNR noisy':>13}{'PSNR deno':>13}"
        lines = [head, "-" * len(head)]
        for s in self.sequences:
            d = s.summary()
            lines.append(
                f"{d['scenario']:<12}{d['snr']:>5g}{d['n_particles']:>6d}"
                f"{d['f1_mean']:>9.3f}±{d['f1_std']:.3f}{d['rmse']:>9.3f}"
                f"{d['psnr_noisy_mean']:>13.3f}{d['psnr_denoised_mean']:>13.3f}"
            )
        return "\n".join(lines) + "\n"


def _finite(obj):
    if isinstance(obj, float) and not math.isfinite(obj):
        return None
    if isinstance(obj, dict):
        return {k: _finite(v) for k, v in obj.items()}
    if isinstance(obj, list):
        return [_finite(v) for v in obj]
    return obj


def frame_metrics(t: int, detections: np.ndarray, truth: np.ndarray, clean: np.ndarray,
                  noisy: np.ndarray, denoised: np.ndarray | None, gate: float) -> FrameMetrics:
    res = match(detections, np.asarray(truth)[:, 1:3], gate)
    d = res.distances
    lo, hi = percentile_range(clean)
    ref = normalize_frame(clean, lo, hi)
    pn = psnr(normalize_frame(noisy, lo, hi), ref)
    pd = psnr(denoised, ref) if denoised is not None else float("nan")
    return FrameMetrics(t, res.tp, len(res.fp), len(res.fn), f1(res.tp, len(res.fp), len(res.fn)),
                        float(np.sum(d * d)), rmse(d), pn, pd)


def evaluate(
    model: Denodet,
    datasets,
    gate: float = DEFAULT_GATE,
    threshold: float | None = None,
    nms_radius: float = 2.0,
    window: int = 7,
    names: list[str] | None = None,
    frames: list[int] | None = None,
    threads: int = 1,
) -> tuple[MetricsReport, list[np.ndarray]]:
    """Detect, match and score every frame; returns the report and the detections.

    ``threshold=None`` uses the checkpoint's calibrated threshold (0.5 if it
    has none).  Frames are scored independently, so ``threads > 1`` changes
    nothing but the wall time.
    """
    if not isinstance(datasets, (list, tuple)):
        datasets = [datasets]
    threshold = model_threshold(model, threshold)
    report = MetricsReport(gate, threshold)
    all_dets = []

    def score(ds, t):
        denoised, logits = model.predict(ds.noisy[t])
        dets = detect_from_logits(logits, threshold, nms_radius, window)
        return dets, frame_metrics(t, dets, ds.truth[t], ds.clean[t], ds.noisy[t], denoised, gate)

    with ThreadPoolExecutor(max_workers=max(1, int(threads))) as pool:
        for k, ds in enumerate(datasets):
            spec = ds.spec
            seq = SequenceMetrics(names[k] if names else f"seq{k}", spec.scenario, spec.snr, spec.n_particles)
            ids = list(frames) if frames is not None else range(len(ds))
            for dets, fm in pool.map(lambda t: score(ds, t), ids):
                all_dets.append(dets)
                seq.frames.append(fm)
            report.sequences.append(seq)
    return report, all_dets


def detections_csv(dets_per_frame: list[np.ndarray], frame_ids=None) -> str:
    lines = ["frame,x,y,score"]
    ids = frame_ids if frame_ids is not None else range(len(dets_per_frame))
    for t, dets in zip(ids, dets_per_frame):
        for x, y, s in np.asarray(dets).reshape(-1, 3):
            lines.append(f"{t},{x:.6f},{y:.6f},{s:.6f}")
    return "\n".join(lines) + "\n"
