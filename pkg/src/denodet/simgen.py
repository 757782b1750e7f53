"""Synthetic 2D+t particle sequences with noiseless references.

Three motion scenarios are simulated (vesicle, receptor, microtubule
plus-end).  Trajectories are evolved sequentially from per-frame random
streams; rendering and Poisson noise use separate per-frame streams, so any
frame can be regenerated on its own and in any order.
"""

from __future__ import annotations

import dataclasses
import json
import math
import os
import shutil
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .pgm import read_pgm16, write_pgm16

FORMAT_VERSION = "dndt-ds-1"
SCENARIOS = ("vesicle", "receptor", "microtubule")
COMET_AMPLITUDES = (1.0, 0.7, 0.45, 0.25)
MAX_DATASET_BYTES = 4 * 1024**3

_MASK64 = (1 << 64) - 1
_STREAM_MOTION = 0x4D4F54494F4E
_STREAM_NOISE = 0x4E4F495345


class DatasetError(ValueError):
    """Malformed or unreadable dataset directory."""


class DatasetTooLarge(MemoryError):
    pass


@dataclass
class SequenceSpec:
    scenario: str
    snr: float
    n_particles: int
    n_frames: int
    height: int = 128
    width: int = 128
    background: float = 10.0
    psf_sigma: float = 1.0
    seed: int = 0
    # motion model
    sigma_d_vesicle: float = 1.0
    sigma_d_receptor: float = 0.7
    receptor_speed: float = 2.0
    receptor_stay: float = 0.95
    receptor_sigma_theta: float = 0.1
    microtubule_speed: float = 3.0
    microtubule_sigma_theta: float = 0.05
    v_max: float = 5.0

    def validate(self) -> None:
        if self.scenario not in SCENARIOS:
            raise ValueError(f"unknown scenario {self.scenario!r}; expected one of {SCENARIOS}")
        if not self.snr > 0:
            raise ValueError("snr must be positive")
        if self.n_particles < 1 or self.n_frames < 1:
            raise ValueError("n_particles and n_frames must be >= 1")
        if self.height < 32 or self.width < 32:
            raise ValueError("frames must be at least 32x32")
        if not self.background > 0 or not self.psf_sigma > 0:
            raise ValueError("background and psf_sigma must be positive")

    @property
    def amplitude(self) -> float:
        return amplitude_for_snr(self.snr, self.background)


@dataclass
class ParticleTrack:
    id: int
    x: float
    y: float
    vx: float = 0.0
    vy: float = 0.0
    alive: bool = True
    directed: bool = False
    orientation: float = 0.0


@dataclass
class FramePair:
    clean: np.ndarray
    noisy: np.ndarray
    truth: np.ndarray  # rows of (id, x, y, amplitude)


@dataclass
class SequenceDataset:
    spec: SequenceSpec
    clean: np.ndarray  # (T, H, W) float64 photon units
    noisy: np.ndarray  # (T, H, W) int64 counts
    truth: list[np.ndarray] = field(default_factory=list)

    def __len__(self) -> int:
        return self.noisy.shape[0]

    def frame(self, t: int) -> FramePair:
        return FramePair(self.clean[t], self.noisy[t], self.truth[t])

    def manifest(self) -> dict:
        m = dataclasses.asdict(self.spec)
        m["format"] = FORMAT_VERSION
        m["amplitude"] = self.spec.amplitude
        return m

    def save(self, out_dir: str | os.PathLike, force: bool = False) -> Path:
        out = Path(out_dir)
        if out.exists() and any(out.iterdir()):
            if not force:
                raise FileExistsError(f"{out} exists and is not empty (use force)")
            shutil.rmtree(out)
        for sub in ("noisy", "clean", "gt"):
            (out / sub).mkdir(parents=True, exist_ok=True)
        for t in range(len(self)):
            write_pgm16(out / "noisy" / f"t{t:04d}.pgm", self.noisy[t])
            write_pgm16(out / "clean" / f"t{t:04d}.pgm", self.clean[t])
            write_truth_csv(out / "gt" / f"t{t:04d}.csv", self.truth[t])
        path = out / "manifest.json"
        path.write_text(json.dumps(self.manifest(), indent=2, sort_keys=True) + "\n")
        return path


def write_truth_csv(path: str | os.PathLike, rows: np.ndarray) -> None:
    lines = ["id,x,y,amplitude"]
    for pid, x, y, amp in rows:
        lines.append(f"{int(pid)},{x:.6f},{y:.6f},{amp:.6f}")
    Path(path).write_text("\n".join(lines) + "\n")


def read_truth_csv(path: str | os.PathLike) -> np.ndarray:
    text = Path(path).read_text().splitlines()
    if not text or text[0].strip() != "id,x,y,amplitude":
        raise DatasetError(f"{path}: bad header")
    rows = [[float(v) for v in line.split(",")] for line in text[1:] if line.strip()]
    return np.array(rows, dtype=np.float64).reshape(-1, 4)


def load_dataset(path: str | os.PathLike) -> SequenceDataset:
    root = Path(path)
    try:
        manifest = json.loads((root / "manifest.json").read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise DatasetError(f"{root}: cannot read manifest.json ({exc})") from exc
    if manifest.get("format") != FORMAT_VERSION:
        raise DatasetError(f"{root}: unsupported format {manifest.get('format')!r}")
    known = {f.name for f in dataclasses.fields(SequenceSpec)}
    spec = SequenceSpec(**{k: v for k, v in manifest.items() if k in known})
    n = spec.n_frames
    try:
        noisy = np.stack([read_pgm16(root / "noisy" / f"t{t:04d}.pgm") for t in range(n)])
        clean = np.stack([read_pgm16(root / "clean" / f"t{t:04d}.pgm") for t in range(n)]).astype(np.float64)
        truth = [read_truth_csv(root / "gt" / f"t{t:04d}.csv") for t in range(n)]
    except (OSError, ValueError) as exc:
        raise DatasetError(f"{root}: {exc}") from exc
    if noisy.shape[1:] != (spec.height, spec.width):
        raise DatasetError(f"{root}: frame size {noisy.shape[1:]} disagrees with manifest")
    return SequenceDataset(spec, clean, noisy, truth)


# --- random streams ---------------------------------------------------------

def mix64(z: int) -> int:
    """splitmix64 finalizer."""
    z = (z + 0x9E3779B97F4A7C15) & _MASK64
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & _MASK64
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & _MASK64
    return z ^ (z >> 31)


def frame_rng(seed: int, t: int, stream: int) -> np.random.Generator:
    key = mix64(mix64((seed & _MASK64) ^ mix64(t)) ^ stream)
    return np.random.Generator(np.random.PCG64(key))


# --- physics ----------------------------------------------------------------

def amplitude_for_snr(snr: float, background: float) -> float:
    """Peak amplitude ``A`` with ``A / sqrt(A + B) == snr``."""
    if snr < 0 or background < 0:
        raise ValueError("snr and background must be non-negative")
    return 0.5 * (snr * snr + snr * math.sqrt(snr * snr + 4.0 * background))


def _spawn(pid: int, spec: SequenceSpec, rng: np.random.Generator) -> ParticleTrack:
    x = rng.uniform(0, spec.width)
    y = rng.uniform(0, spec.height)
    theta = rng.uniform(0, 2 * math.pi)
    track = ParticleTrack(pid, x, y, orientation=theta)
    if spec.scenario == "receptor":
        track.directed = bool(rng.random() < 0.5)
        if track.directed:
            track.vx = spec.receptor_speed * math.cos(theta)
            track.vy = spec.receptor_speed * math.sin(theta)
    elif spec.scenario == "microtubule":
        track.vx = spec.microtubule_speed * math.cos(theta)
        track.vy = spec.microtubule_speed * math.sin(theta)
    return track


def step_motion(track: ParticleTrack, spec: SequenceSpec, rng: np.random.Generator) -> ParticleTrack:
    """Advance one frame.  A particle leaving the field comes back dead."""
    nxt = dataclasses.replace(track)
    if spec.scenario == "vesicle":
        vx, vy = rng.normal(0.0, spec.sigma_d_vesicle, size=2)
    elif spec.scenario == "receptor":
        if rng.random() >= spec.receptor_stay:
            nxt.directed = not track.directed
        if nxt.directed:
            nxt.orientation = track.orientation + rng.normal(0.0, spec.receptor_sigma_theta)
            vx = spec.receptor_speed * math.cos(nxt.orientation)
            vy = spec.receptor_speed * math.sin(nxt.orientation)
        else:
            vx, vy = rng.normal(0.0, spec.sigma_d_receptor, size=2)
    else:
        nxt.orientation = track.orientation + rng.normal(0.0, spec.microtubule_sigma_theta)
        vx = spec.microtubule_speed * math.cos(nxt.orientation)
        vy = spec.microtubule_speed * math.sin(nxt.orientation)
    speed = math.hypot(vx, vy)
    if speed > spec.v_max:
        vx, vy = vx * spec.v_max / speed, vy * spec.v_max / speed
    nxt.vx, nxt.vy = float(vx), float(vy)
    nxt.x = track.x + nxt.vx
    nxt.y = track.y + nxt.vy
    nxt.alive = 0 <= nxt.x < spec.width and 0 <= nxt.y < spec.height
    return nxt


def simulate_tracks(spec: SequenceSpec) -> list[list[ParticleTrack]]:
    """Per-frame particle states; dead particles are replaced to keep the count."""
    rng = frame_rng(spec.seed, 0, _STREAM_MOTION)
    current = [_spawn(i, spec, rng) for i in range(spec.n_particles)]
    next_id = spec.n_particles
    frames = [current]
    for t in range(1, spec.n_frames):
        rng = frame_rng(spec.seed, t, _STREAM_MOTION)
        stepped = []
        for track in current:
            moved = step_motion(track, spec, rng)
            if not moved.alive:
                moved = _spawn(next_id, spec, rng)
                next_id += 1
            stepped.append(moved)
        current = stepped
        frames.append(current)
    return frames


def _add_gaussian(img: np.ndarray, x: float, y: float, amp: float, sigma: float) -> None:
    h, w = img.shape
    r = int(math.ceil(4 * sigma))
    cx, cy = int(round(x)), int(round(y))
    x0, x1 = max(cx - r, 0), min(cx + r + 1, w)
    y0, y1 = max(cy - r, 0), min(cy + r + 1, h)
    if x0 >= x1 or y0 >= y1:
        return
    xs = np.arange(x0, x1) - x
    ys = np.arange(y0, y1) - y
    d2 = ys[:, None] ** 2 + xs[None, :] ** 2
    g = np.exp(-d2 / (2 * sigma * sigma))
    g[d2 > (4 * sigma) ** 2] = 0.0
    img[y0:y1, x0:x1] += amp * g


def render_clean_frame(tracks: list[ParticleTrack], spec: SequenceSpec, amplitude: float | None = None) -> np.ndarray:
    amp = spec.amplitude if amplitude is None else amplitude
    signal = np.zeros((spec.height, spec.width), dtype=np.float64)
    for tr in tracks:
        if spec.scenario == "microtubule":
            dx, dy = math.cos(tr.orientation), math.sin(tr.orientation)
            for lobe, rel in enumerate(COMET_AMPLITUDES):
                _add_gaussian(signal, tr.x - lobe * dx, tr.y - lobe * dy, amp * rel, spec.psf_sigma)
        else:
            _add_gaussian(signal, tr.x, tr.y, amp, spec.psf_sigma)
    return signal + spec.background


def apply_poisson(clean: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    """Poisson counts: inversion by sequential search below mean 30, rounded normal above."""
    lam = np.asarray(clean, dtype=np.float64)
    if np.any(lam < 0) or not np.all(np.isfinite(lam)):
        raise ValueError("apply_poisson needs finite, non-negative means")
    u = rng.random(lam.shape)
    z = rng.standard_normal(lam.shape)
    out = np.maximum(np.rint(lam + np.sqrt(lam) * z), 0).astype(np.int64)
    small = lam < 30
    if np.any(small):
        ls, us = lam[small], u[small]
        k = np.zeros(ls.shape, dtype=np.int64)
        p = np.exp(-ls)
        cdf = p.copy()
        active = us > cdf
        for _ in range(200):
            if not active.any():
                break
            k[active] += 1
            p[active] *= ls[active] / k[active]
            cdf[active] += p[active]
            active &= us > cdf
        out[small] = k
    return out


def render_frame(spec: SequenceSpec, tracks: list[ParticleTrack], t: int) -> FramePair:
    amp = spec.amplitude
    clean = render_clean_frame(tracks, spec, amp)
    noisy = apply_poisson(clean, frame_rng(spec.seed, t, _STREAM_NOISE))
    truth = np.array([[tr.id, tr.x, tr.y, amp] for tr in tracks], dtype=np.float64).reshape(-1, 4)
    return FramePair(clean, noisy, truth)


def make_sequence(spec: SequenceSpec, threads: int = 1, frames: list[int] | None = None) -> SequenceDataset:
    """Generate the full sequence (or a chosen subset/order of frame indices)."""
    spec.validate()
    need = 2 * 8 * spec.n_frames * spec.height * spec.width
    if need > MAX_DATASET_BYTES:
        raise DatasetTooLarge(f"dataset would need {need / 2**30:.1f} GiB (limit {MAX_DATASET_BYTES / 2**30:.0f} GiB)")
    states = simulate_tracks(spec)
    order = list(range(spec.n_frames)) if frames is None else list(frames)
    if threads > 1:
        with ThreadPoolExecutor(threads) as pool:
            pairs = list(pool.map(lambda t: render_frame(spec, states[t], t), order))
    else:
        pairs = [render_frame(spec, states[t], t) for t in order]
    return SequenceDataset(
        spec,
        np.stack([p.clean for p in pairs]),
        np.stack([p.noisy for p in pairs]),
        [p.truth for p in pairs],
    )
