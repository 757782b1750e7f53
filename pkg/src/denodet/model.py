"""One-encoder / dual-decoder network for joint denoising and detection.

Topology (widths for the default config)::

    image -> enc1 (8) -> pool -> enc2 (16) -> pool -> enc3 (32)
    DENO:  up(enc3)->conv(16) | enc2        -> res (16) = d2
           up(d2)  ->conv(8)  | enc1        -> res (8)  = d1 -> 1x1 -> sigmoid
    DET:   up(enc3)->conv(16) | enc2 | d2   -> res (16)
           up(.)   ->conv(8)  | enc1 | d1   -> res (8)       -> 1x1 -> logits

Convolutions that feed an instance normalization carry no bias (it would be
cancelled by the mean subtraction).
"""

from __future__ import annotations

import dataclasses
import itertools
import json
import os
import struct
from collections import OrderedDict
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor

MAGIC = b"DNDT1\0"
CHECKPOINT_VERSION = 1
LOW_PERCENTILE = 0.1
HIGH_PERCENTILE = 99.9

_forward_ids = itertools.count(1)


@dataclass
class ModelConfig:
    enc_widths: tuple[int, int, int] = (8, 16, 32)
    dec_widths: tuple[int, int] = (16, 8)
    in_channels: int = 1
    norm_eps: float = 1e-5
    seed: int = 0

    def __post_init__(self):
        self.enc_widths = tuple(int(w) for w in self.enc_widths)
        self.dec_widths = tuple(int(w) for w in self.dec_widths)
        if len(self.enc_widths) != 3 or len(self.dec_widths) != 2:
            raise ValueError("topology is fixed: 3 encoder levels and 2 decoder levels")
        if min(self.enc_widths + self.dec_widths) < 1 or self.in_channels < 1:
            raise ValueError("channel widths must be positive")

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        return cls(**d)


def _res_shapes(prefix: str, cin: int, cout: int) -> list[tuple[str, tuple[int, ...]]]:
    shapes = []
    for i, c in enumerate((cin, cout, cout), start=1):
        shapes += [
            (f"{prefix}.conv{i}.weight", (cout, c, 3, 3)),
            (f"{prefix}.norm{i}.scale", (cout,)),
            (f"{prefix}.norm{i}.shift", (cout,)),
        ]
    return shapes


def parameter_shapes(config: ModelConfig) -> "OrderedDict[str, tuple[int, ...]]":
    """Ordered parameter names and shapes; this order is the checkpoint order."""
    e1, e2, e3 = config.enc_widths
    d2, d1 = config.dec_widths
    shapes = []
    shapes += _res_shapes("enc1", config.in_channels, e1)
    shapes += _res_shapes("enc2", e1, e2)
    shapes += _res_shapes("enc3", e2, e3)
    for branch in ("deno", "det"):
        extra2 = d2 if branch == "det" else 0
        extra1 = d1 if branch == "det" else 0
        shapes += [(f"{branch}.up2.weight", (d2, e3, 3, 3)), (f"{branch}.up2.bias", (d2,))]
        shapes += _res_shapes(f"{branch}.res2", d2 + e2 + extra2, d2)
        shapes += [(f"{branch}.up1.weight", (d1, d2, 3, 3)), (f"{branch}.up1.bias", (d1,))]
        shapes += _res_shapes(f"{branch}.res1", d1 + e1 + extra1, d1)
        shapes += [(f"{branch}.head.weight", (1, d1, 1, 1)), (f"{branch}.head.bias", (1,))]
    return OrderedDict(shapes)


def expected_parameter_count(config: ModelConfig) -> int:
    """Closed-form count, kept independent of :func:`parameter_shapes`."""
    e1, e2, e3 = config.enc_widths
    d2, d1 = config.dec_widths

    def res(cin, cout):
        return 9 * cout * (cin + 2 * cout) + 6 * cout

    def up(cin, cout):
        return 9 * cin * cout + cout

    enc = res(config.in_channels, e1) + res(e1, e2) + res(e2, e3)
    deno = up(e3, d2) + res(d2 + e2, d2) + up(d2, d1) + res(d1 + e1, d1) + d1 + 1
    det = up(e3, d2) + res(2 * d2 + e2, d2) + up(d2, d1) + res(2 * d1 + e1, d1) + d1 + 1
    return enc + deno + det


def init_params(config: ModelConfig, dtype=np.float32) -> "OrderedDict[str, Tensor]":
    """He-normal weights, zero biases, unit norm scales, zero norm shifts."""
    rng = np.random.default_rng(config.seed)
    params = OrderedDict()
    for name, shape in parameter_shapes(config).items():
        if name.endswith(".weight"):
            fan_in = int(np.prod(shape[1:]))
            data = rng.normal(0.0, np.sqrt(2.0 / fan_in), size=shape)
        elif name.endswith(".scale"):
            data = np.ones(shape)
        else:
            data = np.zeros(shape)
        params[name] = Tensor(data.astype(dtype), requires_grad=True, name=name)
    return params


def check_params(params, config: ModelConfig) -> None:
    shapes = parameter_shapes(config)
    if list(params) != list(shapes):
        raise ValueError("parameter names/order do not match the config")
    for name, shape in shapes.items():
        if tuple(params[name].shape) != shape:
            raise ValueError(f"{name}: shape {params[name].shape} != {shape}")
    total = sum(int(np.prod(s)) for s in shapes.values())
    if total != expected_parameter_count(config):
        raise AssertionError("parameter layout disagrees with the analytic count")


# --- building blocks --------------------------------------------------------

def residual_block(x: Tensor, params, prefix: str, eps: float = 1e-5) -> Tensor:
    w1 = params[f"{prefix}.conv1.weight"]
    if x.shape[1] != w1.shape[1]:
        raise ad.ShapeError(f"{prefix}: got {x.shape[1]} channels, block expects {w1.shape[1]}")

    def cn(h, i):
        h = ad.conv2d(h, params[f"{prefix}.conv{i}.weight"])
        return ad.instance_norm(h, params[f"{prefix}.norm{i}.scale"], params[f"{prefix}.norm{i}.shift"], eps)

    first = ad.relu(cn(x, 1))
    second = ad.relu(cn(first, 2))
    third = cn(second, 3)
    return ad.relu(third + first)


def _upsample_block(x: Tensor, params, prefix: str) -> Tensor:
    return ad.conv2d(ad.upsample_bilinear2(x), params[f"{prefix}.weight"], params[f"{prefix}.bias"])


@dataclass
class EncoderFeatures:
    levels: tuple[Tensor, Tensor, Tensor]
    tag: int


@dataclass
class DenoOutput:
    denoised: Tensor
    features: tuple[Tensor, Tensor]  # (level-2 at H/2, level-1 at H)
    tag: int


@dataclass
class ForwardOutput:
    denoised: Tensor
    score_logits: Tensor
    encoder: tuple[Tensor, Tensor, Tensor] = field(repr=False)
    deno_features: tuple[Tensor, Tensor] = field(repr=False)


def encoder_forward(image: Tensor, params, config: ModelConfig) -> EncoderFeatures:
    if image.ndim != 4 or image.shape[1] != config.in_channels:
        raise ad.ShapeError(f"expected [N, {config.in_channels}, H, W], got {image.shape}")
    h, w = image.shape[2:]
    if h % 4 or w % 4:
        raise ad.ShapeError(f"spatial size must be divisible by 4, got {h}x{w}")
    eps = config.norm_eps
    l1 = residual_block(image, params, "enc1", eps)
    l2 = residual_block(ad.maxpool2(l1), params, "enc2", eps)
    l3 = residual_block(ad.maxpool2(l2), params, "enc3", eps)
    return EncoderFeatures((l1, l2, l3), next(_forward_ids))


def deno_decoder_forward(enc: EncoderFeatures, params, config: ModelConfig) -> DenoOutput:
    l1, l2, l3 = enc.levels
    eps = config.norm_eps
    d2 = residual_block(ad.concat_channels([_upsample_block(l3, params, "deno.up2"), l2]), params, "deno.res2", eps)
    d1 = residual_block(ad.concat_channels([_upsample_block(d2, params, "deno.up1"), l1]), params, "deno.res1", eps)
    out = ad.conv2d(d1, params["deno.head.weight"], params["deno.head.bias"])
    return DenoOutput(ad.sigmoid(out), (d2, d1), enc.tag)


def det_decoder_forward(enc: EncoderFeatures, deno: DenoOutput, params, config: ModelConfig) -> Tensor:
    if deno.tag != enc.tag:
        raise ValueError("denoising features come from a different forward pass")
    l1, l2, l3 = enc.levels
    f2, f1 = deno.features
    if f2.shape[2:] != l2.shape[2:] or f1.shape[2:] != l1.shape[2:]:
        raise ad.ShapeError("denoising feature maps do not match encoder levels")
    eps = config.norm_eps
    t2 = residual_block(ad.concat_channels([_upsample_block(l3, params, "det.up2"), l2, f2]), params, "det.res2", eps)
    t1 = residual_block(ad.concat_channels([_upsample_block(t2, params, "det.up1"), l1, f1]), params, "det.res1", eps)
    return ad.conv2d(t1, params["det.head.weight"], params["det.head.bias"])


def forward(image: Tensor, params, config: ModelConfig) -> ForwardOutput:
    enc = encoder_forward(image, params, config)
    deno = deno_decoder_forward(enc, params, config)
    logits = det_decoder_forward(enc, deno, params, config)
    return ForwardOutput(deno.denoised, logits, enc.levels, deno.features)


# --- normalization ----------------------------------------------------------

def percentile_range(img: np.ndarray, low: float = LOW_PERCENTILE, high: float = HIGH_PERCENTILE) -> tuple[float, float]:
    lo, hi = np.percentile(img, [low, high])
    return float(lo), float(hi)


def normalize_frame(img: np.ndarray, lo: float | None = None, hi: float | None = None) -> np.ndarray:
    """Map to [0, 1] by the 0.1/99.9 percentiles (or a given range), clamped."""
    if lo is None or hi is None:
        lo, hi = percentile_range(img)
    span = hi - lo
    if span <= 0:
        return np.zeros(np.shape(img), dtype=np.float32)
    return np.clip((np.asarray(img, dtype=np.float64) - lo) / span, 0.0, 1.0).astype(np.float32)


# --- model bundle and checkpoints -------------------------------------------

class CheckpointError(Exception):
    code = "checkpoint"


class CheckpointCorrupt(CheckpointError):
    code = "corrupt"


class CheckpointVersionError(CheckpointError):
    code = "version"


class CheckpointCountMismatch(CheckpointError):
    code = "count"


@dataclass
class Denodet:
    config: ModelConfig
    params: "OrderedDict[str, Tensor]"
    norm_stats: dict = field(default_factory=dict)
    meta: dict = field(default_factory=dict)

    @classmethod
    def create(cls, config: ModelConfig | None = None) -> "Denodet":
        config = config or ModelConfig()
        return cls(config, init_params(config), default_norm_stats())

    def __call__(self, image: Tensor) -> ForwardOutput:
        return forward(image, self.params, self.config)

    def predict(self, frame: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """Denoised image in [0, 1] and score logits for one raw frame."""
        x = normalize_frame(frame)[None, None]
        with ad.no_grad():
            out = self(Tensor(x.astype(self.dtype)))
        return out.denoised.data[0, 0], out.score_logits.data[0, 0]

    @property
    def dtype(self):
        return next(iter(self.params.values())).dtype

    def n_parameters(self) -> int:
        return sum(p.size for p in self.params.values())

    def copy(self, dtype=None) -> "Denodet":
        dtype = dtype or self.dtype
        params = OrderedDict(
            (k, Tensor(v.data.astype(dtype, copy=True), requires_grad=True, name=k)) for k, v in self.params.items()
        )
        return Denodet(self.config, params, dict(self.norm_stats), dict(self.meta))


def default_norm_stats() -> dict:
    return {
        "low_percentile": LOW_PERCENTILE,
        "high_percentile": HIGH_PERCENTILE,
        "target_lo": 0.0,
        "target_hi": 1.0,
    }


def checkpoint_bytes(model: Denodet) -> bytes:
    header = {
        "format_version": CHECKPOINT_VERSION,
        "config": model.config.to_dict(),
        "parameters": [[name, list(t.shape)] for name, t in model.params.items()],
        "parameter_count": model.n_parameters(),
        "normalization": model.norm_stats,
        "meta": model.meta,
    }
    raw = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    body = b"".join(np.ascontiguousarray(t.data, dtype="<f4").tobytes() for t in model.params.values())
    return MAGIC + struct.pack("<Q", len(raw)) + raw + body


def save_checkpoint(model: Denodet, path: str | os.PathLike) -> Path:
    path = Path(path)
    path.write_bytes(checkpoint_bytes(model))
    return path


def parse_checkpoint(buf: bytes) -> Denodet:
    if buf[: len(MAGIC)] != MAGIC:
        raise CheckpointCorrupt("bad magic bytes")
    pos = len(MAGIC)
    if len(buf) < pos + 8:
        raise CheckpointCorrupt("truncated header length")
    (hlen,) = struct.unpack("<Q", buf[pos : pos + 8])
    pos += 8
    if len(buf) < pos + hlen:
        raise CheckpointCorrupt("truncated header")
    try:
        header = json.loads(buf[pos : pos + hlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointCorrupt(f"unreadable header: {exc}") from exc
    pos += hlen
    if header.get("format_version") != CHECKPOINT_VERSION:
        raise CheckpointVersionError(f"unsupported checkpoint version {header.get('format_version')!r}")
    config = ModelConfig.from_dict(header["config"])
    shapes = parameter_shapes(config)
    listed = OrderedDict((n, tuple(s)) for n, s in header["parameters"])
    count = sum(int(np.prod(s)) for s in listed.values())
    if listed != shapes or count != header.get("parameter_count") or count != expected_parameter_count(config):
        raise CheckpointCountMismatch(
            f"checkpoint lists {count} parameters, config requires {expected_parameter_count(config)}"
        )
    if len(buf) - pos != 4 * count:
        raise CheckpointCorrupt(f"parameter block has {len(buf) - pos} bytes, expected {4 * count}")
    flat = np.frombuffer(buf, dtype="<f4", count=count, offset=pos).astype(np.float32)
    params, off = OrderedDict(), 0
    for name, shape in shapes.items():
        n = int(np.prod(shape))
        params[name] = Tensor(flat[off : off + n].reshape(shape).copy(), requires_grad=True, name=name)
        off += n
    return Denodet(config, params, header.get("normalization", default_norm_stats()), header.get("meta", {}))


def load_checkpoint(path: str | os.PathLike) -> Denodet:
    return parse_checkpoint(Path(path).read_bytes())
