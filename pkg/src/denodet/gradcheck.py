"""Finite-difference verification of every differentiable op, every loss,
and a tiny end-to-end model, all in float64."""

from __future__ import annotations

import time
from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor, grad_check
from .losses import LossConfig, balanced_bce, deno_loss, det_loss, dice_loss, dsnt, jsd, joint_loss
from .model import ModelConfig, forward, init_params

OP_TOL = 1e-4
MODEL_TOL = 1e-3
MAX_KINK_FRACTION = 0.1
TINY_CONFIG = ModelConfig(enc_widths=(2, 4, 8), dec_widths=(4, 2), seed=0)


@dataclass
class CaseResult:
    name: str
    instances: int
    coords: int
    max_rel_error: float
    tol: float
    seconds: float
    kinks: int = 0

    @property
    def passed(self) -> bool:
        # a suite that skips most coordinates as kinks has not checked anything
        return self.max_rel_error < self.tol and self.kinks <= MAX_KINK_FRACTION * (self.coords + self.kinks)


@dataclass
class SuiteReport:
    results: list[CaseResult]

    @property
    def passed(self) -> bool:
        return all(r.passed for r in self.results)

    def to_text(self) -> str:
        lines = [f"{'check':<22}{'instances':>10}{'coords':>9}{'kinks':>7}{'max_rel_err':>13}{'tol':>9}  status"]
        for r in self.results:
            lines.append(
                f"{r.name:<22}{r.instances:>10}{r.coords:>9}{r.kinks:>7}{r.max_rel_error:>13.2e}{r.tol:>9.0e}  "
                + ("ok" if r.passed else "FAIL")
            )
        lines.append(f"overall: {'PASS' if self.passed else 'FAIL'}")
        return "\n".join(lines)


# Each builder draws one random instance and returns (scalar function, inputs).
Builder = Callable[[np.random.Generator], tuple[Callable[..., Tensor], list[Tensor]]]


def _t(a) -> Tensor:
    return Tensor(np.asarray(a, dtype=np.float64), requires_grad=True)


def _weighted(rng, shape):
    w = rng.standard_normal(shape)
    return lambda out: (out * w).sum()


def _away_from_zero(rng, shape, margin=0.05):
    return rng.choice([-1.0, 1.0], size=shape) * rng.uniform(margin, 1.5, size=shape)


def _distinct(rng, shape):
    """Values spaced far apart relative to the finite-difference step."""
    n = int(np.prod(shape))
    return (rng.permutation(n) * 0.01 + rng.uniform(0, 0.001)).reshape(shape)


def _binary(op):
    def build(rng):
        shape = tuple(rng.integers(1, 4, size=2))
        a = rng.standard_normal(shape)
        b = rng.standard_normal(shape[1:])  # exercise broadcasting
        if op is ad.div:
            b = _away_from_zero(rng, b.shape, 0.5)
        w = _weighted(rng, shape)
        return (lambda x, y: w(op(x, y))), [_t(a), _t(b)]
    return build


def _unary(op, sample):
    def build(rng):
        shape = tuple(rng.integers(1, 5, size=2))
        w = _weighted(rng, shape)
        return (lambda x: w(op(x))), [_t(sample(rng, shape))]
    return build


def _pos(rng, shape):
    return rng.uniform(0.3, 2.0, size=shape)


def _power(rng):
    shape = (3, 4)
    e = float(rng.uniform(-2, 3))
    w = _weighted(rng, shape)
    return (lambda x: w(ad.power(x, e))), [_t(_pos(rng, shape))]


def _clamp(rng):
    shape = (4, 5)
    x = _away_from_zero(rng, shape, 0.05)
    x[np.abs(np.abs(x) - 0.5) < 0.05] = 0.2  # keep clear of the bounds
    w = _weighted(rng, shape)
    return (lambda t: w(ad.clamp(t, -0.5, 0.5))), [_t(x)]


def _reductions(rng):
    shape = (2, 3, 4)
    axis = int(rng.integers(0, 3))
    w1 = _weighted(rng, tuple(s for i, s in enumerate(shape) if i != axis))
    return (lambda x: w1(ad.tsum(x, axis=axis)) + ad.tmean(x * x)), [_t(rng.standard_normal(shape))]


def _reshape_getitem(rng):
    w = _weighted(rng, (3, 2))
    return (lambda x: w(ad.reshape(x, (4, 6))[1:4, ::3])), [_t(rng.standard_normal((2, 3, 4)))]


def _concat(rng):
    a, b = rng.standard_normal((2, 1, 3, 3)), rng.standard_normal((2, 2, 3, 3))
    w = _weighted(rng, (2, 3, 3, 3))
    return (lambda x, y: w(ad.concat_channels([x, y]))), [_t(a), _t(b)]


def _conv(k, bias):
    def build(rng):
        n, cin, cout = int(rng.integers(1, 3)), int(rng.integers(1, 3)), int(rng.integers(1, 4))
        h, wd = int(rng.integers(2, 6)), int(rng.integers(2, 6))
        ins = [_t(rng.standard_normal((n, cin, h, wd))), _t(rng.standard_normal((cout, cin, k, k)))]
        if bias:
            ins.append(_t(rng.standard_normal(cout)))
        w = _weighted(rng, (n, cout, h, wd))
        return (lambda *a: w(ad.conv2d(*a))), ins
    return build


def _instance_norm(rng):
    shape = (2, 3, 3, 4)
    w = _weighted(rng, shape)
    ins = [_t(rng.standard_normal(shape) * 2 + 1), _t(rng.standard_normal(3)), _t(rng.standard_normal(3))]
    return (lambda x, s, b: w(ad.instance_norm(x, s, b))), ins


def _maxpool(rng):
    shape = (1, 2, 4, 6)
    w = _weighted(rng, (1, 2, 2, 3))
    return (lambda x: w(ad.maxpool2(x))), [_t(_distinct(rng, shape))]


def _upsample(rng):
    shape = (1, 2, int(rng.integers(1, 4)), int(rng.integers(1, 4)))
    w = _weighted(rng, (1, 2, 2 * shape[2], 2 * shape[3]))
    return (lambda x: w(ad.upsample_bilinear2(x))), [_t(rng.standard_normal(shape))]


def _softmax2d(rng):
    shape = (2, 1, 4, 3)
    w = _weighted(rng, shape)
    return (lambda x: w(ad.softmax2d(x))), [_t(rng.standard_normal(shape))]


def _windows(rng):
    k = 3
    s = rng.integers(0, 2, size=4)
    r = rng.integers(-1, 6, size=4)  # some windows hang over the border
    c = rng.integers(-1, 6, size=4)
    w = _weighted(rng, (4, k, k))
    return (lambda x: w(ad.extract_windows(x, s, r, c, k, fill=0.0))), [_t(rng.standard_normal((2, 1, 7, 7)))]


def _dice(rng):
    shape = (2, 1, 4, 4)
    ref = rng.uniform(0, 1, size=shape)
    return (lambda p: dice_loss(p, ref)), [_t(rng.uniform(0.05, 0.95, size=shape))]


def _bce(rng):
    shape = (2, 1, 4, 4)
    ref = (rng.uniform(size=shape) < 0.3).astype(np.float64)
    return (lambda p: balanced_bce(p, ref)), [_t(rng.uniform(0.05, 0.95, size=shape))]


def _deno(rng):
    shape = (1, 1, 5, 5)
    ref = rng.uniform(0, 1, size=shape)
    cfg = LossConfig()
    return (lambda p: deno_loss(p, ref, cfg)), [_t(rng.uniform(0.05, 0.95, size=shape))]


def _dsnt(rng):
    a, b = rng.standard_normal(2)
    k = int(rng.choice([3, 5, 7]))

    def f(x):
        px, py = dsnt(ad.softmax2d(x))
        return (px * a + py * b).sum()
    return f, [_t(rng.standard_normal((2, k, k)))]


def _jsd(rng):
    q = rng.uniform(0.01, 1, size=(3, 5, 5))
    q[0, 0, :2] = 0.0  # zero mass in the target
    q /= q.sum(axis=(-2, -1), keepdims=True)
    w = _weighted(rng, (3,))
    return (lambda x: w(jsd(ad.softmax2d(x), q))), [_t(rng.standard_normal((3, 5, 5)))]


def _truth(rng, n, size, margin=4.0):
    rows = [[i, *rng.uniform(margin, size - margin, size=2)] for i in range(n)]
    return np.array(rows, dtype=np.float64).reshape(-1, 3)


def _det(rng):
    size = 16
    truth = [_truth(rng, int(rng.integers(1, 4)), size) for _ in range(2)]
    cfg = LossConfig()
    seed = int(rng.integers(0, 2**31))
    return (lambda x: det_loss(x, truth, cfg, np.random.default_rng(seed))), [_t(rng.standard_normal((2, 1, size, size)))]


def _model_case(rng):
    cfg = TINY_CONFIG
    params = init_params(ModelConfig(cfg.enc_widths, cfg.dec_widths, seed=int(rng.integers(0, 2**31))),
                         dtype=np.float64)
    image = rng.uniform(0, 1, size=(1, 1, 16, 16))
    clean = np.clip(image + 0.1 * rng.standard_normal(image.shape), 0, 1)
    truth = [_truth(rng, 2, 16)]
    names = list(params)
    loss_cfg = LossConfig()
    seed = int(rng.integers(0, 2**31))

    def f(*tensors):
        p = dict(zip(names, tensors))
        out = forward(Tensor(image), p, cfg)
        return joint_loss(out, clean, truth, loss_cfg, np.random.default_rng(seed))
    return f, [params[n] for n in names]


OP_CASES: dict[str, Builder] = {
    "add": _binary(ad.add),
    "sub": _binary(ad.sub),
    "mul": _binary(ad.mul),
    "div": _binary(ad.div),
    "power": _power,
    "exp": _unary(ad.exp, lambda r, s: r.standard_normal(s)),
    "log": _unary(ad.log, _pos),
    "sqrt": _unary(ad.sqrt, _pos),
    "clamp": _clamp,
    "relu": _unary(ad.relu, _away_from_zero),
    "sigmoid": _unary(ad.sigmoid, lambda r, s: 3 * r.standard_normal(s)),
    "sum/mean": _reductions,
    "reshape/getitem": _reshape_getitem,
    "concat_channels": _concat,
    "conv2d_3x3": _conv(3, False),
    "conv2d_3x3_bias": _conv(3, True),
    "conv2d_1x1_bias": _conv(1, True),
    "instance_norm": _instance_norm,
    "maxpool2": _maxpool,
    "upsample_bilinear2": _upsample,
    "softmax2d": _softmax2d,
    "extract_windows": _windows,
}

LOSS_CASES: dict[str, Builder] = {
    "dice_loss": _dice,
    "balanced_bce": _bce,
    "deno_loss": _deno,
    "dsnt": _dsnt,
    "jsd": _jsd,
    "det_loss": _det,
}


def run_case(name: str, builder: Builder, instances: int, seed: int, tol: float,
             max_coords: int | None = None, skip_kinks: bool = False) -> CaseResult:
    rng = np.random.default_rng([seed, sum(map(ord, name))])
    worst, coords, kinks = 0.0, 0, 0
    start = time.perf_counter()
    for _ in range(instances):
        f, inputs = builder(rng)
        rep = grad_check(f, inputs, eps=1e-5, tol=tol, max_coords=max_coords, rng=rng, skip_kinks=skip_kinks)
        worst = max(worst, rep.max_rel_error)
        coords += rep.n_checked
        kinks += rep.n_kinks
    return CaseResult(name, instances, coords, worst, tol, time.perf_counter() - start, kinks)


# coordinates sampled per input tensor for the expensive cases
SAMPLED = {"det_loss": 48}


def run_suite(instances: int = 100, model_instances: int = 2, seed: int = 0,
              model_coords: int | None = None) -> SuiteReport:
    """Check all ops and losses on ``instances`` random instances each, then
    every parameter of the tiny model under the joint loss (or ``model_coords``
    sampled coordinates per tensor).

    Piecewise ops are sampled away from their kinks in the op cases; the
    end-to-end case skips (and counts) coordinates whose perturbation
    crosses one.
    """
    results = [run_case(n, b, instances, seed, OP_TOL, SAMPLED.get(n))
               for n, b in {**OP_CASES, **LOSS_CASES}.items()]
    results.append(run_case("tiny_model+joint_loss", _model_case, model_instances, seed, MODEL_TOL,
                            model_coords, skip_kinks=True))
    return SuiteReport(results)
